#pragma once

// Segmentation losses over [N, C, H, W] class maps with one-hot targets.

#include <string>
#include <string_view>
#include <vector>

#include "dysp/tensor.hpp"

namespace dysp::losses {

enum class LossKind { Dice, Jaccard, CE, DicePlusCE, JaccardPlusCE };

LossKind parse_loss_kind(std::string_view name);  // dice|jaccard|ce|dice_ce|jaccard_ce
std::string to_string(LossKind kind);

struct LossSpec {
  LossKind kind = LossKind::DicePlusCE;
  double smooth = 1e-5;
  std::vector<double> class_weights;  // empty = unweighted

  void validate() const;
};

// Throws ValidationError unless every pixel's class vector is one-hot.
void validate_one_hot(const Tensor& target);

// 1 - class-mean of (2*sum(p*t) + s) / (sum(p) + sum(t) + s).
Tensor dice_loss(const Tensor& probs, const Tensor& target, const LossSpec& spec = {});
// 1 - class-mean of (sum(p*t) + s) / (sum(p) + sum(t) - sum(p*t) + s).
Tensor jaccard_loss(const Tensor& probs, const Tensor& target, const LossSpec& spec = {});
// Pixel mean of -log softmax(logits) at the target class.
Tensor cross_entropy(const Tensor& logits, const Tensor& target, const LossSpec& spec = {});
// Unweighted sum of the components selected by spec.kind; softmax is applied
// to logits for the overlap terms.
Tensor combined(const LossSpec& spec, const Tensor& logits, const Tensor& target);

}  // namespace dysp::losses
