#include "dysp/losses.hpp"

#include "dysp/error.hpp"

namespace dysp::losses {

namespace {

void check_pair(const Tensor& a, const Tensor& b, const char* op) {
  if (a.rank() != 4 || a.shape() != b.shape())
    throw DimensionError(std::string(op) + ": expected matching [N,C,H,W] tensors, got " + shape_str(a.shape()) +
                         " and " + shape_str(b.shape()));
}

// Per-class totals over batch and space: [N,C,H,W] -> [C].
Tensor class_sums(const Tensor& x) { return sum(sum(sum(x, 3), 2), 0); }

Tensor class_mean(const Tensor& per_class, const LossSpec& spec) {
  const std::size_t c = per_class.numel();
  if (spec.class_weights.empty()) return mean(per_class);
  if (spec.class_weights.size() != c)
    throw ValidationError("class_weights has " + std::to_string(spec.class_weights.size()) + " entries for " +
                          std::to_string(c) + " classes");
  double total = 0.0;
  for (double w : spec.class_weights) total += w;
  return scale(sum(mul(per_class, Tensor::from({c}, spec.class_weights))), 1.0 / total);
}

enum class Overlap { Dice, Jaccard };

Tensor overlap_loss(const Tensor& probs, const Tensor& target, const LossSpec& spec, Overlap kind) {
  check_pair(probs, target, kind == Overlap::Dice ? "dice_loss" : "jaccard_loss");
  validate_one_hot(target);
  const Tensor inter = class_sums(mul(probs, target));
  const Tensor p = class_sums(probs);
  const Tensor t = class_sums(target);
  Tensor coef;
  if (kind == Overlap::Dice)
    coef = div(add_scalar(scale(inter, 2.0), spec.smooth), add_scalar(add(p, t), spec.smooth));
  else
    coef = div(add_scalar(inter, spec.smooth), add_scalar(sub(add(p, t), inter), spec.smooth));
  return add_scalar(neg(class_mean(coef, spec)), 1.0);
}

}  // namespace

LossKind parse_loss_kind(std::string_view name) {
  if (name == "dice") return LossKind::Dice;
  if (name == "jaccard") return LossKind::Jaccard;
  if (name == "ce") return LossKind::CE;
  if (name == "dice_ce") return LossKind::DicePlusCE;
  if (name == "jaccard_ce") return LossKind::JaccardPlusCE;
  throw ConfigError("unknown loss '" + std::string(name) + "' (expected dice, jaccard, ce, dice_ce, jaccard_ce)");
}

std::string to_string(LossKind kind) {
  switch (kind) {
    case LossKind::Dice: return "dice";
    case LossKind::Jaccard: return "jaccard";
    case LossKind::CE: return "ce";
    case LossKind::DicePlusCE: return "dice_ce";
    case LossKind::JaccardPlusCE: return "jaccard_ce";
  }
  return "?";
}

void LossSpec::validate() const {
  if (!(smooth > 0.0)) throw ConfigError("loss smooth must be > 0");
  for (double w : class_weights)
    if (!(w > 0.0)) throw ConfigError("class weights must be positive");
}

void validate_one_hot(const Tensor& target) {
  if (target.rank() != 4) throw ValidationError("target must be [N,C,H,W], got " + shape_str(target.shape()));
  const std::size_t n = target.dim(0), c = target.dim(1), hw = target.dim(2) * target.dim(3);
  const auto d = target.data();
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t p = 0; p < hw; ++p) {
      double total = 0.0;
      for (std::size_t k = 0; k < c; ++k) {
        const double v = d[(b * c + k) * hw + p];
        if (v != 0.0 && v != 1.0) throw ValidationError("target is not one-hot (value " + std::to_string(v) + ")");
        total += v;
      }
      if (total != 1.0) throw ValidationError("target is not one-hot (pixel class sum " + std::to_string(total) + ")");
    }
}

Tensor dice_loss(const Tensor& probs, const Tensor& target, const LossSpec& spec) {
  return overlap_loss(probs, target, spec, Overlap::Dice);
}

Tensor jaccard_loss(const Tensor& probs, const Tensor& target, const LossSpec& spec) {
  return overlap_loss(probs, target, spec, Overlap::Jaccard);
}

Tensor cross_entropy(const Tensor& logits, const Tensor& target, const LossSpec& spec) {
  check_pair(logits, target, "cross_entropy");
  const Tensor nll = neg(sum(mul(log_softmax(logits, 1), target), 1));  // [N,H,W]
  if (spec.class_weights.empty()) return mean(nll);
  const std::size_t n = target.dim(0), c = target.dim(1), hw = target.dim(2) * target.dim(3);
  if (spec.class_weights.size() != c) throw ValidationError("class_weights size does not match class count");
  std::vector<double> weights(n * hw, 0.0);
  double total = 0.0;
  const auto t = target.data();
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t p = 0; p < hw; ++p) {
      double w = 0.0;
      for (std::size_t k = 0; k < c; ++k) w += spec.class_weights[k] * t[(b * c + k) * hw + p];
      weights[b * hw + p] = w;
      total += w;
    }
  return scale(sum(mul(nll, Tensor::from(nll.shape(), std::move(weights)))), 1.0 / total);
}

Tensor combined(const LossSpec& spec, const Tensor& logits, const Tensor& target) {
  spec.validate();
  switch (spec.kind) {
    case LossKind::Dice: return dice_loss(softmax(logits, 1), target, spec);
    case LossKind::Jaccard: return jaccard_loss(softmax(logits, 1), target, spec);
    case LossKind::CE: return cross_entropy(logits, target, spec);
    case LossKind::DicePlusCE:
      return add(dice_loss(softmax(logits, 1), target, spec), cross_entropy(logits, target, spec));
    case LossKind::JaccardPlusCE:
      return add(jaccard_loss(softmax(logits, 1), target, spec), cross_entropy(logits, target, spec));
  }
  throw ConfigError("unhandled loss kind");
}

}  // namespace dysp::losses
