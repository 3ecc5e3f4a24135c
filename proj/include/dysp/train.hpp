#pragma once

// Two-phase training (decoder first, then the whole network) with Adam, a
// step learning-rate schedule that restarts each phase, and the optional
// domain-generalisation techniques: weighted sampling, stain augmentation
// and a domain-adversarial branch.

#include <array>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "dysp/augment.hpp"
#include "dysp/image.hpp"
#include "dysp/losses.hpp"
#include "dysp/stain.hpp"
#include "dysp/transunet.hpp"
#include "dysp/wsi.hpp"
#include "json.hpp"

namespace dysp::train {

struct DgOptions {
  bool ws = false;  // weighted sampling by (scanner, label) stratum
  bool sa = false;  // stain augmentation
  bool da = false;  // domain-adversarial branch
  double da_weight = 1.0;
  double da_gamma = 10.0;
};

struct TrainConfig {
  std::size_t phase1_epochs = 20;
  std::size_t phase2_epochs = 30;
  double lr_hi = 1e-4;
  double lr_lo = 1e-5;
  std::size_t decay_epoch = 10;
  std::size_t batch_size = 4;
  losses::LossSpec loss{};
  DgOptions dg{};
  augment::AugmentPolicy augment = augment::AugmentPolicy::none();
  stain::AugmentParams stain{};
  double val_fraction = 0.1;
  std::size_t workers = 1;
  std::uint64_t seed = 0;

  void validate() const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

struct AdamState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::size_t step = 0;
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;

  // Zeroed moments shaped like `params`.
  static AdamState for_params(const std::vector<Tensor>& params);
};

// One bias-corrected Adam update of every tensor in `params`. Throws
// ValidationError when grads or moments do not mirror the parameters.
void adam_step(std::vector<Tensor>& params, const std::vector<std::vector<double>>& grads, AdamState& state, double lr);

// lr_hi before decay_epoch, lr_lo from then on; `epoch` counts within a phase.
double lr_at(std::size_t epoch, const TrainConfig& cfg);

// 2 / (1 + exp(-gamma p)) - 1 for training progress p in [0, 1].
double da_lambda(double progress, double gamma = 10.0);

struct Sample {
  Image patch;  // RGB, model input size
  Mask mask;    // 0/1
  std::size_t domain = 0;
  std::string slide;
  std::string scanner;
  wsi::TileLabel label = wsi::TileLabel::Normal;
};

// [N, 3, S, S] normalized input and [N, 2, S, S] one-hot target.
Tensor batch_input(const std::vector<const Sample*>& batch);
Tensor batch_target(const std::vector<const Sample*>& batch, std::size_t classes = 2);

// Cross-entropy of the domain classifier over mean-pooled bottleneck tokens.
// Throws ConfigError when the model has no domain head.
Tensor da_branch(const TransUnet& model, const Tensor& tokens, const std::vector<std::size_t>& domains, double lambda);

// Pixel F1 of class 1 (argmax, pooled over samples) in eval mode; the model's
// training flag is restored afterwards. Empty predictions and targets give 1.
double validation_f1(TransUnet& model, const std::vector<Sample>& samples);

struct EpochMetrics {
  int phase = 1;
  std::size_t epoch = 0;
  double loss = 0.0;
  std::optional<double> val_f1;
  double lr = 0.0;
};

void to_json(nlohmann::json& j, const EpochMetrics& m);

struct TrainResult {
  std::vector<EpochMetrics> metrics;
  std::size_t updates = 0;
  // Adam moment elements allocated in phase 1 and phase 2 (per buffer).
  std::array<std::size_t, 2> moment_elements{0, 0};
};

struct TrainHooks {
  std::function<void(const EpochMetrics&)> on_epoch;
  std::function<void(int phase, const TransUnet&)> on_phase_end;
};

// Phase 1 updates decoder and head parameters only; phase 2 updates all.
// Throws ValidationError on an empty training set and ConfigError when DA is
// requested with fewer than two domains or without a domain head.
TrainResult two_phase_train(TransUnet& model, const std::vector<Sample>& train_set, const std::vector<Sample>& val_set,
                            const TrainConfig& cfg, const TrainHooks& hooks = {});

// Holds out ceil(val_fraction * slides) whole slides (seeded), or a tenth of
// the rows when there is a single slide. Returns {train, val} row indices.
std::pair<std::vector<std::size_t>, std::vector<std::size_t>> split_by_slide(const wsi::Manifest& rows,
                                                                              double val_fraction, std::uint64_t seed);

// Reads every manifest row's tile and ground-truth crop (gt.png beside the
// slide's meta.json). Domains index the sorted distinct scanners.
std::vector<Sample> load_samples(const wsi::Manifest& rows, const std::vector<std::size_t>& indices,
                                 const std::vector<std::string>& scanners);
std::vector<std::string> scanner_list(const wsi::Manifest& rows);

// Checkpoint plus a JSON sidecar (path + ".json") holding the model config.
void save_model(const std::filesystem::path& path, const TransUnet& model, const nlohmann::json& extra = {});
// Throws IoError when unreadable and ConfigError on config mismatch.
TransUnet load_model(const std::filesystem::path& path);

}  // namespace dysp::train
