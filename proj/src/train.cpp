#include "dysp/train.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <thread>

#include "dysp/checkpoint.hpp"
#include "dysp/error.hpp"

namespace dysp::train {

namespace fs = std::filesystem;

void TrainConfig::validate() const {
  std::vector<std::string> problems;
  if (phase1_epochs + phase2_epochs == 0) problems.push_back("at least one training epoch is required");
  for (std::size_t n : {phase1_epochs, phase2_epochs})
    if (n > 0 && decay_epoch >= n)
      problems.push_back("decay_epoch " + std::to_string(decay_epoch) + " must be smaller than each phase's epoch count (" +
                         std::to_string(n) + ")");
  if (!(lr_hi > lr_lo && lr_lo > 0.0)) problems.push_back("learning rates must satisfy lr_hi > lr_lo > 0");
  if (batch_size == 0) problems.push_back("batch_size must be >= 1");
  if (!(val_fraction >= 0.0 && val_fraction < 1.0)) problems.push_back("val_fraction must lie in [0, 1)");
  if (dg.da_weight < 0.0 || dg.da_gamma < 0.0) problems.push_back("DA weight and gamma must be >= 0");
  if (!problems.empty()) {
    std::string msg = "invalid training config:";
    for (const auto& p : problems) msg += "\n  " + p;
    throw ConfigError(msg);
  }
  loss.validate();
  augment.validate();
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"phase1_epochs", c.phase1_epochs},
                     {"phase2_epochs", c.phase2_epochs},
                     {"lr_hi", c.lr_hi},
                     {"lr_lo", c.lr_lo},
                     {"decay_epoch", c.decay_epoch},
                     {"batch_size", c.batch_size},
                     {"loss", {{"kind", losses::to_string(c.loss.kind)}, {"smooth", c.loss.smooth}, {"class_weights", c.loss.class_weights}}},
                     {"dg", {{"ws", c.dg.ws}, {"sa", c.dg.sa}, {"da", c.dg.da}, {"da_weight", c.dg.da_weight}, {"da_gamma", c.dg.da_gamma}}},
                     {"augment", c.augment},
                     {"stain", {{"sigma1", c.stain.sigma1}, {"sigma2", c.stain.sigma2}, {"beta", c.stain.beta}, {"alpha", c.stain.alpha}}},
                     {"val_fraction", c.val_fraction},
                     {"workers", c.workers},
                     {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  static const std::set<std::string> known{"phase1_epochs", "phase2_epochs", "lr_hi", "lr_lo", "decay_epoch",
                                           "batch_size", "loss", "dg", "augment", "stain", "val_fraction",
                                           "workers", "seed"};
  for (const auto& [key, _] : j.items())
    if (!known.count(key)) throw ConfigError("unknown training config key '" + key + "'");
  TrainConfig d = c;
  try {
    d.phase1_epochs = j.value("phase1_epochs", d.phase1_epochs);
    d.phase2_epochs = j.value("phase2_epochs", d.phase2_epochs);
    d.lr_hi = j.value("lr_hi", d.lr_hi);
    d.lr_lo = j.value("lr_lo", d.lr_lo);
    d.decay_epoch = j.value("decay_epoch", d.decay_epoch);
    d.batch_size = j.value("batch_size", d.batch_size);
    if (j.contains("loss")) {
      const auto& l = j.at("loss");
      if (l.is_string()) {
        d.loss.kind = losses::parse_loss_kind(l.get<std::string>());
      } else {
        if (l.contains("kind")) d.loss.kind = losses::parse_loss_kind(l.at("kind").get<std::string>());
        d.loss.smooth = l.value("smooth", d.loss.smooth);
        d.loss.class_weights = l.value("class_weights", d.loss.class_weights);
      }
    }
    if (j.contains("dg")) {
      const auto& g = j.at("dg");
      d.dg.ws = g.value("ws", d.dg.ws);
      d.dg.sa = g.value("sa", d.dg.sa);
      d.dg.da = g.value("da", d.dg.da);
      d.dg.da_weight = g.value("da_weight", d.dg.da_weight);
      d.dg.da_gamma = g.value("da_gamma", d.dg.da_gamma);
    }
    if (j.contains("augment")) d.augment = j.at("augment").get<augment::AugmentPolicy>();
    if (j.contains("stain")) {
      const auto& s = j.at("stain");
      d.stain.sigma1 = s.value("sigma1", d.stain.sigma1);
      d.stain.sigma2 = s.value("sigma2", d.stain.sigma2);
      d.stain.beta = s.value("beta", d.stain.beta);
      d.stain.alpha = s.value("alpha", d.stain.alpha);
    }
    d.val_fraction = j.value("val_fraction", d.val_fraction);
    d.workers = j.value("workers", d.workers);
    d.seed = j.value("seed", d.seed);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("invalid training config: ") + e.what());
  }
  d.validate();
  c = d;
}

AdamState AdamState::for_params(const std::vector<Tensor>& params) {
  AdamState s;
  for (const auto& p : params) {
    s.m.emplace_back(p.numel(), 0.0);
    s.v.emplace_back(p.numel(), 0.0);
  }
  return s;
}

void adam_step(std::vector<Tensor>& params, const std::vector<std::vector<double>>& grads, AdamState& state, double lr) {
  if (grads.size() != params.size() || state.m.size() != params.size() || state.v.size() != params.size())
    throw ValidationError("adam_step: " + std::to_string(params.size()) + " parameters, " + std::to_string(grads.size()) +
                          " gradients, " + std::to_string(state.m.size()) + " moment buffers");
  for (std::size_t i = 0; i < params.size(); ++i)
    if (grads[i].size() != params[i].numel() || state.m[i].size() != params[i].numel() ||
        state.v[i].size() != params[i].numel())
      throw ValidationError("adam_step: parameter " + std::to_string(i) + " has " + std::to_string(params[i].numel()) +
                            " elements but gradient/moments of size " + std::to_string(grads[i].size()) + "/" +
                            std::to_string(state.m[i].size()));
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(state.beta1, t), c2 = 1.0 - std::pow(state.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto p = params[i].mutable_data();
    auto& m = state.m[i];
    auto& v = state.v[i];
    const auto& g = grads[i];
    for (std::size_t k = 0; k < p.size(); ++k) {
      m[k] = state.beta1 * m[k] + (1.0 - state.beta1) * g[k];
      v[k] = state.beta2 * v[k] + (1.0 - state.beta2) * g[k] * g[k];
      p[k] -= lr * (m[k] / c1) / (std::sqrt(v[k] / c2) + state.eps);
    }
  }
}

double lr_at(std::size_t epoch, const TrainConfig& cfg) { return epoch < cfg.decay_epoch ? cfg.lr_hi : cfg.lr_lo; }

double da_lambda(double progress, double gamma) { return 2.0 / (1.0 + std::exp(-gamma * progress)) - 1.0; }

Tensor batch_input(const std::vector<const Sample*>& batch) {
  if (batch.empty()) throw ValidationError("empty batch");
  const std::size_t s = batch[0]->patch.width;
  std::vector<double> x(batch.size() * 3 * s * s);
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const Image& img = batch[b]->patch;
    if (img.width != s || img.height != s || img.channels != 3)
      throw DimensionError("batch sample " + std::to_string(b) + " is not a " + std::to_string(s) + "x" +
                           std::to_string(s) + " RGB patch");
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t p = 0; p < s * s; ++p) x[(b * 3 + c) * s * s + p] = normalize_intensity(img.data[p * 3 + c]);
  }
  return Tensor::from({batch.size(), 3, s, s}, std::move(x));
}

Tensor batch_target(const std::vector<const Sample*>& batch, std::size_t classes) {
  const std::size_t s = batch.at(0)->mask.width;
  std::vector<double> t(batch.size() * classes * s * s, 0.0);
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const Mask& m = batch[b]->mask;
    if (m.width != s || m.height != s) throw DimensionError("batch mask " + std::to_string(b) + " has the wrong size");
    for (std::size_t p = 0; p < s * s; ++p) {
      const std::size_t k = std::min<std::size_t>(m.data[p] ? 1 : 0, classes - 1);
      t[(b * classes + k) * s * s + p] = 1.0;
    }
  }
  return Tensor::from({batch.size(), classes, s, s}, std::move(t));
}

Tensor da_branch(const TransUnet& model, const Tensor& tokens, const std::vector<std::size_t>& domains, double lambda) {
  if (!model.has_domain_head()) throw ConfigError("domain-adversarial training needs a model with num_domains >= 2");
  if (lambda < 0.0) throw ValidationError("gradient reversal lambda must be >= 0");
  const Tensor logits = model.domain_logits(tokens, lambda);  // [N, D]
  const std::size_t n = logits.dim(0), d = logits.dim(1);
  if (domains.size() != n) throw DimensionError("one domain label per sample is required");
  std::vector<double> t(n * d, 0.0);
  for (std::size_t b = 0; b < n; ++b) {
    if (domains[b] >= d) throw ValidationError("domain label " + std::to_string(domains[b]) + " out of range");
    t[b * d + domains[b]] = 1.0;
  }
  return losses::cross_entropy(reshape(logits, {n, d, 1, 1}), Tensor::from({n, d, 1, 1}, std::move(t)));
}

double validation_f1(TransUnet& model, const std::vector<Sample>& samples) {
  const bool was_training = model.training();
  model.set_training(false);
  NoGradGuard guard;
  std::size_t tp = 0, fp = 0, fn = 0;
  for (std::size_t start = 0; start < samples.size(); start += 4) {
    std::vector<const Sample*> batch;
    for (std::size_t i = start; i < std::min(samples.size(), start + 4); ++i) batch.push_back(&samples[i]);
    const Tensor logits = model.forward(batch_input(batch));
    const auto l = logits.data();
    const std::size_t hw = batch[0]->mask.pixel_count();
    for (std::size_t b = 0; b < batch.size(); ++b)
      for (std::size_t p = 0; p < hw; ++p) {
        const bool pred = l[(b * 2 + 1) * hw + p] > l[(b * 2) * hw + p];
        const bool truth = batch[b]->mask.data[p] != 0;
        tp += pred && truth;
        fp += pred && !truth;
        fn += !pred && truth;
      }
  }
  model.set_training(was_training);
  if (tp + fp + fn == 0) return 1.0;
  return 2.0 * static_cast<double>(tp) / static_cast<double>(2 * tp + fp + fn);
}

void to_json(nlohmann::json& j, const EpochMetrics& m) {
  j = nlohmann::json{{"phase", m.phase}, {"epoch", m.epoch}, {"loss", m.loss}, {"lr", m.lr}};
  j["val_f1"] = m.val_f1 ? nlohmann::json(*m.val_f1) : nlohmann::json(nullptr);
}

namespace {

Sample augmented(const Sample& s, const TrainConfig& cfg, Rng rng) {
  Sample out = s;
  auto [p, m] = augment::apply(cfg.augment, s.patch, s.mask, rng);
  out.patch = std::move(p);
  out.mask = std::move(m);
  if (cfg.dg.sa) out.patch = stain::augment_stain(out.patch, cfg.stain, rng);
  return out;
}

std::vector<std::size_t> epoch_order(const std::vector<Sample>& set, const TrainConfig& cfg, int phase,
                                     std::size_t epoch) {
  Rng rng = derive_rng({cfg.seed, 0x5a3d1e, static_cast<std::uint64_t>(phase), epoch});
  if (cfg.dg.ws) {
    wsi::Manifest strata(set.size());
    for (std::size_t i = 0; i < set.size(); ++i) {
      strata[i].scanner = set[i].scanner;
      strata[i].label = set[i].label;
    }
    return wsi::weighted_sample(strata, rng, set.size());
  }
  std::vector<std::size_t> order(set.size());
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[uniform_index(rng, i)]);
  return order;
}

// Prepares batch samples in parallel; every sample's randomness depends only
// on its (phase, epoch, position), so worker timing cannot change the batch.
std::vector<Sample> prepare(const std::vector<Sample>& set, const std::vector<std::size_t>& idx, std::size_t first,
                            std::size_t count, const TrainConfig& cfg, int phase, std::size_t epoch) {
  std::vector<Sample> out(count);
  auto work = [&](std::size_t w, std::size_t workers) {
    for (std::size_t i = w; i < count; i += workers)
      out[i] = augmented(set[idx[first + i]], cfg,
                         derive_rng({cfg.seed, 0xa06, static_cast<std::uint64_t>(phase), epoch, first + i}));
  };
  const std::size_t workers = std::min(std::max<std::size_t>(1, cfg.workers), count);
  if (workers <= 1) {
    work(0, 1);
    return out;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(workers);
  for (std::size_t w = 0; w < workers; ++w)
    pool.emplace_back([&, w] {
      try {
        work(w, workers);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
  return out;
}

}  // namespace

TrainResult two_phase_train(TransUnet& model, const std::vector<Sample>& train_set, const std::vector<Sample>& val_set,
                            const TrainConfig& cfg, const TrainHooks& hooks) {
  cfg.validate();
  if (train_set.empty()) throw ValidationError("training set is empty");
  if (cfg.dg.da) {
    std::set<std::size_t> domains;
    for (const auto& s : train_set) domains.insert(s.domain);
    if (domains.size() < 2) throw ConfigError("domain-adversarial training needs at least two scanner domains");
    if (!model.has_domain_head()) throw ConfigError("domain-adversarial training needs a model with a domain head");
  }
  const std::size_t batches_per_epoch = (train_set.size() + cfg.batch_size - 1) / cfg.batch_size;
  const std::size_t total_updates = (cfg.phase1_epochs + cfg.phase2_epochs) * batches_per_epoch;
  TrainResult result;
  auto& params = model.parameters();

  for (int phase = 1; phase <= 2; ++phase) {
    const std::size_t epochs = phase == 1 ? cfg.phase1_epochs : cfg.phase2_epochs;
    if (epochs == 0) continue;
    std::vector<Tensor> trainable;
    std::vector<bool> restore(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
      restore[i] = params[i].value.requires_grad();
      const bool train_it = phase == 2 || params[i].group == ParamGroup::Decoder || params[i].group == ParamGroup::Heads;
      params[i].value.set_requires_grad(train_it);
      if (train_it) trainable.push_back(params[i].value);
    }
    AdamState adam = AdamState::for_params(trainable);
    for (const auto& m : adam.m) result.moment_elements[phase - 1] += m.size();
    model.set_training(true);

    for (std::size_t epoch = 0; epoch < epochs; ++epoch) {
      const double lr = lr_at(epoch, cfg);
      const auto order = epoch_order(train_set, cfg, phase, epoch);
      double loss_sum = 0.0;
      for (std::size_t b = 0; b < batches_per_epoch; ++b) {
        const std::size_t first = b * cfg.batch_size;
        const std::size_t count = std::min(cfg.batch_size, order.size() - first);
        const std::vector<Sample> batch = prepare(train_set, order, first, count, cfg, phase, epoch);
        std::vector<const Sample*> ptrs;
        for (const auto& s : batch) ptrs.push_back(&s);
        const Tensor x = batch_input(ptrs), target = batch_target(ptrs, model.config().num_classes);
        Tensor loss;
        if (cfg.dg.da) {
          const ForwardResult r = model.forward_full(x);
          std::vector<std::size_t> domains;
          for (const auto& s : batch) domains.push_back(s.domain);
          const double progress = static_cast<double>(result.updates) / static_cast<double>(total_updates);
          loss = add(losses::combined(cfg.loss, r.logits, target),
                     scale(da_branch(model, r.tokens, domains, da_lambda(progress, cfg.dg.da_gamma)), cfg.dg.da_weight));
        } else {
          loss = losses::combined(cfg.loss, model.forward(x), target);
        }
        loss.backward();
        std::vector<std::vector<double>> grads;
        for (const auto& t : trainable) {
          if (t.has_grad())
            grads.emplace_back(t.grad().begin(), t.grad().end());
          else
            grads.emplace_back(t.numel(), 0.0);
        }
        adam_step(trainable, grads, adam, lr);
        model.zero_grad();
        loss_sum += loss.item();
        ++result.updates;
      }
      EpochMetrics m;
      m.phase = phase;
      m.epoch = epoch;
      m.loss = loss_sum / static_cast<double>(batches_per_epoch);
      m.lr = lr;
      if (!val_set.empty()) m.val_f1 = validation_f1(model, val_set);
      result.metrics.push_back(m);
      if (hooks.on_epoch) hooks.on_epoch(m);
    }
    for (std::size_t i = 0; i < params.size(); ++i) params[i].value.set_requires_grad(restore[i]);
    if (hooks.on_phase_end) hooks.on_phase_end(phase, model);
  }
  return result;
}

std::pair<std::vector<std::size_t>, std::vector<std::size_t>> split_by_slide(const wsi::Manifest& rows,
                                                                              double val_fraction, std::uint64_t seed) {
  std::vector<std::size_t> train, val;
  if (rows.empty() || val_fraction <= 0.0) {
    for (std::size_t i = 0; i < rows.size(); ++i) train.push_back(i);
    return {train, val};
  }
  std::set<std::string> ids;
  for (const auto& r : rows) ids.insert(r.slide);
  Rng rng = derive_rng({seed, 0x5911});
  if (ids.size() >= 2) {
    std::vector<std::string> slides(ids.begin(), ids.end());
    for (std::size_t i = slides.size(); i > 1; --i) std::swap(slides[i - 1], slides[uniform_index(rng, i)]);
    const auto n_val = std::min(slides.size() - 1,
                                static_cast<std::size_t>(std::ceil(val_fraction * static_cast<double>(slides.size()))));
    const std::set<std::string> held(slides.begin(), slides.begin() + static_cast<std::ptrdiff_t>(n_val));
    for (std::size_t i = 0; i < rows.size(); ++i) (held.count(rows[i].slide) ? val : train).push_back(i);
  } else {
    std::vector<std::size_t> order(rows.size());
    std::iota(order.begin(), order.end(), 0);
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[uniform_index(rng, i)]);
    const auto n_val = std::min(rows.size() - 1,
                                static_cast<std::size_t>(std::ceil(val_fraction * static_cast<double>(rows.size()))));
    val.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_val));
    train.assign(order.begin() + static_cast<std::ptrdiff_t>(n_val), order.end());
    std::sort(val.begin(), val.end());
    std::sort(train.begin(), train.end());
  }
  return {train, val};
}

std::vector<std::string> scanner_list(const wsi::Manifest& rows) {
  std::set<std::string> s;
  for (const auto& r : rows) s.insert(r.scanner);
  return {s.begin(), s.end()};
}

std::vector<Sample> load_samples(const wsi::Manifest& rows, const std::vector<std::size_t>& indices,
                                 const std::vector<std::string>& scanners) {
  std::map<std::string, wsi::WsiPyramid> slides;
  std::map<std::string, Mask> truths;
  std::vector<Sample> out;
  for (std::size_t i : indices) {
    const auto& r = rows.at(i);
    const std::string key = r.slide_dir.string();
    if (!slides.count(key)) {
      if (!fs::exists(r.slide_dir / "meta.json"))
        throw IoError("slide directory " + r.slide_dir.string() + " has no meta.json");
      slides.emplace(key, wsi::WsiPyramid::open(r.slide_dir));
      const fs::path gt = r.slide_dir / "gt.png";
      if (!fs::exists(gt)) throw IoError("missing ground truth " + gt.string());
      truths.emplace(key, binarize_levels(read_png(gt)));
    }
    const auto& slide = slides.at(key);
    const Mask& truth = truths.at(key);
    Sample s;
    s.patch = wsi::read_tile(slide, r.tile);
    s.mask = Mask(r.tile.size, r.tile.size, 1, 0);
    for (std::size_t y = 0; y < r.tile.size && r.tile.y + y < truth.height; ++y)
      for (std::size_t x = 0; x < r.tile.size && r.tile.x + x < truth.width; ++x)
        s.mask.at(x, y) = truth.at(r.tile.x + x, r.tile.y + y);
    s.slide = r.slide;
    s.scanner = r.scanner;
    s.label = r.label;
    s.domain = static_cast<std::size_t>(std::find(scanners.begin(), scanners.end(), r.scanner) - scanners.begin());
    out.push_back(std::move(s));
  }
  return out;
}

void save_model(const fs::path& path, const TransUnet& model, const nlohmann::json& extra) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  write_checkpoint(path, model.state());
  nlohmann::json meta = extra.is_object() ? extra : nlohmann::json::object();
  meta["model"] = model.config();
  std::ofstream out(path.string() + ".json");
  if (!out) throw IoError("cannot write " + path.string() + ".json");
  out << meta.dump(2) << "\n";
}

TransUnet load_model(const fs::path& path) {
  const fs::path sidecar = path.string() + ".json";
  std::ifstream in(sidecar);
  if (!in) throw IoError("cannot open model description " + sidecar.string());
  nlohmann::json meta;
  try {
    in >> meta;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("malformed " + sidecar.string() + ": " + e.what());
  }
  if (!meta.contains("model")) throw ConfigError(sidecar.string() + " has no model block");
  TransUnet model = TransUnet::build(meta.at("model").get<ModelConfig>(), 0);
  model.load_state(read_checkpoint(path));
  return model;
}

}  // namespace dysp::train
