// Acceptance runner: one PASS/FAIL line per criterion, nonzero exit if any
// criterion fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <functional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "dysp/error.hpp"
#include "dysp/eval.hpp"
#include "dysp/infer.hpp"
#include "dysp/losses.hpp"
#include "dysp/morphology.hpp"
#include "dysp/stain.hpp"
#include "dysp/synth.hpp"
#include "dysp/train.hpp"
#include "dysp/transunet.hpp"
#include "dysp/wsi.hpp"
#include "json.hpp"
#include "support/cli.hpp"
#include "support/fixtures.hpp"
#include "support/gradcheck.hpp"
#include "support/op_catalog.hpp"
#include "support/stain_fixture.hpp"

using namespace dysp;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = true;
  std::ostringstream detail;
  std::vector<std::string> failures;

  void expect(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      failures.push_back(what);
    }
  }
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

bool same_bits(const std::vector<float>& a, const std::vector<float>& b) {
  return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size() * sizeof(float)) == 0;
}

// ---------------------------------------------------------------- 1

void autodiff_suite(Outcome& o) {
  const auto t0 = Clock::now();
  double worst = 0.0;
  std::size_t ops = 0;
  for (const auto& [name, factory] : testing::op_catalog()) {
    double op_worst = 0.0;
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      std::mt19937_64 rng(seed * 7919 + 17);
      auto c = factory(rng);
      op_worst = std::max(op_worst, testing::check_gradients(c.loss, c.inputs, 1e-5).max_rel_error);
    }
    o.expect(op_worst < 1e-4, name + " rel err " + std::to_string(op_worst));
    worst = std::max(worst, op_worst);
    ++ops;
  }
  const double secs = seconds_since(t0);
  o.expect(secs < 60.0, "runtime " + std::to_string(secs) + " s");
  o.detail << ops << " ops x 20 seeds, worst rel err " << worst << ", " << secs << " s";
}

// ---------------------------------------------------------------- 2

void model_gradcheck(Outcome& o) {
  const auto t0 = Clock::now();
  auto model = TransUnet::build(testing::micro_config(), 21);
  std::mt19937_64 rng(22);
  const Tensor x = testing::random_tensor({1, 3, 32, 32}, rng, -1, 1, false);
  const Tensor target = testing::random_target(1, 32, rng);
  std::vector<Tensor> inputs;
  for (const auto& p : model.parameters()) inputs.push_back(p.value);
  const auto res = testing::check_gradients([&] { return losses::combined({}, model.forward(x), target); }, inputs,
                                            1e-6, 1e-5);
  const double secs = seconds_since(t0);
  o.expect(res.checked == model.parameter_count(), "not every parameter was checked");
  o.expect(res.max_rel_error < 1e-3, "worst " + res.worst);
  o.expect(secs < 120.0, "runtime " + std::to_string(secs) + " s");
  o.detail << res.checked << " parameters, worst rel err " << res.max_rel_error << ", " << secs << " s";
}

// ---------------------------------------------------------------- 3

void geometry(Outcome& o) {
  std::vector<std::pair<std::size_t, ModelConfig>> configs{
      {32, testing::micro_config()}, {64, ModelConfig::toy()}, {512, ModelConfig::full()}};
  for (auto& [s, cfg] : configs) {
    auto model = TransUnet::build(cfg, 3);
    const std::string tag = "S=" + std::to_string(s) + ": ";
    o.expect(cfg.tokens() == (s / 16) * (s / 16), tag + "token count");
    const auto rows = model.layer_shapes();
    auto extent = [&](const std::string& name) -> std::size_t {
      for (const auto& r : rows)
        if (r.name == name) return r.output.size() > 1 ? r.output[1] : 0;
      return 0;
    };
    const std::vector<std::string> ladder{"decoder.conv_more", "decoder.stage1", "decoder.stage2", "decoder.stage3",
                                          "decoder.stage4"};
    for (std::size_t i = 0; i < ladder.size(); ++i)
      o.expect(extent(ladder[i]) == (s / 16) << i, tag + ladder[i] + " extent");
    // skip inputs widen the first convolution of decoder stages 1..3
    const std::size_t skip_ch[3] = {cfg.encoder_channels[2], cfg.encoder_channels[1], cfg.encoder_channels[0]};
    std::size_t prev = cfg.head_channels;
    for (std::size_t i = 0; i < 4; ++i) {
      const std::string name = "decoder.stage" + std::to_string(i + 1) + ".a.conv.weight";
      std::size_t in = 0;
      for (const auto& p : model.parameters())
        if (p.name == name) in = p.value.dim(1);
      o.expect(in == prev + (i < 3 ? skip_ch[i] : 0), tag + name + " input channels");
      prev = cfg.decoder_channels[i];
    }
    if (s == 512) continue;  // shape-only at full size
    model.set_training(false);
    NoGradGuard guard;
    std::mt19937_64 rng(s);
    const auto r = model.forward_full(testing::random_tensor({1, 3, s, s}, rng, -1, 1, false));
    o.expect(r.tokens.dim(1) == cfg.tokens(), tag + "runtime token count");
    o.expect(r.logits.dim(2) == s && r.logits.dim(3) == s, tag + "logit extent");
    for (std::size_t k = 0; k < 3; ++k) {
      auto skips = r.features.skips;
      skips[k] = Tensor::zeros(skips[k].shape());
      const Tensor changed = model.cascaded_decode(r.tokens, skips);
      const bool same = std::equal(changed.data().begin(), changed.data().end(), r.logits.data().begin());
      o.expect(!same, tag + "skip " + std::to_string(k) + " is dead");
    }
  }
  o.detail << "S in {32, 64, 512}: (S/16)^2 tokens, ladder S/16..S, 3 skips live (512 shape-only)";
}

// ---------------------------------------------------------------- 4

struct Naive {
  double dice, jaccard, ce;
};

Naive naive_losses(const Tensor& logits, const Tensor& target, double smooth) {
  const std::size_t n = logits.dim(0), c = logits.dim(1), hw = logits.dim(2) * logits.dim(3);
  const auto z = logits.data();
  const auto t = target.data();
  std::vector<double> inter(c, 0.0), ps(c, 0.0), ts(c, 0.0);
  double ce = 0.0;
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t p = 0; p < hw; ++p) {
      double denom = 0.0;
      for (std::size_t k = 0; k < c; ++k) denom += std::exp(z[(b * c + k) * hw + p]);
      for (std::size_t k = 0; k < c; ++k) {
        const std::size_t i = (b * c + k) * hw + p;
        const double prob = std::exp(z[i]) / denom;
        inter[k] += prob * t[i];
        ps[k] += prob;
        ts[k] += t[i];
        ce -= t[i] * std::log(prob);
      }
    }
  Naive out{0.0, 0.0, ce / static_cast<double>(n * hw)};
  for (std::size_t k = 0; k < c; ++k) {
    out.dice += (2 * inter[k] + smooth) / (ps[k] + ts[k] + smooth);
    out.jaccard += (inter[k] + smooth) / (ps[k] + ts[k] - inter[k] + smooth);
  }
  out.dice = 1.0 - out.dice / static_cast<double>(c);
  out.jaccard = 1.0 - out.jaccard / static_cast<double>(c);
  return out;
}

Tensor one_hot_row(const std::vector<int>& labels) {
  Tensor t = Tensor::zeros({1, 2, 1, labels.size()});
  for (std::size_t i = 0; i < labels.size(); ++i) t.mutable_data()[labels[i] * labels.size() + i] = 1.0;
  return t;
}

void loss_oracles(Outcome& o) {
  double worst = 0.0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    std::mt19937_64 rng(seed);
    const Tensor logits = testing::random_tensor({2, 2, 8, 8}, rng, -3, 3, false);
    const Tensor target = testing::random_target(2, 8, rng);
    const Naive ref = naive_losses(logits, target, 1e-5);
    const Tensor probs = softmax(logits, 1);
    worst = std::max({worst, std::abs(losses::dice_loss(probs, target).item() - ref.dice),
                      std::abs(losses::jaccard_loss(probs, target).item() - ref.jaccard),
                      std::abs(losses::cross_entropy(logits, target).item() - ref.ce)});
  }
  o.expect(worst < 1e-9, "oracle disagreement " + std::to_string(worst));

  // prediction {1,2} against truth {2,3} on a 1x4 row: one shared pixel
  const Tensor pred = one_hot_row({1, 1, 0, 0}), gt = one_hot_row({0, 1, 1, 0});
  const losses::LossSpec fg{losses::LossKind::Dice, 1e-300, {1e-300, 1.0}};
  const double dice = 1.0 - losses::dice_loss(pred, gt, fg).item();
  const double iou = 1.0 - losses::jaccard_loss(pred, gt, fg).item();
  const double ce = losses::cross_entropy(Tensor::zeros({1, 2, 1, 16}), one_hot_row({0, 1, 1, 0, 1, 0, 0, 1, 0, 0, 1, 1, 0, 1, 0, 1}))
                        .item();
  o.expect(std::abs(dice - 0.5) < 1e-12, "Dice fixture " + std::to_string(dice));
  o.expect(std::abs(iou - 1.0 / 3.0) < 1e-12, "IoU fixture " + std::to_string(iou));
  o.expect(std::abs(ce - std::log(2.0)) < 1e-15, "CE fixture " + std::to_string(ce));
  o.detail << "worst oracle diff " << worst << "; Dice " << dice << ", IoU " << iou << ", CE " << ce;
}

// ---------------------------------------------------------------- 5

void macenko(Outcome& o) {
  double worst_angle = 0.0;
  for (const auto& truth : {testing::ruifrok_he(), stain::reference_matrix()})
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
      const auto mix = testing::make_mixture(truth, 96, 96, seed, 0.8);
      const auto est = stain::estimate_stain_matrix(mix.rgb);
      worst_angle = std::max({worst_angle, testing::angle_deg(est.h, truth.h), testing::angle_deg(est.e, truth.e)});
    }
  o.expect(worst_angle < 2.0, "angle " + std::to_string(worst_angle));

  const auto truth = testing::ruifrok_he();
  const auto mix = testing::make_mixture(truth, 80, 80, 8, 0.5);
  const auto conc = stain::get_concentrations(mix.od, truth);
  double se = 0.0;
  for (std::size_t i = 0; i < conc.data.size(); ++i) se += std::pow(conc.data[i] - mix.c.data[i], 2);
  const double rms = std::sqrt(se / static_cast<double>(conc.data.size()));
  o.expect(rms < 1e-3, "concentration RMS " + std::to_string(rms));

  stain::AugmentParams zero;
  zero.sigma1 = zero.sigma2 = 0.0;
  int worst_u8 = 0;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const auto m = testing::make_mixture(truth, 64, 64, 10 + seed, 0.8);
    Rng rng(seed);
    worst_u8 = std::max(worst_u8, testing::max_abs_diff(stain::augment_stain(m.rgb, zero, rng), m.rgb));
  }
  o.expect(worst_u8 <= 2, "sigma=0 round trip off by " + std::to_string(worst_u8));
  o.detail << "worst angle " << worst_angle << " deg, concentration RMS " << rms << ", sigma=0 round trip within "
           << worst_u8 << " u8";
}

// ---------------------------------------------------------------- 6

std::vector<std::size_t> oracle_positions(std::size_t extent, std::size_t patch, std::size_t stride) {
  if (extent <= patch) return {0};
  std::vector<std::size_t> out;
  for (std::size_t p = 0; p < extent; p += stride) {
    const std::size_t q = std::min(p, extent - patch);
    if (out.empty() || out.back() != q) out.push_back(q);
    if (p + patch >= extent) break;
  }
  return out;
}

void tessellation(Outcome& o) {
  const auto tiles = wsi::tessellate(1024, 1024);
  std::set<std::size_t> xs;
  for (const auto& t : tiles) xs.insert(t.x);
  o.expect(tiles.size() == 9, "1024^2 gives " + std::to_string(tiles.size()) + " tiles");
  o.expect(xs == std::set<std::size_t>{0, 328, 512}, "x positions");

  // 2-D coverage is the product of per-axis coverage, so every canvas up to
  // 2048^2 is covered iff every extent up to 2048 is
  for (std::size_t n = 1; n <= 2048; ++n) {
    const auto pos = wsi::tile_positions(n, 512, 184);
    if (pos != oracle_positions(n, 512, 328)) {
      o.expect(false, "positions differ at extent " + std::to_string(n));
      break;
    }
    std::vector<int> cover(n, 0);
    for (auto p : pos)
      for (std::size_t i = p; i < std::min(n, p + 512); ++i) ++cover[i];
    if (*std::min_element(cover.begin(), cover.end()) < 1) {
      o.expect(false, "gap at extent " + std::to_string(n));
      break;
    }
  }
  for (auto [w, h] : std::vector<std::pair<std::size_t, std::size_t>>{{2048, 2048}, {1024, 1024}, {841, 1500}, {2047, 513}}) {
    std::vector<std::uint8_t> cover(w * h, 0);
    for (const auto& t : wsi::tessellate(w, h))
      for (std::size_t y = t.y; y < std::min(h, t.y + t.size); ++y)
        for (std::size_t x = t.x; x < std::min(w, t.x + t.size); ++x) ++cover[y * w + x];
    o.expect(*std::min_element(cover.begin(), cover.end()) >= 1, "2-D gap in " + std::to_string(w) + "x" + std::to_string(h));
  }
  o.detail << "9 tiles at x {0, 328, 512}; every extent 1..2048 covered, 2-D spot checks covered";
}

// ---------------------------------------------------------------- 7

void stitching(Outcome& o) {
  const std::size_t w = 700, h = 530;
  const auto tiles = wsi::tessellate(w, h, 128, 46);
  auto factory = [](std::size_t) -> infer::TileFn {
    return [](const wsi::TileSpec& t) {
      Rng rng = derive_rng({9, t.x, t.y});
      std::vector<float> p(t.size * t.size);
      for (auto& v : p) v = static_cast<float>(uniform01(rng));
      return p;
    };
  };
  const auto ref = infer::stitch(w, h, 1.0, tiles, factory, 1);
  for (std::size_t workers : {2u, 4u, 8u}) {
    const auto c = infer::stitch(w, h, 1.0, tiles, factory, workers);
    o.expect(same_bits(c.probabilities(), ref.probabilities()) && c.sums() == ref.sums() && c.counts() == ref.counts(),
             std::to_string(workers) + " workers differ");
  }
  infer::ProbabilityCanvas c(4, 2);
  c.add_tile(0, 0, 2, std::vector<float>(4, 0.2f));
  c.add_tile(1, 0, 2, std::vector<float>(4, 0.8f));
  c.finalize();
  o.expect(c.prob(1, 0) == 0.5f && c.prob(1, 1) == 0.5f, "0.2/0.8 overlap gives " + std::to_string(c.prob(1, 0)));
  o.detail << tiles.size() << " tiles on " << w << "x" << h << ": workers {1,2,4,8} bitwise equal; 0.2/0.8 -> "
           << c.prob(1, 0);
}

// ---------------------------------------------------------------- 8

Mask rect_mask(std::size_t w, std::size_t h, std::vector<std::array<std::size_t, 4>> rects) {
  Mask m(w, h, 1, 0);
  for (auto [x0, y0, x1, y1] : rects)
    for (std::size_t y = y0; y < y1; ++y)
      for (std::size_t x = x0; x < x1; ++x) m.at(x, y) = 1;
  return m;
}

void postprocessing(Outcome& o) {
  infer::PostprocessParams small;
  small.min_object_area = 100;
  small.min_hole_area = 100;
  const infer::PostprocessParams defaults;

  const Mask gap = rect_mask(64, 40, {{5, 10, 25, 30}, {27, 10, 47, 30}});
  const Mask merged = infer::post_process(gap, small);
  o.expect(morph::label(merged, morph::Connectivity::Eight).count() == 1 && merged.at(26, 20) == 1,
           "2-px gap not merged");

  const Mask blob = rect_mask(50, 50, {{20, 20, 25, 22}});
  o.expect(count_foreground(infer::post_process(blob, defaults)) == 0, "10-px object survived");

  Mask ring = rect_mask(60, 60, {{10, 10, 40, 40}, {50, 50, 52, 52}});
  for (std::size_t y = 20; y < 23; ++y)
    for (std::size_t x = 20; x < 23; ++x) ring.at(x, y) = 0;
  o.expect(infer::post_process(ring, small) == rect_mask(60, 60, {{10, 10, 40, 40}}), "hole/speck fixture");

  const Mask empty(30, 30, 1, 0);
  std::size_t checked = 0;
  for (const Mask* m : std::initializer_list<const Mask*>{&gap, &blob, &ring, &empty})
    for (const infer::PostprocessParams* p : std::initializer_list<const infer::PostprocessParams*>{&small, &defaults}) {
      const Mask once = infer::post_process(*m, *p);
      o.expect(infer::post_process(once, *p) == once, "not idempotent");
      ++checked;
    }
  o.detail << "gap merge, small-object removal, hole fill; idempotent on " << checked << " fixture/parameter pairs";
}

// ---------------------------------------------------------------- 9

void metrics(Outcome& o) {
  std::mt19937_64 rng(11);
  std::size_t rois = 0;
  for (int trial = 0; trial < 10; ++trial) {
    wsi::GroundTruth gt;
    gt.mask = Mask(64, 64, 1, 0);
    gt.roi.assign(64 * 64, 0);
    gt.roi_count = 3;
    std::bernoulli_distribution coin(0.1 + 0.08 * trial);
    std::uniform_int_distribution<int> id(0, 3);
    Mask pred(64, 64, 1, 0);
    for (std::size_t p = 0; p < 64 * 64; ++p) {
      gt.mask.data[p] = coin(rng);
      pred.data[p] = coin(rng);
      gt.roi[p] = id(rng);
    }
    const auto all = eval::confuse_all(pred, gt, 3);
    for (int r = 1; r <= 3; ++r) {
      std::size_t tp = 0, fp = 0, fn = 0, tn = 0;
      for (std::size_t y = 0; y < 64; ++y)
        for (std::size_t x = 0; x < 64; ++x) {
          if (gt.roi[y * 64 + x] != r) continue;
          const bool pp = pred.at(x, y) != 0, tt = gt.mask.at(x, y) != 0;
          tp += pp && tt;
          fp += pp && !tt;
          fn += !pp && tt;
          tn += !pp && !tt;
        }
      const auto& c = all[static_cast<std::size_t>(r - 1)];
      o.expect(c.tp == tp && c.fp == fp && c.fn == fn && c.tn == tn, "oracle mismatch");
      ++rois;
    }
  }
  eval::RoiConfusion one_fp;
  one_fp.fp = 1;
  one_fp.tn = 9999;
  const auto m = eval::case_metrics(one_fp);
  o.expect(m.f1 == 0.0 && m.recall == 0.0 && m.precision == 0.0, "single-FP case is not all zero");
  const double spec = eval::control_specificity(one_fp);
  o.expect(spec == 0.9999, "specificity " + std::to_string(spec));
  o.detail << rois << " ROIs match the brute-force oracle; one FP with TP=0 -> F1 " << m.f1 << "; 1 FP / 10000 -> "
           << spec;
}

// ---------------------------------------------------------------- 10

std::vector<train::Sample> patches(std::size_t n, std::size_t size, Rng& rng) {
  std::vector<train::Sample> out;
  for (std::size_t i = 0; i < n; ++i) {
    auto [p, m] = synth::make_patch(size, rng);
    train::Sample s;
    s.patch = std::move(p);
    s.mask = std::move(m);
    out.push_back(std::move(s));
  }
  return out;
}

void training_smoke(Outcome& o) {
  const auto t0 = Clock::now();
  Rng rng(1);
  const auto train_set = patches(8, 64, rng);
  const auto val_set = patches(8, 64, rng);
  train::TrainConfig cfg;
  cfg.phase1_epochs = 2;
  cfg.phase2_epochs = 2;
  cfg.decay_epoch = 1;
  cfg.lr_hi = 3e-3;
  cfg.lr_lo = 3e-4;
  cfg.batch_size = 1;
  double initial = 0.0;
  {
    TransUnet probe = TransUnet::build(ModelConfig::toy(), 7);
    NoGradGuard guard;
    for (const auto& s : train_set)
      initial += losses::combined(cfg.loss, probe.forward(train::batch_input({&s})), train::batch_target({&s})).item();
    initial /= static_cast<double>(train_set.size());
  }
  TransUnet model = TransUnet::build(ModelConfig::toy(), 7);
  std::vector<std::vector<double>> start;
  for (const auto& p : model.parameters()) start.emplace_back(p.value.data().begin(), p.value.data().end());
  bool frozen = true;
  train::TrainHooks hooks;
  hooks.on_phase_end = [&](int phase, const TransUnet& m) {
    if (phase != 1) return;
    const auto& ps = m.parameters();
    for (std::size_t i = 0; i < ps.size(); ++i)
      if (ps[i].group == ParamGroup::Encoder || ps[i].group == ParamGroup::Transformer)
        frozen = frozen && std::equal(ps[i].value.data().begin(), ps[i].value.data().end(), start[i].begin());
  };
  const auto res = train::two_phase_train(model, train_set, val_set, cfg, hooks);
  const double f1 = *res.metrics.back().val_f1;
  o.expect(f1 > 0.9, "val F1 " + std::to_string(f1));
  int decreasing = 0;
  double prev = initial;
  for (const auto& m : res.metrics) {
    decreasing += m.loss < prev;
    prev = m.loss;
  }
  o.expect(decreasing >= 3, std::to_string(decreasing) + " of 4 epochs decreased the loss");
  o.expect(frozen, "encoder or transformer moved in phase 1");

  // the schedule with its default rates and decay epoch, run through the trainer
  train::TrainConfig sched;
  sched.phase1_epochs = 12;
  sched.phase2_epochs = 12;
  sched.batch_size = 1;
  Rng srng(2);
  const auto one = patches(1, 32, srng);
  TransUnet micro = TransUnet::build(testing::micro_config(), 1);
  const auto sr = train::two_phase_train(micro, one, {}, sched);
  bool schedule_ok = sr.metrics.size() == 24;
  for (const auto& m : sr.metrics) schedule_ok = schedule_ok && m.lr == (m.epoch < 10 ? 1e-4 : 1e-5);
  schedule_ok = schedule_ok && sr.metrics[12].phase == 2 && sr.metrics[12].lr == 1e-4;
  o.expect(schedule_ok, "learning rate schedule");
  const double secs = seconds_since(t0);
  o.expect(secs < 300.0, "runtime " + std::to_string(secs) + " s");
  o.detail << "val F1 " << f1 << ", loss decreased in " << decreasing << " of 4 epochs, phase-1 encoder frozen " << (frozen ? "yes" : "no")
           << ", lr 1e-4 for epochs 0-9 then 1e-5, reset in phase 2; " << secs << " s";
}

// ---------------------------------------------------------------- 11

void dg_plumbing(Outcome& o) {
  // four strata of very different sizes, each should get a quarter of draws
  wsi::Manifest m;
  const std::vector<std::tuple<std::string, wsi::TileLabel, int>> strata{
      {"A", wsi::TileLabel::Normal, 700}, {"A", wsi::TileLabel::Dysplastic, 60},
      {"B", wsi::TileLabel::Normal, 200}, {"B", wsi::TileLabel::Dysplastic, 40}};
  for (const auto& [scanner, label, n] : strata)
    for (int i = 0; i < n; ++i) {
      wsi::ManifestRow r;
      r.scanner = scanner;
      r.label = label;
      m.push_back(r);
    }
  const std::size_t draws = 20000;
  Rng rng(17);
  std::vector<std::size_t> hits(4, 0);
  for (auto i : wsi::weighted_sample(m, rng, draws)) {
    std::size_t s = 0, edge = 0;
    for (; s < 4; ++s) {
      edge += static_cast<std::size_t>(std::get<2>(strata[s]));
      if (i < edge) break;
    }
    ++hits[s];
  }
  const double sigma = std::sqrt(draws * 0.25 * 0.75);
  double worst_z = 0.0;
  for (auto h : hits) worst_z = std::max(worst_z, std::abs(static_cast<double>(h) - draws * 0.25) / sigma);
  o.expect(worst_z <= 4.0, "stratum proportion off by " + std::to_string(worst_z) + " sigma");

  std::mt19937_64 trng(5);
  Tensor x = testing::random_tensor({3, 4}, trng);
  Tensor r = testing::random_tensor({3, 4}, trng, -2, 2, false);
  bool grl_ok = true;
  for (double lambda : {0.0, 0.3, 1.0, 2.5}) {
    x.zero_grad();
    const Tensor y = gradient_reversal(x, lambda);
    grl_ok = grl_ok && std::equal(x.data().begin(), x.data().end(), y.data().begin());
    testing::weighted_sum(y, r).backward();
    for (std::size_t i = 0; i < x.numel(); ++i) grl_ok = grl_ok && x.grad()[i] == -lambda * r.data()[i];
  }
  o.expect(grl_ok, "gradient reversal is not exactly -lambda * grad");

  const double l0 = train::da_lambda(0.0), l1 = train::da_lambda(1.0);
  const double closed = 2.0 / (1.0 + std::exp(-10.0)) - 1.0;
  o.expect(l0 == 0.0 && std::abs(l1 - closed) < 1e-15, "lambda endpoints " + std::to_string(l0) + ", " + std::to_string(l1));
  o.detail << "stratum shares within " << worst_z << " sigma; reversal exact for 4 lambdas; lambda(0) = " << l0
           << ", lambda(1) = " << l1;
}

// ---------------------------------------------------------------- 12

void cli_end_to_end(Outcome& o) {
  const auto t0 = Clock::now();
  const fs::path root = fs::temp_directory_path() / "dysp_acceptance_cli";
  fs::remove_all(root);
  fs::create_directories(root);
  const std::string r = "\"" + root.string() + "\"";
  auto step = [&](const std::string& name, const std::string& args) {
    const auto res = testing::run_cli(args, root / (name + ".log"));
    o.expect(res.code == 0, name + " exited " + std::to_string(res.code) + ": " + res.output.substr(0, 300));
    return res.code == 0;
  };
  auto has = [&](const fs::path& p) { o.expect(fs::exists(p), "missing artifact " + p.string()); };

  if (!step("synth", "synth --out " + r + "/data --cases 2 --controls 1 --width 384 --height 256 --seed 5")) return;
  for (const char* f : {"manifest.jsonl", "synth.json"}) has(root / "data" / f);
  const std::vector<std::string> slides{"case_000", "case_001", "control_000"};
  for (const auto& s : slides)
    for (const char* f : {"meta.json", "level0.png", "level1.png", "level2.png", "gt.png", "roi.png"})
      has(root / "data" / "slides" / s / f);

  if (!step("train", "train --manifest " + r + "/data/manifest.jsonl --out " + r +
                         "/run --phase1-epochs 2 --phase2-epochs 2 --decay-epoch 1 --lr-hi 3e-3 --lr-lo 3e-4"
                         " --batch-size 4 --seed 1"))
    return;
  for (const char* f : {"model.ckpt", "model.ckpt.json", "phase1.ckpt", "phase2.ckpt", "metrics.jsonl", "train_config.json"})
    has(root / "run" / f);

  std::string preds, gts;
  for (const auto& s : slides) {
    if (!step("infer_" + s, "infer --slide " + r + "/data/slides/" + s + " --model " + r + "/run/model.ckpt --out " + r +
                                "/pred/" + s))
      return;
    for (const char* f : {"pred.png", "heatmap.png", "canvas.f32", "canvas.json"}) has(root / "pred" / s / f);
    preds += " " + r + "/pred/" + s;
    gts += " " + r + "/data/slides/" + s;
  }
  if (!step("eval", "eval --pred" + preds + " --gt" + gts + " --out " + r + "/eval")) return;
  for (const char* f : {"report.json", "report.txt"}) has(root / "eval" / f);
  const auto report = nlohmann::json::parse(testing::slurp(root / "eval" / "report.json")).get<eval::EvalReport>();

  if (!step("self_eval", "eval --pred" + gts + " --pred-name gt.png --gt" + gts + " --out " + r + "/self")) return;
  const auto self = nlohmann::json::parse(testing::slurp(root / "self" / "report.json")).get<eval::EvalReport>();
  bool all_one = self.macro.cases > 0 && self.macro.controls > 0;
  for (const auto* s : {&self.macro, &self.micro})
    for (const auto& v : {s->f1, s->recall, s->precision, s->specificity}) all_one = all_one && v && *v == 1.0;
  for (const auto& row : self.rows) {
    if (row.metrics) all_one = all_one && row.metrics->f1 == 1.0 && row.metrics->recall == 1.0 && row.metrics->precision == 1.0;
    if (row.specificity) all_one = all_one && *row.specificity == 1.0;
  }
  o.expect(all_one, "self-evaluation is not all 1.0");
  const double secs = seconds_since(t0);
  o.expect(secs < 600.0, "runtime " + std::to_string(secs) + " s");
  o.detail << "synth, train, infer x3, eval exit 0 with all artifacts; self-eval all 1.0 over " << self.rows.size()
           << " ROIs; trained model macro F1 " << (report.macro.f1 ? *report.macro.f1 : 0.0) << "; " << secs << " s";
  fs::remove_all(root);
}

}  // namespace

int main() {
  const std::vector<std::pair<std::string, std::function<void(Outcome&)>>> criteria{
      {"autodiff finite-difference suite", autodiff_suite},
      {"end-to-end model gradient check", model_gradcheck},
      {"architecture geometry", geometry},
      {"loss oracles and fixtures", loss_oracles},
      {"Macenko recovery and sigma=0 augmentation", macenko},
      {"tessellation", tessellation},
      {"stitching determinism and blending", stitching},
      {"post-processing", postprocessing},
      {"ROI metrics", metrics},
      {"training smoke test", training_smoke},
      {"domain-generalisation plumbing", dg_plumbing},
      {"CLI end to end", cli_end_to_end},
  };
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    Outcome o;
    try {
      criteria[i].second(o);
    } catch (const std::exception& e) {
      o.expect(false, std::string("threw: ") + e.what());
    }
    std::printf("%s %2zu %s: %s\n", o.pass ? "PASS" : "FAIL", i + 1, criteria[i].first.c_str(), o.detail.str().c_str());
    for (const auto& f : o.failures) std::printf("       - %s\n", f.c_str());
    std::fflush(stdout);
    failed += !o.pass;
  }
  std::printf("%d of %zu criteria passed\n", static_cast<int>(criteria.size()) - failed, criteria.size());
  return failed == 0 ? 0 : 1;
}
