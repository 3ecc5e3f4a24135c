#include <cmath>
#include <numeric>
#include <random>

#include "doctest.h"
#include "dysp/error.hpp"
#include "dysp/losses.hpp"
#include "support/fixtures.hpp"
#include "support/gradcheck.hpp"

using namespace dysp;
using namespace dysp::losses;
using dysp::testing::check_gradients;
using dysp::testing::random_target;
using dysp::testing::random_tensor;

namespace {

// Independent pixel-loop formulas, class-mean over both classes.
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

Tensor one_hot_from(const std::vector<int>& labels, std::size_t h, std::size_t w) {
  Tensor t = Tensor::zeros({1, 2, h, w});
  for (std::size_t i = 0; i < labels.size(); ++i) t.mutable_data()[labels[i] * h * w + i] = 1.0;
  return t;
}

}  // namespace

TEST_CASE("perfect hard prediction gives near-zero overlap losses") {
  std::mt19937_64 rng(1);
  const Tensor t = random_target(2, 8, rng);
  CHECK(dice_loss(t, t).item() < 1e-4);
  CHECK(jaccard_loss(t, t).item() < 1e-4);
}

TEST_CASE("two-pixel masks sharing one pixel") {
  // pred {0,1}, target {1,2} on a 1x4 row
  const Tensor pred = one_hot_from({1, 1, 0, 0}, 1, 4);
  const Tensor gt = one_hot_from({0, 1, 1, 0}, 1, 4);
  const LossSpec tiny{LossKind::Dice, 1e-300, {}};
  // foreground-only weighting isolates the dysplasia class coefficient
  const LossSpec fg{LossKind::Dice, 1e-300, {1e-300, 1.0}};
  CHECK(1.0 - dice_loss(pred, gt, fg).item() == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(1.0 - jaccard_loss(pred, gt, fg).item() == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
  CHECK(jaccard_loss(pred, gt, tiny).item() >= dice_loss(pred, gt, tiny).item());
}

TEST_CASE("losses match the naive pixel-loop formulas on random 8x8 masks") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    std::mt19937_64 rng(seed);
    const Tensor logits = random_tensor({2, 2, 8, 8}, rng, -3, 3, false);
    const Tensor target = random_target(2, 8, rng);
    const Naive ref = naive_losses(logits, target, 1e-5);
    const Tensor probs = softmax(logits, 1);
    CHECK(std::abs(dice_loss(probs, target).item() - ref.dice) < 1e-9);
    CHECK(std::abs(jaccard_loss(probs, target).item() - ref.jaccard) < 1e-9);
    CHECK(std::abs(cross_entropy(logits, target).item() - ref.ce) < 1e-9);
    CHECK(jaccard_loss(probs, target).item() >= dice_loss(probs, target).item());
  }
}

TEST_CASE("cross entropy analytic values and monotonicity") {
  std::mt19937_64 rng(2);
  const Tensor target = random_target(1, 4, rng);
  CHECK(cross_entropy(Tensor::zeros({1, 2, 4, 4}), target).item() == doctest::Approx(std::log(2.0)).epsilon(1e-15));
  double prev = 1e9;
  for (double margin : {1.0, 2.0, 4.0}) {
    Tensor logits = Tensor::zeros({1, 2, 4, 4});
    for (std::size_t i = 0; i < logits.numel(); ++i) logits.mutable_data()[i] = target.data()[i] * margin;
    const double loss = cross_entropy(logits, target).item();
    CHECK(loss < prev);
    prev = loss;
  }
  // raising one pixel's true-class probability strictly lowers CE
  Tensor logits = random_tensor({1, 2, 4, 4}, rng, -1, 1, false);
  const double before = cross_entropy(logits, target).item();
  const std::size_t cls = target.data()[16 + 5] == 1.0 ? 1 : 0;
  logits.mutable_data()[cls * 16 + 5] += 0.5;
  CHECK(cross_entropy(logits, target).item() < before);
}

TEST_CASE("combined is the unweighted sum") {
  std::mt19937_64 rng(3);
  const Tensor logits = random_tensor({2, 2, 6, 6}, rng, -2, 2, false);
  const Tensor target = random_target(2, 6, rng);
  const Tensor probs = softmax(logits, 1);
  const double dc = combined({LossKind::DicePlusCE}, logits, target).item();
  CHECK(std::abs(dc - (dice_loss(probs, target).item() + cross_entropy(logits, target).item())) < 1e-12);
  const double jc = combined({LossKind::JaccardPlusCE}, logits, target).item();
  CHECK(std::abs(jc - (jaccard_loss(probs, target).item() + cross_entropy(logits, target).item())) < 1e-12);
  Tensor perfect = Tensor::zeros(target.shape());
  for (std::size_t i = 0; i < target.numel(); ++i) perfect.mutable_data()[i] = target.data()[i] * 40.0;
  CHECK(combined({}, perfect, target).item() < 1e-4);
}

TEST_CASE("loss gradients match finite differences") {
  for (auto kind : {LossKind::Dice, LossKind::Jaccard, LossKind::CE, LossKind::DicePlusCE, LossKind::JaccardPlusCE}) {
    std::mt19937_64 rng(4);
    Tensor logits = random_tensor({2, 2, 4, 4}, rng, -2, 2);
    const Tensor target = random_target(2, 4, rng);
    const auto res = check_gradients([&] { return combined({kind}, logits, target); }, {logits});
    INFO(to_string(kind));
    CHECK(res.max_rel_error < 1e-5);
  }
}

TEST_CASE("pixel permutation invariance and positivity") {
  std::mt19937_64 rng(5);
  const Tensor logits = random_tensor({1, 2, 8, 8}, rng, -2, 2, false);
  const Tensor target = random_target(1, 8, rng);
  std::vector<std::size_t> perm(64);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  Tensor pl = Tensor::zeros(logits.shape()), pt = Tensor::zeros(target.shape());
  for (std::size_t k = 0; k < 2; ++k)
    for (std::size_t i = 0; i < 64; ++i) {
      pl.mutable_data()[k * 64 + i] = logits.data()[k * 64 + perm[i]];
      pt.mutable_data()[k * 64 + i] = target.data()[k * 64 + perm[i]];
    }
  const Tensor p = softmax(logits, 1), pp = softmax(pl, 1);
  CHECK(dice_loss(p, target).item() == doctest::Approx(dice_loss(pp, pt).item()).epsilon(1e-12));
  CHECK(jaccard_loss(p, target).item() == doctest::Approx(jaccard_loss(pp, pt).item()).epsilon(1e-12));
  for (auto kind : {LossKind::Dice, LossKind::Jaccard, LossKind::CE}) {
    const double v = combined({kind}, logits, target).item();
    CHECK(v >= 0.0);
    CHECK(std::isfinite(v));
  }
}

TEST_CASE("validation errors") {
  Tensor bad = Tensor::full({1, 2, 2, 2}, 0.5);
  CHECK_THROWS_AS(dice_loss(bad, bad), ValidationError);
  CHECK_THROWS_AS(parse_loss_kind("focal"), ConfigError);
  CHECK(parse_loss_kind("jaccard_ce") == LossKind::JaccardPlusCE);
  CHECK_THROWS_AS(LossSpec({LossKind::Dice, 0.0, {}}).validate(), ConfigError);
  CHECK_THROWS_AS(LossSpec({LossKind::Dice, 1e-5, {1.0, -1.0}}).validate(), ConfigError);
}
