#include <cmath>
#include <cstring>
#include <random>

#include "doctest.h"
#include "dysp/checkpoint.hpp"
#include "dysp/error.hpp"
#include "dysp/tensor.hpp"
#include "support/gradcheck.hpp"
#include "support/op_catalog.hpp"

using namespace dysp;
using dysp::testing::check_gradients;
using dysp::testing::random_tensor;

TEST_CASE("matmul hand products") {
  const Tensor eye = Tensor::from({2, 2}, {1, 0, 0, 1});
  const Tensor m = Tensor::from({2, 2}, {1, 2, 3, 4});
  const Tensor r = matmul(eye, m);
  CHECK(std::vector<double>(r.data().begin(), r.data().end()) == std::vector<double>{1, 2, 3, 4});
  CHECK(matmul(Tensor::from({1, 2}, {1, 2}), Tensor::from({2, 1}, {3, 4})).item() == 11.0);
}

TEST_CASE("matmul shape mismatch names both shapes") {
  try {
    matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3}));
    FAIL("expected DimensionError");
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("[2,3]") != std::string::npos);
  }
}

TEST_CASE("matmul gradient of sum(a*b) matches finite differences") {
  std::mt19937_64 rng(3);
  Tensor a = random_tensor({3, 4}, rng), b = random_tensor({4, 2}, rng);
  const auto res = check_gradients([&] { return sum(matmul(a, b)); }, {a, b});
  CHECK(res.max_rel_error < 1e-6);
}

TEST_CASE("conv2d identity and hand convolution") {
  std::mt19937_64 rng(1);
  const Tensor x = random_tensor({1, 1, 4, 4}, rng, -1, 1, false);
  const Tensor y = conv2d(x, Tensor::full({1, 1, 1, 1}, 1.0), Tensor::zeros({1}), 1, 0);
  CHECK(std::equal(x.data().begin(), x.data().end(), y.data().begin()));

  const Tensor ones = Tensor::full({1, 1, 3, 3}, 1.0);
  const Tensor out = conv2d(ones, Tensor::full({1, 1, 3, 3}, 1.0), {}, 1, 1);
  CHECK(out.at({0, 0, 1, 1}) == 9.0);
  CHECK(out.at({0, 0, 0, 0}) == 4.0);
  CHECK(out.at({0, 0, 2, 2}) == 4.0);
  CHECK(out.at({0, 0, 0, 1}) == 6.0);
}

TEST_CASE("conv2d rejects non-integral output extent") {
  CHECK_THROWS_AS(conv2d(Tensor::zeros({1, 1, 4, 4}), Tensor::zeros({1, 1, 3, 3}), {}, 2, 1), GeometryError);
}

TEST_CASE("layer_norm hand values") {
  const Tensor g = Tensor::full({2}, 1.0), b = Tensor::zeros({2});
  const Tensor y = layer_norm(Tensor::from({2}, {1, 3}), g, b, 0.0);
  CHECK(y.data()[0] == doctest::Approx(-1.0).epsilon(1e-12));
  CHECK(y.data()[1] == doctest::Approx(1.0).epsilon(1e-12));
  const Tensor c = layer_norm(Tensor::full({4}, 7.0), Tensor::full({4}, 1.0), Tensor::zeros({4}));
  for (double v : c.data()) CHECK(v == 0.0);
}

TEST_CASE("attention: single token with identity projections returns x") {
  const Tensor eye = Tensor::from({4, 4}, {1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1});
  const Tensor x = Tensor::from({1, 4}, {0.3, -1.2, 2.0, 0.5});
  const Tensor y = multi_head_attention(x, {eye, {}, eye, {}, eye, {}, eye, {}}, 2);
  for (std::size_t i = 0; i < 4; ++i) CHECK(y.data()[i] == doctest::Approx(x.data()[i]).epsilon(1e-15));
}

TEST_CASE("attention rows sum to one") {
  std::mt19937_64 rng(9);
  const Tensor x = random_tensor({2, 5, 8}, rng, -2, 2, false);
  AttentionWeights w{random_tensor({8, 8}, rng), {}, random_tensor({8, 8}, rng), {},
                     random_tensor({8, 8}, rng), {}, random_tensor({8, 8}, rng), {}};
  Tensor attn;
  multi_head_attention(x, w, 4, &attn);
  REQUIRE(attn.shape() == Shape{8, 5, 5});
  for (std::size_t row = 0; row < 8 * 5; ++row) {
    double s = 0.0;
    for (std::size_t k = 0; k < 5; ++k) s += attn.data()[row * 5 + k];
    CHECK(std::abs(s - 1.0) < 1e-9);
  }
}

TEST_CASE("attention rejects indivisible hidden size") {
  const Tensor x = Tensor::zeros({2, 6});
  const Tensor w = Tensor::zeros({6, 6});
  CHECK_THROWS_AS(multi_head_attention(x, {w, {}, w, {}, w, {}, w, {}}, 4), ConfigError);
}

TEST_CASE("every differentiable op passes the finite-difference protocol") {
  for (const auto& [name, factory] : dysp::testing::op_catalog()) {
    double worst = 0.0;
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      std::mt19937_64 rng(seed * 7919 + 17);
      auto c = factory(rng);
      worst = std::max(worst, check_gradients(c.loss, c.inputs).max_rel_error);
    }
    INFO(name);
    CHECK(worst < 1e-4);
  }
}

TEST_CASE("shared subexpressions accumulate gradients") {
  Tensor x = Tensor::from({}, {3.0}, true);
  add(x, x).backward();
  CHECK(x.grad()[0] == 2.0);
  Tensor y = Tensor::from({2}, {1.0, 2.0}, true);
  const Tensor z = mul(y, y);
  sum(add(z, z)).backward();
  CHECK(y.grad()[0] == 4.0);
  CHECK(y.grad()[1] == 8.0);
}

TEST_CASE("upsample of a constant is constant; max_pool halves extents") {
  const Tensor c = Tensor::full({1, 2, 3, 5}, 0.7);
  const Tensor u = bilinear_upsample2x(c);
  CHECK(u.shape() == Shape{1, 2, 6, 10});
  for (double v : u.data()) CHECK(v == doctest::Approx(0.7).epsilon(1e-15));
  CHECK(max_pool2d(Tensor::zeros({2, 3, 8, 6}), 2, 2).shape() == Shape{2, 3, 4, 3});
}

TEST_CASE("gradient reversal: identity forward, -lambda backward") {
  std::mt19937_64 rng(5);
  Tensor x = random_tensor({3, 4}, rng);
  const Tensor y = gradient_reversal(x, 0.75);
  CHECK(std::equal(x.data().begin(), x.data().end(), y.data().begin()));
  sum(y).backward();
  for (double g : x.grad()) CHECK(g == -0.75);
  x.zero_grad();
  sum(gradient_reversal(x, 0.0)).backward();
  for (double g : x.grad()) CHECK(g == 0.0);
}

TEST_CASE("forward is bitwise deterministic") {
  std::mt19937_64 rng(11);
  const Tensor x = random_tensor({2, 3, 6, 6}, rng, -1, 1, false);
  const Tensor w = random_tensor({4, 3, 3, 3}, rng, -1, 1, false);
  const Tensor a = softmax(conv2d(x, w, {}, 1, 1), 1);
  const Tensor b = softmax(conv2d(x, w, {}, 1, 1), 1);
  CHECK(std::equal(a.data().begin(), a.data().end(), b.data().begin()));
}

TEST_CASE("no-grad mode records nothing") {
  Tensor x = Tensor::from({2}, {1, 2}, true);
  NoGradGuard guard;
  const Tensor y = mul(x, x);
  CHECK_FALSE(y.requires_grad());
}

TEST_CASE("checkpoint round trip is bit-exact") {
  std::mt19937_64 rng(2);
  std::vector<NamedTensor> entries{{"a.weight", random_tensor({3, 2, 2}, rng, -1e3, 1e3, false)},
                                   {"b", Tensor::from({1}, {-0.0})},
                                   {"scalar", Tensor::scalar(std::nextafter(1.0, 2.0))}};
  const auto bytes = encode_checkpoint(entries);
  CHECK(bytes[0] == 'D');
  CHECK(bytes[3] == 'P');
  CHECK(bytes[4] == kCheckpointVersion);
  const auto back = decode_checkpoint(bytes);
  REQUIRE(back.size() == entries.size());
  for (std::size_t i = 0; i < entries.size(); ++i) {
    CHECK(back[i].name == entries[i].name);
    CHECK(back[i].value.shape() == entries[i].value.shape());
    CHECK(std::memcmp(back[i].value.data().data(), entries[i].value.data().data(),
                      entries[i].value.numel() * sizeof(double)) == 0);
  }
  CHECK(encode_checkpoint(back) == bytes);
  auto broken = bytes;
  broken[0] = 'X';
  CHECK_THROWS_AS(decode_checkpoint(broken), IoError);
  broken = bytes;
  broken.pop_back();
  CHECK_THROWS_AS(decode_checkpoint(broken), IoError);
}
