#pragma once

// Small model configurations and helpers shared across suites.

#include <random>

#include "dysp/transunet.hpp"
#include "support/gradcheck.hpp"

namespace dysp::testing {

// 32-px model small enough for an exhaustive finite-difference sweep.
inline ModelConfig micro_config() {
  ModelConfig cfg;
  cfg.input_size = 32;
  cfg.encoder_channels = {4, 8, 16, 32};
  cfg.transformer = {2, 16, 2, 32};
  cfg.head_channels = 16;
  cfg.decoder_channels = {8, 8, 4, 4};
  cfg.domain_hidden = 8;
  return cfg;
}

// Closed-form parameter count written from the architecture description,
// independent of the builder.
inline std::size_t census(const ModelConfig& c) {
  const auto& e = c.encoder_channels;
  const std::size_t D = c.transformer.hidden, M = c.transformer.mlp_dim;
  auto conv_bn = [](std::size_t in, std::size_t out, std::size_t k) { return in * out * k * k + 2 * out; };
  std::size_t n = conv_bn(c.in_channels, e[0], 4);
  for (std::size_t s = 0; s < 3; ++s) {
    for (std::size_t b = 0; b < c.blocks_per_stage; ++b) {
      const std::size_t in = b == 0 ? e[s] : e[s + 1], out = e[s + 1];
      if (b == 0 && s > 0)
        n += conv_bn(in, out, 4) + conv_bn(out, out, 3) + conv_bn(in, out, 2);
      else
        n += conv_bn(in, out, 3) + conv_bn(out, out, 3) + (in != out ? conv_bn(in, out, 1) : 0);
    }
  }
  n += e[3] * D + D + c.tokens() * D;
  n += c.transformer.layers * (2 * D + 4 * (D * D + D) + 2 * D + D * M + M + M * D + D);
  n += 2 * D;
  n += conv_bn(D, c.head_channels, 3);
  const std::size_t skip[3] = {e[2], e[1], e[0]};
  std::size_t in = c.head_channels;
  for (std::size_t i = 0; i < 4; ++i) {
    const std::size_t out = c.decoder_channels[i];
    n += conv_bn(in + (i < c.n_skip ? skip[i] : 0), out, 3) + conv_bn(out, out, 3);
    in = out;
  }
  n += in * c.num_classes + c.num_classes;
  if (c.num_domains >= 2) n += D * c.domain_hidden + c.domain_hidden + c.domain_hidden * c.num_domains + c.num_domains;
  return n;
}

// One-hot [N,2,S,S] target with a random axis-aligned rectangle as foreground.
inline Tensor random_target(std::size_t n, std::size_t s, std::mt19937_64& rng) {
  Tensor t = Tensor::zeros({n, 2, s, s});
  auto d = t.mutable_data();
  std::uniform_int_distribution<std::size_t> pos(0, s - 1);
  for (std::size_t b = 0; b < n; ++b) {
    std::size_t y0 = pos(rng), y1 = pos(rng), x0 = pos(rng), x1 = pos(rng);
    if (y0 > y1) std::swap(y0, y1);
    if (x0 > x1) std::swap(x0, x1);
    for (std::size_t y = 0; y < s; ++y)
      for (std::size_t x = 0; x < s; ++x) {
        const bool fg = y >= y0 && y <= y1 && x >= x0 && x <= x1;
        d[((b * 2 + (fg ? 1 : 0)) * s + y) * s + x] = 1.0;
      }
  }
  return t;
}

}  // namespace dysp::testing
