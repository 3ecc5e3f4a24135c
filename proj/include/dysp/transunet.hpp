#pragma once

// Hybrid CNN/Transformer segmentation network: a ResNet-style encoder whose
// 1/16-scale feature map is embedded site-by-site into tokens, a pre-norm
// Transformer bottleneck, and a cascaded x2 upsampler that consumes the
// encoder's 1/8, 1/4 and 1/2 scale features as skip connections.

#include <array>
#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "dysp/checkpoint.hpp"
#include "dysp/tensor.hpp"
#include "json.hpp"

namespace dysp {

struct TransformerConfig {
  std::size_t layers = 4;
  std::size_t hidden = 256;
  std::size_t heads = 8;
  std::size_t mlp_dim = 1024;
};

struct ModelConfig {
  std::size_t input_size = 512;
  std::size_t in_channels = 3;
  std::size_t num_classes = 2;
  // Output channels of stem (1/2), stage 1 (1/4), stage 2 (1/8), stage 3 (1/16).
  std::vector<std::size_t> encoder_channels{64, 256, 512, 1024};
  std::size_t blocks_per_stage = 1;
  TransformerConfig transformer{};
  // Channels after the bottleneck projection and after each decoder stage.
  std::size_t head_channels = 512;
  std::vector<std::size_t> decoder_channels{256, 128, 64, 16};
  std::size_t n_skip = 3;
  // A domain classifier head is attached when num_domains >= 2.
  std::size_t num_domains = 0;
  std::size_t domain_hidden = 64;

  static ModelConfig toy();
  static ModelConfig full();

  // Throws ConfigError listing every violated constraint.
  void validate() const;
  std::size_t grid() const { return input_size / 16; }
  std::size_t tokens() const { return grid() * grid(); }
};

void to_json(nlohmann::json& j, const ModelConfig& cfg);
void from_json(const nlohmann::json& j, ModelConfig& cfg);

enum class ParamGroup { Encoder, Transformer, Decoder, Heads };
const char* group_name(ParamGroup group);

struct Parameter {
  std::string name;
  ParamGroup group;
  Tensor value;
};

struct EncoderFeatures {
  Tensor top;                   // [N, enc3, S/16, S/16]
  std::array<Tensor, 3> skips;  // scales 1/2, 1/4, 1/8
};

struct ForwardResult {
  Tensor logits;  // [N, classes, S, S]
  Tensor tokens;  // bottleneck output [N, T, D]
  EncoderFeatures features;
};

struct LayerShape {
  std::string name;
  Shape output;  // per-sample
  std::size_t params = 0;
};

class TransUnet {
 public:
  static TransUnet build(const ModelConfig& cfg, std::uint64_t seed);

  TransUnet(TransUnet&&) noexcept;
  TransUnet& operator=(TransUnet&&) noexcept;
  TransUnet(const TransUnet&) = delete;
  TransUnet& operator=(const TransUnet&) = delete;
  ~TransUnet();

  const ModelConfig& config() const { return cfg_; }
  bool training() const { return training_; }
  void set_training(bool training) { training_ = training; }

  Tensor forward(const Tensor& batch);
  ForwardResult forward_full(const Tensor& batch);

  EncoderFeatures encode(const Tensor& batch);
  Tensor embed_patches(const Tensor& feature_map) const;
  Tensor transformer_block(const Tensor& tokens, std::size_t layer) const;
  // All blocks followed by the final layer norm.
  Tensor transform(const Tensor& tokens) const;
  // skips ordered by scale: 1/2, 1/4, 1/8.
  Tensor cascaded_decode(const Tensor& tokens, std::span<const Tensor> skips);

  bool has_domain_head() const;
  // Mean-pooled tokens -> gradient reversal -> 2-layer classifier.
  Tensor domain_logits(const Tensor& tokens, double lambda) const;

  std::vector<Parameter>& parameters() { return params_; }
  const std::vector<Parameter>& parameters() const { return params_; }
  std::size_t parameter_count() const;
  void zero_grad();

  // Parameters followed by batch-norm running statistics.
  std::vector<NamedTensor> state() const;
  // Copies values by name; throws ConfigError on missing names or shape mismatch.
  void load_state(const std::vector<NamedTensor>& entries);
  TransUnet clone() const;

  std::vector<LayerShape> layer_shapes() const;
  std::string describe() const;

 private:
  struct Layers;
  TransUnet(ModelConfig cfg, std::unique_ptr<Layers> layers, std::vector<Parameter> params);

  ModelConfig cfg_;
  std::unique_ptr<Layers> layers_;
  std::vector<Parameter> params_;
  bool training_ = true;
};

// Maps u8-range RGB into the model's input range [-1, 1].
inline double normalize_intensity(double v) { return v / 127.5 - 1.0; }

}  // namespace dysp
