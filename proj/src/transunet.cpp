#include "dysp/transunet.hpp"

#include <cmath>
#include <iomanip>
#include <map>
#include <optional>
#include <random>
#include <sstream>

#include "dysp/error.hpp"

namespace dysp {

// ---------------------------------------------------------------------------
// Configuration

ModelConfig ModelConfig::toy() {
  ModelConfig cfg;
  cfg.input_size = 64;
  cfg.encoder_channels = {16, 32, 64, 128};
  cfg.transformer = {2, 64, 4, 128};
  cfg.head_channels = 128;
  cfg.decoder_channels = {64, 32, 16, 8};
  cfg.domain_hidden = 32;
  return cfg;
}

ModelConfig ModelConfig::full() { return ModelConfig{}; }

void ModelConfig::validate() const {
  std::vector<std::string> problems;
  if (input_size == 0 || input_size % 16 != 0)
    problems.push_back("input_size (" + std::to_string(input_size) + ") must be a positive multiple of 16");
  if (in_channels == 0) problems.push_back("in_channels must be positive");
  if (num_classes < 2) problems.push_back("num_classes must be >= 2");
  if (encoder_channels.size() != 4) problems.push_back("encoder_channels needs exactly 4 entries");
  if (decoder_channels.size() != 4) problems.push_back("decoder_channels needs exactly 4 entries");
  for (auto c : encoder_channels)
    if (c == 0) problems.push_back("encoder_channels entries must be positive");
  for (auto c : decoder_channels)
    if (c == 0) problems.push_back("decoder_channels entries must be positive");
  if (head_channels == 0) problems.push_back("head_channels must be positive");
  if (blocks_per_stage == 0) problems.push_back("blocks_per_stage must be positive");
  if (transformer.hidden == 0 || transformer.heads == 0 || transformer.hidden % transformer.heads != 0)
    problems.push_back("transformer hidden (" + std::to_string(transformer.hidden) +
                       ") must be divisible by heads (" + std::to_string(transformer.heads) + ")");
  if (transformer.mlp_dim == 0) problems.push_back("transformer mlp_dim must be positive");
  if (n_skip > 3) problems.push_back("n_skip must be <= 3");
  if (num_domains == 1) problems.push_back("num_domains must be 0 or >= 2");
  if (num_domains >= 2 && domain_hidden == 0) problems.push_back("domain_hidden must be positive");
  if (!problems.empty()) {
    std::string msg = "invalid model config:";
    for (const auto& p : problems) msg += "\n  - " + p;
    throw ConfigError(msg);
  }
}

void to_json(nlohmann::json& j, const ModelConfig& cfg) {
  j = nlohmann::json{{"input_size", cfg.input_size},
                     {"in_channels", cfg.in_channels},
                     {"num_classes", cfg.num_classes},
                     {"encoder_channels", cfg.encoder_channels},
                     {"blocks_per_stage", cfg.blocks_per_stage},
                     {"transformer",
                      {{"layers", cfg.transformer.layers},
                       {"hidden", cfg.transformer.hidden},
                       {"heads", cfg.transformer.heads},
                       {"mlp_dim", cfg.transformer.mlp_dim}}},
                     {"head_channels", cfg.head_channels},
                     {"decoder_channels", cfg.decoder_channels},
                     {"n_skip", cfg.n_skip},
                     {"num_domains", cfg.num_domains},
                     {"domain_hidden", cfg.domain_hidden}};
}

void from_json(const nlohmann::json& j, ModelConfig& cfg) {
  ModelConfig d = cfg;
  d.input_size = j.value("input_size", d.input_size);
  d.in_channels = j.value("in_channels", d.in_channels);
  d.num_classes = j.value("num_classes", d.num_classes);
  d.encoder_channels = j.value("encoder_channels", d.encoder_channels);
  d.blocks_per_stage = j.value("blocks_per_stage", d.blocks_per_stage);
  if (j.contains("transformer")) {
    const auto& t = j.at("transformer");
    d.transformer.layers = t.value("layers", d.transformer.layers);
    d.transformer.hidden = t.value("hidden", d.transformer.hidden);
    d.transformer.heads = t.value("heads", d.transformer.heads);
    d.transformer.mlp_dim = t.value("mlp_dim", d.transformer.mlp_dim);
  }
  d.head_channels = j.value("head_channels", d.head_channels);
  d.decoder_channels = j.value("decoder_channels", d.decoder_channels);
  d.n_skip = j.value("n_skip", d.n_skip);
  d.num_domains = j.value("num_domains", d.num_domains);
  d.domain_hidden = j.value("domain_hidden", d.domain_hidden);
  cfg = d;
}

const char* group_name(ParamGroup group) {
  switch (group) {
    case ParamGroup::Encoder: return "encoder";
    case ParamGroup::Transformer: return "transformer";
    case ParamGroup::Decoder: return "decoder";
    case ParamGroup::Heads: return "heads";
  }
  return "?";
}

// ---------------------------------------------------------------------------
// Layers

namespace {

struct Conv {
  Tensor weight, bias;
  std::size_t stride = 1, pad = 0;
  Tensor operator()(const Tensor& x) const { return conv2d(x, weight, bias, stride, pad); }
};

struct BatchNorm {
  Tensor gamma, beta;
  BatchNormState state;
};

struct ConvBn {
  Conv conv;
  BatchNorm bn;
  Tensor operator()(const Tensor& x, bool training) {
    return batch_norm2d(conv(x), bn.gamma, bn.beta, bn.state, training);
  }
};

struct ResidualBlock {
  ConvBn a, b;
  std::optional<ConvBn> shortcut;
};

struct LinearLayer {
  Tensor weight, bias;
  Tensor operator()(const Tensor& x) const { return linear(x, weight, bias); }
};

struct Norm {
  Tensor gamma, beta;
  Tensor operator()(const Tensor& x) const { return layer_norm(x, gamma, beta); }
};

struct EncoderBlock {
  Norm ln1;
  AttentionWeights attn;
  Norm ln2;
  LinearLayer fc1, fc2;
};

struct DecoderStage {
  ConvBn a, b;
};

// Deterministic uniform source independent of the standard library's
// distribution implementations.
class Uniform {
 public:
  explicit Uniform(std::uint64_t seed) : rng_(seed) {}
  double operator()(double lo, double hi) {
    const double u = static_cast<double>(rng_() >> 11) * 0x1.0p-53;
    return lo + (hi - lo) * u;
  }

 private:
  std::mt19937_64 rng_;
};

class Builder {
 public:
  explicit Builder(std::uint64_t seed) : uniform_(seed) {}

  Tensor he_uniform(const std::string& name, ParamGroup group, Shape shape, std::size_t fan_in) {
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
    Tensor t = Tensor::zeros(std::move(shape), true);
    for (auto& v : t.mutable_data()) v = uniform_(-bound, bound);
    return add(name, group, t);
  }

  Tensor constant(const std::string& name, ParamGroup group, Shape shape, double value) {
    return add(name, group, Tensor::full(std::move(shape), value, true));
  }

  Tensor buffer(const std::string& name, Shape shape, double value) {
    Tensor t = Tensor::full(std::move(shape), value);
    buffers.push_back({name, t});
    return t;
  }

  Conv conv(const std::string& name, ParamGroup group, std::size_t in, std::size_t out, std::size_t k,
            std::size_t stride, std::size_t pad, bool bias) {
    Conv c;
    c.weight = he_uniform(name + ".weight", group, {out, in, k, k}, in * k * k);
    if (bias) c.bias = constant(name + ".bias", group, {out}, 0.0);
    c.stride = stride;
    c.pad = pad;
    return c;
  }

  BatchNorm batch_norm(const std::string& name, ParamGroup group, std::size_t channels) {
    BatchNorm bn;
    bn.gamma = constant(name + ".gamma", group, {channels}, 1.0);
    bn.beta = constant(name + ".beta", group, {channels}, 0.0);
    bn.state.running_mean = buffer(name + ".running_mean", {channels}, 0.0);
    bn.state.running_var = buffer(name + ".running_var", {channels}, 1.0);
    return bn;
  }

  ConvBn conv_bn(const std::string& name, ParamGroup group, std::size_t in, std::size_t out, std::size_t k,
                 std::size_t stride, std::size_t pad) {
    return {conv(name + ".conv", group, in, out, k, stride, pad, false), batch_norm(name + ".bn", group, out)};
  }

  LinearLayer linear_layer(const std::string& name, ParamGroup group, std::size_t in, std::size_t out) {
    return {he_uniform(name + ".weight", group, {in, out}, in), constant(name + ".bias", group, {out}, 0.0)};
  }

  Norm norm(const std::string& name, ParamGroup group, std::size_t dim) {
    return {constant(name + ".gamma", group, {dim}, 1.0), constant(name + ".beta", group, {dim}, 0.0)};
  }

  std::vector<Parameter> params;
  std::vector<NamedTensor> buffers;

 private:
  Tensor add(const std::string& name, ParamGroup group, Tensor t) {
    params.push_back({name, group, t});
    return t;
  }

  Uniform uniform_;
};

ResidualBlock make_residual(Builder& b, const std::string& name, std::size_t in, std::size_t out,
                            std::size_t stride) {
  ResidualBlock block;
  const auto g = ParamGroup::Encoder;
  if (stride == 1) {
    block.a = b.conv_bn(name + ".a", g, in, out, 3, 1, 1);
    block.b = b.conv_bn(name + ".b", g, out, out, 3, 1, 1);
    if (in != out) block.shortcut = b.conv_bn(name + ".shortcut", g, in, out, 1, 1, 0);
  } else {
    // 4x4/s2/p1 and 2x2/s2 keep the output extent integral for even inputs.
    block.a = b.conv_bn(name + ".a", g, in, out, 4, 2, 1);
    block.b = b.conv_bn(name + ".b", g, out, out, 3, 1, 1);
    block.shortcut = b.conv_bn(name + ".shortcut", g, in, out, 2, 2, 0);
  }
  return block;
}

Tensor run_residual(ResidualBlock& block, const Tensor& x, bool training) {
  Tensor h = relu(block.a(x, training));
  h = block.b(h, training);
  const Tensor skip = block.shortcut ? (*block.shortcut)(x, training) : x;
  return relu(add(h, skip));
}

}  // namespace

struct TransUnet::Layers {
  ConvBn stem;
  std::vector<std::vector<ResidualBlock>> stages;  // 3 stages
  Conv embed;
  Tensor pos;
  std::vector<EncoderBlock> blocks;
  Norm final_norm;
  ConvBn conv_more;
  std::vector<DecoderStage> decoder;
  Conv seg_head;
  std::optional<LinearLayer> domain_fc1, domain_fc2;
  std::vector<NamedTensor> buffers;
};

TransUnet::TransUnet(ModelConfig cfg, std::unique_ptr<Layers> layers, std::vector<Parameter> params)
    : cfg_(std::move(cfg)), layers_(std::move(layers)), params_(std::move(params)) {}
TransUnet::TransUnet(TransUnet&&) noexcept = default;
TransUnet& TransUnet::operator=(TransUnet&&) noexcept = default;
TransUnet::~TransUnet() = default;

TransUnet TransUnet::build(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Builder b(seed);
  auto L = std::make_unique<Layers>();
  const auto& enc = cfg.encoder_channels;
  const auto& tc = cfg.transformer;

  L->stem = b.conv_bn("encoder.stem", ParamGroup::Encoder, cfg.in_channels, enc[0], 4, 2, 1);
  for (std::size_t s = 0; s < 3; ++s) {
    std::vector<ResidualBlock> stage;
    for (std::size_t k = 0; k < cfg.blocks_per_stage; ++k) {
      const std::size_t in = k == 0 ? enc[s] : enc[s + 1];
      const std::size_t stride = (k == 0 && s > 0) ? 2 : 1;
      stage.push_back(make_residual(b, "encoder.stage" + std::to_string(s + 1) + ".block" + std::to_string(k),
                                    in, enc[s + 1], stride));
    }
    L->stages.push_back(std::move(stage));
  }

  const auto gt = ParamGroup::Transformer;
  L->embed = b.conv("transformer.embed", gt, enc[3], tc.hidden, 1, 1, 0, true);
  L->pos = b.constant("transformer.pos", gt, {cfg.tokens(), tc.hidden}, 0.0);
  for (std::size_t l = 0; l < tc.layers; ++l) {
    const std::string p = "transformer.block" + std::to_string(l);
    EncoderBlock blk;
    blk.ln1 = b.norm(p + ".ln1", gt, tc.hidden);
    const auto q = b.linear_layer(p + ".attn.q", gt, tc.hidden, tc.hidden);
    const auto k = b.linear_layer(p + ".attn.k", gt, tc.hidden, tc.hidden);
    const auto v = b.linear_layer(p + ".attn.v", gt, tc.hidden, tc.hidden);
    const auto o = b.linear_layer(p + ".attn.out", gt, tc.hidden, tc.hidden);
    blk.attn = {q.weight, q.bias, k.weight, k.bias, v.weight, v.bias, o.weight, o.bias};
    blk.ln2 = b.norm(p + ".ln2", gt, tc.hidden);
    blk.fc1 = b.linear_layer(p + ".mlp.fc1", gt, tc.hidden, tc.mlp_dim);
    blk.fc2 = b.linear_layer(p + ".mlp.fc2", gt, tc.mlp_dim, tc.hidden);
    L->blocks.push_back(std::move(blk));
  }
  L->final_norm = b.norm("transformer.norm", gt, tc.hidden);

  const auto gd = ParamGroup::Decoder;
  L->conv_more = b.conv_bn("decoder.conv_more", gd, tc.hidden, cfg.head_channels, 3, 1, 1);
  const std::array<std::size_t, 3> skip_channels{enc[2], enc[1], enc[0]};
  std::size_t in = cfg.head_channels;
  for (std::size_t i = 0; i < 4; ++i) {
    const std::size_t skip = i < cfg.n_skip ? skip_channels[i] : 0;
    const std::string p = "decoder.stage" + std::to_string(i + 1);
    const std::size_t out = cfg.decoder_channels[i];
    L->decoder.push_back({b.conv_bn(p + ".a", gd, in + skip, out, 3, 1, 1), b.conv_bn(p + ".b", gd, out, out, 3, 1, 1)});
    in = out;
  }
  L->seg_head = b.conv("heads.segmentation", ParamGroup::Heads, in, cfg.num_classes, 1, 1, 0, true);
  if (cfg.num_domains >= 2) {
    L->domain_fc1 = b.linear_layer("heads.domain.fc1", ParamGroup::Heads, tc.hidden, cfg.domain_hidden);
    L->domain_fc2 = b.linear_layer("heads.domain.fc2", ParamGroup::Heads, cfg.domain_hidden, cfg.num_domains);
  }
  L->buffers = std::move(b.buffers);
  return TransUnet(cfg, std::move(L), std::move(b.params));
}

EncoderFeatures TransUnet::encode(const Tensor& batch) {
  const std::size_t s = cfg_.input_size;
  if (batch.rank() != 4 || batch.dim(1) != cfg_.in_channels || batch.dim(2) != s || batch.dim(3) != s)
    throw DimensionError("forward: expected input [N," + std::to_string(cfg_.in_channels) + "," +
                         std::to_string(s) + "," + std::to_string(s) + "], got " + shape_str(batch.shape()));
  EncoderFeatures f;
  Tensor x = relu(layers_->stem(batch, training_));
  f.skips[0] = x;
  x = max_pool2d(x, 2, 2);
  for (std::size_t st = 0; st < 3; ++st) {
    for (auto& block : layers_->stages[st]) x = run_residual(block, x, training_);
    if (st < 2) f.skips[st + 1] = x;
  }
  f.top = x;
  return f;
}

Tensor TransUnet::embed_patches(const Tensor& feature_map) const {
  const std::size_t g = cfg_.grid();
  if (feature_map.rank() != 4 || feature_map.dim(1) != cfg_.encoder_channels[3] || feature_map.dim(2) != g ||
      feature_map.dim(3) != g)
    throw DimensionError("embed_patches: expected [N," + std::to_string(cfg_.encoder_channels[3]) + "," +
                         std::to_string(g) + "," + std::to_string(g) + "], got " + shape_str(feature_map.shape()));
  const std::size_t n = feature_map.dim(0), d = cfg_.transformer.hidden;
  const Tensor projected = layers_->embed(feature_map);  // [N, D, g, g]
  const Tensor tokens = permute(reshape(projected, {n, d, g * g}), {0, 2, 1});
  return add(tokens, layers_->pos);
}

Tensor TransUnet::transformer_block(const Tensor& tokens, std::size_t layer) const {
  const auto& blk = layers_->blocks.at(layer);
  const Tensor h = add(tokens, multi_head_attention(blk.ln1(tokens), blk.attn, cfg_.transformer.heads));
  return add(h, blk.fc2(gelu(blk.fc1(blk.ln2(h)))));
}

Tensor TransUnet::transform(const Tensor& tokens) const {
  Tensor x = tokens;
  for (std::size_t l = 0; l < layers_->blocks.size(); ++l) x = transformer_block(x, l);
  return layers_->final_norm(x);
}

Tensor TransUnet::cascaded_decode(const Tensor& tokens, std::span<const Tensor> skips) {
  const std::size_t g = cfg_.grid(), d = cfg_.transformer.hidden;
  if (tokens.rank() != 3 || tokens.dim(1) != g * g || tokens.dim(2) != d)
    throw DimensionError("cascaded_decode: expected tokens [N," + std::to_string(g * g) + "," + std::to_string(d) +
                         "], got " + shape_str(tokens.shape()));
  if (skips.size() < cfg_.n_skip)
    throw DimensionError("cascaded_decode: need " + std::to_string(cfg_.n_skip) + " skips, got " +
                         std::to_string(skips.size()));
  const std::size_t n = tokens.dim(0);
  Tensor x = reshape(permute(tokens, {0, 2, 1}), {n, d, g, g});
  x = relu(layers_->conv_more(x, training_));
  const std::array<std::size_t, 3> skip_channels{cfg_.encoder_channels[2], cfg_.encoder_channels[1],
                                                 cfg_.encoder_channels[0]};
  for (std::size_t i = 0; i < 4; ++i) {
    x = bilinear_upsample2x(x);
    if (i < cfg_.n_skip) {
      const Tensor& skip = skips[2 - i];
      const std::size_t extent = x.dim(2);
      if (skip.rank() != 4 || skip.dim(0) != n || skip.dim(1) != skip_channels[i] || skip.dim(2) != extent ||
          skip.dim(3) != extent)
        throw DimensionError("cascaded_decode: stage " + std::to_string(i + 1) + " skip expected [" +
                             std::to_string(n) + "," + std::to_string(skip_channels[i]) + "," +
                             std::to_string(extent) + "," + std::to_string(extent) + "], got " +
                             shape_str(skip.shape()));
      x = concat({x, skip}, 1);
    }
    auto& stage = layers_->decoder[i];
    x = relu(stage.a(x, training_));
    x = relu(stage.b(x, training_));
  }
  return layers_->seg_head(x);
}

ForwardResult TransUnet::forward_full(const Tensor& batch) {
  ForwardResult r;
  r.features = encode(batch);
  r.tokens = transform(embed_patches(r.features.top));
  r.logits = cascaded_decode(r.tokens, r.features.skips);
  return r;
}

Tensor TransUnet::forward(const Tensor& batch) { return forward_full(batch).logits; }

bool TransUnet::has_domain_head() const { return layers_->domain_fc1.has_value(); }

Tensor TransUnet::domain_logits(const Tensor& tokens, double lambda) const {
  if (!has_domain_head()) throw ConfigError("model has no domain head (num_domains < 2)");
  const Tensor pooled = mean(tokens, 1);  // [N, D]
  return (*layers_->domain_fc2)(relu((*layers_->domain_fc1)(gradient_reversal(pooled, lambda))));
}

std::size_t TransUnet::parameter_count() const {
  std::size_t total = 0;
  for (const auto& p : params_) total += p.value.numel();
  return total;
}

void TransUnet::zero_grad() {
  for (auto& p : params_) p.value.zero_grad();
}

std::vector<NamedTensor> TransUnet::state() const {
  std::vector<NamedTensor> out;
  for (const auto& p : params_) out.push_back({p.name, p.value});
  for (const auto& b : layers_->buffers) out.push_back(b);
  return out;
}

void TransUnet::load_state(const std::vector<NamedTensor>& entries) {
  std::map<std::string, const NamedTensor*> by_name;
  for (const auto& e : entries) by_name[e.name] = &e;
  auto targets = state();
  for (auto& t : targets) {
    auto it = by_name.find(t.name);
    if (it == by_name.end()) throw ConfigError("checkpoint is missing '" + t.name + "'");
    const Tensor& src = it->second->value;
    if (src.shape() != t.value.shape())
      throw ConfigError("checkpoint shape mismatch for '" + t.name + "': " + shape_str(src.shape()) + " vs model " +
                        shape_str(t.value.shape()));
    std::copy(src.data().begin(), src.data().end(), t.value.mutable_data().begin());
  }
  if (by_name.size() != targets.size())
    throw ConfigError("checkpoint has " + std::to_string(by_name.size()) + " entries, model expects " +
                      std::to_string(targets.size()));
}

TransUnet TransUnet::clone() const {
  TransUnet copy = build(cfg_, 0);
  copy.load_state(state());
  copy.training_ = training_;
  return copy;
}

std::vector<LayerShape> TransUnet::layer_shapes() const {
  const auto& c = cfg_;
  const auto& enc = c.encoder_channels;
  const std::size_t s = c.input_size, d = c.transformer.hidden;
  std::map<std::string, std::size_t> by_prefix;
  auto count = [&](const std::string& prefix) {
    std::size_t total = 0;
    for (const auto& p : params_)
      if (p.name.rfind(prefix, 0) == 0) total += p.value.numel();
    return total;
  };
  std::vector<LayerShape> rows;
  rows.push_back({"input", {c.in_channels, s, s}, 0});
  rows.push_back({"encoder.stem", {enc[0], s / 2, s / 2}, count("encoder.stem")});
  rows.push_back({"encoder.pool", {enc[0], s / 4, s / 4}, 0});
  rows.push_back({"encoder.stage1", {enc[1], s / 4, s / 4}, count("encoder.stage1")});
  rows.push_back({"encoder.stage2", {enc[2], s / 8, s / 8}, count("encoder.stage2")});
  rows.push_back({"encoder.stage3", {enc[3], s / 16, s / 16}, count("encoder.stage3")});
  rows.push_back({"transformer.embed", {c.tokens(), d}, count("transformer.embed") + count("transformer.pos")});
  for (std::size_t l = 0; l < c.transformer.layers; ++l) {
    const std::string p = "transformer.block" + std::to_string(l);
    rows.push_back({p, {c.tokens(), d}, count(p + ".")});
  }
  rows.push_back({"transformer.norm", {c.tokens(), d}, count("transformer.norm")});
  rows.push_back({"decoder.conv_more", {c.head_channels, s / 16, s / 16}, count("decoder.conv_more")});
  for (std::size_t i = 0; i < 4; ++i) {
    const std::string p = "decoder.stage" + std::to_string(i + 1);
    const std::size_t extent = s >> (3 - i);
    rows.push_back({p, {c.decoder_channels[i], extent, extent}, count(p + ".")});
  }
  rows.push_back({"heads.segmentation", {c.num_classes, s, s}, count("heads.segmentation")});
  if (has_domain_head()) rows.push_back({"heads.domain", {c.num_domains}, count("heads.domain")});
  return rows;
}

std::string TransUnet::describe() const {
  std::ostringstream os;
  os << std::left << std::setw(22) << "layer" << std::setw(20) << "output" << "params\n";
  for (const auto& row : layer_shapes())
    os << std::setw(22) << row.name << std::setw(20) << shape_str(row.output) << row.params << '\n';
  os << "total parameters: " << parameter_count() << '\n';
  return os.str();
}

}  // namespace dysp
