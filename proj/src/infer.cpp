#include "dysp/infer.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <thread>

#include "dysp/error.hpp"
#include "dysp/morphology.hpp"

namespace dysp::infer {

namespace fs = std::filesystem;

float quantize_probability(double p) {
  p = std::clamp(std::isnan(p) ? 0.0 : p, 0.0, 1.0);
  return static_cast<float>(std::nearbyint(p / kProbQuantum) * kProbQuantum);
}

ProbabilityCanvas::ProbabilityCanvas(std::size_t width, std::size_t height, double mpp)
    : width_(width), height_(height), mpp_(mpp), sum_(width * height, 0.0f), count_(width * height, 0) {}

void ProbabilityCanvas::add_tile(std::size_t x, std::size_t y, std::size_t size, const std::vector<float>& probs) {
  if (finalized_) throw StateError("cannot add tiles to a finalized canvas");
  if (probs.size() != size * size)
    throw DimensionError("tile of size " + std::to_string(size) + " needs " + std::to_string(size * size) +
                         " probabilities, got " + std::to_string(probs.size()));
  for (std::size_t j = 0; j < size && y + j < height_; ++j)
    for (std::size_t i = 0; i < size && x + i < width_; ++i) {
      const std::size_t at = (y + j) * width_ + x + i;
      sum_[at] += quantize_probability(probs[j * size + i]);
      ++count_[at];
    }
}

void ProbabilityCanvas::merge(const ProbabilityCanvas& other) {
  if (finalized_ || other.finalized_) throw StateError("cannot merge finalized canvases");
  if (other.width_ != width_ || other.height_ != height_)
    throw DimensionError("canvas " + std::to_string(other.width_) + "x" + std::to_string(other.height_) +
                         " cannot merge into " + std::to_string(width_) + "x" + std::to_string(height_));
  for (std::size_t i = 0; i < sum_.size(); ++i) {
    sum_[i] += other.sum_[i];
    count_[i] = static_cast<std::uint16_t>(count_[i] + other.count_[i]);
  }
}

void ProbabilityCanvas::finalize() {
  if (finalized_) return;
  prob_.assign(sum_.size(), 0.0f);
  for (std::size_t i = 0; i < sum_.size(); ++i)
    if (count_[i] > 0) prob_[i] = std::clamp(sum_[i] / static_cast<float>(count_[i]), 0.0f, 1.0f);
  finalized_ = true;
}

float ProbabilityCanvas::prob(std::size_t x, std::size_t y) const { return probabilities()[y * width_ + x]; }

const std::vector<float>& ProbabilityCanvas::probabilities() const {
  if (!finalized_) throw StateError("canvas has not been finalized");
  return prob_;
}

void ProbabilityCanvas::save(const fs::path& f32_path, const fs::path& json_path) const {
  const auto& p = probabilities();
  std::ofstream out(f32_path, std::ios::binary);
  if (!out) throw IoError("cannot write " + f32_path.string());
  std::vector<char> bytes(p.size() * 4);
  for (std::size_t i = 0; i < p.size(); ++i) {
    std::uint32_t bits = std::bit_cast<std::uint32_t>(p[i]);
    for (int b = 0; b < 4; ++b) bytes[i * 4 + b] = static_cast<char>((bits >> (8 * b)) & 0xff);
  }
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  std::ofstream meta(json_path);
  if (!meta) throw IoError("cannot write " + json_path.string());
  meta << nlohmann::json{{"width", width_}, {"height", height_}, {"mpp", mpp_}}.dump(2) << "\n";
}

ProbabilityCanvas ProbabilityCanvas::load(const fs::path& f32_path, const fs::path& json_path) {
  std::ifstream meta(json_path);
  if (!meta) throw IoError("cannot open " + json_path.string());
  nlohmann::json j;
  try {
    meta >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("malformed " + json_path.string() + ": " + e.what());
  }
  ProbabilityCanvas c(j.at("width").get<std::size_t>(), j.at("height").get<std::size_t>(), j.value("mpp", 1.0));
  std::ifstream in(f32_path, std::ios::binary);
  if (!in) throw IoError("cannot open " + f32_path.string());
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.size() != c.sum_.size() * 4)
    throw ValidationError(f32_path.string() + " holds " + std::to_string(bytes.size()) + " bytes, expected " +
                          std::to_string(c.sum_.size() * 4));
  c.prob_.resize(c.sum_.size());
  for (std::size_t i = 0; i < c.prob_.size(); ++i) {
    std::uint32_t bits = 0;
    for (int b = 0; b < 4; ++b) bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[i * 4 + b])) << (8 * b);
    c.prob_[i] = std::bit_cast<float>(bits);
    c.sum_[i] = c.prob_[i];
    c.count_[i] = 1;
  }
  c.finalized_ = true;
  return c;
}

ProbabilityCanvas stitch(std::size_t width, std::size_t height, double mpp, const std::vector<wsi::TileSpec>& tiles,
                         const TileFnFactory& factory, std::size_t workers) {
  workers = std::max<std::size_t>(1, std::min(workers, std::max<std::size_t>(1, tiles.size())));
  std::vector<ProbabilityCanvas> partial(workers, ProbabilityCanvas(width, height, mpp));
  auto run = [&](std::size_t w) {
    const TileFn fn = factory(w);
    for (std::size_t i = w; i < tiles.size(); i += workers)
      partial[w].add_tile(tiles[i].x, tiles[i].y, tiles[i].size, fn(tiles[i]));
  };
  if (workers == 1) {
    run(0);
  } else {
    std::vector<std::exception_ptr> errors(workers);
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w)
      pool.emplace_back([&, w] {
        try {
          run(w);
        } catch (...) {
          errors[w] = std::current_exception();
        }
      });
    for (auto& t : pool) t.join();
    for (auto& e : errors)
      if (e) std::rethrow_exception(e);
  }
  ProbabilityCanvas canvas = std::move(partial[0]);
  for (std::size_t w = 1; w < workers; ++w) canvas.merge(partial[w]);
  canvas.finalize();
  return canvas;
}

std::vector<float> tile_probabilities(TransUnet& model, const Image& tile) {
  const std::size_t s = model.config().input_size;
  if (tile.width != s || tile.height != s || tile.channels != 3)
    throw ConfigError("model expects " + std::to_string(s) + "x" + std::to_string(s) + " RGB tiles, got " +
                      std::to_string(tile.width) + "x" + std::to_string(tile.height));
  std::vector<double> input(3 * s * s);
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t p = 0; p < s * s; ++p) input[c * s * s + p] = normalize_intensity(tile.data[p * 3 + c]);
  NoGradGuard guard;
  const Tensor logits = model.forward(Tensor::from({1, 3, s, s}, std::move(input)));
  const auto l = logits.data();
  std::vector<float> probs(s * s);
  for (std::size_t p = 0; p < s * s; ++p) probs[p] = static_cast<float>(1.0 / (1.0 + std::exp(l[p] - l[s * s + p])));
  return probs;
}

ProbabilityCanvas infer_canvas(const wsi::WsiPyramid& slide, const TransUnet& model, const InferOptions& opts) {
  if (model.config().input_size != opts.patch)
    throw ConfigError("model input size " + std::to_string(model.config().input_size) +
                      " does not match the tile size " + std::to_string(opts.patch));
  if (model.config().num_classes != 2) throw ConfigError("inference expects a 2-class model");
  const std::size_t cw = slide.canvas_width(1.0), ch = slide.canvas_height(1.0);
  const auto tiles = wsi::tessellate(cw, ch, opts.patch, opts.overlap, 1.0, slide.id);
  const Mask tissue = wsi::tissue_mask(slide, 1.0);
  auto tissue_fraction = [&](const wsi::TileSpec& t) {
    std::size_t hits = 0;
    for (std::size_t y = t.y; y < std::min(ch, t.y + t.size); ++y)
      for (std::size_t x = t.x; x < std::min(cw, t.x + t.size); ++x) hits += tissue.at(x, y) != 0;
    return static_cast<double>(hits) / static_cast<double>(t.size * t.size);
  };
  // Each worker gets a private eval-mode copy of the model.
  std::vector<std::shared_ptr<TransUnet>> copies;
  for (std::size_t w = 0; w < std::max<std::size_t>(1, opts.workers); ++w) {
    copies.push_back(std::make_shared<TransUnet>(model.clone()));
    copies.back()->set_training(false);
  }
  auto factory = [&](std::size_t w) -> TileFn {
    auto m = copies[w];
    return [&, m](const wsi::TileSpec& t) {
      if (tissue_fraction(t) < opts.min_tissue_frac) return std::vector<float>(t.size * t.size, 0.0f);
      return tile_probabilities(*m, wsi::read_tile(slide, t));
    };
  };
  return stitch(cw, ch, 1.0, tiles, factory, opts.workers);
}

void PostprocessParams::validate() const {
  if (!(threshold >= 0.0 && threshold <= 1.0)) throw ConfigError("threshold must lie in [0, 1]");
  for (std::size_t k : {close_kernel, open_kernel})
    if (k == 0 || k % 2 == 0) throw ConfigError("morphology kernels must be odd and >= 1");
}

void to_json(nlohmann::json& j, const PostprocessParams& p) {
  j = nlohmann::json{{"threshold", p.threshold},
                     {"close_kernel", p.close_kernel},
                     {"open_kernel", p.open_kernel},
                     {"min_object_area", p.min_object_area},
                     {"min_hole_area", p.min_hole_area}};
}

void from_json(const nlohmann::json& j, PostprocessParams& p) {
  PostprocessParams d = p;
  d.threshold = j.value("threshold", d.threshold);
  d.close_kernel = j.value("close_kernel", d.close_kernel);
  d.open_kernel = j.value("open_kernel", d.open_kernel);
  d.min_object_area = j.value("min_object_area", d.min_object_area);
  d.min_hole_area = j.value("min_hole_area", d.min_hole_area);
  d.validate();
  p = d;
}

Mask binarize(const ProbabilityCanvas& canvas, double threshold) {
  const auto& p = canvas.probabilities();
  Mask m(canvas.width(), canvas.height(), 1);
  for (std::size_t i = 0; i < p.size(); ++i) m.data[i] = static_cast<double>(p[i]) > threshold ? 1 : 0;
  return m;
}

Mask post_process(const Mask& mask, const PostprocessParams& params) {
  params.validate();
  Mask m = morph::close(mask, params.close_kernel);
  m = morph::open(m, params.open_kernel);
  m = morph::remove_small_objects(m, params.min_object_area, morph::Connectivity::Eight);
  return morph::fill_small_holes(m, params.min_hole_area, morph::Connectivity::Four);
}

std::array<std::uint8_t, 3> colormap(float p) {
  const double q = std::clamp(static_cast<double>(p), 0.0, 1.0);
  return {static_cast<std::uint8_t>(std::lround(255.0 * q)), 0, static_cast<std::uint8_t>(std::lround(255.0 * (1.0 - q)))};
}

Image emit_heatmap(const ProbabilityCanvas& canvas, const Image& thumbnail, const Mask* ground_truth) {
  const auto& probs = canvas.probabilities();
  if (thumbnail.channels != 3 || thumbnail.empty()) throw ValidationError("heatmap thumbnail must be a non-empty RGB image");
  const double ca = static_cast<double>(canvas.width()) / static_cast<double>(canvas.height());
  const double ta = static_cast<double>(thumbnail.width) / static_cast<double>(thumbnail.height);
  if (std::abs(ca - ta) > 0.02 * std::max(ca, ta))
    throw ValidationError("thumbnail " + std::to_string(thumbnail.width) + "x" + std::to_string(thumbnail.height) +
                          " does not match the canvas aspect " + std::to_string(canvas.width()) + "x" +
                          std::to_string(canvas.height()));
  const std::size_t tw = thumbnail.width, th = thumbnail.height;
  Image out(tw, th, 3);
  for (std::size_t y = 0; y < th; ++y) {
    const std::size_t sy = std::min(canvas.height() - 1, y * canvas.height() / th);
    for (std::size_t x = 0; x < tw; ++x) {
      const std::size_t sx = std::min(canvas.width() - 1, x * canvas.width() / tw);
      const auto col = colormap(probs[sy * canvas.width() + sx]);
      for (std::size_t c = 0; c < 3; ++c)
        out.at(x, y, c) = static_cast<std::uint8_t>((thumbnail.at(x, y, c) + col[c] + 1) / 2);
    }
  }
  if (ground_truth) {
    const Mask gt = resize_nearest(*ground_truth, tw, th);
    auto fg = [&](std::ptrdiff_t x, std::ptrdiff_t y) {
      return x >= 0 && y >= 0 && x < static_cast<std::ptrdiff_t>(tw) && y < static_cast<std::ptrdiff_t>(th) &&
             gt.at(static_cast<std::size_t>(x), static_cast<std::size_t>(y)) != 0;
    };
    for (std::ptrdiff_t y = 0; y < static_cast<std::ptrdiff_t>(th); ++y)
      for (std::ptrdiff_t x = 0; x < static_cast<std::ptrdiff_t>(tw); ++x)
        if (fg(x, y) && !(fg(x - 1, y) && fg(x + 1, y) && fg(x, y - 1) && fg(x, y + 1))) {
          out.at(static_cast<std::size_t>(x), static_cast<std::size_t>(y), 0) = 0;
          out.at(static_cast<std::size_t>(x), static_cast<std::size_t>(y), 1) = 255;
          out.at(static_cast<std::size_t>(x), static_cast<std::size_t>(y), 2) = 0;
        }
  }
  return out;
}

}  // namespace dysp::infer
