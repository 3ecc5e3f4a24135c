#pragma once

// Whole-section inference: tile probabilities blended into a canvas by
// averaging, thresholding, morphological clean-up and heatmap rendering.

#include <filesystem>
#include <functional>
#include <optional>
#include <vector>

#include "dysp/image.hpp"
#include "dysp/transunet.hpp"
#include "dysp/wsi.hpp"
#include "json.hpp"

namespace dysp::infer {

// Tile probabilities are quantized to multiples of 2^-20 before
// accumulation. A float holds any sum of up to 15 such values in [0, 1]
// exactly, so the sum does not depend on the order in which tiles arrive.
inline constexpr double kProbQuantum = 1.0 / 1048576.0;
float quantize_probability(double p);

class ProbabilityCanvas {
 public:
  ProbabilityCanvas() = default;
  ProbabilityCanvas(std::size_t width, std::size_t height, double mpp = 1.0);

  std::size_t width() const { return width_; }
  std::size_t height() const { return height_; }
  double mpp() const { return mpp_; }
  bool finalized() const { return finalized_; }

  // Row-major size x size probabilities with their origin at (x, y); pixels
  // past the canvas are ignored. Throws StateError once finalized.
  void add_tile(std::size_t x, std::size_t y, std::size_t size, const std::vector<float>& probs);
  // Adds another canvas's sums and counts. Throws DimensionError on mismatch.
  void merge(const ProbabilityCanvas& other);
  void finalize();

  // Throw StateError before finalize().
  float prob(std::size_t x, std::size_t y) const;
  const std::vector<float>& probabilities() const;

  const std::vector<float>& sums() const { return sum_; }
  const std::vector<std::uint16_t>& counts() const { return count_; }

  // canvas.f32 (little-endian finalized probabilities) and a JSON sidecar
  // {width, height, mpp}.
  void save(const std::filesystem::path& f32_path, const std::filesystem::path& json_path) const;
  static ProbabilityCanvas load(const std::filesystem::path& f32_path, const std::filesystem::path& json_path);

 private:
  std::size_t width_ = 0;
  std::size_t height_ = 0;
  double mpp_ = 1.0;
  std::vector<float> sum_;
  std::vector<std::uint16_t> count_;
  std::vector<float> prob_;
  bool finalized_ = false;
};

// One tile -> size*size class-1 probabilities. Each worker receives its own
// function, so functions may keep per-worker state such as a model copy.
using TileFn = std::function<std::vector<float>(const wsi::TileSpec&)>;
using TileFnFactory = std::function<TileFn(std::size_t worker)>;

// Tile i goes to worker i mod workers; each worker fills a private canvas and
// the partial canvases are merged in worker order, then finalized.
ProbabilityCanvas stitch(std::size_t width, std::size_t height, double mpp, const std::vector<wsi::TileSpec>& tiles,
                         const TileFnFactory& factory, std::size_t workers = 1);

struct InferOptions {
  std::size_t patch = 512;
  std::size_t overlap = 184;
  double min_tissue_frac = 0.1;
  std::size_t workers = 1;
};

// Softmax class-1 probability of a single RGB tile under an eval-mode model.
std::vector<float> tile_probabilities(TransUnet& model, const Image& tile);

// Tiles below min_tissue_frac contribute probability 0 with count 1 without
// running the model. Throws ConfigError when model input size != patch.
ProbabilityCanvas infer_canvas(const wsi::WsiPyramid& slide, const TransUnet& model, const InferOptions& opts);

struct PostprocessParams {
  double threshold = 0.5;
  std::size_t close_kernel = 5;
  std::size_t open_kernel = 5;
  std::size_t min_object_area = 1000;
  std::size_t min_hole_area = 1000;

  void validate() const;
};

void to_json(nlohmann::json& j, const PostprocessParams& p);
void from_json(const nlohmann::json& j, PostprocessParams& p);

// prob > threshold. Throws StateError on an unfinalized canvas.
Mask binarize(const ProbabilityCanvas& canvas, double threshold);

// Closing, opening, removal of 8-connected objects below min_object_area,
// filling of 4-connected holes below min_hole_area.
Mask post_process(const Mask& mask, const PostprocessParams& params);

// 0 -> blue, 1 -> red, linear in between.
std::array<std::uint8_t, 3> colormap(float p);

// Probability colours blended 50/50 over the thumbnail; the optional ground
// truth outline is drawn in green. Throws ValidationError when the canvas and
// thumbnail aspect ratios differ by more than 2%.
Image emit_heatmap(const ProbabilityCanvas& canvas, const Image& thumbnail, const Mask* ground_truth = nullptr);

}  // namespace dysp::infer
