#pragma once

// Multi-resolution slide store (meta.json + one PNG per level), mpp-aware
// region reads, overlapping tessellation, tissue detection, ground truth and
// the patch manifest with stratified sampling.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "dysp/image.hpp"
#include "dysp/rng.hpp"
#include "json.hpp"

namespace dysp::wsi {

struct Level {
  double downsample = 1.0;
  std::string file;
  Image raster;
};

struct WsiPyramid {
  std::string id;  // directory stem when opened from disk
  std::size_t width = 0;
  std::size_t height = 0;
  double mpp = 1.0;
  std::vector<Level> levels;
  std::string scanner = "unknown";
  std::string slide_class = "case";  // case | control

  // Builds levels by area-averaging the base raster at each integer factor.
  static WsiPyramid from_base(const Image& base, double mpp, const std::vector<int>& downsamples = {1, 2, 4});
  static WsiPyramid open(const std::filesystem::path& dir);
  void save(const std::filesystem::path& dir) const;
  void validate() const;

  // Extents of the canvas resampled to `out_mpp`.
  std::size_t canvas_width(double out_mpp = 1.0) const;
  std::size_t canvas_height(double out_mpp = 1.0) const;
};

nlohmann::json meta_json(const WsiPyramid& p);

// Box-filter reduction by an integer factor; edge blocks average the pixels
// that exist.
Image downscale_area(const Image& img, std::size_t factor);

// Rect in out_mpp canvas pixels. Samples from the coarsest level that is still
// at least as fine as out_mpp, bilinear at pixel centres; samples whose centre
// falls past the stored raster are white. Throws BoundsError.
Image read_region(const WsiPyramid& p, std::size_t x, std::size_t y, std::size_t w, std::size_t h, double out_mpp);

struct TileSpec {
  std::size_t x = 0;
  std::size_t y = 0;
  std::size_t size = 512;
  double mpp = 1.0;
  std::string slide;
  bool padded = false;  // canvas smaller than the tile; outside area is white
  bool operator==(const TileSpec&) const = default;
};

void to_json(nlohmann::json& j, const TileSpec& t);
void from_json(const nlohmann::json& j, TileSpec& t);

// Tile origins along one axis: 0, stride, 2*stride, ... with the last one
// clamped to extent - patch, deduplicated.
std::vector<std::size_t> tile_positions(std::size_t extent, std::size_t patch, std::size_t overlap);
// Row-major tiles covering a canvas. Throws ConfigError when overlap >= patch.
std::vector<TileSpec> tessellate(std::size_t canvas_w, std::size_t canvas_h, std::size_t patch = 512,
                                 std::size_t overlap = 184, double mpp = 1.0, const std::string& slide = {});

// Tile pixels; padded tiles are filled white past the canvas.
Image read_tile(const WsiPyramid& p, const TileSpec& t);

// Histogram threshold maximizing between-class variance; values <= t form
// the lower class. Returns 255 when the image holds a single grey level.
int otsu_threshold(const Image& gray);

inline constexpr int kWhiteLevel = 220;  // never tissue at or above this grey level

// Tissue at `mpp`: Otsu on the coarsest level (darker class, below the white
// level), opened with radius 2, resampled nearest to the canvas.
Mask tissue_mask(const WsiPyramid& p, double mpp = 1.0);

struct GroundTruth {
  Mask mask;                       // 0/1 at 1.0 mpp
  std::vector<std::int32_t> roi;   // per pixel, 0 = outside any ROI, else 1..roi_count
  std::size_t roi_count = 0;
};

// One ROI per connected tissue section (8-connected, annotated pixels count
// as tissue); sections smaller than min_area are dropped and ids are dense.
GroundTruth make_ground_truth(const Mask& annotation, const Mask& tissue, std::size_t min_area = 64);
// ROI map as a grey PNG (value = id); at most 255 ROIs.
Image roi_to_png(const GroundTruth& gt);
GroundTruth ground_truth_from_pngs(const Image& mask_png, const Image& roi_png);

enum class TileLabel { Normal = 0, Dysplastic = 1 };

struct ManifestRow {
  std::string slide;
  std::filesystem::path slide_dir;
  TileSpec tile;
  TileLabel label = TileLabel::Normal;
  std::string scanner;
  double tissue_fraction = 0.0;
  double positive_fraction = 0.0;
};

void to_json(nlohmann::json& j, const ManifestRow& r);
void from_json(const nlohmann::json& j, ManifestRow& r);

using Manifest = std::vector<ManifestRow>;

struct SlideInput {
  const WsiPyramid* pyramid;
  const Mask* annotation;  // 0/1 at 1.0 mpp
  std::filesystem::path dir;
};

// Tiles whose tissue fraction is below min_tissue_frac are dropped; the label
// is dysplastic when more than half the tile is annotated. Throws
// ValidationError on misaligned masks.
Manifest build_patch_dataset(const std::vector<SlideInput>& slides, std::size_t patch = 512, std::size_t overlap = 184,
                             double min_tissue_frac = 0.1);

void write_manifest(const std::filesystem::path& path, const Manifest& rows);
// Relative slide directories resolve against the manifest's directory.
Manifest read_manifest(const std::filesystem::path& path);

// n draws with replacement; each row weighs 1 / |its (scanner, label) stratum|.
std::vector<std::size_t> weighted_sample(const Manifest& manifest, Rng& rng, std::size_t n);

}  // namespace dysp::wsi
