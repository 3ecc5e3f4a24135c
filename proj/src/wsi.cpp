#include "dysp/wsi.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <map>

#include "dysp/error.hpp"
#include "dysp/morphology.hpp"

namespace dysp::wsi {

namespace fs = std::filesystem;

namespace {

std::size_t scaled_extent(std::size_t base, double factor) {
  return static_cast<std::size_t>(std::ceil(static_cast<double>(base) / factor - 1e-9));
}

}  // namespace

Image downscale_area(const Image& img, std::size_t factor) {
  if (factor == 0) throw ValidationError("downscale factor must be >= 1");
  if (factor == 1) return img;
  const std::size_t w = (img.width + factor - 1) / factor, h = (img.height + factor - 1) / factor;
  Image out(w, h, img.channels);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      const std::size_t x1 = std::min(img.width, (x + 1) * factor), y1 = std::min(img.height, (y + 1) * factor);
      const double n = static_cast<double>((x1 - x * factor) * (y1 - y * factor));
      for (std::size_t c = 0; c < img.channels; ++c) {
        std::size_t acc = 0;
        for (std::size_t sy = y * factor; sy < y1; ++sy)
          for (std::size_t sx = x * factor; sx < x1; ++sx) acc += img.at(sx, sy, c);
        out.at(x, y, c) = static_cast<std::uint8_t>(std::lround(static_cast<double>(acc) / n));
      }
    }
  return out;
}

WsiPyramid WsiPyramid::from_base(const Image& base, double mpp, const std::vector<int>& downsamples) {
  WsiPyramid p;
  p.width = base.width;
  p.height = base.height;
  p.mpp = mpp;
  for (int d : downsamples) {
    if (d < 1) throw ConfigError("level downsample must be >= 1");
    Level lv;
    lv.downsample = d;
    lv.file = "level" + std::to_string(p.levels.size()) + ".png";
    lv.raster = downscale_area(base, static_cast<std::size_t>(d));
    p.levels.push_back(std::move(lv));
  }
  p.validate();
  return p;
}

void WsiPyramid::validate() const {
  if (width == 0 || height == 0) throw ValidationError("slide extents must be positive");
  if (!(mpp > 0.0)) throw ValidationError("slide mpp must be positive");
  if (levels.empty() || levels[0].downsample != 1.0) throw ValidationError("level 0 must have downsample 1");
  for (std::size_t i = 0; i < levels.size(); ++i) {
    const Level& lv = levels[i];
    if (i > 0 && !(lv.downsample > levels[i - 1].downsample))
      throw ValidationError("level downsample factors must increase strictly");
    if (lv.raster.width != scaled_extent(width, lv.downsample) ||
        lv.raster.height != scaled_extent(height, lv.downsample))
      throw ValidationError("level " + std::to_string(i) + " extents " + std::to_string(lv.raster.width) + "x" +
                            std::to_string(lv.raster.height) + " do not match ceil(base / " +
                            std::to_string(lv.downsample) + ")");
    if (lv.raster.channels != 3) throw ValidationError("level " + std::to_string(i) + " is not RGB");
  }
  if (slide_class != "case" && slide_class != "control")
    throw ValidationError("slide class must be case or control, got '" + slide_class + "'");
}

std::size_t WsiPyramid::canvas_width(double out_mpp) const { return scaled_extent(width, out_mpp / mpp); }
std::size_t WsiPyramid::canvas_height(double out_mpp) const { return scaled_extent(height, out_mpp / mpp); }

nlohmann::json meta_json(const WsiPyramid& p) {
  nlohmann::json levels = nlohmann::json::array();
  for (const auto& lv : p.levels) levels.push_back({{"downsample", lv.downsample}, {"file", lv.file}});
  return {{"width", p.width},     {"height", p.height},          {"mpp", p.mpp},
          {"levels", levels},     {"scanner", p.scanner},        {"class", p.slide_class}};
}

WsiPyramid WsiPyramid::open(const fs::path& dir) {
  const fs::path meta_path = dir / "meta.json";
  std::ifstream in(meta_path);
  if (!in) throw IoError("cannot open slide metadata " + meta_path.string());
  nlohmann::json meta;
  try {
    in >> meta;
    WsiPyramid p;
    p.id = dir.filename().string();
    if (p.id.empty()) p.id = dir.parent_path().filename().string();
    p.width = meta.at("width").get<std::size_t>();
    p.height = meta.at("height").get<std::size_t>();
    p.mpp = meta.at("mpp").get<double>();
    p.scanner = meta.value("scanner", p.scanner);
    p.slide_class = meta.value("class", p.slide_class);
    for (const auto& l : meta.at("levels")) {
      Level lv;
      lv.downsample = l.at("downsample").get<double>();
      lv.file = l.at("file").get<std::string>();
      lv.raster = read_png(dir / lv.file);
      p.levels.push_back(std::move(lv));
    }
    p.validate();
    return p;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("malformed " + meta_path.string() + ": " + e.what());
  }
}

void WsiPyramid::save(const fs::path& dir) const {
  validate();
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  for (const auto& lv : levels) write_png(dir / lv.file, lv.raster);
  std::ofstream out(dir / "meta.json");
  if (!out) throw IoError("cannot write " + (dir / "meta.json").string());
  out << meta_json(*this).dump(2) << "\n";
}

Image read_region(const WsiPyramid& p, std::size_t x, std::size_t y, std::size_t w, std::size_t h, double out_mpp) {
  if (!(out_mpp > 0.0)) throw ValidationError("out_mpp must be positive");
  const std::size_t cw = p.canvas_width(out_mpp), ch = p.canvas_height(out_mpp);
  if (x + w > cw || y + h > ch)
    throw BoundsError("region (" + std::to_string(x) + "," + std::to_string(y) + ") " + std::to_string(w) + "x" +
                      std::to_string(h) + " lies outside the " + std::to_string(cw) + "x" + std::to_string(ch) +
                      " canvas at " + std::to_string(out_mpp) + " mpp");
  const double factor = out_mpp / p.mpp;
  std::size_t li = 0;
  for (std::size_t i = 0; i < p.levels.size(); ++i)
    if (p.levels[i].downsample <= factor + 1e-9) li = i;
  const Image& src = p.levels[li].raster;
  const double s = factor / p.levels[li].downsample;
  Image out(w, h, 3, 255);
  for (std::size_t j = 0; j < h; ++j) {
    const double cy = (static_cast<double>(y + j) + 0.5) * s;
    if (cy >= static_cast<double>(src.height)) continue;
    const double sy = std::clamp(cy - 0.5, 0.0, static_cast<double>(src.height - 1));
    const auto y0 = static_cast<std::size_t>(sy);
    const std::size_t y1 = std::min(y0 + 1, src.height - 1);
    const double fy = sy - static_cast<double>(y0);
    for (std::size_t i = 0; i < w; ++i) {
      const double cx = (static_cast<double>(x + i) + 0.5) * s;
      if (cx >= static_cast<double>(src.width)) continue;
      const double sx = std::clamp(cx - 0.5, 0.0, static_cast<double>(src.width - 1));
      const auto x0 = static_cast<std::size_t>(sx);
      const std::size_t x1 = std::min(x0 + 1, src.width - 1);
      const double fx = sx - static_cast<double>(x0);
      for (std::size_t c = 0; c < 3; ++c) {
        const double top = (1.0 - fx) * src.at(x0, y0, c) + fx * src.at(x1, y0, c);
        const double bottom = (1.0 - fx) * src.at(x0, y1, c) + fx * src.at(x1, y1, c);
        out.at(i, j, c) = static_cast<std::uint8_t>(std::lround((1.0 - fy) * top + fy * bottom));
      }
    }
  }
  return out;
}

void to_json(nlohmann::json& j, const TileSpec& t) {
  j = nlohmann::json{{"x", t.x}, {"y", t.y}, {"size", t.size}, {"mpp", t.mpp}, {"slide", t.slide}, {"padded", t.padded}};
}

void from_json(const nlohmann::json& j, TileSpec& t) {
  t.x = j.at("x").get<std::size_t>();
  t.y = j.at("y").get<std::size_t>();
  t.size = j.at("size").get<std::size_t>();
  t.mpp = j.value("mpp", 1.0);
  t.slide = j.value("slide", std::string{});
  t.padded = j.value("padded", false);
}

std::vector<std::size_t> tile_positions(std::size_t extent, std::size_t patch, std::size_t overlap) {
  if (patch == 0 || overlap >= patch)
    throw ConfigError("tile overlap " + std::to_string(overlap) + " must be smaller than the patch size " +
                      std::to_string(patch));
  if (extent <= patch) return {0};
  const std::size_t stride = patch - overlap;
  std::vector<std::size_t> pos;
  for (std::size_t p = 0;; p += stride) {
    if (p + patch >= extent) {
      pos.push_back(extent - patch);
      break;
    }
    pos.push_back(p);
  }
  std::sort(pos.begin(), pos.end());
  pos.erase(std::unique(pos.begin(), pos.end()), pos.end());
  return pos;
}

std::vector<TileSpec> tessellate(std::size_t canvas_w, std::size_t canvas_h, std::size_t patch, std::size_t overlap,
                                 double mpp, const std::string& slide) {
  if (canvas_w == 0 || canvas_h == 0) throw ValidationError("cannot tessellate an empty canvas");
  const auto xs = tile_positions(canvas_w, patch, overlap);
  const auto ys = tile_positions(canvas_h, patch, overlap);
  const bool padded = canvas_w < patch || canvas_h < patch;
  std::vector<TileSpec> tiles;
  tiles.reserve(xs.size() * ys.size());
  for (std::size_t y : ys)
    for (std::size_t x : xs) tiles.push_back({x, y, patch, mpp, slide, padded});
  return tiles;
}

Image read_tile(const WsiPyramid& p, const TileSpec& t) {
  const std::size_t cw = p.canvas_width(t.mpp), ch = p.canvas_height(t.mpp);
  const std::size_t w = std::min(t.size, cw - std::min(cw, t.x)), h = std::min(t.size, ch - std::min(ch, t.y));
  if (w == t.size && h == t.size) return read_region(p, t.x, t.y, t.size, t.size, t.mpp);
  if (!t.padded) throw BoundsError("tile at (" + std::to_string(t.x) + "," + std::to_string(t.y) + ") overruns the canvas");
  Image out(t.size, t.size, 3, 255);
  if (w > 0 && h > 0) paste(out, read_region(p, t.x, t.y, w, h, t.mpp), 0, 0);
  return out;
}

int otsu_threshold(const Image& gray) {
  std::array<double, 256> hist{};
  for (auto v : gray.data) hist[v] += 1.0;
  const double total = static_cast<double>(gray.data.size());
  double sum_all = 0.0;
  for (int i = 0; i < 256; ++i) sum_all += i * hist[i];
  double w0 = 0.0, sum0 = 0.0, best = 0.0;
  int best_t = 255;
  for (int t = 0; t < 255; ++t) {
    w0 += hist[t];
    sum0 += t * hist[t];
    const double w1 = total - w0;
    if (w0 == 0.0 || w1 == 0.0) continue;
    const double m0 = sum0 / w0, m1 = (sum_all - sum0) / w1;
    const double between = w0 * w1 * (m0 - m1) * (m0 - m1);
    if (between > best) {
      best = between;
      best_t = t;
    }
  }
  return best_t;
}

Mask tissue_mask(const WsiPyramid& p, double mpp) {
  const Image gray = to_gray(p.levels.back().raster);
  const int t = otsu_threshold(gray);
  Mask low(gray.width, gray.height, 1);
  for (std::size_t i = 0; i < gray.data.size(); ++i)
    low.data[i] = gray.data[i] <= t && gray.data[i] < kWhiteLevel ? 1 : 0;
  low = morph::open(low, 5);
  return resize_nearest(low, p.canvas_width(mpp), p.canvas_height(mpp));
}

GroundTruth make_ground_truth(const Mask& annotation, const Mask& tissue, std::size_t min_area) {
  if (annotation.width != tissue.width || annotation.height != tissue.height)
    throw ValidationError("annotation and tissue masks are not aligned");
  Mask sections = tissue;
  for (std::size_t i = 0; i < sections.data.size(); ++i) sections.data[i] = (tissue.data[i] || annotation.data[i]) ? 1 : 0;
  const auto comps = morph::label(sections, morph::Connectivity::Eight);
  std::vector<std::int32_t> remap(comps.count() + 1, 0);
  std::int32_t next = 0;
  for (std::size_t id = 1; id <= comps.count(); ++id)
    if (comps.areas[id - 1] >= min_area) remap[id] = ++next;
  GroundTruth gt;
  gt.mask = annotation;
  for (auto& v : gt.mask.data) v = v ? 1 : 0;
  gt.roi.resize(comps.labels.size());
  for (std::size_t i = 0; i < comps.labels.size(); ++i) gt.roi[i] = remap[static_cast<std::size_t>(comps.labels[i])];
  gt.roi_count = static_cast<std::size_t>(next);
  return gt;
}

Image roi_to_png(const GroundTruth& gt) {
  if (gt.roi_count > 255) throw ValidationError("more than 255 ROIs cannot be stored in an 8-bit map");
  Image out(gt.mask.width, gt.mask.height, 1);
  for (std::size_t i = 0; i < gt.roi.size(); ++i) out.data[i] = static_cast<std::uint8_t>(gt.roi[i]);
  return out;
}

GroundTruth ground_truth_from_pngs(const Image& mask_png, const Image& roi_png) {
  if (mask_png.channels != 1 || roi_png.channels != 1) throw ValidationError("ground truth PNGs must be single-channel");
  if (mask_png.width != roi_png.width || mask_png.height != roi_png.height)
    throw ValidationError("ground truth mask and ROI map differ in size");
  GroundTruth gt;
  gt.mask = binarize_levels(mask_png);
  gt.roi.assign(roi_png.data.begin(), roi_png.data.end());
  std::int32_t top = 0;
  for (auto v : gt.roi) top = std::max(top, v);
  std::vector<bool> seen(static_cast<std::size_t>(top) + 1, false);
  for (auto v : gt.roi) seen[static_cast<std::size_t>(v)] = true;
  for (std::int32_t id = 1; id <= top; ++id)
    if (!seen[static_cast<std::size_t>(id)]) throw ValidationError("ROI ids must be dense; id " + std::to_string(id) + " is missing");
  gt.roi_count = static_cast<std::size_t>(top);
  return gt;
}

void to_json(nlohmann::json& j, const ManifestRow& r) {
  j = nlohmann::json{{"slide", r.slide},
                     {"slide_dir", r.slide_dir.string()},
                     {"tile", r.tile},
                     {"label", r.label == TileLabel::Dysplastic ? "dysplastic" : "normal"},
                     {"scanner", r.scanner},
                     {"tissue_fraction", r.tissue_fraction},
                     {"positive_fraction", r.positive_fraction}};
}

void from_json(const nlohmann::json& j, ManifestRow& r) {
  r.slide = j.at("slide").get<std::string>();
  r.slide_dir = j.value("slide_dir", std::string{});
  r.tile = j.at("tile").get<TileSpec>();
  const auto label = j.at("label").get<std::string>();
  if (label != "dysplastic" && label != "normal") throw ValidationError("unknown tile label '" + label + "'");
  r.label = label == "dysplastic" ? TileLabel::Dysplastic : TileLabel::Normal;
  r.scanner = j.value("scanner", std::string("unknown"));
  r.tissue_fraction = j.value("tissue_fraction", 0.0);
  r.positive_fraction = j.value("positive_fraction", 0.0);
}

namespace {

// Fraction of the tile's patch area that is foreground; area past the canvas
// counts as background.
double tile_fraction(const Mask& m, const TileSpec& t) {
  std::size_t hits = 0;
  for (std::size_t y = t.y; y < std::min(m.height, t.y + t.size); ++y)
    for (std::size_t x = t.x; x < std::min(m.width, t.x + t.size); ++x) hits += m.at(x, y) != 0;
  return static_cast<double>(hits) / static_cast<double>(t.size * t.size);
}

}  // namespace

Manifest build_patch_dataset(const std::vector<SlideInput>& slides, std::size_t patch, std::size_t overlap,
                             double min_tissue_frac) {
  Manifest rows;
  for (const auto& s : slides) {
    const WsiPyramid& p = *s.pyramid;
    const std::size_t cw = p.canvas_width(1.0), ch = p.canvas_height(1.0);
    if (s.annotation->width != cw || s.annotation->height != ch)
      throw ValidationError("mask for slide '" + p.id + "' is " + std::to_string(s.annotation->width) + "x" +
                            std::to_string(s.annotation->height) + " but the 1.0 mpp canvas is " + std::to_string(cw) +
                            "x" + std::to_string(ch));
    const Mask tissue = tissue_mask(p, 1.0);
    for (const auto& t : tessellate(cw, ch, patch, overlap, 1.0, p.id)) {
      const double tf = tile_fraction(tissue, t);
      if (tf < min_tissue_frac) continue;
      ManifestRow r;
      r.slide = p.id;
      r.slide_dir = s.dir;
      r.tile = t;
      r.scanner = p.scanner;
      r.tissue_fraction = tf;
      r.positive_fraction = tile_fraction(*s.annotation, t);
      r.label = r.positive_fraction > 0.5 ? TileLabel::Dysplastic : TileLabel::Normal;
      rows.push_back(std::move(r));
    }
  }
  return rows;
}

void write_manifest(const fs::path& path, const Manifest& rows) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write manifest " + path.string());
  for (const auto& r : rows) out << nlohmann::json(r).dump() << "\n";
}

Manifest read_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open manifest " + path.string());
  Manifest rows;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      auto r = nlohmann::json::parse(line).get<ManifestRow>();
      if (r.slide_dir.is_relative()) r.slide_dir = path.parent_path() / r.slide_dir;
      rows.push_back(std::move(r));
    } catch (const nlohmann::json::exception& e) {
      throw ValidationError(path.string() + ":" + std::to_string(n) + ": " + e.what());
    }
  }
  return rows;
}

std::vector<std::size_t> weighted_sample(const Manifest& manifest, Rng& rng, std::size_t n) {
  if (manifest.empty()) throw ValidationError("cannot sample from an empty manifest");
  std::map<std::pair<std::string, TileLabel>, std::size_t> counts;
  for (const auto& r : manifest) ++counts[{r.scanner, r.label}];
  std::vector<double> cdf(manifest.size());
  double acc = 0.0;
  for (std::size_t i = 0; i < manifest.size(); ++i) {
    acc += 1.0 / static_cast<double>(counts[{manifest[i].scanner, manifest[i].label}]);
    cdf[i] = acc;
  }
  std::vector<std::size_t> out(n);
  for (auto& idx : out) {
    const double u = uniform01(rng) * acc;
    idx = static_cast<std::size_t>(std::upper_bound(cdf.begin(), cdf.end(), u) - cdf.begin());
    idx = std::min(idx, manifest.size() - 1);
  }
  return out;
}

}  // namespace dysp::wsi
