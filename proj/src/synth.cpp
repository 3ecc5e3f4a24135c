#include "dysp/synth.hpp"

#include <cmath>
#include <numbers>

#include "dysp/error.hpp"

namespace dysp::synth {

namespace fs = std::filesystem;

bool Ellipse::contains(double x, double y) const {
  if (rx <= 0.0 || ry <= 0.0) return false;
  const double dx = (x - cx) / rx, dy = (y - cy) / ry;
  return dx * dx + dy * dy <= 1.0;
}

void SlideSpec::validate() const {
  if (width < 16 || height < 16) throw ConfigError("synthetic canvas must be at least 16x16");
  if (!(mpp > 0.0 && mpp <= 1.0)) throw ConfigError("synthetic base mpp must lie in (0, 1]");
  if (downsamples.empty() || downsamples[0] != 1) throw ConfigError("downsamples must start with 1");
  if (!(target_fraction >= 0.0 && target_fraction < 0.5)) throw ConfigError("target_fraction must lie in [0, 0.5)");
  if (blobs > 0 && sections == 0) throw ConfigError("lesions need at least one tissue section");
  if (blobs > 0 && target_fraction <= 0.0) throw ConfigError("lesions need a positive target_fraction");
}

void to_json(nlohmann::json& j, const SlideSpec& s) {
  j = nlohmann::json{{"width", s.width},         {"height", s.height},
                     {"mpp", s.mpp},             {"downsamples", s.downsamples},
                     {"sections", s.sections},   {"blobs", s.blobs},
                     {"target_fraction", s.target_fraction},
                     {"scanner", s.scanner},     {"stains", s.stains},
                     {"seed", s.seed}};
}

void from_json(const nlohmann::json& j, SlideSpec& s) {
  SlideSpec d = s;
  try {
    d.width = j.value("width", d.width);
    d.height = j.value("height", d.height);
    d.mpp = j.value("mpp", d.mpp);
    d.downsamples = j.value("downsamples", d.downsamples);
    d.sections = j.value("sections", d.sections);
    d.blobs = j.value("blobs", d.blobs);
    d.target_fraction = j.value("target_fraction", d.target_fraction);
    d.scanner = j.value("scanner", d.scanner);
    if (j.contains("stains")) d.stains = j.at("stains").get<stain::StainMatrix>();
    d.seed = j.value("seed", d.seed);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("invalid synthetic slide spec: ") + e.what());
  }
  d.validate();
  s = d;
}

namespace {

bool disc_inside(const Ellipse& section, double cx, double cy, double r) {
  if (!section.contains(cx, cy)) return false;
  for (int k = 0; k < 64; ++k) {
    const double a = 2.0 * std::numbers::pi * k / 64.0;
    if (!section.contains(cx + (r + 1.0) * std::cos(a), cy + (r + 1.0) * std::sin(a))) return false;
  }
  return true;
}

// Uniform in [0, 1) from the seed and a pixel position.
double pixel_noise(std::uint64_t seed, std::uint64_t x, std::uint64_t y, std::uint64_t salt) {
  const std::uint64_t h = splitmix64(seed ^ splitmix64(x ^ splitmix64(y ^ splitmix64(salt))));
  return static_cast<double>(h >> 11) * 0x1.0p-53;
}

}  // namespace

Scene layout(const SlideSpec& spec) {
  spec.validate();
  Scene s;
  s.width = spec.width;
  s.height = spec.height;
  s.stains = spec.stains;
  s.seed = spec.seed;
  Rng rng = derive_rng({spec.seed, 0x1a});
  const double w = static_cast<double>(spec.width), h = static_cast<double>(spec.height);
  const double cell = w / static_cast<double>(std::max<std::size_t>(1, spec.sections));
  for (std::size_t i = 0; i < spec.sections; ++i) {
    Ellipse e;
    e.cx = cell * (static_cast<double>(i) + 0.5) + uniform(rng, -0.03, 0.03) * cell;
    e.cy = h * (0.5 + uniform(rng, -0.03, 0.03));
    e.rx = cell * uniform(rng, 0.38, 0.44);
    e.ry = h * uniform(rng, 0.36, 0.42);
    s.sections.push_back(e);
  }
  if (spec.blobs == 0) return s;

  double tissue = 0.0;
  for (const auto& e : s.sections) tissue += std::numbers::pi * e.rx * e.ry;
  const double lesion_area = spec.target_fraction * w * h;
  if (lesion_area > 0.4 * tissue)
    throw ConfigError("target_fraction " + std::to_string(spec.target_fraction) +
                      " needs more lesion area than the tissue sections can hold");
  const double r = std::sqrt(lesion_area / (static_cast<double>(spec.blobs) * std::numbers::pi));
  for (std::size_t b = 0; b < spec.blobs; ++b) {
    bool placed = false;
    for (int attempt = 0; attempt < 20000 && !placed; ++attempt) {
      const Ellipse& sec = s.sections[uniform_index(rng, s.sections.size())];
      const double cx = uniform(rng, sec.cx - sec.rx, sec.cx + sec.rx);
      const double cy = uniform(rng, sec.cy - sec.ry, sec.cy + sec.ry);
      if (!disc_inside(sec, cx, cy, r)) continue;
      bool clear = true;
      for (const auto& o : s.lesions)
        if (std::hypot(cx - o.cx, cy - o.cy) < r + o.rx + 4.0) clear = false;
      if (!clear) continue;
      s.lesions.push_back({cx, cy, r, r});
      placed = true;
    }
    if (!placed)
      throw ConfigError("could not place " + std::to_string(spec.blobs) + " lesions of radius " + std::to_string(r) +
                        " without overlap");
  }
  return s;
}

Image render(const Scene& scene, double scale) {
  const auto w = static_cast<std::size_t>(std::ceil(static_cast<double>(scene.width) * scale - 1e-9));
  const auto h = static_cast<std::size_t>(std::ceil(static_cast<double>(scene.height) * scale - 1e-9));
  Image out(w, h, 3);
  const auto& m = scene.stains;
  for (std::size_t py = 0; py < h; ++py)
    for (std::size_t px = 0; px < w; ++px) {
      const double x = (static_cast<double>(px) + 0.5) / scale, y = (static_cast<double>(py) + 0.5) / scale;
      bool tissue = false, lesion = false;
      for (const auto& e : scene.sections) tissue = tissue || e.contains(x, y);
      if (tissue)
        for (const auto& e : scene.lesions) lesion = lesion || e.contains(x, y);
      const double n1 = 2.0 * pixel_noise(scene.seed, px, py, 1) - 1.0;
      const double n2 = 2.0 * pixel_noise(scene.seed, px, py, 2) - 1.0;
      const double nucleus = pixel_noise(scene.seed, px, py, 3);
      double ch = 0.0, ce = 0.0, bg = 0.01 + 0.01 * n1;
      if (lesion) {
        ch = 0.85 + 0.10 * n1 + (nucleus < 0.15 ? 0.4 : 0.0);
        ce = 0.25 + 0.05 * n2;
      } else if (tissue) {
        ch = 0.30 + 0.08 * n1 + (nucleus < 0.06 ? 0.5 : 0.0);
        ce = 0.55 + 0.08 * n2;
      }
      for (std::size_t c = 0; c < 3; ++c)
        out.at(px, py, c) = stain::od_to_rgb(std::max(0.0, ch * m.h[c] + ce * m.e[c] + (tissue ? 0.0 : bg)));
    }
  return out;
}

Mask lesion_mask(const Scene& scene) {
  Mask out(scene.width, scene.height, 1, 0);
  for (std::size_t py = 0; py < scene.height; ++py)
    for (std::size_t px = 0; px < scene.width; ++px) {
      const double x = static_cast<double>(px) + 0.5, y = static_cast<double>(py) + 0.5;
      bool tissue = false, lesion = false;
      for (const auto& e : scene.sections) tissue = tissue || e.contains(x, y);
      for (const auto& e : scene.lesions) lesion = lesion || e.contains(x, y);
      out.at(px, py) = tissue && lesion ? 1 : 0;
    }
  return out;
}

Mask section_mask(const Scene& scene) {
  Mask out(scene.width, scene.height, 1, 0);
  for (std::size_t py = 0; py < scene.height; ++py)
    for (std::size_t px = 0; px < scene.width; ++px)
      for (const auto& e : scene.sections)
        if (e.contains(static_cast<double>(px) + 0.5, static_cast<double>(py) + 0.5)) out.at(px, py) = 1;
  return out;
}

stain::StainMatrix scanner_stains(std::size_t index) {
  stain::StainMatrix m = stain::reference_matrix();
  const double t = 0.12 * static_cast<double>(index);
  stain::Vec3 h{}, e{};
  for (std::size_t c = 0; c < 3; ++c) {
    h[c] = m.h[c] + t * m.e[c];
    e[c] = m.e[c] + 0.5 * t * m.h[c];
  }
  const double nh = std::sqrt(h[0] * h[0] + h[1] * h[1] + h[2] * h[2]);
  const double ne = std::sqrt(e[0] * e[0] + e[1] * e[1] + e[2] * e[2]);
  for (std::size_t c = 0; c < 3; ++c) {
    m.h[c] = h[c] / nh;
    m.e[c] = e[c] / ne;
  }
  return m;
}

SynthSlide generate_slide(const SlideSpec& spec, const std::string& id) {
  SynthSlide s;
  s.scene = layout(spec);
  const Image base = render(s.scene, 1.0 / spec.mpp);
  s.pyramid = wsi::WsiPyramid::from_base(base, spec.mpp, spec.downsamples);
  s.pyramid.id = id;
  s.pyramid.scanner = spec.scanner;
  s.pyramid.slide_class = spec.blobs == 0 ? "control" : "case";
  if (s.pyramid.canvas_width(1.0) != spec.width || s.pyramid.canvas_height(1.0) != spec.height)
    throw ConfigError("canvas extents do not divide evenly at mpp " + std::to_string(spec.mpp));
  s.truth = wsi::make_ground_truth(lesion_mask(s.scene), section_mask(s.scene));
  return s;
}

void write_slide(const fs::path& dir, const SynthSlide& slide) {
  slide.pyramid.save(dir);
  write_png(dir / "gt.png", mask_to_png_levels(slide.truth.mask));
  write_png(dir / "roi.png", wsi::roi_to_png(slide.truth));
}

std::pair<Image, Mask> make_patch(std::size_t size, Rng& rng, double lesion_prob, const stain::StainMatrix& stains) {
  Scene s;
  s.width = s.height = size;
  s.stains = stains;
  s.seed = rng();
  const double sz = static_cast<double>(size);
  s.sections.push_back({sz / 2, sz / 2, sz * 2, sz * 2});
  if (bernoulli(rng, lesion_prob)) {
    const double r = uniform(rng, sz / 6, sz / 3);
    s.lesions.push_back({uniform(rng, r, sz - r), uniform(rng, r, sz - r), r, r});
  }
  // render at twice the resolution and average down, like a slide level
  return {wsi::downscale_area(render(s, 2.0), 2), lesion_mask(s)};
}

}  // namespace dysp::synth
