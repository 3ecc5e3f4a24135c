#include "dysp/augment.hpp"

#include <algorithm>
#include <cmath>

#include "dysp/error.hpp"

namespace dysp::augment {

AugmentPolicy AugmentPolicy::none() {
  AugmentPolicy p;
  p.p_flip_h = p.p_flip_v = p.p_rotate = p.p_blur = p.p_median = p.p_colour = 0.0;
  return p;
}

void AugmentPolicy::validate() const {
  for (double p : {p_flip_h, p_flip_v, p_rotate, p_blur, p_median, p_colour})
    if (!(p >= 0.0 && p <= 1.0)) throw ConfigError("augmentation probabilities must lie in [0, 1]");
  if (!(blur_sigma_min > 0.0 && blur_sigma_max >= blur_sigma_min))
    throw ConfigError("blur sigma range must satisfy 0 < min <= max");
  if (median_kernels.empty()) throw ConfigError("median_kernels must not be empty");
  for (int k : median_kernels)
    if (k < 1 || k % 2 == 0) throw ConfigError("median kernels must be odd and >= 1");
  for (double s : {colour.brightness, colour.contrast, colour.saturation, colour.hue})
    if (s < 0.0) throw ConfigError("colour strengths must be >= 0");
}

void to_json(nlohmann::json& j, const AugmentPolicy& p) {
  j = nlohmann::json{{"p_flip_h", p.p_flip_h},
                     {"p_flip_v", p.p_flip_v},
                     {"p_rotate", p.p_rotate},
                     {"p_blur", p.p_blur},
                     {"p_median", p.p_median},
                     {"p_colour", p.p_colour},
                     {"blur_sigma", {p.blur_sigma_min, p.blur_sigma_max}},
                     {"median_kernels", p.median_kernels},
                     {"colour",
                      {{"brightness", p.colour.brightness},
                       {"contrast", p.colour.contrast},
                       {"saturation", p.colour.saturation},
                       {"hue", p.colour.hue}}}};
}

void from_json(const nlohmann::json& j, AugmentPolicy& p) {
  AugmentPolicy d = p;
  d.p_flip_h = j.value("p_flip_h", d.p_flip_h);
  d.p_flip_v = j.value("p_flip_v", d.p_flip_v);
  d.p_rotate = j.value("p_rotate", d.p_rotate);
  d.p_blur = j.value("p_blur", d.p_blur);
  d.p_median = j.value("p_median", d.p_median);
  d.p_colour = j.value("p_colour", d.p_colour);
  if (j.contains("blur_sigma")) {
    const auto range = j.at("blur_sigma").get<std::vector<double>>();
    if (range.size() != 2) throw ConfigError("blur_sigma must be [min, max]");
    d.blur_sigma_min = range[0];
    d.blur_sigma_max = range[1];
  }
  d.median_kernels = j.value("median_kernels", d.median_kernels);
  if (j.contains("colour")) {
    const auto& c = j.at("colour");
    d.colour.brightness = c.value("brightness", d.colour.brightness);
    d.colour.contrast = c.value("contrast", d.colour.contrast);
    d.colour.saturation = c.value("saturation", d.colour.saturation);
    d.colour.hue = c.value("hue", d.colour.hue);
  }
  d.validate();
  p = d;
}

Image flip_horizontal(const Image& img) {
  Image out(img.width, img.height, img.channels);
  for (std::size_t y = 0; y < img.height; ++y)
    for (std::size_t x = 0; x < img.width; ++x)
      for (std::size_t c = 0; c < img.channels; ++c) out.at(img.width - 1 - x, y, c) = img.at(x, y, c);
  return out;
}

Image flip_vertical(const Image& img) {
  Image out(img.width, img.height, img.channels);
  const std::size_t row = img.width * img.channels;
  for (std::size_t y = 0; y < img.height; ++y)
    std::copy_n(img.data.begin() + y * row, row, out.data.begin() + (img.height - 1 - y) * row);
  return out;
}

Image rotate90(const Image& img, int k) {
  k = ((k % 4) + 4) % 4;
  if (k == 0) return img;
  if (k == 2) return flip_vertical(flip_horizontal(img));
  Image out(img.height, img.width, img.channels);
  for (std::size_t y = 0; y < img.height; ++y)
    for (std::size_t x = 0; x < img.width; ++x)
      for (std::size_t c = 0; c < img.channels; ++c) {
        if (k == 1)
          out.at(y, img.width - 1 - x, c) = img.at(x, y, c);
        else
          out.at(img.height - 1 - y, x, c) = img.at(x, y, c);
      }
  return out;
}

std::size_t reflect_index(std::ptrdiff_t i, std::size_t n) {
  if (n == 1) return 0;
  const auto period = static_cast<std::ptrdiff_t>(2 * (n - 1));
  i %= period;
  if (i < 0) i += period;
  return static_cast<std::size_t>(i < static_cast<std::ptrdiff_t>(n) ? i : period - i);
}

std::vector<double> gaussian_kernel(double sigma) {
  if (!(sigma > 0.0)) throw ValidationError("gaussian sigma must be > 0");
  const auto radius = static_cast<std::ptrdiff_t>(std::ceil(3.0 * sigma));
  std::vector<double> k(static_cast<std::size_t>(2 * radius + 1));
  double total = 0.0;
  for (std::ptrdiff_t i = -radius; i <= radius; ++i) {
    const double v = std::exp(-static_cast<double>(i * i) / (2.0 * sigma * sigma));
    k[static_cast<std::size_t>(i + radius)] = v;
    total += v;
  }
  for (auto& v : k) v /= total;
  return k;
}

FloatImage gaussian_blur(const FloatImage& img, double sigma) {
  const auto k = gaussian_kernel(sigma);
  const auto radius = static_cast<std::ptrdiff_t>(k.size() / 2);
  FloatImage tmp(img.width, img.height, img.channels), out(img.width, img.height, img.channels);
  for (std::size_t y = 0; y < img.height; ++y)
    for (std::size_t x = 0; x < img.width; ++x)
      for (std::size_t c = 0; c < img.channels; ++c) {
        double acc = 0.0;
        for (std::ptrdiff_t i = -radius; i <= radius; ++i)
          acc += k[static_cast<std::size_t>(i + radius)] *
                 img.at(reflect_index(static_cast<std::ptrdiff_t>(x) + i, img.width), y, c);
        tmp.at(x, y, c) = acc;
      }
  for (std::size_t y = 0; y < img.height; ++y)
    for (std::size_t x = 0; x < img.width; ++x)
      for (std::size_t c = 0; c < img.channels; ++c) {
        double acc = 0.0;
        for (std::ptrdiff_t i = -radius; i <= radius; ++i)
          acc += k[static_cast<std::size_t>(i + radius)] *
                 tmp.at(x, reflect_index(static_cast<std::ptrdiff_t>(y) + i, img.height), c);
        out.at(x, y, c) = acc;
      }
  return out;
}

Image gaussian_blur(const Image& img, double sigma) { return to_u8(gaussian_blur(to_float(img), sigma)); }

Image median_blur(const Image& img, int k) {
  if (k < 1 || k % 2 == 0) throw ValidationError("median kernel must be odd and >= 1, got " + std::to_string(k));
  const std::ptrdiff_t r = k / 2;
  Image out(img.width, img.height, img.channels);
  std::vector<std::uint8_t> window(static_cast<std::size_t>(k * k));
  for (std::size_t y = 0; y < img.height; ++y)
    for (std::size_t x = 0; x < img.width; ++x)
      for (std::size_t c = 0; c < img.channels; ++c) {
        std::size_t n = 0;
        for (std::ptrdiff_t dy = -r; dy <= r; ++dy)
          for (std::ptrdiff_t dx = -r; dx <= r; ++dx)
            window[n++] = img.at(reflect_index(static_cast<std::ptrdiff_t>(x) + dx, img.width),
                                 reflect_index(static_cast<std::ptrdiff_t>(y) + dy, img.height), c);
        auto mid = window.begin() + static_cast<std::ptrdiff_t>(n / 2);
        std::nth_element(window.begin(), mid, window.begin() + static_cast<std::ptrdiff_t>(n));
        out.at(x, y, c) = *mid;
      }
  return out;
}

void rgb_to_hsv(double r, double g, double b, double& h, double& s, double& v) {
  const double mx = std::max({r, g, b}), mn = std::min({r, g, b}), d = mx - mn;
  v = mx;
  s = mx > 0.0 ? d / mx : 0.0;
  if (d == 0.0) {
    h = 0.0;
    return;
  }
  if (mx == r)
    h = (g - b) / d;
  else if (mx == g)
    h = 2.0 + (b - r) / d;
  else
    h = 4.0 + (r - g) / d;
  h /= 6.0;
  if (h < 0.0) h += 1.0;
}

void hsv_to_rgb(double h, double s, double v, double& r, double& g, double& b) {
  h = (h - std::floor(h)) * 6.0;
  const int sector = static_cast<int>(std::floor(h)) % 6;
  const double f = h - std::floor(h);
  const double p = v * (1.0 - s), q = v * (1.0 - s * f), t = v * (1.0 - s * (1.0 - f));
  switch (sector) {
    case 0: r = v, g = t, b = p; break;
    case 1: r = q, g = v, b = p; break;
    case 2: r = p, g = v, b = t; break;
    case 3: r = p, g = q, b = v; break;
    case 4: r = t, g = p, b = v; break;
    default: r = v, g = p, b = q; break;
  }
}

Image apply_colour(const Image& rgb, const ColourFactors& f) {
  if (rgb.channels != 3) throw ValidationError("colour perturbation needs an RGB image");
  FloatImage x = to_float(rgb);
  if (f.brightness != 1.0)
    for (auto& v : x.data) v = std::clamp(v * f.brightness, 0.0, 255.0);
  if (f.contrast != 1.0) {
    double grey = 0.0;
    for (std::size_t p = 0; p < x.pixel_count(); ++p)
      grey += 0.299 * x.data[p * 3] + 0.587 * x.data[p * 3 + 1] + 0.114 * x.data[p * 3 + 2];
    grey /= static_cast<double>(std::max<std::size_t>(1, x.pixel_count()));
    for (auto& v : x.data) v = std::clamp((v - grey) * f.contrast + grey, 0.0, 255.0);
  }
  if (f.saturation != 1.0 || f.hue != 0.0) {
    for (std::size_t p = 0; p < x.pixel_count(); ++p) {
      double* px = &x.data[p * 3];
      double h, s, v;
      rgb_to_hsv(px[0] / 255.0, px[1] / 255.0, px[2] / 255.0, h, s, v);
      s = std::clamp(s * f.saturation, 0.0, 1.0);
      h += f.hue;
      double r, g, b;
      hsv_to_rgb(h, s, v, r, g, b);
      px[0] = r * 255.0;
      px[1] = g * 255.0;
      px[2] = b * 255.0;
    }
  }
  return to_u8(x);
}

Image colour_perturb(const Image& rgb, const ColourStrengths& s, Rng& rng) {
  ColourFactors f;
  f.brightness = uniform(rng, 1.0 - s.brightness, 1.0 + s.brightness);
  f.contrast = uniform(rng, 1.0 - s.contrast, 1.0 + s.contrast);
  f.saturation = uniform(rng, 1.0 - s.saturation, 1.0 + s.saturation);
  f.hue = uniform(rng, -s.hue, s.hue);
  return apply_colour(rgb, f);
}

std::pair<Image, Image> apply(const AugmentPolicy& policy, const Image& patch, const Image& mask, Rng& rng) {
  if (patch.width != mask.width || patch.height != mask.height)
    throw ValidationError("patch " + std::to_string(patch.width) + "x" + std::to_string(patch.height) +
                          " and mask " + std::to_string(mask.width) + "x" + std::to_string(mask.height) +
                          " are not congruent");
  Image p = patch, m = mask;
  if (bernoulli(rng, policy.p_flip_h)) {
    p = flip_horizontal(p);
    m = flip_horizontal(m);
  }
  if (bernoulli(rng, policy.p_flip_v)) {
    p = flip_vertical(p);
    m = flip_vertical(m);
  }
  if (bernoulli(rng, policy.p_rotate)) {
    const int k = 1 + static_cast<int>(uniform_index(rng, 3));
    p = rotate90(p, k);
    m = rotate90(m, k);
  }
  if (bernoulli(rng, policy.p_blur)) p = gaussian_blur(p, uniform(rng, policy.blur_sigma_min, policy.blur_sigma_max));
  if (bernoulli(rng, policy.p_median))
    p = median_blur(p, policy.median_kernels[uniform_index(rng, policy.median_kernels.size())]);
  if (bernoulli(rng, policy.p_colour)) p = colour_perturb(p, policy.colour, rng);
  return {std::move(p), std::move(m)};
}

}  // namespace dysp::augment
