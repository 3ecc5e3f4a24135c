#pragma once

// Training-time augmentations: label-safe geometry applied to patch and mask
// together, photometric changes applied to the patch only.

#include <utility>
#include <vector>

#include "dysp/image.hpp"
#include "dysp/rng.hpp"
#include "json.hpp"

namespace dysp::augment {

struct ColourStrengths {
  double brightness = 0.1;
  double contrast = 0.1;
  double saturation = 0.1;
  double hue = 0.05;  // fraction of the hue circle
};

struct AugmentPolicy {
  double p_flip_h = 0.5;
  double p_flip_v = 0.5;
  double p_rotate = 0.5;  // rotation by 90, 180 or 270 degrees
  double p_blur = 0.5;
  double p_median = 0.5;
  double p_colour = 0.5;
  double blur_sigma_min = 0.25;
  double blur_sigma_max = 1.5;
  std::vector<int> median_kernels{3, 5};
  ColourStrengths colour{};

  static AugmentPolicy none();
  void validate() const;
};

void to_json(nlohmann::json& j, const AugmentPolicy& p);
void from_json(const nlohmann::json& j, AugmentPolicy& p);

Image flip_horizontal(const Image& img);
Image flip_vertical(const Image& img);
// Counter-clockwise by k quarter turns.
Image rotate90(const Image& img, int k);

// Reflect-101 border index (…cb|abcd|cb…) for any integer position.
std::size_t reflect_index(std::ptrdiff_t i, std::size_t n);

// Normalized samples of exp(-x^2 / 2 sigma^2) for |x| <= ceil(3 sigma).
std::vector<double> gaussian_kernel(double sigma);
FloatImage gaussian_blur(const FloatImage& img, double sigma);
Image gaussian_blur(const Image& img, double sigma);

// Per-channel k x k median, k odd.
Image median_blur(const Image& img, int k);

struct ColourFactors {
  double brightness = 1.0;  // multiplies intensities
  double contrast = 1.0;    // scales deviation from the mean grey level
  double saturation = 1.0;  // multiplies HSV saturation
  double hue = 0.0;         // added to HSV hue, in turns
};

void rgb_to_hsv(double r, double g, double b, double& h, double& s, double& v);
void hsv_to_rgb(double h, double s, double v, double& r, double& g, double& b);

Image apply_colour(const Image& rgb, const ColourFactors& f);
Image colour_perturb(const Image& rgb, const ColourStrengths& strengths, Rng& rng);

// Throws ValidationError when patch and mask extents differ.
std::pair<Image, Image> apply(const AugmentPolicy& policy, const Image& patch, const Image& mask, Rng& rng);

}  // namespace dysp::augment
