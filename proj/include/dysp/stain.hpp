#pragma once

// Optical-density stain deconvolution for H&E: Macenko stain-matrix
// estimation, per-pixel concentrations, normalization and augmentation.

#include <array>
#include <cstdint>

#include "dysp/image.hpp"
#include "dysp/rng.hpp"
#include "json.hpp"

namespace dysp::stain {

using Vec3 = std::array<double, 3>;

struct StainMatrix {
  Vec3 h{};  // haematoxylin OD unit vector
  Vec3 e{};  // eosin OD unit vector
  double beta = 0.15;
  double alpha = 1.0;

  const Vec3& operator[](std::size_t i) const { return i == 0 ? h : e; }
};

// Commonly used H&E reference (rows H, E).
StainMatrix reference_matrix();

// {"h":[..],"e":[..],"beta":..,"alpha":..}; from_json also accepts a flat
// 6-number array [h0,h1,h2,e0,e1,e2].
void to_json(nlohmann::json& j, const StainMatrix& m);
void from_json(const nlohmann::json& j, StainMatrix& m);

// OD = -log10((I + 1) / 255).
double rgb_to_od(std::uint8_t value);
std::uint8_t od_to_rgb(double od);
FloatImage rgb_to_od(const Image& rgb);
Image od_to_rgb(const FloatImage& od);

double od_norm(const double* od);

// Symmetric 3x3 eigen-decomposition; eigenvalues descending, vectors unit.
struct Eigen3 {
  Vec3 values{};
  std::array<Vec3, 3> vectors{};
};
Eigen3 eigen_symmetric(const std::array<Vec3, 3>& a);

// numpy-style linear-interpolated percentile of unsorted data, q in [0,100].
double percentile(std::vector<double> values, double q);

// Throws EstimationError when fewer than 100 pixels exceed `beta` in OD norm
// or the tissue OD is rank-deficient (a single stain).
StainMatrix estimate_stain_matrix(const Image& rgb, double beta = 0.15, double alpha = 1.0);

// Two-channel raster of nonnegative concentrations (H, E).
using ConcentrationMap = FloatImage;

// Per-pixel nonnegative least squares of OD ~ [h e] c.
std::array<double, 2> solve_concentrations(const StainMatrix& m, const double* od);
ConcentrationMap get_concentrations(const Image& rgb, const StainMatrix& m);
ConcentrationMap get_concentrations(const FloatImage& od, const StainMatrix& m);
Image recompose(const StainMatrix& m, const ConcentrationMap& conc);

// Estimate, deconvolve, recompose with `target`. Throws EstimationError.
Image normalize(const Image& rgb, const StainMatrix& target, double beta = 0.15, double alpha = 1.0);

struct AugmentParams {
  double sigma1 = 0.2;  // multiplicative spread
  double sigma2 = 0.2;  // additive spread
  double beta = 0.15;
  double alpha = 1.0;
};

// c' = max(0, a*c + b) per stain with a ~ U(1 - sigma1, 1 + sigma1),
// b ~ U(-sigma2, sigma2), applied to tissue pixels (OD norm > beta);
// background pixels are copied. Returns the input unchanged (with a warning
// on stderr) when the stain matrix cannot be estimated.
Image augment_stain(const Image& rgb, const AugmentParams& params, Rng& rng);

}  // namespace dysp::stain
