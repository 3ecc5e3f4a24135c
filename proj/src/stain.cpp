#include "dysp/stain.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>

#include "dysp/error.hpp"

namespace dysp::stain {

namespace {

constexpr std::size_t kMinTissuePixels = 100;
// Second eigenvalue below this fraction of the first means one stain only.
constexpr double kRankTolerance = 1e-3;

double dot(const Vec3& a, const Vec3& b) { return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]; }

Vec3 cross(const Vec3& a, const Vec3& b) {
  return {a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]};
}

Vec3 normalized(Vec3 v) {
  const double n = std::sqrt(dot(v, v));
  for (auto& x : v) x /= n;
  return v;
}

Vec3 mat_vec(const std::array<Vec3, 3>& a, const Vec3& v) { return {dot(a[0], v), dot(a[1], v), dot(a[2], v)}; }

// Unit vector spanning the null space of (a - lambda I), for a simple eigenvalue.
Vec3 null_vector(const std::array<Vec3, 3>& a, double lambda) {
  std::array<Vec3, 3> m = a;
  for (int i = 0; i < 3; ++i) m[i][i] -= lambda;
  const std::array<Vec3, 3> candidates{cross(m[0], m[1]), cross(m[0], m[2]), cross(m[1], m[2])};
  std::size_t best = 0;
  for (std::size_t i = 1; i < 3; ++i)
    if (dot(candidates[i], candidates[i]) > dot(candidates[best], candidates[best])) best = i;
  if (dot(candidates[best], candidates[best]) == 0.0) return {1.0, 0.0, 0.0};
  return normalized(candidates[best]);
}

}  // namespace

StainMatrix reference_matrix() {
  StainMatrix m;
  m.h = normalized({0.5626, 0.7201, 0.4062});
  m.e = normalized({0.2159, 0.8012, 0.5581});
  return m;
}

void to_json(nlohmann::json& j, const StainMatrix& m) {
  j = nlohmann::json{{"h", m.h}, {"e", m.e}, {"beta", m.beta}, {"alpha", m.alpha}};
}

void from_json(const nlohmann::json& j, StainMatrix& m) {
  if (j.is_array()) {
    if (j.size() != 6) throw ConfigError("stain matrix array needs 6 numbers, got " + std::to_string(j.size()));
    for (std::size_t i = 0; i < 3; ++i) {
      m.h[i] = j[i].get<double>();
      m.e[i] = j[3 + i].get<double>();
    }
  } else {
    m.h = j.at("h").get<Vec3>();
    m.e = j.at("e").get<Vec3>();
    m.beta = j.value("beta", m.beta);
    m.alpha = j.value("alpha", m.alpha);
  }
  for (const Vec3* v : {&m.h, &m.e}) {
    const double n = std::sqrt(dot(*v, *v));
    if (!(n > 0.0)) throw ConfigError("stain vector has zero norm");
  }
  m.h = normalized(m.h);
  m.e = normalized(m.e);
}

double rgb_to_od(std::uint8_t value) { return -std::log10((static_cast<double>(value) + 1.0) / 255.0); }

std::uint8_t od_to_rgb(double od) {
  const double v = 255.0 * std::pow(10.0, -od) - 1.0;
  return static_cast<std::uint8_t>(std::clamp(std::round(v), 0.0, 255.0));
}

FloatImage rgb_to_od(const Image& rgb) {
  FloatImage out(rgb.width, rgb.height, rgb.channels);
  for (std::size_t i = 0; i < rgb.data.size(); ++i) out.data[i] = rgb_to_od(rgb.data[i]);
  return out;
}

Image od_to_rgb(const FloatImage& od) {
  Image out(od.width, od.height, od.channels);
  for (std::size_t i = 0; i < od.data.size(); ++i) out.data[i] = od_to_rgb(od.data[i]);
  return out;
}

double od_norm(const double* od) { return std::sqrt(od[0] * od[0] + od[1] * od[1] + od[2] * od[2]); }

Eigen3 eigen_symmetric(const std::array<Vec3, 3>& a) {
  Eigen3 r;
  const double p1 = a[0][1] * a[0][1] + a[0][2] * a[0][2] + a[1][2] * a[1][2];
  const double q = (a[0][0] + a[1][1] + a[2][2]) / 3.0;
  const double p2 = (a[0][0] - q) * (a[0][0] - q) + (a[1][1] - q) * (a[1][1] - q) + (a[2][2] - q) * (a[2][2] - q) +
                    2.0 * p1;
  if (p2 == 0.0) {
    r.values = {q, q, q};
    r.vectors = {Vec3{1, 0, 0}, Vec3{0, 1, 0}, Vec3{0, 0, 1}};
    return r;
  }
  const double p = std::sqrt(p2 / 6.0);
  std::array<Vec3, 3> b = a;
  for (int i = 0; i < 3; ++i) {
    b[i][i] -= q;
    for (auto& x : b[i]) x /= p;
  }
  const double det = b[0][0] * (b[1][1] * b[2][2] - b[1][2] * b[2][1]) -
                     b[0][1] * (b[1][0] * b[2][2] - b[1][2] * b[2][0]) +
                     b[0][2] * (b[1][0] * b[2][1] - b[1][1] * b[2][0]);
  const double phi = std::acos(std::clamp(det / 2.0, -1.0, 1.0)) / 3.0;
  const double l1 = q + 2.0 * p * std::cos(phi);

  // The top eigenvector from a cross product, the remaining pair from an
  // exact 2x2 problem in its orthogonal complement (stable when l2 ~ l3).
  const Vec3 v1 = null_vector(a, l1);
  const Vec3 seed = std::abs(v1[0]) < 0.9 ? Vec3{1, 0, 0} : Vec3{0, 1, 0};
  const Vec3 u = normalized(cross(v1, seed));
  const Vec3 w = cross(v1, u);
  const Vec3 au = mat_vec(a, u), aw = mat_vec(a, w);
  const double m00 = dot(u, au), m01 = dot(u, aw), m11 = dot(w, aw);
  const double mid = 0.5 * (m00 + m11), rad = std::hypot(0.5 * (m00 - m11), m01);
  const double l2 = mid + rad;
  // eigenvector of [[m00,m01],[m01,m11]] for l2
  double cu, cw;
  if (rad == 0.0) {
    cu = 1.0;
    cw = 0.0;
  } else if (m00 >= m11) {
    cu = l2 - m11;
    cw = m01;
  } else {
    cu = m01;
    cw = l2 - m00;
  }
  const double cn = std::hypot(cu, cw);
  cu /= cn;
  cw /= cn;
  Vec3 v2{}, v3{};
  for (int i = 0; i < 3; ++i) {
    v2[i] = cu * u[i] + cw * w[i];
    v3[i] = -cw * u[i] + cu * w[i];
  }
  r.values = {l1, l2, mid - rad};
  r.vectors = {v1, v2, v3};
  return r;
}

double percentile(std::vector<double> values, double q) {
  if (values.empty()) throw ValidationError("percentile of empty data");
  std::sort(values.begin(), values.end());
  const double rank = q / 100.0 * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(rank));
  const std::size_t hi = std::min(lo + 1, values.size() - 1);
  const double frac = rank - static_cast<double>(lo);
  return values[lo] + (values[hi] - values[lo]) * frac;
}

StainMatrix estimate_stain_matrix(const Image& rgb, double beta, double alpha) {
  if (rgb.channels != 3) throw ValidationError("stain estimation needs an RGB image");
  if (!(alpha >= 0.0 && alpha < 50.0)) throw ConfigError("alpha percentile must be in [0, 50)");
  const FloatImage od = rgb_to_od(rgb);
  std::vector<Vec3> tissue;
  for (std::size_t p = 0; p < od.pixel_count(); ++p) {
    const double* v = &od.data[p * 3];
    if (od_norm(v) > beta) tissue.push_back({v[0], v[1], v[2]});
  }
  if (tissue.size() < kMinTissuePixels)
    throw EstimationError("only " + std::to_string(tissue.size()) + " pixels exceed OD " + std::to_string(beta) +
                          " (need " + std::to_string(kMinTissuePixels) + ")");

  Vec3 mean{};
  for (const auto& v : tissue)
    for (int i = 0; i < 3; ++i) mean[i] += v[i];
  for (auto& m : mean) m /= static_cast<double>(tissue.size());
  std::array<Vec3, 3> cov{};
  for (const auto& v : tissue)
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) cov[i][j] += (v[i] - mean[i]) * (v[j] - mean[j]);
  for (auto& row : cov)
    for (auto& x : row) x /= static_cast<double>(tissue.size() - 1);

  const Eigen3 eig = eigen_symmetric(cov);
  if (!(eig.values[0] > 0.0) || eig.values[1] <= kRankTolerance * eig.values[0])
    throw EstimationError("tissue optical density is rank-deficient (single stain?)");
  Vec3 e1 = eig.vectors[0], e2 = eig.vectors[1];
  if (e1[0] + e1[1] + e1[2] < 0)
    for (auto& x : e1) x = -x;
  if (e2[0] < 0)
    for (auto& x : e2) x = -x;

  std::vector<double> angles;
  angles.reserve(tissue.size());
  for (const auto& v : tissue) angles.push_back(std::atan2(dot(v, e2), dot(v, e1)));
  const double lo = percentile(angles, alpha);
  const double hi = percentile(angles, 100.0 - alpha);
  auto direction = [&](double phi) {
    Vec3 v{};
    for (int i = 0; i < 3; ++i) v[i] = std::max(0.0, e1[i] * std::cos(phi) + e2[i] * std::sin(phi));
    return normalized(v);
  };
  Vec3 a = direction(lo), b = direction(hi);
  // haematoxylin absorbs more strongly in the red channel
  if (a[0] < b[0]) std::swap(a, b);
  StainMatrix m;
  m.h = a;
  m.e = b;
  m.beta = beta;
  m.alpha = alpha;
  return m;
}

std::array<double, 2> solve_concentrations(const StainMatrix& m, const double* od) {
  const Vec3 y{od[0], od[1], od[2]};
  const double hh = dot(m.h, m.h), ee = dot(m.e, m.e), he = dot(m.h, m.e);
  const double hy = dot(m.h, y), ey = dot(m.e, y);
  const double det = hh * ee - he * he;
  if (det > 1e-12) {
    const double ch = (ee * hy - he * ey) / det;
    const double ce = (hh * ey - he * hy) / det;
    if (ch >= 0.0 && ce >= 0.0) return {ch, ce};
  }
  // Active-set fallbacks: one stain alone, or none.
  auto residual = [&](double ch, double ce) {
    double r = 0.0;
    for (int i = 0; i < 3; ++i) {
      const double d = y[i] - ch * m.h[i] - ce * m.e[i];
      r += d * d;
    }
    return r;
  };
  const double ch = std::max(0.0, hy / hh);
  const double ce = std::max(0.0, ey / ee);
  return residual(ch, 0.0) <= residual(0.0, ce) ? std::array<double, 2>{ch, 0.0} : std::array<double, 2>{0.0, ce};
}

ConcentrationMap get_concentrations(const Image& rgb, const StainMatrix& m) {
  if (rgb.channels != 3) throw ValidationError("concentrations need an RGB image");
  return get_concentrations(rgb_to_od(rgb), m);
}

ConcentrationMap get_concentrations(const FloatImage& od, const StainMatrix& m) {
  if (od.channels != 3) throw ValidationError("concentrations need a 3-channel OD field");
  ConcentrationMap c(od.width, od.height, 2);
  for (std::size_t p = 0; p < od.pixel_count(); ++p) {
    const auto s = solve_concentrations(m, &od.data[p * 3]);
    c.data[p * 2] = s[0];
    c.data[p * 2 + 1] = s[1];
  }
  return c;
}

Image recompose(const StainMatrix& m, const ConcentrationMap& conc) {
  Image out(conc.width, conc.height, 3);
  for (std::size_t p = 0; p < conc.pixel_count(); ++p)
    for (int i = 0; i < 3; ++i)
      out.data[p * 3 + i] = od_to_rgb(conc.data[p * 2] * m.h[i] + conc.data[p * 2 + 1] * m.e[i]);
  return out;
}

Image normalize(const Image& rgb, const StainMatrix& target, double beta, double alpha) {
  const StainMatrix source = estimate_stain_matrix(rgb, beta, alpha);
  return recompose(target, get_concentrations(rgb, source));
}

Image augment_stain(const Image& rgb, const AugmentParams& params, Rng& rng) {
  if (params.sigma1 < 0.0 || params.sigma2 < 0.0) throw ConfigError("stain augmentation sigmas must be >= 0");
  // draw first so the stream advances identically whether or not estimation succeeds
  std::array<double, 2> a{}, b{};
  for (int k = 0; k < 2; ++k) {
    a[k] = uniform(rng, 1.0 - params.sigma1, 1.0 + params.sigma1);
    b[k] = uniform(rng, -params.sigma2, params.sigma2);
  }
  StainMatrix m;
  try {
    m = estimate_stain_matrix(rgb, params.beta, params.alpha);
  } catch (const EstimationError& e) {
    std::cerr << "warning: stain augmentation skipped: " << e.what() << '\n';
    return rgb;
  }
  const FloatImage od = rgb_to_od(rgb);
  Image out = rgb;
  for (std::size_t p = 0; p < od.pixel_count(); ++p) {
    const double* v = &od.data[p * 3];
    if (od_norm(v) <= params.beta) continue;
    auto c = solve_concentrations(m, v);
    for (int k = 0; k < 2; ++k) c[k] = std::max(0.0, a[k] * c[k] + b[k]);
    for (int i = 0; i < 3; ++i) out.data[p * 3 + i] = od_to_rgb(c[0] * m.h[i] + c[1] * m.e[i]);
  }
  return out;
}

}  // namespace dysp::stain
