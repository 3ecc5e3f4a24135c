#include "dysp/morphology.hpp"

#include <algorithm>

#include "dysp/error.hpp"

namespace dysp::morph {

namespace {

void check_kernel(std::size_t kernel) {
  if (kernel == 0 || kernel % 2 == 0)
    throw ValidationError("morphology kernel must be odd and >= 1, got " + std::to_string(kernel));
}

// Separable square max (dilate) or min (erode); outside is background.
Mask square_filter(const Mask& mask, std::size_t kernel, bool dilate) {
  check_kernel(kernel);
  const std::size_t r = kernel / 2;
  const std::size_t w = mask.width, h = mask.height;
  auto pass = [&](const Mask& in, bool horizontal) {
    Mask out(w, h, 1);
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        const std::size_t pos = horizontal ? x : y;
        const std::size_t len = horizontal ? w : h;
        bool any = false, all = true;
        for (std::size_t k = 0; k < kernel; ++k) {
          const std::ptrdiff_t q = static_cast<std::ptrdiff_t>(pos + k) - static_cast<std::ptrdiff_t>(r);
          bool v = false;
          if (q >= 0 && q < static_cast<std::ptrdiff_t>(len)) {
            const auto qq = static_cast<std::size_t>(q);
            v = horizontal ? in.at(qq, y) != 0 : in.at(x, qq) != 0;
          }
          any = any || v;
          all = all && v;
        }
        out.at(x, y) = (dilate ? any : all) ? 1 : 0;
      }
    return out;
  };
  return pass(pass(mask, true), false);
}

Mask pad(const Mask& mask, std::size_t r) {
  Mask out(mask.width + 2 * r, mask.height + 2 * r, 1);
  for (std::size_t y = 0; y < mask.height; ++y)
    for (std::size_t x = 0; x < mask.width; ++x) out.at(x + r, y + r) = mask.at(x, y) ? 1 : 0;
  return out;
}

Mask unpad(const Mask& mask, std::size_t r, std::size_t w, std::size_t h) {
  Mask out(w, h, 1);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) out.at(x, y) = mask.at(x + r, y + r);
  return out;
}

}  // namespace

Mask dilate(const Mask& mask, std::size_t kernel) { return square_filter(mask, kernel, true); }
Mask erode(const Mask& mask, std::size_t kernel) { return square_filter(mask, kernel, false); }

Mask close(const Mask& mask, std::size_t kernel) {
  check_kernel(kernel);
  const std::size_t r = kernel / 2;
  return unpad(erode(dilate(pad(mask, r), kernel), kernel), r, mask.width, mask.height);
}

Mask open(const Mask& mask, std::size_t kernel) { return dilate(erode(mask, kernel), kernel); }

Components label(const Mask& mask, Connectivity connectivity, bool foreground) {
  const std::size_t w = mask.width, h = mask.height;
  Components c;
  c.labels.assign(w * h, 0);
  std::vector<std::size_t> stack;
  const bool eight = connectivity == Connectivity::Eight;
  for (std::size_t start = 0; start < w * h; ++start) {
    if (c.labels[start] != 0 || (mask.data[start] != 0) != foreground) continue;
    const auto id = static_cast<std::int32_t>(c.areas.size() + 1);
    std::size_t area = 0;
    bool border = false;
    c.labels[start] = id;
    stack.push_back(start);
    while (!stack.empty()) {
      const std::size_t p = stack.back();
      stack.pop_back();
      ++area;
      const std::size_t x = p % w, y = p / w;
      if (x == 0 || y == 0 || x + 1 == w || y + 1 == h) border = true;
      for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -1; dx <= 1; ++dx) {
          if ((dx == 0 && dy == 0) || (!eight && dx != 0 && dy != 0)) continue;
          const auto nx = static_cast<std::ptrdiff_t>(x) + dx, ny = static_cast<std::ptrdiff_t>(y) + dy;
          if (nx < 0 || ny < 0 || nx >= static_cast<std::ptrdiff_t>(w) || ny >= static_cast<std::ptrdiff_t>(h))
            continue;
          const std::size_t q = static_cast<std::size_t>(ny) * w + static_cast<std::size_t>(nx);
          if (c.labels[q] == 0 && (mask.data[q] != 0) == foreground) {
            c.labels[q] = id;
            stack.push_back(q);
          }
        }
    }
    c.areas.push_back(area);
    c.touches_border.push_back(border);
  }
  return c;
}

Mask remove_small_objects(const Mask& mask, std::size_t min_area, Connectivity connectivity) {
  const auto comps = label(mask, connectivity, true);
  Mask out(mask.width, mask.height, 1);
  for (std::size_t i = 0; i < out.data.size(); ++i) {
    const auto id = comps.labels[i];
    out.data[i] = (id != 0 && comps.areas[static_cast<std::size_t>(id - 1)] >= min_area) ? 1 : 0;
  }
  return out;
}

Mask fill_small_holes(const Mask& mask, std::size_t min_area, Connectivity connectivity) {
  const auto holes = label(mask, connectivity, false);
  Mask out(mask.width, mask.height, 1);
  for (std::size_t i = 0; i < out.data.size(); ++i) {
    if (mask.data[i] != 0) {
      out.data[i] = 1;
      continue;
    }
    const auto k = static_cast<std::size_t>(holes.labels[i] - 1);
    out.data[i] = (!holes.touches_border[k] && holes.areas[k] < min_area) ? 1 : 0;
  }
  return out;
}

}  // namespace dysp::morph
