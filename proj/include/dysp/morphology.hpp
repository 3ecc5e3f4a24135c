#pragma once

// Binary morphology and connected components on Mask rasters. Pixels outside
// the raster are background for both dilation and erosion.

#include <cstdint>
#include <vector>

#include "dysp/image.hpp"

namespace dysp::morph {

enum class Connectivity { Four = 4, Eight = 8 };

Mask dilate(const Mask& mask, std::size_t kernel);
Mask erode(const Mask& mask, std::size_t kernel);
// Dilate then erode, evaluated on a zero-padded canvas so shapes touching the
// border are not eroded away.
Mask close(const Mask& mask, std::size_t kernel);
// Erode then dilate.
Mask open(const Mask& mask, std::size_t kernel);

struct Components {
  std::vector<std::int32_t> labels;  // 0 = not part of any component, else 1..count
  std::vector<std::size_t> areas;    // areas[id - 1]
  std::vector<bool> touches_border;  // touches_border[id - 1]
  std::size_t count() const { return areas.size(); }
};

// Labels pixels whose mask value equals `foreground` (1 for objects, 0 for
// background regions).
Components label(const Mask& mask, Connectivity connectivity, bool foreground = true);

Mask remove_small_objects(const Mask& mask, std::size_t min_area, Connectivity connectivity = Connectivity::Eight);
// Fills enclosed background regions (not touching the border) below min_area.
Mask fill_small_holes(const Mask& mask, std::size_t min_area, Connectivity connectivity = Connectivity::Four);

}  // namespace dysp::morph
