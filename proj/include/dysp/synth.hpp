#pragma once

// Synthetic H&E-like slides with known lesions: elliptical tissue sections
// rendered as a two-stain mixture, and disc-shaped lesions with a shifted
// stain balance (denser haematoxylin, less eosin) that a small model can
// learn to segment.

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "dysp/image.hpp"
#include "dysp/rng.hpp"
#include "dysp/stain.hpp"
#include "dysp/wsi.hpp"
#include "json.hpp"

namespace dysp::synth {

struct Ellipse {
  double cx = 0, cy = 0, rx = 0, ry = 0;  // canvas (1.0 mpp) pixels
  bool contains(double x, double y) const;
};

struct Scene {
  std::size_t width = 0;   // canvas extents at 1.0 mpp
  std::size_t height = 0;
  std::vector<Ellipse> sections;
  std::vector<Ellipse> lesions;
  stain::StainMatrix stains = stain::reference_matrix();
  std::uint64_t seed = 0;
};

struct SlideSpec {
  std::size_t width = 512;   // canvas extents at 1.0 mpp
  std::size_t height = 384;
  double mpp = 0.5;          // base level resolution
  std::vector<int> downsamples{1, 2, 4};
  std::size_t sections = 2;
  std::size_t blobs = 3;
  double target_fraction = 0.08;  // lesion area / canvas area
  std::string scanner = "synthA";
  stain::StainMatrix stains = stain::reference_matrix();
  std::uint64_t seed = 0;

  void validate() const;
};

void to_json(nlohmann::json& j, const SlideSpec& s);
void from_json(const nlohmann::json& j, SlideSpec& s);

// Places sections in a row and non-overlapping lesion discs inside them with
// a total area of target_fraction of the canvas. Throws ConfigError when the
// lesions cannot be placed.
Scene layout(const SlideSpec& spec);

// RGB at `scale` pixels per canvas pixel; the pixel noise is a hash of the
// seed and the pixel position, so any region renders identically alone.
Image render(const Scene& scene, double scale);
Mask lesion_mask(const Scene& scene);
Mask section_mask(const Scene& scene);

// Stain vectors of the index-th simulated scanner: the reference matrix for
// index 0, then each vector tilted further towards the other one.
stain::StainMatrix scanner_stains(std::size_t index);

struct SynthSlide {
  wsi::WsiPyramid pyramid;
  wsi::GroundTruth truth;
  Scene scene;
};

SynthSlide generate_slide(const SlideSpec& spec, const std::string& id = "slide");
// meta.json, level PNGs, gt.png (0/255) and roi.png in `dir`.
void write_slide(const std::filesystem::path& dir, const SynthSlide& slide);

// A fully tissue-covered patch holding one lesion disc with probability
// lesion_prob; returns the RGB patch and its 0/1 mask.
std::pair<Image, Mask> make_patch(std::size_t size, Rng& rng, double lesion_prob = 0.75,
                                  const stain::StainMatrix& stains = stain::reference_matrix());

}  // namespace dysp::synth
