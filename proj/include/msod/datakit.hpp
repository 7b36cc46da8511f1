#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "msod/image.hpp"
#include "msod/rng.hpp"

namespace msod::data {

struct SceneSpec {
  int canvas = 64;
  int object_count = 3;
  int min_radius = 3;
  int max_radius = 7;
  int max_place_attempts = 1000;
};

struct Scene {
  RgbImage image;
  GrayImage mask;  // 0 background, 255 foreground
};

// Deterministic multi-object scene: convex shapes (disc/rectangle/triangle)
// sharing a per-scene base color over a textured background. Objects are
// non-overlapping with a 2px separation halo so their count matches the
// connected-component count.
Scene synth_scene(const SceneSpec& spec, std::uint64_t seed);

// Gradient-magnitude edges of a binary mask from the 3x3 Sobel pair; a pixel
// is an edge iff the magnitude is nonzero. The one-pixel output border is
// left zero (the operator is applied where the window fits).
GrayImage sobel_edges(const GrayImage& mask);

struct ComponentMap {
  int count = 0;                  // components with area >= min_area
  std::vector<int> labels;        // 0 = background, 1..n = component id
  std::vector<int> areas;         // per label, index 0 unused
  std::vector<bool> noise;        // per label: true when area < min_area
};

ComponentMap count_components(const GrayImage& mask, int connectivity = 8, int min_area = 10);

struct IndexRecord {
  std::string image_path;  // relative to the index file
  std::string mask_path;
  std::string edge_path;
  int object_count = 0;
};

struct DatasetIndex {
  std::string base_dir;  // directory the relative paths resolve against
  std::vector<IndexRecord> records;

  std::string resolve_image(std::size_t i) const;
  std::string resolve_mask(std::size_t i) const;
  std::string resolve_edge(std::size_t i) const;
};

// Plain-text lines: image<TAB>mask<TAB>edge<TAB>count, LF endings.
// Loading verifies every referenced file exists.
DatasetIndex load_index(const std::string& path);
void save_index(const std::string& path, const DatasetIndex& index);

struct CurateResult {
  DatasetIndex retained;
  std::vector<std::pair<int, int>> histogram;  // (object_count, frequency) of retained records
  std::vector<std::string> skipped;            // unreadable masks
};

// Keeps records whose recounted component count is >= min_objects.
CurateResult curate(const DatasetIndex& index, int min_objects = 3, int connectivity = 8,
                    int min_area = 10);

void save_histogram(const std::string& path, const std::vector<std::pair<int, int>>& histogram);

}  // namespace msod::data
