#include "msod/datakit.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

namespace msod::data {

namespace fs = std::filesystem;

namespace {

struct Placed {
  std::vector<int> pixels;  // flat indices into the canvas
};

// Rasterizes one shape centred at (cx,cy); returns flat pixel indices.
std::vector<int> rasterize_shape(int kind, int cx, int cy, double r, double angle, int canvas) {
  std::vector<int> px;
  const int lo_y = std::max(0, static_cast<int>(std::floor(cy - r - 2)));
  const int hi_y = std::min(canvas - 1, static_cast<int>(std::ceil(cy + r + 2)));
  const int lo_x = std::max(0, static_cast<int>(std::floor(cx - r - 2)));
  const int hi_x = std::min(canvas - 1, static_cast<int>(std::ceil(cx + r + 2)));
  if (kind == 0) {  // disc
    for (int y = lo_y; y <= hi_y; ++y)
      for (int x = lo_x; x <= hi_x; ++x) {
        const double dx = x - cx, dy = y - cy;
        if (dx * dx + dy * dy <= r * r) px.push_back(y * canvas + x);
      }
  } else if (kind == 1) {  // rectangle, axis aligned, aspect from angle
    const double a = r, b = std::max(2.0, r * (0.6 + 0.4 * std::fabs(std::sin(angle))));
    for (int y = lo_y; y <= hi_y; ++y)
      for (int x = lo_x; x <= hi_x; ++x)
        if (std::fabs(x - cx) <= a && std::fabs(y - cy) <= b) px.push_back(y * canvas + x);
  } else {  // triangle: three vertices on a circle of radius r
    double vx[3], vy[3];
    for (int i = 0; i < 3; ++i) {
      const double th = angle + i * 2.0 * 3.14159265358979323846 / 3.0;
      vx[i] = cx + r * std::cos(th);
      vy[i] = cy + r * std::sin(th);
    }
    auto edge = [&](int i, int j, double x, double y) {
      return (vx[j] - vx[i]) * (y - vy[i]) - (vy[j] - vy[i]) * (x - vx[i]);
    };
    const double orient = edge(0, 1, vx[2], vy[2]) >= 0 ? 1.0 : -1.0;
    for (int y = lo_y; y <= hi_y; ++y)
      for (int x = lo_x; x <= hi_x; ++x)
        if (orient * edge(0, 1, x, y) >= 0 && orient * edge(1, 2, x, y) >= 0 &&
            orient * edge(2, 0, x, y) >= 0)
          px.push_back(y * canvas + x);
  }
  return px;
}

// True when every pixel keeps a Chebyshev distance >= 2 from occupied cells.
bool placement_clear(const std::vector<int>& px, const std::vector<std::uint8_t>& occupied, int canvas) {
  for (int idx : px) {
    const int y = idx / canvas, x = idx % canvas;
    for (int dy = -2; dy <= 2; ++dy)
      for (int dx = -2; dx <= 2; ++dx) {
        const int yy = y + dy, xx = x + dx;
        if (yy < 0 || yy >= canvas || xx < 0 || xx >= canvas) continue;
        if (occupied[yy * canvas + xx]) return false;
      }
  }
  return true;
}

std::uint8_t clamp_byte(double v) {
  return static_cast<std::uint8_t>(v < 0 ? 0 : (v > 255 ? 255 : v));
}

}  // namespace

Scene synth_scene(const SceneSpec& spec, std::uint64_t seed) {
  if (spec.object_count < 0 || spec.canvas < 8)
    throw std::invalid_argument("synth_scene: bad spec (canvas >= 8, object_count >= 0)");
  Rng rng(seed);
  const int n = spec.canvas;
  Scene scene;
  scene.mask = make_gray(n, n, 0);
  scene.image = make_rgb(n, n);

  // textured background: two-tone diagonal waves plus per-pixel noise
  const double base[3] = {rng.uniform(40, 110), rng.uniform(40, 110), rng.uniform(40, 110)};
  const double fx = rng.uniform(1.0, 3.0), fy = rng.uniform(1.0, 3.0), phase = rng.uniform(0, 6.28);
  for (int y = 0; y < n; ++y)
    for (int x = 0; x < n; ++x) {
      const double wave = 18.0 * std::sin(2.0 * 3.141592653589793 * (fx * x + fy * y) / n + phase);
      for (int c = 0; c < 3; ++c) {
        const double noise = rng.uniform(-10.0, 10.0);
        scene.image.pixels[(static_cast<std::size_t>(y) * n + x) * 3 + c] =
            clamp_byte(base[c] + wave + noise);
      }
    }

  // objects share a scene-level color family, far from the background tone
  double obj_color[3];
  for (int c = 0; c < 3; ++c) {
    obj_color[c] = base[c] + (rng.chance(0.5) ? 1.0 : -1.0) * rng.uniform(90, 140);
    obj_color[c] = std::min(245.0, std::max(10.0, obj_color[c]));
  }

  std::vector<std::uint8_t> occupied(static_cast<std::size_t>(n) * n, 0);
  const int min_area = 10;
  for (int obj = 0; obj < spec.object_count; ++obj) {
    bool placed = false;
    for (int attempt = 0; attempt < spec.max_place_attempts; ++attempt) {
      const int kind = rng.uniform_int(0, 2);
      const double r = rng.uniform(spec.min_radius, spec.max_radius);
      const int margin = static_cast<int>(std::ceil(r)) + 3;
      if (2 * margin >= n) continue;
      const int cx = rng.uniform_int(margin, n - 1 - margin);
      const int cy = rng.uniform_int(margin, n - 1 - margin);
      const double angle = rng.uniform(0, 6.28);
      auto px = rasterize_shape(kind, cx, cy, r, angle, n);
      if (static_cast<int>(px.size()) < min_area) continue;
      if (!placement_clear(px, occupied, n)) continue;
      for (int idx : px) {
        occupied[idx] = 1;
        scene.mask.pixels[idx] = 255;
        for (int c = 0; c < 3; ++c)
          scene.image.pixels[static_cast<std::size_t>(idx) * 3 + c] =
              clamp_byte(obj_color[c] + rng.uniform(-12.0, 12.0));
      }
      placed = true;
      break;
    }
    if (!placed)
      throw std::runtime_error("synth_scene: could not place object " + std::to_string(obj + 1) +
                               " of " + std::to_string(spec.object_count) + " after " +
                               std::to_string(spec.max_place_attempts) + " attempts");
  }
  return scene;
}

GrayImage sobel_edges(const GrayImage& mask) {
  const int h = mask.height, w = mask.width;
  GrayImage edges = make_gray(w, h, 0);
  // interior only; the output border stays zero
  for (int y = 1; y + 1 < h; ++y)
    for (int x = 1; x + 1 < w; ++x) {
      auto m = [&](int yy, int xx) { return mask.at(yy, xx) >= 128 ? 1 : 0; };
      const int gx = -m(y - 1, x - 1) + m(y - 1, x + 1) - 2 * m(y, x - 1) + 2 * m(y, x + 1) -
                     m(y + 1, x - 1) + m(y + 1, x + 1);
      const int gy = -m(y - 1, x - 1) - 2 * m(y - 1, x) - m(y - 1, x + 1) + m(y + 1, x - 1) +
                     2 * m(y + 1, x) + m(y + 1, x + 1);
      if (gx != 0 || gy != 0) edges.at(y, x) = 255;
    }
  return edges;
}

ComponentMap count_components(const GrayImage& mask, int connectivity, int min_area) {
  if (connectivity != 4 && connectivity != 8)
    throw std::invalid_argument("count_components: connectivity must be 4 or 8");
  const int h = mask.height, w = mask.width;
  ComponentMap cm;
  cm.labels.assign(static_cast<std::size_t>(h) * w, 0);
  cm.areas.push_back(0);
  cm.noise.push_back(false);

  static const int dx8[] = {-1, 0, 1, -1, 1, -1, 0, 1};
  static const int dy8[] = {-1, -1, -1, 0, 0, 1, 1, 1};
  static const int dx4[] = {0, -1, 1, 0};
  static const int dy4[] = {-1, 0, 0, 1};
  const int* dx = connectivity == 8 ? dx8 : dx4;
  const int* dy = connectivity == 8 ? dy8 : dy4;
  const int nn = connectivity;

  int next_label = 0;
  std::deque<int> queue;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const int start = y * w + x;
      if (mask.pixels[start] < 128 || cm.labels[start] != 0) continue;
      ++next_label;
      int area = 0;
      cm.labels[start] = next_label;
      queue.push_back(start);
      while (!queue.empty()) {
        const int cur = queue.front();
        queue.pop_front();
        ++area;
        const int cy = cur / w, cx = cur % w;
        for (int k = 0; k < nn; ++k) {
          const int yy = cy + dy[k], xx = cx + dx[k];
          if (yy < 0 || yy >= h || xx < 0 || xx >= w) continue;
          const int idx = yy * w + xx;
          if (mask.pixels[idx] >= 128 && cm.labels[idx] == 0) {
            cm.labels[idx] = next_label;
            queue.push_back(idx);
          }
        }
      }
      cm.areas.push_back(area);
      cm.noise.push_back(area < min_area);
      if (area >= min_area) ++cm.count;
    }
  return cm;
}

std::string DatasetIndex::resolve_image(std::size_t i) const {
  return (fs::path(base_dir) / records[i].image_path).string();
}
std::string DatasetIndex::resolve_mask(std::size_t i) const {
  return (fs::path(base_dir) / records[i].mask_path).string();
}
std::string DatasetIndex::resolve_edge(std::size_t i) const {
  return (fs::path(base_dir) / records[i].edge_path).string();
}

DatasetIndex load_index(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error(path + ": cannot open index");
  DatasetIndex index;
  index.base_dir = fs::path(path).parent_path().string();
  if (index.base_dir.empty()) index.base_dir = ".";
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    IndexRecord rec;
    std::istringstream ss(line);
    std::string count_field;
    if (!std::getline(ss, rec.image_path, '\t') || !std::getline(ss, rec.mask_path, '\t') ||
        !std::getline(ss, rec.edge_path, '\t') || !std::getline(ss, count_field))
      throw std::runtime_error(path + ":" + std::to_string(lineno) +
                               ": expected image<TAB>mask<TAB>edge<TAB>count");
    try {
      rec.object_count = std::stoi(count_field);
    } catch (const std::exception&) {
      throw std::runtime_error(path + ":" + std::to_string(lineno) + ": bad count field \"" +
                               count_field + "\"");
    }
    if (rec.object_count < 0)
      throw std::runtime_error(path + ":" + std::to_string(lineno) + ": count must be >= 0");
    index.records.push_back(std::move(rec));
  }
  for (std::size_t i = 0; i < index.records.size(); ++i)
    for (const std::string& p :
         {index.resolve_image(i), index.resolve_mask(i), index.resolve_edge(i)})
      if (!fs::exists(p))
        throw std::runtime_error(path + ": referenced file missing: " + p);
  return index;
}

void save_index(const std::string& path, const DatasetIndex& index) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error(path + ": cannot open for writing");
  for (const IndexRecord& rec : index.records)
    out << rec.image_path << '\t' << rec.mask_path << '\t' << rec.edge_path << '\t'
        << rec.object_count << '\n';
  if (!out) throw std::runtime_error(path + ": write failed");
}

CurateResult curate(const DatasetIndex& index, int min_objects, int connectivity, int min_area) {
  CurateResult result;
  result.retained.base_dir = index.base_dir;
  std::map<int, int> hist;
  for (std::size_t i = 0; i < index.records.size(); ++i) {
    GrayImage mask;
    try {
      mask = read_pgm(index.resolve_mask(i));
    } catch (const std::exception& e) {
      result.skipped.push_back(std::string(e.what()));
      continue;
    }
    const ComponentMap cm = count_components(mask, connectivity, min_area);
    if (cm.count >= min_objects) {
      IndexRecord rec = index.records[i];
      rec.object_count = cm.count;
      result.retained.records.push_back(std::move(rec));
      ++hist[cm.count];
    }
  }
  result.histogram.assign(hist.begin(), hist.end());
  return result;
}

void save_histogram(const std::string& path, const std::vector<std::pair<int, int>>& histogram) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error(path + ": cannot open for writing");
  for (const auto& [count, freq] : histogram) out << count << '\t' << freq << '\n';
  if (!out) throw std::runtime_error(path + ": write failed");
}

}  // namespace msod::data
