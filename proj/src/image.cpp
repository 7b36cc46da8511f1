#include "msod/image.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>

namespace msod::data {

namespace {

std::vector<char> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ImageError(path + ": cannot open");
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return bytes;
}

struct HeaderParser {
  const std::vector<char>& bytes;
  const std::string& path;
  std::size_t pos = 0;

  [[noreturn]] void fail(const std::string& what) const {
    throw ImageError(path + ": parse error at byte " + std::to_string(pos) + ": " + what);
  }

  void skip_space_and_comments() {
    while (pos < bytes.size()) {
      const char c = bytes[pos];
      if (c == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (c == ' ' || c == '\t' || c == '\r' || c == '\n') {
        ++pos;
      } else {
        break;
      }
    }
  }

  int parse_int(const char* what) {
    skip_space_and_comments();
    if (pos >= bytes.size()) fail(std::string("unexpected end of file reading ") + what);
    if (bytes[pos] < '0' || bytes[pos] > '9') fail(std::string("expected digit for ") + what);
    long v = 0;
    while (pos < bytes.size() && bytes[pos] >= '0' && bytes[pos] <= '9') {
      v = v * 10 + (bytes[pos] - '0');
      if (v > 1 << 20) fail(std::string(what) + " out of range");
      ++pos;
    }
    return static_cast<int>(v);
  }
};

// Shared parse for P5/P6; returns payload offset and dimensions.
std::size_t parse_netpbm_header(const std::vector<char>& bytes, const std::string& path,
                                const char* magic, int& width, int& height) {
  HeaderParser p{bytes, path};
  if (bytes.size() < 2 || bytes[0] != magic[0] || bytes[1] != magic[1]) {
    p.pos = 0;
    p.fail(std::string("expected magic \"") + magic + "\"");
  }
  p.pos = 2;
  width = p.parse_int("width");
  height = p.parse_int("height");
  const int maxval = p.parse_int("maxval");
  if (maxval != 255) p.fail("maxval must be 255, got " + std::to_string(maxval));
  if (p.pos >= bytes.size()) p.fail("missing payload");
  const char sep = bytes[p.pos];
  if (sep != '\n' && sep != ' ' && sep != '\t' && sep != '\r') p.fail("expected whitespace before payload");
  ++p.pos;
  if (width < 1 || height < 1) p.fail("dimensions must be positive");
  return p.pos;
}

void check_payload(const std::vector<char>& bytes, std::size_t offset, std::size_t expected,
                   const std::string& path) {
  const std::size_t actual = bytes.size() - offset;
  if (actual != expected)
    throw ImageError(path + ": parse error at byte " + std::to_string(offset) + ": payload has " +
                     std::to_string(actual) + " bytes, expected " + std::to_string(expected));
}

}  // namespace

GrayImage make_gray(int width, int height, std::uint8_t fill) {
  GrayImage img;
  img.width = width;
  img.height = height;
  img.pixels.assign(static_cast<std::size_t>(width) * height, fill);
  return img;
}

RgbImage make_rgb(int width, int height) {
  RgbImage img;
  img.width = width;
  img.height = height;
  img.pixels.assign(static_cast<std::size_t>(width) * height * 3, 0);
  return img;
}

GrayImage read_pgm(const std::string& path) {
  auto bytes = read_file(path);
  GrayImage img;
  const std::size_t off = parse_netpbm_header(bytes, path, "P5", img.width, img.height);
  check_payload(bytes, off, static_cast<std::size_t>(img.width) * img.height, path);
  img.pixels.assign(bytes.begin() + off, bytes.end());
  return img;
}

void write_pgm(const std::string& path, const GrayImage& img) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ImageError(path + ": cannot open for writing");
  out << "P5\n" << img.width << " " << img.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
  if (!out) throw ImageError(path + ": write failed");
}

RgbImage read_ppm(const std::string& path) {
  auto bytes = read_file(path);
  RgbImage img;
  const std::size_t off = parse_netpbm_header(bytes, path, "P6", img.width, img.height);
  check_payload(bytes, off, static_cast<std::size_t>(img.width) * img.height * 3, path);
  img.pixels.assign(bytes.begin() + off, bytes.end());
  return img;
}

void write_ppm(const std::string& path, const RgbImage& img) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ImageError(path + ": cannot open for writing");
  out << "P6\n" << img.width << " " << img.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
  if (!out) throw ImageError(path + ": write failed");
}

std::vector<double> to_unit(const GrayImage& img) {
  std::vector<double> v(img.pixels.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = img.pixels[i] / 255.0;
  return v;
}

GrayImage from_unit(const std::vector<double>& values, int width, int height) {
  GrayImage img = make_gray(width, height);
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double q = std::floor(values[i] * 255.0 + 0.5);
    img.pixels[i] = static_cast<std::uint8_t>(q < 0.0 ? 0.0 : (q > 255.0 ? 255.0 : q));
  }
  return img;
}

Tensor gray_to_tensor(const GrayImage& img) {
  return Tensor::from({1, img.height, img.width}, to_unit(img));
}

Tensor gray_to_mask_tensor(const GrayImage& img) {
  std::vector<double> v(img.pixels.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = img.pixels[i] >= 128 ? 1.0 : 0.0;
  return Tensor::from({1, img.height, img.width}, std::move(v));
}

Tensor rgb_to_tensor(const RgbImage& img) {
  const std::size_t hw = static_cast<std::size_t>(img.width) * img.height;
  std::vector<double> v(hw * 3);
  for (std::size_t i = 0; i < hw; ++i)
    for (int c = 0; c < 3; ++c) v[c * hw + i] = img.pixels[i * 3 + c] / 255.0;
  return Tensor::from({3, img.height, img.width}, std::move(v));
}

GrayImage tensor_to_gray(const Tensor& t) {
  int h = 0, w = 0;
  if (t.rank() == 3 && t.extent(0) == 1) {
    h = t.extent(1);
    w = t.extent(2);
  } else if (t.rank() == 2) {
    h = t.extent(0);
    w = t.extent(1);
  } else {
    throw ImageError("tensor_to_gray: expected [1,H,W] or [H,W], got " + shape_str(t.shape()));
  }
  return from_unit(t.data(), w, h);
}

}  // namespace msod::data
