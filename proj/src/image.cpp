#include "nstaug/image.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstring>
#include <fstream>
#include <string>

namespace nstaug {

Image::Image(std::size_t height, std::size_t width, double fill)
    : height_(height), width_(width), pixels_(height * width, fill) {}

Image::Image(std::size_t height, std::size_t width, std::vector<double> pixels)
    : height_(height), width_(width), pixels_(std::move(pixels)) {
  if (pixels_.size() != height_ * width_) {
    throw ShapeError("image: " + std::to_string(pixels_.size()) + " pixels for " + std::to_string(height_) +
                     "x" + std::to_string(width_));
  }
}

Image Image::from_tensor(const Tensor& t) {
  if (t.rank() != 3 || t.channels() != 1) {
    throw ShapeError("image: expected (1,H,W) tensor, got " + shape_str(t.shape()));
  }
  std::vector<double> px(t.values());
  for (double& v : px) v = std::clamp(v, 0.0, 1.0);
  return Image(t.height(), t.width(), std::move(px));
}

void Image::validate() const {
  if (height_ < kMinImageSide || width_ < kMinImageSide) {
    throw ShapeError("image: " + std::to_string(height_) + "x" + std::to_string(width_) +
                     " is below the 8x8 minimum");
  }
  for (double v : pixels_) {
    if (!(v >= 0.0 && v <= 1.0)) throw ShapeError("image: pixel value " + std::to_string(v) + " outside [0,1]");
  }
}

namespace {

// Reads the next header token, skipping whitespace and '#' comments.
std::string next_token(std::istream& in) {
  std::string tok;
  int ch;
  while ((ch = in.get()) != EOF) {
    if (ch == '#') {
      while ((ch = in.get()) != EOF && ch != '\n') {
      }
      continue;
    }
    if (std::isspace(ch)) {
      if (!tok.empty()) break;
      continue;
    }
    tok.push_back(static_cast<char>(ch));
  }
  return tok;
}

struct NetpbmHeader {
  std::size_t width = 0, height = 0, maxval = 0;
};

NetpbmHeader read_header(std::istream& in, const std::string& magic, const std::filesystem::path& path) {
  if (next_token(in) != magic) throw IoError(path.string() + ": not a " + magic + " file");
  NetpbmHeader h;
  try {
    h.width = std::stoul(next_token(in));
    h.height = std::stoul(next_token(in));
    h.maxval = std::stoul(next_token(in));
  } catch (const std::exception&) {
    throw IoError(path.string() + ": malformed header");
  }
  if (h.maxval == 0 || h.maxval > 255) throw IoError(path.string() + ": only 8-bit maxval is supported");
  return h;
}

}  // namespace

Image read_pgm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  const NetpbmHeader h = read_header(in, "P5", path);
  std::vector<unsigned char> raw(h.width * h.height);
  in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (in.gcount() != static_cast<std::streamsize>(raw.size())) throw IoError(path.string() + ": truncated data");
  std::vector<double> px(raw.size());
  const double scale = 1.0 / static_cast<double>(h.maxval);
  for (std::size_t i = 0; i < raw.size(); ++i) px[i] = std::min(1.0, raw[i] * scale);
  return Image(h.height, h.width, std::move(px));
}

void write_pgm(const Image& image, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << "P5\n" << image.width() << ' ' << image.height() << "\n255\n";
  std::vector<unsigned char> raw(image.size());
  for (std::size_t i = 0; i < raw.size(); ++i) {
    raw[i] = static_cast<unsigned char>(std::lround(std::clamp(image.pixels()[i], 0.0, 1.0) * 255.0));
  }
  out.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (!out) throw IoError("write failed: " + path.string());
}

void write_ppm(std::size_t height, std::size_t width, const std::vector<Rgb>& pixels,
               const std::filesystem::path& path) {
  if (pixels.size() != height * width) throw ShapeError("ppm: pixel count does not match extents");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << "P6\n" << width << ' ' << height << "\n255\n";
  for (const Rgb& p : pixels) {
    const char bytes[3] = {static_cast<char>(p.r), static_cast<char>(p.g), static_cast<char>(p.b)};
    out.write(bytes, 3);
  }
  if (!out) throw IoError("write failed: " + path.string());
}

std::vector<Rgb> read_ppm(const std::filesystem::path& path, std::size_t& height, std::size_t& width) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  const NetpbmHeader h = read_header(in, "P6", path);
  std::vector<unsigned char> raw(h.width * h.height * 3);
  in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (in.gcount() != static_cast<std::streamsize>(raw.size())) throw IoError(path.string() + ": truncated data");
  height = h.height;
  width = h.width;
  std::vector<Rgb> px(h.width * h.height);
  for (std::size_t i = 0; i < px.size(); ++i) px[i] = {raw[3 * i], raw[3 * i + 1], raw[3 * i + 2]};
  return px;
}

std::uint64_t checksum(std::span<const double> values) {
  std::uint64_t hash = 1469598103934665603ULL;
  for (double v : values) {
    unsigned char bytes[sizeof(double)];
    std::memcpy(bytes, &v, sizeof(double));
    for (unsigned char b : bytes) {
      hash ^= b;
      hash *= 1099511628211ULL;
    }
  }
  return hash;
}

}  // namespace nstaug
