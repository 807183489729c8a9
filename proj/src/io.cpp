#include "ddis/io.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "ddis/hash.hpp"

namespace ddis {

namespace {

std::ofstream open_out(const std::string& path) {
  const auto parent = std::filesystem::path(path).parent_path();
  if (!parent.empty()) std::filesystem::create_directories(parent);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw Error("cannot write '" + path + "'");
  return f;
}

unsigned char to_byte(double v) {
  const double x = std::round((std::clamp(v, -1.0, 1.0) + 1.0) * 127.5);
  return static_cast<unsigned char>(x);
}

}  // namespace

void write_pgm(const std::string& path, const Tensor& image) {
  std::int64_t h = 0, w = 0;
  if (image.ndim() == 2) {
    h = image.dim(0), w = image.dim(1);
  } else if (image.ndim() == 3 && image.dim(0) == 1) {
    h = image.dim(1), w = image.dim(2);
  } else if (image.ndim() == 4 && image.dim(0) == 1 && image.dim(1) == 1) {
    h = image.dim(2), w = image.dim(3);
  } else {
    throw ShapeError("write_pgm: expected a single-channel image, got " + to_string(image.shape()));
  }
  auto f = open_out(path);
  f << "P5\n" << w << ' ' << h << "\n255\n";
  std::string bytes(static_cast<std::size_t>(h * w), '\0');
  for (std::int64_t i = 0; i < h * w; ++i) bytes[static_cast<std::size_t>(i)] = static_cast<char>(to_byte(image[i]));
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

void write_pgm_grid(const std::string& path, const Tensor& images, std::int64_t columns) {
  if (images.ndim() != 4 || images.dim(1) != 1)
    throw ShapeError("write_pgm_grid: expected [n,1,H,W], got " + to_string(images.shape()));
  if (columns < 1) throw Error("write_pgm_grid: columns must be positive");
  const auto n = images.dim(0), h = images.dim(2), w = images.dim(3);
  const auto cols = std::min(columns, std::max<std::int64_t>(n, 1));
  const auto rows = (n + cols - 1) / cols;
  const auto H = rows * (h + 1) + 1, W = cols * (w + 1) + 1;
  Tensor grid({H, W}, -1.0);
  for (std::int64_t k = 0; k < n; ++k) {
    const auto r0 = (k / cols) * (h + 1) + 1, c0 = (k % cols) * (w + 1) + 1;
    for (std::int64_t y = 0; y < h; ++y)
      for (std::int64_t x = 0; x < w; ++x) grid.data()[(r0 + y) * W + c0 + x] = images[(k * h + y) * w + x];
  }
  write_pgm(path, grid);
}

Tensor read_pgm(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error("cannot open '" + path + "'");
  std::string magic;
  std::int64_t w = 0, h = 0;
  int maxval = 0;
  f >> magic >> w >> h >> maxval;
  if (magic != "P5" || w <= 0 || h <= 0 || maxval != 255) throw Error("'" + path + "' is not an 8-bit P5 graymap");
  f.get();
  std::string bytes(static_cast<std::size_t>(w * h), '\0');
  f.read(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw Error("'" + path + "': truncated pixel data");
  Tensor out({h, w});
  for (std::size_t i = 0; i < bytes.size(); ++i)
    out.data()[i] = static_cast<unsigned char>(bytes[i]) / 127.5 - 1.0;
  return out;
}

void write_raw(const std::string& path, const Tensor& t) {
  auto f = open_out(path);
  f.write("DDISRAW1", 8);
  const auto nd = static_cast<std::uint8_t>(t.ndim());
  f.write(reinterpret_cast<const char*>(&nd), 1);
  for (auto d : t.shape()) {
    const std::int64_t v = d;
    f.write(reinterpret_cast<const char*>(&v), sizeof v);
  }
  f.write(reinterpret_cast<const char*>(t.data().data()), static_cast<std::streamsize>(t.data().size() * sizeof(double)));
}

Tensor read_raw(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error("cannot open '" + path + "'");
  char magic[8];
  f.read(magic, 8);
  if (!f || std::memcmp(magic, "DDISRAW1", 8) != 0) throw Error("'" + path + "' is not a raw tensor dump");
  std::uint8_t nd = 0;
  f.read(reinterpret_cast<char*>(&nd), 1);
  Shape shape(nd);
  for (auto& d : shape) f.read(reinterpret_cast<char*>(&d), sizeof d);
  if (!f) throw Error("'" + path + "': truncated header");
  std::vector<double> data(static_cast<std::size_t>(numel(shape)));
  f.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(data.size() * sizeof(double)));
  if (!f) throw Error("'" + path + "': truncated data");
  return Tensor(shape, std::move(data));
}

void write_text(const std::string& path, const std::string& text) {
  auto f = open_out(path);
  f << text;
}

std::string read_text(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error("cannot open '" + path + "'");
  std::ostringstream os;
  os << f.rdbuf();
  return os.str();
}

std::string file_sha256(const std::string& path) { return sha256_hex(std::string_view(read_text(path))); }

void ensure_dir(const std::string& path) {
  if (!path.empty()) std::filesystem::create_directories(path);
}

}  // namespace ddis
