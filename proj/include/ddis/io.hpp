#pragma once

#include <string>

#include "ddis/tensor.hpp"

namespace ddis {

/// Binary graymap (P5). Values in [-1, 1] map linearly onto 0..255, clipped.
void write_pgm(const std::string& path, const Tensor& image);
/// Tiles [n, 1, H, W] into rows of `columns`, one pixel of gutter at -1.
void write_pgm_grid(const std::string& path, const Tensor& images, std::int64_t columns = 8);
/// Inverse map of write_pgm; returns [H, W].
Tensor read_pgm(const std::string& path);

/// Raw dump: "DDISRAW1", u8 ndim, i64 dims, little-endian f64 data.
void write_raw(const std::string& path, const Tensor& t);
Tensor read_raw(const std::string& path);

void write_text(const std::string& path, const std::string& text);
std::string read_text(const std::string& path);
std::string file_sha256(const std::string& path);
void ensure_dir(const std::string& path);

}  // namespace ddis
