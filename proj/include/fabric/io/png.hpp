#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "fabric/tensor.hpp"

namespace fabric::io {

/// Clamps an image to [-1, 1] and snaps it to the 8-bit grid used by PNG
/// storage, so that decode(encode(quantize(x))) == quantize(x) bitwise.
Tensor quantize(const Tensor& image);

/// [3, H, W] image in [-1, 1] to 8-bit RGB PNG bytes.
std::vector<std::uint8_t> encode_png(const Tensor& image);
/// PNG bytes to a [3, H, W] image in [-1, 1].
Tensor decode_png(const std::vector<std::uint8_t>& bytes);

void write_png(const std::filesystem::path& path, const Tensor& image);
Tensor read_png(const std::filesystem::path& path);

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
/// Writes via a temporary file and rename.
void write_file_atomic(const std::filesystem::path& path, const void* data, std::size_t size);

}  // namespace fabric::io
