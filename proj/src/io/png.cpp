#include "fabric/io/png.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>
#include <stdexcept>
#include <string>

namespace fabric::io {

namespace {

std::uint8_t to_byte(float v) {
    const float c = std::clamp(v, -1.0f, 1.0f);
    return static_cast<std::uint8_t>(std::lround((c + 1.0f) * 127.5f));
}

float from_byte(std::uint8_t q) { return static_cast<float>(q) / 127.5f - 1.0f; }

void check_image(const Tensor& image) {
    if (image.shape().size() != 3 || image.dim(0) != 3) {
        throw ShapeError("expected a [3, H, W] image, got " + shape_str(image.shape()));
    }
}

}  // namespace

Tensor quantize(const Tensor& image) {
    Tensor out(image.shape());
    for (std::size_t i = 0; i < image.size(); ++i) out[i] = from_byte(to_byte(image[i]));
    return out;
}

std::vector<std::uint8_t> encode_png(const Tensor& image) {
    check_image(image);
    const int h = image.dim(1), w = image.dim(2);
    const std::size_t hw = static_cast<std::size_t>(h) * w;
    std::vector<std::uint8_t> rgb(hw * 3);
    for (std::size_t p = 0; p < hw; ++p) {
        for (std::size_t c = 0; c < 3; ++c) rgb[p * 3 + c] = to_byte(image[c * hw + p]);
    }
    png_image img{};
    img.version = PNG_IMAGE_VERSION;
    img.width = static_cast<png_uint_32>(w);
    img.height = static_cast<png_uint_32>(h);
    img.format = PNG_FORMAT_RGB;
    png_alloc_size_t size = 0;
    if (!png_image_write_to_memory(&img, nullptr, &size, 0, rgb.data(), 0, nullptr)) {
        throw std::runtime_error(std::string("png encode failed: ") + img.message);
    }
    std::vector<std::uint8_t> out(size);
    if (!png_image_write_to_memory(&img, out.data(), &size, 0, rgb.data(), 0, nullptr)) {
        throw std::runtime_error(std::string("png encode failed: ") + img.message);
    }
    out.resize(size);
    return out;
}

Tensor decode_png(const std::vector<std::uint8_t>& bytes) {
    png_image img{};
    img.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_memory(&img, bytes.data(), bytes.size())) {
        throw std::runtime_error(std::string("png decode failed: ") + img.message);
    }
    img.format = PNG_FORMAT_RGB;
    const std::size_t h = img.height, w = img.width, hw = h * w;
    std::vector<std::uint8_t> rgb(PNG_IMAGE_SIZE(img));
    if (!png_image_finish_read(&img, nullptr, rgb.data(), 0, nullptr)) {
        throw std::runtime_error(std::string("png decode failed: ") + img.message);
    }
    Tensor out({3, static_cast<int>(h), static_cast<int>(w)});
    for (std::size_t p = 0; p < hw; ++p) {
        for (std::size_t c = 0; c < 3; ++c) out[c * hw + p] = from_byte(rgb[p * 3 + c]);
    }
    return out;
}

void write_png(const std::filesystem::path& path, const Tensor& image) {
    const auto bytes = encode_png(image);
    write_file_atomic(path, bytes.data(), bytes.size());
}

Tensor read_png(const std::filesystem::path& path) { return decode_png(read_file(path)); }

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file_atomic(const std::filesystem::path& path, const void* data, std::size_t size) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw std::runtime_error("cannot write " + tmp.string());
        out.write(static_cast<const char*>(data), static_cast<std::streamsize>(size));
        if (!out) throw std::runtime_error("write failed for " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

}  // namespace fabric::io
