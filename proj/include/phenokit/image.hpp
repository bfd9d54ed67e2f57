#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace phenokit {

// Single-channel image, 8 or 16 bit. Pixels are stored widened to u16.
struct GrayImage {
    int width = 0;
    int height = 0;
    int bit_depth = 8;  // 8 or 16
    std::vector<std::uint16_t> pixels;

    std::uint16_t max_value() const { return bit_depth == 8 ? 255 : 65535; }
};

// Minimal grayscale PNG codec (color type 0 only). DEFLATE via zlib.
GrayImage png_read_gray(const std::string& path);
void png_write_gray(const std::string& path, const GrayImage& img);

// Bilinear resample of a normalized plane, half-pixel centers, edge clamped.
std::vector<float> resize_bilinear(const std::vector<float>& src, int src_w, int src_h,
                                   int dst_w, int dst_h);

}  // namespace phenokit
