#include "phenokit/image.hpp"

#include <zlib.h>

#include <cmath>
#include <cstring>
#include <fstream>

#include "phenokit/common.hpp"

namespace phenokit {

namespace {

void put_u32_be(std::string& out, std::uint32_t v) {
    out.push_back(static_cast<char>(v >> 24));
    out.push_back(static_cast<char>(v >> 16));
    out.push_back(static_cast<char>(v >> 8));
    out.push_back(static_cast<char>(v));
}

std::uint32_t get_u32_be(const unsigned char* p) {
    return (static_cast<std::uint32_t>(p[0]) << 24) | (static_cast<std::uint32_t>(p[1]) << 16) |
           (static_cast<std::uint32_t>(p[2]) << 8) | static_cast<std::uint32_t>(p[3]);
}

void append_chunk(std::string& out, const char type[4], const std::string& data) {
    put_u32_be(out, static_cast<std::uint32_t>(data.size()));
    std::string body(type, 4);
    body += data;
    out += body;
    const auto crc =
        crc32(0L, reinterpret_cast<const Bytef*>(body.data()), static_cast<uInt>(body.size()));
    put_u32_be(out, static_cast<std::uint32_t>(crc));
}

int paeth(int a, int b, int c) {
    const int p = a + b - c;
    const int pa = std::abs(p - a), pb = std::abs(p - b), pc = std::abs(p - c);
    if (pa <= pb && pa <= pc) return a;
    if (pb <= pc) return b;
    return c;
}

}  // namespace

void png_write_gray(const std::string& path, const GrayImage& img) {
    if (img.width <= 0 || img.height <= 0 ||
        static_cast<std::size_t>(img.width) * img.height != img.pixels.size())
        throw InvariantError("png_write_gray: inconsistent image dims");
    if (img.bit_depth != 8 && img.bit_depth != 16)
        throw InputError("png_write_gray: bit depth must be 8 or 16");

    const int bpp = img.bit_depth / 8;
    const std::size_t stride = static_cast<std::size_t>(img.width) * bpp;
    std::string raw;
    raw.reserve((stride + 1) * img.height);
    for (int y = 0; y < img.height; ++y) {
        raw.push_back('\0');  // filter type 0 (none)
        for (int x = 0; x < img.width; ++x) {
            const std::uint16_t v = img.pixels[static_cast<std::size_t>(y) * img.width + x];
            if (bpp == 2) raw.push_back(static_cast<char>(v >> 8));
            raw.push_back(static_cast<char>(v & 0xff));
        }
    }

    uLongf bound = compressBound(static_cast<uLong>(raw.size()));
    std::string compressed(bound, '\0');
    if (compress2(reinterpret_cast<Bytef*>(compressed.data()), &bound,
                  reinterpret_cast<const Bytef*>(raw.data()), static_cast<uLong>(raw.size()),
                  6) != Z_OK)
        throw InvariantError("png_write_gray: deflate failed");
    compressed.resize(bound);

    std::string ihdr;
    put_u32_be(ihdr, static_cast<std::uint32_t>(img.width));
    put_u32_be(ihdr, static_cast<std::uint32_t>(img.height));
    ihdr.push_back(static_cast<char>(img.bit_depth));
    ihdr.push_back('\0');  // color type 0: grayscale
    ihdr.push_back('\0');  // compression
    ihdr.push_back('\0');  // filter method
    ihdr.push_back('\0');  // no interlace

    std::string out("\x89PNG\r\n\x1a\n", 8);
    append_chunk(out, "IHDR", ihdr);
    append_chunk(out, "IDAT", compressed);
    append_chunk(out, "IEND", "");

    std::ofstream f(path, std::ios::binary);
    if (!f) throw InputError("cannot open for write: " + path);
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) throw InputError("write failed: " + path);
}

GrayImage png_read_gray(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw InputError("cannot open: " + path);
    std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
    if (bytes.size() < 8 || std::memcmp(p, "\x89PNG\r\n\x1a\n", 8) != 0)
        throw InputError("not a PNG file: " + path);

    GrayImage img;
    std::string idat;
    bool have_ihdr = false;
    std::size_t off = 8;
    while (off + 8 <= bytes.size()) {
        const std::uint32_t len = get_u32_be(p + off);
        if (off + 12 + len > bytes.size()) throw InputError("truncated PNG: " + path);
        const char* type = bytes.data() + off + 4;
        const unsigned char* data = p + off + 8;
        if (std::memcmp(type, "IHDR", 4) == 0) {
            if (len != 13) throw InputError("bad IHDR: " + path);
            img.width = static_cast<int>(get_u32_be(data));
            img.height = static_cast<int>(get_u32_be(data + 4));
            img.bit_depth = data[8];
            const int color_type = data[9];
            if (color_type != 0)
                throw InputError("non-grayscale PNG (color type " + std::to_string(color_type) +
                                 "): " + path);
            if (img.bit_depth != 8 && img.bit_depth != 16)
                throw InputError("unsupported PNG bit depth " + std::to_string(img.bit_depth) +
                                 ": " + path);
            if (data[12] != 0) throw InputError("interlaced PNG unsupported: " + path);
            have_ihdr = true;
        } else if (std::memcmp(type, "IDAT", 4) == 0) {
            idat.append(reinterpret_cast<const char*>(data), len);
        } else if (std::memcmp(type, "IEND", 4) == 0) {
            break;
        }
        off += 12 + len;
    }
    if (!have_ihdr || img.width <= 0 || img.height <= 0)
        throw InputError("PNG missing IHDR: " + path);

    const int bpp = img.bit_depth / 8;
    const std::size_t stride = static_cast<std::size_t>(img.width) * bpp;
    const std::size_t raw_size = (stride + 1) * img.height;
    std::vector<unsigned char> raw(raw_size);
    uLongf dest_len = static_cast<uLongf>(raw_size);
    if (uncompress(raw.data(), &dest_len, reinterpret_cast<const Bytef*>(idat.data()),
                   static_cast<uLong>(idat.size())) != Z_OK ||
        dest_len != raw_size)
        throw InputError("PNG inflate failed: " + path);

    // undo scanline filters in place
    std::vector<unsigned char> recon(stride * img.height);
    for (int y = 0; y < img.height; ++y) {
        const unsigned char filter = raw[y * (stride + 1)];
        const unsigned char* src = raw.data() + y * (stride + 1) + 1;
        unsigned char* dst = recon.data() + y * stride;
        const unsigned char* up = y > 0 ? recon.data() + (y - 1) * stride : nullptr;
        for (std::size_t i = 0; i < stride; ++i) {
            const int a = i >= static_cast<std::size_t>(bpp) ? dst[i - bpp] : 0;
            const int b = up ? up[i] : 0;
            const int c = (up && i >= static_cast<std::size_t>(bpp)) ? up[i - bpp] : 0;
            int v = src[i];
            switch (filter) {
                case 0: break;
                case 1: v += a; break;
                case 2: v += b; break;
                case 3: v += (a + b) / 2; break;
                case 4: v += paeth(a, b, c); break;
                default: throw InputError("bad PNG filter type: " + path);
            }
            dst[i] = static_cast<unsigned char>(v & 0xff);
        }
    }

    img.pixels.resize(static_cast<std::size_t>(img.width) * img.height);
    for (std::size_t i = 0; i < img.pixels.size(); ++i) {
        if (bpp == 1)
            img.pixels[i] = recon[i];
        else
            img.pixels[i] = static_cast<std::uint16_t>((recon[2 * i] << 8) | recon[2 * i + 1]);
    }
    return img;
}

std::vector<float> resize_bilinear(const std::vector<float>& src, int src_w, int src_h,
                                   int dst_w, int dst_h) {
    if (src_w <= 0 || src_h <= 0 || dst_w <= 0 || dst_h <= 0 ||
        static_cast<std::size_t>(src_w) * src_h != src.size())
        throw InvariantError("resize_bilinear: bad dims");
    std::vector<float> dst(static_cast<std::size_t>(dst_w) * dst_h);
    const double sx = static_cast<double>(src_w) / dst_w;
    const double sy = static_cast<double>(src_h) / dst_h;
    for (int y = 0; y < dst_h; ++y) {
        const double fy = (y + 0.5) * sy - 0.5;
        int y0 = static_cast<int>(std::floor(fy));
        const double wy = fy - y0;
        const int y1 = std::min(std::max(y0 + 1, 0), src_h - 1);
        y0 = std::min(std::max(y0, 0), src_h - 1);
        for (int x = 0; x < dst_w; ++x) {
            const double fx = (x + 0.5) * sx - 0.5;
            int x0 = static_cast<int>(std::floor(fx));
            const double wx = fx - x0;
            const int x1 = std::min(std::max(x0 + 1, 0), src_w - 1);
            x0 = std::min(std::max(x0, 0), src_w - 1);
            const double top = src[y0 * src_w + x0] * (1 - wx) + src[y0 * src_w + x1] * wx;
            const double bot = src[y1 * src_w + x0] * (1 - wx) + src[y1 * src_w + x1] * wx;
            dst[y * dst_w + x] = static_cast<float>(top * (1 - wy) + bot * wy);
        }
    }
    return dst;
}

}  // namespace phenokit
