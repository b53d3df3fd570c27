#include "scan/image_io.hpp"

#include <png.h>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <memory>
#include <vector>

namespace scan {

Tensor load_jsrt_image(const std::string& path) {
    const std::int64_t expected = kJsrtExtent * kJsrtExtent * 2;
    std::error_code ec;
    const auto actual = std::filesystem::file_size(path, ec);
    if (ec) throw FormatError("jsrt: cannot stat '" + path + "': " + ec.message());
    if (static_cast<std::int64_t>(actual) != expected)
        throw FormatError("jsrt: '" + path + "' has " + std::to_string(actual) +
                          " bytes, expected " + std::to_string(expected));

    std::ifstream is(path, std::ios::binary);
    if (!is) throw FormatError("jsrt: cannot open '" + path + "'");
    std::vector<unsigned char> bytes(static_cast<std::size_t>(expected));
    is.read(reinterpret_cast<char*>(bytes.data()), expected);
    if (!is) throw FormatError("jsrt: short read on '" + path + "'");

    Tensor out({kJsrtExtent, kJsrtExtent, 1});
    for (std::size_t i = 0; i < out.values.size(); ++i) {
        int v = (int(bytes[2 * i]) << 8) | int(bytes[2 * i + 1]);  // big endian
        v = std::min(v, kJsrtMaxValue);
        out.values[i] = float(kJsrtInvertPolarity ? kJsrtMaxValue - v : v);
    }
    return out;
}

namespace {

struct PngReader {
    png_structp png = nullptr;
    png_infop info = nullptr;
    std::FILE* fp = nullptr;

    ~PngReader() {
        if (png) png_destroy_read_struct(&png, info ? &info : nullptr, nullptr);
        if (fp) std::fclose(fp);
    }
};

Tensor read_gray_png(const std::string& path, int* bit_depth_out) {
    PngReader r;
    r.fp = std::fopen(path.c_str(), "rb");
    if (!r.fp) throw FormatError("png: cannot open '" + path + "'");
    unsigned char sig[8];
    if (std::fread(sig, 1, 8, r.fp) != 8 || png_sig_cmp(sig, 0, 8))
        throw FormatError("png: '" + path + "' is not a PNG file");

    r.png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    r.info = png_create_info_struct(r.png);
    if (!r.png || !r.info) throw FormatError("png: allocation failure");
    if (setjmp(png_jmpbuf(r.png)))
        throw FormatError("png: failed to decode '" + path + "'");

    png_init_io(r.png, r.fp);
    png_set_sig_bytes(r.png, 8);
    png_read_info(r.png, r.info);

    const int color = png_get_color_type(r.png, r.info);
    int depth = png_get_bit_depth(r.png, r.info);
    if (color != PNG_COLOR_TYPE_GRAY)
        throw FormatError("png: '" + path + "' is not grayscale (color type " +
                          std::to_string(color) + ")");
    if (depth < 8) {
        png_set_expand_gray_1_2_4_to_8(r.png);
        depth = 8;
    }
    png_read_update_info(r.png, r.info);

    const std::int64_t h = png_get_image_height(r.png, r.info);
    const std::int64_t w = png_get_image_width(r.png, r.info);
    const std::size_t rowbytes = png_get_rowbytes(r.png, r.info);
    std::vector<unsigned char> row(rowbytes);

    Tensor out({h, w, 1});
    for (std::int64_t y = 0; y < h; ++y) {
        png_read_row(r.png, row.data(), nullptr);
        if (depth == 8) {
            for (std::int64_t x = 0; x < w; ++x) out.at(y, x, 0) = float(row[x]);
        } else {
            // 16-bit PNG samples are big endian.
            for (std::int64_t x = 0; x < w; ++x)
                out.at(y, x, 0) = float((int(row[2 * x]) << 8) | int(row[2 * x + 1]));
        }
    }
    if (bit_depth_out) *bit_depth_out = depth;
    return out;
}

struct PngWriter {
    png_structp png = nullptr;
    png_infop info = nullptr;
    std::FILE* fp = nullptr;

    ~PngWriter() {
        if (png) png_destroy_write_struct(&png, info ? &info : nullptr);
        if (fp) std::fclose(fp);
    }
};

void write_gray_png(const std::string& path, std::int64_t h, std::int64_t w, int depth,
                    const std::vector<unsigned char>& bytes) {
    PngWriter wr;
    wr.fp = std::fopen(path.c_str(), "wb");
    if (!wr.fp) throw FormatError("png: cannot open '" + path + "' for writing");
    wr.png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    wr.info = png_create_info_struct(wr.png);
    if (!wr.png || !wr.info) throw FormatError("png: allocation failure");
    if (setjmp(png_jmpbuf(wr.png)))
        throw FormatError("png: failed to encode '" + path + "'");

    png_init_io(wr.png, wr.fp);
    png_set_IHDR(wr.png, wr.info, png_uint_32(w), png_uint_32(h), depth,
                 PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
                 PNG_FILTER_TYPE_DEFAULT);
    png_write_info(wr.png, wr.info);
    const std::size_t rowbytes = std::size_t(w) * (depth == 16 ? 2 : 1);
    for (std::int64_t y = 0; y < h; ++y)
        png_write_row(wr.png,
                      const_cast<png_bytep>(bytes.data() + std::size_t(y) * rowbytes));
    png_write_end(wr.png, nullptr);
}

}  // namespace

Tensor load_png_image(const std::string& path) { return read_gray_png(path, nullptr); }

Tensor load_mask_png(const std::string& path) {
    int depth = 8;
    Tensor t = read_gray_png(path, &depth);
    const float half = float((1 << depth) - 1) * 0.5f;
    for (auto& v : t.values) v = v >= half ? 1.0f : 0.0f;
    return t;
}

void save_png_gray8(const std::string& path, const Tensor& image) {
    if (image.shape.size() != 3 || image.shape[2] != 1)
        throw ShapeError("save_png_gray8: needs [H,W,1], got " + image.shape_str());
    const std::int64_t h = image.shape[0], w = image.shape[1];
    std::vector<unsigned char> bytes(std::size_t(h * w));
    for (std::size_t i = 0; i < bytes.size(); ++i) {
        const float v = std::clamp(image.values[i], 0.0f, 1.0f);
        bytes[i] = static_cast<unsigned char>(std::lround(v * 255.0f));
    }
    write_gray_png(path, h, w, 8, bytes);
}

void save_png_gray16(const std::string& path, const Tensor& image, int max_value) {
    if (image.shape.size() != 3 || image.shape[2] != 1)
        throw ShapeError("save_png_gray16: needs [H,W,1], got " + image.shape_str());
    const std::int64_t h = image.shape[0], w = image.shape[1];
    std::vector<unsigned char> bytes(std::size_t(h * w) * 2);
    for (std::int64_t i = 0; i < h * w; ++i) {
        int v = int(std::lround(double(image.values[std::size_t(i)])));
        v = std::clamp(v, 0, std::min(max_value, 65535));
        bytes[std::size_t(2 * i)] = static_cast<unsigned char>(v >> 8);
        bytes[std::size_t(2 * i + 1)] = static_cast<unsigned char>(v & 0xff);
    }
    write_gray_png(path, h, w, 16, bytes);
}

}  // namespace scan
