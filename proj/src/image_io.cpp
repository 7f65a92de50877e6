#include "tora2/image_io.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <vector>

namespace tora2 {

namespace {

// RAII closer so error paths (including libpng longjmps that we convert to
// exceptions) never leak the stream.
struct FileHandle {
    FILE* fp = nullptr;
    ~FileHandle() {
        if (fp) std::fclose(fp);
    }
};

}  // namespace

void write_png(const std::string& path, const Tensor& image) {
    if (image.ndim() != 3 || image.shape[2] != 3)
        throw ValueError("png: expected an (H,W,3) image, got " + image.shape_str());
    int64_t h = image.shape[0], w = image.shape[1];
    if (h < 1 || w < 1) throw ValueError("png: empty image");

    FileHandle file;
    file.fp = std::fopen(path.c_str(), "wb");
    if (!file.fp) throw ValueError("png: cannot open '" + path + "' for writing");

    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        png_destroy_write_struct(&png, &info);
        throw ValueError("png: allocation failed");
    }
    std::vector<png_byte> row(static_cast<size_t>(w) * 3);
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw ValueError("png: write to '" + path + "' failed");
    }
    png_init_io(png, file.fp);
    png_set_IHDR(png, info, static_cast<png_uint_32>(w), static_cast<png_uint_32>(h), 8,
                 PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
                 PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    for (int64_t y = 0; y < h; ++y) {
        for (int64_t x = 0; x < w * 3; ++x) {
            double v = image.data[static_cast<size_t>(y * w * 3 + x)];
            v = std::clamp(v, 0.0, 1.0);
            row[static_cast<size_t>(x)] = static_cast<png_byte>(std::lround(v * 255.0));
        }
        png_write_row(png, row.data());
    }
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

Tensor read_png(const std::string& path) {
    FileHandle file;
    file.fp = std::fopen(path.c_str(), "rb");
    if (!file.fp) throw ValueError("png: cannot open '" + path + "' for reading");

    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw ValueError("png: allocation failed");
    }
    Tensor out;
    std::vector<png_byte> row;
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw ValueError("png: cannot decode '" + path + "'");
    }
    png_init_io(png, file.fp);
    png_read_info(png, info);

    png_uint_32 w = png_get_image_width(png, info);
    png_uint_32 h = png_get_image_height(png, info);
    png_byte color = png_get_color_type(png, info);
    png_byte depth = png_get_bit_depth(png, info);

    // normalize every input variant to 8-bit RGB
    if (depth == 16) png_set_strip_16(png);
    if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
    if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
    if (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA)
        png_set_gray_to_rgb(png);
    png_set_strip_alpha(png);
    png_read_update_info(png, info);

    if (png_get_rowbytes(png, info) != static_cast<size_t>(w) * 3) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw ValueError("png: '" + path + "' did not decode to RGB rows");
    }

    out = Tensor({static_cast<int64_t>(h), static_cast<int64_t>(w), 3});
    row.resize(static_cast<size_t>(w) * 3);
    for (png_uint_32 y = 0; y < h; ++y) {
        png_read_row(png, row.data(), nullptr);
        for (size_t x = 0; x < row.size(); ++x)
            out.data[static_cast<size_t>(y) * row.size() + x] =
                static_cast<double>(row[x]) / 255.0;
    }
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);
    return out;
}

}  // namespace tora2
