#include "mdtbox/image.hpp"

#include <png.h>

#include <cstdio>
#include <memory>

namespace mdtbox {

void Box::validate(int image_size, int downsample) const {
    auto fail = [&](const std::string& what) {
        throw DataError("box " + what + " (x0=" + std::to_string(x0) +
                        " y0=" + std::to_string(y0) + " x1=" + std::to_string(x1) +
                        " y1=" + std::to_string(y1) + ", image_size=" +
                        std::to_string(image_size) + ", f=" + std::to_string(downsample) + ")");
    };
    if (!(0 <= x0 && x0 < x1 && x1 <= image_size)) fail("x range invalid");
    if (!(0 <= y0 && y0 < y1 && y1 <= image_size)) fail("y range invalid");
    if (x0 % downsample || x1 % downsample || y0 % downsample || y1 % downsample)
        fail("coordinates not aligned to the codec grid");
    if (area() < downsample * downsample) fail("area below one latent cell");
}

namespace {

struct FileCloser {
    void operator()(std::FILE* f) const {
        if (f) std::fclose(f);
    }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

} // namespace

ImageTensor png_read_rgb8(const std::filesystem::path& path) {
    FilePtr fp(std::fopen(path.c_str(), "rb"));
    if (!fp) throw IoError("cannot open PNG for reading: " + path.string());

    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!png) throw IoError("png_create_read_struct failed");
    png_infop info = png_create_info_struct(png);
    if (!info) {
        png_destroy_read_struct(&png, nullptr, nullptr);
        throw IoError("png_create_info_struct failed");
    }
    std::vector<png_bytep> rows;
    std::vector<unsigned char> raw;
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw IoError("PNG decode error: " + path.string());
    }
    png_init_io(png, fp.get());
    png_read_info(png, info);

    const png_uint_32 w = png_get_image_width(png, info);
    const png_uint_32 h = png_get_image_height(png, info);
    const int bit_depth = png_get_bit_depth(png, info);
    const int color_type = png_get_color_type(png, info);

    if (bit_depth == 16) png_set_strip_16(png);
    if (color_type == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (color_type == PNG_COLOR_TYPE_GRAY || color_type == PNG_COLOR_TYPE_GRAY_ALPHA)
        png_set_gray_to_rgb(png);
    if (color_type & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
    png_read_update_info(png, info);

    raw.resize(static_cast<size_t>(w) * h * 3);
    rows.resize(h);
    for (png_uint_32 y = 0; y < h; ++y) rows[y] = raw.data() + static_cast<size_t>(y) * w * 3;
    png_read_image(png, rows.data());
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);

    if (w != h)
        throw DataError("PNG is not square: " + path.string());

    ImageTensor img(static_cast<int>(w));
    for (int y = 0; y < img.size; ++y)
        for (int x = 0; x < img.size; ++x)
            for (int c = 0; c < 3; ++c)
                img.at(c, y, x) = dequantize8(raw[(static_cast<size_t>(y) * w + x) * 3 + c]);
    return img;
}

void png_write_rgb8(const std::filesystem::path& path, const ImageTensor& image) {
    if (image.size <= 0) throw ShapeError("cannot write empty image");
    FilePtr fp(std::fopen(path.c_str(), "wb"));
    if (!fp) throw IoError("cannot open PNG for writing: " + path.string());

    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!png) throw IoError("png_create_write_struct failed");
    png_infop info = png_create_info_struct(png);
    if (!info) {
        png_destroy_write_struct(&png, nullptr);
        throw IoError("png_create_info_struct failed");
    }
    std::vector<unsigned char> raw(static_cast<size_t>(image.size) * image.size * 3);
    std::vector<png_bytep> rows(image.size);
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw IoError("PNG encode error: " + path.string());
    }
    png_init_io(png, fp.get());
    png_set_IHDR(png, info, image.size, image.size, 8, PNG_COLOR_TYPE_RGB,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);

    for (int y = 0; y < image.size; ++y) {
        for (int x = 0; x < image.size; ++x)
            for (int c = 0; c < 3; ++c)
                raw[(static_cast<size_t>(y) * image.size + x) * 3 + c] =
                    quantize8(image.at(c, y, x));
        rows[y] = raw.data() + static_cast<size_t>(y) * image.size * 3;
    }
    png_write_image(png, rows.data());
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

} // namespace mdtbox
