#pragma once

#include <filesystem>
#include <vector>

#include "mdtbox/errors.hpp"

namespace mdtbox {

// Square RGB image, CHW layout, values in [-1, 1]. Stored to disk as 8-bit
// RGB PNG with the linear map [-1,1] -> [0,255].
struct ImageTensor {
    int size = 0;
    std::vector<double> data; // 3 * size * size

    ImageTensor() = default;
    explicit ImageTensor(int s, double fill = 0.0)
        : size(s), data(static_cast<size_t>(3) * s * s, fill) {}

    double& at(int c, int y, int x) {
        return data[(static_cast<size_t>(c) * size + y) * size + x];
    }
    double at(int c, int y, int x) const {
        return data[(static_cast<size_t>(c) * size + y) * size + x];
    }
    bool same_shape(const ImageTensor& o) const { return size == o.size; }
};

// Half-open pixel rectangle [x0,x1) x [y0,y1). All four coordinates must be
// divisible by the codec downsample factor so the induced latent box is exact.
struct Box {
    int x0 = 0, y0 = 0, x1 = 0, y1 = 0;

    int width() const { return x1 - x0; }
    int height() const { return y1 - y0; }
    int area() const { return width() * height(); }
    bool contains(int x, int y) const { return x >= x0 && x < x1 && y >= y0 && y < y1; }

    // Throws DataError naming the violated invariant.
    void validate(int image_size, int downsample) const;

    // The box in latent cells; validate() guarantees exact division.
    Box latent(int downsample) const {
        return Box{x0 / downsample, y0 / downsample, x1 / downsample, y1 / downsample};
    }

    bool operator==(const Box&) const = default;
};

ImageTensor png_read_rgb8(const std::filesystem::path& path);
void png_write_rgb8(const std::filesystem::path& path, const ImageTensor& image);

// [-1,1] <-> 8-bit helpers shared by the PNG codec and the metrics module.
inline unsigned char quantize8(double v) {
    double u = (v + 1.0) * 0.5 * 255.0;
    if (u < 0.0) u = 0.0;
    if (u > 255.0) u = 255.0;
    return static_cast<unsigned char>(u + 0.5);
}
inline double dequantize8(unsigned char b) { return b / 255.0 * 2.0 - 1.0; }

} // namespace mdtbox
