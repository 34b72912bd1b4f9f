#pragma once

#include <cstdint>
#include <vector>

namespace msf {

/// Single-channel slice, row-major, intensities normalized to [0,1].
struct Image2D {
    int h = 0;
    int w = 0;
    std::vector<double> pixels;

    Image2D() = default;
    Image2D(int height, int width, double fill = 0.0)
        : h(height), w(width), pixels(static_cast<std::size_t>(height) * width, fill) {}

    double& at(int y, int x) { return pixels[static_cast<std::size_t>(y) * w + x]; }
    double at(int y, int x) const { return pixels[static_cast<std::size_t>(y) * w + x]; }
    std::size_t size() const { return pixels.size(); }
    bool operator==(const Image2D&) const = default;
};

/// Binary mask, one byte per pixel holding 0 or 1.
struct Mask2D {
    int h = 0;
    int w = 0;
    std::vector<std::uint8_t> bits;

    Mask2D() = default;
    Mask2D(int height, int width, std::uint8_t fill = 0)
        : h(height), w(width), bits(static_cast<std::size_t>(height) * width, fill) {}

    std::uint8_t& at(int y, int x) { return bits[static_cast<std::size_t>(y) * w + x]; }
    std::uint8_t at(int y, int x) const { return bits[static_cast<std::size_t>(y) * w + x]; }
    std::size_t size() const { return bits.size(); }
    std::size_t area() const {
        std::size_t n = 0;
        for (auto b : bits) n += b != 0;
        return n;
    }
    bool operator==(const Mask2D&) const = default;
};

/// Throws InputError on non-finite pixels or a pixel/shape mismatch.
void validate(const Image2D& img);
/// Throws InputError when a value other than 0/1 is present.
void validate(const Mask2D& mask);

/// Half-pixel bilinear resize for intensities.
Image2D resize_linear(const Image2D& img, int h, int w);
/// Nearest-neighbour resize for masks.
Mask2D resize_nearest(const Mask2D& mask, int h, int w);

/// Box-average downsample of a binary mask by an integer factor (values in [0,1]).
std::vector<double> downsample_mask(const Mask2D& mask, int factor);

}  // namespace msf
