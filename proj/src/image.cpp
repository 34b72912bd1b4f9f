#include "msfseg/image.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "msfseg/errors.hpp"

namespace msf {

void validate(const Image2D& img) {
    if (img.h <= 0 || img.w <= 0 || img.pixels.size() != static_cast<std::size_t>(img.h) * img.w)
        throw InputError("image: pixel buffer does not match " + std::to_string(img.h) + "x" +
                         std::to_string(img.w));
    for (double v : img.pixels)
        if (!std::isfinite(v)) throw InputError("image: non-finite pixel value");
}

void validate(const Mask2D& mask) {
    if (mask.h <= 0 || mask.w <= 0 || mask.bits.size() != static_cast<std::size_t>(mask.h) * mask.w)
        throw InputError("mask: buffer does not match " + std::to_string(mask.h) + "x" +
                         std::to_string(mask.w));
    for (auto b : mask.bits)
        if (b > 1) throw InputError("mask: values must be 0 or 1");
}

Image2D resize_linear(const Image2D& img, int h, int w) {
    if (img.h == h && img.w == w) return img;
    Image2D out(h, w);
    const double ry = static_cast<double>(img.h) / h;
    const double rx = static_cast<double>(img.w) / w;
    for (int y = 0; y < h; ++y) {
        const double sy = std::clamp((y + 0.5) * ry - 0.5, 0.0, img.h - 1.0);
        const int y0 = static_cast<int>(sy);
        const int y1 = std::min(y0 + 1, img.h - 1);
        const double fy = sy - y0;
        for (int x = 0; x < w; ++x) {
            const double sx = std::clamp((x + 0.5) * rx - 0.5, 0.0, img.w - 1.0);
            const int x0 = static_cast<int>(sx);
            const int x1 = std::min(x0 + 1, img.w - 1);
            const double fx = sx - x0;
            const double top = img.at(y0, x0) * (1 - fx) + img.at(y0, x1) * fx;
            const double bot = img.at(y1, x0) * (1 - fx) + img.at(y1, x1) * fx;
            out.at(y, x) = top * (1 - fy) + bot * fy;
        }
    }
    return out;
}

Mask2D resize_nearest(const Mask2D& mask, int h, int w) {
    if (mask.h == h && mask.w == w) return mask;
    Mask2D out(h, w);
    for (int y = 0; y < h; ++y) {
        const int sy = std::min(mask.h - 1, static_cast<int>((y + 0.5) * mask.h / h));
        for (int x = 0; x < w; ++x) {
            const int sx = std::min(mask.w - 1, static_cast<int>((x + 0.5) * mask.w / w));
            out.at(y, x) = mask.at(sy, sx);
        }
    }
    return out;
}

std::vector<double> downsample_mask(const Mask2D& mask, int factor) {
    if (factor < 1 || mask.h % factor != 0 || mask.w % factor != 0)
        throw InputError("downsample_mask: size not divisible by factor " + std::to_string(factor));
    const int oh = mask.h / factor, ow = mask.w / factor;
    std::vector<double> out(static_cast<std::size_t>(oh) * ow, 0.0);
    const double norm = 1.0 / (factor * factor);
    for (int y = 0; y < mask.h; ++y)
        for (int x = 0; x < mask.w; ++x)
            if (mask.at(y, x)) out[static_cast<std::size_t>(y / factor) * ow + x / factor] += norm;
    return out;
}

}  // namespace msf
