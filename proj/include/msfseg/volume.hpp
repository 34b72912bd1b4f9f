#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "msfseg/image.hpp"

namespace msf {

struct ClassInfo {
    int id = 0;  // 1..255; 0 is background
    std::string name;
    bool tubular = false;
    bool operator==(const ClassInfo&) const = default;
};

/// D×H×W intensity grid with an optional label map (one class id per voxel,
/// which keeps classes disjoint by construction).
struct Volume {
    std::string id;
    int depth = 0, height = 0, width = 0;
    std::array<double, 3> spacing{1.0, 1.0, 1.0};  // z, y, x
    std::vector<ClassInfo> classes;
    std::vector<double> intensities;  // z-major
    bool has_masks = false;
    std::vector<std::uint8_t> labels;  // empty unless has_masks

    std::size_t plane() const { return static_cast<std::size_t>(height) * width; }
    std::size_t voxels() const { return plane() * depth; }

    Image2D slice(int z) const;
    /// Binary mask of one class on slice z. Throws InputError when masks are absent.
    Mask2D mask(int z, int class_id) const;
    std::size_t class_area(int z, int class_id) const;
    bool contains(int z, int class_id) const { return class_area(z, class_id) > 0; }
    std::vector<Mask2D> masks(int class_id) const;
    /// Writes a binary mask for one class into slice z (other classes on the slice are kept).
    void set_mask(int z, int class_id, const Mask2D& m);
    const ClassInfo* find_class(int class_id) const;

    bool operator==(const Volume&) const = default;
};

/// Throws InputError on inconsistent sizes, non-finite intensities or unknown labels.
void validate(const Volume& v);

void save_volume(const Volume& v, const std::string& path);
/// Throws FormatError (with byte offset) on malformed or truncated files.
Volume load_volume(const std::string& path);

std::vector<char> encode_volume(const Volume& v);
Volume decode_volume(std::vector<char> bytes);

/// Slice resampled to the model input size: linear for intensities.
Image2D prepare_slice(const Volume& v, int z, int size);
/// Nearest-neighbour resampling for masks.
Mask2D prepare_mask(const Volume& v, int z, int class_id, int size);

}  // namespace msf
