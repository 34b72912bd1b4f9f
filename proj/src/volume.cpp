#include "msfseg/volume.hpp"

#include <cmath>

#include "binio.hpp"
#include "msfseg/errors.hpp"

namespace msf {

namespace {

constexpr std::string_view kMagic{"MSFVOL\0\1", 8};
constexpr std::uint32_t kVersion = 1;

void need_masks(const Volume& v) {
    if (!v.has_masks) throw InputError("volume " + v.id + ": no masks present");
}

void check_slice(const Volume& v, int z) {
    if (z < 0 || z >= v.depth)
        throw InputError("volume " + v.id + ": slice " + std::to_string(z) + " out of range [0," +
                         std::to_string(v.depth) + ")");
}

}  // namespace

Image2D Volume::slice(int z) const {
    check_slice(*this, z);
    Image2D img(height, width);
    std::copy_n(intensities.begin() + static_cast<std::ptrdiff_t>(z * plane()), plane(), img.pixels.begin());
    return img;
}

Mask2D Volume::mask(int z, int class_id) const {
    need_masks(*this);
    check_slice(*this, z);
    Mask2D m(height, width);
    const std::uint8_t* p = labels.data() + z * plane();
    for (std::size_t i = 0; i < plane(); ++i) m.bits[i] = p[i] == class_id ? 1 : 0;
    return m;
}

std::size_t Volume::class_area(int z, int class_id) const {
    need_masks(*this);
    check_slice(*this, z);
    const std::uint8_t* p = labels.data() + z * plane();
    std::size_t n = 0;
    for (std::size_t i = 0; i < plane(); ++i) n += p[i] == class_id;
    return n;
}

std::vector<Mask2D> Volume::masks(int class_id) const {
    std::vector<Mask2D> out;
    out.reserve(depth);
    for (int z = 0; z < depth; ++z) out.push_back(mask(z, class_id));
    return out;
}

void Volume::set_mask(int z, int class_id, const Mask2D& m) {
    check_slice(*this, z);
    if (m.h != height || m.w != width) throw InputError("volume " + id + ": mask size mismatch");
    validate(m);
    if (!has_masks) {
        has_masks = true;
        labels.assign(voxels(), 0);
    }
    std::uint8_t* p = labels.data() + z * plane();
    for (std::size_t i = 0; i < plane(); ++i) {
        if (m.bits[i]) p[i] = static_cast<std::uint8_t>(class_id);
        else if (p[i] == class_id) p[i] = 0;
    }
}

const ClassInfo* Volume::find_class(int class_id) const {
    for (const auto& c : classes)
        if (c.id == class_id) return &c;
    return nullptr;
}

void validate(const Volume& v) {
    if (v.depth < 1 || v.height < 1 || v.width < 1) throw InputError("volume " + v.id + ": empty grid");
    if (v.intensities.size() != v.voxels()) throw InputError("volume " + v.id + ": intensity count mismatch");
    for (double x : v.intensities)
        if (!std::isfinite(x)) throw InputError("volume " + v.id + ": non-finite intensity");
    if (v.has_masks != !v.labels.empty() || (v.has_masks && v.labels.size() != v.voxels()))
        throw InputError("volume " + v.id + ": label map size mismatch");
    for (const auto& c : v.classes)
        if (c.id < 1 || c.id > 255) throw InputError("volume " + v.id + ": class id out of range");
    std::vector<bool> known(256, false);
    known[0] = true;
    for (const auto& c : v.classes) known[c.id] = true;
    for (auto l : v.labels)
        if (!known[l]) throw InputError("volume " + v.id + ": label " + std::to_string(l) + " not in class table");
}

std::vector<char> encode_volume(const Volume& v) {
    validate(v);
    bin::Writer w;
    w.magic(kMagic);
    w.put<std::uint32_t>(kVersion);
    w.str(v.id);
    w.put<std::uint32_t>(v.depth);
    w.put<std::uint32_t>(v.height);
    w.put<std::uint32_t>(v.width);
    for (double s : v.spacing) w.put(s);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(v.classes.size()));
    for (const auto& c : v.classes) {
        w.put<std::uint8_t>(static_cast<std::uint8_t>(c.id));
        w.put<std::uint8_t>(c.tubular ? 1 : 0);
        w.str(c.name);
    }
    w.put<std::uint8_t>(v.has_masks ? 1 : 0);
    w.doubles(v.intensities);
    if (v.has_masks) w.u8s(v.labels);
    return w.buffer();
}

Volume decode_volume(std::vector<char> bytes) {
    bin::Reader r(std::move(bytes), "volume");
    r.magic(kMagic);
    const auto version = r.get<std::uint32_t>("version");
    if (version != kVersion) r.fail("unsupported version " + std::to_string(version));
    Volume v;
    v.id = r.str("id", 4096);
    v.depth = static_cast<int>(r.get<std::uint32_t>("depth"));
    v.height = static_cast<int>(r.get<std::uint32_t>("height"));
    v.width = static_cast<int>(r.get<std::uint32_t>("width"));
    if (v.depth < 1 || v.height < 1 || v.width < 1 || v.voxels() > (std::size_t{1} << 32)) r.fail("implausible dimensions");
    for (double& s : v.spacing) s = r.get<double>("spacing");
    const auto nclass = r.get<std::uint32_t>("class count");
    if (nclass > 255) r.fail("too many classes");
    for (std::uint32_t i = 0; i < nclass; ++i) {
        ClassInfo c;
        c.id = r.get<std::uint8_t>("class id");
        c.tubular = r.get<std::uint8_t>("class flags") != 0;
        c.name = r.str("class name", 4096);
        v.classes.push_back(std::move(c));
    }
    const auto flag = r.get<std::uint8_t>("mask flag");
    if (flag > 1) r.fail("bad mask flag");
    v.has_masks = flag == 1;
    v.intensities = r.doubles(v.voxels(), "intensities");
    if (v.has_masks) v.labels = r.u8s(v.voxels(), "labels");
    r.expect_end();
    try {
        validate(v);
    } catch (const InputError& e) {
        r.fail(e.what());
    }
    return v;
}

void save_volume(const Volume& v, const std::string& path) {
    bin::write_file(path, encode_volume(v));
}

Volume load_volume(const std::string& path) {
    return decode_volume(bin::read_file(path));
}

Image2D prepare_slice(const Volume& v, int z, int size) {
    Image2D img = v.slice(z);
    return (img.h == size && img.w == size) ? img : resize_linear(img, size, size);
}

Mask2D prepare_mask(const Volume& v, int z, int class_id, int size) {
    Mask2D m = v.mask(z, class_id);
    return (m.h == size && m.w == size) ? m : resize_nearest(m, size, size);
}

}  // namespace msf
