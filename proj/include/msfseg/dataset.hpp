#pragma once

#include <string>
#include <vector>

#include "msfseg/checkpoint.hpp"
#include "msfseg/volume.hpp"

namespace msf {

/// A directory of .msfvol files plus an optional dataset.json index
/// {"volumes": [...ids in order], "classes": [...], "train_classes": [...], "test_classes": [...], "config": {...}}.
struct Dataset {
    std::string dir;
    std::vector<Volume> volumes;
    std::vector<ClassInfo> classes;
    std::vector<int> train_classes;
    std::vector<int> test_classes;
    Json config = Json::object();

    /// nullptr when absent.
    const Volume* find(const std::string& id) const;
};

inline constexpr const char* kDatasetIndex = "dataset.json";
inline constexpr const char* kVolumeExt = ".msfvol";

/// Throws ConfigError when the directory is missing or holds no volumes. Without an
/// index, volumes load in file-name order and every class counts as a training class.
Dataset load_dataset(const std::string& dir);

void write_dataset(const Dataset& ds);

/// .msfvol files directly inside `dir`, sorted by name.
std::vector<std::string> volume_files(const std::string& dir);

}  // namespace msf
