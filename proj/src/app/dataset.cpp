#include "msfseg/dataset.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <set>

#include "msfseg/errors.hpp"

namespace fs = std::filesystem;

namespace msf {

const Volume* Dataset::find(const std::string& id) const {
    for (const auto& v : volumes)
        if (v.id == id) return &v;
    return nullptr;
}

std::vector<std::string> volume_files(const std::string& dir) {
    std::vector<std::string> out;
    if (!fs::is_directory(dir)) return out;
    for (const auto& e : fs::directory_iterator(dir))
        if (e.is_regular_file() && e.path().extension() == kVolumeExt) out.push_back(e.path().string());
    std::sort(out.begin(), out.end());
    return out;
}

Dataset load_dataset(const std::string& dir) {
    if (dir.empty()) throw ConfigError("dataset path is empty");
    if (!fs::is_directory(dir)) throw ConfigError("dataset directory not found: " + dir);
    Dataset ds;
    ds.dir = dir;
    const fs::path index = fs::path(dir) / kDatasetIndex;
    if (fs::exists(index)) {
        std::ifstream in(index);
        Json j;
        try {
            j = Json::parse(in);
        } catch (const nlohmann::json::exception& e) {
            throw ConfigError("dataset index " + index.string() + ": " + e.what());
        }
        reject_unknown_keys(j, {"volumes", "classes", "train_classes", "test_classes", "config"}, index.string());
        try {
            for (const auto& id : j.at("volumes")) {
                const fs::path p = fs::path(dir) / (id.get<std::string>() + kVolumeExt);
                if (!fs::exists(p)) throw ConfigError("dataset index lists a missing volume: " + p.string());
                ds.volumes.push_back(load_volume(p.string()));
            }
            for (const auto& c : j.value("classes", Json::array()))
                ds.classes.push_back({c.at("id").get<int>(), c.at("name").get<std::string>(), c.value("tubular", false)});
            ds.train_classes = j.value("train_classes", std::vector<int>{});
            ds.test_classes = j.value("test_classes", std::vector<int>{});
            ds.config = j.value("config", Json::object());
        } catch (const nlohmann::json::exception& e) {
            throw ConfigError("dataset index " + index.string() + ": " + e.what());
        }
    } else {
        for (const auto& p : volume_files(dir)) ds.volumes.push_back(load_volume(p));
    }
    if (ds.volumes.empty()) throw ConfigError("dataset " + dir + " contains no volumes");
    if (ds.classes.empty()) {
        std::set<int> seen;
        for (const auto& v : ds.volumes)
            for (const auto& c : v.classes)
                if (seen.insert(c.id).second) ds.classes.push_back(c);
    }
    if (ds.train_classes.empty() && ds.test_classes.empty())
        for (const auto& c : ds.classes) ds.train_classes.push_back(c.id);
    return ds;
}

void write_dataset(const Dataset& ds) {
    fs::create_directories(ds.dir);
    Json ids = Json::array(), classes = Json::array();
    for (const auto& v : ds.volumes) {
        save_volume(v, (fs::path(ds.dir) / (v.id + kVolumeExt)).string());
        ids.push_back(v.id);
    }
    for (const auto& c : ds.classes) classes.push_back({{"id", c.id}, {"name", c.name}, {"tubular", c.tubular}});
    const Json j{{"volumes", ids},
                 {"classes", classes},
                 {"train_classes", ds.train_classes},
                 {"test_classes", ds.test_classes},
                 {"config", ds.config}};
    std::ofstream out(fs::path(ds.dir) / kDatasetIndex);
    if (!out) throw InputError("cannot write dataset index in " + ds.dir);
    out << j.dump(2) << '\n';
}

}  // namespace msf
