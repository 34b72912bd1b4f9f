#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include <json.hpp>

#include "msfseg/model.hpp"
#include "msfseg/params.hpp"

namespace msf {

using Json = nlohmann::ordered_json;

Json model_config_to_json(const ModelConfig& cfg);
/// Missing keys keep their defaults; unknown keys throw ConfigError naming the key path.
ModelConfig model_config_from_json(const Json& j);

/// Throws ConfigError listing every key of `j` not in `allowed`.
void reject_unknown_keys(const Json& j, const std::vector<std::string>& allowed, const std::string& where);

struct NamedTensor {
    std::string name;
    ag::Shape shape;
    std::vector<double> values;
    bool operator==(const NamedTensor&) const = default;
};

struct MomentBlob {
    std::string name;
    std::vector<double> m, v;
    bool operator==(const MomentBlob&) const = default;
};

/// Model weights plus everything needed to continue training bit-identically.
struct Checkpoint {
    ModelConfig model;
    std::uint64_t model_seed = 0;
    Json run_config = Json::object();  // echo of the command that produced it
    std::int64_t step = 0;               // completed optimizer steps
    std::vector<double> losses;          // one per completed step
    std::vector<NamedTensor> params;     // in registration order
    bool has_optimizer = false;
    double lr = 0.0;
    std::int64_t adam_t = 0;
    std::vector<MomentBlob> moments;     // in parameter order
    bool operator==(const Checkpoint&) const = default;
};

Checkpoint capture(const MsfSegModel& model, const Adam* adam = nullptr);

/// Builds the model described by the checkpoint and loads its weights.
std::unique_ptr<MsfSegModel> instantiate(const Checkpoint& ck);

/// Copies weights into `model` (and moments into `adam` when both are present).
/// Throws ConfigError on a name or shape mismatch.
void restore(const Checkpoint& ck, MsfSegModel& model, Adam* adam = nullptr);

std::vector<char> encode_checkpoint(const Checkpoint& ck);
/// Throws FormatError (with byte offset) on malformed input.
Checkpoint decode_checkpoint(std::vector<char> bytes);
void save_checkpoint(const Checkpoint& ck, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace msf
