#include "msfseg/checkpoint.hpp"

#include <algorithm>

#include "binio.hpp"
#include "msfseg/errors.hpp"

namespace msf {

namespace {

constexpr std::string_view kMagic{"MSFCKPT\0", 8};
constexpr std::uint32_t kVersion = 1;

template <class T>
void read_field(const Json& j, const char* key, T& out, const std::string& where) {
    if (!j.contains(key)) return;
    try {
        out = j.at(key).get<T>();
    } catch (const nlohmann::json::exception&) {
        throw ConfigError(where + "." + key + ": wrong type");
    }
}

}  // namespace

void reject_unknown_keys(const Json& j, const std::vector<std::string>& allowed, const std::string& where) {
    if (!j.is_object()) throw ConfigError(where + ": expected an object");
    std::string bad;
    for (const auto& [k, _] : j.items())
        if (std::find(allowed.begin(), allowed.end(), k) == allowed.end()) bad += (bad.empty() ? "" : ", ") + k;
    if (!bad.empty()) throw ConfigError(where + ": unknown key(s) " + bad);
}

Json model_config_to_json(const ModelConfig& c) {
    return Json{
        {"backbone",
         {{"input_size", c.backbone.input_size},
          {"in_channels", c.backbone.in_channels},
          {"channels", c.backbone.channels},
          {"stem_stride", c.backbone.stem_stride},
          {"norm_groups", c.backbone.norm_groups}}},
        {"attention",
         {{"heads", c.attention.heads},
          {"embed", c.attention.embed},
          {"head_channels", c.attention.head_channels},
          {"norm_groups", c.attention.norm_groups}}},
        {"fusion",
         {{"out_channels", c.fusion.out_channels}, {"kernel", c.fusion.kernel}, {"norm_groups", c.fusion.norm_groups}}},
        {"decoder",
         {{"channels", c.decoder.channels},
          {"transposed", c.decoder.transposed},
          {"norm_groups", c.decoder.norm_groups}}},
    };
}

ModelConfig model_config_from_json(const Json& j) {
    ModelConfig c;
    reject_unknown_keys(j, {"backbone", "attention", "fusion", "decoder"}, "model");
    if (j.contains("backbone")) {
        const auto& b = j["backbone"];
        reject_unknown_keys(b, {"input_size", "in_channels", "channels", "stem_stride", "norm_groups"}, "model.backbone");
        read_field(b, "input_size", c.backbone.input_size, "model.backbone");
        read_field(b, "in_channels", c.backbone.in_channels, "model.backbone");
        read_field(b, "channels", c.backbone.channels, "model.backbone");
        read_field(b, "stem_stride", c.backbone.stem_stride, "model.backbone");
        read_field(b, "norm_groups", c.backbone.norm_groups, "model.backbone");
    }
    if (j.contains("attention")) {
        const auto& a = j["attention"];
        reject_unknown_keys(a, {"heads", "embed", "head_channels", "norm_groups"}, "model.attention");
        read_field(a, "heads", c.attention.heads, "model.attention");
        read_field(a, "embed", c.attention.embed, "model.attention");
        read_field(a, "head_channels", c.attention.head_channels, "model.attention");
        read_field(a, "norm_groups", c.attention.norm_groups, "model.attention");
    }
    if (j.contains("fusion")) {
        const auto& f = j["fusion"];
        reject_unknown_keys(f, {"out_channels", "kernel", "norm_groups"}, "model.fusion");
        read_field(f, "out_channels", c.fusion.out_channels, "model.fusion");
        read_field(f, "kernel", c.fusion.kernel, "model.fusion");
        read_field(f, "norm_groups", c.fusion.norm_groups, "model.fusion");
    }
    if (j.contains("decoder")) {
        const auto& d = j["decoder"];
        reject_unknown_keys(d, {"channels", "transposed", "norm_groups"}, "model.decoder");
        read_field(d, "channels", c.decoder.channels, "model.decoder");
        read_field(d, "transposed", c.decoder.transposed, "model.decoder");
        read_field(d, "norm_groups", c.decoder.norm_groups, "model.decoder");
    }
    return c;
}

Checkpoint capture(const MsfSegModel& model, const Adam* adam) {
    Checkpoint ck;
    ck.model = model.config();
    ck.model_seed = model.seed();
    for (const auto& [name, var] : model.params().entries())
        ck.params.push_back({name, var.shape(), {var.value().begin(), var.value().end()}});
    if (adam) {
        ck.has_optimizer = true;
        ck.lr = adam->config().lr;
        ck.adam_t = adam->steps();
        for (const auto& [name, _] : model.params().entries()) {
            auto it = adam->state().find(name);
            if (it != adam->state().end()) ck.moments.push_back({name, it->second.m, it->second.v});
        }
    }
    return ck;
}

void restore(const Checkpoint& ck, MsfSegModel& model, Adam* adam) {
    if (!(ck.model == model.config()))
        throw ConfigError("checkpoint model configuration " + model_config_to_json(ck.model).dump() +
                          " differs from " + model_config_to_json(model.config()).dump());
    const auto& entries = model.params().entries();
    if (entries.size() != ck.params.size())
        throw ConfigError("checkpoint holds " + std::to_string(ck.params.size()) + " tensors, model has " +
                          std::to_string(entries.size()));
    for (std::size_t i = 0; i < entries.size(); ++i) {
        const auto& [name, var] = entries[i];
        const auto& t = ck.params[i];
        if (t.name != name || t.shape != var.shape())
            throw ConfigError("checkpoint tensor " + t.name + " " + ag::shape_str(t.shape) + " does not match model " +
                              name + " " + ag::shape_str(var.shape()));
    }
    for (std::size_t i = 0; i < entries.size(); ++i) {
        auto dst = ag::Var(entries[i].second).mutable_value();
        std::copy(ck.params[i].values.begin(), ck.params[i].values.end(), dst.begin());
    }
    if (adam && ck.has_optimizer) {
        std::unordered_map<std::string, Adam::Moments> state;
        for (const auto& m : ck.moments) {
            if (!model.params().contains(m.name) || m.m.size() != model.params().get(m.name).numel() ||
                m.v.size() != m.m.size())
                throw ConfigError("checkpoint optimizer state for " + m.name + " does not match the model");
            state[m.name] = {m.m, m.v};
        }
        adam->restore(ck.adam_t, std::move(state));
        adam->set_lr(ck.lr);
    }
}

std::unique_ptr<MsfSegModel> instantiate(const Checkpoint& ck) {
    auto model = std::make_unique<MsfSegModel>(ck.model, ck.model_seed);
    restore(ck, *model);
    return model;
}

std::vector<char> encode_checkpoint(const Checkpoint& ck) {
    bin::Writer w;
    w.magic(kMagic);
    w.put(kVersion);
    const Json header{{"model", model_config_to_json(ck.model)}, {"model_seed", ck.model_seed}, {"run", ck.run_config}};
    w.str(header.dump());
    w.put<std::int64_t>(ck.step);
    w.put<std::uint64_t>(ck.losses.size());
    w.doubles(ck.losses);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(ck.params.size()));
    for (const auto& t : ck.params) {
        w.str(t.name);
        w.put<std::uint32_t>(static_cast<std::uint32_t>(t.shape.size()));
        for (int d : t.shape) w.put<std::int32_t>(d);
        w.doubles(t.values);
    }
    w.put<std::uint8_t>(ck.has_optimizer ? 1 : 0);
    if (ck.has_optimizer) {
        w.put(ck.lr);
        w.put<std::int64_t>(ck.adam_t);
        w.put<std::uint32_t>(static_cast<std::uint32_t>(ck.moments.size()));
        for (const auto& m : ck.moments) {
            w.str(m.name);
            w.put<std::uint64_t>(m.m.size());
            w.doubles(m.m);
            w.doubles(m.v);
        }
    }
    return w.buffer();
}

Checkpoint decode_checkpoint(std::vector<char> bytes) {
    bin::Reader r(std::move(bytes), "checkpoint");
    r.magic(kMagic);
    if (const auto v = r.get<std::uint32_t>("version"); v != kVersion) r.fail("unsupported version " + std::to_string(v));
    Checkpoint ck;
    const std::size_t header_at = r.offset();
    const std::string header = r.str("header");
    try {
        const Json h = Json::parse(header);
        reject_unknown_keys(h, {"model", "model_seed", "run"}, "checkpoint header");
        ck.model = model_config_from_json(h.at("model"));
        ck.model_seed = h.at("model_seed").get<std::uint64_t>();
        ck.run_config = h.at("run");
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("checkpoint: bad header: ") + e.what(), header_at);
    } catch (const ConfigError& e) {
        throw FormatError(std::string("checkpoint: bad header: ") + e.what(), header_at);
    }
    ck.step = r.get<std::int64_t>("step");
    const auto nl = r.get<std::uint64_t>("loss count");
    if (nl > r.remaining() / sizeof(double)) r.fail("implausible loss count");
    ck.losses = r.doubles(nl, "losses");
    const auto np = r.get<std::uint32_t>("tensor count");
    for (std::uint32_t i = 0; i < np; ++i) {
        NamedTensor t;
        t.name = r.str("tensor name", 1024);
        const auto rank = r.get<std::uint32_t>("rank");
        if (rank > 8) r.fail("implausible rank");
        std::size_t n = 1;
        for (std::uint32_t k = 0; k < rank; ++k) {
            const auto d = r.get<std::int32_t>("dim");
            if (d < 0) r.fail("negative dimension");
            t.shape.push_back(d);
            n *= static_cast<std::size_t>(d);
        }
        if (n > r.remaining() / sizeof(double)) r.fail("tensor " + t.name + " larger than the file");
        t.values = r.doubles(n, "tensor values");
        ck.params.push_back(std::move(t));
    }
    ck.has_optimizer = r.get<std::uint8_t>("optimizer flag") != 0;
    if (ck.has_optimizer) {
        ck.lr = r.get<double>("lr");
        ck.adam_t = r.get<std::int64_t>("adam step");
        const auto nm = r.get<std::uint32_t>("moment count");
        for (std::uint32_t i = 0; i < nm; ++i) {
            MomentBlob m;
            m.name = r.str("moment name", 1024);
            const auto n = r.get<std::uint64_t>("moment length");
            if (n > r.remaining() / (2 * sizeof(double))) r.fail("moment " + m.name + " larger than the file");
            m.m = r.doubles(n, "first moment");
            m.v = r.doubles(n, "second moment");
            ck.moments.push_back(std::move(m));
        }
    }
    r.expect_end();
    return ck;
}

void save_checkpoint(const Checkpoint& ck, const std::string& path) { bin::write_file(path, encode_checkpoint(ck)); }

Checkpoint load_checkpoint(const std::string& path) { return decode_checkpoint(bin::read_file(path)); }

}  // namespace msf
