#include "msfseg/service.hpp"

#include <httplib.h>

#include <bit>
#include <cstring>
#include <map>
#include <mutex>
#include <shared_mutex>

#include "msfseg/errors.hpp"

namespace msf {

static_assert(std::endian::native == std::endian::little, "f64le rasters are copied byte for byte");

namespace {

constexpr char kAlphabet[] = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";

struct HttpError : std::runtime_error {
    int status;
    HttpError(int s, const std::string& msg) : std::runtime_error(msg), status(s) {}
};

using Key = std::pair<std::string, int>;

struct Prediction {
    Mask2D mask;
    double fg_confidence = 0.0;
    QCVerdict qc;
    std::uint64_t pool_version = 0;
    std::string origin;  // "segment" or "propagate"
};

Json raster(const Mask2D& m) {
    return {{"h", m.h}, {"w", m.w}, {"dtype", "u8"}, {"data", base64_encode(m.bits.data(), m.bits.size())}};
}

Json raster(const Image2D& img) {
    return {{"h", img.h},
            {"w", img.w},
            {"dtype", "f64le"},
            {"data", base64_encode(img.pixels.data(), img.pixels.size() * sizeof(double))}};
}

Mask2D mask_from_json(const Json& j) {
    if (!j.is_object()) throw InputError("mask must be a raster object");
    reject_unknown_keys(j, {"h", "w", "dtype", "data"}, "mask");
    const int h = j.at("h").get<int>(), w = j.at("w").get<int>();
    if (j.value("dtype", std::string("u8")) != "u8") throw InputError("mask dtype must be u8");
    if (h <= 0 || w <= 0) throw InputError("mask shape must be positive");
    Mask2D m(h, w);
    const auto bytes = base64_decode(j.at("data").get<std::string>());
    if (bytes.size() != m.size())
        throw InputError("mask data holds " + std::to_string(bytes.size()) + " bytes, expected " +
                         std::to_string(m.size()));
    m.bits = bytes;
    validate(m);
    return m;
}

Json qc_json(const QCVerdict& v) {
    return {{"pass", v.pass}, {"area_ratio", v.area_ratio}, {"reason", v.reason}};
}

PropagationConfig propagation_config(const Json& body) {
    PropagationConfig pc;
    pc.n = body.value("n", 1);
    pc.d = body.value("d", 1);
    if (pc.n < 1 || pc.d < 1) throw InputError("n and d must be >= 1");
    pc.qc.enabled = body.value("qc", true);
    pc.qc.tau = body.value("tau", pc.qc.tau);
    pc.qc.ratio_lo = body.value("ratio_lo", pc.qc.ratio_lo);
    pc.qc.ratio_hi = body.value("ratio_hi", pc.qc.ratio_hi);
    pc.qc.validate();
    return pc;
}

}  // namespace

std::string base64_encode(const void* data, std::size_t n) {
    const auto* p = static_cast<const std::uint8_t*>(data);
    std::string out;
    out.reserve((n + 2) / 3 * 4);
    for (std::size_t i = 0; i < n; i += 3) {
        const std::uint32_t b = (std::uint32_t{p[i]} << 16) | (i + 1 < n ? std::uint32_t{p[i + 1]} << 8 : 0) |
                                (i + 2 < n ? std::uint32_t{p[i + 2]} : 0);
        out += kAlphabet[(b >> 18) & 63];
        out += kAlphabet[(b >> 12) & 63];
        out += i + 1 < n ? kAlphabet[(b >> 6) & 63] : '=';
        out += i + 2 < n ? kAlphabet[b & 63] : '=';
    }
    return out;
}

std::vector<std::uint8_t> base64_decode(const std::string& text) {
    if (text.size() % 4 != 0) throw InputError("base64 length must be a multiple of 4");
    auto value = [](char c) -> int {
        if (c >= 'A' && c <= 'Z') return c - 'A';
        if (c >= 'a' && c <= 'z') return c - 'a' + 26;
        if (c >= '0' && c <= '9') return c - '0' + 52;
        if (c == '+') return 62;
        if (c == '/') return 63;
        return -1;
    };
    std::vector<std::uint8_t> out;
    out.reserve(text.size() / 4 * 3);
    for (std::size_t i = 0; i < text.size(); i += 4) {
        const bool last = i + 4 == text.size();
        const int pad = last ? (text[i + 3] == '=') + (text[i + 2] == '=') : 0;
        if (pad == 1 && text[i + 2] == '=') throw InputError("malformed base64 padding");
        std::uint32_t b = 0;
        for (int k = 0; k < 4; ++k) {
            const int v = k >= 4 - pad ? 0 : value(text[i + k]);
            if (v < 0) throw InputError("invalid base64 character");
            b = (b << 6) | static_cast<std::uint32_t>(v);
        }
        out.push_back(static_cast<std::uint8_t>(b >> 16));
        if (pad < 2) out.push_back(static_cast<std::uint8_t>(b >> 8));
        if (pad < 1) out.push_back(static_cast<std::uint8_t>(b));
    }
    return out;
}

struct Service::Impl {
    Dataset data;
    std::unique_ptr<MsfSegModel> model;
    ModelSegmenter seg;
    int class_id;
    std::string version;

    // Lock order: pool before forward. Pool readers (segment, listing) share; pool
    // writers (add, propagate) are exclusive.
    mutable std::shared_mutex pool_mu;
    SupportPool pool;
    std::mutex forward_mu;

    mutable std::mutex store_mu;
    std::map<Key, Mask2D> masks;
    std::map<Key, Prediction> predictions;

    httplib::Server srv;
    bool bound = false;

    Impl(Dataset d, std::unique_ptr<MsfSegModel> m, int cls, std::optional<SupportPool> p)
        : data(std::move(d)), model(std::move(m)), seg(*model), class_id(cls), pool(seg.fingerprint()) {
        char buf[17];
        std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(model->params().fingerprint()));
        version = buf;
        bool known = false;
        for (const auto& c : data.classes) known |= c.id == cls;
        if (!known) throw ConfigError("service: class " + std::to_string(cls) + " not in the dataset");
        if (p) {
            p->check_fingerprint(seg.fingerprint());
            pool = std::move(*p);
        }
        routes();
    }

    std::uint64_t pool_version() const {
        std::shared_lock lk(pool_mu);
        return pool.version();
    }

    Json stamp(Json j, std::uint64_t pv) const {
        j["model_version"] = version;
        j["pool_version"] = pv;
        return j;
    }

    const Volume& volume(const std::string& id) const {
        const Volume* v = data.find(id);
        if (!v) throw HttpError(404, "volume " + id + " not found");
        return *v;
    }

    int slice_index(const Volume& v, const std::string& text) const {
        int z = 0;
        try {
            std::size_t used = 0;
            z = std::stoi(text, &used);
            if (used != text.size()) throw std::invalid_argument(text);
        } catch (const std::exception&) {
            throw HttpError(400, "slice index must be an integer");
        }
        if (z < 0 || z >= v.depth) throw HttpError(404, "slice " + text + " outside volume " + v.id);
        return z;
    }

    static Json body_json(const httplib::Request& req) {
        if (req.body.empty()) return Json::object();
        try {
            Json j = Json::parse(req.body);
            if (!j.is_object()) throw InputError("request body must be a JSON object");
            return j;
        } catch (const nlohmann::json::exception& e) {
            throw InputError(std::string("invalid JSON body: ") + e.what());
        }
    }

    // Stored annotation first, then ground truth. Empty optional when neither exists.
    std::optional<std::pair<Mask2D, std::string>> reference_mask(const Volume& v, int z) const {
        {
            std::lock_guard lk(store_mu);
            if (auto it = masks.find({v.id, z}); it != masks.end()) return std::pair{it->second, std::string("stored")};
        }
        if (v.has_masks) return std::pair{v.mask(z, class_id), std::string("ground_truth")};
        return std::nullopt;
    }

    PooledDescriptor describe(const Image2D& img) {
        std::lock_guard lk(forward_mu);
        return seg.describe(img);
    }

    template <class F>
    void handle(httplib::Server& (httplib::Server::*method)(const std::string&, httplib::Server::Handler),
                const std::string& pattern, F f) {
        (srv.*method)(pattern, [this, f](const httplib::Request& req, httplib::Response& res) {
            int status = 200;
            Json out;
            try {
                out = f(req);
            } catch (const HttpError& e) {
                status = e.status;
                out = {{"error", {{"status", status}, {"message", e.what()}}}};
            } catch (const InputError& e) {
                status = 400;
                out = {{"error", {{"status", status}, {"message", e.what()}}}};
            } catch (const ConfigError& e) {
                status = 400;
                out = {{"error", {{"status", status}, {"message", e.what()}}}};
            } catch (const nlohmann::json::exception& e) {
                status = 400;
                out = {{"error", {{"status", status}, {"message", e.what()}}}};
            } catch (const std::exception& e) {
                status = 500;
                out = {{"error", {{"status", status}, {"message", e.what()}}}};
            }
            if (!out.contains("model_version")) out = stamp(std::move(out), pool_version());
            res.status = status;
            res.set_content(out.dump(), "application/json");
        });
    }

    void routes() {
        using S = httplib::Server;
        const std::string slice = R"(/volumes/([^/]+)/slices/(\d+))";

        handle(&S::Get, "/status", [this](const httplib::Request&) {
            std::shared_lock lk(pool_mu);
            return stamp({{"class", class_id},
                          {"volumes", data.volumes.size()},
                          {"pool_size", pool.size()},
                          {"pool_ground_truth", pool.count(Provenance::ground_truth)},
                          {"pool_predicted", pool.count(Provenance::predicted)}},
                         pool.version());
        });

        handle(&S::Get, "/volumes", [this](const httplib::Request&) {
            Json vols = Json::array();
            for (const auto& v : data.volumes)
                vols.push_back({{"id", v.id},
                                {"depth", v.depth},
                                {"height", v.height},
                                {"width", v.width},
                                {"has_masks", v.has_masks}});
            return Json{{"volumes", vols}};
        });

        handle(&S::Get, slice, [this](const httplib::Request& req) {
            const Volume& v = volume(req.matches[1]);
            const int z = slice_index(v, req.matches[2]);
            return Json{{"volume", v.id}, {"slice", z}, {"image", raster(v.slice(z))}};
        });

        handle(&S::Get, slice + "/mask", [this](const httplib::Request& req) {
            const Volume& v = volume(req.matches[1]);
            const int z = slice_index(v, req.matches[2]);
            const auto m = reference_mask(v, z);
            if (!m) throw HttpError(404, "no mask for " + v.id + " slice " + std::to_string(z));
            return Json{{"volume", v.id}, {"slice", z}, {"source", m->second}, {"mask", raster(m->first)}};
        });

        handle(&S::Put, slice + "/mask", [this](const httplib::Request& req) {
            const Volume& v = volume(req.matches[1]);
            const int z = slice_index(v, req.matches[2]);
            const Json body = body_json(req);
            const Mask2D m = mask_from_json(body.contains("mask") ? body.at("mask") : body);
            if (m.h != v.height || m.w != v.width)
                throw InputError("mask is " + std::to_string(m.h) + "x" + std::to_string(m.w) + ", slice is " +
                                 std::to_string(v.height) + "x" + std::to_string(v.width));
            {
                std::lock_guard lk(store_mu);
                masks[{v.id, z}] = m;
            }
            return Json{{"volume", v.id}, {"slice", z}, {"source", "stored"}, {"mask", raster(m)}};
        });

        handle(&S::Get, slice + "/prediction", [this](const httplib::Request& req) {
            const Volume& v = volume(req.matches[1]);
            const int z = slice_index(v, req.matches[2]);
            std::lock_guard lk(store_mu);
            const auto it = predictions.find({v.id, z});
            if (it == predictions.end()) throw HttpError(404, "no prediction for " + v.id + " slice " + std::to_string(z));
            const Prediction& p = it->second;
            return Json{{"volume", v.id},
                        {"slice", z},
                        {"origin", p.origin},
                        {"predicted_with_pool_version", p.pool_version},
                        {"fg_confidence", p.fg_confidence},
                        {"qc", qc_json(p.qc)},
                        {"mask", raster(p.mask)}};
        });

        handle(&S::Get, "/pool", [this](const httplib::Request&) {
            std::shared_lock lk(pool_mu);
            Json entries = Json::array();
            for (const auto& e : pool.entries())
                entries.push_back({{"ordinal", e.ordinal},
                                   {"volume", e.source.volume},
                                   {"slice", e.source.slice},
                                   {"provenance", provenance_name(e.provenance)},
                                   {"sequence", e.sequence},
                                   {"area", e.mask.area()}});
            return stamp({{"size", pool.size()}, {"entries", entries}}, pool.version());
        });

        // {volume, slice, d?, source?: "auto" | "prediction"}. With "auto" the stored
        // annotation or the ground truth is pooled as ground truth.
        handle(&S::Post, "/pool", [this](const httplib::Request& req) {
            const Json body = body_json(req);
            reject_unknown_keys(body, {"volume", "slice", "d", "source"}, "POST /pool");
            const Volume& v = volume(body.at("volume").get<std::string>());
            const int first = body.at("slice").get<int>();
            const int d = body.value("d", 1);
            const std::string source = body.value("source", std::string("auto"));
            if (d < 1) throw InputError("d must be >= 1");
            if (source != "auto" && source != "prediction") throw InputError("source must be auto or prediction");
            if (first < 0 || first + d > v.depth) throw HttpError(404, "slices outside volume " + v.id);
            std::vector<PoolEntry> batch;
            for (int z = first; z < first + d; ++z) {
                PoolEntry e;
                e.slice = v.slice(z);
                e.source = {v.id, z};
                if (source == "prediction") {
                    std::lock_guard lk(store_mu);
                    const auto it = predictions.find({v.id, z});
                    if (it == predictions.end()) throw HttpError(404, "no prediction for " + v.id + " slice " + std::to_string(z));
                    e.mask = it->second.mask;
                    e.provenance = Provenance::predicted;
                } else {
                    auto m = reference_mask(v, z);
                    if (!m) throw HttpError(404, "no mask for " + v.id + " slice " + std::to_string(z));
                    e.mask = std::move(m->first);
                }
                e.descriptor = describe(e.slice);
                batch.push_back(std::move(e));
            }
            std::unique_lock lk(pool_mu);
            for (const auto& e : batch)
                if (pool.contains(e.source))
                    throw HttpError(409, e.source.volume + " slice " + std::to_string(e.source.slice) + " is already pooled");
            const int seq = pool.new_sequence();
            for (auto& e : batch) e.sequence = seq;
            const std::uint64_t ordinal = pool.add(std::move(batch));
            return stamp({{"added", d}, {"first_ordinal", ordinal}, {"size", pool.size()}}, pool.version());
        });

        handle(&S::Get, "/pool/similarity", [this](const httplib::Request& req) {
            if (!req.has_param("volume") || !req.has_param("slice"))
                throw InputError("volume and slice query parameters are required");
            const Volume& v = volume(req.get_param_value("volume"));
            const int z = slice_index(v, req.get_param_value("slice"));
            const PooledDescriptor q = describe(v.slice(z));
            std::shared_lock lk(pool_mu);
            Json ranked = Json::array();
            for (std::size_t i : rank_pool(pool, q)) {
                const auto& e = pool[i];
                ranked.push_back({{"ordinal", e.ordinal},
                                  {"volume", e.source.volume},
                                  {"slice", e.source.slice},
                                  {"provenance", provenance_name(e.provenance)},
                                  {"similarity", cosine_similarity(q, e.descriptor)}});
            }
            return stamp({{"volume", v.id}, {"slice", z}, {"ranking", ranked}}, pool.version());
        });

        handle(&S::Post, "/segment", [this](const httplib::Request& req) {
            const Json body = body_json(req);
            reject_unknown_keys(body, {"volume", "slice", "n", "d", "qc", "tau", "ratio_lo", "ratio_hi"}, "POST /segment");
            const Volume& v = volume(body.at("volume").get<std::string>());
            const int z = body.at("slice").get<int>();
            if (z < 0 || z >= v.depth) throw HttpError(404, "slice outside volume " + v.id);
            const PropagationConfig pc = propagation_config(body);
            std::shared_lock lk(pool_mu);
            if (pool.empty()) throw HttpError(409, "the support pool is empty");
            SliceOutcome o;
            {
                std::lock_guard fk(forward_mu);
                o = segment_slice(v.slice(z), pool, seg, pc);
            }
            Json supports = Json::array();
            for (std::size_t g = 0; g < o.selection.groups.size(); ++g) {
                const auto& src = pool[o.selection.groups[g].front()].source;
                supports.push_back({{"volume", src.volume},
                                    {"first", src.slice},
                                    {"d", o.selection.groups[g].size()},
                                    {"similarity", o.selection.similarity[g]}});
            }
            Json out{{"volume", v.id},
                     {"slice", z},
                     {"requested_n", pc.n},
                     {"used_n", o.selection.groups.size()},
                     {"supports", supports},
                     {"fg_confidence", o.result.fg_confidence},
                     {"qc", qc_json(o.qc)},
                     {"mask", raster(o.result.mask)}};
            if (o.selection.truncated())
                out["note"] = "pool holds fewer usable supports than requested; used " +
                              std::to_string(o.selection.groups.size());
            {
                std::lock_guard sk(store_mu);
                predictions[{v.id, z}] = {o.result.mask, o.result.fg_confidence, o.qc, pool.version(), "segment"};
            }
            return stamp(std::move(out), pool.version());
        });

        handle(&S::Post, "/propagate", [this](const httplib::Request& req) {
            const Json body = body_json(req);
            reject_unknown_keys(body, {"volume", "n", "d", "qc", "tau", "ratio_lo", "ratio_hi"}, "POST /propagate");
            const Volume& v = volume(body.at("volume").get<std::string>());
            const PropagationConfig pc = propagation_config(body);
            std::unique_lock lk(pool_mu);
            if (pool.empty()) throw HttpError(409, "the support pool is empty");
            const std::uint64_t before = pool.version();
            VolumeResult r;
            {
                std::lock_guard fk(forward_mu);
                r = segment_volume(v, pool, seg, pc);
            }
            Json slices = Json::array();
            {
                std::lock_guard sk(store_mu);
                for (int z = 0; z < v.depth; ++z) {
                    const auto& o = r.slices[static_cast<std::size_t>(z)];
                    predictions[{v.id, z}] = {o.result.mask, o.result.fg_confidence, o.qc, before, "propagate"};
                    slices.push_back({{"slice", z},
                                      {"area", o.result.mask.area()},
                                      {"fg_confidence", o.result.fg_confidence},
                                      {"qc", qc_json(o.qc)}});
                }
            }
            return stamp({{"volume", v.id},
                          {"pool_before", r.pool_before},
                          {"pool_after", pool.size()},
                          {"added", r.added},
                          {"rejected", r.rejected},
                          {"already_pooled", r.already_pooled},
                          {"slices", slices}},
                         pool.version());
        });
    }
};

Service::Service(Dataset data, std::unique_ptr<MsfSegModel> model, int class_id, std::optional<SupportPool> pool) {
    if (!model) throw ConfigError("service: no model");
    impl_ = std::make_unique<Impl>(std::move(data), std::move(model), class_id, std::move(pool));
}

Service::~Service() { stop(); }

int Service::bind(const std::string& host, int port) {
    int bound = port;
    if (port == 0) {
        bound = impl_->srv.bind_to_any_port(host);
        if (bound <= 0) throw InputError("cannot bind " + host);
    } else if (!impl_->srv.bind_to_port(host, port)) {
        throw InputError("cannot bind " + host + ":" + std::to_string(port));
    }
    impl_->bound = true;
    return bound;
}

void Service::run() {
    if (!impl_->bound) throw ConfigError("service: bind() before run()");
    impl_->srv.listen_after_bind();
}

void Service::stop() {
    if (impl_) impl_->srv.stop();
}

SupportPool Service::pool_snapshot() const {
    std::shared_lock lk(impl_->pool_mu);
    return impl_->pool;
}

std::string Service::model_version() const { return impl_->version; }

}  // namespace msf
