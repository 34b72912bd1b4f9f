#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <string>

#include "msfseg/dataset.hpp"
#include "msfseg/model.hpp"
#include "msfseg/propagation.hpp"

namespace msf {

/// Local HTTP+JSON service over one dataset, one model and one support pool for a
/// single class. Rasters travel as {"h", "w", "dtype": "u8" | "f64le", "data": base64}.
///
///   GET  /status
///   GET  /volumes
///   GET  /volumes/{id}/slices/{z}              intensity raster
///   GET  /volumes/{id}/slices/{z}/mask         stored mask, else ground truth
///   PUT  /volumes/{id}/slices/{z}/mask         store a mask; echoes the stored raster
///   GET  /volumes/{id}/slices/{z}/prediction   latest prediction for the slice
///   GET  /pool                                 entry summaries
///   POST /pool                                 add a slice with its stored/ground-truth/predicted mask
///   GET  /pool/similarity?volume=&slice=       pool ranked against a slice
///   POST /segment                              one slice, {volume, slice, n, d, qc}
///   POST /propagate                            one volume, grows the pool
///
/// Pool mutations are serialized, and a propagation holds the pool exclusively for
/// its whole duration. Model forward passes run one at a time. Every response carries
/// "model_version" and "pool_version". Errors are {"error": {"status", "message"}}.
class Service {
public:
    Service(Dataset data, std::unique_ptr<MsfSegModel> model, int class_id, std::optional<SupportPool> pool = {});
    ~Service();
    Service(const Service&) = delete;
    Service& operator=(const Service&) = delete;

    /// Binds the listening socket; port 0 picks a free port. Returns the bound port.
    int bind(const std::string& host, int port);
    /// Serves until stop(); requires a successful bind().
    void run();
    void stop();

    SupportPool pool_snapshot() const;
    std::string model_version() const;

private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
};

std::string base64_encode(const void* data, std::size_t n);
/// Throws InputError on malformed input.
std::vector<std::uint8_t> base64_decode(const std::string& text);

}  // namespace msf
