#pragma once

#include <fstream>
#include <string>

#include <nlohmann/json.hpp>

#include "speechre/autodiff.hpp"
#include "speechre/common.hpp"
#include "speechre/tensor.hpp"
#include "speechre/vocab.hpp"

namespace speechre {

inline constexpr const char* kCheckpointFormat = "speechre-checkpoint";
inline constexpr int kCheckpointVersion = 1;

inline nlohmann::json params_to_json(const ad::ParamStore& params) {
    nlohmann::json out = nlohmann::json::object();
    for (const auto& [name, tensor] : params) {
        out[name] = {{"shape", tensor.shape}, {"data", tensor.data}};
    }
    return out;
}

inline void params_from_json(const nlohmann::json& j, ad::ParamStore& params) {
    if (!j.is_object()) throw IngestError("checkpoint: params must be an object");
    for (const auto& [name, entry] : j.items()) {
        if (!entry.is_object() || !entry.contains("shape") || !entry.contains("data")) {
            throw IngestError("checkpoint: parameter '" + name + "' missing shape/data");
        }
        Tensor t;
        t.shape = entry.at("shape").get<std::vector<std::size_t>>();
        t.data = entry.at("data").get<std::vector<double>>();
        if (Tensor::numel(t.shape) != t.data.size()) {
            throw IngestError("checkpoint: parameter '" + name + "' shape/data size mismatch");
        }
        params.add(name, std::move(t));
    }
}

struct LoadedCheckpoint {
    nlohmann::json config;  // effective run configuration at save time
    Vocabulary vocab;
    ad::ParamStore params;
    long long step = 0;
};

inline void save_checkpoint(const std::string& path, const nlohmann::json& config,
                            const Vocabulary& vocab, const ad::ParamStore& params,
                            long long step) {
    nlohmann::json j{{"format", kCheckpointFormat},
                     {"version", kCheckpointVersion},
                     {"step", step},
                     {"config", config},
                     {"vocab", vocab.to_json()},
                     {"params", params_to_json(params)}};
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open for writing: " + path);
    f << j.dump();
    f << '\n';
    if (!f) throw IoError("write failed: " + path);
}

inline LoadedCheckpoint load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open: " + path);
    nlohmann::json j;
    try {
        f >> j;
    } catch (const nlohmann::json::exception& e) {
        throw IngestError("checkpoint '" + path + "' is not valid JSON: " + e.what());
    }
    if (!j.is_object() || j.value("format", std::string{}) != kCheckpointFormat) {
        throw IngestError("checkpoint '" + path + "' has unrecognized format");
    }
    const int version = j.value("version", -1);
    if (version != kCheckpointVersion) {
        throw IngestError("checkpoint '" + path + "' has version " + std::to_string(version) +
                          ", expected " + std::to_string(kCheckpointVersion));
    }
    for (const char* key : {"step", "config", "vocab", "params"}) {
        if (!j.contains(key)) {
            throw IngestError("checkpoint '" + path + "' missing field '" + key + "'");
        }
    }
    LoadedCheckpoint out;
    out.config = j.at("config");
    out.vocab = Vocabulary::from_json(j.at("vocab"));
    params_from_json(j.at("params"), out.params);
    out.step = j.at("step").get<long long>();
    return out;
}

}  // namespace speechre
