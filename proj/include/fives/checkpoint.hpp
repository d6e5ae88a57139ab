#pragma once

#include <fstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "fives/autodiff.hpp"
#include "fives/data.hpp"
#include "fives/version.hpp"

namespace fives::ad {

inline nlohmann::ordered_json params_to_json(const ParamStore& params) {
    nlohmann::ordered_json j;
    j["format_version"] = kCheckpointFormatVersion;
    nlohmann::ordered_json list = nlohmann::ordered_json::array();
    for (std::size_t i = 0; i < params.size(); ++i) {
        const auto& e = params.entry(i);
        nlohmann::ordered_json pj;
        pj["name"] = e.name;
        pj["shape"] = e.value.shape();
        pj["values"] = std::vector<double>(e.value.data(), e.value.data() + e.value.size());
        list.push_back(std::move(pj));
    }
    j["params"] = std::move(list);
    return j;
}

inline ParamStore params_from_json(const nlohmann::json& j) {
    if (!j.contains("format_version") ||
        j.at("format_version").get<int>() != kCheckpointFormatVersion)
        throw ParseError("checkpoint: unsupported format_version");
    ParamStore params;
    for (const auto& pj : j.at("params")) {
        auto shape = pj.at("shape").get<std::vector<std::size_t>>();
        auto values = pj.at("values").get<std::vector<double>>();
        params.add(pj.at("name").get<std::string>(),
                   Tensor::from_values(std::move(shape), std::move(values)));
    }
    return params;
}

inline void save_params(const ParamStore& params, const std::string& path) {
    data::write_text_atomic(path, params_to_json(params).dump());
}

inline ParamStore load_params(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ParseError("cannot open checkpoint: " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ParseError("checkpoint parse error: " + std::string(e.what()));
    }
    return params_from_json(j);
}

}  // namespace fives::ad
