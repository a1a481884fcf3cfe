#pragma once

// JSON conversions for the config structs shared by checkpoints, run configs,
// and reports.

#include <json.hpp>

#include "iceseg/model.hpp"
#include "iceseg/raster.hpp"

namespace iceseg {

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
    j = {{"num_classes", c.num_classes},
         {"in_channels", c.in_channels},
         {"architecture", arch_name(c.architecture)},
         {"atrous_rates", c.atrous_rates},
         {"base_width", c.base_width},
         {"init", c.init},
         {"seed", c.seed}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
    c.num_classes = j.at("num_classes").get<int>();
    c.in_channels = j.value("in_channels", 3);
    c.architecture = arch_from_name(j.value("architecture", std::string("aspp")));
    c.atrous_rates = j.value("atrous_rates", std::vector<int>{12, 24, 36});
    c.base_width = j.value("base_width", 64);
    c.init = j.value("init", std::string("random"));
    c.seed = j.value("seed", std::uint64_t(0));
}

inline void to_json(nlohmann::json& j, const NormStats& s) {
    j = {{"mean", s.mean}, {"stddev", s.stddev}, {"provenance", s.provenance}};
}

inline void from_json(const nlohmann::json& j, NormStats& s) {
    s.mean = j.at("mean").get<std::array<double, 3>>();
    s.stddev = j.at("stddev").get<std::array<double, 3>>();
    s.provenance = j.value("provenance", std::vector<std::string>{});
}

}  // namespace iceseg
