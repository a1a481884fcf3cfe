#pragma once

#include <array>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "iceseg/common.hpp"

namespace iceseg {

inline constexpr const char* kChannelNames[3] = {"hh_db", "hv_db", "incidence_deg"};

// Multi-channel raster without georeferencing: backscatter in dB, incidence
// angle in degrees, a validity mask, and an optional label plane.
struct RasterScene {
    std::string id;
    int width = 0, height = 0;
    float pixel_spacing_m = 80.0f;
    std::vector<std::string> channel_names;
    std::vector<std::vector<float>> channels;  // row-major planes, parallel to channel_names
    std::vector<std::uint8_t> valid_mask;      // 1 valid, 0 invalid
    std::vector<std::uint8_t> labels;          // empty when absent; 255 = ignore
    std::vector<std::string> provenance;

    bool has_labels() const { return !labels.empty(); }
    std::int64_t pixels() const { return static_cast<std::int64_t>(width) * height; }

    int channel_index(const std::string& name) const {
        for (std::size_t i = 0; i < channel_names.size(); ++i)
            if (channel_names[i] == name) return static_cast<int>(i);
        return -1;
    }
    const std::vector<float>& channel(const std::string& name) const {
        const int i = channel_index(name);
        require(i >= 0, "scene '" + id + "' has no channel named " + name);
        return channels[static_cast<std::size_t>(i)];
    }

    static RasterScene blank(std::string id, int width, int height, float spacing_m,
                             bool with_labels);
};

// ---- class schemes -----------------------------------------------------------

enum class SchemeTarget { IceWater, OldestType, DominantType };

enum IceType : int { Water = 0, NewIce = 1, Nilas = 2, YoungIce = 3, FirstYearIce = 4, OldIce = 5 };

struct ClassScheme {
    SchemeTarget target = SchemeTarget::IceWater;
    int num_classes = 2;

    static ClassScheme ice_water() { return {SchemeTarget::IceWater, 2}; }
    static ClassScheme oldest_type() { return {SchemeTarget::OldestType, 6}; }
    static ClassScheme dominant_type() { return {SchemeTarget::DominantType, 6}; }
    static ClassScheme from_name(const std::string& name);
    const char* name() const;
    std::vector<std::string> class_names() const;
};

// ---- ice chart polygon tables --------------------------------------------------

inline constexpr std::uint32_t kIgnorePolygonId = 0xFFFFFFFFu;

struct PolygonEntry {
    int type = 0;           // IceType code
    double conc_pct = 0.0;  // partial concentration, (0,100]
};

struct PolygonRow {
    int sa_code = 0;  // oldest type present
    std::vector<PolygonEntry> partials;
    double total_conc_pct = 0.0;
};

struct PolygonTable {
    std::map<std::uint32_t, PolygonRow> rows;

    static PolygonTable read_csv(const std::filesystem::path& path);
    void write_csv(const std::filesystem::path& path) const;
};

struct PolygonIdRaster {
    int width = 0, height = 0;
    std::vector<std::uint32_t> v;
};

// ---- normalization statistics ---------------------------------------------------

struct NormStats {
    std::array<double, 3> mean{}, stddev{};
    std::vector<std::string> provenance;  // contributing scene ids
};

// ---- operations -----------------------------------------------------------------

RasterScene load_scene(const std::filesystem::path& dir);
void write_scene(const RasterScene& scene, const std::filesystem::path& dir);

// 10*log10(x) on valid pixels; non-positive valid pixels become invalid.
void to_decibels(std::vector<float>& plane, std::vector<std::uint8_t>& mask);

// Converts the backscatter channels of a linear-power scene to dB. The
// ingestion pipeline applies this before any downsampling; the order is
// pinned by a regression test.
RasterScene convert_backscatter_to_db(RasterScene scene);

RasterScene downsample_2x(const RasterScene& scene);

std::vector<std::uint8_t> derive_labels(const PolygonIdRaster& ids, const PolygonTable& table,
                                        const ClassScheme& scheme,
                                        double ice_threshold_pct = 10.0);

NormStats compute_norm_stats(const std::vector<const RasterScene*>& scenes);

void save_norm_stats(const NormStats& stats, const std::filesystem::path& path);
NormStats load_norm_stats(const std::filesystem::path& path);

}  // namespace iceseg
