#pragma once

#include <optional>
#include <random>
#include <string>
#include <vector>

#include "iceseg/raster.hpp"

namespace iceseg {

struct PatchSpec {
    int patch_px = 768;
    double max_invalid_fraction = 0.30;
    int patches_per_scene = 200;
    std::uint64_t seed = 0;

    void validate() const {
        require(patch_px > 0 && patch_px % 32 == 0, "PatchSpec: patch_px must be a positive multiple of 32");
        require(max_invalid_fraction >= 0.0 && max_invalid_fraction < 1.0,
                "PatchSpec: max_invalid_fraction must be in [0,1)");
        require(patches_per_scene > 0, "PatchSpec: patches_per_scene must be positive");
    }
};

enum class Role { Train, Validation, Test };
enum class Half { None, E, W };

const char* role_name(Role r);
Role role_from_name(const std::string& s);
const char* half_name(Half h);
Half half_from_name(const std::string& s);

struct SplitEntry {
    std::string scene_id;
    Role role = Role::Train;
    Half half = Half::None;

    // the id a half-scene is known by downstream, e.g. "february-E"
    std::string effective_id() const {
        return half == Half::None ? scene_id : scene_id + "-" + half_name(half);
    }
};

struct SplitPlan {
    std::string group = "custom";
    std::vector<SplitEntry> entries;

    void validate() const;
    std::vector<SplitEntry> with_role(Role r) const;

    // Table-1 seasonal preset; group is all|freeze|melt.
    static SplitPlan extremeearth_v2(const std::string& group);
};

struct PatchOrigin {
    std::string scene_id;
    int patch_index = 0;
    int row = 0, col = 0;

    bool operator==(const PatchOrigin&) const = default;
};

struct Patch {
    PatchOrigin origin;
    int px = 0;
    std::vector<float> input;          // 3 x px x px, raw channel values
    std::vector<std::uint8_t> labels;  // px x px, 255 = ignore
};

// Per-scene sampling state: a summed-area table of the invalid-or-land plane
// makes the acceptance test O(1) per draw.
class SceneSampler {
public:
    explicit SceneSampler(const RasterScene& scene);

    const RasterScene& scene() const { return *scene_; }

    double invalid_fraction(int row, int col, int px) const;

    // One uniform draw of a top-left corner; nullopt = rejected.
    std::optional<Patch> sample_patch(const PatchSpec& spec, std::mt19937_64& rng) const;

    bool draw_corner(const PatchSpec& spec, std::mt19937_64& rng, int& row, int& col) const;
    Patch materialize(const PatchSpec& spec, int patch_index, int row, int col) const;

private:
    bool bad_at(std::int64_t i) const;
    const RasterScene* scene_;
    std::vector<std::uint32_t> bad_integral_;  // (h+1) x (w+1)
};

// Plans one ordered stream: exactly patches_per_scene accepted corners per
// scene (rejections resampled), then a global shuffle. Each patch's RNG is
// derived from (stream_seed, scene id, patch index) so results are
// independent of scheduling.
std::vector<PatchOrigin> plan_stream(const std::vector<const SceneSampler*>& scenes,
                                     const PatchSpec& spec, std::uint64_t stream_seed);

void normalize_patch(Patch& patch, const NormStats& stats);
void denormalize_patch(Patch& patch, const NormStats& stats);

RasterScene split_scene_half(const RasterScene& scene, Half half, int patch_px);

}  // namespace iceseg
