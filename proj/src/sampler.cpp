#include "iceseg/sampler.hpp"

#include <algorithm>
#include <set>

namespace iceseg {

const char* role_name(Role r) {
    switch (r) {
        case Role::Train: return "train";
        case Role::Validation: return "validation";
        case Role::Test: return "test";
    }
    return "?";
}

Role role_from_name(const std::string& s) {
    if (s == "train") return Role::Train;
    if (s == "validation") return Role::Validation;
    if (s == "test") return Role::Test;
    fail("unknown role '" + s + "' (expected train|validation|test)");
}

const char* half_name(Half h) {
    switch (h) {
        case Half::None: return "";
        case Half::E: return "E";
        case Half::W: return "W";
    }
    return "?";
}

Half half_from_name(const std::string& s) {
    if (s.empty() || s == "none") return Half::None;
    if (s == "E" || s == "e") return Half::E;
    if (s == "W" || s == "w") return Half::W;
    fail("unknown scene half '" + s + "' (expected E|W)");
}

void SplitPlan::validate() const {
    std::set<std::string> seen;
    for (const auto& e : entries) {
        require(seen.insert(e.effective_id()).second,
                "SplitPlan: scene " + e.effective_id() + " appears in two roles");
    }
    // a full scene and one of its halves cannot coexist
    for (const auto& e : entries) {
        if (e.half == Half::None) continue;
        require(seen.find(e.scene_id) == seen.end(),
                "SplitPlan: scene " + e.scene_id + " is listed both whole and halved");
    }
}

std::vector<SplitEntry> SplitPlan::with_role(Role r) const {
    std::vector<SplitEntry> out;
    for (const auto& e : entries)
        if (e.role == r) out.push_back(e);
    std::sort(out.begin(), out.end(),
              [](const SplitEntry& a, const SplitEntry& b) { return a.effective_id() < b.effective_id(); });
    return out;
}

SplitPlan SplitPlan::extremeearth_v2(const std::string& group) {
    require(group == "all" || group == "freeze" || group == "melt",
            "extremeearth-v2 preset: group must be all|freeze|melt");
    SplitPlan plan;
    plan.group = group;

    auto add = [&plan](const std::string& id, Role role, Half half = Half::None) {
        plan.entries.push_back({id, role, half});
    };

    // January and July are held-out test scenes in every group.
    add("january", Role::Test);
    add("july", Role::Test);

    if (group == "all") {
        add("february", Role::Train, Half::W);
        add("february", Role::Validation, Half::E);
        add("march", Role::Train);
        add("april", Role::Train);
        add("may", Role::Train);
        add("june", Role::Train, Half::W);
        add("june", Role::Validation, Half::E);
        add("august", Role::Train, Half::W);
        add("august", Role::Validation, Half::E);
        add("september", Role::Train);
        add("october", Role::Train);
        add("november", Role::Train);
        add("december", Role::Train, Half::W);
        add("december", Role::Validation, Half::E);
    } else if (group == "freeze") {
        add("february", Role::Train, Half::W);
        add("february", Role::Validation, Half::E);
        add("march", Role::Train);
        add("april", Role::Test);
        add("may", Role::Test);
        add("june", Role::Test, Half::W);
        add("june", Role::Test, Half::E);
        add("august", Role::Test, Half::W);
        add("august", Role::Test, Half::E);
        add("september", Role::Test);
        add("october", Role::Train);
        add("november", Role::Train);
        add("december", Role::Train, Half::W);
        add("december", Role::Validation, Half::E);
    } else {  // melt
        add("february", Role::Test, Half::W);
        add("february", Role::Test, Half::E);
        add("march", Role::Test);
        add("april", Role::Train);
        add("may", Role::Train);
        add("june", Role::Train, Half::W);
        add("june", Role::Validation, Half::E);
        add("august", Role::Train, Half::W);
        add("august", Role::Validation, Half::E);
        add("september", Role::Train);
        add("october", Role::Test);
        add("november", Role::Test);
        add("december", Role::Test, Half::W);
        add("december", Role::Test, Half::E);
    }
    plan.validate();
    return plan;
}

// ---- scene sampler -----------------------------------------------------------

bool SceneSampler::bad_at(std::int64_t i) const {
    if (!scene_->valid_mask[static_cast<std::size_t>(i)]) return true;
    return scene_->has_labels() && scene_->labels[static_cast<std::size_t>(i)] == kIgnoreLabel;
}

SceneSampler::SceneSampler(const RasterScene& scene) : scene_(&scene) {
    const int h = scene.height, w = scene.width;
    bad_integral_.assign(static_cast<std::size_t>(h + 1) * (w + 1), 0);
    for (int y = 0; y < h; ++y) {
        std::uint32_t rowacc = 0;
        for (int x = 0; x < w; ++x) {
            rowacc += bad_at(static_cast<std::int64_t>(y) * w + x) ? 1u : 0u;
            bad_integral_[static_cast<std::size_t>(y + 1) * (w + 1) + (x + 1)] =
                bad_integral_[static_cast<std::size_t>(y) * (w + 1) + (x + 1)] + rowacc;
        }
    }
}

double SceneSampler::invalid_fraction(int row, int col, int px) const {
    const int w1 = scene_->width + 1;
    const auto& I = bad_integral_;
    const std::uint32_t bad = I[static_cast<std::size_t>(row + px) * w1 + (col + px)] -
                              I[static_cast<std::size_t>(row) * w1 + (col + px)] -
                              I[static_cast<std::size_t>(row + px) * w1 + col] +
                              I[static_cast<std::size_t>(row) * w1 + col];
    return static_cast<double>(bad) / (static_cast<double>(px) * px);
}

bool SceneSampler::draw_corner(const PatchSpec& spec, std::mt19937_64& rng, int& row,
                               int& col) const {
    spec.validate();
    require(scene_->height >= spec.patch_px && scene_->width >= spec.patch_px,
            "sample_patch: scene " + scene_->id + " (" + std::to_string(scene_->width) + "x" +
                std::to_string(scene_->height) + ") is smaller than the patch size " +
                std::to_string(spec.patch_px));
    row = static_cast<int>(rng() % static_cast<std::uint64_t>(scene_->height - spec.patch_px + 1));
    col = static_cast<int>(rng() % static_cast<std::uint64_t>(scene_->width - spec.patch_px + 1));
    return invalid_fraction(row, col, spec.patch_px) <= spec.max_invalid_fraction;
}

Patch SceneSampler::materialize(const PatchSpec& spec, int patch_index, int row, int col) const {
    const int px = spec.patch_px;
    const RasterScene& s = *scene_;
    Patch p;
    p.origin = {s.id, patch_index, row, col};
    p.px = px;
    p.input.resize(static_cast<std::size_t>(3) * px * px);
    p.labels.assign(static_cast<std::size_t>(px) * px, kIgnoreLabel);

    // per-channel mean over the patch's valid pixels
    double sums[3] = {0, 0, 0};
    std::int64_t valid = 0;
    for (int y = 0; y < px; ++y) {
        const std::int64_t srow = static_cast<std::int64_t>(row + y) * s.width + col;
        for (int x = 0; x < px; ++x) {
            if (bad_at(srow + x)) continue;
            ++valid;
            for (int c = 0; c < 3; ++c) sums[c] += s.channels[static_cast<std::size_t>(c)][static_cast<std::size_t>(srow + x)];
        }
    }
    require(valid > 0, "sample_patch: accepted patch has no valid pixels");
    float means[3];
    for (int c = 0; c < 3; ++c) means[c] = static_cast<float>(sums[c] / static_cast<double>(valid));

    for (int y = 0; y < px; ++y) {
        const std::int64_t srow = static_cast<std::int64_t>(row + y) * s.width + col;
        for (int x = 0; x < px; ++x) {
            const bool bad = bad_at(srow + x);
            for (int c = 0; c < 3; ++c) {
                p.input[(static_cast<std::size_t>(c) * px + y) * px + x] =
                    bad ? means[c]
                        : s.channels[static_cast<std::size_t>(c)][static_cast<std::size_t>(srow + x)];
            }
            if (!bad && s.has_labels())
                p.labels[static_cast<std::size_t>(y) * px + x] = s.labels[static_cast<std::size_t>(srow + x)];
        }
    }
    return p;
}

std::optional<Patch> SceneSampler::sample_patch(const PatchSpec& spec, std::mt19937_64& rng) const {
    int row = 0, col = 0;
    if (!draw_corner(spec, rng, row, col)) return std::nullopt;
    return materialize(spec, 0, row, col);
}

std::vector<PatchOrigin> plan_stream(const std::vector<const SceneSampler*>& scenes,
                                     const PatchSpec& spec, std::uint64_t stream_seed) {
    spec.validate();
    std::vector<PatchOrigin> out;
    for (const SceneSampler* ss : scenes) {
        const std::string& id = ss->scene().id;
        for (int i = 0; i < spec.patches_per_scene; ++i) {
            std::mt19937_64 rng(mix_seed(stream_seed, hash_str(id), static_cast<std::uint64_t>(i)));
            int row = 0, col = 0;
            bool ok = false;
            for (int attempt = 0; attempt < 10000; ++attempt) {
                if (ss->draw_corner(spec, rng, row, col)) {
                    ok = true;
                    break;
                }
            }
            require(ok, "plan_stream: 10000 consecutive rejections on scene " + id +
                            "; the scene's invalid fraction is incompatible with "
                            "max_invalid_fraction=" +
                            std::to_string(spec.max_invalid_fraction));
            out.push_back({id, i, row, col});
        }
    }
    std::mt19937_64 shuffle_rng(mix_seed(stream_seed, 0x5AFE5AFEULL));
    std::shuffle(out.begin(), out.end(), shuffle_rng);
    return out;
}

void normalize_patch(Patch& patch, const NormStats& stats) {
    const std::size_t plane = static_cast<std::size_t>(patch.px) * patch.px;
    for (int c = 0; c < 3; ++c) {
        const float m = static_cast<float>(stats.mean[static_cast<std::size_t>(c)]);
        const float s = static_cast<float>(stats.stddev[static_cast<std::size_t>(c)]);
        float* p = patch.input.data() + static_cast<std::size_t>(c) * plane;
        for (std::size_t i = 0; i < plane; ++i) p[i] = (p[i] - m) / s;
    }
}

void denormalize_patch(Patch& patch, const NormStats& stats) {
    const std::size_t plane = static_cast<std::size_t>(patch.px) * patch.px;
    for (int c = 0; c < 3; ++c) {
        const float m = static_cast<float>(stats.mean[static_cast<std::size_t>(c)]);
        const float s = static_cast<float>(stats.stddev[static_cast<std::size_t>(c)]);
        float* p = patch.input.data() + static_cast<std::size_t>(c) * plane;
        for (std::size_t i = 0; i < plane; ++i) p[i] = p[i] * s + m;
    }
}

RasterScene split_scene_half(const RasterScene& scene, Half half, int patch_px) {
    require(half != Half::None, "split_scene_half: half must be E or W");
    require(scene.width >= 2 * patch_px,
            "split_scene_half: scene " + scene.id + " is too narrow (width " +
                std::to_string(scene.width) + " < 2x patch " + std::to_string(patch_px) + ")");
    const int wl = scene.width / 2;  // W = left half, E = right half
    const int x0 = half == Half::W ? 0 : wl;
    const int wout = half == Half::W ? wl : scene.width - wl;

    RasterScene out;
    out.id = scene.id + "-" + half_name(half);
    out.width = wout;
    out.height = scene.height;
    out.pixel_spacing_m = scene.pixel_spacing_m;
    out.channel_names = scene.channel_names;
    out.provenance = scene.provenance;
    out.provenance.push_back("split_scene_half: " + std::string(half_name(half)) +
                             " section of " + scene.id);

    const std::int64_t n = out.pixels();
    out.valid_mask.resize(static_cast<std::size_t>(n));
    for (const auto& ch : scene.channels) {
        (void)ch;
        out.channels.emplace_back(static_cast<std::size_t>(n));
    }
    if (scene.has_labels()) out.labels.resize(static_cast<std::size_t>(n));

    for (int y = 0; y < out.height; ++y) {
        const std::int64_t src = static_cast<std::int64_t>(y) * scene.width + x0;
        const std::int64_t dst = static_cast<std::int64_t>(y) * wout;
        for (std::size_t c = 0; c < scene.channels.size(); ++c)
            std::copy_n(scene.channels[c].begin() + src, wout, out.channels[c].begin() + dst);
        std::copy_n(scene.valid_mask.begin() + src, wout, out.valid_mask.begin() + dst);
        if (scene.has_labels())
            std::copy_n(scene.labels.begin() + src, wout, out.labels.begin() + dst);
    }
    return out;
}

}  // namespace iceseg
