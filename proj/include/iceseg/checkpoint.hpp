#pragma once

#include <filesystem>
#include <optional>

#include "iceseg/model.hpp"
#include "iceseg/raster.hpp"

namespace iceseg {

// Checkpoint container: 8-byte magic, u64 manifest length, UTF-8 JSON
// manifest, then one raw little-endian f32 blob per entry concatenated in
// manifest order. Byte offsets in the manifest are relative to the blob start.

struct HistorySummary {
    int epochs = 0;
    int best_epoch = -1;
    double best_val_loss = 0.0;
};

struct CheckpointMeta {
    ModelConfig config;
    std::optional<NormStats> norm_stats;
    std::optional<HistorySummary> history;
    std::string run_config_json;  // verbatim run config, when produced by a run
};

void save_checkpoint(Net& net, const CheckpointMeta& meta, const std::filesystem::path& path);

struct LoadedCheckpoint {
    Net net;
    CheckpointMeta meta;
};

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path);

// Strict variant: the file must describe exactly the given model.
void load_checkpoint_into(Net& net, const std::filesystem::path& path);

// Replaces the encoder subtree (parameters and BN statistics) from a blob in
// the checkpoint format; the decoder is untouched.
void import_encoder_weights(Net& net, const std::filesystem::path& path);

}  // namespace iceseg
