#pragma once

#include <filesystem>
#include <string>

#include "eegdg/models.hpp"
#include "eegdg/nn.hpp"

namespace eegdg {
namespace ckpt {

// Versioned binary checkpoint: magic "EEGDG1", a JSON header carrying the
// model name, input geometry, provenance and the shape table, then raw
// little-endian float32 blobs (parameters, then batch-norm buffers) in
// declaration order.
struct CheckpointMeta {
    std::string model;
    int channels = 60;
    int samples = 1000;
    int num_classes = 3;
    // Subject whose data was entirely absent from this model's source pool
    // (-1 when trained with every subject available, as in plain LOSO).
    int excluded_subject = -1;
};

void save_checkpoint(nn::Network<float>& net, const CheckpointMeta& meta,
                     const std::filesystem::path& path);

CheckpointMeta read_checkpoint_meta(const std::filesystem::path& path);

// Rebuilds the architecture from the header and restores every blob.
nn::Network<float> load_checkpoint(const std::filesystem::path& path,
                                   CheckpointMeta* meta_out = nullptr);

}  // namespace ckpt
}  // namespace eegdg
