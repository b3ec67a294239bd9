#pragma once

#include <string>

#include "eegdg/nn.hpp"

namespace eegdg {
namespace nn {

// Builders for the four architectures, each a feature extractor ending in
// Flatten plus a Linear(feature_dim, 3) classifier. Inputs default to
// (60 channels x 1000 samples).
ModelConfig build_deepconvnet(int channels = 60, int samples = 1000,
                              int num_classes = 3);
ModelConfig build_eegnet(int channels = 60, int samples = 1000,
                         int num_classes = 3);
ModelConfig build_resnet1d8(int channels = 60, int samples = 1000,
                            int num_classes = 3);
ModelConfig build_resnet1d18(int channels = 60, int samples = 1000,
                             int num_classes = 3);

ModelConfig build_model(ModelName name, int channels = 60, int samples = 1000,
                        int num_classes = 3);

LayerSpec build_resblock(int c_in, int c_out, int k);

// Exact trainable scalar count of a config (batch-norm running statistics
// are state, not parameters).
long count_params(const ModelConfig& cfg);

// Number of weighted layers (convolutions incl. residual-block bodies plus
// linear layers; projection shortcuts excluded, as in the usual depth count).
int weighted_layer_count(const ModelConfig& cfg);

// Plain-text layer table: kind, output shape, parameter count.
std::string model_summary(const ModelConfig& cfg);

}  // namespace nn
}  // namespace eegdg
