#include "eegdg/models.hpp"

#include <sstream>
#include <stdexcept>

namespace eegdg {
namespace nn {

ModelName parse_model_name(const std::string& s) {
    if (s == "DeepConvNet" || s == "deepconvnet") return ModelName::DeepConvNet;
    if (s == "EEGNet" || s == "eegnet") return ModelName::EEGNet;
    if (s == "ResNet1D-8" || s == "resnet1d8") return ModelName::ResNet1D8;
    if (s == "ResNet1D-18" || s == "resnet1d18") return ModelName::ResNet1D18;
    throw std::invalid_argument(
        "unknown model '" + s +
        "' (expected DeepConvNet, EEGNet, ResNet1D-8 or ResNet1D-18)");
}

LayerSpec build_resblock(int c_in, int c_out, int k) {
    if (c_in < 1 || c_out < 1 || k < 1) {
        throw std::invalid_argument("build_resblock: c_in, c_out, k must be >= 1");
    }
    if (k % 2 == 0) {
        throw std::invalid_argument(
            "build_resblock: kernel must be odd to preserve length, got " +
            std::to_string(k));
    }
    LayerSpec s;
    s.kind = LayerKind::ResBlock;
    s.c_in = c_in;
    s.c_out = c_out;
    s.k = k;
    return s;
}

namespace {

void finish(ModelConfig& cfg) {
    cfg.feature_dim = infer_feature_dim(cfg);
    cfg.classifier = LayerSpec::linear(cfg.feature_dim, cfg.num_classes);
}

}  // namespace

// Four convolution/max-pool blocks; block 1 splits into a temporal
// convolution followed by a spatial convolution spanning every electrode.
ModelConfig build_deepconvnet(int channels, int samples, int num_classes) {
    ModelConfig cfg;
    cfg.name = ModelName::DeepConvNet;
    cfg.layout = InputLayout::Grid2d;
    cfg.in_channels = channels;
    cfg.in_samples = samples;
    cfg.num_classes = num_classes;
    auto& f = cfg.feature_layers;

    f.push_back(LayerSpec::conv2d(1, 25, 1, 10));
    f.push_back(LayerSpec::conv2d(25, 25, channels, 1));
    f.push_back(LayerSpec::batch_norm(25));
    f.push_back(LayerSpec::elu());
    f.push_back(LayerSpec::maxpool2(1, 3));

    const int widths[3][2] = {{25, 50}, {50, 100}, {100, 200}};
    for (auto [ci, co] : widths) {
        f.push_back(LayerSpec::dropout(0.5));
        f.push_back(LayerSpec::conv2d(ci, co, 1, 10));
        f.push_back(LayerSpec::batch_norm(co));
        f.push_back(LayerSpec::elu());
        f.push_back(LayerSpec::maxpool2(1, 3));
    }
    f.push_back(LayerSpec::flatten());
    finish(cfg);
    return cfg;
}

// Temporal convolution, depthwise spatial convolution over all electrodes,
// then a depthwise separable convolution; average pooling throughout.
ModelConfig build_eegnet(int channels, int samples, int num_classes) {
    ModelConfig cfg;
    cfg.name = ModelName::EEGNet;
    cfg.layout = InputLayout::Grid2d;
    cfg.in_channels = channels;
    cfg.in_samples = samples;
    cfg.num_classes = num_classes;
    auto& f = cfg.feature_layers;

    const int f1 = 8, depth = 2, f2 = 16;
    f.push_back(LayerSpec::conv2d(1, f1, 1, 64, 0, 32));
    f.push_back(LayerSpec::batch_norm(f1));
    f.push_back(LayerSpec::depthwise(f1, depth, channels, 1));
    f.push_back(LayerSpec::batch_norm(f1 * depth));
    f.push_back(LayerSpec::elu());
    f.push_back(LayerSpec::avgpool2(1, 4));
    f.push_back(LayerSpec::dropout(0.5));
    f.push_back(LayerSpec::separable(f1 * depth, f2, 1, 1, 16, 0, 8));
    f.push_back(LayerSpec::batch_norm(f2));
    f.push_back(LayerSpec::elu());
    f.push_back(LayerSpec::avgpool2(1, 8));
    f.push_back(LayerSpec::dropout(0.5));
    f.push_back(LayerSpec::flatten());
    finish(cfg);
    return cfg;
}

namespace {

// Shared ResNet1D scaffold: stem convolution, residual blocks with max
// pooling between stages, final average pool sized to land every model's
// feature vector in the same range.
ModelConfig resnet_scaffold(ModelName name, int channels, int samples,
                            int num_classes,
                            const std::vector<LayerSpec>& blocks,
                            const std::vector<int>& pool_after) {
    ModelConfig cfg;
    cfg.name = name;
    cfg.layout = InputLayout::Channels1d;
    cfg.in_channels = channels;
    cfg.in_samples = samples;
    cfg.num_classes = num_classes;
    auto& f = cfg.feature_layers;

    f.push_back(LayerSpec::conv1d(channels, 32, 7, 3, 2));
    f.push_back(LayerSpec::batch_norm(32));
    f.push_back(LayerSpec::elu());
    f.push_back(LayerSpec::maxpool1(4));

    for (std::size_t i = 0; i < blocks.size(); ++i) {
        f.push_back(blocks[i]);
        if (pool_after[i] > 1) f.push_back(LayerSpec::maxpool1(pool_after[i]));
    }

    // Final pooling chosen so the flattened feature vector stays comparable
    // in size across the four models.
    Dims d = input_dims(cfg);
    for (const auto& l : f) d = propagate(l, d, cfg.layout);
    const int final_pool = std::max(1, d.t / 5);
    f.push_back(LayerSpec::avgpool1(final_pool));
    f.push_back(LayerSpec::flatten());
    finish(cfg);
    return cfg;
}

}  // namespace

ModelConfig build_resnet1d8(int channels, int samples, int num_classes) {
    std::vector<LayerSpec> blocks = {
        build_resblock(32, 64, 7),
        build_resblock(64, 128, 7),
        build_resblock(128, 256, 7),
    };
    return resnet_scaffold(ModelName::ResNet1D8, channels, samples, num_classes,
                           blocks, {2, 2, 1});
}

ModelConfig build_resnet1d18(int channels, int samples, int num_classes) {
    std::vector<LayerSpec> blocks = {
        build_resblock(32, 32, 3),  build_resblock(32, 32, 3),
        build_resblock(32, 64, 3),  build_resblock(64, 64, 3),
        build_resblock(64, 128, 3), build_resblock(128, 128, 3),
        build_resblock(128, 256, 3), build_resblock(256, 256, 3),
    };
    return resnet_scaffold(ModelName::ResNet1D18, channels, samples,
                           num_classes, blocks, {0, 2, 0, 2, 0, 2, 0, 1});
}

ModelConfig build_model(ModelName name, int channels, int samples,
                        int num_classes) {
    switch (name) {
        case ModelName::DeepConvNet:
            return build_deepconvnet(channels, samples, num_classes);
        case ModelName::EEGNet:
            return build_eegnet(channels, samples, num_classes);
        case ModelName::ResNet1D8:
            return build_resnet1d8(channels, samples, num_classes);
        case ModelName::ResNet1D18:
            return build_resnet1d18(channels, samples, num_classes);
    }
    throw std::logic_error("build_model: unknown name");
}

namespace {

long layer_params(const LayerSpec& s) {
    switch (s.kind) {
        case LayerKind::Conv2D:
            return static_cast<long>(s.c_out) * s.c_in * s.k_h * s.k_w;
        case LayerKind::Conv1D:
            return static_cast<long>(s.c_out) * s.c_in * s.k;
        case LayerKind::DepthwiseConv2D:
            return static_cast<long>(s.c_in) * s.mult * s.k_h * s.k_w;
        case LayerKind::SeparableConv2D:
            return static_cast<long>(s.c_in) * s.mult * s.k_h * s.k_w +
                   static_cast<long>(s.c_out) * s.c_in * s.mult;
        case LayerKind::BatchNorm:
            return 2L * s.c_in;
        case LayerKind::Linear:
            return static_cast<long>(s.c_out) * s.c_in + s.c_out;
        case LayerKind::ResBlock: {
            long n = 2L * s.c_in;                                // bn1
            n += static_cast<long>(s.c_out) * s.c_in * s.k;      // conv1
            n += 2L * s.c_out;                                   // bn2
            n += static_cast<long>(s.c_out) * s.c_out * s.k;     // conv2
            if (s.c_in != s.c_out) n += static_cast<long>(s.c_out) * s.c_in;
            return n;
        }
        default:
            return 0;
    }
}

}  // namespace

long count_params(const ModelConfig& cfg) {
    long n = 0;
    for (const auto& l : cfg.feature_layers) n += layer_params(l);
    n += layer_params(cfg.classifier);
    return n;
}

int weighted_layer_count(const ModelConfig& cfg) {
    int n = 0;
    for (const auto& l : cfg.feature_layers) {
        switch (l.kind) {
            case LayerKind::Conv2D:
            case LayerKind::Conv1D:
            case LayerKind::DepthwiseConv2D:
                n += 1;
                break;
            case LayerKind::SeparableConv2D:
                n += 2;
                break;
            case LayerKind::ResBlock:
                n += 2;
                break;
            default:
                break;
        }
    }
    return n + 1;  // linear classifier
}

std::string model_summary(const ModelConfig& cfg) {
    std::ostringstream os;
    os << model_name_str(cfg.name) << "  input (" << cfg.in_channels << " x "
       << cfg.in_samples << ")\n";
    os << "  #   layer              output (C,H,T)        params\n";
    Dims d = input_dims(cfg);
    int idx = 0;
    long total = 0;
    auto row = [&](const LayerSpec& l) {
        d = propagate(l, d, cfg.layout);
        const long p = layer_params(l);
        total += p;
        char buf[96];
        std::snprintf(buf, sizeof(buf), "  %-3d %-18s (%d,%d,%d)%*s %ld\n", idx,
                      kind_name(l.kind), d.c, d.h, d.t, 12, "", p);
        os << buf;
        ++idx;
    };
    for (const auto& l : cfg.feature_layers) row(l);
    row(cfg.classifier);
    os << "  feature_dim " << cfg.feature_dim << ", trainable params " << total
       << "\n";
    return os.str();
}

}  // namespace nn
}  // namespace eegdg
