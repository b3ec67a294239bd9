#pragma once

#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "eegdg/adam.hpp"
#include "eegdg/common.hpp"
#include "eegdg/ops.hpp"
#include "eegdg/tensor.hpp"

namespace eegdg {
namespace nn {

enum class LayerKind {
    Conv2D,
    Conv1D,
    DepthwiseConv2D,
    SeparableConv2D,
    MaxPool,
    AvgPool,
    ELU,
    BatchNorm,
    Dropout,
    Linear,
    ResBlock,
    Flatten,
};

inline const char* kind_name(LayerKind k) {
    switch (k) {
        case LayerKind::Conv2D: return "Conv2D";
        case LayerKind::Conv1D: return "Conv1D";
        case LayerKind::DepthwiseConv2D: return "DepthwiseConv2D";
        case LayerKind::SeparableConv2D: return "SeparableConv2D";
        case LayerKind::MaxPool: return "MaxPool";
        case LayerKind::AvgPool: return "AvgPool";
        case LayerKind::ELU: return "ELU";
        case LayerKind::BatchNorm: return "BatchNorm";
        case LayerKind::Dropout: return "Dropout";
        case LayerKind::Linear: return "Linear";
        case LayerKind::ResBlock: return "ResBlock";
        case LayerKind::Flatten: return "Flatten";
    }
    return "?";
}

// Declarative layer description. 2-D layers use (k_h, k_w) and (pad_h,
// pad_w); 1-D layers use k/pad; ResBlock carries (c_in, c_out, k).
struct LayerSpec {
    LayerKind kind{};
    int c_in = 0;
    int c_out = 0;
    int k_h = 1;
    int k_w = 1;
    int k = 1;
    int stride = 1;
    int pad_h = 0;
    int pad_w = 0;
    int pad = 0;
    double p = 0.0;  // dropout rate
    int mult = 1;    // depthwise multiplier

    static LayerSpec conv2d(int ci, int co, int kh, int kw, int ph = 0,
                            int pw = 0, int stride = 1) {
        LayerSpec s;
        s.kind = LayerKind::Conv2D;
        s.c_in = ci; s.c_out = co; s.k_h = kh; s.k_w = kw;
        s.pad_h = ph; s.pad_w = pw; s.stride = stride;
        return s;
    }
    static LayerSpec conv1d(int ci, int co, int k, int pad = 0, int stride = 1) {
        LayerSpec s;
        s.kind = LayerKind::Conv1D;
        s.c_in = ci; s.c_out = co; s.k = k; s.pad = pad; s.stride = stride;
        return s;
    }
    static LayerSpec depthwise(int ci, int mult, int kh, int kw, int ph = 0,
                               int pw = 0) {
        LayerSpec s;
        s.kind = LayerKind::DepthwiseConv2D;
        s.c_in = ci; s.c_out = ci * mult; s.k_h = kh; s.k_w = kw;
        s.pad_h = ph; s.pad_w = pw; s.mult = mult;
        return s;
    }
    static LayerSpec separable(int ci, int co, int mult, int kh, int kw,
                               int ph = 0, int pw = 0) {
        LayerSpec s;
        s.kind = LayerKind::SeparableConv2D;
        s.c_in = ci; s.c_out = co; s.k_h = kh; s.k_w = kw;
        s.pad_h = ph; s.pad_w = pw; s.mult = mult;
        return s;
    }
    static LayerSpec maxpool2(int kh, int kw) {
        LayerSpec s;
        s.kind = LayerKind::MaxPool;
        s.k_h = kh; s.k_w = kw;
        return s;
    }
    static LayerSpec avgpool2(int kh, int kw) {
        LayerSpec s;
        s.kind = LayerKind::AvgPool;
        s.k_h = kh; s.k_w = kw;
        return s;
    }
    static LayerSpec maxpool1(int k) {
        LayerSpec s;
        s.kind = LayerKind::MaxPool;
        s.k = k; s.k_h = 1; s.k_w = k;
        return s;
    }
    static LayerSpec avgpool1(int k) {
        LayerSpec s;
        s.kind = LayerKind::AvgPool;
        s.k = k; s.k_h = 1; s.k_w = k;
        return s;
    }
    static LayerSpec elu() {
        LayerSpec s;
        s.kind = LayerKind::ELU;
        return s;
    }
    static LayerSpec batch_norm(int c) {
        LayerSpec s;
        s.kind = LayerKind::BatchNorm;
        s.c_in = c; s.c_out = c;
        return s;
    }
    static LayerSpec dropout(double p) {
        LayerSpec s;
        s.kind = LayerKind::Dropout;
        s.p = p;
        return s;
    }
    static LayerSpec linear(int in, int out) {
        LayerSpec s;
        s.kind = LayerKind::Linear;
        s.c_in = in; s.c_out = out;
        return s;
    }
    static LayerSpec flatten() {
        LayerSpec s;
        s.kind = LayerKind::Flatten;
        return s;
    }
};

enum class ModelName { DeepConvNet, EEGNet, ResNet1D8, ResNet1D18 };

inline const char* model_name_str(ModelName m) {
    switch (m) {
        case ModelName::DeepConvNet: return "DeepConvNet";
        case ModelName::EEGNet: return "EEGNet";
        case ModelName::ResNet1D8: return "ResNet1D-8";
        case ModelName::ResNet1D18: return "ResNet1D-18";
    }
    return "?";
}

ModelName parse_model_name(const std::string& s);

// Grid2d models see the input as a (1, channels, samples) image;
// Channels1d models see it as (channels, samples).
enum class InputLayout { Grid2d, Channels1d };

struct ModelConfig {
    ModelName name{};
    InputLayout layout{};
    int in_channels = 60;
    int in_samples = 1000;
    int num_classes = 3;
    std::vector<LayerSpec> feature_layers;
    LayerSpec classifier;  // Linear(feature_dim, num_classes)
    int feature_dim = 0;
};

// ---------------------------------------------------------------------------
// Shape propagation (used by builders, summaries, and validation)
// ---------------------------------------------------------------------------

struct Dims {
    int c = 0;
    int h = 1;
    int t = 0;  // time axis
};

inline int pooled_len(int len, int k) { return (len - k) / k + 1; }

inline Dims propagate(const LayerSpec& s, Dims d, InputLayout layout) {
    auto conv_len = [](int in, int k, int stride, int pad) {
        if (k > in + 2 * pad) {
            throw std::invalid_argument(
                "layer stack: kernel " + std::to_string(k) +
                " exceeds input extent " + std::to_string(in + 2 * pad));
        }
        return (in + 2 * pad - k) / stride + 1;
    };
    switch (s.kind) {
        case LayerKind::Conv2D:
            if (d.c != s.c_in) {
                throw std::invalid_argument(
                    "layer stack: Conv2D expects " + std::to_string(s.c_in) +
                    " channels, got " + std::to_string(d.c));
            }
            return {s.c_out, conv_len(d.h, s.k_h, 1, s.pad_h),
                    conv_len(d.t, s.k_w, s.stride, s.pad_w)};
        case LayerKind::Conv1D:
            if (d.c != s.c_in) {
                throw std::invalid_argument(
                    "layer stack: Conv1D expects " + std::to_string(s.c_in) +
                    " channels, got " + std::to_string(d.c));
            }
            return {s.c_out, 1, conv_len(d.t, s.k, s.stride, s.pad)};
        case LayerKind::DepthwiseConv2D:
            if (d.c != s.c_in) {
                throw std::invalid_argument(
                    "layer stack: DepthwiseConv2D expects " +
                    std::to_string(s.c_in) + " channels, got " +
                    std::to_string(d.c));
            }
            return {s.c_in * s.mult, conv_len(d.h, s.k_h, 1, s.pad_h),
                    conv_len(d.t, s.k_w, 1, s.pad_w)};
        case LayerKind::SeparableConv2D:
            if (d.c != s.c_in) {
                throw std::invalid_argument(
                    "layer stack: SeparableConv2D expects " +
                    std::to_string(s.c_in) + " channels, got " +
                    std::to_string(d.c));
            }
            return {s.c_out, conv_len(d.h, s.k_h, 1, s.pad_h),
                    conv_len(d.t, s.k_w, 1, s.pad_w)};
        case LayerKind::MaxPool:
        case LayerKind::AvgPool:
            if (layout == InputLayout::Channels1d) {
                return {d.c, 1, pooled_len(d.t, s.k)};
            }
            return {d.c, pooled_len(d.h, s.k_h), pooled_len(d.t, s.k_w)};
        case LayerKind::ResBlock:
            if (d.c != s.c_in) {
                throw std::invalid_argument(
                    "layer stack: ResBlock expects " + std::to_string(s.c_in) +
                    " channels, got " + std::to_string(d.c));
            }
            if (s.k % 2 == 0) {
                throw std::invalid_argument(
                    "ResBlock kernel must be odd to preserve length, got " +
                    std::to_string(s.k));
            }
            return {s.c_out, 1, d.t};
        case LayerKind::ELU:
        case LayerKind::BatchNorm:
        case LayerKind::Dropout:
            return d;
        case LayerKind::Flatten:
            return {d.c * d.h * d.t, 1, 1};
        case LayerKind::Linear:
            return {s.c_out, 1, 1};
    }
    throw std::logic_error("propagate: unknown layer kind");
}

inline Dims input_dims(const ModelConfig& cfg) {
    if (cfg.layout == InputLayout::Grid2d) {
        return {1, cfg.in_channels, cfg.in_samples};
    }
    return {cfg.in_channels, 1, cfg.in_samples};
}

inline int infer_feature_dim(const ModelConfig& cfg) {
    Dims d = input_dims(cfg);
    for (const auto& l : cfg.feature_layers) d = propagate(l, d, cfg.layout);
    return d.c * d.h * d.t;
}

// ---------------------------------------------------------------------------
// Runtime network
// ---------------------------------------------------------------------------

template <typename T>
struct Ctx {
    Tape<T>* tape = nullptr;
    bool training = false;
    Rng* rng = nullptr;
};

template <typename T>
struct ResBlockState {
    Tensor<T> bn1_g, bn1_b, bn1_rm, bn1_rv;
    Tensor<T> conv1_w;
    Tensor<T> bn2_g, bn2_b, bn2_rm, bn2_rv;
    Tensor<T> conv2_w;
    Tensor<T> skip_w;  // undefined when c_in == c_out
};

template <typename T>
struct LayerState {
    LayerSpec spec;
    std::string name;
    Tensor<T> w;   // conv / depthwise / linear weight
    Tensor<T> w2;  // separable pointwise weight
    Tensor<T> b;   // linear bias
    Tensor<T> g, be, rm, rv;  // batch norm
    ResBlockState<T> res;
};

template <typename T>
class Network {
public:
    Network(ModelConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
        Rng rng(derive_seed(seed, "net_init"));
        Dims d = input_dims(cfg_);
        int idx = 0;
        for (const auto& spec : cfg_.feature_layers) {
            layers_.push_back(make_layer(spec, "f" + std::to_string(idx), rng));
            d = propagate(spec, d, cfg_.layout);
            ++idx;
        }
        if (cfg_.classifier.kind != LayerKind::Linear) {
            throw std::invalid_argument("Network: classifier must be Linear");
        }
        if (cfg_.classifier.c_in != d.c * d.h * d.t) {
            throw std::invalid_argument(
                "Network: classifier expects " +
                std::to_string(cfg_.classifier.c_in) + " features, stack yields " +
                std::to_string(d.c * d.h * d.t));
        }
        classifier_ = make_layer(cfg_.classifier, "clf", rng);
    }

    const ModelConfig& config() const { return cfg_; }

    // (B, channels, samples) -> (B, feature_dim)
    Tensor<T> features(const Tensor<T>& input, const Ctx<T>& ctx) {
        if (input.shape().size() != 3 || input.dim(1) != cfg_.in_channels ||
            input.dim(2) != cfg_.in_samples) {
            throw std::invalid_argument(
                "Network: expected input [B," + std::to_string(cfg_.in_channels) +
                "," + std::to_string(cfg_.in_samples) + "], got " +
                shape_str(input.shape()));
        }
        const int B = input.dim(0);
        Tensor<T> x = cfg_.layout == InputLayout::Grid2d
                          ? input.reshaped({B, 1, cfg_.in_channels, cfg_.in_samples})
                          : input;
        for (auto& layer : layers_) x = forward_layer(layer, x, ctx);
        return x.reshaped({B, static_cast<int>(x.size() / B)});
    }

    Tensor<T> classify(const Tensor<T>& feats, const Ctx<T>& ctx) {
        return ops::linear(ctx.tape, feats, classifier_.w, classifier_.b);
    }

    Tensor<T> forward(const Tensor<T>& input, const Ctx<T>& ctx) {
        return classify(features(input, ctx), ctx);
    }

    std::vector<NamedParam<T>> parameters() {
        std::vector<NamedParam<T>> out;
        for (auto& l : layers_) collect_params(l, out);
        collect_params(classifier_, out);
        return out;
    }

    std::vector<NamedParam<T>> feature_parameters() {
        std::vector<NamedParam<T>> out;
        for (auto& l : layers_) collect_params(l, out);
        return out;
    }

    std::vector<NamedParam<T>> classifier_parameters() {
        std::vector<NamedParam<T>> out;
        collect_params(classifier_, out);
        return out;
    }

    // Batch-norm running statistics (state, not trainable).
    std::vector<NamedParam<T>> buffers() {
        std::vector<NamedParam<T>> out;
        for (auto& l : layers_) collect_buffers(l, out);
        collect_buffers(classifier_, out);
        return out;
    }

    long param_count() {
        long n = 0;
        for (const auto& p : parameters()) n += p.tensor->size();
        return n;
    }

    void zero_grad() {
        for (auto& p : parameters()) p.tensor->zero_grad();
    }

    void watch_all(Tape<T>& tape) {
        for (auto& p : parameters()) tape.watch(*p.tensor);
    }

private:
    static int fan_in(const LayerSpec& s) {
        switch (s.kind) {
            case LayerKind::Conv2D: return s.c_in * s.k_h * s.k_w;
            case LayerKind::Conv1D: return s.c_in * s.k;
            case LayerKind::DepthwiseConv2D: return s.k_h * s.k_w;
            case LayerKind::Linear: return s.c_in;
            default: return 1;
        }
    }

    static Tensor<T> init_uniform(Shape shape, int fan, Rng& rng) {
        Tensor<T> t(std::move(shape));
        const double bound = 1.0 / std::sqrt(static_cast<double>(fan));
        for (long i = 0; i < t.size(); ++i) {
            t.data()[i] = static_cast<T>(uniform_in(rng, -bound, bound));
        }
        return t;
    }

    LayerState<T> make_layer(const LayerSpec& s, std::string name, Rng& rng) {
        LayerState<T> st;
        st.spec = s;
        st.name = std::move(name);
        switch (s.kind) {
            case LayerKind::Conv2D:
                st.w = init_uniform({s.c_out, s.c_in, s.k_h, s.k_w}, fan_in(s), rng);
                break;
            case LayerKind::Conv1D:
                st.w = init_uniform({s.c_out, s.c_in, s.k}, fan_in(s), rng);
                break;
            case LayerKind::DepthwiseConv2D:
                st.w = init_uniform({s.c_in * s.mult, 1, s.k_h, s.k_w},
                                    s.k_h * s.k_w, rng);
                break;
            case LayerKind::SeparableConv2D:
                st.w = init_uniform({s.c_in * s.mult, 1, s.k_h, s.k_w},
                                    s.k_h * s.k_w, rng);
                st.w2 = init_uniform({s.c_out, s.c_in * s.mult, 1, 1},
                                     s.c_in * s.mult, rng);
                break;
            case LayerKind::BatchNorm:
                st.g = Tensor<T>::full({s.c_in}, T(1));
                st.be = Tensor<T>({s.c_in});
                st.rm = Tensor<T>({s.c_in});
                st.rv = Tensor<T>::full({s.c_in}, T(1));
                break;
            case LayerKind::Linear:
                st.w = init_uniform({s.c_out, s.c_in}, s.c_in, rng);
                st.b = Tensor<T>({s.c_out});
                break;
            case LayerKind::ResBlock: {
                auto& r = st.res;
                r.bn1_g = Tensor<T>::full({s.c_in}, T(1));
                r.bn1_b = Tensor<T>({s.c_in});
                r.bn1_rm = Tensor<T>({s.c_in});
                r.bn1_rv = Tensor<T>::full({s.c_in}, T(1));
                r.conv1_w = init_uniform({s.c_out, s.c_in, s.k}, s.c_in * s.k, rng);
                r.bn2_g = Tensor<T>::full({s.c_out}, T(1));
                r.bn2_b = Tensor<T>({s.c_out});
                r.bn2_rm = Tensor<T>({s.c_out});
                r.bn2_rv = Tensor<T>::full({s.c_out}, T(1));
                r.conv2_w = init_uniform({s.c_out, s.c_out, s.k}, s.c_out * s.k, rng);
                if (s.c_in != s.c_out) {
                    r.skip_w = init_uniform({s.c_out, s.c_in, 1}, s.c_in, rng);
                }
                break;
            }
            default:
                break;
        }
        return st;
    }

    Tensor<T> forward_layer(LayerState<T>& st, const Tensor<T>& x,
                            const Ctx<T>& ctx) {
        const auto& s = st.spec;
        switch (s.kind) {
            case LayerKind::Conv2D:
                return ops::conv2d(ctx.tape, x, st.w, 1, s.stride, s.pad_h, s.pad_w);
            case LayerKind::Conv1D:
                return ops::conv1d(ctx.tape, x, st.w, s.stride, s.pad);
            case LayerKind::DepthwiseConv2D:
                return ops::depthwise_conv2d(ctx.tape, x, st.w, s.mult, 1, 1,
                                             s.pad_h, s.pad_w);
            case LayerKind::SeparableConv2D:
                return ops::separable_conv2d(ctx.tape, x, st.w, st.w2, s.mult,
                                             s.pad_h, s.pad_w);
            case LayerKind::MaxPool:
                return cfg_.layout == InputLayout::Channels1d
                           ? ops::maxpool1d(ctx.tape, x, s.k)
                           : ops::maxpool2d(ctx.tape, x, s.k_h, s.k_w);
            case LayerKind::AvgPool:
                return cfg_.layout == InputLayout::Channels1d
                           ? ops::avgpool1d(ctx.tape, x, s.k)
                           : ops::avgpool2d(ctx.tape, x, s.k_h, s.k_w);
            case LayerKind::ELU:
                return ops::elu(ctx.tape, x);
            case LayerKind::BatchNorm:
                return ops::batch_norm(ctx.tape, x, st.g, st.be, st.rm, st.rv,
                                       ctx.training);
            case LayerKind::Dropout:
                return ops::dropout(ctx.tape, x, s.p, ctx.training, ctx.rng);
            case LayerKind::Flatten:
                return x.reshaped({x.dim(0), static_cast<int>(x.size() / x.dim(0))});
            case LayerKind::ResBlock: {
                auto& r = st.res;
                const int pad = s.k / 2;
                auto h = ops::batch_norm(ctx.tape, x, r.bn1_g, r.bn1_b, r.bn1_rm,
                                         r.bn1_rv, ctx.training);
                h = ops::elu(ctx.tape, h);
                h = ops::conv1d(ctx.tape, h, r.conv1_w, 1, pad);
                h = ops::batch_norm(ctx.tape, h, r.bn2_g, r.bn2_b, r.bn2_rm,
                                    r.bn2_rv, ctx.training);
                h = ops::elu(ctx.tape, h);
                h = ops::conv1d(ctx.tape, h, r.conv2_w, 1, pad);
                Tensor<T> skip = r.skip_w.defined()
                                     ? ops::conv1d(ctx.tape, x, r.skip_w, 1, 0)
                                     : x;
                return ops::add(ctx.tape, h, skip);
            }
            case LayerKind::Linear:
                return ops::linear(ctx.tape, x, st.w, st.b);
        }
        throw std::logic_error("forward_layer: unknown layer kind");
    }

    void collect_params(LayerState<T>& l, std::vector<NamedParam<T>>& out) {
        switch (l.spec.kind) {
            case LayerKind::Conv2D:
            case LayerKind::Conv1D:
            case LayerKind::DepthwiseConv2D:
                out.push_back({l.name + ".w", &l.w});
                break;
            case LayerKind::SeparableConv2D:
                out.push_back({l.name + ".dw", &l.w});
                out.push_back({l.name + ".pw", &l.w2});
                break;
            case LayerKind::BatchNorm:
                out.push_back({l.name + ".gamma", &l.g});
                out.push_back({l.name + ".beta", &l.be});
                break;
            case LayerKind::Linear:
                out.push_back({l.name + ".w", &l.w});
                out.push_back({l.name + ".b", &l.b});
                break;
            case LayerKind::ResBlock: {
                auto& r = l.res;
                out.push_back({l.name + ".bn1.gamma", &r.bn1_g});
                out.push_back({l.name + ".bn1.beta", &r.bn1_b});
                out.push_back({l.name + ".conv1.w", &r.conv1_w});
                out.push_back({l.name + ".bn2.gamma", &r.bn2_g});
                out.push_back({l.name + ".bn2.beta", &r.bn2_b});
                out.push_back({l.name + ".conv2.w", &r.conv2_w});
                if (r.skip_w.defined()) out.push_back({l.name + ".skip.w", &r.skip_w});
                break;
            }
            default:
                break;
        }
    }

    void collect_buffers(LayerState<T>& l, std::vector<NamedParam<T>>& out) {
        if (l.spec.kind == LayerKind::BatchNorm) {
            out.push_back({l.name + ".run_mean", &l.rm});
            out.push_back({l.name + ".run_var", &l.rv});
        } else if (l.spec.kind == LayerKind::ResBlock) {
            auto& r = l.res;
            out.push_back({l.name + ".bn1.run_mean", &r.bn1_rm});
            out.push_back({l.name + ".bn1.run_var", &r.bn1_rv});
            out.push_back({l.name + ".bn2.run_mean", &r.bn2_rm});
            out.push_back({l.name + ".bn2.run_var", &r.bn2_rv});
        }
    }

    ModelConfig cfg_;
    std::vector<LayerState<T>> layers_;
    LayerState<T> classifier_;
};

// Flat snapshot of all parameters and buffers, for best-checkpoint
// bookkeeping during training.
template <typename T>
struct StateSnapshot {
    std::vector<std::vector<T>> values;

    static StateSnapshot take(Network<T>& net) {
        StateSnapshot s;
        for (auto& p : net.parameters()) s.values.push_back(p.tensor->vec());
        for (auto& b : net.buffers()) s.values.push_back(b.tensor->vec());
        return s;
    }

    void restore(Network<T>& net) const {
        std::size_t i = 0;
        for (auto& p : net.parameters()) p.tensor->vec() = values.at(i++);
        for (auto& b : net.buffers()) b.tensor->vec() = values.at(i++);
    }
};

}  // namespace nn
}  // namespace eegdg
