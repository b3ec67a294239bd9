#pragma once

#include <atomic>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace eegdg {

using Shape = std::vector<int>;

inline long shape_numel(const Shape& s) {
    long n = 1;
    for (int d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

inline void check_shape_positive(const Shape& s, const char* what) {
    for (int d : s) {
        if (d <= 0) {
            throw std::invalid_argument(std::string(what) +
                                        ": dimensions must be positive, got " +
                                        shape_str(s));
        }
    }
}

// N-dimensional row-major array with shared storage. Copies are shallow;
// `node` ties the tensor to a Tape when it participates in differentiation
// (-1 means off-tape: such a tensor never accumulates gradient).
template <typename T>
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(Shape shape)
        : shape_(std::move(shape)),
          data_(std::make_shared<std::vector<T>>(
              static_cast<std::size_t>(shape_numel(shape_)), T(0))) {
        check_shape_positive(shape_, "Tensor");
    }

    Tensor(Shape shape, std::vector<T> data)
        : shape_(std::move(shape)),
          data_(std::make_shared<std::vector<T>>(std::move(data))) {
        check_shape_positive(shape_, "Tensor");
        if (static_cast<long>(data_->size()) != shape_numel(shape_)) {
            throw std::invalid_argument(
                "Tensor: data length " + std::to_string(data_->size()) +
                " does not match shape " + shape_str(shape_));
        }
    }

    Tensor(Shape shape, std::initializer_list<T> vals)
        : Tensor(std::move(shape), std::vector<T>(vals)) {}

    static Tensor full(Shape shape, T value) {
        Tensor t(std::move(shape));
        for (auto& v : *t.data_) v = value;
        return t;
    }

    bool defined() const { return static_cast<bool>(data_); }
    const Shape& shape() const { return shape_; }
    int dim(int i) const { return shape_.at(static_cast<std::size_t>(i)); }
    long size() const { return data_ ? static_cast<long>(data_->size()) : 0; }

    const T* data() const { return data_->data(); }
    T* data() { return data_->data(); }
    const std::vector<T>& vec() const { return *data_; }
    std::vector<T>& vec() { return *data_; }
    std::shared_ptr<std::vector<T>> storage() const { return data_; }

    T item() const {
        if (size() != 1) {
            throw std::invalid_argument("Tensor::item: tensor of shape " +
                                        shape_str(shape_) + " is not scalar");
        }
        return (*data_)[0];
    }

    // Same storage and tape node, different shape (element count preserved).
    Tensor reshaped(Shape new_shape) const {
        check_shape_positive(new_shape, "reshape");
        if (shape_numel(new_shape) != size()) {
            throw std::invalid_argument("reshape: cannot view " +
                                        shape_str(shape_) + " as " +
                                        shape_str(new_shape));
        }
        Tensor t = *this;
        t.shape_ = std::move(new_shape);
        return t;
    }

    // Deep copy of the values; off-tape, no gradient.
    Tensor clone() const {
        Tensor t(shape_, *data_);
        return t;
    }

    bool has_grad() const { return static_cast<bool>(grad_); }

    std::vector<T>& grad() {
        if (!grad_) {
            throw std::runtime_error("Tensor::grad: no gradient present");
        }
        return *grad_;
    }
    const std::vector<T>& grad() const {
        return const_cast<Tensor*>(this)->grad();
    }

    // Allocates (zero-filled) on first use; shape always matches data.
    std::vector<T>& grad_storage() {
        if (!grad_) {
            grad_ = std::make_shared<std::vector<T>>(
                static_cast<std::size_t>(size()), T(0));
        }
        return *grad_;
    }

    void zero_grad() {
        if (grad_) std::fill(grad_->begin(), grad_->end(), T(0));
    }

    // Tape handle: valid only while tape_id matches the tape that issued it.
    int node = -1;
    long tape_id = -1;

private:
    Shape shape_;
    std::shared_ptr<std::vector<T>> data_;
    std::shared_ptr<std::vector<T>> grad_;
};

// Reverse-mode tape. Ops append nodes in execution order (inputs always
// precede consumers), backward() walks the reachable sub-graph once in
// reverse. Leaf nodes come from watch(); their gradients accumulate into
// the watched tensors' grad storage.
template <typename T>
class Tape {
public:
    using BackwardFn = std::function<void(Tape&)>;

    Tape() : id_(next_id()) {}
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    long id() const { return id_; }

    // Node id of t on *this* tape; stale handles from other tapes read as
    // off-tape.
    int node_of(const Tensor<T>& t) const {
        return t.tape_id == id_ ? t.node : -1;
    }

    void tag(Tensor<T>& t, int node) const {
        t.node = node;
        t.tape_id = id_;
    }

    // Registers a gradient sink. Fresh tensors become leaf nodes; tensors
    // already on this tape keep their node. Idempotent per node.
    int watch(Tensor<T>& t) {
        int id = node_of(t);
        if (id < 0) {
            id = push_node(t.size(), {}, nullptr);
            tag(t, id);
        }
        t.grad_storage();  // share the sink before copying the handle
        for (const auto& [nid, tt] : leaves_) {
            if (nid == id) return id;
        }
        leaves_.emplace_back(id, t);
        return id;
    }

    int push_node(long out_size, std::vector<int> inputs, BackwardFn bwd) {
        for (int in : inputs) {
            if (in < 0 || in >= static_cast<int>(nodes_.size())) {
                throw std::logic_error("Tape: node input out of order");
            }
        }
        nodes_.push_back(Node{out_size, std::move(inputs), std::move(bwd)});
        return static_cast<int>(nodes_.size()) - 1;
    }

    std::size_t num_nodes() const { return nodes_.size(); }

    std::vector<T>& grad_buf(int node) {
        auto& g = grads_[static_cast<std::size_t>(node)];
        if (g.empty()) {
            g.assign(static_cast<std::size_t>(nodes_[static_cast<std::size_t>(node)].size),
                     T(0));
        }
        return g;
    }

    // Seeds d(loss)/d(loss) = 1 and propagates. Every reachable node is
    // visited exactly once; watched leaves accumulate into their tensors.
    void backward(const Tensor<T>& loss) {
        if (loss.size() != 1) {
            throw std::invalid_argument(
                "backward: loss must be scalar, got shape " +
                shape_str(loss.shape()));
        }
        const int loss_node = node_of(loss);
        if (loss_node < 0 || loss_node >= static_cast<int>(nodes_.size())) {
            throw std::invalid_argument("backward: loss is not on this tape");
        }

        const std::size_t n = nodes_.size();
        grads_.assign(n, {});

        std::vector<char> reachable(n, 0);
        reachable[static_cast<std::size_t>(loss_node)] = 1;
        for (int i = loss_node; i >= 0; --i) {
            if (!reachable[static_cast<std::size_t>(i)]) continue;
            for (int in : nodes_[static_cast<std::size_t>(i)].inputs) {
                reachable[static_cast<std::size_t>(in)] = 1;
            }
        }

        grad_buf(loss_node)[0] = T(1);
        std::vector<char> is_leaf(n, 0);
        for (auto& [id, t] : leaves_) is_leaf[static_cast<std::size_t>(id)] = 1;

        for (int i = loss_node; i >= 0; --i) {
            auto idx = static_cast<std::size_t>(i);
            if (!reachable[idx]) continue;
            if (nodes_[idx].bwd) nodes_[idx].bwd(*this);
            if (!is_leaf[idx]) {
                grads_[idx].clear();
                grads_[idx].shrink_to_fit();
            }
        }

        for (auto& [id, t] : leaves_) {
            auto idx = static_cast<std::size_t>(id);
            if (!reachable[idx] || grads_[idx].empty()) continue;
            auto& sink = t.grad_storage();
            const auto& src = grads_[idx];
            for (std::size_t j = 0; j < sink.size(); ++j) sink[j] += src[j];
        }
        grads_.clear();
    }

private:
    struct Node {
        long size;
        std::vector<int> inputs;
        BackwardFn bwd;
    };

    static long next_id() {
        static std::atomic<long> counter{0};
        return ++counter;
    }

    long id_;
    std::vector<Node> nodes_;
    std::vector<std::vector<T>> grads_;
    std::vector<std::pair<int, Tensor<T>>> leaves_;
};

}  // namespace eegdg
