#pragma once

// Reverse-mode autodiff over BasicTensor. Each op produces a Variable whose
// node remembers its parents and a closure that pushes the output gradient
// back to them. Recording is skipped when gradients are disabled on the
// current thread or when no input requires a gradient.

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cloudseg/kernels.hpp"
#include "cloudseg/tensor.hpp"

namespace cloudseg {

/// Whether ops record a backward graph on this thread.
bool grad_enabled();

/// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

template <typename T>
class Variable {
public:
    struct Node {
        BasicTensor<T> value;
        BasicTensor<T> grad; // empty until a gradient arrives
        bool requires_grad = false;
        std::vector<std::shared_ptr<Node>> parents;
        std::function<void(Node&)> backward;

        void accumulate(const BasicTensor<T>& g);
    };

    Variable() = default;

    static Variable leaf(BasicTensor<T> value, bool requires_grad = false);

    /// Result of an op. `backward` is only kept when recording applies.
    static Variable from_op(BasicTensor<T> value, std::vector<Variable> inputs, std::function<void(Node&)> backward);

    bool defined() const { return node_ != nullptr; }
    const BasicTensor<T>& value() const { return node_->value; }
    /// Leaf values only; mutating an interior node's value invalidates its graph.
    BasicTensor<T>& mutable_value() { return node_->value; }
    const BasicTensor<T>& grad() const { return node_->grad; }
    bool requires_grad() const { return node_ && node_->requires_grad; }
    const Shape& shape() const { return node_->value.shape(); }

    void zero_grad() { node_->grad = BasicTensor<T>(); }

    /// Seeds this variable with `seed` (same shape) and propagates to every
    /// ancestor that requires a gradient.
    void backward(const BasicTensor<T>& seed) const;

    Node* node() const { return node_.get(); }
    bool same_node(const Variable& other) const { return node_ == other.node_; }

private:
    std::shared_ptr<Node> node_;
};

using Var = Variable<float>;
using VarD = Variable<double>;

namespace ops {

template <typename T>
Variable<T> conv2d(const Variable<T>& x, const Variable<T>& weight, const Variable<T>* bias,
                   const kernels::ConvGeometry& g);

template <typename T>
Variable<T> depthwise_conv2d(const Variable<T>& x, const Variable<T>& weight, const kernels::ConvGeometry& g);

/// Train-mode batch normalization. Batch statistics are written to
/// `batch_mean` / `batch_var` when non-null. gamma and beta are (1,c,1,1).
template <typename T>
Variable<T> batchnorm_train(const Variable<T>& x, const Variable<T>& gamma, const Variable<T>& beta, T epsilon,
                            std::vector<T>* batch_mean = nullptr, std::vector<T>* batch_var = nullptr);

template <typename T>
Variable<T> batchnorm_infer(const Variable<T>& x, const Variable<T>& gamma, const Variable<T>& beta,
                            const BasicTensor<T>& running_mean, const BasicTensor<T>& running_var, T epsilon);

template <typename T>
Variable<T> relu(const Variable<T>& x);

template <typename T>
Variable<T> sigmoid(const Variable<T>& x);

template <typename T>
Variable<T> add(const Variable<T>& a, const Variable<T>& b);

template <typename T>
Variable<T> concat_channels(const std::vector<Variable<T>>& xs);

template <typename T>
Variable<T> upsample_bilinear(const Variable<T>& x, int factor);

template <typename T>
Variable<T> resize_bilinear(const Variable<T>& x, std::int64_t out_h, std::int64_t out_w);

template <typename T>
Variable<T> global_avg_pool(const Variable<T>& x);

/// Scalar (1,1,1,1) sum of elementwise products with a fixed weight tensor.
template <typename T>
Variable<T> weighted_sum(const Variable<T>& x, const BasicTensor<T>& weights);

} // namespace ops

// ---------------------------------------------------------------------------
// Finite-difference gradient checking.

template <typename T>
using DiffOp = std::function<Variable<T>(std::span<const Variable<T>>)>;

struct GradCheckOptions {
    double step = 1e-6;
    /// Relative error is |analytic - numeric| / max(|analytic|, |numeric|, floor).
    double floor = 1e-2;
    std::uint64_t seed = 0x5eed;
};

struct GradCheckResult {
    double max_rel_error = 0.0;
    std::size_t worst_input = 0;
    std::int64_t worst_index = 0;
    double analytic = 0.0;
    double numeric = 0.0;
};

/// Compares the analytic gradient of `analytic` against central finite
/// differences of `reference`, both evaluated on `inputs`. The scalar loss is
/// a fixed random projection of the op output (a plain sum would make every
/// normalization layer's gradient vanish identically). Differences run in
/// double precision; `analytic` may run in float.
/// Throws NumericError naming the input and element on a non-finite analytic gradient.
template <typename T>
GradCheckResult grad_check(const DiffOp<T>& analytic, const DiffOp<double>& reference,
                           const std::vector<TensorD>& inputs, const GradCheckOptions& options = {});

inline GradCheckResult grad_check(const DiffOp<double>& op, const std::vector<TensorD>& inputs,
                                  const GradCheckOptions& options = {})
{
    return grad_check<double>(op, op, inputs, options);
}

} // namespace cloudseg
