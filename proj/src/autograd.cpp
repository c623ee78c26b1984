#include "cloudseg/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_set>

#include "cloudseg/rng.hpp"

namespace cloudseg {

namespace {
thread_local bool t_grad_enabled = true;
} // namespace

bool grad_enabled() { return t_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }

NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }

template <typename T>
void Variable<T>::Node::accumulate(const BasicTensor<T>& g)
{
    if (g.shape() != value.shape()) {
        throw ShapeError("gradient shape " + g.shape().str() + " does not match value " + value.shape().str());
    }
    if (grad.empty()) {
        grad = g;
        return;
    }
    for (std::int64_t i = 0; i < grad.size(); ++i) {
        grad[i] += g[i];
    }
}

template <typename T>
Variable<T> Variable<T>::leaf(BasicTensor<T> value, bool requires_grad)
{
    Variable v;
    v.node_ = std::make_shared<Node>();
    v.node_->value = std::move(value);
    v.node_->requires_grad = requires_grad;
    return v;
}

template <typename T>
Variable<T> Variable<T>::from_op(BasicTensor<T> value, std::vector<Variable> inputs,
                                 std::function<void(Node&)> backward)
{
    Variable v;
    v.node_ = std::make_shared<Node>();
    v.node_->value = std::move(value);
    const bool any = std::any_of(inputs.begin(), inputs.end(), [](const Variable& in) { return in.requires_grad(); });
    if (grad_enabled() && any) {
        v.node_->requires_grad = true;
        v.node_->parents.reserve(inputs.size());
        for (auto& in : inputs) {
            v.node_->parents.push_back(in.node_);
        }
        v.node_->backward = std::move(backward);
    }
    return v;
}

template <typename T>
void Variable<T>::backward(const BasicTensor<T>& seed) const
{
    if (!requires_grad()) {
        return;
    }
    // Iterative post-order DFS gives a topological order (parents first).
    std::vector<Node*> order;
    std::unordered_set<Node*> visited;
    std::vector<std::pair<Node*, std::size_t>> stack{{node_.get(), 0}};
    visited.insert(node_.get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            Node* parent = node->parents[next++].get();
            if (parent->requires_grad && visited.insert(parent).second) {
                stack.emplace_back(parent, 0);
            }
            continue;
        }
        order.push_back(node);
        stack.pop_back();
    }
    node_->accumulate(seed);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* node = *it;
        if (node->backward && !node->grad.empty()) {
            node->backward(*node);
        }
    }
}

namespace ops {

namespace {

template <typename T>
typename Variable<T>::Node& parent(typename Variable<T>::Node& self, std::size_t i)
{
    return *self.parents[i];
}

template <typename T>
std::span<const T> channel_values(const BasicTensor<T>& t)
{
    return t.values();
}

} // namespace

template <typename T>
Variable<T> conv2d(const Variable<T>& x, const Variable<T>& weight, const Variable<T>* bias,
                   const kernels::ConvGeometry& g)
{
    std::span<const T> b;
    if (bias != nullptr) {
        b = bias->value().values();
    }
    auto y = kernels::conv2d(x.value(), weight.value(), b, g);
    std::vector<Variable<T>> inputs{x, weight};
    if (bias != nullptr) {
        inputs.push_back(*bias);
    }
    const bool has_bias = bias != nullptr;
    return Variable<T>::from_op(std::move(y), std::move(inputs), [g, has_bias](typename Variable<T>::Node& self) {
        auto& px = parent<T>(self, 0);
        auto& pw = parent<T>(self, 1);
        auto grads = kernels::conv2d_backward(px.value, pw.value, has_bias, g, self.grad);
        if (px.requires_grad) {
            px.accumulate(grads.input);
        }
        if (pw.requires_grad) {
            pw.accumulate(grads.weight);
        }
        if (has_bias) {
            auto& pb = parent<T>(self, 2);
            if (pb.requires_grad) {
                pb.accumulate(BasicTensor<T>(pb.value.shape(), std::move(grads.bias)));
            }
        }
    });
}

template <typename T>
Variable<T> depthwise_conv2d(const Variable<T>& x, const Variable<T>& weight, const kernels::ConvGeometry& g)
{
    auto y = kernels::depthwise_conv2d(x.value(), weight.value(), g);
    return Variable<T>::from_op(std::move(y), {x, weight}, [g](typename Variable<T>::Node& self) {
        auto& px = parent<T>(self, 0);
        auto& pw = parent<T>(self, 1);
        auto grads = kernels::depthwise_conv2d_backward(px.value, pw.value, g, self.grad);
        if (px.requires_grad) {
            px.accumulate(grads.input);
        }
        if (pw.requires_grad) {
            pw.accumulate(grads.weight);
        }
    });
}

template <typename T>
Variable<T> batchnorm_train(const Variable<T>& x, const Variable<T>& gamma, const Variable<T>& beta, T epsilon,
                            std::vector<T>* batch_mean, std::vector<T>* batch_var)
{
    auto fwd = std::make_shared<kernels::BatchNormTrainOutput<T>>(
        kernels::batchnorm_train(x.value(), channel_values(gamma.value()), channel_values(beta.value()), epsilon));
    if (batch_mean != nullptr) {
        *batch_mean = fwd->mean;
    }
    if (batch_var != nullptr) {
        *batch_var = fwd->var;
    }
    BasicTensor<T> y = fwd->y;
    if (!grad_enabled()) {
        fwd.reset();
    }
    return Variable<T>::from_op(std::move(y), {x, gamma, beta}, [fwd](typename Variable<T>::Node& self) {
        auto& px = parent<T>(self, 0);
        auto& pg = parent<T>(self, 1);
        auto& pb = parent<T>(self, 2);
        auto grads = kernels::batchnorm_train_backward(*fwd, channel_values(pg.value), self.grad);
        if (px.requires_grad) {
            px.accumulate(grads.input);
        }
        if (pg.requires_grad) {
            pg.accumulate(BasicTensor<T>(pg.value.shape(), std::move(grads.gamma)));
        }
        if (pb.requires_grad) {
            pb.accumulate(BasicTensor<T>(pb.value.shape(), std::move(grads.beta)));
        }
    });
}

template <typename T>
Variable<T> batchnorm_infer(const Variable<T>& x, const Variable<T>& gamma, const Variable<T>& beta,
                            const BasicTensor<T>& running_mean, const BasicTensor<T>& running_var, T epsilon)
{
    auto y = kernels::batchnorm_infer(x.value(), channel_values(gamma.value()), channel_values(beta.value()),
                                      running_mean.values(), running_var.values(), epsilon);
    return Variable<T>::from_op(
        std::move(y), {x, gamma, beta},
        [running_mean, running_var, epsilon](typename Variable<T>::Node& self) {
            auto& px = parent<T>(self, 0);
            auto& pg = parent<T>(self, 1);
            auto& pb = parent<T>(self, 2);
            auto grads = kernels::batchnorm_infer_backward(px.value, channel_values(pg.value), running_mean.values(),
                                                           running_var.values(), epsilon, self.grad);
            if (px.requires_grad) {
                px.accumulate(grads.input);
            }
            if (pg.requires_grad) {
                pg.accumulate(BasicTensor<T>(pg.value.shape(), std::move(grads.gamma)));
            }
            if (pb.requires_grad) {
                pb.accumulate(BasicTensor<T>(pb.value.shape(), std::move(grads.beta)));
            }
        });
}

template <typename T>
Variable<T> relu(const Variable<T>& x)
{
    return Variable<T>::from_op(kernels::relu(x.value()), {x}, [](typename Variable<T>::Node& self) {
        auto& px = parent<T>(self, 0);
        px.accumulate(kernels::relu_backward(px.value, self.grad));
    });
}

template <typename T>
Variable<T> sigmoid(const Variable<T>& x)
{
    return Variable<T>::from_op(kernels::sigmoid(x.value()), {x}, [](typename Variable<T>::Node& self) {
        parent<T>(self, 0).accumulate(kernels::sigmoid_backward(self.value, self.grad));
    });
}

template <typename T>
Variable<T> add(const Variable<T>& a, const Variable<T>& b)
{
    return Variable<T>::from_op(kernels::add(a.value(), b.value()), {a, b}, [](typename Variable<T>::Node& self) {
        for (std::size_t i = 0; i < 2; ++i) {
            auto& p = parent<T>(self, i);
            if (p.requires_grad) {
                p.accumulate(self.grad);
            }
        }
    });
}

template <typename T>
Variable<T> concat_channels(const std::vector<Variable<T>>& xs)
{
    std::vector<const BasicTensor<T>*> values;
    values.reserve(xs.size());
    for (const auto& x : xs) {
        values.push_back(&x.value());
    }
    auto y = kernels::concat_channels<T>(values);
    return Variable<T>::from_op(std::move(y), xs, [](typename Variable<T>::Node& self) {
        std::int64_t begin = 0;
        for (auto& p : self.parents) {
            const std::int64_t count = p->value.c();
            if (p->requires_grad) {
                p->accumulate(kernels::slice_channels(self.grad, begin, count));
            }
            begin += count;
        }
    });
}

template <typename T>
Variable<T> resize_bilinear(const Variable<T>& x, std::int64_t out_h, std::int64_t out_w)
{
    auto y = kernels::resize_bilinear(x.value(), out_h, out_w);
    return Variable<T>::from_op(std::move(y), {x}, [](typename Variable<T>::Node& self) {
        auto& px = parent<T>(self, 0);
        px.accumulate(kernels::resize_bilinear_backward(px.value.shape(), self.grad));
    });
}

template <typename T>
Variable<T> upsample_bilinear(const Variable<T>& x, int factor)
{
    if (factor < 1) {
        throw ShapeError("upsample factor must be >= 1, got " + std::to_string(factor));
    }
    if (factor == 1) {
        return x;
    }
    return resize_bilinear(x, x.shape().h * factor, x.shape().w * factor);
}

template <typename T>
Variable<T> global_avg_pool(const Variable<T>& x)
{
    return Variable<T>::from_op(kernels::global_avg_pool(x.value()), {x}, [](typename Variable<T>::Node& self) {
        auto& px = parent<T>(self, 0);
        px.accumulate(kernels::global_avg_pool_backward(px.value.shape(), self.grad));
    });
}

template <typename T>
Variable<T> weighted_sum(const Variable<T>& x, const BasicTensor<T>& weights)
{
    if (weights.shape() != x.shape()) {
        throw ShapeError("weighted_sum weights " + weights.shape().str() + " vs " + x.shape().str());
    }
    T acc = 0;
    for (std::int64_t i = 0; i < weights.size(); ++i) {
        acc += weights[i] * x.value()[i];
    }
    return Variable<T>::from_op(BasicTensor<T>({1, 1, 1, 1}, acc), {x}, [weights](typename Variable<T>::Node& self) {
        BasicTensor<T> g = weights;
        const T s = self.grad[0];
        for (auto& v : g.values()) {
            v *= s;
        }
        parent<T>(self, 0).accumulate(g);
    });
}

#define CLOUDSEG_INSTANTIATE_OPS(T)                                                                          \
    template Variable<T> conv2d(const Variable<T>&, const Variable<T>&, const Variable<T>*,                 \
                                const kernels::ConvGeometry&);                                              \
    template Variable<T> depthwise_conv2d(const Variable<T>&, const Variable<T>&, const kernels::ConvGeometry&); \
    template Variable<T> batchnorm_train(const Variable<T>&, const Variable<T>&, const Variable<T>&, T,      \
                                         std::vector<T>*, std::vector<T>*);                                 \
    template Variable<T> batchnorm_infer(const Variable<T>&, const Variable<T>&, const Variable<T>&,        \
                                         const BasicTensor<T>&, const BasicTensor<T>&, T);                  \
    template Variable<T> relu(const Variable<T>&);                                                          \
    template Variable<T> sigmoid(const Variable<T>&);                                                       \
    template Variable<T> add(const Variable<T>&, const Variable<T>&);                                       \
    template Variable<T> concat_channels(const std::vector<Variable<T>>&);                                  \
    template Variable<T> upsample_bilinear(const Variable<T>&, int);                                        \
    template Variable<T> resize_bilinear(const Variable<T>&, std::int64_t, std::int64_t);                   \
    template Variable<T> global_avg_pool(const Variable<T>&);                                               \
    template Variable<T> weighted_sum(const Variable<T>&, const BasicTensor<T>&);

CLOUDSEG_INSTANTIATE_OPS(float)
CLOUDSEG_INSTANTIATE_OPS(double)

#undef CLOUDSEG_INSTANTIATE_OPS

} // namespace ops

template <typename T>
GradCheckResult grad_check(const DiffOp<T>& analytic, const DiffOp<double>& reference,
                           const std::vector<TensorD>& inputs, const GradCheckOptions& options)
{
    auto loss_at = [&](const std::vector<TensorD>& xs, const TensorD& projection) {
        NoGradGuard guard;
        std::vector<VarD> vars;
        vars.reserve(xs.size());
        for (const auto& x : xs) {
            vars.push_back(VarD::leaf(x));
        }
        const TensorD out = reference(vars).value();
        double acc = 0.0;
        for (std::int64_t i = 0; i < out.size(); ++i) {
            acc += projection[i] * out[i];
        }
        return acc;
    };

    Shape out_shape;
    {
        NoGradGuard guard;
        std::vector<VarD> vars;
        for (const auto& x : inputs) {
            vars.push_back(VarD::leaf(x));
        }
        out_shape = reference(vars).shape();
    }
    Rng rng(options.seed);
    TensorD projection(out_shape);
    for (auto& v : projection.values()) {
        v = rng.normal();
    }

    std::vector<Variable<T>> vars;
    vars.reserve(inputs.size());
    for (const auto& x : inputs) {
        vars.push_back(Variable<T>::leaf(x.template cast<T>(), true));
    }
    const Variable<T> out = analytic(vars);
    out.backward(projection.template cast<T>());

    GradCheckResult result;
    std::vector<TensorD> probe = inputs;
    for (std::size_t i = 0; i < inputs.size(); ++i) {
        const BasicTensor<T>& g = vars[i].grad();
        for (std::int64_t j = 0; j < inputs[i].size(); ++j) {
            const double a = g.empty() ? 0.0 : static_cast<double>(g[j]);
            if (!std::isfinite(a)) {
                throw NumericError("non-finite analytic gradient at input " + std::to_string(i) + ", element "
                                   + std::to_string(j));
            }
            const double original = probe[i][j];
            probe[i][j] = original + options.step;
            const double plus = loss_at(probe, projection);
            probe[i][j] = original - options.step;
            const double minus = loss_at(probe, projection);
            probe[i][j] = original;
            const double numeric = (plus - minus) / (2.0 * options.step);
            const double denom = std::max({std::abs(a), std::abs(numeric), options.floor});
            const double err = std::abs(a - numeric) / denom;
            if (err > result.max_rel_error || (i == 0 && j == 0)) {
                result = {err, i, j, a, numeric};
            }
        }
    }
    return result;
}

template class Variable<float>;
template class Variable<double>;
template GradCheckResult grad_check<float>(const DiffOp<float>&, const DiffOp<double>&, const std::vector<TensorD>&,
                                           const GradCheckOptions&);
template GradCheckResult grad_check<double>(const DiffOp<double>&, const DiffOp<double>&,
                                            const std::vector<TensorD>&, const GradCheckOptions&);

} // namespace cloudseg
