#pragma once

// Forward and backward kernels for every primitive the network uses. All
// functions are pure: inputs are never modified.

#include <cstdint>
#include <span>
#include <vector>

#include "cloudseg/tensor.hpp"

namespace cloudseg::kernels {

enum class Padding { Same, Valid };

struct ConvGeometry {
    int stride = 1;
    int dilation = 1;
    int groups = 1;
    Padding padding = Padding::Same;
};

/// Padding along one axis. `before` is the top/left pad; any odd remainder of
/// the total goes to the bottom/right.
struct AxisPad {
    std::int64_t out = 0;
    std::int64_t before = 0;
    std::int64_t after = 0;
};

AxisPad axis_padding(std::int64_t in, std::int64_t kernel, const ConvGeometry& g);

/// Output shape of conv2d for an input and a (c_out, c_in/groups, kh, kw) kernel.
Shape conv_output_shape(const Shape& input, const Shape& kernel, const ConvGeometry& g);

template <typename T>
struct ConvGrads {
    BasicTensor<T> input;
    BasicTensor<T> weight;
    std::vector<T> bias;
};

/// Grouped, strided, dilated cross-correlation. `bias` is empty or c_out long.
template <typename T>
BasicTensor<T> conv2d(const BasicTensor<T>& x, const BasicTensor<T>& weight, std::span<const T> bias,
                      const ConvGeometry& g);

template <typename T>
ConvGrads<T> conv2d_backward(const BasicTensor<T>& x, const BasicTensor<T>& weight, bool has_bias,
                             const ConvGeometry& g, const BasicTensor<T>& dy);

/// Direct per-channel kernel; weight is (c, 1, kh, kw). `g.groups` is ignored.
template <typename T>
BasicTensor<T> depthwise_conv2d(const BasicTensor<T>& x, const BasicTensor<T>& weight, const ConvGeometry& g);

template <typename T>
ConvGrads<T> depthwise_conv2d_backward(const BasicTensor<T>& x, const BasicTensor<T>& weight,
                                       const ConvGeometry& g, const BasicTensor<T>& dy);

template <typename T>
struct BatchNormTrainOutput {
    BasicTensor<T> y;
    BasicTensor<T> normalized; // x-hat, kept for the backward pass
    std::vector<T> mean;
    std::vector<T> var; // biased batch variance
    std::vector<T> inv_std;
};

template <typename T>
BatchNormTrainOutput<T> batchnorm_train(const BasicTensor<T>& x, std::span<const T> gamma,
                                        std::span<const T> beta, T epsilon);

template <typename T>
struct BatchNormGrads {
    BasicTensor<T> input;
    std::vector<T> gamma;
    std::vector<T> beta;
};

template <typename T>
BatchNormGrads<T> batchnorm_train_backward(const BatchNormTrainOutput<T>& fwd, std::span<const T> gamma,
                                           const BasicTensor<T>& dy);

template <typename T>
BasicTensor<T> batchnorm_infer(const BasicTensor<T>& x, std::span<const T> gamma, std::span<const T> beta,
                               std::span<const T> running_mean, std::span<const T> running_var, T epsilon);

template <typename T>
BatchNormGrads<T> batchnorm_infer_backward(const BasicTensor<T>& x, std::span<const T> gamma,
                                           std::span<const T> running_mean, std::span<const T> running_var,
                                           T epsilon, const BasicTensor<T>& dy);

template <typename T>
BasicTensor<T> relu(const BasicTensor<T>& x);

template <typename T>
BasicTensor<T> relu_backward(const BasicTensor<T>& x, const BasicTensor<T>& dy);

template <typename T>
BasicTensor<T> sigmoid(const BasicTensor<T>& x);

/// Takes the forward output y = sigmoid(x).
template <typename T>
BasicTensor<T> sigmoid_backward(const BasicTensor<T>& y, const BasicTensor<T>& dy);

/// Bilinear resize with half-pixel centers (align_corners = false); source
/// coordinates below zero clamp to the first row/column.
template <typename T>
BasicTensor<T> resize_bilinear(const BasicTensor<T>& x, std::int64_t out_h, std::int64_t out_w);

template <typename T>
BasicTensor<T> resize_bilinear_backward(const Shape& input_shape, const BasicTensor<T>& dy);

template <typename T>
BasicTensor<T> upsample_bilinear(const BasicTensor<T>& x, int factor);

template <typename T>
BasicTensor<T> concat_channels(std::span<const BasicTensor<T>* const> xs);

/// Inverse of concat_channels for the gradient: slices channels [begin, begin+count).
template <typename T>
BasicTensor<T> slice_channels(const BasicTensor<T>& x, std::int64_t begin, std::int64_t count);

template <typename T>
BasicTensor<T> global_avg_pool(const BasicTensor<T>& x);

template <typename T>
BasicTensor<T> global_avg_pool_backward(const Shape& input_shape, const BasicTensor<T>& dy);

template <typename T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b);

} // namespace cloudseg::kernels
