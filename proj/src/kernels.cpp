#include "cloudseg/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace cloudseg::kernels {

namespace {

std::string dims(std::int64_t a, std::int64_t b) { return std::to_string(a) + " vs " + std::to_string(b); }

// C(MxN) += A(MxK) * B(KxN)
template <typename T>
void gemm_nn(std::int64_t m, std::int64_t n, std::int64_t k, const T* a, const T* b, T* c)
{
    for (std::int64_t i = 0; i < m; ++i) {
        T* crow = c + i * n;
        for (std::int64_t p = 0; p < k; ++p) {
            const T av = a[i * k + p];
            const T* brow = b + p * n;
            for (std::int64_t j = 0; j < n; ++j) {
                crow[j] += av * brow[j];
            }
        }
    }
}

// C(MxK) += A(MxN) * B(KxN)^T
template <typename T>
void gemm_nt(std::int64_t m, std::int64_t n, std::int64_t k, const T* a, const T* b, T* c)
{
    for (std::int64_t i = 0; i < m; ++i) {
        const T* arow = a + i * n;
        for (std::int64_t p = 0; p < k; ++p) {
            const T* brow = b + p * n;
            T acc = 0;
            for (std::int64_t j = 0; j < n; ++j) {
                acc += arow[j] * brow[j];
            }
            c[i * k + p] += acc;
        }
    }
}

// C(KxN) += A(MxK)^T * B(MxN)
template <typename T>
void gemm_tn(std::int64_t m, std::int64_t n, std::int64_t k, const T* a, const T* b, T* c)
{
    for (std::int64_t i = 0; i < m; ++i) {
        const T* brow = b + i * n;
        for (std::int64_t p = 0; p < k; ++p) {
            const T av = a[i * k + p];
            T* crow = c + p * n;
            for (std::int64_t j = 0; j < n; ++j) {
                crow[j] += av * brow[j];
            }
        }
    }
}

struct ConvLayout {
    std::int64_t n, c_in, h, w;
    std::int64_t c_out, c_in_group, c_out_group, kh, kw;
    AxisPad py, px;
    int stride, dilation, groups;

    std::int64_t rows() const { return c_in_group * kh * kw; }
    std::int64_t cols() const { return py.out * px.out; }
    bool pointwise() const
    {
        return kh == 1 && kw == 1 && stride == 1 && py.before == 0 && px.before == 0;
    }
};

ConvLayout layout(const Shape& x, const Shape& k, const ConvGeometry& g)
{
    if (g.stride < 1 || g.dilation < 1 || g.groups < 1) {
        throw ShapeError("stride, dilation and groups must be positive");
    }
    if (x.c != g.groups * k.c) {
        throw ShapeError("conv2d channel mismatch: input has " + std::to_string(x.c) + " channels, groups x "
                         + "kernel in-channels = " + std::to_string(g.groups) + " x " + std::to_string(k.c));
    }
    if (k.n % g.groups != 0) {
        throw ShapeError("conv2d output channels " + std::to_string(k.n) + " not divisible by groups "
                         + std::to_string(g.groups));
    }
    ConvLayout l{};
    l.n = x.n;
    l.c_in = x.c;
    l.h = x.h;
    l.w = x.w;
    l.c_out = k.n;
    l.c_in_group = k.c;
    l.c_out_group = k.n / g.groups;
    l.kh = k.h;
    l.kw = k.w;
    l.py = axis_padding(x.h, k.h, g);
    l.px = axis_padding(x.w, k.w, g);
    l.stride = g.stride;
    l.dilation = g.dilation;
    l.groups = g.groups;
    return l;
}

template <typename T>
void im2col(const T* x, const ConvLayout& l, T* col)
{
    const std::int64_t ow = l.px.out;
    const std::int64_t oh = l.py.out;
    for (std::int64_t ci = 0; ci < l.c_in_group; ++ci) {
        const T* plane = x + ci * l.h * l.w;
        for (std::int64_t ky = 0; ky < l.kh; ++ky) {
            for (std::int64_t kx = 0; kx < l.kw; ++kx) {
                T* row = col + ((ci * l.kh + ky) * l.kw + kx) * oh * ow;
                for (std::int64_t oy = 0; oy < oh; ++oy) {
                    const std::int64_t iy = oy * l.stride - l.py.before + ky * l.dilation;
                    T* dst = row + oy * ow;
                    if (iy < 0 || iy >= l.h) {
                        std::fill(dst, dst + ow, T(0));
                        continue;
                    }
                    const T* src = plane + iy * l.w;
                    for (std::int64_t ox = 0; ox < ow; ++ox) {
                        const std::int64_t ix = ox * l.stride - l.px.before + kx * l.dilation;
                        dst[ox] = (ix >= 0 && ix < l.w) ? src[ix] : T(0);
                    }
                }
            }
        }
    }
}

template <typename T>
void col2im(const T* col, const ConvLayout& l, T* dx)
{
    const std::int64_t ow = l.px.out;
    const std::int64_t oh = l.py.out;
    for (std::int64_t ci = 0; ci < l.c_in_group; ++ci) {
        T* plane = dx + ci * l.h * l.w;
        for (std::int64_t ky = 0; ky < l.kh; ++ky) {
            for (std::int64_t kx = 0; kx < l.kw; ++kx) {
                const T* row = col + ((ci * l.kh + ky) * l.kw + kx) * oh * ow;
                for (std::int64_t oy = 0; oy < oh; ++oy) {
                    const std::int64_t iy = oy * l.stride - l.py.before + ky * l.dilation;
                    if (iy < 0 || iy >= l.h) {
                        continue;
                    }
                    T* dst = plane + iy * l.w;
                    const T* src = row + oy * ow;
                    for (std::int64_t ox = 0; ox < ow; ++ox) {
                        const std::int64_t ix = ox * l.stride - l.px.before + kx * l.dilation;
                        if (ix >= 0 && ix < l.w) {
                            dst[ix] += src[ox];
                        }
                    }
                }
            }
        }
    }
}

// Valid output-column range [lo, hi) for which ox*stride + offset lands in [0, in).
void valid_range(std::int64_t out, std::int64_t in, int stride, std::int64_t offset, std::int64_t& lo,
                 std::int64_t& hi)
{
    lo = 0;
    while (lo < out && lo * stride + offset < 0) {
        ++lo;
    }
    hi = out;
    while (hi > lo && (hi - 1) * stride + offset >= in) {
        --hi;
    }
}

} // namespace

AxisPad axis_padding(std::int64_t in, std::int64_t kernel, const ConvGeometry& g)
{
    const std::int64_t effective = static_cast<std::int64_t>(g.dilation) * (kernel - 1) + 1;
    AxisPad pad;
    if (g.padding == Padding::Same) {
        if (kernel % 2 == 0) {
            throw ShapeError("same padding needs an odd kernel size, got " + std::to_string(kernel));
        }
        pad.out = (in + g.stride - 1) / g.stride;
        const std::int64_t total = std::max<std::int64_t>((pad.out - 1) * g.stride + effective - in, 0);
        pad.before = total / 2;
        pad.after = total - pad.before;
    } else {
        if (effective > in) {
            throw ShapeError("valid convolution: effective kernel " + std::to_string(effective)
                             + " exceeds input extent " + std::to_string(in));
        }
        pad.out = (in - effective) / g.stride + 1;
    }
    return pad;
}

Shape conv_output_shape(const Shape& input, const Shape& kernel, const ConvGeometry& g)
{
    const ConvLayout l = layout(input, kernel, g);
    return {l.n, l.c_out, l.py.out, l.px.out};
}

template <typename T>
BasicTensor<T> conv2d(const BasicTensor<T>& x, const BasicTensor<T>& weight, std::span<const T> bias,
                      const ConvGeometry& g)
{
    const ConvLayout l = layout(x.shape(), weight.shape(), g);
    if (!bias.empty() && static_cast<std::int64_t>(bias.size()) != l.c_out) {
        throw ShapeError("conv2d bias length " + dims(static_cast<std::int64_t>(bias.size()), l.c_out));
    }
    BasicTensor<T> y({l.n, l.c_out, l.py.out, l.px.out});
    const std::int64_t k = l.rows();
    const std::int64_t p = l.cols();
    std::vector<T> col(l.pointwise() ? 0 : static_cast<std::size_t>(k * p));
    for (std::int64_t n = 0; n < l.n; ++n) {
        for (int grp = 0; grp < l.groups; ++grp) {
            const T* xg = &x.at(n, grp * l.c_in_group, 0, 0);
            const T* cols = xg;
            if (!l.pointwise()) {
                im2col(xg, l, col.data());
                cols = col.data();
            }
            T* yg = &y.at(n, grp * l.c_out_group, 0, 0);
            const T* wg = weight.data() + grp * l.c_out_group * k;
            gemm_nn(l.c_out_group, p, k, wg, cols, yg);
        }
        if (!bias.empty()) {
            for (std::int64_t co = 0; co < l.c_out; ++co) {
                for (T& v : y.plane(n, co)) {
                    v += bias[co];
                }
            }
        }
    }
    return y;
}

template <typename T>
ConvGrads<T> conv2d_backward(const BasicTensor<T>& x, const BasicTensor<T>& weight, bool has_bias,
                             const ConvGeometry& g, const BasicTensor<T>& dy)
{
    const ConvLayout l = layout(x.shape(), weight.shape(), g);
    if (dy.shape() != Shape{l.n, l.c_out, l.py.out, l.px.out}) {
        throw ShapeError("conv2d_backward: gradient shape " + dy.shape().str() + " does not match output");
    }
    ConvGrads<T> grads{BasicTensor<T>(x.shape()), BasicTensor<T>(weight.shape()), {}};
    const std::int64_t k = l.rows();
    const std::int64_t p = l.cols();
    std::vector<T> col(l.pointwise() ? 0 : static_cast<std::size_t>(k * p));
    std::vector<T> dcol(static_cast<std::size_t>(k * p));
    for (std::int64_t n = 0; n < l.n; ++n) {
        for (int grp = 0; grp < l.groups; ++grp) {
            const T* xg = &x.at(n, grp * l.c_in_group, 0, 0);
            const T* cols = xg;
            if (!l.pointwise()) {
                im2col(xg, l, col.data());
                cols = col.data();
            }
            const T* dyg = &dy.at(n, grp * l.c_out_group, 0, 0);
            const T* wg = weight.data() + grp * l.c_out_group * k;
            gemm_nt(l.c_out_group, p, k, dyg, cols, grads.weight.data() + grp * l.c_out_group * k);
            T* dxg = &grads.input.at(n, grp * l.c_in_group, 0, 0);
            if (l.pointwise()) {
                gemm_tn(l.c_out_group, p, k, wg, dyg, dxg);
            } else {
                std::fill(dcol.begin(), dcol.end(), T(0));
                gemm_tn(l.c_out_group, p, k, wg, dyg, dcol.data());
                col2im(dcol.data(), l, dxg);
            }
        }
    }
    if (has_bias) {
        grads.bias.assign(static_cast<std::size_t>(l.c_out), T(0));
        for (std::int64_t n = 0; n < l.n; ++n) {
            for (std::int64_t co = 0; co < l.c_out; ++co) {
                T acc = 0;
                for (T v : dy.plane(n, co)) {
                    acc += v;
                }
                grads.bias[co] += acc;
            }
        }
    }
    return grads;
}

template <typename T>
BasicTensor<T> depthwise_conv2d(const BasicTensor<T>& x, const BasicTensor<T>& weight, const ConvGeometry& g)
{
    if (weight.n() != x.c() || weight.c() != 1) {
        throw ShapeError("depthwise_conv2d needs a (" + std::to_string(x.c()) + ",1,k,k) kernel, got "
                         + weight.shape().str());
    }
    ConvGeometry geo = g;
    geo.groups = static_cast<int>(x.c());
    const ConvLayout l = layout(x.shape(), weight.shape(), geo);
    BasicTensor<T> y({l.n, l.c_out, l.py.out, l.px.out});
    for (std::int64_t n = 0; n < l.n; ++n) {
        for (std::int64_t c = 0; c < l.c_in; ++c) {
            const T* src = &x.at(n, c, 0, 0);
            T* dst = &y.at(n, c, 0, 0);
            const T* wk = weight.data() + c * l.kh * l.kw;
            for (std::int64_t ky = 0; ky < l.kh; ++ky) {
                for (std::int64_t kx = 0; kx < l.kw; ++kx) {
                    const T wv = wk[ky * l.kw + kx];
                    const std::int64_t xoff = kx * l.dilation - l.px.before;
                    std::int64_t lo = 0;
                    std::int64_t hi = 0;
                    valid_range(l.px.out, l.w, l.stride, xoff, lo, hi);
                    for (std::int64_t oy = 0; oy < l.py.out; ++oy) {
                        const std::int64_t iy = oy * l.stride - l.py.before + ky * l.dilation;
                        if (iy < 0 || iy >= l.h) {
                            continue;
                        }
                        const T* srow = src + iy * l.w + xoff;
                        T* drow = dst + oy * l.px.out;
                        for (std::int64_t ox = lo; ox < hi; ++ox) {
                            drow[ox] += wv * srow[ox * l.stride];
                        }
                    }
                }
            }
        }
    }
    return y;
}

template <typename T>
ConvGrads<T> depthwise_conv2d_backward(const BasicTensor<T>& x, const BasicTensor<T>& weight,
                                       const ConvGeometry& g, const BasicTensor<T>& dy)
{
    if (weight.n() != x.c() || weight.c() != 1) {
        throw ShapeError("depthwise_conv2d_backward: kernel " + weight.shape().str() + " for "
                         + std::to_string(x.c()) + " channels");
    }
    ConvGeometry geo = g;
    geo.groups = static_cast<int>(x.c());
    const ConvLayout l = layout(x.shape(), weight.shape(), geo);
    if (dy.shape() != Shape{l.n, l.c_out, l.py.out, l.px.out}) {
        throw ShapeError("depthwise_conv2d_backward: gradient shape " + dy.shape().str());
    }
    ConvGrads<T> grads{BasicTensor<T>(x.shape()), BasicTensor<T>(weight.shape()), {}};
    for (std::int64_t n = 0; n < l.n; ++n) {
        for (std::int64_t c = 0; c < l.c_in; ++c) {
            const T* src = &x.at(n, c, 0, 0);
            T* dsrc = &grads.input.at(n, c, 0, 0);
            const T* dout = &dy.at(n, c, 0, 0);
            const T* wk = weight.data() + c * l.kh * l.kw;
            T* dwk = grads.weight.data() + c * l.kh * l.kw;
            for (std::int64_t ky = 0; ky < l.kh; ++ky) {
                for (std::int64_t kx = 0; kx < l.kw; ++kx) {
                    const T wv = wk[ky * l.kw + kx];
                    const std::int64_t xoff = kx * l.dilation - l.px.before;
                    std::int64_t lo = 0;
                    std::int64_t hi = 0;
                    valid_range(l.px.out, l.w, l.stride, xoff, lo, hi);
                    T acc = 0;
                    for (std::int64_t oy = 0; oy < l.py.out; ++oy) {
                        const std::int64_t iy = oy * l.stride - l.py.before + ky * l.dilation;
                        if (iy < 0 || iy >= l.h) {
                            continue;
                        }
                        const T* srow = src + iy * l.w + xoff;
                        T* dsrow = dsrc + iy * l.w + xoff;
                        const T* drow = dout + oy * l.px.out;
                        for (std::int64_t ox = lo; ox < hi; ++ox) {
                            acc += drow[ox] * srow[ox * l.stride];
                            dsrow[ox * l.stride] += wv * drow[ox];
                        }
                    }
                    dwk[ky * l.kw + kx] += acc;
                }
            }
        }
    }
    return grads;
}

template <typename T>
BatchNormTrainOutput<T> batchnorm_train(const BasicTensor<T>& x, std::span<const T> gamma,
                                        std::span<const T> beta, T epsilon)
{
    const auto channels = static_cast<std::size_t>(x.c());
    if (gamma.size() != channels || beta.size() != channels) {
        throw ShapeError("batchnorm parameters sized " + std::to_string(gamma.size()) + " for "
                         + std::to_string(channels) + " channels");
    }
    BatchNormTrainOutput<T> out{BasicTensor<T>(x.shape()), BasicTensor<T>(x.shape()),
                                std::vector<T>(channels), std::vector<T>(channels), std::vector<T>(channels)};
    const double count = static_cast<double>(x.n() * x.h() * x.w());
    for (std::int64_t c = 0; c < x.c(); ++c) {
        double sum = 0.0;
        for (std::int64_t n = 0; n < x.n(); ++n) {
            for (T v : x.plane(n, c)) {
                sum += v;
            }
        }
        const double mean = sum / count;
        double sq = 0.0;
        for (std::int64_t n = 0; n < x.n(); ++n) {
            for (T v : x.plane(n, c)) {
                sq += (v - mean) * (v - mean);
            }
        }
        const double var = sq / count;
        const double inv_std = 1.0 / std::sqrt(var + static_cast<double>(epsilon));
        out.mean[c] = static_cast<T>(mean);
        out.var[c] = static_cast<T>(var);
        out.inv_std[c] = static_cast<T>(inv_std);
        for (std::int64_t n = 0; n < x.n(); ++n) {
            auto src = x.plane(n, c);
            auto xhat = out.normalized.plane(n, c);
            auto dst = out.y.plane(n, c);
            for (std::size_t i = 0; i < src.size(); ++i) {
                xhat[i] = static_cast<T>((src[i] - mean) * inv_std);
                dst[i] = gamma[c] * xhat[i] + beta[c];
            }
        }
    }
    return out;
}

template <typename T>
BatchNormGrads<T> batchnorm_train_backward(const BatchNormTrainOutput<T>& fwd, std::span<const T> gamma,
                                           const BasicTensor<T>& dy)
{
    const Shape& s = fwd.normalized.shape();
    BatchNormGrads<T> grads{BasicTensor<T>(s), std::vector<T>(s.c), std::vector<T>(s.c)};
    const double count = static_cast<double>(s.n * s.h * s.w);
    for (std::int64_t c = 0; c < s.c; ++c) {
        double sum_dy = 0.0;
        double sum_dy_xhat = 0.0;
        for (std::int64_t n = 0; n < s.n; ++n) {
            auto d = dy.plane(n, c);
            auto xhat = fwd.normalized.plane(n, c);
            for (std::size_t i = 0; i < d.size(); ++i) {
                sum_dy += d[i];
                sum_dy_xhat += static_cast<double>(d[i]) * xhat[i];
            }
        }
        grads.gamma[c] = static_cast<T>(sum_dy_xhat);
        grads.beta[c] = static_cast<T>(sum_dy);
        const double scale = static_cast<double>(gamma[c]) * fwd.inv_std[c] / count;
        for (std::int64_t n = 0; n < s.n; ++n) {
            auto d = dy.plane(n, c);
            auto xhat = fwd.normalized.plane(n, c);
            auto dx = grads.input.plane(n, c);
            for (std::size_t i = 0; i < d.size(); ++i) {
                dx[i] = static_cast<T>(scale * (count * d[i] - sum_dy - xhat[i] * sum_dy_xhat));
            }
        }
    }
    return grads;
}

template <typename T>
BasicTensor<T> batchnorm_infer(const BasicTensor<T>& x, std::span<const T> gamma, std::span<const T> beta,
                               std::span<const T> running_mean, std::span<const T> running_var, T epsilon)
{
    const auto channels = static_cast<std::size_t>(x.c());
    if (gamma.size() != channels || beta.size() != channels || running_mean.size() != channels
        || running_var.size() != channels) {
        throw ShapeError("batchnorm parameters do not match " + std::to_string(channels) + " channels");
    }
    BasicTensor<T> y(x.shape());
    for (std::int64_t c = 0; c < x.c(); ++c) {
        const T scale = gamma[c] / std::sqrt(running_var[c] + epsilon);
        const T shift = beta[c] - running_mean[c] * scale;
        for (std::int64_t n = 0; n < x.n(); ++n) {
            auto src = x.plane(n, c);
            auto dst = y.plane(n, c);
            for (std::size_t i = 0; i < src.size(); ++i) {
                dst[i] = src[i] * scale + shift;
            }
        }
    }
    return y;
}

template <typename T>
BatchNormGrads<T> batchnorm_infer_backward(const BasicTensor<T>& x, std::span<const T> gamma,
                                           std::span<const T> running_mean, std::span<const T> running_var,
                                           T epsilon, const BasicTensor<T>& dy)
{
    BatchNormGrads<T> grads{BasicTensor<T>(x.shape()), std::vector<T>(x.c()), std::vector<T>(x.c())};
    for (std::int64_t c = 0; c < x.c(); ++c) {
        const T inv_std = T(1) / std::sqrt(running_var[c] + epsilon);
        T dg = 0;
        T db = 0;
        for (std::int64_t n = 0; n < x.n(); ++n) {
            auto src = x.plane(n, c);
            auto d = dy.plane(n, c);
            auto dx = grads.input.plane(n, c);
            for (std::size_t i = 0; i < src.size(); ++i) {
                dg += d[i] * (src[i] - running_mean[c]) * inv_std;
                db += d[i];
                dx[i] = d[i] * gamma[c] * inv_std;
            }
        }
        grads.gamma[c] = dg;
        grads.beta[c] = db;
    }
    return grads;
}

template <typename T>
BasicTensor<T> relu(const BasicTensor<T>& x)
{
    BasicTensor<T> y(x.shape());
    std::transform(x.values().begin(), x.values().end(), y.values().begin(),
                   [](T v) { return v > T(0) ? v : T(0); });
    return y;
}

template <typename T>
BasicTensor<T> relu_backward(const BasicTensor<T>& x, const BasicTensor<T>& dy)
{
    BasicTensor<T> dx(x.shape());
    for (std::int64_t i = 0; i < x.size(); ++i) {
        dx[i] = x[i] > T(0) ? dy[i] : T(0);
    }
    return dx;
}

template <typename T>
BasicTensor<T> sigmoid(const BasicTensor<T>& x)
{
    BasicTensor<T> y(x.shape());
    std::transform(x.values().begin(), x.values().end(), y.values().begin(), [](T v) {
        if (v >= T(0)) {
            return T(1) / (T(1) + std::exp(-v));
        }
        const T e = std::exp(v);
        return e / (T(1) + e);
    });
    return y;
}

template <typename T>
BasicTensor<T> sigmoid_backward(const BasicTensor<T>& y, const BasicTensor<T>& dy)
{
    BasicTensor<T> dx(y.shape());
    for (std::int64_t i = 0; i < y.size(); ++i) {
        dx[i] = dy[i] * y[i] * (T(1) - y[i]);
    }
    return dx;
}

namespace {

struct LerpTap {
    std::int64_t i0;
    std::int64_t i1;
    double frac;
};

std::vector<LerpTap> lerp_taps(std::int64_t in, std::int64_t out)
{
    std::vector<LerpTap> taps(static_cast<std::size_t>(out));
    const double scale = static_cast<double>(in) / static_cast<double>(out);
    for (std::int64_t o = 0; o < out; ++o) {
        double src = (static_cast<double>(o) + 0.5) * scale - 0.5;
        if (src < 0.0) {
            src = 0.0;
        }
        auto i0 = static_cast<std::int64_t>(std::floor(src));
        if (i0 > in - 1) {
            i0 = in - 1;
        }
        const std::int64_t i1 = std::min(i0 + 1, in - 1);
        taps[o] = {i0, i1, src - static_cast<double>(i0)};
    }
    return taps;
}

} // namespace

template <typename T>
BasicTensor<T> resize_bilinear(const BasicTensor<T>& x, std::int64_t out_h, std::int64_t out_w)
{
    BasicTensor<T> y({x.n(), x.c(), out_h, out_w});
    const auto ty = lerp_taps(x.h(), out_h);
    const auto tx = lerp_taps(x.w(), out_w);
    for (std::int64_t n = 0; n < x.n(); ++n) {
        for (std::int64_t c = 0; c < x.c(); ++c) {
            const T* src = &x.at(n, c, 0, 0);
            T* dst = &y.at(n, c, 0, 0);
            for (std::int64_t oy = 0; oy < out_h; ++oy) {
                const auto& a = ty[oy];
                const T* r0 = src + a.i0 * x.w();
                const T* r1 = src + a.i1 * x.w();
                const T fy = static_cast<T>(a.frac);
                for (std::int64_t ox = 0; ox < out_w; ++ox) {
                    const auto& b = tx[ox];
                    const T fx = static_cast<T>(b.frac);
                    const T top = r0[b.i0] + (r0[b.i1] - r0[b.i0]) * fx;
                    const T bottom = r1[b.i0] + (r1[b.i1] - r1[b.i0]) * fx;
                    dst[oy * out_w + ox] = top + (bottom - top) * fy;
                }
            }
        }
    }
    return y;
}

template <typename T>
BasicTensor<T> resize_bilinear_backward(const Shape& input_shape, const BasicTensor<T>& dy)
{
    BasicTensor<T> dx(input_shape);
    const auto ty = lerp_taps(input_shape.h, dy.h());
    const auto tx = lerp_taps(input_shape.w, dy.w());
    for (std::int64_t n = 0; n < dy.n(); ++n) {
        for (std::int64_t c = 0; c < dy.c(); ++c) {
            T* dst = &dx.at(n, c, 0, 0);
            const T* src = &dy.at(n, c, 0, 0);
            for (std::int64_t oy = 0; oy < dy.h(); ++oy) {
                const auto& a = ty[oy];
                T* r0 = dst + a.i0 * input_shape.w;
                T* r1 = dst + a.i1 * input_shape.w;
                const T fy = static_cast<T>(a.frac);
                for (std::int64_t ox = 0; ox < dy.w(); ++ox) {
                    const auto& b = tx[ox];
                    const T fx = static_cast<T>(b.frac);
                    const T g = src[oy * dy.w() + ox];
                    r0[b.i0] += g * (T(1) - fy) * (T(1) - fx);
                    r0[b.i1] += g * (T(1) - fy) * fx;
                    r1[b.i0] += g * fy * (T(1) - fx);
                    r1[b.i1] += g * fy * fx;
                }
            }
        }
    }
    return dx;
}

template <typename T>
BasicTensor<T> upsample_bilinear(const BasicTensor<T>& x, int factor)
{
    if (factor < 1) {
        throw ShapeError("upsample factor must be >= 1, got " + std::to_string(factor));
    }
    if (factor == 1) {
        return x;
    }
    return resize_bilinear(x, x.h() * factor, x.w() * factor);
}

template <typename T>
BasicTensor<T> concat_channels(std::span<const BasicTensor<T>* const> xs)
{
    if (xs.empty()) {
        throw ShapeError("concat_channels needs at least one tensor");
    }
    const Shape& first = xs.front()->shape();
    std::int64_t channels = 0;
    for (const auto* t : xs) {
        const Shape& s = t->shape();
        if (s.n != first.n || s.h != first.h || s.w != first.w) {
            throw ShapeError("concat_channels spatial mismatch: " + first.str() + " vs " + s.str());
        }
        channels += s.c;
    }
    BasicTensor<T> y({first.n, channels, first.h, first.w});
    for (std::int64_t n = 0; n < first.n; ++n) {
        T* dst = &y.at(n, 0, 0, 0);
        for (const auto* t : xs) {
            const T* src = &t->at(n, 0, 0, 0);
            dst = std::copy(src, src + t->c() * first.h * first.w, dst);
        }
    }
    return y;
}

template <typename T>
BasicTensor<T> slice_channels(const BasicTensor<T>& x, std::int64_t begin, std::int64_t count)
{
    if (begin < 0 || count < 1 || begin + count > x.c()) {
        throw ShapeError("slice_channels [" + std::to_string(begin) + ", " + std::to_string(begin + count)
                         + ") outside " + std::to_string(x.c()) + " channels");
    }
    BasicTensor<T> y({x.n(), count, x.h(), x.w()});
    for (std::int64_t n = 0; n < x.n(); ++n) {
        const T* src = &x.at(n, begin, 0, 0);
        std::copy(src, src + count * x.h() * x.w(), &y.at(n, 0, 0, 0));
    }
    return y;
}

template <typename T>
BasicTensor<T> global_avg_pool(const BasicTensor<T>& x)
{
    BasicTensor<T> y({x.n(), x.c(), 1, 1});
    const double count = static_cast<double>(x.h() * x.w());
    for (std::int64_t n = 0; n < x.n(); ++n) {
        for (std::int64_t c = 0; c < x.c(); ++c) {
            double sum = 0.0;
            for (T v : x.plane(n, c)) {
                sum += v;
            }
            y.at(n, c, 0, 0) = static_cast<T>(sum / count);
        }
    }
    return y;
}

template <typename T>
BasicTensor<T> global_avg_pool_backward(const Shape& input_shape, const BasicTensor<T>& dy)
{
    BasicTensor<T> dx(input_shape);
    const T inv = T(1) / static_cast<T>(input_shape.h * input_shape.w);
    for (std::int64_t n = 0; n < input_shape.n; ++n) {
        for (std::int64_t c = 0; c < input_shape.c; ++c) {
            const T g = dy.at(n, c, 0, 0) * inv;
            for (T& v : dx.plane(n, c)) {
                v = g;
            }
        }
    }
    return dx;
}

template <typename T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b)
{
    if (a.shape() != b.shape()) {
        throw ShapeError("add shape mismatch: " + a.shape().str() + " vs " + b.shape().str());
    }
    BasicTensor<T> y(a.shape());
    for (std::int64_t i = 0; i < a.size(); ++i) {
        y[i] = a[i] + b[i];
    }
    return y;
}

#define CLOUDSEG_INSTANTIATE_KERNELS(T)                                                                     \
    template BasicTensor<T> conv2d(const BasicTensor<T>&, const BasicTensor<T>&, std::span<const T>,       \
                                   const ConvGeometry&);                                                   \
    template ConvGrads<T> conv2d_backward(const BasicTensor<T>&, const BasicTensor<T>&, bool,              \
                                          const ConvGeometry&, const BasicTensor<T>&);                     \
    template BasicTensor<T> depthwise_conv2d(const BasicTensor<T>&, const BasicTensor<T>&,                 \
                                             const ConvGeometry&);                                         \
    template ConvGrads<T> depthwise_conv2d_backward(const BasicTensor<T>&, const BasicTensor<T>&,          \
                                                    const ConvGeometry&, const BasicTensor<T>&);           \
    template BatchNormTrainOutput<T> batchnorm_train(const BasicTensor<T>&, std::span<const T>,            \
                                                     std::span<const T>, T);                               \
    template BatchNormGrads<T> batchnorm_train_backward(const BatchNormTrainOutput<T>&,                    \
                                                        std::span<const T>, const BasicTensor<T>&);        \
    template BasicTensor<T> batchnorm_infer(const BasicTensor<T>&, std::span<const T>, std::span<const T>, \
                                            std::span<const T>, std::span<const T>, T);                    \
    template BatchNormGrads<T> batchnorm_infer_backward(const BasicTensor<T>&, std::span<const T>,         \
                                                        std::span<const T>, std::span<const T>, T,         \
                                                        const BasicTensor<T>&);                            \
    template BasicTensor<T> relu(const BasicTensor<T>&);                                                   \
    template BasicTensor<T> relu_backward(const BasicTensor<T>&, const BasicTensor<T>&);                   \
    template BasicTensor<T> sigmoid(const BasicTensor<T>&);                                                \
    template BasicTensor<T> sigmoid_backward(const BasicTensor<T>&, const BasicTensor<T>&);                \
    template BasicTensor<T> resize_bilinear(const BasicTensor<T>&, std::int64_t, std::int64_t);            \
    template BasicTensor<T> resize_bilinear_backward(const Shape&, const BasicTensor<T>&);                 \
    template BasicTensor<T> upsample_bilinear(const BasicTensor<T>&, int);                                 \
    template BasicTensor<T> concat_channels(std::span<const BasicTensor<T>* const>);                       \
    template BasicTensor<T> slice_channels(const BasicTensor<T>&, std::int64_t, std::int64_t);             \
    template BasicTensor<T> global_avg_pool(const BasicTensor<T>&);                                        \
    template BasicTensor<T> global_avg_pool_backward(const Shape&, const BasicTensor<T>&);                 \
    template BasicTensor<T> add(const BasicTensor<T>&, const BasicTensor<T>&);

CLOUDSEG_INSTANTIATE_KERNELS(float)
CLOUDSEG_INSTANTIATE_KERNELS(double)

#undef CLOUDSEG_INSTANTIATE_KERNELS

} // namespace cloudseg::kernels
