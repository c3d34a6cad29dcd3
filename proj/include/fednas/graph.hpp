#pragma once

#include <cstdint>
#include <cstring>
#include <functional>
#include <string>
#include <vector>

#include "fednas/param_store.hpp"
#include "fednas/tensor.hpp"

namespace fednas {

// Reverse-mode engine over a small fixed vocabulary of dense primitives.
// A graph is append-only; insertion order is the topological order and the
// backward pass walks it in strict reverse. One graph serves one
// forward/backward over one batch and is then discarded.

enum class PrimKind {
    Input,        // constant leaf (batch data)
    ParamLeaf,    // leaf viewing a store parameter
    Zeros,        // constant zeros of a given shape
    Relu,
    Conv2d,       // param: weight (Cout, Cin/groups, KH, KW), no bias
    BatchNorm,    // batch statistics only, no affine
    MaxPool,      // 3x3, pad 1
    AvgPool,      // 3x3, pad 1, average over valid (in-bounds) entries
    OffsetCrop,   // y = x[:, :, 1:, 1:]
    ConcatChannels,
    AddN,
    GlobalAvgPool,
    Linear,       // params: weight (out, in), bias (out)
    SoftmaxVec,   // softmax over a length-d vector
    RowSlice,     // one row of a 2-D parameter
    WeightedSum,  // inputs: coeff vector node, then one tensor node per coeff
    SoftmaxCrossEntropy,  // mean over batch; scalar output
    InnerConst,   // scalar dot with a fixed coefficient tensor (test harness)
};

struct ConvSpec {
    int stride = 1;
    int pad = 0;
    int dilation = 1;
    int groups = 1;
};

constexpr double kBatchNormEps = 1e-9;

struct GraphNode {
    PrimKind kind;
    std::vector<int> inputs;  // node ids
    std::vector<int> params;  // store parameter ids
    Tensor value;
    bool requires_grad = false;

    ConvSpec conv;
    int iarg = 0;                // pool stride / row index
    Tensor aux;                  // bn (mean,invstd) / sce probs / inner coeffs
    std::vector<std::int32_t> idx;  // maxpool argmax / sce labels
};

namespace detail {

inline void conv_out_range(int W, int Wout, int stride, int pad, int off, int& lo, int& hi) {
    // valid ow where iw = ow*stride - pad + off lies in [0, W)
    int lo_num = pad - off;
    lo = lo_num <= 0 ? 0 : (lo_num + stride - 1) / stride;
    int hi_num = W - 1 + pad - off;
    hi = hi_num < 0 ? -1 : hi_num / stride;
    if (hi >= Wout) hi = Wout - 1;
}

inline int conv_out_extent(int in, int k, int stride, int pad, int dilation) {
    int span = (k - 1) * dilation + 1;
    return (in + 2 * pad - span) / stride + 1;
}

inline void axpy(double* __restrict__ y, const double* __restrict__ x, double a, std::int64_t n) {
    for (std::int64_t i = 0; i < n; ++i) y[i] += a * x[i];
}

inline double dot(const double* __restrict__ x, const double* __restrict__ y, std::int64_t n) {
    double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
    std::int64_t i = 0;
    for (; i + 4 <= n; i += 4) {
        s0 += x[i] * y[i];
        s1 += x[i + 1] * y[i + 1];
        s2 += x[i + 2] * y[i + 2];
        s3 += x[i + 3] * y[i + 3];
    }
    for (; i < n; ++i) s0 += x[i] * y[i];
    return (s0 + s1) + (s2 + s3);
}

inline void add_into(double* __restrict__ y, const double* __restrict__ x, std::int64_t n) {
    for (std::int64_t i = 0; i < n; ++i) y[i] += x[i];
}

// Specialized depthwise stride-1 stencils. One zero-padded scratch plane per
// thread; K and DIL are compile-time so the tap loops fully unroll.
inline std::vector<double>& dw_scratch() {
    thread_local std::vector<double> buf;
    return buf;
}

template <int K, int DIL>
inline void dw_pad_copy(const double* __restrict__ in, int H, int W, double* __restrict__ pad) {
    constexpr int P = (K - 1) * DIL / 2;
    const int Wp = W + 2 * P;
    std::memset(pad, 0, sizeof(double) * static_cast<size_t>(Wp) * (H + 2 * P));
    for (int h = 0; h < H; ++h)
        std::memcpy(pad + static_cast<std::int64_t>(h + P) * Wp + P,
                    in + static_cast<std::int64_t>(h) * W, sizeof(double) * static_cast<size_t>(W));
}

template <int K, int DIL, bool ACCUM>
inline void dw_stencil(const double* __restrict__ pad, int H, int W,
                       const double* __restrict__ wk, double* __restrict__ out) {
    constexpr int P = (K - 1) * DIL / 2;
    const int Wp = W + 2 * P;
    for (int oh = 0; oh < H; ++oh) {
        const double* base = pad + static_cast<std::int64_t>(oh) * Wp;
        double* orow = out + static_cast<std::int64_t>(oh) * W;
        for (int ow = 0; ow < W; ++ow) {
            double acc = 0.0;
            for (int kh = 0; kh < K; ++kh)
                for (int kw = 0; kw < K; ++kw)
                    acc += wk[kh * K + kw] * base[(kh * DIL) * Wp + ow + kw * DIL];
            if (ACCUM)
                orow[ow] += acc;
            else
                orow[ow] = acc;
        }
    }
}

template <int K, int DIL>
inline void dw_weight_grad(const double* __restrict__ pad, int H, int W,
                           const double* __restrict__ gout, double* __restrict__ gw) {
    constexpr int P = (K - 1) * DIL / 2;
    const int Wp = W + 2 * P;
    for (int kh = 0; kh < K; ++kh) {
        double acc[K] = {};
        for (int oh = 0; oh < H; ++oh) {
            const double* grow = gout + static_cast<std::int64_t>(oh) * W;
            const double* irow = pad + static_cast<std::int64_t>(oh + kh * DIL) * Wp;
            for (int ow = 0; ow < W; ++ow) {
                double g = grow[ow];
                for (int kw = 0; kw < K; ++kw) acc[kw] += g * irow[ow + kw * DIL];
            }
        }
        for (int kw = 0; kw < K; ++kw) gw[kh * K + kw] += acc[kw];
    }
}

}  // namespace detail

class ComputeGraph {
  public:
    explicit ComputeGraph(const ParamStore& store) : store_(&store) {}

    int size() const { return static_cast<int>(nodes_.size()); }
    const GraphNode& node(int id) const { return nodes_.at(id); }

    const Tensor& value(int id) const {
        const GraphNode& n = nodes_.at(id);
        if (n.kind == PrimKind::ParamLeaf) return store_->value(n.params[0]);
        return n.value;
    }

    int input(Tensor batch) {
        GraphNode n{PrimKind::Input};
        n.value = std::move(batch);
        return push(std::move(n));
    }

    int param(int param_id) {
        GraphNode n{PrimKind::ParamLeaf};
        n.params = {param_id};
        n.requires_grad = true;
        return push(std::move(n));
    }

    int zeros(Shape shape) {
        GraphNode n{PrimKind::Zeros};
        n.value = Tensor::zeros(std::move(shape));
        return push(std::move(n));
    }

    int relu(int x) {
        const Tensor& in = value(x);
        GraphNode n{PrimKind::Relu, {x}};
        n.value = Tensor(in.shape());
        const double* __restrict__ s = in.data();
        double* __restrict__ d = n.value.data();
        for (std::int64_t i = 0; i < in.numel(); ++i) d[i] = std::max(s[i], 0.0);
        return push(std::move(n));
    }

    int conv2d(int x, int weight_id, ConvSpec spec) {
        const Tensor& in = value(x);
        const Tensor& w = store_->value(weight_id);
        if (in.rank() != 4 || w.rank() != 4)
            throw ShapeError("conv2d: expects rank-4 input and weight, got " +
                             shape_str(in.shape()) + " and " + shape_str(w.shape()));
        int N = in.dim(0), C = in.dim(1), H = in.dim(2), W = in.dim(3);
        int Cout = w.dim(0), Cg = w.dim(1), KH = w.dim(2), KW = w.dim(3);
        if (C != Cg * spec.groups || Cout % spec.groups != 0)
            throw ShapeError("conv2d: channel mismatch, input " + shape_str(in.shape()) +
                             " weight " + shape_str(w.shape()) + " groups " +
                             std::to_string(spec.groups));
        int Hout = detail::conv_out_extent(H, KH, spec.stride, spec.pad, spec.dilation);
        int Wout = detail::conv_out_extent(W, KW, spec.stride, spec.pad, spec.dilation);
        if (Hout <= 0 || Wout <= 0)
            throw ShapeError("conv2d: empty output for input " + shape_str(in.shape()));

        GraphNode n{PrimKind::Conv2d, {x}, {weight_id}};
        n.conv = spec;
        n.value = Tensor({N, Cout, Hout, Wout});
        conv_forward(in, w, n.value, spec);
        return push(std::move(n));
    }

    int batch_norm(int x) {
        const Tensor& in = value(x);
        if (in.rank() != 4) throw ShapeError("batch_norm: expects NCHW input");
        int N = in.dim(0), C = in.dim(1), H = in.dim(2), W = in.dim(3);
        std::int64_t plane = static_cast<std::int64_t>(H) * W;
        std::int64_t m = static_cast<std::int64_t>(N) * plane;

        GraphNode n{PrimKind::BatchNorm, {x}};
        n.value = Tensor(in.shape());
        n.aux = Tensor({2, C});
        for (int c = 0; c < C; ++c) {
            double sum = 0.0, sumsq = 0.0;
            for (int b = 0; b < N; ++b) {
                const double* __restrict__ p =
                    in.data() + (static_cast<std::int64_t>(b) * C + c) * plane;
                double a0 = 0.0, a1 = 0.0, q0 = 0.0, q1 = 0.0;
                std::int64_t i = 0;
                for (; i + 2 <= plane; i += 2) {
                    a0 += p[i];
                    a1 += p[i + 1];
                    q0 += p[i] * p[i];
                    q1 += p[i + 1] * p[i + 1];
                }
                if (i < plane) {
                    a0 += p[i];
                    q0 += p[i] * p[i];
                }
                sum += a0 + a1;
                sumsq += q0 + q1;
            }
            double mean = sum / static_cast<double>(m);
            double var = sumsq / static_cast<double>(m) - mean * mean;
            if (var < 0.0) var = 0.0;
            double invstd = 1.0 / std::sqrt(var + kBatchNormEps);
            n.aux[c] = mean;
            n.aux[C + c] = invstd;
            for (int b = 0; b < N; ++b) {
                const double* p = in.data() + (static_cast<std::int64_t>(b) * C + c) * plane;
                double* q = n.value.data() + (static_cast<std::int64_t>(b) * C + c) * plane;
                for (std::int64_t i = 0; i < plane; ++i) q[i] = (p[i] - mean) * invstd;
            }
        }
        return push(std::move(n));
    }

    int max_pool3(int x, int stride) {
        const Tensor& in = value(x);
        if (in.rank() != 4) throw ShapeError("max_pool_3x3: expects NCHW input");
        int N = in.dim(0), C = in.dim(1), H = in.dim(2), W = in.dim(3);
        int Hout = detail::conv_out_extent(H, 3, stride, 1, 1);
        int Wout = detail::conv_out_extent(W, 3, stride, 1, 1);
        GraphNode n{PrimKind::MaxPool, {x}};
        n.iarg = stride;
        n.value = Tensor({N, C, Hout, Wout});
        n.idx.resize(static_cast<size_t>(n.value.numel()));
        std::int64_t o = 0;
        for (int b = 0; b < N; ++b)
            for (int c = 0; c < C; ++c) {
                const double* p = in.data() + (static_cast<std::int64_t>(b) * C + c) * H * W;
                double* vo = n.value.data() + o;
                std::int32_t* io = n.idx.data() + o;
                o += static_cast<std::int64_t>(Hout) * Wout;
                for (int oh = 0; oh < Hout; ++oh) {
                    int ih0 = std::max(0, oh * stride - 1), ih1 = std::min(H - 1, oh * stride + 1);
                    // interior columns see the full 3-wide window
                    constexpr int ow_full_lo = 1;
                    int ow_full_hi = std::min(Wout - 1, (W - 2) / stride);
                    for (int ow = 0; ow < Wout; ++ow) {
                        double best;
                        int best_i;
                        if (ow >= ow_full_lo && ow <= ow_full_hi) {
                            int iwb = ow * stride - 1;
                            best = -1e308;
                            best_i = -1;
                            for (int ih = ih0; ih <= ih1; ++ih) {
                                const double* r = p + ih * W + iwb;
                                int base = ih * W + iwb;
                                // first maximal index in scan order wins
                                bool g0 = r[0] > best;
                                best = g0 ? r[0] : best;
                                best_i = g0 ? base : best_i;
                                bool g1 = r[1] > best;
                                best = g1 ? r[1] : best;
                                best_i = g1 ? base + 1 : best_i;
                                bool g2 = r[2] > best;
                                best = g2 ? r[2] : best;
                                best_i = g2 ? base + 2 : best_i;
                            }
                        } else {
                            int iw0 = std::max(0, ow * stride - 1),
                                iw1 = std::min(W - 1, ow * stride + 1);
                            best = -1e308;
                            best_i = -1;
                            for (int ih = ih0; ih <= ih1; ++ih)
                                for (int iw = iw0; iw <= iw1; ++iw) {
                                    double v = p[ih * W + iw];
                                    bool gt = v > best;
                                    best = gt ? v : best;
                                    best_i = gt ? ih * W + iw : best_i;
                                }
                        }
                        vo[oh * Wout + ow] = best;
                        io[oh * Wout + ow] = best_i;
                    }
                }
            }
        return push(std::move(n));
    }

    int avg_pool3(int x, int stride) {
        const Tensor& in = value(x);
        if (in.rank() != 4) throw ShapeError("avg_pool_3x3: expects NCHW input");
        int N = in.dim(0), C = in.dim(1), H = in.dim(2), W = in.dim(3);
        int Hout = detail::conv_out_extent(H, 3, stride, 1, 1);
        int Wout = detail::conv_out_extent(W, 3, stride, 1, 1);
        GraphNode n{PrimKind::AvgPool, {x}};
        n.iarg = stride;
        n.value = Tensor({N, C, Hout, Wout});
        std::int64_t o = 0;
        for (int b = 0; b < N; ++b)
            for (int c = 0; c < C; ++c) {
                const double* p = in.data() + (static_cast<std::int64_t>(b) * C + c) * H * W;
                double* vo = n.value.data() + o;
                o += static_cast<std::int64_t>(Hout) * Wout;
                for (int oh = 0; oh < Hout; ++oh) {
                    int ih0 = std::max(0, oh * stride - 1), ih1 = std::min(H - 1, oh * stride + 1);
                    int ow_full_hi = std::min(Wout - 1, (W - 2) / stride);
                    double* orow = vo + oh * Wout;
                    if (ih1 - ih0 == 2 && stride == 1) {
                        const double* r0 = p + (ih0 + 0) * W;
                        const double* r1 = p + (ih0 + 1) * W;
                        const double* r2 = p + (ih0 + 2) * W;
                        for (int ow = 1; ow <= ow_full_hi; ++ow)
                            orow[ow] = (r0[ow - 1] + r0[ow] + r0[ow + 1] + r1[ow - 1] + r1[ow] +
                                        r1[ow + 1] + r2[ow - 1] + r2[ow] + r2[ow + 1]) /
                                       9.0;
                    } else {
                        for (int ow = 1; ow <= ow_full_hi; ++ow) {
                            int iwb = ow * stride - 1;
                            double sum = 0.0;
                            for (int ih = ih0; ih <= ih1; ++ih) {
                                const double* r = p + ih * W + iwb;
                                sum += r[0] + r[1] + r[2];
                            }
                            orow[ow] = sum / (3 * (ih1 - ih0 + 1));
                        }
                    }
                    auto edge_col = [&](int ow) {
                        int iw0 = std::max(0, ow * stride - 1),
                            iw1 = std::min(W - 1, ow * stride + 1);
                        double sum = 0.0;
                        for (int ih = ih0; ih <= ih1; ++ih)
                            for (int iw = iw0; iw <= iw1; ++iw) sum += p[ih * W + iw];
                        orow[ow] = sum / ((ih1 - ih0 + 1) * (iw1 - iw0 + 1));
                    };
                    edge_col(0);
                    for (int ow = ow_full_hi + 1; ow < Wout; ++ow) edge_col(ow);
                }
            }
        return push(std::move(n));
    }

    int offset_crop(int x) {
        const Tensor& in = value(x);
        int N = in.dim(0), C = in.dim(1), H = in.dim(2), W = in.dim(3);
        if (H < 2 || W < 2) throw ShapeError("offset_crop: spatial extent too small");
        GraphNode n{PrimKind::OffsetCrop, {x}};
        n.value = Tensor({N, C, H - 1, W - 1});
        for (int b = 0; b < N; ++b)
            for (int c = 0; c < C; ++c) {
                const double* p = in.data() + (static_cast<std::int64_t>(b) * C + c) * H * W;
                double* q = n.value.data() + (static_cast<std::int64_t>(b) * C + c) * (H - 1) * (W - 1);
                for (int h = 0; h < H - 1; ++h)
                    for (int w = 0; w < W - 1; ++w) q[h * (W - 1) + w] = p[(h + 1) * W + (w + 1)];
            }
        return push(std::move(n));
    }

    int concat_channels(const std::vector<int>& xs) {
        if (xs.empty()) throw ShapeError("concat_channels: no inputs");
        const Tensor& first = value(xs[0]);
        int N = first.dim(0), H = first.dim(2), W = first.dim(3);
        int Ctot = 0;
        for (int x : xs) {
            const Tensor& t = value(x);
            if (t.dim(0) != N || t.dim(2) != H || t.dim(3) != W)
                throw ShapeError("concat_channels: mismatched input " + shape_str(t.shape()));
            Ctot += t.dim(1);
        }
        GraphNode n{PrimKind::ConcatChannels, xs};
        n.value = Tensor({N, Ctot, H, W});
        std::int64_t plane = static_cast<std::int64_t>(H) * W;
        for (int b = 0; b < N; ++b) {
            std::int64_t coff = 0;
            for (int x : xs) {
                const Tensor& t = value(x);
                std::int64_t csz = t.dim(1) * plane;
                std::memcpy(n.value.data() + (static_cast<std::int64_t>(b) * Ctot + coff) * plane,
                            t.data() + static_cast<std::int64_t>(b) * csz,
                            static_cast<size_t>(csz) * sizeof(double));
                coff += t.dim(1);
            }
        }
        return push(std::move(n));
    }

    int add_n(const std::vector<int>& xs) {
        if (xs.empty()) throw ShapeError("add_n: no inputs");
        const Tensor& first = value(xs[0]);
        GraphNode n{PrimKind::AddN, xs};
        n.value = first;
        for (size_t i = 1; i < xs.size(); ++i) {
            const Tensor& t = value(xs[i]);
            if (!t.same_shape(first))
                throw ShapeError("add_n: mismatched input " + shape_str(t.shape()));
            detail::add_into(n.value.data(), t.data(), t.numel());
        }
        return push(std::move(n));
    }

    int global_avg_pool(int x) {
        const Tensor& in = value(x);
        int N = in.dim(0), C = in.dim(1);
        std::int64_t plane = static_cast<std::int64_t>(in.dim(2)) * in.dim(3);
        GraphNode n{PrimKind::GlobalAvgPool, {x}};
        n.value = Tensor({N, C});
        for (int b = 0; b < N; ++b)
            for (int c = 0; c < C; ++c) {
                const double* p = in.data() + (static_cast<std::int64_t>(b) * C + c) * plane;
                double sum = 0.0;
                for (std::int64_t i = 0; i < plane; ++i) sum += p[i];
                n.value.data()[b * C + c] = sum / static_cast<double>(plane);
            }
        return push(std::move(n));
    }

    int linear(int x, int weight_id, int bias_id) {
        const Tensor& in = value(x);
        const Tensor& w = store_->value(weight_id);
        const Tensor& bias = store_->value(bias_id);
        if (in.rank() != 2 || w.rank() != 2 || in.dim(1) != w.dim(1))
            throw ShapeError("linear: input " + shape_str(in.shape()) + " weight " +
                             shape_str(w.shape()));
        int N = in.dim(0), I = in.dim(1), O = w.dim(0);
        GraphNode n{PrimKind::Linear, {x}, {weight_id, bias_id}};
        n.value = Tensor({N, O});
        for (int b = 0; b < N; ++b)
            for (int o = 0; o < O; ++o) {
                double sum = bias[o];
                const double* xi = in.data() + static_cast<std::int64_t>(b) * I;
                const double* wi = w.data() + static_cast<std::int64_t>(o) * I;
                for (int i = 0; i < I; ++i) sum += wi[i] * xi[i];
                n.value.data()[b * O + o] = sum;
            }
        return push(std::move(n));
    }

    int softmax_vec(int x) {
        const Tensor& in = value(x);
        GraphNode n{PrimKind::SoftmaxVec, {x}};
        n.value = Tensor(in.shape());
        double mx = -1e308;
        for (std::int64_t i = 0; i < in.numel(); ++i) mx = std::max(mx, in[i]);
        double sum = 0.0;
        for (std::int64_t i = 0; i < in.numel(); ++i) {
            n.value[i] = std::exp(in[i] - mx);
            sum += n.value[i];
        }
        for (std::int64_t i = 0; i < in.numel(); ++i) n.value[i] /= sum;
        return push(std::move(n));
    }

    int row_slice(int param_id, int row) {
        const Tensor& p = store_->value(param_id);
        if (p.rank() != 2 || row < 0 || row >= p.dim(0))
            throw ShapeError("row_slice: row " + std::to_string(row) + " of " +
                             shape_str(p.shape()));
        int D = p.dim(1);
        GraphNode n{PrimKind::RowSlice};
        n.params = {param_id};
        n.iarg = row;
        n.requires_grad = true;
        n.value = Tensor({D});
        std::memcpy(n.value.data(), p.data() + static_cast<std::int64_t>(row) * D,
                    static_cast<size_t>(D) * sizeof(double));
        return push(std::move(n));
    }

    /// out = sum_k coeff[k] * xs[k]; differentiable in both coeff and xs.
    int weighted_sum(int coeff, const std::vector<int>& xs) {
        const Tensor& c = value(coeff);
        if (c.numel() != static_cast<std::int64_t>(xs.size()))
            throw ShapeError("weighted_sum: " + std::to_string(xs.size()) + " inputs but " +
                             std::to_string(c.numel()) + " coefficients");
        const Tensor& first = value(xs[0]);
        GraphNode n{PrimKind::WeightedSum};
        n.inputs.reserve(xs.size() + 1);
        n.inputs.push_back(coeff);
        for (int x : xs) n.inputs.push_back(x);
        n.value = Tensor(first.shape());
        for (size_t k = 0; k < xs.size(); ++k) {
            const Tensor& t = value(xs[k]);
            if (!t.same_shape(first))
                throw ShapeError("weighted_sum: candidate " + std::to_string(k) +
                                 " shape " + shape_str(t.shape()) + " vs " +
                                 shape_str(first.shape()));
            detail::axpy(n.value.data(), t.data(), c[static_cast<std::int64_t>(k)], t.numel());
        }
        return push(std::move(n));
    }

    /// Mean softmax cross-entropy over the batch. Scalar output.
    int softmax_cross_entropy(int logits, const std::vector<int>& labels) {
        const Tensor& in = value(logits);
        if (in.rank() != 2) throw ShapeError("softmax_cross_entropy: expects (N, classes)");
        int N = in.dim(0), J = in.dim(1);
        if (static_cast<int>(labels.size()) != N)
            throw ShapeError("softmax_cross_entropy: batch " + std::to_string(N) + " but " +
                             std::to_string(labels.size()) + " labels");
        GraphNode n{PrimKind::SoftmaxCrossEntropy, {logits}};
        n.aux = Tensor({N, J});
        n.idx.resize(labels.size());
        double loss = 0.0;
        for (int b = 0; b < N; ++b) {
            int y = labels[b];
            if (y < 0 || y >= J)
                throw std::out_of_range("softmax_cross_entropy: label " + std::to_string(y) +
                                        " out of range [0," + std::to_string(J) + ")");
            n.idx[static_cast<size_t>(b)] = y;
            const double* row = in.data() + static_cast<std::int64_t>(b) * J;
            double mx = row[0];
            for (int j = 1; j < J; ++j) mx = std::max(mx, row[j]);
            double sum = 0.0;
            for (int j = 0; j < J; ++j) sum += std::exp(row[j] - mx);
            double logz = mx + std::log(sum);
            for (int j = 0; j < J; ++j)
                n.aux.data()[b * J + j] = std::exp(row[j] - logz);
            loss += logz - row[y];
        }
        n.value = Tensor::scalar(loss / N);
        return push(std::move(n));
    }

    int inner_const(int x, Tensor coeffs) {
        const Tensor& in = value(x);
        if (!in.same_shape(coeffs)) throw ShapeError("inner_const: coefficient shape mismatch");
        GraphNode n{PrimKind::InnerConst, {x}};
        double sum = 0.0;
        for (std::int64_t i = 0; i < in.numel(); ++i) sum += in[i] * coeffs[i];
        n.aux = std::move(coeffs);
        n.value = Tensor::scalar(sum);
        return push(std::move(n));
    }

    /// Reverse sweep from a scalar loss node. Accumulates gradients for
    /// parameters of the requested sections only; adjoints still flow through
    /// everything that depends on a requested parameter. Parameters of a
    /// requested section that the loss does not reach get zero gradients.
    GradMap backward(int loss_node, const ParamStore& store, bool want_weight = true,
                     bool want_arch = true, bool release = true) {
        if (value(loss_node).numel() != 1)
            throw ShapeError("backward: loss node is not scalar");
        GradMap gm(store.size());
        // a node participates iff its value depends on a wanted parameter
        std::vector<char> active(nodes_.size(), 0);
        for (size_t i = 0; i < nodes_.size(); ++i) {
            GraphNode& n = nodes_[i];
            bool a = false;
            for (int pid : n.params) {
                Section s = store.section(pid);
                if ((s == Section::Weight && want_weight) || (s == Section::Arch && want_arch))
                    a = true;
            }
            if (!a)
                for (int in : n.inputs)
                    if (active[static_cast<size_t>(in)]) a = true;
            active[i] = a ? 1 : 0;
        }

        std::vector<Tensor> adj(nodes_.size());
        if (active[static_cast<size_t>(loss_node)])
            adj[static_cast<size_t>(loss_node)] = Tensor::scalar(1.0);

        for (int i = loss_node; i >= 0; --i) {
            GraphNode& n = nodes_[static_cast<size_t>(i)];
            Tensor& g = adj[static_cast<size_t>(i)];
            if (!active[static_cast<size_t>(i)] || g.empty()) continue;
            backward_node(i, n, g, adj, active, gm, store, want_weight, want_arch);
            if (release) {
                g = Tensor();
                if (n.kind != PrimKind::Input && n.kind != PrimKind::ParamLeaf) n.value = Tensor();
            }
        }
        if (want_weight) gm.fill_missing(store, Section::Weight);
        if (want_arch) gm.fill_missing(store, Section::Arch);
        return gm;
    }

  private:
    int push(GraphNode n) {
        if (n.kind != PrimKind::ParamLeaf && n.kind != PrimKind::RowSlice) {
            for (int in : n.inputs)
                if (nodes_[static_cast<size_t>(in)].requires_grad) n.requires_grad = true;
        }
        // scalar outputs (losses) are checked eagerly; large activations are
        // validated where training steps inspect the loss
        if (n.value.numel() == 1 && n.kind != PrimKind::Input && !n.value.all_finite())
            throw NumericError("non-finite value produced by node " +
                               std::to_string(nodes_.size()));
        nodes_.push_back(std::move(n));
        return static_cast<int>(nodes_.size()) - 1;
    }

    void accumulate_adj(std::vector<Tensor>& adj, const std::vector<char>& active, int id,
                        const Tensor& g) {
        if (!active[static_cast<size_t>(id)]) return;
        Tensor& slot = adj[static_cast<size_t>(id)];
        if (slot.empty()) {
            slot = g;
        } else {
            detail::add_into(slot.data(), g.data(), g.numel());
        }
    }

    Tensor& adj_slot(std::vector<Tensor>& adj, int id, const Shape& shape) {
        Tensor& slot = adj[static_cast<size_t>(id)];
        if (slot.empty()) slot = Tensor::zeros(shape);
        return slot;
    }

    static void axpy(double* y, const double* x, double a, std::int64_t n) {
        detail::axpy(y, x, a, n);
    }

    static double dot(const double* x, const double* y, std::int64_t n) {
        return detail::dot(x, y, n);
    }

    static bool conv_is_pointwise(const Tensor& w, ConvSpec sp) {
        return w.dim(2) == 1 && w.dim(3) == 1 && sp.stride == 1 && sp.pad == 0 && sp.groups == 1;
    }

    /// Depthwise stride-1 with shape-preserving padding: eligible for the
    /// unrolled stencil kernels.
    static bool conv_is_dw_s1(const Tensor& in, const Tensor& w, ConvSpec sp) {
        int K = w.dim(2);
        return w.dim(3) == K && (K == 3 || K == 5) && w.dim(1) == 1 &&
               sp.groups == in.dim(1) && w.dim(0) == in.dim(1) && sp.stride == 1 &&
               (sp.dilation == 1 || sp.dilation == 2) && sp.pad == (K - 1) * sp.dilation / 2;
    }

    template <int K, int DIL>
    static void dw_forward_all(const Tensor& in, const Tensor& w, Tensor& out) {
        int N = in.dim(0), C = in.dim(1), H = in.dim(2), W = in.dim(3);
        constexpr int P = (K - 1) * DIL / 2;
        std::int64_t plane = static_cast<std::int64_t>(H) * W;
        auto& scratch = detail::dw_scratch();
        scratch.resize(static_cast<size_t>(H + 2 * P) * (W + 2 * P));
        for (int b = 0; b < N; ++b)
            for (int c = 0; c < C; ++c) {
                std::int64_t off = (static_cast<std::int64_t>(b) * C + c) * plane;
                detail::dw_pad_copy<K, DIL>(in.data() + off, H, W, scratch.data());
                detail::dw_stencil<K, DIL, false>(scratch.data(), H, W,
                                                  w.data() + static_cast<std::int64_t>(c) * K * K,
                                                  out.data() + off);
            }
    }

    template <int K, int DIL>
    static void dw_backward_all(const Tensor& in, const Tensor& w, const Tensor& gout,
                                Tensor* gin, Tensor* gw) {
        int N = in.dim(0), C = in.dim(1), H = in.dim(2), W = in.dim(3);
        constexpr int P = (K - 1) * DIL / 2;
        std::int64_t plane = static_cast<std::int64_t>(H) * W;
        auto& scratch = detail::dw_scratch();
        scratch.resize(static_cast<size_t>(H + 2 * P) * (W + 2 * P));
        double flipped[K * K];
        for (int b = 0; b < N; ++b)
            for (int c = 0; c < C; ++c) {
                std::int64_t off = (static_cast<std::int64_t>(b) * C + c) * plane;
                const double* wc = w.data() + static_cast<std::int64_t>(c) * K * K;
                if (gin) {
                    for (int i = 0; i < K * K; ++i) flipped[i] = wc[K * K - 1 - i];
                    detail::dw_pad_copy<K, DIL>(gout.data() + off, H, W, scratch.data());
                    detail::dw_stencil<K, DIL, true>(scratch.data(), H, W, flipped,
                                                     gin->data() + off);
                }
                if (gw) {
                    detail::dw_pad_copy<K, DIL>(in.data() + off, H, W, scratch.data());
                    detail::dw_weight_grad<K, DIL>(scratch.data(), H, W, gout.data() + off,
                                                   gw->data() + static_cast<std::int64_t>(c) * K * K);
                }
            }
    }

    static bool dw_dispatch_forward(const Tensor& in, const Tensor& w, Tensor& out, ConvSpec sp) {
        if (!conv_is_dw_s1(in, w, sp)) return false;
        int K = w.dim(2);
        if (K == 3 && sp.dilation == 1) dw_forward_all<3, 1>(in, w, out);
        else if (K == 3) dw_forward_all<3, 2>(in, w, out);
        else if (sp.dilation == 1) dw_forward_all<5, 1>(in, w, out);
        else dw_forward_all<5, 2>(in, w, out);
        return true;
    }

    static bool dw_dispatch_backward(const Tensor& in, const Tensor& w, const Tensor& gout,
                                     ConvSpec sp, Tensor* gin, Tensor* gw) {
        if (!conv_is_dw_s1(in, w, sp)) return false;
        int K = w.dim(2);
        if (K == 3 && sp.dilation == 1) dw_backward_all<3, 1>(in, w, gout, gin, gw);
        else if (K == 3) dw_backward_all<3, 2>(in, w, gout, gin, gw);
        else if (sp.dilation == 1) dw_backward_all<5, 1>(in, w, gout, gin, gw);
        else dw_backward_all<5, 2>(in, w, gout, gin, gw);
        return true;
    }

    static void conv_forward(const Tensor& in, const Tensor& w, Tensor& out, ConvSpec sp) {
        int N = in.dim(0), H = in.dim(2), W = in.dim(3);
        int Cout = w.dim(0), Cg = w.dim(1), KH = w.dim(2), KW = w.dim(3);
        int Hout = out.dim(2), Wout = out.dim(3);
        int cpg_out = Cout / sp.groups;
        const std::int64_t in_plane = static_cast<std::int64_t>(H) * W;
        const std::int64_t out_plane = static_cast<std::int64_t>(Hout) * Wout;
        if (conv_is_pointwise(w, sp)) {
            // 1x1 stride-1 projection: whole planes are contiguous
            for (int b = 0; b < N; ++b) {
                const double* ib = in.data() + static_cast<std::int64_t>(b) * in.dim(1) * in_plane;
                double* ob = out.data() + static_cast<std::int64_t>(b) * Cout * out_plane;
                for (int co = 0; co < Cout; ++co) {
                    const double* wr = w.data() + static_cast<std::int64_t>(co) * Cg;
                    double* op = ob + static_cast<std::int64_t>(co) * out_plane;
                    for (int ci = 0; ci < Cg; ++ci)
                        axpy(op, ib + static_cast<std::int64_t>(ci) * in_plane, wr[ci], in_plane);
                }
            }
            return;
        }
        if (dw_dispatch_forward(in, w, out, sp)) return;
        auto taps = conv_taps(H, W, Hout, Wout, KH, KW, sp);
        for (int b = 0; b < N; ++b)
            for (int g = 0; g < sp.groups; ++g)
                for (int cog = 0; cog < cpg_out; ++cog) {
                    int co = g * cpg_out + cog;
                    double* op = out.data() + (static_cast<std::int64_t>(b) * Cout + co) * out_plane;
                    for (int cig = 0; cig < Cg; ++cig) {
                        int ci = g * Cg + cig;
                        const double* ip =
                            in.data() + (static_cast<std::int64_t>(b) * in.dim(1) + ci) * in_plane;
                        const double* wp =
                            w.data() + ((static_cast<std::int64_t>(co) * Cg + cig) * KH) * KW;
                        for (const ConvTap& t : taps) {
                            double coef = wp[t.k];
                            const double* ipo = ip + t.in_off;
                            if (sp.stride == 1) {
                                for (int oh = t.oh_lo; oh <= t.oh_hi; ++oh)
                                    axpy(op + static_cast<std::int64_t>(oh) * Wout + t.ow_lo,
                                         ipo + static_cast<std::int64_t>(oh) * W + t.ow_lo, coef,
                                         t.ow_hi - t.ow_lo + 1);
                            } else {
                                for (int oh = t.oh_lo; oh <= t.oh_hi; ++oh) {
                                    double* __restrict__ orow =
                                        op + static_cast<std::int64_t>(oh) * Wout;
                                    const double* __restrict__ irow =
                                        ipo + static_cast<std::int64_t>(oh) * sp.stride * W;
                                    for (int ow = t.ow_lo; ow <= t.ow_hi; ++ow)
                                        orow[ow] += coef * irow[static_cast<std::int64_t>(ow) *
                                                                sp.stride];
                                }
                            }
                        }
                    }
                }
    }

    /// Per-tap valid output ranges, hoisted out of the batch/channel loops.
    /// in_off is chosen so input position = in_off + oh*stride*W + ow*stride.
    struct ConvTap {
        int k;          // kh*KW + kw
        int oh_lo, oh_hi;
        int ow_lo, ow_hi;
        std::int64_t in_off;
    };

    static std::vector<ConvTap> conv_taps(int H, int W, int Hout, int Wout, int KH, int KW,
                                          ConvSpec sp) {
        std::vector<ConvTap> taps;
        taps.reserve(static_cast<size_t>(KH) * KW);
        for (int kh = 0; kh < KH; ++kh)
            for (int kw = 0; kw < KW; ++kw) {
                int hoff = kh * sp.dilation - sp.pad;
                int woff = kw * sp.dilation - sp.pad;
                ConvTap t;
                t.k = kh * KW + kw;
                detail::conv_out_range(H, Hout, sp.stride, sp.pad, kh * sp.dilation, t.oh_lo,
                                       t.oh_hi);
                detail::conv_out_range(W, Wout, sp.stride, sp.pad, kw * sp.dilation, t.ow_lo,
                                       t.ow_hi);
                if (t.oh_lo < 0) t.oh_lo = 0;
                t.in_off = static_cast<std::int64_t>(hoff) * W + woff;
                if (t.oh_hi >= t.oh_lo && t.ow_hi >= t.ow_lo) taps.push_back(t);
            }
        return taps;
    }

    static void conv_backward(const Tensor& in, const Tensor& w, const Tensor& gout, ConvSpec sp,
                              Tensor* gin, Tensor* gw) {
        int N = in.dim(0), H = in.dim(2), W = in.dim(3);
        int Cout = w.dim(0), Cg = w.dim(1), KH = w.dim(2), KW = w.dim(3);
        int Hout = gout.dim(2), Wout = gout.dim(3);
        int cpg_out = Cout / sp.groups;
        const std::int64_t in_plane = static_cast<std::int64_t>(H) * W;
        const std::int64_t out_plane = static_cast<std::int64_t>(Hout) * Wout;
        if (conv_is_pointwise(w, sp)) {
            for (int b = 0; b < N; ++b) {
                const double* ib = in.data() + static_cast<std::int64_t>(b) * in.dim(1) * in_plane;
                const double* gb = gout.data() + static_cast<std::int64_t>(b) * Cout * out_plane;
                double* gib =
                    gin ? gin->data() + static_cast<std::int64_t>(b) * in.dim(1) * in_plane
                        : nullptr;
                for (int co = 0; co < Cout; ++co) {
                    const double* grow = gb + static_cast<std::int64_t>(co) * out_plane;
                    const double* wr = w.data() + static_cast<std::int64_t>(co) * Cg;
                    double* gwr = gw ? gw->data() + static_cast<std::int64_t>(co) * Cg : nullptr;
                    for (int ci = 0; ci < Cg; ++ci) {
                        const double* irow = ib + static_cast<std::int64_t>(ci) * in_plane;
                        if (gwr) gwr[ci] += dot(grow, irow, in_plane);
                        if (gib)
                            axpy(gib + static_cast<std::int64_t>(ci) * in_plane, grow, wr[ci],
                                 in_plane);
                    }
                }
            }
            return;
        }
        if (dw_dispatch_backward(in, w, gout, sp, gin, gw)) return;
        auto taps = conv_taps(H, W, Hout, Wout, KH, KW, sp);
        for (int b = 0; b < N; ++b)
            for (int g = 0; g < sp.groups; ++g)
                for (int cog = 0; cog < cpg_out; ++cog) {
                    int co = g * cpg_out + cog;
                    const double* gop =
                        gout.data() + (static_cast<std::int64_t>(b) * Cout + co) * out_plane;
                    for (int cig = 0; cig < Cg; ++cig) {
                        int ci = g * Cg + cig;
                        const double* ip =
                            in.data() + (static_cast<std::int64_t>(b) * in.dim(1) + ci) * in_plane;
                        double* gip = gin ? gin->data() + (static_cast<std::int64_t>(b) * in.dim(1) +
                                                           ci) * in_plane
                                          : nullptr;
                        const std::int64_t wbase = (static_cast<std::int64_t>(co) * Cg + cig) * KH * KW;
                        for (const ConvTap& t : taps) {
                            double coef = w[wbase + t.k];
                            const double* ipo = ip + t.in_off;
                            double* gipo = gip ? gip + t.in_off : nullptr;
                            double wgrad = 0.0;
                            for (int oh = t.oh_lo; oh <= t.oh_hi; ++oh) {
                                const double* grow = gop + static_cast<std::int64_t>(oh) * Wout;
                                std::int64_t ro = static_cast<std::int64_t>(oh) * sp.stride * W;
                                if (sp.stride == 1) {
                                    if (gw)
                                        wgrad += dot(grow + t.ow_lo, ipo + ro + t.ow_lo,
                                                     t.ow_hi - t.ow_lo + 1);
                                    if (gipo)
                                        axpy(gipo + ro + t.ow_lo, grow + t.ow_lo, coef,
                                             t.ow_hi - t.ow_lo + 1);
                                } else {
                                    const double* irow = ipo + ro;
                                    double* girow = gipo ? gipo + ro : nullptr;
                                    if (gw)
                                        for (int ow = t.ow_lo; ow <= t.ow_hi; ++ow)
                                            wgrad += grow[ow] *
                                                     irow[static_cast<std::int64_t>(ow) * sp.stride];
                                    if (girow)
                                        for (int ow = t.ow_lo; ow <= t.ow_hi; ++ow)
                                            girow[static_cast<std::int64_t>(ow) * sp.stride] +=
                                                coef * grow[ow];
                                }
                            }
                            if (gw) (*gw)[wbase + t.k] += wgrad;
                        }
                    }
                }
    }

    void backward_node(int id, GraphNode& n, const Tensor& g, std::vector<Tensor>& adj,
                       const std::vector<char>& active, GradMap& gm, const ParamStore& store,
                       bool want_weight, bool want_arch) {
        auto wants = [&](int pid) {
            Section s = store.section(pid);
            return (s == Section::Weight && want_weight) || (s == Section::Arch && want_arch);
        };
        switch (n.kind) {
            case PrimKind::Input:
            case PrimKind::Zeros:
                break;
            case PrimKind::ParamLeaf:
                if (wants(n.params[0])) gm.accumulate(n.params[0], g);
                break;
            case PrimKind::RowSlice: {
                if (wants(n.params[0])) {
                    const Tensor& p = store.value(n.params[0]);
                    Tensor& slot = gm.at(n.params[0]);
                    if (slot.empty()) slot = Tensor::zeros(p.shape());
                    int D = p.dim(1);
                    double* d = slot.data() + static_cast<std::int64_t>(n.iarg) * D;
                    for (int i = 0; i < D; ++i) d[i] += g[i];
                }
                break;
            }
            case PrimKind::Relu: {
                int x = n.inputs[0];
                if (!active[static_cast<size_t>(x)]) break;
                Tensor& gx = adj_slot(adj, x, value(x).shape());
                const double* __restrict__ y = n.value.data();
                double* __restrict__ d = gx.data();
                const double* __restrict__ s = g.data();
                for (std::int64_t i = 0; i < g.numel(); ++i)
                    d[i] += y[i] > 0.0 ? s[i] : 0.0;
                break;
            }
            case PrimKind::Conv2d: {
                int x = n.inputs[0];
                const Tensor& in = value(x);
                const Tensor& w = store.value(n.params[0]);
                Tensor* gin = nullptr;
                if (active[static_cast<size_t>(x)]) gin = &adj_slot(adj, x, in.shape());
                Tensor* gw = nullptr;
                if (wants(n.params[0])) {
                    Tensor& slot = gm.at(n.params[0]);
                    if (slot.empty()) slot = Tensor::zeros(w.shape());
                    gw = &slot;
                }
                if (gin || gw) conv_backward(in, w, g, n.conv, gin, gw);
                break;
            }
            case PrimKind::BatchNorm: {
                int x = n.inputs[0];
                if (!active[static_cast<size_t>(x)]) break;
                const Tensor& in = value(x);
                int N = in.dim(0), C = in.dim(1), H = in.dim(2), W = in.dim(3);
                std::int64_t plane = static_cast<std::int64_t>(H) * W;
                std::int64_t m = static_cast<std::int64_t>(N) * plane;
                Tensor& gx = adj_slot(adj, x, in.shape());
                for (int c = 0; c < C; ++c) {
                    double invstd = n.aux[C + c];
                    double sum_g = 0.0, sum_gy = 0.0;
                    for (int b = 0; b < N; ++b) {
                        std::int64_t off = (static_cast<std::int64_t>(b) * C + c) * plane;
                        const double* gp = g.data() + off;
                        const double* yp = n.value.data() + off;
                        for (std::int64_t i = 0; i < plane; ++i) {
                            sum_g += gp[i];
                            sum_gy += gp[i] * yp[i];
                        }
                    }
                    double mean_g = sum_g / static_cast<double>(m);
                    double mean_gy = sum_gy / static_cast<double>(m);
                    for (int b = 0; b < N; ++b) {
                        std::int64_t off = (static_cast<std::int64_t>(b) * C + c) * plane;
                        const double* gp = g.data() + off;
                        const double* yp = n.value.data() + off;
                        double* dp = gx.data() + off;
                        for (std::int64_t i = 0; i < plane; ++i)
                            dp[i] += invstd * (gp[i] - mean_g - yp[i] * mean_gy);
                    }
                }
                break;
            }
            case PrimKind::MaxPool: {
                int x = n.inputs[0];
                if (!active[static_cast<size_t>(x)]) break;
                const Tensor& in = value(x);
                int N = in.dim(0), C = in.dim(1), H = in.dim(2), W = in.dim(3);
                std::int64_t in_plane = static_cast<std::int64_t>(H) * W;
                std::int64_t out_plane = static_cast<std::int64_t>(g.dim(2)) * g.dim(3);
                Tensor& gx = adj_slot(adj, x, in.shape());
                std::int64_t o = 0;
                for (int b = 0; b < N; ++b)
                    for (int c = 0; c < C; ++c) {
                        double* dp = gx.data() + (static_cast<std::int64_t>(b) * C + c) * in_plane;
                        for (std::int64_t i = 0; i < out_plane; ++i, ++o)
                            dp[n.idx[static_cast<size_t>(o)]] += g[o];
                    }
                break;
            }
            case PrimKind::AvgPool: {
                int x = n.inputs[0];
                if (!active[static_cast<size_t>(x)]) break;
                const Tensor& in = value(x);
                int N = in.dim(0), C = in.dim(1), H = in.dim(2), W = in.dim(3);
                int Hout = g.dim(2), Wout = g.dim(3);
                int stride = n.iarg;
                Tensor& gx = adj_slot(adj, x, in.shape());
                std::int64_t o = 0;
                for (int b = 0; b < N; ++b)
                    for (int c = 0; c < C; ++c) {
                        double* dp = gx.data() +
                                     (static_cast<std::int64_t>(b) * C + c) *
                                         static_cast<std::int64_t>(H) * W;
                        for (int oh = 0; oh < Hout; ++oh) {
                            int ih0 = std::max(0, oh * stride - 1),
                                ih1 = std::min(H - 1, oh * stride + 1);
                            for (int ow = 0; ow < Wout; ++ow, ++o) {
                                int iw0 = std::max(0, ow * stride - 1),
                                    iw1 = std::min(W - 1, ow * stride + 1);
                                double share = g[o] / ((ih1 - ih0 + 1) * (iw1 - iw0 + 1));
                                for (int ih = ih0; ih <= ih1; ++ih)
                                    for (int iw = iw0; iw <= iw1; ++iw) dp[ih * W + iw] += share;
                            }
                        }
                    }
                break;
            }
            case PrimKind::OffsetCrop: {
                int x = n.inputs[0];
                if (!active[static_cast<size_t>(x)]) break;
                const Tensor& in = value(x);
                int N = in.dim(0), C = in.dim(1), H = in.dim(2), W = in.dim(3);
                Tensor& gx = adj_slot(adj, x, in.shape());
                for (int b = 0; b < N; ++b)
                    for (int c = 0; c < C; ++c) {
                        double* dp = gx.data() +
                                     (static_cast<std::int64_t>(b) * C + c) *
                                         static_cast<std::int64_t>(H) * W;
                        const double* gp = g.data() +
                                           (static_cast<std::int64_t>(b) * C + c) *
                                               static_cast<std::int64_t>(H - 1) * (W - 1);
                        for (int h = 0; h < H - 1; ++h)
                            for (int w = 0; w < W - 1; ++w)
                                dp[(h + 1) * W + (w + 1)] += gp[h * (W - 1) + w];
                    }
                break;
            }
            case PrimKind::ConcatChannels: {
                const Tensor& out = g;
                int N = out.dim(0), Ctot = out.dim(1);
                std::int64_t plane = static_cast<std::int64_t>(out.dim(2)) * out.dim(3);
                std::int64_t coff = 0;
                for (int x : n.inputs) {
                    const Tensor& t = value(x);
                    int c = t.dim(1);
                    if (active[static_cast<size_t>(x)]) {
                        Tensor& gx = adj_slot(adj, x, t.shape());
                        for (int b = 0; b < N; ++b) {
                            const double* s =
                                g.data() + (static_cast<std::int64_t>(b) * Ctot + coff) * plane;
                            detail::add_into(gx.data() + static_cast<std::int64_t>(b) * c * plane,
                                             s, c * plane);
                        }
                    }
                    coff += c;
                }
                break;
            }
            case PrimKind::AddN:
                for (int x : n.inputs) accumulate_adj(adj, active, x, g);
                break;
            case PrimKind::GlobalAvgPool: {
                int x = n.inputs[0];
                if (!active[static_cast<size_t>(x)]) break;
                const Tensor& in = value(x);
                int N = in.dim(0), C = in.dim(1);
                std::int64_t plane = static_cast<std::int64_t>(in.dim(2)) * in.dim(3);
                Tensor& gx = adj_slot(adj, x, in.shape());
                for (int b = 0; b < N; ++b)
                    for (int c = 0; c < C; ++c) {
                        double share = g[b * C + c] / static_cast<double>(plane);
                        double* dp = gx.data() + (static_cast<std::int64_t>(b) * C + c) * plane;
                        for (std::int64_t i = 0; i < plane; ++i) dp[i] += share;
                    }
                break;
            }
            case PrimKind::Linear: {
                int x = n.inputs[0];
                const Tensor& in = value(x);
                const Tensor& w = store.value(n.params[0]);
                int N = in.dim(0), I = in.dim(1), O = w.dim(0);
                if (active[static_cast<size_t>(x)]) {
                    Tensor& gx = adj_slot(adj, x, in.shape());
                    for (int b = 0; b < N; ++b)
                        for (int o = 0; o < O; ++o) {
                            double go = g[b * O + o];
                            const double* wi = w.data() + static_cast<std::int64_t>(o) * I;
                            double* d = gx.data() + static_cast<std::int64_t>(b) * I;
                            for (int i = 0; i < I; ++i) d[i] += go * wi[i];
                        }
                }
                if (wants(n.params[0])) {
                    Tensor& gw = gm.at(n.params[0]);
                    if (gw.empty()) gw = Tensor::zeros(w.shape());
                    for (int b = 0; b < N; ++b)
                        for (int o = 0; o < O; ++o) {
                            double go = g[b * O + o];
                            const double* xi = in.data() + static_cast<std::int64_t>(b) * I;
                            double* d = gw.data() + static_cast<std::int64_t>(o) * I;
                            for (int i = 0; i < I; ++i) d[i] += go * xi[i];
                        }
                }
                if (wants(n.params[1])) {
                    Tensor& gb = gm.at(n.params[1]);
                    if (gb.empty()) gb = Tensor::zeros(store.value(n.params[1]).shape());
                    for (int b = 0; b < N; ++b)
                        for (int o = 0; o < O; ++o) gb[o] += g[b * O + o];
                }
                break;
            }
            case PrimKind::SoftmaxVec: {
                int x = n.inputs[0];
                if (!active[static_cast<size_t>(x)]) break;
                const Tensor& p = n.value;
                Tensor& gx = adj_slot(adj, x, p.shape());
                double dot = 0.0;
                for (std::int64_t i = 0; i < p.numel(); ++i) dot += p[i] * g[i];
                for (std::int64_t i = 0; i < p.numel(); ++i) gx[i] += p[i] * (g[i] - dot);
                break;
            }
            case PrimKind::WeightedSum: {
                int coeff = n.inputs[0];
                const Tensor& c = value(coeff);
                size_t k = n.inputs.size() - 1;
                if (active[static_cast<size_t>(coeff)]) {
                    Tensor& gc = adj_slot(adj, coeff, c.shape());
                    for (size_t j = 0; j < k; ++j) {
                        const Tensor& xj = value(n.inputs[j + 1]);
                        gc[static_cast<std::int64_t>(j)] += detail::dot(g.data(), xj.data(),
                                                                        xj.numel());
                    }
                }
                for (size_t j = 0; j < k; ++j) {
                    int xid = n.inputs[j + 1];
                    if (!active[static_cast<size_t>(xid)]) continue;
                    Tensor& gx = adj_slot(adj, xid, value(xid).shape());
                    detail::axpy(gx.data(), g.data(), c[static_cast<std::int64_t>(j)], g.numel());
                }
                break;
            }
            case PrimKind::SoftmaxCrossEntropy: {
                int x = n.inputs[0];
                if (!active[static_cast<size_t>(x)]) break;
                int N = n.aux.dim(0), J = n.aux.dim(1);
                Tensor& gx = adj_slot(adj, x, n.aux.shape());
                double scale = g[0] / N;
                for (int b = 0; b < N; ++b) {
                    const double* p = n.aux.data() + static_cast<std::int64_t>(b) * J;
                    double* d = gx.data() + static_cast<std::int64_t>(b) * J;
                    int y = n.idx[static_cast<size_t>(b)];
                    for (int j = 0; j < J; ++j) d[j] += scale * (p[j] - (j == y ? 1.0 : 0.0));
                }
                break;
            }
            case PrimKind::InnerConst: {
                int x = n.inputs[0];
                if (!active[static_cast<size_t>(x)]) break;
                Tensor& gx = adj_slot(adj, x, n.aux.shape());
                double s = g[0];
                for (std::int64_t i = 0; i < n.aux.numel(); ++i) gx[i] += s * n.aux[i];
                break;
            }
        }
    }

    const ParamStore* store_;
    std::vector<GraphNode> nodes_;
};

}  // namespace fednas
