#pragma once

#include <algorithm>
#include <cstdint>
#include <string>
#include <vector>

#include "fednas/genotype.hpp"
#include "fednas/graph.hpp"
#include "fednas/param_store.hpp"
#include "fednas/rng.hpp"
#include "fednas/tensor.hpp"

namespace fednas {

/// Stacked-cell network description. Reduction cells sit at floor(n/3) and
/// floor(2n/3); spatial extent is quartered end to end, so inputs must be
/// divisible by 4.
struct NetworkSpec {
    int num_cells = 8;
    int init_channels = 16;
    int num_classes = 10;
    int in_channels = 3;
    int in_height = 32;
    int in_width = 32;

    bool operator==(const NetworkSpec&) const = default;

    std::vector<int> reduction_positions() const {
        return {num_cells / 3, 2 * num_cells / 3};
    }

    void validate() const {
        if (num_cells < 2) throw std::invalid_argument("spec: num_cells must be >= 2");
        if (init_channels < 2 || init_channels % 2 != 0)
            throw std::invalid_argument("spec: init_channels must be even and >= 2");
        if (num_classes < 2) throw std::invalid_argument("spec: num_classes must be >= 2");
        if (in_channels < 1) throw std::invalid_argument("spec: in_channels must be >= 1");
        if (in_height % 4 != 0 || in_width % 4 != 0 || in_height < 4 || in_width < 4)
            throw std::invalid_argument("spec: input extent must be a positive multiple of 4");
        for (int p : reduction_positions())
            if (p < 0 || p >= num_cells)
                throw std::invalid_argument("spec: reduction position outside the stack");
    }

    std::uint64_t hash() const {
        std::uint64_t h = 1469598103934665603ull;
        auto mix = [&h](std::uint64_t v) {
            h ^= v;
            h *= 1099511628211ull;
        };
        mix(static_cast<std::uint64_t>(num_cells));
        mix(static_cast<std::uint64_t>(init_channels));
        mix(static_cast<std::uint64_t>(num_classes));
        mix(static_cast<std::uint64_t>(in_channels));
        mix(static_cast<std::uint64_t>(in_height));
        mix(static_cast<std::uint64_t>(in_width));
        return h;
    }
};

/// Architecture parameter matrices, one row per cell edge, one column per
/// candidate op. Shared by all cells of the same type.
struct ArchParams {
    Tensor normal{Shape{CellTopology::kEdges, kNumCandidates}};
    Tensor reduce{Shape{CellTopology::kEdges, kNumCandidates}};

    bool operator==(const ArchParams&) const = default;
};

namespace net {

struct CandidateParams {
    OpKind kind;
    std::vector<int> convs;  // parameter ids, op-specific order
};

struct EdgePlan {
    int row = 0;
    int stride = 1;
    std::vector<CandidateParams> cands;  // supernet: all 8; fixed net: exactly 1
    int pred = 0;                        // fixed net only
};

struct CellPlan {
    bool reduction = false;
    bool pre0_factorized = false;
    int channels = 0;
    std::vector<int> pre0;  // 1 conv id, or 2 for factorized reduce
    int pre1 = -1;
    std::vector<EdgePlan> edges;
};

struct NetworkPlan {
    NetworkSpec spec;
    int stem_conv = -1;
    std::vector<CellPlan> cells;
    int classifier_w = -1;
    int classifier_b = -1;
    int alpha_normal = -1;  // -1 on fixed networks
    int alpha_reduce = -1;
};

inline Tensor he_normal(Rng& rng, Shape shape, int fan_in) {
    Tensor t(shape);
    double std = std::sqrt(2.0 / fan_in);
    for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = rng.normal(0.0, std);
    return t;
}

inline int add_conv(ParamStore& store, Rng& rng, const std::string& name, int cout, int cin,
                    int k) {
    return store.add(name, Section::Weight, he_normal(rng, {cout, cin, k, k}, cin * k * k));
}

/// Parameters of one candidate op at `channels` channels. Pooling, identity
/// at stride 1, and zero are parameter-free; identity at stride 2 is a
/// factorized reduction.
inline CandidateParams make_candidate(ParamStore& store, Rng& rng, const std::string& prefix,
                                      OpKind kind, int channels, int stride) {
    CandidateParams cp{kind, {}};
    auto dw = [&](const std::string& n, int k) {
        return store.add(prefix + "/" + n, Section::Weight,
                         he_normal(rng, {channels, 1, k, k}, k * k));
    };
    auto pw = [&](const std::string& n) { return add_conv(store, rng, prefix + "/" + n, channels, channels, 1); };
    switch (kind) {
        case OpKind::SepConv3x3:
        case OpKind::SepConv5x5: {
            int k = kind == OpKind::SepConv3x3 ? 3 : 5;
            cp.convs = {dw("dw1", k), pw("pw1"), dw("dw2", k), pw("pw2")};
            break;
        }
        case OpKind::DilConv3x3:
        case OpKind::DilConv5x5: {
            int k = kind == OpKind::DilConv3x3 ? 3 : 5;
            cp.convs = {dw("dw", k), pw("pw")};
            break;
        }
        case OpKind::Identity:
            if (stride == 2) {
                cp.convs = {add_conv(store, rng, prefix + "/fr1", channels / 2, channels, 1),
                            add_conv(store, rng, prefix + "/fr2", channels / 2, channels, 1)};
            }
            break;
        case OpKind::MaxPool3x3:
        case OpKind::AvgPool3x3:
        case OpKind::Zero:
            break;
    }
    return cp;
}

/// relu -> 1x1 conv -> batch norm, the channel-alignment preprocessing.
inline int build_relu_conv_bn(ComputeGraph& g, int x, int conv_id, int stride = 1) {
    int t = g.relu(x);
    t = g.conv2d(t, conv_id, ConvSpec{stride, 0, 1, 1});
    return g.batch_norm(t);
}

/// relu -> two offset stride-2 1x1 convs -> concat -> batch norm; halves the
/// spatial extent while keeping every pixel parity covered.
inline int build_factorized_reduce(ComputeGraph& g, int x, int conv1, int conv2) {
    int t = g.relu(x);
    int a = g.conv2d(t, conv1, ConvSpec{2, 0, 1, 1});
    int b = g.conv2d(g.offset_crop(t), conv2, ConvSpec{2, 0, 1, 1});
    return g.batch_norm(g.concat_channels({a, b}));
}

inline int build_candidate(ComputeGraph& g, int x, const CandidateParams& cp, int stride) {
    switch (cp.kind) {
        case OpKind::SepConv3x3:
        case OpKind::SepConv5x5: {
            int k = cp.kind == OpKind::SepConv3x3 ? 3 : 5;
            int pad = k / 2;
            int C = g.value(x).dim(1);
            int t = g.relu(x);
            t = g.conv2d(t, cp.convs[0], ConvSpec{stride, pad, 1, C});
            t = g.conv2d(t, cp.convs[1], ConvSpec{1, 0, 1, 1});
            t = g.batch_norm(t);
            t = g.relu(t);
            t = g.conv2d(t, cp.convs[2], ConvSpec{1, pad, 1, C});
            t = g.conv2d(t, cp.convs[3], ConvSpec{1, 0, 1, 1});
            return g.batch_norm(t);
        }
        case OpKind::DilConv3x3:
        case OpKind::DilConv5x5: {
            int k = cp.kind == OpKind::DilConv3x3 ? 3 : 5;
            int pad = k - 1;  // dilation 2 keeps the stride-1 extent
            int C = g.value(x).dim(1);
            int t = g.relu(x);
            t = g.conv2d(t, cp.convs[0], ConvSpec{stride, pad, 2, C});
            t = g.conv2d(t, cp.convs[1], ConvSpec{1, 0, 1, 1});
            return g.batch_norm(t);
        }
        case OpKind::MaxPool3x3:
            return g.max_pool3(x, stride);
        case OpKind::AvgPool3x3:
            return g.avg_pool3(x, stride);
        case OpKind::Identity:
            if (stride == 1) return x;
            return build_factorized_reduce(g, x, cp.convs[0], cp.convs[1]);
        case OpKind::Zero: {
            const Tensor& in = g.value(x);
            int H = in.dim(2), W = in.dim(3);
            return g.zeros({in.dim(0), in.dim(1), (H + stride - 1) / stride,
                            (W + stride - 1) / stride});
        }
    }
    throw std::logic_error("build_candidate: unreachable");
}

/// Softmax-weighted mixture of all candidate ops on one edge; differentiable
/// in the edge's alpha row and in every candidate's weights.
inline int build_mixed_edge(ComputeGraph& g, int x, int alpha_id, const EdgePlan& e) {
    int coeff = g.softmax_vec(g.row_slice(alpha_id, e.row));
    std::vector<int> outs;
    outs.reserve(e.cands.size());
    for (const CandidateParams& cp : e.cands) outs.push_back(build_candidate(g, x, cp, e.stride));
    return g.weighted_sum(coeff, outs);
}

}  // namespace net

/// Shared face of the search-stage and evaluation-stage networks: a ParamStore
/// plus a graph builder for one batch.
class NetworkBase {
  public:
    virtual ~NetworkBase() = default;
    virtual ParamStore& store() = 0;
    virtual const ParamStore& store() const = 0;
    virtual const NetworkSpec& spec() const = 0;
    virtual int forward_logits(ComputeGraph& g, Tensor batch) const = 0;

    int forward_loss(ComputeGraph& g, Tensor batch, const std::vector<int>& labels,
                     int* logits_out = nullptr) const {
        int logits = forward_logits(g, std::move(batch));
        if (logits_out) *logits_out = logits;
        return g.softmax_cross_entropy(logits, labels);
    }
};

/// Search-stage network holding every candidate op behind per-edge softmax
/// mixtures. The weight section and arch section live in one ParamStore with
/// deterministic ids, so stores built from the same (spec, seed) agree
/// bit-for-bit.
class SuperNetwork : public NetworkBase {
  public:
    SuperNetwork(NetworkSpec spec, std::uint64_t seed) {
        spec.validate();
        plan_.spec = spec;
        Rng rng(derive_seed(seed, 0x5eed5eedull));
        int c_stem = 3 * spec.init_channels;
        plan_.stem_conv = net::add_conv(store_, rng, "stem/conv", c_stem, spec.in_channels, 3);

        auto red_pos = spec.reduction_positions();
        int c_pp = c_stem, c_p = c_stem, c_cur = spec.init_channels;
        bool red_prev = false;
        for (int i = 0; i < spec.num_cells; ++i) {
            bool red = std::find(red_pos.begin(), red_pos.end(), i) != red_pos.end();
            if (red) c_cur *= 2;
            net::CellPlan cell;
            cell.reduction = red;
            cell.pre0_factorized = red_prev;
            cell.channels = c_cur;
            std::string base = "cell" + std::to_string(i);
            if (red_prev) {
                cell.pre0 = {net::add_conv(store_, rng, base + "/pre0/fr1", c_cur / 2, c_pp, 1),
                             net::add_conv(store_, rng, base + "/pre0/fr2", c_cur / 2, c_pp, 1)};
            } else {
                cell.pre0 = {net::add_conv(store_, rng, base + "/pre0/conv", c_cur, c_pp, 1)};
            }
            cell.pre1 = net::add_conv(store_, rng, base + "/pre1/conv", c_cur, c_p, 1);
            for (int j = 0; j < CellTopology::kInterNodes; ++j)
                for (int p = 0; p < CellTopology::edge_count(j); ++p) {
                    net::EdgePlan e;
                    e.row = CellTopology::edge_row(j, p);
                    e.pred = p;
                    e.stride = (red && p < 2) ? 2 : 1;
                    std::string eb = base + "/edge" + std::to_string(e.row);
                    for (int k = 0; k < kNumCandidates; ++k) {
                        OpKind kind = static_cast<OpKind>(k);
                        e.cands.push_back(net::make_candidate(
                            store_, rng, eb + "/" + op_kind_name(kind), kind, c_cur, e.stride));
                    }
                    cell.edges.push_back(std::move(e));
                }
            plan_.cells.push_back(std::move(cell));
            c_pp = c_p;
            c_p = 4 * c_cur;
            red_prev = red;
        }

        Tensor cw({spec.num_classes, c_p});
        for (std::int64_t i = 0; i < cw.numel(); ++i) cw[i] = rng.normal(0.0, 0.01);
        plan_.classifier_w = store_.add("classifier/weight", Section::Weight, std::move(cw));
        plan_.classifier_b =
            store_.add("classifier/bias", Section::Weight, Tensor::zeros({spec.num_classes}));

        auto alpha_init = [&rng]() {
            Tensor a({CellTopology::kEdges, kNumCandidates});
            for (std::int64_t i = 0; i < a.numel(); ++i) a[i] = rng.normal(0.0, 1e-3);
            return a;
        };
        plan_.alpha_normal = store_.add("alpha_normal", Section::Arch, alpha_init());
        plan_.alpha_reduce = store_.add("alpha_reduce", Section::Arch, alpha_init());
    }

    const NetworkSpec& spec() const override { return plan_.spec; }
    const net::NetworkPlan& plan() const { return plan_; }
    ParamStore& store() override { return store_; }
    const ParamStore& store() const override { return store_; }
    int alpha_normal_id() const { return plan_.alpha_normal; }
    int alpha_reduce_id() const { return plan_.alpha_reduce; }

    ArchParams arch() const {
        return ArchParams{store_.value(plan_.alpha_normal), store_.value(plan_.alpha_reduce)};
    }
    void set_arch(const ArchParams& a) {
        store_.value(plan_.alpha_normal) = a.normal;
        store_.value(plan_.alpha_reduce) = a.reduce;
    }

    /// Builds the full forward graph for one batch; returns the logits node.
    int forward_logits(ComputeGraph& g, Tensor batch) const override {
        const Tensor& b = batch;
        if (b.rank() != 4 || b.dim(1) != plan_.spec.in_channels ||
            b.dim(2) != plan_.spec.in_height || b.dim(3) != plan_.spec.in_width)
            throw ShapeError("super_forward: batch shape " + shape_str(b.shape()) +
                             " does not match spec input");
        int x = g.input(std::move(batch));
        int stem = g.batch_norm(g.conv2d(x, plan_.stem_conv, ConvSpec{1, 1, 1, 1}));
        int s0 = stem, s1 = stem;
        for (const net::CellPlan& cell : plan_.cells) {
            int out = forward_cell(g, cell, s0, s1);
            s0 = s1;
            s1 = out;
        }
        int pooled = g.global_avg_pool(g.relu(s1));
        return g.linear(pooled, plan_.classifier_w, plan_.classifier_b);
    }

  private:
    int forward_cell(ComputeGraph& g, const net::CellPlan& cell, int s0, int s1) const {
        int p0 = cell.pre0_factorized
                     ? net::build_factorized_reduce(g, s0, cell.pre0[0], cell.pre0[1])
                     : net::build_relu_conv_bn(g, s0, cell.pre0[0]);
        int p1 = net::build_relu_conv_bn(g, s1, cell.pre1);
        int alpha = cell.reduction ? plan_.alpha_reduce : plan_.alpha_normal;
        std::vector<int> states = {p0, p1};
        size_t edge = 0;
        std::vector<int> outs;
        for (int j = 0; j < CellTopology::kInterNodes; ++j) {
            std::vector<int> incoming;
            for (int p = 0; p < CellTopology::edge_count(j); ++p, ++edge)
                incoming.push_back(net::build_mixed_edge(g, states[p], alpha, cell.edges[edge]));
            states.push_back(g.add_n(incoming));
            outs.push_back(states.back());
        }
        return g.concat_channels(outs);
    }

    net::NetworkPlan plan_;
    ParamStore store_;
};

/// Evaluation-stage network: only the genotype's chosen ops, no mixtures and
/// no architecture parameters. Shares the stem/preprocessing/classifier
/// scheme and parameter naming with the super-network.
class FixedNetwork : public NetworkBase {
  public:
    FixedNetwork(Genotype genotype, NetworkSpec spec, std::uint64_t seed)
        : genotype_(std::move(genotype)) {
        spec.validate();
        genotype_.validate();
        plan_.spec = spec;
        Rng rng(derive_seed(seed, 0x5eed5eedull));
        int c_stem = 3 * spec.init_channels;
        plan_.stem_conv = net::add_conv(store_, rng, "stem/conv", c_stem, spec.in_channels, 3);

        auto red_pos = spec.reduction_positions();
        int c_pp = c_stem, c_p = c_stem, c_cur = spec.init_channels;
        bool red_prev = false;
        for (int i = 0; i < spec.num_cells; ++i) {
            bool red = std::find(red_pos.begin(), red_pos.end(), i) != red_pos.end();
            if (red) c_cur *= 2;
            net::CellPlan cell;
            cell.reduction = red;
            cell.pre0_factorized = red_prev;
            cell.channels = c_cur;
            std::string base = "cell" + std::to_string(i);
            if (red_prev) {
                cell.pre0 = {net::add_conv(store_, rng, base + "/pre0/fr1", c_cur / 2, c_pp, 1),
                             net::add_conv(store_, rng, base + "/pre0/fr2", c_cur / 2, c_pp, 1)};
            } else {
                cell.pre0 = {net::add_conv(store_, rng, base + "/pre0/conv", c_cur, c_pp, 1)};
            }
            cell.pre1 = net::add_conv(store_, rng, base + "/pre1/conv", c_cur, c_p, 1);
            const auto& cellspec = red ? genotype_.reduce : genotype_.normal;
            for (int j = 0; j < CellTopology::kInterNodes; ++j)
                for (const GenotypeEdge& ge : cellspec[j]) {
                    net::EdgePlan e;
                    e.row = CellTopology::edge_row(j, ge.pred);
                    e.pred = ge.pred;
                    e.stride = (red && ge.pred < 2) ? 2 : 1;
                    std::string eb = base + "/edge" + std::to_string(e.row);
                    e.cands.push_back(net::make_candidate(store_, rng,
                                                          eb + "/" + op_kind_name(ge.op), ge.op,
                                                          c_cur, e.stride));
                    cell.edges.push_back(std::move(e));
                }
            plan_.cells.push_back(std::move(cell));
            c_pp = c_p;
            c_p = 4 * c_cur;
            red_prev = red;
        }

        Tensor cw({spec.num_classes, c_p});
        for (std::int64_t i = 0; i < cw.numel(); ++i) cw[i] = rng.normal(0.0, 0.01);
        plan_.classifier_w = store_.add("classifier/weight", Section::Weight, std::move(cw));
        plan_.classifier_b =
            store_.add("classifier/bias", Section::Weight, Tensor::zeros({spec.num_classes}));
    }

    const NetworkSpec& spec() const override { return plan_.spec; }
    const Genotype& genotype() const { return genotype_; }
    ParamStore& store() override { return store_; }
    const ParamStore& store() const override { return store_; }

    int forward_logits(ComputeGraph& g, Tensor batch) const override {
        const Tensor& b = batch;
        if (b.rank() != 4 || b.dim(1) != plan_.spec.in_channels ||
            b.dim(2) != plan_.spec.in_height || b.dim(3) != plan_.spec.in_width)
            throw ShapeError("fixed_forward: batch shape " + shape_str(b.shape()) +
                             " does not match spec input");
        int x = g.input(std::move(batch));
        int stem = g.batch_norm(g.conv2d(x, plan_.stem_conv, ConvSpec{1, 1, 1, 1}));
        int s0 = stem, s1 = stem;
        for (const net::CellPlan& cell : plan_.cells) {
            int out = forward_cell(g, cell, s0, s1);
            s0 = s1;
            s1 = out;
        }
        int pooled = g.global_avg_pool(g.relu(s1));
        return g.linear(pooled, plan_.classifier_w, plan_.classifier_b);
    }

  private:
    int forward_cell(ComputeGraph& g, const net::CellPlan& cell, int s0, int s1) const {
        int p0 = cell.pre0_factorized
                     ? net::build_factorized_reduce(g, s0, cell.pre0[0], cell.pre0[1])
                     : net::build_relu_conv_bn(g, s0, cell.pre0[0]);
        int p1 = net::build_relu_conv_bn(g, s1, cell.pre1);
        std::vector<int> states = {p0, p1};
        size_t edge = 0;
        std::vector<int> outs;
        for (int j = 0; j < CellTopology::kInterNodes; ++j) {
            std::vector<int> incoming;
            for (int e = 0; e < 2; ++e, ++edge) {
                const net::EdgePlan& ep = cell.edges[edge];
                incoming.push_back(
                    net::build_candidate(g, states[ep.pred], ep.cands[0], ep.stride));
            }
            states.push_back(g.add_n(incoming));
            outs.push_back(states.back());
        }
        return g.concat_channels(outs);
    }

    Genotype genotype_;
    net::NetworkPlan plan_;
    ParamStore store_;
};

/// Model size: total element count of the weight section.
inline std::int64_t parameter_count(const ParamStore& store) {
    return store.element_count(Section::Weight);
}

/// Softmax over one alpha row.
inline std::vector<double> edge_softmax(const Tensor& alpha, int row) {
    int d = alpha.dim(1);
    std::vector<double> p(static_cast<size_t>(d));
    const double* r = alpha.data() + static_cast<std::int64_t>(row) * d;
    double mx = r[0];
    for (int i = 1; i < d; ++i) mx = std::max(mx, r[i]);
    double sum = 0.0;
    for (int i = 0; i < d; ++i) {
        p[static_cast<size_t>(i)] = std::exp(r[i] - mx);
        sum += p[static_cast<size_t>(i)];
    }
    for (double& v : p) v /= sum;
    return p;
}

/// Architecture selection: per intermediate node, each incoming edge is
/// scored by its strongest non-zero op's softmax weight and the two
/// best-scoring edges are kept. Ties break toward the lower predecessor
/// index and the lower op ordinal.
inline Genotype discretize(const ArchParams& arch) {
    if (!arch.normal.all_finite() || !arch.reduce.all_finite())
        throw NumericError("discretize: non-finite architecture parameters");
    Genotype g;
    auto pick = [](const Tensor& alpha, std::array<Genotype::NodeEdges, 4>& out) {
        for (int j = 0; j < CellTopology::kInterNodes; ++j) {
            struct Scored {
                int pred;
                OpKind op;
                double score;
            };
            std::vector<Scored> scored;
            for (int p = 0; p < CellTopology::edge_count(j); ++p) {
                auto probs = edge_softmax(alpha, CellTopology::edge_row(j, p));
                int best = -1;
                for (int k = 0; k < kNumCandidates; ++k) {
                    if (static_cast<OpKind>(k) == OpKind::Zero) continue;
                    if (best < 0 || probs[static_cast<size_t>(k)] > probs[static_cast<size_t>(best)])
                        best = k;
                }
                scored.push_back({p, static_cast<OpKind>(best), probs[static_cast<size_t>(best)]});
            }
            std::stable_sort(scored.begin(), scored.end(), [](const Scored& a, const Scored& b) {
                if (a.score != b.score) return a.score > b.score;
                return a.pred < b.pred;
            });
            Scored top[2] = {scored[0], scored[1]};
            if (top[0].pred > top[1].pred) std::swap(top[0], top[1]);
            out[j][0] = {top[0].pred, top[0].op};
            out[j][1] = {top[1].pred, top[1].op};
        }
    };
    pick(arch.normal, g.normal);
    pick(arch.reduce, g.reduce);
    g.validate();
    return g;
}

/// Exports a genotype as DOT or canonical JSON text.
inline std::string export_genotype(const Genotype& g, const std::string& format) {
    if (format == "dot") return genotype_to_dot(g);
    if (format == "json") return genotype_to_json_text(g);
    throw std::invalid_argument("export_genotype: unknown format '" + format + "'");
}

}  // namespace fednas
