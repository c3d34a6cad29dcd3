#pragma once

#include <algorithm>
#include <cstdint>
#include <string>
#include <vector>

#include "fednas/data.hpp"
#include "fednas/gradcheck.hpp"
#include "fednas/partition.hpp"
#include "fednas/search_space.hpp"

namespace fednas {

/// Mixed-level optimization hyperparameters. eta_w / eta_alpha / lambda are
/// the step sizes and validation weight of the alternating update; momentum
/// and weight decay are off unless configured.
struct SearchHyper {
    double eta_w = 0.05;
    double eta_alpha = 0.05;
    double lambda = 1.0;
    int local_epochs = 5;
    int batch_size = 64;
    double grad_clip = 5.0;  // <= 0 disables clipping
    double momentum = 0.0;
    double weight_decay = 0.0;
    bool augment = false;

    void validate() const {
        if (!(eta_w >= 0) || !(eta_alpha >= 0))
            throw std::invalid_argument("hyper: learning rates must be >= 0");
        if (lambda < 0) throw std::invalid_argument("hyper: lambda must be >= 0");
        if (local_epochs < 0) throw std::invalid_argument("hyper: local_epochs must be >= 0");
        if (batch_size < 1) throw std::invalid_argument("hyper: batch_size must be >= 1");
        if (momentum < 0 || momentum >= 1)
            throw std::invalid_argument("hyper: momentum must be in [0, 1)");
    }
};

/// Per-client mutable state. The RNG streams persist across rounds, so a
/// K=1 federated run consumes randomness exactly like one centralized loop.
struct ClientState {
    int client_id = 0;
    const Dataset* data = nullptr;
    ClientShard shard;
    Rng rng;      // epoch shuffles and augmentation
    Rng val_rng;  // validation-loader cycling
    std::vector<int> val_order;
    size_t val_pos = 0;
    std::vector<Tensor> velocity;  // momentum buffers, lazily initialized

    ClientState() = default;
    ClientState(int id, const Dataset* d, ClientShard sh, std::uint64_t run_seed)
        : client_id(id),
          data(d),
          shard(std::move(sh)),
          rng(derive_seed(run_seed, 0xc11e000ull + static_cast<std::uint64_t>(id))),
          val_rng(derive_seed(run_seed, 0xba1000ull + static_cast<std::uint64_t>(id))) {
        val_order = shard.val_indices;
    }
};

namespace detail_ls {

inline void apply_weight_update(NetworkBase& model, ClientState& st, GradMap& grads,
                                const SearchHyper& hyper) {
    ParamStore& store = model.store();
    if (hyper.weight_decay > 0) {
        for (int id = 0; id < store.size(); ++id) {
            if (store.section(id) != Section::Weight) continue;
            Tensor& g = grads.at(id);
            const Tensor& p = store.value(id);
            for (std::int64_t i = 0; i < p.numel(); ++i) g[i] += hyper.weight_decay * p[i];
        }
    }
    if (hyper.grad_clip > 0) grads.clip_section(store, Section::Weight, hyper.grad_clip);
    if (hyper.momentum > 0) {
        if (st.velocity.empty()) st.velocity.resize(static_cast<size_t>(store.size()));
        for (int id = 0; id < store.size(); ++id) {
            if (store.section(id) != Section::Weight) continue;
            Tensor& v = st.velocity[static_cast<size_t>(id)];
            Tensor& g = grads.at(id);
            if (v.empty()) v = Tensor::zeros(g.shape());
            for (std::int64_t i = 0; i < g.numel(); ++i) {
                v[i] = hyper.momentum * v[i] + g[i];
                g[i] = v[i];
            }
        }
    }
    sgd_step(store, grads, Section::Weight, hyper.eta_w);
}

}  // namespace detail_ls

/// One SGD step on the training loss: weight section only, alpha untouched.
inline double step_w(NetworkBase& model, ClientState& st, Tensor batch,
                     const std::vector<int>& labels, const SearchHyper& hyper) {
    ComputeGraph g(model.store());
    int loss = model.forward_loss(g, std::move(batch), labels);
    double loss_v = g.value(loss)[0];
    if (!std::isfinite(loss_v))
        throw NumericError("step_w: non-finite training loss on client " +
                           std::to_string(st.client_id));
    GradMap grads = g.backward(loss, model.store(), true, false);
    detail_ls::apply_weight_update(model, st, grads, hyper);
    return loss_v;
}

/// One architecture step: alpha moves along grad_tr + lambda * grad_val,
/// both evaluated at the current weights; the weight section is untouched.
inline std::pair<double, double> step_alpha(NetworkBase& model, ClientState& st, Tensor train_batch,
                                            const std::vector<int>& train_labels, Tensor val_batch,
                                            const std::vector<int>& val_labels,
                                            const SearchHyper& hyper) {
    ParamStore& store = model.store();
    ComputeGraph g_tr(store);
    int loss_tr = model.forward_loss(g_tr, std::move(train_batch), train_labels);
    double tr_v = g_tr.value(loss_tr)[0];
    if (!std::isfinite(tr_v))
        throw NumericError("step_alpha: non-finite training loss on client " +
                           std::to_string(st.client_id));
    GradMap g1 = g_tr.backward(loss_tr, store, false, true);

    ComputeGraph g_va(store);
    int loss_va = model.forward_loss(g_va, std::move(val_batch), val_labels);
    double va_v = g_va.value(loss_va)[0];
    if (!std::isfinite(va_v))
        throw NumericError("step_alpha: non-finite validation loss on client " +
                           std::to_string(st.client_id));
    GradMap g2 = g_va.backward(loss_va, store, false, true);

    for (int id = 0; id < store.size(); ++id) {
        if (store.section(id) != Section::Arch) continue;
        Tensor& a = g1.at(id);
        const Tensor& b = g2.at(id);
        for (std::int64_t i = 0; i < a.numel(); ++i) a[i] += hyper.lambda * b[i];
    }
    sgd_step(store, g1, Section::Arch, hyper.eta_alpha);
    return {tr_v, va_v};
}

namespace detail_ls {

/// Next validation minibatch, cycling with reshuffles.
inline std::pair<Tensor, std::vector<int>> next_val_batch(ClientState& st, int batch_size) {
    size_t take = std::min<size_t>(static_cast<size_t>(batch_size), st.val_order.size());
    if (st.val_pos + take > st.val_order.size()) {
        st.val_rng.shuffle(st.val_order);
        st.val_pos = 0;
    }
    auto out = st.data->gather(st.val_order, st.val_pos, take);
    st.val_pos += take;
    return out;
}

}  // namespace detail_ls

/// E local epochs of the mixed-level loop: per training minibatch, a weight
/// step then an alpha step pairing the minibatch with the next validation
/// batch. Returns the shard's total sample count N_k.
inline int client_local_search(NetworkBase& model, ClientState& st, const SearchHyper& hyper) {
    hyper.validate();
    if (st.shard.train_indices.empty() || st.shard.val_indices.empty())
        throw std::runtime_error("client_local_search: empty shard on client " +
                                 std::to_string(st.client_id));
    std::vector<int> order = st.shard.train_indices;
    for (int e = 0; e < hyper.local_epochs; ++e) {
        st.rng.shuffle(order);
        for (size_t at = 0; at < order.size(); at += static_cast<size_t>(hyper.batch_size)) {
            size_t take = std::min<size_t>(static_cast<size_t>(hyper.batch_size),
                                           order.size() - at);
            auto [batch, labels] = st.data->gather(order, at, take);
            if (hyper.augment) augment_batch(batch, st.rng);
            step_w(model, st, batch, labels, hyper);
            auto [vbatch, vlabels] = detail_ls::next_val_batch(st, hyper.batch_size);
            step_alpha(model, st, std::move(batch), labels, std::move(vbatch), vlabels, hyper);
        }
    }
    return st.shard.sample_count();
}

/// E local epochs of weight-only training (the FedAvg local update).
inline int client_local_train(NetworkBase& model, ClientState& st, const SearchHyper& hyper) {
    hyper.validate();
    if (st.shard.train_indices.empty() && st.shard.val_indices.empty())
        throw std::runtime_error("client_local_train: empty shard on client " +
                                 std::to_string(st.client_id));
    // evaluation stage trains on the client's full shard
    std::vector<int> order = st.shard.train_indices;
    order.insert(order.end(), st.shard.val_indices.begin(), st.shard.val_indices.end());
    std::sort(order.begin(), order.end());
    for (int e = 0; e < hyper.local_epochs; ++e) {
        st.rng.shuffle(order);
        for (size_t at = 0; at < order.size(); at += static_cast<size_t>(hyper.batch_size)) {
            size_t take = std::min<size_t>(static_cast<size_t>(hyper.batch_size),
                                           order.size() - at);
            auto [batch, labels] = st.data->gather(order, at, take);
            if (hyper.augment) augment_batch(batch, st.rng);
            step_w(model, st, std::move(batch), labels, hyper);
        }
    }
    return st.shard.sample_count();
}

struct EvalResult {
    double loss = 0.0;
    double accuracy = 0.0;
    int samples = 0;
};

/// Deterministic full pass over a dataset subset; no parameter mutation,
/// batch statistics per evaluation batch. Optionally dumps logits rows.
inline EvalResult evaluate(const NetworkBase& model, const Dataset& data,
                           const std::vector<int>& indices, int batch_size = 100,
                           std::vector<double>* logit_dump = nullptr) {
    if (indices.empty()) throw std::invalid_argument("evaluate: empty dataset");
    EvalResult r;
    double loss_sum = 0.0;
    int correct = 0;
    for (size_t at = 0; at < indices.size(); at += static_cast<size_t>(batch_size)) {
        size_t take = std::min<size_t>(static_cast<size_t>(batch_size), indices.size() - at);
        auto [batch, labels] = data.gather(indices, at, take);
        ComputeGraph g(model.store());
        int logits_node = 0;
        int loss = model.forward_loss(g, std::move(batch), labels, &logits_node);
        const Tensor& logits = g.value(logits_node);
        int J = logits.dim(1);
        for (size_t i = 0; i < take; ++i) {
            const double* row = logits.data() + static_cast<std::int64_t>(i) * J;
            int best = 0;
            for (int j = 1; j < J; ++j)
                if (row[j] > row[best]) best = j;
            if (best == labels[i]) ++correct;
            if (logit_dump)
                logit_dump->insert(logit_dump->end(), row, row + J);
        }
        loss_sum += g.value(loss)[0] * static_cast<double>(take);
    }
    r.samples = static_cast<int>(indices.size());
    r.loss = loss_sum / r.samples;
    r.accuracy = static_cast<double>(correct) / r.samples;
    return r;
}

inline std::vector<int> all_indices(const Dataset& d) {
    std::vector<int> idx(static_cast<size_t>(d.size()));
    for (int i = 0; i < d.size(); ++i) idx[static_cast<size_t>(i)] = i;
    return idx;
}

}  // namespace fednas
