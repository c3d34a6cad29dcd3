#pragma once

#include <map>
#include <string>
#include <vector>

#include "fednas/tensor.hpp"

namespace fednas {

/// Parameter section: network weights (w) or architecture parameters (alpha).
enum class Section { Weight, Arch };

inline const char* section_name(Section s) { return s == Section::Weight ? "weight" : "arch"; }

/// Ordered collection of named parameter tensors. Ids are dense integers
/// assigned in construction order, so two stores built by the same network
/// constructor agree on ids across processes.
class ParamStore {
  public:
    struct Entry {
        std::string name;
        Section section;
        Tensor value;
    };

    int add(std::string name, Section section, Tensor value) {
        int id = static_cast<int>(entries_.size());
        by_name_[name] = id;
        entries_.push_back(Entry{std::move(name), section, std::move(value)});
        return id;
    }

    int size() const { return static_cast<int>(entries_.size()); }

    Tensor& value(int id) { return entries_.at(id).value; }
    const Tensor& value(int id) const { return entries_.at(id).value; }
    const std::string& name(int id) const { return entries_.at(id).name; }
    Section section(int id) const { return entries_.at(id).section; }

    int find(const std::string& name) const {
        auto it = by_name_.find(name);
        return it == by_name_.end() ? -1 : it->second;
    }

    std::vector<int> section_ids(Section s) const {
        std::vector<int> ids;
        for (int i = 0; i < size(); ++i)
            if (entries_[i].section == s) ids.push_back(i);
        return ids;
    }

    /// Total element count across a section (weight section = model size).
    std::int64_t element_count(Section s) const {
        std::int64_t n = 0;
        for (const auto& e : entries_)
            if (e.section == s) n += e.value.numel();
        return n;
    }

    /// Copy one section's values from another store with identical layout.
    void assign_section(const ParamStore& src, Section s) {
        if (src.size() != size()) throw ShapeError("assign_section: store layout mismatch");
        for (int i = 0; i < size(); ++i) {
            if (entries_[i].section != s) continue;
            if (!entries_[i].value.same_shape(src.entries_[i].value))
                throw ShapeError("assign_section: shape mismatch for " + entries_[i].name);
            entries_[i].value = src.entries_[i].value;
        }
    }

    bool section_equal(const ParamStore& other, Section s) const {
        if (other.size() != size()) return false;
        for (int i = 0; i < size(); ++i)
            if (entries_[i].section == s && !(entries_[i].value == other.entries_[i].value))
                return false;
        return true;
    }

  private:
    std::vector<Entry> entries_;
    std::map<std::string, int> by_name_;
};

/// Gradient map keyed by parameter id; unset slots mean "not touched yet".
struct GradMap {
    std::vector<Tensor> grads;

    explicit GradMap(int n_params = 0) : grads(static_cast<size_t>(n_params)) {}

    bool has(int id) const { return !grads[static_cast<size_t>(id)].empty(); }
    Tensor& at(int id) { return grads[static_cast<size_t>(id)]; }
    const Tensor& at(int id) const { return grads[static_cast<size_t>(id)]; }

    void accumulate(int id, const Tensor& g) {
        Tensor& slot = grads[static_cast<size_t>(id)];
        if (slot.empty()) {
            slot = g;
        } else {
            double* d = slot.data();
            const double* s = g.data();
            for (std::int64_t i = 0; i < g.numel(); ++i) d[i] += s[i];
        }
    }

    /// Ensure every parameter of the section has a (possibly zero) gradient.
    void fill_missing(const ParamStore& store, Section s) {
        for (int i = 0; i < store.size(); ++i)
            if (store.section(i) == s && !has(i)) grads[i] = Tensor::zeros(store.value(i).shape());
    }

    double l2_norm(const ParamStore& store, Section s) const {
        double sq = 0.0;
        for (int i = 0; i < store.size(); ++i) {
            if (store.section(i) != s || !has(i)) continue;
            const Tensor& g = grads[i];
            for (std::int64_t j = 0; j < g.numel(); ++j) sq += g[j] * g[j];
        }
        return std::sqrt(sq);
    }

    /// Scale the section's gradients so their global L2 norm is at most `clip`.
    void clip_section(const ParamStore& store, Section s, double clip) {
        double norm = l2_norm(store, s);
        if (norm <= clip || norm == 0.0) return;
        double scale = clip / norm;
        for (int i = 0; i < store.size(); ++i) {
            if (store.section(i) != s || !has(i)) continue;
            Tensor& g = grads[i];
            for (std::int64_t j = 0; j < g.numel(); ++j) g[j] *= scale;
        }
    }
};

/// In-place SGD update p <- p - lr * g over one section; the other section
/// is left bit-identical. Missing gradients for section parameters are an
/// error; callers obtain complete maps from backward().
inline void sgd_step(ParamStore& store, const GradMap& grads, Section section, double lr) {
    if (lr < 0) throw std::invalid_argument("sgd_step: negative learning rate");
    for (int i = 0; i < store.size(); ++i) {
        if (store.section(i) != section) continue;
        if (static_cast<size_t>(i) >= grads.grads.size() || !grads.has(i))
            throw std::runtime_error("sgd_step: missing gradient for parameter " + store.name(i));
        Tensor& p = store.value(i);
        const Tensor& g = grads.at(i);
        if (!p.same_shape(g))
            throw ShapeError("sgd_step: gradient shape mismatch for " + store.name(i));
        double* pd = p.data();
        const double* gd = g.data();
        for (std::int64_t j = 0; j < p.numel(); ++j) pd[j] -= lr * gd[j];
    }
}

}  // namespace fednas
