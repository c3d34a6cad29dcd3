#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "fednas/data.hpp"
#include "fednas/rng.hpp"

namespace fednas {

struct PartitionSpec {
    int clients = 16;
    double concentration = 0.5;
    std::uint64_t seed = 0;
    double val_fraction = 0.5;

    void validate() const {
        if (clients < 1) throw std::invalid_argument("partition: clients must be >= 1");
        if (!(concentration > 0)) throw std::invalid_argument("partition: concentration must be > 0");
        if (!(val_fraction > 0) || !(val_fraction < 1))
            throw std::invalid_argument("partition: val_fraction must be in (0, 1)");
    }
};

/// One client's slice of the parent dataset by index, split into the local
/// training and validation parts Eq. 4 consumes.
struct ClientShard {
    int client_id = 0;
    std::vector<int> train_indices;
    std::vector<int> val_indices;

    int sample_count() const {
        return static_cast<int>(train_indices.size() + val_indices.size());
    }
};

/// Per-class Dirichlet split: for each class, draw proportions over clients,
/// shuffle the class's indices, and hand out contiguous runs whose sizes are
/// the proportions rounded by largest remainder — per-class counts across
/// clients always sum to the class total. A class may give a client zero
/// samples; a client with zero samples overall cannot train and is an error.
inline std::vector<std::vector<int>> dirichlet_partition(const std::vector<int>& labels,
                                                         int class_count,
                                                         const PartitionSpec& spec) {
    spec.validate();
    std::vector<std::vector<int>> by_class(static_cast<size_t>(class_count));
    for (size_t i = 0; i < labels.size(); ++i) {
        int y = labels[i];
        if (y < 0 || y >= class_count)
            throw std::invalid_argument("dirichlet_partition: label out of range");
        by_class[static_cast<size_t>(y)].push_back(static_cast<int>(i));
    }
    Rng rng(derive_seed(spec.seed, 0xd1a7ull));
    std::vector<std::vector<int>> shards(static_cast<size_t>(spec.clients));
    for (int c = 0; c < class_count; ++c) {
        std::vector<int>& idx = by_class[static_cast<size_t>(c)];
        rng.shuffle(idx);
        std::vector<double> p = rng.dirichlet(spec.concentration, static_cast<size_t>(spec.clients));
        int total = static_cast<int>(idx.size());
        // largest-remainder rounding to exact class totals
        std::vector<int> counts(static_cast<size_t>(spec.clients));
        std::vector<std::pair<double, int>> remainders;
        int assigned = 0;
        for (int k = 0; k < spec.clients; ++k) {
            double want = p[static_cast<size_t>(k)] * total;
            counts[static_cast<size_t>(k)] = static_cast<int>(want);
            assigned += counts[static_cast<size_t>(k)];
            remainders.push_back({want - counts[static_cast<size_t>(k)], k});
        }
        std::stable_sort(remainders.begin(), remainders.end(),
                         [](const auto& a, const auto& b) {
                             if (a.first != b.first) return a.first > b.first;
                             return a.second < b.second;
                         });
        for (int r = 0; r < total - assigned; ++r)
            counts[static_cast<size_t>(remainders[static_cast<size_t>(r)].second)]++;
        int at = 0;
        for (int k = 0; k < spec.clients; ++k) {
            shards[static_cast<size_t>(k)].insert(shards[static_cast<size_t>(k)].end(),
                                                  idx.begin() + at,
                                                  idx.begin() + at + counts[static_cast<size_t>(k)]);
            at += counts[static_cast<size_t>(k)];
        }
    }
    for (int k = 0; k < spec.clients; ++k) {
        if (shards[static_cast<size_t>(k)].empty())
            throw std::runtime_error("dirichlet_partition: client " + std::to_string(k) +
                                     " received no samples and cannot train");
        std::sort(shards[static_cast<size_t>(k)].begin(), shards[static_cast<size_t>(k)].end());
    }
    return shards;
}

/// Seeded shuffle-then-split of a shard's indices.
inline std::pair<std::vector<int>, std::vector<int>> train_val_split(std::vector<int> indices,
                                                                     double fraction,
                                                                     std::uint64_t seed) {
    if (!(fraction > 0) || !(fraction < 1))
        throw std::invalid_argument("train_val_split: fraction must be in (0, 1)");
    if (indices.size() < 2)
        throw std::invalid_argument("train_val_split: shard must have at least 2 samples");
    Rng rng(derive_seed(seed, 0x5b117ull));
    rng.shuffle(indices);
    size_t n_train = static_cast<size_t>(indices.size() * fraction);
    n_train = std::clamp<size_t>(n_train, 1, indices.size() - 1);
    std::vector<int> train(indices.begin(), indices.begin() + static_cast<std::int64_t>(n_train));
    std::vector<int> val(indices.begin() + static_cast<std::int64_t>(n_train), indices.end());
    return {std::move(train), std::move(val)};
}

/// Full partition artifact: the experiment's ground truth, serialized as the
/// run's partition file.
struct Partition {
    PartitionSpec spec;
    int class_count = 0;
    int dataset_size = 0;
    std::vector<ClientShard> shards;

    int total_samples() const {
        int n = 0;
        for (const ClientShard& s : shards) n += s.sample_count();
        return n;
    }
};

/// Builds the partition plus per-client train/validation splits.
inline Partition make_partition(const Dataset& data, const PartitionSpec& spec) {
    Partition p;
    p.spec = spec;
    p.class_count = data.class_count;
    p.dataset_size = data.size();
    auto shards = dirichlet_partition(data.labels, data.class_count, spec);
    for (int k = 0; k < spec.clients; ++k) {
        ClientShard shard;
        shard.client_id = k;
        auto [tr, va] = train_val_split(shards[static_cast<size_t>(k)], 1.0 - spec.val_fraction,
                                        derive_seed(spec.seed, static_cast<std::uint64_t>(k)));
        shard.train_indices = std::move(tr);
        shard.val_indices = std::move(va);
        p.shards.push_back(std::move(shard));
    }
    return p;
}

/// Class-count table in the layout of a per-client distribution table: one
/// row per client, one column per class, trailing row of column sums.
inline std::string partition_class_table(const Partition& p, const std::vector<int>& labels) {
    std::ostringstream os;
    os << "client";
    for (int c = 0; c < p.class_count; ++c) os << ",c" << c;
    os << ",total\n";
    std::vector<std::int64_t> colsum(static_cast<size_t>(p.class_count), 0);
    for (const ClientShard& s : p.shards) {
        std::vector<int> counts(static_cast<size_t>(p.class_count), 0);
        for (const std::vector<int>* part : {&s.train_indices, &s.val_indices})
            for (int i : *part) counts[static_cast<size_t>(labels[static_cast<size_t>(i)])]++;
        os << s.client_id;
        int tot = 0;
        for (int c = 0; c < p.class_count; ++c) {
            os << "," << counts[static_cast<size_t>(c)];
            colsum[static_cast<size_t>(c)] += counts[static_cast<size_t>(c)];
            tot += counts[static_cast<size_t>(c)];
        }
        os << "," << tot << "\n";
    }
    os << "sum";
    std::int64_t grand = 0;
    for (int c = 0; c < p.class_count; ++c) {
        os << "," << colsum[static_cast<size_t>(c)];
        grand += colsum[static_cast<size_t>(c)];
    }
    os << "," << grand << "\n";
    return os.str();
}

constexpr int kPartitionSchemaVersion = 1;

inline nlohmann::json partition_to_json(const Partition& p) {
    nlohmann::json clients = nlohmann::json::array();
    for (const ClientShard& s : p.shards)
        clients.push_back({{"id", s.client_id},
                           {"train", s.train_indices},
                           {"val", s.val_indices}});
    return nlohmann::json{{"schema_version", kPartitionSchemaVersion},
                          {"seed", p.spec.seed},
                          {"concentration", p.spec.concentration},
                          {"clients", p.spec.clients},
                          {"val_fraction", p.spec.val_fraction},
                          {"class_count", p.class_count},
                          {"dataset_size", p.dataset_size},
                          {"assignment", clients}};
}

inline Partition partition_from_json(const nlohmann::json& j) {
    if (j.at("schema_version").get<int>() != kPartitionSchemaVersion)
        throw std::invalid_argument("partition file: unsupported schema version");
    Partition p;
    p.spec.seed = j.at("seed").get<std::uint64_t>();
    p.spec.concentration = j.at("concentration").get<double>();
    p.spec.clients = j.at("clients").get<int>();
    p.spec.val_fraction = j.at("val_fraction").get<double>();
    p.class_count = j.at("class_count").get<int>();
    p.dataset_size = j.at("dataset_size").get<int>();
    for (const auto& c : j.at("assignment")) {
        ClientShard s;
        s.client_id = c.at("id").get<int>();
        s.train_indices = c.at("train").get<std::vector<int>>();
        s.val_indices = c.at("val").get<std::vector<int>>();
        p.shards.push_back(std::move(s));
    }
    if (static_cast<int>(p.shards.size()) != p.spec.clients)
        throw std::invalid_argument("partition file: client count mismatch");
    return p;
}

inline void save_partition(const Partition& p, const std::string& path) {
    std::ofstream f(path);
    if (!f) throw IoError("cannot write " + path);
    f << partition_to_json(p).dump(2) << "\n";
}

inline Partition load_partition(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot open " + path);
    nlohmann::json j;
    f >> j;
    return partition_from_json(j);
}

/// Checks that a partition covers its dataset exactly once with disjoint
/// train/validation parts. Returns a human-readable error or empty string.
inline std::string check_partition(const Partition& p) {
    std::vector<int> seen(static_cast<size_t>(p.dataset_size), 0);
    for (const ClientShard& s : p.shards) {
        for (const std::vector<int>* part : {&s.train_indices, &s.val_indices})
            for (int i : *part) {
                if (i < 0 || i >= p.dataset_size)
                    return "index " + std::to_string(i) + " out of range";
                seen[static_cast<size_t>(i)]++;
            }
    }
    for (int i = 0; i < p.dataset_size; ++i) {
        if (seen[static_cast<size_t>(i)] == 0) return "index " + std::to_string(i) + " dropped";
        if (seen[static_cast<size_t>(i)] > 1) return "index " + std::to_string(i) + " duplicated";
    }
    return "";
}

}  // namespace fednas
