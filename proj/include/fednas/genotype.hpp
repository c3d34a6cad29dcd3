#pragma once

#include <array>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "fednas/tensor.hpp"

namespace fednas {

/// Candidate operations on a cell edge. Ordinals are part of the stable
/// tie-break order used when discretizing.
enum class OpKind : int {
    SepConv3x3 = 0,
    SepConv5x5 = 1,
    DilConv3x3 = 2,
    DilConv5x5 = 3,
    MaxPool3x3 = 4,
    AvgPool3x3 = 5,
    Identity = 6,
    Zero = 7,
};

constexpr int kNumCandidates = 8;

inline const char* op_kind_name(OpKind k) {
    switch (k) {
        case OpKind::SepConv3x3: return "sep_conv_3x3";
        case OpKind::SepConv5x5: return "sep_conv_5x5";
        case OpKind::DilConv3x3: return "dil_conv_3x3";
        case OpKind::DilConv5x5: return "dil_conv_5x5";
        case OpKind::MaxPool3x3: return "max_pool_3x3";
        case OpKind::AvgPool3x3: return "avg_pool_3x3";
        case OpKind::Identity: return "identity";
        case OpKind::Zero: return "zero";
    }
    return "?";
}

inline OpKind op_kind_from_name(const std::string& name) {
    for (int i = 0; i < kNumCandidates; ++i)
        if (name == op_kind_name(static_cast<OpKind>(i))) return static_cast<OpKind>(i);
    throw std::invalid_argument("unknown op kind: " + name);
}

/// Cell wiring: 2 input nodes, 4 intermediate nodes, 1 output node. Every
/// (predecessor, intermediate) pair with predecessor index below the node is
/// an edge, 2+3+4+5 = 14 in total. Predecessor indices 0 and 1 are the cell
/// inputs; 2..5 are the intermediate nodes.
struct CellTopology {
    static constexpr int kInterNodes = 4;
    static constexpr int kEdges = 14;

    static int edge_count(int node) { return 2 + node; }
    static int row_offset(int node) { return node * (node + 3) / 2; }
    static int edge_row(int node, int pred) { return row_offset(node) + pred; }
};

/// One chosen (predecessor, operation) pair of a discretized cell.
struct GenotypeEdge {
    int pred = 0;
    OpKind op = OpKind::Identity;

    bool operator==(const GenotypeEdge&) const = default;
};

/// Discrete architecture: per intermediate node of each cell type, exactly
/// two incoming edges with their operations.
struct Genotype {
    using NodeEdges = std::array<GenotypeEdge, 2>;
    std::array<NodeEdges, CellTopology::kInterNodes> normal;
    std::array<NodeEdges, CellTopology::kInterNodes> reduce;

    bool operator==(const Genotype&) const = default;

    void validate() const {
        for (const auto* cell : {&normal, &reduce})
            for (int j = 0; j < CellTopology::kInterNodes; ++j) {
                const NodeEdges& es = (*cell)[j];
                if (es[0].pred == es[1].pred)
                    throw std::invalid_argument("genotype: duplicate predecessor at node " +
                                                std::to_string(j));
                for (const GenotypeEdge& e : es) {
                    if (e.pred < 0 || e.pred >= 2 + j)
                        throw std::invalid_argument("genotype: predecessor " +
                                                    std::to_string(e.pred) + " invalid for node " +
                                                    std::to_string(j));
                    if (e.op == OpKind::Zero)
                        throw std::invalid_argument("genotype: zero op at node " +
                                                    std::to_string(j));
                }
            }
    }
};

constexpr int kGenotypeSchemaVersion = 1;

inline nlohmann::json genotype_to_json(const Genotype& g) {
    auto cell = [](const std::array<Genotype::NodeEdges, 4>& c) {
        nlohmann::json nodes = nlohmann::json::array();
        for (const auto& es : c) {
            nlohmann::json pairs = nlohmann::json::array();
            for (const GenotypeEdge& e : es)
                pairs.push_back({{"op", op_kind_name(e.op)}, {"pred", e.pred}});
            nodes.push_back(pairs);
        }
        return nodes;
    };
    return nlohmann::json{{"schema_version", kGenotypeSchemaVersion},
                          {"normal", cell(g.normal)},
                          {"reduce", cell(g.reduce)}};
}

inline std::string genotype_to_json_text(const Genotype& g) {
    return genotype_to_json(g).dump(2) + "\n";
}

inline Genotype genotype_from_json(const nlohmann::json& j) {
    if (!j.contains("schema_version") || j.at("schema_version").get<int>() != kGenotypeSchemaVersion)
        throw std::invalid_argument("genotype: unsupported schema version");
    Genotype g;
    auto cell = [](const nlohmann::json& nodes, std::array<Genotype::NodeEdges, 4>& out) {
        if (!nodes.is_array() || nodes.size() != 4)
            throw std::invalid_argument("genotype: expected 4 intermediate nodes");
        for (size_t n = 0; n < 4; ++n) {
            const auto& pairs = nodes[n];
            if (!pairs.is_array() || pairs.size() != 2)
                throw std::invalid_argument("genotype: expected 2 edges per node");
            for (size_t e = 0; e < 2; ++e) {
                out[n][e].pred = pairs[e].at("pred").get<int>();
                out[n][e].op = op_kind_from_name(pairs[e].at("op").get<std::string>());
            }
        }
    };
    cell(j.at("normal"), g.normal);
    cell(j.at("reduce"), g.reduce);
    g.validate();
    return g;
}

inline Genotype genotype_from_json_text(const std::string& text) {
    return genotype_from_json(nlohmann::json::parse(text));
}

/// DOT rendering: one cluster per cell type with nodes c_{k-2}, c_{k-1},
/// 0..3 and c_k. Operation edges carry labels; the four node-to-output
/// concat edges do not.
inline std::string genotype_to_dot(const Genotype& g) {
    std::ostringstream os;
    os << "digraph genotype {\n  rankdir=LR;\n";
    auto cell = [&](const char* name, const std::array<Genotype::NodeEdges, 4>& c) {
        os << "  subgraph cluster_" << name << " {\n";
        os << "    label=\"" << name << " cell\";\n";
        os << "    " << name << "_in0 [label=\"c_{k-2}\" shape=box];\n";
        os << "    " << name << "_in1 [label=\"c_{k-1}\" shape=box];\n";
        for (int j = 0; j < 4; ++j)
            os << "    " << name << "_n" << j << " [label=\"" << j << "\"];\n";
        os << "    " << name << "_out [label=\"c_k\" shape=box];\n";
        for (int j = 0; j < 4; ++j) {
            for (const GenotypeEdge& e : c[j]) {
                os << "    " << name << "_";
                if (e.pred < 2)
                    os << "in" << e.pred;
                else
                    os << "n" << (e.pred - 2);
                os << " -> " << name << "_n" << j << " [label=\"" << op_kind_name(e.op)
                   << "\"];\n";
            }
        }
        for (int j = 0; j < 4; ++j)
            os << "    " << name << "_n" << j << " -> " << name << "_out;\n";
        os << "  }\n";
    };
    cell("normal", g.normal);
    cell("reduce", g.reduce);
    os << "}\n";
    return os.str();
}

}  // namespace fednas
