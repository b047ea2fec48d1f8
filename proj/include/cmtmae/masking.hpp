#pragma once

// Attention-guided mask selection. An AttentionMap is a per-patch score
// distribution (non-negative, sums to 1); a MaskSet is the chosen subset of
// patch indices, always stored sorted ascending and distinct so downstream
// gather order is deterministic.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include "cmtmae/errors.hpp"
#include "cmtmae/rng.hpp"

namespace cmtmae {

enum class MaskPolarity { most_attended, least_attended };
enum class SelectionMode { topk, stochastic, random };

struct AttentionMap {
    std::vector<double> scores;

    int size() const { return static_cast<int>(scores.size()); }

    void validate() const {
        if (scores.empty()) throw ContractError("AttentionMap: empty");
        double s = 0.0;
        for (double v : scores) {
            if (!(v >= 0.0)) throw ContractError("AttentionMap: negative or NaN score");
            s += v;
        }
        if (std::fabs(s - 1.0) > 1e-6)
            throw ContractError("AttentionMap: scores sum to " + std::to_string(s) + ", expected 1");
    }
};

struct MaskSet {
    int total = 0;                // number of patches the mask was drawn from
    std::vector<int> indices;     // masked patch indices, sorted ascending

    int count() const { return static_cast<int>(indices.size()); }

    std::vector<int> complement() const {
        std::vector<int> out;
        out.reserve(total - count());
        size_t k = 0;
        for (int i = 0; i < total; ++i) {
            if (k < indices.size() && indices[k] == i) {
                ++k;
            } else {
                out.push_back(i);
            }
        }
        return out;
    }

    bool contains(int i) const {
        return std::binary_search(indices.begin(), indices.end(), i);
    }
};

// Linear aggregation of student and teacher maps: alpha*student + (1-alpha)*teacher.
// alpha=0 reproduces the teacher map bit-exactly, alpha=1 the student map.
inline AttentionMap aggregate_attention(const AttentionMap& student, const AttentionMap& teacher,
                                        double alpha) {
    if (student.size() != teacher.size())
        throw DimensionError("aggregate_attention: " + std::to_string(student.size()) + " vs " +
                             std::to_string(teacher.size()) + " scores");
    if (!(alpha >= 0.0 && alpha <= 1.0))
        throw ConfigError("aggregate_attention: alpha " + std::to_string(alpha) + " outside [0,1]");
    AttentionMap out;
    out.scores.resize(student.scores.size());
    const double beta = 1.0 - alpha;
    for (size_t i = 0; i < out.scores.size(); ++i)
        out.scores[i] = alpha * student.scores[i] + beta * teacher.scores[i];
    return out;
}

// ceil(ratio * total), with a small epsilon so values that are integral in
// exact arithmetic do not round up from FP dust (e.g. 0.1 * 80).
inline int mask_count(double mask_ratio, int total) {
    if (!(mask_ratio > 0.0 && mask_ratio < 1.0))
        throw ConfigError("mask_ratio " + std::to_string(mask_ratio) + " outside (0,1)");
    if (total <= 1) throw ContractError("mask_count: need at least 2 patches");
    const int k = static_cast<int>(std::ceil(mask_ratio * total - 1e-9));
    if (k < 1 || k >= total)
        throw ConfigError("mask_ratio " + std::to_string(mask_ratio) + " selects " +
                          std::to_string(k) + " of " + std::to_string(total) + " patches");
    return k;
}

// Deterministic top-k by score. Ties break toward the lower index. Polarity
// least_attended selects the k lowest-scored patches instead.
inline MaskSet select_mask_topk(const AttentionMap& map, double mask_ratio,
                                MaskPolarity polarity = MaskPolarity::most_attended) {
    map.validate();
    const int n = map.size();
    const int k = mask_count(mask_ratio, n);
    std::vector<int> order(n);
    std::iota(order.begin(), order.end(), 0);
    auto higher = [&](int a, int b) {
        if (map.scores[a] != map.scores[b]) return map.scores[a] > map.scores[b];
        return a < b;
    };
    auto lower = [&](int a, int b) {
        if (map.scores[a] != map.scores[b]) return map.scores[a] < map.scores[b];
        return a < b;
    };
    if (polarity == MaskPolarity::most_attended) {
        std::partial_sort(order.begin(), order.begin() + k, order.end(), higher);
    } else {
        std::partial_sort(order.begin(), order.begin() + k, order.end(), lower);
    }
    MaskSet m;
    m.total = n;
    m.indices.assign(order.begin(), order.begin() + k);
    std::sort(m.indices.begin(), m.indices.end());
    return m;
}

// k distinct indices, uniform without replacement (partial Fisher-Yates).
inline MaskSet select_mask_random(int total, double mask_ratio, Rng& rng) {
    const int k = mask_count(mask_ratio, total);
    std::vector<int> order(total);
    std::iota(order.begin(), order.end(), 0);
    for (int i = 0; i < k; ++i) {
        const int j = i + static_cast<int>(rng.next_below(static_cast<uint64_t>(total - i)));
        std::swap(order[i], order[j]);
    }
    MaskSet m;
    m.total = total;
    m.indices.assign(order.begin(), order.begin() + k);
    std::sort(m.indices.begin(), m.indices.end());
    return m;
}

// Weighted sampling without replacement, probability proportional to score
// (Efraimidis-Spirakis via exponential keys). Zero-weight patches are only
// drawn after all positive-weight ones, lowest index first.
inline MaskSet select_mask_stochastic(const AttentionMap& map, double mask_ratio, Rng& rng,
                                      MaskPolarity polarity = MaskPolarity::most_attended) {
    if (polarity != MaskPolarity::most_attended)
        throw ConfigError("selection_mode=stochastic supports mask_polarity=most only");
    map.validate();
    const int n = map.size();
    const int k = mask_count(mask_ratio, n);
    std::vector<std::pair<double, int>> keyed(n);
    for (int i = 0; i < n; ++i) {
        double u = rng.next_double();
        while (u <= 0.0) u = rng.next_double();
        const double w = map.scores[i];
        const double key = w > 0.0 ? -std::log(u) / w : std::numeric_limits<double>::infinity();
        keyed[i] = {key, i};
    }
    std::sort(keyed.begin(), keyed.end());
    MaskSet m;
    m.total = n;
    m.indices.reserve(k);
    for (int i = 0; i < k; ++i) m.indices.push_back(keyed[i].second);
    std::sort(m.indices.begin(), m.indices.end());
    return m;
}

inline MaskPolarity parse_mask_polarity(const std::string& s) {
    if (s == "most") return MaskPolarity::most_attended;
    if (s == "least") return MaskPolarity::least_attended;
    throw ConfigError("mask_polarity must be 'most' or 'least', got '" + s + "'");
}

inline SelectionMode parse_selection_mode(const std::string& s) {
    if (s == "topk") return SelectionMode::topk;
    if (s == "stochastic") return SelectionMode::stochastic;
    if (s == "random") return SelectionMode::random;
    throw ConfigError("selection_mode must be 'topk', 'stochastic' or 'random', got '" + s + "'");
}

inline std::string to_string(MaskPolarity p) {
    return p == MaskPolarity::most_attended ? "most" : "least";
}

inline std::string to_string(SelectionMode m) {
    switch (m) {
        case SelectionMode::topk: return "topk";
        case SelectionMode::stochastic: return "stochastic";
        default: return "random";
    }
}

}  // namespace cmtmae
