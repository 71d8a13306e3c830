#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <vector>

#include "qih/heads.hpp"

namespace qih {

struct ScoredExample {
    double score = 0;  // positive-class score in [0, 1]
    int label = 0;     // 0 or 1
};

struct MetricsReport {
    std::optional<double> precision;  // absent when nothing is predicted positive
    std::optional<double> recall;     // absent when there are no positives
    double accuracy = 0;
    double threshold = 0.5;
    std::size_t tp = 0, fp = 0, tn = 0, fn = 0;
};

inline void check_scored(std::span<const ScoredExample> scored) {
    for (const auto& s : scored) {
        if (!std::isfinite(s.score) || s.score < 0 || s.score > 1)
            throw std::invalid_argument("scored example: score must be finite and in [0, 1]");
        if (s.label != 0 && s.label != 1) throw std::invalid_argument("scored example: label must be 0 or 1");
    }
}

// Positive iff score >= threshold.
inline MetricsReport confusion_metrics(std::span<const ScoredExample> scored, double threshold) {
    if (scored.empty()) throw std::invalid_argument("confusion_metrics: empty input");
    check_scored(scored);
    MetricsReport r;
    r.threshold = threshold;
    for (const auto& s : scored) {
        const bool pred = s.score >= threshold;
        if (pred && s.label) ++r.tp;
        else if (pred) ++r.fp;
        else if (s.label) ++r.fn;
        else ++r.tn;
    }
    if (r.tp + r.fp > 0) r.precision = static_cast<double>(r.tp) / static_cast<double>(r.tp + r.fp);
    if (r.tp + r.fn > 0) r.recall = static_cast<double>(r.tp) / static_cast<double>(r.tp + r.fn);
    r.accuracy = static_cast<double>(r.tp + r.tn) / static_cast<double>(scored.size());
    return r;
}

struct RocPoint {
    double fpr = 0;
    double tpr = 0;
    double threshold = 0;  // +inf for the (0, 0) origin
};

struct RocCurve {
    std::vector<RocPoint> points;
    double auc = 0;
};

inline void require_both_classes(std::span<const ScoredExample> scored, const char* op) {
    bool pos = false, neg = false;
    for (const auto& s : scored) (s.label ? pos : neg) = true;
    if (!pos || !neg) throw std::invalid_argument(std::string(op) + ": both classes must be present");
}

// One point per distinct score (descending), from (0,0) to (1,1); AUC by the trapezoid rule.
inline RocCurve roc_curve(std::span<const ScoredExample> scored) {
    check_scored(scored);
    require_both_classes(scored, "roc_curve");
    std::vector<ScoredExample> sorted(scored.begin(), scored.end());
    std::sort(sorted.begin(), sorted.end(), [](const auto& a, const auto& b) { return a.score > b.score; });
    double pos = 0, neg = 0;
    for (const auto& s : sorted) (s.label ? pos : neg) += 1;
    RocCurve c;
    c.points.push_back({0, 0, std::numeric_limits<double>::infinity()});
    double tp = 0, fp = 0;
    for (std::size_t i = 0; i < sorted.size();) {
        const double s = sorted[i].score;
        for (; i < sorted.size() && sorted[i].score == s; ++i) (sorted[i].label ? tp : fp) += 1;
        const RocPoint p{fp / neg, tp / pos, s};
        const auto& prev = c.points.back();
        c.auc += (p.fpr - prev.fpr) * (p.tpr + prev.tpr) / 2;
        c.points.push_back(p);
    }
    return c;
}

struct ThresholdResult {
    bool attainable = false;
    double threshold = 0;
    MetricsReport metrics;
};

// Smallest observed score whose threshold gives precision >= target.
inline ThresholdResult tune_threshold(std::span<const ScoredExample> scored, double target_precision) {
    check_scored(scored);
    require_both_classes(scored, "tune_threshold");
    std::vector<ScoredExample> sorted(scored.begin(), scored.end());
    std::sort(sorted.begin(), sorted.end(), [](const auto& a, const auto& b) { return a.score < b.score; });
    std::size_t tp = 0, fp = 0;
    for (const auto& s : sorted) (s.label ? tp : fp) += 1;
    // Ascending sweep: at index i the predicted-positive set is sorted[i..].
    for (std::size_t i = 0; i < sorted.size();) {
        const double t = sorted[i].score;
        if (tp + fp > 0 && static_cast<double>(tp) / static_cast<double>(tp + fp) >= target_precision)
            return {true, t, confusion_metrics(scored, t)};
        for (; i < sorted.size() && sorted[i].score == t; ++i) (sorted[i].label ? tp : fp) -= 1;
    }
    return {false, 0, {}};
}

struct HierarchyReport {
    std::size_t edges = 0;
    std::size_t violations = 0;
    double rate = 0;  // 0 when no edge has both endpoints scored
};

// Fraction of (parent, child) edges, both scored, with score(parent) < score(child).
inline HierarchyReport hierarchy_violation_rate(const std::map<int, double>& scores, const Taxonomy& taxonomy) {
    HierarchyReport r;
    for (const auto& n : taxonomy.nodes()) {
        if (n.parent < 0) continue;
        auto child = scores.find(n.id);
        auto parent = scores.find(n.parent);
        if (child == scores.end() || parent == scores.end()) continue;
        ++r.edges;
        if (parent->second < child->second) ++r.violations;
    }
    if (r.edges) r.rate = static_cast<double>(r.violations) / static_cast<double>(r.edges);
    return r;
}

// Mean over many score vectors (one per query) of the per-query violation rate, pooled over edges.
inline HierarchyReport hierarchy_violation_rate(std::span<const std::vector<float>> head_scores,
                                                const Taxonomy& taxonomy) {
    HierarchyReport total;
    for (const auto& s : head_scores) {
        std::map<int, double> m;
        for (std::size_t i = 0; i < s.size(); ++i) m[taxonomy.scored_nodes().at(i)] = s[i];
        auto r = hierarchy_violation_rate(m, taxonomy);
        total.edges += r.edges;
        total.violations += r.violations;
    }
    if (total.edges) total.rate = static_cast<double>(total.violations) / static_cast<double>(total.edges);
    return total;
}

struct SimilarityReport {
    double intra = 0;
    double inter = 0;
    double gap = 0;  // intra - inter
    std::size_t excluded = 0;
};

inline double cosine(std::span<const float> a, std::span<const float> b) {
    double dot = 0, na = 0, nb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        dot += static_cast<double>(a[i]) * b[i];
        na += static_cast<double>(a[i]) * a[i];
        nb += static_cast<double>(b[i]) * b[i];
    }
    return dot / std::sqrt(na * nb);
}

// Mean pairwise cosine within labels vs across labels. Zero vectors are dropped and counted.
inline SimilarityReport embedding_similarity_report(std::span<const int> labels,
                                                    std::span<const std::vector<float>> embeddings) {
    if (labels.size() != embeddings.size())
        throw std::invalid_argument("embedding_similarity_report: labels and embeddings differ in length");
    SimilarityReport r;
    std::vector<std::size_t> kept;
    std::map<int, std::size_t> per_class;
    for (std::size_t i = 0; i < embeddings.size(); ++i) {
        const bool zero = std::all_of(embeddings[i].begin(), embeddings[i].end(), [](float v) { return v == 0.f; });
        if (zero) {
            ++r.excluded;
            continue;
        }
        kept.push_back(i);
        ++per_class[labels[i]];
    }
    if (per_class.size() < 2) throw std::invalid_argument("embedding_similarity_report: need at least 2 classes");
    for (const auto& [label, n] : per_class)
        if (n < 2) throw std::invalid_argument("embedding_similarity_report: each class needs 2 queries");
    double intra = 0, inter = 0;
    std::size_t n_intra = 0, n_inter = 0;
    for (std::size_t a = 0; a < kept.size(); ++a)
        for (std::size_t b = a + 1; b < kept.size(); ++b) {
            const double c = cosine(embeddings[kept[a]], embeddings[kept[b]]);
            if (labels[kept[a]] == labels[kept[b]]) intra += c, ++n_intra;
            else inter += c, ++n_inter;
        }
    r.intra = intra / static_cast<double>(n_intra);
    r.inter = inter / static_cast<double>(n_inter);
    r.gap = r.intra - r.inter;
    return r;
}

} // namespace qih
