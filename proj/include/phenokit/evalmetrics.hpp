#pragma once

#include <array>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "phenokit/profiles.hpp"

namespace phenokit {

// treatment -> nonempty set of annotation labels (MoA / pathway).
struct AnnotationMap {
    std::map<std::string, std::set<std::string>> entries;

    bool related(const std::string& a, const std::string& b) const;
    static AnnotationMap read_csv(const std::string& path);
    void write_csv(const std::string& path) const;
};

struct RankedItem {
    std::string treatment;
    double similarity = 0.0;
    bool relevant = false;
};

// Descending cosine similarity, ties broken by ascending treatment name;
// the query itself is excluded.
struct RankedList {
    std::string query;
    std::vector<RankedItem> items;
};

// Ranks every annotated treated treatment with at least one relevant partner
// against all other treated treatments. Controls never participate.
std::vector<RankedList> cosine_rank(const ProfileTable& treatment_table,
                                    const AnnotationMap& annotations);

// Sample odds ratio (a*d)/(b*c) of one ranked list at k = ceil(top_frac*n),
// Haldane-Anscombe +0.5 on every cell when any cell is zero.
double odds_ratio_top(const std::vector<bool>& relevance, double top_frac);
double odds_ratio(double a, double b, double c, double d);

// Mean odds ratio over queries at the top-1% threshold by default.
double foe(const std::vector<RankedList>& lists, double top_frac = 0.01);

// Interpolated average precision: P_inter(r) = max_{r' >= r} P(r'), averaged
// over the recall points 1/R .. R/R. Needs at least one relevant item.
double average_precision(const std::vector<bool>& relevance);
double mean_average_precision(const std::vector<RankedList>& lists);

double recall_at_k(const std::vector<RankedList>& lists, int k);

// 1-indexed rank of the first relevant item, 0 when none.
int first_hit_rank(const std::vector<bool>& relevance);

// rows -> 2-D coordinates. Input is already reduced to the rank that keeps
// >= 95% of the variance.
using Embedder2D =
    std::function<std::vector<std::array<double, 2>>(const std::vector<std::vector<double>>&)>;

// Default embedder: the first two principal axes of the reduced data.
Embedder2D pca2_embedder();

// IMAD of a 2-D point set: 1 / max(MAD of pairwise distances, 1e-9).
double imad_from_coords(const std::vector<std::array<double, 2>>& pts);

// PCA-reduce to >= 95% variance, embed to 2-D, then IMAD.
double imad(const ProfileTable& well_table, const Embedder2D& embedder = pca2_embedder());

struct PerQuery {
    std::string query;
    double ap = 0.0;
    double odds = 0.0;
    int first_hit = 0;
};

struct EvalReport {
    double foe = 0.0;
    double map = 0.0;
    std::map<int, double> recall_at;  // K -> value
    std::optional<double> imad;
    std::vector<PerQuery> per_query;

    std::string to_json() const;
    static EvalReport from_json(const std::string& text);
    void write(const std::string& path) const;
    static EvalReport read(const std::string& path);
};

// The full matching evaluation at the default thresholds.
EvalReport evaluate_profiles(const ProfileTable& treatment_table, const AnnotationMap& annotations,
                             double top_frac = 0.01,
                             const std::vector<int>& recall_ks = {1, 3, 5, 10});

}  // namespace phenokit
