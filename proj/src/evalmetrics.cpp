#include "phenokit/evalmetrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iostream>
#include <sstream>

#include <json.hpp>

#include "phenokit/linalg.hpp"

namespace phenokit {

bool AnnotationMap::related(const std::string& a, const std::string& b) const {
    const auto ia = entries.find(a);
    const auto ib = entries.find(b);
    if (ia == entries.end() || ib == entries.end()) return false;
    const auto& sa = ia->second;
    const auto& sb = ib->second;
    for (const auto& label : sa)
        if (sb.count(label)) return true;
    return false;
}

AnnotationMap AnnotationMap::read_csv(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw InputError("cannot open: " + path);
    AnnotationMap map;
    std::string line;
    bool first = true;
    while (std::getline(f, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        const auto comma = line.find(',');
        if (comma == std::string::npos) throw InputError("bad annotation row in " + path);
        const std::string treatment = line.substr(0, comma);
        const std::string annotation = line.substr(comma + 1);
        if (first && treatment == "treatment" && annotation == "annotation") {
            first = false;
            continue;  // optional header
        }
        first = false;
        if (treatment.empty() || annotation.empty())
            throw InputError("empty cell in annotation row of " + path);
        map.entries[treatment].insert(annotation);
    }
    if (map.entries.empty()) throw InputError("no annotations in " + path);
    return map;
}

void AnnotationMap::write_csv(const std::string& path) const {
    std::ofstream f(path);
    if (!f) throw InputError("cannot open for write: " + path);
    f << "treatment,annotation\n";
    for (const auto& [treatment, labels] : entries)
        for (const auto& label : labels) f << treatment << "," << label << "\n";
}

std::vector<RankedList> cosine_rank(const ProfileTable& treatment_table,
                                    const AnnotationMap& annotations) {
    if (treatment_table.level != Level::treatment)
        throw InputError("cosine_rank: table must be treatment level");

    struct Entry {
        const ProfileRow* row;
        double norm;
    };
    std::vector<Entry> candidates;
    for (const auto& r : treatment_table.rows) {
        if (r.role == Role::control) continue;
        const double n = norm2(r.vec);
        if (n == 0.0)
            throw InputError("cosine_rank: zero-norm vector for treatment '" + r.treatment + "'");
        candidates.push_back({&r, n});
    }
    if (candidates.size() < 2) throw InputError("cosine_rank: need at least 2 treated treatments");

    std::vector<RankedList> lists;
    for (const auto& q : candidates) {
        bool any_relevant = false;
        RankedList list;
        list.query = q.row->treatment;
        list.items.reserve(candidates.size() - 1);
        for (const auto& o : candidates) {
            if (o.row == q.row) continue;
            RankedItem item;
            item.treatment = o.row->treatment;
            item.similarity = dot(q.row->vec, o.row->vec) / (q.norm * o.norm);
            item.relevant = annotations.related(q.row->treatment, o.row->treatment);
            any_relevant = any_relevant || item.relevant;
            list.items.push_back(std::move(item));
        }
        if (!any_relevant) continue;  // no valid matching query; skipped, not an error
        std::stable_sort(list.items.begin(), list.items.end(),
                         [](const RankedItem& a, const RankedItem& b) {
                             if (a.similarity != b.similarity) return a.similarity > b.similarity;
                             return a.treatment < b.treatment;
                         });
        lists.push_back(std::move(list));
    }
    return lists;
}

double odds_ratio(double a, double b, double c, double d) {
    if (a == 0.0 || b == 0.0 || c == 0.0 || d == 0.0) {
        a += 0.5;
        b += 0.5;
        c += 0.5;
        d += 0.5;
    }
    return (a * d) / (b * c);
}

double odds_ratio_top(const std::vector<bool>& relevance, double top_frac) {
    if (!(top_frac > 0.0 && top_frac <= 1.0)) throw InputError("odds ratio: top_frac out of (0,1]");
    if (relevance.empty()) throw InputError("odds ratio: empty list");
    const std::size_t n = relevance.size();
    const std::size_t k = static_cast<std::size_t>(
        std::ceil(top_frac * static_cast<double>(n)));  // ceil guarantees k >= 1
    double a = 0, b = 0, c = 0, d = 0;
    for (std::size_t i = 0; i < n; ++i) {
        if (i < k)
            (relevance[i] ? a : b) += 1.0;
        else
            (relevance[i] ? c : d) += 1.0;
    }
    return odds_ratio(a, b, c, d);
}

namespace {
std::vector<bool> relevance_of(const RankedList& list) {
    std::vector<bool> rel(list.items.size());
    for (std::size_t i = 0; i < list.items.size(); ++i) rel[i] = list.items[i].relevant;
    return rel;
}
}  // namespace

double foe(const std::vector<RankedList>& lists, double top_frac) {
    if (lists.empty()) throw InputError("foe: no ranked lists");
    double sum = 0;
    for (const auto& list : lists) sum += odds_ratio_top(relevance_of(list), top_frac);
    return sum / static_cast<double>(lists.size());
}

double average_precision(const std::vector<bool>& relevance) {
    std::size_t total_relevant = 0;
    for (bool r : relevance) total_relevant += r ? 1 : 0;
    if (total_relevant == 0) throw InputError("average_precision: no relevant items");

    // precision at each hit, then suffix max = interpolated precision
    std::vector<double> p_at_hit;
    p_at_hit.reserve(total_relevant);
    std::size_t hits = 0;
    for (std::size_t i = 0; i < relevance.size(); ++i) {
        if (relevance[i]) {
            ++hits;
            p_at_hit.push_back(static_cast<double>(hits) / static_cast<double>(i + 1));
        }
    }
    for (std::size_t i = p_at_hit.size(); i-- > 1;)
        p_at_hit[i - 1] = std::max(p_at_hit[i - 1], p_at_hit[i]);

    double sum = 0;
    for (double p : p_at_hit) sum += p;
    return sum / static_cast<double>(total_relevant);
}

double mean_average_precision(const std::vector<RankedList>& lists) {
    if (lists.empty()) throw InputError("map: no ranked lists");
    double sum = 0;
    for (const auto& list : lists) sum += average_precision(relevance_of(list));
    return sum / static_cast<double>(lists.size());
}

double recall_at_k(const std::vector<RankedList>& lists, int k) {
    if (k < 1) throw InputError("recall_at_k: k must be >= 1");
    if (lists.empty()) throw InputError("recall_at_k: no ranked lists");
    std::size_t hits = 0;
    for (const auto& list : lists) {
        const std::size_t upto = std::min<std::size_t>(list.items.size(), static_cast<std::size_t>(k));
        for (std::size_t i = 0; i < upto; ++i)
            if (list.items[i].relevant) {
                ++hits;
                break;
            }
    }
    return static_cast<double>(hits) / static_cast<double>(lists.size());
}

int first_hit_rank(const std::vector<bool>& relevance) {
    for (std::size_t i = 0; i < relevance.size(); ++i)
        if (relevance[i]) return static_cast<int>(i + 1);
    return 0;
}

namespace {

double median_midpoint(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    if (n % 2 == 1) return v[n / 2];
    return 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace

Embedder2D pca2_embedder() {
    return [](const std::vector<std::vector<double>>& rows) {
        const int dim = static_cast<int>(rows.front().size());
        std::vector<std::array<double, 2>> pts(rows.size(), {0.0, 0.0});
        if (dim == 1) {
            for (std::size_t i = 0; i < rows.size(); ++i) pts[i][0] = rows[i][0];
            return pts;
        }
        const auto cov = covariance(rows, dim);
        const auto eig = sym_eig(cov, dim);
        const auto mean = column_mean(rows, dim);
        for (std::size_t i = 0; i < rows.size(); ++i)
            for (int axis = 0; axis < 2; ++axis) {
                double acc = 0;
                for (int j = 0; j < dim; ++j)
                    acc += (rows[i][j] - mean[j]) * eig.vectors[j * dim + axis];
                pts[i][axis] = acc;
            }
        return pts;
    };
}

double imad_from_coords(const std::vector<std::array<double, 2>>& pts) {
    if (pts.size() < 3) throw InputError("imad: need at least 3 wells");
    std::vector<double> dists;
    dists.reserve(pts.size() * (pts.size() - 1) / 2);
    for (std::size_t i = 0; i < pts.size(); ++i)
        for (std::size_t j = i + 1; j < pts.size(); ++j) {
            const double dx = pts[i][0] - pts[j][0];
            const double dy = pts[i][1] - pts[j][1];
            dists.push_back(std::sqrt(dx * dx + dy * dy));
        }
    const double med = median_midpoint(dists);
    std::vector<double> dev(dists.size());
    for (std::size_t i = 0; i < dists.size(); ++i) dev[i] = std::abs(dists[i] - med);
    const double mad = median_midpoint(dev);
    if (mad < 1e-9) {
        std::cerr << "warning: imad clamped, pairwise distance MAD below 1e-9\n";
        return 1e9;
    }
    return 1.0 / mad;
}

double imad(const ProfileTable& well_table, const Embedder2D& embedder) {
    if (well_table.rows.size() < 3) throw InputError("imad: need at least 3 wells");
    std::vector<std::vector<double>> rows;
    rows.reserve(well_table.rows.size());
    for (const auto& r : well_table.rows) rows.push_back(r.vec);

    // project onto the smallest principal subspace keeping >= 95% variance
    const int dim = well_table.dim;
    std::vector<std::vector<double>> reduced;
    if (dim == 1) {
        reduced = rows;
    } else {
        const auto cov = covariance(rows, dim);
        const auto eig = sym_eig(cov, dim);
        double total = 0;
        for (double v : eig.values) total += std::max(v, 0.0);
        int r = 1;
        if (total > 0) {
            double cum = 0;
            for (r = 0; r < dim;) {
                cum += std::max(eig.values[r], 0.0);
                ++r;
                if (cum >= 0.95 * total) break;
            }
        }
        const auto mean = column_mean(rows, dim);
        reduced.assign(rows.size(), std::vector<double>(static_cast<std::size_t>(r), 0.0));
        for (std::size_t i = 0; i < rows.size(); ++i)
            for (int k = 0; k < r; ++k) {
                double acc = 0;
                for (int j = 0; j < dim; ++j)
                    acc += (rows[i][j] - mean[j]) * eig.vectors[j * dim + k];
                reduced[i][k] = acc;
            }
    }
    return imad_from_coords(embedder(reduced));
}

std::string EvalReport::to_json() const {
    nlohmann::json j;
    j["foe"] = foe;
    j["map"] = map;
    for (const auto& [k, v] : recall_at) j["recall@" + std::to_string(k)] = v;
    if (imad.has_value())
        j["imad"] = *imad;
    else
        j["imad"] = nullptr;
    auto& pq = j["per_query"] = nlohmann::json::array();
    for (const auto& q : per_query)
        pq.push_back({{"query", q.query},
                      {"ap", q.ap},
                      {"odds_ratio", q.odds},
                      {"first_hit_rank", q.first_hit}});
    return j.dump(2);
}

EvalReport EvalReport::from_json(const std::string& text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const std::exception& e) {
        throw InputError(std::string("bad report JSON: ") + e.what());
    }
    EvalReport r;
    r.foe = j.at("foe").get<double>();
    r.map = j.at("map").get<double>();
    for (const auto& [key, value] : j.items())
        if (key.rfind("recall@", 0) == 0)
            r.recall_at[std::stoi(key.substr(7))] = value.get<double>();
    if (j.contains("imad") && !j["imad"].is_null()) r.imad = j["imad"].get<double>();
    if (j.contains("per_query"))
        for (const auto& q : j["per_query"]) {
            PerQuery pq;
            pq.query = q.at("query").get<std::string>();
            pq.ap = q.at("ap").get<double>();
            pq.odds = q.at("odds_ratio").get<double>();
            pq.first_hit = q.at("first_hit_rank").get<int>();
            r.per_query.push_back(std::move(pq));
        }
    return r;
}

void EvalReport::write(const std::string& path) const {
    std::ofstream f(path);
    if (!f) throw InputError("cannot open for write: " + path);
    f << to_json() << "\n";
}

EvalReport EvalReport::read(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw InputError("cannot open: " + path);
    std::stringstream buf;
    buf << f.rdbuf();
    return from_json(buf.str());
}

EvalReport evaluate_profiles(const ProfileTable& treatment_table, const AnnotationMap& annotations,
                             double top_frac, const std::vector<int>& recall_ks) {
    const auto lists = cosine_rank(treatment_table, annotations);
    if (lists.empty()) throw InputError("evaluate: no query has a relevant partner");
    EvalReport report;
    report.foe = foe(lists, top_frac);
    report.map = mean_average_precision(lists);
    for (int k : recall_ks) report.recall_at[k] = recall_at_k(lists, k);
    for (const auto& list : lists) {
        const auto rel = relevance_of(list);
        PerQuery q;
        q.query = list.query;
        q.ap = average_precision(rel);
        q.odds = odds_ratio_top(rel, top_frac);
        q.first_hit = first_hit_rank(rel);
        report.per_query.push_back(std::move(q));
    }
    return report;
}

}  // namespace phenokit
