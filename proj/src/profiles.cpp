#include "phenokit/profiles.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include <json.hpp>

#include "phenokit/linalg.hpp"
#include "phenokit/tensor.hpp"

namespace phenokit {

std::string to_string(Level level) {
    switch (level) {
        case Level::site: return "site";
        case Level::well: return "well";
        case Level::treatment: return "treatment";
    }
    return "?";
}

std::string to_string(Role role) { return role == Role::control ? "control" : "treated"; }

Level level_from_string(const std::string& s) {
    if (s == "site") return Level::site;
    if (s == "well") return Level::well;
    if (s == "treatment") return Level::treatment;
    throw InputError("unknown profile level: '" + s + "'");
}

Role role_from_string(const std::string& s) {
    if (s == "control") return Role::control;
    if (s == "treated") return Role::treated;
    throw InputError("unknown role: '" + s + "'");
}

void ProfileTable::validate() const {
    std::set<std::string> keys;
    for (const auto& r : rows) {
        if (static_cast<int>(r.vec.size()) != dim)
            throw InvariantError("profile row '" + r.treatment + "' has dim " +
                                 std::to_string(r.vec.size()) + ", table dim " +
                                 std::to_string(dim));
        for (double v : r.vec)
            if (!std::isfinite(v))
                throw InvariantError("non-finite feature in profile row '" + r.treatment + "'");
        std::string key;
        switch (level) {
            case Level::site: key = r.plate + "\x1f" + r.well + "\x1f" + r.site; break;
            case Level::well: key = r.plate + "\x1f" + r.well; break;
            case Level::treatment: key = r.treatment; break;
        }
        if (!keys.insert(key).second)
            throw InvariantError("duplicate profile key at " + to_string(level) + " level: " + key);
    }
}

ProfileTable aggregate(const ProfileTable& table, Level to_level) {
    if (!((table.level == Level::site && to_level == Level::well) ||
          (table.level == Level::well && to_level == Level::treatment)))
        throw InputError("aggregate: only site->well and well->treatment are defined");

    // group key -> ordered accumulation; map keeps output order deterministic
    std::map<std::string, ProfileRow> groups;
    std::map<std::string, std::int64_t> counts;
    for (const auto& r : table.rows) {
        std::string key;
        if (to_level == Level::well)
            key = r.plate + "\x1f" + r.well;
        else
            key = r.treatment;
        auto it = groups.find(key);
        if (it == groups.end()) {
            ProfileRow out;
            out.treatment = r.treatment;
            out.role = r.role;
            if (to_level == Level::well) {
                out.plate = r.plate;
                out.well = r.well;
            }
            out.vec = r.vec;
            groups.emplace(key, std::move(out));
            counts[key] = 1;
        } else {
            ProfileRow& acc = it->second;
            if (to_level == Level::well && (acc.treatment != r.treatment || acc.role != r.role))
                throw InvariantError("aggregate: mixed treatment/role within well " + r.plate +
                                     "/" + r.well);
            if (to_level == Level::treatment && acc.role != r.role)
                throw InvariantError("aggregate: mixed roles within treatment " + r.treatment);
            for (int i = 0; i < table.dim; ++i) acc.vec[i] += r.vec[i];
            ++counts[key];
        }
    }

    ProfileTable out;
    out.level = to_level;
    out.dim = table.dim;
    out.rows.reserve(groups.size());
    for (auto& [key, row] : groups) {
        const double inv = 1.0 / static_cast<double>(counts[key]);
        for (auto& v : row.vec) v *= inv;
        out.rows.push_back(std::move(row));
    }
    out.validate();
    return out;
}

std::vector<double> pcs_control_mean(const ProfileTable& table, const std::string& plate_id) {
    if (table.level == Level::treatment)
        throw InputError("pcs_control_mean: table must be site or well level");
    std::vector<double> mean(static_cast<std::size_t>(table.dim), 0.0);
    std::int64_t n = 0;
    for (const auto& r : table.rows) {
        if (r.plate != plate_id || r.role != Role::control) continue;
        for (int i = 0; i < table.dim; ++i) mean[i] += r.vec[i];
        ++n;
    }
    if (n == 0) throw InputError("plate '" + plate_id + "' has no control rows");
    for (auto& v : mean) v /= static_cast<double>(n);
    return mean;
}

ProfileTable pcs_apply(const ProfileTable& table, double alpha) {
    if (!(alpha >= 0.0 && alpha <= 1.0)) throw InputError("pcs_apply: alpha out of [0,1]");
    if (table.level == Level::treatment)
        throw InputError("pcs_apply: table must be site or well level");
    if (alpha == 0.0) return table;

    std::map<std::string, std::vector<double>> plate_means;
    for (const auto& r : table.rows)
        if (!plate_means.count(r.plate)) plate_means[r.plate] = pcs_control_mean(table, r.plate);

    ProfileTable out = table;
    for (auto& r : out.rows) {
        const auto& w = plate_means[r.plate];
        for (int i = 0; i < table.dim; ++i) r.vec[i] -= alpha * w[i];
    }
    return out;
}

Whitening sphering_fit(const std::vector<std::vector<double>>& reference_rows, double epsilon) {
    if (reference_rows.size() < 2)
        throw InputError("sphering_fit: need at least 2 reference rows");
    const int dim = static_cast<int>(reference_rows.front().size());
    for (const auto& r : reference_rows)
        if (static_cast<int>(r.size()) != dim)
            throw InputError("sphering_fit: inconsistent row widths");

    const auto cov = covariance(reference_rows, dim);
    for (double v : cov)
        if (!std::isfinite(v)) throw InvariantError("sphering_fit: non-finite covariance");

    if (epsilon < 0.0) {
        double trace = 0;
        for (int i = 0; i < dim; ++i) trace += cov[i * dim + i];
        epsilon = 1e-3 * trace / dim;
    }

    const SymEig eig = sym_eig(cov, dim);
    Whitening w;
    w.dim = dim;
    w.epsilon = epsilon;
    w.mean = column_mean(reference_rows, dim);
    w.matrix.assign(static_cast<std::size_t>(dim) * dim, 0.0);
    std::vector<double> scaled(static_cast<std::size_t>(dim));
    for (int k = 0; k < dim; ++k) {
        const double lambda = std::max(eig.values[k], 0.0) + epsilon;
        if (lambda <= 1e-300)
            throw InputError("sphering_fit: singular covariance; increase epsilon");
        scaled[k] = 1.0 / std::sqrt(lambda);
    }
    // U diag(scaled) U^T, symmetrized by construction
    for (int i = 0; i < dim; ++i)
        for (int j = i; j < dim; ++j) {
            double acc = 0;
            for (int k = 0; k < dim; ++k)
                acc += eig.vectors[i * dim + k] * scaled[k] * eig.vectors[j * dim + k];
            w.matrix[i * dim + j] = acc;
            w.matrix[j * dim + i] = acc;
        }
    return w;
}

std::vector<double> whiten_vector(const Whitening& w, const std::vector<double>& v) {
    if (static_cast<int>(v.size()) != w.dim) throw InputError("whiten: dim mismatch");
    std::vector<double> centered(v);
    for (int i = 0; i < w.dim; ++i) centered[i] -= w.mean[i];
    return mat_vec(w.matrix, centered, w.dim);
}

ProfileTable sphering_apply(const ProfileTable& table, const Whitening& w) {
    if (table.dim != w.dim)
        throw InputError("sphering_apply: table dim " + std::to_string(table.dim) +
                         " != whitening dim " + std::to_string(w.dim));
    ProfileTable out = table;
    for (auto& r : out.rows) r.vec = whiten_vector(w, r.vec);
    return out;
}

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> cells;
    std::string cur;
    for (char c : line) {
        if (c == ',') {
            cells.push_back(cur);
            cur.clear();
        } else if (c != '\r') {
            cur.push_back(c);
        }
    }
    cells.push_back(cur);
    return cells;
}

std::string fmt9(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.9g", v);
    return buf;
}

}  // namespace

void write_profile_csv(const std::string& path, const ProfileTable& table) {
    table.validate();
    std::ofstream f(path);
    if (!f) throw InputError("cannot open for write: " + path);
    f << to_string(table.level) << "," << table.dim << "\n";
    for (const auto& r : table.rows) {
        f << r.plate << "," << r.well << "," << r.site << "," << r.treatment << ","
          << to_string(r.role);
        for (double v : r.vec) f << "," << fmt9(v);
        f << "\n";
    }
    if (!f) throw InputError("write failed: " + path);
}

ProfileTable read_profile_csv(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw InputError("cannot open: " + path);
    std::string line;
    if (!std::getline(f, line)) throw InputError("empty profile file: " + path);
    const auto header = split_csv_line(line);
    if (header.size() != 2) throw InputError("bad profile header in " + path);
    ProfileTable table;
    table.level = level_from_string(header[0]);
    table.dim = std::stoi(header[1]);
    if (table.dim < 1) throw InputError("bad profile dim in " + path);

    while (std::getline(f, line)) {
        if (line.empty()) continue;
        const auto cells = split_csv_line(line);
        if (static_cast<int>(cells.size()) != 5 + table.dim)
            throw InputError("bad profile row width in " + path + ": got " +
                             std::to_string(cells.size()) + " cells, want " +
                             std::to_string(5 + table.dim));
        ProfileRow r;
        r.plate = cells[0];
        r.well = cells[1];
        r.site = cells[2];
        r.treatment = cells[3];
        r.role = role_from_string(cells[4]);
        r.vec.resize(static_cast<std::size_t>(table.dim));
        for (int i = 0; i < table.dim; ++i) {
            try {
                r.vec[i] = std::stod(cells[5 + i]);
            } catch (const std::exception&) {
                throw InputError("bad scalar '" + cells[5 + i] + "' in " + path);
            }
        }
        table.rows.push_back(std::move(r));
    }
    try {
        table.validate();
    } catch (const InvariantError& e) {
        throw InputError("bad profile file " + path + ": " + e.what());
    }
    return table;
}

void write_profile_binary(const std::string& path, const ProfileTable& table) {
    table.validate();
    if (table.rows.empty()) throw InputError("refusing to write empty profile table");
    Tensor<double> payload({static_cast<std::int64_t>(table.rows.size()), table.dim});
    nlohmann::json meta;
    meta["level"] = to_string(table.level);
    meta["dim"] = table.dim;
    auto& rows = meta["rows"] = nlohmann::json::array();
    for (std::size_t i = 0; i < table.rows.size(); ++i) {
        const auto& r = table.rows[i];
        for (int j = 0; j < table.dim; ++j)
            payload[static_cast<std::int64_t>(i) * table.dim + j] = r.vec[j];
        rows.push_back({{"plate", r.plate},
                        {"well", r.well},
                        {"site", r.site},
                        {"treatment", r.treatment},
                        {"role", to_string(r.role)}});
    }
    save_tensor(path, payload);
    std::ofstream side(path + ".json");
    if (!side) throw InputError("cannot open for write: " + path + ".json");
    side << meta.dump(2) << "\n";
}

ProfileTable read_profile_binary(const std::string& path) {
    const Tensor<double> payload = load_tensor<double>(path);
    std::ifstream side(path + ".json");
    if (!side) throw InputError("missing profile sidecar: " + path + ".json");
    nlohmann::json meta;
    try {
        side >> meta;
    } catch (const std::exception& e) {
        throw InputError("bad profile sidecar " + path + ".json: " + e.what());
    }
    ProfileTable table;
    table.level = level_from_string(meta.at("level").get<std::string>());
    table.dim = meta.at("dim").get<int>();
    const auto& rows = meta.at("rows");
    if (payload.rank() != 2 || payload.dim(0) != static_cast<std::int64_t>(rows.size()) ||
        payload.dim(1) != table.dim)
        throw InputError("profile payload/sidecar mismatch: " + path);
    for (std::size_t i = 0; i < rows.size(); ++i) {
        ProfileRow r;
        r.plate = rows[i].at("plate").get<std::string>();
        r.well = rows[i].at("well").get<std::string>();
        r.site = rows[i].at("site").get<std::string>();
        r.treatment = rows[i].at("treatment").get<std::string>();
        r.role = role_from_string(rows[i].at("role").get<std::string>());
        r.vec.resize(static_cast<std::size_t>(table.dim));
        for (int j = 0; j < table.dim; ++j)
            r.vec[j] = payload[static_cast<std::int64_t>(i) * table.dim + j];
        table.rows.push_back(std::move(r));
    }
    try {
        table.validate();
    } catch (const InvariantError& e) {
        throw InputError("bad profile file " + path + ": " + e.what());
    }
    return table;
}

namespace {
bool has_suffix(const std::string& s, const std::string& suf) {
    return s.size() >= suf.size() && s.compare(s.size() - suf.size(), suf.size(), suf) == 0;
}
}  // namespace

void write_profile(const std::string& path, const ProfileTable& table) {
    if (has_suffix(path, ".ptns"))
        write_profile_binary(path, table);
    else
        write_profile_csv(path, table);
}

ProfileTable read_profile(const std::string& path) {
    if (has_suffix(path, ".ptns")) return read_profile_binary(path);
    return read_profile_csv(path);
}

}  // namespace phenokit
