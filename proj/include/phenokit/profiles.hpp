#pragma once

#include <string>
#include <vector>

#include "phenokit/common.hpp"

namespace phenokit {

enum class Level { site, well, treatment };
enum class Role { control, treated };

std::string to_string(Level level);
std::string to_string(Role role);
Level level_from_string(const std::string& s);
Role role_from_string(const std::string& s);

struct ProfileRow {
    std::string plate;      // empty at treatment level
    std::string well;       // empty at treatment level
    std::string site;       // site level only
    std::string treatment;
    Role role = Role::treated;
    std::vector<double> vec;
};

// Tagged feature rows at one aggregation level. Keys must be unique for the
// level ((plate,well,site) / (plate,well) / treatment) and every vector
// finite with the shared width.
struct ProfileTable {
    Level level = Level::site;
    int dim = 0;
    std::vector<ProfileRow> rows;

    void validate() const;
};

// Mean aggregation one level up: site -> well or well -> treatment.
// Treatment-level control rows keep their own treatment label and role.
ProfileTable aggregate(const ProfileTable& table, Level to_level);

// Mean of control-row vectors on one plate (over wells and sites when the
// table is site level).
std::vector<double> pcs_control_mean(const ProfileTable& table, const std::string& plate_id);

// Subtracts alpha times the plate's control mean from every row of that
// plate, controls included. alpha = 0 returns the table unchanged.
ProfileTable pcs_apply(const ProfileTable& table, double alpha);

struct Whitening {
    std::vector<double> mean;
    std::vector<double> matrix;  // dim x dim row-major, symmetric (ZCA)
    double epsilon = 0.0;
    int dim = 0;
};

// ZCA whitening fit on reference rows: U (L + eps I)^(-1/2) U^T from the
// eigendecomposition of the sample covariance. epsilon < 0 selects the
// default 1e-3 x mean eigenvalue.
Whitening sphering_fit(const std::vector<std::vector<double>>& reference_rows, double epsilon);

ProfileTable sphering_apply(const ProfileTable& table, const Whitening& w);

std::vector<double> whiten_vector(const Whitening& w, const std::vector<double>& v);

// CSV: first line "<level>,<dim>", then rows
// plate,well,site,treatment,role,<dim scalars at 9 significant digits>,
// with empty cells for keys the level does not carry.
void write_profile_csv(const std::string& path, const ProfileTable& table);
ProfileTable read_profile_csv(const std::string& path);

// Lossless alternative: PTNS1 payload (f64 [n,dim]) next to a JSON sidecar
// carrying level and row metadata. `path` names the payload; sidecar is
// path + ".json".
void write_profile_binary(const std::string& path, const ProfileTable& table);
ProfileTable read_profile_binary(const std::string& path);

// Dispatch on extension: ".ptns" binary, anything else CSV.
void write_profile(const std::string& path, const ProfileTable& table);
ProfileTable read_profile(const std::string& path);

}  // namespace phenokit
