#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <filesystem>

#include "phenokit/linalg.hpp"
#include "phenokit/profiles.hpp"
#include "phenokit/rng.hpp"

using namespace phenokit;

namespace {

ProfileRow row(std::string plate, std::string well, std::string site, std::string treatment,
               Role role, std::vector<double> vec) {
    ProfileRow r;
    r.plate = std::move(plate);
    r.well = std::move(well);
    r.site = std::move(site);
    r.treatment = std::move(treatment);
    r.role = role;
    r.vec = std::move(vec);
    return r;
}

ProfileTable small_site_table() {
    ProfileTable t;
    t.level = Level::site;
    t.dim = 2;
    t.rows = {
        row("P1", "w1", "s1", "TA", Role::treated, {1, 3}),
        row("P1", "w1", "s2", "TA", Role::treated, {3, 5}),
        row("P1", "w2", "s1", "DMSO", Role::control, {0, 2}),
        row("P1", "w3", "s1", "DMSO", Role::control, {4, 0}),
        row("P2", "w1", "s1", "TA", Role::treated, {10, 10}),
        row("P2", "w2", "s1", "DMSO", Role::control, {8, 6}),
    };
    t.validate();
    return t;
}

}  // namespace

TEST_CASE("aggregate site to well averages site vectors") {
    const auto t = small_site_table();
    const auto wells = aggregate(t, Level::well);
    CHECK(wells.level == Level::well);
    CHECK(wells.rows.size() == 5);
    // two sites [1,3] and [3,5] -> [2,4]
    bool found = false;
    for (const auto& r : wells.rows)
        if (r.plate == "P1" && r.well == "w1") {
            CHECK(r.vec[0] == doctest::Approx(2.0));
            CHECK(r.vec[1] == doctest::Approx(4.0));
            CHECK(r.treatment == "TA");
            found = true;
        }
    CHECK(found);
}

TEST_CASE("aggregate is permutation invariant and single-site wells pass through") {
    auto t = small_site_table();
    const auto a = aggregate(t, Level::well);
    Rng rng(3);
    for (std::size_t i = t.rows.size(); i > 1; --i)
        std::swap(t.rows[i - 1], t.rows[static_cast<std::size_t>(rng.uniform_int(
                                     static_cast<std::int64_t>(i)))]);
    const auto b = aggregate(t, Level::well);
    REQUIRE(a.rows.size() == b.rows.size());
    for (std::size_t i = 0; i < a.rows.size(); ++i) {
        CHECK(a.rows[i].plate == b.rows[i].plate);
        CHECK(a.rows[i].well == b.rows[i].well);
        for (int d = 0; d < a.dim; ++d) CHECK(a.rows[i].vec[d] == b.rows[i].vec[d]);
    }

    // single site per well: well vector equals the site vector
    for (const auto& r : a.rows)
        if (r.plate == "P2" && r.well == "w1") {
            CHECK(r.vec[0] == 10.0);
            CHECK(r.vec[1] == 10.0);
        }
}

TEST_CASE("aggregate rejects mixed roles in one well") {
    ProfileTable t;
    t.level = Level::site;
    t.dim = 1;
    t.rows = {row("P1", "w1", "s1", "TA", Role::treated, {1}),
              row("P1", "w1", "s2", "TA", Role::control, {2})};
    CHECK_THROWS_AS(aggregate(t, Level::well), InvariantError);
}

TEST_CASE("aggregate well to treatment keeps control rows separate") {
    ProfileTable wells;
    wells.level = Level::well;
    wells.dim = 1;
    wells.rows = {row("P1", "w1", "", "TA", Role::treated, {1}),
                  row("P2", "w1", "", "TA", Role::treated, {3}),
                  row("P1", "w2", "", "DMSO", Role::control, {10})};
    const auto t = aggregate(wells, Level::treatment);
    CHECK(t.rows.size() == 2);
    for (const auto& r : t.rows) {
        if (r.treatment == "TA") {
            CHECK(r.role == Role::treated);
            CHECK(r.vec[0] == doctest::Approx(2.0));
        } else {
            CHECK(r.treatment == "DMSO");
            CHECK(r.role == Role::control);
        }
    }
}

TEST_CASE("pcs_control_mean matches hand arithmetic") {
    const auto t = small_site_table();
    // P1 controls: [0,2] and [4,0] -> [2,1]
    const auto w1 = pcs_control_mean(t, "P1");
    CHECK(w1[0] == doctest::Approx(2.0));
    CHECK(w1[1] == doctest::Approx(1.0));
    // single control site: mean equals it
    const auto w2 = pcs_control_mean(t, "P2");
    CHECK(w2[0] == 8.0);
    CHECK(w2[1] == 6.0);

    // adding a treated well leaves the mean unchanged
    auto t2 = t;
    t2.rows.push_back(row("P1", "w9", "s1", "TB", Role::treated, {100, 100}));
    const auto w3 = pcs_control_mean(t2, "P1");
    CHECK(w3[0] == w1[0]);
    CHECK(w3[1] == w1[1]);

    CHECK_THROWS_AS(pcs_control_mean(t, "P9"), InputError);
}

TEST_CASE("pcs_apply: alpha 0 is a bitwise identity") {
    const auto t = small_site_table();
    const auto out = pcs_apply(t, 0.0);
    REQUIRE(out.rows.size() == t.rows.size());
    for (std::size_t i = 0; i < t.rows.size(); ++i)
        for (int d = 0; d < t.dim; ++d) {
            const double a = t.rows[i].vec[d], b = out.rows[i].vec[d];
            CHECK(std::memcmp(&a, &b, sizeof(double)) == 0);
        }
}

TEST_CASE("pcs_apply: alpha 1 zeroes a single-control plate's control row") {
    ProfileTable t;
    t.level = Level::well;
    t.dim = 2;
    t.rows = {row("P1", "w1", "", "TA", Role::treated, {5, 7}),
              row("P1", "w2", "", "DMSO", Role::control, {1, 2})};
    const auto out = pcs_apply(t, 1.0);
    for (const auto& r : out.rows)
        if (r.role == Role::control) {
            CHECK(r.vec[0] == 0.0);
            CHECK(r.vec[1] == 0.0);
        } else {
            CHECK(r.vec[0] == doctest::Approx(4.0));
            CHECK(r.vec[1] == doctest::Approx(5.0));
        }

    CHECK_THROWS_AS(pcs_apply(t, 1.5), InputError);
}

TEST_CASE("pcs preserves within-plate pairwise differences") {
    // exact case: integer features, two controls per plate, dyadic alpha, so
    // every subtraction is exactly representable
    const auto t = small_site_table();
    const auto out = pcs_apply(t, 0.5);
    for (std::size_t i = 0; i < t.rows.size(); ++i)
        for (std::size_t j = 0; j < t.rows.size(); ++j) {
            if (t.rows[i].plate != t.rows[j].plate) continue;
            for (int d = 0; d < t.dim; ++d)
                CHECK(out.rows[i].vec[d] - out.rows[j].vec[d] ==
                      t.rows[i].vec[d] - t.rows[j].vec[d]);
        }

    // arbitrary alpha and data: preserved to the last ulp of the subtraction
    Rng rng(7);
    auto t2 = t;
    for (auto& r : t2.rows)
        for (auto& v : r.vec) v = rng.uniform(-3, 3);
    const auto out2 = pcs_apply(t2, 0.7);
    for (std::size_t i = 0; i < t2.rows.size(); ++i)
        for (std::size_t j = 0; j < t2.rows.size(); ++j) {
            if (t2.rows[i].plate != t2.rows[j].plate) continue;
            for (int d = 0; d < t2.dim; ++d)
                CHECK(std::abs((out2.rows[i].vec[d] - out2.rows[j].vec[d]) -
                               (t2.rows[i].vec[d] - t2.rows[j].vec[d])) < 1e-14);
        }
}

TEST_CASE("pcs commutes with mean aggregation to well level") {
    Rng rng(17);
    ProfileTable t;
    t.level = Level::site;
    t.dim = 4;
    for (int p = 0; p < 2; ++p)
        for (int w = 0; w < 5; ++w)
            for (int s = 0; s < 3; ++s) {
                std::vector<double> v(4);
                for (auto& x : v) x = rng.uniform(-2, 2);
                const bool control = w == 0;
                t.rows.push_back(row("P" + std::to_string(p), "w" + std::to_string(w),
                                     "s" + std::to_string(s),
                                     control ? "DMSO" : "T" + std::to_string(w),
                                     control ? Role::control : Role::treated, std::move(v)));
            }
    const double alpha = 0.7;
    const auto site_then_agg = aggregate(pcs_apply(t, alpha), Level::well);
    const auto agg_then_pcs = pcs_apply(aggregate(t, Level::well), alpha);
    REQUIRE(site_then_agg.rows.size() == agg_then_pcs.rows.size());
    for (std::size_t i = 0; i < site_then_agg.rows.size(); ++i)
        for (int d = 0; d < 4; ++d)
            CHECK(std::abs(site_then_agg.rows[i].vec[d] - agg_then_pcs.rows[i].vec[d]) < 1e-6);
}

TEST_CASE("sphering: diagonal covariance has a closed-form whitening matrix") {
    // rows with covariance diag(4,1): +/-2 on axis 0, +/-1 on axis 1 (n-1 norm)
    std::vector<std::vector<double>> ref = {{2, 0}, {-2, 0}, {0, 1}, {0, -1}};
    // cov = 1/(n-1) X^T X = diag(8/3, 2/3); scale rows so cov = diag(4,1)
    const double s0 = std::sqrt(4.0 / (8.0 / 3.0)), s1 = std::sqrt(1.0 / (2.0 / 3.0));
    for (auto& r : ref) {
        r[0] *= s0;
        r[1] *= s1;
    }
    const auto w = sphering_fit(ref, 0.0);
    CHECK(w.matrix[0] == doctest::Approx(0.5).epsilon(1e-10));
    CHECK(w.matrix[3] == doctest::Approx(1.0).epsilon(1e-10));
    CHECK(std::abs(w.matrix[1]) < 1e-10);
    CHECK(std::abs(w.matrix[2]) < 1e-10);
}

TEST_CASE("sphering: already-white data gives the identity") {
    // orthogonal +/- pattern with unit sample covariance
    std::vector<std::vector<double>> ref;
    Rng rng(5);
    for (int i = 0; i < 400; ++i) {
        std::vector<double> v(3);
        for (auto& x : v) x = rng.normal();
        ref.push_back(std::move(v));
    }
    // exact whitening first, then the whitened rows are the reference
    auto w0 = sphering_fit(ref, 0.0);
    std::vector<std::vector<double>> white;
    for (const auto& r : ref) white.push_back(whiten_vector(w0, r));
    const auto w = sphering_fit(white, 0.0);
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j)
            CHECK(std::abs(w.matrix[i * 3 + j] - (i == j ? 1.0 : 0.0)) < 1e-8);
}

TEST_CASE("sphering: huge epsilon shrinks toward eps^-1/2 identity") {
    std::vector<std::vector<double>> ref = {{1, 0}, {-1, 0}, {0, 0.5}, {0, -0.5}};
    const double eps = 1e6;
    const auto w = sphering_fit(ref, eps);
    const double expect = 1.0 / std::sqrt(eps);
    for (int i = 0; i < 2; ++i)
        for (int j = 0; j < 2; ++j)
            CHECK(w.matrix[i * 2 + j] ==
                  doctest::Approx(i == j ? expect : 0.0).epsilon(1e-3).scale(expect));
}

TEST_CASE("sphering_apply: whitened reference has unit covariance") {
    Rng rng(29);
    std::vector<std::vector<double>> ref;
    for (int i = 0; i < 200; ++i) {
        const double a = rng.normal(), b = rng.normal(), c = rng.normal();
        ref.push_back({a * 2.0 + b, b * 0.5, c + a});
    }
    const auto w = sphering_fit(ref, 0.0);
    ProfileTable t;
    t.level = Level::well;
    t.dim = 3;
    for (std::size_t i = 0; i < ref.size(); ++i)
        t.rows.push_back(
            row("P1", "w" + std::to_string(i), "", "T" + std::to_string(i), Role::treated, ref[i]));
    const auto out = sphering_apply(t, w);
    std::vector<std::vector<double>> white;
    for (const auto& r : out.rows) white.push_back(r.vec);
    const auto cov = covariance(white, 3);
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j)
            CHECK(std::abs(cov[i * 3 + j] - (i == j ? 1.0 : 0.0)) < 1e-6);

    // whitening matrix is symmetric
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j)
            CHECK(std::abs(w.matrix[i * 3 + j] - w.matrix[j * 3 + i]) < 1e-8);
}

TEST_CASE("sphering: fitting on shifted inputs absorbs the shift") {
    Rng rng(31);
    std::vector<std::vector<double>> ref;
    for (int i = 0; i < 50; ++i) ref.push_back({rng.normal(), rng.normal(), rng.normal()});
    const double c = 42.5;
    std::vector<std::vector<double>> shifted = ref;
    for (auto& r : shifted)
        for (auto& v : r) v += c;
    const auto w0 = sphering_fit(ref, 1e-6);
    const auto w1 = sphering_fit(shifted, 1e-6);
    for (std::size_t i = 0; i < ref.size(); ++i) {
        const auto a = whiten_vector(w0, ref[i]);
        const auto b = whiten_vector(w1, shifted[i]);
        for (int d = 0; d < 3; ++d) CHECK(std::abs(a[d] - b[d]) < 1e-9);
    }
}

TEST_CASE("sphering: all-equal rows map to zero") {
    std::vector<std::vector<double>> ref(5, std::vector<double>{3.0, -1.0});
    const auto w = sphering_fit(ref, 1.0);  // eps keeps it nonsingular
    for (const auto& r : ref) {
        const auto v = whiten_vector(w, r);
        CHECK(v[0] == doctest::Approx(0.0));
        CHECK(v[1] == doctest::Approx(0.0));
    }
    CHECK_THROWS_AS(sphering_fit({{1.0, 2.0}}, 0.0), InputError);
}

TEST_CASE("profile CSV and binary roundtrips") {
    const auto t = small_site_table();
    const auto dir = std::filesystem::temp_directory_path() / "phenokit_prof_test";
    std::filesystem::create_directories(dir);

    const std::string csv = (dir / "t.csv").string();
    write_profile_csv(csv, t);
    const auto back = read_profile_csv(csv);
    CHECK(back.level == t.level);
    CHECK(back.dim == t.dim);
    REQUIRE(back.rows.size() == t.rows.size());
    for (std::size_t i = 0; i < t.rows.size(); ++i) {
        CHECK(back.rows[i].plate == t.rows[i].plate);
        CHECK(back.rows[i].treatment == t.rows[i].treatment);
        CHECK(back.rows[i].role == t.rows[i].role);
        for (int d = 0; d < t.dim; ++d)
            CHECK(back.rows[i].vec[d] == doctest::Approx(t.rows[i].vec[d]).epsilon(1e-8));
    }

    // binary roundtrip is lossless even for awkward doubles
    auto t2 = t;
    t2.rows[0].vec[0] = 0.1 + 0.2;  // not representable at 9 digits alone
    const std::string bin = (dir / "t.ptns").string();
    write_profile(bin, t2);
    const auto back2 = read_profile(bin);
    for (std::size_t i = 0; i < t2.rows.size(); ++i)
        for (int d = 0; d < t2.dim; ++d) {
            const double a = t2.rows[i].vec[d], b = back2.rows[i].vec[d];
            CHECK(std::memcmp(&a, &b, sizeof(double)) == 0);
        }

    std::filesystem::remove_all(dir);
}

TEST_CASE("profile table invariants reject duplicates and non-finite values") {
    ProfileTable t;
    t.level = Level::well;
    t.dim = 1;
    t.rows = {row("P1", "w1", "", "TA", Role::treated, {1}),
              row("P1", "w1", "", "TB", Role::treated, {2})};
    CHECK_THROWS_AS(t.validate(), InvariantError);

    ProfileTable t2;
    t2.level = Level::well;
    t2.dim = 1;
    t2.rows = {row("P1", "w1", "", "TA", Role::treated,
                   {std::numeric_limits<double>::quiet_NaN()})};
    CHECK_THROWS_AS(t2.validate(), InvariantError);
}
