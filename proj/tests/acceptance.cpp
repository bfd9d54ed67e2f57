// Acceptance suite: one pass/fail line per criterion, nonzero exit when any
// criterion fails. Reference values reported for the original full-scale
// system (MAP 0.093 and FoE 52.8 on BBBC022, well-level IMAD 0.603) are not
// reproducible at this scale and are quoted for documentation only; nothing
// here asserts them.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <vector>

#include "phenokit/cli.hpp"
#include "phenokit/dataio.hpp"
#include "phenokit/gradcheck.hpp"
#include "phenokit/linalg.hpp"
#include "phenokit/objectives.hpp"
#include "phenokit/profiles.hpp"
#include "phenokit/train.hpp"

using namespace phenokit;
namespace fs = std::filesystem;

namespace {

int g_failures = 0;

void report(const std::string& criterion, bool pass, const std::string& detail) {
    std::cout << (pass ? "[PASS] " : "[FAIL] ") << criterion << ": " << detail << "\n";
    if (!pass) ++g_failures;
}

void info(const std::string& text) { std::cout << "[INFO] " << text << "\n"; }

double now_seconds() {
    using clock = std::chrono::steady_clock;
    static const auto start = clock::now();
    return std::chrono::duration<double>(clock::now() - start).count();
}

template <typename T>
Tensor<T> random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
    Tensor<T> t(std::move(shape));
    for (auto& v : t.data) v = static_cast<T>(rng.uniform(lo, hi));
    return t;
}

// ---- criterion: gradient fidelity ----

using ScalarFn = std::function<Var<double>(Tape<double>&, const std::vector<Var<double>>&)>;

double max_err_over_instances(const char* op, int instances, Rng& rng,
                              const std::function<double(Rng&)>& one_instance) {
    double worst = 0;
    for (int i = 0; i < instances; ++i) worst = std::max(worst, one_instance(rng));
    (void)op;
    return worst;
}

void criterion_gradient_fidelity() {
    const double t0 = now_seconds();
    Rng rng(2024);
    const int N = 20;
    const double h = 1e-5;
    double worst_op = 0;
    std::string worst_name = "-";

    auto track = [&](const char* name, double err) {
        if (err > worst_op) {
            worst_op = err;
            worst_name = name;
        }
    };

    auto rnd_shape2 = [&rng] {
        return Shape{2 + rng.uniform_int(3), 2 + rng.uniform_int(4)};
    };

    track("elementwise", max_err_over_instances("ew", N, rng, [&](Rng& r) {
        auto shape = rnd_shape2();
        auto a = random_tensor<double>(shape, r);
        auto b = random_tensor<double>(shape, r);
        return grad_check_multi<double>(
            [](Tape<double>& t, const std::vector<Var<double>>& in) {
                return mean_all(mul(add(in[0], in[1]), sub(in[0], scale(in[1], 1.3))));
            },
            {a, b}, h);
    }));
    track("relu_gelu", max_err_over_instances("act", N, rng, [&](Rng& r) {
        auto x = random_tensor<double>(rnd_shape2(), r, -2, 2);
        return grad_check_multi<double>(
            [](Tape<double>& t, const std::vector<Var<double>>& in) {
                return mean_all(add(gelu(in[0]), relu(scale(in[0], -0.7))));
            },
            {x}, h);
    }));
    track("matmul_linear", max_err_over_instances("mm", N, rng, [&](Rng& r) {
        const std::int64_t m = 2 + r.uniform_int(3), k = 2 + r.uniform_int(3),
                           n = 2 + r.uniform_int(3);
        auto a = random_tensor<double>({m, k}, r);
        auto b = random_tensor<double>({k, n}, r);
        auto w = random_tensor<double>({n, k}, r);
        auto bias = random_tensor<double>({n}, r);
        return grad_check_multi<double>(
            [](Tape<double>& t, const std::vector<Var<double>>& in) {
                return mean_all(add(matmul(in[0], in[1]), linear(in[0], in[2], in[3])));
            },
            {a, b, w, bias}, h);
    }));
    track("bmm_permute_reshape", max_err_over_instances("bmm", N, rng, [&](Rng& r) {
        const std::int64_t g = 1 + r.uniform_int(3), m = 2 + r.uniform_int(2),
                           k = 2 + r.uniform_int(2), n = 2 + r.uniform_int(2);
        auto a = random_tensor<double>({g, m, k}, r);
        auto b = random_tensor<double>({g, n, k}, r);
        return grad_check_multi<double>(
            [](Tape<double>& t, const std::vector<Var<double>>& in) {
                auto bt = permute(in[1], {0, 2, 1});
                auto prod = bmm(in[0], bt);
                return mean_all(reshape(prod, {prod.numel()}));
            },
            {a, b}, h);
    }));
    track("softmax_rows", max_err_over_instances("sm", N, rng, [&](Rng& r) {
        auto x = random_tensor<double>(rnd_shape2(), r, -3, 3);
        auto y = random_tensor<double>(x.shape, r);
        return grad_check_multi<double>(
            [](Tape<double>& t, const std::vector<Var<double>>& in) {
                return mean_all(mul(softmax_rows(in[0]), in[1]));
            },
            {x, y}, h);
    }));
    track("layer_norm", max_err_over_instances("ln", N, rng, [&](Rng& r) {
        auto shape = rnd_shape2();
        auto x = random_tensor<double>(shape, r);
        auto gain = random_tensor<double>({shape[1]}, r, 0.5, 1.5);
        auto bias = random_tensor<double>({shape[1]}, r);
        return grad_check_multi<double>(
            [](Tape<double>& t, const std::vector<Var<double>>& in) {
                return mean_all(mul(layer_norm(in[0], in[1], in[2], 1e-5), in[0]));
            },
            {x, gain, bias}, h);
    }));
    track("batch_norm", max_err_over_instances("bn", N, rng, [&](Rng& r) {
        const std::int64_t b = 2 + r.uniform_int(2), c = 1 + r.uniform_int(3);
        auto x = random_tensor<double>({b, c, 3, 3}, r);
        auto gain = random_tensor<double>({c}, r, 0.5, 1.5);
        auto bias = random_tensor<double>({c}, r);
        BatchNormState<double> state(c);
        const double train_err = grad_check_multi<double>(
            [&state](Tape<double>& t, const std::vector<Var<double>>& in) {
                return mean_all(mul(batch_norm2d(in[0], in[1], in[2], &state, true), in[0]));
            },
            {x, gain, bias}, h);
        const double eval_err = grad_check_multi<double>(
            [&state](Tape<double>& t, const std::vector<Var<double>>& in) {
                return mean_all(mul(batch_norm2d(in[0], in[1], in[2], &state, false), in[0]));
            },
            {x, gain, bias}, h);
        return std::max(train_err, eval_err);
    }));
    track("diff_conv2d", max_err_over_instances("dc", N, rng, [&](Rng& r) {
        const std::int64_t b = 1 + r.uniform_int(2), c = 1 + r.uniform_int(2),
                           o = 1 + r.uniform_int(2);
        const std::int64_t k = 1 + 2 * r.uniform_int(2);
        const std::int64_t sz = k + 1 + r.uniform_int(4);
        const int stride = 1 + static_cast<int>(r.uniform_int(2));
        const int padding = static_cast<int>(r.uniform_int(2));
        const double theta = r.uniform(0, 1);
        auto x = random_tensor<double>({b, c, sz, sz}, r);
        auto w = random_tensor<double>({o, c, k, k}, r);
        return grad_check_multi<double>(
            [theta, stride, padding](Tape<double>& t, const std::vector<Var<double>>& in) {
                return mean_all(diff_conv2d(in[0], in[1], theta, stride, padding));
            },
            {x, w}, h);
    }));
    track("conv_pool_concat_bias", max_err_over_instances("cv", N, rng, [&](Rng& r) {
        auto x1 = random_tensor<double>({2, 2, 4, 4}, r);
        auto x2 = random_tensor<double>({2, 1, 4, 4}, r);
        auto w = random_tensor<double>({2, 3, 3, 3}, r);
        auto bias = random_tensor<double>({2}, r);
        return grad_check_multi<double>(
            [](Tape<double>& t, const std::vector<Var<double>>& in) {
                auto cat = concat_channels(in[0], in[1]);
                auto y = add_channel_bias(conv2d(cat, in[2], 1, 1), in[3]);
                return mean_all(global_avg_pool(mul(y, y)));
            },
            {x1, x2, w, bias}, h);
    }));
    track("dropout_fixed_stream", max_err_over_instances("do", N, rng, [&](Rng& r) {
        auto x = random_tensor<double>(rnd_shape2(), r);
        const std::uint64_t mask_seed = r.next_u64();
        return grad_check_multi<double>(
            [mask_seed](Tape<double>& t, const std::vector<Var<double>>& in) {
                Rng mask_rng(mask_seed);  // identical mask for every FD evaluation
                return mean_all(dropout(in[0], 0.3, mask_rng, true));
            },
            {x}, h);
    }));
    track("l2_normalize", max_err_over_instances("l2", N, rng, [&](Rng& r) {
        auto x = random_tensor<double>(rnd_shape2(), r, 0.2, 1.2);
        auto y = random_tensor<double>(x.shape, r);
        return grad_check_multi<double>(
            [](Tape<double>& t, const std::vector<Var<double>>& in) {
                return mean_all(mul(l2_normalize_rows(in[0]), in[1]));
            },
            {x, y}, h);
    }));
    track("losses", max_err_over_instances("loss", N, rng, [&](Rng& r) {
        const std::int64_t b = 2 + r.uniform_int(3), d = 2 + r.uniform_int(4);
        auto zh = random_tensor<double>({b, d}, r);
        auto z = random_tensor<double>({b, d}, r);
        std::vector<int> labels;
        for (std::int64_t i = 0; i < b; ++i)
            labels.push_back(static_cast<int>(r.uniform_int(d)));
        return grad_check_multi<double>(
            [&labels](Tape<double>& t, const std::vector<Var<double>>& in) {
                LossWeights w;
                auto cls = loss_cls(t, in[0], labels);
                auto mse = loss_mse(t, in[0], in[1]);
                auto con = loss_con(t, in[0], in[1], 0.8);
                return loss_total(t, cls, mse, con, w);
            },
            {zh, z}, h);
    }));

    report("gradient-fidelity/ops", worst_op <= 1e-5,
           "max rel err " + std::to_string(worst_op) + " (worst: " + worst_name +
               "), bound 1e-5, 20 instances per op");

    // full composed network, sampled coordinates
    PhenoNetConfig cfg;
    cfg.in_channels = 5;
    cfg.image_size = 8;
    cfg.feat_dim = 16;
    cfg.out_dim = 6;
    cfg.num_classes = 3;
    cfg.num_heads = 2;
    cfg.ffn_hidden = 12;
    cfg.dropout = 0.0;
    cfg.residual_depth = 1;
    cfg.attn_tokens = 4;

    double worst_model = 0;
    for (int inst = 0; inst < 20; ++inst) {
        cfg.seed = 1000 + inst;
        auto net = PhenoNet<double>::init(cfg);
        auto x = random_tensor<double>({2, 5, 8, 8}, rng, 0, 1);
        std::vector<Tensor<double>> inputs{x};
        std::vector<std::string> names{"input"};
        net.visit_params([&](const std::string& name, Tensor<double>& t) {
            inputs.push_back(t);
            names.push_back(name);
        });
        const std::vector<int> labels{0, 2};
        auto f = [&](Tape<double>& tape, const std::vector<Var<double>>& in) {
            ParamVars<double> pv;
            std::size_t k = 1;
            net.visit_params([&](const std::string& name, Tensor<double>&) {
                pv.vars[name] = in[k++];
            });
            auto [zhat, logits] = forward(tape, in[0], net, pv, Mode::train, nullptr);
            return add(mean_all(mul(zhat, zhat)), loss_cls(tape, logits, labels));
        };
        Rng coord_rng(500 + inst);
        worst_model = std::max(worst_model,
                               grad_check_sampled<double>(f, inputs, h, 12, coord_rng));
    }
    report("gradient-fidelity/full-model", worst_model <= 1e-4,
           "max rel err " + std::to_string(worst_model) +
               " over 20 instances x 12 sampled coordinates, bound 1e-4");

    const double elapsed = now_seconds() - t0;
    report("gradient-fidelity/runtime", elapsed < 120.0,
           std::to_string(elapsed) + " s, bound 120 s");
}

void criterion_dc_tc_equivalence() {
    Rng rng(11);
    bool all_equal = true;
    for (int trial = 0; trial < 100; ++trial) {
        const std::int64_t B = 1 + rng.uniform_int(2), C = 1 + rng.uniform_int(3);
        const std::int64_t O = 1 + rng.uniform_int(3), K = 1 + 2 * rng.uniform_int(2);
        const std::int64_t H = K + rng.uniform_int(5);
        const int stride = 1 + static_cast<int>(rng.uniform_int(2));
        const int padding = static_cast<int>(rng.uniform_int(2));
        if (trial % 2 == 0) {
            auto x = random_tensor<float>({B, C, H, H}, rng);
            auto w = random_tensor<float>({O, C, K, K}, rng);
            Tape<float> tape;
            auto vx = make_leaf(tape, x, false);
            auto vw = make_leaf(tape, w, false);
            all_equal = all_equal &&
                        bitwise_equal(diff_conv2d(vx, vw, 0.0f, stride, padding).val(),
                                      conv2d(vx, vw, stride, padding).val());
        } else {
            auto x = random_tensor<double>({B, C, H, H}, rng);
            auto w = random_tensor<double>({O, C, K, K}, rng);
            Tape<double> tape;
            auto vx = make_leaf(tape, x, false);
            auto vw = make_leaf(tape, w, false);
            all_equal = all_equal &&
                        bitwise_equal(diff_conv2d(vx, vw, 0.0, stride, padding).val(),
                                      conv2d(vx, vw, stride, padding).val());
        }
    }
    report("dc-tc-equivalence", all_equal,
           "diff_conv2d(theta=0) bitwise equal to conv2d on 100 random cases (f32 and f64)");
}

void criterion_loss_closed_forms() {
    Tape<double> tape;
    double worst = 0;
    for (int n : {2, 4, 7, 32}) {
        auto z = make_leaf(tape, Tensor<double>({3, n}, 0.0), false);
        std::vector<int> labels{0, n - 1, n / 2};
        worst = std::max(worst, std::abs(loss_cls(tape, z, labels).val()[0] - std::log(n)));
    }
    bool ok = worst <= 1e-9;
    std::string detail = "uniform-logit CE vs ln N err " + std::to_string(worst);

    double worst_con = 0;
    for (int b : {2, 3, 8}) {
        Tensor<double> rows({b, 2}, 0.0);
        for (int i = 0; i < b; ++i) rows(i, 0) = 1.0;
        auto v = make_leaf(tape, rows, false);
        worst_con =
            std::max(worst_con, std::abs(loss_con(tape, v, v, 1.0).val()[0] - std::log(b)));
    }
    ok = ok && worst_con <= 1e-9;
    detail += "; equal-dot contrastive vs ln B err " + std::to_string(worst_con);

    Rng rng(3);
    auto single = make_leaf(tape, random_tensor<double>({1, 5}, rng), false);
    const double b1 = loss_con(tape, single, single, 0.37).val()[0];
    ok = ok && b1 == 0.0;
    detail += "; B=1 contrastive = " + std::to_string(b1) + " (exact zero required)";
    report("loss-closed-forms", ok, detail);
}

void criterion_metric_oracles() {
    Rng rng(101);
    // interpolated AP vs an independent O(n^2) scan, exact equality
    auto ap_bruteforce = [](const std::vector<bool>& rel) {
        int R = 0;
        for (bool b : rel) R += b ? 1 : 0;
        double sum = 0;
        for (int k = 1; k <= R; ++k) {
            double best = 0;
            int hits = 0;
            for (std::size_t m = 0; m < rel.size(); ++m) {
                if (rel[m]) ++hits;
                if (hits >= k) best = std::max(best, static_cast<double>(hits) / (m + 1));
            }
            sum += best;
        }
        return sum / R;
    };
    bool ap_ok = true;
    for (int trial = 0; trial < 1000; ++trial) {
        const std::size_t n = 1 + static_cast<std::size_t>(rng.uniform_int(50));
        std::vector<bool> rel(n);
        bool any = false;
        for (std::size_t i = 0; i < n; ++i) {
            rel[i] = rng.bernoulli(0.25);
            any = any || rel[i];
        }
        if (!any) rel[static_cast<std::size_t>(rng.uniform_int(n))] = true;
        ap_ok = ap_ok && average_precision(rel) == ap_bruteforce(rel);
    }
    report("metric-oracles/average-precision", ap_ok,
           "interpolated AP equals brute-force PR scan exactly on 1000 random lists");

    bool or_ok = true;
    double worst_or = 0;
    for (int trial = 0; trial < 1000; ++trial) {
        const double a = static_cast<double>(rng.uniform_int(25));
        const double b = static_cast<double>(rng.uniform_int(25));
        const double c = static_cast<double>(rng.uniform_int(25));
        const double d = static_cast<double>(rng.uniform_int(400));
        double ea = a, eb = b, ec = c, ed = d;
        if (ea == 0 || eb == 0 || ec == 0 || ed == 0) {
            ea += 0.5;
            eb += 0.5;
            ec += 0.5;
            ed += 0.5;
        }
        const double expect = (ea * ed) / (eb * ec);
        const double err = std::abs(odds_ratio(a, b, c, d) - expect) / expect;
        worst_or = std::max(worst_or, err);
        or_ok = or_ok && err <= 1e-12;
    }
    report("metric-oracles/odds-ratio", or_ok,
           "1000 random contingency tables, max rel err " + std::to_string(worst_or) +
               ", bound 1e-12");

    // permutation null in the large-cell regime where the corrected sample
    // odds ratio is nearly unbiased
    const std::size_t n = 4000, n_rel = 2000;
    std::vector<bool> rel(n, false);
    for (std::size_t i = 0; i < n_rel; ++i) rel[i] = true;
    double sum = 0;
    const int permutations = 2000;
    for (int p = 0; p < permutations; ++p) {
        for (std::size_t i = n; i > 1; --i)
            std::swap(rel[i - 1], rel[static_cast<std::size_t>(
                                      rng.uniform_int(static_cast<std::int64_t>(i)))]);
        sum += odds_ratio_top(rel, 0.01);
    }
    const double mean = sum / permutations;
    report("metric-oracles/permutation-null", mean >= 0.9 && mean <= 1.1,
           "null FoE mean " + std::to_string(mean) + " over 2000 permutations, bound [0.9, 1.1]");
}

void criterion_pcs_invariants() {
    // commutation with aggregation
    Rng rng(17);
    ProfileTable t;
    t.level = Level::site;
    t.dim = 6;
    for (int p = 0; p < 3; ++p)
        for (int w = 0; w < 6; ++w)
            for (int s = 0; s < 2; ++s) {
                ProfileRow r;
                r.plate = "P" + std::to_string(p);
                r.well = "w" + std::to_string(w);
                r.site = "s" + std::to_string(s);
                const bool control = w < 2;
                r.treatment = control ? "DMSO" : "T" + std::to_string(w);
                r.role = control ? Role::control : Role::treated;
                r.vec.resize(6);
                for (auto& v : r.vec) v = rng.uniform(-2, 2);
                t.rows.push_back(std::move(r));
            }
    double worst = 0;
    const auto a = aggregate(pcs_apply(t, 0.7), Level::well);
    const auto b = pcs_apply(aggregate(t, Level::well), 0.7);
    for (std::size_t i = 0; i < a.rows.size(); ++i)
        for (int d = 0; d < 6; ++d)
            worst = std::max(worst, std::abs(a.rows[i].vec[d] - b.rows[i].vec[d]));
    report("pcs-invariants/commutation", worst <= 1e-6,
           "site-PCs-then-aggregate vs aggregate-then-PCs, max diff " + std::to_string(worst));

    const auto idt = pcs_apply(t, 0.0);
    bool bitwise = true;
    for (std::size_t i = 0; i < t.rows.size(); ++i)
        for (int d = 0; d < 6; ++d) {
            const double x = t.rows[i].vec[d], y = idt.rows[i].vec[d];
            bitwise = bitwise && std::memcmp(&x, &y, sizeof(double)) == 0;
        }
    report("pcs-invariants/alpha-zero-identity", bitwise, "alpha = 0 output bitwise equal");

    // pairwise differences: exact arithmetic fixture (integer features, two
    // controls per plate, dyadic alpha keeps every subtraction representable)
    ProfileTable ti;
    ti.level = Level::well;
    ti.dim = 4;
    Rng irng(5);
    for (int p = 0; p < 2; ++p)
        for (int w = 0; w < 6; ++w) {
            ProfileRow r;
            r.plate = "P" + std::to_string(p);
            r.well = "w" + std::to_string(w);
            const bool control = w < 2;
            r.treatment = control ? "DMSO" : "T" + std::to_string(w);
            r.role = control ? Role::control : Role::treated;
            r.vec.resize(4);
            for (auto& v : r.vec) v = static_cast<double>(irng.uniform_int(128) - 64);
            ti.rows.push_back(std::move(r));
        }
    const auto corrected = pcs_apply(ti, 0.5);
    bool diffs_exact = true;
    for (std::size_t i = 0; i < ti.rows.size(); ++i)
        for (std::size_t j = 0; j < ti.rows.size(); ++j) {
            if (ti.rows[i].plate != ti.rows[j].plate) continue;
            for (int d = 0; d < 4; ++d)
                diffs_exact = diffs_exact &&
                              (corrected.rows[i].vec[d] - corrected.rows[j].vec[d] ==
                               ti.rows[i].vec[d] - ti.rows[j].vec[d]);
        }
    report("pcs-invariants/pairwise-differences", diffs_exact,
           "within-plate pairwise differences preserved exactly (exact-arithmetic fixture)");
}

void criterion_sphering() {
    Rng rng(29);
    std::vector<std::vector<double>> reference;
    for (int i = 0; i < 300; ++i) {
        const double a = rng.normal(), b = rng.normal(), c = rng.normal(), d = rng.normal();
        reference.push_back({2 * a + b, 0.5 * b + 0.1 * c, c + a, d - 0.3 * a});
    }
    const auto w = sphering_fit(reference, 0.0);
    std::vector<std::vector<double>> white;
    for (const auto& r : reference) white.push_back(whiten_vector(w, r));
    const auto cov = covariance(white, 4);
    double worst = 0;
    for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 4; ++j)
            worst = std::max(worst, std::abs(cov[i * 4 + j] - (i == j ? 1.0 : 0.0)));
    report("sphering-identity", worst <= 1e-6,
           "whitened reference covariance vs identity, max entry err " + std::to_string(worst));
}

void criterion_lr_schedule() {
    const auto stages = full_scale_lr_stages();
    const bool ok = lr_schedule(5, stages) == 2e-3 && lr_schedule(30, stages) == 1e-3 &&
                    lr_schedule(100, stages) == 5e-4 && lr_schedule(150, stages) == 1e-4;
    report("lr-schedule", ok, "epochs {5,30,100,150} -> {2e-3,1e-3,5e-4,1e-4}");
}

// shared state between the end-to-end and the PCs criteria
struct E2eOutputs {
    ProfileTable treat_07, treat_00, wells_07, wells_00;
    AnnotationMap annotations;
    bool ready = false;
};

E2eOutputs run_end_to_end() {
    E2eOutputs out;
    const auto dir = fs::temp_directory_path() / "phenokit_acceptance_e2e";
    fs::remove_all(dir);

    SyntheticSpec spec;  // defaults: 4 groups x 5 treatments, offsets on, seed 7
    gen_synthetic(spec, dir.string());

    const auto records = load_index((dir / "index.csv").string());
    const auto encoder = encode_labels(records);
    PhenoNetConfig model_cfg;  // desk defaults
    model_cfg.num_classes = encoder.size();

    TrainConfig tc;
    tc.batch_size = 16;
    tc.max_epochs = 12;  // inside the 30-epoch budget
    tc.warmup_epochs = 6;
    tc.seed = 11;

    TrainDataset data;
    data.num_classes = encoder.size();
    const auto targets = load_regression_targets((dir / "latents.csv").string(), records);
    for (const auto& rec : records) {
        TrainSample s;
        s.image = load_image_stack(rec, model_cfg.image_size);
        s.label = encoder.encode(rec.treatment);
        const auto& t = targets.at(rec.treatment);
        data.target_dim = static_cast<int>(t.size());
        s.target.assign(t.begin(), t.end());
        data.samples.push_back(std::move(s));
    }

    const auto t0 = std::chrono::steady_clock::now();
    auto net = PhenoNet<float>::init(model_cfg);
    train_full(net, data, tc);
    const double train_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    report("e2e-retrieval/training-budget",
           tc.max_epochs <= 30 && train_seconds < 600.0,
           std::to_string(tc.max_epochs) + " epochs in " + std::to_string(train_seconds) +
               " s (bounds: <= 30 epochs, < 600 s)");

    // site-level embeddings in eval mode
    ProfileTable sites;
    sites.level = Level::site;
    sites.dim = model_cfg.out_dim;
    for (std::size_t start = 0; start < records.size(); start += 8) {
        const std::size_t end = std::min(records.size(), start + 8);
        const std::int64_t B = static_cast<std::int64_t>(end - start);
        Tensor<float> batch({B, model_cfg.in_channels, model_cfg.image_size,
                             model_cfg.image_size});
        const std::int64_t img_sz =
            model_cfg.in_channels * model_cfg.image_size * model_cfg.image_size;
        for (std::size_t i = start; i < end; ++i) {
            const auto img = load_image_stack(records[i], model_cfg.image_size);
            std::copy(img.data.begin(), img.data.end(),
                      batch.data.begin() + static_cast<std::int64_t>(i - start) * img_sz);
        }
        Tape<float> tape;
        auto pv = bind_params(tape, net, false);
        auto x = make_leaf(tape, std::move(batch), false, "batch");
        auto h2 = gradient_encoder_forward(tape, x, net, pv, Mode::eval);
        auto h6 = transformer_forward(tape, h2, net, pv, Mode::eval, nullptr);
        auto z = project(tape, h6, net, pv, Mode::eval, nullptr);
        for (std::size_t i = start; i < end; ++i) {
            ProfileRow row;
            row.plate = records[i].plate;
            row.well = records[i].well;
            row.site = records[i].site;
            row.treatment = records[i].treatment;
            row.role = records[i].role;
            row.vec.resize(static_cast<std::size_t>(model_cfg.out_dim));
            for (int d = 0; d < model_cfg.out_dim; ++d)
                row.vec[static_cast<std::size_t>(d)] =
                    z.val()(static_cast<std::int64_t>(i - start), d);
            sites.rows.push_back(std::move(row));
        }
    }

    auto correct = [&](double alpha, ProfileTable& wells_out) {
        const auto corrected = pcs_apply(sites, alpha);
        wells_out = aggregate(corrected, Level::well);
        std::vector<std::vector<double>> reference;
        for (const auto& r : wells_out.rows)
            if (r.role == Role::control) reference.push_back(r.vec);
        const auto w = sphering_fit(reference, -1.0);
        return aggregate(sphering_apply(wells_out, w), Level::treatment);
    };
    out.treat_07 = correct(0.7, out.wells_07);
    out.treat_00 = correct(0.0, out.wells_00);
    out.annotations = AnnotationMap::read_csv((dir / "annotations.csv").string());
    out.ready = true;
    fs::remove_all(dir);
    return out;
}

void criterion_e2e_retrieval(const E2eOutputs& e2e) {
    const auto lists = cosine_rank(e2e.treat_07, e2e.annotations);
    const double map_observed = mean_average_precision(lists);
    const double recall1 = recall_at_k(lists, 1);

    // label-permutation baseline: same rankings, annotations permuted across
    // treatments, MAP averaged over permutations
    std::vector<std::string> treatments;
    for (const auto& [name, labels] : e2e.annotations.entries) treatments.push_back(name);
    Rng rng(2025);
    double baseline_sum = 0;
    const int permutations = 200;
    for (int p = 0; p < permutations; ++p) {
        std::vector<std::string> shuffled = treatments;
        for (std::size_t i = shuffled.size(); i > 1; --i)
            std::swap(shuffled[i - 1], shuffled[static_cast<std::size_t>(rng.uniform_int(
                                           static_cast<std::int64_t>(i)))]);
        AnnotationMap permuted;
        for (std::size_t i = 0; i < treatments.size(); ++i)
            permuted.entries[shuffled[i]] = e2e.annotations.entries.at(treatments[i]);
        double ap_sum = 0;
        int queries = 0;
        for (const auto& list : lists) {
            std::vector<bool> rel(list.items.size());
            bool any = false;
            for (std::size_t i = 0; i < list.items.size(); ++i) {
                rel[i] = permuted.related(list.query, list.items[i].treatment);
                any = any || rel[i];
            }
            if (!any) continue;
            ap_sum += average_precision(rel);
            ++queries;
        }
        baseline_sum += ap_sum / queries;
    }
    const double baseline = baseline_sum / permutations;

    char detail[256];
    std::snprintf(detail, sizeof(detail),
                  "MAP %.4f vs 3x permutation baseline %.4f = %.4f (ratio %.2f)", map_observed,
                  baseline, 3 * baseline, map_observed / baseline);
    report("e2e-retrieval/map-vs-baseline", map_observed >= 3 * baseline, detail);
    if (map_observed < 3 * baseline && 3 * baseline > 1.0)
        info("map-vs-baseline is unattainable at this geometry: every query list has 4 "
             "relevant of 19 items, the interpolated-MAP permutation null is ~0.35, and "
             "3 x 0.35 exceeds the metric's maximum of 1.0; even a perfect ranking (MAP 1.0) "
             "yields ratio ~2.86 < 3");

    std::snprintf(detail, sizeof(detail), "recall@1 = %.3f, bound >= 0.5", recall1);
    report("e2e-retrieval/recall-at-1", recall1 >= 0.5, detail);
}

void criterion_pcs_efficacy(const E2eOutputs& e2e) {
    const double foe_07 = foe(cosine_rank(e2e.treat_07, e2e.annotations));
    const double foe_00 = foe(cosine_rank(e2e.treat_00, e2e.annotations));
    char detail[160];
    std::snprintf(detail, sizeof(detail), "FoE(alpha=0.7) = %.4f vs FoE(alpha=0) = %.4f",
                  foe_07, foe_00);
    report("pcs-efficacy/foe", foe_07 >= foe_00, detail);

    // fixed PCA-2 embedder: one 2-D basis fit on the uncorrected wells, both
    // tables projected into that same plane
    const int dim = e2e.wells_00.dim;
    std::vector<std::vector<double>> rows0;
    for (const auto& r : e2e.wells_00.rows) rows0.push_back(r.vec);
    const auto mean = column_mean(rows0, dim);
    const auto eig = sym_eig(covariance(rows0, dim), dim);
    auto project2 = [&](const ProfileTable& table) {
        std::vector<std::array<double, 2>> pts;
        for (const auto& r : table.rows) {
            std::array<double, 2> p{0, 0};
            for (int axis = 0; axis < 2; ++axis)
                for (int j = 0; j < dim; ++j)
                    p[static_cast<std::size_t>(axis)] +=
                        (r.vec[j] - mean[j]) * eig.vectors[j * dim + axis];
            pts.push_back(p);
        }
        return pts;
    };
    const double imad_00 = imad_from_coords(project2(e2e.wells_00));
    const double imad_07 = imad_from_coords(project2(e2e.wells_07));
    std::snprintf(detail, sizeof(detail),
                  "well-level IMAD %.4f (before) -> %.4f (after), fixed shared PCA-2 plane",
                  imad_00, imad_07);
    report("pcs-efficacy/imad", imad_07 > imad_00, detail);
}

}  // namespace

int main() {
    info("full-scale reference values (documentation only, not asserted): MAP 0.093 and "
         "FoE 52.8 on BBBC022; well-level IMAD 0.603; not reproducible at desk scale");

    try {
        criterion_gradient_fidelity();
        criterion_dc_tc_equivalence();
        criterion_loss_closed_forms();
        criterion_metric_oracles();
        criterion_pcs_invariants();
        criterion_sphering();
        criterion_lr_schedule();
        const E2eOutputs e2e = run_end_to_end();
        criterion_e2e_retrieval(e2e);
        criterion_pcs_efficacy(e2e);
    } catch (const std::exception& e) {
        std::cout << "[FAIL] acceptance aborted: " << e.what() << "\n";
        return 1;
    }

    std::cout << (g_failures == 0 ? "all criteria passed\n"
                                  : std::to_string(g_failures) + " criterion(s) failed\n");
    return g_failures == 0 ? 0 : 1;
}
