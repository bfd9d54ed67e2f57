#include "phenokit/train.hpp"

#include <chrono>
#include <cmath>
#include <numeric>
#include <set>

#include <json.hpp>

namespace phenokit {

double lr_schedule(int epoch, const std::vector<LrStage>& stages) {
    if (stages.empty()) throw InputError("lr_schedule: empty stage table");
    if (epoch < 0 || epoch >= stages.back().until_epoch)
        throw InputError("lr_schedule: epoch " + std::to_string(epoch) + " outside [0," +
                         std::to_string(stages.back().until_epoch) + ")");
    for (const auto& s : stages)
        if (epoch < s.until_epoch) return s.rate;
    throw InvariantError("lr_schedule: unreachable");
}

std::vector<LrStage> full_scale_lr_stages() {
    return {{10, 2e-3}, {60, 1e-3}, {120, 5e-4}, {200, 1e-4}};
}

void TrainConfig::validate() const {
    if (batch_size < 1 || max_epochs < 1) throw InputError("train config: bad batch/epochs");
    if (warmup_epochs < 0 || warmup_epochs > max_epochs)
        throw InputError("train config: warmup_epochs must be in [0, max_epochs]");
    weights.validate();
    if (!lr_stages.empty()) {
        int prev = 0;
        for (const auto& s : lr_stages) {
            if (s.until_epoch <= prev)
                throw InputError("train config: lr stage thresholds must be strictly increasing");
            if (!(s.rate >= 0)) throw InputError("train config: lr must be nonnegative");
            prev = s.until_epoch;
        }
        if (lr_stages.back().until_epoch != max_epochs)
            throw InputError("train config: final lr threshold must equal max_epochs");
    }
}

namespace {

std::vector<LrStage> effective_stages(const TrainConfig& cfg) {
    if (!cfg.lr_stages.empty()) return cfg.lr_stages;
    // scaled analog of the full-scale table over max_epochs
    const int e = cfg.max_epochs;
    std::vector<LrStage> stages;
    const int t1 = std::max(1, e / 3);
    const int t2 = std::max(t1 + 1, 2 * e / 3);
    const int t3 = std::max(t2 + 1, 5 * e / 6);
    if (t3 >= e) return {{e, 2e-3}};
    stages = {{t1, 2e-3}, {t2, 1e-3}, {t3, 5e-4}, {e, 1e-4}};
    return stages;
}

nlohmann::json weights_to_json(const LossWeights& w) {
    return {{"lambda1", w.lambda1},
            {"lambda2", w.lambda2},
            {"lambda3", w.lambda3},
            {"tau", w.tau},
            {"normalize_embeddings", w.normalize_embeddings}};
}

LossWeights weights_from_json(const nlohmann::json& j) {
    static const std::set<std::string> known{"lambda1", "lambda2", "lambda3", "tau",
                                             "normalize_embeddings"};
    for (const auto& [key, value] : j.items())
        if (!known.count(key)) throw InputError("unknown loss weight key: '" + key + "'");
    LossWeights w;
    if (j.contains("lambda1")) w.lambda1 = j["lambda1"].get<double>();
    if (j.contains("lambda2")) w.lambda2 = j["lambda2"].get<double>();
    if (j.contains("lambda3")) w.lambda3 = j["lambda3"].get<double>();
    if (j.contains("tau")) w.tau = j["tau"].get<double>();
    if (j.contains("normalize_embeddings"))
        w.normalize_embeddings = j["normalize_embeddings"].get<bool>();
    return w;
}

}  // namespace

std::string TrainConfig::to_json() const {
    nlohmann::json j;
    j["batch_size"] = batch_size;
    j["max_epochs"] = max_epochs;
    j["warmup_epochs"] = warmup_epochs;
    auto& stages = j["lr_stages"] = nlohmann::json::array();
    for (const auto& s : lr_stages) stages.push_back({s.until_epoch, s.rate});
    j["weights"] = weights_to_json(weights);
    j["seed"] = seed;
    j["ablation"] = {{"use_cls", ablation.use_cls},
                     {"use_mse", ablation.use_mse},
                     {"use_con", ablation.use_con},
                     {"use_diffconv", ablation.use_diffconv}};
    return j.dump(2);
}

TrainConfig TrainConfig::from_json(const std::string& text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const std::exception& e) {
        throw InputError(std::string("bad train config JSON: ") + e.what());
    }
    static const std::set<std::string> known{"batch_size", "max_epochs", "warmup_epochs",
                                             "lr_stages",  "weights",    "seed",
                                             "ablation"};
    for (const auto& [key, value] : j.items())
        if (!known.count(key)) throw InputError("unknown train config key: '" + key + "'");
    TrainConfig cfg;
    if (j.contains("batch_size")) cfg.batch_size = j["batch_size"].get<int>();
    if (j.contains("max_epochs")) cfg.max_epochs = j["max_epochs"].get<int>();
    if (j.contains("warmup_epochs")) cfg.warmup_epochs = j["warmup_epochs"].get<int>();
    if (j.contains("lr_stages")) {
        for (const auto& s : j["lr_stages"]) {
            if (!s.is_array() || s.size() != 2)
                throw InputError("train config: lr_stages entries are [epoch_threshold, rate]");
            cfg.lr_stages.push_back({s[0].get<int>(), s[1].get<double>()});
        }
    }
    if (j.contains("weights")) cfg.weights = weights_from_json(j["weights"]);
    if (j.contains("seed")) cfg.seed = j["seed"].get<std::uint64_t>();
    if (j.contains("ablation")) {
        const auto& a = j["ablation"];
        static const std::set<std::string> ak{"use_cls", "use_mse", "use_con", "use_diffconv"};
        for (const auto& [key, value] : a.items())
            if (!ak.count(key)) throw InputError("unknown ablation key: '" + key + "'");
        if (a.contains("use_cls")) cfg.ablation.use_cls = a["use_cls"].get<bool>();
        if (a.contains("use_mse")) cfg.ablation.use_mse = a["use_mse"].get<bool>();
        if (a.contains("use_con")) cfg.ablation.use_con = a["use_con"].get<bool>();
        if (a.contains("use_diffconv")) cfg.ablation.use_diffconv = a["use_diffconv"].get<bool>();
    }
    cfg.validate();
    return cfg;
}

std::string epoch_log_json(const EpochLog& log) {
    nlohmann::json j;
    j["epoch"] = log.epoch;
    j["lr"] = log.lr;
    j["l_cls"] = log.l_cls;
    j["l_mse"] = log.l_mse;
    j["l_con"] = log.l_con;
    j["l_total"] = log.l_total;
    j["wall_ms"] = log.wall_ms;
    return j.dump();
}

void SgdState::step(PhenoNet<float>& net, const std::map<std::string, Tensor<float>>& grads,
                    double lr) {
    constexpr double kMomentum = 0.9;
    constexpr double kClipNorm = 5.0;

    double sq = 0.0;
    for (const auto& [name, g] : grads)
        for (const float v : g.data) sq += static_cast<double>(v) * v;
    const double norm = std::sqrt(sq);
    const double clip = norm > kClipNorm ? kClipNorm / norm : 1.0;

    net.visit_params([&](const std::string& name, Tensor<float>& p) {
        const auto it = grads.find(name);
        if (it == grads.end()) throw InvariantError("sgd: missing gradient for " + name);
        const Tensor<float>& g = it->second;
        if (g.shape != p.shape) throw InvariantError("sgd: gradient shape mismatch for " + name);
        auto vit = velocity_.find(name);
        if (vit == velocity_.end())
            vit = velocity_.emplace(name, Tensor<float>(p.shape, 0.0f)).first;
        Tensor<float>& vel = vit->second;
        for (std::int64_t i = 0; i < p.numel(); ++i) {
            vel[i] = static_cast<float>(kMomentum * vel[i] + clip * g[i]);
            p[i] -= static_cast<float>(lr * vel[i]);
        }
        check_finite(p, "sgd_update");
    });
}

namespace {

struct StepLosses {
    double cls = 0, mse = 0, con = 0, total = 0;
};

// One optimizer step over one batch on a fresh tape.
StepLosses train_step(PhenoNet<float>& net, const TrainDataset& data,
                      const std::vector<std::size_t>& batch, const TrainConfig& cfg,
                      const AblationFlags& flags, double lr, SgdState& sgd, Rng& step_rng) {
    const auto& cfgm = net.cfg;
    const std::int64_t B = static_cast<std::int64_t>(batch.size());

    Tensor<float> images({B, cfgm.in_channels, cfgm.image_size, cfgm.image_size});
    Tensor<float> targets({B, cfgm.out_dim});
    std::vector<int> labels(static_cast<std::size_t>(B));
    const std::int64_t img_sz = cfgm.in_channels * cfgm.image_size * cfgm.image_size;
    for (std::int64_t i = 0; i < B; ++i) {
        const TrainSample& s = data.samples[batch[static_cast<std::size_t>(i)]];
        std::copy(s.image.data.begin(), s.image.data.end(), images.data.begin() + i * img_sz);
        std::copy(s.target.begin(), s.target.end(), targets.data.begin() + i * cfgm.out_dim);
        labels[static_cast<std::size_t>(i)] = s.label;
    }

    Tape<float> tape;
    auto pv = bind_params(tape, net, true);
    auto x = make_leaf(tape, std::move(images), false, "batch");
    auto z = make_leaf(tape, std::move(targets), false, "targets");
    auto [z_hat, logits] = forward(tape, x, net, pv, Mode::train, &step_rng);

    // every component is evaluated for the log; only active ones drive updates
    auto cls = loss_cls(tape, logits, labels);
    auto mse = loss_mse(tape, z_hat, z);
    auto con = loss_con(tape, z_hat, z, static_cast<float>(cfg.weights.tau),
                        cfg.weights.normalize_embeddings);
    auto total = loss_total(tape, flags.use_cls ? cls : Var<float>{nullptr, -1},
                            flags.use_mse ? mse : Var<float>{nullptr, -1},
                            flags.use_con ? con : Var<float>{nullptr, -1}, cfg.weights);

    tape.backward(total.id);
    std::map<std::string, Tensor<float>> grads;
    for (const auto& [name, var] : pv.vars) grads.emplace(name, tape.grad(var.id));
    sgd.step(net, grads, lr);

    StepLosses out;
    out.cls = cls.val()[0];
    out.mse = mse.val()[0];
    out.con = con.val()[0];
    out.total = total.val()[0];
    return out;
}

void run_epochs(PhenoNet<float>& net, const TrainDataset& data, const TrainConfig& cfg,
                const AblationFlags& flags, int epoch_begin, int epoch_end, const LogSink& sink,
                const LossWeights& weights_override, bool override_weights) {
    if (data.samples.empty()) throw InputError("training dataset is empty");
    if (data.target_dim != net.cfg.out_dim)
        throw InputError("regression target dim " + std::to_string(data.target_dim) +
                         " does not match model out_dim " + std::to_string(net.cfg.out_dim));
    if (!flags.use_cls && !flags.use_mse && !flags.use_con)
        throw InputError("no active objective");
    for (const auto& s : data.samples)
        if (s.label < 0 || s.label >= net.cfg.num_classes)
            throw InputError("sample label out of range for the model head");

    if (!flags.use_diffconv) {
        net.cfg.theta1 = 0.0;  // both branches degrade to standard convolution
        net.cfg.theta2 = 0.0;
    }

    TrainConfig effective = cfg;
    if (override_weights) effective.weights = weights_override;
    const auto stages = effective_stages(cfg);
    SgdState sgd;
    std::vector<std::size_t> order(data.samples.size());
    std::iota(order.begin(), order.end(), 0);

    for (int epoch = epoch_begin; epoch < epoch_end; ++epoch) {
        const auto t0 = std::chrono::steady_clock::now();
        const double lr = lr_schedule(epoch, stages);

        Rng shuffle_rng = Rng::derive(cfg.seed, 0x5A000000ULL + static_cast<std::uint64_t>(epoch));
        for (std::size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1], order[static_cast<std::size_t>(
                                        shuffle_rng.uniform_int(static_cast<std::int64_t>(i)))]);

        StepLosses sums;
        int steps = 0;
        for (std::size_t start = 0; start < order.size();
             start += static_cast<std::size_t>(cfg.batch_size)) {
            const std::size_t end =
                std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
            std::vector<std::size_t> batch(order.begin() + static_cast<std::ptrdiff_t>(start),
                                           order.begin() + static_cast<std::ptrdiff_t>(end));
            Rng step_rng = Rng::derive(cfg.seed,
                                       0xD0000000ULL + static_cast<std::uint64_t>(epoch) * 100000 +
                                           static_cast<std::uint64_t>(steps));
            const StepLosses losses =
                train_step(net, data, batch, effective, flags, lr, sgd, step_rng);
            sums.cls += losses.cls;
            sums.mse += losses.mse;
            sums.con += losses.con;
            sums.total += losses.total;
            ++steps;
        }

        if (sink) {
            EpochLog log;
            log.epoch = epoch;
            log.lr = lr;
            log.l_cls = sums.cls / steps;
            log.l_mse = sums.mse / steps;
            log.l_con = sums.con / steps;
            log.l_total = sums.total / steps;
            log.wall_ms = std::chrono::duration_cast<std::chrono::milliseconds>(
                              std::chrono::steady_clock::now() - t0)
                              .count();
            sink(log);
        }
    }
}

}  // namespace

void train_stage_mse(PhenoNet<float>& net, const TrainDataset& data, const TrainConfig& cfg,
                     const LogSink& sink) {
    cfg.validate();
    AblationFlags mse_only;
    mse_only.use_cls = false;
    mse_only.use_con = false;
    mse_only.use_mse = true;
    mse_only.use_diffconv = cfg.ablation.use_diffconv;
    LossWeights plain;  // raw MSE, unweighted
    plain.lambda1 = 0.0;
    plain.lambda2 = 1.0;
    plain.lambda3 = 0.0;
    plain.tau = cfg.weights.tau;
    plain.normalize_embeddings = cfg.weights.normalize_embeddings;
    run_epochs(net, data, cfg, mse_only, 0, cfg.warmup_epochs, sink, plain, true);
}

void train_joint(PhenoNet<float>& net, const TrainDataset& data, const TrainConfig& cfg,
                 const LogSink& sink) {
    cfg.validate();
    run_epochs(net, data, cfg, cfg.ablation, cfg.warmup_epochs, cfg.max_epochs, sink,
               cfg.weights, false);
}

void train_full(PhenoNet<float>& net, const TrainDataset& data, const TrainConfig& cfg,
                const LogSink& sink) {
    if (!cfg.ablation.use_mse) {
        // no regression warm-up without the regression objective
        TrainConfig adjusted = cfg;
        adjusted.warmup_epochs = 0;
        train_joint(net, data, adjusted, sink);
        return;
    }
    train_stage_mse(net, data, cfg, sink);
    train_joint(net, data, cfg, sink);
}

}  // namespace phenokit
