#include "phenokit/cli.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "phenokit/dataio.hpp"
#include "phenokit/profiles.hpp"

namespace fs = std::filesystem;

namespace phenokit {

namespace {

// write-to-temp-then-rename so partial output never lands under the real name
void atomic_write_text(const std::string& path, const std::string& text) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary);
        if (!f) throw InputError("cannot open for write: " + tmp);
        f.write(text.data(), static_cast<std::streamsize>(text.size()));
        if (!f) throw InputError("write failed: " + tmp);
    }
    std::error_code ec;
    fs::rename(tmp, path, ec);
    if (ec) throw InputError("cannot move " + tmp + " into place: " + ec.message());
}

void atomic_write_profile(const std::string& path, const ProfileTable& table) {
    const std::string tmp = path + ".tmp_profile";
    write_profile(tmp, table);
    std::error_code ec;
    if (fs::exists(tmp + ".json")) fs::rename(tmp + ".json", path + ".json", ec);
    fs::rename(tmp, path, ec);
    if (ec) throw InputError("cannot move profile into place: " + ec.message());
}

std::string slurp_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw InputError("cannot open: " + path);
    std::stringstream buf;
    buf << f.rdbuf();
    return buf.str();
}

}  // namespace

RunConfig RunConfig::from_json_file(const std::string& path) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(slurp_file(path));
    } catch (const InputError&) {
        throw;
    } catch (const std::exception& e) {
        throw InputError("bad JSON in " + path + ": " + e.what());
    }
    static const std::set<std::string> known{"model", "train", "pcs", "sphering", "metrics"};
    for (const auto& [key, value] : j.items())
        if (!known.count(key)) throw InputError("unknown config section: '" + key + "'");
    RunConfig cfg;
    if (j.contains("model")) cfg.model = PhenoNetConfig::from_json(j["model"].dump());
    if (j.contains("train")) cfg.train = TrainConfig::from_json(j["train"].dump());
    if (j.contains("pcs")) {
        for (const auto& [key, value] : j["pcs"].items())
            if (key != "alpha") throw InputError("unknown pcs key: '" + key + "'");
        if (j["pcs"].contains("alpha")) cfg.pcs_alpha = j["pcs"]["alpha"].get<double>();
    }
    if (j.contains("sphering")) {
        for (const auto& [key, value] : j["sphering"].items())
            if (key != "epsilon") throw InputError("unknown sphering key: '" + key + "'");
        if (j["sphering"].contains("epsilon"))
            cfg.sphering_epsilon = j["sphering"]["epsilon"].get<double>();
    }
    if (j.contains("metrics")) {
        static const std::set<std::string> mk{"top_frac", "recall_ks"};
        for (const auto& [key, value] : j["metrics"].items())
            if (!mk.count(key)) throw InputError("unknown metrics key: '" + key + "'");
        if (j["metrics"].contains("top_frac"))
            cfg.top_frac = j["metrics"]["top_frac"].get<double>();
        if (j["metrics"].contains("recall_ks"))
            cfg.recall_ks = j["metrics"]["recall_ks"].get<std::vector<int>>();
    }
    return cfg;
}

namespace {

TrainDataset build_dataset(const std::string& data_dir, const PhenoNetConfig& model_cfg,
                           const LabelEncoder& encoder) {
    const auto records = load_index((fs::path(data_dir) / "index.csv").string());
    const auto targets =
        load_regression_targets((fs::path(data_dir) / "latents.csv").string(), records);

    TrainDataset data;
    data.num_classes = encoder.size();
    for (const auto& rec : records) {
        if (rec.split != Split::train) continue;
        TrainSample s;
        s.image = load_image_stack(rec, model_cfg.image_size);
        if (s.image.dim(0) != model_cfg.in_channels)
            throw InputError("dataset has " + std::to_string(s.image.dim(0)) +
                             " channels, model expects " + std::to_string(model_cfg.in_channels));
        s.label = encoder.encode(rec.treatment);
        const auto& t = targets.at(rec.treatment);
        if (data.target_dim == 0) data.target_dim = static_cast<int>(t.size());
        s.target.assign(t.begin(), t.end());
        data.samples.push_back(std::move(s));
    }
    if (data.samples.empty()) throw InputError("no training rows in " + data_dir);
    return data;
}

int cmd_synth(const std::string& spec_path, const std::string& out_dir) {
    SyntheticSpec spec;
    if (!spec_path.empty()) spec = SyntheticSpec::from_json_file(spec_path);
    gen_synthetic(spec, out_dir);
    std::cout << "dataset written to " << out_dir << "\n";
    return 0;
}

int cmd_train(const std::string& config_path, const std::string& data_dir,
              const std::string& out_ckpt, const std::string& log_path, bool no_cls, bool no_mse,
              bool no_con, bool no_diffconv) {
    RunConfig cfg;
    if (!config_path.empty()) cfg = RunConfig::from_json_file(config_path);
    if (no_cls) cfg.train.ablation.use_cls = false;
    if (no_mse) cfg.train.ablation.use_mse = false;
    if (no_con) cfg.train.ablation.use_con = false;
    if (no_diffconv) cfg.train.ablation.use_diffconv = false;

    const auto records = load_index((fs::path(data_dir) / "index.csv").string());
    const auto encoder = encode_labels(records);
    if (cfg.model.num_classes == 0) cfg.model.num_classes = encoder.size();

    const auto data = build_dataset(data_dir, cfg.model, encoder);
    if (data.target_dim != cfg.model.out_dim)
        throw InputError("regression targets have dim " + std::to_string(data.target_dim) +
                         "; set model.out_dim to match");

    auto net = PhenoNet<float>::init(cfg.model);
    std::ofstream log_file;
    if (!log_path.empty()) {
        log_file.open(log_path);
        if (!log_file) throw InputError("cannot open for write: " + log_path);
    }
    std::ostream& log_out = log_path.empty() ? std::cout : log_file;
    train_full(net, data, cfg.train,
               [&log_out](const EpochLog& log) { log_out << epoch_log_json(log) << "\n"; });

    const std::string tmp = out_ckpt + ".tmp";
    save_checkpoint(tmp, net);
    std::error_code ec;
    fs::rename(tmp, out_ckpt, ec);
    if (ec) throw InputError("cannot move checkpoint into place: " + ec.message());
    return 0;
}

int cmd_embed(const std::string& ckpt_path, const std::string& data_dir,
              const std::string& out_path) {
    auto net = load_checkpoint(ckpt_path);
    const auto records = load_index((fs::path(data_dir) / "index.csv").string());

    ProfileTable table;
    table.level = Level::site;
    table.dim = net.cfg.out_dim;
    table.rows.resize(records.size());

    // embedding workers share the frozen net; each chunk runs its own tape
    const std::int64_t chunk = 8;
    const std::int64_t n_chunks =
        (static_cast<std::int64_t>(records.size()) + chunk - 1) / chunk;
    parallel_for(n_chunks, [&](std::int64_t ci) {
        const std::size_t lo = static_cast<std::size_t>(ci * chunk);
        const std::size_t hi =
            std::min(records.size(), static_cast<std::size_t>((ci + 1) * chunk));
        const std::int64_t B = static_cast<std::int64_t>(hi - lo);
        Tensor<float> batch({B, net.cfg.in_channels, net.cfg.image_size, net.cfg.image_size});
        const std::int64_t img_sz =
            net.cfg.in_channels * net.cfg.image_size * net.cfg.image_size;
        for (std::size_t i = lo; i < hi; ++i) {
            const auto img = load_image_stack(records[i], net.cfg.image_size);
            if (img.dim(0) != net.cfg.in_channels)
                throw InputError("record channel count does not match the checkpoint");
            std::copy(img.data.begin(), img.data.end(),
                      batch.data.begin() + static_cast<std::int64_t>(i - lo) * img_sz);
        }
        Tape<float> tape;
        auto pv = bind_params(tape, net, false);
        auto x = make_leaf(tape, std::move(batch), false, "embed_batch");
        auto h2 = gradient_encoder_forward(tape, x, net, pv, Mode::eval);
        auto h6 = transformer_forward(tape, h2, net, pv, Mode::eval, nullptr);
        auto z = project(tape, h6, net, pv, Mode::eval, nullptr);
        for (std::size_t i = lo; i < hi; ++i) {
            ProfileRow row;
            row.plate = records[i].plate;
            row.well = records[i].well;
            row.site = records[i].site;
            row.treatment = records[i].treatment;
            row.role = records[i].role;
            row.vec.resize(static_cast<std::size_t>(net.cfg.out_dim));
            for (int d = 0; d < net.cfg.out_dim; ++d)
                row.vec[static_cast<std::size_t>(d)] =
                    z.val()(static_cast<std::int64_t>(i - lo), d);
            table.rows[i] = std::move(row);
        }
    });
    table.validate();
    atomic_write_profile(out_path, table);
    return 0;
}

// site PCs -> well aggregation -> sphering fit on control wells -> treatment
// aggregation. Well-level output (when requested) is post-PCs, pre-sphering.
int cmd_correct(const std::string& in_path, double alpha, double epsilon,
                const std::string& out_path, const std::string& out_wells) {
    if (!(alpha >= 0.0 && alpha <= 1.0)) throw InputError("correct: alpha out of [0,1]");
    ProfileTable table = read_profile(in_path);
    if (table.level == Level::treatment)
        throw InputError("correct: input must be site- or well-level profiles");

    ProfileTable corrected = pcs_apply(table, alpha);
    ProfileTable wells =
        corrected.level == Level::site ? aggregate(corrected, Level::well) : corrected;
    if (!out_wells.empty()) atomic_write_profile(out_wells, wells);

    std::vector<std::vector<double>> reference;
    for (const auto& r : wells.rows)
        if (r.role == Role::control) reference.push_back(r.vec);
    if (reference.size() < 2)
        throw InputError("correct: need at least 2 control wells to fit sphering");
    const Whitening w = sphering_fit(reference, epsilon);
    const ProfileTable sphered = sphering_apply(wells, w);
    atomic_write_profile(out_path, aggregate(sphered, Level::treatment));
    return 0;
}

int cmd_evaluate(const std::string& profiles_path, const std::string& annotations_path,
                 const std::string& out_path, const std::string& wells_path, double top_frac,
                 const std::vector<int>& recall_ks) {
    const ProfileTable table = read_profile(profiles_path);
    const AnnotationMap annotations = AnnotationMap::read_csv(annotations_path);
    EvalReport report = evaluate_profiles(table, annotations, top_frac, recall_ks);
    if (!wells_path.empty()) report.imad = imad(read_profile(wells_path));
    atomic_write_text(out_path, report.to_json() + "\n");
    return 0;
}

int cmd_imad(const std::string& wells_path, const std::string& out_path) {
    const double value = imad(read_profile(wells_path));
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.9g\n", value);
    atomic_write_text(out_path, buf);
    std::cout << buf;
    return 0;
}

int cmd_report(const std::string& report_path, const std::string& out_path) {
    const EvalReport report = EvalReport::read(report_path);
    atomic_write_text(out_path, emit_report_svg(report));
    return 0;
}

}  // namespace

std::string emit_report_svg(const EvalReport& report) {
    struct Bar {
        std::string label;
        double value;
    };
    std::vector<Bar> bars{{"FoE", report.foe}, {"MAP", report.map}};
    for (const auto& [k, v] : report.recall_at)
        bars.push_back({"recall@" + std::to_string(k), v});
    if (report.imad.has_value()) bars.push_back({"IMAD", *report.imad});

    double max_value = 0;
    for (const auto& b : bars) max_value = std::max(max_value, b.value);
    if (max_value <= 0) max_value = 1.0;

    const int bar_w = 64, gap = 28, plot_h = 200, label_h = 40, margin = 24;
    const int width = margin * 2 + static_cast<int>(bars.size()) * (bar_w + gap) - gap;
    const int height = plot_h + label_h + margin * 2;

    std::ostringstream svg;
    svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\""
        << height << "\" viewBox=\"0 0 " << width << " " << height << "\">\n";
    svg << "  <rect width=\"" << width << "\" height=\"" << height << "\" fill=\"white\"/>\n";
    char buf[64];
    for (std::size_t i = 0; i < bars.size(); ++i) {
        const int x = margin + static_cast<int>(i) * (bar_w + gap);
        const double frac = bars[i].value / max_value;
        const int h = std::max(1, static_cast<int>(std::lround(frac * plot_h)));
        const int y = margin + plot_h - h;
        svg << "  <rect x=\"" << x << "\" y=\"" << y << "\" width=\"" << bar_w << "\" height=\""
            << h << "\" fill=\"#4878a8\"/>\n";
        std::snprintf(buf, sizeof(buf), "%.3f", bars[i].value);
        svg << "  <text x=\"" << x + bar_w / 2 << "\" y=\"" << y - 6
            << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">" << buf
            << "</text>\n";
        svg << "  <text x=\"" << x + bar_w / 2 << "\" y=\"" << margin + plot_h + 18
            << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">"
            << bars[i].label << "</text>\n";
    }
    svg << "</svg>\n";
    return svg.str();
}

int run_command(const std::vector<std::string>& args) {
    CLI::App app{"end-to-end phenotypic profiling toolkit"};
    app.require_subcommand(1);

    std::string spec_path, out_dir;
    auto* synth = app.add_subcommand("synth", "generate a synthetic screening dataset");
    synth->add_option("--spec", spec_path, "synthetic spec JSON (defaults when omitted)");
    synth->add_option("--out", out_dir, "output dataset directory")->required();

    std::string config_path, data_dir, ckpt_out, log_path;
    bool no_cls = false, no_mse = false, no_con = false, no_diffconv = false;
    auto* train = app.add_subcommand("train", "stepwise training: regression warm-up then joint");
    train->add_option("--config", config_path, "run config JSON (defaults when omitted)");
    train->add_option("--data", data_dir, "dataset directory with index.csv and latents.csv")
        ->required();
    train->add_option("--out", ckpt_out, "output checkpoint path")->required();
    train->add_option("--log", log_path, "training log JSONL path (default: stdout)");
    train->add_flag("--no-cls", no_cls, "drop the classification objective");
    train->add_flag("--no-mse", no_mse, "drop the regression objective");
    train->add_flag("--no-con", no_con, "drop the contrastive objective");
    train->add_flag("--no-diffconv", no_diffconv,
                    "replace difference convolution with standard convolution");

    std::string ckpt_path, embed_out;
    auto* embed = app.add_subcommand("embed", "site-level profiles from a checkpoint");
    embed->add_option("--ckpt", ckpt_path, "checkpoint path")->required();
    embed->add_option("--data", data_dir, "dataset directory")->required();
    embed->add_option("--out", embed_out, "output site profile table (.csv or .ptns)")
        ->required();

    std::string correct_in, correct_out, wells_out, correct_cfg;
    double alpha = 0.7, epsilon = -1.0;
    auto* correct = app.add_subcommand(
        "correct", "phenotype correction, well aggregation, sphering, treatment aggregation");
    correct->add_option("--in", correct_in, "site- or well-level profile table")->required();
    correct->add_option("--config", correct_cfg, "run config JSON supplying alpha/epsilon");
    auto* alpha_opt =
        correct->add_option("--alpha", alpha, "control-mean weight in [0,1] (default 0.7)");
    auto* eps_opt = correct->add_option(
        "--epsilon", epsilon, "sphering shrinkage (default: 1e-3 x mean eigenvalue)");
    correct->add_option("--out", correct_out, "output treatment-level table")->required();
    correct->add_option("--out-wells", wells_out, "also write the post-correction well table");

    std::string profiles_path, annotations_path, report_out, wells_in, eval_cfg;
    double top_frac = 0.01;
    auto* evaluate = app.add_subcommand("evaluate", "biological matching metrics");
    evaluate->add_option("--profiles", profiles_path, "treatment-level profile table")
        ->required();
    evaluate->add_option("--annotations", annotations_path, "treatment,annotation CSV")
        ->required();
    evaluate->add_option("--out", report_out, "output report JSON")->required();
    evaluate->add_option("--wells", wells_in, "well table for the IMAD field (optional)");
    evaluate->add_option("--config", eval_cfg, "run config JSON supplying the metric flags");
    auto* top_frac_opt = evaluate->add_option(
        "--top-frac", top_frac, "enrichment threshold fraction (default 0.01)");

    std::string imad_wells, imad_out;
    auto* imad_cmd = app.add_subcommand("imad", "inverse median absolute deviation of wells");
    imad_cmd->add_option("--wells", imad_wells, "well-level profile table")->required();
    imad_cmd->add_option("--out", imad_out, "output path for the scalar")->required();

    std::string report_in, svg_out;
    auto* report = app.add_subcommand("report", "render a report as an SVG bar chart");
    report->add_option("--report", report_in, "report JSON path")->required();
    report->add_option("--out", svg_out, "output SVG path")->required();

    std::vector<char*> argv;
    std::vector<std::string> storage = args;
    std::string prog = "phenokit";
    argv.push_back(prog.data());
    for (auto& a : storage) argv.push_back(a.data());

    try {
        app.parse(static_cast<int>(argv.size()), argv.data());
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);  // prints help, exit 0
    } catch (const CLI::ParseError& e) {
        std::cerr << e.what() << "\n";
        return 2;
    }

    try {
        if (synth->parsed()) return cmd_synth(spec_path, out_dir);
        if (train->parsed())
            return cmd_train(config_path, data_dir, ckpt_out, log_path, no_cls, no_mse, no_con,
                             no_diffconv);
        if (embed->parsed()) return cmd_embed(ckpt_path, data_dir, embed_out);
        if (correct->parsed()) {
            if (!correct_cfg.empty()) {
                const RunConfig cfg = RunConfig::from_json_file(correct_cfg);
                if (alpha_opt->count() == 0) alpha = cfg.pcs_alpha;
                if (eps_opt->count() == 0) epsilon = cfg.sphering_epsilon;
            }
            return cmd_correct(correct_in, alpha, epsilon, correct_out, wells_out);
        }
        if (evaluate->parsed()) {
            std::vector<int> recall_ks{1, 3, 5, 10};
            if (!eval_cfg.empty()) {
                const RunConfig cfg = RunConfig::from_json_file(eval_cfg);
                if (top_frac_opt->count() == 0) top_frac = cfg.top_frac;
                recall_ks = cfg.recall_ks;
            }
            return cmd_evaluate(profiles_path, annotations_path, report_out, wells_in, top_frac,
                                recall_ks);
        }
        if (imad_cmd->parsed()) return cmd_imad(imad_wells, imad_out);
        if (report->parsed()) return cmd_report(report_in, svg_out);
    } catch (const InputError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const InvariantError& e) {
        std::cerr << "internal error: " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "internal error: " << e.what() << "\n";
        return 3;
    }
    return 2;
}

}  // namespace phenokit
