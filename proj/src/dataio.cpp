#include "phenokit/dataio.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "phenokit/evalmetrics.hpp"
#include "phenokit/image.hpp"
#include "phenokit/rng.hpp"

namespace fs = std::filesystem;

namespace phenokit {

std::string to_string(Split s) {
    switch (s) {
        case Split::train: return "train";
        case Split::val: return "val";
        case Split::test: return "test";
    }
    return "?";
}

Split split_from_string(const std::string& s) {
    if (s == "train") return Split::train;
    if (s == "val") return Split::val;
    if (s == "test") return Split::test;
    throw InputError("unknown split: '" + s + "'");
}

namespace {

std::vector<std::string> split_line(const std::string& line) {
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

}  // namespace

std::vector<IndexRecord> load_index(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw InputError("cannot open: " + path);
    std::string line;
    if (!std::getline(f, line)) throw InputError("empty index file: " + path);
    const auto header = split_line(line);

    auto col = [&](const std::string& name) -> int {
        const auto it = std::find(header.begin(), header.end(), name);
        return it == header.end() ? -1 : static_cast<int>(it - header.begin());
    };
    const int c_plate = col("Plate"), c_well = col("Well"), c_site = col("Site");
    int c_treat = col("Treatment");
    if (c_treat < 0) c_treat = col("pert_name");
    const int c_role = col("Role"), c_split = col("Split");
    if (c_plate < 0 || c_well < 0 || c_site < 0 || c_treat < 0 || c_role < 0 || c_split < 0)
        throw InputError("index missing required column (Plate/Well/Site/Treatment|pert_name/"
                         "Role/Split): " + path);

    std::vector<std::pair<std::string, int>> channel_cols;
    for (const auto& name : canonical_channels()) {
        const int c = col(name);
        if (c >= 0) channel_cols.emplace_back(name, c);
    }
    if (channel_cols.empty()) throw InputError("index has no channel columns: " + path);

    const fs::path base = fs::path(path).parent_path();
    std::vector<IndexRecord> records;
    std::set<std::string> keys;
    std::map<std::string, Role> role_by_treatment;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        const auto cells = split_line(line);
        if (cells.size() < header.size())
            throw InputError("short index row in " + path + ": " + line);
        IndexRecord r;
        r.plate = cells[c_plate];
        r.well = cells[c_well];
        r.site = cells[c_site];
        r.treatment = cells[c_treat];
        r.role = role_from_string(cells[c_role]);
        r.split = split_from_string(cells[c_split]);
        for (const auto& [name, c] : channel_cols)
            r.channel_paths[name] = (base / cells[c]).string();
        const std::string key = r.plate + "\x1f" + r.well + "\x1f" + r.site;
        if (!keys.insert(key).second)
            throw InputError("duplicate (plate,well,site) in index: " + r.plate + "/" + r.well +
                             "/" + r.site);
        const auto it = role_by_treatment.find(r.treatment);
        if (it == role_by_treatment.end())
            role_by_treatment[r.treatment] = r.role;
        else if (it->second != r.role)
            throw InputError("treatment '" + r.treatment + "' appears with both roles in " + path);
        records.push_back(std::move(r));
    }
    if (records.empty()) throw InputError("index has no data rows: " + path);
    return records;
}

void write_index(const std::string& path, const std::vector<IndexRecord>& records,
                 const std::vector<std::string>& channels) {
    std::ofstream f(path);
    if (!f) throw InputError("cannot open for write: " + path);
    f << "Plate,Well,Site,Treatment,Role,Split";
    for (const auto& c : channels) f << "," << c;
    f << "\n";
    const fs::path base = fs::path(path).parent_path();
    for (const auto& r : records) {
        f << r.plate << "," << r.well << "," << r.site << "," << r.treatment << ","
          << to_string(r.role) << "," << to_string(r.split);
        for (const auto& c : channels) {
            const auto it = r.channel_paths.find(c);
            if (it == r.channel_paths.end())
                throw InputError("record missing channel " + c + " for well " + r.well);
            f << "," << fs::relative(it->second, base).generic_string();
        }
        f << "\n";
    }
}

Tensor<float> load_image_stack(const IndexRecord& record, int image_size) {
    if (image_size < 1) throw InputError("load_image_stack: bad image size");
    std::vector<std::string> present;
    for (const auto& name : canonical_channels())
        if (record.channel_paths.count(name)) present.push_back(name);
    if (present.empty()) throw InputError("record has no channels");

    Tensor<float> out({static_cast<std::int64_t>(present.size()), image_size, image_size});
    const std::int64_t plane = static_cast<std::int64_t>(image_size) * image_size;
    for (std::size_t c = 0; c < present.size(); ++c) {
        const std::string& file = record.channel_paths.at(present[c]);
        const GrayImage img = png_read_gray(file);
        const float inv_max = 1.0f / static_cast<float>(img.max_value());
        std::vector<float> plane_f(img.pixels.size());
        for (std::size_t i = 0; i < img.pixels.size(); ++i)
            plane_f[i] = static_cast<float>(img.pixels[i]) * inv_max;
        const auto resized =
            resize_bilinear(plane_f, img.width, img.height, image_size, image_size);
        std::copy(resized.begin(), resized.end(),
                  out.data.begin() + static_cast<std::int64_t>(c) * plane);
    }
    check_finite(out, "load_image_stack");
    return out;
}

int LabelEncoder::encode(const std::string& treatment) const {
    const auto it = index_of.find(treatment);
    if (it == index_of.end()) throw InputError("unknown treatment label: '" + treatment + "'");
    return it->second;
}

const std::string& LabelEncoder::decode(int index) const {
    if (index < 0 || index >= size())
        throw InputError("label index out of range: " + std::to_string(index));
    return names[static_cast<std::size_t>(index)];
}

LabelEncoder encode_labels(const std::vector<IndexRecord>& records) {
    if (records.empty()) throw InputError("encode_labels: no records");
    std::set<std::string> distinct;
    for (const auto& r : records) distinct.insert(r.treatment);
    LabelEncoder enc;
    enc.names.assign(distinct.begin(), distinct.end());  // lexicographic via set order
    for (int i = 0; i < enc.size(); ++i) enc.index_of[enc.names[static_cast<std::size_t>(i)]] = i;
    return enc;
}

std::map<std::string, std::vector<double>> load_regression_targets(
    const std::string& profile_csv, const std::vector<IndexRecord>& records) {
    std::ifstream f(profile_csv);
    if (!f) throw InputError("cannot open: " + profile_csv);
    std::string line;
    std::map<std::string, std::vector<std::vector<double>>> samples;
    bool first = true;
    std::size_t width = 0;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        const auto cells = split_line(line);
        if (first && cells.size() >= 2 && cells[0] == "treatment") {
            first = false;
            continue;
        }
        first = false;
        if (cells.size() < 2) throw InputError("bad target row in " + profile_csv);
        if (width == 0) width = cells.size() - 1;
        if (cells.size() - 1 != width)
            throw InputError("inconsistent target width in " + profile_csv);
        std::vector<double> vec(width);
        for (std::size_t i = 0; i < width; ++i) {
            try {
                vec[i] = std::stod(cells[i + 1]);
            } catch (const std::exception&) {
                throw InputError("bad scalar in " + profile_csv + ": '" + cells[i + 1] + "'");
            }
        }
        samples[cells[0]].push_back(std::move(vec));
    }
    if (samples.empty()) throw InputError("no target rows in " + profile_csv);

    std::map<std::string, std::vector<double>> medians;
    for (auto& [treatment, vecs] : samples) {
        std::vector<double> med(width);
        std::vector<double> column(vecs.size());
        for (std::size_t i = 0; i < width; ++i) {
            for (std::size_t r = 0; r < vecs.size(); ++r) column[r] = vecs[r][i];
            std::sort(column.begin(), column.end());
            const std::size_t n = column.size();
            med[i] = (n % 2 == 1) ? column[n / 2] : 0.5 * (column[n / 2 - 1] + column[n / 2]);
        }
        medians[treatment] = std::move(med);
    }
    for (const auto& r : records)
        if (!medians.count(r.treatment))
            throw InputError("treatment '" + r.treatment + "' has no profile in " + profile_csv);
    return medians;
}

void write_latents_csv(const std::string& path,
                       const std::map<std::string, std::vector<double>>& latents) {
    std::ofstream f(path);
    if (!f) throw InputError("cannot open for write: " + path);
    const std::size_t width = latents.begin()->second.size();
    f << "treatment";
    for (std::size_t i = 0; i < width; ++i) {
        char buf[32];
        std::snprintf(buf, sizeof(buf), ",g%04u", static_cast<unsigned>(i));
        f << buf;
    }
    f << "\n";
    for (const auto& [treatment, vec] : latents) {
        f << treatment;
        char buf[32];
        for (double v : vec) {
            std::snprintf(buf, sizeof(buf), ",%.9g", v);
            f << buf;
        }
        f << "\n";
    }
}

void SyntheticSpec::validate() const {
    if (n_moa_groups < 1 || treatments_per_group < 1 || wells_per_treatment < 1 ||
        sites_per_well < 1 || control_wells_per_plate < 1 || plates < 1 || image_size < 4)
        throw InputError("synthetic spec: all counts must be >= 1 (image_size >= 4)");
    if (channels < 1 || channels > static_cast<int>(canonical_channels().size()))
        throw InputError("synthetic spec: channels must be in [1,5]");
    if (noise_sigma < 0 || plate_offset_sigma < 0)
        throw InputError("synthetic spec: sigmas must be >= 0");
}

SyntheticSpec SyntheticSpec::from_json_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw InputError("cannot open: " + path);
    nlohmann::json j;
    try {
        f >> j;
    } catch (const std::exception& e) {
        throw InputError("bad JSON in " + path + ": " + e.what());
    }
    SyntheticSpec spec;
    const std::set<std::string> known{"n_moa_groups",   "treatments_per_group",
                                      "wells_per_treatment", "sites_per_well",
                                      "control_wells_per_plate", "plates",
                                      "image_size",     "channels",
                                      "noise_sigma",    "plate_offset_sigma",
                                      "seed"};
    for (const auto& [key, value] : j.items())
        if (!known.count(key)) throw InputError("unknown key in synthetic spec: '" + key + "'");
    if (j.contains("n_moa_groups")) spec.n_moa_groups = j["n_moa_groups"].get<int>();
    if (j.contains("treatments_per_group"))
        spec.treatments_per_group = j["treatments_per_group"].get<int>();
    if (j.contains("wells_per_treatment"))
        spec.wells_per_treatment = j["wells_per_treatment"].get<int>();
    if (j.contains("sites_per_well")) spec.sites_per_well = j["sites_per_well"].get<int>();
    if (j.contains("control_wells_per_plate"))
        spec.control_wells_per_plate = j["control_wells_per_plate"].get<int>();
    if (j.contains("plates")) spec.plates = j["plates"].get<int>();
    if (j.contains("image_size")) spec.image_size = j["image_size"].get<int>();
    if (j.contains("channels")) spec.channels = j["channels"].get<int>();
    if (j.contains("noise_sigma")) spec.noise_sigma = j["noise_sigma"].get<double>();
    if (j.contains("plate_offset_sigma"))
        spec.plate_offset_sigma = j["plate_offset_sigma"].get<double>();
    if (j.contains("seed")) spec.seed = j["seed"].get<std::uint64_t>();
    spec.validate();
    return spec;
}

namespace {

struct LatentPattern {
    int channel;
    double cx, cy, sigma, amplitude;
};

double gauss_bump(double x, double y, double cx, double cy, double sigma) {
    const double dx = x - cx, dy = y - cy;
    return std::exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma));
}

}  // namespace

void gen_synthetic(const SyntheticSpec& spec, const std::string& out_dir) {
    spec.validate();
    std::error_code ec;
    fs::create_directories(fs::path(out_dir) / "images", ec);
    if (ec) throw InputError("cannot create output dir: " + out_dir + " (" + ec.message() + ")");

    const int L = spec.latent_dim();
    const int n_treatments = spec.n_moa_groups * spec.treatments_per_group;
    const int S = spec.image_size;

    // group directions: orthonormalized Gaussian draws
    Rng dir_rng = Rng::derive(spec.seed, 1);
    std::vector<std::vector<double>> dirs(spec.n_moa_groups, std::vector<double>(L));
    for (auto& d : dirs)
        for (auto& v : d) v = dir_rng.normal();
    for (int k = 0; k < spec.n_moa_groups; ++k) {
        for (int prev = 0; prev < k; ++prev) {
            double proj = 0;
            for (int i = 0; i < L; ++i) proj += dirs[k][i] * dirs[prev][i];
            for (int i = 0; i < L; ++i) dirs[k][i] -= proj * dirs[prev][i];
        }
        double norm = 0;
        for (double v : dirs[k]) norm += v * v;
        norm = std::sqrt(norm);
        for (auto& v : dirs[k]) v /= norm;
    }

    // treatment latents: group direction plus a small within-group jitter
    Rng lat_rng = Rng::derive(spec.seed, 2);
    const double jitter = std::sqrt(0.1 / L);
    std::map<std::string, std::vector<double>> latents;
    std::map<std::string, int> group_of;
    AnnotationMap annotations;
    std::vector<std::string> treatment_names;
    for (int t = 0; t < n_treatments; ++t) {
        char name[16];
        std::snprintf(name, sizeof(name), "T%03d", t + 1);
        const int g = t / spec.treatments_per_group;
        std::vector<double> z(dirs[g]);
        for (auto& v : z) v += jitter * lat_rng.normal();
        latents[name] = std::move(z);
        group_of[name] = g;
        annotations.entries[name] = {"G" + std::to_string(g + 1)};
        treatment_names.push_back(name);
    }
    latents[spec.control_label()] = std::vector<double>(L, 0.0);

    // spatial patterns: one bump per latent dimension on its channel,
    // rendered once up front
    Rng pat_rng = Rng::derive(spec.seed, 3);
    std::vector<LatentPattern> patterns(static_cast<std::size_t>(L));
    std::vector<std::vector<double>> pattern_planes(static_cast<std::size_t>(L));
    std::vector<double> base_plane(static_cast<std::size_t>(S) * S);
    for (int y = 0; y < S; ++y)
        for (int x = 0; x < S; ++x)
            base_plane[static_cast<std::size_t>(y) * S + x] =
                0.25 + 0.3 * gauss_bump((x + 0.5) / S, (y + 0.5) / S, 0.5, 0.5, 0.35);
    for (int d = 0; d < L; ++d) {
        patterns[d].channel = d % spec.channels;
        patterns[d].cx = pat_rng.uniform(0.2, 0.8);
        patterns[d].cy = pat_rng.uniform(0.2, 0.8);
        patterns[d].sigma = pat_rng.uniform(0.10, 0.25);
        patterns[d].amplitude = (pat_rng.bernoulli(0.5) ? 1.0 : -1.0) * 0.5;
        auto& plane = pattern_planes[d];
        plane.resize(static_cast<std::size_t>(S) * S);
        for (int y = 0; y < S; ++y)
            for (int x = 0; x < S; ++x)
                plane[static_cast<std::size_t>(y) * S + x] =
                    patterns[d].amplitude * gauss_bump((x + 0.5) / S, (y + 0.5) / S,
                                                       patterns[d].cx, patterns[d].cy,
                                                       patterns[d].sigma);
    }

    // per-plate per-channel additive offsets: the synthetic batch effect
    Rng plate_rng = Rng::derive(spec.seed, 4);
    std::vector<std::vector<double>> plate_offsets(
        static_cast<std::size_t>(spec.plates), std::vector<double>(spec.channels));
    for (auto& row : plate_offsets)
        for (auto& v : row) v = plate_rng.normal(0.0, spec.plate_offset_sigma);

    const std::vector<std::string> channels(canonical_channels().begin(),
                                            canonical_channels().begin() + spec.channels);

    std::vector<IndexRecord> records;
    std::uint64_t image_counter = 0;
    for (int p = 0; p < spec.plates; ++p) {
        const std::string plate = "P" + std::to_string(p + 1);
        int well_counter = 0;
        auto emit_well = [&](const std::string& treatment, Role role) {
            char well[16];
            std::snprintf(well, sizeof(well), "w%03d", ++well_counter);
            const auto& z = latents.at(treatment);
            for (int s = 0; s < spec.sites_per_well; ++s) {
                const std::string site = "s" + std::to_string(s + 1);
                IndexRecord rec;
                rec.plate = plate;
                rec.well = well;
                rec.site = site;
                rec.treatment = treatment;
                rec.role = role;
                rec.split = Split::train;
                Rng noise_rng = Rng::derive(spec.seed, 1000 + image_counter);
                ++image_counter;
                for (int c = 0; c < spec.channels; ++c) {
                    GrayImage img;
                    img.width = S;
                    img.height = S;
                    img.bit_depth = 16;
                    img.pixels.resize(static_cast<std::size_t>(S) * S);
                    for (std::size_t i = 0; i < img.pixels.size(); ++i) {
                        double v = base_plane[i];
                        for (int d = c; d < L; d += spec.channels)
                            v += z[d] * pattern_planes[d][i];
                        v += plate_offsets[p][c];
                        if (spec.noise_sigma > 0) v += noise_rng.normal(0.0, spec.noise_sigma);
                        v = std::min(1.0, std::max(0.0, v));
                        img.pixels[i] = static_cast<std::uint16_t>(std::lround(v * 65535.0));
                    }
                    const std::string file =
                        plate + "_" + well + "_" + site + "_" + channels[c] + ".png";
                    const std::string full = (fs::path(out_dir) / "images" / file).string();
                    png_write_gray(full, img);
                    rec.channel_paths[channels[c]] = full;
                }
                records.push_back(std::move(rec));
            }
        };
        for (const auto& treatment : treatment_names)
            for (int w = 0; w < spec.wells_per_treatment; ++w) emit_well(treatment, Role::treated);
        for (int w = 0; w < spec.control_wells_per_plate; ++w)
            emit_well(spec.control_label(), Role::control);
    }

    write_index((fs::path(out_dir) / "index.csv").string(), records, channels);
    annotations.write_csv((fs::path(out_dir) / "annotations.csv").string());
    write_latents_csv((fs::path(out_dir) / "latents.csv").string(), latents);
}

}  // namespace phenokit
