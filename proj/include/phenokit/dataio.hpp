#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "phenokit/profiles.hpp"
#include "phenokit/tensor.hpp"

namespace phenokit {

// Stacking order for multi-channel images.
inline const std::vector<std::string>& canonical_channels() {
    static const std::vector<std::string> names{"DNA", "ER", "RNA", "AGP", "Mito"};
    return names;
}

enum class Split { train, val, test };
std::string to_string(Split s);
Split split_from_string(const std::string& s);

struct IndexRecord {
    std::string plate, well, site, treatment;
    Role role = Role::treated;
    Split split = Split::train;
    std::map<std::string, std::string> channel_paths;  // channel name -> path
};

// index.csv: Plate,Well,Site,Treatment,Role,Split,DNA,ER,RNA,AGP,Mito with
// image paths relative to the index file. The treatment column may also be
// named pert_name.
std::vector<IndexRecord> load_index(const std::string& path);
void write_index(const std::string& path, const std::vector<IndexRecord>& records,
                 const std::vector<std::string>& channels = canonical_channels());

// Channels stacked in canonical order, bilinear resize to image_size, pixel
// values scaled to [0,1] by the format's max value.
Tensor<float> load_image_stack(const IndexRecord& record, int image_size);

// Deterministic lexicographic treatment -> dense index bijection.
struct LabelEncoder {
    std::vector<std::string> names;          // index -> treatment
    std::map<std::string, int> index_of;     // treatment -> index

    int size() const { return static_cast<int>(names.size()); }
    int encode(const std::string& treatment) const;
    const std::string& decode(int index) const;
};

LabelEncoder encode_labels(const std::vector<IndexRecord>& records);

// Per-treatment coordinate-wise median of the vectors in a CSV of rows
// treatment,g0000,... Every record's treatment must have a target.
std::map<std::string, std::vector<double>> load_regression_targets(
    const std::string& profile_csv, const std::vector<IndexRecord>& records);

void write_latents_csv(const std::string& path,
                       const std::map<std::string, std::vector<double>>& latents);

struct SyntheticSpec {
    int n_moa_groups = 4;
    int treatments_per_group = 5;
    int wells_per_treatment = 2;  // per plate
    int sites_per_well = 2;
    int control_wells_per_plate = 4;
    int plates = 2;
    int image_size = 32;
    int channels = 5;
    double noise_sigma = 0.02;
    double plate_offset_sigma = 0.15;
    std::uint64_t seed = 7;

    void validate() const;
    static SyntheticSpec from_json_file(const std::string& path);
    std::string control_label() const { return "DMSO"; }
    int latent_dim() const { return 8 * n_moa_groups; }
};

// Writes index.csv, annotations.csv, latents.csv and per-channel PNGs under
// out_dir. Every MoA group owns a latent direction; treatments perturb blob
// images along their group direction, plus per-plate additive offsets and
// pixel noise. Controls are the unperturbed baseline.
void gen_synthetic(const SyntheticSpec& spec, const std::string& out_dir);

}  // namespace phenokit
