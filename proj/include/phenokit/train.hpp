#pragma once

#include <functional>
#include <string>
#include <vector>

#include "phenokit/model.hpp"
#include "phenokit/objectives.hpp"

namespace phenokit {

// Piecewise-constant learning-rate table. Stage i covers epochs
// [previous threshold, until_epoch); the last threshold is max_epochs.
struct LrStage {
    int until_epoch;
    double rate;
};

double lr_schedule(int epoch, const std::vector<LrStage>& stages);

// The full-scale stage table: 2e-3 for 10 epochs, 1e-3 for 50, 5e-4 for 60,
// 1e-4 for 80.
std::vector<LrStage> full_scale_lr_stages();

struct AblationFlags {
    bool use_cls = true;
    bool use_mse = true;
    bool use_con = true;
    bool use_diffconv = true;
};

struct TrainConfig {
    int batch_size = 16;
    int max_epochs = 30;
    int warmup_epochs = 10;
    std::vector<LrStage> lr_stages;  // empty selects a scaled default
    LossWeights weights;
    std::uint64_t seed = 1;
    AblationFlags ablation;

    void validate() const;
    std::string to_json() const;
    static TrainConfig from_json(const std::string& text);
};

struct TrainSample {
    Tensor<float> image;
    int label = 0;
    std::vector<float> target;  // out_dim regression target
};

struct TrainDataset {
    std::vector<TrainSample> samples;
    int num_classes = 0;
    int target_dim = 0;
};

struct EpochLog {
    int epoch = 0;
    double lr = 0;
    double l_cls = 0, l_mse = 0, l_con = 0, l_total = 0;
    std::int64_t wall_ms = 0;
};

using LogSink = std::function<void(const EpochLog&)>;

std::string epoch_log_json(const EpochLog& log);

// SGD with momentum 0.9 and global-norm gradient clipping at 5.0.
class SgdState {
  public:
    void step(PhenoNet<float>& net, const std::map<std::string, Tensor<float>>& grads, double lr);

  private:
    std::map<std::string, Tensor<float>> velocity_;
};

// Regression warm-up: epochs [0, warmup_epochs) minimizing the MSE term only.
void train_stage_mse(PhenoNet<float>& net, const TrainDataset& data, const TrainConfig& cfg,
                     const LogSink& sink = {});

// Joint phase: epochs [warmup_epochs, max_epochs) on the weighted total loss
// with the configured ablation flags.
void train_joint(PhenoNet<float>& net, const TrainDataset& data, const TrainConfig& cfg,
                 const LogSink& sink = {});

// Warm-up followed by the joint phase.
void train_full(PhenoNet<float>& net, const TrainDataset& data, const TrainConfig& cfg,
                const LogSink& sink = {});

}  // namespace phenokit
