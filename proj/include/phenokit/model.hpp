#pragma once

#include <functional>
#include <map>
#include <string>
#include <utility>

#include "phenokit/ops.hpp"

namespace phenokit {

enum class Mode { train, eval };

struct PhenoNetConfig {
    int in_channels = 5;
    int image_size = 32;    // 448 at full scale
    int feat_dim = 128;     // 2048 at full scale
    int out_dim = 32;       // 672 at full scale
    int num_classes = 0;
    int num_heads = 4;
    int ffn_hidden = 256;
    double dropout = 0.1;
    int residual_depth = 2;
    int attn_tokens = 0;    // 0 selects num_heads * 4
    double theta1 = 0.7;
    double theta2 = 0.3;
    std::uint64_t seed = 0x5eed;

    int tokens() const { return attn_tokens > 0 ? attn_tokens : num_heads * 4; }
    int token_dim() const { return feat_dim / tokens(); }
    int branch_channels() const { return in_channels * 4; }
    int mlp_hidden() const { return in_channels * 8; }
    int block_width(int i) const;  // residual widths ramp up to feat_dim

    void validate() const;
    std::string to_json() const;
    static PhenoNetConfig from_json(const std::string& text);
};

template <typename T>
struct ConvBn {
    Tensor<T> weight;
    Tensor<T> gain, bias;
    BatchNormState<T> state;
};

template <typename T>
struct ResidualBlockParams {
    ConvBn<T> conv1;  // 3x3, stride 2
    ConvBn<T> conv2;  // 3x3, stride 1
    ConvBn<T> skip;   // 1x1, stride 2
};

template <typename T>
struct GradientEncoderParams {
    Tensor<T> dg_weight, sg_weight;  // difference-convolution kernels
    Tensor<T> dg_gain, dg_bias, sg_gain, sg_bias;
    BatchNormState<T> dg_state, sg_state;
    Tensor<T> mlp_weight, mlp_bias;  // 1x1 conv over the concatenated branches
    Tensor<T> mlp_gain, mlp_bn_bias;
    BatchNormState<T> mlp_state;
    std::vector<ResidualBlockParams<T>> blocks;
};

template <typename T>
struct TransformerParams {
    Tensor<T> wq, bq, wk, bk, wv, bv, wo, bo;
    Tensor<T> ffn_w1, ffn_b1, ffn_w2, ffn_b2;
    Tensor<T> ln1_gain, ln1_bias, ln2_gain, ln2_bias;
};

template <typename T>
struct ProjectionParams {
    Tensor<T> w3, b3;
    Tensor<T> w4, b4;
    Tensor<T> ln_gain, ln_bias;
};

template <typename T>
struct PhenoNet {
    PhenoNetConfig cfg;
    GradientEncoderParams<T> enc;
    TransformerParams<T> attn;
    ProjectionParams<T> proj;
    Tensor<T> head_weight, head_bias;

    static PhenoNet init(const PhenoNetConfig& cfg);

    // Trainable tensors in a fixed deterministic order.
    void visit_params(const std::function<void(const std::string&, Tensor<T>&)>& fn);
    // Batch-norm running statistics, same naming scheme.
    void visit_bn_states(const std::function<void(const std::string&, BatchNormState<T>&)>& fn);

    std::int64_t param_count();

    template <typename U>
    PhenoNet<U> cast();
};

// Leaf ids for every parameter, rebuilt per tape.
template <typename T>
struct ParamVars {
    std::map<std::string, Var<T>> vars;

    Var<T> at(const std::string& name) const {
        const auto it = vars.find(name);
        if (it == vars.end()) throw InvariantError("unbound parameter: " + name);
        return it->second;
    }
};

template <typename T>
ParamVars<T> bind_params(Tape<T>& tape, PhenoNet<T>& net, bool requires_grad);

// Dual difference-convolution branches, 1x1 mix, residual stack, global
// average pooling. Output [B, feat_dim].
template <typename T>
Var<T> gradient_encoder_forward(Tape<T>& tape, Var<T> x, PhenoNet<T>& net, ParamVars<T>& pv,
                                Mode mode);

// Self-attention block over a token factorization of the feature vector,
// then the two-layer feed-forward with residual layer norms. [B, feat_dim].
template <typename T>
Var<T> transformer_forward(Tape<T>& tape, Var<T> h2, PhenoNet<T>& net, ParamVars<T>& pv,
                           Mode mode, Rng* rng);

// Projection to out_dim with GELU bottleneck and final layer norm.
template <typename T>
Var<T> project(Tape<T>& tape, Var<T> h6, PhenoNet<T>& net, ParamVars<T>& pv, Mode mode, Rng* rng);

template <typename T>
Var<T> classify(Tape<T>& tape, Var<T> z_hat, ParamVars<T>& pv);

// (embeddings, logits)
template <typename T>
std::pair<Var<T>, Var<T>> forward(Tape<T>& tape, Var<T> x, PhenoNet<T>& net, ParamVars<T>& pv,
                                  Mode mode, Rng* rng);

// Checkpoint: JSON manifest (config, tensor names and offsets) followed by
// concatenated PTNS1 tensors. Round trips bit exactly.
void save_checkpoint(const std::string& path, PhenoNet<float>& net);
PhenoNet<float> load_checkpoint(const std::string& path);

}  // namespace phenokit
