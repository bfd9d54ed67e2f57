#include "phenokit/model.hpp"

#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

namespace phenokit {

int PhenoNetConfig::block_width(int i) const {
    const int shift = residual_depth - 1 - i;
    const int floor_width = std::min(feat_dim, 8);  // the last block must land on feat_dim
    return std::max(floor_width, feat_dim >> shift);
}

void PhenoNetConfig::validate() const {
    if (in_channels < 1 || image_size < 1 || feat_dim < 1 || out_dim < 1 || num_classes < 1 ||
        num_heads < 1 || ffn_hidden < 1 || residual_depth < 1)
        throw InputError("model config: all dims must be positive");
    if (!(dropout >= 0.0 && dropout < 1.0)) throw InputError("model config: dropout out of [0,1)");
    if (feat_dim % num_heads != 0)
        throw InputError("model config: num_heads must divide feat_dim");
    if (feat_dim % tokens() != 0)
        throw InputError("model config: attention tokens must divide feat_dim");
    if (token_dim() % num_heads != 0)
        throw InputError("model config: num_heads must divide the token width " +
                         std::to_string(token_dim()));
    if (!(theta1 >= 0.0 && theta1 <= 1.0 && theta2 >= 0.0 && theta2 <= 1.0))
        throw InputError("model config: theta out of [0,1]");
    if ((image_size >> residual_depth) < 1)
        throw InputError("model config: image_size too small for residual_depth");
}

namespace {

nlohmann::json config_to_json_obj(const PhenoNetConfig& c) {
    return nlohmann::json{{"in_channels", c.in_channels},
                          {"image_size", c.image_size},
                          {"feat_dim", c.feat_dim},
                          {"out_dim", c.out_dim},
                          {"num_classes", c.num_classes},
                          {"num_heads", c.num_heads},
                          {"ffn_hidden", c.ffn_hidden},
                          {"dropout", c.dropout},
                          {"residual_depth", c.residual_depth},
                          {"attn_tokens", c.attn_tokens},
                          {"theta1", c.theta1},
                          {"theta2", c.theta2},
                          {"seed", c.seed}};
}

PhenoNetConfig config_from_json_obj(const nlohmann::json& j) {
    static const std::set<std::string> known{
        "in_channels", "image_size", "feat_dim",       "out_dim", "num_classes",
        "num_heads",   "ffn_hidden", "dropout",        "residual_depth",
        "attn_tokens", "theta1",     "theta2",         "seed"};
    for (const auto& [key, value] : j.items())
        if (!known.count(key)) throw InputError("unknown model config key: '" + key + "'");
    PhenoNetConfig c;
    if (j.contains("in_channels")) c.in_channels = j["in_channels"].get<int>();
    if (j.contains("image_size")) c.image_size = j["image_size"].get<int>();
    if (j.contains("feat_dim")) c.feat_dim = j["feat_dim"].get<int>();
    if (j.contains("out_dim")) c.out_dim = j["out_dim"].get<int>();
    if (j.contains("num_classes")) c.num_classes = j["num_classes"].get<int>();
    if (j.contains("num_heads")) c.num_heads = j["num_heads"].get<int>();
    if (j.contains("ffn_hidden")) c.ffn_hidden = j["ffn_hidden"].get<int>();
    if (j.contains("dropout")) c.dropout = j["dropout"].get<double>();
    if (j.contains("residual_depth")) c.residual_depth = j["residual_depth"].get<int>();
    if (j.contains("attn_tokens")) c.attn_tokens = j["attn_tokens"].get<int>();
    if (j.contains("theta1")) c.theta1 = j["theta1"].get<double>();
    if (j.contains("theta2")) c.theta2 = j["theta2"].get<double>();
    if (j.contains("seed")) c.seed = j["seed"].get<std::uint64_t>();
    return c;
}

}  // namespace

std::string PhenoNetConfig::to_json() const { return config_to_json_obj(*this).dump(2); }

PhenoNetConfig PhenoNetConfig::from_json(const std::string& text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const std::exception& e) {
        throw InputError(std::string("bad model config JSON: ") + e.what());
    }
    return config_from_json_obj(j);
}

namespace {

template <typename T>
Tensor<T> kaiming_uniform(Shape shape, std::int64_t fan_in, Rng& rng) {
    Tensor<T> t(std::move(shape));
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
    for (auto& v : t.data) v = static_cast<T>(rng.uniform(-bound, bound));
    return t;
}

template <typename T>
void init_conv_bn(ConvBn<T>& cb, std::int64_t out_ch, std::int64_t in_ch, std::int64_t k,
                  Rng& rng) {
    cb.weight = kaiming_uniform<T>({out_ch, in_ch, k, k}, in_ch * k * k, rng);
    cb.gain = Tensor<T>({out_ch}, T(1));
    cb.bias = Tensor<T>({out_ch}, T(0));
    cb.state = BatchNormState<T>(out_ch);
}

}  // namespace

template <typename T>
PhenoNet<T> PhenoNet<T>::init(const PhenoNetConfig& cfg) {
    cfg.validate();
    PhenoNet<T> net;
    net.cfg = cfg;
    Rng rng(cfg.seed);

    const std::int64_t C = cfg.in_channels;
    const std::int64_t branch = cfg.branch_channels();
    const std::int64_t hidden = cfg.mlp_hidden();

    net.enc.dg_weight = kaiming_uniform<T>({branch, C, 3, 3}, C * 9, rng);
    net.enc.sg_weight = kaiming_uniform<T>({branch, C, 3, 3}, C * 9, rng);
    net.enc.dg_gain = Tensor<T>({branch}, T(1));
    net.enc.dg_bias = Tensor<T>({branch}, T(0));
    net.enc.dg_state = BatchNormState<T>(branch);
    net.enc.sg_gain = Tensor<T>({branch}, T(1));
    net.enc.sg_bias = Tensor<T>({branch}, T(0));
    net.enc.sg_state = BatchNormState<T>(branch);
    net.enc.mlp_weight = kaiming_uniform<T>({hidden, 2 * branch, 1, 1}, 2 * branch, rng);
    net.enc.mlp_bias = Tensor<T>({hidden}, T(0));
    net.enc.mlp_gain = Tensor<T>({hidden}, T(1));
    net.enc.mlp_bn_bias = Tensor<T>({hidden}, T(0));
    net.enc.mlp_state = BatchNormState<T>(hidden);

    std::int64_t in_ch = hidden;
    for (int i = 0; i < cfg.residual_depth; ++i) {
        ResidualBlockParams<T> block;
        const std::int64_t out_ch = cfg.block_width(i);
        init_conv_bn(block.conv1, out_ch, in_ch, 3, rng);
        init_conv_bn(block.conv2, out_ch, out_ch, 3, rng);
        init_conv_bn(block.skip, out_ch, in_ch, 1, rng);
        net.enc.blocks.push_back(std::move(block));
        in_ch = out_ch;
    }

    const std::int64_t E = cfg.token_dim();
    auto linear_init = [&rng](std::int64_t out, std::int64_t in) {
        return kaiming_uniform<T>({out, in}, in, rng);
    };
    net.attn.wq = linear_init(E, E);
    net.attn.bq = Tensor<T>({E}, T(0));
    net.attn.wk = linear_init(E, E);
    net.attn.bk = Tensor<T>({E}, T(0));
    net.attn.wv = linear_init(E, E);
    net.attn.bv = Tensor<T>({E}, T(0));
    net.attn.wo = linear_init(E, E);
    net.attn.bo = Tensor<T>({E}, T(0));
    net.attn.ffn_w1 = linear_init(cfg.ffn_hidden, cfg.feat_dim);
    net.attn.ffn_b1 = Tensor<T>({cfg.ffn_hidden}, T(0));
    net.attn.ffn_w2 = linear_init(cfg.feat_dim, cfg.ffn_hidden);
    net.attn.ffn_b2 = Tensor<T>({cfg.feat_dim}, T(0));
    net.attn.ln1_gain = Tensor<T>({cfg.feat_dim}, T(1));
    net.attn.ln1_bias = Tensor<T>({cfg.feat_dim}, T(0));
    net.attn.ln2_gain = Tensor<T>({cfg.feat_dim}, T(1));
    net.attn.ln2_bias = Tensor<T>({cfg.feat_dim}, T(0));

    net.proj.w3 = linear_init(cfg.out_dim, cfg.feat_dim);
    net.proj.b3 = Tensor<T>({cfg.out_dim}, T(0));
    net.proj.w4 = linear_init(cfg.out_dim, cfg.out_dim);
    net.proj.b4 = Tensor<T>({cfg.out_dim}, T(0));
    net.proj.ln_gain = Tensor<T>({cfg.out_dim}, T(1));
    net.proj.ln_bias = Tensor<T>({cfg.out_dim}, T(0));

    net.head_weight = linear_init(cfg.num_classes, cfg.out_dim);
    net.head_bias = Tensor<T>({cfg.num_classes}, T(0));
    return net;
}

template <typename T>
void PhenoNet<T>::visit_params(const std::function<void(const std::string&, Tensor<T>&)>& fn) {
    fn("enc.dg_weight", enc.dg_weight);
    fn("enc.dg_gain", enc.dg_gain);
    fn("enc.dg_bias", enc.dg_bias);
    fn("enc.sg_weight", enc.sg_weight);
    fn("enc.sg_gain", enc.sg_gain);
    fn("enc.sg_bias", enc.sg_bias);
    fn("enc.mlp_weight", enc.mlp_weight);
    fn("enc.mlp_bias", enc.mlp_bias);
    fn("enc.mlp_gain", enc.mlp_gain);
    fn("enc.mlp_bn_bias", enc.mlp_bn_bias);
    for (std::size_t i = 0; i < enc.blocks.size(); ++i) {
        const std::string p = "enc.block" + std::to_string(i) + ".";
        auto& b = enc.blocks[i];
        fn(p + "conv1.weight", b.conv1.weight);
        fn(p + "conv1.gain", b.conv1.gain);
        fn(p + "conv1.bias", b.conv1.bias);
        fn(p + "conv2.weight", b.conv2.weight);
        fn(p + "conv2.gain", b.conv2.gain);
        fn(p + "conv2.bias", b.conv2.bias);
        fn(p + "skip.weight", b.skip.weight);
        fn(p + "skip.gain", b.skip.gain);
        fn(p + "skip.bias", b.skip.bias);
    }
    fn("attn.wq", attn.wq);
    fn("attn.bq", attn.bq);
    fn("attn.wk", attn.wk);
    fn("attn.bk", attn.bk);
    fn("attn.wv", attn.wv);
    fn("attn.bv", attn.bv);
    fn("attn.wo", attn.wo);
    fn("attn.bo", attn.bo);
    fn("attn.ffn_w1", attn.ffn_w1);
    fn("attn.ffn_b1", attn.ffn_b1);
    fn("attn.ffn_w2", attn.ffn_w2);
    fn("attn.ffn_b2", attn.ffn_b2);
    fn("attn.ln1_gain", attn.ln1_gain);
    fn("attn.ln1_bias", attn.ln1_bias);
    fn("attn.ln2_gain", attn.ln2_gain);
    fn("attn.ln2_bias", attn.ln2_bias);
    fn("proj.w3", proj.w3);
    fn("proj.b3", proj.b3);
    fn("proj.w4", proj.w4);
    fn("proj.b4", proj.b4);
    fn("proj.ln_gain", proj.ln_gain);
    fn("proj.ln_bias", proj.ln_bias);
    fn("head.weight", head_weight);
    fn("head.bias", head_bias);
}

template <typename T>
void PhenoNet<T>::visit_bn_states(
    const std::function<void(const std::string&, BatchNormState<T>&)>& fn) {
    fn("enc.dg_bn", enc.dg_state);
    fn("enc.sg_bn", enc.sg_state);
    fn("enc.mlp_bn", enc.mlp_state);
    for (std::size_t i = 0; i < enc.blocks.size(); ++i) {
        const std::string p = "enc.block" + std::to_string(i) + ".";
        fn(p + "conv1.bn", enc.blocks[i].conv1.state);
        fn(p + "conv2.bn", enc.blocks[i].conv2.state);
        fn(p + "skip.bn", enc.blocks[i].skip.state);
    }
}

template <typename T>
std::int64_t PhenoNet<T>::param_count() {
    std::int64_t n = 0;
    visit_params([&n](const std::string&, Tensor<T>& t) { n += t.numel(); });
    return n;
}

template <typename T>
template <typename U>
PhenoNet<U> PhenoNet<T>::cast() {
    PhenoNet<U> out = PhenoNet<U>::init(cfg);
    std::vector<Tensor<T>*> src;
    visit_params([&src](const std::string&, Tensor<T>& t) { src.push_back(&t); });
    std::size_t i = 0;
    out.visit_params([&](const std::string&, Tensor<U>& t) {
        t = src[i]->template cast<U>();
        ++i;
    });
    std::vector<BatchNormState<T>*> states;
    visit_bn_states([&states](const std::string&, BatchNormState<T>& s) { states.push_back(&s); });
    std::size_t k = 0;
    out.visit_bn_states([&](const std::string&, BatchNormState<U>& s) {
        s.running_mean = states[k]->running_mean.template cast<U>();
        s.running_var = states[k]->running_var.template cast<U>();
        s.initialized = states[k]->initialized;
        ++k;
    });
    return out;
}

template <typename T>
ParamVars<T> bind_params(Tape<T>& tape, PhenoNet<T>& net, bool requires_grad) {
    ParamVars<T> pv;
    net.visit_params([&](const std::string& name, Tensor<T>& t) {
        pv.vars[name] = make_leaf(tape, t, requires_grad, "param");
    });
    return pv;
}

namespace {

template <typename T>
Var<T> conv_bn_relu(Tape<T>&, Var<T> x, ParamVars<T>& pv, const std::string& prefix,
                    BatchNormState<T>* state, int stride, int padding, Mode mode,
                    bool relu_after) {
    auto y = conv2d(x, pv.at(prefix + ".weight"), stride, padding);
    y = batch_norm2d(y, pv.at(prefix + ".gain"), pv.at(prefix + ".bias"), state,
                     mode == Mode::train);
    return relu_after ? relu(y) : y;
}

}  // namespace

template <typename T>
Var<T> gradient_encoder_forward(Tape<T>& tape, Var<T> x, PhenoNet<T>& net, ParamVars<T>& pv,
                                Mode mode) {
    const auto& cfg = net.cfg;
    if (x.shape().size() != 4 || x.dim(1) != cfg.in_channels || x.dim(2) != cfg.image_size ||
        x.dim(3) != cfg.image_size)
        throw InputError("gradient_encoder: expected input [B," +
                         std::to_string(cfg.in_channels) + "," + std::to_string(cfg.image_size) +
                         "," + std::to_string(cfg.image_size) + "], got " + shape_str(x.shape()));
    const bool train = mode == Mode::train;

    // deep and shallow gradient branches
    auto dg = diff_conv2d(x, pv.at("enc.dg_weight"), static_cast<T>(cfg.theta1), 1, 1);
    dg = batch_norm2d(relu(dg), pv.at("enc.dg_gain"), pv.at("enc.dg_bias"), &net.enc.dg_state,
                      train);
    auto sg = diff_conv2d(x, pv.at("enc.sg_weight"), static_cast<T>(cfg.theta2), 1, 1);
    sg = batch_norm2d(relu(sg), pv.at("enc.sg_gain"), pv.at("enc.sg_bias"), &net.enc.sg_state,
                      train);

    // 1x1 mix of the concatenated branch maps
    auto h1 = conv2d(concat_channels(dg, sg), pv.at("enc.mlp_weight"), 1, 0);
    h1 = add_channel_bias(h1, pv.at("enc.mlp_bias"));
    h1 = batch_norm2d(relu(h1), pv.at("enc.mlp_gain"), pv.at("enc.mlp_bn_bias"),
                      &net.enc.mlp_state, train);

    auto h = h1;
    for (std::size_t i = 0; i < net.enc.blocks.size(); ++i) {
        const std::string p = "enc.block" + std::to_string(i) + ".";
        auto& blk = net.enc.blocks[i];
        auto main = conv_bn_relu(tape, h, pv, p + "conv1", &blk.conv1.state, 2, 1, mode, true);
        main = conv_bn_relu(tape, main, pv, p + "conv2", &blk.conv2.state, 1, 1, mode, false);
        auto skip = conv_bn_relu(tape, h, pv, p + "skip", &blk.skip.state, 2, 0, mode, false);
        h = relu(add(main, skip));
    }
    return global_avg_pool(h);
}

template <typename T>
Var<T> transformer_forward(Tape<T>& tape, Var<T> h2, PhenoNet<T>& net, ParamVars<T>& pv,
                           Mode mode, Rng* rng) {
    (void)tape;
    const auto& cfg = net.cfg;
    if (h2.shape().size() != 2 || h2.dim(1) != cfg.feat_dim)
        throw InputError("transformer: expected [B," + std::to_string(cfg.feat_dim) + "], got " +
                         shape_str(h2.shape()));
    const std::int64_t B = h2.dim(0);
    const std::int64_t S = cfg.tokens(), E = cfg.token_dim();
    const std::int64_t H = cfg.num_heads, hd = E / H;
    const bool train = mode == Mode::train;
    if (train && cfg.dropout > 0.0 && rng == nullptr)
        throw InvariantError("transformer: train mode with dropout needs an rng");

    // multi-head self-attention over the token factorization of the features
    auto flat = reshape(h2, {B * S, E});
    auto split_heads = [&](Var<T> v) {
        return reshape(permute(reshape(v, {B, S, H, hd}), {0, 2, 1, 3}), {B * H, S, hd});
    };
    auto q = split_heads(linear(flat, pv.at("attn.wq"), pv.at("attn.bq")));
    auto k = split_heads(linear(flat, pv.at("attn.wk"), pv.at("attn.bk")));
    auto v = split_heads(linear(flat, pv.at("attn.wv"), pv.at("attn.bv")));
    auto scores = scale(bmm(q, permute(k, {0, 2, 1})),
                        static_cast<T>(1.0 / std::sqrt(static_cast<double>(hd))));
    auto ctx = bmm(softmax_rows(scores), v);
    ctx = reshape(permute(reshape(ctx, {B, H, S, hd}), {0, 2, 1, 3}), {B * S, E});
    auto h3 = reshape(linear(ctx, pv.at("attn.wo"), pv.at("attn.bo")), {B, cfg.feat_dim});

    auto h3d = train ? dropout(h3, cfg.dropout, *rng, true) : h3;
    auto h4 = layer_norm(add(h2, h3d), pv.at("attn.ln1_gain"), pv.at("attn.ln1_bias"),
                         static_cast<T>(1e-5));

    auto h5 = relu(linear(relu(linear(h4, pv.at("attn.ffn_w1"), pv.at("attn.ffn_b1"))),
                          pv.at("attn.ffn_w2"), pv.at("attn.ffn_b2")));
    auto h5d = train ? dropout(h5, cfg.dropout, *rng, true) : h5;
    return layer_norm(add(h4, h5d), pv.at("attn.ln2_gain"), pv.at("attn.ln2_bias"),
                      static_cast<T>(1e-5));
}

template <typename T>
Var<T> project(Tape<T>& tape, Var<T> h6, PhenoNet<T>& net, ParamVars<T>& pv, Mode mode,
               Rng* rng) {
    (void)tape;
    const auto& cfg = net.cfg;
    if (h6.shape().size() != 2 || h6.dim(1) != cfg.feat_dim)
        throw InputError("project: expected [B," + std::to_string(cfg.feat_dim) + "], got " +
                         shape_str(h6.shape()));
    const bool train = mode == Mode::train;
    if (train && cfg.dropout > 0.0 && rng == nullptr)
        throw InvariantError("project: train mode with dropout needs an rng");
    auto z1 = linear(h6, pv.at("proj.w3"), pv.at("proj.b3"));
    auto z2 = linear(gelu(z1), pv.at("proj.w4"), pv.at("proj.b4"));
    if (train) z2 = dropout(z2, cfg.dropout, *rng, true);
    return layer_norm(add(z1, z2), pv.at("proj.ln_gain"), pv.at("proj.ln_bias"),
                      static_cast<T>(1e-5));
}

template <typename T>
Var<T> classify(Tape<T>&, Var<T> z_hat, ParamVars<T>& pv) {
    return linear(z_hat, pv.at("head.weight"), pv.at("head.bias"));
}

template <typename T>
std::pair<Var<T>, Var<T>> forward(Tape<T>& tape, Var<T> x, PhenoNet<T>& net, ParamVars<T>& pv,
                                  Mode mode, Rng* rng) {
    auto h2 = gradient_encoder_forward(tape, x, net, pv, mode);
    auto h6 = transformer_forward(tape, h2, net, pv, mode, rng);
    auto z_hat = project(tape, h6, net, pv, mode, rng);
    auto logits = classify(tape, z_hat, pv);
    return {z_hat, logits};
}

namespace {
constexpr char kCheckpointMagic[] = "PHENONET1\n";

void put_u64_le(std::ostream& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.put(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint64_t get_u64_le(std::istream& in) {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) {
        const int c = in.get();
        if (c == EOF) throw InputError("checkpoint truncated in header");
        v |= static_cast<std::uint64_t>(static_cast<unsigned char>(c)) << (8 * i);
    }
    return v;
}
}  // namespace

void save_checkpoint(const std::string& path, PhenoNet<float>& net) {
    // serialize tensors first to know the offsets
    std::ostringstream blobs;
    nlohmann::json manifest;
    manifest["config"] = nlohmann::json::parse(net.cfg.to_json());
    auto& tensors = manifest["tensors"] = nlohmann::json::array();
    auto dump = [&](const std::string& name, Tensor<float>& t) {
        tensors.push_back({{"name", name}, {"offset", static_cast<std::uint64_t>(blobs.tellp())}});
        write_tensor(blobs, t);
    };
    net.visit_params(dump);
    net.visit_bn_states([&](const std::string& name, BatchNormState<float>& s) {
        dump(name + ".running_mean", s.running_mean);
        dump(name + ".running_var", s.running_var);
        manifest["bn_initialized"][name] = s.initialized;
    });

    const std::string manifest_text = manifest.dump();
    std::ofstream f(path, std::ios::binary);
    if (!f) throw InputError("cannot open for write: " + path);
    f.write(kCheckpointMagic, sizeof(kCheckpointMagic) - 1);
    put_u64_le(f, manifest_text.size());
    f << manifest_text;
    const std::string blob_str = blobs.str();
    f.write(blob_str.data(), static_cast<std::streamsize>(blob_str.size()));
    if (!f) throw InputError("checkpoint write failed: " + path);
}

PhenoNet<float> load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw InputError("cannot open: " + path);
    char magic[sizeof(kCheckpointMagic) - 1];
    f.read(magic, sizeof(magic));
    if (!f || std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0)
        throw InputError("bad checkpoint magic in " + path);
    const std::uint64_t manifest_len = get_u64_le(f);
    std::string manifest_text(manifest_len, '\0');
    f.read(manifest_text.data(), static_cast<std::streamsize>(manifest_len));
    if (!f) throw InputError("checkpoint truncated in manifest: " + path);
    nlohmann::json manifest;
    try {
        manifest = nlohmann::json::parse(manifest_text);
    } catch (const std::exception& e) {
        throw InputError("bad checkpoint manifest: " + std::string(e.what()));
    }

    const PhenoNetConfig cfg = PhenoNetConfig::from_json(manifest.at("config").dump());
    PhenoNet<float> net = PhenoNet<float>::init(cfg);

    std::map<std::string, std::uint64_t> offsets;
    for (const auto& t : manifest.at("tensors"))
        offsets[t.at("name").get<std::string>()] = t.at("offset").get<std::uint64_t>();

    const std::streampos blob_base = f.tellg();
    auto read_into = [&](const std::string& name, Tensor<float>& t) {
        const auto it = offsets.find(name);
        if (it == offsets.end()) throw InputError("checkpoint missing tensor '" + name + "'");
        f.clear();
        f.seekg(blob_base + static_cast<std::streamoff>(it->second));
        Tensor<float> loaded;
        try {
            loaded = read_tensor<float>(f);
        } catch (const InputError& e) {
            throw InputError("checkpoint tensor '" + name + "': " + e.what());
        }
        if (loaded.shape != t.shape)
            throw InputError("checkpoint tensor '" + name + "' has shape " +
                             shape_str(loaded.shape) + ", expected " + shape_str(t.shape));
        t = std::move(loaded);
    };
    net.visit_params(read_into);
    net.visit_bn_states([&](const std::string& name, BatchNormState<float>& s) {
        read_into(name + ".running_mean", s.running_mean);
        read_into(name + ".running_var", s.running_var);
        s.initialized = manifest.at("bn_initialized").at(name).get<bool>();
    });
    return net;
}

#define PHENOKIT_INSTANTIATE_MODEL(T)                                                             \
    template struct PhenoNet<T>;                                                                  \
    template PhenoNet<float> PhenoNet<T>::cast<float>();                                          \
    template PhenoNet<double> PhenoNet<T>::cast<double>();                                        \
    template ParamVars<T> bind_params<T>(Tape<T>&, PhenoNet<T>&, bool);                           \
    template Var<T> gradient_encoder_forward<T>(Tape<T>&, Var<T>, PhenoNet<T>&, ParamVars<T>&,    \
                                                Mode);                                            \
    template Var<T> transformer_forward<T>(Tape<T>&, Var<T>, PhenoNet<T>&, ParamVars<T>&, Mode,   \
                                           Rng*);                                                 \
    template Var<T> project<T>(Tape<T>&, Var<T>, PhenoNet<T>&, ParamVars<T>&, Mode, Rng*);        \
    template Var<T> classify<T>(Tape<T>&, Var<T>, ParamVars<T>&);                                 \
    template std::pair<Var<T>, Var<T>> forward<T>(Tape<T>&, Var<T>, PhenoNet<T>&, ParamVars<T>&,  \
                                                  Mode, Rng*);

PHENOKIT_INSTANTIATE_MODEL(float)
PHENOKIT_INSTANTIATE_MODEL(double)

}  // namespace phenokit
