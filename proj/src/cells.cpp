#include "cloudcast/cells.hpp"

#include <cmath>
#include <fstream>

#include <nlohmann/json.hpp>

namespace cloudcast {

namespace {

Tensor init_kernel(Shape shape, int fan_in, Rng& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    Tensor t = Tensor::uniform(std::move(shape), -bound, bound, rng);
    t.set_requires_grad(true);
    return t;
}

Tensor zero_param(Shape shape) {
    Tensor t = Tensor::zeros(std::move(shape));
    t.set_requires_grad(true);
    return t;
}

ConvGateParams init_gate(int in_channels, int hidden_channels, int kernel, Rng& rng) {
    ConvGateParams g;
    g.w_h = init_kernel({hidden_channels, hidden_channels, kernel, kernel},
                        hidden_channels * kernel * kernel, rng);
    g.w_x = init_kernel({hidden_channels, in_channels, kernel, kernel},
                        in_channels * kernel * kernel, rng);
    g.b = zero_param({hidden_channels});
    return g;
}

void collect_gate(const std::string& prefix, ConvGateParams& g, ParamList& out) {
    out.push_back({prefix + ".w_h", g.w_h});
    out.push_back({prefix + ".w_x", g.w_x});
    out.push_back({prefix + ".b", g.b});
}

// Pre-activation of one gate: conv(h) + conv(x) + bias, with an optional
// attention transform applied to each convolution result before summation.
Tensor gate_preact(const ConvGateParams& g, const Tensor& x, const Tensor& h,
                   const CBAMParams* att_h = nullptr, const CBAMParams* att_x = nullptr) {
    Tensor from_h = conv2d(h, g.w_h, Tensor());
    Tensor from_x = conv2d(x, g.w_x, Tensor());
    if (att_h) from_h = cbam(*att_h, from_h);
    if (att_x) from_x = cbam(*att_x, from_x);
    return add_channel_bias(from_h + from_x, g.b);
}

}  // namespace

ConvLSTMParams ConvLSTMParams::init(int in_channels, int hidden_channels, int kernel,
                                    Rng& rng) {
    if (kernel % 2 == 0) throw ConfigError("cell kernel size must be odd");
    ConvLSTMParams p;
    p.in_channels = in_channels;
    p.hidden_channels = hidden_channels;
    p.kernel = kernel;
    p.gate_i = init_gate(in_channels, hidden_channels, kernel, rng);
    p.gate_o = init_gate(in_channels, hidden_channels, kernel, rng);
    p.gate_f = init_gate(in_channels, hidden_channels, kernel, rng);
    p.gate_c = init_gate(in_channels, hidden_channels, kernel, rng);
    return p;
}

void ConvLSTMParams::collect(const std::string& prefix, ParamList& out) {
    collect_gate(prefix + ".i", gate_i, out);
    collect_gate(prefix + ".o", gate_o, out);
    collect_gate(prefix + ".f", gate_f, out);
    collect_gate(prefix + ".c", gate_c, out);
}

CellState zero_state(int hidden_channels, int height, int width, bool with_memory) {
    CellState s;
    s.h = Tensor::zeros({hidden_channels, height, width});
    s.c = Tensor::zeros({hidden_channels, height, width});
    if (with_memory) s.m = Tensor::zeros({hidden_channels, height, width});
    return s;
}

CellState convlstm_step(const ConvLSTMParams& params, const Tensor& x, const CellState& state) {
    Tensor i = sigmoid(gate_preact(params.gate_i, x, state.h));
    Tensor o = sigmoid(gate_preact(params.gate_o, x, state.h));
    Tensor f = sigmoid(gate_preact(params.gate_f, x, state.h));
    Tensor g = tanh(gate_preact(params.gate_c, x, state.h));
    CellState next;
    next.c = i * g + f * state.c;
    next.h = o * tanh(next.c);
    next.m = state.m;
    return next;
}

CBAMParams CBAMParams::init(int channels, int reduction, int spatial_kernel, Rng& rng) {
    if (reduction < 1) throw ConfigError("cbam reduction must be >= 1");
    if (spatial_kernel % 2 == 0) throw ConfigError("cbam spatial kernel must be odd");
    CBAMParams p;
    p.channels = channels;
    p.reduction = reduction;
    p.spatial_kernel = spatial_kernel;
    const int mid = std::max(1, channels / reduction);
    p.mlp_w1 = init_kernel({mid, channels}, channels, rng);
    p.mlp_b1 = zero_param({mid});
    p.mlp_w2 = init_kernel({channels, mid}, mid, rng);
    p.mlp_b2 = zero_param({channels});
    p.spatial_w = init_kernel({1, 2, spatial_kernel, spatial_kernel},
                              2 * spatial_kernel * spatial_kernel, rng);
    return p;
}

void CBAMParams::collect(const std::string& prefix, ParamList& out) {
    out.push_back({prefix + ".mlp_w1", mlp_w1});
    out.push_back({prefix + ".mlp_b1", mlp_b1});
    out.push_back({prefix + ".mlp_w2", mlp_w2});
    out.push_back({prefix + ".mlp_b2", mlp_b2});
    out.push_back({prefix + ".spatial_w", spatial_w});
}

Tensor cbam(const CBAMParams& params, const Tensor& feature_map) {
    if (feature_map.rank() != 3 || feature_map.dim(0) != params.channels)
        throw ShapeError("cbam: feature map " + shape_str(feature_map.shape()) +
                         " does not match configured channels " +
                         std::to_string(params.channels));
    if (params.identity_attention) return feature_map;

    auto mlp = [&](const Tensor& v) {
        return dense(relu(dense(v, params.mlp_w1, params.mlp_b1)), params.mlp_w2,
                     params.mlp_b2);
    };
    Tensor channel_att =
        sigmoid(mlp(global_avg_spatial(feature_map)) + mlp(global_max_spatial(feature_map)));
    Tensor refined = scale_channels(feature_map, channel_att);

    Tensor pooled = concat_channels(avg_over_channels(refined), max_over_channels(refined));
    Tensor spatial_att = sigmoid(conv2d(pooled, params.spatial_w, Tensor()));
    return scale_spatial(refined, spatial_att);
}

CBAMConvLSTMParams CBAMConvLSTMParams::init(int in_channels, int hidden_channels, int kernel,
                                            int reduction, int spatial_kernel, Rng& rng) {
    CBAMConvLSTMParams p;
    p.base = ConvLSTMParams::init(in_channels, hidden_channels, kernel, rng);
    for (CBAMParams* att : {&p.att_ih, &p.att_ix, &p.att_oh, &p.att_ox, &p.att_fh, &p.att_fx,
                            &p.att_ch, &p.att_cx})
        *att = CBAMParams::init(hidden_channels, reduction, spatial_kernel, rng);
    return p;
}

void CBAMConvLSTMParams::collect(const std::string& prefix, ParamList& out) {
    base.collect(prefix, out);
    att_ih.collect(prefix + ".att_ih", out);
    att_ix.collect(prefix + ".att_ix", out);
    att_oh.collect(prefix + ".att_oh", out);
    att_ox.collect(prefix + ".att_ox", out);
    att_fh.collect(prefix + ".att_fh", out);
    att_fx.collect(prefix + ".att_fx", out);
    att_ch.collect(prefix + ".att_ch", out);
    att_cx.collect(prefix + ".att_cx", out);
}

void CBAMConvLSTMParams::set_identity_attention(bool value) {
    for (CBAMParams* att :
         {&att_ih, &att_ix, &att_oh, &att_ox, &att_fh, &att_fx, &att_ch, &att_cx})
        att->identity_attention = value;
}

CellState cbam_convlstm_step(const CBAMConvLSTMParams& params, const Tensor& x,
                             const CellState& state) {
    Tensor i = sigmoid(gate_preact(params.base.gate_i, x, state.h, &params.att_ih, &params.att_ix));
    Tensor o = sigmoid(gate_preact(params.base.gate_o, x, state.h, &params.att_oh, &params.att_ox));
    Tensor f = sigmoid(gate_preact(params.base.gate_f, x, state.h, &params.att_fh, &params.att_fx));
    Tensor g = tanh(gate_preact(params.base.gate_c, x, state.h, &params.att_ch, &params.att_cx));
    CellState next;
    next.c = i * g + f * state.c;
    next.h = o * tanh(next.c);
    next.m = state.m;
    return next;
}

SAMemoryParams SAMemoryParams::init(int channels, Rng& rng) {
    SAMemoryParams p;
    p.channels = channels;
    p.attn_dim = std::max(1, channels / 2);
    const int d = p.attn_dim;
    p.w_q = init_kernel({d, channels, 1, 1}, channels, rng);
    p.w_kh = init_kernel({d, channels, 1, 1}, channels, rng);
    p.w_vh = init_kernel({channels, channels, 1, 1}, channels, rng);
    p.w_km = init_kernel({d, channels, 1, 1}, channels, rng);
    p.w_vm = init_kernel({channels, channels, 1, 1}, channels, rng);
    p.w_mix = init_kernel({channels, 2 * channels, 1, 1}, 2 * channels, rng);
    p.w_ih = init_kernel({channels, channels, 1, 1}, channels, rng);
    p.w_iz = init_kernel({channels, channels, 1, 1}, channels, rng);
    p.b_i = zero_param({channels});
    p.w_oh = init_kernel({channels, channels, 1, 1}, channels, rng);
    p.w_oz = init_kernel({channels, channels, 1, 1}, channels, rng);
    p.b_o = zero_param({channels});
    p.w_mh = init_kernel({channels, channels, 1, 1}, channels, rng);
    p.w_mz = init_kernel({channels, channels, 1, 1}, channels, rng);
    p.b_m = zero_param({channels});
    return p;
}

void SAMemoryParams::collect(const std::string& prefix, ParamList& out) {
    out.push_back({prefix + ".w_q", w_q});
    out.push_back({prefix + ".w_kh", w_kh});
    out.push_back({prefix + ".w_vh", w_vh});
    out.push_back({prefix + ".w_km", w_km});
    out.push_back({prefix + ".w_vm", w_vm});
    out.push_back({prefix + ".w_mix", w_mix});
    out.push_back({prefix + ".w_ih", w_ih});
    out.push_back({prefix + ".w_iz", w_iz});
    out.push_back({prefix + ".b_i", b_i});
    out.push_back({prefix + ".w_oh", w_oh});
    out.push_back({prefix + ".w_oz", w_oz});
    out.push_back({prefix + ".b_o", b_o});
    out.push_back({prefix + ".w_mh", w_mh});
    out.push_back({prefix + ".w_mz", w_mz});
    out.push_back({prefix + ".b_m", b_m});
}

Tensor self_attention_aggregate(const SAMemoryParams& params, const Tensor& h,
                                const Tensor& m_prev, std::vector<Tensor>* attention_out) {
    if (h.shape() != m_prev.shape())
        throw ShapeError("self_attention_aggregate: h and M shapes differ");
    const int c = h.dim(0), height = h.dim(1), width = h.dim(2);
    const int n = height * width;
    const int d = params.attn_dim;
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));

    auto flat = [&](const Tensor& t, int rows) { return reshape(t, {rows, n}); };
    Tensor q = flat(conv2d(h, params.w_q, Tensor()), d);         // [d,N]
    Tensor kh = flat(conv2d(h, params.w_kh, Tensor()), d);       // [d,N]
    Tensor vh = flat(conv2d(h, params.w_vh, Tensor()), c);       // [C,N]
    Tensor km = flat(conv2d(m_prev, params.w_km, Tensor()), d);  // [d,N]
    Tensor vm = flat(conv2d(m_prev, params.w_vm, Tensor()), c);  // [C,N]

    // scores[query, key]; each row is normalized over keys.
    Tensor qt = transpose2d(q);
    Tensor att_h = softmax(scale(matmul(qt, kh), inv_sqrt_d), 1);
    Tensor att_m = softmax(scale(matmul(qt, km), inv_sqrt_d), 1);
    if (attention_out) {
        attention_out->clear();
        attention_out->push_back(att_h);
        attention_out->push_back(att_m);
    }
    Tensor z_h = reshape(matmul(vh, transpose2d(att_h)), {c, height, width});
    Tensor z_m = reshape(matmul(vm, transpose2d(att_m)), {c, height, width});
    return conv2d(concat_channels(z_h, z_m), params.w_mix, Tensor());
}

CellState sa_convlstm_step(const SAConvLSTMParams& params, const Tensor& x,
                           const CellState& state) {
    if (!state.m.defined())
        throw ShapeError("sa_convlstm_step: state carries no attention memory M");
    CellState base = convlstm_step(params.base, x, state);
    const SAMemoryParams& mem = params.memory;
    Tensor z = self_attention_aggregate(mem, base.h, state.m);

    auto gate = [&](const Tensor& wh, const Tensor& wz, const Tensor& b) {
        return sigmoid(add_channel_bias(conv2d(base.h, wh, Tensor()) + conv2d(z, wz, Tensor()), b));
    };
    Tensor i = gate(mem.w_ih, mem.w_iz, mem.b_i);
    Tensor o = gate(mem.w_oh, mem.w_oz, mem.b_o);
    Tensor cand = tanh(
        add_channel_bias(conv2d(base.h, mem.w_mh, Tensor()) + conv2d(z, mem.w_mz, Tensor()),
                         mem.b_m));
    Tensor one_minus_i = add_scalar(scale(i, -1.0), 1.0);

    CellState next;
    next.c = base.c;
    next.m = i * cand + one_minus_i * state.m;
    next.h = o * tanh(next.m);
    return next;
}

// ---------------------------------------------------------------------------
// CloudModel
// ---------------------------------------------------------------------------

std::string cell_kind_name(CellKind kind) {
    switch (kind) {
        case CellKind::ConvLstm: return "convlstm";
        case CellKind::Cbam: return "cbam";
        case CellKind::Sa: return "sa";
    }
    throw ConfigError("unknown cell kind");
}

CellKind cell_kind_from_name(const std::string& name) {
    if (name == "convlstm") return CellKind::ConvLstm;
    if (name == "cbam") return CellKind::Cbam;
    if (name == "sa") return CellKind::Sa;
    throw ConfigError("unknown cell kind: " + name + " (expected convlstm|cbam|sa)");
}

std::vector<Tensor> rollout_with(const std::function<Tensor(const Tensor&)>& step_once,
                                 const std::vector<Tensor>& inputs, int horizon) {
    if (horizon < 1) throw ConfigError("rollout: horizon must be >= 1");
    if (inputs.empty()) throw ConfigError("rollout: need at least one input frame");
    Tensor last;
    for (const Tensor& frame : inputs) last = step_once(frame);
    std::vector<Tensor> out;
    out.reserve(static_cast<size_t>(horizon));
    Tensor pred = clamp(last, 0.0, 1.0);
    out.push_back(pred);
    for (int k = 1; k < horizon; ++k) {
        pred = clamp(step_once(pred), 0.0, 1.0);
        out.push_back(pred);
    }
    return out;
}

CloudModel::CloudModel(CloudModelSpec spec, uint64_t seed) : spec_(spec) {
    if (spec.layers < 1) throw ConfigError("cloud model needs at least one layer");
    if (spec.hidden_channels < 1) throw ConfigError("hidden channel count must be >= 1");
    Rng rng(seed);
    for (int l = 0; l < spec.layers; ++l) {
        const int in_ch = (l == 0) ? spec.input_channels : spec.hidden_channels;
        switch (spec.kind) {
            case CellKind::ConvLstm:
                layers_.emplace_back(
                    ConvLSTMParams::init(in_ch, spec.hidden_channels, spec.kernel, rng));
                break;
            case CellKind::Cbam:
                layers_.emplace_back(CBAMConvLSTMParams::init(in_ch, spec.hidden_channels,
                                                              spec.kernel, spec.cbam_reduction,
                                                              spec.cbam_spatial_kernel, rng));
                break;
            case CellKind::Sa:
                layers_.emplace_back(
                    SAConvLSTMParams::init(in_ch, spec.hidden_channels, spec.kernel, rng));
                break;
        }
    }
    head_w = init_kernel({1, spec.hidden_channels, 1, 1}, spec.hidden_channels, rng);
    head_b = zero_param({1});
}

SAConvLSTMParams SAConvLSTMParams::init(int in_channels, int hidden_channels, int kernel,
                                        Rng& rng) {
    SAConvLSTMParams p;
    p.base = ConvLSTMParams::init(in_channels, hidden_channels, kernel, rng);
    p.memory = SAMemoryParams::init(hidden_channels, rng);
    return p;
}

void SAConvLSTMParams::collect(const std::string& prefix, ParamList& out) {
    base.collect(prefix, out);
    memory.collect(prefix + ".mem", out);
}

std::vector<CellState> CloudModel::initial_state(int height, int width) const {
    std::vector<CellState> states;
    states.reserve(layers_.size());
    for (size_t l = 0; l < layers_.size(); ++l)
        states.push_back(
            zero_state(spec_.hidden_channels, height, width, spec_.kind == CellKind::Sa));
    return states;
}

Tensor CloudModel::step_raw(const Tensor& frame, std::vector<CellState>& states) const {
    if (states.size() != layers_.size())
        throw ShapeError("cloud model: state count does not match layer count");
    Tensor x = frame;
    for (size_t l = 0; l < layers_.size(); ++l) {
        const auto& layer = layers_[l];
        if (std::holds_alternative<ConvLSTMParams>(layer))
            states[l] = convlstm_step(std::get<ConvLSTMParams>(layer), x, states[l]);
        else if (std::holds_alternative<CBAMConvLSTMParams>(layer))
            states[l] = cbam_convlstm_step(std::get<CBAMConvLSTMParams>(layer), x, states[l]);
        else
            states[l] = sa_convlstm_step(std::get<SAConvLSTMParams>(layer), x, states[l]);
        x = states[l].h;
    }
    return add_channel_bias(conv2d(x, head_w, Tensor()), head_b);
}

std::vector<Tensor> CloudModel::rollout(const std::vector<Tensor>& inputs, int horizon) const {
    auto states = initial_state(inputs.at(0).dim(1), inputs.at(0).dim(2));
    return rollout_with([&](const Tensor& f) { return step_raw(f, states); }, inputs, horizon);
}

ParamList CloudModel::parameters() {
    ParamList out;
    for (size_t l = 0; l < layers_.size(); ++l) {
        const std::string prefix = "layer" + std::to_string(l);
        std::visit([&](auto& p) { p.collect(prefix, out); }, layers_[l]);
    }
    out.push_back({"head.w", head_w});
    out.push_back({"head.b", head_b});
    return out;
}

long CloudModel::parameter_count() const {
    long n = 0;
    for (const auto& p : const_cast<CloudModel*>(this)->parameters()) n += p.tensor.numel();
    return n;
}

long cloud_model_parameter_count(const CloudModelSpec& spec) {
    CloudModel m(spec, 0);
    return m.parameter_count();
}

void CloudModel::set_identity_attention(bool value) {
    for (auto& layer : layers_)
        if (std::holds_alternative<CBAMConvLSTMParams>(layer))
            std::get<CBAMConvLSTMParams>(layer).set_identity_attention(value);
}

nlohmann::json CloudModel::describe() const {
    nlohmann::json j;
    j["cell"] = cell_kind_name(spec_.kind);
    j["layers"] = spec_.layers;
    j["hidden_channels"] = spec_.hidden_channels;
    j["kernel"] = spec_.kernel;
    j["cbam_reduction"] = spec_.cbam_reduction;
    j["cbam_spatial_kernel"] = spec_.cbam_spatial_kernel;
    j["input_channels"] = spec_.input_channels;
    return j;
}

CloudModelSpec CloudModel::spec_from_json(const nlohmann::json& j) {
    CloudModelSpec spec;
    spec.kind = cell_kind_from_name(j.at("cell").get<std::string>());
    spec.layers = j.value("layers", 1);
    spec.hidden_channels = j.value("hidden_channels", 32);
    spec.kernel = j.value("kernel", 3);
    spec.cbam_reduction = j.value("cbam_reduction", 4);
    spec.cbam_spatial_kernel = j.value("cbam_spatial_kernel", 7);
    spec.input_channels = j.value("input_channels", 1);
    return spec;
}

void CloudModel::save(const std::string& basepath) const {
    auto params = const_cast<CloudModel*>(this)->parameters();
    save_checkpoint(basepath + ".ckpt", params, describe());
    std::ofstream arch(basepath + ".json", std::ios::trunc);
    if (!arch) throw ParseError("cannot write model description: " + basepath + ".json");
    arch << describe().dump(2) << "\n";
}

CloudModel CloudModel::load(const std::string& basepath) {
    std::ifstream arch(basepath + ".json");
    if (!arch) throw MissingArtifactError("model description not found: " + basepath + ".json");
    nlohmann::json j;
    try {
        arch >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ParseError("invalid model description " + basepath + ".json: " + e.what());
    }
    CloudModel model(spec_from_json(j), 0);
    ParamList stored = load_checkpoint(basepath + ".ckpt");
    ParamList live = model.parameters();
    assign_parameters(live, stored);
    return model;
}

}  // namespace cloudcast
