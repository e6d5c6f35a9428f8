#pragma once

#include <functional>
#include <string>
#include <variant>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "cloudcast/checkpoint.hpp"
#include "cloudcast/tensor.hpp"

namespace cloudcast {

// One gate of a convolutional LSTM: hidden->gate kernel, input->gate kernel,
// bias. Kernels are [C_h,C_h,k,k] and [C_h,C_in,k,k].
struct ConvGateParams {
    Tensor w_h;
    Tensor w_x;
    Tensor b;
};

struct ConvLSTMParams {
    int in_channels = 1;
    int hidden_channels = 32;
    int kernel = 3;
    ConvGateParams gate_i, gate_o, gate_f, gate_c;

    static ConvLSTMParams init(int in_channels, int hidden_channels, int kernel, Rng& rng);
    void collect(const std::string& prefix, ParamList& out);
};

// Channel-then-spatial attention. The shared MLP has hidden width
// max(1, C/reduction); the spatial kernel maps the [avg;max] channel pools
// (2 channels) to one attention map.
struct CBAMParams {
    int channels = 32;
    int reduction = 4;
    int spatial_kernel = 7;
    Tensor mlp_w1, mlp_b1, mlp_w2, mlp_b2;
    Tensor spatial_w;
    // Test hook: forces both attention maps to one, making cbam() the
    // identity. Never enabled by production paths.
    bool identity_attention = false;

    static CBAMParams init(int channels, int reduction, int spatial_kernel, Rng& rng);
    void collect(const std::string& prefix, ParamList& out);
};

struct CBAMConvLSTMParams {
    ConvLSTMParams base;
    // One independent attention block per convolution term, in gate order
    // i,o,f,c and (hidden, input) within a gate.
    CBAMParams att_ih, att_ix, att_oh, att_ox, att_fh, att_fx, att_ch, att_cx;

    static CBAMConvLSTMParams init(int in_channels, int hidden_channels, int kernel,
                                   int reduction, int spatial_kernel, Rng& rng);
    void collect(const std::string& prefix, ParamList& out);
    void set_identity_attention(bool value);
};

// Self-attention memory: 1x1 projections for query/key/value over the hidden
// map and key/value over the memory map, a 1x1 mixing kernel over the
// concatenated branches, and 1x1 gate convolutions updating the memory.
struct SAMemoryParams {
    int channels = 32;
    int attn_dim = 16;  // reduced query/key dimension, max(1, C/2)
    Tensor w_q, w_kh, w_vh, w_km, w_vm, w_mix;
    Tensor w_ih, w_iz, b_i;
    Tensor w_oh, w_oz, b_o;
    Tensor w_mh, w_mz, b_m;

    static SAMemoryParams init(int channels, Rng& rng);
    void collect(const std::string& prefix, ParamList& out);
};

struct SAConvLSTMParams {
    ConvLSTMParams base;
    SAMemoryParams memory;

    static SAConvLSTMParams init(int in_channels, int hidden_channels, int kernel, Rng& rng);
    void collect(const std::string& prefix, ParamList& out);
};

// Per-layer recurrent state. m is defined for self-attention cells only.
struct CellState {
    Tensor h;
    Tensor c;
    Tensor m;
};

CellState zero_state(int hidden_channels, int height, int width, bool with_memory);

CellState convlstm_step(const ConvLSTMParams& params, const Tensor& x, const CellState& state);
Tensor cbam(const CBAMParams& params, const Tensor& feature_map);
CellState cbam_convlstm_step(const CBAMConvLSTMParams& params, const Tensor& x,
                             const CellState& state);
// Aggregated feature map Z from self-attention over the hidden map and the
// previous memory. attention_out, when given, receives the two row-stochastic
// attention matrices (hidden branch, memory branch) for inspection.
Tensor self_attention_aggregate(const SAMemoryParams& params, const Tensor& h,
                                const Tensor& m_prev,
                                std::vector<Tensor>* attention_out = nullptr);
CellState sa_convlstm_step(const SAConvLSTMParams& params, const Tensor& x,
                           const CellState& state);

// ---------------------------------------------------------------------------
// Stacked sequence-to-sequence cloud model
// ---------------------------------------------------------------------------

enum class CellKind { ConvLstm, Cbam, Sa };

std::string cell_kind_name(CellKind kind);
CellKind cell_kind_from_name(const std::string& name);

struct CloudModelSpec {
    CellKind kind = CellKind::ConvLstm;
    int layers = 1;
    int hidden_channels = 32;
    int kernel = 3;
    int cbam_reduction = 4;
    int cbam_spatial_kernel = 7;
    int input_channels = 1;
};

// Consumes the six input frames to warm the state, then feeds each emitted
// frame back as the next input. Every emitted frame is clamped to [0,1].
std::vector<Tensor> rollout_with(const std::function<Tensor(const Tensor&)>& step_once,
                                 const std::vector<Tensor>& inputs, int horizon);

class CloudModel {
  public:
    CloudModel(CloudModelSpec spec, uint64_t seed);

    const CloudModelSpec& spec() const { return spec_; }

    std::vector<CellState> initial_state(int height, int width) const;
    // One recurrent step through the stack; returns the unclamped head output
    // [1,H,W] and advances `states` in place.
    Tensor step_raw(const Tensor& frame, std::vector<CellState>& states) const;
    // Autoregressive forecast from a fresh zero state.
    std::vector<Tensor> rollout(const std::vector<Tensor>& inputs, int horizon) const;

    ParamList parameters();
    long parameter_count() const;
    void set_identity_attention(bool value);

    nlohmann::json describe() const;
    static CloudModelSpec spec_from_json(const nlohmann::json& j);

    // Writes <basepath>.ckpt and <basepath>.json.
    void save(const std::string& basepath) const;
    static CloudModel load(const std::string& basepath);

  private:
    using LayerParams = std::variant<ConvLSTMParams, CBAMConvLSTMParams, SAConvLSTMParams>;
    CloudModelSpec spec_;
    std::vector<LayerParams> layers_;
    Tensor head_w, head_b;  // 1x1 conv, hidden -> 1 channel
};

long cloud_model_parameter_count(const CloudModelSpec& spec);

}  // namespace cloudcast
