#pragma once

// A small pre-LayerNorm decoder-only transformer (GPT-2 layout with learned
// absolute positions and GELU) with a hand-written backward pass.
// Instantiated with float for training and double for gradient checks.
//
// Linear weights are stored [d_out, d_in] row-major, so the quantization
// probes see output channels as rows.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "json.hpp"

#include "quantaudit/error.hpp"
#include "quantaudit/rng.hpp"
#include "quantaudit/weightstore.hpp"

namespace quantaudit::toylab {

struct TinyLMConfig {
  std::int64_t n_layers = 2;
  std::int64_t d_model = 64;
  std::int64_t n_heads = 2;
  std::int64_t d_ff = 256;
  std::int64_t vocab_size = 256;
  std::int64_t seq_len = 128;

  std::int64_t head_dim() const { return d_model / n_heads; }

  void validate() const {
    if (n_layers < 1 || d_model < 1 || n_heads < 1 || d_ff < 1 || vocab_size < 1)
      throw DomainError("model dimensions must be positive");
    if (d_model % n_heads != 0)
      throw DomainError("d_model (" + std::to_string(d_model) + ") must be divisible by n_heads (" +
                        std::to_string(n_heads) + ")");
    if (seq_len < 2) throw DomainError("seq_len must be >= 2");
  }

  friend bool operator==(const TinyLMConfig&, const TinyLMConfig&) = default;
};

inline nlohmann::ordered_json to_json(const TinyLMConfig& c) {
  nlohmann::ordered_json j;
  j["n_layers"] = c.n_layers;
  j["d_model"] = c.d_model;
  j["n_heads"] = c.n_heads;
  j["d_ff"] = c.d_ff;
  j["vocab_size"] = c.vocab_size;
  j["seq_len"] = c.seq_len;
  return j;
}

inline TinyLMConfig model_config_from_json(const nlohmann::json& j) {
  TinyLMConfig c;
  c.n_layers = j.value("n_layers", c.n_layers);
  c.d_model = j.value("d_model", c.d_model);
  c.n_heads = j.value("n_heads", c.n_heads);
  c.d_ff = j.value("d_ff", c.d_ff);
  c.vocab_size = j.value("vocab_size", c.vocab_size);
  c.seq_len = j.value("seq_len", c.seq_len);
  c.validate();
  return c;
}

// Checkpoint metadata key holding the model config as JSON.
inline constexpr const char* kModelMetaKey = "model";

inline TinyLMConfig model_config_from_meta(const std::map<std::string, std::string>& meta) {
  auto it = meta.find(kModelMetaKey);
  if (it == meta.end()) throw FormatError("checkpoint metadata has no 'model' entry");
  try {
    return model_config_from_json(nlohmann::json::parse(it->second));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("invalid model metadata: ") + e.what());
  }
}

struct ParamSlot {
  std::string name;
  std::vector<std::int64_t> shape;
  std::size_t offset = 0;
  std::size_t size = 0;
};

namespace detail {

struct LayerOffsets {
  std::size_t ln1_g, ln1_b, qkv_w, qkv_b, out_w, out_b, ln2_g, ln2_b, fc_w, fc_b, proj_w, proj_b;
};

struct Layout {
  std::vector<ParamSlot> slots;
  std::size_t tok = 0, pos = 0, lnf_g = 0, lnf_b = 0, head = 0, total = 0;
  std::vector<LayerOffsets> layers;
};

inline Layout make_layout(const TinyLMConfig& c) {
  Layout L;
  auto add = [&](std::string name, std::vector<std::int64_t> shape) {
    std::size_t n = 1;
    for (auto d : shape) n *= static_cast<std::size_t>(d);
    L.slots.push_back({std::move(name), std::move(shape), L.total, n});
    const auto off = L.total;
    L.total += n;
    return off;
  };
  const auto d = c.d_model, f = c.d_ff, v = c.vocab_size;
  L.tok = add("tok_embed.weight", {v, d});
  L.pos = add("pos_embed.weight", {c.seq_len, d});
  for (std::int64_t l = 0; l < c.n_layers; ++l) {
    const std::string p = "blocks." + std::to_string(l) + ".";
    LayerOffsets o{};
    o.ln1_g = add(p + "norm1.weight", {d});
    o.ln1_b = add(p + "norm1.bias", {d});
    o.qkv_w = add(p + "attn.qkv.weight", {3 * d, d});
    o.qkv_b = add(p + "attn.qkv.bias", {3 * d});
    o.out_w = add(p + "attn.out.weight", {d, d});
    o.out_b = add(p + "attn.out.bias", {d});
    o.ln2_g = add(p + "norm2.weight", {d});
    o.ln2_b = add(p + "norm2.bias", {d});
    o.fc_w = add(p + "mlp.fc.weight", {f, d});
    o.fc_b = add(p + "mlp.fc.bias", {f});
    o.proj_w = add(p + "mlp.proj.weight", {d, f});
    o.proj_b = add(p + "mlp.proj.bias", {d});
    L.layers.push_back(o);
  }
  L.lnf_g = add("final_norm.weight", {d});
  L.lnf_b = add("final_norm.bias", {d});
  L.head = add("lm_head.weight", {v, d});
  return L;
}

inline constexpr double kLayerNormEps = 1e-5;

}  // namespace detail

// Activations kept from the forward pass for backward, plus scratch.
template <class T>
struct Workspace {
  std::int64_t batch = 0, seq = 0;
  std::vector<T> resid;      // (L + 1) x N x d; resid[0] is the embedding sum
  std::vector<T> resid_mid;  // L x N x d, after attention
  std::vector<T> ln1, ln2;   // L x N x d
  std::vector<T> ln1_mean, ln1_rstd, ln2_mean, ln2_rstd;  // L x N
  std::vector<T> qkv;        // L x N x 3d
  std::vector<T> probs;      // L x B x H x S x S
  std::vector<T> att;        // L x N x d
  std::vector<T> fc_pre, fc_act;  // L x N x F
  std::vector<T> lnf, lnf_mean, lnf_rstd;
  std::vector<T> logits;     // N x V; softmax probabilities after the loss
  // backward scratch
  std::vector<T> d_resid, d_mid, d_nd, d_qkv, d_fc, d_logits, d_scores;

  void resize(const TinyLMConfig& c, std::int64_t b, std::int64_t s) {
    if (b == batch && s == seq && !resid.empty()) return;
    batch = b;
    seq = s;
    const auto N = static_cast<std::size_t>(b * s), L = static_cast<std::size_t>(c.n_layers);
    const auto d = static_cast<std::size_t>(c.d_model), F = static_cast<std::size_t>(c.d_ff);
    const auto V = static_cast<std::size_t>(c.vocab_size), H = static_cast<std::size_t>(c.n_heads);
    resid.assign((L + 1) * N * d, T(0));
    resid_mid.assign(L * N * d, T(0));
    ln1.assign(L * N * d, T(0));
    ln2.assign(L * N * d, T(0));
    ln1_mean.assign(L * N, T(0));
    ln1_rstd.assign(L * N, T(0));
    ln2_mean.assign(L * N, T(0));
    ln2_rstd.assign(L * N, T(0));
    qkv.assign(L * N * 3 * d, T(0));
    probs.assign(L * static_cast<std::size_t>(b) * H * static_cast<std::size_t>(s * s), T(0));
    att.assign(L * N * d, T(0));
    fc_pre.assign(L * N * F, T(0));
    fc_act.assign(L * N * F, T(0));
    lnf.assign(N * d, T(0));
    lnf_mean.assign(N, T(0));
    lnf_rstd.assign(N, T(0));
    logits.assign(N * V, T(0));
    d_resid.assign(N * d, T(0));
    d_mid.assign(N * d, T(0));
    d_nd.assign(N * d, T(0));
    d_qkv.assign(N * 3 * d, T(0));
    d_fc.assign(N * F, T(0));
    d_logits.assign(N * V, T(0));
    d_scores.assign(static_cast<std::size_t>(s * s), T(0));
  }
};

template <class T>
class TinyLM {
 public:
  using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using MatMap = Eigen::Map<Mat>;
  using CMatMap = Eigen::Map<const Mat>;
  using Strided = Eigen::Map<Mat, 0, Eigen::OuterStride<>>;
  using CStrided = Eigen::Map<const Mat, 0, Eigen::OuterStride<>>;
  using RowVec = Eigen::Matrix<T, 1, Eigen::Dynamic>;
  using CRowMap = Eigen::Map<const RowVec>;
  using RowMap = Eigen::Map<RowVec>;

  explicit TinyLM(TinyLMConfig cfg) : cfg_(cfg) {
    cfg_.validate();
    layout_ = detail::make_layout(cfg_);
    params_.assign(layout_.total, T(0));
  }

  // GPT-2 style init: N(0, 0.02) weights, residual output projections
  // scaled by 1/sqrt(2 * n_layers), unit LayerNorm gains, zero biases.
  static TinyLM init(const TinyLMConfig& cfg, std::uint64_t seed) {
    TinyLM m(cfg);
    Rng rng(hash_combine(seed, 0x1a17));
    const double resid_std = 0.02 / std::sqrt(2.0 * static_cast<double>(cfg.n_layers));
    for (const auto& slot : m.layout_.slots) {
      auto* p = m.params_.data() + slot.offset;
      const bool is_norm_gain = slot.name.find("norm") != std::string::npos && slot.name.ends_with(".weight");
      const bool is_bias = slot.name.ends_with(".bias");
      const bool is_resid_proj = slot.name.ends_with("attn.out.weight") || slot.name.ends_with("mlp.proj.weight");
      for (std::size_t i = 0; i < slot.size; ++i) {
        if (is_norm_gain)
          p[i] = T(1);
        else if (is_bias)
          p[i] = T(0);
        else
          p[i] = static_cast<T>(rng.normal(0.0, is_resid_proj ? resid_std : 0.02));
      }
    }
    return m;
  }

  static TinyLM from_tensors(const TinyLMConfig& cfg, const TensorMap& tensors) {
    TinyLM m(cfg);
    for (const auto& slot : m.layout_.slots) {
      auto it = tensors.find(slot.name);
      if (it == tensors.end()) throw FormatError("checkpoint is missing model tensor '" + slot.name + "'");
      if (it->second.shape != slot.shape) throw ShapeError("tensor '" + slot.name + "' has the wrong shape for this model");
      std::copy(it->second.data.begin(), it->second.data.end(), m.params_.begin() + static_cast<std::ptrdiff_t>(slot.offset));
    }
    if (tensors.size() != m.layout_.slots.size()) throw FormatError("checkpoint holds tensors this model does not use");
    return m;
  }

  TensorMap to_tensors() const {
    TensorMap out;
    for (const auto& slot : layout_.slots) {
      Tensor t;
      t.shape = slot.shape;
      t.data.resize(slot.size);
      for (std::size_t i = 0; i < slot.size; ++i) t.data[i] = static_cast<float>(params_[slot.offset + i]);
      out.emplace(slot.name, std::move(t));
    }
    return out;
  }

  const TinyLMConfig& config() const { return cfg_; }
  const std::vector<ParamSlot>& slots() const { return layout_.slots; }
  std::size_t num_params() const { return params_.size(); }
  std::span<T> params() { return params_; }
  std::span<const T> params() const { return params_; }

  std::size_t vocab_size() const { return static_cast<std::size_t>(cfg_.vocab_size); }
  std::size_t context_length() const { return static_cast<std::size_t>(cfg_.seq_len); }

  // Logits for one sequence (LanguageModel interface). Thread-safe.
  void logits(std::span<const std::uint32_t> tokens, std::span<float> out) const {
    Workspace<T> ws;
    const auto s = static_cast<std::int64_t>(tokens.size());
    forward(tokens, 1, s, ws, false);
    const auto n = static_cast<std::size_t>(s * cfg_.vocab_size);
    if (out.size() < n) throw ShapeError("logits buffer too small");
    for (std::size_t i = 0; i < n; ++i) out[i] = static_cast<float>(ws.logits[i]);
  }

  // Runs the network on `batch` sequences of `seq` tokens (row-major) and
  // leaves raw logits in ws.logits. With check_finite, a non-finite
  // residual stream raises DomainError naming the layer.
  void forward(std::span<const std::uint32_t> tokens, std::int64_t batch, std::int64_t seq, Workspace<T>& ws,
               bool check_finite = true) const {
    if (seq < 1 || seq > cfg_.seq_len) throw DomainError("sequence length outside model context");
    if (static_cast<std::int64_t>(tokens.size()) != batch * seq) throw ShapeError("token count does not match batch x seq");
    for (auto t : tokens)
      if (t >= static_cast<std::uint32_t>(cfg_.vocab_size)) throw DomainError("token id outside model vocabulary");
    ws.resize(cfg_, batch, seq);
    const std::int64_t N = batch * seq, d = cfg_.d_model, F = cfg_.d_ff, V = cfg_.vocab_size;
    const T* P = params_.data();

    {
      MatMap x0(ws.resid.data(), N, d);
      CMatMap tok(P + layout_.tok, V, d), pos(P + layout_.pos, cfg_.seq_len, d);
      for (std::int64_t n = 0; n < N; ++n) x0.row(n) = tok.row(tokens[n]) + pos.row(n % seq);
    }

    for (std::int64_t l = 0; l < cfg_.n_layers; ++l) {
      const auto& o = layout_.layers[l];
      const auto nd = static_cast<std::size_t>(N * d);
      T* x = ws.resid.data() + l * nd;
      T* mid = ws.resid_mid.data() + l * nd;
      T* h1 = ws.ln1.data() + l * nd;
      T* h2 = ws.ln2.data() + l * nd;
      T* qkv = ws.qkv.data() + l * nd * 3;
      T* att = ws.att.data() + l * nd;
      T* fpre = ws.fc_pre.data() + l * N * F;
      T* fact = ws.fc_act.data() + l * N * F;
      T* next = ws.resid.data() + (l + 1) * nd;

      layernorm_forward(x, h1, ws.ln1_mean.data() + l * N, ws.ln1_rstd.data() + l * N, P + o.ln1_g, P + o.ln1_b, N);
      linear_forward(h1, P + o.qkv_w, P + o.qkv_b, qkv, N, d, 3 * d);
      attention_forward(qkv, att, ws.probs.data() + l * batch * cfg_.n_heads * seq * seq, batch, seq);
      linear_forward(att, P + o.out_w, P + o.out_b, mid, N, d, d);
      MatMap(mid, N, d) += CMatMap(x, N, d);

      layernorm_forward(mid, h2, ws.ln2_mean.data() + l * N, ws.ln2_rstd.data() + l * N, P + o.ln2_g, P + o.ln2_b, N);
      linear_forward(h2, P + o.fc_w, P + o.fc_b, fpre, N, d, F);
      for (std::int64_t i = 0; i < N * F; ++i) fact[i] = gelu(fpre[i]);
      linear_forward(fact, P + o.proj_w, P + o.proj_b, next, N, F, d);
      MatMap(next, N, d) += CMatMap(mid, N, d);

      if (check_finite && !CMatMap(next, N, d).allFinite())
        throw DomainError("non-finite activations after layer " + std::to_string(l));
    }

    const T* xl = ws.resid.data() + cfg_.n_layers * N * d;
    layernorm_forward(xl, ws.lnf.data(), ws.lnf_mean.data(), ws.lnf_rstd.data(), P + layout_.lnf_g, P + layout_.lnf_b, N);
    MatMap(ws.logits.data(), N, V).noalias() = CMatMap(ws.lnf.data(), N, d) * CMatMap(P + layout_.head, V, d).transpose();
  }

  // Mean next-token cross-entropy (nats) over the batch; positions 0..seq-2
  // are scored. Overwrites ws.logits with softmax probabilities.
  double loss_from_logits(std::span<const std::uint32_t> tokens, Workspace<T>& ws) const {
    const std::int64_t B = ws.batch, S = ws.seq, V = cfg_.vocab_size;
    double total = 0.0;
    for (std::int64_t b = 0; b < B; ++b) {
      for (std::int64_t t = 0; t < S; ++t) {
        T* row = ws.logits.data() + (b * S + t) * V;
        T mx = row[0];
        for (std::int64_t v = 1; v < V; ++v) mx = std::max(mx, row[v]);
        T sum = 0;
        for (std::int64_t v = 0; v < V; ++v) sum += (row[v] = std::exp(row[v] - mx));
        for (std::int64_t v = 0; v < V; ++v) row[v] /= sum;
        if (t + 1 < S) total -= std::log(static_cast<double>(row[tokens[b * S + t + 1]]));
      }
    }
    return total / static_cast<double>(B * (S - 1));
  }

  struct LossAndLogits {
    double loss = 0.0;
    std::vector<float> logits;  // batch x seq x vocab
  };

  LossAndLogits forward_loss(std::span<const std::uint32_t> tokens, std::int64_t batch) const {
    Workspace<T> ws;
    const auto seq = static_cast<std::int64_t>(tokens.size()) / std::max<std::int64_t>(batch, 1);
    if (seq < 2) throw DomainError("forward_loss needs sequences of at least 2 tokens");
    forward(tokens, batch, seq, ws);
    LossAndLogits r;
    r.logits.assign(ws.logits.begin(), ws.logits.end());
    r.loss = loss_from_logits(tokens, ws);
    return r;
  }

  // Forward + backward. Gradients are written (not accumulated) into
  // `grads`, which must have num_params() entries. Returns the mean loss.
  double loss_and_grad(std::span<const std::uint32_t> tokens, std::int64_t batch, std::span<T> grads,
                       Workspace<T>& ws) const {
    const auto seq = static_cast<std::int64_t>(tokens.size()) / std::max<std::int64_t>(batch, 1);
    if (seq < 2) throw DomainError("training sequences need at least 2 tokens");
    if (grads.size() != params_.size()) throw ShapeError("gradient buffer has the wrong size");
    forward(tokens, batch, seq, ws);
    const double loss = loss_from_logits(tokens, ws);
    backward(tokens, ws, grads);
    return loss;
  }

 private:
  static T gelu(T x) {
    const T c = static_cast<T>(std::sqrt(2.0 / std::numbers::pi));
    return T(0.5) * x * (T(1) + std::tanh(c * (x + T(0.044715) * x * x * x)));
  }
  static T gelu_grad(T x) {
    const T c = static_cast<T>(std::sqrt(2.0 / std::numbers::pi));
    const T u = c * (x + T(0.044715) * x * x * x);
    const T th = std::tanh(u);
    return T(0.5) * (T(1) + th) + T(0.5) * x * (T(1) - th * th) * c * (T(1) + T(3) * T(0.044715) * x * x);
  }

  void layernorm_forward(const T* in, T* out, T* mean, T* rstd, const T* g, const T* b, std::int64_t N) const {
    const std::int64_t d = cfg_.d_model;
    for (std::int64_t n = 0; n < N; ++n) {
      const T* x = in + n * d;
      T m = 0;
      for (std::int64_t i = 0; i < d; ++i) m += x[i];
      m /= static_cast<T>(d);
      T v = 0;
      for (std::int64_t i = 0; i < d; ++i) v += (x[i] - m) * (x[i] - m);
      v /= static_cast<T>(d);
      const T r = T(1) / std::sqrt(v + static_cast<T>(detail::kLayerNormEps));
      T* y = out + n * d;
      for (std::int64_t i = 0; i < d; ++i) y[i] = (x[i] - m) * r * g[i] + b[i];
      mean[n] = m;
      rstd[n] = r;
    }
  }

  // dx += LN backward of dy; dg, db accumulate.
  void layernorm_backward(const T* dy, const T* in, const T* mean, const T* rstd, const T* g, T* dx, T* dg, T* db,
                          std::int64_t N) const {
    const std::int64_t d = cfg_.d_model;
    for (std::int64_t n = 0; n < N; ++n) {
      const T* x = in + n * d;
      const T* dyn = dy + n * d;
      T* dxn = dx + n * d;
      const T m = mean[n], r = rstd[n];
      T sum_dxhat = 0, sum_dxhat_xhat = 0;
      for (std::int64_t i = 0; i < d; ++i) {
        const T xhat = (x[i] - m) * r;
        const T dxhat = dyn[i] * g[i];
        sum_dxhat += dxhat;
        sum_dxhat_xhat += dxhat * xhat;
        dg[i] += dyn[i] * xhat;
        db[i] += dyn[i];
      }
      sum_dxhat /= static_cast<T>(d);
      sum_dxhat_xhat /= static_cast<T>(d);
      for (std::int64_t i = 0; i < d; ++i) {
        const T xhat = (x[i] - m) * r;
        dxn[i] += r * (dyn[i] * g[i] - sum_dxhat - xhat * sum_dxhat_xhat);
      }
    }
  }

  // out[N, dout] = in[N, din] * W[dout, din]^T + bias
  static void linear_forward(const T* in, const T* w, const T* bias, T* out, std::int64_t N, std::int64_t din,
                             std::int64_t dout) {
    MatMap y(out, N, dout);
    y.noalias() = CMatMap(in, N, din) * CMatMap(w, dout, din).transpose();
    y.rowwise() += CRowMap(bias, dout);
  }

  // Given dy[N, dout]: dW += dy^T in, db += colsum(dy), din_out = dy W
  // (overwritten).
  static void linear_backward(const T* dy, const T* in, const T* w, T* dw, T* db, T* din_out, std::int64_t N,
                              std::int64_t din, std::int64_t dout) {
    CMatMap DY(dy, N, dout);
    MatMap(dw, dout, din).noalias() += DY.transpose() * CMatMap(in, N, din);
    // Plain row loop: Eigen's vectorized colwise sum changes its summation
    // order with buffer alignment, which broke same-seed bit identity.
    if (db)
      for (std::int64_t n = 0; n < N; ++n)
        for (std::int64_t j = 0; j < dout; ++j) db[j] += dy[n * dout + j];
    if (din_out) MatMap(din_out, N, din).noalias() = DY * CMatMap(w, dout, din);
  }

  void attention_forward(const T* qkv, T* att, T* probs, std::int64_t B, std::int64_t S) const {
    const std::int64_t d = cfg_.d_model, H = cfg_.n_heads, hd = cfg_.head_dim();
    const T scale = T(1) / std::sqrt(static_cast<T>(hd));
    for (std::int64_t b = 0; b < B; ++b) {
      for (std::int64_t h = 0; h < H; ++h) {
        const T* base = qkv + b * S * 3 * d;
        CStrided Q(base + h * hd, S, hd, Eigen::OuterStride<>(3 * d));
        CStrided K(base + d + h * hd, S, hd, Eigen::OuterStride<>(3 * d));
        CStrided Vv(base + 2 * d + h * hd, S, hd, Eigen::OuterStride<>(3 * d));
        MatMap Pm(probs + (b * H + h) * S * S, S, S);
        Pm.noalias() = (Q * K.transpose()) * scale;
        for (std::int64_t i = 0; i < S; ++i) {
          T* row = Pm.row(i).data();
          T mx = row[0];
          for (std::int64_t j = 1; j <= i; ++j) mx = std::max(mx, row[j]);
          T sum = 0;
          for (std::int64_t j = 0; j <= i; ++j) sum += (row[j] = std::exp(row[j] - mx));
          for (std::int64_t j = 0; j <= i; ++j) row[j] /= sum;
          for (std::int64_t j = i + 1; j < S; ++j) row[j] = T(0);
        }
        Strided O(att + b * S * d + h * hd, S, hd, Eigen::OuterStride<>(d));
        O.noalias() = Pm * Vv;
      }
    }
  }

  // d_qkv is overwritten.
  void attention_backward(const T* d_att, const T* qkv, const T* probs, T* d_qkv, T* scratch, std::int64_t B,
                          std::int64_t S) const {
    const std::int64_t d = cfg_.d_model, H = cfg_.n_heads, hd = cfg_.head_dim();
    const T scale = T(1) / std::sqrt(static_cast<T>(hd));
    for (std::int64_t b = 0; b < B; ++b) {
      for (std::int64_t h = 0; h < H; ++h) {
        const T* base = qkv + b * S * 3 * d;
        T* dbase = d_qkv + b * S * 3 * d;
        CStrided Q(base + h * hd, S, hd, Eigen::OuterStride<>(3 * d));
        CStrided K(base + d + h * hd, S, hd, Eigen::OuterStride<>(3 * d));
        CStrided Vv(base + 2 * d + h * hd, S, hd, Eigen::OuterStride<>(3 * d));
        Strided dQ(dbase + h * hd, S, hd, Eigen::OuterStride<>(3 * d));
        Strided dK(dbase + d + h * hd, S, hd, Eigen::OuterStride<>(3 * d));
        Strided dV(dbase + 2 * d + h * hd, S, hd, Eigen::OuterStride<>(3 * d));
        CStrided dO(d_att + b * S * d + h * hd, S, hd, Eigen::OuterStride<>(d));
        CMatMap Pm(probs + (b * H + h) * S * S, S, S);
        MatMap dS(scratch, S, S);

        dV.noalias() = Pm.transpose() * dO;
        dS.noalias() = dO * Vv.transpose();  // dP
        for (std::int64_t i = 0; i < S; ++i) {
          T dot = 0;
          for (std::int64_t j = 0; j <= i; ++j) dot += Pm(i, j) * dS(i, j);
          for (std::int64_t j = 0; j <= i; ++j) dS(i, j) = Pm(i, j) * (dS(i, j) - dot) * scale;
          for (std::int64_t j = i + 1; j < S; ++j) dS(i, j) = T(0);
        }
        dQ.noalias() = dS * K;
        dK.noalias() = dS.transpose() * Q;
      }
    }
  }

  void backward(std::span<const std::uint32_t> tokens, Workspace<T>& ws, std::span<T> grads) const {
    const std::int64_t B = ws.batch, S = ws.seq, N = B * S;
    const std::int64_t d = cfg_.d_model, F = cfg_.d_ff, V = cfg_.vocab_size;
    const T* P = params_.data();
    T* G = grads.data();
    std::fill(grads.begin(), grads.end(), T(0));

    // dlogits = (softmax - onehot) / count on scored positions.
    const T inv_count = T(1) / static_cast<T>(B * (S - 1));
    for (std::int64_t b = 0; b < B; ++b) {
      for (std::int64_t t = 0; t < S; ++t) {
        const std::int64_t n = b * S + t;
        T* drow = ws.d_logits.data() + n * V;
        const T* prow = ws.logits.data() + n * V;
        if (t + 1 < S) {
          for (std::int64_t v = 0; v < V; ++v) drow[v] = prow[v] * inv_count;
          drow[tokens[n + 1]] -= inv_count;
        } else {
          std::fill(drow, drow + V, T(0));
        }
      }
    }

    // Head (no bias) and final norm.
    linear_backward(ws.d_logits.data(), ws.lnf.data(), P + layout_.head, G + layout_.head, nullptr, ws.d_nd.data(), N, d, V);
    std::fill(ws.d_resid.begin(), ws.d_resid.end(), T(0));
    const T* xl = ws.resid.data() + cfg_.n_layers * N * d;
    layernorm_backward(ws.d_nd.data(), xl, ws.lnf_mean.data(), ws.lnf_rstd.data(), P + layout_.lnf_g, ws.d_resid.data(),
                       G + layout_.lnf_g, G + layout_.lnf_b, N);

    for (std::int64_t l = cfg_.n_layers - 1; l >= 0; --l) {
      const auto& o = layout_.layers[l];
      const auto nd = static_cast<std::size_t>(N * d);
      const T* x = ws.resid.data() + l * nd;
      const T* mid = ws.resid_mid.data() + l * nd;
      const T* h1 = ws.ln1.data() + l * nd;
      const T* h2 = ws.ln2.data() + l * nd;
      const T* qkv = ws.qkv.data() + l * nd * 3;
      const T* att = ws.att.data() + l * nd;
      const T* fpre = ws.fc_pre.data() + l * N * F;
      const T* fact = ws.fc_act.data() + l * N * F;

      // MLP: next = mid + proj(gelu(fc(ln2(mid))))
      linear_backward(ws.d_resid.data(), fact, P + o.proj_w, G + o.proj_w, G + o.proj_b, ws.d_fc.data(), N, F, d);
      for (std::int64_t i = 0; i < N * F; ++i) ws.d_fc[i] *= gelu_grad(fpre[i]);
      linear_backward(ws.d_fc.data(), h2, P + o.fc_w, G + o.fc_w, G + o.fc_b, ws.d_nd.data(), N, d, F);
      std::copy(ws.d_resid.begin(), ws.d_resid.end(), ws.d_mid.begin());
      layernorm_backward(ws.d_nd.data(), mid, ws.ln2_mean.data() + l * N, ws.ln2_rstd.data() + l * N, P + o.ln2_g,
                         ws.d_mid.data(), G + o.ln2_g, G + o.ln2_b, N);

      // Attention: mid = x + out(attn(qkv(ln1(x))))
      linear_backward(ws.d_mid.data(), att, P + o.out_w, G + o.out_w, G + o.out_b, ws.d_nd.data(), N, d, d);
      attention_backward(ws.d_nd.data(), qkv, ws.probs.data() + l * B * cfg_.n_heads * S * S, ws.d_qkv.data(),
                         ws.d_scores.data(), B, S);
      linear_backward(ws.d_qkv.data(), h1, P + o.qkv_w, G + o.qkv_w, G + o.qkv_b, ws.d_nd.data(), N, d, 3 * d);
      std::copy(ws.d_mid.begin(), ws.d_mid.end(), ws.d_resid.begin());
      layernorm_backward(ws.d_nd.data(), x, ws.ln1_mean.data() + l * N, ws.ln1_rstd.data() + l * N, P + o.ln1_g,
                         ws.d_resid.data(), G + o.ln1_g, G + o.ln1_b, N);
    }

    MatMap dtok(G + layout_.tok, V, d), dpos(G + layout_.pos, cfg_.seq_len, d);
    CMatMap dx(ws.d_resid.data(), N, d);
    for (std::int64_t n = 0; n < N; ++n) {
      dtok.row(tokens[n]) += dx.row(n);
      dpos.row(n % S) += dx.row(n);
    }
  }

  TinyLMConfig cfg_;
  detail::Layout layout_;
  std::vector<T> params_;
};

}  // namespace quantaudit::toylab
