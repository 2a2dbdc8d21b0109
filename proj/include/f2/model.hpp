#pragma once

// Tiny decoder-only transformer with introspection hooks: per-layer/per-head
// attention matrices and per-module hidden states (attention output and FFN
// output of every layer), plus low-rank adapters that can be restricted to an
// arbitrary subset of those modules.

#include <cmath>
#include <map>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "f2/checkpoint.hpp"
#include "f2/common.hpp"
#include "f2/tensor.hpp"

namespace f2 {

struct ModelConfig {
  int vocab_size = 0;
  int d_model = 128;
  int n_layers = 4;
  int n_heads = 4;
  int context_len = 256;
  std::uint64_t seed = 0;

  void validate() const {
    std::vector<std::string> bad;
    if (vocab_size < 2) bad.push_back("vocab_size must be >= 2, got " + std::to_string(vocab_size));
    if (d_model < 1) bad.push_back("d_model must be >= 1, got " + std::to_string(d_model));
    if (n_layers < 1) bad.push_back("n_layers must be >= 1, got " + std::to_string(n_layers));
    if (n_heads < 1) bad.push_back("n_heads must be >= 1, got " + std::to_string(n_heads));
    if (n_heads >= 1 && d_model >= 1 && d_model % n_heads != 0)
      bad.push_back("d_model " + std::to_string(d_model) + " not divisible by n_heads " +
                    std::to_string(n_heads));
    if (context_len < 1) bad.push_back("context_len must be >= 1, got " + std::to_string(context_len));
    if (!bad.empty()) {
      std::string msg = "invalid model config:";
      for (const auto& b : bad) msg += " " + b + ";";
      throw ValidationError(msg);
    }
  }

  int head_dim() const { return d_model / n_heads; }

  nlohmann::json to_json() const {
    return {{"vocab_size", vocab_size}, {"d_model", d_model},       {"n_layers", n_layers},
            {"n_heads", n_heads},       {"context_len", context_len}, {"seed", seed}};
  }

  static ModelConfig from_json(const nlohmann::json& j) {
    ModelConfig cfg;
    cfg.vocab_size = j.at("vocab_size").get<int>();
    cfg.d_model = j.at("d_model").get<int>();
    cfg.n_layers = j.at("n_layers").get<int>();
    cfg.n_heads = j.at("n_heads").get<int>();
    cfg.context_len = j.at("context_len").get<int>();
    cfg.seed = j.at("seed").get<std::uint64_t>();
    return cfg;
  }
};

struct LoraConfig {
  int rank = 8;
  double alpha = 8.0;
  double dropout = 0.0;
  std::vector<std::string> target_module_ids;

  double scale() const { return alpha / static_cast<double>(rank); }

  nlohmann::json to_json() const {
    return {{"rank", rank},
            {"alpha", alpha},
            {"dropout", dropout},
            {"target_module_ids", target_module_ids}};
  }

  static LoraConfig from_json(const nlohmann::json& j) {
    LoraConfig lc;
    lc.rank = j.at("rank").get<int>();
    lc.alpha = j.at("alpha").get<double>();
    lc.dropout = j.at("dropout").get<double>();
    lc.target_module_ids = j.at("target_module_ids").get<std::vector<std::string>>();
    return lc;
  }
};

template <class S>
struct ForwardTraceT {
  TensorT<S> logits;                                   // T x vocab
  std::vector<std::vector<TensorT<S>>> attentions;     // [layer][head], each T x T
  std::map<std::string, TensorT<S>> module_outputs;    // module id -> T x d_model
};

using ForwardTrace = ForwardTraceT<float>;

template <class S>
class ModelT {
 public:
  ModelT() = default;

  static ModelT init(const ModelConfig& cfg) {
    cfg.validate();
    ModelT m;
    m.cfg_ = cfg;
    Rng rng(cfg.seed);
    const int d = cfg.d_model;
    const int ff = 4 * d;
    const S w_std = static_cast<S>(0.02);
    m.add_param("tok_emb", TensorT<S>::randn({cfg.vocab_size, d}, rng, w_std, true));
    m.add_param("pos_emb", TensorT<S>::randn({cfg.context_len, d}, rng, w_std, true));
    for (int l = 0; l < cfg.n_layers; ++l) {
      const std::string p = "layers." + std::to_string(l) + ".";
      m.add_param(p + "ln1.gamma", TensorT<S>::filled({d}, S(1), true));
      m.add_param(p + "ln1.beta", TensorT<S>::zeros({d}, true));
      m.add_param(p + "attn.wq", TensorT<S>::randn({d, d}, rng, w_std, true));
      m.add_param(p + "attn.wk", TensorT<S>::randn({d, d}, rng, w_std, true));
      m.add_param(p + "attn.wv", TensorT<S>::randn({d, d}, rng, w_std, true));
      m.add_param(p + "attn.wo", TensorT<S>::randn({d, d}, rng, w_std, true));
      m.add_param(p + "ln2.gamma", TensorT<S>::filled({d}, S(1), true));
      m.add_param(p + "ln2.beta", TensorT<S>::zeros({d}, true));
      m.add_param(p + "ffn.w1", TensorT<S>::randn({d, ff}, rng, w_std, true));
      m.add_param(p + "ffn.w2", TensorT<S>::randn({ff, d}, rng, w_std, true));
    }
    m.add_param("ln_f.gamma", TensorT<S>::filled({d}, S(1), true));
    m.add_param("ln_f.beta", TensorT<S>::zeros({d}, true));
    m.add_param("lm_head", TensorT<S>::randn({d, cfg.vocab_size}, rng, w_std, true));
    return m;
  }

  const ModelConfig& config() const { return cfg_; }
  bool has_lora() const { return has_lora_; }
  const LoraConfig& lora_config() const { return lora_cfg_; }

  // Addressable modules, in layer order: attention output projection and FFN
  // output projection of every layer.
  std::vector<std::string> module_ids() const {
    std::vector<std::string> ids;
    for (int l = 0; l < cfg_.n_layers; ++l) {
      ids.push_back("attn_out_" + std::to_string(l));
      ids.push_back("ffn_out_" + std::to_string(l));
    }
    return ids;
  }

  TensorT<S>& param(const std::string& name) {
    auto it = by_name_.find(name);
    if (it == by_name_.end()) throw ValidationError("unknown parameter: " + name);
    return params_[it->second].second;
  }
  const TensorT<S>& param(const std::string& name) const {
    auto it = by_name_.find(name);
    if (it == by_name_.end()) throw ValidationError("unknown parameter: " + name);
    return params_[it->second].second;
  }

  const std::vector<std::pair<std::string, TensorT<S>>>& named_params() const { return params_; }

  std::vector<TensorT<S>> trainable_params() const {
    std::vector<TensorT<S>> out;
    for (const auto& [name, t] : params_)
      if (t.requires_grad()) out.push_back(t);
    return out;
  }
  std::vector<std::string> trainable_param_names() const {
    std::vector<std::string> out;
    for (const auto& [name, t] : params_)
      if (t.requires_grad()) out.push_back(name);
    return out;
  }

  void zero_grads() const {
    for (const auto& [name, t] : params_)
      if (t.requires_grad()) const_cast<TensorT<S>&>(t).zero_grad();
  }

  // Adds a frozen-base low-rank path to each target module: the base weight W
  // keeps its values but stops requiring grad, and out = x W + (alpha/rank) *
  // x A B with A randomly and B zero initialized, so outputs are bit-identical
  // to the base model until the adapters train.
  void apply_lora(const LoraConfig& lc) {
    if (has_lora_) throw ValidationError("apply_lora: adapters already applied");
    if (lc.rank < 1) throw ValidationError("apply_lora: rank must be >= 1, got " + std::to_string(lc.rank));
    if (lc.dropout < 0.0 || lc.dropout >= 1.0)
      throw ValidationError("apply_lora: dropout must be in [0,1), got " + std::to_string(lc.dropout));
    if (lc.target_module_ids.empty()) throw ValidationError("apply_lora: no target modules");
    const auto known = module_ids();
    std::vector<std::string> seen;
    for (const auto& id : lc.target_module_ids) {
      if (std::find(known.begin(), known.end(), id) == known.end())
        throw ValidationError("apply_lora: unknown module identifier: " + id);
      if (std::find(seen.begin(), seen.end(), id) != seen.end())
        throw ValidationError("apply_lora: duplicate module identifier: " + id);
      seen.push_back(id);
    }
    for (auto& [name, t] : params_) t.set_requires_grad(false);
    for (const auto& id : lc.target_module_ids) {
      const TensorT<S>& base = param(module_weight_name(id));
      const int d_in = base.dim(0), d_out = base.dim(1);
      Rng rng(mix64(cfg_.seed, fnv1a64("lora." + id)));
      add_param("lora." + id + ".a",
                TensorT<S>::randn({d_in, lc.rank}, rng, static_cast<S>(0.02), true));
      add_param("lora." + id + ".b", TensorT<S>::zeros({lc.rank, d_out}, true));
    }
    lora_cfg_ = lc;
    has_lora_ = true;
  }

  // Runs the transformer over one token sequence. The trace (attention maps,
  // per-module hidden states) is filled only when requested. A dropout RNG is
  // passed during adapter training; without one the adapter path is
  // deterministic.
  ForwardTraceT<S> forward(std::span<const int> tokens, bool want_trace = false,
                           Rng* dropout_rng = nullptr) const {
    const int t = static_cast<int>(tokens.size());
    if (t == 0) throw ValidationError("forward: empty token sequence");
    if (t > cfg_.context_len)
      throw ValidationError("forward: sequence length " + std::to_string(t) +
                            " exceeds context_len " + std::to_string(cfg_.context_len));
    ForwardTraceT<S> trace;
    if (want_trace) trace.attentions.resize(static_cast<std::size_t>(cfg_.n_layers));

    std::vector<int> positions(static_cast<std::size_t>(t));
    std::iota(positions.begin(), positions.end(), 0);
    TensorT<S> x = ops::add(ops::embedding_lookup(param("tok_emb"), std::vector<int>(tokens.begin(), tokens.end())),
                            ops::embedding_lookup(param("pos_emb"), positions));

    // Additive causal mask: 0 on/below the diagonal, -1e9 above. exp of the
    // masked scores underflows to exactly zero, so attention stays causal.
    TensorT<S> mask = TensorT<S>::zeros({t, t});
    for (int i = 0; i < t; ++i)
      for (int j = i + 1; j < t; ++j)
        mask.values_mut()[static_cast<std::size_t>(i) * t + j] = static_cast<S>(-1e9);

    const int hd = cfg_.head_dim();
    const S inv_sqrt_hd = static_cast<S>(1.0 / std::sqrt(static_cast<double>(hd)));
    for (int l = 0; l < cfg_.n_layers; ++l) {
      const std::string p = "layers." + std::to_string(l) + ".";
      TensorT<S> n1 = ops::layer_norm(x, param(p + "ln1.gamma"), param(p + "ln1.beta"),
                                      static_cast<S>(1e-5));
      TensorT<S> q = ops::matmul(n1, param(p + "attn.wq"));
      TensorT<S> k = ops::matmul(n1, param(p + "attn.wk"));
      TensorT<S> v = ops::matmul(n1, param(p + "attn.wv"));
      std::vector<TensorT<S>> head_ctx;
      for (int h = 0; h < cfg_.n_heads; ++h) {
        TensorT<S> qh = ops::slice_cols(q, h * hd, hd);
        TensorT<S> kh = ops::slice_cols(k, h * hd, hd);
        TensorT<S> vh = ops::slice_cols(v, h * hd, hd);
        TensorT<S> scores = ops::scale(ops::matmul(qh, ops::transpose(kh)), inv_sqrt_hd);
        TensorT<S> attn = ops::softmax_lastdim(ops::add(scores, mask));
        if (want_trace) trace.attentions[static_cast<std::size_t>(l)].push_back(attn);
        head_ctx.push_back(ops::matmul(attn, vh));
      }
      TensorT<S> ctx = ops::concat_cols<S>(head_ctx);
      TensorT<S> attn_out = project(ctx, p + "attn.wo", "attn_out_" + std::to_string(l), dropout_rng);
      if (want_trace) trace.module_outputs["attn_out_" + std::to_string(l)] = attn_out;
      x = ops::add(x, attn_out);

      TensorT<S> n2 = ops::layer_norm(x, param(p + "ln2.gamma"), param(p + "ln2.beta"),
                                      static_cast<S>(1e-5));
      TensorT<S> hidden = ops::gelu(ops::matmul(n2, param(p + "ffn.w1")));
      TensorT<S> ffn_out = project(hidden, p + "ffn.w2", "ffn_out_" + std::to_string(l), dropout_rng);
      if (want_trace) trace.module_outputs["ffn_out_" + std::to_string(l)] = ffn_out;
      x = ops::add(x, ffn_out);
    }
    TensorT<S> nf = ops::layer_norm(x, param("ln_f.gamma"), param("ln_f.beta"), static_cast<S>(1e-5));
    trace.logits = ops::matmul(nf, param("lm_head"));
    return trace;
  }

  // Teacher-forced total log probability of `target` given `prompt`:
  // sum_i log p(target_i | prompt, target_<i). Not length-normalized unless
  // asked (TruthfulQA MC convention).
  double sequence_logprob(std::span<const int> prompt, std::span<const int> target,
                          bool length_normalize = false) const {
    if (target.empty()) throw ValidationError("sequence_logprob: empty target");
    if (prompt.empty()) throw ValidationError("sequence_logprob: empty prompt");
    std::vector<int> tokens(prompt.begin(), prompt.end());
    tokens.insert(tokens.end(), target.begin(), target.end());
    ForwardTraceT<S> trace = forward(tokens);
    const int v = cfg_.vocab_size;
    double total = 0.0;
    for (std::size_t i = 0; i < target.size(); ++i) {
      const std::size_t row = prompt.size() - 1 + i;
      const S* z = trace.logits.values().data() + row * static_cast<std::size_t>(v);
      double mx = -std::numeric_limits<double>::infinity();
      for (int j = 0; j < v; ++j) mx = std::max(mx, static_cast<double>(z[j]));
      double denom = 0.0;
      for (int j = 0; j < v; ++j) denom += std::exp(static_cast<double>(z[j]) - mx);
      total += static_cast<double>(z[target[i]]) - mx - std::log(denom);
    }
    return length_normalize ? total / static_cast<double>(target.size()) : total;
  }

  // Greedy continuation, used for smoke tests only.
  std::vector<int> greedy_decode(std::span<const int> prompt, int max_new_tokens) const {
    std::vector<int> tokens(prompt.begin(), prompt.end());
    std::vector<int> generated;
    for (int step = 0; step < max_new_tokens; ++step) {
      if (static_cast<int>(tokens.size()) >= cfg_.context_len) break;
      ForwardTraceT<S> trace = forward(tokens);
      const int v = cfg_.vocab_size;
      const S* z = trace.logits.values().data() + (tokens.size() - 1) * static_cast<std::size_t>(v);
      int best = 0;
      for (int j = 1; j < v; ++j)
        if (z[j] > z[best]) best = j;
      generated.push_back(best);
      tokens.push_back(best);
    }
    return generated;
  }

  Checkpoint to_checkpoint() const {
    Checkpoint ckpt;
    ckpt.seed = cfg_.seed;
    for (const auto& [name, t] : params_) {
      TensorT<float> copy = TensorT<float>::zeros(t.shape());
      for (std::size_t i = 0; i < t.numel(); ++i)
        copy.values_mut()[i] = static_cast<float>(t.values()[i]);
      ckpt.tensors.emplace(name, std::move(copy));
    }
    ckpt.extra["model_config"] = cfg_.to_json();
    if (has_lora_) ckpt.extra["lora_config"] = lora_cfg_.to_json();
    return ckpt;
  }

  static ModelT from_checkpoint(const Checkpoint& ckpt) {
    if (!ckpt.extra.contains("model_config"))
      throw ValidationError("checkpoint is missing model_config");
    ModelT m = init(ModelConfig::from_json(ckpt.extra.at("model_config")));
    if (ckpt.extra.contains("lora_config"))
      m.apply_lora(LoraConfig::from_json(ckpt.extra.at("lora_config")));
    if (ckpt.tensors.size() != m.params_.size())
      throw ValidationError("checkpoint has " + std::to_string(ckpt.tensors.size()) +
                            " tensors, model expects " + std::to_string(m.params_.size()));
    for (auto& [name, t] : m.params_) {
      auto it = ckpt.tensors.find(name);
      if (it == ckpt.tensors.end()) throw ValidationError("checkpoint is missing tensor: " + name);
      if (it->second.shape() != t.shape())
        throw ValidationError("checkpoint tensor " + name + " has shape " +
                              shape_str(it->second.shape()) + ", expected " + shape_str(t.shape()));
      for (std::size_t i = 0; i < t.numel(); ++i)
        t.values_mut()[i] = static_cast<S>(it->second.values()[i]);
    }
    return m;
  }

  // Same weights re-materialized at another scalar type (grads not copied).
  template <class T>
  ModelT<T> cast() const {
    ModelT<T> m;
    m.cfg_ = cfg_;
    m.lora_cfg_ = lora_cfg_;
    m.has_lora_ = has_lora_;
    for (const auto& [name, t] : params_) {
      TensorT<T> copy = TensorT<T>::zeros(t.shape(), t.requires_grad());
      for (std::size_t i = 0; i < t.numel(); ++i)
        copy.values_mut()[i] = static_cast<T>(t.values()[i]);
      m.add_param(name, std::move(copy));
    }
    return m;
  }

 private:
  template <class>
  friend class ModelT;

  void add_param(const std::string& name, TensorT<S> t) {
    by_name_.emplace(name, params_.size());
    params_.emplace_back(name, std::move(t));
  }

  std::string module_weight_name(const std::string& module_id) const {
    const auto us = module_id.rfind('_');
    const std::string layer = module_id.substr(us + 1);
    if (module_id.rfind("attn_out_", 0) == 0) return "layers." + layer + ".attn.wo";
    return "layers." + layer + ".ffn.w2";
  }

  TensorT<S> project(const TensorT<S>& x, const std::string& weight_name,
                     const std::string& module_id, Rng* dropout_rng) const {
    TensorT<S> out = ops::matmul(x, param(weight_name));
    if (!has_lora_) return out;
    const auto& targets = lora_cfg_.target_module_ids;
    if (std::find(targets.begin(), targets.end(), module_id) == targets.end()) return out;
    TensorT<S> lx = x;
    if (lora_cfg_.dropout > 0.0 && dropout_rng != nullptr)
      lx = ops::dropout(lx, lora_cfg_.dropout, *dropout_rng);
    TensorT<S> low = ops::matmul(ops::matmul(lx, param("lora." + module_id + ".a")),
                                 param("lora." + module_id + ".b"));
    return ops::add(out, ops::scale(low, static_cast<S>(lora_cfg_.scale())));
  }

  ModelConfig cfg_;
  LoraConfig lora_cfg_;
  bool has_lora_ = false;
  std::vector<std::pair<std::string, TensorT<S>>> params_;
  std::map<std::string, std::size_t> by_name_;
};

using Model = ModelT<float>;

}  // namespace f2
