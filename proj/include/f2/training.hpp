#pragma once

// Training loops: LM pretraining over the corpus, and adapter fine-tuning
// with the decomposed QA objective — linear warmup, gradient accumulation,
// per-epoch attention-span refresh, periodic multiple-choice evaluation, and
// best-metric checkpoint tracking.

#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "f2/checkpoint.hpp"
#include "f2/common.hpp"
#include "f2/data.hpp"
#include "f2/eval.hpp"
#include "f2/losses.hpp"
#include "f2/model.hpp"
#include "f2/optim.hpp"
#include "f2/spans.hpp"

namespace f2 {

// Linear warmup to lr over warmup_steps, constant afterwards.
inline double schedule(int step, int warmup_steps, double lr) {
  if (step < 1) throw ValidationError("schedule: step must be >= 1, got " + std::to_string(step));
  if (warmup_steps < 0) throw ValidationError("schedule: warmup_steps must be >= 0");
  if (warmup_steps == 0 || step >= warmup_steps) return lr;
  return lr * static_cast<double>(step) / static_cast<double>(warmup_steps);
}

struct TrainConfig {
  std::string variant = "f2";
  double alpha = 1.1;
  int k = 30;
  LoraConfig lora;
  std::vector<std::string> selected_modules;  // empty = adapters on all modules
  int batch_size = 16;
  int micro_batch = 4;
  int epochs = 6;
  double lr = 1e-3;
  int warmup_steps = 20;
  int eval_step = 10;
  int max_steps = -1;  // cap on macro steps across epochs; -1 = no cap, 0 = evaluate only
  std::uint64_t seed = 44;
  int cutoff_len = 256;

  void validate() const {
    std::string msg;
    const auto fail = [&](const std::string& m) { msg += (msg.empty() ? "" : "; ") + m; };
    parse_variant(variant);  // throws on unknown names
    if (alpha <= 0.0) fail("alpha must be > 0");
    if (k < 1) fail("k must be >= 1");
    if (batch_size < 1) fail("batch_size must be >= 1");
    if (micro_batch < 1 || batch_size % micro_batch != 0)
      fail("micro_batch must be >= 1 and divide batch_size (" + std::to_string(micro_batch) +
           " vs " + std::to_string(batch_size) + ")");
    if (epochs < 0) fail("epochs must be >= 0");
    if (lr <= 0.0) fail("lr must be > 0");
    if (warmup_steps < 0) fail("warmup_steps must be >= 0");
    if (eval_step < 1) fail("eval_step must be >= 1");
    if (max_steps < -1) fail("max_steps must be >= -1");
    if (cutoff_len < 2) fail("cutoff_len must be >= 2");
    if (!msg.empty()) throw ValidationError("train config: " + msg);
  }

  nlohmann::json to_json() const {
    return {{"variant", variant},
            {"alpha", alpha},
            {"k", k},
            {"lora", lora.to_json()},
            {"selected_modules", selected_modules},
            {"batch_size", batch_size},
            {"micro_batch", micro_batch},
            {"epochs", epochs},
            {"lr", lr},
            {"warmup_steps", warmup_steps},
            {"eval_step", eval_step},
            {"max_steps", max_steps},
            {"seed", seed},
            {"cutoff_len", cutoff_len}};
  }

  static TrainConfig from_json(const nlohmann::json& j) {
    TrainConfig c;
    c.variant = j.value("variant", c.variant);
    c.alpha = j.value("alpha", c.alpha);
    c.k = j.value("k", c.k);
    if (j.contains("lora")) c.lora = LoraConfig::from_json(j.at("lora"));
    c.selected_modules = j.value("selected_modules", c.selected_modules);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.micro_batch = j.value("micro_batch", c.micro_batch);
    c.epochs = j.value("epochs", c.epochs);
    c.lr = j.value("lr", c.lr);
    c.warmup_steps = j.value("warmup_steps", c.warmup_steps);
    c.eval_step = j.value("eval_step", c.eval_step);
    c.max_steps = j.value("max_steps", c.max_steps);
    c.seed = j.value("seed", c.seed);
    c.cutoff_len = j.value("cutoff_len", c.cutoff_len);
    return c;
  }
};

struct EvalPoint {
  int step = 0;
  double mc1 = 0.0, mc2 = 0.0, mc3 = 0.0;
  std::map<std::string, double> losses;  // batch-mean components at this point
};

struct BestCheckpoint {
  int step = -1;
  double mc1 = 0.0, mc2 = 0.0, mc3 = 0.0;
  Checkpoint checkpoint;
};

struct RunRecord {
  std::vector<EvalPoint> points;
  BestCheckpoint best_mc1;  // maximizes MC1 over eval points
  BestCheckpoint best_mc2;  // maximizes MC2 over eval points
  bool aborted_numeric = false;
  int abort_step = -1;
  std::string abort_reason;

  nlohmann::json to_json() const {
    nlohmann::json pts = nlohmann::json::array();
    for (const auto& p : points)
      pts.push_back({{"step", p.step}, {"mc1", p.mc1}, {"mc2", p.mc2}, {"mc3", p.mc3},
                     {"losses", p.losses}});
    const auto best = [](const BestCheckpoint& b) {
      return nlohmann::json{{"step", b.step}, {"mc1", b.mc1}, {"mc2", b.mc2}, {"mc3", b.mc3}};
    };
    nlohmann::json j{{"points", pts}, {"best_mc1", best(best_mc1)}, {"best_mc2", best(best_mc2)}};
    if (aborted_numeric)
      j["abort"] = {{"step", abort_step}, {"reason", abort_reason}};
    return j;
  }
};

namespace detail {

template <class S>
void refresh_attention_spans(const ModelT<S>& model, std::vector<SamplePack>& packs, int k,
                             bool tagged) {
  for (auto& pack : packs) {
    TokenizedSample& ts = tagged ? pack.tagged : pack.plain;
    ts.span_attn = extract_attention_spans(model.forward(ts.retrieval.tokens, true), ts, k);
  }
}

// Guards checkpointing: a finite loss does not rule out non-finite gradients
// or updated weights, and a broken state must never become "last good".
template <class S>
void require_finite_params(const std::vector<TensorT<S>>& params) {
  for (const auto& p : params)
    for (const S v : p.values())
      if (!std::isfinite(static_cast<double>(v)))
        throw NumericError("non-finite parameter after optimizer step");
}

template <class S>
void check_render_lengths(const std::vector<SamplePack>& packs, const ModelT<S>& model,
                          int cutoff_len) {
  const int limit = std::min(cutoff_len, model.config().context_len);
  for (const auto& pack : packs)
    for (const auto* ts : {&pack.plain, &pack.tagged})
      for (const auto* r : {&ts->qa, &ts->retrieval, &ts->fqa})
        if (static_cast<int>(r->tokens.size()) > limit)
          throw ValidationError("render of '" + ts->source.question + "' has " +
                                std::to_string(r->tokens.size()) + " tokens, over the limit of " +
                                std::to_string(limit));
}

}  // namespace detail

// Fine-tunes low-rank adapters on the given model in place. The model should
// hold pretrained base weights; adapters are attached here according to
// cfg.selected_modules (empty = all modules). Evaluation runs on eval_items
// at step 0, every eval_step macro steps, and after the final step; the
// best-MC1 and best-MC2 model checkpoints are retained in the record. A
// non-finite loss or update aborts training, restores the state after the
// last completed step, and marks the record.
template <class S>
RunRecord finetune(ModelT<S>& model, const Tokenizer& tok,
                   const std::vector<FqaSample>& train_samples,
                   const std::vector<McItem>& eval_items, const TrainConfig& cfg,
                   std::ostream* log = nullptr) {
  cfg.validate();
  if (train_samples.empty()) throw ValidationError("finetune: no training samples");
  if (eval_items.empty()) throw ValidationError("finetune: no evaluation items");
  const LossVariant variant = parse_variant(cfg.variant);

  LoraConfig lora = cfg.lora;
  lora.target_module_ids =
      cfg.selected_modules.empty() ? model.module_ids() : cfg.selected_modules;
  model.apply_lora(lora);
  auto params = model.trainable_params();
  std::vector<std::string> param_names = model.trainable_param_names();

  std::vector<SamplePack> packs;
  for (const auto& s : train_samples) packs.push_back(make_sample_pack(tok, s));
  detail::check_render_lengths(packs, model, cfg.cutoff_len);

  RunRecord record;
  const auto evaluate = [&](int step, const std::map<std::string, double>& losses) {
    const McScores scores = mc_eval(model, tok, eval_items);
    EvalPoint point{step, scores.mc1, scores.mc2, scores.mc3, losses};
    record.points.push_back(point);
    const auto consider = [&](BestCheckpoint& best, double metric, double best_metric) {
      if (best.step < 0 || metric > best_metric) {
        best.step = step;
        best.mc1 = point.mc1;
        best.mc2 = point.mc2;
        best.mc3 = point.mc3;
        best.checkpoint = model.to_checkpoint();
      }
    };
    consider(record.best_mc1, point.mc1, record.best_mc1.mc1);
    consider(record.best_mc2, point.mc2, record.best_mc2.mc2);
  };

  evaluate(0, {});
  Checkpoint last_good = model.to_checkpoint();

  AdamWT<S> opt;
  Rng order_rng(mix64(cfg.seed, fnv1a64("finetune.order")));
  int step = 0;
  bool stop = false;
  std::map<std::string, double> last_losses;
  const auto step_budget_spent = [&]() { return cfg.max_steps >= 0 && step >= cfg.max_steps; };
  for (int epoch = 0; epoch < cfg.epochs && !stop && !step_budget_spent(); ++epoch) {
    if (variant_uses_attention_spans(variant))
      detail::refresh_attention_spans(model, packs, cfg.k, variant_uses_tags(variant));

    std::vector<std::size_t> order(packs.size());
    std::iota(order.begin(), order.end(), 0u);
    order_rng.shuffle(order);

    for (std::size_t base = 0; base < order.size() && !stop && !step_budget_spent();
         base += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t batch_end = std::min(order.size(), base + cfg.batch_size);
      const double batch_n = static_cast<double>(batch_end - base);
      const int attempted = step + 1;
      std::map<std::string, double> batch_losses;
      double batch_total = 0.0;
      try {
        for (auto& p : params) p.zero_grad();
        for (std::size_t micro = base; micro < batch_end;
             micro += static_cast<std::size_t>(cfg.micro_batch)) {
          const std::size_t micro_end =
              std::min(batch_end, micro + static_cast<std::size_t>(cfg.micro_batch));
          for (std::size_t i = micro; i < micro_end; ++i) {
            Tape tape;
            TapeScope scope(tape);
            auto breakdown = loss_f2(model, packs[order[i]], variant, cfg.alpha);
            tape.backward(ops::scale(breakdown.total, static_cast<S>(1.0 / batch_n)));
            batch_total += breakdown.total_value() / batch_n;
            for (const auto& [name, v] : breakdown.components)
              batch_losses[name] += v / batch_n;
          }
        }
        if (!std::isfinite(batch_total)) throw NumericError("non-finite batch loss");
        opt.step(params, schedule(attempted, cfg.warmup_steps, cfg.lr), attempted, param_names);
        detail::require_finite_params(params);
      } catch (const NumericError& e) {
        record.aborted_numeric = true;
        record.abort_step = attempted;
        record.abort_reason = e.what();
        model = ModelT<S>::from_checkpoint(last_good);
        stop = true;
        break;
      }
      step = attempted;
      last_good = model.to_checkpoint();
      last_losses = batch_losses;
      if (log) {
        nlohmann::json line{{"step", step},
                            {"epoch", epoch},
                            {"lr", schedule(step, cfg.warmup_steps, cfg.lr)},
                            {"loss", batch_total},
                            {"components", batch_losses}};
        *log << line.dump() << '\n';
      }
      if (step % cfg.eval_step == 0) evaluate(step, batch_losses);
    }
  }
  if (!record.aborted_numeric && record.points.back().step != step) evaluate(step, last_losses);
  return record;
}

struct PretrainConfig {
  int epochs = 30;
  int batch_size = 16;
  double lr = 3e-3;
  int warmup_steps = 20;
  std::uint64_t seed = 44;
  int cutoff_len = 256;

  nlohmann::json to_json() const {
    return {{"epochs", epochs},   {"batch_size", batch_size},     {"lr", lr},
            {"warmup_steps", warmup_steps}, {"seed", seed}, {"cutoff_len", cutoff_len}};
  }
  static PretrainConfig from_json(const nlohmann::json& j) {
    PretrainConfig c;
    c.epochs = j.value("epochs", c.epochs);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.lr = j.value("lr", c.lr);
    c.warmup_steps = j.value("warmup_steps", c.warmup_steps);
    c.seed = j.value("seed", c.seed);
    c.cutoff_len = j.value("cutoff_len", c.cutoff_len);
    return c;
  }
};

struct PretrainRecord {
  int steps = 0;
  double final_loss = 0.0;
  bool aborted_numeric = false;
  std::string abort_reason;
};

// Plain next-token language modeling over the corpus lines, full parameters.
template <class S>
PretrainRecord pretrain(ModelT<S>& model, const Tokenizer& tok, const std::string& corpus_text,
                        const PretrainConfig& cfg, std::ostream* log = nullptr) {
  if (cfg.epochs < 0) throw ValidationError("pretrain: epochs must be >= 0");
  if (cfg.batch_size < 1) throw ValidationError("pretrain: batch_size must be >= 1");
  std::vector<std::vector<int>> lines;
  std::istringstream in(corpus_text);
  std::string line;
  const int limit = std::min(cfg.cutoff_len, model.config().context_len);
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto ids = tok.encode(line, limit);
    if (ids.size() >= 2) lines.push_back(std::move(ids));
  }
  if (lines.empty()) throw ValidationError("pretrain: corpus has no usable lines");

  auto params = model.trainable_params();
  std::vector<std::string> names = model.trainable_param_names();
  AdamWT<S> opt;
  Rng order_rng(mix64(cfg.seed, fnv1a64("pretrain.order")));
  PretrainRecord record;
  Checkpoint last_good = model.to_checkpoint();
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::vector<std::size_t> order(lines.size());
    std::iota(order.begin(), order.end(), 0u);
    order_rng.shuffle(order);
    for (std::size_t base = 0; base < order.size();
         base += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t end = std::min(order.size(), base + cfg.batch_size);
      const double n = static_cast<double>(end - base);
      double batch_loss = 0.0;
      try {
        for (auto& p : params) p.zero_grad();
        for (std::size_t i = base; i < end; ++i) {
          const auto& ids = lines[order[i]];
          Tape tape;
          TapeScope scope(tape);
          auto loss = wce(model.forward(ids).logits, ids, 1, static_cast<int>(ids.size()),
                          unit_weights(static_cast<int>(ids.size()) - 1));
          tape.backward(ops::scale(loss, static_cast<S>(1.0 / n)));
          batch_loss += static_cast<double>(loss.values()[0]) / n;
        }
        if (!std::isfinite(batch_loss)) throw NumericError("non-finite batch loss");
        opt.step(params, schedule(record.steps + 1, cfg.warmup_steps, cfg.lr), record.steps + 1,
                 names);
        detail::require_finite_params(params);
        ++record.steps;
      } catch (const NumericError& e) {
        record.aborted_numeric = true;
        record.abort_reason = e.what();
        model = ModelT<S>::from_checkpoint(last_good);
        return record;
      }
      last_good = model.to_checkpoint();
      record.final_loss = batch_loss;
      if (log && record.steps % 25 == 0)
        *log << nlohmann::json{{"step", record.steps}, {"epoch", epoch}, {"loss", batch_loss}}
                    .dump()
             << '\n';
    }
  }
  return record;
}

// Teacher-forced greedy next-token accuracy over the given sentences.
template <class S>
double next_token_accuracy(const ModelT<S>& model, const Tokenizer& tok,
                           const std::vector<std::string>& sentences) {
  if (sentences.empty()) throw ValidationError("next_token_accuracy: no sentences");
  long hits = 0, total = 0;
  for (const auto& s : sentences) {
    const auto ids = tok.encode(s);
    if (ids.size() < 2) continue;
    const auto trace = model.forward(ids);
    const int v = trace.logits.dim(1);
    for (std::size_t t = 1; t < ids.size(); ++t) {
      const S* row = trace.logits.values().data() + (t - 1) * static_cast<std::size_t>(v);
      int argmax = 0;
      for (int c = 1; c < v; ++c)
        if (row[c] > row[argmax]) argmax = c;
      hits += argmax == ids[t];
      ++total;
    }
  }
  if (total == 0) throw ValidationError("next_token_accuracy: sentences yield no predictions");
  return static_cast<double>(hits) / static_cast<double>(total);
}

}  // namespace f2
