#pragma once

// Linear probes over per-module hidden states: rank modules by how well a
// logistic classifier on their output (read at the final answer token)
// separates truthful from hallucinated continuations, then select the top-N
// modules as adapter targets.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "f2/common.hpp"
#include "f2/data.hpp"
#include "f2/model.hpp"
#include "f2/optim.hpp"
#include "f2/tensor.hpp"

namespace f2 {

// One probe example: the hidden state of a single module at the final token
// of the rendered answer, labeled by which continuation produced it.
struct ProbeRow {
  std::string sample_id;
  std::vector<float> feature;
  int label = 0;  // 0 = truthful continuation, 1 = hallucinated
  bool train = true;
};

struct ProbeDataset {
  std::vector<std::string> module_ids;
  std::map<std::string, std::vector<ProbeRow>> rows_by_module;
  int skipped = 0;  // samples without a hallucinated answer
};

struct ProbeResult {
  Tensor weights;  // [feature_dim + 1, 2]; the appended column folds in a bias
  double val_accuracy = 0.0;
};

struct ProbeOptions {
  int n_select = 4;
  double l2 = 1e-4;
  int epochs = 200;
  double lr = 1e-2;
  double train_fraction = 0.8;
  std::uint64_t seed = 44;

  nlohmann::json to_json() const {
    return {{"n_select", n_select}, {"l2", l2},
            {"epochs", epochs},     {"lr", lr},
            {"train_fraction", train_fraction}, {"seed", seed}};
  }
  static ProbeOptions from_json(const nlohmann::json& j) {
    ProbeOptions o;
    o.n_select = j.value("n_select", o.n_select);
    o.l2 = j.value("l2", o.l2);
    o.epochs = j.value("epochs", o.epochs);
    o.lr = j.value("lr", o.lr);
    o.train_fraction = j.value("train_fraction", o.train_fraction);
    o.seed = j.value("seed", o.seed);
    return o;
  }
};

struct ModuleProbeReport {
  struct Entry {
    std::string module_id;
    double accuracy = 0.0;
  };
  std::vector<Entry> ranking;  // descending accuracy; ties by layer, then kind
  std::vector<std::string> selected_top_n;
  int skipped = 0;
  ProbeOptions options;

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["ranking"] = nlohmann::json::array();
    for (const auto& e : ranking)
      j["ranking"].push_back({{"module", e.module_id}, {"accuracy", e.accuracy}});
    j["selected_top_n"] = selected_top_n;
    j["skipped_samples"] = skipped;
    j["probe"] = options.to_json();
    return j;
  }
};

namespace detail {

// Seeded hash split: a sample lands in the train split iff its id hashes
// below the train fraction. Stable across runs and row order.
inline bool probe_train_split(std::uint64_t seed, const std::string& sample_id,
                              double train_fraction) {
  const std::uint64_t h = mix64(seed, fnv1a64(sample_id));
  return (h % 10000) < static_cast<std::uint64_t>(std::llround(train_fraction * 10000.0));
}

// Layer index and kind from a module id like "attn_out_3", for tie-breaking.
inline std::pair<int, std::string> module_sort_key(const std::string& id) {
  const auto us = id.rfind('_');
  if (us == std::string::npos || us + 1 >= id.size())
    throw ValidationError("malformed module id: " + id);
  return {std::stoi(id.substr(us + 1)), id.substr(0, us)};
}

}  // namespace detail

// Runs each sample's QA render twice — once with the true answer, once with
// the hallucinated one — and records every module's output at the final
// answer token. Samples lacking a hallucinated answer are counted and skipped.
template <class S>
ProbeDataset collect_features(const ModelT<S>& model, const Tokenizer& tok,
                              const std::vector<FqaSample>& samples, std::uint64_t seed,
                              double train_fraction = 0.8) {
  ProbeDataset ds;
  ds.module_ids = model.module_ids();
  for (const auto& sample : samples) {
    if (!sample.hallucinated_answer) {
      ++ds.skipped;
      continue;
    }
    const bool train = detail::probe_train_split(seed, sample.question, train_fraction);
    for (const int label : {0, 1}) {
      FqaSample variant = sample;
      if (label == 1) variant.answer = *sample.hallucinated_answer;
      const Render render = render_prompt(tok, RenderKind::qa, variant);
      const auto trace = model.forward(render.tokens, /*want_trace=*/true);
      const int row = render.target_end - 1;
      for (const auto& id : ds.module_ids) {
        const auto& out = trace.module_outputs.at(id);
        const int d = out.dim(1);
        ProbeRow pr;
        pr.sample_id = sample.question;
        pr.label = label;
        pr.train = train;
        pr.feature.resize(static_cast<std::size_t>(d));
        const S* src = out.values().data() + static_cast<std::size_t>(row) * d;
        for (int c = 0; c < d; ++c) pr.feature[static_cast<std::size_t>(c)] = static_cast<float>(src[c]);
        ds.rows_by_module[id].push_back(std::move(pr));
      }
    }
  }
  return ds;
}

// Two-class softmax regression on one module's rows: full-batch gradient
// descent on the logistic loss with an explicit L2 penalty. The constant
// column appended to the features plays the role of a bias. Validation
// accuracy is computed on the held-out split; argmax ties go to class 0.
inline ProbeResult train_probe(const std::vector<ProbeRow>& rows, double l2, int epochs,
                               std::uint64_t seed, double lr = 1e-2) {
  if (rows.empty()) throw ValidationError("probe dataset is empty");
  const int d = static_cast<int>(rows.front().feature.size());
  std::vector<const ProbeRow*> train_rows, val_rows;
  for (const auto& r : rows) {
    if (static_cast<int>(r.feature.size()) != d)
      throw ValidationError("probe feature dims are not uniform");
    (r.train ? train_rows : val_rows).push_back(&r);
  }
  if (train_rows.empty() || val_rows.empty())
    throw ValidationError("probe split left an empty train or validation set");
  bool saw[2] = {false, false};
  for (const auto* r : train_rows) saw[r->label] = true;
  if (!saw[0] || !saw[1])
    throw ValidationError("probe training data contains a single class");

  // Features are standardized with train-split statistics: raw hidden-state
  // dimensions can differ by orders of magnitude, which leaves full-batch
  // gradient descent badly conditioned and underfits some modules.
  std::vector<double> mu(static_cast<std::size_t>(d), 0.0);
  std::vector<double> sd(static_cast<std::size_t>(d), 0.0);
  for (const auto* r : train_rows)
    for (int c = 0; c < d; ++c) mu[static_cast<std::size_t>(c)] += r->feature[static_cast<std::size_t>(c)];
  for (auto& m : mu) m /= static_cast<double>(train_rows.size());
  for (const auto* r : train_rows)
    for (int c = 0; c < d; ++c) {
      const double dev = r->feature[static_cast<std::size_t>(c)] - mu[static_cast<std::size_t>(c)];
      sd[static_cast<std::size_t>(c)] += dev * dev;
    }
  for (auto& s : sd) s = std::sqrt(s / static_cast<double>(train_rows.size())) + 1e-6;

  const auto pack_rows = [&](const std::vector<const ProbeRow*>& rs) {
    std::vector<float> flat;
    flat.reserve(rs.size() * static_cast<std::size_t>(d + 1));
    for (const auto* r : rs) {
      for (int c = 0; c < d; ++c)
        flat.push_back(static_cast<float>(
            (r->feature[static_cast<std::size_t>(c)] - mu[static_cast<std::size_t>(c)]) /
            sd[static_cast<std::size_t>(c)]));
      flat.push_back(1.0f);
    }
    return Tensor::from_data({static_cast<int>(rs.size()), d + 1}, flat);
  };
  const Tensor x_train = pack_rows(train_rows);
  std::vector<int> y_train;
  for (const auto* r : train_rows) y_train.push_back(r->label);

  Rng rng(mix64(seed, fnv1a64("probe")));
  Tensor w = Tensor::randn({d + 1, 2}, rng, 0.02f);
  w.set_requires_grad(true);
  AdamW opt;
  const float inv_n = 1.0f / static_cast<float>(train_rows.size());
  for (int epoch = 1; epoch <= epochs; ++epoch) {
    Tape tape;
    TapeScope scope(tape);
    auto logp = ops::log_softmax_lastdim(ops::matmul(x_train, w));
    auto nll = ops::scale(ops::sum(ops::gather_lastdim(logp, y_train)), -inv_n);
    auto loss = ops::add(nll, ops::scale(ops::sum(ops::mul(w, w)), static_cast<float>(l2)));
    w.zero_grad();
    tape.backward(loss);
    opt.step({&w, 1}, lr, epoch);
  }

  const Tensor x_val = pack_rows(val_rows);
  const Tensor z = ops::matmul(x_val, w);
  int correct = 0;
  for (std::size_t i = 0; i < val_rows.size(); ++i) {
    const float c0 = z.values()[i * 2];
    const float c1 = z.values()[i * 2 + 1];
    const int pred = c1 > c0 ? 1 : 0;
    if (pred == val_rows[i]->label) ++correct;
  }
  ProbeResult res;
  res.weights = w;
  res.val_accuracy = static_cast<double>(correct) / static_cast<double>(val_rows.size());
  return res;
}

// Orders modules by probe accuracy (descending) with a deterministic
// tie-break — lower layer first, then module kind alphabetically — and keeps
// the top n as the selection.
inline ModuleProbeReport rank_and_select(const std::vector<std::pair<std::string, double>>& accuracies,
                                         int n) {
  if (n < 1) throw ValidationError("selection size must be >= 1, got " + std::to_string(n));
  ModuleProbeReport report;
  for (const auto& [id, acc] : accuracies) report.ranking.push_back({id, acc});
  std::stable_sort(report.ranking.begin(), report.ranking.end(),
                   [](const ModuleProbeReport::Entry& a, const ModuleProbeReport::Entry& b) {
                     if (a.accuracy != b.accuracy) return a.accuracy > b.accuracy;
                     return detail::module_sort_key(a.module_id) < detail::module_sort_key(b.module_id);
                   });
  const std::size_t keep = std::min<std::size_t>(static_cast<std::size_t>(n), report.ranking.size());
  for (std::size_t i = 0; i < keep; ++i)
    report.selected_top_n.push_back(report.ranking[i].module_id);
  return report;
}

// Full pipeline: collect features from the model, train one probe per module,
// rank, and select adapter targets.
template <class S>
ModuleProbeReport probe_modules(const ModelT<S>& model, const Tokenizer& tok,
                                const std::vector<FqaSample>& samples, const ProbeOptions& opt) {
  const ProbeDataset ds = collect_features(model, tok, samples, opt.seed, opt.train_fraction);
  std::vector<std::pair<std::string, double>> accs;
  for (const auto& id : ds.module_ids) {
    const auto res = train_probe(ds.rows_by_module.at(id), opt.l2, opt.epochs,
                                 mix64(opt.seed, fnv1a64(id)), opt.lr);
    accs.emplace_back(id, res.val_accuracy);
  }
  ModuleProbeReport report = rank_and_select(accs, opt.n_select);
  report.skipped = ds.skipped;
  report.options = opt;
  return report;
}

}  // namespace f2
