#pragma once

// Truthfulness evaluation: multiple-choice likelihood metrics (MC1/MC2/MC3),
// completion-contrast accuracy, per-token entropy indicators over the
// knowledge region, and Spearman rank correlation with a t-approximation
// p-value for the indicator-vs-hallucination observation study.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include <boost/math/distributions/students_t.hpp>
#include <nlohmann/json.hpp>

#include "f2/common.hpp"
#include "f2/data.hpp"
#include "f2/model.hpp"
#include "f2/spans.hpp"

namespace f2 {

struct McItemScore {
  double mc1 = 0.0;
  double mc2 = 0.0;
  double mc3 = 0.0;
};

struct McScores {
  double mc1 = 0.0;  // means of the per-item values
  double mc2 = 0.0;
  double mc3 = 0.0;
  std::vector<McItemScore> per_item;

  nlohmann::json to_json() const {
    nlohmann::json items = nlohmann::json::array();
    for (const auto& s : per_item)
      items.push_back({{"mc1", s.mc1}, {"mc2", s.mc2}, {"mc3", s.mc3}});
    return {{"mc1", mc1}, {"mc2", mc2}, {"mc3", mc3}, {"items", items}};
  }
};

struct ObservationRow {
  std::string sample_id;
  int y = 0;  // 1 = the model prefers the hallucinated answer
  double avg_h = 0.0;
  double avg_e_h = 0.0;
  double avg_ae_h = 0.0;
};

struct SpearmanResult {
  double rho = 0.0;
  double p_value = 1.0;
};

namespace detail {

// Candidate likelihood: total (unnormalized) log-probability of the answer
// tokens under the QA render. Length bias is neutral here because true and
// distractor answers share entity types and thus token lengths.
template <class S>
double candidate_loglik(const ModelT<S>& model, const Tokenizer& tok, const std::string& question,
                        const std::string& answer) {
  FqaSample s;
  s.question = question;
  s.answer = answer;
  const Render r = render_prompt(tok, RenderKind::qa, s);
  const std::vector<int> prompt(r.tokens.begin(), r.tokens.begin() + r.target_start);
  const std::vector<int> target(r.tokens.begin() + r.target_start, r.tokens.end());
  return model.sequence_logprob(prompt, target);
}

// Shannon entropy (natural log) of softmax(logits), accumulated in double
// with max-subtraction.
template <class S>
double row_entropy(const S* row, int n) {
  double max_logit = -std::numeric_limits<double>::infinity();
  for (int c = 0; c < n; ++c) max_logit = std::max(max_logit, static_cast<double>(row[c]));
  double denom = 0.0;
  for (int c = 0; c < n; ++c) denom += std::exp(static_cast<double>(row[c]) - max_logit);
  double entropy = 0.0;
  for (int c = 0; c < n; ++c) {
    const double p = std::exp(static_cast<double>(row[c]) - max_logit) / denom;
    if (p > 0.0) entropy -= p * std::log(p);
  }
  return entropy;
}

}  // namespace detail

// Multiple-choice scores from candidate log-likelihoods.
//   mc1: the designated best true answer beats every false answer (strictly;
//        ties score 0).
//   mc2: normalized probability mass of the true answers, computed with
//        max-subtraction before exponentiation.
//   mc3: fraction of true answers strictly above the highest false answer.
inline McItemScore mc_from_loglik(const std::vector<double>& true_ll,
                                  const std::vector<double>& false_ll, int best_index) {
  if (true_ll.empty() || false_ll.empty())
    throw ValidationError("mc_from_loglik: needs non-empty true and false likelihood lists");
  if (best_index < 0 || best_index >= static_cast<int>(true_ll.size()))
    throw ValidationError("mc_from_loglik: best_index out of range");

  const double max_false = *std::max_element(false_ll.begin(), false_ll.end());
  McItemScore score;
  score.mc1 = true_ll[static_cast<std::size_t>(best_index)] > max_false ? 1.0 : 0.0;

  double max_ll = max_false;
  for (const double ll : true_ll) max_ll = std::max(max_ll, ll);
  double true_mass = 0.0, total_mass = 0.0;
  for (const double ll : true_ll) true_mass += std::exp(ll - max_ll);
  total_mass = true_mass;
  for (const double ll : false_ll) total_mass += std::exp(ll - max_ll);
  score.mc2 = true_mass / total_mass;

  int above = 0;
  for (const double ll : true_ll) above += ll > max_false;
  score.mc3 = static_cast<double>(above) / static_cast<double>(true_ll.size());
  return score;
}

template <class S>
McItemScore mc_scores(const ModelT<S>& model, const Tokenizer& tok, const McItem& item) {
  if (item.true_answers.empty() || item.false_answers.empty())
    throw ValidationError("mc_scores: item needs non-empty true and false answer lists");
  std::vector<double> true_ll, false_ll;
  for (const auto& a : item.true_answers)
    true_ll.push_back(detail::candidate_loglik(model, tok, item.question, a));
  for (const auto& a : item.false_answers)
    false_ll.push_back(detail::candidate_loglik(model, tok, item.question, a));
  return mc_from_loglik(true_ll, false_ll, item.best_index);
}

template <class S>
McScores mc_eval(const ModelT<S>& model, const Tokenizer& tok, const std::vector<McItem>& items) {
  if (items.empty()) throw ValidationError("mc_eval: empty item list");
  McScores agg;
  for (const auto& item : items) {
    const McItemScore s = mc_scores(model, tok, item);
    agg.mc1 += s.mc1;
    agg.mc2 += s.mc2;
    agg.mc3 += s.mc3;
    agg.per_item.push_back(s);
  }
  const double n = static_cast<double>(items.size());
  agg.mc1 /= n;
  agg.mc2 /= n;
  agg.mc3 /= n;
  return agg;
}

// Fraction of items whose factual completion has strictly the highest
// likelihood given the prefix; ties count as failure.
template <class S>
double factor_accuracy(const ModelT<S>& model, const Tokenizer& tok,
                       const std::vector<FactorItem>& items) {
  if (items.empty()) throw ValidationError("factor_accuracy: empty item list");
  int correct = 0;
  for (const auto& item : items) {
    const std::vector<int> prompt = tok.encode(item.prefix);
    const double factual = model.sequence_logprob(prompt, tok.encode(item.factual_completion));
    bool wins = true;
    for (const auto& alt : item.nonfactual_completions)
      wins = wins && factual > model.sequence_logprob(prompt, tok.encode(alt));
    correct += wins;
  }
  return static_cast<double>(correct) / static_cast<double>(items.size());
}

// Entropy indicators over the knowledge region of the retrieval render.
// h_i is the Shannon entropy (natural log, double accumulation) of the
// model's distribution for knowledge token i given everything before it.
// The three indicators are the unweighted, entity-weighted, and
// entity-union-attention-weighted means of the h_i. The label y marks
// whether the model assigns the hallucinated answer a higher total
// log-probability than the right one under the QA render.
template <class S>
ObservationRow entropy_indicators(const ModelT<S>& model, const Tokenizer& tok,
                                  const FqaSample& sample, double alpha, int k) {
  if (!sample.hallucinated_answer)
    throw ValidationError("entropy_indicators: sample has no hallucinated answer");
  if (k < 0) throw ValidationError("entropy_indicators: k must be >= 0");
  TokenizedSample ts = tokenize_sample(tok, sample);
  ts.span_ent = extract_entity_spans(ts);
  const auto trace = model.forward(ts.retrieval.tokens, /*want_trace=*/true);
  if (k > 0) ts.span_attn = extract_attention_spans(trace, ts, k);

  const Render& r = ts.retrieval;
  const int v = trace.logits.dim(1);
  std::vector<double> h;
  for (int i = r.target_start; i < r.target_end; ++i)
    h.push_back(detail::row_entropy(
        trace.logits.values().data() + static_cast<std::size_t>(i - 1) * v, v));

  const auto weighted_mean = [&](const TokenWeightVector& w) {
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < h.size(); ++i) {
      num += w.weights[i] * h[i];
      den += w.weights[i];
    }
    return num / den;
  };

  ObservationRow row;
  row.sample_id = sample.question;
  row.avg_h = std::accumulate(h.begin(), h.end(), 0.0) / static_cast<double>(h.size());
  const auto rel_ent = region_relative(ts.span_ent, r);
  const auto rel_attn = region_relative(ts.span_attn, r);
  row.avg_e_h = weighted_mean(make_weights(rel_ent, alpha, r.target_len()));
  row.avg_ae_h = weighted_mean(make_weights_merged(rel_ent, rel_attn, alpha, r.target_len()));

  const double ll_right =
      detail::candidate_loglik(model, tok, sample.question, sample.answer);
  const double ll_wrong =
      detail::candidate_loglik(model, tok, sample.question, *sample.hallucinated_answer);
  row.y = ll_right < ll_wrong ? 1 : 0;
  return row;
}

// Average ranks with tie correction: tied values share the mean of the
// positions they occupy (1-based).
inline std::vector<double> average_ranks(const std::vector<double>& x) {
  const std::size_t n = x.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0u);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
  std::vector<double> ranks(n, 0.0);
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j + 1 < n && x[order[j + 1]] == x[order[i]]) ++j;
    const double avg = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    for (std::size_t t = i; t <= j; ++t) ranks[order[t]] = avg;
    i = j + 1;
  }
  return ranks;
}

// Spearman rank correlation with average-rank tie handling; the two-sided
// p-value uses the t-approximation with n - 2 degrees of freedom.
inline SpearmanResult spearman(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size())
    throw ValidationError("spearman: length mismatch, " + std::to_string(x.size()) + " vs " +
                          std::to_string(y.size()));
  const std::size_t n = x.size();
  if (n < 3) throw ValidationError("spearman: need at least 3 observations");
  const auto rx = average_ranks(x);
  const auto ry = average_ranks(y);
  const double mean = (static_cast<double>(n) + 1.0) / 2.0;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    sxy += (rx[i] - mean) * (ry[i] - mean);
    sxx += (rx[i] - mean) * (rx[i] - mean);
    syy += (ry[i] - mean) * (ry[i] - mean);
  }
  if (sxx == 0.0 || syy == 0.0)
    throw ValidationError("spearman: an input has zero rank variance, rho is undefined");
  SpearmanResult res;
  res.rho = sxy / std::sqrt(sxx * syy);
  const double df = static_cast<double>(n) - 2.0;
  const double denom = 1.0 - res.rho * res.rho;
  if (denom <= 0.0) {
    res.p_value = 0.0;
  } else {
    const double t = res.rho * std::sqrt(df / denom);
    const boost::math::students_t dist(df);
    res.p_value = 2.0 * boost::math::cdf(boost::math::complement(dist, std::abs(t)));
  }
  return res;
}

struct ObservationReport {
  std::vector<ObservationRow> rows;
  SpearmanResult avg, avg_e, avg_ae;  // each indicator correlated with y

  nlohmann::json to_json() const {
    nlohmann::json jrows = nlohmann::json::array();
    for (const auto& r : rows)
      jrows.push_back({{"sample_id", r.sample_id},
                       {"y", r.y},
                       {"avg_h", r.avg_h},
                       {"avg_E_h", r.avg_e_h},
                       {"avg_AE_h", r.avg_ae_h}});
    return {{"rows", jrows},
            {"spearman", {{"avg_h", {{"rho", avg.rho}, {"p", avg.p_value}}},
                          {"avg_E_h", {{"rho", avg_e.rho}, {"p", avg_e.p_value}}},
                          {"avg_AE_h", {{"rho", avg_ae.rho}, {"p", avg_ae.p_value}}}}}};
  }
};

// Correlates each entropy indicator against the hallucination label over a
// seeded subset of n samples. Membership is drawn by shuffle, but rows keep
// corpus order, so n = population is seed-independent.
template <class S>
ObservationReport observation_experiment(const ModelT<S>& model, const Tokenizer& tok,
                                         const std::vector<FqaSample>& samples, int n,
                                         std::uint64_t seed, double alpha, int k) {
  std::vector<std::size_t> eligible;
  for (std::size_t i = 0; i < samples.size(); ++i)
    if (samples[i].hallucinated_answer) eligible.push_back(i);
  if (n < 3) throw ValidationError("observation_experiment: need n >= 3");
  if (static_cast<std::size_t>(n) > eligible.size())
    throw ValidationError("observation_experiment: requested " + std::to_string(n) +
                          " cases but only " + std::to_string(eligible.size()) + " are eligible");
  Rng rng(seed);
  rng.shuffle(eligible);
  eligible.resize(static_cast<std::size_t>(n));
  std::sort(eligible.begin(), eligible.end());

  ObservationReport report;
  std::vector<double> ys, a, e, ae;
  for (const std::size_t i : eligible) {
    const ObservationRow row = entropy_indicators(model, tok, samples[i], alpha, k);
    ys.push_back(row.y);
    a.push_back(row.avg_h);
    e.push_back(row.avg_e_h);
    ae.push_back(row.avg_ae_h);
    report.rows.push_back(row);
  }
  report.avg = spearman(a, ys);
  report.avg_e = spearman(e, ys);
  report.avg_ae = spearman(ae, ys);
  return report;
}

}  // namespace f2
