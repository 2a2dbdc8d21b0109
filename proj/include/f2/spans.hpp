#pragma once

// Hallucination-hotspot extraction: entity spans projected from char
// annotations, attention spans from the max-pooled attention graph ranked by
// PageRank, and the weighted-cross-entropy weight vectors built from both.

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "f2/common.hpp"
#include "f2/data.hpp"
#include "f2/model.hpp"

namespace f2 {

// Token-position digraph weighted by pooled attention: edge i -> j carries the
// pooled score of query position i attending to key position j.
struct AttentionGraph {
  int n_nodes = 0;
  std::vector<double> weights;  // row-major n x n

  double at(int i, int j) const {
    return weights[static_cast<std::size_t>(i) * static_cast<std::size_t>(n_nodes) +
                   static_cast<std::size_t>(j)];
  }
};

struct PageRankResult {
  std::vector<double> scores;
  int iterations = 0;
  bool converged = false;
};

struct TokenWeightVector {
  std::vector<double> weights;  // length = target-region length
  double alpha = 1.0;
  std::string source;  // "unit" | "ent" | "attn" | "ent+attn"

  double total() const {
    double s = 0.0;
    for (const double w : weights) s += w;
    return s;
  }
};

// Elementwise maximum over every layer and head of the trace.
template <class S>
TensorT<S> pool_attention(const ForwardTraceT<S>& trace) {
  if (trace.attentions.empty() || trace.attentions[0].empty())
    throw ValidationError("pool_attention: trace carries no attention matrices");
  const Shape shape = trace.attentions[0][0].shape();
  TensorT<S> pooled = TensorT<S>::filled(shape, std::numeric_limits<S>::lowest());
  for (const auto& layer : trace.attentions)
    for (const auto& head : layer) {
      if (head.shape() != shape)
        throw ValidationError("pool_attention: inconsistent attention shapes " +
                              shape_str(head.shape()) + " vs " + shape_str(shape));
      for (std::size_t i = 0; i < pooled.numel(); ++i)
        pooled.values_mut()[i] = std::max(pooled.values_mut()[i], head.values()[i]);
    }
  return pooled;
}

template <class S>
AttentionGraph attention_graph(const TensorT<S>& pooled) {
  if (pooled.rank() != 2 || pooled.dim(0) != pooled.dim(1))
    throw ValidationError("attention_graph: pooled matrix must be square, got " +
                          shape_str(pooled.shape()));
  AttentionGraph g;
  g.n_nodes = pooled.dim(0);
  g.weights.resize(pooled.numel());
  for (std::size_t i = 0; i < pooled.numel(); ++i)
    g.weights[i] = static_cast<double>(pooled.values()[i]);
  return g;
}

// Weighted PageRank with out-weight normalization; dangling nodes (zero
// out-weight) redistribute their mass uniformly. Double arithmetic
// throughout; converged when the L1 step delta drops below tol.
inline PageRankResult pagerank(const AttentionGraph& g, double damping = 0.85,
                               double tol = 1e-8, int max_iter = 100) {
  const int n = g.n_nodes;
  if (n < 1) throw ValidationError("pagerank: graph has no nodes");
  if (damping <= 0.0 || damping >= 1.0)
    throw ValidationError("pagerank: damping must be in (0,1), got " + std::to_string(damping));
  for (const double w : g.weights)
    if (w < 0.0) throw ValidationError("pagerank: negative edge weight " + std::to_string(w));

  std::vector<double> out_weight(static_cast<std::size_t>(n), 0.0);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) out_weight[static_cast<std::size_t>(i)] += g.at(i, j);

  PageRankResult res;
  res.scores.assign(static_cast<std::size_t>(n), 1.0 / n);
  std::vector<double> next(static_cast<std::size_t>(n));
  for (int iter = 1; iter <= max_iter; ++iter) {
    double dangling = 0.0;
    for (int i = 0; i < n; ++i)
      if (out_weight[static_cast<std::size_t>(i)] == 0.0)
        dangling += res.scores[static_cast<std::size_t>(i)];
    const double base = (1.0 - damping) / n + damping * dangling / n;
    std::fill(next.begin(), next.end(), base);
    for (int i = 0; i < n; ++i) {
      const double out = out_weight[static_cast<std::size_t>(i)];
      if (out == 0.0) continue;
      const double share = damping * res.scores[static_cast<std::size_t>(i)] / out;
      for (int j = 0; j < n; ++j) {
        const double w = g.at(i, j);
        if (w != 0.0) next[static_cast<std::size_t>(j)] += share * w;
      }
    }
    double delta = 0.0;
    for (int j = 0; j < n; ++j) delta += std::abs(next[static_cast<std::size_t>(j)] -
                                                  res.scores[static_cast<std::size_t>(j)]);
    res.scores.swap(next);
    res.iterations = iter;
    if (delta < tol) {
      res.converged = true;
      break;
    }
  }
  return res;
}

// Projects the sample's entity char annotations onto retrieval-render token
// indices. Only tokens inside the knowledge target region qualify; prompt
// scaffolding can never enter the span set. A char span that does not land on
// token boundaries is a misalignment error.
inline std::vector<int> extract_entity_spans(const TokenizedSample& ts) {
  const Render& r = ts.retrieval;
  std::vector<int> span;
  for (const auto& e : ts.source.entities) {
    const int abs_start = r.target_char_start + e.char_start;
    const int abs_end = r.target_char_start + e.char_end;
    if (abs_end > r.target_char_end)
      throw ValidationError("extract_entity_spans: span [" + std::to_string(e.char_start) + "," +
                            std::to_string(e.char_end) + ") extends past the knowledge region");
    bool any = false;
    for (int i = r.target_start; i < r.target_end; ++i) {
      const auto& raw = r.raw[static_cast<std::size_t>(i)];
      const bool overlaps = raw.char_start < abs_end && raw.char_end > abs_start;
      if (!overlaps) continue;
      if (raw.char_start < abs_start || raw.char_end > abs_end)
        throw ValidationError("extract_entity_spans: span [" + std::to_string(e.char_start) +
                              "," + std::to_string(e.char_end) +
                              ") cuts token '" + raw.text + "'");
      span.push_back(i);
      any = true;
    }
    if (!any)
      throw ValidationError("extract_entity_spans: span [" + std::to_string(e.char_start) + "," +
                            std::to_string(e.char_end) + ") covers no tokens");
  }
  std::sort(span.begin(), span.end());
  span.erase(std::unique(span.begin(), span.end()), span.end());
  return span;
}

// Top-K knowledge-region tokens by PageRank over the pooled attention graph
// of a retrieval-render forward pass. Ties break toward the lower token
// index; the result is clamped to the region size.
template <class S>
std::vector<int> extract_attention_spans(const ForwardTraceT<S>& trace,
                                         const TokenizedSample& ts, int k) {
  if (k < 1) throw ValidationError("extract_attention_spans: K must be >= 1, got " +
                                   std::to_string(k));
  const Render& r = ts.retrieval;
  const TensorT<S> pooled = pool_attention(trace);
  if (pooled.dim(0) != static_cast<int>(r.tokens.size()))
    throw ValidationError("extract_attention_spans: trace covers " +
                          std::to_string(pooled.dim(0)) + " tokens, retrieval render has " +
                          std::to_string(r.tokens.size()));
  const PageRankResult pr = pagerank(attention_graph(pooled));

  std::vector<int> candidates;
  for (int i = r.target_start; i < r.target_end; ++i) candidates.push_back(i);
  std::stable_sort(candidates.begin(), candidates.end(), [&](int a, int b) {
    const double sa = pr.scores[static_cast<std::size_t>(a)];
    const double sb = pr.scores[static_cast<std::size_t>(b)];
    if (sa != sb) return sa > sb;
    return a < b;
  });
  const int take = std::min<int>(k, static_cast<int>(candidates.size()));
  std::vector<int> span(candidates.begin(), candidates.begin() + take);
  std::sort(span.begin(), span.end());
  return span;
}

namespace detail {

inline void apply_span(std::vector<double>& w, const std::vector<int>& span, double alpha,
                       int region_len) {
  for (const int i : span) {
    if (i < 0 || i >= region_len)
      throw ValidationError("make_weights: span index " + std::to_string(i) +
                            " out of range for region of " + std::to_string(region_len));
    w[static_cast<std::size_t>(i)] = alpha;
  }
}

}  // namespace detail

// Weight alpha at span positions, 1 elsewhere. Span indices are relative to
// the target region.
inline TokenWeightVector make_weights(const std::vector<int>& span, double alpha, int region_len,
                                      const std::string& source = "ent") {
  if (alpha <= 0.0)
    throw ValidationError("make_weights: alpha must be > 0, got " + std::to_string(alpha));
  if (region_len < 0) throw ValidationError("make_weights: negative region length");
  TokenWeightVector w;
  w.alpha = alpha;
  w.source = source;
  w.weights.assign(static_cast<std::size_t>(region_len), 1.0);
  detail::apply_span(w.weights, span, alpha, region_len);
  return w;
}

// Union of two span sets at weight alpha.
inline TokenWeightVector make_weights_merged(const std::vector<int>& span_a,
                                             const std::vector<int>& span_b, double alpha,
                                             int region_len) {
  TokenWeightVector w = make_weights(span_a, alpha, region_len, "ent+attn");
  detail::apply_span(w.weights, span_b, alpha, region_len);
  return w;
}

inline TokenWeightVector unit_weights(int region_len) {
  TokenWeightVector w;
  w.alpha = 1.0;
  w.source = "unit";
  w.weights.assign(static_cast<std::size_t>(region_len), 1.0);
  return w;
}

// Render-absolute span indices -> region-relative (for make_weights).
inline std::vector<int> region_relative(const std::vector<int>& span, const Render& r) {
  std::vector<int> out;
  out.reserve(span.size());
  for (const int i : span) {
    if (i < r.target_start || i >= r.target_end)
      throw ValidationError("region_relative: index " + std::to_string(i) +
                            " outside target region [" + std::to_string(r.target_start) + "," +
                            std::to_string(r.target_end) + ")");
    out.push_back(i - r.target_start);
  }
  return out;
}

}  // namespace f2
