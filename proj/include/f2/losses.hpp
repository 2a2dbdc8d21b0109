#pragma once

// Training objectives: weighted cross-entropy over a target region, the
// question-answering / knowledge-retrieval / fact-grounded-answer losses,
// their entity- and attention-weighted variants, the combined objective with
// its ablation variants, and the joint-probability identity check that ties
// the decomposed losses back to the composed sequence likelihood.

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "f2/data.hpp"
#include "f2/model.hpp"
#include "f2/spans.hpp"
#include "f2/tensor.hpp"

namespace f2 {

// Weighted cross-entropy over tokens[start, end) of one rendered sequence:
// -sum_i w_i log p(tokens[i] | tokens[<i]). Mean-reduced by sum(w) unless
// sum_reduce; position i is predicted from logits row i-1.
template <class S>
TensorT<S> wce(const TensorT<S>& logits, const std::vector<int>& tokens, int start, int end,
               const TokenWeightVector& w, bool sum_reduce = false) {
  if (logits.rank() != 2 || logits.dim(0) != static_cast<int>(tokens.size()))
    throw ValidationError("wce: logits " + shape_str(logits.shape()) + " do not cover " +
                          std::to_string(tokens.size()) + " tokens");
  if (start < 1 || end > static_cast<int>(tokens.size()) || start >= end)
    throw ValidationError("wce: region [" + std::to_string(start) + "," + std::to_string(end) +
                          ") invalid for sequence of " + std::to_string(tokens.size()));
  const int len = end - start;
  if (static_cast<int>(w.weights.size()) != len)
    throw ValidationError("wce: got " + std::to_string(w.weights.size()) + " weights for region of " +
                          std::to_string(len) + " tokens");

  std::vector<S> wvals(w.weights.begin(), w.weights.end());
  TensorT<S> weight_t = TensorT<S>::from_data({len}, std::move(wvals));
  std::vector<int> targets(tokens.begin() + start, tokens.begin() + end);
  TensorT<S> rows = ops::slice_rows(logits, start - 1, len);
  TensorT<S> picked = ops::gather_lastdim(ops::log_softmax_lastdim(rows), targets);
  TensorT<S> loss = ops::scale(ops::sum(ops::mul(picked, weight_t)), S(-1));
  if (sum_reduce) return loss;
  return ops::scale(loss, static_cast<S>(1.0 / w.total()));
}

// Training-ready bundle: the plain and tag-inserted tokenizations of one
// sample, each with its hotspot span sets.
struct SamplePack {
  TokenizedSample plain;
  TokenizedSample tagged;
};

inline SamplePack make_sample_pack(const Tokenizer& tok, const FqaSample& sample,
                                   bool few_shot = false,
                                   const std::vector<FqaSample>& exemplars = {}) {
  SamplePack p;
  p.plain = tokenize_sample(tok, sample, few_shot, exemplars);
  p.plain.span_ent = extract_entity_spans(p.plain);
  p.tagged = tokenize_sample(tok, insert_tags(sample), few_shot, exemplars);
  p.tagged.span_ent = extract_entity_spans(p.tagged);
  return p;
}

namespace detail {

template <class S>
TensorT<S> region_loss(const ModelT<S>& model, const Render& r, const TokenWeightVector& w,
                       bool sum_reduce) {
  const auto trace = model.forward(r.tokens);
  return wce(trace.logits, r.tokens, r.target_start, r.target_end, w, sum_reduce);
}

}  // namespace detail

// -log p(a | q) over the answer region of the qa render. The tagged flag is
// accepted for interface symmetry but has no effect: the qa render carries no
// knowledge text, so there is nothing to tag.
template <class S>
TensorT<S> loss_qa(const ModelT<S>& model, const SamplePack& pack, bool tagged = false) {
  const TokenizedSample& ts = tagged ? pack.tagged : pack.plain;
  return detail::region_loss(model, ts.qa, unit_weights(ts.qa.target_len()), false);
}

// Weighted cross-entropy over the knowledge region of the retrieval render;
// no weights means unit weights (the plain retrieval objective).
template <class S>
TensorT<S> loss_retrieval(const ModelT<S>& model, const SamplePack& pack,
                          const std::optional<TokenWeightVector>& w = std::nullopt,
                          bool tagged = false, bool sum_reduce = false) {
  const TokenizedSample& ts = tagged ? pack.tagged : pack.plain;
  return detail::region_loss(model, ts.retrieval,
                             w ? *w : unit_weights(ts.retrieval.target_len()), sum_reduce);
}

// -log p(a | q, k) over the answer region of the fqa render; tagged=true uses
// the tag-inserted knowledge.
template <class S>
TensorT<S> loss_fqa(const ModelT<S>& model, const SamplePack& pack, bool tagged = false) {
  const TokenizedSample& ts = tagged ? pack.tagged : pack.plain;
  return detail::region_loss(model, ts.fqa, unit_weights(ts.fqa.target_len()), false);
}

enum class LossVariant { qa, qa_fqa, qa_fqa_r, qa_fqa_e, tag_qa_fqa_e, f2 };

inline LossVariant parse_variant(const std::string& name) {
  if (name == "qa") return LossVariant::qa;
  if (name == "qa+fqa") return LossVariant::qa_fqa;
  if (name == "qa+fqa+r") return LossVariant::qa_fqa_r;
  if (name == "qa+fqa+e") return LossVariant::qa_fqa_e;
  if (name == "tag:qa+fqa+e") return LossVariant::tag_qa_fqa_e;
  if (name == "f2") return LossVariant::f2;
  throw ValidationError("unknown loss variant: " + name);
}

inline std::string variant_name(LossVariant v) {
  switch (v) {
    case LossVariant::qa: return "qa";
    case LossVariant::qa_fqa: return "qa+fqa";
    case LossVariant::qa_fqa_r: return "qa+fqa+r";
    case LossVariant::qa_fqa_e: return "qa+fqa+e";
    case LossVariant::tag_qa_fqa_e: return "tag:qa+fqa+e";
    case LossVariant::f2: return "f2";
  }
  return "?";
}

inline bool variant_uses_tags(LossVariant v) {
  return v == LossVariant::tag_qa_fqa_e || v == LossVariant::f2;
}

inline bool variant_uses_attention_spans(LossVariant v) { return v == LossVariant::f2; }

inline bool variant_uses_retrieval(LossVariant v) { return v != LossVariant::qa && v != LossVariant::qa_fqa; }

template <class S>
struct LossBreakdownT {
  TensorT<S> total;  // differentiable; unweighted sum of the components
  std::map<std::string, double> components;
  std::map<std::string, int> token_counts;

  double total_value() const { return static_cast<double>(total.values()[0]); }
};

// The combined objective at a given ablation variant. Components are
// mean-reduced and added without coefficients. The weighted variants read the
// span sets already present in the pack (entity spans are filled at pack
// construction; attention spans by the periodic extraction pass).
template <class S>
LossBreakdownT<S> loss_f2(const ModelT<S>& model, const SamplePack& pack, LossVariant variant,
                          double alpha) {
  const bool tagged = variant_uses_tags(variant);
  const TokenizedSample& ts = tagged ? pack.tagged : pack.plain;

  LossBreakdownT<S> out;
  TensorT<S> qa = loss_qa(model, pack, tagged);
  out.components["qa"] = static_cast<double>(qa.values()[0]);
  out.token_counts["qa"] = ts.qa.target_len();
  out.total = qa;
  if (variant == LossVariant::qa) return out;

  TensorT<S> fqa = loss_fqa(model, pack, tagged);
  out.components["fqa"] = static_cast<double>(fqa.values()[0]);
  out.token_counts["fqa"] = ts.fqa.target_len();
  out.total = ops::add(out.total, fqa);
  if (variant == LossVariant::qa_fqa) return out;

  const int region_len = ts.retrieval.target_len();
  TokenWeightVector w;
  switch (variant) {
    case LossVariant::qa_fqa_r:
      w = unit_weights(region_len);
      break;
    case LossVariant::qa_fqa_e:
    case LossVariant::tag_qa_fqa_e:
      w = make_weights(region_relative(ts.span_ent, ts.retrieval), alpha, region_len);
      break;
    case LossVariant::f2:
      w = make_weights_merged(region_relative(ts.span_ent, ts.retrieval),
                              region_relative(ts.span_attn, ts.retrieval), alpha, region_len);
      break;
    default:
      throw ValidationError("unknown loss variant");
  }
  TensorT<S> wr = loss_retrieval(model, pack, w, tagged);
  out.components["weighted_retrieval"] = static_cast<double>(wr.values()[0]);
  out.token_counts["weighted_retrieval"] = region_len;
  out.total = ops::add(out.total, wr);
  return out;
}

struct JointIdentity {
  double lhs = 0.0;
  double rhs = 0.0;
  double abs_diff = 0.0;
};

// Chain-rule identity between the decomposed and composed objectives: the
// sum-reduced retrieval loss plus the sum-reduced grounded-answer loss must
// equal the negative log probability of (k then a) under the composed render,
// because the fqa render extends the retrieval render token-exactly.
template <class S>
JointIdentity joint_identity_check(const ModelT<S>& model, const SamplePack& pack) {
  const Render& ret = pack.plain.retrieval;
  const Render& fqa = pack.plain.fqa;
  if (fqa.tokens.size() <= ret.tokens.size() ||
      !std::equal(ret.tokens.begin(), ret.tokens.end(), fqa.tokens.begin()))
    throw ValidationError("joint_identity_check: fqa render does not extend the retrieval render");

  JointIdentity j;
  {
    const auto ret_trace = model.forward(ret.tokens);
    const TensorT<S> lr = wce(ret_trace.logits, ret.tokens, ret.target_start, ret.target_end,
                              unit_weights(ret.target_len()), /*sum_reduce=*/true);
    const auto fqa_trace = model.forward(fqa.tokens);
    const TensorT<S> lf = wce(fqa_trace.logits, fqa.tokens, fqa.target_start, fqa.target_end,
                              unit_weights(fqa.target_len()), /*sum_reduce=*/true);
    j.lhs = static_cast<double>(lr.values()[0]) + static_cast<double>(lf.values()[0]);

    // Composed side: both target regions scored in the single fqa forward.
    // The knowledge tokens sit at the same positions in both renders.
    const TensorT<S> rhs_k = wce(fqa_trace.logits, fqa.tokens, ret.target_start, ret.target_end,
                                 unit_weights(ret.target_len()), /*sum_reduce=*/true);
    j.rhs = static_cast<double>(rhs_k.values()[0]) + static_cast<double>(lf.values()[0]);
  }
  j.abs_diff = std::abs(j.lhs - j.rhs);
  return j;
}

}  // namespace f2
