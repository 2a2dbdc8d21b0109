#include "f2/eval.hpp"

#include <gtest/gtest.h>

#include <cmath>

#include "f2/losses.hpp"
#include "f2/optim.hpp"

using f2::FactorItem;
using f2::FqaSample;
using f2::McItem;
using f2::McItemScore;
using f2::Model;
using f2::ModelConfig;
using f2::Rng;
using f2::Tokenizer;

namespace {

// Brute-force oracle for the multiple-choice definitions: every comparison
// enumerated directly, no shortcuts shared with the implementation except
// the max-subtraction mass formula (pinned by hand-value tests elsewhere).
McItemScore mc_oracle(const std::vector<double>& t, const std::vector<double>& f, int best) {
  McItemScore s;
  bool best_wins = true;
  for (const double ll : f) best_wins = best_wins && t[static_cast<std::size_t>(best)] > ll;
  s.mc1 = best_wins ? 1.0 : 0.0;

  double m = t[0];
  for (const double ll : t) m = std::max(m, ll);
  for (const double ll : f) m = std::max(m, ll);
  double tm = 0.0, fm = 0.0;
  for (const double ll : t) tm += std::exp(ll - m);
  for (const double ll : f) fm += std::exp(ll - m);
  s.mc2 = tm / (tm + fm);

  int above = 0;
  for (const double tt : t) {
    bool wins = true;
    for (const double ll : f) wins = wins && tt > ll;
    above += wins;
  }
  s.mc3 = static_cast<double>(above) / static_cast<double>(t.size());
  return s;
}

// Independent rank-then-Pearson oracle: ranks by pairwise counting (no
// sorting), Pearson from explicit means.
double spearman_oracle(const std::vector<double>& x, const std::vector<double>& y) {
  const auto ranks = [](const std::vector<double>& v) {
    std::vector<double> r(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) {
      int less = 0, equal = 0;
      for (std::size_t j = 0; j < v.size(); ++j) {
        less += v[j] < v[i];
        equal += v[j] == v[i];
      }
      r[i] = less + (equal + 1) / 2.0;
    }
    return r;
  };
  const auto rx = ranks(x), ry = ranks(y);
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    mx += rx[i];
    my += ry[i];
  }
  mx /= rx.size();
  my /= ry.size();
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  return sxy / std::sqrt(sxx * syy);
}

struct EvalFixture {
  f2::World world;
  Tokenizer tok;
  Model model;    // random-init
  Model uniform;  // lm_head zeroed: every next-token distribution is uniform

  EvalFixture() : world(f2::generate_world(44, 24, 24)) {
    tok = Tokenizer::build(world.corpus_text, f2::tag_tokens(world.gazetteer));
    ModelConfig cfg;
    cfg.vocab_size = tok.vocab_size();
    cfg.d_model = 16;
    cfg.n_layers = 2;
    cfg.n_heads = 2;
    cfg.context_len = 96;
    cfg.seed = 5;
    model = Model::init(cfg);
    uniform = Model::init(cfg);
    auto ckpt = uniform.to_checkpoint();
    auto& head = ckpt.tensors.at("lm_head");
    std::fill(head.values_mut().begin(), head.values_mut().end(), 0.0f);
    uniform = Model::from_checkpoint(ckpt);
  }

  double loglik(const Model& m, const std::string& q, const std::string& a) const {
    FqaSample s;
    s.question = q;
    s.answer = a;
    const auto r = f2::render_prompt(tok, f2::RenderKind::qa, s);
    std::vector<int> prompt(r.tokens.begin(), r.tokens.begin() + r.target_start);
    std::vector<int> target(r.tokens.begin() + r.target_start, r.tokens.end());
    return m.sequence_logprob(prompt, target);
  }
};

EvalFixture& fixture() {
  static EvalFixture f;
  return f;
}

}  // namespace

TEST(McFromLoglik, BestTrueAboveAllFalseScoresOne) {
  const auto s = f2::mc_from_loglik({-1.0}, {-2.0, -3.0}, 0);
  EXPECT_EQ(s.mc1, 1.0);
  EXPECT_EQ(s.mc3, 1.0);
}

TEST(McFromLoglik, NormalizedMassHandValue) {
  const auto s = f2::mc_from_loglik({std::log(0.2), std::log(0.3)}, {std::log(0.5)}, 1);
  EXPECT_NEAR(s.mc2, 0.5, 1e-12);
  EXPECT_EQ(s.mc1, 0.0);  // ln 0.3 < ln 0.5
  EXPECT_EQ(s.mc3, 0.0);
}

TEST(McFromLoglik, ExactTieScoresZero) {
  const auto s = f2::mc_from_loglik({-1.0, -4.0}, {-1.0}, 0);
  EXPECT_EQ(s.mc1, 0.0);
  EXPECT_EQ(s.mc3, 0.0);
}

TEST(McFromLoglik, MatchesBruteForceOracle) {
  Rng rng(31);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> t, f;
    const int nt = 1 + static_cast<int>(rng.next_below(4));
    const int nf = 1 + static_cast<int>(rng.next_below(4));
    for (int i = 0; i < nt; ++i) t.push_back(-5.0 * rng.next_double());
    for (int i = 0; i < nf; ++i) f.push_back(-5.0 * rng.next_double());
    if (trial % 3 == 0) f[0] = t[0];  // force occasional exact ties
    const int best = static_cast<int>(rng.next_below(static_cast<std::uint64_t>(nt)));
    const auto got = f2::mc_from_loglik(t, f, best);
    const auto want = mc_oracle(t, f, best);
    EXPECT_EQ(got.mc1, want.mc1) << trial;
    EXPECT_EQ(got.mc3, want.mc3) << trial;
    EXPECT_NEAR(got.mc2, want.mc2, 1e-12) << trial;
    EXPECT_GT(got.mc2, 0.0);
    EXPECT_LT(got.mc2, 1.0);
  }
}

TEST(McFromLoglik, NormalizedMassesSumToOne) {
  Rng rng(32);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> t = {-rng.next_double(), -rng.next_double()};
    std::vector<double> f = {-rng.next_double(), -rng.next_double(), -rng.next_double()};
    const double true_mass = f2::mc_from_loglik(t, f, 0).mc2;
    const double false_mass = f2::mc_from_loglik(f, t, 0).mc2;  // roles swapped
    EXPECT_NEAR(true_mass + false_mass, 1.0, 1e-9);
  }
}

TEST(McScores, UniformModelReducesToLengthComparison) {
  auto& f = fixture();
  const double v = static_cast<double>(f.tok.vocab_size());
  McItem item;
  item.question = "Where was Bram Thorne born?";
  item.true_answers = {"Karvale"};          // 1 token
  item.false_answers = {"Brim holt", "Vel mora"};  // 2 tokens each
  item.best_index = 0;
  const auto s = f2::mc_scores(f.uniform, f.tok, item);
  EXPECT_EQ(s.mc1, 1.0);
  EXPECT_EQ(s.mc3, 1.0);
  EXPECT_NEAR(s.mc2, v / (v + 2.0), 1e-6);
}

TEST(McScores, MatchesSequenceLogprobOracle) {
  auto& f = fixture();
  const auto& item = f.world.mc_items[3];
  const auto got = f2::mc_scores(f.model, f.tok, item);
  std::vector<double> t, fl;
  for (const auto& a : item.true_answers) t.push_back(f.loglik(f.model, item.question, a));
  for (const auto& a : item.false_answers) fl.push_back(f.loglik(f.model, item.question, a));
  const auto want = mc_oracle(t, fl, item.best_index);
  EXPECT_EQ(got.mc1, want.mc1);
  EXPECT_EQ(got.mc3, want.mc3);
  EXPECT_NEAR(got.mc2, want.mc2, 1e-12);
}

TEST(McEval, AggregateIsMeanOfItems) {
  auto& f = fixture();
  std::vector<McItem> items(f.world.mc_items.begin(), f.world.mc_items.begin() + 6);
  const auto scores = f2::mc_eval(f.model, f.tok, items);
  ASSERT_EQ(scores.per_item.size(), 6u);
  double m1 = 0, m2 = 0, m3 = 0;
  for (const auto& s : scores.per_item) {
    m1 += s.mc1;
    m2 += s.mc2;
    m3 += s.mc3;
  }
  EXPECT_NEAR(scores.mc1, m1 / 6.0, 1e-12);
  EXPECT_NEAR(scores.mc2, m2 / 6.0, 1e-12);
  EXPECT_NEAR(scores.mc3, m3 / 6.0, 1e-12);
  EXPECT_THROW(f2::mc_eval(f.model, f.tok, {}), f2::ValidationError);
}

TEST(FactorAccuracy, UniformModelLosesEveryTie) {
  auto& f = fixture();
  // Same token lengths everywhere -> identical likelihoods -> ties -> 0.
  FactorItem item;
  item.prefix = "Bram Thorne was born in";
  item.factual_completion = "Karvale.";
  item.nonfactual_completions = {"Brimholt.", "Velmora."};
  EXPECT_EQ(f2::factor_accuracy(f.uniform, f.tok, {item}), 0.0);
}

TEST(FactorAccuracy, MemorizedFactWins) {
  // A tiny model trained on three declarative sentences must prefer the
  // completion it has seen.
  Tokenizer tok = Tokenizer::build(
      "Alda Farrow was born in Karvale.\nBram Thorne was born in Brimholt.\n"
      "Cora Jessop was born in Velmora.\n");
  ModelConfig cfg;
  cfg.vocab_size = tok.vocab_size();
  cfg.d_model = 16;
  cfg.n_layers = 1;
  cfg.n_heads = 2;
  cfg.context_len = 32;
  cfg.seed = 12;
  Model m = Model::init(cfg);
  const std::vector<std::vector<int>> lines = {
      tok.encode("Alda Farrow was born in Karvale."),
      tok.encode("Bram Thorne was born in Brimholt."),
      tok.encode("Cora Jessop was born in Velmora.")};
  f2::AdamW opt;
  auto params = m.trainable_params();
  int step = 0;
  for (int epoch = 0; epoch < 80; ++epoch)
    for (const auto& ids : lines) {
      f2::Tape tape;
      f2::TapeScope scope(tape);
      auto loss = f2::wce(m.forward(ids).logits, ids, 1, static_cast<int>(ids.size()),
                          f2::unit_weights(static_cast<int>(ids.size()) - 1));
      for (auto& p : params) p.zero_grad();
      tape.backward(loss);
      opt.step(params, 1e-2, ++step);
    }

  FactorItem item;
  item.prefix = "Alda Farrow was born in";
  item.factual_completion = "Karvale.";
  item.nonfactual_completions = {"Brimholt.", "Velmora."};
  EXPECT_EQ(f2::factor_accuracy(m, tok, {item}), 1.0);
}

TEST(FactorAccuracy, AggregatesAsMeanOfIndicators) {
  auto& f = fixture();
  const std::vector<FactorItem> items(f.world.factor_items.begin(),
                                      f.world.factor_items.begin() + 8);
  const double acc = f2::factor_accuracy(f.model, f.tok, items);
  int wins = 0;
  for (const auto& item : items)
    wins += f2::factor_accuracy(f.model, f.tok, {item}) == 1.0;
  EXPECT_NEAR(acc, wins / 8.0, 1e-12);
  EXPECT_GE(acc, 0.0);
  EXPECT_LE(acc, 1.0);
}

TEST(RowEntropy, OneHotDistributionHasZeroEntropy) {
  const float row[4] = {1000.0f, -1000.0f, -1000.0f, -1000.0f};
  EXPECT_EQ(f2::detail::row_entropy(row, 4), 0.0);
  const float flat[4] = {1.0f, 1.0f, 1.0f, 1.0f};
  EXPECT_NEAR(f2::detail::row_entropy(flat, 4), std::log(4.0), 1e-12);
}

TEST(EntropyIndicators, MatchesEntropyLoopOracle) {
  auto& f = fixture();
  const auto& sample = f.world.train_samples[1];
  const auto row = f2::entropy_indicators(f.model, f.tok, sample, 1.1, 4);

  auto ts = f2::tokenize_sample(f.tok, sample);
  ts.span_ent = f2::extract_entity_spans(ts);
  const auto trace = f.model.forward(ts.retrieval.tokens, true);
  ts.span_attn = f2::extract_attention_spans(trace, ts, 4);
  const auto& r = ts.retrieval;
  const int v = trace.logits.dim(1);
  std::vector<double> h;
  for (int i = r.target_start; i < r.target_end; ++i) {
    double denom = 0.0, ent = 0.0;
    const float* lrow = trace.logits.values().data() + static_cast<std::size_t>(i - 1) * v;
    double mx = lrow[0];
    for (int c = 0; c < v; ++c) mx = std::max(mx, static_cast<double>(lrow[c]));
    for (int c = 0; c < v; ++c) denom += std::exp(static_cast<double>(lrow[c]) - mx);
    for (int c = 0; c < v; ++c) {
      const double p = std::exp(static_cast<double>(lrow[c]) - mx) / denom;
      ent -= p * std::log(p);
    }
    h.push_back(ent);
    EXPECT_LE(ent, std::log(static_cast<double>(v)) + 1e-9);
  }
  double plain = 0.0;
  for (const double x : h) plain += x;
  plain /= static_cast<double>(h.size());
  EXPECT_NEAR(row.avg_h, plain, 1e-6);

  const auto we = f2::make_weights(f2::region_relative(ts.span_ent, r), 1.1, r.target_len());
  const auto wae = f2::make_weights_merged(f2::region_relative(ts.span_ent, r),
                                           f2::region_relative(ts.span_attn, r), 1.1,
                                           r.target_len());
  double ne = 0, de = 0, nae = 0, dae = 0;
  for (std::size_t i = 0; i < h.size(); ++i) {
    ne += we.weights[i] * h[i];
    de += we.weights[i];
    nae += wae.weights[i] * h[i];
    dae += wae.weights[i];
  }
  EXPECT_NEAR(row.avg_e_h, ne / de, 1e-6);
  EXPECT_NEAR(row.avg_ae_h, nae / dae, 1e-6);
}

TEST(EntropyIndicators, NoEntitiesAndZeroKCollapseToPlainMean) {
  auto& f = fixture();
  FqaSample s;
  s.question = "Where is it?";
  s.knowledge = "it is somewhere far away.";
  s.answer = "somewhere";
  s.hallucinated_answer = "elsewhere";
  const auto row = f2::entropy_indicators(f.model, f.tok, s, 1.1, 0);
  EXPECT_EQ(row.avg_e_h, row.avg_h);
  EXPECT_EQ(row.avg_ae_h, row.avg_h);
}

TEST(EntropyIndicators, LabelMatchesLikelihoodComparison) {
  auto& f = fixture();
  for (std::size_t i = 0; i < 6; ++i) {
    const auto& s = f.world.train_samples[i];
    const auto row = f2::entropy_indicators(f.model, f.tok, s, 1.1, 4);
    const double right = f.loglik(f.model, s.question, s.answer);
    const double wrong = f.loglik(f.model, s.question, *s.hallucinated_answer);
    EXPECT_EQ(row.y, right < wrong ? 1 : 0);
  }
}

TEST(EntropyIndicators, MissingDistractorRejected) {
  auto& f = fixture();
  FqaSample s = f.world.train_samples[0];
  s.hallucinated_answer.reset();
  EXPECT_THROW(f2::entropy_indicators(f.model, f.tok, s, 1.1, 4), f2::ValidationError);
}

TEST(Spearman, PerfectMonotoneGivesUnitRho) {
  std::vector<double> x, y;
  for (int i = 1; i <= 10; ++i) {
    x.push_back(i);
    y.push_back(i);
  }
  const auto r = f2::spearman(x, y);
  EXPECT_EQ(r.rho, 1.0);
  EXPECT_EQ(r.p_value, 0.0);
  std::reverse(y.begin(), y.end());
  EXPECT_EQ(f2::spearman(x, y).rho, -1.0);
}

TEST(Spearman, MatchesRankThenPearsonOracleWithTies) {
  Rng rng(55);
  for (int trial = 0; trial < 25; ++trial) {
    const std::size_t n = 8 + rng.next_below(20);
    std::vector<double> x, y;
    for (std::size_t i = 0; i < n; ++i) {
      x.push_back(static_cast<double>(rng.next_below(6)));  // heavy ties
      y.push_back(static_cast<double>(rng.next_below(6)));
    }
    bool degenerate_x = std::all_of(x.begin(), x.end(), [&](double v) { return v == x[0]; });
    bool degenerate_y = std::all_of(y.begin(), y.end(), [&](double v) { return v == y[0]; });
    if (degenerate_x || degenerate_y) continue;
    EXPECT_NEAR(f2::spearman(x, y).rho, spearman_oracle(x, y), 1e-9) << trial;
  }
}

TEST(Spearman, MatchesFrozenReferenceValues) {
  // rho and p cross-checked against an independent statistics library.
  struct Case {
    std::vector<double> x, y;
    double rho, p;
  };
  const std::vector<Case> cases = {
      {{3, 1, 4, 1, 5, 9, 2, 6, 5, 3}, {2, 7, 1, 8, 2, 8, 1, 8, 2, 8},
       0.13471506281091267, 0.7106008805223829},
      {{1.5, 2.5, 2.5, 4.0, 4.0, 4.0, 7.0, 8.0}, {10, 9, 9, 9, 5, 4, 3, 1},
       -0.9308360200392612, 0.0007848289439117256},
      {{0, 1, 0, 1, 1, 0, 1, 0, 1, 1, 0, 1},
       {0.2, 0.9, 0.1, 0.8, 0.7, 0.3, 0.95, 0.15, 0.6, 0.85, 0.25, 0.4},
       0.8568930704969754, 0.00036987470986405877},
  };
  for (const auto& c : cases) {
    const auto r = f2::spearman(c.x, c.y);
    EXPECT_NEAR(r.rho, c.rho, 1e-12);
    EXPECT_NEAR(r.p_value, c.p, 1e-12);
  }
}

TEST(Spearman, InvariantUnderStrictlyMonotoneTransforms) {
  Rng rng(66);
  std::vector<double> x, y;
  for (int i = 0; i < 40; ++i) {
    x.push_back(rng.next_normal());
    y.push_back(static_cast<double>(rng.next_below(5)));
  }
  const auto base = f2::spearman(x, y);
  std::vector<double> xt, yt;
  for (const double v : x) xt.push_back(std::exp(v));
  for (const double v : y) yt.push_back(3.0 * v + 7.0);
  const auto t = f2::spearman(xt, yt);
  EXPECT_NEAR(t.rho, base.rho, 1e-12);
  EXPECT_NEAR(t.p_value, base.p_value, 1e-12);
}

TEST(Spearman, DegenerateInputsRejected) {
  EXPECT_THROW(f2::spearman({1, 2}, {1, 2}), f2::ValidationError);
  EXPECT_THROW(f2::spearman({1, 2, 3}, {1, 2}), f2::ValidationError);
  EXPECT_THROW(f2::spearman({5, 5, 5, 5}, {1, 2, 3, 4}), f2::ValidationError);
  EXPECT_THROW(f2::spearman({1, 2, 3, 4}, {7, 7, 7, 7}), f2::ValidationError);
}

TEST(ObservationExperiment, FullPopulationIsSeedIndependent) {
  auto& f = fixture();
  const int n = static_cast<int>(f.world.train_samples.size());
  const auto a = f2::observation_experiment(f.model, f.tok, f.world.train_samples, n, 1, 1.1, 4);
  const auto b = f2::observation_experiment(f.model, f.tok, f.world.train_samples, n, 2, 1.1, 4);
  ASSERT_EQ(a.rows.size(), b.rows.size());
  for (std::size_t i = 0; i < a.rows.size(); ++i) {
    EXPECT_EQ(a.rows[i].sample_id, b.rows[i].sample_id);
    EXPECT_EQ(a.rows[i].avg_h, b.rows[i].avg_h);
  }
  EXPECT_EQ(a.avg.rho, b.avg.rho);
  EXPECT_EQ(a.avg_ae.p_value, b.avg_ae.p_value);
}

TEST(ObservationExperiment, SeededSubsetIsDeterministic) {
  auto& f = fixture();
  auto samples = f.world.train_samples;
  for (auto& s : f.world.eval_samples) samples.push_back(s);
  const auto a = f2::observation_experiment(f.model, f.tok, samples, 8, 9, 1.1, 4);
  const auto b = f2::observation_experiment(f.model, f.tok, samples, 8, 9, 1.1, 4);
  ASSERT_EQ(a.rows.size(), 8u);
  for (std::size_t i = 0; i < a.rows.size(); ++i)
    EXPECT_EQ(a.rows[i].sample_id, b.rows[i].sample_id);
  EXPECT_EQ(a.avg.rho, b.avg.rho);
  const auto j = a.to_json();
  EXPECT_EQ(j["rows"].size(), 8u);
  EXPECT_TRUE(j["spearman"].contains("avg_AE_h"));
}

TEST(ObservationExperiment, InsufficientSamplesRejected) {
  auto& f = fixture();
  EXPECT_THROW(f2::observation_experiment(f.model, f.tok, f.world.train_samples, 1000, 1, 1.1, 4),
               f2::ValidationError);
  EXPECT_THROW(f2::observation_experiment(f.model, f.tok, f.world.train_samples, 2, 1, 1.1, 4),
               f2::ValidationError);
}
