#include <doctest.h>

#include "flip/errors.hpp"
#include "flip/evaluation.hpp"
#include "oracles.hpp"

#include <boost/math/distributions/students_t.hpp>
#include <boost/math/special_functions/beta.hpp>

#include <cmath>
#include <filesystem>
#include <limits>

using namespace flip;
namespace fs = std::filesystem;

namespace {

ScoreSet make_set(const std::vector<double>& real, const std::vector<double>& spoof) {
  ScoreSet s;
  long i = 0;
  for (double v : real) s.entries.push_back({"r" + std::to_string(i++), v, Label::Real});
  for (double v : spoof) s.entries.push_back({"f" + std::to_string(i++), v, Label::Spoof});
  return s;
}

MetricReport report(const std::string& protocol, double hter, double auc = 0.9, double tpr = 0.5) {
  MetricReport r;
  r.protocol = protocol;
  r.hter = hter;
  r.auc = auc;
  r.tpr_at_fpr = tpr;
  return r;
}

const fixture::SyntheticSplit& data() {
  static const fixture::SyntheticSplit d = fixture::two_domain(4, 6);
  return d;
}

}  // namespace

TEST_SUITE("evaluation") {

TEST_CASE("HTER by construction") {
  // threshold between the classes
  CHECK(compute_hter(make_set({0.9, 0.8, 0.7}, {0.1, 0.2, 0.3})).hter == 0.0);

  // 2 of 10 spoofs accepted, 1 of 10 reals rejected
  std::vector<double> real(10, 0.9), spoof(10, 0.1);
  real[0] = 0.2;
  spoof[0] = 0.6;
  spoof[1] = 0.5;  // accepted: ties go to real
  const HterResult h = compute_hter(make_set(real, spoof));
  CHECK(h.far == doctest::Approx(0.2));
  CHECK(h.frr == doctest::Approx(0.1));
  CHECK(h.hter == doctest::Approx(0.15));
  CHECK(h.false_accepts == 2);
  CHECK(h.false_rejects == 1);
}

TEST_CASE("metrics reject single-class score sets") {
  const ScoreSet only_real = make_set({0.2, 0.9}, {});
  CHECK_THROWS_AS(compute_hter(only_real), DomainError);
  CHECK_THROWS_AS(compute_auc(only_real), DomainError);
  CHECK_THROWS_AS(compute_tpr_at_fpr(only_real), DomainError);
  CHECK_THROWS_AS(compute_tpr_at_fpr(make_set({0.9}, {0.1}), 0.0), DomainError);
}

TEST_CASE("AUC edge cases") {
  CHECK(compute_auc(make_set({0.9, 0.8}, {0.1, 0.2, 0.3})) == 1.0);
  CHECK(compute_auc(make_set({0.1, 0.2}, {0.8, 0.9})) == 0.0);
  CHECK(compute_auc(make_set({0.4, 0.4, 0.4}, {0.4, 0.4})) == 0.5);
}

TEST_CASE("TPR at FPR edge cases") {
  const TprResult perfect = compute_tpr_at_fpr(make_set({0.9, 0.8}, {0.1, 0.2}));
  CHECK(perfect.tpr == 1.0);
  CHECK(perfect.quantization_limited);

  // identical real and spoof distributions: TPR tracks the FPR budget
  std::vector<double> grid;
  for (int i = 0; i < 1000; ++i) grid.push_back(i / 1000.0);
  const ScoreSet same = make_set(grid, grid);
  for (double target : {0.01, 0.05, 0.2}) {
    const TprResult r = compute_tpr_at_fpr(same, target);
    CHECK(r.tpr == doctest::Approx(target).epsilon(1e-9));
    CHECK_FALSE(r.quantization_limited);
  }
}

TEST_CASE("metrics agree with brute-force oracles on random score sets") {
  Rng rng(11);
  for (int trial = 0; trial < 300; ++trial) {
    const long n = 2 + static_cast<long>(uniform_index(rng, 49));  // 2..50
    const ScoreSet s = oracle::random_scores(rng, n);
    for (double t : {0.0, 0.25, 0.5, 0.73, 1.0}) {
      const HterResult h = compute_hter(s, ThresholdPolicy::Fixed, t);
      const oracle::Counts c = oracle::confusion(s, t);
      CHECK(h.false_accepts == c.false_accepts);
      CHECK(h.false_rejects == c.false_rejects);
      const double want = 0.5 * (static_cast<double>(c.false_accepts) / s.count(Label::Spoof) +
                                 static_cast<double>(c.false_rejects) / s.count(Label::Real));
      CHECK(h.hter == doctest::Approx(want).epsilon(1e-12));
    }
    CHECK(compute_auc(s) == doctest::Approx(oracle::auc(s)).epsilon(1e-12));
    for (double target : {0.01, 0.1, 0.3, 1.0}) {
      CHECK(compute_tpr_at_fpr(s, target).tpr == doctest::Approx(oracle::tpr_at_fpr(s, target)).epsilon(1e-12));
    }
  }
}

TEST_CASE("AUC is invariant under strictly monotone transforms") {
  Rng rng(5);
  for (int trial = 0; trial < 100; ++trial) {
    const ScoreSet s = oracle::random_scores(rng, 30);
    const double base = compute_auc(s);
    for (auto f : {+[](double x) { return std::exp(3 * x); }, +[](double x) { return x * x * x - 4; },
                   +[](double x) { return std::atan(10 * x - 5); }}) {
      ScoreSet t = s;
      for (auto& e : t.entries) e.score = f(e.score);
      CHECK(compute_auc(t) == doctest::Approx(base).epsilon(1e-12));
    }
  }
}

TEST_CASE("HTER at the EER threshold matches the EER within one quantization step") {
  Rng rng(19);
  for (int trial = 0; trial < 200; ++trial) {
    const ScoreSet s = oracle::random_scores(rng, 4 + static_cast<long>(uniform_index(rng, 47)));
    const double n_real = static_cast<double>(s.count(Label::Real));
    const double n_spoof = static_cast<double>(s.count(Label::Spoof));
    // EER oracle: over every "accept >= v" threshold, the smallest max(FAR, FRR)
    double eer = 1.0;
    std::vector<double> thresholds{std::numeric_limits<double>::infinity()};
    for (const auto& e : s.entries) thresholds.push_back(e.score);
    for (double t : thresholds) {
      const oracle::Counts c = oracle::confusion(s, t);
      eer = std::min(eer, std::max(c.false_accepts / n_spoof, c.false_rejects / n_real));
    }
    const double step = std::max(1.0 / n_real, 1.0 / n_spoof);
    const HterResult h = compute_hter(s, ThresholdPolicy::Eer);
    CHECK(std::abs(h.hter - eer) <= step + 1e-12);
  }
}

TEST_CASE("TPR is nondecreasing in the FPR target") {
  Rng rng(23);
  for (int trial = 0; trial < 100; ++trial) {
    const ScoreSet s = oracle::random_scores(rng, 40);
    double prev = 0;
    for (double target = 0.01; target <= 1.0; target += 0.01) {
      const double tpr = compute_tpr_at_fpr(s, target).tpr;
      CHECK(tpr >= prev);
      prev = tpr;
    }
  }
}

TEST_CASE("ROC curve runs from (0,0) to (1,1) with midpoint thresholds") {
  const auto roc = roc_curve(make_set({0.9, 0.6}, {0.6, 0.1}));
  REQUIRE(roc.size() == 4);
  CHECK(std::isinf(roc.front().threshold));
  CHECK(roc.front().fpr == 0.0);
  CHECK(roc[1].threshold == doctest::Approx(0.75));
  CHECK(roc[2].threshold == doctest::Approx(0.35));
  CHECK(roc[2].fpr == 0.5);
  CHECK(roc[2].tpr == 1.0);
  CHECK(roc.back().fpr == 1.0);
  CHECK(roc.back().tpr == 1.0);
  CHECK(std::isinf(roc.back().threshold));
}

TEST_CASE("aggregation over seeds") {
  const AggregateReport two = aggregate_seeds({report("P", 2.0), report("P", 4.0)});
  CHECK(two.hter.mean == doctest::Approx(3.0));
  CHECK(two.hter.std == doctest::Approx(std::sqrt(2.0)));
  CHECK(two.runs == 2);

  const AggregateReport same = aggregate_seeds({report("P", 0.1), report("P", 0.1), report("P", 0.1)});
  CHECK(same.hter.std == 0.0);
  CHECK(same.auc.std == 0.0);

  Rng rng(29);
  std::vector<MetricReport> reports;
  std::vector<double> h, a, t;
  for (int i = 0; i < 5; ++i) {
    reports.push_back(report("P", uniform01(rng) * 0.5, uniform01(rng), uniform01(rng)));
    h.push_back(reports.back().hter);
    a.push_back(reports.back().auc);
    t.push_back(reports.back().tpr_at_fpr);
  }
  const AggregateReport five = aggregate_seeds(reports);
  CHECK(five.hter.mean == doctest::Approx(oracle::mean(h)).epsilon(1e-14));
  CHECK(five.hter.std == doctest::Approx(oracle::sample_std(h)).epsilon(1e-12));
  CHECK(five.auc.std == doctest::Approx(oracle::sample_std(a)).epsilon(1e-12));
  CHECK(five.tpr_at_fpr.mean == doctest::Approx(oracle::mean(t)).epsilon(1e-14));

  CHECK_THROWS_AS(aggregate_seeds({report("P", 0.1)}), DomainError);
  CHECK_THROWS_AS(aggregate_seeds({report("P", 0.1), report("Q", 0.2)}), ConfigError);
}

TEST_CASE("incomplete beta and t CDF match Boost") {
  for (double a : {0.5, 1.0, 2.5, 7.0}) {
    for (double b : {0.5, 3.0, 10.0}) {
      for (double x : {0.0, 0.01, 0.3, 0.5, 0.77, 0.999, 1.0}) {
        CHECK(incomplete_beta(a, b, x) == doctest::Approx(boost::math::ibeta(a, b, x)).epsilon(1e-12));
      }
    }
  }
  for (double df : {1.0, 2.0, 4.0, 9.0, 30.0}) {
    const boost::math::students_t dist(df);
    for (double t : {-8.0, -2.1, -0.3, 0.0, 0.7, 3.3}) {
      CHECK(student_t_cdf(t, df) == doctest::Approx(boost::math::cdf(dist, t)).epsilon(1e-10));
    }
  }
}

TEST_CASE("paired t-test") {
  // constant differences are degenerate
  CHECK_THROWS_WITH_AS(paired_ttest({2, 3, 2, 3, 2}, {4, 5, 4, 5, 4}), doctest::Contains("zero variance"),
                       DomainError);
  CHECK_THROWS_AS(paired_ttest({1, 2, 3}, {1, 2, 3}), DomainError);
  // 0.1 - 0.2 and 0.3 - 0.4 differ in the last bits
  CHECK_THROWS_AS(paired_ttest({0.1, 0.2, 0.3}, {0.2, 0.3, 0.4}), DomainError);
  CHECK_THROWS_AS(paired_ttest({1, 2}, {1}), DomainError);
  CHECK_THROWS_AS(paired_ttest({1}, {2}), DomainError);

  const std::vector<double> a{2, 3, 2, 3, 2}, b{4, 5, 4, 5, 5};
  const TTestResult r = paired_ttest(a, b);
  // reference: differences -2,-2,-2,-2,-3
  const double mean = -2.2, sd = std::sqrt(0.2);
  const double t = mean / (sd / std::sqrt(5.0));
  CHECK(r.t == doctest::Approx(t).epsilon(1e-12));
  CHECK(r.df == 4);
  CHECK(r.p == doctest::Approx(boost::math::cdf(boost::math::students_t(4), t)).epsilon(1e-9));
  CHECK(r.reject);

  const TTestResult swapped = paired_ttest(b, a);
  CHECK(swapped.p == doctest::Approx(1.0 - r.p).epsilon(1e-12));
  CHECK_FALSE(swapped.reject);

  Rng rng(31);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> x, y;
    for (int i = 0; i < 5; ++i) {
      x.push_back(uniform01(rng));
      y.push_back(uniform01(rng));
    }
    const TTestResult p = paired_ttest(x, y), q = paired_ttest(y, x);
    CHECK(p.p + q.p == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(p.reject == (p.p < 0.05));
  }
}

TEST_CASE("score sets round trip through CSV") {
  const fs::path dir = fs::path(FLIP_TEST_TMP) / "scores";
  fs::create_directories(dir);
  ScoreSet s = make_set({0.123456789012345678, 1.0}, {0.0, 1.0 / 3.0});
  s.missing = 2;
  s.save(dir / "a.csv", "config=abc seed=1");
  const ScoreSet back = ScoreSet::load(dir / "a.csv");
  REQUIRE(back.entries.size() == 4);
  CHECK(back.missing == 2);
  for (std::size_t i = 0; i < 4; ++i) {
    CHECK(back.entries[i].sample_id == s.entries[i].sample_id);
    CHECK(back.entries[i].score == s.entries[i].score);
    CHECK(back.entries[i].label == s.entries[i].label);
  }

  ScoreSet dup = s;
  dup.entries[1].sample_id = dup.entries[0].sample_id;
  CHECK_THROWS_AS(dup.validate(), ConfigError);
  ScoreSet nan = s;
  nan.entries[0].score = std::nan("");
  CHECK_THROWS_AS(nan.validate(), DomainError);
  CHECK_THROWS_AS(ScoreSet::load(dir / "absent.csv"), IoError);
}

TEST_CASE("metric reports serialize infinite thresholds") {
  MetricReport r = evaluate_scores(make_set({0.9, 0.8}, {0.1, 0.2}), ThresholdPolicy::Fixed, 0.5, 0.01);
  CHECK(r.hter == 0.0);
  CHECK(r.auc == 1.0);
  CHECK(r.tpr_at_fpr == 1.0);
  CHECK(r.tpr_quantization_limited);
  r.threshold = std::numeric_limits<double>::infinity();
  const MetricReport back = MetricReport::from_json(nlohmann::json::parse(r.to_json().dump()));
  CHECK(std::isinf(back.threshold));
  CHECK(back.hter == r.hter);
  CHECK(back.samples == 4);
  CHECK_THROWS_AS(MetricReport::from_json(nlohmann::json::object()), IoError);

  MetricReport bad = r;
  bad.auc = 1.5;
  CHECK_THROWS_AS(bad.validate(), DomainError);
}

TEST_CASE("summary table lists mean (std) per scenario and an average") {
  AggregateReport a1{"OCI → M", "IT", 5, {0.05, 0.01}, {0.98, 0.005}, {0.8, 0.02}};
  AggregateReport a2{"OMI → C", "IT", 5, {0.15, 0.03}, {0.92, 0.01}, {0.4, 0.1}};
  const std::string t = render_summary_table({{"FLIP-IT", {a1, a2}}});
  CHECK(t.find("OCI → M") != std::string::npos);
  CHECK(t.find("5.00 (1.00)") != std::string::npos);
  CHECK(t.find("Avg.") != std::string::npos);
  CHECK(t.find("10.00") != std::string::npos);  // mean HTER over the two scenarios
  CHECK(t.find("TPR@FPR=1%") != std::string::npos);
  CHECK_THROWS_AS(render_summary_table({{"A", {a1, a2}}, {"B", {a2, a1}}}), ConfigError);
}

TEST_CASE("inference scores every readable sample in order") {
  FlipModel model(ModelConfig::toy(), 1);
  const auto& d = data();
  const PromptSet prompts = PromptSet::defaults();
  const auto& samples = d.split.target.samples;

  const ScoreSet s = infer_scores(model, Strategy::IT, samples, d.images, prompts, 5);
  REQUIRE(s.entries.size() == samples.size());
  CHECK(s.missing == 0);
  for (std::size_t i = 0; i < samples.size(); ++i) {
    CHECK(s.entries[i].sample_id == samples[i].key());
    CHECK(s.entries[i].label == samples[i].label);
    CHECK(s.entries[i].score >= 0.0);
    CHECK(s.entries[i].score <= 1.0);
  }

  const ScoreSet again = infer_scores(model, Strategy::IT, samples, d.images, prompts, 5);
  for (std::size_t i = 0; i < samples.size(); ++i) CHECK(again.entries[i].score == s.entries[i].score);
  // another batch size only reorders floating-point sums
  const ScoreSet rebatched = infer_scores(model, Strategy::IT, samples, d.images, prompts, 3);
  for (std::size_t i = 0; i < samples.size(); ++i)
    CHECK(rebatched.entries[i].score == doctest::Approx(s.entries[i].score).epsilon(1e-12));

  std::vector<Sample> with_missing = samples;
  Sample ghost = samples.front();
  ghost.id = "ghost";
  with_missing.insert(with_missing.begin() + 2, ghost);
  const ScoreSet partial = infer_scores(model, Strategy::IT, with_missing, d.images, prompts, 4);
  CHECK(partial.missing == 1);
  CHECK(partial.entries.size() == samples.size());
}

TEST_CASE("prompt-similarity score is the softmax over scaled cosines") {
  FlipModel model(ModelConfig::toy(), 2);
  const auto& d = data();
  const PromptSet prompts = PromptSet::defaults();
  const Sample& sample = d.split.target.samples.front();
  const FaceImage face = normalize(d.images.load(sample));

  const double got = score_image(model, Strategy::MCL, face, prompts);

  ag::NoGradGuard guard;
  const auto x = oracle::to_rows(model.image.encode({face}).embedding.value()).front();
  const ClassEmbeddings cls = embed_prompt_set(prompts, model.text);
  std::vector<double> zr(cls.z_real.data(), cls.z_real.data() + cls.z_real.size());
  std::vector<double> zs(cls.z_spoof.data(), cls.z_spoof.data() + cls.z_spoof.size());
  const double tau = std::exp(-model.logit_scale.value(0, 0));
  const double er = std::exp(oracle::cosine(x, zr) / tau), es = std::exp(oracle::cosine(x, zs) / tau);
  CHECK(got == doctest::Approx(er / (er + es)).epsilon(1e-12));
}

TEST_CASE("vision-only scoring never runs the text tower") {
  FlipModel model(ModelConfig::toy(), 3);
  for (Parameter* p : model.text.parameters()) p->value.setConstant(std::nan(""));
  const auto& d = data();
  const ScoreSet s = infer_scores(model, Strategy::V, d.split.target.samples, d.images, PromptSet::defaults());
  CHECK(s.entries.size() == d.split.target.samples.size());
  for (const auto& e : s.entries) CHECK(std::isfinite(e.score));
  // the same model fails on the prompt path
  CHECK_THROWS(infer_scores(model, Strategy::IT, d.split.target.samples, d.images, PromptSet::defaults()));
}

}  // TEST_SUITE
