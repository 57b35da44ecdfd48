#pragma once

// Target-domain scoring and the reported metrics: HTER at a fixed or EER
// threshold, Mann-Whitney AUC, TPR at a fixed FPR, seed aggregation and a
// one-sided paired t-test. A sample is accepted as real when its score
// (p_real) is at or above the threshold.

#include "flip/data.hpp"
#include "flip/encoders.hpp"
#include "flip/prompts.hpp"
#include "flip/training.hpp"

#include <json.hpp>

#include <filesystem>
#include <limits>
#include <string>
#include <vector>

namespace flip {

struct ScoreEntry {
  std::string sample_id;
  double score = 0.0;  // p_real
  Label label = Label::Real;
};

struct ScoreSet {
  std::vector<ScoreEntry> entries;
  long missing = 0;  // samples skipped because their image could not be read

  long count(Label l) const;
  /// Unique ids, finite scores in [0, 1].
  void validate() const;

  /// CSV sample_id,score,label; lines starting with '#' carry provenance.
  void save(const std::filesystem::path& path, const std::string& provenance = "") const;
  static ScoreSet load(const std::filesystem::path& path);
};

/// Scores every sample: MLP-head softmax for V, prompt-similarity softmax for
/// IT/MCL (class embeddings computed once). Unreadable images are counted in
/// ScoreSet::missing and left out.
ScoreSet infer_scores(FlipModel& model, Strategy strategy, const std::vector<Sample>& samples,
                      const ImageSource& images, const PromptSet& prompts, long batch_size = 32);

/// p_real for a single preprocessed image.
double score_image(FlipModel& model, Strategy strategy, const FaceImage& img, const PromptSet& prompts);

enum class ThresholdPolicy { Fixed, Eer };

struct HterResult {
  double hter = 0.0;
  double far = 0.0;  // spoof accepted as real
  double frr = 0.0;  // real rejected as spoof
  long false_accepts = 0;
  long false_rejects = 0;
  double threshold = 0.5;
};

struct RocPoint {
  double threshold;  // accept real when score >= threshold
  double fpr;
  double tpr;
};

/// Operating points at +inf, every midpoint between consecutive distinct
/// scores, and -inf, in decreasing threshold order.
std::vector<RocPoint> roc_curve(const ScoreSet& s);

HterResult compute_hter(const ScoreSet& s, ThresholdPolicy policy = ThresholdPolicy::Fixed,
                        double fixed_threshold = 0.5);
/// Threshold whose operating point minimizes |FAR - FRR| (ties: lower HTER,
/// then higher threshold).
double eer_threshold(const ScoreSet& s);
double compute_auc(const ScoreSet& s);

struct TprResult {
  double tpr = 0.0;
  double threshold = std::numeric_limits<double>::infinity();
  bool quantization_limited = false;  // fewer than 1/fpr_target spoof samples
};

TprResult compute_tpr_at_fpr(const ScoreSet& s, double fpr_target = 0.01);

struct MetricReport {
  std::string protocol;  // scenario label, e.g. "OCI → M"
  std::string strategy;
  std::uint64_t seed = 0;
  double hter = 0.0;
  double auc = 0.0;
  double tpr_at_fpr = 0.0;
  double fpr_target = 0.01;
  double threshold = 0.5;
  std::string threshold_policy = "fixed";
  bool tpr_quantization_limited = false;
  long samples = 0;
  long missing = 0;
  std::string config_hash;
  std::string code_version = kCodeVersion;

  void validate() const;
  nlohmann::json to_json() const;
  static MetricReport from_json(const nlohmann::json& j);
};

MetricReport evaluate_scores(const ScoreSet& s, ThresholdPolicy policy = ThresholdPolicy::Fixed,
                             double fixed_threshold = 0.5, double fpr_target = 0.01);

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;  // sample standard deviation
};

struct AggregateReport {
  std::string protocol;
  std::string strategy;
  long runs = 0;
  MeanStd hter, auc, tpr_at_fpr;
  nlohmann::json to_json() const;
};

/// Mean and sample standard deviation over >= 2 seeds of one scenario.
AggregateReport aggregate_seeds(const std::vector<MetricReport>& reports);

struct TTestResult {
  double t = 0.0;
  long df = 0;
  double p = 0.0;
  bool reject = false;  // p < 0.05
};

/// One-sided paired t-test of H1: mean(a - b) < 0 (a better, e.g. lower HTER).
TTestResult paired_ttest(const std::vector<double>& a, const std::vector<double>& b, double alpha = 0.05);

/// Regularized incomplete beta I_x(a, b).
double incomplete_beta(double a, double b, double x);
/// CDF of Student's t with `df` degrees of freedom.
double student_t_cdf(double t, double df);

/// Methods as rows, scenarios as column groups (HTER, AUC, TPR@FPR as
/// percentages, "mean (std)"), plus an average column when there is more
/// than one scenario.
struct SummaryRow {
  std::string method;
  std::vector<AggregateReport> scenarios;
};
std::string render_summary_table(const std::vector<SummaryRow>& rows, double fpr_target = 0.01);

void write_roc_csv(const std::filesystem::path& path, const std::vector<RocPoint>& roc);

}  // namespace flip
