#include "flip/evaluation.hpp"

#include "flip/errors.hpp"
#include "flip/losses.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <future>
#include <iomanip>
#include <set>
#include <sstream>
#include <thread>

namespace flip {

long ScoreSet::count(Label l) const {
  return std::count_if(entries.begin(), entries.end(), [l](const ScoreEntry& e) { return e.label == l; });
}

void ScoreSet::validate() const {
  std::set<std::string> ids;
  for (const auto& e : entries) {
    if (!ids.insert(e.sample_id).second) throw ConfigError("score set: duplicate sample id '" + e.sample_id + "'");
    if (!std::isfinite(e.score)) throw DomainError("score set: non-finite score for '" + e.sample_id + "'");
  }
}

void ScoreSet::save(const std::filesystem::path& path, const std::string& provenance) const {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write scores " + path.string());
  if (!provenance.empty()) out << "# " << provenance << "\n";
  if (missing) out << "# missing=" << missing << "\n";
  out << "sample_id,score,label\n" << std::setprecision(17);
  for (const auto& e : entries) out << e.sample_id << "," << e.score << "," << to_string(e.label) << "\n";
}

ScoreSet ScoreSet::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open scores " + path.string());
  ScoreSet s;
  std::string line;
  bool header = false;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (line[0] == '#') {
      if (line.rfind("# missing=", 0) == 0) s.missing = std::stol(line.substr(10));
      continue;
    }
    if (!header) {
      if (line != "sample_id,score,label") throw IoError(path.string() + ": expected header sample_id,score,label");
      header = true;
      continue;
    }
    const auto a = line.find(',');
    const auto b = line.rfind(',');
    if (a == std::string::npos || a == b) throw IoError(path.string() + ": malformed line '" + line + "'");
    s.entries.push_back({line.substr(0, a), std::stod(line.substr(a + 1, b - a - 1)), parse_label(line.substr(b + 1))});
  }
  s.validate();
  return s;
}

// ---------------------------------------------------------------------------
// Scoring

namespace {

std::vector<double> p_real_rows(FlipModel& model, Strategy strategy, const std::vector<FaceImage>& batch,
                                const ClassEmbeddings* cls) {
  const ImageEncoding enc = model.image.encode(batch);
  std::vector<double> out;
  if (strategy == Strategy::V) {
    const Matrix logits = model.head.forward(enc.class_token).value();
    for (long i = 0; i < logits.rows(); ++i) {
      const auto p = similarity_softmax(SimilarityLogits<double>{logits(i, 0), logits(i, 1), 1.0});
      out.push_back(p.first);
    }
    return out;
  }
  const Matrix& x = enc.embedding.value();
  const double tau = model.temperature();
  for (long i = 0; i < x.rows(); ++i) {
    const double s_real = cosine_sim(x.row(i), cls->z_real);
    const double s_spoof = cosine_sim(x.row(i), cls->z_spoof);
    out.push_back(similarity_softmax(SimilarityLogits<double>{s_real, s_spoof, tau}).first);
  }
  return out;
}

}  // namespace

ScoreSet infer_scores(FlipModel& model, Strategy strategy, const std::vector<Sample>& samples,
                      const ImageSource& images, const PromptSet& prompts, long batch_size) {
  if (batch_size < 1) throw ConfigError("inference batch size must be at least 1");
  std::optional<ClassEmbeddings> cls;
  if (strategy != Strategy::V) cls = embed_prompt_set(prompts, model.text);

  struct Chunk {
    std::vector<ScoreEntry> entries;
    long missing = 0;
  };
  auto run_chunk = [&](std::size_t begin, std::size_t end) {
    ag::NoGradGuard guard;
    Chunk c;
    std::vector<FaceImage> faces;
    std::vector<const Sample*> kept;
    for (std::size_t i = begin; i < end; ++i) {
      try {
        faces.push_back(normalize(images.load(samples[i])));
        kept.push_back(&samples[i]);
      } catch (const IoError&) {
        ++c.missing;
      }
    }
    if (faces.empty()) return c;
    const auto p = p_real_rows(model, strategy, faces, cls ? &*cls : nullptr);
    for (std::size_t k = 0; k < kept.size(); ++k) c.entries.push_back({kept[k]->key(), p[k], kept[k]->label});
    return c;
  };

  const std::size_t step = static_cast<std::size_t>(batch_size);
  const std::size_t workers = std::max(1u, std::thread::hardware_concurrency());
  std::vector<std::future<Chunk>> pending;
  ScoreSet out;
  auto drain = [&] {
    for (auto& f : pending) {
      Chunk c = f.get();
      out.entries.insert(out.entries.end(), c.entries.begin(), c.entries.end());
      out.missing += c.missing;
    }
    pending.clear();
  };
  for (std::size_t b = 0; b < samples.size(); b += step) {
    pending.push_back(std::async(std::launch::async, run_chunk, b, std::min(samples.size(), b + step)));
    if (pending.size() >= workers) drain();
  }
  drain();
  out.validate();
  return out;
}

double score_image(FlipModel& model, Strategy strategy, const FaceImage& img, const PromptSet& prompts) {
  ag::NoGradGuard guard;
  std::optional<ClassEmbeddings> cls;
  if (strategy != Strategy::V) cls = embed_prompt_set(prompts, model.text);
  return p_real_rows(model, strategy, {img}, cls ? &*cls : nullptr).front();
}

// ---------------------------------------------------------------------------
// Metrics

namespace {

void require_both_classes(const ScoreSet& s, const char* what) {
  if (s.count(Label::Real) == 0 || s.count(Label::Spoof) == 0) {
    throw DomainError(std::string(what) + ": score set must contain both real and spoof samples");
  }
}

}  // namespace

std::vector<RocPoint> roc_curve(const ScoreSet& s) {
  require_both_classes(s, "roc_curve");
  std::vector<const ScoreEntry*> order;
  for (const auto& e : s.entries) order.push_back(&e);
  std::sort(order.begin(), order.end(), [](const ScoreEntry* a, const ScoreEntry* b) { return a->score > b->score; });
  const double n_real = static_cast<double>(s.count(Label::Real));
  const double n_spoof = static_cast<double>(s.count(Label::Spoof));

  std::vector<RocPoint> roc{{std::numeric_limits<double>::infinity(), 0.0, 0.0}};
  long tp = 0, fp = 0;
  for (std::size_t i = 0; i < order.size();) {
    const double v = order[i]->score;
    for (; i < order.size() && order[i]->score == v; ++i) (order[i]->label == Label::Real ? tp : fp)++;
    const double t = i < order.size() ? 0.5 * (v + order[i]->score) : -std::numeric_limits<double>::infinity();
    roc.push_back({t, fp / n_spoof, tp / n_real});
  }
  return roc;
}

HterResult compute_hter(const ScoreSet& s, ThresholdPolicy policy, double fixed_threshold) {
  require_both_classes(s, "compute_hter");
  HterResult r;
  r.threshold = policy == ThresholdPolicy::Eer ? eer_threshold(s) : fixed_threshold;
  for (const auto& e : s.entries) {
    const bool accepted = e.score >= r.threshold;
    if (e.label == Label::Spoof && accepted) ++r.false_accepts;
    if (e.label == Label::Real && !accepted) ++r.false_rejects;
  }
  r.far = static_cast<double>(r.false_accepts) / static_cast<double>(s.count(Label::Spoof));
  r.frr = static_cast<double>(r.false_rejects) / static_cast<double>(s.count(Label::Real));
  r.hter = 0.5 * (r.far + r.frr);
  return r;
}

double eer_threshold(const ScoreSet& s) {
  const auto roc = roc_curve(s);
  const RocPoint* best = nullptr;
  double best_gap = 0, best_hter = 0;
  for (const auto& p : roc) {
    const double frr = 1.0 - p.tpr;
    const double gap = std::abs(p.fpr - frr);
    const double hter = 0.5 * (p.fpr + frr);
    if (!best || gap < best_gap || (gap == best_gap && hter < best_hter)) {
      best = &p;
      best_gap = gap;
      best_hter = hter;
    }
  }
  return best->threshold;
}

double compute_auc(const ScoreSet& s) {
  require_both_classes(s, "compute_auc");
  std::vector<const ScoreEntry*> order;
  for (const auto& e : s.entries) order.push_back(&e);
  std::sort(order.begin(), order.end(), [](const ScoreEntry* a, const ScoreEntry* b) { return a->score < b->score; });
  // Sum of midranks of the real samples (Mann-Whitney U).
  double rank_sum = 0.0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j < order.size() && order[j]->score == order[i]->score) ++j;
    const double midrank = 0.5 * static_cast<double>(i + 1 + j);
    for (std::size_t k = i; k < j; ++k) {
      if (order[k]->label == Label::Real) rank_sum += midrank;
    }
    i = j;
  }
  const double n_real = static_cast<double>(s.count(Label::Real));
  const double n_spoof = static_cast<double>(s.count(Label::Spoof));
  return (rank_sum - n_real * (n_real + 1) / 2) / (n_real * n_spoof);
}

TprResult compute_tpr_at_fpr(const ScoreSet& s, double fpr_target) {
  if (!(fpr_target > 0 && fpr_target <= 1)) throw DomainError("compute_tpr_at_fpr: target must lie in (0, 1]");
  TprResult r;
  for (const auto& p : roc_curve(s)) {
    if (p.fpr <= fpr_target && p.tpr > r.tpr) {
      r.tpr = p.tpr;
      r.threshold = p.threshold;
    }
  }
  r.quantization_limited = static_cast<double>(s.count(Label::Spoof)) < 1.0 / fpr_target;
  return r;
}

// ---------------------------------------------------------------------------
// Reports

void MetricReport::validate() const {
  if (!(hter >= 0 && hter <= 1)) throw DomainError("metric report: HTER outside [0, 1]");
  if (!(auc >= 0 && auc <= 1)) throw DomainError("metric report: AUC outside [0, 1]");
  if (!(tpr_at_fpr >= 0 && tpr_at_fpr <= 1)) throw DomainError("metric report: TPR outside [0, 1]");
}

namespace {

nlohmann::json finite_or_string(double v) {
  if (std::isfinite(v)) return v;
  return v > 0 ? "inf" : "-inf";
}

double number_or_inf(const nlohmann::json& j) {
  if (j.is_string()) return j.get<std::string>() == "inf" ? std::numeric_limits<double>::infinity()
                                                          : -std::numeric_limits<double>::infinity();
  return j.get<double>();
}

}  // namespace

nlohmann::json MetricReport::to_json() const {
  return {{"protocol", protocol},
          {"strategy", strategy},
          {"seed", seed},
          {"hter", hter},
          {"auc", auc},
          {"tpr_at_fpr", tpr_at_fpr},
          {"fpr_target", fpr_target},
          {"threshold", finite_or_string(threshold)},
          {"threshold_policy", threshold_policy},
          {"tpr_quantization_limited", tpr_quantization_limited},
          {"samples", samples},
          {"missing", missing},
          {"config_hash", config_hash},
          {"code_version", code_version}};
}

MetricReport MetricReport::from_json(const nlohmann::json& j) {
  MetricReport r;
  try {
    r.protocol = j.at("protocol");
    r.strategy = j.at("strategy");
    r.seed = j.at("seed");
    r.hter = j.at("hter");
    r.auc = j.at("auc");
    r.tpr_at_fpr = j.at("tpr_at_fpr");
    r.fpr_target = j.at("fpr_target");
    r.threshold = number_or_inf(j.at("threshold"));
    r.threshold_policy = j.at("threshold_policy");
    r.tpr_quantization_limited = j.at("tpr_quantization_limited");
    r.samples = j.at("samples");
    r.missing = j.at("missing");
    r.config_hash = j.at("config_hash");
    r.code_version = j.at("code_version");
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("malformed metric report: ") + e.what());
  }
  return r;
}

MetricReport evaluate_scores(const ScoreSet& s, ThresholdPolicy policy, double fixed_threshold, double fpr_target) {
  MetricReport r;
  const HterResult h = compute_hter(s, policy, fixed_threshold);
  const TprResult t = compute_tpr_at_fpr(s, fpr_target);
  r.hter = h.hter;
  r.threshold = h.threshold;
  r.threshold_policy = policy == ThresholdPolicy::Eer ? "eer" : "fixed";
  r.auc = compute_auc(s);
  r.tpr_at_fpr = t.tpr;
  r.fpr_target = fpr_target;
  r.tpr_quantization_limited = t.quantization_limited;
  r.samples = static_cast<long>(s.entries.size());
  r.missing = s.missing;
  r.validate();
  return r;
}

nlohmann::json AggregateReport::to_json() const {
  auto ms = [](const MeanStd& m) { return nlohmann::json{{"mean", m.mean}, {"std", m.std}}; };
  return {{"protocol", protocol}, {"strategy", strategy}, {"runs", runs},
          {"hter", ms(hter)},     {"auc", ms(auc)},       {"tpr_at_fpr", ms(tpr_at_fpr)}};
}

namespace {

MeanStd mean_std(const std::vector<double>& v) {
  // shifted by the first value so identical inputs give exactly zero spread
  MeanStd m;
  double shift = 0;
  for (double x : v) shift += x - v.front();
  m.mean = v.front() + shift / static_cast<double>(v.size());
  double ss = 0;
  for (double x : v) ss += (x - m.mean) * (x - m.mean);
  m.std = std::sqrt(ss / static_cast<double>(v.size() - 1));
  return m;
}

}  // namespace

AggregateReport aggregate_seeds(const std::vector<MetricReport>& reports) {
  if (reports.size() < 2) throw DomainError("aggregate_seeds: need at least 2 reports");
  AggregateReport a;
  a.protocol = reports.front().protocol;
  a.strategy = reports.front().strategy;
  std::vector<double> hter, auc, tpr;
  for (const auto& r : reports) {
    if (r.protocol != a.protocol) {
      throw ConfigError("aggregate_seeds: mixed protocols '" + a.protocol + "' and '" + r.protocol + "'");
    }
    hter.push_back(r.hter);
    auc.push_back(r.auc);
    tpr.push_back(r.tpr_at_fpr);
  }
  a.runs = static_cast<long>(reports.size());
  a.hter = mean_std(hter);
  a.auc = mean_std(auc);
  a.tpr_at_fpr = mean_std(tpr);
  return a;
}

// ---------------------------------------------------------------------------
// Significance

namespace {

/// Continued fraction for the incomplete beta (modified Lentz).
double beta_continued_fraction(double a, double b, double x) {
  constexpr double tiny = 1e-300;
  constexpr double eps = 1e-16;
  const double qab = a + b, qap = a + 1, qam = a - 1;
  double c = 1.0;
  double d = 1.0 - qab * x / qap;
  if (std::abs(d) < tiny) d = tiny;
  d = 1.0 / d;
  double h = d;
  for (int m = 1; m <= 10000; ++m) {
    const double m2 = 2.0 * m;
    double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < tiny) d = tiny;
    c = 1.0 + aa / c;
    if (std::abs(c) < tiny) c = tiny;
    d = 1.0 / d;
    h *= d * c;
    aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < tiny) d = tiny;
    c = 1.0 + aa / c;
    if (std::abs(c) < tiny) c = tiny;
    d = 1.0 / d;
    const double del = d * c;
    h *= del;
    if (std::abs(del - 1.0) < eps) return h;
  }
  throw DomainError("incomplete_beta: continued fraction did not converge");
}

}  // namespace

double incomplete_beta(double a, double b, double x) {
  if (!(a > 0 && b > 0)) throw DomainError("incomplete_beta: shape parameters must be positive");
  if (!(x >= 0 && x <= 1)) throw DomainError("incomplete_beta: x outside [0, 1]");
  if (x == 0 || x == 1) return x;
  const double front =
      std::exp(std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) + a * std::log(x) + b * std::log1p(-x));
  if (x < (a + 1) / (a + b + 2)) return front * beta_continued_fraction(a, b, x) / a;
  return 1.0 - front * beta_continued_fraction(b, a, 1.0 - x) / b;
}

double student_t_cdf(double t, double df) {
  if (!(df > 0)) throw DomainError("student_t_cdf: degrees of freedom must be positive");
  if (std::isinf(t)) return t > 0 ? 1.0 : 0.0;
  const double tail = 0.5 * incomplete_beta(0.5 * df, 0.5, df / (df + t * t));
  return t >= 0 ? 1.0 - tail : tail;
}

TTestResult paired_ttest(const std::vector<double>& a, const std::vector<double>& b, double alpha) {
  if (a.size() != b.size()) throw DomainError("paired_ttest: samples differ in length");
  if (a.size() < 2) throw DomainError("paired_ttest: need at least 2 pairs");
  std::vector<double> d(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) d[i] = a[i] - b[i];
  const MeanStd m = mean_std(d);
  double scale = 0.0;
  for (double x : d) scale = std::max(scale, std::abs(x));
  // rounding in a - b leaves ULP-level spread when the differences are meant to be equal
  if (!(m.std > 1e-12 * scale)) throw DomainError("paired_ttest: paired differences have zero variance");
  TTestResult r;
  r.df = static_cast<long>(d.size()) - 1;
  r.t = m.mean / (m.std / std::sqrt(static_cast<double>(d.size())));
  r.p = student_t_cdf(r.t, static_cast<double>(r.df));
  r.reject = r.p < alpha;
  return r;
}

// ---------------------------------------------------------------------------
// Output

std::string render_summary_table(const std::vector<SummaryRow>& rows, double fpr_target) {
  if (rows.empty()) return "";
  std::vector<std::string> scenarios;
  for (const auto& a : rows.front().scenarios) scenarios.push_back(a.protocol);
  const bool with_avg = scenarios.size() > 1;
  auto cell = [](const MeanStd& m) {
    std::ostringstream s;
    s << std::fixed << std::setprecision(2) << 100 * m.mean << " (" << 100 * m.std << ")";
    return s.str();
  };
  std::ostringstream tpr_name;
  tpr_name << "TPR@FPR=" << 100 * fpr_target << "%";

  std::vector<std::vector<std::string>> grid;
  std::vector<std::string> head1{"Method"}, head2{""};
  for (const auto& sc : scenarios) {
    head1.insert(head1.end(), {sc, "", ""});
    head2.insert(head2.end(), {"HTER", "AUC", tpr_name.str()});
  }
  if (with_avg) {
    head1.insert(head1.end(), {"Avg.", "", ""});
    head2.insert(head2.end(), {"HTER", "AUC", tpr_name.str()});
  }
  grid.push_back(head1);
  grid.push_back(head2);
  for (const auto& row : rows) {
    if (row.scenarios.size() != scenarios.size()) throw ConfigError("summary table: rows cover different scenarios");
    std::vector<std::string> line{row.method};
    double sum[3] = {0, 0, 0};
    for (std::size_t i = 0; i < row.scenarios.size(); ++i) {
      const auto& a = row.scenarios[i];
      if (a.protocol != scenarios[i]) throw ConfigError("summary table: scenario order differs between rows");
      line.insert(line.end(), {cell(a.hter), cell(a.auc), cell(a.tpr_at_fpr)});
      sum[0] += a.hter.mean;
      sum[1] += a.auc.mean;
      sum[2] += a.tpr_at_fpr.mean;
    }
    if (with_avg) {
      for (double v : sum) {
        std::ostringstream s;
        s << std::fixed << std::setprecision(2) << 100 * v / static_cast<double>(scenarios.size());
        line.push_back(s.str());
      }
    }
    grid.push_back(line);
  }

  // UTF-8 aware column widths (scenario labels contain an arrow).
  auto width = [](const std::string& s) {
    long w = 0;
    for (unsigned char c : s) w += (c & 0xC0) != 0x80;
    return w;
  };
  std::vector<long> widths(grid.front().size(), 0);
  for (const auto& line : grid) {
    for (std::size_t c = 0; c < line.size(); ++c) widths[c] = std::max(widths[c], width(line[c]));
  }
  std::ostringstream out;
  for (std::size_t r = 0; r < grid.size(); ++r) {
    for (std::size_t c = 0; c < grid[r].size(); ++c) {
      out << grid[r][c] << std::string(static_cast<std::size_t>(widths[c] - width(grid[r][c])), ' ');
      out << (c + 1 < grid[r].size() ? " | " : "\n");
    }
    if (r == 1) {
      for (std::size_t c = 0; c < widths.size(); ++c) {
        out << std::string(static_cast<std::size_t>(widths[c]), '-') << (c + 1 < widths.size() ? "-+-" : "\n");
      }
    }
  }
  return out.str();
}

void write_roc_csv(const std::filesystem::path& path, const std::vector<RocPoint>& roc) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write ROC curve " + path.string());
  out << "threshold,fpr,tpr\n" << std::setprecision(17);
  for (const auto& p : roc) out << p.threshold << "," << p.fpr << "," << p.tpr << "\n";
}

}  // namespace flip
