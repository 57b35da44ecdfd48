#pragma once

// Independent reference implementations used to check the library: plain
// loops over std::vector, no shared code paths with the code under test.

#include "flip/autograd.hpp"
#include "flip/data.hpp"
#include "flip/evaluation.hpp"
#include "flip/random.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <string>
#include <vector>

namespace oracle {

using Rows = std::vector<std::vector<double>>;

inline Rows to_rows(const flip::Matrix& m) {
  Rows r(static_cast<std::size_t>(m.rows()), std::vector<double>(static_cast<std::size_t>(m.cols())));
  for (long i = 0; i < m.rows(); ++i)
    for (long j = 0; j < m.cols(); ++j) r[i][j] = m(i, j);
  return r;
}

inline double dot(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double cosine(const std::vector<double>& a, const std::vector<double>& b) {
  return dot(a, b) / std::sqrt(dot(a, a) * dot(b, b));
}

/// NT-Xent by exhaustive enumeration: views [h1; h2], anchor k, positive its
/// counterpart, candidates every other view.
inline double nt_xent(const Rows& h1, const Rows& h2, double temperature) {
  Rows z = h1;
  z.insert(z.end(), h2.begin(), h2.end());
  const std::size_t m = z.size(), n = h1.size();
  double total = 0;
  for (std::size_t k = 0; k < m; ++k) {
    const std::size_t pos = k < n ? k + n : k - n;
    double denom = 0;
    for (std::size_t j = 0; j < m; ++j) {
      if (j != k) denom += std::exp(cosine(z[k], z[j]) / temperature);
    }
    total += -std::log(std::exp(cosine(z[k], z[pos]) / temperature) / denom);
  }
  return total / static_cast<double>(m);
}

struct Counts {
  long false_accepts = 0;
  long false_rejects = 0;
};

/// Confusion counts at a threshold (accept as real when score >= t).
inline Counts confusion(const flip::ScoreSet& s, double t) {
  Counts c;
  for (const auto& e : s.entries) {
    if (e.label == flip::Label::Spoof && e.score >= t) ++c.false_accepts;
    if (e.label == flip::Label::Real && e.score < t) ++c.false_rejects;
  }
  return c;
}

/// Pairwise Mann-Whitney statistic, ties counted one half.
inline double auc(const flip::ScoreSet& s) {
  double wins = 0;
  long pairs = 0;
  for (const auto& r : s.entries) {
    if (r.label != flip::Label::Real) continue;
    for (const auto& f : s.entries) {
      if (f.label != flip::Label::Spoof) continue;
      ++pairs;
      if (r.score > f.score) wins += 1;
      else if (r.score == f.score) wins += 0.5;
    }
  }
  return wins / static_cast<double>(pairs);
}

/// Sweep over "accept score >= v" for every observed score v plus the
/// accept-nothing threshold.
inline double tpr_at_fpr(const flip::ScoreSet& s, double target) {
  std::vector<double> thresholds{std::numeric_limits<double>::infinity()};
  for (const auto& e : s.entries) thresholds.push_back(e.score);
  double n_real = 0, n_spoof = 0;
  for (const auto& e : s.entries) (e.label == flip::Label::Real ? n_real : n_spoof) += 1;
  double best = 0;
  for (double t : thresholds) {
    double tp = 0, fp = 0;
    for (const auto& e : s.entries) {
      if (e.score >= t) (e.label == flip::Label::Real ? tp : fp) += 1;
    }
    if (fp / n_spoof <= target) best = std::max(best, tp / n_real);
  }
  return best;
}

/// Random score set of size n with both classes; a fraction of scores is
/// drawn from a small grid so ties occur.
inline flip::ScoreSet random_scores(flip::Rng& rng, long n, double tie_fraction = 0.3) {
  flip::ScoreSet s;
  for (long i = 0; i < n; ++i) {
    flip::ScoreEntry e;
    e.sample_id = "s" + std::to_string(i);
    e.label = i == 0 ? flip::Label::Real : (i == 1 ? flip::Label::Spoof
                                                   : (flip::uniform01(rng) < 0.5 ? flip::Label::Real : flip::Label::Spoof));
    const bool tie = flip::uniform01(rng) < tie_fraction;
    e.score = tie ? static_cast<double>(flip::uniform_index(rng, 5)) / 4.0 : flip::uniform01(rng);
    s.entries.push_back(e);
  }
  return s;
}

/// Central finite difference of f with respect to entry (r, c) of p.
inline double central_difference(flip::Parameter& p, long r, long c, const std::function<double()>& f,
                                 double step = 1e-4) {
  const double saved = p.value(r, c);
  p.value(r, c) = saved + step;
  const double up = f();
  p.value(r, c) = saved - step;
  const double down = f();
  p.value(r, c) = saved;
  return (up - down) / (2 * step);
}

/// |a - n| / max(|a|, |n|), with tiny gradients compared absolutely.
inline double relative_error(double analytic, double numeric, double floor = 1e-6) {
  const double scale = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / scale;
}

inline double mean(const std::vector<double>& v) {
  double s = 0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

inline double sample_std(const std::vector<double>& v) {
  const double m = mean(v);
  double ss = 0;
  for (double x : v) ss += (x - m) * (x - m);
  return std::sqrt(ss / static_cast<double>(v.size() - 1));
}

}  // namespace oracle

namespace fixture {

/// Two synthetic source domains plus a held-out pool drawn from the same
/// generators with a different seed.
struct SyntheticSplit {
  flip::ProtocolSplit split;
  flip::MemoryImageSource images;
};

inline SyntheticSplit two_domain(long per_class = 16, long heldout_per_class = 20, std::uint64_t seed = 7,
                                 long image_size = 32) {
  SyntheticSplit out;
  flip::SyntheticSpec train_spec;
  train_spec.per_class = per_class;
  train_spec.image_size = image_size;
  train_spec.seed = seed;
  flip::SyntheticData train = flip::make_synthetic(train_spec);

  flip::SyntheticSpec test_spec = train_spec;
  test_spec.per_class = heldout_per_class;
  test_spec.seed = seed + 1000;
  flip::SyntheticData test = flip::make_synthetic(test_spec);

  out.split.spec.label = "AB → held-out";
  for (auto& d : train.domains) {
    out.split.spec.sources.push_back({d.code, d.name});
    for (const auto& s : d.samples) out.images.add(s, train.images.load(s));
    out.split.sources.push_back(d);
  }
  out.split.target = flip::DomainDataset{"H", "heldout", {}};
  out.split.spec.target = {"H", "heldout"};
  for (const auto& d : test.domains) {
    for (auto s : d.samples) {
      const flip::RgbImage img = test.images.load(s);
      s.id = d.name + "_" + s.id;
      s.domain = "heldout";
      out.images.add(s, img);
      out.split.target.samples.push_back(s);
    }
  }
  out.split.seed = seed;
  return out;
}

}  // namespace fixture
