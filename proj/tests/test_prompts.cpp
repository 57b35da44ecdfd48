#include <doctest.h>

#include "flip/encoders.hpp"
#include "flip/errors.hpp"
#include "flip/prompts.hpp"

#include <boost/math/distributions/chi_squared.hpp>

#include <filesystem>
#include <fstream>
#include <map>

using namespace flip;
namespace fs = std::filesystem;

namespace {

fs::path tmp(const std::string& name) {
  fs::create_directories(FLIP_TEST_TMP);
  return fs::path(FLIP_TEST_TMP) / name;
}

const FlipModel& toy_model() {
  static const FlipModel m(ModelConfig::toy(), 21);
  return m;
}

}  // namespace

TEST_SUITE("prompts") {

TEST_CASE("default catalog is the six real and six spoof descriptions") {
  const PromptSet ps = PromptSet::defaults();
  REQUIRE(ps.real.size() == 6);
  REQUIRE(ps.spoof.size() == 6);
  CHECK(ps.real[0] == "This is an example of a real face");
  CHECK(ps.real[1] == "This is a bonafide face");
  CHECK(ps.real[2] == "This is a real face");
  CHECK(ps.real[3] == "This is how a real face looks like");
  CHECK(ps.real[4] == "A photo of a real face");
  CHECK(ps.real[5] == "This is not a spoof face");
  CHECK(ps.spoof[0] == "This is an example of a spoof face");
  CHECK(ps.spoof[1] == "This is an example of an attack face");
  CHECK(ps.spoof[2] == "This is not a real face");
  CHECK(ps.spoof[3] == "This is how a spoof face looks like");
  CHECK(ps.spoof[4] == "A photo of a spoof face");
  CHECK(ps.spoof[5] == "A printout shown to be a spoof face");
}

TEST_CASE("catalog files round trip and are parsed strictly") {
  const PromptSet ps{{"real one", "real two"}, {"fake"}};
  ps.save(tmp("prompts.json"));
  const PromptSet back = PromptSet::load(tmp("prompts.json"));
  CHECK(back.real == ps.real);
  CHECK(back.spoof == ps.spoof);

  std::ofstream(tmp("bad_key.json")) << R"({"real": ["a"], "spoof": ["b"], "bogus": []})";
  CHECK_THROWS_AS(PromptSet::load(tmp("bad_key.json")), ConfigError);
  std::ofstream(tmp("empty.json")) << R"({"real": [], "spoof": ["b"]})";
  CHECK_THROWS_AS(PromptSet::load(tmp("empty.json")), ConfigError);
  std::ofstream(tmp("blank.json")) << R"({"real": [""], "spoof": ["b"]})";
  CHECK_THROWS_AS(PromptSet::load(tmp("blank.json")), ConfigError);
  CHECK_THROWS_AS(PromptSet::load(tmp("does_not_exist.json")), IoError);
}

TEST_CASE("ensemble is the arithmetic mean of per-prompt embeddings") {
  const PromptSet ps = PromptSet::defaults();
  const ClassEmbeddings ce = embed_prompt_set(ps, toy_model().text);
  REQUIRE(ce.per_prompt.rows() == 12);
  CHECK(ce.real_count == 6);
  for (long j = 0; j < ce.per_prompt.cols(); ++j) {
    double real = 0, spoof = 0;
    for (long i = 0; i < 6; ++i) {
      real += ce.per_prompt(i, j);
      spoof += ce.per_prompt(6 + i, j);
    }
    CHECK(ce.z_real(j) == doctest::Approx(real / 6).epsilon(1e-12));
    CHECK(ce.z_spoof(j) == doctest::Approx(spoof / 6).epsilon(1e-12));
  }
  // Row i is the standalone encoding of prompt i.
  ag::NoGradGuard g;
  const Matrix single = toy_model().text.encode({ps.spoof[3]}).value();
  CHECK((ce.prompt(Label::Spoof, 3) - single.row(0)).cwiseAbs().maxCoeff() < 1e-12);
  CHECK(ce.per_prompt.row(0) != ce.per_prompt.row(1));
}

TEST_CASE("ensemble of identical prompts equals the single embedding") {
  const PromptSet same{{"a real face", "a real face", "a real face"}, {"a spoof face"}};
  const ClassEmbeddings ce = embed_prompt_set(same, toy_model().text);
  CHECK((ce.z_real - ce.per_prompt.row(0)).cwiseAbs().maxCoeff() < 1e-12);
  CHECK((ce.z_spoof - ce.per_prompt.row(3)).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("ensemble is invariant to prompt order and consistent when a prompt is dropped") {
  PromptSet ps = PromptSet::defaults();
  const ClassEmbeddings base = embed_prompt_set(ps, toy_model().text);
  std::reverse(ps.real.begin(), ps.real.end());
  std::rotate(ps.spoof.begin(), ps.spoof.begin() + 2, ps.spoof.end());
  const ClassEmbeddings perm = embed_prompt_set(ps, toy_model().text);
  CHECK((base.z_real - perm.z_real).cwiseAbs().maxCoeff() < 1e-12);
  CHECK((base.z_spoof - perm.z_spoof).cwiseAbs().maxCoeff() < 1e-12);

  PromptSet fewer = PromptSet::defaults();
  fewer.real.erase(fewer.real.begin() + 2);
  const ClassEmbeddings dropped = embed_prompt_set(fewer, toy_model().text);
  RowVector expect = RowVector::Zero(base.z_real.size());
  for (long i : {0, 1, 3, 4, 5}) expect += base.per_prompt.row(i);
  CHECK((dropped.z_real - expect / 5).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("prompt views are distinct and in class") {
  const PromptSet ps = PromptSet::defaults();
  Rng rng(1);
  for (int i = 0; i < 1000; ++i) {
    const Label l = i % 2 ? Label::Real : Label::Spoof;
    const auto [a, b] = sample_prompt_views(ps, l, rng);
    CHECK(a != b);
    CHECK(std::find(ps.of(l).begin(), ps.of(l).end(), a) != ps.of(l).end());
    CHECK(std::find(ps.of(l).begin(), ps.of(l).end(), b) != ps.of(l).end());
  }
}

TEST_CASE("prompt view pairs are uniform over unordered pairs") {
  const PromptSet ps = PromptSet::defaults();
  Rng rng(12345);
  const int draws = 10000;
  std::map<std::pair<long, long>, int> counts;
  for (int i = 0; i < draws; ++i) {
    auto [a, b] = sample_prompt_view_indices(ps, Label::Real, rng);
    counts[{std::min(a, b), std::max(a, b)}]++;
  }
  REQUIRE(counts.size() == 15);
  const double p = 1.0 / 15, expected = draws * p;
  const double sigma = std::sqrt(draws * p * (1 - p));
  double chi2 = 0;
  for (const auto& [pair, c] : counts) {
    CHECK(std::abs(c - expected) <= 3 * sigma);
    chi2 += (c - expected) * (c - expected) / expected;
  }
  const boost::math::chi_squared dist(14);
  CHECK(chi2 < boost::math::quantile(dist, 0.999));
}

TEST_CASE("two-prompt class always yields both, in either order") {
  const PromptSet ps{{"x", "y"}, {"s", "t"}};
  Rng rng(3);
  int swapped = 0;
  for (int i = 0; i < 200; ++i) {
    const auto [a, b] = sample_prompt_views(ps, Label::Spoof, rng);
    CHECK(((a == "s" && b == "t") || (a == "t" && b == "s")));
    swapped += a == "t";
  }
  CHECK(swapped > 0);
  CHECK(swapped < 200);
}

TEST_CASE("view sampling is deterministic per seed and needs two prompts") {
  const PromptSet ps = PromptSet::defaults();
  Rng a(77), b(77);
  for (int i = 0; i < 50; ++i) CHECK(sample_prompt_views(ps, Label::Real, a) == sample_prompt_views(ps, Label::Real, b));
  const PromptSet single{{"only"}, {"s1", "s2"}};
  CHECK_THROWS_AS(sample_prompt_views(single, Label::Real, a), ConfigError);
}

TEST_CASE("label names") {
  CHECK(parse_label("real") == Label::Real);
  CHECK(parse_label("1") == Label::Spoof);
  CHECK(std::string(to_string(Label::Spoof)) == "spoof");
  CHECK_THROWS_AS(parse_label("fake"), ConfigError);
}

}  // TEST_SUITE
