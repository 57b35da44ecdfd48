#include <doctest.h>

#include "flip/encoders.hpp"
#include "flip/errors.hpp"
#include "oracles.hpp"

#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <set>

using namespace flip;
namespace fs = std::filesystem;

namespace {

fs::path data(const std::string& name) { return fs::path(FLIP_TEST_DATA) / name; }

fs::path tmp(const std::string& name) {
  fs::create_directories(FLIP_TEST_TMP);
  return fs::path(FLIP_TEST_TMP) / name;
}

nlohmann::json reference() {
  std::ifstream in(data("toy_clip_reference.json"));
  return nlohmann::json::parse(in);
}

FaceImage face_from_json(const nlohmann::json& planes) {
  FaceImage f;
  for (int c = 0; c < 3; ++c) {
    const auto& rows = planes[c];
    f.channel[c].resize(static_cast<long>(rows.size()), static_cast<long>(rows[0].size()));
    for (std::size_t y = 0; y < rows.size(); ++y)
      for (std::size_t x = 0; x < rows[y].size(); ++x) f.channel[c](y, x) = rows[y][x].get<double>();
  }
  return f;
}

FaceImage random_face(Rng& rng, long size) {
  FaceImage f;
  std::normal_distribution<double> n(0.0, 1.0);
  for (auto& ch : f.channel) {
    ch.resize(size, size);
    for (long i = 0; i < ch.size(); ++i) ch.data()[i] = n(rng);
  }
  return f;
}

double max_abs_diff(const Matrix& m, const nlohmann::json& rows) {
  double worst = 0;
  for (long i = 0; i < m.rows(); ++i)
    for (long j = 0; j < m.cols(); ++j) worst = std::max(worst, std::abs(m(i, j) - rows[i][j].get<double>()));
  return worst;
}

}  // namespace

TEST_SUITE("encoders") {

TEST_CASE("toy geometry and parameter names follow the published layout") {
  FlipModel m(ModelConfig::toy(), 1);
  std::set<std::string> names;
  for (Parameter* p : m.all_parameters()) {
    CHECK(names.insert(p->name).second);
  }
  CHECK(names.count("vision_model.embeddings.patch_embedding.weight"));
  CHECK(names.count("vision_model.encoder.layers.1.self_attn.out_proj.bias"));
  CHECK(names.count("text_model.encoder.layers.0.mlp.fc1.weight"));
  CHECK(names.count("text_projection.weight"));
  CHECK(names.count("logit_scale"));
  CHECK(names.count("projector.bn1.running_var"));
  CHECK(m.image.positional_embedding().shape == std::vector<long>{17, 32});
  CHECK(m.logit_scale.value(0, 0) == doctest::Approx(std::log(1.0 / 0.07)));
  CHECK(m.temperature() == doctest::Approx(0.07));

  const ModelConfig b16 = ModelConfig::vit_b16();
  CHECK(b16.patch_count() == 196);
  CHECK(b16.vision.width == 768);
  CHECK(b16.embed_dim == 512);
  CHECK(b16.text.vocab_size == 49408);
  CHECK(ModelConfig::from_json(b16.to_json()).to_json() == b16.to_json());
}

TEST_CASE("patchify walks patches row-major and pixels channel, y, x") {
  FlipModel m(ModelConfig::toy(), 1);
  FaceImage f;
  for (int c = 0; c < 3; ++c) {
    f.channel[c].resize(32, 32);
    for (long y = 0; y < 32; ++y)
      for (long x = 0; x < 32; ++x) f.channel[c](y, x) = c * 10000 + y * 100 + x;
  }
  const Matrix p = m.image.patchify(f);
  REQUIRE(p.rows() == 16);
  REQUIRE(p.cols() == 192);
  CHECK(p(0, 0) == 0);
  CHECK(p(0, 1) == 1);
  CHECK(p(0, 8) == 100);
  CHECK(p(0, 64) == 10000);
  CHECK(p(1, 0) == 8);           // second patch starts at x = 8
  CHECK(p(4, 0) == 800);         // fifth patch starts at y = 8
  CHECK(p(15, 191) == 23131);    // channel 2, y = 31, x = 31
  f.channel[0].resize(16, 16);
  CHECK_THROWS_AS(m.image.patchify(f), ShapeError);
}

TEST_CASE("forward pass matches the reference dual encoder") {
  const nlohmann::json ref = reference();
  FlipModel m = load_pretrained(data("toy_clip.safetensors"), ModelConfig::toy(), BpeTokenizer(), 3);

  std::vector<FaceImage> batch;
  for (const auto& planes : ref["pixels"]) batch.push_back(face_from_json(planes));
  ag::NoGradGuard guard;
  const ImageEncoding enc = m.image.encode(batch);
  CHECK(max_abs_diff(enc.class_token.value(), ref["class_token"]) < 1e-9);
  CHECK(max_abs_diff(enc.embedding.value(), ref["image_embeds"]) < 1e-9);

  const auto prompts = ref["prompts"].get<std::vector<std::string>>();
  for (std::size_t i = 0; i < prompts.size(); ++i) {
    CHECK(m.text.tokenizer().tokenize(prompts[i]).ids == ref["token_ids"][i].get<std::vector<long>>());
  }
  const Matrix z = m.text.encode(prompts).value();
  CHECK(max_abs_diff(z, ref["text_embeds"]) < 1e-9);
  CHECK(m.logit_scale.value(0, 0) == doctest::Approx(ref["logit_scale"].get<double>()));
}

TEST_CASE("batched encoding equals per-item encoding") {
  FlipModel m(ModelConfig::toy(), 5);
  Rng rng(11);
  std::vector<FaceImage> batch{random_face(rng, 32), random_face(rng, 32), random_face(rng, 32)};
  ag::NoGradGuard guard;
  const Matrix all = m.image.encode(batch).embedding.value();
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const Matrix one = m.image.encode({batch[i]}).embedding.value();
    CHECK((one - all.row(static_cast<long>(i))).cwiseAbs().maxCoeff() < 1e-12);
  }
  const Matrix z = m.text.encode({"a real face", "a spoof face"}).value();
  CHECK((m.text.encode({"a spoof face"}).value() - z.row(1)).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("initialization is a function of the seed") {
  FlipModel a(ModelConfig::toy(), 9), b(ModelConfig::toy(), 9), c(ModelConfig::toy(), 10);
  CHECK(a.image.positional_embedding().value == b.image.positional_embedding().value);
  CHECK(a.image.positional_embedding().value != c.image.positional_embedding().value);
}

TEST_CASE("encoder gradients match finite differences") {
  FlipModel m(ModelConfig::toy(), 2);
  Rng rng(4);
  std::vector<FaceImage> batch{random_face(rng, 32), random_face(rng, 32)};
  auto loss = [&] {
    const ImageEncoding e = m.image.encode(batch);
    const ag::Var z = m.text.encode({"real", "spoof"});
    return ag::sum(ag::square(ag::matmul_nt(e.embedding, z)));
  };
  std::vector<Parameter*> params = m.group(ParamGroup::Image);
  const auto text = m.group(ParamGroup::Text);
  params.insert(params.end(), text.begin(), text.end());
  for (Parameter* p : params) p->zero_grad();
  loss().backward();
  Rng pick(8);
  for (Parameter* p : params) {
    if (p->name == "logit_scale") continue;  // not used by this objective
    for (int k = 0; k < 2; ++k) {
      const long r = uniform_index(pick, p->value.rows()), c = uniform_index(pick, p->value.cols());
      const double numeric = oracle::central_difference(*p, r, c, [&] {
        ag::NoGradGuard g;
        return loss().scalar();
      }, 1e-5);
      const double analytic = p->grad.size() ? p->grad(r, c) : 0.0;
      if (p->name.find("k_proj.bias") != std::string::npos) {
        // Softmax is invariant to a shift shared by all keys.
        CHECK(std::abs(analytic) < 1e-12);
        CHECK(std::abs(numeric) < 1e-7);
        continue;
      }
      CHECK_MESSAGE(oracle::relative_error(analytic, numeric, 1e-6) < 1e-4, p->name);
    }
  }
}

TEST_CASE("model state round trips and rejects mismatched tensors") {
  FlipModel a(ModelConfig::toy(), 1), b(ModelConfig::toy(), 2);
  b.load_state(a.state());
  Rng rng(3);
  const FaceImage f = random_face(rng, 32);
  ag::NoGradGuard guard;
  CHECK(a.image.encode({f}).embedding.value() == b.image.encode({f}).embedding.value());

  TensorArchive missing = a.state();
  missing.tensors.erase("head.fc2.bias");
  CHECK_THROWS_WITH_AS(b.load_state(missing), doctest::Contains("head.fc2.bias"), IoError);

  TensorArchive extra = a.state();
  extra.tensors["stray.weight"] = NamedTensor{{1}, Matrix::Zero(1, 1)};
  CHECK_THROWS_WITH_AS(b.load_state(extra), doctest::Contains("stray.weight"), IoError);

  TensorArchive bad = a.state();
  bad.tensors["logit_scale"] = NamedTensor{{2}, Matrix::Zero(1, 2)};
  CHECK_THROWS_AS(b.load_state(bad), ShapeError);
}

TEST_CASE("pretrained loading reports missing and unexpected tensors") {
  TensorArchive ref = read_safetensors(data("toy_clip.safetensors"));
  ref.tensors.erase("text_projection.weight");
  ref.tensors["vision_model.extra.weight"] = NamedTensor{{1}, Matrix::Zero(1, 1)};
  ref.tensors["text_model.embeddings.position_ids"] = NamedTensor{{1, 77}, Matrix::Zero(1, 77)};
  const fs::path p = tmp("broken_clip.safetensors");
  write_safetensors(p, ref);
  try {
    load_pretrained(p, ModelConfig::toy(), BpeTokenizer(), 0);
    FAIL("expected an error");
  } catch (const IoError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("text_projection.weight") != std::string::npos);
    CHECK(msg.find("vision_model.extra.weight") != std::string::npos);
    CHECK(msg.find("position_ids") == std::string::npos);
  }
}

TEST_CASE("tokenizer and text vocabulary must agree") {
  ModelConfig cfg = ModelConfig::toy();
  cfg.text.vocab_size = 600;
  CHECK_THROWS_AS(FlipModel(cfg, 0), ConfigError);
}

TEST_CASE("head and projector shapes and guards") {
  FlipModel m(ModelConfig::toy(), 1);
  Matrix tokens = Matrix::Ones(3, 32);
  CHECK(m.head.forward(ag::constant(tokens)).cols() == 2);
  tokens(1, 4) = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS(m.head.forward(ag::constant(tokens)), DomainError);

  Rng rng(2);
  Matrix x(4, 16);
  for (long i = 0; i < x.size(); ++i) x.data()[i] = uniform(rng, -1, 1);
  CHECK(m.projector.train_forward(ag::constant(x)).cols() == 16);
  CHECK_THROWS_AS(m.projector.train_forward(ag::constant(x.topRows(1))), DomainError);
  CHECK(m.projector.eval_forward(ag::constant(x.topRows(1))).rows() == 1);
}

TEST_CASE("projector evaluation mode uses running statistics") {
  FlipModel m(ModelConfig::toy(), 1);
  Rng rng(6);
  Matrix x(8, 16);
  for (long i = 0; i < x.size(); ++i) x.data()[i] = uniform(rng, -1, 1);
  // With fresh buffers (mean 0, var 1) evaluation is a plain affine stack, so
  // rows are processed independently.
  const Matrix full = m.projector.eval_forward(ag::constant(x)).value();
  const Matrix first = m.projector.eval_forward(ag::constant(x.topRows(1))).value();
  CHECK((full.topRows(1) - first).cwiseAbs().maxCoeff() < 1e-12);
  const Matrix before = m.state().tensors.at("projector.bn0.running_mean").value;
  m.projector.train_forward(ag::constant(x));
  CHECK(m.state().tensors.at("projector.bn0.running_mean").value != before);
}

}  // TEST_SUITE
