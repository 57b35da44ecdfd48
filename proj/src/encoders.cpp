#include "flip/encoders.hpp"

#include "flip/errors.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>

namespace flip {
namespace {

Matrix normal(long rows, long cols, double std, Rng& rng) {
  std::normal_distribution<double> dist(0.0, std);
  Matrix m(rows, cols);
  for (long i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
  return m;
}

// Fan-in uniform initialization: U(-sqrt(6 / fan_in), sqrt(6 / fan_in)).
Matrix kaiming_uniform(long out, long in, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(in));
  std::uniform_real_distribution<double> dist(-bound, bound);
  Matrix m(out, in);
  for (long i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
  return m;
}

Parameter vec_param(const std::string& name, long n, double fill, bool trainable = true) {
  return Parameter(name, {n}, Matrix::Constant(1, n, fill), trainable);
}

Parameter linear_weight(const std::string& name, long out, long in, double std, Rng& rng) {
  return Parameter(name, {out, in}, normal(out, in, std, rng));
}

}  // namespace

ModelConfig ModelConfig::vit_b16() { return ModelConfig{}; }

ModelConfig ModelConfig::toy() {
  ModelConfig c;
  c.vision = VisionConfig{32, 8, 32, 2, 4};
  c.text = TextConfig{BpeTokenizer::kContextLength, 514, 32, 2, 4};
  c.embed_dim = 16;
  c.head_hidden = 32;
  c.projector_dims = {16, 64, 16};
  return c;
}

long ModelConfig::patch_count() const {
  const long side = vision.image_size / vision.patch_size;
  return side * side;
}

nlohmann::json ModelConfig::to_json() const {
  return {{"vision",
           {{"image_size", vision.image_size},
            {"patch_size", vision.patch_size},
            {"width", vision.width},
            {"layers", vision.layers},
            {"heads", vision.heads}}},
          {"text",
           {{"context", text.context},
            {"vocab_size", text.vocab_size},
            {"width", text.width},
            {"layers", text.layers},
            {"heads", text.heads}}},
          {"embed_dim", embed_dim},
          {"head_hidden", head_hidden},
          {"projector_dims", projector_dims},
          {"logit_scale_init", logit_scale_init}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
  ModelConfig c;
  const auto& v = j.at("vision");
  c.vision = {v.at("image_size"), v.at("patch_size"), v.at("width"), v.at("layers"), v.at("heads")};
  const auto& t = j.at("text");
  c.text = {t.at("context"), t.at("vocab_size"), t.at("width"), t.at("layers"), t.at("heads")};
  c.embed_dim = j.at("embed_dim");
  c.head_hidden = j.at("head_hidden");
  c.projector_dims = j.at("projector_dims").get<std::array<long, 3>>();
  c.logit_scale_init = j.at("logit_scale_init");
  return c;
}

// ---------------------------------------------------------------------------

TransformerBlock::TransformerBlock(const std::string& prefix, long width, long heads, Rng& rng)
    : width_(width), heads_(heads) {
  if (width % heads != 0) throw ConfigError("transformer width must be divisible by the head count");
  const double std = 0.02;
  ln1_w_ = vec_param(prefix + ".layer_norm1.weight", width, 1.0);
  ln1_b_ = vec_param(prefix + ".layer_norm1.bias", width, 0.0);
  q_w_ = linear_weight(prefix + ".self_attn.q_proj.weight", width, width, std, rng);
  q_b_ = vec_param(prefix + ".self_attn.q_proj.bias", width, 0.0);
  k_w_ = linear_weight(prefix + ".self_attn.k_proj.weight", width, width, std, rng);
  k_b_ = vec_param(prefix + ".self_attn.k_proj.bias", width, 0.0);
  v_w_ = linear_weight(prefix + ".self_attn.v_proj.weight", width, width, std, rng);
  v_b_ = vec_param(prefix + ".self_attn.v_proj.bias", width, 0.0);
  o_w_ = linear_weight(prefix + ".self_attn.out_proj.weight", width, width, std, rng);
  o_b_ = vec_param(prefix + ".self_attn.out_proj.bias", width, 0.0);
  ln2_w_ = vec_param(prefix + ".layer_norm2.weight", width, 1.0);
  ln2_b_ = vec_param(prefix + ".layer_norm2.bias", width, 0.0);
  fc1_w_ = linear_weight(prefix + ".mlp.fc1.weight", 4 * width, width, std, rng);
  fc1_b_ = vec_param(prefix + ".mlp.fc1.bias", 4 * width, 0.0);
  fc2_w_ = linear_weight(prefix + ".mlp.fc2.weight", width, 4 * width, std, rng);
  fc2_b_ = vec_param(prefix + ".mlp.fc2.bias", width, 0.0);
}

ag::Var TransformerBlock::forward(const ag::Var& x, bool causal) const {
  using namespace ag;
  const long head_dim = width_ / heads_;
  const double scale = 1.0 / std::sqrt(static_cast<double>(head_dim));

  Var h = layer_norm(x, leaf(ln1_w_), leaf(ln1_b_));
  const Var qb = leaf(q_b_), kb = leaf(k_b_), vb = leaf(v_b_), ob = leaf(o_b_);
  Var q = ag::scale(linear(h, leaf(q_w_), &qb), scale);
  Var k = linear(h, leaf(k_w_), &kb);
  Var v = linear(h, leaf(v_w_), &vb);
  std::vector<Var> heads;
  heads.reserve(static_cast<std::size_t>(heads_));
  for (long i = 0; i < heads_; ++i) {
    Var qi = slice_cols(q, i * head_dim, head_dim);
    Var ki = slice_cols(k, i * head_dim, head_dim);
    Var vi = slice_cols(v, i * head_dim, head_dim);
    heads.push_back(matmul(softmax_rows(matmul_nt(qi, ki), causal), vi));
  }
  Var attn = linear(concat_cols(heads), leaf(o_w_), &ob);
  Var r = add(x, attn);

  const Var b1 = leaf(fc1_b_), b2 = leaf(fc2_b_);
  Var m = layer_norm(r, leaf(ln2_w_), leaf(ln2_b_));
  m = linear(quick_gelu(linear(m, leaf(fc1_w_), &b1)), leaf(fc2_w_), &b2);
  return add(r, m);
}

void TransformerBlock::collect(std::vector<Parameter*>& out) {
  for (Parameter* p : {&q_w_, &q_b_, &k_w_, &k_b_, &v_w_, &v_b_, &o_w_, &o_b_, &ln1_w_, &ln1_b_,
                       &fc1_w_, &fc1_b_, &fc2_w_, &fc2_b_, &ln2_w_, &ln2_b_}) {
    out.push_back(p);
  }
}

// ---------------------------------------------------------------------------

ImageEncoder::ImageEncoder(const VisionConfig& cfg, long embed_dim, Rng& rng) : cfg_(cfg) {
  if (cfg.image_size % cfg.patch_size != 0) {
    throw ConfigError("image size must be divisible by the patch size");
  }
  const long w = cfg.width;
  const long p = cfg.patch_size;
  const double s = 1.0 / std::sqrt(static_cast<double>(w));
  class_emb_ = Parameter("vision_model.embeddings.class_embedding", {w}, normal(1, w, s, rng));
  patch_w_ = Parameter("vision_model.embeddings.patch_embedding.weight", {w, 3, p, p},
                       normal(w, 3 * p * p, 0.02, rng));
  pos_ = Parameter("vision_model.embeddings.position_embedding.weight", {patch_count() + 1, w},
                   normal(patch_count() + 1, w, s, rng));
  pre_ln_w_ = vec_param("vision_model.pre_layrnorm.weight", w, 1.0);
  pre_ln_b_ = vec_param("vision_model.pre_layrnorm.bias", w, 0.0);
  for (long i = 0; i < cfg.layers; ++i) {
    blocks_.emplace_back("vision_model.encoder.layers." + std::to_string(i), w, cfg.heads, rng);
  }
  post_ln_w_ = vec_param("vision_model.post_layernorm.weight", w, 1.0);
  post_ln_b_ = vec_param("vision_model.post_layernorm.bias", w, 0.0);
  proj_ = linear_weight("visual_projection.weight", embed_dim, w, s, rng);
}

long ImageEncoder::patch_count() const {
  const long side = cfg_.image_size / cfg_.patch_size;
  return side * side;
}

Matrix ImageEncoder::patchify(const FaceImage& img) const {
  if (img.height() != cfg_.image_size || img.width() != cfg_.image_size) {
    std::ostringstream msg;
    msg << "image is " << img.height() << "x" << img.width() << " but the patch grid expects "
        << cfg_.image_size << "x" << cfg_.image_size;
    throw ShapeError(msg.str());
  }
  const long p = cfg_.patch_size;
  const long side = cfg_.image_size / p;
  Matrix patches(side * side, 3 * p * p);
  for (long py = 0; py < side; ++py) {
    for (long px = 0; px < side; ++px) {
      const long row = py * side + px;
      long col = 0;
      for (int c = 0; c < 3; ++c) {
        for (long y = 0; y < p; ++y) {
          for (long x = 0; x < p; ++x) patches(row, col++) = img.channel[c](py * p + y, px * p + x);
        }
      }
    }
  }
  return patches;
}

ag::Var ImageEncoder::encode_one(const FaceImage& img) const {
  using namespace ag;
  if (!img.finite()) throw DomainError("image contains non-finite pixels");
  Var patches = matmul_nt(constant(patchify(img)), leaf(patch_w_));
  Var tokens = add(concat_rows({leaf(class_emb_), patches}), leaf(pos_));
  tokens = layer_norm(tokens, leaf(pre_ln_w_), leaf(pre_ln_b_));
  for (const auto& b : blocks_) tokens = b.forward(tokens, false);
  return layer_norm(slice_rows(tokens, 0, 1), leaf(post_ln_w_), leaf(post_ln_b_));
}

ImageEncoding ImageEncoder::encode(const std::vector<FaceImage>& batch) const {
  if (batch.empty()) throw ShapeError("encode_image: empty batch");
  std::vector<ag::Var> rows;
  rows.reserve(batch.size());
  for (const auto& img : batch) rows.push_back(encode_one(img));
  ImageEncoding out;
  out.class_token = rows.size() == 1 ? rows.front() : ag::concat_rows(rows);
  out.embedding = ag::matmul_nt(out.class_token, ag::leaf(proj_));
  return out;
}

std::vector<Parameter*> ImageEncoder::parameters() {
  std::vector<Parameter*> out{&class_emb_, &patch_w_, &pos_, &pre_ln_w_, &pre_ln_b_};
  for (auto& b : blocks_) b.collect(out);
  out.insert(out.end(), {&post_ln_w_, &post_ln_b_, &proj_});
  return out;
}

// ---------------------------------------------------------------------------

TextEncoder::TextEncoder(const TextConfig& cfg, long embed_dim, BpeTokenizer tokenizer, Rng& rng)
    : cfg_(cfg), tokenizer_(std::move(tokenizer)) {
  if (tokenizer_.vocab_size() != cfg.vocab_size) {
    throw ConfigError("tokenizer vocabulary (" + std::to_string(tokenizer_.vocab_size()) +
                      ") does not match text encoder vocabulary (" + std::to_string(cfg.vocab_size) + ")");
  }
  const long w = cfg.width;
  token_emb_ = Parameter("text_model.embeddings.token_embedding.weight", {cfg.vocab_size, w},
                         normal(cfg.vocab_size, w, 0.02, rng));
  pos_ = Parameter("text_model.embeddings.position_embedding.weight", {cfg.context, w},
                   normal(cfg.context, w, 0.01, rng));
  for (long i = 0; i < cfg.layers; ++i) {
    blocks_.emplace_back("text_model.encoder.layers." + std::to_string(i), w, cfg.heads, rng);
  }
  final_ln_w_ = vec_param("text_model.final_layer_norm.weight", w, 1.0);
  final_ln_b_ = vec_param("text_model.final_layer_norm.bias", w, 0.0);
  proj_ = linear_weight("text_projection.weight", embed_dim, w, 1.0 / std::sqrt(static_cast<double>(w)), rng);
}

ag::Var TextEncoder::encode(const std::vector<std::string>& prompts) const {
  using namespace ag;
  if (prompts.empty()) throw ConfigError("encode_text: no prompts");
  std::vector<Var> rows;
  rows.reserve(prompts.size());
  for (const auto& prompt : prompts) {
    if (prompt.empty()) throw ConfigError("encode_text: empty prompt");
    const auto tok = tokenizer_.tokenize(prompt, cfg_.context);
    if (tok.truncated) ++*truncations_;
    const long len = static_cast<long>(tok.ids.size());
    // Causal masking makes positions after the end token irrelevant, so the
    // sequence stops there instead of padding to the full context.
    Var x = add(gather_rows(leaf(token_emb_), tok.ids), slice_rows(leaf(pos_), 0, len));
    for (const auto& b : blocks_) x = b.forward(x, true);
    x = layer_norm(slice_rows(x, len - 1, 1), leaf(final_ln_w_), leaf(final_ln_b_));
    rows.push_back(x);
  }
  Var pooled = rows.size() == 1 ? rows.front() : concat_rows(rows);
  return matmul_nt(pooled, leaf(proj_));
}

std::vector<Parameter*> TextEncoder::parameters() {
  std::vector<Parameter*> out{&token_emb_, &pos_};
  for (auto& b : blocks_) b.collect(out);
  out.insert(out.end(), {&final_ln_w_, &final_ln_b_, &proj_});
  return out;
}

// ---------------------------------------------------------------------------

MlpHead::MlpHead(long in, long hidden, Rng& rng) {
  fc1_w_ = Parameter("head.fc1.weight", {hidden, in}, kaiming_uniform(hidden, in, rng));
  fc1_b_ = vec_param("head.fc1.bias", hidden, 0.0);
  fc2_w_ = Parameter("head.fc2.weight", {2, hidden}, kaiming_uniform(2, hidden, rng));
  fc2_b_ = vec_param("head.fc2.bias", 2, 0.0);
}

ag::Var MlpHead::forward(const ag::Var& class_tokens) const {
  if (!class_tokens.value().allFinite()) throw DomainError("mlp_forward: non-finite class token");
  const ag::Var b1 = ag::leaf(fc1_b_), b2 = ag::leaf(fc2_b_);
  ag::Var h = ag::relu(ag::linear(class_tokens, ag::leaf(fc1_w_), &b1));
  return ag::linear(h, ag::leaf(fc2_w_), &b2);
}

std::vector<Parameter*> MlpHead::parameters() { return {&fc1_w_, &fc1_b_, &fc2_w_, &fc2_b_}; }

// ---------------------------------------------------------------------------

ProjectorH::ProjectorH(long in, const std::array<long, 3>& dims, Rng& rng) : out_dim_(dims[2]) {
  long fan_in = in;
  for (int i = 0; i < 3; ++i) {
    const std::string p = "projector.linear" + std::to_string(i);
    w_[i] = Parameter(p + ".weight", {dims[i], fan_in}, kaiming_uniform(dims[i], fan_in, rng));
    b_[i] = vec_param(p + ".bias", dims[i], 0.0);
    fan_in = dims[i];
  }
  for (int i = 0; i < 2; ++i) {
    const std::string p = "projector.bn" + std::to_string(i);
    bn_w_[i] = vec_param(p + ".weight", dims[i], 1.0);
    bn_b_[i] = vec_param(p + ".bias", dims[i], 0.0);
    bn_mean_[i] = vec_param(p + ".running_mean", dims[i], 0.0, false);
    bn_var_[i] = vec_param(p + ".running_var", dims[i], 1.0, false);
  }
}

namespace {
constexpr double kBnEps = 1e-5;
constexpr double kBnMomentum = 0.1;
}  // namespace

ag::Var ProjectorH::train_forward(const ag::Var& x) {
  if (x.rows() < 2) {
    throw DomainError("projector: batch normalization in training mode needs at least 2 samples");
  }
  ag::Var h = x;
  for (int i = 0; i < 3; ++i) {
    const ag::Var b = ag::leaf(b_[i]);
    h = ag::linear(h, ag::leaf(w_[i]), &b);
    if (i < 2) {
      h = ag::batch_norm_train(h, ag::leaf(bn_w_[i]), ag::leaf(bn_b_[i]), kBnEps, &bn_mean_[i].value,
                               &bn_var_[i].value, kBnMomentum);
      h = ag::relu(h);
    }
  }
  return h;
}

ag::Var ProjectorH::eval_forward(const ag::Var& x) const {
  ag::Var h = x;
  for (int i = 0; i < 3; ++i) {
    const ag::Var b = ag::leaf(b_[i]);
    h = ag::linear(h, ag::leaf(w_[i]), &b);
    if (i < 2) {
      const Matrix inv_std = (bn_var_[i].value.array() + kBnEps).rsqrt().matrix();
      h = ag::add_row(h, ag::constant(-bn_mean_[i].value));
      h = ag::mul_row(h, ag::constant(inv_std));
      h = ag::add_row(ag::mul_row(h, ag::leaf(bn_w_[i])), ag::leaf(bn_b_[i]));
      h = ag::relu(h);
    }
  }
  return h;
}

std::vector<Parameter*> ProjectorH::parameters() {
  std::vector<Parameter*> out;
  for (int i = 0; i < 3; ++i) out.insert(out.end(), {&w_[i], &b_[i]});
  for (int i = 0; i < 2; ++i) out.insert(out.end(), {&bn_w_[i], &bn_b_[i], &bn_mean_[i], &bn_var_[i]});
  return out;
}

// ---------------------------------------------------------------------------

FlipModel::FlipModel(const ModelConfig& cfg, std::uint64_t seed, BpeTokenizer tokenizer)
    : image([&] {
        Rng r = derive_rng(seed, {1});
        return ImageEncoder(cfg.vision, cfg.embed_dim, r);
      }()),
      text([&] {
        Rng r = derive_rng(seed, {2});
        return TextEncoder(cfg.text, cfg.embed_dim, std::move(tokenizer), r);
      }()),
      logit_scale("logit_scale", {}, Matrix::Constant(1, 1, cfg.logit_scale_init)),
      head([&] {
        Rng r = derive_rng(seed, {3});
        return MlpHead(cfg.vision.width, cfg.head_hidden, r);
      }()),
      projector([&] {
        Rng r = derive_rng(seed, {4});
        return ProjectorH(cfg.embed_dim, cfg.projector_dims, r);
      }()),
      cfg_(cfg) {}

std::vector<Parameter*> FlipModel::group(ParamGroup g) {
  switch (g) {
    case ParamGroup::Image:
      return image.parameters();
    case ParamGroup::Text: {
      auto out = text.parameters();
      out.push_back(&logit_scale);
      return out;
    }
    case ParamGroup::Head:
      return head.parameters();
    case ParamGroup::Projector:
      return projector.parameters();
  }
  return {};
}

std::vector<Parameter*> FlipModel::all_parameters() {
  std::vector<Parameter*> out;
  for (auto g : {ParamGroup::Image, ParamGroup::Text, ParamGroup::Head, ParamGroup::Projector}) {
    auto part = group(g);
    out.insert(out.end(), part.begin(), part.end());
  }
  return out;
}

TensorArchive FlipModel::state() const {
  TensorArchive archive;
  for (const Parameter* p : const_cast<FlipModel*>(this)->all_parameters()) {
    archive.tensors.emplace(p->name, NamedTensor{p->shape, p->value});
  }
  return archive;
}

namespace {

void assign_checked(Parameter& p, const NamedTensor& t) {
  const auto [rows, cols] = matrix_extent(p.shape);
  if (t.shape != p.shape || t.value.rows() != rows || t.value.cols() != cols) {
    std::ostringstream msg;
    msg << "shape mismatch for tensor '" << p.name << "': expected [";
    for (std::size_t i = 0; i < p.shape.size(); ++i) msg << (i ? "," : "") << p.shape[i];
    msg << "], checkpoint has [";
    for (std::size_t i = 0; i < t.shape.size(); ++i) msg << (i ? "," : "") << t.shape[i];
    msg << "]";
    throw ShapeError(msg.str());
  }
  p.value = t.value;
}

std::string join(const std::vector<std::string>& names) {
  std::string out;
  for (const auto& n : names) out += (out.empty() ? "" : ", ") + n;
  return out;
}

void load_into(const std::vector<Parameter*>& params, const TensorArchive& archive, bool allow_ignorable) {
  std::set<std::string> expected;
  std::vector<std::string> missing;
  for (const Parameter* p : params) {
    expected.insert(p->name);
    if (!archive.tensors.count(p->name)) missing.push_back(p->name);
  }
  std::vector<std::string> extra;
  for (const auto& [name, t] : archive.tensors) {
    if (expected.count(name)) continue;
    if (allow_ignorable && is_ignorable_checkpoint_tensor(name)) continue;
    extra.push_back(name);
  }
  if (!missing.empty() || !extra.empty()) {
    std::string msg = "checkpoint does not match the model layout";
    if (!missing.empty()) msg += "; missing tensors: " + join(missing);
    if (!extra.empty()) msg += "; unexpected tensors: " + join(extra);
    throw IoError(msg);
  }
  for (Parameter* p : params) assign_checked(*p, archive.tensors.at(p->name));
}

}  // namespace

void FlipModel::load_state(const TensorArchive& archive) { load_into(all_parameters(), archive, false); }

bool is_ignorable_checkpoint_tensor(const std::string& name) {
  return name == "text_model.embeddings.position_ids" || name == "vision_model.embeddings.position_ids";
}

FlipModel load_pretrained(const std::filesystem::path& checkpoint, const ModelConfig& cfg,
                          BpeTokenizer tokenizer, std::uint64_t seed) {
  const TensorArchive archive = read_safetensors(checkpoint);
  FlipModel model(cfg, seed, std::move(tokenizer));
  auto params = model.group(ParamGroup::Image);
  auto text = model.group(ParamGroup::Text);
  params.insert(params.end(), text.begin(), text.end());
  try {
    load_into(params, archive, true);
  } catch (const IoError& e) {
    throw IoError(checkpoint.string() + ": " + e.what());
  }
  return model;
}

}  // namespace flip
