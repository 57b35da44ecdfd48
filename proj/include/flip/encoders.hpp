#pragma once

// Dual encoder (vision transformer + causal text transformer projected into a
// shared embedding space), the two-layer MLP classification head and the
// three-layer nonlinear projector used by the view-contrastive loss.
//
// Parameter names follow the published Hugging Face CLIP layout so that a
// pretrained ViT-B/16 checkpoint maps onto the model one-to-one.

#include "flip/autograd.hpp"
#include "flip/image.hpp"
#include "flip/random.hpp"
#include "flip/tensor_io.hpp"
#include "flip/tokenizer.hpp"

#include <json.hpp>

#include <array>
#include <atomic>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

namespace flip {

struct VisionConfig {
  long image_size = 224;
  long patch_size = 16;
  long width = 768;  // d_v
  long layers = 12;  // K
  long heads = 12;
};

struct TextConfig {
  long context = BpeTokenizer::kContextLength;
  long vocab_size = 49408;
  long width = 512;  // d_l
  long layers = 12;
  long heads = 8;
};

struct ModelConfig {
  VisionConfig vision;
  TextConfig text;
  long embed_dim = 512;  // d_vl
  long head_hidden = 512;
  std::array<long, 3> projector_dims{512, 4096, 256};
  double logit_scale_init = 2.659260036932778;  // ln(1 / 0.07)

  /// Published ViT-B/16 dual-encoder geometry.
  static ModelConfig vit_b16();
  /// Miniature randomly initialized geometry for desk-scale runs:
  /// K = 2, d_v = 32, d_vl = 16, patch 8, image 32x32, byte-level text.
  static ModelConfig toy();

  long patch_count() const;
  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);
};

class TransformerBlock {
 public:
  TransformerBlock(const std::string& prefix, long width, long heads, Rng& rng);

  ag::Var forward(const ag::Var& x, bool causal) const;
  void collect(std::vector<Parameter*>& out);

 private:
  long width_;
  long heads_;
  Parameter ln1_w_, ln1_b_;
  Parameter q_w_, q_b_, k_w_, k_b_, v_w_, v_b_, o_w_, o_b_;
  Parameter ln2_w_, ln2_b_;
  Parameter fc1_w_, fc1_b_, fc2_w_, fc2_b_;
};

/// Batch output of the image tower: one row per image.
struct ImageEncoding {
  ag::Var class_token;  // pooled class token c_K (n x d_v), input to the MLP head
  ag::Var embedding;    // x = ImageProj(c_K) (n x d_vl)
};

class ImageEncoder {
 public:
  ImageEncoder(const VisionConfig& cfg, long embed_dim, Rng& rng);

  long patch_count() const;
  /// Flattens an image into (patch_count x 3*p*p) rows in (channel, y, x) order.
  Matrix patchify(const FaceImage& img) const;
  ImageEncoding encode(const std::vector<FaceImage>& batch) const;

  std::vector<Parameter*> parameters();
  Parameter& positional_embedding() { return pos_; }

 private:
  ag::Var encode_one(const FaceImage& img) const;

  VisionConfig cfg_;
  Parameter class_emb_, patch_w_, pos_, pre_ln_w_, pre_ln_b_;
  std::vector<TransformerBlock> blocks_;
  Parameter post_ln_w_, post_ln_b_, proj_;
};

class TextEncoder {
 public:
  TextEncoder(const TextConfig& cfg, long embed_dim, BpeTokenizer tokenizer, Rng& rng);

  /// One row z = TextProj(w_K at the final token) per prompt. Prompts longer
  /// than the context are truncated and counted in truncation_warnings().
  ag::Var encode(const std::vector<std::string>& prompts) const;

  const BpeTokenizer& tokenizer() const { return tokenizer_; }
  long truncation_warnings() const { return truncations_->load(); }
  std::vector<Parameter*> parameters();
  Parameter& positional_embedding() { return pos_; }

 private:
  TextConfig cfg_;
  BpeTokenizer tokenizer_;
  Parameter token_emb_, pos_;
  std::vector<TransformerBlock> blocks_;
  Parameter final_ln_w_, final_ln_b_, proj_;
  std::shared_ptr<std::atomic<long>> truncations_ = std::make_shared<std::atomic<long>>(0);
};

/// Two fully connected layers (d_v -> hidden -> 2) with ReLU between.
class MlpHead {
 public:
  MlpHead(long in, long hidden, Rng& rng);
  ag::Var forward(const ag::Var& class_tokens) const;
  std::vector<Parameter*> parameters();

 private:
  Parameter fc1_w_, fc1_b_, fc2_w_, fc2_b_;
};

/// Linear-BN-ReLU, Linear-BN-ReLU, Linear. Batch statistics in training mode,
/// running statistics in evaluation mode.
class ProjectorH {
 public:
  ProjectorH(long in, const std::array<long, 3>& dims, Rng& rng);

  ag::Var train_forward(const ag::Var& x);
  ag::Var eval_forward(const ag::Var& x) const;
  long output_dim() const { return out_dim_; }
  std::vector<Parameter*> parameters();  // includes non-trainable running statistics

 private:
  long out_dim_;
  std::array<Parameter, 3> w_, b_;
  std::array<Parameter, 2> bn_w_, bn_b_, bn_mean_, bn_var_;
};

enum class ParamGroup { Image, Text, Head, Projector };

class FlipModel {
 public:
  FlipModel(const ModelConfig& cfg, std::uint64_t seed, BpeTokenizer tokenizer = BpeTokenizer());

  const ModelConfig& config() const { return cfg_; }

  ImageEncoder image;
  TextEncoder text;
  Parameter logit_scale;  // log(1/tau), part of the text group
  MlpHead head;
  ProjectorH projector;

  std::vector<Parameter*> group(ParamGroup g);
  std::vector<Parameter*> all_parameters();
  double temperature() const { return std::exp(-logit_scale.value(0, 0)); }

  /// Every tensor (parameters and buffers) under its canonical name.
  TensorArchive state() const;
  /// Loads a complete state; any missing, unexpected or misshapen tensor is an error.
  void load_state(const TensorArchive& archive);

 private:
  ModelConfig cfg_;
};

/// Maps a published dual-encoder checkpoint (safetensors, Hugging Face CLIP
/// naming) onto the encoders. The MLP head and projector keep their fresh
/// initialization. Missing or extra tensors are reported together.
FlipModel load_pretrained(const std::filesystem::path& checkpoint, const ModelConfig& cfg,
                          BpeTokenizer tokenizer, std::uint64_t seed);

/// Tensors present in published checkpoints that carry no learnable state.
bool is_ignorable_checkpoint_tensor(const std::string& name);

}  // namespace flip
