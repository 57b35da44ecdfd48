#pragma once

#include "flip/autograd.hpp"
#include "flip/random.hpp"

#include <array>
#include <filesystem>

namespace flip {

/// Planar RGB image with values in [0, 1]; channel[c](y, x).
struct RgbImage {
  std::array<Matrix, 3> channel;

  RgbImage() = default;
  RgbImage(long height, long width, double fill = 0.0);
  long height() const { return channel[0].rows(); }
  long width() const { return channel[0].cols(); }
};

/// Encoder input: RGB planes after per-channel mean/std normalization.
struct FaceImage {
  std::array<Matrix, 3> channel;

  long height() const { return channel[0].rows(); }
  long width() const { return channel[0].cols(); }
  bool finite() const;
};

struct ChannelStats {
  std::array<double, 3> mean;
  std::array<double, 3> std;
};

/// Preprocessing statistics published with the pretrained dual encoder.
constexpr ChannelStats kClipPixelStats{{0.48145466, 0.4578275, 0.40821073},
                                       {0.26862954, 0.26130258, 0.27577711}};

FaceImage normalize(const RgbImage& img, const ChannelStats& stats = kClipPixelStats);

RgbImage resize_bilinear(const RgbImage& img, long height, long width);
RgbImage crop(const RgbImage& img, long top, long left, long height, long width);

/// Decodes any format OpenCV understands and resizes to size x size
/// (size <= 0 keeps the stored resolution).
RgbImage load_image(const std::filesystem::path& path, long size);
void save_image(const std::filesystem::path& path, const RgbImage& img);

/// View-generation recipe for the contrastive branch.
struct AugmentConfig {
  bool enabled = true;
  double crop_scale_min = 0.5;
  double crop_scale_max = 1.0;
  double flip_p = 0.5;
  double jitter_p = 0.8;
  double jitter_strength = 0.4;  // brightness/contrast/saturation; hue uses a quarter of it
  double grayscale_p = 0.2;

  static AugmentConfig identity() {
    AugmentConfig c;
    c.enabled = false;
    return c;
  }
};

RgbImage augment(const RgbImage& img, const AugmentConfig& cfg, Rng& rng);

}  // namespace flip
