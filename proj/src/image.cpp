#include "flip/image.hpp"

#include "flip/errors.hpp"

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>

#include <algorithm>
#include <cmath>
#include <numbers>

namespace flip {

RgbImage::RgbImage(long height, long width, double fill) {
  for (auto& c : channel) c = Matrix::Constant(height, width, fill);
}

bool FaceImage::finite() const {
  return std::all_of(channel.begin(), channel.end(), [](const Matrix& m) { return m.allFinite(); });
}

FaceImage normalize(const RgbImage& img, const ChannelStats& stats) {
  FaceImage out;
  for (int c = 0; c < 3; ++c) {
    out.channel[c] = ((img.channel[c].array() - stats.mean[c]) / stats.std[c]).matrix();
  }
  return out;
}

RgbImage resize_bilinear(const RgbImage& img, long height, long width) {
  if (height <= 0 || width <= 0) throw ShapeError("resize_bilinear: empty target size");
  if (height == img.height() && width == img.width()) return img;
  RgbImage out(height, width);
  const double sy = static_cast<double>(img.height()) / static_cast<double>(height);
  const double sx = static_cast<double>(img.width()) / static_cast<double>(width);
  for (long y = 0; y < height; ++y) {
    const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, static_cast<double>(img.height() - 1));
    const long y0 = static_cast<long>(fy);
    const long y1 = std::min(y0 + 1, img.height() - 1);
    const double wy = fy - static_cast<double>(y0);
    for (long x = 0; x < width; ++x) {
      const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, static_cast<double>(img.width() - 1));
      const long x0 = static_cast<long>(fx);
      const long x1 = std::min(x0 + 1, img.width() - 1);
      const double wx = fx - static_cast<double>(x0);
      for (int c = 0; c < 3; ++c) {
        const Matrix& m = img.channel[c];
        out.channel[c](y, x) = (1 - wy) * ((1 - wx) * m(y0, x0) + wx * m(y0, x1)) +
                               wy * ((1 - wx) * m(y1, x0) + wx * m(y1, x1));
      }
    }
  }
  return out;
}

RgbImage crop(const RgbImage& img, long top, long left, long height, long width) {
  if (top < 0 || left < 0 || height <= 0 || width <= 0 || top + height > img.height() ||
      left + width > img.width()) {
    throw ShapeError("crop: window outside image");
  }
  RgbImage out;
  for (int c = 0; c < 3; ++c) out.channel[c] = img.channel[c].block(top, left, height, width);
  return out;
}

RgbImage load_image(const std::filesystem::path& path, long size) {
  cv::Mat m = cv::imread(path.string(), cv::IMREAD_COLOR);
  if (m.empty()) throw IoError("cannot decode image " + path.string());
  RgbImage img(m.rows, m.cols);
  for (int y = 0; y < m.rows; ++y) {
    const auto* row = m.ptr<cv::Vec3b>(y);
    for (int x = 0; x < m.cols; ++x) {
      // OpenCV stores BGR.
      for (int c = 0; c < 3; ++c) img.channel[c](y, x) = row[x][2 - c] / 255.0;
    }
  }
  return size > 0 ? resize_bilinear(img, size, size) : img;
}

void save_image(const std::filesystem::path& path, const RgbImage& img) {
  cv::Mat m(static_cast<int>(img.height()), static_cast<int>(img.width()), CV_8UC3);
  for (int y = 0; y < m.rows; ++y) {
    auto* row = m.ptr<cv::Vec3b>(y);
    for (int x = 0; x < m.cols; ++x) {
      for (int c = 0; c < 3; ++c) {
        const double v = std::clamp(img.channel[c](y, x), 0.0, 1.0);
        row[x][2 - c] = static_cast<unsigned char>(std::lround(v * 255.0));
      }
    }
  }
  if (!cv::imwrite(path.string(), m)) throw IoError("cannot write image " + path.string());
}

namespace {

Matrix luminance(const RgbImage& img) {
  return 0.299 * img.channel[0] + 0.587 * img.channel[1] + 0.114 * img.channel[2];
}

void clamp01(RgbImage& img) {
  for (auto& c : img.channel) c = c.cwiseMax(0.0).cwiseMin(1.0);
}

RgbImage random_resized_crop(const RgbImage& img, const AugmentConfig& cfg, Rng& rng) {
  const double area = static_cast<double>(img.height() * img.width());
  const double log_lo = std::log(3.0 / 4.0);
  const double log_hi = std::log(4.0 / 3.0);
  for (int attempt = 0; attempt < 10; ++attempt) {
    const double target = area * uniform(rng, cfg.crop_scale_min, cfg.crop_scale_max);
    const double aspect = std::exp(uniform(rng, log_lo, log_hi));
    const long w = std::lround(std::sqrt(target * aspect));
    const long h = std::lround(std::sqrt(target / aspect));
    if (w > 0 && h > 0 && w <= img.width() && h <= img.height()) {
      const long top = uniform_index(rng, img.height() - h + 1);
      const long left = uniform_index(rng, img.width() - w + 1);
      return resize_bilinear(crop(img, top, left, h, w), img.height(), img.width());
    }
  }
  return img;
}

void color_jitter(RgbImage& img, double s, Rng& rng) {
  const double brightness = uniform(rng, std::max(0.0, 1 - s), 1 + s);
  for (auto& c : img.channel) c *= brightness;
  clamp01(img);

  const double contrast = uniform(rng, std::max(0.0, 1 - s), 1 + s);
  const double mean_gray = luminance(img).mean();
  for (auto& c : img.channel) c = ((c.array() - mean_gray) * contrast + mean_gray).matrix();
  clamp01(img);

  const double saturation = uniform(rng, std::max(0.0, 1 - s), 1 + s);
  const Matrix gray = luminance(img);
  for (auto& c : img.channel) c = gray + saturation * (c - gray);
  clamp01(img);

  // Hue rotation in YIQ space.
  const double theta = uniform(rng, -s / 4.0, s / 4.0) * 2.0 * std::numbers::pi;
  const double cs = std::cos(theta);
  const double sn = std::sin(theta);
  const Matrix y = luminance(img);
  const Matrix i = 0.596 * img.channel[0] - 0.274 * img.channel[1] - 0.322 * img.channel[2];
  const Matrix q = 0.211 * img.channel[0] - 0.523 * img.channel[1] + 0.312 * img.channel[2];
  const Matrix i2 = cs * i - sn * q;
  const Matrix q2 = sn * i + cs * q;
  img.channel[0] = y + 0.956 * i2 + 0.621 * q2;
  img.channel[1] = y - 0.272 * i2 - 0.647 * q2;
  img.channel[2] = y - 1.106 * i2 + 1.703 * q2;
  clamp01(img);
}

}  // namespace

RgbImage augment(const RgbImage& img, const AugmentConfig& cfg, Rng& rng) {
  if (!cfg.enabled) return img;
  RgbImage out = random_resized_crop(img, cfg, rng);
  if (uniform01(rng) < cfg.flip_p) {
    for (auto& c : out.channel) c = c.rowwise().reverse().eval();
  }
  if (uniform01(rng) < cfg.jitter_p) color_jitter(out, cfg.jitter_strength, rng);
  if (uniform01(rng) < cfg.grayscale_p) {
    const Matrix gray = luminance(out);
    for (auto& c : out.channel) c = gray;
  }
  return out;
}

}  // namespace flip
