#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "cgp/encoders.hpp"
#include "cgp/rng.hpp"

namespace cgp {

/// Interleaved float image, values in [0, 1].
struct Image {
  int height = 0;
  int width = 0;
  int channels = 3;
  std::vector<float> pixels;

  float at(int y, int x, int c) const { return pixels[static_cast<std::size_t>((y * width + x) * channels + c)]; }
  float& at(int y, int x, int c) { return pixels[static_cast<std::size_t>((y * width + x) * channels + c)]; }
};

inline constexpr int kInputResolution = 224;

/// Binary PPM (P6) or PGM (P5) with maxval <= 255. Throws IoError when the
/// file cannot be read and ValidationError when it does not decode.
Image read_pnm(const std::filesystem::path& path);

Image resize_bilinear(const Image& img, int height, int width);
/// Scales the shorter side to `size` keeping the aspect ratio.
Image resize_shorter_side(const Image& img, int size);
Image center_crop(const Image& img, int height, int width);
Image flip_horizontal(const Image& img);
/// Shifts columns by `shift` pixels (positive = right), filling with zeros.
Image translate_horizontal(const Image& img, int shift);

struct AugmentOptions {
  double flip_probability = 0.5;
  double max_translate_fraction = 0.1;
};

/// Eval: resize + center crop to 224x224. Train additionally applies a random
/// horizontal flip and translation drawn from rng.
Image preprocess(const Image& img, ImageMode mode, Rng* rng = nullptr, const AugmentOptions& options = {});

}  // namespace cgp
