#include "cgp/preprocess.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "cgp/errors.hpp"

namespace cgp {

namespace {
constexpr const char* kModule = "encoders";

int read_header_int(std::istream& in) {
  int value = 0;
  for (;;) {
    in >> std::ws;
    if (in.peek() == '#') {
      std::string skip;
      std::getline(in, skip);
      continue;
    }
    break;
  }
  if (!(in >> value)) throw ValidationError(kModule, "malformed image header");
  return value;
}
}  // namespace

Image read_pnm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(kModule, "cannot read image '" + path.string() + "'");
  std::string magic(2, '\0');
  in.read(magic.data(), 2);
  if (magic != "P6" && magic != "P5") throw ValidationError(kModule, "'" + path.string() + "' is not a binary PPM/PGM");
  Image img;
  img.channels = magic == "P6" ? 3 : 1;
  img.width = read_header_int(in);
  img.height = read_header_int(in);
  const int maxval = read_header_int(in);
  if (img.width <= 0 || img.height <= 0 || maxval <= 0 || maxval > 255)
    throw ValidationError(kModule, "unsupported image geometry in '" + path.string() + "'");
  in.get();
  std::vector<unsigned char> raw(static_cast<std::size_t>(img.width) * img.height * img.channels);
  in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (in.gcount() != static_cast<std::streamsize>(raw.size()))
    throw ValidationError(kModule, "truncated image data in '" + path.string() + "'");
  img.pixels.resize(raw.size());
  std::transform(raw.begin(), raw.end(), img.pixels.begin(),
                 [maxval](unsigned char v) { return static_cast<float>(v) / static_cast<float>(maxval); });
  return img;
}

Image resize_bilinear(const Image& img, int height, int width) {
  if (height < 1 || width < 1 || img.height < 1 || img.width < 1)
    throw ContractViolation(kModule, "resize needs positive sizes");
  Image out{height, width, img.channels, std::vector<float>(static_cast<std::size_t>(height) * width * img.channels)};
  const double sy = static_cast<double>(img.height) / height;
  const double sx = static_cast<double>(img.width) / width;
  for (int y = 0; y < height; ++y) {
    const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, img.height - 1.0);
    const int y0 = static_cast<int>(fy);
    const int y1 = std::min(y0 + 1, img.height - 1);
    const double wy = fy - y0;
    for (int x = 0; x < width; ++x) {
      const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, img.width - 1.0);
      const int x0 = static_cast<int>(fx);
      const int x1 = std::min(x0 + 1, img.width - 1);
      const double wx = fx - x0;
      for (int c = 0; c < img.channels; ++c) {
        const double top = (1 - wx) * img.at(y0, x0, c) + wx * img.at(y0, x1, c);
        const double bottom = (1 - wx) * img.at(y1, x0, c) + wx * img.at(y1, x1, c);
        out.at(y, x, c) = static_cast<float>((1 - wy) * top + wy * bottom);
      }
    }
  }
  return out;
}

Image resize_shorter_side(const Image& img, int size) {
  if (img.height <= img.width) {
    const int w = static_cast<int>(std::lround(static_cast<double>(img.width) * size / img.height));
    return resize_bilinear(img, size, std::max(w, size));
  }
  const int h = static_cast<int>(std::lround(static_cast<double>(img.height) * size / img.width));
  return resize_bilinear(img, std::max(h, size), size);
}

Image center_crop(const Image& img, int height, int width) {
  if (height > img.height || width > img.width) throw ContractViolation(kModule, "crop larger than image");
  const int top = (img.height - height) / 2;
  const int left = (img.width - width) / 2;
  Image out{height, width, img.channels, std::vector<float>(static_cast<std::size_t>(height) * width * img.channels)};
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x)
      for (int c = 0; c < img.channels; ++c) out.at(y, x, c) = img.at(y + top, x + left, c);
  return out;
}

Image flip_horizontal(const Image& img) {
  Image out = img;
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x)
      for (int c = 0; c < img.channels; ++c) out.at(y, x, c) = img.at(y, img.width - 1 - x, c);
  return out;
}

Image translate_horizontal(const Image& img, int shift) {
  Image out = img;
  std::fill(out.pixels.begin(), out.pixels.end(), 0.0f);
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x) {
      const int src = x - shift;
      if (src < 0 || src >= img.width) continue;
      for (int c = 0; c < img.channels; ++c) out.at(y, x, c) = img.at(y, src, c);
    }
  return out;
}

Image preprocess(const Image& img, ImageMode mode, Rng* rng, const AugmentOptions& options) {
  Image out = center_crop(resize_shorter_side(img, kInputResolution), kInputResolution, kInputResolution);
  if (mode == ImageMode::Eval) return out;
  if (!rng) throw ContractViolation(kModule, "train-mode preprocessing needs a random stream");
  if (rng->bernoulli(options.flip_probability)) out = flip_horizontal(out);
  const int max_shift = static_cast<int>(options.max_translate_fraction * kInputResolution);
  if (max_shift > 0) {
    const int shift = static_cast<int>(rng->uniform_below(static_cast<std::uint64_t>(2 * max_shift + 1))) - max_shift;
    out = translate_horizontal(out, shift);
  }
  return out;
}

}  // namespace cgp
