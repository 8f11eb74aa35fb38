#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "selfshot/tensor.hpp"

namespace selfshot {

// 8-bit image, HWC layout, c in {1,3}.
struct Image8 {
  std::int64_t h = 0, w = 0, c = 0;
  std::vector<std::uint8_t> px;

  Image8() = default;
  Image8(std::int64_t h, std::int64_t w, std::int64_t c)
      : h(h), w(w), c(c), px(static_cast<std::size_t>(h * w * c), 0) {}
  std::uint8_t& at(std::int64_t y, std::int64_t x, std::int64_t ch) {
    return px[static_cast<std::size_t>((y * w + x) * c + ch)];
  }
  std::uint8_t at(std::int64_t y, std::int64_t x, std::int64_t ch) const {
    return px[static_cast<std::size_t>((y * w + x) * c + ch)];
  }
};

// RGB frame sequence, [T][H][W][3].
struct VideoClip {
  std::int64_t t = 0, h = 0, w = 0;
  std::vector<std::uint8_t> rgb;

  VideoClip() = default;
  VideoClip(std::int64_t t, std::int64_t h, std::int64_t w)
      : t(t), h(h), w(w), rgb(static_cast<std::size_t>(t * h * w * 3), 0) {}
  std::uint8_t& at(std::int64_t f, std::int64_t y, std::int64_t x, std::int64_t ch) {
    return rgb[static_cast<std::size_t>(((f * h + y) * w + x) * 3 + ch)];
  }
  std::uint8_t at(std::int64_t f, std::int64_t y, std::int64_t x, std::int64_t ch) const {
    return rgb[static_cast<std::size_t>(((f * h + y) * w + x) * 3 + ch)];
  }
  Image8 frame(std::int64_t f) const;
};

// Binary mask sequence, [T][H][W], values 0/1.
struct MaskSeq {
  std::int64_t t = 0, h = 0, w = 0;
  std::vector<std::uint8_t> m;

  MaskSeq() = default;
  MaskSeq(std::int64_t t, std::int64_t h, std::int64_t w)
      : t(t), h(h), w(w), m(static_cast<std::size_t>(t * h * w), 0) {}
  std::uint8_t& at(std::int64_t f, std::int64_t y, std::int64_t x) {
    return m[static_cast<std::size_t>((f * h + y) * w + x)];
  }
  std::uint8_t at(std::int64_t f, std::int64_t y, std::int64_t x) const {
    return m[static_cast<std::size_t>((f * h + y) * w + x)];
  }
  std::int64_t count() const;
};

void write_png(const std::string& path, const Image8& img);
Image8 read_png(const std::string& path);

// Clip pixels to model input: [T,3,H,W] in [-1, 1].
Tensor clip_to_tensor(const VideoClip& clip);

Image8 resize_bilinear(const Image8& src, std::int64_t oh, std::int64_t ow);
VideoClip resize_clip(const VideoClip& src, std::int64_t oh, std::int64_t ow);

// Area-threshold downsample of a binary mask (covered fraction >= 0.5 -> 1).
// Source dims must be integer multiples of the target dims.
MaskSeq downsample_mask(const MaskSeq& src, std::int64_t oh, std::int64_t ow);
// Nearest-neighbor upsample by integer factors (target divisible by source).
MaskSeq upsample_mask(const MaskSeq& src, std::int64_t oh, std::int64_t ow);

}  // namespace selfshot
