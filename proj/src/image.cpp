#include "selfshot/image.hpp"

#include <png.h>

#include <cmath>
#include <cstdio>
#include <memory>

#include "selfshot/common.hpp"

namespace selfshot {

Image8 VideoClip::frame(std::int64_t f) const {
  Image8 img(h, w, 3);
  const std::uint8_t* src = rgb.data() + f * h * w * 3;
  std::copy(src, src + h * w * 3, img.px.data());
  return img;
}

std::int64_t MaskSeq::count() const {
  std::int64_t n = 0;
  for (auto v : m) n += v ? 1 : 0;
  return n;
}

namespace {
struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;
}  // namespace

void write_png(const std::string& path, const Image8& img) {
  SS_CHECK(img.c == 1 || img.c == 3, "write_png: channels must be 1 or 3");
  FilePtr fp(std::fopen(path.c_str(), "wb"));
  SS_REQUIRE(fp != nullptr, "cannot open for write: " + path);
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  SS_REQUIRE(png, "png_create_write_struct failed");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    fail_runtime("png_create_info_struct failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    fail_runtime("png write error: " + path);
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(img.w), static_cast<png_uint_32>(img.h), 8,
               img.c == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  std::vector<png_bytep> rows(static_cast<std::size_t>(img.h));
  for (std::int64_t y = 0; y < img.h; ++y)
    rows[static_cast<std::size_t>(y)] =
        const_cast<png_bytep>(img.px.data() + y * img.w * img.c);
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

Image8 read_png(const std::string& path) {
  FilePtr fp(std::fopen(path.c_str(), "rb"));
  SS_CHECK(fp != nullptr, "cannot open: " + path);
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  SS_REQUIRE(png, "png_create_read_struct failed");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    fail_runtime("png_create_info_struct failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    fail_runtime("png read error: " + path);
  }
  png_init_io(png, fp.get());
  png_read_info(png, info);
  png_uint_32 w = png_get_image_width(png, info);
  png_uint_32 h = png_get_image_height(png, info);
  int color_type = png_get_color_type(png, info);
  int bit_depth = png_get_bit_depth(png, info);
  if (bit_depth == 16) png_set_strip_16(png);
  if (color_type == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color_type == PNG_COLOR_TYPE_GRAY && bit_depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
  if (color_type & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  png_read_update_info(png, info);
  int channels = png_get_channels(png, info);
  SS_REQUIRE(channels == 1 || channels == 3, "unsupported png channel count");
  Image8 img(static_cast<std::int64_t>(h), static_cast<std::int64_t>(w), channels);
  std::vector<png_bytep> rows(h);
  for (png_uint_32 y = 0; y < h; ++y)
    rows[y] = img.px.data() + static_cast<std::int64_t>(y) * img.w * img.c;
  png_read_image(png, rows.data());
  png_destroy_read_struct(&png, &info, nullptr);
  return img;
}

Tensor clip_to_tensor(const VideoClip& clip) {
  SS_CHECK(clip.t > 0 && clip.h > 0 && clip.w > 0, "empty clip");
  Tensor out({clip.t, 3, clip.h, clip.w});
  for (std::int64_t f = 0; f < clip.t; ++f)
    for (std::int64_t ch = 0; ch < 3; ++ch)
      for (std::int64_t y = 0; y < clip.h; ++y)
        for (std::int64_t x = 0; x < clip.w; ++x)
          out.at4(f, ch, y, x) = static_cast<double>(clip.at(f, y, x, ch)) / 127.5 - 1.0;
  return out;
}

Image8 resize_bilinear(const Image8& src, std::int64_t oh, std::int64_t ow) {
  SS_CHECK(oh > 0 && ow > 0 && src.h > 0 && src.w > 0, "resize_bilinear: empty");
  if (oh == src.h && ow == src.w) return src;
  Image8 out(oh, ow, src.c);
  double sy = static_cast<double>(src.h) / static_cast<double>(oh);
  double sx = static_cast<double>(src.w) / static_cast<double>(ow);
  for (std::int64_t y = 0; y < oh; ++y) {
    double fy = (static_cast<double>(y) + 0.5) * sy - 0.5;
    std::int64_t y0 = static_cast<std::int64_t>(std::floor(fy));
    double wy = fy - static_cast<double>(y0);
    std::int64_t y1 = std::min(std::max(y0 + 1, std::int64_t{0}), src.h - 1);
    y0 = std::min(std::max(y0, std::int64_t{0}), src.h - 1);
    for (std::int64_t x = 0; x < ow; ++x) {
      double fx = (static_cast<double>(x) + 0.5) * sx - 0.5;
      std::int64_t x0 = static_cast<std::int64_t>(std::floor(fx));
      double wx = fx - static_cast<double>(x0);
      std::int64_t x1 = std::min(std::max(x0 + 1, std::int64_t{0}), src.w - 1);
      x0 = std::min(std::max(x0, std::int64_t{0}), src.w - 1);
      for (std::int64_t ch = 0; ch < src.c; ++ch) {
        double v = (1 - wy) * ((1 - wx) * src.at(y0, x0, ch) + wx * src.at(y0, x1, ch)) +
                   wy * ((1 - wx) * src.at(y1, x0, ch) + wx * src.at(y1, x1, ch));
        out.at(y, x, ch) = static_cast<std::uint8_t>(std::min(255.0, std::max(0.0, v + 0.5)));
      }
    }
  }
  return out;
}

VideoClip resize_clip(const VideoClip& src, std::int64_t oh, std::int64_t ow) {
  if (oh == src.h && ow == src.w) return src;
  VideoClip out(src.t, oh, ow);
  for (std::int64_t f = 0; f < src.t; ++f) {
    Image8 rf = resize_bilinear(src.frame(f), oh, ow);
    std::copy(rf.px.begin(), rf.px.end(), out.rgb.begin() + f * oh * ow * 3);
  }
  return out;
}

MaskSeq downsample_mask(const MaskSeq& src, std::int64_t oh, std::int64_t ow) {
  SS_CHECK(src.h % oh == 0 && src.w % ow == 0,
           "downsample_mask: source dims must be multiples of target dims");
  std::int64_t fy = src.h / oh, fx = src.w / ow;
  std::int64_t cell = fy * fx;
  MaskSeq out(src.t, oh, ow);
  for (std::int64_t f = 0; f < src.t; ++f)
    for (std::int64_t y = 0; y < oh; ++y)
      for (std::int64_t x = 0; x < ow; ++x) {
        std::int64_t acc = 0;
        for (std::int64_t i = 0; i < fy; ++i)
          for (std::int64_t j = 0; j < fx; ++j) acc += src.at(f, y * fy + i, x * fx + j) ? 1 : 0;
        out.at(f, y, x) = (2 * acc >= cell) ? 1 : 0;
      }
  return out;
}

MaskSeq upsample_mask(const MaskSeq& src, std::int64_t oh, std::int64_t ow) {
  SS_CHECK(oh % src.h == 0 && ow % src.w == 0,
           "upsample_mask: target dims must be multiples of source dims");
  std::int64_t fy = oh / src.h, fx = ow / src.w;
  MaskSeq out(src.t, oh, ow);
  for (std::int64_t f = 0; f < src.t; ++f)
    for (std::int64_t y = 0; y < oh; ++y)
      for (std::int64_t x = 0; x < ow; ++x) out.at(f, y, x) = src.at(f, y / fy, x / fx);
  return out;
}

}  // namespace selfshot
