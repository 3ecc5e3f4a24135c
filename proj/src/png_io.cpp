#include <png.h>

#include <csetjmp>
#include <cstdio>
#include <memory>

#include "dysp/error.hpp"
#include "dysp/image.hpp"

namespace dysp {

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const { std::fclose(f); }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

struct ReadHandles {
  png_structp png = nullptr;
  png_infop info = nullptr;
  ~ReadHandles() { png_destroy_read_struct(&png, &info, nullptr); }
};

struct WriteHandles {
  png_structp png = nullptr;
  png_infop info = nullptr;
  ~WriteHandles() { png_destroy_write_struct(&png, &info); }
};

}  // namespace

Image read_png(const std::filesystem::path& path) {
  FilePtr fp(std::fopen(path.c_str(), "rb"));
  if (!fp) throw IoError("cannot open " + path.string());
  ReadHandles h;
  h.png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!h.png) throw IoError("png: out of memory");
  h.info = png_create_info_struct(h.png);
  if (!h.info) throw IoError("png: out of memory");

  Image img;
  std::vector<png_bytep> rows;
  if (setjmp(png_jmpbuf(h.png))) throw IoError("png: failed to decode " + path.string());

  png_init_io(h.png, fp.get());
  png_read_info(h.png, h.info);
  const auto color = png_get_color_type(h.png, h.info);
  const auto depth = png_get_bit_depth(h.png, h.info);
  if (depth == 16) png_set_strip_16(h.png);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(h.png);
  if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(h.png);
  if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(h.png);
  png_read_update_info(h.png, h.info);

  const std::size_t width = png_get_image_width(h.png, h.info);
  const std::size_t height = png_get_image_height(h.png, h.info);
  const std::size_t channels = png_get_channels(h.png, h.info);
  if (channels != 1 && channels != 3) throw IoError("unsupported channel count in " + path.string());
  img = Image(width, height, channels);
  rows.resize(height);
  for (std::size_t y = 0; y < height; ++y) rows[y] = img.data.data() + y * width * channels;
  png_read_image(h.png, rows.data());
  png_read_end(h.png, nullptr);
  return img;
}

void write_png(const std::filesystem::path& path, const Image& img) {
  if (img.channels != 1 && img.channels != 3)
    throw ValidationError("write_png: only gray or RGB images are supported");
  FilePtr fp(std::fopen(path.c_str(), "wb"));
  if (!fp) throw IoError("cannot open " + path.string() + " for writing");
  WriteHandles h;
  h.png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!h.png) throw IoError("png: out of memory");
  h.info = png_create_info_struct(h.png);
  if (!h.info) throw IoError("png: out of memory");

  std::vector<png_bytep> rows(img.height);
  for (std::size_t y = 0; y < img.height; ++y)
    rows[y] = const_cast<png_bytep>(img.data.data() + y * img.width * img.channels);
  if (setjmp(png_jmpbuf(h.png))) throw IoError("png: failed to encode " + path.string());

  png_init_io(h.png, fp.get());
  png_set_IHDR(h.png, h.info, static_cast<png_uint_32>(img.width), static_cast<png_uint_32>(img.height), 8,
               img.channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(h.png, h.info);
  png_write_image(h.png, rows.data());
  png_write_end(h.png, nullptr);
}

}  // namespace dysp
