#include "wsseg/io.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <memory>
#include <regex>
#include <sstream>
#include <stdexcept>

namespace wsseg {

namespace {

struct File {
  explicit File(const std::string& path, const char* mode) : f(std::fopen(path.c_str(), mode)) {
    if (!f) throw std::runtime_error("cannot open " + path);
  }
  ~File() {
    if (f) std::fclose(f);
  }
  std::FILE* f;
};

[[noreturn]] void png_fail(png_structp png, png_const_charp msg) {
  auto* text = static_cast<std::string*>(png_get_error_ptr(png));
  if (text) *text = msg;
  png_longjmp(png, 1);
}

// Decodes an 8-bit image; palette images keep their indices when `keep_indices` is set.
struct Decoded {
  int64_t width = 0, height = 0, channels = 0;
  std::vector<uint8_t> data;
};

Decoded decode(const std::string& path, bool keep_indices) {
  File file(path, "rb");
  uint8_t sig[8];
  if (std::fread(sig, 1, 8, file.f) != 8 || png_sig_cmp(sig, 0, 8) != 0)
    throw std::runtime_error(path + ": not a PNG file");
  std::string err;
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, &err, png_fail, nullptr);
  png_infop info = png_create_info_struct(png);
  Decoded out;
  std::vector<png_bytep> rows;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw std::runtime_error(path + ": " + (err.empty() ? "PNG decode error" : err));
  }
  png_init_io(png, file.f);
  png_set_sig_bytes(png, 8);
  png_read_info(png, info);
  const int color = png_get_color_type(png, info);
  const int depth = png_get_bit_depth(png, info);
  if (keep_indices && (color & PNG_COLOR_MASK_COLOR) && color != PNG_COLOR_TYPE_PALETTE) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw std::runtime_error(path + ": label masks must be grayscale or paletted PNGs");
  }
  if (depth == 16) png_set_strip_16(png);
  if (depth < 8) png_set_packing(png);
  if (!keep_indices) {
    if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (!(color & PNG_COLOR_MASK_COLOR)) png_set_gray_to_rgb(png);
  }
  if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  png_read_update_info(png, info);
  out.width = png_get_image_width(png, info);
  out.height = png_get_image_height(png, info);
  out.channels = png_get_channels(png, info);
  const size_t stride = png_get_rowbytes(png, info);
  out.data.resize(stride * static_cast<size_t>(out.height));
  rows.resize(static_cast<size_t>(out.height));
  for (int64_t y = 0; y < out.height; ++y) rows[y] = out.data.data() + y * stride;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return out;
}

void encode(const std::string& path, int64_t w, int64_t h, int color, const uint8_t* data, int64_t channels,
            const std::vector<std::array<uint8_t, 3>>* palette) {
  File file(path, "wb");
  std::string err;
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, &err, png_fail, nullptr);
  png_infop info = png_create_info_struct(png);
  std::vector<png_color> plte;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw std::runtime_error(path + ": " + (err.empty() ? "PNG encode error" : err));
  }
  png_init_io(png, file.f);
  png_set_IHDR(png, info, static_cast<png_uint_32>(w), static_cast<png_uint_32>(h), 8, color, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  if (palette) {
    plte.resize(256, png_color{0, 0, 0});
    for (size_t i = 0; i < palette->size() && i < 256; ++i)
      plte[i] = {(*palette)[i][0], (*palette)[i][1], (*palette)[i][2]};
    png_set_PLTE(png, info, plte.data(), 256);
  }
  png_write_info(png, info);
  for (int64_t y = 0; y < h; ++y) png_write_row(png, const_cast<png_bytep>(data + y * w * channels));
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

}  // namespace

RgbImage read_png_rgb(const std::string& path) {
  Decoded d = decode(path, false);
  if (d.channels != 3) throw std::runtime_error(path + ": could not convert to RGB");
  RgbImage img(d.height, d.width);
  img.pixels = std::move(d.data);
  return img;
}

void write_png_rgb(const RgbImage& img, const std::string& path) {
  encode(path, img.width, img.height, PNG_COLOR_TYPE_RGB, img.pixels.data(), 3, nullptr);
}

Mask read_png_labels(const std::string& path) {
  Decoded d = decode(path, true);
  if (d.channels != 1) throw std::runtime_error(path + ": label mask must have a single channel");
  Mask m(d.height, d.width);
  for (size_t i = 0; i < m.labels.size(); ++i) m.labels[i] = d.data[i];
  return m;
}

void write_png_labels(const Mask& values, const std::string& path, const std::vector<std::array<uint8_t, 3>>& palette) {
  std::vector<uint8_t> buf(values.labels.size());
  for (size_t i = 0; i < buf.size(); ++i) {
    const int32_t v = values.labels[i];
    if (v < 0 || v > 255) throw ValidationError("label value " + std::to_string(v) + " does not fit in 8 bits");
    buf[i] = static_cast<uint8_t>(v);
  }
  encode(path, values.width, values.height, PNG_COLOR_TYPE_PALETTE, buf.data(), 1, &palette);
}

void write_png_gray(const Tensor& map, const std::string& path) {
  if (map.ndim() != 2) throw ValidationError("write_png_gray expects [H,W]");
  std::vector<uint8_t> buf(map.data.size());
  for (size_t i = 0; i < buf.size(); ++i)
    buf[i] = static_cast<uint8_t>(std::lround(std::clamp(map.data[i], 0.0, 1.0) * 255.0));
  encode(path, map.dim(1), map.dim(0), PNG_COLOR_TYPE_GRAY, buf.data(), 1, nullptr);
}

const std::vector<std::array<uint8_t, 3>>& mask_palette() {
  static const std::vector<std::array<uint8_t, 3>> p = {
      {0, 0, 0}, {255, 0, 0}, {0, 255, 0}, {0, 0, 255}, {153, 0, 255}, {255, 255, 0}, {0, 255, 255}, {255, 128, 0}};
  return p;
}

Tensor image_to_tensor(const RgbImage& img, double mean, double std) {
  if (!(std > 0.0)) throw ConfigError("image normalization std must be positive");
  const int64_t HW = img.height * img.width;
  Tensor t({3, img.height, img.width});
  for (int64_t i = 0; i < HW; ++i)
    for (int64_t c = 0; c < 3; ++c) t[c * HW + i] = (img.pixels[i * 3 + c] / 255.0 - mean) / std;
  return t;
}

void write_npy(const Tensor& t, const std::string& path) {
  std::ostringstream shape;
  shape << "(";
  for (size_t i = 0; i < t.shape.size(); ++i)
    shape << t.shape[i] << (t.shape.size() == 1 || i + 1 < t.shape.size() ? "," : "");
  shape << ")";
  std::string header = "{'descr': '<f4', 'fortran_order': False, 'shape': " + shape.str() + ", }";
  const size_t total = 10 + header.size() + 1;
  header.append((64 - total % 64) % 64, ' ');
  header.push_back('\n');
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path + " for writing");
  f.write("\x93NUMPY\x01\x00", 8);
  const auto len = static_cast<uint16_t>(header.size());
  f.put(static_cast<char>(len & 0xff));
  f.put(static_cast<char>(len >> 8));
  f << header;
  for (double v : t.data) {
    const auto x = static_cast<float>(v);
    f.write(reinterpret_cast<const char*>(&x), sizeof(float));
  }
  if (!f) throw std::runtime_error("failed writing " + path);
}

Tensor read_npy(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path);
  char magic[8];
  f.read(magic, 8);
  if (!f || std::memcmp(magic, "\x93NUMPY", 6) != 0) throw std::runtime_error(path + ": not a .npy file");
  size_t hlen = 0;
  if (magic[6] == 1) {
    uint8_t b[2];
    f.read(reinterpret_cast<char*>(b), 2);
    hlen = b[0] | (b[1] << 8);
  } else {
    uint8_t b[4];
    f.read(reinterpret_cast<char*>(b), 4);
    hlen = b[0] | (b[1] << 8) | (b[2] << 16) | (static_cast<size_t>(b[3]) << 24);
  }
  std::string header(hlen, '\0');
  f.read(header.data(), static_cast<std::streamsize>(hlen));
  std::smatch m;
  if (!std::regex_search(header, m, std::regex("'descr':\\s*'([<|]f[48])'")))
    throw std::runtime_error(path + ": only little-endian float arrays are supported");
  const bool f8 = m[1].str().back() == '8';
  if (header.find("'fortran_order': True") != std::string::npos)
    throw std::runtime_error(path + ": Fortran-order arrays are not supported");
  if (!std::regex_search(header, m, std::regex("'shape':\\s*\\(([^)]*)\\)")))
    throw std::runtime_error(path + ": missing shape");
  Shape shape;
  std::string dims = m[1].str();
  std::regex num("\\d+");
  for (auto it = std::sregex_iterator(dims.begin(), dims.end(), num); it != std::sregex_iterator(); ++it)
    shape.push_back(std::stoll(it->str()));
  Tensor t(shape);
  for (int64_t i = 0; i < t.numel(); ++i) {
    if (f8) {
      double v;
      f.read(reinterpret_cast<char*>(&v), 8);
      t[i] = v;
    } else {
      float v;
      f.read(reinterpret_cast<char*>(&v), 4);
      t[i] = v;
    }
  }
  if (!f) throw std::runtime_error(path + ": truncated data");
  return t;
}

}  // namespace wsseg
