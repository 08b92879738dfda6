#include "ccmr/evalio.hpp"

#include <png.h>

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <memory>
#include <vector>

#include "ccmr/errors.hpp"

namespace ccmr {

namespace {

void check_flow(const FlowField& flow, const char* what) {
  if (flow.channels() != 2) throw ShapeError(std::string(what) + ": flow must have 2 channels, got " + flow.shape_string());
}

void check_pair(const FlowField& flow, const FlowField& gt, const Mask& mask) {
  check_flow(flow, "flow");
  check_flow(gt, "ground truth");
  require_same_shape(flow, gt, "flow vs ground truth");
  if (!mask.empty() && (mask.channels() != 1 || !mask.same_spatial(gt))) {
    throw ShapeError("mask must be 1 x H x W matching the flow, got " + mask.shape_string());
  }
}

bool selected(const Mask& mask, int p) { return mask.empty() || mask.mat()(0, p) != 0.0f; }

double epe(const FlowField& a, const FlowField& b, int p) {
  const double du = double(a.mat()(0, p)) - b.mat()(0, p);
  const double dv = double(a.mat()(1, p)) - b.mat()(1, p);
  return std::sqrt(du * du + dv * dv);
}

bool outlier(const FlowField& flow, const FlowField& gt, int p) {
  const double e = epe(flow, gt, p);
  const double mag = std::hypot(double(gt.mat()(0, p)), double(gt.mat()(1, p)));
  return e > 3.0 && e > 0.05 * mag;
}

struct Accumulator {
  double sum = 0.0;
  std::int64_t count = 0;
  double mean() const { return count ? sum / count : 0.0; }
};

double metric_value(Metric metric, const FlowField& flow, const FlowField& gt, int p) {
  return metric == Metric::kAepe ? epe(flow, gt, p) : (outlier(flow, gt, p) ? 100.0 : 0.0);
}

// Little-endian scalar I/O; the format is defined little-endian regardless of host.
template <typename T>
void put_le(std::ostream& out, T value) {
  using U = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
  U bits = std::bit_cast<U>(value);
  for (std::size_t i = 0; i < sizeof(T); ++i) out.put(static_cast<char>((bits >> (8 * i)) & 0xff));
}

template <typename T>
T get_le(std::istream& in, const std::string& path) {
  using U = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
  unsigned char bytes[sizeof(T)];
  if (!in.read(reinterpret_cast<char*>(bytes), sizeof(T))) throw FormatError(path + ": truncated file");
  U bits = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) bits |= static_cast<U>(bytes[i]) << (8 * i);
  return std::bit_cast<T>(bits);
}

struct PngRaw {
  int width = 0;
  int height = 0;
  int bit_depth = 8;                   // 8 or 16
  std::vector<std::uint16_t> samples;  // RGB interleaved, row-major
};

struct FileCloser {
  void operator()(std::FILE* f) const { std::fclose(f); }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

[[noreturn]] void png_error_handler(png_structp, png_const_charp message) { throw FormatError(message); }
void png_warning_handler(png_structp, png_const_charp) {}

PngRaw read_png_rgb(const std::string& path) {
  FilePtr file(std::fopen(path.c_str(), "rb"));
  if (!file) throw FormatError(path + ": cannot open");
  unsigned char signature[8];
  if (std::fread(signature, 1, 8, file.get()) != 8 || png_sig_cmp(signature, 0, 8) != 0) {
    throw FormatError(path + ": not a PNG file");
  }
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, png_error_handler, png_warning_handler);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    throw FormatError("libpng initialisation failed");
  }
  PngRaw raw;
  try {
    png_init_io(png, file.get());
    png_set_sig_bytes(png, 8);
    png_read_info(png, info);
    const int color = png_get_color_type(png, info);
    raw.bit_depth = png_get_bit_depth(png, info) == 16 ? 16 : 8;
    png_set_expand(png);
    if (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA) png_set_gray_to_rgb(png);
    png_set_strip_alpha(png);
    png_read_update_info(png, info);
    raw.width = static_cast<int>(png_get_image_width(png, info));
    raw.height = static_cast<int>(png_get_image_height(png, info));
    const std::size_t row_bytes = png_get_rowbytes(png, info);
    std::vector<unsigned char> buffer(row_bytes * raw.height);
    std::vector<png_bytep> rows(raw.height);
    for (int y = 0; y < raw.height; ++y) rows[y] = buffer.data() + y * row_bytes;
    png_read_image(png, rows.data());
    png_read_end(png, nullptr);
    raw.samples.resize(static_cast<std::size_t>(raw.width) * raw.height * 3);
    for (std::size_t i = 0; i < raw.samples.size(); ++i) {
      // PNG stores 16-bit samples big-endian.
      raw.samples[i] = raw.bit_depth == 16 ? static_cast<std::uint16_t>(buffer[2 * i] << 8 | buffer[2 * i + 1])
                                           : buffer[i];
    }
  } catch (const FormatError& e) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw FormatError(path + ": " + e.what());
  }
  png_destroy_read_struct(&png, &info, nullptr);
  return raw;
}

void write_png_rgb(const std::string& path, int width, int height, int bit_depth,
                   const std::vector<std::uint16_t>& samples) {
  FilePtr file(std::fopen(path.c_str(), "wb"));
  if (!file) throw FormatError(path + ": cannot open for writing");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, png_error_handler, png_warning_handler);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    throw FormatError("libpng initialisation failed");
  }
  const int bytes = bit_depth / 8;
  std::vector<unsigned char> buffer(static_cast<std::size_t>(width) * height * 3 * bytes);
  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (bytes == 2) {
      buffer[2 * i] = static_cast<unsigned char>(samples[i] >> 8);
      buffer[2 * i + 1] = static_cast<unsigned char>(samples[i] & 0xff);
    } else {
      buffer[i] = static_cast<unsigned char>(samples[i]);
    }
  }
  try {
    png_init_io(png, file.get());
    png_set_IHDR(png, info, width, height, bit_depth, PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
                 PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    for (int y = 0; y < height; ++y) png_write_row(png, buffer.data() + static_cast<std::size_t>(y) * width * 3 * bytes);
    png_write_end(png, nullptr);
  } catch (const FormatError& e) {
    png_destroy_write_struct(&png, &info);
    throw FormatError(path + ": " + e.what());
  }
  png_destroy_write_struct(&png, &info);
}

// Baker et al. color wheel: 55 hues between the six primaries.
std::vector<std::array<double, 3>> make_color_wheel() {
  constexpr int RY = 15, YG = 6, GC = 4, CB = 11, BM = 13, MR = 6;
  std::vector<std::array<double, 3>> wheel;
  for (int i = 0; i < RY; ++i) wheel.push_back({255, 255.0 * i / RY, 0});
  for (int i = 0; i < YG; ++i) wheel.push_back({255 - 255.0 * i / YG, 255, 0});
  for (int i = 0; i < GC; ++i) wheel.push_back({0, 255, 255.0 * i / GC});
  for (int i = 0; i < CB; ++i) wheel.push_back({0, 255 - 255.0 * i / CB, 255});
  for (int i = 0; i < BM; ++i) wheel.push_back({255.0 * i / BM, 0, 255});
  for (int i = 0; i < MR; ++i) wheel.push_back({255, 0, 255 - 255.0 * i / MR});
  return wheel;
}

std::string lower_extension(const std::string& path) {
  const auto dot = path.find_last_of('.');
  std::string ext = dot == std::string::npos ? "" : path.substr(dot + 1);
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  return ext;
}

}  // namespace

double aepe(const FlowField& flow, const FlowField& gt, const Mask& mask) {
  check_pair(flow, gt, mask);
  Accumulator acc;
  for (int p = 0; p < gt.pixels(); ++p) {
    if (!selected(mask, p)) continue;
    acc.sum += epe(flow, gt, p);
    ++acc.count;
  }
  return acc.mean();
}

double fl_error(const FlowField& flow, const FlowField& gt, const Mask& mask) {
  check_pair(flow, gt, mask);
  Accumulator acc;
  for (int p = 0; p < gt.pixels(); ++p) {
    if (!selected(mask, p)) continue;
    acc.sum += outlier(flow, gt, p) ? 100.0 : 0.0;
    ++acc.count;
  }
  return acc.mean();
}

RegionSplit split_regions(Metric metric, const FlowField& flow, const FlowField& gt, const Mask& occluded,
                          const Mask& valid) {
  check_pair(flow, gt, valid);
  if (occluded.empty()) throw ShapeError("split_regions: occlusion mask required");
  check_pair(flow, gt, occluded);
  Accumulator matched, unmatched;
  for (int p = 0; p < gt.pixels(); ++p) {
    if (!selected(valid, p)) continue;
    Accumulator& acc = occluded.mat()(0, p) != 0.0f ? unmatched : matched;
    acc.sum += metric_value(metric, flow, gt, p);
    ++acc.count;
  }
  return {matched.mean(), unmatched.mean(), matched.count, unmatched.count};
}

EvalResult evaluate(const FlowField& flow, const FlowField& gt, const Mask& valid, const Mask& occluded) {
  check_pair(flow, gt, valid);
  EvalResult r;
  Accumulator epe_all, fl_all;
  for (int p = 0; p < gt.pixels(); ++p) {
    if (!selected(valid, p)) continue;
    epe_all.sum += epe(flow, gt, p);
    fl_all.sum += outlier(flow, gt, p) ? 100.0 : 0.0;
    ++epe_all.count;
    ++fl_all.count;
  }
  r.aepe_all = epe_all.mean();
  r.fl_all = fl_all.mean();
  r.n_all = epe_all.count;
  if (occluded.empty()) {
    r.fl_noc = r.fl_all;
    r.aepe_matched = r.aepe_all;
    r.n_matched = r.n_all;
    return r;
  }
  const RegionSplit e = split_regions(Metric::kAepe, flow, gt, occluded, valid);
  const RegionSplit f = split_regions(Metric::kFl, flow, gt, occluded, valid);
  r.has_regions = true;
  r.aepe_matched = e.matched;
  r.aepe_unmatched = e.unmatched;
  r.fl_noc = f.matched;
  r.n_matched = e.n_matched;
  r.n_unmatched = e.n_unmatched;
  return r;
}

FlowField read_flo(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError(path + ": cannot open");
  const float magic = get_le<float>(in, path);
  if (magic != kFloMagic) throw FormatError(path + ": bad .flo magic");
  const auto width = get_le<std::int32_t>(in, path);
  const auto height = get_le<std::int32_t>(in, path);
  if (width <= 0 || height <= 0 || width > (1 << 16) || height > (1 << 16)) {
    throw FormatError(path + ": implausible size " + std::to_string(width) + "x" + std::to_string(height));
  }
  FlowField flow(2, height, width);
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      flow(0, y, x) = get_le<float>(in, path);
      flow(1, y, x) = get_le<float>(in, path);
    }
  }
  return flow;
}

void write_flo(const std::string& path, const FlowField& flow) {
  check_flow(flow, "write_flo");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError(path + ": cannot open for writing");
  put_le(out, kFloMagic);
  put_le(out, static_cast<std::int32_t>(flow.width()));
  put_le(out, static_cast<std::int32_t>(flow.height()));
  for (int y = 0; y < flow.height(); ++y) {
    for (int x = 0; x < flow.width(); ++x) {
      put_le(out, flow(0, y, x));
      put_le(out, flow(1, y, x));
    }
  }
  if (!out) throw FormatError(path + ": write failed");
}

KittiFlow read_kitti_png(const std::string& path) {
  const PngRaw raw = read_png_rgb(path);
  if (raw.bit_depth != 16) throw FormatError(path + ": KITTI flow must be a 16-bit PNG");
  KittiFlow k{FlowField(2, raw.height, raw.width), Mask(1, raw.height, raw.width)};
  for (int y = 0; y < raw.height; ++y) {
    for (int x = 0; x < raw.width; ++x) {
      const std::uint16_t* s = &raw.samples[(static_cast<std::size_t>(y) * raw.width + x) * 3];
      k.flow(0, y, x) = (static_cast<float>(s[0]) - 32768.0f) / 64.0f;
      k.flow(1, y, x) = (static_cast<float>(s[1]) - 32768.0f) / 64.0f;
      k.valid(0, y, x) = s[2] > 0 ? 1.0f : 0.0f;
    }
  }
  return k;
}

void write_kitti_png(const std::string& path, const FlowField& flow, const Mask& valid) {
  check_flow(flow, "write_kitti_png");
  if (!valid.empty() && (valid.channels() != 1 || !valid.same_spatial(flow))) throw ShapeError("write_kitti_png: bad mask");
  const auto encode = [](float v) {
    const double q = std::round(double(v) * 64.0 + 32768.0);
    return static_cast<std::uint16_t>(std::clamp(q, 0.0, 65535.0));
  };
  std::vector<std::uint16_t> samples(static_cast<std::size_t>(flow.pixels()) * 3);
  for (int y = 0; y < flow.height(); ++y) {
    for (int x = 0; x < flow.width(); ++x) {
      std::uint16_t* s = &samples[(static_cast<std::size_t>(y) * flow.width() + x) * 3];
      const bool ok = valid.empty() || valid(0, y, x) != 0.0f;
      s[0] = ok ? encode(flow(0, y, x)) : 0;
      s[1] = ok ? encode(flow(1, y, x)) : 0;
      s[2] = ok ? 1 : 0;
    }
  }
  write_png_rgb(path, flow.width(), flow.height(), 16, samples);
}

Rgb8 flow_to_color(const FlowField& flow, double max_rad) {
  check_flow(flow, "flow_to_color");
  static const auto wheel = make_color_wheel();
  const int ncols = static_cast<int>(wheel.size());
  if (max_rad <= 0.0) {
    max_rad = 0.0;
    for (int p = 0; p < flow.pixels(); ++p) {
      const double r = std::hypot(double(flow.mat()(0, p)), double(flow.mat()(1, p)));
      if (std::isfinite(r)) max_rad = std::max(max_rad, r);
    }
    if (max_rad <= 0.0) max_rad = 1.0;
  }
  Rgb8 out(3, flow.height(), flow.width());
  for (int p = 0; p < flow.pixels(); ++p) {
    const double u = flow.mat()(0, p) / max_rad, v = flow.mat()(1, p) / max_rad;
    if (!std::isfinite(u) || !std::isfinite(v)) {
      out.mat().col(p).setZero();
      continue;
    }
    const double rad = std::min(1.0, std::hypot(u, v));
    const double a = std::atan2(-v, -u) / M_PI;
    const double fk = (a + 1.0) / 2.0 * (ncols - 1);
    const int k0 = static_cast<int>(std::floor(fk));
    const int k1 = (k0 + 1) % ncols;
    const double f = fk - k0;
    for (int c = 0; c < 3; ++c) {
      const double col = ((1 - f) * wheel[k0][c] + f * wheel[k1][c]) / 255.0;
      const double value = 1.0 - rad * (1.0 - col);
      out.mat()(c, p) = static_cast<std::uint8_t>(std::lround(255.0 * value));
    }
  }
  return out;
}

Tensor<float> read_image(const std::string& path) {
  const PngRaw raw = read_png_rgb(path);
  const double top = raw.bit_depth == 16 ? 65535.0 : 255.0;
  Tensor<float> img(3, raw.height, raw.width);
  for (int y = 0; y < raw.height; ++y) {
    for (int x = 0; x < raw.width; ++x) {
      for (int c = 0; c < 3; ++c) {
        const double s = raw.samples[(static_cast<std::size_t>(y) * raw.width + x) * 3 + c];
        img(c, y, x) = static_cast<float>(2.0 * s / top - 1.0);
      }
    }
  }
  return img;
}

void write_png(const std::string& path, const Rgb8& image) {
  if (image.channels() != 3) throw ShapeError("write_png: need 3 channels");
  std::vector<std::uint16_t> samples(static_cast<std::size_t>(image.pixels()) * 3);
  for (int y = 0; y < image.height(); ++y) {
    for (int x = 0; x < image.width(); ++x) {
      for (int c = 0; c < 3; ++c) samples[(static_cast<std::size_t>(y) * image.width() + x) * 3 + c] = image(c, y, x);
    }
  }
  write_png_rgb(path, image.width(), image.height(), 8, samples);
}

void write_ppm(const std::string& path, const Rgb8& image) {
  if (image.channels() != 3) throw ShapeError("write_ppm: need 3 channels");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError(path + ": cannot open for writing");
  out << "P6\n" << image.width() << ' ' << image.height() << "\n255\n";
  for (int y = 0; y < image.height(); ++y) {
    for (int x = 0; x < image.width(); ++x) {
      for (int c = 0; c < 3; ++c) out.put(static_cast<char>(image(c, y, x)));
    }
  }
  if (!out) throw FormatError(path + ": write failed");
}

void write_rgb(const std::string& path, const Rgb8& image) {
  const std::string ext = lower_extension(path);
  if (ext == "png") {
    write_png(path, image);
  } else if (ext == "ppm") {
    write_ppm(path, image);
  } else {
    throw FormatError(path + ": unsupported image extension (use .png or .ppm)");
  }
}

Rgb8 heatmap(const Tensor<float>& values) {
  if (values.channels() != 1) throw ShapeError("heatmap: need a single channel");
  Rgb8 out(3, values.height(), values.width());
  for (int p = 0; p < values.pixels(); ++p) {
    const double t = std::clamp(double(values.mat()(0, p)), 0.0, 1.0);
    const double r = std::clamp(3.0 * t, 0.0, 1.0);
    const double g = std::clamp(3.0 * t - 1.0, 0.0, 1.0);
    const double b = std::clamp(3.0 * t - 2.0, 0.0, 1.0);
    out.mat()(0, p) = static_cast<std::uint8_t>(std::lround(255 * r));
    out.mat()(1, p) = static_cast<std::uint8_t>(std::lround(255 * g));
    out.mat()(2, p) = static_cast<std::uint8_t>(std::lround(255 * b));
  }
  return out;
}

}  // namespace ccmr
