#include "ptta/data.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <sstream>
#include <stdexcept>

namespace ptta::data {

namespace fs = std::filesystem;

BaseFamily base_from_string(const std::string& s) {
  if (s == "shapes") return BaseFamily::Shapes;
  if (s == "glyphs") return BaseFamily::Glyphs;
  throw std::invalid_argument("unknown base family '" + s + "'");
}

ShiftKind shift_from_string(const std::string& s) {
  if (s == "color") return ShiftKind::Color;
  if (s == "corrupt") return ShiftKind::Corrupt;
  if (s == "rotate") return ShiftKind::Rotate;
  throw std::invalid_argument("unknown shift kind '" + s + "'");
}

std::string base_to_string(BaseFamily b) {
  return b == BaseFamily::Shapes ? "shapes" : "glyphs";
}

std::string shift_to_string(ShiftKind s) {
  switch (s) {
    case ShiftKind::Color: return "color";
    case ShiftKind::Corrupt: return "corrupt";
    case ShiftKind::Rotate: return "rotate";
  }
  return "?";
}

void DomainShiftSpec::validate() const {
  auto fail = [](const std::string& m) {
    throw std::invalid_argument("data spec: " + m);
  };
  if (classes < 2) fail("need at least two classes");
  const int max_classes = base == BaseFamily::Shapes ? 8 : 10;
  if (classes > max_classes) {
    fail("base family supports at most " + std::to_string(max_classes) +
         " classes");
  }
  if (per_class_count < 1) fail("per_class_count must be positive");
  if (image_size < 8) fail("image_size too small");
  if (severity < 0.0 || severity > 1.0) fail("severity outside [0,1]");
}

namespace {

constexpr double kPi = std::numbers::pi;

double clamp01(double v) { return std::clamp(v, 0.0, 1.0); }

void clamp_image(Image& img) {
  for (auto& v : img.pixels) v = clamp01(v);
}

void quantize_to_u8_grid(Image& img) {
  for (auto& v : img.pixels) v = std::round(clamp01(v) * 255.0) / 255.0;
}

// Rotation of an RGB vector about the gray axis (1,1,1)/sqrt(3); keeps
// grays fixed, shifts hue by `angle` radians.
void rotate_hue(Image& img, double angle) {
  const double c = std::cos(angle), s = std::sin(angle);
  const double oc = (1.0 - c) / 3.0;
  const double sv = s / std::sqrt(3.0);
  const double m00 = c + oc, m01 = oc - sv, m02 = oc + sv;
  const double m10 = oc + sv, m11 = c + oc, m12 = oc - sv;
  const double m20 = oc - sv, m21 = oc + sv, m22 = c + oc;
  const int hw = img.height * img.width;
  for (int i = 0; i < hw; ++i) {
    const double r = img.pixels[i];
    const double g = img.pixels[hw + i];
    const double b = img.pixels[2 * hw + i];
    img.pixels[i] = m00 * r + m01 * g + m02 * b;
    img.pixels[hw + i] = m10 * r + m11 * g + m12 * b;
    img.pixels[2 * hw + i] = m20 * r + m21 * g + m22 * b;
  }
}

void gaussian_blur(Image& img, double sigma) {
  if (sigma <= 0.0) return;
  const int radius = std::max(1, static_cast<int>(std::ceil(2.5 * sigma)));
  std::vector<double> w(2 * radius + 1);
  double sum = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    w[i + radius] = std::exp(-0.5 * i * i / (sigma * sigma));
    sum += w[i + radius];
  }
  for (auto& x : w) x /= sum;

  const int H = img.height, W = img.width;
  auto reflect = [](int i, int n) {
    if (i < 0) i = -i - 1;
    if (i >= n) i = 2 * n - 1 - i;
    return std::clamp(i, 0, n - 1);
  };
  std::vector<double> tmp(static_cast<std::size_t>(H) * W);
  for (int c = 0; c < img.channels; ++c) {
    for (int y = 0; y < H; ++y) {
      for (int x = 0; x < W; ++x) {
        double acc = 0.0;
        for (int i = -radius; i <= radius; ++i) {
          acc += w[i + radius] * img.at(c, y, reflect(x + i, W));
        }
        tmp[static_cast<std::size_t>(y) * W + x] = acc;
      }
    }
    for (int y = 0; y < H; ++y) {
      for (int x = 0; x < W; ++x) {
        double acc = 0.0;
        for (int i = -radius; i <= radius; ++i) {
          acc += w[i + radius] * tmp[static_cast<std::size_t>(reflect(y + i, H)) * W + x];
        }
        img.at(c, y, x) = acc;
      }
    }
  }
}

Image rotate_bilinear(const Image& img, double angle) {
  const int H = img.height, W = img.width;
  Image out(img.channels, H, W);
  const double cy = (H - 1) / 2.0, cx = (W - 1) / 2.0;
  const double ca = std::cos(-angle), sa = std::sin(-angle);
  for (int y = 0; y < H; ++y) {
    for (int x = 0; x < W; ++x) {
      const double dy = y - cy, dx = x - cx;
      const double sy = cy + sa * dx + ca * dy;
      const double sx = cx + ca * dx - sa * dy;
      const int y0 = std::clamp(static_cast<int>(std::floor(sy)), 0, H - 1);
      const int x0 = std::clamp(static_cast<int>(std::floor(sx)), 0, W - 1);
      const int y1 = std::min(y0 + 1, H - 1);
      const int x1 = std::min(x0 + 1, W - 1);
      const double fy = std::clamp(sy - y0, 0.0, 1.0);
      const double fx = std::clamp(sx - x0, 0.0, 1.0);
      for (int c = 0; c < img.channels; ++c) {
        const double v =
            (1 - fy) * ((1 - fx) * img.at(c, y0, x0) + fx * img.at(c, y0, x1)) +
            fy * ((1 - fx) * img.at(c, y1, x0) + fx * img.at(c, y1, x1));
        out.at(c, y, x) = v;
      }
    }
  }
  return out;
}

// ---- signed distance fields for the shape classes ----
// All SDFs are in normalized coordinates: the shape lives near the origin
// with nominal radius 1; negative inside.

double sd_circle(double x, double y) { return std::hypot(x, y) - 1.0; }

double sd_ring(double x, double y) {
  return std::abs(std::hypot(x, y) - 0.75) - 0.3;
}

double sd_box(double x, double y, double hx, double hy) {
  const double qx = std::abs(x) - hx, qy = std::abs(y) - hy;
  const double ox = std::max(qx, 0.0), oy = std::max(qy, 0.0);
  return std::hypot(ox, oy) + std::min(std::max(qx, qy), 0.0);
}

double sd_square(double x, double y) { return sd_box(x, y, 0.85, 0.85); }

double sd_triangle(double x, double y) {
  // equilateral triangle with vertices on the unit circle
  const double k = std::sqrt(3.0);
  x = std::abs(x) - 1.0;
  y = y + 1.0 / k;
  if (x + k * y > 0.0) {
    const double nx = (x - k * y) / 2.0;
    const double ny = (-k * x - y) / 2.0;
    x = nx;
    y = ny;
  }
  x -= std::clamp(x, -2.0, 0.0);
  const double sgn = y > 0.0 ? 1.0 : (y < 0.0 ? -1.0 : 0.0);
  return -std::hypot(x, y) * sgn;
}

double sd_plus(double x, double y) {
  return std::min(sd_box(x, y, 1.0, 0.32), sd_box(x, y, 0.32, 1.0));
}

double sd_cross_x(double x, double y) {
  const double inv = std::numbers::sqrt2 / 2.0;
  const double rx = inv * (x + y), ry = inv * (y - x);
  return std::min(sd_box(rx, ry, 1.0, 0.3), sd_box(rx, ry, 0.3, 1.0));
}

double sd_hbars(double x, double y) {
  return std::min(sd_box(x, y + 0.55, 0.95, 0.22),
                  sd_box(x, y - 0.55, 0.95, 0.22));
}

double sd_diamond(double x, double y) {
  const double inv = std::numbers::sqrt2 / 2.0;
  return sd_box(inv * (x + y), inv * (y - x), 0.8, 0.8);
}

double shape_sdf(int cls, double x, double y) {
  switch (cls) {
    case 0: return sd_circle(x, y);
    case 1: return sd_ring(x, y);
    case 2: return sd_square(x, y);
    case 3: return sd_triangle(x, y);
    case 4: return sd_plus(x, y);
    case 5: return sd_cross_x(x, y);
    case 6: return sd_hbars(x, y);
    case 7: return sd_diamond(x, y);
  }
  throw std::logic_error("shape class out of range");
}

// seven-segment raster glyphs for the digit-style family
// segments: 0 top, 1 top-right, 2 bottom-right, 3 bottom, 4 bottom-left,
// 5 top-left, 6 middle
constexpr int kSegmentsPerDigit[10] = {
    0b0111111, 0b0000110, 0b1011011, 0b1001111, 0b1100110,
    0b1101101, 0b1111101, 0b0000111, 0b1111111, 0b1101111,
};

double glyph_sdf(int digit, double x, double y, double thick) {
  // glyph occupies x in [-0.6, 0.6], y in [-1, 1]
  const int mask = kSegmentsPerDigit[digit];
  double d = 1e9;
  auto seg = [&](double cx, double cy, double hx, double hy) {
    d = std::min(d, sd_box(x - cx, y - cy, hx, hy));
  };
  const double w = 0.55, h = 0.9;
  if (mask & (1 << 0)) seg(0.0, -h, w, thick);
  if (mask & (1 << 1)) seg(w, -h / 2, thick, h / 2);
  if (mask & (1 << 2)) seg(w, h / 2, thick, h / 2);
  if (mask & (1 << 3)) seg(0.0, h, w, thick);
  if (mask & (1 << 4)) seg(-w, h / 2, thick, h / 2);
  if (mask & (1 << 5)) seg(-w, -h / 2, thick, h / 2);
  if (mask & (1 << 6)) seg(0.0, 0.0, w, thick);
  return d;
}

// class-conditional foreground palette (bright, well separated hues)
void class_color(int cls, int num_classes, double* rgb) {
  const double hue = 2.0 * kPi * cls / num_classes;
  rgb[0] = 0.55 + 0.45 * std::cos(hue);
  rgb[1] = 0.55 + 0.45 * std::cos(hue - 2.0 * kPi / 3.0);
  rgb[2] = 0.55 + 0.45 * std::cos(hue + 2.0 * kPi / 3.0);
}

Image render_sample(const DomainShiftSpec& spec, int cls, RngStream& rng) {
  const int S = spec.image_size;
  Image img(3, S, S);

  double fg[3];
  class_color(cls, spec.classes, fg);
  for (int c = 0; c < 3; ++c) fg[c] = clamp01(fg[c] + rng.normal(0.0, 0.06));
  const double bg = rng.uniform(0.08, 0.25);
  double bgc[3] = {clamp01(bg + rng.normal(0.0, 0.02)),
                   clamp01(bg + rng.normal(0.0, 0.02)),
                   clamp01(bg + rng.normal(0.0, 0.02))};

  const double scale = rng.uniform(0.55, 0.8) * (S / 2.0);
  const double cx = S / 2.0 + rng.uniform(-0.08, 0.08) * S;
  const double cy = S / 2.0 + rng.uniform(-0.08, 0.08) * S;
  const double rot = rng.uniform(-0.15, 0.15);
  const double ca = std::cos(rot), sa = std::sin(rot);
  const double thick = rng.uniform(0.16, 0.26);

  for (int y = 0; y < S; ++y) {
    for (int x = 0; x < S; ++x) {
      const double px = (x - cx) / scale, py = (y - cy) / scale;
      const double rx = ca * px - sa * py, ry = sa * px + ca * py;
      const double d = spec.base == BaseFamily::Shapes
                           ? shape_sdf(cls, rx, ry)
                           : glyph_sdf(cls, rx, ry, thick);
      // soft edge roughly one pixel wide
      const double edge = 1.0 / scale;
      const double a = clamp01(0.5 - d / (2.0 * edge));
      for (int c = 0; c < 3; ++c) {
        img.at(c, y, x) = bgc[c] + a * (fg[c] - bgc[c]);
      }
    }
  }
  // mild sensor-style noise in both domains
  for (auto& v : img.pixels) v = clamp01(v + rng.normal(0.0, 0.015));
  return img;
}

}  // namespace

Image apply_shift(const Image& img, ShiftKind kind, double severity,
                  RngStream& rng) {
  if (severity == 0.0) return img;
  Image out = img;
  switch (kind) {
    case ShiftKind::Color: {
      const double angle =
          severity * (2.0 * kPi / 3.0) * rng.uniform(0.85, 1.15);
      rotate_hue(out, angle);
      break;
    }
    case ShiftKind::Corrupt: {
      gaussian_blur(out, severity * 1.5);
      const double noise = severity * 0.12;
      for (auto& v : out.pixels) v += rng.normal(0.0, noise);
      break;
    }
    case ShiftKind::Rotate: {
      const double lo = severity * (10.0 * kPi / 180.0);
      const double hi = severity * (25.0 * kPi / 180.0);
      double angle = rng.uniform(lo, hi);
      if (rng.bernoulli(0.5)) angle = -angle;
      out = rotate_bilinear(out, angle);
      break;
    }
  }
  clamp_image(out);
  return out;
}

std::pair<Dataset, Dataset> make_synthetic_shift(const DomainShiftSpec& spec) {
  spec.validate();
  auto generate = [&](const char* tag, bool shifted) {
    RngStream rng = derive_stream(spec.seed, std::string("data.") + tag);
    Dataset ds;
    ds.num_classes = spec.classes;
    ds.images.reserve(static_cast<std::size_t>(spec.classes) *
                      spec.per_class_count);
    for (int cls = 0; cls < spec.classes; ++cls) {
      for (int i = 0; i < spec.per_class_count; ++i) {
        Image img = render_sample(spec, cls, rng);
        if (shifted) img = apply_shift(img, spec.shift, spec.severity, rng);
        quantize_to_u8_grid(img);
        ds.images.push_back(std::move(img));
        ds.labels.push_back(cls);
      }
    }
    return ds;
  };
  return {generate("source", false), generate("target", true)};
}

Image weak_augment(const Image& img, RngStream& rng) {
  const int pad = 4;
  const int H = img.height, W = img.width;
  // reflect-pad then crop back to the original size
  const int oy = rng.uniform_int(0, 2 * pad);
  const int ox = rng.uniform_int(0, 2 * pad);
  const bool flip = rng.bernoulli(0.5);

  auto reflect = [](int i, int n) {
    if (i < 0) i = -i;
    if (i >= n) i = 2 * n - 2 - i;
    return std::clamp(i, 0, n - 1);
  };
  Image out(img.channels, H, W);
  for (int c = 0; c < img.channels; ++c) {
    for (int y = 0; y < H; ++y) {
      for (int x = 0; x < W; ++x) {
        const int sy = reflect(y + oy - pad, H);
        int sx = reflect(x + ox - pad, W);
        if (flip) sx = W - 1 - sx;
        out.at(c, y, x) = img.at(c, sy, sx);
      }
    }
  }
  return out;
}

Image strong_augment(const Image& img, RngStream& rng) {
  Image out = weak_augment(img, rng);

  const double brightness = rng.uniform(0.6, 1.4);
  const double contrast = rng.uniform(0.6, 1.4);
  const double saturation = rng.uniform(0.6, 1.4);
  const double hue_angle = rng.uniform(-0.1, 0.1) * 2.0 * kPi;

  for (auto& v : out.pixels) v *= brightness;

  const int hw = out.height * out.width;
  double mean_gray = 0.0;
  for (int i = 0; i < hw; ++i) {
    mean_gray +=
        (out.pixels[i] + out.pixels[hw + i] + out.pixels[2 * hw + i]) / 3.0;
  }
  mean_gray /= hw;
  for (auto& v : out.pixels) v = mean_gray + contrast * (v - mean_gray);

  for (int i = 0; i < hw; ++i) {
    const double gray =
        (out.pixels[i] + out.pixels[hw + i] + out.pixels[2 * hw + i]) / 3.0;
    out.pixels[i] = gray + saturation * (out.pixels[i] - gray);
    out.pixels[hw + i] = gray + saturation * (out.pixels[hw + i] - gray);
    out.pixels[2 * hw + i] = gray + saturation * (out.pixels[2 * hw + i] - gray);
  }

  rotate_hue(out, hue_angle);

  if (rng.bernoulli(0.2)) {
    for (int i = 0; i < hw; ++i) {
      const double gray =
          (out.pixels[i] + out.pixels[hw + i] + out.pixels[2 * hw + i]) / 3.0;
      out.pixels[i] = gray;
      out.pixels[hw + i] = gray;
      out.pixels[2 * hw + i] = gray;
    }
  }
  if (rng.bernoulli(0.5)) {
    gaussian_blur(out, rng.uniform(0.1, 1.0));
  }
  clamp_image(out);
  return out;
}

ad::Tensor to_tensor(const std::vector<const Image*>& batch) {
  if (batch.empty()) throw std::invalid_argument("to_tensor: empty batch");
  const int C = batch[0]->channels, H = batch[0]->height, W = batch[0]->width;
  std::vector<double> v;
  v.reserve(batch.size() * batch[0]->pixels.size());
  for (const Image* img : batch) {
    if (img->channels != C || img->height != H || img->width != W) {
      throw std::invalid_argument("to_tensor: mixed image geometry");
    }
    v.insert(v.end(), img->pixels.begin(), img->pixels.end());
  }
  return ad::Tensor::from_data({static_cast<int>(batch.size()), C, H, W},
                               std::move(v));
}

ad::Tensor to_tensor(const Dataset& ds, const std::vector<int>& indices) {
  std::vector<const Image*> batch;
  batch.reserve(indices.size());
  for (const int i : indices) batch.push_back(&ds.images[i]);
  return to_tensor(batch);
}

namespace {

void write_ppm(const Image& img, const fs::path& path) {
  if (img.channels != 3) {
    throw std::invalid_argument("ppm cache expects 3-channel images");
  }
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  f << "P6\n" << img.width << " " << img.height << "\n255\n";
  const int hw = img.height * img.width;
  std::vector<unsigned char> row(static_cast<std::size_t>(hw) * 3);
  for (int i = 0; i < hw; ++i) {
    for (int c = 0; c < 3; ++c) {
      row[i * 3 + c] = static_cast<unsigned char>(
          std::lround(clamp01(img.pixels[c * hw + i]) * 255.0));
    }
  }
  f.write(reinterpret_cast<const char*>(row.data()),
          static_cast<std::streamsize>(row.size()));
}

Image read_ppm(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot read " + path.string());
  std::string magic;
  int w = 0, h = 0, maxval = 0;
  f >> magic >> w >> h >> maxval;
  if (magic != "P6" || maxval != 255 || w <= 0 || h <= 0) {
    throw std::runtime_error("unsupported ppm header in " + path.string());
  }
  f.get();  // single whitespace after the header
  std::vector<unsigned char> buf(static_cast<std::size_t>(w) * h * 3);
  f.read(reinterpret_cast<char*>(buf.data()),
         static_cast<std::streamsize>(buf.size()));
  if (!f) throw std::runtime_error("truncated ppm " + path.string());
  Image img(3, h, w);
  const int hw = h * w;
  for (int i = 0; i < hw; ++i) {
    for (int c = 0; c < 3; ++c) {
      img.pixels[c * hw + i] = buf[i * 3 + c] / 255.0;
    }
  }
  return img;
}

}  // namespace

void save_dataset(const Dataset& ds, const std::string& dir) {
  fs::create_directories(dir);
  std::ofstream csv(fs::path(dir) / "labels.csv");
  if (!csv) throw std::runtime_error("cannot write labels.csv in " + dir);
  csv << "filename,label\n";
  char name[32];
  for (std::size_t i = 0; i < ds.size(); ++i) {
    std::snprintf(name, sizeof(name), "img_%05zu.ppm", i);
    write_ppm(ds.images[i], fs::path(dir) / name);
    csv << name << "," << ds.labels[i] << "\n";
  }
}

Dataset load_dataset(const std::string& dir) {
  std::ifstream csv(fs::path(dir) / "labels.csv");
  if (!csv) throw std::runtime_error("cannot open labels.csv in " + dir);
  std::string line;
  std::getline(csv, line);
  if (line != "filename,label") {
    throw std::runtime_error("unexpected labels.csv header: " + line);
  }
  Dataset ds;
  while (std::getline(csv, line)) {
    if (line.empty()) continue;
    const auto comma = line.find(',');
    if (comma == std::string::npos) {
      throw std::runtime_error("malformed labels.csv row: " + line);
    }
    const std::string name = line.substr(0, comma);
    const int label = std::stoi(line.substr(comma + 1));
    ds.images.push_back(read_ppm(fs::path(dir) / name));
    ds.labels.push_back(label);
    ds.num_classes = std::max(ds.num_classes, label + 1);
  }
  return ds;
}

}  // namespace ptta::data
