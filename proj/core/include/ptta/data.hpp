#pragma once

#include "ptta/rng.hpp"
#include "ptta/tensor.hpp"

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

namespace ptta::data {

// Planar CHW image with pixels in [0, 1].
struct Image {
  int channels = 0;
  int height = 0;
  int width = 0;
  std::vector<double> pixels;

  Image() = default;
  Image(int c, int h, int w)
      : channels(c), height(h), width(w),
        pixels(static_cast<std::size_t>(c) * h * w, 0.0) {}

  double& at(int c, int y, int x) {
    return pixels[(static_cast<std::size_t>(c) * height + y) * width + x];
  }
  double at(int c, int y, int x) const {
    return pixels[(static_cast<std::size_t>(c) * height + y) * width + x];
  }
};

struct Dataset {
  std::vector<Image> images;
  std::vector<int> labels;
  int num_classes = 0;

  std::size_t size() const { return images.size(); }
};

enum class BaseFamily { Shapes, Glyphs };
enum class ShiftKind { Color, Corrupt, Rotate };

BaseFamily base_from_string(const std::string& s);
ShiftKind shift_from_string(const std::string& s);
std::string base_to_string(BaseFamily b);
std::string shift_to_string(ShiftKind s);

struct DomainShiftSpec {
  BaseFamily base = BaseFamily::Shapes;
  ShiftKind shift = ShiftKind::Color;
  double severity = 0.6;  // 0 disables the shift entirely
  int classes = 8;
  int per_class_count = 64;
  int image_size = 32;
  std::uint64_t seed = 0;

  void validate() const;
  bool operator==(const DomainShiftSpec&) const = default;
};

// Label-conditional generator shared by both domains; the target domain
// additionally passes every image through the shift transform. Images are
// quantized to the 8-bit grid so the disk cache round-trips exactly.
std::pair<Dataset, Dataset> make_synthetic_shift(const DomainShiftSpec& spec);

// The target-domain corruption, exposed for tests. severity == 0 is the
// identity.
Image apply_shift(const Image& img, ShiftKind kind, double severity,
                  RngStream& rng);

// pad-4 reflect, random crop, horizontal flip with p=0.5
Image weak_augment(const Image& img, RngStream& rng);
// weak ops, then brightness/contrast/saturation in [0.6, 1.4], hue within
// +-0.1 turns, grayscale with p=0.2, gaussian blur with p=0.5; clamped
Image strong_augment(const Image& img, RngStream& rng);

// Stacks images (all same geometry) into a (B, C, H, W) tensor.
ad::Tensor to_tensor(const std::vector<const Image*>& batch);
ad::Tensor to_tensor(const Dataset& ds, const std::vector<int>& indices);

// Disk cache: <dir>/img_00000.ppm ... plus <dir>/labels.csv with a
// "filename,label" header. PPM is binary 8-bit P6.
void save_dataset(const Dataset& ds, const std::string& dir);
Dataset load_dataset(const std::string& dir);

}  // namespace ptta::data
