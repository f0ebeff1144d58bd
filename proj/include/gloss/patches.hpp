#ifndef GLOSS_PATCHES_HPP
#define GLOSS_PATCHES_HPP

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "gloss/errors.hpp"
#include "gloss/tensor.hpp"

namespace gloss {

inline constexpr std::size_t kPatchSide = 64;
inline constexpr int kNumAugmentations = 6;

/// Augmentation index map for a square plane of side n, as out(r, c) = in(src):
///   0 identity
///   1 rotation by 90 degrees:  in(n-1-c, r)   ([[1,2],[3,4]] -> [[3,1],[4,2]])
///   2 rotation by 180 degrees: in(n-1-r, n-1-c)
///   3 rotation by 270 degrees: in(c, n-1-r)
///   4 horizontal flip:         in(r, n-1-c)
///   5 vertical flip:           in(n-1-r, c)
/// Rotations turn counter-clockwise in a frame whose row axis points up;
/// viewed as an image with row 0 at the top they appear clockwise.
inline std::size_t augment_source(int index, std::size_t n, std::size_t r, std::size_t c) {
  switch (index) {
    case 0: return r * n + c;
    case 1: return (n - 1 - c) * n + r;
    case 2: return (n - 1 - r) * n + (n - 1 - c);
    case 3: return c * n + (n - 1 - r);
    case 4: return r * n + (n - 1 - c);
    case 5: return (n - 1 - r) * n + c;
    default: break;
  }
  throw UsageError("augment: transform index " + std::to_string(index) + " outside 0..5");
}

/// Index of the transform undoing `index`.
inline int augment_inverse(int index) {
  if (index < 0 || index >= kNumAugmentations) {
    throw UsageError("augment: transform index " + std::to_string(index) + " outside 0..5");
  }
  return index == 1 ? 3 : index == 3 ? 1 : index;
}

/// Applies a transform to every square plane of a tensor whose last two axes
/// are equal.
template <class T>
Tensor<T> augment(const Tensor<T>& patch, int index) {
  if (patch.rank() < 2) throw DimensionError("augment: need at least a 2-D patch");
  const std::size_t n = patch.dim(patch.rank() - 1);
  if (patch.dim(patch.rank() - 2) != n) {
    throw DimensionError("augment: patch " + shape_str(patch.shape()) + " is not square");
  }
  if (index < 0 || index >= kNumAugmentations) {
    throw UsageError("augment: transform index " + std::to_string(index) + " outside 0..5");
  }
  Tensor<T> out(patch.shape());
  const std::size_t plane = n * n;
  for (std::size_t base = 0; base < patch.size(); base += plane) {
    for (std::size_t r = 0; r < n; ++r) {
      for (std::size_t c = 0; c < n; ++c) {
        out[base + r * n + c] = patch[base + augment_source(index, n, r, c)];
      }
    }
  }
  return out;
}

/// Maps 8-bit intensities to (v - 128) / 160.
template <class T>
T preprocess_value(std::uint8_t v) {
  return static_cast<T>((static_cast<double>(v) - 128.0) / 160.0);
}

/// One 8-bit patch of side x side pixels to a 1 x side x side tensor.
template <class T>
Tensor<T> preprocess(std::span<const std::uint8_t> pixels, std::size_t side = kPatchSide) {
  if (pixels.size() != side * side) {
    throw DimensionError("preprocess: " + std::to_string(pixels.size()) + " pixels for a " +
                         std::to_string(side) + "x" + std::to_string(side) + " patch");
  }
  Tensor<T> out({1, side, side});
  for (std::size_t i = 0; i < pixels.size(); ++i) out[i] = preprocess_value<T>(pixels[i]);
  return out;
}

template <class T>
struct CentralSurround {
  Tensor<T> central;   // centre crop at full resolution
  Tensor<T> surround;  // whole patch at half resolution
};

/// Splits a batch N x 1 x S x S (or one 1 x S x S / S x S patch) into the
/// centre S/2 crop and the 2x2 average-pooled whole patch. `side` is the
/// required S.
template <class T>
CentralSurround<T> central_surround_split(const Tensor<T>& patches,
                                          std::size_t side = kPatchSide) {
  const auto& s = patches.shape();
  const bool batch = s.size() == 4;
  if (s.size() < 2 || s[s.size() - 1] != side || s[s.size() - 2] != side ||
      (s.size() >= 3 && s[s.size() - 3] != 1) || side % 4 != 0) {
    throw DimensionError("central_surround_split: expected single-channel " +
                         std::to_string(side) + "x" + std::to_string(side) +
                         " patches, got " + shape_str(s));
  }
  const std::size_t n = batch ? s[0] : 1;
  const std::size_t half = side / 2, off = side / 4;
  Shape out_shape = s;
  out_shape[s.size() - 1] = half;
  out_shape[s.size() - 2] = half;
  CentralSurround<T> r{Tensor<T>(out_shape), Tensor<T>(out_shape)};
  for (std::size_t b = 0; b < n; ++b) {
    const T* src = patches.data() + b * side * side;
    T* cen = r.central.data() + b * half * half;
    T* sur = r.surround.data() + b * half * half;
    for (std::size_t i = 0; i < half; ++i) {
      for (std::size_t j = 0; j < half; ++j) {
        cen[i * half + j] = src[(i + off) * side + j + off];
        const std::size_t y = 2 * i, x = 2 * j;
        sur[i * half + j] = (src[y * side + x] + src[y * side + x + 1] +
                             src[(y + 1) * side + x] + src[(y + 1) * side + x + 1]) /
                            T{4};
      }
    }
  }
  return r;
}

}  // namespace gloss

#endif  // GLOSS_PATCHES_HPP
