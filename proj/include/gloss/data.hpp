#ifndef GLOSS_DATA_HPP
#define GLOSS_DATA_HPP

// Patch datasets: UBC PhotoTour ingestion, pair files, triplet sampling, the
// two-Gaussian toy set and a synthetic patch fixture for offline runs.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "gloss/errors.hpp"
#include "gloss/patches.hpp"
#include "gloss/tensor.hpp"

namespace gloss {

namespace fs = std::filesystem;

inline constexpr std::size_t kMosaicSide = 1024;
inline constexpr std::size_t kPatchesPerRow = kMosaicSide / kPatchSide;
inline constexpr std::size_t kPatchesPerMosaic = kPatchesPerRow * kPatchesPerRow;

// ---------------------------------------------------------------------------
// 8-bit grayscale BMP

struct GrayImage {
  std::size_t width = 0, height = 0;
  std::vector<std::uint8_t> pixels;  // row-major, row 0 at the top
};

namespace detail {

inline std::uint32_t read_le(const std::vector<unsigned char>& b, std::size_t off, int bytes) {
  std::uint32_t v = 0;
  for (int i = bytes - 1; i >= 0; --i) v = (v << 8) | b.at(off + static_cast<std::size_t>(i));
  return v;
}

inline void put_le(std::vector<unsigned char>& b, std::uint32_t v, int bytes) {
  for (int i = 0; i < bytes; ++i) b.push_back(static_cast<unsigned char>((v >> (8 * i)) & 0xFF));
}

}  // namespace detail

/// Reads an uncompressed 8-bit (palettised) or 24-bit BMP as grayscale.
inline GrayImage read_bmp_gray(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IngestionError("cannot open " + path.string());
  std::vector<unsigned char> b((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  if (b.size() < 54 || b[0] != 'B' || b[1] != 'M') {
    throw IngestionError(path.string() + ": not a BMP file");
  }
  const std::uint32_t offset = detail::read_le(b, 10, 4);
  const std::uint32_t header = detail::read_le(b, 14, 4);
  const auto width = static_cast<std::int32_t>(detail::read_le(b, 18, 4));
  const auto raw_height = static_cast<std::int32_t>(detail::read_le(b, 22, 4));
  const std::uint32_t bpp = detail::read_le(b, 28, 2);
  const std::uint32_t compression = detail::read_le(b, 30, 4);
  if (width <= 0 || raw_height == 0 || compression != 0 || (bpp != 8 && bpp != 24)) {
    throw IngestionError(path.string() + ": unsupported BMP (need uncompressed 8 or 24 bit)");
  }
  const bool bottom_up = raw_height > 0;
  GrayImage img;
  img.width = static_cast<std::size_t>(width);
  img.height = static_cast<std::size_t>(bottom_up ? raw_height : -raw_height);
  std::array<std::uint8_t, 256> palette{};
  if (bpp == 8) {
    std::uint32_t colors = detail::read_le(b, 46, 4);
    if (colors == 0) colors = 256;
    const std::size_t pal = 14 + header;
    for (std::uint32_t i = 0; i < colors && i < 256; ++i) {
      const std::size_t o = pal + 4 * i;
      if (o + 2 >= b.size()) throw IngestionError(path.string() + ": truncated palette");
      palette[i] = static_cast<std::uint8_t>((b[o] + b[o + 1] + b[o + 2] + 1) / 3);
    }
  }
  const std::size_t stride = ((bpp * img.width + 31) / 32) * 4;
  if (offset + stride * img.height > b.size()) {
    throw IngestionError(path.string() + ": truncated pixel data");
  }
  img.pixels.resize(img.width * img.height);
  for (std::size_t y = 0; y < img.height; ++y) {
    const std::size_t src_row = bottom_up ? img.height - 1 - y : y;
    const unsigned char* row = b.data() + offset + src_row * stride;
    for (std::size_t x = 0; x < img.width; ++x) {
      img.pixels[y * img.width + x] =
          bpp == 8 ? palette[row[x]]
                   : static_cast<std::uint8_t>((row[3 * x] + row[3 * x + 1] + row[3 * x + 2] + 1) / 3);
    }
  }
  return img;
}

/// Writes a bottom-up 8-bit BMP with an identity grayscale palette.
inline void write_bmp_gray(const fs::path& path, const GrayImage& img) {
  const std::size_t stride = ((img.width + 3) / 4) * 4;
  const std::uint32_t offset = 14 + 40 + 256 * 4;
  std::vector<unsigned char> b;
  b.reserve(offset + stride * img.height);
  b.push_back('B');
  b.push_back('M');
  detail::put_le(b, static_cast<std::uint32_t>(offset + stride * img.height), 4);
  detail::put_le(b, 0, 4);
  detail::put_le(b, offset, 4);
  detail::put_le(b, 40, 4);
  detail::put_le(b, static_cast<std::uint32_t>(img.width), 4);
  detail::put_le(b, static_cast<std::uint32_t>(img.height), 4);
  detail::put_le(b, 1, 2);
  detail::put_le(b, 8, 2);
  detail::put_le(b, 0, 4);
  detail::put_le(b, static_cast<std::uint32_t>(stride * img.height), 4);
  detail::put_le(b, 2835, 4);
  detail::put_le(b, 2835, 4);
  detail::put_le(b, 256, 4);
  detail::put_le(b, 0, 4);
  for (std::uint32_t i = 0; i < 256; ++i) {
    for (int k = 0; k < 3; ++k) b.push_back(static_cast<unsigned char>(i));
    b.push_back(0);
  }
  for (std::size_t y = img.height; y-- > 0;) {
    const auto* row = img.pixels.data() + y * img.width;
    b.insert(b.end(), row, row + img.width);
    b.insert(b.end(), stride - img.width, 0);
  }
  std::ofstream os(path, std::ios::binary);
  os.write(reinterpret_cast<const char*>(b.data()), static_cast<std::streamsize>(b.size()));
  if (!os) throw IngestionError("failed writing " + path.string());
}

// ---------------------------------------------------------------------------
// Patch sets

/// 64x64 8-bit patches with the 3-D point id (class) of each.
struct PatchSet {
  std::vector<std::uint8_t> pixels;  // count x 64 x 64
  std::vector<std::int64_t> class_ids;
  std::string source;

  std::size_t size() const noexcept { return class_ids.size(); }
  std::span<const std::uint8_t> patch(std::size_t i) const {
    return {pixels.data() + i * kPatchSide * kPatchSide, kPatchSide * kPatchSide};
  }
};

inline std::string mosaic_name(std::size_t index) {
  std::ostringstream os;
  os << "patches" << std::setw(4) << std::setfill('0') << index << ".bmp";
  return os.str();
}

inline fs::path resolve_set_dir(const fs::path& directory, const std::string& set_name) {
  if (!set_name.empty() && fs::is_directory(directory / set_name)) return directory / set_name;
  return directory;
}

/// Loads a UBC PhotoTour set: info.txt gives one "pointID unused" line per
/// patch; patchesNNNN.bmp mosaics hold 16x16 patches each in row-major order.
inline PatchSet load_ubc(const fs::path& directory, const std::string& set_name) {
  const fs::path dir = resolve_set_dir(directory, set_name);
  const fs::path info = dir / "info.txt";
  std::ifstream is(info);
  if (!is) throw IngestionError("missing index file " + info.string());
  PatchSet set;
  set.source = set_name;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    std::istringstream ls(line);
    std::int64_t id = 0;
    if (!(ls >> id)) {
      if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
      throw IngestionError(info.string() + ":" + std::to_string(line_no) + ": malformed line");
    }
    set.class_ids.push_back(id);
  }
  const std::size_t count = set.class_ids.size();
  set.pixels.resize(count * kPatchSide * kPatchSide);
  for (std::size_t m = 0; m * kPatchesPerMosaic < count; ++m) {
    const fs::path file = dir / mosaic_name(m);
    if (!fs::exists(file)) {
      throw IngestionError(info.string() + " lists " + std::to_string(count) +
                           " patches but mosaic " + file.string() + " is missing");
    }
    const GrayImage img = read_bmp_gray(file);
    if (img.width != kMosaicSide || img.height != kMosaicSide) {
      throw IngestionError(file.string() + ": expected a 1024x1024 mosaic");
    }
    for (std::size_t j = 0; j < kPatchesPerMosaic && m * kPatchesPerMosaic + j < count; ++j) {
      const std::size_t r = j / kPatchesPerRow, c = j % kPatchesPerRow;
      std::uint8_t* dst = set.pixels.data() + (m * kPatchesPerMosaic + j) * kPatchSide * kPatchSide;
      for (std::size_t y = 0; y < kPatchSide; ++y) {
        const auto* src = img.pixels.data() + (r * kPatchSide + y) * kMosaicSide + c * kPatchSide;
        std::copy(src, src + kPatchSide, dst + y * kPatchSide);
      }
    }
  }
  return set;
}

/// Writes a patch set in the UBC layout (mosaics + info.txt).
inline void save_ubc(const fs::path& dir, const PatchSet& set) {
  fs::create_directories(dir);
  for (std::size_t m = 0; m * kPatchesPerMosaic < set.size(); ++m) {
    GrayImage img{kMosaicSide, kMosaicSide, std::vector<std::uint8_t>(kMosaicSide * kMosaicSide, 0)};
    for (std::size_t j = 0; j < kPatchesPerMosaic && m * kPatchesPerMosaic + j < set.size(); ++j) {
      const std::size_t r = j / kPatchesPerRow, c = j % kPatchesPerRow;
      const auto p = set.patch(m * kPatchesPerMosaic + j);
      for (std::size_t y = 0; y < kPatchSide; ++y) {
        std::copy(p.begin() + static_cast<std::ptrdiff_t>(y * kPatchSide),
                  p.begin() + static_cast<std::ptrdiff_t>((y + 1) * kPatchSide),
                  img.pixels.begin() +
                      static_cast<std::ptrdiff_t>((r * kPatchSide + y) * kMosaicSide + c * kPatchSide));
      }
    }
    write_bmp_gray(dir / mosaic_name(m), img);
  }
  std::ofstream os(dir / "info.txt");
  for (auto id : set.class_ids) os << id << " 0\n";
  if (!os) throw IngestionError("failed writing " + (dir / "info.txt").string());
}

// ---------------------------------------------------------------------------
// Pairs and triplets

/// Labelled pairs of patch indices.
struct PairList {
  std::vector<std::size_t> first, second;
  std::vector<bool> matching;

  std::size_t size() const noexcept { return matching.size(); }
  void add(std::size_t a, std::size_t b, bool match) {
    first.push_back(a);
    second.push_back(b);
    matching.push_back(match);
  }
};

/// Parses a UBC match file: whitespace-separated
/// "patchID1 pointID1 unused patchID2 pointID2 unused unused" per line.
inline PairList load_eval_pairs(const fs::path& directory, const std::string& pair_file) {
  const fs::path path = fs::is_regular_file(pair_file) ? fs::path(pair_file) : directory / pair_file;
  std::ifstream is(path);
  if (!is) throw IngestionError("cannot open pair file " + path.string());
  PairList pairs;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    std::istringstream ls(line);
    std::int64_t v[7];
    for (auto& x : v) {
      if (!(ls >> x)) {
        throw IngestionError(path.string() + ":" + std::to_string(line_no) +
                             ": expected 7 integer columns");
      }
    }
    std::string extra;
    if (ls >> extra || v[0] < 0 || v[3] < 0) {
      throw IngestionError(path.string() + ":" + std::to_string(line_no) + ": malformed line");
    }
    pairs.add(static_cast<std::size_t>(v[0]), static_cast<std::size_t>(v[3]), v[1] == v[4]);
  }
  return pairs;
}

inline void save_pairs(const fs::path& path, const PairList& pairs, const PatchSet& set) {
  std::ofstream os(path);
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    os << pairs.first[i] << ' ' << set.class_ids[pairs.first[i]] << " 0 " << pairs.second[i]
       << ' ' << set.class_ids[pairs.second[i]] << " 0 0\n";
  }
  if (!os) throw IngestionError("failed writing " + path.string());
}

struct Triplet {
  std::size_t anchor = 0, positive = 0, negative = 0;
  friend bool operator==(const Triplet&, const Triplet&) = default;
};

namespace detail {

inline std::map<std::int64_t, std::vector<std::size_t>> group_by_class(
    std::span<const std::int64_t> class_ids) {
  std::map<std::int64_t, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < class_ids.size(); ++i) groups[class_ids[i]].push_back(i);
  return groups;
}

inline std::size_t uniform_index(std::mt19937_64& rng, std::size_t n) {
  return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
}

}  // namespace detail

/// Draws `count` triplets: a class with at least two patches uniformly, two
/// distinct patches of it uniformly, then a different class uniformly and one
/// of its patches uniformly.
inline std::vector<Triplet> sample_triplets(std::span<const std::int64_t> class_ids,
                                            std::size_t count, std::uint64_t seed) {
  if (count == 0) return {};
  const auto groups = detail::group_by_class(class_ids);
  std::vector<const std::vector<std::size_t>*> all, eligible;
  for (const auto& [id, members] : groups) {
    all.push_back(&members);
    if (members.size() >= 2) eligible.push_back(&members);
  }
  if (eligible.empty()) throw UsageError("sample_triplets: no class has two or more patches");
  if (all.size() < 2) throw UsageError("sample_triplets: need at least two classes");
  std::mt19937_64 rng(seed);
  std::vector<Triplet> out;
  out.reserve(count);
  while (out.size() < count) {
    const auto& cls = *eligible[detail::uniform_index(rng, eligible.size())];
    const std::size_t i = detail::uniform_index(rng, cls.size());
    std::size_t j = detail::uniform_index(rng, cls.size() - 1);
    if (j >= i) ++j;
    std::size_t neg_cls = detail::uniform_index(rng, all.size() - 1);
    // skip the anchor's own class in the ordered class list
    const std::int64_t anchor_id = class_ids[cls[0]];
    std::size_t own = 0;
    for (std::size_t k = 0; k < all.size(); ++k) {
      if (class_ids[(*all[k])[0]] == anchor_id) own = k;
    }
    if (neg_cls >= own) ++neg_cls;
    const auto& neg = *all[neg_cls];
    out.push_back({cls[i], cls[j], neg[detail::uniform_index(rng, neg.size())]});
  }
  return out;
}

/// Triplets built from the matching pairs of a protocol pair list: a matching
/// pair drawn uniformly plus a uniformly drawn patch of another class.
inline std::vector<Triplet> sample_triplets_from_pairs(std::span<const std::int64_t> class_ids,
                                                       const PairList& pairs, std::size_t count,
                                                       std::uint64_t seed) {
  if (count == 0) return {};
  std::vector<std::size_t> matches;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    if (pairs.matching[i]) matches.push_back(i);
  }
  if (matches.empty()) throw UsageError("sample_triplets_from_pairs: no matching pairs");
  const auto groups = detail::group_by_class(class_ids);
  if (groups.size() < 2) throw UsageError("sample_triplets_from_pairs: need two classes");
  std::mt19937_64 rng(seed);
  std::vector<Triplet> out;
  out.reserve(count);
  while (out.size() < count) {
    const std::size_t m = matches[detail::uniform_index(rng, matches.size())];
    const std::size_t a = pairs.first[m], p = pairs.second[m];
    if (a >= class_ids.size() || p >= class_ids.size()) {
      throw IngestionError("pair list refers to patch " + std::to_string(std::max(a, p)) +
                           " beyond the set of " + std::to_string(class_ids.size()));
    }
    std::size_t n = detail::uniform_index(rng, class_ids.size());
    while (class_ids[n] == class_ids[a]) n = detail::uniform_index(rng, class_ids.size());
    out.push_back({a, p, n});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Tensor batches

template <class T>
struct TripletBatch {
  Tensor<T> anchors, positives, negatives;  // N x C x H x W each
  std::vector<Triplet> provenance;
  std::size_t size() const noexcept { return provenance.size(); }
};

template <class T>
struct PairBatch {
  Tensor<T> left, right;  // N x C x H x W each
  std::vector<bool> labels;
  std::size_t size() const noexcept { return labels.size(); }
};

/// Preprocessed items (patches or toy points) plus the triplets drawn from
/// them. Batches optionally apply one random augmentation per triplet, the
/// same transform to all three members.
template <class T>
class TripletDataset {
 public:
  TripletDataset(Tensor<T> items, std::vector<Triplet> triplets, bool augment)
      : items_(std::move(items)), triplets_(std::move(triplets)), augment_(augment) {
    if (items_.rank() != 4) throw DimensionError("dataset items must be N x C x H x W");
    if (augment_ && items_.dim(2) != items_.dim(3)) {
      throw DimensionError("augmentation needs square items");
    }
    for (const auto& t : triplets_) {
      if (std::max({t.anchor, t.positive, t.negative}) >= items_.dim(0)) {
        throw UsageError("triplet refers to an item beyond the dataset");
      }
    }
  }

  std::size_t size() const noexcept { return triplets_.size(); }
  const Tensor<T>& items() const noexcept { return items_; }
  const std::vector<Triplet>& triplets() const noexcept { return triplets_; }

  TripletBatch<T> batch(std::span<const std::size_t> indices, std::mt19937_64& rng) const {
    Shape shape = items_.shape();
    shape[0] = indices.size();
    TripletBatch<T> b{Tensor<T>(shape), Tensor<T>(shape), Tensor<T>(shape), {}};
    const std::size_t c = items_.dim(1), side = items_.dim(2);
    const std::size_t plane = items_.dim(2) * items_.dim(3), item = c * plane;
    for (std::size_t k = 0; k < indices.size(); ++k) {
      const Triplet& t = triplets_.at(indices[k]);
      b.provenance.push_back(t);
      const int aug = augment_ ? static_cast<int>(detail::uniform_index(rng, kNumAugmentations)) : 0;
      const std::size_t src[3] = {t.anchor, t.positive, t.negative};
      Tensor<T>* dst[3] = {&b.anchors, &b.positives, &b.negatives};
      for (int m = 0; m < 3; ++m) {
        const T* from = items_.data() + src[m] * item;
        T* to = dst[m]->data() + k * item;
        if (aug == 0) {
          std::copy(from, from + item, to);
          continue;
        }
        for (std::size_t ch = 0; ch < c; ++ch) {
          for (std::size_t r = 0; r < side; ++r) {
            for (std::size_t q = 0; q < side; ++q) {
              to[ch * plane + r * side + q] = from[ch * plane + augment_source(aug, side, r, q)];
            }
          }
        }
      }
    }
    return b;
  }

 private:
  Tensor<T> items_;
  std::vector<Triplet> triplets_;
  bool augment_;
};

/// All patches of a set, preprocessed, as an N x 1 x 64 x 64 tensor.
template <class T>
Tensor<T> patches_to_tensor(const PatchSet& set) {
  Tensor<T> out({set.size(), 1, kPatchSide, kPatchSide});
  for (std::size_t i = 0; i < set.pixels.size(); ++i) out[i] = preprocess_value<T>(set.pixels[i]);
  return out;
}

template <class T>
PairBatch<T> make_pair_batch(const PatchSet& set, const PairList& pairs) {
  PairBatch<T> b{Tensor<T>({pairs.size(), 1, kPatchSide, kPatchSide}),
                 Tensor<T>({pairs.size(), 1, kPatchSide, kPatchSide}), pairs.matching};
  const std::size_t area = kPatchSide * kPatchSide;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    if (pairs.first[i] >= set.size() || pairs.second[i] >= set.size()) {
      throw IngestionError("pair " + std::to_string(i) + " refers to a patch beyond the set of " +
                           std::to_string(set.size()));
    }
    const auto l = set.patch(pairs.first[i]), r = set.patch(pairs.second[i]);
    for (std::size_t p = 0; p < area; ++p) {
      b.left[i * area + p] = preprocess_value<T>(l[p]);
      b.right[i * area + p] = preprocess_value<T>(r[p]);
    }
  }
  return b;
}

// ---------------------------------------------------------------------------
// Toy problem

struct ToyOptions {
  std::array<double, 2> mean0{-1.0, 0.0};
  std::array<double, 2> mean1{1.0, 0.0};
  double sigma = 0.6;
  std::size_t per_class = 40;
  double flip_fraction = 0.05;
};

struct ToySet {
  std::vector<std::array<double, 2>> points;
  std::vector<int> labels;       // after flipping
  std::vector<int> true_labels;  // generating class
  std::vector<std::size_t> flipped_indices;
  ToyOptions options;

  std::size_t size() const noexcept { return points.size(); }
};

/// Two isotropic Gaussian clouds; ceil(flip_fraction * N) labels flipped.
inline ToySet make_toy_set(std::uint64_t seed, const ToyOptions& opts = {}) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> noise(0.0, opts.sigma);
  ToySet set;
  set.options = opts;
  for (int cls = 0; cls < 2; ++cls) {
    const auto& m = cls == 0 ? opts.mean0 : opts.mean1;
    for (std::size_t i = 0; i < opts.per_class; ++i) {
      const double x = m[0] + noise(rng);
      const double y = m[1] + noise(rng);
      set.points.push_back({x, y});
      set.true_labels.push_back(cls);
    }
  }
  set.labels = set.true_labels;
  const std::size_t n = set.points.size();
  const auto flips = static_cast<std::size_t>(std::ceil(opts.flip_fraction * static_cast<double>(n) - 1e-9));
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  for (std::size_t i = 0; i < flips; ++i) {
    std::swap(order[i], order[i + detail::uniform_index(rng, n - i)]);
  }
  set.flipped_indices.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(flips));
  std::sort(set.flipped_indices.begin(), set.flipped_indices.end());
  for (auto i : set.flipped_indices) set.labels[i] = 1 - set.labels[i];
  return set;
}

/// Toy points as an N x 2 x 1 x 1 tensor.
template <class T>
Tensor<T> toy_points_tensor(const std::vector<std::array<double, 2>>& points) {
  Tensor<T> out({points.size(), 2, 1, 1});
  for (std::size_t i = 0; i < points.size(); ++i) {
    out[2 * i] = static_cast<T>(points[i][0]);
    out[2 * i + 1] = static_cast<T>(points[i][1]);
  }
  return out;
}

inline std::string toy_set_csv(const ToySet& set) {
  std::ostringstream os;
  os << std::setprecision(17) << "x,y,label,flipped\n";
  for (std::size_t i = 0; i < set.size(); ++i) {
    const bool flipped = std::binary_search(set.flipped_indices.begin(), set.flipped_indices.end(), i);
    os << set.points[i][0] << ',' << set.points[i][1] << ',' << set.labels[i] << ','
       << (flipped ? 1 : 0) << '\n';
  }
  return os.str();
}

// ---------------------------------------------------------------------------
// Synthetic patch fixture

struct SyntheticOptions {
  std::size_t classes = 100;
  std::size_t per_class = 4;
  int max_shift = 4;          // pixels, per axis
  double gain_spread = 0.35;  // contrast factor drawn from 1 +- spread
  double offset_spread = 30;  // brightness offset in gray levels
  double noise_sigma = 10;
  std::int64_t first_class_id = 0;
};

/// Patches of random smooth textures: each class is one texture, and each
/// view crops it at a small random offset under a random contrast/brightness
/// change plus pixel noise.
inline PatchSet make_synthetic_patches(std::uint64_t seed, const SyntheticOptions& opts = {}) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> gauss(0.0, 1.0);
  const int margin = opts.max_shift;
  const std::size_t canvas = kPatchSide + 2 * static_cast<std::size_t>(margin);
  PatchSet set;
  set.source = "synthetic";
  set.pixels.reserve(opts.classes * opts.per_class * kPatchSide * kPatchSide);
  std::vector<double> tex(canvas * canvas);
  for (std::size_t c = 0; c < opts.classes; ++c) {
    std::fill(tex.begin(), tex.end(), 0.0);
    // blobs
    for (int b = 0; b < 8; ++b) {
      const double cx = unit(rng) * static_cast<double>(canvas);
      const double cy = unit(rng) * static_cast<double>(canvas);
      const double s = 4.0 + 10.0 * unit(rng);
      const double amp = 70.0 * gauss(rng);
      for (std::size_t y = 0; y < canvas; ++y) {
        for (std::size_t x = 0; x < canvas; ++x) {
          const double dx = static_cast<double>(x) - cx, dy = static_cast<double>(y) - cy;
          tex[y * canvas + x] += amp * std::exp(-(dx * dx + dy * dy) / (2 * s * s));
        }
      }
    }
    // oriented gratings
    for (int g = 0; g < 2; ++g) {
      const double theta = unit(rng) * 3.141592653589793;
      const double freq = 0.08 + 0.25 * unit(rng);
      const double phase = unit(rng) * 6.283185307179586;
      const double amp = 25.0 * unit(rng);
      for (std::size_t y = 0; y < canvas; ++y) {
        for (std::size_t x = 0; x < canvas; ++x) {
          const double u = std::cos(theta) * static_cast<double>(x) + std::sin(theta) * static_cast<double>(y);
          tex[y * canvas + x] += amp * std::sin(freq * u + phase);
        }
      }
    }
    for (std::size_t v = 0; v < opts.per_class; ++v) {
      const int sx = static_cast<int>(detail::uniform_index(rng, 2 * margin + 1));
      const int sy = static_cast<int>(detail::uniform_index(rng, 2 * margin + 1));
      const double gain = 1.0 + opts.gain_spread * (2 * unit(rng) - 1);
      const double offset = opts.offset_spread * (2 * unit(rng) - 1);
      for (std::size_t y = 0; y < kPatchSide; ++y) {
        for (std::size_t x = 0; x < kPatchSide; ++x) {
          const double t = tex[(y + static_cast<std::size_t>(sy)) * canvas + x + static_cast<std::size_t>(sx)];
          const double v2 = 128.0 + gain * t + offset + opts.noise_sigma * gauss(rng);
          set.pixels.push_back(static_cast<std::uint8_t>(std::clamp(std::lround(v2), 0L, 255L)));
        }
      }
      set.class_ids.push_back(opts.first_class_id + static_cast<std::int64_t>(c));
    }
  }
  return set;
}

/// Balanced pairs over a patch set: `count / 2` matching pairs (two distinct
/// views of one class) and the rest non-matching (views of two classes).
inline PairList make_balanced_pairs(const PatchSet& set, std::size_t count, std::uint64_t seed) {
  const auto groups = detail::group_by_class(set.class_ids);
  std::vector<const std::vector<std::size_t>*> all, eligible;
  for (const auto& [id, members] : groups) {
    all.push_back(&members);
    if (members.size() >= 2) eligible.push_back(&members);
  }
  if (eligible.empty() || all.size() < 2) {
    throw UsageError("make_balanced_pairs: need a class with two patches and two classes");
  }
  std::mt19937_64 rng(seed);
  PairList pairs;
  for (std::size_t k = 0; k < count; ++k) {
    if (k % 2 == 0) {
      const auto& cls = *eligible[detail::uniform_index(rng, eligible.size())];
      const std::size_t i = detail::uniform_index(rng, cls.size());
      std::size_t j = detail::uniform_index(rng, cls.size() - 1);
      if (j >= i) ++j;
      pairs.add(cls[i], cls[j], true);
    } else {
      const std::size_t a = detail::uniform_index(rng, all.size());
      std::size_t b = detail::uniform_index(rng, all.size() - 1);
      if (b >= a) ++b;
      pairs.add((*all[a])[detail::uniform_index(rng, all[a]->size())],
                (*all[b])[detail::uniform_index(rng, all[b]->size())], false);
    }
  }
  return pairs;
}

}  // namespace gloss

#endif  // GLOSS_DATA_HPP
