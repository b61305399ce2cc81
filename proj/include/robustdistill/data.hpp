#pragma once

#include <fstream>
#include <numeric>
#include <string>
#include <vector>

#include "robustdistill/rng.hpp"
#include "robustdistill/tensor.hpp"

namespace robustdistill::data {

struct Dataset {
  Tensor<float> images;  // (N, C, H, W), values in [0,1]
  std::vector<int> labels;
  int num_classes = 0;
  std::string split;

  int size() const { return images.shape.empty() ? 0 : images.dim(0); }

  Shape example_shape() const {
    if (images.shape.empty()) return {};
    return Shape(images.shape.begin() + 1, images.shape.end());
  }

  void validate() const {
    if (size() != static_cast<int>(labels.size()))
      throw FormatError(cat("image count ", size(), " != label count ", labels.size()));
    for (int y : labels)
      if (y < 0 || y >= num_classes)
        throw FormatError(cat("label ", y, " out of range [0,", num_classes, ")"));
    for (float x : images.v)
      if (!(x >= 0.0f && x <= 1.0f)) throw FormatError(cat("pixel value ", x, " outside [0,1]"));
  }

  Dataset subset(const std::vector<int>& idx) const {
    Dataset out;
    out.num_classes = num_classes;
    out.split = split;
    Shape ex = example_shape();
    size_t stride = numel_of(ex);
    Shape s = images.shape;
    s[0] = static_cast<int>(idx.size());
    out.images = Tensor<float>(s);
    out.labels.reserve(idx.size());
    for (size_t i = 0; i < idx.size(); ++i) {
      std::copy_n(images.v.begin() + static_cast<size_t>(idx[i]) * stride, stride,
                  out.images.v.begin() + i * stride);
      out.labels.push_back(labels[static_cast<size_t>(idx[i])]);
    }
    return out;
  }

  // Rows [lo, hi) as a batch tensor plus labels.
  std::pair<Tensor<float>, std::vector<int>> batch(const std::vector<int>& order, int lo,
                                                   int hi) const {
    Shape ex = example_shape();
    size_t stride = numel_of(ex);
    Shape s = images.shape;
    s[0] = hi - lo;
    Tensor<float> b(s);
    std::vector<int> y;
    y.reserve(static_cast<size_t>(hi - lo));
    for (int i = lo; i < hi; ++i) {
      int src = order[static_cast<size_t>(i)];
      std::copy_n(images.v.begin() + static_cast<size_t>(src) * stride, stride,
                  b.v.begin() + static_cast<size_t>(i - lo) * stride);
      y.push_back(labels[static_cast<size_t>(src)]);
    }
    return {std::move(b), std::move(y)};
  }
};

// ---------------------------------------------------------------------------
// idx files (big-endian, magic-tagged): 0x00000803 image tensors of unsigned
// bytes, 0x00000801 label vectors.
// ---------------------------------------------------------------------------

namespace detail {

inline uint32_t read_be32(std::istream& is, const std::string& what) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4))
    throw FormatError(cat("truncated idx file while reading ", what));
  return (static_cast<uint32_t>(b[0]) << 24) | (static_cast<uint32_t>(b[1]) << 16) |
         (static_cast<uint32_t>(b[2]) << 8) | static_cast<uint32_t>(b[3]);
}

inline void write_be32(std::ostream& os, uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v >> 24), static_cast<unsigned char>(v >> 16),
                        static_cast<unsigned char>(v >> 8), static_cast<unsigned char>(v)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

}  // namespace detail

inline Dataset load_idx(const std::string& images_path, const std::string& labels_path) {
  std::ifstream im(images_path, std::ios::binary);
  if (!im) throw FormatError(cat("cannot open ", images_path));
  uint32_t magic = detail::read_be32(im, "image magic");
  if (magic != 0x00000803u)
    throw FormatError(cat("bad idx image magic 0x", hex64(magic).substr(8), " in ", images_path));
  uint32_t n = detail::read_be32(im, "image count");
  uint32_t rows = detail::read_be32(im, "rows");
  uint32_t cols = detail::read_be32(im, "cols");
  std::vector<unsigned char> bytes(static_cast<size_t>(n) * rows * cols);
  if (!im.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size())))
    throw FormatError(cat("truncated idx image payload in ", images_path));

  std::ifstream lb(labels_path, std::ios::binary);
  if (!lb) throw FormatError(cat("cannot open ", labels_path));
  uint32_t lmagic = detail::read_be32(lb, "label magic");
  if (lmagic != 0x00000801u)
    throw FormatError(cat("bad idx label magic 0x", hex64(lmagic).substr(8), " in ", labels_path));
  uint32_t ln = detail::read_be32(lb, "label count");
  if (ln != n) throw FormatError(cat("idx image count ", n, " != label count ", ln));
  std::vector<unsigned char> lbytes(ln);
  if (ln && !lb.read(reinterpret_cast<char*>(lbytes.data()), static_cast<std::streamsize>(ln)))
    throw FormatError(cat("truncated idx label payload in ", labels_path));

  Dataset ds;
  ds.images = Tensor<float>({static_cast<int>(n), 1, static_cast<int>(rows),
                             static_cast<int>(cols)});
  for (size_t i = 0; i < bytes.size(); ++i)
    ds.images.v[i] = static_cast<float>(bytes[i]) / 255.0f;
  ds.labels.assign(lbytes.begin(), lbytes.end());
  int maxl = 0;
  for (int y : ds.labels) maxl = std::max(maxl, y);
  ds.num_classes = std::max(10, maxl + 1);
  ds.split = "idx";
  return ds;
}

// Writes a (N,1,H,W) float tensor in [0,1] as idx ubyte files; values are
// rounded onto the byte grid, so a reload reproduces the file exactly.
inline void write_idx(const Tensor<float>& images, const std::vector<int>& labels,
                      const std::string& images_path, const std::string& labels_path) {
  if (images.rank() != 4 || images.dim(1) != 1)
    throw FormatError(cat("idx writer expects (N,1,H,W) images, got ", shape_str(images.shape)));
  std::ofstream im(images_path, std::ios::binary);
  if (!im) throw FormatError(cat("cannot open ", images_path, " for writing"));
  detail::write_be32(im, 0x00000803u);
  detail::write_be32(im, static_cast<uint32_t>(images.dim(0)));
  detail::write_be32(im, static_cast<uint32_t>(images.dim(2)));
  detail::write_be32(im, static_cast<uint32_t>(images.dim(3)));
  for (float f : images.v) {
    float clamped = std::min(1.0f, std::max(0.0f, f));
    auto byte = static_cast<unsigned char>(std::lround(clamped * 255.0f));
    im.write(reinterpret_cast<const char*>(&byte), 1);
  }
  std::ofstream lb(labels_path, std::ios::binary);
  if (!lb) throw FormatError(cat("cannot open ", labels_path, " for writing"));
  detail::write_be32(lb, 0x00000801u);
  detail::write_be32(lb, static_cast<uint32_t>(labels.size()));
  for (int y : labels) {
    auto byte = static_cast<unsigned char>(y);
    lb.write(reinterpret_cast<const char*>(&byte), 1);
  }
}

// ---------------------------------------------------------------------------
// CIFAR-10 binary batches: 3073-byte records, 1 label byte then 3072 pixel
// bytes as channel-major 32x32 R,G,B planes.
// ---------------------------------------------------------------------------

inline Dataset load_cifar_binary(const std::vector<std::string>& paths) {
  constexpr size_t kRecord = 3073;
  std::vector<unsigned char> all;
  for (const std::string& path : paths) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw FormatError(cat("cannot open ", path));
    std::vector<unsigned char> buf((std::istreambuf_iterator<char>(is)),
                                   std::istreambuf_iterator<char>());
    if (buf.size() % kRecord != 0)
      throw FormatError(cat(path, " length ", buf.size(), " is not a multiple of 3073; ",
                            "truncated record at byte offset ", (buf.size() / kRecord) * kRecord));
    all.insert(all.end(), buf.begin(), buf.end());
  }
  size_t n = all.size() / kRecord;
  Dataset ds;
  ds.num_classes = 10;
  ds.split = "cifar";
  if (n == 0) return ds;  // empty batch files are a valid empty dataset
  ds.images = Tensor<float>({static_cast<int>(n), 3, 32, 32});
  ds.labels.resize(n);
  for (size_t r = 0; r < n; ++r) {
    const unsigned char* rec = all.data() + r * kRecord;
    ds.labels[r] = rec[0];
    if (ds.labels[r] > 9) throw FormatError(cat("CIFAR label ", ds.labels[r], " out of range"));
    for (size_t i = 0; i < 3072; ++i)
      ds.images.v[r * 3072 + i] = static_cast<float>(rec[1 + i]) / 255.0f;
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Synthetic desk-scale sets. Class-conditional spatial patterns rendered into
// small images with seeded noise; `margin` scales the pattern amplitude and
// `noise` the per-pixel perturbation, which together control separability.
// ---------------------------------------------------------------------------

enum class SyntheticKind { gaussians, rings };

struct SyntheticConfig {
  SyntheticKind kind = SyntheticKind::gaussians;
  int n = 4000;
  int num_classes = 5;
  int image_size = 8;
  double margin = 0.35;
  double noise = 0.2;
  // Amplitude of a second dense per-class pattern. Keep it below the attack
  // radius: it is then a highly predictive but non-robust cue that natural
  // training latches onto and robust training must ignore.
  double shortcut = 0.08;
  // Extra noise injected along the class-template directions themselves.
  // It leaves the shortcut patterns clean, so the templates are the hard,
  // robust signal and the shortcuts the easy, fragile one.
  double structured_noise = 0.12;
  // Fraction of examples whose label is flipped to a random other class
  // (seeded, per example). Training splits typically use a noisy tenth;
  // evaluation splits keep it at zero.
  double label_noise = 0.0;
  uint64_t seed = 0;
  // Class templates depend on `seed` only; example noise streams start at
  // this offset. A test split uses the same seed (same task) with an offset
  // past the train split so the draws are disjoint.
  uint64_t example_offset = 0;
};

namespace detail {

// Smooth per-class template, normalized to zero mean and unit max-abs so
// `margin` is in pixel units. Gaussian-kind templates are random mixtures
// over one shared pool of cosine waves: classes then share directions and
// genuinely overlap, which is what makes soft labels informative.
inline std::vector<float> class_template(int size, int cls, int num_classes, uint64_t seed,
                                         SyntheticKind kind) {
  std::vector<float> t(static_cast<size_t>(size) * size, 0.0f);
  if (kind == SyntheticKind::gaussians) {
    constexpr int kPoolSize = 5;
    Rng mix_rng(seed, 0x6d6978 + static_cast<uint64_t>(cls));
    for (int wave = 0; wave < kPoolSize; ++wave) {
      Rng pool_rng(seed, 0x7465 + static_cast<uint64_t>(wave));
      double fx = 0.5 + pool_rng.uniform01() * 1.5;
      double fy = 0.5 + pool_rng.uniform01() * 1.5;
      double px = pool_rng.uniform01() * 6.283185307179586;
      double py = pool_rng.uniform01() * 6.283185307179586;
      double amp = mix_rng.gaussian();
      for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x)
          t[static_cast<size_t>(y) * size + x] += static_cast<float>(
              amp * std::cos(fx * 6.283185307179586 * x / size + px) *
              std::cos(fy * 6.283185307179586 * y / size + py));
    }
  } else {
    // Concentric rings, one radius per class.
    double cx = (size - 1) / 2.0;
    double r0 = (0.2 + 0.75 * cls / std::max(1, num_classes)) * cx;
    for (int y = 0; y < size; ++y)
      for (int x = 0; x < size; ++x) {
        double r = std::sqrt((x - cx) * (x - cx) + (y - cx) * (y - cx));
        t[static_cast<size_t>(y) * size + x] =
            static_cast<float>(std::exp(-(r - r0) * (r - r0) / (0.35 * cx)));
      }
  }
  double mean = 0;
  for (float v : t) mean += v;
  mean /= static_cast<double>(t.size());
  float maxabs = 1e-6f;
  for (auto& v : t) {
    v -= static_cast<float>(mean);
    maxabs = std::max(maxabs, std::abs(v));
  }
  for (auto& v : t) v /= maxabs;
  return t;
}

}  // namespace detail

inline Dataset gen_synthetic(const SyntheticConfig& cfg) {
  if (cfg.n < cfg.num_classes)
    throw ParamError(cat("synthetic set needs n >= classes, got n=", cfg.n, " classes=",
                         cfg.num_classes));
  int size = cfg.image_size;
  std::vector<std::vector<float>> templates, shortcuts;
  templates.reserve(static_cast<size_t>(cfg.num_classes));
  for (int c = 0; c < cfg.num_classes; ++c) {
    templates.push_back(detail::class_template(size, c, cfg.num_classes, cfg.seed, cfg.kind));
    shortcuts.push_back(detail::class_template(size, c, cfg.num_classes,
                                               mix_seed(cfg.seed, 0x73686f7274ull), cfg.kind));
  }

  Dataset ds;
  ds.num_classes = cfg.num_classes;
  ds.split = "synthetic";
  ds.images = Tensor<float>({cfg.n, 1, size, size});
  ds.labels.resize(static_cast<size_t>(cfg.n));
  size_t px = static_cast<size_t>(size) * size;
  std::vector<double> wobble(static_cast<size_t>(cfg.num_classes));
  for (int i = 0; i < cfg.n; ++i) {
    int cls = i % cfg.num_classes;  // balanced within +-1 by construction
    Rng rng(cfg.seed, 0x64617461ull + cfg.example_offset + static_cast<uint64_t>(i));
    const auto& t = templates[static_cast<size_t>(cls)];
    const auto& u = shortcuts[static_cast<size_t>(cls)];
    for (auto& w : wobble)
      w = cfg.structured_noise > 0.0 ? cfg.structured_noise * rng.gaussian() : 0.0;
    float* out = ds.images.v.data() + static_cast<size_t>(i) * px;
    for (size_t p = 0; p < px; ++p) {
      double v = 0.5 + cfg.margin * t[p] + cfg.shortcut * u[p] + cfg.noise * rng.gaussian();
      for (int k = 0; k < cfg.num_classes; ++k)
        v += wobble[static_cast<size_t>(k)] * templates[static_cast<size_t>(k)][p];
      out[p] = static_cast<float>(std::min(1.0, std::max(0.0, v)));
    }
    int label = cls;
    if (cfg.label_noise > 0.0 && rng.uniform01() < cfg.label_noise) {
      int other = static_cast<int>(rng.below(static_cast<uint32_t>(cfg.num_classes - 1)));
      label = other >= cls ? other + 1 : other;
    }
    ds.labels[static_cast<size_t>(i)] = label;
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Augmentation: zero-pad, random crop back to the original size, horizontal
// flip. The RNG is consumed serially, one (crop, flip) draw pair per example.
// ---------------------------------------------------------------------------

struct AugmentConfig {
  int pad = 0;
  bool crop = true;
  double horizontal_flip_prob = 0.0;
};

inline Tensor<float> augment(const Tensor<float>& batch, const AugmentConfig& cfg, Rng& rng) {
  if (cfg.pad < 0) throw ParamError(cat("augment pad must be >= 0, got ", cfg.pad));
  if (cfg.horizontal_flip_prob < 0.0 || cfg.horizontal_flip_prob > 1.0)
    throw ParamError(cat("flip probability ", cfg.horizontal_flip_prob, " outside [0,1]"));
  if (batch.rank() != 4) throw ShapeError(cat("augment expects (B,C,H,W), got ",
                                              shape_str(batch.shape)));
  if (cfg.pad == 0 && cfg.horizontal_flip_prob == 0.0) return batch;
  int b = batch.dim(0), c = batch.dim(1), h = batch.dim(2), w = batch.dim(3);
  Tensor<float> out(batch.shape);
  for (int e = 0; e < b; ++e) {
    int oy = 0, ox = 0;
    if (cfg.pad > 0 && cfg.crop) {
      oy = static_cast<int>(rng.below(static_cast<uint32_t>(2 * cfg.pad + 1)));
      ox = static_cast<int>(rng.below(static_cast<uint32_t>(2 * cfg.pad + 1)));
    }
    bool flip = cfg.horizontal_flip_prob > 0.0 && rng.uniform01() < cfg.horizontal_flip_prob;
    for (int ch = 0; ch < c; ++ch) {
      const float* src = batch.v.data() + ((static_cast<size_t>(e) * c + ch) * h) * w;
      float* dst = out.v.data() + ((static_cast<size_t>(e) * c + ch) * h) * w;
      for (int y = 0; y < h; ++y) {
        int sy = y + oy - cfg.pad;
        for (int x = 0; x < w; ++x) {
          int sx = x + ox - cfg.pad;
          float val = 0.0f;
          if (sy >= 0 && sy < h && sx >= 0 && sx < w) {
            int rx = flip ? (w - 1 - sx) : sx;
            val = src[static_cast<size_t>(sy) * w + rx];
          }
          dst[static_cast<size_t>(y) * w + x] = val;
        }
      }
    }
  }
  return out;
}

// Seeded epoch shuffle: a permutation of [0, n).
inline std::vector<int> shuffled_order(int n, uint64_t seed) {
  std::vector<int> order(static_cast<size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  Rng rng(seed, 0x7368756666ull);
  rng.shuffle(order);
  return order;
}

}  // namespace robustdistill::data
