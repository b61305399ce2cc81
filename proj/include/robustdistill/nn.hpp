#pragma once

#include <cctype>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "robustdistill/autodiff.hpp"
#include "robustdistill/rng.hpp"

namespace robustdistill::nn {

enum class LayerKind { dense, conv, relu, avgpool, resblock, flatten };

struct LayerDesc {
  LayerKind kind;
  int in = 0;        // dense
  int out = 0;       // dense
  int in_ch = 0;     // conv
  int out_ch = 0;    // conv
  int kernel = 0;    // conv
  int stride = 1;    // conv
  int channels = 0;  // resblock

  static LayerDesc Dense(int in, int out) { return {LayerKind::dense, in, out, 0, 0, 0, 1, 0}; }
  static LayerDesc Conv(int in_ch, int out_ch, int kernel, int stride) {
    return {LayerKind::conv, 0, 0, in_ch, out_ch, kernel, stride, 0};
  }
  static LayerDesc Relu() { return {LayerKind::relu}; }
  static LayerDesc AvgPool() { return {LayerKind::avgpool}; }
  static LayerDesc ResBlock(int channels) {
    LayerDesc d{LayerKind::resblock};
    d.channels = channels;
    return d;
  }
  static LayerDesc Flatten() { return {LayerKind::flatten}; }
};

struct ModelSpec {
  std::vector<LayerDesc> layers;
  int num_classes = 0;
  Shape input_shape;  // (C,H,W) or (F,)
};

inline std::string layer_str(const LayerDesc& l) {
  switch (l.kind) {
    case LayerKind::dense: return cat("dense(", l.in, ",", l.out, ")");
    case LayerKind::conv:
      return cat("conv(", l.in_ch, ",", l.out_ch, ",", l.kernel, ",", l.stride, ")");
    case LayerKind::relu: return "relu";
    case LayerKind::avgpool: return "avgpool";
    case LayerKind::resblock: return cat("resblock(", l.channels, ")");
    case LayerKind::flatten: return "flatten";
  }
  return "?";
}

// Canonical textual form; the spec digest hashes this string.
inline std::string canonical_spec(const ModelSpec& s) {
  std::string out = "input=";
  for (size_t i = 0; i < s.input_shape.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(s.input_shape[i]);
  }
  out += cat(";classes=", s.num_classes, ";layers=");
  for (size_t i = 0; i < s.layers.size(); ++i) {
    if (i) out += ",";
    out += layer_str(s.layers[i]);
  }
  return out;
}

inline uint64_t spec_digest(const ModelSpec& s) { return fnv1a64(canonical_spec(s)); }

// Walks the layer list propagating shapes; throws a shape error naming the
// offending layer pair on the first mismatch. Returns the output shape
// (without batch axis).
inline Shape validate_spec(const ModelSpec& s) {
  if (s.num_classes < 2) throw ShapeError(cat("num_classes must be >= 2, got ", s.num_classes));
  if (s.input_shape.size() != 1 && s.input_shape.size() != 3)
    throw ShapeError(cat("input shape must be (F) or (C,H,W), got ", shape_str(s.input_shape)));
  Shape cur = s.input_shape;
  auto err = [&](size_t i, const std::string& why) -> ShapeError {
    std::string prev = i == 0 ? "input" : layer_str(s.layers[i - 1]);
    return ShapeError(cat("layer ", i, " ", layer_str(s.layers[i]), " after ", prev, ": ", why,
                          " (incoming shape ", shape_str(cur), ")"));
  };
  for (size_t i = 0; i < s.layers.size(); ++i) {
    const LayerDesc& l = s.layers[i];
    switch (l.kind) {
      case LayerKind::dense: {
        if (cur.size() != 1) throw err(i, "dense needs a flat input");
        if (cur[0] != l.in) throw err(i, cat("dense expects ", l.in, " features"));
        cur = {l.out};
        break;
      }
      case LayerKind::conv: {
        if (cur.size() != 3) throw err(i, "conv needs a (C,H,W) input");
        if (cur[0] != l.in_ch) throw err(i, cat("conv expects ", l.in_ch, " channels"));
        int pad = l.kernel / 2;
        int oh = (cur[1] + 2 * pad - l.kernel) / l.stride + 1;
        int ow = (cur[2] + 2 * pad - l.kernel) / l.stride + 1;
        if (oh <= 0 || ow <= 0) throw err(i, "conv output collapses to zero size");
        cur = {l.out_ch, oh, ow};
        break;
      }
      case LayerKind::relu: break;
      case LayerKind::avgpool: {
        if (cur.size() != 3) throw err(i, "avgpool needs a (C,H,W) input");
        cur = {cur[0]};
        break;
      }
      case LayerKind::resblock: {
        if (cur.size() != 3) throw err(i, "resblock needs a (C,H,W) input");
        if (cur[0] != l.channels) throw err(i, cat("resblock expects ", l.channels, " channels"));
        break;
      }
      case LayerKind::flatten: {
        int n = 1;
        for (int d : cur) n *= d;
        cur = {n};
        break;
      }
    }
  }
  if (cur.size() != 1 || cur[0] != s.num_classes)
    throw ShapeError(cat("model emits ", shape_str(cur), ", expected (", s.num_classes,
                         ") logits; add a final dense layer"));
  return cur;
}

enum class Role { student, teacher };

template <typename T>
struct ParameterSet {
  ModelSpec spec;
  Role role = Role::student;
  std::map<std::string, Tensor<T>> params;  // ordered: digests are stable

  uint64_t digest() const {
    uint64_t h = fnv1a64(canonical_spec(spec));
    for (const auto& [name, t] : params) {
      h = fnv1a64(name, h);
      h = fnv1a64(t.v.data(), t.v.size() * sizeof(T), h);
    }
    return h;
  }

  size_t parameter_count() const {
    size_t n = 0;
    for (const auto& [name, t] : params) n += t.numel();
    return n;
  }
};

// He fan-in normal for weights, zero biases. Deterministic in (spec, seed).
template <typename T>
ParameterSet<T> build_model(const ModelSpec& spec, uint64_t seed, Role role = Role::student) {
  validate_spec(spec);
  ParameterSet<T> ps;
  ps.spec = spec;
  ps.role = role;
  Rng rng(seed, 0x6e6e2d696e6974ull);
  auto he_fill = [&](Tensor<T>& w, int fan_in) {
    T std = static_cast<T>(std::sqrt(2.0 / fan_in));
    for (auto& x : w.v) x = static_cast<T>(rng.gaussian()) * std;
  };
  for (size_t i = 0; i < spec.layers.size(); ++i) {
    const LayerDesc& l = spec.layers[i];
    std::string base = cat("L", i);
    switch (l.kind) {
      case LayerKind::dense: {
        Tensor<T> w({l.in, l.out});
        he_fill(w, l.in);
        ps.params[base + ".w"] = std::move(w);
        ps.params[base + ".b"] = Tensor<T>::zeros({l.out});
        break;
      }
      case LayerKind::conv: {
        Tensor<T> w({l.out_ch, l.in_ch, l.kernel, l.kernel});
        he_fill(w, l.in_ch * l.kernel * l.kernel);
        ps.params[base + ".w"] = std::move(w);
        ps.params[base + ".b"] = Tensor<T>::zeros({l.out_ch});
        break;
      }
      case LayerKind::resblock: {
        for (const char* cn : {".c1", ".c2"}) {
          Tensor<T> w({l.channels, l.channels, 3, 3});
          he_fill(w, l.channels * 9);
          ps.params[base + cn + ".w"] = std::move(w);
          ps.params[base + cn + ".b"] = Tensor<T>::zeros({l.channels});
        }
        break;
      }
      default: break;
    }
  }
  return ps;
}

namespace detail {

template <typename T>
Var<T> conv_bias(Var<T> y, Var<T> b) {
  // [B,OC,H,W] + [OC,1,1] broadcast
  const Shape& bs = b.shape();
  return add(y, reshape(b, {bs[0], 1, 1}));
}

// Forward over a generic parameter accessor so the tape and eager paths share
// one implementation (get(name) returns Var<T> bound to the same tape as x).
template <typename T, typename GetFn>
Var<T> forward_graph(const ModelSpec& spec, GetFn&& get, Var<T> x) {
  for (size_t i = 0; i < spec.layers.size(); ++i) {
    const LayerDesc& l = spec.layers[i];
    std::string base = cat("L", i);
    switch (l.kind) {
      case LayerKind::dense:
        x = add(matmul(x, get(base + ".w")), get(base + ".b"));
        break;
      case LayerKind::conv:
        x = conv_bias(conv2d(x, get(base + ".w"), l.stride, l.kernel / 2), get(base + ".b"));
        break;
      case LayerKind::relu:
        x = relu(x);
        break;
      case LayerKind::avgpool:
        x = avgpool_global(x);
        break;
      case LayerKind::resblock: {
        Var<T> h = conv_bias(conv2d(x, get(base + ".c1.w"), 1, 1), get(base + ".c1.b"));
        h = relu(h);
        h = conv_bias(conv2d(h, get(base + ".c2.w"), 1, 1), get(base + ".c2.b"));
        x = relu(add(x, h));
        break;
      }
      case LayerKind::flatten:
        x = flatten(x);
        break;
    }
  }
  return x;
}

}  // namespace detail

template <typename T>
Shape batch_input_shape(const ModelSpec& spec, const Tensor<T>& batch) {
  Shape expect = spec.input_shape;
  expect.insert(expect.begin(), batch.dim(0));
  return expect;
}

template <typename T>
void check_batch(const ModelSpec& spec, const Tensor<T>& batch) {
  if (batch.rank() != static_cast<int>(spec.input_shape.size()) + 1 ||
      !std::equal(spec.input_shape.begin(), spec.input_shape.end(), batch.shape.begin() + 1))
    throw ShapeError(cat("batch shape ", shape_str(batch.shape), " does not match input shape ",
                         shape_str(spec.input_shape), " with leading batch axis"));
}

// Bound parameter variables for one tape, so gradients can be read back by
// name after backward().
template <typename T>
struct BoundParams {
  std::map<std::string, Var<T>> vars;
  Var<T> get(const std::string& name) const {
    auto it = vars.find(name);
    if (it == vars.end()) throw ContractError(cat("unknown parameter ", name));
    return it->second;
  }
};

template <typename T>
BoundParams<T> bind_params(Tape<T>& tape, const ParameterSet<T>& ps, bool requires_grad) {
  BoundParams<T> bound;
  for (const auto& [name, t] : ps.params) bound.vars.emplace(name, tape.leaf(t, requires_grad));
  return bound;
}

// Tape-recorded forward: logits Var on the tape of `x`.
template <typename T>
Var<T> forward(Tape<T>& tape, const ParameterSet<T>& ps, const BoundParams<T>& bound, Var<T> x) {
  check_batch(ps.spec, x.val());
  return detail::forward_graph<T>(ps.spec, [&](const std::string& n) { return bound.get(n); }, x);
}

// Eager forward: plain logits tensor. Runs through the same graph code on a
// throwaway tape with gradient recording off, so both paths compute
// bit-identical values.
template <typename T>
Tensor<T> forward(const ParameterSet<T>& ps, const Tensor<T>& batch) {
  check_batch(ps.spec, batch);
  Tape<T> tape;
  BoundParams<T> bound = bind_params(tape, ps, false);
  Var<T> x = tape.leaf(batch, false);
  return forward(tape, ps, bound, x).val();
}

template <typename T>
Tensor<T> predict_probs(const ParameterSet<T>& ps, const Tensor<T>& batch, T tau) {
  Tape<T> tape;
  BoundParams<T> bound = bind_params(tape, ps, false);
  Var<T> x = tape.leaf(batch, false);
  Var<T> logits = forward(tape, ps, bound, x);
  return softmax_t(logits, tau).val();
}

// ---------------------------------------------------------------------------
// Model spec string syntax:
//   "conv:1:16:3:1, relu, conv:16:32:3:2, relu, avgpool, dense:32:10"
// conv args are in_ch:out_ch:kernel:stride (pad = kernel/2); resblock:C;
// dense args are in:out. Presets expand to full layer lists for the given
// input shape / class count.
// ---------------------------------------------------------------------------

namespace detail {

inline std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (c == sep) {
      out.push_back(cur);
      cur.clear();
    } else if (!std::isspace(static_cast<unsigned char>(c))) {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

inline int parse_int(const std::string& s, const std::string& what) {
  try {
    size_t pos = 0;
    int v = std::stoi(s, &pos);
    if (pos != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw ConfigError(cat("bad integer '", s, "' in ", what));
  }
}

}  // namespace detail

// Built-in architectures. `cnn_student` / `res_*` need (C,H,W) inputs;
// `mlp_*` flatten anything.
inline ModelSpec preset_spec(const std::string& name, const Shape& input_shape, int num_classes);

inline ModelSpec parse_model_spec(const std::string& text, const Shape& input_shape,
                                  int num_classes) {
  ModelSpec spec;
  spec.input_shape = input_shape;
  spec.num_classes = num_classes;
  if (text.find(':') == std::string::npos && text.find(',') == std::string::npos)
    return preset_spec(text, input_shape, num_classes);
  for (const std::string& item : detail::split(text, ',')) {
    if (item.empty()) continue;
    auto parts = detail::split(item, ':');
    const std::string& kind = parts[0];
    auto need = [&](size_t n) {
      if (parts.size() != n + 1)
        throw ConfigError(cat("layer '", item, "' expects ", n, " arguments"));
    };
    if (kind == "dense") {
      need(2);
      spec.layers.push_back(LayerDesc::Dense(detail::parse_int(parts[1], item),
                                             detail::parse_int(parts[2], item)));
    } else if (kind == "conv") {
      need(4);
      spec.layers.push_back(
          LayerDesc::Conv(detail::parse_int(parts[1], item), detail::parse_int(parts[2], item),
                          detail::parse_int(parts[3], item), detail::parse_int(parts[4], item)));
    } else if (kind == "relu") {
      need(0);
      spec.layers.push_back(LayerDesc::Relu());
    } else if (kind == "avgpool") {
      need(0);
      spec.layers.push_back(LayerDesc::AvgPool());
    } else if (kind == "resblock") {
      need(1);
      spec.layers.push_back(LayerDesc::ResBlock(detail::parse_int(parts[1], item)));
    } else if (kind == "flatten") {
      need(0);
      spec.layers.push_back(LayerDesc::Flatten());
    } else {
      throw ConfigError(cat("unknown layer kind '", kind,
                            "' (expected dense, conv, relu, avgpool, resblock, flatten)"));
    }
  }
  validate_spec(spec);
  return spec;
}

inline ModelSpec preset_spec(const std::string& name, const Shape& input_shape, int num_classes) {
  auto conv_entry = [&](std::vector<LayerDesc>& L, int& ch) {
    if (input_shape.size() != 3)
      throw ConfigError(cat("preset '", name, "' needs an image input, got ",
                            shape_str(input_shape)));
    ch = input_shape[0];
    (void)L;
  };
  ModelSpec spec;
  spec.input_shape = input_shape;
  spec.num_classes = num_classes;
  std::vector<LayerDesc>& L = spec.layers;
  int ch = 0;
  if (name == "cnn_student") {
    // Default student: 4 weighted conv layers, ~50k parameters at C=10.
    conv_entry(L, ch);
    L = {LayerDesc::Conv(ch, 16, 3, 1),  LayerDesc::Relu(), LayerDesc::Conv(16, 32, 3, 2),
         LayerDesc::Relu(),              LayerDesc::Conv(32, 48, 3, 1), LayerDesc::Relu(),
         LayerDesc::Conv(48, 64, 3, 2),  LayerDesc::Relu(), LayerDesc::AvgPool(),
         LayerDesc::Dense(64, num_classes)};
  } else if (name == "cnn_tiny") {
    conv_entry(L, ch);
    L = {LayerDesc::Conv(ch, 8, 3, 2), LayerDesc::Relu(), LayerDesc::Conv(8, 16, 3, 2),
         LayerDesc::Relu(),            LayerDesc::AvgPool(), LayerDesc::Dense(16, num_classes)};
  } else if (name == "res_small") {
    conv_entry(L, ch);
    L = {LayerDesc::Conv(ch, 32, 3, 1), LayerDesc::Relu(),  LayerDesc::ResBlock(32),
         LayerDesc::Conv(32, 48, 3, 2), LayerDesc::Relu(),  LayerDesc::AvgPool(),
         LayerDesc::Dense(48, num_classes)};
  } else if (name == "res_medium") {
    // Default teacher: 6 weighted layers with two residual blocks, ~170k.
    conv_entry(L, ch);
    L = {LayerDesc::Conv(ch, 32, 3, 1), LayerDesc::Relu(),  LayerDesc::ResBlock(32),
         LayerDesc::Conv(32, 64, 3, 2), LayerDesc::Relu(),  LayerDesc::ResBlock(64),
         LayerDesc::Conv(64, 96, 3, 2), LayerDesc::Relu(),  LayerDesc::AvgPool(),
         LayerDesc::Dense(96, num_classes)};
  } else if (name == "res_large") {
    conv_entry(L, ch);
    L = {LayerDesc::Conv(ch, 48, 3, 1),  LayerDesc::Relu(), LayerDesc::ResBlock(48),
         LayerDesc::Conv(48, 96, 3, 2),  LayerDesc::Relu(), LayerDesc::ResBlock(96),
         LayerDesc::Conv(96, 128, 3, 2), LayerDesc::Relu(), LayerDesc::AvgPool(),
         LayerDesc::Dense(128, num_classes)};
  } else if (name == "res_tiny") {
    conv_entry(L, ch);
    L = {LayerDesc::Conv(ch, 16, 3, 2), LayerDesc::Relu(), LayerDesc::ResBlock(16),
         LayerDesc::Conv(16, 32, 3, 2), LayerDesc::Relu(), LayerDesc::AvgPool(),
         LayerDesc::Dense(32, num_classes)};
  } else if (name == "mlp_small" || name == "mlp_medium") {
    int feats = 1;
    for (int d : input_shape) feats *= d;
    int hidden = name == "mlp_small" ? 64 : 256;
    if (input_shape.size() == 3) L.push_back(LayerDesc::Flatten());
    L.push_back(LayerDesc::Dense(feats, hidden));
    L.push_back(LayerDesc::Relu());
    L.push_back(LayerDesc::Dense(hidden, num_classes));
  } else {
    throw ConfigError(cat("unknown model preset '", name,
                          "' (expected cnn_student, cnn_tiny, res_tiny, res_small, res_medium, "
                          "res_large, mlp_small, mlp_medium, or an explicit layer list)"));
  }
  validate_spec(spec);
  return spec;
}

// ---------------------------------------------------------------------------
// Checkpoints. Binary layout: magic, format version, canonical spec string,
// spec digest, role, epoch, selection tag, named f32 tensors (length
// prefixed), optimizer momentum buffers, per-epoch metric history. All
// multi-byte values little-endian; float payloads are raw bits, so the round
// trip is bit-exact.
// ---------------------------------------------------------------------------

struct EpochRecord {
  int epoch = 0;
  double lr = 0;
  double train_loss = 0;
  double train_acc = 0;
  double val_metric = 0;
  double wall_ms = 0;
};

struct Checkpoint {
  ParameterSet<float> params;
  int epoch = 0;
  std::map<std::string, Tensor<float>> momentum;
  std::vector<EpochRecord> history;
  std::string selection_tag = "last";  // "best" | "last"
};

namespace detail {

constexpr char kCkptMagic[8] = {'R', 'B', 'D', 'C', 'K', 'P', 'T', '1'};
constexpr uint32_t kCkptVersion = 1;

inline void put_u32(std::ostream& os, uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

inline void put_u64(std::ostream& os, uint64_t v) {
  put_u32(os, static_cast<uint32_t>(v));
  put_u32(os, static_cast<uint32_t>(v >> 32));
}

inline void put_f32(std::ostream& os, float f) {
  uint32_t bits;
  std::memcpy(&bits, &f, 4);
  put_u32(os, bits);
}

inline void put_f64(std::ostream& os, double d) {
  uint64_t bits;
  std::memcpy(&bits, &d, 8);
  put_u64(os, bits);
}

inline void put_str(std::ostream& os, const std::string& s) {
  put_u32(os, static_cast<uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) throw IntegrityError("checkpoint truncated");
  return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
         (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
}

inline uint64_t get_u64(std::istream& is) {
  uint64_t lo = get_u32(is);
  uint64_t hi = get_u32(is);
  return lo | (hi << 32);
}

inline float get_f32(std::istream& is) {
  uint32_t bits = get_u32(is);
  float f;
  std::memcpy(&f, &bits, 4);
  return f;
}

inline double get_f64(std::istream& is) {
  uint64_t bits = get_u64(is);
  double d;
  std::memcpy(&d, &bits, 8);
  return d;
}

inline std::string get_str(std::istream& is) {
  uint32_t n = get_u32(is);
  if (n > (1u << 24)) throw IntegrityError("checkpoint string length is implausible");
  std::string s(n, '\0');
  if (n && !is.read(s.data(), n)) throw IntegrityError("checkpoint truncated");
  return s;
}

inline void put_named_tensors(std::ostream& os, const std::map<std::string, Tensor<float>>& m) {
  put_u32(os, static_cast<uint32_t>(m.size()));
  for (const auto& [name, t] : m) {
    put_str(os, name);
    put_u32(os, static_cast<uint32_t>(t.shape.size()));
    for (int d : t.shape) put_u32(os, static_cast<uint32_t>(d));
    put_u64(os, t.v.size());
    for (float f : t.v) put_f32(os, f);
  }
}

inline std::map<std::string, Tensor<float>> get_named_tensors(std::istream& is) {
  std::map<std::string, Tensor<float>> m;
  uint32_t n = get_u32(is);
  for (uint32_t i = 0; i < n; ++i) {
    std::string name = get_str(is);
    uint32_t rank = get_u32(is);
    if (rank > 8) throw IntegrityError("checkpoint tensor rank is implausible");
    Shape shape(rank);
    for (auto& d : shape) d = static_cast<int>(get_u32(is));
    uint64_t count = get_u64(is);
    if (count != numel_of(shape)) throw IntegrityError(cat("tensor ", name, " count mismatch"));
    Tensor<float> t(shape);
    for (auto& f : t.v) f = get_f32(is);
    m.emplace(std::move(name), std::move(t));
  }
  return m;
}

// Rebuild a ModelSpec from its canonical string.
inline ModelSpec parse_canonical_spec(const std::string& s) {
  auto ipos = s.find("input=");
  auto cpos = s.find(";classes=");
  auto lpos = s.find(";layers=");
  if (ipos != 0 || cpos == std::string::npos || lpos == std::string::npos)
    throw FormatError("malformed spec string in checkpoint");
  ModelSpec spec;
  for (const std::string& d : split(s.substr(6, cpos - 6), 'x'))
    spec.input_shape.push_back(parse_int(d, "spec input shape"));
  spec.num_classes = parse_int(s.substr(cpos + 9, lpos - cpos - 9), "spec classes");
  std::string layers = s.substr(lpos + 8);
  // Convert "conv(1,8,3,2)" entries back through the layer-list parser;
  // commas inside parentheses are argument separators, not layer breaks.
  std::string text;
  int depth = 0;
  for (char c : layers) {
    if (c == '(') {
      text += ':';
      ++depth;
    } else if (c == ')') {
      --depth;
    } else if (c == ',' && depth > 0) {
      text += ':';
    } else {
      text += c;
    }
  }
  ModelSpec parsed = parse_model_spec(text, spec.input_shape, spec.num_classes);
  return parsed;
}

}  // namespace detail

inline void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError(cat("cannot open ", path, " for writing"));
  os.write(detail::kCkptMagic, 8);
  detail::put_u32(os, detail::kCkptVersion);
  std::string spec_text = canonical_spec(ckpt.params.spec);
  detail::put_str(os, spec_text);
  detail::put_u64(os, fnv1a64(spec_text));
  detail::put_u32(os, ckpt.params.role == Role::teacher ? 1 : 0);
  detail::put_u32(os, static_cast<uint32_t>(ckpt.epoch));
  detail::put_str(os, ckpt.selection_tag);
  detail::put_named_tensors(os, ckpt.params.params);
  detail::put_named_tensors(os, ckpt.momentum);
  detail::put_u32(os, static_cast<uint32_t>(ckpt.history.size()));
  for (const EpochRecord& r : ckpt.history) {
    detail::put_u32(os, static_cast<uint32_t>(r.epoch));
    detail::put_f64(os, r.lr);
    detail::put_f64(os, r.train_loss);
    detail::put_f64(os, r.train_acc);
    detail::put_f64(os, r.val_metric);
    detail::put_f64(os, r.wall_ms);
  }
  if (!os) throw FormatError(cat("write failed for ", path));
}

inline Checkpoint load_checkpoint(const std::string& path,
                                  std::optional<uint64_t> expected_spec_digest = std::nullopt) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError(cat("cannot open ", path, " for reading"));
  char magic[8];
  if (!is.read(magic, 8) || std::memcmp(magic, detail::kCkptMagic, 8) != 0)
    throw FormatError(cat("bad checkpoint magic in ", path));
  uint32_t version = detail::get_u32(is);
  if (version != detail::kCkptVersion)
    throw FormatError(cat("unsupported checkpoint version ", version));
  std::string spec_text = detail::get_str(is);
  uint64_t stored_digest = detail::get_u64(is);
  if (stored_digest != fnv1a64(spec_text))
    throw SpecMismatchError(cat("spec digest mismatch in ", path, ": stored ",
                                hex64(stored_digest), ", spec hashes to ",
                                hex64(fnv1a64(spec_text))));
  if (expected_spec_digest && *expected_spec_digest != stored_digest)
    throw SpecMismatchError(cat("checkpoint ", path, " has spec digest ", hex64(stored_digest),
                                ", expected ", hex64(*expected_spec_digest)));
  Checkpoint ckpt;
  ckpt.params.spec = detail::parse_canonical_spec(spec_text);
  if (canonical_spec(ckpt.params.spec) != spec_text)
    throw SpecMismatchError("checkpoint spec string does not round trip");
  ckpt.params.role = detail::get_u32(is) == 1 ? Role::teacher : Role::student;
  ckpt.epoch = static_cast<int>(detail::get_u32(is));
  ckpt.selection_tag = detail::get_str(is);
  ckpt.params.params = detail::get_named_tensors(is);
  ckpt.momentum = detail::get_named_tensors(is);
  uint32_t nh = detail::get_u32(is);
  for (uint32_t i = 0; i < nh; ++i) {
    EpochRecord r;
    r.epoch = static_cast<int>(detail::get_u32(is));
    r.lr = detail::get_f64(is);
    r.train_loss = detail::get_f64(is);
    r.train_acc = detail::get_f64(is);
    r.val_metric = detail::get_f64(is);
    r.wall_ms = detail::get_f64(is);
    ckpt.history.push_back(r);
  }
  for (const auto& [name, t] : ckpt.params.params) {
    (void)name;
    if (t.v.empty()) throw IntegrityError("empty tensor payload");
  }
  return ckpt;
}

}  // namespace robustdistill::nn
