#pragma once

#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace robustdistill {

// Error taxonomy. Every throwing path in the library uses one of these so
// callers (and the CLI) can report the failure class uniformly.
class Error : public std::runtime_error {
 public:
  Error(std::string kind, const std::string& msg)
      : std::runtime_error(kind + ": " + msg), kind_(std::move(kind)) {}
  const std::string& kind() const { return kind_; }

 private:
  std::string kind_;
};

struct ShapeError : Error {
  explicit ShapeError(const std::string& m) : Error("shape error", m) {}
};
struct DomainError : Error {
  explicit DomainError(const std::string& m) : Error("domain error", m) {}
};
struct ParamError : Error {
  explicit ParamError(const std::string& m) : Error("parameter error", m) {}
};
struct ContractError : Error {
  explicit ContractError(const std::string& m) : Error("contract error", m) {}
};
struct ConfigError : Error {
  explicit ConfigError(const std::string& m) : Error("configuration error", m) {}
};
struct FormatError : Error {
  explicit FormatError(const std::string& m) : Error("format error", m) {}
};
struct IntegrityError : Error {
  explicit IntegrityError(const std::string& m) : Error("integrity error", m) {}
};
struct SpecMismatchError : Error {
  explicit SpecMismatchError(const std::string& m) : Error("spec-mismatch error", m) {}
};
struct NumericError : Error {
  explicit NumericError(const std::string& m) : Error("numeric error", m) {}
};

// 64-bit FNV-1a. Used for model-spec digests, parameter digests and config
// digests; stable across platforms.
inline uint64_t fnv1a64(const void* data, size_t n, uint64_t h = 0xcbf29ce484222325ull) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

inline uint64_t fnv1a64(std::string_view s, uint64_t h = 0xcbf29ce484222325ull) {
  return fnv1a64(s.data(), s.size(), h);
}

inline std::string hex64(uint64_t v) {
  static const char* d = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i) {
    s[static_cast<size_t>(i)] = d[v & 0xf];
    v >>= 4;
  }
  return s;
}

template <typename... Args>
std::string cat(Args&&... args) {
  std::ostringstream os;
  (os << ... << args);
  return os.str();
}

inline std::string shape_str(const std::vector<int>& s) {
  std::string out = "(";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  out += ")";
  return out;
}

}  // namespace robustdistill
