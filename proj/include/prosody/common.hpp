#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>

namespace prosody {

template <class S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>;
template <class S>
using Vec = Eigen::Matrix<S, Eigen::Dynamic, 1>;

using MatF = Mat<float>;
using VecF = Vec<float>;
using MatD = Mat<double>;
using VecD = Vec<double>;
using Index = Eigen::Index;

// Error taxonomy mapped to CLI exit codes (2, 3, 4).
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};
struct DataError : std::runtime_error {
  explicit DataError(const std::string& what) : std::runtime_error(what) {}
};
struct NumericError : std::runtime_error {
  explicit NumericError(const std::string& what) : std::runtime_error(what) {}
};

// FNV-1a over raw bytes. Stable across platforms; used for config hashes,
// text feature hashing and seed derivation.
inline std::uint64_t fnv1a64(std::string_view bytes,
                             std::uint64_t h = 14695981039346656037ull) {
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

// All randomness in the project flows from one global seed through named
// derivations, so stages can be re-run in any order with identical results.
inline std::uint64_t derive_seed(std::uint64_t base, std::string_view purpose) {
  return splitmix64(fnv1a64(purpose) ^ splitmix64(base));
}

// Row-major flatten of an m-by-d matrix into a length m*d vector and back.
// This is the layout contract shared by diffusion arithmetic and file IO.
template <class S>
Vec<S> flatten_rows(const Mat<S>& a) {
  Vec<S> v(a.size());
  Index k = 0;
  for (Index i = 0; i < a.rows(); ++i)
    for (Index j = 0; j < a.cols(); ++j) v[k++] = a(i, j);
  return v;
}

template <class S>
Mat<S> unflatten_rows(const Vec<S>& v, Index rows, Index cols) {
  if (v.size() != rows * cols) throw DataError("unflatten_rows: size mismatch");
  Mat<S> a(rows, cols);
  Index k = 0;
  for (Index i = 0; i < rows; ++i)
    for (Index j = 0; j < cols; ++j) a(i, j) = v[k++];
  return a;
}

}  // namespace prosody
