#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace mlbseg {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Dense row-major tensor. Shapes are small (<= 4 dims in practice).
template <class S>
struct TensorT {
  std::vector<int> dims;
  std::vector<S> v;

  TensorT() = default;
  TensorT(std::vector<int> d, std::vector<S> data) : dims(std::move(d)), v(std::move(data)) {
    if (static_cast<long long>(v.size()) != numel_of(dims))
      throw Error("tensor: data size " + std::to_string(v.size()) + " != shape " + shape_str());
  }

  static long long numel_of(const std::vector<int>& d) {
    long long n = 1;
    for (int e : d) {
      if (e < 0) throw Error("tensor: negative extent");
      n *= e;
    }
    return n;
  }

  static TensorT zeros(std::vector<int> d) {
    auto n = numel_of(d);
    return TensorT(std::move(d), std::vector<S>(static_cast<size_t>(n), S(0)));
  }
  static TensorT full(std::vector<int> d, S x) {
    auto n = numel_of(d);
    return TensorT(std::move(d), std::vector<S>(static_cast<size_t>(n), x));
  }
  static TensorT scalar(S x) { return TensorT({1}, {x}); }

  int numel() const { return static_cast<int>(v.size()); }
  int dim(int i) const { return dims[static_cast<size_t>(i)]; }
  int ndim() const { return static_cast<int>(dims.size()); }

  bool same_shape(const TensorT& o) const { return dims == o.dims; }

  // [C,H,W] accessors
  S& at(int c, int y, int x) { return v[static_cast<size_t>((c * dims[1] + y) * dims[2] + x)]; }
  S at(int c, int y, int x) const { return v[static_cast<size_t>((c * dims[1] + y) * dims[2] + x)]; }
  // [H,W] accessors
  S& at(int y, int x) { return v[static_cast<size_t>(y * dims[1] + x)]; }
  S at(int y, int x) const { return v[static_cast<size_t>(y * dims[1] + x)]; }

  std::string shape_str() const {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < dims.size(); ++i) os << (i ? "," : "") << dims[i];
    os << "]";
    return os.str();
  }

  bool all_finite() const {
    for (S x : v)
      if (!std::isfinite(static_cast<double>(x))) return false;
    return true;
  }
};

using Tensor = TensorT<double>;
using ParamVector = std::vector<double>;

// Integer label mask, values in {0,...,C-1}.
struct Mask {
  int h = 0, w = 0;
  std::vector<uint8_t> v;

  Mask() = default;
  Mask(int hh, int ww) : h(hh), w(ww), v(static_cast<size_t>(hh) * static_cast<size_t>(ww), 0) {}

  uint8_t& at(int y, int x) { return v[static_cast<size_t>(y) * w + x]; }
  uint8_t at(int y, int x) const { return v[static_cast<size_t>(y) * w + x]; }
  int numel() const { return h * w; }
  bool operator==(const Mask& o) const { return h == o.h && w == o.w && v == o.v; }
};

}  // namespace mlbseg
