#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace mvdet {

/// Dense row-major double tensor. The universal numeric carrier for
/// feature maps, weights and gradients.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<int> shape, double fill = 0.0)
      : shape_(std::move(shape)), data_(numel_of(shape_), fill) {
    check_shape(shape_);
  }

  Tensor(std::vector<int> shape, std::vector<double> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    check_shape(shape_);
    if (numel_of(shape_) != data_.size())
      throw std::invalid_argument("Tensor: shape/data size mismatch");
  }

  static Tensor scalar(double v) { return Tensor({1}, {v}); }

  const std::vector<int>& shape() const { return shape_; }
  std::size_t numel() const { return data_.size(); }
  int dim(int i) const { return shape_.at(static_cast<std::size_t>(i)); }
  int ndim() const { return static_cast<int>(shape_.size()); }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::vector<double>& vec() { return data_; }
  const std::vector<double>& vec() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  // 2-d / 3-d accessors, row-major.
  double& at2(int r, int c) { return data_[idx2(r, c)]; }
  double at2(int r, int c) const { return data_[idx2(r, c)]; }
  double& at3(int a, int b, int c) { return data_[idx3(a, b, c)]; }
  double at3(int a, int b, int c) const { return data_[idx3(a, b, c)]; }

  std::size_t idx2(int r, int c) const {
    return static_cast<std::size_t>(r) * shape_[1] + c;
  }
  std::size_t idx3(int a, int b, int c) const {
    return (static_cast<std::size_t>(a) * shape_[1] + b) * shape_[2] + c;
  }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

  bool all_finite() const {
    for (double v : data_)
      if (!std::isfinite(v)) return false;
    return true;
  }

  Tensor reshaped(std::vector<int> shape) const {
    if (numel_of(shape) != data_.size())
      throw std::invalid_argument("reshape: element count mismatch");
    return Tensor(std::move(shape), data_);
  }

  static std::size_t numel_of(const std::vector<int>& shape) {
    std::size_t n = 1;
    for (int e : shape) n *= static_cast<std::size_t>(e);
    return n;
  }

  std::string shape_str() const {
    std::ostringstream os;
    for (std::size_t i = 0; i < shape_.size(); ++i)
      os << (i ? "x" : "") << shape_[i];
    return os.str();
  }

 private:
  static void check_shape(const std::vector<int>& shape) {
    for (int e : shape)
      if (e <= 0) throw std::invalid_argument("Tensor: non-positive extent");
  }

  std::vector<int> shape_;
  std::vector<double> data_;
};

inline bool host_is_little_endian() {
  const std::uint16_t probe = 1;
  std::uint8_t b;
  std::memcpy(&b, &probe, 1);
  return b == 1;
}

// Serialization: one text header line "mvdet-tensor v1 dtype=f64 shape=AxBxC"
// followed by the row-major payload as little-endian IEEE-754 doubles.

inline void save_tensor(std::ostream& os, const Tensor& t) {
  os << "mvdet-tensor v1 dtype=f64 shape=" << t.shape_str() << "\n";
  if (host_is_little_endian()) {
    os.write(reinterpret_cast<const char*>(t.data()),
             static_cast<std::streamsize>(t.numel() * sizeof(double)));
  } else {
    for (std::size_t i = 0; i < t.numel(); ++i) {
      char buf[8];
      std::memcpy(buf, &t.data()[i], 8);
      std::reverse(buf, buf + 8);
      os.write(buf, 8);
    }
  }
}

inline Tensor load_tensor(std::istream& is) {
  std::string header;
  if (!std::getline(is, header))
    throw std::runtime_error("load_tensor: missing header");
  const std::string magic = "mvdet-tensor v1 dtype=f64 shape=";
  if (header.rfind(magic, 0) != 0)
    throw std::runtime_error("load_tensor: bad header: " + header);
  std::vector<int> shape;
  std::stringstream ss(header.substr(magic.size()));
  std::string tok;
  while (std::getline(ss, tok, 'x')) shape.push_back(std::stoi(tok));
  Tensor t(shape);
  is.read(reinterpret_cast<char*>(t.data()),
          static_cast<std::streamsize>(t.numel() * sizeof(double)));
  if (!is) throw std::runtime_error("load_tensor: truncated payload");
  if (!host_is_little_endian()) {
    for (std::size_t i = 0; i < t.numel(); ++i) {
      char buf[8];
      std::memcpy(buf, &t.data()[i], 8);
      std::reverse(buf, buf + 8);
      std::memcpy(&t.data()[i], buf, 8);
    }
  }
  return t;
}

inline void save_tensor_file(const std::string& path, const Tensor& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open for write: " + path);
  save_tensor(os, t);
}

inline Tensor load_tensor_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open for read: " + path);
  return load_tensor(is);
}

}  // namespace mvdet
