#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace xwd {

// Dense (C, D, H, W) array of doubles in C-order. Volumes are C == 1.
class Tensor {
 public:
  Tensor() = default;
  Tensor(std::size_t c, std::size_t d, std::size_t h, std::size_t w, double fill = 0.0)
      : c_(c), d_(d), h_(h), w_(w), data_(c * d * h * w, fill) {}

  static Tensor volume(std::size_t d, std::size_t h, std::size_t w, double fill = 0.0) {
    return Tensor(1, d, h, w, fill);
  }

  std::size_t channels() const { return c_; }
  std::size_t depth() const { return d_; }
  std::size_t height() const { return h_; }
  std::size_t width() const { return w_; }
  std::size_t spatial() const { return d_ * h_ * w_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  bool same_shape(const Tensor& o) const {
    return c_ == o.c_ && d_ == o.d_ && h_ == o.h_ && w_ == o.w_;
  }

  double& at(std::size_t c, std::size_t z, std::size_t y, std::size_t x) {
    return data_[((c * d_ + z) * h_ + y) * w_ + x];
  }
  double at(std::size_t c, std::size_t z, std::size_t y, std::size_t x) const {
    return data_[((c * d_ + z) * h_ + y) * w_ + x];
  }
  // Volume accessor (channel 0).
  double& at(std::size_t z, std::size_t y, std::size_t x) { return at(0, z, y, x); }
  double at(std::size_t z, std::size_t y, std::size_t x) const { return at(0, z, y, x); }

  std::span<double> channel(std::size_t c) { return {data_.data() + c * spatial(), spatial()}; }
  std::span<const double> channel(std::size_t c) const {
    return {data_.data() + c * spatial(), spatial()};
  }

  std::vector<double>& data() { return data_; }
  const std::vector<double>& data() const { return data_; }

  bool operator==(const Tensor& o) const = default;

 private:
  std::size_t c_ = 0, d_ = 0, h_ = 0, w_ = 0;
  std::vector<double> data_;
};

}  // namespace xwd
