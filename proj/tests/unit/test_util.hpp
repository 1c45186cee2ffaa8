#pragma once

#include <filesystem>
#include <random>
#include <string>

#include "xwd/model.hpp"
#include "xwd/random.hpp"
#include "xwd/tensor.hpp"

namespace xwd::test {

class TempDir {
 public:
  explicit TempDir(const std::string& tag = "xwd") {
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() / (tag + "-" + std::to_string(rd()) + std::to_string(rd()));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

inline Tensor random_volume(std::size_t d, std::size_t h, std::size_t w, std::uint64_t seed) {
  Tensor t = Tensor::volume(d, h, w);
  Rng rng(seed);
  std::normal_distribution<double> n(0.0, 1.0);
  for (auto& v : t.data()) v = n(rng);
  return t;
}

// Small enough for exhaustive finite differences (a few hundred parameters).
inline EncoderConfig micro_encoder() {
  EncoderConfig c;
  c.stem_channels = 2;
  c.stem_kernel = 3;
  c.stem_stride = {1, 2, 2};
  c.stage_channels = {4, 4};
  c.blocks_per_stage = {1, 1};
  c.stage_strides = {1, 2};
  c.feature_dim = 4;
  c.se_reduction = 2;
  c.input_shape = {4, 8, 8};
  return c;
}

}  // namespace xwd::test
