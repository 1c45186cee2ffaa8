#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "xwd/tensor.hpp"
#include "xwd/windowing.hpp"

namespace xwd {

enum class BlockKind { kBasic, kBottleneck };

struct EncoderConfig {
  std::size_t feature_dim = 64;  // D; equals the last stage's channel count
  std::size_t stem_channels = 8;
  std::size_t stem_kernel = 3;
  std::array<std::size_t, 3> stem_stride = {1, 2, 2};
  std::vector<std::size_t> stage_channels = {8, 16, 32, 64};
  std::vector<std::size_t> blocks_per_stage = {1, 1, 1, 1};
  std::vector<std::size_t> stage_strides = {2, 2, 2, 2};
  BlockKind block = BlockKind::kBasic;
  std::size_t bottleneck_divisor = 4;
  std::array<std::size_t, 3> input_shape = {8, 64, 64};  // (T, H, W); one input channel
  std::size_t se_reduction = 4;

  // Four single-block stages ending at 64 channels.
  static EncoderConfig tiny(std::array<std::size_t, 3> input_shape = {8, 64, 64});
  // 3-4-6-3 bottleneck stages ending at 2048 channels, reduction 16.
  static EncoderConfig se_resnet50(std::array<std::size_t, 3> input_shape = {32, 512, 512});

  void validate() const;
  bool operator==(const EncoderConfig&) const = default;
};

struct ParameterInfo {
  std::string name;
  std::size_t offset = 0;
  std::size_t size = 0;
  std::size_t fan_in = 0;
  bool is_bias = false;
};

// Per-sample activations recorded by a forward pass for reuse in backward.
struct ConvTape {
  std::array<std::size_t, 4> in_dims{};
  std::array<std::size_t, 4> out_dims{};
  std::vector<double> cols;
};

struct SETape {
  Tensor input;
  std::vector<double> squeezed;
  std::vector<double> hidden;  // post-ReLU bottleneck
  std::vector<double> gate;
};

struct BlockTape {
  std::vector<ConvTape> convs;
  std::vector<Tensor> relu_outputs;  // after each non-final main-path conv
  SETape se;
  ConvTape shortcut;
  Tensor output;  // post-ReLU block output
};

struct Tape {
  ConvTape stem;
  Tensor stem_output;
  std::vector<BlockTape> blocks;
};

// Gradient of the scalar objective with respect to one named activation.
struct ActivationCapture {
  std::size_t layer = 0;  // 0 = stem, s + 1 = stage s output
  Tensor activation;
  Tensor gradient;
};

// Architecture only; parameters live in a flat vector owned by the caller.
class Encoder {
 public:
  explicit Encoder(EncoderConfig config);

  const EncoderConfig& config() const { return config_; }
  std::size_t parameter_count() const { return parameter_count_; }
  const std::vector<ParameterInfo>& parameters() const { return params_; }
  std::vector<std::string> layer_names() const;
  std::size_t layer_index(const std::string& name) const;

  // Fan-in scaled normal weights, zero biases.
  std::vector<double> initialize(std::uint64_t seed) const;

  std::vector<double> forward(std::span<const double> theta, const Tensor& x, Tape* tape) const;

  // Accumulates d(objective)/d(theta) into d_theta (skipped when empty) and
  // optionally records the gradient at one layer boundary.
  void backward(std::span<const double> theta, const Tape& tape,
                std::span<const double> d_features, std::span<double> d_theta,
                ActivationCapture* capture = nullptr) const;

  // Features computed from a given activation at a layer boundary onward.
  std::vector<double> forward_from(std::span<const double> theta, std::size_t layer,
                                   const Tensor& activation) const;

  // Activation at a layer boundary for input x.
  Tensor activation_at(std::span<const double> theta, const Tensor& x, std::size_t layer) const;

 private:
  struct Conv {
    std::size_t cin = 0, cout = 0, k = 1;
    std::array<std::size_t, 3> stride{1, 1, 1};
    std::size_t w_off = 0, b_off = 0;
  };
  struct SE {
    std::size_t channels = 0, hidden = 0;
    std::size_t w1 = 0, b1 = 0, w2 = 0, b2 = 0;
  };
  struct Block {
    std::size_t stage = 0;
    std::vector<Conv> convs;
    SE se;
    std::optional<Conv> shortcut;
  };

  Conv add_conv(const std::string& name, std::size_t cin, std::size_t cout, std::size_t k,
                std::array<std::size_t, 3> stride);
  std::size_t add_param(const std::string& name, std::size_t size, std::size_t fan_in, bool bias);

  Tensor conv_forward(const Conv& c, std::span<const double> theta, const Tensor& x,
                      ConvTape* tape) const;
  Tensor conv_backward(const Conv& c, std::span<const double> theta, const ConvTape& tape,
                       const Tensor& dy, std::span<double> d_theta) const;
  Tensor se_forward(const SE& se, std::span<const double> theta, const Tensor& x, SETape* tape) const;
  Tensor se_backward(const SE& se, std::span<const double> theta, const SETape& tape,
                     const Tensor& dy, std::span<double> d_theta) const;
  Tensor block_forward(const Block& b, std::span<const double> theta, const Tensor& x,
                       BlockTape* tape) const;
  Tensor block_backward(const Block& b, std::span<const double> theta, const BlockTape& tape,
                        const Tensor& dy, std::span<double> d_theta) const;

  EncoderConfig config_;
  std::vector<ParameterInfo> params_;
  std::size_t parameter_count_ = 0;
  Conv stem_;
  std::vector<Block> blocks_;
};

std::vector<double> global_average_pool(const Tensor& x);

struct EncoderState {
  EncoderConfig config;
  std::string window_name;
  bool trainable = true;
  std::vector<double> encoder_params;  // theta
  std::vector<double> head_params;     // phi: D weights then bias
  std::optional<NormStats> norm_stats;
};

EncoderState build_encoder(const EncoderConfig& config, std::uint64_t seed,
                           const std::string& window_name = "");

std::vector<double> forward_features(const EncoderState& state, const Tensor& x);
std::vector<std::vector<double>> forward_features(const EncoderState& state,
                                                  std::span<const Tensor> batch);

struct Logit {
  double z = 0.0;
  double probability() const;
};

double sigmoid(double z);
Logit forward_logit(const EncoderState& state, std::span<const double> features);
Logit forward_logit(std::span<const double> head, std::span<const double> features);

std::vector<std::uint8_t> serialize_checkpoint(const EncoderState& state);
EncoderState deserialize_checkpoint(std::span<const std::uint8_t> bytes);
void save_checkpoint(const EncoderState& state, const std::filesystem::path& path);
EncoderState load_checkpoint(const std::filesystem::path& path);
// Rejects a checkpoint whose architecture differs from `expected`.
EncoderState load_checkpoint(const std::filesystem::path& path, const EncoderConfig& expected);

std::string checkpoint_hash(const EncoderState& state);
std::string parameter_hash(std::span<const double> params);

}  // namespace xwd
