#include "xwd/model.hpp"

#include <cblas.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

#include <nlohmann/json.hpp>

#include "xwd/error.hpp"
#include "xwd/hash.hpp"
#include "xwd/random.hpp"
#include "xwd/serialization.hpp"

namespace xwd {

using nlohmann::json;

// --- configuration ----------------------------------------------------------

EncoderConfig EncoderConfig::tiny(std::array<std::size_t, 3> input_shape) {
  EncoderConfig c;
  c.input_shape = input_shape;
  return c;
}

EncoderConfig EncoderConfig::se_resnet50(std::array<std::size_t, 3> input_shape) {
  EncoderConfig c;
  c.feature_dim = 2048;
  c.stem_channels = 64;
  c.stem_kernel = 7;
  c.stem_stride = {2, 2, 2};
  c.stage_channels = {256, 512, 1024, 2048};
  c.blocks_per_stage = {3, 4, 6, 3};
  c.stage_strides = {1, 2, 2, 2};
  c.block = BlockKind::kBottleneck;
  c.bottleneck_divisor = 4;
  c.input_shape = input_shape;
  c.se_reduction = 16;
  return c;
}

void EncoderConfig::validate() const {
  auto fail = [](const std::string& msg) { throw Error(ErrorKind::kInvalidConfig, msg); };
  if (stage_channels.empty()) fail("at least one stage is required");
  if (blocks_per_stage.size() != stage_channels.size() ||
      stage_strides.size() != stage_channels.size()) {
    fail("stage_channels, blocks_per_stage and stage_strides must have equal length");
  }
  if (feature_dim != stage_channels.back()) {
    fail("feature_dim must equal the final stage's channel count");
  }
  if (se_reduction == 0) fail("se_reduction must be positive");
  if (stem_channels == 0 || stem_kernel == 0 || stem_kernel % 2 == 0) {
    fail("stem needs positive channels and an odd kernel");
  }
  for (auto s : stem_stride) {
    if (s == 0) fail("strides must be positive");
  }
  for (std::size_t i = 0; i < stage_channels.size(); ++i) {
    if (stage_channels[i] == 0 || blocks_per_stage[i] == 0 || stage_strides[i] == 0) {
      fail("stage channels, block counts and strides must be positive");
    }
    if (stage_channels[i] % se_reduction != 0) {
      fail("se_reduction must divide every stage's channel count");
    }
    if (block == BlockKind::kBottleneck &&
        (bottleneck_divisor == 0 || stage_channels[i] % bottleneck_divisor != 0)) {
      fail("bottleneck_divisor must divide every stage's channel count");
    }
  }
  for (auto s : input_shape) {
    if (s == 0) fail("input_shape entries must be positive");
  }
}

// --- construction -----------------------------------------------------------

std::size_t Encoder::add_param(const std::string& name, std::size_t size, std::size_t fan_in,
                               bool bias) {
  params_.push_back({name, parameter_count_, size, fan_in, bias});
  parameter_count_ += size;
  return params_.back().offset;
}

Encoder::Conv Encoder::add_conv(const std::string& name, std::size_t cin, std::size_t cout,
                                std::size_t k, std::array<std::size_t, 3> stride) {
  Conv c;
  c.cin = cin;
  c.cout = cout;
  c.k = k;
  c.stride = stride;
  const std::size_t fan_in = cin * k * k * k;
  c.w_off = add_param(name + ".weight", cout * fan_in, fan_in, false);
  c.b_off = add_param(name + ".bias", cout, fan_in, true);
  return c;
}

Encoder::Encoder(EncoderConfig config) : config_(std::move(config)) {
  config_.validate();
  stem_ = add_conv("stem", 1, config_.stem_channels, config_.stem_kernel, config_.stem_stride);
  std::size_t cin = config_.stem_channels;
  for (std::size_t s = 0; s < config_.stage_channels.size(); ++s) {
    const std::size_t cout = config_.stage_channels[s];
    for (std::size_t b = 0; b < config_.blocks_per_stage[s]; ++b) {
      const std::string prefix = "stage" + std::to_string(s) + ".block" + std::to_string(b);
      const std::size_t st = b == 0 ? config_.stage_strides[s] : 1;
      const std::array<std::size_t, 3> stride = {st, st, st};
      Block block;
      block.stage = s;
      if (config_.block == BlockKind::kBasic) {
        block.convs.push_back(add_conv(prefix + ".conv1", cin, cout, 3, stride));
        block.convs.push_back(add_conv(prefix + ".conv2", cout, cout, 3, {1, 1, 1}));
      } else {
        const std::size_t width = cout / config_.bottleneck_divisor;
        block.convs.push_back(add_conv(prefix + ".conv1", cin, width, 1, {1, 1, 1}));
        block.convs.push_back(add_conv(prefix + ".conv2", width, width, 3, stride));
        block.convs.push_back(add_conv(prefix + ".conv3", width, cout, 1, {1, 1, 1}));
      }
      block.se.channels = cout;
      block.se.hidden = cout / config_.se_reduction;
      block.se.w1 = add_param(prefix + ".se.fc1.weight", block.se.hidden * cout, cout, false);
      block.se.b1 = add_param(prefix + ".se.fc1.bias", block.se.hidden, cout, true);
      block.se.w2 = add_param(prefix + ".se.fc2.weight", cout * block.se.hidden, block.se.hidden, false);
      block.se.b2 = add_param(prefix + ".se.fc2.bias", cout, block.se.hidden, true);
      if (cin != cout || st != 1) {
        block.shortcut = add_conv(prefix + ".shortcut", cin, cout, 1, stride);
      }
      blocks_.push_back(std::move(block));
      cin = cout;
    }
  }
}

std::vector<std::string> Encoder::layer_names() const {
  std::vector<std::string> names = {"stem"};
  for (std::size_t s = 0; s < config_.stage_channels.size(); ++s) {
    names.push_back("stage" + std::to_string(s));
  }
  return names;
}

std::size_t Encoder::layer_index(const std::string& name) const {
  const auto names = layer_names();
  for (std::size_t i = 0; i < names.size(); ++i) {
    if (names[i] == name) return i;
  }
  throw Error(ErrorKind::kUnknownLayer, "encoder has no layer '" + name + "'");
}

std::vector<double> Encoder::initialize(std::uint64_t seed) const {
  std::vector<double> theta(parameter_count_, 0.0);
  Rng rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  for (const auto& p : params_) {
    if (p.is_bias) continue;
    const double scale = std::sqrt(2.0 / static_cast<double>(p.fan_in));
    for (std::size_t i = 0; i < p.size; ++i) theta[p.offset + i] = scale * gauss(rng);
  }
  return theta;
}

// --- convolution ------------------------------------------------------------

namespace {

std::size_t conv_out(std::size_t in, std::size_t k, std::size_t stride) {
  const std::size_t pad = k / 2;
  return (in + 2 * pad - k) / stride + 1;
}

void im2col(const Tensor& x, std::size_t k, const std::array<std::size_t, 3>& stride,
            const std::array<std::size_t, 4>& out, std::vector<double>& cols) {
  const std::size_t pad = k / 2;
  const std::size_t D = x.depth(), H = x.height(), W = x.width();
  const std::size_t Do = out[1], Ho = out[2], Wo = out[3];
  const std::size_t P = Do * Ho * Wo;
  cols.assign(x.channels() * k * k * k * P, 0.0);
  const double* src = x.data().data();
  std::size_t row = 0;
  for (std::size_t ci = 0; ci < x.channels(); ++ci) {
    for (std::size_t kz = 0; kz < k; ++kz) {
      for (std::size_t ky = 0; ky < k; ++ky) {
        for (std::size_t kx = 0; kx < k; ++kx, ++row) {
          double* dst = cols.data() + row * P;
          for (std::size_t oz = 0; oz < Do; ++oz) {
            const std::ptrdiff_t iz = static_cast<std::ptrdiff_t>(oz * stride[0] + kz) - static_cast<std::ptrdiff_t>(pad);
            if (iz < 0 || iz >= static_cast<std::ptrdiff_t>(D)) continue;
            for (std::size_t oy = 0; oy < Ho; ++oy) {
              const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride[1] + ky) - static_cast<std::ptrdiff_t>(pad);
              if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(H)) continue;
              const double* line = src + ((ci * D + static_cast<std::size_t>(iz)) * H + static_cast<std::size_t>(iy)) * W;
              double* out_line = dst + (oz * Ho + oy) * Wo;
              for (std::size_t ox = 0; ox < Wo; ++ox) {
                const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride[2] + kx) - static_cast<std::ptrdiff_t>(pad);
                if (ix >= 0 && ix < static_cast<std::ptrdiff_t>(W)) out_line[ox] = line[ix];
              }
            }
          }
        }
      }
    }
  }
}

void col2im(const std::vector<double>& cols, std::size_t k, const std::array<std::size_t, 3>& stride,
            const std::array<std::size_t, 4>& out, Tensor& dx) {
  const std::size_t pad = k / 2;
  const std::size_t D = dx.depth(), H = dx.height(), W = dx.width();
  const std::size_t Do = out[1], Ho = out[2], Wo = out[3];
  const std::size_t P = Do * Ho * Wo;
  double* dst = dx.data().data();
  std::size_t row = 0;
  for (std::size_t ci = 0; ci < dx.channels(); ++ci) {
    for (std::size_t kz = 0; kz < k; ++kz) {
      for (std::size_t ky = 0; ky < k; ++ky) {
        for (std::size_t kx = 0; kx < k; ++kx, ++row) {
          const double* src = cols.data() + row * P;
          for (std::size_t oz = 0; oz < Do; ++oz) {
            const std::ptrdiff_t iz = static_cast<std::ptrdiff_t>(oz * stride[0] + kz) - static_cast<std::ptrdiff_t>(pad);
            if (iz < 0 || iz >= static_cast<std::ptrdiff_t>(D)) continue;
            for (std::size_t oy = 0; oy < Ho; ++oy) {
              const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride[1] + ky) - static_cast<std::ptrdiff_t>(pad);
              if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(H)) continue;
              double* line = dst + ((ci * D + static_cast<std::size_t>(iz)) * H + static_cast<std::size_t>(iy)) * W;
              const double* in_line = src + (oz * Ho + oy) * Wo;
              for (std::size_t ox = 0; ox < Wo; ++ox) {
                const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride[2] + kx) - static_cast<std::ptrdiff_t>(pad);
                if (ix >= 0 && ix < static_cast<std::ptrdiff_t>(W)) line[ix] += in_line[ox];
              }
            }
          }
        }
      }
    }
  }
}

void relu_inplace(Tensor& t) {
  for (auto& v : t.data()) v = v > 0.0 ? v : 0.0;
}

// dy masked by the positive part of a ReLU output.
Tensor relu_backward(const Tensor& output, const Tensor& dy) {
  Tensor dx = dy;
  const auto& o = output.data();
  auto& d = dx.data();
  for (std::size_t i = 0; i < d.size(); ++i) {
    if (!(o[i] > 0.0)) d[i] = 0.0;
  }
  return dx;
}

}  // namespace

Tensor Encoder::conv_forward(const Conv& c, std::span<const double> theta, const Tensor& x,
                             ConvTape* tape) const {
  if (x.channels() != c.cin) {
    throw Error(ErrorKind::kShapeMismatch, "convolution expects " + std::to_string(c.cin) +
                                               " channels, got " + std::to_string(x.channels()));
  }
  const std::array<std::size_t, 4> out = {c.cout, conv_out(x.depth(), c.k, c.stride[0]),
                                          conv_out(x.height(), c.k, c.stride[1]),
                                          conv_out(x.width(), c.k, c.stride[2])};
  const std::size_t P = out[1] * out[2] * out[3];
  const std::size_t K = c.cin * c.k * c.k * c.k;
  std::vector<double> local;
  std::vector<double>& cols = tape ? tape->cols : local;
  im2col(x, c.k, c.stride, out, cols);
  Tensor y(out[0], out[1], out[2], out[3]);
  const double* bias = theta.data() + c.b_off;
  for (std::size_t o = 0; o < c.cout; ++o) {
    std::fill_n(y.data().data() + o * P, P, bias[o]);
  }
  cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasNoTrans, static_cast<int>(c.cout),
              static_cast<int>(P), static_cast<int>(K), 1.0, theta.data() + c.w_off,
              static_cast<int>(K), cols.data(), static_cast<int>(P), 1.0, y.data().data(),
              static_cast<int>(P));
  if (tape) {
    tape->in_dims = {x.channels(), x.depth(), x.height(), x.width()};
    tape->out_dims = out;
  }
  return y;
}

Tensor Encoder::conv_backward(const Conv& c, std::span<const double> theta, const ConvTape& tape,
                              const Tensor& dy, std::span<double> d_theta) const {
  const auto& out = tape.out_dims;
  const std::size_t P = out[1] * out[2] * out[3];
  const std::size_t K = c.cin * c.k * c.k * c.k;
  if (!d_theta.empty()) {
    cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasTrans, static_cast<int>(c.cout),
                static_cast<int>(K), static_cast<int>(P), 1.0, dy.data().data(),
                static_cast<int>(P), tape.cols.data(), static_cast<int>(P), 1.0,
                d_theta.data() + c.w_off, static_cast<int>(K));
    for (std::size_t o = 0; o < c.cout; ++o) {
      const double* row = dy.data().data() + o * P;
      double s = 0.0;
      for (std::size_t p = 0; p < P; ++p) s += row[p];
      d_theta[c.b_off + o] += s;
    }
  }
  std::vector<double> dcols(K * P);
  cblas_dgemm(CblasRowMajor, CblasTrans, CblasNoTrans, static_cast<int>(K), static_cast<int>(P),
              static_cast<int>(c.cout), 1.0, theta.data() + c.w_off, static_cast<int>(K),
              dy.data().data(), static_cast<int>(P), 0.0, dcols.data(), static_cast<int>(P));
  Tensor dx(tape.in_dims[0], tape.in_dims[1], tape.in_dims[2], tape.in_dims[3]);
  col2im(dcols, c.k, c.stride, out, dx);
  return dx;
}

// --- squeeze-excitation -----------------------------------------------------

Tensor Encoder::se_forward(const SE& se, std::span<const double> theta, const Tensor& x,
                           SETape* tape) const {
  const std::size_t C = se.channels, R = se.hidden, N = x.spatial();
  std::vector<double> s(C), a(R), g(C);
  for (std::size_t c = 0; c < C; ++c) {
    double sum = 0.0;
    for (double v : x.channel(c)) sum += v;
    s[c] = sum / static_cast<double>(N);
  }
  for (std::size_t r = 0; r < R; ++r) {
    double u = theta[se.b1 + r];
    for (std::size_t c = 0; c < C; ++c) u += theta[se.w1 + r * C + c] * s[c];
    a[r] = u > 0.0 ? u : 0.0;
  }
  for (std::size_t c = 0; c < C; ++c) {
    double v = theta[se.b2 + c];
    for (std::size_t r = 0; r < R; ++r) v += theta[se.w2 + c * R + r] * a[r];
    g[c] = sigmoid(v);
  }
  Tensor y = x;
  for (std::size_t c = 0; c < C; ++c) {
    for (auto& v : y.channel(c)) v *= g[c];
  }
  if (tape) {
    tape->input = x;
    tape->squeezed = std::move(s);
    tape->hidden = std::move(a);
    tape->gate = std::move(g);
  }
  return y;
}

Tensor Encoder::se_backward(const SE& se, std::span<const double> theta, const SETape& tape,
                            const Tensor& dy, std::span<double> d_theta) const {
  const std::size_t C = se.channels, R = se.hidden, N = tape.input.spatial();
  const auto& s = tape.squeezed;
  const auto& a = tape.hidden;
  const auto& g = tape.gate;
  std::vector<double> dv(C), da(R, 0.0), ds(C, 0.0);
  for (std::size_t c = 0; c < C; ++c) {
    const auto xc = tape.input.channel(c);
    const auto dyc = dy.channel(c);
    double dg = 0.0;
    for (std::size_t n = 0; n < N; ++n) dg += dyc[n] * xc[n];
    dv[c] = dg * g[c] * (1.0 - g[c]);
  }
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t r = 0; r < R; ++r) da[r] += theta[se.w2 + c * R + r] * dv[c];
  }
  std::vector<double> du(R);
  for (std::size_t r = 0; r < R; ++r) du[r] = a[r] > 0.0 ? da[r] : 0.0;
  for (std::size_t r = 0; r < R; ++r) {
    for (std::size_t c = 0; c < C; ++c) ds[c] += theta[se.w1 + r * C + c] * du[r];
  }
  if (!d_theta.empty()) {
    for (std::size_t c = 0; c < C; ++c) {
      for (std::size_t r = 0; r < R; ++r) d_theta[se.w2 + c * R + r] += dv[c] * a[r];
      d_theta[se.b2 + c] += dv[c];
    }
    for (std::size_t r = 0; r < R; ++r) {
      for (std::size_t c = 0; c < C; ++c) d_theta[se.w1 + r * C + c] += du[r] * s[c];
      d_theta[se.b1 + r] += du[r];
    }
  }
  Tensor dx = dy;
  for (std::size_t c = 0; c < C; ++c) {
    const double spread = ds[c] / static_cast<double>(N);
    for (auto& v : dx.channel(c)) v = v * g[c] + spread;
  }
  return dx;
}

// --- residual blocks --------------------------------------------------------

Tensor Encoder::block_forward(const Block& b, std::span<const double> theta, const Tensor& x,
                              BlockTape* tape) const {
  if (tape) {
    tape->convs.resize(b.convs.size());
    tape->relu_outputs.resize(b.convs.size() - 1);
  }
  Tensor h = x;
  for (std::size_t i = 0; i < b.convs.size(); ++i) {
    h = conv_forward(b.convs[i], theta, h, tape ? &tape->convs[i] : nullptr);
    if (i + 1 < b.convs.size()) {
      relu_inplace(h);
      if (tape) tape->relu_outputs[i] = h;
    }
  }
  Tensor out = se_forward(b.se, theta, h, tape ? &tape->se : nullptr);
  const Tensor sc = b.shortcut ? conv_forward(*b.shortcut, theta, x, tape ? &tape->shortcut : nullptr) : x;
  auto& o = out.data();
  const auto& s = sc.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = std::max(0.0, o[i] + s[i]);
  if (tape) tape->output = out;
  return out;
}

Tensor Encoder::block_backward(const Block& b, std::span<const double> theta, const BlockTape& tape,
                               const Tensor& dy, std::span<double> d_theta) const {
  const Tensor d_sum = relu_backward(tape.output, dy);
  Tensor dh = se_backward(b.se, theta, tape.se, d_sum, d_theta);
  for (std::size_t i = b.convs.size(); i-- > 0;) {
    dh = conv_backward(b.convs[i], theta, tape.convs[i], dh, d_theta);
    if (i > 0) dh = relu_backward(tape.relu_outputs[i - 1], dh);
  }
  if (b.shortcut) {
    const Tensor d_sc = conv_backward(*b.shortcut, theta, tape.shortcut, d_sum, d_theta);
    auto& d = dh.data();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += d_sc.data()[i];
  } else {
    auto& d = dh.data();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += d_sum.data()[i];
  }
  return dh;
}

// --- encoder passes ---------------------------------------------------------

std::vector<double> global_average_pool(const Tensor& x) {
  std::vector<double> out(x.channels());
  for (std::size_t c = 0; c < x.channels(); ++c) {
    double s = 0.0;
    for (double v : x.channel(c)) s += v;
    out[c] = s / static_cast<double>(x.spatial());
  }
  return out;
}

std::vector<double> Encoder::forward(std::span<const double> theta, const Tensor& x, Tape* tape) const {
  if (theta.size() != parameter_count_) {
    throw Error(ErrorKind::kDimensionMismatch, "parameter vector has " + std::to_string(theta.size()) +
                                                   " entries, encoder needs " +
                                                   std::to_string(parameter_count_));
  }
  const auto& in = config_.input_shape;
  if (x.channels() != 1 || x.depth() != in[0] || x.height() != in[1] || x.width() != in[2]) {
    throw Error(ErrorKind::kShapeMismatch,
                "input must be (1, " + std::to_string(in[0]) + ", " + std::to_string(in[1]) + ", " +
                    std::to_string(in[2]) + ")");
  }
  Tensor h = conv_forward(stem_, theta, x, tape ? &tape->stem : nullptr);
  relu_inplace(h);
  if (tape) {
    tape->stem_output = h;
    tape->blocks.resize(blocks_.size());
  }
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    h = block_forward(blocks_[i], theta, h, tape ? &tape->blocks[i] : nullptr);
  }
  return global_average_pool(h);
}

void Encoder::backward(std::span<const double> theta, const Tape& tape,
                       std::span<const double> d_features, std::span<double> d_theta,
                       ActivationCapture* capture) const {
  if (d_features.size() != config_.feature_dim) {
    throw Error(ErrorKind::kDimensionMismatch, "feature gradient has wrong length");
  }
  if (!d_theta.empty() && d_theta.size() != parameter_count_) {
    throw Error(ErrorKind::kDimensionMismatch, "gradient buffer has wrong length");
  }
  const Tensor& last = tape.blocks.empty() ? tape.stem_output : tape.blocks.back().output;
  Tensor dh(last.channels(), last.depth(), last.height(), last.width());
  for (std::size_t c = 0; c < last.channels(); ++c) {
    const double v = d_features[c] / static_cast<double>(last.spatial());
    for (auto& e : dh.channel(c)) e = v;
  }
  const std::size_t stop_layer = capture ? capture->layer : 0;
  for (std::size_t i = blocks_.size(); i-- > 0;) {
    const bool last_of_stage = i + 1 == blocks_.size() || blocks_[i + 1].stage != blocks_[i].stage;
    if (capture && last_of_stage && blocks_[i].stage + 1 == capture->layer) {
      capture->activation = tape.blocks[i].output;
      capture->gradient = dh;
      if (d_theta.empty()) return;
    }
    dh = block_backward(blocks_[i], theta, tape.blocks[i], dh, d_theta);
  }
  if (capture && stop_layer == 0) {
    capture->activation = tape.stem_output;
    capture->gradient = dh;
    if (d_theta.empty()) return;
  }
  dh = relu_backward(tape.stem_output, dh);
  if (!d_theta.empty()) conv_backward(stem_, theta, tape.stem, dh, d_theta);
}

std::vector<double> Encoder::forward_from(std::span<const double> theta, std::size_t layer,
                                          const Tensor& activation) const {
  if (layer > config_.stage_channels.size()) {
    throw Error(ErrorKind::kUnknownLayer, "layer index out of range");
  }
  Tensor h = activation;
  for (const auto& b : blocks_) {
    if (b.stage + 1 <= layer) continue;
    h = block_forward(b, theta, h, nullptr);
  }
  return global_average_pool(h);
}

Tensor Encoder::activation_at(std::span<const double> theta, const Tensor& x, std::size_t layer) const {
  if (layer > config_.stage_channels.size()) {
    throw Error(ErrorKind::kUnknownLayer, "layer index out of range");
  }
  Tensor h = conv_forward(stem_, theta, x, nullptr);
  relu_inplace(h);
  for (const auto& b : blocks_) {
    if (b.stage + 1 > layer) break;
    h = block_forward(b, theta, h, nullptr);
  }
  return h;
}

// --- state ------------------------------------------------------------------

EncoderState build_encoder(const EncoderConfig& config, std::uint64_t seed,
                           const std::string& window_name) {
  const Encoder encoder(config);
  EncoderState state;
  state.config = config;
  state.window_name = window_name;
  state.trainable = true;
  state.encoder_params = encoder.initialize(derive_seed(seed, "encoder"));
  state.head_params.assign(config.feature_dim + 1, 0.0);
  Rng rng(derive_seed(seed, "head"));
  std::normal_distribution<double> gauss(0.0, 1.0 / std::sqrt(static_cast<double>(config.feature_dim)));
  for (std::size_t i = 0; i < config.feature_dim; ++i) state.head_params[i] = gauss(rng);
  return state;
}

std::vector<double> forward_features(const EncoderState& state, const Tensor& x) {
  const Encoder encoder(state.config);
  return encoder.forward(state.encoder_params, x, nullptr);
}

std::vector<std::vector<double>> forward_features(const EncoderState& state,
                                                  std::span<const Tensor> batch) {
  const Encoder encoder(state.config);
  std::vector<std::vector<double>> out;
  out.reserve(batch.size());
  for (const auto& x : batch) out.push_back(encoder.forward(state.encoder_params, x, nullptr));
  return out;
}

double sigmoid(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

double Logit::probability() const { return sigmoid(z); }

Logit forward_logit(std::span<const double> head, std::span<const double> features) {
  if (head.size() != features.size() + 1) {
    throw Error(ErrorKind::kDimensionMismatch, "head expects " + std::to_string(head.size() - 1) +
                                                   " features, got " + std::to_string(features.size()));
  }
  double z = head.back();
  for (std::size_t i = 0; i < features.size(); ++i) z += head[i] * features[i];
  return Logit{z};
}

Logit forward_logit(const EncoderState& state, std::span<const double> features) {
  if (features.size() != state.config.feature_dim) {
    throw Error(ErrorKind::kDimensionMismatch, "feature vector length differs from D");
  }
  return forward_logit(state.head_params, features);
}

// --- checkpoints ------------------------------------------------------------

namespace {

constexpr char kCheckpointMagic[4] = {'X', 'W', 'C', 'K'};
constexpr std::uint32_t kCheckpointVersion = 1;

void append_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void append_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

struct Reader {
  std::span<const std::uint8_t> bytes;
  std::size_t pos = 0;

  void need(std::size_t n) const {
    if (pos + n > bytes.size()) throw Error(ErrorKind::kCorruptCheckpoint, "checkpoint is truncated");
  }
  std::uint64_t u(int width) {
    need(static_cast<std::size_t>(width));
    std::uint64_t v = 0;
    for (int i = 0; i < width; ++i) v |= static_cast<std::uint64_t>(bytes[pos + i]) << (8 * i);
    pos += static_cast<std::size_t>(width);
    return v;
  }
};

}  // namespace

std::vector<std::uint8_t> serialize_checkpoint(const EncoderState& state) {
  json meta;
  meta["config"] = state.config;
  meta["window_name"] = state.window_name;
  meta["trainable"] = state.trainable;
  if (state.norm_stats) meta["norm_stats"] = *state.norm_stats;
  const Encoder encoder(state.config);
  json table = json::array();
  for (const auto& p : encoder.parameters()) table.push_back({p.name, p.size});
  table.push_back({"head", state.head_params.size()});
  meta["parameters"] = table;
  const std::string meta_text = meta.dump();

  std::vector<std::uint8_t> out(kCheckpointMagic, kCheckpointMagic + 4);
  append_u32(out, kCheckpointVersion);
  append_u32(out, static_cast<std::uint32_t>(meta_text.size()));
  out.insert(out.end(), meta_text.begin(), meta_text.end());
  append_u64(out, state.encoder_params.size());
  for (double v : state.encoder_params) append_u64(out, std::bit_cast<std::uint64_t>(v));
  append_u64(out, state.head_params.size());
  for (double v : state.head_params) append_u64(out, std::bit_cast<std::uint64_t>(v));
  return out;
}

EncoderState deserialize_checkpoint(std::span<const std::uint8_t> bytes) {
  Reader r{bytes};
  r.need(4);
  if (std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0) {
    throw Error(ErrorKind::kCorruptCheckpoint, "bad checkpoint magic");
  }
  r.pos = 4;
  if (r.u(4) != kCheckpointVersion) throw Error(ErrorKind::kCorruptCheckpoint, "unsupported checkpoint version");
  const auto meta_len = static_cast<std::size_t>(r.u(4));
  r.need(meta_len);
  json meta;
  EncoderState state;
  try {
    meta = json::parse(bytes.begin() + static_cast<std::ptrdiff_t>(r.pos),
                       bytes.begin() + static_cast<std::ptrdiff_t>(r.pos + meta_len));
    state.config = meta.at("config").get<EncoderConfig>();
    state.window_name = meta.at("window_name").get<std::string>();
    state.trainable = meta.at("trainable").get<bool>();
    if (meta.contains("norm_stats")) state.norm_stats = meta.at("norm_stats").get<NormStats>();
  } catch (const json::exception& e) {
    throw Error(ErrorKind::kCorruptCheckpoint, std::string("bad checkpoint metadata: ") + e.what());
  }
  r.pos += meta_len;
  const auto n_theta = static_cast<std::size_t>(r.u(8));
  r.need(n_theta * 8);
  state.encoder_params.resize(n_theta);
  for (auto& v : state.encoder_params) v = std::bit_cast<double>(r.u(8));
  const auto n_phi = static_cast<std::size_t>(r.u(8));
  r.need(n_phi * 8);
  state.head_params.resize(n_phi);
  for (auto& v : state.head_params) v = std::bit_cast<double>(r.u(8));
  if (r.pos != bytes.size()) throw Error(ErrorKind::kCorruptCheckpoint, "trailing bytes in checkpoint");
  try {
    const Encoder encoder(state.config);
    if (encoder.parameter_count() != n_theta || n_phi != state.config.feature_dim + 1) {
      throw Error(ErrorKind::kCorruptCheckpoint, "parameter count disagrees with stored config");
    }
  } catch (const Error& e) {
    if (e.kind() == ErrorKind::kCorruptCheckpoint) throw;
    throw Error(ErrorKind::kCorruptCheckpoint, e.what());
  }
  return state;
}

void save_checkpoint(const EncoderState& state, const std::filesystem::path& path) {
  const auto bytes = serialize_checkpoint(state);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorKind::kIo, "cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

EncoderState load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::kIo, "cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize_checkpoint(bytes);
}

EncoderState load_checkpoint(const std::filesystem::path& path, const EncoderConfig& expected) {
  EncoderState state = load_checkpoint(path);
  if (state.config.feature_dim != expected.feature_dim) {
    throw Error(ErrorKind::kDimensionMismatch,
                "checkpoint has D=" + std::to_string(state.config.feature_dim) + ", expected D=" +
                    std::to_string(expected.feature_dim));
  }
  if (!(state.config == expected)) {
    throw Error(ErrorKind::kDimensionMismatch, "checkpoint architecture differs from the expected config");
  }
  return state;
}

std::string checkpoint_hash(const EncoderState& state) { return sha256_hex(serialize_checkpoint(state)); }

std::string parameter_hash(std::span<const double> params) {
  std::vector<std::uint8_t> bytes;
  bytes.reserve(params.size() * 8);
  for (double v : params) append_u64(bytes, std::bit_cast<std::uint64_t>(v));
  return sha256_hex(bytes);
}

}  // namespace xwd
