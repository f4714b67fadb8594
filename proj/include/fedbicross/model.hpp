#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "fedbicross/errors.hpp"
#include "fedbicross/rng.hpp"
#include "fedbicross/tensor.hpp"

namespace fedbicross {

// Variance floor for batch-norm running statistics.
inline constexpr double kBnVarFloor = 1e-8;
// Epsilon inside batch-norm normalization denominators.
inline constexpr double kBnEps = 1e-5;

enum class LayerKind { Dense, Conv2d, BatchNorm, ReLU, Tanh, Flatten };

enum class BnMode {
  BatchStats,    // normalize by the current batch; stats retrievable
  RunningStats,  // normalize by stored running statistics
};

struct LayerSpec {
  LayerKind kind = LayerKind::Dense;
  std::size_t in = 0;      // Dense: features in; Conv2d: channels in
  std::size_t out = 0;     // Dense: features out; Conv2d: channels out
  std::size_t kernel = 0;  // Conv2d kernel size (square)
  std::size_t pad = 0;     // Conv2d zero padding per side

  bool operator==(const LayerSpec&) const = default;
};

inline LayerSpec dense(std::size_t in, std::size_t out) {
  return {LayerKind::Dense, in, out, 0, 0};
}
inline LayerSpec conv2d(std::size_t in_ch, std::size_t out_ch, std::size_t kernel,
                        std::size_t pad) {
  return {LayerKind::Conv2d, in_ch, out_ch, kernel, pad};
}
inline LayerSpec batch_norm(std::size_t features) {
  return {LayerKind::BatchNorm, features, features, 0, 0};
}
inline LayerSpec relu() { return {LayerKind::ReLU, 0, 0, 0, 0}; }
inline LayerSpec tanh_layer() { return {LayerKind::Tanh, 0, 0, 0, 0}; }
inline LayerSpec flatten() { return {LayerKind::Flatten, 0, 0, 0, 0}; }

// Static description of a classifier: per-sample input shape, layer stack,
// and the class count its logits must end at.
struct Architecture {
  std::vector<std::size_t> input_shape;  // per-sample, e.g. {2} or {1, 8, 8}
  std::vector<LayerSpec> layers;
  std::size_t num_classes = 0;

  // Walks the layer stack, returning the per-sample shape after each layer.
  // Throws InputError on any inconsistency.
  std::vector<std::vector<std::size_t>> infer_shapes() const {
    if (input_shape.empty()) throw InputError("architecture: empty input shape");
    if (num_classes < 2) throw InputError("architecture: num_classes must be >= 2");
    std::vector<std::vector<std::size_t>> shapes;
    shapes.push_back(input_shape);
    std::vector<std::size_t> cur = input_shape;
    for (std::size_t li = 0; li < layers.size(); ++li) {
      const LayerSpec& l = layers[li];
      const std::string where = "architecture: layer " + std::to_string(li);
      switch (l.kind) {
        case LayerKind::Dense: {
          if (cur.size() != 1 || cur[0] != l.in)
            throw InputError(where + ": dense expects flat input of " +
                             std::to_string(l.in) + " features");
          if (l.out == 0) throw InputError(where + ": dense output size 0");
          cur = {l.out};
          break;
        }
        case LayerKind::Conv2d: {
          if (cur.size() != 3 || cur[0] != l.in)
            throw InputError(where + ": conv2d expects [C,H,W] input with C = " +
                             std::to_string(l.in));
          if (l.out == 0 || l.kernel == 0)
            throw InputError(where + ": conv2d needs channels and kernel > 0");
          std::size_t h = cur[1] + 2 * l.pad, w = cur[2] + 2 * l.pad;
          if (h < l.kernel || w < l.kernel)
            throw InputError(where + ": conv2d kernel larger than padded input");
          cur = {l.out, h - l.kernel + 1, w - l.kernel + 1};
          break;
        }
        case LayerKind::BatchNorm: {
          std::size_t ch = cur.size() == 3 ? cur[0] : (cur.size() == 1 ? cur[0] : 0);
          if (ch == 0 || ch != l.in)
            throw InputError(where + ": batch_norm feature count mismatch");
          break;
        }
        case LayerKind::ReLU:
        case LayerKind::Tanh:
          break;
        case LayerKind::Flatten: {
          std::size_t n = 1;
          for (auto e : cur) n *= e;
          cur = {n};
          break;
        }
      }
      shapes.push_back(cur);
    }
    if (cur.size() != 1 || cur[0] != num_classes)
      throw InputError("architecture: final layer output does not match num_classes");
    return shapes;
  }

  std::size_t bn_layer_count() const {
    std::size_t n = 0;
    for (const auto& l : layers)
      if (l.kind == LayerKind::BatchNorm) ++n;
    return n;
  }

  bool operator==(const Architecture&) const = default;
};

// Small MLP: input -> [dense -> bn -> activation]* -> dense -> logits.
inline Architecture make_mlp(std::size_t input_dim,
                             const std::vector<std::size_t>& hidden,
                             std::size_t num_classes, bool with_bn = true) {
  Architecture a;
  a.input_shape = {input_dim};
  a.num_classes = num_classes;
  std::size_t cur = input_dim;
  for (std::size_t h : hidden) {
    a.layers.push_back(dense(cur, h));
    if (with_bn) a.layers.push_back(batch_norm(h));
    a.layers.push_back(relu());
    cur = h;
  }
  a.layers.push_back(dense(cur, num_classes));
  return a;
}

// Small CNN for [C,H,W] images: conv -> bn -> relu, twice, then flatten -> dense.
inline Architecture make_cnn(std::vector<std::size_t> image_shape,
                             std::size_t channels, std::size_t num_classes) {
  if (image_shape.size() != 3) throw InputError("make_cnn: image shape must be [C,H,W]");
  Architecture a;
  a.input_shape = image_shape;
  a.num_classes = num_classes;
  a.layers.push_back(conv2d(image_shape[0], channels, 3, 1));
  a.layers.push_back(batch_norm(channels));
  a.layers.push_back(relu());
  a.layers.push_back(conv2d(channels, channels, 3, 1));
  a.layers.push_back(batch_norm(channels));
  a.layers.push_back(relu());
  a.layers.push_back(flatten());
  a.layers.push_back(dense(channels * image_shape[1] * image_shape[2], num_classes));
  return a;
}

struct BatchNormState {
  std::vector<double> running_mean;
  std::vector<double> running_var;  // strictly positive, floored at kBnVarFloor
};

// Per-BN-layer statistics of the batch seen during a BatchStats forward.
struct LayerBatchStats {
  std::vector<double> mean;
  std::vector<double> var;  // biased (population) variance
};

// External loss gradients with respect to per-layer batch statistics,
// injected into the backward pass (the BN-matching regularizer path).
struct StatGradients {
  std::vector<std::vector<double>> d_mean;
  std::vector<std::vector<double>> d_var;
};

struct Gradients {
  std::vector<double> params;
  Tensor input;  // empty unless requested
};

class ForwardTrace;

// Parameterized classifier with value semantics. Parameters live in one flat
// vector; batch-norm running statistics are separate state. Immutable except
// through the explicit mutators below.
class Model {
 public:
  explicit Model(Architecture arch) : arch_(std::move(arch)) {
    layer_shapes_ = arch_.infer_shapes();
    layout_parameters();
    params_.assign(param_count_, 0.0);
    // gamma = 1 so a zero-initialized model is still well-defined
    for (std::size_t li = 0; li < arch_.layers.size(); ++li) {
      if (arch_.layers[li].kind != LayerKind::BatchNorm) continue;
      std::size_t f = arch_.layers[li].in;
      for (std::size_t c = 0; c < f; ++c) params_[param_offset_[li] + c] = 1.0;
      bn_states_.push_back({std::vector<double>(f, 0.0), std::vector<double>(f, 1.0)});
    }
  }

  static Model random_init(const Architecture& arch, RandomStream& rng) {
    Model m(arch);
    for (std::size_t li = 0; li < arch.layers.size(); ++li) {
      const LayerSpec& l = arch.layers[li];
      if (l.kind == LayerKind::Dense) {
        double scale = 1.0 / std::sqrt(static_cast<double>(l.in));
        for (std::size_t i = 0; i < l.out * l.in; ++i)
          m.params_[m.param_offset_[li] + i] = scale * rng.normal();
      } else if (l.kind == LayerKind::Conv2d) {
        std::size_t fan_in = l.in * l.kernel * l.kernel;
        double scale = 1.0 / std::sqrt(static_cast<double>(fan_in));
        for (std::size_t i = 0; i < l.out * fan_in; ++i)
          m.params_[m.param_offset_[li] + i] = scale * rng.normal();
      }
      // biases stay 0, batch-norm gamma/beta stay 1/0
    }
    return m;
  }

  const Architecture& arch() const { return arch_; }
  std::size_t parameter_count() const { return param_count_; }
  const std::vector<double>& parameters() const { return params_; }
  const std::vector<BatchNormState>& bn_states() const { return bn_states_; }
  std::size_t num_classes() const { return arch_.num_classes; }
  const std::vector<std::size_t>& input_shape() const { return arch_.input_shape; }

  // --- explicit mutators ---

  void set_parameters(std::vector<double> p) {
    if (p.size() != param_count_) throw InputError("parameter vector size mismatch");
    params_ = std::move(p);
  }

  void add_scaled_to_parameters(double a, const std::vector<double>& dir) {
    if (dir.size() != param_count_) throw InputError("parameter vector size mismatch");
    for (std::size_t i = 0; i < param_count_; ++i) params_[i] += a * dir[i];
  }

  void set_bn_states(std::vector<BatchNormState> s) {
    if (s.size() != bn_states_.size()) throw InputError("bn state count mismatch");
    for (auto& st : s)
      for (auto& v : st.running_var)
        if (v < kBnVarFloor) v = kBnVarFloor;
    bn_states_ = std::move(s);
  }

  // new = keep * old + (1 - keep) * batch, per element; variances floored.
  void update_running_stats(const std::vector<LayerBatchStats>& stats, double keep) {
    if (stats.size() != bn_states_.size())
      throw InputError("batch stats layer count mismatch");
    for (std::size_t l = 0; l < stats.size(); ++l) {
      auto& st = bn_states_[l];
      for (std::size_t c = 0; c < st.running_mean.size(); ++c) {
        st.running_mean[c] = keep * st.running_mean[c] + (1.0 - keep) * stats[l].mean[c];
        st.running_var[c] = keep * st.running_var[c] + (1.0 - keep) * stats[l].var[c];
        if (st.running_var[c] < kBnVarFloor) st.running_var[c] = kBnVarFloor;
      }
    }
  }

  Tensor forward(const Tensor& batch, BnMode mode) const;
  ForwardTrace forward_traced(const Tensor& batch, BnMode mode) const;

 private:
  friend class ForwardTrace;

  void layout_parameters() {
    param_offset_.assign(arch_.layers.size(), 0);
    std::size_t off = 0;
    for (std::size_t li = 0; li < arch_.layers.size(); ++li) {
      param_offset_[li] = off;
      const LayerSpec& l = arch_.layers[li];
      switch (l.kind) {
        case LayerKind::Dense:
          off += l.out * l.in + l.out;
          break;
        case LayerKind::Conv2d:
          off += l.out * l.in * l.kernel * l.kernel + l.out;
          break;
        case LayerKind::BatchNorm:
          off += 2 * l.in;  // gamma, beta
          break;
        default:
          break;
      }
    }
    param_count_ = off;
  }

  Architecture arch_;
  std::vector<std::vector<std::size_t>> layer_shapes_;  // per-sample, size L+1
  std::vector<std::size_t> param_offset_;
  std::size_t param_count_ = 0;
  std::vector<double> params_;
  std::vector<BatchNormState> bn_states_;
};

// Activations and batch-norm internals captured during one forward pass,
// enough to run an exact backward pass for parameters and input.
class ForwardTrace {
 public:
  const Tensor& logits() const { return values_.back(); }

  // One entry per BatchNorm layer, in layer order. Recorded in both modes;
  // in RunningStats mode the statistics are observers of the batch that do
  // not affect normalization.
  const std::vector<LayerBatchStats>& batch_stats() const { return bn_stats_; }

  BnMode mode() const { return mode_; }

  // Backpropagates d(loss)/d(logits), plus optional d(loss)/d(batch stats),
  // to parameter and (optionally) input gradients.
  Gradients backward(const Tensor& grad_logits, const StatGradients* stat_grads,
                     bool want_input_grad) const {
    if (!grad_logits.same_shape(values_.back()))
      throw InputError("grad_logits shape mismatch");
    if (stat_grads != nullptr) {
      if (stat_grads->d_mean.size() != bn_stats_.size() ||
          stat_grads->d_var.size() != bn_stats_.size())
        throw InputError("stat gradient layer count mismatch");
    }

    Gradients out;
    out.params.assign(model_->param_count_, 0.0);
    Tensor g = grad_logits;
    const auto& layers = model_->arch_.layers;
    std::size_t bn_index = bn_cache_.size();
    for (std::size_t li = layers.size(); li-- > 0;) {
      const LayerSpec& l = layers[li];
      const Tensor& x = values_[li];
      bool need_dx = want_input_grad || li > 0;
      switch (l.kind) {
        case LayerKind::Dense:
          g = backward_dense(l, model_->param_offset_[li], x, g, out.params, need_dx);
          break;
        case LayerKind::Conv2d:
          g = backward_conv2d(l, model_->param_offset_[li], x, g, out.params, need_dx);
          break;
        case LayerKind::BatchNorm: {
          --bn_index;
          const std::vector<double>* dm = nullptr;
          const std::vector<double>* dv = nullptr;
          if (stat_grads != nullptr) {
            dm = &stat_grads->d_mean[bn_index];
            dv = &stat_grads->d_var[bn_index];
          }
          g = backward_batch_norm(l, model_->param_offset_[li], bn_index, x, g,
                                  out.params, dm, dv, need_dx);
          break;
        }
        case LayerKind::ReLU: {
          Tensor dx(x.shape);
          for (std::size_t i = 0; i < x.numel(); ++i)
            dx.data[i] = x.data[i] > 0.0 ? g.data[i] : 0.0;
          g = std::move(dx);
          break;
        }
        case LayerKind::Tanh: {
          const Tensor& y = values_[li + 1];
          Tensor dx(x.shape);
          for (std::size_t i = 0; i < x.numel(); ++i)
            dx.data[i] = g.data[i] * (1.0 - y.data[i] * y.data[i]);
          g = std::move(dx);
          break;
        }
        case LayerKind::Flatten:
          g = g.reshaped(x.shape);
          break;
      }
    }
    if (want_input_grad) out.input = std::move(g);
    return out;
  }

 private:
  friend class Model;

  static std::pair<std::size_t, std::size_t> bn_geometry(const Tensor& x) {
    // Returns (channels, inner): x is [B, C, ...spatial] or [B, F].
    if (x.ndim() == 2) return {x.shape[1], 1};
    if (x.ndim() == 4) return {x.shape[1], x.shape[2] * x.shape[3]};
    throw InputError("batch_norm expects rank-2 or rank-4 input");
  }

  Tensor backward_dense(const LayerSpec& l, std::size_t off, const Tensor& x,
                        const Tensor& g, std::vector<double>& dparams,
                        bool need_dx) const {
    std::size_t b = x.shape[0], in = l.in, out = l.out;
    const double* W = model_->params_.data() + off;
    double* dW = dparams.data() + off;
    double* db = dparams.data() + off + out * in;
    for (std::size_t i = 0; i < b; ++i) {
      const double* xi = x.data.data() + i * in;
      const double* gi = g.data.data() + i * out;
      for (std::size_t o = 0; o < out; ++o) {
        double go = gi[o];
        db[o] += go;
        double* dWo = dW + o * in;
        for (std::size_t j = 0; j < in; ++j) dWo[j] += go * xi[j];
      }
    }
    Tensor dx;
    if (need_dx) {
      dx = Tensor(x.shape);
      for (std::size_t i = 0; i < b; ++i) {
        const double* gi = g.data.data() + i * out;
        double* dxi = dx.data.data() + i * in;
        for (std::size_t o = 0; o < out; ++o) {
          double go = gi[o];
          const double* Wo = W + o * in;
          for (std::size_t j = 0; j < in; ++j) dxi[j] += go * Wo[j];
        }
      }
    }
    return dx;
  }

  Tensor backward_conv2d(const LayerSpec& l, std::size_t off, const Tensor& x,
                         const Tensor& g, std::vector<double>& dparams,
                         bool need_dx) const {
    std::size_t b = x.shape[0], ic = l.in, h = x.shape[2], w = x.shape[3];
    std::size_t oc = l.out, k = l.kernel, p = l.pad;
    std::size_t oh = h + 2 * p - k + 1, ow = w + 2 * p - k + 1;
    const double* W = model_->params_.data() + off;
    double* dW = dparams.data() + off;
    double* db = dparams.data() + off + oc * ic * k * k;
    Tensor dx;
    if (need_dx) dx = Tensor(x.shape);
    for (std::size_t bi = 0; bi < b; ++bi) {
      for (std::size_t o = 0; o < oc; ++o) {
        const double* go = g.data.data() + ((bi * oc + o) * oh) * ow;
        for (std::size_t y = 0; y < oh; ++y) {
          for (std::size_t z = 0; z < ow; ++z) {
            double gv = go[y * ow + z];
            if (gv == 0.0) continue;
            db[o] += gv;
            for (std::size_t c = 0; c < ic; ++c) {
              const double* xc = x.data.data() + ((bi * ic + c) * h) * w;
              double* dxc = need_dx ? dx.data.data() + ((bi * ic + c) * h) * w : nullptr;
              const double* Wc = W + ((o * ic + c) * k) * k;
              double* dWc = dW + ((o * ic + c) * k) * k;
              for (std::size_t i = 0; i < k; ++i) {
                std::ptrdiff_t xi = static_cast<std::ptrdiff_t>(y + i) -
                                    static_cast<std::ptrdiff_t>(p);
                if (xi < 0 || xi >= static_cast<std::ptrdiff_t>(h)) continue;
                for (std::size_t j = 0; j < k; ++j) {
                  std::ptrdiff_t xj = static_cast<std::ptrdiff_t>(z + j) -
                                      static_cast<std::ptrdiff_t>(p);
                  if (xj < 0 || xj >= static_cast<std::ptrdiff_t>(w)) continue;
                  double xv = xc[xi * static_cast<std::ptrdiff_t>(w) + xj];
                  dWc[i * k + j] += gv * xv;
                  if (need_dx) dxc[xi * static_cast<std::ptrdiff_t>(w) + xj] += gv * Wc[i * k + j];
                }
              }
            }
          }
        }
      }
    }
    return dx;
  }

  Tensor backward_batch_norm(const LayerSpec& l, std::size_t off, std::size_t bn_index,
                             const Tensor& x, const Tensor& g,
                             std::vector<double>& dparams,
                             const std::vector<double>* dmean_ext,
                             const std::vector<double>* dvar_ext,
                             bool need_dx) const {
    auto [channels, inner] = bn_geometry(x);
    std::size_t b = x.shape[0];
    std::size_t n = b * inner;
    const double* gamma = model_->params_.data() + off;
    double* dgamma = dparams.data() + off;
    double* dbeta = dparams.data() + off + l.in;
    Tensor dx;
    if (need_dx) dx = Tensor(x.shape);

    const bool batch_mode = (mode_ == BnMode::BatchStats);
    const BnCache& cache = bn_cache_[bn_index];
    const BatchNormState& rs = model_->bn_states_[bn_index];

    for (std::size_t c = 0; c < channels; ++c) {
      double mean = batch_mode ? cache.mean[c] : rs.running_mean[c];
      double inv_std = batch_mode ? cache.inv_std[c]
                                  : 1.0 / std::sqrt(rs.running_var[c] + kBnEps);
      double sum_g = 0.0, sum_gxh = 0.0, sum_gx = 0.0;
      for (std::size_t bi = 0; bi < b; ++bi) {
        const double* xr = x.data.data() + (bi * channels + c) * inner;
        const double* gr = g.data.data() + (bi * channels + c) * inner;
        for (std::size_t s = 0; s < inner; ++s) {
          sum_g += gr[s];
          sum_gx += gr[s] * xr[s];
        }
      }
      sum_gxh = (sum_gx - mean * sum_g) * inv_std;
      dgamma[c] += sum_gxh;
      dbeta[c] += sum_g;
      if (!need_dx) continue;

      if (batch_mode) {
        // dL/dvar and dL/dmean, including external stat-matching contributions
        double dvar = -0.5 * inv_std * inv_std * inv_std * gamma[c] *
                      (sum_gx - mean * sum_g);
        if (dvar_ext) dvar += (*dvar_ext)[c];
        double dmean = -gamma[c] * inv_std * sum_g;
        if (dmean_ext) dmean += (*dmean_ext)[c];
        double inv_n = 1.0 / static_cast<double>(n);
        for (std::size_t bi = 0; bi < b; ++bi) {
          const double* xr = x.data.data() + (bi * channels + c) * inner;
          const double* gr = g.data.data() + (bi * channels + c) * inner;
          double* dxr = dx.data.data() + (bi * channels + c) * inner;
          for (std::size_t s = 0; s < inner; ++s) {
            dxr[s] = gamma[c] * inv_std * gr[s] +
                     dvar * 2.0 * (xr[s] - mean) * inv_n + dmean * inv_n;
          }
        }
      } else {
        // normalization path uses constant running stats; the observed batch
        // statistics still carry any injected stat-matching gradient
        double scale = gamma[c] * inv_std;
        double dvar = dvar_ext ? (*dvar_ext)[c] : 0.0;
        double dmean = dmean_ext ? (*dmean_ext)[c] : 0.0;
        double batch_mean = cache.mean[c];
        double inv_n = 1.0 / static_cast<double>(n);
        for (std::size_t bi = 0; bi < b; ++bi) {
          const double* gr = g.data.data() + (bi * channels + c) * inner;
          const double* xr = x.data.data() + (bi * channels + c) * inner;
          double* dxr = dx.data.data() + (bi * channels + c) * inner;
          for (std::size_t s = 0; s < inner; ++s) {
            dxr[s] = scale * gr[s] + dmean * inv_n +
                     dvar * 2.0 * (xr[s] - batch_mean) * inv_n;
          }
        }
      }
    }
    return dx;
  }

  struct BnCache {
    std::vector<double> mean, var, inv_std;
  };

  const Model* model_ = nullptr;
  BnMode mode_ = BnMode::RunningStats;
  std::vector<Tensor> values_;  // input of each layer; last entry is logits
  std::vector<LayerBatchStats> bn_stats_;
  std::vector<BnCache> bn_cache_;
};

inline ForwardTrace Model::forward_traced(const Tensor& batch, BnMode mode) const {
  if (batch.ndim() < 2)
    throw InputError("forward: batch tensor must have a leading batch axis");
  std::vector<std::size_t> sample(batch.shape.begin() + 1, batch.shape.end());
  if (sample != arch_.input_shape)
    throw InputError("forward: batch sample shape does not match architecture input");
  if (batch.shape[0] == 0) throw InputError("forward: empty batch");
  if (mode == BnMode::BatchStats && batch.shape[0] < 2)
    throw InputError("forward: batch of 1 is degenerate in BatchStats mode");

  ForwardTrace tr;
  tr.model_ = this;
  tr.mode_ = mode;
  tr.values_.reserve(arch_.layers.size() + 1);
  tr.values_.push_back(batch);

  std::size_t bn_index = 0;
  for (std::size_t li = 0; li < arch_.layers.size(); ++li) {
    const LayerSpec& l = arch_.layers[li];
    const Tensor& x = tr.values_.back();
    Tensor y;
    switch (l.kind) {
      case LayerKind::Dense: {
        std::size_t b = x.shape[0];
        y = Tensor({b, l.out});
        const double* W = params_.data() + param_offset_[li];
        const double* bias = W + l.out * l.in;
        for (std::size_t i = 0; i < b; ++i) {
          const double* xi = x.data.data() + i * l.in;
          double* yi = y.data.data() + i * l.out;
          for (std::size_t o = 0; o < l.out; ++o) {
            const double* Wo = W + o * l.in;
            double acc = bias[o];
            for (std::size_t j = 0; j < l.in; ++j) acc += Wo[j] * xi[j];
            yi[o] = acc;
          }
        }
        break;
      }
      case LayerKind::Conv2d: {
        std::size_t b = x.shape[0], ic = l.in, h = x.shape[2], w = x.shape[3];
        std::size_t oc = l.out, k = l.kernel, p = l.pad;
        std::size_t oh = h + 2 * p - k + 1, ow = w + 2 * p - k + 1;
        y = Tensor({b, oc, oh, ow});
        const double* W = params_.data() + param_offset_[li];
        const double* bias = W + oc * ic * k * k;
        for (std::size_t bi = 0; bi < b; ++bi) {
          for (std::size_t o = 0; o < oc; ++o) {
            double* yo = y.data.data() + ((bi * oc + o) * oh) * ow;
            for (std::size_t yy = 0; yy < oh; ++yy)
              for (std::size_t zz = 0; zz < ow; ++zz) yo[yy * ow + zz] = bias[o];
            for (std::size_t c = 0; c < ic; ++c) {
              const double* xc = x.data.data() + ((bi * ic + c) * h) * w;
              const double* Wc = W + ((o * ic + c) * k) * k;
              for (std::size_t yy = 0; yy < oh; ++yy) {
                for (std::size_t i = 0; i < k; ++i) {
                  std::ptrdiff_t xi = static_cast<std::ptrdiff_t>(yy + i) -
                                      static_cast<std::ptrdiff_t>(p);
                  if (xi < 0 || xi >= static_cast<std::ptrdiff_t>(h)) continue;
                  const double* xrow = xc + xi * static_cast<std::ptrdiff_t>(w);
                  const double* Wrow = Wc + i * k;
                  double* yrow = yo + yy * ow;
                  for (std::size_t zz = 0; zz < ow; ++zz) {
                    double acc = 0.0;
                    for (std::size_t j = 0; j < k; ++j) {
                      std::ptrdiff_t xj = static_cast<std::ptrdiff_t>(zz + j) -
                                          static_cast<std::ptrdiff_t>(p);
                      if (xj < 0 || xj >= static_cast<std::ptrdiff_t>(w)) continue;
                      acc += Wrow[j] * xrow[xj];
                    }
                    yrow[zz] += acc;
                  }
                }
              }
            }
          }
        }
        break;
      }
      case LayerKind::BatchNorm: {
        auto [channels, inner] = ForwardTrace::bn_geometry(x);
        std::size_t b = x.shape[0];
        std::size_t n = b * inner;
        const double* gamma = params_.data() + param_offset_[li];
        const double* beta = gamma + l.in;
        y = Tensor(x.shape);
        if (mode == BnMode::BatchStats) {
          ForwardTrace::BnCache cache;
          cache.mean.resize(channels);
          cache.var.resize(channels);
          cache.inv_std.resize(channels);
          for (std::size_t c = 0; c < channels; ++c) {
            double sum = 0.0, sq = 0.0;
            for (std::size_t bi = 0; bi < b; ++bi) {
              const double* xr = x.data.data() + (bi * channels + c) * inner;
              for (std::size_t s = 0; s < inner; ++s) {
                sum += xr[s];
                sq += xr[s] * xr[s];
              }
            }
            double mean = sum / static_cast<double>(n);
            double var = sq / static_cast<double>(n) - mean * mean;
            if (var < 0.0) var = 0.0;  // rounding guard
            cache.mean[c] = mean;
            cache.var[c] = var;
            cache.inv_std[c] = 1.0 / std::sqrt(var + kBnEps);
            double scale = gamma[c] * cache.inv_std[c];
            double shift = beta[c] - scale * mean;
            for (std::size_t bi = 0; bi < b; ++bi) {
              const double* xr = x.data.data() + (bi * channels + c) * inner;
              double* yr = y.data.data() + (bi * channels + c) * inner;
              for (std::size_t s = 0; s < inner; ++s) yr[s] = scale * xr[s] + shift;
            }
          }
          tr.bn_stats_.push_back({cache.mean, cache.var});
          tr.bn_cache_.push_back(std::move(cache));
        } else {
          const BatchNormState& rs = bn_states_[bn_index];
          ForwardTrace::BnCache cache;
          cache.mean.resize(channels);
          cache.var.resize(channels);
          for (std::size_t c = 0; c < channels; ++c) {
            double inv_std = 1.0 / std::sqrt(rs.running_var[c] + kBnEps);
            double scale = gamma[c] * inv_std;
            double shift = beta[c] - scale * rs.running_mean[c];
            double sum = 0.0, sq = 0.0;
            for (std::size_t bi = 0; bi < b; ++bi) {
              const double* xr = x.data.data() + (bi * channels + c) * inner;
              double* yr = y.data.data() + (bi * channels + c) * inner;
              for (std::size_t s = 0; s < inner; ++s) {
                yr[s] = scale * xr[s] + shift;
                sum += xr[s];
                sq += xr[s] * xr[s];
              }
            }
            double mean = sum / static_cast<double>(n);
            double var = sq / static_cast<double>(n) - mean * mean;
            cache.mean[c] = mean;
            cache.var[c] = var < 0.0 ? 0.0 : var;
          }
          tr.bn_stats_.push_back({cache.mean, cache.var});
          tr.bn_cache_.push_back(std::move(cache));
        }
        ++bn_index;
        break;
      }
      case LayerKind::ReLU: {
        y = Tensor(x.shape);
        for (std::size_t i = 0; i < x.numel(); ++i)
          y.data[i] = x.data[i] > 0.0 ? x.data[i] : 0.0;
        break;
      }
      case LayerKind::Tanh: {
        y = Tensor(x.shape);
        for (std::size_t i = 0; i < x.numel(); ++i) y.data[i] = std::tanh(x.data[i]);
        break;
      }
      case LayerKind::Flatten: {
        y = x.reshaped({x.shape[0], x.sample_size()});
        break;
      }
    }
    tr.values_.push_back(std::move(y));
  }
  return tr;
}

inline Tensor Model::forward(const Tensor& batch, BnMode mode) const {
  return forward_traced(batch, mode).logits();
}

}  // namespace fedbicross
