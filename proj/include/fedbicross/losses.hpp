#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <utility>
#include <vector>

#include "fedbicross/errors.hpp"
#include "fedbicross/model.hpp"
#include "fedbicross/tensor.hpp"

namespace fedbicross {

// A loss evaluation: the scalar plus whichever exact gradients the operation
// produces. Gradient shapes always match their targets.
struct LossValue {
  double value = 0.0;
  std::optional<std::vector<double>> grad_params;
  std::optional<Tensor> grad_input;
};

inline Tensor softmax_rows(const Tensor& logits) {
  if (logits.ndim() != 2) throw InputError("softmax_rows expects [batch, classes]");
  std::size_t b = logits.shape[0], c = logits.shape[1];
  Tensor out(logits.shape);
  for (std::size_t i = 0; i < b; ++i) {
    const double* z = logits.data.data() + i * c;
    double* p = out.data.data() + i * c;
    double m = z[0];
    for (std::size_t j = 1; j < c; ++j) m = std::max(m, z[j]);
    double sum = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      p[j] = std::exp(z[j] - m);
      sum += p[j];
    }
    for (std::size_t j = 0; j < c; ++j) p[j] /= sum;
  }
  return out;
}

inline Tensor log_softmax_rows(const Tensor& logits) {
  if (logits.ndim() != 2) throw InputError("log_softmax_rows expects [batch, classes]");
  std::size_t b = logits.shape[0], c = logits.shape[1];
  Tensor out(logits.shape);
  for (std::size_t i = 0; i < b; ++i) {
    const double* z = logits.data.data() + i * c;
    double* l = out.data.data() + i * c;
    double m = z[0];
    for (std::size_t j = 1; j < c; ++j) m = std::max(m, z[j]);
    double sum = 0.0;
    for (std::size_t j = 0; j < c; ++j) sum += std::exp(z[j] - m);
    double lse = m + std::log(sum);
    for (std::size_t j = 0; j < c; ++j) l[j] = z[j] - lse;
  }
  return out;
}

// Mean negative log-softmax probability of the true class.
// grad_input = d(loss)/d(logits).
inline LossValue cross_entropy(const Tensor& logits, const std::vector<std::size_t>& labels) {
  if (logits.ndim() != 2) throw InputError("cross_entropy expects [batch, classes]");
  std::size_t b = logits.shape[0], c = logits.shape[1];
  if (labels.size() != b) throw InputError("cross_entropy: label count != batch size");
  for (std::size_t y : labels)
    if (y >= c) throw InputError("cross_entropy: label out of range");

  Tensor logp = log_softmax_rows(logits);
  LossValue out;
  Tensor grad(logits.shape);
  double inv_b = 1.0 / static_cast<double>(b);
  for (std::size_t i = 0; i < b; ++i) {
    out.value -= logp.data[i * c + labels[i]] * inv_b;
    for (std::size_t j = 0; j < c; ++j)
      grad.data[i * c + j] = std::exp(logp.data[i * c + j]) * inv_b;
    grad.data[i * c + labels[i]] -= inv_b;
  }
  out.grad_input = std::move(grad);
  return out;
}

// Mean over the batch of KL(softmax(teacher/tau) || softmax(student/tau)),
// scaled by tau^2 so gradients stay comparable across temperatures.
// grad_input = d(loss)/d(student_logits); the teacher side gets no gradient.
inline LossValue kl_divergence(const Tensor& teacher_logits, const Tensor& student_logits,
                               double tau) {
  if (!(tau > 0.0)) throw InputError("kl_divergence: temperature must be positive");
  if (!teacher_logits.same_shape(student_logits))
    throw InputError("kl_divergence: shape mismatch");
  if (teacher_logits.ndim() != 2)
    throw InputError("kl_divergence expects [batch, classes]");

  std::size_t b = teacher_logits.shape[0], c = teacher_logits.shape[1];
  Tensor t_scaled(teacher_logits.shape), s_scaled(student_logits.shape);
  for (std::size_t i = 0; i < t_scaled.numel(); ++i) {
    t_scaled.data[i] = teacher_logits.data[i] / tau;
    s_scaled.data[i] = student_logits.data[i] / tau;
  }
  Tensor logp = log_softmax_rows(t_scaled);
  Tensor logq = log_softmax_rows(s_scaled);

  LossValue out;
  Tensor grad(student_logits.shape);
  double inv_b = 1.0 / static_cast<double>(b);
  for (std::size_t i = 0; i < b; ++i) {
    for (std::size_t j = 0; j < c; ++j) {
      double lp = logp.data[i * c + j];
      double p = std::exp(lp);
      double q = std::exp(logq.data[i * c + j]);
      if (p > 0.0) out.value += p * (lp - logq.data[i * c + j]) * tau * tau * inv_b;
      grad.data[i * c + j] = tau * (q - p) * inv_b;
    }
  }
  if (out.value < 0.0) out.value = 0.0;  // rounding guard; KL >= 0
  out.grad_input = std::move(grad);
  return out;
}

// Mean anisotropic total variation: squared horizontal plus vertical neighbor
// differences, averaged over the batch. grad_input = d(loss)/d(images).
inline LossValue total_variation(const Tensor& images) {
  if (images.ndim() != 4)
    throw InputError("total_variation expects [batch, channels, H, W]");
  std::size_t b = images.shape[0], ch = images.shape[1];
  std::size_t h = images.shape[2], w = images.shape[3];
  if (h < 2 || w < 2) throw InputError("total_variation: H and W must be >= 2");

  LossValue out;
  Tensor grad(images.shape);
  double inv_b = 1.0 / static_cast<double>(b);
  for (std::size_t bi = 0; bi < b; ++bi) {
    for (std::size_t c = 0; c < ch; ++c) {
      const double* x = images.data.data() + ((bi * ch + c) * h) * w;
      double* g = grad.data.data() + ((bi * ch + c) * h) * w;
      for (std::size_t i = 0; i < h; ++i) {
        for (std::size_t j = 0; j + 1 < w; ++j) {
          double d = x[i * w + j + 1] - x[i * w + j];
          out.value += d * d * inv_b;
          g[i * w + j + 1] += 2.0 * d * inv_b;
          g[i * w + j] -= 2.0 * d * inv_b;
        }
      }
      for (std::size_t i = 0; i + 1 < h; ++i) {
        for (std::size_t j = 0; j < w; ++j) {
          double d = x[(i + 1) * w + j] - x[i * w + j];
          out.value += d * d * inv_b;
          g[(i + 1) * w + j] += 2.0 * d * inv_b;
          g[i * w + j] -= 2.0 * d * inv_b;
        }
      }
    }
  }
  out.grad_input = std::move(grad);
  return out;
}

// Batch-statistics mismatch against reference running statistics:
// sum over layers of ||mean_batch - mean_ref||^2 + ||var_batch - var_ref||^2.
// The gradients are with respect to the batch statistics and feed straight
// into ForwardTrace::backward as stat gradients.
struct BnPenalty {
  double value = 0.0;
  StatGradients grads;
};

inline BnPenalty bn_regularizer(const std::vector<LayerBatchStats>& batch_stats,
                                const std::vector<BatchNormState>& reference) {
  if (batch_stats.size() != reference.size())
    throw InputError("bn_regularizer: layer count mismatch");
  BnPenalty out;
  out.grads.d_mean.resize(batch_stats.size());
  out.grads.d_var.resize(batch_stats.size());
  for (std::size_t l = 0; l < batch_stats.size(); ++l) {
    const auto& bs = batch_stats[l];
    const auto& ref = reference[l];
    if (bs.mean.size() != ref.running_mean.size())
      throw InputError("bn_regularizer: channel count mismatch at layer " +
                       std::to_string(l));
    out.grads.d_mean[l].resize(bs.mean.size());
    out.grads.d_var[l].resize(bs.var.size());
    for (std::size_t c = 0; c < bs.mean.size(); ++c) {
      double dm = bs.mean[c] - ref.running_mean[c];
      double dv = bs.var[c] - ref.running_var[c];
      out.value += dm * dm + dv * dv;
      out.grads.d_mean[l][c] = 2.0 * dm;
      out.grads.d_var[l][c] = 2.0 * dv;
    }
  }
  return out;
}

// Mean Shannon entropy (nats) of the rows of a probability matrix.
inline double mean_row_entropy(const Tensor& probs) {
  if (probs.ndim() != 2) throw InputError("mean_row_entropy expects [batch, classes]");
  std::size_t b = probs.shape[0], c = probs.shape[1];
  double total = 0.0;
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t j = 0; j < c; ++j) {
      double p = probs.data[i * c + j];
      if (p > 0.0) total -= p * std::log(p);
    }
  return total / static_cast<double>(b);
}

// Verifies an analytic directional derivative against a central finite
// difference. `f` maps a flat point to (value, gradient).
// Returns |analytic - fd| / max(1, |analytic|).
template <class F>
double grad_check(F&& f, const std::vector<double>& point,
                  const std::vector<double>& direction, double h = 1e-5) {
  auto [value, grad] = f(point);
  (void)value;
  if (grad.size() != point.size())
    throw InputError("grad_check: gradient size does not match point");
  double analytic = dot(grad, direction);
  std::vector<double> plus = point, minus = point;
  axpy(h, direction, plus);
  axpy(-h, direction, minus);
  double fd = (f(plus).first - f(minus).first) / (2.0 * h);
  return std::abs(analytic - fd) / std::max(1.0, std::abs(analytic));
}

}  // namespace fedbicross
