#ifndef GLOSS_LAYERS_HPP
#define GLOSS_LAYERS_HPP

// Differentiable layer primitives with explicit forward and backward passes.
// Every function is pure: caches and updated running statistics are returned
// to the caller instead of being stored.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <string>
#include <vector>

#include "gloss/errors.hpp"
#include "gloss/tensor.hpp"

namespace gloss {

enum class Mode { Train, Eval };

inline constexpr double kBatchNormEpsilon = 1e-5;
inline constexpr double kBatchNormMomentum = 0.1;
inline constexpr double kNormEpsilon = 1e-12;

/// Parameters of one convolution, optionally followed by batch normalisation.
/// The bn_* tensors are empty for a bare convolution.
template <class T>
struct LayerParams {
  Tensor<T> weights;  // filters x channels x k x k
  Tensor<T> biases;   // filters
  Tensor<T> bn_gain;
  Tensor<T> bn_bias;
  Tensor<T> bn_running_mean;
  Tensor<T> bn_running_var;
  bool running_ready = false;

  bool has_bnorm() const noexcept { return !bn_gain.empty(); }
};

namespace detail {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline void require_rank4(const Shape& s, const char* what) {
  if (s.size() != 4) {
    throw DimensionError(std::string(what) + ": expected a rank-4 NCHW tensor, got " +
                         shape_str(s));
  }
}

struct ConvGeometry {
  std::size_t batch, channels, height, width;
  std::size_t filters, kernel, stride;
  std::size_t out_h, out_w;

  std::size_t patch_len() const { return channels * kernel * kernel; }
  std::size_t out_area() const { return out_h * out_w; }
};

template <class T>
ConvGeometry conv_geometry(const Tensor<T>& input, const LayerParams<T>& p,
                           std::size_t stride) {
  require_rank4(input.shape(), "conv");
  require_rank4(p.weights.shape(), "conv weights");
  const auto& w = p.weights.shape();
  if (w[2] != w[3]) throw DimensionError("conv: non-square kernel " + shape_str(w));
  if (stride == 0) throw DimensionError("conv: stride must be positive");
  if (input.dim(1) != w[1]) {
    throw DimensionError("conv: input has " + std::to_string(input.dim(1)) +
                         " channels, kernel expects " + std::to_string(w[1]));
  }
  if (p.biases.size() != w[0]) {
    throw DimensionError("conv: " + std::to_string(p.biases.size()) + " biases for " +
                         std::to_string(w[0]) + " filters");
  }
  if (input.dim(2) < w[2] || input.dim(3) < w[3]) {
    throw DimensionError("conv: input " + shape_str(input.shape()) +
                         " smaller than kernel " + std::to_string(w[2]));
  }
  ConvGeometry g{input.dim(0), input.dim(1), input.dim(2), input.dim(3),
                 w[0],         w[2],         stride,        0, 0};
  g.out_h = (g.height - g.kernel) / stride + 1;
  g.out_w = (g.width - g.kernel) / stride + 1;
  return g;
}

// Samples per im2col chunk, bounded so the column buffer stays small.
inline std::size_t conv_chunk(const ConvGeometry& g) {
  constexpr std::size_t kBudget = std::size_t{1} << 23;
  const std::size_t per_sample = g.patch_len() * g.out_area();
  return std::max<std::size_t>(1, std::min(g.batch, kBudget / std::max<std::size_t>(1, per_sample)));
}

template <class T>
void im2col(const Tensor<T>& in, const ConvGeometry& g, std::size_t n0, std::size_t count,
            RowMat<T>& cols) {
  const std::size_t area = g.out_area();
  cols.resize(static_cast<Eigen::Index>(g.patch_len()),
              static_cast<Eigen::Index>(count * area));
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t ki = 0; ki < g.kernel; ++ki) {
      for (std::size_t kj = 0; kj < g.kernel; ++kj) {
        T* row = cols.data() + ((c * g.kernel + ki) * g.kernel + kj) * count * area;
        for (std::size_t n = 0; n < count; ++n) {
          for (std::size_t oh = 0; oh < g.out_h; ++oh) {
            const T* src = &in.at(n0 + n, c, oh * g.stride + ki, kj);
            for (std::size_t ow = 0; ow < g.out_w; ++ow) {
              *row++ = src[ow * g.stride];
            }
          }
        }
      }
    }
  }
}

template <class T>
void col2im_add(const RowMat<T>& cols, const ConvGeometry& g, std::size_t n0,
                std::size_t count, Tensor<T>& out) {
  const std::size_t area = g.out_area();
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t ki = 0; ki < g.kernel; ++ki) {
      for (std::size_t kj = 0; kj < g.kernel; ++kj) {
        const T* row = cols.data() + ((c * g.kernel + ki) * g.kernel + kj) * count * area;
        for (std::size_t n = 0; n < count; ++n) {
          for (std::size_t oh = 0; oh < g.out_h; ++oh) {
            T* dst = &out.at(n0 + n, c, oh * g.stride + ki, kj);
            for (std::size_t ow = 0; ow < g.out_w; ++ow) {
              dst[ow * g.stride] += *row++;
            }
          }
        }
      }
    }
  }
}

}  // namespace detail

/// Valid (unpadded) strided convolution of an NCHW batch. With `per_sample`
/// every sample gets its own product, so its output does not depend on the
/// rest of the batch.
template <class T>
Tensor<T> conv_forward(const Tensor<T>& input, const LayerParams<T>& params,
                       std::size_t stride, bool per_sample = false) {
  using Mat = detail::RowMat<T>;
  const auto g = detail::conv_geometry(input, params, stride);
  Tensor<T> out({g.batch, g.filters, g.out_h, g.out_w});
  Eigen::Map<const Mat> w(params.weights.data(), static_cast<Eigen::Index>(g.filters),
                          static_cast<Eigen::Index>(g.patch_len()));
  const std::size_t chunk = per_sample ? 1 : detail::conv_chunk(g);
  const std::size_t area = g.out_area();
  Mat cols;
  Mat prod;
  for (std::size_t n0 = 0; n0 < g.batch; n0 += chunk) {
    const std::size_t count = std::min(chunk, g.batch - n0);
    detail::im2col(input, g, n0, count, cols);
    prod.noalias() = w * cols;
    for (std::size_t n = 0; n < count; ++n) {
      for (std::size_t f = 0; f < g.filters; ++f) {
        const T b = params.biases[f];
        const T* src = prod.data() + f * count * area + n * area;
        T* dst = &out.at(n0 + n, f, 0, 0);
        for (std::size_t p = 0; p < area; ++p) dst[p] = src[p] + b;
      }
    }
  }
  return out;
}

template <class T>
struct ConvGradients {
  Tensor<T> grad_input;  // empty when not requested
  LayerParams<T> grad_params;  // weights and biases populated
};

template <class T>
ConvGradients<T> conv_backward(const Tensor<T>& input, const LayerParams<T>& params,
                               std::size_t stride, const Tensor<T>& grad_out,
                               bool want_input_grad = true) {
  using Mat = detail::RowMat<T>;
  const auto g = detail::conv_geometry(input, params, stride);
  const Shape expected{g.batch, g.filters, g.out_h, g.out_w};
  if (grad_out.shape() != expected) {
    throw DimensionError("conv_backward: gradient shape " + shape_str(grad_out.shape()) +
                         " does not match output shape " + shape_str(expected));
  }
  ConvGradients<T> res;
  if (want_input_grad) res.grad_input = Tensor<T>(input.shape());
  res.grad_params.weights = Tensor<T>(params.weights.shape());
  res.grad_params.biases = Tensor<T>(params.biases.shape());

  Eigen::Map<const Mat> w(params.weights.data(), static_cast<Eigen::Index>(g.filters),
                          static_cast<Eigen::Index>(g.patch_len()));
  Eigen::Map<Mat> gw(res.grad_params.weights.data(), static_cast<Eigen::Index>(g.filters),
                     static_cast<Eigen::Index>(g.patch_len()));
  const std::size_t chunk = detail::conv_chunk(g);
  const std::size_t area = g.out_area();
  Mat cols;
  Mat go;
  Mat gcols;
  for (std::size_t n0 = 0; n0 < g.batch; n0 += chunk) {
    const std::size_t count = std::min(chunk, g.batch - n0);
    go.resize(static_cast<Eigen::Index>(g.filters), static_cast<Eigen::Index>(count * area));
    for (std::size_t f = 0; f < g.filters; ++f) {
      T* dst = go.data() + f * count * area;
      T bias_acc = 0;
      for (std::size_t n = 0; n < count; ++n) {
        const T* src = &grad_out.at(n0 + n, f, 0, 0);
        for (std::size_t p = 0; p < area; ++p) {
          dst[n * area + p] = src[p];
          bias_acc += src[p];
        }
      }
      res.grad_params.biases[f] += bias_acc;
    }
    detail::im2col(input, g, n0, count, cols);
    gw.noalias() += go * cols.transpose();
    if (want_input_grad) {
      gcols.noalias() = w.transpose() * go;
      detail::col2im_add(gcols, g, n0, count, res.grad_input);
    }
  }
  return res;
}

template <class T>
struct PoolResult {
  Tensor<T> output;
  std::vector<std::size_t> argmax;  // flat input index per output cell
};

/// Max pooling over pool_size x pool_size windows. Ties go to the first
/// window position in row-major order.
template <class T>
PoolResult<T> maxpool_forward(const Tensor<T>& input, std::size_t pool_size,
                              std::size_t stride) {
  detail::require_rank4(input.shape(), "maxpool");
  if (pool_size == 0 || stride == 0) throw DimensionError("maxpool: zero size or stride");
  const std::size_t n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
  if (h < pool_size || w < pool_size) {
    throw DimensionError("maxpool: window " + std::to_string(pool_size) +
                         " larger than input " + shape_str(input.shape()));
  }
  const std::size_t oh = (h - pool_size) / stride + 1;
  const std::size_t ow = (w - pool_size) / stride + 1;
  PoolResult<T> res{Tensor<T>({n, c, oh, ow}), {}};
  res.argmax.resize(res.output.size());
  std::size_t o = 0;
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const std::size_t plane = (b * c + ch) * h * w;
      for (std::size_t i = 0; i < oh; ++i) {
        for (std::size_t j = 0; j < ow; ++j, ++o) {
          std::size_t best = plane + (i * stride) * w + j * stride;
          T best_v = input[best];
          for (std::size_t pi = 0; pi < pool_size; ++pi) {
            for (std::size_t pj = 0; pj < pool_size; ++pj) {
              const std::size_t idx = plane + (i * stride + pi) * w + j * stride + pj;
              if (input[idx] > best_v) {
                best_v = input[idx];
                best = idx;
              }
            }
          }
          res.output[o] = best_v;
          res.argmax[o] = best;
        }
      }
    }
  }
  return res;
}

template <class T>
Tensor<T> maxpool_backward(const std::vector<std::size_t>& argmax, const Tensor<T>& grad_out,
                           const Shape& input_shape) {
  if (argmax.size() != grad_out.size()) {
    throw DimensionError("maxpool_backward: " + std::to_string(grad_out.size()) +
                         " gradients for " + std::to_string(argmax.size()) + " pooled cells");
  }
  Tensor<T> grad(input_shape);
  for (std::size_t o = 0; o < argmax.size(); ++o) {
    if (argmax[o] >= grad.size()) {
      throw UsageError("maxpool_backward: argmax index " + std::to_string(argmax[o]) +
                       " outside input of size " + std::to_string(grad.size()));
    }
    grad[argmax[o]] += grad_out[o];
  }
  return grad;
}

template <class T>
struct BatchNormCache {
  Tensor<T> normalized;      // x-hat
  std::vector<T> inv_std;    // per channel
};

template <class T>
struct BatchNormResult {
  Tensor<T> output;
  BatchNormCache<T> cache;      // populated in train mode
  Tensor<T> new_running_mean;   // populated in train mode
  Tensor<T> new_running_var;
};

/// Per-channel batch normalisation over batch and spatial positions.
/// Train mode normalises with batch statistics and reports the
/// exponential-moving-average update of the running statistics; eval mode
/// uses the running statistics.
template <class T>
BatchNormResult<T> batchnorm_forward(const Tensor<T>& input, const LayerParams<T>& params,
                                     Mode mode, double momentum = kBatchNormMomentum) {
  detail::require_rank4(input.shape(), "batchnorm");
  const std::size_t n = input.dim(0), c = input.dim(1);
  const std::size_t area = input.dim(2) * input.dim(3);
  if (params.bn_gain.size() != c || params.bn_bias.size() != c) {
    throw DimensionError("batchnorm: " + std::to_string(params.bn_gain.size()) +
                         " gains for " + std::to_string(c) + " channels");
  }
  BatchNormResult<T> res;
  res.output = Tensor<T>(input.shape());

  if (mode == Mode::Eval) {
    if (!params.running_ready || params.bn_running_mean.size() != c ||
        params.bn_running_var.size() != c) {
      throw UsageError("batchnorm: eval mode needs populated running statistics");
    }
    for (std::size_t ch = 0; ch < c; ++ch) {
      const T scale = params.bn_gain[ch] /
                      static_cast<T>(std::sqrt(static_cast<double>(params.bn_running_var[ch]) +
                                               kBatchNormEpsilon));
      const T shift = params.bn_bias[ch] - scale * params.bn_running_mean[ch];
      for (std::size_t b = 0; b < n; ++b) {
        const T* src = input.data() + (b * c + ch) * area;
        T* dst = res.output.data() + (b * c + ch) * area;
        for (std::size_t p = 0; p < area; ++p) dst[p] = scale * src[p] + shift;
      }
    }
    return res;
  }

  if (n < 2) throw UsageError("batchnorm: train mode needs a batch of at least 2");
  const double count = static_cast<double>(n * area);
  res.cache.normalized = Tensor<T>(input.shape());
  res.cache.inv_std.resize(c);
  res.new_running_mean = Tensor<T>({c});
  res.new_running_var = Tensor<T>({c});
  for (std::size_t ch = 0; ch < c; ++ch) {
    double sum = 0;
    for (std::size_t b = 0; b < n; ++b) {
      const T* src = input.data() + (b * c + ch) * area;
      for (std::size_t p = 0; p < area; ++p) sum += src[p];
    }
    const double mean = sum / count;
    double sq = 0;
    for (std::size_t b = 0; b < n; ++b) {
      const T* src = input.data() + (b * c + ch) * area;
      for (std::size_t p = 0; p < area; ++p) {
        const double d = src[p] - mean;
        sq += d * d;
      }
    }
    const double var = sq / count;
    const double inv_std = 1.0 / std::sqrt(var + kBatchNormEpsilon);
    res.cache.inv_std[ch] = static_cast<T>(inv_std);
    const T gain = params.bn_gain[ch], bias = params.bn_bias[ch];
    for (std::size_t b = 0; b < n; ++b) {
      const std::size_t off = (b * c + ch) * area;
      for (std::size_t p = 0; p < area; ++p) {
        const T xhat = static_cast<T>((input[off + p] - mean) * inv_std);
        res.cache.normalized[off + p] = xhat;
        res.output[off + p] = gain * xhat + bias;
      }
    }
    const double old_mean = params.running_ready ? params.bn_running_mean[ch] : 0.0;
    const double old_var = params.running_ready ? params.bn_running_var[ch] : 1.0;
    const double unbiased = count > 1 ? sq / (count - 1) : var;
    res.new_running_mean[ch] = static_cast<T>((1 - momentum) * old_mean + momentum * mean);
    res.new_running_var[ch] = static_cast<T>((1 - momentum) * old_var + momentum * unbiased);
  }
  return res;
}

template <class T>
struct BatchNormGradients {
  Tensor<T> grad_input;
  LayerParams<T> grad_params;  // bn_gain and bn_bias populated
};

template <class T>
BatchNormGradients<T> batchnorm_backward(const BatchNormCache<T>& cache,
                                         const LayerParams<T>& params,
                                         const Tensor<T>& grad_out) {
  if (cache.normalized.empty()) {
    throw UsageError("batchnorm_backward: no train-mode forward cache");
  }
  cache.normalized.require_same_shape(grad_out, "batchnorm_backward");
  const std::size_t n = grad_out.dim(0), c = grad_out.dim(1);
  const std::size_t area = grad_out.dim(2) * grad_out.dim(3);
  const double count = static_cast<double>(n * area);
  BatchNormGradients<T> res;
  res.grad_input = Tensor<T>(grad_out.shape());
  res.grad_params.bn_gain = Tensor<T>({c});
  res.grad_params.bn_bias = Tensor<T>({c});
  for (std::size_t ch = 0; ch < c; ++ch) {
    double sum_dy = 0, sum_dy_xhat = 0;
    for (std::size_t b = 0; b < n; ++b) {
      const std::size_t off = (b * c + ch) * area;
      for (std::size_t p = 0; p < area; ++p) {
        sum_dy += grad_out[off + p];
        sum_dy_xhat += static_cast<double>(grad_out[off + p]) * cache.normalized[off + p];
      }
    }
    res.grad_params.bn_bias[ch] = static_cast<T>(sum_dy);
    res.grad_params.bn_gain[ch] = static_cast<T>(sum_dy_xhat);
    const double k = params.bn_gain[ch] * cache.inv_std[ch] / count;
    for (std::size_t b = 0; b < n; ++b) {
      const std::size_t off = (b * c + ch) * area;
      for (std::size_t p = 0; p < area; ++p) {
        res.grad_input[off + p] = static_cast<T>(
            k * (count * grad_out[off + p] - sum_dy - cache.normalized[off + p] * sum_dy_xhat));
      }
    }
  }
  return res;
}

template <class T>
Tensor<T> relu(const Tensor<T>& input) {
  Tensor<T> out(input);
  for (auto& v : out.values()) v = v > T{0} ? v : T{0};
  return out;
}

template <class T>
Tensor<T> relu_backward(const Tensor<T>& input, const Tensor<T>& grad_out) {
  input.require_same_shape(grad_out, "relu_backward");
  Tensor<T> grad(grad_out);
  for (std::size_t i = 0; i < grad.size(); ++i) {
    if (!(input[i] > T{0})) grad[i] = T{0};
  }
  return grad;
}

/// Scales every sample (outermost index) to unit Euclidean norm. The result
/// is flattened to batch x features.
template <class T>
Tensor<T> l2_normalize(const Tensor<T>& input) {
  if (input.rank() < 2) throw DimensionError("l2_normalize: need a batch of vectors");
  const std::size_t n = input.dim(0), d = input.size() / n;
  Tensor<T> out({n, d});
  for (std::size_t b = 0; b < n; ++b) {
    double sq = 0;
    for (std::size_t i = 0; i < d; ++i) sq += static_cast<double>(input[b * d + i]) * input[b * d + i];
    const double norm = std::sqrt(sq);
    if (!(norm > kNormEpsilon)) {
      throw DomainError("l2_normalize: sample " + std::to_string(b) + " has near-zero norm");
    }
    for (std::size_t i = 0; i < d; ++i) out[b * d + i] = static_cast<T>(input[b * d + i] / norm);
  }
  return out;
}

/// Exact Jacobian-vector product of x / |x|; the result has the input's shape.
template <class T>
Tensor<T> l2_normalize_backward(const Tensor<T>& input, const Tensor<T>& grad_out) {
  const std::size_t n = input.dim(0), d = input.size() / n;
  if (grad_out.size() != input.size()) {
    throw DimensionError("l2_normalize_backward: gradient " + shape_str(grad_out.shape()) +
                         " vs input " + shape_str(input.shape()));
  }
  Tensor<T> grad(input.shape());
  for (std::size_t b = 0; b < n; ++b) {
    double sq = 0, dot = 0;
    for (std::size_t i = 0; i < d; ++i) sq += static_cast<double>(input[b * d + i]) * input[b * d + i];
    const double norm = std::sqrt(sq);
    if (!(norm > kNormEpsilon)) {
      throw DomainError("l2_normalize_backward: sample " + std::to_string(b) +
                        " has near-zero norm");
    }
    for (std::size_t i = 0; i < d; ++i) dot += input[b * d + i] / norm * grad_out[b * d + i];
    for (std::size_t i = 0; i < d; ++i) {
      const double y = input[b * d + i] / norm;
      grad[b * d + i] = static_cast<T>((grad_out[b * d + i] - y * dot) / norm);
    }
  }
  return grad;
}

}  // namespace gloss

#endif  // GLOSS_LAYERS_HPP
