#include <gtest/gtest.h>

#include <random>

#include "gloss/eval.hpp"
#include "gloss/layers.hpp"
#include "support.hpp"

using namespace gloss;
using testing_support::max_abs_diff;
using testing_support::random_tensor;

namespace {

LayerParams<double> conv_params(std::size_t f, std::size_t c, std::size_t k, std::mt19937_64& rng) {
  LayerParams<double> p;
  p.weights = random_tensor({f, c, k, k}, rng);
  p.biases = random_tensor({f}, rng);
  return p;
}

Tensor<double> naive_conv(const Tensor<double>& x, const LayerParams<double>& p, std::size_t s) {
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t f = p.weights.dim(0), k = p.weights.dim(2);
  const std::size_t oh = (h - k) / s + 1, ow = (w - k) / s + 1;
  Tensor<double> out({n, f, oh, ow});
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t o = 0; o < f; ++o)
      for (std::size_t i = 0; i < oh; ++i)
        for (std::size_t j = 0; j < ow; ++j) {
          double acc = p.biases[o];
          for (std::size_t ch = 0; ch < c; ++ch)
            for (std::size_t u = 0; u < k; ++u)
              for (std::size_t v = 0; v < k; ++v)
                acc += p.weights.at(o, ch, u, v) * x.at(b, ch, i * s + u, j * s + v);
          out.at(b, o, i, j) = acc;
        }
  return out;
}

LayerParams<double> bn_params(std::size_t c, double gain, double bias) {
  LayerParams<double> p;
  p.bn_gain = Tensor<double>({c}, gain);
  p.bn_bias = Tensor<double>({c}, bias);
  p.bn_running_mean = Tensor<double>({c});
  p.bn_running_var = Tensor<double>({c}, 1.0);
  return p;
}

}  // namespace

TEST(Tensor, ShapeVolumeMustMatchData) {
  EXPECT_THROW(Tensor<double>({2, 2}, std::vector<double>{1, 2, 3}), DimensionError);
  EXPECT_NO_THROW(Tensor<double>({2, 2}, std::vector<double>{1, 2, 3, 4}));
}

TEST(Conv, IdentityKernel) {
  Tensor<double> x({1, 1, 2, 2}, {1, 2, 3, 4});
  LayerParams<double> p;
  p.weights = Tensor<double>({1, 1, 1, 1}, 1.0);
  p.biases = Tensor<double>({1});
  EXPECT_EQ(conv_forward(x, p, 1).vec(), x.vec());
}

TEST(Conv, OnesKernelSumsWindow) {
  LayerParams<double> p;
  p.weights = Tensor<double>({1, 1, 3, 3}, 1.0);
  p.biases = Tensor<double>({1});
  const auto y = conv_forward(Tensor<double>({1, 1, 3, 3}, 1.0), p, 1);
  ASSERT_EQ(y.size(), 1u);
  EXPECT_DOUBLE_EQ(y[0], 9.0);
}

TEST(Conv, MatchesDirectLoopOracle) {
  std::mt19937_64 rng(1);
  const auto x = random_tensor({1, 3, 7, 7}, rng);
  const auto p = conv_params(2, 3, 3, rng);
  const auto y = conv_forward(x, p, 2);
  ASSERT_EQ(y.shape(), (Shape{1, 2, 3, 3}));
  EXPECT_LT(max_abs_diff(y, naive_conv(x, p, 2)), 1e-12);
  for (int trial = 0; trial < 10; ++trial) {
    std::uniform_int_distribution<std::size_t> d(1, 4);
    const std::size_t n = d(rng), c = d(rng), f = d(rng), k = d(rng), s = d(rng);
    const auto xi = random_tensor({n, c, k + 5, k + 4}, rng);
    const auto pi = conv_params(f, c, k, rng);
    EXPECT_LT(max_abs_diff(conv_forward(xi, pi, s), naive_conv(xi, pi, s)), 1e-12);
  }
}

TEST(Conv, Linearity) {
  std::mt19937_64 rng(2);
  auto p = conv_params(3, 2, 3, rng);
  p.biases.fill(0);
  const auto a = random_tensor({2, 2, 6, 6}, rng), b = random_tensor({2, 2, 6, 6}, rng);
  Tensor<double> mix(a.shape());
  for (std::size_t i = 0; i < mix.size(); ++i) mix[i] = 2.5 * a[i] - 0.75 * b[i];
  const auto ya = conv_forward(a, p, 1), yb = conv_forward(b, p, 1), ym = conv_forward(mix, p, 1);
  for (std::size_t i = 0; i < ym.size(); ++i) EXPECT_NEAR(ym[i], 2.5 * ya[i] - 0.75 * yb[i], 1e-10);
}

TEST(Conv, PerSampleOutputIgnoresBatchMates) {
  std::mt19937_64 rng(21);
  LayerParams<double> p;
  p.weights = random_tensor({5, 3, 3, 3}, rng);
  p.biases = random_tensor({5}, rng);
  const auto x = random_tensor({7, 3, 9, 9}, rng);
  const auto all = conv_forward(x, p, 2, true);
  for (std::size_t n = 0; n < 7; ++n) {
    const auto one = conv_forward(slice_batch(x, n, 1), p, 2, true);
    for (std::size_t i = 0; i < one.size(); ++i) ASSERT_EQ(one[i], all[n * one.size() + i]);
  }
  EXPECT_LT(max_abs_diff(all, conv_forward(x, p, 2)), 1e-12);
}

TEST(Conv, ShapeErrors) {
  std::mt19937_64 rng(3);
  const auto p = conv_params(2, 3, 3, rng);
  EXPECT_THROW(conv_forward(random_tensor({1, 2, 5, 5}, rng), p, 1), DimensionError);
  EXPECT_THROW(conv_forward(random_tensor({1, 3, 2, 5}, rng), p, 1), DimensionError);
  const auto x = random_tensor({1, 3, 5, 5}, rng);
  EXPECT_THROW(conv_backward(x, p, 1, Tensor<double>({1, 2, 2, 2})), DimensionError);
}

TEST(ConvBackward, ZeroAndIdentity) {
  std::mt19937_64 rng(4);
  const auto x = random_tensor({2, 3, 5, 5}, rng);
  const auto p = conv_params(2, 3, 3, rng);
  const auto g0 = conv_backward(x, p, 1, Tensor<double>({2, 2, 3, 3}));
  for (double v : g0.grad_input.values()) EXPECT_EQ(v, 0.0);
  for (double v : g0.grad_params.weights.values()) EXPECT_EQ(v, 0.0);
  for (double v : g0.grad_params.biases.values()) EXPECT_EQ(v, 0.0);

  LayerParams<double> id;
  id.weights = Tensor<double>({1, 1, 1, 1}, 1.0);
  id.biases = Tensor<double>({1});
  const auto xi = random_tensor({1, 1, 4, 4}, rng), g = random_tensor({1, 1, 4, 4}, rng);
  EXPECT_EQ(conv_backward(xi, id, 1, g).grad_input.vec(), g.vec());
}

TEST(ConvBackward, FiniteDifferences) {
  std::mt19937_64 rng(5);
  const auto x = random_tensor({2, 2, 6, 5}, rng);
  auto p = conv_params(3, 2, 2, rng);
  const auto w = random_tensor({2, 3, 3, 2}, rng);  // f = sum w * conv(x)
  const auto grads = conv_backward(x, p, 2, w);
  auto objective = [&](const Tensor<double>& xi, const LayerParams<double>& pi) {
    const auto y = conv_forward(xi, pi, 2);
    double s = 0;
    for (std::size_t i = 0; i < y.size(); ++i) s += w[i] * y[i];
    return s;
  };
  const auto in = gradient_check(
      [&](const std::vector<double>& v) { return objective(Tensor<double>(x.shape(), v), p); }, x.vec(),
      grads.grad_input.vec());
  EXPECT_LT(in.max_rel_error, 1e-6);
  const auto wt = gradient_check(
      [&](const std::vector<double>& v) {
        auto q = p;
        q.weights = Tensor<double>(p.weights.shape(), v);
        return objective(x, q);
      },
      p.weights.vec(), grads.grad_params.weights.vec());
  EXPECT_LT(wt.max_rel_error, 1e-6);
}

TEST(MaxPool, WindowMaxAndTies) {
  const auto r = maxpool_forward(Tensor<double>({1, 1, 2, 2}, {1, 2, 3, 4}), 2, 2);
  ASSERT_EQ(r.output.size(), 1u);
  EXPECT_EQ(r.output[0], 4.0);
  EXPECT_EQ(r.argmax[0], 3u);

  const auto c = maxpool_forward(Tensor<double>({1, 1, 4, 4}, 7.0), 2, 2);
  for (double v : c.output.values()) EXPECT_EQ(v, 7.0);
  EXPECT_EQ(c.argmax, (std::vector<std::size_t>{0, 2, 8, 10}));
}

TEST(MaxPool, MatchesSlidingWindowOracle) {
  std::mt19937_64 rng(6);
  for (auto [pool, stride] : {std::pair<std::size_t, std::size_t>{2, 2}, {3, 1}, {2, 1}, {3, 2}}) {
    const auto x = random_tensor({2, 3, 6, 6}, rng);
    const auto r = maxpool_forward(x, pool, stride);
    const std::size_t o = (6 - pool) / stride + 1;
    ASSERT_EQ(r.output.shape(), (Shape{2, 3, o, o}));
    for (std::size_t b = 0; b < 2; ++b)
      for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t i = 0; i < o; ++i)
          for (std::size_t j = 0; j < o; ++j) {
            double m = -1e300;
            for (std::size_t u = 0; u < pool; ++u)
              for (std::size_t v = 0; v < pool; ++v) m = std::max(m, x.at(b, c, i * stride + u, j * stride + v));
            EXPECT_EQ(r.output.at(b, c, i, j), m);
          }
  }
  EXPECT_THROW(maxpool_forward(Tensor<double>({1, 1, 2, 2}), 3, 1), DimensionError);
}

TEST(MaxPool, BackwardRoutesToArgmax) {
  const Tensor<double> x({1, 1, 2, 2}, {1, 5, 3, 4});
  const auto r = maxpool_forward(x, 2, 2);
  const auto g = maxpool_backward(r.argmax, Tensor<double>({1, 1, 1, 1}, 1.0), x.shape());
  EXPECT_EQ(g.vec(), (std::vector<double>{0, 1, 0, 0}));
  const auto z = maxpool_backward(r.argmax, Tensor<double>({1, 1, 1, 1}), x.shape());
  for (double v : z.values()) EXPECT_EQ(v, 0.0);
  // overlapping windows accumulate
  const Tensor<double> col({1, 1, 3, 3}, {0, 0, 0, 0, 9, 0, 0, 0, 0});
  const auto rc = maxpool_forward(col, 2, 1);
  const auto gc = maxpool_backward(rc.argmax, Tensor<double>({1, 1, 2, 2}, 1.0), col.shape());
  EXPECT_EQ(gc[4], 4.0);
  EXPECT_THROW(maxpool_backward({99}, Tensor<double>({1, 1, 1, 1}, 1.0), x.shape()), UsageError);
}

TEST(BatchNorm, ConstantInputMapsToBias) {
  const Tensor<double> x({4, 2, 3, 3}, 2.5);
  EXPECT_EQ(batchnorm_forward(x, bn_params(2, 1.0, 0.0), Mode::Train).output.vec(),
            std::vector<double>(x.size(), 0.0));
  const auto shifted = batchnorm_forward(x, bn_params(2, 1.0, 0.7), Mode::Train);
  for (double v : shifted.output.values()) {
    EXPECT_DOUBLE_EQ(v, 0.7);
  }
}

TEST(BatchNorm, TrainMomentsMatchDirectComputation) {
  std::mt19937_64 rng(7);
  const auto x = random_tensor({5, 3, 4, 4}, rng, -3, 5);
  auto p = bn_params(3, 1.0, 0.0);
  p.bn_gain = Tensor<double>({3}, {0.5, 2.0, 1.5});
  p.bn_bias = Tensor<double>({3}, {-1.0, 0.25, 3.0});
  const auto r = batchnorm_forward(x, p, Mode::Train);
  for (std::size_t c = 0; c < 3; ++c) {
    double m = 0, m_in = 0;
    std::size_t cnt = 0;
    for (std::size_t b = 0; b < 5; ++b)
      for (std::size_t i = 0; i < 16; ++i) {
        m += r.output[(b * 3 + c) * 16 + i];
        m_in += x[(b * 3 + c) * 16 + i];
        ++cnt;
      }
    m /= cnt;
    m_in /= cnt;
    double v = 0, v_in = 0;
    for (std::size_t b = 0; b < 5; ++b)
      for (std::size_t i = 0; i < 16; ++i) {
        v += std::pow(r.output[(b * 3 + c) * 16 + i] - m, 2);
        v_in += std::pow(x[(b * 3 + c) * 16 + i] - m_in, 2);
      }
    v /= cnt;
    v_in /= cnt;
    EXPECT_NEAR(m, p.bn_bias[c], 1e-4);
    EXPECT_NEAR(v, p.bn_gain[c] * p.bn_gain[c], 1e-4);
    EXPECT_NEAR(r.new_running_mean[c], 0.1 * m_in, 1e-12);
    EXPECT_GT(r.new_running_var[c], 0.0);
  }
}

TEST(BatchNorm, EvalNeedsRunningStatistics) {
  const Tensor<double> x({2, 1, 1, 1}, {1, 3});
  auto p = bn_params(1, 2.0, 1.0);
  EXPECT_THROW(batchnorm_forward(x, p, Mode::Eval), UsageError);
  p.bn_running_mean[0] = 1.0;
  p.bn_running_var[0] = 4.0 - 1e-5;
  p.running_ready = true;
  const auto y = batchnorm_forward(x, p, Mode::Eval).output;
  EXPECT_NEAR(y[0], 1.0, 1e-12);
  EXPECT_NEAR(y[1], 3.0, 1e-12);
  EXPECT_THROW(batchnorm_forward(Tensor<double>({1, 1, 1, 1}), bn_params(1, 1, 0), Mode::Train), UsageError);
}

TEST(BatchNormBackward, ZeroAndProjection) {
  std::mt19937_64 rng(8);
  const auto x = random_tensor({4, 2, 2, 2}, rng);
  const auto p = bn_params(2, 1.0, 0.0);
  const auto r = batchnorm_forward(x, p, Mode::Train);
  const auto z = batchnorm_backward(r.cache, p, Tensor<double>(x.shape()));
  for (double v : z.grad_input.values()) EXPECT_EQ(v, 0.0);
  for (double v : z.grad_params.bn_gain.values()) EXPECT_EQ(v, 0.0);

  // gradOut constant over the batch: input gradient sums to zero per channel
  Tensor<double> g(x.shape());
  for (std::size_t b = 0; b < 4; ++b)
    for (std::size_t c = 0; c < 2; ++c)
      for (std::size_t i = 0; i < 4; ++i) g[(b * 2 + c) * 4 + i] = 0.3 + c + 0.1 * i;
  const auto gb = batchnorm_backward(r.cache, p, g);
  for (std::size_t c = 0; c < 2; ++c) {
    double s = 0;
    for (std::size_t b = 0; b < 4; ++b)
      for (std::size_t i = 0; i < 4; ++i) s += gb.grad_input[(b * 2 + c) * 4 + i];
    EXPECT_NEAR(s, 0.0, 1e-12);
  }
}

TEST(BatchNormBackward, FiniteDifferences) {
  std::mt19937_64 rng(9);
  const auto x = random_tensor({3, 2, 3, 2}, rng);
  auto p = bn_params(2, 1.0, 0.0);
  p.bn_gain = Tensor<double>({2}, {1.3, 0.6});
  const auto w = random_tensor(x.shape(), rng);
  const auto r = batchnorm_forward(x, p, Mode::Train);
  const auto g = batchnorm_backward(r.cache, p, w);
  const auto res = gradient_check(
      [&](const std::vector<double>& v) {
        const auto y = batchnorm_forward(Tensor<double>(x.shape(), v), p, Mode::Train).output;
        double s = 0;
        for (std::size_t i = 0; i < y.size(); ++i) s += w[i] * y[i];
        return s;
      },
      x.vec(), g.grad_input.vec());
  EXPECT_LT(res.max_rel_error, 1e-5);
}

TEST(Relu, DefinitionAndDeadRegion) {
  const Tensor<double> x({3}, {-1, 0, 2});
  EXPECT_EQ(relu(x).vec(), (std::vector<double>{0, 0, 2}));
  EXPECT_EQ(relu_backward(x, Tensor<double>({3}, 1.0)).vec(), (std::vector<double>{0, 0, 1}));
  const Tensor<double> neg({4}, -0.5);
  EXPECT_EQ(relu(neg).vec(), std::vector<double>(4, 0.0));
  EXPECT_EQ(relu_backward(neg, Tensor<double>({4}, 3.0)).vec(), std::vector<double>(4, 0.0));
}

TEST(L2Normalize, KnownValuesAndUnitNorm) {
  const auto y = l2_normalize(Tensor<double>({1, 2}, {3, 4}));
  EXPECT_DOUBLE_EQ(y[0], 0.6);
  EXPECT_DOUBLE_EQ(y[1], 0.8);
  const Tensor<double> u({1, 3}, {0, 1, 0});
  EXPECT_EQ(l2_normalize(u).vec(), u.vec());
  std::mt19937_64 rng(10);
  const auto many = l2_normalize(random_tensor({20, 256}, rng));
  for (std::size_t r = 0; r < 20; ++r) {
    double s = 0;
    for (std::size_t j = 0; j < 256; ++j) s += many.at(r, j) * many.at(r, j);
    EXPECT_NEAR(std::sqrt(s), 1.0, 1e-6);
  }
  EXPECT_THROW(l2_normalize(Tensor<double>({1, 3})), DomainError);
}

TEST(L2Normalize, BackwardFiniteDifferences) {
  std::mt19937_64 rng(11);
  const auto x = random_tensor({1, 256}, rng);
  const auto w = random_tensor({1, 256}, rng);
  const auto g = l2_normalize_backward(x, w);
  const auto res = gradient_check(
      [&](const std::vector<double>& v) {
        const auto y = l2_normalize(Tensor<double>(x.shape(), v));
        double s = 0;
        for (std::size_t i = 0; i < y.size(); ++i) s += w[i] * y[i];
        return s;
      },
      x.vec(), g.vec());
  EXPECT_LT(res.max_rel_error, 1e-6);
}
