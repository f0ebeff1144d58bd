#ifndef GLOSS_GRADCHECK_HPP
#define GLOSS_GRADCHECK_HPP

// Finite-difference verification suite: every layer backward pass, every loss
// gradient and whole networks end to end, in double precision.

#include <algorithm>
#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "json.hpp"

#include "gloss/arch.hpp"
#include "gloss/data.hpp"
#include "gloss/eval.hpp"
#include "gloss/layers.hpp"
#include "gloss/losses.hpp"
#include "gloss/model.hpp"
#include "gloss/optimizer.hpp"

namespace gloss {

struct CheckOutcome {
  std::string name;
  double max_rel_error = 0;
  double tolerance = 0;
  std::size_t points = 0;       // evaluation points (random inputs or shapes)
  std::size_t coordinates = 0;  // coordinates compared in total
  std::size_t resamples = 0;    // points redrawn after a kink crossing
  bool passed = false;
};

struct SuiteOptions {
  std::uint64_t seed = 0;
  std::string filter;   // substring of check names; empty selects all
  std::string corrupt;  // checks whose name contains this get a wrong gradient
  std::size_t loss_points = 50;
  std::size_t layer_shapes = 20;
  std::size_t network_points = 3;
  std::size_t coords_per_tensor = 12;
  double step = 1e-5;
};

struct SuiteReport {
  std::vector<CheckOutcome> checks;
  bool passed() const {
    return std::all_of(checks.begin(), checks.end(), [](const auto& c) { return c.passed; });
  }
};

inline nlohmann::json suite_to_json(const SuiteReport& r) {
  nlohmann::json j;
  j["passed"] = r.passed();
  j["count"] = r.checks.size();
  auto& arr = j["checks"] = nlohmann::json::array();
  for (const auto& c : r.checks) {
    arr.push_back({{"name", c.name},
                   {"max_rel_error", c.max_rel_error},
                   {"tolerance", c.tolerance},
                   {"points", c.points},
                   {"coordinates", c.coordinates},
                   {"resamples", c.resamples},
                   {"passed", c.passed}});
  }
  return j;
}

namespace gc {

using Vec = std::vector<double>;
using Rng = std::mt19937_64;

inline constexpr std::size_t kMaxResamples = 50;

inline double gaussian(Rng& rng) { return std::normal_distribution<double>(0.0, 1.0)(rng); }
inline double uniform(Rng& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}
inline std::size_t pick(Rng& rng, std::size_t lo, std::size_t hi) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

inline void corrupt(Vec& analytic) {
  if (!analytic.empty()) analytic[0] = analytic[0] * 1.5 + 1e-3;
}

// Packs tensors into one coordinate vector and unpacks it again.
struct Packer {
  std::vector<Shape> shapes;

  Vec pack(const std::vector<const Tensor<double>*>& ts) {
    shapes.clear();
    Vec v;
    for (const auto* t : ts) {
      shapes.push_back(t->shape());
      v.insert(v.end(), t->vec().begin(), t->vec().end());
    }
    return v;
  }
  std::vector<Tensor<double>> unpack(const Vec& v) const {
    std::vector<Tensor<double>> out;
    std::size_t off = 0;
    for (const auto& s : shapes) {
      const std::size_t len = shape_volume(s);
      out.emplace_back(s, Vec(v.begin() + static_cast<std::ptrdiff_t>(off),
                              v.begin() + static_cast<std::ptrdiff_t>(off + len)));
      off += len;
    }
    return out;
  }
};

inline Vec flat(const std::vector<Tensor<double>>& ts) {
  Vec v;
  for (const auto& t : ts) v.insert(v.end(), t.vec().begin(), t.vec().end());
  return v;
}

inline Tensor<double> random_tensor(Shape s, Rng& rng, double scale = 1.0) {
  Tensor<double> t(std::move(s));
  for (auto& x : t.values()) x = scale * gaussian(rng);
  return t;
}

inline Tensor<double> unit_rows(std::size_t n, std::size_t d, Rng& rng) {
  Tensor<double> t({n, d});
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0;
    for (std::size_t j = 0; j < d; ++j) s += (t.at(i, j) = gaussian(rng)) * t.at(i, j);
    for (std::size_t j = 0; j < d; ++j) t.at(i, j) /= std::sqrt(s);
  }
  return t;
}

inline std::uint64_t hash_bits(const std::vector<bool>& bits) {
  Fnv1a h;
  for (bool b : bits) h.add_u64(b);
  return h.value();
}

inline double dot(const Tensor<double>& a, const Tensor<double>& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

// One evaluation point: the coordinate vector, the objective, its analytic
// gradient and an optional regime signature.
struct Problem {
  Vec point;
  std::function<double(const Vec&)> f;
  Vec analytic;
  std::function<std::uint64_t(const Vec&)> regime;
  std::vector<std::size_t> coords;
};

// Runs `points` problems drawn by `make`, redrawing any whose perturbations
// cross a kink.
inline CheckOutcome run_check(const std::string& name, double tolerance, std::size_t points,
                              const SuiteOptions& opts, Rng& rng,
                              const std::function<Problem(Rng&)>& make) {
  CheckOutcome out;
  out.name = name;
  out.tolerance = tolerance;
  const bool bad = !opts.corrupt.empty() && name.find(opts.corrupt) != std::string::npos;
  while (out.points < points) {
    Problem p = make(rng);
    if (bad) corrupt(p.analytic);
    const auto r = gradient_check(p.f, p.point, p.analytic, opts.step, p.coords, p.regime);
    if (r.boundary_hit) {
      if (++out.resamples > kMaxResamples * points) {
        throw NumericalError(name + ": too many kink crossings while resampling");
      }
      continue;
    }
    out.max_rel_error = std::max(out.max_rel_error, r.max_rel_error);
    out.coordinates += r.checked;
    ++out.points;
  }
  out.passed = out.max_rel_error < tolerance;
  return out;
}

// ---------------------------------------------------------------------------
// Losses (N = 8, 16-dimensional embeddings)

inline constexpr std::size_t kLossBatch = 8;
inline constexpr std::size_t kLossDim = 16;

// Anchors, positives and negatives on the unit sphere; every other point has
// positives near their anchors so both hinge states are exercised.
inline std::vector<Tensor<double>> random_triplets(Rng& rng) {
  auto a = unit_rows(kLossBatch, kLossDim, rng);
  auto p = unit_rows(kLossBatch, kLossDim, rng);
  auto n = unit_rows(kLossBatch, kLossDim, rng);
  if (rng() % 2) {
    for (std::size_t r = 0; r < kLossBatch; ++r) {
      const double s = uniform(rng, 0.1, 0.6);
      for (std::size_t j = 0; j < kLossDim; ++j) p.at(r, j) = a.at(r, j) + s * p.at(r, j);
    }
  }
  return {a, p, n};
}

inline Problem embedding_loss_problem(LossKind kind, const LossConfig& cfg, Rng& rng) {
  Packer pk;
  const auto ts = random_triplets(rng);
  Problem pr;
  pr.point = pk.pack({&ts[0], &ts[1], &ts[2]});
  auto eval = [kind, cfg, pk](const Vec& x) {
    const auto t = pk.unpack(x);
    switch (kind) {
      case LossKind::Triplet: return triplet_loss(t[0], t[1], t[2], cfg);
      case LossKind::GlobalEmbed: return global_embedding_loss(t[0], t[1], t[2], cfg);
      case LossKind::TripletGlobal: return combined_loss(t[0], t[1], t[2], cfg);
      default: {
        // pairwise: pairs (a, p) matching and (a, n) non-matching
        const auto left = concat_batch<double>({&t[0], &t[0]});
        const auto right = concat_batch<double>({&t[1], &t[2]});
        auto r = pairwise_embedding_loss(left, right, detail::half_labels(kLossBatch));
        LossResult<double> out;
        out.value = r.value;
        auto [l1, l2] = detail::split_halves(r.grads[0]);
        auto [r1, r2] = detail::split_halves(r.grads[1]);
        l1 += l2;
        out.grads = {l1, r1, r2};
        out.active = r.active;
        return out;
      }
    }
  };
  pr.f = [eval](const Vec& x) { return eval(x).value; };
  pr.analytic = flat(eval(pr.point).grads);
  pr.regime = [eval](const Vec& x) { return hash_bits(eval(x).active); };
  return pr;
}

inline Problem pairwise_similarity_problem(const LossConfig& cfg, Rng& rng) {
  Tensor<double> g({2 * kLossBatch});
  for (std::size_t i = 0; i < g.size(); ++i) {
    g[i] = i < kLossBatch ? uniform(rng, 0.2, 2.0) : uniform(rng, -1.0, 1.0);
  }
  const auto labels = detail::half_labels(kLossBatch);
  Problem pr;
  pr.point = g.vec();
  pr.f = [cfg, labels](const Vec& x) {
    return pairwise_similarity_loss(Tensor<double>({x.size()}, x), labels, cfg).value;
  };
  pr.analytic = pairwise_similarity_loss(g, labels, cfg).grads[0].vec();
  return pr;
}

inline Problem global_similarity_problem(const LossConfig& cfg, Rng& rng) {
  const double shift = uniform(rng, 0.0, 2.0);
  Tensor<double> gp({kLossBatch}), gm({kLossBatch});
  for (std::size_t i = 0; i < kLossBatch; ++i) {
    gp[i] = shift + 0.5 * gaussian(rng);
    gm[i] = 0.5 * gaussian(rng);
  }
  Packer pk;
  Problem pr;
  pr.point = pk.pack({&gp, &gm});
  auto eval = [cfg, pk](const Vec& x) {
    const auto t = pk.unpack(x);
    return global_similarity_loss(t[0], t[1], cfg);
  };
  pr.f = [eval](const Vec& x) { return eval(x).value; };
  pr.analytic = flat(eval(pr.point).grads);
  pr.regime = [eval](const Vec& x) { return hash_bits(eval(x).active); };
  return pr;
}

// ---------------------------------------------------------------------------
// Layers: f = sum(w * layer(x)) for a fixed random w

inline Problem conv_problem(Rng& rng) {
  const std::size_t k = pick(rng, 1, 3), stride = pick(rng, 1, 2);
  const Shape xs{pick(rng, 1, 3), pick(rng, 1, 3), k + pick(rng, 0, 4), k + pick(rng, 0, 4)};
  const std::size_t filters = pick(rng, 1, 4);
  const auto x = random_tensor(xs, rng);
  const auto w = random_tensor({filters, xs[1], k, k}, rng, 0.5);
  const auto b = random_tensor({filters}, rng, 0.5);
  LayerParams<double> lp;
  lp.weights = w;
  lp.biases = b;
  const auto out_shape = conv_forward(x, lp, stride).shape();
  const auto proj = random_tensor(out_shape, rng);
  Packer pk;
  Problem pr;
  pr.point = pk.pack({&x, &w, &b});
  pr.f = [pk, stride, proj](const Vec& v) {
    const auto t = pk.unpack(v);
    LayerParams<double> p;
    p.weights = t[1];
    p.biases = t[2];
    return dot(conv_forward(t[0], p, stride), proj);
  };
  const auto g = conv_backward(x, lp, stride, proj);
  pr.analytic = flat({g.grad_input, g.grad_params.weights, g.grad_params.biases});
  return pr;
}

inline Problem maxpool_problem(Rng& rng) {
  const std::size_t pool = pick(rng, 1, 3), stride = pick(rng, 1, 3);
  const Shape xs{pick(rng, 1, 2), pick(rng, 1, 3), pool + pick(rng, 0, 5), pool + pick(rng, 0, 5)};
  // distinct values 0.05 apart so no perturbation can reorder a window
  Tensor<double> x(xs);
  std::vector<std::size_t> order(x.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::shuffle(order.begin(), order.end(), rng);
  for (std::size_t i = 0; i < order.size(); ++i) x[order[i]] = 0.05 * static_cast<double>(i) - 1.0;
  const auto fwd = maxpool_forward(x, pool, stride);
  const auto proj = random_tensor(fwd.output.shape(), rng);
  Problem pr;
  pr.point = x.vec();
  pr.f = [xs, pool, stride, proj](const Vec& v) {
    return dot(maxpool_forward(Tensor<double>(xs, v), pool, stride).output, proj);
  };
  pr.analytic = maxpool_backward(fwd.argmax, proj, xs).vec();
  pr.regime = [xs, pool, stride](const Vec& v) {
    Fnv1a h;
    for (auto a : maxpool_forward(Tensor<double>(xs, v), pool, stride).argmax) h.add_u64(a);
    return h.value();
  };
  return pr;
}

inline Problem batchnorm_problem(Rng& rng) {
  Shape xs;
  do {
    xs = {pick(rng, 2, 4), pick(rng, 1, 3), pick(rng, 1, 3), pick(rng, 1, 3)};
  } while (xs[0] * xs[2] * xs[3] < 4);
  const std::size_t c = xs[1];
  const auto x = random_tensor(xs, rng);
  Tensor<double> gain({c}), bias({c});
  for (std::size_t i = 0; i < c; ++i) {
    gain[i] = uniform(rng, 0.5, 1.5);
    bias[i] = uniform(rng, -0.5, 0.5);
  }
  auto params = [c](const Tensor<double>& g, const Tensor<double>& b) {
    LayerParams<double> lp;
    lp.bn_gain = g;
    lp.bn_bias = b;
    lp.bn_running_mean = Tensor<double>({c});
    lp.bn_running_var = Tensor<double>({c}, 1.0);
    return lp;
  };
  const auto lp = params(gain, bias);
  const auto fwd = batchnorm_forward(x, lp, Mode::Train);
  const auto proj = random_tensor(xs, rng);
  Packer pk;
  Problem pr;
  pr.point = pk.pack({&x, &gain, &bias});
  pr.f = [pk, proj, params](const Vec& v) {
    const auto t = pk.unpack(v);
    return dot(batchnorm_forward(t[0], params(t[1], t[2]), Mode::Train).output, proj);
  };
  const auto g = batchnorm_backward(fwd.cache, lp, proj);
  pr.analytic = flat({g.grad_input, g.grad_params.bn_gain, g.grad_params.bn_bias});
  return pr;
}

inline Problem relu_problem(Rng& rng) {
  const Shape xs{pick(rng, 1, 3), pick(rng, 1, 3), pick(rng, 1, 4), pick(rng, 1, 4)};
  Tensor<double> x(xs);
  // magnitudes kept away from the kink at zero
  for (auto& v : x.values()) v = (rng() % 2 ? 1.0 : -1.0) * uniform(rng, 0.05, 1.0);
  const auto proj = random_tensor(xs, rng);
  Problem pr;
  pr.point = x.vec();
  pr.f = [xs, proj](const Vec& v) { return dot(relu(Tensor<double>(xs, v)), proj); };
  pr.analytic = relu_backward(x, proj).vec();
  pr.regime = [](const Vec& v) {
    std::vector<bool> bits;
    for (double e : v) bits.push_back(e > 0);
    return hash_bits(bits);
  };
  return pr;
}

inline Problem l2norm_problem(Rng& rng) {
  const Shape xs{pick(rng, 1, 4), pick(rng, 2, 8), 1, 1};
  const auto x = random_tensor(xs, rng);
  const auto proj = random_tensor({xs[0], xs[1]}, rng);
  Problem pr;
  pr.point = x.vec();
  pr.f = [xs, proj](const Vec& v) { return dot(l2_normalize(Tensor<double>(xs, v)), proj); };
  pr.analytic = l2_normalize_backward(x, proj).vec();
  return pr;
}

// ---------------------------------------------------------------------------
// Networks

inline constexpr std::size_t kNetworkBatch = 6;

template <class Params>
Vec flatten_trainables(Params& params) {
  Vec v;
  for_each_trainable(params, [&](const std::string&, auto& t, bool) {
    v.insert(v.end(), t.vec().begin(), t.vec().end());
  });
  return v;
}

inline void assign_trainables(Network<double>& net, const Vec& v) {
  ParamSet<double> ps;
  for (auto& g : net.groups()) ps.push_back(std::move(g.params));
  std::size_t off = 0;
  for_each_trainable(ps, [&](const std::string&, Tensor<double>& t, bool) {
    std::copy(v.begin() + static_cast<std::ptrdiff_t>(off),
              v.begin() + static_cast<std::ptrdiff_t>(off + t.size()), t.data());
    off += t.size();
  });
  for (std::size_t i = 0; i < ps.size(); ++i) net.groups()[i].params = std::move(ps[i]);
}

// Up to `per_tensor` random coordinates of every trainable tensor.
inline std::vector<std::size_t> sample_coords(ParamSet<double>& ps, std::size_t per_tensor,
                                              Rng& rng) {
  std::vector<std::size_t> coords;
  std::size_t off = 0;
  for_each_trainable(ps, [&](const std::string&, Tensor<double>& t, bool) {
    std::vector<std::size_t> idx(t.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = off + i;
    std::shuffle(idx.begin(), idx.end(), rng);
    idx.resize(std::min(per_tensor, idx.size()));
    std::sort(idx.begin(), idx.end());
    coords.insert(coords.end(), idx.begin(), idx.end());
    off += t.size();
  });
  return coords;
}

// Small random perturbation of the batch-norm gains and biases so that they
// do not sit at their symmetric initial values.
inline void jitter_bnorm(Network<double>& net, Rng& rng) {
  for (auto& g : net.groups()) {
    for (auto& lp : g.params.layers) {
      if (!lp.has_bnorm()) continue;
      for (auto& v : lp.bn_gain.values()) v = uniform(rng, 0.7, 1.3);
      for (auto& v : lp.bn_bias.values()) v = uniform(rng, -0.2, 0.2);
    }
  }
}

inline Problem network_problem(const std::function<Network<double>(std::uint64_t)>& make_net,
                               const Shape& patch, LossKind kind, const SuiteOptions& opts,
                               Rng& rng) {
  auto net = std::make_shared<Network<double>>(make_net(rng()));
  jitter_bnorm(*net, rng);
  auto batch = std::make_shared<TripletBatch<double>>();
  Shape s = patch;
  s.insert(s.begin(), kNetworkBatch);
  batch->anchors = random_tensor(s, rng);
  batch->positives = random_tensor(s, rng);
  batch->negatives = random_tensor(s, rng);
  // positives resemble their anchors
  for (std::size_t i = 0; i < batch->positives.size(); ++i) {
    batch->positives[i] = batch->anchors[i] + 0.5 * batch->positives[i];
  }
  const LossConfig cfg = LossConfig::defaults_for(kind);
  if (kind == LossKind::PairwiseSim) {
    // 1/(kappa + g) needs positive matching scores: lift the head's bias
    PairScorer<double> scorer(*net);
    const auto g = scorer.forward(batch->anchors, batch->positives, Mode::Train);
    const double lowest = *std::min_element(g.vec().begin(), g.vec().end());
    net->groups().back().params.layers.back().biases[0] += 1.0 - lowest;
  }
  ParamSet<double> ps = net->params();
  Problem pr;
  pr.point = flatten_trainables(ps);
  pr.coords = sample_coords(ps, opts.coords_per_tensor, rng);
  const auto base = loss_and_gradients(*net, kind, cfg, *batch, {true, false, false});
  pr.analytic = flatten_trainables(base.grads);
  pr.f = [net, batch, kind, cfg](const Vec& x) {
    assign_trainables(*net, x);
    return loss_and_gradients(*net, kind, cfg, *batch, {false, false, false}).loss;
  };
  pr.regime = [net, batch, kind, cfg](const Vec& x) {
    assign_trainables(*net, x);
    return loss_and_gradients(*net, kind, cfg, *batch, {false, false, true}).signature;
  };
  return pr;
}

}  // namespace gc

inline const char* kToyCheckArch = arch::kToyTower;
inline constexpr const char* kSimilarityCheckArch = "B(8,5,1)-P(2,2)-B(16,3,1)-P(2,2)-C(1,2,1)";
inline constexpr const char* kStreamCheckArch = "B(4,3,1)-P(2,2)-B(8,3,1)";
inline constexpr const char* kFusionCheckArch = "B(16,1,1)-C(1,1,1)";

/// Names of all checks, in execution order.
inline std::vector<std::string> gradcheck_names() {
  std::vector<std::string> names;
  for (auto k : {LossKind::PairwiseEmbed, LossKind::PairwiseSim, LossKind::Triplet,
                 LossKind::GlobalEmbed, LossKind::GlobalSim, LossKind::TripletGlobal}) {
    names.push_back("loss/" + to_string(k));
  }
  for (const char* l : {"conv", "maxpool", "batchnorm", "relu", "l2norm"}) {
    names.push_back(std::string("layer/") + l);
  }
  for (auto k : {LossKind::PairwiseEmbed, LossKind::Triplet, LossKind::GlobalEmbed,
                 LossKind::TripletGlobal}) {
    names.push_back("network/toy+" + to_string(k));
  }
  for (auto k : {LossKind::PairwiseSim, LossKind::GlobalSim}) {
    names.push_back("network/siamese+" + to_string(k));
    names.push_back("network/central-surround+" + to_string(k));
  }
  return names;
}

/// Runs every check whose name contains opts.filter.
inline SuiteReport run_gradcheck_suite(const SuiteOptions& opts) {
  SuiteReport rep;
  for (const auto& name : gradcheck_names()) {
    if (name.find(opts.filter) == std::string::npos) continue;
    // each check has its own stream so filtering does not change results
    Fnv1a h;
    h.add(name);
    gc::Rng rng(opts.seed ^ h.value());
    const auto slash = name.find('/');
    const std::string group = name.substr(0, slash), item = name.substr(slash + 1);
    if (group == "loss") {
      const LossKind kind = parse_loss_kind(item);
      const LossConfig cfg = LossConfig::defaults_for(kind);
      rep.checks.push_back(gc::run_check(name, 1e-4, opts.loss_points, opts, rng, [&](gc::Rng& r) {
        if (kind == LossKind::PairwiseSim) return gc::pairwise_similarity_problem(cfg, r);
        if (kind == LossKind::GlobalSim) return gc::global_similarity_problem(cfg, r);
        return gc::embedding_loss_problem(kind, cfg, r);
      }));
    } else if (group == "layer") {
      std::function<gc::Problem(gc::Rng&)> make;
      if (item == "conv") make = gc::conv_problem;
      if (item == "maxpool") make = gc::maxpool_problem;
      if (item == "batchnorm") make = gc::batchnorm_problem;
      if (item == "relu") make = gc::relu_problem;
      if (item == "l2norm") make = gc::l2norm_problem;
      rep.checks.push_back(gc::run_check(name, 1e-5, opts.layer_shapes, opts, rng, make));
    } else {
      const auto plus = item.find('+');
      const std::string net_name = item.substr(0, plus);
      const LossKind kind = parse_loss_kind(item.substr(plus + 1));
      std::function<Network<double>(std::uint64_t)> make_net;
      Shape patch;
      if (net_name == "toy") {
        const auto spec = parse_arch(kToyCheckArch, {2, 1, 1});
        make_net = [spec](std::uint64_t s) {
          return Network<double>::embedding(NetworkKind::Triplet, spec, s);
        };
        patch = {2, 1, 1};
      } else if (net_name == "siamese") {
        const auto spec = parse_arch(kSimilarityCheckArch, {2, 16, 16});
        make_net = [spec](std::uint64_t s) { return Network<double>::similarity(spec, s); };
        patch = {1, 16, 16};
      } else {
        ParseOptions features;
        features.output = OutputKind::Features;
        const auto stream = parse_arch(kStreamCheckArch, {1, 8, 8}, features);
        const auto fusion = parse_arch(kFusionCheckArch, {32, 1, 1});
        make_net = [stream, fusion](std::uint64_t s) {
          return Network<double>::central_surround(stream, fusion, s);
        };
        patch = {1, 16, 16};
      }
      rep.checks.push_back(gc::run_check(name, 1e-4, opts.network_points, opts, rng,
                                         [&](gc::Rng& r) {
                                           return gc::network_problem(make_net, patch, kind, opts, r);
                                         }));
    }
  }
  return rep;
}

}  // namespace gloss

#endif  // GLOSS_GRADCHECK_HPP
