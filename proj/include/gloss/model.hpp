#ifndef GLOSS_MODEL_HPP
#define GLOSS_MODEL_HPP

// Towers built from architecture specs, and the siamese / triplet /
// central-surround networks that share one parameter set across towers.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "gloss/arch.hpp"
#include "gloss/errors.hpp"
#include "gloss/hash.hpp"
#include "gloss/layers.hpp"
#include "gloss/patches.hpp"
#include "gloss/tensor.hpp"

namespace gloss {

enum class NetworkKind { SiameseEmbedding, SiameseSimilarity, Triplet, CentralSurroundSimilarity };

inline std::string to_string(NetworkKind k) {
  switch (k) {
    case NetworkKind::SiameseEmbedding: return "siamese-embedding";
    case NetworkKind::SiameseSimilarity: return "siamese-similarity";
    case NetworkKind::Triplet: return "triplet";
    case NetworkKind::CentralSurroundSimilarity: return "central-surround";
  }
  return "?";
}

inline NetworkKind parse_network_kind(const std::string& s) {
  for (auto k : {NetworkKind::SiameseEmbedding, NetworkKind::SiameseSimilarity,
                 NetworkKind::Triplet, NetworkKind::CentralSurroundSimilarity}) {
    if (to_string(k) == s) return k;
  }
  throw ConfigError("unknown network kind '" + s + "'");
}

inline bool is_embedding_network(NetworkKind k) {
  return k == NetworkKind::SiameseEmbedding || k == NetworkKind::Triplet;
}

/// Parameters of one tower: one entry per B/C layer, in order.
template <class T>
struct TowerParams {
  std::vector<LayerParams<T>> layers;
};

/// Parameters (or gradients) of a whole network, one entry per parameter group.
template <class T>
using ParamSet = std::vector<TowerParams<T>>;

/// Zero-mean Gaussian weights with std sqrt(2 / fan_in); zero biases;
/// unit bnorm gain, zero bnorm bias.
template <class T>
TowerParams<T> init_tower_params(const ArchSpec& spec, std::mt19937_64& rng) {
  TowerParams<T> tp;
  std::size_t channels = spec.input.channels;
  for (const auto& l : spec.layers) {
    if (!l.has_params()) continue;
    const std::size_t k = spec.effective_kernel(l);
    LayerParams<T> lp;
    lp.weights = Tensor<T>({l.filters, channels, k, k});
    std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(channels * k * k)));
    for (auto& w : lp.weights.values()) w = static_cast<T>(dist(rng));
    lp.biases = Tensor<T>({l.filters});
    if (l.kind == LayerKind::Block) {
      lp.bn_gain = Tensor<T>({l.filters}, T{1});
      lp.bn_bias = Tensor<T>({l.filters});
      lp.bn_running_mean = Tensor<T>({l.filters});
      lp.bn_running_var = Tensor<T>({l.filters}, T{1});
    }
    tp.layers.push_back(std::move(lp));
    channels = l.filters;
  }
  return tp;
}

/// Same structure as `params`, all values zero.
template <class T>
ParamSet<T> zeros_like(const ParamSet<T>& params) {
  ParamSet<T> out(params.size());
  for (std::size_t g = 0; g < params.size(); ++g) {
    for (const auto& lp : params[g].layers) {
      LayerParams<T> z;
      z.weights = Tensor<T>(lp.weights.shape());
      z.biases = Tensor<T>(lp.biases.shape());
      if (lp.has_bnorm()) {
        z.bn_gain = Tensor<T>(lp.bn_gain.shape());
        z.bn_bias = Tensor<T>(lp.bn_bias.shape());
      }
      out[g].layers.push_back(std::move(z));
    }
  }
  return out;
}

/// Visits every trainable tensor of a parameter set as (name, tensor, decays).
/// Batch-norm gain and bias are flagged as not subject to weight decay. A conv
/// bias feeding a batch norm is cancelled by the mean subtraction and is not
/// trained.
template <class Params, class F>
void for_each_trainable(Params& params, F&& fn) {
  for (std::size_t g = 0; g < params.size(); ++g) {
    for (std::size_t l = 0; l < params[g].layers.size(); ++l) {
      auto& lp = params[g].layers[l];
      const std::string base = "group" + std::to_string(g) + ".layer" + std::to_string(l) + ".";
      fn(base + "weights", lp.weights, true);
      if (lp.bn_gain.empty()) {
        fn(base + "biases", lp.biases, true);
      } else {
        fn(base + "bn_gain", lp.bn_gain, false);
        fn(base + "bn_bias", lp.bn_bias, false);
      }
    }
  }
}

/// One forward/backward pass of an ArchSpec over a shared parameter set.
/// The tower does not own its spec or parameters; it records the activations
/// of its last train-mode forward for the backward pass.
template <class T>
class Tower {
 public:
  Tower(const ArchSpec& spec, const TowerParams<T>& params, std::size_t group = 0)
      : spec_(&spec), params_(&params), group_(group) {}

  std::size_t group() const noexcept { return group_; }

  Tensor<T> forward(const Tensor<T>& x, Mode mode) {
    const auto& in = spec_->input;
    if (x.rank() != 4 || x.dim(1) != in.channels || x.dim(2) != in.height ||
        x.dim(3) != in.width) {
      throw DimensionError("tower input " + shape_str(x.shape()) + " does not match N x " +
                           to_string(in));
    }
    const bool train = mode == Mode::Train;
    steps_.clear();
    proposed_mean_.assign(params_->layers.size(), {});
    proposed_var_.assign(params_->layers.size(), {});
    cached_ = false;
    const std::size_t n = x.dim(0);

    Tensor<T> cur = x;
    std::size_t pi = 0;
    for (const auto& l : spec_->layers) {
      Step st;
      if (l.kind == LayerKind::Pool) {
        auto r = maxpool_forward(cur, l.kernel, l.stride);
        if (train) {
          st.pool_argmax = std::move(r.argmax);
          st.pool_in_shape = cur.shape();
        }
        cur = std::move(r.output);
      } else {
        const auto& lp = params_->layers.at(pi);
        st.param_index = pi;
        Tensor<T> out = conv_forward(cur, lp, l.stride, mode == Mode::Eval);
        if (train) st.conv_in = std::move(cur);
        if (l.kind == LayerKind::Block) {
          auto bn = batchnorm_forward(out, lp, mode);
          out = std::move(bn.output);
          if (train) {
            st.bn = std::move(bn.cache);
            proposed_mean_[pi] = std::move(bn.new_running_mean);
            proposed_var_[pi] = std::move(bn.new_running_var);
          }
        }
        if (!l.final) {
          Tensor<T> act = relu(out);
          if (train) st.relu_in = std::move(out);
          out = std::move(act);
        }
        cur = std::move(out);
        ++pi;
      }
      if (train) steps_.push_back(std::move(st));
    }
    if (spec_->output == OutputKind::Embedding) {
      Tensor<T> e = l2_normalize(cur);
      if (train) head_in_ = std::move(cur);
      cur = std::move(e);
    } else if (spec_->output == OutputKind::Similarity) {
      if (train) head_in_ = Tensor<T>(cur.shape());
      cur = cur.reshaped({n});
    } else if (train) {
      head_in_ = Tensor<T>(cur.shape());
    }
    cached_ = train;
    return cur;
  }

  /// Back-propagates `grad_out` through the last train-mode forward, adding
  /// parameter gradients into `grads`. Returns the input gradient when
  /// `want_input_grad` is set, an empty tensor otherwise.
  Tensor<T> backward(const Tensor<T>& grad_out, TowerParams<T>& grads,
                     bool want_input_grad = false) const {
    if (!cached_) throw UsageError("tower backward called without a train-mode forward");
    Tensor<T> g;
    if (spec_->output == OutputKind::Embedding) {
      g = l2_normalize_backward(head_in_, grad_out).reshaped(head_in_.shape());
    } else {
      if (grad_out.size() != head_in_.size()) {
        throw DimensionError("tower backward: gradient " + shape_str(grad_out.shape()) +
                             " vs output " + shape_str(head_in_.shape()));
      }
      g = grad_out.reshaped(head_in_.shape());
    }
    for (std::size_t i = spec_->layers.size(); i-- > 0;) {
      const auto& l = spec_->layers[i];
      const Step& st = steps_[i];
      if (l.kind == LayerKind::Pool) {
        g = maxpool_backward(st.pool_argmax, g, st.pool_in_shape);
        continue;
      }
      const auto& lp = params_->layers[st.param_index];
      auto& acc = grads.layers.at(st.param_index);
      if (!l.final) g = relu_backward(st.relu_in, g);
      if (l.kind == LayerKind::Block) {
        auto b = batchnorm_backward(st.bn, lp, g);
        acc.bn_gain += b.grad_params.bn_gain;
        acc.bn_bias += b.grad_params.bn_bias;
        g = std::move(b.grad_input);
      }
      const bool need_input = i > 0 || want_input_grad;
      auto c = conv_backward(st.conv_in, lp, l.stride, g, need_input);
      acc.weights += c.grad_params.weights;
      acc.biases += c.grad_params.biases;
      g = std::move(c.grad_input);
    }
    return g;
  }

  /// Hash of the ReLU sign pattern and pooling choices of the last train-mode
  /// forward. Two inputs with equal signatures lie in the same linear piece.
  std::uint64_t activation_signature() const {
    if (!cached_) throw UsageError("activation_signature needs a train-mode forward");
    Fnv1a h;
    for (const auto& st : steps_) {
      for (std::size_t i = 0; i < st.relu_in.size(); ++i) h.add_u64(st.relu_in[i] > T{0});
      for (auto a : st.pool_argmax) h.add_u64(a);
    }
    return h.value();
  }

  /// Running statistics proposed by the last train-mode forward, indexed by
  /// parameter layer; empty tensors for layers without bnorm.
  const std::vector<Tensor<T>>& proposed_means() const noexcept { return proposed_mean_; }
  const std::vector<Tensor<T>>& proposed_vars() const noexcept { return proposed_var_; }

 private:
  struct Step {
    std::size_t param_index = 0;
    Tensor<T> conv_in;
    BatchNormCache<T> bn;
    Tensor<T> relu_in;
    std::vector<std::size_t> pool_argmax;
    Shape pool_in_shape;
  };

  const ArchSpec* spec_;
  const TowerParams<T>* params_;
  std::size_t group_;
  std::vector<Step> steps_;
  Tensor<T> head_in_;
  std::vector<Tensor<T>> proposed_mean_, proposed_var_;
  bool cached_ = false;
};

template <class T>
struct ParamGroup {
  std::string name;
  ArchSpec spec;
  TowerParams<T> params;
};

template <class T>
class Embedder;
template <class T>
class PairScorer;

/// A siamese, triplet or central-surround network. All towers created from a
/// network read the same parameter groups, so tied weights hold by
/// construction.
///
/// Groups: embedding and siamese-similarity networks have one ("tower");
/// central-surround networks have "central", "surround" and "fusion".
template <class T>
class Network {
 public:
  Network(NetworkKind kind, std::vector<ParamGroup<T>> groups)
      : kind_(kind), groups_(std::move(groups)) {
    validate();
  }

  /// Triplet or siamese embedding network over one embedding tower.
  static Network embedding(NetworkKind kind, const ArchSpec& spec, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    return Network(kind, {{"tower", spec, init_tower_params<T>(spec, rng)}});
  }

  /// Siamese similarity network: both patches stacked as channels of one tower.
  static Network similarity(const ArchSpec& spec, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    return Network(NetworkKind::SiameseSimilarity,
                   {{"tower", spec, init_tower_params<T>(spec, rng)}});
  }

  /// Central-surround network: each patch goes through a central and a
  /// surround stream; the four stream outputs are concatenated along channels
  /// (central-left, surround-left, central-right, surround-right) and scored by
  /// the fusion tower.
  static Network central_surround(const ArchSpec& stream, const ArchSpec& fusion,
                                  std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    auto central = init_tower_params<T>(stream, rng);
    auto surround = init_tower_params<T>(stream, rng);
    auto head = init_tower_params<T>(fusion, rng);
    return Network(NetworkKind::CentralSurroundSimilarity,
                   {{"central", stream, std::move(central)},
                    {"surround", stream, std::move(surround)},
                    {"fusion", fusion, std::move(head)}});
  }

  NetworkKind kind() const noexcept { return kind_; }
  bool is_embedding() const noexcept { return is_embedding_network(kind_); }
  const std::vector<ParamGroup<T>>& groups() const noexcept { return groups_; }
  std::vector<ParamGroup<T>>& groups() noexcept { return groups_; }

  ParamSet<T> params() const {
    ParamSet<T> out;
    for (const auto& g : groups_) out.push_back(g.params);
    return out;
  }
  ParamSet<T> zero_grads() const { return zeros_like(params()); }

  /// Shape of one input patch (channels x height x width).
  FeatureShape patch_shape() const {
    const auto& in = groups_.front().spec.input;
    switch (kind_) {
      case NetworkKind::SiameseSimilarity: return {1, in.height, in.width};
      case NetworkKind::CentralSurroundSimilarity: return {1, 2 * in.height, 2 * in.width};
      default: return in;
    }
  }

  /// Writes the running statistics proposed by `towers` (averaged over the
  /// towers of each group) into the parameters.
  void commit_running_stats(const std::vector<const Tower<T>*>& towers) {
    for (std::size_t g = 0; g < groups_.size(); ++g) {
      auto& layers = groups_[g].params.layers;
      for (std::size_t l = 0; l < layers.size(); ++l) {
        if (!layers[l].has_bnorm()) continue;
        Tensor<T> mean(layers[l].bn_gain.shape()), var(layers[l].bn_gain.shape());
        int count = 0;
        for (const auto* t : towers) {
          if (t->group() != g || t->proposed_means()[l].empty()) continue;
          mean += t->proposed_means()[l];
          var += t->proposed_vars()[l];
          ++count;
        }
        if (count == 0) continue;
        mean *= static_cast<T>(1.0 / count);
        var *= static_cast<T>(1.0 / count);
        layers[l].bn_running_mean = std::move(mean);
        layers[l].bn_running_var = std::move(var);
        layers[l].running_ready = true;
      }
    }
  }

  /// Unit-norm embeddings of a batch. Train mode uses batch statistics but
  /// does not touch the running statistics.
  Tensor<T> embed(const Tensor<T>& batch, Mode mode) const;

  /// One similarity score per (left, right) pair.
  Tensor<T> similarity(const Tensor<T>& left, const Tensor<T>& right, Mode mode) const;

 private:
  void validate() const {
    const std::size_t expected = kind_ == NetworkKind::CentralSurroundSimilarity ? 3 : 1;
    if (groups_.size() != expected) {
      throw UsageError(to_string(kind_) + " network needs " + std::to_string(expected) +
                       " parameter groups");
    }
    for (const auto& g : groups_) propagate_shapes(g.spec);
    const auto& first = groups_.front().spec;
    switch (kind_) {
      case NetworkKind::SiameseEmbedding:
      case NetworkKind::Triplet:
        if (first.output != OutputKind::Embedding) {
          throw ConfigError(to_string(kind_) + " network needs an embedding architecture");
        }
        break;
      case NetworkKind::SiameseSimilarity:
        if (first.output != OutputKind::Similarity || first.input.channels != 2) {
          throw ConfigError(
              "siamese similarity network needs a 2-channel architecture ending in C(1,k,s)");
        }
        break;
      case NetworkKind::CentralSurroundSimilarity: {
        const auto& fusion = groups_[2].spec;
        const auto stream_out = propagate_shapes(first).back();
        if (first.input.channels != 1 || groups_[1].spec.input != first.input) {
          throw ConfigError("central-surround streams need matching 1-channel inputs");
        }
        if (fusion.output != OutputKind::Similarity ||
            fusion.input != FeatureShape{4 * stream_out.channels, stream_out.height,
                                         stream_out.width}) {
          throw ConfigError("central-surround fusion input must be " +
                            std::to_string(4 * stream_out.channels) + "x" +
                            std::to_string(stream_out.height) + "x" +
                            std::to_string(stream_out.width) + " and end in a scalar");
        }
        break;
      }
    }
  }

  NetworkKind kind_;
  std::vector<ParamGroup<T>> groups_;
};

/// A single embedding tower bound to a network.
template <class T>
class Embedder {
 public:
  explicit Embedder(const Network<T>& net)
      : tower_(net.groups().front().spec, net.groups().front().params, 0) {
    if (!net.is_embedding()) throw UsageError("embedder needs an embedding network");
  }

  Tensor<T> forward(const Tensor<T>& batch, Mode mode) { return tower_.forward(batch, mode); }

  void backward(const Tensor<T>& grad_embeddings, ParamSet<T>& grads) const {
    tower_.backward(grad_embeddings, grads.at(0));
  }

  std::vector<const Tower<T>*> towers() const { return {&tower_}; }

 private:
  Tower<T> tower_;
};

namespace detail {

template <class T>
Tensor<T> concat_channels(const std::vector<const Tensor<T>*>& parts) {
  const std::size_t n = parts.front()->dim(0);
  const std::size_t h = parts.front()->dim(2), w = parts.front()->dim(3);
  std::size_t channels = 0;
  for (const auto* p : parts) {
    if (p->rank() != 4 || p->dim(0) != n || p->dim(2) != h || p->dim(3) != w) {
      throw DimensionError("concat_channels: mismatched " + shape_str(p->shape()));
    }
    channels += p->dim(1);
  }
  Tensor<T> out({n, channels, h, w});
  T* dst = out.data();
  for (std::size_t b = 0; b < n; ++b) {
    for (const auto* p : parts) {
      const std::size_t len = p->dim(1) * h * w;
      const T* src = p->data() + b * len;
      dst = std::copy(src, src + len, dst);
    }
  }
  return out;
}

template <class T>
std::vector<Tensor<T>> split_channels(const Tensor<T>& t, const std::vector<std::size_t>& sizes) {
  const std::size_t n = t.dim(0), h = t.dim(2), w = t.dim(3);
  std::vector<Tensor<T>> out;
  for (auto c : sizes) out.emplace_back(Shape{n, c, h, w});
  const T* src = t.data();
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t i = 0; i < sizes.size(); ++i) {
      const std::size_t len = sizes[i] * h * w;
      std::copy(src, src + len, out[i].data() + b * len);
      src += len;
    }
  }
  return out;
}

}  // namespace detail

/// Scores pairs of patches with a similarity network. Holds the tower caches
/// of one forward pass.
template <class T>
class PairScorer {
 public:
  explicit PairScorer(const Network<T>& net) : kind_(net.kind()) {
    const auto& g = net.groups();
    if (kind_ == NetworkKind::SiameseSimilarity) {
      towers_.emplace_back(g[0].spec, g[0].params, 0);
    } else if (kind_ == NetworkKind::CentralSurroundSimilarity) {
      side_ = 2 * g[0].spec.input.height;
      towers_.emplace_back(g[0].spec, g[0].params, 0);  // central, left
      towers_.emplace_back(g[1].spec, g[1].params, 1);  // surround, left
      towers_.emplace_back(g[0].spec, g[0].params, 0);  // central, right
      towers_.emplace_back(g[1].spec, g[1].params, 1);  // surround, right
      towers_.emplace_back(g[2].spec, g[2].params, 2);  // fusion
    } else {
      throw UsageError("pair scorer needs a similarity network");
    }
  }

  /// left, right: N x 1 x H x W patch batches.
  Tensor<T> forward(const Tensor<T>& left, const Tensor<T>& right, Mode mode) {
    left.require_same_shape(right, "pair scorer");
    if (kind_ == NetworkKind::SiameseSimilarity) {
      return towers_[0].forward(detail::concat_channels<T>({&left, &right}), mode);
    }
    const auto l = central_surround_split(left, side_);
    const auto r = central_surround_split(right, side_);
    const Tensor<T> cl = towers_[0].forward(l.central, mode);
    const Tensor<T> sl = towers_[1].forward(l.surround, mode);
    const Tensor<T> cr = towers_[2].forward(r.central, mode);
    const Tensor<T> sr = towers_[3].forward(r.surround, mode);
    stream_channels_ = cl.dim(1);
    return towers_[4].forward(detail::concat_channels<T>({&cl, &sl, &cr, &sr}), mode);
  }

  void backward(const Tensor<T>& grad_scores, ParamSet<T>& grads) const {
    if (kind_ == NetworkKind::SiameseSimilarity) {
      towers_[0].backward(grad_scores, grads.at(0));
      return;
    }
    const Tensor<T> g = towers_[4].backward(grad_scores, grads.at(2), true);
    const auto parts = detail::split_channels(g, std::vector<std::size_t>(4, stream_channels_));
    for (std::size_t i = 0; i < 4; ++i) towers_[i].backward(parts[i], grads.at(towers_[i].group()));
  }

  std::vector<const Tower<T>*> towers() const {
    std::vector<const Tower<T>*> out;
    for (const auto& t : towers_) out.push_back(&t);
    return out;
  }

 private:
  NetworkKind kind_;
  std::vector<Tower<T>> towers_;
  std::size_t side_ = 0;
  std::size_t stream_channels_ = 0;
};

template <class T>
Tensor<T> Network<T>::embed(const Tensor<T>& batch, Mode mode) const {
  Embedder<T> e(*this);
  return e.forward(batch, mode);
}

template <class T>
Tensor<T> Network<T>::similarity(const Tensor<T>& left, const Tensor<T>& right,
                                 Mode mode) const {
  PairScorer<T> s(*this);
  return s.forward(left, right, mode);
}

/// Adds `src` into `dst` tensor by tensor.
template <class T>
void accumulate(ParamSet<T>& dst, const ParamSet<T>& src) {
  for (std::size_t g = 0; g < dst.size(); ++g) {
    for (std::size_t l = 0; l < dst[g].layers.size(); ++l) {
      auto& d = dst[g].layers[l];
      const auto& s = src[g].layers[l];
      d.weights += s.weights;
      d.biases += s.biases;
      if (d.has_bnorm()) {
        d.bn_gain += s.bn_gain;
        d.bn_bias += s.bn_bias;
      }
    }
  }
}

}  // namespace gloss

#endif  // GLOSS_MODEL_HPP
