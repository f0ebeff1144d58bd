#ifndef GLOSS_OPTIMIZER_HPP
#define GLOSS_OPTIMIZER_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <type_traits>
#include <vector>

#include "gloss/checkpoint.hpp"
#include "gloss/data.hpp"
#include "gloss/errors.hpp"
#include "gloss/losses.hpp"
#include "gloss/model.hpp"

namespace gloss {

struct TrainConfig {
  double lr_start = 0.01;
  double lr_end = 0.0001;
  double momentum = 0.9;
  double weight_decay = 0.0005;
  int epochs = 1;
  std::size_t batch_size = 250;
  std::uint64_t seed = 0;
  std::optional<std::string> init_from;  // warm-start checkpoint
  int init_epochs = 0;                   // triplet-loss epochs before the main loss
  int checkpoint_every = 0;              // 0 disables periodic checkpoints
  bool augment = true;

  void validate() const {
    if (!(lr_end > 0) || !(lr_end <= lr_start)) {
      throw ConfigError("train config: need 0 < lr_end <= lr_start");
    }
    if (!(momentum >= 0 && momentum < 1)) throw ConfigError("train config: need 0 <= momentum < 1");
    if (!(weight_decay >= 0)) throw ConfigError("train config: need weight_decay >= 0");
    if (epochs < 0 || init_epochs < 0 || checkpoint_every < 0) {
      throw ConfigError("train config: epochs, init_epochs and checkpoint_every must be >= 0");
    }
    if (batch_size == 0) throw ConfigError("train config: batch_size must be positive");
  }
};

/// Geometric interpolation from lr_start (first epoch) to lr_end (last epoch).
inline double lr_schedule(int epoch, const TrainConfig& cfg) {
  if (epoch < 0 || epoch >= std::max(cfg.epochs, 1)) {
    throw UsageError("lr_schedule: epoch " + std::to_string(epoch) + " outside [0, " +
                     std::to_string(cfg.epochs) + ")");
  }
  if (cfg.epochs <= 1) return cfg.lr_start;
  if (epoch == cfg.epochs - 1) return cfg.lr_end;
  const double frac = static_cast<double>(epoch) / static_cast<double>(cfg.epochs - 1);
  return cfg.lr_start * std::pow(cfg.lr_end / cfg.lr_start, frac);
}

/// Number of minibatches per epoch; a trailing partial batch is dropped.
inline std::size_t steps_per_epoch(std::size_t triplets, std::size_t batch_size) {
  if (batch_size == 0) throw ConfigError("batch_size must be positive");
  return triplets / batch_size;
}

/// Classical momentum SGD with L2 weight decay (not applied to batch-norm gain
/// and bias):  v <- momentum v - lr (g + wd p);  p <- p + v.
/// A non-finite gradient aborts before any parameter changes.
template <class T>
void sgd_step(ParamSet<T>& params, const ParamSet<T>& grads, ParamSet<T>& velocity, double lr,
              const TrainConfig& cfg, std::size_t step = 0, double loss = 0) {
  if (params.size() != grads.size() || params.size() != velocity.size()) {
    throw DimensionError("sgd_step: parameter, gradient and velocity sets differ in size");
  }
  std::vector<const Tensor<T>*> g_list, v_list;
  for_each_trainable(grads, [&](const std::string&, const Tensor<T>& t, bool) { g_list.push_back(&t); });
  std::vector<Tensor<T>*> vel;
  for_each_trainable(velocity, [&](const std::string&, Tensor<T>& t, bool) { vel.push_back(&t); });
  std::size_t k = 0;
  std::vector<std::pair<Tensor<T>*, bool>> p_list;
  std::vector<std::string> names;
  for_each_trainable(params, [&](const std::string& name, Tensor<T>& t, bool decays) {
    p_list.push_back({&t, decays});
    names.push_back(name);
  });
  if (g_list.size() != p_list.size() || vel.size() != p_list.size()) {
    throw DimensionError("sgd_step: parameter structures differ");
  }
  for (k = 0; k < p_list.size(); ++k) {
    p_list[k].first->require_same_shape(*g_list[k], "sgd_step " + names[k]);
    p_list[k].first->require_same_shape(*vel[k], "sgd_step " + names[k]);
    if (!g_list[k]->all_finite()) {
      std::ostringstream os;
      os << "non-finite gradient in " << names[k] << " at step " << step << " (loss " << loss << ")";
      throw NumericalError(os.str());
    }
  }
  const T mom = static_cast<T>(cfg.momentum);
  const T rate = static_cast<T>(lr);
  for (k = 0; k < p_list.size(); ++k) {
    Tensor<T>& p = *p_list[k].first;
    Tensor<T>& v = *vel[k];
    const Tensor<T>& g = *g_list[k];
    const T wd = p_list[k].second ? static_cast<T>(cfg.weight_decay) : T{0};
    for (std::size_t i = 0; i < p.size(); ++i) {
      v[i] = mom * v[i] - rate * (g[i] + wd * p[i]);
      p[i] += v[i];
    }
  }
}

/// Network-level overload: updates the parameter groups in place.
template <class T>
void sgd_step(Network<T>& net, const ParamSet<T>& grads, ParamSet<T>& velocity, double lr,
              const TrainConfig& cfg, std::size_t step = 0, double loss = 0) {
  ParamSet<T> params;
  params.reserve(net.groups().size());
  for (auto& g : net.groups()) params.push_back(std::move(g.params));
  try {
    sgd_step(params, grads, velocity, lr, cfg, step, loss);
  } catch (...) {
    for (std::size_t i = 0; i < params.size(); ++i) net.groups()[i].params = std::move(params[i]);
    throw;
  }
  for (std::size_t i = 0; i < params.size(); ++i) net.groups()[i].params = std::move(params[i]);
}

/// Rejects loss/network combinations that cannot be trained together.
inline void check_compatible(LossKind loss, NetworkKind net) {
  if (is_embedding_loss(loss) != is_embedding_network(net)) {
    throw ConfigError("loss '" + to_string(loss) + "' needs " +
                      (is_embedding_loss(loss) ? "an embedding" : "a similarity") +
                      " network, got '" + to_string(net) + "'");
  }
}

struct StepOptions {
  bool gradients = true;
  bool commit_stats = false;  // update batch-norm running statistics
  bool signature = false;     // fill StepResult::signature
};

template <class T>
struct StepResult {
  double loss = 0;
  BatchStats stats;
  ParamSet<T> grads;           // empty unless gradients were requested
  std::uint64_t signature = 0; // ReLU/pooling patterns and hinge states
};

namespace detail {

// Splits rows [0, n) and [n, 2n) of a stacked tensor.
template <class T>
std::pair<Tensor<T>, Tensor<T>> split_halves(const Tensor<T>& t) {
  const std::size_t n = t.dim(0) / 2;
  return {slice_batch(t, 0, n), slice_batch(t, n, n)};
}

inline std::vector<bool> half_labels(std::size_t n) {
  std::vector<bool> labels(2 * n, false);
  std::fill(labels.begin(), labels.begin() + static_cast<std::ptrdiff_t>(n), true);
  return labels;
}

}  // namespace detail

/// Loss and parameter gradients of one triplet batch in train mode. Pairwise
/// losses see the batch as the pairs (a, p) (matching) and (a, n)
/// (non-matching).
template <class T>
StepResult<T> loss_and_gradients(Network<T>& net, LossKind kind, const LossConfig& cfg,
                                  const TripletBatch<T>& b, const StepOptions& opts = {}) {
  check_compatible(kind, net.kind());
  StepResult<T> out;
  if (opts.gradients) out.grads = net.zero_grads();
  const std::size_t n = b.anchors.dim(0);
  std::vector<const Tower<T>*> towers;
  std::vector<bool> active;
  // reads the towers, so it runs before they go out of scope
  auto finish = [&] {
    if (opts.commit_stats) net.commit_running_stats(towers);
    if (opts.signature) {
      Fnv1a h;
      for (const auto* t : towers) h.add_u64(t->activation_signature());
      for (bool a : active) h.add_u64(a);
      out.signature = h.value();
    }
  };
  if (net.is_embedding()) {
    Embedder<T> ta(net), tp(net), tn(net);
    const Tensor<T> ea = ta.forward(b.anchors, Mode::Train);
    const Tensor<T> ep = tp.forward(b.positives, Mode::Train);
    const Tensor<T> en = tn.forward(b.negatives, Mode::Train);
    Tensor<T> ga, gp, gn;
    if (kind == LossKind::PairwiseEmbed) {
      auto r = pairwise_embedding_loss(concat_batch<T>({&ea, &ea}), concat_batch<T>({&ep, &en}),
                                       detail::half_labels(n));
      auto [gi1, gi2] = detail::split_halves(r.grads[0]);
      auto [gj1, gj2] = detail::split_halves(r.grads[1]);
      ga = std::move(gi1);
      ga += gi2;
      gp = std::move(gj1);
      gn = std::move(gj2);
      out.loss = r.value;
      out.stats = std::move(r.stats);
      active = std::move(r.active);
    } else {
      LossResult<T> r;
      switch (kind) {
        case LossKind::Triplet: r = triplet_loss(ea, ep, en, cfg); break;
        case LossKind::GlobalEmbed: r = global_embedding_loss(ea, ep, en, cfg); break;
        case LossKind::TripletGlobal: r = combined_loss(ea, ep, en, cfg); break;
        default: throw ConfigError("unsupported embedding loss");
      }
      ga = std::move(r.grads[0]);
      gp = std::move(r.grads[1]);
      gn = std::move(r.grads[2]);
      out.loss = r.value;
      out.stats = std::move(r.stats);
      active = std::move(r.active);
    }
    if (opts.gradients) {
      ta.backward(ga, out.grads);
      tp.backward(gp, out.grads);
      tn.backward(gn, out.grads);
    }
    for (const auto* e : {&ta, &tp, &tn}) {
      for (const auto* t : e->towers()) towers.push_back(t);
    }
    finish();
  } else {
    // One pass over matching and non-matching pairs together: scored
    // separately, batch norm could tell the two batches apart by their
    // statistics alone, a cue that does not exist at evaluation time.
    PairScorer<T> scorer(net);
    const Tensor<T> scores = scorer.forward(concat_batch<T>({&b.anchors, &b.anchors}),
                                            concat_batch<T>({&b.positives, &b.negatives}), Mode::Train);
    auto [g_plus, g_minus] = detail::split_halves(scores);
    Tensor<T> d_plus, d_minus;
    if (kind == LossKind::GlobalSim) {
      auto r = global_similarity_loss(g_plus, g_minus, cfg);
      d_plus = std::move(r.grads[0]);
      d_minus = std::move(r.grads[1]);
      out.loss = r.value;
      out.stats = std::move(r.stats);
      active = std::move(r.active);
    } else {
      auto r = pairwise_similarity_loss(scores, detail::half_labels(n), cfg);
      auto [h1, h2] = detail::split_halves(r.grads[0]);
      d_plus = std::move(h1);
      d_minus = std::move(h2);
      out.loss = r.value;
      out.stats = std::move(r.stats);
      active = std::move(r.active);
    }
    if (opts.gradients) scorer.backward(concat_batch<T>({&d_plus, &d_minus}), out.grads);
    towers = scorer.towers();
    finish();
  }
  if (!std::isfinite(out.loss)) {
    throw NumericalError("non-finite loss " + std::to_string(out.loss) + " (" + to_string(kind) + ")");
  }
  return out;
}

struct EpochRecord {
  int epoch = 0;
  double lr = 0;
  double mean_loss = 0;
  double mu_plus = 0, mu_minus = 0, var_plus = 0, var_minus = 0;
};

inline std::string trace_csv(const std::vector<EpochRecord>& trace) {
  std::ostringstream os;
  os << std::setprecision(17) << "epoch,mean_loss,mu_plus,mu_minus,var_plus,var_minus\n";
  for (const auto& r : trace) {
    os << r.epoch << ',' << r.mean_loss << ',' << r.mu_plus << ',' << r.mu_minus << ','
       << r.var_plus << ',' << r.var_minus << '\n';
  }
  return os.str();
}

template <class T>
using EpochCallback = std::function<void(const EpochRecord&, const Network<T>&)>;

/// Replaces the parameters and running statistics of `net` with those of a
/// checkpoint; kinds and architectures must agree.
template <class T>
void warm_start(Network<T>& net, const std::string& path) {
  Network<T> loaded = load_checkpoint<T>(path);
  if (loaded.kind() != net.kind() || loaded.groups().size() != net.groups().size()) {
    throw ConfigError("warm start: checkpoint " + path + " holds a " + to_string(loaded.kind()) +
                      " network, expected " + to_string(net.kind()));
  }
  for (std::size_t g = 0; g < net.groups().size(); ++g) {
    if (render(loaded.groups()[g].spec) != render(net.groups()[g].spec) ||
        loaded.groups()[g].spec.input != net.groups()[g].spec.input) {
      throw ConfigError("warm start: architecture of group '" + net.groups()[g].name +
                        "' differs from checkpoint " + path);
    }
  }
  net = std::move(loaded);
}

/// Minibatch SGD over a triplet dataset. Each epoch shuffles the triplets
/// (seeded) and runs floor(size / batch_size) steps; the learning rate is
/// constant within an epoch. Velocity starts at zero. Returns one record per
/// epoch; `on_epoch` sees the network after each epoch.
template <class T>
std::vector<EpochRecord> train(Network<T>& net, const TripletDataset<T>& data, LossKind kind,
                               const LossConfig& loss_cfg, const TrainConfig& cfg,
                               const std::type_identity_t<EpochCallback<T>>& on_epoch = {}) {
  cfg.validate();
  loss_cfg.validate();
  check_compatible(kind, net.kind());
  if (cfg.init_from) warm_start(net, *cfg.init_from);
  if (cfg.epochs == 0) return {};
  if (data.size() < cfg.batch_size) {
    throw UsageError("dataset of " + std::to_string(data.size()) +
                     " triplets is smaller than one batch of " + std::to_string(cfg.batch_size));
  }
  std::mt19937_64 rng(cfg.seed);
  ParamSet<T> velocity = net.zero_grads();
  std::vector<std::size_t> order(data.size());
  const std::size_t steps = steps_per_epoch(data.size(), cfg.batch_size);
  std::vector<EpochRecord> trace;
  std::size_t global_step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    for (std::size_t i = order.size(); i > 1; --i) {
      std::swap(order[i - 1], order[detail::uniform_index(rng, i)]);
    }
    const double lr = lr_schedule(epoch, cfg);
    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = lr;
    for (std::size_t s = 0; s < steps; ++s) {
      const std::span<const std::size_t> idx(order.data() + s * cfg.batch_size, cfg.batch_size);
      const TripletBatch<T> batch = data.batch(idx, rng);
      StepResult<T> r = loss_and_gradients(net, kind, loss_cfg, batch, {true, true, false});
      sgd_step(net, r.grads, velocity, lr, cfg, global_step, r.loss);
      rec.mean_loss += r.loss;
      rec.mu_plus += r.stats.mu_plus;
      rec.mu_minus += r.stats.mu_minus;
      rec.var_plus += r.stats.var_plus;
      rec.var_minus += r.stats.var_minus;
      ++global_step;
    }
    const double inv = 1.0 / static_cast<double>(steps);
    rec.mean_loss *= inv;
    rec.mu_plus *= inv;
    rec.mu_minus *= inv;
    rec.var_plus *= inv;
    rec.var_minus *= inv;
    trace.push_back(rec);
    if (on_epoch) on_epoch(rec, net);
  }
  return trace;
}

/// The two-phase schedule: with init_epochs > 0 (and no warm-start
/// checkpoint), the network is first trained with the triplet loss for
/// init_epochs, then with `kind` for cfg.epochs with fresh velocity and a
/// restarted learning-rate schedule. Trace epochs are numbered across both
/// phases.
template <class T>
std::vector<EpochRecord> train_with_init(Network<T>& net, const TripletDataset<T>& data,
                                         LossKind kind, const LossConfig& loss_cfg,
                                         const TrainConfig& cfg,
                                         const std::type_identity_t<EpochCallback<T>>& on_epoch = {}) {
  cfg.validate();
  if (cfg.init_epochs == 0 || cfg.init_from) return train(net, data, kind, loss_cfg, cfg, on_epoch);
  if (!is_embedding_network(net.kind())) {
    throw ConfigError("init_epochs pre-trains with the triplet loss and needs an embedding network");
  }
  TrainConfig first = cfg;
  first.epochs = cfg.init_epochs;
  LossConfig triplet_cfg = loss_cfg;
  auto trace = train(net, data, LossKind::Triplet, triplet_cfg, first, on_epoch);
  TrainConfig second = cfg;
  second.seed = cfg.seed + 1;
  EpochCallback<T> shifted;
  if (on_epoch) {
    shifted = [&](const EpochRecord& r, const Network<T>& n) {
      EpochRecord s = r;
      s.epoch += cfg.init_epochs;
      on_epoch(s, n);
    };
  }
  for (auto r : train(net, data, kind, loss_cfg, second, shifted)) {
    r.epoch += cfg.init_epochs;
    trace.push_back(r);
  }
  return trace;
}

}  // namespace gloss

#endif  // GLOSS_OPTIMIZER_HPP
