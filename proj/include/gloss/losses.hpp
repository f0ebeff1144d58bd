#ifndef GLOSS_LOSSES_HPP
#define GLOSS_LOSSES_HPP

// Pairwise, triplet and global (batch-statistics) losses with analytic
// gradients with respect to the network outputs.
//
// Distance conventions differ per loss and are kept as they are:
//   pairwise embedding, triplet: plain Euclidean distance |a - b|
//   global embedding:            d = |a - b|^2 / 4, in [0, 1] for unit vectors

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "gloss/errors.hpp"
#include "gloss/tensor.hpp"

namespace gloss {

enum class LossKind { PairwiseEmbed, PairwiseSim, Triplet, GlobalEmbed, GlobalSim, TripletGlobal };

inline std::string to_string(LossKind k) {
  switch (k) {
    case LossKind::PairwiseEmbed: return "pairwise-embed";
    case LossKind::PairwiseSim: return "pairwise-sim";
    case LossKind::Triplet: return "triplet";
    case LossKind::GlobalEmbed: return "global-embed";
    case LossKind::GlobalSim: return "global-sim";
    case LossKind::TripletGlobal: return "triplet+global";
  }
  return "?";
}

inline LossKind parse_loss_kind(const std::string& name) {
  for (auto k : {LossKind::PairwiseEmbed, LossKind::PairwiseSim, LossKind::Triplet,
                 LossKind::GlobalEmbed, LossKind::GlobalSim, LossKind::TripletGlobal}) {
    if (to_string(k) == name) return k;
  }
  throw ConfigError("unknown loss '" + name + "'");
}

/// True for losses defined on embeddings, false for similarity-score losses.
inline bool is_embedding_loss(LossKind k) {
  return k != LossKind::PairwiseSim && k != LossKind::GlobalSim;
}

struct LossConfig {
  double triplet_margin = 0.01;    // m of the triplet ratio loss
  double global_margin = 0.4;      // t, gap between distance means
  double similarity_margin = 1.0;  // m, gap between similarity means
  double lambda = 0.8;             // weight of the mean-gap hinge
  double gamma = 1.0;              // weight of the summed triplet terms
  double kappa = 0.01;             // keeps 1/(kappa + g) finite
  bool allow_singleton = false;    // global losses on a batch of one (variance 0)

  void validate() const {
    if (!(lambda >= 0) || !(gamma >= 0) || !(kappa > 0) || !(triplet_margin >= 0) ||
        !(global_margin >= 0) || !(similarity_margin >= 0)) {
      throw ConfigError("loss config: need lambda, gamma, margins >= 0 and kappa > 0");
    }
  }

  /// Hyperparameters used for each loss in the descriptor experiments.
  static LossConfig defaults_for(LossKind k) {
    LossConfig c;
    if (k == LossKind::GlobalSim || k == LossKind::PairwiseSim) c.lambda = 1.0;
    return c;
  }
};

/// Moments of the matching (plus) and non-matching (minus) distance or
/// similarity distributions of a batch.
struct BatchStats {
  double mu_plus = 0, mu_minus = 0, var_plus = 0, var_minus = 0;
  std::vector<double> plus, minus;
};

template <class T>
struct LossResult {
  double value = 0;
  std::vector<Tensor<T>> grads;  // one per input, in argument order
  BatchStats stats;
  std::vector<bool> active;  // state of each hinge, in evaluation order
};

namespace detail {

struct Moments {
  double mean = 0, var = 0;
};

// Shifted two-pass moments: equal inputs give their value back exactly.
inline Moments moments(const std::vector<double>& x) {
  Moments m;
  if (x.empty()) return m;
  const double n = static_cast<double>(x.size());
  double shift = 0;
  for (double v : x) shift += v - x[0];
  m.mean = x[0] + shift / n;
  for (double v : x) m.var += (v - m.mean) * (v - m.mean);
  m.var /= n;
  return m;
}

inline void fill_stats(BatchStats& s) {
  const auto p = moments(s.plus), m = moments(s.minus);
  s.mu_plus = p.mean;
  s.var_plus = p.var;
  s.mu_minus = m.mean;
  s.var_minus = m.var;
}

template <class T>
std::size_t embedding_rows(const Tensor<T>& e, const char* what) {
  if (e.rank() != 2) {
    throw DimensionError(std::string(what) + ": embeddings must be batch x dim, got " +
                         shape_str(e.shape()));
  }
  return e.dim(0);
}

template <class T>
void require_aligned(const Tensor<T>& a, const Tensor<T>& b, const char* what) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(what) + ": " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

template <class T>
double row_dist_sq(const Tensor<T>& a, const Tensor<T>& b, std::size_t i) {
  const std::size_t d = a.dim(1);
  double s = 0;
  for (std::size_t j = 0; j < d; ++j) {
    const double x = static_cast<double>(a[i * d + j]) - b[i * d + j];
    s += x * x;
  }
  return s;
}

// out[i] += scale * (a[i] - b[i])
template <class T>
void add_row_diff(Tensor<T>& out, const Tensor<T>& a, const Tensor<T>& b, std::size_t i,
                  double scale) {
  const std::size_t d = a.dim(1);
  for (std::size_t j = 0; j < d; ++j) {
    out[i * d + j] += static_cast<T>(scale * (static_cast<double>(a[i * d + j]) - b[i * d + j]));
  }
}

template <class T>
std::vector<double> scores_of(const Tensor<T>& g, const char* what) {
  if (g.rank() == 0 || g.size() != g.dim(0)) {
    throw DimensionError(std::string(what) + ": expected one score per item, got " +
                         shape_str(g.shape()));
  }
  return std::vector<double>(g.vec().begin(), g.vec().end());
}

}  // namespace detail

/// Contrastive-style loss without a hinge: +|eI - eJ| for matching pairs,
/// -|eI - eJ| otherwise, averaged over the batch.
template <class T>
LossResult<T> pairwise_embedding_loss(const Tensor<T>& e_i, const Tensor<T>& e_j,
                                      const std::vector<bool>& same_class) {
  detail::require_aligned(e_i, e_j, "pairwise_embedding_loss");
  const std::size_t n = detail::embedding_rows(e_i, "pairwise_embedding_loss");
  if (same_class.size() != n) {
    throw DimensionError("pairwise_embedding_loss: " + std::to_string(same_class.size()) +
                         " labels for " + std::to_string(n) + " pairs");
  }
  LossResult<T> r;
  r.grads = {Tensor<T>(e_i.shape()), Tensor<T>(e_j.shape())};
  for (std::size_t i = 0; i < n; ++i) {
    const double dist = std::sqrt(detail::row_dist_sq(e_i, e_j, i));
    const double sign = same_class[i] ? 1.0 : -1.0;
    r.value += sign * dist;
    (same_class[i] ? r.stats.plus : r.stats.minus).push_back(dist);
    if (dist > 0) {
      const double s = sign / (static_cast<double>(n) * dist);
      detail::add_row_diff(r.grads[0], e_i, e_j, i, s);
      detail::add_row_diff(r.grads[1], e_i, e_j, i, -s);
    }
  }
  r.value /= static_cast<double>(n);
  detail::fill_stats(r.stats);
  return r;
}

/// 1/(kappa + g) for matching pairs and g for non-matching pairs, averaged.
template <class T>
LossResult<T> pairwise_similarity_loss(const Tensor<T>& scores,
                                       const std::vector<bool>& same_class,
                                       const LossConfig& cfg) {
  cfg.validate();
  const auto g = detail::scores_of(scores, "pairwise_similarity_loss");
  const std::size_t n = g.size();
  if (same_class.size() != n) {
    throw DimensionError("pairwise_similarity_loss: label count mismatch");
  }
  LossResult<T> r;
  r.grads = {Tensor<T>(scores.shape())};
  for (std::size_t i = 0; i < n; ++i) {
    if (same_class[i]) {
      const double den = cfg.kappa + g[i];
      if (!(den > 0)) {
        throw DomainError("pairwise_similarity_loss: kappa + g = " + std::to_string(den) +
                          " <= 0 for matching pair " + std::to_string(i));
      }
      r.value += 1.0 / den;
      r.grads[0][i] = static_cast<T>(-1.0 / (den * den) / static_cast<double>(n));
      r.stats.plus.push_back(g[i]);
    } else {
      r.value += g[i];
      r.grads[0][i] = static_cast<T>(1.0 / static_cast<double>(n));
      r.stats.minus.push_back(g[i]);
    }
  }
  r.value /= static_cast<double>(n);
  detail::fill_stats(r.stats);
  return r;
}

namespace detail {

// Sum of max(0, 1 - |a-n| / (|a-p| + m)) over the batch; gradients scaled by
// `scale` are added to grads[0..2].
template <class T>
double triplet_terms(const Tensor<T>& a, const Tensor<T>& p, const Tensor<T>& n, double margin,
                     double scale, std::vector<Tensor<T>>& grads, std::vector<bool>& active) {
  const std::size_t rows = a.dim(0);
  double total = 0;
  for (std::size_t i = 0; i < rows; ++i) {
    const double dp = std::sqrt(row_dist_sq(a, p, i));
    const double dn = std::sqrt(row_dist_sq(a, n, i));
    const double den = dp + margin;
    const double value = 1.0 - dn / den;
    active.push_back(value > 0);
    if (!(value > 0)) continue;
    total += value;
    // d/d(dn) = -1/den, d/d(dp) = dn/den^2
    if (dp > 0) {
      const double c = scale * dn / (den * den) / dp;
      add_row_diff(grads[0], a, p, i, c);
      add_row_diff(grads[1], a, p, i, -c);
    }
    if (dn > 0) {
      const double c = -scale / den / dn;
      add_row_diff(grads[0], a, n, i, c);
      add_row_diff(grads[2], a, n, i, -c);
    }
  }
  return total;
}

template <class T>
void check_triplet_batch(const Tensor<T>& a, const Tensor<T>& p, const Tensor<T>& n,
                         const char* what) {
  embedding_rows(a, what);
  require_aligned(a, p, what);
  require_aligned(a, n, what);
}

template <class T>
void add_distance_stats(const Tensor<T>& a, const Tensor<T>& p, const Tensor<T>& n,
                        BatchStats& s) {
  for (std::size_t i = 0; i < a.dim(0); ++i) {
    s.plus.push_back(row_dist_sq(a, p, i) / 4.0);
    s.minus.push_back(row_dist_sq(a, n, i) / 4.0);
  }
  fill_stats(s);
}

}  // namespace detail

/// Ratio triplet loss max(0, 1 - |a-n| / (|a-p| + m)), averaged over the
/// batch. Reported stats are the global-loss distances |.|^2/4.
template <class T>
LossResult<T> triplet_loss(const Tensor<T>& a, const Tensor<T>& p, const Tensor<T>& n,
                           const LossConfig& cfg) {
  cfg.validate();
  detail::check_triplet_batch(a, p, n, "triplet_loss");
  if (!(cfg.triplet_margin > 0)) throw ConfigError("triplet_loss: margin must be positive");
  const double rows = static_cast<double>(a.dim(0));
  LossResult<T> r;
  r.grads = {Tensor<T>(a.shape()), Tensor<T>(a.shape()), Tensor<T>(a.shape())};
  r.value = detail::triplet_terms(a, p, n, cfg.triplet_margin, 1.0 / rows, r.grads, r.active) / rows;
  detail::add_distance_stats(a, p, n, r.stats);
  return r;
}

namespace detail {

template <class T>
double global_embedding_terms(const Tensor<T>& a, const Tensor<T>& p, const Tensor<T>& n,
                              const LossConfig& cfg, std::vector<Tensor<T>>& grads,
                              BatchStats& stats, std::vector<bool>& active_flags) {
  const std::size_t rows = a.dim(0);
  if (rows < 2 && !cfg.allow_singleton) {
    throw UsageError("global embedding loss needs a batch of at least 2 triplets");
  }
  add_distance_stats(a, p, n, stats);
  const double big_n = static_cast<double>(rows);
  const double gap = stats.mu_plus - stats.mu_minus + cfg.global_margin;
  const bool active = (stats.mu_minus - stats.mu_plus) < cfg.global_margin;
  active_flags.push_back(active);
  const double value =
      stats.var_plus + stats.var_minus + cfg.lambda * std::max(0.0, gap);
  const double h = active ? cfg.lambda : 0.0;
  const double k = 1.0 / (2.0 * big_n);
  for (std::size_t i = 0; i < rows; ++i) {
    const double cp = 2.0 * (stats.plus[i] - stats.mu_plus);
    const double cn = 2.0 * (stats.minus[i] - stats.mu_minus);
    // dJ/da = -k [cp (p - a) + cn (n - a) + h (p - n)]
    add_row_diff(grads[0], p, a, i, -k * cp);
    add_row_diff(grads[0], n, a, i, -k * cn);
    add_row_diff(grads[0], p, n, i, -k * h);
    // dJ/dp = -k [cp (a - p) + h (a - p)]
    add_row_diff(grads[1], a, p, i, -k * (cp + h));
    // dJ/dn = -k [cn (a - n) + h (n - a)]
    add_row_diff(grads[2], a, n, i, -k * (cn - h));
  }
  return value;
}

}  // namespace detail

/// (var+ + var-) + lambda * max(0, mu+ - mu- + t) over d = |a - b|^2 / 4.
template <class T>
LossResult<T> global_embedding_loss(const Tensor<T>& a, const Tensor<T>& p, const Tensor<T>& n,
                                    const LossConfig& cfg) {
  cfg.validate();
  detail::check_triplet_batch(a, p, n, "global_embedding_loss");
  LossResult<T> r;
  r.grads = {Tensor<T>(a.shape()), Tensor<T>(a.shape()), Tensor<T>(a.shape())};
  r.value = detail::global_embedding_terms(a, p, n, cfg, r.grads, r.stats, r.active);
  return r;
}

/// (var+ + var-) + lambda * max(0, m - (mu+ - mu-)) over similarity scores of
/// matching (g_plus) and non-matching (g_minus) pairs.
template <class T>
LossResult<T> global_similarity_loss(const Tensor<T>& g_plus, const Tensor<T>& g_minus,
                                     const LossConfig& cfg) {
  cfg.validate();
  detail::require_aligned(g_plus, g_minus, "global_similarity_loss");
  LossResult<T> r;
  r.stats.plus = detail::scores_of(g_plus, "global_similarity_loss");
  r.stats.minus = detail::scores_of(g_minus, "global_similarity_loss");
  const std::size_t rows = r.stats.plus.size();
  if (rows < 2 && !cfg.allow_singleton) {
    throw UsageError("global similarity loss needs a batch of at least 2 pairs per class");
  }
  detail::fill_stats(r.stats);
  const auto& s = r.stats;
  const double spread = s.mu_plus - s.mu_minus;
  r.value = s.var_plus + s.var_minus + cfg.lambda * std::max(0.0, cfg.similarity_margin - spread);
  r.active.push_back(spread < cfg.similarity_margin);
  const double half = r.active.back() ? cfg.lambda / 2.0 : 0.0;
  const double k = 2.0 / static_cast<double>(rows);
  r.grads = {Tensor<T>(g_plus.shape()), Tensor<T>(g_minus.shape())};
  for (std::size_t i = 0; i < rows; ++i) {
    r.grads[0][i] = static_cast<T>(k * ((s.plus[i] - s.mu_plus) - half));
    r.grads[1][i] = static_cast<T>(k * ((s.minus[i] - s.mu_minus) + half));
  }
  return r;
}

/// gamma * (sum of per-triplet ratio losses) + global embedding loss.
template <class T>
LossResult<T> combined_loss(const Tensor<T>& a, const Tensor<T>& p, const Tensor<T>& n,
                            const LossConfig& cfg) {
  cfg.validate();
  detail::check_triplet_batch(a, p, n, "combined_loss");
  if (!(cfg.triplet_margin > 0)) throw ConfigError("combined_loss: margin must be positive");
  LossResult<T> r;
  r.grads = {Tensor<T>(a.shape()), Tensor<T>(a.shape()), Tensor<T>(a.shape())};
  const double triplet_sum = detail::triplet_terms(a, p, n, cfg.triplet_margin, cfg.gamma, r.grads,
                                                     r.active);
  r.value = cfg.gamma * triplet_sum + detail::global_embedding_terms(a, p, n, cfg, r.grads, r.stats, r.active);
  return r;
}

}  // namespace gloss

#endif  // GLOSS_LOSSES_HPP
