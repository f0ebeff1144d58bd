#ifndef GLOSS_EVAL_HPP
#define GLOSS_EVAL_HPP

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <functional>
#include <iomanip>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "gloss/data.hpp"
#include "gloss/errors.hpp"
#include "gloss/model.hpp"
#include "gloss/tensor.hpp"

namespace gloss {

enum class Orientation { HigherIsSimilar, LowerIsSimilar };

struct ScoredPairs {
  std::vector<double> scores;
  std::vector<bool> labels;  // true for matching pairs
  Orientation orientation = Orientation::HigherIsSimilar;
};

struct RocPoint {
  double fpr = 0, tpr = 0;
};

struct EvalReport {
  std::vector<RocPoint> roc;  // one point per distinct score, loosest last
  double fpr95 = 0;
  double threshold95 = 0;  // in the original score units
};

/// Sweeps every distinct score as a threshold (pairs at least as similar as
/// the threshold are accepted) and reads off the false positive rate at 95%
/// recall, interpolating linearly between the last sweep point below 95%
/// recall and the first at or above it.
inline EvalReport roc_and_fpr95(const ScoredPairs& sp) {
  const std::size_t n = sp.scores.size();
  if (sp.labels.size() != n) throw DimensionError("roc_and_fpr95: score/label count mismatch");
  const auto positives = static_cast<std::size_t>(std::count(sp.labels.begin(), sp.labels.end(), true));
  const std::size_t negatives = n - positives;
  if (positives == 0 || negatives == 0) {
    throw UsageError("roc_and_fpr95: need both matching and non-matching pairs");
  }
  const double sign = sp.orientation == Orientation::HigherIsSimilar ? 1.0 : -1.0;
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) {
    order[i] = i;
    if (!std::isfinite(sp.scores[i])) throw NumericalError("roc_and_fpr95: non-finite score");
  }
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return sign * sp.scores[a] > sign * sp.scores[b];
  });
  EvalReport rep;
  std::vector<double> thresholds;
  std::size_t tp = 0, fp = 0;
  for (std::size_t k = 0; k < n;) {
    const double s = sign * sp.scores[order[k]];
    while (k < n && sign * sp.scores[order[k]] == s) {
      (sp.labels[order[k]] ? tp : fp) += 1;
      ++k;
    }
    rep.roc.push_back({static_cast<double>(fp) / static_cast<double>(negatives),
                       static_cast<double>(tp) / static_cast<double>(positives)});
    thresholds.push_back(s);
  }
  std::size_t k = 0;
  while (rep.roc[k].tpr < 0.95) ++k;  // the last point has tpr 1
  double thr = thresholds[k];
  if (k == 0) {
    rep.fpr95 = rep.roc[0].fpr;
  } else {
    const RocPoint& lo = rep.roc[k - 1];
    const RocPoint& hi = rep.roc[k];
    const double f = (0.95 - lo.tpr) / (hi.tpr - lo.tpr);
    rep.fpr95 = lo.fpr + f * (hi.fpr - lo.fpr);
    thr = thresholds[k - 1] + f * (thresholds[k] - thresholds[k - 1]);
  }
  rep.threshold95 = sign * thr;
  return rep;
}

inline nlohmann::json report_to_json(const EvalReport& r) {
  nlohmann::json j;
  j["fpr95"] = r.fpr95;
  j["threshold95"] = r.threshold95;
  auto& roc = j["roc"] = nlohmann::json::array();
  for (const auto& p : r.roc) roc.push_back({p.fpr, p.tpr});
  return j;
}

inline std::string roc_csv(const EvalReport& r) {
  std::ostringstream os;
  os << std::setprecision(17) << "fpr,tpr\n";
  for (const auto& p : r.roc) os << p.fpr << ',' << p.tpr << '\n';
  return os.str();
}

// ---------------------------------------------------------------------------
// Pair scoring

/// Negative Euclidean distance between the flattened patches of each pair.
template <class T>
ScoredPairs raw_pixel_baseline(const PairBatch<T>& pairs) {
  pairs.left.require_same_shape(pairs.right, "raw_pixel_baseline");
  ScoredPairs sp;
  sp.labels = pairs.labels;
  const std::size_t n = pairs.size();
  const std::size_t d = pairs.left.size() / n;
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0;
    for (std::size_t j = 0; j < d; ++j) {
      const double diff = static_cast<double>(pairs.left[i * d + j]) - static_cast<double>(pairs.right[i * d + j]);
      s += diff * diff;
    }
    sp.scores.push_back(-std::sqrt(s));
  }
  return sp;
}

/// Squared Euclidean distance between embeddings of rows i of `a` and `b`.
template <class T>
std::vector<double> squared_distances(const Tensor<T>& a, const Tensor<T>& b) {
  a.require_same_shape(b, "squared_distances");
  const std::size_t n = a.dim(0), d = a.size() / n;
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0;
    for (std::size_t j = 0; j < d; ++j) {
      const double diff = static_cast<double>(a[i * d + j]) - static_cast<double>(b[i * d + j]);
      s += diff * diff;
    }
    out[i] = s;
  }
  return out;
}

/// Scores pairs with a trained network in eval mode, `chunk` pairs at a time:
/// squared embedding distance (lower is similar) for embedding networks, the
/// similarity head (higher is similar) otherwise.
template <class T>
ScoredPairs score_pairs(const Network<T>& net, const PairBatch<T>& pairs, std::size_t chunk = 250) {
  ScoredPairs sp;
  sp.labels = pairs.labels;
  sp.orientation = net.is_embedding() ? Orientation::LowerIsSimilar : Orientation::HigherIsSimilar;
  const std::size_t n = pairs.size();
  for (std::size_t b = 0; b < n; b += chunk) {
    const std::size_t count = std::min(chunk, n - b);
    const Tensor<T> l = slice_batch(pairs.left, b, count);
    const Tensor<T> r = slice_batch(pairs.right, b, count);
    if (net.is_embedding()) {
      for (double d : squared_distances(net.embed(l, Mode::Eval), net.embed(r, Mode::Eval))) {
        sp.scores.push_back(d);
      }
    } else {
      const Tensor<T> s = net.similarity(l, r, Mode::Eval);
      for (std::size_t i = 0; i < count; ++i) sp.scores.push_back(static_cast<double>(s[i]));
    }
  }
  return sp;
}

// ---------------------------------------------------------------------------
// Label maps

struct GridSpec {
  double x_min = -1, x_max = 1, y_min = -1, y_max = 1;
  std::size_t nx = 200, ny = 200;

  std::array<double, 2> point(std::size_t ix, std::size_t iy) const {
    const double fx = nx > 1 ? static_cast<double>(ix) / static_cast<double>(nx - 1) : 0.5;
    const double fy = ny > 1 ? static_cast<double>(iy) / static_cast<double>(ny - 1) : 0.5;
    return {x_min + fx * (x_max - x_min), y_min + fy * (y_max - y_min)};
  }

  /// All grid points, x fastest.
  std::vector<std::array<double, 2>> points() const {
    std::vector<std::array<double, 2>> out;
    out.reserve(nx * ny);
    for (std::size_t iy = 0; iy < ny; ++iy) {
      for (std::size_t ix = 0; ix < nx; ++ix) out.push_back(point(ix, iy));
    }
    return out;
  }
};

/// Bounding box of `points` widened by `margin` of its extent on every side.
inline GridSpec grid_around(const std::vector<std::array<double, 2>>& points, double margin = 0.2,
                            std::size_t nx = 200, std::size_t ny = 200) {
  if (points.empty()) throw UsageError("grid_around: no points");
  GridSpec g;
  g.x_min = g.x_max = points[0][0];
  g.y_min = g.y_max = points[0][1];
  for (const auto& p : points) {
    g.x_min = std::min(g.x_min, p[0]);
    g.x_max = std::max(g.x_max, p[0]);
    g.y_min = std::min(g.y_min, p[1]);
    g.y_max = std::max(g.y_max, p[1]);
  }
  const double wx = g.x_max - g.x_min, wy = g.y_max - g.y_min;
  g.x_min -= margin * wx;
  g.x_max += margin * wx;
  g.y_min -= margin * wy;
  g.y_max += margin * wy;
  g.nx = nx;
  g.ny = ny;
  return g;
}

struct LabelMap {
  GridSpec grid;
  std::vector<int> labels;  // row-major, x fastest
};

/// Index of the row of `train` nearest (Euclidean) to row `i` of `query`;
/// ties go to the lowest index.
template <class T>
std::size_t nearest_row(const Tensor<T>& train, const Tensor<T>& query, std::size_t i) {
  const std::size_t n = train.dim(0), d = train.size() / n;
  if (query.size() / query.dim(0) != d) throw DimensionError("nearest_row: dimension mismatch");
  std::size_t best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < n; ++k) {
    double s = 0;
    for (std::size_t j = 0; j < d; ++j) {
      const double diff = static_cast<double>(train[k * d + j]) - static_cast<double>(query[i * d + j]);
      s += diff * diff;
    }
    if (s < best_d) {
      best_d = s;
      best = k;
    }
  }
  return best;
}

/// Labels each grid point by its nearest training point in embedding space.
/// `embed` maps a list of 2-D points to an M x D (or M x D x 1 x 1) tensor.
template <class T, class EmbedFn>
LabelMap nn_label_map(const Tensor<T>& train_embeddings, const std::vector<int>& train_labels,
                      const GridSpec& grid, EmbedFn&& embed) {
  if (train_labels.empty() || train_embeddings.empty()) {
    throw UsageError("nn_label_map: empty training set");
  }
  if (train_embeddings.dim(0) != train_labels.size()) {
    throw DimensionError("nn_label_map: embedding/label count mismatch");
  }
  LabelMap map{grid, {}};
  const auto pts = grid.points();
  const Tensor<T> emb = embed(pts);
  if (emb.rank() == 0 || emb.dim(0) != pts.size()) {
    throw DimensionError("nn_label_map: embedding returned " + shape_str(emb.shape()) + " for " +
                         std::to_string(pts.size()) + " grid points");
  }
  map.labels.reserve(pts.size());
  for (std::size_t i = 0; i < pts.size(); ++i) {
    map.labels.push_back(train_labels[nearest_row(train_embeddings, emb, i)]);
  }
  return map;
}

inline std::string label_map_csv(const LabelMap& m) {
  std::ostringstream os;
  os << std::setprecision(17) << "x,y,label\n";
  const auto pts = m.grid.points();
  for (std::size_t i = 0; i < pts.size(); ++i) {
    os << pts[i][0] << ',' << pts[i][1] << ',' << m.labels[i] << '\n';
  }
  return os.str();
}

/// Label of the Bayes-optimal classifier for the uncorrupted toy Gaussians
/// (equal priors and isotropic covariance: the nearer mean wins).
inline int bayes_label(const std::array<double, 2>& p, const ToyOptions& opts) {
  const double d0 = std::hypot(p[0] - opts.mean0[0], p[1] - opts.mean0[1]);
  const double d1 = std::hypot(p[0] - opts.mean1[0], p[1] - opts.mean1[1]);
  return d1 < d0 ? 1 : 0;
}

/// Fraction of grid points whose label agrees with the Bayes boundary.
inline double clean_accuracy(const LabelMap& m, const ToyOptions& opts) {
  const auto pts = m.grid.points();
  std::size_t agree = 0;
  for (std::size_t i = 0; i < pts.size(); ++i) agree += m.labels[i] == bayes_label(pts[i], opts);
  return static_cast<double>(agree) / static_cast<double>(pts.size());
}

// ---------------------------------------------------------------------------
// Finite differences

struct GradCheckResult {
  double max_rel_error = 0;
  std::size_t worst = 0;     // coordinate with the largest error
  std::size_t checked = 0;   // coordinates compared
  bool boundary_hit = false; // a perturbation crossed a kink; the result is void
};

/// Relative error used by every check: |a - n| / max(1e-8, |n|).
inline double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max(1e-8, std::abs(numeric));
}

/// Roundoff level of a central difference whose endpoint values are `up`
/// and `down`: derivatives below it cannot be told apart from zero.
inline double difference_noise_floor(double up, double down, double step) {
  return 64.0 * std::numeric_limits<double>::epsilon() *
         std::max({1.0, std::abs(up), std::abs(down)}) / step;
}

/// Central differences of `f` at `point`, compared with `analytic`, over
/// `coords` (all coordinates when empty). A coordinate where both derivatives
/// are below the difference noise floor counts as agreeing. When `regime` is
/// given, it is evaluated at each perturbed point; a change from its value at
/// `point` flags a kink crossing and stops the check with boundary_hit set.
inline GradCheckResult gradient_check(
    const std::function<double(const std::vector<double>&)>& f, const std::vector<double>& point,
    const std::vector<double>& analytic, double step = 1e-5,
    const std::vector<std::size_t>& coords = {},
    const std::function<std::uint64_t(const std::vector<double>&)>& regime = {}) {
  if (analytic.size() != point.size()) {
    throw DimensionError("gradient_check: gradient has " + std::to_string(analytic.size()) +
                         " entries for " + std::to_string(point.size()) + " coordinates");
  }
  GradCheckResult res;
  const std::uint64_t base = regime ? regime(point) : 0;
  std::vector<double> x = point;
  auto visit = [&](std::size_t i) {
    if (i >= x.size()) throw DimensionError("gradient_check: coordinate out of range");
    const double orig = x[i];
    x[i] = orig + step;
    const double up = f(x);
    const bool up_ok = !regime || regime(x) == base;
    x[i] = orig - step;
    const double down = f(x);
    const bool down_ok = !regime || regime(x) == base;
    x[i] = orig;
    if (!std::isfinite(up) || !std::isfinite(down) || !std::isfinite(analytic[i])) {
      throw NumericalError("gradient_check: non-finite value at coordinate " + std::to_string(i));
    }
    if (!up_ok || !down_ok) {
      res.boundary_hit = true;
      return false;
    }
    const double numeric = (up - down) / (2 * step);
    const double floor = difference_noise_floor(up, down, step);
    const double err = std::abs(analytic[i]) <= floor && std::abs(numeric) <= floor
                           ? 0.0
                           : relative_error(analytic[i], numeric);
    if (res.checked == 0 || err > res.max_rel_error) {
      res.max_rel_error = err;
      res.worst = i;
    }
    ++res.checked;
    return true;
  };
  if (coords.empty()) {
    for (std::size_t i = 0; i < x.size(); ++i) {
      if (!visit(i)) break;
    }
  } else {
    for (auto i : coords) {
      if (!visit(i)) break;
    }
  }
  return res;
}

}  // namespace gloss

#endif  // GLOSS_EVAL_HPP
