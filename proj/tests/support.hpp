#ifndef GLOSS_TESTS_SUPPORT_HPP
#define GLOSS_TESTS_SUPPORT_HPP

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "gloss/tensor.hpp"

namespace testing_support {

inline gloss::Tensor<double> random_tensor(const gloss::Shape& shape, std::mt19937_64& rng,
                                           double lo = -1.0, double hi = 1.0) {
  gloss::Tensor<double> t(shape);
  std::uniform_real_distribution<double> u(lo, hi);
  for (auto& v : t.values()) v = u(rng);
  return t;
}

inline double max_abs_diff(const gloss::Tensor<double>& a, const gloss::Tensor<double>& b) {
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

/// Fresh empty directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  const auto p = std::filesystem::temp_directory_path() / ("gloss_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

inline std::string slurp(const std::filesystem::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

}  // namespace testing_support

#endif  // GLOSS_TESTS_SUPPORT_HPP
