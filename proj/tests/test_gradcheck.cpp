#include <gtest/gtest.h>

#include "gloss/gradcheck.hpp"

using namespace gloss;

namespace {

SuiteOptions quick(const std::string& filter) {
  SuiteOptions o;
  o.filter = filter;
  o.loss_points = 5;
  o.layer_shapes = 3;
  o.network_points = 1;
  o.coords_per_tensor = 4;
  return o;
}

}  // namespace

TEST(GradcheckSuite, NamesCoverEveryLossLayerAndNetwork) {
  const auto names = gradcheck_names();
  EXPECT_EQ(names.size(), 19u);
  for (const char* n : {"loss/triplet", "loss/global-sim", "layer/batchnorm", "network/toy+triplet+global",
                        "network/central-surround+global-sim"}) {
    EXPECT_NE(std::find(names.begin(), names.end(), n), names.end()) << n;
  }
}

TEST(GradcheckSuite, QuickLossesAndLayersPass) {
  for (const char* group : {"loss/", "layer/"}) {
    const auto rep = run_gradcheck_suite(quick(group));
    EXPECT_TRUE(rep.passed()) << suite_to_json(rep).dump(2);
  }
}

TEST(GradcheckSuite, QuickToyNetworkPasses) {
  const auto rep = run_gradcheck_suite(quick("network/toy+triplet"));
  ASSERT_EQ(rep.checks.size(), 2u);
  EXPECT_TRUE(rep.passed()) << suite_to_json(rep).dump(2);
}

TEST(GradcheckSuite, CorruptedGradientIsCaught) {
  auto o = quick("layer/relu");
  o.corrupt = "relu";
  const auto rep = run_gradcheck_suite(o);
  ASSERT_EQ(rep.checks.size(), 1u);
  EXPECT_FALSE(rep.passed());
  EXPECT_GT(rep.checks[0].max_rel_error, rep.checks[0].tolerance);
}

TEST(GradcheckSuite, FilterDoesNotChangeResults) {
  const auto alone = run_gradcheck_suite(quick("loss/triplet"));
  const auto with_more = run_gradcheck_suite(quick("loss/"));
  ASSERT_EQ(alone.checks.size(), 2u);  // triplet and triplet+global
  for (const auto& c : alone.checks) {
    const auto it = std::find_if(with_more.checks.begin(), with_more.checks.end(),
                                 [&](const auto& m) { return m.name == c.name; });
    ASSERT_NE(it, with_more.checks.end());
    EXPECT_EQ(it->max_rel_error, c.max_rel_error);
  }
}

TEST(GradcheckSuite, EmptySelection) {
  const auto rep = run_gradcheck_suite(quick("no-such-check"));
  EXPECT_TRUE(rep.checks.empty());
  EXPECT_EQ(suite_to_json(rep).at("count"), 0);
}
