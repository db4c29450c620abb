#include <gtest/gtest.h>

#include "helpers.hpp"
#include "optenc/mimic.hpp"

using namespace optenc;
using namespace optenc::testing;

TEST(Mimic, SingleStateTarget) {
  PolicyTable t(1, 4);
  t.probs = {0.7, 0.1, 0.1, 0.1};
  auto fit = fit_actor_mimic(t, MimicConfig{});
  EXPECT_LT(total_variation(fit.policy.table().row(0), t.row(0)), 1e-3);
}

TEST(Mimic, RealizableTargetsRecovered) {
  Rng rng(1);
  PolicyTable t(20, 4);
  for (StateId s = 0; s < 20; ++s) {
    std::vector<double> z(4);
    for (auto& v : z) v = rng.uniform(-3, 3);
    softmax(z, t.row(s));
  }
  MimicConfig cfg;
  cfg.grad_tol = 1e-9;
  auto table = fit_actor_mimic(t, cfg).policy.table();
  for (StateId s = 0; s < 20; ++s) {
    EXPECT_EQ(argmax(table.row(s)), argmax(t.row(s)));
    for (Action a = 0; a < 4; ++a) EXPECT_NEAR(table.at(s, a), t.at(s, a), 1e-6);
  }
}

TEST(Mimic, UniformTargetsStayUniform) {
  auto fit = fit_actor_mimic(PolicyTable::uniform(5, 4), MimicConfig{});
  EXPECT_EQ(fit.policy.table(), PolicyTable::uniform(5, 4));
  EXPECT_EQ(fit.iterations, 0u);
}

TEST(Mimic, RandomTargetsConverge) {
  Rng rng(2);
  MimicConfig cfg;
  for (int c = 0; c < 200; ++c) {
    PolicyTable t(3, 4);
    for (StateId s = 0; s < 3; ++s) {
      auto p = random_distribution(rng, 4, 0.3);
      std::copy(p.begin(), p.end(), t.row(s).begin());
    }
    auto fit = fit_actor_mimic(t, cfg);
    ASSERT_LT(fit.grad_norm, cfg.grad_tol);
    ASSERT_LE(fit.worst_tv, cfg.fit_tol);
    ASSERT_TRUE(is_row_stochastic(fit.policy.table()));
  }
}

TEST(Mimic, NonConvergenceReportsWorstTv) {
  PolicyTable t(2, 4, 0.0);
  t.at(0, 0) = 1.0;
  t.at(1, 3) = 1.0;
  MimicConfig cfg;
  cfg.max_iters = 2;
  try {
    fit_actor_mimic(t, cfg);
    FAIL() << "expected MimicFitError";
  } catch (const MimicFitError& e) {
    EXPECT_GT(e.worst_tv(), cfg.fit_tol);
  }
  PolicyTable bad(1, 4, 0.5);
  EXPECT_THROW(fit_actor_mimic(bad, MimicConfig{}), std::invalid_argument);
}

TEST(Extract, SingleDistilledPolicy) {
  Rng rng(3);
  DistilledSet ds;
  ds.n_distilled = 1;
  ds.policies = {random_policy(rng, 6)};
  ds.defined.assign(6, true);
  auto fits = extract_distilled(ds, MimicConfig{});
  ASSERT_EQ(fits.size(), 1u);
  for (StateId s = 0; s < 6; ++s) EXPECT_LT(total_variation(fits[0].policy.table().row(s), ds.policies[0].row(s)), 1e-3);
}

TEST(Extract, TrainedEncoderGivesFiveFaithfulPolicies) {
  auto m = four_room();
  DiscoverConfig dc;
  dc.n_options = 10;
  auto d = collect_exhaustive_dataset(discover_options(m, EnvConfig{}, dc), m);
  TrainConfig tc;
  tc.max_iters = 300;
  auto tr = train(d, 5, tc);
  MimicConfig cfg;
  auto fits = extract_distilled(tr.distilled, cfg);
  ASSERT_EQ(fits.size(), 5u);
  for (std::size_t i = 0; i < 5; ++i) {
    auto table = fits[i].policy.table();
    double worst = 0.0;
    for (StateId s = 0; s < m.num_states(); ++s)
      worst = std::max(worst, total_variation(table.row(s), tr.distilled.policies[i].row(s)));
    EXPECT_LE(worst, cfg.fit_tol);
  }
}

TEST(Extract, UndefinedStatesGetUniformTargets) {
  Rng rng(4);
  DistilledSet ds;
  ds.n_distilled = 1;
  ds.policies = {one_hot_policy(3, 2)};
  ds.defined = {true, false, true};
  auto table = extract_distilled(ds, MimicConfig{})[0].policy.table();
  for (Action a = 0; a < 4; ++a) EXPECT_NEAR(table.at(1, a), 0.25, 1e-12);
  EXPECT_GT(table.at(0, 2), 0.99);
}

TEST(DistillToSingle, TwoOneHotExperts) {
  auto d = dataset_of({one_hot_policy(4, 0), one_hot_policy(4, 1)});
  auto table = distill_to_single(d, MimicConfig{}).policy.table();
  for (StateId s = 0; s < 4; ++s) {
    EXPECT_NEAR(table.at(s, 0), 0.5, 1e-3);
    EXPECT_NEAR(table.at(s, 1), 0.5, 1e-3);
    EXPECT_LT(table.at(s, 2), 1e-3);
  }
}

TEST(DistillToSingle, IdenticalExperts) {
  Rng rng(5);
  auto e = random_policy(rng, 5);
  auto table = distill_to_single(dataset_of({e, e, e}), MimicConfig{}).policy.table();
  for (StateId s = 0; s < 5; ++s) EXPECT_LT(total_variation(table.row(s), e.row(s)), 1e-3);
}

TEST(DistillToSingle, RolloutMultiplicityWeightsTheMean) {
  PolicyDataset d;
  d.n_states = 2;
  d.n_options = 1;
  d.mode = "rollout";
  auto a = options_from({one_hot_policy(2, 0)});
  d.append(0, a);
  d.append(0, a);
  auto mean = dataset_mean_policy(d);
  EXPECT_EQ(mean.at(0, 0), 1.0);
  EXPECT_EQ(mean.at(1, 0), 0.25);
}

TEST(Average, Examples) {
  Rng rng(6);
  auto opts = random_options(rng, 10, 7);
  EXPECT_EQ(average_policies(OptionSet{opts[3]}), opts[3].table);
  auto two = options_from({one_hot_policy(2, 0), one_hot_policy(2, 1)});
  auto avg = average_policies(two);
  EXPECT_EQ(avg.probs, (std::vector<double>{0.5, 0.5, 0, 0, 0.5, 0.5, 0, 0}));
  EXPECT_TRUE(is_row_stochastic(average_policies(opts), 1e-9));
  EXPECT_THROW(average_policies(OptionSet{}), std::invalid_argument);
}
