#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "helpers.hpp"
#include "optenc/encoder.hpp"
#include "optenc/mimic.hpp"

using namespace optenc;
using namespace optenc::testing;

namespace {

EncoderParams random_params(Rng& rng, std::size_t S, std::size_t M, std::size_t N, TableMode enc, TableMode dec,
                            bool normalized = true, bool shared = true, double scale = 2.0) {
  auto p = EncoderParams::zeros(S, M, N, kNumActions, enc, dec, normalized, shared);
  for (auto& v : p.encoder_logits) v = rng.uniform(-scale, scale);
  for (auto& v : p.decoder_logits) v = rng.uniform(-scale, scale);
  return p;
}

/// Loss recomputed from encode/reconstruct only, with its own divergence.
double reference_loss(const EncoderParams& p, const PolicyDataset& d, const TrainConfig& cfg) {
  const std::size_t A = d.n_actions;
  double total = 0.0;
  for (std::size_t r = 0; r < d.rows(); ++r) {
    auto hat = reconstruct(p, d.states[r], encode(p, d.states[r], d.row_block(r)));
    for (std::size_t j = 0; j < d.n_options; ++j) {
      auto e = d.expert(r, j);
      double l = 0.0;
      if (cfg.loss == LossKind::Huber) {
        for (Action a = 0; a < A; ++a) {
          double x = std::abs(hat[j * A + a] - e[a]);
          l += x <= cfg.huber_delta ? 0.5 * x * x : cfg.huber_delta * (x - 0.5 * cfg.huber_delta);
        }
      } else {
        const double eps = cfg.epsilon_smooth, z = 1.0 + A * eps;
        for (Action a = 0; a < A; ++a) {
          double ps = (e[a] + eps) / z, qs = (hat[j * A + a] + eps) / z;
          l += cfg.kl_direction == KLDirection::Forward ? ps * std::log(ps / qs) : qs * std::log(qs / ps);
        }
      }
      total += d.weight(r) * l;
    }
  }
  return total;
}

double max_fd_error(EncoderParams p, const PolicyDataset& d, const TrainConfig& cfg, Rng& rng, int coords = 100) {
  auto g = gradient(p, d, cfg);
  const double h = 1e-5;
  double worst = 0.0;
  const std::size_t ne = p.encoder_logits.size(), nd = p.decoder_logits.size();
  for (int c = 0; c < coords; ++c) {
    std::size_t k = rng.index(ne + nd);
    double& x = k < ne ? p.encoder_logits[k] : p.decoder_logits[k - ne];
    double analytic = k < ne ? g.encoder[k] : g.decoder[k - ne];
    double x0 = x;
    x = x0 + h;
    double up = loss(p, d, cfg);
    x = x0 - h;
    double dn = loss(p, d, cfg);
    x = x0;
    double fd = (up - dn) / (2 * h);
    worst = std::max(worst, std::abs(fd - analytic) / std::max(1e-6, std::abs(fd) + std::abs(analytic)));
  }
  return worst;
}

PolicyDataset planted(Rng& rng, std::size_t S, std::size_t N, std::vector<PolicyTable>* basis = nullptr) {
  auto p1 = random_policy(rng, S), p2 = random_policy(rng, S);
  std::vector<PolicyTable> experts;
  for (std::size_t j = 0; j < N; ++j) {
    double c = static_cast<double>(j) / static_cast<double>(N - 1);
    PolicyTable t(S, kNumActions);
    for (std::size_t k = 0; k < t.probs.size(); ++k) t.probs[k] = c * p1.probs[k] + (1 - c) * p2.probs[k];
    experts.push_back(t);
  }
  if (basis) *basis = {p1, p2};
  return dataset_of(experts);
}

}  // namespace

TEST(Encode, IdentityAttentionReproducesExperts) {
  Rng rng(0);
  auto d = dataset_of({random_policy(rng, 3), random_policy(rng, 3), random_policy(rng, 3)});
  auto p = EncoderParams::zeros(3, 3, 3, 4, TableMode::Global, TableMode::Global);
  for (std::size_t i = 0; i < 3; ++i) p.encoder_logits[p.slot(i, i, 0)] = 40.0;
  for (std::size_t r = 0; r < d.rows(); ++r) {
    auto out = encode(p, d.states[r], d.row_block(r));
    for (std::size_t k = 0; k < out.size(); ++k) EXPECT_NEAR(out[k], d.row_block(r)[k], 1e-12);
  }
}

TEST(Encode, UniformMixtureOfOneHots) {
  auto d = dataset_of({one_hot_policy(1, 0), one_hot_policy(1, 1)});
  auto p = EncoderParams::zeros(1, 1, 2, 4, TableMode::Global, TableMode::Global);
  auto out = encode(p, 0, d.row_block(0));
  EXPECT_EQ(out, (std::vector<double>{0.5, 0.5, 0.0, 0.0}));
}

TEST(Encode, OutputsAreDistributionsForRandomLogits) {
  Rng rng(1);
  for (int c = 0; c < 300; ++c) {
    std::size_t S = 1 + rng.index(4), N = 1 + rng.index(6), M = 1 + rng.index(5);
    std::vector<PolicyTable> experts;
    for (std::size_t j = 0; j < N; ++j) experts.push_back(random_policy(rng, S));
    auto d = dataset_of(experts);
    auto mode = [&] { return rng.index(2) ? TableMode::PerState : TableMode::Global; };
    auto p = random_params(rng, S, M, N, mode(), mode(), true, true, 30.0);
    for (std::size_t r = 0; r < d.rows(); ++r) {
      auto dist = encode(p, d.states[r], d.row_block(r));
      auto hat = reconstruct(p, d.states[r], dist);
      for (std::size_t i = 0; i < M; ++i) ASSERT_TRUE(is_distribution({dist.data() + i * 4, 4}, 1e-9));
      for (std::size_t j = 0; j < N; ++j) ASSERT_TRUE(is_distribution({hat.data() + j * 4, 4}, 1e-9));
      auto ew = encoder_weights(p, d.states[r]);
      auto dw = decoder_weights(p, d.states[r]);
      for (std::size_t i = 0; i < M; ++i) ASSERT_TRUE(is_distribution({ew.data() + i * N, N}, 1e-9));
      for (std::size_t j = 0; j < N; ++j) {
        double col = 0.0;
        for (std::size_t i = 0; i < M; ++i) col += dw[i * N + j];
        ASSERT_NEAR(col, 1.0, 1e-9);
      }
    }
  }
}

TEST(Encode, ShapeMismatchRejected) {
  auto p = EncoderParams::zeros(2, 2, 3, 4, TableMode::Global, TableMode::Global);
  std::vector<double> wrong(8, 0.25);
  EXPECT_THROW(encode(p, 0, wrong), std::invalid_argument);
  std::vector<double> wrong_d(12, 0.25);
  EXPECT_THROW(reconstruct(p, 0, wrong_d), std::invalid_argument);
}

TEST(Reconstruct, SingleDistilledPolicyIsCopied) {
  Rng rng(2);
  auto p = random_params(rng, 4, 1, 5, TableMode::Global, TableMode::PerState);
  auto dist = random_distribution(rng, 4);
  auto hat = reconstruct(p, 2, dist);
  for (std::size_t j = 0; j < 5; ++j)
    for (Action a = 0; a < 4; ++a) EXPECT_NEAR(hat[j * 4 + a], dist[a], 1e-15);
}

TEST(Reconstruct, OneHotDecoderSelectsDistilledRow) {
  auto p = EncoderParams::zeros(1, 3, 2, 4, TableMode::Global, TableMode::Global);
  p.decoder_logits[p.slot(2, 0, 0)] = 50.0;
  p.decoder_logits[p.slot(1, 1, 0)] = 50.0;
  std::vector<double> dist{1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 0};
  auto hat = reconstruct(p, 0, dist);
  EXPECT_NEAR(hat[2], 1.0, 1e-12);
  EXPECT_NEAR(hat[4 + 1], 1.0, 1e-12);
}

TEST(Reconstruct, LiesInConvexHullOfDistilledRows) {
  Rng rng(3);
  for (int c = 0; c < 200; ++c) {
    std::size_t M = 1 + rng.index(4), N = 1 + rng.index(5);
    auto p = random_params(rng, 2, M, N, TableMode::Global, TableMode::PerState);
    std::vector<double> dist;
    for (std::size_t i = 0; i < M; ++i) {
      auto q = random_distribution(rng, 4, 0.3);
      dist.insert(dist.end(), q.begin(), q.end());
    }
    StateId s = rng.index(2);
    auto hat = reconstruct(p, s, dist);
    auto w = decoder_weights(p, s);
    for (std::size_t j = 0; j < N; ++j)
      for (Action a = 0; a < 4; ++a) {
        double comb = 0.0;
        for (std::size_t i = 0; i < M; ++i) comb += w[i * N + j] * dist[i * 4 + a];
        ASSERT_NEAR(hat[j * 4 + a], comb, 1e-12);
      }
  }
}

TEST(Loss, MatchesIndependentRecomputation) {
  Rng rng(4);
  for (int c = 0; c < 200; ++c) {
    std::size_t S = 1 + rng.index(5), N = 1 + rng.index(5), M = 1 + rng.index(4);
    std::vector<PolicyTable> experts;
    for (std::size_t j = 0; j < N; ++j) experts.push_back(random_policy(rng, S));
    auto d = dataset_of(experts);
    TrainConfig cfg;
    cfg.loss = rng.index(2) ? LossKind::KL : LossKind::Huber;
    cfg.kl_direction = rng.index(2) ? KLDirection::Forward : KLDirection::Reverse;
    auto p = random_params(rng, S, M, N, rng.index(2) ? TableMode::PerState : TableMode::Global,
                           rng.index(2) ? TableMode::PerState : TableMode::Global);
    ASSERT_NEAR(loss(p, d, cfg), reference_loss(p, d, cfg), 1e-10 * (1 + reference_loss(p, d, cfg)));
    ASSERT_GE(loss(p, d, cfg), -1e-12);
  }
}

TEST(Loss, IdentityAttentionApproachesZero) {
  Rng rng(5);
  auto d = dataset_of({random_policy(rng, 3), random_policy(rng, 3)});
  auto p = EncoderParams::zeros(3, 2, 2, 4, TableMode::Global, TableMode::Global);
  for (std::size_t i = 0; i < 2; ++i) {
    p.encoder_logits[p.slot(i, i, 0)] = 60.0;
    p.decoder_logits[p.slot(i, i, 0)] = 60.0;
  }
  TrainConfig cfg;
  cfg.epsilon_smooth = 1e-12;
  EXPECT_LT(loss(p, d, cfg), 1e-12);
  auto g = gradient(p, d, cfg);
  double norm = 0.0;
  for (double v : g.encoder) norm += v * v;
  for (double v : g.decoder) norm += v * v;
  EXPECT_LT(std::sqrt(norm), 1e-8);
}

TEST(Loss, SingleDistilledAverageOfTwoOneHots) {
  auto d = dataset_of({one_hot_policy(1, 0), one_hot_policy(1, 1)});
  auto p = EncoderParams::zeros(1, 1, 2, 4, TableMode::Global, TableMode::Global);
  TrainConfig cfg;
  cfg.epsilon_smooth = 1e-12;
  EXPECT_NEAR(loss(p, d, cfg), 2.0 * std::log(2.0), 1e-9);
  EXPECT_NEAR(mean_kl(p, d), std::log(2.0), 1e-12);
}

TEST(Loss, InvariantToRelabelingDistilledPolicies) {
  Rng rng(6);
  for (int c = 0; c < 200; ++c) {
    std::size_t S = 2, N = 4, M = 3;
    std::vector<PolicyTable> experts;
    for (std::size_t j = 0; j < N; ++j) experts.push_back(random_policy(rng, S));
    auto d = dataset_of(experts);
    auto p = random_params(rng, S, M, N, TableMode::PerState, TableMode::PerState);
    std::vector<std::size_t> perm(M);
    std::iota(perm.begin(), perm.end(), 0);
    std::swap(perm[rng.index(M)], perm[rng.index(M)]);
    std::swap(perm[0], perm[rng.index(M)]);
    auto q = p;
    for (std::size_t t = 0; t < S; ++t)
      for (std::size_t i = 0; i < M; ++i)
        for (std::size_t j = 0; j < N; ++j) {
          q.encoder_logits[t * p.table_size() + p.slot(perm[i], j, 0)] = p.encoder_logits[t * p.table_size() + p.slot(i, j, 0)];
          q.decoder_logits[t * p.table_size() + p.slot(perm[i], j, 0)] = p.decoder_logits[t * p.table_size() + p.slot(i, j, 0)];
        }
    TrainConfig cfg;
    ASSERT_NEAR(loss(p, d, cfg), loss(q, d, cfg), 1e-12);
  }
}

TEST(Gradient, MatchesFiniteDifferencesForEveryConfiguration) {
  Rng rng(7);
  std::vector<PolicyTable> experts;
  for (std::size_t j = 0; j < 6; ++j) experts.push_back(random_policy(rng, 10));
  auto d = dataset_of(experts);
  for (auto enc : {TableMode::Global, TableMode::PerState})
    for (auto dec : {TableMode::Global, TableMode::PerState})
      for (auto loss_kind : {LossKind::KL, LossKind::Huber})
        for (auto dir : {KLDirection::Forward, KLDirection::Reverse}) {
          TrainConfig cfg;
          cfg.loss = loss_kind;
          cfg.kl_direction = dir;
          auto p = random_params(rng, 10, 3, 6, enc, dec);
          EXPECT_LT(max_fd_error(p, d, cfg, rng), 1e-5);
        }
}

TEST(Gradient, MatchesFiniteDifferencesForAblatedVariants) {
  Rng rng(8);
  std::vector<PolicyTable> experts;
  for (std::size_t j = 0; j < 6; ++j) experts.push_back(random_policy(rng, 10));
  auto d = dataset_of(experts);
  TrainConfig cfg;
  cfg.loss = LossKind::Huber;
  for (bool normalized : {true, false})
    for (bool shared : {true, false}) {
      auto p = random_params(rng, 10, 3, 6, TableMode::Global, TableMode::PerState, normalized, shared, 0.5);
      EXPECT_LT(max_fd_error(p, d, cfg, rng), 1e-5);
    }
}

TEST(Gradient, UnusedStateTablesHaveZeroGradient) {
  Rng rng(9);
  auto experts = std::vector<PolicyTable>{random_policy(rng, 5), random_policy(rng, 5)};
  auto full = dataset_of(experts);
  PolicyDataset d = full;
  d.states = {0, 1, 3};
  d.experts.assign(full.experts.begin(), full.experts.begin() + 2 * full.block());
  auto third = full.row_block(3);
  d.experts.insert(d.experts.end(), third.begin(), third.end());
  auto p = random_params(rng, 5, 2, 2, TableMode::PerState, TableMode::PerState);
  auto g = gradient(p, d, TrainConfig{});
  for (StateId s : {StateId{2}, StateId{4}}) {
    for (std::size_t k = 0; k < p.table_size(); ++k) {
      EXPECT_EQ(g.encoder[p.encoder_offset(s) + k], 0.0);
      EXPECT_EQ(g.decoder[p.decoder_offset(s) + k], 0.0);
    }
  }
}

TEST(Train, RecoversPlantedFactorization) {
  Rng rng(10);
  auto d = planted(rng, 20, 8);
  TrainConfig cfg;
  cfg.max_iters = 20000;
  cfg.seed = 3;
  auto res = train(d, 2, cfg);
  EXPECT_LT(mean_kl(res.params, d), 1e-3);
  EXPECT_TRUE(res.distilled.all_rows_are_policies());
}

TEST(Train, FullCapacityReachesNearZeroLoss) {
  Rng rng(11);
  std::vector<PolicyTable> experts;
  for (std::size_t j = 0; j < 4; ++j) experts.push_back(random_policy(rng, 6));
  auto d = dataset_of(experts);
  TrainConfig cfg;
  cfg.max_iters = 20000;
  auto res = train(d, 4, cfg);
  EXPECT_LT(res.loss_history.back(), 1e-4);
}

TEST(Train, LossNeverIncreasesAndRunIsDeterministic) {
  Rng rng(12);
  std::vector<PolicyTable> experts;
  for (std::size_t j = 0; j < 6; ++j) experts.push_back(random_policy(rng, 8));
  auto d = dataset_of(experts);
  TrainConfig cfg;
  cfg.max_iters = 300;
  cfg.seed = 5;
  auto a = train(d, 2, cfg), b = train(d, 2, cfg);
  for (std::size_t k = 1; k < a.loss_history.size(); ++k) ASSERT_LE(a.loss_history[k], a.loss_history[k - 1]);
  EXPECT_LE(a.loss_history.back(), a.loss_history.front());
  EXPECT_EQ(a.loss_history.back(), b.loss_history.back());
  EXPECT_EQ(a.params.encoder_logits, b.params.encoder_logits);
}

TEST(Train, SingleDistilledMatchesExpertMean) {
  Rng rng(13);
  std::vector<PolicyTable> experts;
  for (std::size_t j = 0; j < 5; ++j) experts.push_back(random_policy(rng, 7));
  auto d = dataset_of(experts);
  TrainConfig cfg;
  cfg.epsilon_smooth = 1e-6;
  cfg.max_iters = 10000;
  cfg.encoder_mode = TableMode::PerState;
  auto res = train(d, 1, cfg);
  auto mean = dataset_mean_policy(d);
  for (StateId s = 0; s < 7; ++s) EXPECT_LT(total_variation(res.distilled.policies[0].row(s), mean.row(s)), 1e-2);
}

TEST(Train, RejectsBadInput) {
  Rng rng(14);
  auto d = dataset_of({random_policy(rng, 3)});
  EXPECT_THROW(train(d, 0, TrainConfig{}), std::invalid_argument);
  TrainConfig bad;
  bad.epsilon_smooth = 0.0;
  EXPECT_THROW(train(d, 1, bad), std::invalid_argument);
  d.experts[0] = NAN;
  EXPECT_THROW(train(d, 1, TrainConfig{}), std::invalid_argument);
}

TEST(KMeans, FullRankRecoversExperts) {
  Rng rng(15);
  std::vector<PolicyTable> experts;
  for (std::size_t j = 0; j < 5; ++j) experts.push_back(random_policy(rng, 6));
  auto d = dataset_of(experts);
  auto km = kmeans_policies(d, 5, 1);
  EXPECT_NEAR(km.inertia, 0.0, 1e-20);
  for (const auto& e : experts) {
    bool found = false;
    for (const auto& c : km.centroids) {
      double diff = 0.0;
      for (std::size_t k = 0; k < c.probs.size(); ++k) diff = std::max(diff, std::abs(c.probs[k] - e.probs[k]));
      found = found || diff < 1e-12;
    }
    EXPECT_TRUE(found);
  }
}

TEST(KMeans, IdenticalExpertsCollapse) {
  Rng rng(16);
  auto e = random_policy(rng, 4);
  auto km = kmeans_policies(dataset_of({e, e}), 1, 0);
  for (std::size_t k = 0; k < e.probs.size(); ++k) EXPECT_NEAR(km.centroids[0].probs[k], e.probs[k], 1e-15);
  auto km2 = kmeans_policies(dataset_of({e, e, e}), 2, 0);
  for (const auto& c : km2.centroids) EXPECT_TRUE(is_row_stochastic(c));
}

TEST(KMeans, FiftyExpertsFiveClusters) {
  auto m = load_map_file(source_path("maps/gw1.txt"));
  DiscoverConfig dc;
  dc.n_options = 50;
  auto d = collect_exhaustive_dataset(discover_options(m, EnvConfig{}, dc), m);
  auto km = kmeans_policies(d, 5, 3);
  ASSERT_EQ(km.centroids.size(), 5u);
  for (const auto& c : km.centroids) EXPECT_TRUE(is_row_stochastic(c, 1e-9));
  std::vector<std::size_t> sizes(5, 0);
  for (auto a : km.assignment) ++sizes[a];
  for (auto s : sizes) EXPECT_GT(s, 0u);
  EXPECT_THROW(kmeans_policies(d, 51, 0), std::invalid_argument);
}

TEST(Ablation, FullEqualsTrain) {
  Rng rng(17);
  auto d = planted(rng, 10, 6);
  TrainConfig cfg;
  cfg.max_iters = 200;
  auto a = ablation_variant(d, 2, cfg, Variant::Full);
  auto b = train(d, 2, cfg);
  EXPECT_EQ(a.trained.loss_history, b.loss_history);
  EXPECT_TRUE(a.produces_policies);
}

TEST(Ablation, UnconstrainedWeightsLeaveTheSimplex) {
  Rng rng(18);
  auto d = planted(rng, 20, 8);
  TrainConfig cfg;
  cfg.max_iters = 2000;
  auto r = ablation_variant(d, 2, cfg, Variant::Neither);
  EXPECT_FALSE(r.produces_policies);
}

TEST(Ablation, PerActionWeightsMultiplyParameterCount) {
  Rng rng(19);
  auto d = planted(rng, 6, 4);
  TrainConfig cfg;
  cfg.max_iters = 5;
  auto full = ablation_variant(d, 2, cfg, Variant::Full);
  auto nws = ablation_variant(d, 2, cfg, Variant::NoWeightShare);
  EXPECT_EQ(nws.decoder_parameters, kNumActions * full.decoder_parameters);
  EXPECT_EQ(nws.encoder_parameters, kNumActions * full.encoder_parameters);
  EXPECT_EQ(to_string(Variant::NoAttnNorm), "no-attn-norm");
}
