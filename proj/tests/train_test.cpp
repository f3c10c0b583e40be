#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <sstream>

#include "gmlfm/train.hpp"
#include "support.hpp"

using namespace gmlfm;
using namespace gmlfm::train;
using model::DistanceKind;
using model::DistanceSpec;
using model::ModelParams;
using model::ParamGroup;

namespace {

tape::GradientMap single_gradient(ParamGroup group, int index, std::vector<double> g) {
  tape::GradientMap map;
  const tape::Shape shape{static_cast<std::uint32_t>(g.size()), 1};
  map.accumulate({static_cast<int>(group), index}, shape, g);
  return map;
}

/// Instances with three active attributes out of n and a linear target.
std::vector<data::SparseInstance> linear_dataset(std::size_t n, std::size_t count, std::mt19937_64& rng) {
  std::vector<double> coef(n);
  gmlfm::testing::fill_uniform(coef, rng, -1.0, 1.0);
  std::vector<data::SparseInstance> out;
  for (std::size_t i = 0; i < count; ++i) {
    data::SparseInstance inst;
    inst.entries = gmlfm::testing::random_active(3, n, rng, 0.5, 1.5);
    for (const auto& e : inst.entries) inst.label += coef[e.index] * e.value;
    out.push_back(std::move(inst));
  }
  return out;
}

ModelParams as_params(const ModelGradient& g, const ModelParams& like) {
  ModelParams p = like;
  p.w0 = g.w0;
  p.w = g.w;
  p.V = g.V;
  p.h = g.h;
  p.L = g.L;
  p.mlp = g.mlp;
  return p;
}

TEST(HyperParamsTest, Validation) {
  HyperParams h;
  EXPECT_NO_THROW(h.validate());
  h.learning_rate = 0.0;
  EXPECT_THROW(h.validate(), std::invalid_argument);
  h = {};
  h.batch_size = 0;
  EXPECT_THROW(h.validate(), std::invalid_argument);
  h = {};
  h.embed_dim = 0;
  EXPECT_THROW(h.validate(), std::invalid_argument);
  h = {};
  h.dropout = 1.0;
  EXPECT_THROW(h.validate(), std::invalid_argument);
  h = {};
  h.l2 = -1.0;
  EXPECT_THROW(h.validate(), std::invalid_argument);
}

TEST(InitParams, NormalStatistics) {
  HyperParams hyper;
  hyper.embed_dim = 16;
  std::mt19937_64 rng(3);
  const auto p = init_params(62500, {DistanceKind::Euclidean, true, 0}, hyper, rng);
  const auto& xs = p.V.data();
  ASSERT_EQ(xs.size(), 1000000u);
  double sum = 0.0, sq = 0.0;
  for (double x : xs) sum += x;
  const double mean = sum / xs.size();
  for (double x : xs) sq += (x - mean) * (x - mean);
  const double sd = std::sqrt(sq / (xs.size() - 1));
  EXPECT_GE(mean, -0.001);
  EXPECT_LE(mean, 0.001);
  EXPECT_GE(sd, 0.0095);
  EXPECT_LE(sd, 0.0105);
  EXPECT_EQ(p.w0, 0.0);
}

TEST(InitParams, SameSeedIsBitIdentical) {
  HyperParams hyper;
  hyper.embed_dim = 8;
  const DistanceSpec spec{DistanceKind::Dnn, true, 3};
  std::mt19937_64 a(9), b(9);
  EXPECT_EQ(init_params(50, spec, hyper, a), init_params(50, spec, hyper, b));
}

TEST(SquaredLoss, Examples) {
  EXPECT_EQ(squared_loss(1, 1), 0.0);
  EXPECT_EQ(squared_loss(0, 1), 1.0);
  EXPECT_EQ(squared_loss(-1, 1), 4.0);
}

TEST(SgdStep, Arithmetic) {
  auto p = ModelParams::zeros(2, 2, {DistanceKind::Euclidean, true, 0});
  p.w[0] = 1.0;
  ModelGradient g(p);
  g.add(single_gradient(ParamGroup::W, 0, {2.0}));
  sgd_step(p, g, 0.1);
  EXPECT_DOUBLE_EQ(p.w[0], 0.8);
}

TEST(SgdStep, ZeroGradientLeavesParams) {
  std::mt19937_64 rng(1);
  auto p = gmlfm::testing::random_params(4, 3, {DistanceKind::Mahalanobis, true, 0}, rng);
  const auto before = p;
  ModelGradient g(p);
  g.add(single_gradient(ParamGroup::V, 2, {0.0, 0.0, 0.0}));
  sgd_step(p, g, 0.5);
  EXPECT_EQ(p, before);
}

TEST(SgdStep, StepsCommuteOnlyForConstantGradients) {
  const double eta = 0.1, theta0 = 1.5;
  auto run = [&](const std::vector<double>& grads) {
    auto p = ModelParams::zeros(1, 1, {DistanceKind::Euclidean, true, 0});
    p.w[0] = theta0;
    for (double gv : grads) {
      ModelGradient g(p);
      g.add(single_gradient(ParamGroup::W, 0, {gv}));
      sgd_step(p, g, eta);
    }
    return p.w[0];
  };
  // linear loss c*theta: the gradient is c everywhere
  EXPECT_DOUBLE_EQ(run({0.7, 0.7}), run({1.4}));
  // quadratic loss theta^2/2: the second gradient is taken at the moved point
  const double theta1 = run({theta0});
  const double sequential = run({theta0, theta1});
  EXPECT_DOUBLE_EQ(sequential, (1 - eta) * (1 - eta) * theta0);
  EXPECT_NE(sequential, run({2 * theta0}));
}

TEST(AdamStep, FirstStepMovesByLearningRate) {
  HyperParams hyper;
  hyper.learning_rate = 0.01;
  for (double gv : {3.0, -0.002, 250.0}) {
    auto p = ModelParams::zeros(2, 2, {DistanceKind::Euclidean, true, 0});
    p.w[1] = 0.5;
    auto state = make_adam_state(p);
    ModelGradient g(p);
    g.add(single_gradient(ParamGroup::W, 1, {gv}));
    adam_step(p, state, g, hyper);
    const double delta = p.w[1] - 0.5;
    EXPECT_NEAR(std::abs(delta), hyper.learning_rate, 1e-4 * hyper.learning_rate) << gv;
    EXPECT_EQ(std::signbit(delta), gv > 0);
  }
}

TEST(AdamStep, ZeroGradientsLeaveParams) {
  std::mt19937_64 rng(2);
  auto p = gmlfm::testing::random_params(4, 3, {DistanceKind::Dnn, true, 2}, rng);
  const auto before = p;
  auto state = make_adam_state(p);
  HyperParams hyper;
  for (int s = 0; s < 5; ++s) {
    ModelGradient g(p);
    g.add(single_gradient(ParamGroup::H, 0, {0.0, 0.0, 0.0}));
    g.add(single_gradient(ParamGroup::V, 1, {0.0, 0.0, 0.0}));
    adam_step(p, state, g, hyper);
  }
  EXPECT_EQ(p, before);
}

TEST(AdamStep, MomentShapesMatchParams) {
  std::mt19937_64 rng(3);
  const auto p = gmlfm::testing::random_params(5, 4, {DistanceKind::Dnn, true, 3}, rng);
  const auto state = make_adam_state(p);
  EXPECT_EQ(state.m.V.rows(), 5u);
  EXPECT_EQ(state.v.mlp.size(), 3u);
  EXPECT_EQ(state.step, 0u);
}

TEST(Fit, AdamTrajectoryIsDeterministic) {
  std::mt19937_64 rng(4);
  const auto data = linear_dataset(30, 200, rng);
  HyperParams hyper;
  hyper.embed_dim = 4;
  hyper.epochs = 3;
  hyper.batch_size = 32;
  hyper.learning_rate = 0.01;
  const DistanceSpec spec{DistanceKind::Dnn, true, 2};
  const auto a = fit(data, 30, spec, hyper);
  const auto b = fit(data, 30, spec, hyper);
  EXPECT_EQ(a.params, b.params);
  for (std::size_t e = 0; e < a.history.size(); ++e)
    EXPECT_EQ(a.history[e].train_loss, b.history[e].train_loss);
}

TEST(TrainEpoch, LossDecreasesOnLinearTargets) {
  std::mt19937_64 rng(5);
  const auto data = linear_dataset(40, 400, rng);
  HyperParams hyper;
  hyper.embed_dim = 4;
  hyper.epochs = 5;
  hyper.batch_size = 16;
  hyper.learning_rate = 0.01;
  const auto result = fit(data, 40, {DistanceKind::Inner, false, 0}, hyper);
  ASSERT_EQ(result.history.size(), 5u);
  for (std::size_t e = 1; e < 5; ++e)
    EXPECT_LT(result.history[e].train_loss, result.history[e - 1].train_loss) << "epoch " << e + 1;
}

TEST(TrainEpoch, SingleBatchWhenBatchCoversData) {
  std::mt19937_64 rng(6);
  const auto data = linear_dataset(10, 50, rng);
  HyperParams hyper;
  hyper.embed_dim = 3;
  hyper.batch_size = 50;
  const DistanceSpec spec{DistanceKind::Euclidean, true, 0};
  auto state = make_train_state(init_params(10, spec, hyper, rng));
  EXPECT_EQ(train_epoch(state, data, spec, hyper, rng).steps, 1u);
  hyper.batch_size = 1000;
  EXPECT_EQ(train_epoch(state, data, spec, hyper, rng).steps, 1u);
  hyper.batch_size = 20;
  EXPECT_EQ(train_epoch(state, data, spec, hyper, rng).steps, 3u);
  EXPECT_EQ(state.optimizer_steps, 5u);
}

TEST(TrainEpoch, RejectsEmptyTrainingSet) {
  HyperParams hyper;
  hyper.embed_dim = 2;
  std::mt19937_64 rng(1);
  const DistanceSpec spec{DistanceKind::Euclidean, true, 0};
  auto state = make_train_state(init_params(3, spec, hyper, rng));
  EXPECT_THROW(train_epoch(state, {}, spec, hyper, rng), std::invalid_argument);
}

TEST(TrainEpoch, NonFiniteLossNamesBatchAndInstance) {
  std::mt19937_64 rng(7);
  auto data = linear_dataset(10, 8, rng);
  data[5].entries[0].value = std::numeric_limits<double>::infinity();
  HyperParams hyper;
  hyper.embed_dim = 2;
  hyper.batch_size = 1;
  const DistanceSpec spec{DistanceKind::Euclidean, true, 0};
  auto state = make_train_state(init_params(10, spec, hyper, rng));
  try {
    train_epoch(state, data, spec, hyper, rng);
    FAIL() << "expected TrainingError";
  } catch (const TrainingError& e) {
    EXPECT_EQ(e.instance(), 5u);
    EXPECT_LT(e.batch(), 8u);
    EXPECT_NE(std::string(e.what()).find("instance 5"), std::string::npos);
  }
}

TEST(Fit, ZeroEpochsReturnsInitialParams) {
  std::mt19937_64 rng(8);
  const auto data = linear_dataset(10, 20, rng);
  HyperParams hyper;
  hyper.embed_dim = 3;
  hyper.epochs = 0;
  const DistanceSpec spec{DistanceKind::Mahalanobis, true, 0};
  const auto result = fit(data, 10, spec, hyper);
  std::mt19937_64 init_rng(hyper.seed);
  EXPECT_EQ(result.params, init_params(10, spec, hyper, init_rng));
  EXPECT_TRUE(result.history.empty());
}

TEST(Fit, PatienceStopsAfterFirstNonImprovement) {
  std::mt19937_64 rng(9);
  const auto data = linear_dataset(10, 20, rng);
  HyperParams hyper;
  hyper.embed_dim = 3;
  hyper.epochs = 10;
  hyper.patience = 1;
  int calls = 0;
  Validation v{"score", true, [&](const ModelParams&) { return 1.0 - 0.1 * calls++; }};
  const auto result = fit(data, 10, {DistanceKind::Euclidean, true, 0}, hyper, v);
  EXPECT_EQ(result.history.size(), 2u);
  EXPECT_EQ(result.best_epoch, 1);
  EXPECT_EQ(*result.history[0].validation, 1.0);
}

TEST(Fit, KeepsBestEpochParams) {
  std::mt19937_64 rng(10);
  const auto data = linear_dataset(10, 20, rng);
  HyperParams hyper;
  hyper.embed_dim = 3;
  hyper.epochs = 4;
  hyper.patience = 5;
  const DistanceSpec spec{DistanceKind::Euclidean, true, 0};
  std::vector<ModelParams> seen;
  const std::vector<double> scores{0.3, 0.9, 0.1, 0.2};
  Validation v{"rmse", false, [&](const ModelParams& p) {
                 seen.push_back(p);
                 return scores[seen.size() - 1];
               }};
  const auto result = fit(data, 10, spec, hyper, v);
  EXPECT_EQ(result.history.size(), 4u);
  EXPECT_EQ(result.best_epoch, 3);
  EXPECT_EQ(result.params, seen[2]);
}

TEST(Fit, NoValidationRunsEveryEpoch) {
  std::mt19937_64 rng(11);
  const auto data = linear_dataset(10, 20, rng);
  HyperParams hyper;
  hyper.embed_dim = 3;
  hyper.epochs = 7;
  hyper.patience = 1;
  const auto result = fit(data, 10, {DistanceKind::Euclidean, true, 0}, hyper);
  EXPECT_EQ(result.history.size(), 7u);
  EXPECT_EQ(result.best_epoch, 7);
  for (int e = 0; e < 7; ++e) {
    EXPECT_EQ(result.history[e].epoch, e + 1);
    EXPECT_FALSE(result.history[e].validation);
  }
}

TEST(Fit, RejectsEmptyTrainingSet) {
  HyperParams hyper;
  hyper.embed_dim = 2;
  EXPECT_THROW(fit({}, 4, {DistanceKind::Euclidean, true, 0}, hyper), std::invalid_argument);
}

TEST(SparseUpdate, InactiveRowsStayBitIdentical) {
  std::mt19937_64 rng(12);
  // attributes 0..9 appear in the data, 10..19 never do
  auto data = linear_dataset(10, 100, rng);
  for (auto optimizer : {Optimizer::Adam, Optimizer::Sgd}) {
    HyperParams hyper;
    hyper.embed_dim = 4;
    hyper.epochs = 3;
    hyper.batch_size = 8;
    hyper.optimizer = optimizer;
    hyper.learning_rate = 0.01;
    const DistanceSpec spec{DistanceKind::Dnn, true, 2};
    std::mt19937_64 init_rng(13);
    const auto initial = init_params(20, spec, hyper, init_rng);
    const auto result = fit_from(initial, data, spec, hyper);
    for (std::size_t r = 10; r < 20; ++r) {
      EXPECT_EQ(result.params.w[r], initial.w[r]);
      for (std::size_t c = 0; c < 4; ++c) EXPECT_EQ(result.params.V(r, c), initial.V(r, c));
    }
    EXPECT_NE(result.params.V(0, 0), initial.V(0, 0));
  }
}

TEST(SparseUpdate, BatchGradientTouchesOnlyActiveRows) {
  std::mt19937_64 rng(14);
  const DistanceSpec spec{DistanceKind::Mahalanobis, true, 0};
  const auto p = gmlfm::testing::random_params(12, 3, spec, rng);
  data::SparseInstance a, b;
  a.entries = {{1, 1.0}, {4, 1.0}};
  b.entries = {{4, 0.5}, {9, 1.0}};
  a.label = 1.0;
  const std::vector<data::SparseInstance> batch{a, b};
  const auto g = batch_gradient(p, batch, spec);
  auto rows = g.touched_rows();
  std::sort(rows.begin(), rows.end());
  EXPECT_EQ(rows, (std::vector<std::uint32_t>{1, 4, 9}));
  EXPECT_TRUE(g.touched(ParamGroup::L));
  EXPECT_FALSE(g.touched(ParamGroup::MlpW));
}

double batch_gradient_error(const DistanceSpec& spec, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const auto p = gmlfm::testing::random_params(10, 4, spec, rng, 0.8);
  std::vector<data::SparseInstance> batch;
  for (int i = 0; i < 3; ++i) {
    data::SparseInstance inst;
    inst.entries = gmlfm::testing::random_active(4, 10, rng, 0.5, 1.5);
    inst.label = i % 2 == 0 ? 1.0 : -1.0;
    batch.push_back(inst);
  }
  const auto analytic = model::flatten(as_params(batch_gradient(p, batch, spec), p));
  auto probe = p;
  return tape::finite_difference_check(
             [&](std::span<const double> th) {
               model::unflatten(th, probe);
               double total = 0.0;
               for (const auto& inst : batch)
                 total += squared_loss(model::predict(probe, inst.entries, spec), inst.label);
               return total;
             },
             model::flatten(p), analytic, 1e-5)
      .max_rel_error;
}

TEST(BatchGradient, MatchesFiniteDifferences) {
  const DistanceSpec specs[] = {{DistanceKind::Inner, false, 0},
                                {DistanceKind::Euclidean, true, 0},
                                {DistanceKind::Mahalanobis, true, 0},
                                {DistanceKind::Dnn, true, 2},
                                {DistanceKind::Cosine, true, 1}};
  std::uint64_t seed = 20;
  for (const auto& spec : specs) EXPECT_LE(batch_gradient_error(spec, seed++), 1e-4) << model::to_string(spec);
}

TEST(Mahalanobis, MetricStaysPsdWhileTraining) {
  std::mt19937_64 rng(15);
  const auto data = linear_dataset(15, 120, rng);
  HyperParams hyper;
  hyper.embed_dim = 4;
  hyper.batch_size = 16;
  hyper.learning_rate = 0.05;
  const DistanceSpec spec{DistanceKind::Mahalanobis, true, 0};
  auto state = make_train_state(init_params(15, spec, hyper, rng));
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> z(4);
  for (int epoch = 0; epoch < 5; ++epoch) {
    train_epoch(state, data, spec, hyper, rng);
    const auto M = model::psd_from_factor(state.params.L);
    for (int t = 0; t < 1000; ++t) {
      for (double& x : z) x = normal(rng);
      ASSERT_GE(quadratic_form(M, z), -1e-9) << "epoch " << epoch;
    }
  }
}

TEST(Overfit, DnnDrivesSingleInstanceLossToZero) {
  data::SparseInstance inst;
  inst.entries = {{0, 1.0}, {3, 1.0}, {5, 1.0}};
  inst.label = 1.0;
  const std::vector<data::SparseInstance> data(16, inst);
  HyperParams hyper;
  hyper.embed_dim = 8;
  hyper.epochs = 150;
  hyper.batch_size = 16;
  hyper.learning_rate = 0.01;
  hyper.dropout = 0.0;
  const DistanceSpec spec{DistanceKind::Dnn, true, 2};
  const auto result = fit(data, 6, spec, hyper);
  EXPECT_LT(result.history.back().train_loss, 1e-4);
  EXPECT_LT(result.history.back().train_loss, result.history.front().train_loss);
}

TEST(History, WritesHeaderAndMissingValidation) {
  std::vector<EpochRecord> h{{1, 0.5, 0.25, 0.1}, {2, 0.4, std::nullopt, 0.1}};
  std::ostringstream out;
  write_history(out, h, "rmse");
  std::istringstream in(out.str());
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, "epoch\ttrain_loss\tvalidation_rmse\twall_seconds");
  auto fields = [&] {
    std::getline(in, line);
    std::vector<std::string> out;
    std::istringstream row(line);
    for (std::string f; std::getline(row, f, '\t');) out.push_back(f);
    return out;
  };
  const auto first = fields();
  ASSERT_EQ(first.size(), 4u);
  EXPECT_EQ(std::stod(first[1]), 0.5);
  EXPECT_EQ(std::stod(first[2]), 0.25);
  const auto second = fields();
  ASSERT_EQ(second.size(), 4u);
  EXPECT_EQ(second[0], "2");
  EXPECT_EQ(std::stod(second[1]), 0.4);
  EXPECT_EQ(second[2], "NA");
}

TEST(OptimizerNames, RoundTrip) {
  EXPECT_EQ(parse_optimizer("adam"), Optimizer::Adam);
  EXPECT_EQ(parse_optimizer("sgd"), Optimizer::Sgd);
  EXPECT_FALSE(parse_optimizer("rmsprop"));
}

}  // namespace
