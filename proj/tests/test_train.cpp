#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include <overlapreg/train.hpp>

using namespace overlapreg;

namespace {

TrainConfig tiny_train_config() {
  TrainConfig c;
  c.total_steps = 4;
  c.lr_decay_step = 3;
  c.batch_size = 2;
  c.seed = 17;
  c.dataset.n_points = 64;
  c.dataset.pair.keep = 32;
  c.model.iterations = 2;
  c.model.mask_start_iteration = 1;
  c.model.feature_widths = {8, 16};
  c.model.fusion_widths = {16, 8};
  c.model.mask_widths = {8, 2};
  c.model.regression_widths = {16, 7};
  return c;
}

std::filesystem::path temp_dir(const std::string& name) {
  auto d = std::filesystem::temp_directory_path() / ("overlapreg_" + name);
  std::filesystem::remove_all(d);
  std::filesystem::create_directories(d);
  return d;
}

}  // namespace

TEST(TrainConfig, LearningRateSchedule) {
  TrainConfig c;
  c.lr = 1e-3;
  c.lr_decay_step = 1700;
  c.lr_decay_factor = 0.1;
  EXPECT_EQ(c.lr_at(1), 1e-3);
  EXPECT_EQ(c.lr_at(1700), 1e-3);
  EXPECT_EQ(c.lr_at(1701), 1e-3 * 0.1);
}

TEST(TrainConfig, Validation) {
  TrainConfig c;
  EXPECT_NO_THROW(c.validate());
  c.batch_size = 0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = TrainConfig{};
  c.lr_decay_step = c.total_steps + 1;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = TrainConfig{};
  c.lr = 0.0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
}

TEST(TrainConfig, JsonRoundTripAndFile) {
  TrainConfig c = tiny_train_config();
  c.dataset.pair.partial = PartialMode::halfspace;
  c.dataset.shape = "torus";
  c.model.topk = 20;
  const nlohmann::json j = c;
  const TrainConfig back = j.get<TrainConfig>();
  EXPECT_EQ(nlohmann::json(back).dump(), j.dump());
  EXPECT_EQ(back.model, c.model);

  const auto dir = temp_dir("traincfg");
  std::ofstream(dir / "cfg.json") << j.dump(2);
  EXPECT_EQ(load_train_config(dir / "cfg.json").model, c.model);
  std::ofstream(dir / "bad.json") << "{\"batch_size\": 0}";
  EXPECT_THROW(load_train_config(dir / "bad.json"), std::invalid_argument);
  std::ofstream(dir / "broken.json") << "{not json";
  EXPECT_THROW(load_train_config(dir / "broken.json"), std::runtime_error);
  EXPECT_THROW(load_train_config(dir / "missing.json"), std::runtime_error);
  EXPECT_THROW(partial_from_name("random"), std::invalid_argument);
  EXPECT_THROW(shape_for(DatasetSpec{"blob"}, 1), std::invalid_argument);
}

TEST(Train, SeedDeterministic) {
  const TrainConfig c = tiny_train_config();
  const TrainResult a = train(c), b = train(c);
  EXPECT_EQ(a.state.model.params(), b.state.model.params());
  EXPECT_EQ(a.state.adam, b.state.adam);
  ASSERT_EQ(a.log.size(), 4u);
  for (std::size_t i = 0; i < a.log.size(); ++i) {
    EXPECT_EQ(a.log[i].total, b.log[i].total);
    EXPECT_TRUE(std::isfinite(a.log[i].total));
    EXPECT_NEAR(a.log[i].total, a.log[i].mask_loss + a.log[i].reg_loss, 1e-12);
  }
  EXPECT_EQ(a.log[2].lr, c.lr);
  EXPECT_EQ(a.log[3].lr, c.lr * c.lr_decay_factor);
  TrainConfig other = c;
  other.seed = 18;
  EXPECT_FALSE(train(other).state.model.params() == a.state.model.params());
}

TEST(Train, CheckpointResumeIsBitExact) {
  const TrainConfig c = tiny_train_config();
  const TrainResult full = train(c);
  TrainConfig half = c;
  half.total_steps = 3;
  half.lr_decay_step = 3;
  const TrainResult first = train(half);
  std::stringstream ss;
  nn::write_checkpoint(ss, first.state.checkpoint());
  const TrainResult rest = train(c, TrainState::from_checkpoint(nn::read_checkpoint(ss)));
  ASSERT_EQ(rest.log.size(), 1u);
  EXPECT_EQ(rest.log[0].step, 4u);
  EXPECT_EQ(rest.state.model.params(), full.state.model.params());
  EXPECT_EQ(rest.state.adam, full.state.adam);
}

TEST(Train, WritesLogAndCheckpoints) {
  const auto dir = temp_dir("trainio");
  TrainConfig c = tiny_train_config();
  c.log_path = (dir / "log.csv").string();
  c.checkpoint_path = (dir / "model.omrg").string();
  c.checkpoint_every = 2;
  const TrainResult r = train(c);
  std::ifstream log(c.log_path);
  std::string header, line;
  std::getline(log, header);
  EXPECT_EQ(header, "step,lr,mask_loss,reg_loss,total");
  int rows = 0;
  while (std::getline(log, line)) ++rows;
  EXPECT_EQ(rows, 4);
  const TrainState back = TrainState::from_checkpoint(nn::load_checkpoint(c.checkpoint_path));
  EXPECT_EQ(back.step, 4u);
  EXPECT_EQ(back.model.params(), r.state.model.params());
  TrainConfig wrong = c;
  wrong.model.fusion_widths = {16, 4};
  EXPECT_THROW(train(wrong, TrainState::from_checkpoint(nn::load_checkpoint(c.checkpoint_path))), std::invalid_argument);
}

TEST(Train, NonFiniteLossAbortsWithSeedRecord) {
  const TrainConfig c = tiny_train_config();
  TrainState s = TrainState::fresh(c);
  for (auto& p : s.model.params())
    if (p.name == "h.1.bias") p.value.setConstant(std::numeric_limits<double>::quiet_NaN());
  try {
    train_step(s, c);
    FAIL();
  } catch (const NonFiniteLoss& e) {
    EXPECT_EQ(e.record.pair_seed, batch_pair_seed(c, 1, 0));
    EXPECT_NE(std::string(e.what()).find("step 1"), std::string::npos);
  }
}

TEST(Train, LossEma) {
  std::vector<StepLog> log(3);
  log[0].total = 10.0;
  log[1].total = 0.0;
  log[2].total = 0.0;
  const auto e = loss_ema(log, 0.5);
  EXPECT_EQ(e, (std::vector<double>{10.0, 5.0, 2.5}));
}

TEST(MaskMetrics, Counts) {
  Eigen::VectorXd p(5);
  p << 0.9, 0.6, 0.4, 0.1, 0.5;
  const MaskMetrics m = mask_metrics(p, {1, 0, 1, 0, 1});
  // tp = 2, fp = 1, fn = 1
  EXPECT_DOUBLE_EQ(m.precision, 2.0 / 3.0);
  EXPECT_DOUBLE_EQ(m.recall, 2.0 / 3.0);
  EXPECT_DOUBLE_EQ(m.f1, 2.0 / 3.0);
  EXPECT_EQ(mask_metrics(Eigen::VectorXd::Zero(3), {0, 0, 0}).f1, 1.0);
  EXPECT_EQ(mask_metrics(Eigen::VectorXd::Zero(3), {0, 1, 0}).f1, 0.0);
  EXPECT_THROW(mask_metrics(p, {1}), std::invalid_argument);
}

TEST(Evaluate, OraclePredictorHasZeroError) {
  const auto pairs = make_eval_set(tiny_train_config().dataset, 10, 3);
  std::vector<RigidTransform> gts;
  for (const auto& p : pairs) gts.push_back(p.gt);
  const ErrorReport r = evaluate_predictions(gts, pairs);
  EXPECT_EQ(r.rmse_rot, 0.0);
  EXPECT_EQ(r.mae_rot, 0.0);
  EXPECT_EQ(r.rmse_trans, 0.0);
  EXPECT_EQ(r.mae_trans, 0.0);
  EXPECT_EQ(r.iso_rot, 0.0);
  EXPECT_EQ(r.iso_trans, 0.0);
}

TEST(Evaluate, ReportShapeAndInitialPose) {
  const TrainConfig c = tiny_train_config();
  const OmnetModel m(c.model, 1);
  const auto pairs = make_eval_set(c.dataset, 6, 4);
  const EvalReport r = evaluate(m, pairs);
  ASSERT_EQ(r.per_iteration.size(), 3u);
  ASSERT_EQ(r.mask_per_iteration.size(), 2u);
  const ErrorReport init = evaluate_predictions(std::vector<RigidTransform>(pairs.size()), pairs);
  EXPECT_EQ(r.per_iteration[0].iso_rot, init.iso_rot);
  EXPECT_EQ(r.final.iso_rot, r.per_iteration.back().iso_rot);
  EXPECT_EQ(r.predictions.size(), pairs.size());
  EXPECT_GT(r.all_overlap_baseline.f1, 0.0);
  EXPECT_THROW(evaluate(m, {}), std::invalid_argument);
  const EvalReport again = evaluate(m, pairs);
  EXPECT_EQ(again.predictions, r.predictions);
}
