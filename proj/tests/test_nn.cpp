#include <gtest/gtest.h>

#include <filesystem>
#include <sstream>

#include <overlapreg/nn.hpp>

using namespace overlapreg;
using namespace overlapreg::nn;

namespace {

ParameterStore small_store() {
  ParameterStore s;
  Mlp(s, "m", 3, {4, 2}, false, 11);
  return s;
}

}  // namespace

TEST(Mlp, ShapesChainAndNames) {
  ParameterStore s;
  Mlp m(s, "f", 3, {8, 16, 4}, true, 1);
  ASSERT_EQ(s.size(), 6u);
  EXPECT_EQ(s[0].name, "f.0.weight");
  EXPECT_EQ(s[1].name, "f.0.bias");
  for (std::size_t k = 0; k < m.layers(); ++k) {
    EXPECT_EQ(s[m.weight_ids[k]].value.rows(), m.dims[k]);
    EXPECT_EQ(s[m.weight_ids[k]].value.cols(), m.dims[k + 1]);
    EXPECT_EQ(s[m.bias_ids[k]].value, Matrix::Zero(1, m.dims[k + 1]));
  }
  EXPECT_THROW(Mlp(s, "f", 3, {2}, true, 1), std::invalid_argument);  // duplicate names
  EXPECT_THROW(Mlp(s, "g", 3, {}, true, 1), std::invalid_argument);
}

TEST(Mlp, KaimingUniformBounds) {
  ParameterStore s;
  Mlp(s, "w", 50, {400}, true, 2);
  const Matrix& w = s[0].value;
  const double bound = std::sqrt(6.0 / 50.0);
  EXPECT_LE(w.cwiseAbs().maxCoeff(), bound);
  // uniform(-b, b) has variance b^2 / 3
  const double var = w.array().square().mean();
  EXPECT_NEAR(var, bound * bound / 3.0, 0.05 * bound * bound / 3.0);
}

TEST(Mlp, ForwardRejectsWrongWidth) {
  ParameterStore s;
  Mlp m(s, "f", 3, {4}, true, 1);
  Tape t;
  Binding b(t, s);
  EXPECT_THROW(m.forward(b, t.constant(Matrix::Ones(5, 2))), std::invalid_argument);
  EXPECT_EQ(m.forward(b, t.constant(Matrix::Ones(5, 3))).cols(), 4);
}

TEST(Adam, ZeroGradientLeavesParameters) {
  ParameterStore s = small_store();
  const ParameterStore before = s;
  AdamState st = AdamState::zeros_like(s);
  for (int i = 0; i < 5; ++i) adam_step(s, st, 1e-2);
  EXPECT_EQ(s, before);
  EXPECT_EQ(st.step, 5u);
}

TEST(Adam, FirstStepMovesByLearningRate) {
  ParameterStore s;
  Matrix g(1, 3);
  g << 0.5, -2.0, 1e-3;
  s.add("p", Matrix::Zero(1, 3));
  s[0].grad = g;
  AdamState st = AdamState::zeros_like(s);
  const double lr = 1e-3;
  adam_step(s, st, lr);
  for (Index j = 0; j < 3; ++j) {
    // bias-corrected m/sqrt(v) = g/|g| on the first step
    const double expect = -lr * g(0, j) / (std::abs(g(0, j)) + 1e-8);
    EXPECT_NEAR(s[0].value(0, j), expect, 1e-15);
    EXPECT_NEAR(std::abs(s[0].value(0, j)), lr, lr * 1e-4);
  }
}

TEST(Adam, IdenticalHistoriesGiveIdenticalUpdates) {
  ParameterStore s;
  s.add("a", Matrix::Ones(2, 2));
  s.add("b", Matrix::Ones(2, 2));
  AdamState st = AdamState::zeros_like(s);
  for (int i = 0; i < 10; ++i) {
    const Matrix g = Matrix::Constant(2, 2, std::sin(i + 1.0));
    s[0].grad = g;
    s[1].grad = g;
    adam_step(s, st, 1e-2);
  }
  EXPECT_EQ(s[0].value, s[1].value);
}

TEST(Adam, MismatchedStateRejected) {
  ParameterStore s = small_store();
  AdamState st;
  EXPECT_THROW(adam_step(s, st, 1e-3), std::invalid_argument);
}

TEST(Checkpoint, BitExactRoundTrip) {
  ParameterStore s = small_store();
  AdamState st = AdamState::zeros_like(s);
  for (auto& p : s) p.grad.setConstant(0.123456789);
  adam_step(s, st, 1e-3);
  Checkpoint ck{"{\"k\":1}", s, st};
  std::stringstream ss;
  write_checkpoint(ss, ck);
  const std::string bytes = ss.str();
  EXPECT_EQ(bytes.substr(0, 4), "OMRG");
  const Checkpoint back = read_checkpoint(ss);
  EXPECT_EQ(back.config_json, ck.config_json);
  EXPECT_EQ(back.params, s);
  EXPECT_EQ(back.optimizer, st);
  std::stringstream again;
  write_checkpoint(again, back);
  EXPECT_EQ(again.str(), bytes);
}

TEST(Checkpoint, RejectsCorruptFiles) {
  std::stringstream bad("XXXX");
  EXPECT_THROW(read_checkpoint(bad), std::runtime_error);
  std::stringstream ss;
  write_checkpoint(ss, {"{}", small_store(), {}});
  const std::string full = ss.str();
  std::stringstream truncated(full.substr(0, full.size() / 2));
  EXPECT_THROW(read_checkpoint(truncated), std::runtime_error);
  EXPECT_THROW(load_checkpoint("/nonexistent/model.omrg"), std::runtime_error);
}

TEST(Checkpoint, CompatibilityCheckNamesShapes) {
  ParameterStore a = small_store();
  ParameterStore b;
  Mlp(b, "m", 3, {5, 2}, false, 1);
  try {
    assign_compatible(a, b);
    FAIL();
  } catch (const std::runtime_error& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("(3x4)"), std::string::npos);
    EXPECT_NE(msg.find("(3x5)"), std::string::npos);
  }
}
