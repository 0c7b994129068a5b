// Empirical trends of the trained desk model (checkpoint from the acceptance_train fixture).

#include <gtest/gtest.h>

#include <cstdlib>

#include <overlapreg/experiments.hpp>

using namespace overlapreg;

namespace {

const OmnetModel& desk_model() {
  static const OmnetModel m = [] {
    const char* path = std::getenv("OVERLAPREG_DESK_MODEL");
    if (!path) throw std::runtime_error("OVERLAPREG_DESK_MODEL is not set");
    return TrainState::from_checkpoint(nn::load_checkpoint(path)).model;
  }();
  return m;
}

const std::vector<RegistrationPair>& held_out() {
  static const auto pairs = make_eval_set(DatasetSpec{}, 200, 31337);
  return pairs;
}

const EvalReport& held_out_report() {
  static const EvalReport r = evaluate(desk_model(), held_out());
  return r;
}

}  // namespace

TEST(DeskTrends, TrainedBeatsUntrained) {
  const OmnetModel untrained(desk_model().config(), 77);
  EXPECT_LT(held_out_report().final.iso_rot, evaluate(untrained, held_out()).final.iso_rot);
}

TEST(DeskTrends, SecondIterationNoWorseThanFirst) {
  const IterationStudy s = iteration_study(desk_model(), 2, held_out());
  EXPECT_LE(s.table.at(1, "iso_rot"), s.table.at(0, "iso_rot"));
}

TEST(DeskTrends, MaskF1NonDecreasingAfterSecondIteration) {
  const auto& m = held_out_report().mask_per_iteration;
  ASSERT_GE(m.size(), 2u);
  for (std::size_t i = 2; i < m.size(); ++i) EXPECT_GE(m[i].f1, m[i - 1].f1) << "iteration " << i + 1;
}

TEST(DeskTrends, ErrorGrowsAsOverlapShrinks) {
  SweepOptions o;
  o.trials = 50;
  o.seed = 4242;
  o.dataset.pair.noise_sigma = 0.0;
  const Table t = overlap_sweep(desk_model(), {1.0, 0.3, 0.1}, o);
  EXPECT_LT(t.at(0, "omnet_iso_rot"), t.at(1, "omnet_iso_rot"));
  EXPECT_GT(t.at(2, "icp_iso_rot"), t.at(0, "icp_iso_rot"));
}
