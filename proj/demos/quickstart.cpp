// End-to-end walk through the library: scripted demonstrations, oracle
// labels, mirror augmentation, two training recipes, closed-loop evaluation.

#include <cstdio>

#include "reneg/backseat.hpp"
#include "reneg/evaluation.hpp"

using namespace reneg;

int main() {
  const auto track = sim::default_track();

  // Five minutes of each behavior at 2 Hz.
  std::vector<demo::BudgetItem> budget;
  for (auto r : {demo::Regime::optimal, demo::Regime::swerve_left, demo::Regime::swerve_right,
                 demo::Regime::lane_change_left, demo::Regime::lane_change_right}) {
    budget.push_back({r, 300.0});
  }
  const auto log = demo::collect(track, budget, 2.0, 1);
  const auto labeled = backseat::label_with_oracle(log);
  const auto [train_set, val_set] = data::split(data::augment_mirror(labeled.dataset), 0.85, 7);
  std::printf("%zu demonstrations, %zu training and %zu validation samples\n", log.entries.size(), train_set.size(),
              val_set.size());

  train::TrainConfig base;
  base.learning_rate = 1e-3;
  base.hidden = {32, 16};
  eval::EvalConfig ec;
  ec.max_time = 60.0;

  for (const char* name : {"scalar", "bc"}) {
    const auto spec = eval::model_preset(name, base);
    const auto trained = train::train_policy(train_set, val_set, spec.train, 0);
    const auto result = eval::evaluate(eval::pnet_policy(trained.params), track, ec, name);
    std::printf("%-7s cloning error %6.2f deg   time lasted %6.2f s (min %.2f, max %.2f, %zu/%d censored)\n", name,
                trained.report.epochs.back().cloning_error, result.mean, result.min, result.max,
                result.censored_count(), ec.trials);
  }
}
