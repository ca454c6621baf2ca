#pragma once

#include <optional>

namespace rapo {

/// Per-rollout reward components. Classification fills r_acc; detection fills
/// r_iou and r_cls. r_ret is present only when the retention reward was
/// computed for the rollout.
struct RewardBreakdown {
  std::optional<double> r_acc;
  std::optional<double> r_iou;
  std::optional<double> r_cls;
  double r_fmt = 0.0;
  double r_task = 0.0;
  std::optional<double> r_ret;
  double r_total = 0.0;
};

}  // namespace rapo
