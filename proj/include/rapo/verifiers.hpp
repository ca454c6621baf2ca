#pragma once

// Verifiable task rewards computed on response text.

#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "rapo/reward.hpp"

namespace rapo {

enum class TaskKind { kClassification, kDetection };

/// Credit for detection answers whose tags are valid but whose answer span is
/// not a JSON list.
inline constexpr double kPartialFormatCredit = 0.5;

/// Largest task reward per kind.
inline constexpr double kMaxClassificationReward = 2.0;
inline constexpr double kMaxDetectionReward = 3.0;

struct Box {
  std::string category;  // normalized
  int x1 = 0, y1 = 0, x2 = 0, y2 = 0;

  int area() const { return (x2 - x1) * (y2 - y1); }
};

/// Returns nullopt for degenerate boxes (x2 <= x1 or y2 <= y1) or corners
/// outside [0, 1000].
std::optional<Box> make_box(std::string_view category, int x1, int y1, int x2, int y2);

/// Lower-case, map '_', '-', '.' to spaces, trim, collapse whitespace runs.
std::string normalize_name(std::string_view name);

/// Text between the first "<answer>" and the following "</answer>".
std::optional<std::string> extract_answer(std::string_view text);

/// Format credit in [0, 1]. Classification: 1 iff the text is exactly
/// <think>..</think> <answer>..</answer> (surrounding whitespace allowed) with a
/// non-empty answer. Detection: 1 if additionally the answer is a JSON list,
/// kPartialFormatCredit if tags are fine but the JSON is not, else 0.
double check_format(std::string_view text, TaskKind kind,
                    double partial_credit = kPartialFormatCredit);

/// r_acc + r_fmt. Throws InputError when gold is not in the vocabulary.
RewardBreakdown classification_reward(std::string_view text, std::string_view gold,
                                      const std::set<std::string>& vocab);

double iou(const Box& a, const Box& b);

/// Maximum-weight one-to-one assignment between rows and columns of a
/// non-negative score matrix (rows may differ from columns). Among optimal
/// assignments the lexicographically smallest (row, col) list is returned.
/// Only pairs with positive score are reported, sorted by row.
std::vector<std::pair<int, int>> max_score_assignment(
    const std::vector<std::vector<double>>& score);

/// Hungarian matching of predictions to ground truth where same-category
/// pairs score their IoU and all other pairs score zero. Pairs are
/// (pred index, gt index).
std::vector<std::pair<int, int>> match_boxes(const std::vector<Box>& pred,
                                             const std::vector<Box>& gt);

/// Sum of matched scores in ascending pred order.
double matching_score(const std::vector<Box>& pred, const std::vector<Box>& gt,
                      const std::vector<std::pair<int, int>>& assignment);

/// Parses a detection answer span: a JSON list of {"category", "bbox"}
/// records. Records with missing or non-numeric fields are skipped, boxes
/// are rounded, clipped to [0, 1000] and dropped when degenerate. Returns
/// nullopt when the span is not a JSON list.
std::optional<std::vector<Box>> parse_detection_answer(std::string_view answer);

/// r_iou + r_cls + r_fmt. Throws InputError when gt is empty or uses a
/// category outside the vocabulary.
RewardBreakdown detection_reward(std::string_view text, const std::vector<Box>& gt,
                                 const std::set<std::string>& vocab,
                                 double partial_credit = kPartialFormatCredit);

}  // namespace rapo
