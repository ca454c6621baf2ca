#include "rapo/verifiers.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <limits>

#include <nlohmann/json.hpp>

#include "rapo/errors.hpp"

namespace rapo {

namespace {

constexpr std::string_view kThinkOpen = "<think>";
constexpr std::string_view kThinkClose = "</think>";
constexpr std::string_view kAnswerOpen = "<answer>";
constexpr std::string_view kAnswerClose = "</answer>";

bool is_space(char c) { return std::isspace(static_cast<unsigned char>(c)) != 0; }

std::string_view trim(std::string_view s) {
  while (!s.empty() && is_space(s.front())) s.remove_prefix(1);
  while (!s.empty() && is_space(s.back())) s.remove_suffix(1);
  return s;
}

bool contains_tag(std::string_view s) {
  for (auto tag : {kThinkOpen, kThinkClose, kAnswerOpen, kAnswerClose})
    if (s.find(tag) != std::string_view::npos) return true;
  return false;
}

// Returns the answer span when the think/answer structure is complete and
// well nested, nullopt otherwise.
std::optional<std::string_view> structured_answer(std::string_view text) {
  std::string_view rest = trim(text);
  if (!rest.starts_with(kThinkOpen)) return std::nullopt;
  rest.remove_prefix(kThinkOpen.size());
  const auto think_end = rest.find(kThinkClose);
  if (think_end == std::string_view::npos) return std::nullopt;
  if (contains_tag(rest.substr(0, think_end))) return std::nullopt;
  rest.remove_prefix(think_end + kThinkClose.size());
  rest = trim(rest);
  if (!rest.starts_with(kAnswerOpen)) return std::nullopt;
  rest.remove_prefix(kAnswerOpen.size());
  const auto answer_end = rest.find(kAnswerClose);
  if (answer_end == std::string_view::npos) return std::nullopt;
  const std::string_view answer = rest.substr(0, answer_end);
  if (contains_tag(answer) || trim(answer).empty()) return std::nullopt;
  if (!trim(rest.substr(answer_end + kAnswerClose.size())).empty()) return std::nullopt;
  return answer;
}

std::set<std::string> normalized_set(const std::set<std::string>& vocab) {
  std::set<std::string> out;
  for (const auto& v : vocab) out.insert(normalize_name(v));
  return out;
}

// Minimum-cost perfect matching on a square matrix (potentials method).
// Returns row -> column.
std::vector<int> min_cost_square(const std::vector<std::vector<double>>& cost) {
  const int n = static_cast<int>(cost.size());
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0);
  std::vector<int> p(n + 1, 0), way(n + 1, 0);
  for (int i = 1; i <= n; ++i) {
    p[0] = i;
    int j0 = 0;
    std::vector<double> minv(n + 1, inf);
    std::vector<char> used(n + 1, 0);
    do {
      used[j0] = 1;
      const int i0 = p[j0];
      double delta = inf;
      int j1 = 0;
      for (int j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (int j = 0; j <= n; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const int j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<int> row_to_col(n, -1);
  for (int j = 1; j <= n; ++j)
    if (p[j] != 0) row_to_col[p[j] - 1] = j - 1;
  return row_to_col;
}

// Optimal total over the given row and column subsets.
double best_total(const std::vector<std::vector<double>>& score, const std::vector<int>& rows,
                  const std::vector<int>& cols) {
  if (rows.empty() || cols.empty()) return 0.0;
  const std::size_t n = std::max(rows.size(), cols.size());
  std::vector<std::vector<double>> cost(n, std::vector<double>(n, 0.0));
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t j = 0; j < cols.size(); ++j) cost[i][j] = -score[rows[i]][cols[j]];
  const auto assign = min_cost_square(cost);
  double total = 0.0;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const int j = assign[i];
    if (j >= 0 && static_cast<std::size_t>(j) < cols.size()) total += score[rows[i]][cols[j]];
  }
  return total;
}

}  // namespace

std::optional<Box> make_box(std::string_view category, int x1, int y1, int x2, int y2) {
  for (int c : {x1, y1, x2, y2})
    if (c < 0 || c > 1000) return std::nullopt;
  if (x2 <= x1 || y2 <= y1) return std::nullopt;
  return Box{normalize_name(category), x1, y1, x2, y2};
}

std::string normalize_name(std::string_view name) {
  std::string out;
  out.reserve(name.size());
  bool pending_space = false;
  for (char ch : name) {
    char c = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
    if (c == '_' || c == '-' || c == '.' || is_space(c)) {
      pending_space = !out.empty();
      continue;
    }
    if (pending_space) out.push_back(' ');
    pending_space = false;
    out.push_back(c);
  }
  return out;
}

std::optional<std::string> extract_answer(std::string_view text) {
  const auto open = text.find(kAnswerOpen);
  if (open == std::string_view::npos) return std::nullopt;
  const auto start = open + kAnswerOpen.size();
  const auto close = text.find(kAnswerClose, start);
  if (close == std::string_view::npos) return std::nullopt;
  return std::string(text.substr(start, close - start));
}

double check_format(std::string_view text, TaskKind kind, double partial_credit) {
  const auto answer = structured_answer(text);
  if (!answer) return 0.0;
  if (kind == TaskKind::kClassification) return 1.0;
  return parse_detection_answer(*answer) ? 1.0 : partial_credit;
}

RewardBreakdown classification_reward(std::string_view text, std::string_view gold,
                                      const std::set<std::string>& vocab) {
  const std::string gold_norm = normalize_name(gold);
  if (!normalized_set(vocab).contains(gold_norm))
    throw InputError("gold class '" + std::string(gold) + "' is not in the vocabulary");
  RewardBreakdown r;
  const auto answer = extract_answer(text);
  r.r_acc = (answer && normalize_name(*answer) == gold_norm) ? 1.0 : 0.0;
  r.r_fmt = check_format(text, TaskKind::kClassification);
  r.r_task = *r.r_acc + r.r_fmt;
  r.r_total = r.r_task;
  return r;
}

double iou(const Box& a, const Box& b) {
  const int ix = std::max(0, std::min(a.x2, b.x2) - std::max(a.x1, b.x1));
  const int iy = std::max(0, std::min(a.y2, b.y2) - std::max(a.y1, b.y1));
  const double inter = static_cast<double>(ix) * static_cast<double>(iy);
  const double uni = static_cast<double>(a.area()) + static_cast<double>(b.area()) - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

std::vector<std::pair<int, int>> max_score_assignment(
    const std::vector<std::vector<double>>& score) {
  const int n_rows = static_cast<int>(score.size());
  const int n_cols = n_rows > 0 ? static_cast<int>(score[0].size()) : 0;
  for (const auto& row : score) {
    if (static_cast<int>(row.size()) != n_cols) throw InputError("ragged score matrix");
    for (double s : row)
      if (!(s >= 0.0) || !std::isfinite(s)) throw InputError("scores must be finite and >= 0");
  }
  std::vector<int> rows(n_rows), cols(n_cols);
  for (int i = 0; i < n_rows; ++i) rows[i] = i;
  for (int j = 0; j < n_cols; ++j) cols[j] = j;
  const double optimum = best_total(score, rows, cols);
  const double tol = 1e-9 * std::max(1.0, optimum);

  // Fix rows in order to the smallest column that still admits an optimal
  // completion; this yields the lexicographically smallest optimum.
  std::vector<std::pair<int, int>> result;
  double fixed = 0.0;
  for (int r = 0; r < n_rows; ++r) {
    std::vector<int> later(rows.begin() + r + 1, rows.end());
    for (std::size_t k = 0; k < cols.size(); ++k) {
      const int c = cols[k];
      if (score[r][c] <= 0.0) continue;
      std::vector<int> rest = cols;
      rest.erase(rest.begin() + static_cast<std::ptrdiff_t>(k));
      if (fixed + score[r][c] + best_total(score, later, rest) >= optimum - tol) {
        result.emplace_back(r, c);
        fixed += score[r][c];
        cols = std::move(rest);
        break;
      }
    }
  }
  return result;
}

std::vector<std::pair<int, int>> match_boxes(const std::vector<Box>& pred,
                                             const std::vector<Box>& gt) {
  std::vector<std::vector<double>> score(pred.size(), std::vector<double>(gt.size(), 0.0));
  for (std::size_t i = 0; i < pred.size(); ++i)
    for (std::size_t j = 0; j < gt.size(); ++j)
      if (normalize_name(pred[i].category) == normalize_name(gt[j].category))
        score[i][j] = iou(pred[i], gt[j]);
  return max_score_assignment(score);
}

double matching_score(const std::vector<Box>& pred, const std::vector<Box>& gt,
                      const std::vector<std::pair<int, int>>& assignment) {
  auto sorted = assignment;
  std::sort(sorted.begin(), sorted.end());
  double total = 0.0;
  for (auto [p, g] : sorted)
    if (normalize_name(pred[p].category) == normalize_name(gt[g].category))
      total += iou(pred[p], gt[g]);
  return total;
}

std::optional<std::vector<Box>> parse_detection_answer(std::string_view answer) {
  const auto doc = nlohmann::json::parse(answer.begin(), answer.end(), nullptr, false);
  if (doc.is_discarded() || !doc.is_array()) return std::nullopt;
  std::vector<Box> boxes;
  for (const auto& rec : doc) {
    if (!rec.is_object()) continue;
    const auto cat = rec.find("category");
    const auto bbox = rec.find("bbox");
    if (cat == rec.end() || bbox == rec.end() || !cat->is_string() || !bbox->is_array() ||
        bbox->size() != 4)
      continue;
    int coords[4];
    bool ok = true;
    for (std::size_t k = 0; k < 4; ++k) {
      const auto& v = (*bbox)[k];
      if (!v.is_number()) {
        ok = false;
        break;
      }
      const double x = v.get<double>();
      if (!std::isfinite(x)) {
        ok = false;
        break;
      }
      coords[k] = static_cast<int>(std::clamp(std::round(x), 0.0, 1000.0));
    }
    if (!ok) continue;
    if (auto box = make_box(cat->get<std::string>(), coords[0], coords[1], coords[2], coords[3]))
      boxes.push_back(std::move(*box));
  }
  return boxes;
}

RewardBreakdown detection_reward(std::string_view text, const std::vector<Box>& gt,
                                 const std::set<std::string>& vocab, double partial_credit) {
  if (gt.empty()) throw InputError("detection reward needs at least one ground-truth box");
  const auto vocab_norm = normalized_set(vocab);
  for (const auto& g : gt)
    if (!vocab_norm.contains(normalize_name(g.category)))
      throw InputError("ground-truth category '" + g.category + "' is not in the vocabulary");

  RewardBreakdown r;
  r.r_iou = 0.0;
  r.r_cls = 0.0;
  r.r_fmt = check_format(text, TaskKind::kDetection, partial_credit);
  const auto answer = extract_answer(text);
  const auto pred = answer ? parse_detection_answer(*answer) : std::nullopt;
  if (pred) {
    const auto pairs = match_boxes(*pred, gt);
    const double denom = static_cast<double>(std::max(pred->size(), gt.size()));
    double iou_sum = 0.0;
    std::size_t hits = 0;
    for (auto [p, g] : pairs) {
      const double v = iou((*pred)[p], gt[g]);
      iou_sum += v;
      if (v >= 0.5) ++hits;
    }
    r.r_iou = iou_sum / denom;
    r.r_cls = static_cast<double>(hits) / denom;
  }
  r.r_task = *r.r_iou + *r.r_cls + r.r_fmt;
  r.r_total = r.r_task;
  return r;
}

}  // namespace rapo
