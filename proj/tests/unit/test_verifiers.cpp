#include <algorithm>
#include <numeric>

#include "doctest.h"
#include "rapo/errors.hpp"
#include "rapo/rng.hpp"
#include "rapo/verifiers.hpp"

using namespace rapo;

namespace {

Box box(const char* cat, int x1, int y1, int x2, int y2) { return *make_box(cat, x1, y1, x2, y2); }

std::string det(const std::string& answer) { return "<think>look</think> <answer>" + answer + "</answer>"; }

}  // namespace

TEST_CASE("format check") {
  CHECK(check_format("<think>x</think> <answer>cat</answer>", TaskKind::kClassification) == 1.0);
  CHECK(check_format("  <think></think><answer>cat</answer>\n", TaskKind::kClassification) == 1.0);
  CHECK(check_format("<answer>cat</answer>", TaskKind::kClassification) == 0.0);
  CHECK(check_format("<think>x</think> <answer></answer>", TaskKind::kClassification) == 0.0);
  CHECK(check_format("<think>x <answer>cat</answer></think>", TaskKind::kClassification) == 0.0);
  CHECK(check_format("<think>x</think> <answer>cat", TaskKind::kClassification) == 0.0);
  CHECK(check_format(det("not json"), TaskKind::kDetection) == 0.5);
  CHECK(check_format(det("[]"), TaskKind::kDetection) == 1.0);
  CHECK(check_format(det("{\"a\": 1}"), TaskKind::kDetection) == 0.5);
  CHECK(check_format("[]", TaskKind::kDetection) == 0.0);
  CHECK(check_format(det("x"), TaskKind::kDetection, 0.25) == 0.25);
}

TEST_CASE("name normalization") {
  CHECK(normalize_name("Great_Pyrenees") == "great pyrenees");
  CHECK(normalize_name("a.b-c") == "a b c");
  CHECK(normalize_name("cat") == "cat");
  CHECK(normalize_name("  Big   __Dog. ") == "big dog");
  CHECK(normalize_name("") == "");
}

TEST_CASE("classification reward") {
  const std::set<std::string> vocab{"CLASS_3", "CLASS_4"};
  auto r = classification_reward("<think>a</think> <answer>class_3</answer>", "CLASS_3", vocab);
  CHECK(*r.r_acc == 1.0);
  CHECK(r.r_fmt == 1.0);
  CHECK(r.r_task == 2.0);
  CHECK_FALSE(r.r_ret.has_value());

  r = classification_reward("<answer>CLASS_3</answer>", "CLASS_3", vocab);
  CHECK(*r.r_acc == 1.0);
  CHECK(r.r_fmt == 0.0);
  CHECK(r.r_task == 1.0);

  r = classification_reward("<think>a</think> <answer>CLASS_4</answer>", "CLASS_3", vocab);
  CHECK(*r.r_acc == 0.0);
  r = classification_reward("garbage", "CLASS_3", vocab);
  CHECK(r.r_task == 0.0);
  CHECK_THROWS_AS(classification_reward("x", "CLASS_9", vocab), InputError);
}

TEST_CASE("iou") {
  CHECK(iou(box("a", 0, 0, 10, 10), box("a", 0, 0, 10, 10)) == 1.0);
  CHECK(iou(box("a", 0, 0, 10, 10), box("a", 5, 5, 15, 15)) == doctest::Approx(25.0 / 175.0).epsilon(1e-15));
  CHECK(iou(box("a", 0, 0, 10, 10), box("a", 10, 0, 20, 10)) == 0.0);
  CHECK_FALSE(make_box("a", 5, 0, 5, 10).has_value());
  CHECK_FALSE(make_box("a", 0, 0, 1001, 10).has_value());
}

TEST_CASE("matching") {
  const std::vector<Box> gt{box("cat", 0, 0, 10, 10), box("dog", 50, 50, 80, 80)};
  auto m = match_boxes(gt, gt);
  CHECK(m == std::vector<std::pair<int, int>>{{0, 0}, {1, 1}});
  CHECK(matching_score(gt, gt, m) == 2.0);

  const std::vector<Box> wrong{box("car", 0, 0, 10, 10), box("bus", 50, 50, 80, 80)};
  CHECK(matching_score(wrong, gt, match_boxes(wrong, gt)) == 0.0);

  // A greedy pick of the single best pair is not optimal here.
  const std::vector<std::vector<double>> score{{0.9, 0.8}, {0.7, 0.0}};
  CHECK(max_score_assignment(score) == std::vector<std::pair<int, int>>{{0, 1}, {1, 0}});
  // Ties resolve to the lexicographically smallest assignment.
  const std::vector<std::vector<double>> tied{{0.5, 0.5}, {0.5, 0.5}};
  CHECK(max_score_assignment(tied) == std::vector<std::pair<int, int>>{{0, 0}, {1, 1}});
  CHECK(max_score_assignment({}).empty());
  CHECK_THROWS_AS(max_score_assignment({{1.0}, {1.0, 2.0}}), InputError);
}

TEST_CASE("matching equals brute force on small random instances") {
  Rng rng(17);
  const char* cats[] = {"a", "b"};
  for (int k = 0; k < 300; ++k) {
    std::vector<Box> pred(rng.below(5)), gt(rng.below(5));
    for (auto* list : {&pred, &gt})
      for (Box& b : *list) {
        const int x = static_cast<int>(rng.below(40)), y = static_cast<int>(rng.below(40));
        b = box(cats[rng.below(2)], x, y, x + 5 + static_cast<int>(rng.below(30)),
                y + 5 + static_cast<int>(rng.below(30)));
      }
    const std::size_t n = std::max(pred.size(), gt.size());
    std::vector<int> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    double best = 0.0;
    do {
      double total = 0.0;
      for (std::size_t i = 0; i < pred.size(); ++i) {
        const auto j = static_cast<std::size_t>(perm[i]);
        if (j < gt.size() && pred[i].category == gt[j].category) total += iou(pred[i], gt[j]);
      }
      best = std::max(best, total);
    } while (std::next_permutation(perm.begin(), perm.end()));
    const auto m = match_boxes(pred, gt);
    CHECK(matching_score(pred, gt, m) == best);
    std::vector<int> used_p, used_g;
    for (auto [p, g] : m) used_p.push_back(p), used_g.push_back(g);
    std::sort(used_p.begin(), used_p.end());
    std::sort(used_g.begin(), used_g.end());
    CHECK(std::adjacent_find(used_p.begin(), used_p.end()) == used_p.end());
    CHECK(std::adjacent_find(used_g.begin(), used_g.end()) == used_g.end());
  }
}

TEST_CASE("detection answer parsing") {
  auto boxes = parse_detection_answer(
      R"([{"category": "Great_Pyrenees", "bbox": [0.4, 0, 10.6, 1200]},
          {"category": "cat", "bbox": [5, 5, 5, 9]},
          {"category": "cat", "bbox": [1, 2, "x", 4]},
          {"bbox": [1, 2, 3, 4]},
          {"category": "cat", "bbox": [1, 2, 3, 4]}])");
  REQUIRE(boxes.has_value());
  REQUIRE(boxes->size() == 2);
  CHECK((*boxes)[0].category == "great pyrenees");
  CHECK((*boxes)[0].x1 == 0);
  CHECK((*boxes)[0].x2 == 11);
  CHECK((*boxes)[0].y2 == 1000);
  CHECK_FALSE(parse_detection_answer("not json").has_value());
  CHECK_FALSE(parse_detection_answer("{}").has_value());
}

TEST_CASE("detection reward") {
  const std::set<std::string> vocab{"cat", "dog"};
  const std::vector<Box> gt{box("cat", 0, 0, 10, 10)};

  auto r = detection_reward(det(R"([{"category": "cat", "bbox": [0, 0, 10, 6]}])"), gt, vocab);
  CHECK(*r.r_iou == doctest::Approx(0.6));
  CHECK(*r.r_cls == 1.0);
  CHECK(r.r_fmt == 1.0);
  CHECK(r.r_task == doctest::Approx(2.6));

  const std::string one = R"({"category": "cat", "bbox": [0, 0, 10, 6]})";
  r = detection_reward(det("[" + one + "," + one + "," + one + "]"), gt, vocab);
  CHECK(*r.r_iou == doctest::Approx(0.2));
  CHECK(*r.r_cls == doctest::Approx(1.0 / 3.0));

  r = detection_reward(det("[]"), gt, vocab);
  CHECK(*r.r_iou == 0.0);
  CHECK(*r.r_cls == 0.0);
  CHECK(r.r_fmt == 1.0);

  r = detection_reward(det("oops"), gt, vocab);
  CHECK(*r.r_iou == 0.0);
  CHECK(r.r_fmt == 0.5);

  // Below the 0.5 threshold the pair still counts toward r_iou.
  r = detection_reward(det(R"([{"category": "CAT", "bbox": [0, 0, 10, 3]}])"), gt, vocab);
  CHECK(*r.r_iou == doctest::Approx(0.3));
  CHECK(*r.r_cls == 0.0);

  CHECK_THROWS_AS(detection_reward(det("[]"), {}, vocab), InputError);
  CHECK_THROWS_AS(detection_reward(det("[]"), {box("bird", 0, 0, 1, 1)}, vocab), InputError);
}

TEST_CASE("detection reward is order invariant and bounded; duplicates never help one object") {
  Rng rng(23);
  const std::set<std::string> vocab{"cat", "dog"};
  const char* cats[] = {"cat", "dog"};
  auto rec = [](const Box& b) {
    return "{\"category\": \"" + b.category + "\", \"bbox\": [" + std::to_string(b.x1) + "," +
           std::to_string(b.y1) + "," + std::to_string(b.x2) + "," + std::to_string(b.y2) + "]}";
  };
  auto list = [&](const std::vector<Box>& v) {
    std::string s = "[";
    for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + rec(v[i]);
    return s + "]";
  };
  for (int k = 0; k < 200; ++k) {
    std::vector<Box> gt(1 + rng.below(3)), pred(1 + rng.below(4));
    for (auto* v : {&gt, &pred})
      for (Box& b : *v) {
        const int x = static_cast<int>(rng.below(50)), y = static_cast<int>(rng.below(50));
        b = box(cats[rng.below(2)], x, y, x + 10 + static_cast<int>(rng.below(20)),
                y + 10 + static_cast<int>(rng.below(20)));
      }
    const auto base = detection_reward(det(list(pred)), gt, vocab);
    CHECK(base.r_task >= 0.0);
    CHECK(base.r_task <= kMaxDetectionReward);
    std::vector<Box> rev(pred.rbegin(), pred.rend());
    const auto flipped = detection_reward(det(list(rev)), gt, vocab);
    CHECK(flipped.r_task == doctest::Approx(base.r_task).epsilon(1e-12));
    std::vector<Box> dup = pred;
    dup.push_back(pred[rng.below(pred.size())]);
    const auto more = detection_reward(det(list(dup)), {gt[0]}, vocab);
    const auto single = detection_reward(det(list(pred)), {gt[0]}, vocab);
    CHECK(*more.r_iou + *more.r_cls <= *single.r_iou + *single.r_cls + 1e-12);
  }
}

TEST_CASE("a duplicate can reach a second unmatched object") {
  const std::set<std::string> vocab{"cat"};
  const std::vector<Box> gt{box("cat", 0, 0, 10, 10), box("cat", 1, 1, 11, 11)};
  const std::string one = R"({"category": "cat", "bbox": [0, 0, 10, 10]})";
  const auto a = detection_reward(det("[" + one + "]"), gt, vocab);
  const auto b = detection_reward(det("[" + one + "," + one + "]"), gt, vocab);
  CHECK(*b.r_iou + *b.r_cls > *a.r_iou + *a.r_cls);
}
