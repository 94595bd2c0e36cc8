#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "detq/boxes.hpp"
#include "detq/map_eval.hpp"
#include "detq/rng.hpp"

using namespace detq;

namespace {

Box make_box(double x1, double y1, double x2, double y2, int cls = 0, double score = 0) {
  Box b;
  b.x1 = x1;
  b.y1 = y1;
  b.x2 = x2;
  b.y2 = y2;
  b.class_id = cls;
  b.score = score;
  return b;
}

// Independent O(n^2) reference: rescan the full alive set every round.
std::vector<int> nms_bruteforce(const std::vector<Box>& boxes, double thr) {
  std::vector<bool> alive(boxes.size(), true);
  std::vector<int> kept;
  while (true) {
    int best = -1;
    for (size_t i = 0; i < boxes.size(); ++i) {
      if (!alive[i]) continue;
      if (best < 0 || boxes[i].score > boxes[size_t(best)].score) best = int(i);
    }
    if (best < 0) break;
    kept.push_back(best);
    alive[size_t(best)] = false;
    for (size_t j = 0; j < boxes.size(); ++j)
      if (alive[j] && iou(boxes[size_t(best)], boxes[j]) > thr) alive[j] = false;
  }
  return kept;
}

std::vector<Box> random_boxes(Rng& rng, int n) {
  std::vector<Box> out;
  for (int i = 0; i < n; ++i) {
    double x1 = rng.uniform(0, 50);
    double y1 = rng.uniform(0, 50);
    Box b = make_box(x1, y1, x1 + rng.uniform(2, 20), y1 + rng.uniform(2, 20));
    b.score = rng.uniform(0, 1);
    out.push_back(b);
  }
  return out;
}

}  // namespace

TEST_CASE("iou hand geometry") {
  Box a = make_box(0, 0, 1, 1);
  CHECK(iou(a, a) == doctest::Approx(1.0));
  CHECK(iou(a, make_box(5, 5, 6, 6)) == 0.0);
  CHECK(iou(a, make_box(0.5, 0, 1.5, 1)) == doctest::Approx(1.0 / 3.0));
}

TEST_CASE("nms basics") {
  std::vector<Box> one{make_box(0, 0, 1, 1, 0, 0.7)};
  CHECK(nms(one, 0.5) == std::vector<int>{0});

  std::vector<Box> two{make_box(0, 0, 1, 1, 0, 0.9), make_box(0, 0, 1, 1, 0, 0.8)};
  CHECK(nms(two, 0.5) == std::vector<int>{0});

  CHECK(nms({}, 0.5).empty());

  // equal scores break toward the lower index
  std::vector<Box> tie{make_box(0, 0, 1, 1, 0, 0.5), make_box(0, 0, 1, 1, 0, 0.5)};
  CHECK(nms(tie, 0.5) == std::vector<int>{0});
}

TEST_CASE("nms equals brute force on random instances") {
  for (uint64_t t = 0; t < 1000; ++t) {
    Rng rng(derive_seed(2024, "nms", t));
    int n = int(rng.uniform_int(0, 50));
    auto boxes = random_boxes(rng, n);
    auto fast = nms(boxes, 0.5);
    auto ref = nms_bruteforce(boxes, 0.5);
    REQUIRE(fast == ref);
    // kept set is pairwise below the threshold
    for (size_t i = 0; i < fast.size(); ++i)
      for (size_t j = i + 1; j < fast.size(); ++j)
        CHECK(iou(boxes[size_t(fast[i])], boxes[size_t(fast[j])]) <= 0.5);
  }
}

TEST_CASE("anchor generation layout") {
  auto anchors = generate_level_anchors(8, 2, 3, {10, 20});
  REQUIRE(anchors.size() == 2 * 3 * 2);
  // first anchor: cell (0,0), size 10, centred at (4,4)
  CHECK(anchors[0].cx() == doctest::Approx(4.0));
  CHECK(anchors[0].width() == doctest::Approx(10.0));
  // row-major cells, size-minor
  CHECK(anchors[1].width() == doctest::Approx(20.0));
  CHECK(anchors[2].cx() == doctest::Approx(12.0));
}

TEST_CASE("box coding identity and analytic cases") {
  Box anchor = make_box(10, 10, 30, 30);
  double zero[4] = {0, 0, 0, 0};
  Box same = decode_box(zero, anchor, 64, 64);
  CHECK(same.x1 == doctest::Approx(10));
  CHECK(same.y2 == doctest::Approx(30));

  double grow[4] = {0, 0, std::log(2.0), 0};
  Box wide = decode_box(grow, anchor, 200, 200);
  CHECK(wide.width() == doctest::Approx(40.0));
  CHECK(wide.height() == doctest::Approx(20.0));

  double bad[4] = {0, 0, std::nan(""), 0};
  CHECK_THROWS_AS(decode_box(bad, anchor, 64, 64), Error);
}

TEST_CASE("decode(encode(box)) round trip") {
  Rng rng(88);
  Box anchor = make_box(12, 20, 36, 44);
  for (int t = 0; t < 200; ++t) {
    double x1 = rng.uniform(1, 40);
    double y1 = rng.uniform(1, 40);
    Box gt = make_box(x1, y1, x1 + rng.uniform(3, 22), y1 + rng.uniform(3, 22));
    auto off = encode_box(gt, anchor);
    Box back = decode_box(off.data(), anchor, 64, 64);
    CHECK(std::fabs(back.x1 - gt.x1) < 1e-6);
    CHECK(std::fabs(back.y1 - gt.y1) < 1e-6);
    CHECK(std::fabs(back.x2 - gt.x2) < 1e-6);
    CHECK(std::fabs(back.y2 - gt.y2) < 1e-6);
  }
}

TEST_CASE("mAP trivial endpoints") {
  std::vector<std::vector<Box>> gt{{make_box(5, 5, 20, 20, 1)}};
  std::vector<std::vector<Box>> perfect{{make_box(5, 5, 20, 20, 1, 1.0)}};
  CHECK(evaluate_map(perfect, gt).map == doctest::Approx(1.0));

  std::vector<std::vector<Box>> none{{}};
  CHECK(evaluate_map(none, gt).map == doctest::Approx(0.0));

  std::vector<std::vector<Box>> empty_gt{{}};
  CHECK_THROWS_AS(evaluate_map(none, empty_gt), Error);
}

TEST_CASE("mAP matches hand-computed precision-recall staircase") {
  // one image, three ground-truth boxes, one false positive ranked second
  std::vector<std::vector<Box>> gt{{make_box(0, 0, 10, 10, 0), make_box(20, 20, 30, 30, 0),
                                    make_box(40, 40, 50, 50, 0)}};
  std::vector<std::vector<Box>> det{{
      make_box(0, 0, 10, 10, 0, 0.9),    // TP
      make_box(60, 0, 62, 2, 0, 0.8),    // FP, overlaps nothing
      make_box(20, 20, 30, 30, 0, 0.7),  // TP
  }};
  // envelope precisions: 1 for recall <= 1/3, 2/3 up to recall 2/3
  // AP = (34 * 1 + 33 * 2/3) / 101
  double expect = (34.0 + 33.0 * 2.0 / 3.0) / 101.0;
  CHECK(evaluate_map(det, gt).map == doctest::Approx(expect).epsilon(1e-12));
}

TEST_CASE("mAP with two classes averages per-class AP") {
  std::vector<std::vector<Box>> gt{
      {make_box(0, 0, 10, 10, 0), make_box(20, 20, 30, 30, 1)}};
  std::vector<std::vector<Box>> det{{
      make_box(0, 0, 10, 10, 0, 0.9),   // class 0 TP
      make_box(50, 50, 55, 55, 1, 0.8)  // class 1 FP
  }};
  CHECK(evaluate_map(det, gt).map == doctest::Approx(0.5));
}

TEST_CASE("duplicate lower-scored detection never lifts mAP past 1") {
  std::vector<std::vector<Box>> gt{{make_box(0, 0, 10, 10, 0)}};
  std::vector<std::vector<Box>> det{{
      make_box(0, 0, 10, 10, 0, 0.9),
      make_box(0.5, 0.5, 10, 10, 0, 0.8),  // duplicate of the same object
  }};
  auto res = evaluate_map(det, gt);
  CHECK(res.map == doctest::Approx(1.0));
}

TEST_CASE("mAP over multiple IoU thresholds") {
  std::vector<std::vector<Box>> gt{{make_box(0, 0, 10, 10, 0)}};
  // IoU with GT = 0.6: counts at 0.5, misses at 0.75
  std::vector<std::vector<Box>> det{{make_box(0, 0, 10, 13.34, 0, 0.9)}};
  double at_05 = evaluate_map(det, gt, {0.5}).map;
  double at_075 = evaluate_map(det, gt, {0.75}).map;
  CHECK(at_05 == doctest::Approx(1.0));
  CHECK(at_075 == doctest::Approx(0.0));
  CHECK(evaluate_map(det, gt, {0.5, 0.75}).map == doctest::Approx(0.5));
}
