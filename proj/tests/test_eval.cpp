#include <algorithm>
#include <random>

#include "doctest.h"
#include "dysp/error.hpp"
#include "dysp/eval.hpp"

using namespace dysp;
using namespace dysp::eval;

namespace {

// `rois` horizontal bands with ids 1..rois; a border row of id 0 on top.
wsi::GroundTruth banded(std::size_t w, std::size_t h, std::size_t rois) {
  wsi::GroundTruth gt;
  gt.mask = Mask(w, h, 1, 0);
  gt.roi.assign(w * h, 0);
  gt.roi_count = rois;
  for (std::size_t y = 1; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) gt.roi[y * w + x] = static_cast<int>(1 + (y - 1) * rois / (h - 1));
  return gt;
}

RoiConfusion counts(std::size_t tp, std::size_t fp, std::size_t fn, std::size_t tn) {
  RoiConfusion c;
  c.roi = 1;
  c.tp = tp;
  c.fp = fp;
  c.fn = fn;
  c.tn = tn;
  c.cls = tp + fn > 0 ? RoiClass::Case : RoiClass::Control;
  return c;
}

}  // namespace

TEST_CASE("confusion counts agree with a per-pixel double loop") {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    auto gt = banded(64, 64, 1 + trial % 4);
    Mask pred(64, 64, 1, 0);
    std::bernoulli_distribution coin(0.1 + 0.04 * trial);
    for (std::size_t p = 0; p < 64 * 64; ++p) {
      gt.mask.data[p] = coin(rng);
      pred.data[p] = coin(rng) ? 255 : 0;
    }
    const auto all = confuse_all(pred, gt, 1 + trial % 5);
    REQUIRE(all.size() == gt.roi_count);
    for (int r = 1; r <= static_cast<int>(gt.roi_count); ++r) {
      std::size_t tp = 0, fp = 0, fn = 0, tn = 0;
      for (std::size_t y = 0; y < 64; ++y)
        for (std::size_t x = 0; x < 64; ++x) {
          if (gt.roi[y * 64 + x] != r) continue;
          const bool p = pred.at(x, y) != 0, t = gt.mask.at(x, y) != 0;
          if (p && t) ++tp;
          if (p && !t) ++fp;
          if (!p && t) ++fn;
          if (!p && !t) ++tn;
        }
      const RoiConfusion c = confuse(pred, gt, r);
      CHECK(c.tp == tp);
      CHECK(c.fp == fp);
      CHECK(c.fn == fn);
      CHECK(c.tn == tn);
      const auto& a = all[static_cast<std::size_t>(r - 1)];
      CHECK((a.tp == tp && a.fp == fp && a.fn == fn && a.tn == tn && a.roi == r));
      CHECK(a.cls == c.cls);
    }
  }
}

TEST_CASE("confusion fixtures") {
  auto gt = banded(20, 11, 1);
  for (std::size_t x = 0; x < 10; ++x)
    for (std::size_t y = 1; y < 11; ++y) gt.mask.at(x, y) = 1;
  SUBCASE("prediction equal to truth") {
    const auto c = confuse(gt.mask, gt, 1);
    CHECK(c.fp == 0);
    CHECK(c.fn == 0);
    CHECK(c.tp == 100);
    CHECK(c.total() == 200);
    CHECK(c.cls == RoiClass::Case);
  }
  SUBCASE("empty prediction") {
    const auto c = confuse(Mask(20, 11, 1, 0), gt, 1);
    CHECK(c.tp == 0);
    CHECK(c.fn == 100);
    CHECK(c.tn == 100);
  }
  SUBCASE("pixels outside every ROI are ignored") {
    Mask pred(20, 11, 1, 0);
    for (std::size_t x = 0; x < 20; ++x) pred.at(x, 0) = 1;
    CHECK(confuse(pred, gt, 1).fp == 0);
  }
  SUBCASE("errors") {
    CHECK_THROWS_AS(confuse(gt.mask, gt, 2), ValidationError);
    CHECK_THROWS_AS(confuse(gt.mask, gt, 0), ValidationError);
    CHECK_THROWS_AS(confuse(Mask(19, 11, 1, 0), gt, 1), ValidationError);
    CHECK_THROWS_AS(confuse_all(Mask(20, 12, 1, 0), gt), ValidationError);
  }
}

TEST_CASE("case metrics on hand-counted confusions") {
  const auto half = case_metrics(counts(50, 50, 0, 900));
  CHECK(half.precision == 0.5);
  CHECK(half.recall == 1.0);
  CHECK(half.f1 == doctest::Approx(2.0 / 3.0).epsilon(1e-15));

  // one false positive pixel with nothing to find zeroes every metric
  const auto one_fp = case_metrics(counts(0, 1, 0, 9999));
  CHECK(one_fp.f1 == 0.0);
  CHECK(one_fp.recall == 0.0);
  CHECK(one_fp.precision == 0.0);

  const auto perfect = case_metrics(counts(30, 0, 0, 70));
  CHECK(perfect.f1 == 1.0);
  CHECK(perfect.recall == 1.0);
  CHECK(perfect.precision == 1.0);

  const auto missed = case_metrics(counts(0, 0, 100, 0));
  CHECK(missed.f1 == 0.0);
  CHECK(missed.recall == 0.0);
  CHECK(missed.precision == 0.0);

  const auto all_empty = case_metrics(counts(0, 0, 0, 10));
  CHECK(all_empty.f1 == 0.0);
}

TEST_CASE("control specificity") {
  CHECK(control_specificity(counts(0, 1, 0, 9999)) == 0.9999);
  CHECK(control_specificity(counts(0, 0, 0, 5)) == 1.0);
  CHECK(control_specificity(counts(0, 5, 0, 0)) == 0.0);
  CHECK_THROWS_AS(control_specificity(counts(1, 0, 0, 5)), ValidationError);
  CHECK_THROWS_AS(control_specificity(counts(0, 0, 1, 5)), ValidationError);
}

TEST_CASE("metrics stay within [0, 1]") {
  std::mt19937_64 rng(3);
  std::uniform_int_distribution<std::size_t> n(0, 50);
  for (int i = 0; i < 2000; ++i) {
    const auto c = counts(n(rng), n(rng), n(rng), n(rng));
    const auto m = case_metrics(c);
    for (double v : {m.f1, m.recall, m.precision}) {
      CHECK(v >= 0.0);
      CHECK(v <= 1.0);
    }
    if (c.cls == RoiClass::Control) {
      const double s = control_specificity(c);
      CHECK(s >= 0.0);
      CHECK(s <= 1.0);
    }
  }
}

TEST_CASE("aggregation takes the unweighted mean per class") {
  // F1 0.6 and 0.8 from 2TP / (2TP + FP + FN)
  const auto a = make_row("s1", counts(3, 4, 0, 10));
  const auto b = make_row("s2", counts(2, 1, 0, 10));
  REQUIRE(a.metrics->f1 == doctest::Approx(0.6).epsilon(1e-15));
  REQUIRE(b.metrics->f1 == doctest::Approx(0.8).epsilon(1e-15));
  auto ctrl = counts(0, 1, 0, 9999);
  const auto c = make_row("s3", ctrl);
  const auto rep = aggregate({a, b, c});
  CHECK(*rep.macro.f1 == doctest::Approx(0.7).epsilon(1e-15));
  CHECK(*rep.macro.recall == 1.0);
  CHECK(*rep.macro.specificity == 0.9999);
  CHECK(rep.macro.cases == 2);
  CHECK(rep.macro.controls == 1);
  // pooled: TP 5, FP 5, FN 0
  CHECK(*rep.micro.f1 == doctest::Approx(10.0 / 15.0).epsilon(1e-15));
  CHECK(*rep.micro.precision == 0.5);
  CHECK(*rep.micro.specificity == 0.9999);

  const auto single = aggregate({a});
  CHECK(*single.macro.f1 == a.metrics->f1);
  CHECK(*single.micro.f1 == a.metrics->f1);
  CHECK_FALSE(single.macro.specificity.has_value());
  CHECK_THROWS_AS(aggregate({}), ValidationError);
}

TEST_CASE("aggregation is invariant to row order") {
  std::mt19937_64 rng(5);
  std::uniform_int_distribution<std::size_t> n(0, 40);
  std::vector<RoiRow> rows;
  for (int i = 0; i < 12; ++i) rows.push_back(make_row("s" + std::to_string(i), counts(n(rng), n(rng), n(rng), n(rng))));
  const auto base = aggregate(rows);
  for (int k = 0; k < 10; ++k) {
    std::shuffle(rows.begin(), rows.end(), rng);
    const auto r = aggregate(rows);
    CHECK(*r.macro.f1 == doctest::Approx(*base.macro.f1).epsilon(1e-14));
    CHECK(*r.macro.precision == doctest::Approx(*base.macro.precision).epsilon(1e-14));
    CHECK(*r.micro.f1 == *base.micro.f1);
  }
}

TEST_CASE("cropping around the ROI leaves the metrics unchanged") {
  auto gt = banded(40, 30, 2);
  std::mt19937_64 rng(8);
  std::bernoulli_distribution coin(0.3);
  Mask pred(40, 30, 1, 0);
  for (std::size_t p = 0; p < pred.pixel_count(); ++p) {
    gt.mask.data[p] = coin(rng);
    pred.data[p] = coin(rng);
  }
  // rows 1..15 hold all of ROI 1 (id 1 + (y - 1) * 2 / 29)
  wsi::GroundTruth cg;
  cg.roi_count = 2;
  cg.mask = Mask(40, 15, 1, 0);
  Mask cp(40, 15, 1, 0);
  for (std::size_t y = 0; y < 15; ++y)
    for (std::size_t x = 0; x < 40; ++x) {
      cg.mask.at(x, y) = gt.mask.at(x, y + 1);
      cp.at(x, y) = pred.at(x, y + 1);
      cg.roi.push_back(gt.roi[(y + 1) * 40 + x]);
    }
  const auto full = confuse(pred, gt, 1), cropped = confuse(cp, cg, 1);
  CHECK((full.tp == cropped.tp && full.fp == cropped.fp && full.fn == cropped.fn && full.tn == cropped.tn));
}

TEST_CASE("report JSON round trip and table") {
  const auto rep = aggregate({make_row("a", counts(50, 50, 0, 900)), make_row("b", counts(0, 1, 0, 9999)),
                              make_row("c", counts(0, 3, 7, 90))},
                             {{"run", "unit"}});
  const nlohmann::json j = rep;
  const auto back = j.get<EvalReport>();
  CHECK(nlohmann::json(back) == j);
  CHECK(back.rows.size() == 3);
  CHECK(back.rows[1].specificity == 0.9999);
  CHECK(back.meta.at("run") == "unit");
  CHECK_THROWS_AS(nlohmann::json::parse(R"({"rows": 3})").get<EvalReport>(), ConfigError);

  const std::string table = format_table(rep);
  CHECK(std::count(table.begin(), table.end(), '\n') == 1 + 3 + 2 + 1);
  CHECK(table.find("0.6667") != std::string::npos);
  CHECK(table.find("0.9999") != std::string::npos);
}
