#include "dysp/eval.hpp"

#include <algorithm>
#include <cstdio>
#include <exception>
#include <thread>

#include "dysp/error.hpp"

namespace dysp::eval {

const char* to_string(RoiClass c) { return c == RoiClass::Case ? "case" : "control"; }

RoiClass parse_roi_class(const std::string& s) {
  if (s == "case") return RoiClass::Case;
  if (s == "control") return RoiClass::Control;
  throw ConfigError("unknown ROI class '" + s + "' (expected case or control)");
}

namespace {

void check_aligned(const Mask& pred, const wsi::GroundTruth& gt) {
  if (pred.width != gt.mask.width || pred.height != gt.mask.height || pred.channels != 1)
    throw ValidationError("prediction is " + std::to_string(pred.width) + "x" + std::to_string(pred.height) +
                          " but ground truth is " + std::to_string(gt.mask.width) + "x" +
                          std::to_string(gt.mask.height));
  if (gt.roi.size() != gt.mask.pixel_count()) throw ValidationError("ROI map does not cover the ground-truth mask");
}

void tally(RoiConfusion& c, bool pred, bool truth) {
  if (pred && truth)
    ++c.tp;
  else if (pred)
    ++c.fp;
  else if (truth)
    ++c.fn;
  else
    ++c.tn;
}

double ratio(std::size_t num, std::size_t den) {
  return den == 0 ? 0.0 : static_cast<double>(num) / static_cast<double>(den);
}

std::optional<double> mean(const std::vector<double>& v) {
  if (v.empty()) return std::nullopt;
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

nlohmann::json opt(const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); }

std::optional<double> opt_from(const nlohmann::json& j, const char* key) {
  if (!j.contains(key) || j.at(key).is_null()) return std::nullopt;
  return j.at(key).get<double>();
}

nlohmann::json summary_json(const Summary& s) {
  return {{"cases", s.cases},          {"controls", s.controls},       {"f1", opt(s.f1)},
          {"recall", opt(s.recall)},   {"precision", opt(s.precision)}, {"specificity", opt(s.specificity)}};
}

Summary summary_from(const nlohmann::json& j) {
  Summary s;
  s.cases = j.at("cases").get<std::size_t>();
  s.controls = j.at("controls").get<std::size_t>();
  s.f1 = opt_from(j, "f1");
  s.recall = opt_from(j, "recall");
  s.precision = opt_from(j, "precision");
  s.specificity = opt_from(j, "specificity");
  return s;
}

std::string fmt(const std::optional<double>& v) {
  if (!v) return "-";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4f", *v);
  return buf;
}

}  // namespace

RoiConfusion confuse(const Mask& pred, const wsi::GroundTruth& gt, int roi) {
  check_aligned(pred, gt);
  if (roi < 1 || static_cast<std::size_t>(roi) > gt.roi_count)
    throw ValidationError("unknown ROI id " + std::to_string(roi) + " (ground truth has " +
                          std::to_string(gt.roi_count) + ")");
  RoiConfusion c;
  c.roi = roi;
  for (std::size_t p = 0; p < gt.roi.size(); ++p)
    if (gt.roi[p] == roi) tally(c, pred.data[p] != 0, gt.mask.data[p] != 0);
  c.cls = c.tp + c.fn > 0 ? RoiClass::Case : RoiClass::Control;
  return c;
}

std::vector<RoiConfusion> confuse_all(const Mask& pred, const wsi::GroundTruth& gt, std::size_t workers) {
  check_aligned(pred, gt);
  const std::size_t n = gt.roi_count, h = gt.mask.height, w = gt.mask.width;
  workers = std::clamp<std::size_t>(workers, 1, std::max<std::size_t>(1, h));
  std::vector<std::vector<RoiConfusion>> partial(workers, std::vector<RoiConfusion>(n + 1));
  auto work = [&](std::size_t k) {
    auto& acc = partial[k];
    for (std::size_t y = k * h / workers; y < (k + 1) * h / workers; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        const std::size_t p = y * w + x;
        const auto r = gt.roi[p];
        if (r < 0 || static_cast<std::size_t>(r) > n)
          throw ValidationError("ROI map holds id " + std::to_string(r) + " beyond roi_count " + std::to_string(n));
        if (r > 0) tally(acc[static_cast<std::size_t>(r)], pred.data[p] != 0, gt.mask.data[p] != 0);
      }
  };
  if (workers == 1) {
    work(0);
  } else {
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(workers);
    for (std::size_t k = 0; k < workers; ++k)
      pool.emplace_back([&, k] {
        try {
          work(k);
        } catch (...) {
          errors[k] = std::current_exception();
        }
      });
    for (auto& t : pool) t.join();
    for (auto& e : errors)
      if (e) std::rethrow_exception(e);
  }
  std::vector<RoiConfusion> out(n);
  for (std::size_t r = 1; r <= n; ++r) {
    auto& c = out[r - 1];
    c.roi = static_cast<int>(r);
    for (const auto& acc : partial) {
      c.tp += acc[r].tp;
      c.fp += acc[r].fp;
      c.fn += acc[r].fn;
      c.tn += acc[r].tn;
    }
    c.cls = c.tp + c.fn > 0 ? RoiClass::Case : RoiClass::Control;
  }
  return out;
}

CaseMetrics case_metrics(const RoiConfusion& c) {
  CaseMetrics m;
  m.precision = ratio(c.tp, c.tp + c.fp);
  m.recall = ratio(c.tp, c.tp + c.fn);
  // 2TP / (2TP + FP + FN) equals the harmonic mean and is 0 whenever TP is
  m.f1 = ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn);
  return m;
}

double control_specificity(const RoiConfusion& c) {
  if (c.tp + c.fn > 0)
    throw ValidationError("ROI " + std::to_string(c.roi) + " has " + std::to_string(c.tp + c.fn) +
                          " ground-truth positives; specificity is reported for controls only");
  return ratio(c.tn, c.tn + c.fp);
}

RoiRow make_row(const std::string& slide, const RoiConfusion& c) {
  RoiRow r;
  r.slide = slide;
  r.counts = c;
  if (c.cls == RoiClass::Case)
    r.metrics = case_metrics(c);
  else
    r.specificity = control_specificity(c);
  return r;
}

EvalReport aggregate(std::vector<RoiRow> rows, nlohmann::json meta) {
  if (rows.empty()) throw ValidationError("nothing to aggregate: no ROI rows");
  EvalReport rep;
  std::vector<double> f1, rec, prec, spec;
  RoiConfusion pooled_case, pooled_control;
  for (auto& r : rows) {
    if (r.counts.cls == RoiClass::Case) {
      if (!r.metrics) r.metrics = case_metrics(r.counts);
      f1.push_back(r.metrics->f1);
      rec.push_back(r.metrics->recall);
      prec.push_back(r.metrics->precision);
      pooled_case.tp += r.counts.tp;
      pooled_case.fp += r.counts.fp;
      pooled_case.fn += r.counts.fn;
      pooled_case.tn += r.counts.tn;
      ++rep.macro.cases;
    } else {
      if (!r.specificity) r.specificity = control_specificity(r.counts);
      spec.push_back(*r.specificity);
      pooled_control.fp += r.counts.fp;
      pooled_control.tn += r.counts.tn;
      ++rep.macro.controls;
    }
  }
  rep.macro.f1 = mean(f1);
  rep.macro.recall = mean(rec);
  rep.macro.precision = mean(prec);
  rep.macro.specificity = mean(spec);
  rep.micro.cases = rep.macro.cases;
  rep.micro.controls = rep.macro.controls;
  if (rep.micro.cases > 0) {
    const CaseMetrics m = case_metrics(pooled_case);
    rep.micro.f1 = m.f1;
    rep.micro.recall = m.recall;
    rep.micro.precision = m.precision;
  }
  if (rep.micro.controls > 0) rep.micro.specificity = control_specificity(pooled_control);
  rep.rows = std::move(rows);
  rep.meta = meta.is_object() ? std::move(meta) : nlohmann::json::object();
  return rep;
}

void to_json(nlohmann::json& j, const EvalReport& r) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& row : r.rows) {
    nlohmann::json e{{"slide", row.slide},       {"roi", row.counts.roi}, {"class", to_string(row.counts.cls)},
                     {"tp", row.counts.tp},      {"fp", row.counts.fp},   {"fn", row.counts.fn},
                     {"tn", row.counts.tn}};
    e["f1"] = row.metrics ? nlohmann::json(row.metrics->f1) : nlohmann::json(nullptr);
    e["recall"] = row.metrics ? nlohmann::json(row.metrics->recall) : nlohmann::json(nullptr);
    e["precision"] = row.metrics ? nlohmann::json(row.metrics->precision) : nlohmann::json(nullptr);
    e["specificity"] = opt(row.specificity);
    rows.push_back(std::move(e));
  }
  j = nlohmann::json{{"rows", rows}, {"macro", summary_json(r.macro)}, {"micro", summary_json(r.micro)}, {"meta", r.meta}};
}

void from_json(const nlohmann::json& j, EvalReport& r) {
  try {
    EvalReport out;
    for (const auto& e : j.at("rows")) {
      RoiRow row;
      row.slide = e.at("slide").get<std::string>();
      row.counts.roi = e.at("roi").get<int>();
      row.counts.cls = parse_roi_class(e.at("class").get<std::string>());
      row.counts.tp = e.at("tp").get<std::size_t>();
      row.counts.fp = e.at("fp").get<std::size_t>();
      row.counts.fn = e.at("fn").get<std::size_t>();
      row.counts.tn = e.at("tn").get<std::size_t>();
      if (!e.at("f1").is_null())
        row.metrics = CaseMetrics{e.at("f1").get<double>(), e.at("recall").get<double>(), e.at("precision").get<double>()};
      row.specificity = opt_from(e, "specificity");
      out.rows.push_back(std::move(row));
    }
    out.macro = summary_from(j.at("macro"));
    out.micro = summary_from(j.at("micro"));
    out.meta = j.value("meta", nlohmann::json::object());
    r = std::move(out);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed evaluation report: ") + e.what());
  }
}

std::string format_table(const EvalReport& r) {
  std::string out;
  char buf[256];
  std::snprintf(buf, sizeof buf, "%-16s %4s %-8s %10s %10s %10s %10s %8s %8s %9s %11s\n", "slide", "roi", "class", "TP",
                "FP", "FN", "TN", "F1", "recall", "precision", "specificity");
  out += buf;
  for (const auto& row : r.rows) {
    const auto& c = row.counts;
    std::optional<double> f1, rec, prec;
    if (row.metrics) {
      f1 = row.metrics->f1;
      rec = row.metrics->recall;
      prec = row.metrics->precision;
    }
    std::snprintf(buf, sizeof buf, "%-16s %4d %-8s %10zu %10zu %10zu %10zu %8s %8s %9s %11s\n", row.slide.c_str(), c.roi,
                  to_string(c.cls), c.tp, c.fp, c.fn, c.tn, fmt(f1).c_str(), fmt(rec).c_str(), fmt(prec).c_str(),
                  fmt(row.specificity).c_str());
    out += buf;
  }
  for (const auto& [name, s] : {std::pair{"macro mean", &r.macro}, std::pair{"micro pooled", &r.micro}}) {
    std::snprintf(buf, sizeof buf, "%-16s %4s %-8s %10s %10s %10s %10s %8s %8s %9s %11s\n", name, "", "", "", "", "", "",
                  fmt(s->f1).c_str(), fmt(s->recall).c_str(), fmt(s->precision).c_str(), fmt(s->specificity).c_str());
    out += buf;
  }
  std::snprintf(buf, sizeof buf, "%zu case ROIs, %zu control ROIs\n", r.macro.cases, r.macro.controls);
  out += buf;
  return out;
}

}  // namespace dysp::eval
