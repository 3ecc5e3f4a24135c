#pragma once

// ROI-level pixel metrics. Case ROIs (any annotated pixel) get F1, recall and
// precision; control ROIs get specificity, since a single false positive
// zeroes every positive-class metric on an ROI without lesions.

#include <optional>
#include <string>
#include <vector>

#include "dysp/image.hpp"
#include "dysp/wsi.hpp"
#include "json.hpp"

namespace dysp::eval {

enum class RoiClass { Case, Control };
const char* to_string(RoiClass c);
RoiClass parse_roi_class(const std::string& s);

struct RoiConfusion {
  int roi = 0;
  std::size_t tp = 0, fp = 0, fn = 0, tn = 0;
  RoiClass cls = RoiClass::Control;

  std::size_t total() const { return tp + fp + fn + tn; }
};

// Counts over the pixels carrying `roi` in gt.roi. The class is Case when the
// ROI holds any ground-truth positive. Throws ValidationError on an unknown
// ROI id or misaligned rasters.
RoiConfusion confuse(const Mask& pred, const wsi::GroundTruth& gt, int roi);
// Every ROI in id order; rows are split across workers and the integer counts
// summed, so the result does not depend on `workers`.
std::vector<RoiConfusion> confuse_all(const Mask& pred, const wsi::GroundTruth& gt, std::size_t workers = 1);

struct CaseMetrics {
  double f1 = 0.0;
  double recall = 0.0;
  double precision = 0.0;
};

// Ratios with an empty denominator are 0.
CaseMetrics case_metrics(const RoiConfusion& c);
// TN / (TN + FP); ValidationError if the ROI has ground-truth positives.
double control_specificity(const RoiConfusion& c);

struct RoiRow {
  std::string slide;
  RoiConfusion counts;
  std::optional<CaseMetrics> metrics;  // case ROIs
  std::optional<double> specificity;   // control ROIs
};

RoiRow make_row(const std::string& slide, const RoiConfusion& c);

struct Summary {
  std::size_t cases = 0;
  std::size_t controls = 0;
  std::optional<double> f1, recall, precision;  // over case ROIs
  std::optional<double> specificity;            // over control ROIs
};

struct EvalReport {
  std::vector<RoiRow> rows;
  Summary macro;  // unweighted mean of per-ROI metrics, the headline numbers
  Summary micro;  // metrics of the pooled counts
  nlohmann::json meta = nlohmann::json::object();
};

// Throws ValidationError on an empty row set.
EvalReport aggregate(std::vector<RoiRow> rows, nlohmann::json meta = nlohmann::json::object());

void to_json(nlohmann::json& j, const EvalReport& r);
void from_json(const nlohmann::json& j, EvalReport& r);

// One line per ROI followed by the macro and micro summaries.
std::string format_table(const EvalReport& r);

}  // namespace dysp::eval
