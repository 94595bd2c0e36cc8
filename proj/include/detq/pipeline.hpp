#pragma once

#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "detq/dataset.hpp"
#include "detq/detector.hpp"
#include "detq/odol.hpp"

namespace detq {

enum class PtqMode { kSimple, kAdvanced };

// Calibration metric: adaptive p selection, Min-Max, fixed Lp (MSE = lp:2),
// or cosine similarity (simple mode only).
struct MetricSpec {
  enum Kind { kAdaptive, kMinMax, kMse, kCosine, kFixedLp };
  Kind kind = Kind::kAdaptive;
  double p = 2.0;

  static MetricSpec parse(const std::string& text);
  std::string str() const;
};

struct PipelineConfig {
  int weight_bits = 4;
  int act_bits = 4;
  PtqMode mode = PtqMode::kAdvanced;
  MetricSpec metric;
  std::vector<double> pgrid = {1, 1.5, 2, 2.5, 3, 3.5, 4, 4.5};
  ODOLConfig odol;
  int select_iters = 500;   // Adam iterations per p candidate (advanced mode)
  int recon_iters = 1000;   // Adam iterations for block reconstruction
  double lr = 3e-4;
  double warmup = 0.4;      // rounding-regularizer warmup fraction
  int opt_batch = 8;
  int grid_points = 100;
  bool qdrop = false;
  int odol_subset = 0;      // 0 = use the whole calibration set for ODOL
  uint64_t seed = 1;

  nlohmann::json to_json() const;
  void validate(PtqMode) const;
};

struct CandidateTrace {
  std::string block;
  double p = 0;
  double odol_value = 0;
  double cls_term = 0;
  double loc_term = 0;
  double final_lp_loss = 0;  // rooted, on the calibration set
  double seconds = 0;
};

struct BlockReport {
  std::string name;
  double p_star = 0;
  std::vector<std::pair<double, double>> odol_per_p;  // (p, odol)
  std::vector<std::pair<std::string, double>> act_scales;
};

struct QuantizationReport {
  std::vector<BlockReport> blocks;
  std::vector<CandidateTrace> traces;
  std::optional<double> map_fp, map_q, l_perf;
  std::vector<std::string> warnings;
  double wall_seconds = 0;  // reported separately, never part of the canonical JSON

  // Deterministic report body (excludes wall-clock).
  nlohmann::json to_json(const PipelineConfig& cfg) const;
};

// The spec'd block partition: residual blocks as units, stem and each neck
// conv standalone, head excluded.
std::vector<std::string> partition_blocks(const ToyDetector& model);

// Runs the full sequential block-wise calibration on `model` in place:
// caches FP outputs once, then per block selects p (adaptive metric) and
// reconstructs activation/weight quantizers. Labels are never consumed: the
// calibration type carries images only.
QuantizationReport quantize_network(ToyDetector& model, const CalibrationSet& calib,
                                    const PipelineConfig& cfg);

// Validation-only helpers (labeled data; never used during calibration).
double performance_loss(double map_fp, ToyDetector& quantized, const Dataset& val);

// ---- single-layer probing (Table-style experiments) -------------------------

struct ProbeRow {
  std::string layer;
  std::string metric;
  double scale = 0;
  double l_perf = 0;
};

// Quantizes only the named activation site under each metric and measures
// the resulting mAP drop on the labeled validation set.
std::vector<ProbeRow> probe_layer(ToyDetector& model, const CalibrationSet& calib,
                                  const Dataset& val, const std::string& act_site, int act_bits,
                                  const std::vector<MetricSpec>& metrics);

struct SweepRow {
  double s_ratio = 0;
  double scale = 0;
  std::vector<double> lp;          // one per pgrid entry (un-rooted objective)
  double odol_kl_l1 = 0, odol_mse_l1 = 0, odol_kl_iou = 0, odol_mse_iou = 0;
  double l_perf = 0;
};

struct SweepResult {
  std::vector<double> pgrid;
  std::vector<SweepRow> rows;  // ascending scale ratio
};

// Sweeps one activation scale across the candidate grid, recording every Lp
// objective, the four output-loss variants and the labeled performance loss.
SweepResult scale_sweep(ToyDetector& model, const CalibrationSet& calib, const Dataset& val,
                        const std::string& act_site, int act_bits, int points,
                        const std::vector<double>& pgrid, const ODOLConfig& odol_base);

}  // namespace detq
