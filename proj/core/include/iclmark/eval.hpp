#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "iclmark/markup.hpp"

namespace iclmark::eval {

/// Outcome of mapping generated text back onto an option block.
struct Resolution {
  enum class Kind { option, nota, invalid };

  Kind kind = Kind::invalid;
  char letter = '\0';           // valid for option and nota
  std::string descriptor;       // valid for option

  bool operator==(const Resolution&) const = default;
};

/// Trims whitespace; if the first whitespace-delimited token is exactly
/// one option letter the prediction is that option, otherwise it falls
/// back to NOTA when present and is invalid when not.
Resolution resolve_prediction(std::string_view generated,
                              const markup::OptionBlock& options);

struct PredictionRecord {
  std::uint64_t query_id = 0;
  std::string generated;
  Resolution resolved;
  std::string gold_descriptor;  // empty when the query is out of scope
  bool gold_is_oos = false;
  bool task_answerable = false;  // gold descriptor among the options shown
  double nota_probability = 0.0;
};

struct NotaStats {
  double actual_rate = 0.0;
  double predicted_rate = 0.0;
  double recall = 0.0;
  double precision = 0.0;
  double f1 = 0.0;
};

struct ClassStats {
  std::int64_t count = 0;
  std::int64_t correct = 0;
};

/// Closed-world report. Multiple-choice accuracy scores correctness given
/// the options shown (NOTA is the right answer when the gold label was not
/// retrieved); task accuracy additionally requires the gold label to have
/// been among the options. task_accuracy <= mc_accuracy always holds.
struct EvalReport {
  double task_accuracy = 0.0;
  double mc_accuracy = 0.0;
  NotaStats nota;
  std::map<std::string, ClassStats> per_class;
  std::int64_t suite_size = 0;
};

double f1_score(double precision, double recall);

EvalReport aggregate_closed(std::span<const PredictionRecord> records);

enum class OosKind { id_oos, ood_oos };

std::string to_string(OosKind kind);
OosKind oos_kind_from_string(std::string_view s);

struct OOSReport {
  double in_scope_accuracy = 0.0;
  double oos_recall = 0.0;
  double oos_precision = 0.0;
  OosKind kind = OosKind::ood_oos;
  std::optional<double> threshold;
  std::int64_t predicted_oos = 0;
  std::int64_t suite_size = 0;
};

/// ood-oos: a query is predicted out of scope iff the greedy resolution is
/// NOTA. id-oos: sensitivity is raised by also flagging any query whose
/// NOTA probability exceeds the threshold (required for this kind).
OOSReport aggregate_open_world(std::span<const PredictionRecord> records,
                               OosKind kind, std::optional<double> threshold);

struct ThresholdCurve {
  std::vector<double> thresholds;
  std::vector<double> objective;      // in-scope accuracy + OOS recall
  std::vector<std::int64_t> predicted_oos;
};

/// 101 evenly spaced thresholds over [0, 1].
std::vector<double> default_threshold_grid();

/// Maximizes in-scope accuracy + OOS recall over the grid; ties go to the
/// smallest threshold. The full curve is returned for plotting.
std::pair<double, ThresholdCurve> tune_threshold(
    std::span<const PredictionRecord> records, std::span<const double> grid);

// --- prompt sweep ------------------------------------------------------------

struct SweepAxis {
  std::string name;
  std::vector<std::string> choices;
};

struct SweepAxes {
  std::vector<SweepAxis> axes;

  std::size_t size() const;
  const SweepAxis* find(std::string_view name) const;
  void validate() const;
};

/// The default 96-template grid: 3 instructions x 2 options headers x
/// 2 demo indicators x 2 input keywords x 2 key-value separators x
/// 2 demo separators.
SweepAxes default_sweep_axes();

using SweepAssignment = std::map<std::string, std::string>;

struct SweepEntry {
  SweepAssignment assignment;
  markup::TemplateSpec template_spec;
};

/// One handwritten template per element of the Cartesian product, in
/// deterministic odometer order (last axis fastest).
std::vector<SweepEntry> generate_sweep(const SweepAxes& axes);

/// Template construction used by the sweep; exposed so single templates
/// can be rebuilt from a recorded assignment.
markup::TemplateSpec sweep_template(const SweepAxes& axes,
                                    const SweepAssignment& assignment);

struct SweepResult {
  SweepAssignment assignment;
  double accuracy = 0.0;  // fraction in [0, 1]
};

/// Distribution of paired accuracy deltas for one single-word edit.
struct EditEffect {
  std::string axis;
  std::string value_a;
  std::string value_b;
  std::string label;  // e.g. "\"Headline\" to \"Input\""
  std::vector<double> deltas_pp;
  double min_pp = 0.0;
  double mean_pp = 0.0;
  double max_pp = 0.0;
  bool non_monotonic = false;  // the delta range crosses zero
};

EditEffect edit_effect(std::span<const SweepResult> results, const SweepAxes& axes,
                       std::string_view axis, std::string_view value_a,
                       std::string_view value_b);

// --- run aggregation ---------------------------------------------------------

struct RunSummary {
  double mean = 0.0;
  double stddev = 0.0;  // sample standard deviation
  double best_on_validation = 0.0;
  std::string formatted;  // "67.8±1.2 (69.7)"
};

/// Mean and sample standard deviation over test metrics, plus the test
/// metric of the run that scored best on validation.
RunSummary aggregate_runs(std::span<const double> test_metrics,
                          std::span<const double> validation_metrics);

std::string format_summary(double mean, double stddev, double best_on_validation);

/// Quantiles used for "violin-equivalent" series in reports.
std::vector<std::pair<double, double>> quantile_series(std::span<const double> values);

}  // namespace iclmark::eval
