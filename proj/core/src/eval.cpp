#include "iclmark/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <stdexcept>

#include "iclmark/errors.hpp"

namespace iclmark::eval {

Resolution resolve_prediction(std::string_view generated,
                              const markup::OptionBlock& options) {
  // first whitespace-delimited token of the trimmed text
  const auto is_space = [](char c) {
    return c == ' ' || c == '\t' || c == '\n' || c == '\r';
  };
  std::size_t begin = 0;
  while (begin < generated.size() && is_space(generated[begin])) ++begin;
  std::size_t end = begin;
  while (end < generated.size() && !is_space(generated[end])) ++end;
  const std::string_view first = generated.substr(begin, end - begin);

  if (first.size() == 1) {
    if (const markup::OptionEntry* entry = options.find_letter(first[0])) {
      Resolution r;
      r.kind = entry->is_nota ? Resolution::Kind::nota : Resolution::Kind::option;
      r.letter = entry->letter;
      if (!entry->is_nota) r.descriptor = entry->descriptor;
      return r;
    }
  }
  if (auto nota = options.nota_letter()) {
    return Resolution{Resolution::Kind::nota, *nota, ""};
  }
  return Resolution{Resolution::Kind::invalid, '\0', ""};
}

double f1_score(double precision, double recall) {
  if (precision + recall <= 0.0) return 0.0;
  return 2.0 * precision * recall / (precision + recall);
}

namespace {

bool mc_correct(const PredictionRecord& r) {
  if (r.task_answerable) {
    return r.resolved.kind == Resolution::Kind::option &&
           r.resolved.descriptor == r.gold_descriptor;
  }
  // gold not among the options: NOTA is the right multiple-choice answer
  return r.resolved.kind == Resolution::Kind::nota;
}

bool task_correct(const PredictionRecord& r) {
  return r.task_answerable && mc_correct(r);
}

}  // namespace

EvalReport aggregate_closed(std::span<const PredictionRecord> records) {
  if (records.empty()) throw InputError("cannot aggregate an empty suite");

  EvalReport report;
  report.suite_size = static_cast<std::int64_t>(records.size());

  std::int64_t mc_hits = 0;
  std::int64_t task_hits = 0;
  std::int64_t actual_nota = 0;
  std::int64_t predicted_nota = 0;
  std::int64_t nota_tp = 0;
  for (const PredictionRecord& r : records) {
    const bool mc = mc_correct(r);
    mc_hits += mc ? 1 : 0;
    task_hits += task_correct(r) ? 1 : 0;

    const bool actual = !r.task_answerable;
    const bool predicted = r.resolved.kind == Resolution::Kind::nota;
    actual_nota += actual ? 1 : 0;
    predicted_nota += predicted ? 1 : 0;
    nota_tp += (actual && predicted) ? 1 : 0;

    if (!r.gold_descriptor.empty()) {
      ClassStats& stats = report.per_class[r.gold_descriptor];
      ++stats.count;
      stats.correct += task_correct(r) ? 1 : 0;
    }
  }

  const double n = static_cast<double>(records.size());
  report.mc_accuracy = mc_hits / n;
  report.task_accuracy = task_hits / n;
  report.nota.actual_rate = actual_nota / n;
  report.nota.predicted_rate = predicted_nota / n;
  report.nota.recall = actual_nota > 0 ? static_cast<double>(nota_tp) / actual_nota : 0.0;
  report.nota.precision =
      predicted_nota > 0 ? static_cast<double>(nota_tp) / predicted_nota : 0.0;
  report.nota.f1 = f1_score(report.nota.precision, report.nota.recall);

  if (report.task_accuracy > report.mc_accuracy) {
    throw std::logic_error("task accuracy exceeded multiple-choice accuracy");
  }
  return report;
}

std::string to_string(OosKind kind) {
  return kind == OosKind::id_oos ? "id-oos" : "ood-oos";
}

OosKind oos_kind_from_string(std::string_view s) {
  if (s == "id-oos") return OosKind::id_oos;
  if (s == "ood-oos") return OosKind::ood_oos;
  throw ConfigError("unknown OOS kind: " + std::string(s));
}

namespace {

bool predicted_oos(const PredictionRecord& r, OosKind kind, double threshold) {
  const bool greedy_nota = r.resolved.kind == Resolution::Kind::nota;
  if (kind == OosKind::ood_oos) return greedy_nota;
  return greedy_nota || r.nota_probability > threshold;
}

}  // namespace

OOSReport aggregate_open_world(std::span<const PredictionRecord> records,
                               OosKind kind, std::optional<double> threshold) {
  if (records.empty()) throw InputError("cannot aggregate an empty suite");
  if (kind == OosKind::id_oos && !threshold.has_value()) {
    throw ConfigError("id-oos evaluation requires a threshold");
  }
  const double t = threshold.value_or(1.0);

  std::int64_t in_scope = 0;
  std::int64_t in_scope_hits = 0;
  std::int64_t oos = 0;
  std::int64_t oos_hits = 0;
  std::int64_t pred_oos = 0;
  for (const PredictionRecord& r : records) {
    const bool pred = predicted_oos(r, kind, t);
    pred_oos += pred ? 1 : 0;
    if (r.gold_is_oos) {
      ++oos;
      oos_hits += pred ? 1 : 0;
    } else {
      ++in_scope;
      const bool correct = !pred && r.resolved.kind == Resolution::Kind::option &&
                           r.resolved.descriptor == r.gold_descriptor;
      in_scope_hits += correct ? 1 : 0;
    }
  }

  OOSReport report;
  report.kind = kind;
  report.threshold = kind == OosKind::id_oos ? threshold : std::nullopt;
  report.suite_size = static_cast<std::int64_t>(records.size());
  report.predicted_oos = pred_oos;
  report.in_scope_accuracy =
      in_scope > 0 ? static_cast<double>(in_scope_hits) / in_scope : 0.0;
  report.oos_recall = oos > 0 ? static_cast<double>(oos_hits) / oos : 0.0;
  report.oos_precision =
      pred_oos > 0 ? static_cast<double>(oos_hits) / pred_oos : 0.0;
  return report;
}

std::vector<double> default_threshold_grid() {
  std::vector<double> grid(101);
  for (int i = 0; i <= 100; ++i) grid[static_cast<std::size_t>(i)] = i / 100.0;
  return grid;
}

std::pair<double, ThresholdCurve> tune_threshold(
    std::span<const PredictionRecord> records, std::span<const double> grid) {
  if (grid.empty()) throw ConfigError("threshold grid is empty");

  ThresholdCurve curve;
  curve.thresholds.assign(grid.begin(), grid.end());
  double best_threshold = grid[0];
  double best_objective = -1.0;
  for (double t : grid) {
    const OOSReport report = aggregate_open_world(records, OosKind::id_oos, t);
    const double objective = report.in_scope_accuracy + report.oos_recall;
    curve.objective.push_back(objective);
    curve.predicted_oos.push_back(report.predicted_oos);
    if (objective > best_objective ||
        (objective == best_objective && t < best_threshold)) {
      best_objective = objective;
      best_threshold = t;
    }
  }
  return {best_threshold, curve};
}

// --- prompt sweep ------------------------------------------------------------

std::size_t SweepAxes::size() const {
  std::size_t n = 1;
  for (const SweepAxis& axis : axes) n *= axis.choices.size();
  return n;
}

const SweepAxis* SweepAxes::find(std::string_view name) const {
  for (const SweepAxis& axis : axes) {
    if (axis.name == name) return &axis;
  }
  return nullptr;
}

void SweepAxes::validate() const {
  if (axes.empty()) throw ConfigError("sweep needs at least one axis");
  for (const SweepAxis& axis : axes) {
    if (axis.name.empty()) throw ConfigError("sweep axis without a name");
    if (axis.choices.empty()) {
      throw ConfigError("sweep axis has no choices: " + axis.name);
    }
  }
}

SweepAxes default_sweep_axes() {
  return SweepAxes{{
      {"instruction",
       {"Categorize the following news headlines according to their topic.",
        "Classify these headlines based on the type of news.",
        "Identify the type of news based on following headlines."}},
      {"options_header", {"options:", "choices:"}},
      {"demo_indicator", {"", "example"}},
      {"input_keyword", {"Headline", "Input"}},
      {"kv_separator", {":", ")"}},
      {"demo_separator", {"\n", "\n###\n"}},
  }};
}

markup::TemplateSpec sweep_template(const SweepAxes& axes,
                                    const SweepAssignment& assignment) {
  axes.validate();
  auto choice = [&](const std::string& name) -> const std::string& {
    auto it = assignment.find(name);
    if (it == assignment.end()) {
      throw ConfigError("sweep assignment is missing axis: " + name);
    }
    return it->second;
  };
  markup::HandwrittenChoices choices;
  choices.icl_header = choice("instruction");
  choices.options_header = choice("options_header");
  choices.demo_indicator = choice("demo_indicator");
  const std::string& kv = choice("kv_separator");
  choices.input_indicator = choice("input_keyword") + kv;
  choices.label_indicator = "Category" + kv;
  choices.demo_separator = choice("demo_separator");
  return markup::handwritten_template(choices);
}

std::vector<SweepEntry> generate_sweep(const SweepAxes& axes) {
  axes.validate();
  std::vector<SweepEntry> entries;
  entries.reserve(axes.size());
  std::vector<std::size_t> odometer(axes.axes.size(), 0);
  while (true) {
    SweepAssignment assignment;
    for (std::size_t a = 0; a < axes.axes.size(); ++a) {
      assignment[axes.axes[a].name] = axes.axes[a].choices[odometer[a]];
    }
    entries.push_back({assignment, sweep_template(axes, assignment)});

    // odometer increment, last axis fastest
    std::size_t a = axes.axes.size();
    while (a > 0) {
      --a;
      if (++odometer[a] < axes.axes[a].choices.size()) break;
      odometer[a] = 0;
      if (a == 0) return entries;
    }
  }
}

EditEffect edit_effect(std::span<const SweepResult> results, const SweepAxes& axes,
                       std::string_view axis, std::string_view value_a,
                       std::string_view value_b) {
  const SweepAxis* ax = axes.find(axis);
  if (ax == nullptr) throw InputError("unknown sweep axis: " + std::string(axis));
  const auto has_value = [&](std::string_view v) {
    return std::find(ax->choices.begin(), ax->choices.end(), v) != ax->choices.end();
  };
  if (!has_value(value_a) || !has_value(value_b)) {
    throw InputError("value not present in axis " + std::string(axis));
  }

  // key = the assignment with the edited axis removed
  auto rest_key = [&](const SweepAssignment& assignment) {
    std::string key;
    for (const auto& [name, value] : assignment) {
      if (name == axis) continue;
      key += name;
      key += '\x1f';
      key += value;
      key += '\x1e';
    }
    return key;
  };

  std::map<std::string, std::pair<std::optional<double>, std::optional<double>>>
      groups;
  for (const SweepResult& result : results) {
    auto it = result.assignment.find(std::string(axis));
    if (it == result.assignment.end()) continue;
    if (it->second == value_a) {
      groups[rest_key(result.assignment)].first = result.accuracy;
    } else if (it->second == value_b) {
      groups[rest_key(result.assignment)].second = result.accuracy;
    }
  }

  EditEffect effect;
  effect.axis = std::string(axis);
  effect.value_a = std::string(value_a);
  effect.value_b = std::string(value_b);
  effect.label = "\"" + effect.value_a + "\" to \"" + effect.value_b + "\"";
  for (const auto& [key, pair] : groups) {
    if (pair.first.has_value() && pair.second.has_value()) {
      effect.deltas_pp.push_back((*pair.second - *pair.first) * 100.0);
    }
  }
  if (effect.deltas_pp.empty()) {
    throw InputError("no paired templates for axis " + std::string(axis));
  }
  effect.min_pp = *std::min_element(effect.deltas_pp.begin(), effect.deltas_pp.end());
  effect.max_pp = *std::max_element(effect.deltas_pp.begin(), effect.deltas_pp.end());
  double sum = 0.0;
  for (double d : effect.deltas_pp) sum += d;
  effect.mean_pp = sum / static_cast<double>(effect.deltas_pp.size());
  effect.non_monotonic = effect.min_pp < 0.0 && effect.max_pp > 0.0;
  return effect;
}

// --- run aggregation ---------------------------------------------------------

std::string format_summary(double mean, double stddev, double best_on_validation) {
  char buf[96];
  std::snprintf(buf, sizeof(buf), "%.1f±%.1f (%.1f)", mean, stddev,
                best_on_validation);
  return buf;
}

RunSummary aggregate_runs(std::span<const double> test_metrics,
                          std::span<const double> validation_metrics) {
  if (test_metrics.empty()) throw InputError("need at least one run to aggregate");
  if (test_metrics.size() != validation_metrics.size()) {
    throw InputError("test and validation metric counts differ");
  }

  RunSummary summary;
  double sum = 0.0;
  for (double v : test_metrics) sum += v;
  summary.mean = sum / static_cast<double>(test_metrics.size());

  if (test_metrics.size() > 1) {
    double ss = 0.0;
    for (double v : test_metrics) ss += (v - summary.mean) * (v - summary.mean);
    summary.stddev = std::sqrt(ss / static_cast<double>(test_metrics.size() - 1));
  }

  std::size_t best = 0;
  for (std::size_t i = 1; i < validation_metrics.size(); ++i) {
    if (validation_metrics[i] > validation_metrics[best]) best = i;
  }
  summary.best_on_validation = test_metrics[best];
  summary.formatted =
      format_summary(summary.mean, summary.stddev, summary.best_on_validation);
  return summary;
}

std::vector<std::pair<double, double>> quantile_series(
    std::span<const double> values) {
  if (values.empty()) throw InputError("cannot take quantiles of nothing");
  std::vector<double> sorted(values.begin(), values.end());
  std::sort(sorted.begin(), sorted.end());
  static constexpr double kQuantiles[] = {0.0, 0.05, 0.25, 0.5, 0.75, 0.95, 1.0};
  std::vector<std::pair<double, double>> series;
  for (double q : kQuantiles) {
    const double pos = q * static_cast<double>(sorted.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const auto hi = static_cast<std::size_t>(std::ceil(pos));
    const double frac = pos - static_cast<double>(lo);
    series.emplace_back(q, sorted[lo] * (1.0 - frac) + sorted[hi] * frac);
  }
  return series;
}

}  // namespace iclmark::eval
