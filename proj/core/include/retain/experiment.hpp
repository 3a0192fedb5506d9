#pragma once

#include <string>
#include <vector>

#include "retain/config.hpp"

namespace retain {

struct ReportRow {
    std::string experiment;
    std::string cell;
    std::string mode;          // scratch | all-layers | bn-only
    std::string stats_source;  // self-live | frozen-origin
    double lambda = 0.0;
    std::string dataset;  // O | T | error
    double accuracy = 0.0;
    double kappa = 0.0;
    std::string band;  // carries the reason for dataset == "error"
    double runtime_s = 0.0;
};

std::string report_csv_header();
std::string report_row_csv(const ReportRow& row);
std::vector<ReportRow> parse_report_rows(const std::string& csv_body);

// Executes the full experimental matrix: baselines (train on O; fine-tune
// all-layers live; combined O+T), BN-only and all-layers fine-tuning with
// self-live vs frozen-origin statistics, and the EWC lambda grid on top of
// the frozen-origin constructs. One subdirectory per cell under
// <out>/cells/; cells whose rows.csv already exists are skipped, and the
// aggregate <out>/report.csv is rewritten only when its content changes.
// Returns the number of failed cells (0 = all succeeded).
int run_experiment(const ExperimentConfig& cfg, bool quiet = false);

// Fine-tunes once per lambda with phase2's mode/stats pair and writes
// <out>/sweep.csv (lambda,dataset,accuracy,kappa, ascending lambda) plus a
// checkpoint per lambda. Resumable like run_experiment. Returns failures.
int lambda_sweep(const ExperimentConfig& cfg, bool quiet = false);

// RFC-4180 field quoting (quotes only when the field needs it).
std::string csv_quote(const std::string& field);

std::string lambda_label(double lambda);

}  // namespace retain
