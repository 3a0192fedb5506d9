#include "retain/experiment.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <stdexcept>

#include "retain/probes.hpp"
#include "retain/rng.hpp"

namespace retain {

namespace fs = std::filesystem;

namespace {

std::string fmt_metric(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.6f", v);
    return buf;
}

std::string read_file(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_file(const fs::path& p, const std::string& content) {
    std::ofstream out(p, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open " + p.string());
    out << content;
    if (!out) throw std::runtime_error("write failed for " + p.string());
}

// write only when content differs, so resumed runs leave files untouched
void write_if_changed(const fs::path& p, const std::string& content) {
    if (fs::exists(p) && read_file(p) == content) return;
    write_file(p, content);
}

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> fields;
    std::string cur;
    bool quoted = false;
    for (size_t i = 0; i < line.size(); ++i) {
        const char c = line[i];
        if (quoted) {
            if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
                cur.push_back('"');
                ++i;
            } else if (c == '"') {
                quoted = false;
            } else {
                cur.push_back(c);
            }
        } else if (c == '"') {
            quoted = true;
        } else if (c == ',') {
            fields.push_back(cur);
            cur.clear();
        } else {
            cur.push_back(c);
        }
    }
    fields.push_back(cur);
    return fields;
}

double timed_seconds(const std::chrono::steady_clock::time_point& start) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

struct CellSpec {
    std::string id;
    FinetuneMode mode = FinetuneMode::Scratch;
    StatsSource stats = StatsSource::SelfLive;
    std::optional<double> lambda;
    enum class Kind { TrainO, FinetuneT, TrainCombined } kind = Kind::FinetuneT;
};

// The Fig.-3-style matrix: (i) O baseline, (ii) naive fine-tune,
// (iii) pooled upper baseline, (iv/v) BN-only with live vs frozen stats,
// (vi) BN-only + EWC grid, (vii) all-layers frozen stats,
// (viii) all-layers frozen stats + EWC grid.
std::vector<CellSpec> matrix_cells(const ExperimentConfig& cfg) {
    std::vector<CellSpec> cells;
    cells.push_back({"i-origin", FinetuneMode::Scratch, StatsSource::SelfLive, {}, CellSpec::Kind::TrainO});
    cells.push_back({"ii-ft-all-live", FinetuneMode::AllLayers, StatsSource::SelfLive, {}, CellSpec::Kind::FinetuneT});
    cells.push_back({"iii-combined", FinetuneMode::Scratch, StatsSource::SelfLive, {}, CellSpec::Kind::TrainCombined});
    cells.push_back({"iv-ft-bn-live", FinetuneMode::BnOnly, StatsSource::SelfLive, {}, CellSpec::Kind::FinetuneT});
    cells.push_back({"v-ft-bn-frozen", FinetuneMode::BnOnly, StatsSource::FrozenOrigin, {}, CellSpec::Kind::FinetuneT});
    for (double l : cfg.lambda_grid)
        cells.push_back({"vi-ft-bn-frozen-ewc-" + lambda_label(l), FinetuneMode::BnOnly, StatsSource::FrozenOrigin, l,
                         CellSpec::Kind::FinetuneT});
    cells.push_back(
        {"vii-ft-all-frozen", FinetuneMode::AllLayers, StatsSource::FrozenOrigin, {}, CellSpec::Kind::FinetuneT});
    for (double l : cfg.lambda_grid)
        cells.push_back({"viii-ft-all-frozen-ewc-" + lambda_label(l), FinetuneMode::AllLayers,
                         StatsSource::FrozenOrigin, l, CellSpec::Kind::FinetuneT});
    return cells;
}

class Runner {
  public:
    Runner(const ExperimentConfig& cfg, bool quiet) : cfg_(cfg), quiet_(quiet), out_(cfg.out_dir) {
        fs::create_directories(out_ / "cells");
    }

    const TaskData& data() {
        if (!data_) data_ = build_task_data(cfg_);
        return *data_;
    }

    // Cell i's checkpoint; trains it if not on disk yet.
    Checkpoint origin_checkpoint() {
        const fs::path path = out_ / "origin.ckpt";
        if (fs::exists(path)) return Checkpoint::load(path.string());
        run_cell(matrix_cells(cfg_)[0]);
        return Checkpoint::load(path.string());
    }

    // Origin checkpoint with fisher.*/snapshot.* attached (cached on disk).
    Checkpoint ewc_checkpoint() {
        const fs::path path = out_ / "fisher.ckpt";
        if (fs::exists(path)) return Checkpoint::load(path.string());
        Checkpoint origin = origin_checkpoint();
        Network net = origin.to_network();
        const int64_t n = std::min<int64_t>(cfg_.fisher_samples, data().o_train.size());
        // the same derivation finetune() uses, so cached and inline Fishers match
        FisherDiagonal fisher =
            compute_fisher_diagonal(net, data().o_train, n, mix_seeds(cfg_.phase2.seed, 0x666973ULL));
        ParameterSnapshot snapshot = snapshot_parameters(net, "origin");
        Checkpoint with_ewc = origin;
        attach_ewc_entries(with_ewc, fisher, snapshot);
        with_ewc.save(path.string());
        return with_ewc;
    }

    std::vector<ReportRow> run_cell(const CellSpec& cell) {
        const fs::path dir = out_ / "cells" / cell.id;
        const fs::path rows_path = dir / "rows.csv";
        if (fs::exists(rows_path)) return parse_report_rows(read_file(rows_path));

        fs::create_directories(dir);
        const auto start = std::chrono::steady_clock::now();
        std::vector<ReportRow> rows;
        try {
            rows = execute(cell, dir);
            for (auto& r : rows) r.runtime_s = timed_seconds(start);
        } catch (const std::exception& err) {
            ReportRow row = base_row(cell);
            row.dataset = "error";
            row.band = err.what();
            row.runtime_s = timed_seconds(start);
            rows = {row};
        }
        std::string body;
        for (const auto& r : rows) body += report_row_csv(r) + "\n";
        write_file(rows_path, body);
        if (!quiet_)
            for (const auto& r : rows) std::cout << report_row_csv(r) << "\n";
        return rows;
    }

    ReportRow base_row(const CellSpec& cell) const {
        ReportRow row;
        row.experiment = cfg_.experiment;
        row.cell = cell.id;
        row.mode = finetune_mode_name(cell.mode);
        row.stats_source = stats_source_name(cell.stats);
        row.lambda = cell.lambda.value_or(0.0);
        return row;
    }

  private:
    std::vector<ReportRow> execute(const CellSpec& cell, const fs::path& dir) {
        Network net;
        if (cell.kind == CellSpec::Kind::TrainO || cell.kind == CellSpec::Kind::TrainCombined) {
            net = build_arch(cfg_);
            net.init(mix_seeds(cfg_.seed, 0x696e6974ULL));
            TrainConfig tc = cfg_.phase1;
            tc.finetune_mode = FinetuneMode::Scratch;
            tc.ewc.reset();
            std::ostream* progress = quiet_ ? nullptr : &std::cout;
            if (cell.kind == CellSpec::Kind::TrainO) {
                FitResult fit_result = fit(net, data().o_train, data().o_val, tc, nullptr, progress);
                Checkpoint ckpt = checkpoint_of(net, cell, fit_result);
                ckpt.save((out_ / "origin.ckpt").string());
            } else {
                LabeledDataset train = concat(data().o_train, data().t_train);
                LabeledDataset val = concat(data().o_val, data().t_val);
                FitResult fit_result = fit(net, train, val, tc, nullptr, progress);
                checkpoint_of(net, cell, fit_result).save((dir / "model.ckpt").string());
            }
        } else {
            const bool needs_ewc = cell.lambda.has_value() && *cell.lambda > 0.0;
            Checkpoint origin = needs_ewc ? ewc_checkpoint() : origin_checkpoint();
            TrainConfig tc = cfg_.phase2;
            tc.finetune_mode = cell.mode;
            tc.stats_source = cell.stats;
            if (cell.lambda.has_value())
                tc.ewc = EwcConfig{*cell.lambda};
            else
                tc.ewc.reset();
            std::ostream* progress = quiet_ ? nullptr : &std::cout;
            FitResult fit_result =
                finetune(origin, data().t_train, data().t_val, tc, net, &data().o_train, cfg_.fisher_samples, progress);
            checkpoint_of(net, cell, fit_result).save((dir / "model.ckpt").string());
        }

        // probe with origin-domain samples, as the reference analysis does
        const int64_t probe_n = std::min<int64_t>(256, data().o_test.size());
        std::vector<int64_t> idx(static_cast<size_t>(probe_n));
        for (int64_t i = 0; i < probe_n; ++i) idx[static_cast<size_t>(i)] = i;
        LabeledDataset probe_set = take(data().o_test, idx);
        if (probe_n >= 8) bn_variance_probe(net, probe_set).write_csv((dir / "probe.csv").string());

        std::vector<ReportRow> rows;
        for (const char* which : {"O", "T"}) {
            const LabeledDataset& test = which[0] == 'O' ? data().o_test : data().t_test;
            EvalResult ev = evaluate(net, test);
            ReportRow row = base_row(cell);
            row.dataset = which;
            row.accuracy = ev.accuracy;
            row.kappa = ev.kappa;
            row.band = ev.band;
            rows.push_back(row);
        }
        return rows;
    }

    Checkpoint checkpoint_of(Network& net, const CellSpec& cell, const FitResult& fit_result) {
        return Checkpoint::from_network(net, {{"id", cfg_.experiment + "/" + cell.id},
                                              {"config_hash", cfg_.config_hash},
                                              {"seed", std::to_string(cfg_.seed)},
                                              {"epoch", std::to_string(fit_result.best_epoch)},
                                              {"val_accuracy", fmt_metric(fit_result.best_val_accuracy)},
                                              {"cell", cell.id}});
    }

    const ExperimentConfig& cfg_;
    bool quiet_;
    fs::path out_;
    std::optional<TaskData> data_;
};

}  // namespace

std::string csv_quote(const std::string& field) {
    if (field.find_first_of(",\"\n") == std::string::npos) return field;
    std::string out = "\"";
    for (char c : field) {
        if (c == '"') out += "\"\"";
        else out.push_back(c);
    }
    out += "\"";
    return out;
}

std::string lambda_label(double lambda) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%g", lambda);
    return buf;
}

std::string report_csv_header() { return "experiment,cell,mode,stats_source,lambda,dataset,accuracy,kappa,band,runtime_s"; }

std::string report_row_csv(const ReportRow& row) {
    std::ostringstream os;
    os << csv_quote(row.experiment) << "," << csv_quote(row.cell) << "," << row.mode << "," << row.stats_source << ","
       << lambda_label(row.lambda) << "," << row.dataset << ",";
    if (row.dataset == "error")
        os << ",," << csv_quote(row.band) << ",";
    else
        os << fmt_metric(row.accuracy) << "," << fmt_metric(row.kappa) << "," << csv_quote(row.band) << ",";
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.3f", row.runtime_s);
    os << buf;
    return os.str();
}

std::vector<ReportRow> parse_report_rows(const std::string& csv_body) {
    std::vector<ReportRow> rows;
    std::istringstream in(csv_body);
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty() || line == report_csv_header()) continue;
        auto f = split_csv_line(line);
        if (f.size() != 10) throw std::runtime_error("report csv: bad row '" + line + "'");
        ReportRow row;
        row.experiment = f[0];
        row.cell = f[1];
        row.mode = f[2];
        row.stats_source = f[3];
        row.lambda = std::stod(f[4]);
        row.dataset = f[5];
        row.accuracy = f[6].empty() ? 0.0 : std::stod(f[6]);
        row.kappa = f[7].empty() ? 0.0 : std::stod(f[7]);
        row.band = f[8];
        row.runtime_s = f[9].empty() ? 0.0 : std::stod(f[9]);
        rows.push_back(row);
    }
    return rows;
}

int run_experiment(const ExperimentConfig& cfg, bool quiet) {
    Runner runner(cfg, quiet);
    int failures = 0;
    std::string report = report_csv_header() + "\n";
    for (const auto& cell : matrix_cells(cfg)) {
        auto rows = runner.run_cell(cell);
        for (const auto& row : rows) {
            if (row.dataset == "error") ++failures;
            report += report_row_csv(row) + "\n";
        }
    }
    write_if_changed(fs::path(cfg.out_dir) / "report.csv", report);
    return failures;
}

int lambda_sweep(const ExperimentConfig& cfg, bool quiet) {
    Runner runner(cfg, quiet);
    std::vector<double> grid = cfg.lambda_grid;
    std::sort(grid.begin(), grid.end());

    int failures = 0;
    std::string sweep = "lambda,dataset,accuracy,kappa\n";
    for (double l : grid) {
        CellSpec cell{"sweep-" + lambda_label(l), cfg.phase2.finetune_mode, cfg.phase2.stats_source, l,
                      CellSpec::Kind::FinetuneT};
        auto rows = runner.run_cell(cell);
        for (const auto& row : rows) {
            if (row.dataset == "error") {
                ++failures;
                sweep += lambda_label(l) + ",error,,\n";
            } else {
                sweep += lambda_label(l) + "," + row.dataset + "," + fmt_metric(row.accuracy) + "," +
                         fmt_metric(row.kappa) + "\n";
            }
        }
    }
    write_if_changed(fs::path(cfg.out_dir) / "sweep.csv", sweep);
    return failures;
}

}  // namespace retain
