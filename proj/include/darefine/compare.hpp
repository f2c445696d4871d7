#ifndef DAREFINE_COMPARE_HPP
#define DAREFINE_COMPARE_HPP

#include <sys/wait.h>
#include <unistd.h>

#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "pipeline.hpp"

namespace darefine {

struct CompareCell {
    Mode mode = Mode::single_input;
    Fusion fusion = Fusion::attention;
    std::uint64_t seed = 0;

    std::string name() const { return to_string(mode) + "-" + to_string(fusion) + "-s" + std::to_string(seed); }
};

/// The ablation matrix for one seed: the single-input model (decoder fusion
/// taken from the base config) and every fusion strategy for both dual modes.
inline std::vector<CompareCell> compare_matrix(const std::vector<std::uint64_t>& seeds, Fusion single_fusion) {
    std::vector<CompareCell> cells;
    for (auto seed : seeds) {
        cells.push_back({Mode::single_input, single_fusion, seed});
        for (Mode m : {Mode::multi_size_dual, Mode::dual_input})
            for (Fusion f : {Fusion::concat, Fusion::add, Fusion::attention}) cells.push_back({m, f, seed});
    }
    return cells;
}

struct CompareRow {
    CompareCell cell;
    bool ok = false;
    std::size_t param_count = 0;
    MetricsReport report;
    double train_seconds = 0;
};

struct CompareTable {
    std::vector<CompareRow> rows;
    std::vector<CompareRow> medians;  // seed field unused; one per (mode, fusion) with a successful run
    bool all_ok() const {
        return std::all_of(rows.begin(), rows.end(), [](const CompareRow& r) { return r.ok; });
    }

    const CompareRow* median(Mode m, Fusion f) const {
        for (const auto& r : medians)
            if (r.cell.mode == m && r.cell.fusion == f) return &r;
        return nullptr;
    }

    /// Columns: mode,fusion,seed,status,param_count,iou_0..iou_3,miou,accuracy,score,train_seconds.
    /// Median rows carry seed "median" and status "ok".
    std::string to_csv() const {
        std::string out = "mode,fusion,seed,status,param_count," + MetricsReport::csv_header() + ",train_seconds\n";
        auto line = [&](const CompareRow& r, const std::string& seed) {
            out += to_string(r.cell.mode) + "," + to_string(r.cell.fusion) + "," + seed + "," + (r.ok ? "ok" : "failed") + ",";
            if (r.ok) {
                char t[32];
                std::snprintf(t, sizeof t, "%.3f", r.train_seconds);
                out += std::to_string(r.param_count) + "," + r.report.csv_row() + "," + t + "\n";
            } else {
                out += ",,,,,,,,\n";
            }
        };
        for (const auto& r : rows) line(r, std::to_string(r.cell.seed));
        for (const auto& r : medians) line(r, "median");
        return out;
    }

    nlohmann::ordered_json to_json() const {
        auto row_json = [](const CompareRow& r, bool with_seed) {
            nlohmann::ordered_json j{{"mode", to_string(r.cell.mode)}, {"fusion", to_string(r.cell.fusion)}};
            if (with_seed) j["seed"] = r.cell.seed;
            j["status"] = r.ok ? "ok" : "failed";
            if (r.ok) {
                j["param_count"] = r.param_count;
                j["report"] = r.report.to_json();
                j["train_seconds"] = r.train_seconds;
            }
            return j;
        };
        nlohmann::ordered_json rows_j = nlohmann::ordered_json::array(), med_j = nlohmann::ordered_json::array();
        for (const auto& r : rows) rows_j.push_back(row_json(r, true));
        for (const auto& r : medians) med_j.push_back(row_json(r, false));
        return {{"kind", "compare"}, {"rows", rows_j}, {"medians", med_j}};
    }
};

inline double median(std::vector<double> v) {
    if (v.empty()) throw InputError("median of nothing");
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

/// Field-wise medians over the successful seeds of each (mode, fusion).
inline std::vector<CompareRow> median_rows(const std::vector<CompareRow>& rows) {
    std::vector<CompareRow> out;
    std::vector<std::pair<Mode, Fusion>> order;
    for (const auto& r : rows)
        if (r.ok && std::find(order.begin(), order.end(), std::pair{r.cell.mode, r.cell.fusion}) == order.end())
            order.emplace_back(r.cell.mode, r.cell.fusion);
    for (auto [m, f] : order) {
        std::vector<const CompareRow*> group;
        for (const auto& r : rows)
            if (r.ok && r.cell.mode == m && r.cell.fusion == f) group.push_back(&r);
        auto med = [&](auto field) {
            std::vector<double> v;
            for (auto* r : group) v.push_back(field(*r));
            return median(v);
        };
        CompareRow row;
        row.cell = {m, f, 0};
        row.ok = true;
        row.param_count = group.front()->param_count;
        const std::size_t classes = group.front()->report.iou_per_class.size();
        for (std::size_t c = 0; c < classes; ++c) {
            std::vector<double> v;
            for (auto* r : group)
                if (r->report.iou_per_class[c]) v.push_back(*r->report.iou_per_class[c]);
            row.report.iou_per_class.push_back(v.empty() ? std::nullopt : std::optional<double>(median(v)));
        }
        row.report.miou = med([](const CompareRow& r) { return r.report.miou; });
        row.report.accuracy = med([](const CompareRow& r) { return r.report.accuracy; });
        row.report.score = med([](const CompareRow& r) { return r.report.score; });
        row.train_seconds = med([](const CompareRow& r) { return r.train_seconds; });
        out.push_back(row);
    }
    return out;
}

/// Trains and evaluates one cell into `dir` (checkpoint.ckpt, train_log.jsonl,
/// report.json/csv, slide PNGs, cell.json).
inline void run_cell(const CompareCell& cell, const Dataset& ds, const ExperimentConfig& cfg, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    ModelSpec spec = cfg.model;
    spec = ModelSpec::make(cell.mode, cell.fusion, spec.slice_encoder, spec.decoder_channels);
    spec.crp_stages = cfg.model.crp_stages;
    spec.num_classes = cfg.model.num_classes;
    Model<Real> model(spec, cell.seed);
    TrainConfig tc = cfg.train;
    tc.seed = cell.seed;
    std::string log;
    const auto t0 = std::chrono::steady_clock::now();
    train(model, ds, tc, [&](const EpochRecord& e) { log += epoch_log_line(e) + "\n"; });
    const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    write_file(dir / "train_log.jsonl", log);
    save_model(model, dir / "checkpoint.ckpt", {{"seed", cell.seed}});
    const auto ev = evaluate(model, ds, Split::test);
    write_eval_outputs(ev, ds, Split::test, dir, cell.name());
    nlohmann::ordered_json j{{"mode", to_string(cell.mode)},
                             {"fusion", to_string(cell.fusion)},
                             {"seed", cell.seed},
                             {"param_count", model.param_count()},
                             {"train_seconds", seconds},
                             {"report", ev.report.to_json()}};
    write_file(dir / "cell.json", j.dump(2) + "\n");
}

inline CompareRow read_cell(const CompareCell& cell, const std::filesystem::path& dir) {
    CompareRow row;
    row.cell = cell;
    const auto path = dir / "cell.json";
    if (!std::filesystem::exists(path)) return row;
    try {
        const auto j = nlohmann::json::parse(read_file(path));
        row.param_count = j.at("param_count");
        row.train_seconds = j.at("train_seconds");
        row.report = MetricsReport::from_json(j.at("report"));
        row.ok = true;
    } catch (const std::exception&) {
        row.ok = false;
    }
    return row;
}

/// Runs every cell in its own child process, at most `jobs` at a time, each
/// writing only under `root/cells/<cell name>/`. A cell whose process fails
/// is reported as a failed row.
inline CompareTable run_compare(const std::vector<CompareCell>& cells, const Dataset& ds, const ExperimentConfig& cfg,
                                const std::filesystem::path& root, std::size_t jobs, std::ostream* log = nullptr) {
    if (jobs == 0) throw ConfigError("jobs must be positive");
    namespace fs = std::filesystem;
    std::map<pid_t, std::size_t> running;
    std::vector<bool> exited_ok(cells.size(), false);
    auto reap_one = [&] {
        int status = 0;
        const pid_t pid = ::waitpid(-1, &status, 0);
        if (pid < 0) throw std::runtime_error("waitpid failed");
        auto it = running.find(pid);
        if (it == running.end()) return;
        const std::size_t i = it->second;
        exited_ok[i] = WIFEXITED(status) && WEXITSTATUS(status) == 0;
        if (log) *log << "cell " << cells[i].name() << (exited_ok[i] ? " done" : " FAILED") << std::endl;
        running.erase(it);
    };
    for (std::size_t i = 0; i < cells.size(); ++i) {
        while (running.size() >= jobs) reap_one();
        const fs::path dir = root / "cells" / cells[i].name();
        fs::remove_all(dir);
        if (log) *log << "cell " << cells[i].name() << " started" << std::endl;
        std::cout.flush();
        std::cerr.flush();
        const pid_t pid = ::fork();
        if (pid < 0) throw std::runtime_error("fork failed");
        if (pid == 0) {
            int code = 0;
            try {
                run_cell(cells[i], ds, cfg, dir);
            } catch (const std::exception& e) {
                std::cerr << "cell " << cells[i].name() << ": " << e.what() << std::endl;
                code = 1;
            }
            std::cout.flush();
            std::cerr.flush();
            ::_exit(code);
        }
        running.emplace(pid, i);
    }
    while (!running.empty()) reap_one();

    CompareTable table;
    for (std::size_t i = 0; i < cells.size(); ++i) {
        CompareRow row = read_cell(cells[i], root / "cells" / cells[i].name());
        row.ok = row.ok && exited_ok[i];
        table.rows.push_back(row);
    }
    table.medians = median_rows(table.rows);
    return table;
}

}  // namespace darefine

#endif
