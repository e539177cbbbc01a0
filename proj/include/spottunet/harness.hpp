#pragma once

#include <atomic>
#include <mutex>
#include <set>
#include <thread>

#include "spottunet/strategies.hpp"

namespace spottunet::harness {

namespace fs = std::filesystem;
using json = nlohmann::json;
using datagen::Dataset;
using datagen::Sample;
using datagen::ScarcitySetup;
using strategies::StrategyKind;
using strategies::StrategySpec;
using strategies::TrainSchedule;

struct Pair {
    std::string source;
    std::string target;

    std::string name() const { return source + "__" + target; }
    bool operator==(const Pair& o) const = default;
};

/// Full description of an experiment: pairs, grids, strategies, seeds.
/// Everything stochastic derives from experiment_seed via documented hashes.
struct ExperimentPlan {
    std::string experiment = "desk";
    std::string dataset_root = "data/desk";
    std::string runs_root = "runs";
    std::string profile = "desk";
    std::vector<Pair> pairs;             // test pairs
    std::vector<Pair> validation_pairs;  // for tau / lambda grid search
    std::vector<int> scarcity_grid;
    std::vector<StrategySpec> strategies;
    std::vector<int> seeds;
    std::vector<double> tau_grid;
    std::vector<double> lambda_grid;
    double tau = 0.1;
    std::uint64_t experiment_seed = 0;
    double tolerance_mm = 1.0;
    int gridsearch_slices = 8;
    int workers = 1;
    std::optional<TrainSchedule> pretrain_schedule;  // overrides the profile
    std::optional<TrainSchedule> finetune_schedule;  // used by the grid searches
    /// Validated lambda per scarcity setup (from the lambda grid search);
    /// applied to spottunet strategies when their cells are built.
    std::map<int, double> lambda_by_scarcity;

    TrainSchedule resolved_pretrain_schedule() const {
        return pretrain_schedule ? *pretrain_schedule : strategies::pretrain_profile(profile);
    }
    TrainSchedule resolved_finetune_schedule() const {
        return finetune_schedule ? *finetune_schedule : strategies::finetune_profile(profile);
    }

    void validate() const {
        if (pairs.empty()) throw ConfigError("plan has no test pairs");
        for (const auto& p : pairs)
            if (p.source == p.target) throw ConfigError("pair " + p.name() + " maps a domain to itself");
        for (const auto& p : validation_pairs) {
            if (p.source == p.target)
                throw ConfigError("validation pair " + p.name() + " maps a domain to itself");
            for (const auto& q : pairs)
                if (p == q)
                    throw ConfigError("pair " + p.name() + " is both a validation and a test pair");
        }
        if (seeds.empty()) throw ConfigError("plan needs at least one seed");
        if (scarcity_grid.empty()) throw ConfigError("plan needs a scarcity grid");
        if (workers < 1) throw ConfigError("workers must be >= 1");
    }

    fs::path experiment_dir() const { return fs::path(runs_root) / experiment; }
};

/// The default desk-scale plan: one held-out validation source domain with two
/// validation pairs, four test pairs from the canonical source.
inline ExperimentPlan default_desk_plan() {
    ExperimentPlan p;
    p.pairs = {{"d0_canonical", "d2_contrast"},
               {"d0_canonical", "d3_bias"},
               {"d0_canonical", "d4_noise"},
               {"d0_canonical", "d5_mixed"}};
    p.validation_pairs = {{"d1_gamma", "d3_bias"}, {"d1_gamma", "d5_mixed"}};
    p.scarcity_grid = {4, 8, 16, 28};
    p.seeds = {0, 1, 2};
    p.tau_grid = {0.01, 0.1, 0.5, 1.0, 2.0, 5.0};
    p.lambda_grid = {0.0, 0.003, 0.02};
    StrategySpec transfer;
    transfer.kind = StrategyKind::transfer_only;
    StrategySpec hist;
    hist.kind = StrategyKind::histogram_match_transfer;
    StrategySpec all;
    all.kind = StrategyKind::finetune_all;
    all.schedule = strategies::desk_finetune();
    StrategySpec firstk;
    firstk.kind = StrategyKind::finetune_first_k;
    firstk.first_k = 3;
    firstk.schedule = strategies::desk_finetune();
    StrategySpec spot;
    spot.kind = StrategyKind::spottunet;
    spot.lambda = 0.003;
    spot.tau = 0.1;
    spot.schedule = strategies::desk_finetune();
    p.strategies = {transfer, hist, all, firstk, spot};
    return p;
}

inline json pair_to_json(const Pair& p) { return json::array({p.source, p.target}); }

inline json plan_to_json(const ExperimentPlan& p) {
    json pairs = json::array(), vpairs = json::array(), strategies = json::array();
    for (const auto& x : p.pairs) pairs.push_back(pair_to_json(x));
    for (const auto& x : p.validation_pairs) vpairs.push_back(pair_to_json(x));
    for (const auto& s : p.strategies) strategies.push_back(strategies::strategy_to_json(s));
    json j{{"experiment", p.experiment},
                {"dataset_root", p.dataset_root},
                {"runs_root", p.runs_root},
                {"profile", p.profile},
                {"pairs", pairs},
                {"validation_pairs", vpairs},
                {"scarcity_grid", p.scarcity_grid},
                {"strategies", strategies},
                {"seeds", p.seeds},
                {"tau_grid", p.tau_grid},
                {"lambda_grid", p.lambda_grid},
                {"tau", p.tau},
                {"experiment_seed", p.experiment_seed},
                {"tolerance_mm", p.tolerance_mm},
                {"gridsearch_slices", p.gridsearch_slices},
                {"workers", p.workers}};
    if (p.pretrain_schedule) j["pretrain_schedule"] = strategies::schedule_to_json(*p.pretrain_schedule);
    if (p.finetune_schedule) j["finetune_schedule"] = strategies::schedule_to_json(*p.finetune_schedule);
    return j;
}

inline ExperimentPlan plan_from_json(const json& j) {
    ExperimentPlan p;
    p.experiment = j.value("experiment", p.experiment);
    p.dataset_root = j.value("dataset_root", p.dataset_root);
    p.runs_root = j.value("runs_root", p.runs_root);
    p.profile = j.value("profile", p.profile);
    auto read_pairs = [&](const char* key, std::vector<Pair>& out) {
        if (!j.contains(key)) return;
        out.clear();
        for (const auto& pj : j.at(key))
            out.push_back({pj.at(0).get<std::string>(), pj.at(1).get<std::string>()});
    };
    read_pairs("pairs", p.pairs);
    read_pairs("validation_pairs", p.validation_pairs);
    if (j.contains("scarcity_grid")) p.scarcity_grid = j.at("scarcity_grid").get<std::vector<int>>();
    if (j.contains("strategies")) {
        p.strategies.clear();
        for (const auto& sj : j.at("strategies"))
            p.strategies.push_back(strategies::strategy_from_json(sj));
    }
    if (j.contains("seeds")) p.seeds = j.at("seeds").get<std::vector<int>>();
    if (j.contains("tau_grid")) p.tau_grid = j.at("tau_grid").get<std::vector<double>>();
    if (j.contains("lambda_grid")) p.lambda_grid = j.at("lambda_grid").get<std::vector<double>>();
    p.tau = j.value("tau", p.tau);
    p.experiment_seed = j.value("experiment_seed", p.experiment_seed);
    p.tolerance_mm = j.value("tolerance_mm", p.tolerance_mm);
    p.gridsearch_slices = j.value("gridsearch_slices", p.gridsearch_slices);
    p.workers = j.value("workers", p.workers);
    if (j.contains("pretrain_schedule"))
        p.pretrain_schedule = strategies::schedule_from_json(j.at("pretrain_schedule"));
    if (j.contains("finetune_schedule"))
        p.finetune_schedule = strategies::schedule_from_json(j.at("finetune_schedule"));
    return p;
}

inline ExperimentPlan load_plan(const fs::path& file) {
    std::ifstream f(file);
    if (!f) throw std::runtime_error("cannot open plan file " + file.string());
    auto p = plan_from_json(json::parse(f));
    p.validate();
    return p;
}

// ---------------------------------------------------------------------------
// Baselines
// ---------------------------------------------------------------------------

inline fs::path baseline_dir(const ExperimentPlan& plan, const std::string& domain, int seed) {
    return plan.experiment_dir() / domain / "baseline_pretrain" / std::to_string(seed);
}

/// Trains (or reuses) a source-domain baseline and persists its run directory.
inline backbone::SegmentationNetwork<float> ensure_baseline(const ExperimentPlan& plan,
                                                            const Dataset& ds,
                                                            const std::string& domain,
                                                            int seed = 0) {
    const fs::path dir = baseline_dir(plan, domain, seed);
    if (fs::exists(dir / "result.json")) return checkpoint::load_network(dir / "checkpoint");

    const TrainSchedule sched = plan.resolved_pretrain_schedule();
    const std::uint64_t run_seed =
        derive_seed(plan.experiment_seed, domain, "baseline_pretrain", seed);
    auto [net, outcome] = strategies::pretrain_baseline(ds, domain, sched, run_seed);
    if (outcome.diverged) throw std::runtime_error("baseline pretraining diverged on " + domain);

    fs::create_directories(dir);
    StrategySpec spec;
    spec.kind = StrategyKind::baseline_pretrain;
    spec.schedule = sched;
    json cfg{{"strategy", strategies::strategy_to_json(spec)},
             {"domain", domain},
             {"seed", seed},
             {"run_seed", run_seed}};
    std::ofstream(dir / "config.json") << cfg.dump(2) << "\n";
    checkpoint::save_network(net, dir / "checkpoint", run_seed);
    strategies::write_log_csv(dir / "log.csv", outcome.log);
    auto scores = strategies::evaluate_network(net, ds.test_split(domain), plan.tolerance_mm);
    json result{{"mean_sdice", strategies::mean(scores)},
                {"per_image", scores},
                {"diverged", false}};
    std::ofstream(dir / "result.json") << result.dump(2) << "\n";
    return net;
}

/// Loads a baseline, failing with the exact command that would create it.
inline backbone::SegmentationNetwork<float> require_baseline(const ExperimentPlan& plan,
                                                             const std::string& domain,
                                                             int seed = 0) {
    const fs::path dir = baseline_dir(plan, domain, seed);
    if (!fs::exists(dir / "result.json"))
        throw std::runtime_error("missing baseline checkpoint for domain '" + domain + "' under " +
                                 dir.string() + " -- run `spottunet pretrain --domain " + domain +
                                 " --profile " + plan.profile + "` first");
    return checkpoint::load_network(dir / "checkpoint");
}

// ---------------------------------------------------------------------------
// Run cells
// ---------------------------------------------------------------------------

struct RunCell {
    Pair pair;
    StrategySpec strategy;
    int scarcity = 0;
    int seed = 0;
    bool validation = false;  // evaluate on the target's val split instead of test
};

inline fs::path cell_dir(const ExperimentPlan& plan, const RunCell& c) {
    return plan.experiment_dir() / c.pair.name() /
           (strategies::strategy_name(c.strategy) + "__n" + std::to_string(c.scarcity)) /
           std::to_string(c.seed);
}

struct CellResult {
    std::vector<double> scores;
    double mean_sdice = 0.0;
    bool diverged = false;
    std::vector<double> policy_frequencies;  // spottunet only
};

inline CellResult read_cell_result(const fs::path& dir) {
    std::ifstream f(dir / "result.json");
    if (!f) throw std::runtime_error("no result.json under " + dir.string());
    json j = json::parse(f);
    CellResult r;
    r.scores = j.at("per_image").get<std::vector<double>>();
    r.mean_sdice = j.at("mean_sdice").get<double>();
    r.diverged = j.at("diverged").get<bool>();
    if (j.contains("policy_frequencies"))
        r.policy_frequencies = j.at("policy_frequencies").get<std::vector<double>>();
    return r;
}

/// Executes one run cell (resumable: completed cells are never recomputed).
inline CellResult run_cell(const ExperimentPlan& plan, const Dataset& ds, const RunCell& cell) {
    const fs::path dir = cell_dir(plan, cell);
    if (fs::exists(dir / "result.json")) return read_cell_result(dir);

    auto baseline = require_baseline(plan, cell.pair.source);
    const std::string& target = cell.pair.target;
    const std::uint64_t subset_seed =
        derive_seed(plan.experiment_seed, "subset", cell.pair.name(), cell.scarcity, cell.seed);
    auto subset_ids = datagen::sample_scarce_subset(ds, ScarcitySetup{cell.scarcity}, subset_seed);
    auto subset = ds.split(target, subset_ids);
    auto val = ds.val_split(target);
    auto eval_set = cell.validation ? ds.val_split(target) : ds.test_split(target);
    const std::uint64_t run_seed =
        derive_seed(plan.experiment_seed, cell.pair.name(),
                    strategies::strategy_name(cell.strategy), cell.scarcity, cell.seed);

    CellResult res;
    fs::create_directories(dir);
    strategies::TrainOutcome outcome;
    switch (cell.strategy.kind) {
        case StrategyKind::transfer_only:
            res.scores = strategies::evaluate_network(baseline, eval_set, plan.tolerance_mm);
            break;
        case StrategyKind::histogram_match_transfer: {
            const auto& ref = ds.train_split(cell.pair.source)[0]->image;
            res.scores = strategies::evaluate_histogram_transfer(baseline, ref, eval_set,
                                                                 plan.tolerance_mm);
            break;
        }
        case StrategyKind::finetune_all:
        case StrategyKind::finetune_first_k: {
            auto [net, out] = strategies::finetune(baseline, cell.strategy, subset, val, run_seed);
            outcome = std::move(out);
            res.diverged = outcome.diverged;
            if (!res.diverged) {
                res.scores = strategies::evaluate_network(net, eval_set, plan.tolerance_mm);
                checkpoint::save_network(net, dir / "checkpoint", run_seed);
            }
            break;
        }
        case StrategyKind::spottunet: {
            auto [model, out] = strategies::finetune_spottunet(
                baseline, cell.strategy.lambda, cell.strategy.tau, cell.strategy.schedule, subset,
                val, run_seed);
            outcome = std::move(out);
            res.diverged = outcome.diverged;
            if (!res.diverged) {
                res.scores = strategies::evaluate_dual_argmax(model, eval_set, plan.tolerance_mm);
                checkpoint::save_dual_path(model, dir / "checkpoint");
                const int n = model.policy.config.num_blocks;
                std::vector<double> freq(static_cast<std::size_t>(n), 0.0);
                for (const Sample* s : eval_set) {
                    auto r = routing::routed_forward(
                        model,
                        Tensor<float>({1, 1, s->image.dim(0), s->image.dim(1)}, s->image.vec()),
                        routing::RouteMode::eval_argmax);
                    for (int l = 0; l < n; ++l)
                        freq[static_cast<std::size_t>(l)] +=
                            1.0 - r.indicators[0].hard[static_cast<std::size_t>(l)];
                }
                for (auto& f : freq) f /= static_cast<double>(eval_set.size());
                res.policy_frequencies = std::move(freq);
            }
            break;
        }
        default:
            throw ConfigError("strategy not runnable as a comparison cell: " +
                              std::string(strategies::to_string(cell.strategy.kind)));
    }
    res.mean_sdice = res.diverged ? 0.0 : strategies::mean(res.scores);

    json cfg{{"strategy", strategies::strategy_to_json(cell.strategy)},
             {"pair", pair_to_json(cell.pair)},
             {"scarcity", cell.scarcity},
             {"seed", cell.seed},
             {"run_seed", run_seed},
             {"subset_seed", subset_seed},
             {"subset_ids", subset_ids},
             {"eval_split", cell.validation ? "val" : "test"},
             {"eval_ids", cell.validation ? ds.splits.val : ds.splits.test}};
    std::ofstream(dir / "config.json") << cfg.dump(2) << "\n";
    if (!outcome.log.empty()) strategies::write_log_csv(dir / "log.csv", outcome.log);
    json result{{"mean_sdice", res.mean_sdice},
                {"per_image", res.scores},
                {"diverged", res.diverged}};
    if (!res.policy_frequencies.empty()) result["policy_frequencies"] = res.policy_frequencies;
    std::ofstream(dir / "result.json") << result.dump(2) << "\n";
    return res;
}

/// Runs a batch of cells, optionally on parallel worker threads. Cell results
/// land in their run directories; ordering never affects their contents.
inline void run_cells(const ExperimentPlan& plan, const Dataset& ds,
                      const std::vector<RunCell>& cells) {
    if (plan.workers <= 1) {
        for (const auto& c : cells) run_cell(plan, ds, c);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    std::mutex err_mutex;
    std::string first_error;
    for (int w = 0; w < plan.workers; ++w)
        pool.emplace_back([&] {
            for (;;) {
                std::size_t i = next.fetch_add(1);
                if (i >= cells.size()) return;
                try {
                    run_cell(plan, ds, cells[i]);
                } catch (const std::exception& e) {
                    std::lock_guard<std::mutex> lock(err_mutex);
                    if (first_error.empty()) first_error = e.what();
                }
            }
        });
    for (auto& t : pool) t.join();
    if (!first_error.empty()) throw std::runtime_error(first_error);
}

// ---------------------------------------------------------------------------
// Comparison sweep
// ---------------------------------------------------------------------------

struct ResultRow {
    Pair pair;
    std::string strategy;
    int scarcity = 0;
    int seed = 0;
    double mean_sdice = 0.0;
    bool diverged = false;
    std::vector<double> per_image;
};

struct ComparisonResults {
    std::vector<ResultRow> rows;

    /// Mean over every non-diverged (pair, seed) cell of one strategy/scarcity.
    double mean_of(const std::string& strategy, int scarcity) const {
        double acc = 0;
        int n = 0;
        for (const auto& r : rows)
            if (r.strategy == strategy && r.scarcity == scarcity) {
                acc += r.mean_sdice;
                ++n;
            }
        return n ? acc / n : 0.0;
    }

    std::vector<std::string> strategy_names() const {
        std::vector<std::string> out;
        for (const auto& r : rows)
            if (std::find(out.begin(), out.end(), r.strategy) == out.end())
                out.push_back(r.strategy);
        return out;
    }
};

namespace detail_harness {

inline std::string fmt6(double v) {
    char buf[48];
    std::snprintf(buf, sizeof buf, "%.6f", v);
    return buf;
}

}  // namespace detail_harness

/// All comparison cells of the plan in deterministic order. SpotTUnet cells
/// pick up the per-scarcity validated lambda when one is recorded.
inline std::vector<RunCell> comparison_cells(const ExperimentPlan& plan) {
    std::vector<RunCell> cells;
    for (const auto& pair : plan.pairs)
        for (const auto& strat : plan.strategies)
            for (int scarcity : plan.scarcity_grid)
                for (int seed : plan.seeds) {
                    StrategySpec s = strat;
                    if (s.kind == StrategyKind::spottunet) {
                        auto it = plan.lambda_by_scarcity.find(scarcity);
                        if (it != plan.lambda_by_scarcity.end()) s.lambda = it->second;
                    }
                    cells.push_back({pair, s, scarcity, seed, false});
                }
    return cells;
}

/// Runs (or resumes) the full comparison, then aggregates results.csv and
/// paired one-sided significance tests between every strategy pair.
inline ComparisonResults run_comparison(const ExperimentPlan& plan, const Dataset& ds) {
    plan.validate();
    for (const auto& pair : plan.pairs) require_baseline(plan, pair.source);

    auto cells = comparison_cells(plan);
    run_cells(plan, ds, cells);

    ComparisonResults results;
    for (const auto& c : cells) {
        CellResult r = read_cell_result(cell_dir(plan, c));
        ResultRow row;
        row.pair = c.pair;
        row.strategy = strategies::strategy_name(c.strategy);
        row.scarcity = c.scarcity;
        row.seed = c.seed;
        row.mean_sdice = r.mean_sdice;
        row.diverged = r.diverged;
        row.per_image = std::move(r.scores);
        results.rows.push_back(std::move(row));
    }

    fs::create_directories(plan.experiment_dir());
    {
        std::ofstream f(plan.experiment_dir() / "results.csv");
        f << "pair,strategy,scarcity,seed,mean_sdice,diverged\n";
        for (const auto& r : results.rows)
            f << r.pair.name() << "," << r.strategy << "," << r.scarcity << "," << r.seed << ","
              << detail_harness::fmt6(r.mean_sdice) << "," << (r.diverged ? 1 : 0) << "\n";
    }
    {
        // paired per-image scores pooled over (pair, seed, image)
        auto names = results.strategy_names();
        std::ofstream f(plan.experiment_dir() / "significance.csv");
        f << "scarcity,strategy_a,strategy_b,n_pairs,p_value\n";
        for (int scarcity : plan.scarcity_grid)
            for (const auto& a : names)
                for (const auto& b : names) {
                    if (a == b) continue;
                    std::vector<double> xs, ys;
                    for (const auto& ra : results.rows) {
                        if (ra.strategy != a || ra.scarcity != scarcity || ra.diverged) continue;
                        for (const auto& rb : results.rows) {
                            if (rb.strategy != b || rb.scarcity != scarcity || rb.diverged)
                                continue;
                            if (!(rb.pair == ra.pair) || rb.seed != ra.seed) continue;
                            for (std::size_t i = 0;
                                 i < std::min(ra.per_image.size(), rb.per_image.size()); ++i) {
                                xs.push_back(ra.per_image[i]);
                                ys.push_back(rb.per_image[i]);
                            }
                        }
                    }
                    if (xs.empty()) continue;
                    double p = metrics::wilcoxon_one_sided(xs, ys);
                    f << scarcity << "," << a << "," << b << "," << xs.size() << ","
                      << detail_harness::fmt6(p) << "\n";
                }
    }
    return results;
}

// ---------------------------------------------------------------------------
// Grid searches
// ---------------------------------------------------------------------------

struct TauSearchRow {
    double tau = 0.0;
    Pair pair;
    double score = 0.0;
    bool failed = false;
};

struct TauSearchResult {
    double best_tau = 0.0;
    std::vector<TauSearchRow> table;
};

/// Temperature search on the validation pairs: SpotTUnet with lambda = 0 at a
/// fixed scarcity; diverged (NaN-loss) runs are flagged and excluded from the
/// argmax rather than aborting the sweep.
inline TauSearchResult run_grid_search_tau(const ExperimentPlan& plan, const Dataset& ds,
                                           int fixed_slices = -1) {
    if (plan.tau_grid.empty()) throw ConfigError("tau grid is empty");
    if (plan.validation_pairs.empty()) throw ConfigError("plan has no validation pairs");
    if (fixed_slices <= 0) fixed_slices = plan.gridsearch_slices;
    for (const auto& pair : plan.validation_pairs) require_baseline(plan, pair.source);

    std::vector<RunCell> cells;
    for (double tau : plan.tau_grid)
        for (const auto& pair : plan.validation_pairs) {
            StrategySpec s;
            s.kind = StrategyKind::spottunet;
            s.lambda = 0.0;
            s.tau = tau;
            s.schedule = plan.resolved_finetune_schedule();
            cells.push_back({pair, s, fixed_slices, 0, true});
        }
    run_cells(plan, ds, cells);

    TauSearchResult res;
    for (std::size_t i = 0; i < cells.size(); ++i) {
        CellResult r = read_cell_result(cell_dir(plan, cells[i]));
        res.table.push_back(
            {cells[i].strategy.tau, cells[i].pair, r.mean_sdice, r.diverged});
    }
    double best_score = -1.0;
    for (double tau : plan.tau_grid) {
        double acc = 0;
        int n = 0;
        bool any_failed = false;
        for (const auto& row : res.table)
            if (row.tau == tau) {
                if (row.failed)
                    any_failed = true;
                else {
                    acc += row.score;
                    ++n;
                }
            }
        if (n == 0 || any_failed) continue;  // excluded from the argmax
        if (acc / n > best_score) {
            best_score = acc / n;
            res.best_tau = tau;
        }
    }
    if (best_score < 0) {
        // every tau had a failure: fall back to the best non-diverged mean
        for (double tau : plan.tau_grid) {
            double acc = 0;
            int n = 0;
            for (const auto& row : res.table)
                if (row.tau == tau && !row.failed) {
                    acc += row.score;
                    ++n;
                }
            if (n > 0 && acc / n > best_score) {
                best_score = acc / n;
                res.best_tau = tau;
            }
        }
    }
    if (best_score < 0) throw std::runtime_error("every tau diverged on every validation pair");

    fs::create_directories(plan.experiment_dir());
    std::ofstream f(plan.experiment_dir() / "gridsearch_tau.csv");
    f << "tau,pair,score,failed\n";
    for (const auto& row : res.table)
        f << row.tau << "," << row.pair.name() << "," << detail_harness::fmt6(row.score) << ","
          << (row.failed ? 1 : 0) << "\n";
    std::ofstream(plan.experiment_dir() / "gridsearch_tau.json")
        << json{{"best_tau", res.best_tau}, {"fixed_slices", fixed_slices}}.dump(2) << "\n";
    return res;
}

struct LambdaSearchRow {
    int scarcity = 0;
    double lambda = 0.0;
    Pair pair;
    double score = 0.0;
    bool failed = false;
};

struct LambdaSearchResult {
    std::map<int, double> best_lambda;             // scarcity -> argmax lambda
    std::map<int, std::vector<std::pair<double, double>>> curves;  // scarcity -> (lambda, mean)
    std::vector<LambdaSearchRow> table;
};

/// Lambda search per scarcity setup on the validation pairs, tau fixed.
inline LambdaSearchResult run_grid_search_lambda(const ExperimentPlan& plan, const Dataset& ds) {
    if (plan.lambda_grid.empty()) throw ConfigError("lambda grid is empty");
    if (plan.scarcity_grid.empty()) throw ConfigError("scarcity grid is empty");
    if (plan.validation_pairs.empty()) throw ConfigError("plan has no validation pairs");
    for (const auto& pair : plan.validation_pairs) require_baseline(plan, pair.source);

    std::vector<RunCell> cells;
    for (int scarcity : plan.scarcity_grid)
        for (double lambda : plan.lambda_grid)
            for (const auto& pair : plan.validation_pairs) {
                StrategySpec s;
                s.kind = StrategyKind::spottunet;
                s.lambda = lambda;
                s.tau = plan.tau;
                s.schedule = plan.resolved_finetune_schedule();
                cells.push_back({pair, s, scarcity, 0, true});
            }
    run_cells(plan, ds, cells);

    LambdaSearchResult res;
    for (const auto& c : cells) {
        CellResult r = read_cell_result(cell_dir(plan, c));
        res.table.push_back({c.scarcity, c.strategy.lambda, c.pair,
                             r.diverged ? 0.0 : r.mean_sdice, r.diverged});
    }
    for (int scarcity : plan.scarcity_grid) {
        double best = -1.0, best_lambda = plan.lambda_grid.front();
        for (double lambda : plan.lambda_grid) {
            double acc = 0;
            int n = 0;
            for (const auto& row : res.table)
                if (row.scarcity == scarcity && row.lambda == lambda) {
                    acc += row.score;  // diverged rows carry score 0
                    ++n;
                }
            const double m = n ? acc / n : 0.0;
            res.curves[scarcity].push_back({lambda, m});
            if (m > best) {
                best = m;
                best_lambda = lambda;
            }
        }
        res.best_lambda[scarcity] = best_lambda;
    }

    fs::create_directories(plan.experiment_dir());
    std::ofstream f(plan.experiment_dir() / "gridsearch_lambda.csv");
    f << "scarcity,lambda,pair,score,failed\n";
    for (const auto& row : res.table)
        f << row.scarcity << "," << row.lambda << "," << row.pair.name() << ","
          << detail_harness::fmt6(row.score) << "," << (row.failed ? 1 : 0) << "\n";
    json best;
    for (const auto& [scarcity, lambda] : res.best_lambda)
        best[std::to_string(scarcity)] = lambda;
    std::ofstream(plan.experiment_dir() / "gridsearch_lambda.json")
        << json{{"best_lambda", best}, {"tau", plan.tau}}.dump(2) << "\n";
    return res;
}

// ---------------------------------------------------------------------------
// Policy statistics and rendering
// ---------------------------------------------------------------------------

/// Per-block fine-tune frequencies over a sample set (the layer-wise
/// domain-shift fingerprint).
struct PolicyStats {
    std::vector<double> per_block_frequency;  // fraction routed to the tuned copy
    std::vector<std::string> block_names;
    int n_inputs = 0;
};

enum class PolicyCollectMode { eval_argmax, train_sample };

inline PolicyStats collect_policy_frequencies(
    const routing::DualPathModel<float>& model, const std::vector<const Sample*>& test_set,
    PolicyCollectMode mode = PolicyCollectMode::eval_argmax, Rng* rng = nullptr) {
    if (test_set.empty()) throw ConfigError("policy frequencies need a nonempty sample set");
    const int n = model.policy.config.num_blocks;
    PolicyStats stats;
    stats.per_block_frequency.assign(static_cast<std::size_t>(n), 0.0);
    for (const auto& b : model.frozen.config.blocks) stats.block_names.push_back(b.name);
    stats.n_inputs = static_cast<int>(test_set.size());
    Rng local(model.gumbel.seed);
    for (const Sample* s : test_set) {
        Tensor<float> x({1, 1, s->image.dim(0), s->image.dim(1)}, s->image.vec());
        auto res = routing::routed_forward(
            model, x,
            mode == PolicyCollectMode::eval_argmax ? routing::RouteMode::eval_argmax
                                                   : routing::RouteMode::train_sample,
            nullptr, rng ? rng : &local);
        for (int l = 0; l < n; ++l)
            stats.per_block_frequency[static_cast<std::size_t>(l)] +=
                1.0 - res.indicators[0].hard[static_cast<std::size_t>(l)];
    }
    for (auto& f : stats.per_block_frequency) f /= static_cast<double>(test_set.size());
    return stats;
}

/// CSV (block_name, kind, frequency) plus an SVG of the network in U-shape:
/// rectangles for residual/plain blocks, triangles for the x2 up/down
/// convolutions, fill intensity proportional to the fine-tune frequency.
inline void render_policy_map(const PolicyStats& stats, const backbone::NetworkConfig& layout,
                              const fs::path& out_dir) {
    if (static_cast<int>(stats.per_block_frequency.size()) != layout.num_routable_blocks())
        throw DimensionError("policy stats and layout disagree on block count");
    fs::create_directories(out_dir);
    {
        std::ofstream f(out_dir / "policy_map.csv");
        f << "block_name,kind,frequency\n";
        for (std::size_t i = 0; i < layout.blocks.size(); ++i)
            f << layout.blocks[i].name << "," << backbone::to_string(layout.blocks[i].kind) << ","
              << detail_harness::fmt6(stats.per_block_frequency[i]) << "\n";
    }

    const int cell = 42, pad = 30, shape = 30;
    const int n = layout.num_routable_blocks();
    std::vector<int> level(static_cast<std::size_t>(n));
    int depth = 0;
    for (int i = 0; i < n; ++i) {
        const auto& b = layout.blocks[static_cast<std::size_t>(i)];
        if (b.scale == backbone::Scale::down2) ++depth;
        if (b.scale == backbone::Scale::up2) --depth;
        level[static_cast<std::size_t>(i)] = depth;
    }
    const int max_level = *std::max_element(level.begin(), level.end());
    const int width = pad * 2 + n * cell;
    const int height = pad * 2 + (max_level + 1) * cell + 20;

    std::ostringstream svg;
    svg << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n";
    svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\""
        << height << "\" viewBox=\"0 0 " << width << " " << height << "\">\n";
    for (int i = 0; i < n; ++i) {
        const auto& b = layout.blocks[static_cast<std::size_t>(i)];
        const double freq = stats.per_block_frequency[static_cast<std::size_t>(i)];
        const int x = pad + i * cell;
        const int y = pad + level[static_cast<std::size_t>(i)] * cell;
        const int r = 255;
        const int g = static_cast<int>(255 - 155 * freq);
        const int bcol = static_cast<int>(255 - 225 * freq);
        std::ostringstream fill;
        fill << "rgb(" << r << "," << g << "," << bcol << ")";
        const std::string common = " fill=\"" + fill.str() + "\" stroke=\"black\" data-block=\"" +
                                   b.name + "\" data-frequency=\"" +
                                   detail_harness::fmt6(freq) + "\"";
        if (b.kind == backbone::BlockKind::down_conv) {
            svg << "  <polygon points=\"" << x << "," << y << " " << x + shape << "," << y << " "
                << x + shape / 2 << "," << y + shape << "\"" << common << "/>\n";
        } else if (b.kind == backbone::BlockKind::up_conv) {
            svg << "  <polygon points=\"" << x << "," << y + shape << " " << x + shape << ","
                << y + shape << " " << x + shape / 2 << "," << y << "\"" << common << "/>\n";
        } else {
            svg << "  <rect x=\"" << x << "\" y=\"" << y << "\" width=\"" << shape
                << "\" height=\"" << shape << "\"" << common << "/>\n";
        }
    }
    svg << "  <text x=\"" << pad << "\" y=\"" << height - 8
        << "\" font-size=\"11\">fine-tune frequency over " << stats.n_inputs
        << " inputs (dark = tuned copy)</text>\n";
    svg << "</svg>\n";
    std::ofstream(out_dir / "policy_map.svg") << svg.str();
}

// ---------------------------------------------------------------------------
// Curve rendering
// ---------------------------------------------------------------------------

namespace detail_harness {

struct Series {
    std::string label;
    std::vector<std::pair<double, double>> points;  // (x, score)
    std::optional<double> highlight_x;
};

/// Shared polyline plot: x positions are grid indices, y spans [0, 1] scores.
/// Every numeric value is embedded as the same fmt6 string the CSV uses.
inline std::string render_series_svg(const std::vector<Series>& series,
                                     const std::string& x_label) {
    const int width = 560, height = 360, padl = 50, padb = 40, padt = 20, padr = 20;
    std::vector<double> xs;
    for (const auto& s : series)
        for (const auto& [x, _] : s.points)
            if (std::find(xs.begin(), xs.end(), x) == xs.end()) xs.push_back(x);
    std::sort(xs.begin(), xs.end());
    auto xi = [&](double x) {
        const auto it = std::find(xs.begin(), xs.end(), x);
        const double idx = static_cast<double>(it - xs.begin());
        const double span = xs.size() > 1 ? static_cast<double>(xs.size() - 1) : 1.0;
        return padl + idx / span * (width - padl - padr);
    };
    auto yi = [&](double score) { return padt + (1.0 - score) * (height - padt - padb); };

    static const char* palette[] = {"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728",
                                    "#9467bd", "#8c564b", "#e377c2"};
    std::ostringstream svg;
    svg << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n";
    svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\""
        << height << "\" viewBox=\"0 0 " << width << " " << height << "\">\n";
    svg << "  <line x1=\"" << padl << "\" y1=\"" << yi(0) << "\" x2=\"" << width - padr
        << "\" y2=\"" << yi(0) << "\" stroke=\"#888\"/>\n";
    svg << "  <line x1=\"" << padl << "\" y1=\"" << yi(0) << "\" x2=\"" << padl << "\" y2=\""
        << yi(1) << "\" stroke=\"#888\"/>\n";
    for (double x : xs)
        svg << "  <text x=\"" << xi(x) << "\" y=\"" << height - 12
            << "\" font-size=\"10\" text-anchor=\"middle\">" << x << "</text>\n";
    svg << "  <text x=\"" << (padl + width - padr) / 2 << "\" y=\"" << height - 2
        << "\" font-size=\"11\" text-anchor=\"middle\">" << x_label << "</text>\n";
    int ci = 0;
    for (const auto& s : series) {
        const char* color = palette[ci % 7];
        std::ostringstream pts;
        for (const auto& [x, score] : s.points) pts << xi(x) << "," << yi(score) << " ";
        svg << "  <polyline points=\"" << pts.str() << "\" fill=\"none\" stroke=\"" << color
            << "\" stroke-width=\"2\" data-label=\"" << s.label << "\" data-values=\"";
        for (std::size_t i = 0; i < s.points.size(); ++i)
            svg << (i ? ";" : "") << fmt6(s.points[i].second);
        svg << "\"/>\n";
        for (const auto& [x, score] : s.points)
            svg << "  <circle cx=\"" << xi(x) << "\" cy=\"" << yi(score) << "\" r=\""
                << (s.highlight_x && *s.highlight_x == x ? 6 : 2.5) << "\" fill=\"" << color
                << "\" data-value=\"" << fmt6(score) << "\"/>\n";
        svg << "  <text x=\"" << width - padr - 4 << "\" y=\"" << padt + 14 * (ci + 1)
            << "\" font-size=\"11\" text-anchor=\"end\" fill=\"" << color << "\">" << s.label
            << "</text>\n";
        ++ci;
    }
    svg << "</svg>\n";
    return svg.str();
}

}  // namespace detail_harness

/// Score-vs-lambda curves (one line per scarcity setup, optimum emphasized).
inline void render_lambda_curves(const LambdaSearchResult& res, const fs::path& out_dir) {
    fs::create_directories(out_dir);
    std::vector<detail_harness::Series> series;
    {
        std::ofstream f(out_dir / "lambda_curves.csv");
        f << "scarcity,lambda,mean_score,is_optimal\n";
        for (const auto& [scarcity, curve] : res.curves) {
            detail_harness::Series s;
            s.label = "n=" + std::to_string(scarcity);
            const double best = res.best_lambda.at(scarcity);
            s.highlight_x = best;
            for (const auto& [lambda, score] : curve) {
                s.points.push_back({lambda, score});
                f << scarcity << "," << lambda << "," << detail_harness::fmt6(score) << ","
                  << (lambda == best ? 1 : 0) << "\n";
            }
            series.push_back(std::move(s));
        }
    }
    std::ofstream(out_dir / "lambda_curves.svg")
        << detail_harness::render_series_svg(series, "lambda");
}

/// Score-vs-available-slices curves, one line per strategy. An explicit
/// filter must name existing strategies.
inline void render_scarcity_curves(const ComparisonResults& results,
                                   const std::vector<std::string>& strategy_filter,
                                   const fs::path& out_dir) {
    auto names = results.strategy_names();
    std::vector<std::string> chosen;
    if (strategy_filter.empty()) {
        chosen = names;
    } else {
        for (const auto& f : strategy_filter)
            if (std::find(names.begin(), names.end(), f) != names.end()) chosen.push_back(f);
        if (chosen.empty()) {
            std::string msg = "strategy filter matched nothing; available:";
            for (const auto& n : names) msg += " " + n;
            throw ConfigError(msg);
        }
    }
    std::set<int> scarcities;
    for (const auto& r : results.rows) scarcities.insert(r.scarcity);

    fs::create_directories(out_dir);
    std::vector<detail_harness::Series> series;
    std::ofstream f(out_dir / "scarcity_curves.csv");
    f << "strategy,scarcity,mean_score\n";
    for (const auto& name : chosen) {
        detail_harness::Series s;
        s.label = name;
        for (int scarcity : scarcities) {
            const double m = results.mean_of(name, scarcity);
            s.points.push_back({static_cast<double>(scarcity), m});
            f << name << "," << scarcity << "," << detail_harness::fmt6(m) << "\n";
        }
        series.push_back(std::move(s));
    }
    std::ofstream(out_dir / "scarcity_curves.svg")
        << detail_harness::render_series_svg(series, "available target slices");
}

}  // namespace spottunet::harness
