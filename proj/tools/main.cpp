// Command-line front end: dataset building, baseline pretraining, oracle CV,
// grid searches, the strategy comparison sweep, policy maps, and plots.
#include <CLI11.hpp>

#include <cstdlib>
#include <iostream>

#include "spottunet/harness.hpp"

using namespace spottunet;
namespace fs = std::filesystem;

namespace {

std::uint64_t seed_override(std::uint64_t fallback) {
    if (const char* env = std::getenv("SPOTTUNET_SEED")) return std::strtoull(env, nullptr, 10);
    return fallback;
}

harness::ExperimentPlan resolve_plan(const std::string& plan_file) {
    harness::ExperimentPlan plan =
        plan_file.empty() ? harness::default_desk_plan() : harness::load_plan(plan_file);
    plan.experiment_seed = seed_override(plan.experiment_seed);
    plan.validate();
    return plan;
}

datagen::Dataset dataset_for(const harness::ExperimentPlan& plan) {
    return datagen::load_dataset(plan.dataset_root);
}

int run_dataset_build(const std::string& config_file, const std::string& out,
                      std::uint64_t seed_flag, bool seed_given) {
    datagen::DatasetConfig cfg;
    if (config_file.empty()) {
        cfg = datagen::desk_dataset_config();
    } else {
        std::ifstream f(config_file);
        if (!f) throw ConfigError("cannot open dataset config " + config_file);
        cfg = datagen::dataset_config_from_json(nlohmann::json::parse(f));
    }
    if (seed_given) cfg.seed = seed_flag;
    cfg.seed = seed_override(cfg.seed);
    auto ds = datagen::build_dataset(cfg);
    datagen::save_dataset(ds, out);
    std::cout << "dataset written to " << out << " (" << ds.domain_ids.size() << " domains, "
              << cfg.samples_per_domain << " samples each)\n";
    return 0;
}

int run_pretrain(const std::string& plan_file, const std::string& domain,
                 const std::string& profile, int seed) {
    auto plan = resolve_plan(plan_file);
    if (!profile.empty()) plan.profile = profile;
    auto ds = dataset_for(plan);
    auto net = harness::ensure_baseline(plan, ds, domain, seed);
    auto scores = strategies::evaluate_network(net, ds.test_split(domain), plan.tolerance_mm);
    std::cout << "baseline " << domain << " seed " << seed
              << ": held-out surface dice " << strategies::mean(scores) << "\n";
    std::cout << "checkpoint: " << harness::baseline_dir(plan, domain, seed).string() << "\n";
    return 0;
}

int run_oracle(const std::string& plan_file, const std::string& domain, int folds,
               const std::string& profile) {
    auto plan = resolve_plan(plan_file);
    if (!profile.empty()) plan.profile = profile;
    auto ds = dataset_for(plan);
    auto sched = strategies::pretrain_profile(plan.profile);
    auto scores = strategies::run_oracle_cv(ds, domain, folds, sched,
                                            derive_seed(plan.experiment_seed, "oracle", domain));
    double m = strategies::mean(scores);
    std::cout << "oracle " << domain << " (" << folds << "-fold):";
    for (double s : scores) std::cout << " " << s;
    std::cout << " | mean " << m << "\n";
    fs::create_directories(plan.experiment_dir());
    nlohmann::json j{{"domain", domain}, {"folds", folds}, {"fold_scores", scores}, {"mean", m}};
    std::ofstream(plan.experiment_dir() / ("oracle_" + domain + ".json")) << j.dump(2) << "\n";
    return 0;
}

int run_gridsearch(const std::string& which, const std::string& plan_file, int slices) {
    auto plan = resolve_plan(plan_file);
    auto ds = dataset_for(plan);
    if (which == "tau") {
        auto res = harness::run_grid_search_tau(plan, ds, slices);
        std::cout << "best tau: " << res.best_tau << "\n";
    } else if (which == "lambda") {
        auto res = harness::run_grid_search_lambda(plan, ds);
        for (const auto& [scarcity, lambda] : res.best_lambda)
            std::cout << "scarcity " << scarcity << ": best lambda " << lambda << "\n";
        harness::render_lambda_curves(res, plan.experiment_dir());
    } else {
        throw ConfigError("gridsearch expects 'tau' or 'lambda', got '" + which + "'");
    }
    return 0;
}

int run_compare(const std::string& plan_file) {
    auto plan = resolve_plan(plan_file);
    auto ds = dataset_for(plan);
    // pick up validated lambdas when the grid search ran before
    const fs::path lam = plan.experiment_dir() / "gridsearch_lambda.json";
    if (fs::exists(lam)) {
        auto j = nlohmann::json::parse(std::ifstream(lam));
        for (const auto& [k, v] : j.at("best_lambda").items())
            plan.lambda_by_scarcity[std::stoi(k)] = v.get<double>();
        std::cout << "using validated lambda per scarcity from " << lam.string() << "\n";
    }
    auto results = harness::run_comparison(plan, ds);
    std::cout << "comparison finished: " << results.rows.size() << " cells -> "
              << (plan.experiment_dir() / "results.csv").string() << "\n";
    for (const auto& name : results.strategy_names()) {
        std::cout << "  " << name << ":";
        std::set<int> sc;
        for (const auto& r : results.rows) sc.insert(r.scarcity);
        for (int s : sc) std::cout << " n" << s << "=" << results.mean_of(name, s);
        std::cout << "\n";
    }
    return 0;
}

int run_policy_map(const std::string& run_dir, const std::string& out,
                   const std::string& plan_file) {
    auto plan = resolve_plan(plan_file);
    auto ds = dataset_for(plan);
    auto model = checkpoint::load_dual_path(fs::path(run_dir) / "checkpoint");
    std::ifstream cf(fs::path(run_dir) / "config.json");
    if (!cf) throw ConfigError("no config.json under " + run_dir);
    auto cfg = nlohmann::json::parse(cf);
    const std::string target = cfg.at("pair").at(1).get<std::string>();
    auto stats = harness::collect_policy_frequencies(model, ds.test_split(target));
    harness::render_policy_map(stats, model.frozen.config, out);
    std::cout << "policy map for target " << target << " written to " << out << "\n";
    return 0;
}

int run_plot(const std::string& results_csv, const std::string& out,
             const std::string& strategies_csv) {
    std::ifstream f(results_csv);
    if (!f) throw ConfigError("cannot open results csv " + results_csv);
    std::string header;
    std::getline(f, header);

    auto split = [](const std::string& line) {
        std::vector<std::string> out;
        std::string cur;
        for (char c : line) {
            if (c == ',') {
                out.push_back(cur);
                cur.clear();
            } else
                cur += c;
        }
        out.push_back(cur);
        return out;
    };

    if (header.rfind("pair,strategy,", 0) == 0) {
        harness::ComparisonResults results;
        for (std::string line; std::getline(f, line);) {
            if (line.empty()) continue;
            auto c = split(line);
            harness::ResultRow row;
            auto us = c[0].find("__");
            row.pair = {c[0].substr(0, us), c[0].substr(us + 2)};
            row.strategy = c[1];
            row.scarcity = std::stoi(c[2]);
            row.seed = std::stoi(c[3]);
            row.mean_sdice = std::stod(c[4]);
            row.diverged = c[5] == "1";
            results.rows.push_back(std::move(row));
        }
        std::vector<std::string> filter;
        if (!strategies_csv.empty())
            for (const auto& s : split(strategies_csv)) filter.push_back(s);
        harness::render_scarcity_curves(results, filter, out);
        std::cout << "scarcity curves written to " << out << "\n";
        return 0;
    }
    if (header.rfind("scarcity,lambda,", 0) == 0) {
        harness::LambdaSearchResult res;
        for (std::string line; std::getline(f, line);) {
            if (line.empty()) continue;
            auto c = split(line);
            harness::LambdaSearchRow row;
            row.scarcity = std::stoi(c[0]);
            row.lambda = std::stod(c[1]);
            auto us = c[2].find("__");
            row.pair = {c[2].substr(0, us), c[2].substr(us + 2)};
            row.score = std::stod(c[3]);
            row.failed = c[4] == "1";
            res.table.push_back(std::move(row));
        }
        std::set<int> scarcities;
        std::set<double> lambdas;
        for (const auto& r : res.table) {
            scarcities.insert(r.scarcity);
            lambdas.insert(r.lambda);
        }
        for (int sc : scarcities) {
            double best = -1, best_l = 0;
            for (double l : lambdas) {
                double acc = 0;
                int n = 0;
                for (const auto& r : res.table)
                    if (r.scarcity == sc && r.lambda == l) {
                        acc += r.score;
                        ++n;
                    }
                if (!n) continue;
                res.curves[sc].push_back({l, acc / n});
                if (acc / n > best) {
                    best = acc / n;
                    best_l = l;
                }
            }
            res.best_lambda[sc] = best_l;
        }
        harness::render_lambda_curves(res, out);
        std::cout << "lambda curves written to " << out << "\n";
        return 0;
    }
    throw ConfigError("unrecognized csv header: " + header);
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"supervised domain adaptation with learned per-block fine-tuning policies"};
    app.require_subcommand(1);

    // dataset build
    auto* dataset = app.add_subcommand("dataset", "dataset utilities");
    dataset->require_subcommand(1);
    auto* build = dataset->add_subcommand("build", "generate the synthetic multi-domain benchmark");
    std::string ds_config, ds_out = "data/desk";
    std::uint64_t ds_seed = 0;
    bool ds_seed_given = false;
    build->add_option("--config", ds_config, "dataset config json (defaults to the desk benchmark)");
    build->add_option("--out", ds_out, "output directory")->required();
    build->add_option("--seed", ds_seed, "generator seed")->each([&](const std::string&) {
        ds_seed_given = true;
    });

    // pretrain
    auto* pretrain = app.add_subcommand("pretrain", "train a source-domain baseline");
    std::string pt_plan, pt_domain, pt_profile;
    int pt_seed = 0;
    pretrain->add_option("--plan", pt_plan, "experiment plan json (defaults to the desk plan)");
    pretrain->add_option("--domain", pt_domain, "source domain id")->required();
    pretrain->add_option("--profile", pt_profile, "schedule profile: desk or paper");
    pretrain->add_option("--seed", pt_seed, "baseline repeat index");

    // oracle
    auto* oracle = app.add_subcommand("oracle", "within-domain cross-validated upper bound");
    std::string or_plan, or_domain, or_profile;
    int or_folds = 3;
    oracle->add_option("--plan", or_plan, "experiment plan json");
    oracle->add_option("--domain", or_domain, "domain id")->required();
    oracle->add_option("--folds", or_folds, "number of folds");
    oracle->add_option("--profile", or_profile, "schedule profile: desk or paper");

    // gridsearch
    auto* grid = app.add_subcommand("gridsearch", "validate tau or lambda on the validation pairs");
    std::string gs_which, gs_plan;
    int gs_slices = -1;
    grid->add_option("which", gs_which, "tau or lambda")->required();
    grid->add_option("--plan", gs_plan, "experiment plan json");
    grid->add_option("--slices", gs_slices, "annotated slices for the tau search");

    // compare
    auto* compare = app.add_subcommand("compare", "run the strategy comparison sweep");
    std::string cp_plan;
    compare->add_option("--plan", cp_plan, "experiment plan json");

    // policy-map
    auto* pmap = app.add_subcommand("policy-map", "render per-block fine-tune frequencies");
    std::string pm_run, pm_out = "policy_map", pm_plan;
    pmap->add_option("--run", pm_run, "a spottunet run directory")->required();
    pmap->add_option("--out", pm_out, "output directory")->required();
    pmap->add_option("--plan", pm_plan, "experiment plan json");

    // plot
    auto* plot = app.add_subcommand("plot", "render curves from a results csv");
    std::string pl_results, pl_out = "plots", pl_strategies;
    plot->add_option("--results", pl_results, "results.csv or gridsearch_lambda.csv")->required();
    plot->add_option("--out", pl_out, "output directory")->required();
    plot->add_option("--strategies", pl_strategies, "comma-separated strategy filter");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    try {
        if (build->parsed()) return run_dataset_build(ds_config, ds_out, ds_seed, ds_seed_given);
        if (pretrain->parsed()) return run_pretrain(pt_plan, pt_domain, pt_profile, pt_seed);
        if (oracle->parsed()) return run_oracle(or_plan, or_domain, or_folds, or_profile);
        if (grid->parsed()) return run_gridsearch(gs_which, gs_plan, gs_slices);
        if (compare->parsed()) return run_compare(cp_plan);
        if (pmap->parsed()) return run_policy_map(pm_run, pm_out, pm_plan);
        if (plot->parsed()) return run_plot(pl_results, pl_out, pl_strategies);
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const DimensionError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "failure: " << e.what() << "\n";
        return 2;
    }
    return 0;
}
