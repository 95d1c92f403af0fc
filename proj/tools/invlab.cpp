// invlab: run the desk-scale invariance studies, render reports, generate
// synthetic invariant datasets, and evaluate PAC-Bayes bounds on checkpoints.

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "invlab/dataset.hpp"
#include "invlab/experiments.hpp"
#include "invlab/io.hpp"
#include "invlab/model.hpp"
#include "invlab/pac_bayes.hpp"

namespace {

using namespace invlab;

int cmd_run(const std::string& config_path, const std::map<std::string, std::string>& overrides,
            bool seed_flag_given) {
    std::map<std::string, std::string> kv;
    try {
        kv = parse_config_text(read_file(config_path));
    } catch (const std::exception& e) {
        std::cerr << "invlab run: " << e.what() << "\n";
        return 2;
    }
    // precedence: flags > INVLAB_SEED > file
    if (const char* env_seed = std::getenv("INVLAB_SEED"); env_seed && !seed_flag_given)
        kv["seed"] = env_seed;
    for (const auto& [k, v] : overrides) kv[k] = v;

    StudySummary summary;
    try {
        auto cfg = ExperimentConfig::from_map(kv);
        summary = run_experiment(cfg);
        std::cout << render_report(cfg.out_dir);
    } catch (const std::invalid_argument& e) {
        std::cerr << "invlab run: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "invlab run: " << e.what() << "\n";
        return 1;
    }
    return summary.pass ? 0 : 1;
}

int cmd_report(const std::string& dir, bool plot) {
    try {
        std::cout << render_report(dir, plot);
    } catch (const std::exception& e) {
        std::cerr << "invlab report: " << e.what() << "\n";
        return 2;
    }
    return 0;
}

int cmd_gen_data(const std::string& task_name, const std::string& out_dir, std::uint64_t seed,
                 std::size_t n_train, std::size_t n_test, std::size_t n_ood, std::size_t p,
                 std::size_t classes, std::size_t k, std::size_t dims,
                 const std::string& blocks_str) {
    try {
        InvariantTaskSpec task;
        if (task_name == "c2_sign") {
            task = c2_sign_task(n_train, n_test, seed);
        } else if (task_name == "grid_rotation") {
            task = grid_rotation_task(p, classes, n_train, n_test, n_ood, seed);
        } else if (task_name == "pointset") {
            std::vector<std::size_t> blocks;
            if (!blocks_str.empty()) {
                std::istringstream ss(blocks_str);
                std::string tok;
                while (std::getline(ss, tok, ',')) blocks.push_back(std::stoull(tok));
            }
            task = permutation_pointset_task(k, dims, n_train, n_test, n_ood, seed, blocks);
        } else if (task_name == "permutation_regression") {
            task = permutation_regression_task(k, n_train, n_test, seed);
        } else {
            std::cerr << "invlab gen-data: unknown task '" << task_name
                      << "' (use c2_sign | grid_rotation | pointset | permutation_regression)\n";
            return 2;
        }
        SplitRng rng(seed);
        auto splits = generate(task, rng);
        std::filesystem::create_directories(out_dir);
        save_dataset_csv(splits.train, *task.group, out_dir + "/train.csv");
        save_dataset_csv(splits.test, *task.group, out_dir + "/test.csv");
        if (splits.ood.size() > 0) save_dataset_csv(splits.ood, *task.group, out_dir + "/ood.csv");
        std::cout << "wrote " << out_dir << "/train.csv (" << splits.train.size() << "), test.csv ("
                  << splits.test.size() << ")"
                  << (splits.ood.size() > 0
                          ? ", ood.csv (" + std::to_string(splits.ood.size()) + ")"
                          : "")
                  << "\n";
    } catch (const std::exception& e) {
        std::cerr << "invlab gen-data: " << e.what() << "\n";
        return 2;
    }
    return 0;
}

int cmd_bound(const std::string& ckpt_path, const std::string& dataset_path,
              const std::string& mode, int da_m, double prior_std, double posterior_std,
              double delta, double beta, int draws, std::uint64_t seed,
              const std::string& out_file) {
    try {
        auto loaded = load_dataset_csv(dataset_path);
        GroupPtr group = loaded.group;
        Checkpoint ck = load_checkpoint(ckpt_path, group);

        GaussianWeightDistribution q;
        q.mean = ck.params;
        q.std.assign(ck.params.size(), posterior_std);
        GaussianWeightDistribution p = GaussianWeightDistribution::isotropic(
            ParamVector{Vec(ck.params.size(), 0.0)}, prior_std);

        BoundInputs inputs;
        inputs.n = loaded.data.size();
        inputs.delta = delta;
        if (beta > 0.0) inputs.beta = beta;
        inputs.mc_samples_for_Q_risk = draws;

        SplitRng rng(seed);
        BoundReport rep;
        if (mode == "baseline") {
            rep = bound_baseline(ck.spec, q, p, loaded.data, inputs, rng);
        } else if (mode == "da") {
            rep = bound_da(ck.spec, q, p, loaded.data, *group, inputs,
                           DaEstimator::exact_average(), rng);
        } else if (mode == "da_mc") {
            rep = bound_da(ck.spec, q, p, loaded.data, *group, inputs,
                           DaEstimator::monte_carlo(da_m), rng);
        } else if (mode == "fa") {
            rep = bound_fa_linear(ck.spec, q, p, loaded.data, *group, inputs, rng);
        } else {
            std::cerr << "invlab bound: unknown mode '" << mode
                      << "' (use baseline | da | da_mc | fa)\n";
            return 2;
        }
        std::string text = rep.to_json().dump(2) + "\n";
        std::cout << text;
        if (!out_file.empty()) write_file(out_file, text);
    } catch (const std::exception& e) {
        std::cerr << "invlab bound: " << e.what() << "\n";
        return 2;
    }
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"invlab: invariance, data augmentation, and PAC-Bayes studies"};
    app.require_subcommand(1);

    // run
    auto* run = app.add_subcommand("run", "run a study from a key = value config file");
    std::string config_path;
    run->add_option("config", config_path, "config file")->required();
    std::vector<std::string> param_overrides;
    std::string run_seed, run_reps, run_out, run_jobs;
    run->add_option("--seed", run_seed, "override seed");
    run->add_option("--replicates", run_reps, "override replicate count");
    run->add_option("--out", run_out, "override output directory");
    run->add_option("--jobs", run_jobs, "parallel replicate lanes");
    run->add_option("--param", param_overrides, "override a study parameter, key=value");

    // report
    auto* report = app.add_subcommand("report", "render a completed run directory");
    std::string report_dir;
    bool plot = false;
    report->add_option("dir", report_dir, "run directory")->required();
    report->add_flag("--plot", plot, "also emit gnuplot-compatible .dat files");

    // gen-data
    auto* gen = app.add_subcommand("gen-data", "generate a synthetic invariant dataset");
    std::string task_name, gen_out = "invlab_data", blocks_str;
    std::uint64_t gen_seed = 0;
    std::size_t gn_train = 2000, gn_test = 500, gn_ood = 500, gp = 6, gclasses = 3, gk = 4,
                gdims = 2;
    gen->add_option("task", task_name,
                    "c2_sign | grid_rotation | pointset | permutation_regression")
        ->required();
    gen->add_option("--out", gen_out, "output directory");
    gen->add_option("--seed", gen_seed, "seed");
    gen->add_option("--n-train", gn_train, "training examples");
    gen->add_option("--n-test", gn_test, "test examples");
    gen->add_option("--n-ood", gn_ood, "out-of-distribution examples");
    gen->add_option("--p", gp, "grid side (grid_rotation)");
    gen->add_option("--classes", gclasses, "class count (grid_rotation)");
    gen->add_option("--k", gk, "points / coordinates (pointset, permutation_regression)");
    gen->add_option("--dims", gdims, "dimensions per point (pointset)");
    gen->add_option("--blocks", blocks_str, "comma-separated block sizes for partial invariance");

    // bound
    auto* bound = app.add_subcommand("bound", "evaluate a PAC-Bayes bound for a checkpoint");
    std::string ckpt_path, dataset_path, bound_mode = "baseline", bound_out;
    int bda_m = 1, bdraws = 150;
    double bprior_std = 0.1, bpost_std = 0.05, bdelta = 0.05, bbeta = 0.0;
    std::uint64_t bseed = 0;
    bound->add_option("checkpoint", ckpt_path, "model checkpoint file")->required();
    bound->add_option("dataset", dataset_path, "dataset csv (with .meta.json sidecar)")->required();
    bound->add_option("--mode", bound_mode, "baseline | da | da_mc | fa");
    bound->add_option("--da-m", bda_m, "transforms per example for da_mc");
    bound->add_option("--prior-std", bprior_std, "prior std");
    bound->add_option("--posterior-std", bpost_std, "posterior std");
    bound->add_option("--delta", bdelta, "confidence parameter");
    bound->add_option("--beta", bbeta, "Catoni beta (0: minimize over the grid)");
    bound->add_option("--draws", bdraws, "weight draws for the Q-risk estimate");
    bound->add_option("--seed", bseed, "seed");
    bound->add_option("--out", bound_out, "also write the report JSON here");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? 0 : 2;  // usage errors exit 2
    }

    if (run->parsed()) {
        std::map<std::string, std::string> overrides;
        if (!run_seed.empty()) overrides["seed"] = run_seed;
        if (!run_reps.empty()) overrides["replicates"] = run_reps;
        if (!run_out.empty()) overrides["out_dir"] = run_out;
        if (!run_jobs.empty()) overrides["jobs"] = run_jobs;
        for (const auto& kv : param_overrides) {
            auto eq = kv.find('=');
            if (eq == std::string::npos) {
                std::cerr << "invlab run: --param expects key=value, got '" << kv << "'\n";
                return 2;
            }
            overrides[kv.substr(0, eq)] = kv.substr(eq + 1);
        }
        return cmd_run(config_path, overrides, !run_seed.empty());
    }
    if (report->parsed()) return cmd_report(report_dir, plot);
    if (gen->parsed())
        return cmd_gen_data(task_name, gen_out, gen_seed, gn_train, gn_test, gn_ood, gp, gclasses,
                            gk, gdims, blocks_str);
    if (bound->parsed())
        return cmd_bound(ckpt_path, dataset_path, bound_mode, bda_m, bprior_std, bpost_std,
                         bdelta, bbeta, bdraws, bseed, bound_out);
    return 2;
}
