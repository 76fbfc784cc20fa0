// Command-line front end: generate, pretrain, benchmark, evaluate, report.

#include <CLI11.hpp>

#include <iostream>
#include <optional>
#include <string>

#include "ttrx/config.hpp"
#include "ttrx/errors.hpp"
#include "ttrx/experiment.hpp"
#include "ttrx/transfer.hpp"

namespace {

enum ExitCode : int {
    kOk = 0,
    kOther = 1,
    kConfig = 2,
    kData = 3,
    kFormat = 4,
    kDivergence = 5,
    kFile = 6,
};

struct Common {
    std::string config_path;
    std::optional<std::uint64_t> seed;
    std::string out;
};

ttrx::ExperimentConfig resolve(const Common& c) {
    ttrx::ExperimentConfig cfg = c.config_path.empty() ? ttrx::ExperimentConfig{} : ttrx::load_config(c.config_path);
    if (c.seed) cfg.seed = *c.seed;
    if (!c.out.empty()) cfg.output_dir = c.out;
    cfg.validate();
    return cfg;
}

void add_common(CLI::App* app, Common& c) {
    app->add_option("--config", c.config_path, "Experiment config file (INI); built-in defaults when omitted");
    app->add_option("--seed", c.seed, "Override [experiment] seed");
    app->add_option("--out", c.out, "Override [experiment] output_dir");
}

std::optional<ttrx::ShotCell> shots_from(const std::string& text) {
    if (text.empty()) return std::nullopt;
    return ttrx::parse_shot_cell(text);
}

std::optional<ttrx::TransferStrategy> strategy_from(const std::string& text) {
    if (text.empty()) return std::nullopt;
    return ttrx::parse_strategy(text);
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Few-shot tract segmentation experiments on synthetic cohorts"};
    app.require_subcommand(1);

    Common gen_opts, pre_opts, bench_opts, eval_opts;
    std::string report_out = "results", report_config;
    std::string bench_strategy, bench_shots, eval_strategy = "WarmupFT", eval_shots, eval_checkpoint;
    std::size_t eval_repeat = 0;

    auto* gen = app.add_subcommand("generate", "Generate the synthetic cohort");
    add_common(gen, gen_opts);
    auto* pre = app.add_subcommand("pretrain", "Train the existing-tract model");
    add_common(pre, pre_opts);
    auto* bench = app.add_subcommand("benchmark", "Run every strategy over the shot grid and repeats");
    add_common(bench, bench_opts);
    bench->add_option("--strategy", bench_strategy, "Run only this strategy");
    bench->add_option("--shots", bench_shots, "Run only this shot cell, e.g. 3,1");
    auto* eval = app.add_subcommand("evaluate", "Evaluate a checkpoint, or train and evaluate one strategy");
    add_common(eval, eval_opts);
    eval->add_option("--checkpoint", eval_checkpoint, "Model container to evaluate");
    eval->add_option("--strategy", eval_strategy, "Strategy to train when no checkpoint is given");
    eval->add_option("--shots", eval_shots, "Shot cell, e.g. 1,0 (default: first cell of the grid)");
    eval->add_option("--repeat", eval_repeat, "Benchmark repeat whose seeds are used");
    auto* report = app.add_subcommand("report", "Rebuild summary.md from results.csv");
    report->add_option("--out", report_out, "Output directory holding results.csv");
    report->add_option("--config", report_config, "Config whose output_dir is used when --out is absent");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kOk : kConfig;
    }

    try {
        if (*gen) {
            const auto cfg = resolve(gen_opts);
            const auto cohort = ttrx::cmd_generate(cfg);
            std::cout << "wrote " << ttrx::OutputPaths{cfg.output_dir}.cohort().string() << " ("
                      << cohort.existing.train.size() + cohort.existing.val.size() + cohort.fewshot.train.size() +
                             cohort.fewshot.val.size() + cohort.fewshot.test.size()
                      << " subjects)\n";
        } else if (*pre) {
            const auto cfg = resolve(pre_opts);
            const auto out = ttrx::cmd_pretrain(cfg);
            std::cout << "existing-tract validation Dice " << out.validation_dice << " (best epoch "
                      << out.history.best_epoch << ")\n"
                      << "wrote " << ttrx::OutputPaths{cfg.output_dir}.pretrained().string() << "\n";
        } else if (*bench) {
            const auto cfg = resolve(bench_opts);
            std::cout << ttrx::cmd_benchmark(cfg, {strategy_from(bench_strategy), shots_from(bench_shots)});
        } else if (*eval) {
            const auto cfg = resolve(eval_opts);
            ttrx::EvaluateRequest req;
            if (!eval_checkpoint.empty()) req.checkpoint = eval_checkpoint;
            req.strategy = ttrx::parse_strategy(eval_strategy);
            req.cell = shots_from(eval_shots);
            req.repeat = eval_repeat;
            const auto out = ttrx::cmd_evaluate(cfg, req);
            std::cout << out.label << ": mean Dice " << out.report.mean_dice << ", mean RVD " << out.report.mean_rvd
                      << "\n";
            for (std::size_t t = 0; t < out.report.tracts(); ++t)
                std::cout << "  tract " << t << ": Dice " << out.report.tract_mean_dice[t] << ", RVD "
                          << out.report.tract_mean_rvd[t] << "\n";
            std::cout << "wrote " << out.csv.string() << "\n";
            if (out.saved_model) std::cout << "wrote " << out.saved_model->string() << "\n";
        } else if (*report) {
            std::filesystem::path dir = report_out;
            if (!report_config.empty() && report->count("--out") == 0) dir = ttrx::load_config(report_config).output_dir;
            std::cout << ttrx::cmd_report(dir);
        }
    } catch (const ttrx::ConfigError& e) {
        std::cerr << "configuration error: " << e.what() << "\n";
        return kConfig;
    } catch (const ttrx::DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return kData;
    } catch (const ttrx::GenerationError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return kData;
    } catch (const ttrx::FormatError& e) {
        std::cerr << "format error: " << e.what() << "\n";
        return kFormat;
    } catch (const ttrx::DivergenceError& e) {
        std::cerr << "divergence: " << e.what() << "\n";
        return kDivergence;
    } catch (const ttrx::FileError& e) {
        std::cerr << "file error: " << e.what() << "\n";
        return kFile;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kOther;
    }
    return kOk;
}
