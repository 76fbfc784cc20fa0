#include "ttrx/experiment.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <chrono>
#include <cmath>
#include <exception>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <mutex>
#include <sstream>
#include <thread>

#include "ttrx/container.hpp"
#include "ttrx/errors.hpp"
#include "ttrx/train.hpp"
#include "ttrx/transfer.hpp"

namespace ttrx {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

void write_text(const std::filesystem::path& path, const std::string& text) {
    if (path.has_parent_path()) {
        std::error_code ec;
        std::filesystem::create_directories(path.parent_path(), ec);
    }
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw FileError("cannot open '" + path.string() + "' for writing");
    out << text;
    if (!out) throw FileError("failed writing '" + path.string() + "'");
}

std::string read_text(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FileError("cannot open '" + path.string() + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

// Cohort written by `generate` for this config.
Cohort load_cohort(const ExperimentConfig& config) {
    const OutputPaths paths{config.output_dir};
    if (!std::filesystem::exists(paths.cohort()))
        throw FileError("no cohort at '" + paths.cohort().string() + "'; run `generate` first");
    Cohort cohort = cohort_from_container(load_container(paths.cohort()));
    const auto& a = cohort.config;
    const auto& b = config.cohort;
    const bool same = a.height == b.height && a.width == b.width && a.existing_tracts == b.existing_tracts &&
                      a.novel_tracts == b.novel_tracts && a.correlation == b.correlation &&
                      a.existing_train == b.existing_train && a.existing_val == b.existing_val &&
                      a.fewshot_train == b.fewshot_train && a.fewshot_val == b.fewshot_val && a.test == b.test &&
                      a.seed == b.seed && a.noise_std == b.noise_std && a.jitter == b.jitter;
    if (!same)
        throw ConfigError("the cohort in '" + paths.cohort().string() +
                          "' was generated from a different [cohort] section; rerun `generate`");
    return cohort;
}

std::optional<SegmentationModel> load_pretrained(const ExperimentConfig& config) {
    const OutputPaths paths{config.output_dir};
    if (!std::filesystem::exists(paths.pretrained())) return std::nullopt;
    ModelCheckpoint ckpt = model_from_container(load_container(paths.pretrained()));
    if (ckpt.labels != LabelSet::Existing) throw FormatError("pretrained checkpoint does not hold an existing-tract model");
    if (!(ckpt.model.backbone.arch == config.arch))
        throw ConfigError("pretrained checkpoint architecture differs from the [model] section; rerun `pretrain`");
    return ckpt.model;
}

std::string history_rows(const std::string& prefix, const std::string& stage, const TrainHistory& h) {
    std::string out;
    for (std::size_t e = 0; e < h.loss.size(); ++e)
        out += prefix + stage + "," + std::to_string(e + 1) + "," + format_number(h.loss[e]) + "," +
               format_number(h.selection_dice[e]) + "\n";
    return out;
}

std::uint64_t cell_salt(const ShotCell& cell) { return (static_cast<std::uint64_t>(cell.k_train) << 32) | cell.k_val; }

std::uint64_t subsample_seed(const ExperimentConfig& c, const ShotCell& cell, std::size_t repeat) {
    return derive_seed(c.seed, {0xce11, cell_salt(cell), repeat});
}

// Shared by every strategy of one (cell, repeat), so ClassicFT and the warmup
// stage start from the same random head.
std::uint64_t run_seed(const ExperimentConfig& c, const ShotCell& cell, std::size_t repeat) {
    return derive_seed(c.seed, {0x5eed, cell_salt(cell), repeat});
}

struct Job {
    ShotCell cell;
    std::size_t repeat = 0;
    TransferStrategy strategy = TransferStrategy::Scratch;
};

struct JobOutput {
    EvalReport report;
    std::string histories;
    double init_loss = 0.0;
    std::string init_split;
    double seconds = 0.0;
};

// Calls fn(i) for every i < count on `threads` workers.
template <class Fn>
void run_pool(std::size_t count, std::size_t threads, Fn&& fn) {
    std::atomic<std::size_t> next{0};
    std::vector<std::exception_ptr> errors(count);
    auto worker = [&] {
        for (std::size_t i = next++; i < count; i = next++) {
            try {
                fn(i);
            } catch (...) {
                errors[i] = std::current_exception();
            }
        }
    };
    const std::size_t n = std::max<std::size_t>(1, std::min(threads, count));
    std::vector<std::thread> pool;
    for (std::size_t t = 1; t < n; ++t) pool.emplace_back(worker);
    worker();
    for (auto& t : pool) t.join();
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
}

std::size_t resolve_threads(std::size_t requested) {
    if (requested > 0) return requested;
    return std::max(1u, std::thread::hardware_concurrency());
}

void append_rows(std::string& csv, const std::string& shots, std::size_t repeat, const std::string& strategy,
                 const EvalReport& r) {
    for (std::size_t t = 0; t < r.tracts(); ++t)
        for (std::size_t s = 0; s < r.subject_ids.size(); ++s)
            csv += format_result_row(ResultRow{shots, repeat, strategy, t, r.subject_ids[s], r.dice[t][s], r.rvd[t][s]});
}

}  // namespace

std::string format_number(double v) {
    char buf[64];
    auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
    if (ec != std::errc{}) throw Error("cannot format number");
    return std::string(buf, end);
}

// ---- generate / pretrain -------------------------------------------------------

Cohort cmd_generate(const ExperimentConfig& config) {
    config.validate();
    Cohort cohort = generate_cohort(config.cohort);
    save_container(OutputPaths{config.output_dir}.cohort(), to_container(cohort, config_hash(config)));
    return cohort;
}

PretrainOutcome cmd_pretrain(const ExperimentConfig& config) {
    config.validate();
    if (config.pretrain.epochs == 0)
        throw ConfigError("pretrain: epochs = 0 would leave the existing-tract model untrained; transfer needs a "
                          "trained model");
    const Cohort cohort = load_cohort(config);
    RngState rng(derive_seed(config.seed, {0x9e7}));
    SegmentationModel init{random_backbone(config.arch, rng),
                           random_head(config.cohort.existing_tracts, config.arch.feature_channels, rng), false};
    TrainData data{cohort.existing.train, cohort.existing.val, LabelSet::Existing};
    auto result = train(init, data, config.pretrain, all_params, rng);

    PretrainOutcome out;
    out.validation_dice = mean_dice(result.model, cohort.existing.val, LabelSet::Existing);
    out.model = std::move(result.model);
    out.history = std::move(result.history);

    const OutputPaths paths{config.output_dir};
    save_container(paths.pretrained(),
                   to_container(ModelCheckpoint{out.model, LabelSet::Existing, config_hash(config), config.seed}));
    std::string csv = "epoch,loss,dice\n";
    for (std::size_t e = 0; e < out.history.loss.size(); ++e)
        csv += std::to_string(e + 1) + "," + format_number(out.history.loss[e]) + "," +
               format_number(out.history.selection_dice[e]) + "\n";
    write_text(paths.pretrain_history(), csv);
    return out;
}

// ---- benchmark -------------------------------------------------------------------

std::string cmd_benchmark(const ExperimentConfig& config, const BenchmarkFilter& filter) {
    config.validate();
    const Cohort cohort = load_cohort(config);
    const auto pretrained = load_pretrained(config);
    const StrategyOptions opts = config.strategy_options();

    std::vector<TransferStrategy> strategies;
    for (auto s : config.strategies)
        if (!filter.strategy || *filter.strategy == s) strategies.push_back(s);
    std::vector<ShotCell> cells;
    for (const auto& c : config.shot_grid)
        if (!filter.cell || *filter.cell == c) cells.push_back(c);
    if (strategies.empty()) throw ConfigError("benchmark: the strategy filter matches no configured strategy");
    if (cells.empty()) throw ConfigError("benchmark: the shot filter matches no configured shot cell");
    for (auto s : strategies)
        if (needs_pretrained(s) && !pretrained)
            throw ConfigError(std::string(strategy_name(s)) + " needs a pretrained model; run `pretrain` first");

    // The upper bound sees the large cohort plus every few-shot scan, so it
    // does not depend on the cell or repeat: it is trained once.
    const bool with_upper = std::find(strategies.begin(), strategies.end(), TransferStrategy::UpperBound) !=
                            strategies.end();
    std::vector<Job> jobs;
    for (const auto& cell : cells)
        for (std::size_t r = 0; r < config.repeats; ++r)
            for (auto s : strategies)
                if (s != TransferStrategy::UpperBound) jobs.push_back(Job{cell, r, s});

    const std::size_t total = jobs.size() + (with_upper ? 1 : 0);
    std::vector<JobOutput> outputs(total);
    std::mutex log_mutex;
    std::atomic<std::size_t> done{0};
    const auto t0 = Clock::now();

    auto execute = [&](std::size_t i) {
        const auto start = Clock::now();
        JobOutput out;
        std::string label;
        if (i == jobs.size()) {
            RngState rng(derive_seed(config.seed, {0xb0b}));
            auto run = run_strategy(TransferStrategy::UpperBound, nullptr, cohort.fewshot, &cohort.existing, opts, rng);
            out.report = evaluate_model(run.model, cohort.fewshot.test, LabelSet::Novel);
            out.histories = history_rows("all,0,UpperBound,", "train", run.history);
            label = "UpperBound";
        } else {
            const Job& job = jobs[i];
            const FewShotSplit split =
                subsample_fewshot(cohort.fewshot, job.cell.k_train, job.cell.k_val, subsample_seed(config, job.cell, job.repeat));
            RngState rng(run_seed(config, job.cell, job.repeat));
            auto run = run_strategy(job.strategy, pretrained ? &*pretrained : nullptr, split, &cohort.existing, opts, rng);
            const bool on_val = !split.val.empty();
            out.init_split = on_val ? "val" : "train";
            out.init_loss = dataset_loss(run.init, on_val ? split.val : split.train, LabelSet::Novel);
            out.report = evaluate_model(run.model, split.test, LabelSet::Novel);
            const std::string prefix = shot_label(job.cell) + "," + std::to_string(job.repeat) + "," +
                                       std::string(strategy_name(job.strategy)) + ",";
            if (run.warmup_history) out.histories += history_rows(prefix, "warmup", *run.warmup_history);
            out.histories += history_rows(prefix, "finetune", run.history);
            label = shot_label(job.cell) + " repeat " + std::to_string(job.repeat) + " " +
                    std::string(strategy_name(job.strategy));
        }
        out.seconds = seconds_since(start);
        std::lock_guard lock(log_mutex);
        std::cerr << "[" << ++done << "/" << total << "] " << label << ": dice " << format_number(out.report.mean_dice)
                  << " (" << std::fixed << std::setprecision(1) << out.seconds << " s)" << std::defaultfloat << "\n";
        outputs[i] = std::move(out);
    };
    // Run the upper bound first; it is the longest job.
    run_pool(total, resolve_threads(config.threads), [&](std::size_t k) {
        execute(with_upper ? (k == 0 ? jobs.size() : k - 1) : k);
    });

    // Single collector: rows in (cell, repeat, strategy) order.
    std::string results = results_csv_header();
    std::string histories = "shots,repeat,strategy,stage,epoch,loss,dice\n";
    std::string init_losses = "shots,repeat,strategy,split,loss\n";
    std::size_t i = 0;
    for (const auto& cell : cells)
        for (std::size_t r = 0; r < config.repeats; ++r)
            for (auto s : strategies) {
                const std::string shots = shot_label(cell), name(strategy_name(s));
                if (s == TransferStrategy::UpperBound) {
                    append_rows(results, shots, r, name, outputs[jobs.size()].report);
                    continue;
                }
                const JobOutput& out = outputs[i++];
                append_rows(results, shots, r, name, out.report);
                histories += out.histories;
                init_losses += shots + "," + std::to_string(r) + "," + name + "," + out.init_split + "," +
                               format_number(out.init_loss) + "\n";
            }
    if (with_upper) histories += outputs[jobs.size()].histories;

    const OutputPaths paths{config.output_dir};
    write_text(paths.results(), results);
    write_text(paths.histories(), histories);
    write_text(paths.init_losses(), init_losses);
    const std::string summary = summary_markdown(summarize(parse_results_csv(results)));
    write_text(paths.summary(), summary);
    std::cerr << "benchmark finished in " << std::fixed << std::setprecision(1) << seconds_since(t0) << " s"
              << std::defaultfloat << "\n";
    return summary;
}

// ---- evaluate / report ---------------------------------------------------------------

EvaluateOutcome cmd_evaluate(const ExperimentConfig& config, const EvaluateRequest& request) {
    config.validate();
    const Cohort cohort = load_cohort(config);
    const OutputPaths paths{config.output_dir};
    EvaluateOutcome out;
    if (request.checkpoint) {
        const ModelCheckpoint ckpt = model_from_container(load_container(*request.checkpoint));
        const bool existing = ckpt.labels == LabelSet::Existing;
        out.label = request.checkpoint->stem().string();
        out.report = evaluate_model(ckpt.model, existing ? cohort.existing.val : cohort.fewshot.test, ckpt.labels);
    } else {
        const ShotCell cell = request.cell.value_or(config.shot_grid.front());
        const auto pretrained = load_pretrained(config);
        if (needs_pretrained(request.strategy) && !pretrained)
            throw ConfigError(std::string(strategy_name(request.strategy)) +
                              " needs a pretrained model; run `pretrain` first");
        const StrategyOptions opts = config.strategy_options();
        StrategyRun run;
        if (request.strategy == TransferStrategy::UpperBound) {
            RngState rng(derive_seed(config.seed, {0xb0b}));
            run = run_strategy(request.strategy, nullptr, cohort.fewshot, &cohort.existing, opts, rng);
        } else {
            const FewShotSplit split = subsample_fewshot(cohort.fewshot, cell.k_train, cell.k_val,
                                                         subsample_seed(config, cell, request.repeat));
            RngState rng(run_seed(config, cell, request.repeat));
            run = run_strategy(request.strategy, pretrained ? &*pretrained : nullptr, split, &cohort.existing, opts, rng);
        }
        out.label = std::string(strategy_name(request.strategy)) + "_" + std::to_string(cell.k_train) + "_" +
                    std::to_string(cell.k_val) + "_r" + std::to_string(request.repeat);
        out.report = evaluate_model(run.model, cohort.fewshot.test, LabelSet::Novel);
        out.saved_model = paths.dir / "models" / (out.label + ".ttrx");
        save_container(*out.saved_model,
                       to_container(ModelCheckpoint{run.model, LabelSet::Novel, config_hash(config), config.seed}));
    }
    std::string csv = "strategy,tract,subject,dice,rvd\n";
    for (std::size_t t = 0; t < out.report.tracts(); ++t)
        for (std::size_t s = 0; s < out.report.subject_ids.size(); ++s)
            csv += out.label + "," + std::to_string(t) + "," + std::to_string(out.report.subject_ids[s]) + "," +
                   format_number(out.report.dice[t][s]) + "," + format_number(out.report.rvd[t][s]) + "\n";
    out.csv = paths.dir / ("evaluation_" + out.label + ".csv");
    write_text(out.csv, csv);
    return out;
}

std::string cmd_report(const std::filesystem::path& output_dir) {
    const OutputPaths paths{output_dir};
    const std::string summary = summary_markdown(summarize(parse_results_csv(read_text(paths.results()))));
    write_text(paths.summary(), summary);
    return summary;
}

// ---- tables ------------------------------------------------------------------------

std::string results_csv_header() { return "shots,repeat,strategy,tract,subject,dice,rvd\n"; }

std::string format_result_row(const ResultRow& r) {
    return r.shots + "," + std::to_string(r.repeat) + "," + r.strategy + "," + std::to_string(r.tract) + "," +
           std::to_string(r.subject) + "," + format_number(r.dice) + "," + format_number(r.rvd) + "\n";
}

std::vector<ResultRow> parse_results_csv(const std::string& text) {
    std::istringstream in(text);
    std::string line;
    if (!std::getline(in, line) || line + "\n" != results_csv_header())
        throw FormatError("results CSV must start with the header " + results_csv_header());
    std::vector<ResultRow> rows;
    std::size_t lineno = 1;
    auto number = [&](const std::string& s, auto& v) {
        auto [end, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
        if (s.empty() || ec != std::errc{} || end != s.data() + s.size())
            throw FormatError("results CSV line " + std::to_string(lineno) + ": bad field '" + s + "'");
    };
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::vector<std::string> f;
        std::stringstream ss(line);
        std::string item;
        while (std::getline(ss, item, ',')) f.push_back(item);
        if (f.size() != 7)
            throw FormatError("results CSV line " + std::to_string(lineno) + ": expected 7 fields, got " +
                              std::to_string(f.size()));
        ResultRow r;
        r.shots = f[0];
        number(f[1], r.repeat);
        r.strategy = f[2];
        number(f[3], r.tract);
        number(f[4], r.subject);
        number(f[5], r.dice);
        number(f[6], r.rvd);
        rows.push_back(std::move(r));
    }
    return rows;
}

std::vector<SummaryEntry> summarize(const std::vector<ResultRow>& rows) {
    // (shots, strategy) -> (repeat, tract) -> subject values
    struct Acc {
        double dice = 0.0, rvd = 0.0;
        std::size_t n = 0;
    };
    std::vector<std::string> shot_order, strategy_order;
    std::map<std::pair<std::string, std::string>, std::map<std::pair<std::size_t, std::size_t>, Acc>> groups;
    for (const auto& r : rows) {
        if (std::find(shot_order.begin(), shot_order.end(), r.shots) == shot_order.end()) shot_order.push_back(r.shots);
        if (std::find(strategy_order.begin(), strategy_order.end(), r.strategy) == strategy_order.end())
            strategy_order.push_back(r.strategy);
        auto& acc = groups[{r.shots, r.strategy}][{r.repeat, r.tract}];
        acc.dice += r.dice;
        acc.rvd += r.rvd;
        ++acc.n;
    }
    // Per-tract averages over subjects, keyed by (repeat, tract).
    auto tract_means = [&](const std::string& shots, const std::string& strategy, bool dice) {
        std::map<std::pair<std::size_t, std::size_t>, double> out;
        for (const auto& [key, acc] : groups.at({shots, strategy}))
            out[key] = (dice ? acc.dice : acc.rvd) / static_cast<double>(acc.n);
        return out;
    };
    std::vector<SummaryEntry> entries;
    for (const auto& shots : shot_order)
        for (const auto& strategy : strategy_order) {
            if (!groups.contains({shots, strategy})) continue;
            SummaryEntry e;
            e.shots = shots;
            e.strategy = strategy;
            const auto dice = tract_means(shots, strategy, true);
            const auto rvd = tract_means(shots, strategy, false);
            for (const auto& [k, v] : dice) e.mean_dice += v;
            for (const auto& [k, v] : rvd) e.mean_rvd += v;
            e.mean_dice /= static_cast<double>(dice.size());
            e.mean_rvd /= static_cast<double>(rvd.size());
            if (strategy != kReferenceStrategy && groups.contains({shots, kReferenceStrategy})) {
                const auto ref = tract_means(shots, kReferenceStrategy, true);
                std::vector<double> a, b;
                for (const auto& [k, v] : dice) {
                    auto it = ref.find(k);
                    if (it == ref.end()) continue;
                    a.push_back(v);
                    b.push_back(it->second);
                }
                e.pairs = a.size();
                try {
                    e.test = paired_t_test(a, b);
                    e.effect_size = cohens_d(a, b);
                } catch (const Error&) {
                    e.test.reset();
                    e.effect_size.reset();
                }
            }
            entries.push_back(std::move(e));
        }
    return entries;
}

std::string summary_markdown(const std::vector<SummaryEntry>& entries) {
    auto fixed = [](double v, int digits) {
        std::ostringstream s;
        s << std::fixed << std::setprecision(digits) << v;
        return s.str();
    };
    auto pvalue = [](double p) {
        std::ostringstream s;
        if (p < 1e-4) s << std::scientific << std::setprecision(2) << p;
        else s << std::fixed << std::setprecision(4) << p;
        return s.str();
    };
    std::string out = "# Few-shot novel-tract segmentation\n\n";
    out += "Mean Dice and RVD are means over repeats and tracts of the per-tract averages across test subjects. ";
    out += "t, p and d compare each strategy with " + std::string(kReferenceStrategy) +
           " (paired over repeat and tract; d is the paired-difference effect size).\n\n";
    out += "| Shots (train/val) | Strategy | Mean Dice | Mean RVD | t vs " + std::string(kReferenceStrategy) +
           " | p | d | pairs |\n";
    out += "|---|---|---|---|---|---|---|---|\n";
    for (const auto& e : entries) {
        out += "| " + e.shots + " | " + e.strategy + " | " + fixed(e.mean_dice, 4) + " | " + fixed(e.mean_rvd, 4) + " | ";
        if (e.strategy == kReferenceStrategy) out += "(reference) | | | |\n";
        else if (e.test) out += fixed(e.test->t, 3) + " | " + pvalue(e.test->p) + " | " + fixed(*e.effect_size, 3) +
                               " | " + std::to_string(e.pairs) + " |\n";
        else out += "n/a | n/a | n/a | " + std::to_string(e.pairs) + " |\n";
    }
    return out;
}

}  // namespace ttrx
