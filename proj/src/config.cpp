#include "ttrx/config.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>

#include "ttrx/container.hpp"
#include "ttrx/errors.hpp"

namespace ttrx {

namespace {

namespace pt = boost::property_tree;

std::string trim(std::string s) {
    const auto first = s.find_first_not_of(" \t\r\n");
    if (first == std::string::npos) return "";
    const auto last = s.find_last_not_of(" \t\r\n");
    return s.substr(first, last - first + 1);
}

std::vector<std::string> split_list(const std::string& s, char sep) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, sep)) {
        item = trim(item);
        if (!item.empty()) out.push_back(item);
    }
    return out;
}

std::string number_text(double v) {
    char buf[64];
    auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, end);
}

double to_double(const std::string& key, const std::string& raw) {
    const std::string s = trim(raw);
    double v = 0.0;
    auto [end, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (s.empty() || ec != std::errc{} || end != s.data() + s.size())
        throw ConfigError(key + ": expected a number, got '" + raw + "'");
    return v;
}

std::uint64_t to_u64(const std::string& key, const std::string& raw) {
    const std::string s = trim(raw);
    std::uint64_t v = 0;
    auto [end, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (s.empty() || ec != std::errc{} || end != s.data() + s.size())
        throw ConfigError(key + ": expected a non-negative integer, got '" + raw + "'");
    return v;
}

bool to_bool(const std::string& key, const std::string& raw) {
    const std::string s = trim(raw);
    if (s == "true" || s == "1" || s == "yes") return true;
    if (s == "false" || s == "0" || s == "no") return false;
    throw ConfigError(key + ": expected true or false, got '" + raw + "'");
}

// One schema entry: reads a value into the config and writes it back out.
struct Field {
    std::function<void(ExperimentConfig&, const std::string& key, const std::string& value)> read;
    std::function<std::string(const ExperimentConfig&)> write;
};
using Section = std::vector<std::pair<std::string, Field>>;

template <class T>
Field size_field(T ExperimentConfig::*group, std::size_t T::*member) {
    return {[=](ExperimentConfig& c, const std::string& k, const std::string& v) {
                c.*group.*member = static_cast<std::size_t>(to_u64(k, v));
            },
            [=](const ExperimentConfig& c) { return std::to_string(c.*group.*member); }};
}

template <class T>
Field real_field(T ExperimentConfig::*group, double T::*member) {
    return {[=](ExperimentConfig& c, const std::string& k, const std::string& v) { c.*group.*member = to_double(k, v); },
            [=](const ExperimentConfig& c) { return number_text(c.*group.*member); }};
}

Section train_section(TrainOptions ExperimentConfig::*group) {
    return {
        {"learning_rate", real_field(group, &TrainOptions::learning_rate)},
        {"epochs", size_field(group, &TrainOptions::epochs)},
        {"dropout_rate", real_field(group, &TrainOptions::dropout_rate)},
        {"batch", size_field(group, &TrainOptions::batch)},
        {"beta1", real_field(group, &TrainOptions::beta1)},
        {"beta2", real_field(group, &TrainOptions::beta2)},
        {"epsilon", real_field(group, &TrainOptions::epsilon)},
        {"select_on",
         {[=](ExperimentConfig& c, const std::string& k, const std::string& v) {
              const std::string s = trim(v);
              if (s == "validation") (c.*group).select_on = SelectOn::ValidationDice;
              else if (s == "training") (c.*group).select_on = SelectOn::TrainingDice;
              else throw ConfigError(k + ": expected validation or training, got '" + v + "'");
          },
          [=](const ExperimentConfig& c) {
              return std::string((c.*group).select_on == SelectOn::ValidationDice ? "validation" : "training");
          }}},
        {"plateau_patience", size_field(group, &TrainOptions::plateau_patience)},
        {"threshold", real_field(group, &TrainOptions::threshold)},
    };
}

const std::vector<std::pair<std::string, Section>>& schema() {
    static const std::vector<std::pair<std::string, Section>> s = [] {
        std::vector<std::pair<std::string, Section>> out;
        out.emplace_back(
            "experiment",
            Section{
                {"seed",
                 {[](ExperimentConfig& c, const std::string& k, const std::string& v) { c.seed = to_u64(k, v); },
                  [](const ExperimentConfig& c) { return std::to_string(c.seed); }}},
                {"repeats",
                 {[](ExperimentConfig& c, const std::string& k, const std::string& v) {
                      c.repeats = static_cast<std::size_t>(to_u64(k, v));
                  },
                  [](const ExperimentConfig& c) { return std::to_string(c.repeats); }}},
                {"shot_grid",
                 {[](ExperimentConfig& c, const std::string&, const std::string& v) {
                      c.shot_grid.clear();
                      for (const auto& item : split_list(v, ',')) c.shot_grid.push_back(parse_shot_cell(item));
                  },
                  [](const ExperimentConfig& c) {
                      std::string out;
                      for (std::size_t i = 0; i < c.shot_grid.size(); ++i)
                          out += (i ? ", " : "") + shot_label(c.shot_grid[i]);
                      return out;
                  }}},
                {"strategies",
                 {[](ExperimentConfig& c, const std::string&, const std::string& v) {
                      c.strategies.clear();
                      for (const auto& item : split_list(v, ',')) c.strategies.push_back(parse_strategy(item));
                  },
                  [](const ExperimentConfig& c) {
                      std::string out;
                      for (std::size_t i = 0; i < c.strategies.size(); ++i)
                          out += (i ? ", " : "") + std::string(strategy_name(c.strategies[i]));
                      return out;
                  }}},
                {"output_dir",
                 {[](ExperimentConfig& c, const std::string&, const std::string& v) { c.output_dir = trim(v); },
                  [](const ExperimentConfig& c) { return c.output_dir.string(); }}},
                {"threads",
                 {[](ExperimentConfig& c, const std::string& k, const std::string& v) {
                      c.threads = static_cast<std::size_t>(to_u64(k, v));
                  },
                  [](const ExperimentConfig& c) { return std::to_string(c.threads); }}},
                {"regression_uses_val",
                 {[](ExperimentConfig& c, const std::string& k, const std::string& v) {
                      c.regression_uses_val = to_bool(k, v);
                  },
                  [](const ExperimentConfig& c) { return std::string(c.regression_uses_val ? "true" : "false"); }}},
            });
        using CC = CohortConfig;
        const auto cohort = &ExperimentConfig::cohort;
        out.emplace_back("cohort", Section{
                                       {"height", size_field(cohort, &CC::height)},
                                       {"width", size_field(cohort, &CC::width)},
                                       {"existing_tracts", size_field(cohort, &CC::existing_tracts)},
                                       {"novel_tracts", size_field(cohort, &CC::novel_tracts)},
                                       {"correlation", real_field(cohort, &CC::correlation)},
                                       {"existing_train", size_field(cohort, &CC::existing_train)},
                                       {"existing_val", size_field(cohort, &CC::existing_val)},
                                       {"fewshot_train", size_field(cohort, &CC::fewshot_train)},
                                       {"fewshot_val", size_field(cohort, &CC::fewshot_val)},
                                       {"test", size_field(cohort, &CC::test)},
                                       {"seed",
                                        {[](ExperimentConfig& c, const std::string& k, const std::string& v) {
                                             c.cohort.seed = to_u64(k, v);
                                         },
                                         [](const ExperimentConfig& c) { return std::to_string(c.cohort.seed); }}},
                                       {"noise_std", real_field(cohort, &CC::noise_std)},
                                       {"jitter", real_field(cohort, &CC::jitter)},
                                   });
        using AD = ArchitectureDescriptor;
        const auto arch = &ExperimentConfig::arch;
        out.emplace_back("model", Section{
                                      {"encoder_channels", size_field(arch, &AD::encoder_channels)},
                                      {"middle_channels", size_field(arch, &AD::middle_channels)},
                                      {"feature_channels", size_field(arch, &AD::feature_channels)},
                                      {"kernel", size_field(arch, &AD::kernel)},
                                      {"decoder_kernel", size_field(arch, &AD::decoder_kernel)},
                                      {"pool_levels", size_field(arch, &AD::pool_levels)},
                                  });
        out.emplace_back("pretrain", train_section(&ExperimentConfig::pretrain));
        out.emplace_back("train", train_section(&ExperimentConfig::train));
        out.emplace_back("warmup", train_section(&ExperimentConfig::warmup));
        out.emplace_back("upper_bound", train_section(&ExperimentConfig::upper_bound));
        const auto reg = &ExperimentConfig::regression;
        out.emplace_back("regression",
                         Section{
                             {"iterations", size_field(reg, &FitOptions::iterations)},
                             {"step", real_field(reg, &FitOptions::step)},
                             {"step_growth", real_field(reg, &FitOptions::step_growth)},
                             {"logit_cap", real_field(reg, &FitOptions::logit_cap)},
                             {"standardize",
                              {[](ExperimentConfig& c, const std::string& k, const std::string& v) {
                                   c.regression.standardize = to_bool(k, v);
                               },
                               [](const ExperimentConfig& c) {
                                   return std::string(c.regression.standardize ? "true" : "false");
                               }}},
                             {"tolerance", real_field(reg, &FitOptions::tolerance)},
                         });
        return out;
    }();
    return s;
}

}  // namespace

std::string shot_label(const ShotCell& cell) { return std::to_string(cell.k_train) + "/" + std::to_string(cell.k_val); }

ShotCell parse_shot_cell(const std::string& text) {
    const std::string s = trim(text);
    const auto sep = s.find_first_of("/,");
    if (sep == std::string::npos) throw ConfigError("shot cell '" + text + "' must look like k_train/k_val");
    ShotCell c;
    c.k_train = static_cast<std::size_t>(to_u64("shot cell", s.substr(0, sep)));
    c.k_val = static_cast<std::size_t>(to_u64("shot cell", s.substr(sep + 1)));
    return c;
}

void ExperimentConfig::validate() const {
    cohort.validate();
    pretrain.validate();
    train.validate();
    warmup.validate();
    upper_bound.validate();
    if (arch.in_channels != kInputChannels) throw ConfigError("model: input channels must be 9");
    if (arch.kernel % 2 == 0 || arch.decoder_kernel % 2 == 0) throw ConfigError("model: kernel sizes must be odd");
    if (arch.encoder_channels == 0 || arch.middle_channels == 0 || arch.feature_channels == 0)
        throw ConfigError("model: channel counts must be positive");
    if (cohort.height % arch.spatial_divisor() || cohort.width % arch.spatial_divisor())
        throw ConfigError("cohort: height and width must be divisible by " + std::to_string(arch.spatial_divisor()));
    if (repeats < 1) throw ConfigError("experiment: repeats must be >= 1");
    if (strategies.empty()) throw ConfigError("experiment: no strategies selected");
    if (shot_grid.empty()) throw ConfigError("experiment: empty shot_grid");
    for (const auto& cell : shot_grid) {
        if (cell.k_train < 1) throw ConfigError("experiment: shot cell " + shot_label(cell) + " needs k_train >= 1");
        if (cell.k_train > cohort.fewshot_train || cell.k_val > cohort.fewshot_val)
            throw ConfigError("experiment: shot cell " + shot_label(cell) + " exceeds the few-shot pool " +
                              std::to_string(cohort.fewshot_train) + "/" + std::to_string(cohort.fewshot_val));
    }
    if (!(regression.step > 0.0) || !(regression.step_growth >= 1.0) || !(regression.logit_cap > 0.0))
        throw ConfigError("regression: step and logit_cap must be > 0 and step_growth >= 1");
}

StrategyOptions ExperimentConfig::strategy_options() const {
    StrategyOptions o;
    o.arch = arch;
    o.finetune = train;
    o.warmup = warmup;
    o.upper_bound = upper_bound;
    o.regression = regression;
    o.regression_uses_val = regression_uses_val;
    return o;
}

ExperimentConfig parse_config(const std::string& text) {
    pt::ptree tree;
    std::istringstream in(text);
    try {
        pt::read_ini(in, tree);
    } catch (const pt::ini_parser_error& e) {
        throw ConfigError(std::string("config: ") + e.message() + " (line " + std::to_string(e.line()) + ")");
    }
    ExperimentConfig c;
    for (const auto& [section, body] : tree) {
        const Section* fields = nullptr;
        for (const auto& [name, s] : schema())
            if (name == section) fields = &s;
        if (fields == nullptr) {
            if (!body.data().empty()) throw ConfigError("config: key '" + section + "' appears outside a section");
            throw ConfigError("config: unknown section [" + section + "]");
        }
        for (const auto& [key, value] : body) {
            const Field* f = nullptr;
            for (const auto& [name, field] : *fields)
                if (name == key) f = &field;
            if (f == nullptr) throw ConfigError("config: unknown key '" + key + "' in [" + section + "]");
            f->read(c, section + "." + key, value.data());
        }
    }
    c.validate();
    return c;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw FileError("cannot open config '" + path.string() + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse_config(ss.str());
}

std::string to_config_text(const ExperimentConfig& config) {
    std::string out;
    for (const auto& [section, fields] : schema()) {
        if (!out.empty()) out += "\n";
        out += "[" + section + "]\n";
        for (const auto& [key, field] : fields) out += key + " = " + field.write(config) + "\n";
    }
    return out;
}

std::string config_hash(const ExperimentConfig& config) { return sha1_hex(to_config_text(config)); }

}  // namespace ttrx
