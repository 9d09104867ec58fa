#include "padkit/cli.hpp"

#include <CLI11.hpp>
#include <atomic>
#include <cerrno>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <sstream>
#include <unistd.h>

#include "padkit/data.hpp"
#include "padkit/gradcheck_suite.hpp"
#include "padkit/harness.hpp"
#include "padkit/metrics.hpp"
#include "padkit/plot.hpp"

namespace padkit::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kManifestVersion = 1;
constexpr const char* kManifest = "manifest.json";

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << text;
    if (!out) throw std::runtime_error("write failed for " + path.string());
}

std::string read_text(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot read " + path.string());
    std::ostringstream s;
    s << in.rdbuf();
    return s.str();
}

// Replaces `path` by writing a sibling first and renaming it over the target.
void write_text_atomic(const fs::path& path, const std::string& text) {
    const fs::path tmp = path.parent_path() / ("." + path.filename().string() + ".tmp");
    write_text(tmp, text);
    fs::rename(tmp, path);
}

std::string unique_suffix() {
    static std::atomic<unsigned> counter{0};
    return std::to_string(::getpid()) + "-" + std::to_string(counter++);
}

std::string seed_file(std::uint64_t seed, const char* mode) {
    return "matrices/seed_" + std::to_string(seed) + "_" + mode + ".csv";
}

void put_stats(json& summary, const std::string& key, std::span<const double> values) {
    const auto [m, s] = mean_std(values);
    summary[key + ".mean"] = m;
    summary[key + ".std"] = s;
}

// Flat key-value metrics over seeds for one protocol.
void summarize(json& summary, const std::string& mode, std::span<const AccuracyMatrix> runs) {
    std::vector<double> last, aia, final_forgetting;
    std::vector<std::vector<double>> seen, stab, plas, fgt;
    for (const auto& m : runs) {
        last.push_back(last_task_accuracy(m));
        aia.push_back(avg_incremental_accuracy(m));
        seen.push_back(seen_accuracy_curve(m));
        stab.push_back(stability_curve(m));
        plas.push_back(plasticity_curve(m));
        fgt.push_back(forgetting_curve(m));
        if (m.size() > 1) final_forgetting.push_back(forgetting(m, m.size() - 1));
    }
    put_stats(summary, mode + ".last_task_accuracy", last);
    put_stats(summary, mode + ".avg_incremental_accuracy", aia);
    if (!final_forgetting.empty()) put_stats(summary, mode + ".final_forgetting", final_forgetting);
    auto per_step = [&](const std::string& name, const std::vector<std::vector<double>>& curves, std::size_t first) {
        const auto [mean, sd] = curve_band(curves);
        for (std::size_t i = 0; i < mean.size(); ++i) {
            const std::string key = mode + "." + name + ".step" + std::to_string(first + i);
            summary[key + ".mean"] = mean[i];
            summary[key + ".std"] = sd[i];
        }
    };
    per_step("seen_accuracy", seen, 0);
    per_step("stability", stab, 0);
    per_step("plasticity", plas, 0);
    per_step("forgetting", fgt, 1);
}

json build_summary(const ExperimentConfig& config, const RunResult& result) {
    std::vector<AccuracyMatrix> taw, tag;
    for (const auto& s : result.seeds) {
        taw.push_back(s.taw);
        tag.push_back(s.tag);
    }
    json summary = {{"method", to_string(config.method)},
                    {"split", config.split},
                    {"num_tasks", taw.front().size()},
                    {"num_seeds", taw.size()},
                    {"forgetting_formula", kForgettingFormula}};
    summarize(summary, "taw", taw);
    summarize(summary, "tag", tag);
    return summary;
}

void write_charts(const fs::path& dir, std::span<const AccuracyMatrix> taw, std::span<const AccuracyMatrix> tag,
                  std::vector<std::string>* names, bool atomic) {
    fs::create_directories(dir / "plots");
    for (const auto& [name, svg] : run_charts(taw, tag)) {
        const fs::path target = dir / "plots" / name;
        atomic ? write_text_atomic(target, svg) : write_text(target, svg);
        if (names) names->push_back("plots/" + name);
    }
}

// Every file of the run, written under `dir`; returns the manifest.
json write_run(const fs::path& dir, const ExperimentConfig& config, const RunResult& result) {
    fs::create_directories(dir / "matrices");
    std::vector<std::string> files;
    auto emit = [&](const std::string& rel, const std::string& text) {
        write_text(dir / rel, text);
        files.push_back(rel);
    };
    emit("config.json", to_json(config).dump(2) + "\n");
    emit("metadata.json", run_metadata(config, result).dump(2) + "\n");

    json seeds = json::array();
    std::vector<AccuracyMatrix> taw, tag;
    for (const auto& s : result.seeds) {
        emit(seed_file(s.seed, "taw"), to_csv(s.taw));
        emit(seed_file(s.seed, "tag"), to_csv(s.tag));
        seeds.push_back({{"seed", s.seed}, {"taw", seed_file(s.seed, "taw")}, {"tag", seed_file(s.seed, "tag")}});
        taw.push_back(s.taw);
        tag.push_back(s.tag);
    }
    emit("matrices/taw_mean.csv", to_csv(result.taw.mean));
    emit("matrices/taw_std.csv", to_csv(result.taw.stddev));
    emit("matrices/tag_mean.csv", to_csv(result.tag.mean));
    emit("matrices/tag_std.csv", to_csv(result.tag.stddev));
    emit("summary.json", build_summary(config, result).dump(2) + "\n");

    std::vector<std::string> plots;
    write_charts(dir, taw, tag, &plots, false);
    files.insert(files.end(), plots.begin(), plots.end());
    std::sort(files.begin(), files.end());

    json manifest = {{"manifest_version", kManifestVersion},
                     {"method", to_string(config.method)},
                     {"seed_matrices", seeds},
                     {"plots", plots},
                     {"files", files}};
    write_text(dir / kManifest, manifest.dump(2) + "\n");
    return manifest;
}

bool replaceable(const fs::path& dir) {
    if (!fs::exists(dir)) return true;
    if (!fs::is_directory(dir)) return false;
    return fs::is_empty(dir) || fs::exists(dir / kManifest);
}

void publish(const fs::path& staged, const fs::path& target) {
    if (!fs::exists(target)) {
        fs::rename(staged, target);
        return;
    }
    const fs::path old = target.parent_path() / ("." + target.filename().string() + ".old-" + unique_suffix());
    fs::rename(target, old);
    fs::rename(staged, target);
    fs::remove_all(old);
}

}  // namespace

std::vector<std::uint64_t> parse_seed_list(const std::string& text) {
    std::vector<std::uint64_t> seeds;
    std::stringstream in(text);
    std::string part;
    while (std::getline(in, part, ',')) {
        const auto b = part.find_first_not_of(" \t"), e = part.find_last_not_of(" \t");
        if (b == std::string::npos) throw ConfigError(std::string(kSeedEnv) + " has an empty entry");
        part = part.substr(b, e - b + 1);
        if (!std::all_of(part.begin(), part.end(), [](char c) { return c >= '0' && c <= '9'; }))
            throw ConfigError(std::string(kSeedEnv) + " entry \"" + part + "\" is not a nonnegative integer");
        errno = 0;
        const unsigned long long v = std::strtoull(part.c_str(), nullptr, 10);
        if (errno == ERANGE) throw ConfigError(std::string(kSeedEnv) + " entry \"" + part + "\" is out of range");
        seeds.push_back(v);
    }
    if (seeds.empty()) throw ConfigError(std::string(kSeedEnv) + " is empty");
    return seeds;
}

ExperimentConfig resolve_config(const fs::path& config_path, const std::vector<std::string>& overrides,
                                const char* seed_env) {
    std::ifstream in(config_path);
    if (!in) throw ConfigError("cannot read config file " + config_path.string());
    json given;
    try {
        given = json::parse(in);
    } catch (const json::parse_error& e) {
        throw ConfigError("malformed config " + config_path.string() + ": " + e.what());
    }
    json j = to_json(config_from_json(given));
    for (const auto& o : overrides) apply_override(j, o);
    ExperimentConfig config = config_from_json(j);
    if (seed_env) {
        config.seeds = parse_seed_list(seed_env);
        config.validate();
    }
    return config;
}

int cmd_run(const fs::path& config_path, const std::vector<std::string>& overrides, std::ostream& out,
            std::ostream& err) {
    fs::path staged;
    try {
        const ExperimentConfig config = resolve_config(config_path, overrides, std::getenv(kSeedEnv));
        const fs::path target = fs::absolute(config.output_dir).lexically_normal();
        if (!replaceable(target))
            throw ConfigError("output_dir " + target.string() + " exists and is not a run directory");
        const Dataset data = load_dataset(config);
        out << "running " << to_string(config.method) << " on " << config.split << " with " << config.seeds.size()
            << (config.seeds.size() == 1 ? " seed" : " seeds") << std::endl;
        const RunResult result = run_sequence(config, data);

        fs::create_directories(target.parent_path());
        staged = target.parent_path() / ("." + target.filename().string() + ".tmp-" + unique_suffix());
        const json manifest = write_run(staged, config, result);
        publish(staged, target);
        staged.clear();

        const json summary = json::parse(read_text(target / "summary.json"));
        out << std::fixed << std::setprecision(4);
        out << "taw last-task accuracy " << summary["taw.last_task_accuracy.mean"].get<double>() << " +/- "
            << summary["taw.last_task_accuracy.std"].get<double>() << "\n";
        out << "tag last-task accuracy " << summary["tag.last_task_accuracy.mean"].get<double>() << " +/- "
            << summary["tag.last_task_accuracy.std"].get<double>() << "\n";
        out << "wrote " << manifest["files"].size() << " files to " << target.string() << std::endl;
        return kExitOk;
    } catch (const ConfigError& e) {
        err << "config error: " << e.what() << std::endl;
        if (!staged.empty()) fs::remove_all(staged);
        return kExitConfig;
    } catch (const DataError& e) {
        err << "data error: " << e.what() << std::endl;
        if (!staged.empty()) fs::remove_all(staged);
        return kExitData;
    } catch (const std::exception& e) {
        err << "run failed: " << e.what() << std::endl;
        std::error_code ec;
        if (!staged.empty()) fs::remove_all(staged, ec);
        return kExitRuntime;
    }
}

int cmd_gradcheck(const std::string& scope_name, bool inject_fault, std::ostream& out, std::ostream& err) {
    GradScope scope;
    try {
        scope = parse_grad_scope(scope_name);
    } catch (const std::invalid_argument& e) {
        err << e.what() << std::endl;
        return kExitConfig;
    }
    try {
        const auto items = run_gradcheck_suite(scope, inject_fault);
        std::vector<std::string> failed;
        for (const auto& item : items) {
            char line[256];
            std::snprintf(line, sizeof line, "%-28s max rel err %.3e  at %s  %s", item.name.c_str(),
                          item.result.max_rel_error, item.worst_at.c_str(), item.passed() ? "ok" : "FAIL");
            out << line << "\n";
            if (!item.passed()) failed.push_back(item.name);
        }
        if (failed.empty()) {
            out << items.size() << " items below " << kGradCheckTolerance << std::endl;
            return kExitOk;
        }
        err << failed.size() << " of " << items.size() << " items failed:";
        for (const auto& f : failed) err << " " << f;
        err << std::endl;
        return kExitRuntime;
    } catch (const std::exception& e) {
        err << "gradcheck failed: " << e.what() << std::endl;
        return kExitRuntime;
    }
}

int cmd_plot(const fs::path& run_dir, std::ostream& out, std::ostream& err) {
    try {
        json manifest;
        try {
            manifest = json::parse(read_text(run_dir / kManifest));
        } catch (const json::exception& e) {
            throw DataError("malformed manifest in " + run_dir.string() + ": " + e.what());
        }
        std::vector<AccuracyMatrix> taw, tag;
        try {
            for (const auto& s : manifest.at("seed_matrices")) {
                taw.push_back(from_csv(read_text(run_dir / s.at("taw").get<std::string>())));
                tag.push_back(from_csv(read_text(run_dir / s.at("tag").get<std::string>())));
            }
        } catch (const json::exception& e) {
            throw DataError("manifest in " + run_dir.string() + " lacks seed matrices: " + e.what());
        } catch (const MetricsError& e) {
            throw DataError(std::string("unreadable accuracy matrix: ") + e.what());
        }
        if (taw.empty()) throw DataError("manifest in " + run_dir.string() + " lists no seeds");
        std::vector<std::string> names;
        write_charts(run_dir, taw, tag, &names, true);
        for (const auto& n : names) out << "wrote " << (run_dir / n).string() << "\n";
        out.flush();
        return kExitOk;
    } catch (const DataError& e) {
        err << "plot error: " << e.what() << std::endl;
        return kExitData;
    } catch (const std::exception& e) {
        err << "plot failed: " << e.what() << std::endl;
        return kExitRuntime;
    }
}

int cmd_synth(const SynthOptions& o, std::ostream& out, std::ostream& err) {
    SyntheticSpec spec;
    spec.num_classes = o.classes;
    spec.samples_per_class = o.per_class;
    spec.seed = o.seed;
    spec.image_size = o.size;
    spec.signal = o.signal;
    spec.noise = o.noise;
    RecordLayout layout = RecordLayout::cifar100();
    layout.image_size = o.size;
    try {
        spec.validate();
        if (o.classes > layout.num_classes)
            throw std::invalid_argument("the CIFAR layout holds at most 100 classes");
    } catch (const std::invalid_argument& e) {
        err << "invalid synth options: " << e.what() << std::endl;
        return kExitConfig;
    }
    try {
        SplitData data = generate_synthetic(spec);
        if (o.test_out) {
            write_records(o.out, data.train, layout);
            write_records(*o.test_out, data.test, layout);
            out << "wrote " << data.train.size() << " records to " << o.out.string() << " and " << data.test.size()
                << " to " << o.test_out->string() << std::endl;
        } else {
            std::vector<LabeledImage> all = std::move(data.train);
            all.insert(all.end(), data.test.begin(), data.test.end());
            write_records(o.out, all, layout);
            out << "wrote " << all.size() << " records to " << o.out.string() << std::endl;
        }
        return kExitOk;
    } catch (const DataError& e) {
        err << "synth error: " << e.what() << std::endl;
        return kExitData;
    } catch (const std::exception& e) {
        err << "synth failed: " << e.what() << std::endl;
        return kExitRuntime;
    }
}

int main_entry(int argc, char** argv, std::ostream& out, std::ostream& err) {
    CLI::App app{"Exemplar-free continual learning with pooled attention distillation"};
    app.require_subcommand(1);

    std::string config_path;
    std::vector<std::string> overrides;
    auto* run = app.add_subcommand("run", "Train and evaluate every configured seed");
    run->add_option("--config", config_path, "JSON experiment config")->required();
    run->add_option("overrides", overrides, "key=value config overrides (dotted keys)");

    std::string scope;
    bool inject_fault = false;
    auto* grad = app.add_subcommand("gradcheck", "Compare analytic and finite-difference gradients");
    grad->add_option("scope", scope, "ops, model or losses")->required();
    grad->add_flag("--inject-fault", inject_fault)->group("");

    std::string run_dir;
    auto* plot = app.add_subcommand("plot", "Regenerate the SVG charts of a run directory");
    plot->add_option("run_dir", run_dir, "Directory written by run")->required();

    SynthOptions synth_opts;
    std::string synth_out, synth_test_out;
    auto* synth = app.add_subcommand("synth", "Write a synthetic dataset in the CIFAR binary layout");
    synth->add_option("--classes", synth_opts.classes, "Number of classes")->required();
    synth->add_option("--per-class", synth_opts.per_class, "Samples per class")->required();
    synth->add_option("--seed", synth_opts.seed, "Generator seed")->required();
    synth->add_option("--size", synth_opts.size, "Image side length")->capture_default_str();
    synth->add_option("--signal", synth_opts.signal, "Template contrast")->capture_default_str();
    synth->add_option("--noise", synth_opts.noise, "Pixel noise std")->capture_default_str();
    synth->add_option("--test-out", synth_test_out, "Write the held-out 20% of each class here");
    synth->add_option("out", synth_out, "Output file")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e, out, err) == 0 ? kExitOk : kExitConfig;
    }

    if (run->parsed()) return cmd_run(config_path, overrides, out, err);
    if (grad->parsed()) return cmd_gradcheck(scope, inject_fault, out, err);
    if (plot->parsed()) return cmd_plot(run_dir, out, err);
    synth_opts.out = synth_out;
    if (!synth_test_out.empty()) synth_opts.test_out = synth_test_out;
    return cmd_synth(synth_opts, out, err);
}

}  // namespace padkit::cli
