#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "padkit/experiment.hpp"

namespace padkit::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitRuntime = 1;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitData = 3;

/// Seed-list override read by `run`: one seed or a comma-separated list.
inline constexpr const char* kSeedEnv = "PADKIT_SEED";

/// Reads the config file, applies `key=value` overrides in order, then the
/// seed override when `seed_env` is non-null. Throws ConfigError.
ExperimentConfig resolve_config(const std::filesystem::path& config_path, const std::vector<std::string>& overrides,
                                const char* seed_env);

/// Parses a PADKIT_SEED value. Throws ConfigError when malformed.
std::vector<std::uint64_t> parse_seed_list(const std::string& text);

/// Runs every seed and writes the run directory named by `output_dir`
/// (replacing any previous run there) through a temporary sibling, so a
/// failed run leaves nothing behind.
int cmd_run(const std::filesystem::path& config_path, const std::vector<std::string>& overrides, std::ostream& out,
            std::ostream& err);

/// Prints the worst relative error of each item; exits 0 iff all pass.
int cmd_gradcheck(const std::string& scope, bool inject_fault, std::ostream& out, std::ostream& err);

/// Regenerates the charts listed in a run directory's manifest.
int cmd_plot(const std::filesystem::path& run_dir, std::ostream& out, std::ostream& err);

struct SynthOptions {
    std::size_t classes = 10;
    std::size_t per_class = 50;
    std::uint64_t seed = 0;
    std::size_t size = 32;
    double signal = 1.0;
    double noise = 0.15;
    std::filesystem::path out;
    /// When set, the held-out 20% of each class goes here and `out` keeps the rest.
    std::optional<std::filesystem::path> test_out;
};

/// Writes CIFAR-layout records (one coarse byte, one fine byte, 3 planes).
int cmd_synth(const SynthOptions& options, std::ostream& out, std::ostream& err);

/// Argument parsing and dispatch for the `padkit` executable.
int main_entry(int argc, char** argv, std::ostream& out, std::ostream& err);

}  // namespace padkit::cli
