#pragma once

#include <cstdint>
#include <functional>
#include <nlohmann/json.hpp>
#include <optional>
#include <string>
#include <vector>

#include "padkit/data.hpp"
#include "padkit/experiment.hpp"
#include "padkit/metrics.hpp"
#include "padkit/regularizers.hpp"
#include "padkit/vit.hpp"

namespace padkit {

struct Dataset {
    std::vector<LabeledImage> train;
    std::vector<LabeledImage> test;
    std::size_t num_classes = 0;
};

/// Builds the dataset named by `config.data` (synthetic classes follow the
/// split scheme). Throws DataError for unreadable files.
Dataset load_dataset(const ExperimentConfig& config);

/// Class counts per task for a scheme identifier: cifar100/10,
/// cifar100/20base, cifar100/50base, imagenet32/6 or synthetic/TxC.
std::vector<std::size_t> scheme_task_sizes(const std::string& scheme);

/// Disjoint per-task class lists drawn from a seeded permutation of
/// [0, num_classes). Throws ConfigError for unknown schemes and DataError
/// when the dataset has too few classes.
std::vector<std::vector<std::size_t>> split_tasks(std::size_t num_classes, const std::string& scheme,
                                                  std::uint64_t seed);

/// One task's images with labels remapped to [0, classes in task).
struct TaskData {
    std::vector<LabeledImage> train;
    std::vector<LabeledImage> val;
    std::vector<LabeledImage> test;
};

/// Routes images to tasks; `val` receives a seeded `validation_fraction`
/// of each task's train images (at least one).
std::vector<TaskData> make_tasks(const Dataset& data, const std::vector<std::vector<std::size_t>>& classes,
                                 double validation_fraction, std::uint64_t seed);

struct BatchLosses {
    double ce = 0.0;
    double lwf = 0.0;
    double reg = 0.0;
    double total = 0.0;
    /// Global L2 norm of the gradient before clipping.
    double grad_norm = 0.0;
};

struct EpochLog {
    double train_loss = 0.0;
    double val_loss = 0.0;
};

struct TaskLog {
    std::vector<EpochLog> epochs;
    std::size_t best_epoch = 0;
    bool early_stopped = false;
    double seconds = 0.0;
};

struct TrainHooks {
    /// Called after every optimizer step with the batch's loss components.
    std::function<void(const BatchLosses&)> on_batch;
};

struct TaskState {
    std::size_t task = 0;
    VisionTransformer model;
    std::optional<ModelSnapshot> teacher;
    std::optional<FisherDiag> fisher;
    std::vector<std::vector<std::size_t>> classes;
};

/// SGD with momentum on the task's train split, early stopping on the
/// validation objective and restoring the best parameters. The model's head
/// for `state.task` must already exist.
TaskLog train_task(TaskState& state, const TaskData& data, const ExperimentConfig& config, const Normalizer& norm,
                   Prng& prng, const TrainHooks& hooks = {});

/// Loss components of one batch of normalized images for the current task.
/// Records onto the active tape when one is installed.
struct BatchObjective {
    Tensor total;
    BatchLosses values;
};
BatchObjective batch_objective(const TaskState& state, const Tensor& batch, std::span<const std::size_t> labels,
                               const ExperimentConfig& config, const ForwardOptions& options = {});

enum class EvalMode { taw, tag };

/// Accuracy on each task's test set for tasks 0..tasks.size()-1.
std::vector<double> evaluate(const VisionTransformer& model, std::span<const TaskData> tasks, EvalMode mode,
                             const Normalizer& norm);

struct SeedResult {
    std::uint64_t seed = 0;
    AccuracyMatrix taw;
    AccuracyMatrix tag;
    std::vector<TaskLog> logs;
    std::vector<std::vector<std::size_t>> classes;
    Normalizer normalizer;
    std::size_t teacher_forwards = 0;
    /// Teacher checksums were identical before and after every task.
    bool teacher_isolated = true;
};

SeedResult run_seed(const ExperimentConfig& config, const Dataset& data, std::uint64_t seed,
                    const TrainHooks& hooks = {});

struct RunResult {
    std::vector<SeedResult> seeds;
    SeedAggregate taw;
    SeedAggregate tag;
};

/// Runs every configured seed (up to `config.threads` at a time).
RunResult run_sequence(const ExperimentConfig& config, const Dataset& data);

/// Config echo, generator id, design choices, per-seed logs and timings.
nlohmann::json run_metadata(const ExperimentConfig& config, const RunResult& result);

}  // namespace padkit
