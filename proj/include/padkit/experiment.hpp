#pragma once

#include <cstdint>
#include <nlohmann/json.hpp>
#include <stdexcept>
#include <string>
#include <vector>

#include "padkit/regularizers.hpp"
#include "padkit/vit.hpp"

namespace padkit {

/// Invalid or unknown configuration content.
class ConfigError : public std::runtime_error {
   public:
    using std::runtime_error::runtime_error;
};

enum class Method {
    FT,
    LWF,
    EWC,
    ATT_SYM,
    ATT_ASYM,
    FUNC_SYM_SPATIAL,
    FUNC_ASYM_SPATIAL,
    FUNC_SYM_INTACT,
    FUNC_ASYM_INTACT,
};

std::string to_string(Method m);
/// Throws ConfigError for unknown names.
Method parse_method(const std::string& name);
const std::vector<Method>& all_methods();

bool uses_lwf(Method m);
bool uses_ewc(Method m);
bool uses_distillation(Method m);
/// Whether the previous-task snapshot is ever evaluated.
bool uses_teacher(Method m);

struct DataConfig {
    /// "synthetic", "cifar100" or "imagenet32".
    std::string source = "synthetic";
    std::string train_path;
    std::string test_path;
    // Synthetic generator settings; classes come from the split scheme.
    std::size_t samples_per_class = 100;
    std::uint64_t seed = 0;
    double signal = 0.4;
    double noise = 0.15;
};

struct TrainConfig {
    std::size_t epochs = 30;
    double lr = 0.01;
    double momentum = 0.9;
    std::size_t patience = 5;
    std::size_t batch_size = 16;
    double validation_fraction = 0.1;
    std::size_t fisher_samples = 2000;
    bool augment = true;
    /// Rescales the global gradient norm to at most this value; 0 disables.
    double clip_grad_norm = 0.0;
};

struct ExperimentConfig {
    static constexpr int kSchemaVersion = 1;

    ViTConfig model = ViTConfig::desk();
    Method method = Method::ATT_ASYM;
    LossWeights loss;
    NormKind norm = NormKind::squared;
    bool include_class_token = true;
    bool l2_normalize = false;
    std::string split = "synthetic/2x2";
    DataConfig data;
    TrainConfig train;
    std::vector<std::uint64_t> seeds{0};
    std::size_t threads = 1;
    std::string output_dir = "runs/padkit";

    /// Throws ConfigError naming the offending field.
    void validate() const;
    /// Distance configuration for ATT_* / FUNC_* methods.
    PadMode pad_mode() const;
};

nlohmann::json to_json(const ExperimentConfig& c);
/// Missing keys take defaults; unknown keys and wrong types are errors.
ExperimentConfig config_from_json(const nlohmann::json& j);
ExperimentConfig load_config(const std::string& path);
/// Applies `dotted.key=value` to `j`; the key must already exist. The value
/// is parsed as JSON when possible and taken as a string otherwise.
void apply_override(nlohmann::json& j, const std::string& assignment);

}  // namespace padkit
