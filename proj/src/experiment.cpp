#include "padkit/experiment.hpp"

#include <fstream>

namespace padkit {

using nlohmann::json;

namespace {

const std::vector<std::pair<Method, std::string>>& method_names() {
    static const std::vector<std::pair<Method, std::string>> names{
        {Method::FT, "FT"},
        {Method::LWF, "LWF"},
        {Method::EWC, "EWC"},
        {Method::ATT_SYM, "ATT_SYM"},
        {Method::ATT_ASYM, "ATT_ASYM"},
        {Method::FUNC_SYM_SPATIAL, "FUNC_SYM_SPATIAL"},
        {Method::FUNC_ASYM_SPATIAL, "FUNC_ASYM_SPATIAL"},
        {Method::FUNC_SYM_INTACT, "FUNC_SYM_INTACT"},
        {Method::FUNC_ASYM_INTACT, "FUNC_ASYM_INTACT"},
    };
    return names;
}

NormKind parse_norm(const std::string& s) {
    if (s == "squared") return NormKind::squared;
    if (s == "plain") return NormKind::plain;
    throw ConfigError("loss.norm must be \"squared\" or \"plain\", got \"" + s + "\"");
}

// Every key of `given` must exist in `defaults`; objects recurse, other
// values (arrays included) replace the default wholesale.
void merge_strict(json& defaults, const json& given, const std::string& prefix) {
    if (!given.is_object()) throw ConfigError((prefix.empty() ? "config" : prefix) + " must be a JSON object");
    for (const auto& [key, value] : given.items()) {
        const std::string path = prefix.empty() ? key : prefix + "." + key;
        if (!defaults.contains(key)) throw ConfigError("unknown config key \"" + path + "\"");
        json& slot = defaults[key];
        if (slot.is_object())
            merge_strict(slot, value, path);
        else
            slot = value;
    }
}

template <class T>
T get(const json& j, const char* key, const std::string& path) {
    try {
        return j.at(key).get<T>();
    } catch (const json::exception&) {
        throw ConfigError("config key \"" + path + "\" has the wrong type");
    }
}

}  // namespace

std::string to_string(Method m) {
    for (const auto& [k, v] : method_names())
        if (k == m) return v;
    return "?";
}

Method parse_method(const std::string& name) {
    for (const auto& [k, v] : method_names())
        if (v == name) return k;
    throw ConfigError("unknown method \"" + name + "\"");
}

const std::vector<Method>& all_methods() {
    static const std::vector<Method> all = [] {
        std::vector<Method> v;
        for (const auto& [k, _] : method_names()) v.push_back(k);
        return v;
    }();
    return all;
}

bool uses_lwf(Method m) { return m == Method::LWF || uses_distillation(m); }
bool uses_ewc(Method m) { return m == Method::EWC; }
bool uses_distillation(Method m) {
    return m != Method::FT && m != Method::LWF && m != Method::EWC;
}
bool uses_teacher(Method m) { return uses_lwf(m) || uses_distillation(m); }

void ExperimentConfig::validate() const {
    try {
        model.validate();
        loss.validate();
    } catch (const std::invalid_argument& e) {
        throw ConfigError(e.what());
    }
    if (train.epochs < 1) throw ConfigError("train.epochs must be at least 1");
    if (!(train.lr >= 0.0)) throw ConfigError("train.lr must be nonnegative");
    if (!(train.momentum >= 0.0 && train.momentum < 1.0)) throw ConfigError("train.momentum must lie in [0, 1)");
    if (train.patience < 1) throw ConfigError("train.patience must be at least 1");
    if (train.batch_size < 1) throw ConfigError("train.batch_size must be at least 1");
    if (!(train.validation_fraction > 0.0 && train.validation_fraction < 0.5))
        throw ConfigError("train.validation_fraction must lie in (0, 0.5)");
    if (!(train.clip_grad_norm >= 0.0)) throw ConfigError("train.clip_grad_norm must be nonnegative");
    if (train.fisher_samples < 1) throw ConfigError("train.fisher_samples must be at least 1");
    if (seeds.empty()) throw ConfigError("seeds must be nonempty");
    for (std::size_t i = 0; i < seeds.size(); ++i)
        for (std::size_t j = i + 1; j < seeds.size(); ++j)
            if (seeds[i] == seeds[j]) throw ConfigError("seeds must be distinct");
    if (threads < 1) throw ConfigError("threads must be at least 1");
    if (data.source != "synthetic" && data.source != "cifar100" && data.source != "imagenet32")
        throw ConfigError("data.source must be synthetic, cifar100 or imagenet32");
    if (data.source == "synthetic" && data.samples_per_class < 2)
        throw ConfigError("data.samples_per_class must be at least 2");
    if (!(data.signal >= 0.0) || !(data.noise >= 0.0)) throw ConfigError("data.signal and data.noise must be >= 0");
    if (output_dir.empty()) throw ConfigError("output_dir must be nonempty");
}

PadMode ExperimentConfig::pad_mode() const {
    PadMode m;
    m.norm = norm;
    m.include_class_token = include_class_token;
    m.l2_normalize = l2_normalize;
    switch (method) {
        case Method::ATT_SYM: m.symmetry = Symmetry::sym; break;
        case Method::FUNC_SYM_SPATIAL:
        case Method::FUNC_SYM_INTACT: m.symmetry = Symmetry::sym; break;
        default: m.symmetry = Symmetry::asym; break;
    }
    const bool functional = method == Method::FUNC_SYM_SPATIAL || method == Method::FUNC_ASYM_SPATIAL ||
                            method == Method::FUNC_SYM_INTACT || method == Method::FUNC_ASYM_INTACT;
    m.target = functional ? DistillTarget::functional : DistillTarget::attention;
    m.pooling = (method == Method::FUNC_SYM_INTACT || method == Method::FUNC_ASYM_INTACT) ? Pooling::intact
                                                                                          : Pooling::spatial;
    return m;
}

json to_json(const ExperimentConfig& c) {
    json stem = json::array();
    for (const auto& s : c.model.stem)
        stem.push_back({{"out_channels", s.out_channels}, {"kernel", s.kernel}, {"stride", s.stride}});
    return {
        {"schema_version", ExperimentConfig::kSchemaVersion},
        {"method", to_string(c.method)},
        {"split", c.split},
        {"seeds", c.seeds},
        {"threads", c.threads},
        {"output_dir", c.output_dir},
        {"model",
         {{"image_size", c.model.image_size},
          {"in_channels", c.model.in_channels},
          {"stem", stem},
          {"num_layers", c.model.num_layers},
          {"num_heads", c.model.num_heads},
          {"embed_dim", c.model.embed_dim},
          {"mlp_ratio", c.model.mlp_ratio},
          {"dropout", c.model.dropout}}},
        {"loss",
         {{"mu", c.loss.mu},
          {"lambda", c.loss.lambda},
          {"temperature", c.loss.temperature},
          {"ewc_lambda", c.loss.ewc_lambda},
          {"norm", to_string(c.norm)},
          {"include_class_token", c.include_class_token},
          {"l2_normalize", c.l2_normalize}}},
        {"train",
         {{"epochs", c.train.epochs},
          {"lr", c.train.lr},
          {"momentum", c.train.momentum},
          {"patience", c.train.patience},
          {"batch_size", c.train.batch_size},
          {"validation_fraction", c.train.validation_fraction},
          {"fisher_samples", c.train.fisher_samples},
          {"augment", c.train.augment},
          {"clip_grad_norm", c.train.clip_grad_norm}}},
        {"data",
         {{"source", c.data.source},
          {"train_path", c.data.train_path},
          {"test_path", c.data.test_path},
          {"samples_per_class", c.data.samples_per_class},
          {"seed", c.data.seed},
          {"signal", c.data.signal},
          {"noise", c.data.noise}}},
    };
}

ExperimentConfig config_from_json(const json& given) {
    json j = to_json(ExperimentConfig{});
    merge_strict(j, given, "");
    if (get<int>(j, "schema_version", "schema_version") != ExperimentConfig::kSchemaVersion)
        throw ConfigError("unsupported schema_version");

    ExperimentConfig c;
    c.method = parse_method(get<std::string>(j, "method", "method"));
    c.split = get<std::string>(j, "split", "split");
    c.seeds = get<std::vector<std::uint64_t>>(j, "seeds", "seeds");
    c.threads = get<std::size_t>(j, "threads", "threads");
    c.output_dir = get<std::string>(j, "output_dir", "output_dir");

    const json& m = j["model"];
    c.model.image_size = get<std::size_t>(m, "image_size", "model.image_size");
    c.model.in_channels = get<std::size_t>(m, "in_channels", "model.in_channels");
    c.model.num_layers = get<std::size_t>(m, "num_layers", "model.num_layers");
    c.model.num_heads = get<std::size_t>(m, "num_heads", "model.num_heads");
    c.model.embed_dim = get<std::size_t>(m, "embed_dim", "model.embed_dim");
    c.model.mlp_ratio = get<double>(m, "mlp_ratio", "model.mlp_ratio");
    c.model.dropout = get<double>(m, "dropout", "model.dropout");
    if (!m["stem"].is_array()) throw ConfigError("model.stem must be an array");
    c.model.stem.clear();
    for (const auto& s : m["stem"]) {
        for (const auto& [key, _] : s.items())
            if (key != "out_channels" && key != "kernel" && key != "stride")
                throw ConfigError("unknown config key \"model.stem[]." + key + "\"");
        c.model.stem.push_back({get<std::size_t>(s, "out_channels", "model.stem[].out_channels"),
                                get<std::size_t>(s, "kernel", "model.stem[].kernel"),
                                get<std::size_t>(s, "stride", "model.stem[].stride")});
    }

    const json& l = j["loss"];
    c.loss.mu = get<double>(l, "mu", "loss.mu");
    c.loss.lambda = get<double>(l, "lambda", "loss.lambda");
    c.loss.temperature = get<double>(l, "temperature", "loss.temperature");
    c.loss.ewc_lambda = get<double>(l, "ewc_lambda", "loss.ewc_lambda");
    c.norm = parse_norm(get<std::string>(l, "norm", "loss.norm"));
    c.include_class_token = get<bool>(l, "include_class_token", "loss.include_class_token");
    c.l2_normalize = get<bool>(l, "l2_normalize", "loss.l2_normalize");

    const json& t = j["train"];
    c.train.epochs = get<std::size_t>(t, "epochs", "train.epochs");
    c.train.lr = get<double>(t, "lr", "train.lr");
    c.train.momentum = get<double>(t, "momentum", "train.momentum");
    c.train.patience = get<std::size_t>(t, "patience", "train.patience");
    c.train.batch_size = get<std::size_t>(t, "batch_size", "train.batch_size");
    c.train.validation_fraction = get<double>(t, "validation_fraction", "train.validation_fraction");
    c.train.fisher_samples = get<std::size_t>(t, "fisher_samples", "train.fisher_samples");
    c.train.augment = get<bool>(t, "augment", "train.augment");
    c.train.clip_grad_norm = get<double>(t, "clip_grad_norm", "train.clip_grad_norm");

    const json& d = j["data"];
    c.data.source = get<std::string>(d, "source", "data.source");
    c.data.train_path = get<std::string>(d, "train_path", "data.train_path");
    c.data.test_path = get<std::string>(d, "test_path", "data.test_path");
    c.data.samples_per_class = get<std::size_t>(d, "samples_per_class", "data.samples_per_class");
    c.data.seed = get<std::uint64_t>(d, "seed", "data.seed");
    c.data.signal = get<double>(d, "signal", "data.signal");
    c.data.noise = get<double>(d, "noise", "data.noise");

    c.validate();
    return c;
}

ExperimentConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read config file " + path);
    json j;
    try {
        j = json::parse(in);
    } catch (const json::parse_error& e) {
        throw ConfigError("malformed config " + path + ": " + e.what());
    }
    return config_from_json(j);
}

void apply_override(json& j, const std::string& assignment) {
    const std::size_t eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("override \"" + assignment + "\" is not key=value");
    const std::string key = assignment.substr(0, eq);
    const std::string text = assignment.substr(eq + 1);
    json* slot = &j;
    std::size_t start = 0;
    while (true) {
        const std::size_t dot = key.find('.', start);
        const std::string part = key.substr(start, dot - start);
        if (!slot->is_object() || !slot->contains(part)) throw ConfigError("unknown config key \"" + key + "\"");
        slot = &(*slot)[part];
        if (dot == std::string::npos) break;
        start = dot + 1;
    }
    json value = json::parse(text, nullptr, false);
    if (value.is_discarded()) value = text;
    *slot = value;
}

}  // namespace padkit
