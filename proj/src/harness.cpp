#include "padkit/harness.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <thread>

#include "padkit/ops.hpp"

namespace padkit {

using nlohmann::json;

namespace {

constexpr std::size_t kEvalBatch = 128;

std::vector<std::size_t> permutation(std::size_t n, Prng& prng) {
    std::vector<std::size_t> p(n);
    std::iota(p.begin(), p.end(), std::size_t{0});
    for (std::size_t i = n; i > 1; --i) std::swap(p[i - 1], p[prng.below(i)]);
    return p;
}

std::size_t parse_count(const std::string& s, const std::string& scheme) {
    if (s.empty() || !std::all_of(s.begin(), s.end(), [](char c) { return c >= '0' && c <= '9'; }))
        throw ConfigError("malformed split scheme \"" + scheme + "\"");
    const std::size_t v = std::stoul(s);
    if (v == 0) throw ConfigError("split scheme \"" + scheme + "\" has an empty dimension");
    return v;
}

std::vector<LabeledImage> prepared(std::span<const LabeledImage> images, const Normalizer& norm) {
    std::vector<LabeledImage> out;
    out.reserve(images.size());
    for (const auto& img : images) out.push_back(augment_test(img, norm));
    return out;
}

std::vector<std::size_t> head_range(std::size_t count) {
    std::vector<std::size_t> h(count);
    std::iota(h.begin(), h.end(), std::size_t{0});
    return h;
}

std::size_t argmax_row(std::span<const double> row) {
    return static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
}

// Mean objective over a prepared (already normalized) image list.
double validation_objective(const TaskState& state, const std::vector<LabeledImage>& val,
                            const ExperimentConfig& config) {
    NoGradScope no_grad;
    double total = 0.0;
    for (std::size_t start = 0; start < val.size(); start += kEvalBatch) {
        const std::size_t n = std::min(kEvalBatch, val.size() - start);
        const std::span<const LabeledImage> chunk(val.data() + start, n);
        std::vector<std::size_t> labels;
        for (const auto& img : chunk) labels.push_back(img.fine);
        const BatchObjective obj = batch_objective(state, stack_images(chunk), labels, config);
        total += obj.values.total * static_cast<double>(n);
    }
    return total / static_cast<double>(val.size());
}

std::uint64_t teacher_checksum(const TaskState& s) {
    return s.teacher ? parameter_checksum(s.teacher->model().parameters()) : 0;
}

}  // namespace

std::vector<std::size_t> scheme_task_sizes(const std::string& scheme) {
    if (scheme == "cifar100/10") return std::vector<std::size_t>(10, 10);
    if (scheme == "cifar100/20base") {
        std::vector<std::size_t> s{20};
        s.resize(9, 10);
        return s;
    }
    if (scheme == "cifar100/50base") {
        std::vector<std::size_t> s{50};
        s.resize(6, 10);
        return s;
    }
    if (scheme == "imagenet32/6") return std::vector<std::size_t>(6, 50);
    const std::string prefix = "synthetic/";
    if (scheme.rfind(prefix, 0) == 0) {
        const std::string rest = scheme.substr(prefix.size());
        std::size_t sep = rest.find('x');
        std::size_t sep_len = 1;
        if (sep == std::string::npos) {
            sep = rest.find("\xC3\x97");  // multiplication sign
            sep_len = 2;
        }
        if (sep == std::string::npos) throw ConfigError("malformed split scheme \"" + scheme + "\"");
        const std::size_t tasks = parse_count(rest.substr(0, sep), scheme);
        const std::size_t per = parse_count(rest.substr(sep + sep_len), scheme);
        return std::vector<std::size_t>(tasks, per);
    }
    throw ConfigError("unknown split scheme \"" + scheme + "\"");
}

std::vector<std::vector<std::size_t>> split_tasks(std::size_t num_classes, const std::string& scheme,
                                                  std::uint64_t seed) {
    const auto sizes = scheme_task_sizes(scheme);
    const std::size_t needed = std::accumulate(sizes.begin(), sizes.end(), std::size_t{0});
    if (num_classes < needed)
        throw DataError("split " + scheme + " needs " + std::to_string(needed) + " classes, dataset has " +
                        std::to_string(num_classes));
    Prng prng(seed);
    const auto perm = permutation(num_classes, prng);
    std::vector<std::vector<std::size_t>> out;
    std::size_t next = 0;
    for (std::size_t s : sizes) {
        out.emplace_back(perm.begin() + next, perm.begin() + next + s);
        next += s;
    }
    return out;
}

Dataset load_dataset(const ExperimentConfig& config) {
    Dataset d;
    if (config.data.source == "synthetic") {
        const auto sizes = scheme_task_sizes(config.split);
        SyntheticSpec spec;
        spec.num_classes = std::accumulate(sizes.begin(), sizes.end(), std::size_t{0});
        spec.samples_per_class = config.data.samples_per_class;
        spec.image_size = config.model.image_size;
        spec.channels = config.model.in_channels;
        spec.seed = config.data.seed;
        spec.signal = config.data.signal;
        spec.noise = config.data.noise;
        SplitData s = generate_synthetic(spec);
        d.train = std::move(s.train);
        d.test = std::move(s.test);
        d.num_classes = spec.num_classes;
        return d;
    }
    const RecordLayout layout =
        config.data.source == "cifar100" ? RecordLayout::cifar100() : RecordLayout::imagenet32();
    if (config.model.image_size != layout.image_size || config.model.in_channels != layout.channels)
        throw ConfigError(config.data.source + " requires model.image_size 32 and model.in_channels 3");
    if (config.data.train_path.empty() || config.data.test_path.empty())
        throw ConfigError("data.train_path and data.test_path are required for " + config.data.source);
    d.train = load_records(config.data.train_path, layout);
    d.test = load_records(config.data.test_path, layout);
    d.num_classes = layout.num_classes;
    return d;
}

std::vector<TaskData> make_tasks(const Dataset& data, const std::vector<std::vector<std::size_t>>& classes,
                                 double validation_fraction, std::uint64_t seed) {
    std::map<std::size_t, std::pair<std::size_t, std::size_t>> where;
    for (std::size_t t = 0; t < classes.size(); ++t)
        for (std::size_t i = 0; i < classes[t].size(); ++i)
            if (!where.emplace(classes[t][i], std::make_pair(t, i)).second)
                throw DataError("class " + std::to_string(classes[t][i]) + " appears in two tasks");

    std::vector<TaskData> tasks(classes.size());
    std::vector<std::vector<LabeledImage>> train(classes.size());
    auto route = [&](const LabeledImage& img, auto&& sink) {
        const auto it = where.find(img.fine);
        if (it == where.end()) return;
        LabeledImage copy = img;
        copy.fine = it->second.second;
        sink(it->second.first).push_back(std::move(copy));
    };
    for (const auto& img : data.train) route(img, [&](std::size_t t) -> auto& { return train[t]; });
    for (const auto& img : data.test) route(img, [&](std::size_t t) -> auto& { return tasks[t].test; });

    const Prng root(seed);
    for (std::size_t t = 0; t < classes.size(); ++t) {
        const std::size_t n = train[t].size();
        if (n < 2 || tasks[t].test.empty())
            throw DataError("task " + std::to_string(t) + " has too few train or test images");
        const std::size_t n_val = std::clamp<std::size_t>(
            static_cast<std::size_t>(std::llround(validation_fraction * static_cast<double>(n))), 1, n - 1);
        Prng prng = root.split(t);
        const auto perm = permutation(n, prng);
        std::vector<bool> is_val(n, false);
        for (std::size_t i = 0; i < n_val; ++i) is_val[perm[i]] = true;
        for (std::size_t i = 0; i < n; ++i) (is_val[i] ? tasks[t].val : tasks[t].train).push_back(std::move(train[t][i]));
    }
    return tasks;
}

BatchObjective batch_objective(const TaskState& state, const Tensor& batch, std::span<const std::size_t> labels,
                               const ExperimentConfig& config, const ForwardOptions& options) {
    const std::size_t t = state.task;
    const bool has_teacher = t > 0 && state.teacher.has_value();
    const bool lwf = uses_lwf(config.method) && has_teacher;
    const bool distill = uses_distillation(config.method) && has_teacher;
    const bool ewc = uses_ewc(config.method) && state.fisher.has_value();

    std::vector<std::size_t> heads = lwf ? head_range(t + 1) : std::vector<std::size_t>{t};
    const ForwardOutput student = state.model.forward(batch, heads, distill, options);
    const Tensor ce = ce_loss(student.logits.back(), labels);

    Tensor lwf_term, reg;
    if (lwf || distill) {
        const std::vector<std::size_t> past = head_range(t);
        const ForwardOutput teacher = state.teacher->forward(batch, past, distill);
        if (lwf) {
            for (std::size_t h = 0; h < t; ++h) {
                const Tensor term = lwf_kd_loss(teacher.logits[h], student.logits[h], config.loss.temperature);
                lwf_term = lwf_term.defined() ? add(lwf_term, term) : term;
            }
        }
        if (distill) {
            const PadMode mode = config.pad_mode();
            reg = mode.target == DistillTarget::attention ? pad_attention_loss(*teacher.trace, *student.trace, mode)
                                                          : fd_functional_loss(*teacher.trace, *student.trace, mode);
        }
    }
    if (ewc) reg = ewc_penalty(state.model.parameters(), *state.fisher, config.loss.ewc_lambda);

    BatchObjective out;
    out.total = total_loss(ce, lwf_term, reg, config.loss);
    out.values.ce = ce.item();
    out.values.lwf = lwf_term.defined() ? lwf_term.item() : 0.0;
    out.values.reg = reg.defined() ? reg.item() : 0.0;
    out.values.total = out.total.item();
    return out;
}

TaskLog train_task(TaskState& state, const TaskData& data, const ExperimentConfig& config, const Normalizer& norm,
                   Prng& prng, const TrainHooks& hooks) {
    if (data.train.empty() || data.val.empty()) throw DataError("train_task needs train and validation images");
    if (state.model.head_count() <= state.task) throw std::out_of_range("head for the current task is missing");
    const auto start_time = std::chrono::steady_clock::now();
    const TrainConfig& tc = config.train;
    const std::vector<Tensor> params = state.model.parameters();
    std::vector<std::vector<double>> velocity(params.size());
    for (std::size_t j = 0; j < params.size(); ++j) velocity[j].assign(params[j].numel(), 0.0);
    const std::vector<LabeledImage> val = prepared(data.val, norm);

    TaskLog log;
    double best = std::numeric_limits<double>::infinity();
    std::vector<Tensor> best_params;
    std::size_t stale = 0;
    const ForwardOptions train_opts{true, &prng};
    for (std::size_t epoch = 0; epoch < tc.epochs; ++epoch) {
        const auto order = permutation(data.train.size(), prng);
        double epoch_loss = 0.0;
        for (std::size_t b0 = 0; b0 < order.size(); b0 += tc.batch_size) {
            const std::size_t n = std::min(tc.batch_size, order.size() - b0);
            std::vector<LabeledImage> imgs;
            std::vector<std::size_t> labels;
            for (std::size_t i = 0; i < n; ++i) {
                const LabeledImage& src = data.train[order[b0 + i]];
                imgs.push_back(tc.augment ? augment_train(src, prng, norm) : augment_test(src, norm));
                labels.push_back(src.fine);
            }
            Tape tape;
            TapeScope scope(tape);
            BatchObjective obj = batch_objective(state, stack_images(imgs), labels, config, train_opts);
            tape.backward(obj.total);
            double sq = 0.0;
            for (const auto& p : params)
                if (p.has_grad())
                    for (double g : p.grad()) sq += g * g;
            obj.values.grad_norm = std::sqrt(sq);
            double grad_scale = 1.0;
            if (tc.clip_grad_norm > 0.0 && obj.values.grad_norm > tc.clip_grad_norm)
                grad_scale = tc.clip_grad_norm / obj.values.grad_norm;
            for (std::size_t j = 0; j < params.size(); ++j) {
                if (!params[j].has_grad()) continue;
                Tensor p = params[j];
                auto w = p.mutable_data();
                const auto g = p.grad();
                auto& v = velocity[j];
                for (std::size_t i = 0; i < w.size(); ++i) {
                    v[i] = tc.momentum * v[i] + grad_scale * g[i];
                    w[i] -= tc.lr * v[i];
                }
                p.zero_grad();
            }
            epoch_loss += obj.values.total * static_cast<double>(n);
            if (hooks.on_batch) hooks.on_batch(obj.values);
        }
        const double val_loss = validation_objective(state, val, config);
        log.epochs.push_back({epoch_loss / static_cast<double>(order.size()), val_loss});
        if (val_loss < best) {
            best = val_loss;
            log.best_epoch = epoch;
            best_params.clear();
            for (const auto& p : params) best_params.push_back(p.detach().clone(false));
            stale = 0;
        } else if (++stale >= tc.patience) {
            log.early_stopped = true;
            break;
        }
    }
    if (!best_params.empty()) state.model.load_parameters(best_params);
    log.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start_time).count();
    return log;
}

std::vector<double> evaluate(const VisionTransformer& model, std::span<const TaskData> tasks, EvalMode mode,
                             const Normalizer& norm) {
    if (model.head_count() < tasks.size()) throw std::out_of_range("model lacks a head for a seen task");
    NoGradScope no_grad;
    const auto heads = head_range(tasks.size());
    std::vector<std::size_t> offset(tasks.size(), 0);
    for (std::size_t j = 1; j < tasks.size(); ++j) offset[j] = offset[j - 1] + model.head_classes(j - 1);

    std::vector<double> acc;
    for (std::size_t j = 0; j < tasks.size(); ++j) {
        const auto& test = tasks[j].test;
        if (test.empty()) throw DataError("task " + std::to_string(j) + " has no test images");
        std::size_t correct = 0;
        for (std::size_t start = 0; start < test.size(); start += kEvalBatch) {
            const std::size_t n = std::min(kEvalBatch, test.size() - start);
            const auto imgs = prepared(std::span<const LabeledImage>(test.data() + start, n), norm);
            const ForwardOutput out =
                model.forward(stack_images(imgs), mode == EvalMode::taw ? std::span<const std::size_t>(&heads[j], 1)
                                                                        : std::span<const std::size_t>(heads),
                              false);
            for (std::size_t b = 0; b < n; ++b) {
                const std::size_t label = imgs[b].fine;
                if (mode == EvalMode::taw) {
                    const std::size_t c = out.logits[0].dim(1);
                    correct += argmax_row(out.logits[0].data().subspan(b * c, c)) == label;
                } else {
                    std::vector<double> row;
                    for (const auto& l : out.logits) {
                        const std::size_t c = l.dim(1);
                        const auto r = l.data().subspan(b * c, c);
                        row.insert(row.end(), r.begin(), r.end());
                    }
                    correct += argmax_row(row) == offset[j] + label;
                }
            }
        }
        acc.push_back(static_cast<double>(correct) / static_cast<double>(test.size()));
    }
    return acc;
}

SeedResult run_seed(const ExperimentConfig& config, const Dataset& data, std::uint64_t seed,
                    const TrainHooks& hooks) {
    config.validate();
    const Prng root(seed);
    SeedResult r;
    r.seed = seed;
    r.classes = split_tasks(data.num_classes, config.split, root.split(0).next_u64());
    const auto tasks = make_tasks(data, r.classes, config.train.validation_fraction, root.split(1).next_u64());
    std::vector<LabeledImage> first(tasks[0].train);
    first.insert(first.end(), tasks[0].val.begin(), tasks[0].val.end());
    r.normalizer = Normalizer::fit(first);

    const std::size_t T = tasks.size();
    r.taw = AccuracyMatrix(T);
    r.tag = AccuracyMatrix(T);
    TaskState state{0, VisionTransformer(config.model, root.split(2).next_u64()), std::nullopt, std::nullopt,
                    r.classes};
    std::vector<ModelSnapshot> teachers;
    for (std::size_t t = 0; t < T; ++t) {
        state.task = t;
        if (t > 0) {
            state.teacher = snapshot(state.model, t - 1);
            teachers.push_back(*state.teacher);
        }
        state.model.add_head(r.classes[t].size());
        if (state.fisher) state.fisher->extend_to(state.model.parameters());

        const std::uint64_t before = teacher_checksum(state);
        Prng prng = root.split(100 + t);
        r.logs.push_back(train_task(state, tasks[t], config, r.normalizer, prng, hooks));
        r.teacher_isolated = r.teacher_isolated && teacher_checksum(state) == before;

        if (uses_ewc(config.method)) {
            const auto imgs = prepared(tasks[t].train, r.normalizer);
            std::vector<Tensor> xs;
            for (const auto& img : imgs) xs.push_back(image_tensor(img));
            Prng fp = root.split(200 + t);
            const FisherDiag f =
                estimate_fisher(state.model, t, xs, std::min(config.train.fisher_samples, xs.size()), fp);
            state.fisher = state.fisher ? FisherDiag::accumulate(*state.fisher, f) : f;
        }

        const std::span<const TaskData> seen(tasks.data(), t + 1);
        const auto taw = evaluate(state.model, seen, EvalMode::taw, r.normalizer);
        const auto tag = evaluate(state.model, seen, EvalMode::tag, r.normalizer);
        for (std::size_t j = 0; j <= t; ++j) {
            r.taw.record(t, j, taw[j]);
            r.tag.record(t, j, tag[j]);
        }
    }
    for (const auto& s : teachers) r.teacher_forwards += s.forward_count();
    return r;
}

RunResult run_sequence(const ExperimentConfig& config, const Dataset& data) {
    config.validate();
    RunResult out;
    out.seeds.resize(config.seeds.size());
    const std::size_t workers = std::min(config.threads, config.seeds.size());
    if (workers <= 1) {
        for (std::size_t i = 0; i < config.seeds.size(); ++i) out.seeds[i] = run_seed(config, data, config.seeds[i]);
    } else {
        std::vector<std::exception_ptr> errors(config.seeds.size());
        std::atomic<std::size_t> next{0};
        std::vector<std::thread> pool;
        for (std::size_t w = 0; w < workers; ++w)
            pool.emplace_back([&] {
                for (std::size_t i; (i = next.fetch_add(1)) < config.seeds.size();) {
                    try {
                        out.seeds[i] = run_seed(config, data, config.seeds[i]);
                    } catch (...) {
                        errors[i] = std::current_exception();
                    }
                }
            });
        for (auto& th : pool) th.join();
        for (const auto& e : errors)
            if (e) std::rethrow_exception(e);
    }
    std::vector<AccuracyMatrix> taw, tag;
    for (const auto& s : out.seeds) {
        taw.push_back(s.taw);
        tag.push_back(s.tag);
    }
    out.taw = aggregate_seeds(taw);
    out.tag = aggregate_seeds(tag);
    return out;
}

json run_metadata(const ExperimentConfig& config, const RunResult& result) {
    json seeds = json::array();
    for (const auto& s : result.seeds) {
        json tasks = json::array();
        for (std::size_t t = 0; t < s.logs.size(); ++t) {
            json val = json::array(), train = json::array();
            for (const auto& e : s.logs[t].epochs) {
                val.push_back(e.val_loss);
                train.push_back(e.train_loss);
            }
            tasks.push_back({{"task", t},
                             {"classes", s.classes[t]},
                             {"val_losses", val},
                             {"train_losses", train},
                             {"best_epoch", s.logs[t].best_epoch},
                             {"early_stopped", s.logs[t].early_stopped},
                             {"wall_clock_seconds", s.logs[t].seconds}});
        }
        seeds.push_back({{"seed", s.seed},
                         {"normalization", {{"mean", s.normalizer.mean}, {"std", s.normalizer.stddev}}},
                         {"teacher_forwards", s.teacher_forwards},
                         {"teacher_isolated", s.teacher_isolated},
                         {"tasks", tasks}});
    }
    const PadMode mode = config.pad_mode();
    return {
        {"config", to_json(config)},
        {"prng", Prng::algorithm()},
        {"design",
         {{"optimizer", "sgd, momentum " + std::to_string(config.train.momentum) + ", constant lr within a task"},
          {"gradient_clipping", config.train.clip_grad_norm > 0.0 ? "global L2 norm" : "off"},
          {"validation", "seeded fraction of each task's train set; monitors the full training objective"},
          {"early_stopping", "stop after `patience` epochs without strict improvement; restore best parameters"},
          {"task_agnostic_protocol", "argmax over concatenated logits of all seen heads"},
          {"distance_norm", to_string(mode.norm)},
          {"pooling_reading", "pool one axis fully, norm of the pooled difference, width and height terms added"},
          {"l2_normalize_pooled", mode.l2_normalize},
          {"include_class_token", mode.include_class_token},
          {"batch_reduction", "mean"},
          {"lwf_form", "KL(softmax(old/T) || softmax(new/T)) * T^2, summed over past heads"},
          {"fisher_labels", "model argmax"},
          {"fisher_accumulation", "running sum across tasks, anchors refreshed after each task"},
          {"ewc_weighting", "mu multiplies the penalty; ewc_lambda scales it inside"},
          {"normalization", "per-channel mean/std of the first task's training images"},
          {"augmentation_padding_value", 0},
          {"past_heads", "trainable"},
          {"forgetting_formula", kForgettingFormula}}},
        {"seeds", seeds},
    };
}

}  // namespace padkit
