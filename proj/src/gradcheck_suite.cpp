#include "padkit/gradcheck_suite.hpp"

#include <functional>
#include <stdexcept>

#include "padkit/harness.hpp"
#include "padkit/ops.hpp"
#include "padkit/prng.hpp"
#include "padkit/regularizers.hpp"
#include "padkit/vit.hpp"

namespace padkit {

namespace {

Tensor random_tensor(const Shape& shape, std::uint64_t seed) {
    Prng prng(seed);
    std::vector<double> v(numel_of(shape));
    for (auto& x : v) x = prng.normal();
    return Tensor(shape, std::move(v));
}

// Fixed random weights give every output coordinate its own gradient.
Tensor weighted_sum(const Tensor& y, std::uint64_t seed = 99) {
    return sum(mul(y, random_tensor(y.shape(), seed)));
}

using Fn = std::function<Tensor(const Tensor&)>;

GradCheckItem single(std::string name, const Fn& f, const Tensor& x) {
    GradCheckItem item;
    item.name = std::move(name);
    item.worst_at = "input";
    Tensor probe = x.clone(true);
    item.result = grad_check_params([&] { return f(probe); }, {probe}, kGradCheckEps);
    return item;
}

GradCheckItem over_model(std::string name, const VisionTransformer& model, const std::function<Tensor()>& f) {
    GradCheckItem item;
    item.name = std::move(name);
    item.result = grad_check_params(f, model.parameters(), kGradCheckEps, 6, 1);
    item.worst_at = model.parameter_names()[item.result.tensor_index];
    return item;
}

GradCheckItem fault_item() {
    return single("fault.detached_factor",
                  [](const Tensor& x) { return add(sum(square(x)), scale(sum(mul(x.detach(), x)), 0.5)); },
                  Tensor::vector({2.0, -1.0}));
}

std::vector<GradCheckItem> op_items() {
    std::vector<GradCheckItem> out;
    auto check = [&](const char* name, const Fn& f, const Tensor& x) { out.push_back(single(name, f, x)); };
    const Tensor w23 = random_tensor({2, 3}, 31);
    const Tensor r34 = random_tensor({3, 4}, 32), l223 = random_tensor({2, 2, 3}, 34);
    const Tensor l234 = random_tensor({2, 3, 4}, 36), b423 = random_tensor({4, 2, 3}, 41);
    check("matmul.left", [&](const Tensor& a) { return weighted_sum(matmul(a, r34)); }, random_tensor({2, 2, 3}, 33));
    check("matmul.right", [&](const Tensor& b) { return weighted_sum(matmul(l223, b)); }, random_tensor({3, 4}, 35));
    check("matmul.batched", [&](const Tensor& b) { return weighted_sum(matmul(l234, b)); },
          random_tensor({2, 4, 2}, 37));
    check("transpose", [](const Tensor& x) { return weighted_sum(transpose(x)); }, random_tensor({2, 3, 4}, 38));
    check("permute", [](const Tensor& x) { return weighted_sum(permute(x, {2, 0, 3, 1})); },
          random_tensor({2, 3, 4, 2}, 39));
    check("reshape", [](const Tensor& x) { return weighted_sum(reshape(x, {3, 4})); }, random_tensor({2, 6}, 40));
    check("add.broadcast", [&](const Tensor& b) { return weighted_sum(add(b423, b)); }, w23);
    check("sub", [&](const Tensor& a) { return weighted_sum(sub(w23, a)); }, random_tensor({2, 3}, 42));
    check("mul", [&](const Tensor& a) { return weighted_sum(mul(a, w23)); }, random_tensor({2, 3}, 43));
    check("scale", [](const Tensor& a) { return weighted_sum(scale(a, -1.7)); }, random_tensor({5}, 44));
    check("relu", [](const Tensor& a) { return weighted_sum(relu(a)); }, random_tensor({3, 5}, 45));
    check("gelu", [](const Tensor& a) { return weighted_sum(gelu(a)); }, random_tensor({3, 5}, 46));
    check("square", [](const Tensor& a) { return weighted_sum(square(a)); }, random_tensor({6}, 47));
    check("sqrt", [](const Tensor& a) { return weighted_sum(sqrt(square(a))); }, random_tensor({6}, 48));
    check("reduce_sum.first", [](const Tensor& a) { return weighted_sum(reduce_sum(a, 0)); },
          random_tensor({3, 4}, 49));
    check("reduce_sum.middle", [](const Tensor& a) { return weighted_sum(reduce_sum(a, 1)); },
          random_tensor({2, 3, 4}, 50));
    check("mean", [](const Tensor& a) { return mean(square(a)); }, random_tensor({7}, 51));
    check("softmax.last", [](const Tensor& a) { return weighted_sum(softmax(a, -1)); }, random_tensor({3, 5}, 52));
    check("softmax.middle", [](const Tensor& a) { return weighted_sum(softmax(a, 1)); },
          random_tensor({2, 4, 3}, 53));
    check("log_softmax", [](const Tensor& a) { return weighted_sum(log_softmax(a, -1)); },
          random_tensor({3, 5}, 54));
    const Tensor gamma = random_tensor({5}, 55), beta = random_tensor({5}, 56);
    const Tensor ln_x = random_tensor({3, 5}, 58);
    check("layer_norm.x", [&](const Tensor& a) { return weighted_sum(layer_norm(a, gamma, beta, 1e-5)); },
          random_tensor({3, 5}, 57));
    check("layer_norm.gamma", [&](const Tensor& g) { return weighted_sum(layer_norm(ln_x, g, beta, 1e-5)); }, gamma);
    check("layer_norm.beta", [&](const Tensor& b) { return weighted_sum(layer_norm(ln_x, gamma, b, 1e-5)); }, beta);
    check("l2_normalize", [](const Tensor& a) { return weighted_sum(l2_normalize(a)); }, random_tensor({3, 4}, 60));
    const Tensor cw = random_tensor({3, 2, 3, 3}, 61), cb = random_tensor({3}, 62);
    const Tensor cx = random_tensor({2, 2, 5, 5}, 64);
    check("conv2d.x", [&](const Tensor& x) { return weighted_sum(conv2d(x, cw, cb, 2, 1)); },
          random_tensor({2, 2, 5, 5}, 63));
    check("conv2d.w", [&](const Tensor& w) { return weighted_sum(conv2d(cx, w, cb, 2, 1)); }, cw);
    check("conv2d.b", [&](const Tensor& b) { return weighted_sum(conv2d(cx, cw, b, 1, 0)); }, cb);
    check("select", [](const Tensor& a) { return weighted_sum(select(a, 1, 2)); }, random_tensor({2, 3, 4}, 66));
    check("narrow", [](const Tensor& a) { return weighted_sum(narrow(a, -1, 1, 2)); }, random_tensor({2, 3, 4}, 67));
    check("concat", [](const Tensor& a) { return weighted_sum(concat({a, square(a)}, 1)); },
          random_tensor({2, 3}, 68));
    check("expand", [](const Tensor& a) { return weighted_sum(expand(a, 3)); }, random_tensor({2, 2}, 69));
    const std::vector<std::size_t> labels{1, 0, 2};
    check("nll_loss", [&](const Tensor& a) { return nll_loss(log_softmax(a, -1), labels); },
          random_tensor({3, 4}, 70));
    return out;
}

Tensor image_batch(const ViTConfig& c, std::size_t n, std::uint64_t seed) {
    return random_tensor({n, c.in_channels, c.image_size, c.image_size}, seed);
}

std::vector<GradCheckItem> model_items() {
    const ViTConfig c = ViTConfig::desk();
    VisionTransformer model(c, 41);
    model.add_head(3);
    model.add_head(2);
    const Tensor x = image_batch(c, 2, 42);
    const std::vector<std::size_t> both{0, 1}, labels{1, 2};
    std::vector<GradCheckItem> out;
    out.push_back(over_model("model.cross_entropy", model, [&] {
        return nll_loss(log_softmax(model.forward(x, both, false).logits[0], -1), labels);
    }));
    out.push_back(over_model("model.logits", model, [&] {
        const auto y = model.forward(x, both, false);
        return add(weighted_sum(y.logits[0], 7), weighted_sum(y.logits[1], 8));
    }));
    out.push_back(over_model("model.attention_trace", model, [&] {
        const auto y = model.forward(x, both, true);
        Tensor total = Tensor::scalar(0.0);
        for (std::size_t l = 0; l < y.trace->attn.size(); ++l)
            total = add(total, weighted_sum(y.trace->attn[l], 10 + l));
        return total;
    }));
    out.push_back(over_model("model.context_trace", model, [&] {
        const auto y = model.forward(x, both, true);
        Tensor total = Tensor::scalar(0.0);
        for (std::size_t l = 0; l < y.trace->ctx.size(); ++l)
            total = add(total, weighted_sum(y.trace->ctx[l], 20 + l));
        return total;
    }));
    return out;
}

std::vector<GradCheckItem> loss_items() {
    std::vector<GradCheckItem> out;
    for (Method m : all_methods()) {
        ExperimentConfig config;
        config.method = m;
        const ViTConfig& c = config.model;
        // A second-task state whose teacher differs from the student.
        VisionTransformer previous(c, 2);
        previous.add_head(2);
        TaskState state{1, VisionTransformer(c, 1), snapshot(previous, 0), std::nullopt, {}};
        state.model.add_head(2);
        state.model.add_head(3);
        if (uses_ewc(m)) {
            std::vector<Tensor> images;
            for (std::uint64_t i = 0; i < 3; ++i) images.push_back(random_tensor({c.in_channels, c.image_size, c.image_size}, 50 + i));
            Prng prng(3);
            FisherDiag fisher = estimate_fisher(previous, 0, images, 3, prng);
            fisher.extend_to(state.model.parameters());
            state.fisher = std::move(fisher);
        }
        const Tensor x = image_batch(c, 2, 5);
        const std::vector<std::size_t> labels{0, 2};
        out.push_back(over_model("loss." + to_string(m), state.model,
                                 [&] { return batch_objective(state, x, labels, config).total; }));
    }
    return out;
}

}  // namespace

GradScope parse_grad_scope(const std::string& name) {
    if (name == "ops") return GradScope::ops;
    if (name == "model") return GradScope::model;
    if (name == "losses") return GradScope::losses;
    throw std::invalid_argument("unknown gradcheck scope \"" + name + "\" (expected ops, model or losses)");
}

std::vector<GradCheckItem> run_gradcheck_suite(GradScope scope, bool inject_fault) {
    std::vector<GradCheckItem> items;
    switch (scope) {
        case GradScope::ops: items = op_items(); break;
        case GradScope::model: items = model_items(); break;
        case GradScope::losses: items = loss_items(); break;
    }
    if (inject_fault) items.push_back(fault_item());
    return items;
}

}  // namespace padkit
