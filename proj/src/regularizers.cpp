#include "padkit/regularizers.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "padkit/ops.hpp"

namespace padkit {

std::string to_string(Symmetry s) { return s == Symmetry::sym ? "sym" : "asym"; }
std::string to_string(DistillTarget t) { return t == DistillTarget::attention ? "attention" : "functional"; }
std::string to_string(Pooling p) { return p == Pooling::spatial ? "spatial" : "intact"; }
std::string to_string(NormKind n) { return n == NormKind::squared ? "squared" : "plain"; }

void LossWeights::validate() const {
    if (!(mu >= 0.0 && mu <= 1.0)) throw std::invalid_argument("mu must lie in [0, 1]");
    if (!(lambda >= 0.0 && lambda <= 1.0)) throw std::invalid_argument("lambda must lie in [0, 1]");
    if (!(temperature > 0.0) || !std::isfinite(temperature))
        throw std::invalid_argument("temperature must be positive");
    if (!(ewc_lambda >= 0.0) || !std::isfinite(ewc_lambda))
        throw std::invalid_argument("ewc_lambda must be nonnegative");
}

void FisherDiag::extend_to(const std::vector<Tensor>& params) {
    if (params.size() < importance.size()) throw DimensionError("Fisher has more entries than parameters");
    for (std::size_t j = importance.size(); j < params.size(); ++j) {
        importance.push_back(Tensor::zeros(params[j].shape()));
        anchors.push_back(params[j].detach());
    }
}

FisherDiag FisherDiag::accumulate(const FisherDiag& running, const FisherDiag& latest) {
    if (running.size() > latest.size()) throw DimensionError("running Fisher longer than latest");
    FisherDiag out;
    for (std::size_t j = 0; j < latest.size(); ++j) {
        Tensor f = latest.importance[j].clone(false);
        if (j < running.size()) {
            if (running.importance[j].shape() != f.shape()) throw DimensionError("Fisher shape mismatch");
            auto d = f.mutable_data();
            const auto r = running.importance[j].data();
            for (std::size_t i = 0; i < d.size(); ++i) d[i] += r[i];
        }
        out.importance.push_back(std::move(f));
        out.anchors.push_back(latest.anchors[j].detach());
    }
    return out;
}

Tensor ce_loss(const Tensor& logits, std::span<const std::size_t> labels) {
    if (logits.rank() != 2) throw DimensionError("ce_loss expects [B, C] logits");
    return nll_loss(log_softmax(logits, -1), labels);
}

Tensor lwf_kd_loss(const Tensor& old_logits, const Tensor& new_logits, double temperature) {
    if (old_logits.shape() != new_logits.shape())
        throw DimensionError("lwf_kd_loss shape mismatch: " + shape_str(old_logits.shape()) + " vs " +
                             shape_str(new_logits.shape()));
    if (old_logits.rank() != 2) throw DimensionError("lwf_kd_loss expects [B, C] logits");
    if (!(temperature > 0.0)) throw std::invalid_argument("temperature must be positive");
    const double inv_t = 1.0 / temperature;
    Tensor log_p;
    Tensor p;
    {
        NoGradScope no_grad;
        log_p = log_softmax(scale(old_logits.detach(), inv_t), -1);
        p = softmax(scale(old_logits.detach(), inv_t), -1);
    }
    const Tensor log_q = log_softmax(scale(new_logits, inv_t), -1);
    const double factor = temperature * temperature / static_cast<double>(old_logits.dim(0));
    return scale(sum(mul(p, sub(log_p, log_q))), factor);
}

FisherDiag estimate_fisher(const VisionTransformer& model, std::size_t head, std::span<const Tensor> images,
                           std::size_t num_samples, Prng& prng) {
    if (images.empty()) throw std::invalid_argument("estimate_fisher needs a nonempty dataset");
    if (num_samples == 0 || num_samples > images.size())
        throw std::invalid_argument("num_samples must lie in [1, dataset size]");

    std::vector<std::size_t> order(images.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    for (std::size_t i = 0; i < num_samples; ++i) std::swap(order[i], order[i + prng.below(order.size() - i)]);

    VisionTransformer work = model.clone(true);
    const std::vector<Tensor> params = work.parameters();
    FisherDiag fisher;
    for (const auto& p : params) {
        fisher.importance.push_back(Tensor::zeros(p.shape()));
        fisher.anchors.push_back(p.detach());
    }
    const std::vector<std::size_t> heads{head};
    for (std::size_t s = 0; s < num_samples; ++s) {
        const Tensor& img = images[order[s]];
        Shape batch_shape{1};
        batch_shape.insert(batch_shape.end(), img.shape().begin(), img.shape().end());
        const Tensor x = reshape(img.detach(), batch_shape);
        Tape tape;
        TapeScope scope(tape);
        const Tensor logp = log_softmax(work.forward(x, heads, false).logits[0], -1);
        const auto row = logp.data();
        const std::size_t y_hat =
            static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
        const std::vector<std::size_t> label{y_hat};
        tape.backward(nll_loss(logp, label));
        for (std::size_t j = 0; j < params.size(); ++j) {
            if (!params[j].has_grad()) continue;
            auto f = fisher.importance[j].mutable_data();
            const auto g = params[j].grad();
            for (std::size_t i = 0; i < f.size(); ++i) f[i] += g[i] * g[i];
        }
        for (auto p : params) p.zero_grad();
    }
    const double inv_n = 1.0 / static_cast<double>(num_samples);
    for (auto& f : fisher.importance)
        for (double& v : f.mutable_data()) v *= inv_n;
    return fisher;
}

Tensor ewc_penalty(const std::vector<Tensor>& params, const FisherDiag& fisher, double lambda_ewc) {
    if (params.size() != fisher.importance.size() || params.size() != fisher.anchors.size())
        throw DimensionError("Fisher is not aligned with the parameter list");
    Tensor total = Tensor::scalar(0.0);
    for (std::size_t j = 0; j < params.size(); ++j) {
        if (params[j].shape() != fisher.importance[j].shape() || params[j].shape() != fisher.anchors[j].shape())
            throw DimensionError("Fisher entry " + std::to_string(j) + " does not match its parameter");
        const Tensor diff = sub(params[j], fisher.anchors[j].detach());
        total = add(total, sum(mul(fisher.importance[j].detach(), square(diff))));
    }
    return scale(total, 0.5 * lambda_ewc);
}

Tensor pool_map(const Tensor& m, PoolAxis axis) {
    if (m.rank() != 2) throw DimensionError("pool_map expects a 2-D map, got " + shape_str(m.shape()));
    return reduce_sum(m, axis == PoolAxis::second ? 1 : 0);
}

namespace {

// Norm of every vector along the last `axes` axes, summed over the rest.
Tensor summed_norm(const Tensor& d, NormKind norm, std::size_t axes) {
    Tensor s = square(d);
    for (std::size_t i = 0; i < axes; ++i) s = reduce_sum(s, -1);
    if (norm == NormKind::plain) s = sqrt(s);
    return sum(s);
}

Tensor gate(const Tensor& d, Symmetry symmetry) { return symmetry == Symmetry::asym ? relu(d) : d; }

Tensor check_pair(const Tensor& old_map, const Tensor& new_map) {
    if (old_map.shape() != new_map.shape())
        throw DimensionError("distillation shape mismatch: " + shape_str(old_map.shape()) + " vs " +
                             shape_str(new_map.shape()));
    if (old_map.rank() < 2) throw DimensionError("distillation maps must have at least two axes");
    return old_map.detach();
}

Tensor drop_class_token(const Tensor& t, bool both_axes) {
    const std::size_t n = t.dim(-2);
    Tensor out = narrow(t, -2, 1, n - 1);
    if (both_axes) out = narrow(out, -1, 1, t.dim(-1) - 1);
    return out;
}

void check_traces(const ForwardTrace& a, const ForwardTrace& b) {
    if (a.attn.size() != b.attn.size() || a.ctx.size() != b.ctx.size() || a.attn.empty())
        throw DimensionError("trace layer counts differ or are empty");
    for (std::size_t l = 0; l < a.attn.size(); ++l)
        if (a.attn[l].shape() != b.attn[l].shape() || a.ctx[l].shape() != b.ctx[l].shape())
            throw DimensionError("trace shapes differ at layer " + std::to_string(l));
}

Tensor layer_average(const std::vector<Tensor>& olds, const std::vector<Tensor>& news, const PadMode& mode,
                     bool square_maps) {
    Tensor total = Tensor::scalar(0.0);
    for (std::size_t l = 0; l < olds.size(); ++l) {
        Tensor o = olds[l];
        Tensor n = news[l];
        if (!mode.include_class_token) {
            o = drop_class_token(o, square_maps);
            n = drop_class_token(n, square_maps);
        }
        total = add(total, pad_distance(o, n, mode));
    }
    const Tensor& first = olds[0];
    const double denom = static_cast<double>(olds.size() * first.dim(0) * first.dim(1));
    return scale(total, 1.0 / denom);
}

}  // namespace

Tensor pad_distance(const Tensor& old_map, const Tensor& new_map, const PadMode& mode) {
    const Tensor teacher = check_pair(old_map, new_map);
    if (mode.pooling == Pooling::intact) return summed_norm(gate(sub(teacher, new_map), mode.symmetry), mode.norm, 2);

    Tensor total;
    for (const int axis : {-1, -2}) {
        Tensor po = reduce_sum(teacher, axis);
        Tensor pn = reduce_sum(new_map, axis);
        if (mode.l2_normalize) {
            po = l2_normalize(po);
            pn = l2_normalize(pn);
        }
        const Tensor term = summed_norm(gate(sub(po, pn), mode.symmetry), mode.norm, 1);
        total = total.defined() ? add(total, term) : term;
    }
    return total;
}

Tensor pad_attention_loss(const ForwardTrace& trace_old, const ForwardTrace& trace_new, const PadMode& mode) {
    if (mode.target != DistillTarget::attention) throw std::invalid_argument("PadMode target must be attention");
    check_traces(trace_old, trace_new);
    return layer_average(trace_old.attn, trace_new.attn, mode, true);
}

Tensor fd_functional_loss(const ForwardTrace& trace_old, const ForwardTrace& trace_new, const PadMode& mode) {
    if (mode.target != DistillTarget::functional) throw std::invalid_argument("PadMode target must be functional");
    check_traces(trace_old, trace_new);
    return layer_average(trace_old.ctx, trace_new.ctx, mode, false);
}

Tensor total_loss(const Tensor& ce, const Tensor& lwf, const Tensor& reg, const LossWeights& weights) {
    Tensor total = ce;
    if (reg.defined()) total = add(total, scale(reg, weights.mu));
    if (lwf.defined()) total = add(total, scale(lwf, weights.lambda));
    return total;
}

}  // namespace padkit
