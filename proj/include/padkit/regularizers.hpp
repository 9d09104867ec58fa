#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "padkit/prng.hpp"
#include "padkit/tensor.hpp"
#include "padkit/vit.hpp"

namespace padkit {

enum class Symmetry { sym, asym };
enum class DistillTarget { attention, functional };
enum class Pooling { spatial, intact };
enum class NormKind { squared, plain };

/// Configuration of a pooled distillation distance.
struct PadMode {
    Symmetry symmetry = Symmetry::asym;
    DistillTarget target = DistillTarget::attention;
    Pooling pooling = Pooling::spatial;
    NormKind norm = NormKind::squared;
    bool include_class_token = true;
    /// L2-normalize pooled vectors before differencing (off by default).
    bool l2_normalize = false;
};

std::string to_string(Symmetry s);
std::string to_string(DistillTarget t);
std::string to_string(Pooling p);
std::string to_string(NormKind n);

struct LossWeights {
    double mu = 1.0;           // weight of the pooled distillation / EWC term
    double lambda = 1.0;       // weight of the LwF term
    double temperature = 2.0;  // LwF softmax temperature
    double ewc_lambda = 100.0; // EWC strength inside the penalty

    void validate() const;
};

/// Diagonal Fisher importance with the anchor parameters captured alongside.
struct FisherDiag {
    std::vector<Tensor> importance;
    std::vector<Tensor> anchors;

    std::size_t size() const { return importance.size(); }
    /// Appends zero-importance entries (anchored at the current values) for
    /// parameters beyond the current length, e.g. newly added heads.
    void extend_to(const std::vector<Tensor>& params);
    /// Running sum of importances; anchors are replaced by `latest`'s.
    static FisherDiag accumulate(const FisherDiag& running, const FisherDiag& latest);
};

// --- Classification losses --------------------------------------------------

/// Mean cross-entropy of [B, C] logits against labels in [0, C).
Tensor ce_loss(const Tensor& logits, std::span<const std::size_t> labels);

/// T^2 * mean_b KL(softmax(old/T) || softmax(new/T)). The teacher side is
/// treated as a constant.
Tensor lwf_kd_loss(const Tensor& old_logits, const Tensor& new_logits, double temperature);

// --- Weight regularization ------------------------------------------------

/// F_j = mean over sampled inputs of (d log p(y_hat | x) / d theta_j)^2 with
/// y_hat the model's own argmax on `head`. `images` are [C, H, W] tensors;
/// `num_samples` of them are drawn without replacement.
FisherDiag estimate_fisher(const VisionTransformer& model, std::size_t head, std::span<const Tensor> images,
                           std::size_t num_samples, Prng& prng);

/// sum_j (lambda / 2) F_j (theta_j - anchor_j)^2, differentiable in params.
Tensor ewc_penalty(const std::vector<Tensor>& params, const FisherDiag& fisher, double lambda_ewc);

// --- Pooled distillation ----------------------------------------------------

enum class PoolAxis { first, second };

/// Sums a [.., P, Q] tensor over one of its last two axes: `second` leaves
/// one value per row (length P), `first` one value per column (length Q).
Tensor pool_map(const Tensor& m, PoolAxis axis);

/// Pooled distance between teacher (`old_map`) and student maps of shape
/// [.., P, Q], summed over all leading slices:
///   ||g(pool_second(old) - pool_second(new))|| + ||g(pool_first(old) - pool_first(new))||
/// with g the identity (sym) or ReLU (asym) and the norm per `mode.norm`.
/// Intact pooling replaces both terms by ||g(old - new)|| over the map.
Tensor pad_distance(const Tensor& old_map, const Tensor& new_map, const PadMode& mode);

/// Batch mean of (1/L)(1/K) sum_l sum_k pad_distance over attention maps.
Tensor pad_attention_loss(const ForwardTrace& trace_old, const ForwardTrace& trace_new, const PadMode& mode);

/// Same averaging over contextualized embeddings; spatial or intact.
Tensor fd_functional_loss(const ForwardTrace& trace_old, const ForwardTrace& trace_new, const PadMode& mode);

/// mu * reg + lambda * lwf + ce. Undefined `lwf`/`reg` contribute nothing.
Tensor total_loss(const Tensor& ce, const Tensor& lwf, const Tensor& reg, const LossWeights& weights);

}  // namespace padkit
