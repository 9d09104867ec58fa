#pragma once

#include <atomic>
#include <cstddef>
#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "padkit/prng.hpp"
#include "padkit/tensor.hpp"

namespace padkit {

struct StemLayer {
    std::size_t out_channels;
    std::size_t kernel;
    std::size_t stride;
};

/// Architecture of the micro vision transformer.
struct ViTConfig {
    std::size_t image_size = 16;
    std::size_t in_channels = 3;
    /// 3x3 stride-2 convolutions followed by a pointwise projection to embed_dim.
    std::vector<StemLayer> stem = {{8, 3, 2}, {16, 3, 2}};
    std::size_t num_layers = 2;
    std::size_t num_heads = 2;
    std::size_t embed_dim = 32;
    double mlp_ratio = 2.0;
    double dropout = 0.0;
    /// Informational; heads are added one task at a time.
    std::size_t num_tasks = 0;

    /// The L=12, K=12, d_e=192 network on 32x32 inputs.
    static ViTConfig paper();
    /// Two layers, two heads, 32-wide embeddings on 16x16 inputs.
    static ViTConfig desk();

    /// Throws std::invalid_argument describing the first violated constraint.
    void validate() const;
    /// Side length of the token grid produced by the stem.
    std::size_t grid_size() const;
    /// Grid tokens plus the class token.
    std::size_t num_tokens() const { return grid_size() * grid_size() + 1; }
    std::size_t head_dim() const { return embed_dim / num_heads; }
    std::size_t mlp_hidden() const;
    /// Scalar count excluding classifier heads.
    std::size_t backbone_parameter_count() const;

    bool operator==(const ViTConfig&) const = default;
};

inline bool operator==(const StemLayer& a, const StemLayer& b) {
    return a.out_channels == b.out_channels && a.kernel == b.kernel && a.stride == b.stride;
}

/// Prescaled attention maps and per-head contextualized embeddings captured
/// during one forward pass.
///
/// Layer tensors keep the batch and head axes together: attn[l] is
/// [B, K, N, N] (pre-softmax QK^T / sqrt(d_h)) and ctx[l] is [B, K, N, d_h]
/// (attention-weighted values before the output projection). When the
/// student produced the trace they remain on the tape.
struct ForwardTrace {
    std::vector<Tensor> attn;
    std::vector<Tensor> ctx;

    std::size_t num_layers() const { return attn.size(); }
    std::size_t num_heads() const { return attn.empty() ? 0 : attn[0].dim(1); }
    std::size_t batch_size() const { return attn.empty() ? 0 : attn[0].dim(0); }

    /// N x N map of layer `l`, head `k`, sample `b` (detached copy).
    Tensor attn_map(std::size_t l, std::size_t k, std::size_t b = 0) const;
    /// N x d_h embedding of layer `l`, head `k`, sample `b` (detached copy).
    Tensor ctx_map(std::size_t l, std::size_t k, std::size_t b = 0) const;
};

struct ForwardOutput {
    /// One [B, c_i] tensor per requested head, in request order.
    std::vector<Tensor> logits;
    std::optional<ForwardTrace> trace;
};

struct ForwardOptions {
    /// Enables dropout; draws come from `prng`, which must then be set.
    bool train = false;
    Prng* prng = nullptr;
};

/// Convolutional-stem ViT with one linear classifier head per task.
class VisionTransformer {
   public:
    VisionTransformer(const ViTConfig& config, std::uint64_t seed);

    const ViTConfig& config() const { return config_; }

    /// Appends a freshly initialized head and returns its index.
    std::size_t add_head(std::size_t num_classes);
    std::size_t head_count() const { return heads_.size(); }
    std::size_t head_classes(std::size_t head) const;

    /// batch is [B, C, H, W] with H == W == image_size.
    ForwardOutput forward(const Tensor& batch, std::span<const std::size_t> heads, bool capture_trace,
                          const ForwardOptions& options = {}) const;

    /// All parameters in declaration order: stem, projection, class token,
    /// positional embedding, blocks, final norm, heads.
    std::vector<Tensor> parameters() const;
    std::vector<std::string> parameter_names() const;
    std::size_t parameter_count() const;

    /// Deep copy; parameters of the copy require gradients iff `trainable`.
    VisionTransformer clone(bool trainable) const;

    /// State of the generator that initializes future heads.
    std::uint64_t init_state() const { return init_prng_.state(); }
    void set_init_state(std::uint64_t state) { init_prng_ = Prng(state); }

    /// Replaces parameter values in declaration order. Shapes must match.
    void load_parameters(std::span<const Tensor> values);

   private:
    struct Conv {
        Tensor weight, bias;
        std::size_t stride = 1, padding = 0;
    };
    struct Block {
        Tensor norm1_gamma, norm1_beta;
        Tensor qkv_weight, qkv_bias;
        Tensor proj_weight, proj_bias;
        Tensor norm2_gamma, norm2_beta;
        Tensor fc1_weight, fc1_bias;
        Tensor fc2_weight, fc2_bias;
    };
    struct Head {
        Tensor weight, bias;
    };

    VisionTransformer() = default;

    Tensor linear_weight(std::size_t in, std::size_t out);
    Tensor conv_weight(std::size_t out, std::size_t in, std::size_t k, bool kaiming);

    ViTConfig config_;
    Prng init_prng_{0};
    std::vector<Conv> stem_;
    Conv projection_;
    Tensor class_token_, pos_embed_;
    std::vector<Block> blocks_;
    Tensor norm_gamma_, norm_beta_;
    std::vector<Head> heads_;
};

/// FNV-1a over the raw bytes of every parameter, in order.
std::uint64_t parameter_checksum(const std::vector<Tensor>& params);

/// Frozen copy of the model at the end of a task, used as the teacher.
class ModelSnapshot {
   public:
    ModelSnapshot(const VisionTransformer& model, std::size_t task_index);

    /// Never records onto a tape. Safe to call concurrently.
    ForwardOutput forward(const Tensor& batch, std::span<const std::size_t> heads, bool capture_trace) const;

    const VisionTransformer& model() const { return *model_; }
    std::size_t task_index() const { return task_index_; }
    /// Number of forward passes served by this snapshot and its copies.
    std::size_t forward_count() const { return counter_->load(); }

   private:
    std::shared_ptr<const VisionTransformer> model_;
    std::size_t task_index_;
    std::shared_ptr<std::atomic<std::size_t>> counter_;
};

ModelSnapshot snapshot(const VisionTransformer& model, std::size_t task_index);
ModelSnapshot snapshot(const ModelSnapshot& frozen);

}  // namespace padkit
