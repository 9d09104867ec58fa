#include "padkit/vit.hpp"

#include <cmath>
#include <cstring>
#include <stdexcept>

#include "padkit/ops.hpp"

namespace padkit {

namespace {

constexpr double kProjectionStd = 0.02;

// Normal draw rejected outside two standard deviations.
double truncated_normal(Prng& prng, double std_dev) {
    for (;;) {
        const double z = prng.normal();
        if (std::abs(z) <= 2.0) return z * std_dev;
    }
}

Tensor truncated_tensor(Prng& prng, const Shape& shape, double std_dev) {
    std::vector<double> v(numel_of(shape));
    for (auto& x : v) x = truncated_normal(prng, std_dev);
    return Tensor(shape, std::move(v), true);
}

std::size_t stem_out(std::size_t size, const StemLayer& layer) {
    const std::size_t pad = layer.kernel / 2;
    if (size + 2 * pad < layer.kernel) return 0;
    return (size + 2 * pad - layer.kernel) / layer.stride + 1;
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) { return add(matmul(x, weight), bias); }

}  // namespace

// ---------------------------------------------------------------------------
// ViTConfig

ViTConfig ViTConfig::paper() {
    ViTConfig c;
    c.image_size = 32;
    c.in_channels = 3;
    c.stem = {{48, 3, 2}, {96, 3, 2}};
    c.num_layers = 12;
    c.num_heads = 12;
    c.embed_dim = 192;
    c.mlp_ratio = 4.0;
    return c;
}

ViTConfig ViTConfig::desk() { return ViTConfig{}; }

void ViTConfig::validate() const {
    if (image_size == 0) throw std::invalid_argument("image_size must be positive");
    if (in_channels == 0) throw std::invalid_argument("in_channels must be positive");
    if (num_layers == 0) throw std::invalid_argument("num_layers must be at least 1");
    if (num_heads == 0) throw std::invalid_argument("num_heads must be at least 1");
    if (embed_dim == 0 || embed_dim % num_heads != 0) {
        throw std::invalid_argument("embed_dim must be a positive multiple of num_heads");
    }
    if (!(mlp_ratio > 0.0) || mlp_hidden() == 0) throw std::invalid_argument("mlp_ratio too small");
    if (dropout < 0.0 || dropout >= 1.0) throw std::invalid_argument("dropout must be in [0, 1)");
    for (const auto& layer : stem) {
        if (layer.out_channels == 0 || layer.kernel == 0 || layer.stride == 0) {
            throw std::invalid_argument("stem layers need positive channels, kernel and stride");
        }
    }
    if (grid_size() == 0) throw std::invalid_argument("stem reduces the image below 1x1");
}

std::size_t ViTConfig::grid_size() const {
    std::size_t s = image_size;
    for (const auto& layer : stem) {
        if (layer.stride == 0 || s == 0) return 0;
        s = stem_out(s, layer);
    }
    return s;
}

std::size_t ViTConfig::mlp_hidden() const {
    return static_cast<std::size_t>(std::llround(mlp_ratio * static_cast<double>(embed_dim)));
}

std::size_t ViTConfig::backbone_parameter_count() const {
    std::size_t n = 0;
    std::size_t channels = in_channels;
    for (const auto& layer : stem) {
        n += layer.out_channels * channels * layer.kernel * layer.kernel + layer.out_channels;
        channels = layer.out_channels;
    }
    n += embed_dim * channels + embed_dim;                   // pointwise projection
    n += embed_dim + num_tokens() * embed_dim;               // class token, positions
    const std::size_t d = embed_dim, h = mlp_hidden();
    const std::size_t block = 2 * d                          // norm1
                              + d * 3 * d + 3 * d            // qkv
                              + d * d + d                    // output projection
                              + 2 * d                        // norm2
                              + d * h + h + h * d + d;       // mlp
    n += num_layers * block;
    n += 2 * d;                                              // final norm
    return n;
}

// ---------------------------------------------------------------------------
// ForwardTrace

Tensor ForwardTrace::attn_map(std::size_t l, std::size_t k, std::size_t b) const {
    NoGradScope off;
    return select(select(attn.at(l), 0, b), 0, k);
}

Tensor ForwardTrace::ctx_map(std::size_t l, std::size_t k, std::size_t b) const {
    NoGradScope off;
    return select(select(ctx.at(l), 0, b), 0, k);
}

// ---------------------------------------------------------------------------
// VisionTransformer

Tensor VisionTransformer::linear_weight(std::size_t in, std::size_t out) {
    return truncated_tensor(init_prng_, {in, out}, kProjectionStd);
}

Tensor VisionTransformer::conv_weight(std::size_t out, std::size_t in, std::size_t k, bool kaiming) {
    const double std_dev = kaiming ? std::sqrt(2.0 / static_cast<double>(in * k * k)) : kProjectionStd;
    return truncated_tensor(init_prng_, {out, in, k, k}, std_dev);
}

VisionTransformer::VisionTransformer(const ViTConfig& config, std::uint64_t seed)
    : config_(config), init_prng_(seed) {
    config_.validate();
    const std::size_t d = config_.embed_dim;
    std::size_t channels = config_.in_channels;
    for (const auto& layer : config_.stem) {
        Conv conv;
        conv.weight = conv_weight(layer.out_channels, channels, layer.kernel, true);
        conv.bias = Tensor::zeros({layer.out_channels}, true);
        conv.stride = layer.stride;
        conv.padding = layer.kernel / 2;
        stem_.push_back(conv);
        channels = layer.out_channels;
    }
    projection_.weight = conv_weight(d, channels, 1, false);
    projection_.bias = Tensor::zeros({d}, true);
    class_token_ = truncated_tensor(init_prng_, {1, d}, kProjectionStd);
    pos_embed_ = truncated_tensor(init_prng_, {config_.num_tokens(), d}, kProjectionStd);
    const std::size_t hidden = config_.mlp_hidden();
    for (std::size_t l = 0; l < config_.num_layers; ++l) {
        Block b;
        b.norm1_gamma = Tensor::full({d}, 1.0, true);
        b.norm1_beta = Tensor::zeros({d}, true);
        b.qkv_weight = linear_weight(d, 3 * d);
        b.qkv_bias = Tensor::zeros({3 * d}, true);
        b.proj_weight = linear_weight(d, d);
        b.proj_bias = Tensor::zeros({d}, true);
        b.norm2_gamma = Tensor::full({d}, 1.0, true);
        b.norm2_beta = Tensor::zeros({d}, true);
        b.fc1_weight = linear_weight(d, hidden);
        b.fc1_bias = Tensor::zeros({hidden}, true);
        b.fc2_weight = linear_weight(hidden, d);
        b.fc2_bias = Tensor::zeros({d}, true);
        blocks_.push_back(b);
    }
    norm_gamma_ = Tensor::full({d}, 1.0, true);
    norm_beta_ = Tensor::zeros({d}, true);
}

std::size_t VisionTransformer::add_head(std::size_t num_classes) {
    if (num_classes == 0) throw std::invalid_argument("add_head: num_classes must be positive");
    Head h;
    h.weight = linear_weight(config_.embed_dim, num_classes);
    h.bias = Tensor::zeros({num_classes}, true);
    heads_.push_back(h);
    return heads_.size() - 1;
}

std::size_t VisionTransformer::head_classes(std::size_t head) const {
    if (head >= heads_.size()) throw std::out_of_range("unknown head " + std::to_string(head));
    return heads_[head].weight.dim(1);
}

ForwardOutput VisionTransformer::forward(const Tensor& batch, std::span<const std::size_t> heads,
                                         bool capture_trace, const ForwardOptions& options) const {
    if (batch.rank() != 4 || batch.dim(1) != config_.in_channels || batch.dim(2) != config_.image_size ||
        batch.dim(3) != config_.image_size) {
        throw DimensionError("forward: expected [B, " + std::to_string(config_.in_channels) + ", " +
                             std::to_string(config_.image_size) + ", " + std::to_string(config_.image_size) +
                             "], got " + shape_str(batch.shape()));
    }
    for (auto h : heads) {
        if (h >= heads_.size()) throw std::out_of_range("forward: unknown head " + std::to_string(h));
    }
    const bool use_dropout = options.train && config_.dropout > 0.0;
    if (use_dropout && options.prng == nullptr) throw std::invalid_argument("forward: dropout needs a prng");
    auto drop = [&](const Tensor& t) { return use_dropout ? dropout(t, config_.dropout, *options.prng) : t; };

    const std::size_t B = batch.dim(0);
    const std::size_t D = config_.embed_dim;
    const std::size_t K = config_.num_heads;
    const std::size_t dh = config_.head_dim();
    const std::size_t N = config_.num_tokens();
    const double attn_scale = 1.0 / std::sqrt(static_cast<double>(dh));

    Tensor x = batch;
    for (const auto& conv : stem_) x = relu(conv2d(x, conv.weight, conv.bias, conv.stride, conv.padding));
    x = conv2d(x, projection_.weight, projection_.bias, 1, 0);                // [B, D, g, g]
    x = transpose(reshape(x, {B, D, N - 1}));                                  // [B, N-1, D]
    x = concat({expand(class_token_, B), x}, 1);                               // [B, N, D]
    x = drop(add(x, pos_embed_));

    ForwardOutput out;
    ForwardTrace trace;
    for (const auto& blk : blocks_) {
        Tensor h = layer_norm(x, blk.norm1_gamma, blk.norm1_beta, 1e-6);
        Tensor qkv = linear(h, blk.qkv_weight, blk.qkv_bias);                 // [B, N, 3D]
        qkv = permute(reshape(qkv, {B, N, 3, K, dh}), {2, 0, 3, 1, 4});        // [3, B, K, N, dh]
        Tensor q = select(qkv, 0, 0);
        Tensor k = select(qkv, 0, 1);
        Tensor v = select(qkv, 0, 2);
        Tensor attn = scale(matmul(q, transpose(k)), attn_scale);              // [B, K, N, N]
        Tensor z = matmul(drop(softmax(attn, -1)), v);                         // [B, K, N, dh]
        if (capture_trace) {
            trace.attn.push_back(attn);
            trace.ctx.push_back(z);
        }
        Tensor merged = reshape(permute(z, {0, 2, 1, 3}), {B, N, D});
        x = add(x, drop(linear(merged, blk.proj_weight, blk.proj_bias)));
        Tensor m = layer_norm(x, blk.norm2_gamma, blk.norm2_beta, 1e-6);
        m = gelu(linear(m, blk.fc1_weight, blk.fc1_bias));
        x = add(x, drop(linear(m, blk.fc2_weight, blk.fc2_bias)));
    }
    x = layer_norm(x, norm_gamma_, norm_beta_, 1e-6);
    Tensor feature = select(x, 1, 0);                                          // [B, D]
    for (auto h : heads) out.logits.push_back(linear(feature, heads_[h].weight, heads_[h].bias));
    if (capture_trace) out.trace = std::move(trace);
    return out;
}

std::vector<Tensor> VisionTransformer::parameters() const {
    std::vector<Tensor> p;
    for (const auto& c : stem_) {
        p.push_back(c.weight);
        p.push_back(c.bias);
    }
    p.push_back(projection_.weight);
    p.push_back(projection_.bias);
    p.push_back(class_token_);
    p.push_back(pos_embed_);
    for (const auto& b : blocks_) {
        for (const Tensor* t : {&b.norm1_gamma, &b.norm1_beta, &b.qkv_weight, &b.qkv_bias, &b.proj_weight,
                                &b.proj_bias, &b.norm2_gamma, &b.norm2_beta, &b.fc1_weight, &b.fc1_bias,
                                &b.fc2_weight, &b.fc2_bias}) {
            p.push_back(*t);
        }
    }
    p.push_back(norm_gamma_);
    p.push_back(norm_beta_);
    for (const auto& h : heads_) {
        p.push_back(h.weight);
        p.push_back(h.bias);
    }
    return p;
}

std::vector<std::string> VisionTransformer::parameter_names() const {
    std::vector<std::string> names;
    for (std::size_t i = 0; i < stem_.size(); ++i) {
        names.push_back("stem." + std::to_string(i) + ".weight");
        names.push_back("stem." + std::to_string(i) + ".bias");
    }
    names.insert(names.end(), {"projection.weight", "projection.bias", "class_token", "pos_embed"});
    for (std::size_t l = 0; l < blocks_.size(); ++l) {
        const std::string p = "blocks." + std::to_string(l) + ".";
        for (const char* n : {"norm1.gamma", "norm1.beta", "qkv.weight", "qkv.bias", "proj.weight", "proj.bias",
                              "norm2.gamma", "norm2.beta", "fc1.weight", "fc1.bias", "fc2.weight", "fc2.bias"}) {
            names.push_back(p + n);
        }
    }
    names.insert(names.end(), {"norm.gamma", "norm.beta"});
    for (std::size_t h = 0; h < heads_.size(); ++h) {
        names.push_back("heads." + std::to_string(h) + ".weight");
        names.push_back("heads." + std::to_string(h) + ".bias");
    }
    return names;
}

std::size_t VisionTransformer::parameter_count() const {
    std::size_t n = 0;
    for (const auto& t : parameters()) n += t.numel();
    return n;
}

VisionTransformer VisionTransformer::clone(bool trainable) const {
    VisionTransformer copy;
    copy.config_ = config_;
    copy.init_prng_ = init_prng_;
    auto dup = [trainable](const Tensor& t) { return t.clone(trainable); };
    for (const auto& c : stem_) copy.stem_.push_back({dup(c.weight), dup(c.bias), c.stride, c.padding});
    copy.projection_ = {dup(projection_.weight), dup(projection_.bias), projection_.stride, projection_.padding};
    copy.class_token_ = dup(class_token_);
    copy.pos_embed_ = dup(pos_embed_);
    for (const auto& b : blocks_) {
        copy.blocks_.push_back({dup(b.norm1_gamma), dup(b.norm1_beta), dup(b.qkv_weight), dup(b.qkv_bias),
                                dup(b.proj_weight), dup(b.proj_bias), dup(b.norm2_gamma), dup(b.norm2_beta),
                                dup(b.fc1_weight), dup(b.fc1_bias), dup(b.fc2_weight), dup(b.fc2_bias)});
    }
    copy.norm_gamma_ = dup(norm_gamma_);
    copy.norm_beta_ = dup(norm_beta_);
    for (const auto& h : heads_) copy.heads_.push_back({dup(h.weight), dup(h.bias)});
    return copy;
}

void VisionTransformer::load_parameters(std::span<const Tensor> values) {
    auto params = parameters();
    if (values.size() != params.size()) throw DimensionError("load_parameters: parameter count mismatch");
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (values[i].shape() != params[i].shape()) throw DimensionError("load_parameters: shape mismatch");
        auto dst = params[i].mutable_data();
        std::copy(values[i].data().begin(), values[i].data().end(), dst.begin());
    }
}

std::uint64_t parameter_checksum(const std::vector<Tensor>& params) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto& t : params) {
        for (double v : t.data()) {
            unsigned char bytes[sizeof(double)];
            std::memcpy(bytes, &v, sizeof(double));
            for (unsigned char c : bytes) {
                h ^= c;
                h *= 0x100000001b3ULL;
            }
        }
    }
    return h;
}

// ---------------------------------------------------------------------------
// ModelSnapshot

ModelSnapshot::ModelSnapshot(const VisionTransformer& model, std::size_t task_index)
    : model_(std::make_shared<const VisionTransformer>(model.clone(false))),
      task_index_(task_index),
      counter_(std::make_shared<std::atomic<std::size_t>>(0)) {}

ForwardOutput ModelSnapshot::forward(const Tensor& batch, std::span<const std::size_t> heads,
                                     bool capture_trace) const {
    NoGradScope off;
    counter_->fetch_add(1);
    return model_->forward(batch.detach(), heads, capture_trace);
}

ModelSnapshot snapshot(const VisionTransformer& model, std::size_t task_index) {
    return ModelSnapshot(model, task_index);
}

ModelSnapshot snapshot(const ModelSnapshot& frozen) { return ModelSnapshot(frozen.model(), frozen.task_index()); }

}  // namespace padkit
