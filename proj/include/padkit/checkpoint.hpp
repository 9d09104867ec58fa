#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "padkit/vit.hpp"

namespace padkit {

// Binary checkpoint layout, all integers and floats little-endian:
//
//   magic            8 bytes  "PADKITCK"
//   version          u32      1
//   image_size       u32
//   in_channels      u32
//   stem_count       u32
//   stem layers      stem_count x (u32 out_channels, u32 kernel, u32 stride)
//   num_layers       u32
//   num_heads        u32
//   embed_dim        u32
//   mlp_ratio        f64
//   dropout          f64
//   num_tasks        u32
//   init_state       u64      head-initialization generator state
//   head_count       u32
//   head classes     head_count x u32
//   scalar_count     u64
//   parameters       scalar_count x f64, declaration order

inline constexpr char kCheckpointMagic[8] = {'P', 'A', 'D', 'K', 'I', 'T', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
   public:
    using std::runtime_error::runtime_error;
};

std::vector<std::uint8_t> encode_checkpoint(const VisionTransformer& model);
VisionTransformer decode_checkpoint(const std::vector<std::uint8_t>& bytes);

void save_checkpoint(const VisionTransformer& model, const std::filesystem::path& path);
VisionTransformer load_checkpoint(const std::filesystem::path& path);

}  // namespace padkit
