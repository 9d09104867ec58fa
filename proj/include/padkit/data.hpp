#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "padkit/prng.hpp"
#include "padkit/tensor.hpp"

namespace padkit {

/// Malformed or missing dataset input.
class DataError : public std::runtime_error {
   public:
    using std::runtime_error::runtime_error;
};

struct LabeledImage {
    std::size_t channels = 0, height = 0, width = 0;
    /// C x H x W, row-major per channel plane.
    std::vector<double> pixels;
    std::size_t fine = 0;
    std::optional<std::size_t> coarse;
};

/// Fixed-size binary record layout: one coarse-label byte, the fine label
/// (`fine_label_bytes` little-endian), then channel planes of uint8 pixels.
struct RecordLayout {
    std::size_t channels = 3;
    std::size_t image_size = 32;
    std::size_t num_classes = 100;
    std::size_t fine_label_bytes = 1;

    /// 1 + 1 + 3072 bytes per record, 100 fine classes.
    static RecordLayout cifar100();
    /// CIFAR layout with 300 classes; the fine label needs two bytes.
    static RecordLayout imagenet32();

    std::size_t record_bytes() const { return 1 + fine_label_bytes + channels * image_size * image_size; }
};

std::vector<LabeledImage> parse_records(std::span<const std::uint8_t> bytes, const RecordLayout& layout);
/// Pixels are rounded to the nearest 1/255 step; a missing coarse label is written as 0.
std::vector<std::uint8_t> encode_records(std::span<const LabeledImage> images, const RecordLayout& layout);

std::vector<LabeledImage> load_records(const std::filesystem::path& path, const RecordLayout& layout);
void write_records(const std::filesystem::path& path, std::span<const LabeledImage> images,
                   const RecordLayout& layout);

std::vector<LabeledImage> load_cifar100_binary(const std::filesystem::path& path);

struct SyntheticSpec {
    std::size_t num_classes = 10;
    std::size_t samples_per_class = 50;
    std::size_t image_size = 32;
    std::size_t channels = 3;
    std::uint64_t seed = 0;
    /// Template contrast; 0 makes every class pure noise.
    double signal = 1.0;
    /// Standard deviation of the per-pixel Gaussian noise.
    double noise = 0.15;

    void validate() const;
};

struct SplitData {
    std::vector<LabeledImage> train;
    std::vector<LabeledImage> test;
};

/// Each class gets a seeded low-resolution template upsampled to the image
/// size; samples add Gaussian noise and are quantized to 1/255 steps. The
/// first 80% of each class's samples go to train.
SplitData generate_synthetic(const SyntheticSpec& spec);

/// Per-channel affine normalization (x - mean) / std.
struct Normalizer {
    std::vector<double> mean;
    std::vector<double> stddev;

    /// Population statistics over every pixel of `images`.
    static Normalizer fit(std::span<const LabeledImage> images);
    static Normalizer identity(std::size_t channels);
    void apply(LabeledImage& img) const;
};

inline constexpr std::size_t kAugmentPadding = 4;

struct CropDraw {
    std::size_t dy = kAugmentPadding;
    std::size_t dx = kAugmentPadding;
    bool flip = false;
};

/// Crop offsets into the zero-padded image, then the flip bit.
CropDraw draw_crop(Prng& prng);
/// Zero-pad by 4, crop at `draw`, optionally mirror horizontally, normalize.
LabeledImage augment_with(const LabeledImage& img, const CropDraw& draw, const Normalizer& norm);
LabeledImage augment_train(const LabeledImage& img, Prng& prng, const Normalizer& norm);
/// Center crop of the padded image (pixel identity), then normalize.
LabeledImage augment_test(const LabeledImage& img, const Normalizer& norm);

/// Stacks images into a [B, C, H, W] tensor.
Tensor stack_images(std::span<const LabeledImage> images);
/// One image as [C, H, W].
Tensor image_tensor(const LabeledImage& img);

}  // namespace padkit
