#include "padkit/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>

namespace padkit {

RecordLayout RecordLayout::cifar100() { return {}; }

RecordLayout RecordLayout::imagenet32() {
    RecordLayout l;
    l.num_classes = 300;
    l.fine_label_bytes = 2;
    return l;
}

std::vector<LabeledImage> parse_records(std::span<const std::uint8_t> bytes, const RecordLayout& layout) {
    const std::size_t rec = layout.record_bytes();
    if (bytes.size() % rec != 0)
        throw DataError("dataset length " + std::to_string(bytes.size()) + " is not a multiple of the " +
                        std::to_string(rec) + "-byte record");
    const std::size_t plane = layout.image_size * layout.image_size;
    std::vector<LabeledImage> out;
    out.reserve(bytes.size() / rec);
    for (std::size_t off = 0; off < bytes.size(); off += rec) {
        LabeledImage img;
        img.channels = layout.channels;
        img.height = img.width = layout.image_size;
        img.coarse = bytes[off];
        std::size_t fine = 0;
        for (std::size_t b = 0; b < layout.fine_label_bytes; ++b) fine |= std::size_t{bytes[off + 1 + b]} << (8 * b);
        if (fine >= layout.num_classes)
            throw DataError("record " + std::to_string(off / rec) + " has label " + std::to_string(fine) +
                            " outside [0, " + std::to_string(layout.num_classes) + ")");
        img.fine = fine;
        const std::uint8_t* px = bytes.data() + off + 1 + layout.fine_label_bytes;
        img.pixels.resize(layout.channels * plane);
        for (std::size_t i = 0; i < img.pixels.size(); ++i) img.pixels[i] = px[i] / 255.0;
        out.push_back(std::move(img));
    }
    return out;
}

std::vector<std::uint8_t> encode_records(std::span<const LabeledImage> images, const RecordLayout& layout) {
    const std::size_t n = layout.channels * layout.image_size * layout.image_size;
    std::vector<std::uint8_t> out;
    out.reserve(images.size() * layout.record_bytes());
    for (const auto& img : images) {
        if (img.pixels.size() != n || img.channels != layout.channels || img.height != layout.image_size)
            throw DataError("image does not match the record layout");
        if (img.fine >= layout.num_classes) throw DataError("label outside the layout's class count");
        out.push_back(static_cast<std::uint8_t>(img.coarse.value_or(0)));
        for (std::size_t b = 0; b < layout.fine_label_bytes; ++b)
            out.push_back(static_cast<std::uint8_t>((img.fine >> (8 * b)) & 0xff));
        for (double v : img.pixels)
            out.push_back(static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)));
    }
    return out;
}

std::vector<LabeledImage> load_records(const std::filesystem::path& path, const RecordLayout& layout) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open dataset file " + path.string());
    const std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return parse_records(bytes, layout);
}

void write_records(const std::filesystem::path& path, std::span<const LabeledImage> images,
                   const RecordLayout& layout) {
    const auto bytes = encode_records(images, layout);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write dataset file " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw DataError("write failed for " + path.string());
}

std::vector<LabeledImage> load_cifar100_binary(const std::filesystem::path& path) {
    return load_records(path, RecordLayout::cifar100());
}

void SyntheticSpec::validate() const {
    if (num_classes == 0 || samples_per_class == 0 || image_size == 0 || channels == 0)
        throw std::invalid_argument("synthetic spec sizes must be positive");
    if (!(signal >= 0.0) || !(noise >= 0.0)) throw std::invalid_argument("signal and noise must be nonnegative");
}

SplitData generate_synthetic(const SyntheticSpec& spec) {
    spec.validate();
    constexpr std::size_t kCells = 4;
    const std::size_t s = spec.image_size;
    const std::size_t plane = s * s;
    const Prng root(spec.seed);
    const std::size_t n_train = spec.samples_per_class * 4 / 5;
    SplitData out;
    for (std::size_t k = 0; k < spec.num_classes; ++k) {
        Prng tp = root.split(2 * k);
        std::vector<double> cells(spec.channels * kCells * kCells);
        for (auto& c : cells) c = tp.uniform() - 0.5;
        Prng np = root.split(2 * k + 1);
        for (std::size_t i = 0; i < spec.samples_per_class; ++i) {
            LabeledImage img;
            img.channels = spec.channels;
            img.height = img.width = s;
            img.fine = k;
            img.pixels.resize(spec.channels * plane);
            for (std::size_t c = 0; c < spec.channels; ++c)
                for (std::size_t y = 0; y < s; ++y)
                    for (std::size_t x = 0; x < s; ++x) {
                        const double t = cells[(c * kCells + y * kCells / s) * kCells + x * kCells / s];
                        const double v = 0.5 + spec.signal * t + spec.noise * np.normal();
                        img.pixels[c * plane + y * s + x] = std::round(std::clamp(v, 0.0, 1.0) * 255.0) / 255.0;
                    }
            (i < n_train ? out.train : out.test).push_back(std::move(img));
        }
    }
    return out;
}

Normalizer Normalizer::fit(std::span<const LabeledImage> images) {
    if (images.empty()) throw DataError("cannot fit normalization on an empty split");
    const std::size_t ch = images[0].channels;
    Normalizer n;
    n.mean.assign(ch, 0.0);
    n.stddev.assign(ch, 0.0);
    std::vector<double> count(ch, 0.0);
    for (const auto& img : images) {
        const std::size_t plane = img.height * img.width;
        for (std::size_t c = 0; c < ch; ++c)
            for (std::size_t i = 0; i < plane; ++i) n.mean[c] += img.pixels[c * plane + i];
        for (std::size_t c = 0; c < ch; ++c) count[c] += static_cast<double>(plane);
    }
    for (std::size_t c = 0; c < ch; ++c) n.mean[c] /= count[c];
    for (const auto& img : images) {
        const std::size_t plane = img.height * img.width;
        for (std::size_t c = 0; c < ch; ++c)
            for (std::size_t i = 0; i < plane; ++i) {
                const double d = img.pixels[c * plane + i] - n.mean[c];
                n.stddev[c] += d * d;
            }
    }
    for (std::size_t c = 0; c < ch; ++c) {
        n.stddev[c] = std::sqrt(n.stddev[c] / count[c]);
        if (n.stddev[c] == 0.0) n.stddev[c] = 1.0;
    }
    return n;
}

Normalizer Normalizer::identity(std::size_t channels) {
    return {std::vector<double>(channels, 0.0), std::vector<double>(channels, 1.0)};
}

void Normalizer::apply(LabeledImage& img) const {
    if (mean.size() != img.channels) throw DimensionError("normalizer channel count mismatch");
    const std::size_t plane = img.height * img.width;
    for (std::size_t c = 0; c < img.channels; ++c)
        for (std::size_t i = 0; i < plane; ++i) {
            double& v = img.pixels[c * plane + i];
            v = (v - mean[c]) / stddev[c];
        }
}

CropDraw draw_crop(Prng& prng) {
    CropDraw d;
    d.dy = prng.below(2 * kAugmentPadding + 1);
    d.dx = prng.below(2 * kAugmentPadding + 1);
    d.flip = prng.bernoulli(0.5);
    return d;
}

LabeledImage augment_with(const LabeledImage& img, const CropDraw& draw, const Normalizer& norm) {
    if (img.height != img.width) throw DimensionError("augmentation expects square images");
    if (draw.dy > 2 * kAugmentPadding || draw.dx > 2 * kAugmentPadding)
        throw std::invalid_argument("crop offset outside the padded image");
    const std::size_t s = img.height;
    const std::size_t plane = s * s;
    LabeledImage out = img;
    for (std::size_t c = 0; c < img.channels; ++c)
        for (std::size_t y = 0; y < s; ++y)
            for (std::size_t x = 0; x < s; ++x) {
                // Position in the padded frame, shifted back to source coordinates.
                const std::size_t sx = draw.flip ? s - 1 - x : x;
                const long py = static_cast<long>(y + draw.dy) - static_cast<long>(kAugmentPadding);
                const long px = static_cast<long>(sx + draw.dx) - static_cast<long>(kAugmentPadding);
                const bool inside = py >= 0 && px >= 0 && py < static_cast<long>(s) && px < static_cast<long>(s);
                out.pixels[c * plane + y * s + x] = inside ? img.pixels[c * plane + py * s + px] : 0.0;
            }
    norm.apply(out);
    return out;
}

LabeledImage augment_train(const LabeledImage& img, Prng& prng, const Normalizer& norm) {
    return augment_with(img, draw_crop(prng), norm);
}

LabeledImage augment_test(const LabeledImage& img, const Normalizer& norm) { return augment_with(img, {}, norm); }

Tensor image_tensor(const LabeledImage& img) {
    return Tensor({img.channels, img.height, img.width}, img.pixels);
}

Tensor stack_images(std::span<const LabeledImage> images) {
    if (images.empty()) throw DimensionError("cannot stack an empty image list");
    const auto& f = images[0];
    std::vector<double> v;
    v.reserve(images.size() * f.pixels.size());
    for (const auto& img : images) {
        if (img.channels != f.channels || img.height != f.height || img.width != f.width)
            throw DimensionError("images in a batch must share a shape");
        v.insert(v.end(), img.pixels.begin(), img.pixels.end());
    }
    return Tensor({images.size(), f.channels, f.height, f.width}, std::move(v));
}

}  // namespace padkit
