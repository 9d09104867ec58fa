#include "padkit/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

namespace padkit {

namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

class Writer {
   public:
    template <typename T>
    void put(T value) {
        unsigned char raw[sizeof(T)];
        std::memcpy(raw, &value, sizeof(T));
        bytes.insert(bytes.end(), raw, raw + sizeof(T));
    }
    void u32(std::size_t v) {
        if (v > 0xFFFFFFFFu) throw CheckpointError("value does not fit the u32 field");
        put(static_cast<std::uint32_t>(v));
    }
    std::vector<std::uint8_t> bytes;
};

class Reader {
   public:
    explicit Reader(const std::vector<std::uint8_t>& b) : bytes_(b) {}
    template <typename T>
    T get() {
        if (pos_ + sizeof(T) > bytes_.size()) throw CheckpointError("checkpoint truncated");
        T value;
        std::memcpy(&value, bytes_.data() + pos_, sizeof(T));
        pos_ += sizeof(T);
        return value;
    }
    std::size_t u32() { return get<std::uint32_t>(); }
    bool done() const { return pos_ == bytes_.size(); }

   private:
    const std::vector<std::uint8_t>& bytes_;
    std::size_t pos_ = 0;
};

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const VisionTransformer& model) {
    Writer w;
    w.bytes.insert(w.bytes.end(), std::begin(kCheckpointMagic), std::end(kCheckpointMagic));
    w.put(kCheckpointVersion);
    const ViTConfig& c = model.config();
    w.u32(c.image_size);
    w.u32(c.in_channels);
    w.u32(c.stem.size());
    for (const auto& s : c.stem) {
        w.u32(s.out_channels);
        w.u32(s.kernel);
        w.u32(s.stride);
    }
    w.u32(c.num_layers);
    w.u32(c.num_heads);
    w.u32(c.embed_dim);
    w.put(c.mlp_ratio);
    w.put(c.dropout);
    w.u32(c.num_tasks);
    w.put(model.init_state());
    w.u32(model.head_count());
    for (std::size_t h = 0; h < model.head_count(); ++h) w.u32(model.head_classes(h));
    const auto params = model.parameters();
    w.put(static_cast<std::uint64_t>(model.parameter_count()));
    for (const auto& p : params) {
        for (double v : p.data()) w.put(v);
    }
    return w.bytes;
}

VisionTransformer decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
    if (bytes.size() < sizeof(kCheckpointMagic) ||
        std::memcmp(bytes.data(), kCheckpointMagic, sizeof(kCheckpointMagic)) != 0) {
        throw CheckpointError("not a padkit checkpoint (bad magic)");
    }
    Reader r(bytes);
    for (std::size_t i = 0; i < sizeof(kCheckpointMagic); ++i) (void)r.get<std::uint8_t>();
    const auto version = r.get<std::uint32_t>();
    if (version != kCheckpointVersion) throw CheckpointError("unsupported checkpoint version");
    ViTConfig c;
    c.image_size = r.u32();
    c.in_channels = r.u32();
    c.stem.resize(r.u32());
    for (auto& s : c.stem) {
        s.out_channels = r.u32();
        s.kernel = r.u32();
        s.stride = r.u32();
    }
    c.num_layers = r.u32();
    c.num_heads = r.u32();
    c.embed_dim = r.u32();
    c.mlp_ratio = r.get<double>();
    c.dropout = r.get<double>();
    c.num_tasks = r.u32();
    const auto init_state = r.get<std::uint64_t>();
    VisionTransformer model(c, 0);
    const std::size_t heads = r.u32();
    for (std::size_t h = 0; h < heads; ++h) model.add_head(r.u32());
    model.set_init_state(init_state);
    const auto count = r.get<std::uint64_t>();
    if (count != model.parameter_count()) throw CheckpointError("parameter count does not match the config");
    std::vector<Tensor> values;
    for (const auto& p : model.parameters()) {
        std::vector<double> data(p.numel());
        for (auto& v : data) v = r.get<double>();
        values.emplace_back(p.shape(), std::move(data));
    }
    if (!r.done()) throw CheckpointError("trailing bytes after parameters");
    model.load_parameters(values);
    return model;
}

void save_checkpoint(const VisionTransformer& model, const std::filesystem::path& path) {
    const auto bytes = encode_checkpoint(model);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError("cannot open " + path.string() + " for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw CheckpointError("write failed for " + path.string());
}

VisionTransformer load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw CheckpointError("cannot open " + path.string());
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return decode_checkpoint(bytes);
}

}  // namespace padkit
