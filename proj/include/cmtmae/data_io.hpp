#pragma once

// Binary dataset, label and checkpoint formats. All integers little-endian.
//
// dataset  'CMTD' | u32 version=1 | u64 count | u32 C | u32 H | u32 W
//          | u8 pixels[count*C*H*W]  (image-major, then channel, row, col)
// labels   'CMTL' | u32 version=1 | u64 count | u16 labels[count]
// ckpt     'CMTC' | u32 version=1 | u64 config_hash | u64 step | u32 stage
//          | u32 flags (bit0: momentum present) | u64 epoch | u64 opt_steps
//          | u64 master_seed | u64 init_rng[4] | u64 config_len | config text
//          | u64 tensor_count | tensors (u32 name_len | name | u32 ndim
//          | i64 dims[] | f64 values[]) sorted by name | 'CMTE'
//
// Checkpoints are written to a temp file and renamed into place, so a crash
// mid-write never leaves a half-written file under the target name.

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <string>
#include <vector>

#include "cmtmae/errors.hpp"
#include "cmtmae/tensor.hpp"

namespace cmtmae {

namespace io_detail {

struct Writer {
    std::string buf;

    void u8(uint8_t v) { buf.push_back(static_cast<char>(v)); }
    void u16(uint16_t v) {
        for (int i = 0; i < 2; ++i) u8(static_cast<uint8_t>(v >> (8 * i)));
    }
    void u32(uint32_t v) {
        for (int i = 0; i < 4; ++i) u8(static_cast<uint8_t>(v >> (8 * i)));
    }
    void u64(uint64_t v) {
        for (int i = 0; i < 8; ++i) u8(static_cast<uint8_t>(v >> (8 * i)));
    }
    void i64(int64_t v) { u64(static_cast<uint64_t>(v)); }
    void f64(double v) { u64(std::bit_cast<uint64_t>(v)); }
    void bytes(const void* p, size_t n) { buf.append(static_cast<const char*>(p), n); }
    void str(const std::string& s) { buf.append(s); }
};

struct Reader {
    const uint8_t* p;
    size_t n;
    size_t pos = 0;
    std::string context;

    Reader(const std::string& data, std::string ctx)
        : p(reinterpret_cast<const uint8_t*>(data.data())), n(data.size()), context(std::move(ctx)) {}

    void need(size_t k) {
        if (pos + k > n) throw DataError(context + ": truncated (need " + std::to_string(k) +
                                         " bytes at offset " + std::to_string(pos) + ")");
    }
    uint8_t u8() {
        need(1);
        return p[pos++];
    }
    uint16_t u16() {
        uint16_t v = 0;
        for (int i = 0; i < 2; ++i) v |= static_cast<uint16_t>(u8()) << (8 * i);
        return v;
    }
    uint32_t u32() {
        uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(u8()) << (8 * i);
        return v;
    }
    uint64_t u64() {
        uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(u8()) << (8 * i);
        return v;
    }
    int64_t i64() { return static_cast<int64_t>(u64()); }
    double f64() { return std::bit_cast<double>(u64()); }
    std::string str(size_t k) {
        need(k);
        std::string s(reinterpret_cast<const char*>(p + pos), k);
        pos += k;
        return s;
    }
};

inline std::string read_file(const std::string& path) {
    std::FILE* f = std::fopen(path.c_str(), "rb");
    if (!f) throw DataError("cannot open '" + path + "' for reading");
    std::string data;
    char chunk[1 << 16];
    size_t got;
    while ((got = std::fread(chunk, 1, sizeof chunk, f)) > 0) data.append(chunk, got);
    const bool err = std::ferror(f) != 0;
    std::fclose(f);
    if (err) throw DataError("read error on '" + path + "'");
    return data;
}

inline void write_file_atomic(const std::string& path, const std::string& data) {
    const std::string tmp = path + ".tmp";
    std::FILE* f = std::fopen(tmp.c_str(), "wb");
    if (!f) throw DataError("cannot open '" + tmp + "' for writing");
    const bool ok = std::fwrite(data.data(), 1, data.size(), f) == data.size() &&
                    std::fflush(f) == 0;
    std::fclose(f);
    if (!ok) {
        std::remove(tmp.c_str());
        throw DataError("write error on '" + tmp + "'");
    }
    if (std::rename(tmp.c_str(), path.c_str()) != 0) {
        std::remove(tmp.c_str());
        throw DataError("cannot rename '" + tmp + "' to '" + path + "'");
    }
}

}  // namespace io_detail

// FNV-1a, used for config hashing and parameter fingerprints.
inline uint64_t fnv1a64(const void* data, size_t n, uint64_t h = 0xcbf29ce484222325ull) {
    const uint8_t* p = static_cast<const uint8_t*>(data);
    for (size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

inline uint64_t fnv1a64(const std::string& s) { return fnv1a64(s.data(), s.size()); }

// ---- datasets ----

struct ImageDataset {
    uint32_t channels = 0, height = 0, width = 0;
    std::vector<uint8_t> pixels;  // count * C * H * W
    // Per-channel statistics over the whole dataset in [0,1] units, filled by
    // finalize(). Standardization uses max(std, 1e-8).
    std::vector<double> channel_mean, channel_std;

    uint64_t count() const {
        const size_t per = static_cast<size_t>(channels) * height * width;
        return per == 0 ? 0 : pixels.size() / per;
    }

    size_t image_bytes() const { return static_cast<size_t>(channels) * height * width; }

    void finalize() {
        channel_mean.assign(channels, 0.0);
        channel_std.assign(channels, 1.0);
        const uint64_t n = count();
        if (n == 0) return;
        const size_t plane = static_cast<size_t>(height) * width;
        std::vector<double> sum(channels, 0.0), sumsq(channels, 0.0);
        for (uint64_t i = 0; i < n; ++i) {
            const uint8_t* img = pixels.data() + i * image_bytes();
            for (uint32_t c = 0; c < channels; ++c) {
                const uint8_t* pc = img + c * plane;
                for (size_t k = 0; k < plane; ++k) {
                    const double v = pc[k] / 255.0;
                    sum[c] += v;
                    sumsq[c] += v * v;
                }
            }
        }
        const double total = static_cast<double>(n) * plane;
        for (uint32_t c = 0; c < channels; ++c) {
            channel_mean[c] = sum[c] / total;
            const double var = sumsq[c] / total - channel_mean[c] * channel_mean[c];
            channel_std[c] = std::sqrt(std::max(var, 0.0));
            if (channel_std[c] < 1e-8) channel_std[c] = 1.0;
        }
    }

    // CHW doubles in [0,1].
    std::vector<double> image_raw(uint64_t i, bool hflip = false) const {
        if (i >= count()) throw DataError("image index " + std::to_string(i) + " out of range");
        const uint8_t* img = pixels.data() + i * image_bytes();
        std::vector<double> out(image_bytes());
        const size_t plane = static_cast<size_t>(height) * width;
        for (uint32_t c = 0; c < channels; ++c)
            for (uint32_t y = 0; y < height; ++y)
                for (uint32_t x = 0; x < width; ++x) {
                    const uint32_t sx = hflip ? width - 1 - x : x;
                    out[c * plane + y * width + x] = img[c * plane + y * width + sx] / 255.0;
                }
        return out;
    }

    // CHW doubles standardized with the dataset's per-channel statistics.
    std::vector<double> image_standardized(uint64_t i, bool hflip = false) const {
        if (channel_mean.size() != channels)
            throw ContractError("image_standardized before finalize()");
        std::vector<double> out = image_raw(i, hflip);
        const size_t plane = static_cast<size_t>(height) * width;
        for (uint32_t c = 0; c < channels; ++c)
            for (size_t k = 0; k < plane; ++k)
                out[c * plane + k] = (out[c * plane + k] - channel_mean[c]) / channel_std[c];
        return out;
    }
};

inline void save_dataset(const std::string& path, const ImageDataset& ds) {
    io_detail::Writer w;
    w.str("CMTD");
    w.u32(1);
    w.u64(ds.count());
    w.u32(ds.channels);
    w.u32(ds.height);
    w.u32(ds.width);
    w.bytes(ds.pixels.data(), ds.pixels.size());
    io_detail::write_file_atomic(path, w.buf);
}

inline ImageDataset load_dataset(const std::string& path) {
    const std::string data = io_detail::read_file(path);
    io_detail::Reader r(data, "dataset '" + path + "'");
    if (r.str(4) != "CMTD") throw DataError("'" + path + "' is not a CMTD dataset (bad magic)");
    const uint32_t version = r.u32();
    if (version != 1)
        throw DataError("'" + path + "': unsupported dataset version " + std::to_string(version));
    ImageDataset ds;
    const uint64_t count = r.u64();
    ds.channels = r.u32();
    ds.height = r.u32();
    ds.width = r.u32();
    if (ds.channels == 0 || ds.height == 0 || ds.width == 0)
        throw DataError("'" + path + "': zero dimension in header");
    const uint64_t want = count * ds.image_bytes();
    r.need(want);
    ds.pixels.assign(r.p + r.pos, r.p + r.pos + want);
    r.pos += want;
    if (r.pos != r.n) throw DataError("'" + path + "': trailing bytes after pixel data");
    ds.finalize();
    return ds;
}

inline void save_labels(const std::string& path, const std::vector<uint16_t>& labels) {
    io_detail::Writer w;
    w.str("CMTL");
    w.u32(1);
    w.u64(labels.size());
    for (uint16_t v : labels) w.u16(v);
    io_detail::write_file_atomic(path, w.buf);
}

inline std::vector<uint16_t> load_labels(const std::string& path) {
    const std::string data = io_detail::read_file(path);
    io_detail::Reader r(data, "labels '" + path + "'");
    if (r.str(4) != "CMTL") throw DataError("'" + path + "' is not a CMTL label file (bad magic)");
    const uint32_t version = r.u32();
    if (version != 1)
        throw DataError("'" + path + "': unsupported label version " + std::to_string(version));
    const uint64_t count = r.u64();
    std::vector<uint16_t> labels(count);
    for (uint64_t i = 0; i < count; ++i) labels[i] = r.u16();
    if (r.pos != r.n) throw DataError("'" + path + "': trailing bytes after labels");
    return labels;
}

// ---- checkpoints ----

struct NamedTensorEntry {
    std::string name;
    Shape shape;
    std::vector<double> values;
};

struct Checkpoint {
    uint64_t config_hash = 0;
    std::string config_text;
    uint64_t step = 0;
    uint32_t stage = 1;
    bool has_momentum = false;
    uint64_t epoch = 0;
    uint64_t opt_steps = 0;
    uint64_t master_seed = 0;
    std::array<uint64_t, 4> init_rng_state{};
    std::vector<NamedTensorEntry> tensors;

    const NamedTensorEntry* find(const std::string& name) const {
        for (const auto& t : tensors)
            if (t.name == name) return &t;
        return nullptr;
    }
};

inline void save_checkpoint(const std::string& path, Checkpoint ckpt) {
    std::sort(ckpt.tensors.begin(), ckpt.tensors.end(),
              [](const NamedTensorEntry& a, const NamedTensorEntry& b) { return a.name < b.name; });
    for (size_t i = 1; i < ckpt.tensors.size(); ++i)
        if (ckpt.tensors[i].name == ckpt.tensors[i - 1].name)
            throw ContractError("checkpoint: duplicate tensor '" + ckpt.tensors[i].name + "'");

    io_detail::Writer w;
    w.str("CMTC");
    w.u32(1);
    w.u64(ckpt.config_hash);
    w.u64(ckpt.step);
    w.u32(ckpt.stage);
    w.u32(ckpt.has_momentum ? 1u : 0u);
    w.u64(ckpt.epoch);
    w.u64(ckpt.opt_steps);
    w.u64(ckpt.master_seed);
    for (uint64_t v : ckpt.init_rng_state) w.u64(v);
    w.u64(ckpt.config_text.size());
    w.str(ckpt.config_text);
    w.u64(ckpt.tensors.size());
    for (const auto& t : ckpt.tensors) {
        if (static_cast<int64_t>(t.values.size()) != shape_numel(t.shape))
            throw ContractError("checkpoint: tensor '" + t.name + "' values do not match shape");
        w.u32(static_cast<uint32_t>(t.name.size()));
        w.str(t.name);
        w.u32(static_cast<uint32_t>(t.shape.size()));
        for (int d : t.shape) w.i64(d);
        for (double v : t.values) w.f64(v);
    }
    w.str("CMTE");
    io_detail::write_file_atomic(path, w.buf);
}

inline Checkpoint load_checkpoint(const std::string& path) {
    const std::string data = io_detail::read_file(path);
    io_detail::Reader r(data, "checkpoint '" + path + "'");
    if (r.str(4) != "CMTC") throw DataError("'" + path + "' is not a CMTC checkpoint (bad magic)");
    const uint32_t version = r.u32();
    if (version != 1)
        throw DataError("'" + path + "': unsupported checkpoint version " + std::to_string(version));
    Checkpoint c;
    c.config_hash = r.u64();
    c.step = r.u64();
    c.stage = r.u32();
    const uint32_t flags = r.u32();
    c.has_momentum = (flags & 1u) != 0;
    c.epoch = r.u64();
    c.opt_steps = r.u64();
    c.master_seed = r.u64();
    for (auto& v : c.init_rng_state) v = r.u64();
    const uint64_t config_len = r.u64();
    c.config_text = r.str(config_len);
    const uint64_t tensor_count = r.u64();
    c.tensors.reserve(tensor_count);
    for (uint64_t i = 0; i < tensor_count; ++i) {
        NamedTensorEntry t;
        t.name = r.str(r.u32());
        const uint32_t ndim = r.u32();
        if (ndim > 8) throw DataError("'" + path + "': implausible rank for '" + t.name + "'");
        t.shape.resize(ndim);
        int64_t numel = 1;
        for (uint32_t d = 0; d < ndim; ++d) {
            const int64_t dim = r.i64();
            if (dim <= 0 || dim > (1 << 24))
                throw DataError("'" + path + "': bad dimension for '" + t.name + "'");
            t.shape[d] = static_cast<int>(dim);
            numel *= dim;
        }
        t.values.resize(static_cast<size_t>(numel));
        for (auto& v : t.values) v = r.f64();
        c.tensors.push_back(std::move(t));
    }
    if (r.str(4) != "CMTE") throw DataError("'" + path + "': missing end marker");
    if (r.pos != r.n) throw DataError("'" + path + "': trailing bytes after end marker");
    return c;
}

// Fingerprint of a parameter set, for frozen-weights assertions.
template <typename Params>
uint64_t params_fingerprint(const Params& p) {
    uint64_t h = 0xcbf29ce484222325ull;
    for_each_param(const_cast<Params&>(p), "", [&](const std::string& name, Tensor& t) {
        h = fnv1a64(name.data(), name.size(), h);
        h = fnv1a64(t.values().data(), t.values().size() * sizeof(double), h);
    });
    return h;
}

}  // namespace cmtmae
