#pragma once

#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "semi/autodiff.hpp"
#include "semi/errors.hpp"
#include "semi/matrix.hpp"

namespace semi {

inline constexpr char kCheckpointMagic[4] = {'S', 'E', 'M', 'I'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

// Named-tensor container. Values are float32 on the wire; put() quantizes on
// entry so the in-memory view always equals what a save/load round trip
// produces.
struct Checkpoint {
    std::uint32_t version = kCheckpointVersion;
    std::string meta_json; // config hash, seeds, creation metadata
    std::map<std::string, DenseMatrix> tensors;

    void put(const std::string& name, const DenseMatrix& value) {
        tensors[name] = quantize_f32(value);
    }

    void put_all(const ParamMap& params, const std::string& prefix = "") {
        for (const auto& [name, value] : params) put(prefix + name, value);
    }

    const DenseMatrix& get(const std::string& name) const {
        auto it = tensors.find(name);
        if (it == tensors.end()) throw InputError("Checkpoint: missing tensor " + name);
        return it->second;
    }

    bool operator==(const Checkpoint& o) const {
        if (version != o.version || meta_json != o.meta_json || tensors.size() != o.tensors.size())
            return false;
        for (const auto& [name, value] : tensors) {
            auto it = o.tensors.find(name);
            if (it == o.tensors.end() || !value.same_shape(it->second)) return false;
            for (std::size_t i = 0; i < value.size(); ++i)
                if (value.data[i] != it->second.data[i]) return false;
        }
        return true;
    }
};

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline std::uint32_t take_u32(const std::string& in, std::size_t& pos) {
    if (pos + 4 > in.size()) throw InputError("Checkpoint: truncated file");
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i)
        v |= static_cast<std::uint32_t>(static_cast<unsigned char>(in[pos + i])) << (8 * i);
    pos += 4;
    return v;
}

inline void put_f32(std::string& out, float f) {
    std::uint32_t bits;
    static_assert(sizeof(bits) == sizeof(f));
    std::memcpy(&bits, &f, sizeof(bits));
    put_u32(out, bits);
}

inline float take_f32(const std::string& in, std::size_t& pos) {
    const std::uint32_t bits = take_u32(in, pos);
    float f;
    std::memcpy(&f, &bits, sizeof(f));
    return f;
}

} // namespace detail

inline std::string serialize_checkpoint(const Checkpoint& ckpt) {
    std::string out(kCheckpointMagic, 4);
    detail::put_u32(out, ckpt.version);
    detail::put_u32(out, static_cast<std::uint32_t>(ckpt.meta_json.size()));
    out += ckpt.meta_json;
    detail::put_u32(out, static_cast<std::uint32_t>(ckpt.tensors.size()));
    for (const auto& [name, t] : ckpt.tensors) {
        detail::put_u32(out, static_cast<std::uint32_t>(name.size()));
        out += name;
        detail::put_u32(out, static_cast<std::uint32_t>(t.rows));
        detail::put_u32(out, static_cast<std::uint32_t>(t.cols));
        for (double v : t.data) detail::put_f32(out, static_cast<float>(v));
    }
    return out;
}

inline Checkpoint deserialize_checkpoint(const std::string& bytes) {
    if (bytes.size() < 4 || std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0)
        throw ConfigError("Checkpoint: bad magic, not a checkpoint file");
    std::size_t pos = 4;
    Checkpoint ckpt;
    ckpt.version = detail::take_u32(bytes, pos);
    if (ckpt.version != kCheckpointVersion)
        throw ConfigError("Checkpoint: unsupported format version " + std::to_string(ckpt.version));
    const std::uint32_t meta_len = detail::take_u32(bytes, pos);
    if (pos + meta_len > bytes.size()) throw InputError("Checkpoint: truncated metadata");
    ckpt.meta_json = bytes.substr(pos, meta_len);
    pos += meta_len;
    const std::uint32_t count = detail::take_u32(bytes, pos);
    for (std::uint32_t i = 0; i < count; ++i) {
        const std::uint32_t name_len = detail::take_u32(bytes, pos);
        if (pos + name_len > bytes.size()) throw InputError("Checkpoint: truncated tensor name");
        std::string name = bytes.substr(pos, name_len);
        pos += name_len;
        const int rows = static_cast<int>(detail::take_u32(bytes, pos));
        const int cols = static_cast<int>(detail::take_u32(bytes, pos));
        DenseMatrix t(rows, cols);
        for (auto& v : t.data) v = static_cast<double>(detail::take_f32(bytes, pos));
        ckpt.tensors.emplace(std::move(name), std::move(t));
    }
    return ckpt;
}

// temp-file-then-rename so interrupted writers never leave a torn artifact
inline void write_file_atomic(const std::filesystem::path& path, const std::string& bytes) {
    std::filesystem::create_directories(path.parent_path().empty() ? "." : path.parent_path());
    const std::filesystem::path tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw InputError("write_file_atomic: cannot open " + tmp.string());
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!out) throw InputError("write_file_atomic: short write to " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

inline std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw InputError("read_file: cannot open " + path.string());
    return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
    write_file_atomic(path, serialize_checkpoint(ckpt));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
    return deserialize_checkpoint(read_file(path));
}

} // namespace semi
