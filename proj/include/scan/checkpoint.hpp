#pragma once

#include <cstdint>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>

#include "scan/model_zoo.hpp"
#include "scan/tensor.hpp"

namespace scan {

// Checkpoint file: magic, format version, architecture fingerprint, then the
// named parameter tensors in schedule order (batch-norm running statistics
// appended last) in the tensor dump format. Loading verifies the fingerprint
// and refuses mismatches.

inline constexpr char kCheckpointMagic[8] = {'S', 'C', 'A', 'N', 'C', 'K', 'P', '1'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

inline void put_string(std::ostream& os, const std::string& s) {
    put_u64le(os, s.size());
    os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string get_string(std::istream& is, std::uint64_t max_len = 4096) {
    const std::uint64_t n = get_u64le(is);
    if (n > max_len) throw FormatError("checkpoint: implausible name length");
    std::string s(n, '\0');
    is.read(s.data(), static_cast<std::streamsize>(n));
    if (!is) throw FormatError("checkpoint: truncated name");
    return s;
}

inline std::string hex64(std::uint64_t v) {
    std::ostringstream os;
    os << "0x" << std::hex << std::setfill('0') << std::setw(16) << v;
    return os.str();
}

}  // namespace detail

template <typename T>
void save_checkpoint_stream(std::ostream& os, Network<T>& net) {
    os.write(kCheckpointMagic, 8);
    detail::put_u64le(os, kCheckpointVersion);
    detail::put_u64le(os, net.fingerprint());
    auto params = net.params();
    auto buffers = net.state_buffers();
    detail::put_u64le(os, params.size() + buffers.size());
    for (const auto* p : params) {
        detail::put_string(os, p->name);
        dump_tensor(os, p->value);
    }
    for (const auto& [name, buf] : buffers) {
        detail::put_string(os, name);
        dump_tensor(os, TensorT<T>({static_cast<std::int64_t>(buf->size())}, *buf));
    }
}

template <typename T>
void load_checkpoint_stream(std::istream& is, Network<T>& net) {
    char magic[8];
    is.read(magic, 8);
    if (!is || std::memcmp(magic, kCheckpointMagic, 8) != 0)
        throw FormatError("checkpoint: bad magic");
    const std::uint64_t version = detail::get_u64le(is);
    if (version != kCheckpointVersion)
        throw FormatError("checkpoint: unsupported version " + std::to_string(version));
    const std::uint64_t fp = detail::get_u64le(is);
    if (fp != net.fingerprint())
        throw FormatError("checkpoint: architecture fingerprint mismatch, file " +
                          detail::hex64(fp) + " vs network " +
                          detail::hex64(net.fingerprint()));
    auto params = net.params();
    auto buffers = net.state_buffers();
    const std::uint64_t count = detail::get_u64le(is);
    if (count != params.size() + buffers.size())
        throw FormatError("checkpoint: tensor count " + std::to_string(count) +
                          " does not match network");
    for (auto* p : params) {
        const std::string name = detail::get_string(is);
        if (name != p->name)
            throw FormatError("checkpoint: expected tensor '" + p->name + "', found '" +
                              name + "'");
        TensorT<T> t = load_tensor<T>(is);
        require_shape(t.shape, p->value.shape, ("checkpoint tensor " + name).c_str());
        p->value.values = std::move(t.values);
    }
    for (auto& [name, buf] : buffers) {
        const std::string got = detail::get_string(is);
        if (got != name)
            throw FormatError("checkpoint: expected buffer '" + name + "', found '" + got +
                              "'");
        TensorT<T> t = load_tensor<T>(is);
        if (t.values.size() != buf->size())
            throw FormatError("checkpoint: buffer '" + name + "' size mismatch");
        *buf = std::move(t.values);
    }
}

template <typename T>
void save_checkpoint(const std::string& path, Network<T>& net) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw FormatError("checkpoint: cannot open '" + path + "' for writing");
    save_checkpoint_stream(os, net);
    if (!os) throw FormatError("checkpoint: write to '" + path + "' failed");
}

template <typename T>
void load_checkpoint(const std::string& path, Network<T>& net) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw FormatError("checkpoint: cannot open '" + path + "'");
    load_checkpoint_stream(is, net);
}

}  // namespace scan
