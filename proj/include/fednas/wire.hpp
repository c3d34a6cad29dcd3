#pragma once

#include <array>
#include <cstdint>
#include <cstring>
#include <string>
#include <variant>
#include <vector>

#include "fednas/param_store.hpp"
#include "fednas/search_space.hpp"
#include "fednas/tensor.hpp"

namespace fednas {

// Binary protocol: frames carry little-endian payloads, doubles as raw
// 8-byte IEEE-754, so a round-trip preserves every parameter bit.

struct WireError : std::runtime_error {
    explicit WireError(const std::string& what) : std::runtime_error(what) {}
};
struct BadMagicError : WireError {
    BadMagicError() : WireError("frame: bad magic") {}
};
struct VersionError : WireError {
    explicit VersionError(int got)
        : WireError("frame: unsupported version " + std::to_string(got)) {}
};
struct ChecksumError : WireError {
    ChecksumError() : WireError("frame: checksum mismatch") {}
};
struct TruncatedError : WireError {
    explicit TruncatedError(const std::string& what) : WireError("frame truncated: " + what) {}
};
struct MalformedError : WireError {
    explicit MalformedError(const std::string& what) : WireError("frame malformed: " + what) {}
};

constexpr std::array<unsigned char, 4> kWireMagic = {'F', 'N', 'A', 'S'};
constexpr std::uint16_t kWireVersion = 1;
constexpr size_t kFrameHeaderBytes = 4 + 2 + 1 + 8;  // magic, version, kind, payload length
constexpr size_t kFrameOverheadBytes = kFrameHeaderBytes + 4;  // + crc32

enum class MsgKind : std::uint8_t {
    Init = 1,
    GlobalUpdate = 2,
    LocalResult = 3,
    GlobalModelEval = 4,
    Shutdown = 5,
};

inline const char* msg_kind_name(MsgKind k) {
    switch (k) {
        case MsgKind::Init: return "Init";
        case MsgKind::GlobalUpdate: return "GlobalUpdate";
        case MsgKind::LocalResult: return "LocalResult";
        case MsgKind::GlobalModelEval: return "GlobalModelEval";
        case MsgKind::Shutdown: return "Shutdown";
    }
    return "?";
}

namespace wiredetail {

inline const std::array<std::uint32_t, 256>& crc_table() {
    static const std::array<std::uint32_t, 256> table = [] {
        std::array<std::uint32_t, 256> t{};
        for (std::uint32_t i = 0; i < 256; ++i) {
            std::uint32_t c = i;
            for (int b = 0; b < 8; ++b) c = (c & 1) ? 0xEDB88320u ^ (c >> 1) : c >> 1;
            t[i] = c;
        }
        return t;
    }();
    return table;
}

inline std::uint32_t crc32(const unsigned char* data, size_t n) {
    const auto& t = crc_table();
    std::uint32_t c = 0xFFFFFFFFu;
    for (size_t i = 0; i < n; ++i) c = t[(c ^ data[i]) & 0xFF] ^ (c >> 8);
    return c ^ 0xFFFFFFFFu;
}

struct Writer {
    std::vector<unsigned char> bytes;

    void u8(std::uint8_t v) { bytes.push_back(v); }
    void u16(std::uint16_t v) {
        for (int i = 0; i < 2; ++i) bytes.push_back(static_cast<unsigned char>(v >> (8 * i)));
    }
    void u32(std::uint32_t v) {
        for (int i = 0; i < 4; ++i) bytes.push_back(static_cast<unsigned char>(v >> (8 * i)));
    }
    void u64(std::uint64_t v) {
        for (int i = 0; i < 8; ++i) bytes.push_back(static_cast<unsigned char>(v >> (8 * i)));
    }
    void f64(double v) {
        std::uint64_t bits;
        std::memcpy(&bits, &v, 8);
        u64(bits);
    }
    void str(const std::string& s) {
        u32(static_cast<std::uint32_t>(s.size()));
        bytes.insert(bytes.end(), s.begin(), s.end());
    }
    void doubles(const double* p, std::int64_t n) {
        size_t at = bytes.size();
        bytes.resize(at + static_cast<size_t>(n) * 8);
        std::memcpy(bytes.data() + at, p, static_cast<size_t>(n) * 8);
    }
};

struct Reader {
    const unsigned char* p;
    size_t n;
    size_t at = 0;

    void need(size_t k) const {
        if (at + k > n) throw MalformedError("payload ends early");
    }
    std::uint8_t u8() {
        need(1);
        return p[at++];
    }
    std::uint16_t u16() {
        need(2);
        std::uint16_t v = 0;
        for (int i = 0; i < 2; ++i) v |= static_cast<std::uint16_t>(p[at++]) << (8 * i);
        return v;
    }
    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(p[at++]) << (8 * i);
        return v;
    }
    std::uint64_t u64() {
        need(8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[at++]) << (8 * i);
        return v;
    }
    double f64() {
        std::uint64_t bits = u64();
        double v;
        std::memcpy(&v, &bits, 8);
        return v;
    }
    std::string str() {
        std::uint32_t len = u32();
        need(len);
        std::string s(reinterpret_cast<const char*>(p + at), len);
        at += len;
        return s;
    }
    void doubles(double* dst, std::int64_t k) {
        need(static_cast<size_t>(k) * 8);
        std::memcpy(dst, p + at, static_cast<size_t>(k) * 8);
        at += static_cast<size_t>(k) * 8;
    }
    bool done() const { return at == n; }
};

}  // namespace wiredetail

/// Parameter tensors in transit, keyed by store id. Both sides build their
/// stores from the same spec, so ids and shapes line up exactly.
struct ParamPayload {
    std::vector<std::pair<int, Tensor>> tensors;

    static ParamPayload from_store(const ParamStore& store, bool weights, bool arch) {
        ParamPayload p;
        for (int i = 0; i < store.size(); ++i) {
            Section s = store.section(i);
            if ((s == Section::Weight && weights) || (s == Section::Arch && arch))
                p.tensors.push_back({i, store.value(i)});
        }
        return p;
    }

    void apply_to(ParamStore& store) const {
        for (const auto& [id, t] : tensors) {
            if (id < 0 || id >= store.size())
                throw MalformedError("parameter id " + std::to_string(id) + " out of range");
            if (!store.value(id).same_shape(t))
                throw ShapeError("parameter " + store.name(id) + ": shape " +
                                 shape_str(t.shape()) + " does not match " +
                                 shape_str(store.value(id).shape()));
            store.value(id) = t;
        }
    }

    std::int64_t element_count() const {
        std::int64_t n = 0;
        for (const auto& [id, t] : tensors) n += t.numel();
        return n;
    }

    void write(wiredetail::Writer& w) const {
        w.u32(static_cast<std::uint32_t>(tensors.size()));
        for (const auto& [id, t] : tensors) {
            w.u32(static_cast<std::uint32_t>(id));
            w.u8(static_cast<std::uint8_t>(t.rank()));
            for (int d : t.shape()) w.u32(static_cast<std::uint32_t>(d));
            w.doubles(t.data(), t.numel());
        }
    }

    static ParamPayload read(wiredetail::Reader& r) {
        ParamPayload p;
        std::uint32_t count = r.u32();
        p.tensors.reserve(count);
        for (std::uint32_t i = 0; i < count; ++i) {
            int id = static_cast<int>(r.u32());
            int rank = r.u8();
            Shape shape(static_cast<size_t>(rank));
            for (int d = 0; d < rank; ++d) shape[static_cast<size_t>(d)] = static_cast<int>(r.u32());
            std::int64_t numel = shape_numel(shape);
            if (numel > (1ll << 32)) throw MalformedError("tensor too large");
            Tensor t(shape);
            r.doubles(t.data(), numel);
            p.tensors.push_back({id, std::move(t)});
        }
        return p;
    }
};

// Message variants (RoundMessage). Init registers a client; GlobalUpdate and
// LocalResult carry the round's parameters; GlobalModelEval is a metric
// report kind reserved in the schema; Shutdown ends a connection.

struct InitMsg {
    std::uint64_t config_hash = 0;
    std::uint32_t client_id = 0;
    NetworkSpec spec;
};

struct GlobalUpdateMsg {
    std::uint32_t round = 0;
    ParamPayload params;
};

struct LocalResultMsg {
    std::uint32_t round = 0;
    std::uint32_t client_id = 0;
    std::uint64_t sample_count = 0;
    ParamPayload params;
};

struct GlobalModelEvalMsg {
    std::uint32_t round = 0;
    double loss = 0.0;
    double accuracy = 0.0;
};

struct ShutdownMsg {
    std::string reason;
};

using RoundMessage =
    std::variant<InitMsg, GlobalUpdateMsg, LocalResultMsg, GlobalModelEvalMsg, ShutdownMsg>;

inline MsgKind message_kind(const RoundMessage& m) {
    return std::visit(
        [](const auto& v) -> MsgKind {
            using T = std::decay_t<decltype(v)>;
            if constexpr (std::is_same_v<T, InitMsg>) return MsgKind::Init;
            else if constexpr (std::is_same_v<T, GlobalUpdateMsg>) return MsgKind::GlobalUpdate;
            else if constexpr (std::is_same_v<T, LocalResultMsg>) return MsgKind::LocalResult;
            else if constexpr (std::is_same_v<T, GlobalModelEvalMsg>)
                return MsgKind::GlobalModelEval;
            else return MsgKind::Shutdown;
        },
        m);
}

inline std::vector<unsigned char> encode(const RoundMessage& m) {
    wiredetail::Writer payload;
    std::visit(
        [&payload](const auto& v) {
            using T = std::decay_t<decltype(v)>;
            if constexpr (std::is_same_v<T, InitMsg>) {
                payload.u64(v.config_hash);
                payload.u32(v.client_id);
                payload.u32(static_cast<std::uint32_t>(v.spec.num_cells));
                payload.u32(static_cast<std::uint32_t>(v.spec.init_channels));
                payload.u32(static_cast<std::uint32_t>(v.spec.num_classes));
                payload.u32(static_cast<std::uint32_t>(v.spec.in_channels));
                payload.u32(static_cast<std::uint32_t>(v.spec.in_height));
                payload.u32(static_cast<std::uint32_t>(v.spec.in_width));
            } else if constexpr (std::is_same_v<T, GlobalUpdateMsg>) {
                payload.u32(v.round);
                v.params.write(payload);
            } else if constexpr (std::is_same_v<T, LocalResultMsg>) {
                payload.u32(v.round);
                payload.u32(v.client_id);
                payload.u64(v.sample_count);
                v.params.write(payload);
            } else if constexpr (std::is_same_v<T, GlobalModelEvalMsg>) {
                payload.u32(v.round);
                payload.f64(v.loss);
                payload.f64(v.accuracy);
            } else {
                payload.str(v.reason);
            }
        },
        m);

    wiredetail::Writer frame;
    frame.bytes.reserve(payload.bytes.size() + kFrameOverheadBytes);
    frame.bytes.insert(frame.bytes.end(), kWireMagic.begin(), kWireMagic.end());
    frame.u16(kWireVersion);
    frame.u8(static_cast<std::uint8_t>(message_kind(m)));
    frame.u64(payload.bytes.size());
    frame.bytes.insert(frame.bytes.end(), payload.bytes.begin(), payload.bytes.end());
    // checksum covers version, kind, length and payload; only the magic is
    // outside, so any other single corrupted byte fails verification
    std::uint32_t crc = wiredetail::crc32(frame.bytes.data() + 4, frame.bytes.size() - 4);
    frame.u32(crc);
    return std::move(frame.bytes);
}

inline RoundMessage decode(const std::vector<unsigned char>& bytes) {
    if (bytes.size() < kFrameOverheadBytes) throw TruncatedError("shorter than a frame header");
    if (!std::equal(kWireMagic.begin(), kWireMagic.end(), bytes.begin())) throw BadMagicError();
    wiredetail::Reader hdr{bytes.data() + 4, bytes.size() - 4};
    std::uint16_t version = hdr.u16();
    if (version != kWireVersion) throw VersionError(version);
    std::uint8_t kind = hdr.u8();
    std::uint64_t len = hdr.u64();
    if (bytes.size() != kFrameOverheadBytes + len)
        throw TruncatedError("length field says " + std::to_string(len) + ", frame has " +
                             std::to_string(bytes.size() - kFrameOverheadBytes));
    std::uint32_t want = wiredetail::crc32(bytes.data() + 4, bytes.size() - 8);
    wiredetail::Reader tail{bytes.data() + bytes.size() - 4, 4};
    if (tail.u32() != want) throw ChecksumError();

    wiredetail::Reader r{bytes.data() + kFrameHeaderBytes, static_cast<size_t>(len)};
    RoundMessage out;
    switch (static_cast<MsgKind>(kind)) {
        case MsgKind::Init: {
            InitMsg m;
            m.config_hash = r.u64();
            m.client_id = r.u32();
            m.spec.num_cells = static_cast<int>(r.u32());
            m.spec.init_channels = static_cast<int>(r.u32());
            m.spec.num_classes = static_cast<int>(r.u32());
            m.spec.in_channels = static_cast<int>(r.u32());
            m.spec.in_height = static_cast<int>(r.u32());
            m.spec.in_width = static_cast<int>(r.u32());
            out = std::move(m);
            break;
        }
        case MsgKind::GlobalUpdate: {
            GlobalUpdateMsg m;
            m.round = r.u32();
            m.params = ParamPayload::read(r);
            out = std::move(m);
            break;
        }
        case MsgKind::LocalResult: {
            LocalResultMsg m;
            m.round = r.u32();
            m.client_id = r.u32();
            m.sample_count = r.u64();
            m.params = ParamPayload::read(r);
            out = std::move(m);
            break;
        }
        case MsgKind::GlobalModelEval: {
            GlobalModelEvalMsg m;
            m.round = r.u32();
            m.loss = r.f64();
            m.accuracy = r.f64();
            out = std::move(m);
            break;
        }
        case MsgKind::Shutdown: {
            ShutdownMsg m;
            m.reason = r.str();
            out = std::move(m);
            break;
        }
        default:
            throw MalformedError("unknown message kind " + std::to_string(kind));
    }
    if (!r.done()) throw MalformedError("trailing bytes after payload");
    return out;
}

}  // namespace fednas
