#include "projprune/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "projprune/error.hpp"

namespace projprune {

namespace {

void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_f64(std::vector<std::uint8_t>& out, double d) { put_u64(out, std::bit_cast<std::uint64_t>(d)); }

class Reader {
public:
    explicit Reader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

    void need(std::size_t n, const char* what) const {
        if (bytes_.size() - pos_ < n) {
            throw ParseError(std::string("checkpoint: truncated ") + what + " at byte offset " + std::to_string(pos_));
        }
    }

    std::uint64_t u64(const char* what) {
        need(8, what);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(bytes_[pos_ + i]) << (8 * i);
        pos_ += 8;
        return v;
    }

    std::uint32_t u32(const char* what) {
        need(4, what);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes_[pos_ + i]) << (8 * i);
        pos_ += 4;
        return v;
    }

    std::string str(std::size_t n, const char* what) {
        need(n, what);
        std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
        pos_ += n;
        return s;
    }

    std::size_t pos() const { return pos_; }
    bool done() const { return pos_ == bytes_.size(); }

private:
    std::span<const std::uint8_t> bytes_;
    std::size_t pos_ = 0;
};

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const NamedTensors& tensors) {
    std::vector<std::uint8_t> out = {'P', 'P', 'C', 'K'};
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(kCheckpointVersion >> (8 * i)));
    put_u64(out, tensors.size());
    for (const auto& [name, t] : tensors) {
        put_u64(out, name.size());
        out.insert(out.end(), name.begin(), name.end());
        put_u64(out, t.rank());
        for (std::size_t e : t.shape()) put_u64(out, e);
        for (double v : t.values()) put_f64(out, v);
    }
    return out;
}

NamedTensors decode_checkpoint(std::span<const std::uint8_t> bytes) {
    Reader r(bytes);
    if (r.str(4, "magic") != "PPCK") throw ParseError("checkpoint: bad magic at byte offset 0");
    const std::uint32_t version = r.u32("version");
    if (version != kCheckpointVersion) {
        throw ParseError("checkpoint: unsupported version " + std::to_string(version) + " at byte offset 4");
    }
    const std::uint64_t count = r.u64("entry count");
    NamedTensors out;
    for (std::uint64_t e = 0; e < count; ++e) {
        const std::uint64_t name_len = r.u64("name length");
        std::string name = r.str(name_len, "name");
        const std::uint64_t rank = r.u64("rank");
        if (rank > 16) throw ParseError("checkpoint: implausible rank at byte offset " + std::to_string(r.pos() - 8));
        Shape shape;
        for (std::uint64_t d = 0; d < rank; ++d) shape.push_back(r.u64("extent"));
        const std::size_t n = shape_size(shape);
        r.need(n * 8, "payload");
        std::vector<double> values(n);
        for (std::size_t i = 0; i < n; ++i) values[i] = std::bit_cast<double>(r.u64("payload"));
        if (!out.emplace(name, Tensor(std::move(shape), std::move(values))).second) {
            throw ParseError("checkpoint: duplicate entry '" + name + "'");
        }
    }
    if (!r.done()) throw ParseError("checkpoint: trailing bytes at byte offset " + std::to_string(r.pos()));
    return out;
}

void save_checkpoint(const std::filesystem::path& path, const NamedTensors& tensors) {
    const auto bytes = encode_checkpoint(tensors);
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw Error("checkpoint: cannot open '" + path.string() + "' for writing");
    os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!os) throw Error("checkpoint: write failed for '" + path.string() + "'");
}

NamedTensors load_checkpoint(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw Error("checkpoint: cannot open '" + path.string() + "'");
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    return decode_checkpoint(bytes);
}

}  // namespace projprune
