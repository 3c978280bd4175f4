#pragma once

#include <cstring>
#include <fstream>
#include <sstream>
#include <string>

#include "coft/model.hpp"

// Checkpoint container: the magic line "COFT1\n", a text manifest with one
// line per tensor ("name dtype shape... offset"), a blank line, then the raw
// little-endian payload in manifest order. Offsets are relative to the start
// of the payload. Round-trips are bit-exact.

namespace coft {

namespace detail {

template <typename R>
void write_scalar_le(std::string& out, R v) {
    static_assert(sizeof(R) == 4 || sizeof(R) == 8);
    if constexpr (sizeof(R) == 4) {
        uint32_t bits;
        std::memcpy(&bits, &v, 4);
        for (int i = 0; i < 4; ++i) out.push_back(char((bits >> (8 * i)) & 0xFF));
    } else {
        uint64_t bits;
        std::memcpy(&bits, &v, 8);
        for (int i = 0; i < 8; ++i) out.push_back(char((bits >> (8 * i)) & 0xFF));
    }
}

template <typename R>
R read_scalar_le(const unsigned char* p) {
    if constexpr (sizeof(R) == 4) {
        uint32_t bits = 0;
        for (int i = 0; i < 4; ++i) bits |= uint32_t(p[i]) << (8 * i);
        R v;
        std::memcpy(&v, &bits, 4);
        return v;
    } else {
        uint64_t bits = 0;
        for (int i = 0; i < 8; ++i) bits |= uint64_t(p[i]) << (8 * i);
        R v;
        std::memcpy(&v, &bits, 8);
        return v;
    }
}

} // namespace detail

template <typename R>
void save_checkpoint(const std::string& path, const ParamsT<R>& params) {
    std::string manifest;
    std::string payload;
    for (const auto& [id, t] : params) {
        manifest += id.name();
        manifest += ' ';
        manifest += dtype_name(TensorT<R>::dtype());
        for (int64_t s : t.shape) {
            manifest += ' ';
            manifest += std::to_string(s);
        }
        manifest += ' ';
        manifest += std::to_string(payload.size());
        manifest += '\n';
        for (R v : t.data) detail::write_scalar_le(payload, v);
    }
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + path + " for writing");
    out << "COFT1\n" << manifest << "\n";
    out.write(payload.data(), std::streamsize(payload.size()));
    if (!out) throw IoError("short write to " + path);
}

template <typename R>
ParamsT<R> load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path);
    std::string magic;
    std::getline(in, magic);
    if (magic != "COFT1") throw IoError("bad checkpoint magic in " + path);

    struct Entry {
        ParamId id;
        std::vector<int64_t> shape;
        size_t offset;
    };
    std::vector<Entry> entries;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) break;
        std::istringstream ls(line);
        std::string name, dtype;
        ls >> name >> dtype;
        if (dtype != dtype_name(TensorT<R>::dtype()))
            throw IoError("checkpoint tensor " + name + " has dtype " + dtype + ", expected " +
                          dtype_name(TensorT<R>::dtype()));
        std::vector<long long> nums;
        long long v;
        while (ls >> v) nums.push_back(v);
        if (nums.size() < 2) throw IoError("bad manifest line: " + line);
        Entry e;
        e.id = ParamId::parse(name);
        e.offset = size_t(nums.back());
        nums.pop_back();
        e.shape.assign(nums.begin(), nums.end());
        entries.push_back(std::move(e));
    }
    std::string payload((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

    ParamsT<R> params;
    for (const auto& e : entries) {
        TensorT<R> t(e.shape);
        const size_t bytes = size_t(t.numel()) * sizeof(R);
        if (e.offset + bytes > payload.size()) throw IoError("checkpoint payload truncated at " + e.id.name());
        const unsigned char* p = reinterpret_cast<const unsigned char*>(payload.data()) + e.offset;
        for (int64_t i = 0; i < t.numel(); ++i) t.data[size_t(i)] = detail::read_scalar_le<R>(p + size_t(i) * sizeof(R));
        params.emplace(e.id, std::move(t));
    }
    return params;
}

// Model hyperparameters cannot be recovered from tensor shapes alone (the
// head count leaves no shape footprint), so configs travel separately.

} // namespace coft
