#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <string>
#include <vector>

#include "flowtalk/common.hpp"
#include "flowtalk/mat.hpp"

namespace flowtalk::io {

// All binary formats are little-endian; these helpers spell the byte order
// out so files are identical on any host.
class ByteWriter {
public:
    void u8(uint8_t v) { buf_.push_back(v); }
    void u16(uint16_t v) {
        for (int i = 0; i < 2; ++i) buf_.push_back(uint8_t(v >> (8 * i)));
    }
    void u32(uint32_t v) {
        for (int i = 0; i < 4; ++i) buf_.push_back(uint8_t(v >> (8 * i)));
    }
    void u64(uint64_t v) {
        for (int i = 0; i < 8; ++i) buf_.push_back(uint8_t(v >> (8 * i)));
    }
    void f32(float v) { u32(std::bit_cast<uint32_t>(v)); }
    void bytes(const void* p, size_t n) {
        const auto* b = static_cast<const uint8_t*>(p);
        buf_.insert(buf_.end(), b, b + n);
    }
    void str(const std::string& s) {
        u32(uint32_t(s.size()));
        bytes(s.data(), s.size());
    }
    void f32mat(const MatF& m) {
        for (Eigen::Index r = 0; r < m.rows(); ++r)
            for (Eigen::Index c = 0; c < m.cols(); ++c) f32(m(r, c));
    }

    size_t size() const { return buf_.size(); }
    const std::vector<uint8_t>& data() const { return buf_; }
    void patch_u64(size_t offset, uint64_t v) {
        for (int i = 0; i < 8; ++i) buf_[offset + size_t(i)] = uint8_t(v >> (8 * i));
    }

private:
    std::vector<uint8_t> buf_;
};

class ByteReader {
public:
    ByteReader(const uint8_t* p, size_t n, std::string what) : p_(p), n_(n), what_(std::move(what)) {}
    explicit ByteReader(const std::vector<uint8_t>& v, std::string what = "buffer")
        : ByteReader(v.data(), v.size(), std::move(what)) {}

    uint8_t u8() { return take(1)[0]; }
    uint16_t u16() {
        const uint8_t* b = take(2);
        return uint16_t(b[0]) | uint16_t(b[1]) << 8;
    }
    uint32_t u32() {
        const uint8_t* b = take(4);
        uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= uint32_t(b[i]) << (8 * i);
        return v;
    }
    uint64_t u64() {
        const uint8_t* b = take(8);
        uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= uint64_t(b[i]) << (8 * i);
        return v;
    }
    float f32() { return std::bit_cast<float>(u32()); }
    std::string str() {
        uint32_t n = u32();
        const uint8_t* b = take(n);
        return std::string(reinterpret_cast<const char*>(b), n);
    }
    MatF f32mat(int rows, int cols) {
        MatF m(rows, cols);
        for (int r = 0; r < rows; ++r)
            for (int c = 0; c < cols; ++c) m(r, c) = f32();
        return m;
    }

    void raw(void* dst, size_t n) {
        const uint8_t* b = take(n);
        std::memcpy(dst, b, n);
    }

    void seek(size_t pos) {
        if (pos > n_) throw IoError(strf("%s: seek past end", what_.c_str()));
        off_ = pos;
    }
    size_t tell() const { return off_; }
    size_t remaining() const { return n_ - off_; }

private:
    const uint8_t* take(size_t n) {
        if (off_ + n > n_)
            throw IoError(strf("%s: truncated (need %zu bytes at offset %zu, have %zu)",
                               what_.c_str(), n, off_, n_ - off_));
        const uint8_t* b = p_ + off_;
        off_ += n;
        return b;
    }
    const uint8_t* p_;
    size_t n_;
    size_t off_ = 0;
    std::string what_;
};

std::vector<uint8_t> slurp(const std::string& path);
void spew(const std::string& path, const void* data, size_t n);
inline void spew(const std::string& path, const std::vector<uint8_t>& v) { spew(path, v.data(), v.size()); }
void spew_text(const std::string& path, const std::string& text);
std::string slurp_text(const std::string& path);
bool file_exists(const std::string& path);

// Single-channel 16-bit PCM RIFF/WAVE reader. Samples are scaled to [-1, 1).
struct Waveform {
    std::vector<float> samples;
    int sample_rate = 0;
};
Waveform read_wav(const std::string& path);
void write_wav(const std::string& path, const std::vector<float>& samples, int sample_rate);

// Whitespace-separated float matrix, one row per line. Lines starting with
// '#' and blank lines are skipped. Every row must have the same width.
MatD read_matrix_text(const std::string& path);
void write_matrix_text(const std::string& path, const MatD& m, const std::string& header_comment = "");

}  // namespace flowtalk::io
