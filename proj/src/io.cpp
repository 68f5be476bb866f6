#include "flowtalk/io.hpp"

#include <cstdio>
#include <cstring>
#include <memory>
#include <sstream>
#include <sys/stat.h>

namespace flowtalk::io {

namespace {
struct FileCloser {
    void operator()(FILE* f) const {
        if (f) std::fclose(f);
    }
};
using FilePtr = std::unique_ptr<FILE, FileCloser>;
}  // namespace

std::vector<uint8_t> slurp(const std::string& path) {
    FilePtr f(std::fopen(path.c_str(), "rb"));
    if (!f) throw IoError(strf("cannot open %s for reading", path.c_str()));
    std::fseek(f.get(), 0, SEEK_END);
    long n = std::ftell(f.get());
    std::fseek(f.get(), 0, SEEK_SET);
    std::vector<uint8_t> buf(n > 0 ? size_t(n) : 0);
    if (n > 0 && std::fread(buf.data(), 1, buf.size(), f.get()) != buf.size())
        throw IoError(strf("short read on %s", path.c_str()));
    return buf;
}

void spew(const std::string& path, const void* data, size_t n) {
    FilePtr f(std::fopen(path.c_str(), "wb"));
    if (!f) throw IoError(strf("cannot open %s for writing", path.c_str()));
    if (n && std::fwrite(data, 1, n, f.get()) != n)
        throw IoError(strf("short write on %s", path.c_str()));
}

void spew_text(const std::string& path, const std::string& text) {
    spew(path, text.data(), text.size());
}

std::string slurp_text(const std::string& path) {
    auto v = slurp(path);
    return std::string(v.begin(), v.end());
}

bool file_exists(const std::string& path) {
    struct stat st {};
    return ::stat(path.c_str(), &st) == 0;
}

Waveform read_wav(const std::string& path) {
    auto buf = slurp(path);
    ByteReader r(buf, path);
    if (buf.size() < 12) throw IoError(strf("%s: not a RIFF file", path.c_str()));
    char magic[4];
    std::memcpy(magic, buf.data(), 4);
    if (std::memcmp(magic, "RIFF", 4) != 0) throw IoError(strf("%s: missing RIFF magic", path.c_str()));
    std::memcpy(magic, buf.data() + 8, 4);
    if (std::memcmp(magic, "WAVE", 4) != 0) throw IoError(strf("%s: missing WAVE tag", path.c_str()));
    r.seek(12);

    Waveform wav;
    int channels = 0, bits = 0;
    bool have_fmt = false, have_data = false;
    while (r.remaining() >= 8) {
        char id[5] = {0};
        id[0] = char(r.u8());
        id[1] = char(r.u8());
        id[2] = char(r.u8());
        id[3] = char(r.u8());
        uint32_t size = r.u32();
        size_t next = r.tell() + size + (size & 1);  // chunks are word-aligned
        if (std::strcmp(id, "fmt ") == 0) {
            uint16_t fmt = r.u16();
            channels = r.u16();
            wav.sample_rate = int(r.u32());
            r.u32();  // byte rate
            r.u16();  // block align
            bits = r.u16();
            if (fmt != 1) throw IoError(strf("%s: only linear PCM supported (fmt=%u)", path.c_str(), fmt));
            have_fmt = true;
        } else if (std::strcmp(id, "data") == 0) {
            if (!have_fmt) throw IoError(strf("%s: data chunk before fmt", path.c_str()));
            if (channels != 1) throw IoError(strf("%s: expected mono, got %d channels", path.c_str(), channels));
            if (bits != 16) throw IoError(strf("%s: expected 16-bit samples, got %d", path.c_str(), bits));
            size_t n = size / 2;
            wav.samples.resize(n);
            for (size_t i = 0; i < n; ++i) wav.samples[i] = float(int16_t(r.u16())) / 32768.0f;
            have_data = true;
        }
        if (next > buf.size()) throw IoError(strf("%s: truncated chunk '%s'", path.c_str(), id));
        r.seek(next);
    }
    if (!have_data) throw IoError(strf("%s: no data chunk", path.c_str()));
    return wav;
}

void write_wav(const std::string& path, const std::vector<float>& samples, int sample_rate) {
    ByteWriter w;
    uint32_t data_size = uint32_t(samples.size() * 2);
    w.bytes("RIFF", 4);
    w.u32(36 + data_size);
    w.bytes("WAVE", 4);
    w.bytes("fmt ", 4);
    w.u32(16);
    w.u16(1);  // PCM
    w.u16(1);  // mono
    w.u32(uint32_t(sample_rate));
    w.u32(uint32_t(sample_rate * 2));
    w.u16(2);
    w.u16(16);
    w.bytes("data", 4);
    w.u32(data_size);
    for (float s : samples) {
        float c = s < -1.0f ? -1.0f : (s > 1.0f ? 1.0f : s);
        w.u16(uint16_t(int16_t(c * 32767.0f)));
    }
    spew(path, w.data());
}

MatD read_matrix_text(const std::string& path) {
    std::istringstream in(slurp_text(path));
    std::vector<std::vector<double>> rows;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        size_t start = line.find_first_not_of(" \t\r");
        if (start == std::string::npos || line[start] == '#') continue;
        std::istringstream ls(line);
        std::vector<double> row;
        double v;
        while (ls >> v) row.push_back(v);
        if (!ls.eof())
            throw IoError(strf("%s:%d: non-numeric token", path.c_str(), lineno));
        if (!rows.empty() && row.size() != rows.front().size())
            throw IoError(strf("%s:%d: expected %zu values per line, got %zu", path.c_str(), lineno,
                               rows.front().size(), row.size()));
        rows.push_back(std::move(row));
    }
    if (rows.empty()) throw IoError(strf("%s: no data rows", path.c_str()));
    MatD m(Eigen::Index(rows.size()), Eigen::Index(rows.front().size()));
    for (Eigen::Index r = 0; r < m.rows(); ++r)
        for (Eigen::Index c = 0; c < m.cols(); ++c) m(r, c) = rows[size_t(r)][size_t(c)];
    return m;
}

void write_matrix_text(const std::string& path, const MatD& m, const std::string& header_comment) {
    std::string out;
    if (!header_comment.empty()) out += "# " + header_comment + "\n";
    char num[64];
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
        for (Eigen::Index c = 0; c < m.cols(); ++c) {
            std::snprintf(num, sizeof(num), "%.9g", m(r, c));
            out += num;
            out += (c + 1 == m.cols()) ? '\n' : ' ';
        }
    }
    spew_text(path, out);
}

}  // namespace flowtalk::io
