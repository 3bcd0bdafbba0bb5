#include "clearfield/csvio.hpp"

#include <cstdio>
#include <sstream>
#include <stdexcept>

namespace clearfield {

CsvFile::CsvFile(const std::string& path) : out_(path, std::ios::binary), path_(path) {
    if (!out_) throw std::runtime_error("cannot open " + path + " for writing");
}

void CsvFile::cell(const std::string& s) {
    if (row_started_) out_ << ',';
    out_ << s;
    row_started_ = true;
}

void CsvFile::cell(double v) { cell(format_double(v)); }

void CsvFile::cell(long long v) { cell(std::to_string(v)); }

void CsvFile::cell(std::uint64_t v) { cell(std::to_string(v)); }

void CsvFile::end_row() {
    out_ << '\n';
    row_started_ = false;
}

std::string format_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

namespace {
std::uint64_t fnv1a(const char* data, std::size_t len, std::uint64_t h = 0xcbf29ce484222325ULL) {
    for (std::size_t i = 0; i < len; ++i) {
        h ^= static_cast<unsigned char>(data[i]);
        h *= 0x100000001b3ULL;
    }
    return h;
}

std::string hex64(std::uint64_t h) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}
}  // namespace

std::string file_hash_hex(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path + " for hashing");
    std::uint64_t h = 0xcbf29ce484222325ULL;
    char buf[65536];
    while (in) {
        in.read(buf, sizeof buf);
        h = fnv1a(buf, static_cast<std::size_t>(in.gcount()), h);
    }
    return hex64(h);
}

std::string string_hash_hex(const std::string& content) {
    return hex64(fnv1a(content.data(), content.size()));
}

}  // namespace clearfield
