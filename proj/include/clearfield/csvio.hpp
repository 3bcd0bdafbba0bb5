#pragma once

#include <cstdint>
#include <fstream>
#include <string>

namespace clearfield {

// CSV writer with '.' decimals, full round-trip float formatting ("%.17g")
// and LF line endings, so identical runs produce byte-identical files.
class CsvFile {
public:
    explicit CsvFile(const std::string& path);

    void cell(const std::string& s);
    void cell(const char* s) { cell(std::string(s)); }
    void cell(double v);
    void cell(int v) { cell(static_cast<long long>(v)); }
    void cell(long v) { cell(static_cast<long long>(v)); }
    void cell(long long v);
    void cell(std::uint64_t v);
    void end_row();

    template <typename... Ts>
    void row(Ts... vs) {
        (cell(vs), ...);
        end_row();
    }

    const std::string& path() const { return path_; }

private:
    std::ofstream out_;
    std::string path_;
    bool row_started_ = false;
};

// FNV-1a over file contents, hex-encoded; used for manifest content hashes.
std::string file_hash_hex(const std::string& path);
std::string string_hash_hex(const std::string& content);

std::string format_double(double v);

}  // namespace clearfield
