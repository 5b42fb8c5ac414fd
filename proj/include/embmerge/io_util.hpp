#pragma once

#include <filesystem>
#include <string>
#include <vector>

namespace embmerge {

/// Shortest round-trip decimal text for a double (std::to_chars), locale-free.
std::string format_number(double v);
std::string format_number(float v);

/// FNV-1a64 hex digest of a byte string; used for content-addressing stages.
std::string content_hash(const std::string& data);

/// Write `contents` to `path` atomically (same-directory temp file + rename).
void atomic_write_file(const std::filesystem::path& path, const std::string& contents);
void atomic_write_file(const std::filesystem::path& path, const std::vector<char>& contents);

std::string read_text_file(const std::filesystem::path& path);
std::vector<char> read_binary_file(const std::filesystem::path& path);

/// Minimal CSV emitter with a fixed header; all rows formatted via format_number.
class CsvWriter {
public:
    explicit CsvWriter(std::vector<std::string> columns);
    void add_row(const std::vector<std::string>& cells);
    std::vector<std::string> number_row(const std::vector<double>& values) const;
    const std::string& text() const { return buf_; }
    void write(const std::filesystem::path& path) const;

private:
    std::size_t ncols_;
    std::string buf_;
};

}  // namespace embmerge
