#include "embmerge/io_util.hpp"

#include <charconv>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <stdexcept>
#include <system_error>

namespace embmerge {

namespace {

std::string to_chars_str(double v) {
    char buf[64];
    auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
    if (ec != std::errc())
        throw std::runtime_error("number formatting failed");
    return std::string(buf, ptr);
}

void atomic_write_impl(const std::filesystem::path& path, const char* data,
                       std::size_t n) {
    namespace fs = std::filesystem;
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    fs::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw std::runtime_error("cannot open for write: " + tmp.string());
        out.write(data, static_cast<std::streamsize>(n));
        if (!out) throw std::runtime_error("write failed: " + tmp.string());
    }
    fs::rename(tmp, path);
}

}  // namespace

std::string format_number(double v) { return to_chars_str(v); }
std::string format_number(float v) { return to_chars_str(static_cast<double>(v)); }

std::string content_hash(const std::string& data) {
    std::uint64_t h = 14695981039346656037ULL;
    for (unsigned char c : data) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    static const char* digits = "0123456789abcdef";
    std::string s(16, '0');
    for (int i = 15; i >= 0; --i) {
        s[static_cast<std::size_t>(i)] = digits[h & 0xf];
        h >>= 4;
    }
    return s;
}

void atomic_write_file(const std::filesystem::path& path, const std::string& contents) {
    atomic_write_impl(path, contents.data(), contents.size());
}

void atomic_write_file(const std::filesystem::path& path,
                       const std::vector<char>& contents) {
    atomic_write_impl(path, contents.data(), contents.size());
}

std::string read_text_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open: " + path.string());
    return std::string(std::istreambuf_iterator<char>(in),
                       std::istreambuf_iterator<char>());
}

std::vector<char> read_binary_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open: " + path.string());
    return std::vector<char>{std::istreambuf_iterator<char>(in),
                             std::istreambuf_iterator<char>()};
}

CsvWriter::CsvWriter(std::vector<std::string> columns) : ncols_(columns.size()) {
    for (std::size_t i = 0; i < columns.size(); ++i) {
        if (i) buf_ += ',';
        buf_ += columns[i];
    }
    buf_ += '\n';
}

void CsvWriter::add_row(const std::vector<std::string>& cells) {
    if (cells.size() != ncols_)
        throw std::invalid_argument("csv row width mismatch");
    for (std::size_t i = 0; i < cells.size(); ++i) {
        if (i) buf_ += ',';
        buf_ += cells[i];
    }
    buf_ += '\n';
}

std::vector<std::string> CsvWriter::number_row(const std::vector<double>& values) const {
    std::vector<std::string> cells;
    cells.reserve(values.size());
    for (double v : values) cells.push_back(format_number(v));
    return cells;
}

void CsvWriter::write(const std::filesystem::path& path) const {
    atomic_write_file(path, buf_);
}

}  // namespace embmerge
