#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace kepil::util {

// FNV-1a, 64 bit.
std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t h = 0xcbf29ce484222325ULL);
std::string hex64(std::uint64_t v);

// Explicit little-endian encoding so files are identical on every host.
class ByteWriter {
public:
    void u8(std::uint8_t v) { buf_.push_back(static_cast<char>(v)); }
    void u32(std::uint32_t v);
    void u64(std::uint64_t v);
    void f64(double v);
    void str(std::string_view s);  // u32 length + bytes
    void raw(std::string_view s) { buf_.append(s); }
    const std::string& bytes() const { return buf_; }

private:
    std::string buf_;
};

// Reads what ByteWriter wrote; running past the end is a LoadError.
class ByteReader {
public:
    explicit ByteReader(std::string_view data, std::string context = "") : data_(data), ctx_(std::move(context)) {}
    std::uint8_t u8();
    std::uint32_t u32();
    std::uint64_t u64();
    double f64();
    std::string str();
    std::string_view raw(std::size_t n);
    std::size_t pos() const { return pos_; }
    bool done() const { return pos_ == data_.size(); }

private:
    void need(std::size_t n);
    std::string_view data_;
    std::size_t pos_ = 0;
    std::string ctx_;
};

std::string read_file(const std::filesystem::path& path);                  // IoError
void write_file(const std::filesystem::path& path, std::string_view bytes);  // IoError, writes via temp + rename

} // namespace kepil::util
