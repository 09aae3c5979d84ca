#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "neurovar/common.hpp"

namespace nv {

// Little-endian binary file helpers shared by the NVCK/NVRC/NVCB formats.
// The writers are byte-order explicit so files are portable.

class BinWriter {
 public:
  explicit BinWriter(const std::string& path) : out_(path, std::ios::binary), path_(path) {
    if (!out_) throw Error("cannot open for writing: " + path);
  }
  void magic(const char m[4]) { out_.write(m, 4); }
  void u8(std::uint8_t v) { out_.put(static_cast<char>(v)); }
  void u32(std::uint32_t v) {
    char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
    out_.write(b, 4);
  }
  void u64(std::uint64_t v) {
    char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
    out_.write(b, 8);
  }
  void f32(float v) {
    std::uint32_t u;
    std::memcpy(&u, &v, 4);
    u32(u);
  }
  void f64(double v) {
    std::uint64_t u;
    std::memcpy(&u, &v, 8);
    u64(u);
  }
  void f32_array(const float* p, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) f32(p[i]);
  }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    out_.write(s.data(), static_cast<std::streamsize>(s.size()));
  }
  void close() {
    out_.close();
    if (!out_) throw Error("write failed: " + path_);
  }

 private:
  std::ofstream out_;
  std::string path_;
};

class BinReader {
 public:
  explicit BinReader(const std::string& path) : in_(path, std::ios::binary), path_(path) {
    if (!in_) throw MissingArtifactError("cannot open: " + path);
  }
  bool expect_magic(const char m[4]) {
    char b[4];
    in_.read(b, 4);
    return in_.gcount() == 4 && std::memcmp(b, m, 4) == 0;
  }
  std::uint8_t u8() {
    int c = in_.get();
    if (c == EOF) fail();
    return static_cast<std::uint8_t>(c);
  }
  std::uint32_t u32() {
    unsigned char b[4];
    read(b, 4);
    std::uint32_t v = 0;
    for (int i = 3; i >= 0; --i) v = (v << 8) | b[i];
    return v;
  }
  std::uint64_t u64() {
    unsigned char b[8];
    read(b, 8);
    std::uint64_t v = 0;
    for (int i = 7; i >= 0; --i) v = (v << 8) | b[i];
    return v;
  }
  float f32() {
    std::uint32_t u = u32();
    float v;
    std::memcpy(&v, &u, 4);
    return v;
  }
  double f64() {
    std::uint64_t u = u64();
    double v;
    std::memcpy(&v, &u, 8);
    return v;
  }
  void f32_array(float* p, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) p[i] = f32();
  }
  std::string str() {
    std::uint32_t n = u32();
    std::string s(n, '\0');
    if (n) read(s.data(), n);
    return s;
  }
  bool at_eof() { return in_.peek() == EOF; }
  const std::string& path() const { return path_; }

 private:
  void read(void* p, std::size_t n) {
    in_.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
    if (in_.gcount() != static_cast<std::streamsize>(n)) fail();
  }
  [[noreturn]] void fail() { throw Error("truncated file: " + path_); }

  std::ifstream in_;
  std::string path_;
};

// Write-temp-then-rename so concurrent readers never see partial files.
void atomic_write_text(const std::string& path, const std::string& content);

// FNV-1a over file bytes; used for manifests and skip-if-unchanged checks.
std::uint64_t file_checksum(const std::string& path);
bool files_identical(const std::string& a, const std::string& b);

}  // namespace nv
