#pragma once

#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "contrec/common.hpp"

namespace contrec {

// Little binary record format shared by all checkpoints. Doubles are written
// raw so a save/load cycle is bit-exact on the writing machine.
class BinaryWriter {
 public:
  explicit BinaryWriter(const std::string& path) : out_(path, std::ios::binary) {
    if (!out_) throw IoError("cannot open for write: " + path);
  }

  void u32(std::uint32_t v) { raw(&v, sizeof(v)); }
  void i64(std::int64_t v) { raw(&v, sizeof(v)); }
  void f64(double v) { raw(&v, sizeof(v)); }

  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    raw(s.data(), s.size());
  }

  void mat(const Mat& m) {
    i64(m.rows());
    i64(m.cols());
    raw(m.data(), sizeof(double) * static_cast<std::size_t>(m.size()));
  }

  void vec(const Vec& v) {
    i64(v.size());
    raw(v.data(), sizeof(double) * static_cast<std::size_t>(v.size()));
  }

 private:
  void raw(const void* p, std::size_t n) {
    out_.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
    if (!out_) throw IoError("write failed");
  }
  std::ofstream out_;
};

class BinaryReader {
 public:
  explicit BinaryReader(const std::string& path) : in_(path, std::ios::binary) {
    if (!in_) throw IoError("cannot open for read: " + path);
  }

  std::uint32_t u32() {
    std::uint32_t v;
    raw(&v, sizeof(v));
    return v;
  }
  std::int64_t i64() {
    std::int64_t v;
    raw(&v, sizeof(v));
    return v;
  }
  double f64() {
    double v;
    raw(&v, sizeof(v));
    return v;
  }

  std::string str() {
    std::uint32_t n = u32();
    std::string s(n, '\0');
    raw(s.data(), n);
    return s;
  }

  Mat mat() {
    std::int64_t r = i64(), c = i64();
    Mat m(r, c);
    raw(m.data(), sizeof(double) * static_cast<std::size_t>(m.size()));
    return m;
  }

  Vec vec() {
    std::int64_t n = i64();
    Vec v(n);
    raw(v.data(), sizeof(double) * static_cast<std::size_t>(v.size()));
    return v;
  }

 private:
  void raw(void* p, std::size_t n) {
    in_.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
    if (!in_) throw IoError("read failed (truncated checkpoint?)");
  }
  std::ifstream in_;
};

}  // namespace contrec
