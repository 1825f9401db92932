#pragma once

#include <cstdint>
#include <cstring>
#include <string>
#include <type_traits>

#include <Eigen/Core>

#include "galign/error.hpp"

namespace galign {

// Little-endian primitive IO on growable buffers; shared by every binary
// artifact format (datasets, checkpoints).

struct BinWriter {
  std::string buf;
  template <typename T>
  void put(const T& v) {
    static_assert(std::is_trivially_copyable_v<T>);
    buf.append(reinterpret_cast<const char*>(&v), sizeof(T));
  }
  void put_bytes(const void* p, size_t n) { buf.append(static_cast<const char*>(p), n); }
  void put_matrix(const Eigen::MatrixXd& m) {
    put(uint32_t(m.rows()));
    put(uint32_t(m.cols()));
    for (Eigen::Index r = 0; r < m.rows(); ++r)
      for (Eigen::Index c = 0; c < m.cols(); ++c) put(m(r, c));
  }
};

struct BinReader {
  const char* p;
  const char* end;
  template <typename T>
  T get() {
    static_assert(std::is_trivially_copyable_v<T>);
    check(p + sizeof(T) <= end, ErrorKind::Data, "binary record truncated");
    T v;
    std::memcpy(&v, p, sizeof(T));
    p += sizeof(T);
    return v;
  }
  void get_bytes(void* dst, size_t n) {
    check(p + n <= end, ErrorKind::Data, "binary record truncated");
    std::memcpy(dst, p, n);
    p += n;
  }
  Eigen::MatrixXd get_matrix() {
    uint32_t rows = get<uint32_t>(), cols = get<uint32_t>();
    check(uint64_t(rows) * cols <= (1u << 28), ErrorKind::Data, "matrix size implausible");
    Eigen::MatrixXd m(rows, cols);
    for (uint32_t r = 0; r < rows; ++r)
      for (uint32_t c = 0; c < cols; ++c) m(r, c) = get<double>();
    return m;
  }
};

void write_file_atomic(const std::string& path, const std::string& bytes);
std::string read_file(const std::string& path);

}  // namespace galign
