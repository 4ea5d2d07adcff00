#pragma once

#include "conda_dyn/numcore.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace conda_dyn {

// Little-endian binary envelope shared by datasets, checkpoints and kNN
// tables: 8-byte magic, u32 version, then a sequence of typed fields.
//
//   u8/u32/u64/i64  little-endian integers
//   f64             IEEE-754 binary64, little-endian
//   string          u32 length + bytes
//   matrix          u32 rows + u32 cols + rows*cols f64 in row-major order

inline constexpr std::uint32_t kFormatVersion = 1;

class BinaryWriter {
public:
  BinaryWriter(std::string_view magic, std::uint32_t version = kFormatVersion);

  void u8(std::uint8_t v);
  void u32(std::uint32_t v);
  void u64(std::uint64_t v);
  void i64(std::int64_t v);
  void f64(double v);
  void str(std::string_view s);
  void matrix(const Eigen::Ref<const Matrix>& m);
  void params(const Params& p);

  const std::vector<std::uint8_t>& bytes() const { return buf_; }
  void save(const std::filesystem::path& path) const;

private:
  std::vector<std::uint8_t> buf_;
};

class BinaryReader {
public:
  /// Checks the magic tag (FormatError on mismatch) and the version.
  BinaryReader(std::vector<std::uint8_t> bytes, std::string_view magic);
  static BinaryReader open(const std::filesystem::path& path, std::string_view magic);

  std::uint32_t version() const { return version_; }
  std::uint8_t u8();
  std::uint32_t u32();
  std::uint64_t u64();
  std::int64_t i64();
  double f64();
  std::string str();
  Matrix matrix();
  Params params();

  std::uint64_t offset() const { return pos_; }
  bool at_end() const { return pos_ == buf_.size(); }
  /// Throws ParseError if unread bytes remain.
  void expect_end() const;

private:
  void need(std::size_t n, const char* what);

  std::vector<std::uint8_t> buf_;
  std::size_t pos_ = 0;
  std::uint32_t version_ = 0;
};

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path);
void write_file_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes);

} // namespace conda_dyn
