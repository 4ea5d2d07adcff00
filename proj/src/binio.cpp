#include "conda_dyn/binio.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

namespace conda_dyn {

namespace {
constexpr std::size_t kMagicLength = 8;

std::array<char, kMagicLength> pad_magic(std::string_view magic) {
  std::array<char, kMagicLength> out{};
  std::memcpy(out.data(), magic.data(), std::min(magic.size(), kMagicLength));
  return out;
}
} // namespace

BinaryWriter::BinaryWriter(std::string_view magic, std::uint32_t version) {
  for (char c : pad_magic(magic)) {
    buf_.push_back(static_cast<std::uint8_t>(c));
  }
  u32(version);
}

void BinaryWriter::u8(std::uint8_t v) { buf_.push_back(v); }

void BinaryWriter::u32(std::uint32_t v) {
  for (int i = 0; i < 4; ++i) {
    buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
}

void BinaryWriter::u64(std::uint64_t v) {
  for (int i = 0; i < 8; ++i) {
    buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
}

void BinaryWriter::i64(std::int64_t v) { u64(static_cast<std::uint64_t>(v)); }

void BinaryWriter::f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }

void BinaryWriter::str(std::string_view s) {
  u32(static_cast<std::uint32_t>(s.size()));
  buf_.insert(buf_.end(), s.begin(), s.end());
}

void BinaryWriter::matrix(const Eigen::Ref<const Matrix>& m) {
  u32(static_cast<std::uint32_t>(m.rows()));
  u32(static_cast<std::uint32_t>(m.cols()));
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    for (Eigen::Index j = 0; j < m.cols(); ++j) {
      f64(m(i, j));
    }
  }
}

void BinaryWriter::params(const Params& p) {
  u32(static_cast<std::uint32_t>(p.size()));
  for (const auto& block : p) {
    str(block.name);
    matrix(block.value);
  }
}

void BinaryWriter::save(const std::filesystem::path& path) const { write_file_bytes(path, buf_); }

// ---------------------------------------------------------------------------

BinaryReader::BinaryReader(std::vector<std::uint8_t> bytes, std::string_view magic) : buf_(std::move(bytes)) {
  const auto expected = pad_magic(magic);
  if (buf_.size() < kMagicLength ||
      std::memcmp(buf_.data(), expected.data(), kMagicLength) != 0) {
    throw FormatError("bad magic header: expected '" + std::string(magic) + "'");
  }
  pos_ = kMagicLength;
  version_ = u32();
  if (version_ != kFormatVersion) {
    throw FormatError("unsupported format version " + std::to_string(version_));
  }
}

BinaryReader BinaryReader::open(const std::filesystem::path& path, std::string_view magic) {
  return BinaryReader(read_file_bytes(path), magic);
}

void BinaryReader::need(std::size_t n, const char* what) {
  if (buf_.size() - pos_ < n) {
    throw ParseError(std::string("truncated file while reading ") + what, pos_);
  }
}

std::uint8_t BinaryReader::u8() {
  need(1, "u8");
  return buf_[pos_++];
}

std::uint32_t BinaryReader::u32() {
  need(4, "u32");
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) {
    v |= static_cast<std::uint32_t>(buf_[pos_ + i]) << (8 * i);
  }
  pos_ += 4;
  return v;
}

std::uint64_t BinaryReader::u64() {
  need(8, "u64");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) {
    v |= static_cast<std::uint64_t>(buf_[pos_ + i]) << (8 * i);
  }
  pos_ += 8;
  return v;
}

std::int64_t BinaryReader::i64() { return static_cast<std::int64_t>(u64()); }

double BinaryReader::f64() {
  need(8, "f64");
  return std::bit_cast<double>(u64());
}

std::string BinaryReader::str() {
  const std::uint64_t at = pos_;
  const std::uint32_t n = u32();
  if (buf_.size() - pos_ < n) {
    throw ParseError("truncated file while reading string", at);
  }
  std::string s(reinterpret_cast<const char*>(buf_.data() + pos_), n);
  pos_ += n;
  return s;
}

Matrix BinaryReader::matrix() {
  const std::uint64_t at = pos_;
  const std::uint32_t rows = u32();
  const std::uint32_t cols = u32();
  const std::uint64_t count = static_cast<std::uint64_t>(rows) * cols;
  if ((buf_.size() - pos_) / 8 < count) {
    throw ParseError("truncated file while reading " + std::to_string(rows) + "x" +
                         std::to_string(cols) + " matrix",
                     at);
  }
  Matrix m(rows, cols);
  for (std::uint32_t i = 0; i < rows; ++i) {
    for (std::uint32_t j = 0; j < cols; ++j) {
      m(i, j) = f64();
    }
  }
  return m;
}

Params BinaryReader::params() {
  const std::uint32_t n = u32();
  Params p;
  for (std::uint32_t i = 0; i < n; ++i) {
    Param block;
    block.name = str();
    block.value = matrix();
    p.push_back(std::move(block));
  }
  return p;
}

void BinaryReader::expect_end() const {
  if (pos_ != buf_.size()) {
    throw ParseError("trailing bytes after payload", pos_);
  }
}

// ---------------------------------------------------------------------------

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw InputError("cannot open '" + path.string() + "' for reading");
  }
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

void write_file_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  if (path.has_parent_path()) {
    std::filesystem::create_directories(path.parent_path());
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) {
    throw InputError("cannot open '" + path.string() + "' for writing");
  }
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) {
    throw InputError("write failed for '" + path.string() + "'");
  }
}

} // namespace conda_dyn
