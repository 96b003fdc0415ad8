#include "gramclust/tensor.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <stdexcept>

#include "gramclust/errors.hpp"

namespace gramclust {

namespace {

constexpr char kMagic[4] = {'G', 'R', 'T', 'N'};
constexpr uint16_t kFormatVersion = 1;

void put_u16(std::string& buf, uint16_t v) {
  buf.push_back(static_cast<char>(v & 0xff));
  buf.push_back(static_cast<char>((v >> 8) & 0xff));
}

void put_u64(std::string& buf, uint64_t v) {
  for (int i = 0; i < 8; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_f32(std::string& buf, float v) {
  uint32_t bits;
  std::memcpy(&bits, &v, 4);
  for (int i = 0; i < 4; ++i) buf.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
}

uint16_t get_u16(const unsigned char* p) {
  return static_cast<uint16_t>(p[0] | (uint16_t(p[1]) << 8));
}

uint64_t get_u64(const unsigned char* p) {
  uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= uint64_t(p[i]) << (8 * i);
  return v;
}

float get_f32(const unsigned char* p) {
  uint32_t bits = uint32_t(p[0]) | (uint32_t(p[1]) << 8) | (uint32_t(p[2]) << 16) |
                  (uint32_t(p[3]) << 24);
  float v;
  std::memcpy(&v, &bits, 4);
  return v;
}

}  // namespace

std::size_t shape_numel(const std::vector<std::size_t>& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

Tensor::Tensor(std::vector<std::size_t> shape)
    : shape_(std::move(shape)), data_(shape_numel(shape_), 0.0f) {}

Tensor::Tensor(std::vector<std::size_t> shape, std::vector<float> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  if (shape_numel(shape_) != data_.size())
    throw std::invalid_argument("Tensor: shape product does not match data length");
  check_finite();
}

bool Tensor::same_as(const Tensor& other) const {
  return shape_ == other.shape_ &&
         std::memcmp(data_.data(), other.data_.data(), data_.size() * 4) == 0;
}

void Tensor::check_finite() const {
  for (float v : data_) {
    if (!std::isfinite(v))
      throw std::invalid_argument("Tensor: non-finite entry");
  }
}

void tensor_save(const Tensor& t, const std::filesystem::path& path) {
  std::string buf;
  buf.reserve(16 + 8 * t.rank() + 4 * t.numel());
  buf.append(kMagic, 4);
  put_u16(buf, kFormatVersion);
  put_u16(buf, static_cast<uint16_t>(t.rank()));
  for (std::size_t d : t.shape()) put_u64(buf, d);
  for (float v : t.data()) put_f32(buf, v);

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out)
    throw IoError(IoErrorKind::OpenFailed, path.string(), "cannot open for writing");
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!out)
    throw IoError(IoErrorKind::WriteFailed, path.string(), "write failed");
}

Tensor tensor_load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in)
    throw IoError(IoErrorKind::OpenFailed, path.string(), "cannot open for reading");
  std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const auto* p = reinterpret_cast<const unsigned char*>(buf.data());
  const std::size_t n = buf.size();

  if (n < 8 || std::memcmp(p, kMagic, 4) != 0)
    throw IoError(IoErrorKind::BadMagic, path.string(), "bad magic bytes");
  const uint16_t version = get_u16(p + 4);
  if (version != kFormatVersion)
    throw IoError(IoErrorKind::BadVersion, path.string(),
                  "unsupported format version " + std::to_string(version));
  const uint16_t rank = get_u16(p + 6);

  std::size_t offset = 8;
  if (n < offset + 8ull * rank)
    throw IoError(IoErrorKind::TruncatedPayload, path.string(), "truncated payload");
  std::vector<std::size_t> shape(rank);
  for (uint16_t i = 0; i < rank; ++i) {
    uint64_t d = get_u64(p + offset);
    if (d > std::numeric_limits<std::size_t>::max())
      throw IoError(IoErrorKind::SizeMismatch, path.string(), "dimension overflow");
    shape[i] = static_cast<std::size_t>(d);
    offset += 8;
  }

  const std::size_t count = shape_numel(shape);
  if (n < offset + 4 * count)
    throw IoError(IoErrorKind::TruncatedPayload, path.string(), "truncated payload");
  if (n > offset + 4 * count)
    throw IoError(IoErrorKind::SizeMismatch, path.string(),
                  "payload longer than declared shape");

  std::vector<float> data(count);
  for (std::size_t i = 0; i < count; ++i) {
    data[i] = get_f32(p + offset);
    offset += 4;
    if (!std::isfinite(data[i]))
      throw IoError(IoErrorKind::NonFiniteEntry, path.string(),
                    "non-finite entry at index " + std::to_string(i));
  }

  Tensor t;
  try {
    t = Tensor(std::move(shape), std::move(data));
  } catch (const std::invalid_argument& e) {
    throw IoError(IoErrorKind::SizeMismatch, path.string(), e.what());
  }
  return t;
}

}  // namespace gramclust
