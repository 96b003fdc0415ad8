#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

namespace gramclust {

/// Dense row-major float32 tensor. The element count always equals the
/// product of the dimensions (1 for rank 0), and every entry is finite after
/// construction from data. Treat instances as immutable once shared across
/// threads; in-place fills go through mutable_data() before publication.
class Tensor {
public:
  /// Empty tensor of shape [0].
  Tensor() : shape_{0} {}

  /// Zero-filled tensor of the given shape.
  explicit Tensor(std::vector<std::size_t> shape);

  /// Takes ownership of data; throws std::invalid_argument on a shape/size
  /// mismatch or any non-finite entry.
  Tensor(std::vector<std::size_t> shape, std::vector<float> data);

  static Tensor scalar(float v) { return Tensor({}, {v}); }

  const std::vector<std::size_t>& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t numel() const { return data_.size(); }

  std::span<const float> data() const { return data_; }
  std::span<float> mutable_data() { return data_; }

  float operator[](std::size_t i) const { return data_[i]; }

  /// Element of a rank-2 tensor.
  float at2(std::size_t r, std::size_t c) const {
    return data_[r * shape_[1] + c];
  }
  float& at2(std::size_t r, std::size_t c) {
    return data_[r * shape_[1] + c];
  }

  bool same_as(const Tensor& other) const;

  /// Throws std::invalid_argument if any entry is NaN or infinite.
  void check_finite() const;

private:
  std::vector<std::size_t> shape_;
  std::vector<float> data_;
};

std::size_t shape_numel(const std::vector<std::size_t>& shape);

/// Write in the GRTN binary format: magic "GRTN", format version u16,
/// rank u16, dims as u64, then the payload as f32. All multi-byte values
/// little-endian. Throws IoError on failure.
void tensor_save(const Tensor& t, const std::filesystem::path& path);

/// Read a GRTN file. Distinct IoError kinds for bad magic, bad version,
/// truncated payload, trailing bytes, and non-finite entries.
Tensor tensor_load(const std::filesystem::path& path);

}  // namespace gramclust
