#pragma once

// Checkpoint file layout, all integers little-endian:
//
//   "SDC1"                magic
//   u32 version           (= 1)
//   u32 tensor_count
//   per tensor:
//     u32 name_len, name bytes
//     u8  dtype           (0 = f32, 1 = f64, 2 = i64)
//     u32 rank, u64 dims[rank]
//     raw element bytes, row-major
//
// The model configuration travels as an i64 tensor named "meta.config".

#include <cstdint>
#include <cstring>
#include <type_traits>
#include <filesystem>
#include <string>
#include <vector>

#include "blockdiff/model.hpp"

namespace blockdiff {

enum class DType : std::uint8_t { f32 = 0, f64 = 1, i64 = 2 };

struct TensorRecord {
  std::string name;
  DType dtype = DType::f32;
  std::vector<std::uint64_t> dims;
  std::vector<std::uint8_t> bytes;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

std::vector<std::uint8_t> encode_tensor_table(const std::vector<TensorRecord>& records);
std::vector<TensorRecord> decode_tensor_table(const std::vector<std::uint8_t>& data);

void write_file_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& data);
std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path);

TensorRecord config_record(const ModelConfig& cfg);
ModelConfig config_from_record(const TensorRecord& rec);

template <typename Scalar>
TensorRecord matrix_record(const std::string& name, const Matrix<Scalar>& m) {
  static_assert(std::is_same_v<Scalar, float> || std::is_same_v<Scalar, double>);
  TensorRecord r;
  r.name = name;
  r.dtype = std::is_same_v<Scalar, float> ? DType::f32 : DType::f64;
  r.dims = {static_cast<std::uint64_t>(m.rows()), static_cast<std::uint64_t>(m.cols())};
  r.bytes.resize(static_cast<std::size_t>(m.size()) * sizeof(Scalar));
  std::memcpy(r.bytes.data(), m.data(), r.bytes.size());
  return r;
}

template <typename Scalar>
Matrix<Scalar> record_matrix(const TensorRecord& r) {
  if (r.dims.size() != 2) throw std::runtime_error("checkpoint: tensor '" + r.name + "' is not rank 2");
  Matrix<Scalar> m(static_cast<Index>(r.dims[0]), static_cast<Index>(r.dims[1]));
  auto fill = [&](auto tag) {
    using Stored = decltype(tag);
    if (r.bytes.size() != static_cast<std::size_t>(m.size()) * sizeof(Stored)) {
      throw std::runtime_error("checkpoint: tensor '" + r.name + "' has wrong byte count");
    }
    const auto* src = reinterpret_cast<const Stored*>(r.bytes.data());
    for (Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<Scalar>(src[i]);
  };
  switch (r.dtype) {
    case DType::f32:
      fill(float{});
      break;
    case DType::f64:
      fill(double{});
      break;
    default:
      throw std::runtime_error("checkpoint: tensor '" + r.name + "' is not floating point");
  }
  return m;
}

template <typename Scalar>
std::vector<std::uint8_t> encode_checkpoint(const Transformer<Scalar>& model) {
  std::vector<TensorRecord> recs;
  recs.push_back(config_record(model.config()));
  for (const auto& [name, m] : model.params()) recs.push_back(matrix_record(name, m));
  return encode_tensor_table(recs);
}

template <typename Scalar>
Transformer<Scalar> decode_checkpoint(const std::vector<std::uint8_t>& data) {
  auto recs = decode_tensor_table(data);
  ModelConfig cfg;
  bool have_cfg = false;
  Parameters<Scalar> params;
  for (const auto& r : recs) {
    if (r.name == "meta.config") {
      cfg = config_from_record(r);
      have_cfg = true;
    } else {
      params.emplace(r.name, record_matrix<Scalar>(r));
    }
  }
  if (!have_cfg) throw std::runtime_error("checkpoint: missing meta.config");
  return Transformer<Scalar>(cfg, std::move(params));
}

template <typename Scalar>
void save_checkpoint(const std::filesystem::path& path, const Transformer<Scalar>& model) {
  write_file_bytes(path, encode_checkpoint(model));
}

template <typename Scalar>
Transformer<Scalar> load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint<Scalar>(read_file_bytes(path));
}

}  // namespace blockdiff
