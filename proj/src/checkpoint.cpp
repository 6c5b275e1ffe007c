#include "blockdiff/checkpoint.hpp"

#include <bit>
#include <fstream>
#include <stdexcept>

namespace blockdiff {

static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O writes native bytes and assumes a little-endian host");

namespace {

constexpr char kMagic[4] = {'S', 'D', 'C', '1'};

class Writer {
 public:
  explicit Writer(std::vector<std::uint8_t>& out) : out_(out) {}
  template <typename T>
  void put(T v) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
    out_.insert(out_.end(), p, p + sizeof(T));
  }
  void bytes(const void* data, std::size_t n) {
    const auto* p = static_cast<const std::uint8_t*>(data);
    out_.insert(out_.end(), p, p + n);
  }

 private:
  std::vector<std::uint8_t>& out_;
};

class Reader {
 public:
  explicit Reader(const std::vector<std::uint8_t>& in) : in_(in) {}
  template <typename T>
  T get() {
    T v;
    std::memcpy(&v, take(sizeof(T)), sizeof(T));
    return v;
  }
  const std::uint8_t* take(std::size_t n) {
    if (n > in_.size() - pos_) throw std::runtime_error("checkpoint: truncated file");
    const std::uint8_t* p = in_.data() + pos_;
    pos_ += n;
    return p;
  }
  bool done() const { return pos_ == in_.size(); }

 private:
  const std::vector<std::uint8_t>& in_;
  std::size_t pos_ = 0;
};

std::size_t dtype_size(DType t) {
  switch (t) {
    case DType::f32:
      return 4;
    case DType::f64:
    case DType::i64:
      return 8;
  }
  throw std::runtime_error("checkpoint: unknown dtype tag");
}

}  // namespace

std::vector<std::uint8_t> encode_tensor_table(const std::vector<TensorRecord>& records) {
  std::vector<std::uint8_t> out;
  Writer w(out);
  w.bytes(kMagic, 4);
  w.put<std::uint32_t>(kCheckpointVersion);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(records.size()));
  for (const auto& r : records) {
    std::uint64_t count = 1;
    for (auto d : r.dims) count *= d;
    if (count * dtype_size(r.dtype) != r.bytes.size()) {
      throw std::invalid_argument("checkpoint: tensor '" + r.name + "' byte count does not match dims");
    }
    w.put<std::uint32_t>(static_cast<std::uint32_t>(r.name.size()));
    w.bytes(r.name.data(), r.name.size());
    w.put<std::uint8_t>(static_cast<std::uint8_t>(r.dtype));
    w.put<std::uint32_t>(static_cast<std::uint32_t>(r.dims.size()));
    for (auto d : r.dims) w.put<std::uint64_t>(d);
    w.bytes(r.bytes.data(), r.bytes.size());
  }
  return out;
}

std::vector<TensorRecord> decode_tensor_table(const std::vector<std::uint8_t>& data) {
  Reader rd(data);
  if (std::memcmp(rd.take(4), kMagic, 4) != 0) throw std::runtime_error("checkpoint: bad magic");
  const auto version = rd.get<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version));
  }
  const auto n = rd.get<std::uint32_t>();
  std::vector<TensorRecord> out;
  out.reserve(n);
  for (std::uint32_t i = 0; i < n; ++i) {
    TensorRecord r;
    const auto len = rd.get<std::uint32_t>();
    const auto* name = rd.take(len);
    r.name.assign(reinterpret_cast<const char*>(name), len);
    const auto tag = rd.get<std::uint8_t>();
    if (tag > 2) throw std::runtime_error("checkpoint: unknown dtype tag " + std::to_string(tag));
    r.dtype = static_cast<DType>(tag);
    const auto rank = rd.get<std::uint32_t>();
    std::uint64_t count = 1;
    for (std::uint32_t k = 0; k < rank; ++k) {
      r.dims.push_back(rd.get<std::uint64_t>());
      count *= r.dims.back();
    }
    const std::size_t nbytes = count * dtype_size(r.dtype);
    const auto* p = rd.take(nbytes);
    r.bytes.assign(p, p + nbytes);
    out.push_back(std::move(r));
  }
  if (!rd.done()) throw std::runtime_error("checkpoint: trailing bytes");
  return out;
}

void write_file_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& data) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot open '" + path.string() + "' for writing");
  os.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size()));
  if (!os) throw std::runtime_error("write failed for '" + path.string() + "'");
}

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open '" + path.string() + "'");
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

TensorRecord config_record(const ModelConfig& cfg) {
  const std::vector<std::int64_t> v = {
      cfg.vocab_size, cfg.d_model, cfg.n_layers, cfg.n_heads, cfg.d_ff, cfg.max_len,
      cfg.parametrization == Parametrization::shifted ? 1 : 0, cfg.mask_id,
      std::bit_cast<std::int64_t>(cfg.init_std)};
  TensorRecord r;
  r.name = "meta.config";
  r.dtype = DType::i64;
  r.dims = {v.size()};
  r.bytes.resize(v.size() * 8);
  std::memcpy(r.bytes.data(), v.data(), r.bytes.size());
  return r;
}

ModelConfig config_from_record(const TensorRecord& r) {
  if (r.dtype != DType::i64 || r.dims.size() != 1 || r.dims[0] != 9) {
    throw std::runtime_error("checkpoint: malformed meta.config");
  }
  std::int64_t v[9];
  std::memcpy(v, r.bytes.data(), sizeof(v));
  ModelConfig cfg;
  cfg.vocab_size = static_cast<int>(v[0]);
  cfg.d_model = static_cast<int>(v[1]);
  cfg.n_layers = static_cast<int>(v[2]);
  cfg.n_heads = static_cast<int>(v[3]);
  cfg.d_ff = static_cast<int>(v[4]);
  cfg.max_len = static_cast<int>(v[5]);
  cfg.parametrization = v[6] ? Parametrization::shifted : Parametrization::unshifted;
  cfg.mask_id = static_cast<int>(v[7]);
  cfg.init_std = std::bit_cast<double>(v[8]);
  return cfg;
}

}  // namespace blockdiff
