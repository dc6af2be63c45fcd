#include "centerseg/checkpoint.hpp"

#include <bit>
#include <cstring>

#include "centerseg/data.hpp"
#include "centerseg/error.hpp"

namespace centerseg {

static_assert(std::endian::native == std::endian::little,
              "checkpoint serialization assumes a little-endian host");

namespace {

class Writer {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    out.insert(out.end(), b, b + n);
  }
  void u32(std::uint32_t v) { bytes(&v, sizeof v); }
  void u64(std::uint64_t v) { bytes(&v, sizeof v); }
  void tensor(const Shape& shape, std::span<const float> values) {
    u32(static_cast<std::uint32_t>(shape.size()));
    for (std::size_t d : shape) u32(static_cast<std::uint32_t>(d));
    bytes(values.data(), values.size() * sizeof(float));
  }

  std::vector<std::uint8_t> out;
};

class Reader {
 public:
  explicit Reader(const std::vector<std::uint8_t>& in) : in_(in) {}

  void bytes(void* p, std::size_t n) {
    if (in_.size() - pos_ < n) throw IoError("checkpoint is truncated");
    std::memcpy(p, in_.data() + pos_, n);
    pos_ += n;
  }
  std::uint32_t u32() {
    std::uint32_t v;
    bytes(&v, sizeof v);
    return v;
  }
  std::uint64_t u64() {
    std::uint64_t v;
    bytes(&v, sizeof v);
    return v;
  }
  // Reads a tensor whose shape must equal `expected`.
  std::vector<float> tensor(const Shape& expected, const char* what) {
    const std::uint32_t rank = u32();
    if (rank > 8) throw IoError("checkpoint: implausible tensor rank");
    Shape shape(rank);
    for (auto& d : shape) d = u32();
    if (shape != expected) {
      throw ConfigError(std::string("checkpoint: ") + what + " has shape " + to_string(shape) +
                        ", config implies " + to_string(expected));
    }
    std::vector<float> values(element_count(shape));
    bytes(values.data(), values.size() * sizeof(float));
    return values;
  }
  bool done() const { return pos_ == in_.size(); }

 private:
  const std::vector<std::uint8_t>& in_;
  std::size_t pos_ = 0;
};

}  // namespace

std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& c) {
  Writer w;
  w.bytes("CSEG", 4);
  w.u32(kCheckpointVersion);
  const std::string text = c.config.to_text();
  w.u32(static_cast<std::uint32_t>(text.size()));
  w.bytes(text.data(), text.size());
  w.u64(c.epoch);
  w.u64(c.step);
  const auto params = c.backbone.parameters();
  w.u32(static_cast<std::uint32_t>(params.size()));
  for (const auto& p : params) w.tensor(p.shape(), p.data());
  w.tensor(c.bank.prototypes.shape(), c.bank.prototypes.data());
  w.u32(static_cast<std::uint32_t>(c.bank.update_counts.size()));
  for (auto n : c.bank.update_counts) w.u64(n);
  if (c.velocity.size() != params.size()) {
    throw ContractError("serialize_checkpoint: one velocity buffer per parameter expected");
  }
  w.u32(static_cast<std::uint32_t>(c.velocity.size()));
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (c.velocity[i].size() != params[i].numel()) {
      throw ContractError("serialize_checkpoint: velocity buffer size mismatch");
    }
    w.tensor(params[i].shape(), c.velocity[i]);
  }
  return std::move(w.out);
}

Checkpoint deserialize_checkpoint(const std::vector<std::uint8_t>& bytes) {
  Reader r(bytes);
  char magic[4];
  r.bytes(magic, 4);
  if (std::memcmp(magic, "CSEG", 4) != 0) throw IoError("not a checkpoint (bad magic)");
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) {
    throw IoError("unsupported checkpoint version " + std::to_string(version));
  }
  std::string text(r.u32(), '\0');
  r.bytes(text.data(), text.size());

  Checkpoint c;
  c.config = RunConfig::from_text(text);
  c.config.validate();
  c.epoch = r.u64();
  c.step = r.u64();

  // Shapes come from a fresh initialization of the configured architecture.
  c.backbone = init_params<float>(0, c.config.backbone());
  auto params = c.backbone.parameters();
  if (r.u32() != params.size()) throw ConfigError("checkpoint: backbone tensor count mismatch");
  for (auto& p : params) {
    const auto values = r.tensor(p.shape(), "backbone parameter");
    std::copy(values.begin(), values.end(), p.mutable_data().begin());
  }
  const Shape bank_shape{c.config.classes, c.config.prototypes, c.config.feature_dim};
  c.bank.prototypes = Tensor<float>(bank_shape, r.tensor(bank_shape, "prototype bank"));
  c.bank.momentum = static_cast<float>(c.config.momentum);
  const std::uint32_t counts = r.u32();
  if (counts != c.config.classes * c.config.prototypes) {
    throw ConfigError("checkpoint: update count length mismatch");
  }
  c.bank.update_counts.resize(counts);
  for (auto& n : c.bank.update_counts) n = r.u64();
  if (r.u32() != params.size()) throw ConfigError("checkpoint: velocity count mismatch");
  for (const auto& p : params) c.velocity.push_back(r.tensor(p.shape(), "velocity"));
  if (!r.done()) throw IoError("checkpoint has trailing bytes");
  return c;
}

void save_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& path) {
  write_file(path, serialize_checkpoint(checkpoint));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  return deserialize_checkpoint(read_file(path));
}

}  // namespace centerseg
