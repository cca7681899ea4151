#include "dlcl/checkpoint.hpp"

#include <openssl/sha.h>

#include <bit>
#include <cstring>
#include <fstream>

#include "dlcl/error.hpp"

namespace dlcl::train {

ConfigHash config_hash(const model::ModelConfig& cfg) {
  const std::string text = cfg.canonical();
  ConfigHash h{};
  SHA256(reinterpret_cast<const unsigned char*>(text.data()), text.size(), h.data());
  return h;
}

std::string hex(const ConfigHash& h) {
  static constexpr char digits[] = "0123456789abcdef";
  std::string out;
  for (auto b : h) {
    out += digits[b >> 4];
    out += digits[b & 15];
  }
  return out;
}

const Tensor* Checkpoint::find(const std::string& name) const {
  for (const auto& [n, t] : entries) {
    if (n == name) return &t;
  }
  return nullptr;
}

Checkpoint capture(const model::Transformer& model, std::uint64_t step) {
  Checkpoint c;
  c.step = step;
  c.hash = config_hash(model.config());
  for (const auto& p : model.parameters()) c.entries.emplace_back(p->name, p->value.detach());
  return c;
}

void restore(model::Transformer& model, const Checkpoint& ckpt) {
  if (ckpt.hash != config_hash(model.config())) {
    throw ConfigError("checkpoint config hash " + hex(ckpt.hash) + " does not match model " +
                      hex(config_hash(model.config())));
  }
  if (ckpt.entries.size() != model.parameters().size()) {
    throw IoError("checkpoint has " + std::to_string(ckpt.entries.size()) + " arrays, model has " +
                  std::to_string(model.parameters().size()));
  }
  for (const auto& [name, t] : ckpt.entries) {
    Parameter* p = model.parameters().find(name);
    if (!p) throw IoError("checkpoint array '" + name + "' has no model parameter");
    if (p->value.shape() != t.shape()) {
      throw ShapeError("checkpoint array '" + name + "' has shape " + shape_string(t.shape()) +
                       ", parameter has " + shape_string(p->value.shape()));
    }
    p->value = t.detach();
  }
}

namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes little-endian");

template <class T>
void put(std::ostream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <class T>
T get(std::istream& in, const std::string& what) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof v);
  if (!in) throw IoError("truncated checkpoint while reading " + what);
  return v;
}

void put_entry(std::ostream& out, const std::string& name, const Tensor& t) {
  put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
  out.write(name.data(), static_cast<std::streamsize>(name.size()));
  put<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
  for (auto d : t.shape()) put<std::uint64_t>(out, d);
  out.write(reinterpret_cast<const char*>(t.data().data()),
            static_cast<std::streamsize>(t.numel() * sizeof(double)));
}

}  // namespace

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out.write("DLCL", 4);
  put<std::uint16_t>(out, kCheckpointVersion);
  out.write(reinterpret_cast<const char*>(ckpt.hash.data()), 32);
  put<std::uint64_t>(out, ckpt.entries.size() + 1);
  put_entry(out, kStepEntry, Tensor::scalar(static_cast<double>(ckpt.step)));
  for (const auto& [name, t] : ckpt.entries) put_entry(out, name, t);
  if (!out) throw IoError("write failed for '" + path.string() + "'");
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint '" + path.string() + "'");
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, "DLCL", 4) != 0) {
    throw IoError("'" + path.string() + "' is not a checkpoint (bad magic)");
  }
  const auto version = get<std::uint16_t>(in, "version");
  if (version != kCheckpointVersion) {
    throw IoError("unsupported checkpoint version " + std::to_string(version));
  }
  Checkpoint c;
  in.read(reinterpret_cast<char*>(c.hash.data()), 32);
  if (!in) throw IoError("truncated checkpoint while reading config hash");
  const auto count = get<std::uint64_t>(in, "entry count");
  bool have_step = false;
  for (std::uint64_t i = 0; i < count; ++i) {
    const auto len = get<std::uint32_t>(in, "name length");
    if (len > 4096) throw IoError("implausible entry name length " + std::to_string(len));
    std::string name(len, '\0');
    in.read(name.data(), len);
    const auto rank = get<std::uint32_t>(in, "rank of '" + name + "'");
    if (rank > 8) throw IoError("implausible rank for '" + name + "'");
    Shape shape;
    for (std::uint32_t r = 0; r < rank; ++r) shape.push_back(get<std::uint64_t>(in, "dims of '" + name + "'"));
    if (shape_numel(shape) > (std::size_t{1} << 32)) throw IoError("implausible size for '" + name + "'");
    std::vector<double> data(shape_numel(shape));
    in.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(data.size() * sizeof(double)));
    if (!in) throw IoError("truncated payload for '" + name + "'");
    if (name == kStepEntry) {
      c.step = static_cast<std::uint64_t>(data[0]);
      have_step = true;
      continue;
    }
    c.entries.emplace_back(std::move(name), Tensor(std::move(shape), std::move(data)));
  }
  if (!have_step) throw IoError("checkpoint lacks the '" + std::string(kStepEntry) + "' entry");
  return c;
}

Checkpoint average_checkpoints(const std::vector<Checkpoint>& ckpts) {
  if (ckpts.empty()) throw Error("average_checkpoints: nothing to average");
  Checkpoint out;
  out.hash = ckpts[0].hash;
  for (const auto& c : ckpts) {
    if (c.hash != out.hash) throw ConfigError("average_checkpoints: config hash mismatch");
    out.step = std::max(out.step, c.step);
  }
  for (const auto& [name, first] : ckpts[0].entries) {
    // Running mean: exact for identical inputs and for +p/-p pairs.
    std::vector<double> acc(first.numel(), 0.0);
    double seen = 0.0;
    for (const auto& c : ckpts) {
      const Tensor* t = c.find(name);
      if (!t) throw IoError("average_checkpoints: array '" + name + "' missing from a checkpoint");
      if (t->shape() != first.shape()) throw ShapeError("average_checkpoints: shape mismatch for '" + name + "'");
      seen += 1.0;
      for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += ((*t)[i] - acc[i]) / seen;
    }
    out.entries.emplace_back(name, Tensor(first.shape(), std::move(acc)));
  }
  for (const auto& c : ckpts) {
    if (c.entries.size() != out.entries.size()) {
      throw IoError("average_checkpoints: checkpoints hold different array sets");
    }
  }
  return out;
}

Checkpoint average_checkpoints(const std::vector<std::filesystem::path>& paths) {
  std::vector<Checkpoint> ckpts;
  for (const auto& p : paths) ckpts.push_back(load_checkpoint(p));
  return average_checkpoints(ckpts);
}

}  // namespace dlcl::train
