#include "lmrl/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "lmrl/error.hpp"

namespace lmrl {

static_assert(std::endian::native == std::endian::little, "checkpoint payloads assume a little-endian host");

namespace {

constexpr char kMagic[8] = {'L', 'M', 'R', 'L', 'C', 'K', 'P', 'T'};

template <typename T>
void write_le(std::ostream& os, T value) {
  os.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T read_le(std::istream& is, const std::filesystem::path& path) {
  T value{};
  if (!is.read(reinterpret_cast<char*>(&value), sizeof(T))) fail(ErrorKind::format, "truncated checkpoint " + path.string());
  return value;
}

}  // namespace

const Tensor& Checkpoint::tensor(const std::string& name) const {
  for (const auto& t : tensors) {
    if (t.name == name) return t.value;
  }
  fail(ErrorKind::format, "checkpoint has no tensor '" + name + "'");
}

bool Checkpoint::has_tensor(const std::string& name) const {
  for (const auto& t : tensors) {
    if (t.name == name) return true;
  }
  return false;
}

nlohmann::json to_json(const TransformerConfig& c) {
  return {{"model_dim", c.model_dim},     {"num_heads", c.num_heads},   {"num_layers", c.num_layers},
          {"max_positions", c.max_positions}, {"vocab_size", c.vocab_size}, {"dropout", c.dropout},
          {"activation", std::string(to_string(c.activation))}};
}

TransformerConfig transformer_config_from_json(const nlohmann::json& j) {
  TransformerConfig c;
  try {
    c.model_dim = j.at("model_dim").get<int>();
    c.num_heads = j.at("num_heads").get<int>();
    c.num_layers = j.at("num_layers").get<int>();
    c.max_positions = j.at("max_positions").get<int>();
    c.vocab_size = j.at("vocab_size").get<int>();
    c.dropout = j.at("dropout").get<float>();
    c.activation = parse_activation(j.at("activation").get<std::string>());
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::format, std::string("malformed transformer config: ") + e.what());
  }
  c.validate();
  return c;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  std::vector<NamedTensor> all = ckpt.tensors;
  if (ckpt.optimizer) {
    for (const auto& m : ckpt.optimizer->moments) {
      const int n = static_cast<int>(m.first.size());
      all.push_back({"optimizer.m." + m.name, Tensor({n}, m.first)});
      all.push_back({"optimizer.v." + m.name, Tensor({n}, m.second)});
    }
  }

  nlohmann::json directory = nlohmann::json::array();
  std::size_t offset = 0;
  for (const auto& t : all) {
    directory.push_back({{"name", t.name}, {"shape", t.value.shape()}, {"offset", offset}});
    offset += t.value.size();
  }
  nlohmann::json header = {{"kind", ckpt.kind},
                           {"config", to_json(ckpt.config)},
                           {"meta", ckpt.meta},
                           {"step", ckpt.step},
                           {"rng_state", ckpt.rng_state},
                           {"tensors", directory}};
  if (ckpt.optimizer) {
    nlohmann::json names = nlohmann::json::array();
    for (const auto& m : ckpt.optimizer->moments) names.push_back(m.name);
    header["optimizer"] = {{"steps_taken", ckpt.optimizer->steps_taken}, {"parameters", names}};
  }
  const std::string text = header.dump();

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) fail(ErrorKind::io, "cannot open " + path.string() + " for writing");
  os.write(kMagic, sizeof(kMagic));
  write_le<std::uint32_t>(os, Checkpoint::kVersion);
  write_le<std::uint64_t>(os, text.size());
  os.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& t : all) {
    const auto d = t.value.data();
    os.write(reinterpret_cast<const char*>(d.data()), static_cast<std::streamsize>(d.size() * sizeof(float)));
  }
  if (!os) fail(ErrorKind::io, "failed writing " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) fail(ErrorKind::io, "cannot open checkpoint " + path.string());
  char magic[8];
  if (!is.read(magic, sizeof(magic)) || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    fail(ErrorKind::format, path.string() + " is not a checkpoint (bad magic)");
  }
  const auto version = read_le<std::uint32_t>(is, path);
  if (version != Checkpoint::kVersion) {
    fail(ErrorKind::format, "checkpoint version " + std::to_string(version) + " is not supported (expected " +
                                std::to_string(Checkpoint::kVersion) + ")");
  }
  const auto header_len = read_le<std::uint64_t>(is, path);
  std::string text(header_len, '\0');
  if (!is.read(text.data(), static_cast<std::streamsize>(header_len))) fail(ErrorKind::format, "truncated header in " + path.string());

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::format, "bad checkpoint header in " + path.string() + ": " + e.what());
  }

  Checkpoint ckpt;
  std::vector<float> payload;
  {
    const auto start = is.tellg();
    is.seekg(0, std::ios::end);
    const auto end = is.tellg();
    is.seekg(start);
    const auto bytes = static_cast<std::size_t>(end - start);
    if (bytes % sizeof(float) != 0) fail(ErrorKind::format, "payload of " + path.string() + " is not float aligned");
    payload.resize(bytes / sizeof(float));
    is.read(reinterpret_cast<char*>(payload.data()), static_cast<std::streamsize>(bytes));
  }

  try {
    ckpt.kind = header.at("kind").get<std::string>();
    ckpt.config = transformer_config_from_json(header.at("config"));
    ckpt.meta = header.at("meta");
    ckpt.step = header.at("step").get<long>();
    ckpt.rng_state = header.at("rng_state").get<std::string>();
    std::vector<NamedTensor> all;
    for (const auto& entry : header.at("tensors")) {
      Shape shape = entry.at("shape").get<Shape>();
      const auto offset = entry.at("offset").get<std::size_t>();
      const auto n = shape_size(shape);
      if (offset + n > payload.size()) fail(ErrorKind::format, "tensor directory overruns payload in " + path.string());
      all.push_back({entry.at("name").get<std::string>(),
                     Tensor(std::move(shape), std::vector<float>(payload.begin() + static_cast<std::ptrdiff_t>(offset),
                                                                  payload.begin() + static_cast<std::ptrdiff_t>(offset + n)))});
    }
    if (header.contains("optimizer")) {
      OptimizerSnapshot snap;
      snap.steps_taken = header["optimizer"].at("steps_taken").get<long>();
      for (const auto& name : header["optimizer"].at("parameters")) {
        const auto key = name.get<std::string>();
        AdamW::Moments m;
        m.name = key;
        for (const auto& t : all) {
          if (t.name == "optimizer.m." + key) m.first.assign(t.value.data().begin(), t.value.data().end());
          if (t.name == "optimizer.v." + key) m.second.assign(t.value.data().begin(), t.value.data().end());
        }
        snap.moments.push_back(std::move(m));
      }
      ckpt.optimizer = std::move(snap);
    }
    for (auto& t : all) {
      if (t.name.rfind("optimizer.", 0) != 0) ckpt.tensors.push_back(std::move(t));
    }
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::format, "malformed checkpoint header in " + path.string() + ": " + e.what());
  }
  return ckpt;
}

void copy_tensors_from(const Checkpoint& checkpoint, std::vector<NamedTensor>& dst, const std::string& prefix) {
  for (auto& t : dst) {
    const Tensor& src = checkpoint.tensor(prefix + t.name);
    if (src.shape() != t.value.shape()) {
      fail(ErrorKind::format, "tensor '" + prefix + t.name + "' has shape " + shape_string(src.shape()) +
                                  " in checkpoint but " + shape_string(t.value.shape()) + " in model");
    }
    auto out = t.value.data();
    const auto in = src.data();
    std::copy(in.begin(), in.end(), out.begin());
  }
}

std::vector<NamedTensor> snapshot_tensors(const std::vector<NamedTensor>& src, const std::string& prefix) {
  std::vector<NamedTensor> out;
  out.reserve(src.size());
  for (const auto& t : src) out.push_back({prefix + t.name, t.value.clone()});
  return out;
}

std::string serialize_rng(const std::mt19937_64& rng) {
  std::ostringstream os;
  os << rng;
  return os.str();
}

void deserialize_rng(const std::string& state, std::mt19937_64& rng) {
  if (state.empty()) return;
  std::istringstream is(state);
  is >> rng;
  if (!is) fail(ErrorKind::format, "malformed RNG state");
}

}  // namespace lmrl
