#include "ptta/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <stdexcept>
#include <unordered_map>
#include <utility>

namespace ptta::ckpt {

namespace {

constexpr char kMagic[4] = {'P', 'T', 'T', 'A'};
constexpr std::uint32_t kFormatVersion = 1;

void write_u32(std::ostream& os, std::uint32_t v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

void write_u64(std::ostream& os, std::uint64_t v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

void write_i32(std::ostream& os, std::int32_t v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

void write_f64(std::ostream& os, double v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

void write_string(std::ostream& os, const std::string& s) {
  write_u32(os, static_cast<std::uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

void read_raw(std::istream& is, void* dst, std::size_t bytes,
              const char* what) {
  is.read(reinterpret_cast<char*>(dst), static_cast<std::streamsize>(bytes));
  if (static_cast<std::size_t>(is.gcount()) != bytes) {
    throw std::runtime_error(std::string("checkpoint: truncated file while reading ") + what);
  }
}

std::uint32_t read_u32(std::istream& is, const char* what) {
  std::uint32_t v = 0;
  read_raw(is, &v, sizeof(v), what);
  return v;
}

std::uint64_t read_u64(std::istream& is, const char* what) {
  std::uint64_t v = 0;
  read_raw(is, &v, sizeof(v), what);
  return v;
}

std::int32_t read_i32(std::istream& is, const char* what) {
  std::int32_t v = 0;
  read_raw(is, &v, sizeof(v), what);
  return v;
}

double read_f64(std::istream& is, const char* what) {
  double v = 0;
  read_raw(is, &v, sizeof(v), what);
  return v;
}

std::string read_string(std::istream& is, const char* what) {
  const std::uint32_t len = read_u32(is, what);
  std::string s(len, '\0');
  if (len > 0) read_raw(is, s.data(), len, what);
  return s;
}

void write_config(std::ostream& os, const model::PromptViTConfig& cfg) {
  write_i32(os, cfg.image_size);
  write_i32(os, cfg.patch_size);
  write_i32(os, cfg.in_chans);
  write_i32(os, cfg.num_layers);
  write_i32(os, cfg.num_stages);
  write_i32(os, cfg.prompts_per_stage);
  write_i32(os, cfg.embed_dim);
  write_i32(os, cfg.num_heads);
  write_f64(os, cfg.mlp_ratio);
  write_i32(os, cfg.num_classes);
}

model::PromptViTConfig read_config(std::istream& is) {
  model::PromptViTConfig cfg;
  cfg.image_size = read_i32(is, "config");
  cfg.patch_size = read_i32(is, "config");
  cfg.in_chans = read_i32(is, "config");
  cfg.num_layers = read_i32(is, "config");
  cfg.num_stages = read_i32(is, "config");
  cfg.prompts_per_stage = read_i32(is, "config");
  cfg.embed_dim = read_i32(is, "config");
  cfg.num_heads = read_i32(is, "config");
  cfg.mlp_ratio = read_f64(is, "config");
  cfg.num_classes = read_i32(is, "config");
  return cfg;
}

}  // namespace

const ad::Tensor& Checkpoint::tensor(const std::string& name) const {
  for (const auto& p : params) {
    if (p.name == name) return p.tensor;
  }
  throw std::out_of_range("checkpoint: no parameter named '" + name + "'");
}

bool Checkpoint::has(const std::string& name) const {
  for (const auto& p : params) {
    if (p.name == name) return true;
  }
  return false;
}

Checkpoint capture(std::string kind, const model::PromptViTConfig& config,
                   std::uint64_t seed, const nn::ParamList& params,
                   std::vector<std::string> domains) {
  Checkpoint c;
  c.kind = std::move(kind);
  c.config = config;
  c.seed = seed;
  c.domains = std::move(domains);
  c.params.reserve(params.size());
  for (const auto& p : params) {
    c.params.push_back({p.name, p.tensor.clone()});
  }
  return c;
}

void save(const Checkpoint& c, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) {
    throw std::runtime_error("checkpoint: cannot open '" + path + "' for writing");
  }
  os.write(kMagic, sizeof(kMagic));
  write_u32(os, kFormatVersion);
  write_string(os, c.kind);
  write_config(os, c.config);
  write_u64(os, c.seed);
  write_u32(os, static_cast<std::uint32_t>(c.domains.size()));
  for (const auto& d : c.domains) write_string(os, d);
  write_u32(os, static_cast<std::uint32_t>(c.params.size()));
  for (const auto& p : c.params) {
    write_string(os, p.name);
    const auto& shape = p.tensor.shape();
    write_u32(os, static_cast<std::uint32_t>(shape.size()));
    for (int d : shape) write_i32(os, d);
    const auto v = p.tensor.data();
    os.write(reinterpret_cast<const char*>(v.data()),
             static_cast<std::streamsize>(sizeof(double) * v.size()));
  }
  os.flush();
  if (!os) {
    throw std::runtime_error("checkpoint: write to '" + path + "' failed");
  }
}

Checkpoint load(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) {
    throw std::runtime_error("checkpoint: cannot open '" + path + "'");
  }
  char magic[4] = {};
  read_raw(is, magic, sizeof(magic), "magic");
  if (std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw std::runtime_error("checkpoint: '" + path + "' is not a checkpoint file");
  }
  const std::uint32_t version = read_u32(is, "version");
  if (version != kFormatVersion) {
    throw std::runtime_error("checkpoint: unsupported format version " +
                             std::to_string(version));
  }
  Checkpoint c;
  c.kind = read_string(is, "kind");
  c.config = read_config(is);
  c.config.validate();
  c.seed = read_u64(is, "seed");
  const std::uint32_t num_domains = read_u32(is, "domain count");
  c.domains.reserve(num_domains);
  for (std::uint32_t i = 0; i < num_domains; ++i) {
    c.domains.push_back(read_string(is, "domain name"));
  }
  const std::uint32_t num_params = read_u32(is, "parameter count");
  c.params.reserve(num_params);
  for (std::uint32_t i = 0; i < num_params; ++i) {
    std::string name = read_string(is, "parameter name");
    const std::uint32_t rank = read_u32(is, "parameter rank");
    if (rank > 8) {
      throw std::runtime_error("checkpoint: implausible rank for '" + name + "'");
    }
    ad::Shape shape(rank);
    std::size_t n = 1;
    for (std::uint32_t a = 0; a < rank; ++a) {
      shape[a] = read_i32(is, "parameter shape");
      if (shape[a] <= 0) {
        throw std::runtime_error("checkpoint: non-positive dimension in '" + name + "'");
      }
      n *= static_cast<std::size_t>(shape[a]);
    }
    ad::Tensor t = ad::Tensor::zeros(shape);
    read_raw(is, t.raw().data(), sizeof(double) * n, name.c_str());
    c.params.push_back({std::move(name), std::move(t)});
  }
  return c;
}

void restore(const Checkpoint& c, const nn::ParamList& dst) {
  std::unordered_map<std::string, const ad::Tensor*> by_name;
  by_name.reserve(c.params.size());
  for (const auto& p : c.params) {
    if (!by_name.emplace(p.name, &p.tensor).second) {
      throw std::runtime_error("checkpoint: duplicate parameter '" + p.name + "'");
    }
  }
  for (const auto& d : dst) {
    auto it = by_name.find(d.name);
    if (it == by_name.end()) {
      throw std::runtime_error("checkpoint: missing parameter '" + d.name + "'");
    }
    const ad::Tensor& src = *it->second;
    if (src.shape() != d.tensor.shape()) {
      throw std::runtime_error("checkpoint: shape mismatch for '" + d.name +
                               "': stored " + ad::shape_str(src.shape()) +
                               ", expected " + ad::shape_str(d.tensor.shape()));
    }
    ad::Tensor target = d.tensor;  // shares the node
    const auto s = src.data();
    std::copy(s.begin(), s.end(), target.raw().begin());
    by_name.erase(it);
  }
  if (!by_name.empty()) {
    throw std::runtime_error("checkpoint: unexpected parameter '" +
                             by_name.begin()->first + "'");
  }
}

}  // namespace ptta::ckpt
