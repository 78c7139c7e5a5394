#include "ptta/config.hpp"

#include <charconv>
#include <cstdio>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>
#include <stdexcept>

namespace ptta::cfg {

namespace {

std::string trim(const std::string& s) {
  const auto begin = s.find_first_not_of(" \t\r");
  if (begin == std::string::npos) return "";
  const auto end = s.find_last_not_of(" \t\r");
  return s.substr(begin, end - begin + 1);
}

int parse_int(const std::string& v) {
  int out = 0;
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc{} || ptr != v.data() + v.size()) {
    throw std::invalid_argument("expected an integer, got '" + v + "'");
  }
  return out;
}

std::uint64_t parse_u64(const std::string& v) {
  std::uint64_t out = 0;
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc{} || ptr != v.data() + v.size()) {
    throw std::invalid_argument("expected a non-negative integer, got '" + v + "'");
  }
  return out;
}

double parse_double(const std::string& v) {
  if (v.empty()) throw std::invalid_argument("expected a number, got ''");
  std::size_t used = 0;
  double out = 0.0;
  try {
    out = std::stod(v, &used);
  } catch (const std::exception&) {
    throw std::invalid_argument("expected a number, got '" + v + "'");
  }
  if (used != v.size()) {
    throw std::invalid_argument("expected a number, got '" + v + "'");
  }
  return out;
}

bool parse_bool(const std::string& v) {
  if (v == "true") return true;
  if (v == "false") return false;
  throw std::invalid_argument("expected 'true' or 'false', got '" + v + "'");
}

std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::vector<std::string> split_names(const std::string& v) {
  std::vector<std::string> out;
  std::string cur;
  std::stringstream ss(v);
  while (std::getline(ss, cur, ',')) {
    const std::string name = trim(cur);
    if (!name.empty()) out.push_back(name);
  }
  return out;
}

std::string join_names(const std::vector<std::string>& names) {
  std::string out;
  for (std::size_t i = 0; i < names.size(); ++i) {
    if (i) out += ",";
    out += names[i];
  }
  return out;
}

struct Key {
  const char* name;
  std::function<void(ExperimentConfig&, const std::string&)> set;
  std::function<std::string(const ExperimentConfig&)> get;
};

const std::vector<Key>& schema() {
  static const std::vector<Key> keys = {
      {"model.image_size",
       [](ExperimentConfig& c, const std::string& v) { c.model.image_size = parse_int(v); },
       [](const ExperimentConfig& c) { return std::to_string(c.model.image_size); }},
      {"model.patch_size",
       [](ExperimentConfig& c, const std::string& v) { c.model.patch_size = parse_int(v); },
       [](const ExperimentConfig& c) { return std::to_string(c.model.patch_size); }},
      {"model.in_chans",
       [](ExperimentConfig& c, const std::string& v) { c.model.in_chans = parse_int(v); },
       [](const ExperimentConfig& c) { return std::to_string(c.model.in_chans); }},
      {"model.num_layers",
       [](ExperimentConfig& c, const std::string& v) { c.model.num_layers = parse_int(v); },
       [](const ExperimentConfig& c) { return std::to_string(c.model.num_layers); }},
      {"model.prompts_per_stage",
       [](ExperimentConfig& c, const std::string& v) { c.model.prompts_per_stage = parse_int(v); },
       [](const ExperimentConfig& c) { return std::to_string(c.model.prompts_per_stage); }},
      {"model.embed_dim",
       [](ExperimentConfig& c, const std::string& v) { c.model.embed_dim = parse_int(v); },
       [](const ExperimentConfig& c) { return std::to_string(c.model.embed_dim); }},
      {"model.num_heads",
       [](ExperimentConfig& c, const std::string& v) { c.model.num_heads = parse_int(v); },
       [](const ExperimentConfig& c) { return std::to_string(c.model.num_heads); }},
      {"model.mlp_ratio",
       [](ExperimentConfig& c, const std::string& v) { c.model.mlp_ratio = parse_double(v); },
       [](const ExperimentConfig& c) { return format_double(c.model.mlp_ratio); }},
      {"model.num_classes",
       [](ExperimentConfig& c, const std::string& v) { c.model.num_classes = parse_int(v); },
       [](const ExperimentConfig& c) { return std::to_string(c.model.num_classes); }},
      {"variant",
       [](ExperimentConfig& c, const std::string& v) { c.variant = model::variant_from_string(v); },
       [](const ExperimentConfig& c) { return model::variant_to_string(c.variant); }},
      {"adapt.learning_rate",
       [](ExperimentConfig& c, const std::string& v) { c.adaptation.learning_rate = parse_double(v); },
       [](const ExperimentConfig& c) { return format_double(c.adaptation.learning_rate); }},
      {"adapt.momentum",
       [](ExperimentConfig& c, const std::string& v) { c.adaptation.momentum = parse_double(v); },
       [](const ExperimentConfig& c) { return format_double(c.adaptation.momentum); }},
      {"adapt.weight_decay",
       [](ExperimentConfig& c, const std::string& v) { c.adaptation.weight_decay = parse_double(v); },
       [](const ExperimentConfig& c) { return format_double(c.adaptation.weight_decay); }},
      {"adapt.schedule",
       [](ExperimentConfig& c, const std::string& v) { c.adaptation.schedule = adapt::schedule_from_string(v); },
       [](const ExperimentConfig& c) { return adapt::schedule_to_string(c.adaptation.schedule); }},
      {"adapt.batch_size",
       [](ExperimentConfig& c, const std::string& v) { c.adaptation.batch_size = parse_int(v); },
       [](const ExperimentConfig& c) { return std::to_string(c.adaptation.batch_size); }},
      {"adapt.steps",
       [](ExperimentConfig& c, const std::string& v) { c.adaptation.steps = parse_int(v); },
       [](const ExperimentConfig& c) { return std::to_string(c.adaptation.steps); }},
      {"adapt.top_k",
       [](ExperimentConfig& c, const std::string& v) { c.adaptation.top_k = parse_int(v); },
       [](const ExperimentConfig& c) { return std::to_string(c.adaptation.top_k); }},
      {"adapt.bank_capacity",
       [](ExperimentConfig& c, const std::string& v) { c.adaptation.bank_capacity = parse_int(v); },
       [](const ExperimentConfig& c) { return std::to_string(c.adaptation.bank_capacity); }},
      {"adapt.ema_momentum",
       [](ExperimentConfig& c, const std::string& v) { c.adaptation.ema_momentum = parse_double(v); },
       [](const ExperimentConfig& c) { return format_double(c.adaptation.ema_momentum); }},
      {"adapt.alpha",
       [](ExperimentConfig& c, const std::string& v) { c.adaptation.loss_weights.alpha = parse_double(v); },
       [](const ExperimentConfig& c) { return format_double(c.adaptation.loss_weights.alpha); }},
      {"adapt.beta1",
       [](ExperimentConfig& c, const std::string& v) { c.adaptation.loss_weights.beta1 = parse_double(v); },
       [](const ExperimentConfig& c) { return format_double(c.adaptation.loss_weights.beta1); }},
      {"adapt.beta2",
       [](ExperimentConfig& c, const std::string& v) { c.adaptation.loss_weights.beta2 = parse_double(v); },
       [](const ExperimentConfig& c) { return format_double(c.adaptation.loss_weights.beta2); }},
      {"adapt.lambda",
       [](ExperimentConfig& c, const std::string& v) { c.adaptation.loss_weights.lambda = parse_double(v); },
       [](const ExperimentConfig& c) { return format_double(c.adaptation.loss_weights.lambda); }},
      {"adapt.mode",
       [](ExperimentConfig& c, const std::string& v) { c.adaptation.mode = adapt::mode_from_string(v); },
       [](const ExperimentConfig& c) { return adapt::mode_to_string(c.adaptation.mode); }},
      {"adapt.data_ratio",
       [](ExperimentConfig& c, const std::string& v) { c.adaptation.data_ratio = parse_double(v); },
       [](const ExperimentConfig& c) { return format_double(c.adaptation.data_ratio); }},
      {"adapt.use_bank",
       [](ExperimentConfig& c, const std::string& v) { c.adaptation.use_bank = parse_bool(v); },
       [](const ExperimentConfig& c) { return c.adaptation.use_bank ? "true" : "false"; }},
      {"adapt.proj_dim",
       [](ExperimentConfig& c, const std::string& v) { c.adaptation.proj_dim = parse_int(v); },
       [](const ExperimentConfig& c) { return std::to_string(c.adaptation.proj_dim); }},
      {"adapt.eval_interval",
       [](ExperimentConfig& c, const std::string& v) { c.adaptation.eval_interval = parse_int(v); },
       [](const ExperimentConfig& c) { return std::to_string(c.adaptation.eval_interval); }},
      {"adapt.eval_subset",
       [](ExperimentConfig& c, const std::string& v) { c.adaptation.eval_subset = parse_int(v); },
       [](const ExperimentConfig& c) { return std::to_string(c.adaptation.eval_subset); }},
      {"data.base",
       [](ExperimentConfig& c, const std::string& v) { c.data.base = data::base_from_string(v); },
       [](const ExperimentConfig& c) { return data::base_to_string(c.data.base); }},
      {"data.shift",
       [](ExperimentConfig& c, const std::string& v) { c.data.shift = data::shift_from_string(v); },
       [](const ExperimentConfig& c) { return data::shift_to_string(c.data.shift); }},
      {"data.severity",
       [](ExperimentConfig& c, const std::string& v) { c.data.severity = parse_double(v); },
       [](const ExperimentConfig& c) { return format_double(c.data.severity); }},
      {"data.per_class",
       [](ExperimentConfig& c, const std::string& v) { c.data.per_class_count = parse_int(v); },
       [](const ExperimentConfig& c) { return std::to_string(c.data.per_class_count); }},
      {"multi.domains",
       [](ExperimentConfig& c, const std::string& v) { c.multi_domains = split_names(v); },
       [](const ExperimentConfig& c) { return join_names(c.multi_domains); }},
      {"multi.domain_prompts",
       [](ExperimentConfig& c, const std::string& v) { c.multi_domain_prompts = parse_int(v); },
       [](const ExperimentConfig& c) { return std::to_string(c.multi_domain_prompts); }},
      {"checkpoint",
       [](ExperimentConfig& c, const std::string& v) { c.checkpoint = v; },
       [](const ExperimentConfig& c) { return c.checkpoint; }},
      {"output_dir",
       [](ExperimentConfig& c, const std::string& v) { c.output_dir = v; },
       [](const ExperimentConfig& c) { return c.output_dir; }},
      {"seed",
       [](ExperimentConfig& c, const std::string& v) { c.seed = parse_u64(v); },
       [](const ExperimentConfig& c) { return std::to_string(c.seed); }},
  };
  return keys;
}

const Key* find_key(const std::string& name) {
  for (const auto& k : schema()) {
    if (name == k.name) return &k;
  }
  return nullptr;
}

}  // namespace

void ExperimentConfig::finalize() {
  model.num_stages = model::stages_for_variant(variant, model.num_layers);
  data.classes = model.num_classes;
  data.image_size = model.image_size;
  data.seed = seed;
  adaptation.seed = seed;
  if (output_dir.empty()) {
    throw std::invalid_argument("config: output_dir must not be empty");
  }
  if (multi_domain_prompts < 0) {
    throw std::invalid_argument("config: multi.domain_prompts must be >= 0");
  }
  model.validate();
  adaptation.validate();
  data.validate();
}

ExperimentConfig parse_config_text(const std::string& text,
                                   const std::string& origin) {
  ExperimentConfig c;
  std::set<std::string> seen;
  std::stringstream ss(text);
  std::string raw;
  int line = 0;
  while (std::getline(ss, raw)) {
    ++line;
    const auto where = [&] { return origin + ":" + std::to_string(line) + ": "; };
    std::string s = raw;
    if (const auto hash = s.find('#'); hash != std::string::npos) {
      s = s.substr(0, hash);
    }
    s = trim(s);
    if (s.empty()) continue;
    const auto eq = s.find('=');
    if (eq == std::string::npos) {
      throw std::runtime_error(where() + "expected 'key = value'");
    }
    const std::string key = trim(s.substr(0, eq));
    const std::string value = trim(s.substr(eq + 1));
    if (key.empty()) {
      throw std::runtime_error(where() + "missing key before '='");
    }
    const Key* handler = find_key(key);
    if (!handler) {
      throw std::runtime_error(where() + "unknown key '" + key + "'");
    }
    if (!seen.insert(key).second) {
      throw std::runtime_error(where() + "duplicate key '" + key + "'");
    }
    try {
      handler->set(c, value);
    } catch (const std::exception& e) {
      throw std::runtime_error(where() + "key '" + key + "': " + e.what());
    }
  }
  try {
    c.finalize();
  } catch (const std::exception& e) {
    throw std::runtime_error(origin + ": " + e.what());
  }
  return c;
}

ExperimentConfig load_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) {
    throw std::runtime_error("config: cannot open '" + path + "'");
  }
  std::stringstream buf;
  buf << is.rdbuf();
  return parse_config_text(buf.str(), path);
}

std::string to_text(const ExperimentConfig& c) {
  std::string out;
  for (const auto& k : schema()) {
    out += k.name;
    out += " = ";
    out += k.get(c);
    out += "\n";
  }
  return out;
}

void save_config(const ExperimentConfig& c, const std::string& path) {
  std::ofstream os(path);
  if (!os) {
    throw std::runtime_error("config: cannot open '" + path + "' for writing");
  }
  os << to_text(c);
  if (!os.flush()) {
    throw std::runtime_error("config: write to '" + path + "' failed");
  }
}

}  // namespace ptta::cfg
