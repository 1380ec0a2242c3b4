#pragma once

#include <cstdint>
#include <cstdio>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "seqdet/common.hpp"
#include "seqdet/objectives.hpp"
#include "seqdet/seqops.hpp"

namespace seqdet {

// Every architecture, ablation, and optimization knob in one flat structure,
// read and written as `key = value` lines.
struct ModelConfig {
  // architecture
  std::size_t classes = 8;
  std::size_t img_size = 32;
  std::size_t img_channels = 3;
  std::size_t width1 = 8;
  std::size_t width2 = 16;  // model dim
  std::size_t enc_blocks = 2;
  std::size_t dec_blocks = 2;
  std::size_t heads = 4;
  std::size_t vae_w1 = 8, vae_w2 = 16, vae_w3 = 32;

  // ablation toggles
  bool dpda = false;
  bool msca = false;
  bool sgm = false;
  bool sgm_offsets = true;  // read only when sgm is on
  bool smcl = false;
  bool adaptive_alpha = true;  // read only when dpda is on

  // sequence order used for training and decoding
  std::string order = "forward";  // forward | inverted | mixed
  std::size_t mixed_keep = 3;

  // loss weights
  double lambda_rec = 0.1;
  double lambda_kld = 0.01;
  double lambda_smcl = 0.01;
  double tau = 0.1;

  // optimization
  double lr_cnn = 1e-3;
  double lr_transformer = 3e-4;
  double weight_decay = 1e-4;
  std::size_t batch_size = 32;
  std::size_t epochs = 30;
  std::size_t warmup_epochs = 4;
  std::size_t decay_every = 9;
  double decay_factor = 0.9;
  std::uint64_t seed = 1;
  std::size_t threads = 1;  // >1 opts into the nondeterministic parallel mode

  OrderSpec order_spec() const {
    OrderSpec s;
    if (order == "forward")
      s.mode = OrderMode::Forward;
    else if (order == "inverted")
      s.mode = OrderMode::Inverted;
    else if (order == "mixed")
      s.mode = OrderMode::Mixed;
    else
      throw ContractError("unknown order mode '" + order + "'");
    s.keep = mixed_keep;
    return s;
  }

  void validate() const {
    if (classes == 0) throw ContractError("need at least one class");
    if (img_size % 8 != 0)
      throw ContractError("image size must be divisible by 8");
    if (width2 % heads != 0)
      throw ContractError("model dim must be divisible by the head count");
    if (sgm && !msca)
      throw ContractError(
          "shape-prior bias requires the multi-source decoder");
    if (mixed_keep > kMaxSeqLen)
      throw ContractError("mixed split exceeds the padded length");
    order_spec();  // validates the order string
    if (batch_size == 0 || epochs == 0)
      throw ContractError("batch size and epochs must be positive");
    if (threads == 0) throw ContractError("thread count must be positive");
  }
};

namespace detail {

inline std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string trim(const std::string& s) {
  std::size_t a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  std::size_t b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

struct ConfigField {
  std::function<std::string(const ModelConfig&)> get;
  std::function<void(ModelConfig&, const std::string&)> set;
};

inline std::uint64_t parse_u64(const std::string& v) {
  std::size_t used = 0;
  unsigned long long r = std::stoull(v, &used);
  if (used != v.size()) throw ContractError("bad integer '" + v + "'");
  return r;
}

inline double parse_f64(const std::string& v) {
  std::size_t used = 0;
  double r = std::stod(v, &used);
  if (used != v.size()) throw ContractError("bad number '" + v + "'");
  return r;
}

inline bool parse_bool(const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ContractError("bad boolean '" + v + "'");
}

// Canonical field order; serialization always emits every key in this order.
inline const std::vector<std::pair<std::string, ConfigField>>&
config_fields() {
  auto u = [](std::size_t ModelConfig::* p) {
    return ConfigField{
        [p](const ModelConfig& c) { return std::to_string(c.*p); },
        [p](ModelConfig& c, const std::string& v) {
          c.*p = std::size_t(parse_u64(v));
        }};
  };
  auto b = [](bool ModelConfig::* p) {
    return ConfigField{
        [p](const ModelConfig& c) { return c.*p ? "true" : "false"; },
        [p](ModelConfig& c, const std::string& v) { c.*p = parse_bool(v); }};
  };
  auto d = [](double ModelConfig::* p) {
    return ConfigField{
        [p](const ModelConfig& c) { return fmt_double(c.*p); },
        [p](ModelConfig& c, const std::string& v) { c.*p = parse_f64(v); }};
  };
  static const std::vector<std::pair<std::string, ConfigField>> fields = {
      {"classes", u(&ModelConfig::classes)},
      {"img_size", u(&ModelConfig::img_size)},
      {"img_channels", u(&ModelConfig::img_channels)},
      {"width1", u(&ModelConfig::width1)},
      {"width2", u(&ModelConfig::width2)},
      {"enc_blocks", u(&ModelConfig::enc_blocks)},
      {"dec_blocks", u(&ModelConfig::dec_blocks)},
      {"heads", u(&ModelConfig::heads)},
      {"vae_w1", u(&ModelConfig::vae_w1)},
      {"vae_w2", u(&ModelConfig::vae_w2)},
      {"vae_w3", u(&ModelConfig::vae_w3)},
      {"dpda", b(&ModelConfig::dpda)},
      {"msca", b(&ModelConfig::msca)},
      {"sgm", b(&ModelConfig::sgm)},
      {"sgm_offsets", b(&ModelConfig::sgm_offsets)},
      {"smcl", b(&ModelConfig::smcl)},
      {"adaptive_alpha", b(&ModelConfig::adaptive_alpha)},
      {"order",
       {[](const ModelConfig& c) { return c.order; },
        [](ModelConfig& c, const std::string& v) { c.order = v; }}},
      {"mixed_keep", u(&ModelConfig::mixed_keep)},
      {"lambda_rec", d(&ModelConfig::lambda_rec)},
      {"lambda_kld", d(&ModelConfig::lambda_kld)},
      {"lambda_smcl", d(&ModelConfig::lambda_smcl)},
      {"tau", d(&ModelConfig::tau)},
      {"lr_cnn", d(&ModelConfig::lr_cnn)},
      {"lr_transformer", d(&ModelConfig::lr_transformer)},
      {"weight_decay", d(&ModelConfig::weight_decay)},
      {"batch_size", u(&ModelConfig::batch_size)},
      {"epochs", u(&ModelConfig::epochs)},
      {"warmup_epochs", u(&ModelConfig::warmup_epochs)},
      {"decay_every", u(&ModelConfig::decay_every)},
      {"decay_factor", d(&ModelConfig::decay_factor)},
      {"seed",
       {[](const ModelConfig& c) { return std::to_string(c.seed); },
        [](ModelConfig& c, const std::string& v) { c.seed = parse_u64(v); }}},
      {"threads", u(&ModelConfig::threads)},
  };
  return fields;
}

}  // namespace detail

inline std::string serialize_config(const ModelConfig& cfg) {
  std::ostringstream out;
  for (const auto& [key, field] : detail::config_fields())
    out << key << " = " << field.get(cfg) << "\n";
  return out.str();
}

// Sets one field by key name; unknown keys raise IoError.
inline void set_config_value(ModelConfig& cfg, const std::string& key,
                             const std::string& value) {
  for (const auto& [k, field] : detail::config_fields())
    if (k == key) {
      field.set(cfg, value);
      return;
    }
  throw IoError("unknown config key '" + key + "'");
}

// Applies `key = value` lines (with # comments) onto defaults.
inline ModelConfig parse_config(const std::string& text) {
  std::map<std::string, const detail::ConfigField*> by_key;
  for (const auto& [key, field] : detail::config_fields())
    by_key[key] = &field;

  ModelConfig cfg;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    auto eq = line.find('=');
    if (eq == std::string::npos)
      throw IoError("config line " + std::to_string(lineno) +
                    ": expected 'key = value'");
    auto key = detail::trim(line.substr(0, eq));
    auto value = detail::trim(line.substr(eq + 1));
    auto it = by_key.find(key);
    if (it == by_key.end())
      throw IoError("config line " + std::to_string(lineno) +
                    ": unknown key '" + key + "'");
    try {
      it->second->set(cfg, value);
    } catch (const Error& e) {
      throw IoError("config line " + std::to_string(lineno) + ": " +
                    e.what());
    }
  }
  return cfg;
}

}  // namespace seqdet
