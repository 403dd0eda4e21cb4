#pragma once

// Flat key=value run configuration. Every key has a registered default;
// files and command-line overrides may only set known keys. The resolved
// configuration converts into the typed configs of the other modules.

#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "dataset.hpp"
#include "events.hpp"
#include "model.hpp"
#include "synthgen.hpp"

namespace s3ce {

class ConfigError : public std::invalid_argument {
public:
  using std::invalid_argument::invalid_argument;
};

struct ConfigKey {
  std::string name;
  std::string default_value;
  std::string help;
};

inline const std::vector<ConfigKey>& config_keys() {
  static const std::vector<ConfigKey> keys = {
      {"seed", "0", "master seed; every random stream derives from it"},
      {"model.T", "8", "time steps per sequence"},
      {"model.height", "48", "input rows"},
      {"model.width", "24", "input columns"},
      {"model.widths", "16,32,64,128", "channel width of each of the 4 stages"},
      {"model.blocks", "1,1,1,1", "SEW blocks per stage"},
      {"model.bn_gamma_init", "2", "initial BN affine weight"},
      {"lif.tau_m", "2", "membrane time constant"},
      {"lif.dt", "1", "integration step"},
      {"lif.v_rest", "0", "resting potential"},
      {"lif.v_th", "1", "firing threshold"},
      {"lif.v_reset", "0", "reset potential"},
      {"surrogate.width", "1", "half-width of the triangular surrogate"},
      {"ssam.stages", "shallow,deep", "attention stages: any of shallow,deep or none"},
      {"ssam.variant", "staw", "staw | faw | zaw"},
      {"ssam.value_mode", "literal", "literal | standard-causal"},
      {"ssam.residual", "on", "add the attention output to its input"},
      {"stfs.enabled", "true", "train with sampled temporal/spatial branches"},
      {"stfs.temporal", "true", "temporal branch"},
      {"stfs.spatial", "true", "spatial branch"},
      {"loss.lambda1", "1.0", "triplet weight"},
      {"loss.lambda2", "0.1", "classification weight"},
      {"loss.margin", "0.3", "triplet margin"},
      {"loss.epsilon", "0.1", "label smoothing"},
      {"batch.P", "4", "identities per batch"},
      {"batch.K", "4", "sequences per identity"},
      {"optim.lr", "0.00035", "initial learning rate"},
      {"optim.decay_every", "30", "epochs between learning-rate decays"},
      {"optim.decay_factor", "0.333333333333333", "learning-rate decay multiplier"},
      {"optim.epochs", "100", "training epochs"},
      {"optim.beta1", "0.9", "Adam first-moment decay"},
      {"optim.beta2", "0.999", "Adam second-moment decay"},
      {"optim.eps", "1e-8", "Adam epsilon"},
      {"optim.weight_decay", "0", "L2 penalty added to gradients"},
      {"train.batches_per_epoch", "16", "P x K batches per epoch"},
      {"train.eval_every", "1", "evaluate the held-out split every N epochs (0 = never)"},
      {"train.flip", "true", "randomly mirror training sequences left to right"},
      {"data.window_us", "266664", "event bin width in microseconds"},
      {"data.bin_clip", "none", "clip bin counts at this value, or none"},
      {"data.test_seqs", "2", "held-out sequences per identity and camera"},
      {"synth.ids", "8", "identities"},
      {"synth.cams", "2", "cameras"},
      {"synth.seqs", "6", "sequences per identity per camera"},
      {"synth.frames", "64", "rendered frames per sequence"},
      {"synth.frame_dt_us", "33333", "frame interval in microseconds"},
      {"synth.threshold", "0.4", "DVS log-contrast threshold"},
      {"synth.width", "24", "sensor columns"},
      {"synth.height", "48", "sensor rows"},
  };
  return keys;
}

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

template <class T>
T parse_number(const std::string& key, const std::string& text) {
  T v{};
  const char* end = text.data() + text.size();
  auto [ptr, ec] = std::from_chars(text.data(), end, v);
  if (ec != std::errc() || ptr != end || text.empty())
    throw ConfigError("config " + key + ": '" + text + "' is not a valid number");
  return v;
}

}  // namespace detail

class RunConfig {
public:
  RunConfig() {
    for (const auto& k : config_keys()) values_[k.name] = k.default_value;
  }

  static bool known(const std::string& key) { return std::any_of(config_keys().begin(), config_keys().end(), [&](const ConfigKey& k) { return k.name == key; }); }

  void set(const std::string& key, const std::string& value) {
    if (!known(key)) throw ConfigError("unknown config key '" + key + "'");
    values_[key] = detail::trim(value);
  }

  const std::string& get(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) throw ConfigError("unknown config key '" + key + "'");
    return it->second;
  }

  // Lines are `key = value`; '#' starts a comment.
  void load(std::istream& in, const std::string& source = "config") {
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
      line = detail::trim(line);
      if (line.empty()) continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos) throw ConfigError(source + ":" + std::to_string(lineno) + ": expected key = value");
      const auto key = detail::trim(line.substr(0, eq));
      if (!known(key)) throw ConfigError(source + ":" + std::to_string(lineno) + ": unknown config key '" + key + "'");
      set(key, line.substr(eq + 1));
    }
  }

  void load_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read config file " + path.string());
    load(in, path.string());
  }

  // Sorted by key; reloading the output reproduces this configuration.
  void dump(std::ostream& out) const {
    for (const auto& [k, v] : values_) out << k << " = " << v << "\n";
  }

  std::string dump() const {
    std::ostringstream os;
    dump(os);
    return os.str();
  }

  template <class T>
  T number(const std::string& key) const { return detail::parse_number<T>(key, get(key)); }

  bool flag(const std::string& key) const {
    const auto& v = get(key);
    if (v == "true" || v == "on" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "off" || v == "0" || v == "no") return false;
    throw ConfigError("config " + key + ": '" + v + "' is not a boolean");
  }

  std::vector<std::size_t> sizes(const std::string& key) const {
    std::vector<std::size_t> out;
    std::stringstream ss(get(key));
    std::string item;
    while (std::getline(ss, item, ',')) out.push_back(detail::parse_number<std::size_t>(key, detail::trim(item)));
    return out;
  }

  std::uint64_t seed() const { return number<std::uint64_t>("seed"); }

  ModelConfig model() const {
    ModelConfig m;
    m.steps = number<std::size_t>("model.T");
    m.height = number<std::size_t>("model.height");
    m.width = number<std::size_t>("model.width");
    m.widths = sizes("model.widths");
    m.blocks = sizes("model.blocks");
    m.bn_gamma_init = number<double>("model.bn_gamma_init");
    m.lif.tau_m = number<double>("lif.tau_m");
    m.lif.dt = number<double>("lif.dt");
    m.lif.v_rest = number<double>("lif.v_rest");
    m.lif.v_th = number<double>("lif.v_th");
    m.lif.v_reset = number<double>("lif.v_reset");
    m.surrogate_width = number<double>("surrogate.width");
    const auto& stages = get("ssam.stages");
    m.ssam_shallow = m.ssam_deep = false;
    if (stages != "none") {
      std::stringstream ss(stages);
      std::string item;
      while (std::getline(ss, item, ',')) {
        item = detail::trim(item);
        if (item == "shallow") m.ssam_shallow = true;
        else if (item == "deep") m.ssam_deep = true;
        else throw ConfigError("config ssam.stages: unknown stage '" + item + "' (shallow, deep or none)");
      }
    }
    try {
      m.ssam.variant = parse_variant(get("ssam.variant"));
      m.ssam.value_mode = parse_value_mode(get("ssam.value_mode"));
    } catch (const std::invalid_argument& e) {
      throw ConfigError(std::string("config: ") + e.what());
    }
    m.ssam.residual = flag("ssam.residual");
    m.stfs.enabled = flag("stfs.enabled");
    m.stfs.temporal = flag("stfs.temporal");
    m.stfs.spatial = flag("stfs.spatial");
    m.loss.lambda1 = number<double>("loss.lambda1");
    m.loss.lambda2 = number<double>("loss.lambda2");
    m.loss.margin = number<double>("loss.margin");
    m.loss.epsilon = number<double>("loss.epsilon");
    m.batch_p = number<std::size_t>("batch.P");
    m.batch_k = number<std::size_t>("batch.K");
    m.optim.lr = number<double>("optim.lr");
    m.optim.decay_every = number<std::size_t>("optim.decay_every");
    m.optim.decay_factor = number<double>("optim.decay_factor");
    m.optim.epochs = number<std::size_t>("optim.epochs");
    m.optim.beta1 = number<double>("optim.beta1");
    m.optim.beta2 = number<double>("optim.beta2");
    m.optim.eps = number<double>("optim.eps");
    m.optim.weight_decay = number<double>("optim.weight_decay");
    m.batches_per_epoch = number<std::size_t>("train.batches_per_epoch");
    m.eval_every = number<std::size_t>("train.eval_every");
    m.flip = flag("train.flip");
    try {
      m.validate();
    } catch (const std::invalid_argument& e) {
      throw ConfigError(std::string("config: ") + e.what());
    }
    return m;
  }

  DataOptions data() const {
    DataOptions d;
    d.steps = number<std::size_t>("model.T");
    d.window_us = number<std::int64_t>("data.window_us");
    if (d.window_us < 1) throw ConfigError("config data.window_us must be >= 1");
    if (get("data.bin_clip") != "none") d.clip = number<float>("data.bin_clip");
    return d;
  }

  std::size_t test_seqs() const { return number<std::size_t>("data.test_seqs"); }

  SynthConfig synth() const {
    SynthConfig s;
    s.ids = number<std::size_t>("synth.ids");
    s.cams = number<std::size_t>("synth.cams");
    s.seqs = number<std::size_t>("synth.seqs");
    s.frames = number<std::size_t>("synth.frames");
    s.frame_dt_us = number<std::int64_t>("synth.frame_dt_us");
    s.threshold = number<double>("synth.threshold");
    s.geom.width = number<std::size_t>("synth.width");
    s.geom.height = number<std::size_t>("synth.height");
    s.seed = seed();
    return s;
  }

private:
  std::map<std::string, std::string> values_;
};

}  // namespace s3ce
