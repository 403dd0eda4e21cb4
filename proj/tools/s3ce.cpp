// Command-line front end: synth, train, eval, inspect.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>

#include "s3ce/s3ce.hpp"

namespace fs = std::filesystem;
using namespace s3ce;

namespace {

enum Exit : int { ok = 0, usage = 1, data_error = 2, numeric_error = 3 };

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Options shared by every subcommand, plus one `--<key>` per config key.
struct Common {
  std::string config_path;
  std::optional<std::string> seed;
  std::string out;
  std::map<std::string, std::string> overrides;
  std::map<std::string, std::string> aliases;  // flag -> key

  void attach(CLI::App& app, bool out_required) {
    app.add_option("--config", config_path, "key = value config file")->check(CLI::ExistingFile);
    app.add_option("--seed", seed, "master seed");
    auto* o = app.add_option("--out", out, "output directory");
    if (out_required) o->required();
    for (const auto& k : config_keys()) {
      if (k.name == "seed") continue;
      app.add_option("--" + k.name, overrides[k.name], k.help + " [" + k.default_value + "]");
    }
  }

  void alias(CLI::App& app, const std::string& flag, const std::string& key) {
    aliases[flag] = key;
    app.add_option(flag, overrides[key], "alias of --" + key)->excludes(app.get_option("--" + key));
  }

  bool given(const CLI::App& app, const std::string& key) const {
    if (app.count("--" + key) > 0) return true;
    for (const auto& [flag, k] : aliases)
      if (k == key && app.count(flag) > 0) return true;
    return false;
  }

  // Defaults, then `base` (e.g. a checkpoint's sidecar), then --config, then flags.
  RunConfig resolve(const CLI::App& app, const RunConfig& base = {}) const {
    RunConfig cfg = base;
    if (!config_path.empty()) cfg.load_file(config_path);
    for (const auto& [k, v] : overrides)
      if (given(app, k)) cfg.set(k, v);
    if (seed) cfg.set("seed", *seed);
    return cfg;
  }
};

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out || !(out << text)) throw std::runtime_error("cannot write " + path.string());
}

void echo_config(const fs::path& dir, const RunConfig& cfg) { write_text(dir / "config.txt", cfg.dump()); }

std::string fmt(double v) {
  if (std::isnan(v)) return "nan";
  std::ostringstream os;
  os << std::setprecision(9) << v;
  return os.str();
}

fs::path sidecar(const fs::path& ckpt) { return fs::path(ckpt.string() + ".cfg"); }

std::size_t head_classes(const Checkpoint& ck) {
  for (const auto& b : ck.blocks)
    if (b.name == "head.global.weight" && b.dims.size() == 2) return b.dims[0];
  throw FormatError("checkpoint has no head.global.weight block");
}

RunConfig checkpoint_config(const fs::path& ckpt) {
  RunConfig cfg;
  if (!fs::exists(ckpt)) throw FormatError("checkpoint not found: " + ckpt.string());
  const auto side = sidecar(ckpt);
  if (!fs::exists(side)) throw FormatError("checkpoint config missing: " + side.string());
  cfg.load_file(side);
  return cfg;
}

std::unique_ptr<Network<float>> load_network(const fs::path& ckpt, const RunConfig& cfg) {
  const auto ck = load_checkpoint(ckpt);
  auto net = std::make_unique<Network<float>>(cfg.model(), head_classes(ck), cfg.seed());
  restore(net->parameters(), ck);
  return net;
}

std::vector<std::size_t> select_split(const Dataset& ds, const RunConfig& cfg, const std::string& which) {
  if (which == "all") {
    std::vector<std::size_t> all(ds.samples.size());
    std::iota(all.begin(), all.end(), std::size_t{0});
    return all;
  }
  const auto split = split_by_sequence(ds, cfg.test_seqs());
  if (which == "test") return split.test;
  if (which == "train") return split.train;
  throw UsageError("--split must be test, train or all");
}

int cmd_synth(const CLI::App& app, const Common& common) {
  const auto cfg = common.resolve(app);
  const auto sc = cfg.synth();
  const auto m = make_dataset(common.out, sc);
  echo_config(common.out, cfg);
  std::size_t events = 0;
  for (const auto& e : m.entries) events += e.n_events;
  std::cout << "wrote " << m.entries.size() << " sequences (" << events << " events) to " << common.out << "\n";
  return ok;
}

int cmd_train(const CLI::App& app, const Common& common, const std::string& data) {
  const auto cfg = common.resolve(app);
  const auto mc = cfg.model();
  const fs::path out = common.out;
  fs::create_directories(out);
  echo_config(out, cfg);

  const auto ds = load_dataset(data, cfg.data());
  const auto split = split_by_sequence(ds, cfg.test_seqs());
  TrainState<float> state(ds, split, mc, cfg.seed());
  std::cerr << "train: " << split.train.size() << " train / " << split.test.size() << " held-out sequences, "
            << state.net.trainable_count() << " trainable parameters\n";

  std::ofstream metrics(out / "metrics.csv");
  if (!metrics) throw std::runtime_error("cannot write " + (out / "metrics.csv").string());
  metrics << "epoch,loss_total,loss_tri,loss_cls,map,rank1\n";
  const fs::path ckpt = out / "model.ckpt";
  auto save = [&] {
    save_checkpoint(ckpt, snapshot(state.net.parameters(), static_cast<std::uint32_t>(state.epoch)));
    write_text(sidecar(ckpt), cfg.dump());
  };
  for (std::size_t e = 0; e < mc.optim.epochs; ++e) {
    EpochMetrics m;
    try {
      m = train_epoch(ds, mc, state);
    } catch (const NumericError&) {
      metrics.flush();
      throw;
    }
    metrics << m.epoch << ',' << fmt(m.loss_total) << ',' << fmt(m.loss_tri) << ',' << fmt(m.loss_cls) << ','
            << fmt(m.map) << ',' << fmt(m.rank1) << '\n';
    metrics.flush();
    std::cerr << "epoch " << m.epoch << " loss " << fmt(m.loss_total) << " map " << fmt(m.map) << " rank1 "
              << fmt(m.rank1) << "\n";
  }
  save();
  std::cout << "checkpoint " << ckpt.string() << "\n";
  return ok;
}

int cmd_eval(const CLI::App& app, const Common& common, const std::string& data, const std::string& ckpt,
             const std::string& which) {
  const auto cfg = common.resolve(app, checkpoint_config(ckpt));
  auto net = load_network(ckpt, cfg);
  const auto ds = load_dataset(data, cfg.data());
  const auto indices = select_split(ds, cfg, which);
  const auto r = evaluate(*net, ds, indices);

  std::ostringstream csv;
  csv << "query_id,ap,first_hit_rank\n";
  for (std::size_t i = 0; i < r.evaluated.size(); ++i) {
    const auto& s = ds.samples[indices[r.evaluated[i]]];
    csv << s.id << '/' << s.cam << '/' << s.seq << ',' << fmt(r.ap[i]) << ',' << r.first_hit_rank[i] << '\n';
  }
  std::ostringstream summary;
  summary << "map=" << fmt(r.map) << " rank1=" << fmt(r.rank1()) << " rank5=" << fmt(r.cmc.size() > 4 ? r.cmc[4] : 1.0)
          << " queries=" << r.evaluated.size() << " skipped=" << r.skipped.size();
  csv << "# " << summary.str() << '\n';
  if (!common.out.empty()) {
    fs::create_directories(common.out);
    write_text(fs::path(common.out) / "eval.csv", csv.str());
    echo_config(common.out, cfg);
  } else {
    std::cout << csv.str();
  }
  for (auto q : r.skipped)
    std::cerr << "warning: query " << indices[q] << " has no cross-camera positive, skipped\n";
  std::cout << summary.str() << "\n";
  return ok;
}

int cmd_inspect(const CLI::App& app, const Common& common, const std::string& data, const std::string& ckpt,
                std::size_t sample) {
  const auto cfg = common.resolve(app, checkpoint_config(ckpt));
  auto net = load_network(ckpt, cfg);
  const auto ds = load_dataset(data, cfg.data());
  if (sample >= ds.samples.size())
    throw UsageError("--sample " + std::to_string(sample) + " out of range (" + std::to_string(ds.samples.size()) +
                     " sequences)");
  const fs::path out = common.out;
  fs::create_directories(out);
  echo_config(out, cfg);

  ForwardProbe<float> probe;
  {
    NoGradGuard no_grad;
    net->forward(make_batch<float>(ds, {sample}), Mode::eval, nullptr, &probe);
  }
  for (const auto& d : probe.attention) {
    const std::string stage = d.stage.substr(d.stage.rfind('.') + 1);
    const std::size_t side = d.steps * d.tokens;
    std::ostringstream blocks, bias;
    blocks << std::setprecision(9);
    bias << std::setprecision(9);
    for (std::size_t r = 0; r < side; ++r)
      for (std::size_t c = 0; c < side; ++c) blocks << d.blocks[r * side + c] << (c + 1 == side ? '\n' : ',');
    for (std::size_t r = 0; r < d.tokens; ++r)
      for (std::size_t c = 0; c < d.tokens; ++c) bias << d.bias[r * d.tokens + c] << (c + 1 == d.tokens ? '\n' : ',');
    write_text(out / ("staw_" + stage + ".csv"), blocks.str());
    write_text(out / ("bias_" + stage + ".csv"), bias.str());
  }
  std::ostringstream rates;
  rates << "layer,step,rate\n";
  for (const auto& [layer, per_step] : probe.spikes.rates)
    for (std::size_t t = 0; t < per_step.size(); ++t) rates << layer << ',' << t << ',' << fmt(per_step[t]) << '\n';
  write_text(out / "spike_rates.csv", rates.str());
  const auto& s = ds.samples[sample];
  std::cout << "inspected sequence " << s.id << '/' << s.cam << '/' << s.seq << ": " << probe.attention.size()
            << " attention stage(s) dumped to " << out.string() << "\n";
  return ok;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Spiking event-stream person re-identification"};
  app.require_subcommand(1);

  Common synth_opts, train_opts, eval_opts, inspect_opts;
  std::string train_data, eval_data, eval_ckpt, eval_split = "test", inspect_data, inspect_ckpt;
  std::size_t inspect_sample = 0;

  auto* synth = app.add_subcommand("synth", "generate the synthetic event dataset");
  synth_opts.attach(*synth, true);
  synth_opts.alias(*synth, "--ids", "synth.ids");

  auto* train = app.add_subcommand("train", "train a model, writing checkpoint and metrics");
  train_opts.attach(*train, true);
  train->add_option("--data", train_data, "dataset directory")->required();
  train_opts.alias(*train, "--epochs", "optim.epochs");

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint with the cross-camera protocol");
  eval_opts.attach(*eval, false);
  eval->add_option("--data", eval_data, "dataset directory")->required();
  eval->add_option("--checkpoint", eval_ckpt, "checkpoint file")->required();
  eval->add_option("--split", eval_split, "test | train | all");

  auto* inspect = app.add_subcommand("inspect", "dump attention blocks, bias matrices and spike rates");
  inspect_opts.attach(*inspect, true);
  inspect->add_option("--data", inspect_data, "dataset directory")->required();
  inspect->add_option("--checkpoint", inspect_ckpt, "checkpoint file")->required();
  inspect->add_option("--sample", inspect_sample, "dataset sequence index");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return usage;
  }

  try {
    if (*synth) return cmd_synth(*synth, synth_opts);
    if (*train) return cmd_train(*train, train_opts, train_data);
    if (*eval) return cmd_eval(*eval, eval_opts, eval_data, eval_ckpt, eval_split);
    if (*inspect) return cmd_inspect(*inspect, inspect_opts, inspect_data, inspect_ckpt, inspect_sample);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return usage;
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return usage;
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return numeric_error;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return data_error;
  }
  return usage;
}
