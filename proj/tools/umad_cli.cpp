#include "umad/data/io.hpp"
#include "umad/data/synth.hpp"
#include "umad/train/harness.hpp"

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

namespace fs = std::filesystem;
using namespace umad;
using nlohmann::json;

namespace {

constexpr int kExitUsage = 2;
constexpr int kExitNanAbort = 3;
constexpr int kExitTopology = 4;

std::uint64_t effective_seed(std::uint64_t flag_seed) {
  if (const char* env = std::getenv("UMAD_SEED")) return std::stoull(env);
  return flag_seed;
}

// "noise=0.05,blur=1.0,quality=0.5,flicker=0.1" (any subset, any order)
data::DegradationSpec parse_degrade_spec(const std::string& text) {
  data::DegradationSpec spec;
  if (text.empty()) return spec;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    auto eq = item.find('=');
    if (eq == std::string::npos)
      throw std::invalid_argument("degrade spec: missing '=' in \"" + item + "\"");
    std::string key = item.substr(0, eq);
    double value;
    try {
      size_t used = 0;
      value = std::stod(item.substr(eq + 1), &used);
      if (used != item.size() - eq - 1) throw std::invalid_argument("trailing");
    } catch (const std::exception&) {
      throw std::invalid_argument("degrade spec: bad value for field \"" + key + "\"");
    }
    if (key == "noise") spec.noise_sigma = value;
    else if (key == "blur") spec.blur_sigma = value;
    else if (key == "quality") spec.quality_q = value;
    else if (key == "flicker") spec.flicker_amp = value;
    else
      throw std::invalid_argument("degrade spec: unknown field \"" + key + "\"");
  }
  spec.validate();
  return spec;
}

void parse_size(const std::string& text, Index& h, Index& w) {
  if (std::sscanf(text.c_str(), "%ldx%ld", &h, &w) != 2 || h <= 0 || w <= 0)
    throw std::invalid_argument("size: expected HxW, got \"" + text + "\"");
}

void write_flow_dir(const fs::path& dir, const std::vector<data::FlowField>& flows) {
  fs::create_directories(dir);
  for (size_t t = 0; t < flows.size(); ++t) {
    char name[32];
    std::snprintf(name, sizeof(name), "flow_%06zu.flo", t);
    data::write_flow_file(dir / name, flows[t]);
  }
}

int cmd_gen_data(const std::string& out, const std::string& preset,
                 std::uint64_t seed, const std::string& size, Index frames,
                 const std::string& degrade) {
  Index h = 0, w = 0;
  parse_size(size, h, w);
  data::DegradationSpec spec = parse_degrade_spec(degrade);

  data::MotionSpec motion;
  if (preset == "shift") {
    motion.dx = 1.0;
  } else if (preset == "rotate") {
    motion.kind = data::MotionSpec::Kind::Rotate;
    motion.deg_per_frame = 3.0;
  } else {  // mixed: diagonal shift plus flicker unless the caller set one
    motion.dx = 1.0;
    motion.dy = 0.5;
    if (spec.flicker_amp == 0.0) spec.flicker_amp = 0.08;
  }

  auto synth = data::generate_synthetic_sequence(seed, frames, h, w, motion,
                                                 data::TextureKind::Checker);
  auto degraded = data::degrade(synth.clean, spec, seed + 1);

  fs::path root(out);
  fs::create_directories(root);
  data::write_frames(root / "clean", synth.clean);
  data::write_frames(root / "degraded", degraded);
  write_flow_dir(root / "flow", synth.gt_flows);

  data::ManifestEntry entry;
  entry.clean_dir = (root / "clean").string();
  entry.degraded_dir = (root / "degraded").string();
  entry.flow_dir = (root / "flow").string();
  entry.T = frames;
  entry.H = h;
  entry.W = w;
  entry.degradation = spec;
  data::write_manifest(root / "manifest.json", {{entry}});

  std::cout << "gen-data: " << frames << " clean + " << frames
            << " degraded frames, " << synth.gt_flows.size() << " flow files -> "
            << out << "\n";
  return 0;
}

train::TrainConfig read_config_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::invalid_argument("cannot read config file " + path);
  std::stringstream buf;
  buf << is.rdbuf();
  return train::config_from_json(buf.str());
}

bool params_finite(diffusion::Model& model) {
  for (auto& [name, p] : model.ps.params())
    if (!p.value().data.isFinite().all()) return false;
  return true;
}

int cmd_train(const std::string& config_path, const std::string& data_path,
              const std::string& out) {
  train::TrainConfig cfg = read_config_file(config_path);
  cfg.seed = effective_seed(cfg.seed);
  auto dataset = train::load_dataset(data::read_manifest(data_path));

  diffusion::Model model(cfg.seed, cfg.model_config());
  train::Trainer trainer(model, cfg);

  fs::path root(out);
  fs::create_directories(root);
  std::ofstream log(root / "train_log.jsonl");
  std::string last_good = (root / "last_good.ckpt").string();
  train::save_checkpoint(last_good, model, cfg, 0, nullptr);

  auto keep_last_good = [&](Index) {
    if (params_finite(model))
      train::save_checkpoint(last_good, model, cfg, trainer.current_epoch(),
                             &trainer.optimizer());
    return false;
  };
  auto outcome = trainer.run(dataset, &log, 0, keep_last_good);
  if (outcome.aborted) {
    std::cerr << "train: aborted on non-finite loss after " << outcome.steps_run
              << " steps; last-good checkpoint at " << last_good << "\n";
    return kExitNanAbort;
  }
  train::save_checkpoint((root / "model.ckpt").string(), model, cfg,
                         cfg.epochs, &trainer.optimizer());
  std::cout << "train: " << outcome.steps_run << " steps, total loss "
            << outcome.first_total << " -> " << outcome.last_total << "\n";
  return 0;
}

// rebuild the model from the archive's embedded config (or an override file)
diffusion::Model load_model(const std::string& ckpt,
                            const std::string& config_override,
                            train::TrainConfig* cfg_out = nullptr) {
  train::TrainConfig cfg = config_override.empty()
                               ? train::peek_checkpoint(ckpt).config
                               : read_config_file(config_override);
  diffusion::Model model(0, cfg.model_config());
  train::load_checkpoint(ckpt, model);
  if (cfg_out) *cfg_out = cfg;
  return model;
}

int cmd_restore(const std::string& ckpt, const std::string& in,
                const std::string& out, std::uint64_t seed,
                const std::string& config_override) {
  train::TrainConfig cfg;
  diffusion::Model model = load_model(ckpt, config_override, &cfg);
  auto degraded = data::read_frames(in);
  diffusion::SamplerConfig sampler;
  sampler.T = cfg.sampler_T;
  sampler.seed = effective_seed(seed);
  auto restored = diffusion::restore(model, degraded, sampler);
  fs::create_directories(out);
  data::write_frames(out, restored);
  std::cout << "restore: " << restored.length() << " frames -> " << out << "\n";
  return 0;
}

json report_json(const metrics::MetricsReport& r, bool per_frame) {
  json j = json::parse(metrics::to_json(r));
  if (!per_frame) j.erase("per_frame");
  return j;
}

int cmd_eval(const std::string& ckpt, const std::string& data_path,
             const std::string& report, bool per_frame, std::uint64_t seed,
             const std::string& config_override) {
  diffusion::Model model = load_model(ckpt, config_override);
  auto dataset = train::load_dataset(data::read_manifest(data_path));
  auto result = train::evaluate(model, dataset, effective_seed(seed));

  json j;
  j["aggregate"] = report_json(result.aggregate, false);
  j["per_sequence"] = json::array();
  for (const auto& r : result.per_sequence)
    j["per_sequence"].push_back(report_json(r, per_frame));
  std::ofstream os(report);
  if (!os) throw std::invalid_argument("cannot write report file " + report);
  os << j.dump(2) << "\n";

  if (per_frame) {
    std::ofstream csv(report + ".csv");
    for (const auto& r : result.per_sequence) csv << metrics::to_csv(r) << "\n";
  }
  std::cout << "eval: " << dataset.size() << " sequences, psnr "
            << result.aggregate.psnr_db << " dB, ssim " << result.aggregate.ssim
            << ", tof " << result.aggregate.tof << "\n";
  return 0;
}

int cmd_flow(const std::string& in, const std::string& out,
             const std::string& method, const std::string& ckpt) {
  auto frames = data::read_frames(in);
  require(frames.length() >= 2, "flow: need at least two frames");
  std::vector<data::FlowField> flows;
  if (method == "oracle") {
    for (Index t = 0; t + 1 < frames.length(); ++t)
      flows.push_back(flow::block_match_oracle(
          frames.frames[static_cast<size_t>(t)],
          frames.frames[static_cast<size_t>(t + 1)], 4, 8));
  } else {
    diffusion::Model model = load_model(ckpt, "");
    for (Index t = 0; t + 1 < frames.length(); ++t)
      flows.push_back(model.flow_net.estimate_flow_field(
          frames.frames[static_cast<size_t>(t)],
          frames.frames[static_cast<size_t>(t + 1)]));
  }
  write_flow_dir(out, flows);
  std::cout << "flow: " << flows.size() << " fields -> " << out << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"umad: motion-aware diffusion video restoration"};
  app.require_subcommand(1);

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic dataset");
  std::string gen_out, gen_preset = "shift", gen_size = "64x64", gen_degrade;
  std::uint64_t gen_seed = 1;
  Index gen_frames = 9;
  gen->add_option("--out", gen_out, "Output directory")->required();
  gen->add_option("--preset", gen_preset, "Motion preset")
      ->check(CLI::IsMember({"shift", "rotate", "mixed"}))
      ->capture_default_str();
  gen->add_option("--seed", gen_seed, "RNG seed")->capture_default_str();
  gen->add_option("--size", gen_size, "Frame size HxW")->capture_default_str();
  gen->add_option("--frames", gen_frames, "Frame count")->capture_default_str();
  gen->add_option("--degrade", gen_degrade,
                  "Degradation spec: noise=S,blur=S,quality=Q,flicker=A");

  // train
  auto* tr = app.add_subcommand("train", "Train a model");
  std::string tr_config, tr_data, tr_out;
  tr->add_option("--config", tr_config, "Training config JSON")->required();
  tr->add_option("--data", tr_data, "Dataset manifest")->required();
  tr->add_option("--out", tr_out, "Output directory")->required();

  // restore
  auto* re = app.add_subcommand("restore", "Restore a degraded sequence");
  std::string re_ckpt, re_in, re_out, re_config;
  std::uint64_t re_seed = 0;
  re->add_option("--ckpt", re_ckpt, "Checkpoint file")->required();
  re->add_option("--in", re_in, "Degraded frame directory")->required();
  re->add_option("--out", re_out, "Restored frame directory")->required();
  re->add_option("--seed", re_seed, "Sampler seed")->capture_default_str();
  re->add_option("--config", re_config, "Config override JSON");

  // eval
  auto* ev = app.add_subcommand("eval", "Evaluate a model on a dataset");
  std::string ev_ckpt, ev_data, ev_report, ev_config;
  std::uint64_t ev_seed = 0;
  bool ev_per_frame = false;
  ev->add_option("--ckpt", ev_ckpt, "Checkpoint file")->required();
  ev->add_option("--data", ev_data, "Dataset manifest")->required();
  ev->add_option("--report", ev_report, "Report JSON output path")->required();
  ev->add_flag("--per-frame", ev_per_frame, "Include per-frame rows (+CSV)");
  ev->add_option("--seed", ev_seed, "Sampler seed")->capture_default_str();
  ev->add_option("--config", ev_config, "Config override JSON");

  // flow
  auto* fl = app.add_subcommand("flow", "Estimate flow between frames");
  std::string fl_in, fl_out, fl_method = "oracle", fl_ckpt;
  fl->add_option("--in", fl_in, "Frame directory")->required();
  fl->add_option("--out", fl_out, "Flow output directory")->required();
  fl->add_option("--method", fl_method, "Estimator")
      ->check(CLI::IsMember({"oracle", "model"}))
      ->capture_default_str();
  fl->add_option("--ckpt", fl_ckpt, "Checkpoint (required for --method model)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : kExitUsage;
  }

  try {
    if (gen->parsed())
      return cmd_gen_data(gen_out, gen_preset, effective_seed(gen_seed),
                          gen_size, gen_frames, gen_degrade);
    if (tr->parsed()) return cmd_train(tr_config, tr_data, tr_out);
    if (re->parsed()) return cmd_restore(re_ckpt, re_in, re_out, re_seed, re_config);
    if (ev->parsed())
      return cmd_eval(ev_ckpt, ev_data, ev_report, ev_per_frame, ev_seed, ev_config);
    if (fl->parsed()) {
      if (fl_method == "model" && fl_ckpt.empty()) {
        std::cerr << "flow: --method model requires --ckpt\n";
        return kExitUsage;
      }
      return cmd_flow(fl_in, fl_out, fl_method, fl_ckpt);
    }
  } catch (const train::TrainAbort& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitNanAbort;
  } catch (const std::runtime_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return std::string(e.what()).find("topology mismatch") != std::string::npos
               ? kExitTopology
               : kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  }
  return 0;
}
