#pragma once

#include "umad/data/io.hpp"
#include "umad/diffusion/diffusion.hpp"
#include "umad/losses/losses.hpp"
#include "umad/metrics/metrics.hpp"

#include <cstdint>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace umad::train {

struct TrainConfig {
  double lr = 1e-4;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  Index epochs = 30;
  Index batch = 4;
  double clip_norm = 1.0;
  std::uint64_t seed = 0;
  std::string precision = "double_for_tests";  // or "single_for_training"
  std::string ablation = "full";  // no_umse | no_context | flow_only | no_conditioning
  std::string injection_mode = "early";  // none | late | early
  bool stop_flow_gradient = false;
  Index window = 5;      // L degraded frames ending at the target
  Index post = 2;        // K post-target frames
  Index sampler_T = 25;
  Index base_channels = 8;
  losses::LossWeights weights;

  void validate() const;
  diffusion::ModelConfig model_config() const;
};

TrainConfig config_from_json(const std::string& text);
std::string config_to_json(const TrainConfig& cfg);

// cosine annealing from lr down to zero at the final epoch
double lr_at_epoch(const TrainConfig& cfg, Index epoch);

class Adam {
 public:
  Adam() = default;
  Adam(nn::ParamStore& ps, double beta1 = 0.9, double beta2 = 0.999,
       double eps = 1e-8);

  // apply one update from the accumulated gradients
  void step(double lr);
  Index step_count() const { return t_; }
  void set_step_count(Index t) { t_ = t; }

  struct Slot {
    Array m, v;
  };
  std::map<std::string, Slot>& state() { return state_; }
  const std::map<std::string, Slot>& state() const { return state_; }

 private:
  nn::ParamStore* ps_ = nullptr;
  double beta1_ = 0.9, beta2_ = 0.999, eps_ = 1e-8;
  Index t_ = 0;
  std::map<std::string, Slot> state_;
};

// scale all gradients so the global norm is at most max_norm; returns the
// pre-clip norm
double clip_global_norm(nn::ParamStore& ps, double max_norm);

struct SequenceData {
  data::FrameSequence degraded, clean;
  std::vector<data::FlowField> ref_flows;  // T-1, empty -> block-match fallback
  double quality_q = 1.0;                  // from the degradation record
};

SequenceData load_sequence(const data::ManifestEntry& entry);
std::vector<SequenceData> load_dataset(const data::DatasetManifest& manifest);

struct StepLog {
  Index step = 0, epoch = 0;
  double lr = 0, grad_norm = 0;
  losses::LossReport losses;
};

struct TrainOutcome {
  Index steps_run = 0;
  double first_total = 0, last_total = 0;
  bool aborted = false;  // non-finite loss; last-good checkpoint was kept
};

// thrown when training hits a non-finite loss; the message names the term
struct TrainAbort : std::runtime_error {
  using std::runtime_error::runtime_error;
};

class Trainer {
 public:
  Trainer(diffusion::Model& model, TrainConfig cfg);

  // one optimization step on the adjacent target pair (t-1, t) of seq
  StepLog step(const SequenceData& seq, Index t);

  // epochs over all valid targets of all sequences; optional JSON-lines log;
  // max_steps = 0 means run the full schedule; stop_cb can end the run early
  TrainOutcome run(const std::vector<SequenceData>& dataset,
                   std::ostream* log = nullptr, Index max_steps = 0,
                   const std::function<bool(Index step)>& stop_cb = {});

  diffusion::Model& model() { return *model_; }
  Adam& optimizer() { return opt_; }
  const TrainConfig& config() const { return cfg_; }
  Index current_epoch() const { return epoch_; }

 private:
  // loss over the adjacent pair (t-1, t); scale multiplies the total
  ad::Var accumulate_pair(const SequenceData& seq, Index t, double scale,
                          losses::LossReport* report);

  diffusion::Model* model_ = nullptr;
  TrainConfig cfg_;
  Adam opt_;
  diffusion::NoiseSchedule sched_;
  std::mt19937_64 rng_;
  Index epoch_ = 0, step_ = 0;
};

// topology hash over parameter names/shapes and the structural config knobs
std::uint64_t config_fingerprint(const diffusion::Model& model);

// Binary archive: index (names, shapes, fingerprint, embedded config JSON,
// epoch, optimizer moments) plus contiguous float32 buffers. Saving quantizes
// the in-memory parameters to float32 so a reload reproduces forward passes
// bit-exactly.
void save_checkpoint(const std::string& path, diffusion::Model& model,
                     const TrainConfig& cfg, Index epoch,
                     const Adam* opt = nullptr);

struct CheckpointInfo {
  Index epoch = 0;
  TrainConfig config;
};

// throws std::runtime_error naming the first mismatched parameter when the
// model topology differs from the archive
CheckpointInfo load_checkpoint(const std::string& path, diffusion::Model& model,
                               Adam* opt = nullptr);

// read only the embedded config (to rebuild a model before loading weights)
CheckpointInfo peek_checkpoint(const std::string& path);

// restore every sequence and compare against its clean reference
struct EvalResult {
  std::vector<metrics::MetricsReport> per_sequence;
  metrics::MetricsReport aggregate;  // means over sequences
};

using RestoreFn = std::function<data::FrameSequence(const SequenceData&)>;

EvalResult evaluate(diffusion::Model& model, const std::vector<SequenceData>& dataset,
                    std::uint64_t seed, RestoreFn restore_fn = {});

}  // namespace umad::train
