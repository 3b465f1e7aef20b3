#include "umad/train/harness.hpp"

#include "umad/flow/flow.hpp"

#include <nlohmann/json.hpp>

#include <cmath>
#include <cstdio>
#include <numbers>
#include <cstring>
#include <algorithm>
#include <fstream>
#include <ostream>
#include <tuple>

namespace umad::train {

using namespace umad::ad;
using nlohmann::json;

void TrainConfig::validate() const {
  require(lr > 0, "TrainConfig: lr must be positive");
  require(clip_norm > 0, "TrainConfig: clip_norm must be positive");
  require(epochs >= 1 && batch >= 1, "TrainConfig: epochs and batch must be >= 1");
  require(window >= 2 && post >= 0, "TrainConfig: window must be >= 2");
  require(sampler_T >= 1, "TrainConfig: sampler_T must be >= 1");
  require(precision == "double_for_tests" || precision == "single_for_training",
          "TrainConfig: unknown precision mode");
  require(ablation == "full" || ablation == "no_umse" || ablation == "no_context" ||
              ablation == "flow_only" || ablation == "no_conditioning",
          "TrainConfig: unknown ablation");
  require(injection_mode == "none" || injection_mode == "late" ||
              injection_mode == "early",
          "TrainConfig: unknown injection_mode");
}

diffusion::ModelConfig TrainConfig::model_config() const {
  validate();
  diffusion::ModelConfig m;
  m.window = window;
  m.post = post;
  m.sampler_T = sampler_T;
  m.denoiser.base_channels = base_channels;
  if (ablation == "no_umse") m.ablation = diffusion::Ablation::NoUmse;
  else if (ablation == "no_context") m.ablation = diffusion::Ablation::NoContext;
  else if (ablation == "flow_only") m.ablation = diffusion::Ablation::FlowOnly;
  else if (ablation == "no_conditioning")
    m.ablation = diffusion::Ablation::NoConditioning;
  if (injection_mode == "none" || ablation == "no_conditioning")
    m.denoiser.injection = backbone::InjectionMode::None;
  else if (injection_mode == "late")
    m.denoiser.injection = backbone::InjectionMode::Late;
  return m;
}

TrainConfig config_from_json(const std::string& text) {
  json j = json::parse(text);
  TrainConfig c;
  auto get = [&](const char* k, auto& field) {
    if (j.contains(k)) field = j.at(k).get<std::decay_t<decltype(field)>>();
  };
  get("lr", c.lr);
  get("adam_beta1", c.adam_beta1);
  get("adam_beta2", c.adam_beta2);
  get("epochs", c.epochs);
  get("batch", c.batch);
  get("clip_norm", c.clip_norm);
  get("seed", c.seed);
  get("precision", c.precision);
  get("ablation", c.ablation);
  get("injection_mode", c.injection_mode);
  get("stop_flow_gradient", c.stop_flow_gradient);
  get("window", c.window);
  get("post", c.post);
  get("sampler_T", c.sampler_T);
  get("base_channels", c.base_channels);
  get("lambda1", c.weights.lambda1);
  get("lambda2", c.weights.lambda2);
  get("lambda3", c.weights.lambda3);
  get("lambda_eps", c.weights.lambda_eps);
  c.validate();
  return c;
}

std::string config_to_json(const TrainConfig& c) {
  json j;
  j["lr"] = c.lr;
  j["adam_beta1"] = c.adam_beta1;
  j["adam_beta2"] = c.adam_beta2;
  j["epochs"] = c.epochs;
  j["batch"] = c.batch;
  j["clip_norm"] = c.clip_norm;
  j["seed"] = c.seed;
  j["precision"] = c.precision;
  j["ablation"] = c.ablation;
  j["injection_mode"] = c.injection_mode;
  j["stop_flow_gradient"] = c.stop_flow_gradient;
  j["window"] = c.window;
  j["post"] = c.post;
  j["sampler_T"] = c.sampler_T;
  j["base_channels"] = c.base_channels;
  j["lambda1"] = c.weights.lambda1;
  j["lambda2"] = c.weights.lambda2;
  j["lambda3"] = c.weights.lambda3;
  j["lambda_eps"] = c.weights.lambda_eps;
  return j.dump();
}

double lr_at_epoch(const TrainConfig& cfg, Index epoch) {
  require(epoch >= 0 && epoch < cfg.epochs, "lr_at_epoch: epoch out of range");
  if (cfg.epochs == 1) return cfg.lr;
  double frac = static_cast<double>(epoch) / static_cast<double>(cfg.epochs - 1);
  return cfg.lr * 0.5 * (1.0 + std::cos(std::numbers::pi * frac));
}

Adam::Adam(nn::ParamStore& ps, double beta1, double beta2, double eps)
    : ps_(&ps), beta1_(beta1), beta2_(beta2), eps_(eps) {
  for (auto& [name, p] : ps.params())
    state_[name] = Slot{Array::Zero(p.numel()), Array::Zero(p.numel())};
}

void Adam::step(double lr) {
  require(ps_ != nullptr, "Adam: not bound to a parameter store");
  ++t_;
  double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (auto& [name, p] : ps_->params()) {
    Slot& s = state_.at(name);
    const Array& g = p.grad();
    s.m = beta1_ * s.m + (1.0 - beta1_) * g;
    s.v = beta2_ * s.v + (1.0 - beta2_) * g.square();
    p.value().data -= lr * (s.m / bc1) / ((s.v / bc2).sqrt() + eps_);
  }
}

double clip_global_norm(nn::ParamStore& ps, double max_norm) {
  double sq = 0;
  for (auto& [name, p] : ps.params()) sq += p.grad().square().sum();
  double norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0) {
    double scale = max_norm / norm;
    for (auto& [name, p] : ps.params()) p.grad() *= scale;
  }
  return norm;
}

SequenceData load_sequence(const data::ManifestEntry& entry) {
  SequenceData s;
  s.degraded = data::read_frames(entry.degraded_dir);
  s.clean = data::read_frames(entry.clean_dir);
  require(s.degraded.frames.size() == s.clean.frames.size(),
          "load_sequence: clean/degraded length mismatch");
  s.quality_q = entry.degradation.quality_q;
  if (!entry.flow_dir.empty()) {
    for (size_t t = 0; t + 1 < s.clean.frames.size(); ++t) {
      char name[32];
      std::snprintf(name, sizeof(name), "flow_%06zu.flo", t);
      s.ref_flows.push_back(
          data::read_flow_file(std::filesystem::path(entry.flow_dir) / name));
    }
  }
  return s;
}

std::vector<SequenceData> load_dataset(const data::DatasetManifest& manifest) {
  require(!manifest.entries.empty(), "load_dataset: empty manifest");
  std::vector<SequenceData> out;
  for (const auto& e : manifest.entries) out.push_back(load_sequence(e));
  return out;
}

Trainer::Trainer(diffusion::Model& model, TrainConfig cfg)
    : model_(&model), cfg_(std::move(cfg)), rng_(cfg_.seed) {
  cfg_.validate();
  opt_ = Adam(model.ps, cfg_.adam_beta1, cfg_.adam_beta2);
  sched_ = diffusion::cosine_schedule(cfg_.sampler_T);
}

namespace {

std::vector<Tensor> clamped_window(const data::FrameSequence& seq, Index end,
                                   Index len) {
  Index T = seq.length();
  std::vector<Tensor> out;
  for (Index i = end - len + 1; i <= end; ++i) {
    Index c = std::min(T - 1, std::max<Index>(0, i));
    out.push_back(seq.frames[static_cast<size_t>(c)]);
  }
  return out;
}

std::vector<Tensor> clamped_post(const data::FrameSequence& seq, Index t, Index k) {
  Index T = seq.length();
  std::vector<Tensor> out;
  for (Index i = t + 1; i <= t + k; ++i) {
    Index c = std::min(T - 1, std::max<Index>(0, i));
    out.push_back(seq.frames[static_cast<size_t>(c)]);
  }
  return out;
}

}  // namespace

StepLog Trainer::step(const SequenceData& seq, Index t) {
  losses::LossReport report;
  Var total = accumulate_pair(seq, t, 1.0, &report);
  backward(total);
  double norm = clip_global_norm(model_->ps, cfg_.clip_norm);
  if (!std::isfinite(norm)) throw TrainAbort("train: non-finite gradient norm");
  opt_.step(lr_at_epoch(cfg_, epoch_));
  if (cfg_.precision == "single_for_training")
    for (auto& [name, p] : model_->ps.params())
      for (Index i = 0; i < p.numel(); ++i)
        p.value().data[i] =
            static_cast<double>(static_cast<float>(p.value().data[i]));
  model_->ps.zero_grad();
  ++step_;
  return StepLog{step_, epoch_, lr_at_epoch(cfg_, epoch_), norm, report};
}

Var Trainer::accumulate_pair(const SequenceData& seq, Index t, double scale,
                             losses::LossReport* report) {
  Index T = seq.clean.length();
  require(T >= 2 && t >= 1 && t < T, "train: target index out of range");
  Index H = seq.clean.height(), W = seq.clean.width();
  const bool no_umse = cfg_.ablation == "no_umse";

  // flow between the two targets: trains through L_flow / L_temp unless frozen
  const Tensor& dprev = seq.degraded.frames[static_cast<size_t>(t - 1)];
  const Tensor& dcur = seq.degraded.frames[static_cast<size_t>(t)];
  Var flow_hat = model_->flow_net.estimate_flow(
      Var(Tensor({1, 3, H, W}, dprev.data)), Var(Tensor({1, 3, H, W}, dcur.data)));
  Var flow_for_temp = (cfg_.stop_flow_gradient || no_umse)
                          ? Var(flow_hat.value())
                          : flow_hat;

  // one noise level per step, shared by both frames so the temporal term
  // compares estimates of equal fidelity
  std::uniform_int_distribution<Index> tdist(1, cfg_.sampler_T);
  Index ts = tdist(rng_);
  // x0-space terms are damped by alpha_bar: predict_x0 divides by
  // sqrt(alpha_bar), which amplifies estimation noise at high t and would
  // otherwise dominate the update
  double w_t = sched_.alpha_bar[static_cast<size_t>(ts)];

  auto denoise_target = [&](Index tt) {
    data::StructuralPriors priors;
    priors.frame_index = tt;
    priors.sequence_length = T;
    priors.window_scale = 1.0;
    priors.quality_q = seq.quality_q;
    auto cond = model_->make_cond(clamped_window(seq.degraded, tt, cfg_.window),
                                  clamped_post(seq.degraded, tt, cfg_.post), priors);
    const Tensor& deg = seq.degraded.frames[static_cast<size_t>(tt)];
    const Tensor& cln = seq.clean.frames[static_cast<size_t>(tt)];
    Tensor x0(deg.shape, cln.data - deg.data);
    std::normal_distribution<double> normal(0, 1);
    Tensor noise = Tensor::zeros(x0.shape);
    for (Index i = 0; i < noise.numel(); ++i) noise.data[i] = normal(rng_);
    Tensor xt4({1, 3, H, W}, diffusion::q_sample(x0, ts, noise, sched_).data);
    Var eps_hat = model_->denoiser.forward(Var(xt4), ts, cond);
    Var l_eps = mean(square(sub(eps_hat, Var(Tensor({1, 3, H, W}, noise.data)))));
    Var f_hat = add(diffusion::predict_x0(eps_hat, xt4, ts, sched_),
                    Var(Tensor({1, 3, H, W}, deg.data)));
    Var l_rec = losses::charbonnier(f_hat, Var(Tensor({1, 3, H, W}, cln.data)));
    return std::make_tuple(f_hat, l_rec, l_eps);
  };

  auto [f_prev, rec_a, eps_a] = denoise_target(t - 1);
  auto [f_cur, rec_b, eps_b] = denoise_target(t);

  losses::LossTerms terms;
  terms.rec = muls(add(rec_a, rec_b), 0.5 * w_t);
  terms.eps = muls(add(eps_a, eps_b), 0.5);
  terms.temp = muls(
      losses::temporal_consistency_loss({f_prev, f_cur}, {flow_for_temp}), w_t);
  if (!no_umse) {
    data::FlowField ref = seq.ref_flows.empty()
                              ? flow::block_match_oracle(dprev, dcur, 4, 8)
                              : seq.ref_flows[static_cast<size_t>(t - 1)];
    terms.flow = losses::flow_consistency_loss({flow_hat}, {flow::to_var(ref)});
  }
  losses::LossReport local;
  Var total;
  try {
    total = losses::total_loss(terms, cfg_.weights, &local);
  } catch (const std::runtime_error& e) {
    throw TrainAbort(e.what());
  }
  if (report) *report = local;
  return scale == 1.0 ? total : muls(total, scale);
}

TrainOutcome Trainer::run(const std::vector<SequenceData>& dataset,
                          std::ostream* log, Index max_steps,
                          const std::function<bool(Index)>& stop_cb) {
  require(!dataset.empty(), "train: empty dataset");
  TrainOutcome out;
  // deterministic target enumeration: (sequence, t) pairs
  std::vector<std::pair<Index, Index>> targets;
  for (Index s = 0; s < static_cast<Index>(dataset.size()); ++s)
    for (Index t = 1; t < dataset[static_cast<size_t>(s)].clean.length(); ++t)
      targets.emplace_back(s, t);

  bool first = true;
  for (epoch_ = 0; epoch_ < cfg_.epochs; ++epoch_) {
    // fresh shuffle each epoch from the run's seeded stream
    std::vector<std::pair<Index, Index>> order = targets;
    for (size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[rng_() % i]);
    double lr = lr_at_epoch(cfg_, epoch_);
    size_t cursor = 0;
    while (cursor < order.size()) {
      Index n = std::min<Index>(cfg_.batch,
                                static_cast<Index>(order.size() - cursor));
      losses::LossReport avg;
      Var batch_total;
      try {
        for (Index b = 0; b < n; ++b) {
          auto [s, t] = order[cursor++];
          losses::LossReport rep;
          Var part = accumulate_pair(dataset[static_cast<size_t>(s)], t,
                                     1.0 / static_cast<double>(n), &rep);
          batch_total = batch_total.valid() ? add(batch_total, part) : part;
          avg.total += rep.total / n;
          avg.rec += rep.rec / n;
          avg.temp += rep.temp / n;
          avg.flow += rep.flow / n;
          avg.eps += rep.eps / n;
        }
      } catch (const TrainAbort&) {
        model_->ps.zero_grad();
        out.aborted = true;
        return out;
      }
      backward(batch_total);
      double norm = clip_global_norm(model_->ps, cfg_.clip_norm);
      if (!std::isfinite(norm)) {
        model_->ps.zero_grad();
        out.aborted = true;
        return out;
      }
      opt_.step(lr);
      if (cfg_.precision == "single_for_training")
        for (auto& [name, p] : model_->ps.params())
          for (Index i = 0; i < p.numel(); ++i)
            p.value().data[i] =
                static_cast<double>(static_cast<float>(p.value().data[i]));
      model_->ps.zero_grad();
      ++step_;
      ++out.steps_run;
      if (first) {
        out.first_total = avg.total;
        first = false;
      }
      out.last_total = avg.total;
      if (log) {
        json j;
        j["step"] = step_;
        j["epoch"] = epoch_;
        j["lr"] = lr;
        j["losses"] = {{"total", avg.total}, {"rec", avg.rec},
                       {"temp", avg.temp},  {"flow", avg.flow},
                       {"eps", avg.eps}};
        j["grad_norm"] = norm;
        (*log) << j.dump() << '\n';
      }
      if (max_steps > 0 && out.steps_run >= max_steps) return out;
      if (stop_cb && stop_cb(out.steps_run)) return out;
    }
  }
  return out;
}

std::uint64_t config_fingerprint(const diffusion::Model& model) {
  auto fnv = [](std::uint64_t h, const void* data, size_t n) {
    const unsigned char* p = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < n; ++i) {
      h ^= p[i];
      h *= 1099511628211ULL;
    }
    return h;
  };
  std::uint64_t h = 14695981039346656037ULL;
  for (const auto& [name, p] : model.ps.params()) {
    h = fnv(h, name.data(), name.size());
    for (Index d : p.shape()) {
      std::int64_t v = d;
      h = fnv(h, &v, sizeof(v));
    }
  }
  std::int64_t knobs[] = {static_cast<std::int64_t>(model.cfg.ablation),
                          static_cast<std::int64_t>(model.cfg.denoiser.injection),
                          model.cfg.window, model.cfg.post, model.cfg.sampler_T,
                          model.cfg.denoiser.base_channels};
  h = fnv(h, knobs, sizeof(knobs));
  return h;
}

namespace {

template <typename T>
void put(std::ostream& os, const T& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T take(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw std::runtime_error("checkpoint: truncated file");
  return v;
}

void put_floats(std::ostream& os, const Array& a) {
  for (Index i = 0; i < a.size(); ++i) put(os, static_cast<float>(a[i]));
}

void take_floats(std::istream& is, Array& a) {
  for (Index i = 0; i < a.size(); ++i)
    a[i] = static_cast<double>(take<float>(is));
}

constexpr char kMagic[8] = {'U', 'M', 'A', 'D', 'C', 'K', 'P', '1'};

}  // namespace

void save_checkpoint(const std::string& path, diffusion::Model& model,
                     const TrainConfig& cfg, Index epoch, const Adam* opt) {
  // quantize in memory first so the running model matches the archive
  for (auto& [name, p] : model.ps.params())
    for (Index i = 0; i < p.numel(); ++i)
      p.value().data[i] = static_cast<double>(static_cast<float>(p.value().data[i]));
  if (opt)
    for (auto& [name, slot] : const_cast<Adam*>(opt)->state()) {
      for (Index i = 0; i < slot.m.size(); ++i) {
        slot.m[i] = static_cast<double>(static_cast<float>(slot.m[i]));
        slot.v[i] = static_cast<double>(static_cast<float>(slot.v[i]));
      }
    }

  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("checkpoint: cannot write " + path);
  os.write(kMagic, 8);
  put<std::uint64_t>(os, config_fingerprint(model));
  std::string cj = config_to_json(cfg);
  put<std::uint32_t>(os, static_cast<std::uint32_t>(cj.size()));
  os.write(cj.data(), static_cast<std::streamsize>(cj.size()));
  put<std::int64_t>(os, epoch);
  put<std::uint32_t>(os, static_cast<std::uint32_t>(model.ps.params().size()));
  std::uint64_t payload = 0;
  for (const auto& [name, p] : model.ps.params()) {
    put<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    put<std::uint32_t>(os, static_cast<std::uint32_t>(p.shape().size()));
    for (Index d : p.shape()) put<std::int64_t>(os, d);
    payload += static_cast<std::uint64_t>(p.numel()) * sizeof(float);
  }
  std::uint8_t has_opt = opt ? 1 : 0;
  put(os, has_opt);
  if (opt) {
    put<std::int64_t>(os, opt->step_count());
    payload *= 3;  // m and v ride along
  }
  put<std::uint64_t>(os, payload);
  for (const auto& [name, p] : model.ps.params()) put_floats(os, p.value().data);
  if (opt) {
    const auto& st = opt->state();
    for (const auto& [name, p] : model.ps.params()) {
      put_floats(os, st.at(name).m);
      put_floats(os, st.at(name).v);
    }
  }
}

namespace {

CheckpointInfo load_impl(const std::string& path, diffusion::Model* model,
                         Adam* opt) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("checkpoint: cannot read " + path);
  char magic[8];
  is.read(magic, 8);
  if (!is || std::memcmp(magic, kMagic, 8) != 0)
    throw std::runtime_error("checkpoint: bad magic");
  std::uint64_t fp = take<std::uint64_t>(is);
  std::uint32_t cjlen = take<std::uint32_t>(is);
  std::string cj(cjlen, '\0');
  is.read(cj.data(), cjlen);
  if (!is) throw std::runtime_error("checkpoint: truncated config");
  CheckpointInfo info;
  info.config = config_from_json(cj);
  info.epoch = take<std::int64_t>(is);
  std::uint32_t nparams = take<std::uint32_t>(is);

  struct Entry {
    std::string name;
    Shape shape;
    Index numel;
  };
  std::vector<Entry> entries;
  for (std::uint32_t i = 0; i < nparams; ++i) {
    std::uint32_t nlen = take<std::uint32_t>(is);
    std::string name(nlen, '\0');
    is.read(name.data(), nlen);
    std::uint32_t nd = take<std::uint32_t>(is);
    Shape shape;
    Index numel = 1;
    for (std::uint32_t d = 0; d < nd; ++d) {
      shape.push_back(take<std::int64_t>(is));
      numel *= shape.back();
    }
    entries.push_back({std::move(name), std::move(shape), numel});
  }
  std::uint8_t has_opt = take<std::uint8_t>(is);
  Index opt_t = has_opt ? take<std::int64_t>(is) : 0;
  std::uint64_t payload = take<std::uint64_t>(is);

  // payload length check against the actual file tail
  auto here = is.tellg();
  is.seekg(0, std::ios::end);
  std::uint64_t avail = static_cast<std::uint64_t>(is.tellg() - here);
  is.seekg(here);
  if (avail != payload)
    throw std::runtime_error("checkpoint: payload length mismatch");

  if (!model) return info;

  if (fp != config_fingerprint(*model)) {
    // locate the first divergence for the error message
    auto it = model->ps.params().begin();
    for (const auto& e : entries) {
      if (it == model->ps.params().end() || it->first != e.name ||
          it->second.shape() != e.shape)
        throw std::runtime_error("checkpoint: topology mismatch at parameter " +
                                 e.name);
      ++it;
    }
    throw std::runtime_error("checkpoint: topology mismatch (config knobs)");
  }

  for (const auto& e : entries) {
    Var& p = model->ps.at(e.name);
    take_floats(is, p.value().data);
  }
  if (has_opt && opt) {
    *opt = Adam(model->ps, info.config.adam_beta1, info.config.adam_beta2);
    for (const auto& e : entries) {
      take_floats(is, opt->state().at(e.name).m);
      take_floats(is, opt->state().at(e.name).v);
    }
    opt->set_step_count(opt_t);
  }
  return info;
}

}  // namespace

CheckpointInfo load_checkpoint(const std::string& path, diffusion::Model& model,
                               Adam* opt) {
  return load_impl(path, &model, opt);
}

CheckpointInfo peek_checkpoint(const std::string& path) {
  return load_impl(path, nullptr, nullptr);
}

EvalResult evaluate(diffusion::Model& model, const std::vector<SequenceData>& dataset,
                    std::uint64_t seed, RestoreFn restore_fn) {
  require(!dataset.empty(), "evaluate: empty dataset");
  if (!restore_fn)
    restore_fn = [&](const SequenceData& s) {
      diffusion::SamplerConfig sam;
      sam.T = model.cfg.sampler_T;
      sam.seed = seed;
      return diffusion::restore(model, s.degraded, sam, s.quality_q);
    };
  EvalResult r;
  for (const auto& s : dataset) {
    auto restored = restore_fn(s);
    r.per_sequence.push_back(metrics::evaluate_sequences(restored, s.clean));
  }
  auto n = static_cast<double>(r.per_sequence.size());
  for (const auto& m : r.per_sequence) {
    r.aggregate.psnr_db += m.psnr_db / n;
    r.aggregate.ssim += m.ssim / n;
    r.aggregate.tof += m.tof / n;
    r.aggregate.mean_flow_mag += m.mean_flow_mag / n;
  }
  return r;
}

}  // namespace umad::train
