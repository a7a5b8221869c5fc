#include "amecam/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <random>

#include "amecam/error.hpp"
#include "amecam/log.hpp"

namespace amecam {

using json = nlohmann::json;

std::string to_string(Phase p) {
  switch (p) {
    case Phase::Pretrain: return "pretrain";
    case Phase::MultiExit: return "multi_exit";
    case Phase::Aggregation: return "aggregation";
  }
  return "pretrain";
}

Phase phase_from_string(const std::string& s) {
  if (s == "pretrain") return Phase::Pretrain;
  if (s == "multi_exit") return Phase::MultiExit;
  if (s == "aggregation") return Phase::Aggregation;
  throw Error(ErrorCode::BadConfig, "unknown phase '" + s + "'");
}

std::string to_string(OptimizerKind k) { return k == OptimizerKind::Adam ? "adam" : "sgd"; }

// ---------------------------------------------------------------- config

void PhaseConfig::validate() const {
  if (!(lr_min <= lr_init) || lr_min < 0.0) throw Error(ErrorCode::BadConfig, "need 0 <= lr_min <= lr_init");
  if (epochs < 0) throw Error(ErrorCode::BadConfig, "epochs must be >= 0");
  if (batch_size < 1) throw Error(ErrorCode::BadConfig, "batch_size must be >= 1");
  if ((phase == Phase::Pretrain || phase == Phase::Aggregation) && batch_size < 2) {
    throw Error(ErrorCode::BadConfig, "contrastive phases need batch_size >= 2");
  }
  if (!(temperature > 0.0)) throw Error(ErrorCode::BadConfig, "temperature must be > 0");
  if (weight_decay < 0.0) throw Error(ErrorCode::BadConfig, "weight_decay must be >= 0");
}

PhaseConfig default_phase_config(Phase phase) {
  PhaseConfig c;
  c.phase = phase;
  c.optimizer = phase == Phase::Aggregation ? OptimizerKind::Sgd : OptimizerKind::Adam;
  return c;
}

PhaseConfig phase_config_from_json(const json& j, Phase phase) {
  PhaseConfig c = default_phase_config(phase);
  try {
    c.lr_init = j.value("lr_init", c.lr_init);
    c.lr_min = j.value("lr_min", c.lr_min);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    c.epochs = j.value("epochs", c.epochs);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.seed = j.value("seed", c.seed);
    c.temperature = j.value("temperature", c.temperature);
    c.sgd_momentum = j.value("sgd_momentum", c.sgd_momentum);
    c.accuracy_target = j.value("accuracy_target", c.accuracy_target);
    if (j.contains("optimizer")) {
      const auto name = j.at("optimizer").get<std::string>();
      OptimizerKind kind;
      if (name == "adam") kind = OptimizerKind::Adam;
      else if (name == "sgd") kind = OptimizerKind::Sgd;
      else throw Error(ErrorCode::BadConfig, "unknown optimizer '" + name + "'");
      c.optimizer_overridden = kind != c.optimizer;
      c.optimizer = kind;
    }
  } catch (const json::exception& ex) {
    throw Error(ErrorCode::BadConfig, to_string(phase) + ": " + ex.what());
  }
  c.validate();
  return c;
}

json to_json(const PhaseConfig& c) {
  return {{"phase", to_string(c.phase)},
          {"lr_init", c.lr_init},
          {"lr_min", c.lr_min},
          {"weight_decay", c.weight_decay},
          {"optimizer", to_string(c.optimizer)},
          {"optimizer_overridden", c.optimizer_overridden},
          {"epochs", c.epochs},
          {"batch_size", c.batch_size},
          {"seed", c.seed},
          {"temperature", c.temperature},
          {"sgd_momentum", c.sgd_momentum},
          {"accuracy_target", c.accuracy_target}};
}

double cosine_lr(int step, int total, double lr_init, double lr_min) {
  if (total < 1 || step < 0 || step > total) {
    throw Error(ErrorCode::BadStep, "step " + std::to_string(step) + " outside [0," + std::to_string(total) + "]");
  }
  return lr_min + (lr_init - lr_min) * (1.0 + std::cos(std::numbers::pi * step / total)) / 2.0;
}

// ------------------------------------------------------------ optimizers

Adam::Adam(nn::ParameterList params, double weight_decay, double beta1, double beta2, double eps)
    : weight_decay_(weight_decay), beta1_(beta1), beta2_(beta2), eps_(eps) {
  for (auto& p : params) {
    if (p.param->is_buffer) continue;
    params_.push_back(p);
    m_.emplace_back(p.param->value.size(), 0.0f);
    v_.emplace_back(p.param->value.size(), 0.0f);
  }
}

void Adam::step(double lr) {
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& value = params_[i].param->value;
    const auto& grad = params_[i].param->grad;
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t j = 0; j < value.size(); ++j) {
      const double g = grad[j] + weight_decay_ * value[j];
      m[j] = static_cast<float>(beta1_ * m[j] + (1.0 - beta1_) * g);
      v[j] = static_cast<float>(beta2_ * v[j] + (1.0 - beta2_) * g * g);
      const double mh = m[j] / c1, vh = v[j] / c2;
      value[j] = static_cast<float>(value[j] - lr * mh / (std::sqrt(vh) + eps_));
    }
  }
}

Sgd::Sgd(nn::ParameterList params, double momentum, double weight_decay)
    : momentum_(momentum), weight_decay_(weight_decay) {
  for (auto& p : params) {
    if (p.param->is_buffer) continue;
    params_.push_back(p);
    velocity_.emplace_back(p.param->value.size(), 0.0f);
  }
}

void Sgd::step(double lr) {
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& value = params_[i].param->value;
    const auto& grad = params_[i].param->grad;
    auto& vel = velocity_[i];
    for (std::size_t j = 0; j < value.size(); ++j) {
      const double g = grad[j] + weight_decay_ * value[j];
      vel[j] = static_cast<float>(first_ ? g : momentum_ * vel[j] + g);
      value[j] = static_cast<float>(value[j] - lr * vel[j]);
    }
  }
  first_ = false;
}

std::unique_ptr<Optimizer> make_optimizer(const PhaseConfig& cfg, nn::ParameterList params) {
  if (cfg.optimizer == OptimizerKind::Adam) return std::make_unique<Adam>(std::move(params), cfg.weight_decay);
  return std::make_unique<Sgd>(std::move(params), cfg.sgd_momentum, cfg.weight_decay);
}

// ----------------------------------------------------------------- model

AmeCamModel::AmeCamModel(const BackboneConfig& backbone_cfg, const AggregationConfig& aggregation_cfg,
                         std::uint64_t seed)
    : backbone(backbone_cfg), aggregation(aggregation_cfg), net(backbone_cfg, seed),
      agg(aggregation_cfg, backbone_cfg.stage_channels, seed + 1000) {}

namespace {

const json& require_key(const Checkpoint& ckpt, const char* key) {
  if (!ckpt.metadata.contains(key)) {
    throw Error(ErrorCode::IncompatibleCheckpoint, std::string("checkpoint metadata lacks '") + key + "'");
  }
  return ckpt.metadata.at(key);
}

}  // namespace

AmeCamModel::AmeCamModel(const Checkpoint& ckpt)
    : AmeCamModel(backbone_from_json(require_key(ckpt, "backbone")),
                  aggregation_from_json(require_key(ckpt, "aggregation")), ckpt.metadata.value("seed", 0ull)) {
  restore_parameters(ckpt, all_parameters());
}

nn::ParameterList AmeCamModel::all_parameters() {
  auto out = net.parameters();
  auto a = agg.parameters();
  out.insert(out.end(), a.begin(), a.end());
  return out;
}

Checkpoint AmeCamModel::to_checkpoint(json metadata) {
  Checkpoint ckpt;
  store_parameters(all_parameters(), ckpt);
  metadata["backbone"] = to_json(backbone);
  metadata["aggregation"] = to_json(aggregation);
  ckpt.metadata = std::move(metadata);
  return ckpt;
}

Checkpoint initial_checkpoint(const BackboneConfig& backbone, const AggregationConfig& aggregation,
                              std::uint64_t seed) {
  AmeCamModel model(backbone, aggregation, seed);
  return model.to_checkpoint({{"phase", "init"}, {"epoch", 0}, {"seed", seed}, {"metrics", json::array()}});
}

// --------------------------------------------------------------- metrics

json to_json(const EpochMetrics& m) {
  json acc = json::array();
  for (const auto& a : m.exit_accuracy) acc.push_back(a ? json(*a) : json(nullptr));
  return {{"epoch", m.epoch}, {"phase", to_string(m.phase)}, {"loss", m.loss}, {"exit_accuracy", acc}, {"lr", m.lr}};
}

std::vector<EpochMetrics> metrics_trail(const Checkpoint& ckpt) {
  std::vector<EpochMetrics> out;
  if (!ckpt.metadata.contains("metrics")) return out;
  for (const auto& j : ckpt.metadata.at("metrics")) {
    EpochMetrics m;
    m.epoch = j.at("epoch").get<int>();
    m.phase = phase_from_string(j.at("phase").get<std::string>());
    m.loss = j.at("loss").get<double>();
    m.lr = j.at("lr").get<double>();
    const auto& acc = j.at("exit_accuracy");
    for (int k = 0; k < kNumExits && k < static_cast<int>(acc.size()); ++k) {
      if (!acc[k].is_null()) m.exit_accuracy[k] = acc[k].get<double>();
    }
    out.push_back(m);
  }
  return out;
}

std::string metrics_csv(const std::vector<EpochMetrics>& trail) {
  std::string out = "epoch,phase,loss,acc_exit1,acc_exit2,acc_exit3,acc_exit4,lr\n";
  char buf[64];
  for (const auto& m : trail) {
    out += std::to_string(m.epoch) + "," + to_string(m.phase) + ",";
    std::snprintf(buf, sizeof(buf), "%.8g", m.loss);
    out += buf;
    for (const auto& a : m.exit_accuracy) {
      out += ",";
      if (a) {
        std::snprintf(buf, sizeof(buf), "%.6f", *a);
        out += buf;
      }
    }
    std::snprintf(buf, sizeof(buf), ",%.8g\n", m.lr);
    out += buf;
  }
  return out;
}

// ---------------------------------------------------------------- helpers

namespace {

Tensor batch_of(const std::vector<const Image*>& images) {
  return make_batch(std::span<const Image* const>(images.data(), images.size()));
}

std::vector<std::size_t> shuffled_indices(std::size_t n, std::mt19937_64& rng) {
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  for (std::size_t i = n; i > 1; --i) {
    const std::size_t j = rng() % i;
    std::swap(idx[i - 1], idx[j]);
  }
  return idx;
}

json append_metrics(const Checkpoint& init, const std::vector<EpochMetrics>& fresh) {
  json trail = init.metadata.value("metrics", json::array());
  for (const auto& m : fresh) trail.push_back(to_json(m));
  return trail;
}

json base_metadata(const Checkpoint& init, const PhaseConfig& cfg, int epochs_run,
                   const std::vector<EpochMetrics>& fresh) {
  json meta = init.metadata;
  meta["phase"] = to_string(cfg.phase);
  meta["epoch"] = epochs_run;
  meta["phase_config"] = to_json(cfg);
  json history = meta.value("phase_history", json::array());
  history.push_back(to_json(cfg));
  meta["phase_history"] = history;
  meta["metrics"] = append_metrics(init, fresh);
  return meta;
}

void require_phase(const PhaseConfig& cfg, Phase expected) {
  if (cfg.phase != expected) {
    throw Error(ErrorCode::BadConfig, "phase config is for " + to_string(cfg.phase) + ", expected " +
                                          to_string(expected));
  }
  cfg.validate();
}

}  // namespace

std::array<double, kNumExits> exit_accuracy(MultiExitNet& net, const std::vector<LabeledImage>& samples,
                                            int batch_size) {
  std::array<double, kNumExits> acc{};
  if (samples.empty()) return acc;
  std::array<long long, kNumExits> correct{};
  for (std::size_t start = 0; start < samples.size(); start += batch_size) {
    const std::size_t end = std::min(samples.size(), start + static_cast<std::size_t>(batch_size));
    std::vector<const Image*> images;
    for (std::size_t i = start; i < end; ++i) images.push_back(&samples[i].image);
    const auto out = net.forward(batch_of(images), nn::Mode::Eval);
    const int classes = out.logits[0].dim(1);
    for (int k = 0; k < kNumExits; ++k) {
      for (std::size_t i = start; i < end; ++i) {
        const float* row = out.logits[k].data() + (i - start) * classes;
        const int pred = static_cast<int>(std::max_element(row, row + classes) - row);
        correct[k] += pred == samples[i].label;
      }
    }
  }
  for (int k = 0; k < kNumExits; ++k) acc[k] = static_cast<double>(correct[k]) / static_cast<double>(samples.size());
  return acc;
}

Image augment_view(const Image& image, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  const int h = image.height, w = image.width;
  const bool flip = u01(rng) < 0.5;
  const double scale = 0.6 + 0.4 * u01(rng);
  const int ch = std::max(2, static_cast<int>(std::round(h * scale)));
  const int cw = std::max(2, static_cast<int>(std::round(w * scale)));
  const int y0 = static_cast<int>(u01(rng) * (h - ch + 1));
  const int x0 = static_cast<int>(u01(rng) * (w - cw + 1));
  const double gain = 0.8 + 0.4 * u01(rng);
  const double offset = -0.1 + 0.2 * u01(rng);

  Image crop(ch, cw);
  for (int y = 0; y < ch; ++y) {
    for (int x = 0; x < cw; ++x) {
      const int sx = flip ? w - 1 - (x0 + x) : x0 + x;
      crop(y, x) = image(std::min(y0 + y, h - 1), std::clamp(sx, 0, w - 1));
    }
  }
  Image out = resize_bilinear(crop, h, w);
  for (auto& v : out.values) v = static_cast<float>(std::clamp(v * gain + offset, 0.0, 1.0));
  return out;
}

// ------------------------------------------------------------- pretrain

Checkpoint run_pretrain_phase(const PhaseConfig& cfg, const TrainingData& data, const Checkpoint& init) {
  require_phase(cfg, Phase::Pretrain);
  AmeCamModel model(init);
  if (cfg.epochs == 0) return model.to_checkpoint(base_metadata(init, cfg, 0, {}));

  std::array<std::vector<std::size_t>, 2> by_class;
  for (std::size_t i = 0; i < data.train.size(); ++i) {
    const int label = data.train[i].label;
    if (label < 0 || label > 1) throw Error(ErrorCode::BadConfig, "pretraining expects binary labels");
    by_class[label].push_back(i);
  }
  for (int c = 0; c < 2; ++c) {
    if (by_class[c].size() < 2) {
      throw Error(ErrorCode::SamplerInfeasible, "class " + std::to_string(c) + " has fewer than 2 training slices");
    }
  }

  auto params = model.net.parameters();
  auto optimizer = make_optimizer(cfg, params);
  std::mt19937_64 rng(cfg.seed);
  const std::size_t per_class = std::max(1, cfg.batch_size / 2);
  const std::size_t batches = std::max<std::size_t>(1, (data.train.size() + cfg.batch_size - 1) / cfg.batch_size);
  std::vector<EpochMetrics> trail;

  // Class-balanced queues, reshuffled whenever exhausted.
  std::array<std::vector<std::size_t>, 2> queue;
  std::array<std::size_t, 2> cursor{0, 0};
  auto draw = [&](int c) {
    if (cursor[c] == queue[c].size()) {
      const auto order = shuffled_indices(by_class[c].size(), rng);
      queue[c].clear();
      for (auto o : order) queue[c].push_back(by_class[c][o]);
      cursor[c] = 0;
    }
    return queue[c][cursor[c]++];
  };

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = cosine_lr(epoch, cfg.epochs, cfg.lr_init, cfg.lr_min);
    double loss_sum = 0.0;
    for (std::size_t b = 0; b < batches; ++b) {
      std::vector<std::size_t> members;
      for (std::size_t i = 0; i < per_class; ++i) {
        members.push_back(draw(0));
        members.push_back(draw(1));
      }
      // Two augmented views per slice; views share the slice's label.
      std::vector<Image> views;
      std::vector<int> labels;
      for (int v = 0; v < 2; ++v) {
        for (auto idx : members) {
          views.push_back(augment_view(data.train[idx].image, rng));
          labels.push_back(data.train[idx].label);
        }
      }
      std::vector<const Image*> ptrs;
      for (const auto& v : views) ptrs.push_back(&v);

      nn::zero_grads(params);
      const auto out = model.net.forward(batch_of(ptrs), nn::Mode::Train);
      const Tensor emb = model.net.project(out.features[kNumExits - 1]);
      const int n = emb.dim(0), d = emb.dim(1);
      std::vector<std::vector<double>> z(n, std::vector<double>(d));
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < d; ++j) z[i][j] = emb[static_cast<std::size_t>(i) * d + j];
      std::vector<std::vector<double>> grads;
      // Embeddings come out of an L2 normalization; the unchecked form avoids
      // rejecting float round-off.
      const double loss = detail::supcon_loss_unchecked(z, labels, cfg.temperature, &grads) / n;
      Tensor d_emb({n, d});
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < d; ++j) d_emb[static_cast<std::size_t>(i) * d + j] = static_cast<float>(grads[i][j] / n);
      std::array<Tensor, kNumExits> feature_grads;
      feature_grads[kNumExits - 1] = model.net.project_backward(d_emb);
      model.net.backward({}, feature_grads);
      optimizer->step(lr);
      loss_sum += loss;
    }
    EpochMetrics m;
    m.epoch = epoch + 1;
    m.phase = Phase::Pretrain;
    m.loss = loss_sum / static_cast<double>(batches);
    m.lr = lr;
    trail.push_back(m);
    log_info("pretrain epoch " + std::to_string(epoch + 1) + " loss " + std::to_string(m.loss));
  }
  return model.to_checkpoint(base_metadata(init, cfg, cfg.epochs, trail));
}

// ----------------------------------------------------------- multi-exit

Checkpoint run_multi_exit_phase(const PhaseConfig& cfg, const TrainingData& data, const Checkpoint& init) {
  require_phase(cfg, Phase::MultiExit);
  AmeCamModel model(init);
  if (cfg.epochs == 0) return model.to_checkpoint(base_metadata(init, cfg, 0, {}));
  if (data.train.empty()) throw Error(ErrorCode::EmptyList, "no training slices");

  auto params = model.net.backbone_parameters();
  auto optimizer = make_optimizer(cfg, params);
  std::mt19937_64 rng(cfg.seed);
  std::vector<EpochMetrics> trail;
  int epochs_run = 0;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = cosine_lr(epoch, cfg.epochs, cfg.lr_init, cfg.lr_min);
    const auto order = shuffled_indices(data.train.size(), rng);
    double loss_sum = 0.0;
    int batches = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      std::vector<const Image*> images;
      for (std::size_t i = start; i < end; ++i) images.push_back(&data.train[order[i]].image);
      const int n = static_cast<int>(images.size());

      nn::zero_grads(params);
      const auto out = model.net.forward(batch_of(images), nn::Mode::Train);
      const int classes = out.logits[0].dim(1);
      std::array<Tensor, kNumExits> logit_grads;
      for (auto& g : logit_grads) g = Tensor({n, classes});
      double loss = 0.0;
      for (int s = 0; s < n; ++s) {
        std::array<std::vector<double>, kNumExits> logits;
        for (int k = 0; k < kNumExits; ++k) {
          const float* row = out.logits[k].data() + static_cast<std::size_t>(s) * classes;
          logits[k].assign(row, row + classes);
        }
        ExitLogitGrads g;
        loss += multi_exit_ce_loss(logits, data.train[order[start + s]].label, &g);
        for (int k = 0; k < kNumExits; ++k)
          for (int c = 0; c < classes; ++c)
            logit_grads[k][static_cast<std::size_t>(s) * classes + c] = static_cast<float>(g.grads[k][c] / n);
      }
      model.net.backward(logit_grads);
      optimizer->step(lr);
      loss_sum += loss / n;
      ++batches;
    }

    EpochMetrics m;
    m.epoch = epoch + 1;
    m.phase = Phase::MultiExit;
    m.loss = loss_sum / batches;
    m.lr = lr;
    bool all_above = !data.val.empty();
    if (!data.val.empty()) {
      const auto acc = exit_accuracy(model.net, data.val);
      for (int k = 0; k < kNumExits; ++k) {
        m.exit_accuracy[k] = acc[k];
        all_above = all_above && acc[k] > cfg.accuracy_target;
      }
    }
    trail.push_back(m);
    epochs_run = epoch + 1;
    log_info("multi-exit epoch " + std::to_string(epoch + 1) + " loss " + std::to_string(m.loss));
    if (all_above) break;
  }
  json meta = base_metadata(init, cfg, epochs_run, trail);
  meta["early_stopped"] = epochs_run < cfg.epochs;
  return model.to_checkpoint(meta);
}

// ---------------------------------------------------------- aggregation

ActivationMap compute_map(AmeCamModel& model, const Image& image, MapSource mode) {
  constexpr int kTumorClass = 1;
  const int size = model.backbone.input_size;
  if (mode == MapSource::GradCam) {
    auto cam = grad_cam_reference(image, model.net, kTumorClass);
    cam.values = upsample_map(cam.values, size, size);
    return cam;
  }
  const auto out = forward_multi_exit(image, model.net);
  auto cams = extract_exit_cams(out, model.net, kTumorClass);
  switch (mode) {
    case MapSource::Exit1:
    case MapSource::Exit2:
    case MapSource::Exit3:
    case MapSource::Exit4: return cams[static_cast<int>(mode)];
    case MapSource::Averaged: return average_aggregate(cams);
    case MapSource::Attentive: {
      const auto field = attention_forward(image, cams, model.agg.attention());
      return attentive_aggregate(cams, field);
    }
    case MapSource::GradCam: break;
  }
  throw Error(ErrorCode::BadConfig, "unsupported map mode");
}

Checkpoint run_aggregation_phase(const PhaseConfig& cfg, const TrainingData& data, const Checkpoint& classifier) {
  require_phase(cfg, Phase::Aggregation);
  const auto prior = classifier.metadata.value("phase", std::string());
  if (prior != "multi_exit" && prior != "aggregation") {
    throw Error(ErrorCode::IncompatibleCheckpoint, "aggregation needs a multi_exit checkpoint, got phase '" + prior + "'");
  }
  AmeCamModel model(classifier);
  const bool frozen = model.aggregation.freeze_backbone;
  const std::string hash_before = parameter_hash(model.net.parameters());
  json meta_extra = {{"backbone_hash_before", hash_before}};
  if (cfg.epochs == 0) {
    json meta = base_metadata(classifier, cfg, 0, {});
    meta.update(meta_extra);
    meta["backbone_hash_after"] = hash_before;
    return model.to_checkpoint(meta);
  }

  // The contrastive arm needs a foreground, so it trains on tumor slices only.
  const bool contrastive = model.aggregation.loss == AggregationLoss::C2AM;
  std::vector<const LabeledImage*> pool;
  for (const auto& s : data.train) {
    if (!contrastive || s.label == 1) pool.push_back(&s);
  }
  if (pool.size() < 2) throw Error(ErrorCode::BatchTooSmall, "aggregation phase needs at least 2 training slices");

  std::vector<AggregationSample> samples(pool.size());
  auto refresh = [&](AggregationSample& s, const LabeledImage& src) {
    const auto out = forward_multi_exit(src.image, model.net);
    s.image = &src.image;
    s.cams = extract_exit_cams(out, model.net, 1);
    s.features = out.features;
    s.label = src.label;
  };
  for (std::size_t i = 0; i < pool.size(); ++i) refresh(samples[i], *pool[i]);

  if (contrastive && model.aggregation.warm_start && prior == "multi_exit") {
    std::vector<const AggregationSample*> all;
    for (const auto& s : samples) all.push_back(&s);
    const auto ws = model.agg.warm_start(all, std::max(2, cfg.batch_size));
    const std::string name = ws.chosen < kNumExits ? "exit" + std::to_string(ws.chosen + 1) : "uniform";
    meta_extra["warm_start"] = {{"losses", ws.losses}, {"chosen", name}};
    log_info("aggregation warm start: " + name);
  }

  auto params = model.agg.parameters();
  if (!frozen) {
    auto backbone = model.net.backbone_parameters();
    params.insert(params.end(), backbone.begin(), backbone.end());
  }
  auto optimizer = make_optimizer(cfg, params);
  std::mt19937_64 rng(cfg.seed);
  std::vector<EpochMetrics> trail;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = cosine_lr(epoch, cfg.epochs, cfg.lr_init, cfg.lr_min);
    const auto order = shuffled_indices(samples.size(), rng);
    double loss_sum = 0.0;
    int batches = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      if (contrastive && end - start < 2) continue;
      std::vector<const AggregationSample*> batch;
      std::vector<const Image*> images;
      for (std::size_t i = start; i < end; ++i) {
        if (!frozen) refresh(samples[order[i]], *pool[order[i]]);
        batch.push_back(&samples[order[i]]);
        images.push_back(samples[order[i]].image);
      }
      nn::zero_grads(params);
      auto result = model.agg.train_step(batch);
      if (!frozen && result.d_features[0].size() > 0) {
        // CAM inputs are treated as constants; the backbone learns only through
        // the projected exit features.
        model.net.forward(batch_of(images), nn::Mode::Eval);
        model.net.backward({}, result.d_features);
      }
      optimizer->step(lr);
      loss_sum += result.loss;
      ++batches;
    }
    EpochMetrics m;
    m.epoch = epoch + 1;
    m.phase = Phase::Aggregation;
    m.loss = batches ? loss_sum / batches : 0.0;
    m.lr = lr;
    trail.push_back(m);
    log_info("aggregation epoch " + std::to_string(epoch + 1) + " loss " + std::to_string(m.loss));
  }

  const std::string hash_after = parameter_hash(model.net.parameters());
  if (frozen && hash_after != hash_before) {
    throw std::logic_error("backbone parameters changed during a frozen aggregation phase");
  }
  json meta = base_metadata(classifier, cfg, cfg.epochs, trail);
  meta.update(meta_extra);
  meta["backbone_hash_after"] = hash_after;
  return model.to_checkpoint(meta);
}

}  // namespace amecam
