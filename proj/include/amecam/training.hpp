#pragma once

#include <array>
#include <cstdint>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "amecam/attentive_aggregation.hpp"
#include "amecam/cam_extractor.hpp"
#include "amecam/checkpoint.hpp"
#include "amecam/multi_exit_net.hpp"

namespace amecam {

enum class Phase { Pretrain, MultiExit, Aggregation };
enum class OptimizerKind { Adam, Sgd };

std::string to_string(Phase p);
Phase phase_from_string(const std::string& s);
std::string to_string(OptimizerKind k);

struct PhaseConfig {
  Phase phase = Phase::MultiExit;
  double lr_init = 1e-4;
  double lr_min = 5e-6;
  double weight_decay = 1e-5;
  OptimizerKind optimizer = OptimizerKind::Adam;
  bool optimizer_overridden = false;
  int epochs = 10;
  int batch_size = 32;
  std::uint64_t seed = 0;
  double temperature = 0.07;  // pretrain only
  double sgd_momentum = 0.9;
  double accuracy_target = 0.9;  // multi-exit early stop

  void validate() const;
};

PhaseConfig default_phase_config(Phase phase);
// Missing keys fall back to the phase defaults; an explicit "optimizer" that
// differs from the default is recorded as an override.
PhaseConfig phase_config_from_json(const nlohmann::json& j, Phase phase);
nlohmann::json to_json(const PhaseConfig& c);

// lr_min + (lr_init - lr_min) * (1 + cos(pi * t / T)) / 2
double cosine_lr(int step, int total, double lr_init, double lr_min);

class Optimizer {
 public:
  virtual ~Optimizer() = default;
  virtual void step(double lr) = 0;
};

// Adam with L2 weight decay folded into the gradient.
class Adam : public Optimizer {
 public:
  Adam(nn::ParameterList params, double weight_decay, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);
  void step(double lr) override;

 private:
  nn::ParameterList params_;
  double weight_decay_, beta1_, beta2_, eps_;
  std::vector<std::vector<float>> m_, v_;
  long long t_ = 0;
};

class Sgd : public Optimizer {
 public:
  Sgd(nn::ParameterList params, double momentum, double weight_decay);
  void step(double lr) override;

 private:
  nn::ParameterList params_;
  double momentum_, weight_decay_;
  std::vector<std::vector<float>> velocity_;
  bool first_ = true;
};

std::unique_ptr<Optimizer> make_optimizer(const PhaseConfig& cfg, nn::ParameterList params);

struct LabeledImage {
  std::string case_id;
  int z_index = 0;
  Image image;  // input_size x input_size
  int label = 0;
  std::optional<Mask> gt_mask;
};

struct TrainingData {
  std::vector<LabeledImage> train;
  std::vector<LabeledImage> val;
};

// Backbone, exit heads, contrastive projector and aggregation state.
struct AmeCamModel {
  AmeCamModel(const BackboneConfig& backbone, const AggregationConfig& aggregation, std::uint64_t seed);
  explicit AmeCamModel(const Checkpoint& ckpt);

  BackboneConfig backbone;
  AggregationConfig aggregation;
  MultiExitNet net;
  AggregationModel agg;

  nn::ParameterList all_parameters();
  // Parameters plus the given metadata with config blocks filled in.
  Checkpoint to_checkpoint(nlohmann::json metadata);
};

Checkpoint initial_checkpoint(const BackboneConfig& backbone, const AggregationConfig& aggregation,
                              std::uint64_t seed);

struct EpochMetrics {
  int epoch = 0;
  Phase phase = Phase::Pretrain;
  double loss = 0.0;
  std::array<std::optional<double>, kNumExits> exit_accuracy{};
  double lr = 0.0;
};

nlohmann::json to_json(const EpochMetrics& m);
std::vector<EpochMetrics> metrics_trail(const Checkpoint& ckpt);
// CSV with columns epoch, phase, loss, acc_exit1..acc_exit4, lr.
std::string metrics_csv(const std::vector<EpochMetrics>& trail);

Checkpoint run_pretrain_phase(const PhaseConfig& cfg, const TrainingData& data, const Checkpoint& init);
Checkpoint run_multi_exit_phase(const PhaseConfig& cfg, const TrainingData& data, const Checkpoint& init);
Checkpoint run_aggregation_phase(const PhaseConfig& cfg, const TrainingData& data, const Checkpoint& classifier);

// Fraction of correct argmax predictions per exit (inference mode).
std::array<double, kNumExits> exit_accuracy(MultiExitNet& net, const std::vector<LabeledImage>& samples,
                                            int batch_size = 64);

// Random flip, crop-resize and intensity jitter used for contrastive views.
Image augment_view(const Image& image, std::mt19937_64& rng);

// The map the CLI exports for one image: a single exit, the exit average,
// the attentive aggregate or Grad-CAM, always at input resolution. Target
// class is the tumor class (1).
ActivationMap compute_map(AmeCamModel& model, const Image& image, MapSource mode);

}  // namespace amecam
