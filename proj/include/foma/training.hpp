#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "foma/pipeline.hpp"
#include "foma/serialize.hpp"

namespace foma {

struct TrainConfig {
  ModelConfig model;
  double alpha = 3.0;
  double lr = 5e-5;
  double weight_decay = 5e-5;
  std::size_t epochs = 30;
  std::size_t batch_size = 64;
  std::uint64_t seed = 0;
  std::string schedule = "cosine";  // cosine | constant
  bool focus = true;
  bool detach_maps = false;
  std::optional<std::size_t> eval_grid;

  void validate() const;
  // Flat key/value interface shared by config files and CLI overrides.
  void set(const std::string& key, const std::string& value);
  static const std::vector<std::string>& keys();
  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
};

// `key = value` lines; '#' starts a comment.
TrainConfig load_train_config(const std::filesystem::path& path, TrainConfig base = {});

// Mean softmax cross-entropy; labels index the last axis.
ag::Var cross_entropy(const ag::Var& logits, const std::vector<std::size_t>& labels);

struct LossBreakdown {
  double cls_a = 0, cls_o = 0, cls_c = 0;
  std::optional<double> focus;  // absent when the focus loss is off
  double total = 0;
  nlohmann::json to_json() const;
};

// Adam with L2 weight decay added to the gradient (skipped where decay is off).
class Adam {
 public:
  Adam() = default;
  Adam(nn::ParamList params, double lr, double weight_decay, double beta1 = 0.9, double beta2 = 0.999,
       double eps = 1e-8);

  // grads[i] may be undefined when a parameter did not take part.
  void step(const std::vector<ag::Var>& grads);
  void set_lr(double lr) { lr_ = lr; }
  double lr() const { return lr_; }
  std::uint64_t steps() const { return t_; }
  const nn::ParamList& params() const { return params_; }

  void save_state(TensorArchive& a) const;
  void load_state(const TensorArchive& a, std::uint64_t steps);

 private:
  nn::ParamList params_;
  std::vector<Tensor> m_, v_;
  std::uint64_t t_ = 0;
  double lr_ = 0, wd_ = 0, b1_ = 0.9, b2_ = 0.999, eps_ = 1e-8;
};

double scheduled_lr(const TrainConfig& cfg, std::size_t epoch);

struct TrainingAborted : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// One optimization step on a batch; returns the losses before the update.
LossBreakdown train_step(FomaModel& model, Adam& opt, const TrainConfig& cfg, const SplitData& data,
                         const std::vector<std::size_t>& indices, std::uint64_t pass);

// Losses and gradients of the full objective without updating anything.
struct ObjectiveResult {
  LossBreakdown losses;
  ag::Var total;
};
ObjectiveResult objective(FomaModel& model, const TrainConfig& cfg, const ModelInput& input,
                          const std::vector<std::size_t>& attr, const std::vector<std::size_t>& obj,
                          const std::vector<std::size_t>& comp, bool training);

// ---- checkpoints -----------------------------------------------------------

inline constexpr const char* kCheckpointMagic = "FOMACKPT";
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  TrainConfig config;
  LabelSpace labels;
  std::size_t epoch = 0;
  TensorArchive archive;
};

void save_checkpoint(const std::filesystem::path& path, FomaModel& model, const Adam& opt, const TrainConfig& cfg,
                     std::size_t epoch, const nlohmann::json& extra = nlohmann::json::object());
Checkpoint load_checkpoint(const std::filesystem::path& path);
// Copies parameters and buffers into a freshly built model.
void restore_model(FomaModel& model, const Checkpoint& ckpt);

// ---- loop ------------------------------------------------------------------

struct EpochMetrics {
  std::size_t epoch = 0;
  double lr = 0;
  double cls_a = 0, cls_o = 0, cls_c = 0, total = 0;
  std::optional<double> focus;
  std::optional<SplitReport> val;
  double seconds = 0;
  nlohmann::json to_json() const;
};

struct TrainResult {
  std::vector<EpochMetrics> epochs;
  std::filesystem::path last_checkpoint;
  std::filesystem::path best_checkpoint;
  std::size_t best_epoch = 0;
  double best_hm = -1.0;
};

struct TrainIO {
  std::filesystem::path out_dir;  // steps.jsonl, metrics.jsonl, checkpoints/
  std::function<void(const std::string&)> log;
  bool keep_epoch_checkpoints = true;
};

TrainResult train(const TrainConfig& cfg, const LabelSpace& labels, const DatasetManifest& manifest, const TrainIO& io);
// Same loop on already prepared splits (val may be empty).
TrainResult train_prepared(FomaModel& model, const TrainConfig& cfg, const SplitData& train_data,
                           const SplitData& val_data, const TrainIO& io);

// ---- evaluation of a saved model -------------------------------------------

struct CheckpointEvaluation {
  TrainConfig config;
  SplitScores scores;
  SplitReport report;  // fused and composition-only
};

// Evaluation-mode forward over one split, fused sweep and summary. Reports
// carry an alpha/tau/seed echo.
CheckpointEvaluation evaluate_checkpoint(const std::filesystem::path& checkpoint, const DatasetManifest& manifest,
                                         Split split, std::optional<std::size_t> grid = std::nullopt);
CheckpointEvaluation evaluate_model(FomaModel& model, const TrainConfig& cfg, const SplitData& data,
                                    std::optional<std::size_t> grid = std::nullopt);

}  // namespace foma
