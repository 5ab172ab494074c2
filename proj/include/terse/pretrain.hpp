#pragma once

#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "terse/checkpoint.hpp"
#include "terse/task.hpp"

namespace terse::model {

struct PretrainConfig {
  int epochs = 2;
  double lr = 3e-3;
  int batch_size = 16;      // sequences per optimiser step
  double warmup_frac = 0.03;
  double min_lr_frac = 0.05;  // cosine floor, relative to lr
  double grad_clip = 1.0;
  std::uint64_t seed = 1;
  bool check_finite = false;
};

nlohmann::json to_json(const PretrainConfig& c);
PretrainConfig pretrain_config_from_json(const nlohmann::json& j);

struct TrainLogRow {
  std::uint64_t step = 0;
  double loss = 0.0;
  double lr = 0.0;
};

struct PretrainResult {
  Checkpoint checkpoint;
  std::vector<TrainLogRow> log;
};

// Loss went non-finite; carries the parameters from before the bad step.
class TrainingDiverged : public std::runtime_error {
 public:
  TrainingDiverged(const std::string& what, Checkpoint last_good)
      : std::runtime_error(what), last_good(std::move(last_good)) {}
  Checkpoint last_good;
};

// Next-token loss on prompt ++ response, supervised on response tokens only.
Tensor sequence_loss(Graph& g, const Transformer& model, const task::TraceRecord& record);

using ProgressFn = std::function<void(const TrainLogRow&)>;

// Shuffled mini-batch Adam with linear warmup and cosine decay.
PretrainResult pretrain(const std::vector<task::TraceRecord>& corpus, const ModelConfig& model_cfg,
                        const PretrainConfig& cfg, const ProgressFn& progress = {});

void write_train_log(const std::string& path, const std::vector<TrainLogRow>& log);

}  // namespace terse::model
