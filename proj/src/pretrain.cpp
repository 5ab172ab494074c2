#include "terse/pretrain.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

namespace terse::model {

nlohmann::json to_json(const PretrainConfig& c) {
  return {{"epochs", c.epochs},       {"lr", c.lr},
          {"batch_size", c.batch_size}, {"warmup_frac", c.warmup_frac},
          {"min_lr_frac", c.min_lr_frac}, {"grad_clip", c.grad_clip},
          {"seed", c.seed},           {"check_finite", c.check_finite}};
}

PretrainConfig pretrain_config_from_json(const nlohmann::json& j) {
  PretrainConfig c;
  for (const auto& [key, value] : j.items()) {
    if (key == "epochs") c.epochs = value.get<int>();
    else if (key == "lr") c.lr = value.get<double>();
    else if (key == "batch_size") c.batch_size = value.get<int>();
    else if (key == "warmup_frac") c.warmup_frac = value.get<double>();
    else if (key == "min_lr_frac") c.min_lr_frac = value.get<double>();
    else if (key == "grad_clip") c.grad_clip = value.get<double>();
    else if (key == "seed") c.seed = value.get<std::uint64_t>();
    else if (key == "check_finite") c.check_finite = value.get<bool>();
    else throw ContractError("pretrain config: unknown key '" + key + "'");
  }
  return c;
}

Tensor sequence_loss(Graph& g, const Transformer& model, const task::TraceRecord& record) {
  const auto seq = record.full_sequence();
  if (seq.size() < 2) throw ContractError("sequence_loss: sequence too short");
  std::vector<int> inputs(seq.begin(), seq.end() - 1);
  std::vector<int> targets(seq.begin() + 1, seq.end());
  std::vector<bool> mask_v(targets.size());
  for (std::size_t t = 0; t < targets.size(); ++t) mask_v[t] = t + 1 >= record.prompt.size();
  std::unique_ptr<bool[]> mask(new bool[mask_v.size()]);
  std::copy(mask_v.begin(), mask_v.end(), mask.get());
  const auto fr = model.forward(g, inputs);
  return g.cross_entropy(fr.logits, targets, std::span<const bool>(mask.get(), mask_v.size()));
}

namespace {

std::string rng_text(const std::mt19937_64& rng) {
  std::ostringstream os;
  os << rng;
  return os.str();
}

double schedule(const PretrainConfig& cfg, std::uint64_t step, std::uint64_t total) {
  const auto warm = static_cast<std::uint64_t>(std::ceil(cfg.warmup_frac * static_cast<double>(total)));
  if (step < warm) return cfg.lr * static_cast<double>(step + 1) / static_cast<double>(warm);
  const double progress = total > warm ? static_cast<double>(step - warm) / static_cast<double>(total - warm) : 1.0;
  const double floor = cfg.min_lr_frac * cfg.lr;
  return floor + 0.5 * (cfg.lr - floor) * (1.0 + std::cos(M_PI * std::min(1.0, progress)));
}

}  // namespace

PretrainResult pretrain(const std::vector<task::TraceRecord>& corpus, const ModelConfig& model_cfg,
                        const PretrainConfig& cfg, const ProgressFn& progress) {
  if (corpus.empty()) throw ContractError("pretrain: empty corpus");
  if (cfg.epochs <= 0 || cfg.batch_size <= 0) throw ContractError("pretrain: epochs and batch size must be positive");
  if (!(cfg.lr > 0.0)) throw ContractError("pretrain: learning rate must be positive");
  for (const auto& r : corpus)
    if (r.full_sequence().size() > static_cast<std::size_t>(model_cfg.max_context))
      throw ContractError("pretrain: corpus sequence longer than max_context");

  PretrainResult res;
  Checkpoint& ck = res.checkpoint;
  ck.model = Transformer(model_cfg, task::mix_seed(cfg.seed, 0xC0FFEE));
  auto params = ck.model.parameters();
  ck.optimizer = AdamState::for_params(params);
  std::mt19937_64 rng(cfg.seed);

  const std::size_t bs = static_cast<std::size_t>(cfg.batch_size);
  const std::size_t batches_per_epoch = (corpus.size() + bs - 1) / bs;
  const std::uint64_t total = batches_per_epoch * static_cast<std::uint64_t>(cfg.epochs);
  std::vector<std::size_t> order(corpus.size());
  std::iota(order.begin(), order.end(), 0);

  Checkpoint last_good;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t b = 0; b < batches_per_epoch; ++b) {
      const std::size_t lo = b * bs, hi = std::min(corpus.size(), lo + bs);
      const double scale = 1.0 / static_cast<double>(hi - lo);
      ck.model.zero_grad();
      double loss_sum = 0.0;
      for (std::size_t i = lo; i < hi; ++i) {
        Graph g;
        g.set_check_finite(cfg.check_finite);
        Tensor loss = sequence_loss(g, ck.model, corpus[order[i]]);
        loss_sum += loss.item();
        g.backward(g.scale(loss, scale));
      }
      const double mean_loss = loss_sum * scale;
      if (!std::isfinite(mean_loss)) {
        if (last_good.model.parameters().empty()) last_good.model = ck.model.deep_copy();
        throw TrainingDiverged("pretrain: loss became non-finite at step " + std::to_string(ck.step),
                               std::move(last_good));
      }
      if (ck.step % 50 == 0) {
        last_good.model = ck.model.deep_copy();
        last_good.step = ck.step;
      }
      if (cfg.grad_clip > 0.0) clip_grad_norm(params, cfg.grad_clip);
      const double lr = schedule(cfg, ck.step, total);
      adam_step(params, ck.optimizer, lr);
      TrainLogRow row{ck.step, mean_loss, lr};
      res.log.push_back(row);
      if (progress) progress(row);
      ++ck.step;
    }
  }
  ck.model.zero_grad();
  ck.rng_state = rng_text(rng);
  return res;
}

void write_train_log(const std::string& path, const std::vector<TrainLogRow>& log) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << "step,loss,lr\n";
  out.precision(17);
  for (const auto& r : log) out << r.step << ',' << r.loss << ',' << r.lr << '\n';
}

}  // namespace terse::model
