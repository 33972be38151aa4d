#pragma once

// Mini-batch training loop shared by all stages, with per-epoch validation and
// best-checkpoint selection (macro-F1, then AUC, then earlier epoch).

#include <cmath>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "srcaware/error.hpp"
#include "srcaware/metrics.hpp"
#include "srcaware/nn/optim.hpp"
#include "srcaware/nn/params.hpp"
#include "srcaware/rng.hpp"

namespace srcaware {

struct TrainConfig {
  int epochs = 8;
  int batch_size = 8;
  nn::OptimizerConfig opt;
};

struct ValMetrics {
  double macro_f1 = 0.0;
  double acc = 0.0;
  std::optional<double> auc;
};

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0.0;
  std::optional<ValMetrics> val;
};

// True when `a` should replace `b` as the selected checkpoint.
inline bool better_epoch(const EpochRecord& a, const EpochRecord& b) {
  if (!a.val) return false;
  if (!b.val) return true;
  if (a.val->macro_f1 != b.val->macro_f1) return a.val->macro_f1 > b.val->macro_f1;
  const double aa = a.val->auc.value_or(-1.0), ba = b.val->auc.value_or(-1.0);
  if (aa != ba) return aa > ba;
  return a.epoch < b.epoch;
}

struct TrainLog {
  std::vector<EpochRecord> epochs;
  int best_epoch = -1;
  long steps = 0;

  const EpochRecord& best() const {
    require(best_epoch >= 0, "training log has no selected epoch");
    return epochs.at(static_cast<std::size_t>(best_epoch));
  }

  nlohmann::json to_json() const {
    nlohmann::json j = nlohmann::json::array();
    for (const auto& e : epochs) {
      nlohmann::json r{{"epoch", e.epoch}, {"train_loss", e.train_loss}};
      if (e.val) {
        r["Macro-F1"] = e.val->macro_f1;
        r["ACC"] = e.val->acc;
        r["AUC"] = e.val->auc ? nlohmann::json(*e.val->auc) : nlohmann::json(nullptr);
      }
      j.push_back(r);
    }
    return {{"epochs", j}, {"best_epoch", best_epoch}, {"steps", steps}};
  }
};

// Validation metrics of binary COVID probabilities (label = p >= 0.5).
inline ValMetrics binary_val_metrics(const std::vector<int>& labels, const std::vector<double>& p_covid) {
  std::vector<int> preds(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) preds[i] = p_covid[i] >= 0.5 ? 1 : 0;
  ValMetrics m;
  const Confusion c = confusion(labels, preds);
  m.acc = accuracy(c);
  m.macro_f1 = macro_f1(c);
  try {
    m.auc = auc(labels, p_covid);
  } catch (const Error&) {
  }
  return m;
}

// Runs `cfg.epochs` epochs over `n_train` samples in a seed-determined order.
// `step(i, rng)` runs forward/backward for sample i, accumulating gradients into
// `ps`, and returns its loss. `eval()` returns validation metrics or nullopt.
// On return `ps` holds the selected epoch's parameters.
template <class T, class StepFn, class EvalFn>
TrainLog run_training(nn::ParamStore<T>& ps, std::size_t n_train, const TrainConfig& cfg, Rng& rng, StepFn&& step,
                      EvalFn&& eval) {
  require(n_train > 0, "training set is empty");
  require(cfg.epochs >= 1 && cfg.batch_size >= 1, "epochs and batch_size must be >= 1");
  const long batches = static_cast<long>((n_train + cfg.batch_size - 1) / cfg.batch_size);
  nn::Optimizer<T> opt(cfg.opt, ps, batches * cfg.epochs);
  ps.zero_grad();
  TrainLog log;
  nn::ParamStore<T> best = ps;
  std::vector<std::size_t> order(n_train);
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), rng.engine());
    double total = 0.0;
    for (std::size_t b0 = 0; b0 < n_train; b0 += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t b1 = std::min(n_train, b0 + static_cast<std::size_t>(cfg.batch_size));
      for (std::size_t k = b0; k < b1; ++k) {
        const double loss = static_cast<double>(step(order[k], rng));
        if (!std::isfinite(loss))
          throw Error("training diverged: non-finite loss at epoch " + std::to_string(epoch) + ", step " +
                      std::to_string(opt.steps_taken()));
        total += loss;
      }
      opt.step(ps, 1.0 / static_cast<double>(b1 - b0));
    }
    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = total / static_cast<double>(n_train);
    rec.val = eval();
    log.epochs.push_back(rec);
    const bool take = log.best_epoch < 0 ? true : better_epoch(rec, log.best());
    // Without validation the last epoch wins.
    if (take || !rec.val) {
      log.best_epoch = epoch;
      best = ps;
    }
  }
  log.steps = opt.steps_taken();
  ps = best;
  return log;
}

}  // namespace srcaware
