#pragma once

// Cross-validation / ablation driver: iterates (variant, tap, fold, seed)
// cells, trains each with best-validation-mIoU selection, and emits one
// metrics row per pass on the test split.

#include <fstream>
#include <iomanip>
#include <iostream>
#include <random>
#include <string>
#include <vector>

#include "fbseg/checkpoint.hpp"
#include "fbseg/training.hpp"

namespace fbseg {

struct RunSettings {
  UNetConfig unet;
  AttentionConfig attn;
  int epochs = 100;
  int batch_size = 4;
  double lr = 1e-4;
  bool detach_feedback = true;
  bool verbose = false;
};

template <typename T>
struct SingleRunResult {
  MetricsRecord test_first, test_second;
  int best_epoch = 0;
  double best_val_miou = 0.0;
};

namespace detail_exp {

inline std::vector<int> role_indices(const std::vector<Role>& roles, Role want) {
  std::vector<int> idx;
  for (size_t i = 0; i < roles.size(); ++i)
    if (roles[i] == want) idx.push_back(static_cast<int>(i));
  return idx;
}

template <typename T>
struct FullSnapshot {
  std::vector<std::vector<T>> params;
  std::vector<std::pair<std::vector<T>, std::vector<T>>> bn;
};

template <typename T>
FullSnapshot<T> take_snapshot(ModelParams<T>& params, const std::vector<BNState<T>*>& states) {
  FullSnapshot<T> s;
  s.params = params.snapshot();
  for (auto* st : states) s.bn.emplace_back(st->running_mean, st->running_var);
  return s;
}

template <typename T>
void restore_snapshot(ModelParams<T>& params, const std::vector<BNState<T>*>& states,
                      const FullSnapshot<T>& s) {
  params.restore(s.params);
  for (size_t i = 0; i < states.size(); ++i) {
    states[i]->running_mean = s.bn[i].first;
    states[i]->running_var = s.bn[i].second;
  }
}

}  // namespace detail_exp

// Trains one (fold, seed) cell. checkpoint_prefix, when non-empty, receives
// the best-validation model.
template <typename T>
SingleRunResult<T> run_single(const std::vector<LabeledTile>& tiles,
                              const std::vector<Role>& roles, std::uint64_t seed,
                              const RunSettings& cfg,
                              const std::string& checkpoint_prefix = "") {
  auto train_idx = detail_exp::role_indices(roles, Role::Train);
  auto val_idx = detail_exp::role_indices(roles, Role::Val);
  auto test_idx = detail_exp::role_indices(roles, Role::Test);
  if (train_idx.empty() || val_idx.empty() || test_idx.empty())
    throw UsageError("run_single: every split must be non-empty");

  Normalization norm = compute_normalization(tiles, train_idx);
  UNet<T> unet(cfg.unet, seed);
  Connector<T> conn(cfg.attn, cfg.unet.base_channels, seed + 0x9e3779b97f4a7c15ULL);
  TrainState<T> state(unet, conn, static_cast<T>(cfg.lr));

  std::vector<BNState<T>*> bn_states;
  unet.collect_bn_states(bn_states);
  conn.collect_bn_states(bn_states);

  std::mt19937_64 rng(seed ^ 0xda3e39cb94b95bdbULL);
  SingleRunResult<T> result;
  result.best_val_miou = -1.0;
  detail_exp::FullSnapshot<T> best;

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::vector<int> order = train_idx;
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_loss = 0.0;
    int n_batches = 0;
    for (size_t start = 0; start < order.size(); start += cfg.batch_size) {
      std::vector<int> idx(order.begin() + start,
                           order.begin() + std::min(order.size(), start + cfg.batch_size));
      Tensor<T> x = batch_images<T>(tiles, idx, norm);
      LabelMap lbl = batch_labels(tiles, idx);
      epoch_loss += train_step(unet, conn, state, x, lbl, cfg.detach_feedback);
      ++n_batches;
    }
    auto val = evaluate(unet, conn, tiles, val_idx, norm, cfg.batch_size, cfg.detach_feedback);
    const double val_miou = val[1].mean_iou;  // second pass drives selection
    if (val_miou > result.best_val_miou) {
      result.best_val_miou = val_miou;
      result.best_epoch = epoch;
      best = detail_exp::take_snapshot(state.all_params, bn_states);
    }
    if (cfg.verbose)
      std::cerr << "epoch " << epoch << " loss " << epoch_loss / n_batches << " val mIoU "
                << val_miou << "\n";
  }

  detail_exp::restore_snapshot(state.all_params, bn_states, best);
  if (!checkpoint_prefix.empty()) save_checkpoint(state.all_params, checkpoint_prefix);

  auto test = evaluate(unet, conn, tiles, test_idx, norm, cfg.batch_size, cfg.detach_feedback);
  result.test_first = test[0];
  result.test_second = test[1];
  result.test_first.epoch = result.test_second.epoch = result.best_epoch;
  result.test_first.seed = result.test_second.seed = seed;
  return result;
}

// Full matrix over variants x folds x seeds. Variant labels may carry a
// ":one-conv"/":two-conv" suffix when the tap is ablated.
template <typename T>
std::vector<MetricsRecord> run_experiment(const std::vector<LabeledTile>& tiles,
                                          const FoldAssignment& folds,
                                          const std::vector<Variant>& variants,
                                          const std::vector<TapLocation>& taps,
                                          const std::vector<std::uint64_t>& seeds,
                                          RunSettings cfg, bool verbose_progress = false) {
  std::vector<MetricsRecord> rows;
  for (Variant variant : variants)
    for (TapLocation tap : taps) {
      std::string label = to_string(variant);
      if (taps.size() > 1)
        label += tap == TapLocation::AfterConv1 ? ":one-conv" : ":two-conv";
      for (int fold = 0; fold < folds.n_folds(); ++fold)
        for (std::uint64_t seed : seeds) {
          cfg.attn.variant = variant;
          cfg.unet.tap_location = tap;
          if (verbose_progress)
            std::cerr << "[run] variant=" << label << " fold=" << fold << " seed=" << seed
                      << "\n";
          auto res = run_single<T>(tiles, folds.roles[fold], seed, cfg);
          for (MetricsRecord r : {res.test_first, res.test_second}) {
            r.variant = label;
            r.fold = fold;
            rows.push_back(std::move(r));
          }
        }
    }
  return rows;
}

inline void write_metrics_csv(const std::string& path, const std::vector<MetricsRecord>& rows,
                              int num_classes) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write metrics CSV: " + path);
  out << "variant,fold,seed,epoch,pass";
  for (int c = 0; c < num_classes; ++c) out << ",class_" << c << "_iou";
  out << ",mean_iou,loss\n";
  out << std::setprecision(12);
  for (const auto& r : rows) {
    out << r.variant << "," << r.fold << "," << r.seed << "," << r.epoch << "," << r.pass;
    for (double v : r.per_class_iou) out << "," << v;
    out << "," << r.mean_iou << "," << r.loss << "\n";
  }
}

}  // namespace fbseg
