#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "agglab/graph.hpp"
#include "agglab/layers.hpp"

namespace agglab {

enum class LossKind { Mae, Mse, CrossEntropy };
std::string to_string(LossKind kind);
LossKind loss_kind_from_string(const std::string& name);

struct TrainConfig {
  std::size_t epochs = 100;
  std::size_t batch_size = 32;
  double lr = 1e-3;
  std::size_t lr_step_size = 25;
  double lr_decay = 1.0;
  std::uint64_t seed = 0;
  LossKind loss = LossKind::Mae;
  ReadoutMode readout = ReadoutMode::Sum;
  /// Fill the seconds column with wall-clock time. Off by default so that
  /// metrics are byte-reproducible.
  bool record_time = false;

  /// Throws ContractError on out-of-range settings.
  void validate() const;
};

struct Metrics {
  std::vector<double> train_loss;
  std::vector<double> valid_loss;
  /// Test MAE (regression) or accuracy (classification) of the best-validation model.
  double test_metric = 0.0;
  std::size_t best_epoch = 0;
  double seconds = 0.0;
};

/// Raised when a loss turns non-finite during training.
class TrainingDiverged : public std::runtime_error {
 public:
  TrainingDiverged(std::size_t epoch, std::size_t batch, double loss);
  std::size_t epoch() const { return epoch_; }
  std::size_t batch() const { return batch_; }

 private:
  std::size_t epoch_;
  std::size_t batch_;
};

struct AdamOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  std::vector<Matrix> m;
  std::vector<Matrix> v;
  std::size_t t = 0;
};

/// One bias-corrected Adam update of every parameter from its grad buffer.
/// The state is sized on first use.
void adam_step(std::span<Parameter* const> params, AdamState& state, double lr, const AdamOptions& options = {});

/// base * decay^floor(epoch / step_size).
double step_lr(std::size_t epoch, const TrainConfig& config);

/// Per-graph loss of a 1 x out_dim prediction.
Var graph_loss(Var prediction, double target, LossKind kind);

/// Mean loss over `indices`; does not touch parameters.
double mean_loss(Model& model, const Dataset& data, std::span<const std::size_t> indices, LossKind kind);
/// MAE for regression losses, accuracy for cross-entropy.
double evaluate(Model& model, const Dataset& data, std::span<const std::size_t> indices, LossKind kind);

/// Test MAE of predicting the mean training target.
double constant_predictor_mae(const Dataset& data);

struct TrainResult {
  Model model;
  Metrics metrics;
};

/// Adam with per-graph gradient accumulation over batches of the training
/// split; returns the best-validation parameters. `spec.seed` and
/// `spec.readout` are taken from `config`.
TrainResult train(ModelSpec spec, const Dataset& data, const TrainConfig& config);

struct MetricsRow {
  std::string model;
  std::size_t s = 0;
  bool re_sum = true;
  std::uint64_t seed = 0;
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double valid_loss = 0.0;
  double test_metric = 0.0;
  double seconds = 0.0;
  friend bool operator==(const MetricsRow&, const MetricsRow&) = default;
};

std::vector<MetricsRow> metrics_rows(const std::string& model, std::size_t s, bool re_sum, std::uint64_t seed,
                                     const Metrics& metrics);
void write_metrics_csv(std::ostream& out, std::span<const MetricsRow> rows);
std::vector<MetricsRow> read_metrics_csv(std::istream& in);

/// lr 2e-3 decayed by 0.7 every 25 epochs, 100 epochs, batch 32, MAE.
TrainConfig default_ablation_train_config();

/// One model family of the ablation table.
struct AblationModel {
  std::string label;
  LayerKind kind = LayerKind::ExpC;
  std::size_t s = 0;  // 0 where no expansion factor applies
  bool re_sum = true;
};

struct AblationConfig {
  std::vector<std::uint64_t> seeds = {0, 1, 2, 3, 4};
  std::vector<std::size_t> s_values = {4};
  std::size_t num_layers = 3;
  /// Width of the largest-s ExpC model; its parameter count is the budget.
  std::size_t reference_width = 16;
  double budget_tolerance = 0.10;
  TrainConfig train = default_ablation_train_config();
  /// 0: AGGLAB_THREADS, else hardware concurrency.
  std::size_t threads = 0;
};

struct SummaryRow {
  std::string model;
  std::size_t s = 0;
  bool re_sum = true;
  std::size_t seeds = 0;
  double median_test_mae = 0.0;
  double min = 0.0;
  double max = 0.0;
  std::size_t params = 0;
  std::size_t width = 0;
  friend bool operator==(const SummaryRow&, const SummaryRow&) = default;
};

struct AblationResult {
  std::vector<MetricsRow> rows;
  std::vector<SummaryRow> summary;
  std::size_t budget = 0;
};

/// GCN, ExpC*-1, ExpC-1, ExpC-s for each s > 1, CombC*, CombC.
std::vector<AblationModel> ablation_models(std::span<const std::size_t> s_values);

/// Smallest-error width in [1, 512] for the budget; nullopt when no width
/// lands within `tolerance` (relative).
std::optional<std::size_t> match_width(const AblationModel& model, std::size_t d_in, std::size_t num_layers,
                                       std::size_t budget, double tolerance);
ModelSpec ablation_model_spec(const AblationModel& model, std::size_t d_in, std::size_t width, std::size_t num_layers,
                              std::uint64_t seed);

/// Trains every (model, seed) cell, in parallel, and summarizes median test
/// MAE per model. Output order is canonical regardless of thread count.
AblationResult ablation_suite(const AblationConfig& config, const Dataset& data);

void write_summary_csv(std::ostream& out, std::span<const SummaryRow> rows);
std::vector<SummaryRow> read_summary_csv(std::istream& in);

/// AGGLAB_THREADS when set and positive, else hardware concurrency (at least 1).
std::size_t default_thread_count();

}  // namespace agglab
