#include "agglab/train.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <istream>
#include <limits>
#include <ostream>
#include <sstream>
#include <thread>

namespace agglab {

std::string to_string(LossKind kind) {
  switch (kind) {
    case LossKind::Mae: return "mae";
    case LossKind::Mse: return "mse";
    case LossKind::CrossEntropy: return "cross_entropy";
  }
  return "?";
}

LossKind loss_kind_from_string(const std::string& name) {
  if (name == "mae") return LossKind::Mae;
  if (name == "mse") return LossKind::Mse;
  if (name == "cross_entropy" || name == "ce") return LossKind::CrossEntropy;
  throw std::invalid_argument("unknown loss '" + name + "'");
}

void TrainConfig::validate() const {
  if (epochs < 1) throw ContractError("TrainConfig: epochs must be >= 1");
  if (batch_size < 1) throw ContractError("TrainConfig: batch_size must be >= 1");
  if (!(lr >= 0.0) || !std::isfinite(lr)) throw ContractError("TrainConfig: lr must be finite and >= 0");
  if (!(lr_decay > 0.0 && lr_decay <= 1.0)) throw ContractError("TrainConfig: lr_decay must be in (0, 1]");
  if (lr_step_size < 1) throw ContractError("TrainConfig: lr_step_size must be >= 1");
}

TrainingDiverged::TrainingDiverged(std::size_t epoch, std::size_t batch, double loss)
    : std::runtime_error("non-finite loss " + std::to_string(loss) + " at epoch " + std::to_string(epoch) +
                         ", batch " + std::to_string(batch)),
      epoch_(epoch),
      batch_(batch) {}

void adam_step(std::span<Parameter* const> params, AdamState& state, double lr, const AdamOptions& options) {
  if (state.m.empty()) {
    for (const Parameter* p : params) {
      state.m.emplace_back(p->value.rows, p->value.cols);
      state.v.emplace_back(p->value.rows, p->value.cols);
    }
  }
  if (state.m.size() != params.size()) throw DimensionError("adam_step: state sized for a different parameter list");
  ++state.t;
  const double c1 = 1.0 - std::pow(options.beta1, static_cast<double>(state.t));
  const double c2 = 1.0 - std::pow(options.beta2, static_cast<double>(state.t));
  for (std::size_t k = 0; k < params.size(); ++k) {
    Parameter& p = *params[k];
    if (p.grad.rows != p.value.rows || p.grad.cols != p.value.cols || state.m[k].size() != p.value.size()) {
      throw DimensionError("adam_step: " + p.name + " value " + p.value.shape_string() + " vs grad " +
                           p.grad.shape_string());
    }
    auto& m = state.m[k].data;
    auto& v = state.v[k].data;
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const double g = p.grad.data[i];
      m[i] = options.beta1 * m[i] + (1.0 - options.beta1) * g;
      v[i] = options.beta2 * v[i] + (1.0 - options.beta2) * g * g;
      p.value.data[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + options.eps);
    }
  }
}

double step_lr(std::size_t epoch, const TrainConfig& config) {
  return config.lr * std::pow(config.lr_decay, static_cast<double>(epoch / config.lr_step_size));
}

namespace {

Var cross_entropy(Var logits, std::size_t target) {
  const Matrix& x = logits.value();
  if (x.rows != 1 || target >= x.cols) {
    throw DimensionError("cross_entropy: class " + std::to_string(target) + " for logits " + x.shape_string());
  }
  const double mx = *std::max_element(x.data.begin(), x.data.end());
  double z = 0.0;
  for (double v : x.data) z += std::exp(v - mx);
  const double lse = mx + std::log(z);
  Matrix out(1, 1, lse - x.data[target]);
  const std::size_t in = logits.id();
  return logits.tape()->record(std::move(out), {in}, [in, target](Tape& t, std::size_t self) {
    if (!t.needs_grad(in)) return;
    const double g = t.grad(self).data[0];
    const Matrix& x = t.value(in);
    const double mx = *std::max_element(x.data.begin(), x.data.end());
    double z = 0.0;
    for (double v : x.data) z += std::exp(v - mx);
    Matrix& buf = t.grad_buffer(in);
    for (std::size_t j = 0; j < x.cols; ++j) buf.data[j] += g * (std::exp(x.data[j] - mx) / z - (j == target ? 1.0 : 0.0));
  });
}

double target_of(const Graph& g) {
  if (!g.target()) throw ContractError("training graph has no target");
  return *g.target();
}

std::size_t argmax(const Matrix& m) {
  return static_cast<std::size_t>(std::max_element(m.data.begin(), m.data.end()) - m.data.begin());
}

}  // namespace

Var graph_loss(Var prediction, double target, LossKind kind) {
  Tape& tape = *prediction.tape();
  switch (kind) {
    case LossKind::Mae:
    case LossKind::Mse: {
      if (prediction.rows() != 1 || prediction.cols() != 1) {
        throw DimensionError("regression loss needs a 1x1 prediction, got " + prediction.value().shape_string());
      }
      Var diff = sub(prediction, tape.constant(Matrix(1, 1, target)));
      return kind == LossKind::Mae ? abs(diff) : square(diff);
    }
    case LossKind::CrossEntropy: {
      if (target < 0 || target != std::floor(target)) throw ContractError("cross_entropy: target must be a class index");
      return cross_entropy(prediction, static_cast<std::size_t>(target));
    }
  }
  throw ContractError("graph_loss: unknown loss");
}

double mean_loss(Model& model, const Dataset& data, std::span<const std::size_t> indices, LossKind kind) {
  if (indices.empty()) return 0.0;
  double total = 0.0;
  for (std::size_t i : indices) {
    Tape tape;
    total += graph_loss(model.forward(tape, data.graphs[i]), target_of(data.graphs[i]), kind).scalar();
  }
  return total / static_cast<double>(indices.size());
}

double evaluate(Model& model, const Dataset& data, std::span<const std::size_t> indices, LossKind kind) {
  if (indices.empty()) return 0.0;
  double total = 0.0;
  for (std::size_t i : indices) {
    Tape tape;
    const Matrix pred = model.forward(tape, data.graphs[i]).value();
    const double y = target_of(data.graphs[i]);
    if (kind == LossKind::CrossEntropy) {
      total += static_cast<double>(argmax(pred)) == y ? 1.0 : 0.0;
    } else {
      total += std::abs(pred.data[0] - y);
    }
  }
  return total / static_cast<double>(indices.size());
}

double constant_predictor_mae(const Dataset& data) {
  if (data.split.train.empty() || data.split.test.empty()) throw ContractError("constant_predictor_mae: empty split");
  double mean = 0.0;
  for (std::size_t i : data.split.train) mean += target_of(data.graphs[i]);
  mean /= static_cast<double>(data.split.train.size());
  double mae = 0.0;
  for (std::size_t i : data.split.test) mae += std::abs(target_of(data.graphs[i]) - mean);
  return mae / static_cast<double>(data.split.test.size());
}

TrainResult train(ModelSpec spec, const Dataset& data, const TrainConfig& config) {
  config.validate();
  if (data.split.train.empty()) throw ContractError("train: empty training split");
  if (data.split.valid.empty()) throw ContractError("train: empty validation split");
  for (std::size_t i : data.split.train) target_of(data.graphs[i]);
  const auto start = std::chrono::steady_clock::now();

  spec.seed = config.seed;
  spec.readout = config.readout;
  Model model(spec);
  auto params = model.parameters();
  AdamState adam;
  // Data order draws from its own stream so that it does not depend on model size.
  Rng order_rng(config.seed ^ 0x9e3779b97f4a7c15ULL);
  std::vector<std::size_t> order = data.split.train;

  Metrics metrics;
  double best_valid = std::numeric_limits<double>::infinity();
  std::vector<Matrix> best;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    const double lr = step_lr(epoch, config);
    std::shuffle(order.begin(), order.end(), order_rng);
    double epoch_loss = 0.0;
    for (std::size_t begin = 0, batch = 0; begin < order.size(); begin += config.batch_size, ++batch) {
      const std::size_t end = std::min(order.size(), begin + config.batch_size);
      for (Parameter* p : params) p->zero_grad();
      const double weight = 1.0 / static_cast<double>(end - begin);
      for (std::size_t k = begin; k < end; ++k) {
        const Graph& g = data.graphs[order[k]];
        Tape tape;
        Var loss = graph_loss(model.forward(tape, g), target_of(g), config.loss);
        const double value = loss.scalar();
        if (!std::isfinite(value)) throw TrainingDiverged(epoch, batch, value);
        epoch_loss += value;
        tape.backward(scale(loss, weight));
      }
      adam_step(params, adam, lr);
    }
    metrics.train_loss.push_back(epoch_loss / static_cast<double>(order.size()));
    const double valid = mean_loss(model, data, data.split.valid, config.loss);
    if (!std::isfinite(valid)) throw TrainingDiverged(epoch, 0, valid);
    metrics.valid_loss.push_back(valid);
    if (valid < best_valid) {
      best_valid = valid;
      metrics.best_epoch = epoch;
      best.clear();
      for (const Parameter* p : params) best.push_back(p->value);
    }
  }
  for (std::size_t k = 0; k < params.size(); ++k) params[k]->value = best[k];
  metrics.test_metric = evaluate(model, data, data.split.test, config.loss);
  if (config.record_time) {
    metrics.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  }
  return {std::move(model), std::move(metrics)};
}

// ---------------------------------------------------------------------------
// CSV

namespace {

std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

double parse_double(const std::string& s) {
  double v = 0.0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) throw std::invalid_argument("bad number '" + s + "'");
  return v;
}

std::uint64_t parse_uint(const std::string& s) {
  std::uint64_t v = 0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) throw std::invalid_argument("bad integer '" + s + "'");
  return v;
}

bool parse_bool(const std::string& s) {
  if (s == "true" || s == "1") return true;
  if (s == "false" || s == "0") return false;
  throw std::invalid_argument("bad boolean '" + s + "'");
}

std::vector<std::vector<std::string>> read_csv(std::istream& in, const std::string& expected_header) {
  std::string line;
  if (!std::getline(in, line) || line != expected_header) {
    throw std::invalid_argument("CSV header mismatch: expected '" + expected_header + "'");
  }
  std::vector<std::vector<std::string>> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    out.push_back(std::move(cells));
  }
  return out;
}

constexpr const char* kMetricsHeader = "model,s,re_sum,seed,epoch,train_loss,valid_loss,test_metric,seconds";
constexpr const char* kSummaryHeader = "model,s,re_sum,seeds,median_test_mae,min,max,params,width";

}  // namespace

std::vector<MetricsRow> metrics_rows(const std::string& model, std::size_t s, bool re_sum, std::uint64_t seed,
                                     const Metrics& metrics) {
  std::vector<MetricsRow> rows;
  for (std::size_t e = 0; e < metrics.train_loss.size(); ++e) {
    rows.push_back({model, s, re_sum, seed, e, metrics.train_loss[e], metrics.valid_loss[e], metrics.test_metric,
                    metrics.seconds});
  }
  return rows;
}

void write_metrics_csv(std::ostream& out, std::span<const MetricsRow> rows) {
  out << kMetricsHeader << '\n';
  for (const MetricsRow& r : rows) {
    out << r.model << ',' << r.s << ',' << (r.re_sum ? "true" : "false") << ',' << r.seed << ',' << r.epoch << ','
        << format_double(r.train_loss) << ',' << format_double(r.valid_loss) << ',' << format_double(r.test_metric)
        << ',' << format_double(r.seconds) << '\n';
  }
}

std::vector<MetricsRow> read_metrics_csv(std::istream& in) {
  std::vector<MetricsRow> rows;
  for (const auto& c : read_csv(in, kMetricsHeader)) {
    if (c.size() != 9) throw std::invalid_argument("metrics CSV: expected 9 columns");
    rows.push_back({c[0], parse_uint(c[1]), parse_bool(c[2]), parse_uint(c[3]), parse_uint(c[4]), parse_double(c[5]),
                    parse_double(c[6]), parse_double(c[7]), parse_double(c[8])});
  }
  return rows;
}

void write_summary_csv(std::ostream& out, std::span<const SummaryRow> rows) {
  out << kSummaryHeader << '\n';
  for (const SummaryRow& r : rows) {
    out << r.model << ',' << r.s << ',' << (r.re_sum ? "true" : "false") << ',' << r.seeds << ','
        << format_double(r.median_test_mae) << ',' << format_double(r.min) << ',' << format_double(r.max) << ','
        << r.params << ',' << r.width << '\n';
  }
}

std::vector<SummaryRow> read_summary_csv(std::istream& in) {
  std::vector<SummaryRow> rows;
  for (const auto& c : read_csv(in, kSummaryHeader)) {
    if (c.size() != 9) throw std::invalid_argument("summary CSV: expected 9 columns");
    rows.push_back({c[0], parse_uint(c[1]), parse_bool(c[2]), parse_uint(c[3]), parse_double(c[4]), parse_double(c[5]),
                    parse_double(c[6]), parse_uint(c[7]), parse_uint(c[8])});
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Ablation

TrainConfig default_ablation_train_config() {
  TrainConfig config;
  config.lr = 2e-3;
  config.lr_decay = 0.7;
  return config;
}

std::size_t default_thread_count() {
  if (const char* env = std::getenv("AGGLAB_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end != env && *end == '\0' && v > 0) return static_cast<std::size_t>(v);
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

std::vector<AblationModel> ablation_models(std::span<const std::size_t> s_values) {
  std::vector<AblationModel> out = {{"GCN", LayerKind::Gcn, 0, true},
                                    {"ExpC*-1", LayerKind::ExpC, 1, false},
                                    {"ExpC-1", LayerKind::ExpC, 1, true}};
  std::vector<std::size_t> larger(s_values.begin(), s_values.end());
  std::sort(larger.begin(), larger.end());
  larger.erase(std::unique(larger.begin(), larger.end()), larger.end());
  for (std::size_t s : larger)
    if (s > 1) out.push_back({"ExpC-" + std::to_string(s), LayerKind::ExpC, s, true});
  out.push_back({"CombC*", LayerKind::CombC, 0, false});
  out.push_back({"CombC", LayerKind::CombC, 0, true});
  return out;
}

ModelSpec ablation_model_spec(const AblationModel& model, std::size_t d_in, std::size_t width, std::size_t num_layers,
                              std::uint64_t seed) {
  return make_model_spec(model.kind, d_in, width, num_layers, std::max<std::size_t>(model.s, 1), model.re_sum, 1, seed);
}

std::optional<std::size_t> match_width(const AblationModel& model, std::size_t d_in, std::size_t num_layers,
                                       std::size_t budget, double tolerance) {
  std::optional<std::size_t> best;
  double best_err = std::numeric_limits<double>::infinity();
  for (std::size_t w = 1; w <= 512; ++w) {
    const std::size_t count = Model(ablation_model_spec(model, d_in, w, num_layers, 0)).parameter_count();
    const double err = std::abs(static_cast<double>(count) - static_cast<double>(budget)) / static_cast<double>(budget);
    if (err < best_err) {
      best_err = err;
      best = w;
    }
    if (count > 2 * budget) break;
  }
  if (best_err > tolerance) return std::nullopt;
  return best;
}

AblationResult ablation_suite(const AblationConfig& config, const Dataset& data) {
  if (config.seeds.size() < 3) throw ContractError("ablation_suite: needs at least 3 seeds");
  if (data.graphs.empty()) throw ContractError("ablation_suite: empty dataset");
  config.train.validate();
  const std::size_t d_in = data.graphs.front().feature_width();
  const auto models = ablation_models(config.s_values);

  const std::size_t s_ref = std::max<std::size_t>(
      1, config.s_values.empty() ? 1 : *std::max_element(config.s_values.begin(), config.s_values.end()));
  AblationResult result;
  result.budget =
      Model(make_model_spec(LayerKind::ExpC, d_in, config.reference_width, config.num_layers, s_ref)).parameter_count();

  std::vector<std::size_t> widths;
  for (const AblationModel& m : models) {
    const auto w = match_width(m, d_in, config.num_layers, result.budget, config.budget_tolerance);
    if (!w) throw ContractError("ablation_suite: no width of " + m.label + " matches the parameter budget");
    widths.push_back(*w);
  }

  struct Cell {
    std::size_t model;
    std::uint64_t seed;
    Metrics metrics;
  };
  std::vector<Cell> cells;
  for (std::size_t m = 0; m < models.size(); ++m)
    for (std::uint64_t seed : config.seeds) cells.push_back({m, seed, {}});

  std::atomic<std::size_t> next{0};
  std::vector<std::string> errors(cells.size());
  auto worker = [&] {
    for (std::size_t i; (i = next.fetch_add(1)) < cells.size();) {
      Cell& c = cells[i];
      TrainConfig tc = config.train;
      tc.seed = c.seed;
      try {
        c.metrics = train(ablation_model_spec(models[c.model], d_in, widths[c.model], config.num_layers, c.seed), data,
                          tc)
                        .metrics;
      } catch (const std::exception& e) {
        errors[i] = models[c.model].label + " seed " + std::to_string(c.seed) + ": " + e.what();
      }
    }
  };
  const std::size_t threads = std::min(cells.size(), config.threads ? config.threads : default_thread_count());
  std::vector<std::thread> pool;
  for (std::size_t t = 1; t < threads; ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  for (const auto& e : errors)
    if (!e.empty()) throw std::runtime_error("ablation_suite: " + e);

  for (const Cell& c : cells) {
    const AblationModel& m = models[c.model];
    const auto rows = metrics_rows(m.label, m.s, m.re_sum, c.seed, c.metrics);
    result.rows.insert(result.rows.end(), rows.begin(), rows.end());
  }
  for (std::size_t m = 0; m < models.size(); ++m) {
    std::vector<double> maes;
    for (const Cell& c : cells)
      if (c.model == m) maes.push_back(c.metrics.test_metric);
    std::sort(maes.begin(), maes.end());
    const std::size_t k = maes.size();
    const double median = k % 2 ? maes[k / 2] : 0.5 * (maes[k / 2 - 1] + maes[k / 2]);
    const std::size_t params =
        Model(ablation_model_spec(models[m], d_in, widths[m], config.num_layers, 0)).parameter_count();
    result.summary.push_back(
        {models[m].label, models[m].s, models[m].re_sum, k, median, maes.front(), maes.back(), params, widths[m]});
  }
  return result;
}

}  // namespace agglab
