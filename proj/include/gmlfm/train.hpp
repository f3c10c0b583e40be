#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "gmlfm/data.hpp"
#include "gmlfm/model.hpp"

namespace gmlfm::train {

enum class Optimizer { Sgd, Adam };

std::string_view to_string(Optimizer opt);
std::optional<Optimizer> parse_optimizer(std::string_view name);

struct HyperParams {
  double learning_rate = 0.001;
  std::size_t batch_size = 256;
  int epochs = 20;
  double dropout = 0.2;
  std::size_t embed_dim = 64;
  Optimizer optimizer = Optimizer::Adam;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double l2 = 0.0;
  int patience = 5;
  std::uint64_t seed = 42;
  /// Global-norm clip applied to each batch gradient; <= 0 disables it.
  double clip_norm = 10.0;

  /// Throws std::invalid_argument naming the offending field.
  void validate() const;
};

class TrainingError : public std::runtime_error {
 public:
  TrainingError(const std::string& what, std::size_t batch, std::size_t instance)
      : std::runtime_error(what), batch_(batch), instance_(instance) {}
  std::size_t batch() const { return batch_; }
  std::size_t instance() const { return instance_; }

 private:
  std::size_t batch_;
  std::size_t instance_;
};

/// Every learnable tensor drawn from Normal(0, 0.01); w0 = 0.
model::ModelParams init_params(std::size_t n, const model::DistanceSpec& spec,
                               const HyperParams& hyper, std::mt19937_64& rng);

inline double squared_loss(double prediction, double target) {
  const double r = prediction - target;
  return r * r;
}

/// Batch gradient shaped like ModelParams. The linear weights and embedding
/// rows are tracked sparsely so that untouched rows are never updated.
class ModelGradient {
 public:
  explicit ModelGradient(const model::ModelParams& like);

  void add(const tape::GradientMap& grads);
  void clear();

  /// Adds l2 * theta to every touched coordinate.
  void add_l2(const model::ModelParams& params, double l2);
  double norm() const;
  void scale(double factor);

  const std::vector<std::uint32_t>& touched_rows() const { return rows_; }
  bool touched(model::ParamGroup group) const { return group_touched_[static_cast<int>(group)]; }

  double w0 = 0.0;
  std::vector<double> w;
  Matrix V;
  std::vector<double> h;
  Matrix L;
  std::vector<model::MlpLayer> mlp;

 private:
  std::vector<std::uint32_t> rows_;
  std::vector<char> row_flag_;
  std::array<bool, model::kNumParamGroups> group_touched_{};
};

/// theta <- theta - lr * g over touched coordinates.
void sgd_step(model::ModelParams& params, const ModelGradient& grad, double learning_rate);

struct AdamState {
  model::ModelParams m;
  model::ModelParams v;
  std::uint64_t step = 0;
};

AdamState make_adam_state(const model::ModelParams& params);

/// Bias-corrected Adam. Rows of w and V without gradient in this batch keep
/// both their value and their moments.
void adam_step(model::ModelParams& params, AdamState& state, const ModelGradient& grad,
               const HyperParams& hyper);

struct TrainState {
  model::ModelParams params;
  AdamState adam;
  int epoch = 0;
  std::optional<double> best_validation;
  int epochs_since_improvement = 0;
  std::uint64_t optimizer_steps = 0;
};

TrainState make_train_state(model::ModelParams params);

struct EpochResult {
  double mean_loss = 0.0;
  std::size_t steps = 0;
};

/// One shuffled pass in mini-batches; one optimizer step per batch. The
/// batch gradient is the sum of per-instance squared-loss gradients.
EpochResult train_epoch(TrainState& state, std::span<const data::SparseInstance> train,
                        const model::DistanceSpec& spec, const HyperParams& hyper,
                        std::mt19937_64& rng);

/// Gradient of the summed squared loss over `batch` (dropout masks supplied
/// per instance, or none).
ModelGradient batch_gradient(const model::ModelParams& params,
                             std::span<const data::SparseInstance> batch,
                             const model::DistanceSpec& spec,
                             std::span<const model::DropoutMasks> masks = {});

struct Validation {
  std::string metric;
  bool higher_is_better = true;
  std::function<double(const model::ModelParams&)> score;
};

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0.0;
  std::optional<double> validation;
  double wall_seconds = 0.0;
};

struct FitResult {
  model::ModelParams params;
  std::vector<EpochRecord> history;
  int best_epoch = 0;
};

/// Trains from fresh parameters. With a validator, keeps the best epoch and
/// stops after `patience` epochs without improvement; otherwise runs every
/// epoch and returns the final parameters.
FitResult fit(std::span<const data::SparseInstance> train, std::size_t dimension,
              const model::DistanceSpec& spec, const HyperParams& hyper,
              const std::optional<Validation>& validation = std::nullopt);

/// Same, starting from given parameters.
FitResult fit_from(model::ModelParams initial, std::span<const data::SparseInstance> train,
                   const model::DistanceSpec& spec, const HyperParams& hyper,
                   const std::optional<Validation>& validation = std::nullopt);

/// "epoch<d>train_loss<d>validation<d>wall_seconds" rows after a header.
void write_history(std::ostream& out, const std::vector<EpochRecord>& history,
                   const std::string& metric, char delimiter = '\t');

}  // namespace gmlfm::train
