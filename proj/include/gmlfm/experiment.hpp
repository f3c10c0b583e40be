#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "gmlfm/data.hpp"
#include "gmlfm/eval.hpp"
#include "gmlfm/model.hpp"
#include "gmlfm/train.hpp"

namespace gmlfm::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitValidation = 1;
inline constexpr int kExitRuntime = 2;
inline constexpr int kExitCheckFailed = 3;

std::string_view toolkit_version();

/// Invalid configuration; `key()` names the offending setting.
class ConfigError : public std::invalid_argument {
 public:
  ConfigError(std::string key, const std::string& message)
      : std::invalid_argument(key + ": " + message), key_(std::move(key)) {}
  const std::string& key() const { return key_; }

 private:
  std::string key_;
};

/// Runtime failure tagged with the pipeline stage that raised it.
class StageError : public std::runtime_error {
 public:
  StageError(std::string stage, const std::string& message)
      : std::runtime_error(stage + ": " + message), stage_(std::move(stage)) {}
  const std::string& stage() const { return stage_; }

 private:
  std::string stage_;
};

struct ExperimentConfig {
  eval::Task task = eval::Task::TopN;
  std::string data_path;
  data::Format data_format = data::Format::Tabular;
  std::vector<std::string> fields;
  char delimiter = '\t';
  std::optional<std::size_t> libfm_n;
  model::DistanceKind distance = model::DistanceKind::Dnn;
  bool use_weight = true;
  /// Unset: 2 for dnn, 0 for every other kind.
  std::optional<int> layers;
  train::HyperParams hyper;
  int negatives = 2;
  std::string output_dir;
  bool force = false;

  /// Applies one key=value setting. Throws ConfigError for unknown keys
  /// and unparsable values.
  void set(const std::string& key, const std::string& value);

  /// Flat key=value text; '#' starts a comment.
  void apply_file(const std::filesystem::path& path);
  static ExperimentConfig from_file(const std::filesystem::path& path);

  int resolved_layers() const;
  model::DistanceSpec spec() const;

  /// Throws ConfigError naming the offending key.
  void validate() const;

  /// Every setting that affects results, as key/value pairs.
  std::vector<std::pair<std::string, std::string>> echo() const;
};

struct PreparedData {
  data::Dataset dataset;
  data::DatasetSplit split;     // train includes sampled negatives
  data::InteractionSets known;  // all observed interactions
  std::size_t negative_shortfall = 0;
};

/// Split and negative sampling for the configured task, deterministic in
/// the config seed.
PreparedData prepare_data(const ExperimentConfig& config, data::Dataset dataset);
data::Dataset load_dataset(const ExperimentConfig& config);

eval::CandidateBuilder candidate_builder(const ExperimentConfig& config, const PreparedData& data);

/// Held-out evaluation for the configured task; config echo attached.
eval::MetricsReport evaluate_test(const ExperimentConfig& config, const PreparedData& data,
                                  const model::ModelParams& params);

std::optional<train::Validation> make_validation(const ExperimentConfig& config,
                                                 const PreparedData& data);

struct TrainOutcome {
  std::filesystem::path model_path;
  std::filesystem::path history_path;
  std::filesystem::path metrics_path;
  std::filesystem::path config_path;
  eval::MetricsReport metrics;
  train::FitResult fit;
};

/// Load, split, sample, fit, evaluate; writes model.bin (+ model.meta),
/// vocab.csv, history.tsv, metrics.txt and config.txt into output_dir.
TrainOutcome cmd_train(const ExperimentConfig& config, std::ostream& log);

/// Re-runs the data pipeline of the stored training config (with
/// `overrides` applied) and evaluates the model on its test split.
eval::MetricsReport cmd_evaluate(const std::filesystem::path& model_file,
                                 const std::map<std::string, std::string>& overrides,
                                 const std::optional<std::filesystem::path>& metrics_out);

struct Recommendation {
  std::string item;
  double score = 0.0;
};

/// Scores `items` (all known items when empty and `all_items` is set) for
/// `user`, best first, ties by item id.
std::vector<Recommendation> cmd_recommend(const std::filesystem::path& model_file,
                                          const std::string& user,
                                          const std::vector<std::string>& items, bool all_items,
                                          std::size_t top_k);

struct OracleCell {
  std::string kind;
  int layers = 0;
  std::size_t k = 0;
  std::size_t m = 0;
  std::size_t trials = 0;
  double max_rel_error = 0.0;
  bool passed = false;
};

struct OracleReport {
  std::vector<OracleCell> cells;
  double tolerance = 1e-10;
  bool passed = true;
  std::string to_text() const;
};

/// Fast simplified forms against the naive pairwise sum, for mahalanobis
/// and dnn (layers 1-3). `perturbation` is added to every fast result and
/// exists to check that the checker can fail.
OracleReport cmd_oracle_check(const std::vector<std::size_t>& ks, const std::vector<std::size_t>& ms,
                              std::size_t trials, std::uint64_t seed, double perturbation = 0.0);

struct GradcheckRow {
  model::DistanceSpec spec;
  model::ParamGroup group = model::ParamGroup::W0;
  double max_rel_error = 0.0;
};

struct GradcheckReport {
  std::vector<GradcheckRow> rows;
  double tolerance = 1e-4;
  bool passed = true;
  std::string to_text() const;
};

/// Tape gradients of the squared loss against central differences of the
/// plain-double prediction, per parameter group, dropout off.
GradcheckReport cmd_gradcheck(const std::vector<model::DistanceKind>& kinds, std::uint64_t seed,
                              double step = 1e-5);

/// The model metadata as '#' comment lines, a header "category<TAB>v0..v{k-1}",
/// then one row per category of `field`.
void cmd_export_embeddings(const std::filesystem::path& model_file, const std::string& field,
                           std::ostream& out);

}  // namespace gmlfm::cli
