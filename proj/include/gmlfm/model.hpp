#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "gmlfm/data.hpp"
#include "gmlfm/linalg.hpp"
#include "gmlfm/tape.hpp"

namespace gmlfm::model {

class ModelError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

enum class DistanceKind : std::uint8_t {
  Inner,
  Euclidean,
  Mahalanobis,
  Dnn,
  Manhattan,
  Chebyshev,
  Cosine,
};

inline constexpr DistanceKind kAllKinds[] = {
    DistanceKind::Inner,     DistanceKind::Euclidean, DistanceKind::Mahalanobis,
    DistanceKind::Dnn,       DistanceKind::Manhattan, DistanceKind::Chebyshev,
    DistanceKind::Cosine,
};

std::string_view to_string(DistanceKind kind);
std::optional<DistanceKind> parse_distance_kind(std::string_view name);

/// Which interaction function is active and its structural options.
///
/// `layers` is the depth of the shared tanh MLP applied to embeddings before
/// the distance. It must be >= 1 for dnn, may be >= 0 for manhattan,
/// chebyshev and cosine, and must be 0 for the remaining kinds.
struct DistanceSpec {
  DistanceKind kind = DistanceKind::Dnn;
  bool use_weight = true;
  int layers = 2;

  /// Minkowski order: 1 for manhattan, 2 for the squared-euclidean family,
  /// infinity for chebyshev. Empty for inner and cosine.
  std::optional<double> minkowski_p() const;

  /// Throws ModelError naming the violated rule.
  void validate() const;

  /// True when predict() uses the linear-time simplified form.
  bool has_fast_path() const;

  bool operator==(const DistanceSpec&) const = default;
};

std::string to_string(const DistanceSpec& spec);

/// Parameter groups, also used as tape leaf groups.
enum class ParamGroup : int { W0 = 0, W, V, H, L, MlpW, MlpB };

inline constexpr int kNumParamGroups = 7;

std::string_view to_string(ParamGroup group);

struct MlpLayer {
  Matrix weight;  // k x k
  std::vector<double> bias;

  bool operator==(const MlpLayer&) const = default;
};

struct ModelParams {
  double w0 = 0.0;
  std::vector<double> w;  // n
  Matrix V;               // n x k
  std::vector<double> h;  // k
  Matrix L;               // k x k for mahalanobis, empty otherwise
  std::vector<MlpLayer> mlp;

  std::size_t n() const { return V.rows(); }
  std::size_t k() const { return V.cols(); }

  /// Zero-valued parameters shaped for `spec`.
  static ModelParams zeros(std::size_t n, std::size_t k, const DistanceSpec& spec);

  /// Throws ModelError if shapes disagree with `spec` or any entry is non-finite.
  void validate(const DistanceSpec& spec) const;

  bool operator==(const ModelParams&) const = default;
};

/// Nonzero entries of one instance, sorted by index.
using ActiveSet = std::span<const data::Entry>;

/// Inverted-dropout masks frozen for one instance: one k-vector per active
/// attribute per gap between consecutive MLP layers.
class DropoutMasks {
 public:
  DropoutMasks() = default;

  static DropoutMasks sample(std::size_t active, int layers, std::size_t k, double rate,
                             std::mt19937_64& rng);

  bool empty() const { return masks_.empty(); }
  /// Mask after layer `gap` (0-based, gap < layers - 1) for active position `pos`.
  std::span<const double> get(std::size_t pos, std::size_t gap) const {
    return masks_[pos * gaps_ + gap];
  }

 private:
  std::size_t gaps_ = 0;
  std::vector<std::vector<double>> masks_;
};

/// v <- tanh(W_l v + b_l) for every layer. With masks, the mask of gap l is
/// applied to the output of layer l for l < layers - 1.
std::vector<double> transform_mlp(std::span<const double> v, std::span<const MlpLayer> mlp,
                                  const DropoutMasks* masks = nullptr, std::size_t position = 0);

/// Samples a fresh mask in train mode; deterministic (no mask) otherwise.
std::vector<double> transform_mlp(std::span<const double> v, std::span<const MlpLayer> mlp,
                                  bool train, double dropout_rate, std::mt19937_64& rng);

/// D(v_i, v_j) for the configured kind, without dropout.
double distance(const DistanceSpec& spec, std::span<const double> vi, std::span<const double> vj,
                const ModelParams& params);

/// M = L^T L.
Matrix psd_from_factor(const Matrix& L);

/// h^T (v_i . v_j)
double transformation_weight(std::span<const double> h, std::span<const double> vi,
                             std::span<const double> vj);

/// Direct double sum over active pairs. Serves as the reference for every
/// faster evaluation route.
double predict_naive(const ModelParams& params, ActiveSet active, const DistanceSpec& spec,
                     const DropoutMasks* masks = nullptr);

/// Weighted Mahalanobis second-order term in two passes over the active set.
double second_order_mahalanobis_fast(ActiveSet active, const Matrix& V, const Matrix& M,
                                     std::span<const double> h);

/// Weighted squared-distance second-order term over transformed embeddings.
/// Row r of `transformed` belongs to active entry r.
double second_order_dnn_fast(ActiveSet active, const Matrix& V, const Matrix& transformed,
                             std::span<const double> h);

/// Fast form for {euclidean, mahalanobis, dnn} with the weight enabled,
/// naive pairwise form otherwise.
double predict(const ModelParams& params, ActiveSet active, const DistanceSpec& spec,
               const DropoutMasks* masks = nullptr);

/// w0 + sum w_i x_i + sum_{i<j} <v_i, v_j> x_i x_j
double vanilla_fm_predict(const ModelParams& params, ActiveSet active);

/// Records the prediction graph of `predict` on `tape` with every touched
/// parameter as a leaf keyed by ParamGroup.
tape::NodeId record_prediction(tape::Tape& tape, const ModelParams& params, ActiveSet active,
                               const DistanceSpec& spec, const DropoutMasks* masks = nullptr);

/// Flat view of all parameters, in group order w0, w, V, h, L, W_l, b_l.
struct FlatLayout {
  struct Range {
    ParamGroup group;
    std::size_t begin;
    std::size_t end;
  };
  std::vector<Range> ranges;
  std::size_t size = 0;
};

FlatLayout flat_layout(const ModelParams& params);
std::vector<double> flatten(const ModelParams& params);
void unflatten(std::span<const double> flat, ModelParams& params);
/// Dense flat gradient from the leaves of a tape GradientMap.
std::vector<double> flatten_gradient(const tape::GradientMap& grads, const ModelParams& params);

}  // namespace gmlfm::model
