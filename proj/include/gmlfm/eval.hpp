#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "gmlfm/data.hpp"
#include "gmlfm/model.hpp"

namespace gmlfm::eval {

enum class Task { Rating, TopN };

std::string_view to_string(Task task);
std::optional<Task> parse_task(std::string_view name);

/// Items sorted by score descending, ties by ascending item id.
struct RankedList {
  std::vector<std::int64_t> items;
  std::vector<double> scores;
};

RankedList rank_items(std::span<const std::int64_t> items, std::span<const double> scores);

/// 1-based rank of `item`; throws std::invalid_argument when absent.
std::size_t rank_of(const RankedList& ranked, std::int64_t item);

double rmse(std::span<const double> predictions, std::span<const double> targets);

int hit_ratio_at_k(const RankedList& ranked, std::int64_t positive, std::size_t k);

/// 1 / log2(r + 1) for the single relevant item at rank r <= k, else 0.
double ndcg_at_k(const RankedList& ranked, std::int64_t positive, std::size_t k);

struct MetricsReport {
  Task task = Task::Rating;
  double rmse = 0.0;
  double hr = 0.0;
  double ndcg = 0.0;
  std::size_t k = 0;
  std::size_t count = 0;  // instances (rating) or users (top-n)
  std::vector<std::pair<std::string, std::string>> config;

  /// key=value lines, doubles printed with round-trip precision.
  std::string to_text() const;
  static MetricsReport parse(const std::string& text);
};

using Scorer = std::function<double(const data::SparseInstance&)>;

/// Eval-mode scorer over a trained model.
Scorer model_scorer(const model::ModelParams& params, const model::DistanceSpec& spec);

/// Builds the 100-candidate pool for a held-out interaction: 99 items the
/// user never interacted with plus the positive.
struct CandidateBuilder {
  const data::FieldLayout* layout = nullptr;
  const data::ItemCatalog* catalog = nullptr;
  const data::InteractionSets* known = nullptr;
  std::uint64_t seed = 0;
  std::size_t count = 99;

  std::vector<std::int64_t> candidates(const data::SparseInstance& test) const;
};

MetricsReport evaluate_topn(const Scorer& score, std::span<const data::SparseInstance> test,
                            const CandidateBuilder& builder, std::size_t k = 10);

MetricsReport evaluate_topn(const model::ModelParams& params, const model::DistanceSpec& spec,
                            std::span<const data::SparseInstance> test,
                            const CandidateBuilder& builder, std::size_t k = 10);

MetricsReport evaluate_rating(const Scorer& score, std::span<const data::SparseInstance> test);

MetricsReport evaluate_rating(const model::ModelParams& params, const model::DistanceSpec& spec,
                              std::span<const data::SparseInstance> test);

}  // namespace gmlfm::eval
