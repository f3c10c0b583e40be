#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <vector>

namespace gmlfm::data {

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Field {
  std::string name;
  std::size_t cardinality = 0;

  bool operator==(const Field&) const = default;
};

/// Ordered categorical fields, each owning a contiguous one-hot block of the
/// concatenated attribute vector. `n()` counts known categories only; when
/// unknown slots are reserved, field f additionally owns index `n() + f`.
class FieldLayout {
 public:
  FieldLayout() = default;
  explicit FieldLayout(std::vector<Field> fields, bool reserve_unknown = false);

  const std::vector<Field>& fields() const { return fields_; }
  std::size_t num_fields() const { return fields_.size(); }
  std::size_t offset(std::size_t field) const { return offsets_.at(field); }
  std::size_t cardinality(std::size_t field) const { return fields_.at(field).cardinality; }
  std::size_t n() const { return n_; }
  bool reserves_unknown() const { return reserve_unknown_; }

  /// Rows needed in an embedding table: n plus the reserved unknown slots.
  std::size_t dimension() const { return n_ + (reserve_unknown_ ? fields_.size() : 0); }
  std::size_t unknown_index(std::size_t field) const;

  std::optional<std::size_t> field_index(std::string_view name) const;
  /// Field that owns attribute index `index` (including reserved slots).
  std::size_t field_of(std::size_t index) const;

  bool operator==(const FieldLayout&) const = default;

 private:
  std::vector<Field> fields_;
  std::vector<std::size_t> offsets_;
  std::size_t n_ = 0;
  bool reserve_unknown_ = false;
};

struct Entry {
  std::uint32_t index = 0;
  double value = 0.0;

  bool operator==(const Entry&) const = default;
};

struct SparseInstance {
  double label = 0.0;
  std::vector<Entry> entries;  // strictly increasing indices
  std::int64_t user = -1;
  std::int64_t item = -1;
  std::optional<std::int64_t> timestamp;

  bool operator==(const SparseInstance&) const = default;
};

/// One-hot encoding: field f with category c becomes index offset(f) + c.
SparseInstance encode_instance(std::span<const std::size_t> categories, const FieldLayout& layout,
                               double label);

/// Inverse of encode_instance for one-hot instances.
std::vector<std::size_t> decode_instance(const SparseInstance& instance, const FieldLayout& layout);

/// Category strings per field, in first-seen order.
class Vocabulary {
 public:
  Vocabulary() = default;
  explicit Vocabulary(std::size_t num_fields) : categories_(num_fields), lookup_(num_fields) {}

  std::size_t num_fields() const { return categories_.size(); }
  std::size_t add(std::size_t field, const std::string& category);
  std::optional<std::size_t> find(std::size_t field, const std::string& category) const;
  const std::vector<std::string>& categories(std::size_t field) const { return categories_.at(field); }

  /// Global attribute index; unknown categories map to the field's reserved slot.
  std::size_t attribute_index(const FieldLayout& layout, std::size_t field,
                              const std::string& category) const;

  /// "field,category,index" per line, index being the global attribute index.
  /// `header` is written first; lines starting with '#' are skipped on load.
  void save(const std::filesystem::path& path, const FieldLayout& layout,
            std::string_view header = {}) const;
  static Vocabulary load(const std::filesystem::path& path, const FieldLayout& layout);

  bool operator==(const Vocabulary& o) const { return categories_ == o.categories_; }

 private:
  std::vector<std::vector<std::string>> categories_;
  std::vector<std::unordered_map<std::string, std::size_t>> lookup_;
};

/// Item universe and the fields whose value is determined by the item (for
/// example an item category). Swapping the item of an instance also swaps
/// those fields.
struct ItemCatalog {
  std::size_t item_field = 0;
  std::size_t num_items = 0;
  std::vector<std::size_t> item_side_fields;
  std::vector<std::vector<std::uint32_t>> item_side_indices;  // [item][j] global index

  SparseInstance with_item(const SparseInstance& base, const FieldLayout& layout,
                           std::int64_t item) const;
};

enum class Format { Tabular, LibfmSparse };

std::optional<Format> parse_format(std::string_view name);

struct LoadOptions {
  char delimiter = '\t';
  /// Extra categorical columns to use (besides user and item). Empty: all.
  std::vector<std::string> extra_fields;
  /// libfm-sparse: attribute dimension. When unset it is read from the
  /// sidecar "<path>.meta" holding a line "n=<value>".
  std::optional<std::size_t> declared_n;
};

struct Dataset {
  FieldLayout layout;
  std::vector<SparseInstance> instances;
  Vocabulary vocab;
  std::optional<std::size_t> user_field;
  std::optional<std::size_t> item_field;
  std::optional<ItemCatalog> catalog;
};

/// Tabular: header row naming columns; user, item, label required,
/// timestamp optional, remaining columns are categorical fields.
/// libfm-sparse: "label idx:val ..." with 0-based indices.
Dataset load_interactions(const std::filesystem::path& path, Format format,
                          const LoadOptions& options = {});

struct DatasetSplit {
  std::vector<SparseInstance> train;
  std::vector<SparseInstance> validation;
  std::vector<SparseInstance> test;
  FieldLayout layout;
};

DatasetSplit split_rating(std::span<const SparseInstance> instances, std::array<double, 3> ratios,
                          std::uint64_t seed);

/// Latest interaction per user goes to test (ties: largest item id). Users
/// with a single interaction stay in train.
DatasetSplit split_leave_one_out(std::span<const SparseInstance> instances);

using InteractionSets = std::unordered_map<std::int64_t, std::unordered_set<std::int64_t>>;

InteractionSets collect_interactions(std::span<const SparseInstance> instances);

struct NegativeSample {
  std::vector<SparseInstance> instances;  // positives (+1) followed by their negatives (-1)
  std::size_t shortfall = 0;              // negatives that could not be drawn
};

/// For each positive, `ratio` instances with an item the user never
/// interacted with in `train`, labeled -1. Positives are relabeled +1.
NegativeSample sample_negatives(std::span<const SparseInstance> train, const FieldLayout& layout,
                                const ItemCatalog& catalog, int ratio, std::uint64_t seed);

/// `count` distinct items outside `known` (and different from `positive`),
/// followed by `positive`.
std::vector<std::int64_t> build_eval_candidates(std::int64_t positive, std::size_t num_items,
                                                const std::unordered_set<std::int64_t>& known,
                                                std::size_t count, std::uint64_t seed);

/// Per-user seed derived from a global seed, stable across model variants.
std::uint64_t user_seed(std::uint64_t seed, std::int64_t user);

}  // namespace gmlfm::data
