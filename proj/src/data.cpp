#include "gmlfm/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <sstream>

namespace gmlfm::data {

FieldLayout::FieldLayout(std::vector<Field> fields, bool reserve_unknown)
    : fields_(std::move(fields)), reserve_unknown_(reserve_unknown) {
  offsets_.reserve(fields_.size());
  for (const auto& f : fields_) {
    offsets_.push_back(n_);
    n_ += f.cardinality;
  }
}

std::size_t FieldLayout::unknown_index(std::size_t field) const {
  if (!reserve_unknown_) throw DataError("layout has no reserved unknown slots");
  if (field >= fields_.size()) throw DataError("field out of range");
  return n_ + field;
}

std::optional<std::size_t> FieldLayout::field_index(std::string_view name) const {
  for (std::size_t f = 0; f < fields_.size(); ++f)
    if (fields_[f].name == name) return f;
  return std::nullopt;
}

std::size_t FieldLayout::field_of(std::size_t index) const {
  if (index >= n_) {
    if (index < dimension()) return index - n_;
    throw DataError("attribute index " + std::to_string(index) + " out of range");
  }
  const auto it = std::upper_bound(offsets_.begin(), offsets_.end(), index);
  std::size_t f = static_cast<std::size_t>(it - offsets_.begin()) - 1;
  // Skip empty fields sharing the same offset.
  while (fields_[f].cardinality == 0) ++f;
  return f;
}

SparseInstance encode_instance(std::span<const std::size_t> categories, const FieldLayout& layout,
                               double label) {
  if (categories.size() != layout.num_fields())
    throw DataError("expected " + std::to_string(layout.num_fields()) + " field values, got " +
                    std::to_string(categories.size()));
  SparseInstance inst;
  inst.label = label;
  inst.entries.reserve(categories.size());
  for (std::size_t f = 0; f < categories.size(); ++f) {
    if (categories[f] >= layout.cardinality(f))
      throw DataError("field '" + layout.fields()[f].name + "': category " +
                      std::to_string(categories[f]) + " >= cardinality " +
                      std::to_string(layout.cardinality(f)));
    inst.entries.push_back({static_cast<std::uint32_t>(layout.offset(f) + categories[f]), 1.0});
  }
  return inst;
}

std::vector<std::size_t> decode_instance(const SparseInstance& instance, const FieldLayout& layout) {
  std::vector<std::size_t> out(layout.num_fields(), 0);
  for (const auto& e : instance.entries) {
    const std::size_t f = layout.field_of(e.index);
    out[f] = e.index >= layout.n() ? layout.cardinality(f) : e.index - layout.offset(f);
  }
  return out;
}

std::size_t Vocabulary::add(std::size_t field, const std::string& category) {
  auto& lut = lookup_.at(field);
  if (auto it = lut.find(category); it != lut.end()) return it->second;
  const std::size_t id = categories_[field].size();
  categories_[field].push_back(category);
  lut.emplace(category, id);
  return id;
}

std::optional<std::size_t> Vocabulary::find(std::size_t field, const std::string& category) const {
  const auto& lut = lookup_.at(field);
  if (auto it = lut.find(category); it != lut.end()) return it->second;
  return std::nullopt;
}

std::size_t Vocabulary::attribute_index(const FieldLayout& layout, std::size_t field,
                                        const std::string& category) const {
  if (auto id = find(field, category)) return layout.offset(field) + *id;
  return layout.unknown_index(field);
}

void Vocabulary::save(const std::filesystem::path& path, const FieldLayout& layout,
                      std::string_view header) const {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write vocabulary " + path.string());
  out << header;
  for (std::size_t f = 0; f < categories_.size(); ++f)
    for (std::size_t c = 0; c < categories_[f].size(); ++c)
      out << layout.fields()[f].name << ',' << categories_[f][c] << ',' << layout.offset(f) + c
          << '\n';
}

Vocabulary Vocabulary::load(const std::filesystem::path& path, const FieldLayout& layout) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read vocabulary " + path.string());
  Vocabulary vocab(layout.num_fields());
  std::vector<std::map<std::size_t, std::string>> by_index(layout.num_fields());
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line[0] == '#') continue;
    const auto first = line.find(',');
    const auto last = line.rfind(',');
    if (first == std::string::npos || first == last)
      throw DataError("vocabulary line " + std::to_string(line_no) + ": malformed");
    const auto field = layout.field_index(line.substr(0, first));
    if (!field) throw DataError("vocabulary line " + std::to_string(line_no) + ": unknown field");
    const std::size_t index = std::stoull(line.substr(last + 1));
    by_index[*field][index] = line.substr(first + 1, last - first - 1);
  }
  for (std::size_t f = 0; f < by_index.size(); ++f)
    for (const auto& [index, category] : by_index[f]) vocab.add(f, category);
  return vocab;
}

SparseInstance ItemCatalog::with_item(const SparseInstance& base, const FieldLayout& layout,
                                      std::int64_t item) const {
  SparseInstance out = base;
  out.item = item;
  for (auto& e : out.entries) {
    const std::size_t f = layout.field_of(e.index);
    if (f == item_field) {
      e.index = static_cast<std::uint32_t>(layout.offset(item_field) + item);
      continue;
    }
    for (std::size_t j = 0; j < item_side_fields.size(); ++j)
      if (item_side_fields[j] == f) e.index = item_side_indices[item][j];
  }
  std::sort(out.entries.begin(), out.entries.end(),
            [](const Entry& a, const Entry& b) { return a.index < b.index; });
  return out;
}

std::optional<Format> parse_format(std::string_view name) {
  if (name == "tabular") return Format::Tabular;
  if (name == "libfm" || name == "libfm-sparse") return Format::LibfmSparse;
  return std::nullopt;
}

namespace {

std::vector<std::string> split_line(const std::string& line, char delim) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == delim) {
      out.push_back(std::move(cur));
      cur.clear();
    } else if (c != '\r') {
      cur.push_back(c);
    }
  }
  out.push_back(std::move(cur));
  return out;
}

template <typename T>
bool parse_number(std::string_view s, T& out) {
  const auto* end = s.data() + s.size();
  auto [ptr, ec] = std::from_chars(s.data(), end, out);
  return ec == std::errc{} && ptr == end;
}

bool parse_real(const std::string& s, double& out) {
  if (s.empty()) return false;
  char* end = nullptr;
  out = std::strtod(s.c_str(), &end);
  return end == s.c_str() + s.size() && std::isfinite(out);
}

Dataset load_tabular(std::ifstream& in, const LoadOptions& options) {
  std::string line;
  if (!std::getline(in, line)) throw DataError("no instances");
  const auto header = split_line(line, options.delimiter);
  auto column = [&](std::string_view name) -> std::optional<std::size_t> {
    for (std::size_t i = 0; i < header.size(); ++i)
      if (header[i] == name) return i;
    return std::nullopt;
  };
  const auto user_col = column("user");
  const auto item_col = column("item");
  const auto label_col = column("label");
  const auto time_col = column("timestamp");
  if (!user_col || !item_col || !label_col)
    throw DataError("line 1: header must name user, item and label columns");

  std::vector<std::size_t> field_cols{*user_col, *item_col};
  std::vector<std::string> field_names{"user", "item"};
  if (options.extra_fields.empty()) {
    for (std::size_t i = 0; i < header.size(); ++i) {
      if (i == *user_col || i == *item_col || i == *label_col || (time_col && i == *time_col))
        continue;
      field_cols.push_back(i);
      field_names.push_back(header[i]);
    }
  } else {
    for (const auto& name : options.extra_fields) {
      const auto c = column(name);
      if (!c) throw DataError("line 1: unknown field column '" + name + "'");
      field_cols.push_back(*c);
      field_names.push_back(name);
    }
  }

  Vocabulary vocab(field_cols.size());
  struct Row {
    std::vector<std::size_t> ids;
    double label;
    std::optional<std::int64_t> ts;
  };
  std::vector<Row> rows;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line == "\r") continue;
    const auto cols = split_line(line, options.delimiter);
    if (cols.size() != header.size())
      throw DataError("line " + std::to_string(line_no) + ": expected " +
                      std::to_string(header.size()) + " columns, got " +
                      std::to_string(cols.size()));
    Row row;
    if (!parse_real(cols[*label_col], row.label))
      throw DataError("line " + std::to_string(line_no) + ": bad label '" + cols[*label_col] + "'");
    if (time_col) {
      std::int64_t ts = 0;
      if (!parse_number(cols[*time_col], ts))
        throw DataError("line " + std::to_string(line_no) + ": bad timestamp");
      row.ts = ts;
    }
    for (std::size_t f = 0; f < field_cols.size(); ++f) {
      if (cols[field_cols[f]].empty())
        throw DataError("line " + std::to_string(line_no) + ": empty " + field_names[f]);
      row.ids.push_back(vocab.add(f, cols[field_cols[f]]));
    }
    rows.push_back(std::move(row));
  }
  if (rows.empty()) throw DataError("no instances");

  std::vector<Field> fields;
  for (std::size_t f = 0; f < field_cols.size(); ++f)
    fields.push_back({field_names[f], vocab.categories(f).size()});

  Dataset ds;
  ds.layout = FieldLayout(std::move(fields), /*reserve_unknown=*/true);
  ds.user_field = 0;
  ds.item_field = 1;
  ds.instances.reserve(rows.size());
  for (const auto& row : rows) {
    SparseInstance inst = encode_instance(row.ids, ds.layout, row.label);
    inst.user = static_cast<std::int64_t>(row.ids[0]);
    inst.item = static_cast<std::int64_t>(row.ids[1]);
    inst.timestamp = row.ts;
    ds.instances.push_back(std::move(inst));
  }

  // A field is item-side when every item carries a single category for it.
  ItemCatalog catalog;
  catalog.item_field = 1;
  catalog.num_items = ds.layout.cardinality(1);
  constexpr std::uint32_t kUnset = 0xffffffffu;
  for (std::size_t f = 2; f < ds.layout.num_fields(); ++f) {
    std::vector<std::uint32_t> per_item(catalog.num_items, kUnset);
    bool determined = true;
    for (const auto& row : rows) {
      const auto idx = static_cast<std::uint32_t>(ds.layout.offset(f) + row.ids[f]);
      auto& slot = per_item[row.ids[1]];
      if (slot == kUnset) {
        slot = idx;
      } else if (slot != idx) {
        determined = false;
        break;
      }
    }
    if (!determined) continue;
    catalog.item_side_fields.push_back(f);
    if (catalog.item_side_indices.empty()) catalog.item_side_indices.resize(catalog.num_items);
    for (std::size_t i = 0; i < catalog.num_items; ++i)
      catalog.item_side_indices[i].push_back(per_item[i]);
  }
  if (catalog.item_side_indices.empty()) catalog.item_side_indices.resize(catalog.num_items);
  ds.catalog = std::move(catalog);
  ds.vocab = std::move(vocab);
  return ds;
}

std::optional<std::size_t> read_sidecar_n(const std::filesystem::path& path) {
  std::ifstream in(path.string() + ".meta");
  if (!in) return std::nullopt;
  std::string line;
  while (std::getline(in, line)) {
    if (line.rfind("n=", 0) == 0) {
      std::size_t n = 0;
      if (parse_number(std::string_view(line).substr(2), n)) return n;
    }
  }
  return std::nullopt;
}

Dataset load_libfm(std::ifstream& in, const std::filesystem::path& path, const LoadOptions& options) {
  const auto n = options.declared_n ? options.declared_n : read_sidecar_n(path);
  if (!n) throw DataError("libfm-sparse: attribute dimension n not declared");
  Dataset ds;
  ds.layout = FieldLayout({{"features", *n}}, false);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    std::istringstream tokens(line);
    std::string tok;
    if (!(tokens >> tok)) continue;
    SparseInstance inst;
    if (!parse_real(tok, inst.label))
      throw DataError("line " + std::to_string(line_no) + ": bad label '" + tok + "'");
    while (tokens >> tok) {
      const auto colon = tok.find(':');
      std::size_t idx = 0;
      double value = 0.0;
      if (colon == std::string::npos ||
          !parse_number(std::string_view(tok).substr(0, colon), idx) ||
          !parse_real(tok.substr(colon + 1), value))
        throw DataError("line " + std::to_string(line_no) + ": malformed pair '" + tok + "'");
      if (idx >= *n)
        throw DataError("line " + std::to_string(line_no) + ": index " + std::to_string(idx) +
                        " >= n " + std::to_string(*n));
      if (!inst.entries.empty() && inst.entries.back().index >= idx)
        throw DataError("line " + std::to_string(line_no) + ": indices not strictly increasing");
      inst.entries.push_back({static_cast<std::uint32_t>(idx), value});
    }
    ds.instances.push_back(std::move(inst));
  }
  if (ds.instances.empty()) throw DataError("no instances");
  return ds;
}

}  // namespace

Dataset load_interactions(const std::filesystem::path& path, Format format,
                          const LoadOptions& options) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  return format == Format::Tabular ? load_tabular(in, options) : load_libfm(in, path, options);
}

DatasetSplit split_rating(std::span<const SparseInstance> instances, std::array<double, 3> ratios,
                          std::uint64_t seed) {
  const double total = ratios[0] + ratios[1] + ratios[2];
  if (std::abs(total - 1.0) > 1e-9 || ratios[0] < 0 || ratios[1] < 0 || ratios[2] < 0)
    throw DataError("split ratios must be non-negative and sum to 1");
  if (instances.size() < 10)
    throw DataError("split_rating needs at least 10 instances, got " +
                    std::to_string(instances.size()));

  std::vector<std::size_t> order(instances.size());
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);

  const auto n = static_cast<double>(instances.size());
  const auto n_train = static_cast<std::size_t>(std::llround(ratios[0] * n));
  const auto n_val = std::min(instances.size() - n_train,
                              static_cast<std::size_t>(std::llround(ratios[1] * n)));

  DatasetSplit split;
  for (std::size_t i = 0; i < order.size(); ++i) {
    auto& dst = i < n_train ? split.train : (i < n_train + n_val ? split.validation : split.test);
    dst.push_back(instances[order[i]]);
  }
  return split;
}

DatasetSplit split_leave_one_out(std::span<const SparseInstance> instances) {
  std::map<std::int64_t, std::vector<std::size_t>> by_user;
  for (std::size_t i = 0; i < instances.size(); ++i) {
    if (!instances[i].timestamp)
      throw DataError("leave-one-out split needs timestamps (instance " + std::to_string(i) + ")");
    by_user[instances[i].user].push_back(i);
  }
  std::vector<char> is_test(instances.size(), 0);
  DatasetSplit split;
  for (const auto& [user, idx] : by_user) {
    if (idx.size() < 2) continue;
    std::size_t best = idx.front();
    for (std::size_t i : idx) {
      const auto& a = instances[i];
      const auto& b = instances[best];
      if (*a.timestamp > *b.timestamp || (*a.timestamp == *b.timestamp && a.item > b.item))
        best = i;
    }
    is_test[best] = 1;
    split.test.push_back(instances[best]);
  }
  for (std::size_t i = 0; i < instances.size(); ++i)
    if (!is_test[i]) split.train.push_back(instances[i]);
  return split;
}

InteractionSets collect_interactions(std::span<const SparseInstance> instances) {
  InteractionSets sets;
  for (const auto& inst : instances) sets[inst.user].insert(inst.item);
  return sets;
}

NegativeSample sample_negatives(std::span<const SparseInstance> train, const FieldLayout& layout,
                                const ItemCatalog& catalog, int ratio, std::uint64_t seed) {
  if (ratio < 0) throw DataError("negative sampling ratio must be >= 0");
  NegativeSample result;
  result.instances.reserve(train.size() * (1 + static_cast<std::size_t>(ratio)));
  if (ratio == 0) {
    result.instances.assign(train.begin(), train.end());
    return result;
  }
  const auto seen = collect_interactions(train);
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::int64_t> pick(0, static_cast<std::int64_t>(catalog.num_items) - 1);

  for (const auto& pos : train) {
    SparseInstance p = pos;
    p.label = 1.0;
    result.instances.push_back(p);
    const auto& known = seen.at(pos.user);
    const std::size_t available = catalog.num_items - std::min(catalog.num_items, known.size());
    for (int r = 0; r < ratio; ++r) {
      if (available == 0) {
        ++result.shortfall;
        continue;
      }
      std::int64_t item = pick(rng);
      while (known.contains(item)) item = pick(rng);
      SparseInstance neg = catalog.with_item(pos, layout, item);
      neg.label = -1.0;
      result.instances.push_back(std::move(neg));
    }
  }
  return result;
}

std::vector<std::int64_t> build_eval_candidates(std::int64_t positive, std::size_t num_items,
                                                const std::unordered_set<std::int64_t>& known,
                                                std::size_t count, std::uint64_t seed) {
  std::vector<std::int64_t> pool;
  pool.reserve(num_items);
  for (std::size_t i = 0; i < num_items; ++i) {
    const auto item = static_cast<std::int64_t>(i);
    if (item != positive && !known.contains(item)) pool.push_back(item);
  }
  if (pool.size() < count)
    throw DataError("only " + std::to_string(pool.size()) + " non-interacted items available, need " +
                    std::to_string(count));
  std::mt19937_64 rng(seed);
  for (std::size_t i = 0; i < count; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, pool.size() - 1);
    std::swap(pool[i], pool[pick(rng)]);
  }
  pool.resize(count);
  pool.push_back(positive);
  return pool;
}

std::uint64_t user_seed(std::uint64_t seed, std::int64_t user) {
  auto mix = [](std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  };
  return mix(seed ^ mix(static_cast<std::uint64_t>(user)));
}

}  // namespace gmlfm::data
