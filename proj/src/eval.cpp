#include "gmlfm/eval.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "gmlfm/linalg.hpp"

namespace gmlfm::eval {

std::string_view to_string(Task task) { return task == Task::Rating ? "rating" : "topn"; }

std::optional<Task> parse_task(std::string_view name) {
  if (name == "rating") return Task::Rating;
  if (name == "topn") return Task::TopN;
  return std::nullopt;
}

RankedList rank_items(std::span<const std::int64_t> items, std::span<const double> scores) {
  if (items.size() != scores.size()) throw std::invalid_argument("rank_items: size mismatch");
  std::vector<std::size_t> order(items.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (scores[a] != scores[b]) return scores[a] > scores[b];
    return items[a] < items[b];
  });
  RankedList out;
  out.items.reserve(order.size());
  out.scores.reserve(order.size());
  for (std::size_t i : order) {
    out.items.push_back(items[i]);
    out.scores.push_back(scores[i]);
  }
  return out;
}

std::size_t rank_of(const RankedList& ranked, std::int64_t item) {
  const auto it = std::find(ranked.items.begin(), ranked.items.end(), item);
  if (it == ranked.items.end())
    throw std::invalid_argument("positive item " + std::to_string(item) +
                                " is not among the candidates");
  return static_cast<std::size_t>(it - ranked.items.begin()) + 1;
}

double rmse(std::span<const double> predictions, std::span<const double> targets) {
  if (predictions.empty() || predictions.size() != targets.size())
    throw std::invalid_argument("rmse: need equal, nonzero lengths");
  CompensatedSum sum;
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    const double r = predictions[i] - targets[i];
    sum.add(r * r);
  }
  return std::sqrt(sum.value() / static_cast<double>(predictions.size()));
}

int hit_ratio_at_k(const RankedList& ranked, std::int64_t positive, std::size_t k) {
  if (k < 1) throw std::invalid_argument("k must be >= 1");
  return rank_of(ranked, positive) <= k ? 1 : 0;
}

double ndcg_at_k(const RankedList& ranked, std::int64_t positive, std::size_t k) {
  if (k < 1) throw std::invalid_argument("k must be >= 1");
  const std::size_t r = rank_of(ranked, positive);
  return r <= k ? 1.0 / std::log2(static_cast<double>(r) + 1.0) : 0.0;
}

std::string MetricsReport::to_text() const {
  std::ostringstream os;
  os.precision(17);
  os << "task=" << to_string(task) << '\n';
  if (task == Task::Rating) {
    os << "rmse=" << rmse << '\n';
    os << "instances=" << count << '\n';
  } else {
    os << "k=" << k << '\n';
    os << "hr=" << hr << '\n';
    os << "ndcg=" << ndcg << '\n';
    os << "users=" << count << '\n';
  }
  for (const auto& [key, value] : config) os << "config." << key << '=' << value << '\n';
  return os.str();
}

MetricsReport MetricsReport::parse(const std::string& text) {
  MetricsReport r;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    const auto eq = line.find('=');
    if (line.empty() || line[0] == '#' || eq == std::string::npos) continue;
    const std::string key = line.substr(0, eq);
    const std::string value = line.substr(eq + 1);
    if (key == "task") {
      const auto t = parse_task(value);
      if (!t) throw std::invalid_argument("metrics: unknown task '" + value + "'");
      r.task = *t;
    } else if (key == "rmse") {
      r.rmse = std::stod(value);
    } else if (key == "hr") {
      r.hr = std::stod(value);
    } else if (key == "ndcg") {
      r.ndcg = std::stod(value);
    } else if (key == "k") {
      r.k = std::stoull(value);
    } else if (key == "users" || key == "instances") {
      r.count = std::stoull(value);
    } else if (key.rfind("config.", 0) == 0) {
      r.config.emplace_back(key.substr(7), value);
    }
  }
  return r;
}

Scorer model_scorer(const model::ModelParams& params, const model::DistanceSpec& spec) {
  return [&params, spec](const data::SparseInstance& inst) {
    return model::predict(params, inst.entries, spec);
  };
}

std::vector<std::int64_t> CandidateBuilder::candidates(const data::SparseInstance& test) const {
  static const std::unordered_set<std::int64_t> kNone;
  const std::unordered_set<std::int64_t>* user_known = &kNone;
  if (known) {
    if (auto it = known->find(test.user); it != known->end()) user_known = &it->second;
  }
  return data::build_eval_candidates(test.item, catalog->num_items, *user_known, count,
                                     data::user_seed(seed, test.user));
}

MetricsReport evaluate_topn(const Scorer& score, std::span<const data::SparseInstance> test,
                            const CandidateBuilder& builder, std::size_t k) {
  if (test.empty()) throw std::invalid_argument("evaluate_topn: empty test set");
  CompensatedSum hr_sum;
  CompensatedSum ndcg_sum;
  std::vector<double> scores;
  for (const auto& inst : test) {
    const auto items = builder.candidates(inst);
    scores.clear();
    for (auto item : items) scores.push_back(score(builder.catalog->with_item(inst, *builder.layout, item)));
    const RankedList ranked = rank_items(items, scores);
    hr_sum.add(hit_ratio_at_k(ranked, inst.item, k));
    ndcg_sum.add(ndcg_at_k(ranked, inst.item, k));
  }
  MetricsReport r;
  r.task = Task::TopN;
  r.k = k;
  r.count = test.size();
  r.hr = hr_sum.value() / static_cast<double>(test.size());
  r.ndcg = ndcg_sum.value() / static_cast<double>(test.size());
  return r;
}

MetricsReport evaluate_topn(const model::ModelParams& params, const model::DistanceSpec& spec,
                            std::span<const data::SparseInstance> test,
                            const CandidateBuilder& builder, std::size_t k) {
  return evaluate_topn(model_scorer(params, spec), test, builder, k);
}

MetricsReport evaluate_rating(const Scorer& score, std::span<const data::SparseInstance> test) {
  if (test.empty()) throw std::invalid_argument("evaluate_rating: empty test set");
  std::vector<double> preds;
  std::vector<double> targets;
  preds.reserve(test.size());
  targets.reserve(test.size());
  for (const auto& inst : test) {
    preds.push_back(score(inst));
    targets.push_back(inst.label);
  }
  MetricsReport r;
  r.task = Task::Rating;
  r.rmse = rmse(preds, targets);
  r.count = test.size();
  return r;
}

MetricsReport evaluate_rating(const model::ModelParams& params, const model::DistanceSpec& spec,
                              std::span<const data::SparseInstance> test) {
  return evaluate_rating(model_scorer(params, spec), test);
}

}  // namespace gmlfm::eval
