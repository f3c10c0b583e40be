#include "gmlfm/experiment.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <random>
#include <sstream>

#include "gmlfm/model_io.hpp"

#ifndef GMLFM_VERSION
#define GMLFM_VERSION "dev"
#endif

namespace gmlfm::cli {

namespace fs = std::filesystem;

std::string_view toolkit_version() { return GMLFM_VERSION; }

namespace {

/// Shortest text that parses back to the same double.
std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return {buf, res.ptr};
}

template <typename T>
T parse_int(const std::string& key, const std::string& value) {
  T out{};
  const auto* end = value.data() + value.size();
  const auto [ptr, ec] = std::from_chars(value.data(), end, out);
  if (ec != std::errc{} || ptr != end) throw ConfigError(key, "expected an integer, got '" + value + "'");
  return out;
}

double parse_double(const std::string& key, const std::string& value) {
  double out = 0.0;
  const auto* end = value.data() + value.size();
  const auto [ptr, ec] = std::from_chars(value.data(), end, out);
  if (ec != std::errc{} || ptr != end || !std::isfinite(out))
    throw ConfigError(key, "expected a number, got '" + value + "'");
  return out;
}

bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1" || value == "on" || value == "yes") return true;
  if (value == "false" || value == "0" || value == "off" || value == "no") return false;
  throw ConfigError(key, "expected a boolean, got '" + value + "'");
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split_list(const std::string& s, char sep = ',') {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream in(s);
  while (std::getline(in, cur, sep)) {
    cur = trim(cur);
    if (!cur.empty()) out.push_back(cur);
  }
  return out;
}

std::string delimiter_name(char d) {
  if (d == '\t') return "tab";
  return std::string(1, d);
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

fs::path meta_path(const fs::path& model_file) { return model_file.string() + ".meta"; }

}  // namespace

void ExperimentConfig::set(const std::string& raw_key, const std::string& raw_value) {
  const std::string key = trim(raw_key);
  const std::string value = trim(raw_value);
  if (key == "task") {
    const auto t = eval::parse_task(value);
    if (!t) throw ConfigError(key, "unknown task '" + value + "' (rating or topn)");
    task = *t;
  } else if (key == "data-path" || key == "data") {
    data_path = value;
  } else if (key == "data-format") {
    const auto f = data::parse_format(value);
    if (!f) throw ConfigError(key, "unknown data format '" + value + "'");
    data_format = *f;
  } else if (key == "fields") {
    fields = split_list(value);
  } else if (key == "delimiter") {
    if (value == "tab" || value == "\\t")
      delimiter = '\t';
    else if (value.size() == 1)
      delimiter = value[0];
    else
      throw ConfigError(key, "expected a single character or 'tab'");
  } else if (key == "libfm-n") {
    libfm_n = parse_int<std::size_t>(key, value);
  } else if (key == "distance") {
    const auto k = model::parse_distance_kind(value);
    if (!k) throw ConfigError(key, "unknown distance kind '" + value + "'");
    distance = *k;
  } else if (key == "use-weight") {
    use_weight = parse_bool(key, value);
  } else if (key == "layers") {
    layers = parse_int<int>(key, value);
  } else if (key == "embed-dim") {
    hyper.embed_dim = parse_int<std::size_t>(key, value);
  } else if (key == "lr") {
    hyper.learning_rate = parse_double(key, value);
  } else if (key == "batch-size") {
    hyper.batch_size = parse_int<std::size_t>(key, value);
  } else if (key == "epochs") {
    hyper.epochs = parse_int<int>(key, value);
  } else if (key == "dropout") {
    hyper.dropout = parse_double(key, value);
  } else if (key == "optimizer") {
    const auto o = train::parse_optimizer(value);
    if (!o) throw ConfigError(key, "unknown optimizer '" + value + "' (sgd or adam)");
    hyper.optimizer = *o;
  } else if (key == "adam-beta1") {
    hyper.beta1 = parse_double(key, value);
  } else if (key == "adam-beta2") {
    hyper.beta2 = parse_double(key, value);
  } else if (key == "adam-eps") {
    hyper.adam_eps = parse_double(key, value);
  } else if (key == "l2") {
    hyper.l2 = parse_double(key, value);
  } else if (key == "patience") {
    hyper.patience = parse_int<int>(key, value);
  } else if (key == "clip-norm") {
    hyper.clip_norm = parse_double(key, value);
  } else if (key == "seed") {
    hyper.seed = parse_int<std::uint64_t>(key, value);
  } else if (key == "negatives") {
    negatives = parse_int<int>(key, value);
  } else if (key == "output-dir") {
    output_dir = value;
  } else if (key == "force") {
    force = parse_bool(key, value);
  } else {
    throw ConfigError(key, "unknown configuration key");
  }
}

void ExperimentConfig::apply_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config", "cannot read " + path.string());
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config", path.string() + ":" + std::to_string(line_no) + ": expected key=value");
    set(line.substr(0, eq), line.substr(eq + 1));
  }
}

ExperimentConfig ExperimentConfig::from_file(const fs::path& path) {
  ExperimentConfig c;
  c.apply_file(path);
  return c;
}

int ExperimentConfig::resolved_layers() const {
  if (layers) return *layers;
  return distance == model::DistanceKind::Dnn ? 2 : 0;
}

model::DistanceSpec ExperimentConfig::spec() const {
  return {distance, use_weight, resolved_layers()};
}

void ExperimentConfig::validate() const {
  if (data_path.empty()) throw ConfigError("data-path", "required");
  try {
    spec().validate();
  } catch (const model::ModelError& e) {
    throw ConfigError("layers", e.what());
  }
  try {
    hyper.validate();
  } catch (const std::invalid_argument& e) {
    const std::string msg = e.what();
    const auto colon = msg.find(':');
    throw ConfigError(colon == std::string::npos ? "hyper" : msg.substr(0, colon),
                      colon == std::string::npos ? msg : trim(msg.substr(colon + 1)));
  }
  if (negatives < 0) throw ConfigError("negatives", "must be >= 0");
  if (task == eval::Task::TopN && data_format != data::Format::Tabular)
    throw ConfigError("data-format", "top-n evaluation needs tabular data with user and item columns");
}

std::vector<std::pair<std::string, std::string>> ExperimentConfig::echo() const {
  std::vector<std::pair<std::string, std::string>> out;
  std::string field_list;
  for (const auto& f : fields) field_list += (field_list.empty() ? "" : ",") + f;
  out.emplace_back("task", std::string(eval::to_string(task)));
  out.emplace_back("data-path", data_path);
  out.emplace_back("data-format", data_format == data::Format::Tabular ? "tabular" : "libfm");
  out.emplace_back("fields", field_list);
  out.emplace_back("delimiter", delimiter_name(delimiter));
  if (libfm_n) out.emplace_back("libfm-n", std::to_string(*libfm_n));
  out.emplace_back("distance", std::string(model::to_string(distance)));
  out.emplace_back("use-weight", use_weight ? "true" : "false");
  out.emplace_back("layers", std::to_string(resolved_layers()));
  out.emplace_back("embed-dim", std::to_string(hyper.embed_dim));
  out.emplace_back("lr", format_double(hyper.learning_rate));
  out.emplace_back("batch-size", std::to_string(hyper.batch_size));
  out.emplace_back("epochs", std::to_string(hyper.epochs));
  out.emplace_back("dropout", format_double(hyper.dropout));
  out.emplace_back("optimizer", std::string(train::to_string(hyper.optimizer)));
  out.emplace_back("adam-beta1", format_double(hyper.beta1));
  out.emplace_back("adam-beta2", format_double(hyper.beta2));
  out.emplace_back("adam-eps", format_double(hyper.adam_eps));
  out.emplace_back("l2", format_double(hyper.l2));
  out.emplace_back("patience", std::to_string(hyper.patience));
  out.emplace_back("clip-norm", format_double(hyper.clip_norm));
  out.emplace_back("seed", std::to_string(hyper.seed));
  out.emplace_back("negatives", std::to_string(negatives));
  return out;
}

data::Dataset load_dataset(const ExperimentConfig& config) {
  data::LoadOptions opts;
  opts.delimiter = config.delimiter;
  opts.extra_fields = config.fields;
  opts.declared_n = config.libfm_n;
  return data::load_interactions(config.data_path, config.data_format, opts);
}

PreparedData prepare_data(const ExperimentConfig& config, data::Dataset dataset) {
  PreparedData p;
  p.dataset = std::move(dataset);
  const auto& ds = p.dataset;
  const std::uint64_t seed = config.hyper.seed;
  if (config.task == eval::Task::Rating) {
    std::vector<data::SparseInstance> pool;
    if (ds.catalog && config.negatives > 0) {
      auto ns = data::sample_negatives(ds.instances, ds.layout, *ds.catalog, config.negatives, seed + 1);
      p.negative_shortfall = ns.shortfall;
      pool = std::move(ns.instances);
    } else {
      pool = ds.instances;
    }
    p.split = data::split_rating(pool, {0.7, 0.2, 0.1}, seed);
  } else {
    if (!ds.catalog) throw data::DataError("top-n evaluation needs user and item columns");
    p.split = data::split_leave_one_out(ds.instances);
    auto ns = data::sample_negatives(p.split.train, ds.layout, *ds.catalog, config.negatives, seed + 1);
    p.negative_shortfall = ns.shortfall;
    p.split.train = std::move(ns.instances);
  }
  p.split.layout = ds.layout;
  p.known = data::collect_interactions(ds.instances);
  return p;
}

eval::CandidateBuilder candidate_builder(const ExperimentConfig& config, const PreparedData& data) {
  eval::CandidateBuilder b;
  b.layout = &data.dataset.layout;
  b.catalog = &*data.dataset.catalog;
  b.known = &data.known;
  b.seed = config.hyper.seed + 2;
  return b;
}

eval::MetricsReport evaluate_test(const ExperimentConfig& config, const PreparedData& data,
                                  const model::ModelParams& params) {
  const auto spec = config.spec();
  eval::MetricsReport report =
      config.task == eval::Task::Rating
          ? eval::evaluate_rating(params, spec, data.split.test)
          : eval::evaluate_topn(params, spec, data.split.test, candidate_builder(config, data), 10);
  report.config = config.echo();
  report.config.emplace_back("version", std::string(toolkit_version()));
  return report;
}

std::optional<train::Validation> make_validation(const ExperimentConfig& config,
                                                 const PreparedData& data) {
  if (data.split.validation.empty()) return std::nullopt;
  const auto spec = config.spec();
  const auto* validation = &data.split.validation;
  if (config.task == eval::Task::Rating) {
    return train::Validation{"rmse", false, [spec, validation](const model::ModelParams& p) {
                               return eval::evaluate_rating(p, spec, *validation).rmse;
                             }};
  }
  auto builder = candidate_builder(config, data);
  return train::Validation{"hr@10", true, [spec, validation, builder](const model::ModelParams& p) {
                             return eval::evaluate_topn(p, spec, *validation, builder, 10).hr;
                           }};
}

namespace {

std::string header_comment(const ExperimentConfig& config) {
  std::string s = "# gmlfm " + std::string(toolkit_version()) + "\n";
  for (const auto& [k, v] : config.echo()) s += "# " + k + "=" + v + "\n";
  return s;
}

std::string config_text(const ExperimentConfig& config) {
  std::string s;
  for (const auto& [k, v] : config.echo()) s += k + "=" + v + "\n";
  return s;
}

template <typename Fn>
auto run_stage(const std::string& stage, Fn&& fn) -> decltype(fn()) {
  try {
    return fn();
  } catch (const ConfigError&) {
    throw;
  } catch (const StageError&) {
    throw;
  } catch (const std::exception& e) {
    throw StageError(stage, e.what());
  }
}

}  // namespace

TrainOutcome cmd_train(const ExperimentConfig& config, std::ostream& log) {
  config.validate();
  if (config.output_dir.empty()) throw ConfigError("output-dir", "required");
  const fs::path dir = config.output_dir;
  TrainOutcome out;
  out.model_path = dir / "model.bin";
  out.history_path = dir / "history.tsv";
  out.metrics_path = dir / "metrics.txt";
  out.config_path = dir / "config.txt";
  if (!config.force) {
    for (const auto& p : {out.model_path, out.history_path, out.metrics_path, out.config_path})
      if (fs::exists(p))
        throw ConfigError("output-dir", dir.string() + " already holds results; pass --force to overwrite");
  }

  auto dataset = run_stage("load", [&] { return load_dataset(config); });
  log << "loaded " << dataset.instances.size() << " instances, n=" << dataset.layout.n()
      << ", fields=" << dataset.layout.num_fields() << '\n';
  const PreparedData data = run_stage("split", [&] { return prepare_data(config, std::move(dataset)); });
  if (data.negative_shortfall > 0)
    log << "warning: " << data.negative_shortfall
        << " negatives could not be drawn (users interacted with every item)\n";
  log << "train=" << data.split.train.size() << " validation=" << data.split.validation.size()
      << " test=" << data.split.test.size() << '\n';

  const auto spec = config.spec();
  out.fit = run_stage("fit", [&] {
    return train::fit(data.split.train, data.dataset.layout.dimension(), spec, config.hyper,
                      make_validation(config, data));
  });
  for (const auto& r : out.fit.history) {
    log << "epoch " << r.epoch << " loss=" << r.train_loss;
    if (r.validation) log << " validation=" << *r.validation;
    log << '\n';
  }
  out.metrics = run_stage("evaluate", [&] { return evaluate_test(config, data, out.fit.params); });

  run_stage("write", [&] {
    fs::create_directories(dir);
    io::ModelBundle bundle{out.fit.params, spec, data.dataset.layout, data.dataset.vocab,
                           data.dataset.catalog, header_comment(config)};
    io::save_model(out.model_path, bundle);

    // The sidecar is itself a config file that cmd_evaluate reads back.
    write_text(meta_path(out.model_path), "# gmlfm " + std::string(toolkit_version()) + "\n# n=" +
                                              std::to_string(out.fit.params.n()) + " k=" +
                                              std::to_string(out.fit.params.k()) + "\n" +
                                              config_text(config));
    if (data.dataset.vocab.num_fields() > 0)
      data.dataset.vocab.save(dir / "vocab.csv", data.dataset.layout, header_comment(config));

    std::ostringstream history;
    history << header_comment(config);
    train::write_history(history, out.fit.history,
                         config.task == eval::Task::Rating ? "rmse" : "hr@10");
    write_text(out.history_path, history.str());
    write_text(out.metrics_path, out.metrics.to_text());

    write_text(out.config_path, "# gmlfm " + std::string(toolkit_version()) + "\n" + config_text(config));
  });
  return out;
}

eval::MetricsReport cmd_evaluate(const fs::path& model_file,
                                 const std::map<std::string, std::string>& overrides,
                                 const std::optional<fs::path>& metrics_out) {
  ExperimentConfig config;
  if (fs::exists(meta_path(model_file))) config.apply_file(meta_path(model_file));
  for (const auto& [k, v] : overrides) config.set(k, v);
  config.validate();

  auto dataset = run_stage("load", [&] { return load_dataset(config); });
  const auto bundle = run_stage("model", [&] {
    return io::load_model(model_file, dataset.layout.dimension(), config.hyper.embed_dim);
  });
  if (!(bundle.layout == dataset.layout))
    throw StageError("model", "field layout of the data does not match the model (expected n=" +
                                  std::to_string(bundle.layout.n()) + ", found n=" +
                                  std::to_string(dataset.layout.n()) + ")");
  if (!(bundle.spec == config.spec()))
    throw StageError("model", "distance spec mismatch: model has " + model::to_string(bundle.spec) +
                                  ", config has " + model::to_string(config.spec()));
  const PreparedData data = run_stage("split", [&] { return prepare_data(config, std::move(dataset)); });
  auto report = run_stage("evaluate", [&] { return evaluate_test(config, data, bundle.params); });
  if (metrics_out) run_stage("write", [&] { write_text(*metrics_out, report.to_text()); });
  return report;
}

std::vector<Recommendation> cmd_recommend(const fs::path& model_file, const std::string& user,
                                          const std::vector<std::string>& items, bool all_items,
                                          std::size_t top_k) {
  if (top_k < 1) throw ConfigError("top-k", "must be >= 1");
  const auto bundle = run_stage("model", [&] { return io::load_model(model_file); });
  const auto& layout = bundle.layout;
  const auto user_field = layout.field_index("user");
  const auto item_field = layout.field_index("item");
  if (!user_field || !item_field || !layout.reserves_unknown() || !bundle.catalog)
    throw StageError("recommend", "model was not trained on tabular user/item data");

  std::vector<std::string> universe = items;
  if (all_items && universe.empty()) universe = bundle.vocab.categories(*item_field);
  if (universe.empty()) throw ConfigError("items", "empty item universe");

  const auto& catalog = *bundle.catalog;
  const std::size_t known_items = bundle.vocab.categories(*item_field).size();
  std::vector<std::int64_t> ids;
  std::vector<double> scores;
  for (std::size_t pos = 0; pos < universe.size(); ++pos) {
    std::vector<std::uint32_t> indices(layout.num_fields());
    for (std::size_t f = 0; f < layout.num_fields(); ++f)
      indices[f] = static_cast<std::uint32_t>(layout.unknown_index(f));
    indices[*user_field] =
        static_cast<std::uint32_t>(bundle.vocab.attribute_index(layout, *user_field, user));
    const auto item_id = bundle.vocab.find(*item_field, universe[pos]);
    indices[*item_field] =
        static_cast<std::uint32_t>(bundle.vocab.attribute_index(layout, *item_field, universe[pos]));
    if (item_id) {
      for (std::size_t j = 0; j < catalog.item_side_fields.size(); ++j)
        indices[catalog.item_side_fields[j]] = catalog.item_side_indices[*item_id][j];
    }
    data::SparseInstance inst;
    for (auto idx : indices) inst.entries.push_back({idx, 1.0});
    std::sort(inst.entries.begin(), inst.entries.end(),
              [](const data::Entry& a, const data::Entry& b) { return a.index < b.index; });
    ids.push_back(item_id ? static_cast<std::int64_t>(*item_id)
                          : static_cast<std::int64_t>(known_items + pos));
    scores.push_back(model::predict(bundle.params, inst.entries, bundle.spec));
  }
  const auto ranked = eval::rank_items(ids, scores);
  std::vector<Recommendation> out;
  for (std::size_t r = 0; r < std::min(top_k, ranked.items.size()); ++r) {
    const auto id = ranked.items[r];
    const auto& name = id < static_cast<std::int64_t>(known_items)
                           ? bundle.vocab.categories(*item_field)[static_cast<std::size_t>(id)]
                           : universe[static_cast<std::size_t>(id) - known_items];
    out.push_back({name, ranked.scores[r]});
  }
  return out;
}

std::string OracleReport::to_text() const {
  std::ostringstream os;
  os << "kind\tlayers\tk\tm\ttrials\tmax_rel_error\tstatus\n";
  for (const auto& c : cells)
    os << c.kind << '\t' << c.layers << '\t' << c.k << '\t' << c.m << '\t' << c.trials << '\t'
       << std::scientific << std::setprecision(3) << c.max_rel_error << std::defaultfloat << '\t'
       << (c.passed ? "pass" : "FAIL") << '\n';
  os << "tolerance=" << tolerance << '\n';
  os << "result=" << (passed ? "pass" : "FAIL") << '\n';
  return os.str();
}

OracleReport cmd_oracle_check(const std::vector<std::size_t>& ks, const std::vector<std::size_t>& ms,
                              std::size_t trials, std::uint64_t seed, double perturbation) {
  if (trials < 1) throw ConfigError("trials", "must be >= 1");
  OracleReport report;
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  auto fill = [&](std::vector<double>& xs) {
    for (auto& x : xs) x = unit(rng);
  };
  auto rel = [](double fast, double naive) {
    return std::abs(fast - naive) / std::max(1.0, std::abs(naive));
  };

  struct Variant {
    model::DistanceKind kind;
    int layers;
  };
  const Variant variants[] = {{model::DistanceKind::Mahalanobis, 0},
                              {model::DistanceKind::Dnn, 1},
                              {model::DistanceKind::Dnn, 2},
                              {model::DistanceKind::Dnn, 3}};

  for (const auto& variant : variants) {
    const model::DistanceSpec spec{variant.kind, true, variant.layers};
    for (std::size_t k : ks) {
      for (std::size_t m : ms) {
        OracleCell cell{std::string(model::to_string(variant.kind)), variant.layers, k, m, trials, 0.0, true};
        for (std::size_t t = 0; t < trials; ++t) {
          auto p = model::ModelParams::zeros(m, k, spec);
          fill(p.V.data());
          fill(p.h);
          fill(p.L.data());
          for (auto& layer : p.mlp) {
            fill(layer.weight.data());
            fill(layer.bias);
          }
          std::vector<data::Entry> active(m);
          for (std::size_t i = 0; i < m; ++i)
            active[i] = {static_cast<std::uint32_t>(i), unit(rng)};

          const double naive = model::predict_naive(p, active, spec);
          double err = rel(model::predict(p, active, spec) + perturbation, naive);
          if (variant.kind == model::DistanceKind::Mahalanobis) {
            const double direct = model::second_order_mahalanobis_fast(
                active, p.V, model::psd_from_factor(p.L), p.h);
            err = std::max(err, rel(direct + perturbation, naive));
          }
          cell.max_rel_error = std::max(cell.max_rel_error, err);
        }
        cell.passed = cell.max_rel_error <= report.tolerance;
        report.passed = report.passed && cell.passed;
        report.cells.push_back(cell);
      }
    }
  }
  return report;
}

std::string GradcheckReport::to_text() const {
  std::ostringstream os;
  os << "distance\tweight\tlayers\tgroup\tmax_rel_error\tstatus\n";
  for (const auto& r : rows)
    os << model::to_string(r.spec.kind) << '\t' << (r.spec.use_weight ? "on" : "off") << '\t'
       << r.spec.layers << '\t' << model::to_string(r.group) << '\t' << std::scientific
       << std::setprecision(3) << r.max_rel_error << std::defaultfloat << '\t'
       << (r.max_rel_error <= tolerance ? "pass" : "FAIL") << '\n';
  os << "tolerance=" << tolerance << '\n';
  os << "result=" << (passed ? "pass" : "FAIL") << '\n';
  return os.str();
}

GradcheckReport cmd_gradcheck(const std::vector<model::DistanceKind>& kinds, std::uint64_t seed,
                              double step) {
  GradcheckReport report;
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(-0.8, 0.8);
  std::uniform_real_distribution<double> xdist(0.5, 1.5);
  constexpr std::size_t n = 8;
  constexpr std::size_t k = 4;
  constexpr std::size_t m = 4;

  for (const auto kind : kinds) {
    std::vector<int> depths{0};
    if (kind == model::DistanceKind::Dnn) depths = {1, 2, 3};
    if (kind == model::DistanceKind::Manhattan || kind == model::DistanceKind::Chebyshev ||
        kind == model::DistanceKind::Cosine)
      depths = {0, 1};
    for (int layers : depths) {
      for (bool weight : {true, false}) {
        const model::DistanceSpec spec{kind, weight, layers};
        auto params = model::ModelParams::zeros(n, k, spec);
        std::vector<double> theta(model::flat_layout(params).size);
        for (auto& x : theta) x = unit(rng);
        model::unflatten(theta, params);

        std::vector<std::uint32_t> idx(n);
        std::iota(idx.begin(), idx.end(), 0u);
        std::shuffle(idx.begin(), idx.end(), rng);
        idx.resize(m);
        std::sort(idx.begin(), idx.end());
        std::vector<data::Entry> active;
        for (auto i : idx) active.push_back({i, xdist(rng)});
        const double target = unit(rng);

        tape::Tape t;
        const auto yhat = model::record_prediction(t, params, active, spec);
        const auto loss = t.square(t.sub(yhat, t.constant(target)));
        const auto analytic = model::flatten_gradient(t.backward(loss), params);

        auto probe = params;
        const auto layout = model::flat_layout(params);
        for (const auto& range : layout.ranges) {
          if (range.begin == range.end) continue;
          std::vector<double> full = theta;
          auto f = [&](std::span<const double> sub) {
            std::copy(sub.begin(), sub.end(), full.begin() + static_cast<std::ptrdiff_t>(range.begin));
            model::unflatten(full, probe);
            return train::squared_loss(model::predict(probe, active, spec), target);
          };
          const std::span<const double> sub(theta.data() + range.begin, range.end - range.begin);
          const std::span<const double> grad(analytic.data() + range.begin, range.end - range.begin);
          const auto check = tape::finite_difference_check(f, sub, grad, step);
          report.rows.push_back({spec, range.group, check.max_rel_error});
          if (check.max_rel_error > report.tolerance) report.passed = false;
        }
      }
    }
  }
  return report;
}

void cmd_export_embeddings(const fs::path& model_file, const std::string& field, std::ostream& out) {
  const auto bundle = run_stage("model", [&] { return io::load_model(model_file); });
  const auto f = bundle.layout.field_index(field);
  if (!f) throw ConfigError("field", "unknown field '" + field + "'");
  const std::size_t k = bundle.params.k();
  out << bundle.metadata;
  out << "category";
  for (std::size_t j = 0; j < k; ++j) out << "\tv" << j;
  out << '\n';
  const std::size_t card = bundle.layout.cardinality(*f);
  for (std::size_t c = 0; c < card; ++c) {
    if (*f < bundle.vocab.num_fields())
      out << bundle.vocab.categories(*f)[c];
    else
      out << c;
    const auto row = bundle.params.V.row(bundle.layout.offset(*f) + c);
    for (double v : row) out << '\t' << format_double(v);
    out << '\n';
  }
}

}  // namespace gmlfm::cli
