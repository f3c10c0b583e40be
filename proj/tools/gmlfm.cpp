#include <CLI11.hpp>

#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "gmlfm/experiment.hpp"
#include "gmlfm/model_io.hpp"
#include "gmlfm/synthetic.hpp"

namespace cli = gmlfm::cli;

namespace {

struct Overrides {
  std::map<std::string, std::string> values;

  void add(CLI::App* app, const std::string& key, const std::string& help) {
    app->add_option_function<std::string>(
        "--" + key, [this, key](const std::string& v) { values[key] = v; }, help);
  }
};

void add_config_overrides(CLI::App* app, Overrides& o) {
  o.add(app, "task", "rating or topn");
  o.add(app, "data-path", "interaction file");
  o.add(app, "data-format", "tabular or libfm");
  o.add(app, "fields", "comma-separated extra fields");
  o.add(app, "distance", "inner|euclidean|mahalanobis|dnn|manhattan|chebyshev|cosine");
  o.add(app, "use-weight", "true or false");
  o.add(app, "layers", "MLP depth");
  o.add(app, "embed-dim", "embedding size k");
  o.add(app, "lr", "learning rate");
  o.add(app, "batch-size", "mini-batch size");
  o.add(app, "epochs", "maximum epochs");
  o.add(app, "dropout", "dropout rate between MLP layers");
  o.add(app, "optimizer", "sgd or adam");
  o.add(app, "l2", "L2 penalty");
  o.add(app, "patience", "early-stopping patience");
  o.add(app, "seed", "random seed");
  o.add(app, "negatives", "sampled negatives per positive");
}

template <typename Fn>
int guarded(Fn&& fn) {
  try {
    return fn();
  } catch (const cli::ConfigError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return cli::kExitValidation;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << '\n';
    return cli::kExitValidation;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return cli::kExitRuntime;
  }
}

std::vector<gmlfm::model::DistanceKind> parse_kinds(const std::vector<std::string>& names) {
  std::vector<gmlfm::model::DistanceKind> kinds;
  for (const auto& n : names) {
    const auto k = gmlfm::model::parse_distance_kind(n);
    if (!k) throw cli::ConfigError("distance", "unknown distance kind '" + n + "'");
    kinds.push_back(*k);
  }
  if (kinds.empty()) kinds.assign(std::begin(gmlfm::model::kAllKinds), std::end(gmlfm::model::kAllKinds));
  return kinds;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Factorization machines with generalized metric learning"};
  app.set_version_flag("--version", std::string(cli::toolkit_version()));
  app.require_subcommand(1);

  auto* train = app.add_subcommand("train", "fit a model and evaluate it on the held-out split");
  std::string train_config;
  bool force = false;
  std::string output_dir;
  Overrides train_over;
  train->add_option("--config", train_config, "key=value configuration file");
  train->add_option("--output-dir", output_dir, "directory for model and reports");
  train->add_flag("--force", force, "overwrite existing results");
  add_config_overrides(train, train_over);

  auto* evaluate = app.add_subcommand("evaluate", "evaluate a saved model");
  std::string eval_model;
  std::string metrics_out;
  Overrides eval_over;
  evaluate->add_option("--model", eval_model, "model file")->required();
  evaluate->add_option("--metrics-out", metrics_out, "write metrics here");
  add_config_overrides(evaluate, eval_over);

  auto* recommend = app.add_subcommand("recommend", "rank items for a user");
  std::string rec_model;
  std::string rec_user;
  std::vector<std::string> rec_items;
  bool rec_all = false;
  std::size_t top_k = 10;
  recommend->add_option("--model", rec_model, "model file")->required();
  recommend->add_option("--user", rec_user, "user id")->required();
  recommend->add_option("--items", rec_items, "candidate items")->delimiter(',');
  recommend->add_flag("--all-items", rec_all, "rank every known item");
  recommend->add_option("--top-k", top_k, "number of items to print");

  auto* oracle = app.add_subcommand("oracle-check", "fast forms against the naive pairwise sum");
  std::vector<std::size_t> ks{4, 8, 16};
  std::vector<std::size_t> ms{2, 3, 4, 5, 6, 7, 8};
  std::size_t trials = 1000;
  std::uint64_t oracle_seed = 1;
  oracle->add_option("--k", ks, "embedding sizes")->delimiter(',');
  oracle->add_option("--m", ms, "active attribute counts")->delimiter(',');
  oracle->add_option("--trials", trials, "random draws per cell");
  oracle->add_option("--seed", oracle_seed, "random seed");

  auto* gradcheck = app.add_subcommand("gradcheck", "tape gradients against finite differences");
  std::vector<std::string> grad_kinds;
  std::uint64_t grad_seed = 1;
  double grad_step = 1e-5;
  gradcheck->add_option("--distance", grad_kinds, "distance kinds (default: all)")->delimiter(',');
  gradcheck->add_option("--seed", grad_seed, "random seed");
  gradcheck->add_option("--step", grad_step, "central-difference step");

  auto* exporter = app.add_subcommand("export-embeddings", "print the embedding table of a field");
  std::string exp_model;
  std::string exp_field;
  std::string exp_out;
  exporter->add_option("--model", exp_model, "model file")->required();
  exporter->add_option("--field", exp_field, "field name")->required();
  exporter->add_option("--out", exp_out, "output file (default stdout)");

  auto* synth = app.add_subcommand("synth", "write a synthetic implicit-feedback dataset");
  gmlfm::synthetic::Config syn;
  std::string syn_out;
  synth->add_option("--out", syn_out, "output file")->required();
  synth->add_option("--users", syn.users, "number of users");
  synth->add_option("--items", syn.items, "number of items");
  synth->add_option("--latent-dim", syn.latent_dim, "latent dimension");
  synth->add_option("--categories", syn.categories, "item categories");
  synth->add_option("--attributes", syn.attributes, "further item attributes");
  synth->add_option("--levels", syn.levels, "levels per attribute");
  synth->add_option("--min-per-user", syn.min_per_user, "fewest interactions per user");
  synth->add_option("--max-per-user", syn.max_per_user, "most interactions per user");
  synth->add_option("--temperature", syn.temperature, "softmax temperature");
  synth->add_option("--seed", syn.seed, "random seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? cli::kExitOk : cli::kExitValidation;
  }

  if (*train) {
    return guarded([&] {
      cli::ExperimentConfig config;
      if (!train_config.empty()) config.apply_file(train_config);
      for (const auto& [k, v] : train_over.values) config.set(k, v);
      if (!output_dir.empty()) config.output_dir = output_dir;
      if (force) config.force = true;
      const auto outcome = cli::cmd_train(config, std::cerr);
      std::cout << outcome.metrics.to_text();
      std::cerr << "model written to " << outcome.model_path.string() << '\n';
      return cli::kExitOk;
    });
  }
  if (*evaluate) {
    return guarded([&] {
      std::optional<std::filesystem::path> out;
      if (!metrics_out.empty()) out = metrics_out;
      const auto report = cli::cmd_evaluate(eval_model, eval_over.values, out);
      std::cout << report.to_text();
      return cli::kExitOk;
    });
  }
  if (*recommend) {
    return guarded([&] {
      if (rec_items.empty() && !rec_all)
        throw cli::ConfigError("items", "pass --items or --all-items");
      const auto recs = cli::cmd_recommend(rec_model, rec_user, rec_items, rec_all, top_k);
      std::cout << std::setprecision(17);
      for (std::size_t i = 0; i < recs.size(); ++i)
        std::cout << i + 1 << '\t' << recs[i].item << '\t' << recs[i].score << '\n';
      return cli::kExitOk;
    });
  }
  if (*oracle) {
    return guarded([&] {
      const auto report = cli::cmd_oracle_check(ks, ms, trials, oracle_seed);
      std::cout << report.to_text();
      return report.passed ? cli::kExitOk : cli::kExitCheckFailed;
    });
  }
  if (*gradcheck) {
    return guarded([&] {
      const auto report = cli::cmd_gradcheck(parse_kinds(grad_kinds), grad_seed, grad_step);
      std::cout << report.to_text();
      return report.passed ? cli::kExitOk : cli::kExitCheckFailed;
    });
  }
  if (*exporter) {
    return guarded([&] {
      if (exp_out.empty()) {
        cli::cmd_export_embeddings(exp_model, exp_field, std::cout);
      } else {
        std::ofstream out(exp_out);
        if (!out) throw std::runtime_error("cannot write " + exp_out);
        cli::cmd_export_embeddings(exp_model, exp_field, out);
      }
      return cli::kExitOk;
    });
  }
  if (*synth) {
    return guarded([&] {
      gmlfm::synthetic::write_tabular(std::filesystem::path(syn_out), syn);
      return cli::kExitOk;
    });
  }
  return cli::kExitValidation;
}
