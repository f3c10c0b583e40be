#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>

#include "gmlfm/experiment.hpp"
#include "gmlfm/model_io.hpp"
#include "gmlfm/synthetic.hpp"
#include "support.hpp"

using namespace gmlfm;
using namespace gmlfm::cli;
using gmlfm::testing::read_file;
using gmlfm::testing::TempDir;

namespace {

std::filesystem::path tiny_dataset(const TempDir& dir) {
  synthetic::Config syn;
  syn.users = 80;
  syn.items = 200;
  syn.temperature = 1.0;
  syn.latent_dim = 4;
  syn.categories = 4;
  syn.attributes = 2;
  syn.levels = 3;
  syn.min_per_user = 4;
  syn.max_per_user = 8;
  syn.seed = 3;
  const auto path = dir / "tiny.tsv";
  synthetic::write_tabular(path, syn);
  return path;
}

ExperimentConfig tiny_config(const std::filesystem::path& data, const std::filesystem::path& out) {
  ExperimentConfig c;
  c.set("data-path", data.string());
  c.set("epochs", "2");
  c.set("embed-dim", "4");
  c.set("batch-size", "64");
  c.set("lr", "0.01");
  c.set("seed", "5");
  c.output_dir = out.string();
  return c;
}

int run_cli(const std::string& args, const TempDir& dir) {
  const std::string cmd =
      std::string(GMLFM_CLI_PATH) + " " + args + " > " + (dir / "stdout.txt").string() + " 2> " +
      (dir / "stderr.txt").string();
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::vector<std::string> data_lines(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream in(text);
  for (std::string line; std::getline(in, line);)
    if (!line.empty() && line[0] != '#') out.push_back(line);
  return out;
}

class TrainedModel : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = new TempDir("cli");
    data_ = tiny_dataset(*dir_);
    std::ostringstream log;
    outcome_ = new TrainOutcome(cmd_train(tiny_config(data_, dir_->path() / "run"), log));
  }
  static void TearDownTestSuite() {
    delete outcome_;
    delete dir_;
  }

  static TempDir* dir_;
  static std::filesystem::path data_;
  static TrainOutcome* outcome_;
};

TempDir* TrainedModel::dir_ = nullptr;
std::filesystem::path TrainedModel::data_;
TrainOutcome* TrainedModel::outcome_ = nullptr;

TEST(ExperimentConfigTest, UnknownDistanceKind) {
  ExperimentConfig c;
  try {
    c.set("distance", "hamming");
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_EQ(e.key(), "distance");
    EXPECT_NE(std::string(e.what()).find("unknown distance kind"), std::string::npos);
  }
}

TEST(ExperimentConfigTest, RejectsUnknownKeysAndBadValues) {
  ExperimentConfig c;
  EXPECT_THROW(c.set("learning_rate", "0.1"), ConfigError);
  EXPECT_THROW(c.set("epochs", "ten"), ConfigError);
  EXPECT_THROW(c.set("use-weight", "maybe"), ConfigError);
  try {
    c.set("lr", "abc");
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_EQ(e.key(), "lr");
  }
}

TEST(ExperimentConfigTest, ValidationNamesKey) {
  ExperimentConfig c;
  try {
    c.validate();
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_EQ(e.key(), "data-path");
  }
  c.set("data-path", "x.tsv");
  c.set("distance", "mahalanobis");
  c.set("layers", "2");
  try {
    c.validate();
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_EQ(e.key(), "layers");
  }
  c.set("layers", "0");
  c.set("lr", "-1");
  try {
    c.validate();
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_EQ(e.key(), "lr");
  }
}

TEST(ExperimentConfigTest, LayersDefaultByKind) {
  ExperimentConfig c;
  EXPECT_EQ(c.resolved_layers(), 2);
  c.set("distance", "euclidean");
  EXPECT_EQ(c.resolved_layers(), 0);
  c.set("distance", "cosine");
  c.set("layers", "1");
  EXPECT_EQ(c.spec(), (model::DistanceSpec{model::DistanceKind::Cosine, true, 1}));
}

TEST(ExperimentConfigTest, FileWithCommentsAndEchoRoundTrip) {
  const TempDir dir("cfg");
  const auto path = dir.write("a.conf",
                              "# preset\n"
                              "distance = mahalanobis\n"
                              "use-weight=false\n"
                              "\n"
                              "embed-dim=16  # trailing\n"
                              "data-path=/tmp/x.tsv\n");
  const auto c = ExperimentConfig::from_file(path);
  EXPECT_EQ(c.distance, model::DistanceKind::Mahalanobis);
  EXPECT_FALSE(c.use_weight);
  EXPECT_EQ(c.hyper.embed_dim, 16u);

  ExperimentConfig d;
  for (const auto& [k, v] : c.echo()) d.set(k, v);
  EXPECT_EQ(d.echo(), c.echo());
}

TEST(ExperimentConfigTest, AblationPresetsValidate) {
  std::set<std::string> names;
  for (const auto& entry : std::filesystem::directory_iterator(GMLFM_PRESET_DIR)) {
    const auto c = ExperimentConfig::from_file(entry.path());
    EXPECT_NO_THROW(c.validate()) << entry.path();
    EXPECT_EQ(c.hyper.embed_dim, 16u);
    names.insert(entry.path().stem().string());
  }
  for (const char* expected : {"euclidean-unweighted", "euclidean-weighted", "mahalanobis-unweighted",
                               "mahalanobis-weighted", "dnn-1", "dnn-2", "dnn-3", "manhattan",
                               "chebyshev", "cosine"})
    EXPECT_TRUE(names.count(expected)) << expected;
}

TEST(ExperimentConfigTest, EchoOmitsOutputLocation) {
  ExperimentConfig c;
  c.output_dir = "/somewhere";
  c.force = true;
  for (const auto& [k, v] : c.echo()) {
    EXPECT_NE(k, "output-dir");
    EXPECT_NE(k, "force");
  }
}

TEST_F(TrainedModel, WritesOutputsThatParse) {
  const auto dir = dir_->path() / "run";
  for (const char* name : {"model.bin", "model.bin.meta", "history.tsv", "metrics.txt", "config.txt", "vocab.csv"})
    EXPECT_TRUE(std::filesystem::exists(dir / name)) << name;

  const auto metrics = eval::MetricsReport::parse(read_file(outcome_->metrics_path));
  EXPECT_EQ(metrics.task, eval::Task::TopN);
  EXPECT_EQ(metrics.k, 10u);
  EXPECT_GT(metrics.count, 0u);
  EXPECT_GE(metrics.hr, 0.0);
  EXPECT_LE(metrics.hr, 1.0);

  const auto bundle = io::load_model(outcome_->model_path);
  EXPECT_EQ(bundle.params.k(), 4u);
  EXPECT_EQ(bundle.spec, (model::DistanceSpec{model::DistanceKind::Dnn, true, 2}));

  const auto history = data_lines(read_file(outcome_->history_path));
  ASSERT_EQ(history.size(), 3u);
  EXPECT_EQ(history[0].rfind("epoch\t", 0), 0u);

  const auto config = ExperimentConfig::from_file(outcome_->config_path);
  EXPECT_EQ(config.hyper.epochs, 2);
  EXPECT_EQ(config.data_path, data_.string());
}

TEST_F(TrainedModel, EveryOutputCarriesVersionAndEcho) {
  const auto dir = dir_->path() / "run";
  const std::string version(toolkit_version());
  for (const char* name : {"model.bin.meta", "history.tsv", "config.txt", "vocab.csv", "metrics.txt"}) {
    const auto text = read_file(dir / name);
    EXPECT_NE(text.find(version), std::string::npos) << name;
    EXPECT_NE(text.find("distance=dnn"), std::string::npos) << name;
  }
  const auto bundle = io::load_model(outcome_->model_path);
  EXPECT_NE(bundle.metadata.find(version), std::string::npos);
  EXPECT_NE(bundle.metadata.find("embed-dim=4"), std::string::npos);
}

TEST_F(TrainedModel, RefusesToOverwriteWithoutForce) {
  auto config = tiny_config(data_, dir_->path() / "run");
  std::ostringstream log;
  try {
    cmd_train(config, log);
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_EQ(e.key(), "output-dir");
  }
}

TEST_F(TrainedModel, EvaluateReproducesTrainMetrics) {
  const auto report = cmd_evaluate(outcome_->model_path, {}, std::nullopt);
  EXPECT_EQ(report.to_text(), outcome_->metrics.to_text());
  EXPECT_EQ(report.to_text(), read_file(outcome_->metrics_path));
}

TEST_F(TrainedModel, EvaluateRejectsShapeMismatch) {
  try {
    cmd_evaluate(outcome_->model_path, {{"embed-dim", "8"}}, std::nullopt);
    FAIL();
  } catch (const std::exception& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("expected k=8"), std::string::npos) << msg;
    EXPECT_NE(msg.find("found k=4"), std::string::npos) << msg;
  }
}

TEST_F(TrainedModel, EvaluateRejectsCorruptedModel) {
  const TempDir scratch("corrupt");
  const auto copy = scratch / "model.bin";
  std::filesystem::copy_file(outcome_->model_path, copy);
  std::filesystem::copy_file(outcome_->model_path.string() + ".meta", copy.string() + ".meta");
  auto bytes = read_file(copy);
  bytes[bytes.size() / 2] ^= 0x01;
  std::ofstream(copy, std::ios::binary) << bytes;
  try {
    cmd_evaluate(copy, {}, std::nullopt);
    FAIL();
  } catch (const std::exception& e) {
    EXPECT_NE(std::string(e.what()).find("checksum mismatch"), std::string::npos) << e.what();
  }
}

TEST_F(TrainedModel, RecommendTopOneIsBestOfFullRanking) {
  const auto all = cmd_recommend(outcome_->model_path, "u0", {}, true, 1000);
  const auto one = cmd_recommend(outcome_->model_path, "u0", {}, true, 1);
  ASSERT_EQ(one.size(), 1u);
  EXPECT_EQ(one[0].item, all[0].item);
  EXPECT_EQ(one[0].score, all[0].score);
  for (std::size_t i = 1; i < all.size(); ++i) EXPECT_GE(all[i - 1].score, all[i].score);
}

TEST_F(TrainedModel, RecommendClampsToUniverse) {
  const std::vector<std::string> items{"i3", "i17", "not-an-item"};
  const auto recs = cmd_recommend(outcome_->model_path, "u0", items, false, 50);
  ASSERT_EQ(recs.size(), 3u);
  std::vector<std::string> names;
  for (const auto& r : recs) names.push_back(r.item);
  std::sort(names.begin(), names.end());
  EXPECT_EQ(names, (std::vector<std::string>{"i17", "i3", "not-an-item"}));
}

TEST_F(TrainedModel, RecommendForUnknownUser) {
  const auto recs = cmd_recommend(outcome_->model_path, "stranger", {}, true, 5);
  EXPECT_EQ(recs.size(), 5u);
  EXPECT_EQ(cmd_recommend(outcome_->model_path, "stranger", {}, true, 5)[0].item, recs[0].item);
}

TEST_F(TrainedModel, RecommendRejectsEmptyUniverseAndZeroK) {
  EXPECT_THROW(cmd_recommend(outcome_->model_path, "u0", {}, false, 5), ConfigError);
  EXPECT_THROW(cmd_recommend(outcome_->model_path, "u0", {"1"}, false, 0), ConfigError);
}

TEST_F(TrainedModel, ExportedRowsMatchStoredEmbeddings) {
  std::ostringstream out;
  cmd_export_embeddings(outcome_->model_path, "category", out);
  const auto lines = data_lines(out.str());
  const auto bundle = io::load_model(outcome_->model_path);
  const auto f = *bundle.layout.field_index("category");
  ASSERT_EQ(lines.size(), bundle.layout.cardinality(f) + 1);
  EXPECT_EQ(lines[0], "category\tv0\tv1\tv2\tv3");
  EXPECT_THROW(cmd_export_embeddings(outcome_->model_path, "colour", out), ConfigError);
}

TEST(CmdTrain, SameSeedGivesIdenticalFiles) {
  const TempDir dir("det");
  const auto data = tiny_dataset(dir);
  std::ostringstream log;
  const auto a = cmd_train(tiny_config(data, dir / "a"), log);
  const auto b = cmd_train(tiny_config(data, dir / "b"), log);
  EXPECT_EQ(read_file(a.metrics_path), read_file(b.metrics_path));
  EXPECT_EQ(read_file(a.model_path), read_file(b.model_path));
}

TEST(CmdTrain, ForceOverwrites) {
  const TempDir dir("force");
  const auto data = tiny_dataset(dir);
  std::ostringstream log;
  auto config = tiny_config(data, dir / "out");
  config.set("epochs", "1");
  cmd_train(config, log);
  config.force = true;
  EXPECT_NO_THROW(cmd_train(config, log));
}

TEST(CmdTrain, RatingTaskWritesRmse) {
  const TempDir dir("rating");
  const auto data = tiny_dataset(dir);
  std::ostringstream log;
  auto config = tiny_config(data, dir / "out");
  config.set("task", "rating");
  config.set("distance", "mahalanobis");
  const auto out = cmd_train(config, log);
  const auto m = eval::MetricsReport::parse(read_file(out.metrics_path));
  EXPECT_EQ(m.task, eval::Task::Rating);
  EXPECT_GT(m.rmse, 0.0);
  EXPECT_EQ(cmd_evaluate(out.model_path, {}, std::nullopt).to_text(), out.metrics.to_text());
}

TEST(CmdTrain, MissingDataFileNamesStage) {
  const TempDir dir("missing");
  std::ostringstream log;
  try {
    cmd_train(tiny_config(dir / "absent.tsv", dir / "out"), log);
    FAIL();
  } catch (const StageError& e) {
    EXPECT_EQ(e.stage(), "load");
  }
}

TEST(OracleCheck, SingleTrialReport) {
  const auto r = cmd_oracle_check({4}, {2, 3}, 1, 1);
  EXPECT_TRUE(r.passed);
  EXPECT_EQ(r.cells.size(), 2u * 4u);
  for (const auto& c : r.cells) {
    EXPECT_EQ(c.trials, 1u);
    EXPECT_LE(c.max_rel_error, 1e-10);
  }
}

TEST(OracleCheck, PerturbedFastPathFailsAndNamesCell) {
  const auto r = cmd_oracle_check({4, 8}, {2}, 5, 1, 1e-6);
  EXPECT_FALSE(r.passed);
  const auto failing = std::find_if(r.cells.begin(), r.cells.end(), [](const auto& c) { return !c.passed; });
  ASSERT_NE(failing, r.cells.end());
  const auto text = r.to_text();
  EXPECT_NE(text.find("FAIL"), std::string::npos);
  EXPECT_NE(text.find("result=FAIL"), std::string::npos);
}

TEST(Gradcheck, AllKindsPassWithPerGroupRows) {
  std::vector<model::DistanceKind> kinds(std::begin(model::kAllKinds), std::end(model::kAllKinds));
  const auto r = cmd_gradcheck(kinds, 1);
  EXPECT_TRUE(r.passed) << r.to_text();
  bool dnn3 = false, has_l = false, has_mlp_b = false;
  for (const auto& row : r.rows) {
    dnn3 |= row.spec.kind == model::DistanceKind::Dnn && row.spec.layers == 3;
    has_l |= row.group == model::ParamGroup::L;
    has_mlp_b |= row.group == model::ParamGroup::MlpB;
  }
  EXPECT_TRUE(dnn3);
  EXPECT_TRUE(has_l);
  EXPECT_TRUE(has_mlp_b);
}

TEST(Export, HundredItemsEightDimensions) {
  const TempDir dir("export");
  io::ModelBundle b;
  b.spec = {model::DistanceKind::Euclidean, true, 0};
  b.layout = data::FieldLayout({{"user", 2}, {"item", 100}}, true);
  b.vocab = data::Vocabulary(2);
  b.vocab.add(0, "u0");
  b.vocab.add(0, "u1");
  for (int i = 0; i < 100; ++i) b.vocab.add(1, "item" + std::to_string(i));
  b.metadata = "# gmlfm test\n";
  std::mt19937_64 rng(1);
  b.params = gmlfm::testing::random_params(b.layout.dimension(), 8, b.spec, rng);
  io::save_model(dir / "m.bin", b);

  std::ostringstream out;
  cmd_export_embeddings(dir / "m.bin", "item", out);
  const auto lines = data_lines(out.str());
  ASSERT_EQ(lines.size(), 101u);
  EXPECT_EQ(lines[0], "category\tv0\tv1\tv2\tv3\tv4\tv5\tv6\tv7");
  for (std::size_t r = 1; r < lines.size(); ++r) {
    std::vector<std::string> cols;
    std::istringstream row(lines[r]);
    for (std::string c; std::getline(row, c, '\t');) cols.push_back(c);
    ASSERT_EQ(cols.size(), 9u);
    EXPECT_EQ(cols[0], "item" + std::to_string(r - 1));
    const auto stored = b.params.V.row(b.layout.offset(1) + r - 1);
    for (std::size_t j = 0; j < 8; ++j) EXPECT_EQ(std::strtod(cols[j + 1].c_str(), nullptr), stored[j]);
  }
}

TEST(Binary, ExitCodes) {
  const TempDir dir("bin");
  EXPECT_EQ(run_cli("--version", dir), 0);
  EXPECT_EQ(run_cli("train --data-path x.tsv --distance hamming --output-dir " + (dir / "o").string(), dir), 1);
  EXPECT_NE(read_file(dir / "stderr.txt").find("unknown distance kind"), std::string::npos);
  EXPECT_EQ(run_cli("train --data-path " + (dir / "absent.tsv").string() + " --output-dir " +
                        (dir / "o").string(),
                    dir),
            2);
  EXPECT_NE(read_file(dir / "stderr.txt").find("load"), std::string::npos);
  EXPECT_EQ(run_cli("oracle-check --k 4 --m 2,3 --trials 2", dir), 0);
  EXPECT_NE(read_file(dir / "stdout.txt").find("result=pass"), std::string::npos);
  EXPECT_EQ(run_cli("gradcheck --distance dnn,cosine", dir), 0);
  EXPECT_EQ(run_cli("frobnicate", dir), 1);
}

TEST(Binary, SynthThenTrainThenRecommend) {
  const TempDir dir("flow");
  const auto data = (dir / "d.tsv").string();
  ASSERT_EQ(run_cli("synth --out " + data + " --users 60 --items 200 --temperature 1 --seed 2", dir), 0);
  const auto out = (dir / "run").string();
  ASSERT_EQ(run_cli("train --data-path " + data + " --epochs 1 --embed-dim 4 --output-dir " + out, dir), 0);
  EXPECT_EQ(eval::MetricsReport::parse(read_file(dir / "stdout.txt")).task, eval::Task::TopN);
  ASSERT_EQ(run_cli("recommend --model " + out + "/model.bin --user u1 --all-items --top-k 3", dir), 0);
  EXPECT_EQ(data_lines(read_file(dir / "stdout.txt")).size(), 3u);
  EXPECT_EQ(run_cli("evaluate --model " + out + "/model.bin --metrics-out " + (dir / "m.txt").string(), dir), 0);
  EXPECT_EQ(read_file(dir / "m.txt"), read_file(std::filesystem::path(out) / "metrics.txt"));
}

}  // namespace
