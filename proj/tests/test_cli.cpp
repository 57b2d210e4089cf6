#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "convsst/cli.hpp"
#include "convsst/hsi_data.hpp"
#include "json.hpp"

using namespace convsst;
namespace fs = std::filesystem;

namespace {

struct Result {
  int code;
  std::string out, err;
};

Result run(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = run_cli(args, out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

class CliTest : public ::testing::Test {
 protected:
  void SetUp() override {
    const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
    root_ = fs::temp_directory_path() / (std::string("convsst_cli_") + info->name());
    fs::remove_all(root_);
    fs::create_directories(root_);
    data_ = (root_ / "data").string();
    ASSERT_EQ(run({"synth", "--hw", "12", "--bands", "12", "--classes", "3", "--seed", "3", "--out", data_}).code, 0);
  }
  void TearDown() override { fs::remove_all(root_); }

  std::vector<std::string> small_train(const std::string& out, const std::string& seed = "7") const {
    return {"train", "--data", data_, "--out", out, "--patch", "5", "--dim", "16", "--heads", "2",
            "--mlp-dim", "32", "--epochs", "2", "--batch", "16", "--train-per-class", "8", "--seed", seed,
            "--log-every", "0"};
  }

  fs::path root_;
  std::string data_;
};

}  // namespace

TEST_F(CliTest, SynthIsDeterministic) {
  const std::string other = (root_ / "again").string();
  ASSERT_EQ(run({"synth", "--hw", "12", "--bands", "12", "--classes", "3", "--seed", "3", "--out", other}).code, 0);
  for (const char* f : {"cube.f32", "labels.u16", "header.json"}) EXPECT_EQ(slurp(fs::path(data_) / f), slurp(fs::path(other) / f)) << f;
}

TEST_F(CliTest, TrainWritesArtifactsAndIsReproducible) {
  const std::string a = (root_ / "a").string(), b = (root_ / "b").string();
  const Result ra = run(small_train(a));
  ASSERT_EQ(ra.code, 0) << ra.err;
  ASSERT_EQ(run(small_train(b)).code, 0);
  EXPECT_EQ(slurp(fs::path(a) / "model.ckpt"), slurp(fs::path(b) / "model.ckpt"));
  EXPECT_EQ(slurp(fs::path(a) / "history.csv"), slurp(fs::path(b) / "history.csv"));

  const std::string history = slurp(fs::path(a) / "history.csv");
  EXPECT_EQ(history.rfind("epoch,loss,train_acc\n", 0), 0u);
  EXPECT_EQ(std::count(history.begin(), history.end(), '\n'), 3);

  const auto manifest = nlohmann::json::parse(slurp(fs::path(a) / "manifest.json"));
  EXPECT_EQ(manifest["seed"], 7);
  EXPECT_EQ(manifest["model"]["classes"], 3);
  EXPECT_EQ(manifest["split_counts"]["train"], (std::vector<int>{8, 8, 8}));
  const auto summary = nlohmann::json::parse(ra.out);
  EXPECT_EQ(summary["epochs"], 2);
  EXPECT_TRUE(summary.contains("test_oa"));

  ASSERT_EQ(run(small_train((root_ / "c").string(), "8")).code, 0);
  EXPECT_NE(slurp(fs::path(a) / "model.ckpt"), slurp(root_ / "c" / "model.ckpt"));
}

TEST_F(CliTest, ManifestRerunReproducesCheckpoint) {
  const std::string a = (root_ / "a").string(), b = (root_ / "b").string();
  ASSERT_EQ(run(small_train(a)).code, 0);
  const Result r = run({"train", "--manifest", (fs::path(a) / "manifest.json").string(), "--out", b, "--log-every", "0"});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(slurp(fs::path(a) / "model.ckpt"), slurp(fs::path(b) / "model.ckpt"));
}

TEST_F(CliTest, EvalIsDeterministic) {
  const std::string a = (root_ / "a").string();
  ASSERT_EQ(run(small_train(a)).code, 0);
  const std::string ckpt = (fs::path(a) / "model.ckpt").string();
  const Result e1 = run({"eval", "--ckpt", ckpt, "--data", data_});
  const Result e2 = run({"eval", "--ckpt", ckpt, "--data", data_});
  ASSERT_EQ(e1.code, 0) << e1.err;
  EXPECT_EQ(e1.out, e2.out);
  const auto j = nlohmann::json::parse(e1.out);
  for (const char* k : {"oa", "aa", "kappa", "per_class", "confusion"}) EXPECT_TRUE(j.contains(k)) << k;
  std::uint64_t total = 0;
  for (const auto& row : j["confusion"])
    for (const auto& v : row) total += v.get<std::uint64_t>();
  EXPECT_EQ(total, 144u - 24u);
  EXPECT_NE(e1.err.find("OA"), std::string::npos);

  const auto train = nlohmann::json::parse(run({"eval", "--ckpt", ckpt, "--data", data_, "--on", "train"}).out);
  total = 0;
  for (const auto& row : train["confusion"])
    for (const auto& v : row) total += v.get<std::uint64_t>();
  EXPECT_EQ(total, 24u);
}

TEST_F(CliTest, EvalRejectsClassMismatch) {
  const std::string a = (root_ / "a").string(), other = (root_ / "four").string();
  ASSERT_EQ(run(small_train(a)).code, 0);
  ASSERT_EQ(run({"synth", "--hw", "12", "--bands", "12", "--classes", "4", "--out", other}).code, 0);
  const Result r = run({"eval", "--ckpt", (fs::path(a) / "model.ckpt").string(), "--data", other});
  EXPECT_NE(r.code, 0);
  EXPECT_NE(r.err.find("class count mismatch"), std::string::npos) << r.err;
}

TEST_F(CliTest, MissingPathsFail) {
  EXPECT_NE(run({"train", "--data", (root_ / "nope").string(), "--out", (root_ / "o").string()}).code, 0);
  EXPECT_NE(run({"eval", "--ckpt", (root_ / "none.ckpt").string(), "--data", data_}).code, 0);
  EXPECT_NE(run({"bogus"}).code, 0);
  EXPECT_NE(run({}).code, 0);
  const Result both = run({"train", "--data", data_, "--out", (root_ / "o").string(), "--train-per-class", "3",
                           "--train-frac", "0.2"});
  EXPECT_NE(both.code, 0);
}

TEST_F(CliTest, MapLeavesUnlabeledPixelsBlack) {
  Dataset d = load_dataset(data_);
  d.labels.at(0, 0) = 0;
  d.labels.at(5, 7) = 0;
  save_dataset(d, data_);
  const std::string a = (root_ / "a").string();
  ASSERT_EQ(run(small_train(a)).code, 0);
  const std::string ppm = (root_ / "map.ppm").string();
  const Result r = run({"map", "--ckpt", (fs::path(a) / "model.ckpt").string(), "--data", data_, "--out", ppm});
  ASSERT_EQ(r.code, 0) << r.err;
  const std::string bytes = slurp(ppm);
  const std::string header = "P6\n12 12\n255\n";
  ASSERT_EQ(bytes.rfind(header, 0), 0u);
  ASSERT_EQ(bytes.size(), header.size() + 12 * 12 * 3);
  auto pixel = [&](std::size_t r, std::size_t c) { return bytes.substr(header.size() + (r * 12 + c) * 3, 3); };
  EXPECT_EQ(pixel(0, 0), std::string(3, '\0'));
  EXPECT_EQ(pixel(5, 7), std::string(3, '\0'));
  EXPECT_NE(pixel(11, 11), std::string(3, '\0'));

  ASSERT_EQ(run({"map", "--ckpt", (fs::path(a) / "model.ckpt").string(), "--data", data_, "--out", ppm, "--full"}).code, 0);
  EXPECT_NE(slurp(ppm).substr(header.size(), 3), std::string(3, '\0'));
}

TEST_F(CliTest, TruthMapUsesPalette) {
  const std::string ppm = (root_ / "truth.ppm").string();
  ASSERT_EQ(run({"map", "--truth", "--data", data_, "--out", ppm}).code, 0);
  const std::string bytes = slurp(ppm);
  const std::string header = "P6\n12 12\n255\n";
  // Pixel (0, 0) belongs to class 1, rendered as #e6194b.
  EXPECT_EQ(bytes.substr(header.size(), 3), std::string("\xe6\x19\x4b"));
  EXPECT_NE(run({"map", "--data", data_, "--out", ppm}).code, 0);
}

TEST_F(CliTest, GradcheckSingleFamily) {
  const Result r = run({"gradcheck", "--op", "softmax"});
  EXPECT_EQ(r.code, 0);
  EXPECT_EQ(r.out.rfind("PASS softmax", 0), 0u) << r.out;
  EXPECT_NE(run({"gradcheck", "--op", "nonsense"}).code, 0);
  EXPECT_EQ(run({"gradcheck", "--op", "gelu", "--tol", "0"}).code, 1);
}

TEST_F(CliTest, AblateProducesFourRows) {
  const std::string csv = (root_ / "ablate.csv").string();
  const Result r = run({"ablate", "--data", data_, "--patch", "5", "--dim", "16", "--heads", "2", "--mlp-dim", "32",
                        "--epochs", "1", "--batch", "32", "--train-per-class", "8", "--out", csv});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto rows = nlohmann::json::parse(r.out);
  ASSERT_EQ(rows.size(), 4u);
  std::set<std::pair<bool, std::string>> cells;
  for (const auto& row : rows) cells.insert({row["cgrm"].get<bool>(), row["head"].get<std::string>()});
  EXPECT_EQ(cells.size(), 4u);
  const std::string text = slurp(csv);
  EXPECT_EQ(std::count(text.begin(), text.end(), '\n'), 5);
}
