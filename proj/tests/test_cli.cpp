#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <regex>
#include <sstream>

#include "gbnet/cli.hpp"

using namespace gbnet;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  int code;
  std::string log, err;
};

Outcome gbnet_run(std::vector<std::string> args) {
  args.insert(args.begin(), "gbnet");
  std::vector<const char*> argv;
  for (const std::string& a : args) argv.push_back(a.c_str());
  std::ostringstream log, err;
  const int code = cli::run(static_cast<int>(argv.size()), argv.data(), log, err);
  return {code, log.str(), err.str()};
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

void write_file(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  out << text;
}

std::vector<std::string> lines_of(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream in(text);
  std::string l;
  while (std::getline(in, l)) out.push_back(l);
  return out;
}

const std::vector<std::string> kModel{"--dim", "8", "--hidden", "16", "--steps", "2", "--k-bridge", "3"};

std::vector<std::string> with_model(std::vector<std::string> args) {
  args.insert(args.end(), kModel.begin(), kModel.end());
  return args;
}

// One synthesized world with three entities per scene and a short training run.
class CliWorld : public ::testing::Test {
 protected:
  static fs::path dir;

  static void SetUpTestSuite() {
    dir = fs::temp_directory_path() / "gbnet_cli_world";
    fs::remove_all(dir);
    const Outcome s = gbnet_run({"synth", "--seed", "4", "--entity-classes", "4", "--predicate-classes", "3",
                                 "--feat-dim", "6", "--train", "20", "--test", "5", "--min-entities", "3",
                                 "--max-entities", "3", "-o", dir.string()});
    ASSERT_EQ(s.code, 0) << s.err;
    const Outcome t = gbnet_run(with_model({"train", "--data", path("train.gbds"), "--kg", path("kg.gbkg"), "-o",
                                            path("model.ckpt"), "--max-steps", "5", "--batch", "4"}));
    ASSERT_EQ(t.code, 0) << t.err;
  }

  static std::string path(const std::string& name) { return (dir / name).string(); }
};

fs::path CliWorld::dir;

}  // namespace

TEST(CliCompile, PrintsSummary) {
  const fs::path d = fs::temp_directory_path() / "gbnet_cli_compile";
  fs::create_directories(d);
  std::string ents, preds, emb;
  for (int i = 0; i < 150; ++i) {
    ents += "c" + std::to_string(i) + "\n";
    emb += "c" + std::to_string(i) + "\t1,0\n";
  }
  for (int i = 0; i < 50; ++i) {
    preds += "p" + std::to_string(i) + "\n";
    emb += "p" + std::to_string(i) + "\t0,1\n";
  }
  write_file(d / "e.txt", ents);
  write_file(d / "p.txt", preds);
  write_file(d / "emb.tsv", emb);
  const Outcome r = gbnet_run({"compile", "--entities", (d / "e.txt").string(), "--predicates",
                               (d / "p.txt").string(), "--embeddings", (d / "emb.tsv").string(), "-o",
                               (d / "kg.gbkg").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.log.find("151 CE, 51 CP"), std::string::npos) << r.log;
  EXPECT_TRUE(fs::exists(d / "kg.gbkg"));
}

TEST(CliCompile, MissingEmbeddingNamesTheLabel) {
  const fs::path d = fs::temp_directory_path() / "gbnet_cli_missing";
  fs::create_directories(d);
  write_file(d / "e.txt", "cat\ndog\n");
  write_file(d / "p.txt", "on\n");
  write_file(d / "emb.tsv", "cat\t1,0\non\t0,1\n");
  const Outcome r = gbnet_run({"compile", "--entities", (d / "e.txt").string(), "--predicates",
                               (d / "p.txt").string(), "--embeddings", (d / "emb.tsv").string(), "-o",
                               (d / "kg.gbkg").string()});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("'dog'"), std::string::npos) << r.err;
}

TEST(CliUsage, UnknownFlagIsUsageError) {
  const Outcome r = gbnet_run({"synth", "--bogus", "1", "-o", "x"});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("--bogus"), std::string::npos) << r.err;
  EXPECT_EQ(gbnet_run({}).code, 2);
  EXPECT_EQ(gbnet_run({"frobnicate"}).code, 2);
}

TEST(CliUsage, HelpSucceeds) {
  const Outcome r = gbnet_run({"--help"});
  EXPECT_EQ(r.code, 0);
  EXPECT_NE(r.log.find("compile"), std::string::npos);
}

TEST_F(CliWorld, SynthWritesAllFiles) {
  for (const char* f : {"world.gbw", "train.gbds", "test.gbds", "entities.txt", "predicates.txt", "ontology.tsv",
                        "counts.tsv", "embeddings.tsv", "kg.gbkg", "synth.config.toml"}) {
    EXPECT_TRUE(fs::exists(dir / f)) << f;
  }
  EXPECT_TRUE(fs::exists(dir / "model.loss.tsv"));
  EXPECT_TRUE(fs::exists(dir / "model.config.toml"));
}

TEST_F(CliWorld, SynthIsIdempotent) {
  const fs::path other = fs::temp_directory_path() / "gbnet_cli_world2";
  fs::remove_all(other);
  const Outcome s = gbnet_run({"synth", "--seed", "4", "--entity-classes", "4", "--predicate-classes", "3",
                               "--feat-dim", "6", "--train", "20", "--test", "5", "--min-entities", "3",
                               "--max-entities", "3", "-o", other.string()});
  ASSERT_EQ(s.code, 0) << s.err;
  for (const char* f : {"world.gbw", "train.gbds", "test.gbds", "counts.tsv", "kg.gbkg"}) {
    EXPECT_EQ(read_file(dir / f), read_file(other / f)) << f;
  }
}

TEST_F(CliWorld, CompileReproducesSynthGraph) {
  const Outcome r = gbnet_run({"compile", "--entities", path("entities.txt"), "--predicates", path("predicates.txt"),
                               "--ontology", path("ontology.tsv"), "--counts", path("counts.tsv"), "--embeddings",
                               path("embeddings.tsv"), "-o", path("compiled.gbkg")});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.log.find("5 CE, 4 CP"), std::string::npos) << r.log;
  EXPECT_EQ(read_file(dir / "compiled.gbkg"), read_file(dir / "kg.gbkg"));
}

TEST_F(CliWorld, EvalWritesEightPredClsLines) {
  const Outcome r = gbnet_run(with_model({"eval", "--data", path("test.gbds"), "--kg", path("kg.gbkg"),
                                          "--checkpoint", path("model.ckpt"), "--task", "predcls", "--k", "50,100",
                                          "--constrained", "both", "-o", path("metrics.tsv")}));
  ASSERT_EQ(r.code, 0) << r.err;
  const auto rows = lines_of(read_file(dir / "metrics.tsv"));
  ASSERT_EQ(rows.size(), 9u);
  EXPECT_EQ(rows[0], "task\tmetric\tK\tconstrained\tvalue");
  for (std::size_t i = 1; i < rows.size(); ++i) EXPECT_EQ(rows[i].rfind("predcls\t", 0), 0u) << rows[i];
  EXPECT_EQ(lines_of(r.log).size(), 8u);
}

TEST_F(CliWorld, ConfigFileSuppliesOptions) {
  write_file(dir / "eval.toml",
             "dim = 8\nhidden = 16\nsteps = 2\nk-bridge = 3\ntask = \"sgcls\"\nk = [20]\nconstrained = \"yes\"\n");
  const Outcome r = gbnet_run({"eval", "--config", path("eval.toml"), "--data", path("test.gbds"), "--kg",
                               path("kg.gbkg"), "--checkpoint", path("model.ckpt"), "-o", path("cfg.tsv")});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto rows = lines_of(read_file(dir / "cfg.tsv"));
  ASSERT_EQ(rows.size(), 3u);
  EXPECT_EQ(rows[1].rfind("sgcls\tR\t20\tyes\t", 0), 0u) << rows[1];
  // the command line wins over the file
  const Outcome o = gbnet_run({"eval", "--config", path("eval.toml"), "--task", "predcls", "--data",
                               path("test.gbds"), "--kg", path("kg.gbkg"), "--checkpoint", path("model.ckpt"), "-o",
                               path("cfg2.tsv")});
  ASSERT_EQ(o.code, 0) << o.err;
  EXPECT_EQ(lines_of(read_file(dir / "cfg2.tsv"))[1].rfind("predcls\t", 0), 0u);
}

TEST_F(CliWorld, ZeroLearningRateKeepsInitialization) {
  const Outcome r = gbnet_run(with_model({"train", "--data", path("train.gbds"), "--kg", path("kg.gbkg"), "-o",
                                          path("lr0.ckpt"), "--max-steps", "3", "--batch", "4", "--lr", "0",
                                          "--seed", "11"}));
  ASSERT_EQ(r.code, 0) << r.err;
  const Dataset ds = load_dataset(path("train.gbds"));
  const CommonsenseGraph kg = load_commonsense_graph(path("kg.gbkg"));
  cli::ModelFlags flags;
  flags.dim = 8;
  flags.hidden = 16;
  flags.steps = 2;
  flags.k_bridge = 3;
  const ModelParams init = ModelParams::initialize(configure_model(flags.config(), ds, kg), 11);
  ModelParams back = ModelParams::initialize(init.config, 0);
  load_checkpoint(path("lr0.ckpt"), back);
  for (std::size_t i = 0; i < init.tensors.size(); ++i) {
    EXPECT_EQ(back.tensors[i].value, init.tensors[i].value.cast<float>().cast<double>()) << init.tensors[i].name;
  }
  EXPECT_EQ(lines_of(read_file(dir / "lr0.loss.tsv")).size(), 4u);
}

TEST_F(CliWorld, InferDotHasThreeEntities) {
  const Outcome r = gbnet_run(with_model({"infer", "--data", path("test.gbds"), "--kg", path("kg.gbkg"),
                                          "--checkpoint", path("model.ckpt"), "--image", "20", "--k", "50", "-o",
                                          path("dump.tsv"), "--dot", path("scene.dot")}));
  ASSERT_EQ(r.code, 0) << r.err;
  const std::string dot = read_file(dir / "scene.dot");
  const std::regex node(R"(^  e\d+ \[)"), edge(R"(^  e\d+ -> e\d+ )");
  std::size_t nodes = 0, edges = 0;
  for (const std::string& l : lines_of(dot)) {
    nodes += std::regex_search(l, node) ? 1 : 0;
    edges += std::regex_search(l, edge) ? 1 : 0;
  }
  EXPECT_EQ(nodes, 3u);
  EXPECT_LE(edges, 6u);
  EXPECT_EQ(lines_of(read_file(dir / "dump.tsv")).size(), edges + 1);
}

TEST_F(CliWorld, InferIsIdempotent) {
  const auto args = [&](const std::string& out) {
    return with_model({"infer", "--data", path("test.gbds"), "--kg", path("kg.gbkg"), "--checkpoint",
                       path("model.ckpt"), "-o", path(out)});
  };
  ASSERT_EQ(gbnet_run(args("a.tsv")).code, 0);
  ASSERT_EQ(gbnet_run(args("b.tsv")).code, 0);
  EXPECT_EQ(read_file(dir / "a.tsv"), read_file(dir / "b.tsv"));
}

TEST_F(CliWorld, ShapeMismatchIsDataError) {
  const Outcome r = gbnet_run({"eval", "--data", path("test.gbds"), "--kg", path("kg.gbkg"), "--checkpoint",
                               path("model.ckpt"), "--dim", "12", "--hidden", "16", "--steps", "2", "-o",
                               path("bad.tsv")});
  EXPECT_EQ(r.code, 3);
  EXPECT_FALSE(r.err.empty());
}

TEST_F(CliWorld, UnknownImageIsDataError) {
  const Outcome r = gbnet_run(with_model({"infer", "--data", path("test.gbds"), "--kg", path("kg.gbkg"),
                                          "--checkpoint", path("model.ckpt"), "--image", "9999", "-o",
                                          path("none.tsv")}));
  EXPECT_EQ(r.code, 3);
}

TEST_F(CliWorld, BadOptionValuesAreUsageErrors) {
  EXPECT_EQ(gbnet_run(with_model({"eval", "--data", path("test.gbds"), "--kg", path("kg.gbkg"), "--checkpoint",
                                  path("model.ckpt"), "--task", "nope", "-o", path("x.tsv")}))
                .code,
            2);
  EXPECT_EQ(gbnet_run(with_model({"train", "--data", path("train.gbds"), "--kg", path("kg.gbkg"), "-o",
                                  path("x.ckpt"), "--mode", "sggen"}))
                .code,
            2);
  EXPECT_EQ(gbnet_run({"train", "--data", path("nonexistent.gbds"), "--kg", path("kg.gbkg"), "-o", path("x.ckpt")})
                .code,
            2);
}
