#pragma once

// The `gbnet` command line: compile, synth, train, eval, infer.
// Every option may also come from a `--config` file of `key = value` lines;
// flags given on the command line win.

#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "gbnet/checkpoint.hpp"
#include "gbnet/commonsense.hpp"
#include "gbnet/dataset.hpp"
#include "gbnet/errors.hpp"
#include "gbnet/evaluator.hpp"
#include "gbnet/model.hpp"
#include "gbnet/pipeline.hpp"
#include "gbnet/scene.hpp"
#include "gbnet/synth.hpp"
#include "gbnet/text.hpp"
#include "gbnet/trainer.hpp"

namespace gbnet::cli {

enum ExitCode : int { kOk = 0, kUsage = 2, kData = 3, kNumeric = 4 };

inline std::uint64_t default_seed() {
  if (const char* s = std::getenv("GBNET_SEED")) {
    try {
      return text::parse_int<std::uint64_t>(s, 0);
    } catch (const ParseError&) {
      throw ConfigError("GBNET_SEED is not an unsigned integer: '" + std::string(s) + "'");
    }
  }
  return 1;
}

struct ModelFlags {
  Index dim = 32;
  Index hidden = 64;
  int steps = 3;
  Index k_bridge = 5;

  void attach(CLI::App& app) {
    app.add_option("--dim", dim, "node state width d")->capture_default_str();
    app.add_option("--hidden", hidden, "hidden width of the MLP heads")->capture_default_str();
    app.add_option("--steps", steps, "message-passing steps T")->capture_default_str();
    app.add_option("--k-bridge", k_bridge, "bridges kept per scene node")->capture_default_str();
  }

  ModelConfig config() const {
    ModelConfig c;
    c.state_dim = dim;
    c.hidden_dim = hidden;
    c.steps = steps;
    c.k_bridge = k_bridge;
    return c;
  }
};

struct CompileArgs {
  std::string entities, predicates, ontology, counts, embeddings, out;
};

struct SynthArgs {
  std::uint64_t seed = 1;
  int entity_classes = 8;
  int predicate_classes = 6;
  Index feat_dim = 16;
  double sigma = 0.1;
  double zipf = 1.0;
  int train = 500;
  int test = 100;
  int min_entities = 3;
  int max_entities = 5;
  WorldOptions world;
  std::string out_dir;
};

struct TrainArgs {
  std::string data, kg, out, log, init;
  ModelFlags model;
  AdamConfig adam;
  int epochs = 1000;
  int max_steps = 2000;
  int batch = 8;
  std::uint64_t seed = 1;
  double balance_beta = 0.0;
  std::string mode = "sgcls";
  int threads = 1;
};

struct EvalArgs {
  std::string data, kg, checkpoint, out;
  ModelFlags model;
  std::string task = "all";
  std::vector<Index> ks{20, 50, 100};
  std::string constrained = "both";
};

struct InferArgs {
  std::string data, kg, checkpoint, out, dot;
  ModelFlags model;
  std::string task = "sgcls";
  Index k = 50;
  std::string constrained = "yes";
  std::vector<std::int64_t> images;
};

inline std::vector<std::string> read_label_list(const std::string& path) {
  auto in = text::open_input(path);
  std::vector<std::string> out;
  std::string raw;
  while (std::getline(in, raw)) {
    const std::string_view s = text::trim(raw);
    if (s.empty() || s.front() == '#') continue;
    out.emplace_back(s);
  }
  return out;
}

inline void write_label_list(const std::string& path, const std::vector<std::string>& labels) {
  auto out = text::open_output(path);
  for (const std::string& l : labels) out << l << '\n';
}

inline std::vector<Task> parse_tasks(const std::string& s) {
  if (s == "all") return {Task::SGGen, Task::SGCls, Task::PredCls};
  std::vector<Task> out;
  for (auto part : text::split(s, ',')) {
    auto t = parse_task(text::trim(part));
    if (!t) throw ConfigError("unknown task '" + std::string(part) + "' (sggen, sgcls, predcls, all)");
    out.push_back(*t);
  }
  return out;
}

inline std::vector<bool> parse_constrained(const std::string& s) {
  if (s == "yes") return {true};
  if (s == "no") return {false};
  if (s == "both") return {true, false};
  throw ConfigError("--constrained must be yes, no or both");
}

// Loads parameters shaped by the model flags, the dataset and the graph.
inline ModelParams load_model(const std::string& checkpoint, const ModelFlags& flags, const Dataset& ds,
                              const CommonsenseGraph& kg) {
  ModelParams p = ModelParams::initialize(configure_model(flags.config(), ds, kg), 0);
  load_checkpoint(checkpoint, p);
  return p;
}

inline std::string sibling(const std::string& path, const std::string& suffix) {
  const std::filesystem::path p(path);
  return (p.parent_path() / (p.stem().string() + suffix)).string();
}

inline void write_resolved_config(const CLI::App& sub, const std::string& path) {
  auto out = text::open_output(path);
  out << "# resolved " << sub.get_name() << " configuration\n" << sub.config_to_str(true, false);
}

inline void cmd_compile(const CompileArgs& a, std::ostream& log) {
  const auto entities = read_label_list(a.entities);
  const auto predicates = read_label_list(a.predicates);
  const auto ontology = a.ontology.empty() ? std::vector<OntologyEdgeRecord>{} : load_ontology_edges(a.ontology);
  const auto conditionals =
      a.counts.empty() ? std::vector<ConditionalEdge>{} : compile_conditional_edges(load_triplet_counts(a.counts));
  const CommonsenseGraph kg = assemble(entities, predicates, ontology, conditionals, load_embeddings(a.embeddings));
  save_commonsense_graph(a.out, kg);
  std::size_t onto = 0, cond = 0;
  for (const Edge& e : kg.graph.edges()) {
    const std::string& name = kg.graph.type_of(e).name;
    (is_ontology_relation(name) ? onto : cond) += 1;
  }
  log << kg.entity_count() << " CE, " << kg.predicate_count() << " CP\n"
      << "ontology edges: " << onto << "\nconditional edges: " << cond << "\n";
}

inline void cmd_synth(const SynthArgs& a, std::ostream& log) {
  namespace fs = std::filesystem;
  fs::create_directories(a.out_dir);
  const fs::path dir(a.out_dir);
  const ToyWorld w = generate_world(a.seed, a.entity_classes, a.predicate_classes, a.feat_dim, a.sigma, a.zipf, a.world);
  const Dataset train = generate_dataset(w, a.train, a.seed, a.min_entities, a.max_entities, 0);
  const Dataset test = generate_dataset(w, a.test, a.seed, a.min_entities, a.max_entities, a.train);
  save_world((dir / "world.gbw").string(), w);
  save_dataset((dir / "train.gbds").string(), train);
  save_dataset((dir / "test.gbds").string(), test);
  write_label_list((dir / "entities.txt").string(), w.entity_labels);
  write_label_list((dir / "predicates.txt").string(), w.predicate_labels);
  {
    auto out = text::open_output((dir / "ontology.tsv").string());
    for (const OntologyEdgeRecord& e : w.ontology) {
      out << e.src_label << '\t' << e.relation << '\t' << e.dst_label << '\t' << text::format_double(e.weight) << '\n';
    }
  }
  {
    auto out = text::open_output((dir / "counts.tsv").string());
    write_triplet_counts(out, count_triplets(train));
  }
  {
    auto out = text::open_output((dir / "embeddings.tsv").string());
    write_embeddings(out, w.embeddings);
  }
  save_commonsense_graph((dir / "kg.gbkg").string(), compile_world_graph(w, train));
  log << "wrote " << train.records.size() << " train and " << test.records.size() << " test scenes to " << a.out_dir
      << "\n";
}

inline void cmd_train(const TrainArgs& a, std::ostream& log) {
  const Dataset ds = load_dataset(a.data);
  const CommonsenseGraph kg = load_commonsense_graph(a.kg);
  TrainConfig cfg;
  cfg.model = a.model.config();
  cfg.adam = a.adam;
  cfg.epochs = a.epochs;
  cfg.max_steps = a.max_steps;
  cfg.batch_size = a.batch;
  cfg.seed = a.seed;
  cfg.balance_beta = a.balance_beta;
  cfg.threads = a.threads;
  const auto mode = parse_task(a.mode);
  if (!mode || *mode == Task::SGGen) throw ConfigError("--mode must be sgcls or predcls");
  cfg.mode = *mode;
  std::optional<TrainResult> resume;
  if (!a.init.empty()) {
    resume.emplace();
    resume->params = ModelParams::initialize(configure_model(cfg.model, ds, kg), cfg.seed);
    resume->adam = AdamState::for_params(resume->params.tensors, cfg.adam);
    load_checkpoint(a.init, resume->params, &resume->adam);
  }
  const TrainResult r = train(ds, kg, cfg, resume ? &*resume : nullptr, [&log](const TrainLogEntry& e) {
    log << "step " << e.step << " loss " << text::format_double(e.loss) << "\n";
  });
  save_checkpoint(a.out, r.params, &r.adam);
  auto out = text::open_output(a.log.empty() ? sibling(a.out, ".loss.tsv") : a.log);
  out << "step\tloss\tlr\n";
  for (const TrainLogEntry& e : r.log) {
    out << e.step << '\t' << text::format_double(e.loss) << '\t' << text::format_double(cfg.adam.lr) << '\n';
  }
}

inline void cmd_eval(const EvalArgs& a, std::ostream& log) {
  const Dataset ds = load_dataset(a.data);
  const CommonsenseGraph kg = load_commonsense_graph(a.kg);
  EvalOptions opt;
  opt.tasks = parse_tasks(a.task);
  opt.ks = a.ks;
  opt.constrained = parse_constrained(a.constrained);
  for (Index k : opt.ks) {
    if (k <= 0) throw ConfigError("K must be positive");
  }
  const ModelParams params = load_model(a.checkpoint, a.model, ds, kg);
  const MetricReport report = evaluate_dataset(ds, kg, params, opt);
  write_metrics_table(log, report);
  auto out = text::open_output(a.out);
  write_metrics_tsv(out, report);
}

inline void cmd_infer(const InferArgs& a, std::ostream& log) {
  const Dataset ds = load_dataset(a.data);
  const CommonsenseGraph kg = load_commonsense_graph(a.kg);
  const auto task = parse_task(a.task);
  if (!task) throw ConfigError("unknown task '" + a.task + "'");
  const auto constrained = parse_constrained(a.constrained);
  if (constrained.size() != 1) throw ConfigError("infer takes --constrained yes or no");
  if (a.k <= 0) throw ConfigError("K must be positive");
  const ModelParams params = load_model(a.checkpoint, a.model, ds, kg);
  const LabelMap labels = map_labels(ds, kg);
  auto out = text::open_output(a.out);
  out << "image\tsubject\tsubject_class\tpredicate\tobject\tobject_class\tconfidence\n";
  std::optional<std::ofstream> dot;
  if (!a.dot.empty()) dot.emplace(text::open_output(a.dot));
  std::size_t done = 0;
  for (const SceneRecord& r : ds.records) {
    if (!a.images.empty() && std::find(a.images.begin(), a.images.end(), r.image_id) == a.images.end()) continue;
    const SceneResult res = infer_scene(r, labels, kg, params, *task);
    const auto triplets = extract_topk(res.output.bridges, res.boxes, a.k, constrained.front(), labels.background_predicate);
    for (const ScoredTriplet& t : triplets) {
      out << r.image_id << '\t' << t.subject << '\t' << kg.label(NodeKind::CE, t.subject_class) << '\t'
          << kg.label(NodeKind::CP, t.predicate) << '\t' << t.object << '\t' << kg.label(NodeKind::CE, t.object_class)
          << '\t' << text::format_double(t.confidence) << '\n';
    }
    if (dot) write_scene_dot(*dot, res, kg, triplets);
    ++done;
  }
  if (!a.images.empty() && done != a.images.size()) throw InputError("some requested image ids are not in the dataset");
  log << "inferred " << done << " scenes\n";
}

// Reads `key = value` files; keys outside any section belong to `section`.
class SubcommandConfig : public CLI::ConfigTOML {
 public:
  explicit SubcommandConfig(std::string section) : section_(std::move(section)) {}

  std::vector<CLI::ConfigItem> from_config(std::istream& in) const override {
    std::vector<CLI::ConfigItem> items = CLI::ConfigTOML::from_config(in);
    for (CLI::ConfigItem& item : items) {
      if (item.parents.empty() && !section_.empty()) item.parents = {section_};
    }
    return items;
  }

 private:
  std::string section_;
};

// Parses and runs one command line. Diagnostics go to `err`, progress to `log`.
inline int run(int argc, const char* const* argv, std::ostream& log = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Scene-graph generation by bridging a scene graph to a commonsense graph", "gbnet"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all");
  app.fallthrough();
  app.set_config("--config", "", "read options from a `key = value` file");
  app.config_formatter(std::make_shared<SubcommandConfig>(argc > 1 ? argv[1] : ""));

  CompileArgs ca;
  auto* compile = app.add_subcommand("compile", "build a commonsense graph file from TSV inputs");
  compile->add_option("--entities", ca.entities, "entity label list, one per line")->required()->check(CLI::ExistingFile);
  compile->add_option("--predicates", ca.predicates, "predicate label list")->required()->check(CLI::ExistingFile);
  compile->add_option("--ontology", ca.ontology, "ontology edges TSV")->check(CLI::ExistingFile);
  compile->add_option("--counts", ca.counts, "triplet counts TSV")->check(CLI::ExistingFile);
  compile->add_option("--embeddings", ca.embeddings, "label embeddings TSV")->required()->check(CLI::ExistingFile);
  compile->add_option("-o,--out", ca.out, "output graph file")->required();

  SynthArgs sa;
  sa.seed = default_seed();
  auto* synth = app.add_subcommand("synth", "generate a toy world and train/test scenes");
  synth->add_option("--seed", sa.seed)->capture_default_str();
  synth->add_option("--entity-classes", sa.entity_classes)->capture_default_str()->check(CLI::PositiveNumber);
  synth->add_option("--predicate-classes", sa.predicate_classes)->capture_default_str()->check(CLI::PositiveNumber);
  synth->add_option("--feat-dim", sa.feat_dim)->capture_default_str()->check(CLI::PositiveNumber);
  synth->add_option("--sigma", sa.sigma, "feature noise")->capture_default_str()->check(CLI::NonNegativeNumber);
  synth->add_option("--zipf", sa.zipf, "predicate frequency skew exponent")->capture_default_str();
  synth->add_option("--train", sa.train, "training scenes")->capture_default_str();
  synth->add_option("--test", sa.test, "test scenes")->capture_default_str();
  synth->add_option("--min-entities", sa.min_entities)->capture_default_str();
  synth->add_option("--max-entities", sa.max_entities)->capture_default_str();
  synth->add_option("--temperature", sa.world.temperature)->capture_default_str();
  synth->add_option("--pair-prob", sa.world.pair_label_prob)->capture_default_str();
  synth->add_option("--jitter", sa.world.box_jitter)->capture_default_str();
  synth->add_option("--embedding-dim", sa.world.embedding_dim)->capture_default_str();
  synth->add_option("-o,--out", sa.out_dir, "output directory")->required();

  TrainArgs ta;
  ta.seed = default_seed();
  auto* trn = app.add_subcommand("train", "train the model and write a checkpoint");
  trn->add_option("--data", ta.data, "training dataset")->required()->check(CLI::ExistingFile);
  trn->add_option("--kg", ta.kg, "commonsense graph file")->required()->check(CLI::ExistingFile);
  trn->add_option("-o,--out", ta.out, "checkpoint to write")->required();
  trn->add_option("--log", ta.log, "loss log TSV (default: beside the checkpoint)");
  trn->add_option("--init", ta.init, "resume from this checkpoint")->check(CLI::ExistingFile);
  ta.model.attach(*trn);
  trn->add_option("--lr", ta.adam.lr)->capture_default_str()->check(CLI::NonNegativeNumber);
  trn->add_option("--beta1", ta.adam.beta1)->capture_default_str();
  trn->add_option("--beta2", ta.adam.beta2)->capture_default_str();
  trn->add_option("--eps", ta.adam.eps)->capture_default_str();
  trn->add_option("--epochs", ta.epochs)->capture_default_str();
  trn->add_option("--max-steps", ta.max_steps, "optimizer step budget")->capture_default_str();
  trn->add_option("--batch", ta.batch)->capture_default_str()->check(CLI::PositiveNumber);
  trn->add_option("--seed", ta.seed)->capture_default_str();
  trn->add_option("--balance-beta", ta.balance_beta, "class-balance beta, 0 disables")->capture_default_str();
  trn->add_option("--mode", ta.mode, "sgcls or predcls")->capture_default_str();
  trn->add_option("--threads", ta.threads)->capture_default_str()->check(CLI::PositiveNumber);

  EvalArgs ea;
  auto* evl = app.add_subcommand("eval", "compute R@K and mR@K");
  evl->add_option("--data", ea.data)->required()->check(CLI::ExistingFile);
  evl->add_option("--kg", ea.kg)->required()->check(CLI::ExistingFile);
  evl->add_option("--checkpoint", ea.checkpoint)->required()->check(CLI::ExistingFile);
  evl->add_option("-o,--out", ea.out, "metrics TSV")->required();
  ea.model.attach(*evl);
  evl->add_option("--task", ea.task, "sggen, sgcls, predcls or all")->capture_default_str();
  evl->add_option("--k", ea.ks, "comma-separated K values")->delimiter(',')->capture_default_str();
  evl->add_option("--constrained", ea.constrained, "yes, no or both")->capture_default_str();

  InferArgs ia;
  auto* inf = app.add_subcommand("infer", "dump scene graphs with confidences");
  inf->add_option("--data", ia.data)->required()->check(CLI::ExistingFile);
  inf->add_option("--kg", ia.kg)->required()->check(CLI::ExistingFile);
  inf->add_option("--checkpoint", ia.checkpoint)->required()->check(CLI::ExistingFile);
  inf->add_option("-o,--out", ia.out, "triplet dump TSV")->required();
  inf->add_option("--dot", ia.dot, "also write a Graphviz file");
  ia.model.attach(*inf);
  inf->add_option("--task", ia.task)->capture_default_str();
  inf->add_option("--k", ia.k)->capture_default_str();
  inf->add_option("--constrained", ia.constrained, "yes or no")->capture_default_str();
  inf->add_option("--image", ia.images, "restrict to these image ids")->delimiter(',');

  for (CLI::App* s : app.get_subcommands({})) {
    s->footer("Options may also come from --config FILE, a file of `key = value` lines.");
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    log << app.help();
    return kOk;
  } catch (const CLI::CallForAllHelp& e) {
    log << app.help("", CLI::AppFormatMode::All);
    return kOk;
  } catch (const CLI::ParseError& e) {
    err << "gbnet: " << e.what() << "\n";
    const CLI::App* failing = &app;
    for (const CLI::App* s : app.get_subcommands()) failing = s;
    err << failing->help();
    return kUsage;
  }

  CLI::App* sub = app.get_subcommands().front();
  const std::string name = sub->get_name();
  try {
    if (name == "compile") {
      cmd_compile(ca, log);
      write_resolved_config(*sub, sibling(ca.out, ".config.toml"));
    } else if (name == "synth") {
      cmd_synth(sa, log);
      write_resolved_config(*sub, (std::filesystem::path(sa.out_dir) / "synth.config.toml").string());
    } else if (name == "train") {
      cmd_train(ta, log);
      write_resolved_config(*sub, sibling(ta.out, ".config.toml"));
    } else if (name == "eval") {
      cmd_eval(ea, log);
      write_resolved_config(*sub, sibling(ea.out, ".config.toml"));
    } else {
      cmd_infer(ia, log);
      write_resolved_config(*sub, sibling(ia.out, ".config.toml"));
    }
  } catch (const NumericError& e) {
    err << "gbnet " << name << ": numeric failure: " << e.what() << "\n";
    return kNumeric;
  } catch (const ParseError& e) {
    err << "gbnet " << name << ": " << e.what() << "\n";
    return kUsage;
  } catch (const ConfigError& e) {
    err << "gbnet " << name << ": " << e.what() << "\n";
    return kUsage;
  } catch (const InputError& e) {
    // The compiler treats bad inputs as parse failures of its TSV sources.
    err << "gbnet " << name << ": " << e.what() << "\n";
    return name == "compile" ? kUsage : kData;
  } catch (const Error& e) {
    err << "gbnet " << name << ": " << e.what() << "\n";
    return kData;
  } catch (const std::filesystem::filesystem_error& e) {
    err << "gbnet " << name << ": " << e.what() << "\n";
    return kData;
  }
  return kOk;
}

}  // namespace gbnet::cli
