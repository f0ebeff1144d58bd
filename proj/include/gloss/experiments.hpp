#ifndef GLOSS_EXPERIMENTS_HPP
#define GLOSS_EXPERIMENTS_HPP

// Experiment runners behind the command-line tool. Each command reads a flat
// JSON configuration (defaults, then a config file, then flag overrides) and
// writes its artifacts into the output directory. Every artifact carries the
// configuration hash and the seed.

#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "gloss/arch.hpp"
#include "gloss/checkpoint.hpp"
#include "gloss/data.hpp"
#include "gloss/errors.hpp"
#include "gloss/eval.hpp"
#include "gloss/gradcheck.hpp"
#include "gloss/hash.hpp"
#include "gloss/losses.hpp"
#include "gloss/model.hpp"
#include "gloss/optimizer.hpp"

namespace gloss {

namespace fs = std::filesystem;

/// Settings of one command. The key set is fixed per command: a config file
/// or override naming any other key is rejected, as is a value whose JSON
/// type differs from the default's.
class ExperimentConfig {
 public:
  static std::vector<std::string> commands() { return {"toy", "train", "eval", "gradcheck", "parse-arch"}; }

  static ExperimentConfig defaults(const std::string& command) {
    using nlohmann::json;
    json v = {{"seed", 0}, {"out", "out"}};
    const json loss = {{"triplet_margin", 0.01}, {"global_margin", 0.4}, {"similarity_margin", 1.0},
                       {"lambda", nullptr},      {"gamma", 1.0},         {"kappa", 0.01}};
    const json optim = {{"lr_start", 0.01}, {"lr_end", 0.0001}, {"momentum", 0.9},
                        {"weight_decay", 0.0005}};
    const json fixture = {{"data_dir", ""},           {"set", "liberty"},
                          {"fixture_seed", 0},        {"synthetic_classes", 500},
                          {"synthetic_per_class", 4}, {"heldout_classes", 250},
                          {"heldout_pairs", 2000}};
    if (command == "toy") {
      v.update(loss);
      v.update(optim);
      v.update({{"arch", arch::kToyTower},
                {"precision", "float"},
                {"epochs", 200},
                {"batch_size", 100},
                {"triplets", 1000},
                {"toy_sigma", 0.6},
                {"toy_per_class", 40},
                {"toy_flip_fraction", 0.05},
                {"grid_size", 200},
                {"grid_margin", 0.2}});
    } else if (command == "train") {
      v.update(loss);
      v.update(optim);
      v.update(fixture);
      v.update({{"network", "triplet"},
                {"loss", "triplet"},
                {"arch", ""},
                {"fusion_arch", arch::kCentralSurroundFusion},
                {"correct_filter_typo", false},
                {"precision", "float"},
                {"epochs", 5},
                {"batch_size", 250},
                {"triplets", 20000},
                {"augment", true},
                {"init_from", ""},
                {"init_epochs", 0},
                {"checkpoint_every", 0}});
    } else if (command == "eval") {
      v.update(fixture);
      v.update({{"checkpoint", ""}, {"pairs", ""}, {"precision", "float"}, {"oracle_scores", false}});
    } else if (command == "gradcheck") {
      v.update({{"filter", ""},
                {"corrupt", ""},
                {"loss_points", 50},
                {"layer_shapes", 20},
                {"network_points", 3},
                {"coords_per_tensor", 12},
                {"step", 1e-5}});
    } else if (command == "parse-arch") {
      v.update({{"arch", ""}, {"input", "1,64,64"}, {"output", "auto"}, {"correct_filter_typo", false}});
    } else {
      throw ConfigError("unknown command '" + command + "'");
    }
    ExperimentConfig c;
    c.command_ = command;
    c.values_ = std::move(v);
    return c;
  }

  const std::string& command() const noexcept { return command_; }
  const nlohmann::json& values() const noexcept { return values_; }

  /// Overrides keys from a JSON object; `source` names it in error messages.
  void merge(const nlohmann::json& overrides, const std::string& source) {
    if (!overrides.is_object()) throw ConfigError(source + ": configuration must be a JSON object");
    for (const auto& [key, value] : overrides.items()) {
      if (!values_.contains(key)) {
        throw ConfigError(source + ": unknown key '" + key + "' for command '" + command_ + "'");
      }
      if (!compatible(values_.at(key), value)) {
        throw ConfigError(source + ": key '" + key + "' expects " + type_name(values_.at(key)) +
                          ", got " + value.dump());
      }
      values_[key] = value;
    }
  }

  void merge_file(const fs::path& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot open config file " + path.string());
    nlohmann::json j;
    try {
      is >> j;
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("config file " + path.string() + ": " + e.what());
    }
    merge(j, path.string());
  }

  /// Sets one key from its command-line text, parsed as JSON when possible
  /// and as a plain string otherwise.
  void set_from_text(const std::string& key, const std::string& text) {
    nlohmann::json v = nlohmann::json::parse(text, nullptr, false);
    if (v.is_discarded() || (values_.contains(key) && values_.at(key).is_string())) v = text;
    merge({{key, v}}, "--" + key);
  }

  /// Every non-empty path-valued key must name an existing file or directory.
  void require_paths() const {
    for (const char* key : {"data_dir", "init_from", "checkpoint", "pairs"}) {
      if (!values_.contains(key)) continue;
      const std::string p = values_.at(key).get<std::string>();
      if (!p.empty() && !fs::exists(p)) {
        throw ConfigError("path for '" + std::string(key) + "' does not exist: " + p);
      }
    }
  }

  template <class V>
  V get(const std::string& key) const {
    if (!values_.contains(key)) throw ConfigError("config has no key '" + key + "'");
    return values_.at(key).get<V>();
  }

  std::string str(const std::string& key) const { return get<std::string>(key); }
  std::uint64_t seed() const { return get<std::uint64_t>("seed"); }
  fs::path out_dir() const { return fs::path(str("out")); }

  /// FNV-1a of the command and the canonical (key-sorted) dump of all values.
  std::string hash() const { return fnv1a_hex(command_ + "\n" + values_.dump()); }

  /// Metadata block attached to every artifact.
  nlohmann::json stamp() const {
    return {{"command", command_}, {"config_hash", hash()}, {"seed", seed()}};
  }

  /// First line of every CSV artifact.
  std::string csv_header() const {
    return "# command=" + command_ + " config_hash=" + hash() + " seed=" + std::to_string(seed()) + "\n";
  }

  LossConfig loss_config(LossKind kind) const {
    LossConfig c = LossConfig::defaults_for(kind);
    c.triplet_margin = get<double>("triplet_margin");
    c.global_margin = get<double>("global_margin");
    c.similarity_margin = get<double>("similarity_margin");
    c.gamma = get<double>("gamma");
    c.kappa = get<double>("kappa");
    if (!values_.at("lambda").is_null()) c.lambda = get<double>("lambda");
    c.validate();
    return c;
  }

  TrainConfig train_config() const {
    TrainConfig t;
    t.lr_start = get<double>("lr_start");
    t.lr_end = get<double>("lr_end");
    t.momentum = get<double>("momentum");
    t.weight_decay = get<double>("weight_decay");
    t.epochs = get<int>("epochs");
    t.batch_size = get<std::size_t>("batch_size");
    t.seed = seed();
    if (values_.contains("init_from") && !str("init_from").empty()) t.init_from = str("init_from");
    if (values_.contains("init_epochs")) t.init_epochs = get<int>("init_epochs");
    if (values_.contains("checkpoint_every")) t.checkpoint_every = get<int>("checkpoint_every");
    t.augment = values_.contains("augment") ? get<bool>("augment") : false;
    t.validate();
    return t;
  }

 private:
  static bool compatible(const nlohmann::json& def, const nlohmann::json& v) {
    if (def.is_null()) return v.is_null() || v.is_number();  // optional number
    if (def.is_number_float()) return v.is_number();
    if (def.is_number_integer()) return v.is_number_integer() && (def.get<long long>() < 0 || v.get<long long>() >= 0);
    return def.type() == v.type();
  }

  static std::string type_name(const nlohmann::json& def) {
    if (def.is_null()) return "a number or null";
    if (def.is_number_float()) return "a number";
    if (def.is_number_integer()) return "a non-negative integer";
    return std::string("a ") + def.type_name();
  }

  std::string command_;
  nlohmann::json values_;
};

/// Exit status of a failed command: 2 configuration, 3 ingestion, 4 numerical.
inline int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const IngestionError*>(&e)) return 3;
  if (dynamic_cast<const NumericalError*>(&e) || dynamic_cast<const DomainError*>(&e)) return 4;
  if (dynamic_cast<const ConfigError*>(&e) || dynamic_cast<const ParseError*>(&e) ||
      dynamic_cast<const UsageError*>(&e) || dynamic_cast<const nlohmann::json::exception*>(&e)) {
    return 2;
  }
  return 1;
}

namespace detail {

inline void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IngestionError("cannot write " + path.string());
  os << text;
  if (!os) throw IngestionError("failed writing " + path.string());
}

inline void write_json(const fs::path& path, const nlohmann::json& j) { write_text(path, j.dump(2) + "\n"); }

inline fs::path prepare_out(const ExperimentConfig& cfg) {
  const fs::path out = cfg.out_dir();
  std::error_code ec;
  fs::create_directories(out, ec);
  if (ec) throw ConfigError("cannot create output directory " + out.string() + ": " + ec.message());
  nlohmann::json resolved = cfg.stamp();
  resolved["values"] = cfg.values();
  write_json(out / "config.json", resolved);
  return out;
}

inline FeatureShape parse_input_shape(const std::string& text) {
  std::vector<std::size_t> dims;
  std::stringstream ss(text);
  std::string part;
  while (std::getline(ss, part, ',')) {
    try {
      std::size_t used = 0;
      const long long v = std::stoll(part, &used);
      if (used != part.size() || v <= 0) throw std::invalid_argument(part);
      dims.push_back(static_cast<std::size_t>(v));
    } catch (const std::logic_error&) {
      throw ConfigError("input shape '" + text + "' must be C,H,W with positive integers");
    }
  }
  if (dims.size() != 3) throw ConfigError("input shape '" + text + "' must be C,H,W");
  return {dims[0], dims[1], dims[2]};
}

inline std::vector<std::int64_t> as_class_ids(const std::vector<int>& labels) {
  return {labels.begin(), labels.end()};
}

}  // namespace detail

// ---------------------------------------------------------------------------
// toy

struct ToyLossOutcome {
  LossKind loss;
  double clean_accuracy = 0;
  std::vector<EpochRecord> trace;
  LabelMap map;
};

struct ToyOutcome {
  ToySet set;
  std::vector<ToyLossOutcome> runs;  // triplet, combined, global
};

/// The losses compared by the toy study, in artifact order.
inline std::vector<LossKind> toy_losses() {
  return {LossKind::Triplet, LossKind::TripletGlobal, LossKind::GlobalEmbed};
}

/// Trains the toy tower once per loss with the same data, triplets,
/// initialization and seed, and labels a grid around the data by nearest
/// neighbour in each learned embedding. Runs are appended to `out` as they
/// finish; a divergent run is appended with its partial trace before the
/// NumericalError propagates.
template <class T>
void run_toy(const ExperimentConfig& cfg, ToyOutcome& out) {
  ToyOptions topts;
  topts.sigma = cfg.get<double>("toy_sigma");
  topts.per_class = cfg.get<std::size_t>("toy_per_class");
  topts.flip_fraction = cfg.get<double>("toy_flip_fraction");
  if (!(topts.sigma > 0) || topts.per_class < 2 || topts.flip_fraction < 0 || topts.flip_fraction > 1) {
    throw ConfigError("toy: need toy_sigma > 0, toy_per_class >= 2 and toy_flip_fraction in [0, 1]");
  }
  const auto grid_size = cfg.get<std::size_t>("grid_size");
  if (grid_size < 2) throw ConfigError("toy: grid_size must be at least 2");
  const TrainConfig tcfg = cfg.train_config();
  ParseOptions popts;
  popts.output = OutputKind::Embedding;
  const ArchSpec spec = parse_arch(cfg.str("arch"), {2, 1, 1}, popts);

  out.set = make_toy_set(cfg.seed(), topts);
  const auto ids = detail::as_class_ids(out.set.labels);
  const Tensor<T> items = toy_points_tensor<T>(out.set.points);
  const TripletDataset<T> data(items, sample_triplets(ids, cfg.get<std::size_t>("triplets"), cfg.seed()),
                               false);
  const GridSpec grid = grid_around(out.set.points, cfg.get<double>("grid_margin"), grid_size, grid_size);
  for (LossKind kind : toy_losses()) {
    auto net = Network<T>::embedding(NetworkKind::Triplet, spec, cfg.seed());
    out.runs.push_back({kind, 0, {}, {}});
    ToyLossOutcome& run = out.runs.back();
    train(net, data, kind, cfg.loss_config(kind), tcfg,
          [&](const EpochRecord& r, const Network<T>&) { run.trace.push_back(r); });
    const Tensor<T> train_emb = net.embed(items, Mode::Eval);
    run.map = nn_label_map(train_emb, out.set.labels, grid, [&](const auto& pts) {
      return net.embed(toy_points_tensor<T>(pts), Mode::Eval);
    });
    run.clean_accuracy = clean_accuracy(run.map, topts);
  }
}

template <class T>
ToyOutcome run_toy(const ExperimentConfig& cfg) {
  ToyOutcome out;
  run_toy<T>(cfg, out);
  return out;
}

inline std::string toy_file_stem(LossKind k) {
  switch (k) {
    case LossKind::Triplet: return "triplet";
    case LossKind::TripletGlobal: return "combined";
    case LossKind::GlobalEmbed: return "global";
    default: return to_string(k);
  }
}

template <class T>
int cmd_toy_typed(const ExperimentConfig& cfg) {
  const fs::path out = detail::prepare_out(cfg);
  ToyOutcome res;
  try {
    run_toy<T>(cfg, res);
  } catch (const NumericalError& e) {
    nlohmann::json err = cfg.stamp();
    err["error"] = e.what();
    auto& traces = err["traces"] = nlohmann::json::object();
    for (const auto& run : res.runs) traces[toy_file_stem(run.loss)] = trace_csv(run.trace);
    detail::write_json(out / "toy_error.json", err);
    throw;
  }
  detail::write_text(out / "toy_train.csv", cfg.csv_header() + toy_set_csv(res.set));
  nlohmann::json summary = cfg.stamp();
  summary["points"] = res.set.size();
  summary["flipped"] = res.set.flipped_indices;
  auto& losses = summary["losses"] = nlohmann::json::object();
  for (const auto& run : res.runs) {
    const std::string stem = toy_file_stem(run.loss);
    detail::write_text(out / ("labelmap_" + stem + ".csv"), cfg.csv_header() + label_map_csv(run.map));
    detail::write_text(out / ("trace_" + stem + ".csv"), cfg.csv_header() + trace_csv(run.trace));
    losses[stem] = {{"loss", to_string(run.loss)},
                    {"clean_accuracy", run.clean_accuracy},
                    {"final_mean_loss", run.trace.empty() ? 0.0 : run.trace.back().mean_loss}};
  }
  detail::write_json(out / "toy_summary.json", summary);
  return 0;
}

// ---------------------------------------------------------------------------
// train / eval data

/// Patches and pairs used by `train` (triplet source) and `eval` (held-out
/// pairs). With an empty data_dir both come from the synthetic fixture:
/// training classes and held-out classes are disjoint.
struct DescriptorData {
  PatchSet patches;
  PairList pairs;
  std::string source;
};

inline SyntheticOptions fixture_options(const ExperimentConfig& cfg, bool heldout) {
  SyntheticOptions o;
  o.per_class = cfg.get<std::size_t>("synthetic_per_class");
  const auto train_classes = cfg.get<std::size_t>("synthetic_classes");
  o.classes = heldout ? cfg.get<std::size_t>("heldout_classes") : train_classes;
  o.first_class_id = heldout ? static_cast<std::int64_t>(train_classes) : 0;
  return o;
}

inline DescriptorData training_patches(const ExperimentConfig& cfg) {
  DescriptorData d;
  if (cfg.str("data_dir").empty()) {
    d.patches = make_synthetic_patches(cfg.get<std::uint64_t>("fixture_seed"), fixture_options(cfg, false));
    d.source = "synthetic";
  } else {
    d.patches = load_ubc(cfg.str("data_dir"), cfg.str("set"));
    d.source = cfg.str("set");
  }
  return d;
}

inline DescriptorData evaluation_pairs(const ExperimentConfig& cfg) {
  DescriptorData d;
  if (cfg.str("data_dir").empty()) {
    const std::uint64_t seed = cfg.get<std::uint64_t>("fixture_seed") + 1;
    d.patches = make_synthetic_patches(seed, fixture_options(cfg, true));
    d.pairs = make_balanced_pairs(d.patches, cfg.get<std::size_t>("heldout_pairs"), seed);
    d.source = "synthetic-heldout";
    return d;
  }
  if (cfg.str("pairs").empty()) throw ConfigError("eval: 'pairs' is required with a data_dir");
  d.patches = load_ubc(cfg.str("data_dir"), cfg.str("set"));
  const fs::path p(cfg.str("pairs"));
  d.pairs = load_eval_pairs(p.parent_path().empty() ? fs::path(".") : p.parent_path(), p.filename().string());
  d.source = cfg.str("set") + ":" + p.filename().string();
  return d;
}

/// Fresh network of the configured kind. An empty arch selects the
/// architecture from the descriptor experiments for that kind.
template <class T>
Network<T> make_network(const ExperimentConfig& cfg) {
  const NetworkKind kind = parse_network_kind(cfg.str("network"));
  ParseOptions popts;
  popts.correct_filter_typo = cfg.get<bool>("correct_filter_typo");
  std::string text = cfg.str("arch");
  switch (kind) {
    case NetworkKind::Triplet:
    case NetworkKind::SiameseEmbedding:
      popts.output = OutputKind::Embedding;
      if (text.empty()) text = arch::kTripletTower;
      return Network<T>::embedding(kind, parse_arch(text, {1, kPatchSide, kPatchSide}, popts), cfg.seed());
    case NetworkKind::SiameseSimilarity:
      popts.output = OutputKind::Similarity;
      if (text.empty()) text = arch::kSiameseTower;
      return Network<T>::similarity(parse_arch(text, {2, kPatchSide, kPatchSide}, popts), cfg.seed());
    case NetworkKind::CentralSurroundSimilarity: {
      if (text.empty()) text = arch::kCentralSurroundStream;
      popts.output = OutputKind::Features;
      const ArchSpec stream = parse_arch(text, {1, kPatchSide / 2, kPatchSide / 2}, popts);
      const FeatureShape f = propagate_shapes(stream).back();
      ParseOptions fopts;
      fopts.output = OutputKind::Similarity;
      const ArchSpec fusion = parse_arch(cfg.str("fusion_arch"), {4 * f.channels, f.height, f.width}, fopts);
      return Network<T>::central_surround(stream, fusion, cfg.seed());
    }
  }
  throw ConfigError("unsupported network kind");
}

// ---------------------------------------------------------------------------
// train

template <class T>
int cmd_train_typed(const ExperimentConfig& cfg) {
  // validation first: nothing is computed for an invalid pairing
  const LossKind loss = parse_loss_kind(cfg.str("loss"));
  const NetworkKind kind = parse_network_kind(cfg.str("network"));
  check_compatible(loss, kind);
  const LossConfig lcfg = cfg.loss_config(loss);
  const TrainConfig tcfg = cfg.train_config();
  if (tcfg.init_epochs > 0 && !is_embedding_network(kind)) {
    throw ConfigError("init_epochs pre-trains with the triplet loss and needs an embedding network");
  }
  Network<T> net = make_network<T>(cfg);
  const fs::path out = detail::prepare_out(cfg);

  const DescriptorData d = training_patches(cfg);
  const auto triplets = sample_triplets(d.patches.class_ids, cfg.get<std::size_t>("triplets"), cfg.seed());
  const TripletDataset<T> data(patches_to_tensor<T>(d.patches), triplets, tcfg.augment);

  nlohmann::json meta = cfg.stamp();
  meta["loss"] = to_string(loss);
  meta["data"] = d.source;
  std::vector<EpochRecord> trace;
  const EpochCallback<T> on_epoch = [&](const EpochRecord& r, const Network<T>& n) {
    trace.push_back(r);
    detail::write_text(out / "trace.csv", cfg.csv_header() + trace_csv(trace));
    if (tcfg.checkpoint_every > 0 && (r.epoch + 1) % tcfg.checkpoint_every == 0) {
      nlohmann::json m = meta;
      m["epoch"] = r.epoch;
      save_checkpoint(n, (out / ("checkpoint_epoch" + std::to_string(r.epoch + 1) + ".json")).string(), m);
    }
  };
  try {
    train_with_init(net, data, loss, lcfg, tcfg, on_epoch);
  } catch (const NumericalError& e) {
    nlohmann::json err = meta;
    err["error"] = e.what();
    err["epochs_completed"] = trace.size();
    detail::write_json(out / "train_error.json", err);
    throw;
  }
  detail::write_text(out / "trace.csv", cfg.csv_header() + trace_csv(trace));
  meta["epochs"] = trace.size();
  save_checkpoint(net, (out / "checkpoint.json").string(), meta);
  return 0;
}

// ---------------------------------------------------------------------------
// eval

struct EvalOutcome {
  EvalReport model, baseline;
};

template <class T>
EvalOutcome run_eval(const ExperimentConfig& cfg) {
  if (cfg.str("checkpoint").empty() && !cfg.get<bool>("oracle_scores")) {
    throw ConfigError("eval: 'checkpoint' is required");
  }
  const DescriptorData d = evaluation_pairs(cfg);
  const PairBatch<T> pairs = make_pair_batch<T>(d.patches, d.pairs);
  EvalOutcome r;
  if (cfg.get<bool>("oracle_scores")) {
    ScoredPairs sp;
    sp.orientation = Orientation::HigherIsSimilar;
    sp.labels = pairs.labels;
    for (bool m : pairs.labels) sp.scores.push_back(m ? 1.0 : 0.0);
    r.model = roc_and_fpr95(sp);
  } else {
    const Network<T> net = load_checkpoint<T>(cfg.str("checkpoint"));
    for (const auto& g : net.groups()) {
      const auto want = g.name == "fusion" ? g.spec.input
                        : net.kind() == NetworkKind::SiameseSimilarity
                            ? FeatureShape{2, kPatchSide, kPatchSide}
                        : net.kind() == NetworkKind::CentralSurroundSimilarity
                            ? FeatureShape{1, kPatchSide / 2, kPatchSide / 2}
                            : FeatureShape{1, kPatchSide, kPatchSide};
      if (g.spec.input != want) {
        throw IngestionError("checkpoint group '" + g.name + "' expects input " + to_string(g.spec.input) +
                             ", evaluation patches give " + to_string(want));
      }
    }
    r.model = roc_and_fpr95(score_pairs(net, pairs));
  }
  r.baseline = roc_and_fpr95(raw_pixel_baseline(pairs));
  return r;
}

template <class T>
int cmd_eval_typed(const ExperimentConfig& cfg) {
  const EvalOutcome r = run_eval<T>(cfg);
  const fs::path out = detail::prepare_out(cfg);
  nlohmann::json j = cfg.stamp();
  j["model"] = report_to_json(r.model);
  j["baseline"] = report_to_json(r.baseline);
  j["checkpoint"] = cfg.str("checkpoint");
  j["oracle_scores"] = cfg.get<bool>("oracle_scores");
  detail::write_json(out / "eval_report.json", j);
  detail::write_text(out / "roc_model.csv", cfg.csv_header() + roc_csv(r.model));
  detail::write_text(out / "roc_baseline.csv", cfg.csv_header() + roc_csv(r.baseline));
  std::cout << std::setprecision(6) << "fpr95 model " << r.model.fpr95 << " baseline " << r.baseline.fpr95
            << '\n';
  return 0;
}

// ---------------------------------------------------------------------------
// gradcheck / parse-arch

inline SuiteOptions suite_options(const ExperimentConfig& cfg) {
  SuiteOptions o;
  o.seed = cfg.seed();
  o.filter = cfg.str("filter");
  o.corrupt = cfg.str("corrupt");
  o.loss_points = cfg.get<std::size_t>("loss_points");
  o.layer_shapes = cfg.get<std::size_t>("layer_shapes");
  o.network_points = cfg.get<std::size_t>("network_points");
  o.coords_per_tensor = cfg.get<std::size_t>("coords_per_tensor");
  o.step = cfg.get<double>("step");
  if (!(o.step > 0)) throw ConfigError("gradcheck: step must be positive");
  return o;
}

inline int cmd_gradcheck(const ExperimentConfig& cfg) {
  const SuiteOptions opts = suite_options(cfg);
  const fs::path out = detail::prepare_out(cfg);
  const SuiteReport rep = run_gradcheck_suite(opts);
  nlohmann::json j = cfg.stamp();
  j.update(suite_to_json(rep));
  if (rep.checks.empty()) {
    j["warning"] = "0 checks run";
    std::cerr << "warning: 0 checks run (filter '" << opts.filter << "' selects nothing)\n";
  }
  detail::write_json(out / "gradcheck.json", j);
  for (const auto& c : rep.checks) {
    std::cout << (c.passed ? "PASS " : "FAIL ") << std::left << std::setw(40) << c.name
              << " max_rel_error " << std::scientific << std::setprecision(2) << c.max_rel_error
              << " (tol " << c.tolerance << ")" << std::defaultfloat << '\n';
  }
  return rep.passed() ? 0 : 1;
}

inline nlohmann::json describe_arch(const ExperimentConfig& cfg) {
  if (cfg.str("arch").empty()) throw ConfigError("parse-arch: 'arch' is required");
  ParseOptions popts;
  popts.correct_filter_typo = cfg.get<bool>("correct_filter_typo");
  const std::string out_kind = cfg.str("output");
  if (out_kind != "auto") {
    try {
      popts.output = detail::parse_output_kind(out_kind);
    } catch (const IngestionError&) {
      throw ConfigError("parse-arch: output must be auto, embedding, similarity or features");
    }
  }
  const ArchSpec spec = parse_arch(cfg.str("arch"), detail::parse_input_shape(cfg.str("input")), popts);
  nlohmann::json j;
  j["canonical"] = render(spec);
  j["output"] = to_string(spec.output);
  j["input"] = to_string(spec.input);
  auto& shapes = j["shapes"] = nlohmann::json::array();
  const auto sh = propagate_shapes(spec);
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    shapes.push_back({{"layer", render_layer(spec.layers[i])}, {"output", to_string(sh[i])}});
  }
  return j;
}

inline int cmd_parse_arch(const ExperimentConfig& cfg) {
  std::cout << describe_arch(cfg).dump(2) << '\n';
  return 0;
}

/// Runs one command on a fully merged configuration.
inline int run_command(const ExperimentConfig& cfg) {
  cfg.require_paths();
  const std::string& c = cfg.command();
  const auto precision = [&] {
    const std::string p = cfg.str("precision");
    if (p != "float" && p != "double") throw ConfigError("precision must be 'float' or 'double'");
    return p;
  };
  if (c == "toy") return precision() == "float" ? cmd_toy_typed<float>(cfg) : cmd_toy_typed<double>(cfg);
  if (c == "train") return precision() == "float" ? cmd_train_typed<float>(cfg) : cmd_train_typed<double>(cfg);
  if (c == "eval") return precision() == "float" ? cmd_eval_typed<float>(cfg) : cmd_eval_typed<double>(cfg);
  if (c == "gradcheck") return cmd_gradcheck(cfg);
  if (c == "parse-arch") return cmd_parse_arch(cfg);
  throw ConfigError("unknown command '" + c + "'");
}

}  // namespace gloss

#endif  // GLOSS_EXPERIMENTS_HPP
