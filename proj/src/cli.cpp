#include "genpred/cli.hpp"

#include <CLI11.hpp>

#include <fstream>
#include <iostream>
#include <memory>
#include <set>
#include <sstream>

#include "genpred/errors.hpp"
#include "genpred/rng.hpp"
#include "genpred/weight_features.hpp"

namespace genpred::cli {

void PipelineConfig::propagate() {
  forge.base_spec = env;
  compare.base_spec = env;
  forge.agent_seed_base = derive_seed(seed, 1);
  forge.noise.seed = derive_seed(seed, 2);
  predictor.seed = derive_seed(seed, 3);
  compare.seed = derive_seed(seed, 4);
  compare.noise.seed = derive_seed(seed, 5);
}

void PipelineConfig::validate() const {
  forge.validate();
  if (!(selection_threshold >= 0.0 && selection_threshold <= 1.0))
    throw InvalidConfig("selection_threshold must lie in [0, 1]");
  harness::CompareConfig c = compare;
  c.forge_train_seeds = forge.train_seeds();
  c.forge_eval_seeds = forge.eval_seeds();
  c.validate();
}

void to_json(nlohmann::json& j, const PipelineConfig& c) {
  j = nlohmann::json{{"seed", c.seed},
                     {"env", c.env},
                     {"forge", c.forge},
                     {"selection_threshold", c.selection_threshold},
                     {"predictor", c.predictor},
                     {"compare", c.compare}};
}

void from_json(const nlohmann::json& j, PipelineConfig& c) {
  const PipelineConfig d;
  c.seed = j.value("seed", d.seed);
  c.env = j.contains("env") ? j.at("env").get<env::GridSpec>() : d.env;
  c.forge = j.contains("forge") ? j.at("forge").get<forge::ForgeConfig>() : d.forge;
  c.selection_threshold = j.value("selection_threshold", d.selection_threshold);
  c.predictor = j.contains("predictor") ? j.at("predictor").get<predictor::TrainHyper>() : d.predictor;
  c.compare = j.contains("compare") ? j.at("compare").get<harness::CompareConfig>() : d.compare;
  if (j.contains("seed") || j.contains("env")) c.propagate();
}

nlohmann::json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw InvalidArgument("cannot open " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw InvalidConfig(path.string() + ": " + e.what());
  }
}

nlohmann::json section_of(const nlohmann::json& j, const std::string& key) {
  if (j.is_object() && j.contains(key) && j.at(key).is_object()) return j.at(key);
  return j;
}

std::vector<predictor::LabeledSnapshot> load_dataset(const std::filesystem::path& manifest_path) {
  const forge::DatasetManifest m = forge::load_manifest(manifest_path);
  std::vector<predictor::LabeledSnapshot> out;
  for (const auto& r : m.records) {
    if (!r.ok()) continue;
    features::WeightSnapshot snap = features::load_snapshot(manifest_path.parent_path() / r.weights_path);
    snap.agent_id = r.agent_id;
    out.push_back({r.agent_id, std::move(snap), r.zeta});
  }
  return out;
}

PredictorRun train_and_evaluate(const std::vector<predictor::LabeledSnapshot>& dataset,
                                predictor::Architecture arch, const predictor::TrainHyper& hyper,
                                double selection_threshold, double test_fraction) {
  std::vector<std::string> ids;
  for (const auto& s : dataset) ids.push_back(s.agent_id);
  const auto [train_idx, test_idx] = predictor::split_by_agent(ids, hyper.seed, test_fraction);

  PredictorRun run;
  std::vector<predictor::LabeledSnapshot> test_set;
  for (auto i : train_idx) run.train_ids.push_back(ids[i]);
  for (auto i : test_idx) {
    run.test_ids.push_back(ids[i]);
    test_set.push_back(dataset[i]);
  }

  if (arch == predictor::Architecture::Dnn) {
    std::vector<predictor::LabeledFeatures> train, held;
    for (auto i : train_idx) train.push_back({ids[i], features::extract_stats(dataset[i].snapshot), dataset[i].label});
    for (auto i : test_idx) held.push_back({ids[i], features::extract_stats(dataset[i].snapshot), dataset[i].label});
    std::vector<features::FeatureVector> rows;
    std::vector<double> labels;
    for (const auto& t : train) {
      rows.push_back(t.features);
      labels.push_back(t.label);
    }
    if (train.size() < 2) throw TooFewSamples("need at least 2 training agents to select features");
    const features::FeatureMask mask = features::select_features(rows, labels, selection_threshold);
    run.artifact = predictor::train_dnn(train, mask, hyper, held);
  } else {
    std::vector<predictor::LabeledImage> train, held;
    for (auto i : train_idx)
      train.push_back({ids[i], features::build_weight_image(dataset[i].snapshot), dataset[i].label});
    for (auto i : test_idx)
      held.push_back({ids[i], features::build_weight_image(dataset[i].snapshot), dataset[i].label});
    run.artifact = predictor::train_cnn(train, hyper, held);
  }
  if (test_set.size() >= 2) run.report = predictor::evaluate_predictor(run.artifact, test_set, true);
  return run;
}

namespace {

void write_json(const std::filesystem::path& path, const nlohmann::json& j) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

// Builds the pipeline config from a file that is either a whole pipeline or
// just the named section.
PipelineConfig load_pipeline(const std::string& path, const std::string& key) {
  PipelineConfig cfg;
  if (path.empty()) return cfg;
  const nlohmann::json j = read_json_file(path);
  if (j.is_object() && j.contains(key)) return j.get<PipelineConfig>();
  nlohmann::json wrapped = nlohmann::json::object();
  wrapped[key] = j;
  if (key == "predictor" && j.contains("selection_threshold")) wrapped["selection_threshold"] = j["selection_threshold"];
  return wrapped.get<PipelineConfig>();
}

void apply_seed(PipelineConfig& cfg, const std::optional<std::uint64_t>& seed) {
  if (!seed) return;
  const env::GridSpec forge_env = cfg.forge.base_spec;
  const env::GridSpec compare_env = cfg.compare.base_spec;
  cfg.seed = *seed;
  cfg.propagate();
  cfg.forge.base_spec = forge_env;
  cfg.compare.base_spec = compare_env;
}

nlohmann::json read_predictor_meta(const std::filesystem::path& dir) { return read_json_file(dir / "meta.json"); }

int cmd_forge(const std::string& config_path, const std::filesystem::path& out_dir, std::optional<int> workers,
              std::optional<std::uint64_t> seed, std::ostream& out, std::ostream& err) {
  PipelineConfig cfg = load_pipeline(config_path, "forge");
  apply_seed(cfg, seed);
  if (workers) cfg.forge.workers = *workers;
  cfg.forge.validate();
  std::size_t done = 0;
  const auto manifest = forge::forge(cfg.forge, out_dir, [&](const forge::AgentRecord& r) {
    ++done;
    err << "[" << done << "/" << cfg.forge.n_agents << "] " << r.agent_id << " steps=" << r.steps;
    if (r.ok())
      err << " zeta=" << r.zeta;
    else
      err << " failed: " << *r.error;
    err << " (" << r.wall_clock_seconds << " s)\n";
  });
  write_json(out_dir / "pipeline_config.json", cfg);
  std::size_t failed = 0;
  for (const auto& r : manifest.records) failed += r.ok() ? 0 : 1;
  out << "forged " << manifest.records.size() - failed << " agents (" << failed << " failed) into " << out_dir.string()
      << '\n';
  return 0;
}

int cmd_features(const std::filesystem::path& manifest_path, const std::filesystem::path& out_dir,
                 std::optional<double> threshold, std::ostream& out) {
  const auto dataset = load_dataset(manifest_path);
  std::vector<std::string> ids;
  std::vector<features::FeatureVector> rows;
  std::vector<double> labels;
  for (const auto& s : dataset) {
    ids.push_back(s.agent_id);
    rows.push_back(features::extract_stats(s.snapshot));
    labels.push_back(s.label);
  }
  std::filesystem::create_directories(out_dir);
  features::write_feature_csv(out_dir / "features.csv", ids, rows, labels);
  const double t = threshold.value_or(PipelineConfig{}.selection_threshold);
  const features::FeatureMask mask = features::select_features(rows, labels, t);
  nlohmann::json j = mask;
  j["manifest"] = std::filesystem::absolute(manifest_path).string();
  write_json(out_dir / "mask.json", j);
  out << "extracted " << rows.size() << " feature rows; " << mask.count() << " of " << features::kFeatureCount
      << " features selected at threshold " << t << '\n';
  return 0;
}

int cmd_predict_train(const std::filesystem::path& manifest_path, const std::string& arch_name,
                      const std::filesystem::path& out_dir, const std::string& config_path,
                      std::optional<std::uint64_t> seed, std::optional<double> threshold, double test_fraction,
                      std::ostream& out) {
  PipelineConfig cfg = load_pipeline(config_path, "predictor");
  apply_seed(cfg, seed);
  if (threshold) cfg.selection_threshold = *threshold;
  const auto arch = predictor::architecture_from_string(arch_name);
  const auto manifest = forge::load_manifest(manifest_path);
  const auto dataset = load_dataset(manifest_path);
  const PredictorRun run = train_and_evaluate(dataset, arch, cfg.predictor, cfg.selection_threshold, test_fraction);

  nlohmann::json provenance = {{"config", cfg},
                               {"manifest", std::filesystem::absolute(manifest_path).string()},
                               {"forge_config", manifest.config},
                               {"forge_train_seeds", {manifest.config.train_seeds().begin, manifest.config.train_seeds().end}},
                               {"forge_eval_seeds", {manifest.config.eval_seeds().begin, manifest.config.eval_seeds().end}},
                               {"test_fraction", test_fraction},
                               {"train_ids", run.train_ids},
                               {"test_ids", run.test_ids}};
  predictor::save_artifact(run.artifact, out_dir, provenance);
  if (!run.report.rows.empty()) write_json(out_dir / "eval.json", run.report);
  out << predictor::to_string(arch) << " predictor trained on " << run.train_ids.size() << " agents";
  if (!run.report.rows.empty())
    out << "; held-out pearson=" << run.report.pearson << " mse=" << run.report.mse << " (n=" << run.test_ids.size()
        << ")";
  out << '\n';
  return 0;
}

int cmd_predict_eval(const std::filesystem::path& predictor_dir, const std::string& manifest_arg,
                     const std::string& out_arg, std::ostream& out) {
  const nlohmann::json meta = read_predictor_meta(predictor_dir);
  const nlohmann::json prov = meta.value("provenance", nlohmann::json::object());
  std::filesystem::path manifest_path = manifest_arg;
  if (manifest_path.empty()) {
    if (!prov.contains("manifest")) throw UsageError("--manifest is required: the predictor does not name its dataset");
    manifest_path = prov.at("manifest").get<std::string>();
  }
  const auto artifact = predictor::load_artifact(predictor_dir);
  const auto dataset = load_dataset(manifest_path);

  std::set<std::string> train_ids, test_ids;
  if (prov.contains("train_ids")) train_ids = prov.at("train_ids").get<std::set<std::string>>();
  if (prov.contains("test_ids")) test_ids = prov.at("test_ids").get<std::set<std::string>>();

  std::vector<predictor::LabeledSnapshot> test_set;
  for (const auto& s : dataset)
    if (test_ids.empty() ? !train_ids.count(s.agent_id) : test_ids.count(s.agent_id) > 0) test_set.push_back(s);
  if (test_set.size() < 2) throw EmptyInput("fewer than two held-out agents to evaluate");
  bool disjoint = !train_ids.empty();
  for (const auto& s : test_set) disjoint = disjoint && !train_ids.count(s.agent_id);

  const auto report = predictor::evaluate_predictor(artifact, test_set, disjoint);
  const std::filesystem::path out_path = out_arg.empty() ? predictor_dir / "eval.json" : std::filesystem::path(out_arg);
  nlohmann::json j = report;
  j["predictor"] = std::filesystem::absolute(predictor_dir).string();
  j["manifest"] = std::filesystem::absolute(manifest_path).string();
  write_json(out_path, j);
  out << "pearson=" << report.pearson << " mse=" << report.mse << " n=" << test_set.size()
      << " disjoint=" << (disjoint ? "true" : "false") << '\n';
  return 0;
}

struct AgentTrainArgs {
  std::string config;
  std::string out;
  std::string predictor;
  std::optional<std::uint64_t> seed;
  std::uint64_t env_seed = 0;
  std::optional<std::size_t> steps;
  std::optional<double> c3;
  std::size_t eval_envs = 0;
  std::uint64_t eval_seed_base = 2000000;
};

int cmd_agent_train(const AgentTrainArgs& a, std::ostream& out) {
  nlohmann::json j = a.config.empty() ? nlohmann::json::object() : read_json_file(a.config);
  env::GridSpec spec = j.contains("env") ? j.at("env").get<env::GridSpec>() : env::GridSpec{};
  ppo::PpoConfig cfg = j.contains("ppo") ? j.at("ppo").get<ppo::PpoConfig>() : ppo::PpoConfig{};
  spec.seed = a.env_seed;
  if (a.c3) cfg.c3 = *a.c3;

  ppo::TrainOptions opts;
  opts.total_steps = a.steps.value_or(j.value("total_steps", std::size_t{200000}));
  opts.seed = a.seed.value_or(j.value("seed", std::uint64_t{0}));

  std::shared_ptr<const predictor::PredictorArtifact> artifact;
  ppo::GenLossHook hook;
  if (!a.predictor.empty()) {
    artifact = std::make_shared<const predictor::PredictorArtifact>(predictor::load_artifact(a.predictor));
    hook.predictor = artifact;
    opts.hook = &hook;
  }

  std::vector<env::GridSpec> eval_specs;
  for (std::size_t i = 0; i < a.eval_envs; ++i) {
    env::GridSpec s = spec;
    s.seed = a.eval_seed_base + i;
    eval_specs.push_back(s);
  }
  if (!eval_specs.empty()) {
    const std::array<std::pair<std::string, forge::SeedRange>, 2> pools = {
        {{"training", {spec.seed, spec.seed + 1}}, {"evaluation", {a.eval_seed_base, a.eval_seed_base + a.eval_envs}}}};
    forge::require_disjoint(pools);
  }
  env::NoiseConfig noise;
  noise.seed = derive_seed(opts.seed, 5);
  if (j.contains("noise")) noise = j.at("noise").get<env::NoiseConfig>();

  const ppo::TrainResult result = ppo::train(spec, cfg, opts);
  const std::filesystem::path dir = a.out;
  std::filesystem::create_directories(dir);
  features::save_snapshot(features::snapshot_from_network(result.policy.net, "policy"), dir / "policy.rlwb");
  ppo::write_checkpoint_csv(dir / "checkpoints.csv", result.log);
  nlohmann::json echo = {{"env", spec},
                         {"ppo", cfg},
                         {"total_steps", opts.total_steps},
                         {"seed", opts.seed},
                         {"predictor", a.predictor.empty() ? nlohmann::json() : nlohmann::json(a.predictor)},
                         {"updates", result.updates}};
  if (!eval_specs.empty()) {
    const double zeta = forge::compute_zeta(result.policy, eval_specs, noise);
    echo["zeta"] = zeta;
    echo["noise"] = noise;
    echo["eval_seeds"] = {a.eval_seed_base, a.eval_seed_base + a.eval_envs};
    out << "zeta=" << zeta << '\n';
  }
  write_json(dir / "config.json", echo);
  out << "trained " << result.updates << " updates (" << opts.total_steps << " steps) into " << dir.string() << '\n';
  return 0;
}

int cmd_compare(const std::string& config_path, const std::string& predictor_arg, const std::filesystem::path& out_dir,
                std::optional<int> workers, std::optional<std::uint64_t> seed, std::ostream& out,
                std::ostream& err) {
  PipelineConfig pcfg = load_pipeline(config_path, "compare");
  apply_seed(pcfg, seed);
  harness::CompareConfig cfg = pcfg.compare;
  if (!predictor_arg.empty()) cfg.predictor_path = predictor_arg;
  if (cfg.predictor_path.empty()) throw UsageError("--predictor is required");
  if (workers) cfg.workers = *workers;

  const nlohmann::json meta = read_predictor_meta(cfg.predictor_path);
  const nlohmann::json prov = meta.value("provenance", nlohmann::json::object());
  auto pool = [&](const char* key) -> std::optional<forge::SeedRange> {
    if (!prov.contains(key)) return std::nullopt;
    return forge::SeedRange{prov.at(key).at(0).get<std::uint64_t>(), prov.at(key).at(1).get<std::uint64_t>()};
  };
  if (!cfg.forge_train_seeds) cfg.forge_train_seeds = pool("forge_train_seeds");
  if (!cfg.forge_eval_seeds) cfg.forge_eval_seeds = pool("forge_eval_seeds");
  cfg.validate();

  auto artifact = std::make_shared<const predictor::PredictorArtifact>(predictor::load_artifact(cfg.predictor_path));
  std::size_t done = 0;
  const auto result = harness::compare(cfg, artifact, [&](const harness::AgentRun& r) {
    ++done;
    err << "[" << done << "/" << 2 * cfg.n_agents << "] " << harness::to_string(r.arm) << " agent " << r.index
        << " final zeta=" << r.zeta_curve().back().second << '\n';
  });
  harness::write_compare_outputs(result, cfg, out_dir);
  const auto& t = result.final_sign_test;
  out << "final step " << result.final_step << ": standard=" << result.final_mean_standard
      << " upgraded=" << result.final_mean_upgraded << "; sign test wins=" << t.wins << " losses=" << t.losses
      << " ties=" << t.ties << " p=" << t.p_value << '\n';
  return 0;
}

int cmd_verify(const std::filesystem::path& manifest_path, std::ostream& out) {
  const auto m = forge::verify_manifest(manifest_path);
  std::size_t ok = 0;
  for (const auto& r : m.records) ok += r.ok() ? 1 : 0;
  out << "ok: " << ok << " agents verified (" << m.records.size() - ok << " recorded failures)\n";
  return 0;
}

}  // namespace

int run_subcommand(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Generalizability prediction for PPO agents"};
  app.name(argc > 0 ? std::filesystem::path(argv[0]).filename().string() : "genpred");
  app.require_subcommand(1);

  std::string config, out_path, manifest, predictor_dir, arch = "dnn";
  std::optional<int> workers;
  std::optional<std::uint64_t> seed;
  std::optional<double> threshold;
  double test_fraction = 0.2;
  AgentTrainArgs agent;

  auto* forge_cmd = app.add_subcommand("forge", "Train and label a dataset of agents");
  forge_cmd->add_option("--config", config, "Forge or pipeline config (JSON)")->required();
  forge_cmd->add_option("--out", out_path, "Output directory")->required();
  forge_cmd->add_option("--workers", workers, "Worker threads");
  forge_cmd->add_option("--seed", seed, "Base seed");

  auto* feat_cmd = app.add_subcommand("features", "Extract weight statistics and select features");
  feat_cmd->add_option("--manifest", manifest, "Dataset manifest")->required();
  feat_cmd->add_option("--out", out_path, "Output directory")->required();
  feat_cmd->add_option("--threshold", threshold, "Minimum |pearson| to keep a feature");

  auto* ptrain_cmd = app.add_subcommand("predict-train", "Train a generalizability predictor");
  ptrain_cmd->add_option("--manifest", manifest, "Dataset manifest")->required();
  ptrain_cmd->add_option("--out", out_path, "Artifact directory")->required();
  ptrain_cmd->add_option("--arch", arch, "dnn or cnn")->check(CLI::IsMember({"dnn", "cnn"}));
  ptrain_cmd->add_option("--config", config, "Predictor or pipeline config (JSON)");
  ptrain_cmd->add_option("--seed", seed, "Base seed");
  ptrain_cmd->add_option("--threshold", threshold, "Minimum |pearson| to keep a feature");
  ptrain_cmd->add_option("--test-fraction", test_fraction, "Held-out fraction of agents")->check(CLI::Range(0.0, 0.9));

  auto* peval_cmd = app.add_subcommand("predict-eval", "Evaluate a predictor on held-out agents");
  peval_cmd->add_option("--predictor", predictor_dir, "Artifact directory")->required();
  peval_cmd->add_option("--manifest", manifest, "Dataset manifest (defaults to the training dataset)");
  peval_cmd->add_option("--out", out_path, "Report path (JSON)");

  auto* agent_cmd = app.add_subcommand("agent-train", "Train one PPO agent, optionally with a frozen predictor");
  agent_cmd->add_option("--out", agent.out, "Output directory")->required();
  agent_cmd->add_option("--config", agent.config, "JSON with optional env, ppo, noise, total_steps, seed");
  agent_cmd->add_option("--predictor", agent.predictor, "Predictor artifact for the upgraded loss");
  agent_cmd->add_option("--seed", agent.seed, "Trainer seed");
  agent_cmd->add_option("--env-seed", agent.env_seed, "Training environment seed");
  agent_cmd->add_option("--steps", agent.steps, "Environment steps");
  agent_cmd->add_option("--c3", agent.c3, "Generalization loss weight");
  agent_cmd->add_option("--eval-envs", agent.eval_envs, "Number of never-seen evaluation environments");
  agent_cmd->add_option("--eval-seed-base", agent.eval_seed_base, "First evaluation seed");

  auto* cmp_cmd = app.add_subcommand("compare", "Paired standard vs upgraded PPO comparison");
  cmp_cmd->add_option("--config", config, "Compare or pipeline config (JSON)");
  cmp_cmd->add_option("--predictor", predictor_dir, "Predictor artifact directory");
  cmp_cmd->add_option("--out", out_path, "Output directory")->required();
  cmp_cmd->add_option("--workers", workers, "Worker threads");
  cmp_cmd->add_option("--seed", seed, "Base seed");

  auto* verify_cmd = app.add_subcommand("verify", "Re-check a dataset manifest and its weight files");
  verify_cmd->add_option("--manifest", manifest, "Dataset manifest")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n" << app.help();
    return 2;
  }

  try {
    if (*forge_cmd) return cmd_forge(config, out_path, workers, seed, out, err);
    if (*feat_cmd) return cmd_features(manifest, out_path, threshold, out);
    if (*ptrain_cmd)
      return cmd_predict_train(manifest, arch, out_path, config, seed, threshold, test_fraction, out);
    if (*peval_cmd) return cmd_predict_eval(predictor_dir, manifest, out_path, out);
    if (*agent_cmd) return cmd_agent_train(agent, out);
    if (*cmp_cmd) return cmd_compare(config, predictor_dir, out_path, workers, seed, out, err);
    if (*verify_cmd) return cmd_verify(manifest, out);
  } catch (const UsageError& e) {
    err << e.what() << "\n\n" << app.help();
    return 2;
  } catch (const std::exception& e) {
    err << e.what() << '\n';
    return 1;
  }
  return 2;
}

int run_subcommand(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  std::vector<const char*> argv;
  argv.push_back("genpred");
  for (const auto& a : args) argv.push_back(a.c_str());
  return run_subcommand(static_cast<int>(argv.size()), argv.data(), out, err);
}

}  // namespace genpred::cli
