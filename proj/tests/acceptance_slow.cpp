// Criteria 8-11: the scaled-down experiments. Forged datasets and comparison
// runs are cached under the work directory and reused when their config
// matches.
#include <algorithm>
#include <chrono>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>

#include "acceptance.hpp"
#include "genpred/cli.hpp"
#include "genpred/errors.hpp"
#include "genpred/forge.hpp"
#include "genpred/harness.hpp"

using namespace genpred;

namespace genpred::acceptance {
namespace {

constexpr std::array<std::uint64_t, 3> kPinnedSeeds = {1, 2, 3};

cli::PipelineConfig pinned_config() {
  cli::PipelineConfig c;
  c.seed = 2024;
  c.env = env::GridSpec::with_defaults(7, 7, 1, 0);
  c.forge.n_agents = 200;
  c.forge.step_tiers = {10000, 50000, 200000};
  c.forge.n_eval_envs = 100;
  c.predictor.epochs = 500;
  c.propagate();
  return c;
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

double elapsed_minutes(std::chrono::steady_clock::time_point since) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - since).count() / 60.0;
}

nlohmann::json comparable(const forge::ForgeConfig& c) {
  nlohmann::json j = c;
  j.erase("workers");
  return j;
}

struct Dataset {
  forge::DatasetManifest manifest;
  std::vector<predictor::LabeledSnapshot> agents;
  std::filesystem::path manifest_path;
  double minutes = 0.0;
  bool reused = false;
};

Dataset obtain_dataset(const cli::PipelineConfig& cfg, const SlowOptions& opt) {
  Dataset d;
  const auto dir = opt.work_dir / "dataset";
  d.manifest_path = dir / "manifest.json";
  if (std::filesystem::exists(d.manifest_path)) {
    try {
      const auto m = forge::verify_manifest(d.manifest_path);
      if (comparable(m.config) == comparable(cfg.forge)) {
        d.manifest = m;
        d.reused = true;
        for (const auto& r : m.records) d.minutes += r.wall_clock_seconds / 60.0;
      }
    } catch (const std::exception& e) {
      std::cerr << "cached dataset rejected: " << e.what() << '\n';
    }
  }
  if (!d.reused) {
    std::filesystem::remove_all(dir);
    forge::ForgeConfig fc = cfg.forge;
    fc.workers = opt.workers;
    std::size_t done = 0;
    const auto start = std::chrono::steady_clock::now();
    d.manifest = forge::forge(fc, dir, [&](const forge::AgentRecord& r) {
      std::cerr << "forge [" << ++done << "/" << fc.n_agents << "] " << r.agent_id << " steps=" << r.steps
                << " zeta=" << r.zeta << '\n';
    });
    d.minutes = elapsed_minutes(start) * opt.workers;
  }
  d.agents = cli::load_dataset(d.manifest_path);
  return d;
}

Verdict score_spread(const Dataset& d) {
  std::vector<double> z;
  for (const auto& a : d.agents) z.push_back(a.label);
  if (z.empty()) return {false, "no successfully forged agents"};
  std::sort(z.begin(), z.end());
  const auto above = std::count_if(z.begin(), z.end(), [](double v) { return v > 0.5; });
  const auto below = std::count_if(z.begin(), z.end(), [](double v) { return v < 0.1; });
  const bool ok = z.front() < 0.1 && z.back() > 0.5;
  return {ok, std::to_string(z.size()) + " agents: min=" + fmt("%.3f", z.front()) + " median=" +
                  fmt("%.3f", z[z.size() / 2]) + " max=" + fmt("%.3f", z.back()) + "; " + std::to_string(below) +
                  " below 0.1, " + std::to_string(above) + " above 0.5 (need min < 0.1 and max > 0.5)" +
                  (d.reused ? "; dataset reused from cache" : "")};
}

Verdict predictor_fidelity(const Dataset& d, const cli::PipelineConfig& cfg, predictor::Architecture arch,
                           double threshold, std::optional<predictor::PredictorArtifact>* keep) {
  std::string detail;
  bool ok = true;
  const auto start = std::chrono::steady_clock::now();
  for (std::uint64_t s : kPinnedSeeds) {
    predictor::TrainHyper h = cfg.predictor;
    h.seed = s;
    try {
      const auto run = cli::train_and_evaluate(d.agents, arch, h, cfg.selection_threshold, 0.2);
      const double r = run.report.pearson;
      ok = ok && r >= threshold;
      detail += (detail.empty() ? "" : ", ") + std::string("seed ") + std::to_string(s) + ": r=" + fmt("%.3f", r) +
                " (train " + std::to_string(run.train_ids.size()) + "/test " + std::to_string(run.test_ids.size()) +
                ")";
      if (keep && s == kPinnedSeeds.front()) *keep = run.artifact;
    } catch (const std::exception& e) {
      ok = false;
      detail += (detail.empty() ? "" : ", ") + std::string("seed ") + std::to_string(s) + ": " + e.what();
    }
  }
  return {ok, "held-out pearson " + detail + "; need >= " + fmt("%.1f", threshold) + " for every seed; " +
                  fmt("%.1f", elapsed_minutes(start)) + " min"};
}

std::string parameter_hash(const predictor::PredictorArtifact& a) {
  std::string bytes;
  for (const auto& s : a.parameter_spans())
    bytes.append(reinterpret_cast<const char*>(s.data()), s.size() * sizeof(double));
  return forge::sha256_hex(bytes);
}

nlohmann::json runs_to_json(const std::vector<harness::AgentRun>& runs) {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& r : runs)
    out.push_back({{"arm", harness::to_string(r.arm)},
                   {"index", r.index},
                   {"env_seed", r.env_seed},
                   {"trainer_seed", r.trainer_seed},
                   {"curve", r.zeta_curve()}});
  return out;
}

std::vector<harness::AgentRun> runs_from_json(const nlohmann::json& j) {
  std::vector<harness::AgentRun> runs;
  for (const auto& r : j) {
    harness::AgentRun run;
    run.arm = r.at("arm") == "upgraded" ? harness::Arm::Upgraded : harness::Arm::Standard;
    run.index = r.at("index");
    run.env_seed = r.at("env_seed");
    run.trainer_seed = r.at("trainer_seed");
    for (const auto& [step, z] : r.at("curve").get<std::vector<std::pair<std::size_t, double>>>()) {
      ppo::CheckpointRow row;
      row.step = step;
      row.zeta_eval = z;
      run.log.push_back(row);
    }
    runs.push_back(std::move(run));
  }
  return runs;
}

Verdict upgraded_benefit(const cli::PipelineConfig& cfg, const Dataset& d,
                         const std::optional<predictor::PredictorArtifact>& dnn, const SlowOptions& opt) {
  if (!dnn) return {false, "no DNN predictor available from criterion 8"};
  const auto artifact = std::make_shared<const predictor::PredictorArtifact>(*dnn);
  predictor::save_artifact(*artifact, opt.work_dir / "predictor_dnn",
                           {{"manifest", std::filesystem::absolute(d.manifest_path).string()},
                            {"forge_train_seeds", {d.manifest.config.train_seeds().begin, d.manifest.config.train_seeds().end}},
                            {"forge_eval_seeds", {d.manifest.config.eval_seeds().begin, d.manifest.config.eval_seeds().end}}});
  const std::string phash = parameter_hash(*artifact);

  bool ok = true;
  std::string detail;
  double minutes = 0.0;
  for (std::uint64_t s : kPinnedSeeds) {
    harness::CompareConfig c = cfg.compare;
    c.seed = derive_seed(cfg.compare.seed, s);
    c.workers = opt.workers;
    c.predictor_path = (opt.work_dir / "predictor_dnn").string();
    c.forge_train_seeds = d.manifest.config.train_seeds();
    c.forge_eval_seeds = d.manifest.config.eval_seeds();
    nlohmann::json key = c;
    key.erase("workers");
    key.erase("predictor_path");
    key["predictor_hash"] = phash;

    const auto dir = opt.work_dir / ("compare_seed" + std::to_string(s));
    const auto cache = dir / "runs.json";
    harness::CompareResult result;
    bool reused = false;
    if (std::filesystem::exists(cache)) {
      std::ifstream in(cache);
      const auto j = nlohmann::json::parse(in, nullptr, false);
      if (!j.is_discarded() && j.value("key", nlohmann::json()) == key) {
        result.runs = runs_from_json(j.at("runs"));
        minutes += j.value("minutes", 0.0);
        reused = true;
      }
    }
    if (!reused) {
      const auto start = std::chrono::steady_clock::now();
      std::size_t done = 0;
      result = harness::compare(c, artifact, [&](const harness::AgentRun& r) {
        std::cerr << "compare seed " << s << " [" << ++done << "/" << 2 * c.n_agents << "] "
                  << harness::to_string(r.arm) << " agent " << r.index
                  << " final zeta=" << r.zeta_curve().back().second << '\n';
      });
      const double m = elapsed_minutes(start) * opt.workers;
      minutes += m;
      std::filesystem::create_directories(dir);
      std::ofstream(cache) << nlohmann::json{{"key", key}, {"minutes", m}, {"runs", runs_to_json(result.runs)}}.dump();
    }
    result.points = harness::aggregate(result.runs);
    result.final_step = c.checkpoints().back();
    std::vector<double> up(c.n_agents), st(c.n_agents);
    for (const auto& r : result.runs) (r.arm == harness::Arm::Upgraded ? up : st)[r.index] = r.zeta_curve().back().second;
    result.final_sign_test = harness::sign_test(up, st);
    for (const auto& p : result.points)
      if (p.step == result.final_step)
        (p.arm == harness::Arm::Standard ? result.final_mean_standard : result.final_mean_upgraded) = p.mean_zeta;
    harness::write_compare_outputs(result, c, dir);

    const auto& t = result.final_sign_test;
    const bool seed_ok = result.final_mean_upgraded >= result.final_mean_standard && t.wins >= 6;
    ok = ok && seed_ok;
    detail += (detail.empty() ? "" : "; ") + std::string("seed ") + std::to_string(s) + ": upgraded=" +
              fmt("%.3f", result.final_mean_upgraded) + " standard=" + fmt("%.3f", result.final_mean_standard) +
              " wins=" + std::to_string(t.wins) + " losses=" + std::to_string(t.losses) + " ties=" +
              std::to_string(t.ties) + (reused ? " (cached)" : "");
  }
  return {ok, detail + "; need upgraded >= standard and >= 6 wins for every seed; " + fmt("%.0f", minutes) +
                  " CPU-min"};
}

}  // namespace

void run_slow_criteria(Reporter& reporter, const SlowOptions& opt) {
  cli::PipelineConfig cfg = pinned_config();
  if (!opt.config_path.empty()) cfg = cli::read_json_file(opt.config_path).get<cli::PipelineConfig>();
  cfg.validate();
  std::filesystem::create_directories(opt.work_dir);
  std::ofstream(opt.work_dir / "pipeline_config.json") << nlohmann::json(cfg).dump(2) << '\n';

  std::optional<Dataset> data;
  std::string dataset_error;
  try {
    data = obtain_dataset(cfg, opt);
  } catch (const std::exception& e) {
    dataset_error = e.what();
  }
  auto need_data = [&](const std::function<Verdict()>& body) {
    return [&, body]() -> Verdict {
      if (!data) return {false, "dataset unavailable: " + dataset_error};
      return body();
    };
  };

  std::optional<predictor::PredictorArtifact> dnn;
  reporter.run(8, "predictor fidelity", need_data([&] {
                 return predictor_fidelity(*data, cfg, predictor::Architecture::Dnn, 0.5, &dnn);
               }));
  reporter.run(9, "CNN sanity", need_data([&] {
                 return predictor_fidelity(*data, cfg, predictor::Architecture::Cnn, 0.4, nullptr);
               }));
  reporter.run(10, "upgraded PPO benefit", need_data([&] { return upgraded_benefit(cfg, *data, dnn, opt); }));
  reporter.run(11, "score spread", need_data([&] {
                 Verdict v = score_spread(*data);
                 v.detail += "; forging took " + fmt("%.0f", data->minutes) + " CPU-min";
                 return v;
               }));
}

}  // namespace genpred::acceptance
