#include "genpred/harness.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <mutex>
#include <sstream>

#include "genpred/errors.hpp"
#include "genpred/rng.hpp"

namespace genpred::harness {

std::string to_string(Arm arm) { return arm == Arm::Standard ? "standard" : "upgraded"; }

void CompareConfig::validate() const {
  if (n_agents < 1) throw InvalidConfig("n_agents must be >= 1");
  if (n_eval_envs < 1) throw InvalidConfig("n_eval_envs must be >= 1");
  if (eval_every < 1) throw InvalidConfig("eval_every must be >= 1");
  if (episodes_per_env < 1) throw InvalidConfig("episodes_per_env must be >= 1");
  if (!(c3 >= 0.0) || !std::isfinite(c3)) throw InvalidConfig("c3 must be finite and >= 0");
  base_spec.validate();
  noise.validate();
  ppo.validate();
  if (total_steps < static_cast<std::size_t>(ppo.n_steps)) throw InvalidConfig("total_steps must be at least n_steps");
  check_seed_hygiene(*this);
}

std::vector<std::size_t> CompareConfig::checkpoints() const {
  std::vector<std::size_t> steps;
  for (std::size_t s = 0; s < total_steps; s += eval_every) steps.push_back(s);
  steps.push_back(total_steps);
  return steps;
}

std::vector<env::GridSpec> CompareConfig::eval_specs() const {
  std::vector<env::GridSpec> specs;
  for (std::size_t i = 0; i < n_eval_envs; ++i) {
    env::GridSpec s = base_spec;
    s.seed = eval_seed_base + i;
    specs.push_back(s);
  }
  return specs;
}

std::uint64_t CompareConfig::trainer_seed(std::size_t agent) const { return derive_seed(seed, agent); }

namespace {

nlohmann::json range_json(const std::optional<forge::SeedRange>& r) {
  if (!r) return nullptr;
  return nlohmann::json::array({r->begin, r->end});
}

std::optional<forge::SeedRange> range_from(const nlohmann::json& j, const char* key) {
  if (!j.contains(key) || j.at(key).is_null()) return std::nullopt;
  const auto& a = j.at(key);
  return forge::SeedRange{a.at(0).get<std::uint64_t>(), a.at(1).get<std::uint64_t>()};
}

}  // namespace

void to_json(nlohmann::json& j, const CompareConfig& c) {
  j = nlohmann::json{{"n_agents", c.n_agents},
                     {"total_steps", c.total_steps},
                     {"eval_every", c.eval_every},
                     {"n_eval_envs", c.n_eval_envs},
                     {"eval_seed_base", c.eval_seed_base},
                     {"train_seed_base", c.train_seed_base},
                     {"seed", c.seed},
                     {"base_spec", c.base_spec},
                     {"noise", c.noise},
                     {"episodes_per_env", c.episodes_per_env},
                     {"c3", c.c3},
                     {"predictor_path", c.predictor_path},
                     {"ppo", c.ppo},
                     {"workers", c.workers},
                     {"forge_train_seeds", range_json(c.forge_train_seeds)},
                     {"forge_eval_seeds", range_json(c.forge_eval_seeds)}};
}

void from_json(const nlohmann::json& j, CompareConfig& c) {
  const CompareConfig d;
  c.n_agents = j.value("n_agents", d.n_agents);
  c.total_steps = j.value("total_steps", d.total_steps);
  c.eval_every = j.value("eval_every", d.eval_every);
  c.n_eval_envs = j.value("n_eval_envs", d.n_eval_envs);
  c.eval_seed_base = j.value("eval_seed_base", d.eval_seed_base);
  c.train_seed_base = j.value("train_seed_base", d.train_seed_base);
  c.seed = j.value("seed", d.seed);
  c.base_spec = j.contains("base_spec") ? j.at("base_spec").get<env::GridSpec>() : d.base_spec;
  c.noise = j.contains("noise") ? j.at("noise").get<env::NoiseConfig>() : d.noise;
  c.episodes_per_env = j.value("episodes_per_env", d.episodes_per_env);
  c.c3 = j.value("c3", d.c3);
  c.predictor_path = j.value("predictor_path", d.predictor_path);
  c.ppo = j.contains("ppo") ? j.at("ppo").get<ppo::PpoConfig>() : d.ppo;
  c.workers = j.value("workers", d.workers);
  c.forge_train_seeds = range_from(j, "forge_train_seeds");
  c.forge_eval_seeds = range_from(j, "forge_eval_seeds");
}

void check_seed_hygiene(const CompareConfig& config) {
  // Training pools may share seeds with each other; evaluation pools must
  // stay clear of every other pool.
  std::vector<std::pair<std::string, forge::SeedRange>> training = {{"comparison training", config.train_seeds()}};
  if (config.forge_train_seeds) training.emplace_back("dataset training", *config.forge_train_seeds);
  std::vector<std::pair<std::string, forge::SeedRange>> evaluation = {{"comparison evaluation", config.eval_seeds()}};
  if (config.forge_eval_seeds) evaluation.emplace_back("dataset evaluation", *config.forge_eval_seeds);

  forge::require_disjoint(evaluation);
  for (const auto& e : evaluation)
    for (const auto& t : training) {
      const std::array<std::pair<std::string, forge::SeedRange>, 2> pair = {e, t};
      forge::require_disjoint(pair);
    }
}

std::vector<std::pair<std::size_t, double>> AgentRun::zeta_curve() const {
  std::vector<std::pair<std::size_t, double>> curve;
  for (const auto& row : log)
    if (row.zeta_eval) curve.emplace_back(row.step, *row.zeta_eval);
  return curve;
}

SignTest sign_test(std::span<const double> upgraded, std::span<const double> standard) {
  if (upgraded.size() != standard.size()) throw ShapeMismatch("sign test needs paired samples");
  SignTest t;
  for (std::size_t i = 0; i < upgraded.size(); ++i) {
    if (upgraded[i] > standard[i])
      ++t.wins;
    else if (upgraded[i] < standard[i])
      ++t.losses;
    else
      ++t.ties;
  }
  const std::size_t n = t.wins + t.losses;
  if (n == 0) return t;
  const std::size_t k = std::min(t.wins, t.losses);
  double tail = 0.0;
  for (std::size_t i = 0; i <= k; ++i)
    tail += std::exp(std::lgamma(n + 1.0) - std::lgamma(i + 1.0) - std::lgamma(n - i + 1.0) - n * std::log(2.0));
  t.p_value = std::min(1.0, 2.0 * tail);
  return t;
}

std::vector<CurvePoint> aggregate(std::span<const AgentRun> runs) {
  std::map<std::pair<std::size_t, int>, std::vector<double>> groups;
  for (const auto& run : runs)
    for (const auto& [step, zeta] : run.zeta_curve()) groups[{step, static_cast<int>(run.arm)}].push_back(zeta);

  std::vector<CurvePoint> points;
  for (const auto& [key, values] : groups) {
    CurvePoint p;
    p.step = key.first;
    p.arm = static_cast<Arm>(key.second);
    p.n = values.size();
    double sum = 0.0;
    for (double v : values) sum += v;
    p.mean_zeta = sum / static_cast<double>(p.n);
    if (p.n > 1) {
      double ss = 0.0;
      for (double v : values) ss += (v - p.mean_zeta) * (v - p.mean_zeta);
      p.stderr_zeta = std::sqrt(ss / static_cast<double>(p.n - 1)) / std::sqrt(static_cast<double>(p.n));
    } else {
      p.degenerate = true;
    }
    points.push_back(p);
  }
  return points;
}

CompareResult compare(const CompareConfig& config, std::shared_ptr<const predictor::PredictorArtifact> predictor,
                      CompareProgress progress) {
  config.validate();
  ppo::GenLossHook hook{std::move(predictor)};
  hook.validate();

  const std::vector<env::GridSpec> eval_specs = config.eval_specs();
  const std::vector<std::size_t> checkpoints = config.checkpoints();

  std::vector<AgentRun> runs(2 * config.n_agents);
  std::mutex progress_mutex;
  forge::parallel_for(runs.size(), forge::resolve_workers(config.workers), [&](std::size_t job) {
    const std::size_t i = job / 2;
    AgentRun run;
    run.arm = job % 2 == 0 ? Arm::Standard : Arm::Upgraded;
    run.index = i;
    run.env_seed = config.train_seed_base + i;
    run.trainer_seed = config.trainer_seed(i);

    env::GridSpec spec = config.base_spec;
    spec.seed = run.env_seed;
    ppo::PpoConfig cfg = config.ppo;
    ppo::TrainOptions opts;
    opts.total_steps = config.total_steps;
    opts.seed = run.trainer_seed;
    opts.eval_steps = checkpoints;
    opts.evaluate = [&](const ppo::PolicyNet& p) {
      return forge::compute_zeta(p, eval_specs, config.noise, config.episodes_per_env);
    };
    if (run.arm == Arm::Upgraded) {
      cfg.c3 = config.c3;
      opts.hook = &hook;
    } else {
      cfg.c3 = 0.0;
    }
    run.log = ppo::train(spec, cfg, opts).log;
    runs[job] = std::move(run);
    if (progress) {
      std::lock_guard lock(progress_mutex);
      progress(runs[job]);
    }
  });

  CompareResult result;
  result.runs = std::move(runs);
  result.points = aggregate(result.runs);
  result.final_step = checkpoints.back();

  std::vector<double> final_std, final_upg;
  for (const auto& run : result.runs) {
    const auto curve = run.zeta_curve();
    (run.arm == Arm::Standard ? final_std : final_upg).push_back(curve.back().second);
  }
  result.final_sign_test = sign_test(final_upg, final_std);
  for (const auto& p : result.points) {
    if (p.step != result.final_step) continue;
    (p.arm == Arm::Standard ? result.final_mean_standard : result.final_mean_upgraded) = p.mean_zeta;
  }
  return result;
}

double ChartFrame::x(std::size_t step) const {
  if (max_step == min_step) return (kLeft + kRight) / 2.0;
  return kLeft + static_cast<double>(step - min_step) / static_cast<double>(max_step - min_step) * (kRight - kLeft);
}

namespace {

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4f", v);
  return buf;
}

const char* arm_color(Arm arm) { return arm == Arm::Standard ? "#1f77b4" : "#d62728"; }

}  // namespace

std::string render_svg(std::span<const CurvePoint> points) {
  if (points.empty()) throw EmptyInput("no curve points");
  ChartFrame frame;
  frame.min_step = points.front().step;
  frame.max_step = points.front().step;
  for (const auto& p : points) {
    frame.min_step = std::min(frame.min_step, p.step);
    frame.max_step = std::max(frame.max_step, p.step);
  }

  std::ostringstream svg;
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 " << ChartFrame::kWidth << ' ' << ChartFrame::kHeight
      << "\" width=\"" << ChartFrame::kWidth << "\" height=\"" << ChartFrame::kHeight << "\">\n";
  svg << "<rect x=\"0\" y=\"0\" width=\"" << ChartFrame::kWidth << "\" height=\"" << ChartFrame::kHeight
      << "\" fill=\"white\"/>\n";
  svg << "<g stroke=\"#444\" stroke-width=\"1\">\n";
  svg << "<line x1=\"" << fmt(ChartFrame::kLeft) << "\" y1=\"" << fmt(ChartFrame::kBottom) << "\" x2=\""
      << fmt(ChartFrame::kRight) << "\" y2=\"" << fmt(ChartFrame::kBottom) << "\"/>\n";
  svg << "<line x1=\"" << fmt(ChartFrame::kLeft) << "\" y1=\"" << fmt(ChartFrame::kTop) << "\" x2=\""
      << fmt(ChartFrame::kLeft) << "\" y2=\"" << fmt(ChartFrame::kBottom) << "\"/>\n";
  svg << "</g>\n<g font-family=\"sans-serif\" font-size=\"12\" fill=\"#222\">\n";
  for (int t = 0; t <= 4; ++t) {
    const double z = t / 4.0;
    svg << "<text x=\"" << fmt(ChartFrame::kLeft - 8) << "\" y=\"" << fmt(ChartFrame::y(z) + 4)
        << "\" text-anchor=\"end\">" << fmt(z).substr(0, 4) << "</text>\n";
  }
  svg << "<text x=\"" << fmt(ChartFrame::kLeft) << "\" y=\"" << fmt(ChartFrame::kBottom + 20)
      << "\" text-anchor=\"middle\">" << frame.min_step << "</text>\n";
  svg << "<text x=\"" << fmt(ChartFrame::kRight) << "\" y=\"" << fmt(ChartFrame::kBottom + 20)
      << "\" text-anchor=\"middle\">" << frame.max_step << "</text>\n";
  svg << "<text x=\"" << fmt((ChartFrame::kLeft + ChartFrame::kRight) / 2) << "\" y=\""
      << fmt(ChartFrame::kBottom + 40) << "\" text-anchor=\"middle\">environment steps</text>\n";
  svg << "<text x=\"20\" y=\"" << fmt((ChartFrame::kTop + ChartFrame::kBottom) / 2)
      << "\" text-anchor=\"middle\" transform=\"rotate(-90 20 " << fmt((ChartFrame::kTop + ChartFrame::kBottom) / 2)
      << ")\">mean zeta</text>\n</g>\n";

  for (Arm arm : {Arm::Standard, Arm::Upgraded}) {
    std::vector<CurvePoint> series;
    for (const auto& p : points)
      if (p.arm == arm) series.push_back(p);
    if (series.empty()) continue;
    std::sort(series.begin(), series.end(), [](const CurvePoint& a, const CurvePoint& b) { return a.step < b.step; });

    svg << "<polygon class=\"band\" data-arm=\"" << to_string(arm) << "\" fill=\"" << arm_color(arm)
        << "\" fill-opacity=\"0.2\" stroke=\"none\" points=\"";
    for (const auto& p : series) svg << fmt(frame.x(p.step)) << ',' << fmt(ChartFrame::y(p.mean_zeta + p.stderr_zeta)) << ' ';
    for (auto it = series.rbegin(); it != series.rend(); ++it)
      svg << fmt(frame.x(it->step)) << ',' << fmt(ChartFrame::y(it->mean_zeta - it->stderr_zeta))
          << (std::next(it) == series.rend() ? "" : " ");
    svg << "\"/>\n";

    svg << "<polyline class=\"mean\" data-arm=\"" << to_string(arm) << "\" fill=\"none\" stroke=\"" << arm_color(arm)
        << "\" stroke-width=\"2\" points=\"";
    for (std::size_t i = 0; i < series.size(); ++i)
      svg << (i ? " " : "") << fmt(frame.x(series[i].step)) << ',' << fmt(ChartFrame::y(series[i].mean_zeta));
    svg << "\"/>\n";
  }

  const double lx = ChartFrame::kRight - 120;
  svg << "<g font-family=\"sans-serif\" font-size=\"12\">\n";
  int row = 0;
  for (Arm arm : {Arm::Standard, Arm::Upgraded}) {
    const double ly = ChartFrame::kTop + 10 + 18 * row++;
    svg << "<line x1=\"" << fmt(lx) << "\" y1=\"" << fmt(ly) << "\" x2=\"" << fmt(lx + 20) << "\" y2=\"" << fmt(ly)
        << "\" stroke=\"" << arm_color(arm) << "\" stroke-width=\"2\"/>\n";
    svg << "<text x=\"" << fmt(lx + 26) << "\" y=\"" << fmt(ly + 4) << "\">" << to_string(arm) << " PPO</text>\n";
  }
  svg << "</g>\n</svg>\n";
  return svg.str();
}

void emit_report(std::span<const CurvePoint> points, const std::filesystem::path& out_dir,
                 const std::vector<std::string>& metadata) {
  if (points.empty()) throw EmptyInput("no curve points");
  std::filesystem::create_directories(out_dir);

  std::vector<CurvePoint> sorted(points.begin(), points.end());
  std::sort(sorted.begin(), sorted.end(), [](const CurvePoint& a, const CurvePoint& b) {
    return a.step != b.step ? a.step < b.step : a.arm < b.arm;
  });

  std::ofstream csv(out_dir / "curves.csv");
  if (!csv) throw Error("cannot write " + (out_dir / "curves.csv").string());
  for (const auto& line : metadata) csv << "# " << line << '\n';
  for (const auto& p : sorted)
    if (p.degenerate) {
      csv << "# stderr is 0 by convention: a single agent per arm\n";
      break;
    }
  csv << "step,arm,mean_zeta,stderr,n\n";
  char buf[128];
  for (const auto& p : sorted) {
    std::snprintf(buf, sizeof buf, "%zu,%s,%.17g,%.17g,%zu\n", p.step, to_string(p.arm).c_str(), p.mean_zeta,
                  p.stderr_zeta, p.n);
    csv << buf;
  }

  std::ofstream svg(out_dir / "curves.svg");
  if (!svg) throw Error("cannot write " + (out_dir / "curves.svg").string());
  svg << render_svg(sorted);
}

void write_compare_outputs(const CompareResult& result, const CompareConfig& config,
                           const std::filesystem::path& out_dir) {
  std::vector<std::string> metadata;
  metadata.push_back("config: " + nlohmann::json(config).dump());
  const SignTest& t = result.final_sign_test;
  char buf[256];
  std::snprintf(buf, sizeof buf, "sign_test step=%zu wins=%zu losses=%zu ties=%zu p=%.6g", result.final_step, t.wins,
                t.losses, t.ties, t.p_value);
  metadata.emplace_back(buf);
  emit_report(result.points, out_dir, metadata);

  const auto per_agent = out_dir / "per_agent";
  std::filesystem::create_directories(per_agent);
  for (const auto& run : result.runs) {
    std::snprintf(buf, sizeof buf, "%s_agent_%03zu.csv", to_string(run.arm).c_str(), run.index);
    ppo::write_checkpoint_csv(per_agent / buf, run.log);
  }
  std::ofstream echo(out_dir / "config.json");
  echo << nlohmann::json(config).dump(2) << '\n';
}

}  // namespace genpred::harness
