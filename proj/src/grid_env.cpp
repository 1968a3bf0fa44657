#include "genpred/grid_env.hpp"

#include <algorithm>
#include <deque>
#include <numeric>
#include <string>

#include "genpred/errors.hpp"
#include "genpred/rng.hpp"

namespace genpred::env {

namespace {

constexpr std::array<Position, 4> kDirVec = {{{-1, 0}, {0, 1}, {1, 0}, {0, -1}}};

Direction turn_right(Direction d) { return static_cast<Direction>((static_cast<int>(d) + 1) % 4); }
Direction turn_left(Direction d) { return static_cast<Direction>((static_cast<int>(d) + 3) % 4); }

// Binomial coefficient in 128-bit; callers keep arguments small.
unsigned __int128 choose(int n, int k) {
  if (k < 0 || k > n) return 0;
  unsigned __int128 r = 1;
  for (int i = 1; i <= k; ++i) r = r * static_cast<unsigned>(n - k + i) / static_cast<unsigned>(i);
  return r;
}

struct LayoutGeometry {
  int first_pos = 0;    // lowest admissible divider coordinate
  int num_pos = 0;      // admissible divider coordinates
  int gap_first = 0;    // lowest gap coordinate
  int gap_span = 0;     // number of gap coordinates
};

LayoutGeometry geometry(const GridSpec& s) {
  LayoutGeometry g;
  // Dividers keep one free line next to the border on both sides so the start
  // and goal cells are never covered.
  if (s.variant == Variant::Crossing) {
    g.first_pos = 2;
    g.num_pos = s.width - 4;
    g.gap_first = 1;
    g.gap_span = s.height - 2;
  } else {
    g.first_pos = 2;
    g.num_pos = s.height - 4;
    g.gap_first = 1;
    g.gap_span = s.width - 2;
  }
  return g;
}

unsigned __int128 layout_count_wide(const GridSpec& s) {
  const LayoutGeometry g = geometry(s);
  // k dividers over num_pos coordinates with no two adjacent.
  unsigned __int128 positions = choose(g.num_pos - s.num_walls + 1, s.num_walls);
  unsigned __int128 n = positions;
  for (int i = 0; i < s.num_walls; ++i) {
    n *= static_cast<unsigned>(g.gap_span);
    if (n > (static_cast<unsigned __int128>(1) << 62)) return n;
  }
  return n;
}

// Lexicographic unranking of a k-subset of {0..n-1}.
std::vector<int> unrank_combination(int n, int k, std::uint64_t rank) {
  std::vector<int> out;
  out.reserve(static_cast<std::size_t>(k));
  int next = 0;
  for (int slot = 0; slot < k; ++slot) {
    for (int v = next; v < n; ++v) {
      auto with_v = static_cast<std::uint64_t>(choose(n - v - 1, k - slot - 1));
      if (rank < with_v) {
        out.push_back(v);
        next = v + 1;
        break;
      }
      rank -= with_v;
    }
  }
  return out;
}

}  // namespace

GridSpec GridSpec::with_defaults(int width, int height, int num_walls, std::uint64_t seed,
                                 Variant variant) {
  GridSpec s;
  s.width = width;
  s.height = height;
  s.num_walls = num_walls;
  s.seed = seed;
  s.max_steps = 4 * width * height;
  s.variant = variant;
  return s;
}

void GridSpec::validate() const {
  if (width < 5 || height < 5)
    throw InvalidSpec("grid must be at least 5x5, got " + std::to_string(width) + "x" +
                      std::to_string(height));
  if (num_walls < 1) throw InvalidSpec("num_walls must be >= 1");
  if (max_steps < width * height)
    throw InvalidSpec("max_steps must be >= width*height (" + std::to_string(width * height) + ")");
}

void to_json(nlohmann::json& j, const GridSpec& s) {
  j = nlohmann::json{{"width", s.width},
                     {"height", s.height},
                     {"num_walls", s.num_walls},
                     {"seed", s.seed},
                     {"max_steps", s.max_steps},
                     {"variant", s.variant == Variant::Crossing ? "Crossing" : "MultiRoom"}};
}

void from_json(const nlohmann::json& j, GridSpec& s) {
  GridSpec d;
  s.width = j.value("width", d.width);
  s.height = j.value("height", d.height);
  s.num_walls = j.value("num_walls", d.num_walls);
  s.seed = j.value("seed", d.seed);
  s.max_steps = j.value("max_steps", 4 * s.width * s.height);
  const std::string variant = j.value("variant", std::string("Crossing"));
  if (variant == "Crossing")
    s.variant = Variant::Crossing;
  else if (variant == "MultiRoom")
    s.variant = Variant::MultiRoom;
  else
    throw InvalidSpec("unknown variant '" + variant + "'");
}

void NoiseConfig::validate() const {
  if (!(amplitude >= 0.0 && amplitude < 0.5))
    throw InvalidSpec("noise amplitude must lie in [0, 0.5)");
}

void to_json(nlohmann::json& j, const NoiseConfig& n) {
  j = nlohmann::json{{"amplitude", n.amplitude}, {"seed", n.seed}};
}

void from_json(const nlohmann::json& j, NoiseConfig& n) {
  n.amplitude = j.value("amplitude", 0.05);
  n.seed = j.value("seed", std::uint64_t{0});
}

GridWorld::GridWorld(GridSpec spec) : spec_(spec) {
  spec_.validate();
  cells_.assign(static_cast<std::size_t>(spec_.width * spec_.height), CellKind::Empty);
  for (int r = 0; r < spec_.height; ++r) {
    for (int c = 0; c < spec_.width; ++c) {
      if (r == 0 || c == 0 || r == spec_.height - 1 || c == spec_.width - 1)
        cells_[index(r, c)] = CellKind::Wall;
    }
  }
  agent_pos_ = start_pos_;
  agent_dir_ = start_dir_;
}

CellKind GridWorld::cell(int row, int col) const {
  if (row < 0 || col < 0 || row >= spec_.height || col >= spec_.width) return CellKind::Wall;
  return cells_[index(row, col)];
}

void GridWorld::set_cell(int row, int col, CellKind kind) {
  if (row < 0 || col < 0 || row >= spec_.height || col >= spec_.width)
    throw InvalidArgument("cell out of bounds");
  cells_[index(row, col)] = kind;
}

void GridWorld::set_start(Position pos, Direction dir) {
  if (cell(pos.row, pos.col) == CellKind::Wall) throw InvalidArgument("start cell is a wall");
  start_pos_ = pos;
  start_dir_ = dir;
}

void GridWorld::place_agent(Position pos, Direction dir) {
  if (cell(pos.row, pos.col) == CellKind::Wall) throw InvalidArgument("agent cannot stand on a wall");
  agent_pos_ = pos;
  agent_dir_ = dir;
}

Observation GridWorld::reset() {
  agent_pos_ = start_pos_;
  agent_dir_ = start_dir_;
  step_count_ = 0;
  done_ = false;
  return encode_observation();
}

StepOutcome GridWorld::step(int action) {
  if (done_) throw EpisodeFinished("step() called after the episode ended; call reset()");
  if (action < 0 || action >= kNumActions)
    throw InvalidArgument("action id " + std::to_string(action) + " outside 0..6");

  ++step_count_;
  switch (action) {
    case kTurnLeft:
      agent_dir_ = turn_left(agent_dir_);
      break;
    case kTurnRight:
      agent_dir_ = turn_right(agent_dir_);
      break;
    case kForward: {
      const Position d = kDirVec[static_cast<int>(agent_dir_)];
      const Position target{agent_pos_.row + d.row, agent_pos_.col + d.col};
      if (cell(target.row, target.col) != CellKind::Wall) agent_pos_ = target;
      break;
    }
    default:
      break;
  }

  StepOutcome out;
  if (cell(agent_pos_.row, agent_pos_.col) == CellKind::Goal) {
    out.reward = goal_reward(step_count_, spec_.max_steps);
    done_ = true;
  } else if (step_count_ >= spec_.max_steps) {
    done_ = true;
  }
  out.done = done_;
  out.obs = encode_observation();
  return out;
}

Observation GridWorld::encode_observation() const {
  Observation obs;
  const Position fwd = kDirVec[static_cast<int>(agent_dir_)];
  const Position right = kDirVec[static_cast<int>(turn_right(agent_dir_))];
  for (int i = 0; i < kViewSize; ++i) {
    const int ahead = kViewSize - 1 - i;
    for (int j = 0; j < kViewSize; ++j) {
      const int lateral = j - kViewSize / 2;
      const int r = agent_pos_.row + ahead * fwd.row + lateral * right.row;
      const int c = agent_pos_.col + ahead * fwd.col + lateral * right.col;
      const CellKind kind = cell(r, c);
      const std::size_t base = static_cast<std::size_t>((i * kViewSize + j) * kChannels);
      obs.values[base] = static_cast<double>(kind) / 2.0;
      obs.values[base + 1] = kind == CellKind::Wall ? 0.0 : 1.0;
      obs.values[base + 2] = kind == CellKind::Goal ? 1.0 : 0.0;
    }
  }
  return obs;
}

std::uint64_t layout_count(const GridSpec& spec) {
  spec.validate();
  const unsigned __int128 n = layout_count_wide(spec);
  if (n > (static_cast<unsigned __int128>(1) << 62)) throw InvalidSpec("layout space too large");
  return static_cast<std::uint64_t>(n);
}

WallLayout layout_for(const GridSpec& spec) {
  const std::uint64_t n = layout_count(spec);
  if (n == 0)
    throw InfeasibleSpec(std::to_string(spec.num_walls) + " dividers do not fit in a " +
                         std::to_string(spec.width) + "x" + std::to_string(spec.height) + " grid");

  // Seeds are mapped onto layouts by an affine permutation of [0, n): the
  // multiplier is the first value past n/phi that is coprime with n and the
  // offset is mix64(n) mod n. Consecutive seeds therefore never repeat a
  // layout until all n have been used.
  std::uint64_t mult = static_cast<std::uint64_t>(static_cast<double>(n) * 0.6180339887498949) + 1;
  while (std::gcd(mult, n) != 1) ++mult;
  const std::uint64_t offset = mix64(n) % n;
  const unsigned __int128 scrambled =
      (static_cast<unsigned __int128>(spec.seed % n) * mult + offset) % n;
  std::uint64_t idx = static_cast<std::uint64_t>(scrambled);

  const LayoutGeometry g = geometry(spec);
  WallLayout layout;
  layout.gaps.resize(static_cast<std::size_t>(spec.num_walls));
  for (int i = 0; i < spec.num_walls; ++i) {
    layout.gaps[static_cast<std::size_t>(i)] =
        g.gap_first + static_cast<int>(idx % static_cast<std::uint64_t>(g.gap_span));
    idx /= static_cast<std::uint64_t>(g.gap_span);
  }
  // Non-adjacent subsets of num_pos coordinates correspond to plain subsets of
  // num_pos - k + 1 coordinates via a_j = b_j + j.
  const std::vector<int> comb = unrank_combination(g.num_pos - spec.num_walls + 1, spec.num_walls, idx);
  for (std::size_t j = 0; j < comb.size(); ++j)
    layout.positions.push_back(g.first_pos + comb[j] + static_cast<int>(j));
  return layout;
}

GridWorld generate(const GridSpec& spec) {
  const WallLayout layout = layout_for(spec);
  GridWorld world(spec);
  const bool vertical = spec.variant == Variant::Crossing;
  for (std::size_t k = 0; k < layout.positions.size(); ++k) {
    const int line = layout.positions[k];
    const int span = vertical ? spec.height : spec.width;
    for (int t = 1; t < span - 1; ++t) {
      if (t == layout.gaps[k]) continue;
      if (vertical)
        world.set_cell(t, line, CellKind::Wall);
      else
        world.set_cell(line, t, CellKind::Wall);
    }
  }
  world.set_cell(spec.height - 2, spec.width - 2, CellKind::Goal);
  world.set_start({1, 1}, Direction::E);
  world.reset();
  return world;
}

std::optional<int> shortest_path_length(const GridWorld& world) {
  const int h = world.height();
  const int w = world.width();
  std::vector<int> dist(static_cast<std::size_t>(h * w), -1);
  std::deque<Position> queue;
  const Position start = world.start_pos();
  dist[static_cast<std::size_t>(start.row * w + start.col)] = 0;
  queue.push_back(start);
  while (!queue.empty()) {
    const Position p = queue.front();
    queue.pop_front();
    const int d = dist[static_cast<std::size_t>(p.row * w + p.col)];
    if (world.cell(p.row, p.col) == CellKind::Goal) return d;
    for (const Position& step : kDirVec) {
      const Position q{p.row + step.row, p.col + step.col};
      if (world.cell(q.row, q.col) == CellKind::Wall) continue;
      int& dq = dist[static_cast<std::size_t>(q.row * w + q.col)];
      if (dq >= 0) continue;
      dq = d + 1;
      queue.push_back(q);
    }
  }
  return std::nullopt;
}

Observation apply_noise(const Observation& obs, const NoiseConfig& cfg, std::uint64_t draw_index) {
  cfg.validate();
  if (cfg.amplitude == 0.0) return obs;
  SplitMix64 rng(derive_seed(cfg.seed, draw_index));
  Observation out;
  for (std::size_t i = 0; i < obs.values.size(); ++i) {
    const double v = obs.values[i] + rng.uniform(-cfg.amplitude, cfg.amplitude);
    out.values[i] = std::clamp(v, 0.0, 1.0);
  }
  return out;
}

double goal_reward(int steps, int max_steps) {
  return 1.0 - 0.9 * (static_cast<double>(steps) / static_cast<double>(max_steps));
}

}  // namespace genpred::env
