#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <vector>

#include <nlohmann/json.hpp>

namespace genpred::env {

inline constexpr int kViewSize = 7;
inline constexpr int kChannels = 3;
inline constexpr int kObsSize = kViewSize * kViewSize * kChannels;  // 147
inline constexpr int kNumActions = 7;

enum class Variant { Crossing, MultiRoom };
enum class CellKind : std::uint8_t { Empty = 0, Wall = 1, Goal = 2 };
enum class Direction : std::uint8_t { N = 0, E = 1, S = 2, W = 3 };

// Action ids: 0 turn left, 1 turn right, 2 forward, 3..6 inert.
enum Action : int { kTurnLeft = 0, kTurnRight = 1, kForward = 2 };

struct GridSpec {
  int width = 9;
  int height = 9;
  int num_walls = 2;
  std::uint64_t seed = 0;
  int max_steps = 4 * 9 * 9;
  Variant variant = Variant::Crossing;

  // Spec with max_steps set to its default 4*width*height.
  static GridSpec with_defaults(int width, int height, int num_walls, std::uint64_t seed,
                                Variant variant = Variant::Crossing);

  // Throws InvalidSpec when an invariant is violated.
  void validate() const;

  bool operator==(const GridSpec&) const = default;
};

void to_json(nlohmann::json& j, const GridSpec& s);
void from_json(const nlohmann::json& j, GridSpec& s);

struct Position {
  int row = 0;
  int col = 0;
  bool operator==(const Position&) const = default;
};

// 7x7x3 egocentric view flattened as ((row * 7) + col) * 3 + channel, where
// row 0 is the farthest row ahead and the agent sits at row 6, column 3.
struct Observation {
  std::array<double, kObsSize> values{};
  bool operator==(const Observation&) const = default;
};

struct StepOutcome {
  Observation obs;
  double reward = 0.0;
  bool done = false;
};

struct NoiseConfig {
  double amplitude = 0.05;
  std::uint64_t seed = 0;

  void validate() const;
};

void to_json(nlohmann::json& j, const NoiseConfig& n);
void from_json(const nlohmann::json& j, NoiseConfig& n);

class GridWorld {
 public:
  // Open grid of the given spec with a border of walls and nothing else. Used
  // by generate() and by tests that need hand-built layouts.
  explicit GridWorld(GridSpec spec);

  const GridSpec& spec() const { return spec_; }
  int width() const { return spec_.width; }
  int height() const { return spec_.height; }

  CellKind cell(int row, int col) const;  // out of bounds reads as Wall
  void set_cell(int row, int col, CellKind kind);

  Position agent_pos() const { return agent_pos_; }
  Direction agent_dir() const { return agent_dir_; }
  int step_count() const { return step_count_; }
  bool done() const { return done_; }

  Position start_pos() const { return start_pos_; }
  Direction start_dir() const { return start_dir_; }
  void set_start(Position pos, Direction dir);

  // Moves the agent without touching the step counter (test scaffolding).
  void place_agent(Position pos, Direction dir);

  // Bit-level comparison of the layout (cells, start, goal).
  bool same_layout(const GridWorld& other) const { return cells_ == other.cells_ && start_pos_ == other.start_pos_; }

  Observation reset();
  StepOutcome step(int action);
  Observation encode_observation() const;

 private:
  std::size_t index(int row, int col) const {
    return static_cast<std::size_t>(row) * static_cast<std::size_t>(spec_.width) +
           static_cast<std::size_t>(col);
  }

  GridSpec spec_;
  std::vector<CellKind> cells_;
  Position start_pos_{1, 1};
  Direction start_dir_ = Direction::E;
  Position agent_pos_{1, 1};
  Direction agent_dir_ = Direction::E;
  int step_count_ = 0;
  bool done_ = false;
};

// Wall layout of a generated world: for divider j, its column (Crossing) or
// row (MultiRoom) and the coordinate of its single gap.
struct WallLayout {
  std::vector<int> positions;
  std::vector<int> gaps;
  bool operator==(const WallLayout&) const = default;
  auto operator<=>(const WallLayout&) const = default;
};

// Number of distinct layouts the generator can produce for a spec's geometry.
std::uint64_t layout_count(const GridSpec& spec);

// Layout chosen for spec.seed. Throws InfeasibleSpec when no layout fits.
WallLayout layout_for(const GridSpec& spec);

GridWorld generate(const GridSpec& spec);

// Shortest start->goal path length in moves over traversable cells, or
// nullopt when unreachable.
std::optional<int> shortest_path_length(const GridWorld& world);

Observation apply_noise(const Observation& obs, const NoiseConfig& cfg, std::uint64_t draw_index);

// Reward on reaching the goal after `steps` actions (1 - 0.9 * steps/max).
double goal_reward(int steps, int max_steps);

}  // namespace genpred::env
