#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "kivla/chunk.hpp"

namespace kivla::env {

constexpr int kNumColors = 4;
constexpr int kNumShapes = 4;
constexpr int kNumReceptacleNames = 4;
constexpr int kStateDim = 3;   // gripper x, gripper y, holding flag
constexpr int kActionDim = 3;  // velocity x, velocity y, grip command
constexpr double kStepDelta = 0.5;
constexpr double kReach = 0.5;
constexpr int kStepBudget = 200;

const char* color_name(int c);
const char* shape_name(int s);
const char* receptacle_name(int r);

// Color-shape combos excluded from action data (but present in captions).
bool is_holdout_combo(int color, int shape);

struct Object {
    int color = 0;
    int shape = 0;
    double x = 0, y = 0;
};

struct Receptacle {
    int name = 0;
    double x = 0, y = 0;
};

struct Scene {
    int grid = 8;
    std::vector<Object> objects;
    std::vector<Receptacle> receptacles;
    uint64_t seed = 0;
};

struct Instruction {
    int color = 0;
    int shape = 0;
    int receptacle = 0;

    std::vector<int> tokens() const;  // "put the <color> <shape> in the <receptacle>"
    static Instruction from_tokens(const std::vector<int>& toks);
};

struct EnvState {
    double x = 0, y = 0;
    int holding = -1;  // object index or -1
    int t = 0;
};

enum class Difficulty { Easy, Ambiguous, AmbiguousOod };

struct ResetOut {
    Scene scene;
    EnvState state;
    Instruction instruction;
};

ResetOut reset(uint64_t seed, Difficulty difficulty);

struct StepOut {
    bool done = false;
    bool success = false;
    int picked = -1;             // object picked this step, if any
    int dropped = -1;            // object dropped this step, if any
    int drop_receptacle = -1;
};

// Moves the gripper by velocity * delta, then applies grip semantics. The
// held object tracks the gripper exactly.
StepOut step(Scene& scene, EnvState& state, const Instruction& instr,
             const std::array<double, 3>& action);

// Proportional controller: approach the target, grip, carry to the
// receptacle, release. Velocities are clipped to [-1, 1].
std::array<double, 3> scripted_expert(const EnvState& state, const Scene& scene,
                                      const Instruction& instr);

int target_object(const Scene& scene, const Instruction& instr);  // -1 if none

// Observation: grid x grid x C one-hot channels (colors, shapes, receptacle
// names, held marker), flattened row-major as (cell, channel).
int obs_channels();
std::vector<double> render_observation(const Scene& scene, const EnvState& state);

// Re-renders the observation for a stored training pair: objects sit at their
// initial cells except the instruction target, which tracks the gripper while
// the holding flag is set.
std::vector<double> render_training_obs(const Scene& scene, const Instruction& instr,
                                        const std::vector<double>& q);

std::vector<double> state_q(const EnvState& state);

// --- episodes & datasets ---

struct ChunkPair {
    std::vector<double> state;  // q at chunk start
    std::vector<double> chunk;  // H x d actions, row-major
};

struct EpisodeRecord {
    uint64_t seed = 0;
    Scene scene;  // initial layout
    Instruction instruction;
    bool subtask_annotated = false;
    std::vector<ChunkPair> pairs;
    bool is_caption = false;
    std::vector<int> caption_q;  // question word ids
    std::vector<int> caption_a;  // answer word ids
    std::string split = "train";
};

struct DatasetSpec {
    int count = 2500;
    uint64_t seed = 1;
    double caption_fraction = 0.2;
    double ambiguous_fraction = 0.5;
    double subtask_fraction = 0.5;
    int grid = 8;
    int horizon = 8;
};

std::vector<EpisodeRecord> generate_dataset(const DatasetSpec& spec);

void save_jsonl(const std::string& path, const std::vector<EpisodeRecord>& records);
std::vector<EpisodeRecord> load_jsonl(const std::string& path);

// Subtask phrase for the expert's current phase ("to the red square" /
// "to the bin"), used to annotate combined language-and-action examples.
std::vector<int> subtask_words(const Instruction& instr, bool holding);

// --- closed-loop evaluation ---

struct EvalResult {
    double score = 0;                  // fraction of {reached, grasped, delivered}
    std::optional<bool> followed;      // first grasp matches the instruction
    int first_grasped = -1;
    int steps = 0;
    bool success = false;
};

using Policy =
    std::function<ActionChunk(const Scene&, const EnvState&, const Instruction&, uint64_t)>;

EvalResult evaluate_rollout_one(uint64_t seed, Difficulty difficulty, const Policy& policy,
                                int horizon);
std::vector<EvalResult> evaluate_rollout(const Policy& policy, const std::vector<uint64_t>& seeds,
                                         Difficulty difficulty, int horizon, int workers = 1);

double mean_score(const std::vector<EvalResult>& results);
// followed-instruction rate over episodes where it is defined
double follow_rate(const std::vector<EvalResult>& results);

}  // namespace kivla::env
