#include "kivla/gridworld.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <thread>

#include "json.hpp"
#include "kivla/rng.hpp"
#include "kivla/vocab.hpp"

namespace kivla::env {

namespace {

const char* kColors[kNumColors] = {"red", "green", "blue", "yellow"};
const char* kShapes[kNumShapes] = {"square", "circle", "triangle", "star"};
const char* kReceptacles[kNumReceptacleNames] = {"bin", "tray", "box", "shelf"};

double dist(double ax, double ay, double bx, double by) {
    return std::hypot(ax - bx, ay - by);
}

}  // namespace

const char* color_name(int c) { return kColors[c]; }
const char* shape_name(int s) { return kShapes[s]; }
const char* receptacle_name(int r) { return kReceptacles[r]; }

bool is_holdout_combo(int color, int shape) { return (color + shape) % 4 == 3; }

std::vector<int> Instruction::tokens() const {
    using namespace kivla::vocab;
    return {word_id("put"), word_id("the"), word_id(kColors[color]), word_id(kShapes[shape]),
            word_id("in"), word_id("the"), word_id(kReceptacles[receptacle])};
}

Instruction Instruction::from_tokens(const std::vector<int>& toks) {
    if (toks.size() != 7) throw std::invalid_argument("instruction: expected 7 tokens");
    auto find = [](const char* const* names, int n, const std::string& w) {
        for (int i = 0; i < n; ++i) {
            if (w == names[i]) return i;
        }
        throw std::invalid_argument("instruction: unknown word '" + w + "'");
    };
    Instruction out;
    out.color = find(kColors, kNumColors, vocab::word(toks[2]));
    out.shape = find(kShapes, kNumShapes, vocab::word(toks[3]));
    out.receptacle = find(kReceptacles, kNumReceptacleNames, vocab::word(toks[6]));
    return out;
}

namespace {

struct Combo {
    int color, shape;
    bool operator==(const Combo&) const = default;
};

std::vector<Combo> combo_pool(bool holdout_only, bool include_holdout) {
    std::vector<Combo> out;
    for (int c = 0; c < kNumColors; ++c) {
        for (int s = 0; s < kNumShapes; ++s) {
            const bool ho = is_holdout_combo(c, s);
            if (holdout_only && !ho) continue;
            if (!holdout_only && !include_holdout && ho) continue;
            out.push_back({c, s});
        }
    }
    return out;
}

// Places a scene: receptacles and objects on distinct cells, unique exact
// combo match for the instruction target. Ambiguous scenes add distractors
// sharing the target's color or shape.
struct SceneGen {
    Scene scene;
    Instruction instruction;
    int target = 0;
};

SceneGen make_scene(Rng& rng, Difficulty difficulty, bool caption_pool) {
    SceneGen out;
    Scene& scene = out.scene;
    scene.grid = 8;

    const bool ood = difficulty == Difficulty::AmbiguousOod;
    const auto target_pool = caption_pool ? combo_pool(false, true) : combo_pool(ood, false);
    const auto distractor_pool = combo_pool(false, caption_pool);

    const Combo target = target_pool[rng.below(target_pool.size())];
    const int n_obj = 2 + static_cast<int>(rng.below(5));  // 2..6

    std::vector<Combo> combos = {target};
    const bool ambiguous = difficulty != Difficulty::Easy;
    auto add_distinct = [&](Combo c) {
        const bool allowed = caption_pool || !is_holdout_combo(c.color, c.shape);
        if (allowed && std::find(combos.begin(), combos.end(), c) == combos.end() &&
            !(c == target)) {
            combos.push_back(c);
            return true;
        }
        return false;
    };
    if (ambiguous) {
        // one distractor sharing the target color, one sharing the shape
        for (int tries = 0; static_cast<int>(combos.size()) < std::min(n_obj, 2) + 1 && tries < 64;
             ++tries) {
            int s = static_cast<int>(rng.below(kNumShapes));
            add_distinct({target.color, s});
        }
        for (int tries = 0; static_cast<int>(combos.size()) < std::min(n_obj, 3) && tries < 64;
             ++tries) {
            int c = static_cast<int>(rng.below(kNumColors));
            add_distinct({c, target.shape});
        }
    }
    for (int tries = 0; static_cast<int>(combos.size()) < n_obj && tries < 256; ++tries) {
        add_distinct(distractor_pool[rng.below(distractor_pool.size())]);
    }

    // distinct cells for receptacles + objects
    std::vector<int> cells(static_cast<size_t>(scene.grid) * scene.grid);
    for (size_t i = 0; i < cells.size(); ++i) cells[i] = static_cast<int>(i);
    for (size_t i = cells.size() - 1; i > 0; --i) {
        std::swap(cells[i], cells[rng.below(i + 1)]);
    }
    size_t cell_i = 0;
    auto next_cell = [&](double& x, double& y) {
        const int c = cells[cell_i++];
        x = c % scene.grid;
        y = c / scene.grid;
    };

    int rec_a = static_cast<int>(rng.below(kNumReceptacleNames));
    int rec_b = (rec_a + 1 + static_cast<int>(rng.below(kNumReceptacleNames - 1))) %
                kNumReceptacleNames;
    for (int name : {rec_a, rec_b}) {
        Receptacle r;
        r.name = name;
        next_cell(r.x, r.y);
        scene.receptacles.push_back(r);
    }
    for (const Combo& c : combos) {
        Object o;
        o.color = c.color;
        o.shape = c.shape;
        next_cell(o.x, o.y);
        scene.objects.push_back(o);
    }

    out.instruction.color = target.color;
    out.instruction.shape = target.shape;
    out.instruction.receptacle = scene.receptacles[rng.below(2)].name;
    out.target = 0;
    return out;
}

// Gripper spawn keeps a cell of clearance from every object so episodes never
// start already solved.
void place_gripper(Rng& rng, const Scene& scene, EnvState& state) {
    for (int tries = 0; tries < 256; ++tries) {
        state.x = rng.uniform(0.0, scene.grid);
        state.y = rng.uniform(0.0, scene.grid);
        bool clear = true;
        for (const auto& o : scene.objects) {
            if (dist(state.x, state.y, o.x, o.y) < 1.0) clear = false;
        }
        if (clear) return;
    }
}

}  // namespace

ResetOut reset(uint64_t seed, Difficulty difficulty) {
    Rng rng(mix_seed(seed, 0x5ce4e));
    ResetOut out;
    SceneGen sg = make_scene(rng, difficulty, false);
    out.scene = sg.scene;
    out.scene.seed = seed;
    out.instruction = sg.instruction;
    place_gripper(rng, out.scene, out.state);
    out.state.holding = -1;
    out.state.t = 0;
    return out;
}

int target_object(const Scene& scene, const Instruction& instr) {
    for (size_t i = 0; i < scene.objects.size(); ++i) {
        if (scene.objects[i].color == instr.color && scene.objects[i].shape == instr.shape) {
            return static_cast<int>(i);
        }
    }
    return -1;
}

StepOut step(Scene& scene, EnvState& state, const Instruction& instr,
             const std::array<double, 3>& action) {
    StepOut out;
    const double vx = std::clamp(action[0], -1.0, 1.0);
    const double vy = std::clamp(action[1], -1.0, 1.0);
    const double grip = std::clamp(action[2], -1.0, 1.0);

    state.x = std::clamp(state.x + kStepDelta * vx, 0.0, static_cast<double>(scene.grid));
    state.y = std::clamp(state.y + kStepDelta * vy, 0.0, static_cast<double>(scene.grid));
    if (state.holding >= 0) {
        scene.objects[state.holding].x = state.x;
        scene.objects[state.holding].y = state.y;
    }

    if (grip > 0.5 && state.holding < 0) {
        int best = -1;
        double best_d = kReach;
        for (size_t i = 0; i < scene.objects.size(); ++i) {
            const double d = dist(state.x, state.y, scene.objects[i].x, scene.objects[i].y);
            if (d < best_d) {
                best_d = d;
                best = static_cast<int>(i);
            }
        }
        if (best >= 0) {
            state.holding = best;
            scene.objects[best].x = state.x;
            scene.objects[best].y = state.y;
            out.picked = best;
        }
    } else if (grip < -0.5 && state.holding >= 0) {
        int best = -1;
        double best_d = kReach;
        for (size_t i = 0; i < scene.receptacles.size(); ++i) {
            const double d =
                dist(state.x, state.y, scene.receptacles[i].x, scene.receptacles[i].y);
            if (d < best_d) {
                best_d = d;
                best = static_cast<int>(i);
            }
        }
        if (best >= 0) {
            out.dropped = state.holding;
            out.drop_receptacle = best;
            scene.objects[state.holding].x = scene.receptacles[best].x;
            scene.objects[state.holding].y = scene.receptacles[best].y;
            state.holding = -1;
            const int tgt = target_object(scene, instr);
            if (out.dropped == tgt && scene.receptacles[best].name == instr.receptacle) {
                out.success = true;
            }
        }
    }

    state.t += 1;
    out.done = out.success || state.t >= kStepBudget;
    return out;
}

std::array<double, 3> scripted_expert(const EnvState& state, const Scene& scene,
                                      const Instruction& instr) {
    const int tgt = target_object(scene, instr);
    if (tgt < 0) throw std::invalid_argument("scripted_expert: instruction not satisfiable");
    double gx, gy;
    bool carrying = state.holding >= 0;
    if (!carrying) {
        gx = scene.objects[tgt].x;
        gy = scene.objects[tgt].y;
    } else {
        int rec = -1;
        for (size_t i = 0; i < scene.receptacles.size(); ++i) {
            if (scene.receptacles[i].name == instr.receptacle) rec = static_cast<int>(i);
        }
        if (rec < 0) throw std::invalid_argument("scripted_expert: receptacle missing");
        gx = scene.receptacles[rec].x;
        gy = scene.receptacles[rec].y;
    }
    const double vx = std::clamp((gx - state.x) / kStepDelta, -1.0, 1.0);
    const double vy = std::clamp((gy - state.y) / kStepDelta, -1.0, 1.0);
    const double nx = state.x + kStepDelta * vx;
    const double ny = state.y + kStepDelta * vy;
    double grip = 0.0;
    if (dist(nx, ny, gx, gy) < 0.45) grip = carrying ? -1.0 : 1.0;
    return {vx, vy, grip};
}

int obs_channels() { return kNumColors + kNumShapes + kNumReceptacleNames + 1; }

namespace {

int cell_index(double v, int grid) {
    return std::clamp(static_cast<int>(std::llround(v)), 0, grid - 1);
}

}  // namespace

std::vector<double> render_observation(const Scene& scene, const EnvState& state) {
    const int c = obs_channels();
    std::vector<double> obs(static_cast<size_t>(scene.grid) * scene.grid * c, 0.0);
    auto at = [&](int x, int y, int ch) -> double& {
        return obs[(static_cast<size_t>(y) * scene.grid + x) * c + ch];
    };
    for (size_t i = 0; i < scene.objects.size(); ++i) {
        const auto& o = scene.objects[i];
        const int x = cell_index(o.x, scene.grid);
        const int y = cell_index(o.y, scene.grid);
        at(x, y, o.color) = 1.0;
        at(x, y, kNumColors + o.shape) = 1.0;
        if (static_cast<int>(i) == state.holding) {
            at(x, y, kNumColors + kNumShapes + kNumReceptacleNames) = 1.0;
        }
    }
    for (const auto& r : scene.receptacles) {
        const int x = cell_index(r.x, scene.grid);
        const int y = cell_index(r.y, scene.grid);
        at(x, y, kNumColors + kNumShapes + r.name) = 1.0;
    }
    return obs;
}

std::vector<double> render_training_obs(const Scene& scene, const Instruction& instr,
                                        const std::vector<double>& q) {
    Scene s = scene;
    EnvState st;
    st.x = q[0];
    st.y = q[1];
    st.holding = -1;
    if (q[2] > 0.5) {
        const int tgt = target_object(s, instr);
        if (tgt >= 0) {
            s.objects[tgt].x = q[0];
            s.objects[tgt].y = q[1];
            st.holding = tgt;
        }
    }
    return render_observation(s, st);
}

std::vector<double> state_q(const EnvState& state) {
    return {state.x, state.y, state.holding >= 0 ? 1.0 : 0.0};
}

std::vector<int> subtask_words(const Instruction& instr, bool holding) {
    using namespace kivla::vocab;
    if (holding) {
        return {word_id("to"), word_id("the"), word_id(kReceptacles[instr.receptacle])};
    }
    return {word_id("to"), word_id("the"), word_id(kColors[instr.color]),
            word_id(kShapes[instr.shape])};
}

namespace {

// Runs the expert and slices the trajectory into overlap-free H-chunks,
// zero-padding the tail.
std::vector<ChunkPair> expert_episode(Scene& scene, EnvState& state, const Instruction& instr,
                                      int horizon, bool* success_out) {
    std::vector<std::vector<double>> states;
    std::vector<std::array<double, 3>> actions;
    bool success = false;
    for (int t = 0; t < kStepBudget; ++t) {
        states.push_back(state_q(state));
        const auto a = scripted_expert(state, scene, instr);
        actions.push_back(a);
        const auto s = step(scene, state, instr, a);
        if (s.done) {
            success = s.success;
            break;
        }
    }
    if (success_out) *success_out = success;
    std::vector<ChunkPair> pairs;
    for (size_t t0 = 0; t0 < actions.size(); t0 += horizon) {
        ChunkPair p;
        p.state = states[t0];
        p.chunk.assign(static_cast<size_t>(horizon) * kActionDim, 0.0);
        for (int k = 0; k < horizon && t0 + k < actions.size(); ++k) {
            for (int j = 0; j < kActionDim; ++j) {
                p.chunk[static_cast<size_t>(k) * kActionDim + j] = actions[t0 + k][j];
            }
        }
        pairs.push_back(std::move(p));
    }
    return pairs;
}

bool fraction_tick(int i, double fraction) {
    return std::floor((i + 1) * fraction) > std::floor(i * fraction);
}

}  // namespace

std::vector<EpisodeRecord> generate_dataset(const DatasetSpec& spec) {
    std::vector<EpisodeRecord> out;
    out.reserve(spec.count);
    int caption_i = 0;
    int action_i = 0;
    for (int i = 0; i < spec.count; ++i) {
        EpisodeRecord rec;
        rec.seed = mix_seed(spec.seed, 0xda7a, i);
        rec.split = "train";
        const bool caption = fraction_tick(i, spec.caption_fraction);
        Rng rng(rec.seed);
        if (caption) {
            rec.is_caption = true;
            SceneGen sg = make_scene(rng, Difficulty::Easy, /*caption_pool=*/true);
            rec.scene = sg.scene;
            rec.scene.seed = rec.seed;
            rec.instruction = sg.instruction;
            const auto& obj = sg.scene.objects[rng.below(sg.scene.objects.size())];
            using namespace kivla::vocab;
            rec.caption_q = {word_id("where"), word_id("is"), word_id("the"),
                             word_id(kColors[obj.color]), word_id(kShapes[obj.shape])};
            rec.caption_a = {word_id("row"), digit_id(static_cast<int>(obj.y)), word_id("col"),
                             digit_id(static_cast<int>(obj.x))};
            ++caption_i;
        } else {
            const bool ambiguous = fraction_tick(action_i, spec.ambiguous_fraction);
            rec.subtask_annotated = fraction_tick(action_i, spec.subtask_fraction);
            SceneGen sg =
                make_scene(rng, ambiguous ? Difficulty::Ambiguous : Difficulty::Easy, false);
            rec.scene = sg.scene;
            rec.scene.seed = rec.seed;
            rec.instruction = sg.instruction;
            Scene live = sg.scene;
            EnvState st;
            place_gripper(rng, live, st);
            bool ok = false;
            rec.pairs = expert_episode(live, st, rec.instruction, spec.horizon, &ok);
            if (!ok) {
                throw std::runtime_error("generate_dataset: expert failed on seed " +
                                         std::to_string(rec.seed));
            }
            ++action_i;
        }
        out.push_back(std::move(rec));
    }
    return out;
}

namespace {

nlohmann::json scene_to_json(const Scene& s) {
    nlohmann::json objs = nlohmann::json::array();
    for (const auto& o : s.objects) objs.push_back({o.color, o.shape, o.x, o.y});
    nlohmann::json recs = nlohmann::json::array();
    for (const auto& r : s.receptacles) recs.push_back({r.name, r.x, r.y});
    return {{"grid", s.grid}, {"objects", objs}, {"receptacles", recs}};
}

Scene scene_from_json(const nlohmann::json& j) {
    Scene s;
    s.grid = j.at("grid").get<int>();
    for (const auto& o : j.at("objects")) {
        s.objects.push_back({o.at(0).get<int>(), o.at(1).get<int>(), o.at(2).get<double>(),
                             o.at(3).get<double>()});
    }
    for (const auto& r : j.at("receptacles")) {
        s.receptacles.push_back(
            {r.at(0).get<int>(), r.at(1).get<double>(), r.at(2).get<double>()});
    }
    return s;
}

}  // namespace

void save_jsonl(const std::string& path, const std::vector<EpisodeRecord>& records) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot write dataset file " + path);
    for (const auto& rec : records) {
        nlohmann::json j;
        j["seed"] = rec.seed;
        j["scene"] = scene_to_json(rec.scene);
        j["instruction"] = {{"tokens", rec.instruction.tokens()},
                            {"semantic", {rec.instruction.color, rec.instruction.shape,
                                          rec.instruction.receptacle}}};
        j["split"] = rec.split;
        if (rec.is_caption) {
            j["caption"] = {{"q", rec.caption_q}, {"a", rec.caption_a}};
        } else {
            nlohmann::json pairs = nlohmann::json::array();
            for (const auto& p : rec.pairs) {
                pairs.push_back({{"state", p.state}, {"chunk", p.chunk}});
            }
            j["pairs"] = pairs;
            j["subtask"] = rec.subtask_annotated;
        }
        f << j.dump() << "\n";
    }
}

std::vector<EpisodeRecord> load_jsonl(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot read dataset file " + path);
    std::vector<EpisodeRecord> out;
    std::string line;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        const auto j = nlohmann::json::parse(line);
        EpisodeRecord rec;
        rec.seed = j.at("seed").get<uint64_t>();
        rec.scene = scene_from_json(j.at("scene"));
        rec.scene.seed = rec.seed;
        const auto sem = j.at("instruction").at("semantic");
        rec.instruction.color = sem.at(0).get<int>();
        rec.instruction.shape = sem.at(1).get<int>();
        rec.instruction.receptacle = sem.at(2).get<int>();
        rec.split = j.at("split").get<std::string>();
        if (j.contains("caption")) {
            rec.is_caption = true;
            rec.caption_q = j.at("caption").at("q").get<std::vector<int>>();
            rec.caption_a = j.at("caption").at("a").get<std::vector<int>>();
        } else {
            rec.subtask_annotated = j.at("subtask").get<bool>();
            for (const auto& p : j.at("pairs")) {
                ChunkPair cp;
                cp.state = p.at("state").get<std::vector<double>>();
                cp.chunk = p.at("chunk").get<std::vector<double>>();
                rec.pairs.push_back(std::move(cp));
            }
        }
        out.push_back(std::move(rec));
    }
    return out;
}

EvalResult evaluate_rollout_one(uint64_t seed, Difficulty difficulty, const Policy& policy,
                                int horizon) {
    ResetOut r = reset(seed, difficulty);
    Scene scene = r.scene;
    EnvState state = r.state;
    const int tgt = target_object(scene, r.instruction);

    EvalResult res;
    bool reached = false, grasped = false, delivered = false;
    ActionChunk chunk;
    int replan = 0;
    for (int t = 0; t < kStepBudget; ++t) {
        if (t % horizon == 0) {
            chunk = policy(scene, state, r.instruction, mix_seed(seed, 0xdec0de, replan++));
        }
        std::array<double, 3> a = {chunk.at(t % horizon, 0), chunk.at(t % horizon, 1),
                                   chunk.at(t % horizon, 2)};
        const StepOut s = step(scene, state, r.instruction, a);
        if (tgt >= 0 && dist(state.x, state.y, scene.objects[tgt].x, scene.objects[tgt].y) < kReach) {
            reached = true;
        }
        if (s.picked >= 0 && res.first_grasped < 0) res.first_grasped = s.picked;
        if (s.picked == tgt) grasped = true;
        if (s.success) delivered = true;
        res.steps = state.t;
        if (s.done) {
            res.success = s.success;
            break;
        }
    }
    res.score = (static_cast<double>(reached) + grasped + delivered) / 3.0;
    if (scene.objects.size() >= 2 && res.first_grasped >= 0) {
        res.followed = res.first_grasped == tgt;
    }
    return res;
}

std::vector<EvalResult> evaluate_rollout(const Policy& policy, const std::vector<uint64_t>& seeds,
                                         Difficulty difficulty, int horizon, int workers) {
    std::vector<EvalResult> out(seeds.size());
    if (workers <= 1 || seeds.size() <= 1) {
        for (size_t i = 0; i < seeds.size(); ++i) {
            out[i] = evaluate_rollout_one(seeds[i], difficulty, policy, horizon);
        }
        return out;
    }
    const int w = std::min<int>(workers, static_cast<int>(seeds.size()));
    std::vector<std::thread> threads;
    threads.reserve(w);
    for (int wi = 0; wi < w; ++wi) {
        threads.emplace_back([&, wi] {
            for (size_t i = wi; i < seeds.size(); i += w) {
                out[i] = evaluate_rollout_one(seeds[i], difficulty, policy, horizon);
            }
        });
    }
    for (auto& t : threads) t.join();
    return out;
}

double mean_score(const std::vector<EvalResult>& results) {
    if (results.empty()) return 0.0;
    double s = 0;
    for (const auto& r : results) s += r.score;
    return s / static_cast<double>(results.size());
}

double follow_rate(const std::vector<EvalResult>& results) {
    int defined = 0, followed = 0;
    for (const auto& r : results) {
        if (r.followed.has_value()) {
            ++defined;
            if (*r.followed) ++followed;
        }
    }
    if (defined == 0) return 0.0;
    return static_cast<double>(followed) / defined;
}

}  // namespace kivla::env
