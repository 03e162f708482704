#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "kivla/chunk.hpp"
#include "kivla/codecs.hpp"
#include "kivla/model.hpp"
#include "kivla/objectives.hpp"
#include "kivla/rng.hpp"
#include "kivla/vocab.hpp"

namespace kivla::decode {

enum class Mode { Flow, Ar, Parallel };

inline Mode mode_from_string(const std::string& s) {
    if (s == "flow") return Mode::Flow;
    if (s == "ar") return Mode::Ar;
    if (s == "parallel") return Mode::Parallel;
    throw std::invalid_argument("unknown decode mode '" + s + "'");
}

inline std::string to_string(Mode m) {
    switch (m) {
        case Mode::Flow: return "flow";
        case Mode::Ar: return "ar";
        case Mode::Parallel: return "parallel";
    }
    return "?";
}

struct DecodeResult {
    ActionChunk chunk;
    int forward_passes = 0;
    int tokens = 0;
    bool fallback = false;  // undecodable AR sequence replaced by a zero chunk
};

// x_{k+1} = x_k - delta * v(x_k, k*delta); the predicted flow is omega - a,
// so subtracting it moves from noise toward the action chunk.
using FlowField = std::function<ActionChunk(const ActionChunk& x, double tau)>;

inline ActionChunk euler_integrate_field(const FlowField& field, ActionChunk x, int steps) {
    if (steps < 1) throw std::invalid_argument("euler_integrate: steps must be >= 1");
    const double delta = 1.0 / steps;
    for (int k = 0; k < steps; ++k) {
        const ActionChunk v = field(x, k * delta);
        for (size_t i = 0; i < x.values.size(); ++i) x.values[i] -= delta * v.values[i];
    }
    return x;
}

// softmax sample at the given temperature
inline int sample_logits(const double* logits, int vocab, double temperature, Rng& rng) {
    double m = logits[0];
    for (int c = 1; c < vocab; ++c) m = std::max(m, logits[c]);
    std::vector<double> p(vocab);
    double z = 0;
    for (int c = 0; c < vocab; ++c) {
        p[c] = std::exp((logits[c] - m) / temperature);
        z += p[c];
    }
    double u = rng.uniform01() * z;
    for (int c = 0; c < vocab; ++c) {
        u -= p[c];
        if (u <= 0) return c;
    }
    return vocab - 1;
}

// One forward evaluation given stream inputs; the decoder is written against
// this seam so tests can drive it with oracle logit/flow models.
using ForwardFn =
    std::function<model::ForwardOutput(const model::StreamInputs&, std::optional<double>)>;

template <typename S>
ForwardFn make_model_forward_fn(const model::Params<S>* params, model::ModelConfig cfg,
                                codec::StateEncoding state_enc) {
    return [params, cfg, state_enc](const model::StreamInputs& in, std::optional<double> tau) {
        auto ts = model::build_token_stream(in, cfg, state_enc);
        auto plan = model::build_attention_plan(ts, cfg.variant);
        return model::run_forward(*params, cfg, ts, plan, tau);
    };
}

// Decodes action chunks given the prefix inputs (observation, instruction,
// state). No KV caching in any mode, so the forward-pass accounting stays
// symmetric across modes.
struct Decoder {
    model::ModelConfig cfg;
    codec::ActionCodec action_codec;
    ForwardFn forward_fn;
    int flow_steps = 10;
    double temperature = 0.0;
    int max_ar_tokens = 40;

    bool supports(Mode m) const {
        switch (m) {
            case Mode::Flow: return cfg.has_expert_span();
            case Mode::Ar: return cfg.has_ar_action_span() && !cfg.parallel_ar();
            case Mode::Parallel: return cfg.parallel_ar();
        }
        return false;
    }

    DecodeResult decode(Mode m, const model::StreamInputs& prefix, uint64_t seed) const {
        if (!supports(m)) {
            throw std::invalid_argument("decode: variant " + model::to_string(cfg.variant) +
                                        " does not support mode " + to_string(m));
        }
        switch (m) {
            case Mode::Flow: return flow_decode(prefix, seed);
            case Mode::Ar: return ar_decode(prefix, seed);
            case Mode::Parallel: return parallel_decode(prefix);
        }
        throw std::logic_error("decode: bad mode");
    }

    // Flow matching: integrate the learned field from Gaussian noise. The
    // model operates in the codec-normalized action space.
    DecodeResult flow_decode(const model::StreamInputs& prefix, uint64_t noise_seed) const {
        DecodeResult res;
        Rng rng(mix_seed(noise_seed, 0xf10a));
        ActionChunk x = obj::sample_omega(rng, cfg.horizon, cfg.action_dim);
        const double delta = 1.0 / flow_steps;
        for (int k = 0; k < flow_steps; ++k) {
            const double tau = k * delta;
            model::StreamInputs in = prefix;
            in.decoding = true;
            in.noisy_actions = x;
            auto out = forward_fn(in, tau);
            ++res.forward_passes;
            for (size_t i = 0; i < x.values.size(); ++i) x.values[i] -= delta * out.flow[i];
        }
        const auto& ranges = codec::codec_ranges(action_codec);
        res.chunk = ActionChunk(cfg.horizon, cfg.action_dim);
        for (int t = 0; t < cfg.horizon; ++t) {
            for (int j = 0; j < cfg.action_dim; ++j) {
                const double n = std::clamp(x.at(t, j), -1.0, 1.0);
                res.chunk.at(t, j) = codec::denormalize_value(n, ranges[j]);
            }
        }
        return res;
    }

    // Token-by-token generation until <eos> or the token budget. A language
    // prelude (subtask text) before the action tokens is tolerated; any other
    // off-grammar sequence falls back to a zero chunk with the flag set.
    DecodeResult ar_decode(const model::StreamInputs& prefix, uint64_t sample_seed) const {
        DecodeResult res;
        Rng rng(mix_seed(sample_seed, 0xa4de));
        const auto layout = cfg.layout();
        std::vector<int> generated;  // combined-vocab ids, fed back verbatim
        for (int step = 0; step < max_ar_tokens; ++step) {
            model::StreamInputs in = prefix;
            in.decoding = true;
            in.raw_ar_tokens = generated;
            auto out = forward_fn(in, std::nullopt);
            ++res.forward_passes;
            const double* logits =
                out.logits.data() + static_cast<size_t>(out.logits_rows - 1) * out.vocab;
            int next;
            if (temperature <= 0.0) {
                next = 0;
                for (int c = 1; c < out.vocab; ++c) {
                    if (logits[c] > logits[next]) next = c;
                }
            } else {
                next = sample_logits(logits, out.vocab, temperature, rng);
            }
            if (next == vocab::kEos) break;
            generated.push_back(next);
        }
        res.tokens = static_cast<int>(generated.size());

        std::vector<int32_t> action_ids;
        bool actions_started = false;
        bool bad = false;
        for (int id : generated) {
            const bool is_action = id >= layout.action_base() && id < layout.state_base();
            if (is_action) {
                actions_started = true;
                action_ids.push_back(id - layout.action_base());
            } else if (actions_started) {
                bad = true;  // words after action tokens are off-grammar
            }
        }
        if (!bad && !action_ids.empty()) {
            try {
                res.chunk = codec::codec_decode(action_codec, action_ids);
            } catch (const std::exception&) {
                bad = true;
            }
        } else {
            bad = true;
        }
        if (bad) {
            res.chunk = ActionChunk(cfg.horizon, cfg.action_dim);
            res.fallback = true;
        }
        return res;
    }

    // Single forward pass filling every naive-bin position at once.
    DecodeResult parallel_decode(const model::StreamInputs& prefix) const {
        const auto* naive = std::get_if<codec::NaiveBinCodec>(&action_codec);
        if (!naive) throw std::invalid_argument("parallel_decode: requires the naive codec");
        DecodeResult res;
        const auto layout = cfg.layout();
        model::StreamInputs in = prefix;
        in.decoding = true;
        in.action_ids.assign(naive->token_count(), 0);  // placeholder inputs
        auto out = forward_fn(in, std::nullopt);
        res.forward_passes = 1;
        res.tokens = naive->token_count();
        const int first_row = out.logits_rows - naive->token_count();
        std::vector<int32_t> ids(naive->token_count());
        for (int i = 0; i < naive->token_count(); ++i) {
            const double* logits =
                out.logits.data() + static_cast<size_t>(first_row + i) * out.vocab;
            int best = 0;
            for (int c = 1; c < naive->bins; ++c) {
                if (logits[layout.action_base() + c] > logits[layout.action_base() + best]) {
                    best = c;
                }
            }
            ids[i] = best;
        }
        res.chunk = naive->decode(ids);
        return res;
    }
};

struct LatencyReport {
    std::string mode;
    double mean_forward_passes = 0;
    double mean_tokens = 0;
    double mean_wall_ms = 0;
    int chunks = 0;
};

// Mean forward passes and wall-clock per chunk over a set of prefixes.
inline LatencyReport bench_latency(const Decoder& decoder, Mode mode,
                                   const std::vector<model::StreamInputs>& prefixes) {
    LatencyReport rep;
    rep.mode = to_string(mode);
    rep.chunks = static_cast<int>(prefixes.size());
    using clock = std::chrono::steady_clock;
    for (size_t i = 0; i < prefixes.size(); ++i) {
        const auto t0 = clock::now();
        auto res = decoder.decode(mode, prefixes[i], mix_seed(0xbe7c, i));
        const auto t1 = clock::now();
        rep.mean_forward_passes += res.forward_passes;
        rep.mean_tokens += res.tokens;
        rep.mean_wall_ms += std::chrono::duration<double, std::milli>(t1 - t0).count();
    }
    if (!prefixes.empty()) {
        rep.mean_forward_passes /= static_cast<double>(prefixes.size());
        rep.mean_tokens /= static_cast<double>(prefixes.size());
        rep.mean_wall_ms /= static_cast<double>(prefixes.size());
    }
    return rep;
}

}  // namespace kivla::decode
