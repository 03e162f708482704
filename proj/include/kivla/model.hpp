#pragma once

#include <cmath>
#include <cstdint>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "kivla/chunk.hpp"
#include "kivla/codecs.hpp"
#include "kivla/graph.hpp"
#include "kivla/rng.hpp"
#include "kivla/vocab.hpp"

namespace kivla::model {

enum class Variant { Ours, Joint, Pi0, Pi0Fast, Transfusion, Hybrid, Oft, Frozen };

Variant variant_from_string(const std::string& s);
std::string to_string(Variant v);

struct ModelConfig {
    int backbone_width = 64;
    int expert_width = 32;
    int depth = 4;
    int heads = 4;
    int head_dim = 16;
    int ffn_mult_backbone = 4;
    int ffn_mult_expert = 4;
    int text_vocab = 64;
    int fast_vocab = 256;
    int state_vocab = 32;  // special-token state bins
    int patch_channels = 13;
    int sin_width = 32;
    int horizon = 8;
    int action_dim = 3;
    int state_dim = 3;
    int max_prefix = 96;
    int max_ar = 48;
    Variant variant = Variant::Ours;

    int attn_width() const { return heads * head_dim; }
    int combined_vocab() const { return text_vocab + fast_vocab + state_vocab; }
    vocab::CombinedLayout layout() const { return {text_vocab, fast_vocab, state_vocab}; }

    // structural properties implied by the variant
    bool has_expert_span() const {
        return variant == Variant::Ours || variant == Variant::Joint || variant == Variant::Pi0 ||
               variant == Variant::Frozen || variant == Variant::Transfusion ||
               variant == Variant::Hybrid;
    }
    bool has_ar_action_span() const {
        return variant == Variant::Ours || variant == Variant::Joint ||
               variant == Variant::Pi0Fast || variant == Variant::Hybrid ||
               variant == Variant::Oft;
    }
    bool barrier() const { return variant == Variant::Ours || variant == Variant::Frozen; }
    bool ar_attends_expert() const { return variant == Variant::Hybrid; }
    bool parallel_ar() const { return variant == Variant::Oft; }
    bool expert_shares_backbone_weights() const { return variant == Variant::Transfusion; }
    int expert_stream_width() const {
        return expert_shares_backbone_weights() ? backbone_width : expert_width;
    }
};

// phi(tau): w/2 sin-cos pairs on a geometric frequency ladder from 1 to 1e4.
std::vector<double> sinusoidal_embedding(double tau, int w);

// --- parameters ---

template <typename S>
struct Params {
    struct Tensor {
        std::string name;
        int rows = 0, cols = 0;
        bool expert_set = false;
        std::vector<S> v;
    };

    ModelConfig cfg;
    std::vector<Tensor> tensors;
    std::unordered_map<std::string, int> index;

    Tensor& at(const std::string& name) { return tensors[index.at(name)]; }
    const Tensor& at(const std::string& name) const { return tensors[index.at(name)]; }
    bool has(const std::string& name) const { return index.count(name) != 0; }

    size_t total_elems() const {
        size_t n = 0;
        for (const auto& t : tensors) n += t.v.size();
        return n;
    }

    static Params init(const ModelConfig& cfg, uint64_t seed) {
        Params p;
        p.cfg = cfg;
        Rng rng(mix_seed(seed, 0x9a9a));
        auto add = [&](const std::string& name, int rows, int cols, bool expert_set,
                       double std_dev) {
            Tensor t;
            t.name = name;
            t.rows = rows;
            t.cols = cols;
            t.expert_set = expert_set;
            t.v.resize(static_cast<size_t>(rows) * cols);
            for (auto& x : t.v) x = static_cast<S>(std_dev * rng.normal());
            p.index[name] = static_cast<int>(p.tensors.size());
            p.tensors.push_back(std::move(t));
        };
        const int de = cfg.backbone_width;
        const int we = cfg.expert_stream_width();
        const int aw = cfg.attn_width();
        const int w = cfg.sin_width;
        const double de_std = 1.0 / std::sqrt(static_cast<double>(de));
        const double we_std = 1.0 / std::sqrt(static_cast<double>(we));

        add("backbone.tok_emb", cfg.combined_vocab(), de, false, de_std);
        add("backbone.pos_prefix", cfg.max_prefix, de, false, de_std);
        add("backbone.pos_ar", cfg.max_ar, de, false, de_std);
        add("backbone.img_proj.w", cfg.patch_channels, de, false,
            1.0 / std::sqrt(static_cast<double>(cfg.patch_channels)));
        add("backbone.img_proj.b", 1, de, false, 0.0);
        add("backbone.state_proj.w", cfg.state_dim, de, false,
            1.0 / std::sqrt(static_cast<double>(cfg.state_dim)));
        add("backbone.state_proj.b", 1, de, false, 0.0);
        for (int l = 0; l < cfg.depth; ++l) {
            const std::string b = "backbone.layer" + std::to_string(l) + ".";
            add(b + "attn_gain", 1, de, false, 0.0);
            add(b + "wq", de, aw, false, de_std);
            add(b + "wk", de, aw, false, de_std);
            add(b + "wv", de, aw, false, de_std);
            add(b + "wo", aw, de, false, 1.0 / std::sqrt(static_cast<double>(aw)));
            add(b + "ffn_gain", 1, de, false, 0.0);
            add(b + "ffn1", de, cfg.ffn_mult_backbone * de, false, de_std);
            add(b + "ffn2", cfg.ffn_mult_backbone * de, de, false,
                1.0 / std::sqrt(static_cast<double>(cfg.ffn_mult_backbone * de)));
        }
        add("backbone.final_gain", 1, de, false, 0.0);
        add("backbone.head", de, cfg.combined_vocab(), false, de_std);
        // gains start at 1
        for (auto& t : p.tensors) {
            if (t.name.find("gain") != std::string::npos) {
                for (auto& x : t.v) x = S(1);
            }
        }

        add("expert.pos", cfg.horizon, we, true, we_std);
        add("expert.act_in.w", cfg.action_dim, we, true,
            1.0 / std::sqrt(static_cast<double>(cfg.action_dim)));
        add("expert.act_in.b", 1, we, true, 0.0);
        add("expert.tau.w1", w, w, true, 1.0 / std::sqrt(static_cast<double>(w)));
        add("expert.tau.w2", w, w, true, 1.0 / std::sqrt(static_cast<double>(w)));
        const bool own_weights = !cfg.expert_shares_backbone_weights();
        for (int l = 0; l < cfg.depth; ++l) {
            const std::string e = "expert.layer" + std::to_string(l) + ".";
            if (own_weights) {
                add(e + "wq", we, aw, true, we_std);
                add(e + "wk", we, aw, true, we_std);
                add(e + "wv", we, aw, true, we_std);
                add(e + "wo", aw, we, true, 1.0 / std::sqrt(static_cast<double>(aw)));
                add(e + "ffn1", we, cfg.ffn_mult_expert * we, true, we_std);
                add(e + "ffn2", cfg.ffn_mult_expert * we, we, true,
                    1.0 / std::sqrt(static_cast<double>(cfg.ffn_mult_expert * we)));
            }
            // adaptive-norm affine maps start at zero so layers begin as plain rmsnorm
            for (const char* which : {"ada_attn.", "ada_ffn."}) {
                add(e + which + "scale_w", w, we, true, 0.0);
                add(e + which + "scale_b", 1, we, true, 0.0);
                add(e + which + "shift_w", w, we, true, 0.0);
                add(e + which + "shift_b", 1, we, true, 0.0);
            }
        }
        add("expert.ada_final.scale_w", w, we, true, 0.0);
        add("expert.ada_final.scale_b", 1, we, true, 0.0);
        add("expert.ada_final.shift_w", w, we, true, 0.0);
        add("expert.ada_final.shift_b", 1, we, true, 0.0);
        add("expert.flow_out.w", we, cfg.action_dim, true, we_std);
        add("expert.flow_out.b", 1, cfg.action_dim, true, 0.0);
        return p;
    }
};

// --- token stream ---

enum class Modality { Image, Word, State, FastAction, NoisyAction };

struct TokenItem {
    Modality mod;
    int id = -1;                  // combined-vocab id for token-like items
    std::vector<double> vec;      // payload for image cells / continuous state / noisy actions
};

struct ArTarget {
    int pos = 0;       // stream position holding the target token
    int target = 0;    // combined-vocab id to predict
    int from_pos = 0;  // logits row that predicts it
};

struct TokenStream {
    std::vector<TokenItem> items;
    int prefix_len = 0;
    int ar_len = 0;
    int expert_len = 0;
    bool parallel_ar = false;
    std::vector<ArTarget> ar_targets;

    int size() const { return static_cast<int>(items.size()); }
    int backbone_len() const { return prefix_len + ar_len; }
};

struct StreamInputs {
    std::vector<double> obs;                        // grid*grid x channels, flattened
    int obs_tokens = 0;                             // number of image cells
    std::vector<int> instruction;                   // word ids (question words for captions)
    std::optional<std::vector<double>> state;       // q, absent for caption examples
    std::vector<int32_t> action_ids;                // codec token ids (not offset)
    std::vector<int> pre_action_words;              // subtask words prepended in the AR span
    std::vector<int> answer;                        // caption answer word ids
    std::optional<ActionChunk> noisy_actions;       // H x d
    bool is_caption = false;
    bool decoding = false;                          // build partial AR span, no targets
    std::vector<int> raw_ar_tokens;                 // decoding only: combined ids placed verbatim
};

TokenStream build_token_stream(const StreamInputs& in, const ModelConfig& cfg,
                               const codec::StateEncoding& state_enc);

// --- attention plan ---

struct AttentionPlan {
    int n = 0;
    std::vector<uint8_t> allowed;  // n*n, query-major
    std::vector<uint8_t> barrier;  // n*n; (expert query, backbone key) entries under sg
    std::vector<uint8_t> routing;  // 0 = backbone weights, 1 = expert weights
    int prefix_len = 0, ar_len = 0, expert_len = 0;

    bool allowed_at(int q, int k) const { return allowed[static_cast<size_t>(q) * n + k] != 0; }
    bool barrier_at(int q, int k) const { return barrier[static_cast<size_t>(q) * n + k] != 0; }
    bool any_barrier() const;
};

AttentionPlan build_attention_plan(const TokenStream& stream, Variant variant);

template <typename S>
std::shared_ptr<const std::vector<S>> additive_mask(const AttentionPlan& plan) {
    auto m = std::make_shared<std::vector<S>>(static_cast<size_t>(plan.n) * plan.n, S(0));
    for (size_t i = 0; i < m->size(); ++i) {
        if (!plan.allowed[i]) (*m)[i] = -std::numeric_limits<S>::infinity();
    }
    return m;
}

// --- forward pass ---

template <typename S>
struct BoundParams {
    std::unordered_map<std::string, ad::NodeId> ids;
    ad::NodeId id(const std::string& name) const { return ids.at(name); }
};

template <typename S>
BoundParams<S> bind_params(ad::Graph<S>& g, const Params<S>& p) {
    BoundParams<S> b;
    for (const auto& t : p.tensors) {
        b.ids[t.name] = g.input(t.rows, t.cols, t.v.data(), true);
    }
    return b;
}

struct ForwardBuild {
    ad::NodeId logits = -1;        // backbone_len x combined_vocab
    ad::NodeId flow = -1;          // horizon x action_dim
    ad::NodeId backbone_repr = -1;
    ad::NodeId expert_repr = -1;
    int n = 0, prefix_len = 0, ar_len = 0, expert_len = 0;
};

struct ForwardOutput {
    std::vector<double> logits;
    int logits_rows = 0, vocab = 0;
    std::vector<double> flow;
    int horizon = 0, action_dim = 0;
};

template <typename S>
ForwardBuild model_forward(ad::Graph<S>& g, const BoundParams<S>& bp, const ModelConfig& cfg,
                           const TokenStream& ts, const AttentionPlan& plan,
                           std::optional<double> tau);

template <typename S>
ForwardOutput run_forward(const Params<S>& params, const ModelConfig& cfg, const TokenStream& ts,
                          const AttentionPlan& plan, std::optional<double> tau);

// --- implementation ---

inline Variant variant_from_string(const std::string& s) {
    if (s == "ours") return Variant::Ours;
    if (s == "joint") return Variant::Joint;
    if (s == "pi0") return Variant::Pi0;
    if (s == "pi0-fast") return Variant::Pi0Fast;
    if (s == "transfusion") return Variant::Transfusion;
    if (s == "hybrid") return Variant::Hybrid;
    if (s == "oft") return Variant::Oft;
    if (s == "frozen") return Variant::Frozen;
    throw std::invalid_argument("unknown variant '" + s + "'");
}

inline std::string to_string(Variant v) {
    switch (v) {
        case Variant::Ours: return "ours";
        case Variant::Joint: return "joint";
        case Variant::Pi0: return "pi0";
        case Variant::Pi0Fast: return "pi0-fast";
        case Variant::Transfusion: return "transfusion";
        case Variant::Hybrid: return "hybrid";
        case Variant::Oft: return "oft";
        case Variant::Frozen: return "frozen";
    }
    return "?";
}

inline std::vector<double> sinusoidal_embedding(double tau, int w) {
    if (w < 2 || w % 2 != 0) throw std::invalid_argument("sinusoidal_embedding: width must be even");
    std::vector<double> out(w);
    const int pairs = w / 2;
    for (int i = 0; i < pairs; ++i) {
        const double expo = pairs > 1 ? static_cast<double>(i) / (pairs - 1) : 0.0;
        const double freq = std::pow(10000.0, expo);
        out[2 * i] = std::sin(freq * tau);
        out[2 * i + 1] = std::cos(freq * tau);
    }
    return out;
}

inline TokenStream build_token_stream(const StreamInputs& in, const ModelConfig& cfg,
                                      const codec::StateEncoding& state_enc) {
    const auto layout = cfg.layout();
    TokenStream ts;

    // prefix: image cells, instruction words, state tokens
    const int c = in.obs_tokens > 0 ? static_cast<int>(in.obs.size()) / in.obs_tokens : 0;
    for (int i = 0; i < in.obs_tokens; ++i) {
        TokenItem item;
        item.mod = Modality::Image;
        item.vec.assign(in.obs.begin() + static_cast<size_t>(i) * c,
                        in.obs.begin() + static_cast<size_t>(i + 1) * c);
        ts.items.push_back(std::move(item));
    }
    for (int w : in.instruction) ts.items.push_back({Modality::Word, w, {}});
    if (in.state.has_value() && !in.is_caption) {
        for (const auto& st : state_enc.encode(*in.state)) {
            switch (st.kind) {
                case codec::StateToken::Kind::Digit:
                    ts.items.push_back({Modality::State, vocab::digit_id(st.value), {}});
                    break;
                case codec::StateToken::Kind::Separator:
                    ts.items.push_back({Modality::State, vocab::kSep, {}});
                    break;
                case codec::StateToken::Kind::SpecialBin:
                    ts.items.push_back({Modality::State, layout.state_base() + st.value, {}});
                    break;
                case codec::StateToken::Kind::Continuous:
                    ts.items.push_back({Modality::State, -1, st.payload});
                    break;
            }
        }
    }
    ts.prefix_len = ts.size();

    // AR span: caption answers, or (subtask words +) action tokens
    std::vector<std::pair<Modality, int>> ar;
    if (in.decoding && !in.raw_ar_tokens.empty()) {
        for (int id : in.raw_ar_tokens) {
            const Modality mod = (id >= layout.action_base() && id < layout.state_base())
                                     ? Modality::FastAction
                                     : Modality::Word;
            ar.emplace_back(mod, id);
        }
    } else if (in.is_caption) {
        for (int w : in.answer) ar.emplace_back(Modality::Word, w);
        if (!in.decoding) ar.emplace_back(Modality::Word, vocab::kEos);
    } else if (cfg.has_ar_action_span()) {
        if (cfg.parallel_ar()) {
            // placeholder queries; targets align to the same position
            for (size_t i = 0; i < in.action_ids.size(); ++i) {
                ar.emplace_back(Modality::FastAction, vocab::kActQuery);
            }
            ts.parallel_ar = true;
        } else {
            for (int w : in.pre_action_words) ar.emplace_back(Modality::Word, w);
            for (int32_t a : in.action_ids) {
                ar.emplace_back(Modality::FastAction, layout.action_base() + a);
            }
            if (!in.decoding) ar.emplace_back(Modality::Word, vocab::kEos);
        }
    } else if (cfg.variant == Variant::Transfusion && !in.pre_action_words.empty()) {
        for (int w : in.pre_action_words) ar.emplace_back(Modality::Word, w);
        if (!in.decoding) ar.emplace_back(Modality::Word, vocab::kEos);
    }
    for (const auto& [mod, id] : ar) ts.items.push_back({mod, id, {}});
    ts.ar_len = static_cast<int>(ar.size());

    // targets
    if (!in.decoding && ts.ar_len > 0) {
        if (ts.parallel_ar) {
            for (int i = 0; i < ts.ar_len; ++i) {
                const int pos = ts.prefix_len + i;
                ts.ar_targets.push_back(
                    {pos, layout.action_base() + in.action_ids[i], pos});
            }
        } else {
            for (int i = 0; i < ts.ar_len; ++i) {
                const int pos = ts.prefix_len + i;
                ts.ar_targets.push_back({pos, ts.items[pos].id, pos - 1});
            }
        }
    }

    // expert span: noisy continuous actions
    if (cfg.has_expert_span() && !in.is_caption && in.noisy_actions.has_value()) {
        const ActionChunk& na = *in.noisy_actions;
        if (na.horizon != cfg.horizon || na.dim != cfg.action_dim) {
            throw std::invalid_argument("build_token_stream: horizon mismatch, noisy chunk " +
                                        std::to_string(na.horizon) + "x" + std::to_string(na.dim) +
                                        " vs config " + std::to_string(cfg.horizon) + "x" +
                                        std::to_string(cfg.action_dim));
        }
        for (int t = 0; t < na.horizon; ++t) {
            TokenItem item;
            item.mod = Modality::NoisyAction;
            item.vec.assign(na.values.begin() + static_cast<size_t>(t) * na.dim,
                            na.values.begin() + static_cast<size_t>(t + 1) * na.dim);
            ts.items.push_back(std::move(item));
        }
        ts.expert_len = na.horizon;
    }
    return ts;
}

inline bool AttentionPlan::any_barrier() const {
    for (uint8_t b : barrier) {
        if (b) return true;
    }
    return false;
}

inline AttentionPlan build_attention_plan(const TokenStream& stream, Variant variant) {
    const int vi = static_cast<int>(variant);
    if (vi < 0 || vi > static_cast<int>(Variant::Frozen)) {
        throw std::invalid_argument("build_attention_plan: unknown variant");
    }
    AttentionPlan plan;
    plan.n = stream.size();
    plan.prefix_len = stream.prefix_len;
    plan.ar_len = stream.ar_len;
    plan.expert_len = stream.expert_len;
    const int n = plan.n;
    const int p = stream.prefix_len;
    const int f = stream.ar_len;
    const int e = stream.expert_len;
    plan.allowed.assign(static_cast<size_t>(n) * n, 0);
    plan.barrier.assign(static_cast<size_t>(n) * n, 0);
    plan.routing.assign(n, 0);

    const bool expert_routed = e > 0 && variant != Variant::Transfusion;
    for (int i = p + f; i < n; ++i) plan.routing[i] = expert_routed ? 1 : 0;

    auto allow = [&](int q, int k) { plan.allowed[static_cast<size_t>(q) * n + k] = 1; };

    // prefix: bidirectional within itself, blind to everything later
    for (int q = 0; q < p; ++q) {
        for (int k = 0; k < p; ++k) allow(q, k);
    }
    // AR span: full prefix + causal self (bidirectional self for parallel decoding)
    for (int q = p; q < p + f; ++q) {
        for (int k = 0; k < p; ++k) allow(q, k);
        if (stream.parallel_ar) {
            for (int k = p; k < p + f; ++k) allow(q, k);
        } else {
            for (int k = p; k <= q; ++k) allow(q, k);
        }
        if (variant == Variant::Hybrid) {
            for (int k = p + f; k < n; ++k) allow(q, k);
        }
    }
    // expert span: full prefix + full expert span, never the AR span
    for (int q = p + f; q < n; ++q) {
        for (int k = 0; k < p; ++k) allow(q, k);
        for (int k = p + f; k < n; ++k) allow(q, k);
        if (variant == Variant::Ours || variant == Variant::Frozen) {
            for (int k = 0; k < p; ++k) plan.barrier[static_cast<size_t>(q) * n + k] = 1;
        }
    }
    return plan;
}

namespace detail {

template <typename S>
ad::NodeId ones_row(ad::Graph<S>& g, int cols) {
    return g.constant(1, cols, std::vector<S>(cols, S(1)));
}

template <typename S>
ad::NodeId adaptive_rmsnorm(ad::Graph<S>& g, ad::NodeId x, ad::NodeId tau_emb,
                            const BoundParams<S>& bp, const std::string& prefix,
                            ad::NodeId ones) {
    ad::NodeId scale = g.add(g.matmul(tau_emb, bp.id(prefix + "scale_w")),
                             bp.id(prefix + "scale_b"));
    ad::NodeId shift = g.add(g.matmul(tau_emb, bp.id(prefix + "shift_w")),
                             bp.id(prefix + "shift_b"));
    ad::NodeId xn = g.rmsnorm(x, ones);
    return g.add_rowvec(g.mul_rowvec(xn, g.add(scale, ones)), shift);
}

template <typename S>
std::vector<S> to_scalar(const std::vector<double>& v) {
    std::vector<S> out(v.size());
    for (size_t i = 0; i < v.size(); ++i) out[i] = static_cast<S>(v[i]);
    return out;
}

}  // namespace detail

template <typename S>
ForwardBuild model_forward(ad::Graph<S>& g, const BoundParams<S>& bp, const ModelConfig& cfg,
                           const TokenStream& ts, const AttentionPlan& plan,
                           std::optional<double> tau) {
    if (plan.n != ts.size() || plan.prefix_len != ts.prefix_len || plan.ar_len != ts.ar_len ||
        plan.expert_len != ts.expert_len) {
        throw std::invalid_argument("model_forward: inconsistent spans between stream and plan");
    }
    if ((ts.expert_len > 0) != tau.has_value()) {
        throw std::invalid_argument(ts.expert_len > 0
                                        ? "model_forward: expert span present but tau missing"
                                        : "model_forward: tau supplied without an expert span");
    }
    const int m = ts.backbone_len();
    const int e = ts.expert_len;
    if (ts.prefix_len > cfg.max_prefix) {
        throw std::invalid_argument("model_forward: prefix exceeds max_prefix");
    }
    if (ts.ar_len > cfg.max_ar) throw std::invalid_argument("model_forward: AR span exceeds max_ar");

    ForwardBuild fb;
    fb.n = ts.size();
    fb.prefix_len = ts.prefix_len;
    fb.ar_len = ts.ar_len;
    fb.expert_len = e;

    // --- embed backbone tokens, grouped into contiguous runs ---
    std::vector<ad::NodeId> pieces;
    enum class RunKind { None, Image, Token, ContState };
    RunKind run = RunKind::None;
    std::vector<double> run_vec;
    std::vector<int32_t> run_ids;
    int run_rows = 0;
    auto flush = [&] {
        if (run == RunKind::Image) {
            ad::NodeId x = g.constant(run_rows, cfg.patch_channels, detail::to_scalar<S>(run_vec));
            pieces.push_back(g.add_rowvec(g.matmul(x, bp.id("backbone.img_proj.w")),
                                          bp.id("backbone.img_proj.b")));
        } else if (run == RunKind::Token) {
            pieces.push_back(g.embed(bp.id("backbone.tok_emb"), run_ids));
        } else if (run == RunKind::ContState) {
            ad::NodeId q = g.constant(run_rows, cfg.state_dim, detail::to_scalar<S>(run_vec));
            pieces.push_back(g.add_rowvec(g.matmul(q, bp.id("backbone.state_proj.w")),
                                          bp.id("backbone.state_proj.b")));
        }
        run = RunKind::None;
        run_vec.clear();
        run_ids.clear();
        run_rows = 0;
    };
    for (int i = 0; i < m; ++i) {
        const TokenItem& it = ts.items[i];
        RunKind want;
        if (it.mod == Modality::Image) {
            want = RunKind::Image;
        } else if (it.mod == Modality::State && it.id < 0) {
            want = RunKind::ContState;
        } else {
            want = RunKind::Token;
        }
        if (want != run) flush();
        run = want;
        ++run_rows;
        if (want == RunKind::Token) {
            run_ids.push_back(it.id);
        } else {
            run_vec.insert(run_vec.end(), it.vec.begin(), it.vec.end());
        }
    }
    flush();
    ad::NodeId xb = pieces.size() == 1 ? pieces[0] : g.concat_rows(pieces);

    // positions are indexed within each segment
    std::vector<int32_t> pos_prefix_ids(ts.prefix_len);
    for (int i = 0; i < ts.prefix_len; ++i) pos_prefix_ids[i] = i;
    ad::NodeId pos = g.embed(bp.id("backbone.pos_prefix"), pos_prefix_ids);
    if (ts.ar_len > 0) {
        std::vector<int32_t> pos_ar_ids(ts.ar_len);
        for (int i = 0; i < ts.ar_len; ++i) pos_ar_ids[i] = i;
        pos = g.concat_rows({pos, g.embed(bp.id("backbone.pos_ar"), pos_ar_ids)});
    }
    xb = g.add(xb, pos);

    // --- expert span embedding and timestep conditioning ---
    const int we = cfg.expert_stream_width();
    ad::NodeId xa = -1;
    ad::NodeId tau_emb = -1;
    ad::NodeId ones_we = -1;
    if (e > 0) {
        std::vector<double> noisy;
        for (int i = m; i < ts.size(); ++i) {
            noisy.insert(noisy.end(), ts.items[i].vec.begin(), ts.items[i].vec.end());
        }
        ad::NodeId na = g.constant(e, cfg.action_dim, detail::to_scalar<S>(noisy));
        xa = g.add_rowvec(g.matmul(na, bp.id("expert.act_in.w")), bp.id("expert.act_in.b"));
        xa = g.add(xa, bp.id("expert.pos"));

        ad::NodeId phi = g.constant(
            1, cfg.sin_width, detail::to_scalar<S>(sinusoidal_embedding(*tau, cfg.sin_width)));
        tau_emb = g.swish(g.matmul(g.swish(g.matmul(phi, bp.id("expert.tau.w1"))),
                                   bp.id("expert.tau.w2")));
        ones_we = detail::ones_row(g, we);
    }

    auto mask = additive_mask<S>(plan);
    const bool barrier = plan.any_barrier();
    const double inv_sqrt_hd = 1.0 / std::sqrt(static_cast<double>(cfg.head_dim));
    const bool shared_weights = cfg.expert_shares_backbone_weights();

    for (int l = 0; l < cfg.depth; ++l) {
        const std::string b = "backbone.layer" + std::to_string(l) + ".";
        const std::string ex = "expert.layer" + std::to_string(l) + ".";
        const std::string wside = shared_weights ? b : ex;

        // attention
        ad::NodeId hb = g.rmsnorm(xb, bp.id(b + "attn_gain"));
        ad::NodeId qb = g.matmul(hb, bp.id(b + "wq"));
        ad::NodeId kb = g.matmul(hb, bp.id(b + "wk"));
        ad::NodeId vb = g.matmul(hb, bp.id(b + "wv"));
        ad::NodeId qa = -1, ka = -1, va = -1, kb_sg = kb, vb_sg = vb;
        if (e > 0) {
            ad::NodeId ha = detail::adaptive_rmsnorm(g, xa, tau_emb, bp, ex + "ada_attn.", ones_we);
            qa = g.matmul(ha, bp.id(wside + "wq"));
            ka = g.matmul(ha, bp.id(wside + "wk"));
            va = g.matmul(ha, bp.id(wside + "wv"));
            if (barrier) {
                kb_sg = g.stop_gradient(kb);
                vb_sg = g.stop_gradient(vb);
            }
        }

        std::vector<ad::NodeId> out_top, out_bot;
        for (int h = 0; h < cfg.heads; ++h) {
            const int c0 = h * cfg.head_dim;
            const int c1 = c0 + cfg.head_dim;
            ad::NodeId qb_h = g.slice_cols(qb, c0, c1);
            ad::NodeId kb_h = g.slice_cols(kb, c0, c1);
            ad::NodeId vb_h = g.slice_cols(vb, c0, c1);
            if (e > 0) {
                ad::NodeId qa_h = g.slice_cols(qa, c0, c1);
                ad::NodeId ka_h = g.slice_cols(ka, c0, c1);
                ad::NodeId va_h = g.slice_cols(va, c0, c1);
                ad::NodeId k_top = g.concat_rows({kb_h, ka_h});
                ad::NodeId v_top = g.concat_rows({vb_h, va_h});
                ad::NodeId s_top = g.scale(g.matmul_bt(qb_h, k_top), inv_sqrt_hd);
                ad::NodeId p_top = g.softmax_rows(s_top, mask, 0);
                out_top.push_back(g.matmul(p_top, v_top));

                ad::NodeId kb_bot_h = barrier ? g.slice_cols(kb_sg, c0, c1) : kb_h;
                ad::NodeId vb_bot_h = barrier ? g.slice_cols(vb_sg, c0, c1) : vb_h;
                ad::NodeId k_bot = g.concat_rows({kb_bot_h, ka_h});
                ad::NodeId v_bot = g.concat_rows({vb_bot_h, va_h});
                ad::NodeId s_bot = g.scale(g.matmul_bt(qa_h, k_bot), inv_sqrt_hd);
                ad::NodeId p_bot = g.softmax_rows(s_bot, mask, m);
                out_bot.push_back(g.matmul(p_bot, v_bot));
            } else {
                ad::NodeId s = g.scale(g.matmul_bt(qb_h, kb_h), inv_sqrt_hd);
                ad::NodeId p = g.softmax_rows(s, mask, 0);
                out_top.push_back(g.matmul(p, vb_h));
            }
        }
        ad::NodeId o_top = out_top.size() == 1 ? out_top[0] : g.concat_cols(out_top);
        xb = g.add(xb, g.matmul(o_top, bp.id(b + "wo")));
        if (e > 0) {
            ad::NodeId o_bot = out_bot.size() == 1 ? out_bot[0] : g.concat_cols(out_bot);
            xa = g.add(xa, g.matmul(o_bot, bp.id(wside + "wo")));
        }

        // feed-forward
        ad::NodeId hb2 = g.rmsnorm(xb, bp.id(b + "ffn_gain"));
        xb = g.add(xb, g.matmul(g.swish(g.matmul(hb2, bp.id(b + "ffn1"))), bp.id(b + "ffn2")));
        if (e > 0) {
            ad::NodeId ha2 = detail::adaptive_rmsnorm(g, xa, tau_emb, bp, ex + "ada_ffn.", ones_we);
            xa = g.add(xa, g.matmul(g.swish(g.matmul(ha2, bp.id(wside + "ffn1"))),
                                    bp.id(wside + "ffn2")));
        }
    }

    fb.backbone_repr = xb;
    fb.logits = g.matmul(g.rmsnorm(xb, bp.id("backbone.final_gain")), bp.id("backbone.head"));
    if (e > 0) {
        fb.expert_repr = xa;
        ad::NodeId hf = detail::adaptive_rmsnorm(g, xa, tau_emb, bp, "expert.ada_final.", ones_we);
        fb.flow = g.add_rowvec(g.matmul(hf, bp.id("expert.flow_out.w")), bp.id("expert.flow_out.b"));
    }
    return fb;
}

template <typename S>
ForwardOutput run_forward(const Params<S>& params, const ModelConfig& cfg, const TokenStream& ts,
                          const AttentionPlan& plan, std::optional<double> tau) {
    ad::Graph<S> g;
    BoundParams<S> bp = bind_params(g, params);
    ForwardBuild fb = model_forward(g, bp, cfg, ts, plan, tau);
    ForwardOutput out;
    out.logits_rows = ts.backbone_len();
    out.vocab = cfg.combined_vocab();
    auto lv = g.values(fb.logits);
    out.logits.assign(lv.begin(), lv.end());
    if (fb.flow >= 0) {
        auto fv = g.values(fb.flow);
        out.flow.assign(fv.begin(), fv.end());
        out.horizon = cfg.horizon;
        out.action_dim = cfg.action_dim;
    }
    return out;
}

}  // namespace kivla::model
