#include <cmath>
#include <cstring>
#include <set>

#include "doctest.h"
#include "kivla/grad_check.hpp"
#include "kivla/model.hpp"
#include "kivla/objectives.hpp"
#include "kivla/rng.hpp"

using namespace kivla;
using namespace kivla::model;

namespace {

ModelConfig desk_config(Variant v) {
    ModelConfig cfg;
    cfg.variant = v;
    return cfg;
}

ModelConfig tiny_config(Variant v) {
    ModelConfig cfg;
    cfg.backbone_width = 8;
    cfg.expert_width = 8;
    cfg.depth = 2;
    cfg.heads = 2;
    cfg.head_dim = 4;
    cfg.ffn_mult_backbone = 2;
    cfg.ffn_mult_expert = 2;
    cfg.text_vocab = 36;
    cfg.fast_vocab = 8;
    cfg.state_vocab = 4;
    cfg.patch_channels = 5;
    cfg.sin_width = 8;
    cfg.horizon = 2;
    cfg.action_dim = 2;
    cfg.state_dim = 2;
    cfg.max_prefix = 8;
    cfg.max_ar = 8;
    cfg.variant = v;
    return cfg;
}

codec::StateEncoding continuous_state() {
    return {codec::StateVariant::Continuous, 0, {}};
}

StreamInputs random_inputs(Rng& rng, const ModelConfig& cfg, int grid, int instr_words,
                           int n_action_ids) {
    StreamInputs in;
    in.obs_tokens = grid * grid;
    in.obs.resize(static_cast<size_t>(in.obs_tokens) * cfg.patch_channels);
    for (auto& v : in.obs) v = rng.below(4) == 0 ? 1.0 : 0.0;
    for (int i = 0; i < instr_words; ++i) {
        in.instruction.push_back(4 + static_cast<int>(rng.below(30)));
    }
    std::vector<double> q(cfg.state_dim);
    for (auto& v : q) v = rng.uniform(-1, 1);
    in.state = q;
    for (int i = 0; i < n_action_ids; ++i) {
        in.action_ids.push_back(static_cast<int32_t>(rng.below(cfg.fast_vocab)));
    }
    ActionChunk noisy(cfg.horizon, cfg.action_dim);
    for (auto& v : noisy.values) v = rng.normal();
    in.noisy_actions = noisy;
    return in;
}

template <typename S>
bool bitwise_equal(const std::vector<S>& a, const std::vector<S>& b) {
    return a.size() == b.size() && std::memcmp(a.data(), b.data(), sizeof(S) * a.size()) == 0;
}

}  // namespace

TEST_CASE("sinusoidal embedding: phi(0) alternates zeros and ones, norm bounded") {
    auto phi0 = sinusoidal_embedding(0.0, 8);
    CHECK(phi0 == std::vector<double>{0, 1, 0, 1, 0, 1, 0, 1});
    for (double tau : {0.0, 0.1, 0.5, 0.77, 1.0}) {
        auto phi = sinusoidal_embedding(tau, 32);
        double norm = 0;
        for (double v : phi) norm += v * v;
        CHECK(std::sqrt(norm) <= std::sqrt(16.0) * std::sqrt(2.0) + 1e-12);
    }
}

TEST_CASE("token stream lengths follow the span arithmetic") {
    Rng rng(1);
    ModelConfig cfg = desk_config(Variant::Ours);
    StreamInputs in = random_inputs(rng, cfg, 8, 5, 12);
    auto ts = build_token_stream(in, cfg, continuous_state());
    // prefix 64 + 5 + 1, AR span = action ids + eos, expert span = H
    CHECK(ts.prefix_len == 64 + 5 + 1);
    CHECK(ts.ar_len == 12 + 1);
    CHECK(ts.expert_len == 8);
    CHECK(ts.size() == 64 + 5 + 1 + 13 + 8);

    cfg.variant = Variant::Pi0;
    auto ts_pi0 = build_token_stream(in, cfg, continuous_state());
    CHECK(ts_pi0.size() == 64 + 5 + 1 + 8);
    CHECK(ts_pi0.ar_len == 0);
    CHECK(ts_pi0.ar_targets.empty());

    cfg.variant = Variant::Pi0Fast;
    auto ts_pf = build_token_stream(in, cfg, continuous_state());
    CHECK(ts_pf.expert_len == 0);
    CHECK(ts_pf.size() == 64 + 5 + 1 + 13);

    cfg.variant = Variant::Oft;
    auto ts_oft = build_token_stream(in, cfg, continuous_state());
    CHECK(ts_oft.expert_len == 0);
    CHECK(ts_oft.ar_len == 12);  // placeholders, no eos
    CHECK(ts_oft.parallel_ar);
    for (const auto& t : ts_oft.ar_targets) CHECK(t.from_pos == t.pos);
}

TEST_CASE("token stream: state encodings change only the prefix") {
    Rng rng(2);
    ModelConfig cfg = desk_config(Variant::Ours);
    StreamInputs in = random_inputs(rng, cfg, 8, 7, 10);
    in.state = std::vector<double>{1.0, 2.0, 0.0};

    codec::StateEncoding text{codec::StateVariant::Text, 256, {{0, 8}, {0, 8}, {0, 1}}};
    auto ts_text = build_token_stream(in, cfg, text);
    CHECK(ts_text.prefix_len > 64 + 7 + 1);
    CHECK(ts_text.prefix_len <= 64 + 7 + 12);

    codec::StateEncoding special{codec::StateVariant::SpecialToken, 32, {{0, 8}, {0, 8}, {0, 1}}};
    auto ts_sp = build_token_stream(in, cfg, special);
    CHECK(ts_sp.prefix_len == 64 + 7 + 3);
    for (int i = 64 + 7; i < ts_sp.prefix_len; ++i) {
        CHECK(ts_sp.items[i].id >= cfg.layout().state_base());
    }
}

TEST_CASE("token stream rejects a horizon mismatch") {
    Rng rng(3);
    ModelConfig cfg = desk_config(Variant::Ours);
    StreamInputs in = random_inputs(rng, cfg, 8, 5, 10);
    in.noisy_actions = ActionChunk(4, 3);
    CHECK_THROWS_AS(build_token_stream(in, cfg, continuous_state()), std::invalid_argument);
}

TEST_CASE("attention plan matches the enumerated 3+2+2 example") {
    TokenStream ts;
    ts.items.resize(7);
    ts.prefix_len = 3;
    ts.ar_len = 2;
    ts.expert_len = 2;

    auto plan = build_attention_plan(ts, Variant::Ours);
    auto keys = [&](int q) {
        std::set<int> s;
        for (int k = 0; k < plan.n; ++k) {
            if (plan.allowed_at(q, k)) s.insert(k);
        }
        return s;
    };
    for (int q = 0; q < 3; ++q) CHECK(keys(q) == std::set<int>{0, 1, 2});
    CHECK(keys(3) == std::set<int>{0, 1, 2, 3});
    CHECK(keys(4) == std::set<int>{0, 1, 2, 3, 4});
    CHECK(keys(5) == std::set<int>{0, 1, 2, 5, 6});
    CHECK(keys(6) == std::set<int>{0, 1, 2, 5, 6});

    // barrier is exactly the (expert row, prefix col) block
    int barrier_count = 0;
    for (int q = 0; q < plan.n; ++q) {
        for (int k = 0; k < plan.n; ++k) barrier_count += plan.barrier_at(q, k) ? 1 : 0;
    }
    CHECK(barrier_count == 2 * 3);
    for (int q = 5; q < 7; ++q) {
        for (int k = 0; k < 3; ++k) CHECK(plan.barrier_at(q, k));
    }

    auto joint = build_attention_plan(ts, Variant::Joint);
    CHECK(!joint.any_barrier());
    for (int q = 0; q < plan.n; ++q) {
        for (int k = 0; k < plan.n; ++k) CHECK(joint.allowed_at(q, k) == plan.allowed_at(q, k));
    }

    auto hybrid = build_attention_plan(ts, Variant::Hybrid);
    CHECK(hybrid.allowed_at(3, 5));
    CHECK(hybrid.allowed_at(3, 6));
    CHECK(hybrid.allowed_at(4, 5));
    CHECK(!hybrid.any_barrier());

    // parallel span: bidirectional AR block with no causal order
    TokenStream tsp = ts;
    tsp.expert_len = 0;
    tsp.items.resize(5);
    tsp.parallel_ar = true;
    auto oft = build_attention_plan(tsp, Variant::Oft);
    CHECK(oft.allowed_at(3, 4));
    CHECK(oft.allowed_at(4, 3));
}

TEST_CASE("softmax rows over allowed keys sum to one within 1e-12") {
    Rng rng(5);
    TokenStream ts;
    ts.items.resize(9);
    ts.prefix_len = 4;
    ts.ar_len = 3;
    ts.expert_len = 2;
    auto plan = build_attention_plan(ts, Variant::Ours);
    ad::Graph<double> g;
    std::vector<double> scores(81);
    for (auto& v : scores) v = rng.normal();
    ad::NodeId s = g.value_input(9, 9, scores, false);
    ad::NodeId p = g.softmax_rows(s, additive_mask<double>(plan), 0);
    auto pv = g.values(p);
    for (int r = 0; r < 9; ++r) {
        double sum = 0;
        for (int c = 0; c < 9; ++c) sum += pv[static_cast<size_t>(r) * 9 + c];
        CHECK(std::abs(sum - 1.0) < 1e-12);
    }
}

TEST_CASE("parameter partition is disjoint and exhaustive") {
    for (Variant v : {Variant::Ours, Variant::Transfusion}) {
        auto params = Params<double>::init(desk_config(v), 7);
        size_t backbone = 0, expert = 0;
        for (const auto& t : params.tensors) {
            const bool expert_name = t.name.rfind("expert.", 0) == 0;
            CHECK(t.expert_set == expert_name);
            (t.expert_set ? expert : backbone) += t.v.size();
        }
        CHECK(backbone + expert == params.total_elems());
        CHECK(backbone > 0);
        CHECK(expert > 0);
    }
    // transfusion has no separate expert attention/ffn weights
    auto tf = Params<double>::init(desk_config(Variant::Transfusion), 7);
    CHECK(!tf.has("expert.layer0.wq"));
    CHECK(!tf.has("expert.layer0.ffn1"));
    CHECK(tf.has("expert.act_in.w"));
    auto ours = Params<double>::init(desk_config(Variant::Ours), 7);
    CHECK(ours.has("expert.layer0.wq"));
}

TEST_CASE("adaptive rmsnorm with zero-initialized maps equals plain rmsnorm") {
    ModelConfig cfg = tiny_config(Variant::Ours);
    auto params = Params<double>::init(cfg, 3);
    ad::Graph<double> g;
    auto bp = bind_params(g, params);
    Rng rng(8);
    std::vector<double> xv(4 * cfg.expert_width);
    for (auto& v : xv) v = rng.normal();
    ad::NodeId x = g.value_input(4, cfg.expert_width, xv, false);
    ad::NodeId ones = g.constant(1, cfg.expert_width, std::vector<double>(cfg.expert_width, 1.0));
    std::vector<double> ev(cfg.sin_width, 0.3);
    ad::NodeId e = g.value_input(1, cfg.sin_width, ev, false);
    ad::NodeId ada = model::detail::adaptive_rmsnorm(g, x, e, bp, "expert.layer0.ada_attn.", ones);
    ad::NodeId plain = g.rmsnorm(x, ones);
    CHECK(bitwise_equal(g.values(ada), g.values(plain)));
}

TEST_CASE("adaptive rmsnorm and tau MLP gradients match finite differences") {
    Rng rng(9);
    const int w = 6, cols = 5, rows = 3;
    ad::GradCheckInput x{rows, cols, {}};
    ad::GradCheckInput e{1, w, {}};
    ad::GradCheckInput sw{w, cols, {}};
    ad::GradCheckInput sb{1, cols, {}};
    ad::GradCheckInput hw{w, cols, {}};
    ad::GradCheckInput hb{1, cols, {}};
    ad::GradCheckInput w1{w, w, {}};
    ad::GradCheckInput w2{w, w, {}};
    for (auto* in : {&x, &e, &sw, &sb, &hw, &hb, &w1, &w2}) {
        in->values.resize(static_cast<size_t>(in->rows) * in->cols);
        for (auto& v : in->values) v = 0.5 * rng.normal();
    }
    auto rep = ad::grad_check(
        [&](ad::Graph<double>& g, const std::vector<ad::NodeId>& in) {
            ad::NodeId ones = g.constant(1, cols, std::vector<double>(cols, 1.0));
            // tau mlp: swish(W2 * swish(W1 * phi))
            ad::NodeId emb = g.swish(g.matmul(g.swish(g.matmul(in[1], in[6])), in[7]));
            ad::NodeId scale = g.add(g.matmul(emb, in[2]), in[3]);
            ad::NodeId shift = g.add(g.matmul(emb, in[4]), in[5]);
            ad::NodeId xn = g.rmsnorm(in[0], ones);
            ad::NodeId y = g.add_rowvec(g.mul_rowvec(xn, g.add(scale, ones)), shift);
            return g.sum_all(g.mul(y, y));
        },
        {x, e, sw, sb, hw, hb, w1, w2}, 1e-5);
    CHECK(rep.pass);
}

TEST_CASE("forward output shapes follow the contract") {
    Rng rng(11);
    ModelConfig cfg = desk_config(Variant::Ours);
    auto params = Params<float>::init(cfg, 5);
    StreamInputs in = random_inputs(rng, cfg, 8, 6, 11);
    auto ts = build_token_stream(in, cfg, continuous_state());
    auto plan = build_attention_plan(ts, cfg.variant);
    auto out = run_forward(params, cfg, ts, plan, 0.4);
    CHECK(out.logits_rows == ts.backbone_len());
    CHECK(out.vocab == cfg.combined_vocab());
    CHECK(out.logits.size() == static_cast<size_t>(ts.backbone_len()) * cfg.combined_vocab());
    CHECK(out.flow.size() == static_cast<size_t>(cfg.horizon) * cfg.action_dim);
}

TEST_CASE("forward rejects tau/span inconsistencies") {
    Rng rng(12);
    ModelConfig cfg = desk_config(Variant::Ours);
    auto params = Params<float>::init(cfg, 5);
    StreamInputs in = random_inputs(rng, cfg, 8, 6, 11);
    auto ts = build_token_stream(in, cfg, continuous_state());
    auto plan = build_attention_plan(ts, cfg.variant);
    CHECK_THROWS_AS(run_forward(params, cfg, ts, plan, std::nullopt), std::invalid_argument);

    ModelConfig pf = desk_config(Variant::Pi0Fast);
    auto pf_params = Params<float>::init(pf, 5);
    auto ts_pf = build_token_stream(in, pf, continuous_state());
    auto plan_pf = build_attention_plan(ts_pf, pf.variant);
    CHECK_THROWS_AS(run_forward(pf_params, pf, ts_pf, plan_pf, 0.3), std::invalid_argument);
}

TEST_CASE("forward values are identical across barrier settings (ours vs joint)") {
    Rng rng(13);
    ModelConfig ours = desk_config(Variant::Ours);
    ModelConfig joint = desk_config(Variant::Joint);
    auto params = Params<float>::init(ours, 21);  // same weights for both
    for (int trial = 0; trial < 20; ++trial) {
        StreamInputs in = random_inputs(rng, ours, 8, 4 + trial % 4, 6 + trial % 9);
        const double tau = rng.uniform01();
        auto ts = build_token_stream(in, ours, continuous_state());
        auto plan_o = build_attention_plan(ts, Variant::Ours);
        auto plan_j = build_attention_plan(ts, Variant::Joint);
        auto out_o = run_forward(params, ours, ts, plan_o, tau);
        auto out_j = run_forward(params, joint, ts, plan_j, tau);
        CHECK(bitwise_equal(out_o.logits, out_j.logits));
        CHECK(bitwise_equal(out_o.flow, out_j.flow));
    }
}

namespace {

// flow-loss gradients per parameter set
template <typename S>
std::pair<bool, bool> flow_grad_presence(Variant v, uint64_t seed) {
    Rng rng(seed);
    ModelConfig cfg = desk_config(v);
    auto params = Params<S>::init(cfg, seed);
    StreamInputs in = random_inputs(rng, cfg, 8, 5, 9);
    auto ts = build_token_stream(in, cfg, continuous_state());
    auto plan = build_attention_plan(ts, cfg.variant);
    ad::Graph<S> g;
    auto bp = bind_params(g, params);
    auto fb = model_forward(g, bp, cfg, ts, plan, 0.37);
    ActionChunk a(cfg.horizon, cfg.action_dim);
    for (auto& x : a.values) x = rng.uniform(-1, 1);
    ActionChunk omega(cfg.horizon, cfg.action_dim);
    for (auto& x : omega.values) x = rng.normal();
    ad::NodeId loss = obj::flow_loss(g, fb.flow, a, omega);
    auto gm = g.backward(loss);
    bool backbone_nonzero = false, expert_nonzero = false;
    for (const auto& t : params.tensors) {
        const auto& grad = gm.grad(bp.id(t.name));
        bool nz = false;
        for (S v2 : grad) {
            if (v2 != S(0)) nz = true;
        }
        if (t.expert_set) {
            expert_nonzero |= nz;
        } else {
            backbone_nonzero |= nz;
        }
    }
    return {backbone_nonzero, expert_nonzero};
}

}  // namespace

TEST_CASE("structural insulation: flow loss reaches no backbone parameter under ours/frozen") {
    for (uint64_t seed = 1; seed <= 5; ++seed) {
        auto [backbone, expert] = flow_grad_presence<float>(Variant::Ours, seed);
        CHECK(!backbone);
        CHECK(expert);
        auto [fb_b, fb_e] = flow_grad_presence<float>(Variant::Frozen, seed);
        CHECK(!fb_b);
        CHECK(fb_e);
    }
}

TEST_CASE("joint training: flow loss reaches backbone parameters") {
    auto [backbone, expert] = flow_grad_presence<float>(Variant::Joint, 3);
    CHECK(backbone);
    CHECK(expert);
}

TEST_CASE("leakage: randomizing AR action tokens never changes expert outputs") {
    Rng rng(31);
    ModelConfig cfg = desk_config(Variant::Ours);
    auto params = Params<float>::init(cfg, 8);
    for (int trial = 0; trial < 20; ++trial) {
        StreamInputs in = random_inputs(rng, cfg, 8, 5, 10);
        const double tau = rng.uniform01();
        auto ts = build_token_stream(in, cfg, continuous_state());
        auto plan = build_attention_plan(ts, cfg.variant);
        auto base = run_forward(params, cfg, ts, plan, tau);

        StreamInputs in2 = in;
        for (auto& id : in2.action_ids) id = static_cast<int32_t>(rng.below(cfg.fast_vocab));
        auto ts2 = build_token_stream(in2, cfg, continuous_state());
        auto plan2 = build_attention_plan(ts2, cfg.variant);
        auto out2 = run_forward(params, cfg, ts2, plan2, tau);
        CHECK(bitwise_equal(base.flow, out2.flow));
    }
}

TEST_CASE("leakage: randomizing noisy-action payloads never changes backbone logits") {
    Rng rng(32);
    ModelConfig cfg = desk_config(Variant::Ours);
    auto params = Params<float>::init(cfg, 8);
    for (int trial = 0; trial < 20; ++trial) {
        StreamInputs in = random_inputs(rng, cfg, 8, 5, 10);
        const double tau = rng.uniform01();
        auto ts = build_token_stream(in, cfg, continuous_state());
        auto plan = build_attention_plan(ts, cfg.variant);
        auto base = run_forward(params, cfg, ts, plan, tau);

        StreamInputs in2 = in;
        ActionChunk noisy(cfg.horizon, cfg.action_dim);
        for (auto& v : noisy.values) v = rng.normal();
        in2.noisy_actions = noisy;
        auto ts2 = build_token_stream(in2, cfg, continuous_state());
        auto plan2 = build_attention_plan(ts2, cfg.variant);
        auto out2 = run_forward(params, cfg, ts2, plan2, tau);
        CHECK(bitwise_equal(base.logits, out2.logits));
    }
}

TEST_CASE("mask soundness: perturbing a masked key leaves earlier outputs unchanged") {
    Rng rng(33);
    ModelConfig cfg = desk_config(Variant::Ours);
    auto params = Params<float>::init(cfg, 9);
    StreamInputs in = random_inputs(rng, cfg, 8, 5, 8);
    auto ts = build_token_stream(in, cfg, continuous_state());
    auto plan = build_attention_plan(ts, cfg.variant);
    auto base = run_forward(params, cfg, ts, plan, 0.5);

    // perturb the last AR token id: every prefix row and earlier AR row has
    // mask -inf toward it
    StreamInputs in2 = in;
    in2.action_ids.back() = (in2.action_ids.back() + 1) % cfg.fast_vocab;
    auto ts2 = build_token_stream(in2, cfg, continuous_state());
    auto out2 = run_forward(params, cfg, ts2, plan, 0.5);
    const int changed_pos = ts.prefix_len + ts.ar_len - 2;  // the perturbed token position
    for (int r = 0; r < changed_pos; ++r) {
        CHECK(std::memcmp(base.logits.data() + static_cast<size_t>(r) * cfg.combined_vocab(),
                          out2.logits.data() + static_cast<size_t>(r) * cfg.combined_vocab(),
                          sizeof(double) * cfg.combined_vocab()) == 0);
    }
}

TEST_CASE("transfusion routes the expert span through backbone weights") {
    Rng rng(35);
    ModelConfig cfg = desk_config(Variant::Transfusion);
    auto params = Params<float>::init(cfg, 10);
    StreamInputs in = random_inputs(rng, cfg, 8, 5, 0);
    in.action_ids.clear();
    auto ts = build_token_stream(in, cfg, continuous_state());
    CHECK(ts.ar_len == 0);
    CHECK(ts.expert_len == cfg.horizon);
    auto plan = build_attention_plan(ts, cfg.variant);
    for (int i = ts.prefix_len; i < ts.size(); ++i) CHECK(plan.routing[i] == 0);
    auto out = run_forward(params, cfg, ts, plan, 0.2);
    CHECK(out.flow.size() == static_cast<size_t>(cfg.horizon) * cfg.action_dim);

    // flow gradients reach the shared backbone weights (no insulation here)
    ad::Graph<float> g;
    auto bp = bind_params(g, params);
    auto fb = model_forward(g, bp, cfg, ts, plan, 0.2);
    ActionChunk a(cfg.horizon, cfg.action_dim), omega(cfg.horizon, cfg.action_dim);
    for (auto& x : omega.values) x = rng.normal();
    auto gm = g.backward(obj::flow_loss(g, fb.flow, a, omega));
    bool backbone_nz = false;
    for (float v : gm.grad(bp.id("backbone.layer0.wk"))) backbone_nz |= v != 0.0f;
    CHECK(backbone_nz);
}

TEST_CASE("full tiny-model combined-loss gradient matches finite differences") {
    // The joint variant shares the forward computation with the barrier
    // variants but keeps every path differentiable, which is what a finite
    // difference of the full loss measures.
    ModelConfig cfg = tiny_config(Variant::Joint);
    auto params = Params<double>::init(cfg, 17);
    Rng rng(18);

    StreamInputs in;
    in.obs_tokens = 1;
    in.obs.assign(cfg.patch_channels, 0.0);
    in.obs[1] = 1.0;
    in.obs[3] = 1.0;
    in.instruction = {5};
    in.state = std::vector<double>{0.25, -0.5};
    in.action_ids = {3, 1};
    ActionChunk a(cfg.horizon, cfg.action_dim, {0.3, -0.2, 0.1, 0.6});
    ActionChunk omega(cfg.horizon, cfg.action_dim, {0.5, 0.1, -0.7, 0.2});
    in.noisy_actions = obj::noise_actions(a, 0.35, omega);
    const double tau = 0.35;

    auto ts = build_token_stream(in, cfg, continuous_state());
    CHECK(ts.size() == 1 + 1 + 1 + 3 + 2);
    auto plan = build_attention_plan(ts, cfg.variant);

    auto loss_value = [&](const Params<double>& p) {
        ad::Graph<double> g;
        auto bp = bind_params(g, p);
        auto fb = model_forward(g, bp, cfg, ts, plan, tau);
        auto lb = obj::combined_loss(g, fb, ts.ar_targets, std::make_pair(a, omega), 1.0);
        return g.scalar_value(lb.total);
    };

    // analytic gradients
    ad::Graph<double> g;
    auto bp = bind_params(g, params);
    auto fb = model_forward(g, bp, cfg, ts, plan, tau);
    auto lb = obj::combined_loss(g, fb, ts.ar_targets, std::make_pair(a, omega), 1.0);
    auto gm = g.backward(lb.total);

    double max_rel = 0.0;
    for (auto& t : params.tensors) {
        const auto& analytic = gm.grad(bp.id(t.name));
        for (size_t k = 0; k < t.v.size(); ++k) {
            const double x = t.v[k];
            const double h = 1e-4 * (1.0 + std::abs(x));
            t.v[k] = x + h;
            const double fp = loss_value(params);
            t.v[k] = x - h;
            const double fm = loss_value(params);
            t.v[k] = x;
            const double fd = (fp - fm) / (2.0 * h);
            const double denom = std::max({std::abs(analytic[k]), std::abs(fd), 1e-3});
            max_rel = std::max(max_rel, std::abs(analytic[k] - fd) / denom);
        }
    }
    CHECK(max_rel <= 1e-4);
}

TEST_CASE("caption streams carry no state or expert span") {
    ModelConfig cfg = desk_config(Variant::Ours);
    StreamInputs in;
    in.obs_tokens = 64;
    in.obs.assign(static_cast<size_t>(64) * cfg.patch_channels, 0.0);
    in.instruction = {9, 10, 5, 13, 17};  // where is the red square
    in.answer = {11, 27, 12, 29};
    in.is_caption = true;
    auto ts = build_token_stream(in, cfg, continuous_state());
    CHECK(ts.prefix_len == 64 + 5);
    CHECK(ts.ar_len == 5);  // answer + eos
    CHECK(ts.expert_len == 0);
    REQUIRE(ts.ar_targets.size() == 5);
    CHECK(ts.ar_targets[0].from_pos == ts.prefix_len - 1);
    CHECK(ts.ar_targets.back().target == vocab::kEos);
}
