#include <algorithm>
#include <cmath>
#include <cstring>

#include "doctest.h"
#include "kivla/model.hpp"
#include "kivla/objectives.hpp"
#include "kivla/rng.hpp"

using namespace kivla;
using namespace kivla::obj;

TEST_CASE("noising endpoints and midpoint") {
    ActionChunk a(1, 2, {1.0, 0.0});
    ActionChunk w(1, 2, {0.0, 2.0});
    CHECK(noise_actions(a, 1.0, w).values == a.values);
    CHECK(noise_actions(a, 0.0, w).values == w.values);
    CHECK(noise_actions(a, 0.5, w).values == std::vector<double>{0.5, 1.0});

    Rng rng(4);
    for (int i = 0; i < 100; ++i) {
        ActionChunk x(2, 3), y(2, 3);
        for (auto& v : x.values) v = rng.normal();
        for (auto& v : y.values) v = rng.normal();
        CHECK(noise_actions(x, 1.0, y).values == x.values);
        CHECK(noise_actions(x, 0.0, y).values == y.values);
    }
}

TEST_CASE("flow target is omega minus a, and is linear") {
    ActionChunk a(1, 2, {1.0, 0.0});
    ActionChunk w(1, 2, {0.0, 2.0});
    CHECK(flow_target(a, w).values == std::vector<double>{-1.0, 2.0});
    CHECK(flow_target(a, a).values == std::vector<double>{0.0, 0.0});

    ActionChunk a2(1, 2, {2.0, 0.0});
    ActionChunk w2(1, 2, {0.0, 4.0});
    auto t1 = flow_target(a, w);
    auto t2 = flow_target(a2, w2);
    for (size_t i = 0; i < t1.values.size(); ++i) CHECK(t2.values[i] == 2.0 * t1.values[i]);
}

TEST_CASE("timestep sampler: support, mean, median, and KS statistic") {
    TimestepSampler sampler;
    Rng rng(2718);
    const int n = 100000;
    std::vector<double> samples(n);
    for (auto& s : samples) {
        s = sampler.sample(rng);
        CHECK(s >= 0.0);
        CHECK(s <= sampler.s);
    }
    double mean = 0;
    for (double s : samples) mean += s;
    mean /= n;
    // analytic Beta mean: s * (1 - alpha/(alpha+beta)) = 0.999 * 0.4
    CHECK(std::abs(mean - 0.3996) < 0.01);

    std::sort(samples.begin(), samples.end());
    const double median = samples[n / 2];
    CHECK(std::abs(median - 0.999 * (1.0 - std::pow(0.5, 2.0 / 3.0))) < 0.01);

    // KS statistic against 1 - ((s - tau)/s)^1.5
    double ks = 0;
    for (int i = 0; i < n; ++i) {
        const double f = sampler.cdf(samples[i]);
        ks = std::max(ks, std::abs(f - static_cast<double>(i + 1) / n));
        ks = std::max(ks, std::abs(f - static_cast<double>(i) / n));
    }
    CHECK(ks < 0.01);
}

TEST_CASE("ar loss: uniform logits cost ln(vocab), one-hot logits cost ~0") {
    ad::Graph<double> g;
    ad::NodeId logits = g.value_input(3, 4, std::vector<double>(12, 0.0), true);
    std::vector<model::ArTarget> targets = {{1, 2, 0}, {2, 1, 1}, {3, 0, 2}};
    ad::NodeId loss = ar_loss(g, logits, targets);
    CHECK(g.scalar_value(loss) == doctest::Approx(std::log(4.0)).epsilon(1e-12));

    std::vector<double> sharp(12, 0.0);
    sharp[0 * 4 + 2] = 50.0;
    sharp[1 * 4 + 1] = 50.0;
    sharp[2 * 4 + 0] = 50.0;
    ad::Graph<double> g2;
    ad::NodeId sl = g2.value_input(3, 4, sharp, true);
    CHECK(g2.scalar_value(ar_loss(g2, sl, targets)) < 1e-12);
}

TEST_CASE("ar loss: masked-out rows contribute exactly zero gradient") {
    Rng rng(5);
    ad::Graph<double> g;
    std::vector<double> lv(20);
    for (auto& v : lv) v = rng.normal();
    ad::NodeId logits = g.value_input(4, 5, lv, true);
    std::vector<model::ArTarget> targets = {{1, 3, 0}, {3, 1, 2}};  // rows 1 and 3 unmasked
    auto gm = g.backward(ar_loss(g, logits, targets));
    const auto& grad = gm.grad(logits);
    for (int c = 0; c < 5; ++c) {
        CHECK(grad[1 * 5 + c] == 0.0);
        CHECK(grad[3 * 5 + c] == 0.0);
    }
    double row0 = 0;
    for (int c = 0; c < 5; ++c) row0 += std::abs(grad[0 * 5 + c]);
    CHECK(row0 > 0.0);
}

TEST_CASE("ar loss rejects an empty mask") {
    ad::Graph<double> g;
    ad::NodeId logits = g.value_input(2, 3, std::vector<double>(6, 0.0), true);
    CHECK_THROWS_AS(ar_loss(g, logits, {}), std::invalid_argument);
}

TEST_CASE("ar loss is invariant under vocab relabeling") {
    Rng rng(6);
    std::vector<double> lv(4 * 7);
    for (auto& v : lv) v = rng.normal();
    std::vector<model::ArTarget> targets = {{1, 2, 0}, {2, 6, 1}, {3, 0, 3}};

    // permutation of the vocab
    std::vector<int> perm = {3, 5, 0, 6, 2, 1, 4};
    std::vector<double> lv2(lv.size());
    for (int r = 0; r < 4; ++r) {
        for (int c = 0; c < 7; ++c) lv2[r * 7 + perm[c]] = lv[r * 7 + c];
    }
    std::vector<model::ArTarget> targets2 = targets;
    for (auto& t : targets2) t.target = perm[t.target];

    ad::Graph<double> g1, g2;
    const double a = g1.scalar_value(ar_loss(g1, g1.value_input(4, 7, lv, true), targets));
    const double b = g2.scalar_value(ar_loss(g2, g2.value_input(4, 7, lv2, true), targets2));
    CHECK(a == b);
}

TEST_CASE("flow loss zeros and gradient formula") {
    ActionChunk a(2, 2, {0.1, -0.4, 0.5, 0.0});
    ActionChunk w(2, 2, {0.6, 0.2, -0.3, 0.9});
    auto target = flow_target(a, w);

    ad::Graph<double> g;
    ad::NodeId pred = g.value_input(2, 2, target.values, true);
    CHECK(g.scalar_value(flow_loss(g, pred, a, w)) == 0.0);

    ad::Graph<double> g2;
    ad::NodeId zero_pred = g2.value_input(2, 2, std::vector<double>(4, 0.0), true);
    CHECK(g2.scalar_value(flow_loss(g2, zero_pred, a, a)) == 0.0);

    // gradient w.r.t. prediction is 2/(H*d) * (pred - target)
    Rng rng(7);
    std::vector<double> pv(4);
    for (auto& v : pv) v = rng.normal();
    ad::Graph<double> g3;
    ad::NodeId p3 = g3.value_input(2, 2, pv, true);
    auto gm = g3.backward(flow_loss(g3, p3, a, w));
    const auto& grad = gm.grad(p3);
    for (int i = 0; i < 4; ++i) {
        CHECK(std::abs(grad[i] - 2.0 / 4.0 * (pv[i] - target.values[i])) < 1e-10);
    }
}

TEST_CASE("combined loss: alpha handling and span presence") {
    // build a tiny model so spans behave exactly as in training
    model::ModelConfig cfg;
    cfg.backbone_width = 8;
    cfg.expert_width = 8;
    cfg.depth = 1;
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

    Rng rng(8);
    ActionChunk a(2, 2, {0.2, -0.1, 0.4, 0.3});
    ActionChunk w(2, 2, {0.5, 0.5, -0.5, 0.1});
    model::StreamInputs in;
    in.obs_tokens = 1;
    in.obs.assign(cfg.patch_channels, 0.0);
    in.obs[0] = 1.0;
    in.instruction = {4};
    in.state = std::vector<double>{0.1, 0.2};
    in.action_ids = {1, 5};
    in.noisy_actions = noise_actions(a, 0.5, w);
    codec::StateEncoding enc{codec::StateVariant::Continuous, 0, {}};

    auto run = [&](model::Variant v, double alpha) {
        model::ModelConfig c2 = cfg;
        c2.variant = v;
        auto params = model::Params<double>::init(c2, 5);
        auto ts = build_token_stream(in, c2, enc);
        auto plan = build_attention_plan(ts, v);
        ad::Graph<double> g;
        auto bp = bind_params(g, params);
        auto fb = model_forward(g, bp, c2, ts, plan,
                                ts.expert_len > 0 ? std::optional<double>(0.5) : std::nullopt);
        auto lb = combined_loss(g, fb, ts.ar_targets,
                                ts.expert_len > 0
                                    ? std::optional<std::pair<ActionChunk, ActionChunk>>({a, w})
                                    : std::nullopt,
                                alpha);
        LossBreakdown bd = extract_breakdown(g, lb, alpha, static_cast<int>(ts.ar_targets.size()),
                                             ts.expert_len * cfg.action_dim);
        return bd;
    };

    auto both = run(model::Variant::Joint, 1.0);
    CHECK(both.ar > 0);
    CHECK(both.flow > 0);
    CHECK(both.total == doctest::Approx(both.ar + both.flow).epsilon(1e-12));

    auto alpha0 = run(model::Variant::Joint, 0.0);
    CHECK(alpha0.total == doctest::Approx(alpha0.ar).epsilon(1e-12));

    auto pi0 = run(model::Variant::Pi0, 1.0);
    CHECK(pi0.ar == 0.0);
    CHECK(pi0.flow > 0.0);
    CHECK(pi0.total == doctest::Approx(pi0.flow).epsilon(1e-12));

    auto half = run(model::Variant::Joint, 0.5);
    CHECK(half.total == doctest::Approx(half.ar + 0.5 * half.flow).epsilon(1e-12));
}

TEST_CASE("under the barrier, backbone gradients equal the AR-only gradients exactly") {
    model::ModelConfig cfg;
    cfg.variant = model::Variant::Ours;
    auto params = model::Params<float>::init(cfg, 33);
    Rng rng(34);

    model::StreamInputs in;
    in.obs_tokens = 64;
    in.obs.assign(static_cast<size_t>(64) * cfg.patch_channels, 0.0);
    for (int i = 0; i < 12; ++i) in.obs[rng.below(in.obs.size())] = 1.0;
    in.instruction = {4, 5, 13, 17, 6, 5, 21};
    in.state = std::vector<double>{3.0, 4.0, 0.0};
    for (int i = 0; i < 9; ++i) in.action_ids.push_back(static_cast<int32_t>(rng.below(256)));
    ActionChunk a(cfg.horizon, cfg.action_dim);
    ActionChunk w(cfg.horizon, cfg.action_dim);
    for (auto& v : a.values) v = rng.uniform(-1, 1);
    for (auto& v : w.values) v = rng.normal();
    in.noisy_actions = noise_actions(a, 0.3, w);
    codec::StateEncoding enc{codec::StateVariant::Continuous, 0, {}};
    auto ts = build_token_stream(in, cfg, enc);
    auto plan = build_attention_plan(ts, cfg.variant);

    ad::Graph<float> g;
    auto bp = bind_params(g, params);
    auto fb = model_forward(g, bp, cfg, ts, plan, 0.3);
    auto lb = combined_loss(g, fb, ts.ar_targets,
                            std::optional<std::pair<ActionChunk, ActionChunk>>({a, w}), 1.0);
    auto gm_total = g.backward(lb.total);
    auto gm_ar = g.backward(lb.ar);

    for (const auto& t : params.tensors) {
        if (t.expert_set) continue;
        const auto& gt = gm_total.grad(bp.id(t.name));
        const auto& ga = gm_ar.grad(bp.id(t.name));
        REQUIRE(gt.size() == ga.size());
        CHECK(std::memcmp(gt.data(), ga.data(), sizeof(float) * gt.size()) == 0);
    }
}
