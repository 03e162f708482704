#pragma once

#include <cmath>
#include <optional>
#include <stdexcept>
#include <vector>

#include "kivla/chunk.hpp"
#include "kivla/graph.hpp"
#include "kivla/model.hpp"
#include "kivla/rng.hpp"

namespace kivla::obj {

// a^{tau,omega} = tau * a + (1 - tau) * omega
inline ActionChunk noise_actions(const ActionChunk& a, double tau, const ActionChunk& omega) {
    if (a.horizon != omega.horizon || a.dim != omega.dim) {
        throw std::invalid_argument("noise_actions: shape mismatch");
    }
    if (tau < 0.0 || tau > 1.0) throw std::invalid_argument("noise_actions: tau outside [0, 1]");
    ActionChunk out(a.horizon, a.dim);
    for (size_t i = 0; i < a.values.size(); ++i) {
        out.values[i] = tau * a.values[i] + (1.0 - tau) * omega.values[i];
    }
    return out;
}

// the regression target omega - a
inline ActionChunk flow_target(const ActionChunk& a, const ActionChunk& omega) {
    if (a.horizon != omega.horizon || a.dim != omega.dim) {
        throw std::invalid_argument("flow_target: shape mismatch");
    }
    ActionChunk out(a.horizon, a.dim);
    for (size_t i = 0; i < a.values.size(); ++i) out.values[i] = omega.values[i] - a.values[i];
    return out;
}

inline ActionChunk sample_omega(Rng& rng, int horizon, int dim) {
    ActionChunk out(horizon, dim);
    for (auto& v : out.values) v = rng.normal();
    return out;
}

// tau ~ s * (1 - u) with u ~ Beta(alpha, 1) drawn by inverse CDF; emphasizes
// low timesteps. Support is [0, s].
struct TimestepSampler {
    double s = 0.999;
    double alpha = 1.5;
    double beta = 1.0;

    double sample(Rng& rng) const {
        const double v = rng.uniform01();
        const double u = std::pow(v, 1.0 / alpha);
        return s * (1.0 - u);
    }

    double cdf(double tau) const {
        if (tau <= 0) return 0.0;
        if (tau >= s) return 1.0;
        return 1.0 - std::pow((s - tau) / s, alpha);
    }
};

// Mean over target positions of -log p(target); logits row `from_pos`
// predicts the token at `pos` (next-token shift, or same-position for
// parallel decoding spans).
template <typename S>
ad::NodeId ar_loss(ad::Graph<S>& g, ad::NodeId logits,
                   const std::vector<model::ArTarget>& targets) {
    if (targets.empty()) throw std::invalid_argument("ar_loss: no masked positions");
    const int rows = g.rows(logits);
    std::vector<int32_t> row_targets(rows, 0);
    std::vector<S> weights(rows, S(0));
    for (const auto& t : targets) {
        if (t.from_pos < 0 || t.from_pos >= rows) {
            throw std::invalid_argument("ar_loss: target position outside the logits rows");
        }
        row_targets[t.from_pos] = t.target;
        weights[t.from_pos] = S(1);
    }
    return g.cross_entropy_rows(logits, std::move(row_targets), std::move(weights));
}

// M^act * mean squared error between the prediction and omega - a.
template <typename S>
ad::NodeId flow_loss(ad::Graph<S>& g, ad::NodeId flow_pred, const ActionChunk& a,
                     const ActionChunk& omega) {
    const ActionChunk target = flow_target(a, omega);
    if (g.rows(flow_pred) != target.horizon || g.cols(flow_pred) != target.dim) {
        throw std::invalid_argument("flow_loss: prediction shape mismatch");
    }
    std::vector<S> tv(target.values.size());
    for (size_t i = 0; i < tv.size(); ++i) tv[i] = static_cast<S>(target.values[i]);
    ad::NodeId t = g.constant(target.horizon, target.dim, std::move(tv));
    ad::NodeId d = g.sub(flow_pred, t);
    return g.scale(g.sum_all(g.mul(d, d)), 1.0 / static_cast<double>(target.values.size()));
}

struct LossBreakdown {
    double ar = 0.0;
    double flow = 0.0;
    double alpha = 1.0;
    double total = 0.0;
    int ar_tokens = 0;
    int flow_elems = 0;
};

template <typename S>
struct LossBuild {
    ad::NodeId total = -1;
    ad::NodeId ar = -1;
    ad::NodeId flow = -1;
};

// total = ar + alpha * flow over whichever spans the example carries.
template <typename S>
LossBuild<S> combined_loss(ad::Graph<S>& g, const model::ForwardBuild& fb,
                           const std::vector<model::ArTarget>& targets,
                           const std::optional<std::pair<ActionChunk, ActionChunk>>& action_pair,
                           double alpha) {
    LossBuild<S> out;
    if (!targets.empty()) out.ar = ar_loss(g, fb.logits, targets);
    if (fb.flow >= 0 && action_pair.has_value()) {
        out.flow = flow_loss(g, fb.flow, action_pair->first, action_pair->second);
    }
    if (out.ar >= 0 && out.flow >= 0) {
        out.total = g.add(out.ar, g.scale(out.flow, alpha));
    } else if (out.ar >= 0) {
        out.total = out.ar;
    } else if (out.flow >= 0) {
        out.total = g.scale(out.flow, alpha);
    } else {
        throw std::invalid_argument("combined_loss: example carries neither AR targets nor actions");
    }
    return out;
}

template <typename S>
LossBreakdown extract_breakdown(const ad::Graph<S>& g, const LossBuild<S>& lb, double alpha,
                                int ar_tokens, int flow_elems) {
    LossBreakdown b;
    b.alpha = alpha;
    b.ar = lb.ar >= 0 ? static_cast<double>(g.scalar_value(lb.ar)) : 0.0;
    b.flow = lb.flow >= 0 ? static_cast<double>(g.scalar_value(lb.flow)) : 0.0;
    b.total = b.ar + alpha * b.flow;
    b.ar_tokens = ar_tokens;
    b.flow_elems = flow_elems;
    return b;
}

}  // namespace kivla::obj
