#pragma once

#include <Eigen/Core>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <limits>
#include <memory>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace kivla::ad {

using NodeId = int32_t;

enum class Op : uint8_t {
    Input,
    Constant,
    Add,
    Sub,
    Mul,
    Scale,
    AddRowVec,
    MulRowVec,
    MatMul,
    MatMulBT,  // a * b^T
    SoftmaxRows,
    RmsNorm,
    Swish,
    Embed,
    StopGradient,
    ConcatRows,
    SliceRows,
    ConcatCols,
    SliceCols,
    CrossEntropyRows,
    SumAll,
};

template <typename S>
class Graph;

// Gradients keyed by node id. Nodes never reached by the backward sweep
// report an identically-zero gradient of the node's shape.
template <typename S>
class GradientMap {
public:
    bool touched(NodeId id) const { return grads_.count(id) != 0; }

    const std::vector<S>& grad(NodeId id) const {
        auto it = grads_.find(id);
        if (it != grads_.end()) return it->second;
        auto z = zeros_.find(id);
        if (z == zeros_.end()) {
            z = zeros_.emplace(id, std::vector<S>(sizes_.at(id), S(0))).first;
        }
        return z->second;
    }

private:
    template <typename>
    friend class Graph;
    std::unordered_map<NodeId, std::vector<S>> grads_;
    std::unordered_map<NodeId, size_t> sizes_;  // sizes of all input nodes
    mutable std::unordered_map<NodeId, std::vector<S>> zeros_;
};

// Reverse-mode autodiff over dense row-major matrices. Eager forward
// evaluation; op records are appended in creation order, which is also the
// topological order used by backward(). A graph instance is single-threaded;
// independent graphs may run concurrently.
template <typename S>
class Graph {
public:
    using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    using Map = Eigen::Map<Mat>;
    using CMap = Eigen::Map<const Mat>;

    struct Node {
        Op op;
        bool barrier = false;    // backward does not propagate into inputs
        bool trainable = false;  // meaningful for Input nodes
        int rows = 0, cols = 0;
        std::vector<NodeId> inputs;
        std::vector<S> storage;        // owned forward values (unless external)
        const S* external = nullptr;   // leaf values living outside the graph
        std::vector<S> ctx;            // saved forward context (inv-rms, CE probs, ...)
        std::shared_ptr<const std::vector<S>> mask;  // softmax additive mask (shared)
        int mask_row0 = 0;
        std::vector<int32_t> ids;      // embed ids / CE targets / slice offsets
        std::vector<S> weights;        // CE per-row weights
        double scalar = 0.0;           // Scale factor / CE weight sum

        size_t storage_size() const { return static_cast<size_t>(rows) * cols; }
    };

    NodeId input(int rows, int cols, const S* data, bool trainable) {
        Node n;
        n.op = Op::Input;
        n.trainable = trainable;
        n.rows = rows;
        n.cols = cols;
        n.external = data;
        return push(std::move(n));
    }

    NodeId value_input(int rows, int cols, std::vector<S> v, bool trainable) {
        check_size("input", rows, cols, v.size());
        Node n;
        n.op = Op::Input;
        n.trainable = trainable;
        n.rows = rows;
        n.cols = cols;
        n.storage = std::move(v);
        return push(std::move(n));
    }

    NodeId constant(int rows, int cols, std::vector<S> v) {
        check_size("constant", rows, cols, v.size());
        Node n;
        n.op = Op::Constant;
        n.rows = rows;
        n.cols = cols;
        n.storage = std::move(v);
        return push(std::move(n));
    }

    NodeId add(NodeId a, NodeId b) { return ew("add", Op::Add, a, b); }
    NodeId sub(NodeId a, NodeId b) { return ew("sub", Op::Sub, a, b); }
    NodeId mul(NodeId a, NodeId b) { return ew("mul", Op::Mul, a, b); }

    NodeId scale(NodeId a, double c) {
        const Node& na = at(a);
        Node n = blank(Op::Scale, na.rows, na.cols, {a});
        n.scalar = c;
        const S* x = data_of(na);
        for (size_t i = 0; i < n.storage.size(); ++i) n.storage[i] = static_cast<S>(c) * x[i];
        return push(std::move(n));
    }

    NodeId add_rowvec(NodeId a, NodeId v) { return rowvec("add_rowvec", Op::AddRowVec, a, v); }
    NodeId mul_rowvec(NodeId a, NodeId v) { return rowvec("mul_rowvec", Op::MulRowVec, a, v); }

    NodeId matmul(NodeId a, NodeId b) {
        const Node& na = at(a);
        const Node& nb = at(b);
        if (na.cols != nb.rows) {
            throw std::invalid_argument("matmul: shape mismatch (" + shape_str(na) + " x " +
                                        shape_str(nb) + ")");
        }
        Node n = blank(Op::MatMul, na.rows, nb.cols, {a, b});
        Map(n.storage.data(), n.rows, n.cols).noalias() =
            cmap(na) * cmap(nb);
        return push(std::move(n));
    }

    // a * b^T with b of shape (n x k), a of shape (m x k)
    NodeId matmul_bt(NodeId a, NodeId b) {
        const Node& na = at(a);
        const Node& nb = at(b);
        if (na.cols != nb.cols) {
            throw std::invalid_argument("matmul_bt: shape mismatch (" + shape_str(na) + " x " +
                                        shape_str(nb) + "^T)");
        }
        Node n = blank(Op::MatMulBT, na.rows, nb.rows, {a, b});
        Map(n.storage.data(), n.rows, n.cols).noalias() =
            cmap(na) * cmap(nb).transpose();
        return push(std::move(n));
    }

    // Row-wise softmax with an additive mask whose entries are 0 or -inf.
    // Masked entries are exactly zero in the output and are excluded from the
    // row max and the normalizer, so their inputs cannot perturb the result.
    NodeId softmax_rows(NodeId x, std::shared_ptr<const std::vector<S>> mask, int mask_row0 = 0) {
        const Node& nx = at(x);
        const size_t need = static_cast<size_t>(mask_row0 + nx.rows) * nx.cols;
        if (!mask || mask->size() < need) {
            throw std::invalid_argument("softmax_rows: mask shape mismatch");
        }
        Node n = blank(Op::SoftmaxRows, nx.rows, nx.cols, {x});
        n.mask = std::move(mask);
        n.mask_row0 = mask_row0;
        const S* xv = data_of(nx);
        const S* mv = n.mask->data() + static_cast<size_t>(mask_row0) * nx.cols;
        for (int r = 0; r < nx.rows; ++r) {
            const S* xr = xv + static_cast<size_t>(r) * nx.cols;
            const S* mr = mv + static_cast<size_t>(r) * nx.cols;
            S* or_ = n.storage.data() + static_cast<size_t>(r) * nx.cols;
            S m = -std::numeric_limits<S>::infinity();
            int alive = 0;
            for (int c = 0; c < nx.cols; ++c) {
                if (!masked(mr[c])) {
                    ++alive;
                    if (xr[c] > m) m = xr[c];
                }
            }
            if (alive == 0) {
                throw std::invalid_argument("softmax_rows: fully masked row " + std::to_string(r));
            }
            S denom = S(0);
            for (int c = 0; c < nx.cols; ++c) {
                if (masked(mr[c])) {
                    or_[c] = S(0);
                } else {
                    or_[c] = std::exp(xr[c] - m);
                    denom += or_[c];
                }
            }
            const S inv = S(1) / denom;
            for (int c = 0; c < nx.cols; ++c) or_[c] *= inv;
        }
        return push(std::move(n));
    }

    NodeId softmax_rows(NodeId x, const std::vector<S>& mask) {
        return softmax_rows(x, std::make_shared<const std::vector<S>>(mask), 0);
    }

    // Per-row x / rms(x) * gain; gain is 1 x cols.
    NodeId rmsnorm(NodeId x, NodeId gain, double eps = 1e-6) {
        const Node& nx = at(x);
        const Node& ng = at(gain);
        if (ng.rows != 1 || ng.cols != nx.cols) {
            throw std::invalid_argument("rmsnorm: gain must be 1x" + std::to_string(nx.cols) +
                                        ", got " + shape_str(ng));
        }
        Node n = blank(Op::RmsNorm, nx.rows, nx.cols, {x, gain});
        n.scalar = eps;
        n.ctx.resize(nx.rows);  // inverse rms per row
        const S* xv = data_of(nx);
        const S* gv = data_of(ng);
        for (int r = 0; r < nx.rows; ++r) {
            const S* xr = xv + static_cast<size_t>(r) * nx.cols;
            S* or_ = n.storage.data() + static_cast<size_t>(r) * nx.cols;
            S ss = S(0);
            for (int c = 0; c < nx.cols; ++c) ss += xr[c] * xr[c];
            const S inv = S(1) / std::sqrt(ss / static_cast<S>(nx.cols) + static_cast<S>(eps));
            n.ctx[r] = inv;
            for (int c = 0; c < nx.cols; ++c) or_[c] = xr[c] * inv * gv[c];
        }
        return push(std::move(n));
    }

    NodeId swish(NodeId x) {
        const Node& nx = at(x);
        Node n = blank(Op::Swish, nx.rows, nx.cols, {x});
        const S* xv = data_of(nx);
        for (size_t i = 0; i < n.storage.size(); ++i) {
            n.storage[i] = xv[i] * sigmoid(xv[i]);
        }
        return push(std::move(n));
    }

    NodeId embed(NodeId table, std::vector<int32_t> ids) {
        const Node& nt = at(table);
        for (size_t i = 0; i < ids.size(); ++i) {
            if (ids[i] < 0 || ids[i] >= nt.rows) {
                throw std::out_of_range("embed: id " + std::to_string(ids[i]) + " at position " +
                                        std::to_string(i) + " outside table with " +
                                        std::to_string(nt.rows) + " rows");
            }
        }
        Node n = blank(Op::Embed, static_cast<int>(ids.size()), nt.cols, {table});
        const S* tv = data_of(nt);
        for (size_t i = 0; i < ids.size(); ++i) {
            std::memcpy(n.storage.data() + i * nt.cols, tv + static_cast<size_t>(ids[i]) * nt.cols,
                        sizeof(S) * nt.cols);
        }
        n.ids = std::move(ids);
        return push(std::move(n));
    }

    // Identity forward; the edge to x is a gradient barrier consulted during
    // the backward traversal, so ancestors through this edge get a structural
    // (exact) zero gradient rather than a numerically small one.
    NodeId stop_gradient(NodeId x) {
        const Node& nx = at(x);
        Node n = blank(Op::StopGradient, nx.rows, nx.cols, {x});
        n.barrier = true;
        std::memcpy(n.storage.data(), data_of(nx), sizeof(S) * n.storage.size());
        return push(std::move(n));
    }

    NodeId concat_rows(const std::vector<NodeId>& parts) {
        if (parts.empty()) throw std::invalid_argument("concat_rows: no inputs");
        int cols = at(parts[0]).cols;
        int rows = 0;
        for (NodeId p : parts) {
            if (at(p).cols != cols) throw std::invalid_argument("concat_rows: column mismatch");
            rows += at(p).rows;
        }
        Node n = blank(Op::ConcatRows, rows, cols, parts);
        size_t off = 0;
        for (NodeId p : parts) {
            const Node& np = at(p);
            std::memcpy(n.storage.data() + off, data_of(np), sizeof(S) * np.storage_size());
            off += np.storage_size();
        }
        return push(std::move(n));
    }

    NodeId slice_rows(NodeId x, int r0, int r1) {
        const Node& nx = at(x);
        if (r0 < 0 || r1 > nx.rows || r0 >= r1) {
            throw std::invalid_argument("slice_rows: bad range [" + std::to_string(r0) + ", " +
                                        std::to_string(r1) + ") for " + shape_str(nx));
        }
        Node n = blank(Op::SliceRows, r1 - r0, nx.cols, {x});
        n.ids = {r0};
        std::memcpy(n.storage.data(), data_of(nx) + static_cast<size_t>(r0) * nx.cols,
                    sizeof(S) * n.storage.size());
        return push(std::move(n));
    }

    NodeId concat_cols(const std::vector<NodeId>& parts) {
        if (parts.empty()) throw std::invalid_argument("concat_cols: no inputs");
        int rows = at(parts[0]).rows;
        int cols = 0;
        for (NodeId p : parts) {
            if (at(p).rows != rows) throw std::invalid_argument("concat_cols: row mismatch");
            cols += at(p).cols;
        }
        Node n = blank(Op::ConcatCols, rows, cols, parts);
        int c0 = 0;
        for (NodeId p : parts) {
            const Node& np = at(p);
            const S* pv = data_of(np);
            for (int r = 0; r < rows; ++r) {
                std::memcpy(n.storage.data() + static_cast<size_t>(r) * cols + c0,
                            pv + static_cast<size_t>(r) * np.cols, sizeof(S) * np.cols);
            }
            c0 += np.cols;
        }
        return push(std::move(n));
    }

    NodeId slice_cols(NodeId x, int c0, int c1) {
        const Node& nx = at(x);
        if (c0 < 0 || c1 > nx.cols || c0 >= c1) {
            throw std::invalid_argument("slice_cols: bad range [" + std::to_string(c0) + ", " +
                                        std::to_string(c1) + ") for " + shape_str(nx));
        }
        Node n = blank(Op::SliceCols, nx.rows, c1 - c0, {x});
        n.ids = {c0};
        const S* xv = data_of(nx);
        for (int r = 0; r < nx.rows; ++r) {
            std::memcpy(n.storage.data() + static_cast<size_t>(r) * n.cols,
                        xv + static_cast<size_t>(r) * nx.cols + c0, sizeof(S) * n.cols);
        }
        return push(std::move(n));
    }

    // Weighted mean over rows of -log softmax(logits_row)[target]. Rows with
    // zero weight are skipped entirely and contribute no gradient.
    NodeId cross_entropy_rows(NodeId logits, std::vector<int32_t> targets, std::vector<S> weights) {
        const Node& nl = at(logits);
        if (static_cast<int>(targets.size()) != nl.rows ||
            static_cast<int>(weights.size()) != nl.rows) {
            throw std::invalid_argument("cross_entropy_rows: targets/weights must have one entry per row");
        }
        S wsum = S(0);
        for (int r = 0; r < nl.rows; ++r) {
            if (weights[r] > S(0)) {
                if (targets[r] < 0 || targets[r] >= nl.cols) {
                    throw std::out_of_range("cross_entropy_rows: target " + std::to_string(targets[r]) +
                                            " outside vocab of " + std::to_string(nl.cols));
                }
                wsum += weights[r];
            }
        }
        if (!(wsum > S(0))) {
            throw std::invalid_argument("cross_entropy_rows: no rows with positive weight");
        }
        Node n = blank(Op::CrossEntropyRows, 1, 1, {logits});
        n.ctx.assign(nl.storage_size(), S(0));  // probabilities for weighted rows
        n.scalar = static_cast<double>(wsum);
        const S* lv = data_of(nl);
        S loss = S(0);
        for (int r = 0; r < nl.rows; ++r) {
            if (!(weights[r] > S(0))) continue;
            const S* lr = lv + static_cast<size_t>(r) * nl.cols;
            S* pr = n.ctx.data() + static_cast<size_t>(r) * nl.cols;
            S m = lr[0];
            for (int c = 1; c < nl.cols; ++c) m = std::max(m, lr[c]);
            S denom = S(0);
            for (int c = 0; c < nl.cols; ++c) {
                pr[c] = std::exp(lr[c] - m);
                denom += pr[c];
            }
            const S inv = S(1) / denom;
            for (int c = 0; c < nl.cols; ++c) pr[c] *= inv;
            loss += weights[r] * (std::log(denom) + m - lr[targets[r]]);
        }
        n.storage[0] = loss / wsum;
        n.ids = std::move(targets);
        n.weights = std::move(weights);
        return push(std::move(n));
    }

    NodeId sum_all(NodeId x) {
        const Node& nx = at(x);
        Node n = blank(Op::SumAll, 1, 1, {x});
        const S* xv = data_of(nx);
        S s = S(0);
        for (size_t i = 0; i < nx.storage_size(); ++i) s += xv[i];
        n.storage[0] = s;
        return push(std::move(n));
    }

    // --- accessors ---

    int rows(NodeId id) const { return at(id).rows; }
    int cols(NodeId id) const { return at(id).cols; }
    size_t size() const { return nodes_.size(); }

    const S* data(NodeId id) const { return data_of(at(id)); }

    std::vector<S> values(NodeId id) const {
        const Node& n = at(id);
        const S* d = data_of(n);
        return std::vector<S>(d, d + n.storage_size());
    }

    S scalar_value(NodeId id) const {
        const Node& n = at(id);
        if (n.rows != 1 || n.cols != 1) {
            throw std::invalid_argument("scalar_value: node is " + shape_str(n));
        }
        return data_of(n)[0];
    }

    // Reverse sweep from a scalar loss. Visits records once, in reverse
    // creation order. Barrier edges (stop_gradient) are skipped, so any node
    // reachable only through them keeps an exact zero gradient. Returns
    // gradients for Input nodes; repeated calls are independent.
    GradientMap<S> backward(NodeId loss) const {
        const Node& nl = at(loss);
        if (nl.rows != 1 || nl.cols != 1) {
            throw std::invalid_argument("backward: loss must be scalar, got " + shape_str(nl));
        }
        std::vector<std::vector<S>> adj(nodes_.size());
        adj[loss] = {S(1)};
        for (NodeId id = loss; id >= 0; --id) {
            const Node& n = nodes_[id];
            if (adj[id].empty()) continue;
            if (n.barrier || n.op == Op::Input || n.op == Op::Constant) {
                if (n.op != Op::Input) adj[id].clear(), adj[id].shrink_to_fit();
                continue;
            }
            backward_op(id, n, adj);
            adj[id].clear();
            adj[id].shrink_to_fit();
        }
        GradientMap<S> gm;
        for (NodeId id = 0; id < static_cast<NodeId>(nodes_.size()); ++id) {
            const Node& n = nodes_[id];
            if (n.op != Op::Input) continue;
            gm.sizes_[id] = n.storage_size();
            if (!adj[id].empty()) gm.grads_[id] = std::move(adj[id]);
        }
        return gm;
    }

    bool trainable(NodeId id) const { return at(id).trainable; }

private:
    std::vector<Node> nodes_;

    static bool masked(S m) { return m == -std::numeric_limits<S>::infinity(); }

    static S sigmoid(S x) { return S(1) / (S(1) + std::exp(-x)); }

    static void check_size(const char* what, int rows, int cols, size_t got) {
        if (got != static_cast<size_t>(rows) * cols) {
            throw std::invalid_argument(std::string(what) + ": value count " + std::to_string(got) +
                                        " does not match " + std::to_string(rows) + "x" +
                                        std::to_string(cols));
        }
    }

    static std::string shape_str(const Node& n) {
        return std::to_string(n.rows) + "x" + std::to_string(n.cols);
    }

    Node blank(Op op, int rows, int cols, std::vector<NodeId> inputs) {
        Node n;
        n.op = op;
        n.rows = rows;
        n.cols = cols;
        n.inputs = std::move(inputs);
        n.storage.resize(static_cast<size_t>(rows) * cols);
        return n;
    }

    NodeId push(Node&& n) {
        nodes_.push_back(std::move(n));
        return static_cast<NodeId>(nodes_.size() - 1);
    }

    const Node& at(NodeId id) const {
        if (id < 0 || id >= static_cast<NodeId>(nodes_.size())) {
            throw std::out_of_range("graph: bad node id " + std::to_string(id));
        }
        return nodes_[id];
    }

    static const S* data_of(const Node& n) { return n.external ? n.external : n.storage.data(); }

    CMap cmap(const Node& n) const { return CMap(data_of(n), n.rows, n.cols); }

    NodeId ew(const char* what, Op op, NodeId a, NodeId b) {
        const Node& na = at(a);
        const Node& nb = at(b);
        if (na.rows != nb.rows || na.cols != nb.cols) {
            throw std::invalid_argument(std::string(what) + ": shape mismatch (" + shape_str(na) +
                                        " vs " + shape_str(nb) + ")");
        }
        Node n = blank(op, na.rows, na.cols, {a, b});
        const S* x = data_of(na);
        const S* y = data_of(nb);
        switch (op) {
            case Op::Add:
                for (size_t i = 0; i < n.storage.size(); ++i) n.storage[i] = x[i] + y[i];
                break;
            case Op::Sub:
                for (size_t i = 0; i < n.storage.size(); ++i) n.storage[i] = x[i] - y[i];
                break;
            case Op::Mul:
                for (size_t i = 0; i < n.storage.size(); ++i) n.storage[i] = x[i] * y[i];
                break;
            default:
                throw std::logic_error("ew: bad op");
        }
        return push(std::move(n));
    }

    NodeId rowvec(const char* what, Op op, NodeId a, NodeId v) {
        const Node& na = at(a);
        const Node& nv = at(v);
        if (nv.rows != 1 || nv.cols != na.cols) {
            throw std::invalid_argument(std::string(what) + ": vector must be 1x" +
                                        std::to_string(na.cols) + ", got " + shape_str(nv));
        }
        Node n = blank(op, na.rows, na.cols, {a, v});
        const S* x = data_of(na);
        const S* y = data_of(nv);
        for (int r = 0; r < na.rows; ++r) {
            const S* xr = x + static_cast<size_t>(r) * na.cols;
            S* or_ = n.storage.data() + static_cast<size_t>(r) * na.cols;
            if (op == Op::AddRowVec) {
                for (int c = 0; c < na.cols; ++c) or_[c] = xr[c] + y[c];
            } else {
                for (int c = 0; c < na.cols; ++c) or_[c] = xr[c] * y[c];
            }
        }
        return push(std::move(n));
    }

    std::vector<S>& acc(NodeId id, std::vector<std::vector<S>>& adj) const {
        auto& v = adj[id];
        if (v.empty()) v.assign(nodes_[id].storage_size(), S(0));
        return v;
    }

    void backward_op(NodeId id, const Node& n, std::vector<std::vector<S>>& adj) const {
        const std::vector<S>& dy = adj[id];
        switch (n.op) {
            case Op::Add: {
                auto& da = acc(n.inputs[0], adj);
                auto& db = acc(n.inputs[1], adj);
                for (size_t i = 0; i < dy.size(); ++i) da[i] += dy[i];
                for (size_t i = 0; i < dy.size(); ++i) db[i] += dy[i];
                break;
            }
            case Op::Sub: {
                auto& da = acc(n.inputs[0], adj);
                auto& db = acc(n.inputs[1], adj);
                for (size_t i = 0; i < dy.size(); ++i) da[i] += dy[i];
                for (size_t i = 0; i < dy.size(); ++i) db[i] -= dy[i];
                break;
            }
            case Op::Mul: {
                const S* a = data_of(nodes_[n.inputs[0]]);
                const S* b = data_of(nodes_[n.inputs[1]]);
                auto& da = acc(n.inputs[0], adj);
                auto& db = acc(n.inputs[1], adj);
                for (size_t i = 0; i < dy.size(); ++i) da[i] += dy[i] * b[i];
                for (size_t i = 0; i < dy.size(); ++i) db[i] += dy[i] * a[i];
                break;
            }
            case Op::Scale: {
                auto& da = acc(n.inputs[0], adj);
                const S c = static_cast<S>(n.scalar);
                for (size_t i = 0; i < dy.size(); ++i) da[i] += c * dy[i];
                break;
            }
            case Op::AddRowVec: {
                auto& da = acc(n.inputs[0], adj);
                auto& dv = acc(n.inputs[1], adj);
                for (size_t i = 0; i < dy.size(); ++i) da[i] += dy[i];
                for (int r = 0; r < n.rows; ++r) {
                    const S* dr = dy.data() + static_cast<size_t>(r) * n.cols;
                    for (int c = 0; c < n.cols; ++c) dv[c] += dr[c];
                }
                break;
            }
            case Op::MulRowVec: {
                const S* a = data_of(nodes_[n.inputs[0]]);
                const S* v = data_of(nodes_[n.inputs[1]]);
                auto& da = acc(n.inputs[0], adj);
                auto& dv = acc(n.inputs[1], adj);
                for (int r = 0; r < n.rows; ++r) {
                    const size_t off = static_cast<size_t>(r) * n.cols;
                    for (int c = 0; c < n.cols; ++c) {
                        da[off + c] += dy[off + c] * v[c];
                        dv[c] += dy[off + c] * a[off + c];
                    }
                }
                break;
            }
            case Op::MatMul: {
                const Node& na = nodes_[n.inputs[0]];
                const Node& nb = nodes_[n.inputs[1]];
                CMap dym(dy.data(), n.rows, n.cols);
                Map(acc(n.inputs[0], adj).data(), na.rows, na.cols).noalias() +=
                    dym * cmap(nb).transpose();
                Map(acc(n.inputs[1], adj).data(), nb.rows, nb.cols).noalias() +=
                    cmap(na).transpose() * dym;
                break;
            }
            case Op::MatMulBT: {
                const Node& na = nodes_[n.inputs[0]];
                const Node& nb = nodes_[n.inputs[1]];
                CMap dym(dy.data(), n.rows, n.cols);
                Map(acc(n.inputs[0], adj).data(), na.rows, na.cols).noalias() += dym * cmap(nb);
                Map(acc(n.inputs[1], adj).data(), nb.rows, nb.cols).noalias() +=
                    dym.transpose() * cmap(na);
                break;
            }
            case Op::SoftmaxRows: {
                auto& dx = acc(n.inputs[0], adj);
                for (int r = 0; r < n.rows; ++r) {
                    const size_t off = static_cast<size_t>(r) * n.cols;
                    const S* p = n.storage.data() + off;
                    S dot = S(0);
                    for (int c = 0; c < n.cols; ++c) dot += dy[off + c] * p[c];
                    for (int c = 0; c < n.cols; ++c) dx[off + c] += p[c] * (dy[off + c] - dot);
                }
                break;
            }
            case Op::RmsNorm: {
                const Node& nx = nodes_[n.inputs[0]];
                const Node& ng = nodes_[n.inputs[1]];
                const S* x = data_of(nx);
                const S* g = data_of(ng);
                auto& dx = acc(n.inputs[0], adj);
                auto& dg = acc(n.inputs[1], adj);
                const S invn = S(1) / static_cast<S>(n.cols);
                for (int r = 0; r < n.rows; ++r) {
                    const size_t off = static_cast<size_t>(r) * n.cols;
                    const S inv = n.ctx[r];
                    S dot = S(0);
                    for (int c = 0; c < n.cols; ++c) dot += dy[off + c] * g[c] * x[off + c];
                    const S k = dot * inv * inv * inv * invn;
                    for (int c = 0; c < n.cols; ++c) {
                        dx[off + c] += dy[off + c] * g[c] * inv - x[off + c] * k;
                        dg[c] += dy[off + c] * x[off + c] * inv;
                    }
                }
                break;
            }
            case Op::Swish: {
                const S* x = data_of(nodes_[n.inputs[0]]);
                auto& dx = acc(n.inputs[0], adj);
                for (size_t i = 0; i < dy.size(); ++i) {
                    const S s = sigmoid(x[i]);
                    dx[i] += dy[i] * s * (S(1) + x[i] * (S(1) - s));
                }
                break;
            }
            case Op::Embed: {
                const Node& nt = nodes_[n.inputs[0]];
                auto& dt = acc(n.inputs[0], adj);
                for (size_t i = 0; i < n.ids.size(); ++i) {
                    const size_t srow = static_cast<size_t>(i) * nt.cols;
                    const size_t trow = static_cast<size_t>(n.ids[i]) * nt.cols;
                    for (int c = 0; c < nt.cols; ++c) dt[trow + c] += dy[srow + c];
                }
                break;
            }
            case Op::ConcatRows: {
                size_t off = 0;
                for (NodeId p : n.inputs) {
                    auto& dp = acc(p, adj);
                    for (size_t i = 0; i < dp.size(); ++i) dp[i] += dy[off + i];
                    off += dp.size();
                }
                break;
            }
            case Op::SliceRows: {
                auto& dx = acc(n.inputs[0], adj);
                const size_t off = static_cast<size_t>(n.ids[0]) * n.cols;
                for (size_t i = 0; i < dy.size(); ++i) dx[off + i] += dy[i];
                break;
            }
            case Op::ConcatCols: {
                int c0 = 0;
                for (NodeId p : n.inputs) {
                    const Node& np = nodes_[p];
                    auto& dp = acc(p, adj);
                    for (int r = 0; r < n.rows; ++r) {
                        const size_t doff = static_cast<size_t>(r) * n.cols + c0;
                        const size_t poff = static_cast<size_t>(r) * np.cols;
                        for (int c = 0; c < np.cols; ++c) dp[poff + c] += dy[doff + c];
                    }
                    c0 += np.cols;
                }
                break;
            }
            case Op::SliceCols: {
                const Node& nx = nodes_[n.inputs[0]];
                auto& dx = acc(n.inputs[0], adj);
                const int c0 = n.ids[0];
                for (int r = 0; r < n.rows; ++r) {
                    const size_t doff = static_cast<size_t>(r) * n.cols;
                    const size_t xoff = static_cast<size_t>(r) * nx.cols + c0;
                    for (int c = 0; c < n.cols; ++c) dx[xoff + c] += dy[doff + c];
                }
                break;
            }
            case Op::CrossEntropyRows: {
                const Node& nl = nodes_[n.inputs[0]];
                auto& dl = acc(n.inputs[0], adj);
                const S d = dy[0] / static_cast<S>(n.scalar);
                for (int r = 0; r < nl.rows; ++r) {
                    if (!(n.weights[r] > S(0))) continue;
                    const size_t off = static_cast<size_t>(r) * nl.cols;
                    const S wr = n.weights[r] * d;
                    for (int c = 0; c < nl.cols; ++c) dl[off + c] += wr * n.ctx[off + c];
                    dl[off + n.ids[r]] -= wr;
                }
                break;
            }
            case Op::SumAll: {
                auto& dx = acc(n.inputs[0], adj);
                for (size_t i = 0; i < dx.size(); ++i) dx[i] += dy[0];
                break;
            }
            case Op::StopGradient:
            case Op::Input:
            case Op::Constant:
                break;
        }
    }
};

}  // namespace kivla::ad
