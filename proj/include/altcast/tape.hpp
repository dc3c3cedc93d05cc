#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "altcast/errors.hpp"
#include "altcast/tensor.hpp"

namespace altcast {

// Reverse-mode differentiation over dense double tensors. Eager tape:
// every op records a node holding its output; backward walks the tape in
// reverse creation order, which is a valid topological order by construction.

enum class OpKind {
    Leaf,
    Constant,
    MatMul,
    Add,
    Sub,
    Mul,
    Scale,
    AddRowVec,
    Transpose,
    MaskedSoftmax,   // row softmax over off-diagonal entries, diagonal exactly 0
    LayerNorm,
    Gelu,
    ReduceSum,
    AbsSum,
    Mse,
    SliceRows,
    ConcatRows,
    GatherRows,
    RowAffine,       // out[r,c] = in[r,c]*scale[r] + shift[r]
    BlockAttention,  // per-block masked attention over (B*D)xd inputs
};

inline const char* op_name(OpKind k) {
    switch (k) {
        case OpKind::Leaf: return "leaf";
        case OpKind::Constant: return "constant";
        case OpKind::MatMul: return "matmul";
        case OpKind::Add: return "add";
        case OpKind::Sub: return "sub";
        case OpKind::Mul: return "mul";
        case OpKind::Scale: return "scale";
        case OpKind::AddRowVec: return "add_rowvec";
        case OpKind::Transpose: return "transpose";
        case OpKind::MaskedSoftmax: return "masked_softmax";
        case OpKind::LayerNorm: return "layer_norm";
        case OpKind::Gelu: return "gelu";
        case OpKind::ReduceSum: return "reduce_sum";
        case OpKind::AbsSum: return "abs_sum";
        case OpKind::Mse: return "mse";
        case OpKind::SliceRows: return "slice_rows";
        case OpKind::ConcatRows: return "concat_rows";
        case OpKind::GatherRows: return "gather_rows";
        case OpKind::RowAffine: return "row_affine";
        case OpKind::BlockAttention: return "block_attention";
    }
    return "?";
}

struct ValueId {
    std::uint32_t index = 0;
};

struct ComputeNode {
    OpKind kind = OpKind::Constant;
    std::vector<ValueId> inputs;
    Tensor value;
    bool needs_grad = false;
    // Op attributes.
    double scalar = 0.0;                // Scale factor
    std::size_t a = 0, b = 0;           // slice bounds / attention block size
    std::vector<std::size_t> indices;   // GatherRows row map
    std::vector<Tensor> saved;          // activations kept for backward
    std::string leaf_id;                // Leaf only
};

struct OpAttrs {
    double scalar = 1.0;
    std::size_t a = 0;
    std::size_t b = 0;
    std::vector<std::size_t> indices;
};

// Gradients for the requested leaves, keyed by leaf identifier. A leaf the
// loss does not depend on gets a zero tensor and a disconnected flag.
struct GradientSet {
    std::map<std::string, Tensor> grads;
    std::set<std::string> disconnected;

    const Tensor& grad(const std::string& id) const {
        auto it = grads.find(id);
        if (it == grads.end()) throw Error("no gradient entry for leaf '" + id + "'");
        return it->second;
    }
    bool is_disconnected(const std::string& id) const {
        return disconnected.count(id) != 0;
    }
};

namespace detail {

constexpr double kLayerNormEps = 1e-5;

inline double gelu_tanh(double x) {
    constexpr double c = 0.7978845608028654;  // sqrt(2/pi)
    constexpr double a = 0.044715;
    return 0.5 * x * (1.0 + std::tanh(c * (x + a * x * x * x)));
}

inline double gelu_tanh_grad(double x) {
    constexpr double c = 0.7978845608028654;
    constexpr double a = 0.044715;
    const double t = std::tanh(c * (x + a * x * x * x));
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * c * (1.0 + 3.0 * a * x * x);
}

// Row softmax restricted to off-diagonal entries of a square matrix.
// Masked weights are exactly zero: masked entries never enter the
// normalization sum, so no additive -inf trick is involved.
inline void masked_softmax_rows(const double* logits, double* out, std::size_t n) {
    for (std::size_t r = 0; r < n; ++r) {
        const double* lr = logits + r * n;
        double* orow = out + r * n;
        double mx = -HUGE_VAL;
        for (std::size_t c = 0; c < n; ++c)
            if (c != r && lr[c] > mx) mx = lr[c];
        double sum = 0.0;
        for (std::size_t c = 0; c < n; ++c) {
            if (c == r) {
                orow[c] = 0.0;
            } else {
                orow[c] = std::exp(lr[c] - mx);
                sum += orow[c];
            }
        }
        for (std::size_t c = 0; c < n; ++c)
            if (c != r) orow[c] /= sum;
    }
}

// d(logits) from d(weights), reusing the forward weights.
inline void masked_softmax_backward_rows(const double* weights, const double* dout,
                                         double* dlogits, std::size_t n) {
    for (std::size_t r = 0; r < n; ++r) {
        const double* w = weights + r * n;
        const double* d = dout + r * n;
        double* dl = dlogits + r * n;
        double dot = 0.0;
        for (std::size_t c = 0; c < n; ++c)
            if (c != r) dot += w[c] * d[c];
        for (std::size_t c = 0; c < n; ++c)
            dl[c] = (c == r) ? 0.0 : w[c] * (d[c] - dot);
    }
}

}  // namespace detail

class Tape {
public:
    ValueId leaf(const std::string& id, Tensor value) {
        check_finite(value, "leaf");
        ComputeNode n;
        n.kind = OpKind::Leaf;
        n.value = std::move(value);
        n.needs_grad = true;
        n.leaf_id = id;
        return push(std::move(n));
    }

    ValueId constant(Tensor value) {
        check_finite(value, "constant");
        ComputeNode n;
        n.kind = OpKind::Constant;
        n.value = std::move(value);
        return push(std::move(n));
    }

    const Tensor& value(ValueId id) const { return nodes_[id.index].value; }
    const ComputeNode& node(ValueId id) const { return nodes_[id.index]; }
    std::size_t node_count() const { return nodes_.size(); }

    // ---- primitives ----

    ValueId matmul(ValueId a, ValueId b) {
        const Tensor& A = val(a);
        const Tensor& B = val(b);
        if (A.rank() != 2 || B.rank() != 2 || A.cols() != B.rows())
            throw ShapeMismatch("matmul " + shape_str(A.shape()) + " x " +
                                shape_str(B.shape()));
        Tensor out{Shape{A.rows(), B.cols()}};
        detail::gemm(A, false, B, false, out);
        return record(OpKind::MatMul, {a, b}, std::move(out));
    }

    ValueId add(ValueId a, ValueId b) { return binary_same_shape(OpKind::Add, a, b); }
    ValueId sub(ValueId a, ValueId b) { return binary_same_shape(OpKind::Sub, a, b); }
    ValueId mul(ValueId a, ValueId b) { return binary_same_shape(OpKind::Mul, a, b); }

    ValueId scale(ValueId a, double c) {
        Tensor out = val(a);
        for (double& v : out.values()) v *= c;
        ComputeNode n = make(OpKind::Scale, {a}, std::move(out));
        n.scalar = c;
        return push(std::move(n));
    }

    ValueId add_rowvec(ValueId a, ValueId v) {
        const Tensor& A = val(a);
        const Tensor& V = val(v);
        if (A.rank() != 2 || V.rank() != 1 || V.size() != A.cols())
            throw ShapeMismatch("add_rowvec " + shape_str(A.shape()) + " + " +
                                shape_str(V.shape()));
        Tensor out = A;
        for (std::size_t r = 0; r < A.rows(); ++r)
            for (std::size_t c = 0; c < A.cols(); ++c) out.at(r, c) += V[c];
        return record(OpKind::AddRowVec, {a, v}, std::move(out));
    }

    ValueId transpose(ValueId a) {
        const Tensor& A = val(a);
        if (A.rank() != 2) throw ShapeMismatch("transpose on " + shape_str(A.shape()));
        Tensor out{Shape{A.cols(), A.rows()}};
        for (std::size_t r = 0; r < A.rows(); ++r)
            for (std::size_t c = 0; c < A.cols(); ++c) out.at(c, r) = A.at(r, c);
        return record(OpKind::Transpose, {a}, std::move(out));
    }

    ValueId masked_softmax(ValueId a) {
        const Tensor& A = val(a);
        if (A.rank() != 2 || A.rows() != A.cols())
            throw ShapeMismatch("masked_softmax needs a square matrix, got " +
                                shape_str(A.shape()));
        if (A.rows() < 2)
            throw SingleChannel("masked_softmax over one variable leaves every row fully masked");
        Tensor out{A.shape()};
        detail::masked_softmax_rows(A.data(), out.data(), A.rows());
        return record(OpKind::MaskedSoftmax, {a}, std::move(out));
    }

    ValueId layer_norm(ValueId x, ValueId gain, ValueId shift) {
        const Tensor& X = val(x);
        const Tensor& G = val(gain);
        const Tensor& B = val(shift);
        if (X.rank() != 2 || G.rank() != 1 || B.rank() != 1 || G.size() != X.cols() ||
            B.size() != X.cols())
            throw ShapeMismatch("layer_norm " + shape_str(X.shape()) + " gain " +
                                shape_str(G.shape()) + " shift " + shape_str(B.shape()));
        const std::size_t R = X.rows(), C = X.cols();
        Tensor out{X.shape()};
        Tensor xhat{X.shape()};
        Tensor inv_den{Shape{R}};
        for (std::size_t r = 0; r < R; ++r) {
            double mean = 0.0;
            for (std::size_t c = 0; c < C; ++c) mean += X.at(r, c);
            mean /= static_cast<double>(C);
            double var = 0.0;
            for (std::size_t c = 0; c < C; ++c) {
                const double d = X.at(r, c) - mean;
                var += d * d;
            }
            var /= static_cast<double>(C);
            const double inv = 1.0 / std::sqrt(var + detail::kLayerNormEps);
            inv_den[r] = inv;
            for (std::size_t c = 0; c < C; ++c) {
                const double xh = (X.at(r, c) - mean) * inv;
                xhat.at(r, c) = xh;
                out.at(r, c) = G[c] * xh + B[c];
            }
        }
        ComputeNode n = make(OpKind::LayerNorm, {x, gain, shift}, std::move(out));
        n.saved.push_back(std::move(xhat));
        n.saved.push_back(std::move(inv_den));
        return push(std::move(n));
    }

    ValueId gelu(ValueId a) {
        Tensor out = val(a);
        for (double& v : out.values()) v = detail::gelu_tanh(v);
        return record(OpKind::Gelu, {a}, std::move(out));
    }

    ValueId reduce_sum(ValueId a) {
        double s = 0.0;
        for (double v : val(a).values()) s += v;
        return record(OpKind::ReduceSum, {a}, Tensor::scalar(s));
    }

    ValueId abs_sum(ValueId a) {
        double s = 0.0;
        for (double v : val(a).values()) s += std::abs(v);
        return record(OpKind::AbsSum, {a}, Tensor::scalar(s));
    }

    ValueId mse(ValueId a, ValueId b) {
        const Tensor& A = val(a);
        const Tensor& B = val(b);
        if (!A.same_shape(B))
            throw ShapeMismatch("mse " + shape_str(A.shape()) + " vs " +
                                shape_str(B.shape()));
        double s = 0.0;
        for (std::size_t i = 0; i < A.size(); ++i) {
            const double d = A[i] - B[i];
            s += d * d;
        }
        return record(OpKind::Mse, {a, b},
                      Tensor::scalar(s / static_cast<double>(A.size())));
    }

    ValueId slice_rows(ValueId a, std::size_t r0, std::size_t r1) {
        const Tensor& A = val(a);
        if (A.rank() != 2 || r0 >= r1 || r1 > A.rows())
            throw ShapeMismatch("slice_rows [" + std::to_string(r0) + "," +
                                std::to_string(r1) + ") of " + shape_str(A.shape()));
        Tensor out{Shape{r1 - r0, A.cols()}};
        std::copy(A.data() + r0 * A.cols(), A.data() + r1 * A.cols(), out.data());
        ComputeNode n = make(OpKind::SliceRows, {a}, std::move(out));
        n.a = r0;
        n.b = r1;
        return push(std::move(n));
    }

    ValueId concat_rows(const std::vector<ValueId>& parts) {
        if (parts.empty()) throw ShapeMismatch("concat_rows of nothing");
        const std::size_t cols = val(parts[0]).cols();
        std::size_t rows = 0;
        for (ValueId p : parts) {
            const Tensor& t = val(p);
            if (t.rank() != 2 || t.cols() != cols)
                throw ShapeMismatch("concat_rows column mismatch");
            rows += t.rows();
        }
        Tensor out{Shape{rows, cols}};
        std::size_t r = 0;
        for (ValueId p : parts) {
            const Tensor& t = val(p);
            std::copy(t.data(), t.data() + t.size(), out.data() + r * cols);
            r += t.rows();
        }
        return record(OpKind::ConcatRows, parts, std::move(out));
    }

    ValueId gather_rows(ValueId a, std::vector<std::size_t> rows) {
        const Tensor& A = val(a);
        if (A.rank() != 2) throw ShapeMismatch("gather_rows on " + shape_str(A.shape()));
        Tensor out{Shape{rows.size(), A.cols()}};
        for (std::size_t i = 0; i < rows.size(); ++i) {
            if (rows[i] >= A.rows()) throw ShapeMismatch("gather_rows index out of range");
            std::copy(A.data() + rows[i] * A.cols(), A.data() + (rows[i] + 1) * A.cols(),
                      out.data() + i * A.cols());
        }
        ComputeNode n = make(OpKind::GatherRows, {a}, std::move(out));
        n.indices = std::move(rows);
        return push(std::move(n));
    }

    ValueId row_affine(ValueId a, ValueId scale_vec, ValueId shift_vec) {
        const Tensor& A = val(a);
        const Tensor& S = val(scale_vec);
        const Tensor& Sh = val(shift_vec);
        if (A.rank() != 2 || S.rank() != 1 || Sh.rank() != 1 || S.size() != A.rows() ||
            Sh.size() != A.rows())
            throw ShapeMismatch("row_affine " + shape_str(A.shape()) + " scale " +
                                shape_str(S.shape()));
        Tensor out{A.shape()};
        for (std::size_t r = 0; r < A.rows(); ++r)
            for (std::size_t c = 0; c < A.cols(); ++c)
                out.at(r, c) = A.at(r, c) * S[r] + Sh[r];
        return record(OpKind::RowAffine, {a, scale_vec, shift_vec}, std::move(out));
    }

    // Per-block masked attention. q, k, v are (B*block) x d stacks; each
    // block of `block` rows is one independent attention group. Attention
    // weights are retained for backward and for inspection.
    ValueId block_attention(ValueId q, ValueId k, ValueId v, std::size_t block) {
        const Tensor& Q = val(q);
        const Tensor& K = val(k);
        const Tensor& V = val(v);
        if (Q.rank() != 2 || !Q.same_shape(K) || !Q.same_shape(V))
            throw ShapeMismatch("block_attention operand shapes differ");
        if (block == 0 || Q.rows() % block != 0)
            throw ShapeMismatch("block_attention rows not a multiple of block size");
        if (block < 2)
            throw SingleChannel("block_attention with one variable per block is fully masked");
        const std::size_t nblocks = Q.rows() / block;
        const std::size_t d = Q.cols();
        const double sc = 1.0 / std::sqrt(static_cast<double>(d));
        Tensor out{Q.shape()};
        std::vector<Tensor> weights;
        weights.reserve(nblocks);
        Tensor logits{Shape{block, block}};
        for (std::size_t bi = 0; bi < nblocks; ++bi) {
            const std::size_t off = bi * block * d;
            for (std::size_t r = 0; r < block; ++r)
                for (std::size_t c = 0; c < block; ++c) {
                    double s = 0.0;
                    const double* qr = Q.data() + off + r * d;
                    const double* kc = K.data() + off + c * d;
                    for (std::size_t e = 0; e < d; ++e) s += qr[e] * kc[e];
                    logits.at(r, c) = s * sc;
                }
            Tensor A{Shape{block, block}};
            detail::masked_softmax_rows(logits.data(), A.data(), block);
            for (std::size_t r = 0; r < block; ++r)
                for (std::size_t e = 0; e < d; ++e) {
                    double s = 0.0;
                    for (std::size_t c = 0; c < block; ++c)
                        s += A.at(r, c) * V[off + c * d + e];
                    out[off + r * d + e] = s;
                }
            weights.push_back(std::move(A));
        }
        ComputeNode n = make(OpKind::BlockAttention, {q, k, v}, std::move(out));
        n.a = block;
        n.saved = std::move(weights);
        return push(std::move(n));
    }

    // Dispatch by kind; used by generic graph generators in tests.
    ValueId forward_primitive(OpKind kind, const std::vector<ValueId>& in,
                              const OpAttrs& attrs = {}) {
        switch (kind) {
            case OpKind::MatMul: return matmul(in.at(0), in.at(1));
            case OpKind::Add: return add(in.at(0), in.at(1));
            case OpKind::Sub: return sub(in.at(0), in.at(1));
            case OpKind::Mul: return mul(in.at(0), in.at(1));
            case OpKind::Scale: return scale(in.at(0), attrs.scalar);
            case OpKind::AddRowVec: return add_rowvec(in.at(0), in.at(1));
            case OpKind::Transpose: return transpose(in.at(0));
            case OpKind::MaskedSoftmax: return masked_softmax(in.at(0));
            case OpKind::LayerNorm: return layer_norm(in.at(0), in.at(1), in.at(2));
            case OpKind::Gelu: return gelu(in.at(0));
            case OpKind::ReduceSum: return reduce_sum(in.at(0));
            case OpKind::AbsSum: return abs_sum(in.at(0));
            case OpKind::Mse: return mse(in.at(0), in.at(1));
            case OpKind::SliceRows: return slice_rows(in.at(0), attrs.a, attrs.b);
            case OpKind::ConcatRows: return concat_rows(in);
            case OpKind::GatherRows: return gather_rows(in.at(0), attrs.indices);
            case OpKind::RowAffine: return row_affine(in.at(0), in.at(1), in.at(2));
            case OpKind::BlockAttention:
                return block_attention(in.at(0), in.at(1), in.at(2), attrs.a);
            case OpKind::Leaf:
            case OpKind::Constant: break;
        }
        throw Error("forward_primitive cannot dispatch leaf/constant");
    }

    // ---- backward ----

    GradientSet backward(ValueId loss, const std::vector<ValueId>& leaves) const {
        const ComputeNode& ln = nodes_[loss.index];
        if (ln.value.size() != 1)
            throw NotScalarLoss("loss output has shape " + shape_str(ln.value.shape()));
        for (ValueId l : leaves)
            if (nodes_[l.index].kind != OpKind::Leaf)
                throw Error("backward: requested node is not a leaf");

        std::vector<Tensor> adj(nodes_.size());
        std::vector<bool> has(nodes_.size(), false);
        adj[loss.index] = Tensor::full(ln.value.shape(), 1.0);
        has[loss.index] = true;

        for (std::size_t i = loss.index + 1; i-- > 0;) {
            if (!has[i] || !nodes_[i].needs_grad) continue;
            propagate(nodes_[i], adj[i], adj, has);
        }

        GradientSet gs;
        for (ValueId l : leaves) {
            const ComputeNode& n = nodes_[l.index];
            if (has[l.index]) {
                gs.grads[n.leaf_id] = std::move(adj[l.index]);
            } else {
                gs.grads[n.leaf_id] = Tensor::zeros(n.value.shape());
                gs.disconnected.insert(n.leaf_id);
            }
        }
        return gs;
    }

private:
    std::vector<ComputeNode> nodes_;

    const Tensor& val(ValueId id) const { return nodes_[id.index].value; }

    static void check_finite(const Tensor& t, const char* what) {
        if (!t.all_finite())
            throw NonFiniteValue(std::string(what) + " produced a non-finite value");
    }

    ComputeNode make(OpKind kind, std::vector<ValueId> inputs, Tensor out) {
        check_finite(out, op_name(kind));
        ComputeNode n;
        n.kind = kind;
        n.inputs = std::move(inputs);
        n.value = std::move(out);
        for (ValueId i : n.inputs)
            if (nodes_[i.index].needs_grad) n.needs_grad = true;
        return n;
    }

    ValueId record(OpKind kind, std::vector<ValueId> inputs, Tensor out) {
        return push(make(kind, std::move(inputs), std::move(out)));
    }

    ValueId push(ComputeNode n) {
        nodes_.push_back(std::move(n));
        return ValueId{static_cast<std::uint32_t>(nodes_.size() - 1)};
    }

    ValueId binary_same_shape(OpKind kind, ValueId a, ValueId b) {
        const Tensor& A = val(a);
        const Tensor& B = val(b);
        if (!A.same_shape(B))
            throw ShapeMismatch(std::string(op_name(kind)) + " " + shape_str(A.shape()) +
                                " vs " + shape_str(B.shape()));
        Tensor out{A.shape()};
        switch (kind) {
            case OpKind::Add:
                for (std::size_t i = 0; i < A.size(); ++i) out[i] = A[i] + B[i];
                break;
            case OpKind::Sub:
                for (std::size_t i = 0; i < A.size(); ++i) out[i] = A[i] - B[i];
                break;
            case OpKind::Mul:
                for (std::size_t i = 0; i < A.size(); ++i) out[i] = A[i] * B[i];
                break;
            default: throw Error("not a same-shape binary op");
        }
        return record(kind, {a, b}, std::move(out));
    }

    void accumulate(std::vector<Tensor>& adj, std::vector<bool>& has, ValueId target,
                    const Tensor& delta) const {
        if (!nodes_[target.index].needs_grad) return;
        if (!has[target.index]) {
            adj[target.index] = delta;
            has[target.index] = true;
        } else {
            Tensor& t = adj[target.index];
            for (std::size_t i = 0; i < t.size(); ++i) t[i] += delta[i];
        }
    }

    // Non-copying accumulate for adjoints assembled in place.
    Tensor& adj_slot(std::vector<Tensor>& adj, std::vector<bool>& has,
                     ValueId target) const {
        if (!has[target.index]) {
            adj[target.index] = Tensor::zeros(nodes_[target.index].value.shape());
            has[target.index] = true;
        }
        return adj[target.index];
    }

    void propagate(const ComputeNode& n, const Tensor& d, std::vector<Tensor>& adj,
                   std::vector<bool>& has) const {
        switch (n.kind) {
            case OpKind::Leaf:
            case OpKind::Constant: return;
            case OpKind::MatMul: {
                const Tensor& A = val(n.inputs[0]);
                const Tensor& B = val(n.inputs[1]);
                if (nodes_[n.inputs[0].index].needs_grad)
                    detail::gemm(d, false, B, true, adj_slot(adj, has, n.inputs[0]), true);
                if (nodes_[n.inputs[1].index].needs_grad)
                    detail::gemm(A, true, d, false, adj_slot(adj, has, n.inputs[1]), true);
                return;
            }
            case OpKind::Add:
                accumulate(adj, has, n.inputs[0], d);
                accumulate(adj, has, n.inputs[1], d);
                return;
            case OpKind::Sub: {
                accumulate(adj, has, n.inputs[0], d);
                if (nodes_[n.inputs[1].index].needs_grad) {
                    Tensor& t = adj_slot(adj, has, n.inputs[1]);
                    for (std::size_t i = 0; i < t.size(); ++i) t[i] -= d[i];
                }
                return;
            }
            case OpKind::Mul: {
                const Tensor& A = val(n.inputs[0]);
                const Tensor& B = val(n.inputs[1]);
                if (nodes_[n.inputs[0].index].needs_grad) {
                    Tensor& t = adj_slot(adj, has, n.inputs[0]);
                    for (std::size_t i = 0; i < t.size(); ++i) t[i] += d[i] * B[i];
                }
                if (nodes_[n.inputs[1].index].needs_grad) {
                    Tensor& t = adj_slot(adj, has, n.inputs[1]);
                    for (std::size_t i = 0; i < t.size(); ++i) t[i] += d[i] * A[i];
                }
                return;
            }
            case OpKind::Scale: {
                if (!nodes_[n.inputs[0].index].needs_grad) return;
                Tensor& t = adj_slot(adj, has, n.inputs[0]);
                for (std::size_t i = 0; i < t.size(); ++i) t[i] += n.scalar * d[i];
                return;
            }
            case OpKind::AddRowVec: {
                accumulate(adj, has, n.inputs[0], d);
                if (nodes_[n.inputs[1].index].needs_grad) {
                    Tensor& t = adj_slot(adj, has, n.inputs[1]);
                    for (std::size_t r = 0; r < d.rows(); ++r)
                        for (std::size_t c = 0; c < d.cols(); ++c) t[c] += d.at(r, c);
                }
                return;
            }
            case OpKind::Transpose: {
                if (!nodes_[n.inputs[0].index].needs_grad) return;
                Tensor& t = adj_slot(adj, has, n.inputs[0]);
                for (std::size_t r = 0; r < d.rows(); ++r)
                    for (std::size_t c = 0; c < d.cols(); ++c) t.at(c, r) += d.at(r, c);
                return;
            }
            case OpKind::MaskedSoftmax: {
                if (!nodes_[n.inputs[0].index].needs_grad) return;
                const std::size_t nn = n.value.rows();
                Tensor dl{n.value.shape()};
                detail::masked_softmax_backward_rows(n.value.data(), d.data(), dl.data(), nn);
                accumulate(adj, has, n.inputs[0], dl);
                return;
            }
            case OpKind::LayerNorm: {
                const Tensor& xhat = n.saved[0];
                const Tensor& inv_den = n.saved[1];
                const Tensor& G = val(n.inputs[1]);
                const std::size_t R = xhat.rows(), C = xhat.cols();
                if (nodes_[n.inputs[0].index].needs_grad) {
                    Tensor& dx = adj_slot(adj, has, n.inputs[0]);
                    for (std::size_t r = 0; r < R; ++r) {
                        double mean_dxh = 0.0, mean_dxh_xh = 0.0;
                        for (std::size_t c = 0; c < C; ++c) {
                            const double dxh = d.at(r, c) * G[c];
                            mean_dxh += dxh;
                            mean_dxh_xh += dxh * xhat.at(r, c);
                        }
                        mean_dxh /= static_cast<double>(C);
                        mean_dxh_xh /= static_cast<double>(C);
                        for (std::size_t c = 0; c < C; ++c) {
                            const double dxh = d.at(r, c) * G[c];
                            dx.at(r, c) +=
                                inv_den[r] * (dxh - mean_dxh - xhat.at(r, c) * mean_dxh_xh);
                        }
                    }
                }
                if (nodes_[n.inputs[1].index].needs_grad) {
                    Tensor& dg = adj_slot(adj, has, n.inputs[1]);
                    for (std::size_t r = 0; r < R; ++r)
                        for (std::size_t c = 0; c < C; ++c)
                            dg[c] += d.at(r, c) * xhat.at(r, c);
                }
                if (nodes_[n.inputs[2].index].needs_grad) {
                    Tensor& db = adj_slot(adj, has, n.inputs[2]);
                    for (std::size_t r = 0; r < R; ++r)
                        for (std::size_t c = 0; c < C; ++c) db[c] += d.at(r, c);
                }
                return;
            }
            case OpKind::Gelu: {
                if (!nodes_[n.inputs[0].index].needs_grad) return;
                const Tensor& X = val(n.inputs[0]);
                Tensor& t = adj_slot(adj, has, n.inputs[0]);
                for (std::size_t i = 0; i < t.size(); ++i)
                    t[i] += d[i] * detail::gelu_tanh_grad(X[i]);
                return;
            }
            case OpKind::ReduceSum: {
                if (!nodes_[n.inputs[0].index].needs_grad) return;
                Tensor& t = adj_slot(adj, has, n.inputs[0]);
                const double g = d[0];
                for (std::size_t i = 0; i < t.size(); ++i) t[i] += g;
                return;
            }
            case OpKind::AbsSum: {
                if (!nodes_[n.inputs[0].index].needs_grad) return;
                const Tensor& X = val(n.inputs[0]);
                Tensor& t = adj_slot(adj, has, n.inputs[0]);
                const double g = d[0];
                for (std::size_t i = 0; i < t.size(); ++i)
                    t[i] += g * (X[i] > 0.0 ? 1.0 : (X[i] < 0.0 ? -1.0 : 0.0));
                return;
            }
            case OpKind::Mse: {
                const Tensor& A = val(n.inputs[0]);
                const Tensor& B = val(n.inputs[1]);
                const double g = 2.0 * d[0] / static_cast<double>(A.size());
                if (nodes_[n.inputs[0].index].needs_grad) {
                    Tensor& t = adj_slot(adj, has, n.inputs[0]);
                    for (std::size_t i = 0; i < t.size(); ++i) t[i] += g * (A[i] - B[i]);
                }
                if (nodes_[n.inputs[1].index].needs_grad) {
                    Tensor& t = adj_slot(adj, has, n.inputs[1]);
                    for (std::size_t i = 0; i < t.size(); ++i) t[i] -= g * (A[i] - B[i]);
                }
                return;
            }
            case OpKind::SliceRows: {
                if (!nodes_[n.inputs[0].index].needs_grad) return;
                Tensor& t = adj_slot(adj, has, n.inputs[0]);
                const std::size_t C = t.cols();
                for (std::size_t r = 0; r < d.rows(); ++r)
                    for (std::size_t c = 0; c < C; ++c) t.at(n.a + r, c) += d.at(r, c);
                return;
            }
            case OpKind::ConcatRows: {
                std::size_t r = 0;
                for (ValueId in : n.inputs) {
                    const std::size_t rows = val(in).rows();
                    if (nodes_[in.index].needs_grad) {
                        Tensor& t = adj_slot(adj, has, in);
                        const std::size_t C = t.cols();
                        for (std::size_t rr = 0; rr < rows; ++rr)
                            for (std::size_t c = 0; c < C; ++c)
                                t.at(rr, c) += d.at(r + rr, c);
                    }
                    r += rows;
                }
                return;
            }
            case OpKind::GatherRows: {
                if (!nodes_[n.inputs[0].index].needs_grad) return;
                Tensor& t = adj_slot(adj, has, n.inputs[0]);
                const std::size_t C = t.cols();
                for (std::size_t i = 0; i < n.indices.size(); ++i)
                    for (std::size_t c = 0; c < C; ++c)
                        t.at(n.indices[i], c) += d.at(i, c);
                return;
            }
            case OpKind::RowAffine: {
                const Tensor& A = val(n.inputs[0]);
                const Tensor& S = val(n.inputs[1]);
                if (nodes_[n.inputs[0].index].needs_grad) {
                    Tensor& t = adj_slot(adj, has, n.inputs[0]);
                    for (std::size_t r = 0; r < A.rows(); ++r)
                        for (std::size_t c = 0; c < A.cols(); ++c)
                            t.at(r, c) += d.at(r, c) * S[r];
                }
                if (nodes_[n.inputs[1].index].needs_grad) {
                    Tensor& t = adj_slot(adj, has, n.inputs[1]);
                    for (std::size_t r = 0; r < A.rows(); ++r) {
                        double s = 0.0;
                        for (std::size_t c = 0; c < A.cols(); ++c)
                            s += d.at(r, c) * A.at(r, c);
                        t[r] += s;
                    }
                }
                if (nodes_[n.inputs[2].index].needs_grad) {
                    Tensor& t = adj_slot(adj, has, n.inputs[2]);
                    for (std::size_t r = 0; r < A.rows(); ++r) {
                        double s = 0.0;
                        for (std::size_t c = 0; c < A.cols(); ++c) s += d.at(r, c);
                        t[r] += s;
                    }
                }
                return;
            }
            case OpKind::BlockAttention: {
                const Tensor& Q = val(n.inputs[0]);
                const Tensor& K = val(n.inputs[1]);
                const Tensor& V = val(n.inputs[2]);
                const std::size_t block = n.a;
                const std::size_t nblocks = Q.rows() / block;
                const std::size_t dd = Q.cols();
                const double sc = 1.0 / std::sqrt(static_cast<double>(dd));
                const bool needq = nodes_[n.inputs[0].index].needs_grad;
                const bool needk = nodes_[n.inputs[1].index].needs_grad;
                const bool needv = nodes_[n.inputs[2].index].needs_grad;
                Tensor* dQ = needq ? &adj_slot(adj, has, n.inputs[0]) : nullptr;
                Tensor* dK = needk ? &adj_slot(adj, has, n.inputs[1]) : nullptr;
                Tensor* dV = needv ? &adj_slot(adj, has, n.inputs[2]) : nullptr;
                Tensor dA{Shape{block, block}};
                Tensor dL{Shape{block, block}};
                for (std::size_t bi = 0; bi < nblocks; ++bi) {
                    const Tensor& A = n.saved[bi];
                    const std::size_t off = bi * block * dd;
                    // dA = dO * V^T ; dV += A^T * dO
                    for (std::size_t r = 0; r < block; ++r)
                        for (std::size_t c = 0; c < block; ++c) {
                            double s = 0.0;
                            for (std::size_t e = 0; e < dd; ++e)
                                s += d[off + r * dd + e] * V[off + c * dd + e];
                            dA.at(r, c) = s;
                        }
                    if (needv) {
                        for (std::size_t c = 0; c < block; ++c)
                            for (std::size_t e = 0; e < dd; ++e) {
                                double s = 0.0;
                                for (std::size_t r = 0; r < block; ++r)
                                    s += A.at(r, c) * d[off + r * dd + e];
                                (*dV)[off + c * dd + e] += s;
                            }
                    }
                    detail::masked_softmax_backward_rows(A.data(), dA.data(), dL.data(),
                                                         block);
                    if (needq) {
                        for (std::size_t r = 0; r < block; ++r)
                            for (std::size_t e = 0; e < dd; ++e) {
                                double s = 0.0;
                                for (std::size_t c = 0; c < block; ++c)
                                    s += dL.at(r, c) * K[off + c * dd + e];
                                (*dQ)[off + r * dd + e] += s * sc;
                            }
                    }
                    if (needk) {
                        for (std::size_t c = 0; c < block; ++c)
                            for (std::size_t e = 0; e < dd; ++e) {
                                double s = 0.0;
                                for (std::size_t r = 0; r < block; ++r)
                                    s += dL.at(r, c) * Q[off + r * dd + e];
                                (*dK)[off + c * dd + e] += s * sc;
                            }
                    }
                }
                return;
            }
        }
    }
};

// Rebuilds the scalar graph from leaf values; used to compare reverse-mode
// gradients against central finite differences.
using GraphFn =
    std::function<ValueId(Tape&, const std::map<std::string, Tensor>&)>;

inline double graph_value(const GraphFn& graph,
                          const std::map<std::string, Tensor>& leaves) {
    Tape t;
    const ValueId out = graph(t, leaves);
    return t.value(out).scalar_value();
}

// max over leaves of ||g_ad - g_fd||_inf / (||g_fd||_inf + 1e-12),
// with g_fd from central differences of step h.
inline double finite_diff_check(const GraphFn& graph,
                                const std::map<std::string, Tensor>& leaves,
                                double h = 1e-5) {
    if (h <= 0.0) throw Error("finite_diff_check needs h > 0");
    Tape tape;
    const ValueId out = graph(tape, leaves);
    if (tape.value(out).size() != 1)
        throw NotScalarLoss("finite_diff_check graph is not scalar-valued");
    std::vector<ValueId> leaf_ids;
    for (std::size_t i = 0; i < tape.node_count(); ++i) {
        const ComputeNode& n = tape.node(ValueId{static_cast<std::uint32_t>(i)});
        if (n.kind == OpKind::Leaf && leaves.count(n.leaf_id))
            leaf_ids.push_back(ValueId{static_cast<std::uint32_t>(i)});
    }
    const GradientSet gs = tape.backward(out, leaf_ids);

    double worst = 0.0;
    for (const auto& [id, g_ad] : gs.grads) {
        std::map<std::string, Tensor> work = leaves;
        Tensor& theta = work[id];
        double max_diff = 0.0, max_fd = 0.0;
        for (std::size_t i = 0; i < theta.size(); ++i) {
            const double orig = theta[i];
            theta[i] = orig + h;
            const double up = graph_value(graph, work);
            theta[i] = orig - h;
            const double down = graph_value(graph, work);
            theta[i] = orig;
            const double fd = (up - down) / (2.0 * h);
            max_diff = std::max(max_diff, std::abs(g_ad[i] - fd));
            max_fd = std::max(max_fd, std::abs(fd));
        }
        worst = std::max(worst, max_diff / (max_fd + 1e-12));
    }
    return worst;
}

}  // namespace altcast
