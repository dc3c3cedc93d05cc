#pragma once

#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "altcast/data.hpp"
#include "altcast/errors.hpp"
#include "altcast/params.hpp"
#include "altcast/rng.hpp"
#include "altcast/tape.hpp"
#include "altcast/tensor.hpp"

namespace altcast {

struct ModelConfig {
    std::size_t channels = 1;  // D
    std::size_t lookback = 512;
    std::size_t horizon = 96;
    std::size_t d_model = 128;
    std::size_t heads = 8;
    std::size_t layers = 2;
    std::size_t d_ff = 256;

    bool cr_enabled() const { return channels >= 2; }
    std::size_t head_dim() const { return d_model / heads; }

    void validate() const {
        if (channels < 1 || lookback < 1 || horizon < 1 || d_model < 1 || heads < 1 ||
            layers < 1 || d_ff < 1)
            throw ConfigError("all model extents must be at least 1");
        if (d_model % heads != 0)
            throw ConfigError("d_model " + std::to_string(d_model) +
                              " is not divisible by heads " + std::to_string(heads));
    }

    bool operator==(const ModelConfig&) const = default;
};

// Two disjoint parameter groups. "ar." holds one independent affine map per
// channel; "cr." holds the token embedding, encoder layers, and the shared
// output head. A single-channel model owns no cr. parameters at all.
struct DualPathModel {
    ModelConfig cfg;
    ParamStore params;

    static DualPathModel init(const ModelConfig& cfg, std::uint64_t seed) {
        cfg.validate();
        DualPathModel m;
        m.cfg = cfg;
        RngStream rng(mix_seed(seed, 1));
        const std::size_t L = cfg.lookback, H = cfg.horizon, L0 = cfg.d_model;
        const std::size_t dh = cfg.head_dim(), F = cfg.d_ff;

        const auto uniform_init = [&](const Shape& s, std::size_t fan_in) {
            Tensor t{s};
            const double b = 1.0 / std::sqrt(static_cast<double>(fan_in));
            for (double& v : t.values()) v = rng.uniform(-b, b);
            return t;
        };

        // AR starts near a mean-carry map so the first update phase is tame.
        for (std::size_t i = 0; i < cfg.channels; ++i) {
            Tensor w{Shape{L, H}};
            for (double& v : w.values())
                v = 1.0 / static_cast<double>(L) + rng.uniform(-0.01, 0.01);
            m.params.add("ar.c" + std::to_string(i) + ".w", std::move(w), true);
            m.params.add("ar.c" + std::to_string(i) + ".b", Tensor::zeros(Shape{H}), false);
        }
        if (!cfg.cr_enabled()) return m;

        m.params.add("cr.embed", uniform_init(Shape{L, L0}, L), true);
        for (std::size_t l = 0; l < cfg.layers; ++l) {
            const std::string pre = "cr.l" + std::to_string(l) + ".";
            for (std::size_t h = 0; h < cfg.heads; ++h) {
                const std::string hs = std::to_string(h);
                m.params.add(pre + "attn.q" + hs, uniform_init(Shape{L0, dh}, L0), true);
                m.params.add(pre + "attn.k" + hs, uniform_init(Shape{L0, dh}, L0), true);
                m.params.add(pre + "attn.v" + hs, uniform_init(Shape{L0, dh}, L0), true);
            }
            m.params.add(pre + "attn.wo", uniform_init(Shape{L0, L0}, L0), true);
            m.params.add(pre + "mlp.w1", uniform_init(Shape{L0, F}, L0), true);
            m.params.add(pre + "mlp.b1", Tensor::zeros(Shape{F}), false);
            m.params.add(pre + "mlp.w2", uniform_init(Shape{F, L0}, F), true);
            m.params.add(pre + "mlp.b2", Tensor::zeros(Shape{L0}), false);
            m.params.add(pre + "ln1.g", Tensor::full(Shape{L0}, 1.0), false);
            m.params.add(pre + "ln1.b", Tensor::zeros(Shape{L0}), false);
            m.params.add(pre + "ln2.g", Tensor::full(Shape{L0}, 1.0), false);
            m.params.add(pre + "ln2.b", Tensor::zeros(Shape{L0}), false);
        }
        m.params.add("cr.head.w", uniform_init(Shape{L0, H}, L0), true);
        m.params.add("cr.head.b", Tensor::zeros(Shape{H}), false);
        return m;
    }
};

// (lambda_base / H) * sum of |w| over the branch's penalized tensors;
// biases and norm parameters carry no penalty.
inline double l1_penalty(const ParamStore& params, const std::string& prefix,
                         double lambda_base, std::size_t H) {
    if (lambda_base < 0.0) throw ConfigError("lambda must be non-negative");
    double s = 0.0;
    for (const std::string& name : params.names(prefix)) {
        if (!params.penalized(name)) continue;
        for (double v : params.value(name).values()) s += std::abs(v);
    }
    return lambda_base / static_cast<double>(H) * s;
}

// One mini-batch of windows in the two layouts the paths consume, with the
// per-window normalization statistics baked into constant vectors.
struct BatchData {
    std::size_t B = 0, D = 0, L = 0, H = 0;
    std::vector<Tensor> x_norm_ch;       // per channel: B x L
    Tensor x_norm_stack;                 // (B*D) x L, row b*D+d
    Tensor target_stack;                 // (B*D) x H, same row order
    Tensor denorm_scale, denorm_shift;   // per row of the stack
    std::vector<std::size_t> ch_to_win;  // stack row i reads channel-major row ch_to_win[i]
};

inline BatchData prepare_batch(const Tensor& segment,
                               const std::vector<std::size_t>& starts, std::size_t L,
                               std::size_t H) {
    if (segment.rank() != 2) throw ShapeMismatch("segment must be T x D");
    BatchData b;
    b.B = starts.size();
    b.D = segment.cols();
    b.L = L;
    b.H = H;
    const std::size_t N = b.B * b.D;
    b.x_norm_ch.assign(b.D, Tensor{Shape{b.B, L}});
    b.x_norm_stack = Tensor{Shape{N, L}};
    b.target_stack = Tensor{Shape{N, H}};
    b.denorm_scale = Tensor{Shape{N}};
    b.denorm_shift = Tensor{Shape{N}};
    b.ch_to_win.resize(N);
    for (std::size_t w = 0; w < b.B; ++w) {
        const std::size_t s = starts[w];
        if (s + L + H > segment.rows()) throw Error("window start out of range");
        for (std::size_t d = 0; d < b.D; ++d) {
            double mean = 0.0;
            for (std::size_t t = 0; t < L; ++t) mean += segment.at(s + t, d);
            mean /= static_cast<double>(L);
            double var = 0.0;
            for (std::size_t t = 0; t < L; ++t) {
                const double dv = segment.at(s + t, d) - mean;
                var += dv * dv;
            }
            var /= static_cast<double>(L);
            const double denom = std::sqrt(var + kRevinEps);
            const std::size_t row = w * b.D + d;
            for (std::size_t t = 0; t < L; ++t) {
                const double xn = (segment.at(s + t, d) - mean) / denom;
                b.x_norm_ch[d].at(w, t) = xn;
                b.x_norm_stack.at(row, t) = xn;
            }
            for (std::size_t h = 0; h < H; ++h)
                b.target_stack.at(row, h) = segment.at(s + L + h, d);
            b.denorm_scale[row] = denom;
            b.denorm_shift[row] = mean;
            b.ch_to_win[row] = d * b.B + w;
        }
    }
    return b;
}

enum class Branch { Ar, Cr, Both };

namespace detail {

using Bindings = std::map<std::string, ValueId>;

inline Bindings bind_params(Tape& t, const ParamStore& p, const std::string& prefix,
                            bool as_leaves) {
    Bindings out;
    for (const std::string& name : p.names(prefix))
        out[name] = as_leaves ? t.leaf(name, p.value(name)) : t.constant(p.value(name));
    return out;
}

// Normalized AR output in window-major stack order, (B*D) x H.
inline ValueId build_ar_norm(Tape& t, const Bindings& ids, const BatchData& b) {
    std::vector<ValueId> per_channel;
    per_channel.reserve(b.D);
    for (std::size_t d = 0; d < b.D; ++d) {
        const std::string cs = "ar.c" + std::to_string(d);
        const ValueId x = t.constant(b.x_norm_ch[d]);
        per_channel.push_back(
            t.add_rowvec(t.matmul(x, ids.at(cs + ".w")), ids.at(cs + ".b")));
    }
    return t.gather_rows(t.concat_rows(per_channel), b.ch_to_win);
}

// Normalized CR output, (B*D) x H; attention groups are the D variable
// tokens of each window.
inline ValueId build_cr_norm(Tape& t, const Bindings& ids, const ModelConfig& cfg,
                             const BatchData& b) {
    const std::size_t dh = cfg.head_dim();
    ValueId z = t.matmul(t.constant(b.x_norm_stack), ids.at("cr.embed"));
    for (std::size_t l = 0; l < cfg.layers; ++l) {
        const std::string pre = "cr.l" + std::to_string(l) + ".";
        // concat-heads followed by W_O equals summing per-head output times
        // the matching row band of W_O.
        ValueId attn{};
        for (std::size_t h = 0; h < cfg.heads; ++h) {
            const std::string hs = std::to_string(h);
            const ValueId q = t.matmul(z, ids.at(pre + "attn.q" + hs));
            const ValueId k = t.matmul(z, ids.at(pre + "attn.k" + hs));
            const ValueId v = t.matmul(z, ids.at(pre + "attn.v" + hs));
            const ValueId o = t.block_attention(q, k, v, b.D);
            const ValueId band = t.slice_rows(ids.at(pre + "attn.wo"), h * dh, (h + 1) * dh);
            const ValueId proj = t.matmul(o, band);
            attn = (h == 0) ? proj : t.add(attn, proj);
        }
        const ValueId z1 =
            t.layer_norm(t.add(z, attn), ids.at(pre + "ln1.g"), ids.at(pre + "ln1.b"));
        const ValueId hidden =
            t.gelu(t.add_rowvec(t.matmul(z1, ids.at(pre + "mlp.w1")), ids.at(pre + "mlp.b1")));
        const ValueId mlp =
            t.add_rowvec(t.matmul(hidden, ids.at(pre + "mlp.w2")), ids.at(pre + "mlp.b2"));
        z = t.layer_norm(t.add(z1, mlp), ids.at(pre + "ln2.g"), ids.at(pre + "ln2.b"));
    }
    return t.add_rowvec(t.matmul(z, ids.at("cr.head.w")), ids.at("cr.head.b"));
}

inline ValueId build_l1(Tape& t, const Bindings& ids, const ParamStore& p,
                        const std::string& prefix, double lambda, std::size_t H) {
    ValueId sum{};
    bool any = false;
    for (const auto& [name, id] : ids) {
        if (name.rfind(prefix, 0) != 0 || !p.penalized(name)) continue;
        const ValueId a = t.abs_sum(id);
        sum = any ? t.add(sum, a) : a;
        any = true;
    }
    if (!any) return t.constant(Tensor::scalar(0.0));
    return t.scale(sum, lambda / static_cast<double>(H));
}

}  // namespace detail

struct GraphRefs {
    ValueId y_hat;  // denormalized (B*D) x H predictions
    ValueId mse;
    ValueId loss;
    std::vector<ValueId> leaves;
};

// Branch-only forward passes with parameters bound as constants; used to
// cache the frozen branch's contribution for a whole update phase.
inline Tensor ar_norm_output(const DualPathModel& m, const BatchData& b) {
    Tape t;
    const auto ids = detail::bind_params(t, m.params, "ar.", false);
    return t.value(detail::build_ar_norm(t, ids, b));
}

inline Tensor cr_norm_output(const DualPathModel& m, const BatchData& b) {
    if (!m.cfg.cr_enabled()) return Tensor::zeros(Shape{b.B * b.D, b.H});
    Tape t;
    const auto ids = detail::bind_params(t, m.params, "cr.", false);
    return t.value(detail::build_cr_norm(t, ids, m.cfg, b));
}

// Builds loss = MSE + branch penalties over one batch. `trainable` selects
// which branch becomes leaves; the other branch enters as `cached_other`
// (its normalized output, computed once per phase) and costs no gradient
// work at all. Branch::Both makes every parameter a leaf.
inline GraphRefs build_training_graph(Tape& t, const DualPathModel& m, const BatchData& b,
                                      Branch trainable, const Tensor* cached_other,
                                      double lambda_ar, double lambda_cr) {
    const ModelConfig& cfg = m.cfg;
    GraphRefs g;
    detail::Bindings ids;
    ValueId ar_norm{}, cr_norm{};
    ValueId penalty{};
    switch (trainable) {
        case Branch::Ar: {
            ids = detail::bind_params(t, m.params, "ar.", true);
            ar_norm = detail::build_ar_norm(t, ids, b);
            cr_norm = t.constant(cached_other ? *cached_other
                                              : cr_norm_output(m, b));
            penalty = detail::build_l1(t, ids, m.params, "ar.", lambda_ar, cfg.horizon);
            break;
        }
        case Branch::Cr: {
            if (!cfg.cr_enabled())
                throw SingleChannel("cross-relation branch is disabled for one channel");
            ids = detail::bind_params(t, m.params, "cr.", true);
            cr_norm = detail::build_cr_norm(t, ids, cfg, b);
            ar_norm = t.constant(cached_other ? *cached_other
                                              : ar_norm_output(m, b));
            penalty = detail::build_l1(t, ids, m.params, "cr.", lambda_cr, cfg.horizon);
            break;
        }
        case Branch::Both: {
            ids = detail::bind_params(t, m.params, "", true);
            ar_norm = detail::build_ar_norm(t, ids, b);
            cr_norm = cfg.cr_enabled()
                          ? detail::build_cr_norm(t, ids, cfg, b)
                          : t.constant(Tensor::zeros(Shape{b.B * b.D, b.H}));
            const ValueId p_ar =
                detail::build_l1(t, ids, m.params, "ar.", lambda_ar, cfg.horizon);
            const ValueId p_cr =
                detail::build_l1(t, ids, m.params, "cr.", lambda_cr, cfg.horizon);
            penalty = t.add(p_ar, p_cr);
            break;
        }
    }
    g.y_hat = t.row_affine(t.add(ar_norm, cr_norm), t.constant(b.denorm_scale),
                           t.constant(b.denorm_shift));
    g.mse = t.mse(g.y_hat, t.constant(b.target_stack));
    g.loss = t.add(g.mse, penalty);
    for (const auto& [name, id] : ids) g.leaves.push_back(id);
    return g;
}

struct EvalResult {
    Tensor y_hat;  // (B*D) x H, scaler-standardized space
    double mse = 0.0;
    double mae = 0.0;
    std::vector<Tensor> attention;  // D x D blocks in layer/head/window order
};

inline EvalResult evaluate_batch(const DualPathModel& m, const BatchData& b,
                                 bool want_attention = false) {
    Tape t;
    const auto ids = detail::bind_params(t, m.params, "", false);
    const ValueId ar_norm = detail::build_ar_norm(t, ids, b);
    const ValueId cr_norm = m.cfg.cr_enabled()
                                ? detail::build_cr_norm(t, ids, m.cfg, b)
                                : t.constant(Tensor::zeros(Shape{b.B * b.D, b.H}));
    const ValueId y_hat = t.row_affine(t.add(ar_norm, cr_norm),
                                       t.constant(b.denorm_scale),
                                       t.constant(b.denorm_shift));
    EvalResult r;
    r.y_hat = t.value(y_hat);
    double se = 0.0, ae = 0.0;
    for (std::size_t i = 0; i < r.y_hat.size(); ++i) {
        const double d = r.y_hat[i] - b.target_stack[i];
        se += d * d;
        ae += std::abs(d);
    }
    r.mse = se / static_cast<double>(r.y_hat.size());
    r.mae = ae / static_cast<double>(r.y_hat.size());
    if (want_attention) {
        for (std::size_t i = 0; i < t.node_count(); ++i) {
            const ComputeNode& n = t.node(ValueId{static_cast<std::uint32_t>(i)});
            if (n.kind == OpKind::BlockAttention)
                for (const Tensor& a : n.saved) r.attention.push_back(a);
        }
    }
    return r;
}

struct Forecast {
    Tensor y_hat;  // D x H, denormalized
    Tensor y_ar;   // D x H, normalized space
    Tensor y_cr;   // D x H, normalized space
    std::vector<Tensor> attention;  // one D x D matrix per layer and head
};

// Single-window forward. With one window the stacked layout degenerates to
// one row per channel, so outputs read off directly.
inline Forecast model_forward(const DualPathModel& m, const Tensor& x_dl,
                              bool want_attention = false) {
    if (x_dl.rank() != 2 || x_dl.rows() != m.cfg.channels ||
        x_dl.cols() != m.cfg.lookback)
        throw ShapeMismatch("window must be D x L = " +
                            std::to_string(m.cfg.channels) + " x " +
                            std::to_string(m.cfg.lookback));
    // Route through a one-window segment: rows are time, columns channels.
    Tensor seg{Shape{m.cfg.lookback + m.cfg.horizon, m.cfg.channels}};
    for (std::size_t d = 0; d < m.cfg.channels; ++d)
        for (std::size_t t = 0; t < m.cfg.lookback; ++t)
            seg.at(t, d) = x_dl.at(d, t);
    const BatchData b = prepare_batch(seg, {0}, m.cfg.lookback, m.cfg.horizon);

    Tape t;
    const auto ids = detail::bind_params(t, m.params, "", false);
    const ValueId ar_norm = detail::build_ar_norm(t, ids, b);
    const ValueId cr_norm = m.cfg.cr_enabled()
                                ? detail::build_cr_norm(t, ids, m.cfg, b)
                                : t.constant(Tensor::zeros(Shape{b.D, b.H}));
    const ValueId y_hat = t.row_affine(t.add(ar_norm, cr_norm),
                                       t.constant(b.denorm_scale),
                                       t.constant(b.denorm_shift));
    Forecast f;
    f.y_ar = t.value(ar_norm);
    f.y_cr = t.value(cr_norm);
    f.y_hat = t.value(y_hat);
    if (want_attention) {
        for (std::size_t i = 0; i < t.node_count(); ++i) {
            const ComputeNode& n = t.node(ValueId{static_cast<std::uint32_t>(i)});
            if (n.kind == OpKind::BlockAttention)
                for (const Tensor& a : n.saved) f.attention.push_back(a);
        }
    }
    return f;
}

// ---- checkpoint I/O ----
// Flat binary container: magic, config, then named tensors. Byte-exact
// round-trips back the exact parameter values, so determinism checks can
// compare file checksums directly.

namespace detail {

constexpr char kCkptMagic[8] = {'A', 'L', 'T', 'C', 'K', 'P', 'T', '1'};

template <typename T>
void write_pod(std::ofstream& out, const T& v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
void read_pod(std::ifstream& in, T& v) {
    in.read(reinterpret_cast<char*>(&v), sizeof(T));
}

}  // namespace detail

inline void save_checkpoint(const std::string& path, const DualPathModel& m) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write '" + path + "'");
    out.write(detail::kCkptMagic, 8);
    const std::uint64_t fields[7] = {m.cfg.channels, m.cfg.lookback, m.cfg.horizon,
                                     m.cfg.d_model,  m.cfg.heads,    m.cfg.layers,
                                     m.cfg.d_ff};
    out.write(reinterpret_cast<const char*>(fields), sizeof(fields));
    const auto names = m.params.names();
    detail::write_pod(out, static_cast<std::uint64_t>(names.size()));
    for (const std::string& name : names) {
        detail::write_pod(out, static_cast<std::uint32_t>(name.size()));
        out.write(name.data(), static_cast<std::streamsize>(name.size()));
        const Tensor& v = m.params.value(name);
        detail::write_pod(out, static_cast<std::uint8_t>(m.params.penalized(name)));
        detail::write_pod(out, static_cast<std::uint8_t>(v.rank()));
        for (std::size_t d : v.shape()) detail::write_pod(out, static_cast<std::uint64_t>(d));
        out.write(reinterpret_cast<const char*>(v.data()),
                  static_cast<std::streamsize>(v.size() * sizeof(double)));
    }
    if (!out) throw IoError("short write to '" + path + "'");
}

inline DualPathModel load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FileNotFound("cannot open checkpoint '" + path + "'");
    char magic[8];
    in.read(magic, 8);
    if (!in || std::memcmp(magic, detail::kCkptMagic, 8) != 0)
        throw IoError("'" + path + "' is not a checkpoint file");
    std::uint64_t fields[7];
    in.read(reinterpret_cast<char*>(fields), sizeof(fields));
    DualPathModel m;
    m.cfg = ModelConfig{fields[0], fields[1], fields[2], fields[3],
                        fields[4], fields[5], fields[6]};
    m.cfg.validate();
    std::uint64_t count = 0;
    detail::read_pod(in, count);
    for (std::uint64_t i = 0; i < count; ++i) {
        std::uint32_t len = 0;
        detail::read_pod(in, len);
        std::string name(len, '\0');
        in.read(name.data(), len);
        std::uint8_t penalized = 0, rank = 0;
        detail::read_pod(in, penalized);
        detail::read_pod(in, rank);
        Shape shape(rank);
        for (std::uint8_t d = 0; d < rank; ++d) {
            std::uint64_t dim = 0;
            detail::read_pod(in, dim);
            shape[d] = dim;
        }
        Tensor v{shape};
        in.read(reinterpret_cast<char*>(v.data()),
                static_cast<std::streamsize>(v.size() * sizeof(double)));
        if (!in) throw IoError("truncated checkpoint '" + path + "'");
        m.params.add(name, std::move(v), penalized != 0);
    }
    return m;
}

}  // namespace altcast
