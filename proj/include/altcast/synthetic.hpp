#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <fstream>
#include <numeric>
#include <string>
#include <vector>

#include "altcast/data.hpp"
#include "altcast/errors.hpp"
#include "altcast/optim.hpp"
#include "altcast/rng.hpp"
#include "altcast/tensor.hpp"

namespace altcast {

// Ground-truth linear transition operator. Every map is an L x H matrix, so
// residuals, Jacobians, and gradients are exactly computable — the point of
// the whole module.
//
// Diagonal maps follow a one-step-recursion shape: y_i[h] = phi_i^{h+1} *
// x_i[L-1] (phi = 1 carries the last value). Off-diagonal maps read the last
// value of the source channel scaled by a constant. Instantaneous couplings
// overwrite a destination channel with alpha * source + noise.
struct CouplingSpec {
    std::size_t dst = 0, src = 0;
    double alpha = 0.0;
};

struct OffDiagSpec {
    std::size_t dst = 0, src = 0;
    double scale = 0.0;
};

struct TrueOperatorSpec {
    std::size_t D = 2, L = 8, H = 4;
    std::vector<double> phi;  // one per channel
    std::vector<OffDiagSpec> off_diag;
    std::vector<CouplingSpec> couplings;
    double sigma_v = 0.1;
    double sigma_eps = -1.0;  // coupling noise; < 0 means "use sigma_v"

    double coupling_noise() const { return sigma_eps < 0.0 ? sigma_v : sigma_eps; }

    void validate() const {
        if (D < 1 || L < 1 || H < 1) throw ConfigError("D, L, H must be at least 1");
        if (phi.size() != D)
            throw ConfigError("need one phi per channel, got " + std::to_string(phi.size()));
        if (sigma_v < 0.0) throw ConfigError("sigma_v must be non-negative");
        for (const OffDiagSpec& o : off_diag)
            if (o.dst >= D || o.src >= D || o.dst == o.src)
                throw ConfigError("off-diagonal entry must couple two distinct channels");
        for (const CouplingSpec& c : couplings)
            if (c.dst >= D || c.src >= D || c.dst == c.src)
                throw ConfigError("coupling must relate two distinct channels");
    }

    bool is_coupled(std::size_t channel) const {
        for (const CouplingSpec& c : couplings)
            if (c.dst == channel) return true;
        return false;
    }

    Tensor map(std::size_t i, std::size_t j) const {
        Tensor w = Tensor::zeros(Shape{L, H});
        if (i == j) {
            for (std::size_t h = 0; h < H; ++h)
                w.at(L - 1, h) = std::pow(phi[i], static_cast<double>(h + 1));
            return w;
        }
        for (const OffDiagSpec& o : off_diag)
            if (o.dst == i && o.src == j)
                for (std::size_t h = 0; h < H; ++h) w.at(L - 1, h) += o.scale;
        return w;
    }
};

namespace detail {

// y += x (L row) * w (L x H)
inline void apply_map(const Tensor& w, const double* x, double* y, std::size_t L,
                      std::size_t H) {
    for (std::size_t t = 0; t < L; ++t) {
        const double xv = x[t];
        if (xv == 0.0) continue;
        const double* wr = w.data() + t * H;
        for (std::size_t h = 0; h < H; ++h) y[h] += xv * wr[h];
    }
}

}  // namespace detail

// Noise-free application of the full operator: out row i = sum_j f_ij(x_j).
inline Tensor apply_operator(const TrueOperatorSpec& spec, const Tensor& x) {
    if (x.rank() != 2 || x.rows() != spec.D || x.cols() != spec.L)
        throw ShapeMismatch("lookback must be D x L");
    Tensor y = Tensor::zeros(Shape{spec.D, spec.H});
    for (std::size_t i = 0; i < spec.D; ++i) {
        for (std::size_t j = 0; j < spec.D; ++j) {
            const Tensor w = spec.map(i, j);
            detail::apply_map(w, x.data() + j * spec.L, y.data() + i * spec.H, spec.L,
                              spec.H);
        }
    }
    return y;
}

// Rolls the system forward in H-sized blocks: each block is F applied to the
// trailing L rows plus Gaussian innovations, and coupled channels are then
// overwritten with alpha * source + noise (the initial lookback included).
inline SeriesMatrix generate_series(const TrueOperatorSpec& spec, std::size_t T,
                                    std::uint64_t seed) {
    spec.validate();
    if (T <= spec.L + spec.H)
        throw ConfigError("series length must exceed L + H");
    RngStream rng(mix_seed(seed, 0x5e71e5));
    SeriesMatrix out;
    for (std::size_t d = 0; d < spec.D; ++d)
        out.channel_names.push_back("v" + std::to_string(d));
    out.values = Tensor{Shape{T, spec.D}};
    Tensor& v = out.values;

    const auto apply_couplings = [&](std::size_t row0, std::size_t row1) {
        for (const CouplingSpec& c : spec.couplings)
            for (std::size_t t = row0; t < row1; ++t)
                v.at(t, c.dst) =
                    c.alpha * v.at(t, c.src) + rng.normal(0.0, spec.coupling_noise());
    };

    for (std::size_t t = 0; t < spec.L; ++t)
        for (std::size_t d = 0; d < spec.D; ++d) v.at(t, d) = rng.normal(0.0, spec.sigma_v);
    apply_couplings(0, spec.L);

    std::size_t t = spec.L;
    Tensor x{Shape{spec.D, spec.L}};
    while (t < T) {
        for (std::size_t d = 0; d < spec.D; ++d)
            for (std::size_t k = 0; k < spec.L; ++k)
                x.at(d, k) = v.at(t - spec.L + k, d);
        const Tensor y = apply_operator(spec, x);
        const std::size_t take = std::min(spec.H, T - t);
        for (std::size_t h = 0; h < take; ++h)
            for (std::size_t d = 0; d < spec.D; ++d)
                v.at(t + h, d) = y.at(d, h) + rng.normal(0.0, spec.sigma_v);
        apply_couplings(t, t + take);
        for (std::size_t h = 0; h < take; ++h)
            for (std::size_t d = 0; d < spec.D; ++d)
                if (std::abs(v.at(t + h, d)) > 1e6)
                    throw UnstableSystem("generated value exceeded 1e6 at step " +
                                         std::to_string(t + h));
        t += take;
    }
    return out;
}

// One independently drawn (lookback, noisy target) pair. Uncoupled channels
// follow their AR(1) recursion from a stationary start; coupled channels are
// overwritten pointwise. The target is F * X plus innovations, so F is the
// exact conditional-mean operator for this sampler.
struct SampleWindow {
    Tensor x;  // D x L
    Tensor y;  // D x H, with noise
};

inline SampleWindow sample_window(const TrueOperatorSpec& spec, RngStream& rng) {
    SampleWindow w;
    w.x = Tensor{Shape{spec.D, spec.L}};
    for (std::size_t d = 0; d < spec.D; ++d) {
        if (spec.is_coupled(d)) continue;
        const double p = spec.phi[d];
        double state = (std::abs(p) < 1.0 && spec.sigma_v > 0.0)
                           ? rng.normal(0.0, spec.sigma_v / std::sqrt(1.0 - p * p))
                           : rng.normal(0.0, spec.sigma_v);
        for (std::size_t t = 0; t < spec.L; ++t) {
            w.x.at(d, t) = state;
            state = p * state + rng.normal(0.0, spec.sigma_v);
        }
    }
    for (const CouplingSpec& c : spec.couplings)
        for (std::size_t t = 0; t < spec.L; ++t)
            w.x.at(c.dst, t) =
                c.alpha * w.x.at(c.src, t) + rng.normal(0.0, spec.coupling_noise());
    w.y = apply_operator(spec, w.x);
    for (double& v : w.y.values()) v += rng.normal(0.0, spec.sigma_v);
    return w;
}

// A full set of fitted linear maps, one L x H matrix per (destination,
// source) pair. The diagonal is the AR block, the off-diagonal the CR block.
struct FitParams {
    std::size_t D = 0, L = 0, H = 0;
    std::vector<Tensor> w;  // index i * D + j

    static FitParams zeros(const TrueOperatorSpec& spec) {
        FitParams f;
        f.D = spec.D;
        f.L = spec.L;
        f.H = spec.H;
        f.w.assign(spec.D * spec.D, Tensor::zeros(Shape{spec.L, spec.H}));
        return f;
    }

    static FitParams from_truth(const TrueOperatorSpec& spec) {
        FitParams f = zeros(spec);
        for (std::size_t i = 0; i < spec.D; ++i)
            for (std::size_t j = 0; j < spec.D; ++j) f.at(i, j) = spec.map(i, j);
        return f;
    }

    Tensor& at(std::size_t i, std::size_t j) { return w[i * D + j]; }
    const Tensor& at(std::size_t i, std::size_t j) const { return w[i * D + j]; }

    // Predicted target row i = sum_j x_j * w_ij.
    Tensor predict(const Tensor& x) const {
        Tensor y = Tensor::zeros(Shape{D, H});
        for (std::size_t i = 0; i < D; ++i)
            for (std::size_t j = 0; j < D; ++j)
                detail::apply_map(at(i, j), x.data() + j * L, y.data() + i * H, L, H);
        return y;
    }
};

// r_ij = f_ij(x_j) - fitted_ij(x_j), one H-vector per pair; computable only
// because the true operator is known. The observable aggregate is the row
// sum, exactly.
struct ResidualDecomposition {
    std::size_t D = 0, H = 0;
    std::vector<Tensor> r;  // index i * D + j

    const Tensor& at(std::size_t i, std::size_t j) const { return r[i * D + j]; }

    Tensor aggregate(std::size_t i) const {
        Tensor s = Tensor::zeros(Shape{H});
        for (std::size_t j = 0; j < D; ++j)
            for (std::size_t h = 0; h < H; ++h) s[h] += at(i, j)[h];
        return s;
    }

    Tensor off_diagonal(std::size_t i) const {
        Tensor s = Tensor::zeros(Shape{H});
        for (std::size_t j = 0; j < D; ++j) {
            if (j == i) continue;
            for (std::size_t h = 0; h < H; ++h) s[h] += at(i, j)[h];
        }
        return s;
    }
};

inline ResidualDecomposition decompose(const TrueOperatorSpec& spec, const FitParams& fit,
                                       const Tensor& x) {
    ResidualDecomposition d;
    d.D = spec.D;
    d.H = spec.H;
    d.r.reserve(spec.D * spec.D);
    for (std::size_t i = 0; i < spec.D; ++i)
        for (std::size_t j = 0; j < spec.D; ++j) {
            Tensor rij = Tensor::zeros(Shape{spec.H});
            const Tensor truth = spec.map(i, j);
            detail::apply_map(truth, x.data() + j * spec.L, rij.data(), spec.L, spec.H);
            Tensor fitted = Tensor::zeros(Shape{spec.H});
            detail::apply_map(fit.at(i, j), x.data() + j * spec.L, fitted.data(), spec.L,
                              spec.H);
            for (std::size_t h = 0; h < spec.H; ++h) rij[h] -= fitted[h];
            d.r.push_back(std::move(rij));
        }
    return d;
}

namespace detail {

// -x (L) outer r (H), the parameter gradient of 1/2 ||r||^2 for a linear map.
inline Tensor neg_outer(const double* x, const Tensor& r, std::size_t L, std::size_t H) {
    Tensor g{Shape{L, H}};
    for (std::size_t t = 0; t < L; ++t)
        for (std::size_t h = 0; h < H; ++h) g.at(t, h) = -x[t] * r[h];
    return g;
}

}  // namespace detail

// Oracle gradient for the (i, j) map: uses the pairwise residual that only
// the synthetic ground truth can expose.
inline Tensor true_gradient(const TrueOperatorSpec& spec, const FitParams& fit,
                            const Tensor& x, std::size_t i, std::size_t j) {
    const ResidualDecomposition d = decompose(spec, fit, x);
    return detail::neg_outer(x.data() + j * spec.L, d.at(i, j), spec.L, spec.H);
}

// Observable gradient: same Jacobian, but driven by the aggregate residual,
// so other pairs' estimation errors leak in.
inline Tensor mixed_gradient(const TrueOperatorSpec& spec, const FitParams& fit,
                             const Tensor& x, std::size_t i, std::size_t j) {
    const ResidualDecomposition d = decompose(spec, fit, x);
    return detail::neg_outer(x.data() + j * spec.L, d.aggregate(i), spec.L, spec.H);
}

// The contamination term for the diagonal block of channel i.
inline Tensor bias_term(const TrueOperatorSpec& spec, const FitParams& fit,
                        const Tensor& x, std::size_t i) {
    const ResidualDecomposition d = decompose(spec, fit, x);
    return detail::neg_outer(x.data() + i * spec.L, d.off_diagonal(i), spec.L, spec.H);
}

// ---- bias estimate (conditional mean of the contamination) ----

struct BiasBin {
    double lo = 0.0, hi = 0.0;
    double mean = 0.0, se = 0.0;
    std::size_t count = 0;
};

struct BiasReport {
    std::vector<BiasBin> bins;
    std::size_t samples = 0;
    std::size_t channel = 0;
};

// Bins the per-window mean entry of the contamination gradient by deciles of
// the lookback mean of channel i — a scalar conditioning statistic standing
// in for the full x_i.
inline BiasReport bias_estimate(const TrueOperatorSpec& spec, const FitParams& fit,
                                std::size_t channel, std::size_t n, std::uint64_t seed,
                                std::size_t bins = 10) {
    spec.validate();
    if (bins < 2) throw ConfigError("need at least 2 bins");
    if (n < bins * 10)
        throw InsufficientSamples("need at least " + std::to_string(bins * 10) +
                                  " windows for " + std::to_string(bins) + " bins");
    RngStream rng(mix_seed(seed, 0xb1a5));
    std::vector<std::pair<double, double>> stat_and_value(n);
    for (std::size_t k = 0; k < n; ++k) {
        const SampleWindow w = sample_window(spec, rng);
        double cond = 0.0;
        for (std::size_t t = 0; t < spec.L; ++t) cond += w.x.at(channel, t);
        cond /= static_cast<double>(spec.L);
        const Tensor b = bias_term(spec, fit, w.x, channel);
        double mean_entry = 0.0;
        for (double v : b.values()) mean_entry += v;
        mean_entry /= static_cast<double>(b.size());
        stat_and_value[k] = {cond, mean_entry};
    }
    std::sort(stat_and_value.begin(), stat_and_value.end());

    BiasReport rep;
    rep.samples = n;
    rep.channel = channel;
    for (std::size_t b = 0; b < bins; ++b) {
        const std::size_t lo = b * n / bins;
        const std::size_t hi = (b + 1) * n / bins;
        BiasBin bin;
        bin.count = hi - lo;
        bin.lo = stat_and_value[lo].first;
        bin.hi = stat_and_value[hi - 1].first;
        double m = 0.0;
        for (std::size_t k = lo; k < hi; ++k) m += stat_and_value[k].second;
        m /= static_cast<double>(bin.count);
        double var = 0.0;
        for (std::size_t k = lo; k < hi; ++k) {
            const double d = stat_and_value[k].second - m;
            var += d * d;
        }
        var /= static_cast<double>(bin.count - 1);
        bin.mean = m;
        bin.se = std::sqrt(var / static_cast<double>(bin.count));
        rep.bins.push_back(bin);
    }
    return rep;
}

// ---- covariance trace decomposition ----

struct TraceEstimate {
    double value = 0.0;
    double se = 0.0;
};

struct CovarianceReport {
    TraceEstimate total;        // trace Cov(mixed gradient), independent sample
    TraceEstimate sigma_ii;     // trace Cov(true gradient)
    TraceEstimate sigma_minus;  // trace Cov(contamination)
    TraceEstimate cross;        // summed per-coordinate cross-covariance
    double additivity_rel = 0.0;
    bool additivity_ok = false;
    bool cauchy_schwarz_ok = false;
    bool regime_holds = false;  // sigma_minus > 4 * sigma_ii
    bool dominance_ok = false;  // total > sigma_ii whenever the regime holds
    std::size_t samples = 0;
    std::size_t channel = 0;
};

// Traces are per-coordinate variance sums; estimates are means over G groups
// with group-scatter standard errors, and the left side of the additivity
// identity is estimated on draws independent from the right side.
inline CovarianceReport covariance_decomposition_check(const TrueOperatorSpec& spec,
                                                       const FitParams& fit,
                                                       std::size_t channel, std::size_t n,
                                                       std::uint64_t seed,
                                                       std::size_t groups = 20) {
    spec.validate();
    if (n < groups * 50)
        throw InsufficientSamples("need at least " + std::to_string(groups * 50) +
                                  " windows for " + std::to_string(groups) + " groups");
    const std::size_t per_group = n / groups;
    const std::size_t coords = spec.L * spec.H;

    const auto group_stats = [&](RngStream& rng, bool lhs, double& total_g, double& sii_g,
                                 double& smin_g, double& cross_g) {
        std::vector<double> st(coords, 0.0), st2(coords, 0.0), sb(coords, 0.0),
            sb2(coords, 0.0), stb(coords, 0.0);
        for (std::size_t k = 0; k < per_group; ++k) {
            const SampleWindow w = sample_window(spec, rng);
            const ResidualDecomposition d = decompose(spec, fit, w.x);
            const Tensor gt = detail::neg_outer(w.x.data() + channel * spec.L,
                                                d.at(channel, channel), spec.L, spec.H);
            const Tensor gb = detail::neg_outer(w.x.data() + channel * spec.L,
                                                d.off_diagonal(channel), spec.L, spec.H);
            for (std::size_t c = 0; c < coords; ++c) {
                st[c] += gt[c];
                st2[c] += gt[c] * gt[c];
                sb[c] += gb[c];
                sb2[c] += gb[c] * gb[c];
                stb[c] += gt[c] * gb[c];
            }
        }
        const double m = static_cast<double>(per_group);
        total_g = sii_g = smin_g = cross_g = 0.0;
        for (std::size_t c = 0; c < coords; ++c) {
            const double vt = (st2[c] - st[c] * st[c] / m) / (m - 1.0);
            const double vb = (sb2[c] - sb[c] * sb[c] / m) / (m - 1.0);
            const double cv = (stb[c] - st[c] * sb[c] / m) / (m - 1.0);
            sii_g += vt;
            smin_g += vb;
            cross_g += cv;
            // mixed = true + contamination exactly, so its variance is the
            // three-term sum; for the LHS group we still recompute it from
            // the mixed draws directly.
            total_g += vt + vb + 2.0 * cv;
        }
        if (lhs) {
            // Recompute from scratch as Var(gt + gb) per coordinate.
            // (st, sb, stb already hold everything needed.)
            total_g = 0.0;
            for (std::size_t c = 0; c < coords; ++c) {
                const double sm = st[c] + sb[c];
                const double sm2 = st2[c] + 2.0 * stb[c] + sb2[c];
                total_g += (sm2 - sm * sm / m) / (m - 1.0);
            }
        }
    };

    const auto run_pass = [&](std::uint64_t stream, bool lhs, TraceEstimate& total,
                              TraceEstimate& sii, TraceEstimate& smin,
                              TraceEstimate& cross) {
        std::vector<double> tg(groups), sg(groups), mg(groups), cg(groups);
        for (std::size_t g = 0; g < groups; ++g) {
            RngStream rng(mix_seed(seed, stream * 1000 + g));
            group_stats(rng, lhs, tg[g], sg[g], mg[g], cg[g]);
        }
        const auto summarize = [&](const std::vector<double>& xs) {
            double m = std::accumulate(xs.begin(), xs.end(), 0.0) / double(groups);
            double v = 0.0;
            for (double x : xs) v += (x - m) * (x - m);
            v /= double(groups - 1);
            return TraceEstimate{m, std::sqrt(v / double(groups))};
        };
        total = summarize(tg);
        sii = summarize(sg);
        smin = summarize(mg);
        cross = summarize(cg);
    };

    CovarianceReport rep;
    rep.samples = n;
    rep.channel = channel;
    TraceEstimate lhs_total, unused_s, unused_m, unused_c;
    run_pass(1, true, lhs_total, unused_s, unused_m, unused_c);
    TraceEstimate rhs_total, sii, smin, cross;
    run_pass(2, false, rhs_total, sii, smin, cross);

    rep.total = lhs_total;
    rep.sigma_ii = sii;
    rep.sigma_minus = smin;
    rep.cross = cross;
    const double rhs_sum = sii.value + smin.value + 2.0 * cross.value;
    rep.additivity_rel =
        std::abs(lhs_total.value - rhs_sum) / std::max(std::abs(lhs_total.value), 1e-30);
    rep.additivity_ok = rep.additivity_rel < 0.05;
    rep.cauchy_schwarz_ok =
        std::abs(cross.value) <=
        std::sqrt(std::max(sii.value, 0.0) * std::max(smin.value, 0.0)) +
            3.0 * (cross.se + sii.se + smin.se);
    rep.regime_holds = smin.value > 4.0 * sii.value;
    rep.dominance_ok = !rep.regime_holds || lhs_total.value > sii.value;
    return rep;
}

// ---- law of total covariance over a training trajectory ----

struct TotalCovarianceReport {
    TraceEstimate total;    // pooled over (snapshot, window) draws
    TraceEstimate within;   // (a): mean within-snapshot trace
    TraceEstimate between;  // (b): trace of covariance of snapshot means
    double identity_rel = 0.0;
    bool identity_ok = false;
    bool within_le_total = false;
    bool between_positive = false;
    std::size_t snapshots = 0;
    std::size_t per_snapshot = 0;
};

// Runs a short joint AMSGrad trajectory over the full linear parameter set,
// snapshots the off-diagonal (CR) blocks along the way, then freezes the
// diagonal block of `channel` at its final value and measures how gradient
// variability splits into within-snapshot noise and between-snapshot drift.
inline TotalCovarianceReport total_covariance_law_check(const TrueOperatorSpec& spec,
                                                        std::size_t channel,
                                                        std::size_t snapshots,
                                                        std::size_t per_snapshot,
                                                        std::uint64_t seed) {
    spec.validate();
    if (snapshots < 10)
        throw InsufficientSamples("need at least 10 trajectory snapshots");
    if (per_snapshot < 1000)
        throw InsufficientSamples("need at least 1000 windows per snapshot");
    const std::size_t coords = spec.L * spec.H;
    const std::size_t batch = 32;
    // Two tight, balanced snapshot clusters: consecutive steps right at the
    // start and consecutive steps well past convergence. Balance matters:
    // the between-snapshot variance is then insensitive to dropping any one
    // snapshot, which keeps its jackknife error small relative to the
    // cluster separation.
    std::vector<std::size_t> schedule;
    {
        const std::size_t early = snapshots / 2;
        for (std::size_t k = 0; k < early; ++k) schedule.push_back(1 + k);
        for (std::size_t k = 0; k < snapshots - early; ++k)
            schedule.push_back(250 + k);
    }

    // Joint mini-batch gradient-descent trajectory from a zero fit,
    // snapshotted on the two-cluster schedule. Plain proportional steps keep
    // the parameter path (and with it the per-snapshot mean gradients)
    // smooth, and the small rate keeps the early cluster's drift a small
    // fraction of the init-to-converged separation.
    const double lr = 0.02;
    FitParams fit = FitParams::zeros(spec);
    RngStream train_rng(mix_seed(seed, 0x7a1));
    std::vector<FitParams> snaps;
    for (std::size_t step = 1; snaps.size() < snapshots; ++step) {
        FitParams grad = FitParams::zeros(spec);
        for (std::size_t b = 0; b < batch; ++b) {
            const SampleWindow w = sample_window(spec, train_rng);
            const Tensor pred = fit.predict(w.x);
            for (std::size_t i = 0; i < spec.D; ++i)
                for (std::size_t j = 0; j < spec.D; ++j) {
                    Tensor& g = grad.at(i, j);
                    for (std::size_t t = 0; t < spec.L; ++t)
                        for (std::size_t h = 0; h < spec.H; ++h)
                            g.at(t, h) -= w.x.at(j, t) *
                                          (w.y.at(i, h) - pred.at(i, h)) / double(batch);
                }
        }
        for (std::size_t i = 0; i < spec.D; ++i)
            for (std::size_t j = 0; j < spec.D; ++j)
                for (std::size_t c = 0; c < fit.at(i, j).size(); ++c)
                    fit.at(i, j)[c] -= lr * grad.at(i, j)[c];
        if (step == schedule[snaps.size()]) snaps.push_back(fit);
    }
    // Freeze the diagonal block at its final value in every snapshot.
    const Tensor final_diag = fit.at(channel, channel);
    bool all_same = true;
    for (FitParams& s : snaps) {
        s.at(channel, channel) = final_diag;
        for (std::size_t j = 0; j < spec.D && all_same; ++j)
            if (j != channel && !(s.at(channel, j) == snaps[0].at(channel, j)))
                all_same = false;
    }
    if (all_same && snaps.size() > 1)
        throw DegenerateTrajectory("all sampled parameter snapshots are identical");

    // Empirical mini-batch gradient of the diagonal block under snapshot s.
    const auto gradient_draw = [&](const FitParams& s, RngStream& rng) {
        const SampleWindow w = sample_window(spec, rng);
        Tensor pred = Tensor::zeros(Shape{spec.H});
        for (std::size_t j = 0; j < spec.D; ++j)
            detail::apply_map(s.at(channel, j), w.x.data() + j * spec.L, pred.data(),
                              spec.L, spec.H);
        Tensor resid{Shape{spec.H}};
        for (std::size_t h = 0; h < spec.H; ++h)
            resid[h] = w.y.at(channel, h) - pred[h];
        return detail::neg_outer(w.x.data() + channel * spec.L, resid, spec.L, spec.H);
    };

    const std::size_t S = snaps.size();
    std::vector<double> within(S, 0.0);
    std::vector<std::vector<double>> means(S, std::vector<double>(coords, 0.0));
    for (std::size_t s = 0; s < S; ++s) {
        RngStream rng(mix_seed(seed, 0x90000 + s));
        std::vector<double> sum(coords, 0.0), sum2(coords, 0.0);
        for (std::size_t k = 0; k < per_snapshot; ++k) {
            const Tensor g = gradient_draw(snaps[s], rng);
            for (std::size_t c = 0; c < coords; ++c) {
                sum[c] += g[c];
                sum2[c] += g[c] * g[c];
            }
        }
        const double m = static_cast<double>(per_snapshot);
        for (std::size_t c = 0; c < coords; ++c) {
            within[s] += (sum2[c] - sum[c] * sum[c] / m) / (m - 1.0);
            means[s][c] = sum[c] / m;
        }
    }

    TotalCovarianceReport rep;
    rep.snapshots = S;
    rep.per_snapshot = per_snapshot;
    {
        double m = std::accumulate(within.begin(), within.end(), 0.0) / double(S);
        double v = 0.0;
        for (double x : within) v += (x - m) * (x - m);
        v /= double(S - 1);
        rep.within = {m, std::sqrt(v / double(S))};
    }
    // (b) with a jackknife-over-snapshots standard error. The pooled total
    // below mixes over the fixed snapshot set, so (b) is the population
    // variance of the snapshot means, debiased for the Monte-Carlo noise in
    // each estimated mean.
    const auto between_of = [&](std::size_t skip) {
        const double cnt = double(S - (skip < S ? 1 : 0));
        double val = 0.0;
        double within_avg = 0.0;
        for (std::size_t s = 0; s < S; ++s)
            if (s != skip) within_avg += within[s];
        within_avg /= cnt;
        for (std::size_t c = 0; c < coords; ++c) {
            double mean = 0.0;
            for (std::size_t s = 0; s < S; ++s)
                if (s != skip) mean += means[s][c];
            mean /= cnt;
            double var = 0.0;
            for (std::size_t s = 0; s < S; ++s)
                if (s != skip) var += (means[s][c] - mean) * (means[s][c] - mean);
            val += var / cnt;
        }
        return val - (cnt - 1.0) / cnt * within_avg / double(per_snapshot);
    };
    const double b_full = between_of(S);
    std::vector<double> jack(S);
    double jack_mean = 0.0;
    for (std::size_t s = 0; s < S; ++s) {
        jack[s] = between_of(s);
        jack_mean += jack[s];
    }
    jack_mean /= double(S);
    double jack_var = 0.0;
    for (double x : jack) jack_var += (x - jack_mean) * (x - jack_mean);
    jack_var *= double(S - 1) / double(S);
    rep.between = {b_full, std::sqrt(jack_var)};

    // Independent pooled pass: random snapshot, fresh window each draw.
    {
        const std::size_t groups = 20;
        const std::size_t total_draws = S * per_snapshot;
        const std::size_t per_group = total_draws / groups;
        std::vector<double> tg(groups, 0.0);
        for (std::size_t g = 0; g < groups; ++g) {
            RngStream rng(mix_seed(seed, 0xa0000 + g));
            std::vector<double> sum(coords, 0.0), sum2(coords, 0.0);
            for (std::size_t k = 0; k < per_group; ++k) {
                const std::size_t s = rng.below(S);
                const Tensor gr = gradient_draw(snaps[s], rng);
                for (std::size_t c = 0; c < coords; ++c) {
                    sum[c] += gr[c];
                    sum2[c] += gr[c] * gr[c];
                }
            }
            const double m = static_cast<double>(per_group);
            for (std::size_t c = 0; c < coords; ++c)
                tg[g] += (sum2[c] - sum[c] * sum[c] / m) / (m - 1.0);
        }
        double m = std::accumulate(tg.begin(), tg.end(), 0.0) / double(groups);
        double v = 0.0;
        for (double x : tg) v += (x - m) * (x - m);
        v /= double(groups - 1);
        rep.total = {m, std::sqrt(v / double(groups))};
    }

    rep.identity_rel = std::abs(rep.total.value - (rep.within.value + rep.between.value)) /
                       std::max(std::abs(rep.total.value), 1e-30);
    rep.identity_ok = rep.identity_rel < 0.05;
    rep.within_le_total =
        rep.within.value <=
        rep.total.value + 3.0 * std::sqrt(rep.within.se * rep.within.se +
                                          rep.total.se * rep.total.se);
    rep.between_positive = rep.between.value > 3.0 * rep.between.se;
    return rep;
}

// ---- spec-file parsing ----
// Line-oriented key=value; '#' starts a comment. Keys: D, L, H, T, phi,
// offdiag (dst:src:scale;...), alpha (dst:src:coef;...), sigma_v, sigma_eps.

struct SyntheticSpec {
    TrueOperatorSpec op;
    std::size_t T = 2000;
};

namespace detail {

inline std::vector<std::string> split_on(const std::string& text, char sep) {
    std::vector<std::string> out;
    std::size_t pos = 0;
    while (pos <= text.size()) {
        const std::size_t next = text.find(sep, pos);
        if (next == std::string::npos) {
            out.push_back(text.substr(pos));
            break;
        }
        out.push_back(text.substr(pos, next - pos));
        pos = next + 1;
    }
    return out;
}

}  // namespace detail

inline SyntheticSpec parse_operator_spec(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw FileNotFound("cannot open spec '" + path + "'");
    SyntheticSpec s;
    s.op.phi.clear();
    std::string line;
    std::size_t lineno = 0;
    std::vector<double> phis;
    while (std::getline(in, line)) {
        ++lineno;
        const std::size_t hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        const std::string_view trimmed = detail::trim(line);
        if (trimmed.empty()) continue;
        const std::size_t eq = trimmed.find('=');
        const auto fail = [&](const std::string& why) {
            throw ConfigError("spec line " + std::to_string(lineno) + ": " + why);
        };
        if (eq == std::string_view::npos) fail("expected key=value");
        const std::string key{detail::trim(trimmed.substr(0, eq))};
        const std::string value{detail::trim(trimmed.substr(eq + 1))};
        const auto as_size = [&]() -> std::size_t {
            double v = 0.0;
            if (!detail::parse_double(value, v) || v < 1 || v != std::floor(v))
                fail("'" + value + "' is not a positive integer");
            return static_cast<std::size_t>(v);
        };
        const auto as_double = [&]() -> double {
            double v = 0.0;
            if (!detail::parse_double(value, v)) fail("'" + value + "' is not a number");
            return v;
        };
        const auto parse_triples = [&](auto push) {
            for (const std::string& item : detail::split_on(value, ';')) {
                const auto parts = detail::split_on(item, ':');
                double a = 0, b = 0, c = 0;
                if (parts.size() != 3 || !detail::parse_double(detail::trim(parts[0]), a) ||
                    !detail::parse_double(detail::trim(parts[1]), b) ||
                    !detail::parse_double(detail::trim(parts[2]), c))
                    fail("'" + item + "' is not dst:src:value");
                push(static_cast<std::size_t>(a), static_cast<std::size_t>(b), c);
            }
        };
        if (key == "D") s.op.D = as_size();
        else if (key == "L") s.op.L = as_size();
        else if (key == "H") s.op.H = as_size();
        else if (key == "T") s.T = as_size();
        else if (key == "sigma_v") s.op.sigma_v = as_double();
        else if (key == "sigma_eps") s.op.sigma_eps = as_double();
        else if (key == "phi") {
            for (const std::string& item : detail::split_on(value, ',')) {
                double v = 0.0;
                if (!detail::parse_double(detail::trim(item), v))
                    fail("'" + item + "' is not a number");
                phis.push_back(v);
            }
        } else if (key == "offdiag") {
            parse_triples([&](std::size_t i, std::size_t j, double v) {
                s.op.off_diag.push_back({i, j, v});
            });
        } else if (key == "alpha") {
            parse_triples([&](std::size_t i, std::size_t j, double v) {
                s.op.couplings.push_back({i, j, v});
            });
        } else {
            fail("unknown key '" + key + "'");
        }
    }
    if (phis.empty()) phis.assign(1, 0.9);
    if (phis.size() == 1) phis.assign(s.op.D, phis[0]);
    s.op.phi = std::move(phis);
    s.op.validate();
    if (s.T <= s.op.L + s.op.H)
        throw ConfigError("spec T must exceed L + H");
    return s;
}

}  // namespace altcast
