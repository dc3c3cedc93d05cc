#pragma once

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <cstddef>
#include <fstream>
#include <string>
#include <string_view>
#include <vector>

#include "altcast/errors.hpp"
#include "altcast/tensor.hpp"

namespace altcast {

// Time-major multivariate series: values is T x D.
struct SeriesMatrix {
    std::vector<std::string> channel_names;
    Tensor values;
    bool had_timestamp_col = false;

    std::size_t length() const { return values.rank() == 2 ? values.rows() : 0; }
    std::size_t channels() const { return values.rank() == 2 ? values.cols() : 0; }
};

enum class TimestampColumn { Auto, None, First };

namespace detail {

inline std::string_view trim(std::string_view s) {
    while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
    while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
    return s;
}

inline std::vector<std::string_view> split_cells(std::string_view line) {
    std::vector<std::string_view> out;
    std::size_t pos = 0;
    while (true) {
        const std::size_t comma = line.find(',', pos);
        if (comma == std::string_view::npos) {
            out.push_back(trim(line.substr(pos)));
            break;
        }
        out.push_back(trim(line.substr(pos, comma - pos)));
        pos = comma + 1;
    }
    return out;
}

inline bool parse_double(std::string_view cell, double& out) {
    const char* first = cell.data();
    const char* last = cell.data() + cell.size();
    const auto [ptr, ec] = std::from_chars(first, last, out);
    return ec == std::errc{} && ptr == last && !cell.empty();
}

}  // namespace detail

// First row is the header. Row/column indices in errors are 1-based file
// coordinates, header included.
inline SeriesMatrix load_csv(const std::string& path,
                             TimestampColumn ts = TimestampColumn::Auto) {
    std::ifstream in(path);
    if (!in) throw FileNotFound("cannot open '" + path + "'");
    std::vector<std::string> lines;
    for (std::string line; std::getline(in, line);) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        lines.push_back(std::move(line));
    }
    while (!lines.empty() && detail::trim(lines.back()).empty()) lines.pop_back();
    if (lines.empty()) throw EmptyDataset("'" + path + "' has no header row");
    if (lines.size() < 2) throw EmptyDataset("'" + path + "' has no data rows");

    const auto header = detail::split_cells(lines[0]);
    bool drop_first = false;
    if (ts == TimestampColumn::First) {
        drop_first = true;
    } else if (ts == TimestampColumn::Auto) {
        std::string h0(header.empty() ? std::string_view{} : header[0]);
        std::transform(h0.begin(), h0.end(), h0.begin(),
                       [](unsigned char c) { return std::tolower(c); });
        double probe = 0.0;
        const auto first_data = detail::split_cells(lines[1]);
        drop_first = (h0 == "date" || h0 == "time" || h0 == "timestamp" ||
                      h0 == "datetime") ||
                     (!first_data.empty() && !detail::parse_double(first_data[0], probe));
    }
    const std::size_t skip = drop_first ? 1 : 0;
    if (header.size() <= skip)
        throw EmptyDataset("'" + path + "' has no value columns");

    SeriesMatrix out;
    out.had_timestamp_col = drop_first;
    for (std::size_t c = skip; c < header.size(); ++c)
        out.channel_names.emplace_back(header[c]);
    const std::size_t D = out.channel_names.size();
    const std::size_t T = lines.size() - 1;
    out.values = Tensor{Shape{T, D}};
    for (std::size_t r = 1; r < lines.size(); ++r) {
        const auto cells = detail::split_cells(lines[r]);
        if (cells.size() != header.size())
            throw ParseError(r + 1, cells.size(),
                             "expected " + std::to_string(header.size()) + " cells, got " +
                                 std::to_string(cells.size()));
        for (std::size_t c = skip; c < cells.size(); ++c) {
            double v = 0.0;
            if (!detail::parse_double(cells[c], v))
                throw ParseError(r + 1, c + 1,
                                 "cannot parse '" + std::string(cells[c]) + "' as a number");
            out.values.at(r - 1, c - skip) = v;
        }
    }
    return out;
}

struct SplitRatio {
    double train = 7, val = 1, test = 2;

    // Accepts "7:1:2" or "0.6:0.2:0.2".
    static SplitRatio parse(const std::string& text) {
        SplitRatio r;
        double* slots[3] = {&r.train, &r.val, &r.test};
        std::size_t pos = 0;
        for (int i = 0; i < 3; ++i) {
            const std::size_t colon = text.find(':', pos);
            const bool last = (i == 2);
            if (last != (colon == std::string::npos))
                throw ConfigError("ratio '" + text + "' must have three ':'-separated parts");
            const std::string part =
                text.substr(pos, last ? std::string::npos : colon - pos);
            double v = 0.0;
            if (!detail::parse_double(detail::trim(part), v) || v <= 0.0)
                throw ConfigError("ratio part '" + part + "' is not a positive number");
            *slots[i] = v;
            pos = colon + 1;
        }
        return r;
    }
};

// val/test tensors carry `context` rows of left context so a full lookback is
// available for every target inside the raw split.
struct SplitResult {
    Tensor train, val, test;
    std::size_t train_len = 0, val_len = 0, test_len = 0;
    std::size_t context = 0;
};

inline std::pair<std::size_t, std::size_t> split_boundaries(std::size_t T,
                                                            const SplitRatio& r) {
    const double total = r.train + r.val + r.test;
    // Multiply before dividing: exact for the integer ratios in common use.
    const auto b1 = static_cast<std::size_t>(
        std::floor(static_cast<double>(T) * r.train / total));
    const auto b2 = static_cast<std::size_t>(
        std::floor(static_cast<double>(T) * (r.train + r.val) / total));
    return {b1, b2};
}

inline Tensor copy_rows(const Tensor& src, std::size_t r0, std::size_t r1) {
    Tensor out{Shape{r1 - r0, src.cols()}};
    std::copy(src.data() + r0 * src.cols(), src.data() + r1 * src.cols(), out.data());
    return out;
}

inline SplitResult chronological_split(const SeriesMatrix& series, const SplitRatio& ratio,
                                       std::size_t L, std::size_t H) {
    const std::size_t T = series.length();
    const auto [b1, b2] = split_boundaries(T, ratio);
    const std::size_t lens[3] = {b1, b2 - b1, T - b2};
    const char* names[3] = {"train", "val", "test"};
    for (int i = 0; i < 3; ++i)
        if (lens[i] < L + H)
            throw SplitTooSmall(std::string(names[i]) + " split has " +
                                std::to_string(lens[i]) + " rows, needs at least L+H = " +
                                std::to_string(L + H));
    SplitResult out;
    out.train = copy_rows(series.values, 0, b1);
    out.val = copy_rows(series.values, b1 - L, b2);
    out.test = copy_rows(series.values, b2 - L, T);
    out.train_len = lens[0];
    out.val_len = lens[1];
    out.test_len = lens[2];
    out.context = L;
    return out;
}

// Per-channel z-score with statistics taken from the train split only.
class ChannelScaler {
public:
    static ChannelScaler fit(const Tensor& train) {
        if (train.rank() != 2 || train.rows() == 0)
            throw EmptyDataset("cannot fit a scaler on an empty segment");
        const std::size_t T = train.rows(), D = train.cols();
        ChannelScaler s;
        s.mean_ = Tensor{Shape{D}};
        s.std_ = Tensor{Shape{D}};
        for (std::size_t d = 0; d < D; ++d) {
            double m = 0.0;
            for (std::size_t t = 0; t < T; ++t) m += train.at(t, d);
            m /= static_cast<double>(T);
            double var = 0.0;
            for (std::size_t t = 0; t < T; ++t) {
                const double dv = train.at(t, d) - m;
                var += dv * dv;
            }
            var /= static_cast<double>(T);
            if (var <= 0.0)
                throw ConstantChannel("channel " + std::to_string(d) +
                                      " is constant on the train split");
            s.mean_[d] = m;
            s.std_[d] = std::sqrt(var);
        }
        return s;
    }

    static ChannelScaler identity(std::size_t D) {
        ChannelScaler s;
        s.mean_ = Tensor::zeros(Shape{D});
        s.std_ = Tensor::full(Shape{D}, 1.0);
        return s;
    }

    Tensor apply(const Tensor& values) const {
        if (values.rank() != 2 || values.cols() != mean_.size())
            throw ShapeMismatch("scaler fitted on " + std::to_string(mean_.size()) +
                                " channels, got " + shape_str(values.shape()));
        Tensor out{values.shape()};
        for (std::size_t t = 0; t < values.rows(); ++t)
            for (std::size_t d = 0; d < values.cols(); ++d)
                out.at(t, d) = (values.at(t, d) - mean_[d]) / std_[d];
        return out;
    }

    const Tensor& mean() const { return mean_; }
    const Tensor& stddev() const { return std_; }

private:
    Tensor mean_, std_;
};

struct WindowPair {
    Tensor x;  // D x L
    Tensor y;  // D x H
    std::size_t origin = 0;  // last lookback step: x covers (origin-L, origin]
};

// Stride-1 (by default) sliding windows over one split segment. Windows are
// assembled on demand; the segment itself is the only stored copy.
class WindowSet {
public:
    WindowSet(const Tensor& segment, std::size_t L, std::size_t H, std::size_t stride = 1)
        : seg_(&segment), L_(L), H_(H), stride_(stride) {
        if (L == 0 || H == 0 || stride == 0)
            throw ConfigError("window extents and stride must be positive");
        if (segment.rank() != 2 || segment.rows() < L + H)
            throw SplitTooSmall("segment of " + std::to_string(segment.rows()) +
                                " rows cannot fit one window of L+H = " +
                                std::to_string(L + H));
    }

    std::size_t count() const { return (seg_->rows() - L_ - H_) / stride_ + 1; }
    std::size_t lookback() const { return L_; }
    std::size_t horizon() const { return H_; }
    const Tensor& segment() const { return *seg_; }
    std::size_t start(std::size_t i) const { return i * stride_; }

    WindowPair window(std::size_t i) const {
        if (i >= count()) throw Error("window index out of range");
        const std::size_t s = start(i);
        const std::size_t D = seg_->cols();
        WindowPair w;
        w.x = Tensor{Shape{D, L_}};
        w.y = Tensor{Shape{D, H_}};
        for (std::size_t d = 0; d < D; ++d) {
            for (std::size_t t = 0; t < L_; ++t) w.x.at(d, t) = seg_->at(s + t, d);
            for (std::size_t h = 0; h < H_; ++h) w.y.at(d, h) = seg_->at(s + L_ + h, d);
        }
        w.origin = s + L_ - 1;
        return w;
    }

private:
    const Tensor* seg_;
    std::size_t L_, H_, stride_;
};

// Per-window per-channel normalization by lookback statistics; parameter-free
// and inverted on the model output.
constexpr double kRevinEps = 1e-5;

struct RevinStats {
    Tensor mean;   // D
    Tensor denom;  // D, sqrt(population variance + eps)
};

inline RevinStats revin_stats(const Tensor& x) {
    if (x.rank() != 2) throw ShapeMismatch("lookback must be D x L");
    const std::size_t D = x.rows(), L = x.cols();
    RevinStats st;
    st.mean = Tensor{Shape{D}};
    st.denom = Tensor{Shape{D}};
    for (std::size_t d = 0; d < D; ++d) {
        double m = 0.0;
        for (std::size_t t = 0; t < L; ++t) m += x.at(d, t);
        m /= static_cast<double>(L);
        double var = 0.0;
        for (std::size_t t = 0; t < L; ++t) {
            const double dv = x.at(d, t) - m;
            var += dv * dv;
        }
        var /= static_cast<double>(L);
        st.mean[d] = m;
        st.denom[d] = std::sqrt(var + kRevinEps);
    }
    return st;
}

inline Tensor revin_normalize(const Tensor& x, const RevinStats& st) {
    if (x.rank() != 2 || x.rows() != st.mean.size())
        throw ShapeMismatch("stats cover " + std::to_string(st.mean.size()) +
                            " channels, input is " + shape_str(x.shape()));
    Tensor out{x.shape()};
    for (std::size_t d = 0; d < x.rows(); ++d)
        for (std::size_t t = 0; t < x.cols(); ++t)
            out.at(d, t) = (x.at(d, t) - st.mean[d]) / st.denom[d];
    return out;
}

inline Tensor revin_denormalize(const Tensor& y, const RevinStats& st) {
    if (y.rank() != 2 || y.rows() != st.mean.size())
        throw ShapeMismatch("stats cover " + std::to_string(st.mean.size()) +
                            " channels, output is " + shape_str(y.shape()));
    Tensor out{y.shape()};
    for (std::size_t d = 0; d < y.rows(); ++d)
        for (std::size_t t = 0; t < y.cols(); ++t)
            out.at(d, t) = y.at(d, t) * st.denom[d] + st.mean[d];
    return out;
}

// Split, fit the scaler on the raw train rows, and standardize every segment
// with those train statistics.
struct PreparedData {
    SplitResult splits;
    ChannelScaler scaler;
};

inline PreparedData prepare_dataset(const SeriesMatrix& series, const SplitRatio& ratio,
                                    std::size_t L, std::size_t H) {
    PreparedData p{chronological_split(series, ratio, L, H), ChannelScaler::identity(1)};
    p.scaler = ChannelScaler::fit(p.splits.train);
    p.splits.train = p.scaler.apply(p.splits.train);
    p.splits.val = p.scaler.apply(p.splits.val);
    p.splits.test = p.scaler.apply(p.splits.test);
    return p;
}

}  // namespace altcast
