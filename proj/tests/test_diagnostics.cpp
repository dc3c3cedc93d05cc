#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdio>
#include <map>

#include "altcast/diagnostics.hpp"
#include "altcast/rng.hpp"

using namespace altcast;

namespace {

ParamStore two_params() {
    ParamStore p;
    p.add("ar.a", Tensor::zeros(Shape{2}), true);
    p.add("ar.b", Tensor::zeros(Shape{3}), true);
    return p;
}

std::map<std::string, Tensor> snapshot(double a0, double a1, double b0, double b1,
                                       double b2) {
    return {{"ar.a", Tensor{Shape{2}, {a0, a1}}}, {"ar.b", Tensor{Shape{3}, {b0, b1, b2}}}};
}

}  // namespace

TEST_CASE("constant gradient stream has zero variance") {
    const ParamStore p = two_params();
    RollingVarTracker tr(p, "ar.", 4);
    for (int i = 0; i < 10; ++i) tr.update(snapshot(1, 2, 3, 4, 5));
    CHECK(tr.total_variance() == 0.0);
    CHECK(tr.log_variance() == Catch::Approx(std::log(kVarianceFloor)).margin(1e-12));
}

TEST_CASE("alternating unit stream gives variance two per parameter") {
    ParamStore p;
    p.add("ar.w", Tensor::zeros(Shape{1}), true);
    RollingVarTracker tr(p, "ar.", 2);
    double sign = 1.0;
    for (int i = 0; i < 8; ++i, sign = -sign)
        tr.update({{"ar.w", Tensor{Shape{1}, {sign}}}});
    CHECK(tr.total_variance() == Catch::Approx(2.0).margin(1e-15));
}

TEST_CASE("two parameters with variance one-half sum to log one") {
    ParamStore p;
    p.add("ar.a", Tensor::zeros(Shape{1}), true);
    p.add("ar.b", Tensor::zeros(Shape{1}), true);
    RollingVarTracker tr(p, "ar.", 2);
    tr.update({{"ar.a", Tensor{Shape{1}, {1.0}}}, {"ar.b", Tensor{Shape{1}, {1.0}}}});
    tr.update({{"ar.a", Tensor{Shape{1}, {2.0}}}, {"ar.b", Tensor{Shape{1}, {2.0}}}});
    CHECK(tr.total_variance() == Catch::Approx(1.0).margin(1e-15));
    CHECK(tr.log_variance() == Catch::Approx(0.0).margin(1e-15));
}

TEST_CASE("window keeps exactly the last K updates") {
    ParamStore p;
    p.add("ar.w", Tensor::zeros(Shape{1}), true);
    const std::size_t K = 5;
    RollingVarTracker tr(p, "ar.", K);
    RngStream rng(2);
    std::vector<double> stream;
    for (int i = 0; i < 20; ++i) {
        stream.push_back(rng.normal(0.0, 3.0));
        tr.update({{"ar.w", Tensor{Shape{1}, {stream.back()}}}});
    }
    // Recompute from the last K raw values.
    double mean = 0.0;
    for (std::size_t i = stream.size() - K; i < stream.size(); ++i) mean += stream[i];
    mean /= double(K);
    double var = 0.0;
    for (std::size_t i = stream.size() - K; i < stream.size(); ++i)
        var += (stream[i] - mean) * (stream[i] - mean);
    var /= double(K - 1);
    CHECK(tr.total_variance() == Catch::Approx(var).margin(1e-12));
}

TEST_CASE("too few updates is an error, not a zero") {
    const ParamStore p = two_params();
    RollingVarTracker tr(p, "ar.", 4);
    CHECK_THROWS_AS(tr.total_variance(), WindowTooShort);
    tr.update(snapshot(1, 1, 1, 1, 1));
    CHECK_THROWS_AS(tr.total_variance(), WindowTooShort);
    CHECK_FALSE(tr.ready());
    tr.update(snapshot(2, 2, 2, 2, 2));
    CHECK(tr.ready());
    CHECK_NOTHROW(tr.total_variance());
}

TEST_CASE("branch sums are additive across parameter subsets") {
    ParamStore p;
    p.add("ar.a", Tensor::zeros(Shape{2}), true);
    p.add("ar.b", Tensor::zeros(Shape{3}), true);
    RollingVarTracker whole(p, "ar.", 8);
    RollingVarTracker part_a(p, "ar.a", 8);
    RollingVarTracker part_b(p, "ar.b", 8);
    RngStream rng(3);
    for (int i = 0; i < 12; ++i) {
        const auto s = snapshot(rng.normal(0, 1), rng.normal(0, 1), rng.normal(0, 1),
                                rng.normal(0, 1), rng.normal(0, 1));
        whole.update(s);
        part_a.update({{"ar.a", s.at("ar.a")}});
        part_b.update({{"ar.b", s.at("ar.b")}});
    }
    CHECK(whole.total_variance() ==
          Catch::Approx(part_a.total_variance() + part_b.total_variance()).margin(1e-12));
}

TEST_CASE("snapshots must cover the tracked set exactly") {
    const ParamStore p = two_params();
    RollingVarTracker tr(p, "ar.", 4);
    CHECK_THROWS_AS(tr.update({{"ar.a", Tensor::zeros(Shape{2})}}), ShapeMismatch);
    CHECK_THROWS_AS(tr.update({{"ar.a", Tensor::zeros(Shape{2})},
                               {"ar.b", Tensor::zeros(Shape{9})}}),
                    ShapeMismatch);
    CHECK_THROWS_AS(tr.update({{"ar.a", Tensor::zeros(Shape{2})},
                               {"ar.x", Tensor::zeros(Shape{3})}}),
                    ShapeMismatch);
}

TEST_CASE("variance series export round-trips") {
    std::vector<VarianceRecord> hist;
    for (std::size_t epoch = 1; epoch <= 10; ++epoch)
        for (const char* branch : {"ar", "cr"})
            for (const char* mode : {"alternating", "joint"})
                hist.push_back({epoch, branch, mode,
                                std::log(1e-7 * double(epoch)) * (branch[0] == 'a' ? 1 : -1)});
    const std::string path = "altcast_test_var.csv";
    export_variance_series(hist, path);
    const auto back = load_variance_series(path);
    REQUIRE(back.size() == 40);
    for (std::size_t i = 0; i < back.size(); ++i) {
        CHECK(back[i].step_or_epoch == hist[i].step_or_epoch);
        CHECK(back[i].branch == hist[i].branch);
        CHECK(back[i].mode == hist[i].mode);
        CHECK(back[i].log_variance == hist[i].log_variance);  // %.17g is lossless
    }
    std::remove(path.c_str());

    CHECK_THROWS_AS(export_variance_series(hist, "no_such_dir/x.csv"), IoError);
    CHECK_THROWS_AS(load_variance_series("missing.csv"), FileNotFound);
}
