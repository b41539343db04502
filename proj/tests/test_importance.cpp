#include <doctest.h>

#include <cmath>
#include <limits>

#include "helpers.hpp"
#include "projprune/error.hpp"
#include "projprune/importance.hpp"
#include "projprune/projective.hpp"
#include "projprune/training.hpp"

using namespace projprune;

namespace {

Dataset small_data(std::size_t per_class = 16, std::uint64_t seed = 3) {
    SyntheticSpec s;
    s.classes = 3;
    s.per_class = per_class;
    s.shape = {3, 6, 6};
    s.noise = 0.2;
    s.seed = seed;
    return synthetic(s);
}

ScoringOptions opts(FilterTarget t = FilterTarget::conv_weights) {
    ScoringOptions o;
    o.target = t;
    o.batch_size = 16;
    return o;
}

ImportanceReport make_report(Criterion c, std::vector<double> scores) {
    ImportanceReport r;
    r.criterion = c;
    for (std::size_t i = 0; i < scores.size(); ++i) r.entries.push_back({i < 3 ? "a" : "b", i % 3, scores[i]});
    return r;
}

}  // namespace

TEST_SUITE("importance") {

TEST_CASE("proscore report covers every prunable channel and matches the formula") {
    Model m = testing::perturbed_model(testing::kResidualCnn, 1);
    const Dataset d = small_data();
    const ProscoreGradients g = accumulate_proscore_gradients(m, d, opts());
    CHECK(g.batches == 3);
    const ImportanceReport r = proscore_report(g, 0.1);
    CHECK(r.entries.size() == extract_filters(m, FilterTarget::conv_weights).size());
    for (std::size_t i = 0; i < g.handles.size(); ++i) {
        CHECK(g.d[i] == l2_norm(gather(m.params(), g.handles[i])));
        CHECK(r.entries[i].score == proscore(g.filters[i], g.filter_grads[i], g.d[i], g.d_grads[i], 0.1));
        CHECK(r.entries[i].score >= 0.0);
    }
    CHECK(r.id() == "proscore_lambda0.1_subset1_seed0");
}

TEST_CASE("scoring leaves the model untouched and is deterministic") {
    Model m = testing::perturbed_model(testing::kChainCnn, 2);
    const auto before = encode_checkpoint(m.state());
    const Dataset d = small_data();
    const ImportanceReport a = score_proscore(m, d, 0.01, opts());
    CHECK(encode_checkpoint(m.state()) == before);
    const ImportanceReport b = score_proscore(m, d, 0.01, opts());
    CHECK(a == b);
    CHECK_THROWS_AS(score_proscore(m, d, 0.0, opts()), ConfigError);
    ScoringOptions bad = opts();
    bad.subset = 0.0;
    CHECK_THROWS_AS(score_proscore(m, d, 0.1, bad), ConfigError);
}

TEST_CASE("thread count does not change the report") {
    Model m = testing::perturbed_model(testing::kResidualCnn, 2);
    const Dataset d = small_data();
    ScoringOptions o = opts();
    const ImportanceReport a = score_proscore(m, d, 0.1, o);
    o.threads = 3;
    CHECK(score_proscore(m, d, 0.1, o) == a);
}

TEST_CASE("zero gradient reaching the filters gives score 1 for every lambda") {
    Model m = testing::perturbed_model(testing::kChainCnn, 3);
    for (double& v : m.param("fc.weight").values()) v = 0.0;
    const ProscoreGradients g = accumulate_proscore_gradients(m, small_data(), opts());
    for (double lambda : {1.0, 0.1, 0.01, 0.001})
        for (const auto& e : proscore_report(g, lambda).entries) CHECK(e.score == 1.0);
}

TEST_CASE("full-set gradients equal the sum over two half-sets") {
    Model m = testing::perturbed_model(testing::kResidualCnn, 4);
    const Dataset d = small_data(16);  // 48 samples: 3 batches of 16
    std::vector<std::size_t> first(32), second(16);
    for (std::size_t i = 0; i < 32; ++i) first[i] = i;
    for (std::size_t i = 0; i < 16; ++i) second[i] = 32 + i;
    const ProscoreGradients full = accumulate_proscore_gradients(m, d, opts());
    const ProscoreGradients a = accumulate_proscore_gradients(m, select(d, first), opts());
    const ProscoreGradients b = accumulate_proscore_gradients(m, select(d, second), opts());
    ProscoreGradients sum = a;
    for (std::size_t i = 0; i < sum.handles.size(); ++i) {
        for (std::size_t k = 0; k < sum.filter_grads[i].size(); ++k) sum.filter_grads[i][k] += b.filter_grads[i][k];
        sum.d_grads[i] += b.d_grads[i];
    }
    const auto rf = proscore_report(full, 0.1), rs = proscore_report(sum, 0.1);
    for (std::size_t i = 0; i < rf.entries.size(); ++i) CHECK(std::abs(rf.entries[i].score - rs.entries[i].score) <= 1e-10);
}

TEST_CASE("summed versus averaged gradients with rescaled lambda give identical scores") {
    Model m = testing::perturbed_model(testing::kChainCnn, 5);
    const Dataset d = small_data(16, 4);
    ScoringOptions o = opts();
    o.batch_size = 12;  // 4 batches, a power of two, so the rescaling is exact
    ProscoreGradients g = accumulate_proscore_gradients(m, d, o);
    REQUIRE(g.batches == 4);
    const ImportanceReport summed = proscore_report(g, 0.05);
    for (auto& fg : g.filter_grads)
        for (double& v : fg) v /= 4.0;
    for (double& v : g.d_grads) v /= 4.0;
    const ImportanceReport averaged = proscore_report(g, 0.2);
    for (std::size_t i = 0; i < summed.entries.size(); ++i) CHECK(summed.entries[i].score == averaged.entries[i].score);
}

TEST_CASE("balanced subsets are reproducible per seed") {
    Model m = testing::perturbed_model(testing::kChainCnn, 6);
    const Dataset d = small_data(20);
    ScoringOptions o = opts();
    o.subset = 0.5;
    o.seed = 7;
    const auto a = score_proscore(m, d, 0.1, o);
    CHECK(score_proscore(m, d, 0.1, o) == a);
    o.seed = 8;
    CHECK_FALSE(score_proscore(m, d, 0.1, o) == a);
}

TEST_CASE("bn_params and dense_weights targets score their own layers") {
    Model m = testing::perturbed_model(testing::kChainCnn, 7);
    const auto r = score_proscore(m, small_data(), 0.1, opts(FilterTarget::bn_params));
    CHECK(r.entries.size() == 10);
    CHECK(r.entries.front().layer == "b1");
    Model f = testing::perturbed_model(testing::kFlattenCnn, 7);
    SyntheticSpec s;
    s.classes = 3;
    s.per_class = 8;
    s.shape = {2, 4, 4};
    const auto rd = score_proscore(f, synthetic(s), 0.1, opts(FilterTarget::dense_weights));
    CHECK(rd.entries.size() == 5);
    CHECK(rd.entries.front().layer == "h");
}

TEST_CASE("l1 and l2 scores") {
    Model m = Model::build(parse_model_spec("input = 3\nlayer = h dense in=3 out=3 bias=0\nlayer = r relu\nlayer = fc dense in=3 out=2\n"), 1);
    auto& w = m.param("h.weight");
    const double rows[] = {1, -2, 3, 3, 4, 0, 0, 0, 0};
    for (std::size_t i = 0; i < 9; ++i) w[i] = rows[i];
    const auto l1 = score_l1(m, FilterTarget::dense_weights);
    const auto l2 = score_l2(m, FilterTarget::dense_weights);
    CHECK(l1.entries[0].score == 6.0);
    CHECK(l2.entries[1].score == 5.0);
    CHECK(l1.entries[2].score == 0.0);
    CHECK(l2.entries[2].score == 0.0);
}

TEST_CASE("taylor is |<w, summed gradient>| and homogeneous in the gradients") {
    CHECK(std::abs(dot(std::vector<double>{1, 2}, std::vector<double>{0.5, -0.25})) == 0.0);
    Model m = testing::perturbed_model(testing::kChainCnn, 8);
    const Dataset d = small_data();
    const ImportanceReport r = score_taylor(m, d, opts());
    Model copy = m;
    const AccumulatedGradients acc = accumulate_gradients(copy, d, 16);
    const auto handles = extract_filters(m, FilterTarget::conv_weights);
    for (std::size_t i = 0; i < handles.size(); ++i) {
        CHECK(r.entries[i].score == std::abs(dot(gather(m.params(), handles[i]), gather(acc.grads, handles[i]))));
    }
    Model zero = m;
    for (double& v : zero.param("fc.weight").values()) v = 0.0;
    for (const auto& e : score_taylor(zero, d, opts()).entries) CHECK(e.score == 0.0);
}

TEST_CASE("geometric median: symmetric, identical and grid-search cases") {
    const auto sym = geometric_median({{1, 0}, {-1, 0}, {0, 1}, {0, -1}});
    CHECK(std::abs(sym.median[0]) < 1e-12);
    CHECK(std::abs(sym.median[1]) < 1e-12);
    const auto same = geometric_median({{0.5, 0.5}, {0.5, 0.5}, {0.5, 0.5}});
    CHECK(same.median == std::vector<double>{0.5, 0.5});

    Rng rng(31);
    for (int trial = 0; trial < 5; ++trial) {
        std::vector<std::vector<double>> pts(3, std::vector<double>(2));
        for (auto& p : pts)
            for (double& v : p) v = rng.uniform(-1.0, 1.0);
        const auto med = geometric_median(pts);
        CHECK(med.converged);
        // brute-force grid search with step 1e-3
        double best = std::numeric_limits<double>::infinity(), bx = 0, by = 0;
        for (int i = 0; i <= 2000; ++i)
            for (int j = 0; j <= 2000; ++j) {
                const double x = -1.0 + 1e-3 * i, y = -1.0 + 1e-3 * j;
                double s = 0;
                for (const auto& p : pts) s += std::hypot(p[0] - x, p[1] - y);
                if (s < best) {
                    best = s;
                    bx = x;
                    by = y;
                }
            }
        for (const auto& p : pts) {
            const double oracle = std::hypot(p[0] - bx, p[1] - by);
            const double ours = std::hypot(p[0] - med.median[0], p[1] - med.median[1]);
            CHECK(std::abs(oracle - ours) < 2e-3);
        }
    }
}

TEST_CASE("fpgm scores per layer; a single-channel layer scores +inf") {
    Model m = Model::build(parse_model_spec("input = 2\nlayer = h dense in=2 out=4 bias=0\nlayer = r relu\n"
                                            "layer = s dense in=4 out=1 bias=0\nlayer = r2 relu\nlayer = fc dense in=1 out=2\n"),
                           1);
    const double rows[] = {1, 0, -1, 0, 0, 1, 0, -1};
    for (std::size_t i = 0; i < 8; ++i) m.param("h.weight")[i] = rows[i];
    const auto r = score_fpgm(m, FilterTarget::dense_weights);
    for (std::size_t c = 0; c < 4; ++c) CHECK(r.score("h", c) == doctest::Approx(1.0).epsilon(1e-9));
    CHECK(std::isinf(r.score("s", 0)));
}

TEST_CASE("random scores depend only on the seed") {
    Model m = Model::build(parse_model_spec(testing::kChainCnn), 1);
    CHECK(score_random(m, FilterTarget::conv_weights, 5) == score_random(m, FilterTarget::conv_weights, 5));
    CHECK_FALSE(score_random(m, FilterTarget::conv_weights, 5) == score_random(m, FilterTarget::conv_weights, 6));
}

TEST_CASE("report csv round trip, including +inf") {
    ImportanceReport r = make_report(Criterion::proscore, {0.5, 1.0 / 3.0, std::numeric_limits<double>::infinity(), 1e-300, 2, 3});
    r.lambda = 0.01;
    r.subset = 0.25;
    r.seed = 4;
    const std::string csv = report_to_csv(r, "config_hash=abc");
    CHECK(csv.find("inf") != std::string::npos);
    CHECK(csv.rfind("# config_hash=abc\n", 0) == 0);
    CHECK(report_from_csv(csv) == r);
    CHECK_THROWS_AS(report_from_csv("nope\n"), ParseError);
    CHECK_THROWS_AS(report_from_csv("layer,channel,criterion,lambda,subset,seed,score\na,0,l1,0,1,0,xyz\n"), ParseError);
}

TEST_CASE("correlation matrices") {
    const auto a = make_report(Criterion::l1, {1, 2, 3, 4, 5, 6});
    const auto rev = make_report(Criterion::l2, {3, 2, 1, 6, 5, 4});
    const auto flat = make_report(Criterion::random, {1, 1, 1, 1, 1, 1});
    const CorrelationMatrix m = correlate({a, rev, flat});
    CHECK(m.pearson[0][0] == 1.0);
    CHECK(m.spearman[0][1] == doctest::Approx(-1.0));
    CHECK(std::isnan(m.pearson[0][2]));
    CHECK(std::isnan(m.pearson[2][2]));
    for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t j = 0; j < 3; ++j)
            if (!std::isnan(m.pearson[i][j])) CHECK(m.pearson[i][j] == m.pearson[j][i]);
    auto missing = a;
    missing.entries.pop_back();
    CHECK_THROWS_AS(correlate({a, missing}), ConfigError);
}

TEST_CASE("per-layer min-max normalization maps +inf to the top") {
    const auto r = make_report(Criterion::fpgm, {2, 4, std::numeric_limits<double>::infinity(), 7, 7, 7});
    std::vector<std::pair<std::string, std::size_t>> order;
    for (const auto& e : r.entries) order.emplace_back(e.layer, e.channel);
    CHECK(normalized_scores(r, order) == std::vector<double>{0, 1, 1, 0, 0, 0});
}

}  // TEST_SUITE
