#include <doctest.h>

#include <set>

#include "helpers.hpp"
#include "projprune/channels.hpp"
#include "projprune/error.hpp"
#include "projprune/model.hpp"
#include "projprune/pruner.hpp"

using namespace projprune;
using testing::random_tensor;

TEST_SUITE("model-graph") {

TEST_CASE("spec text round-trips through the formatter") {
    for (const auto& arch : testing::test_architectures()) {
        CAPTURE(arch.name);
        const ModelSpec spec = parse_model_spec(arch.text);
        CHECK(parse_model_spec(format_model_spec(spec)) == spec);
    }
}

TEST_CASE("spec parse errors") {
    CHECK_THROWS_AS(parse_model_spec("layer = a relu\n"), ConfigError);
    CHECK_THROWS_AS(parse_model_spec("input = 3\nlayer = a frobnicate\n"), ConfigError);
    CHECK_THROWS_AS(parse_model_spec("input = 3\nlayer = a concat from=x,y\n"), UnsupportedTopology);
    CHECK_THROWS_AS(parse_model_spec("input = 3\nlayer = a dense in=3 out=2 colour=red\n"), ConfigError);
}

TEST_CASE("conv 1->8 chain builds with 8 prunable conv channels") {
    const Model m = Model::build(parse_model_spec(R"(
input = 1 5 5
layer = c conv2d in=1 out=8 k=3 pad=1
layer = b batchnorm channels=8
layer = r relu
layer = f flatten
layer = fc dense in=200 out=10
)"),
                                 1);
    CHECK(extract_filters(m, FilterTarget::conv_weights).size() == 8);
    CHECK(m.num_classes() == 10);
}

TEST_CASE("same spec and seed give bit-identical parameters; different seeds differ") {
    const ModelSpec spec = parse_model_spec(testing::kResidualCnn);
    const Model a = Model::build(spec, 9), b = Model::build(spec, 9), c = Model::build(spec, 10);
    CHECK(encode_checkpoint(a.state()) == encode_checkpoint(b.state()));
    CHECK(encode_checkpoint(a.state()) != encode_checkpoint(c.state()));
}

TEST_CASE("inconsistent channel counts are rejected") {
    CHECK_THROWS_AS(Model::build(parse_model_spec(R"(
input = 1 5 5
layer = c1 conv2d in=1 out=8 k=3
layer = c2 conv2d in=4 out=2 k=3
layer = f flatten
layer = fc dense in=2 out=2
)"),
                                 1),
                    ShapeError);
    CHECK_THROWS_AS(Model::build(parse_model_spec(R"(
input = 3 4 4
layer = c1 conv2d in=3 out=4 k=1
layer = c2 conv2d in=4 out=5 k=1
layer = a add from=c1,c2
layer = f flatten
layer = fc dense in=80 out=2
)"),
                                 1),
                    ShapeError);
}

TEST_CASE("kaiming-uniform initialization stays within its bound") {
    const Model m = Model::build(parse_model_spec(testing::kChainCnn), 4);
    const double bound = std::sqrt(6.0 / (3 * 9));
    for (double v : m.param("c1.weight").values()) CHECK(std::abs(v) <= bound);
    for (double v : m.param("b1.gamma").values()) CHECK(v == 1.0);
    for (double v : m.param("b1.beta").values()) CHECK(v == 0.0);
}

TEST_CASE("filter extraction: N = 27 for a 3-channel 3x3 conv, N = 2 for batchnorm") {
    const Model m = Model::build(parse_model_spec(R"(
input = 3 4 4
layer = c conv2d in=3 out=8 k=3 pad=1
layer = b batchnorm channels=8
layer = r relu
layer = p avgpool k=0
layer = f flatten
layer = fc dense in=8 out=2
)"),
                                 1);
    const auto conv = extract_filters(m, FilterTarget::conv_weights);
    REQUIRE(conv.size() == 8);
    for (const auto& h : conv) CHECK(h.filter_dim == 27);
    const auto bn = extract_filters(m, FilterTarget::bn_params);
    REQUIRE(bn.size() == 8);
    for (const auto& h : bn) CHECK(h.filter_dim == 2);
    CHECK(gather(m.params(), bn[3]) == std::vector<double>{1.0, 0.0});
}

TEST_CASE("dense-only model has no conv filters; classifier is never prunable") {
    const Model m = Model::build(parse_model_spec(testing::kMlp), 1);
    CHECK(extract_filters(m, FilterTarget::conv_weights).empty());
    const auto dense = extract_filters(m, FilterTarget::dense_weights);
    CHECK(dense.size() == 8 + 5);
    for (const auto& h : dense) CHECK(h.layer != "fc");
}

TEST_CASE("gather then scatter is the identity on parameters") {
    Model m = Model::build(parse_model_spec(testing::kResidualCnn), 2);
    const auto before = encode_checkpoint(m.state());
    for (auto target : {FilterTarget::conv_weights, FilterTarget::bn_params})
        for (const auto& h : extract_filters(m, target)) scatter(m.params(), h, gather(m.params(), h));
    CHECK(encode_checkpoint(m.state()) == before);
}

TEST_CASE("chain coupling: conv channel groups with its batchnorm and the next conv's input slice") {
    const Model m = Model::build(parse_model_spec(testing::kChainCnn), 1);
    const auto groups = dependency_groups(m);
    const auto& g = groups.front();
    std::set<std::string> layers;
    for (const auto& h : g.members) layers.insert(h.layer);
    CHECK(layers == std::set<std::string>{"c1", "b1"});
    REQUIRE(g.downstream.size() == 6);
    CHECK(g.downstream[0].param == "c2.weight");
    CHECK(g.downstream[0].length == 9);
}

TEST_CASE("residual coupling: channels feeding an add share one group; branches stay separate") {
    const Model m = Model::build(parse_model_spec(testing::kResidualCnn), 1);
    const DependencyAnalysis deps = analyse_dependencies(m);
    std::map<std::string, std::size_t> class_of;
    for (const auto& c : deps.classes) {
        for (auto p : c.producers) class_of[m.layers()[p].name] = c.id;
        for (auto b : c.batchnorms) class_of[m.layers()[b].name] = c.id;
    }
    CHECK(class_of["stem"] == class_of["a2"]);
    CHECK(class_of["d2"] == class_of["skip"]);
    CHECK(class_of["a1"] != class_of["stem"]);
    CHECK(class_of["d1"] != class_of["d2"]);
    CHECK(class_of["fc"] != class_of["d2"]);
    // every prunable channel handle sits in exactly one group
    std::set<std::pair<std::string, std::size_t>> seen;
    for (const auto& g : deps.groups)
        for (const auto& h : g.members) CHECK(seen.insert({h.layer, h.channel}).second);
    CHECK(seen.size() == 4 * 4 + 4 * 2 + 6 * 2 + 6 * 4);
}

TEST_CASE("flatten consumer slices cover a block of features per channel") {
    const Model m = Model::build(parse_model_spec(testing::kFlattenCnn), 1);
    const auto groups = dependency_groups(m);
    const auto& g = groups.front();
    REQUIRE(g.downstream.size() == 5);
    CHECK(g.downstream[0].param == "h.weight");
    CHECK(g.downstream[0].length == 4);
}

TEST_CASE("removing any single group leaves every layer shape-consistent") {
    Rng rng(8);
    for (const auto& arch : testing::test_architectures()) {
        CAPTURE(arch.name);
        Model m = Model::build(parse_model_spec(arch.text), 3);
        const DependencyAnalysis deps = analyse_dependencies(m);
        for (const auto& g : deps.groups) {
            PrunePlan plan;
            plan.selected.push_back({m.layers()[deps.classes[g.class_id].producers.front()].name, g.channel});
            Model pruned = apply_plan(m, plan);
            CHECK_NOTHROW(predict(pruned, random_tensor(testing::batch_shape(m, 2), rng)));
        }
    }
}

TEST_CASE("FLOPs and parameter counts") {
    const ModelSpec conv = parse_model_spec(R"(
input = 1 4 4
layer = c conv2d in=1 out=2 k=3 pad=1
layer = f flatten
layer = fc dense in=32 out=2 bias=0
)");
    const CostReport rc = count_params_flops(conv, {1, 4, 4});
    CHECK(rc.layers[0].flops == 576);
    CHECK(rc.layers[0].params == 18);

    const ModelSpec dense = parse_model_spec("input = 10\nlayer = fc dense in=10 out=5\n");
    const CostReport rd = count_params_flops(dense, {10});
    CHECK(rd.params == 55);
    CHECK(rd.flops == 100);
}

TEST_CASE("pruning half of a conv's output channels halves its FLOPs") {
    const Model m = Model::build(parse_model_spec(testing::kChainCnn), 1);
    PrunePlan plan;
    plan.selected = {{"c2", 0}, {"c2", 2}, {"c2", 4}};
    const Model p = apply_plan(m, plan);
    const auto before = count_params_flops(m), after = count_params_flops(p);
    CHECK(after.layers[3].flops * 2 == before.layers[3].flops);
    CHECK(after.params < before.params);
}

TEST_CASE("rebuilding from a checkpoint reproduces forward outputs bit-identically") {
    Rng rng(1);
    for (const auto& arch : testing::test_architectures()) {
        Model m = testing::perturbed_model(arch.text, 5);
        Model r = Model::from_state(m.spec(), decode_checkpoint(encode_checkpoint(m.state())));
        const Tensor x = random_tensor(testing::batch_shape(m, 4), rng);
        CHECK(predict(m, x).identical(predict(r, x)));
    }
}

TEST_CASE("from_state rejects missing, extra and misshaped tensors") {
    const Model m = Model::build(parse_model_spec(testing::kChainCnn), 1);
    NamedTensors missing = m.state();
    missing.erase("c1.weight");
    CHECK_THROWS(Model::from_state(m.spec(), missing));
    NamedTensors extra = m.state();
    extra["ghost"] = Tensor({1});
    CHECK_THROWS(Model::from_state(m.spec(), extra));
    NamedTensors bad = m.state();
    bad["c1.weight"] = Tensor({4, 3, 3, 2});
    CHECK_THROWS_AS(Model::from_state(m.spec(), bad), ShapeError);
}

TEST_CASE("train mode updates running statistics; score mode mutates nothing") {
    Rng rng(3);
    Model m = Model::build(parse_model_spec(testing::kChainCnn), 1);
    const Tensor x = random_tensor(testing::batch_shape(m, 4), rng);
    const int labels[] = {0, 1, 2, 0};
    const auto before = encode_checkpoint(m.state());
    Graph g1;
    forward_loss(g1, m, x, labels, Mode::score);
    CHECK(encode_checkpoint(m.state()) == before);
    Graph g2;
    forward_loss(g2, m, x, labels, Mode::train);
    CHECK(encode_checkpoint(m.state()) != before);
}

}  // TEST_SUITE
