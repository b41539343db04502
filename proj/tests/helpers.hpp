#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "projprune/model.hpp"
#include "projprune/rng.hpp"
#include "projprune/tensor.hpp"

namespace testing {

using namespace projprune;

inline Tensor filled(Shape shape, const std::function<double(std::size_t)>& f) {
    Tensor t(std::move(shape));
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = f(i);
    return t;
}

inline Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
    Tensor t(std::move(shape));
    for (double& v : t.values()) v = rng.uniform(lo, hi);
    return t;
}

inline double rel_err(double a, double b) { return std::abs(a - b) / std::max(1.0, std::max(std::abs(a), std::abs(b))); }

// Small architectures covering every coupling the pruner handles.
inline const char* kChainCnn = R"(
input = 3 6 6
layer = c1 conv2d in=3 out=4 k=3 pad=1
layer = b1 batchnorm channels=4
layer = r1 relu
layer = c2 conv2d in=4 out=6 k=3 pad=1 stride=2 bias=1
layer = b2 batchnorm channels=6
layer = r2 relu
layer = pool avgpool k=0
layer = flat flatten
layer = fc dense in=6 out=3
)";

inline const char* kResidualCnn = R"(
input = 3 6 6
layer = stem conv2d in=3 out=4 k=3 pad=1
layer = stem_bn batchnorm channels=4
layer = stem_relu relu
layer = a1 conv2d in=4 out=4 k=3 pad=1
layer = a1_bn batchnorm channels=4
layer = a1_relu relu
layer = a2 conv2d in=4 out=4 k=3 pad=1
layer = a2_bn batchnorm channels=4
layer = a_add add from=a2_bn,stem_relu
layer = a_relu relu
layer = d1 conv2d in=4 out=6 k=3 pad=1 stride=2
layer = d1_bn batchnorm channels=6
layer = d1_relu relu
layer = d2 conv2d in=6 out=6 k=3 pad=1
layer = d2_bn batchnorm channels=6
layer = skip conv2d in=4 out=6 k=1 stride=2 from=a_relu
layer = skip_bn batchnorm channels=6
layer = d_add add from=d2_bn,skip_bn
layer = d_relu relu
layer = pool avgpool k=0
layer = flat flatten
layer = fc dense in=6 out=3
)";

inline const char* kFlattenCnn = R"(
input = 2 4 4
layer = c1 conv2d in=2 out=3 k=3 pad=1 bias=1
layer = r1 relu
layer = pool avgpool k=2
layer = flat flatten
layer = h dense in=12 out=5
layer = hr relu
layer = fc dense in=5 out=3
)";

inline const char* kMlp = R"(
input = 6
layer = h1 dense in=6 out=8
layer = r1 relu
layer = h2 dense in=8 out=5
layer = r2 relu
layer = fc dense in=5 out=3
)";

struct Arch {
    const char* name;
    const char* text;
};

inline std::vector<Arch> test_architectures() {
    return {{"chain", kChainCnn}, {"residual", kResidualCnn}, {"flatten", kFlattenCnn}, {"mlp", kMlp}};
}

// A built model whose BN running statistics and scales are not trivial, so
// eval-mode comparisons exercise every term.
inline Model perturbed_model(const char* text, std::uint64_t seed) {
    Model m = Model::build(parse_model_spec(text), seed);
    Rng rng(seed + 17);
    for (const LayerSpec& l : m.layers()) {
        if (l.kind != LayerKind::batchnorm) continue;
        for (double& v : m.param(l.name + ".gamma").values()) v = rng.uniform(0.5, 1.5);
        for (double& v : m.param(l.name + ".beta").values()) v = rng.uniform(-0.3, 0.3);
        for (double& v : m.buffers().at(l.name + ".running_mean").values()) v = rng.uniform(-0.2, 0.2);
        for (double& v : m.buffers().at(l.name + ".running_var").values()) v = rng.uniform(0.5, 2.0);
    }
    return m;
}

inline Shape batch_shape(const Model& m, std::size_t batch) {
    Shape s{batch};
    s.insert(s.end(), m.input_shape().begin(), m.input_shape().end());
    return s;
}

}  // namespace testing
