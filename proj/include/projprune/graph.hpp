#pragma once

#include <cstddef>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "projprune/tensor.hpp"

namespace projprune {

using NodeId = std::size_t;

// Gradient of the loss with respect to each named parameter reached by
// backprop. Parameters the loss does not depend on are absent.
using GradTable = std::map<std::string, Tensor>;

enum class OpKind {
    input,
    parameter,
    dense,
    conv2d,
    batchnorm,
    relu,
    avgpool,
    add,
    flatten,
    psi,
    channel_affine,
    mul,
    sum,
    softmax_cross_entropy,
};

const char* op_name(OpKind kind);

// Element-wise operation wrapped by a psi node.
enum class PsiSigma { relu, identity };

struct BatchNormConfig {
    bool training = true;
    // Only meaningful in training mode: fold batch statistics into the
    // running buffers as a side effect of forward.
    bool update_running = false;
    double eps = 1e-5;
    double momentum = 0.1;
    Tensor* running_mean = nullptr;
    Tensor* running_var = nullptr;
};

// Define-by-run reverse-mode tape. Every op computes its value when it is
// recorded; backprop walks the records in reverse. Parameter leaves alias
// tensors owned elsewhere, so the bound tensors must outlive the graph and
// must not change between recording and backprop.
class Graph {
public:
    NodeId input(Tensor value);
    NodeId parameter(const std::string& name, const Tensor& tensor);

    NodeId dense(NodeId x, NodeId weight, std::optional<NodeId> bias);
    NodeId conv2d(NodeId x, NodeId weight, std::optional<NodeId> bias, std::size_t stride, std::size_t padding);
    NodeId batchnorm(NodeId x, NodeId gamma, NodeId beta, const BatchNormConfig& config);
    NodeId relu(NodeId x);
    // kernel == 0 pools globally to 1x1.
    NodeId avgpool(NodeId x, std::size_t kernel);
    NodeId add(NodeId a, NodeId b);
    NodeId flatten(NodeId x);
    // (D*x - Dbar*x) + sigma(x) with per-channel D, Dbar.
    NodeId psi(NodeId x, NodeId d, NodeId dbar, PsiSigma sigma);
    NodeId channel_affine(NodeId x, NodeId scale, NodeId shift);
    NodeId mul(NodeId a, NodeId b);
    NodeId sum(NodeId x);
    // Mean over the batch of -log softmax(logits)[label].
    NodeId softmax_cross_entropy(NodeId logits, std::span<const int> labels);

    const Tensor& value(NodeId id) const;
    double scalar(NodeId id) const;
    OpKind kind(NodeId id) const { return nodes_.at(id).kind; }
    std::size_t size() const { return nodes_.size(); }

    // Gradient of the scalar node `loss` with respect to every parameter
    // leaf it depends on.
    GradTable backprop(NodeId loss);

    // Upstream gradient that arrived at a node during the last backprop.
    // Empty for nodes the loss does not depend on.
    std::span<const double> node_grad(NodeId id) const { return nodes_.at(id).grad; }

private:
    struct Node {
        OpKind kind = OpKind::input;
        std::vector<NodeId> inputs;
        Tensor value;
        const Tensor* bound = nullptr;
        std::string name;
        bool requires_grad = false;
        std::vector<double> grad;

        std::size_t stride = 1;
        std::size_t padding = 0;
        std::size_t kernel = 0;
        bool has_bias = false;
        PsiSigma sigma = PsiSigma::relu;
        bool training = true;
        std::vector<double> saved;
        std::vector<double> saved_channel;
        std::vector<int> labels;
    };

    const Node& node(NodeId id) const;
    NodeId push(Node n);
    void check_finite(const Node& n) const;
    void backward_node(Node& n);
    std::vector<double>& grad_of(NodeId id);

    std::vector<Node> nodes_;
};

// Central difference (L(theta + h e_i) - L(theta - h e_i)) / 2h for one
// scalar entry of `param`. `loss` must rebuild the forward pass from the
// current parameter values. The entry is restored afterwards.
double finite_diff_oracle(const std::function<double()>& loss, Tensor& param, std::size_t index, double h);

}  // namespace projprune
