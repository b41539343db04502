#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "projprune/checkpoint.hpp"
#include "projprune/graph.hpp"
#include "projprune/tensor.hpp"

namespace projprune {

enum class LayerKind { dense, conv2d, batchnorm, relu, avgpool, add, flatten, psi };

const char* layer_kind_name(LayerKind kind);
LayerKind parse_layer_kind(std::string_view s);

struct LayerSpec {
    LayerKind kind = LayerKind::relu;
    std::string name;
    // Producer layer names, or "input". Empty means "the previous layer".
    std::vector<std::string> inputs;
    // conv2d / dense: in and out; batchnorm: out_channels is the channel count.
    std::size_t in_channels = 0;
    std::size_t out_channels = 0;
    // conv2d: square kernel; avgpool: window (0 = global).
    std::size_t kernel = 0;
    std::size_t stride = 1;
    std::size_t padding = 0;
    bool bias = false;
    // psi only.
    PsiSigma sigma = PsiSigma::relu;

    bool operator==(const LayerSpec&) const = default;
};

// Per-sample input shape ({C,H,W} or {features}) and an ordered layer list;
// the last layer is the model output.
struct ModelSpec {
    Shape input_shape;
    std::vector<LayerSpec> layers;

    bool operator==(const ModelSpec&) const = default;
};

inline constexpr const char* kInputName = "input";

// Human-readable architecture file:
//   input = 3 8 8
//   layer = conv1 conv2d in=3 out=8 k=3 stride=1 pad=1 bias=0
//   layer = add1 add from=bn2,relu1
// '#' starts a comment.
ModelSpec parse_model_spec(std::string_view text);
ModelSpec load_model_spec(const std::filesystem::path& path);
std::string format_model_spec(const ModelSpec& spec);

enum class Mode {
    train,  // batch statistics, running statistics updated
    score,  // batch statistics, nothing mutated
    eval,   // running statistics
};

class Model {
public:
    // Validates shapes and initializes parameters deterministically: conv and
    // dense weights Kaiming-uniform, biases U(+-1/sqrt(fan_in)), BN scale 1,
    // shift 0, running mean 0, running variance 1.
    static Model build(ModelSpec spec, std::uint64_t seed);
    // Validates that `state` carries exactly the tensors `spec` needs.
    static Model from_state(ModelSpec spec, NamedTensors state);

    const ModelSpec& spec() const { return spec_; }
    const std::vector<LayerSpec>& layers() const { return spec_.layers; }
    std::size_t layer_index(std::string_view name) const;
    const LayerSpec& layer(std::string_view name) const { return spec_.layers[layer_index(name)]; }
    bool has_layer(std::string_view name) const;

    // Per-sample output shape of each layer.
    const Shape& output_shape(std::size_t layer) const { return shapes_[layer]; }
    const Shape& input_shape() const { return spec_.input_shape; }
    // Per-sample shape feeding input slot `slot` of layer `layer`.
    const Shape& input_shape_of(std::size_t layer, std::size_t slot = 0) const;
    // Indices of producers for each input slot; npos for the model input.
    const std::vector<std::size_t>& producers(std::size_t layer) const { return producers_[layer]; }
    const std::vector<std::size_t>& consumers(std::size_t layer) const { return consumers_[layer]; }
    std::size_t num_classes() const;

    NamedTensors& params() { return params_; }
    const NamedTensors& params() const { return params_; }
    NamedTensors& buffers() { return buffers_; }
    const NamedTensors& buffers() const { return buffers_; }
    Tensor& param(const std::string& name);
    const Tensor& param(const std::string& name) const;

    // Parameters and buffers together, as written to a checkpoint.
    NamedTensors state() const;

    // Records the forward pass for `batch` ([B, ...input_shape]) and returns
    // the logits node. Mode::train mutates BN running statistics.
    NodeId forward(Graph& graph, const Tensor& batch, Mode mode);

    static constexpr std::size_t npos = static_cast<std::size_t>(-1);

private:
    Model() = default;
    void analyse();

    ModelSpec spec_;
    NamedTensors params_;
    NamedTensors buffers_;
    std::vector<Shape> shapes_;
    std::vector<std::vector<std::size_t>> producers_;
    std::vector<std::vector<std::size_t>> consumers_;
};

// Names of the parameters and buffers a layer owns.
std::vector<std::string> layer_param_names(const LayerSpec& layer);
std::vector<std::string> layer_buffer_names(const LayerSpec& layer);

// Softmax cross-entropy of the model on one batch.
double forward_loss(Graph& graph, Model& model, const Tensor& batch, std::span<const int> labels, Mode mode,
                    NodeId* loss_node = nullptr);

// Eval-mode logits for a batch.
Tensor predict(Model& model, const Tensor& batch);

}  // namespace projprune
