#include "projprune/graph.hpp"

#include <algorithm>
#include <cmath>

#include "projprune/error.hpp"

namespace projprune {

const char* op_name(OpKind kind) {
    switch (kind) {
        case OpKind::input: return "input";
        case OpKind::parameter: return "parameter";
        case OpKind::dense: return "dense";
        case OpKind::conv2d: return "conv2d";
        case OpKind::batchnorm: return "batchnorm";
        case OpKind::relu: return "relu";
        case OpKind::avgpool: return "avgpool";
        case OpKind::add: return "add";
        case OpKind::flatten: return "flatten";
        case OpKind::psi: return "psi";
        case OpKind::channel_affine: return "channel_affine";
        case OpKind::mul: return "mul";
        case OpKind::sum: return "sum";
        case OpKind::softmax_cross_entropy: return "softmax_cross_entropy";
    }
    return "?";
}

namespace {

// Extent of everything after the channel axis (1 for [B, C] tensors).
std::size_t spatial_extent(const Shape& s) {
    std::size_t n = 1;
    for (std::size_t i = 2; i < s.size(); ++i) n *= s[i];
    return n;
}

void require(bool cond, OpKind op, const std::string& what) {
    if (!cond) throw ShapeError(std::string(op_name(op)) + ": " + what);
}

}  // namespace

const Graph::Node& Graph::node(NodeId id) const {
    if (id >= nodes_.size()) throw StateError("graph: unknown node id " + std::to_string(id));
    return nodes_[id];
}

const Tensor& Graph::value(NodeId id) const {
    const Node& n = node(id);
    return n.bound ? *n.bound : n.value;
}

double Graph::scalar(NodeId id) const {
    const Tensor& t = value(id);
    if (t.size() != 1) throw ShapeError("graph: node is not a scalar");
    return t[0];
}

void Graph::check_finite(const Node& n) const {
    if (!n.value.all_finite()) {
        throw NumericFault(std::string(op_name(n.kind)) + ": non-finite activation (node " +
                           std::to_string(nodes_.size()) + ")");
    }
}

NodeId Graph::push(Node n) {
    for (NodeId in : n.inputs) n.requires_grad = n.requires_grad || nodes_[in].requires_grad;
    if (n.kind != OpKind::input && n.kind != OpKind::parameter) check_finite(n);
    nodes_.push_back(std::move(n));
    return nodes_.size() - 1;
}

NodeId Graph::input(Tensor value) {
    Node n;
    n.kind = OpKind::input;
    n.value = std::move(value);
    if (!n.value.all_finite()) throw NumericFault("input: non-finite value");
    return push(std::move(n));
}

NodeId Graph::parameter(const std::string& name, const Tensor& tensor) {
    Node n;
    n.kind = OpKind::parameter;
    n.bound = &tensor;
    n.name = name;
    n.requires_grad = true;
    return push(std::move(n));
}

NodeId Graph::dense(NodeId x, NodeId weight, std::optional<NodeId> bias) {
    const Tensor& xv = value(x);
    const Tensor& wv = value(weight);
    require(xv.rank() == 2 && wv.rank() == 2, OpKind::dense, "expects [B,in] input and [out,in] weight");
    const std::size_t batch = xv.dim(0), in = xv.dim(1), out = wv.dim(0);
    require(wv.dim(1) == in, OpKind::dense,
            "input features " + std::to_string(in) + " vs weight " + shape_str(wv.shape()));
    if (bias) require(value(*bias).size() == out, OpKind::dense, "bias length mismatch");

    Node n;
    n.kind = OpKind::dense;
    n.inputs = {x, weight};
    if (bias) n.inputs.push_back(*bias);
    n.has_bias = bias.has_value();
    n.value = Tensor({batch, out});
    const double* xp = xv.data();
    const double* wp = wv.data();
    double* yp = n.value.data();
    for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t o = 0; o < out; ++o) {
            double s = bias ? value(*bias)[o] : 0.0;
            const double* xr = xp + b * in;
            const double* wr = wp + o * in;
            for (std::size_t i = 0; i < in; ++i) s += wr[i] * xr[i];
            yp[b * out + o] = s;
        }
    }
    return push(std::move(n));
}

NodeId Graph::conv2d(NodeId x, NodeId weight, std::optional<NodeId> bias, std::size_t stride, std::size_t padding) {
    const Tensor& xv = value(x);
    const Tensor& wv = value(weight);
    require(xv.rank() == 4 && wv.rank() == 4, OpKind::conv2d, "expects [B,C,H,W] input and [O,C,k,k] weight");
    require(stride > 0, OpKind::conv2d, "stride must be positive");
    const std::size_t batch = xv.dim(0), cin = xv.dim(1), h = xv.dim(2), w = xv.dim(3);
    const std::size_t cout = wv.dim(0), kh = wv.dim(2), kw = wv.dim(3);
    require(wv.dim(1) == cin, OpKind::conv2d,
            "input channels " + std::to_string(cin) + " vs weight " + shape_str(wv.shape()));
    require(h + 2 * padding >= kh && w + 2 * padding >= kw, OpKind::conv2d, "kernel larger than padded input");
    if (bias) require(value(*bias).size() == cout, OpKind::conv2d, "bias length mismatch");
    const std::size_t oh = (h + 2 * padding - kh) / stride + 1;
    const std::size_t ow = (w + 2 * padding - kw) / stride + 1;

    Node n;
    n.kind = OpKind::conv2d;
    n.inputs = {x, weight};
    if (bias) n.inputs.push_back(*bias);
    n.has_bias = bias.has_value();
    n.stride = stride;
    n.padding = padding;
    n.value = Tensor({batch, cout, oh, ow});

    const double* xp = xv.data();
    const double* wp = wv.data();
    double* yp = n.value.data();
    const auto pad = static_cast<std::ptrdiff_t>(padding);
    for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t o = 0; o < cout; ++o) {
            double* yplane = yp + (b * cout + o) * oh * ow;
            const double bv = bias ? value(*bias)[o] : 0.0;
            std::fill(yplane, yplane + oh * ow, bv);
            for (std::size_t c = 0; c < cin; ++c) {
                const double* xplane = xp + (b * cin + c) * h * w;
                const double* wk = wp + (o * cin + c) * kh * kw;
                for (std::size_t ki = 0; ki < kh; ++ki) {
                    for (std::size_t kj = 0; kj < kw; ++kj) {
                        const double wt = wk[ki * kw + kj];
                        for (std::size_t r = 0; r < oh; ++r) {
                            const auto ih = static_cast<std::ptrdiff_t>(r * stride + ki) - pad;
                            if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(h)) continue;
                            const double* xrow = xplane + static_cast<std::size_t>(ih) * w;
                            double* yrow = yplane + r * ow;
                            for (std::size_t col = 0; col < ow; ++col) {
                                const auto iw = static_cast<std::ptrdiff_t>(col * stride + kj) - pad;
                                if (iw < 0 || iw >= static_cast<std::ptrdiff_t>(w)) continue;
                                yrow[col] += wt * xrow[iw];
                            }
                        }
                    }
                }
            }
        }
    }
    return push(std::move(n));
}

NodeId Graph::batchnorm(NodeId x, NodeId gamma, NodeId beta, const BatchNormConfig& config) {
    const Tensor& xv = value(x);
    require(xv.rank() >= 2, OpKind::batchnorm, "expects [B,C,...] input");
    const std::size_t batch = xv.dim(0), channels = xv.dim(1), sp = spatial_extent(xv.shape());
    require(value(gamma).size() == channels && value(beta).size() == channels, OpKind::batchnorm,
            "parameter length vs " + std::to_string(channels) + " channels");
    const bool needs_running = !config.training || config.update_running;
    require(!needs_running || (config.running_mean && config.running_var), OpKind::batchnorm,
            "running statistics not bound");
    if (needs_running) {
        require(config.running_mean->size() == channels && config.running_var->size() == channels, OpKind::batchnorm,
                "running statistics length mismatch");
    }
    const std::size_t count = batch * sp;
    if (config.training) require(count > 1, OpKind::batchnorm, "training mode needs more than one value per channel");

    Node n;
    n.kind = OpKind::batchnorm;
    n.inputs = {x, gamma, beta};
    n.training = config.training;
    n.value = Tensor(xv.shape());
    n.saved.assign(xv.size(), 0.0);
    n.saved_channel.assign(channels, 0.0);
    const double* xp = xv.data();
    const double* gp = value(gamma).data();
    const double* bp = value(beta).data();
    double* yp = n.value.data();
    for (std::size_t c = 0; c < channels; ++c) {
        double mean, var;
        if (config.training) {
            double s = 0.0;
            for (std::size_t b = 0; b < batch; ++b) {
                const double* p = xp + (b * channels + c) * sp;
                for (std::size_t i = 0; i < sp; ++i) s += p[i];
            }
            mean = s / static_cast<double>(count);
            double ss = 0.0;
            for (std::size_t b = 0; b < batch; ++b) {
                const double* p = xp + (b * channels + c) * sp;
                for (std::size_t i = 0; i < sp; ++i) ss += (p[i] - mean) * (p[i] - mean);
            }
            var = ss / static_cast<double>(count);
            if (config.update_running) {
                const double unbiased = ss / static_cast<double>(count - 1);
                double& rm = (*config.running_mean)[c];
                double& rv = (*config.running_var)[c];
                rm = (1.0 - config.momentum) * rm + config.momentum * mean;
                rv = (1.0 - config.momentum) * rv + config.momentum * unbiased;
            }
        } else {
            mean = (*config.running_mean)[c];
            var = (*config.running_var)[c];
        }
        const double inv_std = 1.0 / std::sqrt(var + config.eps);
        n.saved_channel[c] = inv_std;
        for (std::size_t b = 0; b < batch; ++b) {
            const std::size_t base = (b * channels + c) * sp;
            for (std::size_t i = 0; i < sp; ++i) {
                const double xhat = (xp[base + i] - mean) * inv_std;
                n.saved[base + i] = xhat;
                yp[base + i] = gp[c] * xhat + bp[c];
            }
        }
    }
    return push(std::move(n));
}

NodeId Graph::relu(NodeId x) {
    Node n;
    n.kind = OpKind::relu;
    n.inputs = {x};
    n.value = value(x);
    n.value.clear_grad();
    for (double& v : n.value.values()) v = v > 0.0 ? v : 0.0;
    return push(std::move(n));
}

NodeId Graph::avgpool(NodeId x, std::size_t kernel) {
    const Tensor& xv = value(x);
    require(xv.rank() == 4, OpKind::avgpool, "expects [B,C,H,W] input");
    const std::size_t batch = xv.dim(0), channels = xv.dim(1), h = xv.dim(2), w = xv.dim(3);
    const std::size_t kh = kernel == 0 ? h : kernel, kw = kernel == 0 ? w : kernel;
    require(kh <= h && kw <= w, OpKind::avgpool, "kernel larger than input");
    const std::size_t oh = h / kh, ow = w / kw;

    Node n;
    n.kind = OpKind::avgpool;
    n.inputs = {x};
    n.kernel = kernel;
    n.value = Tensor({batch, channels, oh, ow});
    const double scale = 1.0 / static_cast<double>(kh * kw);
    for (std::size_t bc = 0; bc < batch * channels; ++bc) {
        const double* xp = xv.data() + bc * h * w;
        double* yp = n.value.data() + bc * oh * ow;
        for (std::size_t r = 0; r < oh; ++r) {
            for (std::size_t c = 0; c < ow; ++c) {
                double s = 0.0;
                for (std::size_t i = 0; i < kh; ++i)
                    for (std::size_t j = 0; j < kw; ++j) s += xp[(r * kh + i) * w + c * kw + j];
                yp[r * ow + c] = s * scale;
            }
        }
    }
    return push(std::move(n));
}

NodeId Graph::add(NodeId a, NodeId b) {
    const Tensor& av = value(a);
    const Tensor& bv = value(b);
    require(av.shape() == bv.shape(), OpKind::add, shape_str(av.shape()) + " vs " + shape_str(bv.shape()));
    Node n;
    n.kind = OpKind::add;
    n.inputs = {a, b};
    n.value = Tensor(av.shape());
    for (std::size_t i = 0; i < av.size(); ++i) n.value[i] = av[i] + bv[i];
    return push(std::move(n));
}

NodeId Graph::flatten(NodeId x) {
    const Tensor& xv = value(x);
    require(xv.rank() >= 2, OpKind::flatten, "expects a batched input");
    Node n;
    n.kind = OpKind::flatten;
    n.inputs = {x};
    n.value = xv.reshaped({xv.dim(0), xv.size() / xv.dim(0)});
    return push(std::move(n));
}

NodeId Graph::psi(NodeId x, NodeId d, NodeId dbar, PsiSigma sigma) {
    const Tensor& xv = value(x);
    require(xv.rank() >= 2, OpKind::psi, "expects [B,C,...] input");
    const std::size_t batch = xv.dim(0), channels = xv.dim(1), sp = spatial_extent(xv.shape());
    const Tensor& dv = value(d);
    const Tensor& dbv = value(dbar);
    require(dv.size() == channels && dbv.size() == channels, OpKind::psi,
            "D/Dbar length vs " + std::to_string(channels) + " channels");
    Node n;
    n.kind = OpKind::psi;
    n.inputs = {x, d, dbar};
    n.sigma = sigma;
    n.value = Tensor(xv.shape());
    for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t c = 0; c < channels; ++c) {
            const std::size_t base = (b * channels + c) * sp;
            for (std::size_t i = 0; i < sp; ++i) {
                const double v = xv[base + i];
                const double s = sigma == PsiSigma::relu ? (v > 0.0 ? v : 0.0) : v;
                n.value[base + i] = (dv[c] * v - dbv[c] * v) + s;
            }
        }
    }
    return push(std::move(n));
}

NodeId Graph::channel_affine(NodeId x, NodeId scale, NodeId shift) {
    const Tensor& xv = value(x);
    require(xv.rank() >= 2, OpKind::channel_affine, "expects [B,C,...] input");
    const std::size_t batch = xv.dim(0), channels = xv.dim(1), sp = spatial_extent(xv.shape());
    const Tensor& sv = value(scale);
    const Tensor& tv = value(shift);
    require(sv.size() == channels && tv.size() == channels, OpKind::channel_affine, "parameter length mismatch");
    Node n;
    n.kind = OpKind::channel_affine;
    n.inputs = {x, scale, shift};
    n.value = Tensor(xv.shape());
    for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t c = 0; c < channels; ++c)
            for (std::size_t i = 0; i < sp; ++i) {
                const std::size_t k = (b * channels + c) * sp + i;
                n.value[k] = sv[c] * xv[k] + tv[c];
            }
    return push(std::move(n));
}

NodeId Graph::mul(NodeId a, NodeId b) {
    const Tensor& av = value(a);
    const Tensor& bv = value(b);
    require(av.shape() == bv.shape(), OpKind::mul, shape_str(av.shape()) + " vs " + shape_str(bv.shape()));
    Node n;
    n.kind = OpKind::mul;
    n.inputs = {a, b};
    n.value = Tensor(av.shape());
    for (std::size_t i = 0; i < av.size(); ++i) n.value[i] = av[i] * bv[i];
    return push(std::move(n));
}

NodeId Graph::sum(NodeId x) {
    const Tensor& xv = value(x);
    Node n;
    n.kind = OpKind::sum;
    n.inputs = {x};
    double s = 0.0;
    for (double v : xv.values()) s += v;
    n.value = Tensor::scalar(s);
    return push(std::move(n));
}

NodeId Graph::softmax_cross_entropy(NodeId logits, std::span<const int> labels) {
    const Tensor& lv = value(logits);
    require(lv.rank() == 2, OpKind::softmax_cross_entropy, "expects [B,K] logits");
    const std::size_t batch = lv.dim(0), classes = lv.dim(1);
    require(labels.size() == batch, OpKind::softmax_cross_entropy,
            "batch extent " + std::to_string(batch) + " vs " + std::to_string(labels.size()) + " labels");
    Node n;
    n.kind = OpKind::softmax_cross_entropy;
    n.inputs = {logits};
    n.labels.assign(labels.begin(), labels.end());
    n.saved.assign(lv.size(), 0.0);
    double loss = 0.0;
    for (std::size_t b = 0; b < batch; ++b) {
        const int label = labels[b];
        require(label >= 0 && static_cast<std::size_t>(label) < classes, OpKind::softmax_cross_entropy,
                "label out of range");
        const double* row = lv.data() + b * classes;
        const double m = *std::max_element(row, row + classes);
        double z = 0.0;
        for (std::size_t k = 0; k < classes; ++k) z += std::exp(row[k] - m);
        const double lse = m + std::log(z);
        for (std::size_t k = 0; k < classes; ++k) n.saved[b * classes + k] = std::exp(row[k] - lse);
        loss += lse - row[label];
    }
    n.value = Tensor::scalar(loss / static_cast<double>(batch));
    return push(std::move(n));
}

std::vector<double>& Graph::grad_of(NodeId id) {
    Node& n = nodes_[id];
    if (n.grad.empty()) n.grad.assign(value(id).size(), 0.0);
    return n.grad;
}

GradTable Graph::backprop(NodeId loss) {
    if (nodes_.empty()) throw StateError("backprop: forward has not run on this graph");
    if (loss >= nodes_.size()) throw StateError("backprop: unknown loss node");
    if (value(loss).size() != 1) throw ShapeError("backprop: loss must be a scalar");

    for (Node& n : nodes_) n.grad.clear();
    std::vector<char> reached(nodes_.size(), 0);
    reached[loss] = 1;
    grad_of(loss)[0] = 1.0;
    for (NodeId id = loss + 1; id-- > 0;) {
        if (!reached[id]) continue;
        Node& n = nodes_[id];
        if (!n.requires_grad) continue;
        for (NodeId in : n.inputs)
            if (nodes_[in].requires_grad) reached[in] = 1;
        if (n.kind == OpKind::input || n.kind == OpKind::parameter) continue;
        if (n.grad.empty()) continue;
        backward_node(n);
    }

    GradTable table;
    for (NodeId id = 0; id <= loss; ++id) {
        const Node& n = nodes_[id];
        if (n.kind != OpKind::parameter || !reached[id]) continue;
        auto it = table.find(n.name);
        if (it == table.end()) {
            Tensor g(n.bound->shape());
            if (!n.grad.empty()) std::copy(n.grad.begin(), n.grad.end(), g.data());
            table.emplace(n.name, std::move(g));
        } else if (!n.grad.empty()) {
            for (std::size_t i = 0; i < n.grad.size(); ++i) it->second[i] += n.grad[i];
        }
    }
    return table;
}

void Graph::backward_node(Node& n) {
    const std::vector<double>& dy = n.grad;
    auto wants = [&](std::size_t k) { return nodes_[n.inputs[k]].requires_grad; };

    switch (n.kind) {
        case OpKind::input:
        case OpKind::parameter:
            return;

        case OpKind::dense: {
            const Tensor& xv = value(n.inputs[0]);
            const Tensor& wv = value(n.inputs[1]);
            const std::size_t batch = xv.dim(0), in = xv.dim(1), out = wv.dim(0);
            if (wants(0)) {
                auto& dx = grad_of(n.inputs[0]);
                for (std::size_t b = 0; b < batch; ++b)
                    for (std::size_t o = 0; o < out; ++o) {
                        const double g = dy[b * out + o];
                        const double* wr = wv.data() + o * in;
                        for (std::size_t i = 0; i < in; ++i) dx[b * in + i] += g * wr[i];
                    }
            }
            if (wants(1)) {
                auto& dw = grad_of(n.inputs[1]);
                for (std::size_t b = 0; b < batch; ++b)
                    for (std::size_t o = 0; o < out; ++o) {
                        const double g = dy[b * out + o];
                        const double* xr = xv.data() + b * in;
                        for (std::size_t i = 0; i < in; ++i) dw[o * in + i] += g * xr[i];
                    }
            }
            if (n.has_bias && wants(2)) {
                auto& db = grad_of(n.inputs[2]);
                for (std::size_t b = 0; b < batch; ++b)
                    for (std::size_t o = 0; o < out; ++o) db[o] += dy[b * out + o];
            }
            return;
        }

        case OpKind::conv2d: {
            const Tensor& xv = value(n.inputs[0]);
            const Tensor& wv = value(n.inputs[1]);
            const std::size_t batch = xv.dim(0), cin = xv.dim(1), h = xv.dim(2), w = xv.dim(3);
            const std::size_t cout = wv.dim(0), kh = wv.dim(2), kw = wv.dim(3);
            const std::size_t oh = n.value.dim(2), ow = n.value.dim(3);
            const std::size_t stride = n.stride;
            const auto pad = static_cast<std::ptrdiff_t>(n.padding);
            const bool want_x = wants(0), want_w = wants(1);
            double* dx = want_x ? grad_of(n.inputs[0]).data() : nullptr;
            double* dw = want_w ? grad_of(n.inputs[1]).data() : nullptr;
            for (std::size_t b = 0; b < batch; ++b) {
                for (std::size_t o = 0; o < cout; ++o) {
                    const double* gplane = dy.data() + (b * cout + o) * oh * ow;
                    for (std::size_t c = 0; c < cin; ++c) {
                        const double* xplane = xv.data() + (b * cin + c) * h * w;
                        double* dxplane = want_x ? dx + (b * cin + c) * h * w : nullptr;
                        const std::size_t wbase = (o * cin + c) * kh * kw;
                        for (std::size_t ki = 0; ki < kh; ++ki) {
                            for (std::size_t kj = 0; kj < kw; ++kj) {
                                const double wt = wv[wbase + ki * kw + kj];
                                double acc = 0.0;
                                for (std::size_t r = 0; r < oh; ++r) {
                                    const auto ih = static_cast<std::ptrdiff_t>(r * stride + ki) - pad;
                                    if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(h)) continue;
                                    const std::size_t xrow = static_cast<std::size_t>(ih) * w;
                                    const double* grow = gplane + r * ow;
                                    for (std::size_t col = 0; col < ow; ++col) {
                                        const auto iw = static_cast<std::ptrdiff_t>(col * stride + kj) - pad;
                                        if (iw < 0 || iw >= static_cast<std::ptrdiff_t>(w)) continue;
                                        const double g = grow[col];
                                        acc += g * xplane[xrow + iw];
                                        if (dxplane) dxplane[xrow + iw] += g * wt;
                                    }
                                }
                                if (dw) dw[wbase + ki * kw + kj] += acc;
                            }
                        }
                    }
                }
            }
            if (n.has_bias && wants(2)) {
                auto& db = grad_of(n.inputs[2]);
                for (std::size_t b = 0; b < batch; ++b)
                    for (std::size_t o = 0; o < cout; ++o) {
                        const double* gplane = dy.data() + (b * cout + o) * oh * ow;
                        double s = 0.0;
                        for (std::size_t i = 0; i < oh * ow; ++i) s += gplane[i];
                        db[o] += s;
                    }
            }
            return;
        }

        case OpKind::batchnorm: {
            const Tensor& xv = value(n.inputs[0]);
            const Tensor& gv = value(n.inputs[1]);
            const std::size_t batch = xv.dim(0), channels = xv.dim(1), sp = spatial_extent(xv.shape());
            const double count = static_cast<double>(batch * sp);
            const bool want_x = wants(0);
            double* dx = want_x ? grad_of(n.inputs[0]).data() : nullptr;
            double* dg = wants(1) ? grad_of(n.inputs[1]).data() : nullptr;
            double* dbeta = wants(2) ? grad_of(n.inputs[2]).data() : nullptr;
            for (std::size_t c = 0; c < channels; ++c) {
                double sum_dy = 0.0, sum_dy_xhat = 0.0;
                for (std::size_t b = 0; b < batch; ++b) {
                    const std::size_t base = (b * channels + c) * sp;
                    for (std::size_t i = 0; i < sp; ++i) {
                        sum_dy += dy[base + i];
                        sum_dy_xhat += dy[base + i] * n.saved[base + i];
                    }
                }
                if (dg) dg[c] += sum_dy_xhat;
                if (dbeta) dbeta[c] += sum_dy;
                if (!dx) continue;
                const double inv_std = n.saved_channel[c];
                const double g = gv[c];
                for (std::size_t b = 0; b < batch; ++b) {
                    const std::size_t base = (b * channels + c) * sp;
                    for (std::size_t i = 0; i < sp; ++i) {
                        if (n.training) {
                            dx[base + i] += g * inv_std / count *
                                            (count * dy[base + i] - sum_dy - n.saved[base + i] * sum_dy_xhat);
                        } else {
                            dx[base + i] += g * inv_std * dy[base + i];
                        }
                    }
                }
            }
            return;
        }

        case OpKind::relu: {
            if (!wants(0)) return;
            const Tensor& xv = value(n.inputs[0]);
            auto& dx = grad_of(n.inputs[0]);
            for (std::size_t i = 0; i < xv.size(); ++i)
                if (xv[i] > 0.0) dx[i] += dy[i];
            return;
        }

        case OpKind::avgpool: {
            if (!wants(0)) return;
            const Tensor& xv = value(n.inputs[0]);
            const std::size_t h = xv.dim(2), w = xv.dim(3);
            const std::size_t kh = n.kernel == 0 ? h : n.kernel, kw = n.kernel == 0 ? w : n.kernel;
            const std::size_t oh = n.value.dim(2), ow = n.value.dim(3);
            const double scale = 1.0 / static_cast<double>(kh * kw);
            auto& dx = grad_of(n.inputs[0]);
            for (std::size_t bc = 0; bc < xv.dim(0) * xv.dim(1); ++bc) {
                double* dxp = dx.data() + bc * h * w;
                const double* gp = dy.data() + bc * oh * ow;
                for (std::size_t r = 0; r < oh; ++r)
                    for (std::size_t c = 0; c < ow; ++c) {
                        const double g = gp[r * ow + c] * scale;
                        for (std::size_t i = 0; i < kh; ++i)
                            for (std::size_t j = 0; j < kw; ++j) dxp[(r * kh + i) * w + c * kw + j] += g;
                    }
            }
            return;
        }

        case OpKind::add: {
            for (std::size_t k = 0; k < 2; ++k) {
                if (!wants(k)) continue;
                auto& dx = grad_of(n.inputs[k]);
                for (std::size_t i = 0; i < dy.size(); ++i) dx[i] += dy[i];
            }
            return;
        }

        case OpKind::flatten: {
            if (!wants(0)) return;
            auto& dx = grad_of(n.inputs[0]);
            for (std::size_t i = 0; i < dy.size(); ++i) dx[i] += dy[i];
            return;
        }

        case OpKind::psi: {
            const Tensor& xv = value(n.inputs[0]);
            const Tensor& dv = value(n.inputs[1]);
            const Tensor& dbv = value(n.inputs[2]);
            const std::size_t batch = xv.dim(0), channels = xv.dim(1), sp = spatial_extent(xv.shape());
            double* dx = wants(0) ? grad_of(n.inputs[0]).data() : nullptr;
            double* dd = wants(1) ? grad_of(n.inputs[1]).data() : nullptr;
            double* ddbar = wants(2) ? grad_of(n.inputs[2]).data() : nullptr;
            for (std::size_t c = 0; c < channels; ++c) {
                double x_dy = 0.0;
                const double diff = dv[c] - dbv[c];
                for (std::size_t b = 0; b < batch; ++b) {
                    const std::size_t base = (b * channels + c) * sp;
                    for (std::size_t i = 0; i < sp; ++i) {
                        const double v = xv[base + i];
                        const double g = dy[base + i];
                        x_dy += v * g;
                        if (dx) {
                            const double dsigma = n.sigma == PsiSigma::relu ? (v > 0.0 ? g : 0.0) : g;
                            dx[base + i] += diff * g + dsigma;
                        }
                    }
                }
                if (dd) dd[c] += x_dy;
                if (ddbar) ddbar[c] -= x_dy;
            }
            return;
        }

        case OpKind::channel_affine: {
            const Tensor& xv = value(n.inputs[0]);
            const Tensor& sv = value(n.inputs[1]);
            const std::size_t batch = xv.dim(0), channels = xv.dim(1), sp = spatial_extent(xv.shape());
            double* dx = wants(0) ? grad_of(n.inputs[0]).data() : nullptr;
            double* ds = wants(1) ? grad_of(n.inputs[1]).data() : nullptr;
            double* dt = wants(2) ? grad_of(n.inputs[2]).data() : nullptr;
            for (std::size_t b = 0; b < batch; ++b)
                for (std::size_t c = 0; c < channels; ++c)
                    for (std::size_t i = 0; i < sp; ++i) {
                        const std::size_t k = (b * channels + c) * sp + i;
                        if (dx) dx[k] += sv[c] * dy[k];
                        if (ds) ds[c] += xv[k] * dy[k];
                        if (dt) dt[c] += dy[k];
                    }
            return;
        }

        case OpKind::mul: {
            const Tensor& av = value(n.inputs[0]);
            const Tensor& bv = value(n.inputs[1]);
            if (wants(0)) {
                auto& da = grad_of(n.inputs[0]);
                for (std::size_t i = 0; i < dy.size(); ++i) da[i] += dy[i] * bv[i];
            }
            if (wants(1)) {
                auto& db = grad_of(n.inputs[1]);
                for (std::size_t i = 0; i < dy.size(); ++i) db[i] += dy[i] * av[i];
            }
            return;
        }

        case OpKind::sum: {
            if (!wants(0)) return;
            auto& dx = grad_of(n.inputs[0]);
            for (double& v : dx) v += dy[0];
            return;
        }

        case OpKind::softmax_cross_entropy: {
            if (!wants(0)) return;
            const std::size_t classes = value(n.inputs[0]).dim(1);
            const std::size_t batch = n.labels.size();
            auto& dx = grad_of(n.inputs[0]);
            const double scale = dy[0] / static_cast<double>(batch);
            for (std::size_t b = 0; b < batch; ++b)
                for (std::size_t k = 0; k < classes; ++k) {
                    const double target = static_cast<int>(k) == n.labels[b] ? 1.0 : 0.0;
                    dx[b * classes + k] += scale * (n.saved[b * classes + k] - target);
                }
            return;
        }
    }
}

double finite_diff_oracle(const std::function<double()>& loss, Tensor& param, std::size_t index, double h) {
    if (!(h > 0.0)) throw ConfigError("finite_diff_oracle: step h must be positive");
    if (index >= param.size()) throw ShapeError("finite_diff_oracle: index out of range");
    const double saved = param[index];
    param[index] = saved + h;
    const double up = loss();
    param[index] = saved - h;
    const double down = loss();
    param[index] = saved;
    return (up - down) / (2.0 * h);
}

}  // namespace projprune
