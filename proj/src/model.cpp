#include "projprune/model.hpp"

#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include "projprune/error.hpp"
#include "projprune/rng.hpp"

namespace projprune {

const char* layer_kind_name(LayerKind kind) {
    switch (kind) {
        case LayerKind::dense: return "dense";
        case LayerKind::conv2d: return "conv2d";
        case LayerKind::batchnorm: return "batchnorm";
        case LayerKind::relu: return "relu";
        case LayerKind::avgpool: return "avgpool";
        case LayerKind::add: return "add";
        case LayerKind::flatten: return "flatten";
        case LayerKind::psi: return "psi";
    }
    return "?";
}

LayerKind parse_layer_kind(std::string_view s) {
    for (LayerKind k : {LayerKind::dense, LayerKind::conv2d, LayerKind::batchnorm, LayerKind::relu,
                        LayerKind::avgpool, LayerKind::add, LayerKind::flatten, LayerKind::psi}) {
        if (s == layer_kind_name(k)) return k;
    }
    if (s == "concat") throw UnsupportedTopology("concatenation layers are not supported");
    throw ConfigError("unknown layer kind '" + std::string(s) + "'");
}

namespace {

std::string trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return std::string(s.substr(b, e - b + 1));
}

std::size_t parse_count(const std::string& v, const std::string& key, std::size_t line) {
    std::size_t pos = 0;
    unsigned long long n = 0;
    try {
        n = std::stoull(v, &pos);
    } catch (const std::exception&) {
        pos = 0;
    }
    if (pos != v.size() || v.empty() || v[0] == '-') {
        throw ConfigError("model spec line " + std::to_string(line) + ": bad value '" + v + "' for " + key);
    }
    return static_cast<std::size_t>(n);
}

std::vector<std::string> split(const std::string& s, char sep) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : s) {
        if (c == sep) {
            out.push_back(trim(cur));
            cur.clear();
        } else {
            cur += c;
        }
    }
    out.push_back(trim(cur));
    return out;
}

LayerSpec parse_layer_line(const std::string& body, std::size_t line) {
    std::istringstream is(body);
    LayerSpec l;
    std::string kind;
    if (!(is >> l.name >> kind)) throw ConfigError("model spec line " + std::to_string(line) + ": expected name and kind");
    l.kind = parse_layer_kind(kind);
    if (l.kind == LayerKind::dense) l.bias = true;
    std::string tok;
    while (is >> tok) {
        const auto eq = tok.find('=');
        if (eq == std::string::npos) throw ConfigError("model spec line " + std::to_string(line) + ": expected key=value, got '" + tok + "'");
        const std::string key = tok.substr(0, eq), val = tok.substr(eq + 1);
        if (key == "in") l.in_channels = parse_count(val, key, line);
        else if (key == "out" || key == "channels") l.out_channels = parse_count(val, key, line);
        else if (key == "k") l.kernel = parse_count(val, key, line);
        else if (key == "stride") l.stride = parse_count(val, key, line);
        else if (key == "pad") l.padding = parse_count(val, key, line);
        else if (key == "bias") l.bias = parse_count(val, key, line) != 0;
        else if (key == "from") l.inputs = split(val, ',');
        else if (key == "sigma") {
            if (val == "relu") l.sigma = PsiSigma::relu;
            else if (val == "identity") l.sigma = PsiSigma::identity;
            else throw ConfigError("model spec line " + std::to_string(line) + ": unknown sigma '" + val + "'");
        } else {
            throw ConfigError("model spec line " + std::to_string(line) + ": unknown key '" + key + "'");
        }
    }
    return l;
}

}  // namespace

ModelSpec parse_model_spec(std::string_view text) {
    ModelSpec spec;
    std::istringstream is{std::string(text)};
    std::string raw;
    std::size_t line = 0;
    bool have_input = false;
    while (std::getline(is, raw)) {
        ++line;
        if (auto hash = raw.find('#'); hash != std::string::npos) raw.erase(hash);
        const std::string s = trim(raw);
        if (s.empty()) continue;
        const auto eq = s.find('=');
        if (eq == std::string::npos) throw ConfigError("model spec line " + std::to_string(line) + ": expected key = value");
        const std::string key = trim(s.substr(0, eq));
        const std::string value = trim(s.substr(eq + 1));
        if (key == "input") {
            std::istringstream vs(value);
            std::string d;
            while (vs >> d) spec.input_shape.push_back(parse_count(d, "input", line));
            have_input = true;
        } else if (key == "layer") {
            spec.layers.push_back(parse_layer_line(value, line));
        } else {
            throw ConfigError("model spec line " + std::to_string(line) + ": unknown key '" + key + "'");
        }
    }
    if (!have_input || spec.input_shape.empty()) throw ConfigError("model spec: missing 'input' shape");
    if (spec.layers.empty()) throw ConfigError("model spec: no layers");
    return spec;
}

ModelSpec load_model_spec(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot open model spec '" + path.string() + "'");
    std::ostringstream ss;
    ss << is.rdbuf();
    return parse_model_spec(ss.str());
}

std::string format_model_spec(const ModelSpec& spec) {
    std::ostringstream os;
    os << "input =";
    for (std::size_t d : spec.input_shape) os << ' ' << d;
    os << '\n';
    for (const LayerSpec& l : spec.layers) {
        os << "layer = " << l.name << ' ' << layer_kind_name(l.kind);
        switch (l.kind) {
            case LayerKind::conv2d:
                os << " in=" << l.in_channels << " out=" << l.out_channels << " k=" << l.kernel << " stride=" << l.stride
                   << " pad=" << l.padding << " bias=" << (l.bias ? 1 : 0);
                break;
            case LayerKind::dense:
                os << " in=" << l.in_channels << " out=" << l.out_channels << " bias=" << (l.bias ? 1 : 0);
                break;
            case LayerKind::batchnorm: os << " channels=" << l.out_channels; break;
            case LayerKind::avgpool: os << " k=" << l.kernel; break;
            case LayerKind::psi: os << " sigma=" << (l.sigma == PsiSigma::relu ? "relu" : "identity"); break;
            default: break;
        }
        if (!l.inputs.empty()) {
            os << " from=";
            for (std::size_t i = 0; i < l.inputs.size(); ++i) os << (i ? "," : "") << l.inputs[i];
        }
        os << '\n';
    }
    return os.str();
}

std::vector<std::string> layer_param_names(const LayerSpec& l) {
    switch (l.kind) {
        case LayerKind::conv2d:
        case LayerKind::dense:
            if (l.bias) return {l.name + ".weight", l.name + ".bias"};
            return {l.name + ".weight"};
        case LayerKind::batchnorm: return {l.name + ".gamma", l.name + ".beta"};
        case LayerKind::psi: return {l.name + ".d", l.name + ".dbar"};
        default: return {};
    }
}

std::vector<std::string> layer_buffer_names(const LayerSpec& l) {
    if (l.kind == LayerKind::batchnorm) return {l.name + ".running_mean", l.name + ".running_var"};
    return {};
}

std::size_t Model::layer_index(std::string_view name) const {
    for (std::size_t i = 0; i < spec_.layers.size(); ++i)
        if (spec_.layers[i].name == name) return i;
    throw ConfigError("unknown layer '" + std::string(name) + "'");
}

bool Model::has_layer(std::string_view name) const {
    for (const auto& l : spec_.layers)
        if (l.name == name) return true;
    return false;
}

const Shape& Model::input_shape_of(std::size_t layer, std::size_t slot) const {
    const std::size_t p = producers_.at(layer).at(slot);
    return p == npos ? spec_.input_shape : shapes_[p];
}

std::size_t Model::num_classes() const {
    const Shape& s = shapes_.back();
    return s.size() == 1 ? s[0] : shape_size(s);
}

Tensor& Model::param(const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end()) throw ConfigError("unknown parameter '" + name + "'");
    return it->second;
}

const Tensor& Model::param(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw ConfigError("unknown parameter '" + name + "'");
    return it->second;
}

NamedTensors Model::state() const {
    NamedTensors s = params_;
    for (const auto& [k, v] : buffers_) s.emplace(k, v);
    return s;
}

void Model::analyse() {
    const auto& layers = spec_.layers;
    if (layers.empty()) throw ConfigError("model: no layers");
    std::set<std::string> names;
    for (const auto& l : layers) {
        if (l.name.empty() || l.name == kInputName) throw ConfigError("model: invalid layer name '" + l.name + "'");
        if (!names.insert(l.name).second) throw ConfigError("model: duplicate layer name '" + l.name + "'");
    }

    shapes_.assign(layers.size(), {});
    producers_.assign(layers.size(), {});
    consumers_.assign(layers.size(), {});
    auto fail = [](const LayerSpec& l, const std::string& what) {
        throw ShapeError(std::string(layer_kind_name(l.kind)) + " '" + l.name + "': " + what);
    };

    for (std::size_t i = 0; i < layers.size(); ++i) {
        LayerSpec& l = spec_.layers[i];
        if (l.inputs.empty()) l.inputs = {i == 0 ? std::string(kInputName) : layers[i - 1].name};
        const std::size_t want_inputs = l.kind == LayerKind::add ? 2 : 1;
        if (l.inputs.size() != want_inputs) {
            fail(l, "expects " + std::to_string(want_inputs) + " input(s), got " + std::to_string(l.inputs.size()));
        }
        std::vector<Shape> in_shapes;
        for (const std::string& src : l.inputs) {
            if (src == kInputName) {
                producers_[i].push_back(npos);
                in_shapes.push_back(spec_.input_shape);
                continue;
            }
            std::size_t p = npos;
            for (std::size_t j = 0; j < i; ++j)
                if (layers[j].name == src) p = j;
            if (p == npos) throw ConfigError("layer '" + l.name + "': input '" + src + "' is not an earlier layer");
            producers_[i].push_back(p);
            consumers_[p].push_back(i);
            in_shapes.push_back(shapes_[p]);
        }
        const Shape& in = in_shapes[0];
        switch (l.kind) {
            case LayerKind::conv2d: {
                if (in.size() != 3) fail(l, "expects a [C,H,W] input, got " + shape_str(in));
                if (l.in_channels != in[0])
                    fail(l, "declared in=" + std::to_string(l.in_channels) + " but input has " + std::to_string(in[0]) + " channels");
                if (l.out_channels == 0 || l.kernel == 0 || l.stride == 0) fail(l, "out, k and stride must be positive");
                if (in[1] + 2 * l.padding < l.kernel || in[2] + 2 * l.padding < l.kernel) fail(l, "kernel exceeds padded input");
                shapes_[i] = {l.out_channels, (in[1] + 2 * l.padding - l.kernel) / l.stride + 1,
                              (in[2] + 2 * l.padding - l.kernel) / l.stride + 1};
                break;
            }
            case LayerKind::dense:
                if (in.size() != 1) fail(l, "expects a flat input, got " + shape_str(in));
                if (l.in_channels != in[0])
                    fail(l, "declared in=" + std::to_string(l.in_channels) + " but input has " + std::to_string(in[0]) + " features");
                if (l.out_channels == 0) fail(l, "out must be positive");
                shapes_[i] = {l.out_channels};
                break;
            case LayerKind::batchnorm:
                if (l.out_channels != in[0])
                    fail(l, "declared channels=" + std::to_string(l.out_channels) + " but input has " + std::to_string(in[0]));
                shapes_[i] = in;
                break;
            case LayerKind::relu:
            case LayerKind::psi:
                shapes_[i] = in;
                break;
            case LayerKind::avgpool:
                if (in.size() != 3) fail(l, "expects a [C,H,W] input");
                if (l.kernel == 0) {
                    shapes_[i] = {in[0], 1, 1};
                } else {
                    if (l.kernel > in[1] || l.kernel > in[2]) fail(l, "window exceeds input");
                    shapes_[i] = {in[0], in[1] / l.kernel, in[2] / l.kernel};
                }
                break;
            case LayerKind::add:
                if (in_shapes[0] != in_shapes[1])
                    fail(l, "operand shapes " + shape_str(in_shapes[0]) + " vs " + shape_str(in_shapes[1]));
                shapes_[i] = in;
                break;
            case LayerKind::flatten:
                shapes_[i] = {shape_size(in)};
                break;
        }
    }
    if (shapes_.back().size() != 1) throw ShapeError("model: output layer must produce flat logits");
    for (std::size_t i = 0; i + 1 < layers.size(); ++i) {
        if (consumers_[i].empty()) throw UnsupportedTopology("layer '" + layers[i].name + "' has no consumer");
    }
}

Model Model::build(ModelSpec spec, std::uint64_t seed) {
    Model m;
    m.spec_ = std::move(spec);
    m.analyse();
    Rng rng(seed);
    for (std::size_t i = 0; i < m.spec_.layers.size(); ++i) {
        const LayerSpec& l = m.spec_.layers[i];
        switch (l.kind) {
            case LayerKind::conv2d:
            case LayerKind::dense: {
                const bool conv = l.kind == LayerKind::conv2d;
                const std::size_t fan_in = conv ? l.in_channels * l.kernel * l.kernel : l.in_channels;
                const Shape wshape = conv ? Shape{l.out_channels, l.in_channels, l.kernel, l.kernel}
                                          : Shape{l.out_channels, l.in_channels};
                Tensor w(wshape);
                const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
                for (double& v : w.values()) v = rng.uniform(-bound, bound);
                m.params_.emplace(l.name + ".weight", std::move(w));
                if (l.bias) {
                    Tensor b({l.out_channels});
                    const double bb = 1.0 / std::sqrt(static_cast<double>(fan_in));
                    for (double& v : b.values()) v = rng.uniform(-bb, bb);
                    m.params_.emplace(l.name + ".bias", std::move(b));
                }
                break;
            }
            case LayerKind::batchnorm:
                m.params_.emplace(l.name + ".gamma", Tensor({l.out_channels}, 1.0));
                m.params_.emplace(l.name + ".beta", Tensor({l.out_channels}, 0.0));
                m.buffers_.emplace(l.name + ".running_mean", Tensor({l.out_channels}, 0.0));
                m.buffers_.emplace(l.name + ".running_var", Tensor({l.out_channels}, 1.0));
                break;
            case LayerKind::psi: {
                const std::size_t c = m.output_shape(i)[0];
                m.params_.emplace(l.name + ".d", Tensor({c}, 0.0));
                m.params_.emplace(l.name + ".dbar", Tensor({c}, 0.0));
                break;
            }
            default:
                break;
        }
    }
    return m;
}

Model Model::from_state(ModelSpec spec, NamedTensors state) {
    Model m = build(std::move(spec), 0);
    auto adopt = [&](NamedTensors& into) {
        for (auto& [name, t] : into) {
            auto it = state.find(name);
            if (it == state.end()) throw ConfigError("checkpoint is missing '" + name + "'");
            if (it->second.shape() != t.shape()) {
                throw ShapeError("checkpoint entry '" + name + "' has shape " + shape_str(it->second.shape()) +
                                 ", model expects " + shape_str(t.shape()));
            }
            t = std::move(it->second);
            state.erase(it);
        }
    };
    adopt(m.params_);
    adopt(m.buffers_);
    if (!state.empty()) throw ConfigError("checkpoint has unexpected entry '" + state.begin()->first + "'");
    return m;
}

NodeId Model::forward(Graph& g, const Tensor& batch, Mode mode) {
    if (batch.rank() != spec_.input_shape.size() + 1 ||
        !std::equal(spec_.input_shape.begin(), spec_.input_shape.end(), batch.shape().begin() + 1)) {
        throw ShapeError("input: batch shape " + shape_str(batch.shape()) + " does not match model input " +
                         shape_str(spec_.input_shape));
    }
    const NodeId in = g.input(batch);
    std::vector<NodeId> out(spec_.layers.size());
    auto src = [&](std::size_t i, std::size_t slot) {
        const std::size_t p = producers_[i][slot];
        return p == npos ? in : out[p];
    };
    for (std::size_t i = 0; i < spec_.layers.size(); ++i) {
        const LayerSpec& l = spec_.layers[i];
        const NodeId x = src(i, 0);
        switch (l.kind) {
            case LayerKind::conv2d:
            case LayerKind::dense: {
                const NodeId w = g.parameter(l.name + ".weight", params_.at(l.name + ".weight"));
                std::optional<NodeId> b;
                if (l.bias) b = g.parameter(l.name + ".bias", params_.at(l.name + ".bias"));
                out[i] = l.kind == LayerKind::conv2d ? g.conv2d(x, w, b, l.stride, l.padding) : g.dense(x, w, b);
                break;
            }
            case LayerKind::batchnorm: {
                BatchNormConfig cfg;
                cfg.training = mode != Mode::eval;
                cfg.update_running = mode == Mode::train;
                cfg.running_mean = &buffers_.at(l.name + ".running_mean");
                cfg.running_var = &buffers_.at(l.name + ".running_var");
                const NodeId gamma = g.parameter(l.name + ".gamma", params_.at(l.name + ".gamma"));
                const NodeId beta = g.parameter(l.name + ".beta", params_.at(l.name + ".beta"));
                out[i] = g.batchnorm(x, gamma, beta, cfg);
                break;
            }
            case LayerKind::relu: out[i] = g.relu(x); break;
            case LayerKind::avgpool: out[i] = g.avgpool(x, l.kernel); break;
            case LayerKind::add: out[i] = g.add(x, src(i, 1)); break;
            case LayerKind::flatten: out[i] = g.flatten(x); break;
            case LayerKind::psi: {
                const NodeId d = g.parameter(l.name + ".d", params_.at(l.name + ".d"));
                const NodeId dbar = g.parameter(l.name + ".dbar", params_.at(l.name + ".dbar"));
                out[i] = g.psi(x, d, dbar, l.sigma);
                break;
            }
        }
    }
    return out.back();
}

double forward_loss(Graph& graph, Model& model, const Tensor& batch, std::span<const int> labels, Mode mode,
                    NodeId* loss_node) {
    if (batch.rank() == 0 || batch.dim(0) != labels.size()) {
        throw ShapeError("forward: batch extent does not match label count");
    }
    const NodeId logits = model.forward(graph, batch, mode);
    const NodeId loss = graph.softmax_cross_entropy(logits, labels);
    if (loss_node) *loss_node = loss;
    return graph.scalar(loss);
}

Tensor predict(Model& model, const Tensor& batch) {
    Graph g;
    const NodeId logits = model.forward(g, batch, Mode::eval);
    return g.value(logits);
}

}  // namespace projprune
