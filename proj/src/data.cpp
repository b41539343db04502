#include "projprune/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>

#include "projprune/error.hpp"
#include "projprune/rng.hpp"

namespace projprune {

void Dataset::validate() const {
    if (labels.empty()) throw ConfigError("dataset: no samples");
    if (images.rank() < 2 || images.dim(0) != labels.size()) throw ShapeError("dataset: image/label count mismatch");
    for (int l : labels)
        if (l < 0 || static_cast<std::size_t>(l) >= classes) throw ConfigError("dataset: label outside class range");
    if (!images.all_finite()) throw NumericFault("dataset: non-finite pixel");
}

namespace {

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw ConfigError("cannot open data file '" + path.string() + "'");
    return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

std::uint32_t be32(std::span<const std::uint8_t> b, std::size_t off, const char* file) {
    if (b.size() < off + 4) {
        throw ParseError(std::string(file) + ": truncated header at byte offset " + std::to_string(b.size()));
    }
    return (std::uint32_t{b[off]} << 24) | (std::uint32_t{b[off + 1]} << 16) | (std::uint32_t{b[off + 2]} << 8) |
           std::uint32_t{b[off + 3]};
}

std::size_t max_label_plus_one(const std::vector<int>& labels) {
    return static_cast<std::size_t>(*std::max_element(labels.begin(), labels.end())) + 1;
}

}  // namespace

Dataset parse_idx(std::span<const std::uint8_t> images, std::span<const std::uint8_t> labels) {
    if (be32(images, 0, "idx images") != 0x00000803u) throw ParseError("idx images: bad magic at byte offset 0");
    if (be32(labels, 0, "idx labels") != 0x00000801u) throw ParseError("idx labels: bad magic at byte offset 0");
    const std::size_t n = be32(images, 4, "idx images");
    const std::size_t rows = be32(images, 8, "idx images");
    const std::size_t cols = be32(images, 12, "idx images");
    const std::size_t nl = be32(labels, 4, "idx labels");
    if (n != nl) {
        throw ParseError("idx: image count " + std::to_string(n) + " (byte offset 4) vs label count " + std::to_string(nl));
    }
    if (n == 0) throw ParseError("idx: empty archive");
    const std::size_t need = 16 + n * rows * cols;
    if (images.size() < need) {
        throw ParseError("idx images: truncated payload at byte offset " + std::to_string(images.size()) + ", expected " +
                         std::to_string(need) + " bytes");
    }
    if (labels.size() < 8 + n) {
        throw ParseError("idx labels: truncated payload at byte offset " + std::to_string(labels.size()) + ", expected " +
                         std::to_string(8 + n) + " bytes");
    }
    Dataset d;
    d.images = Tensor({n, 1, rows, cols});
    for (std::size_t i = 0; i < n * rows * cols; ++i) d.images[i] = images[16 + i] / 255.0;
    d.labels.resize(n);
    for (std::size_t i = 0; i < n; ++i) d.labels[i] = labels[8 + i];
    d.classes = max_label_plus_one(d.labels);
    return d;
}

Dataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels) {
    return parse_idx(read_file(images), read_file(labels));
}

Dataset parse_cifar_bin(std::span<const std::uint8_t> bytes) {
    constexpr std::size_t kRecord = 1 + 3 * 32 * 32;
    if (bytes.empty()) throw ParseError("cifar: empty file");
    if (bytes.size() % kRecord != 0) {
        throw ParseError("cifar: size " + std::to_string(bytes.size()) + " is not a multiple of 3073; partial record at byte offset " +
                         std::to_string(bytes.size() / kRecord * kRecord));
    }
    const std::size_t n = bytes.size() / kRecord;
    Dataset d;
    d.images = Tensor({n, 3, 32, 32});
    d.labels.resize(n);
    for (std::size_t r = 0; r < n; ++r) {
        const std::uint8_t* rec = bytes.data() + r * kRecord;
        if (rec[0] > 9) throw ParseError("cifar: label " + std::to_string(rec[0]) + " at byte offset " + std::to_string(r * kRecord));
        d.labels[r] = rec[0];
        for (std::size_t i = 0; i < kRecord - 1; ++i) d.images[r * (kRecord - 1) + i] = rec[1 + i] / 255.0;
    }
    d.classes = 10;
    return d;
}

Dataset load_cifar_bin(const std::vector<std::filesystem::path>& paths) {
    if (paths.empty()) throw ConfigError("cifar: no input files");
    std::vector<std::uint8_t> all;
    for (const auto& p : paths) {
        auto b = read_file(p);
        if (b.empty()) throw ParseError("cifar: empty file '" + p.string() + "'");
        all.insert(all.end(), b.begin(), b.end());
    }
    return parse_cifar_bin(all);
}

Dataset synthetic(const SyntheticSpec& spec, Split split) {
    if (spec.classes < 2) throw ConfigError("synthetic: need at least 2 classes");
    if (spec.per_class == 0) throw ConfigError("synthetic: per_class must be positive");
    if (spec.shape.size() != 3) throw ConfigError("synthetic: shape must be C H W");
    if (spec.modes == 0) throw ConfigError("synthetic: modes must be positive");
    const std::size_t c = spec.shape[0], h = spec.shape[1], w = spec.shape[2];
    const std::size_t plane = h * w, pixels = c * plane;

    Rng proto_rng(spec.prototype_seed ? spec.prototype_seed : spec.seed);
    std::vector<std::vector<double>> protos(spec.classes * spec.modes, std::vector<double>(pixels, 0.0));
    constexpr int kBlobs = 3;
    for (auto& p : protos) {
        std::vector<double> field(pixels, 0.0);
        for (int b = 0; b < kBlobs; ++b) {
            const double cy = proto_rng.uniform(0.0, static_cast<double>(h));
            const double cx = proto_rng.uniform(0.0, static_cast<double>(w));
            const double sigma = proto_rng.uniform(0.15, 0.35) * static_cast<double>(std::min(h, w));
            std::vector<double> amp(c);
            for (double& a : amp) a = proto_rng.uniform(-1.0, 1.0);
            for (std::size_t y = 0; y < h; ++y)
                for (std::size_t x = 0; x < w; ++x) {
                    const double dy = static_cast<double>(y) - cy, dx = static_cast<double>(x) - cx;
                    const double g = std::exp(-(dy * dy + dx * dx) / (2.0 * sigma * sigma));
                    for (std::size_t ch = 0; ch < c; ++ch) field[ch * plane + y * w + x] += amp[ch] * g;
                }
        }
        for (std::size_t i = 0; i < pixels; ++i) p[i] = std::clamp(0.5 + 0.5 * field[i], 0.0, 1.0);
    }

    const std::uint64_t sample_seed = spec.seed * 0x9E3779B97F4A7C15ull + (split == Split::train ? 1 : 2);
    Rng rng(sample_seed);
    const std::size_t n = spec.classes * spec.per_class;
    Dataset d;
    d.images = Tensor({n, c, h, w});
    d.labels.resize(n);
    d.classes = spec.classes;
    d.split = split;
    const auto jit = static_cast<std::ptrdiff_t>(spec.jitter);
    for (std::size_t j = 0; j < spec.per_class; ++j) {
        for (std::size_t k = 0; k < spec.classes; ++k) {
            const std::size_t idx = j * spec.classes + k;
            d.labels[idx] = static_cast<int>(k);
            const std::size_t mode = spec.modes > 1 ? static_cast<std::size_t>(rng.below(spec.modes)) : 0;
            const auto& p = protos[k * spec.modes + mode];
            std::ptrdiff_t sy = 0, sx = 0;
            if (jit > 0) {
                sy = static_cast<std::ptrdiff_t>(rng.below(2 * spec.jitter + 1)) - jit;
                sx = static_cast<std::ptrdiff_t>(rng.below(2 * spec.jitter + 1)) - jit;
            }
            const double contrast = spec.noise > 0.0 ? std::clamp(1.0 + 0.5 * spec.noise * rng.normal(), 0.5, 1.5) : 1.0;
            double* out = d.images.data() + idx * pixels;
            for (std::size_t ch = 0; ch < c; ++ch)
                for (std::size_t y = 0; y < h; ++y)
                    for (std::size_t x = 0; x < w; ++x) {
                        const std::ptrdiff_t py = static_cast<std::ptrdiff_t>(y) - sy;
                        const std::ptrdiff_t px = static_cast<std::ptrdiff_t>(x) - sx;
                        double v = 0.5;
                        if (py >= 0 && px >= 0 && py < static_cast<std::ptrdiff_t>(h) && px < static_cast<std::ptrdiff_t>(w)) {
                            v = p[ch * plane + static_cast<std::size_t>(py) * w + static_cast<std::size_t>(px)];
                        }
                        v = 0.5 + contrast * (v - 0.5);
                        if (spec.noise > 0.0) v += spec.noise * rng.normal();
                        out[ch * plane + y * w + x] = std::clamp(v, 0.0, 1.0);
                    }
        }
    }
    return d;
}

std::vector<std::size_t> balanced_indices(const Dataset& data, double fraction, std::uint64_t seed) {
    if (!(fraction > 0.0 && fraction <= 1.0)) throw ConfigError("balanced_subset: fraction must be in (0, 1]");
    std::vector<std::vector<std::size_t>> by_class(data.classes);
    for (std::size_t i = 0; i < data.size(); ++i) by_class[static_cast<std::size_t>(data.labels[i])].push_back(i);
    Rng rng(seed);
    std::size_t longest = 0;
    for (std::size_t k = 0; k < data.classes; ++k) {
        auto& idx = by_class[k];
        if (idx.empty()) continue;
        rng.shuffle(idx);
        const auto keep = static_cast<std::size_t>(std::floor(fraction * static_cast<double>(idx.size()) + 1e-9));
        if (keep == 0) {
            throw ConfigError("balanced_subset: fraction " + std::to_string(fraction) + " leaves class " +
                              std::to_string(k) + " empty");
        }
        idx.resize(keep);
        longest = std::max(longest, keep);
    }
    // Round-robin over classes so every batch sees the label distribution.
    std::vector<std::size_t> out;
    for (std::size_t j = 0; j < longest; ++j)
        for (const auto& idx : by_class)
            if (j < idx.size()) out.push_back(idx[j]);
    return out;
}

Dataset select(const Dataset& data, std::span<const std::size_t> indices) {
    Dataset out;
    Shape s = data.images.shape();
    s[0] = indices.size();
    out.images = Tensor(s);
    const std::size_t per = data.images.size() / data.size();
    out.labels.reserve(indices.size());
    for (std::size_t i = 0; i < indices.size(); ++i) {
        const std::size_t src = indices[i];
        if (src >= data.size()) throw ShapeError("select: index out of range");
        std::copy_n(data.images.data() + src * per, per, out.images.data() + i * per);
        out.labels.push_back(data.labels[src]);
    }
    out.classes = data.classes;
    out.split = data.split;
    out.mean = data.mean;
    out.stddev = data.stddev;
    return out;
}

Dataset balanced_subset(const Dataset& data, double fraction, std::uint64_t seed) {
    const auto idx = balanced_indices(data, fraction, seed);
    return select(data, idx);
}

ChannelStats channel_stats(const Dataset& data) {
    const std::size_t n = data.size(), c = data.images.dim(1);
    const std::size_t plane = data.images.size() / (n * c);
    ChannelStats s{std::vector<double>(c, 0.0), std::vector<double>(c, 0.0)};
    for (std::size_t ch = 0; ch < c; ++ch) {
        double sum = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            const double* p = data.images.data() + (i * c + ch) * plane;
            for (std::size_t k = 0; k < plane; ++k) sum += p[k];
        }
        const double mean = sum / static_cast<double>(n * plane);
        double ss = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            const double* p = data.images.data() + (i * c + ch) * plane;
            for (std::size_t k = 0; k < plane; ++k) ss += (p[k] - mean) * (p[k] - mean);
        }
        s.mean[ch] = mean;
        s.stddev[ch] = std::max(std::sqrt(ss / static_cast<double>(n * plane)), 1e-12);
    }
    return s;
}

void normalize(Dataset& data, const ChannelStats& stats) {
    if (!data.mean.empty()) throw StateError("normalize: dataset is already normalized");
    const std::size_t n = data.size(), c = data.images.dim(1);
    if (stats.mean.size() != c || stats.stddev.size() != c) throw ShapeError("normalize: channel count mismatch");
    const std::size_t plane = data.images.size() / (n * c);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t ch = 0; ch < c; ++ch) {
            double* p = data.images.data() + (i * c + ch) * plane;
            for (std::size_t k = 0; k < plane; ++k) p[k] = (p[k] - stats.mean[ch]) / stats.stddev[ch];
        }
    data.mean = stats.mean;
    data.stddev = stats.stddev;
}

void denormalize(Dataset& data) {
    if (data.mean.empty()) throw StateError("denormalize: dataset is not normalized");
    const std::size_t n = data.size(), c = data.images.dim(1);
    const std::size_t plane = data.images.size() / (n * c);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t ch = 0; ch < c; ++ch) {
            double* p = data.images.data() + (i * c + ch) * plane;
            for (std::size_t k = 0; k < plane; ++k) p[k] = p[k] * data.stddev[ch] + data.mean[ch];
        }
    data.mean.clear();
    data.stddev.clear();
}

std::vector<std::vector<std::size_t>> make_batches(std::size_t n, std::size_t batch_size, std::uint64_t shuffle_seed) {
    if (batch_size == 0) throw ConfigError("batch size must be positive");
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    if (shuffle_seed != 0) {
        Rng rng(shuffle_seed);
        rng.shuffle(order);
    }
    std::vector<std::vector<std::size_t>> out;
    for (std::size_t b = 0; b < n; b += batch_size) {
        out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(b),
                         order.begin() + static_cast<std::ptrdiff_t>(std::min(n, b + batch_size)));
    }
    return out;
}

Batch gather_batch(const Dataset& data, std::span<const std::size_t> indices) {
    Shape s = data.images.shape();
    s[0] = indices.size();
    Batch b{Tensor(s), {}};
    const std::size_t per = data.images.size() / data.size();
    b.labels.reserve(indices.size());
    for (std::size_t i = 0; i < indices.size(); ++i) {
        std::copy_n(data.images.data() + indices[i] * per, per, b.images.data() + i * per);
        b.labels.push_back(data.labels[indices[i]]);
    }
    return b;
}

}  // namespace projprune
