#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "projprune/tensor.hpp"

namespace projprune {

enum class Split { train, test };

struct Dataset {
    Tensor images;  // [n, c, h, w]
    std::vector<int> labels;
    std::size_t classes = 0;
    Split split = Split::train;
    // Per-channel statistics applied by normalize(); empty until then.
    std::vector<double> mean;
    std::vector<double> stddev;

    std::size_t size() const { return labels.size(); }
    Shape sample_shape() const { return Shape(images.shape().begin() + 1, images.shape().end()); }
    // Throws if any invariant (labels < classes, n > 0, finite) is broken.
    void validate() const;
};

// IDX archives (MNIST layout): images magic 0x00000803 with big-endian
// n, rows, cols; labels magic 0x00000801 with big-endian n.
Dataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels);
Dataset parse_idx(std::span<const std::uint8_t> images, std::span<const std::uint8_t> labels);

// CIFAR-10 binary batches: records of 1 label byte + 3072 pixel bytes.
Dataset load_cifar_bin(const std::vector<std::filesystem::path>& paths);
Dataset parse_cifar_bin(std::span<const std::uint8_t> bytes);

struct SyntheticSpec {
    std::size_t classes = 10;
    std::size_t per_class = 100;
    Shape shape{3, 8, 8};
    std::uint64_t seed = 1;
    // Std of per-pixel Gaussian noise.
    double noise = 0.0;
    // Max per-sample translation in pixels.
    std::size_t jitter = 0;
    // Prototypes per class; samples pick one uniformly.
    std::size_t modes = 1;
    // Seed of the prototypes; 0 means "same as seed". Train and test splits
    // share prototypes and differ only in sample noise.
    std::uint64_t prototype_seed = 0;
};

// Class prototypes are sums of Gaussian blobs in [0, 1]; samples are a
// prototype plus brightness jitter, translation and pixel noise, clipped to
// [0, 1]. With noise == 0 and jitter == 0 every sample equals its class
// prototype. Samples interleave the classes (label i % classes).
Dataset synthetic(const SyntheticSpec& spec, Split split = Split::train);

// floor(fraction * n_k) samples of every class k, drawn without
// replacement, in a seed-determined order.
Dataset balanced_subset(const Dataset& data, double fraction, std::uint64_t seed);
std::vector<std::size_t> balanced_indices(const Dataset& data, double fraction, std::uint64_t seed);

Dataset select(const Dataset& data, std::span<const std::size_t> indices);

struct ChannelStats {
    std::vector<double> mean;
    std::vector<double> stddev;
};

ChannelStats channel_stats(const Dataset& data);
void normalize(Dataset& data, const ChannelStats& stats);
void denormalize(Dataset& data);

// Index lists of consecutive batches; the last batch may be short.
// shuffle_seed == 0 keeps dataset order.
std::vector<std::vector<std::size_t>> make_batches(std::size_t n, std::size_t batch_size, std::uint64_t shuffle_seed = 0);

struct Batch {
    Tensor images;
    std::vector<int> labels;
};

Batch gather_batch(const Dataset& data, std::span<const std::size_t> indices);

}  // namespace projprune
