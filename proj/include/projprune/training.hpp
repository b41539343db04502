#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "projprune/data.hpp"
#include "projprune/graph.hpp"
#include "projprune/model.hpp"
#include "projprune/optim.hpp"

namespace projprune {

struct Recipe {
    std::size_t epochs = 10;
    std::size_t batch_size = 32;
    double lr = 0.05;
    double momentum = 0.9;
    double weight_decay = 5e-4;
    std::string schedule = "cosine";  // cosine | step | constant
    std::size_t step_size = 30;       // epochs, step schedule only
    double gamma = 0.1;
    std::uint64_t seed = 1;
};

struct TrainTrace {
    std::vector<double> train_loss;     // mean batch loss per epoch
    std::vector<double> eval_accuracy;  // per epoch, on the eval set

    bool operator==(const TrainTrace&) const = default;
};

// SGD over `recipe.epochs` epochs with a seed-determined shuffle per epoch.
// Batches with a single sample are skipped (batch statistics need two).
TrainTrace train(Model& model, const Dataset& train_set, const Dataset& eval_set, const Recipe& recipe);

// Fraction of samples whose eval-mode argmax matches the label.
double accuracy(Model& model, const Dataset& data, std::size_t batch_size = 256);

struct AccumulatedGradients {
    GradTable grads;
    std::size_t batches = 0;
    double loss_sum = 0.0;
};

// Sum over consecutive batches (dataset order) of per-batch mean-loss
// gradients, computed in Mode::score so no parameter or buffer changes.
// Batches may be processed on `threads` workers; the reduction is always
// in batch order, so the result does not depend on the thread count.
AccumulatedGradients accumulate_gradients(Model& model, const Dataset& data, std::size_t batch_size,
                                          std::size_t threads = 1);

// In-place a += b over matching keys; keys only in b are copied.
void add_into(GradTable& a, const GradTable& b);

}  // namespace projprune
