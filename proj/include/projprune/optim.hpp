#pragma once

#include <cstddef>
#include <map>
#include <string>
#include <variant>
#include <vector>

#include "projprune/graph.hpp"
#include "projprune/tensor.hpp"

namespace projprune {

struct StepSchedule {
    std::size_t step_size = 1;
    double gamma = 0.1;
};

struct CosineSchedule {
    std::size_t total_steps = 1;
};

struct ConstantSchedule {};

using Schedule = std::variant<ConstantSchedule, StepSchedule, CosineSchedule>;

// SGD with momentum and coupled weight decay (decay is folded into the
// gradient before the momentum buffer update).
class OptimizerState {
public:
    OptimizerState(double lr, double momentum, double weight_decay, Schedule schedule = ConstantSchedule{});

    double base_lr() const { return base_lr_; }
    double momentum() const { return momentum_; }
    double weight_decay() const { return weight_decay_; }
    std::size_t steps_taken() const { return step_; }

    // Learning rate that the next step will use.
    double current_lr() const;

    // Updates every tensor in `params` from `grads`; a trainable parameter
    // without a gradient is an error.
    void step(std::map<std::string, Tensor>& params, const GradTable& grads);

private:
    double base_lr_;
    double momentum_;
    double weight_decay_;
    Schedule schedule_;
    std::size_t step_ = 0;
    std::map<std::string, std::vector<double>> velocity_;
};

}  // namespace projprune
