#include "projprune/optim.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "projprune/error.hpp"

namespace projprune {

OptimizerState::OptimizerState(double lr, double momentum, double weight_decay, Schedule schedule)
    : base_lr_(lr), momentum_(momentum), weight_decay_(weight_decay), schedule_(schedule) {
    if (!(lr > 0.0)) throw ConfigError("optimizer: learning rate must be > 0");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("optimizer: momentum must be in [0,1)");
    if (weight_decay < 0.0) throw ConfigError("optimizer: weight decay must be >= 0");
    if (auto* s = std::get_if<StepSchedule>(&schedule_); s && s->step_size == 0)
        throw ConfigError("optimizer: step schedule needs step_size > 0");
    if (auto* c = std::get_if<CosineSchedule>(&schedule_); c && c->total_steps == 0)
        throw ConfigError("optimizer: cosine schedule needs total_steps > 0");
}

double OptimizerState::current_lr() const {
    if (auto* s = std::get_if<StepSchedule>(&schedule_)) {
        return base_lr_ * std::pow(s->gamma, static_cast<double>(step_ / s->step_size));
    }
    if (auto* c = std::get_if<CosineSchedule>(&schedule_)) {
        const double t = static_cast<double>(std::min(step_, c->total_steps)) / static_cast<double>(c->total_steps);
        return 0.5 * base_lr_ * (1.0 + std::cos(std::numbers::pi * t));
    }
    return base_lr_;
}

void OptimizerState::step(std::map<std::string, Tensor>& params, const GradTable& grads) {
    for (const auto& [name, tensor] : params) {
        auto it = grads.find(name);
        if (it == grads.end()) throw StateError("sgd_step: missing gradient for parameter '" + name + "'");
        if (it->second.size() != tensor.size()) throw ShapeError("sgd_step: gradient shape mismatch for '" + name + "'");
    }
    const double lr = current_lr();
    for (auto& [name, tensor] : params) {
        const Tensor& g = grads.at(name);
        auto& buf = velocity_[name];
        const bool fresh = buf.empty();
        if (fresh) buf.assign(tensor.size(), 0.0);
        for (std::size_t i = 0; i < tensor.size(); ++i) {
            const double d = g[i] + weight_decay_ * tensor[i];
            buf[i] = fresh ? d : momentum_ * buf[i] + d;
            tensor[i] -= lr * buf[i];
        }
    }
    ++step_;
}

}  // namespace projprune
