#include "projprune/training.hpp"

#include <algorithm>
#include <thread>

#include "projprune/error.hpp"

namespace projprune {

void add_into(GradTable& a, const GradTable& b) {
    for (const auto& [name, g] : b) {
        auto it = a.find(name);
        if (it == a.end()) {
            a.emplace(name, g);
            continue;
        }
        if (it->second.size() != g.size()) throw ShapeError("gradient table: shape mismatch for '" + name + "'");
        for (std::size_t i = 0; i < g.size(); ++i) it->second[i] += g[i];
    }
}

namespace {

Schedule make_schedule(const Recipe& r, std::size_t steps_per_epoch) {
    if (r.schedule == "cosine") return CosineSchedule{std::max<std::size_t>(1, r.epochs * steps_per_epoch)};
    if (r.schedule == "step") return StepSchedule{std::max<std::size_t>(1, r.step_size * steps_per_epoch), r.gamma};
    if (r.schedule == "constant") return ConstantSchedule{};
    throw ConfigError("unknown schedule '" + r.schedule + "'");
}

}  // namespace

TrainTrace train(Model& model, const Dataset& train_set, const Dataset& eval_set, const Recipe& recipe) {
    train_set.validate();
    TrainTrace trace;
    if (recipe.epochs == 0) return trace;
    const std::size_t steps = (train_set.size() + recipe.batch_size - 1) / recipe.batch_size;
    OptimizerState opt(recipe.lr, recipe.momentum, recipe.weight_decay, make_schedule(recipe, steps));
    for (std::size_t epoch = 0; epoch < recipe.epochs; ++epoch) {
        const auto batches = make_batches(train_set.size(), recipe.batch_size, recipe.seed * 1000003ull + epoch + 1);
        double loss_sum = 0.0;
        std::size_t used = 0;
        for (const auto& idx : batches) {
            if (idx.size() < 2) continue;
            Batch b = gather_batch(train_set, idx);
            Graph g;
            NodeId loss;
            loss_sum += forward_loss(g, model, b.images, b.labels, Mode::train, &loss);
            opt.step(model.params(), g.backprop(loss));
            ++used;
        }
        trace.train_loss.push_back(used ? loss_sum / static_cast<double>(used) : 0.0);
        trace.eval_accuracy.push_back(accuracy(model, eval_set));
    }
    return trace;
}

double accuracy(Model& model, const Dataset& data, std::size_t batch_size) {
    data.validate();
    std::size_t correct = 0;
    for (const auto& idx : make_batches(data.size(), batch_size)) {
        Batch b = gather_batch(data, idx);
        const Tensor logits = predict(model, b.images);
        const std::size_t k = logits.dim(1);
        for (std::size_t i = 0; i < idx.size(); ++i) {
            const double* row = logits.data() + i * k;
            const auto arg = static_cast<int>(std::max_element(row, row + k) - row);
            if (arg == b.labels[i]) ++correct;
        }
    }
    return static_cast<double>(correct) / static_cast<double>(data.size());
}

AccumulatedGradients accumulate_gradients(Model& model, const Dataset& data, std::size_t batch_size,
                                          std::size_t threads) {
    data.validate();
    const auto batches = make_batches(data.size(), batch_size);
    struct Result {
        GradTable grads;
        double loss = 0.0;
    };
    std::vector<Result> per_batch(batches.size());
    auto run = [&](std::size_t i) {
        Batch b = gather_batch(data, batches[i]);
        Graph g;
        NodeId loss;
        per_batch[i].loss = forward_loss(g, model, b.images, b.labels, Mode::score, &loss);
        per_batch[i].grads = g.backprop(loss);
    };

    AccumulatedGradients acc;
    threads = std::max<std::size_t>(1, std::min(threads, batches.size()));
    if (threads == 1) {
        for (std::size_t i = 0; i < batches.size(); ++i) {
            run(i);
            add_into(acc.grads, per_batch[i].grads);
            acc.loss_sum += per_batch[i].loss;
            per_batch[i].grads.clear();
        }
    } else {
        std::vector<std::thread> pool;
        std::vector<std::exception_ptr> errors(threads);
        for (std::size_t t = 0; t < threads; ++t) {
            pool.emplace_back([&, t] {
                try {
                    for (std::size_t i = t; i < batches.size(); i += threads) run(i);
                } catch (...) {
                    errors[t] = std::current_exception();
                }
            });
        }
        for (auto& th : pool) th.join();
        for (auto& e : errors)
            if (e) std::rethrow_exception(e);
        for (auto& r : per_batch) {
            add_into(acc.grads, r.grads);
            acc.loss_sum += r.loss;
        }
    }
    acc.batches = batches.size();
    return acc;
}

}  // namespace projprune
