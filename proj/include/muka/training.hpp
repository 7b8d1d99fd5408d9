#pragma once

// Supervised training of the teacher and oracle classifiers: minibatch
// cross-entropy with dropout, periodic validation, best-checkpoint selection.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "muka/checkpoint.hpp"
#include "muka/dataset.hpp"
#include "muka/mlp.hpp"
#include "muka/optim.hpp"
#include "muka/prob.hpp"
#include "muka/rng.hpp"

namespace muka {

struct TrainConfig {
    int epochs = 3;
    int batch_size = 32;
    double learning_rate = 1e-2;
    OptimizerKind optimizer = OptimizerKind::adam;
    int eval_interval = 100;  // optimizer steps between validation passes
    std::uint64_t seed = 1;
    int patience = 0;  // 0 disables early stopping; otherwise evals without improvement

    void validate() const {
        if (epochs < 1) throw std::invalid_argument("TrainConfig: epochs must be >= 1");
        if (batch_size < 1) throw std::invalid_argument("TrainConfig: batch_size must be >= 1");
        if (!(learning_rate > 0.0))
            throw std::invalid_argument("TrainConfig: learning_rate must be > 0");
        if (eval_interval < 1) throw std::invalid_argument("TrainConfig: eval_interval must be >= 1");
        if (patience < 0) throw std::invalid_argument("TrainConfig: patience must be >= 0");
    }
};

struct EvalRecord {
    long step = 0;
    double train_loss = 0.0;  // mean loss since the previous eval
    double val_accuracy = 0.0;
};

struct TrainLog {
    std::vector<EvalRecord> evals;
    long best_step = -1;
    double best_val_accuracy = -1.0;
    long total_steps = 0;
    std::uint64_t train_fingerprint = 0;  // fingerprint of the exact rows trained on
};

struct TrainedClassifier {
    ModelSpec spec;
    ParameterSet params;
    TrainLog log;
};

namespace detail {

inline double dataset_accuracy(const ModelSpec& spec, const ParameterSet& params,
                               const LabeledDataset& ds) {
    if (ds.size() == 0) throw std::invalid_argument("accuracy: empty dataset");
    std::size_t hits = 0;
    for (std::size_t i = 0; i < ds.size(); ++i) {
        const auto logits = forward(spec, params, ds.row_span(i));
        if (static_cast<int>(argmax_index(logits)) == ds.labels[i]) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(ds.size());
}

}  // namespace detail

// Minibatch cross-entropy training. Dropout masks are sampled per instance
// per step from the config seed; validation runs every eval_interval steps
// and once at the end, and the best-validation parameters are returned.
inline TrainedClassifier train_classifier(const ModelSpec& spec, const LabeledDataset& train,
                                          const LabeledDataset& val, const TrainConfig& cfg) {
    spec.validate();
    cfg.validate();
    train.validate();
    if (train.num_classes != spec.num_classes)
        throw std::invalid_argument("train_classifier: dataset has " +
                                    std::to_string(train.num_classes) + " classes, spec expects " +
                                    std::to_string(spec.num_classes));
    if (train.input_dim != spec.input_dim)
        throw std::invalid_argument("train_classifier: dataset dim mismatch");

    TrainedClassifier out;
    out.spec = spec;
    out.params = init_parameters(spec, cfg.seed);
    out.log.train_fingerprint = dataset_fingerprint(train);

    ParameterSet best = out.params;
    OptimizerState opt = cfg.optimizer == OptimizerKind::adam
                             ? OptimizerState::adam(cfg.learning_rate)
                             : OptimizerState::sgd(cfg.learning_rate);
    Rng rng(derive_key(cfg.seed, 0x747261696EULL));  // "train"

    std::vector<std::size_t> order(train.size());
    std::iota(order.begin(), order.end(), 0);

    std::vector<double> grad_accum(out.params.size());
    double loss_accum = 0.0;
    long steps_since_eval = 0;
    int evals_since_best = 0;
    bool stop = false;

    auto run_eval = [&](long step) {
        EvalRecord rec;
        rec.step = step;
        rec.train_loss = steps_since_eval > 0 ? loss_accum / static_cast<double>(steps_since_eval) : 0.0;
        rec.val_accuracy = detail::dataset_accuracy(spec, out.params, val);
        out.log.evals.push_back(rec);
        loss_accum = 0.0;
        steps_since_eval = 0;
        if (rec.val_accuracy > out.log.best_val_accuracy) {
            out.log.best_val_accuracy = rec.val_accuracy;
            out.log.best_step = step;
            best = out.params;
            evals_since_best = 0;
        } else if (cfg.patience > 0 && ++evals_since_best >= cfg.patience) {
            stop = true;
        }
    };

    long step = 0;
    for (int epoch = 0; epoch < cfg.epochs && !stop; ++epoch) {
        rng.shuffle(order);
        for (std::size_t start = 0; start < order.size() && !stop;
             start += static_cast<std::size_t>(cfg.batch_size)) {
            const std::size_t end =
                std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
            const double inv_b = 1.0 / static_cast<double>(end - start);
            std::fill(grad_accum.begin(), grad_accum.end(), 0.0);
            double batch_loss = 0.0;
            for (std::size_t k = start; k < end; ++k) {
                const std::size_t i = order[k];
                DropoutMask mask;
                const DropoutMask* mask_ptr = nullptr;
                if (spec.dropout_rate > 0.0) {
                    mask = sample_dropout_mask(spec, rng);
                    mask_ptr = &mask;
                }
                const auto logits = forward(spec, out.params, train.row_span(i), mask_ptr);
                auto probs = softmax(logits);
                ProbDist target;
                target.values.assign(static_cast<std::size_t>(spec.num_classes), 0.0);
                target.values[static_cast<std::size_t>(train.labels[i])] = 1.0;
                const auto kl = weighted_kl_loss(probs, target, inv_b);
                batch_loss += kl.loss;
                const auto g = backward(spec, out.params, train.row_span(i), mask_ptr,
                                        kl.grad_logits);
                for (std::size_t j = 0; j < grad_accum.size(); ++j) grad_accum[j] += g[j];
            }
            if (!std::isfinite(batch_loss))
                throw std::runtime_error("train_classifier: non-finite loss at step " +
                                         std::to_string(step));
            optimizer_step(opt, out.params, grad_accum);
            ++step;
            loss_accum += batch_loss;
            ++steps_since_eval;
            if (step % cfg.eval_interval == 0) run_eval(step);
        }
    }
    if (out.log.evals.empty() || out.log.evals.back().step != step) run_eval(step);

    out.log.total_steps = step;
    out.params = std::move(best);
    return out;
}

// Same loop over the full union label space; kept separate because the oracle
// plays a distinct role (golden supervision and supervised upper bound).
inline TrainedClassifier train_oracle(const ModelSpec& spec, const LabeledDataset& train,
                                      const LabeledDataset& val, const TrainConfig& cfg) {
    return train_classifier(spec, train, val, cfg);
}

// Continue cross-entropy training from existing parameters and keep the final
// ones (no validation or best-checkpoint selection). Running extra epochs at
// a low rate drives prediction entropy toward zero; this is the
// overconfidence knob used to construct the high-ECE ablation scenario.
inline ParameterSet continue_training(const ModelSpec& spec, ParameterSet params,
                                      const LabeledDataset& train, const TrainConfig& cfg) {
    spec.validate();
    cfg.validate();
    if (params.size() != spec.param_count())
        throw std::invalid_argument("continue_training: parameter count mismatch");
    OptimizerState opt = cfg.optimizer == OptimizerKind::adam
                             ? OptimizerState::adam(cfg.learning_rate)
                             : OptimizerState::sgd(cfg.learning_rate);
    Rng rng(derive_key(cfg.seed, 0x636F6E74ULL));  // "cont"
    std::vector<std::size_t> order(train.size());
    std::iota(order.begin(), order.end(), 0);
    std::vector<double> grad_accum(params.size());
    long step = 0;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        rng.shuffle(order);
        for (std::size_t start = 0; start < order.size();
             start += static_cast<std::size_t>(cfg.batch_size)) {
            const std::size_t end =
                std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
            const double inv_b = 1.0 / static_cast<double>(end - start);
            std::fill(grad_accum.begin(), grad_accum.end(), 0.0);
            double batch_loss = 0.0;
            for (std::size_t k = start; k < end; ++k) {
                const std::size_t i = order[k];
                DropoutMask mask;
                const DropoutMask* mask_ptr = nullptr;
                if (spec.dropout_rate > 0.0) {
                    mask = sample_dropout_mask(spec, rng);
                    mask_ptr = &mask;
                }
                const auto logits = forward(spec, params, train.row_span(i), mask_ptr);
                ProbDist target;
                target.values.assign(static_cast<std::size_t>(spec.num_classes), 0.0);
                target.values[static_cast<std::size_t>(train.labels[i])] = 1.0;
                const auto kl = weighted_kl_loss(softmax(logits), target, inv_b);
                batch_loss += kl.loss;
                const auto g = backward(spec, params, train.row_span(i), mask_ptr, kl.grad_logits);
                for (std::size_t j = 0; j < grad_accum.size(); ++j) grad_accum[j] += g[j];
            }
            if (!std::isfinite(batch_loss))
                throw std::runtime_error("continue_training: non-finite loss at step " +
                                         std::to_string(step));
            optimizer_step(opt, params, grad_accum);
            ++step;
        }
    }
    return params;
}

// ---------------------------------------------------------------------------
// Teacher binding and persistence
// ---------------------------------------------------------------------------

struct TeacherModel {
    ModelSpec spec;
    ParameterSet params;
    int partition_index = 0;
    std::vector<int> union_classes;  // Y_i as union ids, local order

    void validate() const {
        spec.validate();
        if (static_cast<int>(union_classes.size()) != spec.num_classes)
            throw std::invalid_argument("TeacherModel: |Y_i| " +
                                        std::to_string(union_classes.size()) +
                                        " != spec.num_classes " + std::to_string(spec.num_classes));
    }

    // Stream key for MC mask derivation. Content-based (the bound class set),
    // so reordering the teacher list does not change any teacher's masks.
    std::uint64_t stream_key() const {
        return fnv1a_bytes(union_classes.data(), union_classes.size() * sizeof(int));
    }
};

inline void save_teacher(const std::filesystem::path& path, const TeacherModel& t) {
    t.validate();
    std::vector<std::string> cls;
    for (int u : t.union_classes) cls.push_back(std::to_string(u));
    save_model(path, t.spec, t.params,
               {{"partition_index", std::to_string(t.partition_index)},
                {"union_classes", join(cls, ',')}});
}

inline TeacherModel load_teacher(const std::filesystem::path& path) {
    LoadedModel m = load_model(path);
    auto pi = m.extra.find("partition_index");
    auto uc = m.extra.find("union_classes");
    if (pi == m.extra.end() || uc == m.extra.end())
        throw std::runtime_error(path.string() + ": missing teacher binding header lines");
    TeacherModel t;
    t.spec = m.spec;
    t.params = std::move(m.params);
    t.partition_index = static_cast<int>(parse_long(pi->second, path.string()));
    t.union_classes = parse_int_list<int>(uc->second, path.string());
    t.validate();
    return t;
}

}  // namespace muka
