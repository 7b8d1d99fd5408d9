#pragma once

// Supervision synthesis over the union label set and the student trainer.
//
// muka_hard: the padded prediction of the most confident teacher.
// muka_soft: the w-weighted convex combination of padded teacher predictions.
// vanilla_kd: softmax over the concatenated teacher logits (scale-sensitive).
// uhc: per-specialty slices of the student logits, each distilled against
//      its teacher independently.
//
// Hard and soft targets carry the margin weight v(x); targets are computed
// once per instance before training (teachers are frozen) and cached.

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "muka/dataset.hpp"
#include "muka/prob.hpp"
#include "muka/training.hpp"
#include "muka/uncertainty.hpp"

namespace muka {

enum class Method { muka_hard, muka_soft, vanilla_kd, uhc };

inline std::string to_string(Method m) {
    switch (m) {
        case Method::muka_hard: return "muka_hard";
        case Method::muka_soft: return "muka_soft";
        case Method::vanilla_kd: return "vanilla_kd";
        case Method::uhc: return "uhc";
    }
    throw std::logic_error("bad method");
}

inline Method method_from_string(const std::string& s) {
    if (s == "muka_hard") return Method::muka_hard;
    if (s == "muka_soft") return Method::muka_soft;
    if (s == "vanilla_kd") return Method::vanilla_kd;
    if (s == "uhc") return Method::uhc;
    throw std::invalid_argument("unknown amalgamation method: " + s +
                                " (expected muka_hard|muka_soft|vanilla_kd|uhc)");
}

enum class SupervisionSource { deterministic_forward, mc_average };

struct SupervisionTarget {
    ProbDist dist;                        // union space; empty for uhc
    std::vector<ProbDist> per_teacher;    // uhc only: local-space targets
    double weight = 1.0;                  // v(x), or 1 with re-weighting off
    Method provenance = Method::muka_hard;
    int selected = -1;                    // hard only
};

// Embed a teacher's local distribution into the union space; classes outside
// Y_i get zero mass.
inline ProbDist pad(const ProbDist& dist, int teacher, const LabelPartition& partition) {
    if (static_cast<int>(dist.size()) != partition.subset_size(teacher))
        throw std::invalid_argument("pad: distribution size " + std::to_string(dist.size()) +
                                    " != |Y_" + std::to_string(teacher) + "| = " +
                                    std::to_string(partition.subset_size(teacher)));
    ProbDist out;
    out.label_space_id = "union";
    out.values.assign(static_cast<std::size_t>(partition.union_size()), 0.0);
    for (std::size_t local = 0; local < dist.size(); ++local)
        out.values[static_cast<std::size_t>(
            partition.union_index(teacher, static_cast<int>(local)))] = dist.values[local];
    return out;
}

inline SupervisionTarget synthesize_hard(const UncertaintyReport& report,
                                         const std::vector<ProbDist>& teacher_dists,
                                         const LabelPartition& partition,
                                         bool reweighting = true) {
    if (teacher_dists.size() != report.c.size())
        throw std::invalid_argument("synthesize_hard: report/teacher count mismatch");
    SupervisionTarget t;
    t.provenance = Method::muka_hard;
    t.selected = report.selected;
    t.dist = pad(teacher_dists[static_cast<std::size_t>(report.selected)], report.selected,
                 partition);
    t.weight = reweighting ? report.v : 1.0;
    return t;
}

inline SupervisionTarget synthesize_soft(const UncertaintyReport& report,
                                         const std::vector<ProbDist>& teacher_dists,
                                         const LabelPartition& partition,
                                         bool reweighting = true) {
    if (teacher_dists.size() != report.w.size())
        throw std::invalid_argument("synthesize_soft: report/teacher count mismatch");
    SupervisionTarget t;
    t.provenance = Method::muka_soft;
    t.dist.label_space_id = "union";
    t.dist.values.assign(static_cast<std::size_t>(partition.union_size()), 0.0);
    for (std::size_t i = 0; i < teacher_dists.size(); ++i) {
        const ProbDist padded = pad(teacher_dists[i], static_cast<int>(i), partition);
        for (std::size_t y = 0; y < padded.size(); ++y)
            t.dist.values[y] += report.w[i] * padded.values[y];
    }
    t.weight = reweighting ? report.v : 1.0;
    return t;
}

// Concatenate per-teacher logits into union order, then softmax. Deliberately
// sensitive to per-teacher logit scale; a uniform shift of one teacher's
// logits changes the target.
inline SupervisionTarget synthesize_vanilla_kd(const std::vector<std::vector<double>>& teacher_logits,
                                               const LabelPartition& partition) {
    if (static_cast<int>(teacher_logits.size()) != partition.num_teachers())
        throw std::invalid_argument("synthesize_vanilla_kd: logits/teacher count mismatch");
    std::vector<double> unioned(static_cast<std::size_t>(partition.union_size()), 0.0);
    for (std::size_t i = 0; i < teacher_logits.size(); ++i) {
        if (static_cast<int>(teacher_logits[i].size()) != partition.subset_size(static_cast<int>(i)))
            throw std::invalid_argument("synthesize_vanilla_kd: logits size mismatch at teacher " +
                                        std::to_string(i));
        for (std::size_t local = 0; local < teacher_logits[i].size(); ++local)
            unioned[static_cast<std::size_t>(
                partition.union_index(static_cast<int>(i), static_cast<int>(local)))] =
                teacher_logits[i][local];
    }
    SupervisionTarget t;
    t.provenance = Method::vanilla_kd;
    t.dist = softmax(unioned, "union");
    t.weight = 1.0;  // the plain baseline carries no re-weighting
    return t;
}

// Per-teacher KL between the teacher's distribution and the softmax of the
// student-logit slice at Y_i's union indices; averaged over teachers so the
// scale is independent of N. Gradient is assembled slice-wise.
inline KlResult uhc_loss(const std::vector<double>& student_logits,
                         const std::vector<ProbDist>& teacher_dists,
                         const LabelPartition& partition) {
    if (static_cast<int>(student_logits.size()) != partition.union_size())
        throw std::invalid_argument("uhc_loss: student logits length mismatch");
    if (static_cast<int>(teacher_dists.size()) != partition.num_teachers())
        throw std::invalid_argument("uhc_loss: teacher count mismatch");
    KlResult out;
    out.grad_logits.assign(student_logits.size(), 0.0);
    const double inv_n = 1.0 / static_cast<double>(partition.num_teachers());
    for (int i = 0; i < partition.num_teachers(); ++i) {
        const auto& sub = partition.subset(i);
        std::vector<double> slice(sub.size());
        for (std::size_t j = 0; j < sub.size(); ++j)
            slice[j] = student_logits[static_cast<std::size_t>(sub[j])];
        const ProbDist sprobs = softmax(slice);
        const KlResult kl = weighted_kl_loss(sprobs, teacher_dists[static_cast<std::size_t>(i)],
                                             inv_n);
        out.loss += kl.loss;
        for (std::size_t j = 0; j < sub.size(); ++j)
            out.grad_logits[static_cast<std::size_t>(sub[j])] += kl.grad_logits[j];
    }
    return out;
}

// ---------------------------------------------------------------------------
// Target synthesis over a transfer set, and student training
// ---------------------------------------------------------------------------

struct AmalgamationConfig {
    Method method = Method::muka_soft;
    MCConfig mc;
    double tau = 0.2;
    bool reweighting = true;
    KlDirection kl_direction = KlDirection::forward;
    SupervisionSource supervision_source = SupervisionSource::deterministic_forward;
    TrainConfig student;

    void validate() const {
        mc.validate();
        student.validate();
        if (method == Method::muka_soft && !(tau > 0.0))
            throw std::invalid_argument("AmalgamationConfig: muka_soft requires tau > 0");
    }
};

namespace detail {

inline std::vector<ProbDist> deterministic_teacher_dists(const std::vector<TeacherModel>& teachers,
                                                         std::span<const double> x) {
    std::vector<ProbDist> out;
    out.reserve(teachers.size());
    for (const auto& t : teachers)
        out.push_back(softmax(forward(t.spec, t.params, x),
                              "teacher_" + std::to_string(t.partition_index)));
    return out;
}

}  // namespace detail

// One supervision target for one transfer instance.
inline SupervisionTarget synthesize_target(const std::vector<TeacherModel>& teachers,
                                           std::span<const double> x, long instance_id,
                                           const LabelPartition& partition,
                                           const AmalgamationConfig& cfg) {
    switch (cfg.method) {
        case Method::muka_hard:
        case Method::muka_soft: {
            const UncertaintyReport rep = assess(teachers, x, instance_id, cfg.mc, cfg.tau);
            const std::vector<ProbDist> dists =
                cfg.supervision_source == SupervisionSource::mc_average
                    ? rep.mc_dists
                    : detail::deterministic_teacher_dists(teachers, x);
            return cfg.method == Method::muka_hard
                       ? synthesize_hard(rep, dists, partition, cfg.reweighting)
                       : synthesize_soft(rep, dists, partition, cfg.reweighting);
        }
        case Method::vanilla_kd: {
            std::vector<std::vector<double>> logits;
            logits.reserve(teachers.size());
            for (const auto& t : teachers) logits.push_back(forward(t.spec, t.params, x));
            return synthesize_vanilla_kd(logits, partition);
        }
        case Method::uhc: {
            SupervisionTarget t;
            t.provenance = Method::uhc;
            t.per_teacher = detail::deterministic_teacher_dists(teachers, x);
            t.weight = 1.0;
            return t;
        }
    }
    throw std::logic_error("bad method");
}

// Targets for the whole transfer set, computed once (teachers are frozen).
inline std::vector<SupervisionTarget> synthesize_targets(const std::vector<TeacherModel>& teachers,
                                                         const UnlabeledDataset& transfer,
                                                         const LabelPartition& partition,
                                                         const AmalgamationConfig& cfg) {
    cfg.validate();
    if (teachers.empty()) throw std::invalid_argument("synthesize_targets: no teachers");
    if (transfer.size() == 0) throw std::invalid_argument("synthesize_targets: empty transfer set");
    std::vector<SupervisionTarget> targets;
    targets.reserve(transfer.size());
    for (std::size_t i = 0; i < transfer.size(); ++i)
        targets.push_back(synthesize_target(teachers, transfer.row_span(i),
                                            static_cast<long>(i), partition, cfg));
    return targets;
}

struct AmalgamationLog {
    std::vector<EvalRecord> evals;
    long best_step = -1;
    double best_val_accuracy = -1.0;
    long total_steps = 0;
    double mean_v = 0.0;        // mean instance weight over the transfer set
    double min_weight = 1.0;
    double max_weight = 1.0;
    std::size_t num_instances = 0;
};

struct StudentModel {
    ModelSpec spec;
    ParameterSet params;
    AmalgamationLog log;
};

// Train the student on cached supervision targets with the weighted-KL
// objective (or the UHC slice objective). The transfer set is unlabeled by
// type; validation labels are used only for checkpoint selection.
inline StudentModel amalgamate(const std::vector<TeacherModel>& teachers,
                               const UnlabeledDataset& transfer, const LabeledDataset& val,
                               const LabelPartition& partition, const AmalgamationConfig& cfg,
                               const ModelSpec& student_spec) {
    cfg.validate();
    student_spec.validate();
    if (student_spec.num_classes != partition.union_size())
        throw std::invalid_argument("amalgamate: student num_classes " +
                                    std::to_string(student_spec.num_classes) +
                                    " != union size " + std::to_string(partition.union_size()));
    if (student_spec.input_dim != transfer.input_dim)
        throw std::invalid_argument("amalgamate: student input_dim mismatch");

    const std::vector<SupervisionTarget> targets =
        synthesize_targets(teachers, transfer, partition, cfg);

    StudentModel out;
    out.spec = student_spec;
    out.params = init_parameters(student_spec, cfg.student.seed);
    out.log.num_instances = targets.size();
    {
        double sum_v = 0.0;
        for (const auto& t : targets) {
            sum_v += t.weight;
            out.log.min_weight = std::min(out.log.min_weight, t.weight);
            out.log.max_weight = std::max(out.log.max_weight, t.weight);
        }
        out.log.mean_v = sum_v / static_cast<double>(targets.size());
    }

    ParameterSet best = out.params;
    OptimizerState opt = cfg.student.optimizer == OptimizerKind::adam
                             ? OptimizerState::adam(cfg.student.learning_rate)
                             : OptimizerState::sgd(cfg.student.learning_rate);
    Rng rng(derive_key(cfg.student.seed, 0x73747564ULL));  // "stud"

    std::vector<std::size_t> order(transfer.size());
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
        rec.val_accuracy = detail::dataset_accuracy(student_spec, out.params, val);
        out.log.evals.push_back(rec);
        loss_accum = 0.0;
        steps_since_eval = 0;
        if (rec.val_accuracy > out.log.best_val_accuracy) {
            out.log.best_val_accuracy = rec.val_accuracy;
            out.log.best_step = step;
            best = out.params;
            evals_since_best = 0;
        } else if (cfg.student.patience > 0 && ++evals_since_best >= cfg.student.patience) {
            stop = true;
        }
    };

    long step = 0;
    for (int epoch = 0; epoch < cfg.student.epochs && !stop; ++epoch) {
        rng.shuffle(order);
        for (std::size_t start = 0; start < order.size() && !stop;
             start += static_cast<std::size_t>(cfg.student.batch_size)) {
            const std::size_t end =
                std::min(order.size(), start + static_cast<std::size_t>(cfg.student.batch_size));
            const double inv_b = 1.0 / static_cast<double>(end - start);
            std::fill(grad_accum.begin(), grad_accum.end(), 0.0);
            double batch_loss = 0.0;
            for (std::size_t k = start; k < end; ++k) {
                const std::size_t i = order[k];
                const SupervisionTarget& target = targets[i];
                DropoutMask mask;
                const DropoutMask* mask_ptr = nullptr;
                if (student_spec.dropout_rate > 0.0) {
                    mask = sample_dropout_mask(student_spec, rng);
                    mask_ptr = &mask;
                }
                const auto logits = forward(student_spec, out.params, transfer.row_span(i), mask_ptr);
                KlResult kl;
                if (cfg.method == Method::uhc) {
                    kl = uhc_loss(logits, target.per_teacher, partition);
                    kl.loss *= inv_b;
                    for (double& g : kl.grad_logits) g *= inv_b;
                } else {
                    kl = weighted_kl_loss(softmax(logits, "union"), target.dist,
                                          target.weight * inv_b, cfg.kl_direction);
                }
                batch_loss += kl.loss;
                const auto g = backward(student_spec, out.params, transfer.row_span(i), mask_ptr,
                                        kl.grad_logits);
                for (std::size_t j = 0; j < grad_accum.size(); ++j) grad_accum[j] += g[j];
            }
            if (!std::isfinite(batch_loss))
                throw std::runtime_error("amalgamate: non-finite loss in batch starting at instance " +
                                         std::to_string(order[start]));
            optimizer_step(opt, out.params, grad_accum);
            ++step;
            loss_accum += batch_loss;
            ++steps_since_eval;
            if (step % cfg.student.eval_interval == 0) run_eval(step);
        }
    }
    if (out.log.evals.empty() || out.log.evals.back().step != step) run_eval(step);
    out.log.total_steps = step;
    out.params = std::move(best);
    return out;
}

// Supervision dump for probes and debugging:
//   instance_id,v,method,p_0,...,p_{|Y|-1}
inline std::string supervision_dump_csv(const std::vector<SupervisionTarget>& targets,
                                        const LabelPartition& partition) {
    std::string out = "instance_id,v,method";
    for (int y = 0; y < partition.union_size(); ++y) out += ",p_" + std::to_string(y);
    out += '\n';
    for (std::size_t i = 0; i < targets.size(); ++i) {
        const auto& t = targets[i];
        out += std::to_string(i) + "," + format_double(t.weight) + "," + to_string(t.provenance);
        if (t.provenance == Method::uhc) {
            for (int y = 0; y < partition.union_size(); ++y) out += ",";
        } else {
            for (double p : t.dist.values) out += "," + format_double(p);
        }
        out += '\n';
    }
    return out;
}

}  // namespace muka
