#pragma once

// Read-only probes over frozen models and labeled data: accuracy, confusion,
// supervision quality (KL to the oracle), uncertainty separation histograms,
// selection error analysis, and teacher calibration on out-of-specialty rows.
//
// Each probe returns a ProbeTable whose aggregates are recomputable from its
// per-instance records; file writing lives in the experiment layer.

#include <cmath>
#include <functional>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "muka/amalgamation.hpp"
#include "muka/dataset.hpp"
#include "muka/prob.hpp"
#include "muka/training.hpp"
#include "muka/uncertainty.hpp"

namespace muka {

// Any predictor over the union label space.
struct UnionClassifier {
    std::string name;
    int num_classes = 0;
    std::function<std::vector<double>(std::span<const double>)> predict;  // ProbDist values
};

inline UnionClassifier make_model_classifier(std::string name, const ModelSpec& spec,
                                             const ParameterSet& params) {
    return {std::move(name), spec.num_classes,
            [spec, params](std::span<const double> x) {
                return softmax(forward(spec, params, x)).values;
            }};
}

// A teacher promoted to the union space: local probabilities at its union
// indices, zeros elsewhere.
inline UnionClassifier make_padded_teacher(const TeacherModel& teacher,
                                           const LabelPartition& partition) {
    const int idx = teacher.partition_index;
    return {"teacher_" + std::to_string(idx), partition.union_size(),
            [teacher, partition, idx](std::span<const double> x) {
                const auto local = softmax(forward(teacher.spec, teacher.params, x));
                return pad(local, idx, partition).values;
            }};
}

// Inference-time baseline: softmax over the concatenated teacher logits.
inline UnionClassifier make_ensemble_classifier(const std::vector<TeacherModel>& teachers,
                                                const LabelPartition& partition) {
    return {"ensemble", partition.union_size(),
            [teachers, partition](std::span<const double> x) {
                std::vector<std::vector<double>> logits;
                logits.reserve(teachers.size());
                for (const auto& t : teachers) logits.push_back(forward(t.spec, t.params, x));
                return synthesize_vanilla_kd(logits, partition).dist.values;
            }};
}

inline double accuracy(const UnionClassifier& model, const LabeledDataset& data) {
    if (data.size() == 0) throw std::invalid_argument("accuracy: empty dataset");
    if (model.num_classes != data.num_classes)
        throw std::invalid_argument("accuracy: model has " + std::to_string(model.num_classes) +
                                    " classes, dataset has " + std::to_string(data.num_classes));
    std::size_t hits = 0;
    for (std::size_t i = 0; i < data.size(); ++i) {
        const auto p = model.predict(data.row_span(i));
        if (static_cast<int>(argmax_index(p)) == data.labels[i]) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(data.size());
}

// Rows = true label, columns = predicted label.
inline std::vector<std::vector<long>> confusion_matrix(const UnionClassifier& model,
                                                       const LabeledDataset& data) {
    if (model.num_classes != data.num_classes)
        throw std::invalid_argument("confusion_matrix: class count mismatch");
    std::vector<std::vector<long>> m(static_cast<std::size_t>(data.num_classes),
                                     std::vector<long>(static_cast<std::size_t>(data.num_classes), 0));
    for (std::size_t i = 0; i < data.size(); ++i) {
        const auto p = model.predict(data.row_span(i));
        m[static_cast<std::size_t>(data.labels[i])][argmax_index(p)] += 1;
    }
    return m;
}

// ---------------------------------------------------------------------------
// Probe tables
// ---------------------------------------------------------------------------

struct ProbeTable {
    std::string name;
    std::vector<std::string> columns;
    std::vector<std::vector<double>> rows;
    std::map<std::string, double> aggregates;

    std::string csv() const {
        std::string out = join(columns, ',');
        out += '\n';
        for (const auto& r : rows) {
            for (std::size_t i = 0; i < r.size(); ++i) {
                if (i) out += ',';
                out += format_double(r[i]);
            }
            out += '\n';
        }
        return out;
    }

    double column_mean(const std::string& col,
                       const std::function<bool(const std::vector<double>&)>& filter = {}) const {
        const std::size_t ci = column_index(col);
        double sum = 0.0;
        long n = 0;
        for (const auto& r : rows) {
            if (filter && !filter(r)) continue;
            sum += r[ci];
            ++n;
        }
        return n > 0 ? sum / static_cast<double>(n) : 0.0;
    }

    std::size_t column_index(const std::string& col) const {
        for (std::size_t i = 0; i < columns.size(); ++i)
            if (columns[i] == col) return i;
        throw std::invalid_argument("ProbeTable: no column '" + col + "' in " + name);
    }
};

// KL(oracle(x) || target(x)) per instance, grouped by the margin weight.
// Hard targets are rejected: their padded zeros make the divergence undefined.
inline ProbeTable supervision_quality(const std::vector<SupervisionTarget>& targets,
                                      const UnionClassifier& oracle,
                                      const UnlabeledDataset& instances,
                                      double group_threshold = 0.5) {
    if (targets.size() != instances.size())
        throw std::invalid_argument("supervision_quality: target/instance count mismatch");
    if (targets.empty()) throw std::invalid_argument("supervision_quality: no targets");
    for (const auto& t : targets)
        if (t.provenance == Method::muka_hard)
            throw std::invalid_argument(
                "supervision_quality: hard targets unsupported (zero-padded distributions)");

    ProbeTable table;
    table.name = "supervision_quality";
    table.columns = {"instance_id", "v", "kl"};
    for (std::size_t i = 0; i < targets.size(); ++i) {
        const auto oracle_dist = oracle.predict(instances.row_span(i));
        const auto& t = targets[i];
        if (t.dist.size() != oracle_dist.size())
            throw std::invalid_argument("supervision_quality: target size mismatch");
        double kl = 0.0;
        for (std::size_t y = 0; y < oracle_dist.size(); ++y) {
            const double o = oracle_dist[y];
            if (o > 0.0) kl += o * std::log(o / std::max(t.dist.values[y], kProbClamp));
        }
        table.rows.push_back({static_cast<double>(i), t.weight, std::max(kl, 0.0)});
    }
    const auto ge = [&](const std::vector<double>& r) { return r[1] >= group_threshold; };
    const auto lt = [&](const std::vector<double>& r) { return r[1] < group_threshold; };
    table.aggregates["mean_kl_all"] = table.column_mean("kl");
    table.aggregates["mean_kl_v_ge"] = table.column_mean("kl", ge);
    table.aggregates["mean_kl_v_lt"] = table.column_mean("kl", lt);
    double n_ge = 0;
    for (const auto& r : table.rows)
        if (ge(r)) ++n_ge;
    table.aggregates["count_v_ge"] = n_ge;
    table.aggregates["count_v_lt"] = static_cast<double>(table.rows.size()) - n_ge;
    return table;
}

// Normalized uncertainty of every teacher on every instance, under a single
// deterministic pass and under MC dropout. The "correct" teacher is the one
// whose specialty contains the true label. The separation statistic is
// mean(wrong u) - mean(correct u), larger meaning better discrimination.
inline ProbeTable uncertainty_histogram(const std::vector<TeacherModel>& teachers,
                                        const LabeledDataset& data,
                                        const LabelPartition& partition, const MCConfig& mc) {
    if (data.size() == 0) throw std::invalid_argument("uncertainty_histogram: empty dataset");
    ProbeTable table;
    table.name = "uncertainty_histogram";
    table.columns = {"instance_id", "teacher_id", "mode_mc", "u_normalized", "is_correct_teacher"};
    MCConfig single;
    single.num_samples = 1;
    single.dropout_override = 0.0;
    single.base_seed = mc.base_seed;
    for (std::size_t i = 0; i < data.size(); ++i) {
        const int owner = partition.owner_of(data.labels[i]);
        for (std::size_t t = 0; t < teachers.size(); ++t) {
            const double max_u = std::log(static_cast<double>(teachers[t].spec.num_classes));
            for (int mode = 0; mode <= 1; ++mode) {
                const ProbDist p = mc_dropout_predict(teachers[t], data.row_span(i),
                                                      static_cast<long>(i), mode ? mc : single);
                const double u_norm = std::clamp(model_uncertainty(p) / max_u, 0.0, 1.0);
                table.rows.push_back({static_cast<double>(i), static_cast<double>(t),
                                      static_cast<double>(mode), u_norm,
                                      teachers[t].partition_index == owner ? 1.0 : 0.0});
            }
        }
    }
    for (int mode = 0; mode <= 1; ++mode) {
        const std::string tag = mode ? "mc" : "single";
        const auto correct = [mode](const std::vector<double>& r) {
            return r[2] == mode && r[4] == 1.0;
        };
        const auto wrong = [mode](const std::vector<double>& r) {
            return r[2] == mode && r[4] == 0.0;
        };
        const double mc_corr = table.column_mean("u_normalized", correct);
        const double mc_wrong = table.column_mean("u_normalized", wrong);
        table.aggregates["mean_u_correct_" + tag] = mc_corr;
        table.aggregates["mean_u_wrong_" + tag] = mc_wrong;
        table.aggregates["separation_" + tag] = mc_wrong - mc_corr;
    }
    return table;
}

// Instances whose argmax-confidence teacher does not own the true label:
// their label histogram and the mean margin weight over the error set.
inline ProbeTable selection_error_analysis(const std::vector<TeacherModel>& teachers,
                                           const LabeledDataset& data,
                                           const LabelPartition& partition, const MCConfig& mc,
                                           double tau) {
    if (data.size() == 0) throw std::invalid_argument("selection_error_analysis: empty dataset");
    ProbeTable table;
    table.name = "selection_error_analysis";
    table.columns = {"instance_id", "true_label", "selected_teacher", "correct_teacher", "v",
                     "is_error"};
    for (std::size_t i = 0; i < data.size(); ++i) {
        const UncertaintyReport rep = assess(teachers, data.row_span(i), static_cast<long>(i), mc, tau);
        const int owner = partition.owner_of(data.labels[i]);
        const int selected_owner =
            teachers[static_cast<std::size_t>(rep.selected)].partition_index;
        const bool error = selected_owner != owner;
        table.rows.push_back({static_cast<double>(i), static_cast<double>(data.labels[i]),
                              static_cast<double>(rep.selected), static_cast<double>(owner), rep.v,
                              error ? 1.0 : 0.0});
    }
    const auto is_err = [](const std::vector<double>& r) { return r[5] == 1.0; };
    double errors = 0;
    for (const auto& r : table.rows)
        if (is_err(r)) ++errors;
    table.aggregates["error_count"] = errors;
    table.aggregates["error_rate"] = errors / static_cast<double>(table.rows.size());
    table.aggregates["selection_accuracy"] = 1.0 - errors / static_cast<double>(table.rows.size());
    table.aggregates["mean_v_over_errors"] = table.column_mean("v", is_err);
    for (int y = 0; y < data.num_classes; ++y) {
        double n = 0;
        for (const auto& r : table.rows)
            if (r[5] == 1.0 && static_cast<int>(r[1]) == y) ++n;
        table.aggregates["error_label_" + std::to_string(y)] = n;
    }
    return table;
}

// Per-teacher calibration on rows outside the teacher's specialty, where every
// prediction is wrong by construction; ECE there is driven by overconfidence.
inline ProbeTable teacher_ood_ece(const std::vector<TeacherModel>& teachers,
                                  const LabeledDataset& data, const LabelPartition& partition,
                                  int num_bins = 10) {
    ProbeTable table;
    table.name = "teacher_ood_ece";
    table.columns = {"teacher_id", "ood_ece", "ood_count"};
    double sum = 0.0;
    for (std::size_t t = 0; t < teachers.size(); ++t) {
        const UnionClassifier padded = make_padded_teacher(teachers[t], partition);
        std::vector<PredictionRecord> recs;
        for (std::size_t i = 0; i < data.size(); ++i) {
            if (partition.owner_of(data.labels[i]) == teachers[t].partition_index) continue;
            const auto p = padded.predict(data.row_span(i));
            const std::size_t pred = argmax_index(p);
            recs.push_back({p[pred], static_cast<int>(pred) == data.labels[i]});
        }
        if (recs.empty()) throw std::invalid_argument("teacher_ood_ece: teacher " +
                                                      std::to_string(t) + " has no OOD rows");
        const double e = ece_from_records(recs, num_bins);
        table.rows.push_back({static_cast<double>(t), e, static_cast<double>(recs.size())});
        sum += e;
    }
    table.aggregates["mean_ood_ece"] = sum / static_cast<double>(teachers.size());
    return table;
}

inline std::string confusion_csv(const std::vector<std::vector<long>>& m) {
    std::string out = "true\\pred";
    for (std::size_t c = 0; c < m.size(); ++c) out += "," + std::to_string(c);
    out += '\n';
    for (std::size_t r = 0; r < m.size(); ++r) {
        out += std::to_string(r);
        for (long v : m[r]) out += "," + std::to_string(v);
        out += '\n';
    }
    return out;
}

}  // namespace muka
