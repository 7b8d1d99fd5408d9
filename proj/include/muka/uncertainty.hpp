#pragma once

// Monte-Carlo-Dropout predictive distributions and the uncertainty-derived
// quantities that drive supervision synthesis:
//
//   p_i = (1/K) sum_k softmax(forward(x, mask_k))     averaged MC prediction
//   u_i = H(p_i)                                      model uncertainty (nats)
//   c_i = 1 - u_i / ln|Y_i|                           normalized confidence
//   w   = softmax(c / tau)                            teacher weights
//   v   = c_max - c_sec                               instance margin weight
//
// Mask streams are keyed by (base_seed, teacher, instance, pass), so parallel
// and sequential evaluation produce identical bits.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <stdexcept>
#include <vector>

#include "muka/dataset.hpp"
#include "muka/prob.hpp"
#include "muka/rng.hpp"
#include "muka/training.hpp"

namespace muka {

struct MCConfig {
    int num_samples = 16;                       // K
    std::optional<double> dropout_override;     // replace the spec's rate at assessment
    std::uint64_t base_seed = 1;

    void validate() const {
        if (num_samples < 1) throw std::invalid_argument("MCConfig: num_samples must be >= 1");
        if (dropout_override && !(*dropout_override >= 0.0 && *dropout_override < 1.0))
            throw std::invalid_argument("MCConfig: dropout override must be in [0,1)");
    }
};

// Averaged stochastic forward passes. With an effective rate of 0 the masks
// are all-ones and the result equals the deterministic softmax forward.
inline ProbDist mc_dropout_predict(const TeacherModel& teacher, std::span<const double> x,
                                   long instance_id, const MCConfig& mc) {
    mc.validate();
    ModelSpec spec = teacher.spec;
    if (mc.dropout_override) spec.dropout_rate = *mc.dropout_override;

    ProbDist mean;
    mean.label_space_id = "teacher_" + std::to_string(teacher.partition_index);
    mean.values.assign(static_cast<std::size_t>(spec.num_classes), 0.0);
    const double inv_k = 1.0 / static_cast<double>(mc.num_samples);
    const std::uint64_t tkey = teacher.stream_key();
    for (int k = 0; k < mc.num_samples; ++k) {
        Rng rng(derive_key(mc.base_seed, tkey, static_cast<std::uint64_t>(instance_id),
                           static_cast<std::uint64_t>(k)));
        const DropoutMask mask = sample_dropout_mask(spec, rng);
        const auto p = softmax(forward(spec, teacher.params, x, &mask));
        for (std::size_t i = 0; i < mean.values.size(); ++i) mean.values[i] += inv_k * p.values[i];
    }
    return mean;
}

inline double model_uncertainty(const ProbDist& p) { return entropy(p); }

// c = 1 - u / ln(class_count), clamped into [0,1]. The ln|Y_i| normalizer
// makes confidences comparable across teachers with different class counts.
inline double confidence(double u, int class_count) {
    if (class_count < 2)
        throw std::invalid_argument("confidence: class_count must be >= 2 (ln 1 = 0)");
    const double max_u = std::log(static_cast<double>(class_count));
    if (u < -1e-9 || u > max_u + 1e-9)
        throw std::invalid_argument("confidence: entropy " + format_double(u) +
                                    " outside [0, ln " + std::to_string(class_count) + "]");
    const double c = 1.0 - std::clamp(u, 0.0, max_u) / max_u;
    return std::clamp(c, 0.0, 1.0);
}

// w = softmax(c / tau); tau < 1 sharpens toward the most confident teacher.
inline std::vector<double> soft_weights(const std::vector<double>& c, double tau) {
    if (!(tau > 0.0)) throw std::invalid_argument("soft_weights: tau must be > 0");
    if (c.empty()) throw std::invalid_argument("soft_weights: no confidences");
    std::vector<double> scaled(c.size());
    for (std::size_t i = 0; i < c.size(); ++i) {
        if (!std::isfinite(c[i])) throw std::invalid_argument("soft_weights: non-finite confidence");
        scaled[i] = c[i] / tau;
    }
    return softmax(scaled).values;
}

// v = c_max - c_sec. A single teacher is maximally distinguishable: v = 1,
// which reduces amalgamation to plain distillation when N = 1.
inline double margin_weight(const std::vector<double>& c) {
    if (c.empty()) throw std::invalid_argument("margin_weight: no confidences");
    if (c.size() == 1) return 1.0;
    double cmax = -1.0, csec = -1.0;
    for (double x : c) {
        if (x > cmax) {
            csec = cmax;
            cmax = x;
        } else if (x > csec) {
            csec = x;
        }
    }
    return std::clamp(cmax - csec, 0.0, 1.0);
}

struct UncertaintyReport {
    std::vector<ProbDist> mc_dists;  // p_i over each teacher's local space
    std::vector<double> u;           // entropies (nats)
    std::vector<double> c;           // normalized confidences
    std::vector<double> w;           // soft weights (sum to 1)
    double c_max = 0.0;
    double c_sec = 0.0;
    double v = 0.0;      // margin weight
    int selected = -1;   // argmax-confidence teacher, ties to the lowest index
};

inline UncertaintyReport assess(const std::vector<TeacherModel>& teachers,
                                std::span<const double> x, long instance_id, const MCConfig& mc,
                                double tau) {
    if (teachers.empty()) throw std::invalid_argument("assess: no teachers");
    UncertaintyReport rep;
    const std::size_t n = teachers.size();
    rep.mc_dists.reserve(n);
    rep.u.resize(n);
    rep.c.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        rep.mc_dists.push_back(mc_dropout_predict(teachers[i], x, instance_id, mc));
        rep.u[i] = model_uncertainty(rep.mc_dists[i]);
        rep.c[i] = confidence(rep.u[i], teachers[i].spec.num_classes);
    }
    rep.w = n == 1 ? std::vector<double>{1.0} : soft_weights(rep.c, tau);
    rep.selected = static_cast<int>(argmax_index(rep.c));
    rep.c_max = rep.c[static_cast<std::size_t>(rep.selected)];
    rep.c_sec = 0.0;
    if (n > 1) {
        double sec = -1.0;
        for (std::size_t i = 0; i < n; ++i)
            if (static_cast<int>(i) != rep.selected) sec = std::max(sec, rep.c[i]);
        rep.c_sec = sec;
    }
    rep.v = margin_weight(rep.c);
    return rep;
}

// ---------------------------------------------------------------------------
// Expected calibration error
// ---------------------------------------------------------------------------

struct PredictionRecord {
    double confidence = 0.0;  // max predicted probability
    bool correct = false;
};

// Equal-width bins over [0,1]; ECE = sum_b (n_b/n) |acc_b - conf_b|.
inline double ece_from_records(const std::vector<PredictionRecord>& records, int num_bins) {
    if (num_bins < 1) throw std::invalid_argument("ece: num_bins must be >= 1");
    if (records.empty()) throw std::invalid_argument("ece: empty record set");
    std::vector<double> conf_sum(static_cast<std::size_t>(num_bins), 0.0);
    std::vector<double> hit_sum(static_cast<std::size_t>(num_bins), 0.0);
    std::vector<long> count(static_cast<std::size_t>(num_bins), 0);
    for (const auto& r : records) {
        const int b = std::min(num_bins - 1,
                               static_cast<int>(std::floor(r.confidence * num_bins)));
        const auto bi = static_cast<std::size_t>(std::max(0, b));
        conf_sum[bi] += r.confidence;
        hit_sum[bi] += r.correct ? 1.0 : 0.0;
        count[bi] += 1;
    }
    double ece = 0.0;
    const double n = static_cast<double>(records.size());
    for (std::size_t b = 0; b < count.size(); ++b) {
        if (count[b] == 0) continue;
        const double nb = static_cast<double>(count[b]);
        ece += (nb / n) * std::abs(hit_sum[b] / nb - conf_sum[b] / nb);
    }
    return ece;
}

// Calibration of any union-space predictor on labeled data.
inline double ece(const std::function<std::vector<double>(std::span<const double>)>& predict_dist,
                  const LabeledDataset& data, int num_bins) {
    if (data.size() == 0) throw std::invalid_argument("ece: empty dataset");
    std::vector<PredictionRecord> recs;
    recs.reserve(data.size());
    for (std::size_t i = 0; i < data.size(); ++i) {
        const auto p = predict_dist(data.row_span(i));
        const std::size_t pred = argmax_index(p);
        recs.push_back({p[pred], static_cast<int>(pred) == data.labels[i]});
    }
    return ece_from_records(recs, num_bins);
}

}  // namespace muka
