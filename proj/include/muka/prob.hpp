#pragma once

// Probability distributions over a declared label space, and the losses
// used for distillation. Natural log throughout.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace muka {

inline constexpr double kProbSumTolerance = 1e-9;
inline constexpr double kProbClamp = 1e-12;  // floor before taking logs

struct ProbDist {
    std::vector<double> values;
    std::string label_space_id;  // a teacher's local space or "union"

    std::size_t size() const { return values.size(); }
    double operator[](std::size_t i) const { return values[i]; }
};

inline bool is_valid_prob(std::span<const double> v, double tol = kProbSumTolerance) {
    double sum = 0.0;
    for (double x : v) {
        if (!(x >= 0.0) || !std::isfinite(x)) return false;
        sum += x;
    }
    return std::abs(sum - 1.0) <= tol;
}

inline bool is_valid_prob(const ProbDist& p, double tol = kProbSumTolerance) {
    return is_valid_prob(std::span<const double>(p.values), tol);
}

// Max-subtracted softmax; shift-invariant and overflow-safe for any finite logits.
inline ProbDist softmax(std::span<const double> logits, std::string label_space_id = {}) {
    if (logits.empty()) throw std::invalid_argument("softmax: empty logits");
    double m = logits[0];
    for (double z : logits) m = std::max(m, z);
    ProbDist p;
    p.label_space_id = std::move(label_space_id);
    p.values.resize(logits.size());
    double sum = 0.0;
    for (std::size_t i = 0; i < logits.size(); ++i) {
        p.values[i] = std::exp(logits[i] - m);
        sum += p.values[i];
    }
    for (double& x : p.values) x /= sum;
    return p;
}

// Shannon entropy in nats; 0 * log 0 taken as 0.
inline double entropy(const ProbDist& p) {
    double h = 0.0;
    for (double x : p.values) {
        if (x > 0.0) h -= x * std::log(x);
    }
    return std::max(h, 0.0);
}

inline std::size_t argmax_index(std::span<const double> v) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < v.size(); ++i) {
        if (v[i] > v[best]) best = i;  // ties keep the lowest index
    }
    return best;
}

enum class KlDirection { forward, reverse };

struct KlResult {
    double loss = 0.0;
    std::vector<double> grad_logits;  // d loss / d student logits
};

// Instance-weighted KL between a target distribution and the student.
//
// forward (default): loss = weight * KL(target || student); the gradient
// w.r.t. the student logits is weight * (student - target). Well-defined for
// targets with zero entries, which padded hard targets always have.
// reverse: loss = weight * KL(student || target); exposed for comparison.
//
// Student probabilities (forward) / target probabilities (reverse) are
// clamped below by kProbClamp before the log.
inline KlResult weighted_kl_loss(const ProbDist& student, const ProbDist& target,
                                 double weight, KlDirection dir = KlDirection::forward) {
    if (student.size() != target.size())
        throw std::invalid_argument("weighted_kl_loss: size mismatch (" +
                                    std::to_string(student.size()) + " vs " +
                                    std::to_string(target.size()) + ")");
    if (!student.label_space_id.empty() && !target.label_space_id.empty() &&
        student.label_space_id != target.label_space_id)
        throw std::invalid_argument("weighted_kl_loss: label space mismatch (" +
                                    student.label_space_id + " vs " + target.label_space_id + ")");
    if (!(weight >= 0.0) || !std::isfinite(weight))
        throw std::invalid_argument("weighted_kl_loss: weight must be finite and >= 0");

    const std::size_t n = student.size();
    KlResult r;
    r.grad_logits.assign(n, 0.0);
    if (dir == KlDirection::forward) {
        for (std::size_t i = 0; i < n; ++i) {
            const double t = target.values[i];
            const double s = std::max(student.values[i], kProbClamp);
            if (t > 0.0) r.loss += t * std::log(t / s);
            r.grad_logits[i] = weight * (student.values[i] - t);
        }
    } else {
        // KL(s || t): grad_j = w * s_j * (log(s_j/t_j) - KL(s||t))
        double kl = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            const double s = student.values[i];
            const double t = std::max(target.values[i], kProbClamp);
            if (s > 0.0) kl += s * std::log(s / t);
        }
        r.loss = kl;
        for (std::size_t i = 0; i < n; ++i) {
            const double s = student.values[i];
            const double t = std::max(target.values[i], kProbClamp);
            const double lr = s > 0.0 ? std::log(s / t) : std::log(kProbClamp / t);
            r.grad_logits[i] = weight * s * (lr - kl);
        }
    }
    r.loss = std::max(r.loss, 0.0) * weight;
    return r;
}

}  // namespace muka
