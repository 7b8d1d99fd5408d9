#pragma once

// Feed-forward classifier with Bernoulli dropout on hidden activations.
// Gradients are hand-derived for this fixed family; no autodiff graph.

#include <cmath>
#include <cstddef>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "muka/rng.hpp"

namespace muka {

enum class Activation { relu, tanh };

inline std::string to_string(Activation a) {
    return a == Activation::relu ? "relu" : "tanh";
}

inline Activation activation_from_string(const std::string& s) {
    if (s == "relu") return Activation::relu;
    if (s == "tanh") return Activation::tanh;
    throw std::invalid_argument("unknown activation: " + s);
}

struct ModelSpec {
    int input_dim = 0;
    std::vector<int> hidden_dims;
    int num_classes = 0;
    double dropout_rate = 0.0;
    Activation activation = Activation::relu;

    void validate() const {
        if (input_dim < 1) throw std::invalid_argument("ModelSpec: input_dim must be >= 1");
        if (num_classes < 2) throw std::invalid_argument("ModelSpec: num_classes must be >= 2");
        for (int h : hidden_dims)
            if (h < 1) throw std::invalid_argument("ModelSpec: hidden dims must be positive");
        if (!(dropout_rate >= 0.0 && dropout_rate < 1.0))
            throw std::invalid_argument("ModelSpec: dropout_rate must be in [0,1)");
    }

    // [input_dim, hidden..., num_classes]
    std::vector<int> layer_dims() const {
        std::vector<int> d;
        d.reserve(hidden_dims.size() + 2);
        d.push_back(input_dim);
        d.insert(d.end(), hidden_dims.begin(), hidden_dims.end());
        d.push_back(num_classes);
        return d;
    }

    std::size_t num_layers() const { return hidden_dims.size() + 1; }

    std::size_t param_count() const {
        auto d = layer_dims();
        std::size_t n = 0;
        for (std::size_t l = 0; l + 1 < d.size(); ++l)
            n += static_cast<std::size_t>(d[l + 1]) * d[l] + d[l + 1];
        return n;
    }

    bool operator==(const ModelSpec&) const = default;
};

// Maps (layer, weight/bias) to a contiguous span of the flat parameter array.
// Layer l weight is (rows=dims[l+1] x cols=dims[l]) row-major, then its bias.
struct ParamLayout {
    struct Span {
        std::size_t offset = 0;
        std::size_t rows = 0;
        std::size_t cols = 0;  // 1 for biases
        std::size_t count() const { return rows * cols; }
    };
    std::vector<Span> weight;
    std::vector<Span> bias;
    std::size_t total = 0;

    static ParamLayout of(const ModelSpec& spec) {
        ParamLayout lay;
        auto d = spec.layer_dims();
        std::size_t off = 0;
        for (std::size_t l = 0; l + 1 < d.size(); ++l) {
            const auto rows = static_cast<std::size_t>(d[l + 1]);
            const auto cols = static_cast<std::size_t>(d[l]);
            lay.weight.push_back({off, rows, cols});
            off += rows * cols;
            lay.bias.push_back({off, rows, 1});
            off += rows;
        }
        lay.total = off;
        return lay;
    }

    // Human-readable name for diagnostics, e.g. "layer 2 weight".
    std::string span_name(std::size_t flat_index) const {
        for (std::size_t l = 0; l < weight.size(); ++l) {
            if (flat_index < weight[l].offset + weight[l].count())
                return "layer " + std::to_string(l) + " weight";
            if (flat_index < bias[l].offset + bias[l].count())
                return "layer " + std::to_string(l) + " bias";
        }
        return "out of range";
    }
};

struct ParameterSet {
    std::vector<double> values;
    ParamLayout layout;

    static ParameterSet zeros(const ModelSpec& spec) {
        spec.validate();
        ParameterSet p;
        p.layout = ParamLayout::of(spec);
        p.values.assign(p.layout.total, 0.0);
        return p;
    }

    std::size_t size() const { return values.size(); }
};

// Glorot-uniform weights, zero biases; reproducible from the seed.
inline ParameterSet init_parameters(const ModelSpec& spec, std::uint64_t seed) {
    ParameterSet p = ParameterSet::zeros(spec);
    Rng rng(derive_key(seed, 0x696E6974ULL));  // "init"
    for (std::size_t l = 0; l < p.layout.weight.size(); ++l) {
        const auto& w = p.layout.weight[l];
        const double bound = std::sqrt(6.0 / static_cast<double>(w.rows + w.cols));
        for (std::size_t i = 0; i < w.count(); ++i)
            p.values[w.offset + i] = rng.uniform(-bound, bound);
    }
    return p;
}

// Inverted-dropout masks: entries are 0 (dropped) or 1/(1-rate), one vector
// per hidden layer, so the expected masked pass equals the deterministic pass.
struct DropoutMask {
    std::vector<std::vector<double>> layers;
    double keep_scale = 1.0;
};

inline DropoutMask sample_dropout_mask(const ModelSpec& spec, Rng& rng) {
    DropoutMask m;
    const double rate = spec.dropout_rate;
    m.keep_scale = rate > 0.0 ? 1.0 / (1.0 - rate) : 1.0;
    m.layers.resize(spec.hidden_dims.size());
    for (std::size_t l = 0; l < m.layers.size(); ++l) {
        m.layers[l].resize(spec.hidden_dims[l]);
        for (double& e : m.layers[l])
            e = (rate > 0.0 && rng.uniform() < rate) ? 0.0 : m.keep_scale;
    }
    return m;
}

namespace detail {

inline void check_forward_args(const ModelSpec& spec, const ParameterSet& params,
                               std::span<const double> x, const DropoutMask* mask) {
    if (params.size() != spec.param_count())
        throw std::invalid_argument("forward: parameter count " + std::to_string(params.size()) +
                                    " does not match spec (" +
                                    std::to_string(spec.param_count()) + ")");
    if (x.size() != static_cast<std::size_t>(spec.input_dim))
        throw std::invalid_argument("forward: input length " + std::to_string(x.size()) +
                                    " does not match input layer (" +
                                    std::to_string(spec.input_dim) + ")");
    if (mask) {
        if (mask->layers.size() != spec.hidden_dims.size())
            throw std::invalid_argument("forward: mask has " + std::to_string(mask->layers.size()) +
                                        " layers, spec has " +
                                        std::to_string(spec.hidden_dims.size()) + " hidden layers");
        for (std::size_t l = 0; l < mask->layers.size(); ++l)
            if (mask->layers[l].size() != static_cast<std::size_t>(spec.hidden_dims[l]))
                throw std::invalid_argument("forward: mask length mismatch at hidden layer " +
                                            std::to_string(l));
    }
}

inline double activate(double z, Activation a) {
    return a == Activation::relu ? (z > 0.0 ? z : 0.0) : std::tanh(z);
}

// Derivative expressed through the activation value where possible.
inline double activate_grad(double z, double h, Activation a) {
    return a == Activation::relu ? (z > 0.0 ? 1.0 : 0.0) : 1.0 - h * h;
}

struct ForwardTrace {
    std::vector<std::vector<double>> pre;   // z per non-input layer
    std::vector<std::vector<double>> act;   // post-activation (masked) per layer, act[0] = x
};

inline ForwardTrace run_forward(const ModelSpec& spec, const ParameterSet& params,
                                std::span<const double> x, const DropoutMask* mask) {
    check_forward_args(spec, params, x, mask);
    const auto dims = spec.layer_dims();
    ForwardTrace t;
    t.pre.resize(spec.num_layers());
    t.act.resize(spec.num_layers() + 1);
    t.act[0].assign(x.begin(), x.end());
    for (std::size_t l = 0; l < spec.num_layers(); ++l) {
        const auto& w = params.layout.weight[l];
        const auto& b = params.layout.bias[l];
        const auto& in = t.act[l];
        auto& z = t.pre[l];
        z.resize(w.rows);
        for (std::size_t r = 0; r < w.rows; ++r) {
            double acc = params.values[b.offset + r];
            const double* wr = params.values.data() + w.offset + r * w.cols;
            for (std::size_t c = 0; c < w.cols; ++c) acc += wr[c] * in[c];
            z[r] = acc;
        }
        const bool is_output = l + 1 == spec.num_layers();
        auto& out = t.act[l + 1];
        out.resize(w.rows);
        if (is_output) {
            out = z;  // linear output layer
        } else {
            for (std::size_t r = 0; r < w.rows; ++r) {
                double h = activate(z[r], spec.activation);
                if (mask) h *= mask->layers[l][r];
                out[r] = h;
            }
        }
        (void)dims;
    }
    return t;
}

}  // namespace detail

// Logits for one input. Deterministic when mask is null.
inline std::vector<double> forward(const ModelSpec& spec, const ParameterSet& params,
                                   std::span<const double> x,
                                   const DropoutMask* mask = nullptr) {
    return detail::run_forward(spec, params, x, mask).act.back();
}

// Gradient of (logits . upstream) w.r.t. every parameter, flat layout.
inline std::vector<double> backward(const ModelSpec& spec, const ParameterSet& params,
                                    std::span<const double> x, const DropoutMask* mask,
                                    std::span<const double> upstream) {
    if (upstream.size() != static_cast<std::size_t>(spec.num_classes))
        throw std::invalid_argument("backward: upstream length " + std::to_string(upstream.size()) +
                                    " does not match output layer (" +
                                    std::to_string(spec.num_classes) + ")");
    const auto trace = detail::run_forward(spec, params, x, mask);
    std::vector<double> grad(params.size(), 0.0);
    std::vector<double> delta(upstream.begin(), upstream.end());

    for (std::size_t li = spec.num_layers(); li-- > 0;) {
        const auto& w = params.layout.weight[li];
        const auto& b = params.layout.bias[li];
        const auto& in = trace.act[li];
        for (std::size_t r = 0; r < w.rows; ++r) {
            grad[b.offset + r] += delta[r];
            double* gr = grad.data() + w.offset + r * w.cols;
            for (std::size_t c = 0; c < w.cols; ++c) gr[c] += delta[r] * in[c];
        }
        if (li == 0) break;
        // propagate through W, then the previous layer's dropout and activation
        std::vector<double> prev(w.cols, 0.0);
        for (std::size_t r = 0; r < w.rows; ++r) {
            const double* wr = params.values.data() + w.offset + r * w.cols;
            for (std::size_t c = 0; c < w.cols; ++c) prev[c] += wr[c] * delta[r];
        }
        const std::size_t hl = li - 1;  // hidden layer index feeding layer li
        const auto& z = trace.pre[hl];
        for (std::size_t c = 0; c < prev.size(); ++c) {
            double g = prev[c];
            if (mask) g *= mask->layers[hl][c];
            // recover unmasked activation for the tanh derivative
            const double h = detail::activate(z[c], spec.activation);
            g *= detail::activate_grad(z[c], h, spec.activation);
            prev[c] = g;
        }
        delta = std::move(prev);
    }
    return grad;
}

}  // namespace muka
