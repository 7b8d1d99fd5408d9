#pragma once

// Synthetic classification data: seeded Gaussian-mixture generation, disjoint
// label partitions, per-teacher restriction, and the unlabeled transfer set.
//
// Dataset file format (bit-exact round trip):
//   #amalgam-dataset v1 dim=<d> classes=<c>
//   label,f1,...,fd

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numeric>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "muka/rng.hpp"
#include "muka/textio.hpp"

namespace muka {

struct LabeledDataset {
    int input_dim = 0;
    int num_classes = 0;
    std::vector<double> features;  // n x input_dim, row-major
    std::vector<int> labels;       // union-space ids in [0, num_classes)
    std::vector<std::string> class_names;  // optional, not persisted
    std::uint64_t seed = 0;

    std::size_t size() const { return labels.size(); }
    const double* row(std::size_t i) const { return features.data() + i * input_dim; }
    std::span<const double> row_span(std::size_t i) const {
        return {row(i), static_cast<std::size_t>(input_dim)};
    }

    void validate() const {
        if (features.size() != size() * static_cast<std::size_t>(input_dim))
            throw std::invalid_argument("LabeledDataset: feature matrix shape mismatch");
        for (int y : labels)
            if (y < 0 || y >= num_classes)
                throw std::invalid_argument("LabeledDataset: label " + std::to_string(y) +
                                            " outside [0, " + std::to_string(num_classes) + ")");
        for (double v : features)
            if (!std::isfinite(v)) throw std::invalid_argument("LabeledDataset: non-finite feature");
    }
};

// Features only. The amalgamation trainer takes this type, so transfer-set
// labels are unavailable to it by construction.
struct UnlabeledDataset {
    int input_dim = 0;
    std::vector<double> features;

    std::size_t size() const {
        return input_dim > 0 ? features.size() / static_cast<std::size_t>(input_dim) : 0;
    }
    const double* row(std::size_t i) const { return features.data() + i * input_dim; }
    std::span<const double> row_span(std::size_t i) const {
        return {row(i), static_cast<std::size_t>(input_dim)};
    }
};

inline UnlabeledDataset strip_labels(const LabeledDataset& ds) {
    return UnlabeledDataset{ds.input_dim, ds.features};
}

inline std::uint64_t dataset_fingerprint(const LabeledDataset& ds) {
    std::uint64_t h = fnv1a_bytes(ds.labels.data(), ds.labels.size() * sizeof(int));
    h = fnv1a_bytes(ds.features.data(), ds.features.size() * sizeof(double), h);
    h = fnv1a_bytes(&ds.input_dim, sizeof(int), h);
    return h;
}

// ---------------------------------------------------------------------------
// Label partition: disjoint, exhaustive teacher specialties over the union.
// ---------------------------------------------------------------------------

class LabelPartition {
public:
    static LabelPartition create(int union_size, std::vector<std::vector<int>> subsets) {
        LabelPartition p;
        p.union_size_ = union_size;
        p.subsets_ = std::move(subsets);
        p.owner_.assign(static_cast<std::size_t>(union_size), -1);
        p.local_.assign(static_cast<std::size_t>(union_size), -1);
        std::size_t covered = 0;
        for (std::size_t t = 0; t < p.subsets_.size(); ++t) {
            const auto& sub = p.subsets_[t];
            if (sub.size() < 2)
                throw std::invalid_argument("LabelPartition: subset " + std::to_string(t) +
                                            " has fewer than 2 classes");
            for (std::size_t j = 0; j < sub.size(); ++j) {
                const int u = sub[j];
                if (u < 0 || u >= union_size)
                    throw std::invalid_argument("LabelPartition: class " + std::to_string(u) +
                                                " outside union range");
                if (p.owner_[static_cast<std::size_t>(u)] != -1)
                    throw std::invalid_argument("LabelPartition: class " + std::to_string(u) +
                                                " appears in two subsets");
                p.owner_[static_cast<std::size_t>(u)] = static_cast<int>(t);
                p.local_[static_cast<std::size_t>(u)] = static_cast<int>(j);
                ++covered;
            }
        }
        if (covered != static_cast<std::size_t>(union_size))
            throw std::invalid_argument("LabelPartition: subsets do not cover the union set");
        return p;
    }

    int union_size() const { return union_size_; }
    int num_teachers() const { return static_cast<int>(subsets_.size()); }
    const std::vector<std::vector<int>>& subsets() const { return subsets_; }

    const std::vector<int>& subset(int teacher) const {
        check_teacher(teacher);
        return subsets_[static_cast<std::size_t>(teacher)];
    }

    int subset_size(int teacher) const { return static_cast<int>(subset(teacher).size()); }

    int union_index(int teacher, int local) const {
        const auto& sub = subset(teacher);
        if (local < 0 || local >= static_cast<int>(sub.size()))
            throw std::out_of_range("LabelPartition: local index " + std::to_string(local) +
                                    " out of range for teacher " + std::to_string(teacher));
        return sub[static_cast<std::size_t>(local)];
    }

    int local_index(int teacher, int union_idx) const {
        check_teacher(teacher);
        check_union(union_idx);
        if (owner_[static_cast<std::size_t>(union_idx)] != teacher)
            throw std::out_of_range("LabelPartition: class " + std::to_string(union_idx) +
                                    " not in teacher " + std::to_string(teacher) + "'s subset");
        return local_[static_cast<std::size_t>(union_idx)];
    }

    int owner_of(int union_idx) const {
        check_union(union_idx);
        return owner_[static_cast<std::size_t>(union_idx)];
    }

    bool contains(int teacher, int union_idx) const {
        check_union(union_idx);
        return owner_[static_cast<std::size_t>(union_idx)] == teacher;
    }

    std::string describe() const {
        std::string s;
        for (const auto& sub : subsets_) {
            std::vector<std::string> parts;
            for (int u : sub) parts.push_back(std::to_string(u));
            if (!s.empty()) s += ';';
            s += join(parts, ',');
        }
        return s;
    }

    static LabelPartition from_description(int union_size, std::string_view desc) {
        std::vector<std::vector<int>> subsets;
        for (const auto& grp : split(desc, ';'))
            subsets.push_back(parse_int_list<int>(grp, "partition description"));
        return create(union_size, std::move(subsets));
    }

private:
    void check_teacher(int t) const {
        if (t < 0 || t >= num_teachers())
            throw std::out_of_range("LabelPartition: teacher index " + std::to_string(t) +
                                    " out of range (have " + std::to_string(num_teachers()) + ")");
    }
    void check_union(int u) const {
        if (u < 0 || u >= union_size_)
            throw std::out_of_range("LabelPartition: union class " + std::to_string(u) +
                                    " out of range");
    }

    int union_size_ = 0;
    std::vector<std::vector<int>> subsets_;
    std::vector<int> owner_;
    std::vector<int> local_;
};

// Random disjoint split of {0..union_size-1} into subsets of the given sizes.
inline LabelPartition partition_labels(int union_size, const std::vector<int>& subset_sizes,
                                       std::uint64_t seed) {
    long total = 0;
    for (int s : subset_sizes) {
        if (s < 2) throw std::invalid_argument("partition_labels: every subset size must be >= 2");
        total += s;
    }
    if (total != union_size)
        throw std::invalid_argument("partition_labels: sizes sum to " + std::to_string(total) +
                                    ", union size is " + std::to_string(union_size));
    std::vector<int> perm(static_cast<std::size_t>(union_size));
    std::iota(perm.begin(), perm.end(), 0);
    Rng rng(derive_key(seed, 0x706172ULL));  // "par"
    rng.shuffle(perm);
    std::vector<std::vector<int>> subsets;
    std::size_t pos = 0;
    for (int s : subset_sizes) {
        subsets.emplace_back(perm.begin() + static_cast<long>(pos),
                             perm.begin() + static_cast<long>(pos) + s);
        pos += static_cast<std::size_t>(s);
    }
    return LabelPartition::create(union_size, std::move(subsets));
}

// Rows whose union label lies in Y_i, relabeled to the teacher's local space.
inline LabeledDataset restrict(const LabeledDataset& ds, const LabelPartition& partition,
                               int teacher) {
    const auto& sub = partition.subset(teacher);  // range-checks teacher
    LabeledDataset out;
    out.input_dim = ds.input_dim;
    out.num_classes = static_cast<int>(sub.size());
    out.seed = ds.seed;
    for (std::size_t i = 0; i < ds.size(); ++i) {
        const int y = ds.labels[i];
        if (partition.owner_of(y) != teacher) continue;
        out.labels.push_back(partition.local_index(teacher, y));
        out.features.insert(out.features.end(), ds.row(i), ds.row(i) + ds.input_dim);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Gaussian mixture generation
// ---------------------------------------------------------------------------

struct GaussianMixtureConfig {
    int num_classes = 8;
    int input_dim = 32;
    double mean_radius = 10.0;      // class means drawn uniformly in [-r, r]^d
    double cov_scale = 1.0;         // isotropic per-class standard deviation
    int train_per_class = 120;
    int val_per_class = 0;          // 0: carve 5% of train per class
    int test_per_class = 40;
    double separation = 6.0;        // min pairwise mean distance, in cov_scale units
    std::uint64_t seed = 1;
    // Optional confusable pair: classes a and b are re-placed at
    // confusable_separation * cov_scale apart to provoke selection errors.
    int confusable_a = -1;
    int confusable_b = -1;
    double confusable_separation = 1.0;

    void validate() const {
        if (num_classes < 2) throw std::invalid_argument("mixture: num_classes must be >= 2");
        if (input_dim < 1) throw std::invalid_argument("mixture: input_dim must be >= 1");
        if (!(separation > 0.0)) throw std::invalid_argument("mixture: separation must be > 0");
        if (train_per_class < 10)
            throw std::invalid_argument("mixture: samples per class must be >= 10");
        if (test_per_class < 0 || val_per_class < 0)
            throw std::invalid_argument("mixture: negative split size");
        const bool a_set = confusable_a >= 0, b_set = confusable_b >= 0;
        if (a_set != b_set)
            throw std::invalid_argument("mixture: confusable pair needs both class ids");
        if (a_set && (confusable_a >= num_classes || confusable_b >= num_classes ||
                      confusable_a == confusable_b))
            throw std::invalid_argument("mixture: bad confusable pair");
    }
};

struct MixtureSplits {
    LabeledDataset train;
    LabeledDataset val;
    LabeledDataset test;
    std::vector<std::vector<double>> class_means;
};

namespace detail {

inline double mean_distance(const std::vector<double>& a, const std::vector<double>& b) {
    double d2 = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) d2 += (a[i] - b[i]) * (a[i] - b[i]);
    return std::sqrt(d2);
}

}  // namespace detail

inline MixtureSplits generate_gaussian_mixture(const GaussianMixtureConfig& cfg) {
    cfg.validate();
    Rng rng(derive_key(cfg.seed, 0x676D7832ULL));  // "gmx2"

    // Draw the full mean set; reject until pairwise separation holds.
    const double min_dist = cfg.separation * cfg.cov_scale;
    std::vector<std::vector<double>> means;
    bool ok = false;
    for (int attempt = 0; attempt < 1000 && !ok; ++attempt) {
        means.assign(static_cast<std::size_t>(cfg.num_classes),
                     std::vector<double>(static_cast<std::size_t>(cfg.input_dim)));
        for (auto& m : means)
            for (double& v : m) v = rng.uniform(-cfg.mean_radius, cfg.mean_radius);
        ok = true;
        for (std::size_t a = 0; a < means.size() && ok; ++a)
            for (std::size_t b = a + 1; b < means.size() && ok; ++b)
                if (detail::mean_distance(means[a], means[b]) < min_dist) ok = false;
    }
    if (!ok)
        throw std::runtime_error("generate_gaussian_mixture: could not separate " +
                                 std::to_string(cfg.num_classes) + " means by " +
                                 format_double(min_dist) + " after 1000 attempts");

    // Re-place the confusable pair close together (deliberately violating the
    // separation guarantee for exactly that pair).
    if (cfg.confusable_a >= 0) {
        auto& a = means[static_cast<std::size_t>(cfg.confusable_a)];
        auto& b = means[static_cast<std::size_t>(cfg.confusable_b)];
        std::vector<double> dir(a.size());
        double norm = 0.0;
        for (std::size_t i = 0; i < dir.size(); ++i) {
            dir[i] = rng.normal();
            norm += dir[i] * dir[i];
        }
        norm = std::sqrt(norm);
        const double dist = cfg.confusable_separation * cfg.cov_scale;
        for (std::size_t i = 0; i < dir.size(); ++i) b[i] = a[i] + dir[i] / norm * dist;
    }

    // Validation defaults to 5% of the train size, drawn as extra rows so the
    // train split keeps exactly train_per_class rows per class.
    int val_n = cfg.val_per_class;
    if (val_n == 0) val_n = std::max(1, static_cast<int>(std::lround(cfg.train_per_class * 0.05)));
    const int train_n = cfg.train_per_class;

    MixtureSplits out;
    for (LabeledDataset* ds : {&out.train, &out.val, &out.test}) {
        ds->input_dim = cfg.input_dim;
        ds->num_classes = cfg.num_classes;
        ds->seed = cfg.seed;
    }
    out.class_means = means;

    auto emit = [&](LabeledDataset& ds, int cls, int count) {
        const auto& mu = means[static_cast<std::size_t>(cls)];
        for (int k = 0; k < count; ++k) {
            for (int j = 0; j < cfg.input_dim; ++j)
                ds.features.push_back(mu[static_cast<std::size_t>(j)] + cfg.cov_scale * rng.normal());
            ds.labels.push_back(cls);
        }
    };
    for (int c = 0; c < cfg.num_classes; ++c) {
        emit(out.train, c, train_n);
        emit(out.val, c, val_n);
        emit(out.test, c, cfg.test_per_class);
    }
    out.train.validate();
    out.val.validate();
    out.test.validate();
    return out;
}

// Union of two datasets over a combined label space; b's labels are shifted
// by label_offset and the narrower feature space is zero-padded.
inline LabeledDataset concat_datasets(const LabeledDataset& a, const LabeledDataset& b,
                                      int label_offset) {
    if (label_offset < a.num_classes)
        throw std::invalid_argument("concat_datasets: offset " + std::to_string(label_offset) +
                                    " overlaps first dataset's labels (0.." +
                                    std::to_string(a.num_classes - 1) + ")");
    LabeledDataset out;
    out.input_dim = std::max(a.input_dim, b.input_dim);
    out.num_classes = label_offset + b.num_classes;
    out.seed = a.seed;
    out.labels.reserve(a.size() + b.size());
    out.features.reserve((a.size() + b.size()) * static_cast<std::size_t>(out.input_dim));
    auto append = [&](const LabeledDataset& src, int offset) {
        for (std::size_t i = 0; i < src.size(); ++i) {
            out.features.insert(out.features.end(), src.row(i), src.row(i) + src.input_dim);
            out.features.insert(out.features.end(),
                                static_cast<std::size_t>(out.input_dim - src.input_dim), 0.0);
            out.labels.push_back(src.labels[i] + offset);
        }
    };
    append(a, 0);
    append(b, label_offset);
    return out;
}

// ---------------------------------------------------------------------------
// Dataset file I/O
// ---------------------------------------------------------------------------

inline std::string serialize_dataset(const LabeledDataset& ds) {
    ds.validate();
    std::string out = "#amalgam-dataset v1 dim=" + std::to_string(ds.input_dim) +
                      " classes=" + std::to_string(ds.num_classes) + "\n";
    for (std::size_t i = 0; i < ds.size(); ++i) {
        out += std::to_string(ds.labels[i]);
        const double* r = ds.row(i);
        for (int j = 0; j < ds.input_dim; ++j) {
            out += ',';
            out += format_double(r[j]);
        }
        out += '\n';
    }
    return out;
}

inline LabeledDataset parse_dataset(std::string_view text, const std::string& origin) {
    std::vector<std::string> lines = split(text, '\n');
    if (!lines.empty() && lines.back().empty()) lines.pop_back();
    if (lines.empty()) throw std::runtime_error(origin + ":1: empty dataset file");

    LabeledDataset ds;
    {
        auto head = split(trim(lines[0]), ' ');
        if (head.size() != 4 || head[0] != "#amalgam-dataset" || head[1] != "v1" ||
            head[2].rfind("dim=", 0) != 0 || head[3].rfind("classes=", 0) != 0)
            throw std::runtime_error(origin + ":1: bad dataset header '" + lines[0] + "'");
        ds.input_dim = static_cast<int>(parse_long(head[2].substr(4), origin + " dim"));
        ds.num_classes = static_cast<int>(parse_long(head[3].substr(8), origin + " classes"));
    }
    for (std::size_t i = 1; i < lines.size(); ++i) {
        const auto fields = split(trim(lines[i]), ',');
        if (static_cast<int>(fields.size()) != ds.input_dim + 1)
            throw std::runtime_error(origin + ":" + std::to_string(i + 1) + ": expected " +
                                     std::to_string(ds.input_dim + 1) + " fields, got " +
                                     std::to_string(fields.size()));
        ds.labels.push_back(
            static_cast<int>(parse_long(fields[0], origin + ":" + std::to_string(i + 1))));
        for (int j = 0; j < ds.input_dim; ++j)
            ds.features.push_back(parse_double(fields[static_cast<std::size_t>(j) + 1],
                                               origin + ":" + std::to_string(i + 1)));
    }
    ds.validate();
    return ds;
}

inline void save_dataset(const std::filesystem::path& path, const LabeledDataset& ds) {
    write_text_file(path, serialize_dataset(ds));
}

inline LabeledDataset load_dataset(const std::filesystem::path& path) {
    return parse_dataset(read_text_file(path), path.string());
}

}  // namespace muka
