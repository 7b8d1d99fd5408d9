#pragma once

// Config-driven experiment runner. One config file drives the whole pipeline:
//
//   gen-data -> train-teachers -> amalgamate -> evaluate (+ probes, sweeps)
//
// Config format: named [section]s of key=value lines (see docs/config-schema.md
// for every key, default and unit). All stage outputs are deterministic given
// the config seeds; each stage directory gets a MANIFEST of content hashes,
// written last, so a directory without one is incomplete by definition.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "muka/amalgamation.hpp"
#include "muka/checkpoint.hpp"
#include "muka/dataset.hpp"
#include "muka/evaluation.hpp"
#include "muka/textio.hpp"
#include "muka/training.hpp"
#include "muka/uncertainty.hpp"

namespace muka {

namespace fs = std::filesystem;
using json = nlohmann::json;

// ---------------------------------------------------------------------------
// Config file parsing
// ---------------------------------------------------------------------------

class IniFile {
public:
    struct Entry {
        std::string value;
        int line = 0;
        mutable bool used = false;
    };

    static IniFile parse(std::string_view text, const std::string& origin) {
        IniFile ini;
        ini.origin_ = origin;
        std::string section;
        const auto lines = split(text, '\n');
        for (std::size_t i = 0; i < lines.size(); ++i) {
            const int line_no = static_cast<int>(i) + 1;
            std::string_view line = trim(lines[i]);
            if (line.empty() || line.front() == '#' || line.front() == ';') continue;
            if (line.front() == '[') {
                if (line.back() != ']')
                    throw std::runtime_error(origin + ":" + std::to_string(line_no) +
                                             ": unterminated section header");
                section = std::string(trim(line.substr(1, line.size() - 2)));
                if (section.empty())
                    throw std::runtime_error(origin + ":" + std::to_string(line_no) +
                                             ": empty section name");
                ini.sections_[section];  // sections may be empty
                continue;
            }
            const auto eq = line.find('=');
            if (eq == std::string_view::npos)
                throw std::runtime_error(origin + ":" + std::to_string(line_no) +
                                         ": expected key=value, got '" + std::string(line) + "'");
            std::string key(trim(line.substr(0, eq)));
            if (key.empty())
                throw std::runtime_error(origin + ":" + std::to_string(line_no) + ": empty key");
            if (section.empty())
                throw std::runtime_error(origin + ":" + std::to_string(line_no) + ": key '" + key +
                                         "' outside any [section]");
            auto& sec = ini.sections_[section];
            if (sec.count(key))
                throw std::runtime_error(origin + ":" + std::to_string(line_no) +
                                         ": duplicate key '" + key + "' in [" + section + "]");
            sec[key] = Entry{std::string(trim(line.substr(eq + 1))), line_no, false};
        }
        return ini;
    }

    bool has_section(const std::string& s) const { return sections_.count(s) > 0; }

    std::vector<std::string> section_names() const {
        std::vector<std::string> out;
        for (const auto& [name, _] : sections_) out.push_back(name);
        return out;
    }

    const Entry* find(const std::string& section, const std::string& key) const {
        auto s = sections_.find(section);
        if (s == sections_.end()) return nullptr;
        auto k = s->second.find(key);
        if (k == s->second.end()) return nullptr;
        k->second.used = true;
        return &k->second;
    }

    std::string get_str(const std::string& sec, const std::string& key,
                        const std::string& fallback) const {
        const Entry* e = find(sec, key);
        return e ? e->value : fallback;
    }

    long get_long(const std::string& sec, const std::string& key, long fallback) const {
        const Entry* e = find(sec, key);
        if (!e) return fallback;
        return parse_long(e->value, where(sec, key, e));
    }

    double get_double(const std::string& sec, const std::string& key, double fallback) const {
        const Entry* e = find(sec, key);
        if (!e) return fallback;
        return parse_double(e->value, where(sec, key, e));
    }

    bool get_bool(const std::string& sec, const std::string& key, bool fallback) const {
        const Entry* e = find(sec, key);
        if (!e) return fallback;
        if (e->value == "true" || e->value == "1") return true;
        if (e->value == "false" || e->value == "0") return false;
        throw std::runtime_error(where(sec, key, e) + ": expected true/false");
    }

    template <typename T>
    std::vector<T> get_int_list(const std::string& sec, const std::string& key,
                                const std::vector<T>& fallback) const {
        const Entry* e = find(sec, key);
        if (!e) return fallback;
        return parse_int_list<T>(e->value, where(sec, key, e));
    }

    // Strict mode: any key never read by the config loader is a config error.
    void check_all_used() const {
        for (const auto& [sec, entries] : sections_)
            for (const auto& [key, e] : entries)
                if (!e.used)
                    throw std::runtime_error(origin_ + ":" + std::to_string(e.line) +
                                             ": unknown key '" + key + "' in [" + sec + "]");
    }

    std::string where(const std::string& sec, const std::string& key, const Entry* e) const {
        return origin_ + ":" + std::to_string(e->line) + ": [" + sec + "] " + key;
    }

private:
    std::string origin_;
    std::map<std::string, std::map<std::string, Entry>> sections_;
};

// ---------------------------------------------------------------------------
// Experiment configuration
// ---------------------------------------------------------------------------

struct NetSetup {
    std::vector<int> hidden_dims{64};
    double dropout_rate = 0.1;
    Activation activation = Activation::relu;

    ModelSpec spec(int input_dim, int num_classes) const {
        ModelSpec s;
        s.input_dim = input_dim;
        s.hidden_dims = hidden_dims;
        s.num_classes = num_classes;
        s.dropout_rate = dropout_rate;
        s.activation = activation;
        return s;
    }
};

struct ExperimentConfig {
    // dataset
    std::string dataset_kind = "gaussian_mixture";  // or cross_mixture
    GaussianMixtureConfig mixture;
    GaussianMixtureConfig mixture_a, mixture_b;  // cross_mixture only
    // partition
    std::vector<int> subset_sizes{4, 4};
    std::uint64_t partition_seed = 11;
    // teachers
    NetSetup teacher_base;
    std::map<int, NetSetup> teacher_overrides;
    TrainConfig teacher_train;
    int overconfidence_epochs = 0;
    double overconfidence_lr = 5e-4;
    // oracle
    NetSetup oracle_setup;
    TrainConfig oracle_train;
    // amalgamation
    std::vector<Method> methods{Method::muka_hard, Method::muka_soft, Method::vanilla_kd};
    int mc_samples = 16;
    double mc_dropout = -1.0;  // < 0: use each teacher's own rate
    double tau = 0.2;
    bool reweighting = true;
    KlDirection kl_direction = KlDirection::forward;
    SupervisionSource supervision_source = SupervisionSource::deterministic_forward;
    NetSetup student_setup;
    TrainConfig student_train;
    // evaluation
    std::vector<std::string> probes{"supervision_quality", "uncertainty_histogram",
                                    "selection_error", "confusion_matrix", "ece"};
    int ece_bins = 10;
    std::string confusion_model = "oracle";
    // run
    std::vector<std::uint64_t> seeds{1, 2, 3};
    std::string out_dir = "runs/experiment";

    int union_size() const {
        return dataset_kind == "cross_mixture" ? mixture_a.num_classes + mixture_b.num_classes
                                               : mixture.num_classes;
    }

    int num_teachers() const { return static_cast<int>(subset_sizes.size()); }

    NetSetup teacher_setup(int i) const {
        auto it = teacher_overrides.find(i);
        return it != teacher_overrides.end() ? it->second : teacher_base;
    }

    MCConfig mc_config(std::uint64_t run_seed) const {
        MCConfig mc;
        mc.num_samples = mc_samples;
        if (mc_dropout >= 0.0) mc.dropout_override = mc_dropout;
        mc.base_seed = derive_key(run_seed, 0x6D63ULL);  // "mc"
        return mc;
    }

    void validate() const {
        if (seeds.empty()) throw std::runtime_error("ExperimentConfig: seeds must be non-empty");
        if (dataset_kind == "gaussian_mixture") {
            mixture.validate();
        } else if (dataset_kind == "cross_mixture") {
            mixture_a.validate();
            mixture_b.validate();
            if (subset_sizes.size() != 2)
                throw std::runtime_error("ExperimentConfig: cross_mixture implies 2 teachers");
        } else {
            throw std::runtime_error("ExperimentConfig: unknown dataset kind '" + dataset_kind + "'");
        }
        long total = 0;
        for (int s : subset_sizes) total += s;
        if (total != union_size())
            throw std::runtime_error("ExperimentConfig: subset sizes sum to " +
                                     std::to_string(total) + ", union size is " +
                                     std::to_string(union_size()));
        teacher_train.validate();
        oracle_train.validate();
        student_train.validate();
        if (methods.empty()) throw std::runtime_error("ExperimentConfig: no amalgamation methods");
    }
};

namespace detail {

inline GaussianMixtureConfig parse_mixture(const IniFile& ini, const std::string& sec,
                                           const GaussianMixtureConfig& base) {
    GaussianMixtureConfig m = base;
    m.num_classes = static_cast<int>(ini.get_long(sec, "num_classes", m.num_classes));
    m.input_dim = static_cast<int>(ini.get_long(sec, "input_dim", m.input_dim));
    m.mean_radius = ini.get_double(sec, "mean_radius", m.mean_radius);
    m.cov_scale = ini.get_double(sec, "cov_scale", m.cov_scale);
    m.train_per_class = static_cast<int>(ini.get_long(sec, "train_per_class", m.train_per_class));
    m.val_per_class = static_cast<int>(ini.get_long(sec, "val_per_class", m.val_per_class));
    m.test_per_class = static_cast<int>(ini.get_long(sec, "test_per_class", m.test_per_class));
    m.separation = ini.get_double(sec, "separation", m.separation);
    m.seed = static_cast<std::uint64_t>(ini.get_long(sec, "seed", static_cast<long>(m.seed)));
    m.confusable_a = static_cast<int>(ini.get_long(sec, "confusable_a", m.confusable_a));
    m.confusable_b = static_cast<int>(ini.get_long(sec, "confusable_b", m.confusable_b));
    m.confusable_separation =
        ini.get_double(sec, "confusable_separation", m.confusable_separation);
    return m;
}

inline NetSetup parse_net(const IniFile& ini, const std::string& sec, const NetSetup& base) {
    NetSetup n = base;
    n.hidden_dims = ini.get_int_list<int>(sec, "hidden_dims", n.hidden_dims);
    n.dropout_rate = ini.get_double(sec, "dropout_rate", n.dropout_rate);
    n.activation = activation_from_string(ini.get_str(sec, "activation", to_string(n.activation)));
    return n;
}

inline TrainConfig parse_train(const IniFile& ini, const std::string& sec, const TrainConfig& base,
                               const std::string& prefix = "") {
    TrainConfig t = base;
    t.epochs = static_cast<int>(ini.get_long(sec, prefix + "epochs", t.epochs));
    t.batch_size = static_cast<int>(ini.get_long(sec, prefix + "batch_size", t.batch_size));
    t.learning_rate = ini.get_double(sec, prefix + "learning_rate", t.learning_rate);
    t.optimizer =
        optimizer_from_string(ini.get_str(sec, prefix + "optimizer", to_string(t.optimizer)));
    t.eval_interval = static_cast<int>(ini.get_long(sec, prefix + "eval_interval", t.eval_interval));
    t.patience = static_cast<int>(ini.get_long(sec, prefix + "patience", t.patience));
    return t;
}

}  // namespace detail

inline ExperimentConfig parse_experiment_config(const fs::path& path) {
    const IniFile ini = IniFile::parse(read_text_file(path), path.string());
    ExperimentConfig cfg;

    cfg.dataset_kind = ini.get_str("dataset", "kind", cfg.dataset_kind);
    cfg.mixture = detail::parse_mixture(ini, "dataset", cfg.mixture);
    if (cfg.dataset_kind == "cross_mixture") {
        cfg.mixture_a = detail::parse_mixture(ini, "dataset.a", cfg.mixture);
        cfg.mixture_b = detail::parse_mixture(ini, "dataset.b", cfg.mixture);
    }

    cfg.subset_sizes = ini.get_int_list<int>("partition", "subset_sizes", cfg.subset_sizes);
    cfg.partition_seed = static_cast<std::uint64_t>(
        ini.get_long("partition", "seed", static_cast<long>(cfg.partition_seed)));
    if (cfg.dataset_kind == "cross_mixture")
        cfg.subset_sizes = {cfg.mixture_a.num_classes, cfg.mixture_b.num_classes};

    cfg.teacher_base = detail::parse_net(ini, "teacher", cfg.teacher_base);
    cfg.teacher_train = detail::parse_train(ini, "teacher", cfg.teacher_train);
    cfg.overconfidence_epochs = static_cast<int>(
        ini.get_long("teacher", "overconfidence_epochs", cfg.overconfidence_epochs));
    cfg.overconfidence_lr = ini.get_double("teacher", "overconfidence_lr", cfg.overconfidence_lr);
    for (int i = 0; i < static_cast<int>(cfg.subset_sizes.size()); ++i) {
        const std::string sec = "teacher." + std::to_string(i);
        if (ini.has_section(sec))
            cfg.teacher_overrides[i] = detail::parse_net(ini, sec, cfg.teacher_base);
    }

    cfg.oracle_setup = detail::parse_net(ini, "oracle", cfg.teacher_base);
    cfg.oracle_train = detail::parse_train(ini, "oracle", cfg.teacher_train);

    {
        const std::string sec = "amalgamation";
        std::vector<std::string> names;
        for (Method m : cfg.methods) names.push_back(to_string(m));
        const std::string joined = ini.get_str(sec, "methods", join(names, ','));
        cfg.methods.clear();
        for (const auto& tok : split(joined, ','))
            cfg.methods.push_back(method_from_string(std::string(trim(tok))));
        cfg.mc_samples = static_cast<int>(ini.get_long(sec, "mc_samples", cfg.mc_samples));
        cfg.mc_dropout = ini.get_double(sec, "mc_dropout", cfg.mc_dropout);
        cfg.tau = ini.get_double(sec, "tau", cfg.tau);
        cfg.reweighting = ini.get_bool(sec, "reweighting", cfg.reweighting);
        const std::string dir = ini.get_str(sec, "kl_direction", "forward");
        if (dir != "forward" && dir != "reverse")
            throw std::runtime_error("config: kl_direction must be forward or reverse");
        cfg.kl_direction = dir == "forward" ? KlDirection::forward : KlDirection::reverse;
        const std::string src = ini.get_str(sec, "supervision_source", "deterministic_forward");
        if (src != "deterministic_forward" && src != "mc_average")
            throw std::runtime_error(
                "config: supervision_source must be deterministic_forward or mc_average");
        cfg.supervision_source = src == "deterministic_forward"
                                     ? SupervisionSource::deterministic_forward
                                     : SupervisionSource::mc_average;
        NetSetup student = cfg.teacher_base;
        student.hidden_dims =
            ini.get_int_list<int>(sec, "student_hidden_dims", student.hidden_dims);
        student.dropout_rate = ini.get_double(sec, "student_dropout_rate", student.dropout_rate);
        student.activation = activation_from_string(
            ini.get_str(sec, "student_activation", to_string(student.activation)));
        cfg.student_setup = student;
        cfg.student_train = detail::parse_train(ini, sec, cfg.teacher_train, "student_");
    }

    {
        std::string joined = ini.get_str("evaluation", "probes", join(cfg.probes, ','));
        cfg.probes.clear();
        if (!trim(joined).empty())
            for (const auto& tok : split(joined, ','))
                cfg.probes.push_back(std::string(trim(tok)));
        cfg.ece_bins = static_cast<int>(ini.get_long("evaluation", "ece_bins", cfg.ece_bins));
        cfg.confusion_model =
            ini.get_str("evaluation", "confusion_model", cfg.confusion_model);
    }

    cfg.seeds = ini.get_int_list<std::uint64_t>("run", "seeds", cfg.seeds);
    cfg.out_dir = ini.get_str("run", "out_dir", cfg.out_dir);

    ini.check_all_used();
    cfg.validate();
    return cfg;
}

// ---------------------------------------------------------------------------
// Output layout and manifests
// ---------------------------------------------------------------------------

struct ExperimentPaths {
    fs::path root;

    fs::path data_dir() const { return root / "data"; }
    fs::path seed_dir(std::uint64_t s) const { return root / ("seed_" + std::to_string(s)); }
    fs::path teachers_dir(std::uint64_t s) const { return seed_dir(s) / "teachers"; }
    fs::path students_dir(std::uint64_t s) const { return seed_dir(s) / "students"; }
    fs::path probes_dir(std::uint64_t s) const { return seed_dir(s) / "probes"; }
    fs::path teacher_ckpt(std::uint64_t s, int i) const {
        return teachers_dir(s) / ("teacher_" + std::to_string(i) + ".ckpt");
    }
    fs::path oracle_ckpt(std::uint64_t s) const { return teachers_dir(s) / "oracle.ckpt"; }
    fs::path student_ckpt(std::uint64_t s, Method m) const {
        return students_dir(s) / ("student_" + to_string(m) + ".ckpt");
    }
};

// MANIFEST: "#amalgam-manifest v1" then "<fnv1a-hex>  <relative path>" lines,
// sorted by path. Written after every other file of the stage.
inline void write_manifest(const fs::path& dir, const fs::path& rel_root) {
    std::vector<std::string> lines;
    for (auto it = fs::recursive_directory_iterator(dir);
         it != fs::recursive_directory_iterator(); ++it) {
        if (!it->is_regular_file()) continue;
        if (it->path().filename() == "MANIFEST" && it->path().parent_path() == dir) continue;
        const std::string rel = fs::relative(it->path(), rel_root).generic_string();
        lines.push_back(hex64(fnv1a(read_text_file(it->path()))) + "  " + rel);
    }
    std::sort(lines.begin(), lines.end(),
              [](const std::string& a, const std::string& b) { return a.substr(18) < b.substr(18); });
    std::string out = "#amalgam-manifest v1\n";
    for (const auto& l : lines) out += l + "\n";
    write_text_file(dir / "MANIFEST", out);
}

inline void begin_stage(const fs::path& dir) {
    fs::create_directories(dir);
    fs::remove(dir / "MANIFEST");  // never leave a stale completed-looking state
}

inline void require_manifest(const fs::path& dir, const std::string& stage_hint) {
    if (!fs::exists(dir / "MANIFEST"))
        throw std::runtime_error(dir.string() + " is missing or incomplete; run " + stage_hint +
                                 " first");
}

// ---------------------------------------------------------------------------
// Pipeline stages
// ---------------------------------------------------------------------------

struct DataBundle {
    LabeledDataset train, val, test;
    LabelPartition partition{};
};

inline DataBundle build_datasets(const ExperimentConfig& cfg) {
    DataBundle d;
    if (cfg.dataset_kind == "cross_mixture") {
        const MixtureSplits a = generate_gaussian_mixture(cfg.mixture_a);
        const MixtureSplits b = generate_gaussian_mixture(cfg.mixture_b);
        const int off = cfg.mixture_a.num_classes;
        d.train = concat_datasets(a.train, b.train, off);
        d.val = concat_datasets(a.val, b.val, off);
        d.test = concat_datasets(a.test, b.test, off);
        // cross-dataset teachers: one per source domain, contiguous ids
        std::vector<std::vector<int>> subsets(2);
        for (int y = 0; y < cfg.mixture_a.num_classes; ++y) subsets[0].push_back(y);
        for (int y = 0; y < cfg.mixture_b.num_classes; ++y) subsets[1].push_back(off + y);
        d.partition = LabelPartition::create(d.train.num_classes, std::move(subsets));
    } else {
        const MixtureSplits m = generate_gaussian_mixture(cfg.mixture);
        d.train = m.train;
        d.val = m.val;
        d.test = m.test;
        d.partition = partition_labels(cfg.mixture.num_classes, cfg.subset_sizes,
                                       cfg.partition_seed);
    }
    return d;
}

inline void run_gen_data(const ExperimentConfig& cfg, const ExperimentPaths& paths) {
    const DataBundle d = build_datasets(cfg);
    begin_stage(paths.data_dir());
    save_dataset(paths.data_dir() / "train.csv", d.train);
    save_dataset(paths.data_dir() / "val.csv", d.val);
    save_dataset(paths.data_dir() / "test.csv", d.test);
    std::string ptxt = "#amalgam-partition v1\nunion_size=" +
                       std::to_string(d.partition.union_size()) + "\nsubsets=" +
                       d.partition.describe() + "\n";
    write_text_file(paths.data_dir() / "partition.txt", ptxt);
    write_manifest(paths.data_dir(), paths.data_dir());
}

inline DataBundle load_data_bundle(const ExperimentPaths& paths) {
    require_manifest(paths.data_dir(), "gen-data");
    DataBundle d;
    d.train = load_dataset(paths.data_dir() / "train.csv");
    d.val = load_dataset(paths.data_dir() / "val.csv");
    d.test = load_dataset(paths.data_dir() / "test.csv");
    const auto lines = split(read_text_file(paths.data_dir() / "partition.txt"), '\n');
    if (lines.size() < 3 || trim(lines[0]) != "#amalgam-partition v1")
        throw std::runtime_error(paths.data_dir().string() + "/partition.txt:1: bad header");
    const std::string usz(trim(lines[1]));
    const std::string subs(trim(lines[2]));
    if (usz.rfind("union_size=", 0) != 0 || subs.rfind("subsets=", 0) != 0)
        throw std::runtime_error(paths.data_dir().string() + "/partition.txt: bad body");
    d.partition = LabelPartition::from_description(
        static_cast<int>(parse_long(usz.substr(11), "partition union_size")), subs.substr(8));
    return d;
}

// Per-replication-seed stream keys.
inline std::uint64_t teacher_seed(std::uint64_t run_seed, int teacher) {
    return derive_key(run_seed, 0x74656163ULL, static_cast<std::uint64_t>(teacher));  // "teac"
}
inline std::uint64_t oracle_seed(std::uint64_t run_seed) {
    return derive_key(run_seed, 0x6F726163ULL);  // "orac"
}
inline std::uint64_t student_seed(std::uint64_t run_seed, Method m) {
    return derive_key(run_seed, 0x73747564ULL, static_cast<std::uint64_t>(m));  // "stud"
}

inline json eval_records_json(const std::vector<EvalRecord>& evals) {
    json arr = json::array();
    for (const auto& e : evals)
        arr.push_back({{"step", e.step}, {"train_loss", e.train_loss},
                       {"val_accuracy", e.val_accuracy}});
    return arr;
}

inline void run_train_teachers(const ExperimentConfig& cfg, const ExperimentPaths& paths) {
    const DataBundle d = load_data_bundle(paths);
    for (const std::uint64_t seed : cfg.seeds) {
        begin_stage(paths.teachers_dir(seed));
        json log;
        for (int i = 0; i < d.partition.num_teachers(); ++i) {
            const LabeledDataset sub_train = restrict(d.train, d.partition, i);
            const LabeledDataset sub_val = restrict(d.val, d.partition, i);
            const NetSetup net = cfg.teacher_setup(i);
            const ModelSpec spec = net.spec(d.train.input_dim, d.partition.subset_size(i));
            TrainConfig tc = cfg.teacher_train;
            tc.seed = teacher_seed(seed, i);
            TrainedClassifier trained = train_classifier(spec, sub_train, sub_val, tc);
            if (cfg.overconfidence_epochs > 0) {
                TrainConfig oc = tc;
                oc.epochs = cfg.overconfidence_epochs;
                oc.learning_rate = cfg.overconfidence_lr;
                oc.patience = 0;
                oc.seed = derive_key(tc.seed, 0x6F766572ULL);  // "over"
                trained.params = continue_training(spec, std::move(trained.params), sub_train, oc);
            }
            TeacherModel teacher{spec, std::move(trained.params), i, d.partition.subset(i)};
            save_teacher(paths.teacher_ckpt(seed, i), teacher);
            log["teacher_" + std::to_string(i)] = {
                {"best_step", trained.log.best_step},
                {"best_val_accuracy", trained.log.best_val_accuracy},
                {"total_steps", trained.log.total_steps},
                {"train_fingerprint", hex64(trained.log.train_fingerprint)},
                {"restricted_rows", sub_train.size()},
                {"evals", eval_records_json(trained.log.evals)}};
        }
        {
            const ModelSpec spec = cfg.oracle_setup.spec(d.train.input_dim, d.train.num_classes);
            TrainConfig tc = cfg.oracle_train;
            tc.seed = oracle_seed(seed);
            const TrainedClassifier oracle = train_oracle(spec, d.train, d.val, tc);
            save_model(paths.oracle_ckpt(seed), oracle.spec, oracle.params);
            log["oracle"] = {{"best_step", oracle.log.best_step},
                             {"best_val_accuracy", oracle.log.best_val_accuracy},
                             {"total_steps", oracle.log.total_steps},
                             {"train_fingerprint", hex64(oracle.log.train_fingerprint)},
                             {"evals", eval_records_json(oracle.log.evals)}};
        }
        write_text_file(paths.teachers_dir(seed) / "logs.json", log.dump(2) + "\n");
        write_manifest(paths.teachers_dir(seed), paths.teachers_dir(seed));
    }
}

inline std::vector<TeacherModel> load_teachers(const ExperimentPaths& paths,
                                               std::uint64_t seed, int count) {
    require_manifest(paths.teachers_dir(seed), "train-teachers");
    std::vector<TeacherModel> out;
    for (int i = 0; i < count; ++i) out.push_back(load_teacher(paths.teacher_ckpt(seed, i)));
    return out;
}

inline AmalgamationConfig make_amalgamation_config(const ExperimentConfig& cfg, Method m,
                                                   std::uint64_t run_seed) {
    AmalgamationConfig ac;
    ac.method = m;
    ac.mc = cfg.mc_config(run_seed);
    ac.tau = cfg.tau;
    ac.reweighting = cfg.reweighting;
    ac.kl_direction = cfg.kl_direction;
    ac.supervision_source = cfg.supervision_source;
    ac.student = cfg.student_train;
    ac.student.seed = student_seed(run_seed, m);
    return ac;
}

inline void run_amalgamate(const ExperimentConfig& cfg, const ExperimentPaths& paths) {
    const DataBundle d = load_data_bundle(paths);
    const UnlabeledDataset transfer = strip_labels(d.train);
    for (const std::uint64_t seed : cfg.seeds) {
        const auto teachers = load_teachers(paths, seed, d.partition.num_teachers());
        begin_stage(paths.students_dir(seed));
        json log;
        for (const Method m : cfg.methods) {
            const AmalgamationConfig ac = make_amalgamation_config(cfg, m, seed);
            const ModelSpec sspec =
                cfg.student_setup.spec(d.train.input_dim, d.partition.union_size());
            const StudentModel student =
                amalgamate(teachers, transfer, d.val, d.partition, ac, sspec);
            save_model(paths.student_ckpt(seed, m), student.spec, student.params);
            log["student_" + to_string(m)] = {
                {"best_step", student.log.best_step},
                {"best_val_accuracy", student.log.best_val_accuracy},
                {"total_steps", student.log.total_steps},
                {"mean_v", student.log.mean_v},
                {"min_weight", student.log.min_weight},
                {"max_weight", student.log.max_weight},
                {"num_instances", student.log.num_instances},
                {"reweighting", ac.reweighting},
                {"evals", eval_records_json(student.log.evals)}};
        }
        write_text_file(paths.students_dir(seed) / "logs.json", log.dump(2) + "\n");
        write_manifest(paths.students_dir(seed), paths.students_dir(seed));
    }
}

// Accuracy of every persisted model on the test split:
// padded teachers, ensemble-argmax, each student, supervised oracle.
inline json run_evaluate(const ExperimentConfig& cfg, const ExperimentPaths& paths) {
    const DataBundle d = load_data_bundle(paths);
    std::map<std::string, std::vector<double>> per_seed;
    for (const std::uint64_t seed : cfg.seeds) {
        const auto teachers = load_teachers(paths, seed, d.partition.num_teachers());
        for (const auto& t : teachers) {
            const auto clf = make_padded_teacher(t, d.partition);
            per_seed[clf.name].push_back(accuracy(clf, d.test));
        }
        per_seed["ensemble"].push_back(
            accuracy(make_ensemble_classifier(teachers, d.partition), d.test));
        {
            const LoadedModel om = load_model(paths.oracle_ckpt(seed));
            per_seed["oracle"].push_back(
                accuracy(make_model_classifier("oracle", om.spec, om.params), d.test));
        }
        require_manifest(paths.students_dir(seed), "amalgamate");
        for (const Method m : cfg.methods) {
            const LoadedModel sm = load_model(paths.student_ckpt(seed, m));
            per_seed["student_" + to_string(m)].push_back(
                accuracy(make_model_classifier("student", sm.spec, sm.params), d.test));
        }
    }

    // schema: { model_name: {accuracy_mean, accuracy_std, per_seed: [...]} },
    // per_seed ordered like [run] seeds; std is the population deviation
    json out;
    for (const auto& [name, accs] : per_seed) {
        double mean = 0.0;
        for (double a : accs) mean += a;
        mean /= static_cast<double>(accs.size());
        double var = 0.0;
        for (double a : accs) var += (a - mean) * (a - mean);
        const double stdev = std::sqrt(var / static_cast<double>(accs.size()));
        out[name] = {{"accuracy_mean", mean}, {"accuracy_std", stdev}, {"per_seed", accs}};
    }
    write_text_file(paths.root / "metrics.json", out.dump(2) + "\n");
    write_manifest(paths.root, paths.root);
    return out;
}

// ---------------------------------------------------------------------------
// Probes
// ---------------------------------------------------------------------------

inline json probe_summary_json(const ProbeTable& table) {
    json agg;
    for (const auto& [k, v] : table.aggregates) agg[k] = v;
    return json{{"name", table.name}, {"num_records", table.rows.size()}, {"aggregates", agg}};
}

inline void write_probe(const fs::path& dir, const std::string& stem, const ProbeTable& table) {
    write_text_file(dir / (stem + ".csv"), table.csv());
    write_text_file(dir / (stem + ".json"), probe_summary_json(table).dump(2) + "\n");
}

// Per-mode CSV in the documented schema:
//   instance_id,teacher_id,u_normalized,is_correct_teacher
inline std::string histogram_mode_csv(const ProbeTable& table, int mode) {
    std::string out = "instance_id,teacher_id,u_normalized,is_correct_teacher\n";
    for (const auto& r : table.rows) {
        if (static_cast<int>(r[2]) != mode) continue;
        out += format_double(r[0]) + "," + format_double(r[1]) + "," + format_double(r[3]) + "," +
               format_double(r[4]) + "\n";
    }
    return out;
}

// Binned counts over [0,1] per (mode, correctness) group for external plotting.
inline std::string histogram_bins_csv(const ProbeTable& table, int num_bins) {
    std::string out = "mode,is_correct_teacher,bin_lo,bin_hi,count\n";
    const double width = 1.0 / num_bins;
    for (int mode = 0; mode <= 1; ++mode) {
        for (int correct = 0; correct <= 1; ++correct) {
            std::vector<long> counts(static_cast<std::size_t>(num_bins), 0);
            for (const auto& r : table.rows) {
                if (static_cast<int>(r[2]) != mode || static_cast<int>(r[4]) != correct) continue;
                const int b = std::min(num_bins - 1, static_cast<int>(r[3] * num_bins));
                counts[static_cast<std::size_t>(std::max(0, b))] += 1;
            }
            for (int b = 0; b < num_bins; ++b)
                out += std::string(mode ? "mc" : "single") + "," + std::to_string(correct) + "," +
                       format_double(b * width) + "," + format_double((b + 1) * width) + "," +
                       std::to_string(counts[static_cast<std::size_t>(b)]) + "\n";
        }
    }
    return out;
}

inline const std::vector<std::string>& known_probes() {
    static const std::vector<std::string> names{"supervision_quality", "uncertainty_histogram",
                                                "selection_error", "confusion_matrix", "ece"};
    return names;
}

inline void run_probe(const ExperimentConfig& cfg, const ExperimentPaths& paths,
                      const std::string& name) {
    if (std::find(known_probes().begin(), known_probes().end(), name) == known_probes().end())
        throw std::runtime_error("unknown probe '" + name + "'; available: " +
                                 join(known_probes(), ','));
    const DataBundle d = load_data_bundle(paths);
    const UnlabeledDataset transfer = strip_labels(d.train);
    for (const std::uint64_t seed : cfg.seeds) {
        const auto teachers = load_teachers(paths, seed, d.partition.num_teachers());
        const fs::path dir = paths.probes_dir(seed);
        fs::create_directories(dir);
        fs::remove(dir / "MANIFEST");
        const MCConfig mc = cfg.mc_config(seed);

        if (name == "supervision_quality") {
            const LoadedModel om = load_model(paths.oracle_ckpt(seed));
            const auto oracle = make_model_classifier("oracle", om.spec, om.params);
            AmalgamationConfig soft = make_amalgamation_config(cfg, Method::muka_soft, seed);
            const auto soft_targets = synthesize_targets(teachers, transfer, d.partition, soft);
            AmalgamationConfig vkd = make_amalgamation_config(cfg, Method::vanilla_kd, seed);
            const auto vkd_targets = synthesize_targets(teachers, transfer, d.partition, vkd);
            ProbeTable soft_table = supervision_quality(soft_targets, oracle, transfer);
            ProbeTable vkd_table = supervision_quality(vkd_targets, oracle, transfer);
            // vanilla KL restricted to the soft probe's v >= 0.5 instance set
            const std::size_t vcol = soft_table.column_index("v");
            const std::size_t klcol = vkd_table.column_index("kl");
            double sum = 0.0;
            long n = 0;
            for (std::size_t i = 0; i < soft_table.rows.size(); ++i) {
                if (soft_table.rows[i][vcol] < 0.5) continue;
                sum += vkd_table.rows[i][klcol];
                ++n;
            }
            vkd_table.aggregates["mean_kl_on_soft_v_ge"] = n > 0 ? sum / static_cast<double>(n) : 0.0;
            write_probe(dir, "supervision_quality_soft", soft_table);
            write_probe(dir, "supervision_quality_vanilla_kd", vkd_table);
            write_text_file(dir / "supervision_dump_soft.csv",
                            supervision_dump_csv(soft_targets, d.partition));
        } else if (name == "uncertainty_histogram") {
            const ProbeTable table = uncertainty_histogram(teachers, d.test, d.partition, mc);
            write_probe(dir, "uncertainty_histogram", table);
            write_text_file(dir / "uncertainty_histogram_single.csv", histogram_mode_csv(table, 0));
            write_text_file(dir / "uncertainty_histogram_mc.csv", histogram_mode_csv(table, 1));
            write_text_file(dir / "uncertainty_histogram_bins.csv", histogram_bins_csv(table, 50));
        } else if (name == "selection_error") {
            const ProbeTable table =
                selection_error_analysis(teachers, d.test, d.partition, mc, cfg.tau);
            write_probe(dir, "selection_error", table);
        } else if (name == "confusion_matrix") {
            UnionClassifier clf;
            if (cfg.confusion_model == "oracle") {
                const LoadedModel om = load_model(paths.oracle_ckpt(seed));
                clf = make_model_classifier("oracle", om.spec, om.params);
            } else if (cfg.confusion_model.rfind("student_", 0) == 0) {
                const Method m = method_from_string(cfg.confusion_model.substr(8));
                const LoadedModel sm = load_model(paths.student_ckpt(seed, m));
                clf = make_model_classifier(cfg.confusion_model, sm.spec, sm.params);
            } else {
                throw std::runtime_error("config: confusion_model must be oracle or student_<method>");
            }
            const auto matrix = confusion_matrix(clf, d.test);
            write_text_file(dir / "confusion_matrix.csv", confusion_csv(matrix));
            long total = 0, diag = 0;
            for (std::size_t r = 0; r < matrix.size(); ++r)
                for (std::size_t c = 0; c < matrix.size(); ++c) {
                    total += matrix[r][c];
                    if (r == c) diag += matrix[r][c];
                }
            json summary{{"name", "confusion_matrix"},
                         {"model", cfg.confusion_model},
                         {"total", total},
                         {"diagonal", diag},
                         {"accuracy", static_cast<double>(diag) / static_cast<double>(total)}};
            write_text_file(dir / "confusion_matrix.json", summary.dump(2) + "\n");
        } else if (name == "ece") {
            const ProbeTable table = teacher_ood_ece(teachers, d.test, d.partition, cfg.ece_bins);
            write_probe(dir, "ece", table);
        }
        write_manifest(dir, dir);
    }
}

// ---------------------------------------------------------------------------
// Sweeps
// ---------------------------------------------------------------------------

// tau sweep: retrains the muka_soft student per value.
// K sweep: retrains every configured MUKA student per value; K = 1 denotes the
// no-MC ablation (single deterministic pass, dropout disabled at assessment).
inline void run_sweep(const ExperimentConfig& cfg, const ExperimentPaths& paths,
                      const std::string& parameter, const std::vector<double>& values) {
    if (parameter != "tau" && parameter != "K")
        throw std::runtime_error("sweep parameter must be tau or K");
    const DataBundle d = load_data_bundle(paths);
    const UnlabeledDataset transfer = strip_labels(d.train);

    std::vector<Method> methods;
    if (parameter == "tau") {
        methods = {Method::muka_soft};
    } else {
        for (Method m : cfg.methods)
            if (m == Method::muka_hard || m == Method::muka_soft) methods.push_back(m);
        if (methods.empty()) methods = {Method::muka_hard, Method::muka_soft};
    }

    const fs::path dir = paths.root / ("sweep_" + parameter);
    begin_stage(dir);
    std::string csv = "parameter,value,seed,method,val_accuracy,test_accuracy\n";
    for (const double value : values) {
        for (const std::uint64_t seed : cfg.seeds) {
            const auto teachers = load_teachers(paths, seed, d.partition.num_teachers());
            for (const Method m : methods) {
                AmalgamationConfig ac = make_amalgamation_config(cfg, m, seed);
                if (parameter == "tau") {
                    ac.tau = value;
                } else {
                    ac.mc.num_samples = std::max(1, static_cast<int>(std::lround(value)));
                    if (ac.mc.num_samples == 1) ac.mc.dropout_override = 0.0;
                }
                const ModelSpec sspec =
                    cfg.student_setup.spec(d.train.input_dim, d.partition.union_size());
                const StudentModel student =
                    amalgamate(teachers, transfer, d.val, d.partition, ac, sspec);
                const double test_acc = accuracy(
                    make_model_classifier("student", student.spec, student.params), d.test);
                csv += parameter + "," + format_double(value) + "," + std::to_string(seed) + "," +
                       to_string(m) + "," + format_double(student.log.best_val_accuracy) + "," +
                       format_double(test_acc) + "\n";
            }
        }
    }
    write_text_file(dir / "sweep.csv", csv);
    write_manifest(dir, dir);
}

}  // namespace muka
