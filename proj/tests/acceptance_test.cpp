// Acceptance suite. Each criterion prints one line:
//
//   [ACCEPTANCE] C<n> <name>: PASS|FAIL (<seconds>s)
//
// Oracles here are independent re-implementations (finite differences,
// brute-force composition); they never call the library path they check.

#include <catch2/catch_amalgamated.hpp>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <numeric>

#include "muka/experiment.hpp"

using namespace muka;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
    return std::chrono::duration<double>(Clock::now() - start).count();
}

void report(int n, const std::string& name, bool pass, double secs) {
    std::printf("[ACCEPTANCE] C%d %s: %s (%.1fs)\n", n, name.c_str(), pass ? "PASS" : "FAIL",
                secs);
    std::fflush(stdout);
}

fs::path fresh_dir(const std::string& name) {
    const fs::path dir = fs::temp_directory_path() / name;
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

fs::path source_config() { return fs::path(MUKA_SOURCE_DIR) / "configs" / "paper_analog.ini"; }

// ---------------------------------------------------------------------------
// independent oracles
// ---------------------------------------------------------------------------

std::vector<double> fd_gradient(const ModelSpec& spec, ParameterSet params,
                                std::span<const double> x, const DropoutMask* mask,
                                std::span<const double> upstream, double h) {
    std::vector<double> grad(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
        const double saved = params.values[i];
        params.values[i] = saved + h;
        const auto lp = forward(spec, params, x, mask);
        params.values[i] = saved - h;
        const auto lm = forward(spec, params, x, mask);
        params.values[i] = saved;
        double fp = 0.0, fm = 0.0;
        for (std::size_t k = 0; k < upstream.size(); ++k) {
            fp += lp[k] * upstream[k];
            fm += lm[k] * upstream[k];
        }
        grad[i] = (fp - fm) / (2.0 * h);
    }
    return grad;
}

double max_rel_err(std::span<const double> a, std::span<const double> b) {
    double worst = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double denom = std::max({std::abs(a[i]), std::abs(b[i]), 1e-3});
        worst = std::max(worst, std::abs(a[i] - b[i]) / denom);
    }
    return worst;
}

std::vector<double> oracle_softmax(const std::vector<double>& z) {
    double m = z[0];
    for (double v : z) m = std::max(m, v);
    std::vector<double> e(z.size());
    double s = 0.0;
    for (std::size_t i = 0; i < z.size(); ++i) {
        e[i] = std::exp(z[i] - m);
        s += e[i];
    }
    for (double& v : e) v /= s;
    return e;
}

struct RandomCase {
    LabelPartition partition{};
    std::vector<double> c;
    std::vector<std::vector<double>> dists;  // local-space probabilities
    double tau = 0.2;
};

RandomCase random_case(Rng& rng, double tau_lo, double tau_hi) {
    RandomCase rc;
    const int n = 1 + static_cast<int>(rng.below(5));  // N <= 5
    std::vector<std::vector<int>> subsets;
    int next = 0;
    for (int i = 0; i < n; ++i) {
        const int k = 2 + static_cast<int>(rng.below(5));  // |Y_i| <= 6
        std::vector<int> cls;
        for (int j = 0; j < k; ++j) cls.push_back(next++);
        subsets.push_back(cls);
    }
    std::vector<int> perm(static_cast<std::size_t>(next));
    std::iota(perm.begin(), perm.end(), 0);
    rng.shuffle(perm);
    std::size_t cursor = 0;
    for (auto& sub : subsets)
        for (auto& u : sub) u = perm[cursor++];
    rc.partition = LabelPartition::create(next, subsets);
    rc.c.resize(static_cast<std::size_t>(n));
    for (double& v : rc.c) v = rng.uniform(0.0, 1.0);
    for (int i = 0; i < n; ++i) {
        std::vector<double> z(static_cast<std::size_t>(rc.partition.subset_size(i)));
        for (double& v : z) v = rng.uniform(-4.0, 4.0);
        rc.dists.push_back(oracle_softmax(z));
    }
    rc.tau = rng.uniform(tau_lo, tau_hi);
    return rc;
}

UncertaintyReport report_of(const RandomCase& rc) {
    UncertaintyReport rep;
    rep.c = rc.c;
    rep.w = rc.c.size() == 1 ? std::vector<double>{1.0} : soft_weights(rc.c, rc.tau);
    rep.selected = static_cast<int>(argmax_index(rc.c));
    rep.c_max = rc.c[static_cast<std::size_t>(rep.selected)];
    rep.c_sec = 0.0;
    for (std::size_t i = 0; i < rc.c.size(); ++i)
        if (static_cast<int>(i) != rep.selected) rep.c_sec = std::max(rep.c_sec, rc.c[i]);
    rep.v = margin_weight(rc.c);
    return rep;
}

std::vector<ProbDist> as_dists(const RandomCase& rc) {
    std::vector<ProbDist> out;
    for (const auto& d : rc.dists) out.push_back(ProbDist{d, ""});
    return out;
}

// ---------------------------------------------------------------------------
// shared paper-analog pipeline artifacts (built once, reused by C4/C7/C8/C10)
// ---------------------------------------------------------------------------

struct PipelineRun {
    ExperimentConfig cfg;
    ExperimentPaths paths{fs::path()};
    json metrics;
    std::string root_manifest;
};

const PipelineRun& paper_analog_run() {
    static const PipelineRun run = [] {
        PipelineRun r;
        r.cfg = parse_experiment_config(source_config());
        const fs::path out = fresh_dir("muka_acceptance_analog");
        r.cfg.out_dir = out.generic_string();
        r.paths = ExperimentPaths{out};
        run_gen_data(r.cfg, r.paths);
        run_train_teachers(r.cfg, r.paths);
        run_amalgamate(r.cfg, r.paths);
        r.metrics = run_evaluate(r.cfg, r.paths);
        r.root_manifest = read_text_file(out / "MANIFEST");
        return r;
    }();
    return run;
}

double mean_of(const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
}

// Train one student directly from in-memory artifacts; returns test accuracy.
double student_accuracy(const std::vector<TeacherModel>& teachers, const DataBundle& d,
                        Method method, const AmalgamationConfig& cfg, const ModelSpec& sspec) {
    AmalgamationConfig ac = cfg;
    ac.method = method;
    const StudentModel s = amalgamate(teachers, strip_labels(d.train), d.val, d.partition, ac,
                                      sspec);
    return accuracy(make_model_classifier("student", s.spec, s.params), d.test);
}

}  // namespace

TEST_CASE("criterion 1: gradient correctness") {
    const auto start = Clock::now();
    Rng rng(1001);
    bool ok = true;

    // backward vs central differences, h = 1e-5, 100 randomized cases.
    // Inputs whose relu pre-activations sit near the kink are resampled: the
    // difference quotient is not a valid derivative oracle there.
    for (int it = 0; it < 100 && ok; ++it) {
        ModelSpec spec;
        spec.input_dim = 2 + static_cast<int>(rng.below(5));
        spec.hidden_dims = {2 + static_cast<int>(rng.below(6)), 2 + static_cast<int>(rng.below(6))};
        spec.num_classes = 2 + static_cast<int>(rng.below(4));
        spec.activation = it % 2 == 0 ? Activation::tanh : Activation::relu;
        spec.dropout_rate = it % 4 == 0 ? 0.25 : 0.0;
        auto params = init_parameters(spec, 4000 + static_cast<std::uint64_t>(it));
        for (const auto& b : params.layout.bias)
            for (std::size_t i = 0; i < b.count(); ++i)
                params.values[b.offset + i] = rng.uniform(0.05, 0.2);
        std::vector<double> up(static_cast<std::size_t>(spec.num_classes));
        for (double& v : up) v = rng.uniform(-1.0, 1.0);
        DropoutMask mask;
        const DropoutMask* mp = nullptr;
        if (spec.dropout_rate > 0.0) {
            Rng mrng(rng.next_u64());
            mask = sample_dropout_mask(spec, mrng);
            mp = &mask;
        }
        std::vector<double> x(static_cast<std::size_t>(spec.input_dim));
        for (int tries = 0; tries < 50; ++tries) {
            for (double& v : x) v = rng.uniform(-2.0, 2.0);
            const auto trace = detail::run_forward(spec, params, x, mp);
            double closest = 1.0;
            for (std::size_t l = 0; l + 1 < trace.pre.size(); ++l)
                for (double z : trace.pre[l]) closest = std::min(closest, std::abs(z));
            if (spec.activation != Activation::relu || closest > 1e-3) break;
        }
        const auto analytic = backward(spec, params, x, mp, up);
        const auto fd = fd_gradient(spec, params, x, mp, up, 1e-5);
        if (max_rel_err(analytic, fd) >= 1e-4) ok = false;
    }

    // uhc_loss gradient vs central differences, 100 randomized cases
    for (int it = 0; it < 100 && ok; ++it) {
        const RandomCase rc = random_case(rng, 0.1, 2.0);
        if (rc.partition.num_teachers() < 1) continue;
        std::vector<double> logits(static_cast<std::size_t>(rc.partition.union_size()));
        for (double& v : logits) v = rng.uniform(-3.0, 3.0);
        const auto got = uhc_loss(logits, as_dists(rc), rc.partition);
        const double h = 1e-5;
        for (std::size_t j = 0; j < logits.size() && ok; ++j) {
            auto p = logits, m = logits;
            p[j] += h;
            m[j] -= h;
            const double fd = (uhc_loss(p, as_dists(rc), rc.partition).loss -
                               uhc_loss(m, as_dists(rc), rc.partition).loss) /
                              (2.0 * h);
            const double denom = std::max({std::abs(fd), std::abs(got.grad_logits[j]), 1e-3});
            if (std::abs(fd - got.grad_logits[j]) / denom >= 1e-4) ok = false;
        }
    }

    const double secs = seconds_since(start);
    const bool pass = ok && secs < 10.0;
    report(1, "gradient correctness", pass, secs);
    REQUIRE(pass);
}

TEST_CASE("criterion 2: supervision-synthesis oracle equivalence") {
    const auto start = Clock::now();
    Rng rng(2002);
    bool ok = true;
    for (int it = 0; it < 1000 && ok; ++it) {
        const RandomCase rc = random_case(rng, 0.05, 3.0);
        const auto rep = report_of(rc);
        const auto soft = synthesize_soft(rep, as_dists(rc), rc.partition);

        // brute-force composition: softmax weights x padded distributions
        const std::size_t n = rc.c.size();
        std::vector<double> w(n, 1.0);
        if (n > 1) {
            std::vector<double> scaled(n);
            for (std::size_t i = 0; i < n; ++i) scaled[i] = rc.c[i] / rc.tau;
            w = oracle_softmax(scaled);
        }
        std::vector<double> want(static_cast<std::size_t>(rc.partition.union_size()), 0.0);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < rc.dists[i].size(); ++j)
                want[static_cast<std::size_t>(rc.partition.union_index(
                    static_cast<int>(i), static_cast<int>(j)))] += w[i] * rc.dists[i][j];
        for (std::size_t y = 0; y < want.size(); ++y)
            if (std::abs(soft.dist.values[y] - want[y]) >= 1e-10) ok = false;

        // hard target: selection and support verified exhaustively
        const auto hard = synthesize_hard(rep, as_dists(rc), rc.partition);
        std::size_t best = 0;
        for (std::size_t i = 1; i < n; ++i)
            if (rc.c[i] > rc.c[best]) best = i;
        if (hard.selected != static_cast<int>(best)) ok = false;
        std::vector<bool> in_subset(static_cast<std::size_t>(rc.partition.union_size()), false);
        for (int u : rc.partition.subset(hard.selected)) in_subset[static_cast<std::size_t>(u)] = true;
        for (std::size_t y = 0; y < hard.dist.size(); ++y) {
            if (!in_subset[y] && hard.dist.values[y] != 0.0) ok = false;
            if (in_subset[y]) {
                const int local = rc.partition.local_index(hard.selected, static_cast<int>(y));
                if (hard.dist.values[y] != rc.dists[best][static_cast<std::size_t>(local)]) ok = false;
            }
        }
    }
    const double secs = seconds_since(start);
    const bool pass = ok && secs < 10.0;
    report(2, "supervision-synthesis oracle equivalence", pass, secs);
    REQUIRE(pass);
}

TEST_CASE("criterion 3: hard/soft limit at tau = 1e-3") {
    const auto start = Clock::now();
    Rng rng(3003);
    bool ok = true;
    int checked = 0;
    while (checked < 1000) {
        RandomCase rc = random_case(rng, 0.1, 1.0);
        if (rc.partition.num_teachers() < 2) continue;
        rc.tau = 1e-3;
        const auto rep = report_of(rc);
        if (rep.v < 0.01) continue;
        ++checked;
        const auto soft = synthesize_soft(rep, as_dists(rc), rc.partition);
        const auto hard = synthesize_hard(rep, as_dists(rc), rc.partition);
        // maximal teacher block of the soft target
        int best_block = -1;
        double best_mass = -1.0;
        for (int i = 0; i < rc.partition.num_teachers(); ++i) {
            double mass = 0.0;
            for (int u : rc.partition.subset(i))
                mass += soft.dist.values[static_cast<std::size_t>(u)];
            if (mass > best_mass) {
                best_mass = mass;
                best_block = i;
            }
        }
        if (best_block != hard.selected) ok = false;
    }
    const double secs = seconds_since(start);
    const bool pass = ok && secs < 10.0;
    report(3, "hard/soft limit", pass, secs);
    REQUIRE(pass);
}

TEST_CASE("criterion 4: paper-analog two-teacher experiment") {
    const auto start = Clock::now();
    const PipelineRun& run = paper_analog_run();
    const json& models = run.metrics;

    const double oracle = models["oracle"]["accuracy_mean"];
    const double t0 = models["teacher_0"]["accuracy_mean"];
    const double t1 = models["teacher_1"]["accuracy_mean"];
    const double hard = models["student_muka_hard"]["accuracy_mean"];
    const double soft = models["student_muka_soft"]["accuracy_mean"];
    const double vkd = models["student_vanilla_kd"]["accuracy_mean"];

    const bool oracle_ok = oracle >= 0.95;
    const bool teachers_ok = std::abs(t0 - 0.5) <= 0.05 && std::abs(t1 - 0.5) <= 0.05;
    const bool beats_vkd = hard > vkd && soft > vkd;
    const bool near_oracle = hard >= oracle - 0.05 && soft >= oracle - 0.05;

    const double secs = seconds_since(start);
    const bool pass = oracle_ok && teachers_ok && beats_vkd && near_oracle && secs < 300.0;
    std::printf("    oracle=%.4f teachers=(%.4f, %.4f) hard=%.4f soft=%.4f vkd=%.4f\n", oracle,
                t0, t1, hard, soft, vkd);
    report(4, "paper-analog two-teacher experiment", pass, secs);
    REQUIRE(pass);
}

TEST_CASE("criterion 5: MC-dropout ablation on the overconfidence scenario") {
    const auto start = Clock::now();

    GaussianMixtureConfig gm;
    gm.num_classes = 8;
    gm.input_dim = 32;
    gm.mean_radius = 10.0;
    gm.cov_scale = 1.0;
    gm.train_per_class = 120;
    gm.test_per_class = 40;
    gm.separation = 6.0;
    gm.seed = 23;

    NetSetup net;
    net.hidden_dims = {64, 64};
    net.dropout_rate = 0.1;

    std::vector<double> sel_mc, sel_single, sep_mc, sep_single, ood_ece;
    for (const std::uint64_t seed : {1ull, 2ull, 3ull}) {
        const MixtureSplits splits = generate_gaussian_mixture(gm);
        const LabelPartition part = partition_labels(8, {4, 4}, 5);
        std::vector<TeacherModel> teachers;
        for (int i = 0; i < 2; ++i) {
            const ModelSpec spec = net.spec(gm.input_dim, 4);
            TrainConfig tc;
            tc.epochs = 20;
            tc.learning_rate = 0.002;
            tc.eval_interval = 10;
            tc.seed = teacher_seed(seed, i);
            TrainedClassifier t = train_classifier(spec, restrict(splits.train, part, i),
                                                   restrict(splits.val, part, i), tc);
            // overconfidence knob: extra epochs saturate the softmax,
            // reproducing the high-ECE condition where single-pass entropy
            // carries no signal
            TrainConfig oc = tc;
            oc.epochs = 300;
            oc.learning_rate = 0.02;
            oc.seed = derive_key(tc.seed, 0x6F76ULL);
            t.params = continue_training(spec, std::move(t.params),
                                         restrict(splits.train, part, i), oc);
            teachers.push_back(TeacherModel{spec, std::move(t.params), i, part.subset(i)});
        }
        ood_ece.push_back(
            teacher_ood_ece(teachers, splits.test, part, 10).aggregates.at("mean_ood_ece"));

        MCConfig mc;
        mc.num_samples = 16;
        mc.base_seed = derive_key(seed, 0x6D63ULL);
        const auto probe_mc = selection_error_analysis(teachers, splits.test, part, mc, 0.2);
        MCConfig single = mc;
        single.num_samples = 1;
        single.dropout_override = 0.0;
        const auto probe_single = selection_error_analysis(teachers, splits.test, part, single, 0.2);
        sel_mc.push_back(probe_mc.aggregates.at("selection_accuracy"));
        sel_single.push_back(probe_single.aggregates.at("selection_accuracy"));

        const auto hist = uncertainty_histogram(teachers, splits.test, part, mc);
        sep_mc.push_back(hist.aggregates.at("separation_mc"));
        sep_single.push_back(hist.aggregates.at("separation_single"));
    }

    const double mc_acc = mean_of(sel_mc), single_acc = mean_of(sel_single);
    const double gap = mc_acc - single_acc;
    const bool selection_ok = gap >= 0.02;
    const bool separation_ok = mean_of(sep_mc) > mean_of(sep_single);
    const double secs = seconds_since(start);
    const bool pass = selection_ok && separation_ok;
    std::printf(
        "    selection: MC=%.4f single=%.4f gap=%.4f | separation: MC=%.4f single=%.4f | "
        "teacher OOD ECE=%.3f\n",
        mc_acc, single_acc, gap, mean_of(sep_mc), mean_of(sep_single), mean_of(ood_ece));
    report(5, "MC-dropout ablation", pass, secs);
    REQUIRE(pass);
}

TEST_CASE("criterion 6: instance re-weighting ablation on the confusable-pair scenario") {
    const auto start = Clock::now();

    GaussianMixtureConfig gm;
    gm.num_classes = 8;
    gm.input_dim = 16;
    gm.mean_radius = 8.0;
    gm.train_per_class = 100;
    gm.test_per_class = 40;
    gm.separation = 5.0;
    gm.seed = 29;
    gm.confusable_a = 0;  // in teacher 0's subset
    gm.confusable_b = 4;  // in teacher 1's subset
    gm.confusable_separation = 1.5;

    // fixed partition so the confusable pair spans the two specialties
    const auto part = LabelPartition::create(8, {{0, 1, 2, 3}, {4, 5, 6, 7}});

    NetSetup net;
    net.hidden_dims = {64, 64};
    net.dropout_rate = 0.1;

    std::vector<double> with_rw, without_rw;
    for (const std::uint64_t seed : {1ull, 2ull, 3ull}) {
        const MixtureSplits splits = generate_gaussian_mixture(gm);
        DataBundle d{splits.train, splits.val, splits.test, part};
        std::vector<TeacherModel> teachers;
        for (int i = 0; i < 2; ++i) {
            const ModelSpec spec = net.spec(gm.input_dim, 4);
            TrainConfig tc;
            tc.epochs = 20;
            tc.learning_rate = 0.002;
            tc.eval_interval = 10;
            tc.seed = teacher_seed(seed, i);
            TrainedClassifier t = train_classifier(spec, restrict(d.train, part, i),
                                                   restrict(d.val, part, i), tc);
            teachers.push_back(TeacherModel{spec, std::move(t.params), i, part.subset(i)});
        }
        AmalgamationConfig ac;
        ac.method = Method::muka_hard;
        ac.mc.num_samples = 16;
        ac.mc.base_seed = derive_key(seed, 0x6D63ULL);
        ac.tau = 0.2;
        ac.student.epochs = 40;
        ac.student.learning_rate = 0.005;
        ac.student.eval_interval = 100;
        ac.student.seed = student_seed(seed, Method::muka_hard);
        const ModelSpec sspec = net.spec(gm.input_dim, 8);

        ac.reweighting = true;
        with_rw.push_back(student_accuracy(teachers, d, Method::muka_hard, ac, sspec));
        ac.reweighting = false;
        without_rw.push_back(student_accuracy(teachers, d, Method::muka_hard, ac, sspec));
    }

    const double with_mean = mean_of(with_rw), without_mean = mean_of(without_rw);
    const double secs = seconds_since(start);
    const bool pass = with_mean >= without_mean;  // directional; ties pass
    std::printf("    reweighting=%.4f plain=%.4f\n", with_mean, without_mean);
    report(6, "re-weighting ablation", pass, secs);
    REQUIRE(pass);
}

TEST_CASE("criterion 7: supervision-quality probe") {
    const auto start = Clock::now();
    const PipelineRun& run = paper_analog_run();
    run_probe(run.cfg, run.paths, "supervision_quality");

    std::vector<double> soft_kl, vkd_kl;
    for (const std::uint64_t seed : run.cfg.seeds) {
        const json soft = json::parse(
            read_text_file(run.paths.probes_dir(seed) / "supervision_quality_soft.json"));
        const json vkd = json::parse(
            read_text_file(run.paths.probes_dir(seed) / "supervision_quality_vanilla_kd.json"));
        soft_kl.push_back(soft["aggregates"]["mean_kl_v_ge"]);
        vkd_kl.push_back(vkd["aggregates"]["mean_kl_on_soft_v_ge"]);
    }
    const double soft_mean = mean_of(soft_kl), vkd_mean = mean_of(vkd_kl);
    const double secs = seconds_since(start);
    const bool pass = soft_mean < vkd_mean;
    std::printf("    KL-to-oracle on v>=0.5: soft=%.4f vanilla=%.4f\n", soft_mean, vkd_mean);
    report(7, "supervision-quality probe", pass, secs);
    REQUIRE(pass);
}

TEST_CASE("criterion 8: tau sweep") {
    const auto start = Clock::now();
    const PipelineRun& run = paper_analog_run();
    const std::vector<double> values{0.01, 0.1, 0.2, 0.5, 1.0, 2.0, 5.0, 10.0};
    run_sweep(run.cfg, run.paths, "tau", values);

    const std::string csv = read_text_file(run.paths.root / "sweep_tau" / "sweep.csv");
    const auto lines = split(csv, '\n');
    // per-seed accuracy at tau = 0.2 and tau = 10
    std::map<std::uint64_t, std::map<double, double>> acc;
    std::set<double> seen_values;
    for (std::size_t i = 1; i < lines.size(); ++i) {
        if (trim(lines[i]).empty()) continue;
        const auto f = split(lines[i], ',');
        const double value = parse_double(f[1], "sweep value");
        const std::uint64_t seed = static_cast<std::uint64_t>(parse_long(f[2], "sweep seed"));
        acc[seed][value] = parse_double(f[5], "sweep accuracy");
        seen_values.insert(value);
    }
    bool all_values = true;
    for (double v : values) all_values = all_values && seen_values.count(v) > 0;
    bool per_seed_ok = true;
    for (const std::uint64_t seed : run.cfg.seeds) {
        if (acc[seed][0.2] < acc[seed][10.0]) per_seed_ok = false;
        std::printf("    seed %llu: acc(0.2)=%.4f acc(10)=%.4f\n",
                    static_cast<unsigned long long>(seed), acc[seed][0.2], acc[seed][10.0]);
    }
    const double secs = seconds_since(start);
    const bool pass = all_values && per_seed_ok;
    report(8, "tau sweep", pass, secs);
    REQUIRE(pass);
}

TEST_CASE("criterion 9: multi-teacher generalization") {
    const auto start = Clock::now();

    GaussianMixtureConfig gm;
    gm.num_classes = 10;
    gm.input_dim = 32;
    gm.mean_radius = 10.0;
    gm.train_per_class = 100;
    gm.test_per_class = 30;
    gm.separation = 6.0;
    gm.seed = 37;

    NetSetup net;
    net.hidden_dims = {64, 64};
    net.dropout_rate = 0.1;

    const std::vector<std::vector<int>> split_sets{{3, 3, 4}, {2, 2, 2, 4}, {2, 2, 2, 2, 2}};
    std::map<std::string, double> hard_mean, vkd_mean;
    bool per_split_ok = true;
    for (const auto& sizes : split_sets) {
        std::vector<std::string> parts;
        for (int s : sizes) parts.push_back(std::to_string(s));
        const std::string tag = join(parts, ',');
        std::vector<double> hard_accs, vkd_accs;
        for (const std::uint64_t seed : {1ull, 2ull, 3ull}) {
            const MixtureSplits splits = generate_gaussian_mixture(gm);
            const LabelPartition part = partition_labels(10, sizes, 51);
            DataBundle d{splits.train, splits.val, splits.test, part};
            std::vector<TeacherModel> teachers;
            for (int i = 0; i < part.num_teachers(); ++i) {
                const ModelSpec spec = net.spec(gm.input_dim, part.subset_size(i));
                TrainConfig tc;
                tc.epochs = 20;
                tc.learning_rate = 0.002;
                tc.eval_interval = 10;
                tc.seed = teacher_seed(seed, i);
                TrainedClassifier t = train_classifier(spec, restrict(d.train, part, i),
                                                       restrict(d.val, part, i), tc);
                teachers.push_back(TeacherModel{spec, std::move(t.params), i, part.subset(i)});
            }
            AmalgamationConfig ac;
            ac.mc.num_samples = 16;
            ac.mc.base_seed = derive_key(seed, 0x6D63ULL);
            ac.tau = 0.2;
            ac.student.epochs = 40;
            ac.student.learning_rate = 0.005;
            ac.student.eval_interval = 100;
            const ModelSpec sspec = net.spec(gm.input_dim, 10);
            ac.student.seed = student_seed(seed, Method::muka_hard);
            hard_accs.push_back(student_accuracy(teachers, d, Method::muka_hard, ac, sspec));
            ac.student.seed = student_seed(seed, Method::vanilla_kd);
            vkd_accs.push_back(student_accuracy(teachers, d, Method::vanilla_kd, ac, sspec));
        }
        hard_mean[tag] = mean_of(hard_accs);
        vkd_mean[tag] = mean_of(vkd_accs);
        if (hard_mean[tag] < vkd_mean[tag]) per_split_ok = false;
        std::printf("    split {%s}: hard=%.4f vanilla=%.4f\n", tag.c_str(), hard_mean[tag],
                    vkd_mean[tag]);
    }

    const double gap_mixed = hard_mean["2,2,2,4"] - vkd_mean["2,2,2,4"];
    const double gap_balanced = hard_mean["3,3,4"] - vkd_mean["3,3,4"];
    const bool gap_ordering = gap_mixed >= gap_balanced;
    json rep{{"gap_mixed_sizes", gap_mixed},
             {"gap_balanced_sizes", gap_balanced},
             {"gap_ordering_deviation", !gap_ordering}};
    write_text_file(fresh_dir("muka_acceptance_c9") / "multi_teacher_report.json",
                    rep.dump(2) + "\n");
    if (!gap_ordering)
        std::printf("    note: gap ordering deviates (mixed=%.4f < balanced=%.4f); flagged\n",
                    gap_mixed, gap_balanced);

    const double secs = seconds_since(start);
    const bool pass = per_split_ok;  // gap ordering is reported, deviation flagged
    report(9, "multi-teacher generalization", pass, secs);
    REQUIRE(pass);
}

TEST_CASE("criterion 10: pipeline determinism") {
    const auto start = Clock::now();
    const PipelineRun& first = paper_analog_run();

    ExperimentConfig cfg = parse_experiment_config(source_config());
    const fs::path out = fresh_dir("muka_acceptance_rerun");
    cfg.out_dir = out.generic_string();
    const ExperimentPaths paths{out};
    run_gen_data(cfg, paths);
    run_train_teachers(cfg, paths);
    run_amalgamate(cfg, paths);
    run_evaluate(cfg, paths);

    const std::string manifest = read_text_file(out / "MANIFEST");
    const bool pass = manifest == first.root_manifest && !manifest.empty();
    const double secs = seconds_since(start);
    report(10, "pipeline determinism", pass, secs);
    REQUIRE(pass);
}

TEST_CASE("criterion 11: invariant suite") {
    const auto start = Clock::now();
    Rng rng(1111);
    bool ok = true;

    // distribution validity + pad support + c/v/w ranges over random cases
    for (int it = 0; it < 300 && ok; ++it) {
        const RandomCase rc = random_case(rng, 0.05, 5.0);
        const auto rep = report_of(rc);
        double wsum = 0.0;
        for (std::size_t i = 0; i < rep.w.size(); ++i) {
            if (rep.c[i] < 0.0 || rep.c[i] > 1.0) ok = false;
            wsum += rep.w[i];
        }
        if (std::abs(wsum - 1.0) > 1e-9) ok = false;
        if (rep.v < 0.0 || rep.v > 1.0) ok = false;
        const auto soft = synthesize_soft(rep, as_dists(rc), rc.partition);
        const auto hard = synthesize_hard(rep, as_dists(rc), rc.partition);
        if (!is_valid_prob(soft.dist) || !is_valid_prob(hard.dist)) ok = false;
        for (int u = 0; u < rc.partition.union_size(); ++u)
            if (rc.partition.owner_of(u) != hard.selected &&
                hard.dist.values[static_cast<std::size_t>(u)] != 0.0)
                ok = false;
    }

    // MC rate-0 equality and permutation equivariance on small nets
    for (int it = 0; it < 10 && ok; ++it) {
        ModelSpec spec;
        spec.input_dim = 4;
        spec.hidden_dims = {8};
        spec.num_classes = 3;
        spec.dropout_rate = 0.0;
        const TeacherModel t{spec, init_parameters(spec, rng.next_u64()), 0, {0, 1, 2}};
        std::vector<double> x(4);
        for (double& v : x) v = rng.uniform(-2.0, 2.0);
        MCConfig mc;
        mc.num_samples = 4;
        mc.base_seed = rng.next_u64();
        const auto p = mc_dropout_predict(t, x, it, mc);
        const auto det = softmax(forward(spec, t.params, x));
        for (std::size_t i = 0; i < p.size(); ++i)
            if (p.values[i] != det.values[i]) ok = false;
    }

    // ECE fixture (independent hand evaluation froze 0.1)
    const std::vector<PredictionRecord> fix{{0.6, true}, {0.6, false}, {0.9, true}, {0.9, true}};
    if (std::abs(ece_from_records(fix, 10) - 0.1) > 1e-12) ok = false;

    const double secs = seconds_since(start);
    const bool pass = ok && secs < 60.0;
    report(11, "invariant suite", pass, secs);
    REQUIRE(pass);
}
