// Acceptance run: one PASS/FAIL line per criterion, exit code 1 if any fails.
// Usage: acceptance [criterion ...]   (default: all of 1..10)

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <set>
#include <string>
#include <vector>

#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include "pbsn/grad_check.hpp"
#include "pbsn/image_io.hpp"
#include "pbsn/lrp.hpp"
#include "pbsn/outlier.hpp"
#include "pbsn/perturbation.hpp"
#include "pbsn/pipeline.hpp"
#include "pbsn/prototypes.hpp"
#include "pbsn/student.hpp"
#include "pbsn/synthetic.hpp"
#include "test_util.hpp"

namespace fs = std::filesystem;
using namespace pbsn;
using nlohmann::json;

namespace {

struct Verdict {
    bool pass = false;
    std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
    return std::chrono::duration<double>(Clock::now() - start).count();
}

// ---------------------------------------------------------------------------
// Shared full-size models: the default run configuration, seeds 0..2.

struct Models {
    RunConfig base;
    Datasets data;
    std::map<std::uint64_t, TeacherModel> teachers;
    std::map<std::pair<std::uint64_t, HeadKind>, StudentModel> students;

    Models() : data(make_datasets(base.data)) {}

    RunConfig config(std::uint64_t seed, HeadKind head) const {
        RunConfig c = base;
        c.seed = seed;
        c.student.head = head;
        c.propagate_seed();
        return c;
    }

    const TeacherModel& teacher(std::uint64_t seed) {
        auto it = teachers.find(seed);
        if (it == teachers.end()) {
            const auto c = config(seed, HeadKind::IIB);
            it = teachers.emplace(seed, train_teacher(data.train, &data.test, c.encoder, c.teacher)).first;
        }
        return it->second;
    }

    const StudentModel& student(std::uint64_t seed, HeadKind head) {
        const auto key = std::make_pair(seed, head);
        auto it = students.find(key);
        if (it == students.end()) {
            const auto c = config(seed, head);
            it = students.emplace(key, train_student(teacher(seed), data.train, c.student)).first;
        }
        return it->second;
    }
};

Models& models() {
    static Models m;
    return m;
}

// ---------------------------------------------------------------------------

Verdict gradient_suite() {
    const auto train = testing::tiny_dataset(3, 6, 21);
    Rng rng(2);
    double worst = 0.0;
    std::size_t batches = 0, coords = 0;
    for (auto kind : kAllHeadKinds) {
        for (std::uint64_t b = 0; b < 20; ++b) {
            const std::uint64_t seed = 1000 * static_cast<std::uint64_t>(kind) + b;
            auto s = testing::tiny_student(kind, train, 2, seed);
            const auto imp = testing::random_values(s.prototypes(), seed + 1, 0.5, 1.5);
            std::copy(imp.begin(), imp.end(), s.store.importance.mutable_values().begin());
            for (auto& t : s.encoder.parameters()) {
                if (t.rank() != 1) continue;
                const auto bias = testing::random_values(t.size(), seed + 2, 0.05, 0.1);
                std::copy(bias.begin(), bias.end(), t.mutable_values().begin());
            }
            std::vector<std::size_t> idx(2 + rng.index(4));
            for (auto& i : idx) i = rng.index(train.size());
            const std::size_t p = 1 + rng.index(s.prototypes() - 1);
            const auto frozen = testing::freeze_step(s, train, idx, p, seed + 3);
            LossWeights w;
            w.distill = rng.uniform(0.1, 1.0);
            w.mask = rng.uniform(0.1, 1.0);
            w.prototype = rng.uniform(0.1, 1.0);
            const auto r = grad_check([&] { return testing::frozen_total_loss(s, frozen, w); }, s.parameters());
            worst = std::max(worst, r.max_rel_error);
            coords += r.checked;
            ++batches;
        }
    }
    return {worst < 1e-4, fmt::format("max relative error {:.2e} (limit 1e-4) over {} micro-batches, {} coordinates",
                                      worst, batches, coords)};
}

Verdict mask_and_replacement() {
    Rng rng(5);
    std::size_t bad_masks = 0;
    for (int trial = 0; trial < 1000; ++trial) {
        const std::size_t k = 2 + rng.index(30);
        std::vector<double> m(k);
        const bool ties = trial % 2 == 0;
        for (auto& v : m) v = ties ? static_cast<double>(rng.index(3)) * 0.5 : rng.uniform();
        const std::size_t p = 1 + rng.index(k - 1);
        const auto mask = binary_mask(m, threshold(m, p), p);
        if (static_cast<std::size_t>(std::count(mask.begin(), mask.end(), 0.0)) != p) ++bad_masks;
    }

    const auto train = testing::tiny_dataset(3, 10, 8);
    const auto teacher = initialize_teacher(testing::tiny_encoder_config(), 3, 9);
    StudentTrainConfig c;
    c.prototypes_per_class = 3;
    c.epochs = 5;
    c.batch_size = 8;
    c.head_lr = 1e-2;
    c.encoder_lr = 1e-3;
    c.p_fraction = 1.0 / 3.0;
    c.seed = 4;
    auto s = initialize_student(teacher, train, c);
    std::multiset<std::size_t> prototypes(s.store.ids.begin(), s.store.ids.end());
    std::multiset<std::size_t> pool(s.store.pool.begin(), s.store.pool.end());
    const auto log = fit_student(s, teacher, train, c);

    std::multiset<std::size_t> all;
    for (std::size_t i = 0; i < train.size(); ++i) all.insert(i);
    std::size_t bad_epochs = 0, swaps = 0;
    for (const auto& e : log.epochs) {
        bool ok = true;
        for (const auto& sw : e.swaps) {
            auto out = prototypes.find(sw.removed_id);
            auto in = pool.find(sw.added_id);
            ok = ok && out != prototypes.end() && in != pool.end() && train.labels[sw.added_id] == sw.label &&
                 train.labels[sw.removed_id] == sw.label;
            if (out != prototypes.end()) prototypes.erase(out);
            if (in != pool.end()) pool.erase(in);
            prototypes.insert(sw.added_id);
            pool.insert(sw.removed_id);
            ++swaps;
        }
        std::multiset<std::size_t> joined = prototypes;
        joined.insert(pool.begin(), pool.end());
        ok = ok && joined == all && std::multiset<std::size_t>(e.prototype_ids.begin(), e.prototype_ids.end()) == prototypes;
        std::vector<std::size_t> per_class(3, 0);
        for (auto id : prototypes) ++per_class[static_cast<std::size_t>(train.labels[id])];
        ok = ok && per_class == std::vector<std::size_t>(3, 3);
        if (!ok) ++bad_epochs;
    }
    const bool pass = bad_masks == 0 && bad_epochs == 0 && log.epochs.size() == 5 && swaps == 4 * 3;
    return {pass, fmt::format("{} of 1000 masks wrong; {} of {} epochs broke P/D partition or balance ({} swaps)",
                              bad_masks, bad_epochs, log.epochs.size(), swaps)};
}

Verdict lrp_conservation() {
    SyntheticSpec spec;
    spec.classes = 3;
    spec.n_per_class = 60;
    spec.size = 16;
    spec.seed = 31;
    const auto train = gen_dataset(spec);
    spec.n_per_class = 34;
    spec.seed = 32;
    const auto test = gen_dataset(spec);

    EncoderConfig enc;
    enc.blocks = {{8, 3, 2}, {16, 3, 2}};
    enc.feature_channels = 16;
    enc.input_height = enc.input_width = 16;
    enc.bias = false;
    TeacherTrainConfig tc;
    tc.epochs = 4;
    tc.seed = 3;
    const auto teacher = train_teacher(train, nullptr, enc, tc);

    const LrpParams exact{1.7, 0.7, 0.0};
    const LrpParams defaults{};
    const HeadKind judged = StudentTrainConfig{}.head;
    double worst_exact = 0.0, judged_gap = 0.0;
    std::string gaps;
    for (auto kind : kAllHeadKinds) {
        StudentTrainConfig sc;
        sc.head = kind;
        sc.prototypes_per_class = 3;
        sc.epochs = 3;
        sc.seed = 3;
        auto student = train_student(teacher, train, sc);
        // The head bias is the only remaining bias term.
        auto bias = student.head.bias.mutable_values();
        std::fill(bias.begin(), bias.end(), 0.0);
        double worst_gap = 0.0;
        for (std::size_t i = 0; i < 100; ++i) {
            const auto rec = lrp_record(student, test.image(i));
            double sum_exact = 0.0, sum_default = 0.0;
            for (std::size_t k = 0; k < student.prototypes(); ++k) {
                const auto a = heatmaps(student, rec, k, exact);
                const auto b = heatmaps(student, rec, k, defaults);
                for (double v : a.input_pixels.values()) sum_exact += v;
                for (double v : b.input_pixels.values()) sum_default += v;
            }
            worst_exact = std::max(worst_exact, std::abs(sum_exact - rec.logit) / std::max(1.0, std::abs(rec.logit)));
            worst_gap = std::max(worst_gap, std::abs(sum_default - rec.logit) / std::abs(rec.logit));
        }
        if (kind == judged) judged_gap = worst_gap;
        gaps += fmt::format(" {} {:.2f}%", to_string(kind), 100.0 * worst_gap);
    }
    return {worst_exact <= 1e-9 && judged_gap <= 0.02,
            fmt::format("epsilon=0 worst error {:.2e} over all heads (limit 1e-9); alpha=1.7/beta=0.7/eps=1e-3 worst "
                        "per-sample gap {:.3f}% on the {} toy (limit 2%) over 100 samples; per head:{}",
                        worst_exact, 100.0 * judged_gap, to_string(judged), gaps)};
}

Verdict head_relations() {
    std::size_t violations = 0, unequal_constant = 0;
    for (std::uint64_t pair = 0; pair < 500; ++pair) {
        const double lo = pair % 2 == 0 ? 0.0 : -1.0;
        const auto fx = testing::random_tensor({6, 4, 4}, 3 * pair, lo, 1.0);
        const auto fp = testing::random_tensor({6, 4, 4}, 3 * pair + 1, lo, 1.0);
        const auto a = sim_IIA(fx, fp), b = sim_IIB(fx, fp).map;
        for (std::size_t i = 0; i < a.size(); ++i) {
            if (b.at(i) < a.at(i)) ++violations;
        }
        const auto column = testing::random_values(6, 3 * pair + 2, lo, 1.0);
        std::vector<double> flat;
        for (double v : column) flat.insert(flat.end(), 16, v);
        const Tensor constant({6, 4, 4}, flat);
        const auto ac = sim_IIA(fx, constant), bc = sim_IIB(fx, constant).map;
        for (std::size_t i = 0; i < ac.size(); ++i) {
            if (ac.at(i) != bc.at(i)) ++unequal_constant;
        }
    }

    std::size_t out_of_range = 0;
    const auto fx = testing::random_tensor({1000, 6, 4, 4}, 77, 0.0, 1.0);
    const auto fp = testing::random_tensor({8, 6, 4, 4}, 78, 0.0, 1.0);
    for (auto kind : kAllHeadKinds) {
        NoGradGuard guard;
        const auto model = HeadModel::initialize(kind, 2, 8, 6, 5);
        for (double u : u_scores(head_forward(fx, fp, model))) {
            if (!(u >= 0.0 && u <= 1.0 + 1e-12)) ++out_of_range;
        }
    }
    return {violations == 0 && unequal_constant == 0 && out_of_range == 0,
            fmt::format("{} positions with sim_IIB < sim_IIA, {} unequal on constant prototype maps, {} u_k outside "
                        "[0,1] (500 pairs, 6 heads x 8000 scores)",
                        violations, unequal_constant, out_of_range)};
}

Verdict distillation_parity() {
    auto& m = models();
    double worst_gap = -1e9;
    std::string worst;
    std::vector<std::string> rows;
    for (std::uint64_t seed : {0, 1, 2}) {
        const double teacher_acc = teacher_accuracy(m.teacher(seed), m.data.test);
        std::string row = fmt::format("seed {} teacher {:.1f}:", seed, 100.0 * teacher_acc);
        for (auto kind : kAllHeadKinds) {
            const double acc = student_accuracy(m.student(seed, kind), m.data.test);
            const double gap = 100.0 * (teacher_acc - acc);
            row += fmt::format(" {} {:.1f}", to_string(kind), 100.0 * acc);
            if (gap > worst_gap) {
                worst_gap = gap;
                worst = fmt::format("{} seed {}", to_string(kind), seed);
            }
        }
        rows.push_back(row);
    }
    std::string detail = fmt::format("largest shortfall {:.2f} points ({}, limit 3)", worst_gap, worst);
    for (const auto& r : rows) detail += "\n      " + r;
    return {worst_gap <= 3.0, detail};
}

Verdict outlier_detection() {
    auto& m = models();
    const auto& student = m.student(0, HeadKind::IIB);
    const auto config = m.config(0, HeadKind::IIB);
    bool above = true, beats = false;
    std::string detail;
    for (const auto& setup : outlier_setups(config, m.data.test)) {
        if (setup.name == "A") continue;
        const auto r = evaluate_outliers(student, m.data.test, setup.outliers, {20, false});
        above = above && r.auc_topk > 0.60;
        beats = beats || r.auc_topk > r.auc_maxprob;
        detail += fmt::format("setup {}: AUC o(k'=20) {:.3f} vs max-prob {:.3f}; ", setup.name, r.auc_topk,
                              r.auc_maxprob);
    }
    detail += "Head II-B, seed 0";
    return {above && beats, detail};
}

Verdict perturbation_quality() {
    auto& m = models();
    const auto& student = m.student(0, HeadKind::IIIB);
    const auto subset = spaced_subset(m.data.test, 200);
    const auto fill = m.data.train.channel_mean();
    PerturbConfig pc = m.config(0, HeadKind::IIIB).perturb;
    pc.policy = PerturbPolicy::Relevance;
    const double relevance = perturb_eval(student, subset, fill, pc).aoc();
    pc.policy = PerturbPolicy::Random;
    const double random = perturb_eval(student, subset, fill, pc).aoc();
    const double ratio = relevance / random;
    return {random > 0.0 && ratio >= 1.10,
            fmt::format("AOC relevance {:.4f} vs random {:.4f}, ratio {:.3f} (limit 1.10) on 200 samples, Head III-B",
                        relevance, random, ratio)};
}

Verdict pruning() {
    auto& m = models();
    const auto config = m.config(0, HeadKind::IIB);
    const fs::path dir = fs::temp_directory_path() / "pbsn_acceptance_prune";
    fs::create_directories(dir);
    StudentModel pruned;
    const auto metrics = run_prune(config, m.data, m.teacher(0), m.student(0, HeadKind::IIB), dir, pruned);
    fs::remove_all(dir);
    const double change = metrics["change_points"].get<double>();
    return {std::abs(change) <= 2.0,
            fmt::format("accuracy {:.2f}% -> {:.2f}% after pruning {} of {} prototypes and {} finetune epochs "
                        "(change {:+.2f} points, limit 2)",
                        100.0 * metrics["accuracy_before"].get<double>(),
                        100.0 * metrics["accuracy_finetuned"].get<double>(),
                        config.prototypes() - pruned.prototypes(), config.prototypes(), config.prune.finetune_epochs,
                        change)};
}

Verdict auc_oracle() {
    Rng rng(99);
    std::size_t mismatches = 0;
    for (int instance = 0; instance < 50; ++instance) {
        const std::size_t n = 2 + rng.index(199);
        std::vector<double> s(n);
        std::vector<bool> outlier(n);
        for (std::size_t i = 0; i < n; ++i) {
            s[i] = instance % 3 == 0 ? static_cast<double>(rng.index(5)) : rng.uniform();
            outlier[i] = rng.uniform() < 0.5;
        }
        outlier[0] = false;
        outlier[1] = true;
        double wins = 0.0, pairs = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j < n; ++j) {
                if (!outlier[i] || outlier[j]) continue;
                pairs += 1.0;
                wins += s[i] > s[j] ? 1.0 : (s[i] == s[j] ? 0.5 : 0.0);
            }
        }
        if (auc(s, outlier) != wins / pairs) ++mismatches;
    }
    return {mismatches == 0, fmt::format("{} of 50 instances differ from the all-pairs count", mismatches)};
}

RunConfig determinism_config(const fs::path& out) {
    RunConfig c;
    c.seed = 11;
    c.data.train.classes = 3;
    c.data.train.n_per_class = 40;
    c.data.train.size = 16;
    c.data.train.seed = 11;
    c.data.test_per_class = 20;
    c.encoder.blocks = {{8, 3, 2}, {16, 3, 2}};
    c.encoder.feature_channels = 16;
    c.encoder.input_height = c.encoder.input_width = 16;
    c.teacher.epochs = 3;
    c.student.prototypes_per_class = 3;
    c.student.epochs = 3;
    c.outlier.kprime = {1, 5};
    c.perturb.steps = 8;
    c.perturb_samples = 20;
    c.explain_samples = 3;
    c.explain_topk = 3;
    c.prune.finetune_epochs = 1;
    c.output = out;
    c.propagate_seed();
    c.validate();
    return c;
}

std::map<std::string, std::string> run_pipeline(const fs::path& out) {
    fs::remove_all(out);
    const auto config = determinism_config(out);
    const auto data = make_datasets(config.data);
    TeacherModel teacher;
    StudentModel student, pruned;
    run_train_teacher(config, data, out, teacher);
    run_train_student(config, data, teacher, out, student);
    const auto explain = run_explain(config, data, student, out);
    run_outlier_eval(config, data, student, out);
    run_perturb_eval(config, data, student, out);
    run_prune(config, data, teacher, student, out, pruned);

    std::map<std::string, std::string> files;
    for (const auto& entry : fs::recursive_directory_iterator(out)) {
        if (entry.is_regular_file() && entry.path().extension() == ".json") {
            files[fs::relative(entry.path(), out).string()] = read_file(entry.path());
        }
    }
    std::string checksums;
    for (const auto& sample : explain["samples"]) {
        for (const auto& pair : sample["pairs"]) checksums += pair["checksum"].get<std::string>() + " ";
    }
    files["<heatmap checksums>"] = checksums;
    return files;
}

Verdict determinism() {
    const fs::path root = fs::temp_directory_path() / "pbsn_acceptance_determinism";
    const auto a = run_pipeline(root / "a");
    const auto b = run_pipeline(root / "b");
    fs::remove_all(root);
    std::size_t differing = 0;
    for (const auto& [name, bytes] : a) {
        auto it = b.find(name);
        if (it == b.end() || it->second != bytes) ++differing;
    }
    const bool pass = a.size() == b.size() && differing == 0 && a.size() > 10;
    return {pass, fmt::format("{} metrics files plus heatmap checksums compared, {} differ", a.size() - 1, differing)};
}

struct Criterion {
    int id;
    const char* name;
    double budget_seconds;  // 0 when the criterion carries no runtime bound
    std::function<Verdict()> run;
};

}  // namespace

int main(int argc, char** argv) {
    const std::vector<Criterion> criteria{
        {1, "gradient suite", 120, gradient_suite},
        {2, "mask and replacement", 60, mask_and_replacement},
        {3, "LRP conservation", 120, lrp_conservation},
        {4, "head relations", 0, head_relations},
        {9, "AUC oracle", 0, auc_oracle},
        {10, "determinism", 0, determinism},
        {5, "distillation parity", 1200, distillation_parity},
        {6, "outlier detection", 300, outlier_detection},
        {7, "perturbation quality", 300, perturbation_quality},
        {8, "pruning", 0, pruning},
    };
    std::set<int> selected;
    for (int i = 1; i < argc; ++i) selected.insert(std::stoi(argv[i]));

    int failures = 0;
    for (const auto& c : criteria) {
        if (!selected.empty() && !selected.count(c.id)) continue;
        const auto start = Clock::now();
        Verdict v;
        try {
            v = c.run();
        } catch (const std::exception& e) {
            v = {false, std::string("threw: ") + e.what()};
        }
        const double elapsed = seconds_since(start);
        const bool in_time = c.budget_seconds == 0 || elapsed < c.budget_seconds;
        const bool pass = v.pass && in_time;
        failures += pass ? 0 : 1;
        const std::string timing = c.budget_seconds == 0
                                       ? fmt::format("{:.1f} s", elapsed)
                                       : fmt::format("{:.1f} s, budget {:.0f} s", elapsed, c.budget_seconds);
        std::printf("%s  [%d] %s: %s (%s)\n", pass ? "PASS" : "FAIL", c.id, c.name, v.detail.c_str(),
                    timing.c_str());
        std::fflush(stdout);
    }
    return failures == 0 ? 0 : 1;
}
