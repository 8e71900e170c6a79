// Acceptance suite: one PASS/FAIL line per criterion, exit 0 only if all pass.
// Criteria 1-8 exercise the library directly; 9-10 drive the CLI binary.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "kdlab/distill_gradcheck.hpp"
#include "kdlab/pipeline.hpp"

using namespace kdlab;
namespace fs = std::filesystem;

namespace {

int failures = 0;

void report(int criterion, const std::string& title, bool ok, const std::string& detail = "") {
    std::cout << (ok ? "PASS" : "FAIL") << " criterion " << criterion << ": " << title;
    if (!detail.empty()) std::cout << " [" << detail << "]";
    std::cout << std::endl;
    if (!ok) ++failures;
}

template <typename F>
void guarded(int criterion, const std::string& title, F&& f) {
    try {
        f();
    } catch (const std::exception& e) {
        report(criterion, title, false, std::string("exception: ") + e.what());
    }
}

std::string fmt(double v) {
    std::ostringstream os;
    os << std::setprecision(17) << v;
    return os.str();
}

Tensor rand_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
    std::uniform_real_distribution<double> dist(lo, hi);
    std::vector<double> v(shape_numel(shape));
    for (double& x : v) x = dist(rng);
    return Tensor::from_values(std::move(shape), std::move(v));
}

// Random fake traces for a 6-layer/2-head teacher and 2-layer student.
ForwardTrace random_trace(std::size_t layers, std::size_t heads, std::size_t d,
                          std::mt19937_64& rng) {
    ForwardTrace tr;
    tr.embedding_output = rand_tensor({1, 3, d}, rng);
    for (std::size_t l = 0; l < layers; ++l) {
        tr.hidden_states.push_back(rand_tensor({1, 3, d}, rng));
        std::vector<Tensor> hl;
        for (std::size_t h = 0; h < heads; ++h) hl.push_back(rand_tensor({1, 3, 3}, rng));
        tr.attention_logits.push_back(hl);
    }
    return tr;
}

int run_cli(const std::string& args, const std::string& log) {
    const std::string cmd = std::string("\"") + KDLAB_CLI_PATH + "\" " + args + " > " + log + " 2>&1";
    const int rc = std::system(cmd.c_str());
    return rc == 0 ? 0 : 1;
}

std::string read_file(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

double final_metric_from(const fs::path& metrics_jsonl) {
    std::ifstream in(metrics_jsonl);
    std::string line;
    double metric = std::nan("");
    while (std::getline(in, line)) {
        auto j = nlohmann::json::parse(line, nullptr, false);
        if (!j.is_discarded() && j.value("event", "") == "final")
            metric = j.value("dev_metric", std::nan(""));
    }
    return metric;
}

// Small shared setup for criteria 4 and 8.
TaskSpec small_spec() {
    TaskSpec spec;
    spec.vocab_size = 16;
    spec.seq_len = 8;
    spec.train_size = 32;
    spec.dev_size = 16;
    return spec;
}

ModelConfig small_teacher() {
    ModelConfig c;
    c.n_layers = 2;
    c.d_model = 8;
    c.n_heads = 2;
    c.d_ff = 8;
    c.vocab_size = 16;
    c.max_seq_len = 8;
    c.n_outputs = 2;
    return c;
}

ModelConfig small_student() {
    ModelConfig c = small_teacher();
    c.n_layers = 1;
    c.d_model = 4;
    c.d_ff = 4;
    return c;
}

// ---- pinned reference-run values (frozen from the calibration run) ----
constexpr double kPinnedTeacherTrainAcc = 1.0;
constexpr double kPinnedStage1FirstEpoch = 3.8405595589347001;
constexpr double kPinnedStage1FinalEpoch = 1.3162620148859603;
constexpr double kPinnedFinalDevMcc = 0.36047677154687618;
constexpr double kPinTolerance = 1e-9;

void criterion1() {
    const auto t0 = std::chrono::steady_clock::now();
    double worst = 0.0;
    std::string worst_case;
    for (const GradCheckCase& gc : all_gradcheck_cases()) {
        GradCheckResult res = stage1_gradcheck(gc);
        if (res.max_rel_error > worst) {
            worst = res.max_rel_error;
            worst_case = gc.name() + " " + res.worst_param;
        }
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    report(1, "gradient suite over 24 loss/map/alpha variants", worst < 1e-4 && secs < 120.0,
           "worst rel err " + fmt(worst) + " (" + worst_case + "), " + fmt(secs) + " s");
}

void criterion2() {
    std::mt19937_64 rng(1234);
    bool all_equal = true;
    const BlockPartition part(6, 2);
    for (int trial = 0; trial < 100 && all_equal; ++trial) {
        ForwardTrace teacher = random_trace(6, 2, 8, rng);
        ForwardTrace student = random_trace(2, 2, 4, rng);
        ProjectionParams proj = ProjectionParams::init(4, 8, 1000 + trial);
        MappingState mapping = MappingState::base(part);
        Tensor lib = transformer_layer_loss(student, teacher, mapping, proj, LossConfig{}, trial);

        // Independent combination using direct last-of-block indexing g(m)=3m
        // and no mapping machinery, matching the component definitions.
        Tensor ref = embedding_loss(student.embedding_output, teacher.embedding_output,
                                    proj.w_embedding);
        for (std::size_t m = 1; m <= 2; ++m) {
            const std::size_t g = 3 * m;  // 1-based teacher layer
            ref = add(ref, hidden_loss(student.hidden_states[m - 1], teacher.hidden_states[g - 1],
                                       proj.w_hidden));
            ref = add(ref, attention_loss_mse(student.attention_logits[m - 1],
                                              teacher.attention_logits[g - 1]));
        }
        if (lib.value() != ref.value()) all_equal = false;
    }
    report(2, "alpha=0.5 + mse + base map is bitwise equal to direct g(m)=3m combination",
           all_equal, "100 random traces");
}

void criterion3() {
    std::mt19937_64 rng(99);
    bool zero_ok = true, nonneg_ok = true;
    for (int trial = 0; trial < 100; ++trial) {
        std::vector<Tensor> s = {rand_tensor({2, 3}, rng, -3, 3)};
        if (std::abs(attention_loss_kl(s, s, 1e-8).value()) > 1e-12) zero_ok = false;
    }
    double min_kl = 1e9;
    for (int trial = 0; trial < 10000; ++trial) {
        std::vector<Tensor> s = {rand_tensor({2, 3}, rng, -3, 3)};
        std::vector<Tensor> t = {rand_tensor({2, 3}, rng, -3, 3)};
        const double v = attention_loss_kl(s, t, 1e-8).value();
        min_kl = std::min(min_kl, v);
        if (v < 0.0) nonneg_ok = false;
    }
    // Fixed 2-point example: P=(1/2,1/2), Q=(1/4,3/4) -> 1/2 ln(4/3).
    std::vector<Tensor> sp = {Tensor::from_values({1, 2}, {0.0, 0.0})};
    std::vector<Tensor> tp = {Tensor::from_values({1, 2}, {0.0, std::log(3.0)})};
    const double hand = attention_loss_kl(sp, tp, 1e-8).value();
    const bool hand_ok = std::abs(hand - 0.143841) < 5e-7;
    report(3, "KL attention loss: zero on identical, nonnegative, hand value",
           zero_ok && nonneg_ok && hand_ok,
           "min over 1e4 pairs " + fmt(min_kl) + ", hand " + fmt(hand));
}

void criterion4() {
    TaskData data = generate_classification_task(small_spec());
    EncoderParams teacher = init_params(small_teacher(), 5);
    teacher.set_requires_grad(false);
    RunConfig rc;
    rc.stage1_epochs = 1;
    rc.stage1_lr = 1e-3;
    rc.stage1_batch = 8;

    auto run_alpha = [&](double alpha, const char* component) {
        EncoderParams student = init_params(small_student(), 6);
        MappingState mapping = MappingState::mean(BlockPartition(2, 1));
        LossConfig cfg;
        cfg.alpha = alpha;
        bool all_zero = true;
        std::size_t steps = 0;
        MetricsSink sink = [&](const nlohmann::ordered_json& j) {
            if (j.value("event", "") != "step") return;
            ++steps;
            if (j.at(component).get<double>() != 0.0) all_zero = false;
        };
        stage1_transformer_distill(teacher, student, mapping, cfg, rc, data.train, sink);
        return all_zero && steps == 4;  // 32 examples / batch 8
    };
    const bool a1 = run_alpha(1.0, "loss_attn");
    const bool a0 = run_alpha(0.0, "loss_hidn");
    report(4, "alpha endpoints zero the dropped component across a full epoch", a1 && a0,
           std::string("alpha=1 attn==0: ") + (a1 ? "yes" : "no") + ", alpha=0 hidn==0: " +
               (a0 ? "yes" : "no"));
}

void criterion5() {
    const BlockPartition part(6, 2);
    bool prob_ok = true;
    std::vector<MappingState> kinds;
    kinds.push_back(MappingState::base(part));
    kinds.push_back(MappingState::mean(part));
    kinds.push_back(MappingState::random(part, 42));
    kinds.push_back(MappingState::learnable(part, LearnableInit::BaseLike, 1e-3));
    for (const MappingState& s : kinds) {
        for (std::size_t k = 0; k < 10000 && prob_ok; k += 1) {
            const std::size_t m = 1 + k % 2;
            auto v = s.weights_for(m, k).data();
            double sum = 0;
            for (double x : v) {
                if (x < 0.0) prob_ok = false;
                sum += x;
            }
            if (std::abs(sum - 1.0) > 1e-12) prob_ok = false;
        }
    }

    auto v0 = kinds[3].weights_for(1, 0).data();
    const bool init_ok = std::abs(v0[0] - 0.10651) < 1e-5 && std::abs(v0[1] - 0.10651) < 1e-5 &&
                         std::abs(v0[2] - 0.78698) < 1e-5;

    // Aggregation vs a naive elementwise loop.
    std::mt19937_64 rng(7);
    ForwardTrace teacher = random_trace(6, 2, 8, rng);
    bool agg_ok = true;
    for (std::size_t m = 1; m <= 2 && agg_ok; ++m) {
        Tensor v = kinds[3].weights_for(m, 0);
        Tensor agg = aggregate_hidden(teacher, part, m, v);
        const auto block = part.block(m);
        for (std::size_t i = 0; i < agg.numel(); ++i) {
            double expect = 0;
            for (std::size_t j = 0; j < block.size(); ++j)
                expect += v.data()[j] * teacher.hidden_states[block[j] - 1].data()[i];
            if (std::abs(agg.data()[i] - expect) > 1e-12) agg_ok = false;
        }
        auto agg_attn = aggregate_attention(teacher, part, m, v);
        for (std::size_t h = 0; h < 2; ++h)
            for (std::size_t i = 0; i < agg_attn[h].numel(); ++i) {
                double expect = 0;
                for (std::size_t j = 0; j < block.size(); ++j)
                    expect += v.data()[j] * teacher.attention_logits[block[j] - 1][h].data()[i];
                if (std::abs(agg_attn[h].data()[i] - expect) > 1e-12) agg_ok = false;
            }
    }
    report(5, "mapping weights are probability vectors; footnote init; naive-loop aggregation",
           prob_ok && init_ok && agg_ok,
           std::string("prob ") + (prob_ok ? "ok" : "BAD") + ", init " + (init_ok ? "ok" : "BAD") +
               ", agg " + (agg_ok ? "ok" : "BAD"));
}

void criterion6() {
    std::mt19937_64 rng(2718);
    bool mcc_ok = true, pearson_ok = true;

    // MCC oracle: Pearson correlation of the 0/1 label vectors.
    std::uniform_int_distribution<int> bit(0, 1);
    for (int trial = 0; trial < 1000; ++trial) {
        const std::size_t n = 20;
        std::vector<int> pred(n), gold(n);
        for (auto& x : pred) x = bit(rng);
        for (auto& x : gold) x = bit(rng);
        std::vector<double> pd(pred.begin(), pred.end()), gd(gold.begin(), gold.end());
        const double mcc = matthews_corrcoef(pred, gold);
        try {
            if (std::abs(mcc - pearson_corr(pd, gd)) > 1e-12) mcc_ok = false;
        } catch (const UndefinedMetricError&) {
            // Degenerate draw (constant vector): MCC defines this as 0.
            if (mcc != 0.0) mcc_ok = false;
        }
    }

    // Pearson oracle: moment formula in long double.
    std::uniform_real_distribution<double> real(-5, 5);
    for (int trial = 0; trial < 1000; ++trial) {
        const std::size_t n = 16;
        std::vector<double> x(n), y(n);
        for (auto& v : x) v = real(rng);
        for (auto& v : y) v = real(rng);
        long double sx = 0, sy = 0, sxx = 0, syy = 0, sxy = 0;
        for (std::size_t i = 0; i < n; ++i) {
            sx += x[i];
            sy += y[i];
            sxx += static_cast<long double>(x[i]) * x[i];
            syy += static_cast<long double>(y[i]) * y[i];
            sxy += static_cast<long double>(x[i]) * y[i];
        }
        const long double nn = n;
        const long double oracle =
            (sxy - sx * sy / nn) / std::sqrt((sxx - sx * sx / nn) * (syy - sy * sy / nn));
        if (std::abs(pearson_corr(x, y) - static_cast<double>(oracle)) > 1e-12) pearson_ok = false;
    }

    const double mcc_hand =
        matthews_corrcoef({1, 1, 1, 0, 0, 0, 0, 1, 0, 0}, {1, 1, 1, 0, 0, 0, 0, 0, 1, 1});
    const double pearson_hand = pearson_corr({1, 2, 3}, {1, 2, 4});
    const bool hands_ok =
        std::abs(mcc_hand - 0.40825) < 1e-5 && std::abs(pearson_hand - 0.98198) < 1e-5;
    report(6, "metric oracles (1e3 random inputs) and hand examples",
           mcc_ok && pearson_ok && hands_ok,
           "mcc hand " + fmt(mcc_hand) + ", pearson hand " + fmt(pearson_hand));
}

void criterion7() {
    const auto t0 = std::chrono::steady_clock::now();
    TaskSpec spec;  // reference classification task: vocab 32, seq 16, 256/128
    TaskData data = generate_classification_task(spec);

    ModelConfig tc;
    tc.n_layers = 6;
    tc.d_model = 32;
    tc.n_heads = 4;
    tc.d_ff = 64;
    tc.vocab_size = 32;
    tc.max_seq_len = 16;
    tc.n_outputs = 2;
    ModelConfig sc = tc;
    sc.n_layers = 2;
    sc.d_model = 16;
    sc.d_ff = 32;

    TeacherResult teacher = finetune_teacher(data, tc, 42, 30, 1e-3, 32);
    teacher.params.set_requires_grad(false);
    const double train_acc = train_accuracy(teacher.params, data.train);

    RunConfig rc;  // seed 42, stage-1 30 epochs, stage-2 3 epochs, batch 32
    rc.stage1_lr = 1e-3;  // calibrated for desk scale; appendix default is too small here
    rc.stage2_lr = 1e-3;
    RunReport rep = run_experiment(rc, sc, data, teacher.params);

    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const double s1_first = rep.stage1_epoch_mean_losses.front();
    const double s1_final = rep.stage1_epoch_mean_losses.back();

    bool ok = secs < 600.0 && train_acc >= 0.95 && s1_final <= 0.5 * s1_first &&
              rep.final_dev_metric > 0.0;
    std::string pin_detail;
    if (std::isnan(kPinnedTeacherTrainAcc)) {
        ok = false;
        pin_detail = " UNPINNED: teacher_acc=" + fmt(train_acc) + " s1_first=" + fmt(s1_first) +
                     " s1_final=" + fmt(s1_final) + " dev_mcc=" + fmt(rep.final_dev_metric);
    } else {
        const bool pinned_ok = std::abs(train_acc - kPinnedTeacherTrainAcc) <= kPinTolerance &&
                               std::abs(s1_first - kPinnedStage1FirstEpoch) <= kPinTolerance &&
                               std::abs(s1_final - kPinnedStage1FinalEpoch) <= kPinTolerance &&
                               std::abs(rep.final_dev_metric - kPinnedFinalDevMcc) <= kPinTolerance;
        if (!pinned_ok)
            pin_detail = " PIN DRIFT: teacher_acc=" + fmt(train_acc) + " s1_first=" +
                         fmt(s1_first) + " s1_final=" + fmt(s1_final) + " dev_mcc=" +
                         fmt(rep.final_dev_metric);
        ok = ok && pinned_ok;
    }
    report(7, "reference-config end-to-end pipeline", ok,
           "teacher_acc " + fmt(train_acc) + ", s1 " + fmt(s1_first) + " -> " + fmt(s1_final) +
               ", dev_mcc " + fmt(rep.final_dev_metric) + ", " + fmt(secs) + " s" + pin_detail);
}

void criterion8() {
    TaskData data = generate_classification_task(small_spec());
    EncoderParams teacher = init_params(small_teacher(), 5);
    teacher.set_requires_grad(false);
    ModelConfig sc = small_student();

    fs::create_directories("acceptance_runs/c8");
    auto run_with_init = [&](LearnableInit init, const std::string& traj_path) {
        RunConfig rc;
        rc.stage1_epochs = 6;
        rc.stage2_epochs = 1;
        rc.stage1_lr = 1e-3;
        rc.stage2_lr = 1e-3;
        rc.stage1_batch = 8;
        rc.stage2_batch = 8;
        rc.map_kind = MappingKind::Learnable;
        rc.map_init = init;
        rc.map_lr = 1e-2;
        return run_experiment(rc, sc, data, teacher, nullptr, traj_path);
    };
    RunReport uni = run_with_init(LearnableInit::Uniform, "acceptance_runs/c8/uniform.csv");
    RunReport bas = run_with_init(LearnableInit::BaseLike, "acceptance_runs/c8/baselike.csv");

    auto csv_ok = [](const std::string& path) {
        std::ifstream in(path);
        std::string line;
        if (!std::getline(in, line) || line != "step,student_layer,block_index,weight") return false;
        std::size_t rows = 0;
        while (std::getline(in, line)) ++rows;
        return rows > 0;
    };
    const bool csvs = csv_ok("acceptance_runs/c8/uniform.csv") &&
                      csv_ok("acceptance_runs/c8/baselike.csv");

    const double lu = uni.stage1_epoch_mean_losses.back();
    const double lb = bas.stage1_epoch_mean_losses.back();
    const bool losses_close = std::abs(lu - lb) <= 0.10 * std::max(lu, lb);

    double linf = 0.0;
    for (std::size_t m = 0; m < uni.final_mapping_weights.size(); ++m)
        for (std::size_t j = 0; j < uni.final_mapping_weights[m].size(); ++j)
            linf = std::max(linf, std::abs(uni.final_mapping_weights[m][j] -
                                           bas.final_mapping_weights[m][j]));
    report(8, "learnable-map init comparison emits trajectories; final losses within 10%",
           csvs && losses_close,
           "final s1 losses " + fmt(lu) + " vs " + fmt(lb) + ", Linf(final v) = " + fmt(linf));
}

void criterion9() {
    const std::string base = "acceptance_runs/c9";
    fs::create_directories(base);
    bool ok = run_cli("train-teacher --task stsb-like --epochs 4 --out " + base + "/teacher",
                      base + "/teacher.log") == 0;

    const std::string common = "distill --task stsb-like --teacher " + base +
                               "/teacher/teacher.ckpt --stage1-epochs 2 --stage2-epochs 1 "
                               "--lr1 1e-3 --lr2 1e-3 ";
    auto run_variant = [&](const std::string& name, const std::string& extra) {
        const int r1 = run_cli(common + extra + " --out " + base + "/" + name,
                               base + "/" + name + ".log");
        const int r2 = run_cli(common + extra + " --out " + base + "/" + name + "_rep",
                               base + "/" + name + "_rep.log");
        return r1 == 0 && r2 == 0 &&
               read_file(base + "/" + name + "/metrics.jsonl") ==
                   read_file(base + "/" + name + "_rep/metrics.jsonl");
    };
    const bool full_ok = run_variant("full", "");
    const bool skip_ok = run_variant("skip", "--skip-stage1");
    ok = ok && full_ok && skip_ok;

    const double full_metric = final_metric_from(base + "/full/metrics.jsonl");
    const double skip_metric = final_metric_from(base + "/skip/metrics.jsonl");
    ok = ok && std::isfinite(full_metric) && std::isfinite(skip_metric);

    // Side-by-side comparison in the sweep table format.
    std::ostringstream table;
    table << "variant,metric,lr,batch\n"
          << "pipeline=full," << full_metric << ",0.001,32\n"
          << "pipeline=skip-stage1," << skip_metric << ",0.001,32\n";
    std::ofstream(base + "/comparison.csv") << table.str();
    std::cout << table.str();
    report(9, "skip-stage-1 vs full regression runs, deterministic, tabulated", ok,
           "full " + fmt(full_metric) + " vs skip " + fmt(skip_metric));
}

void criterion10() {
    const std::string base = "acceptance_runs/c10";
    fs::create_directories(base);
    bool ok = run_cli("train-teacher --task cola-like --epochs 3 --out " + base + "/teacher",
                      base + "/teacher.log") == 0;

    const std::string common = "distill --task cola-like --teacher " + base +
                               "/teacher/teacher.ckpt --stage1-epochs 2 --stage2-epochs 1 "
                               "--lr1 1e-3 --lr2 1e-3 --attn-loss kl --map learnable "
                               "--map-lr 1e-2 --seed 7 ";
    ok = ok && run_cli(common + "--out " + base + "/run_a", base + "/a.log") == 0;
    ok = ok && run_cli(common + "--out " + base + "/run_b", base + "/b.log") == 0;

    const std::string ma = read_file(base + "/run_a/metrics.jsonl");
    const std::string mb = read_file(base + "/run_b/metrics.jsonl");
    const bool metrics_same = !ma.empty() && ma == mb;
    const bool traj_same = read_file(base + "/run_a/trajectory.csv") ==
                               read_file(base + "/run_b/trajectory.csv") &&
                           !read_file(base + "/run_a/trajectory.csv").empty();
    report(10, "identical config+seed reproduces metrics.jsonl byte-identically",
           ok && metrics_same && traj_same,
           std::string("metrics ") + (metrics_same ? "identical" : "DIFFER") + ", trajectory " +
               (traj_same ? "identical" : "DIFFER"));
}

}  // namespace

int main() {
    std::cout << std::setprecision(10);
    guarded(1, "gradient suite", criterion1);
    guarded(2, "baseline equivalence", criterion2);
    guarded(3, "KL properties", criterion3);
    guarded(4, "alpha endpoints", criterion4);
    guarded(5, "mapping properties", criterion5);
    guarded(6, "metric oracles", criterion6);
    guarded(7, "reference pipeline", criterion7);
    guarded(8, "learnable-map comparison", criterion8);
    guarded(9, "skip-stage-1 harness", criterion9);
    guarded(10, "determinism", criterion10);
    std::cout << (failures == 0 ? "ALL CRITERIA PASSED" : "FAILURES: " + std::to_string(failures))
              << std::endl;
    return failures == 0 ? 0 : 1;
}
