// Command-line surface: teacher training, distillation runs, hyperparameter
// sweeps, and gradient checking.
//
// Exit codes: 0 success, 1 run failure, 2 usage error.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "kdlab/checkpoint.hpp"
#include "kdlab/distill_gradcheck.hpp"
#include "kdlab/pipeline.hpp"
#include "kdlab/tasks.hpp"

namespace fs = std::filesystem;
using nlohmann::ordered_json;

namespace {

constexpr std::uint64_t kDatasetSeed = 42;  // dataset generation is fixed; --seed drives training

kdlab::TaskSpec task_spec_for(const std::string& name) {
    kdlab::TaskSpec spec;
    spec.seed = kDatasetSeed;
    spec.train_size = 256;
    spec.dev_size = 128;
    if (name == "cola-like") {
        spec.kind = kdlab::TaskKind::Classification;
        spec.vocab_size = 32;
        spec.seq_len = 16;
    } else if (name == "stsb-like") {
        spec.kind = kdlab::TaskKind::Regression;
        spec.vocab_size = 32;
        spec.seq_len = 21;
    } else {
        throw CLI::ValidationError("--task", "unknown task '" + name +
                                               "' (valid: cola-like, stsb-like)");
    }
    return spec;
}

kdlab::ModelConfig teacher_config_for(const kdlab::TaskSpec& spec) {
    kdlab::ModelConfig c;
    c.n_layers = 6;
    c.d_model = 32;
    c.n_heads = 4;
    c.d_ff = 64;
    c.vocab_size = spec.vocab_size;
    c.max_seq_len = spec.seq_len;
    c.n_outputs = spec.kind == kdlab::TaskKind::Classification ? 2 : 1;
    return c;
}

kdlab::ModelConfig student_config_for(const kdlab::TaskSpec& spec) {
    kdlab::ModelConfig c = teacher_config_for(spec);
    c.n_layers = 2;
    c.d_model = 16;
    c.d_ff = 32;
    return c;
}

kdlab::MappingKind parse_map_kind(const std::string& s) {
    if (s == "base") return kdlab::MappingKind::Base;
    if (s == "random") return kdlab::MappingKind::Random;
    if (s == "mean") return kdlab::MappingKind::Mean;
    if (s == "learnable") return kdlab::MappingKind::Learnable;
    throw CLI::ValidationError("--map", "unknown mapping '" + s +
                                            "' (valid: base, random, mean, learnable)");
}

kdlab::AttentionLossKind parse_attn_kind(const std::string& s) {
    if (s == "mse") return kdlab::AttentionLossKind::Mse;
    if (s == "kl") return kdlab::AttentionLossKind::Kl;
    throw CLI::ValidationError("--attn-loss", "unknown attention loss '" + s + "' (valid: mse, kl)");
}

std::vector<std::string> split_csv(const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (!item.empty()) out.push_back(item);
    }
    return out;
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << text;
}

// Options shared by distill and sweep cells.
struct DistillOptions {
    std::string task = "cola-like";
    std::string teacher_path;
    std::string out_dir = "runs/distill";
    std::string attn_loss = "mse";
    std::string map = "base";
    std::string map_init = "uniform";
    double map_lr = 5e-5;
    double alpha = 0.5;
    bool skip_stage1 = false;
    std::uint64_t seed = 42;
    double data_fraction = 1.0;
    int stage1_epochs = -1;
    int stage2_epochs = 3;
    double lr1 = 5e-5;
    double lr2 = 1e-3;
    int batch1 = 32;
    int batch2 = 32;
    std::string kl_direction = "student-first";
    bool attn_post_softmax = false;
};

void add_distill_options(CLI::App* sub, DistillOptions& o) {
    sub->set_config("--config", "", "config file (key = value lines, # comments)");
    sub->add_option("--task", o.task, "task: cola-like | stsb-like")
        ->check(CLI::IsMember({"cola-like", "stsb-like"}))
        ->capture_default_str();
    sub->add_option("--teacher", o.teacher_path, "teacher checkpoint path")->capture_default_str();
    sub->add_option("--out", o.out_dir, "output directory")->capture_default_str();
    sub->add_option("--attn-loss", o.attn_loss, "attention loss: mse | kl")
        ->check(CLI::IsMember({"mse", "kl"}))
        ->capture_default_str();
    sub->add_option("--map", o.map, "layer mapping: base | random | mean | learnable")
        ->check(CLI::IsMember({"base", "random", "mean", "learnable"}))
        ->capture_default_str();
    sub->add_option("--map-init", o.map_init, "learnable map init: uniform | base-like")
        ->check(CLI::IsMember({"uniform", "base-like"}))
        ->capture_default_str();
    sub->add_option("--map-lr", o.map_lr, "learning rate for the mapping parameters")
        ->capture_default_str();
    sub->add_option("--alpha", o.alpha, "hidden-vs-attention weight in [0,1]")
        ->check(CLI::Range(0.0, 1.0))
        ->capture_default_str();
    sub->add_flag("--skip-stage1", o.skip_stage1, "skip transformer layer distillation");
    sub->add_option("--seed", o.seed, "run seed")->capture_default_str();
    sub->add_option("--data-fraction", o.data_fraction, "train data fraction in (0,1]")
        ->capture_default_str();
    sub->add_option("--stage1-epochs", o.stage1_epochs,
                    "stage-1 epochs (-1: 30 classification / 20 regression)")
        ->capture_default_str();
    sub->add_option("--stage2-epochs", o.stage2_epochs, "stage-2 epochs")->capture_default_str();
    sub->add_option("--lr1", o.lr1, "stage-1 learning rate")->capture_default_str();
    sub->add_option("--lr2", o.lr2, "stage-2 learning rate")->capture_default_str();
    sub->add_option("--batch1", o.batch1, "stage-1 batch size")->capture_default_str();
    sub->add_option("--batch2", o.batch2, "stage-2 batch size")->capture_default_str();
    sub->add_option("--kl-direction", o.kl_direction, "KL argument order: student-first | teacher-first")
        ->check(CLI::IsMember({"student-first", "teacher-first"}))
        ->capture_default_str();
    sub->add_flag("--attn-post-softmax", o.attn_post_softmax,
                  "aggregate teacher attention after the row softmax on the KL path");
}

kdlab::RunConfig to_run_config(const DistillOptions& o) {
    kdlab::RunConfig cfg;
    cfg.seed = o.seed;
    cfg.stage1_epochs = o.stage1_epochs;
    cfg.stage2_epochs = static_cast<std::size_t>(o.stage2_epochs);
    cfg.stage1_lr = o.lr1;
    cfg.stage2_lr = o.lr2;
    cfg.stage1_batch = static_cast<std::size_t>(o.batch1);
    cfg.stage2_batch = static_cast<std::size_t>(o.batch2);
    cfg.alpha = o.alpha;
    cfg.attention_kind = parse_attn_kind(o.attn_loss);
    cfg.map_kind = parse_map_kind(o.map);
    cfg.map_init = o.map_init == "uniform" ? kdlab::LearnableInit::Uniform
                                           : kdlab::LearnableInit::BaseLike;
    cfg.map_lr = o.map_lr;
    cfg.data_fraction = o.data_fraction;
    cfg.skip_stage1 = o.skip_stage1;
    return cfg;
}

int run_train_teacher(const std::string& task, std::uint64_t seed, int epochs, double lr, int batch,
                      const std::string& out_dir, const std::string& resolved_config) {
    const kdlab::TaskSpec spec = task_spec_for(task);
    const kdlab::TaskData data = kdlab::generate_task(spec);
    fs::create_directories(out_dir);
    write_text(fs::path(out_dir) / "config.resolved", resolved_config);

    auto result = kdlab::finetune_teacher(data, teacher_config_for(spec), seed,
                                          static_cast<std::size_t>(epochs), lr,
                                          static_cast<std::size_t>(batch));
    const fs::path ckpt = fs::path(out_dir) / "teacher.ckpt";
    kdlab::save_encoder(ckpt.string(), result.params);
    double train_acc = -1.0;
    if (spec.kind == kdlab::TaskKind::Classification)
        train_acc = kdlab::train_accuracy(result.params, data.train);
    std::cout << "task=" << task << " dev_metric=" << result.dev_metric;
    if (train_acc >= 0.0) std::cout << " train_accuracy=" << train_acc;
    std::cout << " checkpoint=" << ckpt.string() << "\n";
    return 0;
}

int run_distill(const DistillOptions& o, const std::string& resolved_config) {
    if (o.teacher_path.empty() || !fs::exists(o.teacher_path)) {
        std::cerr << "error: teacher checkpoint '" << o.teacher_path
                  << "' not found; train one first with `kdlab train-teacher --task " << o.task
                  << " --out <dir>`\n";
        return 1;
    }
    const kdlab::TaskSpec spec = task_spec_for(o.task);
    const kdlab::TaskData data = kdlab::generate_task(spec);
    kdlab::EncoderParams teacher = kdlab::load_encoder(o.teacher_path);
    teacher.set_requires_grad(false);

    fs::create_directories(o.out_dir);
    write_text(fs::path(o.out_dir) / "config.resolved", resolved_config);
    if (fs::path(o.teacher_path) != fs::path(o.out_dir) / "teacher.ckpt")
        fs::copy_file(o.teacher_path, fs::path(o.out_dir) / "teacher.ckpt",
                      fs::copy_options::overwrite_existing);

    std::ofstream metrics(fs::path(o.out_dir) / "metrics.jsonl");
    kdlab::MetricsSink sink = [&metrics](const ordered_json& j) { metrics << j.dump() << "\n"; };

    kdlab::RunConfig run_cfg = to_run_config(o);
    const std::string traj =
        run_cfg.map_kind == kdlab::MappingKind::Learnable
            ? (fs::path(o.out_dir) / "trajectory.csv").string()
            : std::string();
    kdlab::EncoderParams student;
    kdlab::RunReport report = kdlab::run_experiment(run_cfg, student_config_for(spec), data, teacher,
                                                    sink, traj, &student);
    metrics.close();
    kdlab::save_encoder((fs::path(o.out_dir) / "student.ckpt").string(), student);

    std::ostringstream rep;
    rep << "== distillation run report ==\n"
        << "task: " << o.task << "\n"
        << "final_dev_metric: " << report.final_dev_metric << "\n"
        << "train_examples_used: " << report.train_examples_used << "\n"
        << "wall_clock_seconds: " << report.wall_clock_seconds << "\n";
    if (!report.stage1_epoch_mean_losses.empty()) {
        rep << "stage1_first_epoch_mean_loss: " << report.stage1_epoch_mean_losses.front() << "\n"
            << "stage1_final_epoch_mean_loss: " << report.stage1_epoch_mean_losses.back() << "\n";
    } else {
        rep << "stage1: skipped\n";
    }
    rep << "stage2_dev_metrics:";
    for (double m : report.stage2_dev_metrics) rep << ' ' << m;
    rep << "\n";
    if (!report.trajectory_path.empty()) rep << "trajectory: " << report.trajectory_path << "\n";
    if (!report.final_mapping_weights.empty()) {
        rep << "final_mapping_weights:\n";
        for (std::size_t m = 0; m < report.final_mapping_weights.size(); ++m) {
            rep << "  v(" << (m + 1) << ") =";
            for (double w : report.final_mapping_weights[m]) rep << ' ' << w;
            rep << "\n";
        }
    }
    rep << "config:\n" << resolved_config;
    write_text(fs::path(o.out_dir) / "report.txt", rep.str());

    std::cout << "final_dev_metric=" << report.final_dev_metric << " out=" << o.out_dir << "\n";
    return 0;
}

struct SweepGrids {
    std::string alpha, attn_loss, map, fraction, lr, batch;
};

int run_sweep(const DistillOptions& base, const SweepGrids& grids, const std::string& self_exe) {
    struct Axis {
        std::string name;
        std::vector<std::string> values;
        bool variant;  // part of the variant label (lr/batch are searched, not labeled)
    };
    std::vector<Axis> axes;
    auto add_axis = [&](const std::string& name, const std::string& csv, bool variant) {
        if (csv.empty()) return true;
        auto vals = split_csv(csv);
        if (vals.empty()) {
            std::cerr << "error: empty grid for --grid-" << name << "\n";
            return false;
        }
        axes.push_back({name, vals, variant});
        return true;
    };
    if (!add_axis("alpha", grids.alpha, true) || !add_axis("attn-loss", grids.attn_loss, true) ||
        !add_axis("map", grids.map, true) || !add_axis("fraction", grids.fraction, true) ||
        !add_axis("lr", grids.lr, false) || !add_axis("batch", grids.batch, false))
        return 2;
    bool any_variant = false;
    for (const Axis& a : axes) any_variant |= a.variant;
    if (!any_variant) {
        std::cerr << "error: empty sweep grid; specify at least one of --grid-alpha, "
                     "--grid-attn-loss, --grid-map, --grid-fraction\n";
        return 2;
    }

    fs::create_directories(base.out_dir);

    struct Cell {
        std::string variant;
        std::string lr, batch;
        std::vector<std::pair<std::string, std::string>> assignment;
    };
    std::vector<Cell> cells{{std::string(), std::string(), std::string(), {}}};
    for (const Axis& axis : axes) {
        std::vector<Cell> next;
        for (const Cell& c : cells)
            for (const std::string& v : axis.values) {
                Cell n = c;
                n.assignment.emplace_back(axis.name, v);
                if (axis.variant)
                    n.variant += (n.variant.empty() ? "" : ",") + axis.name + "=" + v;
                else if (axis.name == "lr")
                    n.lr = v;
                else
                    n.batch = v;
                next.push_back(n);
            }
        cells = std::move(next);
    }

    struct Best {
        double metric = -2.0;
        std::string lr, batch;
        bool any_success = false;
        std::size_t failures = 0;
    };
    std::map<std::string, Best> best;

    std::size_t cell_id = 0;
    for (const Cell& cell : cells) {
        const fs::path cell_dir = fs::path(base.out_dir) / ("cell" + std::to_string(cell_id++));
        std::ostringstream cmd;
        cmd << '"' << self_exe << '"' << " distill"
            << " --task " << base.task << " --teacher \"" << base.teacher_path << '"'
            << " --out \"" << cell_dir.string() << '"' << " --seed " << base.seed
            << " --map-init " << base.map_init << " --map-lr " << base.map_lr
            << " --stage1-epochs " << base.stage1_epochs << " --stage2-epochs "
            << base.stage2_epochs << " --lr1 " << base.lr1 << " --batch1 " << base.batch1;
        if (base.skip_stage1) cmd << " --skip-stage1";
        std::string lr = std::to_string(base.lr2), batch = std::to_string(base.batch2);
        std::string alpha = std::to_string(base.alpha), attn = base.attn_loss, map = base.map;
        std::string fraction = std::to_string(base.data_fraction);
        for (const auto& [k, v] : cell.assignment) {
            if (k == "alpha") alpha = v;
            else if (k == "attn-loss") attn = v;
            else if (k == "map") map = v;
            else if (k == "fraction") fraction = v;
            else if (k == "lr") lr = v;
            else batch = v;
        }
        cmd << " --alpha " << alpha << " --attn-loss " << attn << " --map " << map
            << " --data-fraction " << fraction << " --lr2 " << lr << " --batch2 " << batch;

        std::cout << "sweep cell: " << (cell.variant.empty() ? "(base)" : cell.variant)
                  << " lr=" << lr << " batch=" << batch << std::flush;
        const int rc = std::system(cmd.str().c_str());
        Best& b = best[cell.variant];
        if (rc != 0) {
            std::cout << " -> FAILED (exit " << rc << ")\n";
            ++b.failures;
            continue;
        }
        // Final dev metric is the last "final" event in the cell's metrics stream.
        double metric = std::nan("");
        std::ifstream ms(cell_dir / "metrics.jsonl");
        std::string line;
        while (std::getline(ms, line)) {
            auto j = nlohmann::json::parse(line, nullptr, false);
            if (!j.is_discarded() && j.value("event", "") == "final")
                metric = j.value("dev_metric", std::nan(""));
        }
        std::cout << " -> metric=" << metric << "\n";
        if (!std::isnan(metric) && (!b.any_success || metric > b.metric)) {
            b.metric = metric;
            b.lr = lr;
            b.batch = batch;
            b.any_success = true;
        }
    }

    std::vector<std::pair<std::string, Best>> rows(best.begin(), best.end());
    std::sort(rows.begin(), rows.end(), [](const auto& a, const auto& b) {
        if (a.second.any_success != b.second.any_success) return a.second.any_success;
        return a.second.metric > b.second.metric;
    });
    std::ostringstream csv;
    csv << "variant,metric,lr,batch\n";
    for (const auto& [variant, b] : rows) {
        if (b.any_success)
            csv << variant << ',' << b.metric << ',' << b.lr << ',' << b.batch << '\n';
        else
            csv << variant << ",failed,," << '\n';
    }
    write_text(fs::path(base.out_dir) / "sweep.csv", csv.str());
    std::cout << csv.str();
    return 0;
}

// CLI11 only processes a config option owned by the top-level command, so a
// subcommand-level --config is applied here: file values fill every option
// the command line left unset (explicit flags win over the file).
void apply_config_file(CLI::App* sub) {
    CLI::Option* cfg = sub->get_config_ptr();
    if (!cfg || cfg->count() == 0) return;
    const std::string path = cfg->as<std::string>();
    for (const CLI::ConfigItem& item : sub->get_config_formatter()->from_file(path)) {
        CLI::Option* opt = sub->get_option_no_throw("--" + item.name);
        if (!opt || opt == cfg || opt->count() > 0 || item.inputs.empty()) continue;
        for (const std::string& v : item.inputs) opt->add_result(v);
        opt->run_callback();
    }
}

int run_gradcheck(const std::string& map_filter, const std::string& attn_filter, bool corrupt) {
    std::map<std::string, double> group_max;
    double worst = 0.0;
    std::string worst_desc;
    bool first_case = true;
    for (const auto& gc : kdlab::all_gradcheck_cases()) {
        if (!map_filter.empty() && map_filter != kdlab::mapping_kind_name(gc.map_kind)) continue;
        if (!attn_filter.empty() && attn_filter != kdlab::attention_loss_name(gc.attn_kind)) continue;
        kdlab::GradCheckResult res = kdlab::stage1_gradcheck(gc, 1e-5, 4, corrupt && first_case);
        first_case = false;
        for (const auto& [name, err] : res.per_param)
            group_max[name] = std::max(group_max[name], err);
        if (res.max_rel_error > worst) {
            worst = res.max_rel_error;
            worst_desc = gc.name() + " param " + res.worst_param + "[" +
                         std::to_string(res.worst_index) + "]";
        }
        std::cout << "case " << gc.name() << ": max_rel_err=" << res.max_rel_error << "\n";
    }
    std::cout << "-- per parameter group --\n";
    for (const auto& [name, err] : group_max)
        std::cout << name << ": " << err << (err < 1e-4 ? "  ok" : "  FAIL") << "\n";
    if (worst >= 1e-4) {
        std::cerr << "gradcheck FAILED: worst " << worst << " at " << worst_desc << "\n";
        return 1;
    }
    std::cout << "gradcheck passed: worst relative error " << worst << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"kdlab: transformer knowledge-distillation laboratory"};
    app.require_subcommand(1);

    // train-teacher
    auto* tt = app.add_subcommand("train-teacher", "train a teacher on a synthetic task");
    std::string tt_task;
    std::uint64_t tt_seed = 42;
    int tt_epochs = 30, tt_batch = 32;
    double tt_lr = 1e-3;
    std::string tt_out = "runs/teacher";
    tt->set_config("--config", "", "config file (key = value lines, # comments)");
    tt->add_option("--task", tt_task, "task: cola-like | stsb-like")
        ->check(CLI::IsMember({"cola-like", "stsb-like"}))
        ->required();
    tt->add_option("--seed", tt_seed, "init/shuffle seed")->capture_default_str();
    tt->add_option("--epochs", tt_epochs, "training epochs")->capture_default_str();
    tt->add_option("--lr", tt_lr, "learning rate")->capture_default_str();
    tt->add_option("--batch", tt_batch, "batch size")->capture_default_str();
    tt->add_option("--out", tt_out, "output directory")->capture_default_str();

    // distill
    auto* ds = app.add_subcommand("distill", "two-substage teacher->student distillation");
    DistillOptions dopt;
    add_distill_options(ds, dopt);

    // sweep
    auto* sw = app.add_subcommand("sweep", "grid sweep over distillation variants");
    DistillOptions sopt;
    sopt.out_dir = "runs/sweep";
    add_distill_options(sw, sopt);
    SweepGrids grids;
    sw->add_option("--grid-alpha", grids.alpha, "comma-separated alpha values");
    sw->add_option("--grid-attn-loss", grids.attn_loss, "comma-separated loss kinds (mse,kl)");
    sw->add_option("--grid-map", grids.map, "comma-separated mapping kinds");
    sw->add_option("--grid-fraction", grids.fraction, "comma-separated train fractions");
    sw->add_option("--grid-lr", grids.lr, "comma-separated stage-2 learning rates");
    sw->add_option("--grid-batch", grids.batch, "comma-separated stage-2 batch sizes");

    // gradcheck
    auto* gc = app.add_subcommand("gradcheck", "finite-difference check of the stage-1 loss");
    std::string gc_map, gc_attn;
    bool gc_corrupt = false;
    gc->add_option("--map", gc_map, "restrict to one mapping kind")
        ->check(CLI::IsMember({"base", "random", "mean", "learnable"}));
    gc->add_option("--attn-loss", gc_attn, "restrict to one attention loss")
        ->check(CLI::IsMember({"mse", "kl"}));
    gc->add_flag("--corrupt", gc_corrupt, "test hook: corrupt one gradient")->group("");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        for (CLI::App* sub : {tt, ds, sw})
            if (sub->parsed()) apply_config_file(sub);
    } catch (const CLI::FileError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const CLI::ParseError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }

    try {
        if (tt->parsed())
            return run_train_teacher(tt_task, tt_seed, tt_epochs, tt_lr, tt_batch, tt_out,
                                     tt->config_to_str(true, false));
        if (ds->parsed()) return run_distill(dopt, ds->config_to_str(true, false));
        if (sw->parsed()) {
            std::string self = fs::exists("/proc/self/exe")
                                   ? fs::read_symlink("/proc/self/exe").string()
                                   : std::string(argv[0]);
            return run_sweep(sopt, grids, self);
        }
        if (gc->parsed()) return run_gradcheck(gc_map, gc_attn, gc_corrupt);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 2;
}
