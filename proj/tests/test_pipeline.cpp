#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include "kdlab/checkpoint.hpp"
#include "kdlab/pipeline.hpp"

using namespace kdlab;

namespace {

ModelConfig small_teacher_config() {
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

ModelConfig small_student_config() {
    ModelConfig c = small_teacher_config();
    c.n_layers = 1;
    c.d_model = 4;
    c.d_ff = 4;
    return c;
}

TaskSpec small_task_spec() {
    TaskSpec spec;
    spec.vocab_size = 16;
    spec.seq_len = 8;
    spec.train_size = 32;
    spec.dev_size = 16;
    return spec;
}

RunConfig quick_run_config() {
    RunConfig rc;
    rc.stage1_epochs = 1;
    rc.stage2_epochs = 1;
    rc.stage1_lr = 1e-3;
    rc.stage2_lr = 1e-3;
    rc.stage1_batch = 8;
    rc.stage2_batch = 8;
    return rc;
}

}  // namespace

TEST_CASE("teacher fine-tuning: loss drops, deterministic, emits stage-0 events") {
    TaskData data = generate_classification_task(small_task_spec());
    std::vector<nlohmann::ordered_json> events;
    MetricsSink sink = [&](const nlohmann::ordered_json& j) { events.push_back(j); };
    TeacherResult r = finetune_teacher(data, small_teacher_config(), 42, 4, 1e-3, 8, sink);

    REQUIRE(events.size() == 4 * 4);  // 4 epochs x ceil(32/8) batches
    for (const auto& e : events) {
        REQUIRE(e.at("event") == "step");
        REQUIRE(e.at("stage") == 0);
        REQUIRE(std::isfinite(e.at("loss_total").get<double>()));
    }
    // Mean loss of the last epoch below the first.
    auto epoch_mean = [&](int epoch) {
        double s = 0;
        int n = 0;
        for (const auto& e : events)
            if (e.at("epoch") == epoch) {
                s += e.at("loss_total").get<double>();
                ++n;
            }
        return s / n;
    };
    REQUIRE(epoch_mean(3) < epoch_mean(0));
    REQUIRE(r.params.all_finite());
    REQUIRE(r.dev_metric >= -1.0);
    REQUIRE(r.dev_metric <= 1.0);

    // Bitwise repeatable.
    TeacherResult r2 = finetune_teacher(data, small_teacher_config(), 42, 4, 1e-3, 8);
    REQUIRE(params_digest(r.params) == params_digest(r2.params));
    TeacherResult r3 = finetune_teacher(data, small_teacher_config(), 7, 4, 1e-3, 8);
    REQUIRE(params_digest(r.params) != params_digest(r3.params));
}

TEST_CASE("self-distillation fixed point: cloned student has zero loss, no drift") {
    TaskData data = generate_classification_task(small_task_spec());
    EncoderParams teacher = init_params(small_teacher_config(), 5);
    teacher.set_requires_grad(false);

    // Clone via checkpoint round trip; same config, identical weights.
    const std::string path = "self_distill_tmp.bin";
    save_encoder(path, teacher);
    EncoderParams student = load_encoder(path);
    std::remove(path.c_str());

    MappingState mapping = MappingState::base(BlockPartition(2, 2));
    RunConfig rc = quick_run_config();
    rc.stage1_epochs = 2;
    const std::uint64_t before = params_digest(student);
    Stage1Result s1 =
        stage1_transformer_distill(teacher, student, mapping, LossConfig{}, rc, data.train);
    for (double l : s1.epoch_mean_losses) REQUIRE(l == 0.0);
    // Zero gradients everywhere: Adam moves nothing, bitwise.
    REQUIRE(params_digest(student) == before);
}

TEST_CASE("stage 1 leaves the prediction head untouched") {
    TaskData data = generate_classification_task(small_task_spec());
    EncoderParams teacher = init_params(small_teacher_config(), 5);
    teacher.set_requires_grad(false);
    EncoderParams student = init_params(small_student_config(), 6);
    MappingState mapping = MappingState::mean(BlockPartition(2, 1));
    RunConfig rc = quick_run_config();

    const std::uint64_t head_w = tensor_digest(student.head_weight);
    const std::uint64_t head_b = tensor_digest(student.head_bias);
    const std::uint64_t emb = tensor_digest(student.token_embedding);
    Stage1Result s1 =
        stage1_transformer_distill(teacher, student, mapping, LossConfig{}, rc, data.train);
    REQUIRE(tensor_digest(student.head_weight) == head_w);
    REQUIRE(tensor_digest(student.head_bias) == head_b);
    REQUIRE(tensor_digest(student.token_embedding) != emb);  // body did train
    REQUIRE(s1.epoch_mean_losses.size() == 1);
    REQUIRE(s1.epoch_mean_losses[0] > 0.0);
}

TEST_CASE("stage 2 trains the head and reports one dev metric per epoch") {
    TaskData data = generate_classification_task(small_task_spec());
    EncoderParams teacher = init_params(small_teacher_config(), 5);
    teacher.set_requires_grad(false);
    EncoderParams student = init_params(small_student_config(), 6);
    RunConfig rc = quick_run_config();
    rc.stage2_epochs = 2;

    const std::uint64_t head_w = tensor_digest(student.head_weight);
    auto metrics = stage2_prediction_distill(teacher, student, rc, data);
    REQUIRE(metrics.size() == 2);
    REQUIRE(tensor_digest(student.head_weight) != head_w);
}

TEST_CASE("run_experiment is bitwise deterministic including its metrics stream") {
    TaskData data = generate_classification_task(small_task_spec());
    EncoderParams teacher = init_params(small_teacher_config(), 5);
    teacher.set_requires_grad(false);
    RunConfig rc = quick_run_config();

    auto run_once = [&](std::vector<std::string>& lines, EncoderParams* student) {
        MetricsSink sink = [&](const nlohmann::ordered_json& j) { lines.push_back(j.dump()); };
        return run_experiment(rc, small_student_config(), data, teacher, sink, "", student);
    };
    std::vector<std::string> lines1, lines2;
    EncoderParams s1, s2;
    RunReport rep1 = run_once(lines1, &s1);
    RunReport rep2 = run_once(lines2, &s2);
    REQUIRE(lines1 == lines2);
    REQUIRE(params_digest(s1) == params_digest(s2));
    REQUIRE(rep1.final_dev_metric == rep2.final_dev_metric);
    REQUIRE(!lines1.empty());
    REQUIRE(nlohmann::json::parse(lines1.back()).at("event") == "final");

    // A different seed changes the stream.
    RunConfig other = rc;
    other.seed = 43;
    std::vector<std::string> lines3;
    MetricsSink sink3 = [&](const nlohmann::ordered_json& j) { lines3.push_back(j.dump()); };
    run_experiment(other, small_student_config(), data, teacher, sink3);
    REQUIRE(lines1 != lines3);
}

TEST_CASE("skip-stage-1 variant omits stage-1 work and diverges from the full run") {
    TaskData data = generate_classification_task(small_task_spec());
    EncoderParams teacher = init_params(small_teacher_config(), 5);
    teacher.set_requires_grad(false);

    RunConfig rc = quick_run_config();
    EncoderParams full_student;
    run_experiment(rc, small_student_config(), data, teacher, nullptr, "", &full_student);

    rc.skip_stage1 = true;
    EncoderParams skip_student;
    RunReport skip_rep =
        run_experiment(rc, small_student_config(), data, teacher, nullptr, "", &skip_student);
    REQUIRE(skip_rep.stage1_epoch_mean_losses.empty());
    REQUIRE(params_digest(full_student) != params_digest(skip_student));
}

TEST_CASE("data fraction subsamples the training split") {
    TaskData data = generate_classification_task(small_task_spec());
    EncoderParams teacher = init_params(small_teacher_config(), 5);
    teacher.set_requires_grad(false);
    RunConfig rc = quick_run_config();
    rc.data_fraction = 0.5;
    RunReport rep = run_experiment(rc, small_student_config(), data, teacher);
    REQUIRE(rep.train_examples_used == 16);
    rc.data_fraction = 1.0;
    REQUIRE(run_experiment(rc, small_student_config(), data, teacher).train_examples_used == 32);
}

TEST_CASE("learnable mapping run writes a full trajectory and final weights") {
    TaskData data = generate_classification_task(small_task_spec());
    EncoderParams teacher = init_params(small_teacher_config(), 5);
    teacher.set_requires_grad(false);
    RunConfig rc = quick_run_config();
    rc.map_kind = MappingKind::Learnable;
    rc.map_init = LearnableInit::BaseLike;
    rc.map_lr = 1e-2;

    const std::string path = "pipeline_trajectory_tmp.csv";
    RunReport rep = run_experiment(rc, small_student_config(), data, teacher, nullptr, path);
    REQUIRE(rep.trajectory_path == path);
    REQUIRE(rep.final_mapping_weights.size() == 1);   // one student layer
    REQUIRE(rep.final_mapping_weights[0].size() == 2);  // block size N/M = 2

    std::ifstream in(path);
    std::string line;
    REQUIRE(std::getline(in, line));
    REQUIRE(line == "step,student_layer,block_index,weight");
    std::size_t rows = 0;
    while (std::getline(in, line)) ++rows;
    // 1 epoch x 4 batches = 4 steps, each logging 1 layer x 2 entries.
    REQUIRE(rows == 4 * 2);
    std::remove(path.c_str());

    // Non-learnable runs produce no trajectory even when a path is offered.
    rc.map_kind = MappingKind::Base;
    RunReport base_rep = run_experiment(rc, small_student_config(), data, teacher, nullptr, path);
    REQUIRE(base_rep.trajectory_path.empty());
    REQUIRE(!std::ifstream(path).good());
}

TEST_CASE("a non-finite loss aborts the run and names the step") {
    TaskData data = generate_classification_task(small_task_spec());
    EncoderParams teacher = init_params(small_teacher_config(), 5);
    // Poison every embedding row so any batch produces a non-finite forward pass.
    for (double& v : teacher.token_embedding.data()) v = std::nan("");
    teacher.set_requires_grad(false);
    EncoderParams student = init_params(small_student_config(), 6);
    MappingState mapping = MappingState::base(BlockPartition(2, 1));
    RunConfig rc = quick_run_config();
    try {
        stage1_transformer_distill(teacher, student, mapping, LossConfig{}, rc, data.train);
        FAIL("expected AbortedRunError");
    } catch (const AbortedRunError& e) {
        REQUIRE(e.step == 0);
        REQUIRE_THAT(e.what(), Catch::Matchers::ContainsSubstring("step 0"));
    }
}

TEST_CASE("regression pipeline end to end") {
    TaskSpec spec = small_task_spec();
    spec.kind = TaskKind::Regression;
    spec.seq_len = 9;
    TaskData data = generate_regression_task(spec);
    ModelConfig tc = small_teacher_config();
    tc.max_seq_len = 9;
    tc.n_outputs = 1;
    ModelConfig sc = small_student_config();
    sc.max_seq_len = 9;
    sc.n_outputs = 1;
    EncoderParams teacher = finetune_teacher(data, tc, 42, 3, 1e-3, 8).params;
    teacher.set_requires_grad(false);
    RunConfig rc = quick_run_config();
    RunReport rep = run_experiment(rc, sc, data, teacher);
    REQUIRE(std::isfinite(rep.final_dev_metric));
    REQUIRE(rep.final_dev_metric >= -1.0);
    REQUIRE(rep.final_dev_metric <= 1.0);
}
