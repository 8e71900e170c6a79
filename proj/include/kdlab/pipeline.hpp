#pragma once

// Teacher fine-tuning and the two-substage task distillation: transformer
// layer distillation (stage 1) followed by prediction layer distillation
// (stage 2), with a skip-stage-1 variant.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "kdlab/checkpoint.hpp"
#include "kdlab/losses.hpp"
#include "kdlab/mapping.hpp"
#include "kdlab/model.hpp"
#include "kdlab/optimizer.hpp"
#include "kdlab/tasks.hpp"

namespace kdlab {

using MetricsSink = std::function<void(const nlohmann::ordered_json&)>;

struct AbortedRunError : std::runtime_error {
    std::size_t step;
    AbortedRunError(const std::string& what, std::size_t step_)
        : std::runtime_error(what + " at step " + std::to_string(step_)), step(step_) {}
};

struct RunConfig {
    std::uint64_t seed = 42;
    int stage1_epochs = -1;  // -1: 30 for classification, 20 for regression
    std::size_t stage2_epochs = 3;
    double stage1_lr = 5e-5;
    double stage2_lr = 2e-5;
    std::size_t stage1_batch = 32;
    std::size_t stage2_batch = 32;
    double alpha = 0.5;
    AttentionLossKind attention_kind = AttentionLossKind::Mse;
    MappingKind map_kind = MappingKind::Base;
    LearnableInit map_init = LearnableInit::Uniform;
    double map_lr = 5e-5;
    double data_fraction = 1.0;
    bool skip_stage1 = false;
    double temperature = 1.0;

    std::size_t resolved_stage1_epochs(TaskKind task) const {
        if (stage1_epochs >= 0) return static_cast<std::size_t>(stage1_epochs);
        return task == TaskKind::Classification ? 30 : 20;
    }
};

struct RunReport {
    std::string config_echo;
    double final_dev_metric = 0.0;
    std::vector<double> stage2_dev_metrics;       // per epoch
    std::vector<double> stage1_epoch_mean_losses; // per epoch
    double wall_clock_seconds = 0.0;
    std::string trajectory_path;
    std::size_t train_examples_used = 0;
    std::vector<std::vector<double>> final_mapping_weights;  // Learnable only
};

inline MappingState make_mapping(const RunConfig& cfg, const BlockPartition& part) {
    switch (cfg.map_kind) {
        case MappingKind::Base: return MappingState::base(part);
        case MappingKind::Mean: return MappingState::mean(part);
        case MappingKind::Random: return MappingState::random(part, cfg.seed);
        case MappingKind::Learnable: return MappingState::learnable(part, cfg.map_init, cfg.map_lr);
    }
    throw std::logic_error("unreachable mapping kind");
}

inline TokenBatch gather_batch(const Dataset& data, const std::vector<std::size_t>& idx) {
    TokenBatch tb;
    tb.batch = idx.size();
    tb.seq = data.seq_len;
    for (std::size_t i : idx)
        tb.ids.insert(tb.ids.end(), data.examples[i].tokens.begin(), data.examples[i].tokens.end());
    return tb;
}

// Dev-set metric: MCC over argmax predictions (classification) or Pearson
// correlation of the scalar outputs (regression).
inline double evaluate(const EncoderParams& params, const Dataset& data, std::size_t batch_size = 64) {
    NoGradGuard ng;
    std::vector<int> pred_cls, gold_cls;
    std::vector<double> pred_val, gold_val;
    for (std::size_t start = 0; start < data.size(); start += batch_size) {
        std::vector<std::size_t> idx;
        for (std::size_t i = start; i < std::min(data.size(), start + batch_size); ++i) idx.push_back(i);
        Tensor logits = predict(params, gather_batch(data, idx));
        const std::size_t c = logits.shape()[1];
        for (std::size_t n = 0; n < idx.size(); ++n) {
            if (data.kind == TaskKind::Classification) {
                std::size_t best = 0;
                for (std::size_t j = 1; j < c; ++j)
                    if (logits.data()[n * c + j] > logits.data()[n * c + best]) best = j;
                pred_cls.push_back(static_cast<int>(best));
                gold_cls.push_back(static_cast<int>(data.examples[idx[n]].label));
            } else {
                pred_val.push_back(logits.data()[n * c]);
                gold_val.push_back(data.examples[idx[n]].label);
            }
        }
    }
    return data.kind == TaskKind::Classification ? matthews_corrcoef(pred_cls, gold_cls)
                                                 : pearson_corr(pred_val, gold_val);
}

inline double train_accuracy(const EncoderParams& params, const Dataset& data) {
    NoGradGuard ng;
    std::size_t correct = 0;
    const std::size_t batch = 64;
    for (std::size_t start = 0; start < data.size(); start += batch) {
        std::vector<std::size_t> idx;
        for (std::size_t i = start; i < std::min(data.size(), start + batch); ++i) idx.push_back(i);
        Tensor logits = predict(params, gather_batch(data, idx));
        const std::size_t c = logits.shape()[1];
        for (std::size_t n = 0; n < idx.size(); ++n) {
            std::size_t best = 0;
            for (std::size_t j = 1; j < c; ++j)
                if (logits.data()[n * c + j] > logits.data()[n * c + best]) best = j;
            if (static_cast<int>(best) == static_cast<int>(data.examples[idx[n]].label)) ++correct;
        }
    }
    return static_cast<double>(correct) / static_cast<double>(data.size());
}

struct TeacherResult {
    EncoderParams params;
    double dev_metric = 0.0;
};

// Supervised training from scratch on the synthetic task; the fine-tuned
// result plays the role of the task-specific teacher.
inline TeacherResult finetune_teacher(const TaskData& data, const ModelConfig& config,
                                      std::uint64_t seed, std::size_t epochs, double lr,
                                      std::size_t batch_size, const MetricsSink& sink = nullptr) {
    config.validate();
    EncoderParams params = init_params(config, seed);
    AdamOptimizer opt(params.all_tensors(), lr);
    std::size_t step = 0;
    for (std::size_t epoch = 0; epoch < epochs; ++epoch) {
        for (const auto& idx : batch_indices(data.train.size(), batch_size, seed, epoch)) {
            TokenBatch tb = gather_batch(data.train, idx);
            Tensor logits = predict(params, tb);
            Tensor loss;
            if (data.train.kind == TaskKind::Classification) {
                std::vector<int> labels;
                for (std::size_t i : idx)
                    labels.push_back(static_cast<int>(data.train.examples[i].label));
                loss = cross_entropy_with_logits(logits, labels);
            } else {
                std::vector<double> targets;
                for (std::size_t i : idx) targets.push_back(data.train.examples[i].label);
                loss = mse(logits, Tensor::from_values({idx.size(), 1}, std::move(targets)));
            }
            if (std::isnan(loss.value())) throw AbortedRunError("teacher loss is NaN", step);
            backward(loss);
            opt.step();
            if (sink)
                sink({{"event", "step"}, {"stage", 0}, {"epoch", epoch}, {"step", step},
                      {"loss_total", loss.value()}});
            ++step;
        }
    }
    return {params, evaluate(params, data.dev)};
}

struct Stage1Result {
    ProjectionParams projections;
    std::vector<double> epoch_mean_losses;
};

// Stage 1: transformer layer distillation. Optimizes the student body plus
// the W_h/W_e projections (and theta via its own optimizer when learnable);
// the prediction head is untouched.
inline Stage1Result stage1_transformer_distill(const EncoderParams& teacher, EncoderParams& student,
                                               MappingState& mapping, const LossConfig& loss_cfg,
                                               const RunConfig& run_cfg, const Dataset& train,
                                               const MetricsSink& sink = nullptr) {
    check_distill_compat(teacher.config, student.config);
    Stage1Result result;
    result.projections =
        ProjectionParams::init(student.config.d_model, teacher.config.d_model, run_cfg.seed + 17);
    std::vector<Tensor> stage1_params = student.body_tensors();
    stage1_params.push_back(result.projections.w_hidden);
    stage1_params.push_back(result.projections.w_embedding);
    AdamOptimizer opt(stage1_params, run_cfg.stage1_lr);

    const std::size_t epochs = run_cfg.resolved_stage1_epochs(train.kind);
    std::size_t step = 0;
    for (std::size_t epoch = 0; epoch < epochs; ++epoch) {
        double epoch_loss = 0.0;
        std::size_t epoch_batches = 0;
        for (const auto& idx : batch_indices(train.size(), run_cfg.stage1_batch, run_cfg.seed, epoch)) {
            TokenBatch tb = gather_batch(train, idx);
            ForwardTrace teacher_trace;
            {
                NoGradGuard ng;
                teacher_trace = forward_with_trace(teacher, tb);
            }
            ForwardTrace student_trace = forward_with_trace(student, tb);
            LossBreakdown bd;
            Tensor loss = transformer_layer_loss(student_trace, teacher_trace, mapping,
                                                 result.projections, loss_cfg, step, &bd);
            if (std::isnan(loss.value())) throw AbortedRunError("stage-1 loss is NaN", step);
            backward(loss);
            opt.step();
            if (mapping.kind() == MappingKind::Learnable) mapping.map_step(step);
            if (sink)
                sink({{"event", "step"}, {"stage", 1}, {"epoch", epoch}, {"step", step},
                      {"loss_total", bd.total}, {"loss_embd", bd.embedding},
                      {"loss_hidn", bd.hidden}, {"loss_attn", bd.attention}, {"loss_pred", 0.0},
                      {"alpha", loss_cfg.alpha}, {"map_kind", mapping_kind_name(mapping.kind())}});
            epoch_loss += bd.total;
            ++epoch_batches;
            ++step;
        }
        result.epoch_mean_losses.push_back(epoch_loss / static_cast<double>(epoch_batches));
    }
    return result;
}

// Stage 2: prediction layer distillation over all student parameters
// including the head. Projections and theta are frozen by construction.
inline std::vector<double> stage2_prediction_distill(const EncoderParams& teacher,
                                                     EncoderParams& student, const RunConfig& run_cfg,
                                                     const TaskData& data,
                                                     const MetricsSink& sink = nullptr) {
    AdamOptimizer opt(student.all_tensors(), run_cfg.stage2_lr);
    const TaskKind task = data.train.kind;
    std::vector<double> dev_metrics;
    std::size_t step = 0;
    for (std::size_t epoch = 0; epoch < run_cfg.stage2_epochs; ++epoch) {
        for (const auto& idx :
             batch_indices(data.train.size(), run_cfg.stage2_batch, run_cfg.seed + 1, epoch)) {
            TokenBatch tb = gather_batch(data.train, idx);
            Tensor teacher_logits;
            {
                NoGradGuard ng;
                teacher_logits = predict(teacher, tb);
            }
            Tensor loss =
                prediction_loss(predict(student, tb), teacher_logits, task, run_cfg.temperature);
            if (std::isnan(loss.value())) throw AbortedRunError("stage-2 loss is NaN", step);
            backward(loss);
            opt.step();
            if (sink)
                sink({{"event", "step"}, {"stage", 2}, {"epoch", epoch}, {"step", step},
                      {"loss_total", loss.value()}, {"loss_embd", 0.0}, {"loss_hidn", 0.0},
                      {"loss_attn", 0.0}, {"loss_pred", loss.value()}, {"alpha", run_cfg.alpha},
                      {"map_kind", mapping_kind_name(run_cfg.map_kind)}});
            ++step;
        }
        const double metric = evaluate(student, data.dev);
        dev_metrics.push_back(metric);
        if (sink)
            sink({{"event", "dev_metric"}, {"stage", 2}, {"epoch", epoch}, {"dev_metric", metric}});
    }
    return dev_metrics;
}

// Full experiment: optional stage 1, then stage 2, then final evaluation.
inline RunReport run_experiment(const RunConfig& run_cfg, const ModelConfig& student_config,
                                const TaskData& data, const EncoderParams& teacher,
                                const MetricsSink& sink = nullptr,
                                const std::string& trajectory_path = "",
                                EncoderParams* student_out = nullptr) {
    const auto t0 = std::chrono::steady_clock::now();
    RunReport report;
    TaskData working = data;
    working.train = subsample(working.train, run_cfg.data_fraction, run_cfg.seed);
    report.train_examples_used = working.train.size();

    EncoderParams student = init_params(student_config, run_cfg.seed + 1);
    MappingState mapping = make_mapping(run_cfg, BlockPartition(teacher.config.n_layers,
                                                                student_config.n_layers));
    if (!trajectory_path.empty() && run_cfg.map_kind == MappingKind::Learnable)
        mapping.open_trajectory_file(trajectory_path);

    if (!run_cfg.skip_stage1) {
        LossConfig loss_cfg;
        loss_cfg.attention_kind = run_cfg.attention_kind;
        loss_cfg.alpha = run_cfg.alpha;
        loss_cfg.temperature = run_cfg.temperature;
        Stage1Result s1 =
            stage1_transformer_distill(teacher, student, mapping, loss_cfg, run_cfg, working.train, sink);
        report.stage1_epoch_mean_losses = s1.epoch_mean_losses;
    }
    report.stage2_dev_metrics = stage2_prediction_distill(teacher, student, run_cfg, working, sink);
    report.final_dev_metric = evaluate(student, working.dev);
    if (run_cfg.map_kind == MappingKind::Learnable)
        report.final_mapping_weights = mapping.current_weights();
    if (sink) sink({{"event", "final"}, {"dev_metric", report.final_dev_metric}});
    if (student_out) *student_out = student;
    report.trajectory_path =
        run_cfg.map_kind == MappingKind::Learnable ? trajectory_path : std::string();
    report.wall_clock_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return report;
}

// FNV-1a over the raw data bytes; used to assert parameter immutability.
inline std::uint64_t tensor_digest(const Tensor& t) {
    std::uint64_t h = 1469598103934665603ull;
    for (double v : t.data()) {
        std::uint64_t bits;
        std::memcpy(&bits, &v, 8);
        for (int i = 0; i < 8; ++i) {
            h ^= (bits >> (8 * i)) & 0xff;
            h *= 1099511628211ull;
        }
    }
    return h;
}

inline std::uint64_t params_digest(const EncoderParams& p) {
    std::uint64_t h = 1469598103934665603ull;
    for (const auto& [name, t] : p.named_tensors()) h ^= tensor_digest(t) + 0x9E3779B97F4A7C15ull + (h << 6) + (h >> 2);
    return h;
}

}  // namespace kdlab
