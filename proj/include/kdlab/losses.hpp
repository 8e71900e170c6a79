#pragma once

// Distillation losses: embedding loss, per-layer hidden and attention losses
// (MSE on raw attention logits or KL on row-softmaxed distributions), the
// alpha-weighted transformer-layer combination, and the prediction loss.

#include <cmath>
#include <stdexcept>
#include <vector>

#include "kdlab/mapping.hpp"
#include "kdlab/model.hpp"
#include "kdlab/tensor.hpp"

namespace kdlab {

enum class AttentionLossKind { Mse, Kl };
enum class KlDirection { StudentFirst, TeacherFirst };
enum class TaskKind { Classification, Regression };

inline const char* attention_loss_name(AttentionLossKind k) {
    return k == AttentionLossKind::Mse ? "mse" : "kl";
}

struct LossConfig {
    AttentionLossKind attention_kind = AttentionLossKind::Mse;
    double alpha = 0.5;  // in [0,1]; 0.5 reproduces the unweighted baseline
    double kl_epsilon = 1e-8;
    double temperature = 1.0;
    KlDirection kl_direction = KlDirection::StudentFirst;
    // If true, the KL path aggregates teacher attention after the row softmax
    // instead of before it (experimental switch; default combines raw logits).
    bool aggregate_post_softmax = false;

    void validate() const {
        if (!(alpha >= 0.0 && alpha <= 1.0))
            throw std::invalid_argument("LossConfig: alpha must lie in [0,1]");
        if (!(temperature > 0.0)) throw std::invalid_argument("LossConfig: temperature must be positive");
    }
};

// Learned projections from student width to teacher width; trained in stage 1.
struct ProjectionParams {
    Tensor w_hidden;     // [d_S, d_T], shared across transformer layers
    Tensor w_embedding;  // [d_S, d_T]

    static ProjectionParams init(std::size_t d_student, std::size_t d_teacher, std::uint64_t seed) {
        ProjectionParams p;
        if (d_student == d_teacher) {
            // Equal widths: start from the identity, so a student cloned from
            // its teacher sits at an exact zero of the stage-1 loss.
            p.w_hidden = Tensor::zeros({d_student, d_teacher}, true);
            p.w_embedding = Tensor::zeros({d_student, d_teacher}, true);
            for (std::size_t i = 0; i < d_student; ++i) {
                p.w_hidden.data()[i * d_teacher + i] = 1.0;
                p.w_embedding.data()[i * d_teacher + i] = 1.0;
            }
        } else {
            std::mt19937_64 rng(seed);
            p.w_hidden = detail::uniform_init({d_student, d_teacher}, d_student, rng);
            p.w_embedding = detail::uniform_init({d_student, d_teacher}, d_student, rng);
        }
        return p;
    }

    std::vector<Tensor> tensors() const { return {w_hidden, w_embedding}; }
};

// MSE(E_S . W_e, E_T)
inline Tensor embedding_loss(const Tensor& student_embedding, const Tensor& teacher_embedding,
                             const Tensor& w_embedding) {
    return mse(matmul(student_embedding, w_embedding), teacher_embedding);
}

// MSE(H_S[m] . W_h, aggregated teacher hidden state)
inline Tensor hidden_loss(const Tensor& student_hidden, const Tensor& teacher_hidden_agg,
                          const Tensor& w_hidden) {
    return mse(matmul(student_hidden, w_hidden), teacher_hidden_agg);
}

// (1/h) sum_i MSE over head i, on raw pre-softmax attention matrices.
inline Tensor attention_loss_mse(const std::vector<Tensor>& student_heads,
                                 const std::vector<Tensor>& teacher_heads) {
    if (student_heads.size() != teacher_heads.size() || student_heads.empty())
        throw std::invalid_argument("attention_loss_mse: head count mismatch (" +
                                    std::to_string(student_heads.size()) + " vs " +
                                    std::to_string(teacher_heads.size()) + ")");
    Tensor total = mse(student_heads[0], teacher_heads[0]);
    for (std::size_t i = 1; i < student_heads.size(); ++i)
        total = add(total, mse(student_heads[i], teacher_heads[i]));
    return scale(total, 1.0 / static_cast<double>(student_heads.size()));
}

namespace detail {

// Row-averaged KL(P || Q) with Q clamped below by eps inside the log.
// P comes from row-softmax, so it is strictly positive and log(P) is safe.
inline Tensor kl_rows(const Tensor& p_logits, const Tensor& q_logits, double eps,
                      bool p_already_softmaxed, bool q_already_softmaxed) {
    check_same_shape(p_logits, q_logits, "attention_loss_kl");
    const std::size_t n = p_logits.shape().back();
    const std::size_t rows = p_logits.numel() / n;
    Tensor p = p_already_softmaxed ? p_logits : softmax_rows(p_logits);
    Tensor q = q_already_softmaxed ? q_logits : softmax_rows(q_logits);
    Tensor per_elem = mul(p, sub(log_clamped(p, 1e-300), log_clamped(q, eps)));
    return scale(sum_all(per_elem), 1.0 / static_cast<double>(rows));
}

}  // namespace detail

// (1/h) sum_i KL(sigma(A_i^S), sigma(A_i^T)), rows averaged over batch*seq.
// Argument order follows the student-first convention unless flipped.
inline Tensor attention_loss_kl(const std::vector<Tensor>& student_heads,
                                const std::vector<Tensor>& teacher_heads, double kl_epsilon,
                                KlDirection direction = KlDirection::StudentFirst,
                                bool teacher_already_softmaxed = false) {
    if (student_heads.size() != teacher_heads.size() || student_heads.empty())
        throw std::invalid_argument("attention_loss_kl: head count mismatch (" +
                                    std::to_string(student_heads.size()) + " vs " +
                                    std::to_string(teacher_heads.size()) + ")");
    Tensor total;
    for (std::size_t i = 0; i < student_heads.size(); ++i) {
        Tensor term = direction == KlDirection::StudentFirst
                          ? detail::kl_rows(student_heads[i], teacher_heads[i], kl_epsilon,
                                            /*p_already_softmaxed=*/false, teacher_already_softmaxed)
                          : detail::kl_rows(teacher_heads[i], student_heads[i], kl_epsilon,
                                            teacher_already_softmaxed, /*q_already_softmaxed=*/false);
        total = i == 0 ? term : add(total, term);
    }
    return scale(total, 1.0 / static_cast<double>(student_heads.size()));
}

struct LossBreakdown {
    double total = 0.0;
    double embedding = 0.0;
    double hidden = 0.0;     // alpha-weighted sum over student layers
    double attention = 0.0;  // (1-alpha)-weighted sum over student layers
};

// Stage-1 objective: L_embd + sum_m [ 2a * L_hidn(m) + 2(1-a) * L_attn(m) ],
// with teacher targets aggregated by one weights_for(m, k) call per layer.
// Endpoints are exact: a term with zero weight is skipped entirely.
inline Tensor transformer_layer_loss(const ForwardTrace& student_trace,
                                     const ForwardTrace& teacher_trace, const MappingState& mapping,
                                     const ProjectionParams& proj, const LossConfig& cfg,
                                     std::size_t k, LossBreakdown* breakdown = nullptr) {
    cfg.validate();
    const BlockPartition& part = mapping.partition();
    if (student_trace.hidden_states.size() != part.student_layers ||
        teacher_trace.hidden_states.size() != part.teacher_layers)
        throw std::invalid_argument("transformer_layer_loss: traces do not match the block partition");

    Tensor total = embedding_loss(student_trace.embedding_output, teacher_trace.embedding_output,
                                  proj.w_embedding);
    LossBreakdown bd;
    bd.embedding = total.value();

    const double hw = 2.0 * cfg.alpha;
    const double aw = 2.0 * (1.0 - cfg.alpha);
    for (std::size_t m = 1; m <= part.student_layers; ++m) {
        Tensor v = mapping.weights_for(m, k);
        if (hw != 0.0) {
            Tensor h = hidden_loss(student_trace.hidden_states[m - 1],
                                   aggregate_hidden(teacher_trace, part, m, v), proj.w_hidden);
            Tensor weighted = hw == 1.0 ? h : scale(h, hw);
            bd.hidden += weighted.value();
            total = add(total, weighted);
        }
        if (aw != 0.0) {
            const auto& student_heads = student_trace.attention_logits[m - 1];
            Tensor a;
            if (cfg.attention_kind == AttentionLossKind::Mse) {
                a = attention_loss_mse(student_heads, aggregate_attention(teacher_trace, part, m, v));
            } else if (cfg.aggregate_post_softmax) {
                std::vector<Tensor> teacher_probs;
                const auto block = part.block(m);
                for (std::size_t h = 0; h < student_heads.size(); ++h) {
                    std::vector<Tensor> per_layer;
                    for (std::size_t l : block)
                        per_layer.push_back(softmax_rows(teacher_trace.attention_logits[l - 1][h]));
                    teacher_probs.push_back(weighted_sum(v, per_layer));
                }
                a = attention_loss_kl(student_heads, teacher_probs, cfg.kl_epsilon, cfg.kl_direction,
                                      /*teacher_already_softmaxed=*/true);
            } else {
                a = attention_loss_kl(student_heads, aggregate_attention(teacher_trace, part, m, v),
                                      cfg.kl_epsilon, cfg.kl_direction);
            }
            Tensor weighted = aw == 1.0 ? a : scale(a, aw);
            bd.attention += weighted.value();
            total = add(total, weighted);
        }
    }
    bd.total = total.value();
    if (breakdown) *breakdown = bd;
    return total;
}

// Classification: soft cross-entropy -sum sigma(z_T/t) log sigma(z_S/t),
// averaged over the batch. Regression: MSE of the scalar outputs.
inline Tensor prediction_loss(const Tensor& student_logits, const Tensor& teacher_logits,
                              TaskKind task, double temperature = 1.0) {
    detail::check_same_shape(student_logits, teacher_logits, "prediction_loss");
    if (student_logits.dim() != 2) throw std::invalid_argument("prediction_loss: expected [batch, k] logits");
    if (task == TaskKind::Regression) {
        if (student_logits.shape()[1] != 1)
            throw std::invalid_argument("prediction_loss: regression head must emit one scalar");
        return mse(student_logits, teacher_logits);
    }
    const std::size_t batch = student_logits.shape()[0];
    Tensor teacher_probs;
    {
        NoGradGuard ng;
        teacher_probs = softmax_rows(scale(teacher_logits, 1.0 / temperature));
    }
    Tensor log_student = log_clamped(softmax_rows(scale(student_logits, 1.0 / temperature)), 1e-300);
    return scale(sum_all(mul(teacher_probs, log_student)), -1.0 / static_cast<double>(batch));
}

}  // namespace kdlab
