#pragma once

// Finite-difference verification of the full stage-1 distillation loss
// across loss/mapping/alpha variants, on a tiny fixed configuration.
// Shared by the gradcheck CLI command and the verification suites.

#include <string>
#include <vector>

#include "kdlab/gradcheck.hpp"
#include "kdlab/losses.hpp"
#include "kdlab/mapping.hpp"
#include "kdlab/model.hpp"
#include "kdlab/pipeline.hpp"

namespace kdlab {

struct GradCheckCase {
    AttentionLossKind attn_kind;
    MappingKind map_kind;
    double alpha;
    std::string name() const {
        return std::string(attention_loss_name(attn_kind)) + "/" + mapping_kind_name(map_kind) +
               "/alpha=" + std::to_string(alpha);
    }
};

inline ModelConfig gradcheck_teacher_config() {
    ModelConfig c;
    c.n_layers = 2;
    c.d_model = 8;
    c.n_heads = 2;
    c.d_ff = 8;
    c.vocab_size = 8;
    c.max_seq_len = 4;
    c.n_outputs = 2;
    return c;
}

inline ModelConfig gradcheck_student_config() {
    ModelConfig c = gradcheck_teacher_config();
    c.n_layers = 1;
    c.d_model = 4;
    c.d_ff = 4;
    return c;
}

// Runs the FD check for one variant. Parameter groups cover the student body,
// both projections, and theta when the mapping is learnable.
inline GradCheckResult stage1_gradcheck(const GradCheckCase& gc, double step = 1e-5,
                                        std::size_t max_coords = 4, bool corrupt_gradient = false) {
    const ModelConfig tc = gradcheck_teacher_config();
    const ModelConfig sc = gradcheck_student_config();
    EncoderParams teacher = init_params(tc, 11);
    teacher.set_requires_grad(false);
    EncoderParams student = init_params(sc, 12);
    ProjectionParams proj = ProjectionParams::init(sc.d_model, tc.d_model, 13);

    MappingState mapping = [&] {
        BlockPartition part(tc.n_layers, sc.n_layers);
        switch (gc.map_kind) {
            case MappingKind::Base: return MappingState::base(part);
            case MappingKind::Mean: return MappingState::mean(part);
            case MappingKind::Random: return MappingState::random(part, 5);  // fixed draw via k=0
            case MappingKind::Learnable:
                return MappingState::learnable(part, LearnableInit::BaseLike, 5e-5);
        }
        throw std::logic_error("unreachable");
    }();

    TokenBatch tokens = TokenBatch::from_rows({{0, 1, 2, 3}, {4, 5, 6, 7}});
    ForwardTrace teacher_trace;
    {
        NoGradGuard ng;
        teacher_trace = forward_with_trace(teacher, tokens);
    }

    LossConfig loss_cfg;
    loss_cfg.attention_kind = gc.attn_kind;
    loss_cfg.alpha = gc.alpha;

    auto f = [&]() {
        ForwardTrace student_trace = forward_with_trace(student, tokens);
        return transformer_layer_loss(student_trace, teacher_trace, mapping, proj, loss_cfg, 0);
    };

    std::vector<std::pair<std::string, Tensor>> params;
    for (auto& [name, t] : student.named_tensors())
        if (name != "head.weight" && name != "head.bias") params.emplace_back("student." + name, t);
    params.emplace_back("projection.w_hidden", proj.w_hidden);
    params.emplace_back("projection.w_embedding", proj.w_embedding);
    if (gc.map_kind == MappingKind::Learnable) params.emplace_back("theta", mapping.theta());

    std::function<void()> hook;
    if (corrupt_gradient) {
        // Test hook: damage one analytic gradient so the check must flag it.
        Tensor emb = student.token_embedding;
        hook = [emb]() mutable {
            for (double& g : emb.grad()) g += 1.0;
        };
    }
    return grad_check(f, params, step, max_coords, 99, hook);
}

inline std::vector<GradCheckCase> all_gradcheck_cases() {
    std::vector<GradCheckCase> cases;
    for (AttentionLossKind ak : {AttentionLossKind::Mse, AttentionLossKind::Kl})
        for (MappingKind mk : {MappingKind::Base, MappingKind::Random, MappingKind::Mean,
                               MappingKind::Learnable})
            for (double alpha : {0.0, 0.5, 1.0})
                cases.push_back({ak, mk, alpha});
    return cases;
}

}  // namespace kdlab
