#pragma once

// Miniature multi-head transformer encoder (post-layer-norm residuals,
// learned absolute positions, first-position pooling) whose forward pass
// records everything the distillation losses consume.

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "kdlab/tensor.hpp"

namespace kdlab {

struct ModelConfig {
    std::size_t n_layers = 2;
    std::size_t d_model = 16;
    std::size_t n_heads = 4;
    std::size_t d_ff = 32;
    std::size_t vocab_size = 32;
    std::size_t max_seq_len = 16;
    std::size_t n_outputs = 2;  // class count, or 1 for a regression head

    std::size_t head_dim() const { return d_model / n_heads; }

    void validate() const {
        if (n_layers == 0 || d_model == 0 || n_heads == 0 || d_ff == 0 || vocab_size == 0 ||
            max_seq_len == 0 || n_outputs == 0)
            throw std::invalid_argument("ModelConfig: all extents must be positive");
        if (d_model % n_heads != 0)
            throw std::invalid_argument("ModelConfig: d_model " + std::to_string(d_model) +
                                        " not divisible by n_heads " + std::to_string(n_heads));
    }
};

// Teacher/student compatibility for the block mapping framework.
inline void check_distill_compat(const ModelConfig& teacher, const ModelConfig& student) {
    if (teacher.n_layers % student.n_layers != 0)
        throw std::invalid_argument("teacher layer count " + std::to_string(teacher.n_layers) +
                                    " not divisible by student layer count " +
                                    std::to_string(student.n_layers));
    if (teacher.n_heads != student.n_heads)
        throw std::invalid_argument("teacher/student head counts differ (" +
                                    std::to_string(teacher.n_heads) + " vs " +
                                    std::to_string(student.n_heads) + ")");
}

struct LayerParams {
    std::vector<Tensor> w_q, w_k, w_v;  // per head: [d_model, head_dim]
    std::vector<Tensor> b_q, b_k, b_v;  // per head: [head_dim]
    Tensor w_o, b_o;                    // [d_model, d_model], [d_model]
    Tensor ln1_gain, ln1_bias;
    Tensor w_ff1, b_ff1;                // [d_model, d_ff], [d_ff]
    Tensor w_ff2, b_ff2;                // [d_ff, d_model], [d_model]
    Tensor ln2_gain, ln2_bias;
};

struct EncoderParams {
    ModelConfig config;
    Tensor token_embedding;     // [vocab, d_model]
    Tensor position_embedding;  // [max_seq_len, d_model]
    std::vector<LayerParams> layers;
    Tensor head_weight, head_bias;  // [d_model, n_outputs], [n_outputs]

    std::vector<std::pair<std::string, Tensor>> named_tensors() const {
        std::vector<std::pair<std::string, Tensor>> out;
        out.emplace_back("token_embedding", token_embedding);
        out.emplace_back("position_embedding", position_embedding);
        for (std::size_t l = 0; l < layers.size(); ++l) {
            const auto& lp = layers[l];
            const std::string p = "layer" + std::to_string(l) + ".";
            for (std::size_t h = 0; h < lp.w_q.size(); ++h) {
                const std::string hp = p + "head" + std::to_string(h) + ".";
                out.emplace_back(hp + "w_q", lp.w_q[h]);
                out.emplace_back(hp + "b_q", lp.b_q[h]);
                out.emplace_back(hp + "w_k", lp.w_k[h]);
                out.emplace_back(hp + "b_k", lp.b_k[h]);
                out.emplace_back(hp + "w_v", lp.w_v[h]);
                out.emplace_back(hp + "b_v", lp.b_v[h]);
            }
            out.emplace_back(p + "w_o", lp.w_o);
            out.emplace_back(p + "b_o", lp.b_o);
            out.emplace_back(p + "ln1_gain", lp.ln1_gain);
            out.emplace_back(p + "ln1_bias", lp.ln1_bias);
            out.emplace_back(p + "w_ff1", lp.w_ff1);
            out.emplace_back(p + "b_ff1", lp.b_ff1);
            out.emplace_back(p + "w_ff2", lp.w_ff2);
            out.emplace_back(p + "b_ff2", lp.b_ff2);
            out.emplace_back(p + "ln2_gain", lp.ln2_gain);
            out.emplace_back(p + "ln2_bias", lp.ln2_bias);
        }
        out.emplace_back("head.weight", head_weight);
        out.emplace_back("head.bias", head_bias);
        return out;
    }

    // All trainable tensors except the task head (stage-1 parameter set).
    std::vector<Tensor> body_tensors() const {
        std::vector<Tensor> out;
        for (auto& [name, t] : named_tensors())
            if (name != "head.weight" && name != "head.bias") out.push_back(t);
        return out;
    }

    std::vector<Tensor> all_tensors() const {
        std::vector<Tensor> out;
        for (auto& [name, t] : named_tensors()) out.push_back(t);
        return out;
    }

    void set_requires_grad(bool v) {
        for (auto& [name, t] : named_tensors()) t.set_requires_grad(v);
    }

    bool all_finite() const {
        for (auto& [name, t] : named_tensors())
            if (!t.all_finite()) return false;
        return true;
    }
};

struct TokenBatch {
    std::size_t batch = 0, seq = 0;
    std::vector<int> ids;  // row-major [batch, seq]

    static TokenBatch from_rows(const std::vector<std::vector<int>>& rows) {
        TokenBatch tb;
        tb.batch = rows.size();
        tb.seq = rows.empty() ? 0 : rows[0].size();
        for (const auto& r : rows) {
            if (r.size() != tb.seq) throw std::invalid_argument("TokenBatch: ragged rows");
            tb.ids.insert(tb.ids.end(), r.begin(), r.end());
        }
        return tb;
    }
};

// Everything a distillation loss consumes, captured in one pass.
// attention_logits holds pre-softmax scaled scores QK^T/sqrt(head_dim).
struct ForwardTrace {
    Tensor embedding_output;                            // [b, s, d_model]
    std::vector<Tensor> hidden_states;                  // per layer: [b, s, d_model]
    std::vector<std::vector<Tensor>> attention_logits;  // [layer][head]: [b, s, s]
    Tensor logits;                                      // [b, n_outputs]
};

namespace detail {

inline Tensor uniform_init(Shape shape, std::size_t fan_in, std::mt19937_64& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    std::uniform_real_distribution<double> dist(-bound, bound);
    std::vector<double> vals(shape_numel(shape));
    for (double& v : vals) v = dist(rng);
    return Tensor::from_values(std::move(shape), std::move(vals), true);
}

}  // namespace detail

inline EncoderParams init_params(const ModelConfig& config, std::uint64_t seed) {
    config.validate();
    std::mt19937_64 rng(seed);
    EncoderParams p;
    p.config = config;
    const std::size_t d = config.d_model, hd = config.head_dim();
    p.token_embedding = detail::uniform_init({config.vocab_size, d}, d, rng);
    p.position_embedding = detail::uniform_init({config.max_seq_len, d}, d, rng);
    for (std::size_t l = 0; l < config.n_layers; ++l) {
        LayerParams lp;
        for (std::size_t h = 0; h < config.n_heads; ++h) {
            lp.w_q.push_back(detail::uniform_init({d, hd}, d, rng));
            lp.b_q.push_back(Tensor::zeros({hd}, true));
            lp.w_k.push_back(detail::uniform_init({d, hd}, d, rng));
            lp.b_k.push_back(Tensor::zeros({hd}, true));
            lp.w_v.push_back(detail::uniform_init({d, hd}, d, rng));
            lp.b_v.push_back(Tensor::zeros({hd}, true));
        }
        lp.w_o = detail::uniform_init({d, d}, d, rng);
        lp.b_o = Tensor::zeros({d}, true);
        lp.ln1_gain = Tensor::filled({d}, 1.0, true);
        lp.ln1_bias = Tensor::zeros({d}, true);
        lp.w_ff1 = detail::uniform_init({d, config.d_ff}, d, rng);
        lp.b_ff1 = Tensor::zeros({config.d_ff}, true);
        lp.w_ff2 = detail::uniform_init({config.d_ff, d}, config.d_ff, rng);
        lp.b_ff2 = Tensor::zeros({d}, true);
        lp.ln2_gain = Tensor::filled({d}, 1.0, true);
        lp.ln2_bias = Tensor::zeros({d}, true);
        p.layers.push_back(std::move(lp));
    }
    p.head_weight = detail::uniform_init({d, config.n_outputs}, d, rng);
    p.head_bias = Tensor::zeros({config.n_outputs}, true);
    return p;
}

inline ForwardTrace forward_with_trace(const EncoderParams& params, const TokenBatch& tokens) {
    const ModelConfig& cfg = params.config;
    if (tokens.seq > cfg.max_seq_len)
        throw std::invalid_argument("forward: sequence length " + std::to_string(tokens.seq) +
                                    " exceeds max_seq_len " + std::to_string(cfg.max_seq_len));
    for (std::size_t i = 0; i < tokens.ids.size(); ++i)
        if (tokens.ids[i] < 0 || static_cast<std::size_t>(tokens.ids[i]) >= cfg.vocab_size)
            throw std::invalid_argument("forward: token id " + std::to_string(tokens.ids[i]) +
                                        " out of range at position " + std::to_string(i));

    ForwardTrace trace;
    Tensor x = add_position(embedding_lookup(params.token_embedding, tokens.ids, tokens.batch, tokens.seq),
                            params.position_embedding);
    trace.embedding_output = x;
    const double inv_sqrt_hd = 1.0 / std::sqrt(static_cast<double>(cfg.head_dim()));

    for (const LayerParams& lp : params.layers) {
        std::vector<Tensor> head_outputs, head_logits;
        for (std::size_t h = 0; h < cfg.n_heads; ++h) {
            Tensor q = add_bias(matmul(x, lp.w_q[h]), lp.b_q[h]);
            Tensor k = add_bias(matmul(x, lp.w_k[h]), lp.b_k[h]);
            Tensor v = add_bias(matmul(x, lp.w_v[h]), lp.b_v[h]);
            Tensor a = scale(matmul(q, transpose_last2(k)), inv_sqrt_hd);  // [b, s, s]
            head_logits.push_back(a);
            head_outputs.push_back(matmul(softmax_rows(a), v));
        }
        trace.attention_logits.push_back(head_logits);
        Tensor attn = add_bias(matmul(concat_last(head_outputs), lp.w_o), lp.b_o);
        x = layer_norm(add(x, attn), lp.ln1_gain, lp.ln1_bias);
        Tensor ff = add_bias(matmul(relu(add_bias(matmul(x, lp.w_ff1), lp.b_ff1)), lp.w_ff2), lp.b_ff2);
        x = layer_norm(add(x, ff), lp.ln2_gain, lp.ln2_bias);
        trace.hidden_states.push_back(x);
    }

    trace.logits = add_bias(matmul(select_first(x), params.head_weight), params.head_bias);
    return trace;
}

inline Tensor predict(const EncoderParams& params, const TokenBatch& tokens) {
    return forward_with_trace(params, tokens).logits;
}

}  // namespace kdlab
