#pragma once

// Block-based teacher->student layer mapping: partition the teacher layers
// into M contiguous blocks and weight each block with a normalized vector
// v(m), produced by one of four strategies (base / random / mean / learnable).

#include <cstdint>
#include <fstream>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "kdlab/model.hpp"
#include "kdlab/optimizer.hpp"
#include "kdlab/tensor.hpp"

namespace kdlab {

struct BlockPartition {
    std::size_t teacher_layers = 0;  // N
    std::size_t student_layers = 0;  // M

    BlockPartition() = default;
    BlockPartition(std::size_t n, std::size_t m) : teacher_layers(n), student_layers(m) {
        if (m == 0 || n == 0 || n % m != 0)
            throw std::invalid_argument("BlockPartition: teacher layers " + std::to_string(n) +
                                        " not divisible by student layers " + std::to_string(m));
    }

    std::size_t block_size() const { return teacher_layers / student_layers; }

    // 1-based teacher layer indices of block m (m in 1..M).
    std::vector<std::size_t> block(std::size_t m) const {
        check_index(m);
        std::vector<std::size_t> out;
        for (std::size_t j = 0; j < block_size(); ++j) out.push_back((m - 1) * block_size() + j + 1);
        return out;
    }

    void check_index(std::size_t m) const {
        if (m < 1 || m > student_layers)
            throw std::invalid_argument("student layer index " + std::to_string(m) +
                                        " out of range 1.." + std::to_string(student_layers));
    }
};

enum class MappingKind { Base, Random, Mean, Learnable };
enum class LearnableInit { Uniform, BaseLike };

inline const char* mapping_kind_name(MappingKind k) {
    switch (k) {
        case MappingKind::Base: return "base";
        case MappingKind::Random: return "random";
        case MappingKind::Mean: return "mean";
        case MappingKind::Learnable: return "learnable";
    }
    return "?";
}

struct TrajectoryRecord {
    std::size_t step, student_layer, block_index;
    double weight;
};

class MappingState {
public:
    MappingState() = default;

    static MappingState base(BlockPartition part) { return MappingState(MappingKind::Base, part); }
    static MappingState mean(BlockPartition part) { return MappingState(MappingKind::Mean, part); }
    static MappingState random(BlockPartition part, std::uint64_t seed) {
        MappingState s(MappingKind::Random, part);
        s.seed_ = seed;
        return s;
    }
    static MappingState learnable(BlockPartition part, LearnableInit init, double map_lr) {
        MappingState s(MappingKind::Learnable, part);
        s.map_lr_ = map_lr;
        const std::size_t m = part.student_layers, bs = part.block_size();
        std::vector<double> theta0(m * bs, 0.0);
        if (init == LearnableInit::BaseLike) {
            // Rows (-1, ..., -1, 1): softmax puts most weight on the last block layer.
            for (std::size_t r = 0; r < m; ++r) {
                for (std::size_t j = 0; j + 1 < bs; ++j) theta0[r * bs + j] = -1.0;
                theta0[r * bs + bs - 1] = 1.0;
            }
        }
        s.theta_ = Tensor::from_values({m, bs}, std::move(theta0), true);
        s.theta_opt_ = AdamOptimizer({s.theta_}, map_lr);
        return s;
    }

    MappingKind kind() const { return kind_; }
    const BlockPartition& partition() const { return partition_; }
    Tensor theta() const { return theta_; }
    double map_lr() const { return map_lr_; }
    const std::vector<TrajectoryRecord>& trajectory() const { return trajectory_; }

    // v(m) for step k: a nonnegative vector of length block_size summing to 1.
    // Learnable returns a taped tensor so gradients reach theta; Random draws
    // fresh per (k, m), reproducibly from the seed.
    Tensor weights_for(std::size_t m, std::size_t k) const {
        partition_.check_index(m);
        const std::size_t bs = partition_.block_size();
        switch (kind_) {
            case MappingKind::Base: {
                std::vector<double> v(bs, 0.0);
                v[bs - 1] = 1.0;
                return Tensor::from_values({bs}, std::move(v));
            }
            case MappingKind::Mean:
                return Tensor::filled({bs}, 1.0 / static_cast<double>(bs));
            case MappingKind::Random: {
                std::mt19937_64 rng(seed_ * 0x9E3779B97F4A7C15ull ^ (k * 1000003ull + m));
                std::uniform_int_distribution<std::size_t> dist(0, bs - 1);
                std::vector<double> v(bs, 0.0);
                v[dist(rng)] = 1.0;
                return Tensor::from_values({bs}, std::move(v));
            }
            case MappingKind::Learnable:
                return softmax_rows(select_row(theta_, m - 1));
        }
        throw std::logic_error("unreachable mapping kind");
    }

    // Current v values for all (m, j), detached from the tape.
    std::vector<std::vector<double>> current_weights() const {
        NoGradGuard ng;
        std::vector<std::vector<double>> out;
        for (std::size_t m = 1; m <= partition_.student_layers; ++m)
            out.push_back(weights_for(m, 0).data());
        return out;
    }

    // One optimizer step on theta (Learnable only). Logs the pre-update v
    // values under the given step index, so step 0 records the initial rows.
    void map_step(std::size_t k) {
        if (kind_ != MappingKind::Learnable)
            throw std::logic_error("map_step: mapping is not learnable");
        if (!theta_.has_grad())
            throw std::logic_error("map_step: theta has no gradient (backward not called)");
        log_weights(k);
        theta_opt_.step();
    }

    void log_weights(std::size_t k) {
        auto rows = current_weights();
        for (std::size_t m = 0; m < rows.size(); ++m)
            for (std::size_t j = 0; j < rows[m].size(); ++j) {
                trajectory_.push_back({k, m + 1, j, rows[m][j]});
                if (trajectory_out_.is_open())
                    trajectory_out_ << k << ',' << (m + 1) << ',' << j << ',' << rows[m][j] << '\n';
            }
        if (trajectory_out_.is_open()) trajectory_out_.flush();
    }

    void open_trajectory_file(const std::string& path) {
        trajectory_out_.open(path);
        if (!trajectory_out_) throw std::runtime_error("cannot open trajectory file " + path);
        trajectory_out_ << "step,student_layer,block_index,weight\n";
    }

private:
    MappingState(MappingKind kind, BlockPartition part) : kind_(kind), partition_(part) {}

    MappingKind kind_ = MappingKind::Base;
    BlockPartition partition_;
    Tensor theta_;
    double map_lr_ = 5e-5;
    std::uint64_t seed_ = 0;
    AdamOptimizer theta_opt_;
    std::vector<TrajectoryRecord> trajectory_;
    std::ofstream trajectory_out_;
};

// sum_j v[j] * H_teacher[block(m)[j]]; exact layer selection for one-hot v.
inline Tensor aggregate_hidden(const ForwardTrace& teacher_trace, const BlockPartition& part,
                               std::size_t m, const Tensor& v) {
    std::vector<Tensor> layers;
    for (std::size_t l : part.block(m)) {
        if (l > teacher_trace.hidden_states.size())
            throw std::runtime_error("aggregate_hidden: teacher trace has too few layers");
        layers.push_back(teacher_trace.hidden_states[l - 1]);
    }
    return weighted_sum(v, layers);
}

// Same linear combination applied per head to the pre-softmax attention logits.
inline std::vector<Tensor> aggregate_attention(const ForwardTrace& teacher_trace,
                                               const BlockPartition& part, std::size_t m,
                                               const Tensor& v) {
    const auto block = part.block(m);
    for (std::size_t l : block)
        if (l > teacher_trace.attention_logits.size())
            throw std::runtime_error("aggregate_attention: teacher trace has too few layers");
    const std::size_t heads = teacher_trace.attention_logits[block[0] - 1].size();
    for (std::size_t l : block)
        if (teacher_trace.attention_logits[l - 1].size() != heads)
            throw std::invalid_argument("aggregate_attention: head count mismatch across block layers");
    std::vector<Tensor> out;
    for (std::size_t h = 0; h < heads; ++h) {
        std::vector<Tensor> per_layer;
        for (std::size_t l : block) per_layer.push_back(teacher_trace.attention_logits[l - 1][h]);
        out.push_back(weighted_sum(v, per_layer));
    }
    return out;
}

}  // namespace kdlab
