#pragma once

// Synthetic stand-ins for CoLA (balanced-bracket acceptability, Matthews
// correlation) and STS-B (segment-overlap similarity, Pearson correlation),
// plus deterministic batching and dataset text dump/load.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "kdlab/losses.hpp"  // TaskKind

namespace kdlab {

struct TaskSpec {
    TaskKind kind = TaskKind::Classification;
    std::size_t vocab_size = 32;
    std::size_t seq_len = 16;
    std::size_t train_size = 256;
    std::size_t dev_size = 128;
    std::uint64_t seed = 42;
    double data_fraction = 1.0;  // train subsample for the half-data runs
    std::size_t max_nesting = 3;

    void validate() const {
        if (vocab_size < 4) throw std::invalid_argument("TaskSpec: vocab_size must be >= 4");
        if (seq_len < 4) throw std::invalid_argument("TaskSpec: seq_len must be >= 4");
        if (!(data_fraction > 0.0 && data_fraction <= 1.0))
            throw std::invalid_argument("TaskSpec: data_fraction must lie in (0,1]");
    }
};

struct Example {
    std::vector<int> tokens;
    double label;  // class id (0/1) or similarity score in [0,1]
};

struct Dataset {
    TaskKind kind = TaskKind::Classification;
    std::size_t vocab_size = 0, seq_len = 0;
    std::vector<Example> examples;

    std::size_t size() const { return examples.size(); }
};

struct TaskData {
    Dataset train, dev;
};

// Bracket tokens of the classification grammar; the rest of the vocabulary
// is filler.
inline constexpr int kOpenToken = 1;
inline constexpr int kCloseToken = 2;

// Well-formedness rule: bracket depth never negative, never above max_nesting,
// and zero at the end. Filler tokens are ignored.
inline bool is_well_formed(const std::vector<int>& tokens, std::size_t max_nesting) {
    long depth = 0;
    for (int t : tokens) {
        if (t == kOpenToken) ++depth;
        else if (t == kCloseToken) --depth;
        if (depth < 0 || depth > static_cast<long>(max_nesting)) return false;
    }
    return depth == 0;
}

// Normalized token-multiset overlap of two equal-length segments, in [0,1].
inline double overlap_score(const std::vector<int>& a, const std::vector<int>& b) {
    if (a.size() != b.size() || a.empty())
        throw std::invalid_argument("overlap_score: segments must be equal-length and non-empty");
    std::map<int, std::size_t> count;
    for (int t : a) ++count[t];
    std::size_t common = 0;
    for (int t : b) {
        auto it = count.find(t);
        if (it != count.end() && it->second > 0) {
            --it->second;
            ++common;
        }
    }
    return static_cast<double>(common) / static_cast<double>(a.size());
}

namespace detail {

inline std::mt19937_64 stream_rng(std::uint64_t seed, std::uint64_t stream) {
    return std::mt19937_64(seed * 0x2545F4914F6CDD1Dull + stream * 0x9E3779B97F4A7C15ull + 1);
}

inline std::vector<int> random_filler(std::size_t n, std::size_t vocab, std::mt19937_64& rng) {
    std::uniform_int_distribution<int> dist(3, static_cast<int>(vocab) - 1);
    std::vector<int> out(n);
    for (int& t : out) t = dist(rng);
    return out;
}

// Balanced bracket string of the given even length respecting the depth bound.
inline std::vector<int> balanced_brackets(std::size_t pairs, std::size_t max_nesting,
                                          std::mt19937_64& rng) {
    std::vector<int> out;
    std::size_t open_left = pairs;
    long depth = 0;
    while (out.size() < 2 * pairs) {
        // Invariant: slots remaining == open_left + (depth + open_left), so a
        // legal continuation always exists under the depth bound.
        bool can_open = open_left > 0 && depth < static_cast<long>(max_nesting);
        bool can_close = depth > 0;
        bool open;
        if (can_open && can_close)
            open = std::uniform_int_distribution<int>(0, 1)(rng) == 1;
        else
            open = can_open;
        if (open) {
            out.push_back(kOpenToken);
            --open_left;
            ++depth;
        } else {
            out.push_back(kCloseToken);
            --depth;
        }
    }
    return out;
}

inline std::vector<Example> gen_classification_split(const TaskSpec& spec, std::size_t count,
                                                     std::uint64_t stream) {
    auto rng = stream_rng(spec.seed, stream);
    std::vector<Example> out;
    std::uniform_int_distribution<std::size_t> pair_dist(1, std::max<std::size_t>(1, spec.seq_len / 4));
    std::uniform_int_distribution<int> bracket_dist(0, 4);
    while (out.size() < count) {
        const bool want_positive = out.size() % 2 == 0;  // exact class balance
        std::vector<int> tokens;
        if (want_positive) {
            // Constructive: balanced skeleton spliced into filler at random slots.
            const std::size_t pairs = pair_dist(rng);
            auto skeleton = balanced_brackets(pairs, spec.max_nesting, rng);
            tokens = random_filler(spec.seq_len, spec.vocab_size, rng);
            std::vector<std::size_t> slots(spec.seq_len);
            for (std::size_t i = 0; i < slots.size(); ++i) slots[i] = i;
            std::shuffle(slots.begin(), slots.end(), rng);
            slots.resize(skeleton.size());
            std::sort(slots.begin(), slots.end());
            for (std::size_t i = 0; i < skeleton.size(); ++i) tokens[slots[i]] = skeleton[i];
            if (!is_well_formed(tokens, spec.max_nesting)) continue;
        } else {
            // Rejection: random bracket-bearing sequences are almost never balanced.
            tokens = random_filler(spec.seq_len, spec.vocab_size, rng);
            for (int& t : tokens) {
                const int r = bracket_dist(rng);
                if (r == 0) t = kOpenToken;
                else if (r == 1) t = kCloseToken;
            }
            if (is_well_formed(tokens, spec.max_nesting)) continue;
        }
        out.push_back({std::move(tokens), want_positive ? 1.0 : 0.0});
    }
    auto shuffle_rng = stream_rng(spec.seed, stream + 100);
    std::shuffle(out.begin(), out.end(), shuffle_rng);
    return out;
}

inline std::vector<Example> gen_regression_split(const TaskSpec& spec, std::size_t count,
                                                 std::uint64_t stream) {
    auto rng = stream_rng(spec.seed, stream);
    const int sep = static_cast<int>(spec.vocab_size) - 1;
    const std::size_t seg = (spec.seq_len - 1) / 2;
    std::uniform_int_distribution<int> tok_dist(0, static_cast<int>(spec.vocab_size) - 2);
    std::uniform_int_distribution<std::size_t> copy_dist(0, seg);
    std::vector<Example> out;
    for (std::size_t n = 0; n < count; ++n) {
        std::vector<int> a(seg), b(seg);
        for (int& t : a) t = tok_dist(rng);
        // Copy a random prefix-count of tokens from a, fill the rest randomly;
        // the label is recomputed from the rule, so accidental overlap is fine.
        const std::size_t copied = copy_dist(rng);
        std::vector<std::size_t> order(seg);
        for (std::size_t i = 0; i < seg; ++i) order[i] = i;
        std::shuffle(order.begin(), order.end(), rng);
        for (std::size_t i = 0; i < seg; ++i)
            b[i] = i < copied ? a[order[i]] : tok_dist(rng);
        std::shuffle(b.begin(), b.end(), rng);
        std::vector<int> tokens = a;
        tokens.push_back(sep);
        tokens.insert(tokens.end(), b.begin(), b.end());
        while (tokens.size() < spec.seq_len) tokens.push_back(sep);
        out.push_back({std::move(tokens), overlap_score(a, b)});
    }
    return out;
}

}  // namespace detail

// Deterministic prefix subsample of ceil(n * fraction) examples, taken from a
// seed-determined permutation of the split.
inline Dataset subsample(const Dataset& d, double fraction, std::uint64_t seed) {
    if (fraction >= 1.0) return d;
    const std::size_t keep =
        static_cast<std::size_t>(std::ceil(static_cast<double>(d.size()) * fraction));
    std::vector<std::size_t> perm(d.size());
    for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = i;
    auto rng = detail::stream_rng(seed, 777);
    std::shuffle(perm.begin(), perm.end(), rng);
    Dataset out = d;
    out.examples.clear();
    for (std::size_t i = 0; i < keep; ++i) out.examples.push_back(d.examples[perm[i]]);
    return out;
}

inline TaskData generate_classification_task(const TaskSpec& spec) {
    spec.validate();
    if (spec.kind != TaskKind::Classification)
        throw std::invalid_argument("generate_classification_task: spec.kind mismatch");
    TaskData data;
    data.train = {spec.kind, spec.vocab_size, spec.seq_len,
                  detail::gen_classification_split(spec, spec.train_size, 1)};
    data.dev = {spec.kind, spec.vocab_size, spec.seq_len,
                detail::gen_classification_split(spec, spec.dev_size, 2)};
    data.train = subsample(data.train, spec.data_fraction, spec.seed);
    return data;
}

inline TaskData generate_regression_task(const TaskSpec& spec) {
    spec.validate();
    if (spec.kind != TaskKind::Regression)
        throw std::invalid_argument("generate_regression_task: spec.kind mismatch");
    TaskData data;
    data.train = {spec.kind, spec.vocab_size, spec.seq_len,
                  detail::gen_regression_split(spec, spec.train_size, 1)};
    data.dev = {spec.kind, spec.vocab_size, spec.seq_len,
                detail::gen_regression_split(spec, spec.dev_size, 2)};
    data.train = subsample(data.train, spec.data_fraction, spec.seed);
    return data;
}

inline TaskData generate_task(const TaskSpec& spec) {
    return spec.kind == TaskKind::Classification ? generate_classification_task(spec)
                                                 : generate_regression_task(spec);
}

// ---- metrics ----

// (TP*TN - FP*FN) / sqrt((TP+FP)(TP+FN)(TN+FP)(TN+FN)); 0 when any factor is 0.
inline double matthews_corrcoef(const std::vector<int>& predictions, const std::vector<int>& labels) {
    if (predictions.size() != labels.size())
        throw std::invalid_argument("matthews_corrcoef: length mismatch");
    double tp = 0, tn = 0, fp = 0, fn = 0;
    for (std::size_t i = 0; i < predictions.size(); ++i) {
        if (predictions[i] == 1 && labels[i] == 1) ++tp;
        else if (predictions[i] == 0 && labels[i] == 0) ++tn;
        else if (predictions[i] == 1 && labels[i] == 0) ++fp;
        else ++fn;
    }
    const double denom = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn);
    if (denom == 0.0) return 0.0;
    return (tp * tn - fp * fn) / std::sqrt(denom);
}

struct UndefinedMetricError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

inline double pearson_corr(const std::vector<double>& x, const std::vector<double>& y) {
    if (x.size() != y.size() || x.size() < 2)
        throw std::invalid_argument("pearson_corr: need equal-length vectors of size >= 2");
    const double n = static_cast<double>(x.size());
    double mx = 0, my = 0;
    for (std::size_t i = 0; i < x.size(); ++i) { mx += x[i]; my += y[i]; }
    mx /= n;
    my /= n;
    double sxx = 0, syy = 0, sxy = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        sxx += (x[i] - mx) * (x[i] - mx);
        syy += (y[i] - my) * (y[i] - my);
        sxy += (x[i] - mx) * (y[i] - my);
    }
    if (sxx == 0.0 || syy == 0.0)
        throw UndefinedMetricError("pearson_corr: zero variance input");
    return sxy / std::sqrt(sxx * syy);
}

// Deterministic per-(seed, epoch) shuffle; the final short batch is kept.
inline std::vector<std::vector<std::size_t>> batch_indices(std::size_t n, std::size_t batch_size,
                                                           std::uint64_t shuffle_seed,
                                                           std::size_t epoch) {
    if (batch_size == 0) throw std::invalid_argument("batch_indices: batch_size must be positive");
    std::vector<std::size_t> perm(n);
    for (std::size_t i = 0; i < n; ++i) perm[i] = i;
    auto rng = detail::stream_rng(shuffle_seed, 9000 + epoch);
    std::shuffle(perm.begin(), perm.end(), rng);
    std::vector<std::vector<std::size_t>> batches;
    for (std::size_t start = 0; start < n; start += batch_size) {
        const std::size_t end = std::min(n, start + batch_size);
        batches.emplace_back(perm.begin() + start, perm.begin() + end);
    }
    return batches;
}

// ---- text dump/load ----

inline void dump_dataset(const std::string& path, const Dataset& d) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot open " + path + " for writing");
    out << (d.kind == TaskKind::Classification ? "classification" : "regression") << ','
        << d.vocab_size << ',' << d.seq_len << ',' << d.examples.size() << '\n';
    out.precision(17);
    for (const Example& e : d.examples) {
        for (std::size_t i = 0; i < e.tokens.size(); ++i) out << (i ? "," : "") << e.tokens[i];
        out << '\t' << e.label << '\n';
    }
}

inline Dataset load_dataset(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open " + path);
    std::string header;
    if (!std::getline(in, header)) throw std::runtime_error("empty dataset file " + path);
    std::istringstream hs(header);
    std::string kind_str, field;
    std::getline(hs, kind_str, ',');
    Dataset d;
    if (kind_str == "classification") d.kind = TaskKind::Classification;
    else if (kind_str == "regression") d.kind = TaskKind::Regression;
    else throw std::runtime_error("unknown dataset kind '" + kind_str + "'");
    std::getline(hs, field, ',');
    d.vocab_size = std::stoul(field);
    std::getline(hs, field, ',');
    d.seq_len = std::stoul(field);
    std::getline(hs, field, ',');
    const std::size_t count = std::stoul(field);
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const auto tab = line.find('\t');
        if (tab == std::string::npos) throw std::runtime_error("malformed dataset line: " + line);
        Example e;
        std::istringstream ts(line.substr(0, tab));
        while (std::getline(ts, field, ',')) e.tokens.push_back(std::stoi(field));
        e.label = std::stod(line.substr(tab + 1));
        d.examples.push_back(std::move(e));
    }
    if (d.examples.size() != count)
        throw std::runtime_error("dataset example count mismatch in " + path);
    return d;
}

}  // namespace kdlab
