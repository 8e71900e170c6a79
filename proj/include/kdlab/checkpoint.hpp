#pragma once

// Checkpoint format: magic "MDST", u16 version = 1, u32 little-endian header
// length, UTF-8 JSON header mapping tensor name -> {shape, byte offset into
// the data section}, then contiguous 64-bit little-endian floats.

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "kdlab/model.hpp"
#include "kdlab/tensor.hpp"

namespace kdlab {

inline constexpr char kCheckpointMagic[4] = {'M', 'D', 'S', 'T'};
inline constexpr std::uint16_t kCheckpointVersion = 1;

namespace detail {

inline void write_u16_le(std::ostream& out, std::uint16_t v) {
    const char b[2] = {static_cast<char>(v & 0xff), static_cast<char>(v >> 8)};
    out.write(b, 2);
}

inline void write_u32_le(std::ostream& out, std::uint32_t v) {
    char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
    out.write(b, 4);
}

inline std::uint16_t read_u16_le(std::istream& in) {
    unsigned char b[2];
    in.read(reinterpret_cast<char*>(b), 2);
    return static_cast<std::uint16_t>(b[0] | (b[1] << 8));
}

inline std::uint32_t read_u32_le(std::istream& in) {
    unsigned char b[4];
    in.read(reinterpret_cast<char*>(b), 4);
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

inline void write_f64_le(std::ostream& out, const std::vector<double>& values) {
    for (double v : values) {
        std::uint64_t bits;
        std::memcpy(&bits, &v, 8);
        char b[8];
        for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((bits >> (8 * i)) & 0xff);
        out.write(b, 8);
    }
}

inline std::vector<double> read_f64_le(std::istream& in, std::size_t count) {
    std::vector<double> out(count);
    for (std::size_t k = 0; k < count; ++k) {
        unsigned char b[8];
        in.read(reinterpret_cast<char*>(b), 8);
        std::uint64_t bits = 0;
        for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(b[i]) << (8 * i);
        double v;
        std::memcpy(&v, &bits, 8);
        out[k] = v;
    }
    return out;
}

}  // namespace detail

inline void save_checkpoint(const std::string& path,
                            const std::vector<std::pair<std::string, Tensor>>& tensors) {
    nlohmann::ordered_json header;
    std::uint64_t offset = 0;
    for (const auto& [name, t] : tensors) {
        header[name] = {{"shape", t.shape()}, {"offset", offset}};
        offset += t.numel() * 8;
    }
    const std::string header_str = header.dump();
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open " + path + " for writing");
    out.write(kCheckpointMagic, 4);
    detail::write_u16_le(out, kCheckpointVersion);
    detail::write_u32_le(out, static_cast<std::uint32_t>(header_str.size()));
    out.write(header_str.data(), static_cast<std::streamsize>(header_str.size()));
    for (const auto& [name, t] : tensors) detail::write_f64_le(out, t.data());
    if (!out) throw std::runtime_error("write failed for " + path);
}

inline std::map<std::string, Tensor> load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open checkpoint " + path);
    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, kCheckpointMagic, 4) != 0)
        throw std::runtime_error(path + " is not a checkpoint (bad magic)");
    const std::uint16_t version = detail::read_u16_le(in);
    if (version != kCheckpointVersion)
        throw std::runtime_error("unsupported checkpoint version " + std::to_string(version));
    const std::uint32_t header_len = detail::read_u32_le(in);
    std::string header_str(header_len, '\0');
    in.read(header_str.data(), header_len);
    const auto header = nlohmann::ordered_json::parse(header_str);
    const std::streampos data_start = in.tellg();
    std::map<std::string, Tensor> out;
    for (const auto& [name, entry] : header.items()) {
        Shape shape = entry.at("shape").get<Shape>();
        const std::uint64_t offset = entry.at("offset").get<std::uint64_t>();
        in.seekg(data_start + static_cast<std::streamoff>(offset));
        out.emplace(name, Tensor::from_values(shape, detail::read_f64_le(in, shape_numel(shape))));
        if (!in) throw std::runtime_error("truncated checkpoint " + path);
    }
    return out;
}

inline void save_encoder(const std::string& path, const EncoderParams& params) {
    save_checkpoint(path, params.named_tensors());
}

// Reconstructs the encoder from tensor names and shapes alone.
inline EncoderParams load_encoder(const std::string& path) {
    auto tensors = load_checkpoint(path);
    auto get = [&](const std::string& name) -> Tensor {
        auto it = tensors.find(name);
        if (it == tensors.end()) throw std::runtime_error("checkpoint missing tensor " + name);
        return it->second;
    };
    ModelConfig cfg;
    Tensor tok = get("token_embedding");
    Tensor pos = get("position_embedding");
    cfg.vocab_size = tok.shape()[0];
    cfg.d_model = tok.shape()[1];
    cfg.max_seq_len = pos.shape()[0];
    cfg.n_layers = 0;
    while (tensors.count("layer" + std::to_string(cfg.n_layers) + ".w_o")) ++cfg.n_layers;
    cfg.n_heads = 0;
    while (tensors.count("layer0.head" + std::to_string(cfg.n_heads) + ".w_q")) ++cfg.n_heads;
    cfg.d_ff = get("layer0.w_ff1").shape()[1];
    cfg.n_outputs = get("head.weight").shape()[1];
    cfg.validate();

    EncoderParams p;
    p.config = cfg;
    p.token_embedding = tok;
    p.position_embedding = pos;
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
        LayerParams lp;
        const std::string pre = "layer" + std::to_string(l) + ".";
        for (std::size_t h = 0; h < cfg.n_heads; ++h) {
            const std::string hp = pre + "head" + std::to_string(h) + ".";
            lp.w_q.push_back(get(hp + "w_q"));
            lp.b_q.push_back(get(hp + "b_q"));
            lp.w_k.push_back(get(hp + "w_k"));
            lp.b_k.push_back(get(hp + "b_k"));
            lp.w_v.push_back(get(hp + "w_v"));
            lp.b_v.push_back(get(hp + "b_v"));
        }
        lp.w_o = get(pre + "w_o");
        lp.b_o = get(pre + "b_o");
        lp.ln1_gain = get(pre + "ln1_gain");
        lp.ln1_bias = get(pre + "ln1_bias");
        lp.w_ff1 = get(pre + "w_ff1");
        lp.b_ff1 = get(pre + "b_ff1");
        lp.w_ff2 = get(pre + "w_ff2");
        lp.b_ff2 = get(pre + "b_ff2");
        lp.ln2_gain = get(pre + "ln2_gain");
        lp.ln2_bias = get(pre + "ln2_bias");
        p.layers.push_back(std::move(lp));
    }
    p.head_weight = get("head.weight");
    p.head_bias = get("head.bias");
    p.set_requires_grad(true);
    return p;
}

}  // namespace kdlab
