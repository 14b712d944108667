// SPDX-License-Identifier: Apache-2.0
//
// RoBERTa-style transformer encoder. forward() returns a trace with the
// embedding output, every per-layer hidden state and every pre-softmax scaled
// attention score tensor, which the distillation losses consume.
#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "tinykd/tensor.hpp"

namespace tinykd {

struct ModelConfig {
    std::size_t layers = 0;
    std::size_t hidden = 0;
    std::size_t ff = 0;
    std::size_t heads = 0;
    std::size_t vocab = 0;
    std::size_t max_positions = 0;

    std::size_t head_dim() const { return hidden / heads; }

    void validate() const {
        if (layers == 0 || hidden == 0 || ff == 0 || heads == 0 || vocab == 0 || max_positions == 0)
            throw std::invalid_argument("model config: all dimensions must be positive");
        if (hidden % heads != 0)
            throw std::invalid_argument("model config: hidden " + std::to_string(hidden) +
                                        " not divisible by heads " + std::to_string(heads));
    }
};

// Exact count of encoder parameters (excludes any task head):
// embeddings vocab*d + max_pos*d + 2d, per layer 4(d^2+d) attention,
// 2*(2d) layer norms, d*ff + ff + ff*d + d feed-forward.
inline std::size_t count_params(const ModelConfig& c) {
    c.validate();
    const std::size_t d = c.hidden;
    const std::size_t emb = c.vocab * d + c.max_positions * d + 2 * d;
    const std::size_t attn = 4 * (d * d + d);
    const std::size_t norms = 2 * (2 * d);
    const std::size_t ffn = d * c.ff + c.ff + c.ff * d + d;
    return emb + c.layers * (attn + norms + ffn);
}

// Full-scale presets. vocab/max_positions follow common RoBERTa checkpoints.
inline ModelConfig student_preset() { return {6, 512, 3072, 16, 50262, 514}; }
inline ModelConfig teacher_large_preset() { return {24, 1024, 4096, 16, 50262, 514}; }
// 12-layer variant of the same width; kept alongside the 24-layer default
// because both depths are in circulation for large Spanish checkpoints.
inline ModelConfig teacher_large_12_preset() { return {12, 1024, 4096, 16, 50262, 514}; }

template <class S>
struct EncoderLayerT {
    TensorT<S> wq, bq, wk, bk, wv, bv, wo, bo;
    TensorT<S> norm1_gain, norm1_bias;
    TensorT<S> ffn_inner_w, ffn_inner_b, ffn_outer_w, ffn_outer_b;
    TensorT<S> norm2_gain, norm2_bias;
};

template <class S>
struct EncoderModelT {
    ModelConfig config;
    TensorT<S> token_embedding;     // [vocab x d]
    TensorT<S> position_embedding;  // [max_positions x d]
    TensorT<S> emb_norm_gain, emb_norm_bias;
    std::vector<EncoderLayerT<S>> layers;

    std::vector<std::pair<std::string, TensorT<S>>> named_parameters() const {
        std::vector<std::pair<std::string, TensorT<S>>> out;
        out.emplace_back("embeddings.token", token_embedding);
        out.emplace_back("embeddings.position", position_embedding);
        out.emplace_back("embeddings.norm.gain", emb_norm_gain);
        out.emplace_back("embeddings.norm.bias", emb_norm_bias);
        for (std::size_t i = 0; i < layers.size(); ++i) {
            const auto& L = layers[i];
            const std::string p = "layers." + std::to_string(i) + ".";
            out.emplace_back(p + "attn.query.weight", L.wq);
            out.emplace_back(p + "attn.query.bias", L.bq);
            out.emplace_back(p + "attn.key.weight", L.wk);
            out.emplace_back(p + "attn.key.bias", L.bk);
            out.emplace_back(p + "attn.value.weight", L.wv);
            out.emplace_back(p + "attn.value.bias", L.bv);
            out.emplace_back(p + "attn.output.weight", L.wo);
            out.emplace_back(p + "attn.output.bias", L.bo);
            out.emplace_back(p + "norm1.gain", L.norm1_gain);
            out.emplace_back(p + "norm1.bias", L.norm1_bias);
            out.emplace_back(p + "ffn.inner.weight", L.ffn_inner_w);
            out.emplace_back(p + "ffn.inner.bias", L.ffn_inner_b);
            out.emplace_back(p + "ffn.outer.weight", L.ffn_outer_w);
            out.emplace_back(p + "ffn.outer.bias", L.ffn_outer_b);
            out.emplace_back(p + "norm2.gain", L.norm2_gain);
            out.emplace_back(p + "norm2.bias", L.norm2_bias);
        }
        return out;
    }

    std::vector<TensorT<S>> parameters() const {
        std::vector<TensorT<S>> out;
        for (auto& [name, t] : named_parameters()) out.push_back(t);
        return out;
    }

    void set_requires_grad(bool rg) {
        for (auto& t : parameters()) t.set_requires_grad(rg);
    }
};

using EncoderModel = EncoderModelT<double>;

template <class S>
struct EncoderTraceT {
    TensorT<S> embedding_output;                 // [b x l x d], index k = 0
    std::vector<TensorT<S>> hidden_states;       // L tensors [b x l x d]
    std::vector<TensorT<S>> attention_scores;    // L tensors [b x h x l x l], pre-softmax, scaled
    BoolTensor attention_mask;                   // [b x l]
};

using EncoderTrace = EncoderTraceT<double>;

// Weights N(0, 0.02^2) from a seeded generator, biases zero, norm gain 1.
// Identical (config, seed) gives a bit-identical model.
template <class S = double>
EncoderModelT<S> init_model(const ModelConfig& config, std::uint64_t seed) {
    config.validate();
    Rng rng(seed);
    const S sd = S(0.02);
    const std::size_t d = config.hidden;
    EncoderModelT<S> m;
    m.config = config;
    m.token_embedding = TensorT<S>::randn({config.vocab, d}, rng, sd, true);
    m.position_embedding = TensorT<S>::randn({config.max_positions, d}, rng, sd, true);
    m.emb_norm_gain = TensorT<S>::full({d}, S(1), true);
    m.emb_norm_bias = TensorT<S>::zeros({d}, true);
    for (std::size_t i = 0; i < config.layers; ++i) {
        EncoderLayerT<S> L;
        L.wq = TensorT<S>::randn({d, d}, rng, sd, true);
        L.bq = TensorT<S>::zeros({d}, true);
        L.wk = TensorT<S>::randn({d, d}, rng, sd, true);
        L.bk = TensorT<S>::zeros({d}, true);
        L.wv = TensorT<S>::randn({d, d}, rng, sd, true);
        L.bv = TensorT<S>::zeros({d}, true);
        L.wo = TensorT<S>::randn({d, d}, rng, sd, true);
        L.bo = TensorT<S>::zeros({d}, true);
        L.norm1_gain = TensorT<S>::full({d}, S(1), true);
        L.norm1_bias = TensorT<S>::zeros({d}, true);
        L.ffn_inner_w = TensorT<S>::randn({d, config.ff}, rng, sd, true);
        L.ffn_inner_b = TensorT<S>::zeros({config.ff}, true);
        L.ffn_outer_w = TensorT<S>::randn({config.ff, d}, rng, sd, true);
        L.ffn_outer_b = TensorT<S>::zeros({d}, true);
        L.norm2_gain = TensorT<S>::full({d}, S(1), true);
        L.norm2_bias = TensorT<S>::zeros({d}, true);
        m.layers.push_back(std::move(L));
    }
    return m;
}

constexpr double kLayerNormEps = 1e-5;

// Token + position embeddings, layer norm, then L blocks of multi-head
// self-attention (scaled dot-product scores, masked softmax, residual + norm)
// and a GELU feed-forward (residual + norm). Post-layer-norm order.
template <class S>
EncoderTraceT<S> forward(const EncoderModelT<S>& m, const IntTensor& token_ids, const BoolTensor& attention_mask) {
    const ModelConfig& c = m.config;
    if (token_ids.shape.size() != 2)
        throw std::invalid_argument("forward: token_ids must be [batch x len], got " + shape_str(token_ids.shape));
    if (attention_mask.shape != token_ids.shape)
        throw std::invalid_argument("forward: attention_mask " + shape_str(attention_mask.shape) +
                                    " must match token_ids " + shape_str(token_ids.shape));
    const std::size_t b = token_ids.shape[0];
    const std::size_t l = token_ids.shape[1];
    if (l > c.max_positions)
        throw std::invalid_argument("forward: sequence length " + std::to_string(l) + " exceeds max_positions " +
                                    std::to_string(c.max_positions));
    for (auto id : token_ids.data)
        if (id < 0 || static_cast<std::size_t>(id) >= c.vocab)
            throw std::invalid_argument("forward: token id " + std::to_string(id) + " outside vocabulary of size " +
                                        std::to_string(c.vocab));

    IntTensor pos_ids({b, l}, std::vector<std::int32_t>(b * l));
    for (std::size_t bi = 0; bi < b; ++bi)
        for (std::size_t li = 0; li < l; ++li) pos_ids.data[bi * l + li] = static_cast<std::int32_t>(li);

    // key mask broadcast over heads and query positions
    BoolTensor key_mask({b, 1, 1, l}, attention_mask.data);

    EncoderTraceT<S> trace;
    trace.attention_mask = attention_mask;

    TensorT<S> x = add(embedding_rows(m.token_embedding, token_ids), embedding_rows(m.position_embedding, pos_ids));
    x = layer_norm(x, m.emb_norm_gain, m.emb_norm_bias, S(kLayerNormEps));
    trace.embedding_output = x;

    const S inv_sqrt_hd = S(1) / std::sqrt(static_cast<S>(c.head_dim()));
    for (const auto& L : m.layers) {
        TensorT<S> q = split_heads(add_bias(matmul(x, L.wq), L.bq), c.heads);
        TensorT<S> k = split_heads(add_bias(matmul(x, L.wk), L.bk), c.heads);
        TensorT<S> v = split_heads(add_bias(matmul(x, L.wv), L.bv), c.heads);
        TensorT<S> scores = scale(matmul_nt(q, k), inv_sqrt_hd);  // [b, h, l, l]
        trace.attention_scores.push_back(scores);
        TensorT<S> probs = softmax_lastdim(scores, &key_mask);
        TensorT<S> ctx = merge_heads(matmul(probs, v));
        TensorT<S> attn_out = add_bias(matmul(ctx, L.wo), L.bo);
        x = layer_norm(add(x, attn_out), L.norm1_gain, L.norm1_bias, S(kLayerNormEps));
        TensorT<S> ff = add_bias(matmul(gelu(add_bias(matmul(x, L.ffn_inner_w), L.ffn_inner_b)), L.ffn_outer_w),
                                 L.ffn_outer_b);
        x = layer_norm(add(x, ff), L.norm2_gain, L.norm2_bias, S(kLayerNormEps));
        trace.hidden_states.push_back(x);
    }
    return trace;
}

} // namespace tinykd
