// SPDX-License-Identifier: Apache-2.0
//
// Layered distillation objective: a layer map from student to teacher depth,
// per-layer attention and hidden-state losses (with learnable projections
// when widths differ), and the combined total with a task term over the
// start/end span distributions.
#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "tinykd/encoder.hpp"
#include "tinykd/tensor.hpp"

namespace tinykd {

// g(k) = k * (teacher_layers / student_layers), k = 1..student_layers.
inline std::vector<int> layer_map_uniform(std::size_t student_layers, std::size_t teacher_layers) {
    if (student_layers == 0 || teacher_layers == 0)
        throw std::invalid_argument("layer_map_uniform: layer counts must be positive");
    if (teacher_layers % student_layers != 0)
        throw std::invalid_argument("layer_map_uniform: teacher depth " + std::to_string(teacher_layers) +
                                    " is not divisible by student depth " + std::to_string(student_layers) +
                                    "; provide an explicit custom map instead");
    const std::size_t stride = teacher_layers / student_layers;
    std::vector<int> map(student_layers);
    for (std::size_t k = 1; k <= student_layers; ++k) map[k - 1] = static_cast<int>(k * stride);
    return map;
}

inline void validate_layer_map(const std::vector<int>& map, std::size_t student_layers, std::size_t teacher_layers) {
    if (map.size() != student_layers)
        throw std::invalid_argument("layer map has " + std::to_string(map.size()) + " entries for " +
                                    std::to_string(student_layers) + " student layers");
    int prev = 0;
    for (auto g : map) {
        if (g <= prev)
            throw std::invalid_argument("layer map must be strictly increasing");
        prev = g;
    }
    if (prev > static_cast<int>(teacher_layers))
        throw std::invalid_argument("layer map entry " + std::to_string(prev) + " exceeds teacher depth " +
                                    std::to_string(teacher_layers));
}

template <class S>
struct DistillPlanT {
    std::vector<int> layer_map;             // length L, 1-based teacher layer indices
    std::vector<TensorT<S>> projections;    // length L+1 (index 0 = embedding); empty when identity is configured
    S w_task = S(1);
    S w_layer = S(1);
    S w_hard = S(0);
    S temperature = S(1);
    bool match_probabilities = false;       // compare post-softmax attention instead of raw scores

    bool has_projections() const { return !projections.empty(); }

    std::vector<std::pair<std::string, TensorT<S>>> named_parameters() const {
        std::vector<std::pair<std::string, TensorT<S>>> out;
        for (std::size_t i = 0; i < projections.size(); ++i)
            out.emplace_back("plan.projection." + std::to_string(i), projections[i]);
        return out;
    }
};

using DistillPlan = DistillPlanT<double>;

struct DistillOptions {
    double w_task = 1.0;
    double w_layer = 1.0;
    double w_hard = 0.0;
    double temperature = 1.0;
    bool match_probabilities = false;
    bool identity_init = false;  // init learnable projections to I (same-width only)
};

// Builds a plan for the given pair of configs. With equal widths the
// projections are omitted (identity); otherwise one learnable [d' x d]
// matrix per mapped index, embedding included, fan-scaled uniform init.
template <class S = double>
DistillPlanT<S> make_distill_plan(const ModelConfig& student, const ModelConfig& teacher, std::vector<int> layer_map,
                                  const DistillOptions& opt = {}, std::uint64_t seed = 0) {
    validate_layer_map(layer_map, student.layers, teacher.layers);
    if (student.heads != teacher.heads)
        throw std::invalid_argument("distillation config: head counts differ (student " +
                                    std::to_string(student.heads) + ", teacher " + std::to_string(teacher.heads) +
                                    ")");
    if (opt.temperature <= 0.0) throw std::invalid_argument("distillation config: temperature must be positive");
    DistillPlanT<S> plan;
    plan.layer_map = std::move(layer_map);
    plan.w_task = static_cast<S>(opt.w_task);
    plan.w_layer = static_cast<S>(opt.w_layer);
    plan.w_hard = static_cast<S>(opt.w_hard);
    plan.temperature = static_cast<S>(opt.temperature);
    plan.match_probabilities = opt.match_probabilities;
    const std::size_t ds = student.hidden, dt = teacher.hidden;
    if (ds == dt && !opt.identity_init) return plan;  // identity configured, no projections
    Rng rng(seed);
    const double limit = std::sqrt(6.0 / static_cast<double>(ds + dt));
    for (std::size_t i = 0; i < student.layers + 1; ++i) {
        std::vector<S> w(ds * dt);
        if (opt.identity_init) {
            if (ds != dt)
                throw std::invalid_argument("distillation config: identity projection init requires equal widths");
            for (std::size_t r = 0; r < ds; ++r)
                for (std::size_t c = 0; c < dt; ++c) w[r * dt + c] = (r == c) ? S(1) : S(0);
        } else {
            for (auto& x : w) x = static_cast<S>(rng.uniform(-limit, limit));
        }
        plan.projections.emplace_back(Shape{ds, dt}, std::move(w), true);
    }
    return plan;
}

// expand a [b x l] token mask to [b x l x d]
inline BoolTensor expand_token_mask(const BoolTensor& mask, std::size_t d) {
    const std::size_t b = mask.shape[0], l = mask.shape[1];
    BoolTensor out({b, l, d}, std::vector<std::uint8_t>(b * l * d));
    for (std::size_t i = 0; i < b * l; ++i)
        std::fill(out.data.begin() + i * d, out.data.begin() + (i + 1) * d, mask.data[i]);
    return out;
}

// [b x h x l x l] mask where entry (q, k) is valid iff both positions are real
inline BoolTensor make_pair_mask(const BoolTensor& mask, std::size_t heads) {
    const std::size_t b = mask.shape[0], l = mask.shape[1];
    BoolTensor out({b, heads, l, l}, std::vector<std::uint8_t>(b * heads * l * l));
    for (std::size_t bi = 0; bi < b; ++bi)
        for (std::size_t q = 0; q < l; ++q)
            for (std::size_t k = 0; k < l; ++k) {
                const std::uint8_t v = (mask.data[bi * l + q] && mask.data[bi * l + k]) ? 1 : 0;
                for (std::size_t h = 0; h < heads; ++h) out.data[((bi * heads + h) * l + q) * l + k] = v;
            }
    return out;
}

// Mean over heads of the MSE between score tensors, excluding any entry whose
// query or key position is padded. Head counts must match.
template <class S>
TensorT<S> attention_loss(const TensorT<S>& student_scores, const TensorT<S>& teacher_scores,
                          const BoolTensor& mask) {
    if (student_scores.rank() != 4 || teacher_scores.rank() != 4)
        throw std::invalid_argument("attention_loss: expected [b x h x l x l] scores");
    if (student_scores.shape()[1] != teacher_scores.shape()[1])
        throw std::invalid_argument("distillation config: head counts differ (student " +
                                    std::to_string(student_scores.shape()[1]) + ", teacher " +
                                    std::to_string(teacher_scores.shape()[1]) + ")");
    detail::check_same_shape(student_scores.shape(), teacher_scores.shape(), "attention_loss");
    const BoolTensor pair_mask = make_pair_mask(mask, student_scores.shape()[1]);
    return mse(student_scores, teacher_scores, &pair_mask);
}

// MSE between projected student hidden states and teacher hidden states over
// unmasked positions. Pass w_h = nullptr for the identity (equal widths).
template <class S>
TensorT<S> hidden_loss(const TensorT<S>& student_hidden, const TensorT<S>& teacher_hidden, const TensorT<S>* w_h,
                       const BoolTensor& mask) {
    TensorT<S> projected = student_hidden;
    if (w_h != nullptr) {
        if (w_h->rank() != 2 || w_h->shape()[0] != student_hidden.shape().back() ||
            w_h->shape()[1] != teacher_hidden.shape().back())
            throw std::invalid_argument("projection shape " + shape_str(w_h->shape()) + " does not map student " +
                                        shape_str(student_hidden.shape()) + " into teacher " +
                                        shape_str(teacher_hidden.shape()));
        projected = matmul(student_hidden, *w_h);
    } else if (student_hidden.shape().back() != teacher_hidden.shape().back()) {
        throw std::invalid_argument("projection required: student width " +
                                    std::to_string(student_hidden.shape().back()) + " differs from teacher width " +
                                    std::to_string(teacher_hidden.shape().back()));
    }
    const BoolTensor m = expand_token_mask(mask, teacher_hidden.shape().back());
    return mse(projected, teacher_hidden, &m);
}

// Attention + hidden loss for a transformer layer; hidden loss alone for the
// embedding index (pass null scores).
template <class S>
TensorT<S> layer_loss(const TensorT<S>* student_scores, const TensorT<S>& student_hidden,
                      const TensorT<S>* teacher_scores, const TensorT<S>& teacher_hidden, const TensorT<S>* w_h,
                      const BoolTensor& mask) {
    TensorT<S> hid = hidden_loss(student_hidden, teacher_hidden, w_h, mask);
    if (student_scores == nullptr || teacher_scores == nullptr) return hid;
    return add(attention_loss(*student_scores, *teacher_scores, mask), hid);
}

template <class S>
struct DistillTerms {
    S task = S(0);
    S embedding_hidden = S(0);
    std::vector<S> attention;  // per student layer, k = 1..L
    std::vector<S> hidden;
    S layer_sum = S(0);
    S total = S(0);
};

// Total objective: w_task * soft cross-entropy over the start and end
// distributions (averaged) + w_layer * (embedding hidden loss + per-layer
// attention + hidden losses at the mapped teacher layers). The teacher trace
// must be detached; gradients reach only student parameters and projections.
template <class S>
std::pair<TensorT<S>, DistillTerms<S>> total_distill_loss(const EncoderTraceT<S>& student_trace,
                                                          const EncoderTraceT<S>& teacher_trace,
                                                          const TensorT<S>& student_start,
                                                          const TensorT<S>& student_end,
                                                          const TensorT<S>& teacher_start,
                                                          const TensorT<S>& teacher_end,
                                                          const DistillPlanT<S>& plan) {
    const std::size_t L = student_trace.hidden_states.size();
    const std::size_t K = teacher_trace.hidden_states.size();
    validate_layer_map(plan.layer_map, L, K);
    if (plan.has_projections() && plan.projections.size() != L + 1)
        throw std::invalid_argument("distillation config: expected " + std::to_string(L + 1) + " projections, got " +
                                    std::to_string(plan.projections.size()));
    for (const auto& h : teacher_trace.hidden_states)
        if (h.requires_grad())
            throw std::invalid_argument("distillation config: teacher trace must be detached");
    if (teacher_trace.attention_mask.data != student_trace.attention_mask.data)
        throw std::invalid_argument("distillation config: student and teacher traces use different masks");

    const BoolTensor& mask = student_trace.attention_mask;
    DistillTerms<S> terms;

    // task term over start/end distributions, teacher softened at the same temperature
    const S inv_t = S(1) / plan.temperature;
    TensorT<S> p_start = softmax_lastdim(scale(teacher_start, inv_t));
    TensorT<S> p_end = softmax_lastdim(scale(teacher_end, inv_t));
    TensorT<S> task = scale(add(soft_cross_entropy(student_start, p_start, plan.temperature),
                                soft_cross_entropy(student_end, p_end, plan.temperature)),
                            S(0.5));
    terms.task = task.item();

    auto proj_at = [&](std::size_t idx) -> const TensorT<S>* {
        return plan.has_projections() ? &plan.projections[idx] : nullptr;
    };

    TensorT<S> layer_sum =
        hidden_loss(student_trace.embedding_output, teacher_trace.embedding_output, proj_at(0), mask);
    terms.embedding_hidden = layer_sum.item();

    for (std::size_t k = 1; k <= L; ++k) {
        const std::size_t g = static_cast<std::size_t>(plan.layer_map[k - 1]);
        TensorT<S> s_scores = student_trace.attention_scores[k - 1];
        TensorT<S> t_scores = teacher_trace.attention_scores[g - 1];
        if (plan.match_probabilities) {
            const std::size_t b = mask.shape[0], l = mask.shape[1];
            BoolTensor key_mask({b, 1, 1, l}, mask.data);
            s_scores = softmax_lastdim(s_scores, &key_mask);
            t_scores = softmax_lastdim(t_scores, &key_mask);
        }
        TensorT<S> attn = attention_loss(s_scores, t_scores, mask);
        TensorT<S> hid =
            hidden_loss(student_trace.hidden_states[k - 1], teacher_trace.hidden_states[g - 1], proj_at(k), mask);
        terms.attention.push_back(attn.item());
        terms.hidden.push_back(hid.item());
        layer_sum = add(layer_sum, add(attn, hid));
    }
    terms.layer_sum = layer_sum.item();

    TensorT<S> total = add(scale(task, plan.w_task), scale(layer_sum, plan.w_layer));
    terms.total = total.item();
    return {total, terms};
}

} // namespace tinykd
