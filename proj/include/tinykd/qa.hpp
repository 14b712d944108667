// SPDX-License-Identifier: Apache-2.0
//
// Extractive QA head, span decoding and SQuAD-style F1 / Exact Match.
#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "tinykd/data.hpp"
#include "tinykd/encoder.hpp"
#include "tinykd/tensor.hpp"

namespace tinykd {

template <class S>
struct SpanHeadT {
    TensorT<S> weight;  // [hidden x 2]
    TensorT<S> bias;    // [2]

    std::vector<std::pair<std::string, TensorT<S>>> named_parameters() const {
        return {{"head.weight", weight}, {"head.bias", bias}};
    }
    std::vector<TensorT<S>> parameters() const { return {weight, bias}; }
};

using SpanHead = SpanHeadT<double>;

template <class S = double>
SpanHeadT<S> init_span_head(std::size_t hidden, std::uint64_t seed) {
    Rng rng(seed);
    SpanHeadT<S> h;
    h.weight = TensorT<S>::randn({hidden, 2}, rng, S(0.02), true);
    h.bias = TensorT<S>::zeros({2}, true);
    return h;
}

inline std::size_t span_head_param_count(std::size_t hidden) { return hidden * 2 + 2; }

// Affine map to per-token start/end logits; masked positions are pushed to
// the -inf surrogate so downstream softmax/argmax never select them.
template <class S>
std::pair<TensorT<S>, TensorT<S>> span_logits(const TensorT<S>& hidden, const SpanHeadT<S>& head,
                                              const BoolTensor& mask) {
    if (hidden.rank() != 3)
        throw std::invalid_argument("span_logits: expected [b x l x d] hidden states, got " +
                                    shape_str(hidden.shape()));
    TensorT<S> both = add_bias(matmul(hidden, head.weight), head.bias);  // [b, l, 2]
    TensorT<S> start = masked_fill(slice_lastdim(both, 0), mask, masked_logit<S>());
    TensorT<S> end = masked_fill(slice_lastdim(both, 1), mask, masked_logit<S>());
    return {start, end};
}

// (CE(start, gold_start) + CE(end, gold_end)) / 2, one gold pair per row.
template <class S>
TensorT<S> task_loss_hard(const TensorT<S>& start_logits, const TensorT<S>& end_logits,
                          const std::vector<int>& gold_start, const std::vector<int>& gold_end) {
    const std::size_t l = start_logits.shape().back();
    const std::size_t rows = start_logits.size() / l;
    auto check_unmasked = [&](const TensorT<S>& logits, const std::vector<int>& golds, const char* which) {
        for (std::size_t r = 0; r < rows; ++r) {
            if (golds[r] < 0 || static_cast<std::size_t>(golds[r]) >= l)
                throw std::invalid_argument(std::string("task_loss_hard: ") + which + " label " +
                                            std::to_string(golds[r]) + " out of range");
            if (logits.value()[r * l + static_cast<std::size_t>(golds[r])] <= masked_logit<S>() / S(2))
                throw std::invalid_argument(std::string("task_loss_hard: ") + which + " label " +
                                            std::to_string(golds[r]) + " points at a masked position");
        }
    };
    check_unmasked(start_logits, gold_start, "start");
    check_unmasked(end_logits, gold_end, "end");
    return scale(add(cross_entropy_index(start_logits, gold_start), cross_entropy_index(end_logits, gold_end)),
                 S(0.5));
}

template <class S>
TensorT<S> task_loss_hard(const TensorT<S>& start_logits, const TensorT<S>& end_logits, int gold_start,
                          int gold_end) {
    return task_loss_hard(start_logits, end_logits, std::vector<int>{gold_start}, std::vector<int>{gold_end});
}

// ---------------------------------------------------------------------------
// span decoding
// ---------------------------------------------------------------------------

struct Prediction {
    int start_token = 0;
    int end_token = 0;
    std::string text;
    double score = 0.0;  // start_logit + end_logit
};

inline constexpr std::size_t kDefaultMaxAnswerTokens = 30;

// Best (s, e) pair by start_logit[s] + end_logit[e] with s <= e,
// e - s < max_answer_tokens, both inside the context region. Ties go to the
// smallest start, then the shortest span. Text comes from the original
// character offsets.
inline Prediction extract_span(const std::vector<double>& start_logits, const std::vector<double>& end_logits,
                               const EncodedExample& enc, const std::string& context,
                               std::size_t max_answer_tokens = kDefaultMaxAnswerTokens) {
    if (max_answer_tokens == 0 || enc.context_begin >= enc.context_end)
        throw std::runtime_error("extract_span: no valid span candidates for example " + enc.id);
    bool found = false;
    Prediction best;
    double best_score = 0.0;
    for (std::size_t s = enc.context_begin; s < enc.context_end; ++s) {
        const std::size_t e_cap = std::min(enc.context_end, s + max_answer_tokens);
        for (std::size_t e = s; e < e_cap; ++e) {
            const double score = start_logits[s] + end_logits[e];
            if (!found || score > best_score) {
                found = true;
                best_score = score;
                best.start_token = static_cast<int>(s);
                best.end_token = static_cast<int>(e);
            }
        }
    }
    if (!found) throw std::runtime_error("extract_span: no valid span candidates for example " + enc.id);
    const auto& so = enc.offsets[static_cast<std::size_t>(best.start_token)];
    const auto& eo = enc.offsets[static_cast<std::size_t>(best.end_token)];
    best.text = context.substr(static_cast<std::size_t>(so.first),
                               static_cast<std::size_t>(eo.second - so.first));
    best.score = best_score;
    return best;
}

// ---------------------------------------------------------------------------
// metrics
// ---------------------------------------------------------------------------

inline const std::vector<std::string>& default_articles() {
    static const std::vector<std::string> articles = {"el", "la", "los", "las", "un", "una", "unos", "unas"};
    return articles;
}

// lowercase -> strip punctuation -> drop article tokens -> collapse whitespace
inline std::string normalize_answer(const std::string& text,
                                    const std::vector<std::string>& articles = default_articles()) {
    std::string lowered;
    lowered.reserve(text.size());
    std::size_t i = 0;
    while (i < text.size()) {
        const std::size_t plen = detail::punct_len_at(text, i);
        if (plen > 0) {
            i += plen;  // punctuation removed outright
            continue;
        }
        lowered.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(text[i]))));
        ++i;
    }
    std::string out;
    std::size_t pos = 0;
    while (pos < lowered.size()) {
        while (pos < lowered.size() && std::isspace(static_cast<unsigned char>(lowered[pos]))) ++pos;
        std::size_t end = pos;
        while (end < lowered.size() && !std::isspace(static_cast<unsigned char>(lowered[end]))) ++end;
        if (end > pos) {
            const std::string tok = lowered.substr(pos, end - pos);
            if (std::find(articles.begin(), articles.end(), tok) == articles.end()) {
                if (!out.empty()) out.push_back(' ');
                out += tok;
            }
        }
        pos = end;
    }
    return out;
}

namespace detail {

inline std::vector<std::string> normalized_tokens(const std::string& text, const std::vector<std::string>& articles) {
    const std::string norm = normalize_answer(text, articles);
    std::vector<std::string> toks;
    std::size_t pos = 0;
    while (pos < norm.size()) {
        std::size_t end = norm.find(' ', pos);
        if (end == std::string::npos) end = norm.size();
        toks.push_back(norm.substr(pos, end - pos));
        pos = end + 1;
    }
    return toks;
}

} // namespace detail

inline int exact_match(const std::string& prediction, const std::vector<std::string>& golds,
                       const std::vector<std::string>& articles = default_articles()) {
    if (golds.empty()) throw std::invalid_argument("exact_match: gold answer list is empty");
    const std::string p = normalize_answer(prediction, articles);
    for (const auto& g : golds)
        if (p == normalize_answer(g, articles)) return 1;
    return 0;
}

// Token-bag overlap F1 after normalization, maximized over golds.
inline double f1_score(const std::string& prediction, const std::vector<std::string>& golds,
                       const std::vector<std::string>& articles = default_articles()) {
    if (golds.empty()) throw std::invalid_argument("f1_score: gold answer list is empty");
    const auto pred_toks = detail::normalized_tokens(prediction, articles);
    std::map<std::string, int> pred_counts;
    for (const auto& t : pred_toks) ++pred_counts[t];
    double best = 0.0;
    for (const auto& g : golds) {
        const auto gold_toks = detail::normalized_tokens(g, articles);
        if (pred_toks.empty() && gold_toks.empty()) {
            best = 1.0;
            continue;
        }
        std::map<std::string, int> gold_counts;
        for (const auto& t : gold_toks) ++gold_counts[t];
        std::size_t overlap = 0;
        for (const auto& [tok, n] : pred_counts) {
            auto it = gold_counts.find(tok);
            if (it != gold_counts.end()) overlap += static_cast<std::size_t>(std::min(n, it->second));
        }
        // 2PR/(P+R) with P = o/|pred|, R = o/|gold| reduces to 2o/(|pred|+|gold|)
        const double f1 = 2.0 * static_cast<double>(overlap) /
                          static_cast<double>(pred_toks.size() + gold_toks.size());
        best = std::max(best, f1);
    }
    return best;
}

// ---------------------------------------------------------------------------
// dataset evaluation
// ---------------------------------------------------------------------------

struct ExampleResult {
    std::string id;
    std::string prediction;
    std::vector<std::string> golds;
    double f1 = 0.0;
    int em = 0;
};

struct EvalReport {
    double f1 = 0.0;  // percent
    double em = 0.0;  // percent
    std::vector<ExampleResult> per_example;

    nlohmann::ordered_json to_json() const {
        nlohmann::ordered_json per = nlohmann::ordered_json::array();
        for (const auto& r : per_example)
            per.push_back({{"id", r.id},
                           {"prediction", r.prediction},
                           {"golds", r.golds},
                           {"f1", r.f1},
                           {"em", r.em}});
        return {{"f1", f1}, {"em", em}, {"per_example", per}};
    }
};

struct EvalOptions {
    std::size_t max_seq = kDefaultMaxSeq;
    std::size_t batch_size = 32;
    std::size_t max_answer_tokens = kDefaultMaxAnswerTokens;
    std::vector<std::string> articles = default_articles();
};

template <class S>
EvalReport evaluate(const EncoderModelT<S>& model, const SpanHeadT<S>& head, const Vocab& vocab,
                    const std::vector<QAExample>& examples, const EvalOptions& opt = {}) {
    if (examples.empty()) throw std::invalid_argument("evaluate: empty dataset");
    std::vector<EncodedExample> encoded;
    encoded.reserve(examples.size());
    for (const auto& ex : examples) encoded.push_back(encode_example(ex, vocab, opt.max_seq, false));

    EvalReport report;
    report.per_example.resize(examples.size());
    double f1_sum = 0.0, em_sum = 0.0;
    for (const auto& batch : make_batches(encoded, opt.batch_size, identity_order(encoded.size()))) {
        const auto trace = forward(model, batch.token_ids, batch.mask);
        const auto [start, end] = span_logits(trace.hidden_states.back(), head, batch.mask);
        const std::size_t l = batch.token_ids.shape[1];
        for (std::size_t i = 0; i < batch.indices.size(); ++i) {
            const std::size_t idx = batch.indices[i];
            std::vector<double> srow(l), erow(l);
            for (std::size_t j = 0; j < l; ++j) {
                srow[j] = static_cast<double>(start.value()[i * l + j]);
                erow[j] = static_cast<double>(end.value()[i * l + j]);
            }
            const Prediction pred =
                extract_span(srow, erow, encoded[idx], examples[idx].context, opt.max_answer_tokens);
            ExampleResult r;
            r.id = examples[idx].id;
            r.prediction = pred.text;
            for (const auto& a : examples[idx].answers) r.golds.push_back(a.text);
            r.f1 = f1_score(r.prediction, r.golds, opt.articles);
            r.em = exact_match(r.prediction, r.golds, opt.articles);
            f1_sum += r.f1;
            em_sum += r.em;
            report.per_example[idx] = std::move(r);
        }
    }
    report.f1 = 100.0 * f1_sum / static_cast<double>(examples.size());
    report.em = 100.0 * em_sum / static_cast<double>(examples.size());
    return report;
}

} // namespace tinykd
