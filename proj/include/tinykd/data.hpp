// SPDX-License-Identifier: Apache-2.0
//
// SQuAD-schema ingestion, whitespace+punctuation tokenizer with character
// offsets, example encoding and a synthetic key/value QA generator.
#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <map>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include <json.hpp>

#include "tinykd/tensor.hpp"

namespace tinykd {

struct QAAnswer {
    std::string text;
    std::size_t answer_start = 0;  // character offset into the context

    bool operator==(const QAAnswer&) const = default;
};

struct QAExample {
    std::string id;
    std::string question;
    std::string context;
    std::vector<QAAnswer> answers;

    bool operator==(const QAExample&) const = default;
};

// ---------------------------------------------------------------------------
// tokenizer
// ---------------------------------------------------------------------------

struct TokenSpan {
    std::string text;
    std::size_t begin = 0;  // character offsets into the source string
    std::size_t end = 0;
};

namespace detail {

// Length of the punctuation character starting at `i`, or 0. Covers ASCII
// punctuation plus the Spanish inverted marks.
inline std::size_t punct_len_at(const std::string& s, std::size_t i) {
    const unsigned char c = static_cast<unsigned char>(s[i]);
    if (c < 0x80) return std::ispunct(c) ? 1 : 0;
    if (i + 1 < s.size() && c == 0xC2) {
        const unsigned char c2 = static_cast<unsigned char>(s[i + 1]);
        if (c2 == 0xBF || c2 == 0xA1) return 2;  // inverted question / exclamation mark
    }
    return 0;
}

inline std::size_t utf8_char_len(const std::string& s, std::size_t i) {
    std::size_t len = 1;
    while (i + len < s.size() && (static_cast<unsigned char>(s[i + len]) & 0xC0) == 0x80) ++len;
    return len;
}

} // namespace detail

// Splits on whitespace, then splits leading/trailing punctuation off each
// chunk as separate tokens. Offsets index the original string.
inline std::vector<TokenSpan> tokenize_with_offsets(const std::string& text) {
    std::vector<TokenSpan> out;
    std::size_t i = 0;
    while (i < text.size()) {
        if (std::isspace(static_cast<unsigned char>(text[i]))) {
            ++i;
            continue;
        }
        std::size_t end = i;
        while (end < text.size() && !std::isspace(static_cast<unsigned char>(text[end]))) ++end;

        // character units within the chunk, marking punctuation
        std::vector<std::pair<std::size_t, std::size_t>> units;  // (begin, end)
        std::vector<bool> is_punct;
        std::size_t p = i;
        while (p < end) {
            std::size_t plen = detail::punct_len_at(text, p);
            if (plen > 0) {
                units.emplace_back(p, p + plen);
                is_punct.push_back(true);
                p += plen;
            } else {
                const std::size_t clen = detail::utf8_char_len(text, p);
                units.emplace_back(p, p + clen);
                is_punct.push_back(false);
                p += clen;
            }
        }
        std::size_t first_word = units.size(), last_word = units.size();
        for (std::size_t u = 0; u < units.size(); ++u)
            if (!is_punct[u]) {
                if (first_word == units.size()) first_word = u;
                last_word = u;
            }
        auto emit = [&](std::size_t b, std::size_t e) { out.push_back({text.substr(b, e - b), b, e}); };
        if (first_word == units.size()) {
            for (auto& [b, e] : units) emit(b, e);  // all punctuation
        } else {
            for (std::size_t u = 0; u < first_word; ++u) emit(units[u].first, units[u].second);
            emit(units[first_word].first, units[last_word].second);
            for (std::size_t u = last_word + 1; u < units.size(); ++u) emit(units[u].first, units[u].second);
        }
        i = end;
    }
    return out;
}

// ---------------------------------------------------------------------------
// vocabulary
// ---------------------------------------------------------------------------

struct Vocab {
    static constexpr int pad_id = 0;
    static constexpr int unk_id = 1;
    static constexpr int sep_id = 2;
    static constexpr int cls_id = 3;

    std::vector<std::string> id_to_token;  // full table, reserved tokens first
    std::unordered_map<std::string, int> token_to_id;

    Vocab() {
        id_to_token = {"<pad>", "<unk>", "<sep>", "<cls>"};
        rebuild_index();
    }

    void rebuild_index() {
        token_to_id.clear();
        for (std::size_t i = 0; i < id_to_token.size(); ++i) token_to_id[id_to_token[i]] = static_cast<int>(i);
    }

    std::size_t size() const { return id_to_token.size(); }

    int id_of(const std::string& token) const {
        auto it = token_to_id.find(token);
        return it == token_to_id.end() ? unk_id : it->second;
    }
};

// Most frequent tokens from questions and contexts, capped at max_size;
// frequency ties break lexicographically.
inline Vocab build_vocab(const std::vector<QAExample>& examples, std::size_t max_size) {
    if (max_size <= 4) throw std::invalid_argument("build_vocab: max_size must exceed the 4 reserved ids");
    std::map<std::string, std::size_t> freq;
    for (const auto& ex : examples) {
        for (const auto& t : tokenize_with_offsets(ex.question)) ++freq[t.text];
        for (const auto& t : tokenize_with_offsets(ex.context)) ++freq[t.text];
    }
    std::vector<std::pair<std::string, std::size_t>> ranked(freq.begin(), freq.end());
    std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
        if (a.second != b.second) return a.second > b.second;
        return a.first < b.first;
    });
    Vocab v;
    for (const auto& [tok, n] : ranked) {
        if (v.size() >= max_size) break;
        v.id_to_token.push_back(tok);
    }
    v.rebuild_index();
    return v;
}

inline void save_vocab(const Vocab& v, const std::string& path) {
    nlohmann::ordered_json j = nlohmann::ordered_json::object();
    for (std::size_t i = 0; i < v.id_to_token.size(); ++i) j[v.id_to_token[i]] = i;
    std::ofstream f(path);
    if (!f) throw std::runtime_error("cannot write vocab file " + path);
    f << j.dump(1) << "\n";
}

inline Vocab load_vocab(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot read vocab file " + path);
    nlohmann::json j = nlohmann::json::parse(f);
    Vocab v;
    v.id_to_token.assign(j.size(), "");
    for (auto it = j.begin(); it != j.end(); ++it) {
        const std::size_t id = it.value().get<std::size_t>();
        if (id >= v.id_to_token.size() || !v.id_to_token[id].empty())
            throw std::runtime_error("vocab file " + path + " is not a bijective token map");
        v.id_to_token[id] = it.key();
    }
    for (int r = 0; r < 4; ++r) {
        static const char* expect[] = {"<pad>", "<unk>", "<sep>", "<cls>"};
        if (v.id_to_token[r] != expect[r])
            throw std::runtime_error("vocab file " + path + " misplaces reserved token " + expect[r]);
    }
    v.rebuild_index();
    return v;
}

// ---------------------------------------------------------------------------
// encoding
// ---------------------------------------------------------------------------

inline constexpr std::size_t kDefaultMaxSeq = 384;

struct EncodedExample {
    std::string id;
    std::vector<std::int32_t> token_ids;               // <cls> question <sep> context <sep>
    std::size_t context_begin = 0, context_end = 0;    // token index range of context tokens
    std::vector<std::pair<int, int>> offsets;          // char offsets into context; (-1,-1) outside it
    int gold_start = -1, gold_end = -1;                // token indices (training)

    std::size_t length() const { return token_ids.size(); }
};

// Layout <cls> question <sep> context <sep>, truncating the context tail to
// fit max_seq. The gold character span maps to the minimal covering token
// span; require_gold makes a truncated-away or missing gold an error.
inline EncodedExample encode_example(const QAExample& ex, const Vocab& vocab, std::size_t max_seq = kDefaultMaxSeq,
                                     bool require_gold = true) {
    const auto q_tokens = tokenize_with_offsets(ex.question);
    const auto c_tokens = tokenize_with_offsets(ex.context);

    EncodedExample enc;
    enc.id = ex.id;
    enc.token_ids.push_back(Vocab::cls_id);
    enc.offsets.emplace_back(-1, -1);
    for (const auto& t : q_tokens) {
        if (enc.token_ids.size() + 2 > max_seq) break;  // keep room for <sep> + at least nothing
        enc.token_ids.push_back(vocab.id_of(t.text));
        enc.offsets.emplace_back(-1, -1);
    }
    enc.token_ids.push_back(Vocab::sep_id);
    enc.offsets.emplace_back(-1, -1);

    enc.context_begin = enc.token_ids.size();
    std::vector<std::size_t> kept;  // indices into c_tokens
    for (std::size_t i = 0; i < c_tokens.size(); ++i) {
        if (enc.token_ids.size() + 1 >= max_seq) break;  // room for trailing <sep>
        enc.token_ids.push_back(vocab.id_of(c_tokens[i].text));
        enc.offsets.emplace_back(static_cast<int>(c_tokens[i].begin), static_cast<int>(c_tokens[i].end));
        kept.push_back(i);
    }
    enc.context_end = enc.token_ids.size();
    enc.token_ids.push_back(Vocab::sep_id);
    enc.offsets.emplace_back(-1, -1);

    if (!ex.answers.empty()) {
        const auto& gold = ex.answers.front();
        const std::size_t g_begin = gold.answer_start;
        const std::size_t g_end = g_begin + gold.text.size();
        int first = -1, last = -1;
        for (std::size_t j = 0; j < kept.size(); ++j) {
            const auto& t = c_tokens[kept[j]];
            if (t.end > g_begin && t.begin < g_end) {
                if (first < 0) first = static_cast<int>(enc.context_begin + j);
                last = static_cast<int>(enc.context_begin + j);
            }
        }
        // the span counts only if the kept tokens cover the whole gold text
        const bool covered = first >= 0 && !kept.empty() &&
                             c_tokens[kept[static_cast<std::size_t>(last - static_cast<int>(enc.context_begin))]].end >=
                                 g_end;
        if (covered) {
            enc.gold_start = first;
            enc.gold_end = last;
        } else if (require_gold) {
            throw std::runtime_error("unencodable example " + ex.id + ": gold span truncated away at max_seq " +
                                     std::to_string(max_seq));
        }
    } else if (require_gold) {
        throw std::runtime_error("unencodable example " + ex.id + ": no gold answer");
    }
    return enc;
}

// ---------------------------------------------------------------------------
// SQuAD v1.1 JSON
// ---------------------------------------------------------------------------

struct LoadReport {
    std::vector<QAExample> examples;
    std::size_t skipped = 0;  // entries whose answer offsets do not match the context
};

inline LoadReport load_squad_json(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot open dataset file " + path);
    nlohmann::json doc;
    try {
        doc = nlohmann::json::parse(f);
    } catch (const nlohmann::json::parse_error& e) {
        throw std::runtime_error("parse error in " + path + ": " + e.what());
    }
    auto need = [&](const nlohmann::json& j, const char* field) -> const nlohmann::json& {
        if (!j.contains(field))
            throw std::runtime_error("schema error in " + path + ": missing field '" + field + "'");
        return j.at(field);
    };
    LoadReport report;
    for (const auto& article : need(doc, "data")) {
        for (const auto& para : need(article, "paragraphs")) {
            const std::string context = need(para, "context").get<std::string>();
            for (const auto& qa : need(para, "qas")) {
                QAExample ex;
                ex.id = need(qa, "id").get<std::string>();
                ex.question = need(qa, "question").get<std::string>();
                ex.context = context;
                bool ok = true;
                for (const auto& ans : need(qa, "answers")) {
                    QAAnswer a;
                    a.text = need(ans, "text").get<std::string>();
                    a.answer_start = need(ans, "answer_start").get<std::size_t>();
                    if (a.answer_start + a.text.size() > context.size() ||
                        context.compare(a.answer_start, a.text.size(), a.text) != 0) {
                        ok = false;
                        break;
                    }
                    ex.answers.push_back(std::move(a));
                }
                if (ok) report.examples.push_back(std::move(ex));
                else ++report.skipped;
            }
        }
    }
    return report;
}

inline void write_squad_json(const std::vector<QAExample>& examples, const std::string& path,
                             const std::string& version = "1.1") {
    nlohmann::ordered_json paragraphs = nlohmann::ordered_json::array();
    for (const auto& ex : examples) {
        nlohmann::ordered_json answers = nlohmann::ordered_json::array();
        for (const auto& a : ex.answers) answers.push_back({{"text", a.text}, {"answer_start", a.answer_start}});
        paragraphs.push_back({{"context", ex.context},
                              {"qas", nlohmann::ordered_json::array({{{"id", ex.id},
                                                                      {"question", ex.question},
                                                                      {"answers", answers}}})}});
    }
    nlohmann::ordered_json doc = {{"version", version},
                                  {"data", nlohmann::ordered_json::array({{{"title", "data"},
                                                                           {"paragraphs", paragraphs}}})}};
    std::ofstream f(path);
    if (!f) throw std::runtime_error("cannot write dataset file " + path);
    f << doc.dump(1) << "\n";
}

// ---------------------------------------------------------------------------
// synthetic QA generator
// ---------------------------------------------------------------------------

// Contexts are sequences of distinct "kI vJ" pairs; the question names one
// key present in the context and the answer is the value that follows it.
inline std::vector<QAExample> gen_synthetic(std::size_t num_examples, std::size_t num_keys,
                                            std::size_t context_pairs, std::uint64_t seed) {
    if (context_pairs == 0 || num_keys < context_pairs)
        throw std::invalid_argument("gen_synthetic: need num_keys >= context_pairs >= 1");
    Rng rng(seed);
    std::vector<QAExample> out;
    out.reserve(num_examples);
    std::vector<std::size_t> keys(num_keys);
    for (std::size_t i = 0; i < num_keys; ++i) keys[i] = i;
    for (std::size_t n = 0; n < num_examples; ++n) {
        rng.shuffle(keys);
        QAExample ex;
        ex.id = "syn-" + std::to_string(n);
        std::vector<std::size_t> value_starts(context_pairs);
        std::vector<std::string> values(context_pairs);
        for (std::size_t p = 0; p < context_pairs; ++p) {
            const std::string key = "k" + std::to_string(keys[p]);
            const std::string value = "v" + std::to_string(rng.next_below(num_keys));
            if (p > 0) ex.context += " ";
            ex.context += key;
            ex.context += " ";
            value_starts[p] = ex.context.size();
            ex.context += value;
            values[p] = value;
        }
        const std::size_t pick = rng.next_below(context_pairs);
        ex.question = "k" + std::to_string(keys[pick]);
        ex.answers.push_back({values[pick], value_starts[pick]});
        out.push_back(std::move(ex));
    }
    return out;
}

// ---------------------------------------------------------------------------
// batching
// ---------------------------------------------------------------------------

struct EncodedBatch {
    IntTensor token_ids;  // [b x maxlen], padded
    BoolTensor mask;      // [b x maxlen]
    std::vector<int> gold_start, gold_end;
    std::vector<std::size_t> indices;  // into the encoded example list
};

inline std::vector<EncodedBatch> make_batches(const std::vector<EncodedExample>& encoded, std::size_t batch_size,
                                              const std::vector<std::size_t>& order) {
    if (batch_size == 0) throw std::invalid_argument("make_batches: batch_size must be positive");
    std::vector<EncodedBatch> out;
    for (std::size_t at = 0; at < order.size(); at += batch_size) {
        const std::size_t b = std::min(batch_size, order.size() - at);
        std::size_t maxlen = 1;
        for (std::size_t i = 0; i < b; ++i) maxlen = std::max(maxlen, encoded[order[at + i]].length());
        EncodedBatch batch;
        batch.token_ids = IntTensor({b, maxlen}, std::vector<std::int32_t>(b * maxlen, Vocab::pad_id));
        batch.mask = BoolTensor({b, maxlen}, std::vector<std::uint8_t>(b * maxlen, 0));
        for (std::size_t i = 0; i < b; ++i) {
            const auto& enc = encoded[order[at + i]];
            std::copy(enc.token_ids.begin(), enc.token_ids.end(), batch.token_ids.data.begin() + i * maxlen);
            std::fill(batch.mask.data.begin() + i * maxlen, batch.mask.data.begin() + i * maxlen + enc.length(), 1);
            batch.gold_start.push_back(enc.gold_start);
            batch.gold_end.push_back(enc.gold_end);
            batch.indices.push_back(order[at + i]);
        }
        out.push_back(std::move(batch));
    }
    return out;
}

inline std::vector<std::size_t> identity_order(std::size_t n) {
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    return order;
}

} // namespace tinykd
