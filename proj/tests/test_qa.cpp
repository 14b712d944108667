// SPDX-License-Identifier: Apache-2.0
#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "tinykd/qa.hpp"

using namespace tinykd;

TEST_CASE("span_logits basics") {
    SECTION("zero hidden states and zero weights leave only the bias") {
        SpanHead head;
        head.weight = Tensor::zeros({3, 2});
        head.bias = Tensor({2}, {0.25, -0.5});
        Tensor hidden = Tensor::zeros({1, 2, 3});
        const auto [start, end] = span_logits(hidden, head, BoolTensor::full({1, 2}, true));
        for (double v : start.value()) CHECK(v == 0.25);
        for (double v : end.value()) CHECK(v == -0.5);
    }
    SECTION("masked positions get the -inf surrogate and lose every argmax") {
        SpanHead head;
        head.weight = Tensor::zeros({3, 2});
        head.bias = Tensor({2}, {5.0, 5.0});
        Tensor hidden = Tensor::zeros({1, 2, 3});
        BoolTensor mask({1, 2}, {1, 0});
        const auto [start, end] = span_logits(hidden, head, mask);
        CHECK(start.value()[0] == 5.0);
        CHECK(start.value()[1] == masked_logit<double>());
        CHECK(end.value()[1] == masked_logit<double>());
    }
    SECTION("hand-set 2-token affine map") {
        SpanHead head;
        head.weight = Tensor({2, 2}, {1.0, -1.0, 2.0, 0.5});
        head.bias = Tensor({2}, {0.1, 0.2});
        Tensor hidden({1, 2, 2}, {1.0, 2.0, -1.0, 0.5});
        const auto [start, end] = span_logits(hidden, head, BoolTensor::full({1, 2}, true));
        CHECK(start.value()[0] == Catch::Approx(1.0 * 1.0 + 2.0 * 2.0 + 0.1).margin(1e-12));
        CHECK(end.value()[0] == Catch::Approx(1.0 * -1.0 + 2.0 * 0.5 + 0.2).margin(1e-12));
        CHECK(start.value()[1] == Catch::Approx(-1.0 * 1.0 + 0.5 * 2.0 + 0.1).margin(1e-12));
        CHECK(end.value()[1] == Catch::Approx(-1.0 * -1.0 + 0.5 * 0.5 + 0.2).margin(1e-12));
    }
}

TEST_CASE("task_loss_hard values") {
    SECTION("certain prediction at the gold indices gives zero") {
        Tensor start({1, 3}, {100.0, 0.0, 0.0});
        Tensor end({1, 3}, {0.0, 0.0, 100.0});
        CHECK(task_loss_hard(start, end, 0, 2).item() == Catch::Approx(0.0).margin(1e-12));
    }
    SECTION("uniform logits over n positions give ln n") {
        Tensor start({1, 4}, {0, 0, 0, 0});
        Tensor end({1, 4}, {0, 0, 0, 0});
        CHECK(task_loss_hard(start, end, 1, 2).item() == Catch::Approx(std::log(4.0)).margin(1e-12));
    }
    SECTION("raising the gold logit lowers the loss") {
        Tensor end({1, 2}, {0.0, 0.0});
        double prev = 1e300;
        for (double boost : {0.0, 0.5, 1.0, 2.0}) {
            Tensor start({1, 2}, {boost, 0.0});
            const double loss = task_loss_hard(start, end, 0, 0).item();
            CHECK(loss < prev);
            prev = loss;
        }
    }
    SECTION("gold at masked position is a label error") {
        Tensor start({1, 2}, {0.0, masked_logit<double>()});
        Tensor end({1, 2}, {0.0, 0.0});
        CHECK_THROWS_WITH(task_loss_hard(start, end, 1, 0), Catch::Matchers::ContainsSubstring("masked"));
        CHECK_THROWS_AS(task_loss_hard(start, end, 5, 0), std::invalid_argument);
    }
}

TEST_CASE("task_loss_hard agrees with soft_cross_entropy against a one-hot teacher") {
    Rng rng(101);
    for (int trial = 0; trial < 10; ++trial) {
        const std::size_t l = 6;
        std::vector<double> s(l), e(l);
        for (auto& v : s) v = rng.uniform(-2, 2);
        for (auto& v : e) v = rng.uniform(-2, 2);
        const int gs = static_cast<int>(rng.next_below(l));
        const int ge = static_cast<int>(rng.next_below(l));
        Tensor start({1, l}, s), end({1, l}, e);
        std::vector<double> onehot_s(l, 0.0), onehot_e(l, 0.0);
        onehot_s[static_cast<std::size_t>(gs)] = 1.0;
        onehot_e[static_cast<std::size_t>(ge)] = 1.0;
        const double hard = task_loss_hard(start, end, gs, ge).item();
        const double soft = 0.5 * (soft_cross_entropy(start, Tensor({1, l}, onehot_s), 1.0).item() +
                                   soft_cross_entropy(end, Tensor({1, l}, onehot_e), 1.0).item());
        CHECK(hard == Catch::Approx(soft).margin(1e-9));
    }
}

namespace {

EncodedExample span_fixture(std::size_t context_tokens) {
    // layout: <cls> q <sep> c0 c1 ... <sep>
    EncodedExample enc;
    enc.id = "fix";
    enc.token_ids.assign(3 + context_tokens + 1, 5);
    enc.token_ids[0] = Vocab::cls_id;
    enc.token_ids[2] = Vocab::sep_id;
    enc.token_ids.back() = Vocab::sep_id;
    enc.context_begin = 3;
    enc.context_end = 3 + context_tokens;
    enc.offsets.assign(enc.token_ids.size(), {-1, -1});
    for (std::size_t i = 0; i < context_tokens; ++i)
        enc.offsets[3 + i] = {static_cast<int>(3 * i), static_cast<int>(3 * i + 2)};
    return enc;
}

} // namespace

TEST_CASE("extract_span decoding") {
    const std::string context = "aa bb cc dd";  // tokens at 0-2, 3-5, 6-8, 9-11
    SECTION("single context token") {
        const auto enc = span_fixture(1);
        std::vector<double> logits(enc.token_ids.size(), 0.0);
        const auto pred = extract_span(logits, logits, enc, context, 30);
        CHECK(pred.start_token == 3);
        CHECK(pred.end_token == 3);
        CHECK(pred.text == "aa");
    }
    SECTION("argmax over valid pairs") {
        const auto enc = span_fixture(2);
        std::vector<double> start(enc.token_ids.size(), -10.0), end(enc.token_ids.size(), -10.0);
        start[3] = 5.0;
        start[4] = 0.0;
        end[3] = 0.0;
        end[4] = 5.0;
        const auto pred = extract_span(start, end, enc, context, 30);
        CHECK(pred.start_token == 3);
        CHECK(pred.end_token == 4);
        CHECK(pred.text == "aa bb");
        CHECK(pred.score == 10.0);
    }
    SECTION("question region is never selected even with a huge logit") {
        const auto enc = span_fixture(2);
        std::vector<double> start(enc.token_ids.size(), 0.0), end(enc.token_ids.size(), 0.0);
        start[1] = 100.0;  // question token
        end[enc.token_ids.size() - 1] = 100.0;  // trailing separator
        const auto pred = extract_span(start, end, enc, context, 30);
        CHECK(pred.start_token >= 3);
        CHECK(pred.end_token < 5);
    }
    SECTION("max_answer_tokens bounds the span length") {
        const auto enc = span_fixture(4);
        std::vector<double> start(enc.token_ids.size(), 0.0), end(enc.token_ids.size(), 0.0);
        start[3] = 10.0;
        end[6] = 10.0;  // span of 4 tokens, forbidden at cap 2
        const auto pred = extract_span(start, end, enc, context, 2);
        CHECK(pred.end_token - pred.start_token < 2);
    }
    SECTION("ties break to the smallest start then shortest span") {
        const auto enc = span_fixture(3);
        std::vector<double> flat(enc.token_ids.size(), 0.0);
        const auto pred = extract_span(flat, flat, enc, context, 30);
        CHECK(pred.start_token == 3);
        CHECK(pred.end_token == 3);
    }
    SECTION("no valid pair is an error") {
        auto enc = span_fixture(1);
        enc.context_end = enc.context_begin;  // empty context region
        std::vector<double> logits(enc.token_ids.size(), 0.0);
        CHECK_THROWS_AS(extract_span(logits, logits, enc, context, 30), std::runtime_error);
    }
}

TEST_CASE("normalize_answer applies the four rules in order") {
    CHECK(normalize_answer("El Gato.") == "gato");
    CHECK(normalize_answer("") == "");
    CHECK(normalize_answer("1492") == "1492");
    CHECK(normalize_answer("  La  CASA   blanca  ") == "casa blanca");
    CHECK(normalize_answer("¿Unos perros!") == "perros");  // inverted question mark stripped
    CHECK(normalize_answer("los", {}) == "los");                // article list is configuration
}

TEST_CASE("exact_match semantics") {
    CHECK(exact_match("gato", {"gato"}) == 1);
    CHECK(exact_match("El gato", {"gato"}) == 1);
    CHECK(exact_match("perro", {"gato"}) == 0);
    CHECK(exact_match("gato", {"perro", "gato"}) == 1);
    CHECK_THROWS_AS(exact_match("gato", {}), std::invalid_argument);
}

TEST_CASE("f1_score token-bag overlap") {
    CHECK(f1_score("gato", {"gato"}) == 1.0);
    CHECK(f1_score("gato negro grande", {"gato negro"}) == 0.8);
    CHECK(f1_score("perro", {"gato"}) == 0.0);
    CHECK(f1_score("", {""}) == 1.0);    // both empty after normalization
    CHECK(f1_score("gato", {""}) == 0.0);  // exactly one empty
    CHECK(f1_score("", {"gato"}) == 0.0);
    CHECK(f1_score("a b", {"zzz", "a b"}) == 1.0);  // max over golds
    CHECK_THROWS_AS(f1_score("gato", {}), std::invalid_argument);
}

TEST_CASE("f1 is symmetric under swapping prediction with a single gold") {
    Rng rng(111);
    const std::vector<std::string> words = {"el", "gato", "negro", "1492", "casa.", "¡sol!", "luna"};
    for (int trial = 0; trial < 200; ++trial) {
        auto make = [&] {
            std::string s;
            const std::size_t n = rng.next_below(5);
            for (std::size_t i = 0; i < n; ++i) {
                if (!s.empty()) s += " ";
                s += words[rng.next_below(words.size())];
            }
            return s;
        };
        const std::string a = make(), b = make();
        CHECK(f1_score(a, {b}) == f1_score(b, {a}));
    }
}

TEST_CASE("exact match implies F1 of 1 on randomized pairs") {
    Rng rng(121);
    const std::vector<std::string> words = {"el", "la",   "gato", "negro", "1492", "casa",
                                            "sol", "luna", "un",   "perro", "¿que?"};
    int verified = 0;
    for (int trial = 0; trial < 1000; ++trial) {
        std::string a, b;
        const std::size_t n = 1 + rng.next_below(4);
        for (std::size_t i = 0; i < n; ++i) {
            a += (i ? " " : "") + words[rng.next_below(words.size())];
            b += (i ? " " : "") + words[rng.next_below(words.size())];
        }
        if (rng.uniform01() < 0.4) b = a + ".";  // force frequent matches modulo normalization
        if (exact_match(a, {b}) == 1) {
            CHECK(f1_score(a, {b}) == 1.0);
            ++verified;
        }
    }
    CHECK(verified > 100);  // the property must actually have been exercised
}
