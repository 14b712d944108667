// SPDX-License-Identifier: Apache-2.0
#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <fstream>

#include "tinykd/data.hpp"

using namespace tinykd;

namespace {

struct TempFile {
    std::string path;
    explicit TempFile(const std::string& name) : path("/tmp/tinykd_test_" + name) {}
    ~TempFile() { std::remove(path.c_str()); }
};

} // namespace

TEST_CASE("tokenize_with_offsets") {
    SECTION("splits trailing punctuation") {
        const auto toks = tokenize_with_offsets("El gato.");
        REQUIRE(toks.size() == 3);
        CHECK(toks[0].text == "El");
        CHECK(toks[0].begin == 0);
        CHECK(toks[0].end == 2);
        CHECK(toks[1].text == "gato");
        CHECK(toks[1].begin == 3);
        CHECK(toks[1].end == 7);
        CHECK(toks[2].text == ".");
        CHECK(toks[2].begin == 7);
        CHECK(toks[2].end == 8);
    }
    SECTION("empty string") { CHECK(tokenize_with_offsets("").empty()); }
    SECTION("offsets skip whitespace") {
        const auto toks = tokenize_with_offsets("a  b");
        REQUIRE(toks.size() == 2);
        CHECK(toks[0].begin == 0);
        CHECK(toks[0].end == 1);
        CHECK(toks[1].begin == 3);
        CHECK(toks[1].end == 4);
    }
    SECTION("leading punctuation and interior punctuation") {
        const auto toks = tokenize_with_offsets("¿gato? si,no");
        REQUIRE(toks.size() == 4);
        CHECK(toks[0].text == "¿");
        CHECK(toks[1].text == "gato");
        CHECK(toks[2].text == "?");
        CHECK(toks[3].text == "si,no");  // only leading/trailing punctuation splits
    }
    SECTION("offsets reproduce all non-whitespace content in order") {
        const std::string text = "  ¡Hola!  ¿como  estas?  bien. ";
        std::string rebuilt;
        for (const auto& t : tokenize_with_offsets(text)) rebuilt += text.substr(t.begin, t.end - t.begin);
        std::string expect;
        for (char c : text)
            if (!std::isspace(static_cast<unsigned char>(c))) expect += c;
        CHECK(rebuilt == expect);
    }
}

TEST_CASE("build_vocab") {
    std::vector<QAExample> corpus = {{"1", "aa bb", "aa cc aa", {}}};
    SECTION("distinct tokens plus the four reserved ids") {
        const Vocab v = build_vocab(corpus, 100);
        CHECK(v.size() == 7);
        CHECK(v.id_of("<pad>") == 0);
        CHECK(v.id_of("aa") >= 4);
        CHECK(v.id_of("zzz") == Vocab::unk_id);
    }
    SECTION("determinism") {
        const Vocab a = build_vocab(corpus, 100);
        const Vocab b = build_vocab(corpus, 100);
        CHECK(a.id_to_token == b.id_to_token);
    }
    SECTION("frequency beats lexicographic order when slots run out") {
        std::vector<QAExample> c2 = {{"1", "zz zz", "aa", {}}};
        const Vocab v = build_vocab(c2, 5);  // room for exactly one real token
        CHECK(v.size() == 5);
        CHECK(v.id_of("zz") == 4);
        CHECK(v.id_of("aa") == Vocab::unk_id);
    }
    SECTION("frequency ties break lexicographically") {
        std::vector<QAExample> c3 = {{"1", "bb aa", "cc", {}}};
        const Vocab v = build_vocab(c3, 6);
        CHECK(v.id_of("aa") == 4);
        CHECK(v.id_of("bb") == 5);
        CHECK(v.id_of("cc") == Vocab::unk_id);
    }
    SECTION("max_size must exceed the reserved ids") {
        CHECK_THROWS_AS(build_vocab(corpus, 4), std::invalid_argument);
    }
}

TEST_CASE("vocab JSON round-trip") {
    const Vocab v = build_vocab({{"1", "uno dos", "tres", {}}}, 100);
    TempFile tf("vocab.json");
    save_vocab(v, tf.path);
    const Vocab re = load_vocab(tf.path);
    CHECK(re.id_to_token == v.id_to_token);
}

TEST_CASE("encode_example") {
    const QAExample ex{"e1", "donde esta", "el gato negro duerme aqui", {{"gato", 3}}};
    const Vocab vocab = build_vocab({ex}, 100);

    SECTION("layout and region boundaries") {
        const auto enc = encode_example(ex, vocab, 32);
        CHECK(enc.token_ids.front() == Vocab::cls_id);
        CHECK(enc.token_ids[3] == Vocab::sep_id);
        CHECK(enc.context_begin == 4);
        CHECK(enc.context_end == 9);
        CHECK(enc.token_ids.back() == Vocab::sep_id);
        // gold "gato" is the second context token
        CHECK(enc.gold_start == static_cast<int>(enc.context_begin) + 1);
        CHECK(enc.gold_end == enc.gold_start);
        const auto& off = enc.offsets[static_cast<std::size_t>(enc.gold_start)];
        CHECK(ex.context.substr(static_cast<std::size_t>(off.first),
                                static_cast<std::size_t>(off.second - off.first)) == "gato");
    }
    SECTION("answer at context start") {
        QAExample first{"e2", "que", "gato negro", {{"gato", 0}}};
        const auto enc = encode_example(first, build_vocab({first}, 100), 32);
        CHECK(enc.gold_start == static_cast<int>(enc.context_begin));
    }
    SECTION("multi-token span covers the answer offsets") {
        QAExample multi{"e3", "que", "el gato negro duerme", {{"gato negro", 3}}};
        const auto enc = encode_example(multi, build_vocab({multi}, 100), 32);
        REQUIRE(enc.gold_start > 0);
        CHECK(enc.gold_end == enc.gold_start + 1);
        const auto& so = enc.offsets[static_cast<std::size_t>(enc.gold_start)];
        const auto& eo = enc.offsets[static_cast<std::size_t>(enc.gold_end)];
        CHECK(so.first <= 3);
        CHECK(eo.second >= static_cast<int>(3 + std::string("gato negro").size()));
    }
    SECTION("context truncation keeps max_seq tokens when the answer survives") {
        std::string ctx = "gato";
        for (int i = 0; i < 50; ++i) ctx += " filler" + std::to_string(i);
        QAExample longctx{"e4", "que", ctx, {{"gato", 0}}};
        const auto enc = encode_example(longctx, build_vocab({longctx}, 100), 16);
        CHECK(enc.length() == 16);
        CHECK(enc.gold_start == static_cast<int>(enc.context_begin));
    }
    SECTION("gold truncated away is an unencodable-example error") {
        std::string ctx;
        for (int i = 0; i < 50; ++i) ctx += "filler" + std::to_string(i) + " ";
        ctx += "gato";
        QAExample lost{"e5", "que", ctx, {{"gato", ctx.size() - 4}}};
        const Vocab v = build_vocab({lost}, 200);
        CHECK_THROWS_WITH(encode_example(lost, v, 16), Catch::Matchers::ContainsSubstring("unencodable"));
        const auto enc = encode_example(lost, v, 16, false);
        CHECK(enc.gold_start == -1);
    }
    SECTION("out-of-vocabulary tokens map to <unk>") {
        Vocab tiny;  // reserved only
        const auto enc = encode_example(ex, tiny, 32, false);
        for (std::size_t i = enc.context_begin; i < enc.context_end; ++i)
            CHECK(enc.token_ids[i] == Vocab::unk_id);
    }
}

TEST_CASE("load_squad_json") {
    SECTION("flattens the article/paragraph/qas hierarchy") {
        TempFile tf("squad_ok.json");
        {
            std::ofstream f(tf.path);
            f << R"({"version":"1.1","data":[{"title":"t","paragraphs":[{"context":"el gato duerme",
                 "qas":[{"id":"q1","question":"quien","answers":[{"text":"gato","answer_start":3}]},
                        {"id":"q2","question":"que hace","answers":[{"text":"duerme","answer_start":8}]}]}]}]})";
        }
        const auto report = load_squad_json(tf.path);
        CHECK(report.examples.size() == 2);
        CHECK(report.skipped == 0);
        CHECK(report.examples[0].id == "q1");
        CHECK(report.examples[1].answers[0].text == "duerme");
    }
    SECTION("mismatched answer_start is skipped and counted") {
        TempFile tf("squad_bad.json");
        {
            std::ofstream f(tf.path);
            f << R"({"version":"1.1","data":[{"title":"t","paragraphs":[{"context":"el gato",
                 "qas":[{"id":"q1","question":"quien","answers":[{"text":"gato","answer_start":0}]},
                        {"id":"q2","question":"quien","answers":[{"text":"gato","answer_start":3}]}]}]}]})";
        }
        const auto report = load_squad_json(tf.path);
        CHECK(report.examples.size() == 1);
        CHECK(report.skipped == 1);
    }
    SECTION("malformed JSON is a parse error with location") {
        TempFile tf("squad_parse.json");
        {
            std::ofstream f(tf.path);
            f << "{\"data\": [";
        }
        CHECK_THROWS_WITH(load_squad_json(tf.path), Catch::Matchers::ContainsSubstring("parse error"));
    }
    SECTION("missing field is a schema error naming the field") {
        TempFile tf("squad_schema.json");
        {
            std::ofstream f(tf.path);
            f << R"({"version":"1.1","data":[{"title":"t","paragraphs":[{"context":"x","qas":[{"id":"a","question":"b"}]}]}]})";
        }
        CHECK_THROWS_WITH(load_squad_json(tf.path), Catch::Matchers::ContainsSubstring("answers"));
    }
}

TEST_CASE("SQuAD JSON write/reload round-trip") {
    const auto examples = gen_synthetic(3, 10, 4, 7);
    TempFile tf("squad_rt.json");
    write_squad_json(examples, tf.path);
    const auto report = load_squad_json(tf.path);
    CHECK(report.skipped == 0);
    REQUIRE(report.examples.size() == examples.size());
    for (std::size_t i = 0; i < examples.size(); ++i) CHECK(report.examples[i] == examples[i]);
}

TEST_CASE("gen_synthetic") {
    SECTION("hand-checked offsets") {
        // context of the shape "k? v? k? v?": the value after the queried key
        const auto ex = gen_synthetic(1, 6, 2, 3).front();
        REQUIRE(ex.answers.size() == 1);
        const auto& a = ex.answers.front();
        CHECK(ex.context.substr(a.answer_start, a.text.size()) == a.text);
        const auto toks = tokenize_with_offsets(ex.context);
        bool found = false;
        for (std::size_t i = 0; i + 1 < toks.size(); ++i)
            if (toks[i].text == ex.question && toks[i + 1].begin == a.answer_start) found = true;
        CHECK(found);
    }
    SECTION("substring invariant holds across a batch") {
        for (const auto& ex : gen_synthetic(200, 30, 6, 11)) {
            REQUIRE(ex.answers.size() == 1);
            CHECK(ex.context.substr(ex.answers[0].answer_start, ex.answers[0].text.size()) == ex.answers[0].text);
        }
    }
    SECTION("deterministic per seed") {
        CHECK(gen_synthetic(20, 12, 3, 5) == gen_synthetic(20, 12, 3, 5));
        CHECK(gen_synthetic(20, 12, 3, 5) != gen_synthetic(20, 12, 3, 6));
    }
    SECTION("a brute-force string matcher solves the task perfectly") {
        const auto data = gen_synthetic(300, 25, 5, 13);
        std::size_t em = 0;
        for (const auto& ex : data) {
            const auto toks = tokenize_with_offsets(ex.context);
            std::string answer;
            for (std::size_t i = 0; i + 1 < toks.size(); ++i)
                if (toks[i].text == ex.question) {
                    answer = toks[i + 1].text;
                    break;
                }
            em += static_cast<std::size_t>(answer == ex.answers[0].text);
        }
        CHECK(em == data.size());
    }
    SECTION("invalid parameters rejected") {
        CHECK_THROWS_AS(gen_synthetic(1, 2, 5, 0), std::invalid_argument);
    }
}

TEST_CASE("make_batches pads and masks") {
    const auto data = gen_synthetic(5, 10, 3, 17);
    const Vocab vocab = build_vocab(data, 100);
    std::vector<EncodedExample> encoded;
    for (const auto& ex : data) encoded.push_back(encode_example(ex, vocab, 32));
    const auto batches = make_batches(encoded, 2, identity_order(encoded.size()));
    REQUIRE(batches.size() == 3);  // last partial batch kept
    CHECK(batches.back().indices.size() == 1);
    for (const auto& b : batches) {
        const std::size_t maxlen = b.token_ids.shape[1];
        for (std::size_t i = 0; i < b.indices.size(); ++i) {
            const auto& enc = encoded[b.indices[i]];
            for (std::size_t j = 0; j < maxlen; ++j) {
                const bool real = j < enc.length();
                CHECK((b.mask.data[i * maxlen + j] != 0) == real);
                if (!real) CHECK(b.token_ids.data[i * maxlen + j] == Vocab::pad_id);
            }
        }
    }
}
