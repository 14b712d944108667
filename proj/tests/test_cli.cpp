// SPDX-License-Identifier: Apache-2.0
#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <unistd.h>

#include "tinykd/cli.hpp"

using namespace tinykd;

namespace {

struct TempDir {
    std::string base;
    TempDir() : base("/tmp/tinykd_cli_" + std::to_string(::getpid())) { std::system(("mkdir -p " + base).c_str()); }
    ~TempDir() { std::system(("rm -rf " + base).c_str()); }
    std::string operator/(const std::string& name) const { return base + "/" + name; }
};

std::string slurp(const std::string& path) {
    std::ifstream f(path);
    REQUIRE(f.good());
    return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
}

} // namespace

TEST_CASE("cli usage errors exit with code 1") {
    CHECK(cli::run({"datagen"}) == 1);                                    // missing required flags
    CHECK(cli::run({"datagen", "--examples", "4", "--out", "/tmp/x", "--bogus"}) == 1);  // unknown flag
    CHECK(cli::run({"no-such-command"}) == 1);
    CHECK(cli::run({"--help"}) == 0);
}

TEST_CASE("cli runtime errors exit with code 2") {
    TempDir dir;
    CHECK(cli::run({"eval", "--model", dir / "missing.ckpt", "--data", dir / "missing.json", "--out",
                    dir / "r.json"}) == 2);
}

TEST_CASE("cli datagen artifacts load cleanly and are solvable and reproducible") {
    TempDir dir;
    const std::string out = dir / "data.json";
    REQUIRE(cli::run({"datagen", "--examples", "64", "--keys", "12", "--pairs", "3", "--seed", "9", "--out", out}) ==
            0);
    const auto report = load_squad_json(out);
    CHECK(report.examples.size() == 64);
    CHECK(report.skipped == 0);

    // brute-force string matcher achieves perfect EM on the emitted file
    std::size_t em = 0;
    for (const auto& ex : report.examples) {
        const auto toks = tokenize_with_offsets(ex.context);
        for (std::size_t i = 0; i + 1 < toks.size(); ++i)
            if (toks[i].text == ex.question) {
                em += static_cast<std::size_t>(exact_match(toks[i + 1].text, {ex.answers[0].text}));
                break;
            }
    }
    CHECK(em == report.examples.size());

    const std::string again = dir / "data2.json";
    REQUIRE(cli::run({"datagen", "--examples", "64", "--keys", "12", "--pairs", "3", "--seed", "9", "--out",
                      again}) == 0);
    CHECK(slurp(out) == slurp(again));
}

TEST_CASE("cli end-to-end: train, eval, distill, bench") {
    TempDir dir;
    const std::string data = dir / "train.json";
    REQUIRE(cli::run({"datagen", "--examples", "48", "--keys", "10", "--pairs", "2", "--seed", "3", "--out", data}) ==
            0);

    const std::string teacher_cfg = dir / "teacher.json";
    {
        std::ofstream f(teacher_cfg);
        f << R"({"model": {"layers": 2, "hidden": 16, "ff": 32, "heads": 2, "max_positions": 32},
                 "train": {"learning_rate": 1e-3, "batch_size": 16, "max_seq": 32, "epochs": 2, "seed": 1}})";
    }
    const std::string teacher_ckpt = dir / "teacher.ckpt";
    REQUIRE(cli::run({"train-teacher", "--config", teacher_cfg, "--data", data, "--out", teacher_ckpt}) == 0);
    CHECK(nlohmann::json::parse(slurp(teacher_ckpt + ".train.json"))["epochs"].size() == 2);

    SECTION("eval emits the documented report schema") {
        const std::string report_path = dir / "report.json";
        REQUIRE(cli::run({"eval", "--model", teacher_ckpt, "--data", data, "--out", report_path, "--max-seq",
                          "32"}) == 0);
        const auto j = nlohmann::json::parse(slurp(report_path));
        REQUIRE(j.contains("f1"));
        REQUIRE(j.contains("em"));
        REQUIRE(j.contains("per_example"));
        CHECK(j["per_example"].size() == 48);
        CHECK(j["f1"].get<double>() >= 0.0);
        CHECK(j["f1"].get<double>() <= 100.0);
        for (const char* key : {"id", "prediction", "golds", "f1", "em"})
            CHECK(j["per_example"][0].contains(key));
    }

    SECTION("distill then bench with the teacher as reference") {
        const std::string student_cfg = dir / "student.json";
        {
            std::ofstream f(student_cfg);
            f << R"({"model": {"layers": 1, "hidden": 8, "ff": 16, "heads": 2},
                     "plan": {"temperature": 1.0},
                     "train": {"learning_rate": 1e-3, "batch_size": 16, "max_seq": 32, "epochs": 1, "seed": 2}})";
        }
        const std::string student_ckpt = dir / "student.ckpt";
        REQUIRE(cli::run({"distill", "--teacher", teacher_ckpt, "--student-config", student_cfg, "--map", "uniform",
                          "--data", data, "--out", student_ckpt}) == 0);
        const auto log = nlohmann::json::parse(slurp(student_ckpt + ".train.json"));
        CHECK(log["layer_map"] == nlohmann::json::array({2}));
        REQUIRE(log["epochs"].size() == 1);
        CHECK(log["epochs"][0].contains("mean_total"));

        const std::string bench_path = dir / "bench.json";
        REQUIRE(cli::run({"bench", "--models", teacher_ckpt + "," + student_ckpt, "--reference", "teacher",
                          "--seq-len", "24", "--runs", "3", "--warmup", "1", "--out", bench_path}) == 0);
        const auto j = nlohmann::json::parse(slurp(bench_path));
        CHECK(j["reference"] == "teacher");
        REQUIRE(j["models"].size() == 2);
        CHECK(j["models"][0]["name"] == "teacher");
        CHECK(j["models"][0]["speedup"] == 1.0);
        CHECK(j["models"][1]["speedup"].get<double>() > 0.0);
    }

    SECTION("explicit layer map file") {
        const std::string map_path = dir / "map.json";
        {
            std::ofstream f(map_path);
            f << "[2]";
        }
        const std::string student_cfg = dir / "student2.json";
        {
            std::ofstream f(student_cfg);
            f << R"({"model": {"layers": 1, "hidden": 8, "ff": 16, "heads": 2},
                     "train": {"learning_rate": 1e-3, "epochs": 1, "max_seq": 32}})";
        }
        const std::string out = dir / "student2.ckpt";
        REQUIRE(cli::run({"distill", "--teacher", teacher_ckpt, "--student-config", student_cfg, "--map",
                          "explicit:" + map_path, "--data", data, "--out", out}) == 0);
        const auto ckpt = load_checkpoint<double>(out);
        REQUIRE(ckpt.plan.has_value());
        CHECK(ckpt.plan->layer_map == std::vector<int>{2});
    }

    SECTION("bad --map value is a usage error") {
        CHECK(cli::run({"distill", "--teacher", teacher_ckpt, "--student-config", teacher_cfg, "--map", "wat",
                        "--data", data, "--out", dir / "x.ckpt"}) == 1);
    }
}
