// SPDX-License-Identifier: Apache-2.0
//
// Command-line front end: datagen, train-teacher, distill, eval, bench.
// Every subcommand writes a machine-readable JSON artifact and prints a short
// human summary. Exit codes: 0 success, 1 usage error, 2 runtime error.
#pragma once

#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "tinykd/bench.hpp"
#include "tinykd/checkpoint.hpp"
#include "tinykd/data.hpp"
#include "tinykd/distill.hpp"
#include "tinykd/encoder.hpp"
#include "tinykd/qa.hpp"
#include "tinykd/train.hpp"

namespace tinykd::cli {

namespace detail {

inline nlohmann::json read_json_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot open config file " + path);
    try {
        return nlohmann::json::parse(f);
    } catch (const nlohmann::json::parse_error& e) {
        throw std::runtime_error("parse error in " + path + ": " + e.what());
    }
}

inline void write_json_file(const nlohmann::ordered_json& j, const std::string& path) {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("cannot write output file " + path);
    f << j.dump(1) << "\n";
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
    ModelConfig c;
    auto need = [&](const char* field) -> std::size_t {
        if (!j.contains(field))
            throw std::runtime_error(std::string("config error: missing model field '") + field + "'");
        return j.at(field).get<std::size_t>();
    };
    c.layers = need("layers");
    c.hidden = need("hidden");
    c.ff = need("ff");
    c.heads = need("heads");
    c.vocab = j.value("vocab", std::size_t{0});              // resolved against the data vocab later
    c.max_positions = j.value("max_positions", std::size_t{512});
    return c;
}

inline std::string file_stem(const std::string& path) {
    std::size_t slash = path.find_last_of("/\\");
    std::string base = slash == std::string::npos ? path : path.substr(slash + 1);
    const std::size_t dot = base.find_last_of('.');
    if (dot != std::string::npos && dot > 0) base = base.substr(0, dot);
    return base;
}

// Encodes a dataset, skipping unencodable examples; returns the skip count.
inline std::size_t encode_dataset(const std::vector<QAExample>& examples, const Vocab& vocab, std::size_t max_seq,
                                  bool require_gold, std::vector<EncodedExample>& out) {
    std::size_t skipped = 0;
    for (const auto& ex : examples) {
        try {
            out.push_back(encode_example(ex, vocab, max_seq, require_gold));
        } catch (const std::runtime_error&) {
            ++skipped;
        }
    }
    return skipped;
}

struct TrainOverrides {
    double lr = 0.0;
    std::size_t epochs = 0;
    std::size_t batch_size = 0;
    std::size_t max_seq = 0;
    long long seed = -1;

    void apply(TrainConfig& cfg, const CLI::App& sub) const {
        if (sub.count("--lr")) cfg.learning_rate = lr;
        if (sub.count("--epochs")) cfg.epochs = epochs;
        if (sub.count("--batch-size")) cfg.batch_size = batch_size;
        if (sub.count("--max-seq")) cfg.max_seq = max_seq;
        if (sub.count("--seed")) cfg.seed = static_cast<std::uint64_t>(seed);
        cfg.validate();
    }
};

inline void add_train_overrides(CLI::App* sub, TrainOverrides& o) {
    sub->add_option("--lr", o.lr, "learning rate override");
    sub->add_option("--epochs", o.epochs, "epoch count override");
    sub->add_option("--batch-size", o.batch_size, "batch size override");
    sub->add_option("--max-seq", o.max_seq, "max sequence length override");
    sub->add_option("--seed", o.seed, "seed override");
}

} // namespace detail

inline int run(const std::vector<std::string>& args) {
    CLI::App app{"desk-scale layered knowledge distillation for span QA"};
    app.require_subcommand(1);

    // ---- datagen ----
    auto* datagen = app.add_subcommand("datagen", "generate a synthetic key/value QA dataset (SQuAD schema)");
    std::size_t dg_examples = 0, dg_keys = 40, dg_pairs = 8;
    std::uint64_t dg_seed = 0;
    std::string dg_out;
    datagen->add_option("--examples", dg_examples, "number of examples")->required();
    datagen->add_option("--keys", dg_keys, "distinct key/value words");
    datagen->add_option("--pairs", dg_pairs, "key/value pairs per context");
    datagen->add_option("--seed", dg_seed, "generator seed");
    datagen->add_option("--out", dg_out, "output dataset JSON")->required();
    datagen->callback([&] {
        const auto examples = gen_synthetic(dg_examples, dg_keys, dg_pairs, dg_seed);
        write_squad_json(examples, dg_out);
        std::cout << "datagen: wrote " << examples.size() << " examples (" << dg_keys << " keys, " << dg_pairs
                  << " pairs per context) to " << dg_out << "\n";
    });

    // ---- train-teacher ----
    auto* teach = app.add_subcommand("train-teacher", "fine-tune an encoder + span head on the hard task loss");
    std::string tt_config, tt_data, tt_out, tt_name, tt_log;
    std::size_t tt_max_vocab = 30000;
    detail::TrainOverrides tt_over;
    teach->add_option("--config", tt_config, "JSON with {\"model\": ..., \"train\": ...}")->required();
    teach->add_option("--data", tt_data, "training dataset (SQuAD JSON)")->required();
    teach->add_option("--out", tt_out, "output checkpoint path")->required();
    teach->add_option("--name", tt_name, "model name stored in the checkpoint");
    teach->add_option("--log", tt_log, "training log JSON path (default <out>.train.json)");
    teach->add_option("--max-vocab", tt_max_vocab, "vocabulary size cap");
    detail::add_train_overrides(teach, tt_over);
    teach->callback([&] {
        const auto cfg_json = detail::read_json_file(tt_config);
        if (!cfg_json.contains("model")) throw std::runtime_error("config error: missing 'model' block");
        ModelConfig mc = detail::model_config_from_json(cfg_json["model"]);
        TrainConfig tc = cfg_json.contains("train") ? TrainConfig::from_json(cfg_json["train"]) : TrainConfig{};
        tt_over.apply(tc, *teach);

        const auto loaded = load_squad_json(tt_data);
        if (loaded.examples.empty()) throw std::runtime_error("training error: no usable examples in " + tt_data);
        const Vocab vocab = build_vocab(loaded.examples, tt_max_vocab);
        mc.vocab = std::max(mc.vocab, vocab.size());
        mc.validate();

        std::vector<EncodedExample> encoded;
        const std::size_t unencodable = detail::encode_dataset(loaded.examples, vocab, tc.max_seq, true, encoded);

        EncoderModel model = init_model(mc, tc.seed);
        SpanHead head = init_span_head(mc.hidden, tc.seed + 1);
        const auto logs = train_teacher(model, head, encoded, tc);

        nlohmann::ordered_json epochs = nlohmann::ordered_json::array();
        for (const auto& log : logs) epochs.push_back({{"epoch", log.epoch}, {"mean_loss", log.mean_loss}});
        nlohmann::ordered_json meta = {{"task", "teacher"},
                                       {"data", tt_data},
                                       {"train", tc.to_json()},
                                       {"skipped_on_load", loaded.skipped},
                                       {"unencodable", unencodable},
                                       {"epochs", epochs}};
        const std::string name = tt_name.empty() ? detail::file_stem(tt_out) : tt_name;
        save_checkpoint(model, head, static_cast<const DistillPlan*>(nullptr), vocab, meta, tt_out, name);
        detail::write_json_file(meta, tt_log.empty() ? tt_out + ".train.json" : tt_log);

        std::cout << "train-teacher: " << encoded.size() << " examples, vocab " << vocab.size() << ", "
                  << logs.size() << " epochs\n";
        for (const auto& log : logs)
            std::cout << "  epoch " << log.epoch << ": mean loss " << log.mean_loss << "\n";
        std::cout << "wrote " << tt_out << "\n";
    });

    // ---- distill ----
    auto* dist = app.add_subcommand("distill", "distill a student from a teacher checkpoint");
    std::string ds_teacher, ds_config, ds_map = "uniform", ds_data, ds_out, ds_name, ds_log;
    double ds_temperature = 0.0, ds_w_task = 0.0, ds_w_layer = 0.0, ds_w_hard = 0.0;
    bool ds_match_probs = false, ds_identity_init = false;
    detail::TrainOverrides ds_over;
    dist->add_option("--teacher", ds_teacher, "teacher checkpoint")->required();
    dist->add_option("--student-config", ds_config, "JSON with {\"model\": ..., \"plan\": ..., \"train\": ...}")
        ->required();
    dist->add_option("--map", ds_map, "layer map: 'uniform' or 'explicit:<file>'");
    dist->add_option("--data", ds_data, "distillation dataset (SQuAD JSON)")->required();
    dist->add_option("--out", ds_out, "output checkpoint path")->required();
    dist->add_option("--name", ds_name, "model name stored in the checkpoint");
    dist->add_option("--log", ds_log, "training log JSON path (default <out>.train.json)");
    dist->add_option("--temperature", ds_temperature, "distillation temperature override");
    dist->add_option("--w-task", ds_w_task, "task term weight override");
    dist->add_option("--w-layer", ds_w_layer, "layer term weight override");
    dist->add_option("--w-hard", ds_w_hard, "hard-label term weight override");
    dist->add_flag("--match-probabilities", ds_match_probs, "compare post-softmax attention");
    dist->add_flag("--identity-init", ds_identity_init, "identity-initialize projections (equal widths)");
    detail::add_train_overrides(dist, ds_over);
    dist->callback([&] {
        const auto teacher_ckpt = load_checkpoint<double>(ds_teacher);
        for (auto p : teacher_ckpt.model.parameters()) p.set_requires_grad(false);
        for (auto p : teacher_ckpt.head.parameters()) p.set_requires_grad(false);

        const auto cfg_json = detail::read_json_file(ds_config);
        if (!cfg_json.contains("model")) throw std::runtime_error("config error: missing 'model' block");
        ModelConfig sc = detail::model_config_from_json(cfg_json["model"]);
        sc.vocab = teacher_ckpt.model.config.vocab;
        if (!cfg_json["model"].contains("max_positions")) sc.max_positions = teacher_ckpt.model.config.max_positions;
        sc.validate();
        TrainConfig tc = cfg_json.contains("train") ? TrainConfig::from_json(cfg_json["train"]) : TrainConfig{};
        ds_over.apply(tc, *dist);

        DistillOptions opt;
        if (cfg_json.contains("plan")) {
            const auto& pj = cfg_json["plan"];
            opt.w_task = pj.value("w_task", opt.w_task);
            opt.w_layer = pj.value("w_layer", opt.w_layer);
            opt.w_hard = pj.value("w_hard", opt.w_hard);
            opt.temperature = pj.value("temperature", opt.temperature);
            opt.match_probabilities = pj.value("match_probabilities", opt.match_probabilities);
            opt.identity_init = pj.value("identity_init", opt.identity_init);
        }
        if (dist->count("--temperature")) opt.temperature = ds_temperature;
        if (dist->count("--w-task")) opt.w_task = ds_w_task;
        if (dist->count("--w-layer")) opt.w_layer = ds_w_layer;
        if (dist->count("--w-hard")) opt.w_hard = ds_w_hard;
        if (ds_match_probs) opt.match_probabilities = true;
        if (ds_identity_init) opt.identity_init = true;

        std::vector<int> layer_map;
        if (ds_map == "uniform") {
            layer_map = layer_map_uniform(sc.layers, teacher_ckpt.model.config.layers);
        } else if (ds_map.rfind("explicit:", 0) == 0) {
            layer_map = detail::read_json_file(ds_map.substr(9)).get<std::vector<int>>();
        } else {
            throw CLI::ValidationError("--map", "expected 'uniform' or 'explicit:<file>'");
        }

        const auto loaded = load_squad_json(ds_data);
        if (loaded.examples.empty()) throw std::runtime_error("training error: no usable examples in " + ds_data);
        std::vector<EncodedExample> encoded;
        const std::size_t unencodable =
            detail::encode_dataset(loaded.examples, teacher_ckpt.vocab, tc.max_seq, opt.w_hard > 0.0, encoded);

        DistillResult result =
            distill_student(teacher_ckpt.model, teacher_ckpt.head, sc, encoded, layer_map, opt, tc);

        nlohmann::ordered_json epochs = nlohmann::ordered_json::array();
        for (const auto& log : result.logs)
            epochs.push_back({{"epoch", log.epoch},
                              {"mean_total", log.total},
                              {"mean_task", log.task},
                              {"mean_layer", log.layer},
                              {"mean_hard", log.hard}});
        nlohmann::ordered_json meta = {{"task", "distilled-student"},
                                       {"teacher", ds_teacher},
                                       {"data", ds_data},
                                       {"train", tc.to_json()},
                                       {"layer_map", layer_map},
                                       {"skipped_on_load", loaded.skipped},
                                       {"unencodable", unencodable},
                                       {"epochs", epochs}};
        const std::string name = ds_name.empty() ? detail::file_stem(ds_out) : ds_name;
        save_checkpoint(result.student, result.head, &result.plan, teacher_ckpt.vocab, meta, ds_out, name);
        detail::write_json_file(meta, ds_log.empty() ? ds_out + ".train.json" : ds_log);

        std::cout << "distill: " << encoded.size() << " examples, layer map [";
        for (std::size_t i = 0; i < layer_map.size(); ++i) std::cout << (i ? "," : "") << layer_map[i];
        std::cout << "], " << result.logs.size() << " epochs\n";
        for (const auto& log : result.logs)
            std::cout << "  epoch " << log.epoch << ": total " << log.total << " (task " << log.task << ", layers "
                      << log.layer << ")\n";
        std::cout << "wrote " << ds_out << "\n";
    });

    // ---- eval ----
    auto* ev = app.add_subcommand("eval", "evaluate a checkpoint with SQuAD-style F1 / EM");
    std::string ev_model, ev_data, ev_out;
    std::size_t ev_batch = 32, ev_max_seq = kDefaultMaxSeq, ev_max_answer = kDefaultMaxAnswerTokens;
    ev->add_option("--model", ev_model, "checkpoint to evaluate")->required();
    ev->add_option("--data", ev_data, "evaluation dataset (SQuAD JSON)")->required();
    ev->add_option("--out", ev_out, "report JSON path")->required();
    ev->add_option("--batch-size", ev_batch, "evaluation batch size");
    ev->add_option("--max-seq", ev_max_seq, "max sequence length");
    ev->add_option("--max-answer-tokens", ev_max_answer, "span decoding length cap");
    ev->callback([&] {
        const auto ckpt = load_checkpoint<double>(ev_model);
        const auto loaded = load_squad_json(ev_data);
        EvalOptions opt;
        opt.batch_size = ev_batch;
        opt.max_seq = ev_max_seq;
        opt.max_answer_tokens = ev_max_answer;
        const EvalReport report = evaluate(ckpt.model, ckpt.head, ckpt.vocab, loaded.examples, opt);
        detail::write_json_file(report.to_json(), ev_out);
        std::cout << "eval: " << loaded.examples.size() << " examples (" << loaded.skipped << " skipped on load)\n"
                  << "  F1 " << report.f1 << "  EM " << report.em << "\n"
                  << "wrote " << ev_out << "\n";
    });

    // ---- bench ----
    auto* bn = app.add_subcommand("bench", "measure single-query latency and speedups");
    std::vector<std::string> bn_models;
    std::string bn_reference, bn_out;
    std::size_t bn_seq_len = 384, bn_runs = 10, bn_warmup = 3;
    bn->add_option("--models", bn_models, "checkpoints to benchmark")->required()->delimiter(',');
    bn->add_option("--reference", bn_reference, "reference model name")->required();
    bn->add_option("--seq-len", bn_seq_len, "sequence length");
    bn->add_option("--runs", bn_runs, "timed runs per model");
    bn->add_option("--warmup", bn_warmup, "untimed warmup passes");
    bn->add_option("--out", bn_out, "report JSON path")->required();
    bn->callback([&] {
        std::vector<std::pair<std::string, std::string>> name_and_path;
        for (const auto& path : bn_models) {
            const auto ckpt = load_checkpoint<float>(path);
            name_and_path.emplace_back(ckpt.name.empty() ? detail::file_stem(path) : ckpt.name, path);
        }
        const BenchReport report = speedup_report(name_and_path, bn_reference, bn_seq_len, bn_runs, bn_warmup);
        detail::write_json_file(report.to_json(), bn_out);
        std::cout << report.to_table() << "wrote " << bn_out << "\n";
    });

    std::vector<const char*> argv;
    argv.push_back("tinykd");
    for (const auto& a : args) argv.push_back(a.c_str());
    try {
        app.parse(static_cast<int>(argv.size()), argv.data());
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 0;
}

inline int run(int argc, const char* const* argv) {
    std::vector<std::string> args;
    for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
    return run(args);
}

} // namespace tinykd::cli
