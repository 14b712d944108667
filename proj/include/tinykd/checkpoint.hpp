// SPDX-License-Identifier: Apache-2.0
//
// Checkpoint container: 8-byte magic "DFKD0001", 8-byte little-endian
// manifest length, manifest JSON, then a contiguous blob of little-endian
// 32-bit float tensors in manifest order.
#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "tinykd/data.hpp"
#include "tinykd/distill.hpp"
#include "tinykd/encoder.hpp"
#include "tinykd/qa.hpp"

namespace tinykd {

inline constexpr char kCheckpointMagic[8] = {'D', 'F', 'K', 'D', '0', '0', '0', '1'};
inline constexpr int kCheckpointVersion = 1;

template <class S>
struct CheckpointT {
    EncoderModelT<S> model;
    SpanHeadT<S> head;
    std::optional<DistillPlanT<S>> plan;
    Vocab vocab;
    std::string name;
    nlohmann::json meta;
};

using Checkpoint = CheckpointT<double>;

namespace detail {

template <class S>
std::vector<std::pair<std::string, TensorT<S>>> checkpoint_tensors(const EncoderModelT<S>& model,
                                                                   const SpanHeadT<S>& head,
                                                                   const DistillPlanT<S>* plan) {
    auto named = model.named_parameters();
    for (auto& [n, t] : head.named_parameters()) named.emplace_back(n, t);
    if (plan != nullptr)
        for (auto& [n, t] : plan->named_parameters()) named.emplace_back(n, t);
    return named;
}

template <class S>
nlohmann::ordered_json plan_to_json(const DistillPlanT<S>& plan) {
    return {{"layer_map", plan.layer_map},
            {"w_task", static_cast<double>(plan.w_task)},
            {"w_layer", static_cast<double>(plan.w_layer)},
            {"w_hard", static_cast<double>(plan.w_hard)},
            {"temperature", static_cast<double>(plan.temperature)},
            {"match_probabilities", plan.match_probabilities},
            {"has_projections", plan.has_projections()}};
}

} // namespace detail

template <class S>
void save_checkpoint(const EncoderModelT<S>& model, const SpanHeadT<S>& head, const DistillPlanT<S>* plan,
                     const Vocab& vocab, const nlohmann::ordered_json& meta, const std::string& path,
                     const std::string& name = "") {
    const auto named = detail::checkpoint_tensors(model, head, plan);

    nlohmann::ordered_json manifest;
    manifest["version"] = kCheckpointVersion;
    if (!name.empty()) manifest["name"] = name;
    manifest["model"] = {{"layers", model.config.layers},   {"hidden", model.config.hidden},
                         {"ff", model.config.ff},           {"heads", model.config.heads},
                         {"vocab", model.config.vocab},     {"max_positions", model.config.max_positions}};
    manifest["head"] = {{"hidden", model.config.hidden}, {"outputs", 2}};
    if (plan != nullptr) manifest["plan"] = detail::plan_to_json(*plan);
    nlohmann::ordered_json vocab_tokens = nlohmann::ordered_json::array();
    for (std::size_t i = 4; i < vocab.id_to_token.size(); ++i) vocab_tokens.push_back(vocab.id_to_token[i]);
    manifest["vocab_tokens"] = std::move(vocab_tokens);
    manifest["meta"] = meta;

    std::uint64_t offset = 0;
    nlohmann::ordered_json tensors = nlohmann::ordered_json::array();
    for (const auto& [tname, t] : named) {
        tensors.push_back({{"name", tname}, {"shape", t.shape()}, {"dtype", "f32"}, {"offset", offset}});
        offset += static_cast<std::uint64_t>(t.size()) * 4;
    }
    manifest["tensors"] = std::move(tensors);

    const std::string mbytes = manifest.dump();
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot write checkpoint file " + path);
    f.write(kCheckpointMagic, 8);
    const std::uint64_t mlen = mbytes.size();
    char lenbuf[8];
    for (int i = 0; i < 8; ++i) lenbuf[i] = static_cast<char>((mlen >> (8 * i)) & 0xFF);
    f.write(lenbuf, 8);
    f.write(mbytes.data(), static_cast<std::streamsize>(mbytes.size()));

    std::vector<float> buf;
    for (const auto& [tname, t] : named) {
        buf.resize(t.size());
        for (std::size_t i = 0; i < t.size(); ++i) buf[i] = static_cast<float>(t.value()[i]);
        f.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size() * 4));
    }
    if (!f) throw std::runtime_error("failed writing checkpoint file " + path);
}

template <class S = double>
CheckpointT<S> load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open checkpoint file " + path);
    char magic[8];
    f.read(magic, 8);
    if (f.gcount() != 8 || std::memcmp(magic, kCheckpointMagic, 8) != 0)
        throw std::runtime_error("integrity error: " + path + " is not a checkpoint file (bad magic)");
    char lenbuf[8];
    f.read(lenbuf, 8);
    if (f.gcount() != 8) throw std::runtime_error("integrity error: truncated checkpoint header in " + path);
    std::uint64_t mlen = 0;
    for (int i = 0; i < 8; ++i) mlen |= static_cast<std::uint64_t>(static_cast<unsigned char>(lenbuf[i])) << (8 * i);
    std::string mbytes(mlen, '\0');
    f.read(mbytes.data(), static_cast<std::streamsize>(mlen));
    if (static_cast<std::uint64_t>(f.gcount()) != mlen)
        throw std::runtime_error("integrity error: truncated manifest in " + path);

    nlohmann::json manifest;
    try {
        manifest = nlohmann::json::parse(mbytes);
    } catch (const nlohmann::json::parse_error& e) {
        throw std::runtime_error("integrity error: unparseable manifest in " + path + ": " + e.what());
    }
    if (!manifest.contains("version") || !manifest["version"].is_number_integer())
        throw std::runtime_error("version error: manifest in " + path + " lacks a version");
    if (manifest["version"].get<int>() != kCheckpointVersion)
        throw std::runtime_error("version error: unsupported checkpoint version " +
                                 manifest["version"].dump() + " in " + path);

    const auto& mj = manifest.at("model");
    ModelConfig config{mj.at("layers").get<std::size_t>(), mj.at("hidden").get<std::size_t>(),
                       mj.at("ff").get<std::size_t>(),     mj.at("heads").get<std::size_t>(),
                       mj.at("vocab").get<std::size_t>(),  mj.at("max_positions").get<std::size_t>()};
    config.validate();

    CheckpointT<S> ckpt;
    ckpt.model.config = config;
    if (manifest.contains("name")) ckpt.name = manifest["name"].get<std::string>();
    if (manifest.contains("meta")) ckpt.meta = manifest["meta"];

    ckpt.vocab = Vocab();
    for (const auto& tok : manifest.at("vocab_tokens")) ckpt.vocab.id_to_token.push_back(tok.get<std::string>());
    ckpt.vocab.rebuild_index();

    // read the blob and check its extent against the manifest before
    // touching any tensor
    std::uint64_t expected = 0;
    for (const auto& tj : manifest.at("tensors")) {
        std::uint64_t n = 1;
        for (const auto& d : tj.at("shape")) n *= d.get<std::uint64_t>();
        if (tj.at("offset").get<std::uint64_t>() != expected)
            throw std::runtime_error("integrity error: non-contiguous tensor offsets in " + path);
        if (tj.at("dtype").get<std::string>() != "f32")
            throw std::runtime_error("integrity error: unsupported dtype " + tj.at("dtype").dump() + " in " + path);
        expected += n * 4;
    }
    std::vector<char> blob(expected);
    f.read(blob.data(), static_cast<std::streamsize>(expected));
    if (static_cast<std::uint64_t>(f.gcount()) != expected || f.peek() != std::ifstream::traits_type::eof())
        throw std::runtime_error("integrity error: blob length does not match manifest in " + path);

    std::map<std::string, TensorT<S>> loaded;
    std::size_t ti = 0;
    for (const auto& tj : manifest.at("tensors")) {
        Shape shape;
        for (const auto& d : tj.at("shape")) shape.push_back(d.get<std::size_t>());
        const std::size_t n = numel(shape);
        std::vector<S> vals(n);
        const char* src = blob.data() + tj.at("offset").get<std::uint64_t>();
        for (std::size_t i = 0; i < n; ++i) {
            float v;
            std::memcpy(&v, src + i * 4, 4);
            vals[i] = static_cast<S>(v);
        }
        loaded.emplace(tj.at("name").get<std::string>(), TensorT<S>(std::move(shape), std::move(vals), true));
        ++ti;
    }
    (void)ti;

    // materialize model/head/plan skeletons, then swap in the stored tensors
    ckpt.model = init_model<S>(config, 0);
    ckpt.head = init_span_head<S>(config.hidden, 0);
    if (manifest.contains("plan") && !manifest["plan"].is_null()) {
        const auto& pj = manifest["plan"];
        DistillPlanT<S> plan;
        plan.layer_map = pj.at("layer_map").get<std::vector<int>>();
        plan.w_task = static_cast<S>(pj.at("w_task").get<double>());
        plan.w_layer = static_cast<S>(pj.at("w_layer").get<double>());
        plan.w_hard = static_cast<S>(pj.at("w_hard").get<double>());
        plan.temperature = static_cast<S>(pj.at("temperature").get<double>());
        plan.match_probabilities = pj.at("match_probabilities").get<bool>();
        if (pj.at("has_projections").get<bool>())
            plan.projections.resize(config.layers + 1);  // filled below
        ckpt.plan = std::move(plan);
    }

    auto expect = detail::checkpoint_tensors<S>(ckpt.model, ckpt.head, ckpt.plan ? &*ckpt.plan : nullptr);
    auto assign = [&](const std::string& name, TensorT<S>& dst, bool placeholder_shape_ok) {
        auto it = loaded.find(name);
        if (it == loaded.end())
            throw std::runtime_error("integrity error: tensor '" + name + "' missing from " + path);
        if (!placeholder_shape_ok && it->second.shape() != dst.shape())
            throw std::runtime_error("integrity error: tensor '" + name + "' has shape " +
                                     shape_str(it->second.shape()) + ", expected " + shape_str(dst.shape()));
        dst = it->second;
    };
    for (auto& [name, t] : expect) {
        const bool is_projection = name.rfind("plan.projection.", 0) == 0;
        TensorT<S>* dst = nullptr;
        if (is_projection) {
            const std::size_t idx = std::stoul(name.substr(std::string("plan.projection.").size()));
            dst = &ckpt.plan->projections[idx];
        } else {
            dst = &t;
        }
        assign(name, *dst, is_projection);
    }
    if (loaded.size() != expect.size())
        throw std::runtime_error("integrity error: " + path + " stores " + std::to_string(loaded.size()) +
                                 " tensors, expected " + std::to_string(expect.size()));

    // rebind the swapped handles into the model/head structures
    auto rebind = [&](TensorT<S>& dst, const std::string& name) { dst = loaded.at(name); };
    rebind(ckpt.model.token_embedding, "embeddings.token");
    rebind(ckpt.model.position_embedding, "embeddings.position");
    rebind(ckpt.model.emb_norm_gain, "embeddings.norm.gain");
    rebind(ckpt.model.emb_norm_bias, "embeddings.norm.bias");
    for (std::size_t i = 0; i < ckpt.model.layers.size(); ++i) {
        auto& L = ckpt.model.layers[i];
        const std::string p = "layers." + std::to_string(i) + ".";
        rebind(L.wq, p + "attn.query.weight");
        rebind(L.bq, p + "attn.query.bias");
        rebind(L.wk, p + "attn.key.weight");
        rebind(L.bk, p + "attn.key.bias");
        rebind(L.wv, p + "attn.value.weight");
        rebind(L.bv, p + "attn.value.bias");
        rebind(L.wo, p + "attn.output.weight");
        rebind(L.bo, p + "attn.output.bias");
        rebind(L.norm1_gain, p + "norm1.gain");
        rebind(L.norm1_bias, p + "norm1.bias");
        rebind(L.ffn_inner_w, p + "ffn.inner.weight");
        rebind(L.ffn_inner_b, p + "ffn.inner.bias");
        rebind(L.ffn_outer_w, p + "ffn.outer.weight");
        rebind(L.ffn_outer_b, p + "ffn.outer.bias");
        rebind(L.norm2_gain, p + "norm2.gain");
        rebind(L.norm2_bias, p + "norm2.bias");
    }
    rebind(ckpt.head.weight, "head.weight");
    rebind(ckpt.head.bias, "head.bias");
    return ckpt;
}

} // namespace tinykd
