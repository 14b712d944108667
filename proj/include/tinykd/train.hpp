// SPDX-License-Identifier: Apache-2.0
//
// Optimization loops: teacher fine-tuning on the hard task loss and student
// distillation on the combined objective, with global-norm clipping and Adam.
#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "tinykd/data.hpp"
#include "tinykd/distill.hpp"
#include "tinykd/encoder.hpp"
#include "tinykd/qa.hpp"
#include "tinykd/tensor.hpp"

namespace tinykd {

struct TrainConfig {
    double learning_rate = 3e-5;
    std::size_t batch_size = 32;
    std::size_t max_seq = 384;
    std::size_t epochs = 20;
    double max_grad_norm = 1.0;
    std::uint64_t seed = 0;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;

    void validate() const {
        // learning_rate 0 is allowed as an explicit no-op trainer
        if (learning_rate < 0 || batch_size == 0 || max_seq == 0 || epochs == 0 || max_grad_norm <= 0)
            throw std::invalid_argument("train config: all fields must be positive");
    }

    static TrainConfig from_json(const nlohmann::json& j) {
        TrainConfig c;
        if (j.contains("learning_rate")) c.learning_rate = j["learning_rate"].get<double>();
        if (j.contains("batch_size")) c.batch_size = j["batch_size"].get<std::size_t>();
        if (j.contains("max_seq")) c.max_seq = j["max_seq"].get<std::size_t>();
        if (j.contains("epochs")) c.epochs = j["epochs"].get<std::size_t>();
        if (j.contains("max_grad_norm")) c.max_grad_norm = j["max_grad_norm"].get<double>();
        if (j.contains("seed")) c.seed = j["seed"].get<std::uint64_t>();
        c.validate();
        return c;
    }

    nlohmann::ordered_json to_json() const {
        return {{"learning_rate", learning_rate}, {"batch_size", batch_size}, {"max_seq", max_seq},
                {"epochs", epochs},               {"max_grad_norm", max_grad_norm}, {"seed", seed}};
    }
};

// Global L2 norm over all gradients; scales every gradient by max_norm/norm
// when the norm exceeds max_norm. Returns the applied scale.
inline double clip_grad_norm(const std::vector<Tensor>& params, double max_norm) {
    double sq = 0.0;
    for (const auto& p : params) {
        if (!p.has_grad()) continue;
        for (double g : p.grad()) sq += g * g;
    }
    const double norm = std::sqrt(sq);
    if (norm <= max_norm || norm == 0.0) return 1.0;
    const double scale = max_norm / norm;
    for (const auto& p : params) {
        if (!p.has_grad()) continue;
        Tensor& mp = const_cast<Tensor&>(p);
        for (auto& g : mp.mutable_grad()) g *= scale;
    }
    return scale;
}

// Adam with bias correction. Parameters without a populated gradient are
// skipped for the step (their state does not advance either).
class Adam {
public:
    Adam(std::vector<Tensor> params, double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
        : params_(std::move(params)), lr_(lr), b1_(beta1), b2_(beta2), eps_(eps) {
        m_.resize(params_.size());
        v_.resize(params_.size());
        steps_.assign(params_.size(), 0);
        for (std::size_t i = 0; i < params_.size(); ++i) {
            m_[i].assign(params_[i].size(), 0.0);
            v_[i].assign(params_[i].size(), 0.0);
        }
    }

    void step() {
        for (std::size_t i = 0; i < params_.size(); ++i) {
            if (!params_[i].has_grad()) continue;
            steps_[i] += 1;
            const double bc1 = 1.0 - std::pow(b1_, static_cast<double>(steps_[i]));
            const double bc2 = 1.0 - std::pow(b2_, static_cast<double>(steps_[i]));
            const auto& g = params_[i].grad();
            auto& p = params_[i].mutable_value();
            for (std::size_t j = 0; j < p.size(); ++j) {
                m_[i][j] = b1_ * m_[i][j] + (1.0 - b1_) * g[j];
                v_[i][j] = b2_ * v_[i][j] + (1.0 - b2_) * g[j] * g[j];
                const double mhat = m_[i][j] / bc1;
                const double vhat = v_[i][j] / bc2;
                p[j] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
            }
        }
    }

    void zero_grad() {
        for (auto& p : params_) p.zero_grad();
    }

private:
    std::vector<Tensor> params_;
    std::vector<std::vector<double>> m_, v_;
    std::vector<long> steps_;
    double lr_, b1_, b2_, eps_;
};

struct EpochLog {
    std::size_t epoch = 0;
    double mean_loss = 0.0;
};

namespace detail {

inline void require_training_golds(const std::vector<EncodedExample>& dataset) {
    if (dataset.empty()) throw std::runtime_error("training error: empty dataset");
    for (const auto& enc : dataset)
        if (enc.gold_start < 0 || enc.gold_end < 0)
            throw std::runtime_error("training error: example " + enc.id + " has no gold span");
}

} // namespace detail

// Fine-tunes model + head on the hard span loss. Seeded shuffling each epoch,
// clip then Adam step. Returns per-epoch mean loss.
inline std::vector<EpochLog> train_teacher(EncoderModel& model, SpanHead& head,
                                           const std::vector<EncodedExample>& dataset, const TrainConfig& cfg) {
    cfg.validate();
    detail::require_training_golds(dataset);
    std::vector<Tensor> params = model.parameters();
    for (auto& t : head.parameters()) params.push_back(t);
    for (auto& p : params) p.set_requires_grad(true);

    Adam adam(params, cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
    Rng rng(cfg.seed);
    std::vector<EpochLog> logs;
    auto order = identity_order(dataset.size());
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        rng.shuffle(order);
        double loss_sum = 0.0;
        for (const auto& batch : make_batches(dataset, cfg.batch_size, order)) {
            Tape tape;
            const auto trace = forward(model, batch.token_ids, batch.mask);
            const auto [start, end] = span_logits(trace.hidden_states.back(), head, batch.mask);
            Tensor loss = task_loss_hard(start, end, batch.gold_start, batch.gold_end);
            loss_sum += loss.item() * static_cast<double>(batch.indices.size());
            backward(loss);
            clip_grad_norm(params, cfg.max_grad_norm);
            adam.step();
            adam.zero_grad();
        }
        logs.push_back({epoch + 1, loss_sum / static_cast<double>(dataset.size())});
    }
    return logs;
}

struct DistillEpochLog {
    std::size_t epoch = 0;
    double total = 0.0;
    double task = 0.0;
    double layer = 0.0;
    double hard = 0.0;
};

struct DistillResult {
    EncoderModel student;
    SpanHead head;
    DistillPlan plan;
    std::vector<DistillEpochLog> logs;
};

// Distills a fresh student from a fine-tuned teacher. Per batch the teacher
// runs outside any tape (its outputs are detached constants), then the
// student forward, the combined loss, backward into student + projections,
// clip, Adam step. Teacher parameters are never touched.
inline DistillResult distill_student(const EncoderModel& teacher, const SpanHead& teacher_head,
                                     const ModelConfig& student_config,
                                     const std::vector<EncodedExample>& dataset, const std::vector<int>& layer_map,
                                     const DistillOptions& opt, const TrainConfig& cfg) {
    cfg.validate();
    if (dataset.empty()) throw std::runtime_error("training error: empty dataset");
    if (opt.w_hard > 0.0) detail::require_training_golds(dataset);

    DistillResult result;
    result.student = init_model(student_config, cfg.seed);
    result.head = init_span_head(student_config.hidden, cfg.seed + 1);
    result.plan = make_distill_plan(student_config, teacher.config, layer_map, opt, cfg.seed + 2);

    std::vector<Tensor> params = result.student.parameters();
    for (auto& t : result.head.parameters()) params.push_back(t);
    for (auto& t : result.plan.projections) params.push_back(t);
    for (auto& p : params) p.set_requires_grad(true);

    Adam adam(params, cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
    Rng rng(cfg.seed);
    auto order = identity_order(dataset.size());
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        rng.shuffle(order);
        DistillEpochLog log{epoch + 1, 0.0, 0.0, 0.0, 0.0};
        for (const auto& batch : make_batches(dataset, cfg.batch_size, order)) {
            // teacher pass first, outside the tape, so nothing records into it
            const auto t_trace = forward(teacher, batch.token_ids, batch.mask);
            const auto [t_start, t_end] = span_logits(t_trace.hidden_states.back(), teacher_head, batch.mask);

            Tape tape;
            const auto s_trace = forward(result.student, batch.token_ids, batch.mask);
            const auto [s_start, s_end] = span_logits(s_trace.hidden_states.back(), result.head, batch.mask);
            auto [loss, terms] = total_distill_loss(s_trace, t_trace, s_start, s_end, t_start, t_end, result.plan);
            double hard_value = 0.0;
            if (result.plan.w_hard > 0.0) {
                Tensor hard = task_loss_hard(s_start, s_end, batch.gold_start, batch.gold_end);
                hard_value = hard.item();
                loss = add(loss, scale(hard, result.plan.w_hard));
            }
            const double rows = static_cast<double>(batch.indices.size());
            log.total += (terms.total + result.plan.w_hard * hard_value) * rows;
            log.task += terms.task * rows;
            log.layer += terms.layer_sum * rows;
            log.hard += hard_value * rows;
            backward(loss);
            clip_grad_norm(params, cfg.max_grad_norm);
            adam.step();
            adam.zero_grad();
        }
        const double n = static_cast<double>(dataset.size());
        log.total /= n;
        log.task /= n;
        log.layer /= n;
        log.hard /= n;
        result.logs.push_back(log);
    }
    return result;
}

} // namespace tinykd
