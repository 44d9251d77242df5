// SPDX-License-Identifier: Apache-2.0
//
// Post-training quantization pipeline: relative accuracy loss of a
// quantized network against the full-precision reference,
//
//     delta_a = (a0 - a_q) / a0,
//
// with a0 measured once per Session. Losses may be negative.

#pragma once

#include "fxq/errors.hpp"
#include "fxq/fixed_point.hpp"
#include "fxq/inference.hpp"
#include "fxq/io.hpp"
#include "fxq/model.hpp"
#include "fxq/plan.hpp"

#include <json.hpp>

#include <cstddef>
#include <optional>
#include <string>

namespace fxq {

enum class EvalMode { Independent, Dependent };

inline std::string_view to_string(EvalMode m) { return m == EvalMode::Independent ? "independent" : "dependent"; }

struct AccuracyLossRecord
{
    std::string layer;
    ParamKind kind = ParamKind::Weights;
    FixedPointRepr repr;
    double delta_a = 0.0;
    EvalMode mode = EvalMode::Independent;

    friend bool operator==(const AccuracyLossRecord&, const AccuracyLossRecord&) = default;
};

inline nlohmann::json to_json(const AccuracyLossRecord& r)
{
    return {{"layer", r.layer}, {"kind", to_string(r.kind)}, {"bw", r.repr.bw},
            {"f", r.repr.f},    {"delta_a", r.delta_a},       {"mode", to_string(r.mode)}};
}

/// Model with the plan baked in: quantized weight and bias tensors, armed
/// activation hooks. The input model is left untouched.
inline ModelGraph apply_plan(const ModelGraph& g, const QuantizationPlan& plan)
{
    validate_plan(g, plan);
    std::map<std::string, Tensor> replaced;
    for (const auto& [key, r] : plan.entries()) {
        const auto& l = g.layer(g.index_of(key.layer));
        if (key.kind == ParamKind::Activations)
            continue;
        const std::string& name = key.kind == ParamKind::Weights ? l.weights : l.bias;
        const Tensor& t = g.tensor(name);
        replaced.emplace(name, Tensor(t.shape(), quantize_tensor(t.data(), r)));
    }
    ModelGraph out = g.with_tensors(std::move(replaced));
    for (const auto& [key, r] : plan.entries())
        if (key.kind == ParamKind::Activations)
            out.arm_activation(g.index_of(key.layer), r);
    return out;
}

/// Evaluation context bound to one model and one dataset.
///
/// Evaluations that only differ in a single target (layer, kind) share the
/// network prefix in front of the target layer; that prefix is computed once
/// and reused while the rest of the plan stays the same.
class Session
{
public:
    Session(const ModelGraph& g, const LabeledDataset& ds, ForwardOptions opt = {})
        : g_(g), ds_(ds), opt_(opt)
    {
        if (ds.size() == 0)
            throw ContractViolation("session: empty dataset");
        if (ds.images.rank() < 1 || ds.images.dim(0) != ds.labels.size())
            throw ContractViolation("session: image and label counts differ");
        correct0_ = correct_with(nullptr);
    }

    const ModelGraph& model() const noexcept { return g_; }
    const LabeledDataset& dataset() const noexcept { return ds_; }

    double a0() const noexcept { return static_cast<double>(correct0_) / static_cast<double>(ds_.size()); }
    std::size_t inference_runs() const noexcept { return runs_; }

    double accuracy(const QuantizationPlan& plan)
    {
        return static_cast<double>(correct_with(&plan)) / static_cast<double>(ds_.size());
    }

    double network_acc_loss(const QuantizationPlan& plan) { return loss_from(correct_with(&plan)); }

    /// Loss of quantizing `target` to `repr`. Independent mode evaluates the
    /// target alone; dependent mode applies `plan` first, the target on top.
    AccuracyLossRecord eval_acc_loss(const PlanKey& target, FixedPointRepr repr, EvalMode mode,
                                     const QuantizationPlan& plan)
    {
        if (!g_.has_layer(target.layer) || !is_quantizable(g_.layer(g_.index_of(target.layer)).kind))
            throw PlanError("target '" + target.layer + "' is not a quantizable layer");
        require_valid(repr);

        QuantizationPlan base = mode == EvalMode::Dependent ? plan : QuantizationPlan{};
        base.erase(target);
        QuantizationPlan effective = base;
        effective.set(target, repr);

        const std::size_t boundary = g_.index_of(target.layer);
        detail::Executor ex(g_, &effective, opt_.threads);
        if (!prefix_ || prefix_->boundary != boundary || prefix_->base != base) {
            auto env = ex.start(ds_.images);
            ex.run(env, 1, boundary);
            prefix_ = Prefix{boundary, std::move(base), std::move(env)};
        }
        detail::Env env = prefix_->env;
        ex.run(env, boundary, g_.size());
        ++runs_;
        const std::size_t correct = count_correct(*env.back(), ds_.labels);
        return {target.layer, target.kind, repr, loss_from(correct), mode};
    }

    void clear_cache() { prefix_.reset(); }

private:
    std::size_t correct_with(const QuantizationPlan* plan)
    {
        const Tensor scores = forward(g_, ds_.images, plan, opt_);
        ++runs_;
        return count_correct(scores, ds_.labels);
    }

    double loss_from(std::size_t correct) const
    {
        if (correct0_ == 0)
            throw ContractViolation("accuracy loss undefined: full-precision accuracy is zero");
        return (static_cast<double>(correct0_) - static_cast<double>(correct)) / static_cast<double>(correct0_);
    }

    struct Prefix
    {
        std::size_t boundary;
        QuantizationPlan base;
        detail::Env env;
    };

    const ModelGraph& g_;
    const LabeledDataset& ds_;
    ForwardOptions opt_;
    std::size_t correct0_ = 0;
    std::size_t runs_ = 0;
    std::optional<Prefix> prefix_;
};

inline AccuracyLossRecord eval_acc_loss(const ModelGraph& g, const LabeledDataset& ds, const PlanKey& target,
                                        FixedPointRepr repr, bool independent, const QuantizationPlan& plan,
                                        ForwardOptions opt = {})
{
    Session s(g, ds, opt);
    return s.eval_acc_loss(target, repr, independent ? EvalMode::Independent : EvalMode::Dependent, plan);
}

inline double network_acc_loss(const ModelGraph& g, const LabeledDataset& ds, const QuantizationPlan& plan,
                               ForwardOptions opt = {})
{
    Session s(g, ds, opt);
    return s.network_acc_loss(plan);
}

} // namespace fxq
