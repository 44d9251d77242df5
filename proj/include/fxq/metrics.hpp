// SPDX-License-Identifier: Apache-2.0
//
// Cost model of a quantized network.
//
//   memory    = sum over kinds p and layers l of bw(l, p) * n(p_l)
//   mult cost = sum over layers l of (bw(l, W) * n(W_l)) * (bw(l, A) * n(A_l))
//
// n(A_l) counts the activations of a single example at the layer's
// activation site. The multiplication cost is a per-layer product of bit
// totals, not a per-MAC count.

#pragma once

#include "fxq/errors.hpp"
#include "fxq/model.hpp"
#include "fxq/plan.hpp"
#include "fxq/quantizer.hpp"

#include <json.hpp>

#include <cstdint>
#include <limits>
#include <map>
#include <string>
#include <vector>

namespace fxq {

struct MissingPlanEntry : PlanError
{
    MissingPlanEntry(const std::string& layer, ParamKind kind)
        : PlanError("plan has no entry for " + layer + "/" + std::string(to_string(kind)))
    {
    }
};

inline std::uint64_t element_count_of(const ModelGraph& g, const std::string& layer, ParamKind kind)
{
    const auto& l = g.layer(g.index_of(layer));
    switch (kind) {
    case ParamKind::Weights: return g.tensor(l.weights).size();
    case ParamKind::Biases: return g.tensor(l.bias).size();
    case ParamKind::Activations: return g.activation_elements(layer);
    }
    return 0;
}

namespace detail {

inline FixedPointRepr required(const QuantizationPlan& plan, const std::string& layer, ParamKind kind)
{
    auto r = plan.get(layer, kind);
    if (!r)
        throw MissingPlanEntry(layer, kind);
    return *r;
}

inline std::uint64_t checked_mul(std::uint64_t a, std::uint64_t b)
{
    if (a != 0 && b > std::numeric_limits<std::uint64_t>::max() / a)
        throw Error("cost overflows 64 bits");
    return a * b;
}

} // namespace detail

inline std::uint64_t memory_bits(const ModelGraph& g, const QuantizationPlan& plan, ParamKind kind)
{
    std::uint64_t total = 0;
    for (const auto& layer : g.quantizable())
        total += detail::checked_mul(static_cast<std::uint64_t>(detail::required(plan, layer, kind).bw),
                                     element_count_of(g, layer, kind));
    return total;
}

inline std::uint64_t memory_bits(const ModelGraph& g, const QuantizationPlan& plan)
{
    std::uint64_t total = 0;
    for (ParamKind k : kAllParamKinds)
        total += memory_bits(g, plan, k);
    return total;
}

inline std::uint64_t mult_cost(const ModelGraph& g, const QuantizationPlan& plan)
{
    std::uint64_t total = 0;
    for (const auto& layer : g.quantizable()) {
        const auto w = detail::checked_mul(detail::required(plan, layer, ParamKind::Weights).bw,
                                           element_count_of(g, layer, ParamKind::Weights));
        const auto a = detail::checked_mul(detail::required(plan, layer, ParamKind::Activations).bw,
                                           element_count_of(g, layer, ParamKind::Activations));
        total += detail::checked_mul(w, a);
    }
    return total;
}

struct PlanCosts
{
    std::uint64_t memory_bits = 0;
    std::map<ParamKind, std::uint64_t> memory_by_kind;
    std::uint64_t mult_cost = 0;
    double delta_a = 0.0;
    double accuracy = 0.0;
};

struct CostReport
{
    PlanCosts plan;
    PlanCosts reference;
    double memory_ratio = 1.0; // plan / reference
    double mult_ratio = 1.0;
    std::map<ParamKind, double> memory_ratio_by_kind;
};

inline PlanCosts plan_costs(Session& session, const QuantizationPlan& plan)
{
    const ModelGraph& g = session.model();
    PlanCosts c;
    for (ParamKind k : kAllParamKinds)
        c.memory_by_kind[k] = memory_bits(g, plan, k);
    c.memory_bits = memory_bits(g, plan);
    c.mult_cost = mult_cost(g, plan);
    c.accuracy = session.accuracy(plan);
    c.delta_a = session.network_acc_loss(plan);
    return c;
}

namespace detail {

inline double ratio(std::uint64_t a, std::uint64_t b)
{
    return b == 0 ? (a == 0 ? 1.0 : std::numeric_limits<double>::infinity())
                  : static_cast<double>(a) / static_cast<double>(b);
}

} // namespace detail

inline CostReport build_report(Session& session, const QuantizationPlan& plan, const QuantizationPlan& reference)
{
    CostReport r;
    r.plan = plan_costs(session, plan);
    r.reference = plan == reference ? r.plan : plan_costs(session, reference);
    r.memory_ratio = detail::ratio(r.plan.memory_bits, r.reference.memory_bits);
    r.mult_ratio = detail::ratio(r.plan.mult_cost, r.reference.mult_cost);
    for (ParamKind k : kAllParamKinds)
        r.memory_ratio_by_kind[k] = detail::ratio(r.plan.memory_by_kind[k], r.reference.memory_by_kind[k]);
    return r;
}

inline CostReport build_report(const ModelGraph& g, const LabeledDataset& ds, const QuantizationPlan& plan,
                               const QuantizationPlan& reference, ForwardOptions opt = {})
{
    Session s(g, ds, opt);
    return build_report(s, plan, reference);
}

inline nlohmann::json to_json(const PlanCosts& c)
{
    nlohmann::json by_kind = nlohmann::json::object();
    for (const auto& [k, v] : c.memory_by_kind)
        by_kind[std::string(to_string(k))] = v;
    return {{"memory_bits", c.memory_bits}, {"memory_bits_by_kind", by_kind}, {"mult_cost", c.mult_cost},
            {"accuracy", c.accuracy},       {"delta_a", c.delta_a}};
}

inline nlohmann::json to_json(const CostReport& r)
{
    nlohmann::json by_kind = nlohmann::json::object();
    for (const auto& [k, v] : r.memory_ratio_by_kind)
        by_kind[std::string(to_string(k))] = v;
    return {{"plan", to_json(r.plan)},
            {"reference", to_json(r.reference)},
            {"memory_ratio", r.memory_ratio},
            {"mult_ratio", r.mult_ratio},
            {"memory_ratio_by_kind", by_kind},
            {"memory_reduction", 1.0 - r.memory_ratio},
            {"mult_reduction", 1.0 - r.mult_ratio}};
}

/// One row per quantizable layer: bitwidths and fractional offsets per kind.
inline std::string bitwidth_table_csv(const ModelGraph& g, const QuantizationPlan& plan)
{
    std::string out = "layer,index,w_bw,w_f,b_bw,b_f,a_bw,a_f\n";
    std::size_t idx = 1;
    for (const auto& layer : g.quantizable()) {
        out += layer + "," + std::to_string(idx++);
        for (ParamKind k : kAllParamKinds) {
            if (auto r = plan.get(layer, k))
                out += "," + std::to_string(r->bw) + "," + std::to_string(r->f);
            else
                out += ",,";
        }
        out += "\n";
    }
    return out;
}

} // namespace fxq
