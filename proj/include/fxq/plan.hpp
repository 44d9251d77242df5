// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "fxq/errors.hpp"
#include "fxq/fixed_point.hpp"

#include <json.hpp>

#include <array>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <utility>

namespace fxq {

enum class ParamKind { Weights, Biases, Activations };

inline constexpr std::array<ParamKind, 3> kAllParamKinds{ParamKind::Weights, ParamKind::Biases,
                                                         ParamKind::Activations};

inline std::string_view to_string(ParamKind k)
{
    switch (k) {
    case ParamKind::Weights: return "weights";
    case ParamKind::Biases: return "biases";
    case ParamKind::Activations: return "activations";
    }
    return "?";
}

inline ParamKind parse_param_kind(std::string_view s)
{
    if (s == "weights" || s == "W" || s == "w")
        return ParamKind::Weights;
    if (s == "biases" || s == "B" || s == "b")
        return ParamKind::Biases;
    if (s == "activations" || s == "A" || s == "a")
        return ParamKind::Activations;
    throw PlanError("unknown parameter kind '" + std::string(s) + "'");
}

struct PlanKey
{
    std::string layer;
    ParamKind kind = ParamKind::Weights;

    friend auto operator<=>(const PlanKey&, const PlanKey&) = default;
};

/// Chosen fixed-point representation per (layer, parameter kind).
class QuantizationPlan
{
public:
    using Map = std::map<PlanKey, FixedPointRepr>;

    void set(const PlanKey& key, FixedPointRepr r)
    {
        require_valid(r);
        entries_[key] = r;
    }
    void set(std::string layer, ParamKind kind, FixedPointRepr r) { set(PlanKey{std::move(layer), kind}, r); }
    void erase(const PlanKey& key) { entries_.erase(key); }

    std::optional<FixedPointRepr> get(const PlanKey& key) const
    {
        auto it = entries_.find(key);
        if (it == entries_.end())
            return std::nullopt;
        return it->second;
    }
    std::optional<FixedPointRepr> get(const std::string& layer, ParamKind kind) const { return get({layer, kind}); }

    bool empty() const noexcept { return entries_.empty(); }
    std::size_t size() const noexcept { return entries_.size(); }
    const Map& entries() const noexcept { return entries_; }

    friend bool operator==(const QuantizationPlan&, const QuantizationPlan&) = default;

private:
    Map entries_;
};

inline nlohmann::json plan_to_json(const QuantizationPlan& plan)
{
    auto arr = nlohmann::json::array();
    for (const auto& [key, r] : plan.entries())
        arr.push_back({{"layer", key.layer}, {"kind", to_string(key.kind)}, {"bw", r.bw}, {"f", r.f}});
    return arr;
}

inline QuantizationPlan plan_from_json(const nlohmann::json& j)
{
    if (!j.is_array())
        throw PlanError("plan: expected a JSON array");
    QuantizationPlan plan;
    for (const auto& e : j) {
        if (!e.is_object() || !e.contains("layer") || !e.contains("kind") || !e.contains("bw") || !e.contains("f"))
            throw PlanError("plan: entry needs layer, kind, bw, f");
        if (!e["bw"].is_number_integer() || !e["f"].is_number_integer() || !e["layer"].is_string() ||
            !e["kind"].is_string())
            throw PlanError("plan: malformed entry " + e.dump());
        PlanKey key{e["layer"].get<std::string>(), parse_param_kind(e["kind"].get<std::string>())};
        if (plan.get(key))
            throw PlanError("plan: duplicate entry for " + key.layer + "/" + std::string(to_string(key.kind)));
        FixedPointRepr r{e["bw"].get<int>(), e["f"].get<int>()};
        if (!r.valid())
            throw PlanError("plan: invalid bitwidth in " + e.dump());
        plan.set(key, r);
    }
    return plan;
}

} // namespace fxq
