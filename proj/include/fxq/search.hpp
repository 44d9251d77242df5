// SPDX-License-Identifier: Apache-2.0
//
// Greedy per-layer search for small fixed-point representations under an
// accuracy-loss budget, plus the budget allocation schemes, the exhaustive
// (bw, f) grid and the uniform-bitwidth baseline.
//
// For each parameter kind and each layer the search
//   1. starts from (bw0, F0), F0 being the clip-free offset of the tensor,
//   2. walks the diagonal (bw - 1, f - 1) while the loss stays in budget,
//   3. drops bw alone at fixed f while the loss stays in budget,
//   4. probes the 3x3 neighbourhood of that point for the lowest loss,
//   5. picks between the diagonal and neighbourhood results.
// In dependent mode each accepted representation stays applied for every
// later evaluation.

#pragma once

#include "fxq/errors.hpp"
#include "fxq/fixed_point.hpp"
#include "fxq/inference.hpp"
#include "fxq/plan.hpp"
#include "fxq/quantizer.hpp"

#include <json.hpp>

#include <algorithm>
#include <array>
#include <cstdio>
#include <cmath>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace fxq {

enum class AllocationScheme { Constant, Log, Linear, Quadratic, Exponential };

inline constexpr std::array<AllocationScheme, 5> kAllSchemes{AllocationScheme::Constant, AllocationScheme::Log,
                                                             AllocationScheme::Linear, AllocationScheme::Quadratic,
                                                             AllocationScheme::Exponential};

inline std::string_view to_string(AllocationScheme s)
{
    switch (s) {
    case AllocationScheme::Constant: return "constant";
    case AllocationScheme::Log: return "log";
    case AllocationScheme::Linear: return "linear";
    case AllocationScheme::Quadratic: return "quadratic";
    case AllocationScheme::Exponential: return "exponential";
    }
    return "?";
}

inline std::optional<AllocationScheme> parse_scheme(std::string_view s)
{
    for (auto k : kAllSchemes)
        if (to_string(k) == s)
            return k;
    return std::nullopt;
}

// Shape function of a scheme. Log uses ln(x + 1) so that step 1 gets a share.
inline double allocation_weight(AllocationScheme s, double x)
{
    switch (s) {
    case AllocationScheme::Constant: return 1.0;
    case AllocationScheme::Log: return std::log(x + 1.0);
    case AllocationScheme::Linear: return x;
    case AllocationScheme::Quadratic: return x * x;
    case AllocationScheme::Exponential: return std::exp2(x);
    }
    return 1.0;
}

/// eps_l = terminal * f(l) / f(L) for l = 1..L (index l - 1 of the result).
inline std::vector<double> allocate_budget(AllocationScheme scheme, double terminal_eps, std::size_t L)
{
    if (L == 0)
        throw ContractViolation("allocate_budget: L must be >= 1");
    if (!(terminal_eps >= 0.0))
        throw ContractViolation("allocate_budget: terminal budget must be >= 0");
    std::vector<double> eps(L);
    const double last = allocation_weight(scheme, static_cast<double>(L));
    for (std::size_t l = 1; l <= L; ++l)
        eps[l - 1] = terminal_eps * (allocation_weight(scheme, static_cast<double>(l)) / last);
    eps[L - 1] = terminal_eps;
    return eps;
}

/// Acceptable loss per parameter kind and per search position 1..L.
struct LossBudget
{
    std::map<ParamKind, std::vector<double>> eps;

    double at(ParamKind k, std::size_t position) const
    {
        auto it = eps.find(k);
        if (it == eps.end() || position == 0 || position > it->second.size())
            throw ContractViolation("loss budget has no entry for " + std::string(to_string(k)) + " at step " +
                                    std::to_string(position));
        return it->second[position - 1];
    }
};

enum class LayerOrder { Forward, Reverse };

struct SearchConfig
{
    int bw0 = 12;
    EvalMode mode = EvalMode::Dependent;
    std::map<ParamKind, AllocationScheme> scheme{{ParamKind::Weights, AllocationScheme::Linear},
                                                 {ParamKind::Biases, AllocationScheme::Linear},
                                                 {ParamKind::Activations, AllocationScheme::Linear}};
    std::map<ParamKind, double> terminal_eps{
        {ParamKind::Weights, 0.005}, {ParamKind::Biases, 0.005}, {ParamKind::Activations, 0.005}};
    double delta = 0.001;
    std::vector<ParamKind> param_order{ParamKind::Weights, ParamKind::Biases, ParamKind::Activations};
    LayerOrder layer_order = LayerOrder::Forward;
    // Replaces scheme/terminal_eps when set.
    std::optional<LossBudget> budget;

    // Budgets are indexed by search position, which is the layer index for
    // the forward order.
    LossBudget resolve_budget(std::size_t L) const
    {
        if (budget)
            return *budget;
        LossBudget b;
        for (ParamKind k : param_order)
            b.eps[k] = allocate_budget(scheme.at(k), terminal_eps.at(k), L);
        return b;
    }

    void validate() const
    {
        if (bw0 < 2 || bw0 > kMaxBitwidth)
            throw ContractViolation("search: bw0 must be in [2, 53]");
        if (!(delta >= 0.0))
            throw ContractViolation("search: delta must be >= 0");
        for (const auto& [k, e] : terminal_eps)
            if (!(e >= 0.0))
                throw ContractViolation("search: budgets must be >= 0");
        std::vector<ParamKind> kinds = param_order;
        std::sort(kinds.begin(), kinds.end());
        if (kinds.empty() || std::adjacent_find(kinds.begin(), kinds.end()) != kinds.end())
            throw ContractViolation("search: parameter order must list distinct kinds");
    }
};

/// Outcome of one (layer, kind) step.
struct SearchStep
{
    std::string layer;
    ParamKind kind = ParamKind::Weights;
    std::size_t position = 0; // 1-based within the layer order
    double epsilon = 0.0;
    FixedPointRepr start;     // (bw0, F0)
    FixedPointRepr diagonal;  // end of the joint (bw, f) walk
    FixedPointRepr reduced;   // after bitwidth-only reduction
    FixedPointRepr local;     // best of the 3x3 neighbourhood
    FixedPointRepr chosen;
    double delta_reduced = 0.0;
    double delta_local = 0.0;
    double delta_chosen = 0.0;
    std::size_t evaluations = 0;
};

struct SearchReport
{
    QuantizationPlan plan;
    std::vector<AccuracyLossRecord> trace; // every evaluation requested, in order
    std::vector<SearchStep> steps;
    LossBudget budget;
    std::string status = "success";
    double a0 = 0.0;
};

struct SearchError : Error
{
    SearchError(const std::string& what, std::string layer_, ParamKind kind_, double delta_a_, SearchReport partial_)
        : Error(what), layer(std::move(layer_)), kind(kind_), delta_a(delta_a_), partial(std::move(partial_))
    {
    }
    std::string layer;
    ParamKind kind;
    double delta_a;
    SearchReport partial;
};

// The start point already exceeds its budget: a larger bw0 or budget is needed.
struct BudgetInfeasible : SearchError
{
    using SearchError::SearchError;
};

// No representation in the neighbourhood meets the budget.
struct EarlyExhaustion : SearchError
{
    using SearchError::SearchError;
};

namespace detail {

struct StepResult
{
    FixedPointRepr start, diagonal, reduced, local, chosen;
    double delta_start = 0, delta_reduced = 0, delta_local = 0, delta_chosen = 0;
    bool infeasible = false;
    bool exhausted = false;
};

// One (layer, kind) step of the search against an arbitrary loss oracle.
inline StepResult search_step(const std::function<double(FixedPointRepr)>& loss, int bw0, int f0, double eps,
                              double delta)
{
    StepResult s;
    s.start = {bw0, f0};
    s.delta_start = loss(s.start);
    if (s.delta_start > eps) {
        s.infeasible = true;
        return s;
    }

    FixedPointRepr cur = s.start;
    while (cur.bw > kMinBitwidth) {
        const FixedPointRepr next{cur.bw - 1, cur.f - 1};
        if (loss(next) > eps)
            break;
        cur = next;
    }
    s.diagonal = cur;

    while (cur.bw > kMinBitwidth) {
        const FixedPointRepr next{cur.bw - 1, cur.f};
        if (loss(next) > eps)
            break;
        cur = next;
    }
    s.reduced = cur;
    s.delta_reduced = loss(s.reduced);

    std::optional<FixedPointRepr> best;
    double best_loss = 0.0;
    for (int dbw = -1; dbw <= 1; ++dbw)
        for (int df = -1; df <= 1; ++df) {
            const FixedPointRepr r{s.reduced.bw + dbw, s.reduced.f + df};
            if (!r.valid())
                continue;
            const double d = loss(r);
            if (d > eps)
                continue;
            // lowest loss, then lowest bw, then lowest f
            if (!best || d < best_loss || (d == best_loss && r < *best)) {
                best = r;
                best_loss = d;
            }
        }
    if (!best) {
        s.exhausted = true;
        return s;
    }
    s.local = *best;
    s.delta_local = loss(s.local);

    if (s.local.bw != s.reduced.bw && s.local.f != s.reduced.f) {
        // The neighbourhood minimum never loses more than the diagonal result,
        // so a gap above delta always favours it.
        if (s.delta_reduced - s.delta_local > delta)
            s.chosen = s.local;
        else
            s.chosen = s.local.bw < s.reduced.bw ? s.local : s.reduced;
    } else {
        s.chosen = s.local;
    }
    s.delta_chosen = s.chosen == s.local ? s.delta_local : s.delta_reduced;
    return s;
}

inline double reference_max_abs(const ModelGraph& g, const ActivationProfile& profile, const std::string& layer,
                                ParamKind kind)
{
    const auto& l = g.layer(g.index_of(layer));
    switch (kind) {
    case ParamKind::Weights: return max_abs(g.tensor(l.weights).data());
    case ParamKind::Biases: return max_abs(g.tensor(l.bias).data());
    case ParamKind::Activations: return profile.at(layer);
    }
    return 0.0;
}

inline std::vector<std::string> layer_sequence(const ModelGraph& g, LayerOrder order)
{
    std::vector<std::string> seq = g.quantizable();
    if (order == LayerOrder::Reverse)
        std::reverse(seq.begin(), seq.end());
    return seq;
}

} // namespace detail

/// Runs the search over every (kind, layer) in the configured orders.
/// Throws BudgetInfeasible / EarlyExhaustion with the partial report.
inline SearchReport opt_search(Session& session, const ActivationProfile& profile, const SearchConfig& config)
{
    config.validate();
    const ModelGraph& g = session.model();
    const auto layers = detail::layer_sequence(g, config.layer_order);

    SearchReport report;
    report.a0 = session.a0();
    report.budget = config.resolve_budget(layers.size());

    for (ParamKind kind : config.param_order) {
        for (std::size_t pos = 1; pos <= layers.size(); ++pos) {
            const std::string& layer = layers[pos - 1];
            const PlanKey key{layer, kind};
            const double eps = report.budget.at(kind, pos);
            const int f0 = no_clip_offset(config.bw0, detail::reference_max_abs(g, profile, layer, kind));

            // The plan state is fixed during a step, so results memoize by repr.
            std::map<FixedPointRepr, double> memo;
            std::size_t evaluations = 0;
            auto loss = [&](FixedPointRepr r) {
                auto it = memo.find(r);
                if (it == memo.end()) {
                    const auto rec = session.eval_acc_loss(key, r, config.mode, report.plan);
                    it = memo.emplace(r, rec.delta_a).first;
                    ++evaluations;
                }
                report.trace.push_back({layer, kind, r, it->second, config.mode});
                return it->second;
            };

            const auto s = detail::search_step(loss, config.bw0, f0, eps, config.delta);
            if (s.infeasible) {
                report.status = "budget-infeasible";
                throw BudgetInfeasible("loss " + std::to_string(s.delta_start) + " at " + s.start.str() + " for " +
                                           layer + "/" + std::string(to_string(kind)) + " exceeds budget " +
                                           std::to_string(eps) + "; use a larger bw0 or budget",
                                       layer, kind, s.delta_start, report);
            }
            if (s.exhausted) {
                report.status = "early-exhaustion";
                throw EarlyExhaustion("no acceptable representation for " + layer + "/" +
                                          std::string(to_string(kind)) + "; use a larger bw0",
                                      layer, kind, s.delta_reduced, report);
            }
            report.steps.push_back({layer, kind, pos, eps, s.start, s.diagonal, s.reduced, s.local, s.chosen,
                                    s.delta_reduced, s.delta_local, s.delta_chosen, evaluations});
            report.plan.set(key, s.chosen);
        }
    }
    return report;
}

inline SearchReport opt_search(const ModelGraph& g, const LabeledDataset& ds, const ActivationProfile& profile,
                               const SearchConfig& config, ForwardOptions opt = {})
{
    Session session(g, ds, opt);
    return opt_search(session, profile, config);
}

/// Budgets of the final method: weights ramp linearly to eps/2, biases hold
/// eps/2, activations ramp linearly from eps/2 to eps.
inline LossBudget final_method_budget(double epsilon, std::size_t L)
{
    LossBudget b;
    const double half = epsilon / 2.0;
    b.eps[ParamKind::Weights] = allocate_budget(AllocationScheme::Linear, half, L);
    b.eps[ParamKind::Biases] = allocate_budget(AllocationScheme::Constant, half, L);
    auto& a = b.eps[ParamKind::Activations];
    a = allocate_budget(AllocationScheme::Linear, half, L);
    for (double& e : a)
        e += half;
    return b;
}

inline SearchConfig final_method_config(std::size_t L, double epsilon, int bw0 = 12, double delta = 0.001)
{
    if (!(epsilon >= 0.0))
        throw ContractViolation("final method: epsilon must be >= 0");
    SearchConfig c;
    c.bw0 = bw0;
    c.mode = EvalMode::Dependent;
    c.delta = delta;
    c.param_order = {ParamKind::Weights, ParamKind::Biases, ParamKind::Activations};
    c.layer_order = LayerOrder::Forward;
    c.scheme = {{ParamKind::Weights, AllocationScheme::Linear},
                {ParamKind::Biases, AllocationScheme::Constant},
                {ParamKind::Activations, AllocationScheme::Linear}};
    c.terminal_eps = {{ParamKind::Weights, epsilon / 2.0},
                      {ParamKind::Biases, epsilon / 2.0},
                      {ParamKind::Activations, epsilon}};
    c.budget = final_method_budget(epsilon, L);
    return c;
}

inline SearchReport final_method(Session& session, const ActivationProfile& profile, double epsilon, int bw0 = 12,
                                 double delta = 0.001)
{
    return opt_search(session, profile, final_method_config(session.model().num_quantizable(), epsilon, bw0, delta));
}

/// Every quantizable tensor at the same bitwidth with its clip-free offset.
inline QuantizationPlan baseline_fixed_bitwidth(const ModelGraph& g, const ActivationProfile& profile, int bw)
{
    if (bw < 2 || bw > kMaxBitwidth)
        throw ContractViolation("baseline: bw must be in [2, 53]");
    QuantizationPlan plan;
    for (const auto& layer : g.quantizable())
        for (ParamKind k : kAllParamKinds)
            plan.set(layer, k, {bw, no_clip_offset(bw, detail::reference_max_abs(g, profile, layer, k))});
    return plan;
}

struct IntRange
{
    int lo = 0;
    int hi = 0; // inclusive

    std::size_t size() const { return hi < lo ? 0 : static_cast<std::size_t>(hi - lo + 1); }
};

/// Row-major (bw outer, f inner) matrix over a (bw, f) grid.
struct GridMatrix
{
    IntRange bw, f;
    std::vector<double> values;

    double at(int b, int ff) const
    {
        return values.at(static_cast<std::size_t>(b - bw.lo) * f.size() + static_cast<std::size_t>(ff - f.lo));
    }

    std::string to_csv() const
    {
        std::string out = "bw\\f";
        for (int ff = f.lo; ff <= f.hi; ++ff)
            out += "," + std::to_string(ff);
        out += "\n";
        char buf[32];
        for (int b = bw.lo; b <= bw.hi; ++b) {
            out += std::to_string(b);
            for (int ff = f.lo; ff <= f.hi; ++ff) {
                std::snprintf(buf, sizeof buf, ",%.17g", at(b, ff));
                out += buf;
            }
            out += "\n";
        }
        return out;
    }
};

inline void check_grid(IntRange bw, IntRange f)
{
    if (bw.size() == 0 || f.size() == 0)
        throw ContractViolation("grid ranges must be non-empty");
    if (bw.lo < kMinBitwidth || bw.hi > kMaxBitwidth)
        throw ContractViolation("grid bitwidths must lie in [1, 53]");
}

inline GridMatrix brute_force_grid(Session& session, const PlanKey& target, IntRange bw, IntRange f, EvalMode mode,
                                   const QuantizationPlan& plan = {})
{
    check_grid(bw, f);
    GridMatrix m{bw, f, {}};
    m.values.reserve(bw.size() * f.size());
    for (int b = bw.lo; b <= bw.hi; ++b)
        for (int ff = f.lo; ff <= f.hi; ++ff)
            m.values.push_back(session.eval_acc_loss(target, {b, ff}, mode, plan).delta_a);
    return m;
}

/// Clipped-element counts of a tensor over a (bw, f) grid.
inline GridMatrix clipped_grid(std::span<const double> values, IntRange bw, IntRange f)
{
    check_grid(bw, f);
    GridMatrix m{bw, f, {}};
    for (int b = bw.lo; b <= bw.hi; ++b)
        for (int ff = f.lo; ff <= f.hi; ++ff)
            m.values.push_back(static_cast<double>(clipped_count(values, {b, ff})));
    return m;
}

/// Re-derives the plan from a report's trace alone: the search decisions are
/// replayed with every loss looked up, in order, from the recorded trace.
/// Throws if the trace does not match the sequence of requests.
inline QuantizationPlan replay_plan(const ModelGraph& g, const ActivationProfile& profile,
                                    const SearchConfig& config, const SearchReport& report)
{
    const auto layers = detail::layer_sequence(g, config.layer_order);
    const LossBudget budget = config.resolve_budget(layers.size());
    QuantizationPlan plan;
    std::size_t cursor = 0;
    for (ParamKind kind : config.param_order)
        for (std::size_t pos = 1; pos <= layers.size(); ++pos) {
            const std::string& layer = layers[pos - 1];
            auto loss = [&](FixedPointRepr r) {
                if (cursor >= report.trace.size())
                    throw ContractViolation("replay: trace ended early");
                const auto& rec = report.trace[cursor++];
                if (rec.layer != layer || rec.kind != kind || rec.repr != r)
                    throw ContractViolation("replay: trace diverges at record " + std::to_string(cursor - 1));
                return rec.delta_a;
            };
            const int f0 = no_clip_offset(config.bw0, detail::reference_max_abs(g, profile, layer, kind));
            const auto s = detail::search_step(loss, config.bw0, f0, budget.at(kind, pos), config.delta);
            if (s.infeasible || s.exhausted)
                throw ContractViolation("replay: trace records a failed search");
            plan.set(layer, kind, s.chosen);
        }
    if (cursor != report.trace.size())
        throw ContractViolation("replay: trace has trailing records");
    return plan;
}

// ---------------------------------------------------------------------------
// Serialization

inline nlohmann::json to_json(const LossBudget& b)
{
    nlohmann::json j = nlohmann::json::object();
    for (const auto& [k, v] : b.eps)
        j[std::string(to_string(k))] = v;
    return j;
}

inline nlohmann::json to_json(const SearchStep& s)
{
    auto repr = [](FixedPointRepr r) { return nlohmann::json{{"bw", r.bw}, {"f", r.f}}; };
    return {{"layer", s.layer},
            {"kind", to_string(s.kind)},
            {"position", s.position},
            {"epsilon", s.epsilon},
            {"start", repr(s.start)},
            {"diagonal", repr(s.diagonal)},
            {"reduced", repr(s.reduced)},
            {"local", repr(s.local)},
            {"chosen", repr(s.chosen)},
            {"delta_reduced", s.delta_reduced},
            {"delta_local", s.delta_local},
            {"delta_chosen", s.delta_chosen},
            {"evaluations", s.evaluations}};
}

inline nlohmann::json to_json(const SearchReport& r)
{
    auto trace = nlohmann::json::array();
    for (const auto& t : r.trace)
        trace.push_back(to_json(t));
    auto steps = nlohmann::json::array();
    for (const auto& s : r.steps)
        steps.push_back(to_json(s));
    return {{"status", r.status}, {"a0", r.a0},       {"plan", plan_to_json(r.plan)},
            {"budget", to_json(r.budget)}, {"steps", steps}, {"trace", trace}};
}

} // namespace fxq
