// SPDX-License-Identifier: Apache-2.0
//
// fxq: command-line driver for the quantization library.
//
//   fxq quantize   --model M --data D --epsilon E [search flags]
//   fxq bruteforce --model M --data D --layer L --kind K --bw-range 2..8 --f-range 0..8
//   fxq baseline   --model M --data D [--bw 8]
//   fxq eval       --model M --data D [--plan P]
//
// Exit codes: 0 success, 2 usage or parse error, 3 budget infeasible, 4 I/O.

#include "fxq/fxq.hpp"

#include <CLI11.hpp>
#include <json.hpp>
#include <openssl/evp.h>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using nlohmann::json;
using namespace fxq;

namespace {

enum ExitCode { kOk = 0, kUsage = 2, kInfeasible = 3, kIo = 4 };

struct UsageError : std::runtime_error
{
    using std::runtime_error::runtime_error;
};

struct Common
{
    std::string model, data;
    std::size_t calib_size = 0;
    unsigned threads = 0;
    std::string out_dir = ".";
};

struct QuantizeArgs
{
    double epsilon = 0.0;
    std::string mode, scheme, order;
    std::string layer_order = "forward";
    int bw0 = 12;
    double delta = 0.001;
    int ref_bw = 8;
};

struct BruteArgs
{
    std::string layer, kind = "weights", bw_range, f_range, mode = "independent", plan;
};

std::string sha256_file(const fs::path& p)
{
    const auto bytes = detail::read_file(p);
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned len = 0;
    if (EVP_Digest(bytes.data(), bytes.size(), md, &len, EVP_sha256(), nullptr) != 1)
        throw Error("sha256 failed for '" + p.string() + "'");
    std::string hex;
    char buf[3];
    for (unsigned i = 0; i < len; ++i) {
        std::snprintf(buf, sizeof buf, "%02x", md[i]);
        hex += buf;
    }
    return hex;
}

// Input files of a model: the manifest and its blob.
std::vector<fs::path> model_files(const fs::path& manifest)
{
    fs::path blob = manifest;
    blob.replace_extension(".bin");
    std::vector<fs::path> out{manifest};
    if (fs::exists(blob))
        out.push_back(blob);
    return out;
}

class Run
{
public:
    Run(std::string command, const Common& c) : command_(std::move(command)), common_(c)
    {
        start_ = std::chrono::steady_clock::now();
        fs::create_directories(c.out_dir);
        for (const auto& p : model_files(c.model))
            input(p);
        input(c.data);
    }

    void input(const fs::path& p) { inputs_[p.string()] = sha256_file(p); }
    void config(const std::string& key, json v) { config_[key] = std::move(v); }

    fs::path write(const std::string& name, const std::string& text)
    {
        const fs::path p = fs::path(common_.out_dir) / name;
        detail::write_file(p, text.data(), text.size());
        outputs_.push_back(p.string());
        return p;
    }

    fs::path write_json(const std::string& name, const json& j) { return write(name, j.dump(2) + "\n"); }

    void finish(const std::string& status)
    {
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
        json m{{"command", command_},
               {"status", status},
               {"model", common_.model},
               {"data", common_.data},
               {"calib_size", common_.calib_size},
               {"threads", common_.threads},
               {"out_dir", common_.out_dir},
               {"config", config_},
               {"input_sha256", inputs_},
               {"outputs", outputs_},
               {"duration_s", secs}};
        write_json(command_ + "_manifest.json", m);
    }

private:
    std::string command_;
    Common common_;
    std::chrono::steady_clock::time_point start_;
    json config_ = json::object();
    json inputs_ = json::object();
    std::vector<std::string> outputs_;
};

EvalMode parse_mode(const std::string& s)
{
    if (s == "independent")
        return EvalMode::Independent;
    if (s == "dependent")
        return EvalMode::Dependent;
    throw UsageError("unknown mode '" + s + "'");
}

IntRange parse_range(const std::string& s, const char* flag)
{
    const auto sep = s.find("..") != std::string::npos ? s.find("..") : s.find(':');
    if (sep == std::string::npos)
        throw UsageError(std::string(flag) + ": expected LO..HI");
    const std::size_t skip = s.compare(sep, 2, "..") == 0 ? 2 : 1;
    IntRange r;
    try {
        std::size_t a = 0, b = 0;
        r.lo = std::stoi(s.substr(0, sep), &a);
        r.hi = std::stoi(s.substr(sep + skip), &b);
        if (a != sep || b != s.size() - sep - skip)
            throw std::invalid_argument(s);
    } catch (const std::logic_error&) {
        throw UsageError(std::string(flag) + ": cannot parse '" + s + "'");
    }
    if (r.hi < r.lo)
        throw UsageError(std::string(flag) + ": range is reversed");
    return r;
}

QuantizationPlan read_plan(const fs::path& p)
{
    const auto bytes = detail::read_file(p);
    json j = json::parse(bytes.begin(), bytes.end(), nullptr, false);
    if (j.is_discarded())
        throw PlanError("'" + p.string() + "' is not valid JSON");
    // A search report carries its plan under "plan".
    if (j.is_object() && j.contains("plan"))
        j = j.at("plan");
    return plan_from_json(j);
}

struct Loaded
{
    ModelGraph model;
    LabeledDataset data;
};

Loaded load(const Common& c)
{
    return {load_model(c.model), load_dataset(c.data)};
}

void print_costs(const CostReport& r)
{
    std::printf("accuracy %.4f  delta_a %.6f\n", r.plan.accuracy, r.plan.delta_a);
    std::printf("memory %llu bits (%.1f%% of reference)\n", static_cast<unsigned long long>(r.plan.memory_bits),
                100.0 * r.memory_ratio);
    std::printf("mult cost %llu (%.1f%% of reference)\n", static_cast<unsigned long long>(r.plan.mult_cost),
                100.0 * r.mult_ratio);
}

int cmd_quantize(const Common& c, const QuantizeArgs& q, bool raw)
{
    Run run("quantize", c);
    auto [g, ds] = load(c);
    const auto profile = calibrate_activations(g, ds, c.calib_size, {c.threads});
    Session session(g, ds, {c.threads});

    SearchConfig cfg;
    if (raw) {
        cfg.bw0 = q.bw0;
        cfg.delta = q.delta;
        cfg.mode = parse_mode(q.mode.empty() ? "dependent" : q.mode);
        const auto scheme = parse_scheme(q.scheme.empty() ? "linear" : q.scheme);
        if (!scheme)
            throw UsageError("unknown scheme '" + q.scheme + "'");
        for (ParamKind k : kAllParamKinds) {
            cfg.scheme[k] = *scheme;
            cfg.terminal_eps[k] = q.epsilon;
        }
        const std::string order = q.order.empty() ? "wba" : q.order;
        if (order == "wba")
            cfg.param_order = {ParamKind::Weights, ParamKind::Biases, ParamKind::Activations};
        else if (order == "awb")
            cfg.param_order = {ParamKind::Activations, ParamKind::Weights, ParamKind::Biases};
        else
            throw UsageError("unknown order '" + order + "'");
        if (q.layer_order == "forward")
            cfg.layer_order = LayerOrder::Forward;
        else if (q.layer_order == "reverse")
            cfg.layer_order = LayerOrder::Reverse;
        else
            throw UsageError("unknown layer order '" + q.layer_order + "'");
    } else {
        if (q.layer_order != "forward")
            throw UsageError("--layer-order needs --mode, --scheme or --order");
        cfg = final_method_config(g.num_quantizable(), q.epsilon, q.bw0, q.delta);
    }

    run.config("method", raw ? "search" : "final");
    run.config("epsilon", q.epsilon);
    run.config("mode", std::string(to_string(cfg.mode)));
    run.config("scheme", raw ? std::string(to_string(cfg.scheme.at(ParamKind::Weights))) : "final");
    std::string order;
    for (ParamKind k : cfg.param_order)
        order += std::string(to_string(k)).substr(0, 1);
    run.config("order", order);
    run.config("layer_order", q.layer_order);
    run.config("bw0", cfg.bw0);
    run.config("delta", cfg.delta);
    run.config("ref_bw", q.ref_bw);

    SearchReport report;
    try {
        report = opt_search(session, profile, cfg);
    } catch (const SearchError& e) {
        run.write_json("search.json", to_json(e.partial));
        run.finish(e.partial.status);
        std::cerr << "fxq: " << e.what() << "\n";
        return kInfeasible;
    }

    const auto reference = baseline_fixed_bitwidth(g, profile, q.ref_bw);
    const auto costs = build_report(session, report.plan, reference);
    run.write_json("plan.json", plan_to_json(report.plan));
    run.write_json("search.json", to_json(report));
    run.write_json("report.json", to_json(costs));
    run.write("bitwidths.csv", bitwidth_table_csv(g, report.plan));
    run.finish(report.status);

    std::printf("a0 %.4f  L %zu  evaluations %zu\n", report.a0, g.num_quantizable(), session.inference_runs());
    print_costs(costs);
    return kOk;
}

int cmd_bruteforce(const Common& c, const BruteArgs& b)
{
    const IntRange bw = parse_range(b.bw_range, "--bw-range");
    const IntRange f = parse_range(b.f_range, "--f-range");
    if (bw.lo < kMinBitwidth || bw.hi > kMaxBitwidth)
        throw UsageError("--bw-range must lie in [1, 53]");
    const ParamKind kind = parse_param_kind(b.kind);
    const EvalMode mode = parse_mode(b.mode);

    Run run("bruteforce", c);
    auto [g, ds] = load(c);
    if (!g.has_layer(b.layer) || !is_quantizable(g.layer(g.index_of(b.layer)).kind))
        throw UsageError("'" + b.layer + "' is not a quantizable layer");
    QuantizationPlan plan;
    if (!b.plan.empty()) {
        run.input(b.plan);
        plan = read_plan(b.plan);
    }
    run.config("layer", b.layer);
    run.config("kind", std::string(to_string(kind)));
    run.config("bw_range", {bw.lo, bw.hi});
    run.config("f_range", {f.lo, f.hi});
    run.config("mode", std::string(to_string(mode)));
    run.config("plan", b.plan);

    Session session(g, ds, {c.threads});
    const auto grid = brute_force_grid(session, {b.layer, kind}, bw, f, mode, plan);
    run.write("heatmap.csv", grid.to_csv());
    if (kind != ParamKind::Activations) {
        const auto& l = g.layer(g.index_of(b.layer));
        const auto& t = g.tensor(kind == ParamKind::Weights ? l.weights : l.bias);
        run.write("clipped.csv", clipped_grid(t.data(), bw, f).to_csv());
    }
    run.finish("success");
    std::printf("%zu x %zu grid for %s/%s written to %s\n", bw.size(), f.size(), b.layer.c_str(),
                std::string(to_string(kind)).c_str(), c.out_dir.c_str());
    return kOk;
}

int cmd_baseline(const Common& c, int bw)
{
    if (bw < 2 || bw > kMaxBitwidth)
        throw UsageError("--bw must be in [2, 53]");
    Run run("baseline", c);
    auto [g, ds] = load(c);
    run.config("bw", bw);
    const auto profile = calibrate_activations(g, ds, c.calib_size, {c.threads});
    Session session(g, ds, {c.threads});
    const auto plan = baseline_fixed_bitwidth(g, profile, bw);
    const auto costs = build_report(session, plan, plan);
    run.write_json("baseline_plan.json", plan_to_json(plan));
    run.write_json("baseline_report.json", to_json(costs));
    run.write("baseline_bitwidths.csv", bitwidth_table_csv(g, plan));
    run.finish("success");
    std::printf("%d-bit baseline\n", bw);
    print_costs(costs);
    return kOk;
}

int cmd_eval(const Common& c, const std::string& plan_path)
{
    auto [g, ds] = load(c);
    Session session(g, ds, {c.threads});
    std::printf("a0 %.6f\n", session.a0());
    if (!plan_path.empty()) {
        const auto plan = read_plan(plan_path);
        std::printf("accuracy %.6f\n", session.accuracy(plan));
        std::printf("delta_a %.6f\n", session.network_acc_loss(plan));
    }
    return kOk;
}

} // namespace

int main(int argc, char** argv)
{
    CLI::App app{"Fixed-point quantization of CNN parameters"};
    app.require_subcommand(1);

    Common common;
    auto add_common = [&](CLI::App* s) {
        s->add_option("--model", common.model, "model manifest (JSON)")->required();
        s->add_option("--data", common.data, "labelled dataset")->required();
        s->add_option("--calib-size", common.calib_size, "calibration examples, 0 for all");
        s->add_option("--threads", common.threads, "evaluation threads, 0 for all cores");
        s->add_option("--out-dir", common.out_dir, "output directory");
    };

    QuantizeArgs q;
    auto* quantize = app.add_subcommand("quantize", "search a per-layer quantization plan");
    add_common(quantize);
    quantize->add_option("--epsilon", q.epsilon, "terminal accuracy-loss budget")->required();
    auto* mode_opt = quantize->add_option("--mode", q.mode, "independent or dependent");
    auto* scheme_opt = quantize->add_option("--scheme", q.scheme, "constant, log, linear, quadratic, exponential");
    auto* order_opt = quantize->add_option("--order", q.order, "wba or awb");
    quantize->add_option("--layer-order", q.layer_order, "forward or reverse");
    quantize->add_option("--bw0", q.bw0, "starting bitwidth");
    quantize->add_option("--delta", q.delta, "loss gap favouring the local optimum");
    quantize->add_option("--ref-bw", q.ref_bw, "bitwidth of the reference baseline");

    BruteArgs b;
    auto* brute = app.add_subcommand("bruteforce", "evaluate a (bw, f) grid for one tensor");
    add_common(brute);
    brute->add_option("--layer", b.layer)->required();
    brute->add_option("--kind", b.kind, "weights, biases or activations");
    brute->add_option("--bw-range", b.bw_range, "LO..HI")->required();
    brute->add_option("--f-range", b.f_range, "LO..HI")->required();
    brute->add_option("--mode", b.mode, "independent or dependent");
    brute->add_option("--plan", b.plan, "plan applied first in dependent mode");

    int base_bw = 8;
    auto* baseline = app.add_subcommand("baseline", "uniform bitwidth plan");
    add_common(baseline);
    baseline->add_option("--bw", base_bw, "bitwidth");

    std::string plan_path;
    auto* eval = app.add_subcommand("eval", "accuracy with an optional plan");
    add_common(eval);
    eval->add_option("--plan", plan_path);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? kOk : kUsage;
    }

    try {
        if (*quantize) {
            const bool raw = mode_opt->count() + scheme_opt->count() + order_opt->count() > 0;
            return cmd_quantize(common, q, raw);
        }
        if (*brute)
            return cmd_bruteforce(common, b);
        if (*baseline)
            return cmd_baseline(common, base_bw);
        return cmd_eval(common, plan_path);
    } catch (const UsageError& e) {
        std::cerr << "fxq: " << e.what() << "\n";
        return kUsage;
    } catch (const PlanError& e) {
        std::cerr << "fxq: " << e.what() << "\n";
        return kUsage;
    } catch (const ContractViolation& e) {
        std::cerr << "fxq: " << e.what() << "\n";
        return kUsage;
    } catch (const std::exception& e) {
        // unreadable or malformed input files
        std::cerr << "fxq: " << e.what() << "\n";
        return kIo;
    }
}
