// SPDX-License-Identifier: Apache-2.0
//
// Batched forward pass with fixed-point simulation hooks.
//
// Every layer runs over the whole batch at once; examples are independent
// and may be split across threads without changing any result bit.
// Convolution and dense layers accumulate in double in a fixed order
// (kernel row, kernel column, input channel), bias added last.
//
// When a plan is supplied, a planned layer's weights and biases are
// quantized before use and its activations are quantized at its activation
// site (after the ReLU for convolutions, before the softmax for the final
// dense layer). See ModelGraph::activation_site.

#pragma once

#include "fxq/errors.hpp"
#include "fxq/fixed_point.hpp"
#include "fxq/io.hpp"
#include "fxq/model.hpp"
#include "fxq/plan.hpp"
#include "fxq/tensor.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <functional>
#include <map>
#include <memory>
#include <thread>
#include <vector>

namespace fxq {

struct ForwardOptions
{
    unsigned threads = 0; // 0: hardware concurrency
};

/// Per quantizable layer, the largest |activation| seen during calibration.
struct ActivationProfile
{
    std::map<std::string, double> max_abs;

    double at(const std::string& layer) const
    {
        auto it = max_abs.find(layer);
        if (it == max_abs.end())
            throw ContractViolation("activation profile has no entry for '" + layer + "'");
        return it->second;
    }
};

inline void validate_plan(const ModelGraph& g, const QuantizationPlan& plan)
{
    for (const auto& [key, r] : plan.entries()) {
        if (!g.has_layer(key.layer) || !is_quantizable(g.layer(g.index_of(key.layer)).kind))
            throw PlanError("plan references non-quantizable layer '" + key.layer + "'");
        if (!r.valid())
            throw PlanError("plan entry for '" + key.layer + "' has an invalid bitwidth");
    }
}

namespace detail {

inline unsigned resolve_threads(unsigned t)
{
    if (t == 0)
        t = std::max(1u, std::thread::hardware_concurrency());
    return t;
}

template <class Fn>
void parallel_for(std::size_t n, unsigned threads, Fn&& fn)
{
    threads = static_cast<unsigned>(std::min<std::size_t>(threads, n));
    if (threads <= 1) {
        fn(std::size_t{0}, n);
        return;
    }
    const std::size_t chunk = (n + threads - 1) / threads;
    std::vector<std::jthread> pool;
    for (std::size_t b = chunk; b < n; b += chunk)
        pool.emplace_back([&fn, b, e = std::min(n, b + chunk)] { fn(b, e); });
    fn(std::size_t{0}, std::min(n, chunk));
}

using Env = std::vector<std::shared_ptr<Tensor>>;

// Weights, biases and activation reprs as seen through a plan.
class ResolvedParams
{
public:
    ResolvedParams(const ModelGraph& g, const QuantizationPlan* plan) : g_(g), act_(g.size())
    {
        if (plan)
            validate_plan(g, *plan);
        for (std::size_t i = 0; i < g.size(); ++i) {
            const auto& l = g.layer(i);
            if (!is_quantizable(l.kind))
                continue;
            std::optional<FixedPointRepr> a = l.activation_quant;
            if (plan) {
                if (auto w = plan->get(l.id, ParamKind::Weights))
                    owned_[l.weights] = quantize_tensor(g.tensor(l.weights).data(), *w);
                if (auto b = plan->get(l.id, ParamKind::Biases))
                    owned_[l.bias] = quantize_tensor(g.tensor(l.bias).data(), *b);
                if (auto r = plan->get(l.id, ParamKind::Activations))
                    a = r;
            }
            act_[g.activation_site(i)] = a;
        }
    }

    std::span<const double> tensor(const std::string& name) const
    {
        auto it = owned_.find(name);
        if (it != owned_.end())
            return it->second;
        return g_.tensor(name).data();
    }

    const std::optional<FixedPointRepr>& activation_at(std::size_t site) const { return act_[site]; }

private:
    const ModelGraph& g_;
    std::map<std::string, std::vector<double>> owned_;
    std::vector<std::optional<FixedPointRepr>> act_;
};

inline Shape batched(std::size_t n, const Shape& s)
{
    Shape out{n};
    out.insert(out.end(), s.begin(), s.end());
    return out;
}

// Output channels innermost so the per-output accumulation order stays fixed
// whatever the vector width. O is a compile-time constant for common widths.
// Computes examples [e, e + Batch) together: the examples share padding
// geometry and weights, and the independent accumulators hide add latency.
// Per output, the summation order is the same for any Batch or O.
template <std::size_t StaticO, std::size_t Batch>
void conv2d_block(const LayerSpec& l, const double* xin, const double* w, const double* b, double* yout,
                  std::size_t H, std::size_t W, std::size_t C, std::size_t OH, std::size_t OW, std::size_t dyn_o,
                  std::size_t pt, std::size_t pl, std::size_t e)
{
    const std::size_t O = StaticO ? StaticO : dyn_o;
    const std::size_t KH = l.kernel_h, KW = l.kernel_w;
    const std::size_t in_stride = H * W * C;
    std::array<std::array<double, StaticO ? StaticO : 1>, Batch> acc_fixed{};
    std::vector<double> acc_dyn(StaticO ? 0 : O * Batch);
    for (std::size_t oy = 0; oy < OH; ++oy) {
        const auto y0 = static_cast<std::ptrdiff_t>(oy * l.stride_h) - static_cast<std::ptrdiff_t>(pt);
        for (std::size_t ox = 0; ox < OW; ++ox) {
            const auto x0 = static_cast<std::ptrdiff_t>(ox * l.stride_w) - static_cast<std::ptrdiff_t>(pl);
            for (auto& a : acc_fixed)
                a.fill(0.0);
            std::fill(acc_dyn.begin(), acc_dyn.end(), 0.0);
            for (std::size_t ky = 0; ky < KH; ++ky) {
                const std::ptrdiff_t iy = y0 + static_cast<std::ptrdiff_t>(ky);
                if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(H))
                    continue;
                for (std::size_t kx = 0; kx < KW; ++kx) {
                    const std::ptrdiff_t ix = x0 + static_cast<std::ptrdiff_t>(kx);
                    if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(W))
                        continue;
                    const double* px =
                        xin + ((e * H + static_cast<std::size_t>(iy)) * W + static_cast<std::size_t>(ix)) * C;
                    const double* pw = w + (ky * KW + kx) * C * O;
                    for (std::size_t c = 0; c < C; ++c) {
                        const double* row = pw + c * O;
                        if constexpr (StaticO != 0) {
                            for (std::size_t k = 0; k < Batch; ++k) {
                                const double v = px[k * in_stride + c];
                                for (std::size_t o = 0; o < StaticO; ++o)
                                    acc_fixed[k][o] += v * row[o];
                            }
                        } else {
                            for (std::size_t k = 0; k < Batch; ++k) {
                                const double v = px[k * in_stride + c];
                                for (std::size_t o = 0; o < O; ++o)
                                    acc_dyn[k * O + o] += v * row[o];
                            }
                        }
                    }
                }
            }
            for (std::size_t k = 0; k < Batch; ++k) {
                double* py = yout + (((e + k) * OH + oy) * OW + ox) * O;
                const double* acc = StaticO ? acc_fixed[k].data() : acc_dyn.data() + k * O;
                for (std::size_t o = 0; o < O; ++o)
                    py[o] = acc[o] + b[o];
            }
        }
    }
}

template <std::size_t StaticO>
void conv2d_rows(const LayerSpec& l, const double* xin, const double* w, const double* b, double* yout,
                 std::size_t H, std::size_t W, std::size_t C, std::size_t OH, std::size_t OW, std::size_t dyn_o,
                 std::size_t pt, std::size_t pl, std::size_t nb, std::size_t ne)
{
    constexpr std::size_t kBatch = 4;
    std::size_t e = nb;
    for (; e + kBatch <= ne; e += kBatch)
        conv2d_block<StaticO, kBatch>(l, xin, w, b, yout, H, W, C, OH, OW, dyn_o, pt, pl, e);
    for (; e < ne; ++e)
        conv2d_block<StaticO, 1>(l, xin, w, b, yout, H, W, C, OH, OW, dyn_o, pt, pl, e);
}

inline Tensor conv2d(const LayerSpec& l, const Tensor& x, std::span<const double> w, std::span<const double> b,
                     const Shape& out_shape, unsigned threads)
{
    const std::size_t n = x.dim(0), H = x.dim(1), W = x.dim(2), C = x.dim(3);
    const std::size_t OH = out_shape[0], OW = out_shape[1], O = out_shape[2];
    const std::size_t pt = pad_before(H, l.kernel_h, l.stride_h, l.padding);
    const std::size_t pl = pad_before(W, l.kernel_w, l.stride_w, l.padding);
    Tensor y(batched(n, out_shape));
    const double* xin = x.data().data();
    double* yout = y.data().data();
    parallel_for(n, threads, [&](std::size_t nb, std::size_t ne) {
        auto go = [&]<std::size_t K>() {
            conv2d_rows<K>(l, xin, w.data(), b.data(), yout, H, W, C, OH, OW, O, pt, pl, nb, ne);
        };
        switch (O) {
        case 4: go.template operator()<4>(); break;
        case 8: go.template operator()<8>(); break;
        case 16: go.template operator()<16>(); break;
        case 32: go.template operator()<32>(); break;
        default: go.template operator()<0>(); break;
        }
    });
    return y;
}

inline Tensor dense(const Tensor& x, std::span<const double> w, std::span<const double> b, std::size_t units,
                    unsigned threads)
{
    const std::size_t n = x.dim(0), I = x.dim(1);
    Tensor y({n, units});
    parallel_for(n, threads, [&](std::size_t nb, std::size_t ne) {
        std::vector<double> acc(units);
        for (std::size_t e = nb; e < ne; ++e) {
            std::fill(acc.begin(), acc.end(), 0.0);
            const double* px = x.data().data() + e * I;
            for (std::size_t i = 0; i < I; ++i) {
                const double v = px[i];
                const double* row = w.data() + i * units;
                for (std::size_t o = 0; o < units; ++o)
                    acc[o] += v * row[o];
            }
            double* py = y.data().data() + e * units;
            for (std::size_t o = 0; o < units; ++o)
                py[o] = acc[o] + b[o];
        }
    });
    return y;
}

inline Tensor pool(const LayerSpec& l, const Tensor& x, const Shape& out_shape)
{
    const std::size_t n = x.dim(0), H = x.dim(1), W = x.dim(2), C = x.dim(3);
    const std::size_t OH = out_shape[0], OW = out_shape[1];
    const bool is_max = l.kind == LayerKind::MaxPool;
    const double inv = 1.0 / static_cast<double>(l.pool_h * l.pool_w);
    Tensor y(batched(n, out_shape));
    for (std::size_t e = 0; e < n; ++e)
        for (std::size_t oy = 0; oy < OH; ++oy)
            for (std::size_t ox = 0; ox < OW; ++ox)
                for (std::size_t c = 0; c < C; ++c) {
                    double r = is_max ? -HUGE_VAL : 0.0;
                    for (std::size_t ky = 0; ky < l.pool_h; ++ky)
                        for (std::size_t kx = 0; kx < l.pool_w; ++kx) {
                            const double v =
                                x[((e * H + oy * l.stride_h + ky) * W + ox * l.stride_w + kx) * C + c];
                            r = is_max ? std::max(r, v) : r + v;
                        }
                    y[((e * OH + oy) * OW + ox) * C + c] = is_max ? r : r * inv;
                }
    return y;
}

inline void softmax_rows(Tensor& t)
{
    const std::size_t c = t.shape().back();
    const std::size_t rows = t.size() / c;
    for (std::size_t r = 0; r < rows; ++r) {
        double* p = t.data().data() + r * c;
        const double m = *std::max_element(p, p + c);
        double sum = 0.0;
        for (std::size_t k = 0; k < c; ++k) {
            p[k] = std::exp(p[k] - m);
            sum += p[k];
        }
        for (std::size_t k = 0; k < c; ++k)
            p[k] /= sum;
    }
}

using LayerObserver = std::function<void(std::size_t layer, const Tensor& output)>;

/// Runs layers [begin, end) of g over the batch held in env. env[i] holds the
/// output of layer i while it is still needed; inputs are dropped after their
/// last consumer within the range.
class Executor
{
public:
    Executor(const ModelGraph& g, const QuantizationPlan* plan, unsigned threads)
        : g_(g), params_(g, plan), threads_(resolve_threads(threads))
    {
    }

    void run(Env& env, std::size_t begin, std::size_t end, const LayerObserver& observe = {}) const
    {
        for (std::size_t i = begin; i < end; ++i) {
            Tensor out = compute(i, env);
            env[i] = std::make_shared<Tensor>(std::move(out));
            if (observe)
                observe(i, *env[i]);
            for (std::size_t j : g_.input_indices(i))
                if (g_.last_use(j) == i)
                    env[j].reset();
        }
    }

    // Batch input of shape [n, input_shape...] -> env ready for layer 1.
    Env start(const Tensor& batch) const
    {
        if (batch.rank() != g_.input_shape().size() + 1 ||
            !std::equal(g_.input_shape().begin(), g_.input_shape().end(), batch.shape().begin() + 1) ||
            batch.dim(0) == 0)
            throw ShapeError(g_.layer(0).id, "batch shape " + to_string(batch.shape()) + " does not match input " +
                                                 to_string(g_.input_shape()));
        Env env(g_.size());
        env[0] = std::make_shared<Tensor>(batch);
        return env;
    }

private:
    // The first input by value: moved out when this layer is its last
    // consumer and nobody else shares it, copied otherwise.
    Tensor take_first_input(std::size_t i, Env& env) const
    {
        const auto& ins = g_.input_indices(i);
        const std::size_t j = ins.front();
        auto& slot = env[j];
        if (g_.last_use(j) == i && slot.use_count() == 1 && std::count(ins.begin(), ins.end(), j) == 1) {
            Tensor t = std::move(*slot);
            slot.reset();
            return t;
        }
        return *slot;
    }

    Tensor compute(std::size_t i, Env& env) const
    {
        const auto& l = g_.layer(i);
        const auto& ins = g_.input_indices(i);
        const Shape& out_shape = g_.output_shape(i);
        if (l.kind == LayerKind::Input)
            return *env[0];
        const bool elementwise = l.kind == LayerKind::BatchNorm || l.kind == LayerKind::Relu ||
                                 l.kind == LayerKind::Softmax || l.kind == LayerKind::Flatten ||
                                 l.kind == LayerKind::Add;
        Tensor y = elementwise ? take_first_input(i, env) : Tensor{};
        const Tensor& x = elementwise ? y : *env[ins.front()];
        const std::size_t n = x.dim(0);
        switch (l.kind) {
        case LayerKind::Conv2d:
            y = conv2d(l, x, params_.tensor(l.weights), params_.tensor(l.bias), out_shape, threads_);
            break;
        case LayerKind::Dense:
            y = dense(x, params_.tensor(l.weights), params_.tensor(l.bias), l.units, threads_);
            break;
        case LayerKind::BatchNorm: {
            const auto gamma = g_.tensor(l.gamma).data(), beta = g_.tensor(l.beta).data();
            const auto mean = g_.tensor(l.mean).data(), var = g_.tensor(l.variance).data();
            const std::size_t c = gamma.size();
            std::vector<double> denom(c);
            for (std::size_t k = 0; k < c; ++k)
                denom[k] = std::sqrt(var[k] + l.epsilon);
            double* d = y.data().data();
            for (std::size_t r = 0; r < y.size(); r += c, d += c)
                for (std::size_t ch = 0; ch < c; ++ch)
                    d[ch] = gamma[ch] * (d[ch] - mean[ch]) / denom[ch] + beta[ch];
            break;
        }
        case LayerKind::MaxPool:
        case LayerKind::AvgPool: y = pool(l, x, out_shape); break;
        case LayerKind::Relu:
            for (double& v : y.data())
                v = v > 0.0 ? v : 0.0;
            break;
        case LayerKind::Softmax:
            softmax_rows(y);
            break;
        case LayerKind::Flatten:
            y.reshape({n, element_count(out_shape)});
            break;
        case LayerKind::Add:
            for (std::size_t k = 1; k < ins.size(); ++k) {
                const auto other = env[ins[k]]->data();
                auto d = y.data();
                for (std::size_t e = 0; e < d.size(); ++e)
                    d[e] += other[e];
            }
            break;
        case LayerKind::Concat: {
            y = Tensor(batched(n, out_shape));
            const std::size_t outer = y.size() / out_shape.back();
            std::size_t offset = 0;
            for (std::size_t j : ins) {
                const Tensor& part = *env[j];
                const std::size_t c = part.shape().back();
                for (std::size_t r = 0; r < outer; ++r)
                    std::copy_n(part.data().data() + r * c, c,
                                y.data().data() + r * out_shape.back() + offset);
                offset += c;
            }
            break;
        }
        case LayerKind::Input: break;
        }
        if (const auto& r = params_.activation_at(i))
            quantize_in_place(y.data(), *r);
        return y;
    }

    const ModelGraph& g_;
    ResolvedParams params_;
    unsigned threads_;
};

// Index of the largest score per row; ties go to the lowest class index.
inline std::vector<std::size_t> argmax_rows(const Tensor& scores)
{
    const std::size_t c = scores.shape().back();
    const std::size_t n = scores.size() / c;
    std::vector<std::size_t> out(n);
    for (std::size_t r = 0; r < n; ++r) {
        const double* p = scores.data().data() + r * c;
        out[r] = static_cast<std::size_t>(std::max_element(p, p + c) - p);
    }
    return out;
}

} // namespace detail

inline Tensor forward(const ModelGraph& g, const Tensor& batch, const QuantizationPlan* plan = nullptr,
                      ForwardOptions opt = {})
{
    detail::Executor ex(g, plan, opt.threads);
    auto env = ex.start(batch);
    ex.run(env, 1, g.size());
    return *env.back();
}

inline std::size_t count_correct(const Tensor& scores, std::span<const std::uint16_t> labels)
{
    const auto pred = detail::argmax_rows(scores);
    if (pred.size() != labels.size())
        throw ContractViolation("score rows and labels differ in count");
    std::size_t correct = 0;
    for (std::size_t i = 0; i < pred.size(); ++i)
        correct += pred[i] == labels[i];
    return correct;
}

/// Top-1 accuracy over the dataset in stored order.
inline double accuracy(const ModelGraph& g, const LabeledDataset& ds, const QuantizationPlan* plan = nullptr,
                       ForwardOptions opt = {})
{
    if (ds.size() == 0)
        throw ContractViolation("accuracy: empty dataset");
    const Tensor scores = forward(g, ds.images, plan, opt);
    return static_cast<double>(count_correct(scores, ds.labels)) / static_cast<double>(ds.size());
}

/// Full-precision pass over the first calib_size examples (0: all), recording
/// max |activation| at each quantizable layer's activation site.
inline ActivationProfile calibrate_activations(const ModelGraph& g, const LabeledDataset& ds,
                                               std::size_t calib_size = 0, ForwardOptions opt = {})
{
    const LabeledDataset calib = ds.head(calib_size);
    std::map<std::size_t, std::string> site_owner;
    for (const auto& q : g.quantizable())
        site_owner[g.activation_site(g.index_of(q))] = q;

    // Armed hooks on the model itself are ignored: calibration is full precision.
    ModelGraph plain = g;
    for (const auto& q : g.quantizable())
        plain.arm_activation(g.index_of(q), std::nullopt);

    ActivationProfile profile;
    detail::Executor ex(plain, nullptr, opt.threads);
    auto env = ex.start(calib.images);
    ex.run(env, 1, g.size(), [&](std::size_t i, const Tensor& out) {
        if (auto it = site_owner.find(i); it != site_owner.end())
            profile.max_abs[it->second] = max_abs(out.data());
    });
    return profile;
}

} // namespace fxq
