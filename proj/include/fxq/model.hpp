// SPDX-License-Identifier: Apache-2.0
//
// Layer graph of a convolutional network. Shapes are per example, channels
// last ([h, w, c] for feature maps, [n] after flatten). Convolution kernels
// are stored [kh, kw, in_c, out_c] and dense kernels [in, out].

#pragma once

#include "fxq/errors.hpp"
#include "fxq/fixed_point.hpp"
#include "fxq/tensor.hpp"

#include <algorithm>
#include <cstddef>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace fxq {

enum class LayerKind { Input, Conv2d, Dense, BatchNorm, MaxPool, AvgPool, Relu, Softmax, Flatten, Add, Concat };

enum class Padding { Same, Valid };

inline std::string_view to_string(LayerKind k)
{
    switch (k) {
    case LayerKind::Input: return "input";
    case LayerKind::Conv2d: return "conv2d";
    case LayerKind::Dense: return "dense";
    case LayerKind::BatchNorm: return "batchnorm";
    case LayerKind::MaxPool: return "maxpool";
    case LayerKind::AvgPool: return "avgpool";
    case LayerKind::Relu: return "relu";
    case LayerKind::Softmax: return "softmax";
    case LayerKind::Flatten: return "flatten";
    case LayerKind::Add: return "add";
    case LayerKind::Concat: return "concat";
    }
    return "?";
}

inline std::optional<LayerKind> parse_layer_kind(std::string_view s)
{
    static const std::map<std::string_view, LayerKind> kinds{
        {"input", LayerKind::Input},     {"conv2d", LayerKind::Conv2d},   {"dense", LayerKind::Dense},
        {"batchnorm", LayerKind::BatchNorm}, {"maxpool", LayerKind::MaxPool}, {"avgpool", LayerKind::AvgPool},
        {"relu", LayerKind::Relu},       {"softmax", LayerKind::Softmax}, {"flatten", LayerKind::Flatten},
        {"add", LayerKind::Add},         {"concat", LayerKind::Concat}};
    auto it = kinds.find(s);
    if (it == kinds.end())
        return std::nullopt;
    return it->second;
}

constexpr bool is_quantizable(LayerKind k) noexcept { return k == LayerKind::Conv2d || k == LayerKind::Dense; }

struct LayerSpec
{
    std::string id;
    LayerKind kind = LayerKind::Input;
    std::vector<std::string> inputs;

    Shape input_shape; // input

    std::size_t kernel_h = 0, kernel_w = 0; // conv2d
    std::size_t channels = 0;               // conv2d output channels
    std::size_t units = 0;                  // dense
    std::size_t pool_h = 0, pool_w = 0;     // pooling
    std::size_t stride_h = 1, stride_w = 1; // conv2d, pooling
    Padding padding = Padding::Valid;

    double epsilon = 1e-3; // batchnorm
    std::string gamma, beta, mean, variance;

    std::string weights, bias; // conv2d, dense

    // Armed activation quantization (plan-applied models only).
    std::optional<FixedPointRepr> activation_quant;
};

/// Immutable, validated network. Construct through ModelGraph::build.
class ModelGraph
{
public:
    static ModelGraph build(std::vector<LayerSpec> layers, std::map<std::string, Tensor> tensors);

    const std::vector<LayerSpec>& layers() const noexcept { return layers_; }
    const LayerSpec& layer(std::size_t i) const { return layers_.at(i); }
    std::size_t size() const noexcept { return layers_.size(); }

    std::size_t index_of(std::string_view id) const
    {
        auto it = index_.find(std::string(id));
        if (it == index_.end())
            throw ContractViolation("no layer named '" + std::string(id) + "'");
        return it->second;
    }
    bool has_layer(std::string_view id) const { return index_.contains(std::string(id)); }

    const std::map<std::string, Tensor>& tensors() const noexcept { return tensors_; }
    const Tensor& tensor(const std::string& name) const { return tensors_.at(name); }

    // Quantizable (conv2d / dense) layer ids in topological order: l = 1..L.
    const std::vector<std::string>& quantizable() const noexcept { return quantizable_; }
    std::size_t num_quantizable() const noexcept { return quantizable_.size(); }

    const Shape& output_shape(std::size_t i) const { return out_shapes_.at(i); }
    const Shape& input_shape() const { return layers_.front().input_shape; }
    std::size_t num_classes() const { return out_shapes_.back().back(); }

    const std::vector<std::size_t>& input_indices(std::size_t i) const { return in_idx_.at(i); }
    // Highest index consuming layer i's output; size() for the output layer.
    std::size_t last_use(std::size_t i) const { return last_use_.at(i); }

    // Layer whose output carries the activations of quantizable layer q: the
    // end of the single-consumer batchnorm/relu chain following q.
    std::size_t activation_site(std::size_t q) const { return act_site_.at(q); }
    std::size_t activation_elements(const std::string& q) const
    {
        return element_count(output_shape(activation_site(index_of(q))));
    }

    // New model differing only in tensor data and armed activation hooks.
    ModelGraph with_tensors(std::map<std::string, Tensor> tensors) const
    {
        ModelGraph g = *this;
        for (auto& [name, t] : tensors) {
            auto it = g.tensors_.find(name);
            if (it == g.tensors_.end() || it->second.shape() != t.shape())
                throw ContractViolation("with_tensors: tensor '" + name + "' not replaceable");
            it->second = std::move(t);
        }
        return g;
    }
    void arm_activation(std::size_t q, std::optional<FixedPointRepr> r) { layers_.at(q).activation_quant = r; }

    friend bool operator==(const ModelGraph& a, const ModelGraph& b)
    {
        if (a.tensors_ != b.tensors_ || a.layers_.size() != b.layers_.size())
            return false;
        for (std::size_t i = 0; i < a.layers_.size(); ++i)
            if (a.layers_[i].id != b.layers_[i].id || a.layers_[i].activation_quant != b.layers_[i].activation_quant)
                return false;
        return true;
    }

private:
    void infer_shapes();
    void resolve_activation_sites();

    std::vector<LayerSpec> layers_;
    std::map<std::string, Tensor> tensors_;
    std::unordered_map<std::string, std::size_t> index_;
    std::vector<std::string> quantizable_;
    std::vector<Shape> out_shapes_;
    std::vector<std::vector<std::size_t>> in_idx_;
    std::vector<std::vector<std::size_t>> consumers_;
    std::vector<std::size_t> last_use_;
    std::vector<std::size_t> act_site_;
};

// ---------------------------------------------------------------------------

namespace detail {

inline std::size_t conv_out(std::size_t in, std::size_t k, std::size_t s, Padding p)
{
    if (p == Padding::Same)
        return (in + s - 1) / s;
    return in < k ? 0 : (in - k) / s + 1;
}

// Leading padding for TensorFlow-style "same": the odd pixel goes at the end.
inline std::size_t pad_before(std::size_t in, std::size_t k, std::size_t s, Padding p)
{
    if (p == Padding::Valid)
        return 0;
    const std::size_t out = conv_out(in, k, s, p);
    const std::size_t needed = (out - 1) * s + k;
    return needed > in ? (needed - in) / 2 : 0;
}

} // namespace detail

inline ModelGraph ModelGraph::build(std::vector<LayerSpec> layers, std::map<std::string, Tensor> tensors)
{
    std::unordered_map<std::string, std::size_t> pos;
    for (std::size_t i = 0; i < layers.size(); ++i)
        if (!pos.emplace(layers[i].id, i).second)
            throw ManifestError("duplicate layer id '" + layers[i].id + "'");

    for (const auto& l : layers) {
        for (const auto& in : l.inputs)
            if (!pos.contains(in))
                throw DanglingReferenceError("layer '" + l.id + "' consumes unknown layer '" + in + "'");
        auto need = [&](const std::string& name, const char* what) {
            if (name.empty())
                throw ManifestError("layer '" + l.id + "' lacks " + what);
            if (!tensors.contains(name))
                throw DanglingReferenceError("layer '" + l.id + "' references missing tensor '" + name + "'");
        };
        if (is_quantizable(l.kind)) {
            need(l.weights, "a weight tensor");
            need(l.bias, "a bias tensor");
        }
        if (l.kind == LayerKind::BatchNorm) {
            need(l.gamma, "gamma");
            need(l.beta, "beta");
            need(l.mean, "a moving mean");
            need(l.variance, "a moving variance");
        }
    }

    // Kahn's algorithm; ties resolved by manifest order.
    const std::size_t n = layers.size();
    std::vector<std::size_t> indegree(n, 0);
    std::vector<std::vector<std::size_t>> succ(n);
    for (std::size_t i = 0; i < n; ++i)
        for (const auto& in : layers[i].inputs) {
            succ[pos[in]].push_back(i);
            ++indegree[i];
        }
    std::set<std::size_t> ready;
    for (std::size_t i = 0; i < n; ++i)
        if (indegree[i] == 0)
            ready.insert(i);
    std::vector<std::size_t> order;
    while (!ready.empty()) {
        const std::size_t i = *ready.begin();
        ready.erase(ready.begin());
        order.push_back(i);
        for (std::size_t s : succ[i])
            if (--indegree[s] == 0)
                ready.insert(s);
    }
    if (order.size() != n)
        throw CycleError("layer graph contains a cycle");

    ModelGraph g;
    g.tensors_ = std::move(tensors);
    for (std::size_t i : order)
        g.layers_.push_back(std::move(layers[i]));
    for (std::size_t i = 0; i < n; ++i)
        g.index_[g.layers_[i].id] = i;

    g.in_idx_.resize(n);
    g.consumers_.resize(n);
    for (std::size_t i = 0; i < n; ++i)
        for (const auto& in : g.layers_[i].inputs) {
            const std::size_t j = g.index_[in];
            g.in_idx_[i].push_back(j);
            g.consumers_[j].push_back(i);
        }

    std::size_t inputs = 0, outputs = 0;
    for (std::size_t i = 0; i < n; ++i) {
        const auto& l = g.layers_[i];
        if (l.kind == LayerKind::Input)
            ++inputs;
        if (g.consumers_[i].empty()) {
            ++outputs;
            if (l.kind != LayerKind::Softmax)
                throw ManifestError("graph output '" + l.id + "' is not a softmax layer");
        }
    }
    if (inputs != 1 || g.layers_.front().kind != LayerKind::Input)
        throw ManifestError("graph needs exactly one input layer");
    if (outputs != 1 || g.layers_.back().kind != LayerKind::Softmax)
        throw ManifestError("graph needs exactly one softmax output");

    g.last_use_.resize(n);
    for (std::size_t i = 0; i < n; ++i)
        g.last_use_[i] = g.consumers_[i].empty() ? n : *std::max_element(g.consumers_[i].begin(), g.consumers_[i].end());

    for (const auto& l : g.layers_)
        if (is_quantizable(l.kind))
            g.quantizable_.push_back(l.id);
    if (g.quantizable_.empty())
        throw ManifestError("graph has no conv2d or dense layer");

    g.infer_shapes();
    g.resolve_activation_sites();
    for (const auto& [name, t] : g.tensors_)
        if (!t.all_finite())
            throw ManifestError("tensor '" + name + "' holds non-finite values");
    return g;
}

inline void ModelGraph::infer_shapes()
{
    out_shapes_.assign(layers_.size(), {});
    for (std::size_t i = 0; i < layers_.size(); ++i) {
        const auto& l = layers_[i];
        const auto& ins = in_idx_[i];
        auto fail = [&](const std::string& what) -> void { throw ShapeError(l.id, what); };
        auto arity = [&](std::size_t lo, std::size_t hi) {
            if (ins.size() < lo || ins.size() > hi)
                fail("wrong number of inputs (" + std::to_string(ins.size()) + ")");
        };
        const Shape* x = ins.empty() ? nullptr : &out_shapes_[ins.front()];
        Shape out;
        switch (l.kind) {
        case LayerKind::Input:
            arity(0, 0);
            if (l.input_shape.empty() || element_count(l.input_shape) == 0)
                fail("input shape must be non-empty");
            out = l.input_shape;
            break;
        case LayerKind::Conv2d: {
            arity(1, 1);
            if (x->size() != 3)
                fail("conv2d expects [h, w, c] input, got " + to_string(*x));
            if (l.kernel_h == 0 || l.kernel_w == 0 || l.stride_h == 0 || l.stride_w == 0 || l.channels == 0)
                fail("conv2d kernel, stride and channels must be positive");
            const Shape want_w{l.kernel_h, l.kernel_w, (*x)[2], l.channels};
            if (tensors_.at(l.weights).shape() != want_w)
                fail("kernel shape " + to_string(tensors_.at(l.weights).shape()) + ", expected " + to_string(want_w));
            if (tensors_.at(l.bias).shape() != Shape{l.channels})
                fail("bias shape " + to_string(tensors_.at(l.bias).shape()));
            out = {detail::conv_out((*x)[0], l.kernel_h, l.stride_h, l.padding),
                   detail::conv_out((*x)[1], l.kernel_w, l.stride_w, l.padding), l.channels};
            break;
        }
        case LayerKind::Dense: {
            arity(1, 1);
            if (x->size() != 1)
                fail("dense expects a flat input, got " + to_string(*x));
            const Shape want_w{(*x)[0], l.units};
            if (l.units == 0 || tensors_.at(l.weights).shape() != want_w)
                fail("kernel shape " + to_string(tensors_.at(l.weights).shape()) + ", expected " + to_string(want_w));
            if (tensors_.at(l.bias).shape() != Shape{l.units})
                fail("bias shape " + to_string(tensors_.at(l.bias).shape()));
            out = {l.units};
            break;
        }
        case LayerKind::BatchNorm:
            arity(1, 1);
            for (const auto* name : {&l.gamma, &l.beta, &l.mean, &l.variance})
                if (tensors_.at(*name).shape() != Shape{x->back()})
                    fail("batchnorm vector '" + *name + "' does not match channel count");
            if (!(l.epsilon >= 0.0))
                fail("batchnorm epsilon must be >= 0");
            out = *x;
            break;
        case LayerKind::MaxPool:
        case LayerKind::AvgPool:
            arity(1, 1);
            if (x->size() != 3)
                fail("pooling expects [h, w, c] input");
            if (l.pool_h == 0 || l.pool_w == 0 || l.stride_h == 0 || l.stride_w == 0)
                fail("pool window and stride must be positive");
            out = {detail::conv_out((*x)[0], l.pool_h, l.stride_h, Padding::Valid),
                   detail::conv_out((*x)[1], l.pool_w, l.stride_w, Padding::Valid), (*x)[2]};
            break;
        case LayerKind::Relu:
        case LayerKind::Softmax:
            arity(1, 1);
            out = *x;
            break;
        case LayerKind::Flatten:
            arity(1, 1);
            out = {element_count(*x)};
            break;
        case LayerKind::Add:
            arity(2, SIZE_MAX);
            for (std::size_t j : ins)
                if (out_shapes_[j] != *x)
                    fail("add inputs differ in shape");
            out = *x;
            break;
        case LayerKind::Concat: {
            arity(2, SIZE_MAX);
            out = *x;
            out.back() = 0;
            for (std::size_t j : ins) {
                const Shape& s = out_shapes_[j];
                if (s.size() != x->size() || !std::equal(s.begin(), s.end() - 1, x->begin()))
                    fail("concat inputs differ outside the channel axis");
                out.back() += s.back();
            }
            break;
        }
        }
        if (element_count(out) == 0)
            fail("produces an empty output");
        out_shapes_[i] = std::move(out);
    }
}

inline void ModelGraph::resolve_activation_sites()
{
    act_site_.assign(layers_.size(), 0);
    for (std::size_t q = 0; q < layers_.size(); ++q) {
        if (!is_quantizable(layers_[q].kind))
            continue;
        std::size_t cur = q;
        while (consumers_[cur].size() == 1 && layers_[cur].kind != LayerKind::Relu) {
            const std::size_t next = consumers_[cur].front();
            const LayerKind k = layers_[next].kind;
            if (k != LayerKind::BatchNorm && k != LayerKind::Relu)
                break;
            cur = next;
        }
        act_site_[q] = cur;
    }
}

} // namespace fxq
