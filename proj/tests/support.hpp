// SPDX-License-Identifier: Apache-2.0
//
// Shared fixtures and small synthetic models for the test suites.

#pragma once

#include "fxq/fxq.hpp"

#include <filesystem>
#include <random>
#include <string>

namespace fxq::test {

inline std::filesystem::path fixture(const std::string& name)
{
    return std::filesystem::path(FXQ_FIXTURE_DIR) / name;
}

inline const ModelGraph& seq15()
{
    static const ModelGraph g = load_model(fixture("seq15.json"));
    return g;
}

inline const ModelGraph& branch()
{
    static const ModelGraph g = load_model(fixture("branch.json"));
    return g;
}

inline const LabeledDataset& digits()
{
    static const LabeledDataset d = load_dataset(fixture("digits_test.fxqd"));
    return d;
}

inline std::filesystem::path scratch_dir(const std::string& name)
{
    auto p = std::filesystem::temp_directory_path() / ("fxq_test_" + name);
    std::filesystem::remove_all(p);
    std::filesystem::create_directories(p);
    return p;
}

inline Tensor random_tensor(Shape s, std::mt19937& rng, double scale)
{
    std::normal_distribution<double> nd(0.0, scale);
    Tensor t(std::move(s));
    for (double& v : t.storage())
        v = nd(rng);
    return t;
}

inline LayerSpec make_layer(std::string id, LayerKind kind, std::vector<std::string> inputs)
{
    LayerSpec l;
    l.id = std::move(id);
    l.kind = kind;
    l.inputs = std::move(inputs);
    return l;
}

// input [6, 6, 1] -> conv 3x3 (2) -> relu -> flatten -> dense (3) -> softmax
inline ModelGraph toy_model(unsigned seed = 1, double bias_scale = 0.1)
{
    std::mt19937 rng(seed);
    std::vector<LayerSpec> layers;
    auto in = make_layer("input", LayerKind::Input, {});
    in.input_shape = {6, 6, 1};
    layers.push_back(in);
    auto conv = make_layer("conv", LayerKind::Conv2d, {"input"});
    conv.kernel_h = conv.kernel_w = 3;
    conv.channels = 2;
    conv.padding = Padding::Same;
    conv.weights = "conv/w";
    conv.bias = "conv/b";
    layers.push_back(conv);
    layers.push_back(make_layer("relu", LayerKind::Relu, {"conv"}));
    layers.push_back(make_layer("flatten", LayerKind::Flatten, {"relu"}));
    auto dense = make_layer("dense", LayerKind::Dense, {"flatten"});
    dense.units = 3;
    dense.weights = "dense/w";
    dense.bias = "dense/b";
    layers.push_back(dense);
    layers.push_back(make_layer("softmax", LayerKind::Softmax, {"dense"}));

    std::map<std::string, Tensor> t;
    t.emplace("conv/w", random_tensor({3, 3, 1, 2}, rng, 0.5));
    t.emplace("conv/b", random_tensor({2}, rng, bias_scale));
    t.emplace("dense/w", random_tensor({72, 3}, rng, 0.3));
    t.emplace("dense/b", random_tensor({3}, rng, bias_scale));
    return ModelGraph::build(std::move(layers), std::move(t));
}

// Random images labelled by the toy model itself, with every fifth label
// shifted so that a0 < 1.
inline LabeledDataset toy_dataset(const ModelGraph& g, std::size_t n, unsigned seed = 2)
{
    std::mt19937 rng(seed);
    LabeledDataset d;
    d.classes = g.num_classes();
    d.images = random_tensor({n, 6, 6, 1}, rng, 1.0);
    const Tensor scores = forward(g, d.images);
    for (std::size_t i = 0; i < n; ++i) {
        std::size_t best = 0;
        for (std::size_t c = 1; c < d.classes; ++c)
            if (scores.data()[i * d.classes + c] > scores.data()[i * d.classes + best])
                best = c;
        if (i % 5 == 4)
            best = (best + 1) % d.classes;
        d.labels.push_back(static_cast<std::uint16_t>(best));
    }
    return d;
}

} // namespace fxq::test
