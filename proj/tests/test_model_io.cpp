// SPDX-License-Identifier: Apache-2.0

#include "support.hpp"

#include <gtest/gtest.h>

#include <fstream>

using namespace fxq;
using nlohmann::json;

namespace {

json read_json(const std::filesystem::path& p)
{
    std::ifstream in(p);
    return json::parse(in);
}

void write_json(const std::filesystem::path& p, const json& j)
{
    std::ofstream(p) << j.dump(1);
}

// A saved toy model whose manifest the test may edit before reloading.
struct EditableModel
{
    std::filesystem::path dir, manifest;
    json m;

    explicit EditableModel(const std::string& name) : dir(test::scratch_dir(name)), manifest(dir / "toy.json")
    {
        save_model(test::toy_model(), manifest);
        m = read_json(manifest);
    }

    ModelGraph reload()
    {
        write_json(manifest, m);
        return load_model(manifest);
    }

    json& layer(const std::string& id)
    {
        for (auto& l : m["layers"])
            if (l["id"] == id)
                return l;
        throw std::logic_error("no layer " + id);
    }
};

} // namespace

TEST(LoadModel, SequentialFixture)
{
    const auto& g = test::seq15();
    EXPECT_EQ(g.num_quantizable(), 15u);
    EXPECT_EQ(g.quantizable().front(), "conv1");
    EXPECT_EQ(g.quantizable()[13], "conv14");
    EXPECT_EQ(g.quantizable().back(), "dense");
    EXPECT_EQ(g.input_shape(), (Shape{28, 28, 1}));
    EXPECT_EQ(g.num_classes(), 10u);
    EXPECT_EQ(g.layer(0).kind, LayerKind::Input);
    EXPECT_EQ(g.layers().back().kind, LayerKind::Softmax);
}

TEST(LoadModel, TopologicalOrder)
{
    for (const ModelGraph* g : {&test::seq15(), &test::branch()})
        for (std::size_t i = 0; i < g->size(); ++i)
            for (const auto& in : g->layer(i).inputs)
                EXPECT_LT(g->index_of(in), i) << g->layer(i).id;
}

TEST(LoadModel, BranchedFixture)
{
    const auto& g = test::branch();
    bool has_concat = false, has_add = false;
    for (const auto& l : g.layers()) {
        has_concat |= l.kind == LayerKind::Concat;
        has_add |= l.kind == LayerKind::Add;
    }
    EXPECT_TRUE(has_concat);
    EXPECT_TRUE(has_add);
    EXPECT_EQ(g.num_quantizable(), 6u);
}

TEST(LoadModel, ActivationSites)
{
    const auto& g = test::seq15();
    EXPECT_EQ(g.layer(g.activation_site(g.index_of("conv1"))).id, "conv1_relu");
    EXPECT_EQ(g.layer(g.activation_site(g.index_of("dense"))).id, "dense");
    EXPECT_EQ(g.activation_elements("conv1"), 14u * 14u * 8u);
    EXPECT_EQ(g.activation_elements("dense"), 10u);
}

TEST(LoadModel, MinimalGraph)
{
    // conv -> relu -> flatten -> dense -> softmax
    EditableModel e("minimal");
    EXPECT_EQ(e.reload().num_quantizable(), 2u);
}

TEST(LoadModel, MissingManifest)
{
    EXPECT_THROW(load_model(test::scratch_dir("missing") / "nope.json"), IoError);
}

TEST(LoadModel, MalformedManifest)
{
    const auto dir = test::scratch_dir("malformed");
    std::ofstream(dir / "bad.json") << "{ \"layers\": [";
    EXPECT_THROW(load_model(dir / "bad.json"), ManifestError);
    write_json(dir / "bad.json", json{{"layers", json::array()}});
    EXPECT_THROW(load_model(dir / "bad.json"), ManifestError);
}

TEST(LoadModel, MissingBlob)
{
    EditableModel e("missing_blob");
    e.m["blob"] = "absent.bin";
    EXPECT_THROW(e.reload(), DanglingReferenceError);
}

TEST(LoadModel, TensorPastBlobEnd)
{
    EditableModel e("past_end");
    e.m["tensors"][0]["offset"] = 1 << 20;
    EXPECT_THROW(e.reload(), DanglingReferenceError);
}

TEST(LoadModel, DanglingTensorReference)
{
    EditableModel e("dangling_tensor");
    e.layer("conv")["weights"] = "nowhere";
    EXPECT_THROW(e.reload(), DanglingReferenceError);
}

TEST(LoadModel, DanglingLayerReference)
{
    EditableModel e("dangling_layer");
    e.layer("relu")["inputs"] = {"ghost"};
    EXPECT_THROW(e.reload(), DanglingReferenceError);
}

TEST(LoadModel, Cycle)
{
    EditableModel e("cycle");
    e.layer("conv")["inputs"] = {"input", "relu"};
    EXPECT_THROW(e.reload(), CycleError);
}

TEST(LoadModel, UnsupportedKind)
{
    EditableModel e("unsupported");
    e.layer("relu")["kind"] = "lstm";
    EXPECT_THROW(e.reload(), UnsupportedLayerError);
}

TEST(LoadModel, DuplicateLayer)
{
    EditableModel e("duplicate");
    e.layer("relu")["id"] = "conv";
    EXPECT_THROW(e.reload(), ManifestError);
}

TEST(LoadModel, ShapeErrorNamesLayer)
{
    EditableModel e("shape");
    e.layer("dense")["units"] = 4; // bias and kernel hold 3
    try {
        e.reload();
        FAIL() << "expected ShapeError";
    } catch (const ShapeError& err) {
        EXPECT_EQ(err.layer, "dense");
    }
}

TEST(SaveModel, RoundTripIsBitIdentical)
{
    const auto dir = test::scratch_dir("roundtrip");
    save_model(test::seq15(), dir / "copy.json");
    const auto back = load_model(dir / "copy.json");
    EXPECT_TRUE(back == test::seq15());
    for (const auto& [name, t] : test::seq15().tensors())
        EXPECT_EQ(back.tensor(name).data().size(), t.data().size());
}

TEST(SaveModel, PlanAppliedModelKeepsHooks)
{
    const auto& g = test::seq15();
    QuantizationPlan plan;
    plan.set("conv3", ParamKind::Weights, {5, 6});
    plan.set("conv3", ParamKind::Activations, {6, 3});
    const auto q = apply_plan(g, plan);
    const auto dir = test::scratch_dir("roundtrip_plan");
    save_model(q, dir / "q.json");
    const auto back = load_model(dir / "q.json");
    EXPECT_TRUE(back == q);
    EXPECT_EQ(back.layer(back.index_of("conv3")).activation_quant, (FixedPointRepr{6, 3}));
}

TEST(LoadDataset, Fixture)
{
    const auto& d = test::digits();
    EXPECT_EQ(d.size(), 1000u);
    EXPECT_EQ(d.images.shape(), (Shape{1000, 28, 28, 1}));
    EXPECT_EQ(d.classes, 10u);
}

namespace {

std::vector<unsigned char> read_bytes(const std::filesystem::path& p) { return detail::read_file(p); }

void write_bytes(const std::filesystem::path& p, const std::vector<unsigned char>& b)
{
    detail::write_file(p, b.data(), b.size());
}

LabeledDataset tiny_dataset()
{
    LabeledDataset d;
    d.classes = 3;
    d.images = Tensor({2, 2, 2, 1}, {0.5, -1, 2, 0, 0.25, 1, -3, 4});
    d.labels = {2, 0};
    return d;
}

} // namespace

TEST(LoadDataset, RoundTrip)
{
    const auto dir = test::scratch_dir("dataset");
    const auto d = tiny_dataset();
    save_dataset(d, dir / "d.fxqd");
    const auto back = load_dataset(dir / "d.fxqd");
    EXPECT_EQ(back.images, d.images);
    EXPECT_EQ(back.labels, d.labels);
    EXPECT_EQ(back.classes, 3u);
    EXPECT_EQ(read_bytes(dir / "d.fxqd").size(), 24u + 8u * 4u + 2u * 2u);
}

TEST(LoadDataset, ZeroRecords)
{
    const auto dir = test::scratch_dir("dataset_empty");
    std::vector<unsigned char> b{'F', 'X', 'Q', 'D'};
    for (std::uint32_t v : {0u, 2u, 2u, 1u, 3u})
        detail::put_le<std::uint32_t>(b, v);
    write_bytes(dir / "e.fxqd", b);
    EXPECT_THROW(load_dataset(dir / "e.fxqd"), DatasetError);
}

TEST(LoadDataset, LabelOutOfRange)
{
    const auto dir = test::scratch_dir("dataset_label");
    auto d = tiny_dataset();
    d.labels[1] = 3; // == classes
    save_dataset(d, dir / "d.fxqd");
    EXPECT_THROW(load_dataset(dir / "d.fxqd"), DatasetError);
}

TEST(LoadDataset, LengthMismatch)
{
    const auto dir = test::scratch_dir("dataset_len");
    save_dataset(tiny_dataset(), dir / "d.fxqd");
    auto b = read_bytes(dir / "d.fxqd");
    b.pop_back();
    write_bytes(dir / "d.fxqd", b);
    EXPECT_THROW(load_dataset(dir / "d.fxqd"), DatasetError);
    b = read_bytes(dir / "d.fxqd");
    b[0] = 'X';
    write_bytes(dir / "d.fxqd", b);
    EXPECT_THROW(load_dataset(dir / "d.fxqd"), DatasetError);
}

TEST(ReferenceScores, Fixture)
{
    const auto ref = load_reference_scores(test::fixture("seq15_ref.fxqr"));
    EXPECT_EQ(ref.shape(), (Shape{1000, 10}));
}
