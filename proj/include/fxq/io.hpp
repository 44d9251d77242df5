// SPDX-License-Identifier: Apache-2.0
//
// On-disk formats.
//
// Model: JSON manifest plus a sidecar blob of little-endian float32. The
// manifest lists layers (id, kind, inputs, kind attributes, tensor names)
// and tensors (name, byte offset into the blob, shape).
//
// Dataset ("FXQD"): magic, u32 n, h, w, c, classes, then n*h*w*c float32
// pixels (NHWC) and n uint16 labels, all little-endian.
//
// Reference scores ("FXQR"): magic, u32 n, classes, then n*classes float32.

#pragma once

#include "fxq/errors.hpp"
#include "fxq/model.hpp"
#include "fxq/tensor.hpp"

#include <json.hpp>

#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

namespace fxq {

struct LabeledDataset
{
    Tensor images; // [n, h, w, c]
    std::vector<std::uint16_t> labels;
    std::size_t classes = 0;

    std::size_t size() const noexcept { return labels.size(); }

    // First k examples (all of them when k == 0 or k >= size()).
    LabeledDataset head(std::size_t k) const
    {
        if (k == 0 || k >= size())
            return *this;
        Shape s = images.shape();
        const std::size_t per = images.size() / s[0];
        s[0] = k;
        LabeledDataset d;
        d.images = Tensor(s, std::vector<double>(images.data().begin(), images.data().begin() + k * per));
        d.labels.assign(labels.begin(), labels.begin() + k);
        d.classes = classes;
        return d;
    }
};

namespace detail {

template <class T>
T from_le(const unsigned char* p)
{
    std::array<unsigned char, sizeof(T)> b;
    std::memcpy(b.data(), p, sizeof(T));
    if constexpr (std::endian::native == std::endian::big)
        std::reverse(b.begin(), b.end());
    return std::bit_cast<T>(b);
}

template <class T>
void put_le(std::vector<unsigned char>& out, T v)
{
    auto b = std::bit_cast<std::array<unsigned char, sizeof(T)>>(v);
    if constexpr (std::endian::native == std::endian::big)
        std::reverse(b.begin(), b.end());
    out.insert(out.end(), b.begin(), b.end());
}

inline std::vector<unsigned char> read_file(const std::filesystem::path& p)
{
    std::ifstream in(p, std::ios::binary);
    if (!in)
        throw IoError("cannot open '" + p.string() + "'");
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::filesystem::path& p, const void* data, std::size_t n)
{
    std::ofstream out(p, std::ios::binary | std::ios::trunc);
    if (!out)
        throw IoError("cannot write '" + p.string() + "'");
    out.write(static_cast<const char*>(data), static_cast<std::streamsize>(n));
    if (!out)
        throw IoError("short write to '" + p.string() + "'");
}

inline Shape shape_from_json(const nlohmann::json& j)
{
    Shape s;
    for (const auto& d : j) {
        if (!d.is_number_unsigned() || d.get<std::size_t>() == 0)
            throw ManifestError("shape dimensions must be positive integers");
        s.push_back(d.get<std::size_t>());
    }
    return s;
}

inline std::pair<std::size_t, std::size_t> pair_from_json(const nlohmann::json& l, const char* key,
                                                          std::size_t dflt)
{
    if (!l.contains(key))
        return {dflt, dflt};
    const auto& v = l.at(key);
    if (v.is_number_unsigned())
        return {v.get<std::size_t>(), v.get<std::size_t>()};
    if (v.is_array() && v.size() == 2)
        return {v[0].get<std::size_t>(), v[1].get<std::size_t>()};
    throw ManifestError(std::string("attribute '") + key + "' must be an integer or a pair");
}

inline LayerSpec layer_from_json(const nlohmann::json& l)
{
    LayerSpec s;
    s.id = l.at("id").get<std::string>();
    const auto kind_name = l.at("kind").get<std::string>();
    const auto kind = parse_layer_kind(kind_name);
    if (!kind)
        throw UnsupportedLayerError("layer '" + s.id + "' has unsupported kind '" + kind_name + "'");
    s.kind = *kind;
    if (l.contains("inputs"))
        s.inputs = l.at("inputs").get<std::vector<std::string>>();
    switch (s.kind) {
    case LayerKind::Input: s.input_shape = shape_from_json(l.at("shape")); break;
    case LayerKind::Conv2d: {
        std::tie(s.kernel_h, s.kernel_w) = pair_from_json(l, "kernel", 0);
        std::tie(s.stride_h, s.stride_w) = pair_from_json(l, "strides", 1);
        s.channels = l.at("channels").get<std::size_t>();
        const auto pad = l.value("padding", std::string("valid"));
        if (pad != "same" && pad != "valid")
            throw ManifestError("layer '" + s.id + "': padding must be 'same' or 'valid'");
        s.padding = pad == "same" ? Padding::Same : Padding::Valid;
        s.weights = l.at("weights").get<std::string>();
        s.bias = l.at("bias").get<std::string>();
        break;
    }
    case LayerKind::Dense:
        s.units = l.at("units").get<std::size_t>();
        s.weights = l.at("weights").get<std::string>();
        s.bias = l.at("bias").get<std::string>();
        break;
    case LayerKind::BatchNorm:
        s.epsilon = l.value("epsilon", 1e-3);
        s.gamma = l.at("gamma").get<std::string>();
        s.beta = l.at("beta").get<std::string>();
        s.mean = l.at("mean").get<std::string>();
        s.variance = l.at("variance").get<std::string>();
        break;
    case LayerKind::MaxPool:
    case LayerKind::AvgPool:
        std::tie(s.pool_h, s.pool_w) = pair_from_json(l, "pool", 2);
        if (l.contains("strides"))
            std::tie(s.stride_h, s.stride_w) = pair_from_json(l, "strides", 1);
        else
            std::tie(s.stride_h, s.stride_w) = std::pair{s.pool_h, s.pool_w};
        break;
    default: break;
    }
    if (l.contains("activation_quant")) {
        const auto& a = l.at("activation_quant");
        s.activation_quant = FixedPointRepr{a.at("bw").get<int>(), a.at("f").get<int>()};
        if (!s.activation_quant->valid())
            throw ManifestError("layer '" + s.id + "': invalid activation_quant");
    }
    return s;
}

inline nlohmann::json layer_to_json(const LayerSpec& s)
{
    nlohmann::json l{{"id", s.id}, {"kind", to_string(s.kind)}};
    if (!s.inputs.empty())
        l["inputs"] = s.inputs;
    switch (s.kind) {
    case LayerKind::Input: l["shape"] = s.input_shape; break;
    case LayerKind::Conv2d:
        l["kernel"] = {s.kernel_h, s.kernel_w};
        l["channels"] = s.channels;
        l["strides"] = {s.stride_h, s.stride_w};
        l["padding"] = s.padding == Padding::Same ? "same" : "valid";
        l["weights"] = s.weights;
        l["bias"] = s.bias;
        break;
    case LayerKind::Dense:
        l["units"] = s.units;
        l["weights"] = s.weights;
        l["bias"] = s.bias;
        break;
    case LayerKind::BatchNorm:
        l["epsilon"] = s.epsilon;
        l["gamma"] = s.gamma;
        l["beta"] = s.beta;
        l["mean"] = s.mean;
        l["variance"] = s.variance;
        break;
    case LayerKind::MaxPool:
    case LayerKind::AvgPool:
        l["pool"] = {s.pool_h, s.pool_w};
        l["strides"] = {s.stride_h, s.stride_w};
        break;
    default: break;
    }
    if (s.activation_quant)
        l["activation_quant"] = {{"bw", s.activation_quant->bw}, {"f", s.activation_quant->f}};
    return l;
}

} // namespace detail

inline ModelGraph load_model(const std::filesystem::path& manifest_path)
{
    const auto text = detail::read_file(manifest_path);
    nlohmann::json m;
    try {
        m = nlohmann::json::parse(text.begin(), text.end());
    } catch (const nlohmann::json::exception& e) {
        throw ManifestError("manifest '" + manifest_path.string() + "' is not valid JSON: " + e.what());
    }

    std::vector<LayerSpec> layers;
    std::map<std::string, Tensor> tensors;
    try {
        if (!m.is_object() || !m.contains("layers") || !m.contains("tensors") || !m.contains("blob"))
            throw ManifestError("manifest needs 'layers', 'tensors' and 'blob'");
        for (const auto& l : m.at("layers"))
            layers.push_back(detail::layer_from_json(l));

        const auto blob_path = manifest_path.parent_path() / m.at("blob").get<std::string>();
        if (!std::filesystem::exists(blob_path))
            throw DanglingReferenceError("manifest references missing blob '" + blob_path.string() + "'");
        const auto blob = detail::read_file(blob_path);

        for (const auto& t : m.at("tensors")) {
            const auto name = t.at("name").get<std::string>();
            const auto offset = t.at("offset").get<std::size_t>();
            Shape shape = detail::shape_from_json(t.at("shape"));
            const std::size_t count = element_count(shape);
            if (offset % 4 != 0)
                throw ManifestError("tensor '" + name + "' offset is not float32-aligned");
            if (offset > blob.size() || count > (blob.size() - offset) / 4)
                throw DanglingReferenceError("tensor '" + name + "' extends past the end of the blob");
            std::vector<double> data(count);
            for (std::size_t i = 0; i < count; ++i)
                data[i] = detail::from_le<float>(blob.data() + offset + 4 * i);
            if (!tensors.emplace(name, Tensor(std::move(shape), std::move(data))).second)
                throw ManifestError("duplicate tensor '" + name + "'");
        }
    } catch (const nlohmann::json::exception& e) {
        throw ManifestError("malformed manifest '" + manifest_path.string() + "': " + e.what());
    }

    ModelGraph g = ModelGraph::build(std::move(layers), std::move(tensors));
    return g;
}

// Writes <stem>.json and <stem>.bin next to each other. Tensor values are
// narrowed to float32; quantized values with bw <= 24 survive exactly.
inline void save_model(const ModelGraph& g, const std::filesystem::path& manifest_path)
{
    auto blob_path = manifest_path;
    blob_path.replace_extension(".bin");
    std::vector<unsigned char> blob;
    auto tensors = nlohmann::json::array();
    for (const auto& [name, t] : g.tensors()) {
        tensors.push_back({{"name", name}, {"offset", blob.size()}, {"shape", t.shape()}});
        for (double v : t.data())
            detail::put_le<float>(blob, static_cast<float>(v));
    }
    auto layers = nlohmann::json::array();
    for (const auto& l : g.layers())
        layers.push_back(detail::layer_to_json(l));
    const nlohmann::json m{{"format", "fxq-model"},
                           {"version", 1},
                           {"blob", blob_path.filename().string()},
                           {"layers", layers},
                           {"tensors", tensors}};
    const auto text = m.dump(1) + "\n";
    detail::write_file(blob_path, blob.data(), blob.size());
    detail::write_file(manifest_path, text.data(), text.size());
}

inline LabeledDataset load_dataset(const std::filesystem::path& path)
{
    const auto bytes = detail::read_file(path);
    constexpr std::size_t header = 4 + 5 * 4;
    if (bytes.size() < header || std::memcmp(bytes.data(), "FXQD", 4) != 0)
        throw DatasetError("'" + path.string() + "' is not an FXQD dataset");
    std::array<std::uint32_t, 5> h{};
    for (std::size_t i = 0; i < h.size(); ++i)
        h[i] = detail::from_le<std::uint32_t>(bytes.data() + 4 + 4 * i);
    const auto [n, height, width, channels, classes] = h;
    if (n == 0)
        throw DatasetError("dataset holds no records");
    if (height == 0 || width == 0 || channels == 0 || classes == 0)
        throw DatasetError("dataset header has a zero dimension");
    const std::size_t pixels = std::size_t{n} * height * width * channels;
    if (bytes.size() != header + 4 * pixels + 2 * std::size_t{n})
        throw DatasetError("dataset payload length does not match its header");

    LabeledDataset d;
    d.classes = classes;
    std::vector<double> img(pixels);
    const unsigned char* p = bytes.data() + header;
    for (std::size_t i = 0; i < pixels; ++i)
        img[i] = detail::from_le<float>(p + 4 * i);
    d.images = Tensor({n, height, width, channels}, std::move(img));
    if (!d.images.all_finite())
        throw DatasetError("dataset holds non-finite pixels");
    p += 4 * pixels;
    d.labels.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        d.labels[i] = detail::from_le<std::uint16_t>(p + 2 * i);
        if (d.labels[i] >= classes)
            throw DatasetError("label " + std::to_string(d.labels[i]) + " of record " + std::to_string(i) +
                               " is out of range");
    }
    return d;
}

inline void save_dataset(const LabeledDataset& d, const std::filesystem::path& path)
{
    if (d.images.rank() != 4 || d.images.dim(0) != d.labels.size())
        throw ContractViolation("save_dataset: images must be [n, h, w, c] with n labels");
    std::vector<unsigned char> out{'F', 'X', 'Q', 'D'};
    for (std::size_t i = 0; i < 4; ++i)
        detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(d.images.dim(i)));
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(d.classes));
    for (double v : d.images.data())
        detail::put_le<float>(out, static_cast<float>(v));
    for (auto l : d.labels)
        detail::put_le<std::uint16_t>(out, l);
    detail::write_file(path, out.data(), out.size());
}

inline Tensor load_reference_scores(const std::filesystem::path& path)
{
    const auto bytes = detail::read_file(path);
    if (bytes.size() < 12 || std::memcmp(bytes.data(), "FXQR", 4) != 0)
        throw IoError("'" + path.string() + "' is not an FXQR reference file");
    const auto n = detail::from_le<std::uint32_t>(bytes.data() + 4);
    const auto c = detail::from_le<std::uint32_t>(bytes.data() + 8);
    if (bytes.size() != 12 + 4 * std::size_t{n} * c)
        throw IoError("reference payload length does not match its header");
    std::vector<double> v(std::size_t{n} * c);
    for (std::size_t i = 0; i < v.size(); ++i)
        v[i] = detail::from_le<float>(bytes.data() + 12 + 4 * i);
    return Tensor({n, c}, std::move(v));
}

} // namespace fxq
