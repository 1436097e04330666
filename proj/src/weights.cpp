#include "mtlab/weights.hpp"

#include <filesystem>
#include <fstream>
#include <random>

#include <json.hpp>

#include "mtlab/error.hpp"

namespace mtlab {

namespace {

constexpr int kFormatVersion = 1;

struct TensorRef {
    std::string name;
    std::vector<std::size_t> shape;
    std::vector<float>* data;
};

std::vector<TensorRef> tensor_table(Weights& w) {
    const auto& c = w.config;
    auto zu = [](int v) { return static_cast<std::size_t>(v); };
    std::vector<TensorRef> t;
    t.push_back({"tok_emb", {zu(c.vocab_size), zu(c.d_model)}, &w.tok_emb});
    t.push_back({"pos_emb", {zu(c.max_seq_len), zu(c.d_model)}, &w.pos_emb});
    for (int l = 0; l < c.n_layers; ++l) {
        auto& L = w.layers[l];
        std::string p = "layers." + std::to_string(l) + ".";
        t.push_back({p + "wq", {zu(c.d_model), zu(c.d_model)}, &L.wq});
        t.push_back({p + "wk", {zu(c.d_model), zu(c.d_model)}, &L.wk});
        t.push_back({p + "wv", {zu(c.d_model), zu(c.d_model)}, &L.wv});
        t.push_back({p + "wo", {zu(c.d_model), zu(c.d_model)}, &L.wo});
        t.push_back({p + "attn_gain", {zu(c.d_model)}, &L.attn_gain});
        t.push_back({p + "ffn_gain", {zu(c.d_model)}, &L.ffn_gain});
        t.push_back({p + "w_up", {zu(c.d_ff), zu(c.d_model)}, &L.w_up});
        t.push_back({p + "w_down", {zu(c.d_model), zu(c.d_ff)}, &L.w_down});
    }
    t.push_back({"final_gain", {zu(c.d_model)}, &w.final_gain});
    t.push_back({"unembed", {zu(c.vocab_size), zu(c.d_model)}, &w.unembed});
    return t;
}

std::size_t numel(const std::vector<std::size_t>& shape) {
    std::size_t n = 1;
    for (auto s : shape) n *= s;
    return n;
}

std::string blob_path_for(const std::string& manifest_path) {
    std::filesystem::path p(manifest_path);
    p.replace_extension(".bin");
    return p.string();
}

nlohmann::ordered_json config_to_json(const ModelConfig& c) {
    return nlohmann::ordered_json{{"n_layers", c.n_layers},   {"n_heads", c.n_heads},
                                  {"d_model", c.d_model},     {"d_ff", c.d_ff},
                                  {"vocab_size", c.vocab_size}, {"max_seq_len", c.max_seq_len},
                                  {"norm_eps", c.norm_eps}};
}

ModelConfig config_from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.n_layers = j.at("n_layers").get<int>();
    c.n_heads = j.at("n_heads").get<int>();
    c.d_model = j.at("d_model").get<int>();
    c.d_ff = j.at("d_ff").get<int>();
    c.vocab_size = j.at("vocab_size").get<int>();
    c.max_seq_len = j.at("max_seq_len").get<int>();
    c.norm_eps = j.at("norm_eps").get<double>();
    return c;
}

}  // namespace

Weights Weights::zeros(const ModelConfig& cfg) {
    cfg.validate();
    Weights w;
    w.config = cfg;
    w.layers.resize(cfg.n_layers);
    for (auto& ref : tensor_table(w)) ref.data->assign(numel(ref.shape), 0.0f);
    return w;
}

Weights Weights::random_init(const ModelConfig& cfg, std::uint64_t seed) {
    Weights w = zeros(cfg);
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> dist(0.0, 0.02);
    for (auto& ref : tensor_table(w)) {
        bool is_gain = ref.name.find("gain") != std::string::npos;
        for (auto& v : *ref.data) v = is_gain ? 1.0f : static_cast<float>(dist(rng));
    }
    return w;
}

void save_weights(const Weights& w, const std::string& manifest_path) {
    Weights& mut = const_cast<Weights&>(w);
    auto table = tensor_table(mut);

    nlohmann::ordered_json manifest;
    manifest["format_version"] = kFormatVersion;
    manifest["config"] = config_to_json(w.config);
    nlohmann::ordered_json tensors = nlohmann::ordered_json::array();
    std::size_t offset = 0;
    for (const auto& ref : table) {
        if (ref.data->size() != numel(ref.shape))
            throw numeric_error("save_weights: tensor " + ref.name + " has wrong element count");
        tensors.push_back(nlohmann::ordered_json{
            {"name", ref.name},
            {"shape", ref.shape},
            {"offset", offset},
        });
        offset += ref.data->size();
    }
    manifest["tensors"] = tensors;

    std::ofstream mf(manifest_path);
    if (!mf) throw config_error("save_weights: cannot open " + manifest_path);
    mf << manifest.dump(2) << "\n";

    std::ofstream bf(blob_path_for(manifest_path), std::ios::binary);
    if (!bf) throw config_error("save_weights: cannot open " + blob_path_for(manifest_path));
    for (const auto& ref : table)
        bf.write(reinterpret_cast<const char*>(ref.data->data()),
                 static_cast<std::streamsize>(ref.data->size() * sizeof(float)));
}

Weights load_weights(const std::string& manifest_path) {
    std::ifstream mf(manifest_path);
    if (!mf) throw dependency_error("load_weights: missing manifest " + manifest_path);
    nlohmann::json manifest;
    try {
        mf >> manifest;
    } catch (const nlohmann::json::exception& e) {
        throw config_error("load_weights: bad manifest JSON: " + std::string(e.what()));
    }
    if (manifest.value("format_version", -1) != kFormatVersion)
        throw config_error("load_weights: unsupported format_version");

    ModelConfig cfg = config_from_json(manifest.at("config"));
    Weights w = Weights::zeros(cfg);
    auto table = tensor_table(w);

    const auto& tensors = manifest.at("tensors");
    if (tensors.size() != table.size())
        throw config_error("load_weights: manifest lists wrong tensor count");

    std::ifstream bf(blob_path_for(manifest_path), std::ios::binary);
    if (!bf) throw dependency_error("load_weights: missing blob " + blob_path_for(manifest_path));
    bf.seekg(0, std::ios::end);
    std::size_t blob_floats = static_cast<std::size_t>(bf.tellg()) / sizeof(float);

    for (std::size_t i = 0; i < table.size(); ++i) {
        const auto& desc = tensors[i];
        auto& ref = table[i];
        if (desc.at("name").get<std::string>() != ref.name)
            throw config_error("load_weights: tensor order mismatch at " + ref.name);
        std::vector<std::size_t> shape = desc.at("shape").get<std::vector<std::size_t>>();
        if (shape != ref.shape)
            throw config_error("load_weights: shape mismatch for " + ref.name);
        std::size_t offset = desc.at("offset").get<std::size_t>();
        std::size_t count = numel(shape);
        if (offset + count > blob_floats)
            throw config_error("load_weights: blob truncated at tensor " + ref.name);
        bf.seekg(static_cast<std::streamoff>(offset * sizeof(float)));
        bf.read(reinterpret_cast<char*>(ref.data->data()),
                static_cast<std::streamsize>(count * sizeof(float)));
        if (!bf) throw config_error("load_weights: read failed for " + ref.name);
    }
    return w;
}

}  // namespace mtlab
