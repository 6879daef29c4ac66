#include "mdtbox/params.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>

namespace mdtbox {

using nlohmann::json;

int ParamStore::add(const std::string& name, std::vector<int> shape) {
    if (finalized_) throw ConfigError("ParamStore already finalized, cannot add " + name);
    if (index_.count(name)) throw ConfigError("duplicate tensor name " + name);
    size_t sz = 1;
    for (int d : shape) {
        if (d <= 0) throw ShapeError("non-positive dim in tensor " + name);
        sz *= static_cast<size_t>(d);
    }
    TensorInfo t{name, std::move(shape), total_, sz};
    total_ += sz;
    index_[name] = static_cast<int>(tensors_.size());
    tensors_.push_back(std::move(t));
    return static_cast<int>(tensors_.size()) - 1;
}

void ParamStore::finalize() {
    values_.assign(total_, 0.0);
    grads_.assign(total_, 0.0);
    finalized_ = true;
}

int ParamStore::find(const std::string& name) const {
    auto it = index_.find(name);
    return it == index_.end() ? -1 : it->second;
}

void ParamStore::zero_grads() { std::fill(grads_.begin(), grads_.end(), 0.0); }

void ParamStore::init_zero(int id) {
    std::fill(val(id), val(id) + size(id), 0.0);
}

void ParamStore::init_normal(int id, Rng& rng, double std) {
    double* p = val(id);
    for (size_t i = 0; i < size(id); ++i) p[i] = rng.gaussian() * std;
}

void ParamStore::init_xavier_uniform(int id, Rng& rng) {
    const auto& shape = info(id).shape;
    // weights are [out, in...]: fan_out = shape[0], fan_in = rest
    size_t fan_in = 1;
    for (size_t i = 1; i < shape.size(); ++i) fan_in *= static_cast<size_t>(shape[i]);
    size_t fan_out = static_cast<size_t>(shape[0]);
    if (shape.size() == 1) fan_in = fan_out; // vectors: symmetric bound
    double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    double* p = val(id);
    for (size_t i = 0; i < size(id); ++i) p[i] = rng.uniform(-a, a);
}

const TensorFileEntry* TensorFile::find(const std::string& name) const {
    for (const auto& e : entries)
        if (e.info.name == name) return &e;
    return nullptr;
}

const TensorFileEntry& TensorFile::require(const std::string& name) const {
    const TensorFileEntry* e = find(name);
    if (!e) throw DataError("checkpoint is missing tensor " + name);
    return *e;
}

namespace {
constexpr char kMagic[8] = {'M', 'D', 'T', 'B', 'O', 'X', 'T', 'F'};
constexpr uint32_t kVersion = 1;
} // namespace

void write_tensor_file(const std::filesystem::path& path, const json& meta,
                       const std::vector<std::pair<TensorInfo, std::span<const double>>>& tensors) {
    json header;
    header["meta"] = meta;
    header["tensors"] = json::array();
    size_t offset = 0;
    for (const auto& [info, data] : tensors) {
        if (info.size != data.size())
            throw ShapeError("tensor size mismatch writing " + info.name);
        header["tensors"].push_back(
            json{{"name", info.name}, {"shape", info.shape}, {"offset", offset}, {"size", info.size}});
        offset += info.size;
    }
    std::string htext = header.dump();

    std::filesystem::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot open " + tmp.string() + " for writing");
        out.write(kMagic, sizeof(kMagic));
        uint32_t v = kVersion;
        uint64_t hlen = htext.size();
        out.write(reinterpret_cast<const char*>(&v), sizeof(v));
        out.write(reinterpret_cast<const char*>(&hlen), sizeof(hlen));
        out.write(htext.data(), static_cast<std::streamsize>(htext.size()));
        for (const auto& [info, data] : tensors)
            out.write(reinterpret_cast<const char*>(data.data()),
                      static_cast<std::streamsize>(data.size() * sizeof(double)));
        if (!out) throw IoError("short write to " + tmp.string());
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) throw IoError("cannot rename " + tmp.string() + " to " + path.string());
}

TensorFile read_tensor_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open checkpoint " + path.string());
    char magic[8];
    uint32_t v = 0;
    uint64_t hlen = 0;
    in.read(magic, sizeof(magic));
    in.read(reinterpret_cast<char*>(&v), sizeof(v));
    in.read(reinterpret_cast<char*>(&hlen), sizeof(hlen));
    if (!in || std::memcmp(magic, kMagic, sizeof(magic)) != 0)
        throw DataError("not a tensor container: " + path.string());
    if (v != kVersion) throw DataError("unsupported container version in " + path.string());
    std::string htext(hlen, '\0');
    in.read(htext.data(), static_cast<std::streamsize>(hlen));
    if (!in) throw DataError("truncated header in " + path.string());

    json header;
    try {
        header = json::parse(htext);
    } catch (const json::exception& e) {
        throw DataError("corrupt checkpoint header: " + std::string(e.what()));
    }
    TensorFile tf;
    tf.meta = header.value("meta", json::object());
    for (const auto& jt : header.at("tensors")) {
        TensorFileEntry e;
        e.info.name = jt.at("name").get<std::string>();
        e.info.shape = jt.at("shape").get<std::vector<int>>();
        e.info.offset = jt.at("offset").get<size_t>();
        e.info.size = jt.at("size").get<size_t>();
        e.data.resize(e.info.size);
        tf.entries.push_back(std::move(e));
    }
    for (auto& e : tf.entries) {
        in.read(reinterpret_cast<char*>(e.data.data()),
                static_cast<std::streamsize>(e.data.size() * sizeof(double)));
        if (!in) throw DataError("truncated tensor payload in " + path.string());
    }
    return tf;
}

} // namespace mdtbox
