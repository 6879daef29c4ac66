#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "mdtbox/errors.hpp"
#include "mdtbox/rng.hpp"

namespace mdtbox {

struct TensorInfo {
    std::string name;
    std::vector<int> shape;
    size_t offset = 0;
    size_t size = 0;
};

// Flat named-tensor registry backing model weights and their gradients.
// Registration order is fixed, so seeded initialization, Adam state, EMA and
// checkpoints all share one layout.
class ParamStore {
public:
    int add(const std::string& name, std::vector<int> shape);
    void finalize(); // allocates values and grads; no adds afterwards

    size_t total_size() const { return total_; }
    bool finalized() const { return finalized_; }

    const TensorInfo& info(int id) const { return tensors_[static_cast<size_t>(id)]; }
    const std::vector<TensorInfo>& tensors() const { return tensors_; }
    int find(const std::string& name) const;

    double* val(int id) { return values_.data() + tensors_[static_cast<size_t>(id)].offset; }
    const double* val(int id) const {
        return values_.data() + tensors_[static_cast<size_t>(id)].offset;
    }
    double* grad(int id) { return grads_.data() + tensors_[static_cast<size_t>(id)].offset; }
    const double* grad(int id) const {
        return grads_.data() + tensors_[static_cast<size_t>(id)].offset;
    }
    size_t size(int id) const { return tensors_[static_cast<size_t>(id)].size; }

    std::vector<double>& values() { return values_; }
    const std::vector<double>& values() const { return values_; }
    std::vector<double>& grads() { return grads_; }
    const std::vector<double>& grads() const { return grads_; }

    void zero_grads();

    // Initializers; all deterministic in the rng stream.
    void init_zero(int id);
    void init_normal(int id, Rng& rng, double std);
    void init_xavier_uniform(int id, Rng& rng); // fan per trailing/leading dims

private:
    std::vector<TensorInfo> tensors_;
    std::unordered_map<std::string, int> index_;
    std::vector<double> values_, grads_;
    size_t total_ = 0;
    bool finalized_ = false;
};

// Binary named-tensor container: magic + JSON header + little-endian f64
// payload. Used for codec and training checkpoints. Writes go through a
// temp file and rename, so readers never observe a partial file.
struct TensorFileEntry {
    TensorInfo info;
    std::vector<double> data;
};

struct TensorFile {
    nlohmann::json meta;
    std::vector<TensorFileEntry> entries;

    const TensorFileEntry* find(const std::string& name) const;
    const TensorFileEntry& require(const std::string& name) const;
};

void write_tensor_file(const std::filesystem::path& path, const nlohmann::json& meta,
                       const std::vector<std::pair<TensorInfo, std::span<const double>>>& tensors);
TensorFile read_tensor_file(const std::filesystem::path& path);

} // namespace mdtbox
