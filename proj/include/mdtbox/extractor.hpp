#pragma once

#include <cstdint>
#include <vector>

#include "mdtbox/image.hpp"
#include "mdtbox/params.hpp"

namespace mdtbox {

// Embedded token sequence; CLS first when cls_first is set.
struct TokenSequence {
    int length = 0;
    int width = 0;
    bool cls_first = false;
    std::vector<double> data; // [length, width]

    double* row(int i) { return data.data() + static_cast<size_t>(i) * width; }
    const double* row(int i) const { return data.data() + static_cast<size_t>(i) * width; }
};

struct ExtractorConfig {
    int patch = 8;
    int width = 64;
    int depth = 2;
    int heads = 4;
    uint64_t seed = 2;
};

// Frozen toy vision transformer: patch embed + CLS + sinusoidal positions,
// `depth` pre-LN encoder blocks, final layernorm. Weights are drawn once from
// the seed and never change, so extraction is a pure function of the image.
class ExtractorModel {
public:
    explicit ExtractorModel(const ExtractorConfig& cfg);

    // 1 + (image.size/patch)^2 tokens, CLS first.
    TokenSequence extract_tokens(const ImageTensor& image) const;

    int token_count(int image_size) const {
        return 1 + (image_size / cfg_.patch) * (image_size / cfg_.patch);
    }
    const ExtractorConfig& config() const { return cfg_; }

private:
    ExtractorConfig cfg_;
    ParamStore params_;
    struct Ids {
        int embed_w, embed_b, cls;
        std::vector<int> qkv_w, qkv_b, proj_w, proj_b, fc1_w, fc1_b, fc2_w, fc2_b;
    } ids_;
};

} // namespace mdtbox
