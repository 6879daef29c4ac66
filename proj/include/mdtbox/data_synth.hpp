#pragma once

#include <array>
#include <filesystem>
#include <string>
#include <vector>

#include "mdtbox/image.hpp"
#include "mdtbox/rng.hpp"

namespace mdtbox {

struct SynthParams {
    int image_size = 64;
    int downsample = 4; // codec grid f
    // box side as a fraction of image_size, snapped to the grid
    double box_min_frac = 0.25;
    double box_max_frac = 0.70;
    // source/view renders: object radius fraction and its jitter ranges
    double object_radius_frac = 0.30;
    double view_scale_min = 0.75;
    double view_scale_max = 1.25;
    double view_rot_range = 3.14159265358979323846; // radians, +/-

    void validate() const;
};

// Identity of a rendered object: shape + palette + pattern. Two renders with
// the same spec differ only by placement, scale and rotation.
struct ObjectSpec {
    int shape = 0;   // 0 ellipse, 1 rectangle, 2 triangle
    int pattern = 0; // 0 solid, 1 stripes, 2 dots
    std::array<double, 3> color_a{};
    std::array<double, 3> color_b{};
    double pattern_freq = 3.0;
    double pattern_phase = 0.0;
    double aspect = 1.0;
};

struct SceneSample {
    std::string scene_id;
    ImageTensor source_image;
    ImageTensor hint_image;   // == target outside box, exactly 0 inside
    ImageTensor target_image;
    ImageTensor box_viz;      // filled white rectangle on black
    Box box;
    int view_id = 0;
    int view_group = -1;
    ObjectSpec object; // carried so further views of the same identity can be rendered
};

struct ManifestEntry {
    std::string scene_id;
    std::string source_path, hint_path, target_path, box_viz_path;
    Box box;
    int view_group = -1;
    int view_id = 0;
};

struct DatasetManifest {
    int version = 1;
    int image_size = 0;
    int downsample_factor = 0;
    std::vector<ManifestEntry> samples;
};

SceneSample generate_scene(uint64_t seed, const SynthParams& params);

// k >= 2 renders of scene's object identity under fresh rotation/scale draws.
std::vector<ImageTensor> generate_views(const SceneSample& scene, int k, uint64_t seed,
                                        const SynthParams& params);

DatasetManifest write_dataset(const std::vector<SceneSample>& samples,
                              const std::filesystem::path& dir, int image_size,
                              int downsample_factor);

// Loaded dataset handle; images are read lazily per sample.
class Dataset {
public:
    Dataset() = default;
    Dataset(DatasetManifest manifest, std::filesystem::path dir)
        : manifest_(std::move(manifest)), dir_(std::move(dir)) {}

    const DatasetManifest& manifest() const { return manifest_; }
    int size() const { return static_cast<int>(manifest_.samples.size()); }
    SceneSample load(int index) const;
    int find(const std::string& scene_id) const; // -1 when absent

    // indices grouped by view_group, groups with >= 2 views only
    std::vector<std::vector<int>> view_groups() const;

private:
    DatasetManifest manifest_;
    std::filesystem::path dir_;
};

Dataset load_dataset(const std::filesystem::path& dir);

} // namespace mdtbox
