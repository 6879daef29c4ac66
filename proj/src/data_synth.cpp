#include "mdtbox/data_synth.hpp"

#include <json.hpp>

#include <cmath>
#include <fstream>
#include <numbers>

namespace mdtbox {

using nlohmann::json;

void SynthParams::validate() const {
    if (image_size <= 0 || downsample <= 0 || image_size % downsample != 0)
        throw ParameterError("image_size must be a positive multiple of the downsample factor");
    if (!(box_min_frac > 0.0 && box_min_frac <= box_max_frac && box_max_frac <= 1.0))
        throw ParameterError("box fraction range invalid");
    if (!(view_scale_min > 0.0 && view_scale_min <= view_scale_max))
        throw ParameterError("view scale range invalid");
    const double dmin = 2.0 * object_radius_frac * view_scale_min * image_size;
    const double dmax = 2.0 * object_radius_frac * view_scale_max * image_size;
    if (dmax > image_size)
        throw ParameterError("object larger than image at max scale");
    if (dmin < downsample)
        throw ParameterError("object smaller than one codec cell at min scale");
}

namespace {

constexpr double kPi = std::numbers::pi;

double frac(double v) { return v - std::floor(v); }

// Point-in-shape test in the unit object frame.
bool inside_shape(const ObjectSpec& o, double u, double v) {
    switch (o.shape) {
        case 0: { // ellipse
            double a = 1.0, b = o.aspect;
            return (u * u) / (a * a) + (v * v) / (b * b) <= 1.0;
        }
        case 1: // rectangle
            return std::abs(u) <= 0.92 && std::abs(v) <= 0.92 * o.aspect;
        default: { // triangle, apex up
            const double ax = 0.0, ay = -1.0;
            const double bx = 0.95, by = 0.80;
            const double cx = -0.95, cy = 0.80;
            auto side = [&](double x1, double y1, double x2, double y2) {
                return (x2 - x1) * (v - y1) - (y2 - y1) * (u - x1);
            };
            double s1 = side(ax, ay, bx, by);
            double s2 = side(bx, by, cx, cy);
            double s3 = side(cx, cy, ax, ay);
            bool neg = (s1 < 0) || (s2 < 0) || (s3 < 0);
            bool pos = (s1 > 0) || (s2 > 0) || (s3 > 0);
            return !(neg && pos);
        }
    }
}

std::array<double, 3> pattern_color(const ObjectSpec& o, double u, double v) {
    switch (o.pattern) {
        case 0:
            return o.color_a;
        case 1: // stripes across u
            return std::sin(o.pattern_freq * kPi * u + o.pattern_phase) >= 0.0 ? o.color_a
                                                                               : o.color_b;
        default: { // dot lattice
            double fu = frac(u * o.pattern_freq + o.pattern_phase) - 0.5;
            double fv = frac(v * o.pattern_freq) - 0.5;
            return (fu * fu + fv * fv <= 0.25 * 0.25) ? o.color_b : o.color_a;
        }
    }
}

// Render the object at (cx, cy) with pixel radius `radius` and rotation
// `angle` into img, restricted to the clip rectangle. 2x2 supersampled edges.
void render_object(ImageTensor& img, const ObjectSpec& o, double cx, double cy, double radius,
                   double angle, const Box& clip) {
    const double ca = std::cos(-angle), sa = std::sin(-angle);
    const int x_lo = std::max(clip.x0, 0), x_hi = std::min(clip.x1, img.size);
    const int y_lo = std::max(clip.y0, 0), y_hi = std::min(clip.y1, img.size);
    for (int y = y_lo; y < y_hi; ++y) {
        for (int x = x_lo; x < x_hi; ++x) {
            double cover = 0.0;
            std::array<double, 3> col{0, 0, 0};
            for (int sy = 0; sy < 2; ++sy) {
                for (int sx = 0; sx < 2; ++sx) {
                    double px = x + 0.25 + 0.5 * sx - cx;
                    double py = y + 0.25 + 0.5 * sy - cy;
                    double u = (ca * px - sa * py) / radius;
                    double v = (sa * px + ca * py) / radius;
                    if (inside_shape(o, u, v)) {
                        auto c = pattern_color(o, u, v);
                        for (int k = 0; k < 3; ++k) col[k] += c[k];
                        cover += 1.0;
                    }
                }
            }
            if (cover > 0.0) {
                double w = cover / 4.0;
                for (int c = 0; c < 3; ++c) {
                    double oc = col[c] / cover;
                    img.at(c, y, x) = (1.0 - w) * img.at(c, y, x) + w * oc;
                }
            }
        }
    }
}

void render_background(ImageTensor& img, Rng& rng) {
    struct Wave {
        double kx, ky, phase, amp;
    };
    std::array<std::array<Wave, 2>, 3> waves;
    std::array<double, 3> base;
    for (int c = 0; c < 3; ++c) {
        base[c] = rng.uniform(-0.35, 0.35);
        for (auto& w : waves[c]) {
            double cycles = rng.uniform(0.5, 2.5);
            double theta = rng.uniform(0.0, 2.0 * kPi);
            w.kx = 2.0 * kPi * cycles * std::cos(theta) / img.size;
            w.ky = 2.0 * kPi * cycles * std::sin(theta) / img.size;
            w.phase = rng.uniform(0.0, 2.0 * kPi);
            w.amp = rng.uniform(0.08, 0.22);
        }
    }
    for (int y = 0; y < img.size; ++y)
        for (int x = 0; x < img.size; ++x)
            for (int c = 0; c < 3; ++c) {
                double v = base[c];
                for (const auto& w : waves[c]) v += w.amp * std::cos(w.kx * x + w.ky * y + w.phase);
                img.at(c, y, x) = std::clamp(v, -0.9, 0.9);
            }
}

ObjectSpec draw_object_spec(Rng& rng) {
    ObjectSpec o;
    o.shape = rng.uniform_int(3);
    o.pattern = rng.uniform_int(3);
    auto draw_color = [&](double lo, double hi) {
        std::array<double, 3> c;
        for (auto& v : c) v = rng.uniform(lo, hi);
        return c;
    };
    o.color_a = draw_color(-0.9, 0.9);
    o.color_b = draw_color(-0.9, 0.9);
    // keep the two pattern colors apart so patterns stay visible
    double d2 = 0.0;
    for (int k = 0; k < 3; ++k) d2 += (o.color_a[k] - o.color_b[k]) * (o.color_a[k] - o.color_b[k]);
    if (d2 < 0.3) o.color_b = {-o.color_a[0], -o.color_a[1], -o.color_a[2]};
    o.pattern_freq = rng.uniform(2.0, 4.5);
    o.pattern_phase = rng.uniform(0.0, 2.0 * kPi);
    o.aspect = rng.uniform(0.6, 1.0);
    return o;
}

ImageTensor render_source_view(const ObjectSpec& o, const SynthParams& p, double scale,
                               double angle) {
    ImageTensor img(p.image_size, 0.0); // neutral mid-gray background
    double radius = p.object_radius_frac * scale * p.image_size;
    Box full{0, 0, p.image_size, p.image_size};
    render_object(img, o, p.image_size / 2.0, p.image_size / 2.0, radius, angle, full);
    return img;
}

json box_to_json(const Box& b) { return json{{"x0", b.x0}, {"y0", b.y0}, {"x1", b.x1}, {"y1", b.y1}}; }

Box box_from_json(const json& j) {
    return Box{j.at("x0").get<int>(), j.at("y0").get<int>(), j.at("x1").get<int>(),
               j.at("y1").get<int>()};
}

} // namespace

SceneSample generate_scene(uint64_t seed, const SynthParams& p) {
    p.validate();
    Rng rng = Rng::child(seed, "scene");

    SceneSample s;
    s.scene_id = "scene-" + std::to_string(seed);
    s.object = draw_object_spec(rng);

    const int f = p.downsample;
    const int cells = p.image_size / f;
    auto draw_span = [&](double min_frac, double max_frac) {
        int lo = std::max(1, static_cast<int>(std::floor(min_frac * cells)));
        int hi = std::max(lo, static_cast<int>(std::floor(max_frac * cells)));
        return lo + rng.uniform_int(hi - lo + 1);
    };
    int bw = draw_span(p.box_min_frac, p.box_max_frac);
    int bh = draw_span(p.box_min_frac, p.box_max_frac);
    int bx = rng.uniform_int(cells - bw + 1);
    int by = rng.uniform_int(cells - bh + 1);
    s.box = Box{bx * f, by * f, (bx + bw) * f, (by + bh) * f};
    s.box.validate(p.image_size, f);

    // target: textured background with the object composited inside the box
    s.target_image = ImageTensor(p.image_size);
    render_background(s.target_image, rng);
    double obj_radius = 0.48 * std::min(s.box.width(), s.box.height());
    double target_angle = rng.uniform(0.0, 2.0 * kPi);
    render_object(s.target_image, s.object, 0.5 * (s.box.x0 + s.box.x1),
                  0.5 * (s.box.y0 + s.box.y1), obj_radius, target_angle, s.box);

    // hint: target with the box zeroed out
    s.hint_image = s.target_image;
    for (int c = 0; c < 3; ++c)
        for (int y = s.box.y0; y < s.box.y1; ++y)
            for (int x = s.box.x0; x < s.box.x1; ++x) s.hint_image.at(c, y, x) = 0.0;

    // source: same identity, independent rotation/scale, neutral background
    double src_scale = rng.uniform(p.view_scale_min, p.view_scale_max);
    double src_angle = rng.uniform(-p.view_rot_range, p.view_rot_range);
    s.source_image = render_source_view(s.object, p, src_scale, src_angle);

    s.box_viz = ImageTensor(p.image_size, -1.0);
    for (int c = 0; c < 3; ++c)
        for (int y = s.box.y0; y < s.box.y1; ++y)
            for (int x = s.box.x0; x < s.box.x1; ++x) s.box_viz.at(c, y, x) = 1.0;

    s.view_id = 0;
    return s;
}

std::vector<ImageTensor> generate_views(const SceneSample& scene, int k, uint64_t seed,
                                        const SynthParams& p) {
    if (k < 2) throw ParameterError("generate_views requires k >= 2");
    p.validate();
    Rng rng = Rng::child(seed, "views");
    std::vector<ImageTensor> views;
    views.reserve(static_cast<size_t>(k));
    for (int v = 0; v < k; ++v) {
        double scale = rng.uniform(p.view_scale_min, p.view_scale_max);
        double angle = rng.uniform(-p.view_rot_range, p.view_rot_range);
        views.push_back(render_source_view(scene.object, p, scale, angle));
    }
    return views;
}

DatasetManifest write_dataset(const std::vector<SceneSample>& samples,
                              const std::filesystem::path& dir, int image_size,
                              int downsample_factor) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw IoError("cannot create dataset directory " + dir.string());

    DatasetManifest m;
    m.image_size = image_size;
    m.downsample_factor = downsample_factor;

    json jsamples = json::array();
    for (const auto& s : samples) {
        ManifestEntry e;
        e.scene_id = s.scene_id;
        e.source_path = s.scene_id + "_source.png";
        e.hint_path = s.scene_id + "_hint.png";
        e.target_path = s.scene_id + "_target.png";
        e.box_viz_path = s.scene_id + "_boxviz.png";
        e.box = s.box;
        e.view_group = s.view_group;
        e.view_id = s.view_id;
        png_write_rgb8(dir / e.source_path, s.source_image);
        png_write_rgb8(dir / e.hint_path, s.hint_image);
        png_write_rgb8(dir / e.target_path, s.target_image);
        png_write_rgb8(dir / e.box_viz_path, s.box_viz);
        jsamples.push_back(json{{"scene_id", e.scene_id},
                                {"source", e.source_path},
                                {"hint", e.hint_path},
                                {"target", e.target_path},
                                {"box_viz", e.box_viz_path},
                                {"box", box_to_json(e.box)},
                                {"view_group", e.view_group},
                                {"view_id", e.view_id}});
        m.samples.push_back(std::move(e));
    }
    json j{{"version", m.version},
           {"image_size", m.image_size},
           {"downsample_factor", m.downsample_factor},
           {"samples", jsamples}};
    std::ofstream out(dir / "manifest.json");
    if (!out) throw IoError("cannot write manifest in " + dir.string());
    out << j.dump(2) << "\n";
    return m;
}

Dataset load_dataset(const std::filesystem::path& dir) {
    std::ifstream in(dir / "manifest.json");
    if (!in) throw DataError("manifest.json not found in " + dir.string());
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw DataError("manifest parse error: " + std::string(e.what()));
    }
    DatasetManifest m;
    try {
        m.version = j.at("version").get<int>();
        m.image_size = j.at("image_size").get<int>();
        m.downsample_factor = j.at("downsample_factor").get<int>();
        for (const auto& js : j.at("samples")) {
            ManifestEntry e;
            e.scene_id = js.at("scene_id").get<std::string>();
            e.source_path = js.at("source").get<std::string>();
            e.hint_path = js.at("hint").get<std::string>();
            e.target_path = js.at("target").get<std::string>();
            e.box_viz_path = js.at("box_viz").get<std::string>();
            e.box = box_from_json(js.at("box"));
            e.view_group = js.value("view_group", -1);
            e.view_id = js.value("view_id", 0);
            m.samples.push_back(std::move(e));
        }
    } catch (const json::exception& e) {
        throw DataError("manifest schema mismatch: " + std::string(e.what()));
    }
    for (const auto& e : m.samples) {
        try {
            e.box.validate(m.image_size, m.downsample_factor);
        } catch (const DataError& err) {
            throw DataError("sample " + e.scene_id + ": " + err.what());
        }
        for (const auto* p : {&e.source_path, &e.hint_path, &e.target_path, &e.box_viz_path}) {
            if (!std::filesystem::exists(dir / *p))
                throw DataError("sample " + e.scene_id + ": missing file " + *p);
        }
    }
    return Dataset(std::move(m), dir);
}

SceneSample Dataset::load(int index) const {
    if (index < 0 || index >= size()) throw DataError("sample index out of range");
    const ManifestEntry& e = manifest_.samples[static_cast<size_t>(index)];
    SceneSample s;
    s.scene_id = e.scene_id;
    s.box = e.box;
    s.view_group = e.view_group;
    s.view_id = e.view_id;
    auto read = [&](const std::string& rel) {
        ImageTensor img = png_read_rgb8(dir_ / rel);
        if (img.size != manifest_.image_size)
            throw DataError("sample " + e.scene_id + ": image size mismatch in " + rel);
        return img;
    };
    s.source_image = read(e.source_path);
    s.hint_image = read(e.hint_path);
    s.target_image = read(e.target_path);
    s.box_viz = read(e.box_viz_path);
    return s;
}

int Dataset::find(const std::string& scene_id) const {
    for (int i = 0; i < size(); ++i)
        if (manifest_.samples[static_cast<size_t>(i)].scene_id == scene_id) return i;
    return -1;
}

std::vector<std::vector<int>> Dataset::view_groups() const {
    std::vector<std::vector<int>> groups;
    std::vector<int> order; // group ids in first-seen order
    for (int i = 0; i < size(); ++i) {
        int g = manifest_.samples[static_cast<size_t>(i)].view_group;
        if (g < 0) continue;
        auto it = std::find(order.begin(), order.end(), g);
        if (it == order.end()) {
            order.push_back(g);
            groups.emplace_back();
            groups.back().push_back(i);
        } else {
            groups[static_cast<size_t>(it - order.begin())].push_back(i);
        }
    }
    std::erase_if(groups, [](const auto& g) { return g.size() < 2; });
    return groups;
}

} // namespace mdtbox
