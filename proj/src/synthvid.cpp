#include "ptse/synthvid.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <sstream>

#include "json.hpp"

#include "ptse/errors.hpp"

namespace ptse {

using nlohmann::json;

namespace {

struct Mover {
    ShapeClass shape;
    double size;
    double cx, cy, vx, vy;
    double phase_w, phase_h;
    double color[3];
};

struct Bar {
    double x, v;
    double shade;
};

void field_error(const std::string& field, const std::string& why) {
    throw ConfigError("scene spec field '" + field + "': " + why);
}

// Reflects p into [lo, hi], flipping the velocity on each bounce.
void bounce(double& p, double& v, double lo, double hi) {
    if (hi <= lo) {
        p = 0.5 * (lo + hi);
        return;
    }
    for (int i = 0; i < 4 && (p < lo || p > hi); ++i) {
        if (p < lo) p = 2.0 * lo - p;
        if (p > hi) p = 2.0 * hi - p;
        v = -v;
    }
    p = std::clamp(p, lo, hi);
}

bool covers(ShapeClass shape, double hw, double hh, double dx, double dy) {
    switch (shape) {
        case ShapeClass::circle:
            return (dx / hw) * (dx / hw) + (dy / hh) * (dy / hh) <= 1.0;
        case ShapeClass::square:
            return std::abs(dx) <= hw && std::abs(dy) <= hh;
        case ShapeClass::triangle: {
            // Apex at the top, base at the bottom.
            const double depth = dy + hh;
            if (depth < 0.0 || depth > 2.0 * hh) return false;
            return std::abs(dx) <= hw * depth / (2.0 * hh);
        }
    }
    return false;
}

void box_blur(std::vector<double>& img, std::size_t h, std::size_t w, std::size_t k) {
    if (k <= 1) return;
    const auto r = static_cast<std::ptrdiff_t>(k / 2);
    std::vector<double> tmp(img.size());
    const auto H = static_cast<std::ptrdiff_t>(h), W = static_cast<std::ptrdiff_t>(w);
    for (std::size_t c = 0; c < 3; ++c) {
        double* plane = img.data() + c * h * w;
        double* out = tmp.data() + c * h * w;
        for (std::ptrdiff_t y = 0; y < H; ++y) {
            for (std::ptrdiff_t x = 0; x < W; ++x) {
                double s = 0.0;
                for (std::ptrdiff_t d = -r; d <= r; ++d) s += plane[y * W + std::clamp(x + d, std::ptrdiff_t{0}, W - 1)];
                out[y * W + x] = s / static_cast<double>(k);
            }
        }
        for (std::ptrdiff_t y = 0; y < H; ++y) {
            for (std::ptrdiff_t x = 0; x < W; ++x) {
                double s = 0.0;
                for (std::ptrdiff_t d = -r; d <= r; ++d) s += out[std::clamp(y + d, std::ptrdiff_t{0}, H - 1) * W + x];
                plane[y * W + x] = s / static_cast<double>(k);
            }
        }
    }
}

json spec_to_json(const SceneSpec& s) {
    return json{{"seed", s.seed},
                {"frames", s.frames},
                {"height", s.height},
                {"width", s.width},
                {"min_objects", s.min_objects},
                {"max_objects", s.max_objects},
                {"min_size", s.min_size},
                {"max_size", s.max_size},
                {"min_speed", s.min_speed},
                {"max_speed", s.max_speed},
                {"deformation", s.deformation},
                {"deformation_period", s.deformation_period},
                {"occluders", s.occluders},
                {"occluder_width", s.occluder_width},
                {"occluder_speed", s.occluder_speed},
                {"occlusion_probability", s.occlusion_probability},
                {"blur_probability", s.blur_probability},
                {"blur_kernels", s.blur_kernels},
                {"noise", s.noise}};
}

template <typename T>
void read_field(const json& j, const char* key, T& out) {
    if (!j.contains(key)) return;
    try {
        out = j.at(key).get<T>();
    } catch (const json::exception& e) {
        field_error(key, e.what());
    }
}

SceneSpec spec_from(const json& j) {
    if (!j.is_object()) throw ConfigError("scene spec must be a JSON object");
    const SceneSpec defaults;
    const auto known = spec_to_json(defaults);
    for (const auto& [key, value] : j.items()) {
        if (!known.contains(key)) field_error(key, "unknown field");
    }
    SceneSpec s;
    read_field(j, "seed", s.seed);
    read_field(j, "frames", s.frames);
    read_field(j, "height", s.height);
    read_field(j, "width", s.width);
    read_field(j, "min_objects", s.min_objects);
    read_field(j, "max_objects", s.max_objects);
    read_field(j, "min_size", s.min_size);
    read_field(j, "max_size", s.max_size);
    read_field(j, "min_speed", s.min_speed);
    read_field(j, "max_speed", s.max_speed);
    read_field(j, "deformation", s.deformation);
    read_field(j, "deformation_period", s.deformation_period);
    read_field(j, "occluders", s.occluders);
    read_field(j, "occluder_width", s.occluder_width);
    read_field(j, "occluder_speed", s.occluder_speed);
    read_field(j, "occlusion_probability", s.occlusion_probability);
    read_field(j, "blur_probability", s.blur_probability);
    read_field(j, "blur_kernels", s.blur_kernels);
    read_field(j, "noise", s.noise);
    s.validate();
    return s;
}

std::string read_text(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open " + path.string());
    std::ostringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

void write_text(const std::filesystem::path& path, const std::string& text) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot write " + path.string());
    os << text;
    if (!os) throw IoError("failed writing " + path.string());
}

json parse_json(const std::string& text, const std::string& what) {
    try {
        return json::parse(text);
    } catch (const json::parse_error& e) {
        throw IoError(what + ": " + e.what());
    }
}

std::string numbered(const char* prefix, std::size_t i, const char* suffix) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%s%05zu%s", prefix, i, suffix);
    return buf;
}

}  // namespace

const char* shape_name(ShapeClass c) {
    switch (c) {
        case ShapeClass::circle:
            return "circle";
        case ShapeClass::square:
            return "square";
        case ShapeClass::triangle:
            return "triangle";
    }
    return "?";
}

void SceneSpec::validate() const {
    if (frames == 0) field_error("frames", "must be at least 1");
    if (height == 0 || height % FrameEncoder::stride != 0) field_error("height", "must be a positive multiple of 8");
    if (width == 0 || width % FrameEncoder::stride != 0) field_error("width", "must be a positive multiple of 8");
    if (min_objects == 0) field_error("min_objects", "must be at least 1");
    if (max_objects < min_objects) field_error("max_objects", "must be >= min_objects");
    if (max_objects > 4) field_error("max_objects", "at most 4 objects per frame");
    if (!(min_size >= 2.0)) field_error("min_size", "must be >= 2 pixels");
    if (!(max_size >= min_size)) field_error("max_size", "must be >= min_size");
    if (!(deformation >= 0.0 && deformation < 0.5)) field_error("deformation", "must be in [0, 0.5)");
    if (!(deformation_period > 0.0)) field_error("deformation_period", "must be positive");
    const double extent = 2.0 * max_size * (1.0 + deformation);
    if (extent >= static_cast<double>(std::min(height, width))) {
        field_error("max_size", "objects do not fit inside the frame");
    }
    if (!(min_speed >= 0.0)) field_error("min_speed", "must be nonnegative");
    if (!(max_speed >= min_speed)) field_error("max_speed", "must be >= min_speed");
    if (max_speed > static_cast<double>(std::min(height, width)) - extent) {
        field_error("max_speed", "objects would leave the frame within one step");
    }
    if (!(occluder_width > 0.0)) field_error("occluder_width", "must be positive");
    if (!(occluder_speed >= 0.0)) field_error("occluder_speed", "must be nonnegative");
    if (!(occlusion_probability >= 0.0 && occlusion_probability <= 1.0)) {
        field_error("occlusion_probability", "must be in [0, 1]");
    }
    if (!(blur_probability >= 0.0 && blur_probability <= 1.0)) field_error("blur_probability", "must be in [0, 1]");
    if (blur_probability > 0.0 && blur_kernels.empty()) field_error("blur_kernels", "empty while blur is enabled");
    for (auto k : blur_kernels) {
        if (k % 2 == 0) field_error("blur_kernels", "kernel sizes must be odd");
    }
    if (!(noise >= 0.0 && noise <= 0.5)) field_error("noise", "must be in [0, 0.5]");
}

GroundTruth FrameAnnotation::ground_truth() const {
    GroundTruth gt;
    for (const auto& o : objects) {
        gt.boxes.push_back(o.box);
        gt.classes.push_back(o.class_id);
    }
    return gt;
}

bool FrameAnnotation::occluded(double threshold) const {
    return std::ranges::any_of(objects, [&](const auto& o) { return o.visible < threshold; });
}

FrameImage RgbFrame::to_image() const {
    FrameImage img(height, width);
    for (std::size_t y = 0; y < height; ++y) {
        for (std::size_t x = 0; x < width; ++x) {
            for (std::size_t c = 0; c < 3; ++c) {
                img.at(c, y, x) = static_cast<double>(rgb[(y * width + x) * 3 + c]) / 255.0;
            }
        }
    }
    return img;
}

Sequence generate_sequence(const SceneSpec& spec, std::size_t sequence_id) {
    spec.validate();
    Rng rng(spec.seed ^ static_cast<std::uint64_t>(sequence_id));
    const auto H = spec.height, W = spec.width;
    const double Hd = static_cast<double>(H), Wd = static_cast<double>(W);
    constexpr double two_pi = 2.0 * std::numbers::pi;

    double background[3];
    for (auto& b : background) b = rng.uniform(0.0, 0.2);

    const auto count = static_cast<std::size_t>(
        rng.uniform_int(static_cast<std::int64_t>(spec.min_objects), static_cast<std::int64_t>(spec.max_objects)));
    // Classes come from a shuffled bag so every class appears once per three objects.
    std::vector<int> bag;
    std::vector<Mover> movers;
    for (std::size_t k = 0; k < count; ++k) {
        if (bag.empty()) {
            bag = {0, 1, 2};
            for (std::size_t i = bag.size() - 1; i > 0; --i) {
                std::swap(bag[i], bag[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(i)))]);
            }
        }
        Mover m{};
        m.shape = static_cast<ShapeClass>(bag.back());
        bag.pop_back();
        m.size = rng.uniform(spec.min_size, spec.max_size);
        const double ext = m.size * (1.0 + spec.deformation);
        m.cx = rng.uniform(ext, Wd - ext);
        m.cy = rng.uniform(ext, Hd - ext);
        const double angle = rng.uniform(0.0, two_pi);
        const double speed = rng.uniform(spec.min_speed, spec.max_speed);
        m.vx = speed * std::cos(angle);
        m.vy = speed * std::sin(angle);
        m.phase_w = rng.uniform(0.0, two_pi);
        m.phase_h = rng.uniform(0.0, two_pi);
        for (auto& c : m.color) c = rng.uniform(0.35, 1.0);
        m.color[rng.uniform_int(0, 2)] = rng.uniform(0.8, 1.0);
        movers.push_back(m);
    }
    std::vector<Bar> bars;
    for (std::size_t b = 0; b < spec.occluders; ++b) {
        Bar bar{};
        bar.x = rng.uniform(0.0, Wd);
        bar.v = rng.bernoulli(0.5) ? spec.occluder_speed : -spec.occluder_speed;
        bar.shade = rng.uniform(0.4, 0.6);
        bars.push_back(bar);
    }

    Sequence seq;
    seq.id = sequence_id;
    seq.spec = spec;
    std::vector<double> img(3 * H * W);
    std::vector<int> owner(H * W);
    std::vector<std::size_t> area(count);
    for (std::size_t t = 0; t < spec.frames; ++t) {
        if (t > 0) {
            for (auto& m : movers) {
                const double ext = m.size * (1.0 + spec.deformation);
                m.cx += m.vx;
                m.cy += m.vy;
                bounce(m.cx, m.vx, ext, Wd - ext);
                bounce(m.cy, m.vy, ext, Hd - ext);
            }
            for (auto& bar : bars) {
                bar.x += bar.v;
                bounce(bar.x, bar.v, 0.0, Wd);
            }
        }
        for (std::size_t c = 0; c < 3; ++c) std::fill_n(img.begin() + c * H * W, H * W, background[c]);
        std::ranges::fill(owner, -1);

        FrameAnnotation ann;
        ann.frame = t;
        const double phase = two_pi * static_cast<double>(t) / spec.deformation_period;
        for (std::size_t k = 0; k < count; ++k) {
            const auto& m = movers[k];
            const double hw = m.size * (1.0 + spec.deformation * std::sin(phase + m.phase_w));
            const double hh = m.size * (1.0 + spec.deformation * std::sin(phase + m.phase_h));
            const auto y_lo = static_cast<std::size_t>(std::max(0.0, std::floor(m.cy - hh - 1.0)));
            const auto y_hi = std::min(H, static_cast<std::size_t>(std::ceil(m.cy + hh + 1.0)));
            const auto x_lo = static_cast<std::size_t>(std::max(0.0, std::floor(m.cx - hw - 1.0)));
            const auto x_hi = std::min(W, static_cast<std::size_t>(std::ceil(m.cx + hw + 1.0)));
            std::size_t bx0 = W, by0 = H, bx1 = 0, by1 = 0;
            area[k] = 0;
            for (std::size_t y = y_lo; y < y_hi; ++y) {
                for (std::size_t x = x_lo; x < x_hi; ++x) {
                    const double dx = static_cast<double>(x) + 0.5 - m.cx;
                    const double dy = static_cast<double>(y) + 0.5 - m.cy;
                    if (!covers(m.shape, hw, hh, dx, dy)) continue;
                    ++area[k];
                    bx0 = std::min(bx0, x);
                    by0 = std::min(by0, y);
                    bx1 = std::max(bx1, x + 1);
                    by1 = std::max(by1, y + 1);
                    owner[y * W + x] = static_cast<int>(k);
                    for (std::size_t c = 0; c < 3; ++c) img[(c * H + y) * W + x] = m.color[c];
                }
            }
            ObjectAnnotation o;
            o.class_id = static_cast<int>(m.shape);
            if (area[k] > 0) {
                // Amodal box: extent of the object's own raster, before anything covers it.
                o.box = {0.5 * static_cast<double>(bx0 + bx1) / Wd, 0.5 * static_cast<double>(by0 + by1) / Hd,
                         static_cast<double>(bx1 - bx0) / Wd, static_cast<double>(by1 - by0) / Hd};
            } else {
                o.box = {m.cx / Wd, m.cy / Hd, 2.0 * hw / Wd, 2.0 * hh / Hd};
            }
            ann.objects.push_back(o);
        }

        std::vector<char> shaded(W, 0);
        for (const auto& bar : bars) {
            if (!rng.bernoulli(spec.occlusion_probability)) continue;
            for (std::size_t x = 0; x < W; ++x) {
                const double px = static_cast<double>(x) + 0.5;
                if (std::abs(px - bar.x) > 0.5 * spec.occluder_width) continue;
                shaded[x] = 1;
                for (std::size_t y = 0; y < H; ++y) {
                    for (std::size_t c = 0; c < 3; ++c) img[(c * H + y) * W + x] = bar.shade;
                }
            }
        }
        std::vector<std::size_t> seen(count, 0);
        for (std::size_t y = 0; y < H; ++y) {
            for (std::size_t x = 0; x < W; ++x) {
                const int k = owner[y * W + x];
                if (k >= 0 && !shaded[x]) ++seen[static_cast<std::size_t>(k)];
            }
        }
        for (std::size_t k = 0; k < count; ++k) {
            ann.objects[k].visible =
                area[k] > 0 ? static_cast<double>(seen[k]) / static_cast<double>(area[k]) : 0.0;
        }

        if (spec.blur_probability > 0.0 && rng.bernoulli(spec.blur_probability)) {
            const auto pick = rng.uniform_int(0, static_cast<std::int64_t>(spec.blur_kernels.size()) - 1);
            ann.blur_kernel = spec.blur_kernels[static_cast<std::size_t>(pick)];
            box_blur(img, H, W, ann.blur_kernel);
        }
        if (spec.noise > 0.0) {
            for (auto& v : img) v = std::clamp(v + rng.uniform(-spec.noise, spec.noise), 0.0, 1.0);
        }

        RgbFrame frame{H, W, std::vector<std::uint8_t>(3 * H * W)};
        for (std::size_t y = 0; y < H; ++y) {
            for (std::size_t x = 0; x < W; ++x) {
                for (std::size_t c = 0; c < 3; ++c) {
                    frame.rgb[(y * W + x) * 3 + c] =
                        static_cast<std::uint8_t>(std::lround(img[(c * H + y) * W + x] * 255.0));
                }
            }
        }
        seq.frames.push_back(std::move(frame));
        seq.annotations.push_back(std::move(ann));
    }
    return seq;
}

std::vector<Sequence> generate_dataset(const DatasetSpec& spec) {
    std::vector<Sequence> out;
    out.reserve(spec.sequences);
    for (std::size_t i = 0; i < spec.sequences; ++i) out.push_back(generate_sequence(spec.scene, spec.first_id + i));
    return out;
}

std::vector<std::size_t> nearest_context(std::size_t length, std::size_t t, std::size_t count) {
    if (t >= length) throw ContractError("context: frame " + std::to_string(t) + " outside the sequence");
    if (length - 1 < count) {
        throw ContractError("context: sequence of " + std::to_string(length) + " frames cannot supply " +
                            std::to_string(count) + " context frames");
    }
    std::vector<std::size_t> out;
    for (std::size_t d = 1; out.size() < count; ++d) {
        if (t >= d) out.push_back(t - d);
        if (out.size() < count && t + d < length) out.push_back(t + d);
    }
    std::ranges::sort(out);
    return out;
}

VideoSample make_sample(const Sequence& seq, std::size_t t, const std::vector<std::size_t>& context) {
    if (t >= seq.size()) throw ContractError("sample: frame " + std::to_string(t) + " outside the sequence");
    VideoSample s;
    s.sequence_id = seq.id;
    s.t = t;
    s.target = seq.frames[t].to_image();
    s.target_truth = seq.annotations[t].ground_truth();
    s.occluded = seq.annotations[t].occluded();
    for (auto i : context) {
        if (i >= seq.size() || i == t) throw ContractError("sample: invalid context frame " + std::to_string(i));
        s.context.push_back(seq.frames[i].to_image());
        s.offsets.push_back(static_cast<int>(i) - static_cast<int>(t));
    }
    return s;
}

VideoSample sample_training_item(const Sequence& seq, std::size_t t, std::size_t half_window, std::size_t count,
                                 Rng& rng) {
    if (t >= seq.size()) throw ContractError("sample: frame " + std::to_string(t) + " outside the sequence");
    const std::size_t lo = t >= half_window ? t - half_window : 0;
    const std::size_t hi = std::min(seq.size() - 1, t + half_window);
    std::vector<std::size_t> window;
    for (std::size_t i = lo; i <= hi; ++i) {
        if (i != t) window.push_back(i);
    }
    if (window.size() < count) {
        throw ContractError("sample: window [" + std::to_string(lo) + ", " + std::to_string(hi) + "] holds " +
                            std::to_string(window.size()) + " context frames, " + std::to_string(count) +
                            " requested");
    }
    for (std::size_t i = 0; i < count; ++i) {
        const auto j = i + static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(window.size() - i - 1)));
        std::swap(window[i], window[j]);
    }
    window.resize(count);
    std::ranges::sort(window);
    return make_sample(seq, t, window);
}

std::string scene_spec_json(const SceneSpec& spec) { return spec_to_json(spec).dump(2); }

SceneSpec scene_spec_from_json(const std::string& text) { return spec_from(parse_json(text, "scene spec")); }

std::string dataset_spec_json(const DatasetSpec& spec) {
    auto j = spec_to_json(spec.scene);
    j["sequences"] = spec.sequences;
    j["first_id"] = spec.first_id;
    return j.dump(2);
}

DatasetSpec dataset_spec_from_json(const std::string& text) {
    auto j = parse_json(text, "dataset spec");
    if (!j.is_object()) throw ConfigError("dataset spec must be a JSON object");
    DatasetSpec d;
    read_field(j, "sequences", d.sequences);
    read_field(j, "first_id", d.first_id);
    j.erase("sequences");
    j.erase("first_id");
    j.erase("sequence_dirs");
    d.scene = spec_from(j);
    if (d.sequences == 0) field_error("sequences", "must be at least 1");
    return d;
}

void write_ppm(const std::filesystem::path& path, const RgbFrame& frame) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot write " + path.string());
    os << "P6\n" << frame.width << ' ' << frame.height << "\n255\n";
    os.write(reinterpret_cast<const char*>(frame.rgb.data()), static_cast<std::streamsize>(frame.rgb.size()));
    if (!os) throw IoError("failed writing " + path.string());
}

RgbFrame read_ppm(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open " + path.string());
    auto token = [&]() {
        std::string t;
        while (is) {
            const int c = is.get();
            if (c == '#') {
                std::string skip;
                std::getline(is, skip);
            } else if (std::isspace(c)) {
                if (!t.empty()) break;
            } else if (c != EOF) {
                t.push_back(static_cast<char>(c));
            }
        }
        return t;
    };
    if (token() != "P6") throw IoError(path.string() + ": not a binary PPM");
    RgbFrame f;
    try {
        f.width = std::stoul(token());
        f.height = std::stoul(token());
        if (std::stoul(token()) != 255) throw IoError(path.string() + ": maxval must be 255");
    } catch (const std::logic_error&) {
        throw IoError(path.string() + ": malformed PPM header");
    }
    f.rgb.resize(3 * f.width * f.height);
    is.read(reinterpret_cast<char*>(f.rgb.data()), static_cast<std::streamsize>(f.rgb.size()));
    if (is.gcount() != static_cast<std::streamsize>(f.rgb.size())) throw IoError(path.string() + ": truncated PPM");
    return f;
}

void write_sequence(const std::filesystem::path& dir, const Sequence& seq) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
    for (std::size_t t = 0; t < seq.size(); ++t) write_ppm(dir / numbered("frame_", t, ".ppm"), seq.frames[t]);
    std::string lines;
    for (const auto& a : seq.annotations) {
        json objects = json::array();
        for (const auto& o : a.objects) {
            objects.push_back({{"class", o.class_id},
                               {"box", {o.box.cx, o.box.cy, o.box.w, o.box.h}},
                               {"visible", o.visible}});
        }
        lines += json{{"frame", a.frame}, {"objects", objects}, {"blur", a.blur_kernel}}.dump() + "\n";
    }
    write_text(dir / "ann.jsonl", lines);
    json manifest{{"sequence_id", seq.id}, {"scene_seed", seq.spec.seed ^ seq.id}, {"spec", spec_to_json(seq.spec)}};
    write_text(dir / "manifest.json", manifest.dump(2) + "\n");
}

Sequence read_sequence(const std::filesystem::path& dir) {
    const auto manifest = parse_json(read_text(dir / "manifest.json"), (dir / "manifest.json").string());
    Sequence seq;
    try {
        seq.id = manifest.at("sequence_id").get<std::size_t>();
        seq.spec = spec_from(manifest.at("spec"));
    } catch (const json::exception& e) {
        throw IoError((dir / "manifest.json").string() + ": " + e.what());
    }
    std::istringstream lines(read_text(dir / "ann.jsonl"));
    std::string line;
    while (std::getline(lines, line)) {
        if (line.empty()) continue;
        const auto j = parse_json(line, (dir / "ann.jsonl").string());
        FrameAnnotation a;
        try {
            a.frame = j.at("frame").get<std::size_t>();
            a.blur_kernel = j.value("blur", std::size_t{1});
            for (const auto& o : j.at("objects")) {
                ObjectAnnotation obj;
                obj.class_id = o.at("class").get<int>();
                const auto b = o.at("box").get<std::vector<double>>();
                if (b.size() != 4) throw IoError((dir / "ann.jsonl").string() + ": box needs 4 numbers");
                obj.box = {b[0], b[1], b[2], b[3]};
                obj.visible = o.value("visible", 1.0);
                a.objects.push_back(obj);
            }
        } catch (const json::exception& e) {
            throw IoError((dir / "ann.jsonl").string() + ": " + e.what());
        }
        seq.annotations.push_back(std::move(a));
    }
    for (std::size_t t = 0; t < seq.annotations.size(); ++t) {
        if (seq.annotations[t].frame != t) throw IoError((dir / "ann.jsonl").string() + ": frames out of order");
        seq.frames.push_back(read_ppm(dir / numbered("frame_", t, ".ppm")));
    }
    return seq;
}

void write_dataset(const std::filesystem::path& root, const DatasetSpec& spec, const std::vector<Sequence>& seqs) {
    std::error_code ec;
    std::filesystem::create_directories(root, ec);
    if (ec) throw IoError("cannot create " + root.string() + ": " + ec.message());
    auto j = parse_json(dataset_spec_json(spec), "dataset spec");
    json dirs = json::array();
    for (const auto& s : seqs) {
        const auto name = numbered("seq_", s.id, "");
        write_sequence(root / name, s);
        dirs.push_back(name);
    }
    j["sequence_dirs"] = dirs;
    write_text(root / "manifest.json", j.dump(2) + "\n");
}

std::vector<Sequence> read_dataset(const std::filesystem::path& root) {
    const auto j = parse_json(read_text(root / "manifest.json"), (root / "manifest.json").string());
    if (!j.contains("sequence_dirs")) throw IoError((root / "manifest.json").string() + ": no sequence_dirs");
    std::vector<Sequence> out;
    for (const auto& d : j.at("sequence_dirs")) out.push_back(read_sequence(root / d.get<std::string>()));
    return out;
}

}  // namespace ptse
