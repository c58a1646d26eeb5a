#include "sparsebridge/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <numeric>
#include <set>

#include <json.hpp>

#include "sparsebridge/errors.hpp"
#include "sparsebridge/rng.hpp"

namespace sparsebridge {

namespace fs = std::filesystem;

std::string to_string(Modality m) { return m == Modality::source ? "source" : "target"; }

Modality parse_modality(const std::string &s) {
    if (s == "source") return Modality::source;
    if (s == "target") return Modality::target;
    throw InvalidArgument("unknown modality '" + s + "'");
}

std::vector<long> Volume::positions() const {
    std::vector<long> out;
    out.reserve(slices.size());
    for (const auto &s : slices) out.push_back(s.position);
    return out;
}

const Slice *Volume::find(long position) const {
    auto it = std::lower_bound(slices.begin(), slices.end(), position,
                               [](const Slice &s, long p) { return s.position < p; });
    return (it != slices.end() && it->position == position) ? &*it : nullptr;
}

void Volume::validate() const {
    for (std::size_t i = 0; i < slices.size(); ++i) {
        const auto &s = slices[i];
        if (i > 0 && s.position <= slices[i - 1].position) throw InvalidArgument("volume positions must be strictly increasing");
        if (s.position < 0 || s.position >= dense_extent) throw InvalidArgument("slice position outside the dense grid");
        if (s.pixels.rank() != 2 || s.pixels.dim(0) != height || s.pixels.dim(1) != width)
            throw InvalidArgument("slice shape " + s.pixels.shape_string() + " differs from the volume shape");
        for (double v : s.pixels.values())
            if (!(v >= 0.0 && v <= 1.0)) throw InvalidArgument("slice pixel outside [0, 1]");
    }
}

Tensor Volume::stacked() const {
    std::vector<Tensor> ps;
    ps.reserve(slices.size());
    for (const auto &s : slices) ps.push_back(s.pixels);
    return stack_slices(ps);
}

void PhantomParams::validate() const {
    if (n_subjects <= 0 || slices_per_subject <= 0 || image_size <= 0 || n_families <= 0)
        throw InvalidArgument("PhantomParams: counts must be positive");
    if (intensity_jitter < 0.0 || subject_texture < 0.0 || slice_gain_jitter < 0.0 || slice_bias_field < 0.0) throw InvalidArgument("PhantomParams: jitter must be non-negative");
}

void quantize_to_f32(Tensor &t) {
    for (auto &v : t.values()) v = static_cast<double>(static_cast<float>(v));
}

// ---------------------------------------------------------------- phantom

namespace {

struct Blob {
    double cx, cy;   // offset from head centre, in head-axis units
    double ax, ay;   // semi-axes, in head-axis units
    double angle;
    double level;    // geometry-field value inside
    double zc, zw;   // axial centre and width of the size profile
};

struct Wave {
    double fx, fy, phase, amp;
};

struct Template {
    double head_ax, head_ay, head_zc;
    std::vector<Blob> blobs;
};

struct SubjectGeometry {
    Template tpl;
    double cx, cy, z_shift, z_scale;
    double src_scale;
    std::vector<Wave> src_waves, tgt_waves;
};

double smooth_inside(double r2, double edge) {
    // ~1 inside the unit ellipse, ~0 outside, transition width `edge` in radius units.
    const double r = std::sqrt(r2);
    return 1.0 / (1.0 + std::exp((r - 1.0) / edge));
}

Template make_template(Rng &rng) {
    Template t;
    t.head_ax = 0.36 + 0.05 * rng.uniform();
    t.head_ay = 0.40 + 0.05 * rng.uniform();
    t.head_zc = 0.4 + 0.2 * rng.uniform();
    const int n = 5;
    for (int k = 0; k < n; ++k) {
        Blob b;
        b.cx = 0.9 * (rng.uniform() - 0.5);
        b.cy = 0.9 * (rng.uniform() - 0.5);
        b.ax = 0.12 + 0.22 * rng.uniform();
        b.ay = 0.12 + 0.22 * rng.uniform();
        b.angle = std::numbers::pi * rng.uniform();
        b.level = (k % 2 == 0) ? 0.65 + 0.3 * rng.uniform() : 0.05 + 0.2 * rng.uniform();
        b.zc = rng.uniform();
        b.zw = 0.25 + 0.35 * rng.uniform();
        t.blobs.push_back(b);
    }
    return t;
}

SubjectGeometry perturb(const Template &tpl, const PhantomParams &p, Rng &rng) {
    SubjectGeometry g;
    g.tpl = tpl;
    const double h = 1.0 + 0.04 * rng.normal();
    g.tpl.head_ax *= h;
    g.tpl.head_ay *= h * (1.0 + 0.02 * rng.normal());
    for (auto &b : g.tpl.blobs) {
        b.cx += 0.03 * rng.normal();
        b.cy += 0.03 * rng.normal();
        b.ax *= 1.0 + 0.06 * rng.normal();
        b.ay *= 1.0 + 0.06 * rng.normal();
        b.angle += 0.08 * rng.normal();
        b.level = std::clamp(b.level + 0.03 * rng.normal(), 0.0, 1.0);
        b.zc += 0.03 * rng.normal();
    }
    g.cx = 0.5 + 0.015 * rng.normal();
    g.cy = 0.5 + 0.015 * rng.normal();
    g.z_shift = 0.04 * rng.normal();
    g.z_scale = 1.0 + 0.04 * rng.normal();
    g.src_scale = std::clamp(1.0 - p.intensity_jitter * std::abs(rng.normal()) * 1.5, 0.2, 1.0);
    auto waves = [&](std::vector<Wave> &w) {
        for (int k = 0; k < 3; ++k) {
            const double f = 3.0 + 5.0 * rng.uniform();
            const double th = std::numbers::pi * rng.uniform();
            w.push_back({f * std::cos(th), f * std::sin(th), 2 * std::numbers::pi * rng.uniform(), p.subject_texture / 3.0});
        }
    };
    waves(g.src_waves);
    waves(g.tgt_waves);
    return g;
}

double texture(const std::vector<Wave> &waves, double u, double v, double z) {
    double acc = 0.0;
    for (const auto &w : waves) acc += w.amp * std::sin(2 * std::numbers::pi * (w.fx * u + w.fy * v) + w.phase + 1.5 * z);
    return acc;
}

struct Acquisition {
    double gain = 1.0;
    double field = 0.0;
    double fx = 1.0, fy = 0.0;
};

void render(const SubjectGeometry &g, double z_raw, const Acquisition &acq, int size, Tensor &src, Tensor &tgt) {
    const double z = (z_raw - 0.5) * g.z_scale + 0.5 + g.z_shift;
    // Head cross-section shrinks toward both axial ends.
    const double dz = (z - g.tpl.head_zc) / 0.8;
    const double head_scale = std::sqrt(std::max(0.12, 1.0 - dz * dz));
    const double ax = g.tpl.head_ax * head_scale, ay = g.tpl.head_ay * head_scale;

    struct Placed {
        double cx, cy, ca, sa, ax, ay, level, weight;
    };
    std::vector<Placed> placed;
    for (const auto &b : g.tpl.blobs) {
        const double prof = std::exp(-std::pow((z - b.zc) / b.zw, 2));
        if (prof < 0.05) continue;
        placed.push_back({g.cx + b.cx * ax, g.cy + b.cy * ay, std::cos(b.angle), std::sin(b.angle), b.ax * ax * prof,
                          b.ay * ay * prof, b.level, std::min(1.0, prof * 1.5)});
    }

    src = Tensor({size, size});
    tgt = Tensor({size, size});
    const double edge = 1.0 / (size * 0.12);
    for (int i = 0; i < size; ++i) {
        for (int j = 0; j < size; ++j) {
            const double u = (j + 0.5) / size, v = (i + 0.5) / size;
            const double hx = (u - g.cx) / ax, hy = (v - g.cy) / ay;
            const double r2 = hx * hx + hy * hy;
            if (r2 >= 1.0) continue; // hard head mask shared by both modalities
            // Skull ring, then tissue, then nested structures painted in order.
            double field = 0.35 + 0.55 * (1.0 - smooth_inside(r2 / (0.86 * 0.86), 0.03));
            for (const auto &b : placed) {
                const double du = u - b.cx, dv = v - b.cy;
                const double pu = (b.ca * du + b.sa * dv) / b.ax, pv = (-b.sa * du + b.ca * dv) / b.ay;
                const double w = b.weight * smooth_inside(pu * pu + pv * pv, edge);
                field += w * (b.level - field);
            }
            const double bias = acq.gain * (1.0 + acq.field * 2.0 * (acq.fx * (u - 0.5) + acq.fy * (v - 0.5)));
            const double s = bias * g.src_scale * (std::pow(std::clamp(field, 0.0, 1.0), 0.6) + texture(g.src_waves, u, v, z));
            const double inv = 1.0 - 1.0 / (1.0 + std::exp(-7.0 * (field - 0.5)));
            const double t = 0.08 + 0.9 * inv + texture(g.tgt_waves, u, v, z);
            src[static_cast<std::size_t>(i) * size + j] = std::clamp(s, 0.01, 1.0);
            tgt[static_cast<std::size_t>(i) * size + j] = std::clamp(t, 0.01, 1.0);
        }
    }
    quantize_to_f32(src);
    quantize_to_f32(tgt);
}

std::string subject_name(int k) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "s%03d", k);
    return buf;
}

} // namespace

std::vector<PairedVolume> generate_corpus(const PhantomParams &params, std::uint64_t seed) {
    params.validate();
    std::vector<Template> templates;
    for (int f = 0; f < params.n_families; ++f) {
        Rng rng(mix_seed(seed, 1000 + f));
        templates.push_back(make_template(rng));
    }
    std::vector<PairedVolume> out;
    for (int k = 0; k < params.n_subjects; ++k) {
        Rng rng(mix_seed(seed, k));
        const int family = k % params.n_families;
        const SubjectGeometry g = perturb(templates[family], params, rng);
        PairedVolume pv;
        pv.family = family;
        for (Volume *v : {&pv.source, &pv.target}) {
            v->subject_id = subject_name(k);
            v->modality = v == &pv.source ? Modality::source : Modality::target;
            v->dense_extent = params.slices_per_subject;
            v->height = v->width = params.image_size;
        }
        for (int p = 0; p < params.slices_per_subject; ++p) {
            const double z = params.slices_per_subject == 1 ? 0.5 : static_cast<double>(p) / (params.slices_per_subject - 1);
            Acquisition acq;
            acq.gain = 1.0 + params.slice_gain_jitter * (2.0 * rng.uniform() - 1.0);
            acq.field = params.slice_bias_field * rng.uniform();
            const double th = 2.0 * std::numbers::pi * rng.uniform();
            acq.fx = std::cos(th);
            acq.fy = std::sin(th);
            Tensor s, t;
            render(g, z, acq, params.image_size, s, t);
            pv.source.slices.push_back({std::move(s), pv.source.subject_id, Modality::source, p, 1.0});
            pv.target.slices.push_back({std::move(t), pv.target.subject_id, Modality::target, p, 1.0});
        }
        out.push_back(std::move(pv));
    }
    return out;
}

Volume sparsify(const Volume &volume, int factor) {
    if (factor < 1) throw InvalidArgument("sparsify: factor must be >= 1");
    if (static_cast<std::size_t>(factor) > volume.slices.size())
        throw InvalidArgument("sparsify: factor " + std::to_string(factor) + " exceeds slice count");
    // Factor is relative to the volume's current stride, so repeated
    // decimation composes: a dense volume has stride 1.
    long stride = 0;
    for (const auto &s : volume.slices) stride = std::gcd(stride, s.position);
    if (stride == 0) stride = 1;
    const long keep = stride * factor;
    Volume out = volume;
    out.slices.clear();
    for (const auto &s : volume.slices)
        if (s.position % keep == 0) out.slices.push_back(s);
    return out;
}

SliceLibrary::SliceLibrary(const std::vector<PairedVolume> &corpus) {
    for (const auto &pv : corpus)
        for (const auto &s : pv.source.slices) {
            const Slice *t = pv.target.find(s.position);
            if (!t) throw InvalidArgument("SliceLibrary: no target slice for " + pv.source.subject_id + " position " + std::to_string(s.position));
            slices_[{pv.source.subject_id, s.position}] = {s.pixels, t->pixels};
        }
}

bool SliceLibrary::contains(const std::string &subject_id, long position) const {
    return slices_.count({subject_id, position}) > 0;
}

const Tensor &SliceLibrary::source(const std::string &subject_id, long position) const {
    auto it = slices_.find({subject_id, position});
    if (it == slices_.end()) throw InvalidArgument("SliceLibrary: unknown slice " + subject_id + " position " + std::to_string(position));
    return it->second.first;
}

const Tensor &SliceLibrary::target(const std::string &subject_id, long position) const {
    auto it = slices_.find({subject_id, position});
    if (it == slices_.end()) throw InvalidArgument("SliceLibrary: unknown slice " + subject_id + " position " + std::to_string(position));
    return it->second.second;
}

// ---------------------------------------------------------------- persistence

namespace {

constexpr const char *kEncoding = "f32le";

std::string slice_file_name(long position) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "slice_%06ld.f32", position);
    return buf;
}

} // namespace

void save_volume(const Volume &volume, const fs::path &dir) {
    volume.validate();
    fs::create_directories(dir);
    for (const auto &entry : fs::directory_iterator(dir))
        if (entry.path().extension() == ".f32") fs::remove(entry.path());

    nlohmann::json m;
    m["format_version"] = 1;
    m["subject_id"] = volume.subject_id;
    m["modality"] = to_string(volume.modality);
    m["dense_extent"] = volume.dense_extent;
    m["spacing"] = volume.spacing;
    m["height"] = volume.height;
    m["width"] = volume.width;
    m["pixel_encoding"] = kEncoding;
    m["positions"] = volume.positions();
    {
        std::ofstream f(dir / "manifest.json");
        if (!f) throw ConfigError("cannot write " + (dir / "manifest.json").string());
        f << m.dump(2) << "\n";
    }
    std::vector<float> buf;
    for (const auto &s : volume.slices) {
        buf.assign(s.pixels.values().begin(), s.pixels.values().end());
        std::ofstream f(dir / slice_file_name(s.position), std::ios::binary | std::ios::trunc);
        f.write(reinterpret_cast<const char *>(buf.data()), static_cast<std::streamsize>(buf.size() * sizeof(float)));
    }
}

Volume load_volume(const fs::path &dir) {
    const fs::path mpath = dir / "manifest.json";
    std::ifstream mf(mpath);
    if (!mf) throw ManifestError("missing manifest " + mpath.string());
    Volume v;
    std::vector<long> positions;
    try {
        const auto m = nlohmann::json::parse(mf);
        if (m.at("pixel_encoding").get<std::string>() != kEncoding) throw ManifestError("unsupported pixel encoding");
        v.subject_id = m.at("subject_id").get<std::string>();
        v.modality = parse_modality(m.at("modality").get<std::string>());
        v.dense_extent = m.at("dense_extent").get<long>();
        v.spacing = m.at("spacing").get<double>();
        v.height = m.at("height").get<int>();
        v.width = m.at("width").get<int>();
        positions = m.at("positions").get<std::vector<long>>();
    } catch (const nlohmann::json::exception &e) {
        throw ManifestError("malformed manifest " + mpath.string() + ": " + e.what());
    } catch (const InvalidArgument &e) {
        throw ManifestError("malformed manifest " + mpath.string() + ": " + e.what());
    }
    if (v.height <= 0 || v.width <= 0 || v.dense_extent <= 0) throw ManifestError("manifest has non-positive dimensions");

    std::set<std::string> expected;
    for (long p : positions) expected.insert(slice_file_name(p));
    for (const auto &entry : fs::directory_iterator(dir))
        if (entry.path().extension() == ".f32" && !expected.count(entry.path().filename().string()))
            throw ManifestError("slice file " + entry.path().filename().string() + " not listed in the manifest");

    const std::size_t n = static_cast<std::size_t>(v.height) * v.width;
    std::vector<float> buf(n);
    for (long p : positions) {
        const fs::path sp = dir / slice_file_name(p);
        if (!fs::exists(sp)) throw MissingSliceError("missing slice file for position " + std::to_string(p), p);
        const auto bytes = fs::file_size(sp);
        if (bytes < n * sizeof(float)) throw TruncatedSliceError("slice file for position " + std::to_string(p) + " is truncated");
        if (bytes > n * sizeof(float)) throw ShapeMismatchError("slice file for position " + std::to_string(p) + " is larger than the manifest shape");
        std::ifstream f(sp, std::ios::binary);
        f.read(reinterpret_cast<char *>(buf.data()), static_cast<std::streamsize>(n * sizeof(float)));
        Slice s{Tensor({v.height, v.width}), v.subject_id, v.modality, p, v.spacing};
        for (std::size_t i = 0; i < n; ++i) {
            if (!(buf[i] >= 0.0f && buf[i] <= 1.0f))
                throw RangeError("pixel outside [0, 1] in slice " + std::to_string(p));
            s.pixels[i] = buf[i];
        }
        v.slices.push_back(std::move(s));
    }
    try {
        v.validate();
    } catch (const InvalidArgument &e) {
        throw ManifestError(std::string("inconsistent manifest: ") + e.what());
    }
    return v;
}

} // namespace sparsebridge
