#include "retain/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>
#include <stdexcept>

#include "retain/rng.hpp"

namespace retain {

namespace {

int64_t pixels_per_sample(const Tensor& images) {
    int64_t p = 1;
    for (size_t d = 1; d < images.rank(); ++d) p *= images.shape[d];
    return p;
}

uint32_t read_be32(std::istream& in, const char* what) {
    unsigned char b[4];
    in.read(reinterpret_cast<char*>(b), 4);
    if (!in) throw std::runtime_error(std::string("truncated file while reading ") + what);
    return (uint32_t(b[0]) << 24) | (uint32_t(b[1]) << 16) | (uint32_t(b[2]) << 8) | uint32_t(b[3]);
}

void write_be32(std::ostream& out, uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v >> 24), static_cast<unsigned char>(v >> 16),
                          static_cast<unsigned char>(v >> 8), static_cast<unsigned char>(v)};
    out.write(reinterpret_cast<char*>(b), 4);
}

}  // namespace

Tensor LabeledDataset::sample_batch(const std::vector<int64_t>& indices) const {
    const int64_t pp = pixels_per_sample(images);
    std::vector<int64_t> shape = images.shape;
    shape[0] = static_cast<int64_t>(indices.size());
    Tensor out(shape);
    for (size_t i = 0; i < indices.size(); ++i) {
        const int64_t src = indices[i];
        if (src < 0 || src >= size()) throw std::out_of_range("sample_batch: index out of range");
        std::memcpy(&out.data[i * static_cast<size_t>(pp)], &images.data[static_cast<size_t>(src * pp)],
                    static_cast<size_t>(pp) * sizeof(float));
    }
    return out;
}

void LabeledDataset::validate() const {
    if (images.rank() != 2 && images.rank() != 4)
        throw std::invalid_argument("dataset images must be [N,D] or [N,C,H,W], got " + images.shape_str());
    if (static_cast<int64_t>(labels.size()) != size())
        throw std::invalid_argument("dataset: label count != image count");
    if (!groups.empty() && static_cast<int64_t>(groups.size()) != size())
        throw std::invalid_argument("dataset: group count != image count");
    for (int y : labels)
        if (y < 0 || y >= class_count) throw std::invalid_argument("dataset: label out of range");
    for (float v : images.data)
        if (!(v >= 0.0f && v <= 1.0f)) throw std::invalid_argument("dataset: image value outside [0,1]");
}

void LabeledDataset::save_container(const std::string& path) const {
    if (images.rank() != 4) throw std::invalid_argument("save_container: expected [N,C,H,W] images");
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("save_container: cannot open " + path);
    out << images.shape[0] << "," << images.shape[1] << "," << images.shape[2] << "," << images.shape[3] << ","
        << class_count << "\n";
    const int64_t pp = pixels_per_sample(images);
    for (int64_t i = 0; i < size(); ++i) {
        for (int64_t j = 0; j < pp; ++j) {
            float v = images.data[static_cast<size_t>(i * pp + j)];
            uint32_t bits;
            std::memcpy(&bits, &v, 4);
            unsigned char b[4] = {static_cast<unsigned char>(bits), static_cast<unsigned char>(bits >> 8),
                                  static_cast<unsigned char>(bits >> 16), static_cast<unsigned char>(bits >> 24)};
            out.write(reinterpret_cast<char*>(b), 4);
        }
        unsigned char lab = static_cast<unsigned char>(labels[static_cast<size_t>(i)]);
        out.write(reinterpret_cast<char*>(&lab), 1);
    }
    if (!out) throw std::runtime_error("save_container: write failed for " + path);
}

LabeledDataset LabeledDataset::load_container(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("load_container: cannot open " + path);
    std::string header;
    if (!std::getline(in, header)) throw std::runtime_error("load_container: missing header");
    long long n, c, h, w, k;
    if (std::sscanf(header.c_str(), "%lld,%lld,%lld,%lld,%lld", &n, &c, &h, &w, &k) != 5)
        throw std::runtime_error("load_container: bad header '" + header + "'");
    LabeledDataset ds;
    ds.class_count = k;
    ds.images = Tensor({n, c, h, w});
    ds.labels.resize(static_cast<size_t>(n));
    const int64_t pp = c * h * w;
    for (int64_t i = 0; i < n; ++i) {
        for (int64_t j = 0; j < pp; ++j) {
            unsigned char b[4];
            in.read(reinterpret_cast<char*>(b), 4);
            if (!in) throw std::runtime_error("load_container: truncated payload");
            uint32_t bits = uint32_t(b[0]) | (uint32_t(b[1]) << 8) | (uint32_t(b[2]) << 16) | (uint32_t(b[3]) << 24);
            float v;
            std::memcpy(&v, &bits, 4);
            ds.images.data[static_cast<size_t>(i * pp + j)] = v;
        }
        unsigned char lab;
        in.read(reinterpret_cast<char*>(&lab), 1);
        if (!in) throw std::runtime_error("load_container: truncated labels");
        ds.labels[static_cast<size_t>(i)] = lab;
    }
    ds.provenance = "container:" + path;
    ds.validate();
    return ds;
}

std::vector<int64_t> PermutationTask::inverse() const {
    std::vector<int64_t> inv(forward.size());
    for (size_t i = 0; i < forward.size(); ++i) inv[static_cast<size_t>(forward[i])] = static_cast<int64_t>(i);
    return inv;
}

PermutationTask make_pixel_permutation(int64_t dim, uint64_t seed) {
    PermutationTask task;
    task.seed = seed;
    if (seed == 0) {
        task.forward.resize(static_cast<size_t>(dim));
        for (int64_t i = 0; i < dim; ++i) task.forward[static_cast<size_t>(i)] = i;
    } else {
        Rng rng(mix_seeds(0x7065726dULL, seed));
        task.forward = rng.permutation(dim);
    }
    return task;
}

LabeledDataset make_permuted_task(const LabeledDataset& base, uint64_t seed) {
    const int64_t pp = pixels_per_sample(base.images);
    PermutationTask task = make_pixel_permutation(pp, seed);
    LabeledDataset out = base;
    out.provenance = base.provenance + "|perm:" + std::to_string(seed);
    // out[i][j] = base[i][perm[j]]: destination pixel j reads source perm[j]
    for (int64_t i = 0; i < base.size(); ++i)
        for (int64_t j = 0; j < pp; ++j)
            out.images.data[static_cast<size_t>(i * pp + j)] =
                base.images.data[static_cast<size_t>(i * pp + task.forward[static_cast<size_t>(j)])];
    return out;
}

namespace {

void apply_domain_spec(Tensor& images, const SyntheticDomainSpec& spec) {
    Rng noise(mix_seeds(0x646f6dULL, spec.seed));
    for (auto& v : images.data) {
        float t = spec.gain * v + spec.offset;
        if (spec.noise_sigma > 0.0f) t += static_cast<float>(noise.next_normal() * spec.noise_sigma);
        v = std::clamp(t, 0.0f, 1.0f);
    }
}

}  // namespace

std::pair<LabeledDataset, LabeledDataset> make_synthetic_domain_pair(int64_t n_per_class, int64_t class_count,
                                                                     int64_t image_size,
                                                                     const SyntheticDomainSpec& spec_o,
                                                                     const SyntheticDomainSpec& spec_t, uint64_t seed,
                                                                     int64_t images_per_group) {
    if (n_per_class < 1 || class_count < 2 || image_size < 8)
        throw std::invalid_argument("make_synthetic_domain_pair: degenerate size");
    const int64_t n = n_per_class * class_count;
    LabeledDataset base;
    base.class_count = class_count;
    base.images = Tensor({n, 1, image_size, image_size});
    base.labels.resize(static_cast<size_t>(n));
    if (images_per_group > 1) base.groups.resize(static_cast<size_t>(n));

    Rng rng(mix_seeds(0x72696e67ULL, seed));
    const double s = static_cast<double>(image_size);
    const int64_t hw = image_size * image_size;
    for (int64_t i = 0; i < n; ++i) {
        const int64_t cls = i % class_count;
        base.labels[static_cast<size_t>(i)] = static_cast<int>(cls);
        if (images_per_group > 1) base.groups[static_cast<size_t>(i)] = i / images_per_group;
        // concentric rings: radial frequency encodes the (ordinal) class
        const double freq = 2.0 + 1.5 * static_cast<double>(cls);
        const double phase = rng.next_uniform() * 2.0 * std::numbers::pi;
        const double cx = s / 2.0 + (rng.next_uniform() - 0.5) * s / 6.0;
        const double cy = s / 2.0 + (rng.next_uniform() - 0.5) * s / 6.0;
        const double amp = 0.75 + 0.2 * rng.next_uniform();
        float* img = &base.images.data[static_cast<size_t>(i * hw)];
        for (int64_t y = 0; y < image_size; ++y)
            for (int64_t x = 0; x < image_size; ++x) {
                const double dx = (static_cast<double>(x) - cx) / s;
                const double dy = (static_cast<double>(y) - cy) / s;
                const double r = std::sqrt(dx * dx + dy * dy);
                const double envelope = std::exp(-r * r / (2.0 * 0.16 * 0.16));
                const double v = amp * envelope * (0.5 + 0.5 * std::sin(2.0 * std::numbers::pi * freq * r + phase));
                img[y * image_size + x] = static_cast<float>(std::clamp(v, 0.0, 1.0));
            }
    }

    LabeledDataset o = base;
    o.provenance = "synthetic:o";
    apply_domain_spec(o.images, spec_o);
    LabeledDataset t = base;
    t.provenance = "synthetic:t";
    apply_domain_spec(t.images, spec_t);
    o.validate();
    t.validate();
    return {std::move(o), std::move(t)};
}

std::tuple<LabeledDataset, LabeledDataset, LabeledDataset> split(const LabeledDataset& ds, const SplitSpec& spec) {
    const int64_t n = ds.size();
    if (n < 10) throw std::invalid_argument("split: dataset too small for a 7:2:1 split");
    Rng rng(mix_seeds(0x73706c69ULL, spec.seed));
    std::vector<int64_t> order = rng.permutation(n);
    const int64_t cut1 = (7 * n + 5) / 10;  // round(0.7 n)
    const int64_t cut2 = (9 * n + 5) / 10;  // round(0.9 n)
    std::vector<int64_t> tr(order.begin(), order.begin() + cut1);
    std::vector<int64_t> va(order.begin() + cut1, order.begin() + cut2);
    std::vector<int64_t> te(order.begin() + cut2, order.end());
    return {take(ds, tr), take(ds, va), take(ds, te)};
}

LabeledDataset load_mnist_idx(const std::string& images_path, const std::string& labels_path) {
    std::ifstream img(images_path, std::ios::binary);
    if (!img) throw std::runtime_error("cannot open image file " + images_path);
    const uint32_t magic_i = read_be32(img, "image magic");
    if (magic_i != 2051) throw std::runtime_error("bad image magic " + std::to_string(magic_i) + " (want 2051)");
    const uint32_t n_img = read_be32(img, "image count");
    const uint32_t rows = read_be32(img, "rows");
    const uint32_t cols = read_be32(img, "cols");

    std::ifstream lbl(labels_path, std::ios::binary);
    if (!lbl) throw std::runtime_error("cannot open label file " + labels_path);
    const uint32_t magic_l = read_be32(lbl, "label magic");
    if (magic_l != 2049) throw std::runtime_error("bad label magic " + std::to_string(magic_l) + " (want 2049)");
    const uint32_t n_lbl = read_be32(lbl, "label count");
    if (n_img != n_lbl)
        throw std::runtime_error("image/label count mismatch: " + std::to_string(n_img) + " vs " + std::to_string(n_lbl));

    LabeledDataset ds;
    ds.class_count = 10;
    ds.provenance = "idx:" + images_path;
    ds.images = Tensor({static_cast<int64_t>(n_img), 1, static_cast<int64_t>(rows), static_cast<int64_t>(cols)});
    ds.labels.resize(n_img);

    const size_t n_pixels = static_cast<size_t>(n_img) * rows * cols;
    std::vector<unsigned char> raw(n_pixels);
    img.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(n_pixels));
    if (static_cast<size_t>(img.gcount()) != n_pixels) throw std::runtime_error("truncated image payload in " + images_path);
    for (size_t i = 0; i < n_pixels; ++i) ds.images.data[i] = static_cast<float>(raw[i]) / 255.0f;

    std::vector<unsigned char> rawl(n_img);
    lbl.read(reinterpret_cast<char*>(rawl.data()), static_cast<std::streamsize>(n_img));
    if (static_cast<size_t>(lbl.gcount()) != n_img) throw std::runtime_error("truncated label payload in " + labels_path);
    for (size_t i = 0; i < n_img; ++i) {
        if (rawl[i] > 9) throw std::runtime_error("label byte out of range in " + labels_path);
        ds.labels[i] = rawl[i];
    }
    return ds;
}

void save_mnist_idx(const LabeledDataset& ds, const std::string& images_path, const std::string& labels_path) {
    if (ds.images.rank() != 4 || ds.images.shape[1] != 1)
        throw std::invalid_argument("save_mnist_idx: expected [N,1,H,W] images");
    std::ofstream img(images_path, std::ios::binary);
    if (!img) throw std::runtime_error("cannot open " + images_path);
    write_be32(img, 2051);
    write_be32(img, static_cast<uint32_t>(ds.images.shape[0]));
    write_be32(img, static_cast<uint32_t>(ds.images.shape[2]));
    write_be32(img, static_cast<uint32_t>(ds.images.shape[3]));
    for (float v : ds.images.data) {
        const float clipped = std::clamp(v, 0.0f, 1.0f);
        unsigned char b = static_cast<unsigned char>(std::lround(clipped * 255.0f));
        img.write(reinterpret_cast<char*>(&b), 1);
    }
    std::ofstream lbl(labels_path, std::ios::binary);
    if (!lbl) throw std::runtime_error("cannot open " + labels_path);
    write_be32(lbl, 2049);
    write_be32(lbl, static_cast<uint32_t>(ds.labels.size()));
    for (int y : ds.labels) {
        unsigned char b = static_cast<unsigned char>(y);
        lbl.write(reinterpret_cast<char*>(&b), 1);
    }
}

namespace {

// segment layout of a 7-segment display; each digit lights a subset
//   0: top  1: top-left  2: top-right  3: middle  4: bottom-left
//   5: bottom-right  6: bottom
constexpr int kSegmentsByDigit[10] = {
    0b1110111,  // 0
    0b0100100,  // 1
    0b1011101,  // 2
    0b1101101,  // 3
    0b0101110,  // 4
    0b1101011,  // 5
    0b1111011,  // 6
    0b0100101,  // 7
    0b1111111,  // 8
    0b1101111,  // 9
};

struct Seg {
    double x0, y0, x1, y1;
};

// segment endpoints in a unit glyph box
constexpr Seg kSegGeom[7] = {
    {0.15, 0.05, 0.85, 0.05},  // top
    {0.12, 0.10, 0.12, 0.48},  // top-left
    {0.88, 0.10, 0.88, 0.48},  // top-right
    {0.15, 0.50, 0.85, 0.50},  // middle
    {0.12, 0.52, 0.12, 0.90},  // bottom-left
    {0.88, 0.52, 0.88, 0.90},  // bottom-right
    {0.15, 0.95, 0.85, 0.95},  // bottom
};

double dist_to_segment(double px, double py, const Seg& s) {
    const double vx = s.x1 - s.x0, vy = s.y1 - s.y0;
    const double wx = px - s.x0, wy = py - s.y0;
    const double len2 = vx * vx + vy * vy;
    double t = len2 > 0 ? (wx * vx + wy * vy) / len2 : 0.0;
    t = std::clamp(t, 0.0, 1.0);
    const double dx = px - (s.x0 + t * vx), dy = py - (s.y0 + t * vy);
    return std::sqrt(dx * dx + dy * dy);
}

}  // namespace

LabeledDataset make_digit_glyphs(int64_t n, uint64_t seed) {
    constexpr int64_t S = 28;
    LabeledDataset ds;
    ds.class_count = 10;
    ds.provenance = "glyphs:" + std::to_string(seed);
    ds.images = Tensor({n, 1, S, S});
    ds.labels.resize(static_cast<size_t>(n));

    Rng rng(mix_seeds(0x676c79ULL, seed));
    for (int64_t i = 0; i < n; ++i) {
        const int digit = static_cast<int>(rng.next_below(10));
        ds.labels[static_cast<size_t>(i)] = digit;
        const int mask = kSegmentsByDigit[digit];

        const double jx = (rng.next_uniform() - 0.5) * 6.0;  // glyph placement jitter, px
        const double jy = (rng.next_uniform() - 0.5) * 6.0;
        const double glyph_w = 12.0 + rng.next_uniform() * 4.0;
        const double glyph_h = 16.0 + rng.next_uniform() * 4.0;
        const double thick = 0.055 + rng.next_uniform() * 0.035;  // in glyph units
        const double shear = (rng.next_uniform() - 0.5) * 0.25;
        const double bright = 0.8 + 0.2 * rng.next_uniform();

        float* img = &ds.images.data[static_cast<size_t>(i * S * S)];
        for (int64_t y = 0; y < S; ++y)
            for (int64_t x = 0; x < S; ++x) {
                // map pixel into glyph box coordinates
                const double gy = (static_cast<double>(y) - (S - glyph_h) / 2.0 - jy) / glyph_h;
                const double gx = (static_cast<double>(x) - (S - glyph_w) / 2.0 - jx) / glyph_w - shear * (gy - 0.5);
                double v = 0.0;
                if (gx > -0.2 && gx < 1.2 && gy > -0.2 && gy < 1.2) {
                    double dmin = 1e9;
                    for (int s = 0; s < 7; ++s)
                        if (mask & (1 << (6 - s))) dmin = std::min(dmin, dist_to_segment(gx, gy, kSegGeom[s]));
                    // soft-edged stroke
                    v = bright / (1.0 + std::exp((dmin - thick) / 0.02));
                }
                v += rng.next_normal() * 0.02;
                img[y * S + x] = static_cast<float>(std::clamp(v, 0.0, 1.0));
            }
    }
    ds.validate();
    return ds;
}

void warp_image(const float* src, float* dst, int64_t h, int64_t w, double angle_rad, bool flip) {
    const double ca = std::cos(angle_rad), sa = std::sin(angle_rad);
    const double cy = (static_cast<double>(h) - 1.0) / 2.0, cx = (static_cast<double>(w) - 1.0) / 2.0;
    for (int64_t y = 0; y < h; ++y)
        for (int64_t x = 0; x < w; ++x) {
            // inverse-rotate destination into source coordinates
            const double dx = static_cast<double>(x) - cx, dy = static_cast<double>(y) - cy;
            double sx = ca * dx + sa * dy + cx;
            const double sy = -sa * dx + ca * dy + cy;
            if (flip) sx = static_cast<double>(w) - 1.0 - sx;
            const int64_t x0 = static_cast<int64_t>(std::floor(sx)), y0 = static_cast<int64_t>(std::floor(sy));
            const double fx = sx - static_cast<double>(x0), fy = sy - static_cast<double>(y0);
            auto at = [&](int64_t yy, int64_t xx) -> double {
                if (yy < 0 || yy >= h || xx < 0 || xx >= w) return 0.0;
                return src[yy * w + xx];
            };
            const double v = (1 - fy) * ((1 - fx) * at(y0, x0) + fx * at(y0, x0 + 1)) +
                             fy * ((1 - fx) * at(y0 + 1, x0) + fx * at(y0 + 1, x0 + 1));
            dst[y * w + x] = static_cast<float>(std::clamp(v, 0.0, 1.0));
        }
}

Tensor augment(const Tensor& batch, uint64_t seed) {
    if (batch.rank() != 4) throw std::invalid_argument("augment: expected [N,C,H,W] batch");
    const int64_t N = batch.shape[0], C = batch.shape[1], H = batch.shape[2], W = batch.shape[3];
    Tensor out(batch.shape);
    Rng rng(mix_seeds(0x617567ULL, seed));
    for (int64_t n = 0; n < N; ++n) {
        const bool flip = rng.next_bool(0.5);
        const double angle = (rng.next_uniform() * 2.0 - 1.0) * 45.0 * std::numbers::pi / 180.0;
        for (int64_t c = 0; c < C; ++c) {
            const float* src = &batch.data[static_cast<size_t>(((n * C) + c) * H * W)];
            float* dst = &out.data[static_cast<size_t>(((n * C) + c) * H * W)];
            warp_image(src, dst, H, W, angle, flip);
        }
    }
    return out;
}

LabeledDataset take(const LabeledDataset& ds, const std::vector<int64_t>& indices) {
    LabeledDataset out;
    out.class_count = ds.class_count;
    out.provenance = ds.provenance;
    out.images = ds.sample_batch(indices);
    out.labels.reserve(indices.size());
    for (int64_t i : indices) out.labels.push_back(ds.labels[static_cast<size_t>(i)]);
    if (!ds.groups.empty())
        for (int64_t i : indices) out.groups.push_back(ds.groups[static_cast<size_t>(i)]);
    return out;
}

LabeledDataset concat(const LabeledDataset& a, const LabeledDataset& b) {
    if (a.class_count != b.class_count) throw std::invalid_argument("concat: class_count mismatch");
    std::vector<int64_t> sa(a.images.shape.begin() + 1, a.images.shape.end());
    std::vector<int64_t> sb(b.images.shape.begin() + 1, b.images.shape.end());
    if (sa != sb) throw std::invalid_argument("concat: sample shape mismatch");
    LabeledDataset out;
    out.class_count = a.class_count;
    out.provenance = a.provenance + "+" + b.provenance;
    std::vector<int64_t> shape = a.images.shape;
    shape[0] = a.size() + b.size();
    out.images = Tensor(shape);
    std::copy(a.images.data.begin(), a.images.data.end(), out.images.data.begin());
    std::copy(b.images.data.begin(), b.images.data.end(), out.images.data.begin() + a.images.data.size());
    out.labels = a.labels;
    out.labels.insert(out.labels.end(), b.labels.begin(), b.labels.end());
    // groups are per-source identifiers; offset b's to keep them disjoint
    if (!a.groups.empty() && !b.groups.empty()) {
        int64_t offset = 0;
        for (int64_t g : a.groups) offset = std::max(offset, g + 1);
        out.groups = a.groups;
        for (int64_t g : b.groups) out.groups.push_back(g + offset);
    }
    return out;
}

}  // namespace retain
