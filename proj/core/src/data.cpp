#include "xmreg/data.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "xmreg/errors.hpp"
#include "xmreg/image_io.hpp"

namespace xmreg::data {

namespace fs = std::filesystem;
using geometry::CornerDisplacement;
using geometry::Frame;
using geometry::Homography;
using nlohmann::json;

const CornerDisplacement& PairRecord::gt_for_eval() const {
    if (split != Split::Test)
        throw Error("ground-truth displacement requested on a non-evaluation record");
    if (!gt) throw Error("evaluation record lacks ground-truth displacement");
    return *gt;
}

std::vector<size_t> Dataset::indices(Split s) const {
    std::vector<size_t> out;
    for (size_t i = 0; i < records.size(); ++i)
        if (records[i].split == s) out.push_back(i);
    return out;
}

Tensor to_unit_range(const Tensor& img01) {
    Tensor out = img01;
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = 2.0 * out[i] - 1.0;
    return out;
}

Tensor from_unit_range(const Tensor& imgpm1) {
    Tensor out = imgpm1;
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = 0.5 * (out[i] + 1.0);
    return out;
}

void save_dp_sidecar(const std::string& path, const CornerDisplacement& dp) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw Error("cannot write sidecar: " + path);
    f.precision(17);
    for (const auto& c : dp.dp) f << c[0] << " " << c[1] << "\n";
}

CornerDisplacement load_dp_sidecar(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw MissingFile("sidecar not found: " + path);
    CornerDisplacement dp;
    for (auto& c : dp.dp)
        if (!(f >> c[0] >> c[1])) throw ManifestMismatch("malformed sidecar: " + path);
    return dp;
}

Dataset ingest(const std::string& dir, const std::string& manifest_file) {
    const fs::path root(dir);
    const fs::path mpath = root / manifest_file;
    std::ifstream mf(mpath);
    if (!mf) throw MissingFile("manifest not found: " + mpath.string());
    json m;
    try {
        m = json::parse(mf);
    } catch (const std::exception& e) {
        throw ManifestMismatch("manifest is not valid json: " + std::string(e.what()));
    }
    if (!m.contains("dataset") || !m.contains("kind") || !m.contains("records"))
        throw ManifestMismatch("manifest must contain dataset, kind, records");

    Dataset ds;
    ds.tag = m.at("dataset").get<std::string>();
    const std::string kind = m.at("kind").get<std::string>();
    if (kind != "aligned" && kind != "unaligned")
        throw ManifestMismatch("manifest kind must be aligned or unaligned");
    ds.aligned = kind == "aligned";

    for (const auto& r : m.at("records")) {
        PairRecord rec;
        rec.dataset_tag = ds.tag;
        const std::string sp = r.at("source").get<std::string>();
        const std::string tp = r.at("target").get<std::string>();
        rec.source_path = (root / sp).string();
        rec.target_path = (root / tp).string();
        if (!fs::exists(rec.source_path)) throw MissingFile("missing file: " + rec.source_path);
        if (!fs::exists(rec.target_path)) throw MissingFile("missing file: " + rec.target_path);
        rec.source = to_unit_range(io::load_pgm(rec.source_path));
        rec.target = to_unit_range(io::load_pgm(rec.target_path));
        const std::string split = r.at("split").get<std::string>();
        if (split == "train")
            rec.split = Split::Train;
        else if (split == "test")
            rec.split = Split::Test;
        else
            throw ManifestMismatch("record split must be train or test");
        if (r.contains("dp")) {
            const std::string dpath = (root / r.at("dp").get<std::string>()).string();
            if (!fs::exists(dpath)) throw MissingFile("missing file: " + dpath);
            rec.gt = load_dp_sidecar(dpath);
        }
        if (!ds.aligned && rec.split == Split::Test && !rec.gt)
            throw ManifestMismatch("unaligned test record lacks dp sidecar");
        ds.records.push_back(std::move(rec));
    }
    return ds;
}

namespace {

Tensor crop(const Tensor& img, int64_t oy, int64_t ox, int64_t size) {
    Tensor out({1, size, size});
    const int64_t w = img.dim(2);
    for (int64_t y = 0; y < size; ++y)
        for (int64_t x = 0; x < size; ++x)
            out.data()[y * size + x] = img.data()[(y + oy) * w + (x + ox)];
    return out;
}

} // namespace

PairRecord make_unaligned(const PairRecord& aligned, double rho, int64_t patch, Rng& rng) {
    const int64_t h = aligned.source.dim(1), w = aligned.source.dim(2);
    const int64_t margin = std::min(h, w) == 0 ? 0 : std::min((h - patch) / 2, (w - patch) / 2);
    if (patch > h || patch > w || static_cast<double>(margin) < rho)
        throw PatchTooLarge("patch " + std::to_string(patch) + " with margin >= rho=" +
                            std::to_string(rho) + " does not fit in " + std::to_string(w) + "x" +
                            std::to_string(h));
    const int64_t oy = (h - patch) / 2, ox = (w - patch) / 2;
    const Frame pf{patch, patch};
    const auto pcorners = geometry::frame_corners(pf);

    for (int attempt = 0; attempt < 16; ++attempt) {
        auto [hp, dp] = geometry::random_homography(rng, rho, pf);
        (void)hp;
        // full-image homography acting like corners_to_homography(dp) in window coords
        std::array<std::array<double, 2>, 4> src, dst;
        for (int i = 0; i < 4; ++i) {
            src[i] = {pcorners[i][0] + static_cast<double>(ox),
                      pcorners[i][1] + static_cast<double>(oy)};
            dst[i] = {src[i][0] + dp.dp[i][0], src[i][1] + dp.dp[i][1]};
        }
        Homography h_full;
        try {
            h_full = geometry::dlt(src, dst);
        } catch (const DegenerateCorners&) {
            continue;
        }
        const auto warped = geometry::warp(aligned.target, h_full);
        // padding must not reach the window
        bool clean = true;
        for (int64_t y = 0; y < patch && clean; ++y)
            for (int64_t x = 0; x < patch; ++x)
                if (warped.mask.data()[(y + oy) * w + (x + ox)] == 0.0) {
                    clean = false;
                    break;
                }
        if (!clean) continue;

        PairRecord out;
        out.dataset_tag = aligned.dataset_tag;
        out.split = aligned.split;
        out.source = crop(aligned.source, oy, ox, patch);
        out.target = crop(warped.image, oy, ox, patch);
        out.gt = dp;
        return out;
    }
    throw PatchTooLarge("make_unaligned: no clean draw after 16 attempts (rho too large?)");
}

Tensor resize_bilinear(const Tensor& img, int64_t out_h, int64_t out_w) {
    const int64_t c = img.dim(0), h = img.dim(1), w = img.dim(2);
    if (h == out_h && w == out_w) return img;
    Tensor out({c, out_h, out_w});
    const double sy = static_cast<double>(h) / static_cast<double>(out_h);
    const double sx = static_cast<double>(w) / static_cast<double>(out_w);
    for (int64_t ch = 0; ch < c; ++ch) {
        const double* src = img.data() + ch * h * w;
        double* dst = out.data() + ch * out_h * out_w;
        for (int64_t y = 0; y < out_h; ++y) {
            double fy = (static_cast<double>(y) + 0.5) * sy - 0.5;
            fy = std::min(std::max(fy, 0.0), static_cast<double>(h - 1));
            const int64_t y0 = static_cast<int64_t>(fy);
            const int64_t y1 = std::min(y0 + 1, h - 1);
            const double ay = fy - static_cast<double>(y0);
            for (int64_t x = 0; x < out_w; ++x) {
                double fx = (static_cast<double>(x) + 0.5) * sx - 0.5;
                fx = std::min(std::max(fx, 0.0), static_cast<double>(w - 1));
                const int64_t x0 = static_cast<int64_t>(fx);
                const int64_t x1 = std::min(x0 + 1, w - 1);
                const double ax = fx - static_cast<double>(x0);
                dst[y * out_w + x] = (1 - ay) * ((1 - ax) * src[y0 * w + x0] + ax * src[y0 * w + x1]) +
                                     ay * ((1 - ax) * src[y1 * w + x0] + ax * src[y1 * w + x1]);
            }
        }
    }
    return out;
}

Tensor resize_protocol(const Tensor& img, const std::string& tag, const DatasetSection& cfg) {
    const auto it = cfg.resize.find(tag);
    if (it == cfg.resize.end()) return img;
    if (it->second.size() != 2) throw ConfigError("dataset.resize entries must be [height,width]");
    return resize_bilinear(img, it->second[0], it->second[1]);
}

namespace {

// separable 3x3 binomial blur with edge clamping
Tensor blur3(const Tensor& img) {
    const int64_t h = img.dim(1), w = img.dim(2);
    Tensor tmp = img, out = img;
    for (int64_t y = 0; y < h; ++y)
        for (int64_t x = 0; x < w; ++x) {
            const int64_t xm = std::max<int64_t>(0, x - 1), xp = std::min(w - 1, x + 1);
            tmp.data()[y * w + x] = 0.25 * img.data()[y * w + xm] + 0.5 * img.data()[y * w + x] +
                                    0.25 * img.data()[y * w + xp];
        }
    for (int64_t y = 0; y < h; ++y)
        for (int64_t x = 0; x < w; ++x) {
            const int64_t ym = std::max<int64_t>(0, y - 1), yp = std::min(h - 1, y + 1);
            out.data()[y * w + x] = 0.25 * tmp.data()[ym * w + x] + 0.5 * tmp.data()[y * w + x] +
                                    0.25 * tmp.data()[yp * w + x];
        }
    return out;
}

Tensor gradient_magnitude(const Tensor& img) {
    const int64_t h = img.dim(1), w = img.dim(2);
    Tensor out({1, h, w});
    for (int64_t y = 0; y < h; ++y)
        for (int64_t x = 0; x < w; ++x) {
            const int64_t xm = std::max<int64_t>(0, x - 1), xp = std::min(w - 1, x + 1);
            const int64_t ym = std::max<int64_t>(0, y - 1), yp = std::min(h - 1, y + 1);
            const double gx = 0.5 * (img.data()[y * w + xp] - img.data()[y * w + xm]);
            const double gy = 0.5 * (img.data()[yp * w + x] - img.data()[ym * w + x]);
            out.data()[y * w + x] = std::hypot(gx, gy);
        }
    return out;
}

// smooth random field in [0,1]: a few dozen anisotropic bumps over a ramp
Tensor toy_source(int64_t size, Rng& rng) {
    Tensor img({1, size, size});
    const double gx = rng.uniform(-0.3, 0.3), gy = rng.uniform(-0.3, 0.3);
    for (int64_t y = 0; y < size; ++y)
        for (int64_t x = 0; x < size; ++x)
            img.data()[y * size + x] = 0.5 + gx * (static_cast<double>(x) / size - 0.5) +
                                       gy * (static_cast<double>(y) / size - 0.5);
    const int bumps = 24;
    for (int b = 0; b < bumps; ++b) {
        const double cx = rng.uniform(0, static_cast<double>(size));
        const double cy = rng.uniform(0, static_cast<double>(size));
        const double sx = rng.uniform(2.5, size / 6.0);
        const double sy = rng.uniform(2.5, size / 6.0);
        const double th = rng.uniform(0, 3.14159265358979323846);
        const double amp = rng.uniform(-0.45, 0.45);
        const double ct = std::cos(th), st = std::sin(th);
        for (int64_t y = 0; y < size; ++y)
            for (int64_t x = 0; x < size; ++x) {
                const double dx = static_cast<double>(x) - cx, dy = static_cast<double>(y) - cy;
                const double u = (ct * dx + st * dy) / sx;
                const double v = (-st * dx + ct * dy) / sy;
                img.data()[y * size + x] += amp * std::exp(-0.5 * (u * u + v * v));
            }
    }
    // squash softly into [0,1]
    for (int64_t i = 0; i < img.numel(); ++i)
        img[i] = 0.5 + 0.5 * std::tanh(2.0 * (img[i] - 0.5));
    return img;
}

// synthetic second modality: inverted blurred content mixed with an edge map
Tensor toy_target_from_source(const Tensor& src) {
    const Tensor blurred = blur3(blur3(src));
    Tensor edges = gradient_magnitude(src);
    const double emax = std::max(edges.max(), 1e-9);
    Tensor out = src;
    for (int64_t i = 0; i < out.numel(); ++i) {
        const double inv = 1.0 - blurred[i];
        const double e = edges[i] / emax;
        out[i] = std::min(1.0, std::max(0.0, 0.72 * inv + 0.28 * std::sqrt(e)));
    }
    return out;
}

} // namespace

void generate_toy_dataset(const std::string& dir, int pairs, int64_t image_size, uint64_t seed,
                          int train_count) {
    const fs::path root(dir);
    fs::create_directories(root / "pairs");
    if (train_count < 0) train_count = pairs * 3 / 4;

    Rng rng(seed);
    json records = json::array();
    for (int i = 0; i < pairs; ++i) {
        Rng prng = rng.spawn();
        const Tensor src = toy_source(image_size, prng);
        const Tensor tgt = toy_target_from_source(src);
        char name[64];
        std::snprintf(name, sizeof(name), "pairs/%04d_src.pgm", i);
        io::save_pgm((root / name).string(), src);
        const std::string sname = name;
        std::snprintf(name, sizeof(name), "pairs/%04d_tgt.pgm", i);
        io::save_pgm((root / name).string(), tgt);
        records.push_back({{"source", sname},
                           {"target", std::string(name)},
                           {"split", i < train_count ? "train" : "test"}});
    }
    json manifest = {{"dataset", "toy"}, {"kind", "aligned"}, {"records", records}};
    std::ofstream mf(root / "manifest.json", std::ios::trunc);
    mf << manifest.dump(2) << "\n";
}

int prepare_unaligned(const std::string& aligned_dir, const std::string& out_dir,
                      const DatasetSection& cfg, uint64_t seed) {
    Dataset src = ingest(aligned_dir, cfg.manifest);
    if (!src.aligned) throw ManifestMismatch("prepare_unaligned expects an aligned dataset");

    const fs::path root(out_dir);
    fs::create_directories(root / "pairs");
    json records = json::array();
    Rng rng(seed);
    int count = 0;
    for (size_t r = 0; r < src.records.size(); ++r) {
        const auto& rec = src.records[r];
        Tensor s = resize_protocol(rec.source, cfg.tag, cfg);
        Tensor t = resize_protocol(rec.target, cfg.tag, cfg);
        PairRecord base;
        base.source = s;
        base.target = t;
        base.split = rec.split;
        base.dataset_tag = cfg.tag;
        for (int o = 0; o < cfg.oversample; ++o) {
            Rng prng = rng.spawn();
            PairRecord un = make_unaligned(base, cfg.rho, cfg.patch, prng);
            char name[96];
            std::snprintf(name, sizeof(name), "pairs/%05d_src.pgm", count);
            io::save_pgm((root / name).string(), from_unit_range(un.source));
            const std::string sname = name;
            std::snprintf(name, sizeof(name), "pairs/%05d_tgt.pgm", count);
            io::save_pgm((root / name).string(), from_unit_range(un.target));
            const std::string tname = name;
            json entry = {{"source", sname},
                          {"target", tname},
                          {"split", un.split == Split::Train ? "train" : "test"}};
            if (un.split == Split::Test) {
                // frozen evaluation perturbations; train-side ground truth is
                // never written out, keeping trainer stages blind to it
                std::snprintf(name, sizeof(name), "pairs/%05d_dp.txt", count);
                save_dp_sidecar((root / name).string(), *un.gt);
                entry["dp"] = std::string(name);
            }
            records.push_back(std::move(entry));
            ++count;
        }
    }
    json manifest = {{"dataset", cfg.tag}, {"kind", "unaligned"}, {"records", records}};
    std::ofstream mf(root / "manifest.json", std::ios::trunc);
    mf << manifest.dump(2) << "\n";
    return count;
}

} // namespace xmreg::data
