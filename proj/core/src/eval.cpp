#include "xmreg/eval.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "xmreg/errors.hpp"
#include "xmreg/image_io.hpp"

namespace xmreg::eval {

using geometry::Frame;
using geometry::Homography;
using nlohmann::json;

double ace(const Homography& h_gt, const Homography& h_pred, const Frame& frame) {
    const auto corners = geometry::frame_corners(frame);
    double sum = 0.0;
    for (const auto& c : corners) {
        const auto a = h_gt.apply(c[0], c[1]);
        const auto b = h_pred.apply(c[0], c[1]);
        sum += std::hypot(a[0] - b[0], a[1] - b[1]);
    }
    return sum / 4.0;
}

double auc_at(const std::vector<double>& errors, double k) {
    if (errors.empty()) return 0.0;
    double acc = 0.0;
    for (double e : errors) acc += std::max(0.0, 1.0 - e / k);
    return 100.0 * acc / static_cast<double>(errors.size());
}

double fraction_below(const std::vector<double>& errors, double k) {
    if (errors.empty()) return 0.0;
    int64_t n = 0;
    for (double e : errors)
        if (e < k) ++n;
    return 100.0 * static_cast<double>(n) / static_cast<double>(errors.size());
}

Homography infer(const regnet::RegNetwork& net, const Tensor& xs, const Tensor& xt) {
    NoGradGuard ng;
    const Tensor s4 = xs.reshaped({1, xs.dim(0), xs.dim(1), xs.dim(2)});
    const Tensor t4 = xt.reshaped({1, xt.dim(0), xt.dim(1), xt.dim(2)});
    const auto pred = net.estimate(constant(s4), constant(t4));
    const Frame frame{xs.dim(2), xs.dim(1)};
    return geometry::corners_to_homography(pred.final_dp(0), frame);
}

EvalReport evaluate_dataset(const regnet::RegNetwork& net, const data::Dataset& ds,
                            data::Split split, const EvalOptions& opt) {
    EvalReport rep;
    rep.dataset = opt.dataset_id.empty() ? ds.tag : opt.dataset_id;
    rep.checkpoint = opt.checkpoint_id;
    double tmin = 1e300, tmax = 0.0, tsum = 0.0;
    for (size_t idx : ds.indices(split)) {
        const auto& rec = ds.records[idx];
        const Frame frame{rec.source.dim(2), rec.source.dim(1)};
        const auto t0 = std::chrono::steady_clock::now();
        const Homography h_pred = infer(net, rec.source, rec.target);
        const auto t1 = std::chrono::steady_clock::now();
        const double ms = std::chrono::duration<double, std::milli>(t1 - t0).count();
        tmin = std::min(tmin, ms);
        tmax = std::max(tmax, ms);
        tsum += ms;
        const Homography h_gt = geometry::corners_to_homography(rec.gt_for_eval(), frame);
        rep.ace.push_back(ace(h_gt, h_pred, frame));
    }
    rep.sample_count = static_cast<int64_t>(rep.ace.size());
    if (rep.sample_count > 0) {
        double s = 0.0;
        for (double e : rep.ace) s += e;
        rep.mace = s / static_cast<double>(rep.sample_count);
        rep.infer_ms_mean = tsum / static_cast<double>(rep.sample_count);
        rep.infer_ms_min = tmin;
        rep.infer_ms_max = tmax;
    }
    for (int k : opt.auc_ks) {
        rep.auc[k] = auc_at(rep.ace, k);
        rep.frac_below[k] = fraction_below(rep.ace, k);
    }
    return rep;
}

std::vector<std::vector<EvalReport>> zero_shot_matrix(
    const std::vector<const regnet::RegNetwork*>& nets,
    const std::vector<const data::Dataset*>& datasets, const EvalOptions& opt) {
    std::vector<std::vector<EvalReport>> grid;
    for (const auto* net : nets) {
        std::vector<EvalReport> row;
        for (const auto* ds : datasets) {
            EvalOptions o = opt;
            o.dataset_id = ds->tag;
            row.push_back(evaluate_dataset(*net, *ds, data::Split::Test, o));
        }
        grid.push_back(std::move(row));
    }
    return grid;
}

std::string EvalReport::to_json_text() const {
    json j = {{"dataset", dataset},
              {"checkpoint", checkpoint},
              {"sample_count", sample_count},
              {"mace", mace},
              {"ace", ace},
              {"auc", json::object()},
              {"frac_below", json::object()},
              {"infer_ms", {{"mean", infer_ms_mean}, {"min", infer_ms_min}, {"max", infer_ms_max}}}};
    for (const auto& [k, v] : auc) j["auc"][std::to_string(k)] = v;
    for (const auto& [k, v] : frac_below) j["frac_below"][std::to_string(k)] = v;
    return j.dump(2);
}

EvalReport EvalReport::from_json_text(const std::string& text) {
    json j = json::parse(text);
    EvalReport r;
    r.dataset = j.at("dataset").get<std::string>();
    r.checkpoint = j.at("checkpoint").get<std::string>();
    r.sample_count = j.at("sample_count").get<int64_t>();
    r.mace = j.at("mace").get<double>();
    r.ace = j.at("ace").get<std::vector<double>>();
    for (auto it = j.at("auc").begin(); it != j.at("auc").end(); ++it)
        r.auc[std::stoi(it.key())] = it.value().get<double>();
    for (auto it = j.at("frac_below").begin(); it != j.at("frac_below").end(); ++it)
        r.frac_below[std::stoi(it.key())] = it.value().get<double>();
    r.infer_ms_mean = j.at("infer_ms").at("mean").get<double>();
    r.infer_ms_min = j.at("infer_ms").at("min").get<double>();
    r.infer_ms_max = j.at("infer_ms").at("max").get<double>();
    return r;
}

std::string EvalReport::to_table() const {
    std::ostringstream os;
    os << "dataset: " << dataset << "  checkpoint: " << checkpoint << "\n";
    os << "samples: " << sample_count << "  MACE: " << mace << " px\n";
    os << "k\tAUC@k\tfrac<k\n";
    for (const auto& [k, v] : auc) {
        os << k << "\t" << v << "\t";
        const auto it = frac_below.find(k);
        os << (it == frac_below.end() ? 0.0 : it->second) << "\n";
    }
    os << "infer ms mean/min/max: " << infer_ms_mean << " / " << infer_ms_min << " / "
       << infer_ms_max << "\n";
    return os.str();
}

void write_report(const std::string& dir, const std::string& stem, const EvalReport& rep) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    {
        std::ofstream f(fs::path(dir) / (stem + ".json"), std::ios::trunc);
        f << rep.to_json_text() << "\n";
    }
    {
        std::ofstream f(fs::path(dir) / (stem + ".txt"), std::ios::trunc);
        f << rep.to_table();
    }
    plot_cumulative_curve((fs::path(dir) / (stem + "_curve.pgm")).string(), rep.ace, 20.0);
}

void plot_cumulative_curve(const std::string& path, const std::vector<double>& errors,
                           double max_error, int64_t size) {
    Tensor img({1, size, size});
    img.fill(1.0);
    const int64_t m = 24; // margin for axes
    auto put = [&](int64_t y, int64_t x, double v) {
        if (y >= 0 && y < size && x >= 0 && x < size) img.data()[y * size + x] = v;
    };
    for (int64_t i = m; i < size - m; ++i) {
        put(size - m, i, 0.0);
        put(i, m, 0.0);
    }
    if (!errors.empty()) {
        std::vector<double> sorted = errors;
        std::sort(sorted.begin(), sorted.end());
        const int64_t plot_w = size - 2 * m, plot_h = size - 2 * m;
        int64_t prev_y = -1;
        for (int64_t px = 0; px < plot_w; ++px) {
            const double e = max_error * static_cast<double>(px) / (plot_w - 1);
            const auto it = std::upper_bound(sorted.begin(), sorted.end(), e);
            const double frac =
                static_cast<double>(it - sorted.begin()) / static_cast<double>(sorted.size());
            const int64_t py = size - m - 1 - static_cast<int64_t>(frac * (plot_h - 1));
            put(py, m + px, 0.0);
            if (prev_y >= 0) {
                for (int64_t y = std::min(prev_y, py); y <= std::max(prev_y, py); ++y)
                    put(y, m + px, 0.0);
            }
            prev_y = py;
        }
    }
    io::save_pgm(path, img);
}

} // namespace xmreg::eval
