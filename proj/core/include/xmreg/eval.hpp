#pragma once

#include <map>
#include <string>
#include <vector>

#include "xmreg/data.hpp"
#include "xmreg/geometry.hpp"
#include "xmreg/regnet.hpp"

namespace xmreg::eval {

struct EvalReport {
    std::vector<double> ace;            // per-sample
    double mace = 0.0;                  // mean of ace
    std::map<int, double> auc;          // area form, percent
    std::map<int, double> frac_below;   // secondary column, percent
    int64_t sample_count = 0;
    double infer_ms_mean = 0.0, infer_ms_min = 0.0, infer_ms_max = 0.0;
    std::string dataset, checkpoint;

    std::string to_json_text() const;
    static EvalReport from_json_text(const std::string& text);
    std::string to_table() const;
};

/// Mean over the four frame corners of |H c - Hhat c|.
double ace(const geometry::Homography& h_gt, const geometry::Homography& h_pred,
           const geometry::Frame& frame);

/// Area under the cumulative error curve clipped at k, as a percentage:
/// mean_i max(0, 1 - e_i / k) * 100. The fraction-below reading of the
/// metric is reported separately by fraction_below.
double auc_at(const std::vector<double>& errors, double k);
double fraction_below(const std::vector<double>& errors, double k);

/// Runs a frozen network on one pair and converts the final displacement
/// estimate to a homography. Inputs are [1,H,W].
geometry::Homography infer(const regnet::RegNetwork& net, const Tensor& xs, const Tensor& xt);

struct EvalOptions {
    std::vector<int> auc_ks = {3, 5, 10, 20};
    std::string dataset_id, checkpoint_id;
};

EvalReport evaluate_dataset(const regnet::RegNetwork& net, const data::Dataset& ds,
                            data::Split split, const EvalOptions& opt = {});

/// |nets| x |datasets| grid; cell (i,j) evaluates net i on dataset j's test
/// split. The diagonal is the in-domain case.
std::vector<std::vector<EvalReport>> zero_shot_matrix(
    const std::vector<const regnet::RegNetwork*>& nets,
    const std::vector<const data::Dataset*>& datasets, const EvalOptions& opt = {});

void write_report(const std::string& dir, const std::string& stem, const EvalReport& rep);

/// Renders the cumulative-error curve (fraction of samples with ACE <= e)
/// to a PGM raster.
void plot_cumulative_curve(const std::string& path, const std::vector<double>& errors,
                           double max_error, int64_t size = 320);

} // namespace xmreg::eval
