#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "xmreg/diffusion.hpp"
#include "xmreg/mim.hpp"
#include "xmreg/regnet.hpp"

namespace xmreg {

struct DatasetSection {
    std::string root;                  // dataset directory
    std::string manifest = "manifest.json";
    std::string tag = "toy";
    double rho = 16.0;                 // max corner perturbation, px
    int64_t patch = 128;               // evaluation/training patch size
    int oversample = 1;
    // per-tag resize targets, "tag" -> [height, width]
    std::map<std::string, std::vector<int64_t>> resize;
};

struct ScheduleSection {
    int steps = 100;                   // T (1000 at paper fidelity)
    double beta_start = 1e-4;
    double beta_end = 0.02;
    double t2_train_lo = 0.8;          // t2 ~ U[lo*T, hi*T] during training
    double t2_train_hi = 1.0;
    double t2_infer = 0.9;             // fixed t2 fraction at inference
};

struct ModelSection {
    ScheduleSection schedule;
    diffusion::UNetConfig unet;
    mim::MimEncoderConfig mim_encoder;
    mim::LogGaborParams log_gabor;
    regnet::RegNetConfig reg;
    double fgo_gamma = 0.85;
};

struct BudgetSection {
    // desk-scale defaults: the reference schedule scaled down 1000x
    int64_t diffusion_bootstrap = 600;
    int64_t reg_s_bootstrap = 300;
    int64_t reg_c = 10;
    int64_t mim_target = 30;
    int64_t mim_source = 30;
    int64_t diffusion_refine = 60;
    int64_t reg_s_refine = 60;
};

struct TrainingSection {
    int alternations = 1; // IT
    int64_t batch = 16;
    uint64_t seed = 0;
    double lambda_mds = 1.0;
    double lr_diffusion = 2.5e-4;
    double lr_registration_max = 4e-4; // one-cycle peak
    double lr_mim = 2.5e-4;
    int translation_pool = 4;          // cached translations per image per stage
    BudgetSection budgets;
};

struct OutputSection {
    std::string run_dir = "runs/default";
};

/// Fully validated run configuration; unknown keys are rejected at parse
/// time and the resolved (defaults included) form is written next to every
/// run's outputs.
struct RunConfig {
    DatasetSection dataset;
    ModelSection model;
    TrainingSection training;
    OutputSection output;

    static RunConfig from_file(const std::string& path);
    static RunConfig from_json_text(const std::string& text);
    std::string to_json_text() const;
    void save(const std::string& path) const;

    /// Applies a "section.key[.key]=value" override (CLI flag form).
    void apply_override(const std::string& key_eq_value);

    void validate() const;

    /// Small built-in preset for the procedural toy dataset.
    static RunConfig toy_preset();
};

} // namespace xmreg
