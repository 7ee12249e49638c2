#include "xmreg/pipeline.hpp"

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>

#include <nlohmann/json.hpp>

#include "xmreg/errors.hpp"
#include "xmreg/optim.hpp"
#include "xmreg/ops.hpp"
#include "xmreg/serialize.hpp"

namespace xmreg::pipeline {

namespace fs = std::filesystem;
using geometry::CornerDisplacement;
using geometry::Frame;
using geometry::Homography;
using nlohmann::json;

std::string net_short_name(NetId id) {
    switch (id) {
        case NetId::Diffusion: return "diff";
        case NetId::MimTarget: return "mimt";
        case NetId::MimSource: return "mims";
        case NetId::RegIntermediate: return "regs";
        case NetId::RegDistilled: return "regc";
    }
    return "?";
}

std::string StageAction::ckpt_stem() const {
    return net_short_name(net) + "_" + std::to_string(it);
}

std::string StageAction::describe() const {
    if (kind == Kind::Load)
        return "load " + net_short_name(net) + " <- " + source + "  (it=" + std::to_string(it) + ")";
    return "train " + net_short_name(net) + " it=" + std::to_string(it) +
           " budget=" + std::to_string(budget) + " -> " + ckpt_stem();
}

std::vector<StageAction> build_stage_plan(const RunConfig& cfg) {
    const auto& b = cfg.training.budgets;
    std::vector<StageAction> plan;
    auto train = [&](NetId n, int it, int64_t budget) {
        plan.push_back({StageAction::Kind::Train, n, it, budget, ""});
    };
    auto load = [&](NetId n, int it, const std::string& src) {
        plan.push_back({StageAction::Kind::Load, n, it, 0, src});
    };
    for (int it = 0; it < cfg.training.alternations; ++it) {
        if (it == 0) {
            train(NetId::Diffusion, 0, b.diffusion_bootstrap);
            train(NetId::RegIntermediate, 0, b.reg_s_bootstrap);
            load(NetId::RegDistilled, 0, "regs_0");
            train(NetId::RegDistilled, 0, b.reg_c);
        } else {
            if (it >= 2) load(NetId::MimTarget, it, "mims_" + std::to_string(it - 1));
            train(NetId::MimTarget, it, b.mim_target);
            load(NetId::Diffusion, it, "diff_" + std::to_string(it - 1));
            train(NetId::Diffusion, it, b.diffusion_refine);
            load(NetId::MimSource, it, "mimt_" + std::to_string(it));
            train(NetId::MimSource, it, b.mim_source);
            load(NetId::RegIntermediate, it, "regc_" + std::to_string(it - 1));
            train(NetId::RegIntermediate, it, b.reg_s_refine);
            load(NetId::RegDistilled, it, "regs_" + std::to_string(it));
            train(NetId::RegDistilled, it, b.reg_c);
        }
    }
    return plan;
}

std::string live_param_hash(const nn::Module& m, const std::string& prefix) {
    std::vector<nn::NamedParam> p;
    m.collect_params(prefix, p);
    return param_hash(p);
}

namespace {

Tensor crop_window(const Tensor& img, int64_t oy, int64_t ox, int64_t p) {
    const int64_t c = img.dim(0), w = img.dim(2);
    Tensor out({c, p, p});
    for (int64_t ch = 0; ch < c; ++ch)
        for (int64_t y = 0; y < p; ++y)
            for (int64_t x = 0; x < p; ++x)
                out.data()[(ch * p + y) * p + x] = img.data()[(ch * img.dim(1) + y + oy) * w + x + ox];
    return out;
}

// full-image homography equal to corners_to_homography(dp) in window coords
Homography window_homography(const CornerDisplacement& dp, int64_t oy, int64_t ox, int64_t p) {
    const Frame pf{p, p};
    const auto pc = geometry::frame_corners(pf);
    std::array<std::array<double, 2>, 4> src, dst;
    for (int i = 0; i < 4; ++i) {
        src[static_cast<size_t>(i)] = {pc[static_cast<size_t>(i)][0] + static_cast<double>(ox),
                                       pc[static_cast<size_t>(i)][1] + static_cast<double>(oy)};
        dst[static_cast<size_t>(i)] = {src[static_cast<size_t>(i)][0] + dp.dp[static_cast<size_t>(i)][0],
                                       src[static_cast<size_t>(i)][1] + dp.dp[static_cast<size_t>(i)][1]};
    }
    return geometry::dlt(src, dst);
}

Tensor stack_batch(const std::vector<Tensor>& items) {
    const auto& s = items[0].shape();
    std::vector<int64_t> shape = {static_cast<int64_t>(items.size())};
    shape.insert(shape.end(), s.begin(), s.end());
    Tensor out(shape);
    const int64_t per = items[0].numel();
    for (size_t i = 0; i < items.size(); ++i)
        std::copy(items[i].data(), items[i].data() + per,
                  out.data() + static_cast<int64_t>(i) * per);
    return out;
}

void set_requires_grad(const std::vector<nn::NamedParam>& params, bool flag) {
    for (const auto& p : params) p.var->requires_grad = flag;
}

} // namespace

Trainer::Trainer(const RunConfig& cfg, data::Dataset dataset)
    : cfg_(cfg), dataset_(std::move(dataset)), seed_base_(cfg.training.seed) {
    cfg_.validate();
    from_aligned_ = dataset_.aligned;

    if (from_aligned_) {
        // derive the fixed unaligned pair set (training pairs stay blind to
        // the generating transform; test pairs keep it as ground truth)
        Rng prng(seed_base_ ^ fnv1a64("derive_pairs", 12));
        pairs_.tag = dataset_.tag;
        pairs_.aligned = false;
        for (const auto& rec : dataset_.records) {
            Rng r = prng.spawn();
            pairs_.records.push_back(
                data::make_unaligned(rec, cfg_.dataset.rho, cfg_.dataset.patch, r));
        }
        full_train_ = dataset_.indices(data::Split::Train);
    } else {
        pairs_ = dataset_;
        full_train_ = pairs_.indices(data::Split::Train);
    }
    if (full_train_.empty()) throw Error("trainer: dataset has no training records");

    sched_ = diffusion::NoiseSchedule::linear(cfg_.model.schedule.steps,
                                              cfg_.model.schedule.beta_start,
                                              cfg_.model.schedule.beta_end);

    Rng r_diff(seed_base_ ^ fnv1a64("init_diff", 9));
    Rng r_mimt(seed_base_ ^ fnv1a64("init_mimt", 9));
    Rng r_mims(seed_base_ ^ fnv1a64("init_mims", 9));
    Rng r_regs(seed_base_ ^ fnv1a64("init_regs", 9));
    Rng r_regc(seed_base_ ^ fnv1a64("init_regc", 9));
    diffusion::UNetConfig uc = cfg_.model.unet;
    uc.cond_mim_channels = cfg_.model.mim_encoder.out_channels;
    diff_ = diffusion::DiffusionModel(uc, r_diff);
    mim_t_ = mim::MimEncoder(cfg_.model.mim_encoder, r_mimt);
    mim_s_ = mim::MimEncoder(cfg_.model.mim_encoder, r_mims);
    reg_s_ = regnet::RegNetwork(cfg_.model.reg, r_regs);
    reg_c_ = regnet::RegNetwork(cfg_.model.reg, r_regc);

    run_dir_ = cfg_.output.run_dir;
    ckpt_dir_ = (fs::path(run_dir_) / "checkpoints").string();
    fs::create_directories(ckpt_dir_);
    cfg_.save((fs::path(run_dir_) / "config.json").string());
}

Rng Trainer::stage_rng(const std::string& key) const {
    return Rng(seed_base_ ^ fnv1a64(key.data(), key.size()));
}

mim::MimFeature Trainer::source_condition(const Tensor& img, int alternation) {
    if (alternation == 0) {
        auto f = mim::normalize_mim(mim::compute_mim(img, cfg_.model.log_gabor));
        // bootstrap must condition on the handcrafted map
        if (f.provenance != mim::Provenance::Handcrafted)
            throw Error("source condition at it==0 must be handcrafted");
        return f;
    }
    NoGradGuard ng;
    const Tensor in = img.reshaped({1, img.dim(0), img.dim(1), img.dim(2)});
    Var out = mim_s_(constant(in));
    mim::MimFeature f;
    f.map = out->value.reshaped({out->value.dim(1), out->value.dim(2), out->value.dim(3)});
    f.provenance = mim::Provenance::LearnedSource;
    f.normalized = true; // tanh-bounded
    return f;
}

mim::MimFeature Trainer::target_condition(const Tensor& img, int alternation) {
    if (alternation == 0) {
        return mim::normalize_mim(mim::compute_mim(img, cfg_.model.log_gabor));
    }
    NoGradGuard ng;
    const Tensor in = img.reshaped({1, img.dim(0), img.dim(1), img.dim(2)});
    Var out = mim_t_(constant(in));
    mim::MimFeature f;
    f.map = out->value.reshaped({out->value.dim(1), out->value.dim(2), out->value.dim(3)});
    f.provenance = mim::Provenance::LearnedTarget;
    f.normalized = true;
    return f;
}

std::vector<nn::NamedParam> Trainer::params_of(NetId id) const {
    std::vector<nn::NamedParam> out;
    switch (id) {
        case NetId::Diffusion: diff_.collect_params("diff", out); break;
        case NetId::MimTarget: mim_t_.collect_params("mim", out); break;
        case NetId::MimSource: mim_s_.collect_params("mim", out); break;
        case NetId::RegIntermediate: reg_s_.collect_params("reg", out); break;
        case NetId::RegDistilled: reg_c_.collect_params("reg", out); break;
    }
    return out;
}

void Trainer::append_ledger(const std::string& stage, const std::string& action,
                            const std::string& ckpt, const std::string& hash,
                            const std::string& source, const std::string& source_hash) {
    const fs::path path = fs::path(run_dir_) / "chain.json";
    json arr = json::array();
    if (fs::exists(path)) {
        std::ifstream f(path);
        arr = json::parse(f);
    }
    arr.push_back({{"stage", stage},
                   {"action", action},
                   {"ckpt", ckpt},
                   {"hash", hash},
                   {"source", source},
                   {"source_hash", source_hash}});
    std::ofstream f(path, std::ios::trunc);
    f << arr.dump(2) << "\n";
}

std::optional<std::string> Trainer::ledger_hash_for(const std::string& ckpt_stem) const {
    const fs::path path = fs::path(run_dir_) / "chain.json";
    if (!fs::exists(path)) return std::nullopt;
    std::ifstream f(path);
    json arr = json::parse(f);
    // last train entry wins
    std::optional<std::string> found;
    for (const auto& e : arr)
        if (e.at("action") == "train" && e.at("ckpt") == ckpt_stem)
            found = e.at("hash").get<std::string>();
    return found;
}

void Trainer::save_stage_checkpoint(const StageAction& a, Rng& rng) {
    Checkpoint ck;
    ck.kind = net_short_name(a.net);
    ck.it = a.it;
    ck.rng_state = rng.save_state();
    ck.tensors = dump_params(params_of(a.net));
    ck.meta["param_hash"] = tensor_map_hash(ck.tensors);
    ck.meta["schedule_steps"] = std::to_string(sched_.total_steps);
    save_checkpoint((fs::path(ckpt_dir_) / (a.ckpt_stem() + ".ckpt")).string(), ck);
    append_ledger(a.describe(), "train", a.ckpt_stem(), ck.meta["param_hash"], "", "");
}

void Trainer::do_load(const StageAction& a) {
    const std::string path = (fs::path(ckpt_dir_) / (a.source + ".ckpt")).string();
    if (!fs::exists(path)) throw CheckpointMissing("stage needs missing checkpoint: " + path);
    Checkpoint ck = load_checkpoint(path);
    const std::string file_hash = tensor_map_hash(ck.tensors);
    if (ck.meta.count("param_hash") && ck.meta.at("param_hash") != file_hash)
        throw StageFailure("checkpoint " + a.source + " content does not match its stored hash");
    const auto ledger = ledger_hash_for(a.source);
    if (ledger && *ledger != file_hash)
        throw StageFailure("checkpoint " + a.source + " does not match the chain ledger");
    auto params = params_of(a.net);
    load_params(ck, params);
    const std::string live = param_hash(params);
    if (live != file_hash)
        throw StageFailure("loaded parameters for " + a.describe() + " are not bit-identical");
    append_ledger(a.describe(), "load", a.ckpt_stem(), live, a.source, file_hash);
}

void Trainer::log_progress(const StageAction& a, const StageStats& st, double seconds,
                           const std::string& hash) {
    json rec = {{"stage", a.describe()},
                {"net", net_short_name(a.net)},
                {"it", a.it},
                {"iterations", st.iterations},
                {"loss_first", st.first_loss},
                {"loss_last", st.last_loss},
                {"loss_tail_mean", st.mean_tail},
                {"seconds", seconds},
                {"param_hash", hash}};
    std::ofstream f(fs::path(run_dir_) / "progress.jsonl", std::ios::app);
    f << rec.dump() << "\n";
}

void Trainer::run(bool resume) { execute(build_stage_plan(cfg_), resume); }

void Trainer::run_bootstrap(bool resume) {
    RunConfig c = cfg_;
    c.training.alternations = 1;
    execute(build_stage_plan(c), resume);
}

void Trainer::execute(const std::vector<StageAction>& plan, bool resume) {
    for (const auto& a : plan) {
        if (a.kind == StageAction::Kind::Load) {
            do_load(a);
            continue;
        }
        const std::string path = (fs::path(ckpt_dir_) / (a.ckpt_stem() + ".ckpt")).string();
        if (resume && fs::exists(path) && ledger_hash_for(a.ckpt_stem())) {
            Checkpoint ck = load_checkpoint(path);
            auto params = params_of(a.net);
            load_params(ck, params);
            if (param_hash(params) != *ledger_hash_for(a.ckpt_stem()))
                throw StageFailure("resume: checkpoint " + a.ckpt_stem() + " fails hash check");
            continue;
        }
        const auto t0 = std::chrono::steady_clock::now();
        StageStats st;
        try {
            st = do_train(a);
        } catch (const Error& e) {
            throw StageFailure("stage [" + a.describe() + "] failed: " + e.what());
        }
        const auto t1 = std::chrono::steady_clock::now();
        Rng r = stage_rng("final_" + a.ckpt_stem());
        save_stage_checkpoint(a, r);
        log_progress(a, st, std::chrono::duration<double>(t1 - t0).count(),
                     param_hash(params_of(a.net)));
    }
}

Trainer::StageStats Trainer::do_train(const StageAction& a) {
    Rng rng = stage_rng("train_" + a.ckpt_stem());
    switch (a.net) {
        case NetId::Diffusion: return train_diffusion(a.it, a.budget, rng);
        case NetId::RegIntermediate: return train_reg_intermediate(a.it, a.budget, rng);
        case NetId::RegDistilled: return train_reg_distilled(a.it, a.budget, rng);
        case NetId::MimTarget: return train_mim_target(a.it, a.budget, rng);
        case NetId::MimSource: return train_mim_source(a.it, a.budget, rng);
    }
    throw StageFailure("unknown stage");
}

// ---- diffusion stage ----

Trainer::StageStats Trainer::train_diffusion(int it, int64_t budget, Rng& rng) {
    const int64_t patch = cfg_.dataset.patch;
    const int64_t B = cfg_.training.batch;
    const int T = sched_.total_steps;
    const int t2_lo = std::max(1, static_cast<int>(std::ceil(cfg_.model.schedule.t2_train_lo * T)));
    const int t2_hi = std::max(t2_lo, static_cast<int>(cfg_.model.schedule.t2_train_hi * T));

    auto params = params_of(NetId::Diffusion);
    std::vector<Var> vars;
    for (auto& p : params) vars.push_back(p.var);
    nn::Adam opt(vars, cfg_.training.lr_diffusion);

    StageStats st;
    st.iterations = budget;
    double tail = 0.0;
    int64_t tail_n = 0;

    for (int64_t iter = 0; iter < budget; ++iter) {
        std::vector<Tensor> xT, xTp, maskTp, condT, condTp;
        for (int64_t b = 0; b < B; ++b) {
            Tensor xt_patch, xtp_patch, m_patch;
            if (from_aligned_) {
                const auto& rec = dataset_.records[full_train_[static_cast<size_t>(
                    rng.uniform_int(static_cast<int64_t>(full_train_.size())))]];
                const int64_t H = rec.target.dim(1), W = rec.target.dim(2);
                const int64_t oy = rng.uniform_int(H - patch + 1);
                const int64_t ox = rng.uniform_int(W - patch + 1);
                auto [hp, dp] = geometry::random_homography(rng, cfg_.dataset.rho, {patch, patch});
                (void)hp;
                const Homography h_full = window_homography(dp, oy, ox, patch);
                const auto warped = geometry::warp(rec.target, h_full);
                xt_patch = crop_window(rec.target, oy, ox, patch);
                xtp_patch = crop_window(warped.image, oy, ox, patch);
                m_patch = crop_window(warped.mask, oy, ox, patch);
            } else {
                const auto& rec = pairs_.records[full_train_[static_cast<size_t>(
                    rng.uniform_int(static_cast<int64_t>(full_train_.size())))]];
                auto [hp, dp] = geometry::random_homography(rng, cfg_.dataset.rho, {patch, patch});
                (void)dp;
                const auto warped = geometry::warp(rec.target, hp);
                xt_patch = rec.target;
                xtp_patch = warped.image;
                m_patch = warped.mask;
            }
            const auto ct = target_condition(xt_patch, it);
            const auto ctp = target_condition(xtp_patch, it);
            if (it == 0 && ct.provenance != mim::Provenance::Handcrafted)
                throw StageFailure("bootstrap diffusion conditioned on a learned map");
            if (it >= 1 && ct.provenance != mim::Provenance::LearnedTarget)
                throw StageFailure("refined diffusion conditioned on a handcrafted map");
            xT.push_back(xt_patch);
            xTp.push_back(xtp_patch);
            maskTp.push_back(m_patch);
            condT.push_back(ct.map);
            condTp.push_back(ctp.map);
        }
        const Tensor bxT = stack_batch(xT), bxTp = stack_batch(xTp);
        const Tensor bmask = stack_batch(maskTp);
        const Tensor bcondT = stack_batch(condT), bcondTp = stack_batch(condTp);

        std::vector<int> t1(static_cast<size_t>(B)), t2(static_cast<size_t>(B));
        for (auto& t : t1) t = 1 + static_cast<int>(rng.uniform_int(T));
        for (auto& t : t2) t = t2_lo + static_cast<int>(rng.uniform_int(t2_hi - t2_lo + 1));
        const Tensor eps1 = Tensor::randn(bxT.shape(), rng);
        const Tensor eps2 = Tensor::randn(bxT.shape(), rng);
        const Tensor x_t1 = diffusion::forward_noise_batch(bxT, t1, eps1, sched_);
        const Tensor x_t2 = diffusion::forward_noise_batch(bxT, t2, eps2, sched_);

        // reverse process 1: noise prediction conditioned on (x^T', mim(x^T))
        Var e1 = diff_.predict_noise(constant(x_t1), constant(bxTp), constant(bcondT), t1);
        Var ln = diffusion::loss_noise(e1, eps1);
        // reverse process 2: one-step estimate of x^T' from (x^T, mim(x^T'))
        Var e2 = diff_.predict_noise(constant(x_t2), constant(bxT), constant(bcondTp), t2);
        Var x0 = ops::clamp(diffusion::tweedie_one_step_batch(x_t2, e2, t2, sched_), -1.0, 1.0);
        Var lt = diffusion::loss_translate(x0, bxTp, bmask);
        Var loss = ops::add(ln, lt);

        opt.zero_grad();
        backward(loss);
        opt.step();

        const double lv = loss->value[0];
        if (iter == 0) st.first_loss = lv;
        st.last_loss = lv;
        if (iter >= budget - std::min<int64_t>(50, budget)) {
            tail += lv;
            ++tail_n;
        }
    }
    st.mean_tail = tail_n ? tail / static_cast<double>(tail_n) : 0.0;
    return st;
}

// ---- translation pool ----

void Trainer::rebuild_translation_pool(int alternation, Rng& rng) {
    translation_pool_.clear();
    pool_sources_.clear();
    const int K = cfg_.training.translation_pool;
    const int T = sched_.total_steps;
    const int t2_lo = std::max(1, static_cast<int>(std::ceil(cfg_.model.schedule.t2_train_lo * T)));
    const int t2_hi = std::max(t2_lo, static_cast<int>(cfg_.model.schedule.t2_train_hi * T));

    const auto& recs = from_aligned_ ? dataset_.records : pairs_.records;
    for (size_t idx : full_train_) {
        const auto& rec = recs[idx];
        std::vector<Tensor> versions;
        const mim::MimFeature cond = source_condition(rec.source, alternation);
        for (int k = 0; k < K; ++k) {
            const int t2 = t2_lo + static_cast<int>(rng.uniform_int(t2_hi - t2_lo + 1));
            versions.push_back(
                diffusion::translate(diff_, rec.target, cond.map, t2, sched_, rng));
        }
        translation_pool_.push_back(std::move(versions));
        pool_sources_.push_back(idx);
    }
}

Tensor Trainer::translated(size_t pool_index, int realization) const {
    return translation_pool_[pool_index][static_cast<size_t>(realization)];
}

// ---- intermediate registration stage ----

SelfSupBatch Trainer::make_selfsup_batch(const std::vector<size_t>& full_indices, Rng& rng,
                                         int alternation) {
    const int64_t patch = cfg_.dataset.patch;
    const auto& recs = from_aligned_ ? dataset_.records : pairs_.records;
    std::vector<Tensor> x1s, x2s;
    std::vector<CornerDisplacement> dps;
    const int T = sched_.total_steps;
    const int t2_lo = std::max(1, static_cast<int>(std::ceil(cfg_.model.schedule.t2_train_lo * T)));
    const int t2_hi = std::max(t2_lo, static_cast<int>(cfg_.model.schedule.t2_train_hi * T));

    for (size_t idx : full_indices) {
        const auto& rec = recs[idx];
        const mim::MimFeature cond = source_condition(rec.source, alternation);
        const int t2 = t2_lo + static_cast<int>(rng.uniform_int(t2_hi - t2_lo + 1));
        const Tensor trans = diffusion::translate(diff_, rec.target, cond.map, t2, sched_, rng);

        auto [x1, x2, dp] = [&]() -> std::tuple<Tensor, Tensor, CornerDisplacement> {
            if (from_aligned_) {
                const int64_t H = rec.source.dim(1), W = rec.source.dim(2);
                const int64_t m = static_cast<int64_t>(std::ceil(cfg_.dataset.rho));
                const int64_t oy_max = H - patch - m, ox_max = W - patch - m;
                for (int attempt = 0; attempt < 8; ++attempt) {
                    const int64_t oy = m + rng.uniform_int(std::max<int64_t>(1, oy_max - m + 1));
                    const int64_t ox = m + rng.uniform_int(std::max<int64_t>(1, ox_max - m + 1));
                    auto [hp, dp2] =
                        geometry::random_homography(rng, cfg_.dataset.rho, {patch, patch});
                    (void)hp;
                    const Homography h_full = window_homography(dp2, oy, ox, patch);
                    const auto warped = geometry::warp(rec.source, h_full.inverse());
                    const Tensor mask = crop_window(warped.mask, oy, ox, patch);
                    if (mask.sum() < static_cast<double>(patch * patch)) continue;
                    return {crop_window(warped.image, oy, ox, patch),
                            crop_window(trans, oy, ox, patch), dp2};
                }
                throw StageFailure("selfsup sample: no padding-free draw (margin < rho?)");
            }
            auto [hp, dp2] = geometry::random_homography(rng, cfg_.dataset.rho, {patch, patch});
            const auto warped = geometry::warp(rec.source, hp.inverse());
            return {warped.image, trans, dp2};
        }();
        x1s.push_back(std::move(x1));
        x2s.push_back(std::move(x2));
        dps.push_back(dp);
    }
    SelfSupBatch out;
    out.x1 = stack_batch(x1s);
    out.x2 = stack_batch(x2s);
    out.target_dp = regnet::dp_batch(dps);
    return out;
}

Trainer::StageStats Trainer::train_reg_intermediate(int it, int64_t budget, Rng& rng) {
    const int64_t patch = cfg_.dataset.patch;
    const int64_t B = cfg_.training.batch;

    const std::string diff_hash_before = live_param_hash(diff_, "diff");
    rebuild_translation_pool(it, rng);

    auto params = params_of(NetId::RegIntermediate);
    std::vector<Var> vars;
    for (auto& p : params) vars.push_back(p.var);
    nn::Adam opt(vars, cfg_.training.lr_registration_max);
    nn::OneCycleLr sched(cfg_.training.lr_registration_max, budget);

    const auto& recs = from_aligned_ ? dataset_.records : pairs_.records;
    const int K = cfg_.training.translation_pool;

    StageStats st;
    st.iterations = budget;
    double tail = 0.0;
    int64_t tail_n = 0;
    for (int64_t iter = 0; iter < budget; ++iter) {
        std::vector<Tensor> x1s, x2s;
        std::vector<CornerDisplacement> dps;
        for (int64_t b = 0; b < B; ++b) {
            const size_t pi =
                static_cast<size_t>(rng.uniform_int(static_cast<int64_t>(pool_sources_.size())));
            const auto& rec = recs[pool_sources_[pi]];
            const Tensor& trans = translation_pool_[pi][static_cast<size_t>(rng.uniform_int(K))];
            if (from_aligned_) {
                const int64_t H = rec.source.dim(1), W = rec.source.dim(2);
                const int64_t m = static_cast<int64_t>(std::ceil(cfg_.dataset.rho));
                bool ok = false;
                for (int attempt = 0; attempt < 8 && !ok; ++attempt) {
                    const int64_t oy = m + rng.uniform_int(std::max<int64_t>(1, H - patch - 2 * m + 1));
                    const int64_t ox = m + rng.uniform_int(std::max<int64_t>(1, W - patch - 2 * m + 1));
                    auto [hp, dp2] =
                        geometry::random_homography(rng, cfg_.dataset.rho, {patch, patch});
                    (void)hp;
                    const Homography h_full = window_homography(dp2, oy, ox, patch);
                    const auto warped = geometry::warp(rec.source, h_full.inverse());
                    const Tensor mask = crop_window(warped.mask, oy, ox, patch);
                    if (mask.sum() < static_cast<double>(patch * patch)) continue;
                    x1s.push_back(crop_window(warped.image, oy, ox, patch));
                    x2s.push_back(crop_window(trans, oy, ox, patch));
                    dps.push_back(dp2);
                    ok = true;
                }
                if (!ok) throw StageFailure("selfsup sample: no padding-free draw");
            } else {
                auto [hp, dp2] = geometry::random_homography(rng, cfg_.dataset.rho, {patch, patch});
                const auto warped = geometry::warp(rec.source, hp.inverse());
                x1s.push_back(warped.image);
                x2s.push_back(trans);
                dps.push_back(dp2);
            }
        }
        const Tensor bx1 = stack_batch(x1s), bx2 = stack_batch(x2s);
        const Tensor gt = regnet::dp_batch(dps);

        opt.set_lr(sched.at(iter));
        auto pred = reg_s_.estimate(constant(bx1), constant(bx2));
        Var loss = regnet::loss_displacement(pred, gt, cfg_.model.fgo_gamma);
        opt.zero_grad();
        backward(loss);
        opt.step();

        const double lv = loss->value[0];
        if (iter == 0) st.first_loss = lv;
        st.last_loss = lv;
        if (iter >= budget - std::min<int64_t>(50, budget)) {
            tail += lv;
            ++tail_n;
        }
    }
    st.mean_tail = tail_n ? tail / static_cast<double>(tail_n) : 0.0;

    if (live_param_hash(diff_, "diff") != diff_hash_before)
        throw StageFailure("frozen translator mutated during intermediate-network stage");
    return st;
}

// ---- pseudo-labels and the distilled stage ----

PseudoLabelBatch Trainer::make_pseudo_labels(const regnet::RegNetwork& frozen,
                                             const std::vector<size_t>& pair_indices) {
    NoGradGuard ng;
    std::vector<Tensor> xs, xt;
    for (size_t idx : pair_indices) {
        xs.push_back(pairs_.records[idx].source);
        xt.push_back(pairs_.records[idx].target);
    }
    const Tensor bxs = stack_batch(xs), bxt = stack_batch(xt);
    const auto pred = frozen.estimate(constant(bxs), constant(bxt));
    const Tensor dp = pred.final()->value;
    const Frame frame{cfg_.dataset.patch, cfg_.dataset.patch};

    PseudoLabelBatch out;
    std::vector<Tensor> ks, kt, ktw, km;
    std::vector<CornerDisplacement> kdp;
    for (size_t i = 0; i < pair_indices.size(); ++i) {
        const CornerDisplacement d = regnet::dp_at(dp, static_cast<int64_t>(i));
        Homography h;
        try {
            h = geometry::corners_to_homography(d, frame);
        } catch (const DegenerateCorners&) {
            ++out.skipped;
            continue;
        }
        const auto w = geometry::warp(xt[i], h.inverse());
        ks.push_back(xs[i]);
        kt.push_back(xt[i]);
        ktw.push_back(w.image);
        km.push_back(w.mask);
        kdp.push_back(d);
    }
    if (ks.empty()) return out;
    out.xs = stack_batch(ks);
    out.xt = stack_batch(kt);
    out.xtw = stack_batch(ktw);
    out.mask = stack_batch(km);
    out.pl_dp = regnet::dp_batch(kdp);
    return out;
}

Trainer::StageStats Trainer::train_reg_distilled(int it, int64_t budget, Rng& rng) {
    (void)it;
    const int64_t B = cfg_.training.batch;
    const auto train_idx = pairs_.indices(data::Split::Train);
    const std::string regs_hash_before = live_param_hash(reg_s_, "reg");

    auto params = params_of(NetId::RegDistilled);
    std::vector<Var> vars;
    for (auto& p : params) vars.push_back(p.var);
    nn::Adam opt(vars, cfg_.training.lr_registration_max);
    nn::OneCycleLr sched(cfg_.training.lr_registration_max, budget);

    StageStats st;
    st.iterations = budget;
    double tail = 0.0;
    int64_t tail_n = 0;
    for (int64_t iter = 0; iter < budget; ++iter) {
        std::vector<size_t> batch_idx;
        for (int64_t b = 0; b < B; ++b)
            batch_idx.push_back(
                train_idx[static_cast<size_t>(rng.uniform_int(static_cast<int64_t>(train_idx.size())))]);
        const PseudoLabelBatch pl = make_pseudo_labels(reg_s_, batch_idx);
        if (pl.pl_dp.empty()) continue; // all pairs degenerate; vanishingly rare

        opt.set_lr(sched.at(iter));
        auto pred = reg_c_.estimate(constant(pl.xs), constant(pl.xt));
        Var loss = regnet::loss_pseudo(pred, pl.pl_dp, cfg_.model.fgo_gamma);
        opt.zero_grad();
        backward(loss);
        opt.step();

        const double lv = loss->value[0];
        if (iter == 0) st.first_loss = lv;
        st.last_loss = lv;
        if (iter >= budget - std::min<int64_t>(50, budget)) {
            tail += lv;
            ++tail_n;
        }
    }
    st.mean_tail = tail_n ? tail / static_cast<double>(tail_n) : 0.0;

    if (live_param_hash(reg_s_, "reg") != regs_hash_before)
        throw StageFailure("frozen pseudo-labeler mutated during distilled-network stage");
    return st;
}

// ---- mim encoder stages ----

Trainer::PairCache Trainer::build_pair_cache(int it, bool need_warped_mim, bool need_xtw) {
    NoGradGuard ng;
    PairCache cache;
    const auto train_idx = pairs_.indices(data::Split::Train);
    const Frame frame{cfg_.dataset.patch, cfg_.dataset.patch};

    for (size_t idx : train_idx) {
        const auto& rec = pairs_.records[idx];
        // frozen distilled network from the previous alternation estimates
        // the pair transform
        const Tensor bxs = rec.source.reshaped({1, 1, rec.source.dim(1), rec.source.dim(2)});
        const Tensor bxt = rec.target.reshaped({1, 1, rec.target.dim(1), rec.target.dim(2)});
        const auto pred = reg_c_.estimate(constant(bxs), constant(bxt));
        Homography h;
        try {
            h = geometry::corners_to_homography(pred.final_dp(0), frame);
        } catch (const DegenerateCorners&) {
            continue;
        }
        cache.rec_idx.push_back(idx);
        cache.h.push_back(h);

        Tensor xs_mim;
        if (it == 1) {
            xs_mim = mim::normalize_mim(mim::compute_mim(rec.source, cfg_.model.log_gabor)).map;
        } else {
            Var out = mim_s_(constant(bxs));
            xs_mim = out->value.reshaped({out->value.dim(1), out->value.dim(2), out->value.dim(3)});
        }
        cache.xs_mim.push_back(xs_mim);
        cache.xs_mim_frozen.push_back(xs_mim);

        if (need_warped_mim) {
            const auto w = geometry::warp(xs_mim, h);
            cache.xs_mim_warped.push_back(w.image);
            cache.mask_st.push_back(w.mask);
        }
        if (need_xtw) {
            const auto w = geometry::warp(rec.target, h.inverse());
            cache.xtw.push_back(w.image);
            cache.mask_ts.push_back(w.mask);
        }
    }
    if (cache.h.empty()) throw StageFailure("pair cache: every pair was degenerate");
    return cache;
}

Trainer::StageStats Trainer::train_mim_target(int it, int64_t budget, Rng& rng) {
    const std::string regc_hash_before = live_param_hash(reg_c_, "reg");
    PairCache cache = build_pair_cache(it, /*need_warped_mim=*/true, /*need_xtw=*/false);

    auto params = params_of(NetId::MimTarget);
    std::vector<Var> vars;
    for (auto& p : params) vars.push_back(p.var);
    nn::Adam opt(vars, cfg_.training.lr_mim);

    const int64_t B = std::min<int64_t>(cfg_.training.batch,
                                        static_cast<int64_t>(cache.h.size()));
    StageStats st;
    st.iterations = budget;
    double tail = 0.0;
    int64_t tail_n = 0;
    for (int64_t iter = 0; iter < budget; ++iter) {
        std::vector<Tensor> xts, warped, masks;
        for (int64_t b = 0; b < B; ++b) {
            const size_t i = static_cast<size_t>(rng.uniform_int(static_cast<int64_t>(cache.h.size())));
            xts.push_back(pairs_.records[cache.rec_idx[i]].target);
            warped.push_back(cache.xs_mim_warped[i]);
            masks.push_back(cache.mask_st[i]);
        }
        const Tensor bxt = stack_batch(xts);
        Var out = mim_t_(constant(bxt));
        Var loss = mim::loss_mim_target(constant(stack_batch(warped)), out, stack_batch(masks));
        opt.zero_grad();
        backward(loss);
        opt.step();
        const double lv = loss->value[0];
        if (iter == 0) st.first_loss = lv;
        st.last_loss = lv;
        if (iter >= budget - std::min<int64_t>(50, budget)) {
            tail += lv;
            ++tail_n;
        }
    }
    st.mean_tail = tail_n ? tail / static_cast<double>(tail_n) : 0.0;
    if (live_param_hash(reg_c_, "reg") != regc_hash_before)
        throw StageFailure("frozen estimator mutated during target-encoder stage");
    return st;
}

Trainer::StageStats Trainer::train_mim_source(int it, int64_t budget, Rng& rng) {
    const std::string regc_hash_before = live_param_hash(reg_c_, "reg");
    const std::string diff_hash_before = live_param_hash(diff_, "diff");
    PairCache cache = build_pair_cache(it, /*need_warped_mim=*/false, /*need_xtw=*/true);

    auto diff_params = params_of(NetId::Diffusion);
    set_requires_grad(diff_params, false); // frozen; gradient still flows to the condition

    auto params = params_of(NetId::MimSource);
    std::vector<Var> vars;
    for (auto& p : params) vars.push_back(p.var);
    nn::Adam opt(vars, cfg_.training.lr_mim);

    const int T = sched_.total_steps;
    const int t2_lo = std::max(1, static_cast<int>(std::ceil(cfg_.model.schedule.t2_train_lo * T)));
    const int t2_hi = std::max(t2_lo, static_cast<int>(cfg_.model.schedule.t2_train_hi * T));
    const int64_t B = std::min<int64_t>(cfg_.training.batch,
                                        static_cast<int64_t>(cache.h.size()));

    StageStats st;
    st.iterations = budget;
    double tail = 0.0;
    int64_t tail_n = 0;
    for (int64_t iter = 0; iter < budget; ++iter) {
        std::vector<Tensor> xss, xts, xtws, masks, frozen;
        for (int64_t b = 0; b < B; ++b) {
            const size_t i = static_cast<size_t>(rng.uniform_int(static_cast<int64_t>(cache.h.size())));
            xss.push_back(pairs_.records[cache.rec_idx[i]].source);
            xts.push_back(pairs_.records[cache.rec_idx[i]].target);
            xtws.push_back(cache.xtw[i]);
            masks.push_back(cache.mask_ts[i]);
            frozen.push_back(cache.xs_mim_frozen[i]);
        }
        const Tensor bxs = stack_batch(xss), bxt = stack_batch(xts);
        std::vector<int> t2(static_cast<size_t>(B));
        for (auto& t : t2) t = t2_lo + static_cast<int>(rng.uniform_int(t2_hi - t2_lo + 1));
        const Tensor eps = Tensor::randn(bxt.shape(), rng);

        Var xs_mim = mim_s_(constant(bxs));
        Var trans = diffusion::translate_batch(diff_, bxt, xs_mim, t2, eps, sched_);
        Var loss = mim::loss_mim_source(trans, stack_batch(xtws), stack_batch(masks), xs_mim,
                                        stack_batch(frozen), cfg_.training.lambda_mds);
        opt.zero_grad();
        backward(loss);
        opt.step();
        const double lv = loss->value[0];
        if (iter == 0) st.first_loss = lv;
        st.last_loss = lv;
        if (iter >= budget - std::min<int64_t>(50, budget)) {
            tail += lv;
            ++tail_n;
        }
    }
    st.mean_tail = tail_n ? tail / static_cast<double>(tail_n) : 0.0;

    set_requires_grad(diff_params, true);
    if (live_param_hash(diff_, "diff") != diff_hash_before)
        throw StageFailure("frozen translator mutated during source-encoder stage");
    if (live_param_hash(reg_c_, "reg") != regc_hash_before)
        throw StageFailure("frozen estimator mutated during source-encoder stage");
    return st;
}

// ---- evaluation hooks ----

eval::EvalReport Trainer::evaluate_real(const regnet::RegNetwork& net) const {
    eval::EvalOptions opt;
    opt.dataset_id = pairs_.tag;
    return eval::evaluate_dataset(net, pairs_, data::Split::Test, opt);
}

double Trainer::eval_mace_synthetic(const regnet::RegNetwork& net, uint64_t eval_seed) {
    Rng rng(eval_seed);
    const auto& ds = from_aligned_ ? dataset_ : pairs_;
    const auto test_idx = ds.indices(data::Split::Test);
    if (test_idx.empty()) throw Error("eval_mace_synthetic: no held-out records");

    // translator alternation: use the bootstrap conditions if no refinement
    // has happened; callers run this right after a completed block
    const int alternation = 0;
    const SelfSupBatch batch = make_selfsup_batch(test_idx, rng, alternation);

    NoGradGuard ng;
    const auto pred = net.estimate(constant(batch.x1), constant(batch.x2));
    const Frame frame{cfg_.dataset.patch, cfg_.dataset.patch};
    double total = 0.0;
    for (size_t i = 0; i < test_idx.size(); ++i) {
        const auto h_gt = geometry::corners_to_homography(
            regnet::dp_at(batch.target_dp, static_cast<int64_t>(i)), frame);
        const auto h_pred =
            geometry::corners_to_homography(pred.final_dp(static_cast<int64_t>(i)), frame);
        total += eval::ace(h_gt, h_pred, frame);
    }
    return total / static_cast<double>(test_idx.size());
}

} // namespace xmreg::pipeline
