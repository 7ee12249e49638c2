#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "xmreg/config.hpp"
#include "xmreg/data.hpp"
#include "xmreg/diffusion.hpp"
#include "xmreg/eval.hpp"
#include "xmreg/mim.hpp"
#include "xmreg/regnet.hpp"

namespace xmreg::pipeline {

enum class NetId { Diffusion, MimTarget, MimSource, RegIntermediate, RegDistilled };
std::string net_short_name(NetId id); // diff / mimt / mims / regs / regc

struct StageAction {
    enum class Kind { Load, Train };
    Kind kind = Kind::Train;
    NetId net = NetId::Diffusion;
    int it = 0;
    int64_t budget = 0;     // Train only
    std::string source;    // Load only: producing checkpoint stem

    std::string ckpt_stem() const; // "<net>_<it>"
    std::string describe() const;  // one line, used by dry runs and logs
};

/// The alternating-optimization schedule: the bootstrap block at it==0 and
/// the refinement block (with its cross-initializations) for every later
/// alternation.
std::vector<StageAction> build_stage_plan(const RunConfig& cfg);

/// Synthetic self-supervised batch for the intermediate network.
struct SelfSupBatch {
    Tensor x1;        // warped source patches   [N,1,p,p]
    Tensor x2;        // translated source (aligned with the source) [N,1,p,p]
    Tensor target_dp; // exact displacement supervision [N,4,2]
};

/// Per-pair pseudo-label products from a frozen registration network.
struct PseudoLabelBatch {
    Tensor xs, xt;    // [N,1,p,p]
    Tensor pl_dp;     // [N,4,2]
    Tensor xtw;       // warp(xt, H^-1), aligned with xs  [N,1,p,p]
    Tensor mask;      // its validity mask [N,1,p,p]
    int skipped = 0;  // degenerate-corner pairs dropped
};

/// Owns the five parameter sets and executes the training schedule with
/// checkpoint chaining. One Trainer == one run directory.
class Trainer {
public:
    Trainer(const RunConfig& cfg, data::Dataset dataset);

    std::vector<StageAction> plan() const { return build_stage_plan(cfg_); }

    /// Executes the full schedule. With resume=true, finished stages (per
    /// the chain ledger) are reloaded from their checkpoints instead of
    /// retrained. Emits one progress record and one checkpoint per stage.
    void run(bool resume = false);

    /// Runs only the it==0 block (diffusion, intermediate, distilled).
    void run_bootstrap(bool resume = false);

    // batch builders, exposed for tests and diagnostics
    SelfSupBatch make_selfsup_batch(const std::vector<size_t>& full_indices, Rng& rng,
                                    int alternation);
    PseudoLabelBatch make_pseudo_labels(const regnet::RegNetwork& frozen,
                                        const std::vector<size_t>& pair_indices);

    // evaluation hooks (the test split is frozen at construction)
    eval::EvalReport evaluate_real(const regnet::RegNetwork& net) const;
    double eval_mace_synthetic(const regnet::RegNetwork& net, uint64_t eval_seed = 9001);

    const diffusion::DiffusionModel& diffusion_model() const { return diff_; }
    const mim::MimEncoder& mim_target_encoder() const { return mim_t_; }
    const mim::MimEncoder& mim_source_encoder() const { return mim_s_; }
    const regnet::RegNetwork& reg_intermediate() const { return reg_s_; }
    const regnet::RegNetwork& reg_distilled() const { return reg_c_; }
    const data::Dataset& train_pairs() const { return pairs_; }
    const RunConfig& config() const { return cfg_; }
    const std::string& run_dir() const { return run_dir_; }

    /// Source-side MIM condition for translation at a given alternation:
    /// normalized handcrafted map at it==0, frozen learned encoder output
    /// afterwards. Asserts the provenance contract.
    mim::MimFeature source_condition(const Tensor& img, int alternation);
    mim::MimFeature target_condition(const Tensor& img, int alternation);

private:
    struct StageStats {
        double first_loss = 0, last_loss = 0, mean_tail = 0;
        int64_t iterations = 0;
    };

    void execute(const std::vector<StageAction>& plan, bool resume);
    void do_load(const StageAction& a);
    StageStats do_train(const StageAction& a);

    StageStats train_diffusion(int it, int64_t budget, Rng& rng);
    StageStats train_reg_intermediate(int it, int64_t budget, Rng& rng);
    StageStats train_reg_distilled(int it, int64_t budget, Rng& rng);
    StageStats train_mim_target(int it, int64_t budget, Rng& rng);
    StageStats train_mim_source(int it, int64_t budget, Rng& rng);

    std::vector<nn::NamedParam> params_of(NetId id) const;
    void save_stage_checkpoint(const StageAction& a, Rng& rng);
    void append_ledger(const std::string& stage, const std::string& action,
                       const std::string& ckpt, const std::string& hash,
                       const std::string& source, const std::string& source_hash);
    std::optional<std::string> ledger_hash_for(const std::string& ckpt_stem) const;
    void log_progress(const StageAction& a, const StageStats& st, double seconds,
                      const std::string& hash);
    Rng stage_rng(const std::string& key) const;

    // translation helpers
    void rebuild_translation_pool(int alternation, Rng& rng);
    Tensor translated(size_t pool_index, int realization) const;

    // unaligned-pair caches for the refinement stages
    struct PairCache {
        std::vector<size_t> rec_idx;             // surviving pair record indices
        std::vector<geometry::Homography> h;     // frozen-generator estimates
        std::vector<Tensor> xs_mim;              // frozen source MIM-like maps
        std::vector<Tensor> xs_mim_warped;       // warp by h, target frame
        std::vector<Tensor> mask_st;
        std::vector<Tensor> xtw;                 // warp(xt, h^-1)
        std::vector<Tensor> mask_ts;
        std::vector<Tensor> xs_mim_frozen;       // constraint source
    };
    PairCache build_pair_cache(int it, bool need_warped_mim, bool need_xtw);

    RunConfig cfg_;
    data::Dataset dataset_;       // as handed in (aligned full images or patch pairs)
    data::Dataset pairs_;         // unaligned training/eval pairs at patch size
    std::vector<size_t> full_train_; // indices into dataset_ when aligned
    bool from_aligned_ = false;

    diffusion::NoiseSchedule sched_;
    diffusion::DiffusionModel diff_;
    mim::MimEncoder mim_t_, mim_s_;
    regnet::RegNetwork reg_s_, reg_c_;

    std::vector<std::vector<Tensor>> translation_pool_; // [train image][realization]
    std::vector<size_t> pool_sources_;                  // record indices backing the pool

    std::string run_dir_, ckpt_dir_;
    uint64_t seed_base_;
};

/// Hash of a network's live parameters (chain-integrity checks).
std::string live_param_hash(const nn::Module& m, const std::string& prefix);

} // namespace xmreg::pipeline
