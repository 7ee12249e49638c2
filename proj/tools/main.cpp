// Command-line entry points for dataset preparation, training, translation,
// and evaluation. Exit codes: 0 success, 2 config error, 3 data error,
// 4 stage failure.

#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "xmreg/config.hpp"
#include "xmreg/data.hpp"
#include "xmreg/errors.hpp"
#include "xmreg/eval.hpp"
#include "xmreg/image_io.hpp"
#include "xmreg/pipeline.hpp"
#include "xmreg/serialize.hpp"

namespace fs = std::filesystem;
using namespace xmreg;

namespace {

RunConfig load_config(const std::string& path, const std::vector<std::string>& overrides) {
    RunConfig cfg = path.empty() ? RunConfig::toy_preset() : RunConfig::from_file(path);
    for (const auto& kv : overrides) cfg.apply_override(kv);
    if (const char* root = std::getenv("XMREG_OUTPUT_ROOT"))
        cfg.output.run_dir = (fs::path(root) / cfg.output.run_dir).string();
    return cfg;
}

regnet::RegNetwork load_reg_checkpoint(const RunConfig& cfg, const std::string& path) {
    Rng scratch(0);
    regnet::RegNetwork net(cfg.model.reg, scratch);
    Checkpoint ck = load_checkpoint(path);
    std::vector<nn::NamedParam> params;
    net.collect_params("reg", params);
    load_params(ck, params);
    return net;
}

int run_prepare(const std::string& config_path, const std::vector<std::string>& overrides,
                bool toy, int toy_pairs, int64_t toy_size, const std::string& out) {
    RunConfig cfg = load_config(config_path, overrides);
    if (toy) {
        data::generate_toy_dataset(cfg.dataset.root, toy_pairs, toy_size, cfg.training.seed);
        std::cout << "toy dataset written to " << cfg.dataset.root << " (" << toy_pairs
                  << " aligned pairs)\n";
    }
    if (!out.empty()) {
        const int n = data::prepare_unaligned(cfg.dataset.root, out, cfg.dataset,
                                              cfg.training.seed);
        std::cout << "prepared " << n << " unaligned records in " << out << "\n";
    }
    return 0;
}

int run_train(const std::string& config_path, const std::vector<std::string>& overrides,
              bool resume, bool dry_run) {
    RunConfig cfg = load_config(config_path, overrides);
    if (dry_run) {
        const auto plan = pipeline::build_stage_plan(cfg);
        std::cout << "stage plan (IT=" << cfg.training.alternations << "):\n";
        for (size_t i = 0; i < plan.size(); ++i)
            std::cout << "  " << i + 1 << ". " << plan[i].describe() << "\n";
        return 0;
    }
    data::Dataset ds = data::ingest(cfg.dataset.root, cfg.dataset.manifest);
    pipeline::Trainer trainer(cfg, std::move(ds));
    std::cout << "run dir: " << trainer.run_dir() << "\n";
    for (const auto& a : trainer.plan()) std::cout << "  plan: " << a.describe() << "\n";
    trainer.run(resume);
    const auto rep = trainer.evaluate_real(trainer.reg_distilled());
    eval::write_report(trainer.run_dir(), "final_eval", rep);
    std::cout << rep.to_table();
    return 0;
}

int run_translate(const std::string& config_path, const std::vector<std::string>& overrides,
                  const std::string& ckpt, const std::string& dataset_dir,
                  const std::string& split, const std::string& out, uint64_t seed) {
    RunConfig cfg = load_config(config_path, overrides);
    Rng scratch(0);
    diffusion::UNetConfig uc = cfg.model.unet;
    uc.cond_mim_channels = 1; // handcrafted conditions on this path
    diffusion::DiffusionModel model(uc, scratch);
    Checkpoint ck = load_checkpoint(ckpt);
    std::vector<nn::NamedParam> params;
    model.collect_params("diff", params);
    load_params(ck, params);

    const auto sched = diffusion::NoiseSchedule::linear(
        cfg.model.schedule.steps, cfg.model.schedule.beta_start, cfg.model.schedule.beta_end);
    const int t2 = std::max(1, static_cast<int>(cfg.model.schedule.t2_infer *
                                                cfg.model.schedule.steps));

    data::Dataset ds = data::ingest(dataset_dir.empty() ? cfg.dataset.root : dataset_dir,
                                    cfg.dataset.manifest);
    const auto idx =
        ds.indices(split == "train" ? data::Split::Train : data::Split::Test);
    fs::create_directories(out);
    Rng rng(seed);
    int count = 0;
    for (size_t i : idx) {
        const auto& rec = ds.records[i];
        const auto cond = mim::normalize_mim(mim::compute_mim(rec.source, cfg.model.log_gabor));
        const Tensor trans = diffusion::translate(model, rec.target, cond.map, t2, sched, rng);
        char name[64];
        std::snprintf(name, sizeof(name), "%04d_translated.pgm", count);
        io::save_pgm((fs::path(out) / name).string(), data::from_unit_range(trans));
        ++count;
    }
    std::cout << "translated " << count << " images into " << out << "\n";
    return 0;
}

int run_eval(const std::string& config_path, const std::vector<std::string>& overrides,
             const std::string& ckpt, const std::string& dataset_dir, const std::string& out) {
    RunConfig cfg = load_config(config_path, overrides);
    regnet::RegNetwork net = load_reg_checkpoint(cfg, ckpt);
    data::Dataset ds = data::ingest(dataset_dir.empty() ? cfg.dataset.root : dataset_dir,
                                    cfg.dataset.manifest);
    eval::EvalOptions opt;
    opt.checkpoint_id = ckpt;
    const auto rep = eval::evaluate_dataset(net, ds, data::Split::Test, opt);
    if (!out.empty()) eval::write_report(out, "eval", rep);
    std::cout << rep.to_table();
    return 0;
}

int run_zeroshot(const std::string& config_path, const std::vector<std::string>& overrides,
                 const std::vector<std::string>& ckpts, const std::vector<std::string>& dirs,
                 const std::string& out) {
    RunConfig cfg = load_config(config_path, overrides);
    std::vector<regnet::RegNetwork> nets;
    for (const auto& c : ckpts) nets.push_back(load_reg_checkpoint(cfg, c));
    std::vector<data::Dataset> datasets;
    for (const auto& d : dirs) datasets.push_back(data::ingest(d, cfg.dataset.manifest));

    std::vector<const regnet::RegNetwork*> nps;
    std::vector<const data::Dataset*> dps;
    for (auto& n : nets) nps.push_back(&n);
    for (auto& d : datasets) dps.push_back(&d);
    const auto grid = eval::zero_shot_matrix(nps, dps);

    std::cout << "zero-shot MACE matrix (rows: checkpoints, cols: datasets; diagonal in-domain):\n";
    for (size_t i = 0; i < grid.size(); ++i) {
        for (size_t j = 0; j < grid[i].size(); ++j) {
            std::cout << (j ? "\t" : "") << grid[i][j].mace << (i == j ? "*" : "");
            if (!out.empty())
                eval::write_report(out, "cell_" + std::to_string(i) + "_" + std::to_string(j),
                                   grid[i][j]);
        }
        std::cout << "\n";
    }
    return 0;
}

int run_report(const std::string& in, const std::string& out) {
    std::ifstream f(in);
    if (!f) throw MissingFile("report not found: " + in);
    std::ostringstream ss;
    ss << f.rdbuf();
    const auto rep = eval::EvalReport::from_json_text(ss.str());
    std::cout << rep.to_table();
    if (!out.empty()) eval::write_report(out, fs::path(in).stem().string(), rep);
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"cross-modal image registration workbench"};
    app.require_subcommand(1);

    std::string config_path, out, ckpt, dataset_dir, split = "test", report_in;
    std::vector<std::string> overrides, ckpts, dataset_dirs;
    bool toy = false, resume = false, dry_run = false;
    int toy_pairs = 32;
    int64_t toy_size = 96;
    uint64_t seed = 0;

    auto add_common = [&](CLI::App* sub) {
        sub->add_option("--config", config_path, "run configuration file (json)");
        sub->add_option("--set", overrides,
                        "override a config key, e.g. --set training.seed=7")
            ->take_all();
    };

    auto* prepare = app.add_subcommand("prepare", "generate / prepare datasets");
    add_common(prepare);
    prepare->add_flag("--toy", toy, "write the bundled procedural toy dataset");
    prepare->add_option("--toy-pairs", toy_pairs, "toy pair count");
    prepare->add_option("--toy-size", toy_size, "toy image size");
    prepare->add_option("--out", out, "emit pre-generated unaligned patches here");

    auto* train = app.add_subcommand("train", "run the alternating training schedule");
    add_common(train);
    train->add_flag("--resume", resume, "continue from the last finished stage");
    train->add_flag("--dry-run", dry_run, "print the stage plan and exit");

    auto* translate = app.add_subcommand("translate", "translate source images");
    add_common(translate);
    translate->add_option("--checkpoint", ckpt, "diffusion checkpoint")->required();
    translate->add_option("--dataset", dataset_dir, "dataset dir (defaults to config)");
    translate->add_option("--split", split, "train|test");
    translate->add_option("--out", out, "output directory")->required();
    translate->add_option("--seed", seed, "noise seed");

    auto* evalc = app.add_subcommand("eval", "evaluate a registration checkpoint");
    add_common(evalc);
    evalc->add_option("--checkpoint", ckpt, "registration checkpoint")->required();
    evalc->add_option("--dataset", dataset_dir, "dataset dir (defaults to config)");
    evalc->add_option("--out", out, "report directory");

    auto* zeroshot = app.add_subcommand("zeroshot", "cross-dataset evaluation matrix");
    add_common(zeroshot);
    zeroshot->add_option("--checkpoints", ckpts, "registration checkpoints")->required();
    zeroshot->add_option("--datasets", dataset_dirs, "dataset directories")->required();
    zeroshot->add_option("--out", out, "report directory");

    auto* report = app.add_subcommand("report", "re-render a stored report");
    report->add_option("--in", report_in, "report json")->required();
    report->add_option("--out", out, "output directory");

    CLI11_PARSE(app, argc, argv);

    try {
        if (prepare->parsed())
            return run_prepare(config_path, overrides, toy, toy_pairs, toy_size, out);
        if (train->parsed()) return run_train(config_path, overrides, resume, dry_run);
        if (translate->parsed())
            return run_translate(config_path, overrides, ckpt, dataset_dir, split, out, seed);
        if (evalc->parsed()) return run_eval(config_path, overrides, ckpt, dataset_dir, out);
        if (zeroshot->parsed())
            return run_zeroshot(config_path, overrides, ckpts, dataset_dirs, out);
        if (report->parsed()) return run_report(report_in, out);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const MissingFile& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 3;
    } catch (const ManifestMismatch& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 3;
    } catch (const PatchTooLarge& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 3;
    } catch (const CheckpointMissing& e) {
        std::cerr << "stage failure: " << e.what() << "\n";
        return 4;
    } catch (const StageFailure& e) {
        std::cerr << "stage failure: " << e.what() << "\n";
        return 4;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
