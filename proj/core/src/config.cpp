#include "xmreg/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "xmreg/errors.hpp"

namespace xmreg {

using nlohmann::json;

namespace {

void check_keys(const json& j, const std::string& where, const std::set<std::string>& allowed) {
    if (!j.is_object()) throw ConfigError(where + ": expected an object");
    for (auto it = j.begin(); it != j.end(); ++it)
        if (!allowed.count(it.key()))
            throw ConfigError("unknown config key \"" + where + "." + it.key() + "\"");
}

template <typename T>
void get_to(const json& j, const char* key, T& out) {
    if (j.contains(key)) j.at(key).get_to(out);
}

json dataset_to_json(const DatasetSection& d) {
    return {{"root", d.root},   {"manifest", d.manifest},     {"tag", d.tag},
            {"rho", d.rho},     {"patch", d.patch},           {"oversample", d.oversample},
            {"resize", d.resize}};
}

void dataset_from_json(const json& j, DatasetSection& d) {
    check_keys(j, "dataset", {"root", "manifest", "tag", "rho", "patch", "oversample", "resize"});
    get_to(j, "root", d.root);
    get_to(j, "manifest", d.manifest);
    get_to(j, "tag", d.tag);
    get_to(j, "rho", d.rho);
    get_to(j, "patch", d.patch);
    get_to(j, "oversample", d.oversample);
    get_to(j, "resize", d.resize);
}

json model_to_json(const ModelSection& m) {
    return {
        {"schedule",
         {{"steps", m.schedule.steps},
          {"beta_start", m.schedule.beta_start},
          {"beta_end", m.schedule.beta_end},
          {"t2_train_lo", m.schedule.t2_train_lo},
          {"t2_train_hi", m.schedule.t2_train_hi},
          {"t2_infer", m.schedule.t2_infer}}},
        {"unet",
         {{"base", m.unet.base_channels},
          {"mult", m.unet.channel_mult},
          {"time_embed", m.unet.time_embed_dim}}},
        {"mim_encoder",
         {{"layers", m.mim_encoder.layers},
          {"hidden", m.mim_encoder.hidden},
          {"out_channels", m.mim_encoder.out_channels}}},
        {"log_gabor",
         {{"scales", m.log_gabor.num_scales},
          {"orients", m.log_gabor.num_orients},
          {"min_wavelength", m.log_gabor.min_wavelength},
          {"mult", m.log_gabor.mult},
          {"sigma_on_f", m.log_gabor.sigma_on_f},
          {"d_theta_ratio", m.log_gabor.d_theta_ratio}}},
        {"regnet",
         {{"scales", m.reg.num_scales},
          {"channels", m.reg.channels},
          {"iters", m.reg.iters_per_scale},
          {"corr_radius", m.reg.corr_radius},
          {"head_hidden", m.reg.head_hidden}}},
        {"fgo_gamma", m.fgo_gamma},
    };
}

void model_from_json(const json& j, ModelSection& m) {
    check_keys(j, "model", {"schedule", "unet", "mim_encoder", "log_gabor", "regnet", "fgo_gamma"});
    if (j.contains("schedule")) {
        const auto& s = j.at("schedule");
        check_keys(s, "model.schedule",
                   {"steps", "beta_start", "beta_end", "t2_train_lo", "t2_train_hi", "t2_infer"});
        get_to(s, "steps", m.schedule.steps);
        get_to(s, "beta_start", m.schedule.beta_start);
        get_to(s, "beta_end", m.schedule.beta_end);
        get_to(s, "t2_train_lo", m.schedule.t2_train_lo);
        get_to(s, "t2_train_hi", m.schedule.t2_train_hi);
        get_to(s, "t2_infer", m.schedule.t2_infer);
    }
    if (j.contains("unet")) {
        const auto& s = j.at("unet");
        check_keys(s, "model.unet", {"base", "mult", "time_embed"});
        get_to(s, "base", m.unet.base_channels);
        get_to(s, "mult", m.unet.channel_mult);
        get_to(s, "time_embed", m.unet.time_embed_dim);
    }
    if (j.contains("mim_encoder")) {
        const auto& s = j.at("mim_encoder");
        check_keys(s, "model.mim_encoder", {"layers", "hidden", "out_channels"});
        get_to(s, "layers", m.mim_encoder.layers);
        get_to(s, "hidden", m.mim_encoder.hidden);
        get_to(s, "out_channels", m.mim_encoder.out_channels);
    }
    if (j.contains("log_gabor")) {
        const auto& s = j.at("log_gabor");
        check_keys(s, "model.log_gabor",
                   {"scales", "orients", "min_wavelength", "mult", "sigma_on_f", "d_theta_ratio"});
        get_to(s, "scales", m.log_gabor.num_scales);
        get_to(s, "orients", m.log_gabor.num_orients);
        get_to(s, "min_wavelength", m.log_gabor.min_wavelength);
        get_to(s, "mult", m.log_gabor.mult);
        get_to(s, "sigma_on_f", m.log_gabor.sigma_on_f);
        get_to(s, "d_theta_ratio", m.log_gabor.d_theta_ratio);
    }
    if (j.contains("regnet")) {
        const auto& s = j.at("regnet");
        check_keys(s, "model.regnet", {"scales", "channels", "iters", "corr_radius", "head_hidden"});
        get_to(s, "scales", m.reg.num_scales);
        get_to(s, "channels", m.reg.channels);
        get_to(s, "iters", m.reg.iters_per_scale);
        get_to(s, "corr_radius", m.reg.corr_radius);
        get_to(s, "head_hidden", m.reg.head_hidden);
    }
    get_to(j, "fgo_gamma", m.fgo_gamma);
}

json training_to_json(const TrainingSection& t) {
    return {{"alternations", t.alternations},
            {"batch", t.batch},
            {"seed", t.seed},
            {"lambda_mds", t.lambda_mds},
            {"lr_diffusion", t.lr_diffusion},
            {"lr_registration_max", t.lr_registration_max},
            {"lr_mim", t.lr_mim},
            {"translation_pool", t.translation_pool},
            {"budgets",
             {{"diffusion_bootstrap", t.budgets.diffusion_bootstrap},
              {"reg_s_bootstrap", t.budgets.reg_s_bootstrap},
              {"reg_c", t.budgets.reg_c},
              {"mim_target", t.budgets.mim_target},
              {"mim_source", t.budgets.mim_source},
              {"diffusion_refine", t.budgets.diffusion_refine},
              {"reg_s_refine", t.budgets.reg_s_refine}}}};
}

void training_from_json(const json& j, TrainingSection& t) {
    check_keys(j, "training",
               {"alternations", "batch", "seed", "lambda_mds", "lr_diffusion",
                "lr_registration_max", "lr_mim", "translation_pool", "budgets"});
    get_to(j, "alternations", t.alternations);
    get_to(j, "batch", t.batch);
    get_to(j, "seed", t.seed);
    get_to(j, "lambda_mds", t.lambda_mds);
    get_to(j, "lr_diffusion", t.lr_diffusion);
    get_to(j, "lr_registration_max", t.lr_registration_max);
    get_to(j, "lr_mim", t.lr_mim);
    get_to(j, "translation_pool", t.translation_pool);
    if (j.contains("budgets")) {
        const auto& s = j.at("budgets");
        check_keys(s, "training.budgets",
                   {"diffusion_bootstrap", "reg_s_bootstrap", "reg_c", "mim_target", "mim_source",
                    "diffusion_refine", "reg_s_refine"});
        get_to(s, "diffusion_bootstrap", t.budgets.diffusion_bootstrap);
        get_to(s, "reg_s_bootstrap", t.budgets.reg_s_bootstrap);
        get_to(s, "reg_c", t.budgets.reg_c);
        get_to(s, "mim_target", t.budgets.mim_target);
        get_to(s, "mim_source", t.budgets.mim_source);
        get_to(s, "diffusion_refine", t.budgets.diffusion_refine);
        get_to(s, "reg_s_refine", t.budgets.reg_s_refine);
    }
}

} // namespace

RunConfig RunConfig::from_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot open config file: " + path);
    std::ostringstream ss;
    ss << f.rdbuf();
    return from_json_text(ss.str());
}

RunConfig RunConfig::from_json_text(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const std::exception& e) {
        throw ConfigError(std::string("config is not valid json: ") + e.what());
    }
    check_keys(j, "<root>", {"dataset", "model", "training", "output"});
    RunConfig c;
    if (j.contains("dataset")) dataset_from_json(j.at("dataset"), c.dataset);
    if (j.contains("model")) model_from_json(j.at("model"), c.model);
    if (j.contains("training")) training_from_json(j.at("training"), c.training);
    if (j.contains("output")) {
        check_keys(j.at("output"), "output", {"run_dir"});
        get_to(j.at("output"), "run_dir", c.output.run_dir);
    }
    c.validate();
    return c;
}

std::string RunConfig::to_json_text() const {
    json j = {{"dataset", dataset_to_json(dataset)},
              {"model", model_to_json(model)},
              {"training", training_to_json(training)},
              {"output", {{"run_dir", output.run_dir}}}};
    return j.dump(2);
}

void RunConfig::save(const std::string& path) const {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw ConfigError("cannot write config: " + path);
    f << to_json_text() << "\n";
}

void RunConfig::apply_override(const std::string& kv) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos)
        throw ConfigError("override must be key.path=value: " + kv);
    const std::string path = kv.substr(0, eq);
    const std::string value = kv.substr(eq + 1);

    json j = json::parse(to_json_text());
    json* cur = &j;
    std::istringstream ps(path);
    std::string part;
    std::vector<std::string> parts;
    while (std::getline(ps, part, '.')) parts.push_back(part);
    if (parts.empty()) throw ConfigError("empty override key");
    for (size_t i = 0; i + 1 < parts.size(); ++i) {
        if (!cur->contains(parts[i]))
            throw ConfigError("unknown config key \"" + path + "\"");
        cur = &(*cur)[parts[i]];
    }
    const std::string& leaf = parts.back();
    if (!cur->contains(leaf)) throw ConfigError("unknown config key \"" + path + "\"");
    json& slot = (*cur)[leaf];
    try {
        if (slot.is_string())
            slot = value;
        else
            slot = json::parse(value);
    } catch (const std::exception&) {
        throw ConfigError("cannot parse override value for " + path + ": " + value);
    }
    *this = from_json_text(j.dump());
}

void RunConfig::validate() const {
    if (dataset.rho < 0) throw ConfigError("dataset.rho must be >= 0");
    if (dataset.patch <= 0) throw ConfigError("dataset.patch must be positive");
    if (dataset.oversample < 1) throw ConfigError("dataset.oversample must be >= 1");
    if (model.schedule.steps < 1) throw ConfigError("model.schedule.steps must be >= 1");
    if (!(model.schedule.beta_start > 0 && model.schedule.beta_end < 1))
        throw ConfigError("model.schedule betas must lie in (0,1)");
    if (model.schedule.t2_train_lo > model.schedule.t2_train_hi)
        throw ConfigError("model.schedule t2 band is inverted");
    if (training.alternations < 1) throw ConfigError("training.alternations must be >= 1");
    if (training.batch < 1) throw ConfigError("training.batch must be >= 1");
    if (training.translation_pool < 1) throw ConfigError("training.translation_pool must be >= 1");
    if (model.reg.num_scales < 1) throw ConfigError("model.regnet.scales must be >= 1");
    if (static_cast<int>(model.reg.channels.size()) != model.reg.num_scales ||
        static_cast<int>(model.reg.iters_per_scale.size()) != model.reg.num_scales)
        throw ConfigError("model.regnet.channels/iters must have one entry per scale");
    const int64_t div = int64_t{1} << (model.reg.num_scales - 1);
    if (dataset.patch % div != 0)
        throw ConfigError("dataset.patch must be divisible by 2^(regnet scales - 1)");
}

RunConfig RunConfig::toy_preset() {
    RunConfig c;
    c.dataset.tag = "toy";
    c.dataset.rho = 8.0;
    c.dataset.patch = 64;
    c.dataset.manifest = "manifest.json";

    c.model.schedule.steps = 50;
    c.model.unet.base_channels = 16;
    c.model.unet.channel_mult = {1, 2, 2};
    c.model.unet.time_embed_dim = 32;
    c.model.mim_encoder.layers = 4;
    c.model.mim_encoder.hidden = 16;
    c.model.reg.num_scales = 4;
    c.model.reg.channels = {16, 24, 32, 48};
    c.model.reg.iters_per_scale = {2, 2, 2, 2};
    c.model.reg.corr_radius = 3;
    c.model.reg.head_hidden = 48;

    c.training.batch = 4;
    c.training.budgets.diffusion_bootstrap = 600;
    c.training.budgets.reg_s_bootstrap = 300;
    c.training.budgets.reg_c = 10;
    c.training.budgets.mim_target = 30;
    c.training.budgets.mim_source = 30;
    c.training.budgets.diffusion_refine = 60;
    c.training.budgets.reg_s_refine = 60;
    return c;
}

} // namespace xmreg
