#pragma once

#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "tsmiwae/classifiers.hpp"

namespace tsmiwae {

// Self-describing model checkpoint: architecture, both parameter snapshots
// (last and best), optimizer state, the feature scaling, and the training
// position. Randomness needs no engine state here: every draw re-derives
// from (seed, epoch, series index), so (seed, next_epoch) restores the
// stream exactly. Doubles survive the JSON round trip bit-exactly via
// shortest round-trip printing.
struct Checkpoint {
    std::string kind = "ours";  // "ours" or a gru variant name
    uint64_t seed = 0;
    std::string config_digest;

    ModelHyper hyper;  // generative model architecture (kind == "ours")
    GruSpec gru;       // baseline architecture (kind == "gru-*")
    int classes = 2;

    SamplingConfig sampling;
    AblationFlags ablation;
    double test_beta = 0.3;

    std::vector<std::string> feature_names;
    std::vector<double> feat_mean;     // original-space scaler
    std::vector<double> feat_std;
    std::vector<double> working_means; // observed means in the standardized space

    ParamStore params;       // last parameters (for resuming)
    ParamStore best_params;  // early-stopping snapshot (for inference)
    AdamWState opt;

    int next_epoch = 0;
    double best_metric = -std::numeric_limits<double>::infinity();
    int best_epoch = -1;
    bool diverged = false;
    std::vector<TrainLogEntry> log;  // wall times excluded on save

    bool is_generative() const { return kind == "ours"; }
};

namespace detail {

inline nlohmann::json store_to_json(const ParamStore& s) {
    nlohmann::json out = nlohmann::json::object();
    for (const auto& [name, var] : s.vars) {
        out[name] = {{"shape", var.shape}, {"values", var.value}};
    }
    return out;
}

inline ParamStore store_from_json(const nlohmann::json& j) {
    ParamStore s;
    for (auto it = j.begin(); it != j.end(); ++it) {
        Shape shape = it.value().at("shape").get<Shape>();
        std::vector<double> values = it.value().at("values").get<std::vector<double>>();
        s.add(it.key(), std::move(shape), std::move(values));
    }
    return s;
}

inline nlohmann::json moments_to_json(const std::map<std::string, std::vector<double>>& m) {
    nlohmann::json out = nlohmann::json::object();
    for (const auto& [name, v] : m) out[name] = v;
    return out;
}

inline std::map<std::string, std::vector<double>> moments_from_json(const nlohmann::json& j) {
    std::map<std::string, std::vector<double>> m;
    for (auto it = j.begin(); it != j.end(); ++it) m.emplace(it.key(), it.value().get<std::vector<double>>());
    return m;
}

}  // namespace detail

inline void save_checkpoint(const Checkpoint& c, const std::string& path) {
    nlohmann::json j;
    j["format"] = "tsmiwae-checkpoint";
    j["version"] = 1;
    j["kind"] = c.kind;
    j["seed"] = c.seed;
    j["config_digest"] = c.config_digest;
    j["classes"] = c.classes;
    j["hyper"] = {{"feature_dim", c.hyper.feature_dim}, {"classes", c.hyper.classes},
                  {"z_dim", c.hyper.z_dim},             {"hidden", c.hyper.hidden},
                  {"conv_channels", c.hyper.conv_channels}, {"conv_width", c.hyper.conv_width},
                  {"heads", c.hyper.heads},             {"enc_blocks", c.hyper.enc_blocks},
                  {"dec_blocks", c.hyper.dec_blocks},   {"cls_blocks", c.hyper.cls_blocks},
                  {"mis_hidden", c.hyper.mis_hidden},   {"kernel_len_init", c.hyper.kernel_len_init},
                  {"kernel_var_init", c.hyper.kernel_var_init}, {"online", c.hyper.online}};
    j["gru"] = {{"variant", gru_variant_name(c.gru.variant)},
                {"hidden", c.gru.hidden},
                {"simple_use_mean", c.gru.simple_use_mean},
                {"online", c.gru.online}};
    j["sampling"] = {{"k_train", c.sampling.k_train}, {"s_train", c.sampling.s_train},
                     {"k_test", c.sampling.k_test},   {"s_test", c.sampling.s_test},
                     {"beta", c.sampling.beta}};
    j["ablation"] = {{"supervision", c.ablation.supervision}, {"mnar", c.ablation.mnar},
                     {"obsdropout", c.ablation.obsdropout}};
    j["test_beta"] = c.test_beta;
    j["scaler"] = {{"feature_names", c.feature_names}, {"mean", c.feat_mean}, {"std", c.feat_std},
                   {"working_means", c.working_means}};
    j["params"] = detail::store_to_json(c.params);
    j["best_params"] = detail::store_to_json(c.best_params);
    j["opt"] = {{"step", c.opt.step},
                {"lr", c.opt.cfg.lr},
                {"beta1", c.opt.cfg.beta1},
                {"beta2", c.opt.cfg.beta2},
                {"eps", c.opt.cfg.eps},
                {"weight_decay", c.opt.cfg.weight_decay},
                {"m", detail::moments_to_json(c.opt.m)},
                {"v", detail::moments_to_json(c.opt.v)}};
    nlohmann::json log = nlohmann::json::array();
    for (const auto& e : c.log) log.push_back({{"epoch", e.epoch}, {"loss", e.loss}, {"val_metric", e.val_metric}});
    j["train"] = {{"next_epoch", c.next_epoch}, {"best_metric", c.best_metric}, {"best_epoch", c.best_epoch},
                  {"diverged", c.diverged},     {"log", log}};

    std::ofstream f(path);
    if (!f) throw DataError("cannot open for writing: " + path);
    f << j.dump(1) << '\n';
    if (!f) throw DataError("write failed: " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw DataError("cannot open: " + path);
    nlohmann::json j;
    try {
        f >> j;
    } catch (const std::exception& e) {
        throw DataError("checkpoint parse error in " + path + ": " + e.what());
    }
    if (j.value("format", "") != "tsmiwae-checkpoint")
        throw DataError(path + " is not a tsmiwae checkpoint");
    Checkpoint c;
    c.kind = j.at("kind").get<std::string>();
    c.seed = j.at("seed").get<uint64_t>();
    c.config_digest = j.at("config_digest").get<std::string>();
    c.classes = j.at("classes").get<int>();
    const auto& h = j.at("hyper");
    c.hyper.feature_dim = h.at("feature_dim").get<int>();
    c.hyper.classes = h.at("classes").get<int>();
    c.hyper.z_dim = h.at("z_dim").get<int>();
    c.hyper.hidden = h.at("hidden").get<int>();
    c.hyper.conv_channels = h.at("conv_channels").get<int>();
    c.hyper.conv_width = h.at("conv_width").get<int>();
    c.hyper.heads = h.at("heads").get<int>();
    c.hyper.enc_blocks = h.at("enc_blocks").get<int>();
    c.hyper.dec_blocks = h.at("dec_blocks").get<int>();
    c.hyper.cls_blocks = h.at("cls_blocks").get<int>();
    c.hyper.mis_hidden = h.at("mis_hidden").get<int>();
    c.hyper.kernel_len_init = h.at("kernel_len_init").get<double>();
    c.hyper.kernel_var_init = h.at("kernel_var_init").get<double>();
    c.hyper.online = h.at("online").get<bool>();
    const auto& g = j.at("gru");
    std::string variant = g.at("variant").get<std::string>();
    for (GruVariant v : {GruVariant::Zero, GruVariant::Mean, GruVariant::Forward, GruVariant::Simple, GruVariant::GruD})
        if (gru_variant_name(v) == variant) c.gru.variant = v;
    c.gru.hidden = g.at("hidden").get<int>();
    c.gru.simple_use_mean = g.at("simple_use_mean").get<bool>();
    c.gru.online = g.at("online").get<bool>();
    const auto& sc = j.at("sampling");
    c.sampling.k_train = sc.at("k_train").get<int>();
    c.sampling.s_train = sc.at("s_train").get<int>();
    c.sampling.k_test = sc.at("k_test").get<int>();
    c.sampling.s_test = sc.at("s_test").get<int>();
    c.sampling.beta = sc.at("beta").get<double>();
    const auto& ab = j.at("ablation");
    c.ablation.supervision = ab.at("supervision").get<bool>();
    c.ablation.mnar = ab.at("mnar").get<bool>();
    c.ablation.obsdropout = ab.at("obsdropout").get<bool>();
    c.test_beta = j.at("test_beta").get<double>();
    const auto& scale = j.at("scaler");
    c.feature_names = scale.at("feature_names").get<std::vector<std::string>>();
    c.feat_mean = scale.at("mean").get<std::vector<double>>();
    c.feat_std = scale.at("std").get<std::vector<double>>();
    c.working_means = scale.at("working_means").get<std::vector<double>>();
    c.params = detail::store_from_json(j.at("params"));
    c.best_params = detail::store_from_json(j.at("best_params"));
    const auto& o = j.at("opt");
    c.opt.step = o.at("step").get<long>();
    c.opt.cfg.lr = o.at("lr").get<double>();
    c.opt.cfg.beta1 = o.at("beta1").get<double>();
    c.opt.cfg.beta2 = o.at("beta2").get<double>();
    c.opt.cfg.eps = o.at("eps").get<double>();
    c.opt.cfg.weight_decay = o.at("weight_decay").get<double>();
    c.opt.m = detail::moments_from_json(o.at("m"));
    c.opt.v = detail::moments_from_json(o.at("v"));
    const auto& tr = j.at("train");
    c.next_epoch = tr.at("next_epoch").get<int>();
    // -inf (no finished epoch yet) serializes as null
    c.best_metric = tr.at("best_metric").is_null() ? -std::numeric_limits<double>::infinity()
                                                   : tr.at("best_metric").get<double>();
    c.best_epoch = tr.at("best_epoch").get<int>();
    c.diverged = tr.at("diverged").get<bool>();
    for (const auto& e : tr.at("log")) {
        TrainLogEntry le;
        le.epoch = e.at("epoch").get<int>();
        le.loss = e.at("loss").get<double>();
        le.val_metric = e.at("val_metric").get<double>();
        c.log.push_back(le);
    }
    return c;
}

}  // namespace tsmiwae
