#pragma once

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "tsmiwae/checkpoint.hpp"
#include "tsmiwae/inference.hpp"
#include "tsmiwae/objective.hpp"

// Command-line front end. Exit codes: 0 success, 1 usage error, 2 runtime or
// data error, 3 gradcheck threshold failure.
namespace tsmiwae::cli {

namespace fs = std::filesystem;
using nlohmann::json;

struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

namespace detail {

// Flat dotted-key JSON config ("train.lr": 0.001). Values seed the option
// defaults; explicit command-line flags override them.
inline json load_config(const std::vector<std::string>& args) {
    for (size_t i = 0; i < args.size(); ++i) {
        if (args[i] == "--config") {
            if (i + 1 >= args.size()) throw UsageError("--config needs a path");
            std::ifstream f(args[i + 1]);
            if (!f) throw UsageError("cannot open config file " + args[i + 1]);
            json j;
            try {
                f >> j;
            } catch (const std::exception& e) {
                throw UsageError("config parse error: " + std::string(e.what()));
            }
            if (!j.is_object()) throw UsageError("config must be a JSON object of dotted keys");
            return j;
        }
    }
    return json::object();
}

class ConfigApplier {
public:
    ConfigApplier(const json& cfg, std::string prefix) : cfg_(cfg), prefix_(std::move(prefix)) {}

    template <class T>
    void set(const std::string& key, T& target) {
        known_.push_back(prefix_ + "." + key);
        auto it = cfg_.find(prefix_ + "." + key);
        if (it == cfg_.end()) return;
        try {
            target = it->get<T>();
        } catch (const std::exception&) {
            throw UsageError("config key " + prefix_ + "." + key + " has the wrong type");
        }
    }

    // every key for this command must be recognized
    void finish() const {
        for (auto it = cfg_.begin(); it != cfg_.end(); ++it) {
            const std::string& k = it.key();
            if (k.rfind(prefix_ + ".", 0) != 0) continue;  // other commands' keys
            bool ok = false;
            for (const std::string& known : known_) ok |= (known == k);
            if (!ok) throw UsageError("unknown config key: " + k);
        }
    }

private:
    const json& cfg_;
    std::string prefix_;
    std::vector<std::string> known_;
};

inline std::string digest_of(const json& effective) { return to_hex(fnv1a(effective.dump())); }

inline void ensure_outdir(const std::string& out, bool force) {
    fs::path p(out);
    if (fs::exists(p)) {
        if (!fs::is_directory(p)) throw DataError("output path exists and is not a directory: " + out);
        if (!fs::is_empty(p) && !force)
            throw DataError("output directory " + out + " is not empty; pass --force to overwrite");
    }
    fs::create_directories(p);
}

inline void write_text(const std::string& path, const std::string& text) {
    std::ofstream f(path);
    if (!f) throw DataError("cannot open for writing: " + path);
    f << text;
    if (!f) throw DataError("write failed: " + path);
}

inline StandardScaler scaler_from(const std::vector<double>& mean, const std::vector<double>& stdev) {
    StandardScaler sc;
    sc.mean = mean;
    sc.stdev = stdev;
    return sc;
}

inline void check_features(const Dataset& ds, const std::vector<std::string>& expected, const std::string& what) {
    if (ds.feature_names != expected)
        throw DataError(what + ": feature columns do not match the checkpoint's schema");
}

}  // namespace detail

// ---------------------------------------------------------------------------
// generate
// ---------------------------------------------------------------------------

struct GenerateArgs {
    std::string out;
    bool force = false;
    uint64_t seed = 0;
    int n = 2000;
    int steps = 32;
    int features = 6;
    int classes = 2;
    std::string mech = "mnar";
    double rate = 0.4;
    double slope = 4.0;
    double threshold = 0.0;
    double class_sep = 1.0;
    double freq_sep = 1.0;
    double noise = 0.15;
    int sources = 2;
    double source_scale = 0.5;
    bool regular_times = false;
    double train_frac = 0.7;
    double val_frac = 0.15;
};

inline int cmd_generate(const GenerateArgs& a, const json& effective) {
    detail::ensure_outdir(a.out, a.force);
    SyntheticConfig cfg;
    cfg.n = a.n;
    cfg.steps = a.steps;
    cfg.features = a.features;
    cfg.classes = a.classes;
    cfg.mech.mechanism = mechanism_from_name(a.mech);
    cfg.mech.base_rate = a.rate;
    cfg.mech.slope = a.slope;
    cfg.mech.threshold = a.threshold;
    cfg.seed = a.seed;
    cfg.class_sep = a.class_sep;
    cfg.freq_sep = a.freq_sep;
    cfg.noise_scale = a.noise;
    cfg.shared_sources = a.sources;
    cfg.source_scale = a.source_scale;
    cfg.irregular_times = !a.regular_times;
    SyntheticDataset gen = generate_synthetic(cfg);

    int n_train = static_cast<int>(std::llround(a.train_frac * a.n));
    int n_val = static_cast<int>(std::llround(a.val_frac * a.n));
    if (n_train < 1 || n_val < 1 || n_train + n_val >= a.n)
        throw UsageError("split fractions leave an empty train/val/test split");

    auto slice = [&](int lo, int hi, const std::string& tag) {
        Dataset d;
        d.feature_names = gen.data.feature_names;
        d.split = tag;
        d.series.assign(gen.data.series.begin() + lo, gen.data.series.begin() + hi);
        return d;
    };
    Dataset train = slice(0, n_train, "train");
    Dataset val = slice(n_train, n_train + n_val, "val");
    Dataset test = slice(n_train + n_val, a.n, "test");

    Dataset truth;
    truth.feature_names = gen.data.feature_names;
    truth.series = gen.data.series;
    for (size_t i = 0; i < truth.series.size(); ++i) {
        truth.series[i].values = gen.truth[i];
        truth.series[i].mask = Mat(cfg.steps, cfg.features, 1.0);
    }

    fs::path out(a.out);
    save_csv(train, (out / "train.csv").string());
    save_csv(val, (out / "val.csv").string());
    save_csv(test, (out / "test.csv").string());
    save_csv(truth, (out / "truth.csv").string());

    std::vector<long> class_counts(a.classes, 0);
    for (const auto& s : gen.data.series) class_counts[*s.label]++;

    json manifest;
    manifest["command"] = "generate";
    manifest["config"] = effective;
    manifest["config_digest"] = detail::digest_of(effective);
    manifest["seed"] = a.seed;
    manifest["splits"] = {{"train", n_train}, {"val", n_val}, {"test", a.n - n_train - n_val}};
    manifest["missing_rate"] = {{"requested", a.rate}, {"empirical", gen.empirical_missing_rate}};
    manifest["class_counts"] = class_counts;
    manifest["files"] = {{"train", "train.csv"}, {"val", "val.csv"}, {"test", "test.csv"}, {"truth", "truth.csv"}};
    detail::write_text((out / "manifest.json").string(), manifest.dump(1) + "\n");
    std::printf("generate: %d series (T=%d, d=%d, %s rate %.3f -> empirical %.4f) -> %s\n", a.n, a.steps, a.features,
                a.mech.c_str(), a.rate, gen.empirical_missing_rate, a.out.c_str());
    return 0;
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

struct TrainArgs {
    std::string train_path;
    std::string val_path;
    std::string out;
    bool force = false;
    bool resume = false;
    uint64_t seed = 0;
    std::string model = "ours";
    double beta = 0.3;
    int k = 10;
    int s_train = 1;
    int epochs = 100;
    double lr = 1e-3;
    int batch = 128;
    int patience = 20;
    double weight_decay = 0.0;
    bool oversample = false;
    int threads = 1;
    int hidden = 128;
    int z_dim = 32;
    int conv_channels = 64;
    int heads = 4;
    int enc_blocks = 2;
    int dec_blocks = 2;
    int cls_blocks = 1;
    int mis_hidden = 64;
    double kernel_len = 0.2;
    double kernel_var = 1.0;
    bool online = false;
    int gru_hidden = 64;
    bool simple_mean = false;
    int val_particles = 5;
    int val_samples = 1;
    bool stop_on_val_loss = false;
};

namespace detail {

struct ModelKind {
    bool generative = true;
    AblationFlags ablation;
    GruVariant gru = GruVariant::Zero;
};

inline ModelKind parse_model_kind(const std::string& name) {
    ModelKind k;
    if (name == "ours") return k;
    if (name == "ours-no-obsdropout") {
        k.ablation.obsdropout = false;
        return k;
    }
    if (name == "ours-no-mnar") {
        k.ablation.mnar = false;
        return k;
    }
    if (name == "ours-no-supervision") {
        k.ablation.supervision = false;
        return k;
    }
    k.generative = false;
    if (name == "gru-zero") k.gru = GruVariant::Zero;
    else if (name == "gru-mean") k.gru = GruVariant::Mean;
    else if (name == "gru-forward") k.gru = GruVariant::Forward;
    else if (name == "gru-simple") k.gru = GruVariant::Simple;
    else if (name == "gru-d") k.gru = GruVariant::GruD;
    else throw UsageError("unknown model '" + name + "'");
    return k;
}

inline void write_train_log(const std::string& path, const std::vector<TrainLogEntry>& log) {
    std::ofstream f(path);
    if (!f) throw DataError("cannot open for writing: " + path);
    for (const auto& e : log) {
        json line = {{"epoch", e.epoch}, {"loss", e.loss}, {"val_metric", e.val_metric}, {"wall_s", e.wall_s}};
        f << line.dump() << '\n';
    }
}

}  // namespace detail

inline int cmd_train(const TrainArgs& a, const json& effective) {
    detail::ModelKind kind = detail::parse_model_kind(a.model);
    fs::path out(a.out);
    fs::create_directories(out);
    std::string ckpt_path = (out / "checkpoint.json").string();

    Dataset train_raw = load_csv(a.train_path);
    Dataset val_raw = load_csv(a.val_path);
    if (train_raw.feature_names != val_raw.feature_names)
        throw DataError("train and validation files disagree on feature columns");
    StandardScaler scaler;
    scaler.fit(train_raw);
    Dataset train_ds = scaler.transform(train_raw);
    Dataset val_ds = scaler.transform(val_raw);
    train_ds.split = "train";
    val_ds.split = "val";
    int classes = std::max(2, std::max(train_ds.num_classes(), val_ds.num_classes()));
    std::vector<double> working_means = observed_feature_means(train_ds);

    SamplingConfig sc;
    sc.k_train = a.k;
    sc.s_train = a.s_train;
    sc.beta = kind.ablation.obsdropout ? a.beta : 0.0;

    TrainConfig tc;
    tc.batch_size = a.batch;
    tc.lr = a.lr;
    tc.weight_decay = a.weight_decay;
    tc.max_epochs = a.epochs;
    tc.patience = a.patience;
    tc.oversample = a.oversample;
    tc.seed = a.seed;
    tc.threads = a.threads;
    tc.val_particles = a.val_particles;
    tc.val_samples = a.val_samples;
    tc.stop_on_val_loss = a.stop_on_val_loss;

    Checkpoint ckpt;
    TrainState state;
    if (a.resume) {
        if (!fs::exists(ckpt_path)) throw DataError("resume requested but " + ckpt_path + " does not exist");
        ckpt = load_checkpoint(ckpt_path);
        if (ckpt.kind != a.model) throw DataError("checkpoint kind '" + ckpt.kind + "' does not match --model");
        detail::check_features(train_ds, ckpt.feature_names, "train data");
        state.next_epoch = ckpt.next_epoch;
        state.opt = ckpt.opt;
        state.best_params = ckpt.best_params;
        state.best_metric = ckpt.best_metric;
        state.best_epoch = ckpt.best_epoch;
        state.log = ckpt.log;
        state.diverged = ckpt.diverged;
    }

    if (kind.generative) {
        ModelHyper hyper;
        hyper.feature_dim = train_ds.feature_dim();
        hyper.classes = classes;
        hyper.z_dim = a.z_dim;
        hyper.hidden = a.hidden;
        hyper.conv_channels = a.conv_channels;
        hyper.heads = a.heads;
        hyper.enc_blocks = a.enc_blocks;
        hyper.dec_blocks = a.dec_blocks;
        hyper.cls_blocks = a.cls_blocks;
        hyper.mis_hidden = a.mis_hidden;
        hyper.kernel_len_init = a.kernel_len;
        hyper.kernel_var_init = a.kernel_var;
        hyper.online = a.online;
        ModelParams model = a.resume ? ModelParams{ckpt.hyper, ckpt.params, {}, {}, {}} : make_model(hyper, a.seed);
        if (a.resume) hyper = ckpt.hyper;
        GenerativeClassifier cls(std::move(model), sc, kind.ablation, working_means);
        state = train(cls, train_ds, val_ds, tc, std::move(state));

        ckpt.kind = a.model;
        ckpt.hyper = hyper;
        ckpt.classes = classes;
        ckpt.params = cls.params();
        ckpt.working_means = working_means;
    } else {
        GruSpec spec;
        spec.variant = kind.gru;
        spec.hidden = a.gru_hidden;
        spec.simple_use_mean = a.simple_mean;
        spec.online = a.online;
        GruClassifier cls(spec, train_ds.feature_dim(), classes, working_means, a.seed);
        if (a.resume) cls.params() = ckpt.params;
        state = train_classifier(cls, train_ds, val_ds, tc, std::move(state));

        ckpt.kind = a.model;
        ckpt.gru = spec;
        ckpt.classes = classes;
        ckpt.params = cls.params();
        ckpt.working_means = working_means;
    }

    ckpt.seed = a.seed;
    ckpt.config_digest = detail::digest_of(effective);
    ckpt.sampling = sc;
    ckpt.ablation = kind.ablation;
    ckpt.test_beta = sc.beta;
    ckpt.feature_names = train_ds.feature_names;
    ckpt.feat_mean = scaler.mean;
    ckpt.feat_std = scaler.stdev;
    ckpt.best_params = state.best_params;
    ckpt.opt = state.opt;
    ckpt.next_epoch = state.next_epoch;
    ckpt.best_metric = state.best_metric;
    ckpt.best_epoch = state.best_epoch;
    ckpt.diverged = state.diverged;
    ckpt.log = state.log;
    save_checkpoint(ckpt, ckpt_path);
    detail::write_train_log((out / "train_log.jsonl").string(), state.log);

    std::printf("train: %s for %zu epochs, best val metric %.4f at epoch %d%s -> %s\n", a.model.c_str(),
                state.log.size(), state.best_metric, state.best_epoch, state.diverged ? " (diverged, best kept)" : "",
                ckpt_path.c_str());
    return 0;
}

// ---------------------------------------------------------------------------
// evaluate
// ---------------------------------------------------------------------------

struct EvaluateArgs {
    std::string checkpoint;
    std::string data;
    std::string out;
    uint64_t seed = 0;
    int k = 0;        // 0: use the checkpoint's k_test
    int s_test = 0;   // 0: use the checkpoint's s_test
    double test_beta = -1.0;  // <0: use the checkpoint's value
    int threads = 1;
    int ece_bins = 10;
};

inline int cmd_evaluate(const EvaluateArgs& a, const json& effective) {
    Checkpoint ckpt = load_checkpoint(a.checkpoint);
    Dataset raw = load_csv(a.data);
    detail::check_features(raw, ckpt.feature_names, "evaluate data");
    Dataset test_ds = detail::scaler_from(ckpt.feat_mean, ckpt.feat_std).transform(raw);

    int k = a.k > 0 ? a.k : ckpt.sampling.k_test;
    int s_outer = a.s_test > 0 ? a.s_test : ckpt.sampling.s_test;
    double test_beta = a.test_beta >= 0.0 ? a.test_beta : ckpt.test_beta;

    MetricsReport rep;
    if (ckpt.is_generative()) {
        ModelParams model{ckpt.hyper, ckpt.best_params, ckpt.feature_names, ckpt.feat_mean, ckpt.feat_std};
        GenerativeClassifier cls(std::move(model), ckpt.sampling, ckpt.ablation, ckpt.working_means);
        cls.set_test_beta(test_beta);
        rep = evaluate_classifier(cls, ckpt.best_params, test_ds, k, s_outer, a.seed, a.threads, a.ece_bins);
    } else {
        GruClassifier cls(ckpt.gru, static_cast<int>(ckpt.feature_names.size()), ckpt.classes, ckpt.working_means, 0);
        rep = evaluate_classifier(cls, ckpt.best_params, test_ds, 1, 1, a.seed, a.threads, a.ece_bins);
    }
    if (!rep.auroc && ckpt.classes == 2)
        std::fprintf(stderr, "warning: AUROC omitted (a class is absent from the test labels)\n");

    json out;
    if (rep.auroc) out["auroc"] = *rep.auroc;
    if (rep.accuracy) out["accuracy"] = *rep.accuracy;
    if (rep.precision) out["precision"] = *rep.precision;
    if (rep.recall) out["recall"] = *rep.recall;
    if (rep.cross_entropy) out["cross_entropy"] = *rep.cross_entropy;
    if (rep.ece) out["ece"] = *rep.ece;
    if (rep.brier) out["brier"] = *rep.brier;
    out["sample_count"] = rep.sample_count;
    out["seed"] = a.seed;
    out["config_digest"] = detail::digest_of(effective);
    out["model"] = ckpt.kind;
    out["k_test"] = k;
    out["s_test"] = s_outer;
    out["test_beta"] = test_beta;
    detail::write_text(a.out, out.dump(1) + "\n");
    std::printf("evaluate: %s on %ld series -> %s\n", ckpt.kind.c_str(), rep.sample_count, a.out.c_str());
    return 0;
}

// ---------------------------------------------------------------------------
// impute
// ---------------------------------------------------------------------------

struct ImputeArgs {
    std::string checkpoint;  // model mode
    std::string model;       // or heuristic: mean / forward / zero
    std::string stats_from;  // train split for scaler in heuristic mode
    std::string data;
    std::string out;
    bool force = false;
    double holdout_rate = 0.1;
    uint64_t holdout_seed = 0;
    int draws = 20;
    uint64_t seed = 0;
    int threads = 1;
};

namespace detail {

inline void write_imputation_csv(const std::string& path, const Dataset& ds, const std::vector<Mat>& mean,
                                 const std::vector<Mat>& stdev) {
    std::ofstream f(path);
    if (!f) throw DataError("cannot open for writing: " + path);
    f << "series_id,time,feature,mean,std,observed\n";
    for (size_t i = 0; i < ds.series.size(); ++i) {
        const auto& s = ds.series[i];
        for (int t = 0; t < s.steps(); ++t)
            for (int j = 0; j < s.features(); ++j) {
                f << s.id << ',' << format_double(s.times[t]) << ',' << ds.feature_names[j] << ','
                  << format_double(mean[i].at(t, j)) << ',' << format_double(stdev[i].at(t, j)) << ','
                  << (s.mask.at(t, j) != 0.0 ? '1' : '0') << '\n';
            }
    }
    if (!f) throw DataError("write failed: " + path);
}

}  // namespace detail

inline int cmd_impute(const ImputeArgs& a, const json& effective) {
    detail::ensure_outdir(a.out, a.force);
    fs::path out(a.out);

    Dataset working;  // standardized working space
    std::string mode;
    Checkpoint ckpt;
    std::vector<double> train_means;  // observed means of the training split, standardized space
    if (!a.checkpoint.empty()) {
        ckpt = load_checkpoint(a.checkpoint);
        if (!ckpt.is_generative()) throw DataError("impute needs a generative-model checkpoint");
        Dataset raw = load_csv(a.data);
        detail::check_features(raw, ckpt.feature_names, "impute data");
        working = detail::scaler_from(ckpt.feat_mean, ckpt.feat_std).transform(raw);
        train_means = ckpt.working_means;
        mode = "model";
    } else {
        if (a.model != "mean" && a.model != "forward" && a.model != "zero")
            throw UsageError("impute needs --checkpoint or --model {mean,forward,zero}");
        if (a.stats_from.empty()) throw UsageError("heuristic imputation needs --stats-from (training split)");
        StandardScaler scaler;
        Dataset stats_raw = load_csv(a.stats_from);
        scaler.fit(stats_raw);
        Dataset raw = load_csv(a.data);
        if (raw.feature_names != stats_raw.feature_names)
            throw DataError("impute data and --stats-from disagree on feature columns");
        working = scaler.transform(raw);
        train_means = observed_feature_means(scaler.transform(stats_raw));
        mode = a.model;
    }

    HoldoutMask holdout;
    Dataset masked = working;
    if (a.holdout_rate > 0.0) {
        auto pair = make_holdout(working, a.holdout_rate, a.holdout_seed);
        masked = std::move(pair.first);
        holdout = std::move(pair.second);
    }

    int n = static_cast<int>(masked.series.size());
    std::vector<Mat> means(n), stdevs(n);
    if (mode == "model") {
        tsmiwae::detail::parallel_for(n, a.threads, [&](int i) {
            ImputationResult r = impute(ckpt.hyper, ckpt.best_params, masked.series[i], a.draws, a.seed,
                                        static_cast<uint64_t>(i));
            means[i] = std::move(r.mean);
            stdevs[i] = std::move(r.stdev);
        });
    } else {
        for (int i = 0; i < n; ++i) {
            const auto& s = masked.series[i];
            means[i] = mode == "mean" ? impute_mean(s, train_means)
                       : mode == "forward" ? impute_forward(s, train_means)
                                           : impute_zero(s);
            stdevs[i] = Mat(s.steps(), s.features());
        }
    }
    detail::write_imputation_csv((out / "imputations.csv").string(), masked, means, stdevs);

    json rep;
    rep["command"] = "impute";
    rep["mode"] = mode;
    rep["seed"] = a.seed;
    rep["config_digest"] = detail::digest_of(effective);
    if (holdout.count() > 0) {
        ImputationScore score = evaluate_imputation_values(means, holdout);
        rep["mae"] = score.mae;
        rep["mre"] = score.mre;
        rep["holdout_cells"] = score.cells;
        std::printf("impute (%s): MAE %.4f, MRE %.4f over %zu held-out cells -> %s\n", mode.c_str(), score.mae,
                    score.mre, score.cells, a.out.c_str());
    } else {
        std::printf("impute (%s): dump written (no holdout requested) -> %s\n", mode.c_str(), a.out.c_str());
    }
    detail::write_text((out / "imputation_metrics.json").string(), rep.dump(1) + "\n");
    return 0;
}

// ---------------------------------------------------------------------------
// gradcheck
// ---------------------------------------------------------------------------

struct GradcheckArgs {
    std::string ablation = "none";
    uint64_t seed = 0;
    double tol = 1e-4;
    double fd_step = 1e-5;
    std::string out;
};

inline int cmd_gradcheck(const GradcheckArgs& a, const json& effective) {
    AblationFlags abl;
    if (a.ablation == "no-mnar") abl.mnar = false;
    else if (a.ablation == "no-supervision") abl.supervision = false;
    else if (a.ablation == "no-obsdropout") abl.obsdropout = false;
    else if (a.ablation != "none") throw UsageError("unknown --ablation '" + a.ablation + "'");

    GradCheckReport rep = gradient_check(abl, a.seed, a.tol, a.fd_step);
    std::printf("gradcheck (%s): %ld coordinates in %.2f s\n", a.ablation.c_str(), rep.coords, rep.elapsed_s);
    for (const auto& [group, err] : rep.group_rel_err)
        std::printf("  %-7s max rel err %.3e   max |grad| %.3e\n", group.c_str(), err,
                    rep.group_grad_absmax.at(group));
    std::printf("  overall max rel err %.3e (tolerance %.1e): %s\n", rep.max_rel_err, a.tol,
                rep.pass ? "PASS" : "FAIL");
    if (a.ablation == "no-mnar")
        std::printf("  missing-model gradients identically zero: %s\n",
                    rep.group_grad_absmax.at("psi") == 0.0 ? "yes" : "NO");
    if (a.ablation == "no-supervision")
        std::printf("  classifier gradients identically zero: %s\n",
                    rep.group_grad_absmax.at("lambda") == 0.0 ? "yes" : "NO");

    if (!a.out.empty()) {
        json j;
        j["ablation"] = a.ablation;
        j["max_rel_err"] = rep.max_rel_err;
        j["tolerance"] = a.tol;
        j["coords"] = rep.coords;
        j["elapsed_s"] = rep.elapsed_s;
        j["pass"] = rep.pass;
        for (const auto& [group, err] : rep.group_rel_err) {
            j["groups"][group] = {{"max_rel_err", err}, {"grad_absmax", rep.group_grad_absmax.at(group)}};
        }
        j["config_digest"] = detail::digest_of(effective);
        detail::write_text(a.out, j.dump(1) + "\n");
    }
    return rep.pass ? 0 : 3;
}

// ---------------------------------------------------------------------------
// argument wiring
// ---------------------------------------------------------------------------

inline int run(const std::vector<std::string>& args) {
    try {
        json cfg = detail::load_config(args);

        CLI::App app{"probabilistic classification and imputation for multivariate time series with missing values"};
        app.require_subcommand(1);
        std::string config_path;
        app.add_option("--config", config_path, "JSON config file with flat dotted keys (flags override)");

        GenerateArgs g;
        {
            detail::ConfigApplier c(cfg, "generate");
            c.set("seed", g.seed), c.set("n", g.n), c.set("steps", g.steps), c.set("features", g.features);
            c.set("classes", g.classes), c.set("mech", g.mech), c.set("rate", g.rate), c.set("slope", g.slope);
            c.set("threshold", g.threshold), c.set("class_sep", g.class_sep), c.set("freq_sep", g.freq_sep);
            c.set("noise", g.noise);
            c.set("sources", g.sources), c.set("source_scale", g.source_scale), c.set("regular_times", g.regular_times);
            c.set("train_frac", g.train_frac), c.set("val_frac", g.val_frac), c.set("out", g.out);
            c.finish();
        }
        CLI::App* gen = app.add_subcommand("generate", "write a synthetic corrupted dataset");
        gen->add_option("--config", config_path, "JSON config file (already applied)");
        gen->add_option("--out", g.out, "output directory")->required(g.out.empty());
        gen->add_flag("--force", g.force, "overwrite a non-empty output directory");
        gen->add_option("--seed", g.seed, "master seed");
        gen->add_option("--n", g.n, "number of series");
        gen->add_option("--steps,-T", g.steps, "time steps per series");
        gen->add_option("--features,-d", g.features, "feature count");
        gen->add_option("--classes", g.classes, "class count");
        gen->add_option("--mech", g.mech, "missingness mechanism: mcar | mar | mnar");
        gen->add_option("--rate", g.rate, "target missing fraction");
        gen->add_option("--slope", g.slope, "logistic slope for mar/mnar");
        gen->add_option("--threshold", g.threshold, "offset on the calibrated logistic center");
        gen->add_option("--class-sep", g.class_sep, "class level separation");
        gen->add_option("--freq-sep", g.freq_sep, "class frequency separation");
        gen->add_option("--noise", g.noise, "noise amplitude");
        gen->add_option("--sources", g.sources, "shared smooth sources");
        gen->add_option("--source-scale", g.source_scale, "shared source amplitude");
        gen->add_flag("--regular-times", g.regular_times, "regular instead of irregular time grids");
        gen->add_option("--train-frac", g.train_frac, "train split fraction");
        gen->add_option("--val-frac", g.val_frac, "validation split fraction");

        TrainArgs t;
        {
            detail::ConfigApplier c(cfg, "train");
            c.set("train", t.train_path), c.set("val", t.val_path), c.set("out", t.out), c.set("seed", t.seed);
            c.set("model", t.model), c.set("beta", t.beta), c.set("k", t.k), c.set("s_train", t.s_train);
            c.set("epochs", t.epochs), c.set("lr", t.lr), c.set("batch", t.batch), c.set("patience", t.patience);
            c.set("weight_decay", t.weight_decay), c.set("oversample", t.oversample), c.set("threads", t.threads);
            c.set("hidden", t.hidden), c.set("z_dim", t.z_dim), c.set("conv_channels", t.conv_channels);
            c.set("heads", t.heads), c.set("enc_blocks", t.enc_blocks), c.set("dec_blocks", t.dec_blocks);
            c.set("cls_blocks", t.cls_blocks), c.set("mis_hidden", t.mis_hidden), c.set("kernel_len", t.kernel_len);
            c.set("kernel_var", t.kernel_var), c.set("online", t.online), c.set("gru_hidden", t.gru_hidden);
            c.set("simple_mean", t.simple_mean), c.set("val_particles", t.val_particles);
            c.set("val_samples", t.val_samples), c.set("stop_on_val_loss", t.stop_on_val_loss);
            c.finish();
        }
        CLI::App* tr = app.add_subcommand("train", "train a model and write a checkpoint");
        tr->add_option("--config", config_path, "JSON config file (already applied)");
        tr->add_option("--train", t.train_path, "training CSV")->required(t.train_path.empty());
        tr->add_option("--val", t.val_path, "validation CSV")->required(t.val_path.empty());
        tr->add_option("--out", t.out, "output directory")->required(t.out.empty());
        tr->add_flag("--resume", t.resume, "continue from the checkpoint in --out");
        tr->add_option("--seed", t.seed, "master seed");
        tr->add_option("--model", t.model,
                       "ours | ours-no-obsdropout | ours-no-mnar | ours-no-supervision | gru-zero | gru-mean | "
                       "gru-forward | gru-simple | gru-d");
        tr->add_option("--beta", t.beta, "observation dropout rate");
        tr->add_option("--k,-K", t.k, "training particles");
        tr->add_option("--s-train", t.s_train, "outer training samples");
        tr->add_option("--epochs", t.epochs, "maximum epochs");
        tr->add_option("--lr", t.lr, "learning rate");
        tr->add_option("--batch", t.batch, "batch size");
        tr->add_option("--patience", t.patience, "early stopping patience");
        tr->add_option("--weight-decay", t.weight_decay, "decoupled weight decay");
        tr->add_flag("--oversample", t.oversample, "class-balance each epoch by oversampling");
        tr->add_option("--threads", t.threads, "worker threads");
        tr->add_option("--hidden", t.hidden, "transformer width");
        tr->add_option("--z-dim", t.z_dim, "latent dimension");
        tr->add_option("--conv-channels", t.conv_channels, "conv channels");
        tr->add_option("--heads", t.heads, "attention heads");
        tr->add_option("--enc-blocks", t.enc_blocks, "encoder transformer blocks");
        tr->add_option("--dec-blocks", t.dec_blocks, "decoder transformer blocks");
        tr->add_option("--cls-blocks", t.cls_blocks, "classifier transformer blocks");
        tr->add_option("--mis-hidden", t.mis_hidden, "missing-model width");
        tr->add_option("--kernel-len", t.kernel_len, "prior kernel length scale (initial)");
        tr->add_option("--kernel-var", t.kernel_var, "prior kernel variance (initial)");
        tr->add_flag("--online", t.online, "per-step online prediction mode");
        tr->add_option("--gru-hidden", t.gru_hidden, "baseline GRU width");
        tr->add_flag("--simple-mean", t.simple_mean, "gru-simple imputes with the mean instead of forward fill");
        tr->add_option("--val-particles", t.val_particles, "particles for the per-epoch validation metric");
        tr->add_option("--val-samples", t.val_samples, "outer samples for the per-epoch validation metric");
        tr->add_flag("--stop-on-val-loss", t.stop_on_val_loss,
                     "early-stop on validation loss instead of the classification metric");

        EvaluateArgs e;
        {
            detail::ConfigApplier c(cfg, "evaluate");
            c.set("checkpoint", e.checkpoint), c.set("data", e.data), c.set("out", e.out), c.set("seed", e.seed);
            c.set("k", e.k), c.set("s_test", e.s_test), c.set("test_beta", e.test_beta), c.set("threads", e.threads);
            c.set("ece_bins", e.ece_bins);
            c.finish();
        }
        CLI::App* ev = app.add_subcommand("evaluate", "score a checkpoint on a labeled split");
        ev->add_option("--config", config_path, "JSON config file (already applied)");
        ev->add_option("--checkpoint", e.checkpoint, "checkpoint file")->required(e.checkpoint.empty());
        ev->add_option("--data", e.data, "labeled CSV to score")->required(e.data.empty());
        ev->add_option("--out", e.out, "metrics JSON path")->required(e.out.empty());
        ev->add_option("--seed", e.seed, "evaluation seed");
        ev->add_option("--k,-K", e.k, "test particles (0: from checkpoint)");
        ev->add_option("--s-test", e.s_test, "outer test samples (0: from checkpoint)");
        ev->add_option("--test-beta", e.test_beta, "observation dropout at prediction (<0: from checkpoint)");
        ev->add_option("--threads", e.threads, "worker threads");
        ev->add_option("--ece-bins", e.ece_bins, "calibration bins");

        ImputeArgs im;
        {
            detail::ConfigApplier c(cfg, "impute");
            c.set("checkpoint", im.checkpoint), c.set("model", im.model), c.set("stats_from", im.stats_from);
            c.set("data", im.data), c.set("out", im.out), c.set("holdout_rate", im.holdout_rate);
            c.set("holdout_seed", im.holdout_seed), c.set("draws", im.draws), c.set("seed", im.seed);
            c.set("threads", im.threads);
            c.finish();
        }
        CLI::App* imp = app.add_subcommand("impute", "impute missing entries, optionally scoring a holdout");
        imp->add_option("--config", config_path, "JSON config file (already applied)");
        imp->add_option("--checkpoint", im.checkpoint, "generative checkpoint (model mode)");
        imp->add_option("--model", im.model, "heuristic mode: mean | forward | zero");
        imp->add_option("--stats-from", im.stats_from, "training CSV for the scaler in heuristic mode");
        imp->add_option("--data", im.data, "CSV to impute")->required(im.data.empty());
        imp->add_option("--out", im.out, "output directory")->required(im.out.empty());
        imp->add_flag("--force", im.force, "overwrite a non-empty output directory");
        imp->add_option("--holdout-rate", im.holdout_rate, "fraction of observed entries to hide and score");
        imp->add_option("--holdout-seed", im.holdout_seed, "seed for the holdout selection");
        imp->add_option("--draws", im.draws, "posterior draws per series");
        imp->add_option("--seed", im.seed, "sampling seed");
        imp->add_option("--threads", im.threads, "worker threads");

        GradcheckArgs gc;
        {
            detail::ConfigApplier c(cfg, "gradcheck");
            c.set("ablation", gc.ablation), c.set("seed", gc.seed), c.set("tol", gc.tol);
            c.set("fd_step", gc.fd_step), c.set("out", gc.out);
            c.finish();
        }
        CLI::App* gch = app.add_subcommand("gradcheck", "verify analytic gradients against finite differences");
        gch->add_option("--config", config_path, "JSON config file (already applied)");
        gch->add_option("--ablation", gc.ablation, "none | no-mnar | no-supervision | no-obsdropout");
        gch->add_option("--seed", gc.seed, "instance seed");
        gch->add_option("--tol", gc.tol, "relative error threshold");
        gch->add_option("--fd-step", gc.fd_step, "finite difference step");
        gch->add_option("--out", gc.out, "optional JSON report path");

        std::vector<const char*> argv;
        argv.push_back("tsmiwae");
        for (const std::string& s : args) argv.push_back(s.c_str());
        try {
            app.parse(static_cast<int>(argv.size()), argv.data());
        } catch (const CLI::ParseError& pe) {
            int code = app.exit(pe);
            return code == 0 ? 0 : 1;
        }

        auto effective = [&](const CLI::App* sub, json::object_t kv) {
            json j(std::move(kv));
            j["command"] = sub->get_name();
            return j;
        };

        if (gen->parsed()) {
            json eff = effective(gen, {{"seed", g.seed}, {"n", g.n}, {"steps", g.steps},
                                                     {"features", g.features}, {"classes", g.classes},
                                                     {"mech", g.mech}, {"rate", g.rate}, {"slope", g.slope},
                                                     {"threshold", g.threshold}, {"class_sep", g.class_sep},
                                                     {"freq_sep", g.freq_sep}, {"noise", g.noise}, {"sources", g.sources},
                                                     {"source_scale", g.source_scale},
                                                     {"regular_times", g.regular_times},
                                                     {"train_frac", g.train_frac}, {"val_frac", g.val_frac}});
            return cmd_generate(g, eff);
        }
        if (tr->parsed()) {
            json eff = effective(tr, {{"model", t.model}, {"seed", t.seed}, {"beta", t.beta},
                                                    {"k", t.k}, {"s_train", t.s_train}, {"epochs", t.epochs},
                                                    {"lr", t.lr}, {"batch", t.batch}, {"patience", t.patience},
                                                    {"weight_decay", t.weight_decay}, {"oversample", t.oversample},
                                                    {"hidden", t.hidden}, {"z_dim", t.z_dim},
                                                    {"conv_channels", t.conv_channels}, {"heads", t.heads},
                                                    {"enc_blocks", t.enc_blocks}, {"dec_blocks", t.dec_blocks},
                                                    {"cls_blocks", t.cls_blocks}, {"mis_hidden", t.mis_hidden},
                                                    {"kernel_len", t.kernel_len}, {"kernel_var", t.kernel_var},
                                                    {"online", t.online}, {"gru_hidden", t.gru_hidden},
                                                    {"simple_mean", t.simple_mean},
                                                    {"val_particles", t.val_particles},
                                                    {"val_samples", t.val_samples},
                                                    {"stop_on_val_loss", t.stop_on_val_loss}});
            return cmd_train(t, eff);
        }
        if (ev->parsed()) {
            json eff = effective(ev, {{"seed", e.seed}, {"k", e.k}, {"s_test", e.s_test},
                                                    {"test_beta", e.test_beta}, {"ece_bins", e.ece_bins}});
            return cmd_evaluate(e, eff);
        }
        if (imp->parsed()) {
            json eff = effective(imp, {{"mode", im.checkpoint.empty() ? im.model : "model"},
                                                     {"holdout_rate", im.holdout_rate},
                                                     {"holdout_seed", im.holdout_seed}, {"draws", im.draws},
                                                     {"seed", im.seed}});
            return cmd_impute(im, eff);
        }
        if (gch->parsed()) {
            json eff = effective(gch, {{"ablation", gc.ablation}, {"seed", gc.seed}, {"tol", gc.tol},
                                                     {"fd_step", gc.fd_step}});
            return cmd_gradcheck(gc, eff);
        }
        return 1;
    } catch (const UsageError& e) {
        std::fprintf(stderr, "usage error: %s\n", e.what());
        return 1;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    }
}

}  // namespace tsmiwae::cli
