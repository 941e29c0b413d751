#pragma once

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "tsmiwae/common.hpp"
#include "tsmiwae/random.hpp"

namespace tsmiwae {

// One multivariate series on a shared time grid. Cells with mask 0 carry the
// sentinel value 0 and must never be read as data; use value_at() anywhere
// outside imputation-evaluation code.
struct MaskedTimeSeries {
    std::string id;
    std::vector<double> times;  // normalized to [0, 1], strictly increasing
    Mat values;                 // T x d
    Mat mask;                   // T x d, 1 = observed
    std::optional<int> label;

    int steps() const { return values.rows; }
    int features() const { return values.cols; }

    double value_at(int t, int j) const {
        if (mask.at(t, j) == 0.0)
            throw ContractError("MaskedTimeSeries: reading an unobserved cell");
        return values.at(t, j);
    }

    bool operator==(const MaskedTimeSeries&) const = default;
};

struct Dataset {
    std::vector<MaskedTimeSeries> series;
    std::vector<std::string> feature_names;
    std::vector<double> feat_mean;  // per-feature, from the training split
    std::vector<double> feat_std;
    std::string split;  // "train" / "val" / "test" / ""
    bool standardized = false;

    int feature_dim() const { return static_cast<int>(feature_names.size()); }

    int num_classes() const {
        int c = 0;
        for (const auto& s : series)
            if (s.label) c = std::max(c, *s.label + 1);
        return c;
    }

    size_t observed_count() const {
        size_t n = 0;
        for (const auto& s : series)
            for (double m : s.mask.data) n += (m != 0.0);
        return n;
    }

    bool operator==(const Dataset&) const = default;
};

// ---------------------------------------------------------------------------
// Standardization
// ---------------------------------------------------------------------------

// Per-feature affine transform fit on observed entries of the training split
// (population statistics). Keeps the parameters for exact inversion.
struct StandardScaler {
    std::vector<double> mean;
    std::vector<double> stdev;

    void fit(const Dataset& ds) {
        int d = ds.feature_dim();
        mean.assign(d, 0.0);
        stdev.assign(d, 0.0);
        std::vector<long long> count(d, 0);
        for (const auto& s : ds.series)
            for (int t = 0; t < s.steps(); ++t)
                for (int j = 0; j < d; ++j)
                    if (s.mask.at(t, j) != 0.0) {
                        mean[j] += s.values.at(t, j);
                        count[j] += 1;
                    }
        for (int j = 0; j < d; ++j) {
            if (count[j] == 0) throw DataError("standardize: feature '" + ds.feature_names[j] + "' has no observed entries");
            mean[j] /= static_cast<double>(count[j]);
        }
        for (const auto& s : ds.series)
            for (int t = 0; t < s.steps(); ++t)
                for (int j = 0; j < d; ++j)
                    if (s.mask.at(t, j) != 0.0) {
                        double r = s.values.at(t, j) - mean[j];
                        stdev[j] += r * r;
                    }
        for (int j = 0; j < d; ++j) {
            stdev[j] = std::sqrt(stdev[j] / static_cast<double>(count[j]));
            if (!(stdev[j] > 0.0))
                throw DataError("standardize: feature '" + ds.feature_names[j] + "' has zero variance");
        }
    }

    Dataset transform(const Dataset& ds) const {
        Dataset out = ds;
        for (auto& s : out.series)
            for (int t = 0; t < s.steps(); ++t)
                for (int j = 0; j < s.features(); ++j) {
                    if (s.mask.at(t, j) != 0.0)
                        s.values.at(t, j) = (s.values.at(t, j) - mean[j]) / stdev[j];
                    else
                        s.values.at(t, j) = 0.0;  // sentinel
                }
        out.feat_mean = mean;
        out.feat_std = stdev;
        out.standardized = true;
        return out;
    }

    Dataset inverse(const Dataset& ds) const {
        Dataset out = ds;
        for (auto& s : out.series)
            for (int t = 0; t < s.steps(); ++t)
                for (int j = 0; j < s.features(); ++j) {
                    if (s.mask.at(t, j) != 0.0)
                        s.values.at(t, j) = s.values.at(t, j) * stdev[j] + mean[j];
                    else
                        s.values.at(t, j) = 0.0;
                }
        out.standardized = false;
        return out;
    }
};

inline Dataset standardize(const Dataset& ds) {
    StandardScaler sc;
    sc.fit(ds);
    return sc.transform(ds);
}

// ---------------------------------------------------------------------------
// Synthetic generation
// ---------------------------------------------------------------------------

enum class Mechanism { MCAR, MAR, MNAR };

inline std::string mechanism_name(Mechanism m) {
    switch (m) {
        case Mechanism::MCAR: return "mcar";
        case Mechanism::MAR: return "mar";
        case Mechanism::MNAR: return "mnar";
    }
    return "?";
}

inline Mechanism mechanism_from_name(const std::string& s) {
    if (s == "mcar") return Mechanism::MCAR;
    if (s == "mar") return Mechanism::MAR;
    if (s == "mnar") return Mechanism::MNAR;
    throw DataError("unknown missingness mechanism: " + s);
}

struct MissingMechanismConfig {
    Mechanism mechanism = Mechanism::MCAR;
    double base_rate = 0.3;  // target missing fraction, in (0, 1)
    double slope = 4.0;      // logistic steepness for MAR/MNAR
    double threshold = 0.0;  // offset added to the calibrated logistic center
};

struct SyntheticConfig {
    int n = 200;
    int steps = 32;
    int features = 4;
    int classes = 2;
    MissingMechanismConfig mech;
    uint64_t seed = 0;
    double class_sep = 1.0;      // scale of class-dependent level offsets
    double freq_sep = 1.0;       // scale of class-dependent frequency gaps
    double trend_sep = 0.0;      // scale of class-dependent late-window trends
    double trend_onset = 0.6;    // normalized time where the trend ramps up
    double phase_jitter = 0.0;   // per-series phase noise (fraction of pi)
    double noise_scale = 0.15;   // OU noise amplitude
    int shared_sources = 2;      // smooth latent sources mixed into all features
    double source_scale = 0.5;
    bool irregular_times = true;
};

struct SyntheticDataset {
    Dataset data;            // masked view, sentinel 0 at missing cells
    std::vector<Mat> truth;  // complete ground-truth values per series
    double empirical_missing_rate = 0.0;
};

namespace detail {

// Center c such that mean(sigmoid(slope * (v - c))) == rate over the given
// driver values; bisection, deterministic.
inline double calibrate_logistic_center(const std::vector<double>& drivers, double slope, double rate) {
    auto mean_prob = [&](double c) {
        double s = 0.0;
        for (double v : drivers) s += 1.0 / (1.0 + std::exp(-slope * (v - c)));
        return s / static_cast<double>(drivers.size());
    };
    double lo = -1e3, hi = 1e3;
    for (int it = 0; it < 200; ++it) {
        double mid = 0.5 * (lo + hi);
        // mean_prob is decreasing in c for slope > 0
        if (mean_prob(mid) > rate)
            lo = mid;
        else
            hi = mid;
    }
    return 0.5 * (lo + hi);
}

}  // namespace detail

// Class-conditioned sinusoids plus smooth correlated noise, corrupted by the
// requested missingness mechanism. Classes differ in per-feature frequency,
// phase and level offset, so part of the class signal sits exactly where
// self-masking removes data. The full values are kept as ground truth.
inline SyntheticDataset generate_synthetic(const SyntheticConfig& cfg) {
    if (cfg.n < 1 || cfg.steps < 1 || cfg.features < 1 || cfg.classes < 1)
        throw ContractError("generate_synthetic: counts must be >= 1");
    if (!(cfg.mech.base_rate >= 0.0 && cfg.mech.base_rate < 1.0))
        throw ContractError("generate_synthetic: base rate must be in [0, 1)");

    const int n = cfg.n, T = cfg.steps, d = cfg.features, C = cfg.classes;
    SyntheticDataset out;
    out.data.feature_names.resize(d);
    for (int j = 0; j < d; ++j) out.data.feature_names[j] = "f" + std::to_string(j);

    // class- and feature-level signal definition
    RngStream cls_rng = derive_stream(cfg.seed, "data/classdef");
    std::vector<double> freq(static_cast<size_t>(C) * d), phase(static_cast<size_t>(C) * d),
        offset(static_cast<size_t>(C) * d), trend(static_cast<size_t>(C) * d);
    for (int c = 0; c < C; ++c)
        for (int j = 0; j < d; ++j) {
            freq[static_cast<size_t>(c) * d + j] =
                cls_rng.uniform(1.0, 2.5) + c * cfg.freq_sep * cls_rng.uniform(0.5, 1.25);
            phase[static_cast<size_t>(c) * d + j] = cls_rng.uniform(0.0, 6.283185307179586);
            offset[static_cast<size_t>(c) * d + j] = cfg.class_sep * cls_rng.uniform(-1.0, 1.0);
            // positively skewed trends sit mostly where value-dependent
            // masking erases data, so recovering them rewards imputation
            trend[static_cast<size_t>(c) * d + j] = cfg.trend_sep * cls_rng.uniform(-0.5, 1.0);
        }
    std::vector<double> src_freq(cfg.shared_sources), src_mix(static_cast<size_t>(cfg.shared_sources) * d);
    for (int r = 0; r < cfg.shared_sources; ++r) {
        src_freq[r] = cls_rng.uniform(0.5, 1.5);
        for (int j = 0; j < d; ++j) src_mix[static_cast<size_t>(r) * d + j] = cls_rng.uniform(-1.0, 1.0);
    }

    out.truth.reserve(n);
    out.data.series.reserve(n);
    for (int i = 0; i < n; ++i) {
        MaskedTimeSeries s;
        s.id = "s" + std::to_string(i);

        RngStream lab_rng = derive_stream(cfg.seed, "data/label", i);
        int y = static_cast<int>(lab_rng.uniform_index(C));
        s.label = y;

        s.times.resize(T);
        if (cfg.irregular_times && T > 2) {
            // jittered grid with a floor of half the mean spacing; denser
            // grids make the smooth-kernel gram needlessly ill-conditioned
            RngStream t_rng = derive_stream(cfg.seed, "data/times", i);
            double min_gap = 0.5 / T;
            s.times.front() = 0.0;
            s.times.back() = 1.0;
            for (int t = 1; t < T - 1; ++t) s.times[t] = t_rng.uniform();
            std::sort(s.times.begin(), s.times.end());
            for (int t = 1; t < T; ++t)
                if (s.times[t] - s.times[t - 1] < min_gap) s.times[t] = s.times[t - 1] + min_gap;
            double mx = s.times.back();
            for (double& t : s.times) t /= mx;
        } else {
            for (int t = 0; t < T; ++t) s.times[t] = T == 1 ? 0.0 : static_cast<double>(t) / (T - 1);
        }

        RngStream v_rng = derive_stream(cfg.seed, "data/values", i);
        std::vector<double> src_phase(cfg.shared_sources), src_amp(cfg.shared_sources);
        for (int r = 0; r < cfg.shared_sources; ++r) {
            src_phase[r] = v_rng.uniform(0.0, 6.283185307179586);
            src_amp[r] = v_rng.uniform(0.5, 1.0);
        }
        std::vector<double> phase_shift(d, 0.0);
        for (int j = 0; j < d; ++j)
            if (cfg.phase_jitter > 0.0)
                phase_shift[j] = cfg.phase_jitter * v_rng.uniform(-3.141592653589793, 3.141592653589793);
        Mat truth(T, d);
        std::vector<double> ou(d, 0.0);
        const double tau = 0.3;
        for (int t = 0; t < T; ++t) {
            double dt = t == 0 ? 0.0 : s.times[t] - s.times[t - 1];
            for (int j = 0; j < d; ++j) {
                if (t == 0) {
                    ou[j] = cfg.noise_scale * v_rng.normal();
                } else {
                    double decay = std::exp(-dt / tau);
                    ou[j] = ou[j] * decay + cfg.noise_scale * std::sqrt(1.0 - decay * decay) * v_rng.normal();
                }
                size_t cj = static_cast<size_t>(y) * d + j;
                double ramp = cfg.trend_onset < 1.0
                                  ? std::max(0.0, (s.times[t] - cfg.trend_onset) / (1.0 - cfg.trend_onset))
                                  : 0.0;
                double val = offset[cj] + trend[cj] * ramp +
                             std::sin(6.283185307179586 * freq[cj] * s.times[t] + phase[cj] + phase_shift[j]);
                for (int r = 0; r < cfg.shared_sources; ++r)
                    val += cfg.source_scale * src_amp[r] * src_mix[static_cast<size_t>(r) * d + j] *
                           std::sin(6.283185307179586 * src_freq[r] * s.times[t] + src_phase[r]);
                truth.at(t, j) = val + ou[j];
            }
        }
        s.values = truth;  // replaced by masked view below
        s.mask = Mat(T, d, 1.0);
        out.truth.push_back(std::move(truth));
        out.data.series.push_back(std::move(s));
    }

    // Mask generation. MAR/MNAR probabilities are logistic in a driver value
    // with the center calibrated so the empirical rate matches base_rate.
    size_t dropped = 0, total = static_cast<size_t>(n) * T * d;
    if (cfg.mech.base_rate > 0.0) {
        double center = 0.0;
        if (cfg.mech.mechanism != Mechanism::MCAR) {
            std::vector<double> drivers;
            drivers.reserve(total);
            for (int i = 0; i < n; ++i)
                for (int t = 0; t < T; ++t)
                    for (int j = 0; j < d; ++j) {
                        int src = cfg.mech.mechanism == Mechanism::MAR ? (j + 1) % d : j;
                        drivers.push_back(out.truth[i].at(t, src));
                    }
            center = detail::calibrate_logistic_center(drivers, cfg.mech.slope, cfg.mech.base_rate) +
                     cfg.mech.threshold;
        }
        for (int i = 0; i < n; ++i) {
            RngStream m_rng = derive_stream(cfg.seed, "data/mask", i);
            MaskedTimeSeries& s = out.data.series[i];
            for (int t = 0; t < T; ++t)
                for (int j = 0; j < d; ++j) {
                    double p;
                    switch (cfg.mech.mechanism) {
                        case Mechanism::MCAR: p = cfg.mech.base_rate; break;
                        case Mechanism::MAR: {
                            double v = out.truth[i].at(t, (j + 1) % d);
                            p = 1.0 / (1.0 + std::exp(-cfg.mech.slope * (v - center)));
                            break;
                        }
                        case Mechanism::MNAR:
                        default: {
                            double v = out.truth[i].at(t, j);
                            p = 1.0 / (1.0 + std::exp(-cfg.mech.slope * (v - center)));
                            break;
                        }
                    }
                    if (m_rng.bernoulli(p)) {
                        s.mask.at(t, j) = 0.0;
                        s.values.at(t, j) = 0.0;
                        ++dropped;
                    }
                }
        }
    }
    out.empirical_missing_rate = static_cast<double>(dropped) / static_cast<double>(total);

    // every feature must stay observable somewhere
    std::vector<bool> seen(d, false);
    for (const auto& s : out.data.series)
        for (int t = 0; t < s.steps(); ++t)
            for (int j = 0; j < d; ++j)
                if (s.mask.at(t, j) != 0.0) seen[j] = true;
    for (int j = 0; j < d; ++j)
        if (!seen[j]) {
            // re-observe the first cell of this feature in every series
            for (int i = 0; i < n; ++i) {
                out.data.series[i].mask.at(0, j) = 1.0;
                out.data.series[i].values.at(0, j) = out.truth[i].at(0, j);
            }
        }
    return out;
}

// ---------------------------------------------------------------------------
// Holdout for imputation scoring
// ---------------------------------------------------------------------------

// Observed entries hidden for evaluation, with their ground truth. Hidden
// cells are always a subset of the originally observed cells.
struct HoldoutMask {
    std::vector<Mat> hidden;  // 1 = held out
    std::vector<Mat> truth;   // value at held-out cells, 0 elsewhere

    size_t count() const {
        size_t n = 0;
        for (const Mat& h : hidden)
            for (double v : h.data) n += (v != 0.0);
        return n;
    }
};

// Hides an exact-count uniform sample of observed entries. The input dataset
// is left untouched; the returned copy has those cells masked out.
inline std::pair<Dataset, HoldoutMask> make_holdout(const Dataset& ds, double rate, uint64_t seed) {
    if (!(rate >= 0.0 && rate < 1.0)) throw ContractError("make_holdout: rate must be in [0, 1)");
    Dataset masked = ds;
    HoldoutMask hm;
    hm.hidden.reserve(ds.series.size());
    hm.truth.reserve(ds.series.size());
    std::vector<std::array<int, 3>> cells;  // (series, t, j)
    for (size_t i = 0; i < ds.series.size(); ++i) {
        const auto& s = ds.series[i];
        hm.hidden.emplace_back(s.steps(), s.features());
        hm.truth.emplace_back(s.steps(), s.features());
        for (int t = 0; t < s.steps(); ++t)
            for (int j = 0; j < s.features(); ++j)
                if (s.mask.at(t, j) != 0.0) cells.push_back({static_cast<int>(i), t, j});
    }
    size_t k = static_cast<size_t>(std::llround(rate * static_cast<double>(cells.size())));
    RngStream rng = derive_stream(seed, "holdout");
    for (size_t i = 0; i < k; ++i) {
        size_t j = i + rng.uniform_index(cells.size() - i);
        std::swap(cells[i], cells[j]);
    }
    for (size_t i = 0; i < k; ++i) {
        auto [si, t, j] = cells[i];
        hm.hidden[si].at(t, j) = 1.0;
        hm.truth[si].at(t, j) = ds.series[si].values.at(t, j);
        masked.series[si].mask.at(t, j) = 0.0;
        masked.series[si].values.at(t, j) = 0.0;
    }
    return {std::move(masked), std::move(hm)};
}

// ---------------------------------------------------------------------------
// CSV long format: series_id,time,feature,value,label
// Empty value field means missing. Times are written denormalized only if a
// scale was recorded; generated data lives on [0,1] already. Doubles are
// printed with shortest round-trip representation so save/load is bit-exact.
// ---------------------------------------------------------------------------

inline std::string format_double(double v) {
    char buf[40];
    auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

inline double parse_double(const std::string& s, int line_no) {
    double v;
    auto res = std::from_chars(s.data(), s.data() + s.size(), v);
    if (res.ec != std::errc{} || res.ptr != s.data() + s.size())
        throw DataError("CSV line " + std::to_string(line_no) + ": cannot parse number '" + s + "'");
    return v;
}

inline void save_csv(const Dataset& ds, const std::string& path) {
    std::ofstream f(path);
    if (!f) throw DataError("cannot open for writing: " + path);
    f << "series_id,time,feature,value,label\n";
    for (const auto& s : ds.series) {
        std::string label = s.label ? std::to_string(*s.label) : "";
        for (int t = 0; t < s.steps(); ++t)
            for (int j = 0; j < s.features(); ++j) {
                f << s.id << ',' << format_double(s.times[t]) << ',' << ds.feature_names[j] << ',';
                if (s.mask.at(t, j) != 0.0) f << format_double(s.values.at(t, j));
                f << ',' << label << '\n';
            }
    }
    if (!f) throw DataError("write failed: " + path);
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : line) {
        if (c == ',') {
            out.push_back(cur);
            cur.clear();
        } else {
            cur.push_back(c);
        }
    }
    out.push_back(cur);
    return out;
}

inline Dataset load_csv(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw DataError("cannot open: " + path);
    std::string line;
    if (!std::getline(f, line)) throw DataError("empty file: " + path);
    if (split_csv_line(line) != std::vector<std::string>{"series_id", "time", "feature", "value", "label"})
        throw DataError(path + ": expected header series_id,time,feature,value,label");

    struct Cell {
        double value;
        bool observed;
    };
    struct RawSeries {
        std::map<double, std::map<int, Cell>> grid;  // time -> feature idx -> cell
        std::optional<int> label;
    };
    std::vector<std::string> feature_names;
    std::map<std::string, int> feature_idx;
    std::vector<std::string> series_order;
    std::map<std::string, RawSeries> raw;

    int line_no = 1;
    while (std::getline(f, line)) {
        ++line_no;
        if (line.empty()) continue;
        auto fields = split_csv_line(line);
        if (fields.size() != 5)
            throw DataError("CSV line " + std::to_string(line_no) + ": expected 5 fields, got " +
                            std::to_string(fields.size()));
        const std::string& sid = fields[0];
        double time = parse_double(fields[1], line_no);
        if (time < 0.0) throw DataError("CSV line " + std::to_string(line_no) + ": negative time");
        const std::string& feat = fields[2];
        auto [fit, inserted] = feature_idx.emplace(feat, static_cast<int>(feature_names.size()));
        if (inserted) feature_names.push_back(feat);
        int j = fit->second;
        if (raw.find(sid) == raw.end()) series_order.push_back(sid);
        RawSeries& rs = raw[sid];
        auto& trow = rs.grid[time];
        if (trow.count(j))
            throw DataError("CSV line " + std::to_string(line_no) + ": duplicate (series,time,feature) cell");
        Cell c{0.0, false};
        if (!fields[3].empty()) {
            c.value = parse_double(fields[3], line_no);
            c.observed = true;
        }
        trow.emplace(j, c);
        if (!fields[4].empty()) {
            int lab = static_cast<int>(parse_double(fields[4], line_no));
            if (rs.label && *rs.label != lab)
                throw DataError("CSV line " + std::to_string(line_no) + ": conflicting labels within series " + sid);
            rs.label = lab;
        }
    }
    if (series_order.empty()) throw DataError(path + ": no data rows");

    // Normalize the time axis by the dataset-wide horizon so delta intervals
    // stay comparable across series. Files that are already on [0,1] pass
    // through unchanged, which keeps save/load round trips bit-exact.
    double max_time = 0.0;
    for (const auto& [sid, rs] : raw)
        for (const auto& [t, cells] : rs.grid) max_time = std::max(max_time, t);
    double scale = max_time > 1.0 ? max_time : 1.0;

    Dataset ds;
    ds.feature_names = feature_names;
    int d = static_cast<int>(feature_names.size());
    for (const std::string& sid : series_order) {
        const RawSeries& rs = raw[sid];
        MaskedTimeSeries s;
        s.id = sid;
        s.label = rs.label;
        int T = static_cast<int>(rs.grid.size());
        s.times.reserve(T);
        s.values = Mat(T, d);
        s.mask = Mat(T, d);
        int t = 0;
        for (const auto& [time, cells] : rs.grid) {
            s.times.push_back(time / scale);
            for (const auto& [j, c] : cells)
                if (c.observed) {
                    s.values.at(t, j) = c.value;
                    s.mask.at(t, j) = 1.0;
                }
            ++t;
        }
        for (int tt = 1; tt < T; ++tt)
            if (!(s.times[tt] > s.times[tt - 1]))
                throw DataError("series " + sid + ": times are not strictly increasing");
        ds.series.push_back(std::move(s));
    }
    return ds;
}

}  // namespace tsmiwae
