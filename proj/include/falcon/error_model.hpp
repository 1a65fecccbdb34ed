#pragma once

// Quantile-based perception-error modeling. Noisy expert rollouts produce a
// dataset of (true pose, estimated pose) pairs; linear quantile regression
// over simple pose features yields conditional 10th/90th percentile bands per
// error dimension, which are then used to sample pose perturbations for
// training-data augmentation.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iostream>
#include <limits>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <json.hpp>

#include "falcon/episode.hpp"
#include "falcon/geometry.hpp"
#include "falcon/seeding.hpp"
#include "falcon/serialize.hpp"

namespace falcon {

/// One perception sample: the flown pose, the perceived pose, and their
/// componentwise difference (yaw wrapped).
struct ErrorRecord {
    Pose6 true_pose;
    Pose6 est_pose;
    Eigen::Vector4d error{0.0, 0.0, 0.0, 0.0};  // est - true in (x, y, z, yaw)
};

inline ErrorRecord make_error_record(const Pose6& true_pose, const Pose6& est_pose) {
    ErrorRecord r;
    r.true_pose = true_pose;
    r.est_pose = est_pose;
    r.error << est_pose.x - true_pose.x, est_pose.y - true_pose.y,
        est_pose.z - true_pose.z, wrap_angle(est_pose.yaw - true_pose.yaw);
    return r;
}

// ---------------------------------------------------------------------------
// Dataset collection
// ---------------------------------------------------------------------------

struct DqConfig {
    int n_runs = 100;
    double noise_sigma = 0.4;  // accel noise injected on the expert, m/s^2
    int burn_in_steps = 20;    // discard filter-settling steps per run
    EpisodeConfig episode;     // laps per run, dt, limits, IMU noise
    ExpertConfig expert;

    void validate() const {
        if (n_runs < 1) throw std::invalid_argument("DqConfig: n_runs must be >= 1");
        if (!(noise_sigma >= 0.0))
            throw std::invalid_argument("DqConfig: noise_sigma must be >= 0");
        if (burn_in_steps < 0)
            throw std::invalid_argument("DqConfig: burn_in_steps must be >= 0");
        episode.validate();
        expert.validate();
    }
};

/// Rolls out the expert with injected control noise and records the
/// perceiver's pose estimate against the truth at every step past burn-in.
/// Invalid estimates are skipped. Deterministic per seed.
inline std::vector<ErrorRecord> collect_dq(const Track& track,
                                           const SceneRenderer& renderer,
                                           Perceiver& perceiver, const DqConfig& cfg,
                                           std::uint64_t seed) {
    cfg.validate();
    std::vector<ErrorRecord> records;
    for (int run = 0; run < cfg.n_runs; ++run) {
        const std::uint64_t run_seed = derive_seed(seed, static_cast<std::uint64_t>(run));
        std::mt19937_64 noise_rng(derive_seed(run_seed, 3));
        std::normal_distribution<double> gauss(0.0, 1.0);

        const ControllerFn expert = make_expert_controller(cfg.expert, cfg.episode.limits);
        const ControllerFn noisy = [&](const StepContext& ctx) {
            ControlInput u = expert(ctx);
            u.accel += cfg.noise_sigma *
                       Eigen::Vector3d(gauss(noise_rng), gauss(noise_rng), gauss(noise_rng));
            return u;
        };
        const StepHook record = [&](const StepRecord& rec) {
            if (rec.step_index < static_cast<std::size_t>(cfg.burn_in_steps)) return;
            if (!rec.estimate.valid) return;
            records.push_back(make_error_record(rec.truth_before.pose(), rec.estimate.pose));
        };
        run_episode(track, renderer, perceiver, noisy, cfg.episode, run_seed, record);
    }
    return records;
}

// ---------------------------------------------------------------------------
// CSV persistence: 6 true + 6 est + 4 error columns per record
// ---------------------------------------------------------------------------

inline void write_dq_csv(const std::vector<ErrorRecord>& records, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("write_dq_csv: cannot open " + path);
    out << "true_x,true_y,true_z,true_roll,true_pitch,true_yaw,"
           "est_x,est_y,est_z,est_roll,est_pitch,est_yaw,"
           "err_x,err_y,err_z,err_yaw\n";
    out.precision(17);
    for (const auto& r : records) {
        const Pose6& t = r.true_pose;
        const Pose6& e = r.est_pose;
        out << t.x << ',' << t.y << ',' << t.z << ',' << t.roll << ',' << t.pitch << ','
            << t.yaw << ',' << e.x << ',' << e.y << ',' << e.z << ',' << e.roll << ','
            << e.pitch << ',' << e.yaw << ',' << r.error[0] << ',' << r.error[1] << ','
            << r.error[2] << ',' << r.error[3] << '\n';
    }
    if (!out) throw std::runtime_error("write_dq_csv: write failed for " + path);
}

inline std::vector<ErrorRecord> read_dq_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("read_dq_csv: cannot open " + path);
    std::string line;
    if (!std::getline(in, line)) throw std::runtime_error("read_dq_csv: empty file " + path);

    std::vector<ErrorRecord> records;
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        std::array<double, 16> v{};
        std::istringstream ss(line);
        std::string cell;
        std::size_t i = 0;
        while (std::getline(ss, cell, ',')) {
            if (i >= v.size()) break;
            try {
                v[i] = std::stod(cell);
            } catch (const std::exception&) {
                throw std::runtime_error("read_dq_csv: bad number at " + path + ":" +
                                         std::to_string(line_no));
            }
            ++i;
        }
        if (i != v.size())
            throw std::runtime_error("read_dq_csv: expected 16 columns at " + path + ":" +
                                     std::to_string(line_no));
        ErrorRecord r;
        r.true_pose = Pose6{v[0], v[1], v[2], v[3], v[4], v[5]};
        r.est_pose = Pose6{v[6], v[7], v[8], v[9], v[10], v[11]};
        r.error << v[12], v[13], v[14], v[15];
        records.push_back(r);
    }
    return records;
}

// ---------------------------------------------------------------------------
// Quantile regression
// ---------------------------------------------------------------------------

inline constexpr int kQuantileFeatureDim = 7;  // [1, x, y, z, sin yaw, cos yaw, gate dist]

/// Mean pinball loss of residuals r = y - prediction at level tau.
inline double pinball_loss(const Eigen::VectorXd& residual, double tau) {
    return residual.unaryExpr([tau](double r) { return r * (tau - (r < 0.0 ? 1.0 : 0.0)); })
        .mean();
}

/// Empirical tau-quantile by linear interpolation between order statistics.
inline double empirical_quantile(Eigen::VectorXd values, double tau) {
    if (values.size() == 0) throw std::invalid_argument("empirical_quantile: no data");
    std::sort(values.data(), values.data() + values.size());
    const double pos = tau * static_cast<double>(values.size() - 1);
    const auto lo = static_cast<Eigen::Index>(std::floor(pos));
    const auto hi = std::min(lo + 1, values.size() - 1);
    const double frac = pos - static_cast<double>(lo);
    return (1.0 - frac) * values[lo] + frac * values[hi];
}

struct QuantileFitConfig {
    int epochs = 4000;
    double learning_rate = 0.3;  // on standardized features and targets
    double min_feature_std = 1e-9;

    void validate() const {
        if (epochs < 1) throw std::invalid_argument("QuantileFitConfig: epochs must be >= 1");
        if (!(learning_rate > 0.0))
            throw std::invalid_argument("QuantileFitConfig: learning_rate must be > 0");
    }
};

namespace detail {

/// Subgradient descent on the mean pinball loss for a single target column.
/// Features and target are standardized internally; zero-variance columns
/// (other than the bias) are excluded and reported. Initialized at the
/// unconditional tau-quantile, with best-iterate tracking, so the returned
/// loss never exceeds the constant-predictor baseline.
inline Eigen::VectorXd fit_pinball(const Eigen::MatrixXd& x, const Eigen::VectorXd& y,
                                   double tau, const QuantileFitConfig& cfg,
                                   double* loss_out, double* baseline_out,
                                   std::vector<int>* dropped_out) {
    const Eigen::Index n = x.rows();
    const Eigen::Index d = x.cols();

    Eigen::RowVectorXd mu = x.colwise().mean();
    Eigen::RowVectorXd sd(d);
    std::vector<bool> active(static_cast<std::size_t>(d), true);
    mu[0] = 0.0;  // bias column stays as-is
    sd[0] = 1.0;
    for (Eigen::Index j = 1; j < d; ++j) {
        sd[j] = std::sqrt((x.col(j).array() - mu[j]).square().sum() /
                          static_cast<double>(n));
        if (sd[j] < cfg.min_feature_std) {
            active[static_cast<std::size_t>(j)] = false;
            sd[j] = 1.0;
            if (dropped_out) dropped_out->push_back(static_cast<int>(j));
        }
    }
    Eigen::MatrixXd xs = (x.rowwise() - mu).array().rowwise() / sd.array();
    for (Eigen::Index j = 0; j < d; ++j)
        if (!active[static_cast<std::size_t>(j)]) xs.col(j).setZero();

    const double y_scale = std::max(std::sqrt(y.squaredNorm() / static_cast<double>(n)), 1e-12);
    const Eigen::VectorXd ys = y / y_scale;

    Eigen::VectorXd w = Eigen::VectorXd::Zero(d);
    w[0] = empirical_quantile(ys, tau);  // the constant-predictor baseline
    const double baseline = pinball_loss(ys - Eigen::VectorXd::Constant(n, w[0]), tau);

    Eigen::VectorXd best_w = w;
    double best_loss = baseline;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        const Eigen::VectorXd r = ys - xs * w;
        const double loss = pinball_loss(r, tau);
        if (loss < best_loss) {
            best_loss = loss;
            best_w = w;
        }
        const Eigen::VectorXd g =
            r.unaryExpr([tau](double v) { return v < 0.0 ? 1.0 - tau : -tau; });
        const double lr = cfg.learning_rate / std::sqrt(1.0 + epoch);
        w -= (lr / static_cast<double>(n)) * (xs.transpose() * g);
    }

    if (loss_out) *loss_out = best_loss * y_scale;
    if (baseline_out) *baseline_out = baseline * y_scale;

    // Unfold the standardization into weights over the raw features.
    Eigen::VectorXd raw = Eigen::VectorXd::Zero(d);
    for (Eigen::Index j = 1; j < d; ++j)
        if (active[static_cast<std::size_t>(j)]) raw[j] = y_scale * best_w[j] / sd[j];
    raw[0] = y_scale * best_w[0];
    for (Eigen::Index j = 1; j < d; ++j) raw[0] -= raw[j] * mu[j];
    return raw;
}

}  // namespace detail

/// Feature map phi(p) = [1, x, y, z, sin yaw, cos yaw, distance to the
/// nearest gate center]. The gate-distance feature conditions the band on
/// where the pose sits relative to the track; nearest-gate distance is used
/// because the active gate index is not part of the pose.
inline Eigen::VectorXd quantile_features(const Pose6& p,
                                         const std::vector<Eigen::Vector3d>& gate_centers) {
    Eigen::VectorXd f(kQuantileFeatureDim);
    double dist = 0.0;
    if (!gate_centers.empty()) {
        dist = std::numeric_limits<double>::infinity();
        for (const auto& c : gate_centers) dist = std::min(dist, (p.position() - c).norm());
    }
    f << 1.0, p.x, p.y, p.z, std::sin(p.yaw), std::cos(p.yaw), dist;
    return f;
}

/// Linear conditional-quantile band per error dimension. Rows of the weight
/// matrices correspond to (x, y, z, yaw) errors, columns to phi(p).
struct QuantileModel {
    double tau_lo = 0.1;
    double tau_hi = 0.9;
    Eigen::Matrix<double, 4, kQuantileFeatureDim> w_lo =
        Eigen::Matrix<double, 4, kQuantileFeatureDim>::Zero();
    Eigen::Matrix<double, 4, kQuantileFeatureDim> w_hi =
        Eigen::Matrix<double, 4, kQuantileFeatureDim>::Zero();
    std::vector<Eigen::Vector3d> gate_centers;

    Eigen::Vector4d q_lo(const Pose6& p) const {
        return w_lo * quantile_features(p, gate_centers);
    }
    Eigen::Vector4d q_hi(const Pose6& p) const {
        return w_hi * quantile_features(p, gate_centers);
    }

    /// Band with crossed endpoints swapped per dimension, for sampling.
    void interval(const Pose6& p, Eigen::Vector4d& lo, Eigen::Vector4d& hi) const {
        const Eigen::Vector4d a = q_lo(p);
        const Eigen::Vector4d b = q_hi(p);
        lo = a.cwiseMin(b);
        hi = a.cwiseMax(b);
    }

    Json to_json() const {
        Json j;
        j["type"] = "quantile_model";
        j["tau_lo"] = tau_lo;
        j["tau_hi"] = tau_hi;
        auto pack = [](const Eigen::Matrix<double, 4, kQuantileFeatureDim>& m) {
            std::vector<double> v;
            v.reserve(4 * kQuantileFeatureDim);
            for (Eigen::Index r = 0; r < m.rows(); ++r)
                for (Eigen::Index c = 0; c < m.cols(); ++c) v.push_back(m(r, c));
            return v;
        };
        j["w_lo"] = pack(w_lo);
        j["w_hi"] = pack(w_hi);
        std::vector<std::vector<double>> centers;
        for (const auto& c : gate_centers) centers.push_back({c.x(), c.y(), c.z()});
        j["gate_centers"] = centers;
        return j;
    }

    static QuantileModel from_json(const Json& j) {
        if (j.value("type", "") != "quantile_model")
            throw std::runtime_error("QuantileModel: unexpected serialized type");
        QuantileModel m;
        m.tau_lo = j.at("tau_lo").get<double>();
        m.tau_hi = j.at("tau_hi").get<double>();
        auto unpack = [](const Json& arr,
                         Eigen::Matrix<double, 4, kQuantileFeatureDim>& out) {
            const auto v = arr.get<std::vector<double>>();
            if (v.size() != 4 * kQuantileFeatureDim)
                throw std::runtime_error("QuantileModel: weight block has wrong size");
            std::size_t i = 0;
            for (Eigen::Index r = 0; r < out.rows(); ++r)
                for (Eigen::Index c = 0; c < out.cols(); ++c) out(r, c) = v[i++];
        };
        unpack(j.at("w_lo"), m.w_lo);
        unpack(j.at("w_hi"), m.w_hi);
        for (const auto& c : j.at("gate_centers")) {
            const auto v = c.get<std::vector<double>>();
            if (v.size() != 3) throw std::runtime_error("QuantileModel: bad gate center");
            m.gate_centers.emplace_back(v[0], v[1], v[2]);
        }
        return m;
    }
};

/// Fits the four per-dimension linear models at a single quantile level.
inline Eigen::Matrix<double, 4, kQuantileFeatureDim> fit_quantiles(
    const std::vector<ErrorRecord>& records, double tau,
    const std::vector<Eigen::Vector3d>& gate_centers, const QuantileFitConfig& cfg = {},
    Eigen::Vector4d* loss_out = nullptr, Eigen::Vector4d* baseline_out = nullptr,
    std::vector<int>* dropped_out = nullptr) {
    cfg.validate();
    if (records.size() < 100)
        throw std::invalid_argument("fit_quantiles: need at least 100 records");
    if (!(tau > 0.0 && tau < 1.0))
        throw std::invalid_argument("fit_quantiles: tau must be in (0, 1)");

    const auto n = static_cast<Eigen::Index>(records.size());
    Eigen::MatrixXd x(n, kQuantileFeatureDim);
    Eigen::MatrixXd y(n, 4);
    for (Eigen::Index i = 0; i < n; ++i) {
        x.row(i) = quantile_features(records[static_cast<std::size_t>(i)].true_pose,
                                     gate_centers)
                       .transpose();
        y.row(i) = records[static_cast<std::size_t>(i)].error.transpose();
    }

    std::vector<int> dropped;
    Eigen::Matrix<double, 4, kQuantileFeatureDim> w;
    for (int dim = 0; dim < 4; ++dim) {
        double loss = 0.0;
        double baseline = 0.0;
        std::vector<int> dropped_dim;
        w.row(dim) = detail::fit_pinball(x, y.col(dim), tau, cfg, &loss, &baseline,
                                         &dropped_dim)
                         .transpose();
        if (loss_out) (*loss_out)[dim] = loss;
        if (baseline_out) (*baseline_out)[dim] = baseline;
        if (dim == 0) dropped = dropped_dim;  // identical across dims: same features
    }
    if (!dropped.empty()) {
        std::cerr << "fit_quantiles: dropped zero-variance feature column(s)";
        for (int j : dropped) std::cerr << ' ' << j;
        std::cerr << '\n';
    }
    if (dropped_out) *dropped_out = dropped;
    return w;
}

struct QuantileFitReport {
    Eigen::Vector4d loss_lo = Eigen::Vector4d::Zero();
    Eigen::Vector4d loss_hi = Eigen::Vector4d::Zero();
    Eigen::Vector4d baseline_lo = Eigen::Vector4d::Zero();
    Eigen::Vector4d baseline_hi = Eigen::Vector4d::Zero();
    std::vector<int> dropped_features;
    int n_records = 0;
    int crossing_violations = 0;  // training inputs with q_lo > q_hi in any dim
};

/// Fits both quantile levels against a track's gate layout and audits the
/// band on its own training inputs.
inline QuantileModel fit_quantile_model(const std::vector<ErrorRecord>& records,
                                        const Track& track, const QuantileFitConfig& cfg = {},
                                        QuantileFitReport* report = nullptr) {
    QuantileModel m;
    for (const auto& g : track.gates) m.gate_centers.push_back(g.center.position());

    QuantileFitReport rep;
    rep.n_records = static_cast<int>(records.size());
    m.w_lo = fit_quantiles(records, m.tau_lo, m.gate_centers, cfg, &rep.loss_lo,
                           &rep.baseline_lo, &rep.dropped_features);
    m.w_hi = fit_quantiles(records, m.tau_hi, m.gate_centers, cfg, &rep.loss_hi,
                           &rep.baseline_hi, nullptr);

    for (const auto& r : records) {
        const Eigen::Vector4d lo = m.q_lo(r.true_pose);
        const Eigen::Vector4d hi = m.q_hi(r.true_pose);
        if ((lo.array() > hi.array()).any()) ++rep.crossing_violations;
    }
    if (rep.crossing_violations > 0)
        std::cerr << "fit_quantile_model: " << rep.crossing_violations << " of "
                  << records.size() << " training inputs have a crossed band\n";
    if (report) *report = rep;
    return m;
}

/// Fraction of records whose error falls inside [q_lo, q_hi] per dimension,
/// evaluated on the raw band (a crossed band covers nothing).
inline Eigen::Vector4d coverage(const QuantileModel& model,
                                const std::vector<ErrorRecord>& held_out) {
    if (held_out.empty()) throw std::invalid_argument("coverage: no records");
    Eigen::Vector4d hits = Eigen::Vector4d::Zero();
    for (const auto& r : held_out) {
        const Eigen::Vector4d lo = model.q_lo(r.true_pose);
        const Eigen::Vector4d hi = model.q_hi(r.true_pose);
        hits += ((r.error.array() >= lo.array()) && (r.error.array() <= hi.array()))
                    .cast<double>()
                    .matrix();
    }
    return hits / static_cast<double>(held_out.size());
}

/// Draws n poses p + Unif(Q0.1(p), Q0.9(p)) per dimension, yaw wrapped.
/// Crossed endpoints are swapped; an empty band degenerates to a point.
inline std::vector<Pose6> sample_perturbed(const Pose6& p, const QuantileModel& model,
                                           int n, std::mt19937_64& rng) {
    if (n < 1) throw std::invalid_argument("sample_perturbed: n must be >= 1");
    Eigen::Vector4d lo;
    Eigen::Vector4d hi;
    model.interval(p, lo, hi);

    std::vector<Pose6> out;
    out.reserve(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        Eigen::Vector4d d;
        for (int k = 0; k < 4; ++k) {
            d[k] = lo[k] == hi[k]
                       ? lo[k]
                       : std::uniform_real_distribution<double>(lo[k], hi[k])(rng);
        }
        Pose6 q = p;
        q.x += d[0];
        q.y += d[1];
        q.z += d[2];
        q.yaw = wrap_angle(q.yaw + d[3]);
        out.push_back(q);
    }
    return out;
}

}  // namespace falcon
