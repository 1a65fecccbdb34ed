#pragma once

// State estimation: a colored-noise measurement oracle that stands in for a
// learned pose estimator at its characteristic error level, and the Kalman
// filter that fuses pose measurements with IMU data. The filter carries a
// joint (position, velocity) belief driven by the accelerometer as a control
// input, plus a decoupled scalar yaw channel integrated from the gyro.

#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <utility>

#include <Eigen/Cholesky>
#include <Eigen/Core>

#include "falcon/dynamics.hpp"
#include "falcon/geometry.hpp"

namespace falcon {

/// Pose estimate produced by the estimator or the filter. Roll and pitch are
/// reported as zero: the platform flies near-hover and the controller
/// consumes yaw separately. `valid` is false when the estimator cannot
/// produce a usable pose (too few keypoints in view, or the estimate left
/// the plausible flight volume); consumers must then coast.
struct PoseEstimate {
    Pose6 pose;
    bool valid = false;
};

// ---------------------------------------------------------------------------
// Colored measurement noise
// ---------------------------------------------------------------------------

/// Error model for the surrogate pose estimator. Per-frame error on each of
/// the four channels (x, y, z, yaw) is the sum of an AR(1) process and a
/// white component; occasional outlier frames scale the white component up.
/// The correlated share is what makes the surrogate behave like a learned
/// estimator rather than a noisy sensor: a filter can average away white
/// noise but not a slowly varying bias.
struct NoiseOracleConfig {
    double position_std = 0.339;  // target marginal RMSE of the 3D error norm, m
    double yaw_std = 0.082;       // target marginal yaw RMSE, rad
    double outlier_prob = 0.05;   // per-frame probability of an outlier spike
    double outlier_scale = 3.0;   // white-noise multiplier on outlier frames
    double corr_fraction = 0.35;  // share of the error variance in the AR(1) part
    double corr_time = 1.5;       // AR(1) time constant, s
    int min_keypoints = 4;        // below this, no measurement is produced

    void validate() const {
        if (!(position_std >= 0.0) || !(yaw_std >= 0.0))
            throw std::invalid_argument("NoiseOracleConfig: stds must be non-negative");
        if (outlier_prob < 0.0 || outlier_prob >= 1.0 || outlier_scale < 1.0)
            throw std::invalid_argument("NoiseOracleConfig: bad outlier parameters");
        if (corr_fraction < 0.0 || corr_fraction > 1.0)
            throw std::invalid_argument("NoiseOracleConfig: corr_fraction outside [0, 1]");
        if (!(corr_time > 0.0))
            throw std::invalid_argument("NoiseOracleConfig: corr_time must be positive");
        if (min_keypoints < 0 || min_keypoints > 8)
            throw std::invalid_argument("NoiseOracleConfig: min_keypoints outside [0, 8]");
    }
};

/// Stateful per-episode noise process. Channels 0..2 are the position axes
/// (each carrying a 1/sqrt(3) share of the position RMSE), channel 3 is yaw.
class NoiseOracle {
public:
    NoiseOracle(const NoiseOracleConfig& cfg, double dt, std::uint64_t seed)
        : cfg_(cfg), rng_(seed) {
        cfg_.validate();
        if (!(dt > 0.0)) throw std::invalid_argument("NoiseOracle: dt must be positive");
        rho_ = std::exp(-dt / cfg_.corr_time);
        const double inflate =
            1.0 - cfg_.outlier_prob + cfg_.outlier_prob * cfg_.outlier_scale * cfg_.outlier_scale;
        for (int ch = 0; ch < 4; ++ch) {
            const double target = ch < 3 ? cfg_.position_std / std::sqrt(3.0) : cfg_.yaw_std;
            sigma_corr_[ch] = std::sqrt(cfg_.corr_fraction) * target;
            sigma_white_[ch] = std::sqrt((1.0 - cfg_.corr_fraction) / inflate) * target;
            // Start the AR(1) state in its stationary distribution.
            corr_[ch] = sigma_corr_[ch] * gauss_(rng_);
        }
    }

    /// Corrupts the true pose. Produces an invalid estimate when fewer than
    /// min_keypoints gate keypoints are in view; the noise process still
    /// advances so that dropout does not freeze the error trajectory.
    PoseEstimate measure(const Pose6& truth, int visible_keypoint_count) {
        advance();
        PoseEstimate m;
        if (visible_keypoint_count < cfg_.min_keypoints) return m;
        m.pose.x = truth.x + err_[0];
        m.pose.y = truth.y + err_[1];
        m.pose.z = truth.z + err_[2];
        m.pose.yaw = wrap_angle(truth.yaw + err_[3]);
        m.valid = true;
        return m;
    }

    const NoiseOracleConfig& config() const { return cfg_; }
    double rho() const { return rho_; }

private:
    void advance() {
        // One shared outlier draw per frame: spikes hit all channels at once,
        // as they would for an estimator confused by the whole view.
        const bool outlier = unif_(rng_) < cfg_.outlier_prob;
        const double spike = outlier ? cfg_.outlier_scale : 1.0;
        for (int ch = 0; ch < 4; ++ch) {
            corr_[ch] = rho_ * corr_[ch] +
                        std::sqrt(1.0 - rho_ * rho_) * sigma_corr_[ch] * gauss_(rng_);
            err_[ch] = corr_[ch] + spike * sigma_white_[ch] * gauss_(rng_);
        }
    }

    NoiseOracleConfig cfg_;
    std::mt19937_64 rng_;
    std::normal_distribution<double> gauss_{0.0, 1.0};
    std::uniform_real_distribution<double> unif_{0.0, 1.0};
    double rho_ = 0.0;
    double sigma_corr_[4] = {0.0, 0.0, 0.0, 0.0};
    double sigma_white_[4] = {0.0, 0.0, 0.0, 0.0};
    double corr_[4] = {0.0, 0.0, 0.0, 0.0};
    double err_[4] = {0.0, 0.0, 0.0, 0.0};
};

/// Calibrated per-track error levels for the surrogate estimator. Yaw stds
/// are stored in radians.
inline NoiseOracleConfig builtin_noise_config(const std::string& track_name) {
    NoiseOracleConfig cfg;
    if (track_name == "circle") {
        cfg.position_std = 0.339;
        cfg.yaw_std = 4.7 * kPi / 180.0;
    } else if (track_name == "uturn") {
        cfg.position_std = 0.555;
        cfg.yaw_std = 11.0 * kPi / 180.0;
    } else if (track_name == "figure8") {
        cfg.position_std = 0.424;
        cfg.yaw_std = 7.7 * kPi / 180.0;
    } else {
        throw std::invalid_argument("builtin_noise_config: unknown track " + track_name);
    }
    return cfg;
}

/// Single-shot oracle draw at one pose: white noise plus the heavy-tail
/// outlier mechanism, with no frame-to-frame correlation. Used where poses
/// are sampled independently rather than along a flight.
inline PoseEstimate npe_oracle(const Pose6& true_pose, const NoiseOracleConfig& cfg,
                               std::mt19937_64& rng) {
    cfg.validate();
    std::normal_distribution<double> gauss(0.0, 1.0);
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    const double inflate =
        1.0 - cfg.outlier_prob + cfg.outlier_prob * cfg.outlier_scale * cfg.outlier_scale;
    const double spike = unif(rng) < cfg.outlier_prob ? cfg.outlier_scale : 1.0;
    const double sig_pos = spike * cfg.position_std / std::sqrt(3.0 * inflate);
    const double sig_yaw = spike * cfg.yaw_std / std::sqrt(inflate);

    PoseEstimate m;
    m.pose.x = true_pose.x + sig_pos * gauss(rng);
    m.pose.y = true_pose.y + sig_pos * gauss(rng);
    m.pose.z = true_pose.z + sig_pos * gauss(rng);
    m.pose.yaw = wrap_angle(true_pose.yaw + sig_yaw * gauss(rng));
    m.valid = true;
    return m;
}

// ---------------------------------------------------------------------------
// Kalman filtering
// ---------------------------------------------------------------------------

struct KalmanConfig {
    double sigma_accel = 0.15;     // process noise on top of IMU-known accel, m/s^2
    double sigma_yaw_rate = 0.02;  // process noise on the gyro-integrated yaw, rad/s
    double meas_sigma_pos = 0.196; // per-axis position measurement sigma, m
    double meas_sigma_yaw = 0.082; // yaw measurement sigma, rad
    double gate_threshold = 5.0;   // Mahalanobis distance beyond which updates are dropped
    double init_pos_var = 0.04;
    double init_vel_var = 0.25;
    double init_yaw_var = 0.02;

    void validate() const {
        if (!(sigma_accel > 0.0) || !(sigma_yaw_rate > 0.0))
            throw std::invalid_argument("KalmanConfig: process noise must be positive");
        if (!(meas_sigma_pos >= 0.0) || !(meas_sigma_yaw >= 0.0))
            throw std::invalid_argument("KalmanConfig: measurement noise must be non-negative");
        if (!(gate_threshold > 0.0))
            throw std::invalid_argument("KalmanConfig: gate threshold must be positive");
        if (!(init_pos_var > 0.0) || !(init_vel_var > 0.0) || !(init_yaw_var > 0.0))
            throw std::invalid_argument("KalmanConfig: initial variances must be positive");
    }
};

/// Calibrates the measurement covariance against an estimator error model:
/// each position axis carries a 1/sqrt(3) share of the marginal 3D RMSE.
inline KalmanConfig kalman_config_for(const NoiseOracleConfig& noise, KalmanConfig base = {}) {
    base.meas_sigma_pos = noise.position_std / std::sqrt(3.0);
    base.meas_sigma_yaw = noise.yaw_std;
    return base;
}

/// Belief over (position, velocity) as a joint Gaussian plus a decoupled
/// scalar yaw channel. The 6-dim mean orders position before velocity.
struct KalmanBelief {
    Eigen::Matrix<double, 6, 1> mean = Eigen::Matrix<double, 6, 1>::Zero();
    Eigen::Matrix<double, 6, 6> cov = Eigen::Matrix<double, 6, 6>::Identity();
    double yaw_mean = 0.0;
    double yaw_var = 1.0;
    bool initialized = false;

    Eigen::Vector3d position() const { return mean.head<3>(); }
    Eigen::Vector3d velocity() const { return mean.tail<3>(); }

    PoseEstimate estimate() const {
        PoseEstimate e;
        e.pose = Pose6{mean(0), mean(1), mean(2), 0.0, 0.0, yaw_mean};
        e.valid = initialized;
        return e;
    }
};

inline KalmanBelief kalman_init(const Eigen::Vector3d& position, double yaw,
                                const KalmanConfig& cfg) {
    cfg.validate();
    KalmanBelief b;
    b.mean.head<3>() = position;
    b.yaw_mean = wrap_angle(yaw);
    b.cov.setZero();
    b.cov.topLeftCorner<3, 3>() = cfg.init_pos_var * Eigen::Matrix3d::Identity();
    b.cov.bottomRightCorner<3, 3>() = cfg.init_vel_var * Eigen::Matrix3d::Identity();
    b.yaw_var = cfg.init_yaw_var;
    b.initialized = true;
    return b;
}

/// Symmetrizes, and if the result is not positive definite adds diagonal
/// jitter until it is. Returns the number of jitter rounds applied so
/// callers can log numerical repairs.
inline int kalman_repair(Eigen::Matrix<double, 6, 6>& cov) {
    cov = (0.5 * (cov + cov.transpose())).eval();
    int rounds = 0;
    double jitter = 1e-12;
    while (Eigen::LLT<Eigen::Matrix<double, 6, 6>>(cov).info() != Eigen::Success) {
        cov += jitter * Eigen::Matrix<double, 6, 6>::Identity();
        jitter *= 10.0;
        if (++rounds > 12) throw std::runtime_error("kalman_repair: covariance unrecoverable");
    }
    return rounds;
}

/// Propagates the belief through one control period using the accelerometer
/// as the control input of the exact double-integrator transition, and the
/// gyro z channel as the yaw rate. Q follows the piecewise-white-acceleration
/// model for the residual (unmeasured) acceleration.
inline KalmanBelief kalman_predict(const KalmanBelief& b, const ImuSample& imu, double dt,
                                   const KalmanConfig& cfg) {
    if (!b.initialized) throw std::logic_error("kalman_predict: belief not initialized");
    if (!(dt > 0.0)) throw std::invalid_argument("kalman_predict: dt must be positive");
    if (!imu.lin_accel.allFinite() || !imu.ang_rate.allFinite())
        throw std::invalid_argument("kalman_predict: non-finite IMU sample");

    using Mat6 = Eigen::Matrix<double, 6, 6>;
    Mat6 f = Mat6::Identity();
    f.topRightCorner<3, 3>() = dt * Eigen::Matrix3d::Identity();

    KalmanBelief out = b;
    out.mean.head<3>() += b.mean.tail<3>() * dt + 0.5 * dt * dt * imu.lin_accel;
    out.mean.tail<3>() += dt * imu.lin_accel;

    const double s2 = cfg.sigma_accel * cfg.sigma_accel;
    Mat6 q = Mat6::Zero();
    q.topLeftCorner<3, 3>() = s2 * 0.25 * dt * dt * dt * dt * Eigen::Matrix3d::Identity();
    q.topRightCorner<3, 3>() = s2 * 0.5 * dt * dt * dt * Eigen::Matrix3d::Identity();
    q.bottomLeftCorner<3, 3>() = q.topRightCorner<3, 3>();
    q.bottomRightCorner<3, 3>() = s2 * dt * dt * Eigen::Matrix3d::Identity();
    out.cov = f * b.cov * f.transpose() + q;
    kalman_repair(out.cov);

    out.yaw_mean = wrap_angle(b.yaw_mean + imu.ang_rate.z() * dt);
    out.yaw_var = b.yaw_var + cfg.sigma_yaw_rate * cfg.sigma_yaw_rate * dt * dt;
    return out;
}

struct KalmanUpdateResult {
    KalmanBelief belief;
    bool position_accepted = false;
    bool yaw_accepted = false;
};

/// Measurement update. Position is updated jointly (H selects the position
/// block) behind a Mahalanobis gate that guards against the estimator's
/// heavy-tail outliers; yaw uses a scalar update with an angle-wrapped
/// innovation behind the same gate. An invalid measurement leaves the belief
/// unchanged, modeling camera dropout.
inline KalmanUpdateResult kalman_update(const KalmanBelief& b, const PoseEstimate& meas,
                                        const KalmanConfig& cfg) {
    if (!b.initialized) throw std::logic_error("kalman_update: belief not initialized");
    KalmanUpdateResult res;
    res.belief = b;
    if (!meas.valid) return res;
    if (!meas.pose.position().allFinite() || !std::isfinite(meas.pose.yaw))
        throw std::invalid_argument("kalman_update: non-finite measurement");

    const double r_pos = std::max(cfg.meas_sigma_pos * cfg.meas_sigma_pos, 1e-12);
    const double r_yaw = std::max(cfg.meas_sigma_yaw * cfg.meas_sigma_yaw, 1e-12);

    const Eigen::Vector3d innov = meas.pose.position() - b.mean.head<3>();
    const Eigen::Matrix3d s =
        b.cov.topLeftCorner<3, 3>() + r_pos * Eigen::Matrix3d::Identity();
    const Eigen::Matrix3d s_inv = s.inverse();
    if (std::sqrt(innov.dot(s_inv * innov)) <= cfg.gate_threshold) {
        // K = P H^T S^{-1} with H = [I 0]; Joseph-form covariance update.
        const Eigen::Matrix<double, 6, 3> k = b.cov.leftCols<3>() * s_inv;
        res.belief.mean += k * innov;
        Eigen::Matrix<double, 6, 6> a = Eigen::Matrix<double, 6, 6>::Identity();
        a.leftCols<3>() -= k;
        res.belief.cov = a * b.cov * a.transpose() + r_pos * k * k.transpose();
        kalman_repair(res.belief.cov);
        res.position_accepted = true;
    }

    const double yaw_innov = wrap_angle(meas.pose.yaw - b.yaw_mean);
    const double s_yaw = b.yaw_var + r_yaw;
    if (std::abs(yaw_innov) / std::sqrt(s_yaw) <= cfg.gate_threshold) {
        const double k = b.yaw_var / s_yaw;
        res.belief.yaw_mean = wrap_angle(b.yaw_mean + k * yaw_innov);
        res.belief.yaw_var = std::max((1.0 - k) * b.yaw_var, 1e-12);
        res.yaw_accepted = true;
    }
    return res;
}

// ---------------------------------------------------------------------------
// Perceiver interface
// ---------------------------------------------------------------------------

/// Turns raw sensing (rendered keypoints, IMU) into a state estimate, once
/// per control period. Implementations that model estimator error receive
/// the true state solely to corrupt it.
class Perceiver {
public:
    virtual ~Perceiver() = default;
    virtual void reset(const QuadState& initial_truth, std::uint64_t seed) = 0;
    virtual PoseEstimate perceive(const FrameObservation& frame, const ImuSample& imu,
                                  const QuadState& truth, double dt) = 0;
    /// Best available velocity estimate backing the last pose estimate.
    virtual Eigen::Vector3d velocity() const = 0;
};

/// Ground-truth passthrough, for expert rollouts and controller tuning.
class PerfectPerceiver final : public Perceiver {
public:
    void reset(const QuadState& initial_truth, std::uint64_t) override {
        velocity_ = initial_truth.velocity;
    }
    PoseEstimate perceive(const FrameObservation&, const ImuSample&, const QuadState& truth,
                          double) override {
        velocity_ = truth.velocity;
        return PoseEstimate{truth.pose(), true};
    }
    Eigen::Vector3d velocity() const override { return velocity_; }

private:
    Eigen::Vector3d velocity_{0.0, 0.0, 0.0};
};

/// Surrogate estimator + Kalman filter: corrupts the true pose with the
/// colored-noise oracle, then fuses with IMU. This is the perception stack
/// used for data generation and for the perception-feedback baselines.
class OraclePerceiver final : public Perceiver {
public:
    OraclePerceiver(const NoiseOracleConfig& noise_cfg, const KalmanConfig& filter_cfg,
                    double dt, const Box3& workspace)
        : noise_cfg_(noise_cfg), filter_cfg_(filter_cfg), dt_(dt),
          valid_bounds_(workspace.scaled(2.0)) {
        noise_cfg_.validate();
        filter_cfg_.validate();
        if (!(dt > 0.0)) throw std::invalid_argument("OraclePerceiver: dt must be positive");
    }

    void reset(const QuadState& initial_truth, std::uint64_t seed) override {
        oracle_.emplace(noise_cfg_, dt_, seed);
        belief_ = kalman_init(initial_truth.position, initial_truth.yaw, filter_cfg_);
        raw_ = PoseEstimate{};
        repair_rounds_ = 0;
    }

    PoseEstimate perceive(const FrameObservation& frame, const ImuSample& imu,
                          const QuadState& truth, double dt) override {
        if (!oracle_) throw std::logic_error("OraclePerceiver: reset() must be called first");
        belief_ = kalman_predict(belief_, imu, dt, filter_cfg_);
        raw_ = oracle_->measure(truth.pose(), visible_keypoints(frame));
        belief_ = kalman_update(belief_, raw_, filter_cfg_).belief;

        PoseEstimate est = belief_.estimate();
        est.valid = est.valid && valid_bounds_.contains(est.pose.position());
        return est;
    }

    Eigen::Vector3d velocity() const override { return belief_.velocity(); }

    /// Raw (unfiltered) measurement backing the last estimate.
    const PoseEstimate& last_measurement() const { return raw_; }
    const KalmanBelief& belief() const { return belief_; }

private:
    NoiseOracleConfig noise_cfg_;
    KalmanConfig filter_cfg_;
    double dt_;
    Box3 valid_bounds_;
    std::optional<NoiseOracle> oracle_;
    KalmanBelief belief_;
    PoseEstimate raw_;
    int repair_rounds_ = 0;
};

}  // namespace falcon
