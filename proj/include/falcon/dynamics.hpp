#pragma once

// Reduced quadrotor plant: a velocity- and acceleration-limited double
// integrator for position plus a kinematic yaw channel. Attitude dynamics are
// abstracted away; the low-level controller is assumed to realize commanded
// accelerations within one control period.

#include <cmath>
#include <random>
#include <stdexcept>

#include <Eigen/Core>
#include <Eigen/Geometry>

#include "falcon/geometry.hpp"

namespace falcon {

inline constexpr double kGravity = 9.80665;

struct QuadState {
    Eigen::Vector3d position{0.0, 0.0, 0.0};
    Eigen::Vector3d velocity{0.0, 0.0, 0.0};
    double yaw = 0.0;

    Pose6 pose() const { return Pose6{position.x(), position.y(), position.z(), 0.0, 0.0, yaw}; }

    bool finite() const {
        return position.allFinite() && velocity.allFinite() && std::isfinite(yaw);
    }
};

/// Commanded world-frame acceleration and yaw rate.
struct ControlInput {
    Eigen::Vector3d accel{0.0, 0.0, 0.0};
    double yaw_rate = 0.0;
};

struct DynamicsLimits {
    double v_max = 3.0;        // m/s, norm of velocity
    double a_max = 4.0;        // m/s^2, norm of commanded acceleration
    double yaw_rate_max = 3.0; // rad/s

    void validate() const {
        if (!(v_max > 0.0) || !(a_max > 0.0) || !(yaw_rate_max > 0.0))
            throw std::invalid_argument("DynamicsLimits: limits must be positive");
    }
};

/// Clamps a vector to the ball of radius `bound`, preserving direction.
inline Eigen::Vector3d clamp_norm(const Eigen::Vector3d& v, double bound) {
    const double n = v.norm();
    if (n <= bound || n == 0.0) return v;
    return v * (bound / n);
}

/// Advances the plant by one control period of length `dt`. The commanded
/// acceleration is saturated first, then held constant over the step, so the
/// position update is exact for the saturated input. Velocity is re-clamped
/// after integration to model the airframe's speed envelope.
inline QuadState step(const QuadState& s, const ControlInput& u, double dt,
                      const DynamicsLimits& lim = {}) {
    if (!(dt > 0.0)) throw std::invalid_argument("step: dt must be positive");
    if (!s.finite() || !u.accel.allFinite() || !std::isfinite(u.yaw_rate))
        throw std::invalid_argument("step: non-finite state or input");

    const Eigen::Vector3d a = clamp_norm(u.accel, lim.a_max);
    const double r = std::clamp(u.yaw_rate, -lim.yaw_rate_max, lim.yaw_rate_max);

    QuadState out;
    out.position = s.position + s.velocity * dt + 0.5 * a * dt * dt;
    out.velocity = clamp_norm(s.velocity + a * dt, lim.v_max);
    out.yaw = wrap_angle(s.yaw + r * dt);
    return out;
}

// ---------------------------------------------------------------------------
// IMU synthesis
// ---------------------------------------------------------------------------

/// World-frame linear acceleration (m/s^2) and angular rate (rad/s). Gravity
/// is compensated upstream and roll/pitch are identically zero in this plant,
/// so the sample is the applied control corrupted by sensor noise.
struct ImuSample {
    Eigen::Vector3d lin_accel{0.0, 0.0, 0.0};
    Eigen::Vector3d ang_rate{0.0, 0.0, 0.0};
};

struct ImuNoiseConfig {
    double sigma_accel = 0.05;  // m/s^2 per axis
    double sigma_gyro = 0.01;   // rad/s per axis
    double accel_bias = 0.0;    // m/s^2 added to every accel axis
};

/// Synthesizes the IMU reading for a step flown with applied control `u`
/// (post-saturation). With zero noise and bias the sample reproduces the
/// applied control exactly.
inline ImuSample synthesize_imu(const ControlInput& u, const ImuNoiseConfig& cfg,
                                std::mt19937_64& rng) {
    std::normal_distribution<double> gauss(0.0, 1.0);
    ImuSample imu;
    imu.lin_accel = u.accel + Eigen::Vector3d::Constant(cfg.accel_bias) +
                    cfg.sigma_accel * Eigen::Vector3d(gauss(rng), gauss(rng), gauss(rng));
    imu.ang_rate = Eigen::Vector3d(0.0, 0.0, u.yaw_rate) +
                   cfg.sigma_gyro * Eigen::Vector3d(gauss(rng), gauss(rng), gauss(rng));
    return imu;
}

}  // namespace falcon
