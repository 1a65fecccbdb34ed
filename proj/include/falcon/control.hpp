#pragma once

// Geometric gate-to-gate controller. The same law serves as the expert (fed
// with ground truth) and as the direct-perception baseline (fed with the
// filtered estimate); only the state source differs.
//
// The position law is a carrot follower on the active gate's axis: the target
// sits a fixed lookahead ahead of the quad's own projection onto the axis,
// capped at a waypoint shortly past the gate plane. When the quad is near or
// in front of the plane but not laterally aligned -- after a miss, at the
// figure-8 lobes, on the U-turn lap restart -- it first steers to a staging
// point behind the gate. Yaw independently tracks the bearing to the gate
// center, locking to the gate normal for the final approach.

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include <Eigen/Core>

#include "falcon/dynamics.hpp"
#include "falcon/geometry.hpp"
#include "falcon/perception.hpp"

namespace falcon {

struct ExpertConfig {
    double cruise_speed = 1.0;     // commanded speed, m/s
    double k_v = 3.5;              // velocity-tracking gain, 1/s
    double k_yaw = 2.5;            // yaw P gain, 1/s
    double yaw_rate_limit = 2.0;   // commanded yaw-rate clamp, rad/s
    double lookahead = 0.6;        // carrot distance ahead of the axis projection, m
    double waypoint_offset = 0.5;  // far-side waypoint distance past the gate plane, m
    double stage_distance = 1.0;   // staging point distance behind the gate, m
    double stage_band = 0.4;       // within this band of the plane, alignment is required, m
    double align_radius = 0.2;     // lateral error considered aligned, m
    double yaw_focus = 0.6;        // planar range at which yaw locks to the gate normal, m

    void validate() const {
        if (!(cruise_speed > 0.0) || !(k_v > 0.0) || !(k_yaw > 0.0) || !(yaw_rate_limit > 0.0))
            throw std::invalid_argument("ExpertConfig: gains and speed must be positive");
        if (!(lookahead > 0.0) || !(stage_distance > stage_band) || !(stage_band > 0.0))
            throw std::invalid_argument("ExpertConfig: inconsistent geometry parameters");
        if (!(align_radius > 0.0) || !(yaw_focus > 0.0))
            throw std::invalid_argument("ExpertConfig: radii must be positive");
    }
};

/// The point the expert currently steers toward, exposed for inspection.
struct ExpertTarget {
    Eigen::Vector3d point{0.0, 0.0, 0.0};
    bool staging = false;  // true while diverting behind the gate
};

inline ExpertTarget expert_target(const Eigen::Vector3d& position, const Gate& gate,
                                  const ExpertConfig& cfg) {
    const Eigen::Vector3d n = gate.normal();
    const Eigen::Vector3d c = gate.center.position();
    const Eigen::Vector3d rel = position - c;
    const double s = n.dot(rel);                    // signed distance to the plane
    const double e = (rel - s * n).norm();          // lateral distance to the axis

    ExpertTarget t;
    if (s < -cfg.stage_band || e <= cfg.align_radius) {
        t.point = c + n * std::min(s + cfg.lookahead, cfg.waypoint_offset);
    } else {
        t.point = c - cfg.stage_distance * n;
        t.staging = true;
    }
    return t;
}

/// Yaw-rate command tracking a desired heading: proportional on the wrapped
/// error, clamped to the configured slew limit.
inline double yaw_control(double yaw, double yaw_des, const ExpertConfig& cfg = {}) {
    return std::clamp(cfg.k_yaw * wrap_angle(yaw_des - yaw), -cfg.yaw_rate_limit,
                      cfg.yaw_rate_limit);
}

/// Desired heading: bearing to the gate center, switching to the gate normal
/// once the planar range is inside yaw_focus (where the bearing degenerates).
inline double expert_yaw_target(const Eigen::Vector3d& position, const Gate& gate,
                                const ExpertConfig& cfg = {}) {
    const Eigen::Vector3d c = gate.center.position();
    const double gx = c.x() - position.x();
    const double gy = c.y() - position.y();
    if (std::hypot(gx, gy) > cfg.yaw_focus) return std::atan2(gy, gx);
    const Eigen::Vector3d n = gate.normal();
    return std::atan2(n.y(), n.x());
}

/// Velocity-tracking control toward the expert target, with independent yaw.
/// `state` may be ground truth or an estimate; the law does not care.
inline ControlInput expert_control(const QuadState& state, const Track& track,
                                   std::size_t gate_index, const ExpertConfig& cfg = {},
                                   const DynamicsLimits& limits = {}) {
    if (track.gates.empty()) throw std::invalid_argument("expert_control: empty track");
    const Gate& gate = track.gates[gate_index % track.gates.size()];
    const ExpertTarget target = expert_target(state.position, gate, cfg);

    const Eigen::Vector3d to_target = target.point - state.position;
    const double dist = to_target.norm();

    ControlInput u;
    if (dist < 1e-6) {
        u.accel.setZero();  // at the waypoint the direction is undefined; command nothing
    } else {
        const Eigen::Vector3d v_des = cfg.cruise_speed * to_target / dist;
        u.accel = clamp_norm(cfg.k_v * (v_des - state.velocity), limits.a_max);
    }
    u.yaw_rate = yaw_control(state.yaw, expert_yaw_target(state.position, gate, cfg), cfg);
    return u;
}

/// Direct-perception baseline: the expert law applied to the filtered
/// estimate instead of the true state.
inline ControlInput dp_control(const PoseEstimate& estimate, const Eigen::Vector3d& velocity,
                               const Track& track, std::size_t gate_index,
                               const ExpertConfig& cfg = {}, const DynamicsLimits& limits = {}) {
    QuadState believed;
    believed.position = estimate.pose.position();
    believed.velocity = velocity;
    believed.yaw = estimate.pose.yaw;
    return expert_control(believed, track, gate_index, cfg, limits);
}

}  // namespace falcon
