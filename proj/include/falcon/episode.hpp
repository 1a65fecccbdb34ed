#pragma once

// Closed-loop episode runner: sense -> perceive -> control -> step, with gate
// sequencing and the termination taxonomy. Only the active gate generates
// crossing events, and only forward crossings count; the backward plane
// crossings that legitimately occur on lap restarts and figure-8 lobes are
// ignored. A forward crossing advances the gate sequence whether it passes
// through the opening or hits the frame: a hit is a failed attempt, recorded
// and flown past, so one bad gate does not zero out the rest of the run.

#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "falcon/control.hpp"
#include "falcon/dynamics.hpp"
#include "falcon/geometry.hpp"
#include "falcon/perception.hpp"
#include "falcon/seeding.hpp"

namespace falcon {

enum class Outcome { completed, collision, timeout, off_track };

inline const char* outcome_name(Outcome o) {
    switch (o) {
        case Outcome::completed: return "completed";
        case Outcome::collision: return "collision";
        case Outcome::timeout: return "timeout";
        case Outcome::off_track: return "off_track";
    }
    return "unknown";
}

struct EpisodeConfig {
    int laps = 10;
    double dt = 0.05;                // 20 Hz control period
    double lap_timeout = 60.0;       // seconds allowed per lap
    double workspace_margin = 0.0;
    double start_offset = 0.8;       // start distance behind the first gate, m
    double start_perturbation = 0.2; // uniform per-axis start offset, m
    bool collision_fatal = false;    // end the episode on the first frame hit
    bool record_trajectory = true;
    DynamicsLimits limits;
    ImuNoiseConfig imu;

    void validate() const {
        if (laps < 1) throw std::invalid_argument("EpisodeConfig: laps must be >= 1");
        if (!(dt > 0.0) || !(lap_timeout > 0.0))
            throw std::invalid_argument("EpisodeConfig: dt and lap_timeout must be positive");
        if (!(start_offset > 0.0) || start_perturbation < 0.0)
            throw std::invalid_argument("EpisodeConfig: bad start geometry");
        limits.validate();
    }
};

/// Everything a controller may look at when choosing an action.
struct StepContext {
    std::size_t step_index = 0;
    double t = 0.0;
    const QuadState& truth;             // for the expert only
    const PoseEstimate& estimate;       // filtered perception output
    const Eigen::Vector3d& est_velocity;
    const FrameObservation& frame;      // rendered gate keypoints
    const ImuSample& imu;
    const Track& track;
    std::size_t gate_index;             // active gate
};

using ControllerFn = std::function<ControlInput(const StepContext&)>;

/// Per-step observer record, for logging and dataset collection.
struct StepRecord {
    std::size_t step_index = 0;
    double t = 0.0;                 // time at the beginning of the step
    QuadState truth_before;
    QuadState truth_after;
    PoseEstimate estimate;
    Eigen::Vector3d est_velocity{0.0, 0.0, 0.0};
    ImuSample imu;
    ControlInput commanded;         // controller output before saturation
    std::size_t gate_index = 0;     // active gate during the step
    const FrameObservation* frame = nullptr;
    std::optional<CrossingEvent> event;  // forward crossing of the active gate, if any
};

using StepHook = std::function<void(const StepRecord&)>;

/// One attempted crossing of the active gate.
struct GateAttempt {
    std::size_t gate_index = 0;
    double t = 0.0;
    double center_error = 0.0;
    bool passed = false;
};

/// Timestamped sample of the flown state, kept for logging and replay.
struct TrajectoryPoint {
    double t = 0.0;
    QuadState truth;
    PoseEstimate estimate;
    std::size_t gate_index = 0;
    std::optional<std::size_t> crossed;  // gate index crossed during this step
};

struct EpisodeResult {
    Outcome outcome = Outcome::timeout;
    int gates_attempted = 0;
    int gates_passed = 0;
    int laps_completed = 0;
    double duration = 0.0;
    std::vector<GateAttempt> attempts;
    std::vector<TrajectoryPoint> trajectory;
    std::string diagnostic;  // set on abnormal termination

    bool success() const { return outcome == Outcome::completed; }

    /// Fraction of attempted gates flown through cleanly.
    double success_rate() const {
        return gates_attempted == 0 ? 0.0
                                    : static_cast<double>(gates_passed) / gates_attempted;
    }

    /// Mean center error over successful gate passes.
    double mean_gate_error() const {
        double sum = 0.0;
        int n = 0;
        for (const auto& a : attempts)
            if (a.passed) { sum += a.center_error; ++n; }
        return n == 0 ? 0.0 : sum / n;
    }
};

/// Nominal start: at rest on the first gate's axis, behind the plane, facing
/// the gate.
inline QuadState initial_state(const Track& track, double start_offset = 0.8) {
    if (track.gates.empty()) throw std::invalid_argument("initial_state: empty track");
    const Gate& g0 = track.gates.front();
    QuadState s;
    s.position = g0.center.position() - start_offset * g0.normal();
    s.yaw = std::atan2(g0.normal().y(), g0.normal().x());
    return s;
}

/// Start pose for a seeded episode: the nominal start with a uniform
/// per-axis position perturbation, so repeated runs vary their approach.
inline QuadState perturbed_initial_state(const Track& track, const EpisodeConfig& cfg,
                                         std::uint64_t seed) {
    QuadState s = initial_state(track, cfg.start_offset);
    if (cfg.start_perturbation > 0.0) {
        std::mt19937_64 rng(derive_seed(seed, 0));
        std::uniform_real_distribution<double> u(-cfg.start_perturbation, cfg.start_perturbation);
        s.position += Eigen::Vector3d(u(rng), u(rng), u(rng));
    }
    return s;
}

inline EpisodeResult run_episode(const Track& track, const SceneRenderer& renderer,
                                 Perceiver& perceiver, const ControllerFn& controller,
                                 const EpisodeConfig& cfg, std::uint64_t seed,
                                 const StepHook& hook = {}) {
    cfg.validate();
    if (track.gates.empty()) throw std::invalid_argument("run_episode: empty track");

    const std::size_t n_gates = track.gates.size();
    QuadState state = perturbed_initial_state(track, cfg, seed);
    if (!track.workspace.contains(state.position, cfg.workspace_margin))
        throw std::invalid_argument("run_episode: start state outside the workspace");

    std::mt19937_64 imu_rng(derive_seed(seed, 1));
    perceiver.reset(state, derive_seed(seed, 2));

    EpisodeResult result;
    std::size_t gate_index = 0;
    double lap_start = 0.0;
    ControlInput applied;       // previous step's post-saturation control
    PoseEstimate last_estimate; // survives the loop for the terminal sample

    for (std::size_t k = 0;; ++k) {
        const double t = static_cast<double>(k) * cfg.dt;
        const FrameObservation frame = renderer.render(state.pose());
        const ImuSample imu = synthesize_imu(applied, cfg.imu, imu_rng);
        const PoseEstimate estimate = perceiver.perceive(frame, imu, state, cfg.dt);
        const Eigen::Vector3d est_velocity = perceiver.velocity();
        last_estimate = estimate;

        const StepContext ctx{k, t, state, estimate, est_velocity, frame, imu, track, gate_index};
        const ControlInput u = controller(ctx);
        if (!u.accel.allFinite() || !std::isfinite(u.yaw_rate)) {
            result.outcome = Outcome::off_track;
            result.diagnostic = "non-finite control at step " + std::to_string(k) + " (t=" +
                                std::to_string(t) + ", gate " + std::to_string(gate_index) + ")";
            result.duration = t;
            break;
        }

        const QuadState next = step(state, u, cfg.dt, cfg.limits);
        applied.accel = clamp_norm(u.accel, cfg.limits.a_max);
        applied.yaw_rate = std::clamp(u.yaw_rate, -cfg.limits.yaw_rate_max,
                                      cfg.limits.yaw_rate_max);

        StepRecord rec;
        rec.step_index = k;
        rec.t = t;
        rec.truth_before = state;
        rec.truth_after = next;
        rec.estimate = estimate;
        rec.est_velocity = est_velocity;
        rec.imu = imu;
        rec.commanded = u;
        rec.gate_index = gate_index;
        rec.frame = &frame;
        if (state.position != next.position) {
            const auto ev = detect_crossing(state.position, next.position,
                                            track.gates[gate_index]);
            if (ev && ev->direction_ok) rec.event = ev;
        }

        result.duration = t + cfg.dt;

        if (cfg.record_trajectory) {
            TrajectoryPoint p;
            p.t = t;
            p.truth = state;
            p.estimate = estimate;
            p.gate_index = gate_index;
            if (rec.event) p.crossed = gate_index;
            result.trajectory.push_back(p);
        }

        state = next;

        bool fatal_hit = false;
        if (rec.event) {
            GateAttempt a;
            a.gate_index = gate_index;
            a.t = t + cfg.dt;
            a.center_error = rec.event->center_error;
            a.passed = rec.event->center_error <= track.gates[gate_index].inner_radius;
            result.attempts.push_back(a);
            ++result.gates_attempted;
            if (a.passed) ++result.gates_passed;
            else if (cfg.collision_fatal) fatal_hit = true;

            gate_index = (gate_index + 1) % n_gates;
            if (result.gates_attempted % static_cast<int>(n_gates) == 0) {
                ++result.laps_completed;
                lap_start = t + cfg.dt;
            }
        }

        if (hook) hook(rec);

        if (fatal_hit) {
            result.outcome = Outcome::collision;
            result.diagnostic = "frame hit at gate " +
                                std::to_string(result.attempts.back().gate_index);
            break;
        }
        if (result.laps_completed >= cfg.laps) {
            result.outcome = Outcome::completed;
            break;
        }
        if (!track.workspace.contains(state.position, cfg.workspace_margin)) {
            result.outcome = Outcome::off_track;
            result.diagnostic = "left the workspace at step " + std::to_string(k + 1);
            break;
        }
        if (t + cfg.dt - lap_start > cfg.lap_timeout) {
            result.outcome = Outcome::timeout;
            break;
        }
    }

    // Terminal fence-post sample: the state the episode ended in, so logged
    // trajectories carry both endpoints of every step taken.
    if (cfg.record_trajectory) {
        TrajectoryPoint p;
        p.t = result.duration;
        p.truth = state;
        p.estimate = last_estimate;
        p.gate_index = gate_index;
        result.trajectory.push_back(p);
    }
    return result;
}

/// Expert controller bound to a config, as a ControllerFn.
inline ControllerFn make_expert_controller(const ExpertConfig& cfg = {},
                                           const DynamicsLimits& limits = {}) {
    cfg.validate();
    return [cfg, limits](const StepContext& ctx) {
        return expert_control(ctx.truth, ctx.track, ctx.gate_index, cfg, limits);
    };
}

/// Direct-perception baseline bound to a config, as a ControllerFn.
inline ControllerFn make_dp_controller(const ExpertConfig& cfg = {},
                                       const DynamicsLimits& limits = {}) {
    cfg.validate();
    return [cfg, limits](const StepContext& ctx) {
        return dp_control(ctx.estimate, ctx.est_velocity, ctx.track, ctx.gate_index, cfg,
                          limits);
    };
}

}  // namespace falcon
