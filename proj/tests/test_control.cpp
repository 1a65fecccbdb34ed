#include "falcon/control.hpp"

#include <cmath>

#include <gtest/gtest.h>

#include "falcon/episode.hpp"
#include "falcon/geometry.hpp"
#include "oracle_utils.hpp"

namespace falcon {
namespace {

using testing::make_rng;
using testing::uniform;

// Gate at the origin with its normal along +x: signed plane distance is
// simply the x coordinate, lateral error the (y, z) norm.
Gate x_gate() { return Gate{Pose6{0.0, 0.0, 1.0, 0.0, 0.0, 0.0}, 0.38}; }

Track single_gate_track() {
    Track t;
    t.name = "single";
    t.workspace = Box3{{-5.0, -5.0, 0.0}, {5.0, 5.0, 3.0}};
    t.gates.push_back(x_gate());
    return t;
}

// ---------------------------------------------------------------------------
// Expert target geometry
// ---------------------------------------------------------------------------

TEST(ExpertTarget, CarrotRidesTheAxisWhenBehindThePlane) {
    const ExpertConfig cfg;
    const ExpertTarget t = expert_target({-1.0, 0.05, 1.0}, x_gate(), cfg);
    EXPECT_FALSE(t.staging);
    // s = -1: carrot at s + lookahead = -0.4 on the axis, lateral error gone.
    EXPECT_NEAR(t.point.x(), -0.4, 1e-12);
    EXPECT_NEAR(t.point.y(), 0.0, 1e-12);
    EXPECT_NEAR(t.point.z(), 1.0, 1e-12);
}

TEST(ExpertTarget, CarrotCapsAtTheFarSideWaypoint) {
    const ExpertConfig cfg;
    const ExpertTarget t = expert_target({0.3, 0.1, 1.0}, x_gate(), cfg);
    EXPECT_FALSE(t.staging);  // e = 0.1 <= align_radius
    EXPECT_NEAR(t.point.x(), cfg.waypoint_offset, 1e-12);
    EXPECT_NEAR(t.point.y(), 0.0, 1e-12);
}

TEST(ExpertTarget, MisalignedNearThePlaneDivertsToStagingPoint) {
    const ExpertConfig cfg;
    const ExpertTarget t = expert_target({-0.2, 0.5, 1.0}, x_gate(), cfg);
    EXPECT_TRUE(t.staging);
    EXPECT_NEAR(t.point.x(), -cfg.stage_distance, 1e-12);
    EXPECT_NEAR(t.point.y(), 0.0, 1e-12);
    EXPECT_NEAR(t.point.z(), 1.0, 1e-12);
}

TEST(ExpertTarget, StagingClearsOnceAligned) {
    const ExpertConfig cfg;
    const ExpertTarget t = expert_target({-0.2, 0.1, 1.0}, x_gate(), cfg);
    EXPECT_FALSE(t.staging);
    EXPECT_NEAR(t.point.x(), std::min(-0.2 + cfg.lookahead, cfg.waypoint_offset), 1e-12);
}

// ---------------------------------------------------------------------------
// Yaw law
// ---------------------------------------------------------------------------

TEST(YawControl, ProportionalOnWrappedErrorAndClamped) {
    const ExpertConfig cfg;
    // Seam crossing: from 3.0 to -3.0 the short way is +0.283 rad.
    const double gap = wrap_angle(-3.0 - 3.0);
    EXPECT_NEAR(yaw_control(3.0, -3.0, cfg), cfg.k_yaw * gap, 1e-12);
    // Large errors clamp to the slew limit, both signs.
    EXPECT_DOUBLE_EQ(yaw_control(0.0, 3.0, cfg), cfg.yaw_rate_limit);
    EXPECT_DOUBLE_EQ(yaw_control(0.0, -3.0, cfg), -cfg.yaw_rate_limit);
    auto rng = make_rng(5);
    for (int i = 0; i < 200; ++i) {
        const double cmd = yaw_control(uniform(rng, -10.0, 10.0), uniform(rng, -10.0, 10.0), cfg);
        EXPECT_LE(std::abs(cmd), cfg.yaw_rate_limit);
    }
}

TEST(ExpertYawTarget, BearingFarAwayNormalUpClose) {
    const ExpertConfig cfg;
    const Gate gate = x_gate();
    // Far: bearing to the center.
    EXPECT_NEAR(expert_yaw_target({-2.0, -2.0, 1.0}, gate, cfg),
                std::atan2(2.0, 2.0), 1e-12);
    // Inside yaw_focus: lock to the gate normal (+x here).
    EXPECT_NEAR(expert_yaw_target({-0.3, 0.1, 1.0}, gate, cfg), 0.0, 1e-12);
}

// ---------------------------------------------------------------------------
// Control law
// ---------------------------------------------------------------------------

TEST(ExpertControl, TracksTheCommandedVelocityTowardTheCarrot) {
    const ExpertConfig cfg;
    const DynamicsLimits lim;
    const Track track = single_gate_track();
    QuadState s;
    s.position = Eigen::Vector3d(-1.0, 0.0, 1.0);
    s.velocity = Eigen::Vector3d(0.2, -0.1, 0.0);
    s.yaw = 0.0;

    const ControlInput u = expert_control(s, track, 0, cfg, lim);
    const Eigen::Vector3d target(-0.4, 0.0, 1.0);
    const Eigen::Vector3d v_des =
        cfg.cruise_speed * (target - s.position).normalized();
    const Eigen::Vector3d expected = cfg.k_v * (v_des - s.velocity);
    ASSERT_LE(expected.norm(), lim.a_max);  // unsaturated in this geometry
    EXPECT_NEAR((u.accel - expected).norm(), 0.0, 1e-12);
}

TEST(ExpertControl, AccelerationSaturatesAtTheLimit) {
    const DynamicsLimits lim;
    const Track track = single_gate_track();
    QuadState s;
    s.position = Eigen::Vector3d(-2.0, 0.0, 1.0);
    s.velocity = Eigen::Vector3d(-3.0, 3.0, 0.0);  // violently wrong direction
    const ControlInput u = expert_control(s, track, 0);
    EXPECT_NEAR(u.accel.norm(), lim.a_max, 1e-12);
}

TEST(ExpertControl, ZeroCommandExactlyAtTheWaypointSingularity) {
    const ExpertConfig cfg;
    const Track track = single_gate_track();
    QuadState s;
    s.position = Eigen::Vector3d(cfg.waypoint_offset, 0.0, 1.0);  // the carrot itself
    s.velocity = Eigen::Vector3d::Zero();
    const ControlInput u = expert_control(s, track, 0, cfg);
    EXPECT_EQ(u.accel, Eigen::Vector3d::Zero());
    EXPECT_TRUE(std::isfinite(u.yaw_rate));
}

TEST(ExpertControl, GateIndexWrapsAndEmptyTrackThrows) {
    const Track track = single_gate_track();
    QuadState s;
    s.position = Eigen::Vector3d(-1.0, 0.2, 1.0);
    const ControlInput a = expert_control(s, track, 0);
    const ControlInput b = expert_control(s, track, track.gates.size());
    EXPECT_EQ(a.accel, b.accel);
    EXPECT_EQ(a.yaw_rate, b.yaw_rate);
    EXPECT_THROW(expert_control(s, Track{}, 0), std::invalid_argument);
}

TEST(ExpertConfigValidate, RejectsInconsistentGeometry) {
    ExpertConfig cfg;
    cfg.k_v = 0.0;
    EXPECT_THROW(cfg.validate(), std::invalid_argument);
    cfg = {};
    cfg.stage_distance = 0.3;  // must exceed stage_band
    EXPECT_THROW(cfg.validate(), std::invalid_argument);
    cfg = {};
    cfg.align_radius = 0.0;
    EXPECT_THROW(cfg.validate(), std::invalid_argument);
}

TEST(DpControl, AppliesTheExpertLawToTheBelievedState) {
    const Track track = single_gate_track();
    PoseEstimate est;
    est.pose = Pose6{-1.2, 0.3, 0.9, 0.0, 0.0, 0.4};
    est.valid = true;
    const Eigen::Vector3d vel(0.1, 0.0, -0.1);

    QuadState believed;
    believed.position = est.pose.position();
    believed.velocity = vel;
    believed.yaw = est.pose.yaw;

    const ControlInput u = dp_control(est, vel, track, 0);
    const ControlInput ref = expert_control(believed, track, 0);
    EXPECT_EQ(u.accel, ref.accel);
    EXPECT_EQ(u.yaw_rate, ref.yaw_rate);
}

// ---------------------------------------------------------------------------
// Episodes
// ---------------------------------------------------------------------------

TEST(InitialState, StartsBehindTheFirstGateFacingIt) {
    const Track track = builtin_track("circle");
    const QuadState s = initial_state(track, 0.8);
    const Gate& g0 = track.gates.front();
    EXPECT_NEAR((s.position - (g0.center.position() - 0.8 * g0.normal())).norm(), 0.0, 1e-12);
    EXPECT_NEAR(wrap_angle(s.yaw - std::atan2(g0.normal().y(), g0.normal().x())), 0.0, 1e-12);
    EXPECT_EQ(s.velocity, Eigen::Vector3d::Zero());
}

TEST(PerturbedInitialState, SeededBoundedAndOptional) {
    const Track track = builtin_track("uturn");
    EpisodeConfig cfg;
    const QuadState nominal = initial_state(track, cfg.start_offset);

    const QuadState a = perturbed_initial_state(track, cfg, 7);
    const QuadState b = perturbed_initial_state(track, cfg, 7);
    const QuadState c = perturbed_initial_state(track, cfg, 8);
    EXPECT_EQ(a.position, b.position);
    EXPECT_NE(a.position, c.position);
    EXPECT_LE((a.position - nominal.position).cwiseAbs().maxCoeff(),
              cfg.start_perturbation);

    cfg.start_perturbation = 0.0;
    EXPECT_EQ(perturbed_initial_state(track, cfg, 7).position, nominal.position);
}

struct EpisodeRig {
    Track track;
    GateFeatureRenderer renderer;
    PerfectPerceiver perceiver;

    explicit EpisodeRig(const Track& t) : track(t), renderer(t, CameraModel{}) {}
    explicit EpisodeRig(const std::string& name) : EpisodeRig(builtin_track(name)) {}
};

TEST(RunEpisode, ExpertFliesTenCleanLapsOnEveryBuiltinTrack) {
    for (const char* name : {"circle", "uturn", "figure8"}) {
        EpisodeRig rig(name);
        EpisodeConfig cfg;
        const EpisodeResult r = run_episode(rig.track, rig.renderer, rig.perceiver,
                                            make_expert_controller(), cfg, 1);
        const int expected = cfg.laps * static_cast<int>(rig.track.gates.size());
        EXPECT_EQ(r.outcome, Outcome::completed) << name << ": " << r.diagnostic;
        EXPECT_EQ(r.gates_attempted, expected) << name;
        EXPECT_EQ(r.gates_passed, expected) << name;
        EXPECT_DOUBLE_EQ(r.success_rate(), 1.0) << name;
        EXPECT_EQ(r.laps_completed, cfg.laps) << name;
        EXPECT_LE(r.mean_gate_error(), 0.10) << name;
        EXPECT_FALSE(r.trajectory.empty()) << name;
    }
}

TEST(RunEpisode, ExpertCompletesFromPerturbedStarts) {
    EpisodeRig rig("figure8");
    EpisodeConfig cfg;
    cfg.laps = 2;
    for (std::uint64_t seed : {11u, 12u, 13u}) {
        const EpisodeResult r = run_episode(rig.track, rig.renderer, rig.perceiver,
                                            make_expert_controller(), cfg, seed);
        EXPECT_EQ(r.outcome, Outcome::completed) << "seed " << seed << ": " << r.diagnostic;
        EXPECT_DOUBLE_EQ(r.success_rate(), 1.0) << "seed " << seed;
    }
}

TEST(RunEpisode, HoveringControllerTimesOutWithNoAttempts) {
    EpisodeRig rig("circle");
    EpisodeConfig cfg;
    cfg.laps = 1;
    cfg.lap_timeout = 5.0;
    const ControllerFn hover = [](const StepContext&) { return ControlInput{}; };
    const EpisodeResult r = run_episode(rig.track, rig.renderer, rig.perceiver, hover, cfg, 1);
    EXPECT_EQ(r.outcome, Outcome::timeout);
    EXPECT_EQ(r.gates_attempted, 0);
    EXPECT_DOUBLE_EQ(r.success_rate(), 0.0);
    EXPECT_NEAR(r.duration, cfg.lap_timeout, 0.2);
}

TEST(RunEpisode, NonFiniteControlAbortsWithDiagnostic) {
    EpisodeRig rig("circle");
    const ControllerFn broken = [](const StepContext& ctx) {
        ControlInput u;
        if (ctx.step_index >= 3)
            u.accel.x() = std::numeric_limits<double>::quiet_NaN();
        return u;
    };
    const EpisodeResult r =
        run_episode(rig.track, rig.renderer, rig.perceiver, broken, EpisodeConfig{}, 1);
    EXPECT_EQ(r.outcome, Outcome::off_track);
    EXPECT_NE(r.diagnostic.find("non-finite control"), std::string::npos);
    EXPECT_NE(r.diagnostic.find("step 3"), std::string::npos);
}

// Two gates on the x axis; the second sits 0.5 m off the flight line, inside
// the frame disk (2 radii) but outside the opening. Flying straight +x passes
// gate 0 cleanly and strikes gate 1's frame.
Track ram_track() {
    Track t;
    t.name = "ram";
    t.workspace = Box3{{-5.0, -5.0, 0.0}, {5.0, 5.0, 3.0}};
    t.gates.push_back(Gate{Pose6{0.0, 0.0, 1.0, 0.0, 0.0, 0.0}, 0.38});
    t.gates.push_back(Gate{Pose6{1.5, -0.5, 1.0, 0.0, 0.0, 0.0}, 0.38});
    return t;
}

ControllerFn ram_controller() {
    return [](const StepContext& ctx) {
        ControlInput u;
        u.accel = 3.0 * (Eigen::Vector3d(1.0, 0.0, 0.0) - ctx.truth.velocity);
        return u;
    };
}

TEST(RunEpisode, FrameHitAdvancesTheGateAndContinues) {
    const Track track = ram_track();
    EpisodeRig rig(track);
    EpisodeConfig cfg;
    cfg.laps = 1;
    cfg.start_perturbation = 0.0;
    const EpisodeResult r =
        run_episode(track, rig.renderer, rig.perceiver, ram_controller(), cfg, 1);
    ASSERT_EQ(r.gates_attempted, 2);
    EXPECT_EQ(r.gates_passed, 1);
    EXPECT_TRUE(r.attempts[0].passed);
    EXPECT_FALSE(r.attempts[1].passed);
    EXPECT_NEAR(r.attempts[1].center_error, 0.5, 1e-9);  // flight line is exact
    EXPECT_EQ(r.outcome, Outcome::completed);  // laps count attempts, pass or hit
    EXPECT_EQ(r.laps_completed, 1);
    EXPECT_DOUBLE_EQ(r.success_rate(), 0.5);
    EXPECT_NEAR(r.mean_gate_error(), r.attempts[0].center_error, 1e-12);
}

TEST(RunEpisode, FrameHitIsFatalWhenConfigured) {
    const Track track = ram_track();
    EpisodeRig rig(track);
    EpisodeConfig cfg;
    cfg.laps = 1;
    cfg.start_perturbation = 0.0;
    cfg.collision_fatal = true;
    const EpisodeResult r =
        run_episode(track, rig.renderer, rig.perceiver, ram_controller(), cfg, 1);
    EXPECT_EQ(r.outcome, Outcome::collision);
    EXPECT_EQ(r.gates_attempted, 2);
    EXPECT_EQ(r.gates_passed, 1);
    EXPECT_NE(r.diagnostic.find("frame hit at gate 1"), std::string::npos);
}

// Fly forward through the gate once, then turn around and fly back through
// the opening. On a single-gate track the same gate is active again, but the
// return crossing is against the normal and must not count as an attempt.
TEST(RunEpisode, BackwardCrossingsDoNotCount) {
    EpisodeRig rig(single_gate_track());
    EpisodeConfig cfg;
    cfg.laps = 2;  // unreachable: the second forward pass never happens
    cfg.lap_timeout = 6.0;
    cfg.start_perturbation = 0.0;
    const ControllerFn there_and_back = [](const StepContext& ctx) {
        ControlInput u;
        const double vx = ctx.t < 2.0 ? 1.2 : -1.2;
        u.accel = 3.0 * (Eigen::Vector3d(vx, 0.0, 0.0) - ctx.truth.velocity);
        return u;
    };
    const EpisodeResult r = run_episode(rig.track, rig.renderer, rig.perceiver,
                                        there_and_back, cfg, 1);
    EXPECT_EQ(r.outcome, Outcome::timeout);
    EXPECT_EQ(r.gates_attempted, 1);  // only the initial forward pass
    EXPECT_EQ(r.gates_passed, 1);
}

TEST(RunEpisode, DeterministicGivenSeedWithNoisyPerception) {
    const Track track = builtin_track("circle");
    const GateFeatureRenderer renderer(track, CameraModel{});
    const NoiseOracleConfig noise = builtin_noise_config("circle");
    EpisodeConfig cfg;
    cfg.laps = 2;

    auto run = [&]() {
        OraclePerceiver perceiver(noise, kalman_config_for(noise), cfg.dt, track.workspace);
        return run_episode(track, renderer, perceiver, make_dp_controller(), cfg, 99);
    };
    const EpisodeResult a = run();
    const EpisodeResult b = run();
    EXPECT_EQ(a.gates_attempted, b.gates_attempted);
    EXPECT_EQ(a.gates_passed, b.gates_passed);
    EXPECT_EQ(a.duration, b.duration);
    ASSERT_FALSE(a.trajectory.empty());
    ASSERT_EQ(a.trajectory.size(), b.trajectory.size());
    EXPECT_EQ(a.trajectory.back().truth.position, b.trajectory.back().truth.position);
    EXPECT_EQ(a.trajectory.back().estimate.pose.x, b.trajectory.back().estimate.pose.x);
}

TEST(RunEpisode, DirectPerceptionBaselineFliesTheCircle) {
    const Track track = builtin_track("circle");
    const GateFeatureRenderer renderer(track, CameraModel{});
    const NoiseOracleConfig noise = builtin_noise_config("circle");
    EpisodeConfig cfg;
    cfg.laps = 2;
    OraclePerceiver perceiver(noise, kalman_config_for(noise), cfg.dt, track.workspace);
    const EpisodeResult r =
        run_episode(track, renderer, perceiver, make_dp_controller(), cfg, 3);
    EXPECT_EQ(r.outcome, Outcome::completed) << r.diagnostic;
    EXPECT_EQ(r.gates_attempted, 8);
    EXPECT_GE(r.gates_passed, 6);  // noisy perception: most but not all clean
}

TEST(RunEpisode, StepHookSeesEveryStepInOrder) {
    EpisodeRig rig("circle");
    EpisodeConfig cfg;
    cfg.laps = 1;
    std::size_t calls = 0;
    bool ordered = true;
    int crossings = 0;
    const StepHook hook = [&](const StepRecord& rec) {
        ordered = ordered && rec.step_index == calls;
        ++calls;
        if (rec.event) ++crossings;
        if (rec.frame == nullptr) ordered = false;
    };
    const EpisodeResult r = run_episode(rig.track, rig.renderer, rig.perceiver,
                                        make_expert_controller(), cfg, 1, hook);
    EXPECT_TRUE(ordered);
    EXPECT_EQ(calls + 1, r.trajectory.size());  // steps plus the terminal sample
    EXPECT_EQ(crossings, r.gates_attempted);
}

TEST(EpisodeConfigValidate, RejectsBadValues) {
    EpisodeConfig cfg;
    cfg.laps = 0;
    EXPECT_THROW(cfg.validate(), std::invalid_argument);
    cfg = {};
    cfg.dt = 0.0;
    EXPECT_THROW(cfg.validate(), std::invalid_argument);
    cfg = {};
    cfg.start_perturbation = -0.1;
    EXPECT_THROW(cfg.validate(), std::invalid_argument);
}

}  // namespace
}  // namespace falcon
