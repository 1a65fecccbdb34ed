#pragma once

// Poses, gates, tracks, pinhole projection and gate-crossing geometry.
// World frame: x/y horizontal, z up. Body frame: x forward, y left, z up.
// Camera looks along body +x; pixel u grows to the right, v grows downward.

#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Core>
#include <Eigen/Geometry>

namespace falcon {

inline constexpr double kPi = 3.14159265358979323846;

/// Wraps an angle to (-pi, pi] with atan2 semantics.
inline double wrap_angle(double a) {
    a = std::remainder(a, 2.0 * kPi);  // gives [-pi, pi]
    if (a <= -kPi) a += 2.0 * kPi;
    return a;
}

// ---------------------------------------------------------------------------
// Pose and yaw encoding
// ---------------------------------------------------------------------------

/// 3D position plus roll/pitch/yaw, radians. Yaw is kept in (-pi, pi].
struct Pose6 {
    double x = 0.0;
    double y = 0.0;
    double z = 0.0;
    double roll = 0.0;
    double pitch = 0.0;
    double yaw = 0.0;

    Pose6() = default;
    Pose6(double x_, double y_, double z_, double roll_, double pitch_, double yaw_)
        : x(x_), y(y_), z(z_), roll(roll_), pitch(pitch_), yaw(wrap_angle(yaw_)) {}

    Eigen::Vector3d position() const { return {x, y, z}; }

    /// Body-to-world rotation, Rz(yaw) * Ry(pitch) * Rx(roll).
    Eigen::Matrix3d rotation() const {
        Eigen::AngleAxisd rz(yaw, Eigen::Vector3d::UnitZ());
        Eigen::AngleAxisd ry(pitch, Eigen::Vector3d::UnitY());
        Eigen::AngleAxisd rx(roll, Eigen::Vector3d::UnitX());
        return (rz * ry * rx).toRotationMatrix();
    }

    bool finite() const {
        return std::isfinite(x) && std::isfinite(y) && std::isfinite(z) &&
               std::isfinite(roll) && std::isfinite(pitch) && std::isfinite(yaw);
    }
};

/// Continuous yaw representation used by the pose regressor heads.
struct YawEncoding {
    double sin_yaw = 0.0;
    double cos_yaw = 1.0;
};

inline YawEncoding yaw_encode(double yaw) {
    if (!std::isfinite(yaw)) throw std::domain_error("yaw_encode: non-finite yaw");
    return {std::sin(yaw), std::cos(yaw)};
}

/// Recovers the wrapped yaw angle. Tolerates unnormalized encodings; the
/// result only depends on the direction of (sin, cos).
inline double yaw_decode(const YawEncoding& enc) {
    const double norm = std::hypot(enc.sin_yaw, enc.cos_yaw);
    if (!(norm > 1e-6)) throw std::domain_error("yaw_decode: degenerate encoding");
    return std::atan2(enc.sin_yaw, enc.cos_yaw);
}

// ---------------------------------------------------------------------------
// Gates, workspace, tracks
// ---------------------------------------------------------------------------

/// Circular gate modeled as a zero-thickness disk. The crossing direction is
/// the body +x axis of the center pose.
struct Gate {
    Pose6 center;
    double inner_radius = 0.38;

    Eigen::Vector3d normal() const { return center.rotation().col(0); }
    /// In-plane basis spanning the disk.
    Eigen::Vector3d axis_u() const { return center.rotation().col(1); }
    Eigen::Vector3d axis_v() const { return center.rotation().col(2); }
};

struct Box3 {
    Eigen::Vector3d min{-3.0, -3.0, 0.0};
    Eigen::Vector3d max{3.0, 3.0, 3.0};

    bool contains(const Eigen::Vector3d& p, double margin = 0.0) const {
        return (p.array() >= min.array() - margin).all() &&
               (p.array() <= max.array() + margin).all();
    }
    Eigen::Vector3d center() const { return 0.5 * (min + max); }
    /// The same box scaled by `factor` about its center.
    Box3 scaled(double factor) const {
        const Eigen::Vector3d c = center();
        const Eigen::Vector3d h = 0.5 * factor * (max - min);
        return Box3{c - h, c + h};
    }
};

struct Track {
    std::string name;
    std::vector<Gate> gates;
    Box3 workspace;
    bool laps_close_cycle = true;
};

// ---------------------------------------------------------------------------
// Camera model and keypoint observations
// ---------------------------------------------------------------------------

struct CameraModel {
    double fx = 160.0;
    double fy = 160.0;
    double cx = 160.0;
    double cy = 120.0;
    int width = 320;
    int height = 240;

    void validate() const {
        if (!(fx > 0.0) || !(fy > 0.0))
            throw std::invalid_argument("CameraModel: focal lengths must be positive");
        if (!(cx > 0.0 && cx < width) || !(cy > 0.0 && cy < height))
            throw std::invalid_argument("CameraModel: principal point outside image");
    }
};

/// Projected keypoints of one gate. Invisible keypoints carry the
/// sentinel (-1, -1).
struct GateObservation {
    int gate_index = 0;
    std::vector<Eigen::Vector2d> pixels;
    std::vector<std::uint8_t> visible;

    int visible_count() const {
        int n = 0;
        for (auto v : visible) n += v ? 1 : 0;
        return n;
    }
};

/// One rendered frame: keypoints of every gate of the track.
using FrameObservation = std::vector<GateObservation>;

inline int visible_keypoints(const FrameObservation& frame) {
    int n = 0;
    for (const auto& g : frame) n += g.visible_count();
    return n;
}

/// Projects `n_keypoints` points sampled uniformly on the gate's inner circle
/// into the image. Points behind the camera or outside the image are flagged
/// invisible; invisibility is data, not an error.
inline GateObservation project_gate(const Pose6& cam_pose, const CameraModel& cam,
                                    const Gate& gate, int n_keypoints = 8,
                                    int gate_index = 0) {
    if (n_keypoints < 4)
        throw std::invalid_argument("project_gate: need at least 4 keypoints");

    GateObservation obs;
    obs.gate_index = gate_index;
    obs.pixels.resize(static_cast<std::size_t>(n_keypoints));
    obs.visible.assign(static_cast<std::size_t>(n_keypoints), 0);

    const Eigen::Matrix3d r_wb = cam_pose.rotation();
    const Eigen::Vector3d t = cam_pose.position();
    const Eigen::Vector3d eu = gate.axis_u();
    const Eigen::Vector3d ev = gate.axis_v();
    const Eigen::Vector3d c = gate.center.position();

    for (int j = 0; j < n_keypoints; ++j) {
        const double theta = 2.0 * kPi * j / n_keypoints;
        const Eigen::Vector3d pw =
            c + gate.inner_radius * (std::cos(theta) * eu + std::sin(theta) * ev);
        const Eigen::Vector3d pb = r_wb.transpose() * (pw - t);
        // body (fwd, left, up) -> camera (right, down, fwd)
        const double xc = -pb.y();
        const double yc = -pb.z();
        const double zc = pb.x();
        if (zc <= 1e-9) {
            obs.pixels[j] = {-1.0, -1.0};
            continue;
        }
        const double u = cam.cx + cam.fx * xc / zc;
        const double v = cam.cy + cam.fy * yc / zc;
        if (u >= 0.0 && u < cam.width && v >= 0.0 && v < cam.height) {
            obs.pixels[j] = {u, v};
            obs.visible[j] = 1;
        } else {
            obs.pixels[j] = {-1.0, -1.0};
        }
    }
    return obs;
}

/// Abstract scene model mapping a camera pose to a frame observation. Stands
/// in for a full image renderer.
class SceneRenderer {
public:
    virtual ~SceneRenderer() = default;
    virtual FrameObservation render(const Pose6& cam_pose) const = 0;
};

/// Procedural renderer: projects the keypoints of every gate of a track.
class GateFeatureRenderer final : public SceneRenderer {
public:
    GateFeatureRenderer(Track track, CameraModel camera, int n_keypoints = 8)
        : track_(std::move(track)), camera_(camera), n_keypoints_(n_keypoints) {
        camera_.validate();
    }

    FrameObservation render(const Pose6& cam_pose) const override {
        FrameObservation frame;
        frame.reserve(track_.gates.size());
        for (std::size_t i = 0; i < track_.gates.size(); ++i)
            frame.push_back(project_gate(cam_pose, camera_, track_.gates[i], n_keypoints_,
                                         static_cast<int>(i)));
        return frame;
    }

    const Track& track() const { return track_; }
    const CameraModel& camera() const { return camera_; }
    int keypoints_per_gate() const { return n_keypoints_; }

private:
    Track track_;
    CameraModel camera_;
    int n_keypoints_;
};

// ---------------------------------------------------------------------------
// Gate crossing
// ---------------------------------------------------------------------------

struct CrossingEvent {
    Eigen::Vector3d point;       // intersection with the gate plane, meters
    double center_error = 0.0;   // in-plane distance to the gate center
    bool direction_ok = false;   // crossed along the gate's +normal
    double segment_fraction = 0.0;
};

/// Tests whether the segment prev->curr crosses the gate plane within twice
/// the inner radius (captures passes and near-miss collisions alike).
/// Segments lying in the plane produce no event.
inline std::optional<CrossingEvent> detect_crossing(const Eigen::Vector3d& prev,
                                                    const Eigen::Vector3d& curr,
                                                    const Gate& gate) {
    if (prev == curr) throw std::invalid_argument("detect_crossing: degenerate segment");

    const Eigen::Vector3d n = gate.normal();
    const Eigen::Vector3d c = gate.center.position();
    const double d0 = n.dot(prev - c);
    const double d1 = n.dot(curr - c);

    if (std::abs(d0 - d1) < 1e-9) return std::nullopt;  // parallel to the plane
    if (d0 * d1 > 0.0) return std::nullopt;             // same side

    const double t = d0 / (d0 - d1);

    CrossingEvent ev;
    ev.point = prev + t * (curr - prev);
    const Eigen::Vector3d rel = ev.point - c;
    ev.center_error = (rel - n.dot(rel) * n).norm();
    ev.direction_ok = d1 > d0;
    ev.segment_fraction = t;
    if (ev.center_error > 2.0 * gate.inner_radius) return std::nullopt;
    return ev;
}

// ---------------------------------------------------------------------------
// Built-in tracks
// ---------------------------------------------------------------------------
// Gate layouts are fixed constants: a 2 m-radius circle, a hairpin U-turn and
// a figure-8, all at 1.2 m height inside the 6x6x3 m workspace, spaced so the
// cruise controller can fly every turn at 1 m/s.

namespace detail {

inline Gate make_gate(double x, double y, double z, double yaw, double radius = 0.38) {
    Gate g;
    g.center = Pose6{x, y, z, 0.0, 0.0, yaw};
    g.inner_radius = radius;
    return g;
}

}  // namespace detail

inline std::vector<Track> builtin_tracks() {
    using detail::make_gate;
    const Box3 workspace{};  // 6 x 6 x 3 m

    Track circle;
    circle.name = "circle";
    circle.workspace = workspace;
    circle.laps_close_cycle = true;
    // Gates every 90 degrees on a radius-2 circle, normals tangent to it.
    circle.gates = {
        make_gate(2.0, 0.0, 1.2, kPi / 2.0),
        make_gate(0.0, 2.0, 1.2, kPi),
        make_gate(-2.0, 0.0, 1.2, -kPi / 2.0),
        make_gate(0.0, -2.0, 1.2, 0.0),
    };

    Track uturn;
    uturn.name = "uturn";
    uturn.workspace = workspace;
    uturn.laps_close_cycle = false;
    // Out along y = -1, hairpin at x = 2.2, back along y = +1.
    uturn.gates = {
        make_gate(-2.0, -1.0, 1.2, 0.0),
        make_gate(0.8, -1.0, 1.2, 0.0),
        make_gate(2.2, 0.0, 1.2, kPi / 2.0),
        make_gate(0.8, 1.0, 1.2, kPi),
    };

    Track figure8;
    figure8.name = "figure8";
    figure8.workspace = workspace;
    figure8.laps_close_cycle = true;
    // Two diagonal strands crossing at the origin; the lobes at both ends
    // stay clear of the workspace walls.
    const double diag = std::atan2(1.4, 2.8);
    figure8.gates = {
        make_gate(-1.4, -0.7, 1.2, diag),
        make_gate(1.4, 0.7, 1.2, diag),
        make_gate(1.4, -0.7, 1.2, kPi - diag),
        make_gate(-1.4, 0.7, 1.2, kPi - diag),
    };

    return {circle, uturn, figure8};
}

inline Track builtin_track(std::string_view name) {
    for (auto& t : builtin_tracks())
        if (t.name == name) return t;
    throw std::invalid_argument("unknown builtin track: " + std::string(name));
}

}  // namespace falcon
