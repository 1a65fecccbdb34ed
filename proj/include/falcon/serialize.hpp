#pragma once

// JSON (de)serialization for geometry and camera types. All dumps use
// nlohmann::ordered_json so that key order -- and therefore the emitted bytes
// -- are a pure function of the value being written.

#include <string>

#include <json.hpp>

#include "falcon/geometry.hpp"

namespace falcon {

using Json = nlohmann::ordered_json;

inline Json to_json(const Eigen::Vector3d& v) { return Json::array({v.x(), v.y(), v.z()}); }

inline Eigen::Vector3d vector3_from_json(const Json& j) {
    if (!j.is_array() || j.size() != 3)
        throw std::invalid_argument("vector3_from_json: expected array of 3 numbers");
    return {j[0].get<double>(), j[1].get<double>(), j[2].get<double>()};
}

inline Json to_json(const Pose6& p) {
    return Json{{"x", p.x},       {"y", p.y},         {"z", p.z},
                {"roll", p.roll}, {"pitch", p.pitch}, {"yaw", p.yaw}};
}

inline Pose6 pose_from_json(const Json& j) {
    Pose6 p;
    p.x = j.at("x").get<double>();
    p.y = j.at("y").get<double>();
    p.z = j.at("z").get<double>();
    p.roll = j.at("roll").get<double>();
    p.pitch = j.at("pitch").get<double>();
    p.yaw = j.at("yaw").get<double>();
    return p;
}

inline Json to_json(const Gate& g) {
    return Json{{"pos", Json::array({g.center.x, g.center.y, g.center.z})},
                {"rpy", Json::array({g.center.roll, g.center.pitch, g.center.yaw})},
                {"radius", g.inner_radius}};
}

inline Gate gate_from_json(const Json& j) {
    const Json& pos = j.at("pos");
    const Json& rpy = j.at("rpy");
    if (!pos.is_array() || pos.size() != 3 || !rpy.is_array() || rpy.size() != 3)
        throw std::invalid_argument("gate_from_json: pos and rpy must be arrays of 3");
    Gate g;
    g.center = Pose6{pos[0].get<double>(), pos[1].get<double>(), pos[2].get<double>(),
                     rpy[0].get<double>(), rpy[1].get<double>(), rpy[2].get<double>()};
    g.inner_radius = j.at("radius").get<double>();
    if (!(g.inner_radius > 0.0)) throw std::invalid_argument("gate_from_json: bad radius");
    return g;
}

inline Json to_json(const Box3& b) {
    return Json{{"min", to_json(b.min)}, {"max", to_json(b.max)}};
}

inline Box3 box_from_json(const Json& j) {
    Box3 b;
    b.min = vector3_from_json(j.at("min"));
    b.max = vector3_from_json(j.at("max"));
    if ((b.max.array() <= b.min.array()).any())
        throw std::invalid_argument("box_from_json: max must exceed min");
    return b;
}

inline Json to_json(const Track& t) {
    Json gates = Json::array();
    for (const auto& g : t.gates) gates.push_back(to_json(g));
    return Json{{"name", t.name},
                {"workspace", to_json(t.workspace)},
                {"gates", std::move(gates)},
                {"closed", t.laps_close_cycle}};
}

inline Track track_from_json(const Json& j) {
    Track t;
    t.name = j.at("name").get<std::string>();
    t.workspace = box_from_json(j.at("workspace"));
    for (const auto& g : j.at("gates")) t.gates.push_back(gate_from_json(g));
    t.laps_close_cycle = j.at("closed").get<bool>();
    if (t.gates.empty()) throw std::invalid_argument("track_from_json: no gates");
    return t;
}

inline Json to_json(const CameraModel& c) {
    return Json{{"fx", c.fx},         {"fy", c.fy},        {"cx", c.cx},
                {"cy", c.cy},         {"width", c.width},  {"height", c.height}};
}

inline CameraModel camera_from_json(const Json& j) {
    CameraModel c;
    c.fx = j.at("fx").get<double>();
    c.fy = j.at("fy").get<double>();
    c.cx = j.at("cx").get<double>();
    c.cy = j.at("cy").get<double>();
    c.width = j.at("width").get<int>();
    c.height = j.at("height").get<int>();
    c.validate();
    return c;
}

}  // namespace falcon
