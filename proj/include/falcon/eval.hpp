#pragma once

// Evaluation harness: runs the track x controller matrix over seeded
// episodes, aggregates success rate (fraction of attempted gates passed) and
// mean gate error (over clean passes), logs trajectories as CSV with
// round-trip-exact floats, and recomputes the metrics post hoc from the logs.

#include <array>
#include <charconv>
#include <cstdint>
#include <fstream>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <json.hpp>

#include "falcon/episode.hpp"
#include "falcon/policy.hpp"
#include "falcon/serialize.hpp"

namespace falcon {

inline const char* outcome_name(Outcome o) {
    switch (o) {
        case Outcome::completed: return "completed";
        case Outcome::collision: return "collision";
        case Outcome::off_track: return "off_track";
        case Outcome::timeout: return "timeout";
    }
    throw std::logic_error("outcome_name: unknown outcome");
}

inline Outcome outcome_from_name(const std::string& name) {
    for (Outcome o : {Outcome::completed, Outcome::collision, Outcome::off_track,
                      Outcome::timeout})
        if (name == outcome_name(o)) return o;
    throw std::invalid_argument("outcome_from_name: unknown outcome " + name);
}

struct PerGateStats {
    int attempted = 0;
    int passed = 0;
    double mean_error = 0.0;  // over passed attempts
};

/// One track x controller cell, aggregated over the seeded episodes.
struct EvalCell {
    std::string track;
    std::string controller;
    int episodes = 0;
    int gates_attempted = 0;
    int gates_passed = 0;
    double success_rate = 0.0;     // sum(passed) / sum(attempted)
    double mean_gate_error = 0.0;  // pooled over passed attempts
    std::vector<PerGateStats> per_gate;
    std::vector<std::string> outcomes;  // one per episode
};

struct EvalReport {
    int laps = 0;
    std::vector<std::uint64_t> seeds;
    std::vector<EvalCell> cells;

    const EvalCell* find(const std::string& track, const std::string& controller) const {
        for (const auto& c : cells)
            if (c.track == track && c.controller == controller) return &c;
        return nullptr;
    }

    Json to_json() const {
        Json j;
        j["type"] = "eval_report";
        j["laps"] = laps;
        j["seeds"] = seeds;
        Json rows = Json::array();
        for (const auto& c : cells) {
            Json r;
            r["track"] = c.track;
            r["controller"] = c.controller;
            r["episodes"] = c.episodes;
            r["gates_attempted"] = c.gates_attempted;
            r["gates_passed"] = c.gates_passed;
            r["success_rate"] = c.success_rate;
            r["mean_gate_error"] = c.mean_gate_error;
            Json gates = Json::array();
            for (const auto& g : c.per_gate)
                gates.push_back(Json{{"attempted", g.attempted},
                                     {"passed", g.passed},
                                     {"mean_error", g.mean_error}});
            r["per_gate"] = std::move(gates);
            r["outcomes"] = c.outcomes;
            rows.push_back(std::move(r));
        }
        j["cells"] = std::move(rows);
        return j;
    }

    static EvalReport from_json(const Json& j) {
        if (j.value("type", "") != "eval_report")
            throw std::runtime_error("EvalReport: unexpected serialized type");
        EvalReport rep;
        rep.laps = j.at("laps").get<int>();
        rep.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
        for (const Json& r : j.at("cells")) {
            EvalCell c;
            c.track = r.at("track").get<std::string>();
            c.controller = r.at("controller").get<std::string>();
            c.episodes = r.at("episodes").get<int>();
            c.gates_attempted = r.at("gates_attempted").get<int>();
            c.gates_passed = r.at("gates_passed").get<int>();
            c.success_rate = r.at("success_rate").get<double>();
            c.mean_gate_error = r.at("mean_gate_error").get<double>();
            for (const Json& g : r.at("per_gate")) {
                PerGateStats s;
                s.attempted = g.at("attempted").get<int>();
                s.passed = g.at("passed").get<int>();
                s.mean_error = g.at("mean_error").get<double>();
                c.per_gate.push_back(s);
            }
            c.outcomes = r.at("outcomes").get<std::vector<std::string>>();
            rep.cells.push_back(std::move(c));
        }
        return rep;
    }
};

struct EvalConfig {
    std::vector<std::uint64_t> seeds{1};  // one episode per seed per cell
    EpisodeConfig episode;
    ExpertConfig expert;        // expert/dp law and the mm yaw controller
    NoiseOracleConfig noise;    // perception for dp and mm rows
    KalmanConfig filter;
    CameraModel camera;

    void validate() const {
        if (seeds.empty()) throw std::invalid_argument("EvalConfig: need >= 1 seed");
        episode.validate();
        expert.validate();
        noise.validate();
        camera.validate();
    }
};

/// A track to evaluate, with the policy flying its mm row (null when no mm
/// controller is requested).
struct TrackEval {
    Track track;
    const PolicyNet* policy = nullptr;
};

/// Full cross-product evaluation. Controllers are named "expert" (true-state
/// law), "dp" (expert law on the filtered estimate) and "mm" (policy
/// acceleration, proportional yaw). Episodes share the seed list across
/// cells, so controllers face identical start perturbations.
inline EvalReport evaluate_matrix(const std::vector<TrackEval>& tracks,
                                  const std::vector<std::string>& controllers,
                                  const EvalConfig& cfg) {
    cfg.validate();
    if (tracks.empty() || controllers.empty())
        throw std::invalid_argument("evaluate_matrix: empty tracks or controllers");

    EvalReport rep;
    rep.laps = cfg.episode.laps;
    rep.seeds = cfg.seeds;

    for (const TrackEval& te : tracks) {
        const Track& track = te.track;
        for (const std::string& name : controllers) {
            if (name == "mm") {
                if (te.policy == nullptr)
                    throw std::invalid_argument(
                        "evaluate_matrix: mm row requires a policy for track " +
                        track.name);
                if (te.policy->n_gates() != static_cast<int>(track.gates.size()))
                    throw std::invalid_argument(
                        "evaluate_matrix: policy gate count does not match track " +
                        track.name);
            } else if (name != "expert" && name != "dp") {
                throw std::invalid_argument("evaluate_matrix: unknown controller " + name);
            }

            EvalCell cell;
            cell.track = track.name;
            cell.controller = name;
            cell.per_gate.assign(track.gates.size(), PerGateStats{});
            std::vector<double> per_gate_error_sum(track.gates.size(), 0.0);
            double error_sum = 0.0;

            const GateFeatureRenderer renderer(track, cfg.camera);
            for (const std::uint64_t seed : cfg.seeds) {
                EpisodeResult result;
                if (name == "expert") {
                    PerfectPerceiver perceiver;
                    result = run_episode(track, renderer, perceiver,
                                         make_expert_controller(cfg.expert,
                                                                cfg.episode.limits),
                                         cfg.episode, seed);
                } else {
                    OraclePerceiver perceiver(cfg.noise, cfg.filter, cfg.episode.dt,
                                              track.workspace);
                    const ControllerFn controller =
                        name == "dp" ? make_dp_controller(cfg.expert, cfg.episode.limits)
                                     : make_mm_controller(*te.policy, cfg.expert);
                    result = run_episode(track, renderer, perceiver, controller,
                                         cfg.episode, seed);
                }

                ++cell.episodes;
                cell.gates_attempted += result.gates_attempted;
                cell.gates_passed += result.gates_passed;
                cell.outcomes.push_back(outcome_name(result.outcome));
                for (const GateAttempt& a : result.attempts) {
                    PerGateStats& g = cell.per_gate[a.gate_index];
                    ++g.attempted;
                    if (a.passed) {
                        ++g.passed;
                        per_gate_error_sum[a.gate_index] += a.center_error;
                        error_sum += a.center_error;
                    }
                }
            }

            cell.success_rate = cell.gates_attempted == 0
                                    ? 0.0
                                    : static_cast<double>(cell.gates_passed) /
                                          cell.gates_attempted;
            cell.mean_gate_error =
                cell.gates_passed == 0 ? 0.0 : error_sum / cell.gates_passed;
            for (std::size_t g = 0; g < cell.per_gate.size(); ++g)
                cell.per_gate[g].mean_error =
                    cell.per_gate[g].passed == 0
                        ? 0.0
                        : per_gate_error_sum[g] / cell.per_gate[g].passed;
            rep.cells.push_back(std::move(cell));
        }
    }
    return rep;
}

// ---------------------------------------------------------------------------
// Trajectory logging
// ---------------------------------------------------------------------------

namespace detail {

/// Shortest decimal form that parses back to the identical double.
inline void append_double(std::string& out, double v) {
    std::array<char, 32> buf;
    const auto res = std::to_chars(buf.data(), buf.data() + buf.size(), v);
    out.append(buf.data(), res.ptr);
}

inline double parse_double(std::string_view s, const std::string& where) {
    double v = 0.0;
    const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
    if (res.ec != std::errc{} || res.ptr != s.data() + s.size())
        throw std::runtime_error("log_trajectory: bad number '" + std::string(s) +
                                 "' at " + where);
    return v;
}

}  // namespace detail

/// One parsed trajectory-log row.
struct TrajRow {
    double t = 0.0;
    Eigen::Vector3d position{0.0, 0.0, 0.0};
    double yaw = 0.0;
    Eigen::Vector3d velocity{0.0, 0.0, 0.0};
    Eigen::Vector3d est_position{0.0, 0.0, 0.0};
    double est_yaw = 0.0;
    std::size_t next_gate = 0;
    std::optional<std::size_t> crossed;
};

inline constexpr const char* kTrajectoryHeader =
    "t,x,y,z,yaw,vx,vy,vz,est_x,est_y,est_z,est_yaw,next_gate,event";

inline void log_trajectory(const EpisodeResult& result, const std::string& path) {
    if (result.trajectory.empty())
        throw std::invalid_argument("log_trajectory: empty trajectory");
    std::ofstream out(path);
    if (!out) throw std::runtime_error("log_trajectory: cannot open " + path);
    std::string line;
    out << kTrajectoryHeader << '\n';
    for (const TrajectoryPoint& p : result.trajectory) {
        line.clear();
        const double cols[12] = {p.t,
                                 p.truth.position.x(),
                                 p.truth.position.y(),
                                 p.truth.position.z(),
                                 p.truth.yaw,
                                 p.truth.velocity.x(),
                                 p.truth.velocity.y(),
                                 p.truth.velocity.z(),
                                 p.estimate.pose.x,
                                 p.estimate.pose.y,
                                 p.estimate.pose.z,
                                 p.estimate.pose.yaw};
        for (double v : cols) {
            detail::append_double(line, v);
            line.push_back(',');
        }
        line += std::to_string(p.gate_index);
        line.push_back(',');
        if (p.crossed) line += "cross:" + std::to_string(*p.crossed);
        out << line << '\n';
    }
    if (!out) throw std::runtime_error("log_trajectory: write failed for " + path);
}

inline std::vector<TrajRow> load_trajectory(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("load_trajectory: cannot open " + path);
    std::string line;
    if (!std::getline(in, line) || line != kTrajectoryHeader)
        throw std::runtime_error("load_trajectory: bad header in " + path);

    std::vector<TrajRow> rows;
    int lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        const std::string where = path + ":" + std::to_string(lineno);
        std::vector<std::string_view> fields;
        std::string_view rest = line;
        while (true) {
            const auto comma = rest.find(',');
            if (comma == std::string_view::npos) {
                fields.push_back(rest);
                break;
            }
            fields.push_back(rest.substr(0, comma));
            rest.remove_prefix(comma + 1);
        }
        if (fields.size() != 14)
            throw std::runtime_error("load_trajectory: expected 14 columns at " + where);

        TrajRow r;
        r.t = detail::parse_double(fields[0], where);
        r.position = {detail::parse_double(fields[1], where),
                      detail::parse_double(fields[2], where),
                      detail::parse_double(fields[3], where)};
        r.yaw = detail::parse_double(fields[4], where);
        r.velocity = {detail::parse_double(fields[5], where),
                      detail::parse_double(fields[6], where),
                      detail::parse_double(fields[7], where)};
        r.est_position = {detail::parse_double(fields[8], where),
                          detail::parse_double(fields[9], where),
                          detail::parse_double(fields[10], where)};
        r.est_yaw = detail::parse_double(fields[11], where);
        r.next_gate = static_cast<std::size_t>(
            detail::parse_double(fields[12], where));
        if (!fields[13].empty()) {
            constexpr std::string_view prefix = "cross:";
            if (fields[13].substr(0, prefix.size()) != prefix)
                throw std::runtime_error("load_trajectory: bad event at " + where);
            r.crossed = static_cast<std::size_t>(
                detail::parse_double(fields[13].substr(prefix.size()), where));
        }
        rows.push_back(r);
    }
    return rows;
}

// ---------------------------------------------------------------------------
// Post-hoc metrics
// ---------------------------------------------------------------------------

struct PostHocMetrics {
    std::vector<GateAttempt> attempts;
    int gates_attempted = 0;
    int gates_passed = 0;

    double success_rate() const {
        return gates_attempted == 0
                   ? 0.0
                   : static_cast<double>(gates_passed) / gates_attempted;
    }

    double mean_gate_error() const {
        double sum = 0.0;
        int n = 0;
        for (const auto& a : attempts)
            if (a.passed) { sum += a.center_error; ++n; }
        return n == 0 ? 0.0 : sum / n;
    }
};

/// Independent SR/MGE recomputation: replays crossing detection over the
/// logged step endpoints against each row's active gate. Bitwise-exact log
/// floats make the result equal the online bookkeeping exactly.
inline PostHocMetrics recompute_metrics(const std::vector<TrajRow>& rows,
                                        const Track& track) {
    if (track.gates.empty())
        throw std::invalid_argument("recompute_metrics: empty track");
    PostHocMetrics m;
    for (std::size_t i = 0; i + 1 < rows.size(); ++i) {
        const TrajRow& a = rows[i];
        const TrajRow& b = rows[i + 1];
        if (a.position == b.position) continue;
        if (a.next_gate >= track.gates.size())
            throw std::invalid_argument("recompute_metrics: gate index out of range");
        const auto ev = detect_crossing(a.position, b.position, track.gates[a.next_gate]);
        if (!ev || !ev->direction_ok) continue;
        GateAttempt attempt;
        attempt.gate_index = a.next_gate;
        attempt.t = b.t;
        attempt.center_error = ev->center_error;
        attempt.passed = ev->center_error <= track.gates[a.next_gate].inner_radius;
        m.attempts.push_back(attempt);
        ++m.gates_attempted;
        if (attempt.passed) ++m.gates_passed;
    }
    return m;
}

// ---------------------------------------------------------------------------
// Threshold checking (CI hook)
// ---------------------------------------------------------------------------

/// Thresholds file: array of {track, controller, min_sr?, max_mge?}. Returns
/// one human-readable violation per failed bound; a missing cell is itself a
/// violation.
inline std::vector<std::string> check_thresholds(const EvalReport& report,
                                                 const Json& thresholds) {
    if (!thresholds.is_array())
        throw std::invalid_argument("check_thresholds: thresholds must be an array");
    std::vector<std::string> violations;
    for (const Json& t : thresholds) {
        const std::string track = t.at("track").get<std::string>();
        const std::string controller = t.at("controller").get<std::string>();
        const std::string label = track + "/" + controller;
        const EvalCell* cell = report.find(track, controller);
        if (cell == nullptr) {
            violations.push_back(label + ": missing from the report");
            continue;
        }
        if (t.contains("min_sr")) {
            const double bound = t.at("min_sr").get<double>();
            if (cell->success_rate < bound) {
                std::ostringstream os;
                os << label << ": SR " << cell->success_rate << " < " << bound;
                violations.push_back(os.str());
            }
        }
        if (t.contains("max_mge")) {
            const double bound = t.at("max_mge").get<double>();
            if (cell->mean_gate_error > bound) {
                std::ostringstream os;
                os << label << ": MGE " << cell->mean_gate_error << " > " << bound;
                violations.push_back(os.str());
            }
        }
    }
    return violations;
}

}  // namespace falcon
