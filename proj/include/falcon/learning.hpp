#pragma once

// Imitation-learning pipeline: noisy expert rollouts produce the controller
// dataset D_C (visual frame, perturbed pose, IMU, next-gate pose -> expert
// acceleration), a squared-error trainer fits the multi-modal policy, and a
// DAGGER loop aggregates relabeled rollout data across iterations.

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <json.hpp>

#include "falcon/episode.hpp"
#include "falcon/error_model.hpp"
#include "falcon/nn.hpp"
#include "falcon/npe.hpp"
#include "falcon/policy.hpp"
#include "falcon/seeding.hpp"

namespace falcon {

/// One controller sample, as a view into the columnar dataset.
struct ControllerSample {
    Eigen::RowVectorXd obs;  // rendered keypoint features, 24 per gate
    Pose6 p_tilde;           // perturbed / perceived pose
    ImuSample z;
    Pose6 gate;              // next gate's ground-truth pose
    Eigen::Vector3d u_star;  // expert acceleration at the visited state
};

/// Columnar controller dataset. Rows sharing a rollout step differ only in
/// p_tilde (the perturbation augmentation).
struct DcDataset {
    Eigen::MatrixXd vision;   // n x 24*n_gates
    Eigen::MatrixXd p_tilde;  // n x 6 raw pose
    Eigen::MatrixXd imu;      // n x 6 (lin accel, ang rate)
    Eigen::MatrixXd gate;     // n x 6 raw pose
    Eigen::MatrixXd u_star;   // n x 3
    std::uint64_t seed = 0;

    Eigen::Index size() const { return vision.rows(); }

    void validate() const {
        const Eigen::Index n = vision.rows();
        if (p_tilde.rows() != n || imu.rows() != n || gate.rows() != n ||
            u_star.rows() != n)
            throw std::invalid_argument("DcDataset: column blocks disagree on row count");
        if (n > 0 && (p_tilde.cols() != 6 || imu.cols() != 6 || gate.cols() != 6 ||
                      u_star.cols() != 3))
            throw std::invalid_argument("DcDataset: column blocks have wrong widths");
    }

    void append(const DcDataset& other) {
        validate();
        other.validate();
        if (size() == 0) {
            *this = other;
            return;
        }
        if (other.size() == 0) return;
        if (other.vision.cols() != vision.cols())
            throw std::invalid_argument("DcDataset: vision widths disagree");
        auto stack = [](Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
            const Eigen::Index n = a.rows();
            a.conservativeResize(n + b.rows(), Eigen::NoChange);
            a.bottomRows(b.rows()) = b;
        };
        stack(vision, other.vision);
        stack(p_tilde, other.p_tilde);
        stack(imu, other.imu);
        stack(gate, other.gate);
        stack(u_star, other.u_star);
    }

    ControllerSample sample(Eigen::Index i) const {
        if (i < 0 || i >= size()) throw std::out_of_range("DcDataset: bad index");
        ControllerSample s;
        s.obs = vision.row(i);
        s.p_tilde = Pose6{p_tilde(i, 0), p_tilde(i, 1), p_tilde(i, 2),
                          p_tilde(i, 3), p_tilde(i, 4), p_tilde(i, 5)};
        s.z.lin_accel = imu.row(i).head<3>().transpose();
        s.z.ang_rate = imu.row(i).tail<3>().transpose();
        s.gate = Pose6{gate(i, 0), gate(i, 1), gate(i, 2),
                       gate(i, 3), gate(i, 4), gate(i, 5)};
        s.u_star = u_star.row(i).transpose();
        return s;
    }

    /// State-branch feature rows for the whole dataset.
    Eigen::MatrixXd state_features() const {
        Eigen::MatrixXd f(size(), kPolicyStateDim);
        for (Eigen::Index i = 0; i < size(); ++i) {
            const ControllerSample s = sample(i);
            f.row(i) = policy_state_features(s.p_tilde, s.z, s.gate);
        }
        return f;
    }
};

/// Perturbs an expert action with isotropic Gaussian noise and re-clamps.
/// The noise diversifies the flown states; dataset labels keep the clean u*.
inline ControlInput inject_noise(const ControlInput& u_star, double sigma,
                                 std::mt19937_64& rng) {
    if (sigma < 0.0) throw std::invalid_argument("inject_noise: sigma must be >= 0");
    ControlInput u = u_star;
    if (sigma == 0.0) return u;
    std::normal_distribution<double> gauss(0.0, sigma);
    u.accel += Eigen::Vector3d(gauss(rng), gauss(rng), gauss(rng));
    u.accel = clamp_norm(u.accel, DynamicsLimits{}.a_max);
    return u;
}

struct DcConfig {
    int n_runs = 20;
    int n_perturb = 50;        // perturbed poses per rollout step
    double noise_sigma = 0.5;  // expert action noise during collection, m/s^2
    EpisodeConfig episode;
    ExpertConfig expert;
    CameraModel camera;        // scales keypoints to image fractions

    DcConfig() { episode.laps = 1; }

    void validate() const {
        if (n_runs < 1) throw std::invalid_argument("DcConfig: n_runs must be >= 1");
        if (n_perturb < 1) throw std::invalid_argument("DcConfig: n_perturb must be >= 1");
        if (noise_sigma < 0.0)
            throw std::invalid_argument("DcConfig: noise_sigma must be >= 0");
        episode.validate();
        expert.validate();
        camera.validate();
    }
};

/// Rolls out beta-mixed episodes and emits n_perturb controller samples per
/// step, sharing (obs, z, g, u*) with distinct perturbed poses. Actions are
/// the noised expert with probability beta, else the policy acting on the
/// perceiver's estimate; every visited state is labeled with the clean
/// expert action. With beta = 1 the policy and perceiver are never consulted.
inline DcDataset collect_dc_mixed(const Track& track, const SceneRenderer& renderer,
                                  Perceiver& perceiver, const QuantileModel& quantiles,
                                  const PolicyNet* policy, double beta,
                                  const DcConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    if (!(beta >= 0.0 && beta <= 1.0))
        throw std::invalid_argument("collect_dc_mixed: beta must be in [0, 1]");
    if (beta < 1.0 && policy == nullptr)
        throw std::invalid_argument("collect_dc_mixed: beta < 1 requires a policy");

    const int n_gates = static_cast<int>(track.gates.size());
    const int vdim = frame_feature_dim(n_gates);

    std::vector<Eigen::RowVectorXd> vision_rows;
    std::vector<Eigen::RowVectorXd> ptilde_rows;
    std::vector<Eigen::RowVectorXd> imu_rows;
    std::vector<Eigen::RowVectorXd> gate_rows;
    std::vector<Eigen::RowVectorXd> u_rows;

    const ControllerFn expert = make_expert_controller(cfg.expert, cfg.episode.limits);
    for (int run = 0; run < cfg.n_runs; ++run) {
        const std::uint64_t run_seed = derive_seed(seed, static_cast<std::uint64_t>(run));
        std::mt19937_64 noise_rng(derive_seed(run_seed, 3));
        std::mt19937_64 perturb_rng(derive_seed(run_seed, 4));
        std::mt19937_64 mix_rng(derive_seed(run_seed, 5));
        std::bernoulli_distribution use_expert(beta);

        const ControllerFn mixed = [&](const StepContext& ctx) {
            if (use_expert(mix_rng)) return inject_noise(expert(ctx), cfg.noise_sigma,
                                                         noise_rng);
            const Gate& g = ctx.track.gates[ctx.gate_index % ctx.track.gates.size()];
            ControlInput u = policy->act(ctx.frame, ctx.estimate.pose, ctx.imu, g.center);
            u.yaw_rate = yaw_control(
                ctx.estimate.pose.yaw,
                expert_yaw_target(ctx.estimate.pose.position(), g, cfg.expert), cfg.expert);
            return u;
        };

        const StepHook emit = [&](const StepRecord& rec) {
            StepContext ctx{rec.step_index, rec.t,       rec.truth_before,
                            rec.estimate,   rec.est_velocity, *rec.frame,
                            rec.imu,        track,       rec.gate_index};
            const ControlInput u_star = expert(ctx);  // clean label at the visited state
            const Eigen::RowVectorXd obs = frame_features(*rec.frame, cfg.camera);
            const Pose6& g = track.gates[rec.gate_index % track.gates.size()].center;
            Eigen::RowVectorXd grow(6);
            grow << g.x, g.y, g.z, g.roll, g.pitch, g.yaw;
            Eigen::RowVectorXd zrow(6);
            zrow << rec.imu.lin_accel.transpose(), rec.imu.ang_rate.transpose();
            const Eigen::RowVector3d urow = u_star.accel.transpose();

            for (const Pose6& p : sample_perturbed(rec.truth_before.pose(), quantiles,
                                                   cfg.n_perturb, perturb_rng)) {
                Eigen::RowVectorXd prow(6);
                prow << p.x, p.y, p.z, p.roll, p.pitch, p.yaw;
                vision_rows.push_back(obs);
                ptilde_rows.push_back(prow);
                imu_rows.push_back(zrow);
                gate_rows.push_back(grow);
                u_rows.push_back(urow);
            }
        };
        run_episode(track, renderer, perceiver, mixed, cfg.episode, run_seed, emit);
    }

    DcDataset dc;
    dc.seed = seed;
    const auto n = static_cast<Eigen::Index>(vision_rows.size());
    dc.vision.resize(n, vdim);
    dc.p_tilde.resize(n, 6);
    dc.imu.resize(n, 6);
    dc.gate.resize(n, 6);
    dc.u_star.resize(n, 3);
    for (Eigen::Index i = 0; i < n; ++i) {
        dc.vision.row(i) = vision_rows[static_cast<std::size_t>(i)];
        dc.p_tilde.row(i) = ptilde_rows[static_cast<std::size_t>(i)];
        dc.imu.row(i) = imu_rows[static_cast<std::size_t>(i)];
        dc.gate.row(i) = gate_rows[static_cast<std::size_t>(i)];
        dc.u_star.row(i) = u_rows[static_cast<std::size_t>(i)];
    }
    return dc;
}

/// Pure-expert collection (the DAGGER iteration-0 / behavior-cloning case).
inline DcDataset collect_dc(const Track& track, const SceneRenderer& renderer,
                            const QuantileModel& quantiles, const DcConfig& cfg,
                            std::uint64_t seed) {
    PerfectPerceiver perceiver;  // estimates are unused at beta = 1
    return collect_dc_mixed(track, renderer, perceiver, quantiles, nullptr, 1.0, cfg,
                            seed);
}

// ---------------------------------------------------------------------------
// Binary columnar persistence: one-line JSON header, then per-column blocks
// of little-endian doubles in row-major order.
// ---------------------------------------------------------------------------

inline void save_dc(const DcDataset& dc, const std::string& path) {
    dc.validate();
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("save_dc: cannot open " + path);
    Json header;
    header["type"] = "dc_dataset";
    header["n"] = dc.size();
    header["vision_dim"] = dc.vision.cols();
    header["schema"] = {"vision", "p_tilde", "imu", "gate", "u_star"};
    header["seed"] = dc.seed;
    out << header.dump() << '\n';
    auto block = [&](const Eigen::MatrixXd& m) {
        for (Eigen::Index r = 0; r < m.rows(); ++r)
            for (Eigen::Index c = 0; c < m.cols(); ++c) {
                const double v = m(r, c);
                out.write(reinterpret_cast<const char*>(&v), sizeof(v));
            }
    };
    block(dc.vision);
    block(dc.p_tilde);
    block(dc.imu);
    block(dc.gate);
    block(dc.u_star);
    if (!out) throw std::runtime_error("save_dc: write failed for " + path);
}

inline DcDataset load_dc(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("load_dc: cannot open " + path);
    std::string line;
    if (!std::getline(in, line)) throw std::runtime_error("load_dc: missing header");
    Json header;
    try {
        header = Json::parse(line);
    } catch (const std::exception&) {
        throw std::runtime_error("load_dc: malformed header in " + path);
    }
    if (header.value("type", "") != "dc_dataset")
        throw std::runtime_error("load_dc: unexpected file type");
    const auto n = header.at("n").get<Eigen::Index>();
    const auto vdim = header.at("vision_dim").get<Eigen::Index>();
    if (n < 0 || vdim < 0) throw std::runtime_error("load_dc: bad header counts");

    DcDataset dc;
    dc.seed = header.at("seed").get<std::uint64_t>();
    auto block = [&](Eigen::MatrixXd& m, Eigen::Index rows, Eigen::Index cols) {
        m.resize(rows, cols);
        for (Eigen::Index r = 0; r < rows; ++r)
            for (Eigen::Index c = 0; c < cols; ++c) {
                double v = 0.0;
                in.read(reinterpret_cast<char*>(&v), sizeof(v));
                m(r, c) = v;
            }
        if (!in) throw std::runtime_error("load_dc: truncated block in " + path);
    };
    block(dc.vision, n, vdim);
    block(dc.p_tilde, n, 6);
    block(dc.imu, n, 6);
    block(dc.gate, n, 6);
    block(dc.u_star, n, 3);
    char extra = 0;
    if (in.read(&extra, 1)) throw std::runtime_error("load_dc: trailing bytes in " + path);
    return dc;
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct PolicyTrainReport {
    double initial_loss = 0.0;
    double final_loss = 0.0;
    std::vector<double> loss_curve;  // mean batch MSE per epoch
};

inline void write_loss_curve_csv(const PolicyTrainReport& report,
                                 const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("write_loss_curve_csv: cannot open " + path);
    out << "epoch,mse\n";
    out.precision(17);
    for (std::size_t e = 0; e < report.loss_curve.size(); ++e)
        out << e << ',' << report.loss_curve[e] << '\n';
    if (!out) throw std::runtime_error("write_loss_curve_csv: write failed for " + path);
}

/// Minimizes mean squared acceleration error with Adam. Deterministic per
/// cfg.seed; aborts with diagnostics if the loss turns non-finite.
inline PolicyNet train_policy(const DcDataset& dc, int n_gates, const TrainConfig& cfg,
                              const PolicyConfig& net_cfg = {},
                              PolicyTrainReport* report = nullptr) {
    cfg.validate();
    dc.validate();
    if (dc.size() == 0) throw std::invalid_argument("train_policy: empty dataset");
    if (dc.vision.cols() != frame_feature_dim(n_gates))
        throw std::invalid_argument("train_policy: vision width does not match n_gates");

    PolicyNet net(n_gates, net_cfg, derive_seed(cfg.seed, 1));
    const Eigen::MatrixXd state_x = dc.state_features();
    net.vision_norm().fit(dc.vision);
    net.state_norm().fit(state_x);

    const Eigen::Index n = dc.size();
    nn::Adam opt(net.params(), cfg.learning_rate);

    auto full_loss = [&]() {
        double sum = 0.0;
        const Eigen::Index chunk = 8192;  // bounded working set
        for (Eigen::Index at = 0; at < n; at += chunk) {
            const Eigen::Index b = std::min(chunk, n - at);
            const nn::Mat out = net.forward_train(dc.vision.middleRows(at, b),
                                                  state_x.middleRows(at, b));
            sum += (out - dc.u_star.middleRows(at, b)).squaredNorm();
        }
        return sum / static_cast<double>(n);
    };

    PolicyTrainReport rep;
    rep.initial_loss = full_loss();

    std::mt19937_64 shuffle_rng(derive_seed(cfg.seed, 2));
    std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), 0);

    nn::Mat vb, sb, yb;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), shuffle_rng);
        double epoch_sum = 0.0;
        Eigen::Index seen = 0;
        for (Eigen::Index at = 0; at < n; at += cfg.batch_size) {
            const Eigen::Index b = std::min<Eigen::Index>(cfg.batch_size, n - at);
            vb.resize(b, dc.vision.cols());
            sb.resize(b, state_x.cols());
            yb.resize(b, 3);
            for (Eigen::Index i = 0; i < b; ++i) {
                const Eigen::Index src = order[static_cast<std::size_t>(at + i)];
                vb.row(i) = dc.vision.row(src);
                sb.row(i) = state_x.row(src);
                yb.row(i) = dc.u_star.row(src);
            }
            const nn::Mat out = net.forward_train(vb, sb);
            const double batch_loss = (out - yb).squaredNorm() / static_cast<double>(b);
            if (!std::isfinite(batch_loss))
                throw std::runtime_error("train_policy: non-finite loss at epoch " +
                                         std::to_string(epoch) + ", sample offset " +
                                         std::to_string(at));
            epoch_sum += batch_loss * static_cast<double>(b);
            seen += b;
            opt.zero_grad();
            net.backward((out - yb) * (2.0 / static_cast<double>(b)));
            opt.step();
        }
        rep.loss_curve.push_back(epoch_sum / static_cast<double>(seen));
    }

    rep.final_loss = full_loss();
    if (report) *report = rep;
    return net;
}

// ---------------------------------------------------------------------------
// DAGGER
// ---------------------------------------------------------------------------

struct DaggerReport {
    std::vector<Eigen::Index> dataset_sizes;  // aggregate size after each iteration
    std::vector<PolicyTrainReport> train_reports;
};

/// One DAGGER step: roll out with the beta-mixed controller, relabel with the
/// expert, grow the aggregate in place, and retrain from scratch on the union.
/// train_cfg.seed is used as given; callers vary it per iteration.
inline PolicyNet dagger_iterate(const PolicyNet& policy, DcDataset& aggregate,
                                const Track& track, const SceneRenderer& renderer,
                                Perceiver& perceiver, const QuantileModel& quantiles,
                                double beta, const DcConfig& dc_cfg,
                                const TrainConfig& train_cfg, std::uint64_t seed,
                                PolicyTrainReport* report = nullptr) {
    aggregate.append(collect_dc_mixed(track, renderer, perceiver, quantiles, &policy,
                                      beta, dc_cfg, seed));
    return train_policy(aggregate, static_cast<int>(track.gates.size()), train_cfg,
                        policy.config(), report);
}

/// Full DAGGER loop: iteration k rolls out with expert probability
/// beta_schedule[k] (iteration 0 must be pure expert) and retrains on the
/// aggregate after each collection.
inline PolicyNet dagger_train(const Track& track, const SceneRenderer& renderer,
                              Perceiver& perceiver, const QuantileModel& quantiles,
                              const DcConfig& dc_cfg, const TrainConfig& train_cfg,
                              const PolicyConfig& net_cfg, std::uint64_t seed,
                              DcDataset* aggregate_out = nullptr,
                              DaggerReport* report = nullptr) {
    train_cfg.validate();
    const auto& betas = train_cfg.beta_schedule;
    if (betas.empty() || betas.front() < 1.0)
        throw std::invalid_argument("dagger_train: first beta must be 1.0");

    DaggerReport rep;
    DcDataset aggregate =
        collect_dc(track, renderer, quantiles, dc_cfg, derive_seed(seed, 100));
    TrainConfig tc = train_cfg;
    tc.seed = derive_seed(seed, 200);
    PolicyTrainReport train_rep;
    PolicyNet policy = train_policy(aggregate, static_cast<int>(track.gates.size()), tc,
                                    net_cfg, &train_rep);
    rep.dataset_sizes.push_back(aggregate.size());
    rep.train_reports.push_back(train_rep);

    for (int k = 1; k < train_cfg.dagger_iterations; ++k) {
        tc.seed = derive_seed(seed, 200 + static_cast<std::uint64_t>(k));
        policy = dagger_iterate(policy, aggregate, track, renderer, perceiver, quantiles,
                                betas[static_cast<std::size_t>(k)], dc_cfg, tc,
                                derive_seed(seed, 100 + static_cast<std::uint64_t>(k)),
                                &train_rep);
        rep.dataset_sizes.push_back(aggregate.size());
        rep.train_reports.push_back(train_rep);
    }
    if (aggregate_out) *aggregate_out = std::move(aggregate);
    if (report) *report = rep;
    return policy;
}

}  // namespace falcon
