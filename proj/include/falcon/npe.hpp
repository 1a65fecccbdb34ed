#pragma once

// Learned pose-estimator backend: an MLP regressor from rendered gate
// keypoints to (x, y, z, sin yaw, cos yaw), trained on poses sampled across
// the workspace. It is the slower, self-contained alternative to the
// calibrated noise oracle; both produce PoseEstimate measurements for the
// same Kalman filter.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "falcon/geometry.hpp"
#include "falcon/nn.hpp"
#include "falcon/perception.hpp"
#include "falcon/seeding.hpp"

namespace falcon {

inline int frame_feature_dim(int n_gates) { return n_gates * 24; }

/// Flattens a frame into the regressor's input layout: per gate, 8 keypoint
/// pairs scaled to image fractions (sentinel -1 passes through for invisible
/// points) followed by the 8 visibility flags.
inline Eigen::RowVectorXd frame_features(const FrameObservation& frame,
                                         const CameraModel& cam) {
    Eigen::RowVectorXd f(frame_feature_dim(static_cast<int>(frame.size())));
    Eigen::Index i = 0;
    for (const auto& gate : frame) {
        if (gate.pixels.size() != 8 || gate.visible.size() != 8)
            throw std::invalid_argument("frame_features: expected 8 keypoints per gate");
        for (int k = 0; k < 8; ++k) {
            if (gate.visible[k]) {
                f(i++) = gate.pixels[k].x() / cam.width;
                f(i++) = gate.pixels[k].y() / cam.height;
            } else {
                f(i++) = -1.0;
                f(i++) = -1.0;
            }
        }
        for (int k = 0; k < 8; ++k) f(i++) = gate.visible[k] ? 1.0 : 0.0;
    }
    return f;
}

/// Pose regression dataset: rows of frame features against (x, y, z,
/// sin yaw, cos yaw) targets.
struct NpeDataset {
    nn::Mat x;
    nn::Mat y;
    std::vector<Pose6> poses;

    Eigen::Index size() const { return x.rows(); }
};

/// Samples camera poses across the workspace and keeps those whose rendered
/// frame shows at least `min_keypoints` gate keypoints. Yaw is drawn mostly
/// as a perturbed bearing toward a random gate -- matching flight-like
/// viewpoints -- with a uniform remainder for coverage.
inline NpeDataset make_npe_dataset(const Track& track, const GateFeatureRenderer& renderer,
                                   int n_samples, std::uint64_t seed, int min_keypoints = 4) {
    if (n_samples < 1) throw std::invalid_argument("make_npe_dataset: n_samples must be >= 1");
    if (track.gates.empty()) throw std::invalid_argument("make_npe_dataset: empty track");

    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> ux(track.workspace.min.x(), track.workspace.max.x());
    std::uniform_real_distribution<double> uy(track.workspace.min.y(), track.workspace.max.y());
    std::uniform_real_distribution<double> uz(track.workspace.min.z(), track.workspace.max.z());
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::uniform_real_distribution<double> uyaw(-kPi, kPi);
    std::uniform_real_distribution<double> ujit(-0.7, 0.7);
    std::uniform_int_distribution<std::size_t> ugate(0, track.gates.size() - 1);

    const int dim = frame_feature_dim(static_cast<int>(track.gates.size()));
    NpeDataset ds;
    ds.x.resize(n_samples, dim);
    ds.y.resize(n_samples, 5);
    ds.poses.reserve(n_samples);

    long attempts = 0;
    const long max_attempts = 200L * n_samples;
    int kept = 0;
    while (kept < n_samples) {
        if (++attempts > max_attempts)
            throw std::runtime_error("make_npe_dataset: too few visible poses in workspace");
        Pose6 pose{ux(rng), uy(rng), uz(rng), 0.0, 0.0, 0.0};
        if (unit(rng) < 0.7) {
            const Gate& g = track.gates[ugate(rng)];
            pose.yaw = wrap_angle(std::atan2(g.center.y - pose.y, g.center.x - pose.x) +
                                  ujit(rng));
        } else {
            pose.yaw = uyaw(rng);
        }
        const FrameObservation frame = renderer.render(pose);
        if (visible_keypoints(frame) < min_keypoints) continue;
        ds.x.row(kept) = frame_features(frame, renderer.camera());
        ds.y.row(kept) << pose.x, pose.y, pose.z, std::sin(pose.yaw), std::cos(pose.yaw);
        ds.poses.push_back(pose);
        ++kept;
    }
    return ds;
}

/// MLP pose regressor over per-gate feature blocks. One trunk is shared by
/// all gate slots: each 24-feature block is regressed to a pose *relative to
/// its gate* plus a confidence logit, the relative poses are rotated into the
/// world frame through the (fixed) gate poses, and the candidates are blended
/// with a softmax over the logits. Sharing the trunk means every visible gate
/// in every frame is a training example for the same relative-pose map, which
/// is also far smoother than the direct pixels-to-world map. The yaw
/// composition assumes upright gates (roll = pitch = 0, true for all builtin
/// tracks). Held-out residuals are kept to calibrate the filter's measurement
/// covariance.
class NpeRegressor {
public:
    NpeRegressor() = default;

    NpeRegressor(const Track& track, std::uint64_t seed) {
        std::mt19937_64 rng(seed);
        trunk_ = nn::Mlp("npe", kTrunkDims, rng);
        input_dim_ = frame_feature_dim(static_cast<int>(track.gates.size()));
        for (const Gate& g : track.gates) {
            Eigen::Matrix<double, 5, 5> m = Eigen::Matrix<double, 5, 5>::Zero();
            m.block<3, 3>(0, 0) = g.center.rotation();
            const double s = std::sin(g.center.yaw);
            const double c = std::cos(g.center.yaw);
            m(3, 3) = c;
            m(3, 4) = s;
            m(4, 3) = -s;
            m(4, 4) = c;
            gate_m_.push_back(m);
            Eigen::Matrix<double, 1, 5> t;
            t << g.center.x, g.center.y, g.center.z, 0.0, 0.0;
            gate_t_.push_back(t);
        }
    }

    int input_dim() const { return input_dim_; }
    int n_gates() const { return static_cast<int>(gate_m_.size()); }
    nn::Mlp& trunk() { return trunk_; }
    const nn::Mlp& trunk() const { return trunk_; }
    std::vector<nn::Param*> params() { return trunk_.params(); }
    nn::Standardizer& x_norm() { return x_norm_; }
    nn::Standardizer& y_norm() { return y_norm_; }

    /// Reshapes N x (24 G) frame features into the gate-stacked (G N) x 24
    /// layout the shared trunk consumes (gate-major blocks of rows).
    nn::Mat stack_gates(const nn::Mat& x) const {
        const Eigen::Index n = x.rows();
        const int g_count = n_gates();
        nn::Mat s(n * g_count, 24);
        for (int g = 0; g < g_count; ++g)
            s.middleRows(g * n, n) = x.middleCols(24 * g, 24);
        return s;
    }

    /// World-frame prediction (x, y, z, sin yaw, cos yaw), rows aligned
    /// with `x`.
    nn::Mat predict(const nn::Mat& x) const {
        const nn::Mat z = trunk_.forward(x_norm_.transform(stack_gates(x)));
        return compose(z, x.rows(), nullptr, nullptr);
    }

    /// Training-mode forward: same as predict but caches trunk activations
    /// and the blend terms for backward().
    nn::Mat forward_train(const nn::Mat& x) {
        const nn::Mat z = trunk_.forward_train(x_norm_.transform(stack_gates(x)));
        return compose(z, x.rows(), &cand_, &w_);
    }

    /// Backpropagates a world-frame output gradient through the blend and
    /// the shared trunk, accumulating parameter gradients.
    void backward(const nn::Mat& dout) {
        const Eigen::Index n = dout.rows();
        const int g_count = n_gates();
        // Softmax over gate logits: dl = w (dw - sum_g w_g dw_g).
        nn::Mat dw(n, g_count);
        for (int g = 0; g < g_count; ++g)
            dw.col(g) = (dout.array() * cand_[g].array()).rowwise().sum();
        const Eigen::VectorXd mix = (dw.array() * w_.array()).rowwise().sum();
        const nn::Mat dlogit = w_.array() * (dw.colwise() - mix).array();

        nn::Mat dz(n * g_count, 6);
        for (int g = 0; g < g_count; ++g) {
            auto rows = dz.middleRows(g * n, n);
            rows.leftCols(5) = w_.col(g).asDiagonal() * dout * gate_m_[g];
            rows.col(5) = dlogit.col(g);
        }
        trunk_.backward(dz);
    }

    /// Decodes one feature row into a pose; the sin/cos pair must be
    /// decodable (non-degenerate norm).
    Pose6 predict_pose(const Eigen::RowVectorXd& features) const {
        const nn::Mat out = predict(features);
        Pose6 p{out(0, 0), out(0, 1), out(0, 2), 0.0, 0.0, 0.0};
        p.yaw = std::atan2(out(0, 3), out(0, 4));
        return p;
    }

    /// Full inference contract: invalid when too few keypoints are visible
    /// or the yaw encoding collapses.
    PoseEstimate infer(const FrameObservation& frame, const CameraModel& cam,
                       int min_keypoints = 4) const {
        PoseEstimate e;
        if (visible_keypoints(frame) < min_keypoints) return e;
        const nn::Mat out = predict(frame_features(frame, cam));
        if (!out.allFinite() || std::hypot(out(0, 3), out(0, 4)) < 1e-6) return e;
        e.pose = Pose6{out(0, 0), out(0, 1), out(0, 2), 0.0, 0.0,
                       std::atan2(out(0, 3), out(0, 4))};
        e.valid = true;
        return e;
    }

    double residual_sigma_pos = 0.0;  // held-out 3D position RMSE, m
    double residual_sigma_yaw = 0.0;  // held-out wrapped yaw RMSE, rad

    nn::Json to_json() const {
        nn::Json layers = nn::Json::array();
        for (const auto& l : trunk_.layers()) {
            layers.push_back(nn::param_to_json(l.w));
            layers.push_back(nn::param_to_json(l.b));
        }
        nn::Json compose = nn::Json::array();
        nn::Json offset = nn::Json::array();
        for (int g = 0; g < n_gates(); ++g) {
            nn::Json m = nn::Json::array();
            for (int r = 0; r < 5; ++r)
                for (int c = 0; c < 5; ++c) m.push_back(gate_m_[g](r, c));
            compose.push_back(std::move(m));
            nn::Json t = nn::Json::array();
            for (int c = 0; c < 5; ++c) t.push_back(gate_t_[g](0, c));
            offset.push_back(std::move(t));
        }
        return nn::Json{{"type", "npe_regressor"},
                        {"input_dim", input_dim_},
                        {"activation", "relu"},
                        {"residual_sigma_pos", residual_sigma_pos},
                        {"residual_sigma_yaw", residual_sigma_yaw},
                        {"gate_compose", std::move(compose)},
                        {"gate_offset", std::move(offset)},
                        {"x_norm", nn::standardizer_to_json(x_norm_)},
                        {"y_norm", nn::standardizer_to_json(y_norm_)},
                        {"layers", std::move(layers)}};
    }

    static NpeRegressor from_json(const nn::Json& j) {
        if (j.at("type").get<std::string>() != "npe_regressor")
            throw std::invalid_argument("NpeRegressor::from_json: wrong artifact type");
        NpeRegressor r;
        std::mt19937_64 rng(0);
        r.trunk_ = nn::Mlp("npe", kTrunkDims, rng);
        r.input_dim_ = j.at("input_dim").get<int>();
        const nn::Json& compose = j.at("gate_compose");
        const nn::Json& offset = j.at("gate_offset");
        if (compose.size() != offset.size())
            throw std::invalid_argument("NpeRegressor::from_json: gate table mismatch");
        for (std::size_t g = 0; g < compose.size(); ++g) {
            Eigen::Matrix<double, 5, 5> m;
            for (int r = 0; r < 5; ++r)
                for (int c = 0; c < 5; ++c) m(r, c) = compose[g][5 * r + c].get<double>();
            r.gate_m_.push_back(m);
            Eigen::Matrix<double, 1, 5> t;
            for (int c = 0; c < 5; ++c) t(0, c) = offset[g][c].get<double>();
            r.gate_t_.push_back(t);
        }
        auto params = r.trunk_.params();
        const nn::Json& layers = j.at("layers");
        if (layers.size() != params.size())
            throw std::invalid_argument("NpeRegressor::from_json: layer count mismatch");
        for (std::size_t i = 0; i < params.size(); ++i)
            nn::param_from_json(layers[i], *params[i]);
        r.x_norm_ = nn::standardizer_from_json(j.at("x_norm"));
        r.y_norm_ = nn::standardizer_from_json(j.at("y_norm"));
        r.residual_sigma_pos = j.at("residual_sigma_pos").get<double>();
        r.residual_sigma_yaw = j.at("residual_sigma_yaw").get<double>();
        return r;
    }

private:
    static constexpr std::array<int, 4> kTrunkDimsArray{24, 256, 256, 6};
    inline static const std::vector<int> kTrunkDims{kTrunkDimsArray.begin(),
                                                    kTrunkDimsArray.end()};

    /// Blends per-gate candidates from stacked trunk outputs `z`
    /// ((G N) x 6): candidate g is the relative pose rotated through gate g,
    /// weights are a softmax over the logits in column 5. Optionally caches
    /// the candidates and weights for backward().
    nn::Mat compose(const nn::Mat& z, Eigen::Index n, std::vector<nn::Mat>* cand_out,
                    nn::Mat* w_out) const {
        const int g_count = n_gates();
        nn::Mat logits(n, g_count);
        std::vector<nn::Mat> cand(g_count);
        for (int g = 0; g < g_count; ++g) {
            const auto rows = z.middleRows(g * n, n);
            cand[g] = (rows.leftCols(5) * gate_m_[g].transpose()).rowwise() + gate_t_[g];
            logits.col(g) = rows.col(5);
        }
        const Eigen::VectorXd row_max = logits.rowwise().maxCoeff();
        nn::Mat w = (logits.colwise() - row_max).array().exp();
        const Eigen::VectorXd norm = w.rowwise().sum();
        w.array().colwise() /= norm.array();

        nn::Mat out = nn::Mat::Zero(n, 5);
        for (int g = 0; g < g_count; ++g) out += w.col(g).asDiagonal() * cand[g];
        if (cand_out) *cand_out = std::move(cand);
        if (w_out) *w_out = w;
        return out;
    }

    nn::Mlp trunk_;
    std::vector<Eigen::Matrix<double, 5, 5>> gate_m_;
    std::vector<Eigen::Matrix<double, 1, 5>> gate_t_;
    nn::Standardizer x_norm_, y_norm_;
    int input_dim_ = 0;
    // Training caches (forward_train / backward).
    std::vector<nn::Mat> cand_;
    nn::Mat w_;
};

struct NpeTrainReport {
    std::vector<double> loss_curve;  // best-so-far training MSE per epoch
    double holdout_rmse_pos = 0.0;
    double holdout_rmse_yaw = 0.0;
    int lr_halvings = 0;
};

/// Trains the regressor with Adam on the standardized-target MSE. The
/// reported loss curve is non-increasing by construction: it tracks the best
/// snapshot seen so far, which is also what the returned regressor uses, and
/// stretches of non-improving epochs halve the learning rate. A NaN loss
/// aborts with the offending epoch in the message.
inline NpeRegressor train_npe_regressor(const NpeDataset& dataset, const Track& track,
                                        const TrainConfig& hyper,
                                        NpeTrainReport* report = nullptr) {
    hyper.validate();
    if (dataset.size() < 10)
        throw std::invalid_argument("train_npe_regressor: dataset too small");
    if (dataset.x.cols() != frame_feature_dim(static_cast<int>(track.gates.size())))
        throw std::invalid_argument("train_npe_regressor: dataset does not match track");

    // Deterministic 80/20 split.
    std::mt19937_64 rng(derive_seed(hyper.seed, 0));
    std::vector<Eigen::Index> idx(dataset.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::shuffle(idx.begin(), idx.end(), rng);
    const Eigen::Index n_hold = std::max<Eigen::Index>(1, dataset.size() / 5);
    const Eigen::Index n_train = dataset.size() - n_hold;

    nn::Mat xt(n_train, dataset.x.cols()), yt(n_train, 5);
    nn::Mat xh(n_hold, dataset.x.cols()), yh(n_hold, 5);
    for (Eigen::Index i = 0; i < n_train; ++i) {
        xt.row(i) = dataset.x.row(idx[i]);
        yt.row(i) = dataset.y.row(idx[i]);
    }
    for (Eigen::Index i = 0; i < n_hold; ++i) {
        xh.row(i) = dataset.x.row(idx[n_train + i]);
        yh.row(i) = dataset.y.row(idx[n_train + i]);
    }

    NpeRegressor reg(track, derive_seed(hyper.seed, 1));
    reg.x_norm().fit(reg.stack_gates(xt));
    reg.y_norm().fit(yt);
    // Per-channel inverse-variance loss weighting, floored so a degenerate
    // dataset (a near-constant target channel) cannot blow the gradient up.
    const Eigen::RowVectorXd y_sigma = reg.y_norm().std_dev().cwiseMax(1e-2);

    auto params = reg.params();
    nn::Adam opt(params, hyper.learning_rate);
    std::mt19937_64 batch_rng(derive_seed(hyper.seed, 2));

    auto full_loss = [&]() {
        nn::Mat d = reg.predict(xt) - yt;
        d.array().rowwise() /= y_sigma.array();
        return d.squaredNorm() / static_cast<double>(n_train);
    };

    double best = full_loss();
    std::vector<nn::Mat> best_params = nn::snapshot_params(params);
    NpeTrainReport rep;

    std::vector<Eigen::Index> order(n_train);
    std::iota(order.begin(), order.end(), 0);
    int stall = 0;
    for (int epoch = 0; epoch < hyper.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), batch_rng);
        for (Eigen::Index start = 0; start < n_train; start += hyper.batch_size) {
            const Eigen::Index b = std::min<Eigen::Index>(hyper.batch_size, n_train - start);
            nn::Mat xb(b, xt.cols()), yb(b, 5);
            for (Eigen::Index i = 0; i < b; ++i) {
                xb.row(i) = xt.row(order[start + i]);
                yb.row(i) = yt.row(order[start + i]);
            }
            opt.zero_grad();
            const nn::Mat out = reg.forward_train(xb);
            // d/d(out) of mean ||(out - y) ./ sigma||^2.
            nn::Mat grad = (out - yb) * (2.0 / static_cast<double>(b));
            grad.array().rowwise() /= y_sigma.array().square();
            reg.backward(grad);
            opt.step();
        }
        const double loss = full_loss();
        if (!std::isfinite(loss))
            throw std::runtime_error("train_npe_regressor: loss diverged (NaN) at epoch " +
                                     std::to_string(epoch));
        // The reported curve tracks the best snapshot, which is what the
        // returned regressor uses; epochs that regress cost patience and
        // eventually halve the learning rate, they are never kept.
        if (loss < best) {
            best = loss;
            best_params = nn::snapshot_params(params);
            stall = 0;
        } else if (++stall >= 3) {
            opt.set_learning_rate(opt.learning_rate() * 0.5);
            ++rep.lr_halvings;
            stall = 0;
        }
        rep.loss_curve.push_back(best);
    }
    nn::restore_params(best_params, params);

    // Held-out residuals calibrate the filter's measurement covariance.
    const nn::Mat pred = reg.predict(xh);
    double pos2 = 0.0, yaw2 = 0.0;
    for (Eigen::Index i = 0; i < n_hold; ++i) {
        pos2 += (pred.row(i).head<3>() - yh.row(i).head<3>()).squaredNorm();
        const double yaw_p = std::atan2(pred(i, 3), pred(i, 4));
        const double yaw_t = std::atan2(yh(i, 3), yh(i, 4));
        yaw2 += std::pow(wrap_angle(yaw_p - yaw_t), 2);
    }
    reg.residual_sigma_pos = std::sqrt(pos2 / n_hold);
    reg.residual_sigma_yaw = std::sqrt(yaw2 / n_hold);
    rep.holdout_rmse_pos = reg.residual_sigma_pos;
    rep.holdout_rmse_yaw = reg.residual_sigma_yaw;
    if (report) *report = rep;
    return reg;
}

/// Learned-estimator + Kalman filter perception stack. Deterministic: the
/// regressor has no sampling step, so the seed only flows to nothing and
/// repeated runs are identical.
class RegressorPerceiver final : public Perceiver {
public:
    RegressorPerceiver(NpeRegressor regressor, const CameraModel& cam,
                       const KalmanConfig& filter_cfg, const Box3& workspace,
                       int min_keypoints = 4)
        : reg_(std::move(regressor)), cam_(cam), filter_cfg_(filter_cfg),
          valid_bounds_(workspace.scaled(2.0)), min_keypoints_(min_keypoints) {
        filter_cfg_.validate();
    }

    void reset(const QuadState& initial_truth, std::uint64_t) override {
        belief_ = kalman_init(initial_truth.position, initial_truth.yaw, filter_cfg_);
        raw_ = PoseEstimate{};
    }

    PoseEstimate perceive(const FrameObservation& frame, const ImuSample& imu,
                          const QuadState&, double dt) override {
        belief_ = kalman_predict(belief_, imu, dt, filter_cfg_);
        raw_ = reg_.infer(frame, cam_, min_keypoints_);
        belief_ = kalman_update(belief_, raw_, filter_cfg_).belief;

        PoseEstimate est = belief_.estimate();
        est.valid = est.valid && valid_bounds_.contains(est.pose.position());
        return est;
    }

    Eigen::Vector3d velocity() const override { return belief_.velocity(); }

    const PoseEstimate& last_measurement() const { return raw_; }
    const KalmanBelief& belief() const { return belief_; }
    const NpeRegressor& regressor() const { return reg_; }

private:
    NpeRegressor reg_;
    CameraModel cam_;
    KalmanConfig filter_cfg_;
    Box3 valid_bounds_;
    int min_keypoints_;
    KalmanBelief belief_;
    PoseEstimate raw_;
};

/// Filter calibration against a trained regressor's residual error level.
inline KalmanConfig kalman_config_for(const NpeRegressor& reg, KalmanConfig base = {}) {
    base.meas_sigma_pos = reg.residual_sigma_pos / std::sqrt(3.0);
    base.meas_sigma_yaw = reg.residual_sigma_yaw;
    return base;
}

}  // namespace falcon
