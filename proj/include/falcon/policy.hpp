#pragma once

// Multi-modal gate-crossing policy. A vision branch embeds the rendered
// keypoint frame and a state branch embeds (perceived pose, IMU, next-gate
// pose); two-token multi-head self-attention fuses the embeddings, and an
// output MLP over the residual-concatenated tokens emits a 3D acceleration.
// Yaw is handled outside the network by the proportional controller.

#include <array>
#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <json.hpp>

#include "falcon/control.hpp"
#include "falcon/dynamics.hpp"
#include "falcon/episode.hpp"
#include "falcon/geometry.hpp"
#include "falcon/nn.hpp"
#include "falcon/npe.hpp"
#include "falcon/seeding.hpp"
#include "falcon/serialize.hpp"

namespace falcon {

inline constexpr int kPolicyStateDim = 16;  // pose (5) + IMU (6) + gate (5)

/// State-branch features: perceived pose and gate pose as (x, y, z, sin yaw,
/// cos yaw), IMU as raw (accel, angular rate).
inline Eigen::RowVectorXd policy_state_features(const Pose6& p_tilde, const ImuSample& z,
                                                const Pose6& gate) {
    Eigen::RowVectorXd f(kPolicyStateDim);
    f << p_tilde.x, p_tilde.y, p_tilde.z, std::sin(p_tilde.yaw), std::cos(p_tilde.yaw),
        z.lin_accel.x(), z.lin_accel.y(), z.lin_accel.z(), z.ang_rate.x(), z.ang_rate.y(),
        z.ang_rate.z(), gate.x, gate.y, gate.z, std::sin(gate.yaw), std::cos(gate.yaw);
    return f;
}

struct PolicyConfig {
    int d_model = 256;
    int heads = 4;
    int head_hidden = 256;
    double a_max = DynamicsLimits{}.a_max;  // inference output clamp
    CameraModel camera;                     // scales keypoints to image fractions

    void validate() const {
        if (d_model < 1 || heads < 1 || d_model % heads != 0)
            throw std::invalid_argument("PolicyConfig: heads must divide d_model");
        if (head_hidden < 1)
            throw std::invalid_argument("PolicyConfig: head_hidden must be >= 1");
        if (!(a_max > 0.0)) throw std::invalid_argument("PolicyConfig: a_max must be > 0");
        camera.validate();
    }
};

/// Per-sample attention probabilities: one row per input row, heads x (2x2)
/// matrices flattened as [h0 a00 a01 a10 a11, h1 ...] with token 0 = vision.
struct AttentionDiagnostics {
    int heads = 0;
    nn::Mat attention;

    /// Mean weight assigned to the vision token, averaged over heads and
    /// both query tokens, for input row i.
    double vision_mass(Eigen::Index i) const {
        if (heads == 0 || i < 0 || i >= attention.rows())
            throw std::out_of_range("AttentionDiagnostics: bad row");
        double mass = 0.0;
        for (int h = 0; h < heads; ++h)
            mass += 0.5 * (attention(i, 4 * h) + attention(i, 4 * h + 2));
        return mass / heads;
    }
};

class PolicyNet {
public:
    PolicyNet() = default;

    PolicyNet(int n_gates, const PolicyConfig& cfg, std::uint64_t seed)
        : n_gates_(n_gates), cfg_(cfg) {
        cfg.validate();
        if (n_gates < 1) throw std::invalid_argument("PolicyNet: n_gates must be >= 1");
        std::mt19937_64 rng(derive_seed(seed, 0));
        const int v = frame_feature_dim(n_gates);
        vision_ = nn::Mlp("vision", {v, cfg.d_model, cfg.d_model}, rng);
        state_ = nn::Mlp("state", {kPolicyStateDim, cfg.d_model, cfg.d_model}, rng);
        attn_ = nn::SelfAttention2("attn", cfg.d_model, cfg.heads, rng);
        head_ = nn::Mlp("head", {2 * cfg.d_model, cfg.head_hidden, 3}, rng);
        // Identity normalization until a trainer fits the real statistics.
        vision_norm_.set(Eigen::RowVectorXd::Zero(v), Eigen::RowVectorXd::Ones(v));
        state_norm_.set(Eigen::RowVectorXd::Zero(kPolicyStateDim),
                        Eigen::RowVectorXd::Ones(kPolicyStateDim));
    }

    int n_gates() const { return n_gates_; }
    int vision_dim() const { return frame_feature_dim(n_gates_); }
    const PolicyConfig& config() const { return cfg_; }
    nn::Standardizer& vision_norm() { return vision_norm_; }
    nn::Standardizer& state_norm() { return state_norm_; }

    /// Inference pass: standardized branches, attention fusion with residual
    /// paths, head, and per-row norm clamp to a_max. Throws on non-finite
    /// activations, naming the stage.
    nn::Mat forward(const nn::Mat& vision_x, const nn::Mat& state_x,
                    AttentionDiagnostics* diag = nullptr) const {
        const nn::Mat tv = vision_.forward(vision_norm_.transform(vision_x));
        check_finite(tv, "vision embedding");
        const nn::Mat ts = state_.forward(state_norm_.transform(state_x));
        check_finite(ts, "state embedding");

        nn::Mat attn_probs;
        const std::array<nn::Mat, 2> fused =
            attn_.forward({tv, ts}, diag ? &attn_probs : nullptr);
        check_finite(fused[0], "attention");
        if (diag) {
            diag->heads = cfg_.heads;
            diag->attention = std::move(attn_probs);
        }

        nn::Mat cat(tv.rows(), 2 * cfg_.d_model);
        cat.leftCols(cfg_.d_model) = tv + fused[0];
        cat.rightCols(cfg_.d_model) = ts + fused[1];
        nn::Mat out = head_.forward(cat);
        check_finite(out, "head");
        for (Eigen::Index i = 0; i < out.rows(); ++i) {
            const double norm = out.row(i).norm();
            if (norm > cfg_.a_max) out.row(i) *= cfg_.a_max / norm;
        }
        return out;
    }

    /// Training pass: same computation without the output clamp.
    nn::Mat forward_train(const nn::Mat& vision_x, const nn::Mat& state_x) {
        const nn::Mat tv = vision_.forward_train(vision_norm_.transform(vision_x));
        const nn::Mat ts = state_.forward_train(state_norm_.transform(state_x));
        fused_ = attn_.forward_train({tv, ts});
        nn::Mat cat(tv.rows(), 2 * cfg_.d_model);
        cat.leftCols(cfg_.d_model) = tv + fused_[0];
        cat.rightCols(cfg_.d_model) = ts + fused_[1];
        tv_ = tv;
        ts_ = ts;
        return head_.forward_train(cat);
    }

    void backward(const nn::Mat& dout) {
        const nn::Mat dcat = head_.backward(dout);
        const nn::Mat dhv = dcat.leftCols(cfg_.d_model);
        const nn::Mat dhs = dcat.rightCols(cfg_.d_model);
        // Each embedding feeds both the attention input and the residual sum.
        const std::array<nn::Mat, 2> dattn = attn_.backward({dhv, dhs});
        vision_.backward(dhv + dattn[0]);
        state_.backward(dhs + dattn[1]);
    }

    std::vector<nn::Param*> params() {
        std::vector<nn::Param*> out;
        for (auto* p : vision_.params()) out.push_back(p);
        for (auto* p : state_.params()) out.push_back(p);
        for (auto* p : attn_.params()) out.push_back(p);
        for (auto* p : head_.params()) out.push_back(p);
        return out;
    }

    /// Single-sample convenience: featurize, run, clamp; yaw_rate stays 0
    /// for the caller's proportional controller to fill in.
    ControlInput act(const FrameObservation& frame, const Pose6& p_tilde,
                     const ImuSample& z, const Pose6& gate,
                     AttentionDiagnostics* diag = nullptr) const {
        const nn::Mat out = forward(frame_features(frame, cfg_.camera),
                                    policy_state_features(p_tilde, z, gate), diag);
        ControlInput u;
        u.accel = out.row(0).transpose();
        return u;
    }

    Json to_json() const {
        Json j;
        j["type"] = "policy_net";
        j["n_gates"] = n_gates_;
        j["d_model"] = cfg_.d_model;
        j["heads"] = cfg_.heads;
        j["head_hidden"] = cfg_.head_hidden;
        j["a_max"] = cfg_.a_max;
        j["camera"] = falcon::to_json(cfg_.camera);
        Json params = Json::array();
        for (const auto* p : const_cast<PolicyNet*>(this)->params())
            params.push_back(nn::param_to_json(*p));
        j["params"] = std::move(params);
        j["vision_norm"] = nn::standardizer_to_json(vision_norm_);
        j["state_norm"] = nn::standardizer_to_json(state_norm_);
        return j;
    }

    static PolicyNet from_json(const Json& j) {
        if (j.value("type", "") != "policy_net")
            throw std::runtime_error("PolicyNet: unexpected serialized type");
        PolicyConfig cfg;
        cfg.d_model = j.at("d_model").get<int>();
        cfg.heads = j.at("heads").get<int>();
        cfg.head_hidden = j.at("head_hidden").get<int>();
        cfg.a_max = j.at("a_max").get<double>();
        cfg.camera = camera_from_json(j.at("camera"));
        PolicyNet net(j.at("n_gates").get<int>(), cfg, 0);

        const Json& params = j.at("params");
        auto live = net.params();
        if (!params.is_array() || params.size() != live.size())
            throw std::runtime_error("PolicyNet: wrong parameter count");
        for (std::size_t i = 0; i < live.size(); ++i) {
            const std::string expect = live[i]->name;
            nn::param_from_json(params[i], *live[i]);
            if (live[i]->name != expect)
                throw std::runtime_error("PolicyNet: parameter order mismatch at " + expect);
        }
        net.vision_norm_ = nn::standardizer_from_json(j.at("vision_norm"));
        net.state_norm_ = nn::standardizer_from_json(j.at("state_norm"));
        return net;
    }

private:
    static void check_finite(const nn::Mat& m, const char* stage) {
        if (!m.allFinite())
            throw std::runtime_error(std::string("PolicyNet: non-finite activation in ") +
                                     stage);
    }

    int n_gates_ = 0;
    PolicyConfig cfg_;
    nn::Mlp vision_;
    nn::Mlp state_;
    nn::SelfAttention2 attn_;
    nn::Mlp head_;
    nn::Standardizer vision_norm_;
    nn::Standardizer state_norm_;

    // forward_train caches for the residual backward pass
    nn::Mat tv_, ts_;
    std::array<nn::Mat, 2> fused_;
};

/// Multi-modal controller: policy acceleration from (frame, estimate, IMU,
/// next gate), yaw from the proportional law on the believed pose.
inline ControllerFn make_mm_controller(const PolicyNet& policy,
                                       const ExpertConfig& cfg = {}) {
    cfg.validate();
    return [&policy, cfg](const StepContext& ctx) {
        const Gate& gate = ctx.track.gates[ctx.gate_index % ctx.track.gates.size()];
        ControlInput u =
            policy.act(ctx.frame, ctx.estimate.pose, ctx.imu, gate.center);
        const double yaw_des = expert_yaw_target(ctx.estimate.pose.position(), gate, cfg);
        u.yaw_rate = yaw_control(ctx.estimate.pose.yaw, yaw_des, cfg);
        return u;
    };
}

}  // namespace falcon
