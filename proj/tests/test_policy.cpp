#include "falcon/policy.hpp"

#include <cmath>
#include <functional>

#include <gtest/gtest.h>

#include "oracle_utils.hpp"

namespace falcon {
namespace {

using falcon::testing::make_rng;

nn::Mat random_mat(std::mt19937_64& rng, int rows, int cols, double scale = 1.0) {
    std::normal_distribution<double> gauss(0.0, scale);
    nn::Mat m(rows, cols);
    for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c) m(r, c) = gauss(rng);
    return m;
}

// Floor at 1e-5: key-bias gradients are exactly zero (a shared key offset
// cancels in the softmax), where central differences return only rounding
// noise (~1e-10) and a pure ratio would be meaningless.
double rel_err(double a, double b) {
    return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-5});
}

/// Small net on a one-gate track: 24 vision features, every parameter cheap
/// enough to sweep exhaustively.
PolicyConfig tiny_config() {
    PolicyConfig cfg;
    cfg.d_model = 8;
    cfg.heads = 2;
    cfg.head_hidden = 8;
    return cfg;
}

TEST(PolicyStateFeatures, PacksPoseImuAndGatePose) {
    Pose6 p{1.0, -2.0, 3.0, 0.0, 0.0, kPi / 2.0};
    ImuSample z;
    z.lin_accel = Eigen::Vector3d(0.1, 0.2, 0.3);
    z.ang_rate = Eigen::Vector3d(-0.1, -0.2, -0.3);
    Pose6 g{4.0, 5.0, 6.0, 0.0, 0.0, kPi};

    const Eigen::RowVectorXd f = policy_state_features(p, z, g);
    ASSERT_EQ(f.size(), kPolicyStateDim);
    EXPECT_EQ(f(0), 1.0);
    EXPECT_EQ(f(1), -2.0);
    EXPECT_EQ(f(2), 3.0);
    EXPECT_NEAR(f(3), 1.0, 1e-15);   // sin(pi/2)
    EXPECT_NEAR(f(4), 0.0, 1e-15);   // cos(pi/2)
    EXPECT_EQ(f(5), 0.1);
    EXPECT_EQ(f(8), -0.1);
    EXPECT_EQ(f(11), 4.0);
    EXPECT_NEAR(f(14), 0.0, 1e-15);  // sin(pi)
    EXPECT_NEAR(f(15), -1.0, 1e-15); // cos(pi)
}

TEST(PolicyConfigValidate, RejectsBadShapes) {
    PolicyConfig cfg;
    cfg.heads = 3;  // does not divide 256
    EXPECT_THROW(cfg.validate(), std::invalid_argument);
    cfg = PolicyConfig{};
    cfg.a_max = 0.0;
    EXPECT_THROW(cfg.validate(), std::invalid_argument);
    cfg = PolicyConfig{};
    cfg.head_hidden = 0;
    EXPECT_THROW(cfg.validate(), std::invalid_argument);
    cfg = PolicyConfig{};
    cfg.camera.fx = -1.0;
    EXPECT_THROW(cfg.validate(), std::invalid_argument);
    EXPECT_THROW(PolicyNet(0, PolicyConfig{}, 1), std::invalid_argument);
}

TEST(PolicyForward, ClampsEveryOutputRowToAMax) {
    auto rng = make_rng(10);
    PolicyConfig big = tiny_config();
    big.a_max = 1e9;
    PolicyConfig small = tiny_config();
    small.a_max = 0.05;  // far below typical raw outputs

    PolicyNet loose(1, big, 7);
    PolicyNet tight(1, small, 7);  // same seed -> same weights

    const nn::Mat vx = random_mat(rng, 6, frame_feature_dim(1));
    const nn::Mat sx = random_mat(rng, 6, kPolicyStateDim);
    const nn::Mat raw = loose.forward(vx, sx);
    const nn::Mat clamped = tight.forward(vx, sx);

    for (Eigen::Index i = 0; i < raw.rows(); ++i) {
        EXPECT_LE(clamped.row(i).norm(), small.a_max + 1e-12);
        if (raw.row(i).norm() <= small.a_max) {
            EXPECT_EQ(clamped.row(i), raw.row(i));  // untouched below the bound
        } else {
            // Clamping rescales; direction is preserved.
            const Eigen::RowVector3d da = raw.row(i).normalized();
            const Eigen::RowVector3d db = clamped.row(i).normalized();
            EXPECT_LT((da - db).norm(), 1e-9);
            EXPECT_NEAR(clamped.row(i).norm(), small.a_max, 1e-12);
        }
    }
}

TEST(PolicyForward, TrainingPassMatchesInferenceBelowTheClamp) {
    auto rng = make_rng(11);
    PolicyConfig cfg = tiny_config();
    cfg.a_max = 1e9;
    PolicyNet net(1, cfg, 3);
    const nn::Mat vx = random_mat(rng, 4, frame_feature_dim(1));
    const nn::Mat sx = random_mat(rng, 4, kPolicyStateDim);
    EXPECT_EQ(net.forward(vx, sx), net.forward_train(vx, sx));
}

TEST(PolicyForward, AttentionRowsAreProbabilitiesAndVisionMassIsTheirMean) {
    auto rng = make_rng(12);
    PolicyNet net(1, tiny_config(), 5);
    const nn::Mat vx = random_mat(rng, 5, frame_feature_dim(1));
    const nn::Mat sx = random_mat(rng, 5, kPolicyStateDim);

    AttentionDiagnostics diag;
    net.forward(vx, sx, &diag);
    ASSERT_EQ(diag.heads, 2);
    ASSERT_EQ(diag.attention.rows(), 5);
    ASSERT_EQ(diag.attention.cols(), 8);

    for (Eigen::Index r = 0; r < 5; ++r) {
        double expected = 0.0;
        for (int h = 0; h < diag.heads; ++h) {
            for (int q = 0; q < 2; ++q) {
                const double p0 = diag.attention(r, h * 4 + q * 2);
                const double p1 = diag.attention(r, h * 4 + q * 2 + 1);
                EXPECT_GE(p0, 0.0);
                EXPECT_NEAR(p0 + p1, 1.0, 1e-9);
            }
            expected += 0.5 * (diag.attention(r, h * 4) + diag.attention(r, h * 4 + 2));
        }
        expected /= diag.heads;
        EXPECT_NEAR(diag.vision_mass(r), expected, 1e-15);
        EXPECT_GE(diag.vision_mass(r), 0.0);
        EXPECT_LE(diag.vision_mass(r), 1.0);
    }
    EXPECT_THROW(diag.vision_mass(5), std::out_of_range);
    EXPECT_THROW(AttentionDiagnostics{}.vision_mass(0), std::out_of_range);
}

TEST(PolicyForward, NamesTheStageOnNonFiniteActivations) {
    auto rng = make_rng(13);
    PolicyNet net(1, tiny_config(), 9);
    nn::Mat vx = random_mat(rng, 2, frame_feature_dim(1));
    nn::Mat sx = random_mat(rng, 2, kPolicyStateDim);
    net.vision_norm().fit(vx);
    net.state_norm().fit(sx);

    auto expect_stage = [&](const char* stage, auto&& poison) {
        PolicyNet copy = net;
        nn::Mat v = vx, s = sx;
        poison(copy, v, s);
        try {
            copy.forward(v, s);
            FAIL() << "expected a non-finite error naming " << stage;
        } catch (const std::runtime_error& e) {
            EXPECT_NE(std::string(e.what()).find(stage), std::string::npos) << e.what();
        }
    };

    expect_stage("vision embedding",
                 [](PolicyNet&, nn::Mat& v, nn::Mat&) { v(0, 0) = NAN; });
    expect_stage("state embedding",
                 [](PolicyNet&, nn::Mat&, nn::Mat& s) { s(1, 3) = NAN; });
    expect_stage("attention", [](PolicyNet& p, nn::Mat&, nn::Mat&) {
        p.params()[8]->value(0, 0) = NAN;  // first attention weight tensor
    });
    expect_stage("head", [](PolicyNet& p, nn::Mat&, nn::Mat&) {
        auto params = p.params();
        params[params.size() - 2]->value(0, 0) = NAN;  // head output weights
    });
}

TEST(PolicyNetJson, RoundTripReproducesOutputsBitwise) {
    auto rng = make_rng(14);
    PolicyNet net(2, tiny_config(), 21);
    nn::Mat vx = random_mat(rng, 3, frame_feature_dim(2));
    nn::Mat sx = random_mat(rng, 3, kPolicyStateDim);
    net.vision_norm().fit(vx);
    net.state_norm().fit(sx);

    const PolicyNet back = PolicyNet::from_json(net.to_json());
    EXPECT_EQ(net.forward(vx, sx), back.forward(vx, sx));
    EXPECT_EQ(back.n_gates(), 2);
    EXPECT_EQ(back.config().d_model, 8);

    Json j = net.to_json();
    j["type"] = "something_else";
    EXPECT_THROW(PolicyNet::from_json(j), std::runtime_error);
    j = net.to_json();
    j["params"].erase(0);
    EXPECT_THROW(PolicyNet::from_json(j), std::runtime_error);
}

TEST(PolicyNet, InitializationIsDeterministicPerSeed) {
    PolicyNet a(1, tiny_config(), 4);
    PolicyNet b(1, tiny_config(), 4);
    PolicyNet c(1, tiny_config(), 5);
    auto rng = make_rng(15);
    const nn::Mat vx = random_mat(rng, 2, frame_feature_dim(1));
    const nn::Mat sx = random_mat(rng, 2, kPolicyStateDim);
    EXPECT_EQ(a.forward(vx, sx), b.forward(vx, sx));
    EXPECT_NE(a.forward(vx, sx), c.forward(vx, sx));
}

// The full differentiable path -- standardizers, both embedding MLPs,
// two-token attention with residual connections, and the output head --
// against central finite differences, coordinate by coordinate.
TEST(PolicyGradient, MatchesCentralDifferencesEndToEnd) {
    auto rng = make_rng(16);
    PolicyConfig cfg = tiny_config();
    cfg.a_max = 1e9;  // keep the loss on the unclamped path
    PolicyNet net(1, cfg, 33);

    const nn::Mat vx = random_mat(rng, 5, frame_feature_dim(1));
    const nn::Mat sx = random_mat(rng, 5, kPolicyStateDim);
    const nn::Mat target = random_mat(rng, 5, 3);
    net.vision_norm().fit(vx);
    net.state_norm().fit(sx);

    auto loss = [&]() { return 0.5 * (net.forward(vx, sx) - target).squaredNorm(); };

    for (nn::Param* p : net.params()) p->grad.setZero();
    const nn::Mat out = net.forward_train(vx, sx);
    net.backward(out - target);

    const double h = 1e-5;
    int checked = 0;
    for (nn::Param* p : net.params()) {
        for (Eigen::Index r = 0; r < p->value.rows(); ++r) {
            for (Eigen::Index c = 0; c < p->value.cols(); ++c) {
                const double saved = p->value(r, c);
                p->value(r, c) = saved + h;
                const double up = loss();
                p->value(r, c) = saved - h;
                const double dn = loss();
                p->value(r, c) = saved;
                const double numeric = (up - dn) / (2.0 * h);
                EXPECT_LT(rel_err(p->grad(r, c), numeric), 1e-4)
                    << p->name << "(" << r << "," << c << ") analytic " << p->grad(r, c)
                    << " numeric " << numeric;
                ++checked;
            }
        }
    }
    EXPECT_EQ(checked, 931);  // exhaustive sweep, far beyond 10 spot checks
}

TEST(PolicyAct, EmitsClampedAccelerationAndLeavesYawToTheCaller) {
    const Track track = builtin_track("circle");
    const GateFeatureRenderer renderer(track, CameraModel{});
    PolicyConfig cfg = tiny_config();
    cfg.a_max = 0.25;
    PolicyNet net(static_cast<int>(track.gates.size()), cfg, 2);

    const Pose6 start = initial_state(track).pose();
    const FrameObservation frame = renderer.render(start);
    AttentionDiagnostics diag;
    const ControlInput u = net.act(frame, start, ImuSample{}, track.gates[0].center, &diag);
    EXPECT_LE(u.accel.norm(), cfg.a_max + 1e-12);
    EXPECT_EQ(u.yaw_rate, 0.0);
    EXPECT_EQ(diag.attention.rows(), 1);
}

TEST(MmController, AddsTheProportionalYawLawOnTheBelievedPose) {
    const Track track = builtin_track("circle");
    const GateFeatureRenderer renderer(track, CameraModel{});
    PolicyNet net(static_cast<int>(track.gates.size()), tiny_config(), 2);

    const QuadState truth = initial_state(track);
    const FrameObservation frame = renderer.render(truth.pose());
    PoseEstimate estimate;
    estimate.pose = truth.pose();
    estimate.pose.yaw += 0.4;  // believed yaw differs from truth
    estimate.valid = true;
    const Eigen::Vector3d est_v = Eigen::Vector3d::Zero();
    const ImuSample imu;
    const StepContext ctx{0, 0.0, truth, estimate, est_v, frame, imu, track, 0};

    const ExpertConfig ecfg;
    const ControllerFn mm = make_mm_controller(net, ecfg);
    const ControlInput u = mm(ctx);

    const ControlInput raw = net.act(frame, estimate.pose, imu, track.gates[0].center);
    EXPECT_EQ(u.accel, raw.accel);
    const double yaw_des =
        expert_yaw_target(estimate.pose.position(), track.gates[0], ecfg);
    EXPECT_EQ(u.yaw_rate, yaw_control(estimate.pose.yaw, yaw_des, ecfg));
    EXPECT_NE(u.yaw_rate, 0.0);
}

}  // namespace
}  // namespace falcon
