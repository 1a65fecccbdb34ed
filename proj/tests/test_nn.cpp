#include "falcon/nn.hpp"

#include <cmath>
#include <functional>

#include <gtest/gtest.h>

#include "oracle_utils.hpp"

namespace falcon::nn {
namespace {

using falcon::testing::make_rng;

Mat random_mat(std::mt19937_64& rng, int rows, int cols, double scale = 1.0) {
    std::normal_distribution<double> gauss(0.0, scale);
    Mat m(rows, cols);
    for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c) m(r, c) = gauss(rng);
    return m;
}

double rel_err(double a, double b) {
    return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-8});
}

/// Central-difference check of dL/dtheta for every entry of `p` against the
/// analytic gradient already accumulated in p.grad.
void check_param_grad(Param& p, const std::function<double()>& loss, double tol,
                      int* checked = nullptr) {
    const double h = 1e-5;
    for (Eigen::Index r = 0; r < p.value.rows(); ++r) {
        for (Eigen::Index c = 0; c < p.value.cols(); ++c) {
            const double saved = p.value(r, c);
            p.value(r, c) = saved + h;
            const double up = loss();
            p.value(r, c) = saved - h;
            const double dn = loss();
            p.value(r, c) = saved;
            const double numeric = (up - dn) / (2.0 * h);
            EXPECT_LT(rel_err(p.grad(r, c), numeric), tol)
                << p.name << "(" << r << "," << c << ") analytic " << p.grad(r, c)
                << " numeric " << numeric;
            if (checked) ++*checked;
        }
    }
}

TEST(Dense, ForwardMatchesHandComputation) {
    auto rng = make_rng(1);
    Dense d("d", 2, 2, rng, 0.5);
    d.w.value << 1.0, 2.0, 3.0, 4.0;
    d.b.value << 0.5, -0.5;
    Mat x(1, 2);
    x << 1.0, -1.0;
    const Mat y = d.forward(x);
    EXPECT_DOUBLE_EQ(y(0, 0), 1.0 - 3.0 + 0.5);
    EXPECT_DOUBLE_EQ(y(0, 1), 2.0 - 4.0 - 0.5);
}

TEST(Mlp, GradientMatchesCentralDifferences) {
    auto rng = make_rng(2);
    Mlp net("net", {5, 7, 4, 3}, rng);
    const Mat x = random_mat(rng, 6, 5);
    const Mat target = random_mat(rng, 6, 3);

    auto loss = [&]() { return 0.5 * (net.forward(x) - target).squaredNorm(); };

    for (Param* p : net.params()) p->grad.setZero();
    const Mat y = net.forward_train(x);
    net.backward(y - target);

    int checked = 0;
    for (Param* p : net.params()) check_param_grad(*p, loss, 1e-5, &checked);
    EXPECT_GT(checked, 80);
}

TEST(Mlp, InputGradientMatchesCentralDifferences) {
    auto rng = make_rng(3);
    Mlp net("net", {4, 6, 2}, rng);
    Mat x = random_mat(rng, 3, 4);
    const Mat target = random_mat(rng, 3, 2);

    for (Param* p : net.params()) p->grad.setZero();
    const Mat y = net.forward_train(x);
    const Mat dx = net.backward(y - target);

    const double h = 1e-5;
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
        for (Eigen::Index c = 0; c < x.cols(); ++c) {
            const double saved = x(r, c);
            x(r, c) = saved + h;
            const double up = 0.5 * (net.forward(x) - target).squaredNorm();
            x(r, c) = saved - h;
            const double dn = 0.5 * (net.forward(x) - target).squaredNorm();
            x(r, c) = saved;
            EXPECT_LT(rel_err(dx(r, c), (up - dn) / (2.0 * h)), 1e-5);
        }
    }
}

TEST(SelfAttention2, GradientMatchesCentralDifferences) {
    auto rng = make_rng(4);
    const int d_model = 8, heads = 2, batch = 3;
    SelfAttention2 attn("attn", d_model, heads, rng);
    const std::array<Mat, 2> x{random_mat(rng, batch, d_model),
                               random_mat(rng, batch, d_model)};
    const std::array<Mat, 2> target{random_mat(rng, batch, d_model),
                                    random_mat(rng, batch, d_model)};

    auto loss = [&]() {
        const auto y = attn.forward(x);
        return 0.5 * ((y[0] - target[0]).squaredNorm() + (y[1] - target[1]).squaredNorm());
    };

    for (Param* p : attn.params()) p->grad.setZero();
    const auto y = attn.forward_train(x);
    attn.backward({y[0] - target[0], y[1] - target[1]});

    int checked = 0;
    for (Param* p : attn.params()) check_param_grad(*p, loss, 1e-5, &checked);
    EXPECT_EQ(checked, 4 * (d_model * d_model + d_model));
}

TEST(SelfAttention2, InputGradientMatchesCentralDifferences) {
    auto rng = make_rng(5);
    const int d_model = 6, heads = 3, batch = 2;
    SelfAttention2 attn("attn", d_model, heads, rng);
    std::array<Mat, 2> x{random_mat(rng, batch, d_model), random_mat(rng, batch, d_model)};
    const std::array<Mat, 2> target{random_mat(rng, batch, d_model),
                                    random_mat(rng, batch, d_model)};

    for (Param* p : attn.params()) p->grad.setZero();
    const auto y = attn.forward_train(x);
    const auto dx = attn.backward({y[0] - target[0], y[1] - target[1]});

    const double h = 1e-5;
    for (int t = 0; t < 2; ++t) {
        for (Eigen::Index r = 0; r < batch; ++r) {
            for (Eigen::Index c = 0; c < d_model; ++c) {
                const double saved = x[t](r, c);
                auto loss = [&]() {
                    const auto out = attn.forward(x);
                    return 0.5 * ((out[0] - target[0]).squaredNorm() +
                                  (out[1] - target[1]).squaredNorm());
                };
                x[t](r, c) = saved + h;
                const double up = loss();
                x[t](r, c) = saved - h;
                const double dn = loss();
                x[t](r, c) = saved;
                EXPECT_LT(rel_err(dx[t](r, c), (up - dn) / (2.0 * h)), 1e-5);
            }
        }
    }
}

TEST(SelfAttention2, AttentionRowsAreProbabilities) {
    auto rng = make_rng(6);
    SelfAttention2 attn("attn", 16, 4, rng);
    const std::array<Mat, 2> x{random_mat(rng, 5, 16), random_mat(rng, 5, 16)};
    Mat a;
    attn.forward(x, &a);
    ASSERT_EQ(a.rows(), 5);
    ASSERT_EQ(a.cols(), 4 * 4);
    for (Eigen::Index r = 0; r < a.rows(); ++r) {
        for (int h = 0; h < 4; ++h) {
            for (int q = 0; q < 2; ++q) {
                const double p0 = a(r, h * 4 + q * 2);
                const double p1 = a(r, h * 4 + q * 2 + 1);
                EXPECT_GE(p0, 0.0);
                EXPECT_GE(p1, 0.0);
                EXPECT_NEAR(p0 + p1, 1.0, 1e-12);
            }
        }
    }
}

TEST(Adam, MinimizesConvexQuadratic) {
    Param p("p", 1, 4);
    p.value << 4.0, -3.0, 2.0, -1.0;
    Adam opt({&p}, 0.1);
    for (int i = 0; i < 500; ++i) {
        opt.zero_grad();
        p.grad = p.value;  // d/dp of 0.5 ||p||^2
        opt.step();
    }
    EXPECT_LT(p.value.norm(), 1e-3);
}

TEST(Standardizer, NormalizesAndRoundTrips) {
    auto rng = make_rng(7);
    Mat x = random_mat(rng, 500, 3);
    x.col(1) = 5.0 * x.col(1).array() + 100.0;
    Standardizer s;
    s.fit(x);
    const Mat z = s.transform(x);
    for (int c = 0; c < 3; ++c) {
        EXPECT_NEAR(z.col(c).mean(), 0.0, 1e-10);
        EXPECT_NEAR(std::sqrt(z.col(c).squaredNorm() / z.rows()), 1.0, 1e-10);
    }
    EXPECT_LT((s.inverse(z) - x).cwiseAbs().maxCoeff(), 1e-9);

    const Standardizer back = standardizer_from_json(standardizer_to_json(s));
    EXPECT_EQ(back.mean(), s.mean());
    EXPECT_EQ(back.std_dev(), s.std_dev());
}

TEST(Standardizer, ConstantFeatureDoesNotDivideByZero) {
    Mat x = Mat::Ones(10, 2);
    Standardizer s;
    s.fit(x);
    const Mat z = s.transform(x);
    EXPECT_TRUE(z.allFinite());
    EXPECT_NEAR(z.cwiseAbs().maxCoeff(), 0.0, 1e-12);
}

TEST(ParamJson, RoundTripIsBitExact) {
    auto rng = make_rng(8);
    Param p("layer.w", 3, 5);
    p.value = random_mat(rng, 3, 5);
    Param q;
    param_from_json(param_to_json(p), q);
    EXPECT_EQ(q.name, p.name);
    EXPECT_EQ(q.value, p.value);

    Json j = param_to_json(p);
    j["data"] = Json::array({1.0, 2.0});
    EXPECT_THROW(param_from_json(j, q), std::invalid_argument);
}

}  // namespace
}  // namespace falcon::nn
