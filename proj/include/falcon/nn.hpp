#pragma once

// Minimal dense neural-network kit: linear layers, ReLU MLPs, a two-token
// multi-head self-attention block, Adam, and feature standardization.
// Everything trains by explicit backpropagation on Eigen matrices whose rows
// are samples. Inference paths are const and allocate no shared state, so a
// trained model can be shared across threads; training caches live inside
// the layers and make training single-writer.

#include <array>
#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>

#include <json.hpp>

namespace falcon::nn {

using Mat = Eigen::MatrixXd;

/// One trainable tensor with its gradient accumulator.
struct Param {
    std::string name;
    Mat value;
    Mat grad;

    Param() = default;
    Param(std::string n, Eigen::Index rows, Eigen::Index cols)
        : name(std::move(n)), value(Mat::Zero(rows, cols)), grad(Mat::Zero(rows, cols)) {}
};

/// Adam with bias correction over a fixed parameter list.
class Adam {
public:
    explicit Adam(std::vector<Param*> params, double lr = 1e-3, double beta1 = 0.9,
                  double beta2 = 0.999, double eps = 1e-8)
        : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
        for (const Param* p : params_) {
            m_.push_back(Mat::Zero(p->value.rows(), p->value.cols()));
            v_.push_back(Mat::Zero(p->value.rows(), p->value.cols()));
        }
    }

    void zero_grad() {
        for (Param* p : params_) p->grad.setZero();
    }

    void step() {
        ++t_;
        const double c1 = 1.0 - std::pow(beta1_, t_);
        const double c2 = 1.0 - std::pow(beta2_, t_);
        for (std::size_t i = 0; i < params_.size(); ++i) {
            Param& p = *params_[i];
            m_[i] = beta1_ * m_[i] + (1.0 - beta1_) * p.grad;
            v_[i] = beta2_ * v_[i] + (1.0 - beta2_) * p.grad.cwiseProduct(p.grad);
            p.value.array() -=
                lr_ * (m_[i].array() / c1) / ((v_[i].array() / c2).sqrt() + eps_);
        }
    }

    double learning_rate() const { return lr_; }
    void set_learning_rate(double lr) { lr_ = lr; }

private:
    std::vector<Param*> params_;
    double lr_, beta1_, beta2_, eps_;
    std::vector<Mat> m_, v_;
    long t_ = 0;
};

/// Affine layer y = x W + b. W is (in x out); b is (1 x out).
class Dense {
public:
    Dense() = default;
    Dense(const std::string& name, int in, int out, std::mt19937_64& rng, double w_scale)
        : w(name + ".w", in, out), b(name + ".b", 1, out) {
        std::normal_distribution<double> gauss(0.0, w_scale);
        for (Eigen::Index r = 0; r < w.value.rows(); ++r)
            for (Eigen::Index c = 0; c < w.value.cols(); ++c) w.value(r, c) = gauss(rng);
    }

    Mat forward(const Mat& x) const {
        return (x * w.value).rowwise() + b.value.row(0);
    }

    Mat forward_train(const Mat& x) {
        x_cache_ = x;
        return forward(x);
    }

    Mat backward(const Mat& dy) {
        w.grad.noalias() += x_cache_.transpose() * dy;
        b.grad.row(0) += dy.colwise().sum();
        return dy * w.value.transpose();
    }

    Param w, b;

private:
    Mat x_cache_;
};

inline Mat relu(const Mat& x) { return x.cwiseMax(0.0); }

/// Multi-layer perceptron with ReLU between layers and a linear output.
class Mlp {
public:
    Mlp() = default;
    Mlp(const std::string& name, const std::vector<int>& dims, std::mt19937_64& rng) {
        if (dims.size() < 2) throw std::invalid_argument("Mlp: need at least input and output");
        for (std::size_t i = 0; i + 1 < dims.size(); ++i) {
            // He initialization for the ReLU-fed layers, Xavier for the head.
            const bool last = i + 2 == dims.size();
            const double scale = last ? std::sqrt(1.0 / dims[i]) : std::sqrt(2.0 / dims[i]);
            layers_.emplace_back(name + "." + std::to_string(i), dims[i], dims[i + 1], rng,
                                 scale);
        }
    }

    Mat forward(const Mat& x) const {
        Mat h = x;
        for (std::size_t i = 0; i < layers_.size(); ++i) {
            h = layers_[i].forward(h);
            if (i + 1 < layers_.size()) h = relu(h);
        }
        return h;
    }

    Mat forward_train(const Mat& x) {
        masks_.assign(layers_.size() > 0 ? layers_.size() - 1 : 0, Mat());
        Mat h = x;
        for (std::size_t i = 0; i < layers_.size(); ++i) {
            h = layers_[i].forward_train(h);
            if (i + 1 < layers_.size()) {
                masks_[i] = (h.array() > 0.0).cast<double>();
                h = relu(h);
            }
        }
        return h;
    }

    Mat backward(const Mat& dy) {
        Mat d = dy;
        for (std::size_t i = layers_.size(); i-- > 0;) {
            if (i < masks_.size()) d = d.cwiseProduct(masks_[i]);
            d = layers_[i].backward(d);
        }
        return d;
    }

    std::vector<Param*> params() {
        std::vector<Param*> out;
        for (auto& l : layers_) {
            out.push_back(&l.w);
            out.push_back(&l.b);
        }
        return out;
    }

    std::vector<Dense>& layers() { return layers_; }
    const std::vector<Dense>& layers() const { return layers_; }

private:
    std::vector<Dense> layers_;
    std::vector<Mat> masks_;
};

/// Self-attention over exactly two tokens that share a model width. Heads
/// split the width evenly; outputs go through a final linear projection.
/// Attention probabilities of the last forward pass are exposed for
/// diagnostics as one 2x2 (query x key) matrix per head.
class SelfAttention2 {
public:
    static constexpr int kTokens = 2;

    SelfAttention2() = default;
    SelfAttention2(const std::string& name, int d_model, int heads, std::mt19937_64& rng)
        : d_model_(d_model), heads_(heads) {
        if (heads <= 0 || d_model % heads != 0)
            throw std::invalid_argument("SelfAttention2: heads must divide d_model");
        const double scale = std::sqrt(1.0 / d_model);
        wq_ = Dense(name + ".wq", d_model, d_model, rng, scale);
        wk_ = Dense(name + ".wk", d_model, d_model, rng, scale);
        wv_ = Dense(name + ".wv", d_model, d_model, rng, scale);
        wo_ = Dense(name + ".wo", d_model, d_model, rng, scale);
    }

    int d_model() const { return d_model_; }
    int heads() const { return heads_; }

    /// Inference pass. If `attn` is non-null it receives, per sample row,
    /// heads x (2x2) attention probabilities flattened as
    /// [h0 a00 a01 a10 a11, h1 a00 ...] where a(q,k) weights key token k for
    /// query token q and tokens are (0, 1) as passed.
    std::array<Mat, 2> forward(const std::array<Mat, 2>& x, Mat* attn = nullptr) const {
        Ctx c;
        run_forward(x, c, attn);
        return c.out;
    }

    std::array<Mat, 2> forward_train(const std::array<Mat, 2>& x) {
        // forward_train caches one input per layer, but each projection is
        // applied to both tokens; stack the tokens so a single cached matrix
        // carries them (rows: token 0 batch then token 1 batch).
        const Eigen::Index b = x[0].rows();
        Mat stacked(2 * b, d_model_);
        stacked.topRows(b) = x[0];
        stacked.bottomRows(b) = x[1];
        Mat qs = wq_.forward_train(stacked);
        Mat ks = wk_.forward_train(stacked);
        Mat vs = wv_.forward_train(stacked);
        ctx_ = Ctx{};
        ctx_.batch = b;
        for (int t = 0; t < 2; ++t) {
            ctx_.q[t] = qs.middleRows(t * b, b);
            ctx_.k[t] = ks.middleRows(t * b, b);
            ctx_.v[t] = vs.middleRows(t * b, b);
        }
        attend(ctx_, nullptr);
        Mat concat(2 * b, d_model_);
        concat.topRows(b) = ctx_.mix[0];
        concat.bottomRows(b) = ctx_.mix[1];
        Mat os = wo_.forward_train(concat);
        ctx_.out = {os.topRows(b), os.bottomRows(b)};
        return ctx_.out;
    }

    std::array<Mat, 2> backward(const std::array<Mat, 2>& dout) {
        const Eigen::Index b = ctx_.batch;
        const int dh = d_model_ / heads_;
        const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));

        Mat dos(2 * b, d_model_);
        dos.topRows(b) = dout[0];
        dos.bottomRows(b) = dout[1];
        Mat dmix_s = wo_.backward(dos);
        std::array<Mat, 2> dmix{dmix_s.topRows(b), dmix_s.bottomRows(b)};

        std::array<Mat, 2> dq, dk, dv;
        for (int t = 0; t < 2; ++t) {
            dq[t] = Mat::Zero(b, d_model_);
            dk[t] = Mat::Zero(b, d_model_);
            dv[t] = Mat::Zero(b, d_model_);
        }
        for (int h = 0; h < heads_; ++h) {
            const auto cols = Eigen::seqN(h * dh, dh);
            for (int t = 0; t < 2; ++t) {
                // da(q,k) = <dmix_q, v_k>, rowwise per sample.
                Eigen::ArrayXd da0 =
                    (dmix[t](Eigen::all, cols).array() * ctx_.v[0](Eigen::all, cols).array())
                        .rowwise()
                        .sum();
                Eigen::ArrayXd da1 =
                    (dmix[t](Eigen::all, cols).array() * ctx_.v[1](Eigen::all, cols).array())
                        .rowwise()
                        .sum();
                const Eigen::ArrayXd a0 = ctx_.attn[h][t].col(0).array();
                const Eigen::ArrayXd a1 = ctx_.attn[h][t].col(1).array();
                dv[0](Eigen::all, cols).array() +=
                    dmix[t](Eigen::all, cols).array().colwise() * a0;
                dv[1](Eigen::all, cols).array() +=
                    dmix[t](Eigen::all, cols).array().colwise() * a1;
                // Softmax backward over the two keys.
                const Eigen::ArrayXd dot = da0 * a0 + da1 * a1;
                const Eigen::ArrayXd ds0 = a0 * (da0 - dot) * inv_sqrt_dh;
                const Eigen::ArrayXd ds1 = a1 * (da1 - dot) * inv_sqrt_dh;
                dq[t](Eigen::all, cols).array() +=
                    ctx_.k[0](Eigen::all, cols).array().colwise() * ds0 +
                    ctx_.k[1](Eigen::all, cols).array().colwise() * ds1;
                dk[0](Eigen::all, cols).array() +=
                    ctx_.q[t](Eigen::all, cols).array().colwise() * ds0;
                dk[1](Eigen::all, cols).array() +=
                    ctx_.q[t](Eigen::all, cols).array().colwise() * ds1;
            }
        }

        Mat dqs(2 * b, d_model_), dks(2 * b, d_model_), dvs(2 * b, d_model_);
        for (int t = 0; t < 2; ++t) {
            dqs.middleRows(t * b, b) = dq[t];
            dks.middleRows(t * b, b) = dk[t];
            dvs.middleRows(t * b, b) = dv[t];
        }
        Mat dx_s = wq_.backward(dqs) + wk_.backward(dks) + wv_.backward(dvs);
        return {dx_s.topRows(b) , dx_s.bottomRows(b)};
    }

    std::vector<Param*> params() {
        return {&wq_.w, &wq_.b, &wk_.w, &wk_.b, &wv_.w, &wv_.b, &wo_.w, &wo_.b};
    }

    std::vector<const Param*> params() const {
        return {&wq_.w, &wq_.b, &wk_.w, &wk_.b, &wv_.w, &wv_.b, &wo_.w, &wo_.b};
    }

private:
    struct Ctx {
        Eigen::Index batch = 0;
        std::array<Mat, 2> q, k, v, mix, out;
        // attn[h][query_token] is (batch x 2): columns weight the key tokens.
        std::vector<std::array<Mat, 2>> attn;
    };

    void attend(Ctx& c, Mat* attn_out) const {
        const int dh = d_model_ / heads_;
        const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));
        c.attn.assign(heads_, {});
        for (int t = 0; t < 2; ++t) c.mix[t] = Mat::Zero(c.batch, d_model_);
        if (attn_out) attn_out->resize(c.batch, heads_ * 4);
        for (int h = 0; h < heads_; ++h) {
            const auto cols = Eigen::seqN(h * dh, dh);
            for (int t = 0; t < 2; ++t) {
                Eigen::ArrayXd s0 =
                    (c.q[t](Eigen::all, cols).array() * c.k[0](Eigen::all, cols).array())
                        .rowwise()
                        .sum() *
                    inv_sqrt_dh;
                Eigen::ArrayXd s1 =
                    (c.q[t](Eigen::all, cols).array() * c.k[1](Eigen::all, cols).array())
                        .rowwise()
                        .sum() *
                    inv_sqrt_dh;
                const Eigen::ArrayXd m = s0.max(s1);
                const Eigen::ArrayXd e0 = (s0 - m).exp();
                const Eigen::ArrayXd e1 = (s1 - m).exp();
                const Eigen::ArrayXd z = e0 + e1;
                Mat a(c.batch, 2);
                a.col(0) = e0 / z;
                a.col(1) = e1 / z;
                c.attn[h][t] = a;
                c.mix[t](Eigen::all, cols).array() +=
                    c.v[0](Eigen::all, cols).array().colwise() * a.col(0).array() +
                    c.v[1](Eigen::all, cols).array().colwise() * a.col(1).array();
                if (attn_out) {
                    attn_out->col(h * 4 + t * 2 + 0) = a.col(0);
                    attn_out->col(h * 4 + t * 2 + 1) = a.col(1);
                }
            }
        }
    }

    void run_forward(const std::array<Mat, 2>& x, Ctx& c, Mat* attn_out) const {
        c.batch = x[0].rows();
        if (x[1].rows() != c.batch)
            throw std::invalid_argument("SelfAttention2: token batch sizes differ");
        for (int t = 0; t < 2; ++t) {
            c.q[t] = wq_.forward(x[t]);
            c.k[t] = wk_.forward(x[t]);
            c.v[t] = wv_.forward(x[t]);
        }
        attend(c, attn_out);
        for (int t = 0; t < 2; ++t) c.out[t] = wo_.forward(c.mix[t]);
    }

    int d_model_ = 0;
    int heads_ = 0;
    Dense wq_, wk_, wv_, wo_;
    Ctx ctx_;
};

/// Copies of current parameter values, for restore-best training schedules.
inline std::vector<Mat> snapshot_params(const std::vector<Param*>& params) {
    std::vector<Mat> out;
    out.reserve(params.size());
    for (const Param* p : params) out.push_back(p->value);
    return out;
}

inline void restore_params(const std::vector<Mat>& saved, const std::vector<Param*>& params) {
    if (saved.size() != params.size())
        throw std::invalid_argument("restore_params: size mismatch");
    for (std::size_t i = 0; i < params.size(); ++i) params[i]->value = saved[i];
}

// ---------------------------------------------------------------------------
// Feature standardization
// ---------------------------------------------------------------------------

/// Per-feature affine whitener fit on training data and frozen thereafter.
class Standardizer {
public:
    void fit(const Mat& x) {
        mean_ = x.colwise().mean();
        Mat centered = x.rowwise() - mean_;
        std_ = (centered.array().square().colwise().sum() / x.rows()).sqrt().matrix();
        std_ = std_.cwiseMax(1e-8);
        fitted_ = true;
    }

    Mat transform(const Mat& x) const {
        require_fitted();
        return (x.rowwise() - mean_).array().rowwise() / std_.array();
    }

    Mat inverse(const Mat& y) const {
        require_fitted();
        return (y.array().rowwise() * std_.array()).matrix().rowwise() + mean_;
    }

    bool fitted() const { return fitted_; }
    const Eigen::RowVectorXd& mean() const { return mean_; }
    const Eigen::RowVectorXd& std_dev() const { return std_; }

    void set(const Eigen::RowVectorXd& mean, const Eigen::RowVectorXd& std_dev) {
        if (mean.size() != std_dev.size())
            throw std::invalid_argument("Standardizer: mean/std size mismatch");
        mean_ = mean;
        std_ = std_dev.cwiseMax(1e-8);
        fitted_ = true;
    }

private:
    void require_fitted() const {
        if (!fitted_) throw std::logic_error("Standardizer: fit() must be called first");
    }

    Eigen::RowVectorXd mean_, std_;
    bool fitted_ = false;
};

// ---------------------------------------------------------------------------
// Weight serialization
// ---------------------------------------------------------------------------

using Json = nlohmann::ordered_json;

inline Json param_to_json(const Param& p) {
    Json data = Json::array();
    for (Eigen::Index r = 0; r < p.value.rows(); ++r)
        for (Eigen::Index c = 0; c < p.value.cols(); ++c) data.push_back(p.value(r, c));
    return Json{{"name", p.name},
                {"rows", p.value.rows()},
                {"cols", p.value.cols()},
                {"data", std::move(data)}};
}

inline void param_from_json(const Json& j, Param& p) {
    const auto rows = j.at("rows").get<Eigen::Index>();
    const auto cols = j.at("cols").get<Eigen::Index>();
    const Json& data = j.at("data");
    if (!data.is_array() || static_cast<Eigen::Index>(data.size()) != rows * cols)
        throw std::invalid_argument("param_from_json: data length mismatch for " +
                                    j.at("name").get<std::string>());
    p.name = j.at("name").get<std::string>();
    p.value.resize(rows, cols);
    p.grad = Mat::Zero(rows, cols);
    Eigen::Index i = 0;
    for (Eigen::Index r = 0; r < rows; ++r)
        for (Eigen::Index c = 0; c < cols; ++c) p.value(r, c) = data[i++].get<double>();
}

inline Json standardizer_to_json(const Standardizer& s) {
    Json mean = Json::array(), std_dev = Json::array();
    for (Eigen::Index i = 0; i < s.mean().size(); ++i) {
        mean.push_back(s.mean()(i));
        std_dev.push_back(s.std_dev()(i));
    }
    return Json{{"mean", std::move(mean)}, {"std", std::move(std_dev)}};
}

inline Standardizer standardizer_from_json(const Json& j) {
    const Json& m = j.at("mean");
    const Json& s = j.at("std");
    Eigen::RowVectorXd mean(m.size()), std_dev(s.size());
    for (std::size_t i = 0; i < m.size(); ++i) mean(i) = m[i].get<double>();
    for (std::size_t i = 0; i < s.size(); ++i) std_dev(i) = s[i].get<double>();
    Standardizer out;
    out.set(mean, std_dev);
    return out;
}

}  // namespace falcon::nn

namespace falcon {

/// Hyperparameters shared by the supervised trainers. The imitation-specific
/// fields (noise injection, expert mixing) are ignored by trainers that do
/// not use them.
struct TrainConfig {
    int epochs = 30;
    int batch_size = 256;
    double learning_rate = 1e-3;
    std::uint64_t seed = 0;
    double noise_sigma = 0.5;          // control-noise std during data collection, m/s^2
    int dagger_iterations = 1;
    std::vector<double> beta_schedule{1.0};  // expert-action probability per iteration

    void validate() const {
        if (epochs < 1 || batch_size < 1)
            throw std::invalid_argument("TrainConfig: epochs and batch_size must be >= 1");
        if (!(learning_rate > 0.0))
            throw std::invalid_argument("TrainConfig: learning_rate must be positive");
        if (noise_sigma < 0.0)
            throw std::invalid_argument("TrainConfig: noise_sigma must be non-negative");
        if (dagger_iterations < 1 ||
            beta_schedule.size() < static_cast<std::size_t>(dagger_iterations))
            throw std::invalid_argument("TrainConfig: need one beta per iteration");
        double prev = 1.0 + 1e-12;
        for (double b : beta_schedule) {
            if (b < 0.0 || b > 1.0 || b > prev)
                throw std::invalid_argument(
                    "TrainConfig: beta_schedule must be non-increasing within [0, 1]");
            prev = b;
        }
    }
};

}  // namespace falcon
