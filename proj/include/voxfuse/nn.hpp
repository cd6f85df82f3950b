#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "random.hpp"
#include "tensor.hpp"

namespace voxfuse {

/// Dense affine layer, weight [out x in] plus bias [out].
struct LinearLayer {
    Tensor weight;
    Tensor bias;

    LinearLayer() = default;

    LinearLayer(std::size_t out_dim, std::size_t in_dim, DetRng& rng, bool zero_init = false) {
        std::vector<double> w(out_dim * in_dim, 0.0);
        if (!zero_init) {
            double bound = std::sqrt(6.0 / static_cast<double>(in_dim + out_dim));
            for (auto& v : w) v = rng.uniform(-bound, bound);
        }
        weight = Tensor({out_dim, in_dim}, std::move(w), true);
        bias = Tensor::zeros({out_dim}, true);
    }

    std::size_t in_dim() const { return weight.dim(1); }
    std::size_t out_dim() const { return weight.dim(0); }

    Tensor apply(const Tensor& x) const { return linear(x, weight, bias); }

    std::vector<Tensor> parameters() const { return {weight, bias}; }
};

struct AdamOptions {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;
};

/// Decoupled-weight-decay Adam. Moment buffers shape-match their parameters;
/// the step counter drives bias correction.
class AdamW {
public:
    using Options = AdamOptions;

    AdamW(std::vector<Tensor> params, Options opts = Options())
        : params_(std::move(params)), opts_(opts) {
        for (const auto& p : params_) {
            m_.emplace_back(p.size(), 0.0);
            v_.emplace_back(p.size(), 0.0);
        }
    }

    std::size_t step_count() const { return step_; }
    const Options& options() const { return opts_; }
    void set_lr(double lr) { opts_.lr = lr; }

    /// One update over all parameters that currently hold gradients.
    /// Parameters without a populated gradient buffer are left untouched.
    void step() {
        ++step_;
        double bc1 = 1.0 - std::pow(opts_.beta1, static_cast<double>(step_));
        double bc2 = 1.0 - std::pow(opts_.beta2, static_cast<double>(step_));
        for (std::size_t p = 0; p < params_.size(); ++p) {
            if (!params_[p].has_grad()) continue;
            const auto& g = params_[p].grad();
            auto& x = params_[p].mutable_data();
            for (std::size_t i = 0; i < x.size(); ++i) {
                if (std::isnan(g[i]))
                    throw DivergenceError("AdamW: NaN gradient at parameter " +
                                          std::to_string(p) + "[" + std::to_string(i) + "]");
                x[i] -= opts_.lr * opts_.weight_decay * x[i];  // decoupled decay
                m_[p][i] = opts_.beta1 * m_[p][i] + (1.0 - opts_.beta1) * g[i];
                v_[p][i] = opts_.beta2 * v_[p][i] + (1.0 - opts_.beta2) * g[i] * g[i];
                double mhat = m_[p][i] / bc1;
                double vhat = v_[p][i] / bc2;
                x[i] -= opts_.lr * mhat / (std::sqrt(vhat) + opts_.eps);
            }
        }
    }

    void zero_grad() {
        for (auto& p : params_) p.zero_grad();
    }

private:
    std::vector<Tensor> params_;
    Options opts_;
    std::vector<std::vector<double>> m_;
    std::vector<std::vector<double>> v_;
    std::size_t step_ = 0;
};

/// Cosine-annealed learning rate from lr0 down to zero over total steps.
inline double cosine_lr(double lr0, std::size_t step, std::size_t total_steps) {
    if (total_steps <= 1) return lr0;
    double t = static_cast<double>(step) / static_cast<double>(total_steps);
    if (t > 1.0) t = 1.0;
    return lr0 * 0.5 * (1.0 + std::cos(3.14159265358979323846 * t));
}

}  // namespace voxfuse
