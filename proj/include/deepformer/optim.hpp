#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "deepformer/errors.hpp"
#include "deepformer/tape.hpp"

namespace deepformer {

struct Schedule {
  size_t warmup_steps = 8000;
  double peak_lr = 0.0007;

  void validate() const {
    if (warmup_steps < 1) throw ConfigError("warmup_steps must be at least 1");
    if (!(peak_lr > 0.0)) throw ConfigError("peak_lr must be positive");
  }
};

// linear warmup to peak, then inverse-sqrt decay; both branches meet at peak
inline double lr_at_step(size_t t, const Schedule& s) {
  s.validate();
  if (t < 1) throw ConfigError("schedule step starts at 1");
  double w = static_cast<double>(s.warmup_steps);
  double td = static_cast<double>(t);
  return s.peak_lr * std::min(td / w, std::sqrt(w / td));
}

// RAdam with fixed constants; moments kept in double regardless of the
// parameter type so update order is the only source of rounding
template <typename T>
class RAdam {
 public:
  explicit RAdam(std::vector<Parameter<T>*> params, double beta1 = 0.9,
                 double beta2 = 0.999, double eps = 1e-8)
      : params_(std::move(params)), b1_(beta1), b2_(beta2), eps_(eps) {
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
      throw ConfigError("betas must lie in [0, 1)");
    }
    m_.resize(params_.size());
    v_.resize(params_.size());
    for (size_t i = 0; i < params_.size(); ++i) {
      m_[i].assign(params_[i]->value.numel(), 0.0);
      v_[i].assign(params_[i]->value.numel(), 0.0);
    }
  }

  size_t steps() const { return t_; }

  void step(double lr) {
    ++t_;
    b1t_ *= b1_;
    b2t_ *= b2_;
    double rho_inf = 2.0 / (1.0 - b2_) - 1.0;
    double rho_t = rho_inf - 2.0 * static_cast<double>(t_) * b2t_ / (1.0 - b2t_);
    double bias1 = 1.0 - b1t_;
    double bias2 = 1.0 - b2t_;
    // variance rectification kicks in once rho_t >= 5, matching the reference
    // implementation; below that the update falls back to plain momentum
    bool rectified = rho_t >= 5.0;
    double r = 1.0;
    if (rectified) {
      r = std::sqrt((rho_t - 4.0) * (rho_t - 2.0) * rho_inf /
                    ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t));
    }
    for (size_t p = 0; p < params_.size(); ++p) {
      Parameter<T>& prm = *params_[p];
      double* m = m_[p].data();
      double* v = v_[p].data();
      size_t n = prm.value.numel();
      for (size_t i = 0; i < n; ++i) {
        double g = static_cast<double>(prm.grad.data[i]);
        if (!std::isfinite(g)) {
          throw DivergenceError("non-finite gradient reached the optimizer at " +
                                prm.name + "[" + std::to_string(i) + "]");
        }
        m[i] = b1_ * m[i] + (1.0 - b1_) * g;
        v[i] = b2_ * v[i] + (1.0 - b2_) * g * g;
        double mhat = m[i] / bias1;
        double upd;
        if (rectified) {
          upd = lr * r * mhat / (std::sqrt(v[i] / bias2) + eps_);
        } else {
          upd = lr * mhat;
        }
        prm.value.data[i] = static_cast<T>(static_cast<double>(prm.value.data[i]) - upd);
      }
    }
  }

 private:
  std::vector<Parameter<T>*> params_;
  std::vector<std::vector<double>> m_, v_;
  double b1_, b2_, eps_;
  size_t t_ = 0;
  double b1t_ = 1.0, b2t_ = 1.0;
};

}  // namespace deepformer
