#include <cmath>

#include "psinet/autodiff.hpp"
#include "psinet/error.hpp"

namespace psinet::ad {

namespace {

struct NormLayout {
  std::size_t n, c, inner;
};

NormLayout norm_layout(const Variable& x, const Variable& gamma,
                       const Variable& beta, const char* op) {
  const Shape& s = x.shape();
  if (s.size() != 2 && s.size() != 4) {
    throw ShapeError(std::string(op) + ": expected [N,C] or [N,C,H,W], got " +
                     shape_string(s));
  }
  NormLayout layout{s[0], s[1], s.size() == 4 ? s[2] * s[3] : 1};
  if (gamma.shape() != Shape{layout.c} || beta.shape() != Shape{layout.c}) {
    throw ShapeError(std::string(op) + ": scale/shift shapes " +
                     shape_string(gamma.shape()) + "/" + shape_string(beta.shape()) +
                     " do not match " + std::to_string(layout.c) + " channels");
  }
  require_finite(x.value(), op);
  require_finite(gamma.value(), op);
  require_finite(beta.value(), op);
  return layout;
}

}  // namespace

Variable batch_norm(Tape& tape, const Variable& x, const Variable& gamma,
                    const Variable& beta, Tensor& running_mean,
                    Tensor& running_var, bool training, float momentum,
                    float eps) {
  const NormLayout L = norm_layout(x, gamma, beta, "batch_norm");
  if (running_mean.shape() != Shape{L.c} || running_var.shape() != Shape{L.c}) {
    throw ShapeError("batch_norm: running statistics do not match " +
                     std::to_string(L.c) + " channels");
  }
  const std::size_t count = L.n * L.inner;
  if (training && count < 2) {
    throw ShapeError("batch_norm: training needs more than one value per channel");
  }
  const float* xv = x.value().raw();
  Tensor xhat(x.shape());
  Tensor out(x.shape());
  std::vector<float> inv_std(L.c);
  for (std::size_t ch = 0; ch < L.c; ++ch) {
    double mu, var;
    if (training) {
      double s = 0.0;
      for (std::size_t i = 0; i < L.n; ++i) {
        const float* p = xv + (i * L.c + ch) * L.inner;
        for (std::size_t k = 0; k < L.inner; ++k) s += p[k];
      }
      mu = s / double(count);
      double ss = 0.0;
      for (std::size_t i = 0; i < L.n; ++i) {
        const float* p = xv + (i * L.c + ch) * L.inner;
        for (std::size_t k = 0; k < L.inner; ++k) ss += (p[k] - mu) * (p[k] - mu);
      }
      var = ss / double(count);
      running_mean[ch] = static_cast<float>((1.0 - momentum) * running_mean[ch] +
                                            momentum * mu);
      running_var[ch] = static_cast<float>(
          (1.0 - momentum) * running_var[ch] +
          momentum * var * double(count) / double(count - 1));
    } else {
      mu = running_mean[ch];
      var = running_var[ch];
    }
    const double istd = 1.0 / std::sqrt(var + eps);
    inv_std[ch] = static_cast<float>(istd);
    const float g = gamma.value()[ch], b = beta.value()[ch];
    for (std::size_t i = 0; i < L.n; ++i) {
      const std::size_t base = (i * L.c + ch) * L.inner;
      for (std::size_t k = 0; k < L.inner; ++k) {
        const float h = static_cast<float>((xv[base + k] - mu) * istd);
        xhat[base + k] = h;
        out[base + k] = g * h + b;
      }
    }
  }
  Variable y(std::move(out),
             x.requires_grad() || gamma.requires_grad() || beta.requires_grad());
  if (!y.requires_grad()) return y;
  tape.record("batch_norm", [xn = x.node(), gn = gamma.node(), bn = beta.node(),
                             yn = y.node(), xhat = std::move(xhat),
                             inv_std = std::move(inv_std), L, training] {
    if (!yn->has_grad()) return;
    const float* g = yn->grad.raw();
    const double m = double(L.n * L.inner);
    for (std::size_t ch = 0; ch < L.c; ++ch) {
      double sum_g = 0.0, sum_gx = 0.0;
      for (std::size_t i = 0; i < L.n; ++i) {
        const std::size_t base = (i * L.c + ch) * L.inner;
        for (std::size_t k = 0; k < L.inner; ++k) {
          sum_g += g[base + k];
          sum_gx += double(g[base + k]) * xhat[base + k];
        }
      }
      if (gn->requires_grad) gn->grad_buffer()[ch] += static_cast<float>(sum_gx);
      if (bn->requires_grad) bn->grad_buffer()[ch] += static_cast<float>(sum_g);
      if (!xn->requires_grad) continue;
      float* dx = xn->grad_buffer().raw();
      const double scale = double(gn->value[ch]) * inv_std[ch];
      for (std::size_t i = 0; i < L.n; ++i) {
        const std::size_t base = (i * L.c + ch) * L.inner;
        for (std::size_t k = 0; k < L.inner; ++k) {
          double d = g[base + k];
          if (training) d -= (sum_g + xhat[base + k] * sum_gx) / m;
          dx[base + k] += static_cast<float>(scale * d);
        }
      }
    }
  });
  return y;
}

Variable group_norm(Tape& tape, const Variable& x, const Variable& gamma,
                    const Variable& beta, std::size_t groups, float eps) {
  const NormLayout L = norm_layout(x, gamma, beta, "group_norm");
  if (groups == 0 || L.c % groups != 0) {
    throw ConfigError("group_norm: " + std::to_string(L.c) +
                      " channels not divisible into " + std::to_string(groups) +
                      " groups");
  }
  const std::size_t cg = L.c / groups;
  const std::size_t span = cg * L.inner;
  const float* xv = x.value().raw();
  Tensor xhat(x.shape());
  Tensor out(x.shape());
  std::vector<float> inv_std(L.n * groups);
  for (std::size_t i = 0; i < L.n; ++i) {
    for (std::size_t gi = 0; gi < groups; ++gi) {
      const std::size_t base = (i * L.c + gi * cg) * L.inner;
      double s = 0.0;
      for (std::size_t k = 0; k < span; ++k) s += xv[base + k];
      const double mu = s / double(span);
      double ss = 0.0;
      for (std::size_t k = 0; k < span; ++k) ss += (xv[base + k] - mu) * (xv[base + k] - mu);
      const double istd = 1.0 / std::sqrt(ss / double(span) + eps);
      inv_std[i * groups + gi] = static_cast<float>(istd);
      for (std::size_t k = 0; k < span; ++k) {
        const std::size_t ch = gi * cg + k / L.inner;
        const float h = static_cast<float>((xv[base + k] - mu) * istd);
        xhat[base + k] = h;
        out[base + k] = gamma.value()[ch] * h + beta.value()[ch];
      }
    }
  }
  Variable y(std::move(out),
             x.requires_grad() || gamma.requires_grad() || beta.requires_grad());
  if (!y.requires_grad()) return y;
  tape.record("group_norm", [xn = x.node(), gn = gamma.node(), bn = beta.node(),
                             yn = y.node(), xhat = std::move(xhat),
                             inv_std = std::move(inv_std), L, groups, cg, span] {
    if (!yn->has_grad()) return;
    const float* g = yn->grad.raw();
    for (std::size_t i = 0; i < L.n; ++i) {
      for (std::size_t gi = 0; gi < groups; ++gi) {
        const std::size_t base = (i * L.c + gi * cg) * L.inner;
        double sum_d = 0.0, sum_dx = 0.0;
        for (std::size_t k = 0; k < span; ++k) {
          const std::size_t ch = gi * cg + k / L.inner;
          const double d = double(g[base + k]) * gn->value[ch];
          sum_d += d;
          sum_dx += d * xhat[base + k];
          if (gn->requires_grad) gn->grad_buffer()[ch] += g[base + k] * xhat[base + k];
          if (bn->requires_grad) bn->grad_buffer()[ch] += g[base + k];
        }
        if (!xn->requires_grad) continue;
        float* dx = xn->grad_buffer().raw();
        const double istd = inv_std[i * groups + gi];
        const double m = double(span);
        for (std::size_t k = 0; k < span; ++k) {
          const std::size_t ch = gi * cg + k / L.inner;
          const double d = double(g[base + k]) * gn->value[ch];
          dx[base + k] += static_cast<float>(istd * (d - (sum_d + xhat[base + k] * sum_dx) / m));
        }
      }
    }
  });
  return y;
}

}  // namespace psinet::ad
