#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "crossing/attention.hpp"

// Plain-loop re-derivation of the self-attention block on one (H,W,C) image,
// eval-mode normalization. Shares nothing with the library but the weights.
namespace crossing::oracle {

using Vec = std::vector<double>;

inline Vec affine(const double* x, std::size_t in, const Tensor& w, const Tensor& b) {
  const std::size_t out = b.numel();
  Vec y(b.data().begin(), b.data().end());
  for (std::size_t o = 0; o < out; ++o)
    for (std::size_t i = 0; i < in; ++i) y[o] += x[i] * w.data()[i * out + o];
  return y;
}

inline double dot(const Vec& a, const Vec& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline Tensor sa_block_reference(const Tensor& x, const attention::SABlockConfig& cfg,
                                 const attention::SABlockWeights& w) {
  const std::size_t h = x.extent(0), wd = x.extent(1), c = x.extent(2);
  const std::size_t d = cfg.reduced_dim, k = cfg.footprint_k, m = k * k, s = cfg.share(), g = d / s;
  const long r = static_cast<long>(k / 2);
  const auto pixel = [&](std::size_t i, std::size_t j) { return x.data().data() + (i * wd + j) * c; };

  std::vector<Vec> phi(h * wd), psi(h * wd), beta(h * wd);
  for (std::size_t i = 0; i < h; ++i)
    for (std::size_t j = 0; j < wd; ++j) {
      phi[i * wd + j] = affine(pixel(i, j), c, w.phi_w, w.phi_b);
      psi[i * wd + j] = affine(pixel(i, j), c, w.psi_w, w.psi_b);
      beta[i * wd + j] = affine(pixel(i, j), c, w.beta_w, w.beta_b);
    }
  // Positions outside the image contribute zero vectors.
  const auto at = [&](const std::vector<Vec>& f, long i, long j) {
    if (i < 0 || j < 0 || i >= static_cast<long>(h) || j >= static_cast<long>(wd)) return Vec(d, 0.0);
    return f[static_cast<std::size_t>(i) * wd + static_cast<std::size_t>(j)];
  };

  std::vector<double> out(h * wd * c);
  for (std::size_t i = 0; i < h; ++i) {
    for (std::size_t j = 0; j < wd; ++j) {
      std::vector<Vec> fphi, fpsi, fbeta;
      for (long di = -r; di <= r; ++di)
        for (long dj = -r; dj <= r; ++dj) {
          const long ii = static_cast<long>(i) + di, jj = static_cast<long>(j) + dj;
          fphi.push_back(at(phi, ii, jj));
          fpsi.push_back(at(psi, ii, jj));
          fbeta.push_back(at(beta, ii, jj));
        }
      const Vec& center = phi[i * wd + j];
      Vec delta;
      switch (cfg.variant) {
        case attention::DeltaVariant::star:
          for (std::size_t a = 0; a < m; ++a) delta.push_back(dot(center, fpsi[a]));
          break;
        case attention::DeltaVariant::clique:
          for (std::size_t a = 0; a < m; ++a)
            for (std::size_t b = 0; b < m; ++b) delta.push_back(dot(fphi[a], fpsi[b]));
          break;
        case attention::DeltaVariant::concat:
          delta = center;
          for (std::size_t a = 0; a < m; ++a) delta.insert(delta.end(), fpsi[a].begin(), fpsi[a].end());
          break;
      }
      Vec hidden = affine(delta.data(), delta.size(), w.alpha_w1, w.alpha_b1);
      for (double& v : hidden) v = std::max(0.0, v);
      const Vec raw = affine(hidden.data(), hidden.size(), w.alpha_w2, w.alpha_b2);
      std::vector<Vec> alpha(m, Vec(g));
      for (std::size_t a = 0; a < m; ++a)
        for (std::size_t q = 0; q < g; ++q) alpha[a][q] = raw[a * g + q];
      if (cfg.alpha_softmax) {
        for (std::size_t q = 0; q < g; ++q) {
          double mx = -INFINITY, z = 0.0;
          for (std::size_t a = 0; a < m; ++a) mx = std::max(mx, alpha[a][q]);
          for (std::size_t a = 0; a < m; ++a) z += std::exp(alpha[a][q] - mx);
          for (std::size_t a = 0; a < m; ++a) alpha[a][q] = std::exp(alpha[a][q] - mx) / z;
        }
      }
      Vec y(d, 0.0);
      for (std::size_t a = 0; a < m; ++a)
        for (std::size_t ch = 0; ch < d; ++ch) y[ch] += alpha[a][ch / s] * fbeta[a][ch];
      for (std::size_t ch = 0; ch < d; ++ch) {
        const double mean = w.norm_state.running_mean.data()[ch], var = w.norm_state.running_var.data()[ch];
        const double v = (y[ch] - mean) / std::sqrt(var + w.norm_state.eps);
        y[ch] = std::max(0.0, w.norm_gamma.data()[ch] * v + w.norm_beta.data()[ch]);
      }
      const Vec o = affine(y.data(), d, w.out_w, w.out_b);
      for (std::size_t ch = 0; ch < c; ++ch) {
        out[(i * wd + j) * c + ch] = o[ch] + (cfg.residual ? pixel(i, j)[ch] : 0.0);
      }
    }
  }
  return Tensor({h, wd, c}, std::move(out));
}

// Randomizes every weight, including normalization statistics, so no term
// of the block is trivially zero or one.
inline void randomize(attention::SABlockWeights& w, Rng& rng) {
  for (Tensor* t : {&w.phi_w, &w.phi_b, &w.psi_w, &w.psi_b, &w.beta_w, &w.beta_b, &w.alpha_w1, &w.alpha_b1,
                    &w.alpha_w2, &w.alpha_b2, &w.norm_gamma, &w.norm_beta, &w.out_w, &w.out_b,
                    &w.norm_state.running_mean}) {
    for (double& v : t->mutable_data()) v = rng.normal(0.0, 0.5);
  }
  for (double& v : w.norm_state.running_var.mutable_data()) v = rng.uniform(0.5, 2.0);
}

}  // namespace crossing::oracle
