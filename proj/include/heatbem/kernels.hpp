#pragma once

#include <algorithm>
#include <cfloat>
#include <cmath>
#include <limits>
#include <numbers>
#include <span>
#include <stdexcept>
#include <vector>

#include "heatbem/error.hpp"
#include "heatbem/quadrature.hpp"
#include "heatbem/temporal.hpp"

namespace heatbem {

/// Heat kernel of the unit-diffusivity heat equation in three dimensions,
/// as a function of the squared distance and the time difference.
inline double heat_kernel(double r_sq, double t) {
  if (std::isnan(r_sq) || std::isnan(t)) throw NumericalError("heat_kernel: NaN argument");
  if (t <= 0.0) return 0.0;
  const double e = -r_sq / (4.0 * t);
  if (e < std::log(DBL_MIN)) return 0.0;
  return std::pow(4.0 * std::numbers::pi * t, -1.5) * std::exp(e);
}

/// Heat kernel between a test time node t_beta and a trial time node
/// tau_beta'. The far-field separation guarantees t_beta > tau_beta'.
inline double kernel_at_cheb_nodes(double r_sq, double t_beta, double tau_beta) {
  if (!(t_beta > tau_beta)) throw std::domain_error("kernel_at_cheb_nodes: time nodes are not separated");
  return heat_kernel(r_sq, t_beta - tau_beta);
}

/// Repeated integrals i^k erfc(x), k = 0..out.size()-1, for x >= 0.
inline void iterated_erfc(double x, std::span<double> out) {
  if (out.empty()) return;
  if (x < 0.0 || std::isnan(x)) throw std::domain_error("iterated_erfc needs x >= 0");
  const double e0 = std::erfc(x);
  out[0] = e0;
  const int kmax = static_cast<int>(out.size()) - 1;
  if (kmax == 0) return;
  if (x < 0.5) {
    out[1] = std::exp(-x * x) / std::sqrt(std::numbers::pi) - x * e0;
    for (int n = 2; n <= kmax; ++n) out[n] = (out[n - 2] - 2.0 * x * out[n - 1]) / (2.0 * n);
    return;
  }
  if (e0 == 0.0) {
    std::fill(out.begin(), out.end(), 0.0);
    return;
  }
  // Continued fraction for the ratios i^k / i^(k-1), run downwards.
  const int N = kmax + 40 + static_cast<int>(std::ceil(250.0 / (x * x)));
  std::vector<double> ratio(kmax + 1, 0.0);
  double r = 0.0;
  for (int k = N; k >= 1; --k) {
    r = 1.0 / (2.0 * x + 2.0 * (k + 1) * r);
    if (k <= kmax) ratio[k] = r;
  }
  for (int k = 1; k <= kmax; ++k) out[k] = out[k - 1] * ratio[k];
}

/// 1 / Gamma(y), zero at the poles.
inline double reciprocal_gamma(double y) {
  if (y <= 0.0 && y == std::floor(y)) return 0.0;
  return 1.0 / std::tgamma(y);
}

/// Galerkin time integral of the heat kernel against the temporal basis:
///   G_djj'(r) = int_{I_d} int_{I_0} G(r, t - tau) chi_j(t) chi_j'(tau) dtau dt
/// for offsets d = 0..num_offsets-1. The closed form through the iterated
/// error function is used for d <= 1 and for large r; otherwise the integral
/// is rewritten over u = t - tau and evaluated by Gauss rules on the two unit
/// intervals covered by u. d = 0 carries the 1/r singularity at r = 0.
class TimeIntegratedKernel {
 public:
  TimeIntegratedKernel(double h, int pt, int num_offsets) : h_(h), pt_(pt), nd_(num_offsets) {
    if (!(h > 0.0) || pt < 0 || num_offsets < 1) throw std::invalid_argument("TimeIntegratedKernel: bad arguments");
    dt_ = pt + 1;
    nmax_ = 2 * pt + 2;
    terms_.resize(dt_ * dt_);
    for (int j = 0; j < dt_; ++j) {
      for (int jp = 0; jp < dt_; ++jp) {
        auto& list = terms_[j * dt_ + jp];
        for (int k = 0; k <= pt; ++k) {
          const double g0 = temporal_shape_derivative(pt, jp, k, 0.0);
          const double g1 = temporal_shape_derivative(pt, jp, k, 1.0);
          for (int l = 0; l <= pt; ++l) {
            const double f0 = temporal_shape_derivative(pt, j, l, 0.0);
            const double f1 = temporal_shape_derivative(pt, j, l, 1.0);
            const double c = ((l % 2) ? -1.0 : 1.0) * std::pow(h, -(k + l));
            const int n = k + l + 2;
            add_term(list, n, +1, c * g0 * f1);
            add_term(list, n, 0, -c * (g0 * f0 + g1 * f1));
            add_term(list, n, -1, c * g1 * f0);
          }
        }
      }
    }
    // Series coefficients of the regular part: (-1)^k / (k! Gamma(n - k/2)).
    series_.assign((nmax_ + 1) * kSeries, 0.0);
    for (int n = 2; n <= nmax_; ++n) {
      double fact = 1.0;
      for (int k = 1; k < kSeries; ++k) {
        fact *= k;
        series_[n * kSeries + k] = ((k % 2) ? -1.0 : 1.0) / fact * reciprocal_gamma(n - 0.5 * k);
      }
    }
    inv_fact_.assign(nmax_ + 1, 1.0);
    for (int n = 1; n <= nmax_; ++n) inv_fact_[n] = inv_fact_[n - 1] / n;
    // u = (d - 1 + v) h; piece 0 is v in [0, 1], piece 1 is v in [1, 2].
    const auto& gu = gauss_legendre(kConvPoints);
    const auto& gs = gauss_legendre(pt + 1);
    conv_weights_.assign(2 * kConvPoints * dt_ * dt_, 0.0);
    for (int piece = 0; piece < 2; ++piece) {
      for (int a = 0; a < kConvPoints; ++a) {
        const double v = piece + gu.nodes[a];
        const double lo = piece == 0 ? 0.0 : v - 1.0, hi = piece == 0 ? v : 1.0;
        double* w = &conv_weights_[(piece * kConvPoints + a) * dt_ * dt_];
        for (int b = 0; b <= pt; ++b) {
          const double s = lo + (hi - lo) * gs.nodes[b];
          const double wb = gu.weights[a] * gs.weights[b] * (hi - lo) * h * h;
          for (int j = 0; j < dt_; ++j) {
            for (int jp = 0; jp < dt_; ++jp) {
              w[j * dt_ + jp] += wb * temporal_shape(pt, j, s) * temporal_shape(pt, jp, 1.0 + s - v);
            }
          }
        }
      }
    }
  }

  double step() const { return h_; }
  int degree() const { return pt_; }
  int dofs_per_step() const { return dt_; }
  int num_offsets() const { return nd_; }

  /// Writes G_djj'(r) for d in [d_begin, d_end) to out[((d - d_begin) D_t + j) D_t + j'].
  /// At r = 0 the d = 0 values are +inf.
  void evaluate(double r, std::span<double> out, int d_begin = 0, int d_end = -1) const {
    if (d_end < 0) d_end = nd_;
    if (d_begin < 0 || d_end > nd_ || d_begin > d_end) throw std::out_of_range("offset range");
    if (static_cast<int>(out.size()) < (d_end - d_begin) * dt_ * dt_) throw std::invalid_argument("output too small");
    if (!(r >= 0.0)) throw NumericalError("TimeIntegratedKernel: invalid distance");
    if (d_begin == d_end) return;
    const int m_lo = std::max(1, d_begin - 1);
    const int m_hi = d_end;
    const int K = 2 * nmax_ - 1;
    const int nm = m_hi - m_lo + 1;
    // psi[(m - m_lo) * (nmax + 1) + n] and the regular parts alongside.
    thread_local std::vector<double> psi, reg, ie, xs;
    psi.assign(nm * (nmax_ + 1), 0.0);
    reg.assign(nm * (nmax_ + 1), 0.0);
    ie.resize(K);
    xs.resize(nm);
    thread_local std::vector<char> need;
    need.assign(nm, 0);
    for (int d = d_begin; d < d_end; ++d) {
      if (d >= 2 && r < kConvRange * 2.0 * std::sqrt((d - 1) * h_)) continue;
      for (int m = std::max(m_lo, d - 1); m <= std::min(m_hi, d + 1); ++m) need[m - m_lo] = 1;
    }
    for (int m = m_lo; m <= m_hi; ++m) {
      if (!need[m - m_lo]) continue;
      const double s = m * h_;
      const double x = r / (2.0 * std::sqrt(s));
      xs[m - m_lo] = x;
      iterated_erfc(x, std::span<double>(ie.data(), K));
      double* ps = &psi[(m - m_lo) * (nmax_ + 1)];
      double* rg = &reg[(m - m_lo) * (nmax_ + 1)];
      for (int n = 2; n <= nmax_; ++n) {
        ps[n] = std::pow(4.0 * s, n - 1) * ie[2 * n - 2];
        if (x < 1.5) {
          double sum = 0.0, pw = 1.0;
          const double* a = &series_[n * kSeries];
          for (int k = 1; k < kSeries; ++k) {
            const double t = a[k] * pw;
            sum += t;
            if (k > 4 && t != 0.0 && std::abs(t) < 1e-17 * std::abs(sum)) break;
            pw *= 2.0 * x;
          }
          rg[n] = std::pow(s, n - 1.5) * sum;
        } else {
          rg[n] = (ps[n] - std::pow(s, n - 1) * inv_fact_[n - 1]) / r;
        }
      }
    }
    const double four_pi = 4.0 * std::numbers::pi;
    const auto& gu = gauss_legendre(kConvPoints);
    thread_local std::vector<double> gk;
    thread_local std::vector<char> have;
    gk.resize(nm * kConvPoints);
    have.assign(nm, 0);
    for (int d = d_begin; d < d_end; ++d) {
      if (d >= 2 && r < kConvRange * 2.0 * std::sqrt((d - 1) * h_)) {
        double* o = &out[(d - d_begin) * dt_ * dt_];
        std::fill(o, o + dt_ * dt_, 0.0);
        for (int piece = 0; piece < 2; ++piece) {
          const int m = d + piece;
          double* g = &gk[(m - m_lo) * kConvPoints];
          if (!have[m - m_lo]) {
            for (int a = 0; a < kConvPoints; ++a) g[a] = heat_kernel(r * r, (m - 1 + gu.nodes[a]) * h_);
            have[m - m_lo] = 1;
          }
          for (int a = 0; a < kConvPoints; ++a) {
            const double* w = &conv_weights_[(piece * kConvPoints + a) * dt_ * dt_];
            for (int jj = 0; jj < dt_ * dt_; ++jj) o[jj] += g[a] * w[jj];
          }
        }
        continue;
      }
      const bool full = d + 1 <= m_hi && xs[d + 1 - m_lo] >= 1.0;
      for (int jj = 0; jj < dt_ * dt_; ++jj) {
        double v = 0.0, sing = 0.0;
        for (const auto& t : terms_[jj]) {
          const int m = d + t.shift;
          if (m <= 0) continue;
          const int idx = (m - m_lo) * (nmax_ + 1) + t.n;
          if (full) {
            v += t.coeff * psi[idx];
          } else {
            v += t.coeff * reg[idx];
            if (d == 0) sing += t.coeff * std::pow(m * h_, t.n - 1) * inv_fact_[t.n - 1];
          }
        }
        double g;
        if (full) {
          g = v / (four_pi * r);
        } else {
          g = v / four_pi;
          if (d == 0) g += (r > 0.0 ? sing / (four_pi * r) : std::numeric_limits<double>::infinity());
        }
        out[(d - d_begin) * dt_ * dt_ + jj] = g;
      }
    }
  }

  double value(int d, int j, int jp, double r) const {
    std::vector<double> out(dt_ * dt_);
    evaluate(r, out, d, d + 1);
    return out[j * dt_ + jp];
  }

  /// Coefficient of 1/(4 pi r) in G_0jj', the temporal mass integral.
  double singular_coefficient(int j, int jp) const {
    double sing = 0.0;
    for (const auto& t : terms_[j * dt_ + jp]) {
      if (t.shift == 1) sing += t.coeff * std::pow(h_, t.n - 1) * inv_fact_[t.n - 1];
    }
    return sing;
  }

 private:
  static constexpr int kSeries = 96;
  static constexpr int kConvPoints = 12;
  static constexpr double kConvRange = 6.0;

  struct Term {
    int n;
    int shift;
    double coeff;
  };

  static void add_term(std::vector<Term>& list, int n, int shift, double c) {
    if (c == 0.0) return;
    for (auto& t : list) {
      if (t.n == n && t.shift == shift) {
        t.coeff += c;
        return;
      }
    }
    list.push_back({n, shift, c});
  }

  double h_;
  int pt_, nd_, dt_ = 1, nmax_ = 2;
  std::vector<std::vector<Term>> terms_;
  std::vector<double> series_;
  std::vector<double> inv_fact_;
  std::vector<double> conv_weights_;
};

/// Single entry G_djj'(r) in closed form.
inline double time_integrated_kernel(int d, int j, int jp, double r, double h, int pt) {
  if (d < 0) throw std::invalid_argument("negative temporal offset");
  TimeIntegratedKernel k(h, pt, d + 1);
  return k.value(d, j, jp, r);
}

/// G_djj'(r) for all shape pairs by an n x n Gauss rule in time; accurate
/// for d >= 2 where the integrand is smooth. out[j * D_t + j'].
inline void time_integrated_kernel_gauss(int d, double r, double h, int pt, int n, std::span<double> out) {
  const auto& g = gauss_legendre(n);
  const int dt = pt + 1;
  std::fill(out.begin(), out.begin() + dt * dt, 0.0);
  const double r_sq = r * r;
  for (int a = 0; a < n; ++a) {
    const double s = g.nodes[a];
    const double t = h * (d + s);
    for (int b = 0; b < n; ++b) {
      const double sp = g.nodes[b];
      const double tau = h * sp;
      const double w = g.weights[a] * g.weights[b] * h * h * heat_kernel(r_sq, t - tau);
      for (int j = 0; j < dt; ++j) {
        const double fj = temporal_shape(pt, j, s);
        for (int jp = 0; jp < dt; ++jp) out[j * dt + jp] += w * fj * temporal_shape(pt, jp, sp);
      }
    }
  }
}

}  // namespace heatbem
