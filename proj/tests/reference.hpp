#ifndef TWINS_TESTS_REFERENCE_HPP
#define TWINS_TESTS_REFERENCE_HPP

// Test-only reference: MiniCNN evaluated with plain nested loops on std::vector,
// sharing no code with the tape operations it is used to check.

#include <cmath>
#include <random>
#include <vector>

#include "twins/network.hpp"

namespace twins::reference {

struct Act {
  std::vector<double> v;
  Index n = 0, c = 0, h = 0, w = 0;
  double& at(Index i, Index ch, Index y, Index x) { return v[std::size_t(((i * c + ch) * h + y) * w + x)]; }
  double at(Index i, Index ch, Index y, Index x) const { return v[std::size_t(((i * c + ch) * h + y) * w + x)]; }
};

inline Act from_tensor(const Tensor<double>& t) {
  Act a{std::vector<double>(t.raw(), t.raw() + t.size()), t.dim(0), t.dim(1), t.dim(2), t.dim(3)};
  return a;
}

inline Act conv(const Act& x, const Tensor<double>& k, Index stride, Index pad) {
  const Index o = k.dim(0), kh = k.dim(2), kw = k.dim(3);
  Act y;
  y.n = x.n;
  y.c = o;
  y.h = (x.h + 2 * pad - kh) / stride + 1;
  y.w = (x.w + 2 * pad - kw) / stride + 1;
  y.v.assign(std::size_t(y.n * y.c * y.h * y.w), 0.0);
  for (Index i = 0; i < x.n; ++i)
    for (Index oc = 0; oc < o; ++oc)
      for (Index oy = 0; oy < y.h; ++oy)
        for (Index ox = 0; ox < y.w; ++ox) {
          double s = 0;
          for (Index ic = 0; ic < x.c; ++ic)
            for (Index a = 0; a < kh; ++a)
              for (Index b = 0; b < kw; ++b) {
                const Index iy = oy * stride + a - pad, ix = ox * stride + b - pad;
                if (iy < 0 || iy >= x.h || ix < 0 || ix >= x.w) continue;
                s += x.at(i, ic, iy, ix) * k[((oc * x.c + ic) * kh + a) * kw + b];
              }
          y.at(i, oc, oy, ox) = s;
        }
  return y;
}

struct Stats {
  std::vector<double> mean, var;
};

inline Stats batch_stats(const Act& x) {
  Stats s{std::vector<double>(std::size_t(x.c), 0.0), std::vector<double>(std::size_t(x.c), 0.0)};
  const double m = double(x.n * x.h * x.w);
  for (Index ch = 0; ch < x.c; ++ch) {
    double sum = 0;
    for (Index i = 0; i < x.n; ++i)
      for (Index y = 0; y < x.h; ++y)
        for (Index xx = 0; xx < x.w; ++xx) sum += x.at(i, ch, y, xx);
    const double mean = sum / m;
    double sq = 0;
    for (Index i = 0; i < x.n; ++i)
      for (Index y = 0; y < x.h; ++y)
        for (Index xx = 0; xx < x.w; ++xx) sq += (x.at(i, ch, y, xx) - mean) * (x.at(i, ch, y, xx) - mean);
    s.mean[std::size_t(ch)] = mean;
    s.var[std::size_t(ch)] = sq / m;
  }
  return s;
}

struct Output {
  std::vector<std::vector<double>> features;
  std::vector<std::vector<double>> logits;
  std::vector<Stats> stats;  // batch statistics per block (only meaningful for batch normalization)
};

inline Output forward(const Model<double>& model, NormPlan plan, const Tensor<double>& input, Head head = Head::Target) {
  Output out;
  Act h = from_tensor(input);
  for (int l = 0; l < kBlocks; ++l) {
    Act z = conv(h, model.params.at(names::conv(l)), 2, 1);
    const auto& st = model.bn[std::size_t(l)];
    const Stats bs = batch_stats(z);
    out.stats.push_back(bs);
    const auto& gamma = model.params.at(names::bn(l, plan.affine, "gamma"));
    const auto& beta = model.params.at(names::bn(l, plan.affine, "beta"));
    for (Index ch = 0; ch < z.c; ++ch) {
      double mean = 0, var = 0;
      switch (plan.stats) {
        case StatsSource::Batch: mean = bs.mean[std::size_t(ch)]; var = bs.var[std::size_t(ch)]; break;
        case StatsSource::Frozen: mean = st.frozen_mean(ch); var = st.frozen_var(ch); break;
        case StatsSource::Running: mean = st.running_mean(ch); var = st.running_var(ch); break;
      }
      const double sd = std::sqrt(var + st.eps);
      for (Index i = 0; i < z.n; ++i)
        for (Index y = 0; y < z.h; ++y)
          for (Index x = 0; x < z.w; ++x) {
            const double v = gamma[ch] * ((z.at(i, ch, y, x) - mean) / sd) + beta[ch];
            z.at(i, ch, y, x) = v > 0 ? v : 0;
          }
    }
    h = z;
  }
  const auto& wt = model.params.at(names::head_weight(head));
  const auto& bias = model.params.at(names::head_bias(head));
  const Index k = wt.dim(1);
  for (Index i = 0; i < h.n; ++i) {
    std::vector<double> f(std::size_t(h.c), 0.0);
    for (Index ch = 0; ch < h.c; ++ch) {
      double s = 0;
      for (Index y = 0; y < h.h; ++y)
        for (Index x = 0; x < h.w; ++x) s += h.at(i, ch, y, x);
      f[std::size_t(ch)] = s / double(h.h * h.w);
    }
    std::vector<double> z(std::size_t(k), 0.0);
    for (Index j = 0; j < k; ++j) {
      double s = bias[j];
      for (Index ch = 0; ch < h.c; ++ch) s += f[std::size_t(ch)] * wt[ch * k + j];
      z[std::size_t(j)] = s;
    }
    out.features.push_back(f);
    out.logits.push_back(z);
  }
  return out;
}

inline std::vector<double> log_softmax(const std::vector<double>& z) {
  double m = z[0];
  for (double v : z) m = std::max(m, v);
  double s = 0;
  for (double v : z) s += std::exp(v - m);
  std::vector<double> out;
  for (double v : z) out.push_back(v - m - std::log(s));
  return out;
}

inline double cross_entropy(const std::vector<std::vector<double>>& logits, const Labels& y) {
  double s = 0;
  for (std::size_t i = 0; i < logits.size(); ++i) s -= log_softmax(logits[i])[std::size_t(y[i])];
  return s / double(logits.size());
}

inline double kl(const std::vector<std::vector<double>>& p, const std::vector<std::vector<double>>& q) {
  double s = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const auto lp = log_softmax(p[i]), lq = log_softmax(q[i]);
    for (std::size_t k = 0; k < lp.size(); ++k) s += std::exp(lp[k]) * (lp[k] - lq[k]);
  }
  return s / double(p.size());
}

inline double mean_distance(const std::vector<std::vector<double>>& a, const std::vector<std::vector<double>>& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    double d = 0;
    for (std::size_t k = 0; k < a[i].size(); ++k) d += (a[i][k] - b[i][k]) * (a[i][k] - b[i][k]);
    s += std::sqrt(d);
  }
  return s / double(a.size());
}

}  // namespace twins::reference

#endif  // TWINS_TESTS_REFERENCE_HPP
