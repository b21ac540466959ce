#ifndef TWINS_OPS_HPP
#define TWINS_OPS_HPP

#include <algorithm>
#include <cmath>
#include <memory>
#include <span>
#include <vector>

#include "twins/tape.hpp"

// Differentiable operations. Each free function evaluates eagerly, records the
// result on the inputs' tape and registers the matching adjoint.

namespace twins {

namespace detail {

template <typename Scalar>
void require_same_shape(const Var<Scalar>& a, const Var<Scalar>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw InvalidArgument(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " +
                          to_string(b.shape()));
  }
}

template <typename Scalar>
using RowMatrix = typename Tensor<Scalar>::Matrix;

// Row-major storage viewed as a flat vector.
template <typename Derived>
auto flat(const Eigen::PlainObjectBase<Derived>& m) {
  using Scalar = typename Derived::Scalar;
  return Eigen::Map<const Eigen::Matrix<Scalar, Eigen::Dynamic, 1>>(m.data(), m.size());
}

struct ConvGeometry {
  Index channels, height, width;
  Index kernel_h, kernel_w;
  Index stride, pad;
  Index out_h, out_w;

  Index patch_size() const { return channels * kernel_h * kernel_w; }
  Index positions() const { return out_h * out_w; }
};

// Unfolds one sample [C,H,W] into columns [C*kh*kw, out_h*out_w] with zero padding.
template <typename Scalar>
void im2col(const Scalar* image, const ConvGeometry& g, RowMatrix<Scalar>& cols) {
  cols.resize(g.patch_size(), g.positions());
  for (Index c = 0; c < g.channels; ++c) {
    for (Index ki = 0; ki < g.kernel_h; ++ki) {
      for (Index kj = 0; kj < g.kernel_w; ++kj) {
        const Index row = (c * g.kernel_h + ki) * g.kernel_w + kj;
        for (Index oi = 0; oi < g.out_h; ++oi) {
          const Index ii = oi * g.stride + ki - g.pad;
          for (Index oj = 0; oj < g.out_w; ++oj) {
            const Index jj = oj * g.stride + kj - g.pad;
            const bool inside = ii >= 0 && ii < g.height && jj >= 0 && jj < g.width;
            cols(row, oi * g.out_w + oj) = inside ? image[(c * g.height + ii) * g.width + jj] : Scalar(0);
          }
        }
      }
    }
  }
}

template <typename Scalar>
void col2im_add(const RowMatrix<Scalar>& cols, const ConvGeometry& g, Scalar* image) {
  for (Index c = 0; c < g.channels; ++c) {
    for (Index ki = 0; ki < g.kernel_h; ++ki) {
      for (Index kj = 0; kj < g.kernel_w; ++kj) {
        const Index row = (c * g.kernel_h + ki) * g.kernel_w + kj;
        for (Index oi = 0; oi < g.out_h; ++oi) {
          const Index ii = oi * g.stride + ki - g.pad;
          if (ii < 0 || ii >= g.height) continue;
          for (Index oj = 0; oj < g.out_w; ++oj) {
            const Index jj = oj * g.stride + kj - g.pad;
            if (jj < 0 || jj >= g.width) continue;
            image[(c * g.height + ii) * g.width + jj] += cols(row, oi * g.out_w + oj);
          }
        }
      }
    }
  }
}

// Log-softmax of each row, stabilized by subtracting the row max.
template <typename Scalar>
RowMatrix<Scalar> log_softmax_rows(const Eigen::Ref<const RowMatrix<Scalar>>& logits) {
  RowMatrix<Scalar> out = logits.colwise() - logits.rowwise().maxCoeff();
  const auto lse = out.array().exp().rowwise().sum().log().matrix().eval();
  out.colwise() -= lse;
  return out;
}

// Per-channel view of an [N,C,...] tensor: channel c, sample n is a contiguous run of `spatial` values.
struct ChannelLayout {
  Index batch, channels, spatial;
};

template <typename Scalar>
ChannelLayout channel_layout(const Tensor<Scalar>& x) {
  if (x.rank() < 2) throw InvalidArgument("per-channel op needs rank >= 2, got " + to_string(x.shape()));
  return {x.dim(0), x.dim(1), x.size() / (x.dim(0) * x.dim(1))};
}

}  // namespace detail

template <typename Scalar>
Var<Scalar> matmul(const Var<Scalar>& a, const Var<Scalar>& b) {
  if (a.value().rank() != 2 || b.value().rank() != 2 || a.shape()[1] != b.shape()[0]) {
    throw InvalidArgument("matmul: incompatible shapes " + to_string(a.shape()) + " x " + to_string(b.shape()));
  }
  Tensor<Scalar> out({a.shape()[0], b.shape()[1]});
  out.matrix().noalias() = a.value().matrix() * b.value().matrix();
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), {a, b}, [ia, ib](Tape<Scalar>& t, std::size_t self) {
    const auto& out_v = t.value(self);
    const auto up = Eigen::Map<const detail::RowMatrix<Scalar>>(t.adjoint_data(self).data(), out_v.dim(0), out_v.dim(1));
    if (t.requires_grad(ia)) {
      detail::RowMatrix<Scalar> da = up * t.value(ib).matrix().transpose();
      t.accumulate(ia, detail::flat(da));
    }
    if (t.requires_grad(ib)) {
      detail::RowMatrix<Scalar> db = t.value(ia).matrix().transpose() * up;
      t.accumulate(ib, detail::flat(db));
    }
  });
}

/// x[N,K] + bias[K] broadcast over rows.
template <typename Scalar>
Var<Scalar> add_bias(const Var<Scalar>& x, const Var<Scalar>& bias) {
  if (x.value().rank() != 2 || bias.value().rank() != 1 || bias.shape()[0] != x.shape()[1]) {
    throw InvalidArgument("add_bias: shapes " + to_string(x.shape()) + " and " + to_string(bias.shape()));
  }
  Tensor<Scalar> out = x.value();
  out.matrix().rowwise() += bias.value().data().transpose();
  const std::size_t ix = x.id(), ib = bias.id();
  return x.tape().record(std::move(out), {x, bias}, [ix, ib](Tape<Scalar>& t, std::size_t self) {
    const auto& up = t.adjoint_data(self);
    t.accumulate(ix, up);
    const Index cols = t.value(ib).size();
    const auto m = Eigen::Map<const detail::RowMatrix<Scalar>>(up.data(), up.size() / cols, cols);
    t.accumulate(ib, m.colwise().sum().transpose());
  });
}

template <typename Scalar>
Var<Scalar> add(const Var<Scalar>& a, const Var<Scalar>& b) {
  detail::require_same_shape(a, b, "add");
  Tensor<Scalar> out(a.shape(), a.value().data() + b.value().data());
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), {a, b}, [ia, ib](Tape<Scalar>& t, std::size_t self) {
    t.accumulate(ia, t.adjoint_data(self));
    t.accumulate(ib, t.adjoint_data(self));
  });
}

template <typename Scalar>
Var<Scalar> sub(const Var<Scalar>& a, const Var<Scalar>& b) {
  detail::require_same_shape(a, b, "sub");
  Tensor<Scalar> out(a.shape(), a.value().data() - b.value().data());
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), {a, b}, [ia, ib](Tape<Scalar>& t, std::size_t self) {
    t.accumulate(ia, t.adjoint_data(self));
    t.accumulate(ib, -t.adjoint_data(self));
  });
}

/// Elementwise product.
template <typename Scalar>
Var<Scalar> mul(const Var<Scalar>& a, const Var<Scalar>& b) {
  detail::require_same_shape(a, b, "mul");
  Tensor<Scalar> out(a.shape(), a.value().data().cwiseProduct(b.value().data()));
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), {a, b}, [ia, ib](Tape<Scalar>& t, std::size_t self) {
    const auto& up = t.adjoint_data(self);
    t.accumulate(ia, up.cwiseProduct(t.value(ib).data()));
    t.accumulate(ib, up.cwiseProduct(t.value(ia).data()));
  });
}

template <typename Scalar>
Var<Scalar> scale(const Var<Scalar>& a, Scalar factor) {
  Tensor<Scalar> out(a.shape(), a.value().data() * factor);
  const std::size_t ia = a.id();
  return a.tape().record(std::move(out), {a}, [ia, factor](Tape<Scalar>& t, std::size_t self) {
    t.accumulate(ia, t.adjoint_data(self) * factor);
  });
}

template <typename Scalar>
Var<Scalar> sum(const Var<Scalar>& a) {
  const std::size_t ia = a.id();
  const Index n = a.value().size();
  return a.tape().record(Tensor<Scalar>::scalar(a.value().data().sum()), {a},
                         [ia, n](Tape<Scalar>& t, std::size_t self) {
                           t.accumulate(ia, Tensor<Scalar>::Vector::Constant(n, t.adjoint_data(self)[0]));
                         });
}

template <typename Scalar>
Var<Scalar> relu(const Var<Scalar>& x) {
  Tensor<Scalar> out(x.shape(), x.value().data().cwiseMax(Scalar(0)));
  const std::size_t ix = x.id();
  return x.tape().record(std::move(out), {x}, [ix](Tape<Scalar>& t, std::size_t self) {
    // Subgradient at exactly zero is zero.
    const auto mask = (t.value(ix).data().array() > Scalar(0)).template cast<Scalar>();
    t.accumulate(ix, (t.adjoint_data(self).array() * mask).matrix());
  });
}

/// Cross-correlation of x[N,C,H,W] with k[O,C,kh,kw], zero padding.
template <typename Scalar>
Var<Scalar> conv2d(const Var<Scalar>& x, const Var<Scalar>& k, Index stride, Index pad) {
  const auto& xs = x.shape();
  const auto& ks = k.shape();
  if (xs.size() != 4 || ks.size() != 4) {
    throw InvalidArgument("conv2d: expected rank-4 input and kernel, got " + to_string(xs) + " and " + to_string(ks));
  }
  if (xs[1] != ks[1]) {
    throw InvalidArgument("conv2d: input has " + std::to_string(xs[1]) + " channels, kernel expects " +
                          std::to_string(ks[1]));
  }
  if (stride < 1 || pad < 0 || ks[2] > xs[2] + 2 * pad || ks[3] > xs[3] + 2 * pad) {
    throw InvalidArgument("conv2d: invalid stride/pad/kernel extent");
  }
  const detail::ConvGeometry g{xs[1], xs[2], xs[3], ks[2], ks[3], stride, pad,
                               (xs[2] + 2 * pad - ks[2]) / stride + 1, (xs[3] + 2 * pad - ks[3]) / stride + 1};
  const Index batch = xs[0];
  const Index out_channels = ks[0];

  auto cols = std::make_shared<std::vector<detail::RowMatrix<Scalar>>>(static_cast<std::size_t>(batch));
  const auto kernel = k.value().matrix();  // [O, C*kh*kw]
  Tensor<Scalar> out({batch, out_channels, g.out_h, g.out_w});
  for (Index n = 0; n < batch; ++n) {
    auto& c = (*cols)[static_cast<std::size_t>(n)];
    detail::im2col(x.value().raw() + n * g.channels * g.height * g.width, g, c);
    Eigen::Map<detail::RowMatrix<Scalar>>(out.raw() + n * out_channels * g.positions(), out_channels,
                                          g.positions())
        .noalias() = kernel * c;
  }

  const std::size_t ix = x.id(), ik = k.id();
  return x.tape().record(std::move(out), {x, k}, [ix, ik, g, batch, out_channels, cols](Tape<Scalar>& t, std::size_t self) {
    const auto& up = t.adjoint_data(self);
    const auto kernel = t.value(ik).matrix();
    const bool want_x = t.requires_grad(ix);
    const bool want_k = t.requires_grad(ik);
    detail::RowMatrix<Scalar> dk = detail::RowMatrix<Scalar>::Zero(out_channels, g.patch_size());
    typename Tensor<Scalar>::Vector dx;
    if (want_x) dx = Tensor<Scalar>::Vector::Zero(t.value(ix).size());
    detail::RowMatrix<Scalar> dcols;
    for (Index n = 0; n < batch; ++n) {
      const auto dy = Eigen::Map<const detail::RowMatrix<Scalar>>(up.data() + n * out_channels * g.positions(),
                                                                  out_channels, g.positions());
      if (want_k) dk.noalias() += dy * (*cols)[static_cast<std::size_t>(n)].transpose();
      if (want_x) {
        dcols.noalias() = kernel.transpose() * dy;
        detail::col2im_add(dcols, g, dx.data() + n * g.channels * g.height * g.width);
      }
    }
    if (want_k) t.accumulate(ik, detail::flat(dk));
    if (want_x) t.accumulate(ix, dx);
  });
}

/// Spatial mean per channel: [N,C,H,W] -> [N,C].
template <typename Scalar>
Var<Scalar> global_avg_pool(const Var<Scalar>& x) {
  if (x.value().rank() != 4) throw InvalidArgument("global_avg_pool: expected rank 4, got " + to_string(x.shape()));
  const Index rows = x.shape()[0] * x.shape()[1];
  const Index area = x.shape()[2] * x.shape()[3];
  const auto m = Eigen::Map<const detail::RowMatrix<Scalar>>(x.value().raw(), rows, area);
  Tensor<Scalar> out({x.shape()[0], x.shape()[1]}, m.rowwise().mean());
  const std::size_t ix = x.id();
  return x.tape().record(std::move(out), {x}, [ix, rows, area](Tape<Scalar>& t, std::size_t self) {
    detail::RowMatrix<Scalar> dx = (t.adjoint_data(self) / Scalar(area)).replicate(1, area);
    t.accumulate(ix, detail::flat(dx));
  });
}

/// Mean over rows of -log softmax(logits)[label].
template <typename Scalar>
Var<Scalar> softmax_cross_entropy(const Var<Scalar>& logits, std::span<const int> labels) {
  if (logits.value().rank() != 2 || logits.shape()[0] != static_cast<Index>(labels.size())) {
    throw InvalidArgument("softmax_cross_entropy: logits " + to_string(logits.shape()) + " vs " +
                          std::to_string(labels.size()) + " labels");
  }
  const Index n = logits.shape()[0];
  const Index k = logits.shape()[1];
  for (int label : labels) {
    if (label < 0 || label >= k) {
      throw InvalidArgument("softmax_cross_entropy: label " + std::to_string(label) + " outside [0," +
                            std::to_string(k) + ")");
    }
  }
  auto log_probs = std::make_shared<detail::RowMatrix<Scalar>>(detail::log_softmax_rows<Scalar>(logits.value().matrix()));
  Scalar total = 0;
  for (Index i = 0; i < n; ++i) total -= (*log_probs)(i, labels[static_cast<std::size_t>(i)]);
  const std::size_t il = logits.id();
  return logits.tape().record(
      Tensor<Scalar>::scalar(total / Scalar(n)), {logits},
      [il, n, log_probs, labels = std::vector<int>(labels.begin(), labels.end())](Tape<Scalar>& t, std::size_t self) {
        detail::RowMatrix<Scalar> d = log_probs->array().exp();
        for (Index i = 0; i < n; ++i) d(i, labels[static_cast<std::size_t>(i)]) -= Scalar(1);
        d *= t.adjoint_data(self)[0] / Scalar(n);
        t.accumulate(il, detail::flat(d));
      });
}

/// Mean over rows of KL(softmax(p) || softmax(q)).
template <typename Scalar>
Var<Scalar> kl_div_logits(const Var<Scalar>& p, const Var<Scalar>& q) {
  detail::require_same_shape(p, q, "kl_div_logits");
  if (p.value().rank() != 2) throw InvalidArgument("kl_div_logits: expected [N,K] logits");
  const Index n = p.shape()[0];
  const auto log_p = detail::log_softmax_rows<Scalar>(p.value().matrix());
  const auto log_q = detail::log_softmax_rows<Scalar>(q.value().matrix());
  const detail::RowMatrix<Scalar> prob_p = log_p.array().exp();
  const detail::RowMatrix<Scalar> diff = log_p - log_q;
  auto row_kl = std::make_shared<Eigen::Matrix<Scalar, Eigen::Dynamic, 1>>(prob_p.cwiseProduct(diff).rowwise().sum());
  auto saved = std::make_shared<std::pair<detail::RowMatrix<Scalar>, detail::RowMatrix<Scalar>>>(prob_p, diff);
  auto prob_q = std::make_shared<detail::RowMatrix<Scalar>>(log_q.array().exp());
  const std::size_t ip = p.id(), iq = q.id();
  return p.tape().record(
      Tensor<Scalar>::scalar(row_kl->sum() / Scalar(n)), {p, q},
      [ip, iq, n, row_kl, saved, prob_q](Tape<Scalar>& t, std::size_t self) {
        const Scalar s = t.adjoint_data(self)[0] / Scalar(n);
        const auto& [prob_p, diff] = *saved;
        if (t.requires_grad(ip)) {
          detail::RowMatrix<Scalar> dp = prob_p.cwiseProduct(diff.colwise() - *row_kl) * s;
          t.accumulate(ip, detail::flat(dp));
        }
        if (t.requires_grad(iq)) {
          detail::RowMatrix<Scalar> dq = (*prob_q - prob_p) * s;
          t.accumulate(iq, detail::flat(dq));
        }
      });
}

/// Mean over rows of the Euclidean distance ||a_i - b_i||; the subgradient at a_i == b_i is zero.
template <typename Scalar>
Var<Scalar> mean_row_distance(const Var<Scalar>& a, const Var<Scalar>& b) {
  detail::require_same_shape(a, b, "mean_row_distance");
  if (a.value().rank() != 2) throw InvalidArgument("mean_row_distance: expected [N,F] inputs");
  const Index n = a.shape()[0];
  auto diff = std::make_shared<detail::RowMatrix<Scalar>>(a.value().matrix() - b.value().matrix());
  auto norms = std::make_shared<Eigen::Matrix<Scalar, Eigen::Dynamic, 1>>(diff->rowwise().norm());
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record(Tensor<Scalar>::scalar(norms->sum() / Scalar(n)), {a, b},
                         [ia, ib, n, diff, norms](Tape<Scalar>& t, std::size_t self) {
                           const Scalar s = t.adjoint_data(self)[0] / Scalar(n);
                           detail::RowMatrix<Scalar> d = *diff;
                           for (Index i = 0; i < n; ++i) {
                             const Scalar r = (*norms)(i);
                             d.row(i) *= r > Scalar(0) ? s / r : Scalar(0);
                           }
                           t.accumulate(ia, detail::flat(d));
                           t.accumulate(ib, -detail::flat(d));
                         });
}

/// Per-channel batch statistics of an [N,C,...] tensor (biased variance).
template <typename Scalar>
struct ChannelStats {
  typename Tensor<Scalar>::Vector mean;
  typename Tensor<Scalar>::Vector var;
};

template <typename Scalar>
ChannelStats<Scalar> channel_stats(const Tensor<Scalar>& x) {
  const auto l = detail::channel_layout(x);
  const Index count = l.batch * l.spatial;
  ChannelStats<Scalar> s{Tensor<Scalar>::Vector::Zero(l.channels), Tensor<Scalar>::Vector::Zero(l.channels)};
  for (Index n = 0; n < l.batch; ++n)
    for (Index c = 0; c < l.channels; ++c)
      s.mean(c) += x.data().segment((n * l.channels + c) * l.spatial, l.spatial).sum();
  s.mean /= Scalar(count);
  for (Index n = 0; n < l.batch; ++n)
    for (Index c = 0; c < l.channels; ++c)
      s.var(c) += (x.data().segment((n * l.channels + c) * l.spatial, l.spatial).array() - s.mean(c)).square().sum();
  s.var /= Scalar(count);
  return s;
}

/// (x - batch_mean) / sqrt(batch_var + eps) per channel; statistics are differentiated through.
template <typename Scalar>
Var<Scalar> normalize_batch(const Var<Scalar>& x, Scalar eps, ChannelStats<Scalar>* stats_out = nullptr) {
  const auto l = detail::channel_layout(x.value());
  if (l.batch < 2) throw InvalidArgument("batch normalization needs at least 2 samples, got " + std::to_string(l.batch));
  const auto stats = channel_stats(x.value());
  if (stats_out) *stats_out = stats;
  auto inv_std = std::make_shared<typename Tensor<Scalar>::Vector>((stats.var.array() + eps).rsqrt().matrix());
  Tensor<Scalar> out(x.shape());
  for (Index n = 0; n < l.batch; ++n)
    for (Index c = 0; c < l.channels; ++c) {
      const Index off = (n * l.channels + c) * l.spatial;
      out.data().segment(off, l.spatial) = (x.value().data().segment(off, l.spatial).array() - stats.mean(c)) * (*inv_std)(c);
    }
  const std::size_t ix = x.id();
  return x.tape().record(std::move(out), {x}, [ix, l, inv_std](Tape<Scalar>& t, std::size_t self) {
    const auto& up = t.adjoint_data(self);
    const auto& y = t.value(self).data();
    const Scalar count = Scalar(l.batch * l.spatial);
    typename Tensor<Scalar>::Vector mean_up = Tensor<Scalar>::Vector::Zero(l.channels);
    typename Tensor<Scalar>::Vector mean_up_y = Tensor<Scalar>::Vector::Zero(l.channels);
    for (Index n = 0; n < l.batch; ++n)
      for (Index c = 0; c < l.channels; ++c) {
        const Index off = (n * l.channels + c) * l.spatial;
        mean_up(c) += up.segment(off, l.spatial).sum();
        mean_up_y(c) += up.segment(off, l.spatial).dot(y.segment(off, l.spatial));
      }
    mean_up /= count;
    mean_up_y /= count;
    typename Tensor<Scalar>::Vector dx(up.size());
    for (Index n = 0; n < l.batch; ++n)
      for (Index c = 0; c < l.channels; ++c) {
        const Index off = (n * l.channels + c) * l.spatial;
        dx.segment(off, l.spatial) =
            (up.segment(off, l.spatial).array() - mean_up(c) - y.segment(off, l.spatial).array() * mean_up_y(c)) *
            (*inv_std)(c);
      }
    t.accumulate(ix, dx);
  });
}

/// (x - mean) / sqrt(var + eps) per channel with constant statistics.
template <typename Scalar>
Var<Scalar> normalize_fixed(const Var<Scalar>& x, const typename Tensor<Scalar>::Vector& mean,
                            const typename Tensor<Scalar>::Vector& var, Scalar eps) {
  const auto l = detail::channel_layout(x.value());
  if (mean.size() != l.channels || var.size() != l.channels) {
    throw InvalidArgument("normalize_fixed: statistics do not match channel count");
  }
  auto inv_std = std::make_shared<typename Tensor<Scalar>::Vector>((var.array() + eps).rsqrt().matrix());
  Tensor<Scalar> out(x.shape());
  for (Index n = 0; n < l.batch; ++n)
    for (Index c = 0; c < l.channels; ++c) {
      const Index off = (n * l.channels + c) * l.spatial;
      out.data().segment(off, l.spatial) = (x.value().data().segment(off, l.spatial).array() - mean(c)) * (*inv_std)(c);
    }
  const std::size_t ix = x.id();
  return x.tape().record(std::move(out), {x}, [ix, l, inv_std](Tape<Scalar>& t, std::size_t self) {
    const auto& up = t.adjoint_data(self);
    typename Tensor<Scalar>::Vector dx(up.size());
    for (Index n = 0; n < l.batch; ++n)
      for (Index c = 0; c < l.channels; ++c) {
        const Index off = (n * l.channels + c) * l.spatial;
        dx.segment(off, l.spatial) = up.segment(off, l.spatial) * (*inv_std)(c);
      }
    t.accumulate(ix, dx);
  });
}

/// gamma[c] * x + beta[c] per channel.
template <typename Scalar>
Var<Scalar> channel_affine(const Var<Scalar>& x, const Var<Scalar>& gamma, const Var<Scalar>& beta) {
  const auto l = detail::channel_layout(x.value());
  if (gamma.value().size() != l.channels || beta.value().size() != l.channels) {
    throw InvalidArgument("channel_affine: affine parameters do not match channel count");
  }
  Tensor<Scalar> out(x.shape());
  const auto& g = gamma.value().data();
  const auto& b = beta.value().data();
  for (Index n = 0; n < l.batch; ++n)
    for (Index c = 0; c < l.channels; ++c) {
      const Index off = (n * l.channels + c) * l.spatial;
      out.data().segment(off, l.spatial) = (x.value().data().segment(off, l.spatial).array() * g(c) + b(c)).matrix();
    }
  const std::size_t ix = x.id(), ig = gamma.id(), ib = beta.id();
  return x.tape().record(std::move(out), {x, gamma, beta}, [ix, ig, ib, l](Tape<Scalar>& t, std::size_t self) {
    const auto& up = t.adjoint_data(self);
    const auto& xv = t.value(ix).data();
    const auto& g = t.value(ig).data();
    typename Tensor<Scalar>::Vector dx(up.size());
    typename Tensor<Scalar>::Vector dg = Tensor<Scalar>::Vector::Zero(l.channels);
    typename Tensor<Scalar>::Vector db = Tensor<Scalar>::Vector::Zero(l.channels);
    for (Index n = 0; n < l.batch; ++n)
      for (Index c = 0; c < l.channels; ++c) {
        const Index off = (n * l.channels + c) * l.spatial;
        dx.segment(off, l.spatial) = up.segment(off, l.spatial) * g(c);
        dg(c) += up.segment(off, l.spatial).dot(xv.segment(off, l.spatial));
        db(c) += up.segment(off, l.spatial).sum();
      }
    t.accumulate(ix, dx);
    t.accumulate(ig, dg);
    t.accumulate(ib, db);
  });
}

}  // namespace twins

#endif  // TWINS_OPS_HPP
