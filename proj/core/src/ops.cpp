#include "deepssm/ops.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <vector>

#include "deepssm/parallel.hpp"

namespace deepssm::nn {

namespace {

std::atomic<std::size_t> g_compute_threads{1};

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapRowMat = Eigen::Map<RowMat>;
using MapConstRowMat = Eigen::Map<const RowMat>;
using MapVec = Eigen::Map<Eigen::VectorXd>;
using MapConstVec = Eigen::Map<const Eigen::VectorXd>;

void require(bool ok, const std::string& msg) {
  if (!ok) throw std::invalid_argument(msg);
}

double sigmoid(double u) {
  // Split on sign so exp never overflows.
  if (u >= 0.0) return 1.0 / (1.0 + std::exp(-u));
  const double e = std::exp(u);
  return e / (1.0 + e);
}

/// Expand one padded sample [Cin,D,H,W] into the patch matrix col[Cin·k³, D·H·W]
/// so that convolution becomes W[Cout,Cin·k³] · col. Out-of-bounds taps stay 0.
void im2col(const double* x, std::size_t cin, std::size_t d, std::size_t h,
            std::size_t w, std::size_t k, RowMat& col) {
  const std::size_t pad = k / 2;
  col.setZero();
  std::size_t r = 0;
  for (std::size_t ci = 0; ci < cin; ++ci) {
    for (std::size_t kz = 0; kz < k; ++kz) {
      for (std::size_t ky = 0; ky < k; ++ky) {
        for (std::size_t kx = 0; kx < k; ++kx, ++r) {
          double* dst = col.data() + r * col.cols();
          // Valid output-x range for this tap: in_x = x + kx − pad ∈ [0, w).
          const std::size_t x0 =
              (kx >= pad) ? 0 : pad - kx;  // first x with in_x ≥ 0
          const std::size_t x1 = (w + pad > kx) ? std::min(w, w + pad - kx) : 0;
          if (x0 >= x1) continue;
          for (std::size_t z = 0; z < d; ++z) {
            const std::size_t in_z = z + kz;  // then subtract pad, checked below
            if (in_z < pad || in_z - pad >= d) continue;
            for (std::size_t y = 0; y < h; ++y) {
              const std::size_t in_y = y + ky;
              if (in_y < pad || in_y - pad >= h) continue;
              const double* src = x + ((ci * d + (in_z - pad)) * h + (in_y - pad)) * w +
                                  ((x0 + kx) - pad);
              std::copy(src, src + (x1 - x0), dst + (z * h + y) * w + x0);
            }
          }
        }
      }
    }
  }
}

/// Scatter-add of the patch-matrix gradient back onto one sample's input grid
/// (exact adjoint of im2col).
void col2im_add(const RowMat& dcol, std::size_t cin, std::size_t d, std::size_t h,
                std::size_t w, std::size_t k, double* dx) {
  const std::size_t pad = k / 2;
  std::size_t r = 0;
  for (std::size_t ci = 0; ci < cin; ++ci) {
    for (std::size_t kz = 0; kz < k; ++kz) {
      for (std::size_t ky = 0; ky < k; ++ky) {
        for (std::size_t kx = 0; kx < k; ++kx, ++r) {
          const double* src = dcol.data() + r * dcol.cols();
          const std::size_t x0 = (kx >= pad) ? 0 : pad - kx;
          const std::size_t x1 = (w + pad > kx) ? std::min(w, w + pad - kx) : 0;
          if (x0 >= x1) continue;
          for (std::size_t z = 0; z < d; ++z) {
            const std::size_t in_z = z + kz;
            if (in_z < pad || in_z - pad >= d) continue;
            for (std::size_t y = 0; y < h; ++y) {
              const std::size_t in_y = y + ky;
              if (in_y < pad || in_y - pad >= h) continue;
              double* out = dx + ((ci * d + (in_z - pad)) * h + (in_y - pad)) * w;
              const double* s = src + (z * h + y) * w;
              for (std::size_t x = x0; x < x1; ++x) out[(x + kx) - pad] += s[x];
            }
          }
        }
      }
    }
  }
}

}  // namespace

void set_compute_threads(std::size_t n) {
  g_compute_threads.store(n == 0 ? 1 : n);
}
std::size_t compute_threads() { return g_compute_threads.load(); }

Tensor linear(Tape* tape, const Tensor& x, const Tensor& w, const Tensor& b) {
  require(x.rank() == 2, "linear: input must be [N,in], got " + shape_str(x.shape()));
  require(w.rank() == 2 && b.rank() == 1, "linear: weight must be [out,in], bias [out]");
  const std::size_t n = x.dim(0), in = x.dim(1), out = w.dim(0);
  require(w.dim(1) == in, "linear: weight expects " + std::to_string(w.dim(1)) +
                              " inputs, got " + std::to_string(in));
  require(b.dim(0) == out, "linear: bias size mismatch");

  Tensor y({n, out});
  {
    MapConstRowMat xm(x.data(), n, in), wm(w.data(), out, in);
    MapRowMat ym(y.data(), n, out);
    ym.noalias() = xm * wm.transpose();
    ym.rowwise() += MapConstVec(b.data(), out).transpose();
  }
  if (!tape) return y;
  tape->mark_produced(y);

  const bool need_x = tape->needs_grad(x);
  const bool need_w = tape->needs_grad(w);
  const bool need_b = tape->needs_grad(b);
  tape->record([=]() mutable {
    Tensor yt = y, xt = x, wt = w, bt = b;
    MapConstRowMat dy(yt.grad().data(), n, out);
    if (need_x) {
      MapConstRowMat wm(wt.data(), out, in);
      MapRowMat dx(xt.grad().data(), n, in);
      dx.noalias() += dy * wm;
    }
    if (need_w) {
      MapConstRowMat xm(xt.data(), n, in);
      MapRowMat dw(wt.grad().data(), out, in);
      dw.noalias() += dy.transpose() * xm;
    }
    if (need_b) {
      // Accumulated in a fixed order: Eigen's redux splits its vector loop at
      // the first aligned element, so its rounding depends on the buffer
      // address and same-process reruns would not be bit-identical.
      double* db = bt.grad().data();
      const double* dyd = yt.grad().data();
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t o = 0; o < out; ++o) db[o] += dyd[i * out + o];
    }
  });
  return y;
}

Tensor conv3d(Tape* tape, const Tensor& x, const Tensor& w, const Tensor& b) {
  require(x.rank() == 5, "conv3d: input must be [N,C,D,H,W], got " + shape_str(x.shape()));
  require(w.rank() == 5, "conv3d: weight must be [Cout,Cin,k,k,k]");
  const std::size_t n = x.dim(0), cin = x.dim(1), d = x.dim(2), h = x.dim(3),
                    wd = x.dim(4);
  const std::size_t cout = w.dim(0), k = w.dim(2);
  require(w.dim(1) == cin, "conv3d: kernel expects " + std::to_string(w.dim(1)) +
                               " input channels, input has " + std::to_string(cin));
  require(w.dim(3) == k && w.dim(4) == k && k % 2 == 1 && k >= 1,
          "conv3d: kernel must be cubic with odd extent, got " + shape_str(w.shape()));
  require(b.rank() == 1 && b.dim(0) == cout, "conv3d: bias size mismatch");

  const std::size_t patch = cin * k * k * k;   // rows of the im2col matrix
  const std::size_t voxels = d * h * wd;       // columns / output voxels per channel
  Tensor y({n, cout, d, h, wd});

  MapConstRowMat wm(w.data(), cout, patch);
  MapConstVec bv(b.data(), cout);
  parallel_for(n, compute_threads(), [&](std::size_t i) {
    RowMat col(patch, voxels);
    im2col(x.data() + i * cin * voxels, cin, d, h, wd, k, col);
    MapRowMat ym(y.data() + i * cout * voxels, cout, voxels);
    ym.noalias() = wm * col;
    ym.colwise() += bv;
  });
  if (!tape) return y;
  tape->mark_produced(y);

  const bool need_x = tape->needs_grad(x);
  const bool need_w = tape->needs_grad(w);
  const bool need_b = tape->needs_grad(b);
  tape->record([=]() mutable {
    Tensor yt = y, xt = x, wt = w, bt = b;
    MapConstRowMat wmat(wt.data(), cout, patch);
    // Serial over samples: weight/bias gradients accumulate across the batch.
    RowMat col(patch, voxels);
    for (std::size_t i = 0; i < n; ++i) {
      MapConstRowMat dy(yt.grad().data() + i * cout * voxels, cout, voxels);
      if (need_w || need_b) {
        if (need_w) {
          // Patches are recomputed here instead of saved in the forward pass:
          // one col matrix is ~MBs per layer and the batch would keep them all.
          im2col(xt.data() + i * cin * voxels, cin, d, h, wd, k, col);
          MapRowMat dw(wt.grad().data(), cout, patch);
          dw.noalias() += dy * col.transpose();
        }
        if (need_b) {
          // Fixed-order accumulation; see the bias gradient in linear().
          double* db = bt.grad().data();
          const double* dyd = yt.grad().data() + i * cout * voxels;
          for (std::size_t ch = 0; ch < cout; ++ch) {
            double s = 0.0;
            for (std::size_t j = 0; j < voxels; ++j) s += dyd[ch * voxels + j];
            db[ch] += s;
          }
        }
      }
      if (need_x) {
        RowMat dcol = wmat.transpose() * dy;
        col2im_add(dcol, cin, d, h, wd, k, xt.grad().data() + i * cin * voxels);
      }
    }
  });
  return y;
}

Tensor max_pool3d(Tape* tape, const Tensor& x, std::size_t factor) {
  require(x.rank() == 5, "max_pool3d: input must be [N,C,D,H,W]");
  require(factor >= 1, "max_pool3d: factor must be ≥ 1");
  const std::size_t n = x.dim(0), c = x.dim(1), d = x.dim(2), h = x.dim(3),
                    w = x.dim(4);
  const std::size_t od = d / factor, oh = h / factor, ow = w / factor;
  require(od >= 1 && oh >= 1 && ow >= 1, "max_pool3d: input smaller than window");

  Tensor y({n, c, od, oh, ow});
  std::vector<std::size_t> argmax(y.size());
  const double* xd = x.data();
  double* yd = y.data();
  std::size_t o = 0;
  for (std::size_t i = 0; i < n * c; ++i) {
    const double* plane = xd + i * d * h * w;
    for (std::size_t z = 0; z < od; ++z)
      for (std::size_t yy = 0; yy < oh; ++yy)
        for (std::size_t xx = 0; xx < ow; ++xx, ++o) {
          double best = -std::numeric_limits<double>::infinity();
          std::size_t best_at = 0;
          for (std::size_t dz = 0; dz < factor; ++dz)
            for (std::size_t dy = 0; dy < factor; ++dy)
              for (std::size_t dx = 0; dx < factor; ++dx) {
                const std::size_t at =
                    ((z * factor + dz) * h + (yy * factor + dy)) * w +
                    (xx * factor + dx);
                if (plane[at] > best) {
                  best = plane[at];
                  best_at = at;
                }
              }
          yd[o] = best;
          argmax[o] = i * d * h * w + best_at;
        }
  }
  if (!tape) return y;
  tape->mark_produced(y);
  if (tape->needs_grad(x)) {
    tape->record([y, x, argmax = std::move(argmax)]() mutable {
      Tensor yt = y, xt = x;
      auto dy = yt.grad();
      auto dx = xt.grad();
      for (std::size_t i = 0; i < dy.size(); ++i) dx[argmax[i]] += dy[i];
    });
  }
  return y;
}

Tensor batch_norm(Tape* tape, const Tensor& x, const Tensor& gamma,
                  const Tensor& beta, Tensor& running_mean, Tensor& running_var,
                  bool training, double momentum, double eps) {
  require(x.rank() >= 2, "batch_norm: input must have a channel axis (dim 1)");
  const std::size_t n = x.dim(0), c = x.dim(1);
  const std::size_t spatial = x.size() / (n * c);
  require(gamma.size() == c && beta.size() == c && running_mean.size() == c &&
              running_var.size() == c,
          "batch_norm: parameter size must equal channel count " + std::to_string(c));
  if (training && n < 2) {
    throw std::invalid_argument(
        "batch_norm: train mode needs batch ≥ 2 (variance of a single sample is "
        "undefined), got batch " + std::to_string(n));
  }

  // The statistics actually used for normalization this call.
  std::vector<double> mean(c), inv_std(c);
  const double* xd = x.data();
  if (training) {
    const double m = static_cast<double>(n * spatial);
    for (std::size_t ch = 0; ch < c; ++ch) {
      double s = 0.0, s2 = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        const double* p = xd + (i * c + ch) * spatial;
        for (std::size_t j = 0; j < spatial; ++j) {
          s += p[j];
          s2 += p[j] * p[j];
        }
      }
      const double mu = s / m;
      const double var = std::max(0.0, s2 / m - mu * mu);  // biased variance
      mean[ch] = mu;
      inv_std[ch] = 1.0 / std::sqrt(var + eps);
      running_mean[ch] = (1.0 - momentum) * running_mean[ch] + momentum * mu;
      running_var[ch] = (1.0 - momentum) * running_var[ch] + momentum * var;
    }
  } else {
    for (std::size_t ch = 0; ch < c; ++ch) {
      mean[ch] = running_mean[ch];
      inv_std[ch] = 1.0 / std::sqrt(running_var[ch] + eps);
    }
  }

  Tensor y(x.shape());
  double* yd = y.data();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t ch = 0; ch < c; ++ch) {
      const double* p = xd + (i * c + ch) * spatial;
      double* q = yd + (i * c + ch) * spatial;
      const double g = gamma[ch], bt = beta[ch], mu = mean[ch], is = inv_std[ch];
      for (std::size_t j = 0; j < spatial; ++j) q[j] = g * (p[j] - mu) * is + bt;
    }
  if (!tape) return y;
  tape->mark_produced(y);

  const bool need_x = tape->needs_grad(x);
  const bool need_g = tape->needs_grad(gamma);
  const bool need_b = tape->needs_grad(beta);
  if (!(need_x || need_g || need_b)) return y;
  tape->record([=, mean = std::move(mean), inv_std = std::move(inv_std)]() mutable {
    Tensor yt = y, xt = x, gt = gamma, btt = beta;
    auto dyv = yt.grad();
    const double m = static_cast<double>(n * spatial);
    for (std::size_t ch = 0; ch < c; ++ch) {
      const double mu = mean[ch], is = inv_std[ch], g = gt[ch];
      double sum_dy = 0.0, sum_dy_xh = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        const double* p = xt.data() + (i * c + ch) * spatial;
        const double* dy = dyv.data() + (i * c + ch) * spatial;
        for (std::size_t j = 0; j < spatial; ++j) {
          sum_dy += dy[j];
          sum_dy_xh += dy[j] * (p[j] - mu) * is;
        }
      }
      if (need_g) gt.grad()[ch] += sum_dy_xh;
      if (need_b) btt.grad()[ch] += sum_dy;
      if (!need_x) continue;
      for (std::size_t i = 0; i < n; ++i) {
        const double* p = xt.data() + (i * c + ch) * spatial;
        const double* dy = dyv.data() + (i * c + ch) * spatial;
        double* dx = xt.grad().data() + (i * c + ch) * spatial;
        if (training) {
          // d/dx of batch-statistic normalization (biased variance).
          for (std::size_t j = 0; j < spatial; ++j) {
            const double xh = (p[j] - mu) * is;
            dx[j] += g * is * (dy[j] - sum_dy / m - xh * sum_dy_xh / m);
          }
        } else {
          for (std::size_t j = 0; j < spatial; ++j) dx[j] += g * is * dy[j];
        }
      }
    }
  });
  return y;
}

Tensor prelu(Tape* tape, const Tensor& x, const Tensor& slope) {
  require(x.rank() >= 2, "prelu: input must have a channel axis (dim 1)");
  const std::size_t n = x.dim(0), c = x.dim(1);
  const std::size_t spatial = x.size() / (n * c);
  require(slope.size() == c,
          "prelu: need one slope per channel (" + std::to_string(c) + "), got " +
              std::to_string(slope.size()));

  Tensor y(x.shape());
  const double* xd = x.data();
  double* yd = y.data();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t ch = 0; ch < c; ++ch) {
      const double a = slope[ch];
      const double* p = xd + (i * c + ch) * spatial;
      double* q = yd + (i * c + ch) * spatial;
      for (std::size_t j = 0; j < spatial; ++j) q[j] = p[j] >= 0.0 ? p[j] : a * p[j];
    }
  if (!tape) return y;
  tape->mark_produced(y);

  const bool need_x = tape->needs_grad(x);
  const bool need_s = tape->needs_grad(slope);
  if (!(need_x || need_s)) return y;
  tape->record([=]() mutable {
    Tensor yt = y, xt = x, st = slope;
    auto dyv = yt.grad();
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t ch = 0; ch < c; ++ch) {
        const double a = st[ch];
        const double* p = xt.data() + (i * c + ch) * spatial;
        const double* dy = dyv.data() + (i * c + ch) * spatial;
        double* dx = need_x ? xt.grad().data() + (i * c + ch) * spatial : nullptr;
        double ds = 0.0;
        for (std::size_t j = 0; j < spatial; ++j) {
          if (p[j] >= 0.0) {
            if (dx) dx[j] += dy[j];
          } else {
            if (dx) dx[j] += a * dy[j];
            ds += p[j] * dy[j];
          }
        }
        if (need_s) st.grad()[ch] += ds;
      }
  });
  return y;
}

Tensor leaky_relu(Tape* tape, const Tensor& x, double negative_slope) {
  Tensor y(x.shape());
  const double* xd = x.data();
  double* yd = y.data();
  for (std::size_t i = 0; i < x.size(); ++i)
    yd[i] = xd[i] >= 0.0 ? xd[i] : negative_slope * xd[i];
  if (!tape) return y;
  tape->mark_produced(y);
  if (tape->needs_grad(x)) {
    tape->record([y, x, negative_slope]() mutable {
      Tensor yt = y, xt = x;
      auto dy = yt.grad();
      auto dx = xt.grad();
      const double* xd = xt.data();
      for (std::size_t i = 0; i < dy.size(); ++i)
        dx[i] += (xd[i] >= 0.0 ? 1.0 : negative_slope) * dy[i];
    });
  }
  return y;
}

Tensor flatten(Tape* tape, const Tensor& x) {
  require(x.rank() >= 1, "flatten: input must be non-scalar");
  const std::size_t n = x.dim(0);
  Tensor y({n, x.size() / n}, std::vector<double>(x.data(), x.data() + x.size()));
  if (!tape) return y;
  tape->mark_produced(y);
  if (tape->needs_grad(x)) {
    tape->record([y, x]() mutable {
      Tensor yt = y, xt = x;
      xt.accumulate_grad(yt.grad());
    });
  }
  return y;
}

Tensor add_scaled(Tape* tape, const Tensor& a, double alpha, const Tensor& b,
                  double beta) {
  require(a.shape() == b.shape(), "add_scaled: shape mismatch " +
                                      shape_str(a.shape()) + " vs " +
                                      shape_str(b.shape()));
  Tensor y(a.shape());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = alpha * a[i] + beta * b[i];
  if (!tape) return y;
  tape->mark_produced(y);
  const bool need_a = tape->needs_grad(a);
  const bool need_b = tape->needs_grad(b);
  if (!(need_a || need_b)) return y;
  tape->record([=]() mutable {
    Tensor yt = y, at = a, bt = b;
    auto dy = yt.grad();
    if (need_a) {
      auto da = at.grad();
      for (std::size_t i = 0; i < dy.size(); ++i) da[i] += alpha * dy[i];
    }
    if (need_b) {
      auto db = bt.grad();
      for (std::size_t i = 0; i < dy.size(); ++i) db[i] += beta * dy[i];
    }
  });
  return y;
}

Tensor mul(Tape* tape, const Tensor& a, const Tensor& b) {
  require(a.shape() == b.shape(), "mul: shape mismatch");
  Tensor y(a.shape());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = a[i] * b[i];
  if (!tape) return y;
  tape->mark_produced(y);
  const bool need_a = tape->needs_grad(a);
  const bool need_b = tape->needs_grad(b);
  if (!(need_a || need_b)) return y;
  tape->record([=]() mutable {
    Tensor yt = y, at = a, bt = b;
    auto dy = yt.grad();
    if (need_a) {
      auto da = at.grad();
      for (std::size_t i = 0; i < dy.size(); ++i) da[i] += bt[i] * dy[i];
    }
    if (need_b) {
      auto db = bt.grad();
      for (std::size_t i = 0; i < dy.size(); ++i) db[i] += at[i] * dy[i];
    }
  });
  return y;
}

Tensor sum(Tape* tape, const Tensor& x) {
  double s = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) s += x[i];
  Tensor y = Tensor::scalar(s);
  if (!tape) return y;
  tape->mark_produced(y);
  if (tape->needs_grad(x)) {
    tape->record([y, x]() mutable {
      Tensor yt = y, xt = x;
      const double dy = yt.grad()[0];
      auto dx = xt.grad();
      for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += dy;
    });
  }
  return y;
}

Tensor sse_rows_mean(Tape* tape, const Tensor& pred, const Tensor& target) {
  require(pred.shape() == target.shape(),
          "sse_rows_mean: shape mismatch " + shape_str(pred.shape()) + " vs " +
              shape_str(target.shape()));
  require(pred.rank() >= 1 && pred.dim(0) >= 1, "sse_rows_mean: empty batch");
  const std::size_t n = pred.dim(0);
  double s = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double d = pred[i] - target[i];
    s += d * d;
  }
  Tensor y = Tensor::scalar(s / static_cast<double>(n));
  if (!tape) return y;
  tape->mark_produced(y);
  const bool need_p = tape->needs_grad(pred);
  const bool need_t = tape->needs_grad(target);
  if (!(need_p || need_t)) return y;
  tape->record([=]() mutable {
    Tensor yt = y, pt = pred, tt = target;
    const double scale = 2.0 * yt.grad()[0] / static_cast<double>(n);
    if (need_p) {
      auto dp = pt.grad();
      for (std::size_t i = 0; i < dp.size(); ++i) dp[i] += scale * (pt[i] - tt[i]);
    }
    if (need_t) {
      auto dt = tt.grad();
      for (std::size_t i = 0; i < dt.size(); ++i) dt[i] -= scale * (pt[i] - tt[i]);
    }
  });
  return y;
}

Tensor focal_rows_mean(Tape* tape, const Tensor& pred, const Tensor& target,
                       double a, double c, std::size_t group_size) {
  require(pred.shape() == target.shape(), "focal: shape mismatch");
  require(pred.rank() == 2, "focal: expects [N,K] rows");
  require(a > 0.0 && c > 0.0, "focal: parameters a and c must be positive");
  const std::size_t n = pred.dim(0), k = pred.dim(1);
  require(group_size >= 1 && k % group_size == 0,
          "focal: row width " + std::to_string(k) + " not divisible by group size " +
              std::to_string(group_size));
  const std::size_t groups = k / group_size;
  const double denom = static_cast<double>(n * groups);

  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t g = 0; g < groups; ++g) {
      double e2 = 0.0;
      const std::size_t base = i * k + g * group_size;
      for (std::size_t j = 0; j < group_size; ++j) {
        const double d = pred[base + j] - target[base + j];
        e2 += d * d;
      }
      const double e = std::sqrt(e2);
      total += e2 * sigmoid(a * (e - c));
    }
  Tensor y = Tensor::scalar(total / denom);
  if (!tape) return y;
  tape->mark_produced(y);
  const bool need_p = tape->needs_grad(pred);
  const bool need_t = tape->needs_grad(target);
  if (!(need_p || need_t)) return y;
  tape->record([=]() mutable {
    Tensor yt = y, pt = pred, tt = target;
    const double dl = yt.grad()[0] / denom;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t g = 0; g < groups; ++g) {
        const std::size_t base = i * k + g * group_size;
        double e2 = 0.0;
        for (std::size_t j = 0; j < group_size; ++j) {
          const double d = pt[base + j] - tt[base + j];
          e2 += d * d;
        }
        const double e = std::sqrt(e2);
        if (e == 0.0) continue;  // f ∝ e² near 0, so the gradient vanishes
        const double s = sigmoid(a * (e - c));
        // df/de = 2e·s + e²·s·(1−s)·a; chain through de/dΔ_j = Δ_j/e.
        const double dfde = e * s * (2.0 + e * a * (1.0 - s));
        const double scale = dl * dfde / e;
        for (std::size_t j = 0; j < group_size; ++j) {
          const double d = pt[base + j] - tt[base + j];
          if (need_p) pt.grad()[base + j] += scale * d;
          if (need_t) tt.grad()[base + j] -= scale * d;
        }
      }
  });
  return y;
}

Tensor bce_with_logits(Tape* tape, const Tensor& logits, const Tensor& targets) {
  require(logits.size() == targets.size(), "bce: size mismatch");
  require(logits.size() >= 1, "bce: empty input");
  const std::size_t n = logits.size();
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double z = logits[i], t = targets[i];
    // max(z,0) − t·z + log(1 + exp(−|z|)): stable for large |z|.
    total += std::max(z, 0.0) - t * z + std::log1p(std::exp(-std::abs(z)));
  }
  Tensor y = Tensor::scalar(total / static_cast<double>(n));
  if (!tape) return y;
  tape->mark_produced(y);
  if (tape->needs_grad(logits)) {
    tape->record([y, logits, targets, n]() mutable {
      Tensor yt = y, zt = logits;
      const double dl = yt.grad()[0] / static_cast<double>(n);
      auto dz = zt.grad();
      for (std::size_t i = 0; i < n; ++i)
        dz[i] += dl * (sigmoid(zt[i]) - targets[i]);
    });
  }
  return y;
}

}  // namespace deepssm::nn
