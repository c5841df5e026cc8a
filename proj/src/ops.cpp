#include "lagdiff/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "lagdiff/kernels.hpp"

namespace lagdiff::ops {

namespace {

using detail::Node;
using detail::TensorImpl;

const kernels::Backend& K() { return kernels::active(); }

bool traced(const Tensor& t) { return t.requires_grad() || t.node() != nullptr; }

void accum(const std::shared_ptr<TensorImpl>& t, const double* g) {
  t->ensure_grad();
  K().axpy(1.0, g, t->grad.data(), t->size());
}

void attach(Tensor& out, const char* op, std::vector<Tensor> inputs,
            std::function<void(const double*)> fn) {
  auto node = std::make_shared<Node>();
  node->op = op;
  node->inputs.reserve(inputs.size());
  for (auto& t : inputs) node->inputs.push_back(t.impl());
  node->backprop = std::move(fn);
  out.impl()->node = node;
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (!a.same_shape(b))
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "add");
  Tensor out = Tensor::zeros(a.shape());
  K().ew_add(a.data(), b.data(), out.data(), a.size());
  if (traced(a) || traced(b)) {
    bool ga = traced(a), gb = traced(b);
    auto ai = a.impl(), bi = b.impl();
    attach(out, "add", {a, b}, [=](const double* g) {
      if (ga) accum(ai, g);
      if (gb) accum(bi, g);
    });
  }
  return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "sub");
  Tensor out = Tensor::zeros(a.shape());
  K().ew_sub(a.data(), b.data(), out.data(), a.size());
  if (traced(a) || traced(b)) {
    bool ga = traced(a), gb = traced(b);
    auto ai = a.impl(), bi = b.impl();
    int64_t n = a.size();
    attach(out, "sub", {a, b}, [=](const double* g) {
      if (ga) accum(ai, g);
      if (gb) {
        bi->ensure_grad();
        K().axpy(-1.0, g, bi->grad.data(), n);
      }
    });
  }
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "mul");
  Tensor out = Tensor::zeros(a.shape());
  K().ew_mul(a.data(), b.data(), out.data(), a.size());
  if (traced(a) || traced(b)) {
    bool ga = traced(a), gb = traced(b);
    auto ai = a.impl(), bi = b.impl();
    int64_t n = a.size();
    attach(out, "mul", {a, b}, [=](const double* g) {
      std::vector<double> tmp(static_cast<size_t>(n));
      if (ga) {
        K().ew_mul(g, bi->data.data(), tmp.data(), n);
        accum(ai, tmp.data());
      }
      if (gb) {
        K().ew_mul(g, ai->data.data(), tmp.data(), n);
        accum(bi, tmp.data());
      }
    });
  }
  return out;
}

Tensor scale(const Tensor& a, double s) {
  Tensor out = Tensor::zeros(a.shape());
  K().scale(a.data(), s, out.data(), a.size());
  if (traced(a)) {
    auto ai = a.impl();
    int64_t n = a.size();
    attach(out, "scale", {a}, [=](const double* g) {
      ai->ensure_grad();
      K().axpy(s, g, ai->grad.data(), n);
    });
  }
  return out;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    throw DimensionError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
  int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor out = Tensor::zeros({m, n});
  K().gemm_nn(a.data(), b.data(), out.data(), m, k, n, false);
  if (traced(a) || traced(b)) {
    bool ga = traced(a), gb = traced(b);
    auto ai = a.impl(), bi = b.impl();
    attach(out, "matmul", {a, b}, [=](const double* g) {
      if (ga) {
        ai->ensure_grad();
        K().gemm_nt(g, bi->data.data(), ai->grad.data(), m, n, k, true);
      }
      if (gb) {
        bi->ensure_grad();
        K().gemm_tn(ai->data.data(), g, bi->grad.data(), m, k, n, true);
      }
    });
  }
  return out;
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(1))
    throw DimensionError("matmul_nt: incompatible shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
  int m = a.dim(0), k = a.dim(1), n = b.dim(0);
  Tensor out = Tensor::zeros({m, n});
  K().gemm_nt(a.data(), b.data(), out.data(), m, k, n, false);
  if (traced(a) || traced(b)) {
    bool ga = traced(a), gb = traced(b);
    auto ai = a.impl(), bi = b.impl();
    attach(out, "matmul_nt", {a, b}, [=](const double* g) {
      if (ga) {
        ai->ensure_grad();
        K().gemm_nn(g, bi->data.data(), ai->grad.data(), m, n, k, true);
      }
      if (gb) {
        bi->ensure_grad();
        K().gemm_tn(g, ai->data.data(), bi->grad.data(), m, n, k, true);
      }
    });
  }
  return out;
}

Tensor conv1x1(const Tensor& x, const Tensor& w) {
  if (x.rank() != 3 || w.rank() != 3 || w.dim(2) != 1 || w.dim(1) != x.dim(0))
    throw DimensionError("conv1x1: channel mismatch, input " + shape_str(x.shape()) +
                         " vs kernel " + shape_str(w.shape()));
  int ci = x.dim(0), h = x.dim(1), wd = x.dim(2), co = w.dim(0);
  int hw = h * wd;
  Tensor out = Tensor::zeros({co, h, wd});
  // [co,ci] x [ci,hw]; both operands are already laid out as those matrices.
  K().gemm_nn(w.data(), x.data(), out.data(), co, ci, hw, false);
  if (traced(x) || traced(w)) {
    bool gx = traced(x), gw = traced(w);
    auto xi = x.impl(), wi = w.impl();
    attach(out, "conv1x1", {x, w}, [=](const double* g) {
      if (gw) {
        wi->ensure_grad();
        K().gemm_nt(g, xi->data.data(), wi->grad.data(), co, hw, ci, true);
      }
      if (gx) {
        xi->ensure_grad();
        K().gemm_tn(wi->data.data(), g, xi->grad.data(), co, ci, hw, true);
      }
    });
  }
  return out;
}

Tensor add_row_bias(const Tensor& x, const Tensor& v) {
  if (x.rank() != 2 || v.rank() != 1 || v.dim(0) != x.dim(1))
    throw DimensionError("add_row_bias: " + shape_str(x.shape()) + " vs " + shape_str(v.shape()));
  int r = x.dim(0), c = x.dim(1);
  Tensor out = Tensor::zeros({r, c});
  for (int i = 0; i < r; ++i) K().ew_add(x.data() + int64_t(i) * c, v.data(), out.data() + int64_t(i) * c, c);
  if (traced(x) || traced(v)) {
    bool gx = traced(x), gv = traced(v);
    auto xi = x.impl(), vi = v.impl();
    attach(out, "add_row_bias", {x, v}, [=](const double* g) {
      if (gx) accum(xi, g);
      if (gv) {
        vi->ensure_grad();
        for (int i = 0; i < r; ++i) K().axpy(1.0, g + int64_t(i) * c, vi->grad.data(), c);
      }
    });
  }
  return out;
}

Tensor add_channel_bias(const Tensor& x, const Tensor& v) {
  if (x.rank() != 3 || v.rank() != 1 || v.dim(0) != x.dim(0))
    throw DimensionError("add_channel_bias: " + shape_str(x.shape()) + " vs " +
                         shape_str(v.shape()));
  int c = x.dim(0), hw = x.dim(1) * x.dim(2);
  Tensor out = Tensor::zeros(x.shape());
  for (int ch = 0; ch < c; ++ch) {
    const double* src = x.data() + int64_t(ch) * hw;
    double* dst = out.data() + int64_t(ch) * hw;
    double b = v.data()[ch];
    for (int p = 0; p < hw; ++p) dst[p] = src[p] + b;
  }
  if (traced(x) || traced(v)) {
    bool gx = traced(x), gv = traced(v);
    auto xi = x.impl(), vi = v.impl();
    attach(out, "add_channel_bias", {x, v}, [=](const double* g) {
      if (gx) accum(xi, g);
      if (gv) {
        vi->ensure_grad();
        for (int ch = 0; ch < c; ++ch) vi->grad[size_t(ch)] += K().sum(g + int64_t(ch) * hw, hw);
      }
    });
  }
  return out;
}

namespace {

Tensor softmax_core(const Tensor& x, int n_valid, const char* op) {
  if (x.rank() != 2) throw DimensionError("softmax_rows: expected rank-2, got " + shape_str(x.shape()));
  int r = x.dim(0), c = x.dim(1);
  if (n_valid < 0) n_valid = c;
  if (n_valid < 1 || n_valid > c)
    throw DimensionError("softmax_rows_masked: n_valid out of range");
  Tensor out = Tensor::zeros({r, c});
  for (int i = 0; i < r; ++i) {
    const double* xr = x.data() + int64_t(i) * c;
    double* yr = out.data() + int64_t(i) * c;
    double mx = xr[0];
    for (int j = 1; j < n_valid; ++j) mx = std::max(mx, xr[j]);
    double s = 0.0;
    for (int j = 0; j < n_valid; ++j) {
      yr[j] = std::exp(xr[j] - mx);
      s += yr[j];
    }
    double inv = 1.0 / s;
    for (int j = 0; j < n_valid; ++j) yr[j] *= inv;
  }
  if (traced(x)) {
    auto xi = x.impl();
    TensorImpl* outp = out.impl().get();  // non-owning: alive while the graph is
    attach(out, op, {x}, [=](const double* g) {
      xi->ensure_grad();
      const double* y = outp->data.data();
      for (int i = 0; i < r; ++i) {
        const double* yr = y + int64_t(i) * c;
        const double* gr = g + int64_t(i) * c;
        double* gx = xi->grad.data() + int64_t(i) * c;
        double d = 0.0;
        for (int j = 0; j < n_valid; ++j) d += gr[j] * yr[j];
        for (int j = 0; j < n_valid; ++j) gx[j] += yr[j] * (gr[j] - d);
      }
    });
  }
  return out;
}

}  // namespace

Tensor softmax_rows(const Tensor& x) { return softmax_core(x, -1, "softmax_rows"); }

Tensor softmax_rows_masked(const Tensor& x, int n_valid) {
  return softmax_core(x, n_valid, "softmax_rows_masked");
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  if (x.rank() != 2 || gamma.rank() != 1 || beta.rank() != 1 || gamma.dim(0) != x.dim(1) ||
      beta.dim(0) != x.dim(1))
    throw DimensionError("layer_norm: " + shape_str(x.shape()) + " with gamma " +
                         shape_str(gamma.shape()));
  int r = x.dim(0), c = x.dim(1);
  Tensor out = Tensor::zeros({r, c});
  std::vector<double> mu(static_cast<size_t>(r));
  std::vector<double> ivstd(static_cast<size_t>(r));
  for (int i = 0; i < r; ++i) {
    const double* xr = x.data() + int64_t(i) * c;
    double m = K().sum(xr, c) / c;
    double var = 0.0;
    for (int j = 0; j < c; ++j) {
      double d = xr[j] - m;
      var += d * d;
    }
    var /= c;
    double iv = 1.0 / std::sqrt(var + eps);
    mu[size_t(i)] = m;
    ivstd[size_t(i)] = iv;
    double* yr = out.data() + int64_t(i) * c;
    for (int j = 0; j < c; ++j) yr[j] = (xr[j] - m) * iv * gamma.data()[j] + beta.data()[j];
  }
  if (traced(x) || traced(gamma) || traced(beta)) {
    bool gx = traced(x), gg = traced(gamma), gb = traced(beta);
    auto xi = x.impl(), gi = gamma.impl(), bi = beta.impl();
    attach(out, "layer_norm", {x, gamma, beta},
           [=, mu = std::move(mu), ivstd = std::move(ivstd)](const double* g) {
             if (gx) xi->ensure_grad();
             if (gg) gi->ensure_grad();
             if (gb) bi->ensure_grad();
             std::vector<double> xhat(static_cast<size_t>(c));
             std::vector<double> dxhat(static_cast<size_t>(c));
             for (int i = 0; i < r; ++i) {
               const double* xr = xi->data.data() + int64_t(i) * c;
               const double* gr = g + int64_t(i) * c;
               double m = mu[size_t(i)], iv = ivstd[size_t(i)];
               double mean_dx = 0.0, mean_dxx = 0.0;
               for (int j = 0; j < c; ++j) {
                 xhat[size_t(j)] = (xr[j] - m) * iv;
                 dxhat[size_t(j)] = gr[j] * gi->data[size_t(j)];
                 mean_dx += dxhat[size_t(j)];
                 mean_dxx += dxhat[size_t(j)] * xhat[size_t(j)];
               }
               mean_dx /= c;
               mean_dxx /= c;
               if (gx) {
                 double* gxr = xi->grad.data() + int64_t(i) * c;
                 for (int j = 0; j < c; ++j)
                   gxr[j] += iv * (dxhat[size_t(j)] - mean_dx - xhat[size_t(j)] * mean_dxx);
               }
               if (gg)
                 for (int j = 0; j < c; ++j) gi->grad[size_t(j)] += gr[j] * xhat[size_t(j)];
               if (gb)
                 for (int j = 0; j < c; ++j) bi->grad[size_t(j)] += gr[j];
             }
           });
  }
  return out;
}

Tensor silu(const Tensor& x) {
  Tensor out = Tensor::zeros(x.shape());
  int64_t n = x.size();
  for (int64_t i = 0; i < n; ++i) {
    double v = x.data()[i];
    out.data()[i] = v / (1.0 + std::exp(-v));
  }
  if (traced(x)) {
    auto xi = x.impl();
    attach(out, "silu", {x}, [=](const double* g) {
      xi->ensure_grad();
      for (int64_t i = 0; i < n; ++i) {
        double v = xi->data[size_t(i)];
        double s = 1.0 / (1.0 + std::exp(-v));
        xi->grad[size_t(i)] += g[i] * (s * (1.0 + v * (1.0 - s)));
      }
    });
  }
  return out;
}

Tensor transpose2d(const Tensor& x) {
  if (x.rank() != 2) throw DimensionError("transpose2d: expected rank-2, got " + shape_str(x.shape()));
  int r = x.dim(0), c = x.dim(1);
  Tensor out = Tensor::zeros({c, r});
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) out.data()[int64_t(j) * r + i] = x.data()[int64_t(i) * c + j];
  if (traced(x)) {
    auto xi = x.impl();
    attach(out, "transpose2d", {x}, [=](const double* g) {
      xi->ensure_grad();
      for (int j = 0; j < c; ++j)
        for (int i = 0; i < r; ++i) xi->grad[size_t(i) * c + size_t(j)] += g[int64_t(j) * r + i];
    });
  }
  return out;
}

Tensor reshape(const Tensor& x, std::vector<int> shape) {
  if (shape_numel(shape) != x.size())
    throw DimensionError("reshape: " + shape_str(x.shape()) + " to " + shape_str(shape) +
                         " changes element count");
  Tensor out = Tensor::from_data(std::move(shape), x.vec());
  if (traced(x)) {
    auto xi = x.impl();
    attach(out, "reshape", {x}, [=](const double* g) { accum(xi, g); });
  }
  return out;
}

Tensor slice_cols(const Tensor& x, int start, int len) {
  if (x.rank() != 2 || start < 0 || len < 1 || start + len > x.dim(1))
    throw DimensionError("slice_cols: bad range on " + shape_str(x.shape()));
  int r = x.dim(0), c = x.dim(1);
  Tensor out = Tensor::zeros({r, len});
  for (int i = 0; i < r; ++i)
    std::memcpy(out.data() + int64_t(i) * len, x.data() + int64_t(i) * c + start,
                size_t(len) * sizeof(double));
  if (traced(x)) {
    auto xi = x.impl();
    attach(out, "slice_cols", {x}, [=](const double* g) {
      xi->ensure_grad();
      for (int i = 0; i < r; ++i)
        K().axpy(1.0, g + int64_t(i) * len, xi->grad.data() + int64_t(i) * c + start, len);
    });
  }
  return out;
}

Tensor concat_cols(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(0) != b.dim(0))
    throw DimensionError("concat_cols: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  int r = a.dim(0), ca = a.dim(1), cb = b.dim(1);
  Tensor out = Tensor::zeros({r, ca + cb});
  for (int i = 0; i < r; ++i) {
    std::memcpy(out.data() + int64_t(i) * (ca + cb), a.data() + int64_t(i) * ca,
                size_t(ca) * sizeof(double));
    std::memcpy(out.data() + int64_t(i) * (ca + cb) + ca, b.data() + int64_t(i) * cb,
                size_t(cb) * sizeof(double));
  }
  if (traced(a) || traced(b)) {
    bool ga = traced(a), gb = traced(b);
    auto ai = a.impl(), bi = b.impl();
    attach(out, "concat_cols", {a, b}, [=](const double* g) {
      if (ga) {
        ai->ensure_grad();
        for (int i = 0; i < r; ++i)
          K().axpy(1.0, g + int64_t(i) * (ca + cb), ai->grad.data() + int64_t(i) * ca, ca);
      }
      if (gb) {
        bi->ensure_grad();
        for (int i = 0; i < r; ++i)
          K().axpy(1.0, g + int64_t(i) * (ca + cb) + ca, bi->grad.data() + int64_t(i) * cb, cb);
      }
    });
  }
  return out;
}

Tensor sum_all(const Tensor& x) {
  Tensor out = Tensor::scalar(K().sum(x.data(), x.size()));
  if (traced(x)) {
    auto xi = x.impl();
    int64_t n = x.size();
    attach(out, "sum_all", {x}, [=](const double* g) {
      xi->ensure_grad();
      double g0 = g[0];
      for (int64_t i = 0; i < n; ++i) xi->grad[size_t(i)] += g0;
    });
  }
  return out;
}

Tensor mean_all(const Tensor& x) {
  int64_t n = x.size();
  Tensor out = Tensor::scalar(K().sum(x.data(), n) / double(n));
  if (traced(x)) {
    auto xi = x.impl();
    attach(out, "mean_all", {x}, [=](const double* g) {
      xi->ensure_grad();
      double g0 = g[0] / double(n);
      for (int64_t i = 0; i < n; ++i) xi->grad[size_t(i)] += g0;
    });
  }
  return out;
}

Tensor mse(const Tensor& a, const Tensor& b) {
  Tensor d = sub(a, b);
  return mean_all(mul(d, d));
}

Tensor gather_rows(const Tensor& table, const std::vector<int>& ids) {
  if (table.rank() != 2) throw DimensionError("gather_rows: table must be rank-2");
  int v = table.dim(0), d = table.dim(1);
  for (int id : ids)
    if (id < 0 || id >= v) throw InputError("gather_rows: id " + std::to_string(id) + " out of range");
  Tensor out = Tensor::zeros({int(ids.size()), d});
  for (size_t t = 0; t < ids.size(); ++t)
    std::memcpy(out.data() + t * size_t(d), table.data() + int64_t(ids[t]) * d,
                size_t(d) * sizeof(double));
  if (traced(table)) {
    auto ti = table.impl();
    attach(out, "gather_rows", {table}, [=](const double* g) {
      ti->ensure_grad();
      for (size_t t = 0; t < ids.size(); ++t)
        K().axpy(1.0, g + t * size_t(d), ti->grad.data() + int64_t(ids[t]) * d, d);
    });
  }
  return out;
}

Tensor replace_rows(const Tensor& x, const std::vector<int>& positions, const Tensor& v) {
  if (x.rank() != 2 || v.rank() != 1 || v.dim(0) != x.dim(1))
    throw DimensionError("replace_rows: " + shape_str(x.shape()) + " vs " + shape_str(v.shape()));
  int r = x.dim(0), c = x.dim(1);
  for (int p : positions)
    if (p < 0 || p >= r) throw InputError("replace_rows: position out of range");
  Tensor out = Tensor::from_data(x.shape(), x.vec());
  for (int p : positions)
    std::memcpy(out.data() + int64_t(p) * c, v.data(), size_t(c) * sizeof(double));
  if (traced(x) || traced(v)) {
    bool gx = traced(x), gv = traced(v);
    auto xi = x.impl(), vi = v.impl();
    attach(out, "replace_rows", {x, v}, [=](const double* g) {
      std::vector<bool> replaced(size_t(r), false);
      for (int p : positions) replaced[size_t(p)] = true;
      if (gx) {
        xi->ensure_grad();
        for (int i = 0; i < r; ++i)
          if (!replaced[size_t(i)])
            K().axpy(1.0, g + int64_t(i) * c, xi->grad.data() + int64_t(i) * c, c);
      }
      if (gv) {
        vi->ensure_grad();
        for (int p : positions) K().axpy(1.0, g + int64_t(p) * c, vi->grad.data(), c);
      }
    });
  }
  return out;
}

Tensor avg_pool2(const Tensor& x) {
  if (x.rank() != 3 || x.dim(1) % 2 || x.dim(2) % 2)
    throw DimensionError("avg_pool2: needs even spatial dims, got " + shape_str(x.shape()));
  int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  int oh = h / 2, ow = w / 2;
  Tensor out = Tensor::zeros({c, oh, ow});
  for (int ch = 0; ch < c; ++ch) {
    const double* src = x.data() + int64_t(ch) * h * w;
    double* dst = out.data() + int64_t(ch) * oh * ow;
    for (int i = 0; i < oh; ++i)
      for (int j = 0; j < ow; ++j) {
        const double* p = src + int64_t(2 * i) * w + 2 * j;
        dst[int64_t(i) * ow + j] = 0.25 * (p[0] + p[1] + p[w] + p[w + 1]);
      }
  }
  if (traced(x)) {
    auto xi = x.impl();
    attach(out, "avg_pool2", {x}, [=](const double* g) {
      xi->ensure_grad();
      for (int ch = 0; ch < c; ++ch) {
        const double* gr = g + int64_t(ch) * oh * ow;
        double* gx = xi->grad.data() + int64_t(ch) * h * w;
        for (int i = 0; i < oh; ++i)
          for (int j = 0; j < ow; ++j) {
            double q = 0.25 * gr[int64_t(i) * ow + j];
            double* p = gx + int64_t(2 * i) * w + 2 * j;
            p[0] += q;
            p[1] += q;
            p[w] += q;
            p[w + 1] += q;
          }
      }
    });
  }
  return out;
}

Tensor upsample_nearest2(const Tensor& x) {
  if (x.rank() != 3) throw DimensionError("upsample_nearest2: expected rank-3");
  int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  Tensor out = Tensor::zeros({c, 2 * h, 2 * w});
  for (int ch = 0; ch < c; ++ch) {
    const double* src = x.data() + int64_t(ch) * h * w;
    double* dst = out.data() + int64_t(ch) * 4 * h * w;
    for (int i = 0; i < h; ++i)
      for (int j = 0; j < w; ++j) {
        double v = src[int64_t(i) * w + j];
        double* p = dst + int64_t(2 * i) * 2 * w + 2 * j;
        p[0] = v;
        p[1] = v;
        p[2 * w] = v;
        p[2 * w + 1] = v;
      }
  }
  if (traced(x)) {
    auto xi = x.impl();
    attach(out, "upsample_nearest2", {x}, [=](const double* g) {
      xi->ensure_grad();
      for (int ch = 0; ch < c; ++ch) {
        const double* gr = g + int64_t(ch) * 4 * h * w;
        double* gx = xi->grad.data() + int64_t(ch) * h * w;
        for (int i = 0; i < h; ++i)
          for (int j = 0; j < w; ++j) {
            const double* p = gr + int64_t(2 * i) * 2 * w + 2 * j;
            gx[int64_t(i) * w + j] += p[0] + p[1] + p[2 * w] + p[2 * w + 1];
          }
      }
    });
  }
  return out;
}

Tensor blend_masked(const Tensor& f, const Tensor& f_prime, const Tensor& mask) {
  check_same_shape(f, f_prime, "blend_masked");
  if (f.rank() != 3 || mask.rank() != 2 || mask.dim(0) != f.dim(1) || mask.dim(1) != f.dim(2))
    throw DimensionError("blend_masked: mask " + shape_str(mask.shape()) + " vs features " +
                         shape_str(f.shape()));
  int c = f.dim(0), hw = f.dim(1) * f.dim(2);
  Tensor out = Tensor::zeros(f.shape());
  for (int ch = 0; ch < c; ++ch) {
    const double* a = f.data() + int64_t(ch) * hw;
    const double* b = f_prime.data() + int64_t(ch) * hw;
    double* o = out.data() + int64_t(ch) * hw;
    for (int p = 0; p < hw; ++p) o[p] = mask.data()[p] > 0.5 ? b[p] : a[p];
  }
  if (traced(f) || traced(f_prime)) {
    bool ga = traced(f), gb = traced(f_prime);
    auto ai = f.impl(), bi = f_prime.impl(), mi = mask.impl();
    attach(out, "blend_masked", {f, f_prime}, [=](const double* g) {
      if (ga) ai->ensure_grad();
      if (gb) bi->ensure_grad();
      for (int ch = 0; ch < c; ++ch) {
        const double* gr = g + int64_t(ch) * hw;
        for (int p = 0; p < hw; ++p) {
          bool on = mi->data[size_t(p)] > 0.5;
          if (on && gb) bi->grad[size_t(ch) * hw + p] += gr[p];
          if (!on && ga) ai->grad[size_t(ch) * hw + p] += gr[p];
        }
      }
    });
  }
  return out;
}

void clamp_values(Tensor& t, double lo, double hi) {
  for (auto& v : t.vec()) v = std::clamp(v, lo, hi);
}

}  // namespace lagdiff::ops
