#include "mtunet/ops.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <memory>
#include <numeric>
#include <optional>

#include "mtunet/error.hpp"

namespace mtunet::ops {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;
using ConstVec = Eigen::Map<const Eigen::VectorXd>;
using MutVec = Eigen::Map<Eigen::VectorXd>;

[[noreturn]] void shape_error(const std::string& op, const std::string& detail) {
  throw DataError(op + ": " + detail);
}

void require_rank(const std::string& op, const Tensor& t, std::size_t rank) {
  if (t.rank() != rank) {
    shape_error(op, "expected rank " + std::to_string(rank) + ", got " + shape_to_string(t.shape()));
  }
}

ConstMap as_matrix(std::span<const double> data, std::size_t rows, std::size_t cols) {
  return ConstMap(data.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

MutMap as_matrix(std::span<double> data, std::size_t rows, std::size_t cols) {
  return MutMap(data.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

struct ConvGeometry {
  std::size_t channels, height, width;
  std::size_t kh, kw, stride, pad;
  std::size_t out_h, out_w;

  std::size_t patch_len() const { return channels * kh * kw; }
  std::size_t out_len() const { return out_h * out_w; }
};

// Lowers the input to a [C*kh*kw, H'*W'] matrix.
std::vector<double> im2col(std::span<const double> x, const ConvGeometry& geo) {
  std::vector<double> cols(geo.patch_len() * geo.out_len(), 0.0);
  const auto pad = static_cast<std::ptrdiff_t>(geo.pad);
  for (std::size_t c = 0; c < geo.channels; ++c) {
    for (std::size_t ki = 0; ki < geo.kh; ++ki) {
      for (std::size_t kj = 0; kj < geo.kw; ++kj) {
        double* row = cols.data() + ((c * geo.kh + ki) * geo.kw + kj) * geo.out_len();
        for (std::size_t oi = 0; oi < geo.out_h; ++oi) {
          const auto si = static_cast<std::ptrdiff_t>(oi * geo.stride + ki) - pad;
          if (si < 0 || si >= static_cast<std::ptrdiff_t>(geo.height)) continue;
          const double* src = x.data() + (c * geo.height + static_cast<std::size_t>(si)) * geo.width;
          for (std::size_t oj = 0; oj < geo.out_w; ++oj) {
            const auto sj = static_cast<std::ptrdiff_t>(oj * geo.stride + kj) - pad;
            if (sj < 0 || sj >= static_cast<std::ptrdiff_t>(geo.width)) continue;
            row[oi * geo.out_w + oj] = src[sj];
          }
        }
      }
    }
  }
  return cols;
}

void col2im_add(std::span<const double> cols, const ConvGeometry& geo, std::span<double> dx) {
  const auto pad = static_cast<std::ptrdiff_t>(geo.pad);
  for (std::size_t c = 0; c < geo.channels; ++c) {
    for (std::size_t ki = 0; ki < geo.kh; ++ki) {
      for (std::size_t kj = 0; kj < geo.kw; ++kj) {
        const double* row = cols.data() + ((c * geo.kh + ki) * geo.kw + kj) * geo.out_len();
        for (std::size_t oi = 0; oi < geo.out_h; ++oi) {
          const auto si = static_cast<std::ptrdiff_t>(oi * geo.stride + ki) - pad;
          if (si < 0 || si >= static_cast<std::ptrdiff_t>(geo.height)) continue;
          double* dst = dx.data() + (c * geo.height + static_cast<std::size_t>(si)) * geo.width;
          for (std::size_t oj = 0; oj < geo.out_w; ++oj) {
            const auto sj = static_cast<std::ptrdiff_t>(oj * geo.stride + kj) - pad;
            if (sj < 0 || sj >= static_cast<std::ptrdiff_t>(geo.width)) continue;
            dst[sj] += row[oi * geo.out_w + oj];
          }
        }
      }
    }
  }
}

Var conv2d_impl(Graph& g, Var input, Var weight, std::optional<Var> bias, std::size_t stride,
                std::size_t pad) {
  const Tensor& x = g.value(input);
  const Tensor& w = g.value(weight);
  require_rank("conv2d input", x, 3);
  require_rank("conv2d weight", w, 4);
  if (stride < 1) shape_error("conv2d", "stride must be >= 1");
  if (w.dim(1) != x.dim(0)) {
    shape_error("conv2d", "weight " + shape_to_string(w.shape()) + " does not match input " +
                              shape_to_string(x.shape()));
  }
  ConvGeometry geo{x.dim(0), x.dim(1), x.dim(2), w.dim(2), w.dim(3), stride, pad, 0, 0};
  if (geo.height + 2 * pad < geo.kh || geo.width + 2 * pad < geo.kw) {
    shape_error("conv2d", "kernel larger than padded input");
  }
  geo.out_h = (geo.height + 2 * pad - geo.kh) / stride + 1;
  geo.out_w = (geo.width + 2 * pad - geo.kw) / stride + 1;
  const std::size_t out_c = w.dim(0);
  if (bias) {
    const Tensor& b = g.value(*bias);
    if (b.numel() != out_c) shape_error("conv2d", "bias length does not match output channels");
  }

  auto cols = std::make_shared<std::vector<double>>(im2col(x.data(), geo));
  Tensor out(Shape{out_c, geo.out_h, geo.out_w});
  auto out_m = as_matrix(out.data(), out_c, geo.out_len());
  auto w_m = as_matrix(w.data(), out_c, geo.patch_len());
  auto cols_m = as_matrix(std::span<const double>(*cols), geo.patch_len(), geo.out_len());
  out_m.noalias() = w_m * cols_m;
  if (bias) {
    const Tensor& b = g.value(*bias);
    for (std::size_t o = 0; o < out_c; ++o) out_m.row(static_cast<Eigen::Index>(o)).array() += b[o];
  }

  std::vector<Var> inputs{input, weight};
  if (bias) inputs.push_back(*bias);
  return g.record(std::move(out), std::move(inputs),
                  [input, weight, bias, geo, out_c, cols](Graph& gr, std::span<const double> dy) {
                    auto dy_m = as_matrix(dy, out_c, geo.out_len());
                    auto cols_m = as_matrix(std::span<const double>(*cols), geo.patch_len(), geo.out_len());
                    if (gr.needs_grad(weight)) {
                      auto dw = as_matrix(gr.grad_mut(weight), out_c, geo.patch_len());
                      dw.noalias() += dy_m * cols_m.transpose();
                    }
                    if (bias && gr.needs_grad(*bias)) {
                      auto db = gr.grad_mut(*bias);
                      for (std::size_t o = 0; o < out_c; ++o) db[o] += dy_m.row(static_cast<Eigen::Index>(o)).sum();
                    }
                    if (gr.needs_grad(input)) {
                      auto w_m = as_matrix(gr.value(weight).data(), out_c, geo.patch_len());
                      std::vector<double> dcols(geo.patch_len() * geo.out_len());
                      as_matrix(std::span<double>(dcols), geo.patch_len(), geo.out_len()).noalias() =
                          w_m.transpose() * dy_m;
                      col2im_add(dcols, geo, gr.grad_mut(input));
                    }
                  });
}

template <typename Fwd, typename Deriv>
Var unary(Graph& g, Var x, Fwd fwd, Deriv deriv) {
  const Tensor& in = g.value(x);
  Tensor out(in.shape());
  for (std::size_t i = 0; i < in.numel(); ++i) out[i] = fwd(in[i]);
  return g.record(std::move(out), {x}, [x, deriv](Graph& gr, std::span<const double> dy) {
    if (!gr.needs_grad(x)) return;
    const Tensor& in = gr.value(x);
    auto dx = gr.grad_mut(x);
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += dy[i] * deriv(in[i]);
  });
}

void require_same_shape(const std::string& op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    shape_error(op, shape_to_string(a.shape()) + " vs " + shape_to_string(b.shape()));
  }
}

void add_into(std::span<double> dst, std::span<const double> src) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

}  // namespace

Var conv2d(Graph& g, Var input, Var weight, std::size_t stride, std::size_t pad) {
  return conv2d_impl(g, input, weight, std::nullopt, stride, pad);
}

Var conv2d(Graph& g, Var input, Var weight, Var bias, std::size_t stride, std::size_t pad) {
  return conv2d_impl(g, input, weight, bias, stride, pad);
}

Var linear(Graph& g, Var input, Var weight, Var bias) {
  const Tensor& x = g.value(input);
  const Tensor& w = g.value(weight);
  const Tensor& b = g.value(bias);
  require_rank("linear input", x, 2);
  require_rank("linear weight", w, 2);
  if (x.dim(1) != w.dim(0) || b.numel() != w.dim(1)) {
    shape_error("linear", shape_to_string(x.shape()) + " x " + shape_to_string(w.shape()) + " + " +
                              shape_to_string(b.shape()));
  }
  const std::size_t n = x.dim(0), din = w.dim(0), dout = w.dim(1);
  Tensor out(Shape{n, dout});
  auto out_m = as_matrix(out.data(), n, dout);
  out_m.noalias() = as_matrix(x.data(), n, din) * as_matrix(w.data(), din, dout);
  out_m.rowwise() += ConstVec(b.data().data(), static_cast<Eigen::Index>(dout)).transpose();
  return g.record(std::move(out), {input, weight, bias},
                  [input, weight, bias, n, din, dout](Graph& gr, std::span<const double> dy) {
                    auto dy_m = as_matrix(dy, n, dout);
                    if (gr.needs_grad(weight)) {
                      as_matrix(gr.grad_mut(weight), din, dout).noalias() +=
                          as_matrix(gr.value(input).data(), n, din).transpose() * dy_m;
                    }
                    if (gr.needs_grad(bias)) {
                      MutVec(gr.grad_mut(bias).data(), static_cast<Eigen::Index>(dout)) +=
                          dy_m.colwise().sum().transpose();
                    }
                    if (gr.needs_grad(input)) {
                      as_matrix(gr.grad_mut(input), n, din).noalias() +=
                          dy_m * as_matrix(gr.value(weight).data(), din, dout).transpose();
                    }
                  });
}

Var matmul(Graph& g, Var a, Var b) {
  const Tensor& ta = g.value(a);
  const Tensor& tb = g.value(b);
  require_rank("matmul lhs", ta, 2);
  require_rank("matmul rhs", tb, 2);
  if (ta.dim(1) != tb.dim(0)) {
    shape_error("matmul", shape_to_string(ta.shape()) + " x " + shape_to_string(tb.shape()));
  }
  const std::size_t n = ta.dim(0), k = ta.dim(1), m = tb.dim(1);
  Tensor out(Shape{n, m});
  as_matrix(out.data(), n, m).noalias() = as_matrix(ta.data(), n, k) * as_matrix(tb.data(), k, m);
  return g.record(std::move(out), {a, b}, [a, b, n, k, m](Graph& gr, std::span<const double> dy) {
    auto dy_m = as_matrix(dy, n, m);
    if (gr.needs_grad(a)) {
      as_matrix(gr.grad_mut(a), n, k).noalias() += dy_m * as_matrix(gr.value(b).data(), k, m).transpose();
    }
    if (gr.needs_grad(b)) {
      as_matrix(gr.grad_mut(b), k, m).noalias() += as_matrix(gr.value(a).data(), n, k).transpose() * dy_m;
    }
  });
}

Var transpose(Graph& g, Var a) {
  const Tensor& t = g.value(a);
  require_rank("transpose", t, 2);
  const std::size_t n = t.dim(0), m = t.dim(1);
  Tensor out(Shape{m, n});
  as_matrix(out.data(), m, n) = as_matrix(t.data(), n, m).transpose();
  return g.record(std::move(out), {a}, [a, n, m](Graph& gr, std::span<const double> dy) {
    if (!gr.needs_grad(a)) return;
    as_matrix(gr.grad_mut(a), n, m) += as_matrix(dy, m, n).transpose();
  });
}

Var scale(Graph& g, Var a, double factor) {
  return unary(g, a, [factor](double v) { return v * factor; }, [factor](double) { return factor; });
}

Var slice_cols(Graph& g, Var a, std::size_t begin, std::size_t end) {
  const Tensor& t = g.value(a);
  require_rank("slice_cols", t, 2);
  if (begin >= end || end > t.dim(1)) shape_error("slice_cols", "invalid column range");
  const std::size_t n = t.dim(0), m = t.dim(1), w = end - begin;
  Tensor out(Shape{n, w});
  for (std::size_t i = 0; i < n; ++i) {
    std::copy_n(t.data().begin() + static_cast<std::ptrdiff_t>(i * m + begin), w,
                out.data().begin() + static_cast<std::ptrdiff_t>(i * w));
  }
  return g.record(std::move(out), {a}, [a, n, m, begin, w](Graph& gr, std::span<const double> dy) {
    if (!gr.needs_grad(a)) return;
    auto dx = gr.grad_mut(a);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < w; ++j) dx[i * m + begin + j] += dy[i * w + j];
  });
}

Var concat_cols(Graph& g, std::span<const Var> parts) {
  if (parts.empty()) shape_error("concat_cols", "no inputs");
  const std::size_t n = g.value(parts[0]).dim(0);
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (Var p : parts) {
    const Tensor& t = g.value(p);
    require_rank("concat_cols", t, 2);
    if (t.dim(0) != n) shape_error("concat_cols", "row count mismatch");
    widths.push_back(t.dim(1));
    total += t.dim(1);
  }
  Tensor out(Shape{n, total});
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const Tensor& t = g.value(parts[k]);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < widths[k]; ++j) out[i * total + offset + j] = t[i * widths[k] + j];
    offset += widths[k];
  }
  std::vector<Var> inputs(parts.begin(), parts.end());
  return g.record(std::move(out), inputs, [inputs, widths, n, total](Graph& gr, std::span<const double> dy) {
    std::size_t offset = 0;
    for (std::size_t k = 0; k < inputs.size(); ++k) {
      if (gr.needs_grad(inputs[k])) {
        auto dx = gr.grad_mut(inputs[k]);
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < widths[k]; ++j) dx[i * widths[k] + j] += dy[i * total + offset + j];
      }
      offset += widths[k];
    }
  });
}

Var softmax_rows(Graph& g, Var input) {
  const Tensor& x = g.value(input);
  require_rank("softmax_rows", x, 2);
  const std::size_t n = x.dim(0), m = x.dim(1);
  Tensor out(x.shape());
  for (std::size_t i = 0; i < n; ++i) {
    const double* row = x.data().data() + i * m;
    double* dst = out.data().data() + i * m;
    const double peak = *std::max_element(row, row + m);
    double total = 0.0;
    for (std::size_t j = 0; j < m; ++j) total += dst[j] = std::exp(row[j] - peak);
    for (std::size_t j = 0; j < m; ++j) dst[j] /= total;
  }
  const std::size_t out_id = g.size();
  return g.record(std::move(out), {input}, [input, n, m, out_id](Graph& gr, std::span<const double> dy) {
    if (!gr.needs_grad(input)) return;
    const Tensor& y = gr.value(Var{out_id});
    auto dx = gr.grad_mut(input);
    for (std::size_t i = 0; i < n; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < m; ++j) dot += dy[i * m + j] * y[i * m + j];
      for (std::size_t j = 0; j < m; ++j) dx[i * m + j] += y[i * m + j] * (dy[i * m + j] - dot);
    }
  });
}

Var layer_norm(Graph& g, Var input, Var gain, Var shift, double eps) {
  const Tensor& x = g.value(input);
  require_rank("layer_norm", x, 2);
  const std::size_t n = x.dim(0), d = x.dim(1);
  if (d < 1) shape_error("layer_norm", "empty feature axis");
  if (!(eps > 0.0)) throw ConfigError("layer_norm: eps must be positive");
  if (g.value(gain).numel() != d || g.value(shift).numel() != d) {
    shape_error("layer_norm", "gain/shift length must equal feature size");
  }
  const Tensor& gm = g.value(gain);
  const Tensor& sh = g.value(shift);
  auto normalized = std::make_shared<std::vector<double>>(n * d);
  auto inv_std = std::make_shared<std::vector<double>>(n);
  Tensor out(x.shape());
  for (std::size_t i = 0; i < n; ++i) {
    const double* row = x.data().data() + i * d;
    double mean = 0.0;
    for (std::size_t j = 0; j < d; ++j) mean += row[j];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mean) * (row[j] - mean);
    var /= static_cast<double>(d);
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[i] = is;
    for (std::size_t j = 0; j < d; ++j) {
      const double xh = (row[j] - mean) * is;
      (*normalized)[i * d + j] = xh;
      out[i * d + j] = xh * gm[j] + sh[j];
    }
  }
  return g.record(std::move(out), {input, gain, shift},
                  [input, gain, shift, n, d, normalized, inv_std](Graph& gr, std::span<const double> dy) {
                    const auto& xh = *normalized;
                    if (gr.needs_grad(gain)) {
                      auto dg = gr.grad_mut(gain);
                      for (std::size_t i = 0; i < n; ++i)
                        for (std::size_t j = 0; j < d; ++j) dg[j] += dy[i * d + j] * xh[i * d + j];
                    }
                    if (gr.needs_grad(shift)) {
                      auto ds = gr.grad_mut(shift);
                      for (std::size_t i = 0; i < n; ++i)
                        for (std::size_t j = 0; j < d; ++j) ds[j] += dy[i * d + j];
                    }
                    if (!gr.needs_grad(input)) return;
                    const Tensor& gm = gr.value(gain);
                    auto dx = gr.grad_mut(input);
                    std::vector<double> dxh(d);
                    for (std::size_t i = 0; i < n; ++i) {
                      double mean_d = 0.0, mean_dx = 0.0;
                      for (std::size_t j = 0; j < d; ++j) {
                        dxh[j] = dy[i * d + j] * gm[j];
                        mean_d += dxh[j];
                        mean_dx += dxh[j] * xh[i * d + j];
                      }
                      mean_d /= static_cast<double>(d);
                      mean_dx /= static_cast<double>(d);
                      for (std::size_t j = 0; j < d; ++j) {
                        dx[i * d + j] += (*inv_std)[i] * (dxh[j] - mean_d - xh[i * d + j] * mean_dx);
                      }
                    }
                  });
}

Var instance_norm(Graph& g, Var input, Var gain, Var shift, double eps) {
  const Tensor& x = g.value(input);
  require_rank("instance_norm", x, 3);
  const std::size_t channels = x.dim(0), n = x.dim(1) * x.dim(2);
  if (n < 1) shape_error("instance_norm", "empty spatial extent");
  if (!(eps > 0.0)) throw ConfigError("instance_norm: eps must be positive");
  if (g.value(gain).numel() != channels || g.value(shift).numel() != channels) {
    shape_error("instance_norm", "gain/shift length must equal channel count");
  }
  const Tensor& gm = g.value(gain);
  const Tensor& sh = g.value(shift);
  auto normalized = std::make_shared<std::vector<double>>(channels * n);
  auto inv_std = std::make_shared<std::vector<double>>(channels);
  Tensor out(x.shape());
  for (std::size_t c = 0; c < channels; ++c) {
    const double* plane = x.data().data() + c * n;
    double mean = 0.0;
    for (std::size_t j = 0; j < n; ++j) mean += plane[j];
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (plane[j] - mean) * (plane[j] - mean);
    var /= static_cast<double>(n);
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[c] = is;
    for (std::size_t j = 0; j < n; ++j) {
      const double xh = (plane[j] - mean) * is;
      (*normalized)[c * n + j] = xh;
      out[c * n + j] = xh * gm[c] + sh[c];
    }
  }
  return g.record(std::move(out), {input, gain, shift},
                  [input, gain, shift, channels, n, normalized, inv_std](Graph& gr, std::span<const double> dy) {
                    const auto& xh = *normalized;
                    const bool need_gain = gr.needs_grad(gain), need_shift = gr.needs_grad(shift);
                    const bool need_x = gr.needs_grad(input);
                    std::span<double> dg, ds, dx;
                    if (need_gain) dg = gr.grad_mut(gain);
                    if (need_shift) ds = gr.grad_mut(shift);
                    if (need_x) dx = gr.grad_mut(input);
                    const Tensor& gm = gr.value(gain);
                    for (std::size_t c = 0; c < channels; ++c) {
                      double sum_dy = 0.0, sum_dy_xh = 0.0;
                      for (std::size_t j = 0; j < n; ++j) {
                        sum_dy += dy[c * n + j];
                        sum_dy_xh += dy[c * n + j] * xh[c * n + j];
                      }
                      if (need_gain) dg[c] += sum_dy_xh;
                      if (need_shift) ds[c] += sum_dy;
                      if (!need_x) continue;
                      const double mean_d = gm[c] * sum_dy / static_cast<double>(n);
                      const double mean_dx = gm[c] * sum_dy_xh / static_cast<double>(n);
                      for (std::size_t j = 0; j < n; ++j) {
                        dx[c * n + j] += (*inv_std)[c] * (gm[c] * dy[c * n + j] - mean_d - xh[c * n + j] * mean_dx);
                      }
                    }
                  });
}

Var relu(Graph& g, Var x) {
  return unary(g, x, [](double v) { return v > 0.0 ? v : 0.0; }, [](double v) { return v > 0.0 ? 1.0 : 0.0; });
}

Var sigmoid(Graph& g, Var x) {
  auto f = [](double v) {
    if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
    const double e = std::exp(v);
    return e / (1.0 + e);
  };
  return unary(g, x, f, [f](double v) {
    const double s = f(v);
    return s * (1.0 - s);
  });
}

Var add(Graph& g, Var a, Var b) {
  const Tensor& ta = g.value(a);
  const Tensor& tb = g.value(b);
  require_same_shape("add", ta, tb);
  Tensor out(ta.shape());
  for (std::size_t i = 0; i < ta.numel(); ++i) out[i] = ta[i] + tb[i];
  return g.record(std::move(out), {a, b}, [a, b](Graph& gr, std::span<const double> dy) {
    if (gr.needs_grad(a)) add_into(gr.grad_mut(a), dy);
    if (gr.needs_grad(b)) add_into(gr.grad_mut(b), dy);
  });
}

Var mul(Graph& g, Var a, Var b) {
  const Tensor& ta = g.value(a);
  const Tensor& tb = g.value(b);
  require_same_shape("mul", ta, tb);
  Tensor out(ta.shape());
  for (std::size_t i = 0; i < ta.numel(); ++i) out[i] = ta[i] * tb[i];
  return g.record(std::move(out), {a, b}, [a, b](Graph& gr, std::span<const double> dy) {
    // Fetch both values before either grad_mut call; a and b may alias.
    const Tensor& va = gr.value(a);
    const Tensor& vb = gr.value(b);
    if (gr.needs_grad(a)) {
      auto da = gr.grad_mut(a);
      for (std::size_t i = 0; i < da.size(); ++i) da[i] += dy[i] * vb[i];
    }
    if (gr.needs_grad(b)) {
      auto db = gr.grad_mut(b);
      for (std::size_t i = 0; i < db.size(); ++i) db[i] += dy[i] * va[i];
    }
  });
}

Var concat_channels(Graph& g, std::span<const Var> parts) {
  if (parts.empty()) shape_error("concat_channels", "no inputs");
  const Tensor& first = g.value(parts[0]);
  require_rank("concat_channels", first, 3);
  const std::size_t h = first.dim(1), w = first.dim(2);
  std::size_t channels = 0;
  std::vector<std::size_t> sizes;
  for (Var p : parts) {
    const Tensor& t = g.value(p);
    require_rank("concat_channels", t, 3);
    if (t.dim(1) != h || t.dim(2) != w) {
      shape_error("concat_channels", "spatial mismatch " + shape_to_string(t.shape()) + " vs " +
                                         shape_to_string(first.shape()));
    }
    channels += t.dim(0);
    sizes.push_back(t.numel());
  }
  Tensor out(Shape{channels, h, w});
  std::size_t offset = 0;
  for (Var p : parts) {
    const Tensor& t = g.value(p);
    std::copy(t.data().begin(), t.data().end(), out.data().begin() + static_cast<std::ptrdiff_t>(offset));
    offset += t.numel();
  }
  std::vector<Var> inputs(parts.begin(), parts.end());
  return g.record(std::move(out), inputs, [inputs, sizes](Graph& gr, std::span<const double> dy) {
    std::size_t offset = 0;
    for (std::size_t k = 0; k < inputs.size(); ++k) {
      if (gr.needs_grad(inputs[k])) add_into(gr.grad_mut(inputs[k]), dy.subspan(offset, sizes[k]));
      offset += sizes[k];
    }
  });
}

Var max_pool2d(Graph& g, Var x) {
  const Tensor& in = g.value(x);
  require_rank("max_pool2d", in, 3);
  const std::size_t c = in.dim(0), h = in.dim(1), w = in.dim(2);
  if (h < 2 || w < 2) shape_error("max_pool2d", "input smaller than 2x2");
  const std::size_t oh = h / 2, ow = w / 2;
  Tensor out(Shape{c, oh, ow});
  auto argmax = std::make_shared<std::vector<std::size_t>>(out.numel());
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t i = 0; i < oh; ++i) {
      for (std::size_t j = 0; j < ow; ++j) {
        std::size_t best = (ch * h + 2 * i) * w + 2 * j;
        for (std::size_t di = 0; di < 2; ++di) {
          for (std::size_t dj = 0; dj < 2; ++dj) {
            const std::size_t idx = (ch * h + 2 * i + di) * w + 2 * j + dj;
            if (in[idx] > in[best]) best = idx;
          }
        }
        const std::size_t o = (ch * oh + i) * ow + j;
        out[o] = in[best];
        (*argmax)[o] = best;
      }
    }
  }
  return g.record(std::move(out), {x}, [x, argmax](Graph& gr, std::span<const double> dy) {
    if (!gr.needs_grad(x)) return;
    auto dx = gr.grad_mut(x);
    for (std::size_t o = 0; o < dy.size(); ++o) dx[(*argmax)[o]] += dy[o];
  });
}

namespace {

struct BilinearTap {
  std::size_t lo, hi;
  double w_lo, w_hi;
};

// Source taps for 2x upsampling with half-pixel centres: src = (dst + 0.5)/2 - 0.5.
std::vector<BilinearTap> upsample_taps(std::size_t in_size) {
  std::vector<BilinearTap> taps(2 * in_size);
  for (std::size_t o = 0; o < taps.size(); ++o) {
    double src = (static_cast<double>(o) + 0.5) * 0.5 - 0.5;
    if (src < 0.0) src = 0.0;
    const auto lo = static_cast<std::size_t>(std::floor(src));
    const std::size_t hi = std::min(lo + 1, in_size - 1);
    const double frac = src - static_cast<double>(lo);
    taps[o] = {lo, hi, 1.0 - frac, frac};
  }
  return taps;
}

}  // namespace

Var upsample_bilinear2x(Graph& g, Var x) {
  const Tensor& in = g.value(x);
  require_rank("upsample_bilinear2x", in, 3);
  const std::size_t c = in.dim(0), h = in.dim(1), w = in.dim(2);
  if (h == 0 || w == 0) shape_error("upsample_bilinear2x", "empty input");
  auto rows = upsample_taps(h);
  auto cols = upsample_taps(w);
  Tensor out(Shape{c, 2 * h, 2 * w});
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t i = 0; i < 2 * h; ++i) {
      const auto& r = rows[i];
      for (std::size_t j = 0; j < 2 * w; ++j) {
        const auto& q = cols[j];
        out.at(ch, i, j) = r.w_lo * (q.w_lo * in.at(ch, r.lo, q.lo) + q.w_hi * in.at(ch, r.lo, q.hi)) +
                           r.w_hi * (q.w_lo * in.at(ch, r.hi, q.lo) + q.w_hi * in.at(ch, r.hi, q.hi));
      }
    }
  }
  return g.record(std::move(out), {x}, [x, c, h, w, rows, cols](Graph& gr, std::span<const double> dy) {
    if (!gr.needs_grad(x)) return;
    auto dx = gr.grad_mut(x);
    const std::size_t ow = 2 * w;
    for (std::size_t ch = 0; ch < c; ++ch) {
      for (std::size_t i = 0; i < 2 * h; ++i) {
        const auto& r = rows[i];
        for (std::size_t j = 0; j < ow; ++j) {
          const auto& q = cols[j];
          const double d = dy[(ch * 2 * h + i) * ow + j];
          dx[(ch * h + r.lo) * w + q.lo] += d * r.w_lo * q.w_lo;
          dx[(ch * h + r.lo) * w + q.hi] += d * r.w_lo * q.w_hi;
          dx[(ch * h + r.hi) * w + q.lo] += d * r.w_hi * q.w_lo;
          dx[(ch * h + r.hi) * w + q.hi] += d * r.w_hi * q.w_hi;
        }
      }
    }
  });
}

Var adaptive_avg_pool(Graph& g, Var x, std::size_t out_h, std::size_t out_w) {
  const Tensor& in = g.value(x);
  require_rank("adaptive_avg_pool", in, 3);
  const std::size_t c = in.dim(0), h = in.dim(1), w = in.dim(2);
  if (out_h == 0 || out_w == 0 || out_h > h || out_w > w) {
    shape_error("adaptive_avg_pool", "target size must be in [1, input size]");
  }
  auto bins = [](std::size_t in_size, std::size_t out_size) {
    std::vector<std::pair<std::size_t, std::size_t>> b(out_size);
    for (std::size_t i = 0; i < out_size; ++i) {
      b[i] = {i * in_size / out_size, ((i + 1) * in_size + out_size - 1) / out_size};
    }
    return b;
  };
  auto rb = bins(h, out_h);
  auto cb = bins(w, out_w);
  Tensor out(Shape{c, out_h, out_w});
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t i = 0; i < out_h; ++i) {
      for (std::size_t j = 0; j < out_w; ++j) {
        double acc = 0.0;
        for (std::size_t r = rb[i].first; r < rb[i].second; ++r)
          for (std::size_t q = cb[j].first; q < cb[j].second; ++q) acc += in.at(ch, r, q);
        const double count = static_cast<double>((rb[i].second - rb[i].first) * (cb[j].second - cb[j].first));
        out.at(ch, i, j) = acc / count;
      }
    }
  }
  return g.record(std::move(out), {x}, [x, c, h, w, out_h, out_w, rb, cb](Graph& gr, std::span<const double> dy) {
    if (!gr.needs_grad(x)) return;
    auto dx = gr.grad_mut(x);
    for (std::size_t ch = 0; ch < c; ++ch) {
      for (std::size_t i = 0; i < out_h; ++i) {
        for (std::size_t j = 0; j < out_w; ++j) {
          const double count = static_cast<double>((rb[i].second - rb[i].first) * (cb[j].second - cb[j].first));
          const double d = dy[(ch * out_h + i) * out_w + j] / count;
          for (std::size_t r = rb[i].first; r < rb[i].second; ++r)
            for (std::size_t q = cb[j].first; q < cb[j].second; ++q) dx[(ch * h + r) * w + q] += d;
        }
      }
    }
  });
}

Var sum(Graph& g, Var x) {
  const Tensor& in = g.value(x);
  const double total = std::accumulate(in.data().begin(), in.data().end(), 0.0);
  return g.record(Tensor::scalar(total), {x}, [x](Graph& gr, std::span<const double> dy) {
    if (!gr.needs_grad(x)) return;
    for (double& v : gr.grad_mut(x)) v += dy[0];
  });
}

Var reshape(Graph& g, Var x, Shape shape) {
  Tensor out = g.value(x).reshaped(std::move(shape));
  return g.record(std::move(out), {x}, [x](Graph& gr, std::span<const double> dy) {
    if (gr.needs_grad(x)) add_into(gr.grad_mut(x), dy);
  });
}

namespace {

// Maps each token element to its source index in the [C,H,W] map.
std::vector<std::size_t> patch_index(std::size_t c, std::size_t h, std::size_t w, std::size_t p) {
  const std::size_t gh = h / p, gw = w / p, dim = c * p * p;
  std::vector<std::size_t> index(gh * gw * dim);
  for (std::size_t ti = 0; ti < gh; ++ti)
    for (std::size_t tj = 0; tj < gw; ++tj)
      for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t py = 0; py < p; ++py)
          for (std::size_t px = 0; px < p; ++px) {
            const std::size_t token = ti * gw + tj;
            const std::size_t k = (ch * p + py) * p + px;
            index[token * dim + k] = (ch * h + ti * p + py) * w + tj * p + px;
          }
  return index;
}

void check_patch_geometry(const std::string& op, std::size_t h, std::size_t w, std::size_t p) {
  if (p == 0 || h % p != 0 || w % p != 0) {
    shape_error(op, "patch size " + std::to_string(p) + " does not divide " + std::to_string(h) + "x" +
                        std::to_string(w));
  }
}

}  // namespace

Var patchify(Graph& g, Var x, std::size_t patch) {
  const Tensor& in = g.value(x);
  require_rank("patchify", in, 3);
  const std::size_t c = in.dim(0), h = in.dim(1), w = in.dim(2);
  check_patch_geometry("patchify", h, w, patch);
  auto index = std::make_shared<std::vector<std::size_t>>(patch_index(c, h, w, patch));
  Tensor out(Shape{(h / patch) * (w / patch), c * patch * patch});
  for (std::size_t i = 0; i < index->size(); ++i) out[i] = in[(*index)[i]];
  return g.record(std::move(out), {x}, [x, index](Graph& gr, std::span<const double> dy) {
    if (!gr.needs_grad(x)) return;
    auto dx = gr.grad_mut(x);
    for (std::size_t i = 0; i < index->size(); ++i) dx[(*index)[i]] += dy[i];
  });
}

Var unpatchify(Graph& g, Var tokens, std::size_t channels, std::size_t height, std::size_t width,
               std::size_t patch) {
  const Tensor& in = g.value(tokens);
  require_rank("unpatchify", in, 2);
  check_patch_geometry("unpatchify", height, width, patch);
  if (in.dim(0) != (height / patch) * (width / patch) || in.dim(1) != channels * patch * patch) {
    shape_error("unpatchify", "token shape " + shape_to_string(in.shape()) + " does not match target map");
  }
  auto index = std::make_shared<std::vector<std::size_t>>(patch_index(channels, height, width, patch));
  Tensor out(Shape{channels, height, width});
  for (std::size_t i = 0; i < index->size(); ++i) out[(*index)[i]] = in[i];
  return g.record(std::move(out), {tokens}, [tokens, index](Graph& gr, std::span<const double> dy) {
    if (!gr.needs_grad(tokens)) return;
    auto dx = gr.grad_mut(tokens);
    for (std::size_t i = 0; i < index->size(); ++i) dx[i] += dy[(*index)[i]];
  });
}

}  // namespace mtunet::ops
