#include "ddis/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <numeric>

namespace ddis {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;

std::vector<std::int64_t> strides_of(const Shape& s) {
  std::vector<std::int64_t> st(s.size(), 1);
  for (int i = static_cast<int>(s.size()) - 2; i >= 0; --i) st[i] = st[i + 1] * s[i + 1];
  return st;
}

[[noreturn]] void mismatch(const char* op, const Shape& a, const Shape& b) {
  throw ShapeError(std::string(op) + ": incompatible shapes " + to_string(a) + " and " + to_string(b));
}

// For each flat output index, the flat index into an operand broadcast to `out`.
std::vector<std::int64_t> broadcast_map(const Shape& in, const Shape& out) {
  const std::size_t nd = out.size();
  const std::size_t offset = nd - in.size();
  auto in_strides = strides_of(in);
  std::vector<std::int64_t> eff(nd, 0);
  for (std::size_t d = 0; d < in.size(); ++d)
    eff[offset + d] = in[d] == 1 ? 0 : in_strides[d];
  const auto total = numel(out);
  std::vector<std::int64_t> map(static_cast<std::size_t>(total));
  std::vector<std::int64_t> idx(nd, 0);
  std::int64_t pos = 0;
  for (std::int64_t i = 0; i < total; ++i) {
    map[static_cast<std::size_t>(i)] = pos;
    for (int d = static_cast<int>(nd) - 1; d >= 0; --d) {
      if (++idx[d] < out[d]) {
        pos += eff[d];
        break;
      }
      pos -= eff[d] * (out[d] - 1);
      idx[d] = 0;
    }
  }
  return map;
}

Shape broadcast_shape(const char* op, const Shape& a, const Shape& b) {
  const std::size_t nd = std::max(a.size(), b.size());
  Shape out(nd, 1);
  for (std::size_t i = 0; i < nd; ++i) {
    const std::int64_t da = i < nd - a.size() ? 1 : a[i - (nd - a.size())];
    const std::int64_t db = i < nd - b.size() ? 1 : b[i - (nd - b.size())];
    if (da != db && da != 1 && db != 1) mismatch(op, a, b);
    out[i] = da == 1 ? db : da;
  }
  return out;
}

struct BinaryMaps {
  bool same = false;
  std::vector<std::int64_t> a, b;
};

template <class F, class DA, class DB>
Tensor binary(const char* op, const Tensor& a, const Tensor& b, F f, DA dfa, DB dfb) {
  Shape out = broadcast_shape(op, a.shape(), b.shape());
  auto maps = std::make_shared<BinaryMaps>();
  if (a.shape() == b.shape()) {
    maps->same = true;
  } else {
    maps->a = broadcast_map(a.shape(), out);
    maps->b = broadcast_map(b.shape(), out);
  }
  auto fwd = [maps, f](std::span<const Tensor> in, TensorImpl& o) {
    const auto& x = in[0].values();
    const auto& y = in[1].values();
    const std::size_t n = o.data.size();
    if (maps->same) {
      for (std::size_t i = 0; i < n; ++i) o.data[i] = f(x[i], y[i]);
    } else {
      for (std::size_t i = 0; i < n; ++i) o.data[i] = f(x[maps->a[i]], y[maps->b[i]]);
    }
  };
  auto bwd = [maps, dfa, dfb](std::span<const Tensor> in, const TensorImpl& o) {
    const auto& x = in[0].values();
    const auto& y = in[1].values();
    const std::size_t n = o.data.size();
    if (in[0].requires_grad()) {
      auto& g = grad_buffer(in[0]);
      for (std::size_t i = 0; i < n; ++i) {
        const std::size_t ia = maps->same ? i : static_cast<std::size_t>(maps->a[i]);
        const std::size_t ib = maps->same ? i : static_cast<std::size_t>(maps->b[i]);
        g[ia] += o.grad[i] * dfa(x[ia], y[ib], o.data[i]);
      }
    }
    if (in[1].requires_grad()) {
      auto& g = grad_buffer(in[1]);
      for (std::size_t i = 0; i < n; ++i) {
        const std::size_t ia = maps->same ? i : static_cast<std::size_t>(maps->a[i]);
        const std::size_t ib = maps->same ? i : static_cast<std::size_t>(maps->b[i]);
        g[ib] += o.grad[i] * dfb(x[ia], y[ib], o.data[i]);
      }
    }
  };
  return make_op(op, {a, b}, std::move(out), fwd, bwd);
}

template <class F, class DF>
Tensor unary(const char* op, const Tensor& a, F f, DF df) {
  auto fwd = [f](std::span<const Tensor> in, TensorImpl& o) {
    const auto& x = in[0].values();
    for (std::size_t i = 0; i < x.size(); ++i) o.data[i] = f(x[i]);
  };
  auto bwd = [df](std::span<const Tensor> in, const TensorImpl& o) {
    const auto& x = in[0].values();
    auto& g = grad_buffer(in[0]);
    for (std::size_t i = 0; i < x.size(); ++i) g[i] += o.grad[i] * df(x[i], o.data[i]);
  };
  return make_op(op, {a}, a.shape(), fwd, bwd);
}

int normalize_axis(int axis, std::size_t nd, const char* op) {
  const int n = static_cast<int>(nd);
  if (axis < 0) axis += n;
  if (axis < 0 || axis >= n) throw ShapeError(std::string(op) + ": axis out of range");
  return axis;
}

void require_rank(const char* op, const Tensor& t, std::size_t rank) {
  if (t.ndim() != rank)
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got shape " +
                     to_string(t.shape()));
}

struct ConvGeom {
  std::int64_t batch, channels, height, width;  // image side
  std::int64_t kernel, stride, pad;
  std::int64_t out_h, out_w;  // column side
  std::int64_t rows() const { return channels * kernel * kernel; }
  std::int64_t cols() const { return batch * out_h * out_w; }
};

// cols[(c,ki,kj), (b,oy,ox)] = img[b,c,oy*s-p+ki, ox*s-p+kj]
void im2col(const ConvGeom& g, const double* img, double* cols) {
  const std::int64_t ncols = g.cols();
  const std::int64_t plane = g.out_h * g.out_w;
  for (std::int64_t c = 0; c < g.channels; ++c)
    for (std::int64_t ki = 0; ki < g.kernel; ++ki)
      for (std::int64_t kj = 0; kj < g.kernel; ++kj) {
        double* row = cols + ((c * g.kernel + ki) * g.kernel + kj) * ncols;
        for (std::int64_t b = 0; b < g.batch; ++b) {
          const double* src = img + (b * g.channels + c) * g.height * g.width;
          double* dst = row + b * plane;
          for (std::int64_t oy = 0; oy < g.out_h; ++oy) {
            const std::int64_t iy = oy * g.stride - g.pad + ki;
            if (iy < 0 || iy >= g.height) {
              std::fill(dst + oy * g.out_w, dst + (oy + 1) * g.out_w, 0.0);
              continue;
            }
            for (std::int64_t ox = 0; ox < g.out_w; ++ox) {
              const std::int64_t ix = ox * g.stride - g.pad + kj;
              dst[oy * g.out_w + ox] = (ix < 0 || ix >= g.width) ? 0.0 : src[iy * g.width + ix];
            }
          }
        }
      }
}

void col2im(const ConvGeom& g, const double* cols, double* img) {
  const std::int64_t ncols = g.cols();
  const std::int64_t plane = g.out_h * g.out_w;
  for (std::int64_t c = 0; c < g.channels; ++c)
    for (std::int64_t ki = 0; ki < g.kernel; ++ki)
      for (std::int64_t kj = 0; kj < g.kernel; ++kj) {
        const double* row = cols + ((c * g.kernel + ki) * g.kernel + kj) * ncols;
        for (std::int64_t b = 0; b < g.batch; ++b) {
          double* dst = img + (b * g.channels + c) * g.height * g.width;
          const double* src = row + b * plane;
          for (std::int64_t oy = 0; oy < g.out_h; ++oy) {
            const std::int64_t iy = oy * g.stride - g.pad + ki;
            if (iy < 0 || iy >= g.height) continue;
            for (std::int64_t ox = 0; ox < g.out_w; ++ox) {
              const std::int64_t ix = ox * g.stride - g.pad + kj;
              if (ix >= 0 && ix < g.width) dst[iy * g.width + ix] += src[oy * g.out_w + ox];
            }
          }
        }
      }
}

// [B, C, N] <-> [C, B*N]
void batch_to_channel_major(const double* src, double* dst, std::int64_t B, std::int64_t C,
                            std::int64_t N) {
  for (std::int64_t b = 0; b < B; ++b)
    for (std::int64_t c = 0; c < C; ++c)
      std::copy_n(src + (b * C + c) * N, N, dst + c * B * N + b * N);
}

void channel_major_to_batch(const double* src, double* dst, std::int64_t B, std::int64_t C,
                            std::int64_t N, bool accumulate) {
  for (std::int64_t b = 0; b < B; ++b)
    for (std::int64_t c = 0; c < C; ++c) {
      const double* s = src + c * B * N + b * N;
      double* d = dst + (b * C + c) * N;
      if (accumulate)
        for (std::int64_t i = 0; i < N; ++i) d[i] += s[i];
      else
        std::copy_n(s, N, d);
    }
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return binary(
      "add", a, b, [](double x, double y) { return x + y; }, [](double, double, double) { return 1.0; },
      [](double, double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary(
      "sub", a, b, [](double x, double y) { return x - y; }, [](double, double, double) { return 1.0; },
      [](double, double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary(
      "mul", a, b, [](double x, double y) { return x * y; }, [](double, double y, double) { return y; },
      [](double x, double, double) { return x; });
}

Tensor div(const Tensor& a, const Tensor& b) {
  return binary(
      "div", a, b, [](double x, double y) { return x / y; },
      [](double, double y, double) { return 1.0 / y; },
      [](double x, double y, double) { return -x / (y * y); });
}

Tensor add_scalar(const Tensor& a, double s) {
  return unary(
      "add_scalar", a, [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

Tensor mul_scalar(const Tensor& a, double s) {
  return unary(
      "mul_scalar", a, [s](double x) { return x * s; }, [s](double, double) { return s; });
}

Tensor neg(const Tensor& a) { return mul_scalar(a, -1.0); }

Tensor relu(const Tensor& a) {
  return unary(
      "relu", a, [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor silu(const Tensor& a) {
  return unary(
      "silu", a, [](double x) { return x / (1.0 + std::exp(-x)); },
      [](double x, double) {
        const double s = 1.0 / (1.0 + std::exp(-x));
        return s * (1.0 + x * (1.0 - s));
      });
}

Tensor tanh(const Tensor& a) {
  return unary(
      "tanh", a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

Tensor sigmoid(const Tensor& a) {
  return unary(
      "sigmoid", a, [](double x) { return 1.0 / (1.0 + std::exp(-x)); },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor exp(const Tensor& a) {
  return unary(
      "exp", a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& a) {
  return unary(
      "log", a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Tensor sqrt(const Tensor& a) {
  return unary(
      "sqrt", a, [](double x) { return std::sqrt(x); }, [](double, double y) { return 0.5 / y; });
}

Tensor square(const Tensor& a) {
  return unary(
      "square", a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Tensor smooth_clamp(const Tensor& a, double knee) {
  if (!(knee > 0.0 && knee < 1.0)) throw Error("smooth_clamp: knee must lie in (0,1)");
  const double width = 1.0 - knee;
  return unary(
      "smooth_clamp", a,
      [knee, width](double x) {
        const double m = std::abs(x);
        if (m <= knee) return x;
        return std::copysign(knee + width * std::tanh((m - knee) / width), x);
      },
      [knee, width](double x, double) {
        const double m = std::abs(x);
        if (m <= knee) return 1.0;
        const double t = std::tanh((m - knee) / width);
        return 1.0 - t * t;
      });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  const bool batched_a = a.ndim() == 3;
  if (!(a.ndim() == 2 || a.ndim() == 3) || !(b.ndim() == 2 || b.ndim() == 3) ||
      (a.ndim() == 2 && b.ndim() == 3))
    mismatch("matmul", a.shape(), b.shape());
  const std::int64_t batch = batched_a ? a.dim(0) : 1;
  const std::int64_t m = a.dim(a.ndim() - 2), k = a.dim(a.ndim() - 1);
  const std::int64_t k2 = b.dim(b.ndim() - 2), n = b.dim(b.ndim() - 1);
  const bool shared_b = b.ndim() == 2;
  if (k != k2 || (!shared_b && b.dim(0) != batch)) mismatch("matmul", a.shape(), b.shape());
  Shape out = batched_a ? Shape{batch, m, n} : Shape{m, n};

  auto fwd = [=](std::span<const Tensor> in, TensorImpl& o) {
    const double* A = in[0].values().data();
    const double* Bp = in[1].values().data();
    if (shared_b) {
      // Fold the batch into rows.
      MapMat(o.data.data(), batch * m, n).noalias() = CMapMat(A, batch * m, k) * CMapMat(Bp, k, n);
      return;
    }
    for (std::int64_t i = 0; i < batch; ++i)
      MapMat(o.data.data() + i * m * n, m, n).noalias() =
          CMapMat(A + i * m * k, m, k) * CMapMat(Bp + i * k * n, k, n);
  };
  auto bwd = [=](std::span<const Tensor> in, const TensorImpl& o) {
    const double* A = in[0].values().data();
    const double* Bp = in[1].values().data();
    const double* G = o.grad.data();
    if (shared_b) {
      if (in[0].requires_grad())
        MapMat(grad_buffer(in[0]).data(), batch * m, k).noalias() +=
            CMapMat(G, batch * m, n) * CMapMat(Bp, k, n).transpose();
      if (in[1].requires_grad())
        MapMat(grad_buffer(in[1]).data(), k, n).noalias() +=
            CMapMat(A, batch * m, k).transpose() * CMapMat(G, batch * m, n);
      return;
    }
    for (std::int64_t i = 0; i < batch; ++i) {
      if (in[0].requires_grad())
        MapMat(grad_buffer(in[0]).data() + i * m * k, m, k).noalias() +=
            CMapMat(G + i * m * n, m, n) * CMapMat(Bp + i * k * n, k, n).transpose();
      if (in[1].requires_grad())
        MapMat(grad_buffer(in[1]).data() + i * k * n, k, n).noalias() +=
            CMapMat(A + i * m * k, m, k).transpose() * CMapMat(G + i * m * n, m, n);
    }
  };
  return make_op("matmul", {a, b}, std::move(out), fwd, bwd);
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  require_rank("linear", w, 2);
  const std::int64_t in_f = w.dim(1), out_f = w.dim(0);
  if (x.ndim() == 0 || x.dim(x.ndim() - 1) != in_f) mismatch("linear", x.shape(), w.shape());
  const bool has_bias = b.size() > 0;
  if (has_bias && (b.ndim() != 1 || b.dim(0) != out_f)) mismatch("linear", w.shape(), b.shape());
  const std::int64_t rows = x.size() / in_f;
  Shape out = x.shape();
  out.back() = out_f;
  std::vector<Tensor> inputs{x, w};
  if (has_bias) inputs.push_back(b);

  auto fwd = [=](std::span<const Tensor> in, TensorImpl& o) {
    MapMat Y(o.data.data(), rows, out_f);
    Y.noalias() = CMapMat(in[0].values().data(), rows, in_f) *
                  CMapMat(in[1].values().data(), out_f, in_f).transpose();
    if (has_bias) {
      Eigen::Map<const Eigen::RowVectorXd> bias(in[2].values().data(), out_f);
      Y.rowwise() += bias;
    }
  };
  auto bwd = [=](std::span<const Tensor> in, const TensorImpl& o) {
    CMapMat G(o.grad.data(), rows, out_f);
    if (in[0].requires_grad())
      MapMat(grad_buffer(in[0]).data(), rows, in_f).noalias() +=
          G * CMapMat(in[1].values().data(), out_f, in_f);
    if (in[1].requires_grad())
      MapMat(grad_buffer(in[1]).data(), out_f, in_f).noalias() +=
          G.transpose() * CMapMat(in[0].values().data(), rows, in_f);
    if (has_bias && in[2].requires_grad()) {
      Eigen::Map<Eigen::RowVectorXd> gb(grad_buffer(in[2]).data(), out_f);
      gb += G.colwise().sum();
    }
  };
  return make_op("linear", std::move(inputs), std::move(out), fwd, bwd);
}

Tensor permute(const Tensor& a, const std::vector<int>& axes) {
  const std::size_t nd = a.ndim();
  if (axes.size() != nd) throw ShapeError("permute: axis list does not match shape " + to_string(a.shape()));
  std::vector<int> seen(nd, 0);
  Shape out(nd);
  for (std::size_t i = 0; i < nd; ++i) {
    const int ax = normalize_axis(axes[i], nd, "permute");
    if (seen[ax]++) throw ShapeError("permute: repeated axis");
    out[i] = a.dim(ax);
  }
  // map[out flat index] = in flat index
  auto in_strides = strides_of(a.shape());
  std::vector<std::int64_t> perm_strides(nd);
  for (std::size_t i = 0; i < nd; ++i) perm_strides[i] = in_strides[normalize_axis(axes[i], nd, "permute")];
  auto map = std::make_shared<std::vector<std::int64_t>>(static_cast<std::size_t>(numel(out)));
  {
    std::vector<std::int64_t> idx(nd, 0);
    std::int64_t pos = 0;
    for (std::size_t i = 0; i < map->size(); ++i) {
      (*map)[i] = pos;
      for (int d = static_cast<int>(nd) - 1; d >= 0; --d) {
        if (++idx[d] < out[d]) {
          pos += perm_strides[d];
          break;
        }
        pos -= perm_strides[d] * (out[d] - 1);
        idx[d] = 0;
      }
    }
  }
  auto fwd = [map](std::span<const Tensor> in, TensorImpl& o) {
    const auto& x = in[0].values();
    for (std::size_t i = 0; i < map->size(); ++i) o.data[i] = x[(*map)[i]];
  };
  auto bwd = [map](std::span<const Tensor> in, const TensorImpl& o) {
    auto& g = grad_buffer(in[0]);
    for (std::size_t i = 0; i < map->size(); ++i) g[(*map)[i]] += o.grad[i];
  };
  return make_op("permute", {a}, std::move(out), fwd, bwd);
}

Tensor transpose(const Tensor& a) {
  if (a.ndim() < 2) throw ShapeError("transpose: needs rank >= 2, got " + to_string(a.shape()));
  std::vector<int> axes(a.ndim());
  std::iota(axes.begin(), axes.end(), 0);
  std::swap(axes[a.ndim() - 1], axes[a.ndim() - 2]);
  return permute(a, axes);
}

Tensor reshape(const Tensor& a, Shape shape) {
  std::int64_t known = 1;
  int infer = -1;
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (shape[i] == -1) {
      if (infer >= 0) throw ShapeError("reshape: more than one inferred extent");
      infer = static_cast<int>(i);
    } else {
      known *= shape[i];
    }
  }
  if (infer >= 0 && known > 0) shape[infer] = a.size() / known;
  if (numel(shape) != a.size())
    throw ShapeError("reshape: cannot view " + to_string(a.shape()) + " as " + to_string(shape));
  auto fwd = [](std::span<const Tensor> in, TensorImpl& o) {
    std::copy(in[0].values().begin(), in[0].values().end(), o.data.begin());
  };
  auto bwd = [](std::span<const Tensor> in, const TensorImpl& o) {
    auto& g = grad_buffer(in[0]);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
  };
  return make_op("reshape", {a}, std::move(shape), fwd, bwd);
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const std::size_t nd = parts[0].ndim();
  axis = normalize_axis(axis, nd, "concat");
  Shape out = parts[0].shape();
  out[axis] = 0;
  for (const auto& p : parts) {
    if (p.ndim() != nd) mismatch("concat", parts[0].shape(), p.shape());
    for (std::size_t d = 0; d < nd; ++d)
      if (static_cast<int>(d) != axis && p.dim(d) != parts[0].dim(d))
        mismatch("concat", parts[0].shape(), p.shape());
    out[axis] += p.dim(axis);
  }
  std::int64_t outer = 1;
  for (int d = 0; d < axis; ++d) outer *= out[d];
  const std::int64_t out_block = numel(out) / std::max<std::int64_t>(outer, 1);

  auto fwd = [outer, out_block](std::span<const Tensor> in, TensorImpl& o) {
    std::int64_t offset = 0;
    for (const auto& p : in) {
      const std::int64_t block = outer ? p.size() / outer : 0;
      for (std::int64_t r = 0; r < outer; ++r)
        std::copy_n(p.values().data() + r * block, block, o.data.data() + r * out_block + offset);
      offset += block;
    }
  };
  auto bwd = [outer, out_block](std::span<const Tensor> in, const TensorImpl& o) {
    std::int64_t offset = 0;
    for (const auto& p : in) {
      const std::int64_t block = outer ? p.size() / outer : 0;
      if (p.requires_grad()) {
        auto& g = grad_buffer(p);
        for (std::int64_t r = 0; r < outer; ++r)
          for (std::int64_t i = 0; i < block; ++i) g[r * block + i] += o.grad[r * out_block + offset + i];
      }
      offset += block;
    }
  };
  return make_op("concat", parts, std::move(out), fwd, bwd);
}

Tensor slice(const Tensor& a, int axis, std::int64_t start, std::int64_t length) {
  axis = normalize_axis(axis, a.ndim(), "slice");
  if (start < 0 || length < 0 || start + length > a.dim(axis))
    throw ShapeError("slice: range [" + std::to_string(start) + ", " + std::to_string(start + length) +
                     ") outside axis of extent " + std::to_string(a.dim(axis)) + " in " +
                     to_string(a.shape()));
  Shape out = a.shape();
  out[axis] = length;
  std::int64_t outer = 1, inner = 1;
  for (int d = 0; d < axis; ++d) outer *= a.dim(d);
  for (std::size_t d = axis + 1; d < a.ndim(); ++d) inner *= a.dim(d);
  const std::int64_t in_block = a.dim(axis) * inner, out_block = length * inner, off = start * inner;
  auto fwd = [=](std::span<const Tensor> in, TensorImpl& o) {
    for (std::int64_t r = 0; r < outer; ++r)
      std::copy_n(in[0].values().data() + r * in_block + off, out_block, o.data.data() + r * out_block);
  };
  auto bwd = [=](std::span<const Tensor> in, const TensorImpl& o) {
    auto& g = grad_buffer(in[0]);
    for (std::int64_t r = 0; r < outer; ++r)
      for (std::int64_t i = 0; i < out_block; ++i) g[r * in_block + off + i] += o.grad[r * out_block + i];
  };
  return make_op("slice", {a}, std::move(out), fwd, bwd);
}

Tensor gather_rows(const Tensor& table, const std::vector<std::int64_t>& ids) {
  require_rank("gather_rows", table, 2);
  const std::int64_t width = table.dim(1);
  for (auto id : ids)
    if (id < 0 || id >= table.dim(0))
      throw ShapeError("gather_rows: row " + std::to_string(id) + " outside table of shape " +
                       to_string(table.shape()));
  Shape out{static_cast<std::int64_t>(ids.size()), width};
  auto fwd = [ids, width](std::span<const Tensor> in, TensorImpl& o) {
    for (std::size_t i = 0; i < ids.size(); ++i)
      std::copy_n(in[0].values().data() + ids[i] * width, width, o.data.data() + i * width);
  };
  auto bwd = [ids, width](std::span<const Tensor> in, const TensorImpl& o) {
    auto& g = grad_buffer(in[0]);
    for (std::size_t i = 0; i < ids.size(); ++i)
      for (std::int64_t j = 0; j < width; ++j) g[ids[i] * width + j] += o.grad[i * width + j];
  };
  return make_op("gather_rows", {table}, std::move(out), fwd, bwd);
}

Tensor pick(const Tensor& a, const std::vector<std::int64_t>& cols) {
  require_rank("pick", a, 2);
  const std::int64_t rows = a.dim(0), width = a.dim(1);
  if (static_cast<std::int64_t>(cols.size()) != rows)
    throw ShapeError("pick: " + std::to_string(cols.size()) + " indices for shape " + to_string(a.shape()));
  for (auto c : cols)
    if (c < 0 || c >= width) throw ShapeError("pick: column " + std::to_string(c) + " out of range");
  auto fwd = [cols, width](std::span<const Tensor> in, TensorImpl& o) {
    for (std::size_t i = 0; i < cols.size(); ++i) o.data[i] = in[0].values()[i * width + cols[i]];
  };
  auto bwd = [cols, width](std::span<const Tensor> in, const TensorImpl& o) {
    auto& g = grad_buffer(in[0]);
    for (std::size_t i = 0; i < cols.size(); ++i) g[i * width + cols[i]] += o.grad[i];
  };
  return make_op("pick", {a}, Shape{rows}, fwd, bwd);
}

Tensor sum(const Tensor& a) {
  auto fwd = [](std::span<const Tensor> in, TensorImpl& o) {
    double s = 0.0;
    for (double v : in[0].values()) s += v;
    o.data[0] = s;
  };
  auto bwd = [](std::span<const Tensor> in, const TensorImpl& o) {
    auto& g = grad_buffer(in[0]);
    for (auto& v : g) v += o.grad[0];
  };
  return make_op("sum", {a}, Shape{}, fwd, bwd);
}

Tensor mean(const Tensor& a) {
  if (a.size() == 0) throw ShapeError("mean: empty tensor");
  return mul_scalar(sum(a), 1.0 / static_cast<double>(a.size()));
}

Tensor sum_axes(const Tensor& a, const std::vector<int>& axes, bool keepdim) {
  const std::size_t nd = a.ndim();
  std::vector<bool> reduce(nd, false);
  for (int ax : axes) reduce[normalize_axis(ax, nd, "sum_axes")] = true;
  Shape kept(nd), out;
  for (std::size_t d = 0; d < nd; ++d) {
    kept[d] = reduce[d] ? 1 : a.dim(d);
    if (!reduce[d] || keepdim) out.push_back(kept[d]);
  }
  // map[input flat index] = output flat index
  auto map = std::make_shared<std::vector<std::int64_t>>(broadcast_map(kept, a.shape()));
  auto fwd = [map](std::span<const Tensor> in, TensorImpl& o) {
    std::fill(o.data.begin(), o.data.end(), 0.0);
    const auto& x = in[0].values();
    for (std::size_t i = 0; i < x.size(); ++i) o.data[(*map)[i]] += x[i];
  };
  auto bwd = [map](std::span<const Tensor> in, const TensorImpl& o) {
    auto& g = grad_buffer(in[0]);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[(*map)[i]];
  };
  return make_op("sum_axes", {a}, std::move(out), fwd, bwd);
}

Tensor mean_axes(const Tensor& a, const std::vector<int>& axes, bool keepdim) {
  std::int64_t count = 1;
  std::vector<bool> seen(a.ndim(), false);
  for (int ax : axes) {
    const int n = normalize_axis(ax, a.ndim(), "mean_axes");
    if (!seen[n]) count *= a.dim(n);
    seen[n] = true;
  }
  return mul_scalar(sum_axes(a, axes, keepdim), 1.0 / static_cast<double>(count));
}

Tensor var_axes(const Tensor& a, const std::vector<int>& axes, bool keepdim) {
  Tensor centered = sub(a, mean_axes(a, axes, true));
  return mean_axes(square(centered), axes, keepdim);
}

Tensor l2_norm(const Tensor& a) {
  auto fwd = [](std::span<const Tensor> in, TensorImpl& o) {
    double s = 0.0;
    for (double v : in[0].values()) s += v * v;
    o.data[0] = std::sqrt(s);
  };
  auto bwd = [](std::span<const Tensor> in, const TensorImpl& o) {
    const double n = o.data[0];
    if (n == 0.0) return;
    auto& g = grad_buffer(in[0]);
    const auto& x = in[0].values();
    for (std::size_t i = 0; i < x.size(); ++i) g[i] += o.grad[0] * x[i] / n;
  };
  return make_op("l2_norm", {a}, Shape{}, fwd, bwd);
}

Tensor softmax(const Tensor& a) {
  if (a.ndim() == 0) throw ShapeError("softmax: needs rank >= 1");
  const std::int64_t width = a.dim(a.ndim() - 1);
  const std::int64_t rows = width ? a.size() / width : 0;
  auto fwd = [=](std::span<const Tensor> in, TensorImpl& o) {
    const double* x = in[0].values().data();
    for (std::int64_t r = 0; r < rows; ++r) {
      const double* xr = x + r * width;
      double* yr = o.data.data() + r * width;
      const double mx = *std::max_element(xr, xr + width);
      double s = 0.0;
      for (std::int64_t j = 0; j < width; ++j) s += (yr[j] = std::exp(xr[j] - mx));
      for (std::int64_t j = 0; j < width; ++j) yr[j] /= s;
    }
  };
  auto bwd = [=](std::span<const Tensor> in, const TensorImpl& o) {
    auto& g = grad_buffer(in[0]);
    for (std::int64_t r = 0; r < rows; ++r) {
      const double* y = o.data.data() + r * width;
      const double* gy = o.grad.data() + r * width;
      double dot = 0.0;
      for (std::int64_t j = 0; j < width; ++j) dot += y[j] * gy[j];
      for (std::int64_t j = 0; j < width; ++j) g[r * width + j] += y[j] * (gy[j] - dot);
    }
  };
  return make_op("softmax", {a}, a.shape(), fwd, bwd);
}

Tensor log_softmax(const Tensor& a) {
  if (a.ndim() == 0) throw ShapeError("log_softmax: needs rank >= 1");
  const std::int64_t width = a.dim(a.ndim() - 1);
  const std::int64_t rows = width ? a.size() / width : 0;
  auto fwd = [=](std::span<const Tensor> in, TensorImpl& o) {
    const double* x = in[0].values().data();
    for (std::int64_t r = 0; r < rows; ++r) {
      const double* xr = x + r * width;
      const double mx = *std::max_element(xr, xr + width);
      double s = 0.0;
      for (std::int64_t j = 0; j < width; ++j) s += std::exp(xr[j] - mx);
      const double lse = mx + std::log(s);
      for (std::int64_t j = 0; j < width; ++j) o.data[r * width + j] = xr[j] - lse;
    }
  };
  auto bwd = [=](std::span<const Tensor> in, const TensorImpl& o) {
    auto& g = grad_buffer(in[0]);
    for (std::int64_t r = 0; r < rows; ++r) {
      const double* y = o.data.data() + r * width;
      const double* gy = o.grad.data() + r * width;
      double total = 0.0;
      for (std::int64_t j = 0; j < width; ++j) total += gy[j];
      for (std::int64_t j = 0; j < width; ++j) g[r * width + j] += gy[j] - std::exp(y[j]) * total;
    }
  };
  return make_op("log_softmax", {a}, a.shape(), fwd, bwd);
}

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, int stride, int pad) {
  require_rank("conv2d", x, 4);
  require_rank("conv2d", w, 4);
  if (w.dim(1) != x.dim(1) || w.dim(2) != w.dim(3)) mismatch("conv2d", x.shape(), w.shape());
  if (stride < 1 || pad < 0) throw ShapeError("conv2d: invalid stride/padding");
  ConvGeom g{x.dim(0), x.dim(1), x.dim(2), x.dim(3), w.dim(2), stride, pad, 0, 0};
  g.out_h = (g.height + 2 * pad - g.kernel) / stride + 1;
  g.out_w = (g.width + 2 * pad - g.kernel) / stride + 1;
  if (g.out_h <= 0 || g.out_w <= 0) mismatch("conv2d", x.shape(), w.shape());
  const bool has_bias = bias.size() > 0;
  const std::int64_t O = w.dim(0);
  if (has_bias && (bias.ndim() != 1 || bias.dim(0) != O)) mismatch("conv2d", w.shape(), bias.shape());
  std::vector<Tensor> inputs{x, w};
  if (has_bias) inputs.push_back(bias);
  auto cols = std::make_shared<Buffer>();
  const std::int64_t plane = g.out_h * g.out_w;

  auto fwd = [=](std::span<const Tensor> in, TensorImpl& o) {
    cols->assign(static_cast<std::size_t>(g.rows() * g.cols()), 0.0);
    im2col(g, in[0].values().data(), cols->data());
    Buffer tmp(static_cast<std::size_t>(O * g.cols()));
    MapMat T(tmp.data(), O, g.cols());
    T.noalias() = CMapMat(in[1].values().data(), O, g.rows()) * CMapMat(cols->data(), g.rows(), g.cols());
    if (has_bias)
      for (std::int64_t c = 0; c < O; ++c) T.row(c).array() += in[2].values()[c];
    channel_major_to_batch(tmp.data(), o.data.data(), g.batch, O, plane, false);
  };
  auto bwd = [=](std::span<const Tensor> in, const TensorImpl& o) {
    Buffer gtmp(static_cast<std::size_t>(O * g.cols()));
    batch_to_channel_major(o.grad.data(), gtmp.data(), g.batch, O, plane);
    CMapMat G(gtmp.data(), O, g.cols());
    if (in[1].requires_grad())
      MapMat(grad_buffer(in[1]).data(), O, g.rows()).noalias() +=
          G * CMapMat(cols->data(), g.rows(), g.cols()).transpose();
    if (has_bias && in[2].requires_grad()) {
      auto& gb = grad_buffer(in[2]);
      for (std::int64_t c = 0; c < O; ++c) gb[c] += G.row(c).sum();
    }
    if (in[0].requires_grad()) {
      Buffer gcols(static_cast<std::size_t>(g.rows() * g.cols()));
      MapMat(gcols.data(), g.rows(), g.cols()).noalias() =
          CMapMat(in[1].values().data(), O, g.rows()).transpose() * G;
      col2im(g, gcols.data(), grad_buffer(in[0]).data());
    }
  };
  return make_op("conv2d", std::move(inputs), Shape{g.batch, O, g.out_h, g.out_w}, fwd, bwd);
}

Tensor conv_transpose2d(const Tensor& x, const Tensor& w, const Tensor& bias, int stride, int pad) {
  require_rank("conv_transpose2d", x, 4);
  require_rank("conv_transpose2d", w, 4);
  if (w.dim(0) != x.dim(1) || w.dim(2) != w.dim(3)) mismatch("conv_transpose2d", x.shape(), w.shape());
  if (stride < 1 || pad < 0) throw ShapeError("conv_transpose2d: invalid stride/padding");
  const std::int64_t B = x.dim(0), Cin = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::int64_t Cout = w.dim(1), K = w.dim(2);
  const std::int64_t Ho = (H - 1) * stride - 2 * pad + K, Wo = (W - 1) * stride - 2 * pad + K;
  if (Ho <= 0 || Wo <= 0) mismatch("conv_transpose2d", x.shape(), w.shape());
  // The adjoint conv maps the [B,Cout,Ho,Wo] output back onto x's H x W grid.
  ConvGeom g{B, Cout, Ho, Wo, K, stride, pad, H, W};
  if ((Ho + 2 * pad - K) / stride + 1 != H || (Wo + 2 * pad - K) / stride + 1 != W)
    mismatch("conv_transpose2d", x.shape(), w.shape());
  const bool has_bias = bias.size() > 0;
  if (has_bias && (bias.ndim() != 1 || bias.dim(0) != Cout))
    mismatch("conv_transpose2d", w.shape(), bias.shape());
  std::vector<Tensor> inputs{x, w};
  if (has_bias) inputs.push_back(bias);
  const std::int64_t plane = H * W;

  auto fwd = [=](std::span<const Tensor> in, TensorImpl& o) {
    Buffer X(static_cast<std::size_t>(Cin * B * plane));
    batch_to_channel_major(in[0].values().data(), X.data(), B, Cin, plane);
    Buffer cols(static_cast<std::size_t>(g.rows() * g.cols()));
    MapMat(cols.data(), g.rows(), g.cols()).noalias() =
        CMapMat(in[1].values().data(), Cin, g.rows()).transpose() * CMapMat(X.data(), Cin, g.cols());
    std::fill(o.data.begin(), o.data.end(), 0.0);
    col2im(g, cols.data(), o.data.data());
    if (has_bias)
      for (std::int64_t b = 0; b < B; ++b)
        for (std::int64_t c = 0; c < Cout; ++c) {
          double* p = o.data.data() + (b * Cout + c) * Ho * Wo;
          for (std::int64_t i = 0; i < Ho * Wo; ++i) p[i] += in[2].values()[c];
        }
  };
  auto bwd = [=](std::span<const Tensor> in, const TensorImpl& o) {
    Buffer gcols(static_cast<std::size_t>(g.rows() * g.cols()));
    im2col(g, o.grad.data(), gcols.data());
    CMapMat GC(gcols.data(), g.rows(), g.cols());
    if (in[0].requires_grad()) {
      Buffer gx(static_cast<std::size_t>(Cin * g.cols()));
      MapMat(gx.data(), Cin, g.cols()).noalias() = CMapMat(in[1].values().data(), Cin, g.rows()) * GC;
      channel_major_to_batch(gx.data(), grad_buffer(in[0]).data(), B, Cin, plane, true);
    }
    if (in[1].requires_grad()) {
      Buffer X(static_cast<std::size_t>(Cin * B * plane));
      batch_to_channel_major(in[0].values().data(), X.data(), B, Cin, plane);
      MapMat(grad_buffer(in[1]).data(), Cin, g.rows()).noalias() +=
          CMapMat(X.data(), Cin, g.cols()) * GC.transpose();
    }
    if (has_bias && in[2].requires_grad()) {
      auto& gb = grad_buffer(in[2]);
      for (std::int64_t b = 0; b < B; ++b)
        for (std::int64_t c = 0; c < Cout; ++c) {
          const double* p = o.grad.data() + (b * Cout + c) * Ho * Wo;
          for (std::int64_t i = 0; i < Ho * Wo; ++i) gb[c] += p[i];
        }
    }
  };
  return make_op("conv_transpose2d", std::move(inputs), Shape{B, Cout, Ho, Wo}, fwd, bwd);
}

Tensor avg_pool2d(const Tensor& x, int k) {
  require_rank("avg_pool2d", x, 4);
  const std::int64_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (k < 1 || H % k || W % k) throw ShapeError("avg_pool2d: window does not tile " + to_string(x.shape()));
  const std::int64_t Ho = H / k, Wo = W / k;
  const double inv = 1.0 / (k * k);
  auto fwd = [=](std::span<const Tensor> in, TensorImpl& o) {
    const double* src = in[0].values().data();
    for (std::int64_t p = 0; p < B * C; ++p)
      for (std::int64_t i = 0; i < Ho; ++i)
        for (std::int64_t j = 0; j < Wo; ++j) {
          double s = 0.0;
          for (int a = 0; a < k; ++a)
            for (int b = 0; b < k; ++b) s += src[p * H * W + (i * k + a) * W + j * k + b];
          o.data[p * Ho * Wo + i * Wo + j] = s * inv;
        }
  };
  auto bwd = [=](std::span<const Tensor> in, const TensorImpl& o) {
    auto& g = grad_buffer(in[0]);
    for (std::int64_t p = 0; p < B * C; ++p)
      for (std::int64_t i = 0; i < Ho; ++i)
        for (std::int64_t j = 0; j < Wo; ++j) {
          const double v = o.grad[p * Ho * Wo + i * Wo + j] * inv;
          for (int a = 0; a < k; ++a)
            for (int b = 0; b < k; ++b) g[p * H * W + (i * k + a) * W + j * k + b] += v;
        }
  };
  return make_op("avg_pool2d", {x}, Shape{B, C, Ho, Wo}, fwd, bwd);
}

Tensor max_pool2d(const Tensor& x, int k) {
  require_rank("max_pool2d", x, 4);
  const std::int64_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (k < 1 || H % k || W % k) throw ShapeError("max_pool2d: window does not tile " + to_string(x.shape()));
  const std::int64_t Ho = H / k, Wo = W / k;
  auto argmax = std::make_shared<std::vector<std::int64_t>>();
  auto fwd = [=](std::span<const Tensor> in, TensorImpl& o) {
    const double* src = in[0].values().data();
    argmax->assign(o.data.size(), 0);
    for (std::int64_t p = 0; p < B * C; ++p)
      for (std::int64_t i = 0; i < Ho; ++i)
        for (std::int64_t j = 0; j < Wo; ++j) {
          std::int64_t best = p * H * W + (i * k) * W + j * k;
          for (int a = 0; a < k; ++a)
            for (int b = 0; b < k; ++b) {
              const std::int64_t idx = p * H * W + (i * k + a) * W + j * k + b;
              if (src[idx] > src[best]) best = idx;
            }
          const std::int64_t out = p * Ho * Wo + i * Wo + j;
          (*argmax)[out] = best;
          o.data[out] = src[best];
        }
  };
  auto bwd = [argmax](std::span<const Tensor> in, const TensorImpl& o) {
    auto& g = grad_buffer(in[0]);
    for (std::size_t i = 0; i < o.grad.size(); ++i) g[(*argmax)[i]] += o.grad[i];
  };
  return make_op("max_pool2d", {x}, Shape{B, C, Ho, Wo}, fwd, bwd);
}

Tensor upsample_nearest2d(const Tensor& x, int factor) {
  require_rank("upsample_nearest2d", x, 4);
  if (factor < 1) throw ShapeError("upsample_nearest2d: factor must be >= 1");
  const std::int64_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::int64_t Ho = H * factor, Wo = W * factor;
  auto fwd = [=](std::span<const Tensor> in, TensorImpl& o) {
    const double* src = in[0].values().data();
    for (std::int64_t p = 0; p < B * C; ++p)
      for (std::int64_t i = 0; i < Ho; ++i)
        for (std::int64_t j = 0; j < Wo; ++j)
          o.data[p * Ho * Wo + i * Wo + j] = src[p * H * W + (i / factor) * W + j / factor];
  };
  auto bwd = [=](std::span<const Tensor> in, const TensorImpl& o) {
    auto& g = grad_buffer(in[0]);
    for (std::int64_t p = 0; p < B * C; ++p)
      for (std::int64_t i = 0; i < Ho; ++i)
        for (std::int64_t j = 0; j < Wo; ++j)
          g[p * H * W + (i / factor) * W + j / factor] += o.grad[p * Ho * Wo + i * Wo + j];
  };
  return make_op("upsample_nearest2d", {x}, Shape{B, C, Ho, Wo}, fwd, bwd);
}

bool is_finite(const Tensor& t) {
  for (double v : t.values())
    if (!std::isfinite(v)) return false;
  return true;
}

}  // namespace ddis
