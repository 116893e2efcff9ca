#include "facectl/ops.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <random>
#include <stdexcept>

namespace facectl::ops {

namespace {

using MatRM = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapRM = Eigen::Map<MatRM>;
using CMapRM = Eigen::Map<const MatRM>;

void require(bool cond, const std::string& what) {
  if (!cond) throw std::invalid_argument(what);
}

void require_same_shape(const Var& a, const Var& b, const char* op) {
  require(a.shape() == b.shape(), std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
}

void require_rank(const Tensor& t, int r, const char* op) {
  require(t.rank() == r, std::string(op) + ": expected rank " + std::to_string(r) + ", got shape " + to_string(t.shape()));
}

Node& parent(Node& n, std::size_t i) { return *n.parents[i]; }

// Elementwise map with derivative expressed through input and output values.
template <typename F, typename DF>
Var unary(const Var& a, F f, DF df) {
  const Tensor& x = a.value();
  Tensor y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = f(x[i]);
  return make_result(std::move(y), {a}, [df](Node& self) {
    Node& p = parent(self, 0);
    if (!p.requires_grad) return;
    Tensor& g = p.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * df(p.value[i], self.value[i]);
  });
}

struct ConvGeometry {
  int batch, channels, height, width;  // source image
  int kernel, stride, pad;
  int out_h, out_w;  // sampling grid
};

// col: (C*k*k) x (B*out_h*out_w), row-major.
void im2col(const double* src, const ConvGeometry& g, double* col) {
  const int k = g.kernel;
  const std::size_t plane = static_cast<std::size_t>(g.out_h) * g.out_w;
  const std::size_t cols = plane * g.batch;
  for (int c = 0; c < g.channels; ++c) {
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        double* row = col + (static_cast<std::size_t>(c * k + ky) * k + kx) * cols;
        for (int b = 0; b < g.batch; ++b) {
          const double* img = src + (static_cast<std::size_t>(b) * g.channels + c) * g.height * g.width;
          double* dst = row + b * plane;
          for (int oy = 0; oy < g.out_h; ++oy) {
            const int iy = oy * g.stride - g.pad + ky;
            double* d = dst + static_cast<std::size_t>(oy) * g.out_w;
            if (iy < 0 || iy >= g.height) {
              std::fill(d, d + g.out_w, 0.0);
              continue;
            }
            const double* srow = img + static_cast<std::size_t>(iy) * g.width;
            if (g.stride == 1) {
              // Valid outputs are the contiguous range with 0 <= ox - pad + kx < width.
              const int shift = kx - g.pad;
              const int lo = std::clamp(-shift, 0, g.out_w), hi = std::clamp(g.width - shift, lo, g.out_w);
              std::fill(d, d + lo, 0.0);
              std::copy(srow + lo + shift, srow + hi + shift, d + lo);
              std::fill(d + hi, d + g.out_w, 0.0);
            } else {
              for (int ox = 0; ox < g.out_w; ++ox) {
                const int ix = ox * g.stride - g.pad + kx;
                d[ox] = (ix >= 0 && ix < g.width) ? srow[ix] : 0.0;
              }
            }
          }
        }
      }
    }
  }
}

// Adjoint of im2col: accumulates columns back into the source image.
void col2im(const double* col, const ConvGeometry& g, double* dst) {
  const int k = g.kernel;
  const std::size_t plane = static_cast<std::size_t>(g.out_h) * g.out_w;
  const std::size_t cols = plane * g.batch;
  for (int c = 0; c < g.channels; ++c) {
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        const double* row = col + (static_cast<std::size_t>(c * k + ky) * k + kx) * cols;
        for (int b = 0; b < g.batch; ++b) {
          double* img = dst + (static_cast<std::size_t>(b) * g.channels + c) * g.height * g.width;
          const double* s = row + b * plane;
          for (int oy = 0; oy < g.out_h; ++oy) {
            const int iy = oy * g.stride - g.pad + ky;
            if (iy < 0 || iy >= g.height) continue;
            double* drow = img + static_cast<std::size_t>(iy) * g.width;
            const double* srow = s + static_cast<std::size_t>(oy) * g.out_w;
            if (g.stride == 1) {
              const int shift = kx - g.pad;
              const int lo = std::clamp(-shift, 0, g.out_w), hi = std::clamp(g.width - shift, lo, g.out_w);
              for (int ox = lo; ox < hi; ++ox) drow[ox + shift] += srow[ox];
              continue;
            }
            for (int ox = 0; ox < g.out_w; ++ox) {
              const int ix = ox * g.stride - g.pad + kx;
              if (ix >= 0 && ix < g.width) drow[ix] += srow[ox];
            }
          }
        }
      }
    }
  }
}

// [B, C, P] <-> [C, B*P]
void batch_to_channel_major(const double* src, int B, int C, std::size_t P, double* dst) {
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < C; ++c)
      std::copy_n(src + (static_cast<std::size_t>(b) * C + c) * P, P, dst + (static_cast<std::size_t>(c) * B + b) * P);
}

void channel_major_to_batch(const double* src, int B, int C, std::size_t P, double* dst) {
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < C; ++c)
      std::copy_n(src + (static_cast<std::size_t>(c) * B + b) * P, P, dst + (static_cast<std::size_t>(b) * C + c) * P);
}

void add_channel_major_to_batch(const double* src, int B, int C, std::size_t P, double* dst) {
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < C; ++c) {
      const double* s = src + (static_cast<std::size_t>(c) * B + b) * P;
      double* d = dst + (static_cast<std::size_t>(b) * C + c) * P;
      for (std::size_t i = 0; i < P; ++i) d[i] += s[i];
    }
}

void add_bias(Tensor& y, const Var& bias) {
  if (!bias.defined()) return;
  const int B = y.dim(0), C = y.dim(1);
  const std::size_t P = y.size() / (static_cast<std::size_t>(B) * C);
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < C; ++c) {
      const double v = bias.value()[c];
      double* d = y.data() + (static_cast<std::size_t>(b) * C + c) * P;
      for (std::size_t i = 0; i < P; ++i) d[i] += v;
    }
}

void accumulate_bias_grad(Node& bias_node, const Tensor& g) {
  if (!bias_node.requires_grad) return;
  const int B = g.dim(0), C = g.dim(1);
  const std::size_t P = g.size() / (static_cast<std::size_t>(B) * C);
  Tensor& db = bias_node.grad_buffer();
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < C; ++c) {
      const double* s = g.data() + (static_cast<std::size_t>(b) * C + c) * P;
      double acc = 0.0;
      for (std::size_t i = 0; i < P; ++i) acc += s[i];
      db[c] += acc;
    }
}

std::vector<Var> with_optional(std::vector<Var> vars, const Var& maybe) {
  if (maybe.defined()) vars.push_back(maybe);
  return vars;
}

}  // namespace

// --- elementwise -----------------------------------------------------------

Var add(const Var& a, const Var& b) {
  require_same_shape(a, b, "add");
  return make_result(a.value() + b.value(), {a, b}, [](Node& self) {
    parent(self, 0).accumulate(self.grad);
    parent(self, 1).accumulate(self.grad);
  });
}

Var sub(const Var& a, const Var& b) {
  require_same_shape(a, b, "sub");
  return make_result(a.value() - b.value(), {a, b}, [](Node& self) {
    parent(self, 0).accumulate(self.grad);
    parent(self, 1).accumulate(self.grad * -1.0);
  });
}

Var mul(const Var& a, const Var& b) {
  require_same_shape(a, b, "mul");
  Tensor y = a.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] *= b.value()[i];
  return make_result(std::move(y), {a, b}, [](Node& self) {
    Node& pa = parent(self, 0);
    Node& pb = parent(self, 1);
    if (pa.requires_grad) {
      Tensor& g = pa.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pb.value[i];
    }
    if (pb.requires_grad) {
      Tensor& g = pb.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pa.value[i];
    }
  });
}

Var scale(const Var& a, double s) {
  return make_result(a.value() * s, {a}, [s](Node& self) { parent(self, 0).accumulate(self.grad * s); });
}

Var add_scalar(const Var& a, double s) {
  Tensor y = a.value();
  for (double& v : y.values()) v += s;
  return make_result(std::move(y), {a}, [](Node& self) { parent(self, 0).accumulate(self.grad); });
}

Var square(const Var& a) {
  return unary(a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Var leaky_relu(const Var& a, double slope) {
  return unary(
      a, [slope](double x) { return x > 0.0 ? x : slope * x; },
      [slope](double x, double) { return x > 0.0 ? 1.0 : slope; });
}

Var relu(const Var& a) {
  return unary(a, [](double x) { return x > 0.0 ? x : 0.0; }, [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Var tanh(const Var& a) {
  return unary(a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

// --- reductions and reshapes ----------------------------------------------

Var sum(const Var& a) {
  return make_result(Tensor::scalar(a.value().sum()), {a}, [](Node& self) {
    Node& p = parent(self, 0);
    if (!p.requires_grad) return;
    Tensor& g = p.grad_buffer();
    const double s = self.grad[0];
    for (double& v : g.values()) v += s;
  });
}

Var mean(const Var& a) {
  require(a.value().size() > 0, "mean of empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(a.value().size()));
}

Var reshape(const Var& a, Shape shape) {
  Tensor y = a.value().reshaped(std::move(shape));
  return make_result(std::move(y), {a}, [](Node& self) {
    Node& p = parent(self, 0);
    p.accumulate(self.grad.reshaped(p.value.shape()));
  });
}

Var detach(const Var& a) { return Var::constant(a.value()); }

Var concat_channels(std::span<const Var> parts) {
  require(!parts.empty(), "concat_channels: no inputs");
  const Shape& s0 = parts[0].shape();
  require(s0.size() >= 2, "concat_channels: rank < 2");
  const int B = s0[0];
  std::size_t inner = 1;
  for (std::size_t i = 2; i < s0.size(); ++i) inner *= static_cast<std::size_t>(s0[i]);
  int total = 0;
  std::vector<int> offsets;
  for (const Var& p : parts) {
    Shape s = p.shape();
    require(s.size() == s0.size() && s[0] == B, "concat_channels: incompatible shapes");
    for (std::size_t i = 2; i < s.size(); ++i) require(s[i] == s0[i], "concat_channels: spatial mismatch");
    offsets.push_back(total);
    total += s[1];
  }
  Shape out_shape = s0;
  out_shape[1] = total;
  Tensor y(out_shape);
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const int C = parts[k].dim(1);
    for (int b = 0; b < B; ++b)
      std::copy_n(parts[k].value().data() + static_cast<std::size_t>(b) * C * inner, C * inner,
                  y.data() + (static_cast<std::size_t>(b) * total + offsets[k]) * inner);
  }
  std::vector<Var> ps(parts.begin(), parts.end());
  return make_result(std::move(y), ps, [offsets, total, inner, B](Node& self) {
    for (std::size_t k = 0; k < self.parents.size(); ++k) {
      Node& p = *self.parents[k];
      if (!p.requires_grad) continue;
      Tensor& g = p.grad_buffer();
      const int C = p.value.dim(1);
      for (int b = 0; b < B; ++b) {
        const double* s = self.grad.data() + (static_cast<std::size_t>(b) * total + offsets[k]) * inner;
        double* d = g.data() + static_cast<std::size_t>(b) * C * inner;
        for (std::size_t i = 0; i < C * inner; ++i) d[i] += s[i];
      }
    }
  });
}

Var slice_channels(const Var& a, int begin, int end) {
  const Shape& s = a.shape();
  require(s.size() >= 2 && begin >= 0 && end <= s[1] && begin < end, "slice_channels: bad range");
  const int B = s[0], C = s[1], W = end - begin;
  std::size_t inner = 1;
  for (std::size_t i = 2; i < s.size(); ++i) inner *= static_cast<std::size_t>(s[i]);
  Shape os = s;
  os[1] = W;
  Tensor y(os);
  for (int b = 0; b < B; ++b)
    std::copy_n(a.value().data() + (static_cast<std::size_t>(b) * C + begin) * inner, W * inner,
                y.data() + static_cast<std::size_t>(b) * W * inner);
  return make_result(std::move(y), {a}, [=](Node& self) {
    Node& p = parent(self, 0);
    if (!p.requires_grad) return;
    Tensor& g = p.grad_buffer();
    for (int b = 0; b < B; ++b) {
      const double* sp = self.grad.data() + static_cast<std::size_t>(b) * W * inner;
      double* d = g.data() + (static_cast<std::size_t>(b) * C + begin) * inner;
      for (std::size_t i = 0; i < W * inner; ++i) d[i] += sp[i];
    }
  });
}

Var gather_batch(const Var& a, std::span<const int> indices) {
  std::vector<int> idx(indices.begin(), indices.end());
  Tensor y = facectl::gather_batch(a.value(), idx);
  return make_result(std::move(y), {a}, [idx](Node& self) {
    Node& p = parent(self, 0);
    if (!p.requires_grad) return;
    Tensor& g = p.grad_buffer();
    const std::size_t inner = g.size() / static_cast<std::size_t>(g.dim(0));
    for (std::size_t i = 0; i < idx.size(); ++i) {
      const double* s = self.grad.data() + inner * i;
      double* d = g.data() + inner * idx[i];
      for (std::size_t j = 0; j < inner; ++j) d[j] += s[j];
    }
  });
}

// --- layers ----------------------------------------------------------------

Var channel_affine(const Var& x, const Var& gamma, const Var& beta) {
  require_rank(x.value(), 4, "channel_affine");
  const int B = x.dim(0), C = x.dim(1);
  require(gamma.shape() == Shape{B, C} && beta.shape() == Shape{B, C}, "channel_affine: gamma/beta must be B x C");
  const std::size_t P = static_cast<std::size_t>(x.dim(2)) * x.dim(3);
  Tensor y(x.shape());
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < C; ++c) {
      const double gm = gamma.value()[b * C + c], bt = beta.value()[b * C + c];
      const double* s = x.value().data() + (static_cast<std::size_t>(b) * C + c) * P;
      double* d = y.data() + (static_cast<std::size_t>(b) * C + c) * P;
      for (std::size_t i = 0; i < P; ++i) d[i] = s[i] * gm + bt;
    }
  return make_result(std::move(y), {x, gamma, beta}, [B, C, P](Node& self) {
    Node& px = parent(self, 0);
    Node& pg = parent(self, 1);
    Node& pb = parent(self, 2);
    for (int b = 0; b < B; ++b)
      for (int c = 0; c < C; ++c) {
        const std::size_t off = (static_cast<std::size_t>(b) * C + c) * P;
        const double* g = self.grad.data() + off;
        const double* xv = px.value.data() + off;
        if (px.requires_grad) {
          double* d = px.grad_buffer().data() + off;
          const double gm = pg.value[b * C + c];
          for (std::size_t i = 0; i < P; ++i) d[i] += g[i] * gm;
        }
        if (pg.requires_grad) {
          double acc = 0.0;
          for (std::size_t i = 0; i < P; ++i) acc += g[i] * xv[i];
          pg.grad_buffer()[b * C + c] += acc;
        }
        if (pb.requires_grad) {
          double acc = 0.0;
          for (std::size_t i = 0; i < P; ++i) acc += g[i];
          pb.grad_buffer()[b * C + c] += acc;
        }
      }
  });
}

Var linear(const Var& x, const Var& weight, const Var& bias) {
  require_rank(x.value(), 2, "linear");
  require_rank(weight.value(), 2, "linear weight");
  const int B = x.dim(0), I = x.dim(1), O = weight.dim(0);
  require(weight.dim(1) == I, "linear: weight expects " + std::to_string(weight.dim(1)) + " inputs, got " + std::to_string(I));
  require(!bias.defined() || bias.shape() == Shape{O}, "linear: bias shape");
  Tensor y({B, O});
  MapRM(y.data(), B, O).noalias() = CMapRM(x.value().data(), B, I) * CMapRM(weight.value().data(), O, I).transpose();
  if (bias.defined())
    for (int b = 0; b < B; ++b)
      for (int o = 0; o < O; ++o) y[b * O + o] += bias.value()[o];
  return make_result(std::move(y), with_optional({x, weight}, bias), [B, I, O](Node& self) {
    Node& px = parent(self, 0);
    Node& pw = parent(self, 1);
    CMapRM g(self.grad.data(), B, O);
    if (px.requires_grad) MapRM(px.grad_buffer().data(), B, I).noalias() += g * CMapRM(pw.value.data(), O, I);
    if (pw.requires_grad) MapRM(pw.grad_buffer().data(), O, I).noalias() += g.transpose() * CMapRM(px.value.data(), B, I);
    if (self.parents.size() > 2 && parent(self, 2).requires_grad) {
      Tensor& db = parent(self, 2).grad_buffer();
      for (int b = 0; b < B; ++b)
        for (int o = 0; o < O; ++o) db[o] += self.grad[b * O + o];
    }
  });
}

Var conv2d(const Var& x, const Var& weight, const Var& bias, int stride, int pad) {
  require_rank(x.value(), 4, "conv2d");
  require_rank(weight.value(), 4, "conv2d weight");
  const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int O = weight.dim(0), k = weight.dim(2);
  require(weight.dim(1) == C, "conv2d: weight expects " + std::to_string(weight.dim(1)) + " channels, got " + std::to_string(C));
  require(weight.dim(3) == k && stride >= 1 && pad >= 0, "conv2d: bad kernel geometry");
  require(!bias.defined() || bias.shape() == Shape{O}, "conv2d: bias shape");
  const int Ho = (H + 2 * pad - k) / stride + 1, Wo = (W + 2 * pad - k) / stride + 1;
  require(Ho > 0 && Wo > 0, "conv2d: input smaller than kernel");
  const ConvGeometry geo{B, C, H, W, k, stride, pad, Ho, Wo};
  const int K = C * k * k;
  const std::size_t P = static_cast<std::size_t>(Ho) * Wo;
  const std::size_t BP = P * B;

  MatRM col(K, BP);
  im2col(x.value().data(), geo, col.data());
  MatRM ymat(O, BP);
  ymat.noalias() = CMapRM(weight.value().data(), O, K) * col;
  Tensor y({B, O, Ho, Wo});
  channel_major_to_batch(ymat.data(), B, O, P, y.data());
  add_bias(y, bias);

  if (!weight.requires_grad() || !grad_enabled()) col = MatRM();  // only the weight gradient reads it
  return make_result(std::move(y), with_optional({x, weight}, bias), [geo, K, O, B, P, BP, col = std::move(col)](Node& self) {
    Node& px = parent(self, 0);
    Node& pw = parent(self, 1);
    MatRM g(O, BP);
    batch_to_channel_major(self.grad.data(), B, O, P, g.data());
    if (pw.requires_grad) MapRM(pw.grad_buffer().data(), O, K).noalias() += g * col.transpose();
    if (px.requires_grad) {
      MatRM dcol(K, BP);
      dcol.noalias() = CMapRM(pw.value.data(), O, K).transpose() * g;
      col2im(dcol.data(), geo, px.grad_buffer().data());
    }
    if (self.parents.size() > 2) accumulate_bias_grad(parent(self, 2), self.grad);
  });
}

Var conv_transpose2d(const Var& x, const Var& weight, const Var& bias, int stride, int pad, int output_pad) {
  require_rank(x.value(), 4, "conv_transpose2d");
  require_rank(weight.value(), 4, "conv_transpose2d weight");
  const int B = x.dim(0), Cin = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int Cout = weight.dim(1), k = weight.dim(2);
  require(weight.dim(0) == Cin, "conv_transpose2d: channel mismatch");
  require(output_pad >= 0 && output_pad < stride, "conv_transpose2d: output_pad must be < stride");
  require(!bias.defined() || bias.shape() == Shape{Cout}, "conv_transpose2d: bias shape");
  const int Ho = (H - 1) * stride - 2 * pad + k + output_pad;
  const int Wo = (W - 1) * stride - 2 * pad + k + output_pad;
  // The output image is the "source" of a regular convolution whose sampling
  // grid is the H x W input.
  const ConvGeometry geo{B, Cout, Ho, Wo, k, stride, pad, H, W};
  const int K = Cout * k * k;
  const std::size_t P = static_cast<std::size_t>(H) * W;
  const std::size_t BP = P * B;

  MatRM xm(Cin, BP);
  batch_to_channel_major(x.value().data(), B, Cin, P, xm.data());
  MatRM col(K, BP);
  col.noalias() = CMapRM(weight.value().data(), Cin, K).transpose() * xm;
  Tensor y({B, Cout, Ho, Wo});
  col2im(col.data(), geo, y.data());
  add_bias(y, bias);

  return make_result(std::move(y), with_optional({x, weight}, bias), [geo, K, Cin, B, P, BP](Node& self) {
    Node& px = parent(self, 0);
    Node& pw = parent(self, 1);
    MatRM gcol(K, BP);
    im2col(self.grad.data(), geo, gcol.data());
    if (px.requires_grad) {
      MatRM dx(Cin, BP);
      dx.noalias() = CMapRM(pw.value.data(), Cin, K) * gcol;
      add_channel_major_to_batch(dx.data(), B, Cin, P, px.grad_buffer().data());
    }
    if (pw.requires_grad) {
      MatRM xm(Cin, BP);
      batch_to_channel_major(px.value.data(), B, Cin, P, xm.data());
      MapRM(pw.grad_buffer().data(), Cin, K).noalias() += xm * gcol.transpose();
    }
    if (self.parents.size() > 2) accumulate_bias_grad(parent(self, 2), self.grad);
  });
}

namespace {

// Normalizes x over groups; group g covers channel c of all batch entries
// (batch norm) or a single (b, c) plane (instance norm). Returns x_hat and
// per-group inverse std; `mean_out`/`var_out` receive biased statistics.
struct NormResult {
  Tensor xhat;
  std::vector<double> invstd;
};

}  // namespace

Var batch_norm(const Var& x, RunningStats& stats, bool training, double momentum, double eps) {
  require_rank(x.value(), 4, "batch_norm");
  const int B = x.dim(0), C = x.dim(1);
  const std::size_t P = static_cast<std::size_t>(x.dim(2)) * x.dim(3);
  require(stats.mean.size() == static_cast<std::size_t>(C) && stats.var.size() == static_cast<std::size_t>(C),
          "batch_norm: running statistics hold " + std::to_string(stats.mean.size()) + " channels, input has " + std::to_string(C));
  const double N = static_cast<double>(B) * static_cast<double>(P);
  Tensor y(x.shape());
  std::vector<double> invstd(C);
  const Tensor& xv = x.value();
  for (int c = 0; c < C; ++c) {
    double mu, var;
    if (training) {
      double s = 0.0;
      for (int b = 0; b < B; ++b) {
        const double* p = xv.data() + (static_cast<std::size_t>(b) * C + c) * P;
        for (std::size_t i = 0; i < P; ++i) s += p[i];
      }
      mu = s / N;
      double q = 0.0;
      for (int b = 0; b < B; ++b) {
        const double* p = xv.data() + (static_cast<std::size_t>(b) * C + c) * P;
        for (std::size_t i = 0; i < P; ++i) q += (p[i] - mu) * (p[i] - mu);
      }
      var = q / N;
      const double unbiased = N > 1 ? q / (N - 1) : var;
      stats.mean[c] = (1.0 - momentum) * stats.mean[c] + momentum * mu;
      stats.var[c] = (1.0 - momentum) * stats.var[c] + momentum * unbiased;
    } else {
      mu = stats.mean[c];
      var = stats.var[c];
    }
    invstd[c] = 1.0 / std::sqrt(var + eps);
    for (int b = 0; b < B; ++b) {
      const std::size_t off = (static_cast<std::size_t>(b) * C + c) * P;
      for (std::size_t i = 0; i < P; ++i) y[off + i] = (xv[off + i] - mu) * invstd[c];
    }
  }
  return make_result(std::move(y), {x}, [invstd, training, B, C, P, N](Node& self) {
    Node& px = parent(self, 0);
    if (!px.requires_grad) return;
    Tensor& dx = px.grad_buffer();
    for (int c = 0; c < C; ++c) {
      if (!training) {
        for (int b = 0; b < B; ++b) {
          const std::size_t off = (static_cast<std::size_t>(b) * C + c) * P;
          for (std::size_t i = 0; i < P; ++i) dx[off + i] += self.grad[off + i] * invstd[c];
        }
        continue;
      }
      double sg = 0.0, sgx = 0.0;
      for (int b = 0; b < B; ++b) {
        const std::size_t off = (static_cast<std::size_t>(b) * C + c) * P;
        for (std::size_t i = 0; i < P; ++i) {
          sg += self.grad[off + i];
          sgx += self.grad[off + i] * self.value[off + i];
        }
      }
      for (int b = 0; b < B; ++b) {
        const std::size_t off = (static_cast<std::size_t>(b) * C + c) * P;
        for (std::size_t i = 0; i < P; ++i)
          dx[off + i] += invstd[c] / N * (N * self.grad[off + i] - sg - self.value[off + i] * sgx);
      }
    }
  });
}

Var instance_norm(const Var& x, double eps) {
  require_rank(x.value(), 4, "instance_norm");
  const int B = x.dim(0), C = x.dim(1);
  const std::size_t P = static_cast<std::size_t>(x.dim(2)) * x.dim(3);
  const double N = static_cast<double>(P);
  Tensor y(x.shape());
  std::vector<double> invstd(static_cast<std::size_t>(B) * C);
  for (std::size_t g = 0; g < invstd.size(); ++g) {
    const double* p = x.value().data() + g * P;
    double s = 0.0;
    for (std::size_t i = 0; i < P; ++i) s += p[i];
    const double mu = s / N;
    double q = 0.0;
    for (std::size_t i = 0; i < P; ++i) q += (p[i] - mu) * (p[i] - mu);
    invstd[g] = 1.0 / std::sqrt(q / N + eps);
    for (std::size_t i = 0; i < P; ++i) y[g * P + i] = (p[i] - mu) * invstd[g];
  }
  return make_result(std::move(y), {x}, [invstd, P, N](Node& self) {
    Node& px = parent(self, 0);
    if (!px.requires_grad) return;
    Tensor& dx = px.grad_buffer();
    for (std::size_t g = 0; g < invstd.size(); ++g) {
      const double* gr = self.grad.data() + g * P;
      const double* yh = self.value.data() + g * P;
      double sg = 0.0, sgx = 0.0;
      for (std::size_t i = 0; i < P; ++i) {
        sg += gr[i];
        sgx += gr[i] * yh[i];
      }
      for (std::size_t i = 0; i < P; ++i) dx[g * P + i] += invstd[g] / N * (N * gr[i] - sg - yh[i] * sgx);
    }
  });
}

Var upsample_nearest(const Var& x, int f) {
  require_rank(x.value(), 4, "upsample_nearest");
  const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int Ho = H * f, Wo = W * f;
  Tensor y({B, C, Ho, Wo});
  for (int g = 0; g < B * C; ++g) {
    const double* s = x.value().data() + static_cast<std::size_t>(g) * H * W;
    double* d = y.data() + static_cast<std::size_t>(g) * Ho * Wo;
    for (int i = 0; i < Ho; ++i)
      for (int j = 0; j < Wo; ++j) d[i * Wo + j] = s[(i / f) * W + j / f];
  }
  return make_result(std::move(y), {x}, [B, C, H, W, f](Node& self) {
    Node& px = parent(self, 0);
    if (!px.requires_grad) return;
    Tensor& dx = px.grad_buffer();
    const int Ho = H * f, Wo = W * f;
    for (int g = 0; g < B * C; ++g) {
      const double* s = self.grad.data() + static_cast<std::size_t>(g) * Ho * Wo;
      double* d = dx.data() + static_cast<std::size_t>(g) * H * W;
      for (int i = 0; i < Ho; ++i)
        for (int j = 0; j < Wo; ++j) d[(i / f) * W + j / f] += s[i * Wo + j];
    }
  });
}

Var avg_pool(const Var& x, int f) {
  require_rank(x.value(), 4, "avg_pool");
  const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  require(f >= 1 && H % f == 0 && W % f == 0, "avg_pool: size not divisible by factor");
  Tensor y = avg_pool(x.value(), f);
  return make_result(std::move(y), {x}, [B, C, H, W, f](Node& self) {
    Node& px = parent(self, 0);
    if (!px.requires_grad) return;
    Tensor& dx = px.grad_buffer();
    const int Ho = H / f, Wo = W / f;
    const double inv = 1.0 / (f * f);
    for (int g = 0; g < B * C; ++g) {
      const double* s = self.grad.data() + static_cast<std::size_t>(g) * Ho * Wo;
      double* d = dx.data() + static_cast<std::size_t>(g) * H * W;
      for (int i = 0; i < H; ++i)
        for (int j = 0; j < W; ++j) d[i * W + j] += s[(i / f) * Wo + j / f] * inv;
    }
  });
}

Var global_avg_pool(const Var& x) {
  require_rank(x.value(), 4, "global_avg_pool");
  const int B = x.dim(0), C = x.dim(1);
  const std::size_t P = static_cast<std::size_t>(x.dim(2)) * x.dim(3);
  Tensor y({B, C});
  for (int g = 0; g < B * C; ++g) {
    const double* s = x.value().data() + g * P;
    double acc = 0.0;
    for (std::size_t i = 0; i < P; ++i) acc += s[i];
    y[g] = acc / static_cast<double>(P);
  }
  return make_result(std::move(y), {x}, [B, C, P](Node& self) {
    Node& px = parent(self, 0);
    if (!px.requires_grad) return;
    Tensor& dx = px.grad_buffer();
    for (int g = 0; g < B * C; ++g) {
      const double v = self.grad[g] / static_cast<double>(P);
      for (std::size_t i = 0; i < P; ++i) dx[g * P + i] += v;
    }
  });
}

Var l2_normalize_rows(const Var& x, double eps) {
  require_rank(x.value(), 2, "l2_normalize_rows");
  const int B = x.dim(0), D = x.dim(1);
  Tensor y(x.shape());
  std::vector<double> norms(B);
  for (int b = 0; b < B; ++b) {
    double s = 0.0;
    for (int d = 0; d < D; ++d) s += x.value()[b * D + d] * x.value()[b * D + d];
    norms[b] = std::max(std::sqrt(s), eps);
    for (int d = 0; d < D; ++d) y[b * D + d] = x.value()[b * D + d] / norms[b];
  }
  return make_result(std::move(y), {x}, [norms, B, D](Node& self) {
    Node& px = parent(self, 0);
    if (!px.requires_grad) return;
    Tensor& dx = px.grad_buffer();
    for (int b = 0; b < B; ++b) {
      double dot = 0.0;
      for (int d = 0; d < D; ++d) dot += self.grad[b * D + d] * self.value[b * D + d];
      for (int d = 0; d < D; ++d) dx[b * D + d] += (self.grad[b * D + d] - self.value[b * D + d] * dot) / norms[b];
    }
  });
}

Var cosine_similarity_rows(const Var& a, const Var& b, double eps) {
  require_same_shape(a, b, "cosine_similarity_rows");
  require_rank(a.value(), 2, "cosine_similarity_rows");
  const int B = a.dim(0);
  Var prod = mul(l2_normalize_rows(a, eps), l2_normalize_rows(b, eps));
  // Row sums through a ones-vector matmul keeps the op differentiable.
  Var ones = Var::constant(Tensor::full({1, a.dim(1)}, 1.0));
  return reshape(linear(prod, ones, Var()), {B});
}

Var softmax_cross_entropy(const Var& logits, std::span<const int> labels) {
  require_rank(logits.value(), 2, "softmax_cross_entropy");
  const int B = logits.dim(0), C = logits.dim(1);
  require(static_cast<int>(labels.size()) == B, "softmax_cross_entropy: one label per row required");
  Tensor probs({B, C});
  double loss = 0.0;
  std::vector<int> y(labels.begin(), labels.end());
  for (int b = 0; b < B; ++b) {
    require(y[b] >= 0 && y[b] < C, "softmax_cross_entropy: label out of range");
    const double* z = logits.value().data() + static_cast<std::size_t>(b) * C;
    const double zmax = *std::max_element(z, z + C);
    double denom = 0.0;
    for (int c = 0; c < C; ++c) denom += std::exp(z[c] - zmax);
    for (int c = 0; c < C; ++c) probs(b, c) = std::exp(z[c] - zmax) / denom;
    loss += std::log(denom) + zmax - z[y[b]];
  }
  return make_result(Tensor::scalar(loss / B), {logits}, [probs, y, B, C](Node& self) {
    Node& p = parent(self, 0);
    if (!p.requires_grad) return;
    Tensor& g = p.grad_buffer();
    const double s = self.grad[0] / B;
    for (int b = 0; b < B; ++b)
      for (int c = 0; c < C; ++c) g(b, c) += s * (probs(b, c) - (c == y[b] ? 1.0 : 0.0));
  });
}

// --- region styles -----------------------------------------------------------

Var region_average_pool(const Var& features, const Tensor& seg) {
  require_rank(features.value(), 4, "region_average_pool");
  require_rank(seg, 4, "region_average_pool segmentation");
  const int B = features.dim(0), D = features.dim(1), N = seg.dim(1);
  require(seg.dim(0) == B && seg.dim(2) == features.dim(2) && seg.dim(3) == features.dim(3),
          "region_average_pool: features " + to_string(features.shape()) + " and segmentation " + to_string(seg.shape()) +
              " are not spatially aligned");
  const std::size_t P = static_cast<std::size_t>(seg.dim(2)) * seg.dim(3);
  // Nonzero mask entries per (b, n); a one-hot map touches each pixel once.
  struct Entry {
    std::size_t pixel;
    double weight;
  };
  std::vector<std::vector<Entry>> support(static_cast<std::size_t>(B) * N);
  std::vector<double> counts(static_cast<std::size_t>(B) * N);
  Tensor y({B, N, D});
  for (int b = 0; b < B; ++b)
    for (int n = 0; n < N; ++n) {
      const std::size_t bn = static_cast<std::size_t>(b) * N + n;
      const double* m = seg.data() + bn * P;
      double cnt = 0.0;
      for (std::size_t i = 0; i < P; ++i)
        if (m[i] != 0.0) {
          support[bn].push_back({i, m[i]});
          cnt += m[i];
        }
      counts[bn] = std::max(cnt, 1.0);
      if (cnt == 0.0) continue;
      for (int d = 0; d < D; ++d) {
        const double* f = features.value().data() + (static_cast<std::size_t>(b) * D + d) * P;
        // Two passes so that the mean of k identical values is exactly that value.
        double sum = 0.0;
        for (const Entry& e : support[bn]) sum += f[e.pixel] * e.weight;
        const double m1 = sum / counts[bn];
        double r = 0.0;
        for (const Entry& e : support[bn]) r += (f[e.pixel] - m1) * e.weight;
        y[bn * D + d] = m1 + r / counts[bn];
      }
    }
  return make_result(std::move(y), {features}, [support = std::move(support), counts, B, N, D, P](Node& self) {
    Node& pf = parent(self, 0);
    if (!pf.requires_grad) return;
    Tensor& df = pf.grad_buffer();
    for (int b = 0; b < B; ++b)
      for (int n = 0; n < N; ++n) {
        const std::size_t bn = static_cast<std::size_t>(b) * N + n;
        for (int d = 0; d < D; ++d) {
          const double g = self.grad[bn * D + d] / counts[bn];
          if (g == 0.0) continue;
          double* out = df.data() + (static_cast<std::size_t>(b) * D + d) * P;
          for (const auto& e : support[bn]) out[e.pixel] += g * e.weight;
        }
      }
  });
}

Var broadcast_styles(const Var& styles, const Tensor& seg) {
  require_rank(styles.value(), 3, "broadcast_styles");
  require_rank(seg, 4, "broadcast_styles segmentation");
  const int B = styles.dim(0), N = styles.dim(1), D = styles.dim(2);
  require(seg.dim(0) == B && seg.dim(1) == N,
          "broadcast_styles: style matrix " + to_string(styles.shape()) + " and segmentation " + to_string(seg.shape()) +
              " disagree on batch or class count");
  const int H = seg.dim(2), W = seg.dim(3);
  const std::size_t P = static_cast<std::size_t>(H) * W;
  Tensor y({B, D, H, W});
  for (int b = 0; b < B; ++b)
    for (int n = 0; n < N; ++n) {
      const double* m = seg.data() + (static_cast<std::size_t>(b) * N + n) * P;
      for (int d = 0; d < D; ++d) {
        const double s = styles.value()[(static_cast<std::size_t>(b) * N + n) * D + d];
        double* out = y.data() + (static_cast<std::size_t>(b) * D + d) * P;
        for (std::size_t i = 0; i < P; ++i)
          if (m[i] != 0.0) out[i] += s * m[i];
      }
    }
  return make_result(std::move(y), {styles}, [seg, B, N, D, P](Node& self) {
    Node& ps = parent(self, 0);
    if (!ps.requires_grad) return;
    Tensor& ds = ps.grad_buffer();
    for (int b = 0; b < B; ++b)
      for (int n = 0; n < N; ++n) {
        const double* m = seg.data() + (static_cast<std::size_t>(b) * N + n) * P;
        for (int d = 0; d < D; ++d) {
          const double* g = self.grad.data() + (static_cast<std::size_t>(b) * D + d) * P;
          double acc = 0.0;
          for (std::size_t i = 0; i < P; ++i)
            if (m[i] != 0.0) acc += g[i] * m[i];
          ds[(static_cast<std::size_t>(b) * N + n) * D + d] += acc;
        }
      }
  });
}

Var style_conv2d(const Var& styles, const Tensor& seg, const Var& weight, const Var& bias, int pad) {
  require_rank(styles.value(), 3, "style_conv2d");
  require_rank(seg, 4, "style_conv2d segmentation");
  require_rank(weight.value(), 4, "style_conv2d weight");
  const int B = styles.dim(0), N = styles.dim(1), D = styles.dim(2);
  const int O = weight.dim(0), k = weight.dim(2);
  require(seg.dim(0) == B && seg.dim(1) == N, "style_conv2d: styles and segmentation disagree on batch or class count");
  require(weight.dim(1) == D, "style_conv2d: weight expects " + std::to_string(weight.dim(1)) + " style channels, got " + std::to_string(D));
  require(!bias.defined() || bias.shape() == Shape{O}, "style_conv2d: bias shape");
  const int H = seg.dim(2), W = seg.dim(3);
  const int Ho = H + 2 * pad - k + 1, Wo = W + 2 * pad - k + 1;
  const int KK = k * k;
  const std::size_t P = static_cast<std::size_t>(Ho) * Wo;

  // wp[(o, q), d] = weight[o, d, q]
  MatRM wp(static_cast<Eigen::Index>(O) * KK, D);
  for (int o = 0; o < O; ++o)
    for (int d = 0; d < D; ++d)
      for (int q = 0; q < KK; ++q) wp(o * KK + q, d) = weight.value()[(static_cast<std::size_t>(o) * D + d) * KK + q];

  std::vector<MatRM> cols(B);
  Tensor y({B, O, Ho, Wo});
  for (int b = 0; b < B; ++b) {
    const ConvGeometry geo{1, N, H, W, k, 1, pad, Ho, Wo};
    cols[b].resize(static_cast<Eigen::Index>(N) * KK, static_cast<Eigen::Index>(P));
    im2col(seg.data() + static_cast<std::size_t>(b) * N * H * W, geo, cols[b].data());
    CMapRM sb(styles.value().data() + static_cast<std::size_t>(b) * N * D, N, D);
    MatRM e = wp * sb.transpose();  // (O*KK) x N
    MatRM weff(O, static_cast<Eigen::Index>(N) * KK);
    for (int o = 0; o < O; ++o)
      for (int n = 0; n < N; ++n)
        for (int q = 0; q < KK; ++q) weff(o, n * KK + q) = e(o * KK + q, n);
    MapRM(y.data() + static_cast<std::size_t>(b) * O * P, O, static_cast<Eigen::Index>(P)).noalias() = weff * cols[b];
  }
  add_bias(y, bias);

  return make_result(std::move(y), with_optional({styles, weight}, bias),
                     [cols = std::move(cols), wp, B, N, D, O, KK, P](Node& self) {
                       Node& ps = parent(self, 0);
                       Node& pw = parent(self, 1);
                       MatRM dwp = MatRM::Zero(wp.rows(), wp.cols());
                       for (int b = 0; b < B; ++b) {
                         CMapRM g(self.grad.data() + static_cast<std::size_t>(b) * O * P, O, static_cast<Eigen::Index>(P));
                         MatRM dweff = g * cols[b].transpose();  // O x (N*KK)
                         MatRM de(static_cast<Eigen::Index>(O) * KK, N);
                         for (int o = 0; o < O; ++o)
                           for (int n = 0; n < N; ++n)
                             for (int q = 0; q < KK; ++q) de(o * KK + q, n) = dweff(o, n * KK + q);
                         if (pw.requires_grad) {
                           CMapRM sb(ps.value.data() + static_cast<std::size_t>(b) * N * D, N, D);
                           dwp.noalias() += de * sb;
                         }
                         if (ps.requires_grad) {
                           MapRM(ps.grad_buffer().data() + static_cast<std::size_t>(b) * N * D, N, D).noalias() += de.transpose() * wp;
                         }
                       }
                       if (pw.requires_grad) {
                         Tensor& dw = pw.grad_buffer();
                         for (int o = 0; o < O; ++o)
                           for (int d = 0; d < D; ++d)
                             for (int q = 0; q < KK; ++q) dw[(static_cast<std::size_t>(o) * D + d) * KK + q] += dwp(o * KK + q, d);
                       }
                       if (self.parents.size() > 2) accumulate_bias_grad(parent(self, 2), self.grad);
                     });
}

// --- resampling ------------------------------------------------------------

Var bilinear_resample(const Var& image, const Tensor& grid) {
  require_rank(image.value(), 4, "bilinear_resample");
  require_rank(grid, 4, "bilinear_resample grid");
  const int B = image.dim(0), C = image.dim(1), H = image.dim(2), W = image.dim(3);
  require(grid.dim(0) == B && grid.dim(3) == 2, "bilinear_resample: grid must be B x Ho x Wo x 2");
  const int Ho = grid.dim(1), Wo = grid.dim(2);
  struct Tap {
    int index;
    double weight;
  };
  // Four taps per output pixel; invalid taps carry index -1.
  std::vector<Tap> taps(static_cast<std::size_t>(B) * Ho * Wo * 4);
  for (int b = 0; b < B; ++b)
    for (int i = 0; i < Ho; ++i)
      for (int j = 0; j < Wo; ++j) {
        const std::size_t g = (static_cast<std::size_t>(b) * Ho + i) * Wo + j;
        const double x = grid[g * 2], y = grid[g * 2 + 1];
        const double fx = std::floor(x), fy = std::floor(y);
        const int x0 = static_cast<int>(fx), y0 = static_cast<int>(fy);
        const double ax = x - fx, ay = y - fy;
        const int xs[4] = {x0, x0 + 1, x0, x0 + 1};
        const int ys[4] = {y0, y0, y0 + 1, y0 + 1};
        const double ws[4] = {(1 - ax) * (1 - ay), ax * (1 - ay), (1 - ax) * ay, ax * ay};
        for (int t = 0; t < 4; ++t) {
          const bool ok = xs[t] >= 0 && xs[t] < W && ys[t] >= 0 && ys[t] < H && ws[t] != 0.0;
          taps[g * 4 + t] = ok ? Tap{ys[t] * W + xs[t], ws[t]} : Tap{-1, 0.0};
        }
      }
  Tensor y({B, C, Ho, Wo});
  const std::size_t Pin = static_cast<std::size_t>(H) * W, Pout = static_cast<std::size_t>(Ho) * Wo;
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < C; ++c) {
      const double* src = image.value().data() + (static_cast<std::size_t>(b) * C + c) * Pin;
      double* dst = y.data() + (static_cast<std::size_t>(b) * C + c) * Pout;
      for (std::size_t p = 0; p < Pout; ++p) {
        double acc = 0.0;
        for (int t = 0; t < 4; ++t) {
          const Tap& tp = taps[(b * Pout + p) * 4 + t];
          if (tp.index >= 0) acc += tp.weight * src[tp.index];
        }
        dst[p] = acc;
      }
    }
  return make_result(std::move(y), {image}, [taps = std::move(taps), B, C, Pin, Pout](Node& self) {
    Node& pi = parent(self, 0);
    if (!pi.requires_grad) return;
    Tensor& d = pi.grad_buffer();
    for (int b = 0; b < B; ++b)
      for (int c = 0; c < C; ++c) {
        const double* g = self.grad.data() + (static_cast<std::size_t>(b) * C + c) * Pout;
        double* dst = d.data() + (static_cast<std::size_t>(b) * C + c) * Pin;
        for (std::size_t p = 0; p < Pout; ++p)
          for (int t = 0; t < 4; ++t) {
            const Tap& tp = taps[(b * Pout + p) * 4 + t];
            if (tp.index >= 0) dst[tp.index] += tp.weight * g[p];
          }
      }
  });
}

// --- spectral normalization ------------------------------------------------

namespace {

void normalize(Tensor& t) {
  double s = 0.0;
  for (double v : t.values()) s += v * v;
  const double n = std::max(std::sqrt(s), 1e-12);
  for (double& v : t.values()) v /= n;
}

std::pair<int, int> matrix_view(const Shape& s) {
  const int rows = s.at(0);
  return {rows, static_cast<int>(numel(s) / static_cast<std::size_t>(rows))};
}

}  // namespace

SpectralState init_spectral_state(const Shape& weight_shape, std::uint64_t seed) {
  const auto [rows, cols] = matrix_view(weight_shape);
  std::mt19937_64 rng(seed);
  SpectralState st{Tensor({rows}), Tensor({cols})};
  for (double& v : st.u.values()) v = std::normal_distribution<double>(0.0, 1.0)(rng);
  for (double& v : st.v.values()) v = std::normal_distribution<double>(0.0, 1.0)(rng);
  normalize(st.u);
  normalize(st.v);
  return st;
}

void power_iterate(const Tensor& weight, SpectralState& state, int iterations) {
  const auto [rows, cols] = matrix_view(weight.shape());
  CMapRM w(weight.data(), rows, cols);
  for (int it = 0; it < iterations; ++it) {
    Eigen::Map<Eigen::VectorXd> u(state.u.data(), rows), v(state.v.data(), cols);
    v = w.transpose() * u;
    normalize(state.v);
    u = w * v;
    normalize(state.u);
  }
}

double spectral_sigma(const Tensor& weight, const SpectralState& state) {
  const auto [rows, cols] = matrix_view(weight.shape());
  CMapRM w(weight.data(), rows, cols);
  Eigen::Map<const Eigen::VectorXd> u(state.u.data(), rows), v(state.v.data(), cols);
  return u.dot(w * v);
}

Var spectral_normalize(const Var& weight, const SpectralState& state) {
  const double sigma = spectral_sigma(weight.value(), state);
  require(sigma > 0.0, "spectral_normalize: non-positive sigma estimate");
  const auto [rows, cols] = matrix_view(weight.shape());
  Tensor u = state.u, v = state.v;
  return make_result(weight.value() * (1.0 / sigma), {weight}, [u, v, sigma, rows, cols](Node& self) {
    Node& pw = parent(self, 0);
    if (!pw.requires_grad) return;
    // d/dW of W/sigma with sigma = u^T W v and u, v held fixed.
    double gw = 0.0;
    for (std::size_t i = 0; i < self.grad.size(); ++i) gw += self.grad[i] * pw.value[i];
    Tensor& d = pw.grad_buffer();
    for (int r = 0; r < rows; ++r)
      for (int c = 0; c < cols; ++c) {
        const std::size_t i = static_cast<std::size_t>(r) * cols + c;
        d[i] += self.grad[i] / sigma - gw / (sigma * sigma) * u[r] * v[c];
      }
  });
}

// --- tensor helpers ----------------------------------------------------------

Tensor resize_nearest(const Tensor& x, int h, int w) {
  require_rank(x, 4, "resize_nearest");
  const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  require(h > 0 && w > 0, "resize_nearest: non-positive size");
  Tensor y({B, C, h, w});
  for (int g = 0; g < B * C; ++g) {
    const double* s = x.data() + static_cast<std::size_t>(g) * H * W;
    double* d = y.data() + static_cast<std::size_t>(g) * h * w;
    for (int i = 0; i < h; ++i) {
      const int si = static_cast<int>(static_cast<long long>(i) * H / h);
      for (int j = 0; j < w; ++j) d[i * w + j] = s[si * W + static_cast<int>(static_cast<long long>(j) * W / w)];
    }
  }
  return y;
}

Tensor avg_pool(const Tensor& x, int f) {
  require_rank(x, 4, "avg_pool");
  const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  require(f >= 1 && H % f == 0 && W % f == 0, "avg_pool: size not divisible by factor");
  const int Ho = H / f, Wo = W / f;
  Tensor y({B, C, Ho, Wo});
  const double inv = 1.0 / (f * f);
  for (int g = 0; g < B * C; ++g) {
    const double* s = x.data() + static_cast<std::size_t>(g) * H * W;
    double* d = y.data() + static_cast<std::size_t>(g) * Ho * Wo;
    for (int i = 0; i < H; ++i)
      for (int j = 0; j < W; ++j) d[(i / f) * Wo + j / f] += s[i * W + j] * inv;
  }
  return y;
}

}  // namespace facectl::ops
