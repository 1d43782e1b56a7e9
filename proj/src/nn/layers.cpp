#include "b2p/nn/layers.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>

#include "b2p/error.hpp"

namespace b2p::nn {

using MatR = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapR = Eigen::Map<MatR>;
using CMapR = Eigen::Map<const MatR>;
using StrideMap = Eigen::Map<MatR, 0, Eigen::OuterStride<>>;
using CStrideMap = Eigen::Map<const MatR, 0, Eigen::OuterStride<>>;

const char* role_name(ParamRole r) {
  switch (r) {
    case ParamRole::kWeight: return "weight";
    case ParamRole::kBias: return "bias";
    case ParamRole::kNorm: return "norm";
    case ParamRole::kEmbedding: return "embedding";
    case ParamRole::kLayerScale: return "layer_scale";
    case ParamRole::kBuffer: return "buffer";
  }
  return "weight";
}

void init_normal(Tensor& t, float stddev, Rng& rng) {
  std::normal_distribution<float> dist(0.0f, stddev);
  for (auto& v : t.vec()) v = dist(rng);
}

void init_kaiming(Tensor& t, int fan_in, Rng& rng) {
  init_normal(t, std::sqrt(2.0f / static_cast<float>(std::max(1, fan_in))), rng);
}

namespace {

void require_rank(const Tensor& t, int rank, const char* who) {
  if (t.rank() != rank)
    throw ValidationError(std::string(who) + ": expected rank " + std::to_string(rank) +
                          " tensor, got " + t.shape_str());
}

void im2col(const float* x, int c, int h, int w, int k, int s, int p, int oh, int ow,
            float* col) {
  for (int ci = 0; ci < c; ++ci) {
    const float* plane = x + static_cast<std::size_t>(ci) * h * w;
    for (int ki = 0; ki < k; ++ki) {
      for (int kj = 0; kj < k; ++kj) {
        float* row = col + (static_cast<std::size_t>(ci) * k * k + ki * k + kj) * oh * ow;
        for (int y = 0; y < oh; ++y) {
          const int iy = y * s - p + ki;
          float* out = row + static_cast<std::size_t>(y) * ow;
          if (iy < 0 || iy >= h) {
            std::fill(out, out + ow, 0.0f);
            continue;
          }
          const float* in = plane + static_cast<std::size_t>(iy) * w;
          for (int xo = 0; xo < ow; ++xo) {
            const int ix = xo * s - p + kj;
            out[xo] = (ix >= 0 && ix < w) ? in[ix] : 0.0f;
          }
        }
      }
    }
  }
}

void col2im(const float* col, int c, int h, int w, int k, int s, int p, int oh, int ow,
            float* x) {
  for (int ci = 0; ci < c; ++ci) {
    float* plane = x + static_cast<std::size_t>(ci) * h * w;
    for (int ki = 0; ki < k; ++ki) {
      for (int kj = 0; kj < k; ++kj) {
        const float* row = col + (static_cast<std::size_t>(ci) * k * k + ki * k + kj) * oh * ow;
        for (int y = 0; y < oh; ++y) {
          const int iy = y * s - p + ki;
          if (iy < 0 || iy >= h) continue;
          const float* in = row + static_cast<std::size_t>(y) * ow;
          float* out = plane + static_cast<std::size_t>(iy) * w;
          for (int xo = 0; xo < ow; ++xo) {
            const int ix = xo * s - p + kj;
            if (ix >= 0 && ix < w) out[ix] += in[xo];
          }
        }
      }
    }
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// Conv2d

Conv2d::Conv2d(std::string name, int in_ch_, int out_ch_, int kernel_, int stride_, int pad_,
               bool bias_, Rng& rng)
    : weight(name + ".weight", {out_ch_, in_ch_, kernel_, kernel_}, ParamRole::kWeight),
      in_ch(in_ch_), out_ch(out_ch_), kernel(kernel_), stride(stride_), pad(pad_),
      has_bias(bias_) {
  init_kaiming(weight.value, in_ch * kernel * kernel, rng);
  if (has_bias) bias = Parameter(name + ".bias", {out_ch}, ParamRole::kBias);
}

void Conv2d::collect(ParamRefs& out) {
  out.push_back(&weight);
  if (has_bias) out.push_back(&bias);
}

Tensor Conv2d::forward(const Tensor& x, bool train) {
  require_rank(x, 4, "conv2d");
  if (x.dim(1) != in_ch)
    throw ValidationError(weight.name + ": expected " + std::to_string(in_ch) +
                          " input channels, got " + x.shape_str());
  const int n = x.dim(0), h = x.dim(2), w = x.dim(3);
  const int oh = out_size(h, kernel, stride, pad), ow = out_size(w, kernel, stride, pad);
  if (oh < 1 || ow < 1) throw ValidationError(weight.name + ": input too small");
  const int kk = in_ch * kernel * kernel;
  const int pixels = oh * ow;
  Tensor y({n, out_ch, oh, ow});
  const bool pointwise = kernel == 1 && stride == 1 && pad == 0;
  FloatBuffer col(pointwise ? 0 : static_cast<std::size_t>(kk) * pixels);
  CMapR wm(weight.value.data(), out_ch, kk);
  for (int b = 0; b < n; ++b) {
    const float* xb = x.data() + static_cast<std::size_t>(b) * in_ch * h * w;
    const float* colp = xb;
    if (!pointwise) {
      im2col(xb, in_ch, h, w, kernel, stride, pad, oh, ow, col.data());
      colp = col.data();
    }
    MapR yb(y.data() + static_cast<std::size_t>(b) * out_ch * pixels, out_ch, pixels);
    yb.noalias() = wm * CMapR(colp, kk, pixels);
    if (has_bias)
      for (int c = 0; c < out_ch; ++c) yb.row(c).array() += bias.value[static_cast<std::size_t>(c)];
  }
  if (train) input_ = x;
  return y;
}

Tensor Conv2d::backward(const Tensor& dy, bool need_input_grad) {
  if (input_.empty()) throw ValidationError(weight.name + ": backward without training forward");
  const int n = input_.dim(0), h = input_.dim(2), w = input_.dim(3);
  const int oh = dy.dim(2), ow = dy.dim(3);
  const int kk = in_ch * kernel * kernel;
  const int pixels = oh * ow;
  const bool pointwise = kernel == 1 && stride == 1 && pad == 0;
  const bool want_w = weight.needs_grad();
  const bool want_b = has_bias && bias.needs_grad();
  weight.ensure_grad();
  if (has_bias) bias.ensure_grad();
  Tensor dx;
  if (need_input_grad) dx = Tensor(input_.shape());
  FloatBuffer col((!pointwise && (want_w || need_input_grad))
                             ? static_cast<std::size_t>(kk) * pixels
                             : 0);
  CMapR wm(weight.value.data(), out_ch, kk);
  for (int b = 0; b < n; ++b) {
    CMapR dyb(dy.data() + static_cast<std::size_t>(b) * out_ch * pixels, out_ch, pixels);
    if (want_b)
      for (int c = 0; c < out_ch; ++c) bias.grad[static_cast<std::size_t>(c)] += dyb.row(c).sum();
    const float* xb = input_.data() + static_cast<std::size_t>(b) * in_ch * h * w;
    if (want_w) {
      const float* colp = xb;
      if (!pointwise) {
        im2col(xb, in_ch, h, w, kernel, stride, pad, oh, ow, col.data());
        colp = col.data();
      }
      MapR(weight.grad.data(), out_ch, kk).noalias() += dyb * CMapR(colp, kk, pixels).transpose();
    }
    if (need_input_grad) {
      float* dxb = dx.data() + static_cast<std::size_t>(b) * in_ch * h * w;
      if (pointwise) {
        MapR(dxb, kk, pixels).noalias() = wm.transpose() * dyb;
      } else {
        MapR(col.data(), kk, pixels).noalias() = wm.transpose() * dyb;
        col2im(col.data(), in_ch, h, w, kernel, stride, pad, oh, ow, dxb);
      }
    }
  }
  return dx;
}

// ---------------------------------------------------------------------------
// Norm2d

Norm2d::Norm2d(std::string name, int channels_, NormKind kind_, int groups_)
    : gamma(name + ".weight", {channels_}, ParamRole::kNorm),
      beta(name + ".bias", {channels_}, ParamRole::kNorm),
      running_mean(name + ".running_mean", {channels_}, ParamRole::kBuffer),
      running_var(name + ".running_var", {channels_}, ParamRole::kBuffer),
      kind(kind_), channels(channels_) {
  gamma.value.fill(1.0f);
  running_var.value.fill(1.0f);
  running_mean.trainable = running_var.trainable = false;
  if (kind == NormKind::kGroup) {
    groups = std::min(groups_, channels);
    while (channels % groups) --groups;
  }
}

void Norm2d::collect(ParamRefs& out) {
  out.push_back(&gamma);
  out.push_back(&beta);
  if (kind == NormKind::kBatch) {
    out.push_back(&running_mean);
    out.push_back(&running_var);
  }
}

Tensor Norm2d::forward(const Tensor& x, bool train) {
  require_rank(x, 4, "norm2d");
  if (x.dim(1) != channels) throw ValidationError(gamma.name + ": channel mismatch");
  const int n = x.dim(0), hw = x.dim(2) * x.dim(3);
  Tensor y(x.shape());
  const float* g = gamma.value.data();
  const float* bt = beta.value.data();
  auto plane = [&](const Tensor& t, int b, int c) {
    return t.data() + (static_cast<std::size_t>(b) * channels + c) * hw;
  };
  Tensor xhat(train ? x.shape() : std::vector<int>{0});
  if (kind == NormKind::kBatch) {
    const bool batch_stats = train;
    used_batch_stats_ = batch_stats;
    if (train) inv_std_.assign(static_cast<std::size_t>(channels), 0.0f);
    for (int c = 0; c < channels; ++c) {
      double mean, var;
      if (batch_stats) {
        double s = 0.0, sq = 0.0;
        for (int b = 0; b < n; ++b) {
          const float* p = plane(x, b, c);
          for (int i = 0; i < hw; ++i) s += p[i];
        }
        const double m = static_cast<double>(n) * hw;
        mean = s / m;
        for (int b = 0; b < n; ++b) {
          const float* p = plane(x, b, c);
          for (int i = 0; i < hw; ++i) sq += (p[i] - mean) * (p[i] - mean);
        }
        var = sq / m;
        const double unbiased = m > 1 ? sq / (m - 1) : var;
        auto& rm = running_mean.value[static_cast<std::size_t>(c)];
        auto& rv = running_var.value[static_cast<std::size_t>(c)];
        rm = static_cast<float>((1.0 - momentum) * rm + momentum * mean);
        rv = static_cast<float>((1.0 - momentum) * rv + momentum * unbiased);
      } else {
        mean = running_mean.value[static_cast<std::size_t>(c)];
        var = running_var.value[static_cast<std::size_t>(c)];
      }
      const auto inv = static_cast<float>(1.0 / std::sqrt(var + eps));
      if (train) inv_std_[static_cast<std::size_t>(c)] = inv;
      const auto mf = static_cast<float>(mean);
      for (int b = 0; b < n; ++b) {
        const float* p = plane(x, b, c);
        float* q = y.data() + (static_cast<std::size_t>(b) * channels + c) * hw;
        float* xh = train ? xhat.data() + (static_cast<std::size_t>(b) * channels + c) * hw : nullptr;
        for (int i = 0; i < hw; ++i) {
          const float v = (p[i] - mf) * inv;
          if (xh) xh[i] = v;
          q[i] = v * g[c] + bt[c];
        }
      }
    }
  } else {
    const int cpg = channels / groups;
    if (train) inv_std_.assign(static_cast<std::size_t>(n) * groups, 0.0f);
    for (int b = 0; b < n; ++b) {
      for (int gi = 0; gi < groups; ++gi) {
        double s = 0.0, sq = 0.0;
        for (int c = gi * cpg; c < (gi + 1) * cpg; ++c) {
          const float* p = plane(x, b, c);
          for (int i = 0; i < hw; ++i) s += p[i];
        }
        const double m = static_cast<double>(cpg) * hw;
        const double mean = s / m;
        for (int c = gi * cpg; c < (gi + 1) * cpg; ++c) {
          const float* p = plane(x, b, c);
          for (int i = 0; i < hw; ++i) sq += (p[i] - mean) * (p[i] - mean);
        }
        const auto inv = static_cast<float>(1.0 / std::sqrt(sq / m + eps));
        if (train) inv_std_[static_cast<std::size_t>(b) * groups + gi] = inv;
        const auto mf = static_cast<float>(mean);
        for (int c = gi * cpg; c < (gi + 1) * cpg; ++c) {
          const float* p = plane(x, b, c);
          float* q = y.data() + (static_cast<std::size_t>(b) * channels + c) * hw;
          float* xh = train ? xhat.data() + (static_cast<std::size_t>(b) * channels + c) * hw : nullptr;
          for (int i = 0; i < hw; ++i) {
            const float v = (p[i] - mf) * inv;
            if (xh) xh[i] = v;
            q[i] = v * g[c] + bt[c];
          }
        }
      }
    }
    used_batch_stats_ = true;
  }
  if (train) xhat_ = std::move(xhat);
  return y;
}

Tensor Norm2d::backward(const Tensor& dy) {
  if (xhat_.empty()) throw ValidationError(gamma.name + ": backward without training forward");
  const int n = dy.dim(0), hw = dy.dim(2) * dy.dim(3);
  gamma.ensure_grad();
  beta.ensure_grad();
  Tensor dx(dy.shape());
  const float* g = gamma.value.data();
  auto off = [&](int b, int c) { return (static_cast<std::size_t>(b) * channels + c) * hw; };
  for (int b = 0; b < n; ++b)
    for (int c = 0; c < channels; ++c) {
      const float* d = dy.data() + off(b, c);
      const float* xh = xhat_.data() + off(b, c);
      double sg = 0.0, sb = 0.0;
      for (int i = 0; i < hw; ++i) {
        sg += static_cast<double>(d[i]) * xh[i];
        sb += d[i];
      }
      if (gamma.needs_grad()) gamma.grad[static_cast<std::size_t>(c)] += static_cast<float>(sg);
      if (beta.needs_grad()) beta.grad[static_cast<std::size_t>(c)] += static_cast<float>(sb);
    }
  // dx = inv_std · (dxhat − mean(dxhat) − xhat·mean(dxhat·xhat)) over each
  // reduction set, with dxhat = dy·γ.
  auto reduce_set = [&](const std::vector<std::pair<int, int>>& members, float inv) {
    double m1 = 0.0, m2 = 0.0;
    for (auto [b, c] : members) {
      const float* d = dy.data() + off(b, c);
      const float* xh = xhat_.data() + off(b, c);
      for (int i = 0; i < hw; ++i) {
        const double dxh = static_cast<double>(d[i]) * g[c];
        m1 += dxh;
        m2 += dxh * xh[i];
      }
    }
    const double count = static_cast<double>(members.size()) * hw;
    m1 /= count;
    m2 /= count;
    for (auto [b, c] : members) {
      const float* d = dy.data() + off(b, c);
      const float* xh = xhat_.data() + off(b, c);
      float* o = dx.data() + off(b, c);
      for (int i = 0; i < hw; ++i)
        o[i] = static_cast<float>(inv * (d[i] * g[c] - m1 - xh[i] * m2));
    }
  };
  if (kind == NormKind::kBatch) {
    for (int c = 0; c < channels; ++c) {
      const float inv = inv_std_[static_cast<std::size_t>(c)];
      if (!used_batch_stats_) {
        for (int b = 0; b < n; ++b)
          for (int i = 0; i < hw; ++i) dx.data()[off(b, c) + i] = dy.data()[off(b, c) + i] * g[c] * inv;
        continue;
      }
      std::vector<std::pair<int, int>> members;
      for (int b = 0; b < n; ++b) members.emplace_back(b, c);
      reduce_set(members, inv);
    }
  } else {
    const int cpg = channels / groups;
    for (int b = 0; b < n; ++b)
      for (int gi = 0; gi < groups; ++gi) {
        std::vector<std::pair<int, int>> members;
        for (int c = gi * cpg; c < (gi + 1) * cpg; ++c) members.emplace_back(b, c);
        reduce_set(members, inv_std_[static_cast<std::size_t>(b) * groups + gi]);
      }
  }
  return dx;
}

// ---------------------------------------------------------------------------
// ReLU

Tensor ReLU::forward(const Tensor& x, bool train) {
  Tensor y(x.shape());
  if (train) mask_.assign(x.numel(), 0);
  for (std::size_t i = 0; i < x.numel(); ++i) {
    const bool on = x[i] > 0.0f;
    y[i] = on ? x[i] : 0.0f;
    if (train) mask_[i] = on;
  }
  return y;
}

Tensor ReLU::backward(const Tensor& dy) {
  if (mask_.size() != dy.numel()) throw ValidationError("relu: backward shape mismatch");
  Tensor dx(dy.shape());
  for (std::size_t i = 0; i < dy.numel(); ++i) dx[i] = mask_[i] ? dy[i] : 0.0f;
  return dx;
}

// ---------------------------------------------------------------------------
// PixelShuffle

Tensor pixel_shuffle(const Tensor& x, int r) {
  require_rank(x, 4, "pixel_shuffle");
  const int n = x.dim(0), cin = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (cin % (r * r)) throw ValidationError("pixel_shuffle: channels not divisible by r^2");
  const int c = cin / (r * r);
  Tensor y({n, c, h * r, w * r});
  for (int b = 0; b < n; ++b)
    for (int ci = 0; ci < c; ++ci)
      for (int i = 0; i < r; ++i)
        for (int j = 0; j < r; ++j) {
          const int src_c = ci * r * r + i * r + j;
          for (int yy = 0; yy < h; ++yy)
            for (int xx = 0; xx < w; ++xx)
              y.at(b, ci, yy * r + i, xx * r + j) = x.at(b, src_c, yy, xx);
        }
  return y;
}

Tensor pixel_unshuffle(const Tensor& y, int r) {
  require_rank(y, 4, "pixel_unshuffle");
  const int n = y.dim(0), c = y.dim(1), h = y.dim(2) / r, w = y.dim(3) / r;
  Tensor x({n, c * r * r, h, w});
  for (int b = 0; b < n; ++b)
    for (int ci = 0; ci < c; ++ci)
      for (int i = 0; i < r; ++i)
        for (int j = 0; j < r; ++j) {
          const int dst_c = ci * r * r + i * r + j;
          for (int yy = 0; yy < h; ++yy)
            for (int xx = 0; xx < w; ++xx)
              x.at(b, dst_c, yy, xx) = y.at(b, ci, yy * r + i, xx * r + j);
        }
  return x;
}

// ---------------------------------------------------------------------------
// Bilinear resize

namespace {

struct AxisTable {
  std::vector<int> i0, i1;
  FloatBuffer l1;
};

AxisTable axis_table(int in, int out) {
  AxisTable t;
  t.i0.resize(static_cast<std::size_t>(out));
  t.i1.resize(static_cast<std::size_t>(out));
  t.l1.resize(static_cast<std::size_t>(out));
  const double scale = static_cast<double>(in) / out;
  for (int o = 0; o < out; ++o) {
    double src = (o + 0.5) * scale - 0.5;
    if (src < 0) src = 0;
    int a = static_cast<int>(src);
    if (a > in - 1) a = in - 1;
    const int b = std::min(a + 1, in - 1);
    t.i0[static_cast<std::size_t>(o)] = a;
    t.i1[static_cast<std::size_t>(o)] = b;
    t.l1[static_cast<std::size_t>(o)] = static_cast<float>(src - a);
  }
  return t;
}

}  // namespace

Tensor resize_bilinear(const Tensor& x, int out_h, int out_w) {
  require_rank(x, 4, "resize");
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (h == out_h && w == out_w) return x;
  const AxisTable ty = axis_table(h, out_h), tx = axis_table(w, out_w);
  Tensor y({n, c, out_h, out_w});
  for (int p = 0; p < n * c; ++p) {
    const float* src = x.data() + static_cast<std::size_t>(p) * h * w;
    float* dst = y.data() + static_cast<std::size_t>(p) * out_h * out_w;
    for (int oy = 0; oy < out_h; ++oy) {
      const float ly = ty.l1[static_cast<std::size_t>(oy)];
      const float* r0 = src + static_cast<std::size_t>(ty.i0[static_cast<std::size_t>(oy)]) * w;
      const float* r1 = src + static_cast<std::size_t>(ty.i1[static_cast<std::size_t>(oy)]) * w;
      for (int ox = 0; ox < out_w; ++ox) {
        const auto a = static_cast<std::size_t>(tx.i0[static_cast<std::size_t>(ox)]);
        const auto b = static_cast<std::size_t>(tx.i1[static_cast<std::size_t>(ox)]);
        const float lx = tx.l1[static_cast<std::size_t>(ox)];
        const float top = r0[a] + lx * (r0[b] - r0[a]);
        const float bot = r1[a] + lx * (r1[b] - r1[a]);
        dst[static_cast<std::size_t>(oy) * out_w + ox] = top + ly * (bot - top);
      }
    }
  }
  return y;
}

Tensor resize_bilinear_backward(const Tensor& dy, int in_h, int in_w) {
  const int n = dy.dim(0), c = dy.dim(1), out_h = dy.dim(2), out_w = dy.dim(3);
  if (in_h == out_h && in_w == out_w) return dy;
  const AxisTable ty = axis_table(in_h, out_h), tx = axis_table(in_w, out_w);
  Tensor dx({n, c, in_h, in_w});
  for (int p = 0; p < n * c; ++p) {
    const float* g = dy.data() + static_cast<std::size_t>(p) * out_h * out_w;
    float* d = dx.data() + static_cast<std::size_t>(p) * in_h * in_w;
    for (int oy = 0; oy < out_h; ++oy) {
      const float ly = ty.l1[static_cast<std::size_t>(oy)];
      float* r0 = d + static_cast<std::size_t>(ty.i0[static_cast<std::size_t>(oy)]) * in_w;
      float* r1 = d + static_cast<std::size_t>(ty.i1[static_cast<std::size_t>(oy)]) * in_w;
      for (int ox = 0; ox < out_w; ++ox) {
        const auto a = static_cast<std::size_t>(tx.i0[static_cast<std::size_t>(ox)]);
        const auto b = static_cast<std::size_t>(tx.i1[static_cast<std::size_t>(ox)]);
        const float lx = tx.l1[static_cast<std::size_t>(ox)];
        const float v = g[static_cast<std::size_t>(oy) * out_w + ox];
        r0[a] += (1 - ly) * (1 - lx) * v;
        r0[b] += (1 - ly) * lx * v;
        r1[a] += ly * (1 - lx) * v;
        r1[b] += ly * lx * v;
      }
    }
  }
  return dx;
}

Tensor Resize::forward(const Tensor& x, int out_h, int out_w, bool train) {
  if (train) in_shape_ = x.shape();
  return resize_bilinear(x, out_h, out_w);
}

Tensor Resize::backward(const Tensor& dy) {
  if (in_shape_.empty()) throw ValidationError("resize: backward without training forward");
  return resize_bilinear_backward(dy, in_shape_[2], in_shape_[3]);
}

Tensor concat_channels(const Tensor& a, const Tensor& b) {
  require_rank(a, 4, "concat");
  require_rank(b, 4, "concat");
  if (a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2) || a.dim(3) != b.dim(3))
    throw ValidationError("concat: spatial mismatch " + a.shape_str() + " vs " + b.shape_str());
  const int n = a.dim(0), ca = a.dim(1), cb = b.dim(1);
  const std::size_t hw = static_cast<std::size_t>(a.dim(2)) * a.dim(3);
  Tensor y({n, ca + cb, a.dim(2), a.dim(3)});
  for (int i = 0; i < n; ++i) {
    std::copy_n(a.data() + i * ca * hw, ca * hw, y.data() + i * (ca + cb) * hw);
    std::copy_n(b.data() + i * cb * hw, cb * hw, y.data() + (i * (ca + cb) + ca) * hw);
  }
  return y;
}

void split_channels(const Tensor& d, int ca, Tensor& da, Tensor& db) {
  const int n = d.dim(0), c = d.dim(1), cb = c - ca;
  const std::size_t hw = static_cast<std::size_t>(d.dim(2)) * d.dim(3);
  da = Tensor({n, ca, d.dim(2), d.dim(3)});
  db = Tensor({n, cb, d.dim(2), d.dim(3)});
  for (int i = 0; i < n; ++i) {
    std::copy_n(d.data() + i * c * hw, ca * hw, da.data() + i * ca * hw);
    std::copy_n(d.data() + (i * c + ca) * hw, cb * hw, db.data() + i * cb * hw);
  }
}

// ---------------------------------------------------------------------------
// Token layers

namespace {
int rows_of(const Tensor& x) { return static_cast<int>(x.numel() / static_cast<std::size_t>(x.shape().back())); }
}  // namespace

Linear::Linear(std::string name, int in, int out, bool bias_, Rng& rng, float init_std)
    : weight(name + ".weight", {out, in}, ParamRole::kWeight), in_dim(in), out_dim(out),
      has_bias(bias_) {
  init_normal(weight.value, init_std, rng);
  if (has_bias) bias = Parameter(name + ".bias", {out}, ParamRole::kBias);
}

void Linear::collect(ParamRefs& out) {
  out.push_back(&weight);
  if (has_bias) out.push_back(&bias);
}

Tensor Linear::forward(const Tensor& x, bool train) {
  if (x.shape().back() != in_dim) throw ValidationError(weight.name + ": input width mismatch");
  const int rows = rows_of(x);
  std::vector<int> shape = x.shape();
  shape.back() = out_dim;
  Tensor y(shape);
  MapR ym(y.data(), rows, out_dim);
  ym.noalias() = CMapR(x.data(), rows, in_dim) * CMapR(weight.value.data(), out_dim, in_dim).transpose();
  if (has_bias) ym.rowwise() += Eigen::Map<const Eigen::RowVectorXf>(bias.value.data(), out_dim);
  if (train) input_ = x;
  return y;
}

Tensor Linear::backward(const Tensor& dy) {
  if (input_.empty()) throw ValidationError(weight.name + ": backward without training forward");
  const int rows = rows_of(dy);
  CMapR dym(dy.data(), rows, out_dim);
  if (weight.needs_grad()) {
    weight.ensure_grad();
    MapR(weight.grad.data(), out_dim, in_dim).noalias() +=
        dym.transpose() * CMapR(input_.data(), rows, in_dim);
  }
  if (has_bias && bias.needs_grad()) {
    bias.ensure_grad();
    Eigen::Map<Eigen::RowVectorXf>(bias.grad.data(), out_dim) += dym.colwise().sum();
  }
  Tensor dx(input_.shape());
  MapR(dx.data(), rows, in_dim).noalias() = dym * CMapR(weight.value.data(), out_dim, in_dim);
  return dx;
}

LayerNorm::LayerNorm(std::string name, int dim_, float eps_)
    : gamma(name + ".weight", {dim_}, ParamRole::kNorm),
      beta(name + ".bias", {dim_}, ParamRole::kNorm), dim(dim_), eps(eps_) {
  gamma.value.fill(1.0f);
}

void LayerNorm::collect(ParamRefs& out) {
  out.push_back(&gamma);
  out.push_back(&beta);
}

Tensor LayerNorm::forward(const Tensor& x, bool train) {
  if (x.shape().back() != dim) throw ValidationError(gamma.name + ": width mismatch");
  const int rows = rows_of(x);
  Tensor y(x.shape());
  if (train) {
    xhat_ = Tensor(x.shape());
    inv_std_.assign(static_cast<std::size_t>(rows), 0.0f);
  }
  for (int r = 0; r < rows; ++r) {
    const float* p = x.data() + static_cast<std::size_t>(r) * dim;
    double s = 0.0, sq = 0.0;
    for (int i = 0; i < dim; ++i) s += p[i];
    const double mean = s / dim;
    for (int i = 0; i < dim; ++i) sq += (p[i] - mean) * (p[i] - mean);
    const auto inv = static_cast<float>(1.0 / std::sqrt(sq / dim + eps));
    const auto mf = static_cast<float>(mean);
    float* q = y.data() + static_cast<std::size_t>(r) * dim;
    for (int i = 0; i < dim; ++i) {
      const float v = (p[i] - mf) * inv;
      if (train) xhat_[static_cast<std::size_t>(r) * dim + i] = v;
      q[i] = v * gamma.value[static_cast<std::size_t>(i)] + beta.value[static_cast<std::size_t>(i)];
    }
    if (train) inv_std_[static_cast<std::size_t>(r)] = inv;
  }
  return y;
}

Tensor LayerNorm::backward(const Tensor& dy) {
  if (xhat_.empty()) throw ValidationError(gamma.name + ": backward without training forward");
  const int rows = rows_of(dy);
  gamma.ensure_grad();
  beta.ensure_grad();
  Tensor dx(dy.shape());
  for (int r = 0; r < rows; ++r) {
    const float* d = dy.data() + static_cast<std::size_t>(r) * dim;
    const float* xh = xhat_.data() + static_cast<std::size_t>(r) * dim;
    double m1 = 0.0, m2 = 0.0;
    for (int i = 0; i < dim; ++i) {
      const double dxh = static_cast<double>(d[i]) * gamma.value[static_cast<std::size_t>(i)];
      m1 += dxh;
      m2 += dxh * xh[i];
      if (gamma.needs_grad()) gamma.grad[static_cast<std::size_t>(i)] += d[i] * xh[i];
      if (beta.needs_grad()) beta.grad[static_cast<std::size_t>(i)] += d[i];
    }
    m1 /= dim;
    m2 /= dim;
    const float inv = inv_std_[static_cast<std::size_t>(r)];
    float* o = dx.data() + static_cast<std::size_t>(r) * dim;
    for (int i = 0; i < dim; ++i)
      o[i] = static_cast<float>(inv * (d[i] * gamma.value[static_cast<std::size_t>(i)] - m1 - xh[i] * m2));
  }
  return dx;
}

Tensor Gelu::forward(const Tensor& x, bool train) {
  Tensor y(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i)
    y[i] = 0.5f * x[i] * (1.0f + std::erf(x[i] * static_cast<float>(M_SQRT1_2)));
  if (train) input_ = x;
  return y;
}

Tensor Gelu::backward(const Tensor& dy) {
  Tensor dx(dy.shape());
  const float k = static_cast<float>(0.5 * M_2_SQRTPI * M_SQRT1_2);  // 1/sqrt(2π)
  for (std::size_t i = 0; i < dy.numel(); ++i) {
    const float x = input_[i];
    const float cdf = 0.5f * (1.0f + std::erf(x * static_cast<float>(M_SQRT1_2)));
    dx[i] = dy[i] * (cdf + x * k * std::exp(-0.5f * x * x));
  }
  return dx;
}

LayerScale::LayerScale(std::string name, int dim, float init)
    : gamma(std::move(name), {dim}, ParamRole::kLayerScale) {
  gamma.value.fill(init);
}

void LayerScale::collect(ParamRefs& out) { out.push_back(&gamma); }

Tensor LayerScale::forward(const Tensor& x, bool train) {
  const int d = gamma.value.dim(0);
  Tensor y(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) y[i] = x[i] * gamma.value[i % static_cast<std::size_t>(d)];
  if (train) input_ = x;
  return y;
}

Tensor LayerScale::backward(const Tensor& dy) {
  const auto d = static_cast<std::size_t>(gamma.value.dim(0));
  Tensor dx(dy.shape());
  if (gamma.needs_grad()) gamma.ensure_grad();
  for (std::size_t i = 0; i < dy.numel(); ++i) {
    dx[i] = dy[i] * gamma.value[i % d];
    if (gamma.needs_grad()) gamma.grad[i % d] += dy[i] * input_[i];
  }
  return dx;
}

MultiHeadAttention::MultiHeadAttention(const std::string& name, int dim_, int heads_, Rng& rng)
    : query(name + ".query", dim_, dim_, true, rng), key(name + ".key", dim_, dim_, true, rng),
      value(name + ".value", dim_, dim_, true, rng), proj(name + ".proj", dim_, dim_, true, rng),
      dim(dim_), heads(heads_) {
  if (dim % heads) throw ConfigError(name + ": embed dim not divisible by heads");
}

void MultiHeadAttention::collect(ParamRefs& out) {
  query.collect(out);
  key.collect(out);
  value.collect(out);
  proj.collect(out);
}

Tensor MultiHeadAttention::forward(const Tensor& x, bool train) {
  require_rank(x, 3, "attention");
  const int n = x.dim(0), t = x.dim(1), dh = dim / heads;
  Tensor q = query.forward(x, train), k = key.forward(x, train), v = value.forward(x, train);
  Tensor o(x.shape());
  Tensor attn;
  if (train) attn = Tensor({n, heads, t, t});
  const float scale = 1.0f / std::sqrt(static_cast<float>(dh));
  MatR scores(t, t);
  for (int b = 0; b < n; ++b) {
    const std::size_t base = static_cast<std::size_t>(b) * t * dim;
    for (int h = 0; h < heads; ++h) {
      CStrideMap qh(q.data() + base + h * dh, t, dh, Eigen::OuterStride<>(dim));
      CStrideMap kh(k.data() + base + h * dh, t, dh, Eigen::OuterStride<>(dim));
      CStrideMap vh(v.data() + base + h * dh, t, dh, Eigen::OuterStride<>(dim));
      scores.noalias() = (qh * kh.transpose()) * scale;
      for (int r = 0; r < t; ++r) {
        auto row = scores.row(r);
        const float mx = row.maxCoeff();
        row = (row.array() - mx).exp();
        row /= row.sum();
      }
      StrideMap(o.data() + base + h * dh, t, dh, Eigen::OuterStride<>(dim)).noalias() = scores * vh;
      if (train)
        MapR(attn.data() + (static_cast<std::size_t>(b) * heads + h) * t * t, t, t) = scores;
    }
  }
  if (train) {
    q_ = std::move(q);
    k_ = std::move(k);
    v_ = std::move(v);
    attn_ = std::move(attn);
  }
  return proj.forward(o, train);
}

Tensor MultiHeadAttention::backward(const Tensor& dy) {
  if (attn_.empty()) throw ValidationError("attention: backward without training forward");
  const int n = q_.dim(0), t = q_.dim(1), dh = dim / heads;
  const Tensor d_o = proj.backward(dy);
  Tensor dq(q_.shape()), dk(k_.shape()), dv(v_.shape());
  const float scale = 1.0f / std::sqrt(static_cast<float>(dh));
  MatR da(t, t);
  for (int b = 0; b < n; ++b) {
    const std::size_t base = static_cast<std::size_t>(b) * t * dim;
    for (int h = 0; h < heads; ++h) {
      CMapR a(attn_.data() + (static_cast<std::size_t>(b) * heads + h) * t * t, t, t);
      CStrideMap qh(q_.data() + base + h * dh, t, dh, Eigen::OuterStride<>(dim));
      CStrideMap kh(k_.data() + base + h * dh, t, dh, Eigen::OuterStride<>(dim));
      CStrideMap vh(v_.data() + base + h * dh, t, dh, Eigen::OuterStride<>(dim));
      CStrideMap doh(d_o.data() + base + h * dh, t, dh, Eigen::OuterStride<>(dim));
      da.noalias() = doh * vh.transpose();
      StrideMap(dv.data() + base + h * dh, t, dh, Eigen::OuterStride<>(dim)).noalias() =
          a.transpose() * doh;
      // softmax backward: dS = A ⊙ (dA − rowsum(dA ⊙ A))
      Eigen::VectorXf dots = (da.array() * a.array()).rowwise().sum();
      da = (a.array() * (da.array().colwise() - dots.array())).matrix() * scale;
      StrideMap(dq.data() + base + h * dh, t, dh, Eigen::OuterStride<>(dim)).noalias() = da * kh;
      StrideMap(dk.data() + base + h * dh, t, dh, Eigen::OuterStride<>(dim)).noalias() =
          da.transpose() * qh;
    }
  }
  Tensor dx = query.backward(dq);
  add_inplace(dx, key.backward(dk));
  add_inplace(dx, value.backward(dv));
  return dx;
}

}  // namespace b2p::nn
