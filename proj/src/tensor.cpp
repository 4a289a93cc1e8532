// SPDX-License-Identifier: Apache-2.0

#include "hdrflow/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>

#include "op_support.hpp"

namespace hdrflow {

std::string dims_to_string(const Dims& dims) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < dims.size(); ++i) {
    if (i) os << ",";
    os << dims[i];
  }
  os << "]";
  return os.str();
}

using detail::TensorNode;

// ---------------------------------------------------------------------------
// Elementwise ops
// ---------------------------------------------------------------------------

namespace {

// Shared skeleton for unary elementwise ops. `fwd(x)` produces the value,
// `dfdx(x, y)` the local derivative given input x and output y.
template <typename T, typename Fwd, typename Dfdx>
Tensor<T> unary_op(const char* name, const Tensor<T>& a, Fwd fwd, Dfdx dfdx) {
  Tensor<T> out(a.dims());
  const T* x = a.values().data();
  T* y = out.values().data();
  const size_t n = a.values().size();
  for (size_t i = 0; i < n; ++i) y[i] = fwd(x[i]);
  detail::ensure_finite(name, out);
  if (Tape<T>* tp = a.tape()) {
    tp->attach(out.node());
    auto an = a.node();
    auto on = out.node();
    tp->record([an, on, dfdx] {
      an->ensure_grad();
      const size_t m = an->values.size();
      for (size_t i = 0; i < m; ++i)
        an->grad[i] += on->grad[i] * dfdx(an->values[i], on->values[i]);
    });
  }
  return out;
}

}  // namespace

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same_dims("add", a, b);
  Tensor<T> out(a.dims());
  const T* xa = a.values().data();
  const T* xb = b.values().data();
  T* y = out.values().data();
  const size_t n = a.values().size();
  for (size_t i = 0; i < n; ++i) y[i] = xa[i] + xb[i];
  detail::ensure_finite("add", out);
  if (Tape<T>* tp = detail::tape_of<T>({&a, &b})) {
    tp->attach(out.node());
    auto an = a.node();
    auto bn = b.node();
    auto on = out.node();
    const bool ga = a.tape() != nullptr;
    const bool gb = b.tape() != nullptr;
    tp->record([an, bn, on, ga, gb] {
      if (ga) detail::accumulate(an, on->grad.data());
      if (gb) detail::accumulate(bn, on->grad.data());
    });
  }
  return out;
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same_dims("sub", a, b);
  Tensor<T> out(a.dims());
  const T* xa = a.values().data();
  const T* xb = b.values().data();
  T* y = out.values().data();
  const size_t n = a.values().size();
  for (size_t i = 0; i < n; ++i) y[i] = xa[i] - xb[i];
  detail::ensure_finite("sub", out);
  if (Tape<T>* tp = detail::tape_of<T>({&a, &b})) {
    tp->attach(out.node());
    auto an = a.node();
    auto bn = b.node();
    auto on = out.node();
    const bool ga = a.tape() != nullptr;
    const bool gb = b.tape() != nullptr;
    tp->record([an, bn, on, ga, gb] {
      if (ga) detail::accumulate(an, on->grad.data());
      if (gb) {
        bn->ensure_grad();
        const size_t m = bn->values.size();
        for (size_t i = 0; i < m; ++i) bn->grad[i] -= on->grad[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same_dims("mul", a, b);
  Tensor<T> out(a.dims());
  const T* xa = a.values().data();
  const T* xb = b.values().data();
  T* y = out.values().data();
  const size_t n = a.values().size();
  for (size_t i = 0; i < n; ++i) y[i] = xa[i] * xb[i];
  detail::ensure_finite("mul", out);
  if (Tape<T>* tp = detail::tape_of<T>({&a, &b})) {
    tp->attach(out.node());
    auto an = a.node();
    auto bn = b.node();
    auto on = out.node();
    const bool ga = a.tape() != nullptr;
    const bool gb = b.tape() != nullptr;
    tp->record([an, bn, on, ga, gb] {
      const size_t m = on->values.size();
      if (ga) {
        an->ensure_grad();
        for (size_t i = 0; i < m; ++i) an->grad[i] += on->grad[i] * bn->values[i];
      }
      if (gb) {
        bn->ensure_grad();
        for (size_t i = 0; i < m; ++i) bn->grad[i] += on->grad[i] * an->values[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, double k) {
  const T kk = static_cast<T>(k);
  return unary_op<T>(
      "scale", a, [kk](T x) { return x * kk; }, [kk](T, T) { return kk; });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, double k) {
  const T kk = static_cast<T>(k);
  return unary_op<T>(
      "add_scalar", a, [kk](T x) { return x + kk; }, [](T, T) { return T(1); });
}

template <typename T>
Tensor<T> reciprocal(const Tensor<T>& a) {
  return unary_op<T>(
      "reciprocal", a, [](T x) { return T(1) / x; },
      [](T, T y) { return -y * y; });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
  return unary_op<T>(
      "relu", a, [](T x) { return x > T(0) ? x : T(0); },
      [](T x, T) { return x > T(0) ? T(1) : T(0); });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& a) {
  return unary_op<T>(
      "sigmoid", a, [](T x) { return T(1) / (T(1) + std::exp(-x)); },
      [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Tensor<T> abs(const Tensor<T>& a) {
  return unary_op<T>(
      "abs", a, [](T x) { return std::fabs(x); },
      [](T x, T) { return x > T(0) ? T(1) : (x < T(0) ? T(-1) : T(0)); });
}

template <typename T>
Tensor<T> clamp(const Tensor<T>& a, double lo, double hi) {
  if (!(lo <= hi)) throw std::invalid_argument("clamp: lo > hi");
  const T l = static_cast<T>(lo);
  const T h = static_cast<T>(hi);
  return unary_op<T>(
      "clamp", a, [l, h](T x) { return std::min(std::max(x, l), h); },
      [l, h](T x, T) { return (x > l && x < h) ? T(1) : T(0); });
}

template <typename T>
Tensor<T> pow_scalar(const Tensor<T>& a, double p) {
  const T pp = static_cast<T>(p);
  return unary_op<T>(
      "pow_scalar", a, [pp](T x) { return std::pow(x, pp); },
      [pp](T x, T) {
        // Unbounded at 0 for p < 1; the gradient contract covers interior
        // points only.
        if (x <= T(0)) return T(0);
        return pp * std::pow(x, pp - T(1));
      });
}

template <typename T>
Tensor<T> mul_bcast1(const Tensor<T>& a, const Tensor<T>& m) {
  if (a.ndim() != 3 || m.ndim() != 3 || m.dim(0) != 1 || a.dim(1) != m.dim(1) ||
      a.dim(2) != m.dim(2))
    throw std::invalid_argument("mul_bcast1: need [C,H,W] and [1,H,W], got " +
                                dims_to_string(a.dims()) + " and " +
                                dims_to_string(m.dims()));
  const int c = a.dim(0);
  const long long plane = static_cast<long long>(a.dim(1)) * a.dim(2);
  Tensor<T> out(a.dims());
  const T* x = a.values().data();
  const T* w = m.values().data();
  T* y = out.values().data();
  for (int ch = 0; ch < c; ++ch)
    for (long long i = 0; i < plane; ++i)
      y[ch * plane + i] = x[ch * plane + i] * w[i];
  detail::ensure_finite("mul_bcast1", out);
  if (Tape<T>* tp = detail::tape_of<T>({&a, &m})) {
    tp->attach(out.node());
    auto an = a.node();
    auto mn = m.node();
    auto on = out.node();
    const bool ga = a.tape() != nullptr;
    const bool gm = m.tape() != nullptr;
    tp->record([an, mn, on, ga, gm, c, plane] {
      if (ga) {
        an->ensure_grad();
        for (int ch = 0; ch < c; ++ch)
          for (long long i = 0; i < plane; ++i)
            an->grad[ch * plane + i] += on->grad[ch * plane + i] * mn->values[i];
      }
      if (gm) {
        mn->ensure_grad();
        for (int ch = 0; ch < c; ++ch)
          for (long long i = 0; i < plane; ++i)
            mn->grad[i] += on->grad[ch * plane + i] * an->values[ch * plane + i];
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  Tensor<T> out(Dims{1});
  T acc = T(0);
  for (T v : a.values()) acc += v;
  out.values()[0] = acc;
  detail::ensure_finite("sum", out);
  if (Tape<T>* tp = a.tape()) {
    tp->attach(out.node());
    auto an = a.node();
    auto on = out.node();
    tp->record([an, on] {
      an->ensure_grad();
      const T g = on->grad[0];
      for (auto& v : an->grad) v += g;
    });
  }
  return out;
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
  if (a.numel() == 0) throw std::invalid_argument("mean: empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(a.numel()));
}

// ---------------------------------------------------------------------------
// Shape ops
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> concat_channels(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_channels: no inputs");
  const int h = parts[0].ndim() == 3 ? parts[0].dim(1) : -1;
  const int w = parts[0].ndim() == 3 ? parts[0].dim(2) : -1;
  int total_c = 0;
  for (const auto& p : parts) {
    if (p.ndim() != 3 || p.dim(1) != h || p.dim(2) != w)
      throw std::invalid_argument("concat_channels: dims mismatch at " +
                                  dims_to_string(p.dims()));
    total_c += p.dim(0);
  }
  Tensor<T> out(Dims{total_c, h, w});
  T* y = out.values().data();
  size_t off = 0;
  for (const auto& p : parts) {
    std::memcpy(y + off, p.values().data(), p.values().size() * sizeof(T));
    off += p.values().size();
  }
  Tape<T>* tp = nullptr;
  for (const auto& p : parts) {
    if (p.tape() == nullptr) continue;
    if (tp == nullptr)
      tp = p.tape();
    else if (tp != p.tape())
      throw std::invalid_argument("concat_channels: inputs on different tapes");
  }
  if (tp) {
    tp->attach(out.node());
    std::vector<std::shared_ptr<TensorNode<T>>> nodes;
    std::vector<bool> tracked;
    for (const auto& p : parts) {
      nodes.push_back(p.node());
      tracked.push_back(p.tape() != nullptr);
    }
    auto on = out.node();
    tp->record([nodes, tracked, on] {
      size_t pos = 0;
      for (size_t k = 0; k < nodes.size(); ++k) {
        if (tracked[k]) detail::accumulate(nodes[k], on->grad.data() + pos);
        pos += nodes[k]->values.size();
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> slice_channels(const Tensor<T>& a, int c0, int c1) {
  if (a.ndim() != 3) throw std::invalid_argument("slice_channels: need [C,H,W]");
  if (c0 < 0 || c1 > a.dim(0) || c0 >= c1)
    throw std::invalid_argument("slice_channels: bad range [" + std::to_string(c0) +
                                "," + std::to_string(c1) + ") of " +
                                std::to_string(a.dim(0)));
  const long long plane = static_cast<long long>(a.dim(1)) * a.dim(2);
  Tensor<T> out(Dims{c1 - c0, a.dim(1), a.dim(2)});
  std::memcpy(out.values().data(), a.values().data() + c0 * plane,
              out.values().size() * sizeof(T));
  if (Tape<T>* tp = a.tape()) {
    tp->attach(out.node());
    auto an = a.node();
    auto on = out.node();
    tp->record([an, on, c0, plane] {
      an->ensure_grad();
      const size_t n = on->values.size();
      for (size_t i = 0; i < n; ++i) an->grad[c0 * plane + i] += on->grad[i];
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Convolution cores ([C,H,W] planes, accumulate-only; callers initialize
// output buffers and handle tape recording)
// ---------------------------------------------------------------------------

namespace {

struct ConvDims {
  int in_c, out_c, in_h, in_w, out_h, out_w, kh, kw, stride, pad;
  bool depthwise;
};

int conv_out_extent(int in, int k, int s, int p) {
  return (in + 2 * p - k) / s + 1;
}

// out[oc,oy,ox] += sum_{ic,ky,kx} w[oc,ic,ky,kx] * in[ic,oy*s+ky-p,ox*s+kx-p]
// Inner loops run over output columns so both sides stream contiguously when
// stride == 1.
template <typename T>
void conv_accumulate_core(const ConvDims& d, const T* in, const T* w, T* out) {
  const long long in_plane = static_cast<long long>(d.in_h) * d.in_w;
  const long long out_plane = static_cast<long long>(d.out_h) * d.out_w;
  for (int oc = 0; oc < d.out_c; ++oc) {
    T* outp = out + oc * out_plane;
    const int ic_begin = d.depthwise ? oc : 0;
    const int ic_end = d.depthwise ? oc + 1 : d.in_c;
    for (int ic = ic_begin; ic < ic_end; ++ic) {
      const T* inp = in + ic * in_plane;
      const T* wrow =
          d.depthwise
              ? w + static_cast<long long>(oc) * d.kh * d.kw
              : w + (static_cast<long long>(oc) * d.in_c + ic) * d.kh * d.kw;
      for (int ky = 0; ky < d.kh; ++ky) {
        for (int kx = 0; kx < d.kw; ++kx) {
          const T wv = wrow[ky * d.kw + kx];
          if (wv == T(0)) continue;
          for (int oy = 0; oy < d.out_h; ++oy) {
            const int iy = oy * d.stride + ky - d.pad;
            if (iy < 0 || iy >= d.in_h) continue;
            const T* irow = inp + static_cast<long long>(iy) * d.in_w;
            T* orow = outp + static_cast<long long>(oy) * d.out_w;
            int ox0 = 0;
            while (ox0 < d.out_w && ox0 * d.stride + kx - d.pad < 0) ++ox0;
            int ox1 = d.out_w;
            while (ox1 > ox0 && (ox1 - 1) * d.stride + kx - d.pad >= d.in_w) --ox1;
            if (d.stride == 1) {
              const T* ip = irow + ox0 + kx - d.pad;
              for (int ox = ox0; ox < ox1; ++ox) orow[ox] += wv * ip[ox - ox0];
            } else {
              for (int ox = ox0; ox < ox1; ++ox)
                orow[ox] += wv * irow[ox * d.stride + kx - d.pad];
            }
          }
        }
      }
    }
  }
}

// gin[ic,iy,ix] += sum w[oc,ic,ky,kx] * gout[oc,oy,ox], iy = oy*s+ky-p etc.
template <typename T>
void conv_backward_input_core(const ConvDims& d, const T* gout, const T* w,
                              T* gin) {
  const long long in_plane = static_cast<long long>(d.in_h) * d.in_w;
  const long long out_plane = static_cast<long long>(d.out_h) * d.out_w;
  for (int oc = 0; oc < d.out_c; ++oc) {
    const T* gop = gout + oc * out_plane;
    const int ic_begin = d.depthwise ? oc : 0;
    const int ic_end = d.depthwise ? oc + 1 : d.in_c;
    for (int ic = ic_begin; ic < ic_end; ++ic) {
      T* gip = gin + ic * in_plane;
      const T* wrow =
          d.depthwise
              ? w + static_cast<long long>(oc) * d.kh * d.kw
              : w + (static_cast<long long>(oc) * d.in_c + ic) * d.kh * d.kw;
      for (int ky = 0; ky < d.kh; ++ky) {
        for (int kx = 0; kx < d.kw; ++kx) {
          const T wv = wrow[ky * d.kw + kx];
          if (wv == T(0)) continue;
          for (int oy = 0; oy < d.out_h; ++oy) {
            const int iy = oy * d.stride + ky - d.pad;
            if (iy < 0 || iy >= d.in_h) continue;
            T* girow = gip + static_cast<long long>(iy) * d.in_w;
            const T* gorow = gop + static_cast<long long>(oy) * d.out_w;
            int ox0 = 0;
            while (ox0 < d.out_w && ox0 * d.stride + kx - d.pad < 0) ++ox0;
            int ox1 = d.out_w;
            while (ox1 > ox0 && (ox1 - 1) * d.stride + kx - d.pad >= d.in_w) --ox1;
            if (d.stride == 1) {
              T* gi = girow + ox0 + kx - d.pad;
              for (int ox = ox0; ox < ox1; ++ox) gi[ox - ox0] += wv * gorow[ox];
            } else {
              for (int ox = ox0; ox < ox1; ++ox)
                girow[ox * d.stride + kx - d.pad] += wv * gorow[ox];
            }
          }
        }
      }
    }
  }
}

// gw[oc,ic,ky,kx] += sum_{oy,ox} gout[oc,oy,ox] * in[ic,oy*s+ky-p,ox*s+kx-p]
template <typename T>
void conv_backward_weights_core(const ConvDims& d, const T* gout, const T* in,
                                T* gw) {
  const long long in_plane = static_cast<long long>(d.in_h) * d.in_w;
  const long long out_plane = static_cast<long long>(d.out_h) * d.out_w;
  for (int oc = 0; oc < d.out_c; ++oc) {
    const T* gop = gout + oc * out_plane;
    const int ic_begin = d.depthwise ? oc : 0;
    const int ic_end = d.depthwise ? oc + 1 : d.in_c;
    for (int ic = ic_begin; ic < ic_end; ++ic) {
      const T* inp = in + ic * in_plane;
      T* gwrow =
          d.depthwise
              ? gw + static_cast<long long>(oc) * d.kh * d.kw
              : gw + (static_cast<long long>(oc) * d.in_c + ic) * d.kh * d.kw;
      for (int ky = 0; ky < d.kh; ++ky) {
        for (int kx = 0; kx < d.kw; ++kx) {
          T acc = T(0);
          for (int oy = 0; oy < d.out_h; ++oy) {
            const int iy = oy * d.stride + ky - d.pad;
            if (iy < 0 || iy >= d.in_h) continue;
            const T* irow = inp + static_cast<long long>(iy) * d.in_w;
            const T* gorow = gop + static_cast<long long>(oy) * d.out_w;
            int ox0 = 0;
            while (ox0 < d.out_w && ox0 * d.stride + kx - d.pad < 0) ++ox0;
            int ox1 = d.out_w;
            while (ox1 > ox0 && (ox1 - 1) * d.stride + kx - d.pad >= d.in_w) --ox1;
            if (d.stride == 1) {
              const T* ip = irow + ox0 + kx - d.pad;
              for (int ox = ox0; ox < ox1; ++ox) acc += gorow[ox] * ip[ox - ox0];
            } else {
              for (int ox = ox0; ox < ox1; ++ox)
                acc += gorow[ox] * irow[ox * d.stride + kx - d.pad];
            }
          }
          gwrow[ky * d.kw + kx] += acc;
        }
      }
    }
  }
}

template <typename T>
void conv_backward_bias_core(const ConvDims& d, const T* gout, T* gb) {
  const long long out_plane = static_cast<long long>(d.out_h) * d.out_w;
  for (int oc = 0; oc < d.out_c; ++oc) {
    T acc = T(0);
    const T* gop = gout + oc * out_plane;
    for (long long i = 0; i < out_plane; ++i) acc += gop[i];
    gb[oc] += acc;
  }
}

void validate_conv_spec(const char* op, const ConvSpec& s, const Dims& wdims,
                        const Dims& bdims, bool transposed) {
  if (s.in_channels <= 0 || s.out_channels <= 0 || s.kernel_h <= 0 ||
      s.kernel_w <= 0 || s.stride <= 0 || s.padding < 0)
    throw std::invalid_argument(std::string(op) + ": invalid spec");
  if (s.depthwise && s.out_channels != s.in_channels)
    throw std::invalid_argument(
        std::string(op) + ": depthwise requires out_channels == in_channels");
  Dims expect;
  if (s.depthwise)
    expect = {s.in_channels, 1, s.kernel_h, s.kernel_w};
  else if (transposed)
    expect = {s.in_channels, s.out_channels, s.kernel_h, s.kernel_w};
  else
    expect = {s.out_channels, s.in_channels, s.kernel_h, s.kernel_w};
  if (wdims != expect)
    throw std::invalid_argument(std::string(op) + ": weight dims " +
                                dims_to_string(wdims) + ", expected " +
                                dims_to_string(expect));
  if (bdims != Dims{s.out_channels})
    throw std::invalid_argument(std::string(op) + ": bias dims " +
                                dims_to_string(bdims) + ", expected [" +
                                std::to_string(s.out_channels) + "]");
}

}  // namespace

template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const ConvSpec& spec,
                 const Tensor<T>& weights, const Tensor<T>& bias) {
  validate_conv_spec("conv2d", spec, weights.dims(), bias.dims(), false);
  const bool batched = input.ndim() == 4;
  if (!batched && input.ndim() != 3)
    throw std::invalid_argument("conv2d: input must be [C,H,W] or [N,C,H,W]");
  const int n = batched ? input.dim(0) : 1;
  const int c = input.dim(batched ? 1 : 0);
  const int h = input.dim(batched ? 2 : 1);
  const int w = input.dim(batched ? 3 : 2);
  if (c != spec.in_channels)
    throw std::invalid_argument("conv2d: input has " + std::to_string(c) +
                                " channels, spec expects " +
                                std::to_string(spec.in_channels));
  if (h + 2 * spec.padding < spec.kernel_h || w + 2 * spec.padding < spec.kernel_w)
    throw std::invalid_argument("conv2d: input smaller than kernel after padding");

  const ConvDims d{spec.in_channels,
                   spec.out_channels,
                   h,
                   w,
                   conv_out_extent(h, spec.kernel_h, spec.stride, spec.padding),
                   conv_out_extent(w, spec.kernel_w, spec.stride, spec.padding),
                   spec.kernel_h,
                   spec.kernel_w,
                   spec.stride,
                   spec.padding,
                   spec.depthwise};

  Dims odims = batched ? Dims{n, d.out_c, d.out_h, d.out_w}
                       : Dims{d.out_c, d.out_h, d.out_w};
  Tensor<T> out(odims);
  const long long in_sz = static_cast<long long>(c) * h * w;
  const long long out_sz = static_cast<long long>(d.out_c) * d.out_h * d.out_w;
  const long long out_plane = static_cast<long long>(d.out_h) * d.out_w;
  for (int b = 0; b < n; ++b) {
    T* op = out.values().data() + b * out_sz;
    for (int oc = 0; oc < d.out_c; ++oc) {
      const T bv = bias.values()[static_cast<size_t>(oc)];
      T* plane = op + oc * out_plane;
      for (long long i = 0; i < out_plane; ++i) plane[i] = bv;
    }
    conv_accumulate_core(d, input.values().data() + b * in_sz,
                         weights.values().data(), op);
  }
  detail::ensure_finite("conv2d", out);

  if (Tape<T>* tp = detail::tape_of<T>({&input, &weights, &bias})) {
    tp->attach(out.node());
    auto in_n = input.node();
    auto w_n = weights.node();
    auto b_n = bias.node();
    auto o_n = out.node();
    const bool gi = input.tape() != nullptr;
    const bool gw = weights.tape() != nullptr;
    const bool gb = bias.tape() != nullptr;
    tp->record([d, n, in_sz, out_sz, in_n, w_n, b_n, o_n, gi, gw, gb] {
      if (gi) in_n->ensure_grad();
      if (gw) w_n->ensure_grad();
      if (gb) b_n->ensure_grad();
      for (int b = 0; b < n; ++b) {
        const T* go = o_n->grad.data() + b * out_sz;
        if (gi)
          conv_backward_input_core(d, go, w_n->values.data(),
                                   in_n->grad.data() + b * in_sz);
        if (gw)
          conv_backward_weights_core(d, go, in_n->values.data() + b * in_sz,
                                     w_n->grad.data());
        if (gb) conv_backward_bias_core(d, go, b_n->grad.data());
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> deconv2d(const Tensor<T>& input, const ConvSpec& spec,
                   const Tensor<T>& weights, const Tensor<T>& bias) {
  if (spec.kernel_h != 4 || spec.kernel_w != 4 || spec.stride != 2 ||
      spec.padding != 1)
    throw std::invalid_argument(
        "deconv2d: only the 4x4/stride-2/pad-1 form is supported");
  if (spec.depthwise) throw std::invalid_argument("deconv2d: depthwise unsupported");
  validate_conv_spec("deconv2d", spec, weights.dims(), bias.dims(), true);
  const bool batched = input.ndim() == 4;
  if (!batched && input.ndim() != 3)
    throw std::invalid_argument("deconv2d: input must be [C,H,W] or [N,C,H,W]");
  const int n = batched ? input.dim(0) : 1;
  const int c = input.dim(batched ? 1 : 0);
  const int h = input.dim(batched ? 2 : 1);
  const int w = input.dim(batched ? 3 : 2);
  if (c != spec.in_channels)
    throw std::invalid_argument("deconv2d: input has " + std::to_string(c) +
                                " channels, spec expects " +
                                std::to_string(spec.in_channels));
  const int out_h = h * 2;  // (h-1)*2 - 2*1 + 4
  const int out_w = w * 2;

  // A transposed convolution is the input-gradient of a convolution mapping
  // out_channels -> in_channels; the cores are reused with roles swapped.
  const ConvDims d{spec.out_channels, spec.in_channels, out_h,      out_w, h,
                   w,                 spec.kernel_h,    spec.kernel_w, 2,   1,
                   false};

  Dims odims = batched ? Dims{n, spec.out_channels, out_h, out_w}
                       : Dims{spec.out_channels, out_h, out_w};
  Tensor<T> out(odims);
  const long long in_sz = static_cast<long long>(c) * h * w;
  const long long out_sz =
      static_cast<long long>(spec.out_channels) * out_h * out_w;
  const long long out_plane = static_cast<long long>(out_h) * out_w;
  for (int b = 0; b < n; ++b) {
    T* op = out.values().data() + b * out_sz;
    for (int oc = 0; oc < spec.out_channels; ++oc) {
      const T bv = bias.values()[static_cast<size_t>(oc)];
      if (bv == T(0)) continue;
      T* plane = op + oc * out_plane;
      for (long long i = 0; i < out_plane; ++i) plane[i] = bv;
    }
    conv_backward_input_core(d, input.values().data() + b * in_sz,
                             weights.values().data(), op);
  }
  detail::ensure_finite("deconv2d", out);

  if (Tape<T>* tp = detail::tape_of<T>({&input, &weights, &bias})) {
    tp->attach(out.node());
    auto in_n = input.node();
    auto w_n = weights.node();
    auto b_n = bias.node();
    auto o_n = out.node();
    const bool gi = input.tape() != nullptr;
    const bool gw = weights.tape() != nullptr;
    const bool gb = bias.tape() != nullptr;
    const int oc_count = spec.out_channels;
    tp->record([d, n, in_sz, out_sz, out_plane, oc_count, in_n, w_n, b_n, o_n, gi,
                gw, gb] {
      if (gi) in_n->ensure_grad();
      if (gw) w_n->ensure_grad();
      if (gb) b_n->ensure_grad();
      for (int b = 0; b < n; ++b) {
        const T* go = o_n->grad.data() + b * out_sz;
        if (gi)
          conv_accumulate_core(d, go, w_n->values.data(),
                               in_n->grad.data() + b * in_sz);
        if (gw)
          conv_backward_weights_core(d, in_n->values.data() + b * in_sz, go,
                                     w_n->grad.data());
        if (gb) {
          for (int oc = 0; oc < oc_count; ++oc) {
            T acc = T(0);
            const T* plane = go + oc * out_plane;
            for (long long i = 0; i < out_plane; ++i) acc += plane[i];
            b_n->grad[static_cast<size_t>(oc)] += acc;
          }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Pooling and resize
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> avg_pool2(const Tensor<T>& input) {
  if (input.ndim() != 3) throw std::invalid_argument("avg_pool2: need [C,H,W]");
  const int c = input.dim(0);
  const int h = input.dim(1);
  const int w = input.dim(2);
  if (h % 2 != 0 || w % 2 != 0)
    throw std::invalid_argument("avg_pool2: dims must be even, got " +
                                dims_to_string(input.dims()));
  const int oh = h / 2;
  const int ow = w / 2;
  Tensor<T> out(Dims{c, oh, ow});
  const T* x = input.values().data();
  T* y = out.values().data();
  for (int ch = 0; ch < c; ++ch) {
    const T* ip = x + static_cast<long long>(ch) * h * w;
    T* op = y + static_cast<long long>(ch) * oh * ow;
    for (int oy = 0; oy < oh; ++oy)
      for (int ox = 0; ox < ow; ++ox) {
        const T* r0 = ip + (2 * oy) * w + 2 * ox;
        const T* r1 = r0 + w;
        op[oy * ow + ox] = (r0[0] + r0[1] + r1[0] + r1[1]) * T(0.25);
      }
  }
  detail::ensure_finite("avg_pool2", out);
  if (Tape<T>* tp = input.tape()) {
    tp->attach(out.node());
    auto in_n = input.node();
    auto o_n = out.node();
    tp->record([in_n, o_n, c, h, w, oh, ow] {
      in_n->ensure_grad();
      for (int ch = 0; ch < c; ++ch) {
        T* gi = in_n->grad.data() + static_cast<long long>(ch) * h * w;
        const T* go = o_n->grad.data() + static_cast<long long>(ch) * oh * ow;
        for (int oy = 0; oy < oh; ++oy)
          for (int ox = 0; ox < ow; ++ox) {
            const T g = go[oy * ow + ox] * T(0.25);
            gi[(2 * oy) * w + 2 * ox] += g;
            gi[(2 * oy) * w + 2 * ox + 1] += g;
            gi[(2 * oy + 1) * w + 2 * ox] += g;
            gi[(2 * oy + 1) * w + 2 * ox + 1] += g;
          }
      }
    });
  }
  return out;
}

namespace {

struct ResizeTap {
  int i0, i1;
  double f;  // weight of i1
};

// Half-pixel-center source coordinates, edge clamped.
std::vector<ResizeTap> resize_taps(int in_extent, int out_extent) {
  std::vector<ResizeTap> taps(static_cast<size_t>(out_extent));
  const double scale = static_cast<double>(in_extent) / out_extent;
  for (int o = 0; o < out_extent; ++o) {
    double src = (o + 0.5) * scale - 0.5;
    if (src < 0) src = 0;
    if (src > in_extent - 1) src = in_extent - 1;
    const int i0 = static_cast<int>(std::floor(src));
    const int i1 = std::min(i0 + 1, in_extent - 1);
    taps[static_cast<size_t>(o)] = {i0, i1, src - i0};
  }
  return taps;
}

}  // namespace

template <typename T>
Tensor<T> bilinear_resize(const Tensor<T>& input, int out_h, int out_w) {
  if (input.ndim() != 3)
    throw std::invalid_argument("bilinear_resize: need [C,H,W]");
  if (out_h < 1 || out_w < 1)
    throw std::invalid_argument("bilinear_resize: output dims must be >= 1");
  const int c = input.dim(0);
  const int h = input.dim(1);
  const int w = input.dim(2);
  const auto ty = resize_taps(h, out_h);
  const auto tx = resize_taps(w, out_w);
  Tensor<T> out(Dims{c, out_h, out_w});
  const T* x = input.values().data();
  T* y = out.values().data();
  for (int ch = 0; ch < c; ++ch) {
    const T* ip = x + static_cast<long long>(ch) * h * w;
    T* op = y + static_cast<long long>(ch) * out_h * out_w;
    for (int oy = 0; oy < out_h; ++oy) {
      const ResizeTap& ry = ty[static_cast<size_t>(oy)];
      const T fy = static_cast<T>(ry.f);
      for (int ox = 0; ox < out_w; ++ox) {
        const ResizeTap& rx = tx[static_cast<size_t>(ox)];
        const T fx = static_cast<T>(rx.f);
        const T v00 = ip[ry.i0 * w + rx.i0];
        const T v01 = ip[ry.i0 * w + rx.i1];
        const T v10 = ip[ry.i1 * w + rx.i0];
        const T v11 = ip[ry.i1 * w + rx.i1];
        const T top = v00 + fx * (v01 - v00);
        const T bot = v10 + fx * (v11 - v10);
        op[oy * out_w + ox] = top + fy * (bot - top);
      }
    }
  }
  detail::ensure_finite("bilinear_resize", out);
  if (Tape<T>* tp = input.tape()) {
    tp->attach(out.node());
    auto in_n = input.node();
    auto o_n = out.node();
    tp->record([in_n, o_n, ty, tx, c, h, w, out_h, out_w] {
      in_n->ensure_grad();
      for (int ch = 0; ch < c; ++ch) {
        T* gi = in_n->grad.data() + static_cast<long long>(ch) * h * w;
        const T* go = o_n->grad.data() + static_cast<long long>(ch) * out_h * out_w;
        for (int oy = 0; oy < out_h; ++oy) {
          const ResizeTap& ry = ty[static_cast<size_t>(oy)];
          const T fy = static_cast<T>(ry.f);
          for (int ox = 0; ox < out_w; ++ox) {
            const ResizeTap& rx = tx[static_cast<size_t>(ox)];
            const T fx = static_cast<T>(rx.f);
            const T g = go[oy * out_w + ox];
            gi[ry.i0 * w + rx.i0] += g * (T(1) - fy) * (T(1) - fx);
            gi[ry.i0 * w + rx.i1] += g * (T(1) - fy) * fx;
            gi[ry.i1 * w + rx.i0] += g * fy * (T(1) - fx);
            gi[ry.i1 * w + rx.i1] += g * fy * fx;
          }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// backward
// ---------------------------------------------------------------------------

template <typename T>
void backward(const Tensor<T>& loss) {
  if (loss.numel() != 1)
    throw std::invalid_argument("backward: loss must be a scalar, got " +
                                dims_to_string(loss.dims()));
  Tape<T>* tp = loss.tape();
  if (tp == nullptr)
    throw std::invalid_argument("backward: loss is detached from any tape");
  // Intermediate grads are scratch; zero them so repeated sweeps stay
  // correct. Leaf grads persist and accumulate across calls.
  for (auto& n : tp->nodes_) {
    if (!n->leaf) n->grad.assign(n->values.size(), T(0));
  }
  auto& ln = *loss.node();
  ln.ensure_grad();
  ln.grad[0] += T(1);
  for (auto it = tp->pullbacks_.rbegin(); it != tp->pullbacks_.rend(); ++it)
    (*it)();
}

// ---------------------------------------------------------------------------
// cast
// ---------------------------------------------------------------------------

template <typename To, typename From>
Tensor<To> cast(const Tensor<From>& a) {
  Tensor<To> out(a.dims());
  const From* x = a.values().data();
  To* y = out.values().data();
  const size_t n = a.values().size();
  for (size_t i = 0; i < n; ++i) y[i] = static_cast<To>(x[i]);
  return out;
}

// ---------------------------------------------------------------------------
// Explicit instantiations
// ---------------------------------------------------------------------------

#define HDRFLOW_INSTANTIATE_TENSOR_OPS(T)                                        \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                    \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                    \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                    \
  template Tensor<T> scale(const Tensor<T>&, double);                            \
  template Tensor<T> add_scalar(const Tensor<T>&, double);                       \
  template Tensor<T> reciprocal(const Tensor<T>&);                               \
  template Tensor<T> relu(const Tensor<T>&);                                     \
  template Tensor<T> sigmoid(const Tensor<T>&);                                  \
  template Tensor<T> abs(const Tensor<T>&);                                      \
  template Tensor<T> clamp(const Tensor<T>&, double, double);                    \
  template Tensor<T> pow_scalar(const Tensor<T>&, double);                       \
  template Tensor<T> mul_bcast1(const Tensor<T>&, const Tensor<T>&);             \
  template Tensor<T> sum(const Tensor<T>&);                                      \
  template Tensor<T> mean(const Tensor<T>&);                                     \
  template Tensor<T> concat_channels(const std::vector<Tensor<T>>&);             \
  template Tensor<T> slice_channels(const Tensor<T>&, int, int);                 \
  template Tensor<T> conv2d(const Tensor<T>&, const ConvSpec&, const Tensor<T>&, \
                            const Tensor<T>&);                                   \
  template Tensor<T> deconv2d(const Tensor<T>&, const ConvSpec&,                 \
                              const Tensor<T>&, const Tensor<T>&);               \
  template Tensor<T> avg_pool2(const Tensor<T>&);                                \
  template Tensor<T> bilinear_resize(const Tensor<T>&, int, int);                \
  template void backward(const Tensor<T>&);

HDRFLOW_INSTANTIATE_TENSOR_OPS(float)
HDRFLOW_INSTANTIATE_TENSOR_OPS(double)

template Tensor<float> cast(const Tensor<double>&);
template Tensor<double> cast(const Tensor<float>&);
template Tensor<float> cast(const Tensor<float>&);
template Tensor<double> cast(const Tensor<double>&);

}  // namespace hdrflow
