#include "evc/autograd.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <numbers>

#include "evc/numeric.hpp"

namespace evc {
namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

struct ConvGeometry {
  int n, cin, h, w, cout, k, ho, wo, cin_g, cout_g;
};

template <typename T>
ConvGeometry conv_geometry(const Shape& xs, const Shape& ws, ConvSpec spec) {
  if (spec.stride < 1 || spec.padding < 0 || spec.groups < 1) {
    throw ValidationError("conv2d: stride must be >= 1, padding >= 0, groups >= 1");
  }
  ConvGeometry g{};
  g.n = xs.n();
  g.cin = xs.c();
  g.h = xs.h();
  g.w = xs.w();
  g.cout = ws.n();
  g.k = ws.h();
  if (ws.h() != ws.w()) throw DimensionError("conv2d: kernel must be square, got " + ws.str());
  if (g.cin % spec.groups != 0 || g.cout % spec.groups != 0) {
    throw DimensionError("conv2d: channels " + std::to_string(g.cin) + "->" +
                         std::to_string(g.cout) + " not divisible by groups " +
                         std::to_string(spec.groups));
  }
  g.cin_g = g.cin / spec.groups;
  g.cout_g = g.cout / spec.groups;
  if (ws.c() != g.cin_g) {
    throw DimensionError("conv2d: input has " + std::to_string(g.cin) + " channels, weight " +
                         ws.str() + " expects " + std::to_string(ws.c() * spec.groups));
  }
  const int span_h = g.h + 2 * spec.padding - g.k;
  const int span_w = g.w + 2 * spec.padding - g.k;
  if (span_h < 0 || span_w < 0) {
    throw DimensionError("conv2d: input " + xs.str() + " smaller than kernel " +
                         std::to_string(g.k) + " after padding " + std::to_string(spec.padding));
  }
  g.ho = span_h / spec.stride + 1;
  g.wo = span_w / spec.stride + 1;
  return g;
}

template <typename T>
bool is_pointwise(const ConvGeometry& g, ConvSpec spec) {
  return g.k == 1 && spec.stride == 1 && spec.padding == 0;
}

// col[(ci*k + ky)*k + kx][oy*wo + ox] for channels [c0, c0+cin_g) of image n.
template <typename T>
void im2col(const T* img, const ConvGeometry& g, ConvSpec spec, int c0, std::vector<T>& col) {
  const int rows = g.cin_g * g.k * g.k;
  const int cols = g.ho * g.wo;
  col.assign(static_cast<std::size_t>(rows) * cols, T(0));
  for (int ci = 0; ci < g.cin_g; ++ci) {
    const T* plane = img + static_cast<std::size_t>(c0 + ci) * g.h * g.w;
    for (int ky = 0; ky < g.k; ++ky) {
      for (int kx = 0; kx < g.k; ++kx) {
        T* dst = col.data() + static_cast<std::size_t>((ci * g.k + ky) * g.k + kx) * cols;
        for (int oy = 0; oy < g.ho; ++oy) {
          const int iy = oy * spec.stride - spec.padding + ky;
          if (iy < 0 || iy >= g.h) continue;
          for (int ox = 0; ox < g.wo; ++ox) {
            const int ix = ox * spec.stride - spec.padding + kx;
            if (ix < 0 || ix >= g.w) continue;
            dst[oy * g.wo + ox] = plane[iy * g.w + ix];
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const std::vector<T>& col, const ConvGeometry& g, ConvSpec spec, int c0, T* img) {
  const int cols = g.ho * g.wo;
  for (int ci = 0; ci < g.cin_g; ++ci) {
    T* plane = img + static_cast<std::size_t>(c0 + ci) * g.h * g.w;
    for (int ky = 0; ky < g.k; ++ky) {
      for (int kx = 0; kx < g.k; ++kx) {
        const T* src = col.data() + static_cast<std::size_t>((ci * g.k + ky) * g.k + kx) * cols;
        for (int oy = 0; oy < g.ho; ++oy) {
          const int iy = oy * spec.stride - spec.padding + ky;
          if (iy < 0 || iy >= g.h) continue;
          for (int ox = 0; ox < g.wo; ++ox) {
            const int ix = ox * spec.stride - spec.padding + kx;
            if (ix < 0 || ix >= g.w) continue;
            plane[iy * g.w + ix] += src[oy * g.wo + ox];
          }
        }
      }
    }
  }
}

bool is_anchor(int h, int w) { return ((h + w) & 1) == 0; }

template <typename T>
void accumulate(const Var<T>& node, const TensorT<T>& g) {
  if (!node->requires_grad) return;
  auto& buf = node->grad_buffer();
  for (std::size_t i = 0; i < buf.size(); ++i) buf[i] += g[i];
}

template <typename T>
Var<T> result(TensorT<T> v, bool rg) {
  return make_var(std::move(v), rg);
}

}  // namespace

template <typename T>
TensorT<T> conv2d_forward(const TensorT<T>& x, const TensorT<T>& weight, const TensorT<T>& bias,
                          ConvSpec spec) {
  const auto g = conv_geometry<T>(x.shape(), weight.shape(), spec);
  if (!bias.empty() && static_cast<int>(bias.size()) != g.cout) {
    throw DimensionError("conv2d: bias length " + std::to_string(bias.size()) + " != " +
                         std::to_string(g.cout));
  }
  TensorT<T> out(Shape(g.n, g.cout, g.ho, g.wo));
  const int cols = g.ho * g.wo;
  const int kk = g.cin_g * g.k * g.k;
  std::vector<T> col;
  for (int n = 0; n < g.n; ++n) {
    const T* img = x.data() + static_cast<std::size_t>(n) * g.cin * g.h * g.w;
    for (int grp = 0; grp < spec.groups; ++grp) {
      const T* src;
      if (is_pointwise<T>(g, spec)) {
        src = img + static_cast<std::size_t>(grp) * g.cin_g * cols;
      } else {
        im2col(img, g, spec, grp * g.cin_g, col);
        src = col.data();
      }
      ConstMatMap<T> wm(weight.data() + static_cast<std::size_t>(grp) * g.cout_g * kk, g.cout_g, kk);
      ConstMatMap<T> cm(src, kk, cols);
      MatMap<T> om(out.data() + (static_cast<std::size_t>(n) * g.cout + grp * g.cout_g) * cols,
                   g.cout_g, cols);
      om.noalias() = wm * cm;
    }
    if (!bias.empty()) {
      for (int co = 0; co < g.cout; ++co) {
        T* o = out.data() + (static_cast<std::size_t>(n) * g.cout + co) * cols;
        for (int i = 0; i < cols; ++i) o[i] += bias[co];
      }
    }
  }
  return out;
}

template <typename T>
ConvGrads<T> conv2d_backward(const TensorT<T>& grad_out, const TensorT<T>& x,
                             const TensorT<T>& weight, ConvSpec spec) {
  const auto g = conv_geometry<T>(x.shape(), weight.shape(), spec);
  require_same_shape(grad_out.shape(), Shape(g.n, g.cout, g.ho, g.wo), "conv2d_backward grad_out");
  ConvGrads<T> r{TensorT<T>(x.shape()), TensorT<T>(weight.shape()), TensorT<T>(Shape(1, g.cout, 1, 1))};
  const int cols = g.ho * g.wo;
  const int kk = g.cin_g * g.k * g.k;
  std::vector<T> col;
  std::vector<T> dcol;
  for (int n = 0; n < g.n; ++n) {
    const T* img = x.data() + static_cast<std::size_t>(n) * g.cin * g.h * g.w;
    T* dimg = r.dx.data() + static_cast<std::size_t>(n) * g.cin * g.h * g.w;
    for (int grp = 0; grp < spec.groups; ++grp) {
      const bool pw = is_pointwise<T>(g, spec);
      const T* src;
      if (pw) {
        src = img + static_cast<std::size_t>(grp) * g.cin_g * cols;
      } else {
        im2col(img, g, spec, grp * g.cin_g, col);
        src = col.data();
      }
      ConstMatMap<T> go(grad_out.data() + (static_cast<std::size_t>(n) * g.cout + grp * g.cout_g) * cols,
                        g.cout_g, cols);
      ConstMatMap<T> cm(src, kk, cols);
      ConstMatMap<T> wm(weight.data() + static_cast<std::size_t>(grp) * g.cout_g * kk, g.cout_g, kk);
      MatMap<T> dw(r.dweight.data() + static_cast<std::size_t>(grp) * g.cout_g * kk, g.cout_g, kk);
      dw.noalias() += go * cm.transpose();
      if (pw) {
        MatMap<T> dx(dimg + static_cast<std::size_t>(grp) * g.cin_g * cols, kk, cols);
        dx.noalias() += wm.transpose() * go;
      } else {
        dcol.assign(static_cast<std::size_t>(kk) * cols, T(0));
        MatMap<T> dc(dcol.data(), kk, cols);
        dc.noalias() = wm.transpose() * go;
        col2im_add(dcol, g, spec, grp * g.cin_g, dimg);
      }
    }
    for (int co = 0; co < g.cout; ++co) {
      const T* o = grad_out.data() + (static_cast<std::size_t>(n) * g.cout + co) * cols;
      T acc = 0;
      for (int i = 0; i < cols; ++i) acc += o[i];
      r.dbias[co] += acc;
    }
  }
  return r;
}

template <typename T>
TensorT<T> pixel_shuffle(const TensorT<T>& x, int r) {
  if (r < 1) throw ValidationError("pixel_shuffle: factor must be >= 1");
  const int rr = r * r;
  if (x.c() % rr != 0) {
    throw DimensionError("pixel_shuffle: channels " + std::to_string(x.c()) +
                         " not divisible by " + std::to_string(rr));
  }
  const int c = x.c() / rr;
  TensorT<T> out(Shape(x.n(), c, x.h() * r, x.w() * r));
  for (int n = 0; n < x.n(); ++n)
    for (int oc = 0; oc < c; ++oc)
      for (int i = 0; i < r; ++i)
        for (int j = 0; j < r; ++j)
          for (int h = 0; h < x.h(); ++h)
            for (int w = 0; w < x.w(); ++w)
              out.at(n, oc, h * r + i, w * r + j) = x.at(n, oc * rr + i * r + j, h, w);
  return out;
}

template <typename T>
TensorT<T> space_to_depth(const TensorT<T>& x, int r) {
  if (r < 1) throw ValidationError("space_to_depth: factor must be >= 1");
  if (x.h() % r != 0 || x.w() % r != 0) {
    throw DimensionError("space_to_depth: spatial " + x.shape().str() + " not divisible by " +
                         std::to_string(r));
  }
  const int rr = r * r;
  TensorT<T> out(Shape(x.n(), x.c() * rr, x.h() / r, x.w() / r));
  for (int n = 0; n < x.n(); ++n)
    for (int c = 0; c < x.c(); ++c)
      for (int i = 0; i < r; ++i)
        for (int j = 0; j < r; ++j)
          for (int h = 0; h < out.h(); ++h)
            for (int w = 0; w < out.w(); ++w)
              out.at(n, c * rr + i * r + j, h, w) = x.at(n, c, h * r + i, w * r + j);
  return out;
}

template <typename T>
bool Graph<T>::should_record(std::initializer_list<const Var<T>*> inputs) const {
  if (!recording_) return false;
  for (const Var<T>* v : inputs) {
    if (*v && (*v)->requires_grad) return true;
  }
  return false;
}

template <typename T>
void Graph<T>::backward(const Var<T>& loss) {
  if (loss->value.size() != 1) {
    throw DimensionError("backward: loss must be scalar, got " + loss->value.shape().str());
  }
  if (!loss->requires_grad) {
    tape_.clear();
    return;
  }
  loss->grad_buffer()[0] += T(1);
  for (auto it = tape_.rbegin(); it != tape_.rend(); ++it) (*it)();
  tape_.clear();
}

template <typename T>
Var<T> Graph<T>::conv2d(const Var<T>& x, const Var<T>& weight, const Var<T>& bias, ConvSpec spec) {
  const bool rg = should_record({&x, &weight, &bias});
  auto out = result(conv2d_forward(x->value, weight->value, bias ? bias->value : TensorT<T>(), spec), rg);
  if (rg) {
    record([x, weight, bias, out, spec] {
      if (out->grad.empty()) return;
      auto g = conv2d_backward(out->grad, x->value, weight->value, spec);
      accumulate(x, g.dx);
      accumulate(weight, g.dweight);
      if (bias) accumulate(bias, g.dbias);
    });
  }
  return out;
}

template <typename T>
Var<T> Graph<T>::add(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a->value.shape(), b->value.shape(), "add");
  TensorT<T> v = a->value;
  for (std::size_t i = 0; i < v.size(); ++i) v[i] += b->value[i];
  const bool rg = should_record({&a, &b});
  auto out = result(std::move(v), rg);
  if (rg) {
    record([a, b, out] {
      if (out->grad.empty()) return;
      accumulate(a, out->grad);
      accumulate(b, out->grad);
    });
  }
  return out;
}

template <typename T>
Var<T> Graph<T>::sub(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a->value.shape(), b->value.shape(), "sub");
  TensorT<T> v = a->value;
  for (std::size_t i = 0; i < v.size(); ++i) v[i] -= b->value[i];
  const bool rg = should_record({&a, &b});
  auto out = result(std::move(v), rg);
  if (rg) {
    record([a, b, out] {
      if (out->grad.empty()) return;
      accumulate(a, out->grad);
      if (b->requires_grad) {
        TensorT<T> ng = out->grad;
        for (auto& e : ng.values()) e = -e;
        accumulate(b, ng);
      }
    });
  }
  return out;
}

template <typename T>
Var<T> Graph<T>::mul(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a->value.shape(), b->value.shape(), "mul");
  TensorT<T> v = a->value;
  for (std::size_t i = 0; i < v.size(); ++i) v[i] *= b->value[i];
  const bool rg = should_record({&a, &b});
  auto out = result(std::move(v), rg);
  if (rg) {
    record([a, b, out] {
      if (out->grad.empty()) return;
      TensorT<T> ga = out->grad, gb = out->grad;
      for (std::size_t i = 0; i < ga.size(); ++i) {
        ga[i] *= b->value[i];
        gb[i] *= a->value[i];
      }
      accumulate(a, ga);
      accumulate(b, gb);
    });
  }
  return out;
}

template <typename T>
Var<T> Graph<T>::scale(const Var<T>& a, T factor) {
  TensorT<T> v = a->value;
  for (auto& e : v.values()) e *= factor;
  const bool rg = should_record({&a});
  auto out = result(std::move(v), rg);
  if (rg) {
    record([a, out, factor] {
      if (out->grad.empty()) return;
      TensorT<T> g = out->grad;
      for (auto& e : g.values()) e *= factor;
      accumulate(a, g);
    });
  }
  return out;
}

template <typename T>
Var<T> Graph<T>::leaky_relu(const Var<T>& x, T negative_slope) {
  TensorT<T> v = x->value;
  for (auto& e : v.values()) e = e >= T(0) ? e : negative_slope * e;
  const bool rg = should_record({&x});
  auto out = result(std::move(v), rg);
  if (rg) {
    record([x, out, negative_slope] {
      if (out->grad.empty()) return;
      TensorT<T> g = out->grad;
      for (std::size_t i = 0; i < g.size(); ++i) {
        if (x->value[i] < T(0)) g[i] *= negative_slope;
      }
      accumulate(x, g);
    });
  }
  return out;
}

template <typename T>
Var<T> Graph<T>::channel_scale(const Var<T>& x, const Var<T>& m) {
  const Shape& xs = x->value.shape();
  if (static_cast<int>(m->value.size()) != xs.c()) {
    throw DimensionError("channel_scale: mask length " + std::to_string(m->value.size()) +
                         " != channels " + std::to_string(xs.c()));
  }
  const std::size_t plane = static_cast<std::size_t>(xs.h()) * xs.w();
  TensorT<T> v = x->value;
  for (int n = 0; n < xs.n(); ++n)
    for (int c = 0; c < xs.c(); ++c) {
      T* p = v.data() + (static_cast<std::size_t>(n) * xs.c() + c) * plane;
      const T s = m->value[c];
      for (std::size_t i = 0; i < plane; ++i) p[i] *= s;
    }
  const bool rg = should_record({&x, &m});
  auto out = result(std::move(v), rg);
  if (rg) {
    record([x, m, out, plane] {
      if (out->grad.empty()) return;
      const Shape& s = x->value.shape();
      TensorT<T> gx(s);
      TensorT<T> gm(m->value.shape());
      for (int n = 0; n < s.n(); ++n)
        for (int c = 0; c < s.c(); ++c) {
          const std::size_t off = (static_cast<std::size_t>(n) * s.c() + c) * plane;
          T acc = 0;
          for (std::size_t i = 0; i < plane; ++i) {
            gx[off + i] = out->grad[off + i] * m->value[c];
            acc += out->grad[off + i] * x->value[off + i];
          }
          gm[c] += acc;
        }
      accumulate(x, gx);
      accumulate(m, gm);
    });
  }
  return out;
}

template <typename T>
Var<T> Graph<T>::pixel_shuffle(const Var<T>& x, int r) {
  const bool rg = should_record({&x});
  auto out = result(evc::pixel_shuffle(x->value, r), rg);
  if (rg) {
    record([x, out, r] {
      if (out->grad.empty()) return;
      accumulate(x, evc::space_to_depth(out->grad, r));
    });
  }
  return out;
}

template <typename T>
Var<T> Graph<T>::space_to_depth(const Var<T>& x, int r) {
  const bool rg = should_record({&x});
  auto out = result(evc::space_to_depth(x->value, r), rg);
  if (rg) {
    record([x, out, r] {
      if (out->grad.empty()) return;
      accumulate(x, evc::pixel_shuffle(out->grad, r));
    });
  }
  return out;
}

template <typename T>
Var<T> Graph<T>::concat_channels(const Var<T>& a, const Var<T>& b) {
  const Shape& sa = a->value.shape();
  const Shape& sb = b->value.shape();
  if (sa.n() != sb.n() || sa.h() != sb.h() || sa.w() != sb.w()) {
    throw DimensionError("concat_channels: " + sa.str() + " vs " + sb.str());
  }
  const std::size_t plane = static_cast<std::size_t>(sa.h()) * sa.w();
  const int c = sa.c() + sb.c();
  TensorT<T> v(Shape(sa.n(), c, sa.h(), sa.w()));
  for (int n = 0; n < sa.n(); ++n) {
    std::copy_n(a->value.data() + n * sa.c() * plane, sa.c() * plane, v.data() + n * c * plane);
    std::copy_n(b->value.data() + n * sb.c() * plane, sb.c() * plane,
                v.data() + (n * c + sa.c()) * plane);
  }
  const bool rg = should_record({&a, &b});
  auto out = result(std::move(v), rg);
  if (rg) {
    record([a, b, out, plane] {
      if (out->grad.empty()) return;
      const Shape& sa = a->value.shape();
      const Shape& sb = b->value.shape();
      const int c = sa.c() + sb.c();
      TensorT<T> ga(sa), gb(sb);
      for (int n = 0; n < sa.n(); ++n) {
        std::copy_n(out->grad.data() + n * c * plane, sa.c() * plane, ga.data() + n * sa.c() * plane);
        std::copy_n(out->grad.data() + (n * c + sa.c()) * plane, sb.c() * plane,
                    gb.data() + n * sb.c() * plane);
      }
      accumulate(a, ga);
      accumulate(b, gb);
    });
  }
  return out;
}

template <typename T>
Var<T> Graph<T>::slice_channels(const Var<T>& x, int start, int count) {
  const Shape& s = x->value.shape();
  if (start < 0 || count < 0 || start + count > s.c()) {
    throw DimensionError("slice_channels: [" + std::to_string(start) + "," +
                         std::to_string(start + count) + ") outside " + s.str());
  }
  const std::size_t plane = static_cast<std::size_t>(s.h()) * s.w();
  TensorT<T> v(Shape(s.n(), count, s.h(), s.w()));
  for (int n = 0; n < s.n(); ++n) {
    std::copy_n(x->value.data() + (n * s.c() + start) * plane, count * plane,
                v.data() + n * count * plane);
  }
  const bool rg = should_record({&x});
  auto out = result(std::move(v), rg);
  if (rg) {
    record([x, out, start, count, plane] {
      if (out->grad.empty()) return;
      const Shape& s = x->value.shape();
      TensorT<T> g(s);
      for (int n = 0; n < s.n(); ++n) {
        std::copy_n(out->grad.data() + n * count * plane, count * plane,
                    g.data() + (n * s.c() + start) * plane);
      }
      accumulate(x, g);
    });
  }
  return out;
}

template <typename T>
Var<T> Graph<T>::exp_clamped(const Var<T>& x, T lo, T hi) {
  const T llo = std::log(lo), lhi = std::log(hi);
  TensorT<T> v = x->value;
  for (auto& e : v.values()) e = std::exp(std::clamp(e, llo, lhi));
  const bool rg = should_record({&x});
  auto out = result(std::move(v), rg);
  if (rg) {
    record([x, out, llo, lhi] {
      if (out->grad.empty()) return;
      TensorT<T> g = out->grad;
      for (std::size_t i = 0; i < g.size(); ++i) {
        const T e = x->value[i];
        g[i] = (e > llo && e < lhi) ? g[i] * out->value[i] : T(0);
      }
      accumulate(x, g);
    });
  }
  return out;
}

template <typename T>
Var<T> Graph<T>::checker_select(const Var<T>& anchor, const Var<T>& non_anchor) {
  require_same_shape(anchor->value.shape(), non_anchor->value.shape(), "checker_select");
  const Shape& s = anchor->value.shape();
  TensorT<T> v(s);
  for (int n = 0; n < s.n(); ++n)
    for (int c = 0; c < s.c(); ++c)
      for (int h = 0; h < s.h(); ++h)
        for (int w = 0; w < s.w(); ++w)
          v.at(n, c, h, w) = is_anchor(h, w) ? anchor->value.at(n, c, h, w)
                                             : non_anchor->value.at(n, c, h, w);
  const bool rg = should_record({&anchor, &non_anchor});
  auto out = result(std::move(v), rg);
  if (rg) {
    record([anchor, non_anchor, out] {
      if (out->grad.empty()) return;
      const Shape& s = out->grad.shape();
      TensorT<T> ga(s), gn(s);
      for (int n = 0; n < s.n(); ++n)
        for (int c = 0; c < s.c(); ++c)
          for (int h = 0; h < s.h(); ++h)
            for (int w = 0; w < s.w(); ++w)
              (is_anchor(h, w) ? ga : gn).at(n, c, h, w) = out->grad.at(n, c, h, w);
      accumulate(anchor, ga);
      accumulate(non_anchor, gn);
    });
  }
  return out;
}

template <typename T>
Var<T> Graph<T>::anchor_only(const Var<T>& x) {
  const Shape& s = x->value.shape();
  TensorT<T> v = x->value;
  for (int n = 0; n < s.n(); ++n)
    for (int c = 0; c < s.c(); ++c)
      for (int h = 0; h < s.h(); ++h)
        for (int w = 0; w < s.w(); ++w)
          if (!is_anchor(h, w)) v.at(n, c, h, w) = T(0);
  const bool rg = should_record({&x});
  auto out = result(std::move(v), rg);
  if (rg) {
    record([x, out] {
      if (out->grad.empty()) return;
      const Shape& s = out->grad.shape();
      TensorT<T> g = out->grad;
      for (int n = 0; n < s.n(); ++n)
        for (int c = 0; c < s.c(); ++c)
          for (int h = 0; h < s.h(); ++h)
            for (int w = 0; w < s.w(); ++w)
              if (!is_anchor(h, w)) g.at(n, c, h, w) = T(0);
      accumulate(x, g);
    });
  }
  return out;
}

template <typename T>
Var<T> Graph<T>::ste_quantize(const Var<T>& x, const Var<T>& steps) {
  using A = Acc<T>;
  const Shape& s = x->value.shape();
  if (static_cast<int>(steps->value.size()) != s.c()) {
    throw DimensionError("ste_quantize: steps length != channels");
  }
  TensorT<T> v = x->value;
  for (int n = 0; n < s.n(); ++n)
    for (int c = 0; c < s.c(); ++c) {
      const T st = steps->value[c];
      for (int h = 0; h < s.h(); ++h)
        for (int w = 0; w < s.w(); ++w) {
          T& e = v.at(n, c, h, w);
          e = static_cast<T>(std::round(static_cast<A>(e) / st)) * st;
        }
    }
  const bool rg = should_record({&x});
  auto out = result(std::move(v), rg);
  if (rg) {
    record([x, out] {
      if (out->grad.empty()) return;
      accumulate(x, out->grad);
    });
  }
  return out;
}

template <typename T>
Var<T> Graph<T>::sum(const Var<T>& x) {
  using A = Acc<T>;
  A acc = 0.0;
  for (T e : x->value.values()) acc += static_cast<A>(e);
  const bool rg = should_record({&x});
  auto out = result(TensorT<T>(Shape(1, 1, 1, 1), static_cast<T>(acc)), rg);
  if (rg) {
    record([x, out] {
      if (out->grad.empty()) return;
      TensorT<T> g(x->value.shape(), out->grad[0]);
      accumulate(x, g);
    });
  }
  return out;
}

template <typename T>
Var<T> Graph<T>::mse(const Var<T>& a, const Var<T>& b) {
  using A = Acc<T>;
  require_same_shape(a->value.shape(), b->value.shape(), "mse");
  A acc = 0.0;
  const std::size_t n = a->value.size();
  for (std::size_t i = 0; i < n; ++i) {
    const A d = static_cast<A>(a->value[i]) - static_cast<A>(b->value[i]);
    acc += d * d;
  }
  const bool rg = should_record({&a, &b});
  auto out = result(TensorT<T>(Shape(1, 1, 1, 1), static_cast<T>(acc / static_cast<A>(n))), rg);
  if (rg) {
    record([a, b, out, n] {
      if (out->grad.empty()) return;
      const T k = T(2) * out->grad[0] / static_cast<T>(n);
      TensorT<T> ga(a->value.shape()), gb(b->value.shape());
      for (std::size_t i = 0; i < n; ++i) {
        const T d = a->value[i] - b->value[i];
        ga[i] = k * d;
        gb[i] = -k * d;
      }
      accumulate(a, ga);
      accumulate(b, gb);
    });
  }
  return out;
}

template <typename T>
Var<T> Graph<T>::quant_steps(const Var<T>& log_global, int rate_index, const Var<T>& log_channel) {
  if (rate_index < 0 || rate_index >= static_cast<int>(log_global->value.size())) {
    throw ValidationError("rate_index " + std::to_string(rate_index) + " outside [0," +
                          std::to_string(log_global->value.size()) + ")");
  }
  const int c = static_cast<int>(log_channel->value.size());
  TensorT<T> v(Shape(1, c, 1, 1));
  for (int i = 0; i < c; ++i) v[i] = std::exp(log_global->value[rate_index] + log_channel->value[i]);
  const bool rg = should_record({&log_global, &log_channel});
  auto out = result(std::move(v), rg);
  if (rg) {
    record([log_global, log_channel, out, rate_index, c] {
      if (out->grad.empty()) return;
      TensorT<T> gg(log_global->value.shape());
      TensorT<T> gc(log_channel->value.shape());
      for (int i = 0; i < c; ++i) {
        const T d = out->grad[i] * out->value[i];
        gc[i] = d;
        gg[rate_index] += d;
      }
      accumulate(log_global, gg);
      accumulate(log_channel, gc);
    });
  }
  return out;
}

template <typename T>
Var<T> Graph<T>::gaussian_rate(const Var<T>& y, const Var<T>& mean, const Var<T>& scale,
                               const Var<T>& steps) {
  using A = Acc<T>;
  const Shape& s = y->value.shape();
  require_same_shape(s, mean->value.shape(), "gaussian_rate mean");
  require_same_shape(s, scale->value.shape(), "gaussian_rate scale");
  if (static_cast<int>(steps->value.size()) != s.c()) {
    throw DimensionError("gaussian_rate: steps length != channels");
  }
  const A inv_ln2 = A(1) / std::numbers::ln2_v<A>;
  const std::size_t plane = static_cast<std::size_t>(s.h()) * s.w();
  A bits = 0.0;
  for (int n = 0; n < s.n(); ++n)
    for (int c = 0; c < s.c(); ++c) {
      const A st = steps->value[c];
      const std::size_t off = (static_cast<std::size_t>(n) * s.c() + c) * plane;
      for (std::size_t i = 0; i < plane; ++i) {
        const A p = gaussian_bin_mass<A>(y->value[off + i], mean->value[off + i],
                                           scale->value[off + i], st);
        bits -= std::log(std::max(p, A(kLikelihoodFloor))) * inv_ln2;
      }
    }
  const bool rg = should_record({&y, &mean, &scale, &steps});
  auto out = result(TensorT<T>(Shape(1, 1, 1, 1), static_cast<T>(bits)), rg);
  if (rg) {
    record([y, mean, scale, steps, out, plane, inv_ln2] {
      if (out->grad.empty()) return;
      const Shape& s = y->value.shape();
      const A up = out->grad[0];
      TensorT<T> gy(s), gm(s), gs(s), gst(steps->value.shape());
      for (int n = 0; n < s.n(); ++n)
        for (int c = 0; c < s.c(); ++c) {
          const A st = steps->value[c];
          const std::size_t off = (static_cast<std::size_t>(n) * s.c() + c) * plane;
          A acc_st = 0.0;
          for (std::size_t i = 0; i < plane; ++i) {
            const auto d = gaussian_bin_mass_grad<A>(y->value[off + i], mean->value[off + i],
                                                  scale->value[off + i], st);
            if (d.mass < kLikelihoodFloor) continue;
            const A k = -up * inv_ln2 / d.mass;  // d(-log2 p)/dp
            gy[off + i] = static_cast<T>(k * d.d_y);
            gm[off + i] = static_cast<T>(-k * d.d_y);
            gs[off + i] = static_cast<T>(k * d.d_scale);
            acc_st += k * d.d_step;
          }
          gst[c] = static_cast<T>(acc_st);
        }
      accumulate(y, gy);
      accumulate(mean, gm);
      accumulate(scale, gs);
      accumulate(steps, gst);
    });
  }
  return out;
}

namespace {

TensorD tape_gradient(const std::function<Var<double>(Graph<double>&, const Var<double>&)>& f,
                      const TensorD& theta) {
  Graph<double> g(true);
  auto th = make_var(theta, true);
  auto loss = f(g, th);
  if (!std::isfinite(loss->value[0])) throw std::runtime_error("finite_diff_check: non-finite f");
  g.backward(loss);
  return th->grad.empty() ? TensorD(theta.shape()) : th->grad;
}

// Shared central-difference loop; `eval` returns f at a perturbed theta.
template <typename R, typename Eval>
double central_difference_error(const TensorD& grad, const TensorT<R>& theta, R h,
                                std::span<const std::size_t> coords, Eval eval) {
  std::vector<std::size_t> all;
  if (coords.empty()) {
    all.resize(theta.size());
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
    coords = all;
  }
  double worst = 0.0;
  TensorT<R> p = theta;
  for (std::size_t i : coords) {
    if (i >= theta.size()) throw std::out_of_range("finite_diff_check: coordinate out of range");
    p[i] = theta[i] + h;
    const R fp = eval(p);
    p[i] = theta[i] - h;
    const R fm = eval(p);
    p[i] = theta[i];
    if (!std::isfinite(static_cast<double>(fp)) || !std::isfinite(static_cast<double>(fm))) {
      throw std::runtime_error("finite_diff_check: non-finite f at coordinate " + std::to_string(i));
    }
    const double fd = static_cast<double>((fp - fm) / (R(2) * h));
    worst = std::max(worst, std::abs(grad[i] - fd) / std::max(1e-8, std::abs(fd)));
  }
  return worst;
}

}  // namespace

double finite_diff_check(
    const std::function<Var<double>(Graph<double>&, const Var<double>&)>& f, const TensorD& theta,
    double h, std::span<const std::size_t> coords) {
  const TensorD grad = tape_gradient(f, theta);
  return central_difference_error<double>(grad, theta, h, coords, [&](const TensorD& p) {
    Graph<double> g(false);
    return f(g, make_var(p))->value[0];
  });
}

double finite_diff_check(
    const std::function<Var<double>(Graph<double>&, const Var<double>&)>& f,
    const std::function<Var<long double>(Graph<long double>&, const Var<long double>&)>& f_ext,
    const TensorD& theta, double h, std::span<const std::size_t> coords) {
  const TensorD grad = tape_gradient(f, theta);
  return central_difference_error<long double>(grad, theta.cast<long double>(), h, coords,
                                               [&](const TensorT<long double>& p) {
                                                 Graph<long double> g(false);
                                                 return f_ext(g, make_var(p))->value[0];
                                               });
}

template class Graph<float>;
template class Graph<double>;
template class Graph<long double>;
template TensorT<float> conv2d_forward(const TensorT<float>&, const TensorT<float>&,
                                       const TensorT<float>&, ConvSpec);
template TensorT<double> conv2d_forward(const TensorT<double>&, const TensorT<double>&,
                                        const TensorT<double>&, ConvSpec);
template ConvGrads<float> conv2d_backward(const TensorT<float>&, const TensorT<float>&,
                                          const TensorT<float>&, ConvSpec);
template ConvGrads<double> conv2d_backward(const TensorT<double>&, const TensorT<double>&,
                                           const TensorT<double>&, ConvSpec);
template TensorT<float> pixel_shuffle(const TensorT<float>&, int);
template TensorT<double> pixel_shuffle(const TensorT<double>&, int);
template TensorT<float> space_to_depth(const TensorT<float>&, int);
template TensorT<double> space_to_depth(const TensorT<double>&, int);
template TensorT<long double> conv2d_forward(const TensorT<long double>&, const TensorT<long double>&,
                                             const TensorT<long double>&, ConvSpec);
template ConvGrads<long double> conv2d_backward(const TensorT<long double>&, const TensorT<long double>&,
                                                const TensorT<long double>&, ConvSpec);
template TensorT<long double> pixel_shuffle(const TensorT<long double>&, int);
template TensorT<long double> space_to_depth(const TensorT<long double>&, int);

}  // namespace evc
