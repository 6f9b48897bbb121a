#include "evc/factorized_prior.hpp"

#include <array>
#include <cmath>

#include "evc/numeric.hpp"

namespace evc {
namespace {

constexpr std::array<int, 5> kDims{1, 3, 3, 3, 1};
constexpr std::array<int, 4> kMatrixOffset{0, 3, 12, 21};
constexpr std::array<int, 4> kBiasOffset{0, 3, 6, 9};
constexpr std::array<int, 3> kFactorOffset{0, 3, 6};

template <typename R>
R softplus(R x) { return x > R(30) ? x : std::log1p(std::exp(x)); }
template <typename R>
R sigmoid(R x) { return R(1) / (R(1) + std::exp(-x)); }

template <typename R>
struct Trace {
  std::array<std::array<R, 3>, 5> h{};  // stage inputs; h[4][0] is the logit
  std::array<std::array<R, 3>, 4> v{};  // pre-nonlinearity
};

// Parameters are copied to the accumulation type once per op so float and
// double priors share one evaluation path.
template <typename R>
struct ChannelParams {
  std::array<R, 24> m;
  std::array<R, 10> b;
  std::array<R, 9> a;
  std::array<R, 24> sp;  // softplus(m)
  std::array<R, 9> ta;   // tanh(a)
};

template <typename R, typename T>
ChannelParams<R> load(const FactorizedPrior<T>& p, int c) {
  ChannelParams<R> cp{};
  for (int i = 0; i < 24; ++i) {
    cp.m[i] = p.matrices->value[c * 24 + i];
    cp.sp[i] = softplus(cp.m[i]);
  }
  for (int i = 0; i < 10; ++i) cp.b[i] = p.biases->value[c * 10 + i];
  for (int i = 0; i < 9; ++i) {
    cp.a[i] = p.factors->value[c * 9 + i];
    cp.ta[i] = std::tanh(cp.a[i]);
  }
  return cp;
}

template <typename R>
R forward(const ChannelParams<R>& cp, R x, Trace<R>& tr) {
  tr.h[0][0] = x;
  for (int k = 0; k < 4; ++k) {
    const int out = kDims[k + 1], in = kDims[k];
    for (int i = 0; i < out; ++i) {
      R acc = cp.b[kBiasOffset[k] + i];
      for (int j = 0; j < in; ++j) acc += cp.sp[kMatrixOffset[k] + i * in + j] * tr.h[k][j];
      tr.v[k][i] = acc;
      tr.h[k + 1][i] = k < 3 ? acc + cp.ta[kFactorOffset[k] + i] * std::tanh(acc) : acc;
    }
  }
  return tr.h[4][0];
}

template <typename R>
struct ParamGrads {
  std::array<R, 24> m{};
  std::array<R, 10> b{};
  std::array<R, 9> a{};
};

// Accumulates d(out)/d(params) * g into pg and returns d(out)/dx * g.
template <typename R>
R backward(const ChannelParams<R>& cp, const Trace<R>& tr, R g, ParamGrads<R>& pg) {
  std::array<R, 3> gh{g, 0, 0};
  for (int k = 3; k >= 0; --k) {
    const int out = kDims[k + 1], in = kDims[k];
    std::array<R, 3> gv{};
    for (int i = 0; i < out; ++i) {
      if (k < 3) {
        const R th = std::tanh(tr.v[k][i]);
        const R t = cp.ta[kFactorOffset[k] + i];
        gv[i] = gh[i] * (R(1) + t * (R(1) - th * th));
        pg.a[kFactorOffset[k] + i] += gh[i] * th * (R(1) - t * t);
      } else {
        gv[i] = gh[i];
      }
    }
    std::array<R, 3> gin{};
    for (int i = 0; i < out; ++i) {
      pg.b[kBiasOffset[k] + i] += gv[i];
      for (int j = 0; j < in; ++j) {
        const int idx = kMatrixOffset[k] + i * in + j;
        pg.m[idx] += gv[i] * tr.h[k][j] * sigmoid(cp.m[idx]);
        gin[j] += gv[i] * cp.sp[idx];
      }
    }
    gh = gin;
  }
  return gh[0];
}

template <typename R>
struct Likelihood {
  R p;
  R dp_dupper;
  R dp_dlower;
};

template <typename R>
Likelihood<R> bin_likelihood(R upper, R lower) {
  // Evaluate on the side where both sigmoids are away from 1.
  const R s = (upper + lower) > R(0) ? R(-1) : R(1);
  const R p = std::abs(sigmoid(s * upper) - sigmoid(s * lower));
  const R su = sigmoid(upper), sl = sigmoid(lower);
  return {p, su * (R(1) - su), -sl * (R(1) - sl)};
}

}  // namespace

template <typename T>
FactorizedPrior<T>::FactorizedPrior(int channels, std::mt19937_64& rng) {
  if (channels <= 0) throw ValidationError("FactorizedPrior: channels must be positive");
  const double init_scale = std::pow(10.0, 1.0 / (kStages + 1));
  TensorT<T> m(Shape(channels, kMatrixParams, 1, 1));
  TensorT<T> b(Shape(channels, kBiasParams, 1, 1));
  TensorT<T> a(Shape(channels, kFactorParams, 1, 1));
  std::uniform_real_distribution<double> u(-0.5, 0.5);
  for (int c = 0; c < channels; ++c) {
    for (int k = 0; k < kStages; ++k) {
      const double init = std::log(std::expm1(1.0 / init_scale / kDims[k + 1]));
      for (int i = 0; i < kDims[k + 1] * kDims[k]; ++i) {
        m[c * kMatrixParams + kMatrixOffset[k] + i] = static_cast<T>(init);
      }
      for (int i = 0; i < kDims[k + 1]; ++i) {
        b[c * kBiasParams + kBiasOffset[k] + i] = static_cast<T>(u(rng));
      }
    }
  }
  matrices = make_var(std::move(m), true);
  biases = make_var(std::move(b), true);
  factors = make_var(std::move(a), true);
}

template <typename T>
double FactorizedPrior<T>::logit(int c, double x) const {
  Trace<double> tr;
  return forward(load<double>(*this, c), x, tr);
}

template <typename T>
double FactorizedPrior<T>::cdf(int c, double x) const {
  return sigmoid(logit(c, x));
}

template <typename T>
Var<T> FactorizedPrior<T>::rate(Graph<T>& g, const Var<T>& z) const {
  using A = Acc<T>;
  const Shape& s = z->value.shape();
  const int nch = channels();
  if (s.c() != nch) {
    throw DimensionError("FactorizedPrior::rate: z has " + std::to_string(s.c()) +
                         " channels, prior " + std::to_string(nch));
  }
  const std::size_t plane = static_cast<std::size_t>(s.h()) * s.w();
  A bits = 0.0;
  std::vector<ChannelParams<A>> params;
  params.reserve(nch);
  for (int c = 0; c < nch; ++c) params.push_back(load<A>(*this, c));
  for (int n = 0; n < s.n(); ++n)
    for (int c = 0; c < nch; ++c)
      for (std::size_t i = 0; i < plane; ++i) {
        const A x = z->value[(static_cast<std::size_t>(n) * nch + c) * plane + i];
        Trace<A> tu, tl;
        const auto l = bin_likelihood(forward(params[c], x + A(0.5), tu), forward(params[c], x - A(0.5), tl));
        bits -= std::log2(std::max(l.p, A(kLikelihoodFloor)));
      }
  const bool rg = g.should_record({&z, &matrices, &biases, &factors});
  auto out = make_var(TensorT<T>(Shape(1, 1, 1, 1), static_cast<T>(bits)), rg);
  if (rg) {
    const Var<T> zm = z, mm = matrices, bm = biases, fm = factors;
    const int channels = nch;
    g.record([zm, mm, bm, fm, out, params, plane, channels] {
      if (out->grad.empty()) return;
      const Shape& s = zm->value.shape();
      const A up = out->grad[0];
      TensorT<T> gz(s);
      TensorT<T> gm(mm->value.shape()), gb(bm->value.shape()), ga(fm->value.shape());
      for (int c = 0; c < channels; ++c) {
        ParamGrads<A> pg;
        for (int n = 0; n < s.n(); ++n)
          for (std::size_t i = 0; i < plane; ++i) {
            const std::size_t idx = (static_cast<std::size_t>(n) * channels + c) * plane + i;
            const A x = zm->value[idx];
            Trace<A> tu, tl;
            const auto l = bin_likelihood(forward(params[c], x + A(0.5), tu),
                                          forward(params[c], x - A(0.5), tl));
            if (l.p < kLikelihoodFloor) continue;
            const A k = -up / (l.p * std::numbers::ln2_v<A>);
            A dx = backward(params[c], tu, k * l.dp_dupper, pg);
            dx += backward(params[c], tl, k * l.dp_dlower, pg);
            gz[idx] = static_cast<T>(dx);
          }
        for (int i = 0; i < 24; ++i) gm[c * 24 + i] = static_cast<T>(pg.m[i]);
        for (int i = 0; i < 10; ++i) gb[c * 10 + i] = static_cast<T>(pg.b[i]);
        for (int i = 0; i < 9; ++i) ga[c * 9 + i] = static_cast<T>(pg.a[i]);
      }
      auto acc = [](const Var<T>& v, const TensorT<T>& gr) {
        if (!v->requires_grad) return;
        auto& buf = v->grad_buffer();
        for (std::size_t i = 0; i < buf.size(); ++i) buf[i] += gr[i];
      };
      acc(zm, gz);
      acc(mm, gm);
      acc(bm, gb);
      acc(fm, ga);
    });
  }
  return out;
}

template <typename T>
DiscreteCDF FactorizedPrior<T>::table(int c) const {
  const auto cp = load<double>(*this, c);
  std::vector<double> p;
  p.reserve(2 * kHalfWidth + 2);
  Trace<double> tr;
  double prev_logit = forward(cp, -kHalfWidth - 0.5, tr);
  const double below = sigmoid(prev_logit);
  for (int k = -kHalfWidth; k <= kHalfWidth; ++k) {
    const double next_logit = forward(cp, k + 0.5, tr);
    p.push_back(bin_likelihood(next_logit, prev_logit).p);
    prev_logit = next_logit;
  }
  const double above = sigmoid(-prev_logit);
  p.push_back(below + above);
  return make_cdf(-kHalfWidth, p, true);
}

template <typename T>
template <typename U>
FactorizedPrior<U> FactorizedPrior<T>::cast() const {
  FactorizedPrior<U> out;
  out.matrices = make_var(matrices->value.template cast<U>(), matrices->requires_grad);
  out.biases = make_var(biases->value.template cast<U>(), biases->requires_grad);
  out.factors = make_var(factors->value.template cast<U>(), factors->requires_grad);
  return out;
}

template <typename T>
std::vector<std::uint8_t> encode_hyper_latent(const FactorizedPrior<T>& prior,
                                              const std::vector<std::int32_t>& symbols, int channels,
                                              int plane) {
  RangeEncoder enc;
  for (int c = 0; c < channels; ++c) {
    const auto t = prior.table(c);
    for (int i = 0; i < plane; ++i) encode_symbol(enc, t, symbols[static_cast<std::size_t>(c) * plane + i]);
  }
  return enc.finish();
}

template <typename T>
std::vector<std::int32_t> decode_hyper_latent(const FactorizedPrior<T>& prior,
                                              std::span<const std::uint8_t> bytes, int channels,
                                              int plane, std::size_t base_offset) {
  RangeDecoder dec(bytes, base_offset);
  std::vector<std::int32_t> out(static_cast<std::size_t>(channels) * plane);
  for (int c = 0; c < channels; ++c) {
    const auto t = prior.table(c);
    for (int i = 0; i < plane; ++i) out[static_cast<std::size_t>(c) * plane + i] = decode_symbol(dec, t);
  }
  return out;
}

template class FactorizedPrior<float>;
template class FactorizedPrior<double>;
template class FactorizedPrior<long double>;
template FactorizedPrior<long double> FactorizedPrior<double>::cast<long double>() const;
template FactorizedPrior<long double> FactorizedPrior<long double>::cast<long double>() const;
template FactorizedPrior<double> FactorizedPrior<float>::cast<double>() const;
template FactorizedPrior<float> FactorizedPrior<double>::cast<float>() const;
template FactorizedPrior<float> FactorizedPrior<float>::cast<float>() const;
template FactorizedPrior<double> FactorizedPrior<double>::cast<double>() const;
template std::vector<std::uint8_t> encode_hyper_latent(const FactorizedPrior<float>&,
                                                       const std::vector<std::int32_t>&, int, int);
template std::vector<std::uint8_t> encode_hyper_latent(const FactorizedPrior<double>&,
                                                       const std::vector<std::int32_t>&, int, int);
template std::vector<std::int32_t> decode_hyper_latent(const FactorizedPrior<float>&,
                                                       std::span<const std::uint8_t>, int, int,
                                                       std::size_t);
template std::vector<std::int32_t> decode_hyper_latent(const FactorizedPrior<double>&,
                                                       std::span<const std::uint8_t>, int, int,
                                                       std::size_t);

}  // namespace evc
