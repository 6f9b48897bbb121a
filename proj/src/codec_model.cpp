#include "evc/codec_model.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <iomanip>
#include <sstream>

namespace evc {

ChannelScheme ChannelScheme::named(const std::string& name) {
  std::string k = name;
  std::transform(k.begin(), k.end(), k.begin(), [](unsigned char ch) { return std::tolower(ch); });
  if (k == "small" || k == "s") return small();
  if (k == "medium" || k == "m") return medium();
  if (k == "large" || k == "l") return large();
  throw ValidationError("unknown channel scheme '" + name + "' (expected small, medium or large)");
}

ChannelScheme ChannelScheme::scaled(int divisor) const {
  if (divisor < 1) throw ValidationError("scheme divisor must be >= 1");
  ChannelScheme s;
  for (int i = 0; i < 4; ++i) s.widths[i] = std::max(1, (widths[i] + divisor - 1) / divisor);
  return s;
}

bool ChannelScheme::fits_within(const ChannelScheme& teacher) const {
  for (int i = 0; i < 4; ++i) {
    if (widths[i] > teacher.widths[i]) return false;
  }
  return true;
}

std::string ChannelScheme::str() const {
  return "[" + std::to_string(widths[0]) + "," + std::to_string(widths[1]) + "," +
         std::to_string(widths[2]) + "," + std::to_string(widths[3]) + "]";
}

ModelConfig ModelConfig::desk(const ChannelScheme& enc, const ChannelScheme& dec, int divisor) {
  ModelConfig c;
  c.encoder = enc.scaled(divisor);
  c.decoder = dec.scaled(divisor);
  c.latent_channels = std::max(1, 192 / divisor);
  c.hyper_channels = std::max(1, 128 / divisor);
  return c;
}

int ModelConfig::stage_width(bool decoder_side, int stage) const {
  return decoder_side ? decoder.widths[num_stages - 1 - stage] : encoder.widths[stage];
}

void ModelConfig::validate() const {
  if (num_stages < 1 || num_stages > 4) throw ValidationError("num_stages must be in [1,4]");
  if (latent_channels < 1 || hyper_channels < 1) {
    throw ValidationError("latent and hyper channel counts must be positive");
  }
  if (rate_count < 1 || rate_count > 255) throw ValidationError("rate_count must be in [1,255]");
  for (int i = 0; i < 4; ++i) {
    if (encoder.widths[i] < 1 || decoder.widths[i] < 1) {
      throw ValidationError("channel scheme widths must be positive");
    }
  }
  if (!(negative_slope > 0.0 && negative_slope < 1.0)) {
    throw ValidationError("negative_slope must be in (0,1)");
  }
}

const char* mask_site_name(MaskSite s) {
  switch (s) {
    case MaskSite::kResidualInner: return "residual_inner";
    case MaskSite::kStageOutput: return "stage_output";
    case MaskSite::kDepthInner: return "depth_inner";
    case MaskSite::kDepthExpand: return "depth_expand";
  }
  return "?";
}

template <typename T>
std::string MaskLayer<T>::label(bool decoder) const {
  return std::string(decoder ? "decoder" : "encoder") + ".stage" + std::to_string(stage) + "." +
         mask_site_name(site);
}

template <typename T>
ConvLayer<T>::ConvLayer(int cin, int cout, int k, ConvSpec s, std::mt19937_64& rng, int shuffle_factor)
    : spec(s), shuffle(shuffle_factor) {
  if (cin % s.groups != 0 || cout % s.groups != 0) {
    throw DimensionError("ConvLayer: channels not divisible by groups");
  }
  const int cin_g = cin / s.groups;
  const double bound = 1.0 / std::sqrt(static_cast<double>(cin_g * k * k));
  std::uniform_real_distribution<double> u(-bound, bound);
  TensorT<T> w(Shape(cout, cin_g, k, k));
  for (auto& e : w.values()) e = static_cast<T>(u(rng));
  TensorT<T> b(Shape(1, cout, 1, 1));
  for (auto& e : b.values()) e = static_cast<T>(u(rng));
  weight = make_var(std::move(w), true);
  bias = make_var(std::move(b), true);
}

template <typename T>
Var<T> ConvLayer<T>::forward(Graph<T>& g, const Var<T>& x) const {
  auto y = g.conv2d(x, weight, bias, spec);
  return shuffle > 1 ? g.pixel_shuffle(y, shuffle) : y;
}

template <typename T>
Var<T> Network<T>::forward(Graph<T>& g, const Var<T>& input) const {
  const T slope = static_cast<T>(negative_slope);
  auto masked = [&](Var<T> v, int idx) { return idx >= 0 ? g.channel_scale(v, masks[idx].m) : v; };
  Var<T> x = input;
  for (const auto& st : stages) {
    const auto& r = st.res;
    auto a = g.leaky_relu(masked(r.conv1.forward(g, x), r.inner_mask), slope);
    auto sum = g.add(r.conv2.forward(g, a), r.conv3.forward(g, x));
    x = masked(sum, r.out_mask);

    const auto& d = st.dc;
    auto b = g.leaky_relu(masked(d.conv1.forward(g, x), d.inner_mask), slope);
    auto e = g.leaky_relu(masked(d.conv3.forward(g, d.dw.forward(g, b)), d.expand_mask), slope);
    x = g.add(x, masked(d.conv4.forward(g, e), d.out_mask));
  }
  return head.forward(g, x);
}

template <typename T>
ChannelScheme Network<T>::scheme() const {
  ChannelScheme s{{0, 0, 0, 0}};
  const int n = static_cast<int>(stages.size());
  for (int i = 0; i < n; ++i) {
    const int w = stages[i].dc.conv1.out_channels();
    s.widths[decoder ? n - 1 - i : i] = w;
  }
  return s;
}

template <typename T>
std::vector<Var<T>> Network<T>::params() const {
  std::vector<Var<T>> out;
  auto add = [&](const ConvLayer<T>& c) {
    out.push_back(c.weight);
    out.push_back(c.bias);
  };
  for (const auto& st : stages) {
    add(st.res.conv1);
    add(st.res.conv2);
    add(st.res.conv3);
    add(st.dc.conv1);
    add(st.dc.dw);
    add(st.dc.conv3);
    add(st.dc.conv4);
  }
  add(head);
  return out;
}

template <typename T>
std::vector<Var<T>> Network<T>::mask_params() const {
  std::vector<Var<T>> out;
  for (const auto& m : masks) out.push_back(m.m);
  return out;
}

template <typename T>
std::size_t Network<T>::param_count() const {
  std::size_t n = 0;
  for (const auto& p : params()) n += p->value.size();
  return n;
}

namespace {

template <typename U, typename T>
Var<U> cast_var(const Var<T>& v) {
  if (!v) return nullptr;
  return make_var(v->value.template cast<U>(), v->requires_grad);
}

template <typename U, typename T>
ConvLayer<U> cast_conv(const ConvLayer<T>& c) {
  ConvLayer<U> o;
  o.weight = cast_var<U>(c.weight);
  o.bias = cast_var<U>(c.bias);
  o.spec = c.spec;
  o.shuffle = c.shuffle;
  return o;
}

}  // namespace

template <typename T>
template <typename U>
Network<U> Network<T>::cast() const {
  Network<U> o;
  o.decoder = decoder;
  o.negative_slope = negative_slope;
  for (const auto& st : stages) {
    Stage<U> s;
    s.res.conv1 = cast_conv<U>(st.res.conv1);
    s.res.conv2 = cast_conv<U>(st.res.conv2);
    s.res.conv3 = cast_conv<U>(st.res.conv3);
    s.res.inner_mask = st.res.inner_mask;
    s.res.out_mask = st.res.out_mask;
    s.dc.conv1 = cast_conv<U>(st.dc.conv1);
    s.dc.dw = cast_conv<U>(st.dc.dw);
    s.dc.conv3 = cast_conv<U>(st.dc.conv3);
    s.dc.conv4 = cast_conv<U>(st.dc.conv4);
    s.dc.inner_mask = st.dc.inner_mask;
    s.dc.expand_mask = st.dc.expand_mask;
    s.dc.out_mask = st.dc.out_mask;
    o.stages.push_back(std::move(s));
  }
  o.head = cast_conv<U>(head);
  for (const auto& m : masks) {
    MaskLayer<U> mm;
    mm.m = cast_var<U>(m.m);
    mm.target = m.target;
    mm.frozen = m.frozen;
    mm.stage = m.stage;
    mm.site = m.site;
    mm.avoid = m.avoid;
    mm.freeze_iteration = m.freeze_iteration;
    mm.survivors = m.survivors;
    o.masks.push_back(std::move(mm));
  }
  return o;
}

namespace {

template <typename T>
DepthConvBlock<T> make_depth_block(int w, std::mt19937_64& rng) {
  DepthConvBlock<T> d;
  d.conv1 = ConvLayer<T>(w, w, 1, {1, 0, 1}, rng);
  d.dw = ConvLayer<T>(w, w, 3, {1, 1, w}, rng);
  d.conv3 = ConvLayer<T>(w, 4 * w, 1, {1, 0, 1}, rng);
  d.conv4 = ConvLayer<T>(4 * w, w, 1, {1, 0, 1}, rng);
  return d;
}

}  // namespace

template <typename T>
Network<T> build_encoder(const ModelConfig& cfg, const ChannelScheme& scheme, std::mt19937_64& rng) {
  cfg.validate();
  Network<T> net;
  net.decoder = false;
  net.negative_slope = cfg.negative_slope;
  int in = 3;
  for (int i = 0; i < cfg.num_stages; ++i) {
    const int w = scheme.widths[i];
    if (w < 1) throw ValidationError("encoder width must be positive");
    Stage<T> st;
    st.res.conv1 = ConvLayer<T>(in, w, 3, {2, 1, 1}, rng);
    st.res.conv2 = ConvLayer<T>(w, w, 3, {1, 1, 1}, rng);
    st.res.conv3 = ConvLayer<T>(in, w, 1, {2, 0, 1}, rng);
    st.dc = make_depth_block<T>(w, rng);
    net.stages.push_back(std::move(st));
    in = w;
  }
  net.head = ConvLayer<T>(in, cfg.latent_channels, 3, {1, 1, 1}, rng);
  return net;
}

template <typename T>
Network<T> build_decoder(const ModelConfig& cfg, const ChannelScheme& scheme, std::mt19937_64& rng) {
  cfg.validate();
  Network<T> net;
  net.decoder = true;
  net.negative_slope = cfg.negative_slope;
  int in = cfg.latent_channels;
  for (int i = 0; i < cfg.num_stages; ++i) {
    const int w = scheme.widths[cfg.num_stages - 1 - i];
    if (w < 1) throw ValidationError("decoder width must be positive");
    Stage<T> st;
    st.res.conv1 = ConvLayer<T>(in, w, 3, {1, 1, 1}, rng);
    st.res.conv2 = ConvLayer<T>(w, 4 * w, 3, {1, 1, 1}, rng, 2);
    st.res.conv3 = ConvLayer<T>(in, 4 * w, 1, {1, 0, 1}, rng, 2);
    st.dc = make_depth_block<T>(w, rng);
    net.stages.push_back(std::move(st));
    in = w;
  }
  net.head = ConvLayer<T>(in, 3, 3, {1, 1, 1}, rng);
  return net;
}

template <typename T>
Var<T> HyperEncoder<T>::forward(Graph<T>& g, const Var<T>& y, double slope) const {
  const T s = static_cast<T>(slope);
  auto h = g.leaky_relu(a.forward(g, y), s);
  h = g.leaky_relu(b.forward(g, h), s);
  return c.forward(g, h);
}

template <typename T>
Var<T> HyperDecoder<T>::forward(Graph<T>& g, const Var<T>& z, double slope) const {
  const T s = static_cast<T>(slope);
  auto h = g.leaky_relu(a.forward(g, z), s);
  h = g.leaky_relu(b.forward(g, h), s);
  return c.forward(g, h);
}

template <typename T>
Var<T> FusionNet<T>::forward(Graph<T>& g, const Var<T>& hyper, const Var<T>& y1_placed,
                             double slope) const {
  auto h = g.leaky_relu(a.forward(g, g.concat_channels(hyper, y1_placed)), static_cast<T>(slope));
  return b.forward(g, h);
}

template <typename T>
double QuantSteps<T>::global(int rate) const {
  return std::exp(static_cast<double>(log_global->value[rate]));
}

template <typename T>
std::vector<double> QuantSteps<T>::steps(int rate) const {
  if (rate < 0 || rate >= static_cast<int>(log_global->value.size())) {
    throw ValidationError("rate_index " + std::to_string(rate) + " outside [0," +
                          std::to_string(log_global->value.size()) + ")");
  }
  // Same float arithmetic as Graph::quant_steps so train/eval steps agree.
  std::vector<double> s(log_channel->value.size());
  for (std::size_t c = 0; c < s.size(); ++c) {
    s[c] = static_cast<double>(static_cast<T>(std::exp(log_global->value[rate] + log_channel->value[c])));
    if (!(s[c] > 0.0) || !std::isfinite(s[c])) throw ValidationError("non-positive quantization step");
  }
  return s;
}

template <typename T>
Var<T> QuantSteps<T>::forward(Graph<T>& g, int rate) const {
  return g.quant_steps(log_global, rate, log_channel);
}

template <typename T>
std::vector<Var<T>> CodecModel<T>::entropy_params() const {
  std::vector<Var<T>> out;
  for (const auto* c : {&hyper_encoder.a, &hyper_encoder.b, &hyper_encoder.c, &hyper_decoder.a,
                        &hyper_decoder.b, &hyper_decoder.c, &fusion.a, &fusion.b}) {
    out.push_back(c->weight);
    out.push_back(c->bias);
  }
  out.push_back(quant.log_global);
  out.push_back(quant.log_channel);
  out.push_back(prior.matrices);
  out.push_back(prior.biases);
  out.push_back(prior.factors);
  return out;
}

template <typename T>
std::vector<Var<T>> CodecModel<T>::params() const {
  auto out = encoder.params();
  for (auto& p : decoder.params()) out.push_back(p);
  for (auto& p : entropy_params()) out.push_back(p);
  return out;
}

template <typename T>
template <typename U>
CodecModel<U> CodecModel<T>::cast() const {
  CodecModel<U> o;
  o.config = config;
  o.encoder = encoder.template cast<U>();
  o.decoder = decoder.template cast<U>();
  o.hyper_encoder = {cast_conv<U>(hyper_encoder.a), cast_conv<U>(hyper_encoder.b),
                     cast_conv<U>(hyper_encoder.c)};
  o.hyper_decoder = {cast_conv<U>(hyper_decoder.a), cast_conv<U>(hyper_decoder.b),
                     cast_conv<U>(hyper_decoder.c)};
  o.fusion = {cast_conv<U>(fusion.a), cast_conv<U>(fusion.b)};
  o.quant = {cast_var<U>(quant.log_global), cast_var<U>(quant.log_channel)};
  o.prior = prior.template cast<U>();
  return o;
}

template <typename T>
CodecModel<T> build_model(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  CodecModel<T> m;
  m.config = cfg;
  m.encoder = build_encoder<T>(cfg, cfg.encoder, rng);
  m.decoder = build_decoder<T>(cfg, cfg.decoder, rng);
  const int C = cfg.latent_channels, H = cfg.hyper_channels;
  m.hyper_encoder.a = ConvLayer<T>(C, H, 3, {1, 1, 1}, rng);
  m.hyper_encoder.b = ConvLayer<T>(H, H, 3, {2, 1, 1}, rng);
  m.hyper_encoder.c = ConvLayer<T>(H, H, 3, {2, 1, 1}, rng);
  m.hyper_decoder.a = ConvLayer<T>(H, 4 * H, 3, {1, 1, 1}, rng, 2);
  m.hyper_decoder.b = ConvLayer<T>(H, 4 * H, 3, {1, 1, 1}, rng, 2);
  m.hyper_decoder.c = ConvLayer<T>(H, 2 * C, 3, {1, 1, 1}, rng);
  m.fusion.a = ConvLayer<T>(3 * C, 2 * C, 1, {1, 0, 1}, rng);
  m.fusion.b = ConvLayer<T>(2 * C, 2 * C, 1, {1, 0, 1}, rng);
  TensorT<T> lg(Shape(1, cfg.rate_count, 1, 1));
  for (int r = 0; r < cfg.rate_count; ++r) {
    // Rate 0 gets the coarsest step; each index halves the step every two indices.
    lg[r] = static_cast<T>(std::log(2.0) * (0.5 * (cfg.rate_count - 1) - r) * 0.5);
  }
  m.quant.log_global = make_var(std::move(lg), true);
  m.quant.log_channel = make_var(TensorT<T>(Shape(1, C, 1, 1)), true);
  m.prior = FactorizedPrior<T>(H, rng);
  return m;
}

template <typename T>
ParamCounts count_params(const CodecModel<T>& model) {
  ParamCounts c;
  c.encoder = model.encoder.param_count();
  c.decoder = model.decoder.param_count();
  for (const auto& p : model.entropy_params()) c.others += p->value.size();
  return c;
}

template <typename T>
std::pair<TensorT<T>, TensorT<T>> spatial_split(const TensorT<T>& y) {
  const Shape& s = y.shape();
  if (s.w() % 2 != 0) throw DimensionError("spatial_split: width must be even, got " + s.str());
  TensorT<T> a(Shape(s.n(), s.c(), s.h(), s.w() / 2));
  TensorT<T> b(Shape(s.n(), s.c(), s.h(), s.w() / 2));
  for (int n = 0; n < s.n(); ++n)
    for (int c = 0; c < s.c(); ++c)
      for (int h = 0; h < s.h(); ++h)
        for (int w = 0; w < s.w(); ++w) {
          auto& dst = ((h + w) % 2 == 0) ? a : b;
          dst.at(n, c, h, w / 2) = y.at(n, c, h, w);
        }
  return {std::move(a), std::move(b)};
}

template <typename T>
TensorT<T> spatial_merge(const TensorT<T>& y1, const TensorT<T>& y2) {
  require_same_shape(y1.shape(), y2.shape(), "spatial_merge");
  const Shape& s = y1.shape();
  TensorT<T> y(Shape(s.n(), s.c(), s.h(), s.w() * 2));
  for (int n = 0; n < s.n(); ++n)
    for (int c = 0; c < s.c(); ++c)
      for (int h = 0; h < s.h(); ++h)
        for (int w = 0; w < 2 * s.w(); ++w) {
          const auto& src = ((h + w) % 2 == 0) ? y1 : y2;
          y.at(n, c, h, w) = src.at(n, c, h, w / 2);
        }
  return y;
}

template <typename T>
void set_trainable(const std::vector<Var<T>>& params, bool trainable) {
  for (const auto& p : params) {
    p->requires_grad = trainable;
    p->zero_grad();
  }
}

template <typename T>
std::string params_digest(const std::vector<Var<T>>& params) {
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr);
  for (const auto& p : params) {
    for (T v : p->value.values()) {
      const float f = static_cast<float>(v);
      std::uint32_t bits;
      std::memcpy(&bits, &f, 4);
      const unsigned char le[4] = {static_cast<unsigned char>(bits), static_cast<unsigned char>(bits >> 8),
                                   static_cast<unsigned char>(bits >> 16),
                                   static_cast<unsigned char>(bits >> 24)};
      EVP_DigestUpdate(ctx, le, 4);
    }
  }
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_DigestFinal_ex(ctx, md, &len);
  EVP_MD_CTX_free(ctx);
  std::ostringstream os;
  for (unsigned i = 0; i < len; ++i) os << std::hex << std::setw(2) << std::setfill('0') << int(md[i]);
  return os.str();
}

#define EVC_INSTANTIATE(T)                                                                   \
  template struct MaskLayer<T>;                                                              \
  template struct ConvLayer<T>;                                                              \
  template struct Network<T>;                                                                \
  template struct HyperEncoder<T>;                                                           \
  template struct HyperDecoder<T>;                                                           \
  template struct FusionNet<T>;                                                              \
  template struct QuantSteps<T>;                                                             \
  template struct CodecModel<T>;                                                             \
  template Network<T> build_encoder<T>(const ModelConfig&, const ChannelScheme&, std::mt19937_64&); \
  template Network<T> build_decoder<T>(const ModelConfig&, const ChannelScheme&, std::mt19937_64&); \
  template CodecModel<T> build_model<T>(const ModelConfig&, std::uint64_t);                  \
  template ParamCounts count_params(const CodecModel<T>&);                                   \
  template std::pair<TensorT<T>, TensorT<T>> spatial_split(const TensorT<T>&);               \
  template TensorT<T> spatial_merge(const TensorT<T>&, const TensorT<T>&);                   \
  template void set_trainable(const std::vector<Var<T>>&, bool);                             \
  template std::string params_digest(const std::vector<Var<T>>&);

EVC_INSTANTIATE(float)
EVC_INSTANTIATE(double)
EVC_INSTANTIATE(long double)
#undef EVC_INSTANTIATE

template Network<double> Network<float>::cast<double>() const;
template Network<float> Network<double>::cast<float>() const;
template Network<float> Network<float>::cast<float>() const;
template Network<double> Network<double>::cast<double>() const;
template CodecModel<double> CodecModel<float>::cast<double>() const;
template CodecModel<float> CodecModel<double>::cast<float>() const;
template CodecModel<float> CodecModel<float>::cast<float>() const;
template CodecModel<double> CodecModel<double>::cast<double>() const;
template Network<long double> Network<double>::cast<long double>() const;
template CodecModel<long double> CodecModel<double>::cast<long double>() const;

}  // namespace evc
