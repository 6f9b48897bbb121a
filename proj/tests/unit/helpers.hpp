#pragma once

#include <random>

#include "evc/autograd.hpp"
#include "evc/codec_model.hpp"

namespace evc::test {

template <typename T>
TensorT<T> random_tensor(Shape s, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  TensorT<T> t(s);
  for (auto& v : t.values()) v = static_cast<T>(u(rng));
  return t;
}

/// Four-stage desk model, the smallest the codec supports at 64x64.
inline ModelConfig tiny_config() {
  ModelConfig c = ModelConfig::desk(ChannelScheme::small(), ChannelScheme::small(), 16);
  return c;
}

inline ModelConfig one_stage_config() {
  ModelConfig c;
  c.num_stages = 1;
  c.encoder = {{4, 4, 4, 4}};
  c.decoder = {{4, 4, 4, 4}};
  c.latent_channels = 4;
  c.hyper_channels = 3;
  return c;
}

}  // namespace evc::test
