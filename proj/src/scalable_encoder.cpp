#include "evc/scalable_encoder.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <limits>

#include "evc/checkpoint.hpp"
#include "evc/codec.hpp"
#include "evc/metrics.hpp"

namespace evc {

const char* regime_name(Regime r) {
  switch (r) {
    case Regime::kEndToEnd: return "end_to_end";
    case Regime::kSeparate: return "separate";
    case Regime::kOneByOne: return "one_by_one";
    case Regime::kOurs: return "ours";
  }
  return "?";
}

Regime parse_regime(const std::string& name) {
  for (Regime r : {Regime::kEndToEnd, Regime::kSeparate, Regime::kOneByOne, Regime::kOurs}) {
    if (name == regime_name(r)) return r;
  }
  throw ValidationError("unknown regime '" + name + "' (expected end_to_end, separate, one_by_one or ours)");
}

std::vector<Var<float>> EncoderBank::shared_params() const {
  auto out = shared.decoder.params();
  for (auto& p : shared.entropy_params()) out.push_back(p);
  return out;
}

EncoderBank make_bank(const CodecModel<float>& teacher) {
  if (teacher.encoder.masked() || teacher.decoder.masked()) {
    throw SequencingError("make_bank: merge the teacher's masks first");
  }
  EncoderBank bank;
  bank.shared = teacher.clone();
  set_trainable(bank.shared.params(), false);
  return bank;
}

namespace {

Tensor sample_of(const Tensor& batch, int b) {
  const Shape& s = batch.shape();
  Tensor out(Shape(1, s.c(), s.h(), s.w()));
  const std::size_t n = out.size();
  std::copy_n(batch.values().begin() + static_cast<std::ptrdiff_t>(b * n), n, out.values().begin());
  return out;
}

void require_frozen(const std::vector<Var<float>>& params, const char* what) {
  for (const auto& p : params) {
    if (p->requires_grad) throw SequencingError(std::string(what) + " must be frozen while a new encoder trains");
  }
}

std::vector<std::string> frozen_digests(const EncoderBank& bank) {
  std::vector<std::string> d{bank.shared_digest(), params_digest(bank.shared.encoder.params())};
  for (const auto& e : bank.encoders) d.push_back(params_digest(e.net.params()));
  return d;
}

// Training loss of the newest encoder: crops the current ensemble already
// codes well are down-weighted, crops where the new encoder wins are
// up-weighted; the uniform share keeps every crop in play.
LossFn residual_loss(const EncoderBank& bank, int previous, const RrlConfig& cfg) {
  return [&bank, previous, &cfg](Graph<float>& g, const Network<float>& enc, const Tensor& batch,
                                 const LambdaPoint& p, std::mt19937_64& noise) {
    const int B = batch.n();
    std::vector<Var<float>> losses;
    std::vector<double> lnew(B), lprev(B, std::numeric_limits<double>::infinity());
    StepLoss out;
    for (int b = 0; b < B; ++b) {
      const Tensor x = sample_of(batch, b);
      auto t = rd_forward(g, bank.shared, enc, g.constant(x), p.rate_index, p.lambda, &noise, cfg.train.conditioning);
      lnew[b] = t.loss->value[0];
      out.bpp += t.bpp() / B;
      out.mse += t.mse() / B;
      losses.push_back(t.loss);
      for (int i = 0; i < previous; ++i) {
        Graph<float> eg(false);
        auto e = rd_forward(eg, bank.shared, bank.encoders[i].net, eg.constant(x), p.rate_index, p.lambda, nullptr);
        lprev[b] = std::min(lprev[b], static_cast<double>(e.loss->value[0]));
      }
    }
    std::vector<double> w(B, 1.0 / B);
    if (previous > 0) {
      double mean_prev = 0.0;
      for (double v : lprev) mean_prev += v / B;
      const double temp = std::max(cfg.temperature * mean_prev, 1e-12);
      double top = -std::numeric_limits<double>::infinity();
      for (int b = 0; b < B; ++b) top = std::max(top, (lprev[b] - lnew[b]) / temp);
      double z = 0.0;
      std::vector<double> soft(B);
      for (int b = 0; b < B; ++b) z += soft[b] = std::exp((lprev[b] - lnew[b]) / temp - top);
      for (int b = 0; b < B; ++b) w[b] = cfg.mix / B + (1.0 - cfg.mix) * soft[b] / z;
    }
    Var<float> total = g.scale(losses[0], static_cast<float>(w[0]));
    for (int b = 1; b < B; ++b) total = g.add(total, g.scale(losses[b], static_cast<float>(w[b])));
    out.loss = total;
    return out;
  };
}

}  // namespace

void train_rrl_step(EncoderBank& bank, EncoderInit init, const RrlConfig& cfg, const Dataset& data) {
  require_frozen(bank.shared_params(), "decoder and entropy module");
  require_frozen(bank.shared.encoder.params(), "the teacher encoder");
  for (const auto& e : bank.encoders) require_frozen(e.net.params(), "previous encoders");
  const auto before = frozen_digests(bank);

  const int index = bank.size();
  TrainConfig tc = cfg.train;
  tc.seed = cfg.train.seed + static_cast<std::uint64_t>(index);
  BankEncoder fresh;
  if (init == EncoderInit::kScratch) {
    std::mt19937_64 rng(tc.seed * 7919 + 11);
    fresh.net = build_encoder<float>(bank.shared.config, cfg.student, rng);
    fresh.regime = Regime::kOneByOne;
    fresh.teacher_id = -1;
  } else {
    // Always a fresh copy of the Large teacher, never the previous student.
    fresh.net = bank.shared.encoder.cast<float>();
    set_trainable(fresh.net.params(), true);
    insert_masks(fresh.net, cfg.student);
    fresh.regime = Regime::kOurs;
    fresh.teacher_id = 0;
  }
  // The first encoder has no ensemble to complement and uses the plain loss.
  const LossFn loss = index > 0 ? residual_loss(bank, index, cfg) : LossFn{};

  if (init == EncoderInit::kMaskedTeacher && tc.epochs_decay > 0) {
    TrainConfig d = tc;
    d.epochs_total = tc.epochs_decay;
    d.epochs_finetune = 0;
    d.milestones.clear();
    train(bank.shared, d, data, {&fresh.net, fresh.net.params(), loss, {}, false});
    fresh.net = merge_masks(fresh.net);
    tc.epochs_total = tc.epochs_finetune;
    tc.epochs_decay = 0;
    tc.seed += 1000;
    tc.milestones = TrainConfig::scaled_milestones(tc.epochs_total);
  } else if (init == EncoderInit::kMaskedTeacher) {
    throw ValidationError("masked-teacher init needs at least one decay epoch");
  } else {
    tc.epochs_decay = 0;
    tc.epochs_finetune = tc.epochs_total;
  }
  if (tc.epochs_total > 0) train(bank.shared, tc, data, {&fresh.net, fresh.net.params(), loss, {}, false});
  set_trainable(fresh.net.params(), false);

  if (frozen_digests(bank) != before) throw SequencingError("a frozen module changed while training a new encoder");
  bank.encoders.push_back(std::move(fresh));
}

void train_separate(EncoderBank& bank, int bank_size, const RrlConfig& cfg, const Dataset& data) {
  if (bank_size < 1) throw ValidationError("bank_size must be >= 1");
  require_frozen(bank.shared_params(), "decoder and entropy module");
  const auto shared_before = bank.shared_digest();
  for (int i = 0; i < bank_size; ++i) {
    const int index = bank.size();
    TrainConfig tc = cfg.train;
    tc.seed = cfg.train.seed + static_cast<std::uint64_t>(index);
    tc.epochs_decay = 0;
    tc.epochs_finetune = tc.epochs_total;
    BankEncoder e;
    std::mt19937_64 rng(tc.seed * 7919 + 11);
    e.net = build_encoder<float>(bank.shared.config, cfg.student, rng);
    e.regime = Regime::kSeparate;
    TrainOptions o;
    o.encoder = &e.net;
    o.params = e.net.params();
    train(bank.shared, tc, data, o);
    set_trainable(e.net.params(), false);
    bank.encoders.push_back(std::move(e));
  }
  if (bank.shared_digest() != shared_before) throw SequencingError("shared modules changed during separate training");
}

void train_end_to_end(EncoderBank& bank, int bank_size, const RrlConfig& cfg, const Dataset& data) {
  if (bank_size < 1) throw ValidationError("bank_size must be >= 1");
  if (!bank.encoders.empty()) throw SequencingError("end-to-end training starts from an empty bank");
  for (int i = 0; i < bank_size; ++i) {
    BankEncoder e;
    std::mt19937_64 rng((cfg.train.seed + static_cast<std::uint64_t>(i)) * 7919 + 11);
    e.net = build_encoder<float>(bank.shared.config, cfg.student, rng);
    e.regime = Regime::kEndToEnd;
    bank.encoders.push_back(std::move(e));
  }
  auto shared = bank.shared_params();
  set_trainable(shared, true);
  std::vector<Var<float>> params = shared;
  for (auto& e : bank.encoders)
    for (auto& p : e.net.params()) params.push_back(p);
  TrainConfig tc = cfg.train;
  tc.epochs_decay = 0;
  tc.epochs_finetune = tc.epochs_total;
  TrainOptions o;
  o.encoder = &bank.encoders[0].net;
  o.params = params;
  o.loss = [&bank, &tc](Graph<float>& g, const Network<float>&, const Tensor& batch, const LambdaPoint& p,
                        std::mt19937_64& noise) {
    StepLoss out;
    const auto n = static_cast<double>(bank.encoders.size());
    for (const auto& e : bank.encoders) {
      auto t = rd_forward(g, bank.shared, e.net, g.constant(batch), p.rate_index, p.lambda, &noise, tc.conditioning);
      out.loss = out.loss ? g.add(out.loss, t.loss) : t.loss;
      out.bpp += t.bpp() / n;
      out.mse += t.mse() / n;
    }
    return out;
  };
  train(bank.shared, tc, data, o);
  set_trainable(shared, false);
  for (auto& e : bank.encoders) set_trainable(e.net.params(), false);
}

std::pair<Bitstream, EnsembleChoice> ensemble_encode(const EncoderBank& bank, const Tensor& image, int k,
                                                     int rate_index, double lambda) {
  if (k < 1 || k > bank.size()) {
    throw ValidationError("k = " + std::to_string(k) + " outside [1, " + std::to_string(bank.size()) + "]");
  }
  if (k > 255) throw ValidationError("encoder id must fit in one byte");
  EnsembleChoice choice;
  Bitstream best;
  double best_score = std::numeric_limits<double>::infinity();
  for (int i = 0; i < k; ++i) {
    auto res = compress_detailed(bank.shared, bank.encoders[i].net, image, rate_index);
    const Tensor rec = decompress(bank.shared, res.bitstream);
    EncoderScore s;
    s.bytes = res.bitstream.byte_size();
    s.bpp = bpp(s.bytes, image.w(), image.h());
    s.psnr = psnr(image, rec);
    const double mse = kDistortionScale / std::pow(10.0, s.psnr / 10.0);
    s.score = s.bpp + lambda * mse;
    choice.table.push_back(s);
    if (s.score < best_score) {
      best_score = s.score;
      choice.winner = i;
      best = std::move(res.bitstream);
    }
  }
  best.encoder_id = static_cast<std::uint8_t>(choice.winner);
  return {std::move(best), std::move(choice)};
}

void write_ensemble_report(const std::filesystem::path& path, const std::vector<EnsembleRow>& rows) {
  std::ofstream f(path);
  if (!f) throw DataError("cannot write " + path.string());
  std::size_t k = 0;
  for (const auto& r : rows) k = std::max(k, r.choice.table.size());
  f << "image";
  for (std::size_t i = 0; i < k; ++i) f << ",bpp_" << i << ",psnr_" << i << ",score_" << i;
  f << ",winner\n" << std::setprecision(8);
  for (const auto& r : rows) {
    f << r.image_id;
    for (std::size_t i = 0; i < k; ++i) {
      if (i < r.choice.table.size()) {
        const auto& s = r.choice.table[i];
        f << ',' << s.bpp << ',' << s.psnr << ',' << s.score;
      } else {
        f << ",,,";
      }
    }
    f << ',' << r.choice.winner << '\n';
  }
}

double ensemble_score(const EncoderBank& bank, int k, const Dataset& images, const std::vector<LambdaPoint>& points) {
  double total = 0.0;
  std::size_t n = 0;
  for (const auto& img : images.images())
    for (const auto& p : points) {
      auto [bs, choice] = ensemble_encode(bank, img, k, p.rate_index, p.lambda);
      total += choice.table[choice.winner].score;
      ++n;
    }
  return n ? total / static_cast<double>(n) : 0.0;
}

namespace {
constexpr char kBankMagic[4] = {'E', 'V', 'C', 'B'};
constexpr std::uint32_t kBankVersion = 1;
}  // namespace

void save_bank(const EncoderBank& bank, const std::filesystem::path& path) {
  ByteWriter w;
  w.bytes(std::span(reinterpret_cast<const std::uint8_t*>(kBankMagic), 4));
  w.u32(kBankVersion);
  w.u32(static_cast<std::uint32_t>(bank.encoders.size()));
  for (const auto& e : bank.encoders) {
    if (e.net.masked()) throw SequencingError("save_bank: encoder still carries masks");
    w.u8(static_cast<std::uint8_t>(e.regime));
    w.u32(static_cast<std::uint32_t>(e.teacher_id));
    for (int v : e.net.scheme().widths) w.u32(static_cast<std::uint32_t>(v));
    write_blobs(w, e.net.params());
  }
  const auto shared = serialize_checkpoint(bank.shared);
  w.u64(shared.size());
  w.bytes(shared);
  write_file(path, w.buffer());
}

EncoderBank load_bank(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  ByteReader r(bytes);
  if (std::memcmp(r.take(4).data(), kBankMagic, 4) != 0) throw DataError("not an encoder bank (bad magic)");
  if (r.u32() != kBankVersion) throw DataError("unsupported bank version");
  const std::uint32_t count = r.u32();
  if (count > 255) throw DataError("bank holds too many encoders");
  struct Pending {
    Regime regime;
    int teacher;
    ChannelScheme scheme;
    std::size_t offset;
  };
  // Encoder sections precede the shared checkpoint that defines their config.
  std::vector<Pending> pending;
  for (std::uint32_t i = 0; i < count; ++i) {
    Pending p;
    const std::uint8_t reg = r.u8();
    if (reg > static_cast<std::uint8_t>(Regime::kOurs)) throw DataError("bank: unknown regime tag");
    p.regime = static_cast<Regime>(reg);
    p.teacher = static_cast<int>(static_cast<std::int32_t>(r.u32()));
    for (int& v : p.scheme.widths) v = static_cast<int>(r.u32());
    p.offset = r.offset();
    // Skip the blob list.
    const std::uint32_t blobs = r.u32();
    for (std::uint32_t b = 0; b < blobs; ++b) {
      for (int d = 0; d < 4; ++d) r.u32();
      const std::uint32_t len = r.u32();
      r.take(static_cast<std::size_t>(len) * 4);
    }
    pending.push_back(p);
  }
  const std::uint64_t shared_len = r.u64();
  EncoderBank bank;
  bank.shared = parse_checkpoint<float>(r.take(shared_len));
  if (!r.done()) throw DataError("trailing bytes after bank");
  set_trainable(bank.shared.params(), false);
  for (const auto& p : pending) {
    ModelConfig cfg = bank.shared.config;
    ChannelScheme s = p.scheme;
    for (int i = cfg.num_stages; i < 4; ++i) s.widths[i] = std::max(1, s.widths[i]);
    std::mt19937_64 rng(0);
    BankEncoder e;
    e.net = build_encoder<float>(cfg, s, rng);
    ByteReader br(std::span<const std::uint8_t>(bytes).subspan(p.offset));
    read_blobs(br, e.net.params());
    repair_groups(e.net);
    set_trainable(e.net.params(), false);
    e.regime = p.regime;
    e.teacher_id = p.teacher;
    bank.encoders.push_back(std::move(e));
  }
  return bank;
}

}  // namespace evc
