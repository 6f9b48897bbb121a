// Acceptance run: one PASS/FAIL line per criterion. Exit status is the
// number of failed criteria.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <limits>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "evc/cdf.hpp"
#include "evc/codec.hpp"
#include "evc/eval.hpp"
#include "evc/mask_decay.hpp"
#include "evc/metrics.hpp"
#include "evc/range_coder.hpp"
#include "evc/scalable_encoder.hpp"
#include "evc/training.hpp"

using namespace evc;

namespace {

using Clock = std::chrono::steady_clock;

int failures = 0;

void report(const std::string& id, bool ok, const std::string& detail) {
  std::printf("%s %s %s\n", ok ? "PASS" : "FAIL", id.c_str(), detail.c_str());
  std::fflush(stdout);
  if (!ok) ++failures;
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

template <typename T>
TensorT<T> uniform_tensor(const Shape& s, std::mt19937_64& rng, double lo, double hi) {
  std::uniform_real_distribution<double> u(lo, hi);
  TensorT<T> t(s);
  for (auto& v : t.values()) v = static_cast<T>(u(rng));
  return t;
}

const ModelConfig kTeacherConfig = ModelConfig::desk(ChannelScheme::large(), ChannelScheme::large(), 16);
const ChannelScheme kStudent = ChannelScheme::small().scaled(16);

// Training corpus (96 px, cropped to 64) and a disjoint evaluation corpus
// whose size is a multiple of the pad unit.
const Dataset& train_corpus() {
  static const Dataset d = toy_corpus(64, 96, 3);
  return d;
}
const Dataset& eval_corpus() {
  static const Dataset d = toy_corpus(16, 128, 11);
  return d;
}

// ---------------------------------------------------------------------------

// Prunes only masks at `site`; every other mask stays at identity.
template <typename T>
void prune_one_site(Network<T>& net, MaskSite site, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.1, 1.5);
  for (auto& m : net.masks) {
    if (m.site == site) {
      for (auto& v : m.m->value.values()) v = static_cast<T>(u(rng));
    } else {
      m.target = m.size();
    }
    force_freeze(m, 0);
  }
}

void criterion_merge() {
  const auto t0 = Clock::now();
  std::mt19937_64 rng(101);
  double worst64 = 0.0, worst32 = 0.0;
  std::string detail;
  for (MaskSite site : {MaskSite::kResidualInner, MaskSite::kStageOutput, MaskSite::kDepthInner,
                        MaskSite::kDepthExpand}) {
    double site64 = 0.0, site32 = 0.0;
    for (bool decoder : {false, true}) {
      auto net = decoder ? build_decoder<double>(kTeacherConfig, kTeacherConfig.decoder, rng)
                         : build_encoder<double>(kTeacherConfig, kTeacherConfig.encoder, rng);
      insert_masks(net, kStudent);
      prune_one_site(net, site, rng);
      const auto merged = merge_masks(net);
      const auto net32 = net.cast<float>();
      const auto merged32 = merge_masks(net32);
      Graph<double> g(false);
      Graph<float> g32(false);
      for (int i = 0; i < 100; ++i) {
        const TensorD x = decoder ? uniform_tensor<double>(Shape(1, 12, 4, 4), rng, -2, 2)
                                  : uniform_tensor<double>(Shape(1, 3, 64, 64), rng, 0, 1);
        site64 = std::max(site64, max_relative_error(merged.forward(g, g.constant(x))->value,
                                                     net.forward(g, g.constant(x))->value));
        const Tensor x32 = x.cast<float>();
        site32 = std::max(site32, max_relative_error(merged32.forward(g32, g32.constant(x32))->value,
                                                     net32.forward(g32, g32.constant(x32))->value));
      }
    }
    detail += fmt(" %s=%.1e/%.1e", mask_site_name(site), site64, site32);
    worst64 = std::max(worst64, site64);
    worst32 = std::max(worst32, site32);
  }
  const double secs = seconds_since(t0);
  report("1", worst64 <= 1e-6 && worst32 <= 1e-5 && secs < 60,
         "merge equivalence, max rel err f64/f32:" + detail + fmt(" (%.1fs)", secs));
}

// ---------------------------------------------------------------------------

double closed_form_loss(double x, SparsityKind k) {
  switch (k) {
    case SparsityKind::kOurs: return x <= 1.0 ? -0.5 * x * x + x : 0.5 * x * x - x + 1.0;
    case SparsityKind::kL1: return std::abs(x);
    case SparsityKind::kL2: return 0.5 * x * x;
  }
  return 0.0;
}

double closed_form_grad(double x, SparsityKind k) {
  switch (k) {
    case SparsityKind::kOurs: return x <= 1.0 ? 1.0 - x : x - 1.0;
    case SparsityKind::kL1: return x > 0 ? 1.0 : (x < 0 ? -1.0 : 0.0);
    case SparsityKind::kL2: return x;
  }
  return 0.0;
}

void criterion_sparsity_loss() {
  std::mt19937_64 rng(202);
  std::uniform_real_distribution<double> u(0.0, 4.0);
  const double eps = std::numeric_limits<double>::epsilon();
  double worst_loss = 0.0, worst_grad = 0.0;
  for (SparsityKind k : {SparsityKind::kOurs, SparsityKind::kL1, SparsityKind::kL2}) {
    for (int i = 0; i < 1000000; ++i) {
      const double x = u(rng);
      const double fl = closed_form_loss(x, k), fg = closed_form_grad(x, k);
      worst_loss = std::max(worst_loss, std::abs(sparsity_loss(x, k) - fl) / std::max(std::abs(fl), 1.0));
      worst_grad = std::max(worst_grad, std::abs(sparsity_grad(x, k) - fg) / std::max(std::abs(fg), 1.0));
    }
  }
  const auto k = SparsityKind::kOurs;
  const double d = 1e-7;
  const double jump = std::abs(sparsity_loss(1.0 + d, k) - sparsity_loss(1.0 - d, k));
  const double left_slope = (sparsity_loss(1.0, k) - sparsity_loss(1.0 - d, k)) / d;
  const double right_slope = (sparsity_loss(1.0 + d, k) - sparsity_loss(1.0, k)) / d;
  const double g1 = sparsity_grad(1.0, k);
  const double gjump = std::abs(sparsity_grad(1.0 + d, k) - sparsity_grad(1.0 - d, k));
  const bool ok = worst_loss <= 4 * eps && worst_grad <= 4 * eps && sparsity_loss(1.0, k) == 0.5 && jump < 1e-12 &&
                  std::abs(left_slope) < 1e-6 && std::abs(right_slope) < 1e-6 && g1 == 0.0 && gjump <= 2.5e-7;
  report("2", ok,
         fmt("sparsity loss: 3e6 points max rel err loss %.1e grad %.1e; f(1)=%.3f jump %.1e one-sided slopes "
             "%.1e/%.1e f'(1)=%g",
             worst_loss, worst_grad, sparsity_loss(1.0, k), jump, left_slope, right_slope, g1));
}

// ---------------------------------------------------------------------------

MaskLayer<double> single_mask(double v) {
  MaskLayer<double> m;
  m.m = make_var(TensorD(Shape(1, 1, 1, 1), v), true);
  m.target = 1;
  return m;
}

void criterion_decay() {
  DecayConfig cfg;
  cfg.eta = 0.1;

  auto half = single_mask(0.5);
  int steps = 0;
  while (steps < 40 && half.m->value[0] >= cfg.zero_threshold) {
    decay_step(half, cfg);
    ++steps;
  }
  report("3a", half.m->value[0] < cfg.zero_threshold,
         fmt("mask at 0.5 below tau=%g after %d steps (limit 40), value %g", cfg.zero_threshold, steps,
             half.m->value[0]));

  auto one = single_mask(1.0);
  bool moved = false;
  for (int i = 0; i < 1000; ++i) {
    decay_step(one, cfg);
    moved = moved || one.m->value[0] != 1.0;
  }
  report("3b", !moved, fmt("mask at 1.0 after 1000 steps: %.17g", one.m->value[0]));

  DecayConfig l2 = cfg;
  l2.kind = SparsityKind::kL2;
  auto tiny = single_mask(1e-6);
  double worst = 0.0;
  for (int i = 0; i < 10; ++i) {
    const double before = tiny.m->value[0];
    decay_step(tiny, l2);
    worst = std::max(worst, before - tiny.m->value[0]);
  }
  report("3c", worst < 1e-7, fmt("L2 mask from 1e-6, largest per-step move %.17g (bound 1e-7)", worst));
}

// ---------------------------------------------------------------------------

void criterion_gradient() {
  using LD = long double;
  const auto t0 = Clock::now();
  ModelConfig cfg;
  cfg.num_stages = 1;
  cfg.encoder = {{4, 4, 4, 4}};
  cfg.decoder = cfg.encoder;
  cfg.latent_channels = 4;
  cfg.hyper_channels = 3;
  const auto md = build_model<double>(cfg, 3);
  const auto ml = md.cast<LD>();
  std::mt19937_64 rng(303);
  const TensorD x = uniform_tensor<double>(Shape(1, 3, 8, 8), rng, 0, 1);
  const auto xl = x.cast<LD>();
  const double lambda = 0.01;
  const int rate = 1;

  auto loss_ld = [&] {
    std::mt19937_64 noise(9);
    Graph<LD> g(false);
    return rd_forward(g, ml, ml.encoder, g.constant(xl), rate, lambda, &noise, Conditioning::kNoisy).loss->value[0];
  };
  {
    std::mt19937_64 noise(9);
    Graph<double> g(true);
    const auto r = rd_forward(g, md, md.encoder, g.constant(x), rate, lambda, &noise, Conditioning::kNoisy);
    g.backward(r.loss);
  }
  const auto pd = md.params();
  const auto pl = ml.params();
  auto fd_at = [&](std::size_t p, std::size_t i, double h) {
    const LD orig = pl[p]->value[i];
    pl[p]->value[i] = orig + h;
    const LD fp = loss_ld();
    pl[p]->value[i] = orig - h;
    const LD fm = loss_ld();
    pl[p]->value[i] = orig;
    return static_cast<double>((fp - fm) / (2 * static_cast<LD>(h)));
  };
  auto rel = [](double tape, double fd) { return std::abs(tape - fd) / std::max(1e-8, std::abs(fd)); };

  // A coordinate whose +-h window straddles an LReLU kink is re-measured with
  // a ten times smaller step; a wrong tape gradient disagrees at both.
  const double h = 1e-4;
  double worst = 0.0;
  std::size_t checked = 0, kinks = 0;
  for (std::size_t p = 0; p < pd.size(); ++p) {
    for (std::size_t i = 0; i < pd[p]->value.size(); ++i) {
      const double tape = pd[p]->grad.empty() ? 0.0 : pd[p]->grad[i];
      double e = rel(tape, fd_at(p, i, h));
      if (e >= 1e-4) {
        ++kinks;
        e = rel(tape, fd_at(p, i, h / 10));
      }
      worst = std::max(worst, e);
      ++checked;
    }
  }
  const double secs = seconds_since(t0);
  report("4", worst < 1e-4 && secs < 300,
         fmt("finite differences over %zu parameters, max rel err %.2e (%zu re-measured at h/10, %.1fs)", checked,
             worst, kinks, secs));
}

// ---------------------------------------------------------------------------

void criterion_coder(const CodecModel<float>& teacher) {
  int fuzz_ok = 0;
  for (int seed = 0; seed < 100; ++seed) {
    std::mt19937_64 rng(5000 + seed);
    std::uniform_real_distribution<double> u(0, 1);
    std::vector<DiscreteCDF> tables;
    std::vector<std::int32_t> symbols;
    RangeEncoder enc;
    for (int i = 0; i < 2000; ++i) {
      DiscreteCDF cdf;
      if (i % 3 == 0) {
        std::vector<double> probs(2 + rng() % 40);
        for (auto& p : probs) p = std::pow(u(rng), 3.0) + 1e-9;
        cdf = make_cdf(static_cast<std::int32_t>(rng() % 21) - 10, probs, rng() % 2 == 0);
      } else {
        cdf = gaussian_cdf_for_latent(20 * (u(rng) - 0.5), 0.05 + 10 * u(rng));
      }
      std::int32_t s = cdf.min_symbol + static_cast<std::int32_t>(rng() % cdf.alphabet_size());
      if (cdf.has_escape && rng() % 50 == 0) s = static_cast<std::int32_t>(rng());
      if (!cdf.has_escape) s = std::clamp(s, cdf.min_symbol, cdf.max_symbol());
      encode_symbol(enc, cdf, s);
      tables.push_back(std::move(cdf));
      symbols.push_back(s);
    }
    const auto bytes = enc.finish();
    RangeDecoder dec(bytes);
    bool same = true;
    for (std::size_t i = 0; i < symbols.size(); ++i) same = same && decode_symbol(dec, tables[i]) == symbols[i];
    fuzz_ok += same;
  }

  const std::vector<double> flat(256, 1.0);
  const DiscreteCDF uniform = make_cdf(0, flat, false);
  std::mt19937_64 rng(77);
  const int n = 100000;
  RangeEncoder enc;
  for (int i = 0; i < n; ++i) encode_symbol(enc, uniform, static_cast<std::int32_t>(rng() % 256));
  const double coded = 8.0 * static_cast<double>(enc.finish().size());
  const double overhead = coded / (8.0 * n) - 1.0;

  int images_ok = 0, checks = 0;
  for (const auto& img : eval_corpus().images()) {
    for (int r = 0; r < teacher.config.rate_count; ++r) {
      const auto c = compress_detailed(teacher, teacher.encoder, img, r);
      const auto d = decompress_detailed(teacher, parse_bitstream(serialize(c.bitstream)));
      images_ok += d.symbols == c.symbols && d.image.shape() == img.shape();
      ++checks;
    }
  }
  report("5", fuzz_ok == 100 && overhead < 0.01 && images_ok == checks,
         fmt("coder: fuzz %d/100 seeds, uniform overhead %.4f%%, trained-model round trips %d/%d", fuzz_ok,
             100 * overhead, images_ok, checks));
}

// ---------------------------------------------------------------------------

void criterion_variable_rate(const CodecModel<float>& teacher) {
  std::vector<NamedImage> named;
  for (std::size_t i = 0; i < eval_corpus().size(); ++i) named.push_back({std::to_string(i), eval_corpus()[i]});
  const EvalReport rep = evaluate_corpus(teacher, named);
  const int rates = teacher.config.rate_count;
  std::vector<double> b(rates, 0.0), p(rates, 0.0), q(rates);
  for (const auto& row : rep.rows) {
    b[row.rate_index] += row.bpp / named.size();
    p[row.rate_index] += row.psnr / named.size();
  }
  for (int r = 0; r < rates; ++r) q[r] = teacher.quant.global(r);
  std::vector<int> order(rates);
  for (int r = 0; r < rates; ++r) order[r] = r;
  std::sort(order.begin(), order.end(), [&](int a, int c) { return q[a] < q[c]; });
  bool ok = true;
  std::string detail;
  for (int i = 0; i < rates; ++i) {
    const int r = order[i];
    detail += fmt(" q=%.3f:%.4fbpp/%.2fdB", q[r], b[r], p[r]);
    if (i > 0) {
      const int prev = order[i - 1];
      ok = ok && q[r] > q[prev] && b[r] < b[prev] && p[r] <= p[prev];
    }
  }
  report("6", ok, "one checkpoint, 4 rates, 16 images, by increasing q:" + detail);
}

// ---------------------------------------------------------------------------

void criterion_distill(const CodecModel<float>& teacher) {
  const auto t0 = Clock::now();
  int wins = 0;
  std::string detail;
  for (int seed = 0; seed < 5; ++seed) {
    TrainConfig tc;
    tc.epochs_decay = 10;
    tc.epochs_finetune = 10;
    tc.epochs_total = 20;
    tc.milestones = TrainConfig::scaled_milestones(20);
    tc.decay.eta = 0.03;
    tc.seed = 100 + seed;
    const auto r = distill_pipeline(teacher, kStudent, kStudent, PruneTarget::kBoth, tc, train_corpus(), eval_corpus());
    wins += r.student_score <= r.scratch_score;
    detail += fmt(" %.2f/%.2f", r.student_score, r.scratch_score);
  }
  report("7", wins >= 4,
         fmt("masked student <= scratch in %d/5 seeds, RD student/scratch:", wins) + detail +
             fmt(" (%.0fs)", seconds_since(t0)));
}

// ---------------------------------------------------------------------------

void criterion_scalable(const CodecModel<float>& teacher) {
  const auto t0 = Clock::now();
  const std::vector<LambdaPoint> points = TrainConfig{}.lambda_set;
  const int bank_size = 4;
  int ordered = 0;
  bool monotone = true;
  std::string detail;
  for (int seed = 0; seed < 5; ++seed) {
    RrlConfig scratch;
    scratch.student = kStudent;
    scratch.train.epochs_total = 20;
    scratch.train.epochs_finetune = 20;
    scratch.train.milestones = TrainConfig::scaled_milestones(20);
    scratch.train.seed = 200 + seed;
    RrlConfig masked = scratch;
    masked.train.epochs_decay = 10;
    masked.train.epochs_finetune = 10;

    EncoderBank separate = make_bank(teacher);
    train_separate(separate, bank_size, scratch, train_corpus());
    EncoderBank one_by_one = make_bank(teacher);
    EncoderBank ours = make_bank(teacher);
    for (int i = 0; i < bank_size; ++i) {
      train_rrl_step(one_by_one, EncoderInit::kScratch, scratch, train_corpus());
      train_rrl_step(ours, EncoderInit::kMaskedTeacher, masked, train_corpus());
    }

    std::map<std::string, std::vector<double>> scores;
    for (const auto& [name, bank] : {std::pair<const char*, EncoderBank*>{"separate", &separate},
                                     {"one_by_one", &one_by_one}, {"ours", &ours}}) {
      for (int k = 1; k <= bank_size; ++k) scores[name].push_back(ensemble_score(*bank, k, eval_corpus(), points));
      for (int k = 1; k < bank_size; ++k) monotone = monotone && scores[name][k] <= scores[name][k - 1];
    }
    const double s = scores["separate"].back(), o = scores["one_by_one"].back(), u = scores["ours"].back();
    ordered += u <= o && o <= s + 0.02 * s;
    detail += fmt(" %.2f/%.2f/%.2f", u, o, s);
  }
  report("8", ordered >= 4 && monotone,
         fmt("k=4 ours<=one-by-one<=separate+2%% in %d/5 seeds, monotone in k: %s, RD ours/obo/sep:", ordered,
             monotone ? "yes" : "no") +
             detail + fmt(" (%.0fs)", seconds_since(t0)));
}

// ---------------------------------------------------------------------------

void criterion_bd_rate() {
  const RDCurve a{{0.1, 28.0}, {0.2, 31.0}, {0.4, 34.2}, {0.8, 37.1}};
  auto scaled = [&](double f) {
    RDCurve c = a;
    for (auto& p : c) p.bpp *= f;
    return c;
  };
  const double same = bd_rate(a, a);
  const double doubled = bd_rate(scaled(2.0), a);
  const double rel = relative_improvement(1.1, -0.4, -1.1);
  const std::string printed = fmt("%.0f%%", rel);
  report("9", std::abs(same) < 1e-9 && std::abs(doubled - 100.0) <= 0.1 && printed == "68%",
         fmt("BD-rate identical %.2e%%, doubled rate %.4f%%, relative improvement (1.1,-0.4,-1.1) = ", same,
             doubled) +
             printed);
}

void criterion_padding(const CodecModel<float>& teacher) {
  const auto [pw, ph] = padded_size(1920, 1080);
  Tensor img(Shape(1, 3, 1080, 1920));
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < 1080; ++y)
      for (int x = 0; x < 1920; ++x) img.at(0, c, y, x) = static_cast<float>((x + 2 * y + 64 * c) % 256) / 255.0f;
  const auto enc = compress_detailed(teacher, teacher.encoder, img, 1);
  const auto bytes = serialize(enc.bitstream);
  const auto dec = decompress(teacher, parse_bitstream(bytes));
  const std::size_t latent = static_cast<std::size_t>(teacher.config.latent_channels) * (ph / 16) * (pw / 16);
  const double rate = bpp(bytes.size(), 1920, 1080);
  const bool ok = pw == 1920 && ph == 1088 && enc.symbols.y1.size() + enc.symbols.y2.size() == latent &&
                  dec.shape() == img.shape() && rate == 8.0 * bytes.size() / (1920.0 * 1080.0);
  report("10", ok,
         fmt("1920x1080 pads to %dx%d, %zu latent symbols, decoded %dx%d, bpp %.5f over 1920x1080", pw, ph,
             enc.symbols.y1.size() + enc.symbols.y2.size(), dec.w(), dec.h(), rate));
}

CodecModel<float> train_teacher() {
  const auto t0 = Clock::now();
  auto model = build_model<float>(kTeacherConfig, 7);
  TrainConfig tc;
  tc.epochs_total = 120;
  tc.epochs_finetune = 120;
  tc.milestones = TrainConfig::scaled_milestones(120);
  tc.seed = 1;
  const auto res = train(model, tc, train_corpus());
  std::printf("teacher: %ld iterations, final loss %.3f, held-out RD %.3f (%.0fs)\n", res.iterations,
              res.epochs.back().loss, evaluate_rd(model, model.encoder, eval_corpus(), tc.lambda_set),
              seconds_since(t0));
  std::fflush(stdout);
  return model;
}

}  // namespace

int main() {
  const auto t0 = Clock::now();
  criterion_merge();
  criterion_sparsity_loss();
  criterion_decay();
  criterion_gradient();
  criterion_bd_rate();
  const auto teacher = train_teacher();
  criterion_padding(teacher);
  criterion_coder(teacher);
  criterion_variable_rate(teacher);
  criterion_distill(teacher);
  criterion_scalable(teacher);
  std::printf("%d failed, %.0fs total\n", failures, seconds_since(t0));
  return failures;
}
