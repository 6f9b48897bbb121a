#include "evc/training.hpp"

#include <algorithm>
#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <numeric>
#include <sstream>

#include "evc/image_io.hpp"
#include "evc/metrics.hpp"

namespace evc {

void TrainConfig::validate() const {
  if (lambda_set.empty()) throw ValidationError("lambda_set is empty");
  for (const auto& p : lambda_set) {
    if (!(p.lambda >= 0.0)) throw ValidationError("lambda must be >= 0");
    if (p.rate_index < 0) throw ValidationError("rate index must be >= 0");
  }
  if (epochs_decay < 0 || epochs_finetune < 0) throw ValidationError("epoch counts must be >= 0");
  if (epochs_decay + epochs_finetune != epochs_total) {
    throw ValidationError("epochs_decay + epochs_finetune must equal epochs_total");
  }
  if (iterations_per_epoch < 1) throw ValidationError("iterations_per_epoch must be >= 1");
  if (!(lr > 0.0)) throw ValidationError("lr must be > 0");
  if (!(lr_factor > 0.0)) throw ValidationError("lr_factor must be > 0");
  if (batch_size < 1) throw ValidationError("batch_size must be >= 1");
  if (crop < 1) throw ValidationError("crop must be >= 1");
  if (epochs_decay > 0) decay.validate();
}

std::vector<int> TrainConfig::scaled_milestones(int epochs) {
  std::vector<int> out;
  for (int m : {50, 90, 130, 170}) {
    const int e = static_cast<int>(std::lround(m * epochs / 200.0));
    if (e > 0 && e < epochs && (out.empty() || out.back() != e)) out.push_back(e);
  }
  return out;
}

ModelConfig RunConfig::model() const {
  return ModelConfig::desk(ChannelScheme::named(encoder_scheme), ChannelScheme::named(decoder_scheme), divisor);
}

namespace {

template <typename V>
std::vector<V> parse_list(const std::string& s) {
  std::vector<V> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.find_first_not_of(" \t") == std::string::npos) continue;
    std::stringstream is(item);
    V v;
    if (!(is >> v)) throw ValidationError("cannot parse list item '" + item + "'");
    out.push_back(v);
  }
  return out;
}

// ptree's get-with-default swallows conversion failures; this one reports them.
template <typename V>
V get_strict(const boost::property_tree::ptree& tree, const std::string& key, V fallback) {
  const auto raw = tree.get_optional<std::string>(key);
  if (!raw) return fallback;
  if constexpr (std::is_same_v<V, std::string>) {
    return *raw;
  } else {
    std::stringstream is(*raw);
    V v{};
    if constexpr (std::is_same_v<V, bool>) {
      std::string word;
      is >> word;
      if (word == "true" || word == "1" || word == "yes") return true;
      if (word == "false" || word == "0" || word == "no") return false;
      throw ValidationError("config: " + key + " = '" + *raw + "' is not a boolean");
    } else {
      if (!(is >> v) || !(is >> std::ws).eof()) {
        throw ValidationError("config: cannot parse " + key + " = '" + *raw + "'");
      }
    }
    return v;
  }
}

}  // namespace

RunConfig load_run_config(const std::filesystem::path& path) {
  namespace pt = boost::property_tree;
  pt::ptree tree;
  try {
    pt::read_ini(path.string(), tree);
  } catch (const pt::ini_parser_error& e) {
    throw ValidationError(std::string("config: ") + e.what());
  }
  RunConfig rc;
  TrainConfig& t = rc.train;
  try {
    if (auto v = tree.get_optional<std::string>("train.lambdas")) {
      const auto lambdas = parse_list<double>(*v);
      std::vector<int> rates(lambdas.size());
      std::iota(rates.begin(), rates.end(), 0);
      if (auto r = tree.get_optional<std::string>("train.rates")) rates = parse_list<int>(*r);
      if (rates.size() != lambdas.size()) throw ValidationError("config: lambdas and rates differ in length");
      t.lambda_set.clear();
      for (std::size_t i = 0; i < lambdas.size(); ++i) t.lambda_set.push_back({lambdas[i], rates[i]});
    }
    t.epochs_decay = get_strict(tree, "train.epochs_decay", t.epochs_decay);
    t.epochs_finetune = get_strict(tree, "train.epochs_finetune", t.epochs_finetune);
    t.epochs_total = get_strict(tree, "train.epochs_total", t.epochs_decay + t.epochs_finetune);
    t.iterations_per_epoch = get_strict(tree, "train.iterations_per_epoch", t.iterations_per_epoch);
    t.lr = get_strict(tree, "train.lr", t.lr);
    if (auto v = tree.get_optional<std::string>("train.milestones")) {
      t.milestones = parse_list<int>(*v);
    } else {
      t.milestones = TrainConfig::scaled_milestones(t.epochs_total);
    }
    t.lr_factor = get_strict(tree, "train.lr_factor", t.lr_factor);
    t.batch_size = get_strict(tree, "train.batch", t.batch_size);
    t.seed = get_strict(tree, "train.seed", t.seed);
    t.decay.eta = get_strict(tree, "train.eta", t.decay.eta);
    t.decay.eta_avoid = get_strict(tree, "train.eta_avoid", t.decay.eta_avoid);
    t.decay.zero_threshold = get_strict(tree, "train.zero_threshold", t.decay.zero_threshold);
    t.decay.kind = parse_sparsity_kind(get_strict<std::string>(tree, "train.sparsity", "ours"));

    DatasetSpec& d = rc.data;
    d.directory = get_strict<std::string>(tree, "data.directory", "");
    d.crop = get_strict(tree, "data.crop", d.crop);
    t.crop = d.crop;
    d.hflip = get_strict(tree, "data.hflip", d.hflip);
    d.split_seed = get_strict(tree, "data.split_seed", d.split_seed);
    d.holdout = get_strict(tree, "data.holdout", d.holdout);
    d.toy_count = get_strict(tree, "data.toy_count", d.toy_count);
    d.toy_size = get_strict(tree, "data.toy_size", d.toy_size);

    rc.encoder_scheme = get_strict(tree, "model.encoder", rc.encoder_scheme);
    rc.decoder_scheme = get_strict(tree, "model.decoder", rc.decoder_scheme);
    rc.divisor = get_strict(tree, "model.divisor", rc.divisor);
  } catch (const pt::ptree_bad_data& e) {
    throw ValidationError(std::string("config: ") + e.what());
  }
  t.validate();
  return rc;
}

Tensor Dataset::sample_batch(std::mt19937_64& rng, int batch, int crop, bool hflip) const {
  if (images_.empty()) throw ValidationError("dataset is empty");
  Tensor out(Shape(batch, 3, crop, crop));
  std::uniform_int_distribution<std::size_t> pick(0, images_.size() - 1);
  std::bernoulli_distribution flip(0.5);
  for (int b = 0; b < batch; ++b) {
    const Tensor& img = images_[pick(rng)];
    const int h = img.h(), w = img.w();
    if (h < crop || w < crop) {
      throw DataError("image of " + std::to_string(w) + "x" + std::to_string(h) + " is smaller than crop " +
                      std::to_string(crop));
    }
    const int y0 = std::uniform_int_distribution<int>(0, h - crop)(rng);
    const int x0 = std::uniform_int_distribution<int>(0, w - crop)(rng);
    const bool f = hflip && flip(rng);
    for (int c = 0; c < 3; ++c)
      for (int y = 0; y < crop; ++y)
        for (int x = 0; x < crop; ++x) {
          out.at(b, c, y, x) = img.at(0, c, y0 + y, x0 + (f ? crop - 1 - x : x));
        }
  }
  return out;
}

std::pair<Dataset, Dataset> Dataset::split(int holdout, std::uint64_t seed) const {
  if (holdout < 0 || holdout >= static_cast<int>(images_.size())) {
    throw ValidationError("holdout must leave at least one training image");
  }
  std::vector<std::size_t> idx(images_.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(idx.begin(), idx.end(), rng);
  std::vector<Tensor> a, b;
  for (std::size_t i = 0; i < idx.size(); ++i) {
    (static_cast<int>(i) < holdout ? b : a).push_back(images_[idx[i]]);
  }
  return {Dataset(std::move(a)), Dataset(std::move(b))};
}

Dataset toy_corpus(int count, int size, std::uint64_t seed) {
  if (count < 1 || size < 1) throw ValidationError("toy corpus needs count >= 1 and size >= 1");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::normal_distribution<double> n(0.0, 1.0);
  std::vector<Tensor> images;
  for (int i = 0; i < count; ++i) {
    Tensor t(Shape(1, 3, size, size));
    double c0[3], c1[3];
    for (int c = 0; c < 3; ++c) {
      c0[c] = u(rng);
      c1[c] = u(rng);
    }
    const double angle = u(rng) * 2.0 * M_PI;
    const double dx = std::cos(angle), dy = std::sin(angle);
    for (int y = 0; y < size; ++y)
      for (int x = 0; x < size; ++x) {
        const double s = 0.5 + 0.5 * ((x - size / 2.0) * dx + (y - size / 2.0) * dy) / size;
        for (int c = 0; c < 3; ++c) t.at(0, c, y, x) = static_cast<float>(c0[c] + (c1[c] - c0[c]) * s);
      }
    const int shapes = 3 + static_cast<int>(u(rng) * 4);
    for (int k = 0; k < shapes; ++k) {
      double col[3];
      for (double& v : col) v = u(rng);
      const double cx = u(rng) * size, cy = u(rng) * size, r = (0.08 + 0.25 * u(rng)) * size;
      const int kind = static_cast<int>(u(rng) * 3);
      const double freq = 0.2 + 0.6 * u(rng);
      for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x) {
          const double ex = x - cx, ey = y - cy;
          bool inside = false;
          if (kind == 0) inside = ex * ex + ey * ey < r * r;
          if (kind == 1) inside = std::abs(ex) < r && std::abs(ey) < 0.6 * r;
          if (kind == 2) inside = std::abs(ex) < r && std::abs(ey) < r && std::sin(freq * (ex + ey)) > 0;
          if (!inside) continue;
          for (int c = 0; c < 3; ++c) t.at(0, c, y, x) = static_cast<float>(col[c]);
        }
    }
    const double grain = 0.01 + 0.03 * u(rng);
    for (auto& v : t.values()) v = static_cast<float>(std::clamp(v + grain * n(rng), 0.0, 1.0));
    images.push_back(std::move(t));
  }
  return Dataset(std::move(images));
}

Dataset load_image_dir(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw DataError("not a directory: " + dir.string());
  std::vector<std::filesystem::path> files;
  for (const auto& e : std::filesystem::directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    auto ext = e.path().extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
    if (ext == ".png" || ext == ".ppm") files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  std::vector<Tensor> images;
  for (const auto& f : files) images.push_back(to_tensor(read_image(f)));
  return Dataset(std::move(images));
}

Dataset load_dataset(const DatasetSpec& spec) {
  Dataset d = spec.directory.empty() ? toy_corpus(spec.toy_count, spec.toy_size, spec.split_seed)
                                     : load_image_dir(spec.directory);
  if (d.empty()) throw ValidationError("dataset is empty");
  return d;
}

void Adam::step(const std::vector<Var<float>>& params) {
  for (const auto& p : params) {
    if (!p->requires_grad || p->grad.empty()) continue;
    auto& st = state_[p.get()];
    const std::size_t n = p->value.size();
    if (st.m.size() != n) {
      st.m.assign(n, 0.0);
      st.v.assign(n, 0.0);
      st.t = 0;
    }
    ++st.t;
    const double c1 = 1.0 - std::pow(b1_, static_cast<double>(st.t));
    const double c2 = 1.0 - std::pow(b2_, static_cast<double>(st.t));
    auto v = p->value.values();
    auto g = p->grad.values();
    for (std::size_t i = 0; i < n; ++i) {
      const double gi = g[i];
      st.m[i] = b1_ * st.m[i] + (1.0 - b1_) * gi;
      st.v[i] = b2_ * st.v[i] + (1.0 - b2_) * gi * gi;
      v[i] = static_cast<float>(v[i] - lr_ * (st.m[i] / c1) / (std::sqrt(st.v[i] / c2) + eps_));
    }
    p->zero_grad();
  }
}

void write_metrics_csv(const std::filesystem::path& path, const std::vector<EpochMetrics>& rows) {
  std::ofstream f(path);
  if (!f) throw DataError("cannot write " + path.string());
  f << "epoch,phase,lr,loss,bpp,mse,frozen_masks,nonfinite\n";
  f << std::setprecision(9);
  for (const auto& r : rows) {
    f << r.epoch << ',' << r.phase << ',' << r.lr << ',' << r.loss << ',' << r.bpp << ',' << r.mse << ','
      << r.frozen_masks << ',' << r.nonfinite << '\n';
  }
}

namespace {

StepLoss default_loss(const CodecModel<float>& model, Conditioning cond, Graph<float>& g,
                      const Network<float>& encoder, const Tensor& batch, const LambdaPoint& point,
                      std::mt19937_64& noise) {
  auto terms = rd_forward(g, model, encoder, g.constant(batch), point.rate_index, point.lambda, &noise, cond);
  return {terms.loss, terms.bpp(), terms.mse()};
}

int count_frozen(const Network<float>& a, const Network<float>& b) {
  int n = 0;
  for (const auto* net : {&a, &b})
    for (const auto& m : net->masks) n += m.frozen ? 1 : 0;
  return n;
}

}  // namespace

TrainResult train(CodecModel<float>& model, const TrainConfig& cfg, const Dataset& data, const TrainOptions& opt) {
  cfg.validate();
  if (data.empty()) throw ValidationError("dataset is empty");
  for (const auto& p : cfg.lambda_set) {
    if (p.rate_index >= model.config.rate_count) {
      throw ValidationError("rate index " + std::to_string(p.rate_index) + " exceeds the model's rate count");
    }
  }
  Network<float>& encoder = opt.encoder ? *opt.encoder : model.encoder;
  std::vector<Network<float>*> masked_nets;
  for (auto* net : {&encoder, &model.decoder}) {
    if (net->masked()) masked_nets.push_back(net);
  }
  if (cfg.epochs_decay > 0 && masked_nets.empty()) {
    throw SequencingError("decay epochs requested but the model carries no masks");
  }

  std::vector<Var<float>> params = opt.params;
  if (params.empty()) {
    params = encoder.params();
    for (auto& p : model.decoder.params()) params.push_back(p);
    for (auto& p : model.entropy_params()) params.push_back(p);
  }
  for (auto* net : masked_nets)
    for (auto& m : net->masks) {
      m.m->requires_grad = true;
      params.push_back(m.m);
    }

  LossFn loss_fn = opt.loss;
  if (!loss_fn) {
    loss_fn = [&model, &cfg](Graph<float>& g, const Network<float>& enc, const Tensor& batch, const LambdaPoint& p,
                             std::mt19937_64& noise) { return default_loss(model, cfg.conditioning, g, enc, batch, p, noise); };
  }

  std::mt19937_64 data_rng(cfg.seed);
  std::mt19937_64 noise_rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);
  std::uniform_int_distribution<std::size_t> pick_point(0, cfg.lambda_set.size() - 1);
  Adam adam(cfg.lr);
  TrainResult res;
  double initial_loss = -1.0;
  int diverged_epochs = 0;
  long it = 0;

  for (int epoch = 0; epoch < cfg.epochs_total; ++epoch) {
    const bool decay_phase = epoch < cfg.epochs_decay;
    if (epoch == cfg.epochs_decay && !masked_nets.empty()) {
      res.boundary_iteration = it;
      for (auto* net : masked_nets)
        for (auto& m : net->masks) {
          force_freeze(m, it);
        }
      res.audit.record("boundary " + std::to_string(it));
    }
    double lr = cfg.lr;
    for (int m : cfg.milestones) {
      if (epoch >= m) lr *= cfg.lr_factor;
    }
    adam.set_lr(lr);

    EpochMetrics em;
    em.epoch = epoch;
    em.phase = decay_phase ? "decay" : "finetune";
    em.lr = lr;
    int counted = 0;
    for (int k = 0; k < cfg.iterations_per_epoch; ++k, ++it) {
      if (decay_phase) {
        for (auto* net : masked_nets)
          for (auto& m : net->masks) {
            decay_step(m, cfg.decay, {}, 0.0, &res.audit, "it " + std::to_string(it) + " " + m.label(net->decoder));
          }
      }
      const Tensor batch = data.sample_batch(data_rng, cfg.batch_size, cfg.crop, true);
      const LambdaPoint point = cfg.lambda_set[pick_point(data_rng)];
      Graph<float> g;
      StepLoss sl = loss_fn(g, encoder, batch, point, noise_rng);
      const double lv = sl.loss->value[0];
      if (!std::isfinite(lv)) {
        std::cerr << "non-finite loss at epoch " << epoch << " iteration " << it << " (lambda " << point.lambda
                  << ", rate " << point.rate_index << "); abandoning the epoch\n";
        for (const auto& p : params) p->zero_grad();
        em.nonfinite = 1;
        it += cfg.iterations_per_epoch - k;
        break;
      }
      g.backward(sl.loss);
      adam.step(params);
      for (auto* net : masked_nets) {
        enforce_mask_constraints(*net, cfg.decay);
        if (decay_phase) {
          for (auto& m : net->masks) {
            check_sparse_enough(m, cfg.decay, it);
          }
        }
      }
      em.loss += lv;
      em.bpp += sl.bpp;
      em.mse += sl.mse;
      ++counted;
    }
    if (counted > 0) {
      em.loss /= counted;
      em.bpp /= counted;
      em.mse /= counted;
    }
    em.frozen_masks = masked_nets.empty() ? 0 : count_frozen(encoder, model.decoder);
    res.epochs.push_back(em);
    if (opt.verbose) {
      std::cerr << "epoch " << epoch << " " << em.phase << " loss " << em.loss << " bpp " << em.bpp << " mse "
                << em.mse << " frozen " << em.frozen_masks << "\n";
    }
    if (counted > 0) {
      if (initial_loss < 0.0) initial_loss = em.loss;
      diverged_epochs = em.loss > 10.0 * initial_loss ? diverged_epochs + 1 : 0;
      if (diverged_epochs >= 3) {
        res.aborted = true;
        res.abort_reason = "loss above 10x its initial value for 3 epochs";
        std::cerr << "training aborted: " << res.abort_reason << "\n";
        break;
      }
    }
  }
  if (cfg.epochs_finetune == 0 && !masked_nets.empty()) {
    // Decay-only runs end at the boundary.
    res.boundary_iteration = it;
    for (auto* net : masked_nets)
      for (auto& m : net->masks) {
        force_freeze(m, it);
      }
    res.audit.record("boundary " + std::to_string(it));
  }
  res.iterations = it;
  if (!opt.metrics_csv.empty()) write_metrics_csv(opt.metrics_csv, res.epochs);
  return res;
}

namespace {

// Largest centered square that is a multiple of the model's pad unit.
Tensor eval_crop(const Tensor& img, int unit) {
  const int side = std::min(img.h(), img.w()) / unit * unit;
  if (side < unit) return pad_to_multiple(img, unit);
  const int y0 = (img.h() - side) / 2, x0 = (img.w() - side) / 2;
  Tensor out(Shape(1, 3, side, side));
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < side; ++y)
      for (int x = 0; x < side; ++x) out.at(0, c, y, x) = img.at(0, c, y0 + y, x0 + x);
  return out;
}

}  // namespace

std::vector<std::vector<double>> rd_table(const CodecModel<float>& model, const Network<float>& encoder,
                                          const Dataset& images, const std::vector<LambdaPoint>& points) {
  std::vector<std::vector<double>> out;
  for (const auto& img : images.images()) {
    const Tensor x = eval_crop(img, model.config.pad_unit());
    std::vector<double> row;
    for (const auto& p : points) {
      Graph<float> g(false);
      auto terms = rd_forward(g, model, encoder, g.constant(x), p.rate_index, p.lambda, nullptr);
      row.push_back(terms.bpp() + p.lambda * terms.mse());
    }
    out.push_back(std::move(row));
  }
  return out;
}

double evaluate_rd(const CodecModel<float>& model, const Network<float>& encoder, const Dataset& images,
                   const std::vector<LambdaPoint>& points) {
  const auto t = rd_table(model, encoder, images, points);
  double s = 0.0;
  std::size_t n = 0;
  for (const auto& row : t)
    for (double v : row) {
      s += v;
      ++n;
    }
  return n ? s / static_cast<double>(n) : 0.0;
}

DistillResult distill_pipeline(const CodecModel<float>& teacher, const ChannelScheme& enc_student,
                               const ChannelScheme& dec_student, PruneTarget which, const TrainConfig& cfg,
                               const Dataset& train_set, const Dataset& holdout, bool with_scratch) {
  cfg.validate();
  if (cfg.epochs_decay < 1) throw ValidationError("distill_pipeline needs at least one decay epoch");
  const ChannelScheme enc_target = which == PruneTarget::kDecoder ? teacher.config.encoder : enc_student;
  const ChannelScheme dec_target = which == PruneTarget::kEncoder ? teacher.config.decoder : dec_student;
  DistillResult r;
  r.student = teacher.clone();
  insert_masks(r.student, enc_target, dec_target, which);

  TrainConfig decay_cfg = cfg;
  decay_cfg.epochs_total = cfg.epochs_decay;
  decay_cfg.epochs_finetune = 0;
  decay_cfg.milestones.clear();
  r.decay_run = train(r.student, decay_cfg, train_set);
  r.chosen = record_chosen_channels(r.student.encoder);
  for (auto& c : record_chosen_channels(r.student.decoder)) r.chosen.push_back(std::move(c));
  merge_masks(r.student);
  if (!(r.student.config.encoder == enc_target) || !(r.student.config.decoder == dec_target)) {
    throw StructuralError("merged scheme " + r.student.config.encoder.str() + "/" + r.student.config.decoder.str() +
                          " differs from the requested student");
  }

  TrainConfig ft_cfg = cfg;
  ft_cfg.epochs_total = cfg.epochs_finetune;
  ft_cfg.epochs_decay = 0;
  ft_cfg.seed = cfg.seed + 1;
  ft_cfg.milestones = TrainConfig::scaled_milestones(cfg.epochs_finetune);
  if (cfg.epochs_finetune > 0) r.finetune_run = train(r.student, ft_cfg, train_set);

  r.teacher_score = evaluate_rd(teacher, teacher.encoder, holdout, cfg.lambda_set);
  r.student_score = evaluate_rd(r.student, r.student.encoder, holdout, cfg.lambda_set);
  if (with_scratch) {
    ModelConfig sc = teacher.config;
    sc.encoder = enc_target;
    sc.decoder = dec_target;
    r.scratch = build_model<float>(sc, cfg.seed + 17);
    TrainConfig s_cfg = cfg;
    s_cfg.epochs_decay = 0;
    s_cfg.epochs_finetune = cfg.epochs_total;
    s_cfg.milestones = TrainConfig::scaled_milestones(cfg.epochs_total);
    r.scratch_run = train(r.scratch, s_cfg, train_set);
    r.scratch_score = evaluate_rd(r.scratch, r.scratch.encoder, holdout, cfg.lambda_set);
    if (r.scratch_score != r.teacher_score) {
      r.relative_improvement = relative_improvement(r.scratch_score, r.student_score, r.teacher_score);
    }
  }
  return r;
}

}  // namespace evc
