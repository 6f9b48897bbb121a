// evc: train, prune, code and evaluate desk-scale EVC models.

#include <CLI11.hpp>
#include <cstdio>
#include <iostream>

#include "evc/bitstream.hpp"
#include "evc/checkpoint.hpp"
#include "evc/codec.hpp"
#include "evc/eval.hpp"
#include "evc/image_io.hpp"
#include "evc/mask_decay.hpp"
#include "evc/metrics.hpp"
#include "evc/range_coder.hpp"
#include "evc/scalable_encoder.hpp"
#include "evc/training.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitData = 2;
constexpr int kExitDecode = 3;

using namespace evc;

struct Args {
  std::string config, model, out, metrics, teacher, report, data, label = "model";
  std::string enc_scheme = "small", dec_scheme = "small", which = "both", regime = "ours";
  std::string input, output, curve_a, curve_b, baseline, ours, teacher_curve, anchor, name = "config";
  std::string scratch_out;
  int rate = 0, size = 4, k = -1, seed = -1;
  bool verbose = false;
};

RunConfig run_config(const Args& a) {
  RunConfig rc = a.config.empty() ? RunConfig{} : load_run_config(a.config);
  if (a.seed >= 0) rc.train.seed = static_cast<std::uint64_t>(a.seed);
  return rc;
}

std::pair<Dataset, Dataset> datasets(const RunConfig& rc) {
  Dataset all = load_dataset(rc.data);
  if (rc.data.holdout > 0) return all.split(rc.data.holdout, rc.data.split_seed);
  return {all, all};
}

int cmd_train(const Args& a) {
  const RunConfig rc = run_config(a);
  auto [train_set, holdout] = datasets(rc);
  auto model = build_model<float>(rc.model(), rc.train.seed);
  TrainOptions o;
  o.metrics_csv = a.metrics;
  o.verbose = a.verbose;
  const auto res = train(model, rc.train, train_set, o);
  save_checkpoint(model, a.out);
  std::printf("trained %ld iterations; holdout RD score %.6f\n", res.iterations,
              evaluate_rd(model, model.encoder, holdout, rc.train.lambda_set));
  return res.aborted ? kExitData : kExitOk;
}

int cmd_prune(const Args& a) {
  const RunConfig rc = run_config(a);
  auto [train_set, holdout] = datasets(rc);
  const auto teacher = load_checkpoint<float>(a.teacher);
  const int divisor = rc.divisor;
  const auto enc = ChannelScheme::named(a.enc_scheme).scaled(divisor);
  const auto dec = ChannelScheme::named(a.dec_scheme).scaled(divisor);
  auto r = distill_pipeline(teacher, enc, dec, parse_prune_target(a.which), rc.train, train_set, holdout,
                            !a.scratch_out.empty());
  save_checkpoint(r.student, a.out);
  if (!a.report.empty()) write_prune_report(a.report, r.chosen);
  std::printf("student %s/%s: RD score %.6f (teacher %.6f)\n", r.student.config.encoder.str().c_str(),
              r.student.config.decoder.str().c_str(), r.student_score, r.teacher_score);
  if (!a.scratch_out.empty()) {
    save_checkpoint(r.scratch, a.scratch_out);
    std::printf("scratch baseline RD score %.6f; relative improvement %.1f%%\n", r.scratch_score,
                r.relative_improvement);
  }
  return kExitOk;
}

int cmd_compress(const Args& a) {
  const auto model = load_checkpoint<float>(a.model);
  const Image img = read_image(a.input);
  const Bitstream bs = compress(model, to_tensor(img), a.rate);
  const auto bytes = serialize(bs);
  write_file(a.output, bytes);
  std::printf("%zu bytes, %.4f bpp\n", bytes.size(), bpp(bytes.size(), img.width, img.height));
  return kExitOk;
}

int cmd_decompress(const Args& a) {
  const auto model = load_checkpoint<float>(a.model);
  const Bitstream bs = parse_bitstream(read_file(a.input));
  write_image(a.output, from_tensor(decompress(model, bs)));
  return kExitOk;
}

int cmd_eval(const Args& a) {
  const auto model = load_checkpoint<float>(a.model);
  const auto report = evaluate_corpus(model, load_named_images(a.data));
  if (!a.report.empty()) write_eval_csv(a.report, report);
  const RDCurve c = report.curve();
  if (!a.out.empty()) write_curve_csv(a.out, a.label, c);
  for (const auto& p : c) std::printf("%s bpp %.5f psnr %.3f\n", a.label.c_str(), p.bpp, p.psnr);
  return kExitOk;
}

int cmd_bdrate(const Args& a) {
  std::printf("%.2f\n", bd_rate(read_curve_csv(a.curve_a), read_curve_csv(a.curve_b)));
  return kExitOk;
}

int cmd_rrl(const Args& a) {
  const RunConfig rc = run_config(a);
  auto [train_set, holdout] = datasets(rc);
  EncoderBank bank = make_bank(load_checkpoint<float>(a.teacher));
  RrlConfig cfg;
  cfg.train = rc.train;
  cfg.student = ChannelScheme::named(a.enc_scheme).scaled(rc.divisor);
  const Regime regime = parse_regime(a.regime);
  if (regime == Regime::kSeparate) {
    train_separate(bank, a.size, cfg, train_set);
  } else if (regime == Regime::kEndToEnd) {
    train_end_to_end(bank, a.size, cfg, train_set);
  } else {
    for (int i = 0; i < a.size; ++i) {
      train_rrl_step(bank, regime == Regime::kOurs ? EncoderInit::kMaskedTeacher : EncoderInit::kScratch, cfg,
                     train_set);
    }
  }
  save_bank(bank, a.out);
  const int k = a.k < 0 ? bank.size() : a.k;
  if (!a.report.empty()) {
    std::vector<EnsembleRow> rows;
    const auto& pt = rc.train.lambda_set.back();
    for (std::size_t i = 0; i < holdout.size(); ++i) {
      rows.push_back({"holdout_" + std::to_string(i), ensemble_encode(bank, holdout[i], k, pt.rate_index, pt.lambda).second});
    }
    write_ensemble_report(a.report, rows);
  }
  for (int j = 1; j <= bank.size(); ++j) {
    std::printf("k=%d ensemble RD score %.6f\n", j, ensemble_score(bank, j, holdout, rc.train.lambda_set));
  }
  return kExitOk;
}

int cmd_report(const Args& a) {
  const auto row = improvement_report(a.name, read_curve_csv(a.baseline), read_curve_csv(a.ours),
                                      read_curve_csv(a.teacher_curve), read_curve_csv(a.anchor));
  if (!a.out.empty()) write_report_csv(a.out, {row});
  std::printf("%s: BD-rate baseline %.2f%%, ours %.2f%%, teacher %.2f%%; relative improvement %.0f%%\n",
              row.config.c_str(), row.bd_baseline, row.bd_ours, row.bd_teacher, row.relative_improvement_pct);
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Efficient variable-rate image codec (desk scale)"};
  app.require_subcommand(1);
  Args a;

  auto* tr = app.add_subcommand("train", "Train a model from scratch");
  tr->add_option("--config", a.config, "INI file with [train], [data], [model] sections");
  tr->add_option("--out", a.out, "Checkpoint to write")->required();
  tr->add_option("--metrics", a.metrics, "Per-epoch metrics CSV");
  tr->add_option("--seed", a.seed, "Override the config seed");
  tr->add_flag("--verbose", a.verbose);

  auto* pr = app.add_subcommand("prune", "Mask-decay a teacher into a smaller student");
  pr->add_option("--teacher", a.teacher)->required();
  pr->add_option("--config", a.config);
  pr->add_option("--encoder", a.enc_scheme, "small | medium | large");
  pr->add_option("--decoder", a.dec_scheme, "small | medium | large");
  pr->add_option("--which", a.which, "encoder | decoder | both");
  pr->add_option("--out", a.out)->required();
  pr->add_option("--report", a.report, "JSON record of the chosen channels");
  pr->add_option("--scratch-out", a.scratch_out, "Also train a from-scratch student and save it here");
  pr->add_option("--seed", a.seed);

  auto* co = app.add_subcommand("compress", "Encode a PNG/PPM image");
  co->add_option("--model", a.model)->required();
  co->add_option("--rate", a.rate, "Rate index");
  co->add_option("input", a.input)->required();
  co->add_option("output", a.output)->required();

  auto* de = app.add_subcommand("decompress", "Decode a .evc1 stream");
  de->add_option("--model", a.model)->required();
  de->add_option("input", a.input)->required();
  de->add_option("output", a.output)->required();

  auto* ev = app.add_subcommand("eval", "Evaluate a corpus at every rate index");
  ev->add_option("--model", a.model)->required();
  ev->add_option("--data", a.data, "Directory of images")->required();
  ev->add_option("--report", a.report, "Per-image CSV");
  ev->add_option("--curve", a.out, "RD-curve CSV (label,bpp,psnr)");
  ev->add_option("--label", a.label);

  auto* bd = app.add_subcommand("bdrate", "BD-rate of curve A against anchor curve B");
  bd->add_option("test", a.curve_a)->required();
  bd->add_option("anchor", a.curve_b)->required();

  auto* rr = app.add_subcommand("rrl", "Train a bank of small encoders for one decoder");
  rr->add_option("--teacher", a.teacher)->required();
  rr->add_option("--config", a.config);
  rr->add_option("--regime", a.regime, "ours | one_by_one | separate | end_to_end");
  rr->add_option("--encoder", a.enc_scheme, "Student encoder scheme");
  rr->add_option("--size", a.size, "Number of encoders");
  rr->add_option("--k", a.k, "Encoders used for the ensemble report");
  rr->add_option("--out", a.out)->required();
  rr->add_option("--report", a.report, "Ensemble report CSV over the holdout images");
  rr->add_option("--seed", a.seed);

  auto* rp = app.add_subcommand("report", "Relative improvement from three curves and an anchor");
  rp->add_option("--baseline", a.baseline)->required();
  rp->add_option("--ours", a.ours)->required();
  rp->add_option("--teacher", a.teacher_curve)->required();
  rp->add_option("--anchor", a.anchor)->required();
  rp->add_option("--name", a.name);
  rp->add_option("--out", a.out, "Report CSV");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (*tr) return cmd_train(a);
    if (*pr) return cmd_prune(a);
    if (*co) return cmd_compress(a);
    if (*de) return cmd_decompress(a);
    if (*ev) return cmd_eval(a);
    if (*bd) return cmd_bdrate(a);
    if (*rr) return cmd_rrl(a);
    if (*rp) return cmd_report(a);
  } catch (const DecodeError& e) {
    std::cerr << "decode error: " << e.what() << "\n";
    return kExitDecode;
  } catch (const ValidationError& e) {
    std::cerr << "invalid argument: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitData;
  }
  return kExitUsage;
}
