#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "evc/codec.hpp"
#include "evc/codec_model.hpp"
#include "evc/mask_decay.hpp"

namespace evc {

/// Loss went non-finite or diverged beyond recovery.
class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct LambdaPoint {
  double lambda = 0.01;
  int rate_index = 0;
};

struct TrainConfig {
  // Rate 0 has the coarsest step, so it pairs with the smallest lambda.
  std::vector<LambdaPoint> lambda_set{{0.0025, 0}, {0.005, 1}, {0.01, 2}, {0.02, 3}};
  int epochs_total = 30;
  int epochs_decay = 0;
  int epochs_finetune = 30;
  int iterations_per_epoch = 25;
  double lr = 1e-3;
  std::vector<int> milestones;  // epochs at which lr is multiplied by lr_factor
  double lr_factor = 0.5;
  int batch_size = 4;
  int crop = 64;
  std::uint64_t seed = 1;
  DecayConfig decay;
  Conditioning conditioning = Conditioning::kStraightThrough;

  void validate() const;
  /// Milestones at fractions 50/200, 90/200, 130/200, 170/200 of the run.
  static std::vector<int> scaled_milestones(int epochs);
};

struct DatasetSpec {
  std::filesystem::path directory;  // empty: procedural toy corpus
  int crop = 64;
  bool hflip = true;
  std::uint64_t split_seed = 0;
  int holdout = 0;
  int toy_count = 64;
  int toy_size = 96;
};

/// Reads `[train]`, `[data]` and `[model]` sections of an INI file. Missing
/// keys keep their defaults.
struct RunConfig {
  TrainConfig train;
  DatasetSpec data;
  std::string encoder_scheme = "large";
  std::string decoder_scheme = "large";
  int divisor = 16;
  ModelConfig model() const;
};
RunConfig load_run_config(const std::filesystem::path& path);

/// In-memory image set; every image is [1, 3, H, W] in [0, 1].
class Dataset {
 public:
  Dataset() = default;
  explicit Dataset(std::vector<Tensor> images) : images_(std::move(images)) {}

  std::size_t size() const { return images_.size(); }
  bool empty() const { return images_.empty(); }
  const Tensor& operator[](std::size_t i) const { return images_[i]; }
  const std::vector<Tensor>& images() const { return images_; }

  /// Random crops (always inside the image) with optional horizontal flips,
  /// stacked to [batch, 3, crop, crop].
  Tensor sample_batch(std::mt19937_64& rng, int batch, int crop, bool hflip) const;
  /// Deterministic split into (train, holdout) by `seed`.
  std::pair<Dataset, Dataset> split(int holdout, std::uint64_t seed) const;

 private:
  std::vector<Tensor> images_;
};

/// Procedural textures: gradients, shapes, stripes and noise.
Dataset toy_corpus(int count, int size, std::uint64_t seed);
/// Loads every .png/.ppm under `dir` (sorted by name).
Dataset load_image_dir(const std::filesystem::path& dir);
Dataset load_dataset(const DatasetSpec& spec);

/// Adam with bias correction. State is keyed by parameter node.
class Adam {
 public:
  explicit Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), b1_(beta1), b2_(beta2), eps_(eps) {}
  void set_lr(double lr) { lr_ = lr; }
  double lr() const { return lr_; }
  /// Updates every parameter that requires grad and has a gradient, then
  /// clears the gradients.
  void step(const std::vector<Var<float>>& params);

 private:
  struct Moments {
    std::vector<double> m, v;
    long t = 0;
  };
  double lr_, b1_, b2_, eps_;
  std::map<const Node<float>*, Moments> state_;
};

struct EpochMetrics {
  int epoch = 0;
  std::string phase;  // decay | finetune
  double lr = 0.0;
  double loss = 0.0;
  double bpp = 0.0;
  double mse = 0.0;
  int frozen_masks = 0;
  int nonfinite = 0;
};

struct TrainResult {
  std::vector<EpochMetrics> epochs;
  AuditLog audit;
  long boundary_iteration = -1;  // first iteration of the finetune phase
  long iterations = 0;
  bool aborted = false;
  std::string abort_reason;
};

struct StepLoss {
  Var<float> loss;
  double bpp = 0.0;
  double mse = 0.0;
};

/// Builds the training loss for one batch. The default is rd_forward.
using LossFn = std::function<StepLoss(Graph<float>& g, const Network<float>& encoder, const Tensor& batch,
                                      const LambdaPoint& point, std::mt19937_64& noise)>;

struct TrainOptions {
  /// Encoder trained through the frozen-or-not stack; null means model.encoder.
  Network<float>* encoder = nullptr;
  /// Parameters the optimizer updates; empty means every model parameter.
  std::vector<Var<float>> params;
  LossFn loss;
  std::filesystem::path metrics_csv;
  bool verbose = false;
};

/// Variable-rate training with the optional two-phase mask schedule: during
/// the first epochs_decay epochs unfrozen masks are decayed before every
/// optimizer step and frozen once sparse enough; at the boundary every mask is
/// frozen; afterwards no decay step runs.
TrainResult train(CodecModel<float>& model, const TrainConfig& cfg, const Dataset& data,
                  const TrainOptions& opt = {});

void write_metrics_csv(const std::filesystem::path& path, const std::vector<EpochMetrics>& rows);

/// Mean over images and lambda points of bpp + lambda * D with rounded
/// latents (estimated bits), the held-out RD score.
double evaluate_rd(const CodecModel<float>& model, const Network<float>& encoder, const Dataset& images,
                   const std::vector<LambdaPoint>& points);
/// Per-image per-point RD scores (same definition).
std::vector<std::vector<double>> rd_table(const CodecModel<float>& model, const Network<float>& encoder,
                                          const Dataset& images, const std::vector<LambdaPoint>& points);

struct DistillResult {
  CodecModel<float> student;
  CodecModel<float> scratch;
  TrainResult decay_run, finetune_run, scratch_run;
  double teacher_score = 0.0;
  double student_score = 0.0;
  double scratch_score = 0.0;
  double relative_improvement = 0.0;  // percent, RD scores in place of BD-rates
  std::vector<ChosenChannels> chosen;
};

/// insert_masks -> train (decay phase) -> merge_masks -> train (finetune),
/// plus a from-scratch student with the same total epochs.
DistillResult distill_pipeline(const CodecModel<float>& teacher, const ChannelScheme& enc_student,
                               const ChannelScheme& dec_student, PruneTarget which, const TrainConfig& cfg,
                               const Dataset& train_set, const Dataset& holdout, bool with_scratch = true);

}  // namespace evc
