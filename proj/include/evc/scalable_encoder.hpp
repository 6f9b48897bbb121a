#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "evc/bitstream.hpp"
#include "evc/codec_model.hpp"
#include "evc/training.hpp"

namespace evc {

enum class Regime { kEndToEnd, kSeparate, kOneByOne, kOurs };
const char* regime_name(Regime r);
Regime parse_regime(const std::string& name);

struct BankEncoder {
  Network<float> net;
  Regime regime = Regime::kSeparate;
  int teacher_id = -1;  // -1: trained from scratch; otherwise the pruned source
};

/// One frozen decoder and entropy module shared by several small encoders.
/// `shared.encoder` is the Large teacher used by the masked regime.
struct EncoderBank {
  CodecModel<float> shared;
  std::vector<BankEncoder> encoders;

  int size() const { return static_cast<int>(encoders.size()); }
  /// Decoder plus entropy-side parameters.
  std::vector<Var<float>> shared_params() const;
  std::string shared_digest() const { return params_digest(shared_params()); }
};

/// Copies the teacher and freezes everything but future encoders.
EncoderBank make_bank(const CodecModel<float>& teacher);

enum class EncoderInit { kScratch, kMaskedTeacher };

struct RrlConfig {
  TrainConfig train;  // masked init uses epochs_decay then epochs_finetune
  ChannelScheme student = ChannelScheme::small();
  double temperature = 0.1;  // relative to the batch's mean ensemble loss
  double mix = 0.5;          // share of the uniform weight in the residual weighting
};

/// Adds one encoder trained against the frozen stack. From the second
/// encoder on, each crop is weighted toward where the new encoder beats the
/// current ensemble. Throws SequencingError when a shared module is trainable
/// or when a frozen parameter changes.
void train_rrl_step(EncoderBank& bank, EncoderInit init, const RrlConfig& cfg, const Dataset& data);

/// Independent encoders against the frozen stack, seeds cfg.train.seed + i.
void train_separate(EncoderBank& bank, int bank_size, const RrlConfig& cfg, const Dataset& data);
/// All encoders at once with decoder and entropy module trainable; each
/// encoder's loss reaches the shared modules through its own path only.
void train_end_to_end(EncoderBank& bank, int bank_size, const RrlConfig& cfg, const Dataset& data);

struct EncoderScore {
  std::size_t bytes = 0;
  double bpp = 0.0;
  double psnr = 0.0;
  double score = 0.0;  // bpp + lambda * 255^2 * mse
};

struct EnsembleChoice {
  int winner = 0;
  std::vector<EncoderScore> table;
};

/// Codes `image` with the first k encoders and keeps the lowest score (ties
/// to the lower index). The winner's stream gets its encoder id in the header.
std::pair<Bitstream, EnsembleChoice> ensemble_encode(const EncoderBank& bank, const Tensor& image, int k,
                                                     int rate_index, double lambda);

struct EnsembleRow {
  std::string image_id;
  EnsembleChoice choice;
};
void write_ensemble_report(const std::filesystem::path& path, const std::vector<EnsembleRow>& rows);

/// Mean over images and lambda points of the ensemble winner's score.
double ensemble_score(const EncoderBank& bank, int k, const Dataset& images,
                      const std::vector<LambdaPoint>& points);

/// "EVCB", u32 version, u32 encoder count, per encoder (u8 regime, i32
/// teacher, config, blobs), then the length-prefixed shared checkpoint.
void save_bank(const EncoderBank& bank, const std::filesystem::path& path);
EncoderBank load_bank(const std::filesystem::path& path);

}  // namespace evc
