#pragma once

#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "evc/codec_model.hpp"

namespace evc {

/// A mask configuration that cannot be merged into a valid network.
class StructuralError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

enum class SparsityKind { kOurs, kL1, kL2 };
SparsityKind parse_sparsity_kind(const std::string& name);
const char* sparsity_kind_name(SparsityKind k);

/// Ours: -x^2/2 + x on [0,1], x^2/2 - x + 1 above; L1: |x|; L2: x^2/2.
/// Negative x under Ours is clamped to 0 (with a one-time warning).
double sparsity_loss(double x, SparsityKind kind);
/// Ours: |x - 1|; L1: sign(x); L2: x.
double sparsity_grad(double x, SparsityKind kind);

struct DecayConfig {
  double eta = 0.03;
  SparsityKind kind = SparsityKind::kOurs;
  double eta_avoid = -1.0;  // < 0 means 10 * eta
  double zero_threshold = 1e-3;
  bool clamp_at_zero = true;

  double avoid_rate() const { return eta_avoid < 0.0 ? 10.0 * eta : eta_avoid; }
  void validate() const;
};

/// Append-only record of decay events, used to audit the schedule.
class AuditLog {
 public:
  void record(std::string entry) { entries_.push_back(std::move(entry)); }
  const std::vector<std::string>& entries() const { return entries_; }

 private:
  std::vector<std::string> entries_;
};

/// m <- m - rate * grad_sparse(m) - gamma * task_grad, per channel; avoid-set
/// channels use the elevated rate. Returns false (and logs) for frozen masks.
template <typename T>
bool decay_step(MaskLayer<T>& mask, const DecayConfig& cfg, std::span<const double> task_grad = {},
                double gamma = 0.0, AuditLog* log = nullptr, const std::string& label = {});

/// Freezes once at most target entries exceed the threshold: the target
/// largest |m| are kept (ties to the lower index), everything else is zeroed.
template <typename T>
bool check_sparse_enough(MaskLayer<T>& mask, const DecayConfig& cfg, long iteration);
/// Same selection without the sparsity test.
template <typename T>
void force_freeze(MaskLayer<T>& mask, long iteration);

/// Inserts the four mask sites into every stage, with targets from `student`
/// (mirrored for the decoder, x4 for the expansion site).
template <typename T>
void insert_masks(Network<T>& net, const ChannelScheme& student);

enum class PruneTarget { kEncoder, kDecoder, kBoth };
PruneTarget parse_prune_target(const std::string& name);

template <typename T>
void insert_masks(CodecModel<T>& model, const ChannelScheme& enc_student, const ChannelScheme& dec_student,
                  PruneTarget which);

/// Folds frozen masks into the neighbouring convolutions and deletes zero
/// channels. The result has no masks. Masks may be absent from any site.
template <typename T>
Network<T> merge_masks(const Network<T>& net);
/// Merges both networks in place and updates the model's schemes.
template <typename T>
void merge_masks(CodecModel<T>& model);

/// Re-zeroes pruned entries and clamps negatives after an optimizer step.
template <typename T>
void enforce_mask_constraints(Network<T>& net, const DecayConfig& cfg);

struct ChosenChannels {
  std::string label;
  std::string site;
  int stage = 0;
  int size = 0;    // N2
  int target = 0;  // Ns
  std::vector<int> survivors;
  long freeze_iteration = -1;
};

template <typename T>
std::vector<ChosenChannels> record_chosen_channels(const Network<T>& net);

/// Structured (JSON) prune report, one entry per mask.
void write_prune_report(const std::filesystem::path& path, const std::vector<ChosenChannels>& masks);
std::vector<ChosenChannels> read_prune_report(const std::filesystem::path& path);

/// |a n b| / |a u b| (1 when both are empty).
double overlap_ratio(const std::vector<int>& a, const std::vector<int>& b);

}  // namespace evc
