#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "evc/codec_model.hpp"
#include "evc/metrics.hpp"

namespace evc {

struct EvalRow {
  std::string image;
  int rate_index = 0;
  int width = 0;
  int height = 0;
  std::size_t bytes = 0;
  double bpp = 0.0;
  double psnr = 0.0;
  double encode_ms = 0.0;
  double decode_ms = 0.0;
};

struct EvalReport {
  std::vector<EvalRow> rows;
  /// Corpus mean per rate index, sorted by increasing bpp.
  RDCurve curve() const;
};

struct NamedImage {
  std::string id;
  Tensor image;
};

/// Compresses and decompresses every image at every rate index.
EvalReport evaluate_corpus(const CodecModel<float>& model, const std::vector<NamedImage>& images);
std::vector<NamedImage> load_named_images(const std::filesystem::path& dir);

void write_eval_csv(const std::filesystem::path& path, const EvalReport& report);
/// Schema `label,bpp,psnr`.
void write_curve_csv(const std::filesystem::path& path, const std::string& label, const RDCurve& curve);
RDCurve read_curve_csv(const std::filesystem::path& path);

struct ReportRow {
  std::string config;
  double bd_baseline = 0.0;
  double bd_ours = 0.0;
  double bd_teacher = 0.0;
  double relative_improvement_pct = 0.0;
};
/// BD-rates of the three curves against `anchor` and the improvement ratio.
ReportRow improvement_report(const std::string& config, const RDCurve& baseline, const RDCurve& ours,
                             const RDCurve& teacher, const RDCurve& anchor);
void write_report_csv(const std::filesystem::path& path, const std::vector<ReportRow>& rows);

}  // namespace evc
