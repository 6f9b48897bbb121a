#include "evc/eval.hpp"

#include <algorithm>
#include <chrono>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>

#include "evc/codec.hpp"
#include "evc/image_io.hpp"

namespace evc {

RDCurve EvalReport::curve() const {
  std::map<int, std::pair<RDPoint, int>> acc;
  for (const auto& r : rows) {
    auto& [p, n] = acc[r.rate_index];
    p.bpp += r.bpp;
    p.psnr += r.psnr;
    ++n;
  }
  RDCurve c;
  for (auto& [rate, v] : acc) c.push_back({v.first.bpp / v.second, v.first.psnr / v.second});
  std::sort(c.begin(), c.end(), [](const RDPoint& a, const RDPoint& b) { return a.bpp < b.bpp; });
  return c;
}

EvalReport evaluate_corpus(const CodecModel<float>& model, const std::vector<NamedImage>& images) {
  using clock = std::chrono::steady_clock;
  EvalReport rep;
  for (const auto& img : images) {
    for (int r = 0; r < model.config.rate_count; ++r) {
      EvalRow row;
      row.image = img.id;
      row.rate_index = r;
      row.width = img.image.w();
      row.height = img.image.h();
      const auto t0 = clock::now();
      const Bitstream bs = compress(model, img.image, r);
      const auto t1 = clock::now();
      const Tensor rec = decompress(model, bs);
      const auto t2 = clock::now();
      if (bs.width != row.width || bs.height != row.height) {
        throw std::logic_error("header dimensions disagree with the source image");
      }
      row.bytes = bs.byte_size();
      row.bpp = bpp(row.bytes, bs.width, bs.height);
      row.psnr = psnr(img.image, rec);
      row.encode_ms = std::chrono::duration<double, std::milli>(t1 - t0).count();
      row.decode_ms = std::chrono::duration<double, std::milli>(t2 - t1).count();
      rep.rows.push_back(row);
    }
  }
  return rep;
}

std::vector<NamedImage> load_named_images(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw DataError("not a directory: " + dir.string());
  std::vector<std::filesystem::path> files;
  for (const auto& e : std::filesystem::directory_iterator(dir)) {
    auto ext = e.path().extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
    if (e.is_regular_file() && (ext == ".png" || ext == ".ppm")) files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  std::vector<NamedImage> out;
  for (const auto& f : files) out.push_back({f.filename().string(), to_tensor(read_image(f))});
  if (out.empty()) throw DataError("no .png or .ppm images in " + dir.string());
  return out;
}

void write_eval_csv(const std::filesystem::path& path, const EvalReport& report) {
  std::ofstream f(path);
  if (!f) throw DataError("cannot write " + path.string());
  f << "image,rate_index,width,height,bytes,bpp,psnr,encode_ms,decode_ms\n" << std::setprecision(8);
  for (const auto& r : report.rows) {
    f << r.image << ',' << r.rate_index << ',' << r.width << ',' << r.height << ',' << r.bytes << ',' << r.bpp
      << ',' << r.psnr << ',' << r.encode_ms << ',' << r.decode_ms << '\n';
  }
}

void write_curve_csv(const std::filesystem::path& path, const std::string& label, const RDCurve& curve) {
  std::ofstream f(path);
  if (!f) throw DataError("cannot write " + path.string());
  f << "label,bpp,psnr\n" << std::setprecision(10);
  for (const auto& p : curve) f << label << ',' << p.bpp << ',' << p.psnr << '\n';
}

RDCurve read_curve_csv(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw DataError("cannot read " + path.string());
  std::string line;
  if (!std::getline(f, line)) throw DataError(path.string() + ": empty curve file");
  if (line.rfind("label,bpp,psnr", 0) != 0) throw DataError(path.string() + ": expected header label,bpp,psnr");
  RDCurve c;
  int lineno = 1;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string label, b, p;
    if (!std::getline(ss, label, ',') || !std::getline(ss, b, ',') || !std::getline(ss, p)) {
      throw DataError(path.string() + ":" + std::to_string(lineno) + ": expected three fields");
    }
    try {
      c.push_back({std::stod(b), std::stod(p)});
    } catch (const std::exception&) {
      throw DataError(path.string() + ":" + std::to_string(lineno) + ": non-numeric field");
    }
  }
  return c;
}

ReportRow improvement_report(const std::string& config, const RDCurve& baseline, const RDCurve& ours,
                             const RDCurve& teacher, const RDCurve& anchor) {
  ReportRow r;
  r.config = config;
  r.bd_baseline = bd_rate(baseline, anchor);
  r.bd_ours = bd_rate(ours, anchor);
  r.bd_teacher = bd_rate(teacher, anchor);
  r.relative_improvement_pct = relative_improvement(r.bd_baseline, r.bd_ours, r.bd_teacher);
  return r;
}

void write_report_csv(const std::filesystem::path& path, const std::vector<ReportRow>& rows) {
  std::ofstream f(path);
  if (!f) throw DataError("cannot write " + path.string());
  f << "config,bd_baseline,bd_ours,bd_teacher,relative_improvement_pct\n" << std::setprecision(8);
  for (const auto& r : rows) {
    f << r.config << ',' << r.bd_baseline << ',' << r.bd_ours << ',' << r.bd_teacher << ','
      << r.relative_improvement_pct << '\n';
  }
}

}  // namespace evc
