#include <doctest.h>

#include <sys/wait.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "evc/checkpoint.hpp"
#include "evc/codec.hpp"
#include "evc/eval.hpp"
#include "evc/image_io.hpp"
#include "evc/metrics.hpp"
#include "helpers.hpp"

using namespace evc;
namespace fs = std::filesystem;

namespace {

RDCurve reference_curve() { return {{0.1, 28.0}, {0.2, 31.0}, {0.4, 34.2}, {0.8, 37.1}}; }

RDCurve scaled(RDCurve c, double factor) {
  for (auto& p : c) p.bpp *= factor;
  return c;
}

struct Run {
  int code = -1;
  std::string out;
};

Run run_cli(const std::string& args) {
  Run r;
  const std::string cmd = std::string(EVC_CLI_PATH) + " " + args + " 2>/dev/null";
  FILE* p = popen(cmd.c_str(), "r");
  REQUIRE(p != nullptr);
  char buf[512];
  while (std::fgets(buf, sizeof buf, p)) r.out += buf;
  const int status = pclose(p);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

fs::path temp(const std::string& name) { return fs::temp_directory_path() / ("evc_eval_test_" + name); }

}  // namespace

TEST_CASE("padding to multiples of 64") {
  CHECK(padded_size(768, 512) == std::pair{768, 512});
  CHECK(padded_size(1920, 1080) == std::pair{1920, 1088});
  CHECK(padded_size(1, 1) == std::pair{64, 64});
  const Tensor x(Shape(1, 3, 5, 70), 0.5f);
  const Tensor p = pad_to_multiple(x);
  CHECK(p.shape() == Shape(1, 3, 64, 128));
  CHECK(p.at(0, 0, 4, 69) == 0.5f);
  CHECK(p.at(0, 0, 5, 0) == 0.0f);
  CHECK(crop(p, 70, 5) == x);
}

TEST_CASE("psnr and bpp") {
  const std::vector<std::uint8_t> a(300, 100), b(300, 101);
  CHECK(psnr(a, a) == kPsnrCap);
  CHECK(psnr(a, b) == doctest::Approx(20.0 * std::log10(255.0)).epsilon(1e-12));
  CHECK(psnr(a, b) == doctest::Approx(48.13).epsilon(1e-4));
  CHECK(bpp(1000, 100, 100) == doctest::Approx(0.8));
  CHECK(bpp(1000, 1920, 1080) == doctest::Approx(8000.0 / (1920.0 * 1080.0)));
  CHECK_THROWS(psnr(a, std::vector<std::uint8_t>(10, 0)));
}

TEST_CASE("bd-rate oracle") {
  const RDCurve a = reference_curve();
  CHECK(bd_rate(a, a) == doctest::Approx(0.0).epsilon(1e-9));
  CHECK(bd_rate(scaled(a, 2.0), a) == doctest::Approx(100.0).epsilon(0.001));
  CHECK(bd_rate(a, scaled(a, 2.0)) == doctest::Approx(-50.0).epsilon(0.002));
  CHECK(std::abs(bd_rate(scaled(a, 2.0), a) - 100.0) < 0.1);
  CHECK(std::abs(bd_rate(a, scaled(a, 2.0)) + 50.0) < 0.1);
  const RDCurve disjoint{{0.1, 50}, {0.2, 51}, {0.3, 52}, {0.4, 53}};
  CHECK_THROWS_AS(bd_rate(disjoint, a), MetricError);
  CHECK_THROWS_AS(bd_rate(RDCurve{{0.1, 30}}, a), MetricError);
}

TEST_CASE("relative improvement worked example") {
  CHECK(relative_improvement(1.1, -0.4, -1.1) == doctest::Approx(1.5 / 2.2 * 100.0));
  const RDCurve a = reference_curve();
  const auto row = improvement_report("SS", scaled(a, 1.011), scaled(a, 0.996), scaled(a, 0.989), a);
  CHECK(row.bd_baseline == doctest::Approx(1.1).epsilon(1e-6));
  CHECK(row.bd_ours == doctest::Approx(-0.4).epsilon(1e-6));
  CHECK(row.bd_teacher == doctest::Approx(-1.1).epsilon(1e-6));
  CHECK(std::lround(row.relative_improvement_pct) == 68);
}

TEST_CASE("curve csv round trip") {
  const auto p = temp("curve.csv");
  write_curve_csv(p, "x", reference_curve());
  const RDCurve back = read_curve_csv(p);
  REQUIRE(back.size() == 4);
  CHECK(back[2].bpp == doctest::Approx(0.4));
  CHECK(back[2].psnr == doctest::Approx(34.2));
  {
    std::ofstream f(p);
    f << "label,bpp,psnr\nx,abc,3\n";
  }
  CHECK_THROWS_AS(read_curve_csv(p), DataError);
  fs::remove(p);
}

TEST_CASE("corpus evaluation") {
  const auto model = build_model<float>(evc::test::tiny_config(), 4);
  std::mt19937_64 rng(2);
  std::vector<NamedImage> imgs{{"a", evc::test::random_tensor<float>(Shape(1, 3, 40, 72), rng, 0, 1)},
                               {"b", evc::test::random_tensor<float>(Shape(1, 3, 64, 64), rng, 0, 1)}};
  const EvalReport rep = evaluate_corpus(model, imgs);
  CHECK(rep.rows.size() == 8);
  CHECK(rep.rows[0].width == 72);
  CHECK(rep.rows[0].bpp == doctest::Approx(bpp(rep.rows[0].bytes, 72, 40)));
  const RDCurve c = rep.curve();
  CHECK(c.size() == 4);
  for (std::size_t i = 1; i < c.size(); ++i) CHECK(c[i].bpp >= c[i - 1].bpp);
}

TEST_CASE("cli exit codes and printed values") {
  const auto a = temp("a.csv"), b = temp("b.csv"), base = temp("base.csv"), ours = temp("ours.csv"),
             teacher = temp("teacher.csv");
  const RDCurve c = reference_curve();
  write_curve_csv(a, "a", c);
  write_curve_csv(base, "baseline", scaled(c, 1.011));
  write_curve_csv(ours, "ours", scaled(c, 0.996));
  write_curve_csv(teacher, "teacher", scaled(c, 0.989));

  Run r = run_cli("bdrate " + a.string() + " " + a.string());
  CHECK(r.code == 0);
  CHECK(r.out == "0.00\n");

  r = run_cli("report --baseline " + base.string() + " --ours " + ours.string() + " --teacher " + teacher.string() +
              " --anchor " + a.string());
  CHECK(r.code == 0);
  CHECK(r.out.find("relative improvement 68%") != std::string::npos);

  CHECK(run_cli("").code == 1);
  CHECK(run_cli("bdrate").code == 1);
  CHECK(run_cli("bdrate " + a.string() + " " + temp("missing.csv").string()).code == 2);

  const auto model = temp("model.evck"), junk = temp("junk.evc1"), png = temp("in.png"), rec = temp("out.png"),
             stream = temp("s.evc1");
  save_checkpoint(build_model<float>(evc::test::tiny_config(), 4), model);
  {
    std::ofstream f(junk, std::ios::binary);
    f << "EVC1 definitely not a stream";
  }
  CHECK(run_cli("decompress --model " + model.string() + " " + junk.string() + " " + rec.string()).code == 3);

  std::mt19937_64 rng(5);
  write_image(png, from_tensor(evc::test::random_tensor<float>(Shape(1, 3, 24, 40), rng, 0, 1)));
  CHECK(run_cli("compress --model " + model.string() + " --rate 2 " + png.string() + " " + stream.string()).code == 0);
  CHECK(run_cli("decompress --model " + model.string() + " " + stream.string() + " " + rec.string()).code == 0);
  const Image out = read_image(rec);
  CHECK(out.width == 40);
  CHECK(out.height == 24);
  CHECK(run_cli("compress --model " + model.string() + " --rate 9 " + png.string() + " " + stream.string()).code == 1);

  for (const auto& p : {a, b, base, ours, teacher, model, junk, png, rec, stream}) fs::remove(p);
}
