#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "evc/image_io.hpp"
#include "evc/training.hpp"
#include "helpers.hpp"

using namespace evc;

namespace {

std::string slurp(const std::filesystem::path& p) {
  std::ifstream f(p);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

TrainConfig tiny_run() {
  TrainConfig t;
  t.epochs_total = 2;
  t.epochs_finetune = 2;
  t.iterations_per_epoch = 3;
  t.batch_size = 2;
  t.crop = 64;
  t.seed = 5;
  return t;
}

}  // namespace

TEST_CASE("train config validation") {
  TrainConfig t;
  CHECK_NOTHROW(t.validate());
  t.lambda_set.clear();
  CHECK_THROWS_AS(t.validate(), ValidationError);
  t = TrainConfig{};
  t.lambda_set[0].rate_index = -1;
  CHECK_THROWS_AS(t.validate(), ValidationError);
  t = TrainConfig{};
  t.lr = 0.0;
  CHECK_THROWS_AS(t.validate(), ValidationError);
  CHECK(TrainConfig::scaled_milestones(200) == std::vector<int>{50, 90, 130, 170});
  CHECK(TrainConfig::scaled_milestones(20) == std::vector<int>{5, 9, 13, 17});
}

TEST_CASE("ini run config") {
  const auto path = std::filesystem::temp_directory_path() / "evc_run_config_test.ini";
  {
    std::ofstream f(path);
    f << "[train]\nlambdas = 0.001, 0.01\nrates = 0, 3\nepochs_decay = 4\nepochs_finetune = 6\n"
         "lr = 0.0005\nsparsity = l1\n[data]\ncrop = 32\nholdout = 3\n[model]\nencoder = medium\ndivisor = 8\n";
  }
  const RunConfig rc = load_run_config(path);
  CHECK(rc.train.lambda_set.size() == 2);
  CHECK(rc.train.lambda_set[1].rate_index == 3);
  CHECK(rc.train.epochs_total == 10);
  CHECK(rc.train.lr == 0.0005);
  CHECK(rc.train.decay.kind == SparsityKind::kL1);
  CHECK(rc.train.crop == 32);
  CHECK(rc.data.holdout == 3);
  CHECK(rc.model().encoder == ChannelScheme::medium().scaled(8));
  {
    std::ofstream f(path);
    f << "[train]\nlr = fast\n";
  }
  CHECK_THROWS_AS(load_run_config(path), ValidationError);
  std::filesystem::remove(path);
}

TEST_CASE("crops stay inside the image and are reproducible") {
  const Dataset d = toy_corpus(4, 40, 1);
  REQUIRE(d.size() == 4);
  for (const auto& img : d.images()) {
    CHECK(img.shape() == Shape(1, 3, 40, 40));
    for (float v : img.values()) {
      CHECK(v >= 0.0f);
      CHECK(v <= 1.0f);
    }
  }
  std::mt19937_64 a(3), b(3);
  const Tensor x = d.sample_batch(a, 5, 32, true);
  CHECK(x.shape() == Shape(5, 3, 32, 32));
  CHECK(x == d.sample_batch(b, 5, 32, true));
  CHECK(d.sample_batch(a, 1, 40, false).shape() == Shape(1, 3, 40, 40));
  CHECK_THROWS_AS(d.sample_batch(a, 1, 41, false), DataError);
  CHECK_THROWS_AS(Dataset{}.sample_batch(a, 1, 8, false), ValidationError);

  const auto [tr, ho] = d.split(1, 9);
  CHECK(tr.size() == 3);
  CHECK(ho.size() == 1);
  CHECK(d.split(1, 9).second[0] == ho[0]);
  CHECK_THROWS_AS(d.split(4, 9), ValidationError);
}

TEST_CASE("rate-only loss at lambda zero") {
  const auto model = build_model<float>(evc::test::tiny_config(), 2);
  std::mt19937_64 rng(1);
  const Tensor x = toy_corpus(1, 64, 3)[0];
  Graph<float> g(false);
  std::mt19937_64 n1(4), n2(4);
  const auto r0 = rd_forward(g, model, model.encoder, g.constant(x), 1, 0.0, &n1);
  const auto r1 = rd_forward(g, model, model.encoder, g.constant(x), 1, 0.01, &n2);
  CHECK(r0.loss->value[0] == doctest::Approx(r0.bpp()).epsilon(1e-6));
  CHECK(r1.loss->value[0] == doctest::Approx(r1.bpp() + 0.01 * r1.mse()).epsilon(1e-5));
  CHECK(r0.bpp() == doctest::Approx(r1.bpp()).epsilon(1e-6));
}

TEST_CASE("seed-fixed runs write identical metrics") {
  const Dataset d = toy_corpus(6, 64, 2);
  const auto dir = std::filesystem::temp_directory_path();
  std::string csv[2];
  for (int i = 0; i < 2; ++i) {
    auto model = build_model<float>(evc::test::tiny_config(), 3);
    TrainOptions o;
    o.metrics_csv = dir / ("evc_metrics_" + std::to_string(i) + ".csv");
    const auto res = train(model, tiny_run(), d, o);
    CHECK(res.iterations == 6);
    CHECK(!res.aborted);
    csv[i] = slurp(o.metrics_csv);
    std::filesystem::remove(o.metrics_csv);
  }
  CHECK(csv[0] == csv[1]);
  CHECK(csv[0].rfind("epoch,phase,lr,loss,bpp,mse,frozen_masks,nonfinite\n", 0) == 0);
}

TEST_CASE("masked run freezes everything before finetuning") {
  const Dataset d = toy_corpus(6, 64, 2);
  auto model = build_model<float>(evc::test::tiny_config(), 3);
  const auto s = ChannelScheme::small().scaled(16);
  insert_masks(model, s, s, PruneTarget::kBoth);
  TrainConfig t = tiny_run();
  t.epochs_decay = 2;
  t.epochs_finetune = 2;
  t.epochs_total = 4;
  t.decay.eta = 0.2;
  const auto res = train(model, t, d);
  CHECK(res.boundary_iteration == 6);
  bool after = false, decayed_after = false;
  for (const auto& e : res.audit.entries()) {
    if (e.rfind("boundary", 0) == 0) after = true;
    if (after && e.rfind("decay", 0) == 0) decayed_after = true;
  }
  CHECK(after);
  CHECK(!decayed_after);
  for (const auto* net : {&model.encoder, &model.decoder}) {
    for (const auto& m : net->masks) {
      CHECK(m.frozen);
      CHECK(m.freeze_iteration <= res.boundary_iteration);
      int nz = 0;
      for (float v : m.m->value.values()) nz += v != 0.0f;
      CHECK(nz <= m.target);
    }
  }
  CHECK(res.epochs[2].phase == "finetune");
  CHECK(res.epochs[1].phase == "decay");
  merge_masks(model);
  CHECK(model.config.encoder == s);
}

TEST_CASE("decay epochs without masks is a sequencing error") {
  auto model = build_model<float>(evc::test::tiny_config(), 3);
  TrainConfig t = tiny_run();
  t.epochs_decay = 1;
  t.epochs_finetune = 1;
  CHECK_THROWS_AS(train(model, t, toy_corpus(2, 64, 1)), SequencingError);
}

TEST_CASE("adam moves parameters against the gradient") {
  auto p = make_var(Tensor(Shape(1, 2, 1, 1), std::vector<float>{1.0f, -1.0f}), true);
  p->grad = Tensor(Shape(1, 2, 1, 1), std::vector<float>{0.5f, -2.0f});
  auto frozen = make_var(Tensor(Shape(1, 1, 1, 1), 3.0f), false);
  frozen->grad = Tensor(Shape(1, 1, 1, 1), 1.0f);
  Adam adam(0.1);
  adam.step({p, frozen});
  CHECK(p->value[0] == doctest::Approx(0.9f));
  CHECK(p->value[1] == doctest::Approx(-0.9f));
  CHECK(frozen->value[0] == 3.0f);
  CHECK(p->grad.empty());
}
