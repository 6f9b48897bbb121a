#include <doctest.h>

#include <filesystem>

#include "evc/codec.hpp"
#include "evc/scalable_encoder.hpp"
#include "helpers.hpp"

using namespace evc;

namespace {

RrlConfig tiny_rrl() {
  RrlConfig c;
  c.train.epochs_total = 1;
  c.train.epochs_finetune = 1;
  c.train.iterations_per_epoch = 2;
  c.train.batch_size = 1;
  c.train.crop = 64;
  c.train.seed = 3;
  c.student = ChannelScheme::small().scaled(16);
  return c;
}

CodecModel<float> tiny_teacher() { return build_model<float>(evc::test::tiny_config(), 11); }

}  // namespace

TEST_CASE("bank starts frozen") {
  const EncoderBank bank = make_bank(tiny_teacher());
  CHECK(bank.size() == 0);
  for (const auto& p : bank.shared_params()) CHECK(!p->requires_grad);
  for (const auto& p : bank.shared.encoder.params()) CHECK(!p->requires_grad);
  CHECK(parse_regime("one_by_one") == Regime::kOneByOne);
  CHECK(std::string(regime_name(Regime::kOurs)) == "ours");
  CHECK_THROWS_AS(parse_regime("joint"), ValidationError);
}

TEST_CASE("one-by-one training keeps earlier encoders and the decoder intact") {
  const Dataset data = toy_corpus(3, 64, 1);
  EncoderBank bank = make_bank(tiny_teacher());
  const std::string shared = bank.shared_digest();
  const RrlConfig cfg = tiny_rrl();
  train_rrl_step(bank, EncoderInit::kScratch, cfg, data);
  REQUIRE(bank.size() == 1);
  const auto s0 = params_digest(bank.encoders[0].net.params());
  const Tensor img = data[0];
  const auto first = compress_detailed(bank.shared, bank.encoders[0].net, img, 1);
  const Tensor rec = decompress(bank.shared, first.bitstream);

  train_rrl_step(bank, EncoderInit::kScratch, cfg, data);
  CHECK(bank.size() == 2);
  CHECK(bank.shared_digest() == shared);
  CHECK(params_digest(bank.encoders[0].net.params()) == s0);
  CHECK(decompress(bank.shared, first.bitstream) == rec);
  CHECK(bank.encoders[1].regime == Regime::kOneByOne);
  CHECK(bank.encoders[1].teacher_id == -1);

  // More choices never raise the ensemble score.
  const Dataset eval = toy_corpus(2, 64, 7);
  const std::vector<LambdaPoint> pts{{0.01, 2}};
  CHECK(ensemble_score(bank, 2, eval, pts) <= ensemble_score(bank, 1, eval, pts));

  set_trainable(bank.shared_params(), true);
  CHECK_THROWS_AS(train_rrl_step(bank, EncoderInit::kScratch, cfg, data), SequencingError);
}

TEST_CASE("masked-teacher init yields a student-sized encoder") {
  const Dataset data = toy_corpus(3, 64, 1);
  EncoderBank bank = make_bank(tiny_teacher());
  RrlConfig cfg = tiny_rrl();
  cfg.train.epochs_decay = 1;
  cfg.train.epochs_finetune = 1;
  cfg.train.epochs_total = 2;
  train_rrl_step(bank, EncoderInit::kMaskedTeacher, cfg, data);
  REQUIRE(bank.size() == 1);
  CHECK(bank.encoders[0].net.scheme() == cfg.student);
  CHECK(!bank.encoders[0].net.masked());
  CHECK(bank.encoders[0].teacher_id == 0);
  CHECK(bank.encoders[0].regime == Regime::kOurs);
}

TEST_CASE("separate encoders differ by seed") {
  EncoderBank bank = make_bank(tiny_teacher());
  const std::string shared = bank.shared_digest();
  train_separate(bank, 2, tiny_rrl(), toy_corpus(3, 64, 1));
  CHECK(bank.size() == 2);
  CHECK(params_digest(bank.encoders[0].net.params()) != params_digest(bank.encoders[1].net.params()));
  CHECK(bank.shared_digest() == shared);
}

TEST_CASE("end-to-end losses do not cross encoder paths") {
  EncoderBank bank = make_bank(tiny_teacher());
  train_end_to_end(bank, 2, tiny_rrl(), toy_corpus(3, 64, 1));
  REQUIRE(bank.size() == 2);
  for (auto& e : bank.encoders) set_trainable(e.net.params(), true);
  Graph<float> g;
  std::mt19937_64 noise(1);
  const auto t = rd_forward(g, bank.shared, bank.encoders[0].net, g.constant(toy_corpus(1, 64, 2)[0]), 1, 0.01, &noise);
  g.backward(t.loss);
  bool touched0 = false;
  for (const auto& p : bank.encoders[0].net.params()) touched0 = touched0 || !p->grad.empty();
  CHECK(touched0);
  for (const auto& p : bank.encoders[1].net.params()) {
    for (float v : p->grad.values()) CHECK(v == 0.0f);
  }
}

TEST_CASE("ensemble selection") {
  const Dataset data = toy_corpus(3, 64, 1);
  EncoderBank bank = make_bank(tiny_teacher());
  train_separate(bank, 2, tiny_rrl(), data);
  const Tensor img = toy_corpus(1, 80, 5)[0];

  auto [bs1, c1] = ensemble_encode(bank, img, 1, 2, 0.01);
  CHECK(c1.winner == 0);
  const auto plain = compress_detailed(bank.shared, bank.encoders[0].net, img, 2).bitstream;
  CHECK(bs1.z == plain.z);
  CHECK(bs1.y1 == plain.y1);
  CHECK(bs1.y2 == plain.y2);
  CHECK(bs1.encoder_id == std::optional<std::uint8_t>(0));

  auto [bs2, c2] = ensemble_encode(bank, img, 2, 2, 0.01);
  for (const auto& s : c2.table) CHECK(c2.table[c2.winner].score <= s.score);
  CHECK(bs2.encoder_id == std::optional<std::uint8_t>(c2.winner));
  CHECK(decompress(bank.shared, parse_bitstream(serialize(bs2))).shape() == img.shape());
  CHECK_THROWS_AS(ensemble_encode(bank, img, 0, 2, 0.01), ValidationError);
  CHECK_THROWS_AS(ensemble_encode(bank, img, 3, 2, 0.01), ValidationError);

  const auto path = std::filesystem::temp_directory_path() / "evc_bank_test.evcb";
  save_bank(bank, path);
  const EncoderBank back = load_bank(path);
  std::filesystem::remove(path);
  CHECK(back.size() == 2);
  CHECK(back.shared_digest() == bank.shared_digest());
  CHECK(params_digest(back.encoders[1].net.params()) == params_digest(bank.encoders[1].net.params()));
  CHECK(back.encoders[1].regime == Regime::kSeparate);
  CHECK(serialize(ensemble_encode(back, img, 2, 2, 0.01).first) == serialize(bs2));
}
