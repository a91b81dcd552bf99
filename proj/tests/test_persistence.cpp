#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <string>

#include "spansr/config.hpp"
#include "spansr/image_io.hpp"
#include "spansr/weights.hpp"

using namespace spansr;
namespace fs = std::filesystem;

namespace {

fs::path temp_path(const std::string& name) {
  static const fs::path dir = [] {
    fs::path d = fs::temp_directory_path() / "spansr-tests";
    fs::create_directories(d);
    return d;
  }();
  return dir / name;
}

ModelConfig tiny_cfg() {
  ModelConfig cfg;
  cfg.scale = 2;
  cfg.channels = 6;
  cfg.blocks = 2;
  return cfg;
}

}  // namespace

TEST_CASE("weight round trip is bit exact") {
  SpanModel<float> model = init_model<float>(tiny_cfg(), 11);
  model.att_a[0] = 1.25f;
  model.att_b[0] = 0.75f;
  const auto bytes = serialize_weights(model);
  SpanModel<float> back = deserialize_weights<float>(bytes);

  CHECK(back.cfg.scale == model.cfg.scale);
  CHECK(back.cfg.channels == model.cfg.channels);
  CHECK(back.cfg.blocks == model.cfg.blocks);
  CHECK(back.fused == model.fused);
  CHECK(back.att_a[0] == model.att_a[0]);
  CHECK(back.att_b[0] == model.att_b[0]);

  auto pa = parameters(model, false);
  auto pb = parameters(back, false);
  REQUIRE(pa.size() == pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) {
    CHECK(pa[i].name == pb[i].name);
    CHECK(max_abs_diff(*pa[i].tensor, *pb[i].tensor) == 0.0f);
  }

  // re-serialization is byte identical
  CHECK(serialize_weights(back) == bytes);

  // file round trip through disk
  const auto path = temp_path("roundtrip.spanwt");
  save_weights(model, path.string());
  SpanModel<float> loaded = load_weights<float>(path.string());
  CHECK(serialize_weights(loaded) == bytes);
}

TEST_CASE("config variants survive the weight header") {
  ModelConfig cfg = tiny_cfg();
  cfg.use_residual = false;
  cfg.use_attention = true;
  cfg.attention_trainable = true;
  cfg.act = Activation::kLeakyRelu;
  cfg.rep_side1x1 = true;
  cfg.rep_identity = true;
  SpanModel<float> model = init_model<float>(cfg, 12);
  SpanModel<float> back = deserialize_weights<float>(serialize_weights(model));
  CHECK(back.cfg.use_residual == false);
  CHECK(back.cfg.use_attention == true);
  CHECK(back.cfg.attention_trainable == true);
  CHECK(back.cfg.act == Activation::kLeakyRelu);
  CHECK(back.cfg.rep_side1x1 == true);
  CHECK(back.cfg.rep_identity == true);
  CHECK(back.blocks[0][0].side1x1.has_value());
  CHECK(back.blocks[0][0].identity);
}

TEST_CASE("fused model round trip and inference equivalence") {
  ModelConfig cfg = tiny_cfg();
  cfg.rep_side1x1 = true;
  cfg.rep_identity = true;
  SpanModel<float> model = init_model<float>(cfg, 13);
  SpanModel<float> fused = fuse_model(model);

  SpanModel<float> back = deserialize_weights<float>(serialize_weights(fused));
  CHECK(back.fused);
  CHECK_FALSE(back.cfg.rep_side1x1);
  CHECK_FALSE(back.blocks[0][0].side1x1.has_value());

  auto x = fill_random<float>(Shape4{1, 3, 8, 8}, 14, UniformDist{0, 1});
  auto y1 = span_forward(x, fused, RunMode::kInfer).output;
  auto y2 = span_forward(x, back, RunMode::kInfer).output;
  CHECK(max_abs_diff(y1, y2) == 0.0f);

  CHECK_THROWS_AS(fuse_model(back), std::logic_error);
}

TEST_CASE("corruption and malformed inputs give distinct errors") {
  SpanModel<float> model = init_model<float>(tiny_cfg(), 15);
  auto bytes = serialize_weights(model);

  SUBCASE("single byte flip anywhere in the body fails the CRC") {
    for (std::size_t pos : {std::size_t{20}, bytes.size() / 2, bytes.size() - 5}) {
      auto bad = bytes;
      bad[pos] ^= 0x40;
      bool threw = false;
      try {
        deserialize_weights<float>(bad);
      } catch (const WeightError& e) {
        threw = true;
        // header corruption may surface as malformed before the CRC runs
        CHECK((e.kind() == WeightErrorKind::kCrcMismatch ||
               e.kind() == WeightErrorKind::kMalformed));
      }
      CHECK(threw);
    }
  }
  SUBCASE("payload byte flips specifically report CRC mismatch") {
    auto bad = bytes;
    bad[bytes.size() / 2] ^= 0x01;
    CHECK_THROWS_WITH_AS(deserialize_weights<float>(bad),
                         doctest::Contains("CRC"), WeightError);
  }
  SUBCASE("bad magic") {
    auto bad = bytes;
    bad[0] = 'X';
    try {
      deserialize_weights<float>(bad);
      FAIL("expected WeightError");
    } catch (const WeightError& e) {
      CHECK(e.kind() == WeightErrorKind::kBadMagic);
    }
  }
  SUBCASE("bad version") {
    auto bad = bytes;
    bad[8] = 99;
    try {
      deserialize_weights<float>(bad);
      FAIL("expected WeightError");
    } catch (const WeightError& e) {
      CHECK(e.kind() == WeightErrorKind::kBadVersion);
    }
  }
  SUBCASE("truncation at every boundary class") {
    for (std::size_t keep : {std::size_t{4}, std::size_t{30}, bytes.size() - 3}) {
      std::vector<std::uint8_t> bad(bytes.begin(), bytes.begin() + static_cast<long>(keep));
      try {
        deserialize_weights<float>(bad);
        FAIL("expected WeightError");
      } catch (const WeightError& e) {
        CHECK(e.kind() == WeightErrorKind::kTruncated);
      }
    }
  }
  SUBCASE("missing file") {
    try {
      load_weights<float>("/nonexistent/path.spanwt");
      FAIL("expected WeightError");
    } catch (const WeightError& e) {
      CHECK(e.kind() == WeightErrorKind::kIo);
    }
  }
}

TEST_CASE("checkpoint round trip") {
  SpanModel<float> model = init_model<float>(tiny_cfg(), 16);
  auto params = parameters(model);
  Checkpoint<float> ckpt;
  ckpt.model = model;
  ckpt.adam = AdamState<float>::like(params);
  ckpt.adam.t = 42;
  ckpt.stage = 1;
  ckpt.iteration = 321;
  Xoshiro256pp rng(99);
  for (auto& t : ckpt.adam.m)
    for (index_t i = 0; i < t.size(); ++i) t[i] = static_cast<float>(rng.uniform(-1, 1));
  for (auto& t : ckpt.adam.v)
    for (index_t i = 0; i < t.size(); ++i) t[i] = static_cast<float>(rng.uniform(0, 1));

  const auto path = temp_path("ckpt.spanwt");
  save_checkpoint(ckpt, path.string());
  Checkpoint<float> back = load_checkpoint<float>(path.string());
  CHECK(back.stage == 1);
  CHECK(back.iteration == 321);
  CHECK(back.adam.t == 42);
  REQUIRE(back.adam.m.size() == ckpt.adam.m.size());
  for (std::size_t i = 0; i < ckpt.adam.m.size(); ++i) {
    CHECK(max_abs_diff(back.adam.m[i], ckpt.adam.m[i]) == 0.0f);
    CHECK(max_abs_diff(back.adam.v[i], ckpt.adam.v[i]) == 0.0f);
  }
  CHECK(serialize_weights(back.model) == serialize_weights(model));

  // a plain weight file is not a checkpoint
  const auto wpath = temp_path("plain.spanwt");
  save_weights(model, wpath.string());
  CHECK_THROWS_AS(load_checkpoint<float>(wpath.string()), WeightError);
  // but a checkpoint still loads as plain weights
  SpanModel<float> as_weights = load_weights<float>(path.string());
  CHECK(serialize_weights(as_weights) == serialize_weights(model));
}

TEST_CASE("png round trip preserves quantized pixels") {
  auto img = fill_random<float>(Shape4{1, 3, 13, 17}, 17, UniformDist{0, 1});
  // quantize to the 8-bit grid so the round trip is exact
  for (index_t i = 0; i < img.size(); ++i)
    img[i] = std::round(img[i] * 255.0f) / 255.0f;

  const auto path = temp_path("img.png");
  save_png(img, path.string());
  auto back = load_png<float>(path.string());
  CHECK(back.shape() == img.shape());
  CHECK(max_abs_diff(back, img) <= 0.5f / 255.0f);

  CHECK_THROWS_AS(load_png<float>("/nonexistent/img.png"), ImageIoError);
  CHECK_THROWS_AS(save_png(Tensor4<float>(Shape4{2, 3, 4, 4}), path.string()), ImageIoError);
}

TEST_CASE("grayscale png loads as replicated rgb") {
  Tensor4<float> gray(Shape4{1, 1, 6, 6});
  for (index_t i = 0; i < gray.size(); ++i) gray[i] = static_cast<float>(i) / 36.0f;
  const auto path = temp_path("gray.png");
  save_png(gray, path.string());
  auto back = load_png<float>(path.string());
  CHECK(back.shape() == Shape4{1, 3, 6, 6});
  CHECK(max_abs_diff(slice_channels(back, 0, 1), slice_channels(back, 1, 1)) == 0.0f);
  CHECK(max_abs_diff(slice_channels(back, 0, 1), slice_channels(back, 2, 1)) == 0.0f);
}

TEST_CASE("config parsing") {
  SUBCASE("empty object gives defaults") {
    RunConfig cfg = parse_config(nlohmann::json::object());
    CHECK(cfg.model.scale == 4);
    CHECK(cfg.model.channels == 48);
    CHECK(cfg.model.blocks == 6);
    CHECK(cfg.train.base_lr == doctest::Approx(5e-4));
  }
  SUBCASE("paper-x4 preset") {
    RunConfig cfg = parse_config({{"preset", "paper-x4"}});
    CHECK(cfg.model.scale == 4);
    CHECK(cfg.model.channels == 48);
    CHECK(cfg.model.blocks == 6);
    CHECK(cfg.train.batch_size == 64);
    CHECK(cfg.train.patch_size == 256);
    CHECK(cfg.train.base_lr == doctest::Approx(5e-4));
    CHECK(cfg.train.lr_halve_period == 200000);
    CHECK(cfg.train.iterations == 1000000);
  }
  SUBCASE("desk preset") {
    RunConfig cfg = parse_config({{"preset", "desk"}});
    CHECK(cfg.model.scale == 2);
    CHECK(cfg.model.channels == 16);
    CHECK(cfg.train.patch_size == 64);
    CHECK(cfg.train.batch_size == 8);
  }
  SUBCASE("overrides apply on top of the preset") {
    RunConfig cfg = parse_config(
        {{"preset", "paper-x4"}, {"model", {{"scale", 2}}}, {"train", {{"batch_size", 4}}}});
    CHECK(cfg.model.scale == 2);
    CHECK(cfg.model.channels == 48);
    CHECK(cfg.train.batch_size == 4);
  }
  SUBCASE("invalid values name the offending key") {
    CHECK_THROWS_WITH_AS(parse_config({{"train", {{"batch_size", -3}}}}),
                         doctest::Contains("batch_size"), ConfigError);
    CHECK_THROWS_WITH_AS(parse_config({{"model", {{"activation", "relu6"}}}}),
                         doctest::Contains("activation"), ConfigError);
    CHECK_THROWS_WITH_AS(parse_config({{"preset", "nope"}}),
                         doctest::Contains("nope"), ConfigError);
  }
  SUBCASE("unknown keys are all listed") {
    try {
      parse_config({{"mdel", nlohmann::json::object()},
                    {"train", {{"batchsize", 1}, {"lr", 0.1}}}});
      FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
      const std::string msg = e.what();
      CHECK(msg.find("mdel") != std::string::npos);
      CHECK(msg.find("batchsize") != std::string::npos);
      CHECK(msg.find("lr") != std::string::npos);
    }
  }
  SUBCASE("file loading") {
    const auto path = temp_path("cfg.json");
    {
      std::FILE* f = std::fopen(path.string().c_str(), "w");
      REQUIRE(f);
      std::fputs("{\"preset\": \"desk\", \"train\": {\"seed\": 7}}", f);
      std::fclose(f);
    }
    RunConfig cfg = load_config(path.string());
    CHECK(cfg.model.channels == 16);
    CHECK(cfg.train.seed == 7);
    CHECK_THROWS_AS(load_config("/nonexistent/cfg.json"), ConfigError);

    const auto bad = temp_path("bad.json");
    {
      std::FILE* f = std::fopen(bad.string().c_str(), "w");
      REQUIRE(f);
      std::fputs("{not json", f);
      std::fclose(f);
    }
    CHECK_THROWS_AS(load_config(bad.string()), ConfigError);
  }
}
