#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "xmpr/pipeline.hpp"

using namespace xmpr;
namespace fs = std::filesystem;

namespace {

// Small enough that a training smoke test stays under a second per epoch.
pipe::RunConfig tiny_config() {
  pipe::RunConfig cfg = pipe::desk_config();
  cfg.world.objects = 10;
  cfg.world.laps = 2;
  cfg.world.frames_per_lap = 8;
  cfg.world.loop_radius = 6.0;
  cfg.world.grid = {8, 60, 3.0, -25.0};
  cfg.world.camera = {24.0, 24.0, 12.0, 8.0, 24, 16};
  cfg.backbone.d_model = 4;
  cfg.backbone.state_size = 2;
  cfg.backbone.d_f = 8;
  cfg.agg.d_f = 8;
  cfg.agg.clusters = 4;
  cfg.agg.conv_hidden = 4;
  cfg.agg.conv_dim = 4;
  cfg.agg.d_g = 16;
  cfg.view_train = {10, 5};
  cfg.view_test = {10, 5};
  cfg.contrastive.mine.n_s = 16;
  cfg.contrastive.mine.max_negatives = 8;
  cfg.train.epochs = 2;
  cfg.train.pairs_per_epoch = 4;
  return cfg;
}

std::vector<pipe::FrameBundle> tiny_bundles(const pipe::RunConfig& cfg) {
  return pipe::simulate_bundles(data::generate_world(cfg.world));
}

fs::path scratch_dir() {
  fs::path p = fs::temp_directory_path() / "xmpr_pipeline_test";
  fs::create_directories(p);
  return p;
}

}  // namespace

TEST_CASE("run config: JSON round trip is exact") {
  pipe::RunConfig cfg = pipe::desk_config();
  cfg.seed = 42;
  cfg.train.epochs = 7;
  cfg.ablation.scene_loss = false;

  const std::string text = pipe::config_json(cfg);
  pipe::RunConfig back = pipe::parse_config(text);
  CHECK(pipe::config_json(back) == text);
  CHECK(back.seed == 42);
  CHECK(back.train.epochs == 7);
  CHECK(back.ablation.scene_loss == false);
  CHECK(back.view_test.delta == cfg.view_test.delta);
  CHECK(back.contrastive.mine.r_neg == cfg.contrastive.mine.r_neg);
}

TEST_CASE("run config: partial document overrides only named fields") {
  pipe::RunConfig base = pipe::desk_config();
  pipe::RunConfig cfg = pipe::parse_config(R"({"train": {"epochs": 3}})", base);
  CHECK(cfg.train.epochs == 3);
  CHECK(cfg.train.lr0 == base.train.lr0);
  CHECK(cfg.world.frames_per_lap == base.world.frames_per_lap);
  CHECK(cfg.agg.d_g == base.agg.d_g);
}

TEST_CASE("run config: unknown keys are named with their path") {
  CHECK_THROWS_WITH_AS(pipe::parse_config(R"({"trian": {}})", pipe::desk_config()),
                       doctest::Contains("unknown key 'trian'"), std::invalid_argument);
  CHECK_THROWS_WITH_AS(
      pipe::parse_config(R"({"train": {"lr00": 1.0}})", pipe::desk_config()),
      doctest::Contains("unknown key 'train.lr00'"), std::invalid_argument);
  CHECK_THROWS_WITH_AS(
      pipe::parse_config(R"({"world": {"grid": {"row": 8}}})", pipe::desk_config()),
      doctest::Contains("unknown key 'world.grid.row'"), std::invalid_argument);
  CHECK_THROWS_WITH_AS(pipe::parse_config("{invalid"), doctest::Contains("not valid JSON"),
                       std::invalid_argument);
  CHECK_THROWS_WITH_AS(
      pipe::parse_config(R"({"loss": {"pixel_margins": [0.1]}})", pipe::desk_config()),
      doctest::Contains("loss.pixel_margins"), std::invalid_argument);
  CHECK_THROWS_WITH_AS(
      pipe::parse_config(R"({"backbone": {"scan_mode": "fast"}})", pipe::desk_config()),
      doctest::Contains("backbone.scan_mode"), std::invalid_argument);
}

TEST_CASE("run config: validation errors name the field") {
  pipe::RunConfig cfg = pipe::desk_config();
  cfg.train.epochs = 0;
  CHECK_THROWS_WITH_AS(cfg.validate(), doctest::Contains("train.epochs"),
                       std::invalid_argument);

  cfg = pipe::desk_config();
  cfg.agg.d_f = 8;  // backbone stays at 16
  CHECK_THROWS_WITH_AS(cfg.validate(), doctest::Contains("backbone.d_f"),
                       std::invalid_argument);

  cfg = pipe::desk_config();
  cfg.world.grid.cols = 121;  // scales = 2 needs even extents
  CHECK_THROWS_WITH_AS(cfg.validate(), doctest::Contains("world.grid.cols"),
                       std::invalid_argument);

  cfg = pipe::desk_config();
  cfg.eval.success_radius = 0.0;
  CHECK_THROWS_WITH_AS(cfg.validate(), doctest::Contains("eval.success_radius"),
                       std::invalid_argument);

  cfg = pipe::desk_config();
  cfg.train.hold_out = 1;
  CHECK_THROWS_WITH_AS(cfg.validate(), doctest::Contains("train.hold_out"),
                       std::invalid_argument);
}

TEST_CASE("run config: file round trip and missing file") {
  const fs::path dir = scratch_dir();
  pipe::RunConfig cfg = pipe::desk_config();
  cfg.seed = 9;
  pipe::save_run_config((dir / "run.json").string(), cfg);
  pipe::RunConfig back = pipe::load_run_config((dir / "run.json").string());
  CHECK(pipe::config_json(back) == pipe::config_json(cfg));

  CHECK_THROWS_WITH_AS(pipe::load_run_config((dir / "absent.json").string()),
                       doctest::Contains("cannot open"), std::invalid_argument);
}

TEST_CASE("model: init creates both pyramids and one shared head") {
  pipe::RunConfig cfg = tiny_config();
  ParamStore store;
  Rng rng(3);
  pipe::init_model(store, cfg, rng);
  CHECK(store.has("img.s0.embed.w"));
  CHECK(store.has("range.s0.embed.w"));
  CHECK(store.has("vlad.centers"));
  CHECK(pipe::trainable_params(store, cfg).size() == store.size());

  pipe::RunConfig ablated = cfg;
  ablated.ablation.geometric_branch = false;
  ParamStore frozen;
  Rng rng2(3);
  pipe::init_model(frozen, ablated, rng2);
  CHECK(frozen.get("vlad.conv2.k").value.data().abs().maxCoeff() == 0.0);
  CHECK(frozen.get("vlad.conv2.b").value.data().abs().maxCoeff() == 0.0);
  CHECK(pipe::trainable_params(frozen, ablated).size() == frozen.size() - 2);
}

TEST_CASE("model: features are unit per content pixel and shaped H x W x d_f") {
  pipe::RunConfig cfg = tiny_config();
  ParamStore store;
  Rng rng(4);
  pipe::init_model(store, cfg, rng);
  std::vector<pipe::FrameBundle> bundles = tiny_bundles(cfg);

  ad::Graph g;
  ad::Var f2d = pipe::image_features(g, store, cfg, bundles[0].rec.image);
  REQUIRE(f2d.shape() == Shape{16, 24, 8});
  ad::Var f3d = pipe::range_features(g, store, cfg, bundles[0].range);
  REQUIRE(f3d.shape() == Shape{8, 60, 8});
  // With zero-initialized biases a pixel's fused feature is nonzero exactly
  // when the pixel or its 2 x 2 pooled block carries content.
  auto expected_content = [](const Tensor& in) {
    const Index h = in.shape()[0], w = in.shape()[1], c = in.shape()[2];
    Index count = 0;
    for (Index r = 0; r < h; ++r)
      for (Index col = 0; col < w; ++col) {
        bool any = false;
        for (Index rr = (r / 2) * 2; rr < (r / 2) * 2 + 2 && !any; ++rr)
          for (Index cc = (col / 2) * 2; cc < (col / 2) * 2 + 2 && !any; ++cc)
            for (Index k = 0; k < c && !any; ++k) any = in.at({rr, cc, k}) != 0.0;
        count += any ? 1 : 0;
      }
    return count;
  };
  Tensor range_in({8, 60, 1});
  range_in.data() = bundles[0].range.values.data();
  const Index want2d = expected_content(bundles[0].rec.image);
  const Index want3d = expected_content(range_in);

  Index idx = 0;
  for (const ad::Var* f : {&f2d, &f3d}) {
    const Tensor& t = f->value();
    const Index hw = t.shape()[0] * t.shape()[1], d = t.shape()[2];
    Index unit = 0;
    for (Index i = 0; i < hw; ++i) {
      double n2 = 0.0;
      for (Index k = 0; k < d; ++k) n2 += t.data()[i * d + k] * t.data()[i * d + k];
      const double n = std::sqrt(n2);
      CHECK((n == 0.0 || std::abs(n - 1.0) < 1e-9));
      unit += n > 0.0 ? 1 : 0;
    }
    CHECK(unit == (idx == 0 ? want2d : want3d));
    ++idx;
  }

  Tensor bad({4, 4, 2});
  CHECK_THROWS_AS(pipe::image_features(g, store, cfg, bad), std::invalid_argument);
}

TEST_CASE("model: frozen geometric branch makes descriptors ignore conv weights") {
  pipe::RunConfig cfg = tiny_config();
  std::vector<pipe::FrameBundle> bundles = tiny_bundles(cfg);

  auto descriptor_after_conv1_bump = [&](bool branch_on, double bump) {
    pipe::RunConfig c = cfg;
    c.ablation.geometric_branch = branch_on;
    ParamStore store;
    Rng rng(11);
    pipe::init_model(store, c, rng);
    store.get("vlad.conv1.k").value.data()[0] += bump;
    return pipe::encode_image(store, c, bundles[0].rec.image);
  };

  Tensor off_a = descriptor_after_conv1_bump(false, 0.0);
  Tensor off_b = descriptor_after_conv1_bump(false, 0.5);
  CHECK((off_a.data() - off_b.data()).abs().maxCoeff() == 0.0);

  Tensor on_a = descriptor_after_conv1_bump(true, 0.0);
  Tensor on_b = descriptor_after_conv1_bump(true, 0.5);
  CHECK((on_a.data() - on_b.data()).abs().maxCoeff() > 1e-8);
}

TEST_CASE("plan_pairs: hold-out frames never appear and distances stay inside tau") {
  pipe::RunConfig cfg = tiny_config();
  std::vector<pipe::FrameBundle> bundles = tiny_bundles(cfg);
  pipe::PairPlan plan = pipe::plan_pairs(bundles, cfg);

  REQUIRE(plan.query_frames == std::vector<int>{3, 7, 11, 15});
  CHECK(plan.train_frames.size() == 12);
  CHECK(!plan.pairs.empty());
  for (const auto& [a, b] : plan.pairs) {
    CHECK(a % 4 != 3);
    CHECK(b % 4 != 3);
    CHECK(geo::pose_distance(bundles[static_cast<std::size_t>(a)].rec.t_wc,
                             bundles[static_cast<std::size_t>(b)].rec.t_wc) <
          cfg.contrastive.tau_d_pos);
  }
  for (int f : plan.train_frames)
    CHECK(std::count(plan.pairs.begin(), plan.pairs.end(), std::pair<int, int>{f, f}) == 1);

  pipe::RunConfig all = cfg;
  all.train.hold_out = 0;
  CHECK(pipe::plan_pairs(bundles, all).query_frames.empty());
}

TEST_CASE("view_scores: a self pair saturates the camera-facing window") {
  pipe::RunConfig cfg = tiny_config();
  std::vector<pipe::FrameBundle> bundles = tiny_bundles(cfg);

  std::vector<double> scores = pipe::view_scores(bundles, 5, 5, cfg);
  REQUIRE(static_cast<Index>(scores.size()) ==
          cfg.world.grid.cols / cfg.view_train.delta);
  const double best = *std::max_element(scores.begin(), scores.end());
  CHECK(best == doctest::Approx(1.0).epsilon(1e-12));

  loss::ViewLabelSet labels = loss::label_views(
      [&] {
        Tensor t({static_cast<Index>(scores.size())});
        for (std::size_t i = 0; i < scores.size(); ++i) t.data()[static_cast<Index>(i)] = scores[i];
        return t;
      }(),
      cfg.contrastive.tau_pos_score, cfg.contrastive.tau_neg_score);
  CHECK(!labels.positives.empty());
  CHECK(!labels.negatives.empty());
}

TEST_CASE("build_labels: covers exactly the requested pairs") {
  pipe::RunConfig cfg = tiny_config();
  std::vector<pipe::FrameBundle> bundles = tiny_bundles(cfg);
  pipe::PairPlan plan = pipe::plan_pairs(bundles, cfg);
  ovl::LabelCache cache = pipe::build_labels(bundles, plan.pairs, cfg);
  for (const auto& [a, b] : plan.pairs) CHECK(cache.has(a, b));
  CHECK(cache.size() == plan.pairs.size());
}

TEST_CASE("train: runs, logs CSV, and is bitwise deterministic") {
  pipe::RunConfig cfg = tiny_config();
  std::vector<pipe::FrameBundle> bundles = tiny_bundles(cfg);
  pipe::PairPlan plan = pipe::plan_pairs(bundles, cfg);
  ovl::LabelCache labels = pipe::build_labels(bundles, plan.pairs, cfg);

  auto run = [&](std::ostream* csv) {
    ParamStore store;
    Rng rng(21);
    pipe::init_model(store, cfg, rng);
    pipe::TrainResult r = pipe::train(store, cfg, bundles, labels, csv);
    return std::pair{std::move(r), store.get("vlad.fuse.w").value};
  };

  std::ostringstream csv;
  auto [r1, w1] = run(&csv);
  auto [r2, w2] = run(nullptr);

  REQUIRE(r1.steps.size() == 8);  // 2 epochs x 4 pairs
  REQUIRE(r1.epoch_loss.size() == 2);
  CHECK(r1.smoothed[0] == r1.epoch_loss[0]);
  CHECK(r1.smoothed[1] ==
        doctest::Approx(0.5 * r1.epoch_loss[0] + 0.5 * r1.epoch_loss[1]).epsilon(1e-15));
  for (const pipe::StepRecord& s : r1.steps) {
    CHECK(std::isfinite(s.loss));
    CHECK(s.lr == cfg.train.lr0);  // both epochs sit before the first decay
  }

  REQUIRE(r2.steps.size() == r1.steps.size());
  for (std::size_t i = 0; i < r1.steps.size(); ++i) {
    CHECK(r1.steps[i].loss == r2.steps[i].loss);
    CHECK(r1.steps[i].t1 == r2.steps[i].t1);
    CHECK(r1.steps[i].t2 == r2.steps[i].t2);
    CHECK(r1.steps[i].t3 == r2.steps[i].t3);
  }
  CHECK((w1.data() - w2.data()).abs().maxCoeff() == 0.0);

  std::istringstream lines(csv.str());
  std::string line;
  std::getline(lines, line);
  CHECK(line == "epoch,step,t1,t2,t3,loss,lr");
  int rows = 0;
  while (std::getline(lines, line)) ++rows;
  CHECK(rows == 8);
}

TEST_CASE("train: lr follows the decay schedule across epochs") {
  pipe::RunConfig cfg = tiny_config();
  cfg.train.epochs = 3;
  cfg.train.lr_interval = 2;
  cfg.train.pairs_per_epoch = 1;
  std::vector<pipe::FrameBundle> bundles = tiny_bundles(cfg);
  pipe::PairPlan plan = pipe::plan_pairs(bundles, cfg);
  ovl::LabelCache labels = pipe::build_labels(bundles, plan.pairs, cfg);

  ParamStore store;
  Rng rng(5);
  pipe::init_model(store, cfg, rng);
  pipe::TrainResult r = pipe::train(store, cfg, bundles, labels);
  REQUIRE(r.steps.size() == 3);
  CHECK(r.steps[0].lr == cfg.train.lr0);
  CHECK(r.steps[1].lr == cfg.train.lr0);
  CHECK(r.steps[2].lr == doctest::Approx(cfg.train.lr0 * cfg.train.lr_factor).epsilon(1e-15));
}

TEST_CASE("encode: cloud descriptors are unit rows with the expected starts") {
  pipe::RunConfig cfg = tiny_config();
  std::vector<pipe::FrameBundle> bundles = tiny_bundles(cfg);
  ParamStore store;
  Rng rng(6);
  pipe::init_model(store, cfg, rng);

  agg::ViewDescriptorSet set = pipe::encode_cloud(store, cfg, bundles[2], cfg.view_test);
  const Index n_v = cfg.world.grid.cols / cfg.view_test.delta;
  REQUIRE(set.descriptors.shape() == Shape{n_v, cfg.agg.d_g});
  CHECK(set.cloud_id == 2);
  REQUIRE(static_cast<Index>(set.starts.size()) == n_v);
  for (Index v = 0; v < n_v; ++v) CHECK(set.starts[static_cast<std::size_t>(v)] == v * cfg.view_test.delta);
  for (Index v = 0; v < n_v; ++v) {
    double n2 = 0.0;
    for (Index k = 0; k < cfg.agg.d_g; ++k)
      n2 += set.descriptors.at({v, k}) * set.descriptors.at({v, k});
    CHECK(std::abs(std::sqrt(n2) - 1.0) < 1e-9);
  }

  Tensor q = pipe::encode_image(store, cfg, bundles[2].rec.image);
  REQUIRE(q.shape() == Shape{cfg.agg.d_g});
  CHECK(std::abs(std::sqrt((q.data() * q.data()).sum()) - 1.0) < 1e-9);
}

TEST_CASE("eval: report carries the protocol fields") {
  pipe::RunConfig cfg = tiny_config();
  std::vector<pipe::FrameBundle> bundles = tiny_bundles(cfg);
  ParamStore store;
  Rng rng(7);
  pipe::init_model(store, cfg, rng);

  ret::DescriptorIndex index = pipe::build_cloud_index(store, cfg, bundles);
  CHECK(index.clouds() == static_cast<Index>(bundles.size()));

  pipe::PairPlan plan = pipe::plan_pairs(bundles, cfg);
  ret::EvalReport rep =
      pipe::evaluate_queries(store, cfg, bundles, plan.query_frames, index);
  CHECK(rep.queries == static_cast<Index>(plan.query_frames.size()));
  CHECK(rep.radius == cfg.eval.success_radius);
  CHECK(rep.rotated == false);
  CHECK(rep.n_1pct == 1);
  CHECK(rep.recall_1 >= 0.0);
  CHECK(rep.recall_1 <= 100.0);
}

TEST_CASE("yaw_eval: evaluates both arms over the same queries") {
  pipe::RunConfig cfg = tiny_config();
  std::vector<pipe::FrameBundle> bundles = tiny_bundles(cfg);
  ParamStore store;
  Rng rng(8);
  pipe::init_model(store, cfg, rng);

  std::vector<int> queries{1, 2, 5};
  ret::YawRobustness yr = pipe::yaw_eval(store, cfg, bundles, queries);
  CHECK(yr.baseline.queries == 3);
  CHECK(yr.rotated.queries == 3);
  CHECK(yr.baseline.rotated == false);
  CHECK(yr.rotated.rotated == true);
  CHECK(yr.yaws.size() == bundles.size());
  for (double y : yr.yaws) {
    CHECK(y >= 0.0);
    CHECK(y < 2.0 * 3.14159265358979323846);
  }
}

TEST_CASE("bench: both paths agree and the report is well formed") {
  pipe::RunConfig cfg = tiny_config();
  Rng rng(9);
  pipe::BenchReport rep = pipe::bench_multiview(cfg, cfg.view_test, 2, rng);
  CHECK(rep.n_views == cfg.world.grid.cols / cfg.view_test.delta);
  CHECK(rep.repeats == 2);
  CHECK(rep.naive_seconds > 0.0);
  CHECK(rep.efficient_seconds > 0.0);
  CHECK(rep.ratio == doctest::Approx(rep.naive_seconds / rep.efficient_seconds));
  CHECK(rep.max_abs_diff <= 1e-9);

  const std::string js = rep.to_json();
  CHECK(js.find("\"naive_seconds\"") != std::string::npos);
  CHECK(js.find("\"ratio\"") != std::string::npos);

  CHECK_THROWS_AS(pipe::bench_multiview(cfg, cfg.view_test, 0, rng), std::invalid_argument);
}
