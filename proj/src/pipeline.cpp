#include "xmpr/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <json.hpp>
#include <numeric>
#include <ostream>
#include <sstream>
#include <stdexcept>

namespace xmpr::pipe {

namespace {

using nlohmann::json;
using nlohmann::ordered_json;

[[noreturn]] void bad_field(const std::string& field, const std::string& why) {
  throw std::invalid_argument("config: " + field + " " + why);
}

void require(bool ok, const std::string& field, const std::string& why) {
  if (!ok) bad_field(field, why);
}

}  // namespace

void RunConfig::validate() const {
  require(threads >= 1, "threads", "must be >= 1");
  world.validate();
  require(backbone.d_model >= 1, "backbone.d_model", "must be >= 1");
  require(backbone.state_size >= 1, "backbone.state_size", "must be >= 1");
  require(backbone.scales >= 1, "backbone.scales", "must be >= 1");
  require(backbone.blocks_per_scale >= 1, "backbone.blocks_per_scale", "must be >= 1");
  require(backbone.d_f >= 1, "backbone.d_f", "must be >= 1");
  require(backbone.scan_block >= 1, "backbone.scan_block", "must be >= 1");
  require(agg.d_f == backbone.d_f, "backbone.d_f", "must match the aggregation width");
  require(agg.clusters >= 1, "agg.clusters", "must be >= 1");
  require(agg.conv_hidden >= 1, "agg.conv_hidden", "must be >= 1");
  require(agg.conv_dim >= 1, "agg.conv_dim", "must be >= 1");
  require(agg.d_g >= 1, "agg.d_g", "must be >= 1");

  const Index coarsest = Index{1} << (backbone.scales - 1);
  require(world.grid.rows % coarsest == 0, "world.grid.rows",
          "must be divisible by the coarsest pyramid scale");
  require(world.grid.cols % coarsest == 0, "world.grid.cols",
          "must be divisible by the coarsest pyramid scale");
  require(world.camera.height % coarsest == 0, "world.camera.height",
          "must be divisible by the coarsest pyramid scale");
  require(world.camera.width % coarsest == 0, "world.camera.width",
          "must be divisible by the coarsest pyramid scale");

  view_train.validate(world.grid.cols);
  view_test.validate(world.grid.cols);
  contrastive.validate();

  require(train.epochs >= 1, "train.epochs", "must be >= 1");
  require(train.lr0 > 0.0, "train.lr0", "must be > 0");
  require(train.lr_factor > 0.0 && train.lr_factor <= 1.0, "train.lr_factor",
          "must be in (0, 1]");
  require(train.lr_interval >= 1, "train.lr_interval", "must be >= 1");
  require(train.weight_decay >= 0.0, "train.weight_decay", "must be >= 0");
  require(train.pairs_per_epoch >= 1, "train.pairs_per_epoch", "must be >= 1");
  require(train.hold_out == 0 || train.hold_out >= 2, "train.hold_out",
          "must be 0 or >= 2");

  require(eval.epsilon > 0.0, "eval.epsilon", "must be > 0");
  require(eval.success_radius > 0.0, "eval.success_radius", "must be > 0");
}

RunConfig desk_config() {
  RunConfig cfg;
  cfg.world.objects = 24;
  cfg.world.laps = 2;
  cfg.world.frames_per_lap = 25;
  cfg.world.loop_radius = 12.0;
  cfg.world.grid = {16, 120, 3.0, -25.0};
  cfg.world.camera = {48.0, 48.0, 24.0, 16.0, 48, 32};

  cfg.backbone.d_model = 8;
  cfg.backbone.state_size = 4;
  cfg.backbone.scales = 2;
  cfg.backbone.blocks_per_scale = 1;
  cfg.backbone.d_f = 16;
  cfg.backbone.scan_mode = ad::ScanMode::Blocked;
  cfg.backbone.discretization = ad::Discretization::ZohExact;

  cfg.agg.clusters = 8;
  cfg.agg.d_f = 16;
  cfg.agg.conv_hidden = 8;
  cfg.agg.conv_dim = 8;
  cfg.agg.d_g = 32;

  cfg.view_train = {20, 4};
  cfg.view_test = {20, 4};

  cfg.contrastive.tau_d_pos = 3.2;  // same-lap neighbours sit at ~3.01 m
  cfg.contrastive.mine.n_s = 96;
  cfg.contrastive.mine.r_pos = 1.5;
  cfg.contrastive.mine.r_neg = 5.0;
  cfg.contrastive.mine.max_negatives = 24;

  cfg.train.epochs = 18;
  cfg.train.pairs_per_epoch = 96;

  cfg.eval.success_radius = 4.0;
  return cfg;
}

// ---------------------------------------------------------------------------
// JSON round trip

namespace {

void check_keys(const json& j, const std::string& where,
                std::initializer_list<const char*> allowed) {
  for (const auto& item : j.items()) {
    bool ok = false;
    for (const char* k : allowed) ok = ok || item.key() == k;
    if (!ok)
      throw std::invalid_argument("config: unknown key '" +
                                  (where.empty() ? item.key() : where + "." + item.key()) +
                                  "'");
  }
}

std::pair<double, double> read_pair(const json& j, const std::string& field) {
  if (!j.is_array() || j.size() != 2)
    bad_field(field, "must be a two-element array");
  return {j[0].get<double>(), j[1].get<double>()};
}

void world_from_json(const json& j, data::WorldConfig& w) {
  check_keys(j, "world",
             {"seed", "objects", "laps", "frames_per_lap", "loop_radius", "lap_offset",
              "sensor_height", "max_range", "ground", "grid", "camera"});
  w.seed = j.value("seed", w.seed);
  w.objects = j.value("objects", w.objects);
  w.laps = j.value("laps", w.laps);
  w.frames_per_lap = j.value("frames_per_lap", w.frames_per_lap);
  w.loop_radius = j.value("loop_radius", w.loop_radius);
  w.lap_offset = j.value("lap_offset", w.lap_offset);
  w.sensor_height = j.value("sensor_height", w.sensor_height);
  w.max_range = j.value("max_range", w.max_range);
  w.ground = j.value("ground", w.ground);
  if (j.contains("grid")) {
    const json& g = j["grid"];
    check_keys(g, "world.grid", {"rows", "cols", "fov_up", "fov_down"});
    w.grid.rows = g.value("rows", w.grid.rows);
    w.grid.cols = g.value("cols", w.grid.cols);
    w.grid.fov_up_deg = g.value("fov_up", w.grid.fov_up_deg);
    w.grid.fov_down_deg = g.value("fov_down", w.grid.fov_down_deg);
  }
  if (j.contains("camera")) {
    const json& c = j["camera"];
    check_keys(c, "world.camera", {"fx", "fy", "cx", "cy", "width", "height"});
    w.camera.fx = c.value("fx", w.camera.fx);
    w.camera.fy = c.value("fy", w.camera.fy);
    w.camera.cx = c.value("cx", w.camera.cx);
    w.camera.cy = c.value("cy", w.camera.cy);
    w.camera.width = c.value("width", w.camera.width);
    w.camera.height = c.value("height", w.camera.height);
  }
}

ordered_json world_to_json(const data::WorldConfig& w) {
  ordered_json j;
  j["seed"] = w.seed;
  j["objects"] = w.objects;
  j["laps"] = w.laps;
  j["frames_per_lap"] = w.frames_per_lap;
  j["loop_radius"] = w.loop_radius;
  j["lap_offset"] = w.lap_offset;
  j["sensor_height"] = w.sensor_height;
  j["max_range"] = w.max_range;
  j["ground"] = w.ground;
  j["grid"] = {{"rows", w.grid.rows},
               {"cols", w.grid.cols},
               {"fov_up", w.grid.fov_up_deg},
               {"fov_down", w.grid.fov_down_deg}};
  j["camera"] = {{"fx", w.camera.fx},       {"fy", w.camera.fy},
                 {"cx", w.camera.cx},       {"cy", w.camera.cy},
                 {"width", w.camera.width}, {"height", w.camera.height}};
  return j;
}

const char* scan_mode_name(ad::ScanMode m) {
  return m == ad::ScanMode::Blocked ? "blocked" : "sequential";
}

const char* discretization_name(ad::Discretization d) {
  return d == ad::Discretization::ZohExact ? "zoh" : "euler";
}

}  // namespace

std::string config_json(const RunConfig& cfg) {
  ordered_json j;
  j["seed"] = cfg.seed;
  j["threads"] = cfg.threads;
  j["world"] = world_to_json(cfg.world);
  j["backbone"] = {{"d_model", cfg.backbone.d_model},
                   {"state_size", cfg.backbone.state_size},
                   {"scales", cfg.backbone.scales},
                   {"blocks_per_scale", cfg.backbone.blocks_per_scale},
                   {"d_f", cfg.backbone.d_f},
                   {"scan_mode", scan_mode_name(cfg.backbone.scan_mode)},
                   {"discretization", discretization_name(cfg.backbone.discretization)},
                   {"scan_block", cfg.backbone.scan_block}};
  j["agg"] = {{"clusters", cfg.agg.clusters},
              {"conv_hidden", cfg.agg.conv_hidden},
              {"conv_dim", cfg.agg.conv_dim},
              {"d_g", cfg.agg.d_g}};
  j["views"] = {{"window", cfg.view_train.window},
                {"delta_train", cfg.view_train.delta},
                {"delta_test", cfg.view_test.delta}};
  j["loss"] = {{"pixel_margins", {cfg.contrastive.pixel.delta_pos, cfg.contrastive.pixel.delta_neg}},
               {"view_margins", {cfg.contrastive.view.delta_pos, cfg.contrastive.view.delta_neg}},
               {"lambda", cfg.contrastive.pixel.lambda},
               {"clip_weights", cfg.contrastive.pixel.clip_weights},
               {"tau_score", {cfg.contrastive.tau_pos_score, cfg.contrastive.tau_neg_score}},
               {"tau_distance", {cfg.contrastive.tau_d_pos, cfg.contrastive.tau_d_neg}},
               {"n_s", cfg.contrastive.mine.n_s},
               {"r_pos", cfg.contrastive.mine.r_pos},
               {"r_neg", cfg.contrastive.mine.r_neg},
               {"max_negatives", cfg.contrastive.mine.max_negatives}};
  j["train"] = {{"epochs", cfg.train.epochs},
                {"lr0", cfg.train.lr0},
                {"lr_factor", cfg.train.lr_factor},
                {"lr_interval", cfg.train.lr_interval},
                {"weight_decay", cfg.train.weight_decay},
                {"pairs_per_epoch", cfg.train.pairs_per_epoch},
                {"hold_out", cfg.train.hold_out}};
  j["eval"] = {{"epsilon", cfg.eval.epsilon},
               {"success_radius", cfg.eval.success_radius}};
  j["ablation"] = {{"pixel_loss", cfg.ablation.pixel_loss},
                   {"scene_loss", cfg.ablation.scene_loss},
                   {"geometric_branch", cfg.ablation.geometric_branch}};
  return j.dump(2) + "\n";
}

RunConfig parse_config(const std::string& text, RunConfig base) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw std::invalid_argument(std::string("config: not valid JSON: ") + e.what());
  }
  if (!j.is_object()) throw std::invalid_argument("config: top level must be an object");
  check_keys(j, "", {"seed", "threads", "world", "backbone", "agg", "views", "loss",
                     "train", "eval", "ablation"});

  RunConfig cfg = std::move(base);
  cfg.seed = j.value("seed", cfg.seed);
  cfg.threads = j.value("threads", cfg.threads);
  if (j.contains("world")) world_from_json(j["world"], cfg.world);
  if (j.contains("backbone")) {
    const json& b = j["backbone"];
    check_keys(b, "backbone", {"d_model", "state_size", "scales", "blocks_per_scale",
                               "d_f", "scan_mode", "discretization", "scan_block"});
    cfg.backbone.d_model = b.value("d_model", cfg.backbone.d_model);
    cfg.backbone.state_size = b.value("state_size", cfg.backbone.state_size);
    cfg.backbone.scales = b.value("scales", cfg.backbone.scales);
    cfg.backbone.blocks_per_scale = b.value("blocks_per_scale", cfg.backbone.blocks_per_scale);
    cfg.backbone.d_f = b.value("d_f", cfg.backbone.d_f);
    cfg.backbone.scan_block = b.value("scan_block", cfg.backbone.scan_block);
    if (b.contains("scan_mode")) {
      const std::string m = b["scan_mode"].get<std::string>();
      if (m == "blocked") cfg.backbone.scan_mode = ad::ScanMode::Blocked;
      else if (m == "sequential") cfg.backbone.scan_mode = ad::ScanMode::Sequential;
      else bad_field("backbone.scan_mode", "must be 'sequential' or 'blocked'");
    }
    if (b.contains("discretization")) {
      const std::string d = b["discretization"].get<std::string>();
      if (d == "zoh") cfg.backbone.discretization = ad::Discretization::ZohExact;
      else if (d == "euler") cfg.backbone.discretization = ad::Discretization::Euler;
      else bad_field("backbone.discretization", "must be 'zoh' or 'euler'");
    }
  }
  cfg.agg.d_f = cfg.backbone.d_f;
  if (j.contains("agg")) {
    const json& a = j["agg"];
    check_keys(a, "agg", {"clusters", "conv_hidden", "conv_dim", "d_g"});
    cfg.agg.clusters = a.value("clusters", cfg.agg.clusters);
    cfg.agg.conv_hidden = a.value("conv_hidden", cfg.agg.conv_hidden);
    cfg.agg.conv_dim = a.value("conv_dim", cfg.agg.conv_dim);
    cfg.agg.d_g = a.value("d_g", cfg.agg.d_g);
  }
  if (j.contains("views")) {
    const json& v = j["views"];
    check_keys(v, "views", {"window", "delta_train", "delta_test"});
    cfg.view_train.window = v.value("window", cfg.view_train.window);
    cfg.view_test.window = cfg.view_train.window;
    cfg.view_train.delta = v.value("delta_train", cfg.view_train.delta);
    cfg.view_test.delta = v.value("delta_test", cfg.view_test.delta);
  }
  if (j.contains("loss")) {
    const json& l = j["loss"];
    check_keys(l, "loss", {"pixel_margins", "view_margins", "lambda", "clip_weights",
                           "tau_score", "tau_distance", "n_s", "r_pos", "r_neg",
                           "max_negatives"});
    if (l.contains("pixel_margins")) {
      auto [p, n] = read_pair(l["pixel_margins"], "loss.pixel_margins");
      cfg.contrastive.pixel.delta_pos = p;
      cfg.contrastive.pixel.delta_neg = n;
    }
    if (l.contains("view_margins")) {
      auto [p, n] = read_pair(l["view_margins"], "loss.view_margins");
      cfg.contrastive.view.delta_pos = p;
      cfg.contrastive.view.delta_neg = n;
    }
    if (l.contains("lambda")) {
      cfg.contrastive.pixel.lambda = l["lambda"].get<double>();
      cfg.contrastive.view.lambda = cfg.contrastive.pixel.lambda;
    }
    if (l.contains("clip_weights")) {
      cfg.contrastive.pixel.clip_weights = l["clip_weights"].get<bool>();
      cfg.contrastive.view.clip_weights = cfg.contrastive.pixel.clip_weights;
    }
    if (l.contains("tau_score")) {
      auto [p, n] = read_pair(l["tau_score"], "loss.tau_score");
      cfg.contrastive.tau_pos_score = p;
      cfg.contrastive.tau_neg_score = n;
    }
    if (l.contains("tau_distance")) {
      auto [p, n] = read_pair(l["tau_distance"], "loss.tau_distance");
      cfg.contrastive.tau_d_pos = p;
      cfg.contrastive.tau_d_neg = n;
    }
    cfg.contrastive.mine.n_s = l.value("n_s", cfg.contrastive.mine.n_s);
    cfg.contrastive.mine.r_pos = l.value("r_pos", cfg.contrastive.mine.r_pos);
    cfg.contrastive.mine.r_neg = l.value("r_neg", cfg.contrastive.mine.r_neg);
    cfg.contrastive.mine.max_negatives =
        l.value("max_negatives", cfg.contrastive.mine.max_negatives);
  }
  if (j.contains("train")) {
    const json& t = j["train"];
    check_keys(t, "train", {"epochs", "lr0", "lr_factor", "lr_interval", "weight_decay",
                            "pairs_per_epoch", "hold_out"});
    cfg.train.epochs = t.value("epochs", cfg.train.epochs);
    cfg.train.lr0 = t.value("lr0", cfg.train.lr0);
    cfg.train.lr_factor = t.value("lr_factor", cfg.train.lr_factor);
    cfg.train.lr_interval = t.value("lr_interval", cfg.train.lr_interval);
    cfg.train.weight_decay = t.value("weight_decay", cfg.train.weight_decay);
    cfg.train.pairs_per_epoch = t.value("pairs_per_epoch", cfg.train.pairs_per_epoch);
    cfg.train.hold_out = t.value("hold_out", cfg.train.hold_out);
  }
  if (j.contains("eval")) {
    const json& e = j["eval"];
    check_keys(e, "eval", {"epsilon", "success_radius"});
    cfg.eval.epsilon = e.value("epsilon", cfg.eval.epsilon);
    cfg.eval.success_radius = e.value("success_radius", cfg.eval.success_radius);
  }
  if (j.contains("ablation")) {
    const json& a = j["ablation"];
    check_keys(a, "ablation", {"pixel_loss", "scene_loss", "geometric_branch"});
    cfg.ablation.pixel_loss = a.value("pixel_loss", cfg.ablation.pixel_loss);
    cfg.ablation.scene_loss = a.value("scene_loss", cfg.ablation.scene_loss);
    cfg.ablation.geometric_branch =
        a.value("geometric_branch", cfg.ablation.geometric_branch);
  }
  cfg.validate();
  return cfg;
}

RunConfig load_run_config(const std::string& path, RunConfig base) {
  std::ifstream is(path);
  if (!is) throw std::invalid_argument("config: cannot open '" + path + "'");
  std::ostringstream ss;
  ss << is.rdbuf();
  return parse_config(ss.str(), std::move(base));
}

void save_run_config(const std::string& path, const RunConfig& cfg) {
  cfg.validate();
  std::ofstream os(path);
  if (!os) throw std::runtime_error("config: cannot write '" + path + "'");
  os << config_json(cfg);
}

// ---------------------------------------------------------------------------
// Model

bb::BackboneConfig image_backbone(const RunConfig& cfg) {
  bb::BackboneConfig b = cfg.backbone;
  b.in_channels = data::kImageChannels;
  return b;
}

bb::BackboneConfig range_backbone(const RunConfig& cfg) {
  bb::BackboneConfig b = cfg.backbone;
  b.in_channels = 1;
  return b;
}

void init_model(ParamStore& store, const RunConfig& cfg, Rng& rng) {
  cfg.validate();
  Rng ri = rng.fork(1), rr = rng.fork(2), rv = rng.fork(3);
  bb::init_pyramid(store, kImagePrefix, image_backbone(cfg), ri);
  bb::init_pyramid(store, kRangePrefix, range_backbone(cfg), rr);
  agg::init_vlad(store, kVladPrefix, cfg.agg, rv);
  if (!cfg.ablation.geometric_branch) {
    ad::Parameter& k = store.get(std::string(kVladPrefix) + ".conv2.k");
    ad::Parameter& b = store.get(std::string(kVladPrefix) + ".conv2.b");
    k.value = Tensor::zeros(k.value.shape());
    b.value = Tensor::zeros(b.value.shape());
  }
}

std::vector<ad::Parameter*> trainable_params(ParamStore& store, const RunConfig& cfg) {
  std::vector<ad::Parameter*> out = store.all();
  if (!cfg.ablation.geometric_branch) {
    const std::string k = std::string(kVladPrefix) + ".conv2.k";
    const std::string b = std::string(kVladPrefix) + ".conv2.b";
    std::erase_if(out, [&](ad::Parameter* p) { return p->name == k || p->name == b; });
  }
  return out;
}

ad::Var image_features(ad::Graph& g, ParamStore& store, const RunConfig& cfg,
                       const Tensor& image) {
  const Shape& s = image.shape();
  if (s.size() != 3 || s[2] != data::kImageChannels)
    throw std::invalid_argument("pipeline: image must be H x W x " +
                                std::to_string(data::kImageChannels) + ", got " +
                                shape_string(s));
  Tensor scaled = image;
  for (Index r = 0; r < s[0]; ++r)
    for (Index c = 0; c < s[1]; ++c)
      scaled.at({r, c, 0}) /= cfg.world.max_range;
  ad::Var f = bb::pyramid_forward(g, store, kImagePrefix, g.constant(std::move(scaled)),
                                  image_backbone(cfg));
  return ad::l2_normalize(f);
}

ad::Var range_features(ad::Graph& g, ParamStore& store, const RunConfig& cfg,
                       const geo::RangeImage& range) {
  const Index rows = range.grid.rows, cols = range.grid.cols;
  Tensor in({rows, cols, 1});
  in.data() = range.values.data() / cfg.world.max_range;
  ad::Var f = bb::pyramid_forward(g, store, kRangePrefix, g.constant(std::move(in)),
                                  range_backbone(cfg));
  return ad::l2_normalize(f);
}

Tensor image_content_mask(const Tensor& image) {
  const Shape& s = image.shape();
  Tensor mask = Tensor::zeros({s[0], s[1]});
  for (Index r = 0; r < s[0]; ++r)
    for (Index c = 0; c < s[1]; ++c)
      for (Index ch = 0; ch < s[2]; ++ch)
        if (image.at({r, c, ch}) != 0.0) {
          mask.at({r, c}) = 1.0;
          break;
        }
  return mask;
}

Tensor range_content_mask(const geo::RangeImage& range) {
  Tensor mask(range.values.shape());
  for (Index i = 0; i < mask.numel(); ++i)
    mask.data()[i] = range.values.data()[i] > 0.0 ? 1.0 : 0.0;
  return mask;
}

ad::Var image_descriptor(ad::Graph& g, ParamStore& store, const RunConfig& cfg,
                         ad::Var f2d, const Tensor& image) {
  const Tensor mask = image_content_mask(image);
  return agg::xnetvlad_descriptor(g, store, kVladPrefix, f2d, cfg.agg, ad::Pad::Zero,
                                  &mask);
}

ad::Var cloud_view_descriptors(ad::Graph& g, ParamStore& store, const RunConfig& cfg,
                               ad::Var f3d, const geo::RangeImage& range,
                               const agg::ViewConfig& view,
                               std::vector<Index>* starts) {
  const Tensor mask = range_content_mask(range);
  return agg::multiview_efficient(g, store, kVladPrefix, f3d, cfg.agg, view, starts,
                                  &mask);
}

// ---------------------------------------------------------------------------
// Data plumbing

std::vector<FrameBundle> simulate_bundles(const data::SyntheticWorld& world) {
  std::vector<FrameBundle> out;
  out.reserve(static_cast<std::size_t>(world.config.frames()));
  for (Index f = 0; f < world.config.frames(); ++f) {
    FrameBundle b;
    b.rec = data::simulate_sensors(world, f, &b.range);
    out.push_back(std::move(b));
  }
  return out;
}

std::vector<FrameBundle> project_bundles(std::vector<data::FrameRecord> frames,
                                         const geo::SphericalGrid& grid) {
  std::vector<FrameBundle> out;
  out.reserve(frames.size());
  for (auto& f : frames) {
    FrameBundle b;
    b.range = geo::spherical_project(f.cloud, grid);
    b.rec = std::move(f);
    out.push_back(std::move(b));
  }
  return out;
}

PairPlan plan_pairs(const std::vector<FrameBundle>& bundles, const RunConfig& cfg) {
  PairPlan plan;
  const int n = static_cast<int>(bundles.size());
  const int h = cfg.train.hold_out;
  for (int i = 0; i < n; ++i) {
    if (h > 0 && i % h == h - 1)
      plan.query_frames.push_back(i);
    else
      plan.train_frames.push_back(i);
  }
  for (int a : plan.train_frames)
    for (int b : plan.train_frames) {
      const double d = geo::pose_distance(bundles[static_cast<std::size_t>(a)].rec.t_wc,
                                          bundles[static_cast<std::size_t>(b)].rec.t_wc);
      if (d < cfg.contrastive.tau_d_pos) plan.pairs.emplace_back(a, b);
    }
  return plan;
}

std::vector<double> view_scores(const std::vector<FrameBundle>& bundles, int t1, int t2,
                                const RunConfig& cfg) {
  const FrameBundle& b1 = bundles.at(static_cast<std::size_t>(t1));
  const FrameBundle& b2 = bundles.at(static_cast<std::size_t>(t2));
  geo::PointCloud cam = geo::transform_cloud(geo::invert(b1.rec.t_lc), b1.rec.cloud,
                                             {geo::FrameKind::Camera, t1});
  geo::PointCloud fov = geo::fov_filter(cam, cfg.world.camera);
  geo::PointCloud lid = geo::reproject_to_lidar(fov, b1.rec.t_wc, b2.rec.t_wc,
                                                b2.rec.t_lc, t1, t2);
  geo::RangeImage dp = geo::spherical_project(lid, cfg.world.grid);
  ovl::VisibleMap vm = ovl::visible_map(b2.range, dp, cfg.eval.epsilon, fov.size(), t1, t2);
  return ovl::view_similarity(vm, cfg.view_train.window, cfg.view_train.delta).scores;
}

ovl::LabelCache build_labels(const std::vector<FrameBundle>& bundles,
                             const std::vector<std::pair<int, int>>& pairs,
                             const RunConfig& cfg) {
  ovl::LabelCache cache;
  for (const auto& [t1, t2] : pairs)
    if (!cache.has(t1, t2)) cache.put(t1, t2, view_scores(bundles, t1, t2, cfg));
  return cache;
}

// ---------------------------------------------------------------------------
// Training

namespace {

int pick_scene(const PairPlan& plan, const std::vector<FrameBundle>& bundles, int t1,
               int t2, const RunConfig& cfg, Rng& rng) {
  std::vector<int> far;
  for (int f : plan.train_frames) {
    const auto& p = bundles[static_cast<std::size_t>(f)].rec.t_wc;
    if (geo::pose_distance(p, bundles[static_cast<std::size_t>(t1)].rec.t_wc) >
            cfg.contrastive.tau_d_neg &&
        geo::pose_distance(p, bundles[static_cast<std::size_t>(t2)].rec.t_wc) >
            cfg.contrastive.tau_d_neg)
      far.push_back(f);
  }
  if (far.empty()) return -1;
  return far[static_cast<std::size_t>(rng.uniform_index(static_cast<Index>(far.size())))];
}

Tensor score_tensor(const std::vector<double>& scores) {
  Tensor t({static_cast<Index>(scores.size())});
  for (Index i = 0; i < t.numel(); ++i) t.data()[i] = scores[static_cast<std::size_t>(i)];
  return t;
}

}  // namespace

TrainResult train(ParamStore& store, const RunConfig& cfg,
                  const std::vector<FrameBundle>& bundles,
                  const ovl::LabelCache& labels, std::ostream* csv) {
  cfg.validate();
  PairPlan plan = plan_pairs(bundles, cfg);
  if (plan.pairs.empty())
    throw std::runtime_error("train: no frame pairs within tau_d_pos");

  std::vector<ad::Parameter*> params = trainable_params(store, cfg);
  AdamW opt({cfg.train.lr0, 0.9, 0.999, 1e-8, cfg.train.weight_decay});
  Rng root(cfg.seed);
  Rng order_rng = root.fork(101);
  Rng mine_rng = root.fork(102);
  Rng scene_rng = root.fork(103);

  if (csv) *csv << "epoch,step,t1,t2,t3,loss,lr\n";

  TrainResult out;
  int global = 0;
  for (int epoch = 0; epoch < cfg.train.epochs; ++epoch) {
    const double lr =
        lr_schedule(epoch, cfg.train.lr0, cfg.train.lr_factor, cfg.train.lr_interval);
    opt.set_lr(lr);

    std::vector<std::size_t> order(plan.pairs.size());
    std::iota(order.begin(), order.end(), 0u);
    for (std::size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1],
                order[static_cast<std::size_t>(order_rng.uniform_index(static_cast<Index>(i)))]);
    const std::size_t take =
        std::min<std::size_t>(order.size(), static_cast<std::size_t>(cfg.train.pairs_per_epoch));

    double sum = 0.0;
    int counted = 0;
    for (std::size_t k = 0; k < take; ++k, ++global) {
      const auto [t1, t2] = plan.pairs[order[k]];
      const FrameBundle& b1 = bundles[static_cast<std::size_t>(t1)];
      const FrameBundle& b2 = bundles[static_cast<std::size_t>(t2)];
      const int t3 = cfg.ablation.scene_loss
                         ? pick_scene(plan, bundles, t1, t2, cfg, scene_rng)
                         : -1;

      ad::Graph g;
      ad::Var f2d = image_features(g, store, cfg, b1.rec.image);
      ad::Var f3d = range_features(g, store, cfg, b2.range);
      ad::Var f3d_extra, views_extra;
      if (t3 >= 0) {
        f3d_extra =
            range_features(g, store, cfg, bundles[static_cast<std::size_t>(t3)].range);
        views_extra = cloud_view_descriptors(
            g, store, cfg, f3d_extra, bundles[static_cast<std::size_t>(t3)].range,
            cfg.view_train);
      }

      loss::LossResult pix{ad::Var{}, true};
      if (cfg.ablation.pixel_loss) {
        loss::PixelPairSet set = loss::mine_pixel_pairs(
            b2.rec.cloud, t1, b1.rec.t_wc, b2.rec.t_wc, b2.rec.t_lc, cfg.world.camera,
            cfg.world.grid, cfg.contrastive.mine, mine_rng);
        if (t3 >= 0 && !set.anchors.empty()) {
          const Index count = cfg.contrastive.mine.max_negatives > 0
                                  ? cfg.contrastive.mine.max_negatives
                                  : Index{64};
          loss::extend_pixel_negatives(set, cfg.world.grid.rows * cfg.world.grid.cols,
                                       count, mine_rng);
        }
        pix = loss::pixel_loss(g, set, f2d, f3d, cfg.contrastive.pixel, f3d_extra);
      }

      ad::Var g2d = image_descriptor(g, store, cfg, f2d, b1.rec.image);
      ad::Var views = cloud_view_descriptors(g, store, cfg, f3d, b2.range, cfg.view_train);
      loss::ViewLabelSet vl =
          loss::label_views(score_tensor(labels.get(t1, t2)), cfg.contrastive.tau_pos_score,
                            cfg.contrastive.tau_neg_score);
      loss::LossResult view =
          loss::view_loss(g, g2d, views, vl, cfg.contrastive.view, views_extra);
      loss::LossResult joint = loss::joint_loss(g, pix, view);

      StepRecord rec{epoch, global, t1, t2, t3, 0.0, lr, joint.skipped};
      if (!joint.skipped) {
        rec.loss = joint.value.value().data()[0];
        g.backward(joint.value);
        store.zero_grad();
        g.accumulate_param_grads();
        opt.step(params);
        sum += rec.loss;
        ++counted;
      }
      if (csv)
        *csv << epoch << ',' << global << ',' << t1 << ',' << t2 << ',' << t3 << ','
             << std::setprecision(12) << rec.loss << ',' << lr << '\n';
      out.steps.push_back(rec);
    }

    const double mean = counted > 0 ? sum / counted : 0.0;
    out.epoch_loss.push_back(mean);
    out.smoothed.push_back(out.smoothed.empty() ? mean
                                                : 0.5 * out.smoothed.back() + 0.5 * mean);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Inference and evaluation

agg::ViewDescriptorSet encode_cloud(ParamStore& store, const RunConfig& cfg,
                                    const FrameBundle& bundle, const agg::ViewConfig& view,
                                    double yaw) {
  geo::RangeImage range;
  if (yaw == 0.0) {
    range = bundle.range;
  } else {
    geo::PointCloud rot = geo::transform_cloud(geo::yaw_rotation(yaw), bundle.rec.cloud,
                                               bundle.rec.cloud.frame);
    range = geo::spherical_project(rot, cfg.world.grid);
  }
  ad::Graph g;
  ad::Var f3d = range_features(g, store, cfg, range);
  std::vector<Index> starts;
  ad::Var v = cloud_view_descriptors(g, store, cfg, f3d, range, view, &starts);

  agg::ViewDescriptorSet set;
  set.cloud_id = bundle.rec.frame_id;
  set.starts = std::move(starts);
  set.descriptors = v.value();
  return set;
}

Tensor encode_image(ParamStore& store, const RunConfig& cfg, const Tensor& image) {
  ad::Graph g;
  ad::Var f2d = image_features(g, store, cfg, image);
  return image_descriptor(g, store, cfg, f2d, image).value();
}

ret::DescriptorIndex build_cloud_index(ParamStore& store, const RunConfig& cfg,
                                       const std::vector<FrameBundle>& bundles) {
  std::vector<agg::ViewDescriptorSet> sets;
  std::vector<ret::CloudMeta> meta;
  sets.reserve(bundles.size());
  meta.reserve(bundles.size());
  for (const FrameBundle& b : bundles) {
    sets.push_back(encode_cloud(store, cfg, b, cfg.view_test));
    meta.push_back({b.rec.time, b.rec.t_wc.translation});
  }
  return ret::build_index(sets, meta);
}

ret::EvalReport evaluate_queries(ParamStore& store, const RunConfig& cfg,
                                 const std::vector<FrameBundle>& bundles,
                                 const std::vector<int>& query_frames,
                                 const ret::DescriptorIndex& index, bool rotated) {
  std::vector<ret::QueryResult> results;
  results.reserve(query_frames.size());
  for (int q : query_frames) {
    const FrameBundle& b = bundles.at(static_cast<std::size_t>(q));
    Tensor g2d = encode_image(store, cfg, b.rec.image);
    ret::QueryResult r = ret::query(index, g2d, index.clouds(), b.rec.time);
    r.query_frame = b.rec.time;
    r.query_position = b.rec.t_wc.translation;
    results.push_back(std::move(r));
  }
  return ret::evaluate(index, results, cfg.eval.success_radius, cfg.seed, rotated);
}

ret::YawRobustness yaw_eval(ParamStore& store, const RunConfig& cfg,
                            const std::vector<FrameBundle>& bundles,
                            const std::vector<int>& query_frames) {
  std::vector<ret::CloudMeta> meta;
  meta.reserve(bundles.size());
  for (const FrameBundle& b : bundles) meta.push_back({b.rec.time, b.rec.t_wc.translation});

  std::vector<ret::QueryItem> queries;
  queries.reserve(query_frames.size());
  for (int q : query_frames) {
    const FrameBundle& b = bundles.at(static_cast<std::size_t>(q));
    queries.push_back({b.rec.time, b.rec.t_wc.translation,
                       encode_image(store, cfg, b.rec.image)});
  }

  ret::CloudEncoder enc = [&](Index cloud, double yaw) {
    return encode_cloud(store, cfg, bundles.at(static_cast<std::size_t>(cloud)),
                        cfg.view_test, yaw);
  };
  return ret::yaw_robustness_eval(enc, meta, queries, cfg.eval.success_radius, cfg.seed);
}

// ---------------------------------------------------------------------------
// Benchmark

std::string BenchReport::to_json() const {
  ordered_json j;
  j["rows"] = rows;
  j["cols"] = cols;
  j["d_f"] = d_f;
  j["window"] = window;
  j["delta"] = delta;
  j["n_views"] = n_views;
  j["repeats"] = repeats;
  j["naive_seconds"] = naive_seconds;
  j["efficient_seconds"] = efficient_seconds;
  j["ratio"] = ratio;
  j["max_abs_diff"] = max_abs_diff;
  return j.dump(2) + "\n";
}

BenchReport bench_multiview(const RunConfig& cfg, const agg::ViewConfig& view,
                            Index repeats, Rng& rng) {
  if (repeats < 1) throw std::invalid_argument("bench: repeats must be >= 1");
  view.validate(cfg.world.grid.cols);

  BenchReport rep;
  rep.rows = cfg.world.grid.rows;
  rep.cols = cfg.world.grid.cols;
  rep.d_f = cfg.agg.d_f;
  rep.window = view.window;
  rep.delta = view.delta;
  rep.n_views = view.n_views(cfg.world.grid.cols);
  rep.repeats = repeats;

  ParamStore store;
  Rng init = rng.fork(1);
  agg::init_vlad(store, "bench", cfg.agg, init);

  using clock = std::chrono::steady_clock;
  for (Index r = 0; r < repeats; ++r) {
    Tensor f({rep.rows, rep.cols, rep.d_f});
    for (Index i = 0; i < f.numel(); ++i) f.data()[i] = rng.normal();

    const auto t0 = clock::now();
    ad::Graph gn;
    Tensor naive =
        agg::multiview_naive(gn, store, "bench", gn.constant(f), cfg.agg, view).value();
    const auto t1 = clock::now();
    ad::Graph ge;
    Tensor eff =
        agg::multiview_efficient(ge, store, "bench", ge.constant(f), cfg.agg, view).value();
    const auto t2 = clock::now();

    rep.naive_seconds += std::chrono::duration<double>(t1 - t0).count();
    rep.efficient_seconds += std::chrono::duration<double>(t2 - t1).count();
    rep.max_abs_diff =
        std::max(rep.max_abs_diff, (naive.data() - eff.data()).abs().maxCoeff());
  }
  rep.ratio = rep.efficient_seconds > 0.0 ? rep.naive_seconds / rep.efficient_seconds : 0.0;
  return rep;
}

}  // namespace xmpr::pipe
