#ifndef XMPR_PIPELINE_HPP
#define XMPR_PIPELINE_HPP

#include <iosfwd>
#include <string>
#include <vector>

#include "xmpr/aggregation.hpp"
#include "xmpr/backbone.hpp"
#include "xmpr/checkpoint.hpp"
#include "xmpr/datasets.hpp"
#include "xmpr/losses.hpp"
#include "xmpr/optim.hpp"
#include "xmpr/overlap.hpp"
#include "xmpr/retrieval.hpp"

namespace xmpr::pipe {

struct TrainConfig {
  int epochs = 30;
  double lr0 = 1e-4;         // decayed by lr_factor every lr_interval epochs
  double lr_factor = 0.8;
  int lr_interval = 5;
  double weight_decay = 0.01;
  Index pairs_per_epoch = 24;  // training pairs drawn per epoch
  int hold_out = 4;            // every hold_out-th frame is query-only; 0 trains on all
};

struct EvalConfig {
  double epsilon = 1.0;          // visibility band (m)
  double success_radius = 10.0;  // strict retrieval success distance (m)
};

/// Table-style switches; everything defaults to the full model.
struct AblationConfig {
  bool pixel_loss = true;
  bool scene_loss = true;
  bool geometric_branch = true;  // zeroed and frozen when off
};

struct RunConfig {
  std::uint64_t seed = 1;
  int threads = 1;

  data::WorldConfig world;
  bb::BackboneConfig backbone;  // in_channels is derived per branch
  agg::AggConfig agg;
  agg::ViewConfig view_train{200, 10};
  agg::ViewConfig view_test{200, 30};
  loss::ContrastiveConfig contrastive;
  TrainConfig train;
  EvalConfig eval;
  AblationConfig ablation;

  /// Every module precondition checked up front; throws std::invalid_argument
  /// naming the offending field.
  void validate() const;
};

/// Scaled-down preset sized for minutes, not hours; same structure throughout.
RunConfig desk_config();

std::string config_json(const RunConfig& cfg);
/// Strict parse over the defaults: every present key overrides, unknown keys
/// throw with their dotted path.
RunConfig parse_config(const std::string& text, RunConfig base = RunConfig{});
RunConfig load_run_config(const std::string& path, RunConfig base = RunConfig{});
void save_run_config(const std::string& path, const RunConfig& cfg);

// ---------------------------------------------------------------------------
// Model: two backbone pyramids and one shared aggregation head

inline const char* kImagePrefix = "img";
inline const char* kRangePrefix = "range";
inline const char* kVladPrefix = "vlad";

bb::BackboneConfig image_backbone(const RunConfig& cfg);  // kImageChannels in
bb::BackboneConfig range_backbone(const RunConfig& cfg);  // 1 channel in

void init_model(ParamStore& store, const RunConfig& cfg, Rng& rng);

/// Insertion order minus frozen parameters (the geometric branch when off).
std::vector<ad::Parameter*> trainable_params(ParamStore& store, const RunConfig& cfg);

/// Per-pixel feature maps, unit wherever the pixel carries content; empty
/// pixels may stay exactly zero. Range-valued channels are scaled by
/// 1/max_range before the backbone.
ad::Var image_features(ad::Graph& g, ParamStore& store, const RunConfig& cfg,
                       const Tensor& image);
ad::Var range_features(ad::Graph& g, ParamStore& store, const RunConfig& cfg,
                       const geo::RangeImage& range);

/// H x W mask, 1 where the pixel carries any content. No-projection pixels
/// are excluded from descriptor aggregation.
Tensor image_content_mask(const Tensor& image);
Tensor range_content_mask(const geo::RangeImage& range);

ad::Var image_descriptor(ad::Graph& g, ParamStore& store, const RunConfig& cfg,
                         ad::Var f2d, const Tensor& image);
ad::Var cloud_view_descriptors(ad::Graph& g, ParamStore& store, const RunConfig& cfg,
                               ad::Var f3d, const geo::RangeImage& range,
                               const agg::ViewConfig& view,
                               std::vector<Index>* starts = nullptr);

// ---------------------------------------------------------------------------
// Data plumbing

/// One frame plus the range image its cloud projects to.
struct FrameBundle {
  data::FrameRecord rec;
  geo::RangeImage range;
};

std::vector<FrameBundle> simulate_bundles(const data::SyntheticWorld& world);
std::vector<FrameBundle> project_bundles(std::vector<data::FrameRecord> frames,
                                         const geo::SphericalGrid& grid);

struct PairPlan {
  std::vector<std::pair<int, int>> pairs;  // (image frame, cloud frame)
  std::vector<int> train_frames;
  std::vector<int> query_frames;  // held out of every pair
};

/// All ordered pairs of train frames within tau_d_pos, self-pairs included.
PairPlan plan_pairs(const std::vector<FrameBundle>& bundles, const RunConfig& cfg);

/// Similarity of each train-view window of t2's range image to the camera
/// content of t1 (parameter-free; cached by the label store).
std::vector<double> view_scores(const std::vector<FrameBundle>& bundles, int t1,
                                int t2, const RunConfig& cfg);
ovl::LabelCache build_labels(const std::vector<FrameBundle>& bundles,
                             const std::vector<std::pair<int, int>>& pairs,
                             const RunConfig& cfg);

// ---------------------------------------------------------------------------
// Training

struct StepRecord {
  int epoch = 0;
  int step = 0;  // global, counting skipped steps
  int t1 = -1, t2 = -1, t3 = -1;
  double loss = 0.0;
  double lr = 0.0;
  bool skipped = false;
};

struct TrainResult {
  std::vector<StepRecord> steps;
  std::vector<double> epoch_loss;  // mean over the epoch's unskipped steps
  std::vector<double> smoothed;    // running average of epoch_loss, alpha = 0.5
};

/// Joint contrastive training over the pair plan; csv (optional) receives a
/// header plus one row per step. Deterministic for a fixed config and store.
TrainResult train(ParamStore& store, const RunConfig& cfg,
                  const std::vector<FrameBundle>& bundles,
                  const ovl::LabelCache& labels, std::ostream* csv = nullptr);

// ---------------------------------------------------------------------------
// Inference and evaluation

/// Descriptor set of one cloud, optionally yawed (radians) before projection.
agg::ViewDescriptorSet encode_cloud(ParamStore& store, const RunConfig& cfg,
                                    const FrameBundle& bundle,
                                    const agg::ViewConfig& view, double yaw = 0.0);
Tensor encode_image(ParamStore& store, const RunConfig& cfg, const Tensor& image);

/// Index of every bundle's cloud under the test view layout.
ret::DescriptorIndex build_cloud_index(ParamStore& store, const RunConfig& cfg,
                                       const std::vector<FrameBundle>& bundles);

/// Retrieval protocol over the given query frames: the query's own cloud is
/// excluded and success is strictly closer than success_radius.
ret::EvalReport evaluate_queries(ParamStore& store, const RunConfig& cfg,
                                 const std::vector<FrameBundle>& bundles,
                                 const std::vector<int>& query_frames,
                                 const ret::DescriptorIndex& index,
                                 bool rotated = false);

/// Baseline vs per-cloud random yaw, re-encoding rotated clouds from scratch.
ret::YawRobustness yaw_eval(ParamStore& store, const RunConfig& cfg,
                            const std::vector<FrameBundle>& bundles,
                            const std::vector<int>& query_frames);

// ---------------------------------------------------------------------------
// Benchmark

struct BenchReport {
  Index rows = 0, cols = 0, d_f = 0;
  Index window = 0, delta = 0, n_views = 0;
  Index repeats = 0;
  double naive_seconds = 0.0;
  double efficient_seconds = 0.0;
  double ratio = 0.0;  // naive / efficient
  double max_abs_diff = 0.0;

  std::string to_json() const;
};

/// Forward-only timing of both multiview paths on seeded random feature maps.
BenchReport bench_multiview(const RunConfig& cfg, const agg::ViewConfig& view,
                            Index repeats, Rng& rng);

}  // namespace xmpr::pipe

#endif  // XMPR_PIPELINE_HPP
