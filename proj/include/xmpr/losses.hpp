#ifndef XMPR_LOSSES_HPP
#define XMPR_LOSSES_HPP

#include <vector>

#include "xmpr/autodiff.hpp"
#include "xmpr/geometry.hpp"
#include "xmpr/rng.hpp"

namespace xmpr::loss {

/// Margins and scale of the template contrastive loss. Distances are
/// Euclidean between unit vectors, so they live in [0, 2] and the margins
/// (0.1/1.4 for pixels, 0.4/1.2 for views) have a fixed meaning.
struct CircleConfig {
  double delta_pos = 0.1;
  double delta_neg = 1.4;
  double lambda = 10.0;
  bool clip_weights = true;

  void validate() const;  // 0 <= delta_pos < delta_neg, lambda > 0
};

/// Scalar loss value; degenerate sample sets yield 0 and the skipped flag,
/// never NaN.
struct LossResult {
  ad::Var value;
  bool skipped = false;
};

/// log(1 + sum_j e^{th+_j (d+_j - dp)} * sum_k e^{th-_k (dn - d-_k)}) with
/// th+_j = lambda clip+(d+_j - dp) and th-_k = lambda clip+(dn - d-_k) held
/// constant under differentiation. anchor: d; positives: n+ x d;
/// negatives: n- x d. An invalid Var stands for an empty set.
LossResult circle_loss(ad::Graph& g, ad::Var anchor, ad::Var positives,
                       ad::Var negatives, const CircleConfig& cfg);

struct MineConfig {
  Index n_s = 512;           // anchors per frame pair
  double r_pos = 2.0;        // px: projections at most this close are positive
  double r_neg = 12.0;       // px: projections beyond this are negative
  Index max_negatives = 64;  // per-anchor cap at mining time; <= 0 keeps all

  void validate() const;
};

struct PixelAnchor {
  Index row = 0, col = 0;  // image pixel
  std::vector<Index> positives;  // flat row-major pixels of the range image
  std::vector<Index> negatives;
};

struct PixelPairSet {
  geo::Frame image_frame, cloud_frame;
  std::vector<PixelAnchor> anchors;
  std::vector<Index> scene_negatives;  // flat pixels of a third-scene map
  bool undersampled = false;  // fewer valid anchors than requested
  bool extended = false;
};

/// For each cell of the range image built from cloud_l_t2, reproject the
/// cell-owning point (minimum range) into camera t1. Anchors are sampled
/// among image pixels whose centers have a reprojection within r_pos;
/// positives/negatives per anchor are the cells landing within r_pos /
/// beyond r_neg of the anchor center. Fewer valid anchors than n_s sets
/// undersampled and keeps them all.
PixelPairSet mine_pixel_pairs(const geo::PointCloud& cloud_l_t2, int image_time,
                              const geo::Pose& t_wc_t1, const geo::Pose& t_wc_t2,
                              const geo::Pose& t_lc, const geo::CameraModel& cam,
                              const geo::SphericalGrid& grid, const MineConfig& cfg,
                              Rng& rng);

/// Draw `count` distinct pixels of a third-scene feature map into
/// set.scene_negatives and mark the set extended.
void extend_pixel_negatives(PixelPairSet& set, Index map_pixels, Index count,
                            Rng& rng);

/// Mean circle loss over the anchors. f2d: H x W x d image features,
/// f3d: Hs x Ws x d range-image features, both unit per pixel. A valid
/// f3d_extra adds the set's scene_negatives (third scene) to every anchor.
LossResult pixel_loss(ad::Graph& g, const PixelPairSet& set, ad::Var f2d,
                      ad::Var f3d, const CircleConfig& cfg,
                      ad::Var f3d_extra = {});

/// View ids whose similarity score clears tau_pos (positives) or falls
/// under tau_neg (negatives).
struct ViewLabelSet {
  std::vector<Index> positives, negatives;
};

ViewLabelSet label_views(const Tensor& scores, double tau_pos, double tau_neg);

/// Circle loss with the image descriptor as anchor and labeled view
/// descriptors as samples. A valid views_extra appends every row of a
/// third-scene descriptor set to the negatives.
LossResult view_loss(ad::Graph& g, ad::Var g2d, ad::Var views,
                     const ViewLabelSet& labels, const CircleConfig& cfg,
                     ad::Var views_extra = {});

/// L_joint = pixel + view; skipped only when both components are.
LossResult joint_loss(ad::Graph& g, const LossResult& pixel,
                      const LossResult& view);

/// Sampler thresholds and both margin sets, as exposed in the run config.
struct ContrastiveConfig {
  CircleConfig pixel{};
  CircleConfig view{0.4, 1.2};
  double tau_pos_score = 0.6;
  double tau_neg_score = 0.2;
  double tau_d_pos = 3.0;   // m: frames closer than this are a positive pair
  double tau_d_neg = 20.0;  // m: frames beyond this extend the negatives
  MineConfig mine{};

  void validate() const;
};

}  // namespace xmpr::loss

#endif  // XMPR_LOSSES_HPP
