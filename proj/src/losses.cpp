#include "xmpr/losses.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace xmpr::loss {

using ad::Graph;
using ad::Var;

void CircleConfig::validate() const {
  if (!(delta_pos >= 0.0) || !(delta_pos < delta_neg))
    throw std::invalid_argument("circle loss: margins must satisfy 0 <= " +
                                std::to_string(delta_pos) + " < " +
                                std::to_string(delta_neg));
  if (!(lambda > 0.0))
    throw std::invalid_argument("circle loss: lambda must be positive, got " +
                                std::to_string(lambda));
}

void MineConfig::validate() const {
  if (n_s < 1)
    throw std::invalid_argument("mining: n_s must be >= 1, got " + std::to_string(n_s));
  if (!(r_pos >= 0.0) || !(r_pos < r_neg))
    throw std::invalid_argument("mining: need 0 <= r_pos < r_neg, got " +
                                std::to_string(r_pos) + " / " + std::to_string(r_neg));
}

void ContrastiveConfig::validate() const {
  pixel.validate();
  view.validate();
  mine.validate();
  if (!(tau_neg_score >= 0.0) || !(tau_neg_score < tau_pos_score) ||
      !(tau_pos_score <= 1.0))
    throw std::invalid_argument("contrastive config: need 0 <= tau_neg < tau_pos <= 1");
  if (!(tau_d_pos > 0.0) || !(tau_d_pos < tau_d_neg))
    throw std::invalid_argument("contrastive config: need 0 < tau_d_pos < tau_d_neg");
}

namespace {

/// Euclidean distances from a 1 x d anchor to each row. rows: n x d -> n.
Var row_distances(Var rows, Var anchor_row) {
  Var diff = ad::sub(rows, anchor_row);
  return ad::sqrt(ad::reduce_sum(ad::mul(diff, diff), 1));
}

void check_sample_matrix(const Var& m, Index d, const char* which) {
  if (m.value().rank() != 2 || m.value().extent(1) != d)
    throw std::invalid_argument(std::string("circle loss: ") + which + " must be n x " +
                                std::to_string(d) + ", got " +
                                shape_string(m.value().shape()));
}

}  // namespace

LossResult circle_loss(Graph& g, Var anchor, Var positives, Var negatives,
                       const CircleConfig& cfg) {
  cfg.validate();
  if (!anchor.valid() || anchor.value().rank() != 1)
    throw std::invalid_argument("circle loss: anchor must be a rank-1 feature");
  if (!positives.valid() || !negatives.valid()) return {g.constant(0.0), true};
  const Index d = anchor.value().extent(0);
  check_sample_matrix(positives, d, "positives");
  check_sample_matrix(negatives, d, "negatives");

  Var a = ad::reshape(anchor, {1, d});
  Var arg_p = ad::affine(row_distances(positives, a), 1.0, -cfg.delta_pos);
  Var arg_n = ad::affine(row_distances(negatives, a), -1.0, cfg.delta_neg);
  Var w_p = cfg.clip_weights ? ad::relu(arg_p) : arg_p;
  Var w_n = cfg.clip_weights ? ad::relu(arg_n) : arg_n;
  Var th_p = ad::detach(ad::affine(w_p, cfg.lambda, 0.0));
  Var th_n = ad::detach(ad::affine(w_n, cfg.lambda, 0.0));
  Var s_p = ad::reduce_sum(ad::exp(ad::mul(th_p, arg_p)));
  Var s_n = ad::reduce_sum(ad::exp(ad::mul(th_n, arg_n)));
  Var v = ad::log(ad::add(g.constant(1.0), ad::mul(s_p, s_n)));
  return {v, false};
}

PixelPairSet mine_pixel_pairs(const geo::PointCloud& cloud_l_t2, int image_time,
                              const geo::Pose& t_wc_t1, const geo::Pose& t_wc_t2,
                              const geo::Pose& t_lc, const geo::CameraModel& cam,
                              const geo::SphericalGrid& grid, const MineConfig& cfg,
                              Rng& rng) {
  cfg.validate();
  cam.validate();
  grid.validate();
  if (cloud_l_t2.frame.kind != geo::FrameKind::Lidar)
    throw std::invalid_argument("mining: cloud must be in a lidar frame, got " +
                                geo::frame_string(cloud_l_t2.frame));

  // minimum-range owner per range-image cell, matching spherical_project
  const Index cells = grid.rows * grid.cols;
  std::vector<double> best_range(static_cast<std::size_t>(cells), 0.0);
  std::vector<Index> owner(static_cast<std::size_t>(cells), -1);
  for (Index i = 0; i < cloud_l_t2.size(); ++i) {
    Index r, c;
    double range;
    if (!geo::spherical_bin(cloud_l_t2.points.row(i), grid, r, c, range)) continue;
    const std::size_t flat = static_cast<std::size_t>(r * grid.cols + c);
    if (owner[flat] < 0 || range < best_range[flat]) {
      best_range[flat] = range;
      owner[flat] = i;
    }
  }

  // reproject owners into the t1 image plane (strict field-of-view rule)
  const geo::Pose to_cam_t1 =
      geo::compose(geo::invert(t_wc_t1), geo::compose(t_wc_t2, geo::invert(t_lc)));
  struct Proj {
    Index cell;
    double u, v;
  };
  std::vector<Proj> projs;
  for (Index cell = 0; cell < cells; ++cell) {
    const Index i = owner[static_cast<std::size_t>(cell)];
    if (i < 0) continue;
    const Eigen::Vector3d q = to_cam_t1.apply(cloud_l_t2.points.row(i));
    if (!(q.z() > 1e-6)) continue;
    double u, v;
    geo::pinhole_project(q, cam, u, v);
    if (u >= 0.0 && u < static_cast<double>(cam.width) && v >= 0.0 &&
        v < static_cast<double>(cam.height))
      projs.push_back({cell, u, v});
  }

  // bucket projections by containing pixel for the anchor-validity scan
  std::unordered_map<Index, std::vector<std::size_t>> bucket;
  std::vector<char> occupied(static_cast<std::size_t>(cam.height * cam.width), 0);
  for (std::size_t k = 0; k < projs.size(); ++k) {
    const Index pr = static_cast<Index>(std::floor(projs[k].v));
    const Index pc = static_cast<Index>(std::floor(projs[k].u));
    bucket[pr * cam.width + pc].push_back(k);
    occupied[static_cast<std::size_t>(pr * cam.width + pc)] = 1;
  }

  // a pixel is a valid anchor when it contains a reprojection and some
  // reprojection lies within r_pos of its center
  const Index halo = static_cast<Index>(std::ceil(cfg.r_pos)) + 1;
  std::vector<std::pair<Index, Index>> valid;
  for (Index pr = 0; pr < cam.height; ++pr)
    for (Index pc = 0; pc < cam.width; ++pc) {
      if (!occupied[static_cast<std::size_t>(pr * cam.width + pc)]) continue;
      const double cy = static_cast<double>(pr) + 0.5;
      const double cx = static_cast<double>(pc) + 0.5;
      bool has_pos = false;
      for (Index dr = -halo; dr <= halo && !has_pos; ++dr)
        for (Index dc = -halo; dc <= halo && !has_pos; ++dc) {
          const Index nr = pr + dr, nc = pc + dc;
          if (nr < 0 || nr >= cam.height || nc < 0 || nc >= cam.width) continue;
          auto it = bucket.find(nr * cam.width + nc);
          if (it == bucket.end()) continue;
          for (std::size_t k : it->second)
            if (std::hypot(projs[k].u - cx, projs[k].v - cy) <= cfg.r_pos) {
              has_pos = true;
              break;
            }
        }
      if (has_pos) valid.emplace_back(pr, pc);
    }

  PixelPairSet set;
  set.image_frame = {geo::FrameKind::Camera, image_time};
  set.cloud_frame = cloud_l_t2.frame;
  set.undersampled = static_cast<Index>(valid.size()) < cfg.n_s;
  const Index take = std::min<Index>(cfg.n_s, static_cast<Index>(valid.size()));
  for (Index i = 0; i < take; ++i) {
    const Index j = i + static_cast<Index>(
                            rng.uniform_index(static_cast<Index>(valid.size()) - i));
    std::swap(valid[static_cast<std::size_t>(i)], valid[static_cast<std::size_t>(j)]);
  }
  valid.resize(static_cast<std::size_t>(take));

  for (auto [pr, pc] : valid) {
    PixelAnchor anchor;
    anchor.row = pr;
    anchor.col = pc;
    const double cy = static_cast<double>(pr) + 0.5;
    const double cx = static_cast<double>(pc) + 0.5;
    for (const Proj& p : projs) {
      const double dist = std::hypot(p.u - cx, p.v - cy);
      if (dist <= cfg.r_pos)
        anchor.positives.push_back(p.cell);
      else if (dist > cfg.r_neg)
        anchor.negatives.push_back(p.cell);
    }
    if (cfg.max_negatives > 0 &&
        static_cast<Index>(anchor.negatives.size()) > cfg.max_negatives) {
      auto& n = anchor.negatives;
      for (Index i = 0; i < cfg.max_negatives; ++i) {
        const Index j =
            i + static_cast<Index>(rng.uniform_index(static_cast<Index>(n.size()) - i));
        std::swap(n[static_cast<std::size_t>(i)], n[static_cast<std::size_t>(j)]);
      }
      n.resize(static_cast<std::size_t>(cfg.max_negatives));
      std::sort(n.begin(), n.end());
    }
    set.anchors.push_back(std::move(anchor));
  }
  return set;
}

void extend_pixel_negatives(PixelPairSet& set, Index map_pixels, Index count,
                            Rng& rng) {
  if (map_pixels < 1 || count < 1)
    throw std::invalid_argument("extend: need a nonempty map and count >= 1");
  std::vector<Index> ids(static_cast<std::size_t>(map_pixels));
  for (Index i = 0; i < map_pixels; ++i) ids[static_cast<std::size_t>(i)] = i;
  const Index take = std::min(count, map_pixels);
  for (Index i = 0; i < take; ++i) {
    const Index j = i + static_cast<Index>(rng.uniform_index(map_pixels - i));
    std::swap(ids[static_cast<std::size_t>(i)], ids[static_cast<std::size_t>(j)]);
  }
  ids.resize(static_cast<std::size_t>(take));
  std::sort(ids.begin(), ids.end());
  set.scene_negatives = std::move(ids);
  set.extended = true;
}

namespace {

Var flatten_pixels(const Var& map, const char* which) {
  const Shape& s = map.shape();
  if (s.size() != 3)
    throw std::invalid_argument(std::string("pixel loss: ") + which +
                                " must be H x W x d, got " + shape_string(s));
  return ad::reshape(map, {s[0] * s[1], s[2]});
}

}  // namespace

LossResult pixel_loss(Graph& g, const PixelPairSet& set, Var f2d, Var f3d,
                      const CircleConfig& cfg, Var f3d_extra) {
  Var img = flatten_pixels(f2d, "image features");
  Var cloud = flatten_pixels(f3d, "range features");
  if (img.shape()[1] != cloud.shape()[1])
    throw std::invalid_argument("pixel loss: feature widths differ, " +
                                shape_string(f2d.shape()) + " vs " +
                                shape_string(f3d.shape()));
  Var extra;
  if (!set.scene_negatives.empty()) {
    if (!f3d_extra.valid())
      throw std::invalid_argument(
          "pixel loss: set has scene negatives but no third-scene features");
    extra = ad::gather_rows(flatten_pixels(f3d_extra, "third-scene features"),
                            set.scene_negatives);
  }
  if (set.anchors.empty()) return {g.constant(0.0), true};

  const Index w = f2d.shape()[1], d = f2d.shape()[2];
  std::vector<Var> terms;
  bool all_skipped = true;
  for (const PixelAnchor& anchor : set.anchors) {
    if (anchor.row < 0 || anchor.row >= f2d.shape()[0] || anchor.col < 0 ||
        anchor.col >= w)
      throw std::invalid_argument("pixel loss: anchor (" + std::to_string(anchor.row) +
                                  ", " + std::to_string(anchor.col) +
                                  ") outside image " + shape_string(f2d.shape()));
    Var a = ad::reshape(ad::gather_rows(img, {anchor.row * w + anchor.col}), {d});
    Var pos, neg;
    if (!anchor.positives.empty()) pos = ad::gather_rows(cloud, anchor.positives);
    if (!anchor.negatives.empty()) neg = ad::gather_rows(cloud, anchor.negatives);
    if (extra.valid()) neg = neg.valid() ? ad::concat({neg, extra}, 0) : extra;
    LossResult r = circle_loss(g, a, pos, neg, cfg);
    all_skipped = all_skipped && r.skipped;
    terms.push_back(ad::reshape(r.value, {1}));
  }
  Var stacked = terms.size() == 1 ? terms[0] : ad::concat(terms, 0);
  return {ad::reduce_mean(stacked), all_skipped};
}

ViewLabelSet label_views(const Tensor& scores, double tau_pos, double tau_neg) {
  if (scores.rank() != 1)
    throw std::invalid_argument("view labels: scores must be rank 1, got " +
                                shape_string(scores.shape()));
  ViewLabelSet labels;
  for (Index i = 0; i < scores.numel(); ++i) {
    const double s = scores.data()[i];
    if (s > tau_pos) labels.positives.push_back(i);
    if (s < tau_neg) labels.negatives.push_back(i);
  }
  return labels;
}

LossResult view_loss(Graph& g, Var g2d, Var views, const ViewLabelSet& labels,
                     const CircleConfig& cfg, Var views_extra) {
  if (views.value().rank() != 2)
    throw std::invalid_argument("view loss: views must be n_v x d_g, got " +
                                shape_string(views.shape()));
  const Index d = views.shape()[1];
  if (g2d.value().rank() != 1 || g2d.value().extent(0) != d)
    throw std::invalid_argument("view loss: anchor must be a length-" +
                                std::to_string(d) + " descriptor, got " +
                                shape_string(g2d.shape()));
  Var pos, neg;
  if (!labels.positives.empty()) pos = ad::gather_rows(views, labels.positives);
  if (!labels.negatives.empty()) neg = ad::gather_rows(views, labels.negatives);
  if (views_extra.valid()) {
    if (views_extra.value().rank() != 2 || views_extra.shape()[1] != d)
      throw std::invalid_argument("view loss: extra views must be m x " +
                                  std::to_string(d) + ", got " +
                                  shape_string(views_extra.shape()));
    neg = neg.valid() ? ad::concat({neg, views_extra}, 0) : views_extra;
  }
  return circle_loss(g, g2d, pos, neg, cfg);
}

LossResult joint_loss(Graph& g, const LossResult& pixel, const LossResult& view) {
  (void)g;
  return {ad::add(pixel.value, view.value), pixel.skipped && view.skipped};
}

}  // namespace xmpr::loss
