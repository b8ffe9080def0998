#ifndef XMPR_RETRIEVAL_HPP
#define XMPR_RETRIEVAL_HPP

#include <Eigen/Dense>
#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "xmpr/aggregation.hpp"
#include "xmpr/tensor.hpp"

namespace xmpr::ret {

/// Ground-truth metadata for one database cloud; evaluation only, retrieval
/// itself never reads positions.
struct CloudMeta {
  int frame_time = 0;
  Eigen::Vector3d position = Eigen::Vector3d::Zero();
};

/// Flat exhaustive-search database over every view of every cloud.
/// Immutable after build; concurrent queries are safe.
struct DescriptorIndex {
  Index d_g = 0;
  Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> views;
  std::vector<int> entry_cloud;   // per view row
  std::vector<Index> entry_view;  // row index within its cloud's set
  std::map<int, CloudMeta> meta;  // keyed by cloud id

  Index entries() const { return static_cast<Index>(entry_cloud.size()); }
  Index clouds() const { return static_cast<Index>(meta.size()); }
};

/// meta runs parallel to sets. Cloud ids and frame times must be unique,
/// descriptor rows unit-norm, and all widths equal.
DescriptorIndex build_index(const std::vector<agg::ViewDescriptorSet>& sets,
                            const std::vector<CloudMeta>& meta);

struct QueryResult {
  int query_frame = -1;
  Eigen::Vector3d query_position = Eigen::Vector3d::Zero();
  std::vector<int> cloud_ids;     // distinct, ranked by best-view distance
  std::vector<double> distances;  // non-decreasing
};

/// Exhaustive top-n distinct clouds by best-view Euclidean distance.
/// Ties break toward the smaller cloud id. exclude_frame drops the cloud
/// with that frame time (-1 keeps everything); an empty index yields an
/// empty result.
QueryResult query(const DescriptorIndex& index, const Tensor& g2d, Index n,
                  int exclude_frame = -1);

/// N for "R@1%": ceil(clouds / 100), at least 1.
Index one_percent_n(Index clouds);

/// Percentage of queries whose top-n clouds include one strictly closer
/// than radius to the query position.
double recall_at_n(const std::vector<QueryResult>& results,
                   const std::map<int, Eigen::Vector3d>& positions, double radius,
                   Index n);

struct EvalReport {
  Index queries = 0;
  double radius = 10.0;
  std::uint64_t seed = 0;
  bool rotated = false;
  Index n_1pct = 1;
  double recall_1 = 0.0;
  double recall_5 = 0.0;
  double recall_10 = 0.0;
  double recall_1pct = 0.0;

  std::string to_json() const;
};

EvalReport evaluate(const DescriptorIndex& index,
                    const std::vector<QueryResult>& results, double radius,
                    std::uint64_t seed, bool rotated = false);

struct QueryItem {
  int frame_time = -1;
  Eigen::Vector3d position = Eigen::Vector3d::Zero();
  Tensor g2d;
};

/// Produces the descriptor set of one database cloud after rotating it by
/// a yaw angle (radians); yaw 0 is the unrotated cloud.
using CloudEncoder = std::function<agg::ViewDescriptorSet(Index cloud, double yaw)>;

struct YawRobustness {
  EvalReport baseline;            // yaw 0 everywhere
  EvalReport rotated;             // one uniform yaw in [0, 2pi) per cloud
  std::vector<double> yaws;       // the draws, in cloud order
};

/// Runs the retrieval protocol twice with self-frame exclusion, once on
/// unrotated clouds and once with a seeded random yaw per cloud.
YawRobustness yaw_robustness_eval(const CloudEncoder& encode,
                                  const std::vector<CloudMeta>& meta,
                                  const std::vector<QueryItem>& queries,
                                  double radius, std::uint64_t seed);

}  // namespace xmpr::ret

#endif  // XMPR_RETRIEVAL_HPP
