#ifndef XMPR_OVERLAP_HPP
#define XMPR_OVERLAP_HPP

#include <map>
#include <string>
#include <utility>
#include <vector>

#include "xmpr/geometry.hpp"

namespace xmpr::ovl {

/// Binary grid marking cells where the reprojected cloud agrees with the
/// target depth within epsilon.
struct VisibleMap {
  Tensor values;  // rows x cols, entries 0 or 1
  int t1 = -1, t2 = -1;
  Index n_points = 0;  // raw size of the reprojected cloud
};

struct ViewSimilarity {
  std::vector<double> scores;  // one per view, each in [0, 1]
};

/// O[i,j] = 1 iff Dp[i,j] > 0 and |D[i,j] - Dp[i,j]| < epsilon.
VisibleMap visible_map(const geo::RangeImage& d_t2, const geo::RangeImage& dp_t2,
                       double epsilon, Index n_points, int t1 = -1, int t2 = -1);

/// Circular column windows [delta*j, delta*j + window) for j = 0..cols/delta-1,
/// each scored by its cell sum over n_points (0 when n_points = 0).
ViewSimilarity view_similarity(const VisibleMap& map, Index window, Index delta);

/// Per-pair view-similarity scores, keyed by (t1, t2) frame ids.
class LabelCache {
 public:
  void put(int t1, int t2, std::vector<double> scores);
  bool has(int t1, int t2) const;
  const std::vector<double>& get(int t1, int t2) const;
  std::size_t size() const { return table_.size(); }
  const std::map<std::pair<int, int>, std::vector<double>>& table() const {
    return table_;
  }

  /// Index table of frame-id pairs followed by float32 score blocks.
  void save(const std::string& path) const;
  static LabelCache load(const std::string& path);

 private:
  std::map<std::pair<int, int>, std::vector<double>> table_;
};

}  // namespace xmpr::ovl

#endif  // XMPR_OVERLAP_HPP
