#include "xmpr/retrieval.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <stdexcept>

#include <json.hpp>

#include "xmpr/rng.hpp"

namespace xmpr::ret {

namespace {

constexpr double kUnitTol = 1e-4;  // covers float32 round trips

void check_unit(double norm, const std::string& what) {
  if (std::abs(norm - 1.0) > kUnitTol)
    throw std::invalid_argument("retrieval: " + what + " is not unit-norm (|" +
                                std::to_string(norm) + "| - 1 exceeds tolerance)");
}

}  // namespace

DescriptorIndex build_index(const std::vector<agg::ViewDescriptorSet>& sets,
                            const std::vector<CloudMeta>& meta) {
  if (sets.size() != meta.size())
    throw std::invalid_argument("build_index: " + std::to_string(sets.size()) +
                                " descriptor sets but " + std::to_string(meta.size()) +
                                " metadata records");
  DescriptorIndex index;
  if (sets.empty()) return index;

  Index total = 0;
  for (const auto& s : sets) {
    if (s.descriptors.rank() != 2)
      throw std::invalid_argument("build_index: descriptors must be n_v x d_g");
    if (index.d_g == 0) index.d_g = s.descriptors.extent(1);
    if (s.descriptors.extent(1) != index.d_g)
      throw std::invalid_argument(
          "build_index: width mismatch, cloud " + std::to_string(s.cloud_id) +
          " has d_g " + std::to_string(s.descriptors.extent(1)) + " but the index has " +
          std::to_string(index.d_g));
    total += s.descriptors.extent(0);
  }

  index.views.resize(total, index.d_g);
  index.entry_cloud.reserve(static_cast<std::size_t>(total));
  index.entry_view.reserve(static_cast<std::size_t>(total));
  std::set<int> frames;
  Index row = 0;
  for (std::size_t i = 0; i < sets.size(); ++i) {
    const auto& s = sets[i];
    if (s.cloud_id < 0)
      throw std::invalid_argument("build_index: descriptor set without a cloud id");
    if (index.meta.count(s.cloud_id))
      throw std::invalid_argument("build_index: duplicate cloud id " +
                                  std::to_string(s.cloud_id));
    if (!frames.insert(meta[i].frame_time).second)
      throw std::invalid_argument("build_index: duplicate frame time " +
                                  std::to_string(meta[i].frame_time));
    index.meta.emplace(s.cloud_id, meta[i]);
    const Index n_v = s.descriptors.extent(0);
    for (Index j = 0; j < n_v; ++j, ++row) {
      index.views.row(row) = Eigen::Map<const Eigen::RowVectorXd>(
          s.descriptors.data().data() + j * index.d_g, index.d_g);
      check_unit(index.views.row(row).norm(),
                 "view " + std::to_string(j) + " of cloud " + std::to_string(s.cloud_id));
      index.entry_cloud.push_back(s.cloud_id);
      index.entry_view.push_back(j);
    }
  }
  return index;
}

QueryResult query(const DescriptorIndex& index, const Tensor& g2d, Index n,
                  int exclude_frame) {
  if (n <= 0)
    throw std::invalid_argument("query: n must be positive, got " + std::to_string(n));
  QueryResult result;
  result.query_frame = exclude_frame;
  if (index.entries() == 0) return result;

  if (g2d.rank() != 1 || g2d.extent(0) != index.d_g)
    throw std::invalid_argument("query: descriptor must have shape {" +
                                std::to_string(index.d_g) + "}");
  const Eigen::Map<const Eigen::VectorXd> q(g2d.data().data(), index.d_g);
  check_unit(q.norm(), "query descriptor");

  const Eigen::VectorXd dist = (index.views.rowwise() - q.transpose()).rowwise().norm();
  std::map<int, double> best;  // ascending cloud id
  for (Index e = 0; e < index.entries(); ++e) {
    auto [it, fresh] = best.try_emplace(index.entry_cloud[static_cast<std::size_t>(e)],
                                        dist[e]);
    if (!fresh && dist[e] < it->second) it->second = dist[e];
  }

  std::vector<std::pair<double, int>> ranked;
  ranked.reserve(best.size());
  for (const auto& [id, d] : best)
    if (index.meta.at(id).frame_time != exclude_frame || exclude_frame < 0)
      ranked.emplace_back(d, id);
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const auto& a, const auto& b) { return a.first < b.first; });
  if (static_cast<Index>(ranked.size()) > n) ranked.resize(static_cast<std::size_t>(n));

  for (const auto& [d, id] : ranked) {
    result.cloud_ids.push_back(id);
    result.distances.push_back(d);
  }
  return result;
}

Index one_percent_n(Index clouds) {
  if (clouds < 1)
    throw std::invalid_argument("one_percent_n: need a nonempty database");
  return (clouds + 99) / 100;
}

double recall_at_n(const std::vector<QueryResult>& results,
                   const std::map<int, Eigen::Vector3d>& positions, double radius,
                   Index n) {
  if (results.empty()) throw std::invalid_argument("recall_at_n: no queries");
  if (n <= 0)
    throw std::invalid_argument("recall_at_n: n must be positive, got " +
                                std::to_string(n));
  if (radius < 0.0) throw std::invalid_argument("recall_at_n: negative radius");

  Index hits = 0;
  for (const QueryResult& r : results) {
    const std::size_t top =
        std::min<std::size_t>(r.cloud_ids.size(), static_cast<std::size_t>(n));
    for (std::size_t i = 0; i < top; ++i) {
      auto it = positions.find(r.cloud_ids[i]);
      if (it == positions.end())
        throw std::invalid_argument("recall_at_n: no position for cloud " +
                                    std::to_string(r.cloud_ids[i]));
      if ((it->second - r.query_position).norm() < radius) {
        ++hits;
        break;
      }
    }
  }
  return 100.0 * static_cast<double>(hits) / static_cast<double>(results.size());
}

std::string EvalReport::to_json() const {
  nlohmann::ordered_json j;
  j["recall_at"] = {{"1", recall_1}, {"5", recall_5}, {"10", recall_10},
                    {"1pct", recall_1pct}};
  j["n_1pct"] = n_1pct;
  j["queries"] = queries;
  j["radius"] = radius;
  j["seed"] = seed;
  j["rotated"] = rotated;
  return j.dump(2);
}

EvalReport evaluate(const DescriptorIndex& index,
                    const std::vector<QueryResult>& results, double radius,
                    std::uint64_t seed, bool rotated) {
  if (index.clouds() == 0) throw std::invalid_argument("evaluate: empty index");
  std::map<int, Eigen::Vector3d> positions;
  for (const auto& [id, m] : index.meta) positions.emplace(id, m.position);

  EvalReport report;
  report.queries = static_cast<Index>(results.size());
  report.radius = radius;
  report.seed = seed;
  report.rotated = rotated;
  report.n_1pct = one_percent_n(index.clouds());
  report.recall_1 = recall_at_n(results, positions, radius, 1);
  report.recall_5 = recall_at_n(results, positions, radius, 5);
  report.recall_10 = recall_at_n(results, positions, radius, 10);
  report.recall_1pct = recall_at_n(results, positions, radius, report.n_1pct);
  return report;
}

YawRobustness yaw_robustness_eval(const CloudEncoder& encode,
                                  const std::vector<CloudMeta>& meta,
                                  const std::vector<QueryItem>& queries,
                                  double radius, std::uint64_t seed) {
  const Index n_clouds = static_cast<Index>(meta.size());
  YawRobustness out;
  Rng rng(seed);
  out.yaws.resize(meta.size());
  for (double& y : out.yaws) y = rng.uniform(0.0, 6.283185307179586476925286766559);

  const Index top = std::max<Index>(Index{10}, one_percent_n(std::max<Index>(n_clouds, 1)));
  auto run = [&](bool rotate) {
    std::vector<agg::ViewDescriptorSet> sets;
    sets.reserve(meta.size());
    for (Index i = 0; i < n_clouds; ++i)
      sets.push_back(encode(i, rotate ? out.yaws[static_cast<std::size_t>(i)] : 0.0));
    DescriptorIndex index = build_index(sets, meta);
    std::vector<QueryResult> results;
    results.reserve(queries.size());
    for (const QueryItem& q : queries) {
      QueryResult r = query(index, q.g2d, top, q.frame_time);
      r.query_position = q.position;
      results.push_back(std::move(r));
    }
    return evaluate(index, results, radius, seed, rotate);
  };
  out.baseline = run(false);
  out.rotated = run(true);
  return out;
}

}  // namespace xmpr::ret
