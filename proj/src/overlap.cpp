#include "xmpr/overlap.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace xmpr::ovl {

VisibleMap visible_map(const geo::RangeImage& d_t2, const geo::RangeImage& dp_t2,
                       double epsilon, Index n_points, int t1, int t2) {
  if (!d_t2.values.same_shape(dp_t2.values))
    throw std::invalid_argument("visible_map: grids " + shape_string(d_t2.values.shape()) +
                                " vs " + shape_string(dp_t2.values.shape()));
  if (!(epsilon > 0.0)) throw std::invalid_argument("visible_map: epsilon must be > 0");
  if (n_points < 0) throw std::invalid_argument("visible_map: n_points must be >= 0");
  VisibleMap out;
  out.values = Tensor::zeros(d_t2.values.shape());
  out.t1 = t1;
  out.t2 = t2;
  out.n_points = n_points;
  for (Index i = 0; i < out.values.numel(); ++i) {
    const double dp = dp_t2.values.data()[i];
    if (dp > 0.0 && std::abs(d_t2.values.data()[i] - dp) < epsilon)
      out.values.data()[i] = 1.0;
  }
  return out;
}

ViewSimilarity view_similarity(const VisibleMap& map, Index window, Index delta) {
  const Index rows = map.values.extent(0), cols = map.values.extent(1);
  if (window < 1 || window > cols)
    throw std::invalid_argument("view_similarity: window must be in [1, " +
                                std::to_string(cols) + "]");
  if (delta < 1 || delta > cols)
    throw std::invalid_argument("view_similarity: delta must be in [1, " +
                                std::to_string(cols) + "]");
  // column sums once, then circular prefix windows
  std::vector<double> col_sum(static_cast<std::size_t>(cols), 0.0);
  for (Index i = 0; i < rows; ++i)
    for (Index j = 0; j < cols; ++j)
      col_sum[static_cast<std::size_t>(j)] += map.values.at({i, j});

  const Index n_views = cols / delta;
  ViewSimilarity out;
  out.scores.resize(static_cast<std::size_t>(n_views), 0.0);
  if (map.n_points == 0) return out;
  const double denom = static_cast<double>(map.n_points);
  for (Index v = 0; v < n_views; ++v) {
    double s = 0.0;
    for (Index k = 0; k < window; ++k) s += col_sum[static_cast<std::size_t>((v * delta + k) % cols)];
    out.scores[static_cast<std::size_t>(v)] = s / denom;
  }
  return out;
}

namespace {

constexpr char kMagic[8] = {'X', 'M', 'P', 'R', 'L', 'B', 'L', 'S'};

void put_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
  return v;
}

void put_f32(std::ostream& os, float v) {
  std::uint32_t bits;
  std::memcpy(&bits, &v, 4);
  put_u32(os, bits);
}

float get_f32(std::istream& is) {
  const std::uint32_t bits = get_u32(is);
  float v;
  std::memcpy(&v, &bits, 4);
  return v;
}

}  // namespace

void LabelCache::put(int t1, int t2, std::vector<double> scores) {
  table_[{t1, t2}] = std::move(scores);
}

bool LabelCache::has(int t1, int t2) const { return table_.count({t1, t2}) > 0; }

const std::vector<double>& LabelCache::get(int t1, int t2) const {
  auto it = table_.find({t1, t2});
  if (it == table_.end())
    throw std::invalid_argument("label cache: no entry for pair (" + std::to_string(t1) +
                                ", " + std::to_string(t2) + ")");
  return it->second;
}

void LabelCache::save(const std::string& path) const {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("label cache: cannot open '" + path + "' for writing");
  os.write(kMagic, 8);
  put_u32(os, static_cast<std::uint32_t>(table_.size()));
  for (const auto& [key, scores] : table_) {
    put_u32(os, static_cast<std::uint32_t>(key.first));
    put_u32(os, static_cast<std::uint32_t>(key.second));
    put_u32(os, static_cast<std::uint32_t>(scores.size()));
    for (double s : scores) put_f32(os, static_cast<float>(s));
  }
  if (!os) throw std::runtime_error("label cache: write to '" + path + "' failed");
}

LabelCache LabelCache::load(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("label cache: cannot open '" + path + "'");
  char magic[8];
  is.read(magic, 8);
  if (!is || std::memcmp(magic, kMagic, 8) != 0)
    throw std::runtime_error("label cache: '" + path + "' has a bad magic header");
  const std::uint32_t count = get_u32(is);
  LabelCache cache;
  for (std::uint32_t k = 0; k < count; ++k) {
    const int t1 = static_cast<int>(get_u32(is));
    const int t2 = static_cast<int>(get_u32(is));
    const std::uint32_t n = get_u32(is);
    std::vector<double> scores(n);
    for (std::uint32_t i = 0; i < n; ++i) scores[i] = static_cast<double>(get_f32(is));
    if (!is) throw std::runtime_error("label cache: '" + path + "' truncated");
    cache.put(t1, t2, std::move(scores));
  }
  return cache;
}

}  // namespace xmpr::ovl
