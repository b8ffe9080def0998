#include "xmpr/aggregation.hpp"

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace xmpr::agg {

using ad::Graph;
using ad::Var;

namespace {

Tensor uniform_init(Shape shape, Index fan_in, Rng& rng) {
  Tensor t(std::move(shape));
  const double s = 1.0 / std::sqrt(static_cast<double>(fan_in));
  for (Index i = 0; i < t.numel(); ++i) t.data()[i] = rng.uniform(-s, s);
  return t;
}

/// Columns [start, start+len) of an H x W x c map, wrapping past W.
Var circular_columns(Var grid, Index start, Index len) {
  const Index w = grid.shape()[1];
  if (start + len <= w) return ad::slice(grid, 1, start, len);
  Var head = ad::slice(grid, 1, start, w - start);
  Var tail = ad::slice(grid, 1, 0, len - (w - start));
  return ad::concat({head, tail}, 1);
}

/// gamma^T f - colsum(gamma) c over the given flattened pixels.
Var residual_sum(Var gamma_flat, Var feat_flat, Var centers) {
  Var v1 = ad::matmul(ad::permute(gamma_flat, {1, 0}), feat_flat);  // K x d_f
  const Index k = v1.shape()[0];
  Var s0 = ad::reshape(ad::reduce_sum(gamma_flat, 0), {k, 1});
  return ad::sub(v1, ad::mul(s0, centers));
}

/// 0/1 column weights for an H x W validity map, as a graph constant.
Var valid_weights(Graph& g, const Tensor& valid, Index h, Index w) {
  if (valid.rank() != 2 || valid.extent(0) != h || valid.extent(1) != w)
    throw std::invalid_argument("aggregate: valid mask must be " + std::to_string(h) +
                                " x " + std::to_string(w) + ", got " +
                                shape_string(valid.shape()));
  Tensor m({h, w, 1});
  for (Index i = 0; i < h * w; ++i) m.data()[i] = valid.data()[i] != 0.0 ? 1.0 : 0.0;
  return g.constant(std::move(m));
}

Var fuse_and_normalize(Graph& g, ParamStore& store, const std::string& prefix, Var vlad,
                       Var conv_vec, const AggConfig& cfg) {
  if (cfg.intra_norm) vlad = ad::l2_normalize(vlad);  // per cluster row
  Var flat = ad::reshape(vlad, {1, cfg.clusters * cfg.d_f});
  Var geo = ad::reshape(conv_vec, {1, conv_vec.value().numel()});
  Var cat = ad::concat({flat, geo}, 1);
  Var out = ad::add(ad::matmul(cat, g.param(store.get(prefix + ".fuse.w"))),
                    g.param(store.get(prefix + ".fuse.b")));
  return ad::reshape(ad::l2_normalize(out), {cfg.d_g});
}

}  // namespace

void ViewConfig::validate(Index cols) const {
  if (delta < 1 || window < delta || window > cols)
    throw std::invalid_argument("view config: need 1 <= delta <= window <= " +
                                std::to_string(cols) + ", got window " +
                                std::to_string(window) + " delta " + std::to_string(delta));
  if (cols % delta != 0)
    throw std::invalid_argument("view config: " + std::to_string(cols) +
                                " columns not divisible by delta " + std::to_string(delta));
}

void init_vlad(ParamStore& store, const std::string& prefix, const AggConfig& cfg,
               Rng& rng) {
  store.create(prefix + ".centers", uniform_init({cfg.clusters, cfg.d_f}, cfg.d_f, rng));
  store.create(prefix + ".assign.w", uniform_init({cfg.d_f, cfg.clusters}, cfg.d_f, rng));
  store.create(prefix + ".assign.b", Tensor::zeros({cfg.clusters}));
  store.create(prefix + ".conv1.k",
               uniform_init({3, 3, cfg.d_f, cfg.conv_hidden}, 9 * cfg.d_f, rng));
  store.create(prefix + ".conv1.b", Tensor::zeros({cfg.conv_hidden}));
  store.create(prefix + ".conv2.k",
               uniform_init({3, 3, cfg.conv_hidden, cfg.conv_dim}, 9 * cfg.conv_hidden, rng));
  store.create(prefix + ".conv2.b", Tensor::zeros({cfg.conv_dim}));
  store.create(prefix + ".fuse.w",
               uniform_init({cfg.clusters * cfg.d_f + cfg.conv_dim, cfg.d_g},
                            cfg.clusters * cfg.d_f + cfg.conv_dim, rng));
  store.create(prefix + ".fuse.b", Tensor::zeros({cfg.d_g}));
}

Var soft_assign(Graph& g, ParamStore& store, const std::string& prefix, Var features,
                const AggConfig& cfg) {
  const Shape& s = features.shape();
  if (s.size() != 3 || s[2] != cfg.d_f)
    throw std::invalid_argument("soft_assign: features must be H x W x " +
                                std::to_string(cfg.d_f) + ", got " + shape_string(s));
  Var flat = ad::reshape(features, {s[0] * s[1], cfg.d_f});
  Var logits = ad::add(ad::matmul(flat, g.param(store.get(prefix + ".assign.w"))),
                       g.param(store.get(prefix + ".assign.b")));
  return ad::reshape(ad::softmax(logits), {s[0], s[1], cfg.clusters});
}

Var netvlad_aggregate(Graph& g, ParamStore& store, const std::string& prefix,
                      Var features, const AggConfig& cfg, const Tensor* valid) {
  const Shape& s = features.shape();
  Var gamma = soft_assign(g, store, prefix, features, cfg);
  if (valid) gamma = ad::mul(gamma, valid_weights(g, *valid, s[0], s[1]));
  Var gamma_flat = ad::reshape(gamma, {s[0] * s[1], cfg.clusters});
  Var feat_flat = ad::reshape(features, {s[0] * s[1], cfg.d_f});
  return residual_sum(gamma_flat, feat_flat, g.param(store.get(prefix + ".centers")));
}

Var conv_geometric_branch(Graph& g, ParamStore& store, const std::string& prefix,
                          Var features, const AggConfig& cfg, ad::Pad pad) {
  Var h = ad::silu(ad::conv2d(features, g.param(store.get(prefix + ".conv1.k")),
                              g.param(store.get(prefix + ".conv1.b")), pad));
  Var o = ad::conv2d(h, g.param(store.get(prefix + ".conv2.k")),
                     g.param(store.get(prefix + ".conv2.b")), pad);
  const Shape& s = o.shape();
  return ad::reduce_mean(ad::reshape(o, {s[0] * s[1], cfg.conv_dim}), 0);
}

Var xnetvlad_descriptor(Graph& g, ParamStore& store, const std::string& prefix,
                        Var features, const AggConfig& cfg, ad::Pad pad,
                        const Tensor* valid) {
  Var vlad = netvlad_aggregate(g, store, prefix, features, cfg, valid);
  Var geo = conv_geometric_branch(g, store, prefix, features, cfg, pad);
  return fuse_and_normalize(g, store, prefix, vlad, geo, cfg);
}

Var multiview_naive(Graph& g, ParamStore& store, const std::string& prefix, Var features,
                    const AggConfig& cfg, const ViewConfig& view,
                    std::vector<Index>* starts, const Tensor* valid) {
  const Shape& s = features.shape();
  view.validate(s[1]);
  const Index h = s[0], w = s[1];

  // full-width circular conv once, pooled per window afterwards
  Var conv1 = ad::silu(ad::conv2d(features, g.param(store.get(prefix + ".conv1.k")),
                                  g.param(store.get(prefix + ".conv1.b")),
                                  ad::Pad::CircularHorizontal));
  Var convmap = ad::conv2d(conv1, g.param(store.get(prefix + ".conv2.k")),
                           g.param(store.get(prefix + ".conv2.b")),
                           ad::Pad::CircularHorizontal);

  Var centers = g.param(store.get(prefix + ".centers"));
  Var weights;
  if (valid) weights = valid_weights(g, *valid, h, w);
  const Index n_v = view.n_views(w);
  if (starts) starts->clear();
  std::vector<Var> rows;
  for (Index j = 0; j < n_v; ++j) {
    const Index start = j * view.delta;
    if (starts) starts->push_back(start);
    Var fwin = circular_columns(features, start, view.window);
    Var gamma = soft_assign(g, store, prefix, fwin, cfg);
    if (valid) gamma = ad::mul(gamma, circular_columns(weights, start, view.window));
    Var gamma_flat = ad::reshape(gamma, {h * view.window, cfg.clusters});
    Var feat_flat = ad::reshape(fwin, {h * view.window, cfg.d_f});
    Var vlad = residual_sum(gamma_flat, feat_flat, centers);
    Var cwin = circular_columns(convmap, start, view.window);
    Var geo = ad::reduce_mean(ad::reshape(cwin, {h * view.window, cfg.conv_dim}), 0);
    Var desc = fuse_and_normalize(g, store, prefix, vlad, geo, cfg);
    rows.push_back(ad::reshape(desc, {1, cfg.d_g}));
  }
  return rows.size() == 1 ? rows[0] : ad::concat(rows, 0);
}

Var multiview_efficient(Graph& g, ParamStore& store, const std::string& prefix,
                        Var features, const AggConfig& cfg, const ViewConfig& view,
                        std::vector<Index>* starts, const Tensor* valid) {
  const Shape& s = features.shape();
  view.validate(s[1]);
  const Index h = s[0], w = s[1];

  Var conv1 = ad::silu(ad::conv2d(features, g.param(store.get(prefix + ".conv1.k")),
                                  g.param(store.get(prefix + ".conv1.b")),
                                  ad::Pad::CircularHorizontal));
  Var convmap = ad::conv2d(conv1, g.param(store.get(prefix + ".conv2.k")),
                           g.param(store.get(prefix + ".conv2.b")),
                           ad::Pad::CircularHorizontal);

  // vertical pre-sums: V1[j] = sum_i gamma[i,j]^T f[i,j], S0[j] = sum_i gamma[i,j]
  Var gamma = soft_assign(g, store, prefix, features, cfg);           // H x W x K
  if (valid) gamma = ad::mul(gamma, valid_weights(g, *valid, h, w));
  Var gamma_cols = ad::permute(gamma, {1, 2, 0});                     // W x K x H
  Var feat_cols = ad::permute(features, {1, 0, 2});                   // W x H x d_f
  Var v1 = ad::bmm(gamma_cols, feat_cols);                            // W x K x d_f
  Var s0 = ad::reduce_sum(gamma, 0);                                  // W x K
  Var ccol = ad::reduce_sum(convmap, 0);                              // W x conv_dim

  // circular prefix sums: duplicate columns, prepend a zero row, cumsum
  auto prefix_sum = [&](Var cols_tensor, Shape zero_shape) {
    Var doubled = ad::concat({cols_tensor, cols_tensor}, 0);
    Var zero = g.constant(Tensor::zeros(std::move(zero_shape)));
    return ad::cumsum(ad::concat({zero, doubled}, 0));
  };
  Var p1 = prefix_sum(v1, {1, cfg.clusters, cfg.d_f});
  Var p0 = prefix_sum(s0, {1, cfg.clusters});
  Var pc = prefix_sum(ccol, {1, cfg.conv_dim});

  Var centers = g.param(store.get(prefix + ".centers"));
  const Index n_v = view.n_views(w);
  const double inv_pixels = 1.0 / static_cast<double>(h * view.window);
  if (starts) starts->clear();
  std::vector<Var> rows;
  for (Index j = 0; j < n_v; ++j) {
    const Index a = j * view.delta, b = a + view.window;
    if (starts) starts->push_back(a);
    Var v1w = ad::reshape(ad::sub(ad::slice(p1, 0, b, 1), ad::slice(p1, 0, a, 1)),
                          {cfg.clusters, cfg.d_f});
    Var s0w = ad::reshape(ad::sub(ad::slice(p0, 0, b, 1), ad::slice(p0, 0, a, 1)),
                          {cfg.clusters, 1});
    Var vlad = ad::sub(v1w, ad::mul(s0w, centers));
    Var geo = ad::affine(
        ad::reshape(ad::sub(ad::slice(pc, 0, b, 1), ad::slice(pc, 0, a, 1)),
                    {cfg.conv_dim}),
        inv_pixels, 0.0);
    Var desc = fuse_and_normalize(g, store, prefix, vlad, geo, cfg);
    rows.push_back(ad::reshape(desc, {1, cfg.d_g}));
  }
  return rows.size() == 1 ? rows[0] : ad::concat(rows, 0);
}

namespace {

constexpr char kMagic[8] = {'X', 'M', 'P', 'R', 'D', 'E', 'S', 'C'};

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

}  // namespace

void save_descriptors(const std::string& path, const ViewDescriptorSet& set) {
  if (set.descriptors.rank() != 2 ||
      set.descriptors.extent(0) != static_cast<Index>(set.starts.size()))
    throw std::invalid_argument("descriptors: starts/rows mismatch");
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("descriptors: cannot open '" + path + "' for writing");
  os.write(kMagic, 8);
  put_u32(os, 1);
  put_u32(os, static_cast<std::uint32_t>(set.cloud_id));
  put_u32(os, static_cast<std::uint32_t>(set.descriptors.extent(0)));
  put_u32(os, static_cast<std::uint32_t>(set.descriptors.extent(1)));
  for (Index st : set.starts) put_u32(os, static_cast<std::uint32_t>(st));
  for (Index i = 0; i < set.descriptors.numel(); ++i) {
    const float f = static_cast<float>(set.descriptors.data()[i]);
    std::uint32_t bits;
    std::memcpy(&bits, &f, 4);
    put_u32(os, bits);
  }
  if (!os) throw std::runtime_error("descriptors: write to '" + path + "' failed");
}

ViewDescriptorSet load_descriptors(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("descriptors: cannot open '" + path + "'");
  char magic[8];
  is.read(magic, 8);
  if (!is || std::memcmp(magic, kMagic, 8) != 0)
    throw std::runtime_error("descriptors: '" + path + "' has a bad magic header");
  const std::uint32_t version = get_u32(is);
  if (version != 1)
    throw std::runtime_error("descriptors: unsupported version " + std::to_string(version));
  ViewDescriptorSet set;
  set.cloud_id = static_cast<int>(get_u32(is));
  const Index n_v = static_cast<Index>(get_u32(is));
  const Index d_g = static_cast<Index>(get_u32(is));
  set.starts.resize(static_cast<std::size_t>(n_v));
  for (Index i = 0; i < n_v; ++i)
    set.starts[static_cast<std::size_t>(i)] = static_cast<Index>(get_u32(is));
  set.descriptors = Tensor({n_v, d_g});
  for (Index i = 0; i < set.descriptors.numel(); ++i) {
    const std::uint32_t bits = get_u32(is);
    float f;
    std::memcpy(&f, &bits, 4);
    set.descriptors.data()[i] = static_cast<double>(f);
  }
  if (!is) throw std::runtime_error("descriptors: '" + path + "' truncated");
  return set;
}

}  // namespace xmpr::agg
