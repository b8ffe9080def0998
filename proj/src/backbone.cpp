#include "xmpr/backbone.hpp"

#include <cmath>
#include <stdexcept>

namespace xmpr::bb {

using ad::Graph;
using ad::Var;

namespace {

Tensor uniform_init(Shape shape, Index fan_in, Rng& rng) {
  Tensor t(std::move(shape));
  const double s = 1.0 / std::sqrt(static_cast<double>(fan_in));
  for (Index i = 0; i < t.numel(); ++i) t.data()[i] = rng.uniform(-s, s);
  return t;
}

double inv_softplus(double y) { return std::log(std::expm1(y)); }

Var linear(Graph& g, ParamStore& store, const std::string& prefix, Var x) {
  Var w = g.param(store.get(prefix + ".w"));
  Var b = g.param(store.get(prefix + ".b"));
  return ad::add(ad::matmul(x, w), b);
}

void init_linear(ParamStore& store, const std::string& prefix, Index in, Index out,
                 Rng& rng) {
  store.create(prefix + ".w", uniform_init({in, out}, in, rng));
  store.create(prefix + ".b", Tensor::zeros({out}));
}

}  // namespace

void init_ssm(ParamStore& store, const std::string& prefix, Index d, Index n, Rng& rng) {
  // A = -(state index + 1) at start, the standard diagonal real init
  Tensor a_log({d, n});
  for (Index i = 0; i < d; ++i)
    for (Index j = 0; j < n; ++j)
      a_log.at({i, j}) = std::log(static_cast<double>(j) + 1.0);
  store.create(prefix + ".a_log", std::move(a_log));
  store.create(prefix + ".w_delta", uniform_init({d, d}, d, rng));
  Tensor b_delta({d});
  for (Index i = 0; i < d; ++i) b_delta.data()[i] = inv_softplus(rng.uniform(0.01, 0.1));
  store.create(prefix + ".b_delta", std::move(b_delta));
  store.create(prefix + ".w_b", uniform_init({d, n}, d, rng));
  store.create(prefix + ".w_c", uniform_init({d, n}, d, rng));
}

Var ssm_forward(Graph& g, ParamStore& store, const std::string& prefix, Var x,
                const BackboneConfig& cfg) {
  Var delta = ad::softplus(ad::add(ad::matmul(x, g.param(store.get(prefix + ".w_delta"))),
                                   g.param(store.get(prefix + ".b_delta"))));
  Var b = ad::matmul(x, g.param(store.get(prefix + ".w_b")));
  Var c = ad::matmul(x, g.param(store.get(prefix + ".w_c")));
  Var a = ad::neg(ad::exp(g.param(store.get(prefix + ".a_log"))));
  return ad::selective_scan(x, delta, a, b, c, cfg.scan_mode, cfg.discretization,
                            cfg.scan_block);
}

Var cross_scan_merge(Graph& g, Var grid,
                     const std::function<Var(Var, int)>& scan_dir) {
  const Shape& s = grid.shape();
  if (s.size() != 3) throw std::invalid_argument("cross_scan_merge: grid must be H x W x d");
  const Index h = s[0], w = s[1], d = s[2];

  Var rows = ad::reshape(grid, {h * w, d});
  Var o1 = ad::reshape(scan_dir(rows, 0), {h, w, d});
  Var o2 = ad::reshape(ad::reverse(scan_dir(ad::reverse(rows, 0), 1), 0), {h, w, d});

  Var cols = ad::reshape(ad::permute(grid, {1, 0, 2}), {w * h, d});
  Var o3 = ad::permute(ad::reshape(scan_dir(cols, 2), {w, h, d}), {1, 0, 2});
  Var o4 = ad::permute(
      ad::reshape(ad::reverse(scan_dir(ad::reverse(cols, 0), 3), 0), {w, h, d}),
      {1, 0, 2});

  return ad::add(ad::add(o1, o2), ad::add(o3, o4));
}

void init_vss_block(ParamStore& store, const std::string& prefix, Index d,
                    const BackboneConfig& cfg, Rng& rng) {
  store.create(prefix + ".norm.gamma", Tensor::full({d}, 1.0));
  store.create(prefix + ".norm.beta", Tensor::zeros({d}));
  init_linear(store, prefix + ".in", d, d, rng);
  for (int dir = 0; dir < 4; ++dir)
    init_ssm(store, prefix + ".dir" + std::to_string(dir), d, cfg.state_size, rng);
  init_linear(store, prefix + ".gate", d, d, rng);
  init_linear(store, prefix + ".out", d, d, rng);
}

Var vss_block(Graph& g, ParamStore& store, const std::string& prefix, Var grid,
              const BackboneConfig& cfg) {
  const Shape& s = grid.shape();
  const Index h = s[0], w = s[1], d = s[2];
  Var flat = ad::reshape(grid, {h * w, d});
  Var z = ad::add(ad::mul(ad::layer_norm(flat), g.param(store.get(prefix + ".norm.gamma"))),
                  g.param(store.get(prefix + ".norm.beta")));
  Var inner = ad::silu(linear(g, store, prefix + ".in", z));
  Var scanned = cross_scan_merge(g, ad::reshape(inner, {h, w, d}),
                                 [&](Var seq, int dir) {
                                   return ssm_forward(
                                       g, store, prefix + ".dir" + std::to_string(dir),
                                       seq, cfg);
                                 });
  Var gate = ad::silu(linear(g, store, prefix + ".gate", z));
  Var out = linear(g, store, prefix + ".out", ad::mul(ad::reshape(scanned, {h * w, d}), gate));
  return ad::reshape(ad::add(flat, out), {h, w, d});
}

void init_pyramid(ParamStore& store, const std::string& prefix,
                  const BackboneConfig& cfg, Rng& rng) {
  if (cfg.scales < 1) throw std::invalid_argument("pyramid: scales must be >= 1");
  for (int s = 0; s < cfg.scales; ++s) {
    const std::string sp = prefix + ".s" + std::to_string(s);
    init_linear(store, sp + ".embed", cfg.in_channels, cfg.d_model, rng);
    for (int b = 0; b < cfg.blocks_per_scale; ++b)
      init_vss_block(store, sp + ".b" + std::to_string(b), cfg.d_model, cfg, rng);
  }
  init_linear(store, prefix + ".fuse", cfg.d_model * cfg.scales, cfg.d_f, rng);
}

Var pyramid_forward(Graph& g, ParamStore& store, const std::string& prefix, Var image,
                    const BackboneConfig& cfg) {
  const Shape& s = image.shape();
  if (s.size() != 3 || s[2] != cfg.in_channels)
    throw std::invalid_argument("pyramid: image must be H x W x " +
                                std::to_string(cfg.in_channels) + ", got " +
                                shape_string(s));
  const Index h = s[0], w = s[1];
  const Index coarsest = Index{1} << (cfg.scales - 1);
  if (h < coarsest || w < coarsest || h % coarsest != 0 || w % coarsest != 0)
    throw std::invalid_argument("pyramid: image " + shape_string(s) +
                                " smaller than or not divisible by the coarsest scale " +
                                std::to_string(coarsest));

  std::vector<Var> levels;
  for (int sc = 0; sc < cfg.scales; ++sc) {
    const std::string sp = prefix + ".s" + std::to_string(sc);
    const Index f = Index{1} << sc;
    Var x = sc == 0 ? image : ad::avg_pool2d(image, f);
    const Index hs = h / f, ws = w / f;
    Var emb = linear(g, store, sp + ".embed", ad::reshape(x, {hs * ws, cfg.in_channels}));
    Var grid = ad::reshape(emb, {hs, ws, cfg.d_model});
    for (int b = 0; b < cfg.blocks_per_scale; ++b)
      grid = vss_block(g, store, sp + ".b" + std::to_string(b), grid, cfg);
    levels.push_back(sc == 0 ? grid : ad::upsample_nearest(grid, f));
  }
  Var cat = levels.size() == 1 ? levels[0] : ad::concat(levels, 2);
  Var fused = linear(g, store, prefix + ".fuse",
                     ad::reshape(cat, {h * w, cfg.d_model * cfg.scales}));
  return ad::reshape(fused, {h, w, cfg.d_f});
}

}  // namespace xmpr::bb
