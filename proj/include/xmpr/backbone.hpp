#ifndef XMPR_BACKBONE_HPP
#define XMPR_BACKBONE_HPP

#include <functional>
#include <string>

#include "xmpr/autodiff.hpp"
#include "xmpr/checkpoint.hpp"
#include "xmpr/rng.hpp"

namespace xmpr::bb {

struct BackboneConfig {
  Index in_channels = 1;
  Index d_model = 8;    // per-scale feature width
  Index state_size = 4; // N states per channel
  int scales = 2;
  int blocks_per_scale = 1;
  Index d_f = 64;       // fused output width
  ad::ScanMode scan_mode = ad::ScanMode::Sequential;
  // Bbar rule; the state transition itself is always the exact exponential.
  ad::Discretization discretization = ad::Discretization::Euler;
  Index scan_block = 64;
};

/// Input-dependent selective SSM over one flattened token order.
/// Creates <prefix>.{a_log, w_delta, b_delta, w_b, w_c}.
void init_ssm(ParamStore& store, const std::string& prefix, Index d, Index n, Rng& rng);
ad::Var ssm_forward(ad::Graph& g, ParamStore& store, const std::string& prefix,
                    ad::Var x, const BackboneConfig& cfg);  // x: T x d

/// Run `scan_dir(sequence, direction)` over the four token orders (rows
/// left-to-right, rows right-to-left, columns top-to-bottom, columns
/// bottom-to-top), map each result back onto the grid, and sum.
ad::Var cross_scan_merge(ad::Graph& g, ad::Var grid,
                         const std::function<ad::Var(ad::Var, int)>& scan_dir);

/// Norm -> input projection -> four-way scan -> gate -> output projection,
/// with a residual connection around the whole block.
void init_vss_block(ParamStore& store, const std::string& prefix, Index d,
                    const BackboneConfig& cfg, Rng& rng);
ad::Var vss_block(ad::Graph& g, ParamStore& store, const std::string& prefix,
                  ad::Var grid, const BackboneConfig& cfg);  // grid: H x W x d

/// Multi-scale pyramid: pool by 2^s, embed, VSS blocks, upsample, concat,
/// fuse to d_f channels. Output H x W x d_f.
void init_pyramid(ParamStore& store, const std::string& prefix,
                  const BackboneConfig& cfg, Rng& rng);
ad::Var pyramid_forward(ad::Graph& g, ParamStore& store, const std::string& prefix,
                        ad::Var image, const BackboneConfig& cfg);

}  // namespace xmpr::bb

#endif  // XMPR_BACKBONE_HPP
