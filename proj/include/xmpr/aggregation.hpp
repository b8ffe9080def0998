#ifndef XMPR_AGGREGATION_HPP
#define XMPR_AGGREGATION_HPP

#include <string>
#include <vector>

#include "xmpr/autodiff.hpp"
#include "xmpr/checkpoint.hpp"
#include "xmpr/rng.hpp"

namespace xmpr::agg {

struct AggConfig {
  Index clusters = 48;   // K
  Index d_f = 64;        // per-pixel feature width
  Index conv_hidden = 16;
  Index conv_dim = 16;   // geometric branch output width
  Index d_g = 256;       // descriptor width
  bool intra_norm = false;  // unit-normalize each residual row before fusion
};

/// Horizontal view windows over a panorama with `cols` columns.
struct ViewConfig {
  Index window = 200;  // L columns per view
  Index delta = 30;    // view offset; views always wrap circularly

  void validate(Index cols) const;
  Index n_views(Index cols) const { return cols / delta; }
};

struct ViewDescriptorSet {
  int cloud_id = -1;
  std::vector<Index> starts;  // first column of each view
  Tensor descriptors;         // n_v x d_g, unit rows
};

/// Creates <prefix>.{centers, assign.w, assign.b, conv1.k, conv1.b, conv2.k,
/// conv2.b, fuse.w, fuse.b}.
void init_vlad(ParamStore& store, const std::string& prefix, const AggConfig& cfg,
               Rng& rng);

/// Per-pixel softmax over cluster logits. features: H x W x d_f -> H x W x K.
ad::Var soft_assign(ad::Graph& g, ParamStore& store, const std::string& prefix,
                    ad::Var features, const AggConfig& cfg);

/// F_k = sum_ij gamma_k(f_ij) (f_ij - c_k). -> K x d_f.
/// valid (H x W, optional) restricts the sum to pixels with nonzero entries;
/// pass it when the map contains no-projection pixels that carry no content.
ad::Var netvlad_aggregate(ad::Graph& g, ParamStore& store, const std::string& prefix,
                          ad::Var features, const AggConfig& cfg,
                          const Tensor* valid = nullptr);

/// Two-layer convolution stack plus global average pooling. -> conv_dim.
ad::Var conv_geometric_branch(ad::Graph& g, ParamStore& store, const std::string& prefix,
                              ad::Var features, const AggConfig& cfg, ad::Pad pad);

/// Concat flattened residuals with the geometric branch, fuse to d_g, unit-normalize.
ad::Var xnetvlad_descriptor(ad::Graph& g, ParamStore& store, const std::string& prefix,
                            ad::Var features, const AggConfig& cfg, ad::Pad pad,
                            const Tensor* valid = nullptr);

/// Per-view descriptors, one xnetvlad evaluation per circular column window.
/// The geometric branch runs once on the full width (circular padding) and is
/// then pooled per window, so both paths share the same view semantics.
/// Returns n_v x d_g; view start columns go to *starts when non-null.
ad::Var multiview_naive(ad::Graph& g, ParamStore& store, const std::string& prefix,
                        ad::Var features, const AggConfig& cfg, const ViewConfig& view,
                        std::vector<Index>* starts = nullptr,
                        const Tensor* valid = nullptr);

/// Same output via per-column vertical pre-sums and circular prefix windows.
ad::Var multiview_efficient(ad::Graph& g, ParamStore& store, const std::string& prefix,
                            ad::Var features, const AggConfig& cfg, const ViewConfig& view,
                            std::vector<Index>* starts = nullptr,
                            const Tensor* valid = nullptr);

/// Little-endian float32 descriptor container with id and start columns.
void save_descriptors(const std::string& path, const ViewDescriptorSet& set);
ViewDescriptorSet load_descriptors(const std::string& path);

}  // namespace xmpr::agg

#endif  // XMPR_AGGREGATION_HPP
