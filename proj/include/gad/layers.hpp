#pragma once

#include "gad/knn.hpp"
#include "gad/ops.hpp"

namespace gad {

// Plain affine layer.
struct Dense {
  Tensor w;  // in x out
  Tensor b;  // out, may be invalid for bias-free projections

  static Dense init(Index in, Index out, Rng& rng, bool bias = true);
};

// One shared-MLP stage: linear + batch norm + leaky relu. This is the "MLP"
// building block used everywhere in the network. The linear part carries no
// bias: batch norm subtracts the mean anyway, so a bias would be a dead
// parameter and beta provides the affine shift.
struct Stage {
  Tensor w, gamma, beta;
  BatchNormState bn;

  static Stage init(Index in, Index out, Rng& rng, double bn_momentum = 0.1,
                    double bn_eps = 1e-5);
  Index in_width() const { return w.dim(0); }
  Index out_width() const { return w.dim(1); }
};

// Fused forward for a Stage. Mathematically identical to
// leaky_relu(batch_norm(linear(x,w,b)), slope) but keeps only the output on
// the tape; backward re-derives the pre-activation from the stored input.
Tensor stage_forward(const Ctx& ctx, const Tensor& x, Stage& stage,
                     double slope);

// Per-edge descriptor rows <x_i - x_j, f_i - f_j, |x_i - x_j|_2, mean |f_i - f_j|_1>.
// The trailing two metric entries are dropped when with_metrics is false.
// Output is N x K x (C+5) (or C+3), one row per neighbor edge; both graph
// domains use the same construction, only the index table differs.
Tensor edge_features(const Ctx& ctx, const Tensor& coords, const Tensor& feats,
                     const KnnGraph& graph, bool with_metrics);

enum class Pooling { max, avg, attention };
enum class GateAct { tanh, sigmoid };
enum class DkffDomains { both, spatial_only, feature_only };
enum class CptAttention { offset, plain };

struct CptConfig {
  Index channels = 64;
  double slope = 0.2;
  AttnBias bias = AttnBias::contextual;
  CptAttention attention = CptAttention::offset;
};

struct CptParams {
  Stage pos_mlp;    // 3 -> C position embedding
  Stage feat_init;  // 3 -> C first-layer feature init
  Tensor wq, wk, wv;
  Stage out_mlp;  // C -> C

  static CptParams init(Index channels, Rng& rng, double bn_momentum,
                        double bn_eps);
};

struct CptTrace {
  Tensor p_x, f_in, attn, f_sa;
};

// Attention embedding over a batch of clouds. Shared-MLP stages run over the
// concatenated batch so normalization sees every point; the quadratic
// attention runs per cloud. Pass an empty feats vector to initialize features
// from the coordinates.
std::vector<Tensor> cpt_forward_batch(const Ctx& ctx,
                                      const std::vector<Tensor>& coords,
                                      const std::vector<Tensor>& feats,
                                      CptParams& params, const CptConfig& cfg,
                                      std::vector<CptTrace>* traces = nullptr);

Tensor cpt_forward(const Ctx& ctx, const Tensor& coords, const Tensor& feats,
                   CptParams& params, const CptConfig& cfg,
                   CptTrace* trace = nullptr);

struct DkffConfig {
  Index channels = 64;
  int k = 16;
  double slope = 0.2;
  bool edge_metrics = true;
  Pooling pooling = Pooling::max;
  GateAct gate_act = GateAct::tanh;
  DkffDomains domains = DkffDomains::both;
  bool include_self = false;

  Index edge_width() const { return channels + (edge_metrics ? 5 : 3); }
  bool uses_spatial() const { return domains != DkffDomains::feature_only; }
  bool uses_feature() const { return domains != DkffDomains::spatial_only; }
};

struct DkffDomainParams {
  Stage edge;    // (C+5) -> C
  Stage expand;  // C -> 4C inverse bottleneck
  Stage reduce;  // 4C -> C
  Dense pool;    // C -> 1, present only for attention pooling

  static DkffDomainParams init(const DkffConfig& cfg, Rng& rng,
                               double bn_momentum, double bn_eps);
};

struct DkffParams {
  DkffDomainParams spatial;  // used unless feature_only
  DkffDomainParams feature;  // used unless spatial_only
  Dense gate;                // 2C -> C, tanh/sigmoid follows directly

  static DkffParams init(const DkffConfig& cfg, Rng& rng, double bn_momentum,
                         double bn_eps);
};

struct DkffTrace {
  Tensor spatial_agg, feature_agg, gate_in, gate_w;
};

// One domain's aggregation: edge mlp -> inverse bottleneck pair -> pool over
// the neighbor axis. edges holds one N x K x E tensor per cloud.
std::vector<Tensor> dkff_aggregate_batch(const Ctx& ctx,
                                         const std::vector<Tensor>& edges,
                                         DkffDomainParams& params,
                                         const DkffConfig& cfg);

Tensor dkff_aggregate(const Ctx& ctx, const Tensor& edges,
                      DkffDomainParams& params, const DkffConfig& cfg);

// Dual-domain fusion block. Builds the spatial graph from the coordinates
// (or reuses precomputed ones) and the feature graph from the block input,
// aggregates each domain over its neighborhoods, and gates the input through
// a bounded residual multiplier: out = f_in * W + f_in.
std::vector<Tensor> dkff_forward_batch(
    const Ctx& ctx, const std::vector<Tensor>& coords,
    const std::vector<Tensor>& f_in, DkffParams& params, const DkffConfig& cfg,
    const std::vector<KnnGraph>* spatial_graphs = nullptr,
    std::vector<DkffTrace>* traces = nullptr);

Tensor dkff_forward(const Ctx& ctx, const Tensor& coords, const Tensor& f_in,
                    DkffParams& params, const DkffConfig& cfg,
                    DkffTrace* trace = nullptr);

}  // namespace gad
