#include "gad/layers.hpp"

#include <cmath>

#include "gad/parallel.hpp"

namespace gad {

namespace {
constexpr Index kRowGrain = 2048;
}

Dense Dense::init(Index in, Index out, Rng& rng, bool bias) {
  Dense d;
  const double lim = std::sqrt(1.0 / static_cast<double>(in));
  d.w = Tensor::uniform({in, out}, -lim, lim, rng, true);
  if (bias) d.b = Tensor::zeros({out}, true);
  return d;
}

Stage Stage::init(Index in, Index out, Rng& rng, double bn_momentum,
                  double bn_eps) {
  Stage s;
  const double lim = std::sqrt(1.0 / static_cast<double>(in));
  s.w = Tensor::uniform({in, out}, -lim, lim, rng, true);
  s.gamma = Tensor::full({out}, 1.0, true);
  s.beta = Tensor::zeros({out}, true);
  s.bn = BatchNormState::make(out, bn_momentum, bn_eps);
  return s;
}

Tensor stage_forward(const Ctx& ctx, const Tensor& x, Stage& st, double slope) {
  const Index rows = x.rows(), cout = st.w.dim(1);
  if (x.cols() != st.w.dim(0))
    throw ShapeError(str("stage: input ", shape_str(x.shape()),
                         " does not match weight ", shape_str(st.w.shape())));
  Shape out_shape = x.shape();
  out_shape.back() = cout;
  Tensor out = Tensor::zeros(out_shape);
  MatMap y = out.mat();
  par::for_range(rows, kRowGrain, [&](Index r0, Index r1) {
    y.middleRows(r0, r1 - r0).noalias() =
        x.mat().middleRows(r0, r1 - r0) * st.w.mat();
  });

  Arr mu(cout), istd(cout);
  const bool training = ctx.training;
  if (training) {
    if (rows < 2)
      throw ShapeError(str("stage: degenerate batch of ", rows,
                           " row(s) in training mode"));
    mu = y.colwise().mean().transpose().array();
    y.rowwise() -= mu.matrix().transpose();
    const Arr var = y.array().square().colwise().mean().transpose();
    istd = (var + st.bn.eps).rsqrt();
    st.bn.running_mean =
        (1.0 - st.bn.momentum) * st.bn.running_mean + st.bn.momentum * mu;
    st.bn.running_var =
        (1.0 - st.bn.momentum) * st.bn.running_var + st.bn.momentum * var;
  } else {
    mu = st.bn.running_mean;
    istd = (st.bn.running_var + st.bn.eps).rsqrt();
    y.rowwise() -= mu.matrix().transpose();
  }
  y.array().rowwise() *=
      (istd * Eigen::Map<const Arr>(st.gamma.data(), cout)).transpose();
  y.array().rowwise() +=
      Eigen::Map<const Arr>(st.beta.data(), cout).transpose();
  if (ctx.margin) ctx.note_margin(y.array().abs().minCoeff());
  y = (y.array() >= 0.0).select(y, slope * y.array());

  if (ctx.tape) {
    Tensor w = st.w, gamma = st.gamma, beta = st.beta;
    ctx.tape->record(
        [x, w, gamma, beta, out, mu = std::move(mu), istd = std::move(istd),
         training, slope, rows, cout](Gradients& g) {
          const Arr* go = g.find(out);
          if (!go) return;
          const Index cin = x.cols();
          // rebuild normalized activations; cheaper to redo one product than
          // to keep an extra rows x cout tensor alive through the forward pass
          Mat xhat(rows, cout);
          par::for_range(rows, kRowGrain, [&](Index r0, Index r1) {
            xhat.middleRows(r0, r1 - r0).noalias() =
                x.mat().middleRows(r0, r1 - r0) * w.mat();
          });
          xhat.rowwise() -= mu.matrix().transpose();
          xhat.array().rowwise() *= istd.transpose();

          ConstMatMap gom(go->data(), rows, cout);
          ConstMatMap outm(out.data(), rows, cout);
          Mat t =
              (outm.array() >= 0.0).select(gom, gom.array() * slope);  // d bn-out
          MatMap(g.acc(gamma).data(), 1, cout).array() +=
              (t.array() * xhat.array()).colwise().sum();
          MatMap(g.acc(beta).data(), 1, cout).array() +=
              t.array().colwise().sum();
          t.array().rowwise() *=
              Eigen::Map<const Arr>(gamma.data(), cout).transpose();  // d xhat
          if (training) {
            const Eigen::RowVectorXd mean_d = t.colwise().mean();
            const Eigen::RowVectorXd mean_dx =
                (t.array() * xhat.array()).colwise().mean().matrix();
            t.rowwise() -= mean_d;
            t.array() -= xhat.array().rowwise() * mean_dx.array();
          }
          t.array().rowwise() *= istd.transpose();  // d pre-activation
          MatMap gx(g.acc(x).data(), rows, cin);
          par::for_range(rows, kRowGrain, [&](Index r0, Index r1) {
            gx.middleRows(r0, r1 - r0).noalias() +=
                t.middleRows(r0, r1 - r0) * w.mat().transpose();
          });
          MatMap gw(g.acc(w).data(), cin, cout);
          par::for_range(cin, 64, [&](Index c0, Index c1) {
            gw.middleRows(c0, c1 - c0).noalias() +=
                x.mat().middleCols(c0, c1 - c0).transpose() * t;
          });
        },
        {out.id()});
  }
  return out;
}

Tensor edge_features(const Ctx& ctx, const Tensor& coords, const Tensor& feats,
                     const KnnGraph& graph, bool with_metrics) {
  const Index n = coords.dim(0), c = feats.cols();
  if (coords.rank() != 2 || coords.dim(1) != 3)
    throw ShapeError(str("edge_features: expected Nx3 coords, got ",
                         shape_str(coords.shape())));
  if (feats.dim(0) != n || graph.indices.rows() != n)
    throw ShapeError("edge_features: coords, features and graph disagree on N");
  const Index k = graph.indices.cols();
  const Index width = 3 + c + (with_metrics ? 2 : 0);
  Tensor out = Tensor::zeros({n, k, width});
  const double* xs = coords.data();
  const double* fs = feats.data();
  double* dst = out.data();
  const double inv_c = 1.0 / static_cast<double>(c);
  double min_dist = std::numeric_limits<double>::infinity();
  double min_off = min_dist;
  par::for_range(n, 256, [&](Index i0, Index i1) {
    for (Index i = i0; i < i1; ++i) {
      const double* xi = xs + 3 * i;
      const double* fi = fs + c * i;
      for (Index j = 0; j < k; ++j) {
        const Index nb = graph.indices(i, j);
        const double* xn = xs + 3 * nb;
        const double* fn = fs + c * nb;
        double* row = dst + (i * k + j) * width;
        double d2 = 0.0;
        for (int a = 0; a < 3; ++a) {
          row[a] = xi[a] - xn[a];
          d2 += row[a] * row[a];
        }
        double l1 = 0.0;
        for (Index a = 0; a < c; ++a) {
          row[3 + a] = fi[a] - fn[a];
          l1 += std::abs(row[3 + a]);
        }
        if (with_metrics) {
          row[3 + c] = std::sqrt(d2);
          row[3 + c + 1] = l1 * inv_c;
        }
      }
    }
  });
  if (ctx.margin && with_metrics) {
    for (Index i = 0; i < n; ++i)
      for (Index j = 0; j < k; ++j) {
        const double* row = out.data() + (i * k + j) * width;
        min_dist = std::min(min_dist, row[3 + c]);
        for (Index a = 0; a < c; ++a)
          min_off = std::min(min_off, std::abs(row[3 + a]));
      }
    ctx.note_margin(min_dist);
    ctx.note_margin(min_off);
  }
  if (ctx.tape) {
    IndexMat indices = graph.indices;
    ctx.tape->record(
        [coords, feats, out, indices = std::move(indices), with_metrics, n, c,
         k, width, inv_c](Gradients& g) {
          const Arr* go = g.find(out);
          if (!go) return;
          Arr& gx = g.acc(coords);
          Arr& gf = g.acc(feats);
          const double* xs = coords.data();
          const double* fs = feats.data();
          for (Index i = 0; i < n; ++i) {
            const double* xi = xs + 3 * i;
            const double* fi = fs + c * i;
            for (Index j = 0; j < k; ++j) {
              const Index nb = indices(i, j);
              const double* grow = go->data() + (i * k + j) * width;
              const double* xn = xs + 3 * nb;
              const double* fn = fs + c * nb;
              double dir[3];
              double d2 = 0.0;
              for (int a = 0; a < 3; ++a) {
                dir[a] = xi[a] - xn[a];
                d2 += dir[a] * dir[a];
              }
              const double dist = std::sqrt(d2);
              const double gdist =
                  with_metrics && dist > 0.0 ? grow[3 + c] / dist : 0.0;
              for (int a = 0; a < 3; ++a) {
                const double v = grow[a] + gdist * dir[a];
                gx[3 * i + a] += v;
                gx[3 * nb + a] -= v;
              }
              const double gl = with_metrics ? grow[3 + c + 1] * inv_c : 0.0;
              for (Index a = 0; a < c; ++a) {
                const double off = fi[a] - fn[a];
                const double sgn = off > 0.0 ? 1.0 : (off < 0.0 ? -1.0 : 0.0);
                const double v = grow[3 + a] + gl * sgn;
                gf[c * i + a] += v;
                gf[c * nb + a] -= v;
              }
            }
          }
        },
        {out.id()});
  }
  return out;
}

CptParams CptParams::init(Index channels, Rng& rng, double bn_momentum,
                          double bn_eps) {
  CptParams p;
  p.pos_mlp = Stage::init(3, channels, rng, bn_momentum, bn_eps);
  p.feat_init = Stage::init(3, channels, rng, bn_momentum, bn_eps);
  const double lim = std::sqrt(1.0 / static_cast<double>(channels));
  p.wq = Tensor::uniform({channels, channels}, -lim, lim, rng, true);
  p.wk = Tensor::uniform({channels, channels}, -lim, lim, rng, true);
  p.wv = Tensor::uniform({channels, channels}, -lim, lim, rng, true);
  p.out_mlp = Stage::init(channels, channels, rng, bn_momentum, bn_eps);
  return p;
}

std::vector<Tensor> cpt_forward_batch(const Ctx& ctx,
                                      const std::vector<Tensor>& coords,
                                      const std::vector<Tensor>& feats,
                                      CptParams& params, const CptConfig& cfg,
                                      std::vector<CptTrace>* traces) {
  const size_t batch = coords.size();
  if (batch == 0) throw ConfigError("cpt: empty batch");
  const Index c = cfg.channels;
  std::vector<Index> sizes;
  sizes.reserve(batch);
  for (const Tensor& x : coords) sizes.push_back(x.dim(0));

  Tensor x_cat = concat_rows(ctx, coords);
  Tensor p_cat = stage_forward(ctx, x_cat, params.pos_mlp, cfg.slope);
  Tensor f_cat;
  if (feats.empty()) {
    f_cat = stage_forward(ctx, x_cat, params.feat_init, cfg.slope);
  } else {
    if (feats.size() != batch)
      throw ConfigError("cpt: feature list does not match batch");
    f_cat = concat_rows(ctx, feats);
  }
  if (f_cat.cols() != c)
    throw ConfigError(str("cpt: feature width ", f_cat.cols(),
                          " does not match position embedding width ", c));
  Tensor fin_cat = add(ctx, p_cat, f_cat);
  Tensor q_cat = linear(ctx, fin_cat, params.wq, Tensor{});
  Tensor k_cat = linear(ctx, fin_cat, params.wk, Tensor{});
  Tensor v_cat = linear(ctx, fin_cat, params.wv, Tensor{});
  Tensor vp_cat = add(ctx, v_cat, p_cat);

  std::vector<Tensor> p_b = split_rows(ctx, p_cat, sizes);
  std::vector<Tensor> q_b = split_rows(ctx, q_cat, sizes);
  std::vector<Tensor> k_b = split_rows(ctx, k_cat, sizes);
  std::vector<Tensor> vp_b = split_rows(ctx, vp_cat, sizes);
  std::vector<Tensor> fin_b = split_rows(ctx, fin_cat, sizes);

  const double inv_scale = 1.0 / std::sqrt(static_cast<double>(c));
  std::vector<Tensor> fsa_b(batch);
  for (size_t i = 0; i < batch; ++i) {
    Tensor attn = attention_scores(ctx, q_b[i], k_b[i], p_b[i], cfg.bias,
                                   inv_scale);
    fsa_b[i] = matmul(ctx, attn, vp_b[i]);
    if (traces) {
      traces->resize(batch);
      (*traces)[i] = CptTrace{p_b[i], fin_b[i], attn, fsa_b[i]};
    }
  }
  Tensor fsa_cat = concat_rows(ctx, fsa_b);
  Tensor mlp_in = cfg.attention == CptAttention::offset
                      ? sub(ctx, fin_cat, fsa_cat)
                      : fsa_cat;
  Tensor mapped = stage_forward(ctx, mlp_in, params.out_mlp, cfg.slope);
  Tensor out_cat = add(ctx, mapped, fin_cat);
  return split_rows(ctx, out_cat, sizes);
}

Tensor cpt_forward(const Ctx& ctx, const Tensor& coords, const Tensor& feats,
                   CptParams& params, const CptConfig& cfg, CptTrace* trace) {
  std::vector<Tensor> f;
  if (feats.valid()) f.push_back(feats);
  std::vector<CptTrace> traces;
  auto out = cpt_forward_batch(ctx, {coords}, f, params, cfg,
                               trace ? &traces : nullptr);
  if (trace) *trace = traces[0];
  return out[0];
}

DkffDomainParams DkffDomainParams::init(const DkffConfig& cfg, Rng& rng,
                                        double bn_momentum, double bn_eps) {
  DkffDomainParams p;
  const Index c = cfg.channels;
  p.edge = Stage::init(cfg.edge_width(), c, rng, bn_momentum, bn_eps);
  p.expand = Stage::init(c, 4 * c, rng, bn_momentum, bn_eps);
  p.reduce = Stage::init(4 * c, c, rng, bn_momentum, bn_eps);
  if (cfg.pooling == Pooling::attention) p.pool = Dense::init(c, 1, rng);
  return p;
}

DkffParams DkffParams::init(const DkffConfig& cfg, Rng& rng, double bn_momentum,
                            double bn_eps) {
  DkffParams p;
  if (cfg.uses_spatial())
    p.spatial = DkffDomainParams::init(cfg, rng, bn_momentum, bn_eps);
  if (cfg.uses_feature())
    p.feature = DkffDomainParams::init(cfg, rng, bn_momentum, bn_eps);
  p.gate = Dense::init(2 * cfg.channels, cfg.channels, rng);
  return p;
}

std::vector<Tensor> dkff_aggregate_batch(const Ctx& ctx,
                                         const std::vector<Tensor>& edges,
                                         DkffDomainParams& dp,
                                         const DkffConfig& cfg) {
  std::vector<Index> sizes;
  for (const Tensor& e : edges) sizes.push_back(e.dim(0));
  Tensor cat = concat_rows(ctx, edges);
  Tensor h = stage_forward(ctx, cat, dp.edge, cfg.slope);
  h = stage_forward(ctx, h, dp.expand, cfg.slope);
  h = stage_forward(ctx, h, dp.reduce, cfg.slope);
  std::vector<Tensor> parts = split_rows(ctx, h, sizes);
  std::vector<Tensor> pooled(parts.size());
  for (size_t i = 0; i < parts.size(); ++i) {
    switch (cfg.pooling) {
      case Pooling::max:
        pooled[i] = max_over_axis(ctx, parts[i], 1).values;
        break;
      case Pooling::avg:
        pooled[i] = mean_over_axis(ctx, parts[i], 1);
        break;
      case Pooling::attention: {
        Tensor s = linear(ctx, parts[i], dp.pool.w, dp.pool.b);
        s = reshape(ctx, s, {parts[i].dim(0), parts[i].dim(1)});
        Tensor alpha = softmax_rows(ctx, s);
        pooled[i] = weighted_sum_axis1(ctx, parts[i], alpha);
        break;
      }
    }
  }
  return pooled;
}

Tensor dkff_aggregate(const Ctx& ctx, const Tensor& edges,
                      DkffDomainParams& params, const DkffConfig& cfg) {
  return dkff_aggregate_batch(ctx, {edges}, params, cfg)[0];
}

std::vector<Tensor> dkff_forward_batch(const Ctx& ctx,
                                       const std::vector<Tensor>& coords,
                                       const std::vector<Tensor>& f_in,
                                       DkffParams& params,
                                       const DkffConfig& cfg,
                                       const std::vector<KnnGraph>* spatial_graphs,
                                       std::vector<DkffTrace>* traces) {
  const size_t batch = coords.size();
  if (batch == 0 || f_in.size() != batch)
    throw ConfigError("dkff: batch lists disagree");
  std::vector<Index> sizes;
  for (const Tensor& x : coords) sizes.push_back(x.dim(0));
  for (const Tensor& f : f_in)
    if (f.cols() != cfg.channels)
      throw ConfigError(str("dkff: feature width ", f.cols(),
                            " does not match configured channels ",
                            cfg.channels));

  std::vector<Tensor> spatial_agg, feature_agg;
  if (cfg.uses_spatial()) {
    std::vector<Tensor> edges(batch);
    for (size_t i = 0; i < batch; ++i) {
      KnnGraph graph;
      if (spatial_graphs) {
        graph = (*spatial_graphs)[i];
      } else if (ctx.margin) {
        // margin probing needs the k/k+1 gap, which the brute path reports;
        // results are identical by the kd-tree equivalence invariant
        graph = knn_brute(coords[i], cfg.k, cfg.include_self, ctx.margin);
      } else {
        graph = knn_spatial(coords[i], cfg.k, cfg.include_self);
      }
      edges[i] = edge_features(ctx, coords[i], f_in[i], graph, cfg.edge_metrics);
    }
    spatial_agg =
        dkff_aggregate_batch(ctx, edges, params.spatial, cfg);
  }
  if (cfg.uses_feature()) {
    std::vector<Tensor> edges(batch);
    for (size_t i = 0; i < batch; ++i) {
      KnnGraph graph = knn_feature(f_in[i], cfg.k, cfg.include_self, ctx.margin);
      edges[i] = edge_features(ctx, coords[i], f_in[i], graph, cfg.edge_metrics);
    }
    feature_agg =
        dkff_aggregate_batch(ctx, edges, params.feature, cfg);
  }

  std::vector<Tensor> gate_in(batch);
  for (size_t i = 0; i < batch; ++i) {
    switch (cfg.domains) {
      case DkffDomains::both:
        gate_in[i] = concat_channels(ctx, {spatial_agg[i], feature_agg[i]});
        break;
      case DkffDomains::spatial_only:
        gate_in[i] = concat_channels(ctx, {spatial_agg[i], spatial_agg[i]});
        break;
      case DkffDomains::feature_only:
        gate_in[i] = concat_channels(ctx, {feature_agg[i], feature_agg[i]});
        break;
    }
  }
  Tensor gate_cat = concat_rows(ctx, gate_in);
  Tensor lin = linear(ctx, gate_cat, params.gate.w, params.gate.b);
  Tensor w_cat = cfg.gate_act == GateAct::tanh ? tanh_act(ctx, lin)
                                               : sigmoid_act(ctx, lin);
  std::vector<Tensor> w_b = split_rows(ctx, w_cat, sizes);
  std::vector<Tensor> out(batch);
  for (size_t i = 0; i < batch; ++i) {
    out[i] = add(ctx, hadamard(ctx, f_in[i], w_b[i]), f_in[i]);
    if (traces) {
      traces->resize(batch);
      (*traces)[i] =
          DkffTrace{cfg.uses_spatial() ? spatial_agg[i] : Tensor{},
                    cfg.uses_feature() ? feature_agg[i] : Tensor{},
                    gate_in[i], w_b[i]};
    }
  }
  return out;
}

Tensor dkff_forward(const Ctx& ctx, const Tensor& coords, const Tensor& f_in,
                    DkffParams& params, const DkffConfig& cfg,
                    DkffTrace* trace) {
  std::vector<DkffTrace> traces;
  auto out = dkff_forward_batch(ctx, {coords}, {f_in}, params, cfg, nullptr,
                                trace ? &traces : nullptr);
  if (trace) *trace = traces[0];
  return out[0];
}

}  // namespace gad
