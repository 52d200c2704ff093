#include "gad/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "gad/parallel.hpp"

namespace gad {

namespace {

bool g_tanh_fault = false;

constexpr Index kGemmGrain = 2048;

// out = a * b with deterministic row-chunk threading. Each output row is
// produced by exactly one thread, so the reduction order per coefficient is
// fixed regardless of the thread count.
void gemm(ConstMatMap a, ConstMatMap b, MatMap out) {
  par::for_range(a.rows(), kGemmGrain, [&](Index r0, Index r1) {
    out.middleRows(r0, r1 - r0).noalias() =
        a.middleRows(r0, r1 - r0) * b;
  });
}

MatMap map_grad(Arr& g, Index rows, Index cols) {
  return MatMap(g.data(), rows, cols);
}

Shape drop_axis(const Shape& s, Index axis) {
  Shape out;
  for (Index i = 0; i < static_cast<Index>(s.size()); ++i)
    if (i != axis) out.push_back(s[static_cast<size_t>(i)]);
  if (out.empty()) out.push_back(1);
  return out;
}

}  // namespace

void set_tanh_fault_injection(bool enabled) { g_tanh_fault = enabled; }

Tensor matmul(const Ctx& ctx, const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.cols() != b.mat().rows())
    throw ShapeError(str("matmul: incompatible shapes ", shape_str(a.shape()),
                         " vs ", shape_str(b.shape())));
  const Index m = a.rows(), n = b.cols();
  Tensor out = Tensor::zeros({m, n});
  gemm(a.mat(), b.mat(), out.mat());
  if (ctx.tape) {
    ctx.tape->record(
        [a, b, out](Gradients& g) {
          const Arr* go = g.find(out);
          if (!go) return;
          ConstMatMap gom(go->data(), out.rows(), out.cols());
          MatMap ga = map_grad(g.acc(a), a.rows(), a.cols());
          par::for_range(a.rows(), kGemmGrain, [&](Index r0, Index r1) {
            ga.middleRows(r0, r1 - r0).noalias() +=
                gom.middleRows(r0, r1 - r0) * b.mat().transpose();
          });
          MatMap gb = map_grad(g.acc(b), b.dim(0), b.dim(1));
          par::for_range(b.dim(0), 64, [&](Index c0, Index c1) {
            gb.middleRows(c0, c1 - c0).noalias() +=
                a.mat().middleCols(c0, c1 - c0).transpose() * gom;
          });
        },
        {out.id()});
  }
  return out;
}

Tensor transpose(const Ctx& ctx, const Tensor& a) {
  if (a.rank() != 2)
    throw ShapeError(str("transpose: expected rank-2, got ", shape_str(a.shape())));
  Tensor out = Tensor::zeros({a.cols(), a.rows()});
  out.mat() = a.mat().transpose();
  if (ctx.tape) {
    ctx.tape->record(
        [a, out](Gradients& g) {
          const Arr* go = g.find(out);
          if (!go) return;
          ConstMatMap gom(go->data(), out.rows(), out.cols());
          map_grad(g.acc(a), a.rows(), a.cols()).noalias() += gom.transpose();
        },
        {out.id()});
  }
  return out;
}

Tensor add(const Ctx& ctx, const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  Tensor out = Tensor::from_flat(a.shape(), a.values() + b.values());
  if (ctx.tape) {
    ctx.tape->record(
        [a, b, out](Gradients& g) {
          const Arr* go = g.find(out);
          if (!go) return;
          g.add(a, *go);
          g.add(b, *go);
        },
        {out.id()});
  }
  return out;
}

Tensor sub(const Ctx& ctx, const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  Tensor out = Tensor::from_flat(a.shape(), a.values() - b.values());
  if (ctx.tape) {
    ctx.tape->record(
        [a, b, out](Gradients& g) {
          const Arr* go = g.find(out);
          if (!go) return;
          g.add(a, *go);
          g.acc(b) -= *go;
        },
        {out.id()});
  }
  return out;
}

Tensor hadamard(const Ctx& ctx, const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "hadamard");
  Tensor out = Tensor::from_flat(a.shape(), a.values() * b.values());
  if (ctx.tape) {
    ctx.tape->record(
        [a, b, out](Gradients& g) {
          const Arr* go = g.find(out);
          if (!go) return;
          g.add(a, *go * b.values());
          g.add(b, *go * a.values());
        },
        {out.id()});
  }
  return out;
}

Tensor scale(const Ctx& ctx, const Tensor& a, double c) {
  Tensor out = Tensor::from_flat(a.shape(), a.values() * c);
  if (ctx.tape) {
    ctx.tape->record(
        [a, out, c](Gradients& g) {
          const Arr* go = g.find(out);
          if (!go) return;
          g.add(a, *go * c);
        },
        {out.id()});
  }
  return out;
}

Tensor leaky_relu(const Ctx& ctx, const Tensor& a, double slope) {
  Tensor out = Tensor::from_flat(
      a.shape(), (a.values() >= 0.0).select(a.values(), a.values() * slope));
  if (ctx.margin) ctx.note_margin(a.values().abs().minCoeff());
  if (ctx.tape) {
    ctx.tape->record(
        [a, out, slope](Gradients& g) {
          const Arr* go = g.find(out);
          if (!go) return;
          g.add(a, (a.values() >= 0.0).select(*go, *go * slope));
        },
        {out.id()});
  }
  return out;
}

Tensor tanh_act(const Ctx& ctx, const Tensor& a) {
  Tensor out = Tensor::from_flat(a.shape(), a.values().tanh());
  if (ctx.tape) {
    ctx.tape->record(
        [out, a](Gradients& g) {
          const Arr* go = g.find(out);
          if (!go) return;
          if (g_tanh_fault) {
            g.add(a, *go);  // deliberately wrong: d tanh != 1
            return;
          }
          g.add(a, *go * (1.0 - out.values().square()));
        },
        {out.id()});
  }
  return out;
}

Tensor sigmoid_act(const Ctx& ctx, const Tensor& a) {
  Arr y(a.size());
  const Arr& x = a.values();
  for (Index i = 0; i < a.size(); ++i) {
    const double v = x[i];
    y[i] = v >= 0.0 ? 1.0 / (1.0 + std::exp(-v))
                    : std::exp(v) / (1.0 + std::exp(v));
  }
  Tensor out = Tensor::from_flat(a.shape(), std::move(y));
  if (ctx.tape) {
    ctx.tape->record(
        [out, a](Gradients& g) {
          const Arr* go = g.find(out);
          if (!go) return;
          g.add(a, *go * out.values() * (1.0 - out.values()));
        },
        {out.id()});
  }
  return out;
}

Tensor linear(const Ctx& ctx, const Tensor& x, const Tensor& weight,
              const Tensor& bias) {
  if (weight.rank() != 2 || x.cols() != weight.dim(0))
    throw ShapeError(str("linear: input ", shape_str(x.shape()),
                         " does not match weight ", shape_str(weight.shape())));
  const Index c_out = weight.dim(1);
  const bool has_bias = bias.valid();
  if (has_bias && (bias.rank() != 1 || bias.dim(0) != c_out))
    throw ShapeError(str("linear: bias ", shape_str(bias.shape()),
                         " does not match weight ", shape_str(weight.shape())));
  Shape out_shape = x.shape();
  out_shape.back() = c_out;
  Tensor out = Tensor::zeros(out_shape);
  const Index rows = x.rows();
  par::for_range(rows, kGemmGrain, [&](Index r0, Index r1) {
    auto block = out.mat().middleRows(r0, r1 - r0);
    block.noalias() = x.mat().middleRows(r0, r1 - r0) * weight.mat();
    if (has_bias)
      block.rowwise() += Eigen::RowVectorXd::Map(bias.data(), c_out);
  });
  if (ctx.tape) {
    ctx.tape->record(
        [x, weight, bias, out, has_bias](Gradients& g) {
          const Arr* go = g.find(out);
          if (!go) return;
          ConstMatMap gom(go->data(), out.rows(), out.cols());
          MatMap gx = map_grad(g.acc(x), x.rows(), x.cols());
          par::for_range(x.rows(), kGemmGrain, [&](Index r0, Index r1) {
            gx.middleRows(r0, r1 - r0).noalias() +=
                gom.middleRows(r0, r1 - r0) * weight.mat().transpose();
          });
          // d weight: chunk over its rows (columns of x)
          MatMap gw = map_grad(g.acc(weight), weight.dim(0), weight.dim(1));
          par::for_range(weight.dim(0), 64, [&](Index c0, Index c1) {
            gw.middleRows(c0, c1 - c0).noalias() +=
                x.mat().middleCols(c0, c1 - c0).transpose() * gom;
          });
          if (has_bias)
            map_grad(g.acc(bias), 1, bias.size()).noalias() +=
                gom.colwise().sum();
        },
        {out.id()});
  }
  return out;
}

Tensor batch_norm(const Ctx& ctx, const Tensor& x, BatchNormState& state,
                  const Tensor& gamma, const Tensor& beta) {
  const Index rows = x.rows(), c = x.cols();
  if (state.running_mean.size() != c || gamma.size() != c || beta.size() != c)
    throw ShapeError(str("batch_norm: channel mismatch, input ",
                         shape_str(x.shape()), " vs state width ",
                         state.running_mean.size()));
  const auto gmap = Eigen::RowVectorXd::Map(gamma.data(), c);
  const auto bmap = Eigen::RowVectorXd::Map(beta.data(), c);
  Tensor out = Tensor::zeros(x.shape());
  Arr xhat(x.size());
  MatMap xhat_m(xhat.data(), rows, c);
  Arr istd(c);
  if (ctx.training) {
    if (rows < 2)
      throw ShapeError(str("batch_norm: degenerate batch of ", rows,
                           " row(s) in training mode"));
    const Eigen::RowVectorXd mu = x.mat().colwise().mean();
    Mat centered = x.mat().rowwise() - mu;
    const Eigen::RowVectorXd var =
        centered.array().square().colwise().mean().matrix();
    istd = (var.transpose().array() + state.eps).rsqrt();
    xhat_m = centered.array().rowwise() * istd.transpose().array();
    state.running_mean =
        (1.0 - state.momentum) * state.running_mean + state.momentum * mu.transpose().array();
    state.running_var =
        (1.0 - state.momentum) * state.running_var + state.momentum * var.transpose().array();
  } else {
    istd = (state.running_var + state.eps).rsqrt();
    xhat_m = (x.mat().rowwise() - state.running_mean.matrix().transpose())
                 .array()
                 .rowwise() *
             istd.transpose().array();
  }
  out.mat() = (xhat_m.array().rowwise() * gmap.array()).rowwise() + bmap.array();
  if (ctx.tape) {
    const bool training = ctx.training;
    ctx.tape->record(
        [x, gamma, beta, out, xhat = std::move(xhat), istd = std::move(istd),
         training, rows, c](Gradients& g) {
          const Arr* go = g.find(out);
          if (!go) return;
          ConstMatMap gom(go->data(), rows, c);
          ConstMatMap xh(xhat.data(), rows, c);
          map_grad(g.acc(gamma), 1, c).noalias() +=
              (gom.array() * xh.array()).colwise().sum().matrix();
          map_grad(g.acc(beta), 1, c).noalias() += gom.colwise().sum();
          const auto gmapb = Eigen::RowVectorXd::Map(gamma.data(), c);
          Mat dxhat = gom.array().rowwise() * gmapb.array();
          MatMap gx = map_grad(g.acc(x), rows, c);
          if (training) {
            const Eigen::RowVectorXd mean_d = dxhat.colwise().mean();
            const Eigen::RowVectorXd mean_dx =
                (dxhat.array() * xh.array()).colwise().mean().matrix();
            gx.array() +=
                (((dxhat.rowwise() - mean_d).array() -
                  xh.array().rowwise() * mean_dx.array())
                     .rowwise() *
                 istd.transpose().array());
          } else {
            gx.array() += dxhat.array().rowwise() * istd.transpose().array();
          }
        },
        {out.id()});
  }
  return out;
}

Tensor softmax_rows(const Ctx& ctx, const Tensor& a) {
  if (a.rank() != 2)
    throw ShapeError(str("softmax_rows: expected rank-2, got ",
                         shape_str(a.shape())));
  const Index rows = a.rows(), c = a.cols();
  Tensor out = Tensor::zeros(a.shape());
  auto src = a.mat();
  auto dst = out.mat();
  for (Index r = 0; r < rows; ++r) {
    const double m = src.row(r).maxCoeff();
    dst.row(r) = (src.row(r).array() - m).exp();
    dst.row(r) /= dst.row(r).sum();
  }
  (void)c;
  if (ctx.tape) {
    ctx.tape->record(
        [a, out](Gradients& g) {
          const Arr* go = g.find(out);
          if (!go) return;
          ConstMatMap gom(go->data(), out.rows(), out.cols());
          auto y = out.mat();
          MatMap ga = map_grad(g.acc(a), a.rows(), a.cols());
          const Eigen::VectorXd dot =
              (gom.array() * y.array()).rowwise().sum().matrix();
          ga.array() +=
              y.array() * (gom.array().colwise() - dot.array());
        },
        {out.id()});
  }
  return out;
}

MaxOut max_over_axis(const Ctx& ctx, const Tensor& a, Index axis) {
  if (axis < 0 || axis >= a.rank())
    throw ShapeError(str("max_over_axis: axis ", axis, " invalid for ",
                         shape_str(a.shape())));
  const Index axisn = a.dim(axis);
  if (axisn == 0) throw ShapeError("max_over_axis: empty axis");
  Index outer = 1, inner = 1;
  for (Index i = 0; i < axis; ++i) outer *= a.dim(i);
  for (Index i = axis + 1; i < a.rank(); ++i) inner *= a.dim(i);
  MaxOut res;
  res.values = Tensor::zeros(drop_axis(a.shape(), axis));
  res.argmax.assign(static_cast<size_t>(outer * inner), 0);
  const double* src = a.data();
  double* dst = res.values.data();
  double min_gap = std::numeric_limits<double>::infinity();
  for (Index o = 0; o < outer; ++o) {
    for (Index i = 0; i < inner; ++i) {
      double best = -std::numeric_limits<double>::infinity();
      double second = best;
      int32_t bi = 0;
      for (Index j = 0; j < axisn; ++j) {
        const double v = src[(o * axisn + j) * inner + i];
        if (v > best) {
          second = best;
          best = v;
          bi = static_cast<int32_t>(j);
        } else if (v > second) {
          second = v;
        }
      }
      dst[o * inner + i] = best;
      res.argmax[static_cast<size_t>(o * inner + i)] = bi;
      if (axisn > 1) min_gap = std::min(min_gap, best - second);
    }
  }
  if (axisn > 1) ctx.note_margin(min_gap);
  if (ctx.tape) {
    Tensor values = res.values;
    std::vector<int32_t> argmax = res.argmax;
    ctx.tape->record(
        [a, values, argmax = std::move(argmax), outer, inner,
         axisn](Gradients& g) {
          const Arr* go = g.find(values);
          if (!go) return;
          Arr& ga = g.acc(a);
          for (Index o = 0; o < outer; ++o)
            for (Index i = 0; i < inner; ++i) {
              const Index flat = o * inner + i;
              ga[(o * axisn + argmax[static_cast<size_t>(flat)]) * inner + i] +=
                  (*go)[flat];
            }
        },
        {res.values.id()});
  }
  return res;
}

Tensor mean_over_axis(const Ctx& ctx, const Tensor& a, Index axis) {
  if (axis < 0 || axis >= a.rank())
    throw ShapeError(str("mean_over_axis: axis ", axis, " invalid for ",
                         shape_str(a.shape())));
  const Index axisn = a.dim(axis);
  if (axisn == 0) throw ShapeError("mean_over_axis: empty axis");
  Index outer = 1, inner = 1;
  for (Index i = 0; i < axis; ++i) outer *= a.dim(i);
  for (Index i = axis + 1; i < a.rank(); ++i) inner *= a.dim(i);
  Tensor out = Tensor::zeros(drop_axis(a.shape(), axis));
  const double* src = a.data();
  double* dst = out.data();
  for (Index o = 0; o < outer; ++o)
    for (Index i = 0; i < inner; ++i) {
      double s = 0.0;
      for (Index j = 0; j < axisn; ++j) s += src[(o * axisn + j) * inner + i];
      dst[o * inner + i] = s / static_cast<double>(axisn);
    }
  if (ctx.tape) {
    ctx.tape->record(
        [a, out, outer, inner, axisn](Gradients& g) {
          const Arr* go = g.find(out);
          if (!go) return;
          Arr& ga = g.acc(a);
          const double inv = 1.0 / static_cast<double>(axisn);
          for (Index o = 0; o < outer; ++o)
            for (Index i = 0; i < inner; ++i) {
              const double v = (*go)[o * inner + i] * inv;
              for (Index j = 0; j < axisn; ++j)
                ga[(o * axisn + j) * inner + i] += v;
            }
        },
        {out.id()});
  }
  return out;
}

Tensor weighted_sum_axis1(const Ctx& ctx, const Tensor& values,
                          const Tensor& weights) {
  if (values.rank() != 3 || weights.rank() != 2 ||
      values.dim(0) != weights.dim(0) || values.dim(1) != weights.dim(1))
    throw ShapeError(str("weighted_sum_axis1: values ",
                         shape_str(values.shape()), " vs weights ",
                         shape_str(weights.shape())));
  const Index n = values.dim(0), k = values.dim(1), c = values.dim(2);
  Tensor out = Tensor::zeros({n, c});
  const double* v = values.data();
  const double* w = weights.data();
  double* dst = out.data();
  for (Index i = 0; i < n; ++i)
    for (Index j = 0; j < k; ++j) {
      const double wj = w[i * k + j];
      const double* row = v + (i * k + j) * c;
      double* o = dst + i * c;
      for (Index t = 0; t < c; ++t) o[t] += wj * row[t];
    }
  if (ctx.tape) {
    ctx.tape->record(
        [values, weights, out, n, k, c](Gradients& g) {
          const Arr* go = g.find(out);
          if (!go) return;
          Arr& gv = g.acc(values);
          Arr& gw = g.acc(weights);
          const double* v = values.data();
          const double* w = weights.data();
          for (Index i = 0; i < n; ++i)
            for (Index j = 0; j < k; ++j) {
              const double wj = w[i * k + j];
              double dot = 0.0;
              for (Index t = 0; t < c; ++t) {
                const double goc = (*go)[i * c + t];
                gv[(i * k + j) * c + t] += wj * goc;
                dot += v[(i * k + j) * c + t] * goc;
              }
              gw[i * k + j] += dot;
            }
        },
        {out.id()});
  }
  return out;
}

Tensor concat_channels(const Ctx& ctx, const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_channels: no parts");
  const Index rows = parts[0].rows();
  Shape lead = parts[0].shape();
  lead.pop_back();
  Index total = 0;
  for (const Tensor& p : parts) {
    Shape pl = p.shape();
    pl.pop_back();
    if (p.rows() != rows || pl != lead)
      throw ShapeError(str("concat_channels: leading dims differ: ",
                           shape_str(parts[0].shape()), " vs ",
                           shape_str(p.shape())));
    total += p.cols();
  }
  Shape out_shape = parts[0].shape();
  out_shape.back() = total;
  Tensor out = Tensor::zeros(out_shape);
  Index ofs = 0;
  for (const Tensor& p : parts) {
    out.mat().middleCols(ofs, p.cols()) = p.mat();
    ofs += p.cols();
  }
  if (ctx.tape) {
    ctx.tape->record(
        [parts, out, rows](Gradients& g) {
          const Arr* go = g.find(out);
          if (!go) return;
          ConstMatMap gom(go->data(), rows, out.cols());
          Index ofs = 0;
          for (const Tensor& p : parts) {
            map_grad(g.acc(p), rows, p.cols()).noalias() +=
                gom.middleCols(ofs, p.cols());
            ofs += p.cols();
          }
        },
        {out.id()});
  }
  return out;
}

Tensor concat_rows(const Ctx& ctx, const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no parts");
  Shape trail = parts[0].shape();
  trail.erase(trail.begin());
  Index rows0 = 0;
  for (const Tensor& p : parts) {
    Shape pt = p.shape();
    pt.erase(pt.begin());
    if (pt != trail)
      throw ShapeError(str("concat_rows: trailing dims differ: ",
                           shape_str(parts[0].shape()), " vs ",
                           shape_str(p.shape())));
    rows0 += p.dim(0);
  }
  Shape out_shape = parts[0].shape();
  out_shape[0] = rows0;
  Tensor out = Tensor::zeros(out_shape);
  Index ofs = 0;
  for (const Tensor& p : parts) {
    out.values().segment(ofs, p.size()) = p.values();
    ofs += p.size();
  }
  if (ctx.tape) {
    ctx.tape->record(
        [parts, out](Gradients& g) {
          const Arr* go = g.find(out);
          if (!go) return;
          Index ofs = 0;
          for (const Tensor& p : parts) {
            g.acc(p) += go->segment(ofs, p.size());
            ofs += p.size();
          }
        },
        {out.id()});
  }
  return out;
}

std::vector<Tensor> split_rows(const Ctx& ctx, const Tensor& a,
                               const std::vector<Index>& sizes) {
  Index total = 0;
  for (Index s : sizes) total += s;
  if (total != a.dim(0))
    throw ShapeError(str("split_rows: sizes sum to ", total, " but dim0 is ",
                         a.dim(0)));
  std::vector<Tensor> parts;
  std::vector<const TensorData*> ids;
  Index ofs = 0;
  const Index stride = a.dim(0) ? a.size() / a.dim(0) : 0;
  for (Index s : sizes) {
    Shape sh = a.shape();
    sh[0] = s;
    Tensor p = Tensor::from_flat(sh, a.values().segment(ofs * stride, s * stride));
    ids.push_back(p.id());
    parts.push_back(std::move(p));
    ofs += s;
  }
  if (ctx.tape) {
    ctx.tape->record(
        [a, parts, stride](Gradients& g) {
          Index ofs = 0;
          for (const Tensor& p : parts) {
            if (const Arr* gp = g.find(p))
              g.acc(a).segment(ofs * stride, p.size()) += *gp;
            ofs += p.dim(0);
          }
        },
        std::move(ids));
  }
  return parts;
}

Tensor repeat_rows(const Ctx& ctx, const Tensor& a, Index n) {
  if (a.rows() != 1)
    throw ShapeError(str("repeat_rows: expected a single row, got ",
                         shape_str(a.shape())));
  const Index c = a.cols();
  Tensor out = Tensor::zeros({n, c});
  out.mat().rowwise() = Eigen::RowVectorXd::Map(a.data(), c);
  if (ctx.tape) {
    ctx.tape->record(
        [a, out, n, c](Gradients& g) {
          const Arr* go = g.find(out);
          if (!go) return;
          ConstMatMap gom(go->data(), n, c);
          map_grad(g.acc(a), 1, c).noalias() += gom.colwise().sum();
        },
        {out.id()});
  }
  return out;
}

Tensor dropout(const Ctx& ctx, const Tensor& a, double rate) {
  if (rate < 0.0 || rate >= 1.0)
    throw ConfigError(str("dropout rate ", rate, " outside [0, 1)"));
  if (!ctx.training || rate == 0.0) {
    Tensor out = Tensor::from_flat(a.shape(), a.values());
    if (ctx.tape) {
      ctx.tape->record(
          [a, out](Gradients& g) {
            if (const Arr* go = g.find(out)) g.add(a, *go);
          },
          {out.id()});
    }
    return out;
  }
  if (!ctx.rng)
    throw ConfigError("dropout in training mode requires an rng in the context");
  const double keep_scale = 1.0 / (1.0 - rate);
  Arr mask(a.size());
  for (Index i = 0; i < a.size(); ++i)
    mask[i] = ctx.rng->uniform() >= rate ? keep_scale : 0.0;
  Tensor out = Tensor::from_flat(a.shape(), a.values() * mask);
  if (ctx.tape) {
    ctx.tape->record(
        [a, out, mask = std::move(mask)](Gradients& g) {
          if (const Arr* go = g.find(out)) g.add(a, *go * mask);
        },
        {out.id()});
  }
  return out;
}

Tensor sum_all(const Ctx& ctx, const Tensor& a) {
  Tensor out = Tensor::zeros({1});
  out.values()[0] = a.values().sum();
  if (ctx.tape) {
    ctx.tape->record(
        [a, out](Gradients& g) {
          const Arr* go = g.find(out);
          if (!go) return;
          g.acc(a) += (*go)[0];
        },
        {out.id()});
  }
  return out;
}

Tensor reshape(const Ctx& ctx, const Tensor& a, Shape shape) {
  if (shape_size(shape) != a.size())
    throw ShapeError(str("reshape: ", shape_str(a.shape()), " to ",
                         shape_str(shape), " changes element count"));
  Tensor out = Tensor::from_flat(std::move(shape), a.values());
  if (ctx.tape) {
    ctx.tape->record(
        [a, out](Gradients& g) {
          if (const Arr* go = g.find(out)) g.add(a, *go);
        },
        {out.id()});
  }
  return out;
}

Tensor attention_scores(const Ctx& ctx, const Tensor& q, const Tensor& k,
                        const Tensor& px, AttnBias bias, double inv_scale) {
  const Index n = q.rows(), c = q.cols();
  if (k.rows() != n || k.cols() != c)
    throw ShapeError(str("attention_scores: q ", shape_str(q.shape()),
                         " vs k ", shape_str(k.shape())));
  if (bias != AttnBias::none && (!px.valid() || px.rows() != n || px.cols() != c))
    throw ShapeError("attention_scores: position embedding shape mismatch");
  Mat s(n, n);
  s.noalias() = q.mat() * k.mat().transpose();
  if (bias == AttnBias::contextual)
    s.noalias() += (q.mat() + k.mat()) * px.mat().transpose();
  else if (bias == AttnBias::naive_pos)
    s.noalias() += px.mat() * px.mat().transpose();
  s *= inv_scale;
  Tensor out = Tensor::zeros({n, n});
  auto dst = out.mat();
  for (Index r = 0; r < n; ++r) {
    const double m = s.row(r).maxCoeff();
    dst.row(r) = (s.row(r).array() - m).exp();
    dst.row(r) /= dst.row(r).sum();
  }
  if (ctx.tape) {
    ctx.tape->record(
        [q, k, px, out, bias, inv_scale, n, c](Gradients& g) {
          const Arr* go = g.find(out);
          if (!go) return;
          ConstMatMap gom(go->data(), n, n);
          auto y = out.mat();
          // softmax backward, then undo the scale
          const Eigen::VectorXd dot =
              (gom.array() * y.array()).rowwise().sum().matrix();
          Mat ds = (y.array() * (gom.array().colwise() - dot.array())).matrix();
          ds *= inv_scale;
          MatMap gq = map_grad(g.acc(q), n, c);
          MatMap gk = map_grad(g.acc(k), n, c);
          gq.noalias() += ds * k.mat();
          gk.noalias() += ds.transpose() * q.mat();
          if (bias == AttnBias::contextual) {
            gq.noalias() += ds * px.mat();
            gk.noalias() += ds * px.mat();
            map_grad(g.acc(px), n, c).noalias() +=
                ds.transpose() * (q.mat() + k.mat());
          } else if (bias == AttnBias::naive_pos) {
            map_grad(g.acc(px), n, c).noalias() +=
                (ds + ds.transpose()) * px.mat();
          }
        },
        {out.id()});
  }
  return out;
}

}  // namespace gad
