#include "cme/losses.hpp"

#include <algorithm>
#include <cmath>

namespace cme {

namespace {

Tensor squared_distance(const Tensor& a, const Tensor& b) {
  Tensor d = sub(a, b);
  return sum(mul(d, d));
}

double squared_distance_value(std::span<const real> a, std::span<const real> b) {
  double acc = 0;
  for (size_t i = 0; i < a.size(); ++i)
    acc += (static_cast<double>(a[i]) - b[i]) * (static_cast<double>(a[i]) - b[i]);
  return acc;
}

}  // namespace

double MarginStats::mean_d_intra() const {
  double acc = 0;
  for (const auto& [c, v] : d_intra) acc += v;
  return d_intra.empty() ? 0 : acc / static_cast<double>(d_intra.size());
}

double MarginStats::min_d_inter() const {
  double best = 0;
  bool first = true;
  for (const auto& [c, v] : d_inter) {
    best = first ? v : std::min(best, v);
    first = false;
  }
  return best;
}

double MarginStats::mean_d_inter() const {
  double acc = 0;
  for (const auto& [c, v] : d_inter) acc += v;
  return d_inter.empty() ? 0 : acc / static_cast<double>(d_inter.size());
}

double MarginStats::mean_pair_lower() const {
  double acc = 0;
  for (const auto& [p, b] : pair_bounds) acc += b.lower;
  return pair_bounds.empty() ? 0 : acc / static_cast<double>(pair_bounds.size());
}

double MarginStats::mean_pair_upper() const {
  double acc = 0;
  for (const auto& [p, b] : pair_bounds) acc += b.upper;
  return pair_bounds.empty() ? 0 : acc / static_cast<double>(pair_bounds.size());
}

Tensor intra_class_distance(std::span<const Tensor> protos, const Tensor& mean) {
  if (protos.empty()) throw ValueError("intra_class_distance: empty prototype set");
  // the mean must be the mean of these prototypes
  for (int i = 0; i < mean.size(); ++i) {
    double acc = 0;
    for (const auto& p : protos) acc += p.values()[static_cast<size_t>(i)];
    acc /= static_cast<double>(protos.size());
    if (std::abs(acc - mean.values()[static_cast<size_t>(i)]) > 1e-9)
      throw ValueError("intra_class_distance: mean inconsistent with prototypes");
  }
  Tensor acc = squared_distance(protos[0], mean);
  for (size_t k = 1; k < protos.size(); ++k) acc = add(acc, squared_distance(protos[k], mean));
  return acc;
}

std::map<int, Tensor> inter_class_distance(const std::map<int, Tensor>& means) {
  if (means.size() < 2)
    throw ValueError("inter_class_distance: needs at least 2 classes, margin undefined");
  std::map<int, Tensor> out;
  for (const auto& [i, mi] : means) {
    std::vector<Tensor> dists;
    for (const auto& [j, mj] : means) {
      if (j == i) continue;
      dists.push_back(squared_distance(mj, mi));
    }
    out[i] = dists.size() == 1 ? dists[0] : reduce_min(stack_scalars(dists));
  }
  return out;
}

PairBounds margin_bounds(double intra_i, double intra_j, double pairwise_inter) {
  return PairBounds{pairwise_inter - intra_i - intra_j, pairwise_inter};
}

MarginLossResult max_margin_loss(const std::map<int, std::vector<Tensor>>& protos,
                                 const std::map<int, Tensor>& means) {
  if (protos.size() < 2) throw ValueError("max_margin_loss: needs at least 2 classes");
  Tensor sum_intra;
  for (const auto& [c, ps] : protos) {
    const auto it = means.find(c);
    if (it == means.end()) throw ValueError("max_margin_loss: missing mean for a class");
    Tensor d = intra_class_distance(ps, it->second);
    sum_intra = sum_intra.defined() ? add(sum_intra, d) : d;
  }
  Tensor sum_inter;
  for (const auto& [c, d] : inter_class_distance(means)) {
    sum_inter = sum_inter.defined() ? add(sum_inter, d) : d;
  }
  MarginLossResult result;
  if (sum_inter.value() <= kInterEpsilon) {
    // coincident class means: clamp instead of dividing by zero
    result.loss = add(scale(sum_intra, real(1e8)), Tensor::scalar(real(1e4)));
    result.degenerate = true;
  } else {
    result.loss = div_scalar(sum_intra, sum_inter);
  }
  return result;
}

MarginStats margin_stats(const std::map<int, std::vector<Tensor>>& protos,
                         const std::map<int, Tensor>& means) {
  MarginStats stats;
  for (const auto& [c, ps] : protos) {
    const auto& mean = means.at(c).values();
    double acc = 0;
    for (const auto& p : ps) acc += squared_distance_value(p.values(), mean);
    stats.d_intra[c] = acc;
  }
  for (const auto& [i, mi] : means) {
    double best = -1;
    for (const auto& [j, mj] : means) {
      if (j == i) continue;
      const double d = squared_distance_value(mj.values(), mi.values());
      if (best < 0 || d < best) best = d;
      stats.pair_bounds[{i, j}] = margin_bounds(stats.d_intra.at(i), stats.d_intra.at(j), d);
    }
    if (best >= 0) stats.d_inter[i] = best;
  }
  return stats;
}

// ---------------------------------------------------------------------------
// Detection loss
// ---------------------------------------------------------------------------

DetectionLossParts detection_loss(const std::map<int, GridPrediction>& predictions,
                                  const QueryItem& query) {
  if (predictions.empty()) throw ValueError("detection_loss: no class branches");
  const int cells = grid::kCells;
  const int branches = static_cast<int>(predictions.size());

  std::vector<int> branch_class;
  std::vector<const GridPrediction*> branch_pred;
  for (const auto& [c, p] : predictions) {
    if (p.rank() != 3 || p.shape()[0] != grid::kChannels || p.shape()[1] != cells ||
        p.shape()[2] != cells)
      throw ShapeError("detection_loss: branch prediction must be [6,8,8]");
    branch_class.push_back(c);
    branch_pred.push_back(&p);
  }

  struct Positive {
    int branch, cy, cx;
    real fx, fy, fw, fh;
  };
  std::vector<Positive> positives;
  std::vector<std::vector<real>> obj_targets(
      static_cast<size_t>(branches), std::vector<real>(static_cast<size_t>(cells * cells), 0));

  for (const auto& box : query.boxes) {
    const double cx = 0.5 * (box.x0 + box.x1);
    const double cy = 0.5 * (box.y0 + box.y1);
    if (cx < 0 || cx >= kCanvas || cy < 0 || cy >= kCanvas)
      throw ValueError("detection_loss: box center outside the canvas");
    const auto it = std::find(branch_class.begin(), branch_class.end(), box.class_id);
    if (it == branch_class.end())
      throw ValueError("detection_loss: box class " + std::to_string(box.class_id) +
                       " has no prediction branch");
    const int b = static_cast<int>(it - branch_class.begin());
    const int cell_x = std::min(cells - 1, static_cast<int>(cx / grid::kCellPixels));
    const int cell_y = std::min(cells - 1, static_cast<int>(cy / grid::kCellPixels));
    auto& tgt = obj_targets[static_cast<size_t>(b)][static_cast<size_t>(cell_y * cells + cell_x)];
    if (tgt != 0) continue;  // first box claims the cell
    tgt = 1;
    positives.push_back(Positive{
        b, cell_y, cell_x,
        static_cast<real>(cx / grid::kCellPixels - cell_x),
        static_cast<real>(cy / grid::kCellPixels - cell_y),
        static_cast<real>(box.width() / kCanvas),
        static_cast<real>(box.height() / kCanvas)});
  }

  // objectness: mean BCE over every branch-cell
  Tensor obj_sum;
  for (int b = 0; b < branches; ++b) {
    Tensor chan = slice_channel(*branch_pred[static_cast<size_t>(b)], grid::kObj);
    Tensor part = bce_with_logits_sum(chan, obj_targets[static_cast<size_t>(b)]);
    obj_sum = obj_sum.defined() ? add(obj_sum, part) : part;
  }
  Tensor l_obj = scale(obj_sum, real(1) / static_cast<real>(branches * cells * cells));

  // box regression and classification at positive cells
  Tensor bbx_sum, cls_sum;
  for (const auto& pos : positives) {
    const GridPrediction& p = *branch_pred[static_cast<size_t>(pos.branch)];
    const int cell = pos.cy * cells + pos.cx;
    const real targets[4] = {pos.fx, pos.fy, pos.fw, pos.fh};
    const int channels[4] = {grid::kTx, grid::kTy, grid::kTw, grid::kTh};
    for (int i = 0; i < 4; ++i) {
      Tensor pred = sigmoid(element(p, channels[i] * cells * cells + cell));
      Tensor d = sub(pred, Tensor::scalar(targets[i]));
      Tensor se = mul(d, d);
      bbx_sum = bbx_sum.defined() ? add(bbx_sum, se) : se;
    }
    std::vector<Tensor> cls_logits;
    cls_logits.reserve(static_cast<size_t>(branches));
    for (int b = 0; b < branches; ++b)
      cls_logits.push_back(
          element(*branch_pred[static_cast<size_t>(b)], grid::kCls * cells * cells + cell));
    Tensor ce = softmax_cross_entropy(stack_scalars(cls_logits), pos.branch);
    cls_sum = cls_sum.defined() ? add(cls_sum, ce) : ce;
  }

  DetectionLossParts parts;
  parts.positive_cells = static_cast<int>(positives.size());
  const real inv_pos = positives.empty() ? real(0) : real(1) / static_cast<real>(positives.size());
  parts.bbx = positives.empty() ? Tensor::scalar(0) : scale(bbx_sum, inv_pos);
  parts.cls = positives.empty() ? Tensor::scalar(0) : scale(cls_sum, inv_pos);
  parts.obj = l_obj;
  return parts;
}

LossBreakdown combined_loss(double l_cls, double l_bbx, double l_obj, double l_mrg,
                            double lambda) {
  if (lambda < 0) throw ValueError("combined_loss: lambda must be >= 0");
  LossBreakdown b;
  b.l_cls = l_cls;
  b.l_bbx = l_bbx;
  b.l_obj = l_obj;
  b.l_det = l_cls + l_bbx + l_obj;
  b.l_mrg = l_mrg;
  b.lambda = lambda;
  b.total = b.l_det + lambda * l_mrg;
  return b;
}

}  // namespace cme
