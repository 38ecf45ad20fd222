#pragma once

#include <map>
#include <span>
#include <utility>

#include "cme/network.hpp"
#include "cme/synthshapes.hpp"
#include "cme/tensor.hpp"

namespace cme {

struct PairBounds {
  double lower = 0;
  double upper = 0;
};

/// Per-class intra/inter squared distances and the pairwise margin brackets.
struct MarginStats {
  std::map<int, double> d_intra;
  std::map<int, double> d_inter;  // min squared distance to another class mean
  std::map<std::pair<int, int>, PairBounds> pair_bounds;

  double mean_d_intra() const;
  double min_d_inter() const;
  double mean_d_inter() const;
  double mean_pair_lower() const;
  double mean_pair_upper() const;
};

struct LossBreakdown {
  double l_cls = 0, l_bbx = 0, l_obj = 0, l_det = 0, l_mrg = 0, total = 0;
  double lambda = 0;
};

/// Sum of squared distances of prototypes to their mean. The mean is
/// recomputed and must agree with the given one to 1e-9.
Tensor intra_class_distance(std::span<const Tensor> protos, const Tensor& mean);

/// Per class, the minimum squared distance to any other class mean.
/// Requires at least two classes.
std::map<int, Tensor> inter_class_distance(const std::map<int, Tensor>& means);

/// Margin brackets for one class pair: (pairwise_inter - intra_i - intra_j,
/// pairwise_inter).
PairBounds margin_bounds(double intra_i, double intra_j, double pairwise_inter);

inline constexpr double kInterEpsilon = 1e-8;

struct MarginLossResult {
  Tensor loss;
  bool degenerate = false;  // sum of inter distances fell below the guard
};

/// Ratio of summed intra distances to summed (min-form) inter distances,
/// differentiable through the prototypes. Degenerate geometry (all class
/// means coincident) returns a large clamped value instead of dividing by
/// zero.
MarginLossResult max_margin_loss(const std::map<int, std::vector<Tensor>>& protos,
                                 const std::map<int, Tensor>& means);

/// Value-level diagnostics over the same prototypes.
MarginStats margin_stats(const std::map<int, std::vector<Tensor>>& protos,
                         const std::map<int, Tensor>& means);

struct DetectionLossParts {
  Tensor cls;  // scalar
  Tensor bbx;  // scalar
  Tensor obj;  // scalar
  int positive_cells = 0;
};

/// Grid-cell target assignment: the cell containing a box center is positive
/// for that box's class branch. l_obj is mean BCE over every branch-cell;
/// l_bbx compares sigmoid-space box parameters at positive cells; l_cls is
/// softmax cross-entropy over the class logits gathered across branches.
DetectionLossParts detection_loss(const std::map<int, GridPrediction>& predictions,
                                  const QueryItem& query);

/// Assemble the breakdown; l_det = l_cls + l_bbx + l_obj and
/// total = l_det + lambda * l_mrg by construction.
LossBreakdown combined_loss(double l_cls, double l_bbx, double l_obj, double l_mrg,
                            double lambda);

}  // namespace cme
