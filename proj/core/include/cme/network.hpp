#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "cme/synthshapes.hpp"
#include "cme/tensor.hpp"

namespace cme {

namespace grid {
inline constexpr int kCells = 8;  // 8x8 cells on a 64x64 canvas
inline constexpr int kCellPixels = kCanvas / kCells;
inline constexpr int kChannels = 6;
enum Channel { kObj = 0, kTx = 1, kTy = 2, kTw = 3, kTh = 4, kCls = 5 };
}  // namespace grid

/// Per-class branch output: channels (obj, tx, ty, tw, th, cls) over the cell grid.
using GridPrediction = Tensor;  // [6,8,8]

struct ConvLayer {
  Tensor weights;  // [Cout,Cin,3,3]
  Tensor bias;     // [Cout]
};

inline constexpr int kPrototypeWidth = 64;
inline constexpr real kLeakySlope = static_cast<real>(0.1);

/// All learnable parameter groups: support encoder (4-channel input),
/// query encoder (3-channel input), the prototype filter and the
/// per-cell prediction head.
struct ModelParams {
  std::array<ConvLayer, 4> support_conv;  // 4 -> 16 -> 32 -> 64 -> 64
  std::array<ConvLayer, 3> query_conv;    // 3 -> 16 -> 32 -> 64
  Tensor filter_weights;                  // [filter_width, 64]
  Tensor filter_bias;                     // [filter_width]
  Tensor head_weights;                    // [6, 64, 1, 1]
  Tensor head_bias;                       // [6]

  static ModelParams init(std::uint64_t seed, int filter_width = kPrototypeWidth / 2);

  /// Fixed-order (name, tensor) listing used by the optimizer and checkpoints.
  std::vector<std::pair<std::string, Tensor*>> named();
  std::vector<std::pair<std::string, const Tensor*>> named() const;

  void zero_grad();
  ModelParams clone() const;
  int filter_width() const { return filter_weights.shape()[0]; }
};

/// Per-class raw prototypes v, filtered prototypes v', and their means.
struct PrototypeSet {
  std::map<int, std::vector<Tensor>> raw;
  std::map<int, std::vector<Tensor>> filtered;
  std::map<int, Tensor> raw_mean;
  std::map<int, Tensor> filtered_mean;
};

/// Mask concatenated as a fourth channel, four conv blocks, then global max
/// pooling down to a 64-vector. Differentiable through to the input image.
Tensor encode_support(const SupportItem& item, const ModelParams& params);

/// Linear projection of a raw prototype; no nonlinearity.
Tensor filter_features(const Tensor& v, const ModelParams& params);

/// Prototypes and class means for every support item, grouped by class.
PrototypeSet build_prototype_set(std::span<const SupportItem> support,
                                 const ModelParams& params);

/// Query feature map [64,8,8] from a 64x64 image (three conv blocks).
Tensor encode_query(const Tensor& image, const ModelParams& params);

/// Channel-scale the query features by a raw mean prototype, then apply the
/// 1x1 prediction head.
GridPrediction predict_class_branch(const Tensor& query_features, const Tensor& prototype,
                                    const ModelParams& params);

}  // namespace cme
