#include "cme/network.hpp"

#include <cmath>

#include "cme/rng.hpp"

namespace cme {

namespace {

Tensor he_uniform(std::vector<int> shape, int fan_in, Rng& rng) {
  const double limit = std::sqrt(6.0 / fan_in);
  int n = 1;
  for (int d : shape) n *= d;
  std::vector<real> v(static_cast<size_t>(n));
  for (auto& x : v) x = static_cast<real>(rng.uniform(-limit, limit));
  return Tensor(std::move(shape), std::move(v), true);
}

ConvLayer init_conv(int cout, int cin, int k, Rng& rng) {
  ConvLayer layer;
  layer.weights = he_uniform({cout, cin, k, k}, cin * k * k, rng);
  layer.bias = Tensor::zeros({cout}, true);
  return layer;
}

Tensor conv_block(const Tensor& x, const ConvLayer& layer) {
  return max_pool2(leaky_relu(conv2d(x, layer.weights, layer.bias, 1), kLeakySlope));
}

}  // namespace

ModelParams ModelParams::init(std::uint64_t seed, int filter_width) {
  if (filter_width < 1) throw ValueError("ModelParams: filter_width must be >= 1");
  Rng rng(derive_seed(seed, "weights"));
  ModelParams p;
  const int support_channels[5] = {4, 16, 32, 64, kPrototypeWidth};
  for (int i = 0; i < 4; ++i)
    p.support_conv[i] = init_conv(support_channels[i + 1], support_channels[i], 3, rng);
  const int query_channels[4] = {3, 16, 32, kPrototypeWidth};
  for (int i = 0; i < 3; ++i)
    p.query_conv[i] = init_conv(query_channels[i + 1], query_channels[i], 3, rng);
  p.filter_weights = he_uniform({filter_width, kPrototypeWidth}, kPrototypeWidth, rng);
  p.filter_bias = Tensor::zeros({filter_width}, true);
  p.head_weights = he_uniform({grid::kChannels, kPrototypeWidth, 1, 1}, kPrototypeWidth, rng);
  p.head_bias = Tensor::zeros({grid::kChannels}, true);
  return p;
}

std::vector<std::pair<std::string, Tensor*>> ModelParams::named() {
  std::vector<std::pair<std::string, Tensor*>> out;
  for (size_t i = 0; i < support_conv.size(); ++i) {
    out.emplace_back("support_conv" + std::to_string(i) + ".weights", &support_conv[i].weights);
    out.emplace_back("support_conv" + std::to_string(i) + ".bias", &support_conv[i].bias);
  }
  for (size_t i = 0; i < query_conv.size(); ++i) {
    out.emplace_back("query_conv" + std::to_string(i) + ".weights", &query_conv[i].weights);
    out.emplace_back("query_conv" + std::to_string(i) + ".bias", &query_conv[i].bias);
  }
  out.emplace_back("filter.weights", &filter_weights);
  out.emplace_back("filter.bias", &filter_bias);
  out.emplace_back("head.weights", &head_weights);
  out.emplace_back("head.bias", &head_bias);
  return out;
}

std::vector<std::pair<std::string, const Tensor*>> ModelParams::named() const {
  std::vector<std::pair<std::string, const Tensor*>> out;
  for (auto& [name, t] : const_cast<ModelParams*>(this)->named()) out.emplace_back(name, t);
  return out;
}

void ModelParams::zero_grad() {
  for (auto& [name, t] : named()) t->zero_grad();
}

ModelParams ModelParams::clone() const {
  ModelParams copy = *this;
  for (auto& [name, t] : copy.named()) *t = t->clone(true);
  return copy;
}

Tensor encode_support(const SupportItem& item, const ModelParams& params) {
  if (item.image.rank() != 3 || item.image.shape()[0] != 3)
    throw ShapeError("encode_support: image must be [3,H,W]");
  if (item.mask.rank() != 3 || item.mask.shape()[0] != 1 ||
      item.mask.shape()[1] != item.image.shape()[1] ||
      item.mask.shape()[2] != item.image.shape()[2])
    throw ShapeError("encode_support: mask must be [1,H,W] matching the image");
  Tensor x = concat_channels(item.image, item.mask);
  for (const auto& layer : params.support_conv) x = conv_block(x, layer);
  return global_max_pool(x);
}

Tensor filter_features(const Tensor& v, const ModelParams& params) {
  if (v.rank() != 1 || v.shape()[0] != kPrototypeWidth)
    throw ShapeError("filter_features: prototype must be [" + std::to_string(kPrototypeWidth) + "]");
  return fully_connected(v, params.filter_weights, params.filter_bias);
}

PrototypeSet build_prototype_set(std::span<const SupportItem> support,
                                 const ModelParams& params) {
  if (support.empty()) throw ValueError("build_prototype_set: no support items");
  PrototypeSet set;
  for (const auto& item : support) {
    Tensor v = encode_support(item, params);
    set.raw[item.class_id].push_back(v);
    set.filtered[item.class_id].push_back(filter_features(v, params));
  }
  for (const auto& [c, protos] : set.raw) set.raw_mean[c] = mean_of(protos);
  for (const auto& [c, protos] : set.filtered) set.filtered_mean[c] = mean_of(protos);
  return set;
}

Tensor encode_query(const Tensor& image, const ModelParams& params) {
  if (image.rank() != 3 || image.shape()[0] != 3 || image.shape()[1] != kCanvas ||
      image.shape()[2] != kCanvas)
    throw ShapeError("encode_query: image must be [3,64,64]");
  Tensor x = image;
  for (const auto& layer : params.query_conv) x = conv_block(x, layer);
  return x;  // [64,8,8]
}

GridPrediction predict_class_branch(const Tensor& query_features, const Tensor& prototype,
                                    const ModelParams& params) {
  if (prototype.rank() != 1 || prototype.shape()[0] != query_features.shape()[0])
    throw ShapeError("predict_class_branch: prototype width " +
                     std::to_string(prototype.size()) + " vs feature channels " +
                     std::to_string(query_features.shape()[0]));
  Tensor activated = channel_scale(query_features, prototype);
  return conv2d(activated, params.head_weights, params.head_bias, 0);
}

}  // namespace cme
