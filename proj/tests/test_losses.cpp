#include <doctest.h>

#include <cmath>
#include <map>
#include <vector>

#include "cme/losses.hpp"
#include "cme/rng.hpp"
#include "oracles.hpp"

using namespace cme;

namespace {

Tensor vec(std::vector<real> v, bool rg = false) {
  const int n = static_cast<int>(v.size());
  return Tensor({n}, std::move(v), rg);
}

Tensor mean_tensor(const std::vector<Tensor>& protos) { return mean_of(protos); }

// Independent transcription of the detection loss: explicit loops over raw
// prediction values, stable BCE and softmax formulas written from scratch.
struct DetRef {
  double cls = 0, bbx = 0, obj = 0;
  int positives = 0;
};

double sigmoid_ref(double x) { return 1.0 / (1.0 + std::exp(-x)); }

DetRef detection_oracle(const std::map<int, std::vector<double>>& preds,
                        const std::vector<Box>& boxes) {
  const int cells = 8;
  std::vector<int> class_order;
  for (const auto& [c, v] : preds) class_order.push_back(c);
  const int nb = static_cast<int>(class_order.size());

  std::map<int, std::vector<double>> obj_target;
  for (int c : class_order) obj_target[c] = std::vector<double>(64, 0.0);

  struct Pos {
    int branch, cell;
    double fx, fy, fw, fh;
  };
  std::vector<Pos> positives;
  for (const auto& b : boxes) {
    const double cx = 0.5 * (b.x0 + b.x1), cy = 0.5 * (b.y0 + b.y1);
    const int ix = std::min(7, static_cast<int>(cx / 8)), iy = std::min(7, static_cast<int>(cy / 8));
    auto& t = obj_target[b.class_id][iy * 8 + ix];
    if (t == 1.0) continue;
    t = 1.0;
    int branch = 0;
    for (int k = 0; k < nb; ++k)
      if (class_order[k] == b.class_id) branch = k;
    positives.push_back({branch, iy * 8 + ix, cx / 8 - ix, cy / 8 - iy, (b.x1 - b.x0) / 64.0,
                         (b.y1 - b.y0) / 64.0});
  }

  DetRef ref;
  ref.positives = static_cast<int>(positives.size());
  double obj_sum = 0;
  for (int k = 0; k < nb; ++k) {
    const auto& p = preds.at(class_order[k]);
    for (int cell = 0; cell < 64; ++cell) {
      const double x = p[0 * 64 + cell];
      const double t = obj_target[class_order[k]][cell];
      obj_sum += std::max(x, 0.0) - x * t + std::log1p(std::exp(-std::abs(x)));
    }
  }
  ref.obj = obj_sum / (nb * cells * cells);

  double bbx_sum = 0, cls_sum = 0;
  for (const auto& pos : positives) {
    const auto& p = preds.at(class_order[pos.branch]);
    const double tgt[4] = {pos.fx, pos.fy, pos.fw, pos.fh};
    for (int i = 0; i < 4; ++i) {
      const double d = sigmoid_ref(p[(i + 1) * 64 + pos.cell]) - tgt[i];
      bbx_sum += d * d;
    }
    double m = -1e300, z = 0;
    for (int k = 0; k < nb; ++k) m = std::max(m, preds.at(class_order[k])[5 * 64 + pos.cell]);
    for (int k = 0; k < nb; ++k) z += std::exp(preds.at(class_order[k])[5 * 64 + pos.cell] - m);
    cls_sum += std::log(z) + m - (preds.at(class_order[pos.branch])[5 * 64 + pos.cell] - 0);
  }
  if (!positives.empty()) {
    ref.bbx = bbx_sum / positives.size();
    ref.cls = cls_sum / positives.size();
  }
  return ref;
}

std::map<int, GridPrediction> to_predictions(const std::map<int, std::vector<double>>& preds) {
  std::map<int, GridPrediction> out;
  for (const auto& [c, v] : preds) {
    std::vector<real> rv(v.begin(), v.end());
    out[c] = Tensor({6, 8, 8}, std::move(rv));
  }
  return out;
}

}  // namespace

TEST_CASE("intra_class_distance basics") {
  // single prototype -> 0
  std::vector<Tensor> one{vec({1, 2})};
  CHECK(intra_class_distance(one, mean_tensor(one)).value() == 0.0);

  // {(0,0),(2,0)} with mean (1,0) -> 1 + 1 = 2
  std::vector<Tensor> pair{vec({0, 0}), vec({2, 0})};
  CHECK(intra_class_distance(pair, mean_tensor(pair)).value() == doctest::Approx(2.0));

  // identical prototypes -> 0
  std::vector<Tensor> same{vec({3, -1}), vec({3, -1}), vec({3, -1})};
  CHECK(intra_class_distance(same, mean_tensor(same)).value() == 0.0);

  // inconsistent mean rejected
  CHECK_THROWS_AS(intra_class_distance(pair, vec({5, 5})), ValueError);
  // empty rejected
  CHECK_THROWS_AS(intra_class_distance(std::span<const Tensor>{}, vec({0})), ValueError);
}

TEST_CASE("inter_class_distance examples") {
  std::map<int, Tensor> two{{0, vec({0, 0})}, {1, vec({3, 4})}};
  auto d2 = inter_class_distance(two);
  CHECK(d2.at(0).value() == doctest::Approx(25.0));
  CHECK(d2.at(1).value() == doctest::Approx(25.0));

  std::map<int, Tensor> line{{0, vec({0})}, {1, vec({1})}, {2, vec({10})}};
  auto d3 = inter_class_distance(line);
  CHECK(d3.at(0).value() == doctest::Approx(1.0));
  CHECK(d3.at(1).value() == doctest::Approx(1.0));
  CHECK(d3.at(2).value() == doctest::Approx(81.0));

  std::map<int, Tensor> coincident{{0, vec({2, 2})}, {1, vec({2, 2})}};
  auto dc = inter_class_distance(coincident);
  CHECK(dc.at(0).value() == 0.0);

  std::map<int, Tensor> single{{0, vec({1})}};
  CHECK_THROWS_AS(inter_class_distance(single), ValueError);
}

TEST_CASE("margin_bounds arithmetic") {
  const PairBounds b = margin_bounds(2.0, 0.0, 9.0);
  CHECK(b.lower == doctest::Approx(7.0));
  CHECK(b.upper == doctest::Approx(9.0));

  const PairBounds z = margin_bounds(0.0, 0.0, 4.0);
  CHECK(z.lower == z.upper);

  Rng rng(3);
  for (int i = 0; i < 100; ++i) {
    const double bi = rng.uniform(0, 5), bj = rng.uniform(0, 5), inter = rng.uniform(0, 10);
    const PairBounds r = margin_bounds(bi, bj, inter);
    CHECK(r.lower <= r.upper);
  }
}

TEST_CASE("max_margin_loss hand cases") {
  // all classes single-prototype with distinct means -> zero numerator
  std::map<int, std::vector<Tensor>> protos{{0, {vec({0, 0})}}, {1, {vec({1, 0})}}};
  std::map<int, Tensor> means{{0, mean_tensor(protos[0])}, {1, mean_tensor(protos[1])}};
  auto r = max_margin_loss(protos, means);
  CHECK(!r.degenerate);
  CHECK(r.loss.value() == 0.0);

  // intra {2,0}, inter {9,9} -> 2/18
  std::map<int, std::vector<Tensor>> p2{{0, {vec({0, 0}), vec({2, 0})}}, {1, {vec({4, 0})}}};
  std::map<int, Tensor> m2{{0, mean_tensor(p2[0])}, {1, mean_tensor(p2[1])}};
  auto r2 = max_margin_loss(p2, m2);
  CHECK(r2.loss.value() == doctest::Approx(2.0 / 18.0).epsilon(1e-12));
}

TEST_CASE("max_margin_loss scale invariance") {
  Rng rng(5);
  std::map<int, std::vector<Tensor>> protos;
  for (int c = 0; c < 3; ++c)
    for (int k = 0; k < 2; ++k) {
      std::vector<real> v(4);
      for (auto& x : v) x = static_cast<real>(rng.uniform(-1, 1));
      protos[c].push_back(vec(std::move(v)));
    }
  std::map<int, Tensor> means;
  for (auto& [c, ps] : protos) means[c] = mean_tensor(ps);
  const double base = max_margin_loss(protos, means).loss.value();

  const real c = 3.7;
  std::map<int, std::vector<Tensor>> scaled;
  std::map<int, Tensor> scaled_means;
  for (auto& [cid, ps] : protos)
    for (auto& p : ps) scaled[cid].push_back(scale(p, c));
  for (auto& [cid, ps] : scaled) scaled_means[cid] = mean_tensor(ps);
  const double after = max_margin_loss(scaled, scaled_means).loss.value();
  CHECK(std::abs(base - after) < 1e-10);
}

TEST_CASE("max_margin_loss degenerate geometry is clamped and flagged") {
  std::map<int, std::vector<Tensor>> protos{{0, {vec({1, 1}), vec({3, 1})}},
                                            {1, {vec({1, 1}), vec({3, 1})}}};
  std::map<int, Tensor> means{{0, mean_tensor(protos[0])}, {1, mean_tensor(protos[1])}};
  auto r = max_margin_loss(protos, means);
  CHECK(r.degenerate);
  // sum intra = 2+2 = 4 -> 1e8*4 + 1e4
  CHECK(r.loss.value() == doctest::Approx(4e8 + 1e4));
  CHECK(std::isfinite(r.loss.value()));
}

TEST_CASE("max_margin_loss matches brute-force recomputation on random instances") {
  Rng rng(7);
  for (int trial = 0; trial < 30; ++trial) {
    const int classes = rng.uniform_int(2, 5);
    const int dim = rng.uniform_int(1, 8);
    std::map<int, std::vector<Tensor>> protos;
    std::map<int, std::vector<oracle::Vec>> ref;
    for (int c = 0; c < classes; ++c) {
      const int k = rng.uniform_int(1, 4);
      for (int j = 0; j < k; ++j) {
        std::vector<real> v(static_cast<size_t>(dim));
        for (auto& x : v) x = static_cast<real>(rng.uniform(-2, 2));
        ref[c].push_back(oracle::Vec(v.begin(), v.end()));
        protos[c].push_back(vec(std::move(v)));
      }
    }
    std::map<int, Tensor> means;
    for (auto& [c, ps] : protos) means[c] = mean_tensor(ps);
    const double got = max_margin_loss(protos, means).loss.value();
    const double want = oracle::margin_ratio_loss(ref);
    CHECK(std::abs(got - want) < 1e-10);

    // distances and bounds against the oracle as well
    MarginStats stats = margin_stats(protos, means);
    std::map<int, oracle::Vec> ref_means;
    for (auto& [c, ps] : ref) ref_means[c] = oracle::class_mean(ps);
    auto ref_inter = oracle::inter_class_distance(ref_means);
    for (auto& [c, ps] : ref) {
      CHECK(std::abs(stats.d_intra.at(c) - oracle::intra_class_distance(ps)) < 1e-10);
      CHECK(std::abs(stats.d_inter.at(c) - ref_inter.at(c)) < 1e-10);
    }
    for (auto& [pr, bounds] : stats.pair_bounds) {
      const double pairwise = oracle::sq_dist(ref_means.at(pr.first), ref_means.at(pr.second));
      CHECK(std::abs(bounds.upper - pairwise) < 1e-10);
      CHECK(std::abs(bounds.lower - (pairwise - stats.d_intra.at(pr.first) -
                                     stats.d_intra.at(pr.second))) < 1e-10);
      CHECK(bounds.lower <= bounds.upper);
    }
  }
}

TEST_CASE("one margin gradient step decreases the loss on a 2-class toy") {
  std::map<int, std::vector<Tensor>> protos{
      {0, {vec({0.2, 0.1}, true), vec({-0.1, 0.4}, true)}},
      {1, {vec({0.5, -0.3}, true), vec({0.8, 0.1}, true)}}};
  std::map<int, Tensor> means;
  for (auto& [c, ps] : protos) means[c] = mean_tensor(ps);
  auto r = max_margin_loss(protos, means);
  const double before = r.loss.value();
  backward(r.loss);

  bool decreased = false;
  for (double eta = 1e-2; eta > 1e-9 && !decreased; eta /= 10) {
    std::map<int, std::vector<Tensor>> moved;
    for (auto& [c, ps] : protos)
      for (auto& p : ps) {
        std::vector<real> v(p.values().begin(), p.values().end());
        for (size_t i = 0; i < v.size(); ++i)
          v[i] -= static_cast<real>(eta) * p.grad()[i];
        moved[c].push_back(Tensor({2}, std::move(v)));
      }
    std::map<int, Tensor> moved_means;
    for (auto& [c, ps] : moved) moved_means[c] = mean_tensor(ps);
    decreased = max_margin_loss(moved, moved_means).loss.value() < before;
  }
  CHECK(decreased);
}

TEST_CASE("margin loss is differentiable through the prototypes") {
  auto loss_fn = [](const Tensor& flat) {
    // interpret a [8] tensor as 2 classes x 2 prototypes x dim 2
    std::map<int, std::vector<Tensor>> protos;
    for (int c = 0; c < 2; ++c)
      for (int k = 0; k < 2; ++k) {
        std::vector<Tensor> parts{element(flat, c * 4 + k * 2), element(flat, c * 4 + k * 2 + 1)};
        protos[c].push_back(stack_scalars(parts));
      }
    std::map<int, Tensor> means;
    for (auto& [c, ps] : protos) means[c] = mean_of(ps);
    return max_margin_loss(protos, means).loss;
  };
  Tensor point({8}, {0.2, 0.1, -0.1, 0.4, 0.5, -0.3, 0.8, 0.1});
  CHECK(finite_difference_check(loss_fn, point, 1e-6) < 1e-5);
}

TEST_CASE("detection_loss with zero boxes") {
  Rng rng(11);
  std::map<int, std::vector<double>> preds;
  for (int c : {0, 1, 2}) {
    std::vector<double> v(6 * 64);
    for (auto& x : v) x = rng.uniform(-2, 2);
    preds[c] = v;
  }
  QueryItem q;
  q.image = Tensor::zeros({3, 64, 64});
  auto parts = detection_loss(to_predictions(preds), q);
  CHECK(parts.positive_cells == 0);
  CHECK(parts.bbx.value() == 0.0);
  CHECK(parts.cls.value() == 0.0);
  const DetRef ref = detection_oracle(preds, {});
  CHECK(parts.obj.value() == doctest::Approx(ref.obj).epsilon(1e-12));
}

TEST_CASE("detection_loss on perfect predictions is tiny") {
  const Box target{8, 8, 24, 24, 2};
  // cell (2,2); fx = fy = 0; tw = th = 16/64 = 0.25
  auto logit = [](double p) { return std::log(p / (1 - p)); };
  std::map<int, std::vector<double>> preds;
  for (int c : {0, 1, 2}) {
    std::vector<double> v(6 * 64, 0.0);
    for (int cell = 0; cell < 64; ++cell) v[cell] = -20;  // obj
    preds[c] = v;
  }
  const int cell = 2 * 8 + 2;
  preds[2][0 * 64 + cell] = 20;
  preds[2][1 * 64 + cell] = -20;             // sigmoid ~ 0 = fx
  preds[2][2 * 64 + cell] = -20;             // fy
  preds[2][3 * 64 + cell] = logit(0.25);     // tw
  preds[2][4 * 64 + cell] = logit(0.25);     // th
  preds[0][5 * 64 + cell] = -20;
  preds[1][5 * 64 + cell] = -20;
  preds[2][5 * 64 + cell] = 20;

  QueryItem q;
  q.image = Tensor::zeros({3, 64, 64});
  q.boxes = {target};
  auto parts = detection_loss(to_predictions(preds), q);
  CHECK(parts.positive_cells == 1);
  CHECK(parts.bbx.value() < 1e-6);
  CHECK(parts.cls.value() < 1e-6);
  CHECK(parts.obj.value() < 1e-6);
}

TEST_CASE("detection_loss equals the transcription oracle on random cases") {
  Rng rng(13);
  for (int trial = 0; trial < 20; ++trial) {
    std::map<int, std::vector<double>> preds;
    std::vector<int> class_ids{1, 4, 6};
    for (int c : class_ids) {
      std::vector<double> v(6 * 64);
      for (auto& x : v) x = rng.uniform(-3, 3);
      preds[c] = v;
    }
    std::vector<Box> boxes;
    const int nb = rng.uniform_int(1, 3);
    for (int i = 0; i < nb; ++i) {
      const double x0 = rng.uniform_int(0, 40);
      const double y0 = rng.uniform_int(0, 40);
      boxes.push_back(Box{x0, y0, x0 + rng.uniform_int(8, 20), y0 + rng.uniform_int(8, 20),
                          class_ids[static_cast<size_t>(rng.uniform_int(0, 2))]});
    }
    QueryItem q;
    q.image = Tensor::zeros({3, 64, 64});
    q.boxes = boxes;
    auto parts = detection_loss(to_predictions(preds), q);
    const DetRef ref = detection_oracle(preds, boxes);
    CHECK(parts.positive_cells == ref.positives);
    CHECK(parts.obj.value() == doctest::Approx(ref.obj).epsilon(1e-10));
    CHECK(parts.bbx.value() == doctest::Approx(ref.bbx).epsilon(1e-10));
    CHECK(parts.cls.value() == doctest::Approx(ref.cls).epsilon(1e-10));
  }
}

TEST_CASE("detection_loss rejects a box with no branch") {
  std::map<int, std::vector<double>> preds{{0, std::vector<double>(6 * 64, 0.0)},
                                           {1, std::vector<double>(6 * 64, 0.0)}};
  QueryItem q;
  q.image = Tensor::zeros({3, 64, 64});
  q.boxes = {Box{0, 0, 10, 10, 5}};
  CHECK_THROWS_AS(detection_loss(to_predictions(preds), q), ValueError);
}

TEST_CASE("detection_loss is differentiable through predictions") {
  Rng rng(17);
  std::vector<Box> boxes{Box{10, 10, 26, 30, 0}, Box{40, 36, 56, 52, 1}};
  auto fn = [&](const Tensor& p0) {
    std::map<int, GridPrediction> preds;
    preds[0] = p0;
    preds[1] = Tensor::full({6, 8, 8}, 0.25);
    QueryItem q;
    q.boxes = boxes;
    auto parts = detection_loss(preds, q);
    return add(add(parts.cls, parts.bbx), parts.obj);
  };
  std::vector<real> v(6 * 64);
  for (auto& x : v) x = static_cast<real>(rng.uniform(-1, 1));
  CHECK(finite_difference_check(fn, Tensor({6, 8, 8}, v), 1e-6) < 1e-5);
}

TEST_CASE("combined_loss breakdown invariants") {
  auto b = combined_loss(0.2, 0.1, 0.2, 0.1, 1.0);
  CHECK(b.l_det == doctest::Approx(0.5));
  CHECK(b.total == doctest::Approx(0.6).epsilon(1e-12));

  auto z = combined_loss(0.3, 0.1, 0.1, 5.0, 0.0);
  CHECK(z.total == z.l_det);

  Rng rng(19);
  for (int i = 0; i < 50; ++i) {
    const double cls = rng.uniform(0, 2), bbx = rng.uniform(0, 2), obj = rng.uniform(0, 2);
    const double mrg = rng.uniform(0, 2), lambda = rng.uniform(0, 3);
    auto r = combined_loss(cls, bbx, obj, mrg, lambda);
    CHECK(r.l_det == doctest::Approx(cls + bbx + obj).epsilon(1e-12));
    CHECK(r.total == doctest::Approx(r.l_det + lambda * mrg).epsilon(1e-12));
  }
  CHECK_THROWS_AS(combined_loss(0, 0, 0, 0, -1.0), ValueError);
}
