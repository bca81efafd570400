#pragma once

// Randomized gradient-check cases, one generator per differentiable op.

#include <random>
#include <string>
#include <vector>

#include "gradcheck.hpp"
#include "stor2/tensor.hpp"

namespace stor2::testing {

struct GradCase {
  std::vector<Leaf> leaves;
  ScalarFn fn;
};

struct OpSpec {
  std::string name;
  std::function<GradCase(std::mt19937_64&)> make;
};

inline std::size_t dim(std::mt19937_64& rng, std::size_t lo = 1, std::size_t hi = 5) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

inline Leaf leaf(Shape s, std::mt19937_64& rng) {
  auto n = numel(s);
  return {std::move(s), random_values(n, rng)};
}

/// Values kept away from the relu kink so the central difference is smooth.
inline Leaf leaf_off_zero(Shape s, std::mt19937_64& rng) {
  auto l = leaf(std::move(s), rng);
  for (auto& v : l.values) v = v < 0 ? v - 0.05 : v + 0.05;
  return l;
}

inline std::vector<OpSpec> op_catalog() {
  using V = Var<double>;
  using Vs = std::vector<V>;
  std::vector<OpSpec> ops;

  ops.push_back({"matmul", [](std::mt19937_64& rng) {
                   auto m = dim(rng), k = dim(rng), n = dim(rng);
                   auto w = random_values(m * n, rng);
                   return GradCase{{leaf({m, k}, rng), leaf({k, n}, rng)},
                                   [w](Tape<double>& t, const Vs& x) { return project(t, matmul(x[0], x[1]), w); }};
                 }});
  ops.push_back({"add", [](std::mt19937_64& rng) {
                   auto m = dim(rng), n = dim(rng);
                   auto w = random_values(m * n, rng);
                   return GradCase{{leaf({m, n}, rng), leaf({m, n}, rng)},
                                   [w](Tape<double>& t, const Vs& x) { return project(t, add(x[0], x[1]), w); }};
                 }});
  ops.push_back({"add_broadcast", [](std::mt19937_64& rng) {
                   auto m = dim(rng), n = dim(rng);
                   auto w = random_values(m * n, rng);
                   return GradCase{{leaf({m, n}, rng), leaf({n}, rng)},
                                   [w](Tape<double>& t, const Vs& x) { return project(t, add(x[0], x[1]), w); }};
                 }});
  ops.push_back({"sub", [](std::mt19937_64& rng) {
                   auto m = dim(rng), n = dim(rng);
                   auto w = random_values(m * n, rng);
                   return GradCase{{leaf({m, n}, rng), leaf({m, n}, rng)},
                                   [w](Tape<double>& t, const Vs& x) { return project(t, sub(x[0], x[1]), w); }};
                 }});
  ops.push_back({"mul", [](std::mt19937_64& rng) {
                   auto m = dim(rng), n = dim(rng);
                   auto w = random_values(m * n, rng);
                   return GradCase{{leaf({m, n}, rng), leaf({m, n}, rng)},
                                   [w](Tape<double>& t, const Vs& x) { return project(t, mul(x[0], x[1]), w); }};
                 }});
  ops.push_back({"scale", [](std::mt19937_64& rng) {
                   auto n = dim(rng);
                   auto w = random_values(n, rng);
                   const double s = random_values(1, rng)[0] * 3;
                   return GradCase{{leaf({n}, rng)},
                                   [w, s](Tape<double>& t, const Vs& x) { return project(t, scale(x[0], s), w); }};
                 }});
  ops.push_back({"relu", [](std::mt19937_64& rng) {
                   auto m = dim(rng), n = dim(rng);
                   auto w = random_values(m * n, rng);
                   return GradCase{{leaf_off_zero({m, n}, rng)},
                                   [w](Tape<double>& t, const Vs& x) { return project(t, relu(x[0]), w); }};
                 }});
  ops.push_back({"sigmoid", [](std::mt19937_64& rng) {
                   auto m = dim(rng), n = dim(rng);
                   auto w = random_values(m * n, rng);
                   auto l = leaf({m, n}, rng);
                   for (auto& v : l.values) v *= 4;
                   return GradCase{{l}, [w](Tape<double>& t, const Vs& x) { return project(t, sigmoid(x[0]), w); }};
                 }});
  ops.push_back({"tanh", [](std::mt19937_64& rng) {
                   auto m = dim(rng), n = dim(rng);
                   auto w = random_values(m * n, rng);
                   auto l = leaf({m, n}, rng);
                   for (auto& v : l.values) v *= 3;
                   return GradCase{{l}, [w](Tape<double>& t, const Vs& x) { return project(t, tanh(x[0]), w); }};
                 }});
  ops.push_back({"reshape", [](std::mt19937_64& rng) {
                   auto m = dim(rng), n = dim(rng);
                   auto w = random_values(m * n, rng);
                   return GradCase{{leaf({m, n}, rng)}, [w, m, n](Tape<double>& t, const Vs& x) {
                                     return project(t, reshape(x[0], {n * m}), w);
                                   }};
                 }});
  ops.push_back({"concat", [](std::mt19937_64& rng) {
                   const std::size_t axis = dim(rng, 0, 1);
                   auto m = dim(rng), n1 = dim(rng), n2 = dim(rng);
                   Shape a = axis ? Shape{m, n1} : Shape{n1, m};
                   Shape b = axis ? Shape{m, n2} : Shape{n2, m};
                   auto w = random_values(m * (n1 + n2), rng);
                   return GradCase{{leaf(a, rng), leaf(b, rng)}, [w, axis](Tape<double>& t, const Vs& x) {
                                     return project(t, concat(x, axis), w);
                                   }};
                 }});
  ops.push_back({"sum_axis", [](std::mt19937_64& rng) {
                   auto a = dim(rng), b = dim(rng), c = dim(rng);
                   const std::size_t axis = dim(rng, 0, 2);
                   Shape s{a, b, c};
                   auto w = random_values(numel(s) / s[axis], rng);
                   return GradCase{{leaf(s, rng)}, [w, axis](Tape<double>& t, const Vs& x) {
                                     return project(t, sum_axis(x[0], axis), w);
                                   }};
                 }});
  ops.push_back({"sum", [](std::mt19937_64& rng) {
                   return GradCase{{leaf({dim(rng), dim(rng)}, rng)},
                                   [](Tape<double>&, const Vs& x) { return sum(x[0]); }};
                 }});
  ops.push_back({"embedding_lookup", [](std::mt19937_64& rng) {
                   auto rows = dim(rng), d = dim(rng);
                   auto idx = dim(rng, 0, rows - 1);
                   auto w = random_values(d, rng);
                   return GradCase{{leaf({rows, d}, rng)}, [w, idx](Tape<double>& t, const Vs& x) {
                                     return project(t, embedding_lookup(x[0], idx), w);
                                   }};
                 }});
  ops.push_back({"gather_rows", [](std::mt19937_64& rng) {
                   auto rows = dim(rng), d = dim(rng), picks = dim(rng, 1, 8);
                   std::vector<std::size_t> idx(picks);
                   for (auto& i : idx) i = dim(rng, 0, rows - 1);
                   auto w = random_values(picks * d, rng);
                   return GradCase{{leaf({rows, d}, rng)}, [w, idx](Tape<double>& t, const Vs& x) {
                                     return project(t, gather_rows(x[0], idx), w);
                                   }};
                 }});
  ops.push_back({"segment_sum", [](std::mt19937_64& rng) {
                   auto rows = dim(rng, 1, 8), d = dim(rng), segs = dim(rng);
                   std::vector<std::ptrdiff_t> ids(rows);
                   for (auto& i : ids) i = static_cast<std::ptrdiff_t>(dim(rng, 0, segs)) - 1;  // -1 skips
                   auto w = random_values(segs * d, rng);
                   return GradCase{{leaf({rows, d}, rng)}, [w, ids, segs](Tape<double>& t, const Vs& x) {
                                     return project(t, segment_sum(x[0], ids, segs), w);
                                   }};
                 }});
  ops.push_back({"slice_rows", [](std::mt19937_64& rng) {
                   auto rows = dim(rng, 1, 6), d = dim(rng);
                   auto first = dim(rng, 0, rows - 1);
                   auto count = dim(rng, 1, rows - first);
                   auto w = random_values(count * d, rng);
                   return GradCase{{leaf({rows, d}, rng)}, [w, first, count](Tape<double>& t, const Vs& x) {
                                     return project(t, slice_rows(x[0], first, count), w);
                                   }};
                 }});
  ops.push_back({"softmax_cross_entropy", [](std::mt19937_64& rng) {
                   auto b = dim(rng), k = dim(rng, 2, 9);
                   std::vector<std::size_t> targets(b);
                   for (auto& y : targets) y = dim(rng, 0, k - 1);
                   auto l = leaf({b, k}, rng);
                   for (auto& v : l.values) v *= 3;
                   return GradCase{{l}, [targets](Tape<double>&, const Vs& x) {
                                     return softmax_cross_entropy(x[0], std::span<const std::size_t>(targets));
                                   }};
                 }});
  return ops;
}

}  // namespace stor2::testing
