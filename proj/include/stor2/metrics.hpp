#pragma once

// Top-1 accuracy, average precision / mAP and confusion matrices.
//
// Conventions: argmax ties resolve to the lowest class id; AP ranks items by
// score descending with ties kept in original item order; classes without a
// positive item have no AP and are left out of the mean.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "stor2/errors.hpp"

namespace stor2 {

struct PredictionSet {
  std::size_t K = 0;
  std::vector<std::vector<double>> scores;  // one length-K row per item
  std::vector<std::size_t> truth;

  std::size_t size() const { return truth.size(); }

  void add(std::vector<double> row, std::size_t label) {
    if (K == 0) K = row.size();
    if (row.size() != K) throw DimensionError("PredictionSet: score row of length " + std::to_string(row.size()));
    if (label >= K) throw RangeError("PredictionSet: label " + std::to_string(label) + " >= " + std::to_string(K));
    scores.push_back(std::move(row));
    truth.push_back(label);
  }

  void append(const PredictionSet& other) {
    for (std::size_t i = 0; i < other.size(); ++i) add(other.scores[i], other.truth[i]);
  }
};

inline std::size_t argmax(const std::vector<double>& row) {
  return static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
}

inline double top1_accuracy(const PredictionSet& preds) {
  if (preds.size() == 0) throw ArgumentError("top1_accuracy: empty prediction set");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) hits += argmax(preds.scores[i]) == preds.truth[i];
  return static_cast<double>(hits) / static_cast<double>(preds.size());
}

/// Mean precision at the rank of each relevant item; nullopt when nothing
/// is relevant.
inline std::optional<double> average_precision(const std::vector<double>& scores, const std::vector<bool>& relevant) {
  if (scores.size() != relevant.size())
    throw DimensionError("average_precision: " + std::to_string(scores.size()) + " scores, " +
                         std::to_string(relevant.size()) + " relevance bits");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  std::size_t hits = 0;
  double sum = 0;
  for (std::size_t rank = 0; rank < order.size(); ++rank) {
    if (!relevant[order[rank]]) continue;
    ++hits;
    sum += static_cast<double>(hits) / static_cast<double>(rank + 1);
  }
  if (hits == 0) return std::nullopt;
  return sum / static_cast<double>(hits);
}

struct MapResult {
  double map = 0;
  std::vector<std::optional<double>> per_class;
  std::size_t excluded = 0;
};

/// One-vs-rest AP per class column, averaged over classes with positives.
inline MapResult mean_ap(const PredictionSet& preds) {
  if (preds.size() == 0) throw ArgumentError("mean_ap: empty prediction set");
  MapResult out;
  std::size_t counted = 0;
  for (std::size_t k = 0; k < preds.K; ++k) {
    std::vector<double> column(preds.size());
    std::vector<bool> relevant(preds.size());
    for (std::size_t i = 0; i < preds.size(); ++i) {
      column[i] = preds.scores[i][k];
      relevant[i] = preds.truth[i] == k;
    }
    auto ap = average_precision(column, relevant);
    out.per_class.push_back(ap);
    if (ap) {
      out.map += *ap;
      ++counted;
    } else {
      ++out.excluded;
    }
  }
  if (counted == 0) throw ArgumentError("mean_ap: no class has a positive item");
  out.map /= static_cast<double>(counted);
  return out;
}

using ConfusionMatrix = std::vector<std::vector<std::size_t>>;

/// Rows are ground truth, columns argmax predictions.
inline ConfusionMatrix confusion_matrix(const PredictionSet& preds) {
  ConfusionMatrix m(preds.K, std::vector<std::size_t>(preds.K, 0));
  for (std::size_t i = 0; i < preds.size(); ++i) ++m[preds.truth[i]][argmax(preds.scores[i])];
  return m;
}

/// Each row divided by its support; empty rows stay zero.
inline std::vector<std::vector<double>> normalize_rows(const ConfusionMatrix& m) {
  std::vector<std::vector<double>> out;
  for (const auto& row : m) {
    const double total = static_cast<double>(std::accumulate(row.begin(), row.end(), std::size_t{0}));
    std::vector<double> r(row.size(), 0.0);
    if (total > 0)
      for (std::size_t j = 0; j < row.size(); ++j) r[j] = static_cast<double>(row[j]) / total;
    out.push_back(std::move(r));
  }
  return out;
}

struct Metrics {
  double top1 = 0;
  MapResult map;
  ConfusionMatrix confusion;
  std::size_t items = 0;
};

inline Metrics evaluate(const PredictionSet& preds) {
  return {top1_accuracy(preds), mean_ap(preds), confusion_matrix(preds), preds.size()};
}

inline nlohmann::json to_json(const Metrics& m) {
  nlohmann::json per_class = nlohmann::json::array();
  for (const auto& ap : m.map.per_class) per_class.push_back(ap ? nlohmann::json(*ap) : nlohmann::json(nullptr));
  return {{"top1", m.top1},          {"map", m.map.map},          {"per_class_ap", per_class},
          {"confusion", m.confusion}, {"excluded_classes", m.map.excluded}, {"items", m.items}};
}

inline std::string confusion_csv(const std::vector<std::vector<double>>& m, const std::vector<std::string>& names) {
  std::string out = "truth";
  for (const auto& n : names) out += "," + n;
  out += '\n';
  char buf[32];
  for (std::size_t i = 0; i < m.size(); ++i) {
    out += i < names.size() ? names[i] : std::to_string(i);
    for (double v : m[i]) {
      std::snprintf(buf, sizeof buf, ",%.17g", v);
      out += buf;
    }
    out += '\n';
  }
  return out;
}

}  // namespace stor2
