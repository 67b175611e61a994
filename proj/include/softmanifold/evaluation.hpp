#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <iostream>
#include <limits>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "softmanifold/common.hpp"
#include "softmanifold/conductivity.hpp"
#include "softmanifold/embedding.hpp"
#include "softmanifold/feature_matrix.hpp"
#include "softmanifold/fluid_graph.hpp"
#include "softmanifold/manifold.hpp"
#include "softmanifold/neighborhoods.hpp"
#include "softmanifold/rng.hpp"

namespace softmanifold {

struct EvalReport {
  double map_score = 0.0;
  double ad_score = 0.0;
  std::vector<double> per_node_ap;
};

// Neighborhood recovery precision: for each node, how sharply its graph
// neighbors rank among the closest points under the ball distance. The
// candidate set at each neighbor includes every node tied at the same
// distance, which makes exact ties count against the score.
inline EvalReport neighborhood_precision(const std::vector<Vec>& positions,
                                         const FluidGraph& fg) {
  const int n = fg.n_nodes;
  if (static_cast<int>(positions.size()) != n) {
    throw std::invalid_argument("embedding does not cover all nodes");
  }
  EvalReport rep;
  rep.per_node_ap.resize(static_cast<std::size_t>(n), 0.0);
  double total = 0.0;
  for (int i = 0; i < n; ++i) {
    const auto& nbrs = fg.nbhd.adjacency[static_cast<std::size_t>(i)];
    std::vector<double> dist;
    dist.reserve(static_cast<std::size_t>(n) - 1);
    std::vector<double> nbr_dist;
    nbr_dist.reserve(nbrs.size());
    for (int z = 0; z < n; ++z) {
      if (z == i) continue;
      dist.push_back(semimetric_distance(positions[static_cast<std::size_t>(i)],
                                         positions[static_cast<std::size_t>(z)]));
    }
    std::sort(dist.begin(), dist.end());
    for (int j : nbrs) {
      nbr_dist.push_back(semimetric_distance(positions[static_cast<std::size_t>(i)],
                                             positions[static_cast<std::size_t>(j)]));
    }
    std::vector<double> nbr_sorted = nbr_dist;
    std::sort(nbr_sorted.begin(), nbr_sorted.end());
    double ap = 0.0;
    for (double dij : nbr_dist) {
      const auto rank = std::upper_bound(dist.begin(), dist.end(), dij) - dist.begin();
      const auto hits =
          std::upper_bound(nbr_sorted.begin(), nbr_sorted.end(), dij) - nbr_sorted.begin();
      ap += static_cast<double>(hits) / static_cast<double>(rank);
    }
    ap /= static_cast<double>(nbrs.size());
    rep.per_node_ap[static_cast<std::size_t>(i)] = ap;
    total += ap;
  }
  rep.map_score = total / static_cast<double>(n);
  return rep;
}

inline double mean_average_precision(const std::vector<Vec>& positions,
                                     const FluidGraph& fg) {
  return neighborhood_precision(positions, fg).map_score;
}

inline double mean_average_precision(const EmbeddingState& st, const FluidGraph& fg) {
  return neighborhood_precision(st.positions, fg).map_score;
}

// Mean absolute relative mismatch between embedded and graph distances
// over unordered pairs; uncovered or zero-distance pairs are dropped and
// the count renormalized.
inline double average_distortion(const std::vector<Vec>& positions,
                                 const FluidGraph& fg) {
  const int n = fg.n_nodes;
  if (static_cast<int>(positions.size()) != n) {
    throw std::invalid_argument("embedding does not cover all nodes");
  }
  double s = 0.0;
  std::size_t counted = 0;
  std::size_t skipped = 0;
  for (int i = 0; i < n; ++i) {
    for (int j = i + 1; j < n; ++j) {
      const double dg2 = fg.d2_at(i, j);
      if (!std::isfinite(dg2) || dg2 <= 0.0) {
        ++skipped;
        continue;
      }
      const double ds = semimetric_distance(positions[static_cast<std::size_t>(i)],
                                            positions[static_cast<std::size_t>(j)]);
      s += std::abs(1.0 - ds / std::sqrt(dg2));
      ++counted;
    }
  }
  if (skipped > 0) {
    std::cerr << "warning: " << skipped
              << " pairs without a usable graph distance excluded from AD\n";
  }
  if (counted == 0) return 0.0;
  return s / static_cast<double>(counted);
}

inline double average_distortion(const EmbeddingState& st, const FluidGraph& fg) {
  return average_distortion(st.positions, fg);
}

inline EvalReport evaluate_embedding(const std::vector<Vec>& positions,
                                     const FluidGraph& fg) {
  EvalReport rep = neighborhood_precision(positions, fg);
  rep.ad_score = average_distortion(positions, fg);
  return rep;
}

struct PredictionResult {
  std::vector<int> labels;   // one per node; trainers keep their own
  double accuracy = 0.0;     // over held-out nodes with known truth
  int n_evaluated = 0;
};

// Majority vote among the k nearest labeled nodes under the ball
// distance. Vote ties break by smaller summed distance, then smaller
// label id.
inline PredictionResult predict_labels(const std::vector<Vec>& positions,
                                       const std::vector<int>& train_labels,
                                       const std::vector<int>& truth_labels,
                                       int k_vote) {
  if (k_vote < 1) throw std::invalid_argument("k_vote must be >= 1");
  const std::size_t n = positions.size();
  if (train_labels.size() != n || truth_labels.size() != n) {
    throw std::invalid_argument("label vectors must cover all nodes");
  }
  std::vector<int> trainers;
  for (std::size_t i = 0; i < n; ++i) {
    if (train_labels[i] >= 0) trainers.push_back(static_cast<int>(i));
  }
  if (trainers.empty()) throw std::invalid_argument("no labeled nodes");

  PredictionResult res;
  res.labels = train_labels;
  int correct = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (train_labels[i] >= 0) continue;
    std::vector<std::pair<double, int>> order;
    order.reserve(trainers.size());
    for (int t : trainers) {
      order.emplace_back(
          semimetric_distance(positions[i], positions[static_cast<std::size_t>(t)]), t);
    }
    std::sort(order.begin(), order.end());
    const std::size_t take = std::min<std::size_t>(order.size(),
                                                   static_cast<std::size_t>(k_vote));
    std::map<int, std::pair<int, double>> votes;  // label -> (count, dist sum)
    for (std::size_t t = 0; t < take; ++t) {
      auto& v = votes[train_labels[static_cast<std::size_t>(order[t].second)]];
      v.first += 1;
      v.second += order[t].first;
    }
    int best = -1;
    for (const auto& [label, v] : votes) {
      if (best < 0) {
        best = label;
        continue;
      }
      const auto& bv = votes.at(best);
      if (v.first > bv.first ||
          (v.first == bv.first && v.second < bv.second)) {
        best = label;
      }
      // equal count and sum: the map order already favors the smaller id
    }
    res.labels[i] = best;
    if (truth_labels[i] >= 0) {
      ++res.n_evaluated;
      if (best == truth_labels[i]) ++correct;
    }
  }
  res.accuracy = res.n_evaluated > 0
                     ? static_cast<double>(correct) / res.n_evaluated
                     : std::numeric_limits<double>::quiet_NaN();
  return res;
}

struct ExperimentGrid {
  std::vector<double> missing_fractions;
  std::vector<double> node_holdout_fractions;
  int trials = 1;
  std::uint64_t base_seed = 0;

  void validate() const {
    if (trials < 1) throw std::invalid_argument("trials must be >= 1");
    if (missing_fractions.empty() || node_holdout_fractions.empty()) {
      throw std::invalid_argument("grid fraction lists must be non-empty");
    }
    if (!std::is_sorted(missing_fractions.begin(), missing_fractions.end()) ||
        !std::is_sorted(node_holdout_fractions.begin(), node_holdout_fractions.end())) {
      throw std::invalid_argument("grid fractions must be sorted ascending");
    }
    for (double f : missing_fractions) {
      if (f < 0.0 || f >= 1.0) throw std::invalid_argument("missing fraction out of range");
    }
    for (double f : node_holdout_fractions) {
      if (f < 0.0 || f >= 1.0) throw std::invalid_argument("holdout fraction out of range");
    }
  }
};

// Graph and evaluation knobs shared by every cell of an experiment.
struct PipelineConfig {
  int k = 5;
  double base_conductivity = 1.0;
  double b0 = 1.0;
  DistanceTransform transform = DistanceTransform::identity;
  VelocitySign velocity_sign = VelocitySign::magnitude;
  EmbedConfig embed;
  int k_vote = 5;
};

struct ExperimentRow {
  double missing_fraction = 0.0;
  double holdout_fraction = 0.0;
  int trial = 0;
  double map = std::numeric_limits<double>::quiet_NaN();
  double ad = std::numeric_limits<double>::quiet_NaN();
  double accuracy = std::numeric_limits<double>::quiet_NaN();
  double final_loss = std::numeric_limits<double>::quiet_NaN();
  int epochs = 0;
  std::string status = "ok";
  std::uint64_t seed = 0;
};

struct AggregateRow {
  double missing_fraction = 0.0;
  double holdout_fraction = 0.0;
  int trials = 0;
  double map_mean = 0.0, map_var = 0.0;
  double ad_mean = 0.0, ad_var = 0.0;
  double accuracy_mean = 0.0, accuracy_var = 0.0;
};

namespace detail {

inline std::pair<double, double> mean_var(const std::vector<double>& xs) {
  if (xs.empty()) return {std::numeric_limits<double>::quiet_NaN(),
                          std::numeric_limits<double>::quiet_NaN()};
  double m = 0.0;
  for (double x : xs) m += x;
  m /= static_cast<double>(xs.size());
  if (xs.size() == 1) return {m, 0.0};
  double v = 0.0;
  for (double x : xs) v += (x - m) * (x - m);
  v /= static_cast<double>(xs.size() - 1);
  return {m, v};
}

// Holdout set that leaves at least one trainer per class; retries with a
// fresh substream when a draw strands a class.
inline std::vector<int> draw_holdout(const FeatureMatrix& fm, double fraction,
                                     std::uint64_t seed) {
  const std::size_t n = fm.n_rows;
  const std::size_t n_hold =
      static_cast<std::size_t>(std::floor(fraction * static_cast<double>(n)));
  if (n_hold == 0) return {};
  std::vector<int> labeled;
  for (std::size_t i = 0; i < n; ++i) {
    if (fm.labels[i] >= 0) labeled.push_back(static_cast<int>(i));
  }
  for (std::uint64_t attempt = 0; attempt < 100; ++attempt) {
    std::vector<int> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = static_cast<int>(i);
    Rng rng(hash_values(seed, 0x401dULL, attempt));
    rng.shuffle(order);
    std::vector<int> holdout(order.begin(), order.begin() + static_cast<long>(n_hold));
    std::vector<std::uint8_t> held(n, 0);
    for (int h : holdout) held[static_cast<std::size_t>(h)] = 1;
    std::map<int, int> trainers_per_class;
    for (int i : labeled) {
      if (!held[static_cast<std::size_t>(i)]) {
        trainers_per_class[fm.labels[static_cast<std::size_t>(i)]] += 1;
      }
    }
    std::map<int, int> class_counts;
    for (int i : labeled) class_counts[fm.labels[static_cast<std::size_t>(i)]] += 1;
    bool ok = true;
    for (const auto& [cls, cnt] : class_counts) {
      (void)cnt;
      if (trainers_per_class[cls] == 0) {
        ok = false;
        break;
      }
    }
    if (ok) {
      std::sort(holdout.begin(), holdout.end());
      return holdout;
    }
  }
  throw std::runtime_error("could not draw a holdout keeping every class trained");
}

}  // namespace detail

// One masked, rebuilt, embedded and scored pipeline run per grid cell and
// trial. Cell failures land in the status column; the sweep continues.
inline std::vector<ExperimentRow> run_experiment(const FeatureMatrix& fm,
                                                 const ExperimentGrid& grid,
                                                 const PipelineConfig& pipe,
                                                 int threads = 1) {
  grid.validate();
  pipe.embed.validate();
  struct Cell {
    std::size_t fi, hi;
    int trial;
  };
  std::vector<Cell> cells;
  for (std::size_t fi = 0; fi < grid.missing_fractions.size(); ++fi) {
    for (std::size_t hi = 0; hi < grid.node_holdout_fractions.size(); ++hi) {
      for (int t = 0; t < grid.trials; ++t) cells.push_back({fi, hi, t});
    }
  }
  std::vector<ExperimentRow> rows(cells.size());

  parallel_for(cells.size(), threads, [&](std::size_t ci) {
    const Cell& cell = cells[ci];
    const double fraction = grid.missing_fractions[cell.fi];
    const double holdout_fraction = grid.node_holdout_fractions[cell.hi];
    const std::uint64_t cell_seed =
        hash_values(grid.base_seed, static_cast<std::uint64_t>(cell.fi),
                    static_cast<std::uint64_t>(cell.hi),
                    static_cast<std::uint64_t>(cell.trial));
    ExperimentRow row;
    row.missing_fraction = fraction;
    row.holdout_fraction = holdout_fraction;
    row.trial = cell.trial;
    row.seed = cell_seed;
    row.epochs = pipe.embed.epochs;
    try {
      const FeatureMatrix masked =
          fraction > 0.0 ? apply_missing_mask(fm, fraction, hash_values(cell_seed, 1))
                         : fm;
      const Neighborhoods nbhd = knn_neighborhoods(masked, pipe.k);
      const ConductivityTensor K =
          build_conductivity(masked, nbhd, pipe.base_conductivity);
      const FluidGraph fg = graph_distance_matrix(
          masked, K, nbhd, pipe.transform, pipe.b0, pipe.velocity_sign);
      EmbedConfig ecfg = pipe.embed;
      ecfg.seed = hash_values(cell_seed, 2);
      const EmbeddingState st = embed(masked, fg, ecfg);
      const EvalReport rep = evaluate_embedding(st.positions, fg);
      row.map = rep.map_score;
      row.ad = rep.ad_score;
      row.final_loss = st.loss_trace.empty() ? total_loss(st, fg).total
                                             : st.loss_trace.back().total;
      if (holdout_fraction > 0.0 && fm.has_labels()) {
        const auto holdout =
            detail::draw_holdout(fm, holdout_fraction, hash_values(cell_seed, 3));
        std::vector<int> train = fm.labels;
        for (int h : holdout) train[static_cast<std::size_t>(h)] = -1;
        const auto pred = predict_labels(st.positions, train, fm.labels, pipe.k_vote);
        row.accuracy = pred.accuracy;
      }
    } catch (const std::exception& e) {
      row.status = "error";
      std::cerr << "cell (" << fraction << ", " << holdout_fraction << ", trial "
                << cell.trial << ") failed: " << e.what() << "\n";
    }
    rows[ci] = row;
  });
  return rows;
}

inline std::vector<AggregateRow> aggregate_rows(const ExperimentGrid& grid,
                                                const std::vector<ExperimentRow>& rows) {
  std::vector<AggregateRow> out;
  for (double mf : grid.missing_fractions) {
    for (double hf : grid.node_holdout_fractions) {
      AggregateRow agg;
      agg.missing_fraction = mf;
      agg.holdout_fraction = hf;
      std::vector<double> maps, ads, accs;
      for (const auto& r : rows) {
        if (r.missing_fraction != mf || r.holdout_fraction != hf) continue;
        if (r.status != "ok") continue;
        ++agg.trials;
        maps.push_back(r.map);
        ads.push_back(r.ad);
        if (std::isfinite(r.accuracy)) accs.push_back(r.accuracy);
      }
      std::tie(agg.map_mean, agg.map_var) = detail::mean_var(maps);
      std::tie(agg.ad_mean, agg.ad_var) = detail::mean_var(ads);
      std::tie(agg.accuracy_mean, agg.accuracy_var) = detail::mean_var(accs);
      out.push_back(agg);
    }
  }
  return out;
}

inline std::string results_csv(const std::vector<ExperimentRow>& rows) {
  std::string out =
      "missing_fraction,holdout_fraction,trial,map,ad,accuracy,final_loss,"
      "epochs,status,seed\n";
  for (const auto& r : rows) {
    out += format_double(r.missing_fraction) + ",";
    out += format_double(r.holdout_fraction) + ",";
    out += std::to_string(r.trial) + ",";
    out += format_double(r.map) + ",";
    out += format_double(r.ad) + ",";
    out += format_double(r.accuracy) + ",";
    out += format_double(r.final_loss) + ",";
    out += std::to_string(r.epochs) + ",";
    out += r.status + ",";
    out += std::to_string(r.seed) + "\n";
  }
  return out;
}

inline std::string aggregates_csv(const std::vector<AggregateRow>& rows) {
  std::string out =
      "missing_fraction,holdout_fraction,trials,map_mean,map_var,ad_mean,ad_var,"
      "accuracy_mean,accuracy_var\n";
  for (const auto& r : rows) {
    out += format_double(r.missing_fraction) + ",";
    out += format_double(r.holdout_fraction) + ",";
    out += std::to_string(r.trials) + ",";
    out += format_double(r.map_mean) + ",";
    out += format_double(r.map_var) + ",";
    out += format_double(r.ad_mean) + ",";
    out += format_double(r.ad_var) + ",";
    out += format_double(r.accuracy_mean) + ",";
    out += format_double(r.accuracy_var) + "\n";
  }
  return out;
}

}  // namespace softmanifold
