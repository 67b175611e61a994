// Command-line driver: embed a dataset onto the ball, score an existing
// embedding, sweep missing-data experiments, or calibrate the semimetric
// against the variational geodesic length.

#include <algorithm>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "softmanifold/softmanifold.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace softmanifold;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 1;
constexpr int kExitRuntime = 2;

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct RunConfig {
  // dataset source: either a CSV path or synthetic generator parameters
  std::string csv_path;
  bool csv_has_labels = false;
  bool csv_has_header = false;
  bool use_synthetic = false;
  std::size_t synth_nodes = 50;
  std::size_t synth_features = 10;
  std::size_t synth_classes = 3;
  double synth_noise = 0.05;
  std::uint64_t synth_seed = 1;

  PipelineConfig pipeline;
  std::optional<ExperimentGrid> experiment;
  std::string output_dir = "out";
};

json load_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file: " + path);
  try {
    return json::parse(in);
  } catch (const std::exception& e) {
    throw ConfigError("config parse error in " + path + ": " + e.what());
  }
}

RunConfig parse_run_config(const json& j) {
  RunConfig cfg;
  const int version = j.value("config_version", 0);
  if (version != 1) {
    throw ConfigError("config_version must be 1");
  }
  if (!j.contains("input")) throw ConfigError("config needs an 'input' section");
  const json& input = j.at("input");
  if (input.contains("csv")) {
    cfg.csv_path = input.at("csv").get<std::string>();
    cfg.csv_has_labels = input.value("has_labels", false);
    cfg.csv_has_header = input.value("has_header", false);
  } else if (input.contains("synthetic")) {
    cfg.use_synthetic = true;
    const json& s = input.at("synthetic");
    cfg.synth_nodes = s.value("n_nodes", cfg.synth_nodes);
    cfg.synth_features = s.value("n_features", cfg.synth_features);
    cfg.synth_classes = s.value("n_classes", cfg.synth_classes);
    cfg.synth_noise = s.value("noise", cfg.synth_noise);
    cfg.synth_seed = s.value("seed", cfg.synth_seed);
  } else {
    throw ConfigError("input must provide 'csv' or 'synthetic'");
  }

  if (j.contains("graph")) {
    const json& g = j.at("graph");
    cfg.pipeline.k = g.value("k", cfg.pipeline.k);
    cfg.pipeline.base_conductivity =
        g.value("base_conductivity", cfg.pipeline.base_conductivity);
    cfg.pipeline.b0 = g.value("b0", cfg.pipeline.b0);
    if (g.contains("distance_transform")) {
      cfg.pipeline.transform =
          distance_transform_from_string(g.at("distance_transform"));
    }
    if (g.contains("velocity_sign")) {
      cfg.pipeline.velocity_sign = velocity_sign_from_string(g.at("velocity_sign"));
    }
  }
  if (j.contains("embed")) {
    cfg.pipeline.embed = EmbedConfig::from_json(j.at("embed"));
  }
  if (j.contains("eval")) {
    cfg.pipeline.k_vote = j.at("eval").value("k_vote", cfg.pipeline.k_vote);
  }
  if (j.contains("experiment")) {
    const json& e = j.at("experiment");
    ExperimentGrid grid;
    grid.missing_fractions = e.value("missing_fractions", std::vector<double>{0.0});
    grid.node_holdout_fractions =
        e.value("node_holdout_fractions", std::vector<double>{0.0});
    grid.trials = e.value("trials", 1);
    grid.base_seed = e.value("base_seed", std::uint64_t{0});
    cfg.experiment = grid;
  }
  cfg.output_dir = j.value("output_dir", cfg.output_dir);
  return cfg;
}

FeatureMatrix load_dataset(const RunConfig& cfg) {
  if (cfg.use_synthetic) {
    return generate_synthetic(cfg.synth_nodes, cfg.synth_features,
                              cfg.synth_classes, cfg.synth_noise, cfg.synth_seed);
  }
  if (!fs::exists(cfg.csv_path)) {
    throw ConfigError("input CSV does not exist: " + cfg.csv_path);
  }
  return load_csv(cfg.csv_path, cfg.csv_has_labels, cfg.csv_has_header);
}

void write_file(const fs::path& path, const std::string& content) {
  fs::create_directories(path.parent_path().empty() ? "." : path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << content;
}

std::string loss_trace_csv(const EmbeddingState& st) {
  std::string out = "epoch,loss_distortion,loss_geometry,loss_total\n";
  for (const auto& t : st.loss_trace) {
    out += std::to_string(t.epoch) + "," + format_double(t.distortion) + "," +
           format_double(t.geometry) + "," + format_double(t.total) + "\n";
  }
  return out;
}

int cmd_embed(const std::string& config_path, std::optional<std::uint64_t> seed,
              const std::string& out_dir_flag, int threads) {
  RunConfig cfg = parse_run_config(load_json_file(config_path));
  if (!out_dir_flag.empty()) cfg.output_dir = out_dir_flag;
  if (seed) cfg.pipeline.embed.seed = *seed;

  const FeatureMatrix fm = load_dataset(cfg);
  const Neighborhoods nbhd = knn_neighborhoods(fm, cfg.pipeline.k, threads);
  const ConductivityTensor K =
      build_conductivity(fm, nbhd, cfg.pipeline.base_conductivity);
  const FluidGraph fg =
      graph_distance_matrix(fm, K, nbhd, cfg.pipeline.transform, cfg.pipeline.b0,
                            cfg.pipeline.velocity_sign, threads);
  const EmbeddingState st = embed(fm, fg, cfg.pipeline.embed, threads);

  const fs::path out(cfg.output_dir);
  write_file(out / "embedding.json", st.to_json().dump(2) + "\n");
  write_file(out / "loss_trace.csv", loss_trace_csv(st));
  write_file(out / "graph.json", fg.to_json().dump(2) + "\n");
  return kExitOk;
}

int cmd_eval(const std::string& embedding_path, const std::string& graph_path,
             const std::string& metrics_flag, const std::string& out_dir_flag) {
  std::vector<std::string> metrics;
  {
    std::stringstream ss(metrics_flag);
    std::string item;
    while (std::getline(ss, item, ',')) {
      if (item != "map" && item != "ad") {
        throw ConfigError("unknown metric: " + item + " (expected map, ad)");
      }
      metrics.push_back(item);
    }
    if (metrics.empty()) throw ConfigError("no metrics requested");
  }
  if (!fs::exists(embedding_path)) throw ConfigError("missing file: " + embedding_path);
  if (!fs::exists(graph_path)) throw ConfigError("missing file: " + graph_path);

  const EmbeddingState st = EmbeddingState::from_json(load_json_file(embedding_path));
  const FluidGraph fg = FluidGraph::from_json(load_json_file(graph_path));
  if (static_cast<int>(st.positions.size()) != fg.n_nodes) {
    throw std::runtime_error("embedding and graph disagree on node count");
  }

  std::string header, row;
  for (std::size_t m = 0; m < metrics.size(); ++m) {
    if (m > 0) {
      header += ",";
      row += ",";
    }
    header += metrics[m];
    row += metrics[m] == "map"
               ? format_double(mean_average_precision(st, fg))
               : format_double(average_distortion(st, fg));
  }
  const fs::path out = out_dir_flag.empty() ? fs::path(".") : fs::path(out_dir_flag);
  write_file(out / "eval.csv", header + "\n" + row + "\n");
  return kExitOk;
}

int cmd_simulate(const std::string& config_path, std::optional<std::uint64_t> seed,
                 const std::string& out_dir_flag, int threads) {
  RunConfig cfg = parse_run_config(load_json_file(config_path));
  if (!out_dir_flag.empty()) cfg.output_dir = out_dir_flag;
  if (!cfg.experiment) throw ConfigError("config has no 'experiment' grid");
  if (seed) cfg.experiment->base_seed = *seed;

  const FeatureMatrix fm = load_dataset(cfg);
  const auto rows = run_experiment(fm, *cfg.experiment, cfg.pipeline, threads);
  const auto aggs = aggregate_rows(*cfg.experiment, rows);

  const fs::path out(cfg.output_dir);
  write_file(out / "results.csv", results_csv(rows));
  write_file(out / "aggregates.csv", aggregates_csv(aggs));
  return kExitOk;
}

int cmd_geodesic_check(int n_pairs, std::uint64_t seed, int segments,
                       const std::string& out_dir_flag) {
  if (n_pairs < 1) throw ConfigError("--pairs must be >= 1");
  if (segments < 8) throw ConfigError("--segments must be >= 8");

  std::string csv = "pair_id,chord,semimetric,oracle_length,ratio,status\n";
  std::vector<double> ratios;

  auto random_interior = [&](Rng& rng) {
    Vec u(2);
    do {
      u[0] = 2.0 * rng.uniform01() - 1.0;
      u[1] = 2.0 * rng.uniform01() - 1.0;
    } while (squared_norm(u) >= 0.9025);  // radius < 0.95
    return u;
  };

  // Row 0 is a deliberately coincident pair; it exercises the degenerate
  // branch and stays out of the ratio summary.
  for (int pair_id = 0; pair_id <= n_pairs; ++pair_id) {
    Rng rng(hash_values(seed, 0x9e0dULL, static_cast<std::uint64_t>(pair_id)));
    Vec u1 = random_interior(rng);
    Vec u2 = pair_id == 0 ? u1 : random_interior(rng);
    const double chord = euclidean_distance(u1, u2);
    const double sm = semimetric_distance(u1, u2);
    const GeodesicResult geo = geodesic_length_oracle(u1, u2, segments);
    std::string status = geo.converged ? "ok" : "no_converge";
    double ratio = std::numeric_limits<double>::quiet_NaN();
    if (sm > 0.0) {
      ratio = geo.length / sm;
      if (geo.converged) ratios.push_back(ratio);
    } else {
      status = "degenerate";
    }
    csv += std::to_string(pair_id) + "," + format_double(chord) + "," +
           format_double(sm) + "," + format_double(geo.length) + "," +
           format_double(ratio) + "," + status + "\n";
  }

  const fs::path out = out_dir_flag.empty() ? fs::path(".") : fs::path(out_dir_flag);
  write_file(out / "geodesic_calibration.csv", csv);

  if (!ratios.empty()) {
    std::sort(ratios.begin(), ratios.end());
    const double median = ratios[ratios.size() / 2];
    std::cout << "ratio oracle/semimetric over " << ratios.size()
              << " pairs: min=" << format_double(ratios.front())
              << " median=" << format_double(median)
              << " max=" << format_double(ratios.back()) << "\n";
  }
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Graph embedding on a fluid-diffusion ball manifold"};
  app.require_subcommand(1);

  std::string config_path;
  std::string out_dir;
  int threads = 1;
  std::optional<std::uint64_t> seed_flag;
  std::uint64_t seed_value = 0;
  bool seed_set = false;

  auto add_common = [&](CLI::App* sub, bool needs_config) {
    auto* opt = sub->add_option("--config", config_path, "JSON run configuration");
    if (needs_config) opt->required();
    sub->add_option("--out", out_dir, "output directory (overrides config)");
    sub->add_option("--threads", threads, "worker thread cap")->check(CLI::PositiveNumber);
    sub->add_option("--seed", seed_value, "seed override")
        ->each([&](const std::string&) { seed_set = true; });
  };

  auto* embed_cmd = app.add_subcommand("embed", "embed a dataset and write outputs");
  add_common(embed_cmd, true);

  std::string embedding_path, graph_path, metrics = "map,ad";
  auto* eval_cmd = app.add_subcommand("eval", "score an embedding against its graph");
  eval_cmd->add_option("--embedding", embedding_path, "embedding.json path")->required();
  eval_cmd->add_option("--graph", graph_path, "graph.json path")->required();
  eval_cmd->add_option("--metrics", metrics, "comma list from: map, ad");
  eval_cmd->add_option("--out", out_dir, "output directory");

  auto* sim_cmd = app.add_subcommand("simulate", "run the missing-data experiment grid");
  add_common(sim_cmd, true);

  int pairs = 50;
  int segments = 64;
  auto* geo_cmd =
      app.add_subcommand("geodesic-check", "compare semimetric with geodesic length");
  geo_cmd->add_option("--pairs", pairs, "number of random pairs");
  geo_cmd->add_option("--seed", seed_value, "seed")
      ->each([&](const std::string&) { seed_set = true; });
  geo_cmd->add_option("--segments", segments, "polyline segments");
  geo_cmd->add_option("--out", out_dir, "output directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }
  if (seed_set) seed_flag = seed_value;

  try {
    if (app.got_subcommand(embed_cmd)) {
      return cmd_embed(config_path, seed_flag, out_dir, threads);
    }
    if (app.got_subcommand(eval_cmd)) {
      return cmd_eval(embedding_path, graph_path, metrics, out_dir);
    }
    if (app.got_subcommand(sim_cmd)) {
      return cmd_simulate(config_path, seed_flag, out_dir, threads);
    }
    if (app.got_subcommand(geo_cmd)) {
      return cmd_geodesic_check(pairs, seed_set ? seed_value : 0, segments, out_dir);
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::invalid_argument& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitOk;
}
