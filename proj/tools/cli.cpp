#include "cli.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <limits>
#include <ostream>
#include <sstream>

#include <fmt/format.h>
#include <fmt/ranges.h>

namespace btgat::cli {

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

template <class T>
T parse_number(const std::string& key, const std::string& v) {
  T out{};
  const auto* end = v.data() + v.size();
  const auto [ptr, ec] = std::from_chars(v.data(), end, out);
  if (v.empty() || ec != std::errc() || ptr != end)
    throw ConfigError(fmt::format("{}: cannot parse '{}'", key, v));
  if constexpr (std::is_floating_point_v<T>) {
    if (!std::isfinite(out)) throw ConfigError(fmt::format("{}: value must be finite", key));
  }
  return out;
}

std::size_t parse_size(const std::string& key, const std::string& v) {
  if (!v.empty() && v[0] == '-') throw ConfigError(fmt::format("{}: must be non-negative", key));
  return parse_number<std::size_t>(key, v);
}

struct Key {
  std::string name;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

template <class T>
std::string num(T v) {
  return fmt::format("{}", v);
}

#define SIZE_KEY(NAME, FIELD)                                                            \
  Key {                                                                                  \
    NAME, [](RunConfig& c, const std::string& v) { c.FIELD = parse_size(NAME, v); },     \
        [](const RunConfig& c) { return num(c.FIELD); }                                  \
  }
#define REAL_KEY(NAME, FIELD)                                                                  \
  Key {                                                                                        \
    NAME, [](RunConfig& c, const std::string& v) { c.FIELD = parse_number<double>(NAME, v); }, \
        [](const RunConfig& c) { return num(c.FIELD); }                                        \
  }
#define PATH_KEY(NAME, FIELD)                                                      \
  Key {                                                                            \
    NAME, [](RunConfig& c, const std::string& v) { c.FIELD = v; },                 \
        [](const RunConfig& c) { return c.FIELD.string(); }                        \
  }

const std::vector<Key>& key_table() {
  static const std::vector<Key> keys{
      Key{"model.channels",
          [](RunConfig& c, const std::string& v) {
            std::array<std::size_t, 4> ch{};
            std::size_t i = 0;
            std::stringstream ss(v);
            for (std::string part; std::getline(ss, part, ',');) {
              if (i == 4) throw ConfigError("model.channels: expected four comma-separated values");
              ch[i++] = parse_size("model.channels", trim(part));
            }
            if (i != 4) throw ConfigError("model.channels: expected four comma-separated values");
            c.model.channels = ch;
          },
          [](const RunConfig& c) { return fmt::format("{}", fmt::join(c.model.channels, ",")); }},
      SIZE_KEY("model.latent_dim", model.latent_dim),
      SIZE_KEY("model.knn_k", model.knn_k),
      SIZE_KEY("model.bilstm_hidden", model.bilstm_hidden),
      SIZE_KEY("model.attention_heads", model.attention_heads),
      SIZE_KEY("model.n_clusters", model.n_clusters),
      REAL_KEY("model.alpha", model.alpha),
      SIZE_KEY("model.window_length", model.window_length),
      REAL_KEY("train.eta", train.eta),
      REAL_KEY("train.mu", train.mu),
      REAL_KEY("train.lambda", train.lambda),
      SIZE_KEY("train.update_interval", train.update_interval),
      REAL_KEY("train.tol", train.tol),
      SIZE_KEY("train.patience", train.patience),
      SIZE_KEY("train.max_iters", train.max_iters),
      SIZE_KEY("train.batch_size", train.batch_size),
      SIZE_KEY("train.checkpoint_every", train.checkpoint_every),
      SIZE_KEY("train.pretrain_steps", train.pretrain_steps),
      SIZE_KEY("synth.n_regimes", synth.n_regimes),
      SIZE_KEY("synth.frames", synth.frames),
      SIZE_KEY("synth.segment_length", synth.segment_length),
      SIZE_KEY("synth.height", synth.height),
      SIZE_KEY("synth.width", synth.width),
      SIZE_KEY("synth.n_vars", synth.n_vars),
      REAL_KEY("synth.noise_sigma", synth.noise_sigma),
      REAL_KEY("synth.missing_rate", synth.missing_rate),
      SIZE_KEY("elbow.k_min", k_min),
      SIZE_KEY("elbow.k_max", k_max),
      Key{"hac.linkage",
          [](RunConfig& c, const std::string& v) {
            if (v == "ward")
              c.linkage = Linkage::ward;
            else if (v == "average")
              c.linkage = Linkage::average;
            else
              throw ConfigError("hac.linkage: expected 'ward' or 'average', got '" + v + "'");
          },
          [](const RunConfig& c) { return std::string(c.linkage == Linkage::ward ? "ward" : "average"); }},
      Key{"seed", [](RunConfig& c, const std::string& v) { c.apply_seed(parse_number<std::uint64_t>("seed", v)); },
          [](const RunConfig& c) { return num(c.seed); }},
      SIZE_KEY("threads", threads),
      PATH_KEY("input", input),
      PATH_KEY("out", out),
      PATH_KEY("checkpoint", checkpoint),
      PATH_KEY("labels", labels),
      PATH_KEY("truth", truth),
  };
  return keys;
}

#undef SIZE_KEY
#undef REAL_KEY
#undef PATH_KEY

const Key& find_key(const std::string& key) {
  for (const auto& k : key_table())
    if (k.name == key) return k;
  throw ConfigError("unknown configuration key '" + key + "'");
}

void write_file(const std::filesystem::path& path, const std::string& bytes) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw DataError("cannot write " + path.string());
  f << bytes;
  if (!f) throw DataError("write failed for " + path.string());
}

std::filesystem::path prepare_out(const RunConfig& cfg) {
  std::filesystem::create_directories(cfg.out);
  write_file(cfg.out / "resolved.cfg", resolved_config(cfg));
  return cfg.out;
}

const std::filesystem::path& require(const std::filesystem::path& p, const char* key) {
  if (p.empty()) throw ConfigError(std::string("this command needs '") + key + "'");
  return p;
}

/// Ingest, impute and normalize. Both steps are identities on prepared data.
GridDataset load_prepared(const RunConfig& cfg) {
  const auto& path = require(cfg.input, "input");
  return minmax_normalize(impute_mean(ingest_grid(path, format_from_path(path))));
}

InputGeometry geometry_of(const GridDataset& d) { return {d.L, d.W, d.n}; }

struct TrainedModel {
  Model model;
  TrainResult result;
};

TrainedModel train_model(const RunConfig& cfg, const SequenceTensor& seq, const GridDataset& d) {
  Model model(cfg.model, geometry_of(d), cfg.seed);
  std::ofstream log(cfg.out / "train.log", std::ios::binary | std::ios::trunc);
  TrainHooks hooks;
  hooks.log_stream = &log;
  const auto ckpt = cfg.out / "model.ckpt";
  hooks.checkpoint = [&](const Model& m, std::uint64_t step) { save_checkpoint(m, step, ckpt); };
  auto result = train(model, seq, cfg.train, hooks);
  return {std::move(model), std::move(result)};
}

std::vector<std::size_t> checked_labels(const std::filesystem::path& path, std::size_t T) {
  auto labels = read_labels(path);
  if (labels.size() != T)
    throw DataError(fmt::format("{} has {} labels for {} time steps", path.string(), labels.size(), T));
  return labels;
}

Labeling as_labeling(std::vector<std::size_t> labels) {
  Labeling l;
  l.k = labels.empty() ? 0 : *std::max_element(labels.begin(), labels.end()) + 1;
  l.labels = std::move(labels);
  return l;
}

std::string fixed(double v) { return std::isnan(v) ? std::string("nan") : fmt::format("{:.4f}", v); }

struct MetricColumn {
  const char* name;
  double MetricReport::*field;
};

constexpr MetricColumn kColumns[] = {
    {"silhouette", &MetricReport::silhouette},
    {"davies_bouldin", &MetricReport::davies_bouldin},
    {"calinski_harabasz", &MetricReport::calinski_harabasz},
    {"rmse", &MetricReport::rmse},
    {"variance", &MetricReport::variance},
    {"inter_cluster_distance", &MetricReport::inter_cluster_distance},
};

}  // namespace

void RunConfig::apply_seed(std::uint64_t s) {
  seed = s;
  train.seed = s;
}

void RunConfig::validate() const {
  try {
    model.validate();
    train.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  if (threads < 1) throw ConfigError("threads must be >= 1");
  if (k_min < 1 || k_min > k_max) throw ConfigError("elbow range needs 1 <= k_min <= k_max");
  if (synth.n_regimes < 1 || synth.frames < 1 || synth.segment_length < 1)
    throw ConfigError("synth.n_regimes, synth.frames and synth.segment_length must be >= 1");
  if (synth.height < 1 || synth.width < 1 || synth.n_vars < 1) throw ConfigError("synth grid extents must be >= 1");
  if (!(synth.noise_sigma >= 0.0)) throw ConfigError("synth.noise_sigma must be >= 0");
  if (!(synth.missing_rate >= 0.0 && synth.missing_rate < 1.0))
    throw ConfigError("synth.missing_rate must lie in [0, 1)");
}

const std::vector<std::string>& config_keys() {
  static const std::vector<std::string> names = [] {
    std::vector<std::string> n;
    for (const auto& k : key_table()) n.push_back(k.name);
    return n;
  }();
  return names;
}

void set_key(RunConfig& cfg, const std::string& key, const std::string& value) { find_key(key).set(cfg, value); }

std::string get_key(const RunConfig& cfg, const std::string& key) { return find_key(key).get(cfg); }

void apply_config_text(RunConfig& cfg, const std::string& text, const std::string& source) {
  std::istringstream in(text);
  std::size_t line_no = 0;
  for (std::string line; std::getline(in, line);) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    const std::string body = trim(line);
    if (body.empty()) continue;
    const auto eq = body.find('=');
    if (eq == std::string::npos)
      throw ConfigError(fmt::format("{}:{}: expected key = value", source, line_no));
    try {
      set_key(cfg, trim(body.substr(0, eq)), trim(body.substr(eq + 1)));
    } catch (const ConfigError& e) {
      throw ConfigError(fmt::format("{}:{}: {}", source, line_no, e.what()));
    }
  }
}

void apply_config_file(RunConfig& cfg, const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ConfigError("cannot read config file " + path.string());
  std::ostringstream os;
  os << f.rdbuf();
  apply_config_text(cfg, os.str(), path.string());
}

std::string resolved_config(const RunConfig& cfg) {
  std::string out;
  for (const auto& k : key_table()) out += fmt::format("{} = {}\n", k.name, k.get(cfg));
  return out;
}

std::string range_report(const GridDataset& d) {
  std::string out;
  for (std::size_t v = 0; v < d.n; ++v) {
    double lo = std::numeric_limits<double>::infinity(), hi = -lo;
    for (std::size_t i = v; i < d.values.size(); i += d.n) {
      if (d.missing_mask[i]) continue;
      lo = std::min(lo, d.values[i]);
      hi = std::max(hi, d.values[i]);
    }
    const std::string name = v < d.var_names.size() ? d.var_names[v] : "v" + std::to_string(v);
    if (lo > hi)
      out += fmt::format("var={} min=nan max=nan\n", name);
    else
      out += fmt::format("var={} min={} max={}\n", name, lo, hi);
  }
  return out;
}

std::string comparison_table(const std::vector<MetricReport>& reports) {
  std::string out = fmt::format("{:<8}", "method");
  for (const auto& c : kColumns) out += fmt::format(" {:>22}", c.name);
  out += '\n';
  for (const auto& r : reports) {
    out += fmt::format("{:<8}", r.method_name);
    for (const auto& c : kColumns) out += fmt::format(" {:>22}", fixed(r.*(c.field)));
    out += '\n';
  }
  return out;
}

std::string comparison_long(const std::vector<MetricReport>& reports) {
  std::string out = "method\tmetric\tvalue\n";
  for (const auto& r : reports)
    for (const auto& c : kColumns) {
      const double v = r.*(c.field);
      out += fmt::format("{}\t{}\t{}\n", r.method_name, c.name, std::isnan(v) ? std::string("nan") : fmt::format("{}", v));
    }
  return out;
}

void cmd_preprocess(const RunConfig& cfg, std::ostream& out) {
  const auto& path = require(cfg.input, "input");
  const GridDataset raw = ingest_grid(path, format_from_path(path));
  const std::string ranges = range_report(raw);
  const GridDataset prepared = minmax_normalize(impute_mean(raw));
  const auto dir = prepare_out(cfg);
  write_container(prepared, dir / "preprocessed.stgrid");
  write_file(dir / "ranges.txt", ranges);
  out << fmt::format("T={} L={} W={} n={} missing={}\n", raw.T, raw.L, raw.W, raw.n, raw.missing_count()) << ranges;
}

void cmd_synth(const RunConfig& cfg, std::ostream& out) {
  RegimeSpec spec;
  spec.n_regimes = cfg.synth.n_regimes;
  spec.segment_lengths = uniform_segments(cfg.synth.frames, cfg.synth.segment_length);
  spec.L = cfg.synth.height;
  spec.W = cfg.synth.width;
  spec.n_vars = cfg.synth.n_vars;
  spec.noise_sigma = cfg.synth.noise_sigma;
  spec.missing_rate = cfg.synth.missing_rate;
  spec.seed = cfg.seed;
  const SynthResult r = generate(spec);
  const auto dir = prepare_out(cfg);
  write_container(r.data, dir / "data.stgrid");
  write_labels(r.truth, dir / "truth.txt");
  out << fmt::format("T={} L={} W={} n={} regimes={} missing={}\n", r.data.T, r.data.L, r.data.W, r.data.n,
                     spec.n_regimes, r.data.missing_count());
}

void cmd_elbow(const RunConfig& cfg, std::ostream& out) {
  const GridDataset d = load_prepared(cfg);
  const ElbowResult e = elbow_k(flatten_2d(d), cfg.k_min, cfg.k_max, cfg.seed);
  const auto dir = prepare_out(cfg);
  write_file(dir / "elbow.txt", e.curve_data());
  const std::string summary = fmt::format("k_star={}\nknee_undefined={}\nnon_monotone={}\n", e.k_star,
                                          e.knee_undefined, e.non_monotone);
  write_file(dir / "elbow_summary.txt", summary);
  out << summary;
}

void cmd_train(const RunConfig& cfg, std::ostream& out) {
  const GridDataset d = load_prepared(cfg);
  const SequenceTensor seq = to_sequence_tensor(d, cfg.model.window_length);
  const auto dir = prepare_out(cfg);
  const auto trained = train_model(cfg, seq, d);
  write_labels(trained.result.clusters.labels, dir / "labels.txt");
  out << fmt::format("steps={} stop_reason={}\n", trained.result.steps, trained.result.log.stop_reason);
}

void cmd_cluster(const RunConfig& cfg, std::ostream& out) {
  const Model model = model_from_checkpoint(read_checkpoint(require(cfg.checkpoint, "checkpoint")));
  const GridDataset d = load_prepared(cfg);
  if (geometry_of(d) != model.geometry())
    throw DataError(fmt::format("data grid {}x{}x{} does not match the checkpoint's {}x{}x{}", d.L, d.W, d.n,
                                model.geometry().height, model.geometry().width, model.geometry().channels));
  const SequenceTensor seq = to_sequence_tensor(d, model.config().window_length);
  const ClusterState state = assign_clusters(model, seq);
  const auto dir = prepare_out(cfg);
  write_labels(state.labels, dir / "labels.txt");
  out << fmt::format("labelled {} time steps into {} clusters\n", state.labels.size(), model.config().n_clusters);
}

void cmd_evaluate(const RunConfig& cfg, std::ostream& out) {
  const GridDataset d = load_prepared(cfg);
  const auto labels = checked_labels(require(cfg.labels, "labels"), d.T);
  Tensor representation;
  std::string method = "raw";
  if (!cfg.checkpoint.empty()) {
    const Model model = model_from_checkpoint(read_checkpoint(cfg.checkpoint));
    if (geometry_of(d) != model.geometry()) throw DataError("data grid does not match the checkpoint");
    representation = embed_frames(model, to_sequence_tensor(d, model.config().window_length));
    method = "btgat";
  } else {
    representation = flatten_2d(d);
  }
  const MetricReport r = evaluate_internal(representation, as_labeling(labels), method);
  const auto dir = prepare_out(cfg);
  write_file(dir / "metrics.txt", to_key_value(r));
  write_file(dir / "metrics.json", to_json(r));
  out << to_key_value(r);
}

void cmd_compare(const RunConfig& cfg, std::ostream& out) {
  const GridDataset d = load_prepared(cfg);
  const SequenceTensor seq = to_sequence_tensor(d, cfg.model.window_length);
  const auto dir = prepare_out(cfg);
  const std::size_t k = cfg.model.n_clusters;

  const auto trained = train_model(cfg, seq, d);
  const Tensor embeddings = embed_frames(trained.model, seq);
  const Tensor raw = flatten_2d(d);

  struct Method {
    std::string name;
    std::vector<std::size_t> labels;
    const Tensor* space;
  };
  const std::vector<Method> methods{
      {"btgat", trained.result.clusters.labels, &embeddings},
      {"kmeans", kmeans_cluster(raw, k, cfg.seed).labels, &raw},
      {"hac", hac_cluster(raw, k, cfg.linkage).labels, &raw},
  };
  std::vector<MetricReport> reports;
  std::string ari;
  std::vector<std::size_t> truth;
  if (!cfg.truth.empty()) truth = checked_labels(cfg.truth, d.T);
  for (const auto& m : methods) {
    Labeling l;
    l.labels = m.labels;
    l.k = k;
    reports.push_back(evaluate_internal(*m.space, l, m.name));
    write_labels(m.labels, dir / ("labels_" + m.name + ".txt"));
    write_file(dir / ("metrics_" + m.name + ".json"), to_json(reports.back()));
    if (!truth.empty()) ari += fmt::format("method={} ari={}\n", m.name, score_against_truth(m.labels, truth).ari);
  }
  const std::string table = comparison_table(reports);
  write_file(dir / "comparison.txt", table);
  write_file(dir / "comparison_long.tsv", comparison_long(reports));
  if (!truth.empty()) write_file(dir / "ari.txt", ari);
  out << fmt::format("steps={} stop_reason={}\n", trained.result.steps, trained.result.log.stop_reason) << table
      << ari;
}

const std::vector<std::string>& command_names() {
  static const std::vector<std::string> names{"preprocess", "elbow", "train", "cluster", "evaluate", "compare", "synth"};
  return names;
}

int run(const std::string& command, const RunConfig& cfg, std::ostream& out, std::ostream& err) {
  static const std::vector<std::pair<std::string, void (*)(const RunConfig&, std::ostream&)>> table{
      {"preprocess", cmd_preprocess}, {"elbow", cmd_elbow},       {"train", cmd_train}, {"cluster", cmd_cluster},
      {"evaluate", cmd_evaluate},     {"compare", cmd_compare}, {"synth", cmd_synth},
  };
  try {
    cfg.validate();
    for (const auto& [name, fn] : table)
      if (name == command) {
        fn(cfg, out);
        return kOk;
      }
    throw ConfigError("unknown command '" + command + "'");
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kConfigError;
  } catch (const DivergenceError& e) {
    err << "diverged: " << e.what() << '\n';
    return kDiverged;
  } catch (const NonFiniteError& e) {
    err << "diverged: " << e.what() << '\n';
    return kDiverged;
  } catch (const DataError& e) {
    err << "data error: " << e.what() << '\n';
    return kDataError;
  } catch (const ShapeError& e) {
    err << "data error: " << e.what() << '\n';
    return kDataError;
  } catch (const std::filesystem::filesystem_error& e) {
    err << "data error: " << e.what() << '\n';
    return kDataError;
  } catch (const std::invalid_argument& e) {
    err << "config error: " << e.what() << '\n';
    return kConfigError;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kFailure;
  }
}

}  // namespace btgat::cli
