#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <stdexcept>
#include <string>
#include <vector>

#include "btgat/cluster_eval.hpp"
#include "btgat/model.hpp"
#include "btgat/synth.hpp"
#include "btgat/training.hpp"

namespace btgat::cli {

/// Exit codes shared by every command.
enum ExitCode : int {
  kOk = 0,
  kFailure = 1,
  kConfigError = 2,
  kDataError = 3,
  kDiverged = 4,
};

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct SynthSettings {
  std::size_t n_regimes = 3;
  std::size_t frames = 120;
  std::size_t segment_length = 20;
  std::size_t height = 16;
  std::size_t width = 16;
  std::size_t n_vars = 3;
  double noise_sigma = 0.1;
  double missing_rate = 0.0;
};

/// Everything a command needs. Built from defaults, then a key=value file,
/// then command-line overrides.
struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  SynthSettings synth;
  std::uint64_t seed = 0;
  std::size_t threads = 1;
  std::filesystem::path input;
  std::filesystem::path out = ".";
  std::filesystem::path checkpoint;
  std::filesystem::path labels;
  std::filesystem::path truth;
  std::size_t k_min = 2;
  std::size_t k_max = 10;
  Linkage linkage = Linkage::ward;

  /// Propagates `seed` into the model and training seeds.
  void apply_seed(std::uint64_t s);
  /// Throws ConfigError on an out-of-range value.
  void validate() const;
};

/// Every configurable key, in echo order.
const std::vector<std::string>& config_keys();

/// Sets one key; throws ConfigError for unknown keys or unparsable values.
void set_key(RunConfig& cfg, const std::string& key, const std::string& value);
std::string get_key(const RunConfig& cfg, const std::string& key);

/// Applies `key = value` lines; blank lines and `#` comments are skipped.
void apply_config_text(RunConfig& cfg, const std::string& text, const std::string& source = "config");
void apply_config_file(RunConfig& cfg, const std::filesystem::path& path);

/// Fully resolved configuration in the same key=value format.
std::string resolved_config(const RunConfig& cfg);

/// Runs one command and maps failures onto ExitCode. Progress goes to `out`,
/// diagnostics to `err`.
int run(const std::string& command, const RunConfig& cfg, std::ostream& out, std::ostream& err);

const std::vector<std::string>& command_names();

// Individual commands. They throw; `run` does the exit-code mapping.
void cmd_preprocess(const RunConfig& cfg, std::ostream& out);
void cmd_synth(const RunConfig& cfg, std::ostream& out);
void cmd_elbow(const RunConfig& cfg, std::ostream& out);
void cmd_train(const RunConfig& cfg, std::ostream& out);
void cmd_cluster(const RunConfig& cfg, std::ostream& out);
void cmd_evaluate(const RunConfig& cfg, std::ostream& out);
void cmd_compare(const RunConfig& cfg, std::ostream& out);

/// Per-variable value range lines, `var=<name> min=<v> max=<v>`.
std::string range_report(const GridDataset& d);

/// Table of six metrics, one row per report.
std::string comparison_table(const std::vector<MetricReport>& reports);
/// Long-format `method metric value` rows for external plotting.
std::string comparison_long(const std::vector<MetricReport>& reports);

}  // namespace btgat::cli
