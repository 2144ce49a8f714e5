#pragma once
// One INI-style document holding every stage's settings, with `section.key=value`
// overrides, cross-field validation, a canonical text form and its digest.
// The run record that every CLI command writes lives here as well.

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"
#include "vsdf/autoencoder/autoencoder.hpp"
#include "vsdf/evaluation/metrics.hpp"
#include "vsdf/tasks/tasks.hpp"

namespace vsdf::data {

struct DataSettings {
  int n_shapes = 200;
  std::vector<std::string> categories{"chair", "table", "stool"};
  std::uint64_t seed = 1;
};

struct TaskDefaults {
  int k = 10;
  int t_mid = 700;
  std::string mask = "bottom-half";
};

struct RunConfig {
  DataSettings data;
  ae::AutoencoderConfig ae;
  ae::AeTrainConfig ae_train;
  std::uint64_t scale_seed = 0;
  tasks::DiffusionModelConfig model;
  tasks::DiffusionTrainConfig diffusion_train;
  diffusion::SamplerConfig sampler{.guidance_scale = 3.0};
  eval::ClassifierConfig classifier;
  eval::ClassifierTrainConfig classifier_train;
  TaskDefaults task;

  // Throws ConfigError listing every inconsistency found.
  void validate() const;
  // Canonical INI text: every key, fixed order, round-trips through parse.
  std::string to_ini() const;
  // fnv1a64 of to_ini(), as 16 hex digits.
  std::string digest() const;
};

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// "desk" (D=32, P=4) or "full" (D=64, P=8).
RunConfig preset(const std::string& name);

// Keys: section.key. A [run] preset key selects the base preset; unknown
// sections or keys and unparsable values throw ConfigError. Overrides are
// applied after the file; the result is validated.
RunConfig parse_run_config(const std::string& ini_text, const std::vector<std::string>& overrides = {});
RunConfig load_run_config(const std::filesystem::path& path, const std::vector<std::string>& overrides = {});

// Every canonical key with its current value, for documentation and --help.
std::vector<std::pair<std::string, std::string>> config_keys(const RunConfig& c);

std::string version_string();
std::string fnv1a64_hex(const std::string& bytes);
std::string file_digest(const std::filesystem::path& path);

struct RunRecord {
  std::string command;
  std::vector<std::string> argv;  // arguments after the program name
  std::string config_ini;
  std::string config_digest;
  std::map<std::string, std::uint64_t> seeds;
  double wall_seconds = 0;
  std::string version;
  std::map<std::string, std::string> outputs;  // path -> digest
  nlohmann::json to_json() const;
  static RunRecord from_json(const nlohmann::json& j);
};

void write_run_record(const RunRecord& r, const std::filesystem::path& path);
RunRecord read_run_record(const std::filesystem::path& path);

}  // namespace vsdf::data
