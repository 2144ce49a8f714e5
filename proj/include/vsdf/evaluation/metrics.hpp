#pragma once
// Occupancy IoU, total mutual difference, a small voxel classifier for the
// accuracy metric, a pluggable text-shape scorer and the metrics report.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "vsdf/geometry/tsdf.hpp"
#include "vsdf/nn/params.hpp"

namespace vsdf::eval {

using geometry::OccupancyGrid;

// |a & b| / |a | b|, 1 when both are empty.
double iou(const OccupancyGrid& a, const OccupancyGrid& b);
// Mean IoU over unordered pairs; needs at least two shapes.
double tmd(const std::vector<OccupancyGrid>& shapes);

struct ClassifierConfig {
  int R = 32;
  int num_classes = 3;
  int width = 8;  // channels of the first conv; doubled at each of the three stride-2 stages
  void validate() const;
};

struct ClassifierTrainConfig {
  int epochs = 12;
  int batch_size = 8;
  double lr = 3e-3;
  std::uint64_t seed = 0;
};

class VoxelClassifier {
 public:
  VoxelClassifier(ClassifierConfig cfg, std::vector<std::string> class_names, std::uint64_t seed);
  VoxelClassifier(ClassifierConfig cfg, std::vector<std::string> class_names, nn::ParamStore<float> params);

  const ClassifierConfig& config() const { return cfg_; }
  const std::vector<std::string>& class_names() const { return names_; }
  nn::ParamStore<float>& params() { return params_; }
  const nn::ParamStore<float>& params() const { return params_; }

  std::vector<float> logits(const OccupancyGrid& g) const;
  std::vector<double> probabilities(const OccupancyGrid& g) const;
  int predict(const OccupancyGrid& g) const;
  // -1 when the name is not a class.
  int class_index(const std::string& name) const;

 private:
  ClassifierConfig cfg_;
  std::vector<std::string> names_;
  nn::ParamStore<float> params_;
};

template <typename T>
nn::ParamStore<T> init_classifier_params(const ClassifierConfig& cfg, const std::vector<std::string>& class_names,
                                         std::uint64_t seed);
// x is (B, 1, R, R, R) with occupied = 1; returns (B, num_classes) logits.
template <typename T>
nn::Var<T> classifier_forward(const ClassifierConfig& cfg, const nn::ParamStore<T>& ps, const nn::Var<T>& x);

struct LabeledGrids {
  std::vector<OccupancyGrid> grids;
  std::vector<int> labels;
};

struct ClassifierTrainResult {
  std::vector<double> loss_curve;
  double heldout_accuracy = -1;  // percent; -1 without a held-out set
};

// Throws unless there are at least two classes and every class has a sample.
VoxelClassifier train_toy_classifier(const LabeledGrids& train, const std::vector<std::string>& class_names,
                                     const ClassifierConfig& cfg, const ClassifierTrainConfig& tc,
                                     const LabeledGrids* heldout = nullptr, ClassifierTrainResult* result = nullptr);

// Percent of predictions equal to the intended labels.
double accuracy(const std::vector<int>& predicted, const std::vector<int>& intended);
double accuracy(const std::vector<OccupancyGrid>& generated, const std::vector<int>& intended, const VoxelClassifier& c);
// counts[true][predicted]
std::vector<std::vector<int>> confusion_matrix(const VoxelClassifier& c, const LabeledGrids& data);

void save_classifier(const VoxelClassifier& c, const std::filesystem::path& dir);
VoxelClassifier load_classifier(const std::filesystem::path& dir);

// A text-shape similarity in the place of an image-text model score.
using Scorer = std::function<double(const geometry::TsdfGrid& shape, const std::string& caption)>;

class ScorerRegistry {
 public:
  void add(const std::string& name, Scorer s);
  bool contains(const std::string& name) const { return scorers_.count(name) != 0; }
  std::vector<std::string> names() const;
  double score(const std::string& name, const geometry::TsdfGrid& shape, const std::string& caption) const;

 private:
  std::map<std::string, Scorer> scorers_;
};

// Classifier probability of the category named in the caption; throws when
// the caption names no known category. Not an image-text similarity.
Scorer classifier_scorer(const VoxelClassifier& c);
inline constexpr const char* kDefaultScorer = "classifier-prob";

struct SampleRecord {
  std::string file;
  std::string caption;
  int intended = -1;
  int predicted = -1;
  std::optional<double> iou;
  std::optional<double> score;
};

struct MetricsReport {
  std::optional<double> iou_mean;
  double acc = 0;
  std::optional<double> tmd;
  std::optional<double> scorer_value;
  std::string scorer;
  std::vector<SampleRecord> samples;
  std::string config_digest;
  nlohmann::json to_json() const;
};

}  // namespace vsdf::eval
