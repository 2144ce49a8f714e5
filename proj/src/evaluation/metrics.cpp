#include "vsdf/evaluation/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <stdexcept>

#include "vsdf/conditioning/text.hpp"
#include "vsdf/nn/layers.hpp"

namespace vsdf::eval {

using nn::ParamStore;
using nn::Tensor;
using nn::Var;

double iou(const OccupancyGrid& a, const OccupancyGrid& b) {
  if (a.R != b.R || a.bits.size() != b.bits.size()) {
    throw std::invalid_argument("iou: resolution mismatch (" + std::to_string(a.R) + " vs " + std::to_string(b.R) + ")");
  }
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < a.bits.size(); ++i) {
    const bool x = a.bits[i] != 0, y = b.bits[i] != 0;
    inter += x && y;
    uni += x || y;
  }
  return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

double tmd(const std::vector<OccupancyGrid>& shapes) {
  if (shapes.size() < 2) throw std::invalid_argument("tmd: need at least two shapes");
  double sum = 0;
  std::size_t pairs = 0;
  for (std::size_t i = 0; i < shapes.size(); ++i)
    for (std::size_t j = i + 1; j < shapes.size(); ++j) {
      sum += iou(shapes[i], shapes[j]);
      ++pairs;
    }
  return sum / static_cast<double>(pairs);
}

void ClassifierConfig::validate() const {
  if (R < 8 || R % 8 != 0) throw std::invalid_argument("classifier: R must be a positive multiple of 8");
  if (num_classes < 2) throw std::invalid_argument("classifier: need at least two classes");
  if (width < 1) throw std::invalid_argument("classifier: width must be positive");
}

namespace {

Tensor<float> stack_occupancy(const std::vector<const OccupancyGrid*>& grids, int R) {
  const std::size_t vol = static_cast<std::size_t>(R) * R * R;
  Tensor<float> x({static_cast<int>(grids.size()), 1, R, R, R});
  for (std::size_t b = 0; b < grids.size(); ++b) {
    if (grids[b]->R != R) {
      throw std::invalid_argument("classifier expects " + std::to_string(R) + "^3 occupancy, got " +
                                  std::to_string(grids[b]->R) + "^3");
    }
    for (std::size_t i = 0; i < vol; ++i) x[b * vol + i] = grids[b]->bits[i] ? 1.0f : 0.0f;
  }
  return x;
}

void check_names(const ClassifierConfig& cfg, const std::vector<std::string>& names) {
  cfg.validate();
  if (static_cast<int>(names.size()) != cfg.num_classes) {
    throw std::invalid_argument("classifier: " + std::to_string(names.size()) + " class names for " +
                                std::to_string(cfg.num_classes) + " classes");
  }
}

}  // namespace

template <typename T>
ParamStore<T> init_classifier_params(const ClassifierConfig& cfg, const std::vector<std::string>& class_names,
                                     std::uint64_t seed) {
  check_names(cfg, class_names);
  std::mt19937_64 rng(nn::derive_seed(seed, 0xC1A5));
  ParamStore<T> ps;
  int cin = 1;
  for (int s = 0; s < 3; ++s) {
    const int co = cfg.width << s;
    nn::add_conv(ps, "cls.conv" + std::to_string(s), co, cin, 3, rng);
    cin = co;
  }
  // head rows are seeded by class name, so relabeling classes permutes the initial head
  const int side = cfg.R / 8, fan_in = cin * side * side * side;
  Tensor<T> head({cfg.num_classes, fan_in});
  for (int k = 0; k < cfg.num_classes; ++k) {
    std::mt19937_64 row_rng(nn::derive_seed(seed, cond::caption_key(class_names[static_cast<std::size_t>(k)])));
    auto row = nn::uniform_init<T>({1, fan_in}, fan_in, row_rng, 1.0);
    std::copy(row.data.begin(), row.data.end(), head.data.begin() + static_cast<std::ptrdiff_t>(k) * fan_in);
  }
  ps.add("cls.head.weight", std::move(head));
  ps.add("cls.head.bias", Tensor<T>({cfg.num_classes}));
  return ps;
}

template <typename T>
Var<T> classifier_forward(const ClassifierConfig& cfg, const ParamStore<T>& ps, const Var<T>& x) {
  if (x.value().rank() != 5 || x.dim(1) != 1 || x.dim(2) != cfg.R) {
    throw std::invalid_argument("classifier: expected (B, 1, " + std::to_string(cfg.R) + ", ...) input, got " +
                                nn::shape_to_string(x.shape()));
  }
  Var<T> h = x;
  for (int s = 0; s < 3; ++s) h = nn::silu(nn::apply_conv(ps, "cls.conv" + std::to_string(s), h, 2, 1));
  const int B = x.dim(0);
  h = nn::reshape(h, {B, static_cast<int>(h.value().numel() / B)});
  return nn::apply_linear(ps, "cls.head", h);
}

template ParamStore<float> init_classifier_params<float>(const ClassifierConfig&, const std::vector<std::string>&,
                                                         std::uint64_t);
template ParamStore<double> init_classifier_params<double>(const ClassifierConfig&, const std::vector<std::string>&,
                                                           std::uint64_t);
template Var<float> classifier_forward<float>(const ClassifierConfig&, const ParamStore<float>&, const Var<float>&);
template Var<double> classifier_forward<double>(const ClassifierConfig&, const ParamStore<double>&, const Var<double>&);

VoxelClassifier::VoxelClassifier(ClassifierConfig cfg, std::vector<std::string> class_names, std::uint64_t seed)
    : VoxelClassifier(cfg, class_names, init_classifier_params<float>(cfg, class_names, seed)) {}

VoxelClassifier::VoxelClassifier(ClassifierConfig cfg, std::vector<std::string> class_names, ParamStore<float> params)
    : cfg_(cfg), names_(std::move(class_names)), params_(std::move(params)) {
  check_names(cfg_, names_);
}

std::vector<float> VoxelClassifier::logits(const OccupancyGrid& g) const {
  nn::NoGradGuard guard;
  return classifier_forward(cfg_, params_, nn::constant(stack_occupancy({&g}, cfg_.R))).value().data;
}

std::vector<double> VoxelClassifier::probabilities(const OccupancyGrid& g) const {
  const auto l = logits(g);
  const float mx = *std::max_element(l.begin(), l.end());
  std::vector<double> p(l.size());
  double sum = 0;
  for (std::size_t i = 0; i < l.size(); ++i) sum += p[i] = std::exp(static_cast<double>(l[i]) - mx);
  for (auto& v : p) v /= sum;
  return p;
}

int VoxelClassifier::predict(const OccupancyGrid& g) const {
  const auto l = logits(g);
  return static_cast<int>(std::max_element(l.begin(), l.end()) - l.begin());
}

int VoxelClassifier::class_index(const std::string& name) const {
  auto it = std::find(names_.begin(), names_.end(), name);
  return it == names_.end() ? -1 : static_cast<int>(it - names_.begin());
}

VoxelClassifier train_toy_classifier(const LabeledGrids& train, const std::vector<std::string>& class_names,
                                     const ClassifierConfig& cfg, const ClassifierTrainConfig& tc,
                                     const LabeledGrids* heldout, ClassifierTrainResult* result) {
  check_names(cfg, class_names);
  if (train.grids.size() != train.labels.size()) throw std::invalid_argument("train_toy_classifier: grids and labels differ in count");
  std::vector<int> per_class(static_cast<std::size_t>(cfg.num_classes), 0);
  for (int l : train.labels) {
    if (l < 0 || l >= cfg.num_classes) throw std::invalid_argument("train_toy_classifier: label " + std::to_string(l) + " out of range");
    ++per_class[static_cast<std::size_t>(l)];
  }
  const int present = static_cast<int>(std::count_if(per_class.begin(), per_class.end(), [](int c) { return c > 0; }));
  if (present < 2) throw std::invalid_argument("train_toy_classifier: need samples from at least two classes");
  for (int k = 0; k < cfg.num_classes; ++k) {
    if (per_class[static_cast<std::size_t>(k)] == 0) {
      throw std::invalid_argument("train_toy_classifier: class '" + class_names[static_cast<std::size_t>(k)] + "' has no samples");
    }
  }
  if (tc.epochs < 1 || tc.batch_size < 1) throw std::invalid_argument("train_toy_classifier: epochs and batch size must be positive");

  VoxelClassifier c(cfg, class_names, tc.seed);
  const int n = static_cast<int>(train.grids.size());
  const int steps = (n + tc.batch_size - 1) / tc.batch_size;
  nn::Adam opt(c.params(), nn::AdamConfig{.lr = tc.lr, .total_steps = static_cast<std::int64_t>(steps) * tc.epochs});
  std::mt19937_64 rng(nn::derive_seed(tc.seed, 0x7C));
  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  ClassifierTrainResult local;
  for (int e = 0; e < tc.epochs; ++e) {
    std::shuffle(order.begin(), order.end(), rng);
    double sum = 0;
    for (int s = 0; s < steps; ++s) {
      const int lo = s * tc.batch_size, hi = std::min(n, lo + tc.batch_size);
      std::vector<const OccupancyGrid*> batch;
      std::vector<int> labels;
      for (int i = lo; i < hi; ++i) {
        batch.push_back(&train.grids[order[i]]);
        labels.push_back(train.labels[order[i]]);
      }
      auto loss = nn::cross_entropy(classifier_forward(cfg, c.params(), nn::constant(stack_occupancy(batch, cfg.R))),
                                    std::span<const int>(labels));
      const double v = loss.value()[0];
      if (!std::isfinite(v)) throw std::runtime_error("train_toy_classifier: non-finite loss");
      nn::backward(loss);
      opt.step();
      sum += v * (hi - lo);
    }
    local.loss_curve.push_back(sum / n);
  }
  if (heldout && !heldout->grids.empty()) local.heldout_accuracy = accuracy(heldout->grids, heldout->labels, c);
  if (result) *result = std::move(local);
  return c;
}

double accuracy(const std::vector<int>& predicted, const std::vector<int>& intended) {
  if (predicted.empty()) throw std::invalid_argument("accuracy: empty sample list");
  if (predicted.size() != intended.size()) throw std::invalid_argument("accuracy: predictions and labels differ in count");
  std::size_t hit = 0;
  for (std::size_t i = 0; i < predicted.size(); ++i) hit += predicted[i] == intended[i];
  return 100.0 * static_cast<double>(hit) / static_cast<double>(predicted.size());
}

double accuracy(const std::vector<OccupancyGrid>& generated, const std::vector<int>& intended, const VoxelClassifier& c) {
  if (generated.empty()) throw std::invalid_argument("accuracy: empty sample list");
  std::vector<int> pred;
  pred.reserve(generated.size());
  for (const auto& g : generated) {
    if (g.R != c.config().R) {
      throw std::invalid_argument("accuracy: classifier resolution " + std::to_string(c.config().R) +
                                  " does not match grid resolution " + std::to_string(g.R));
    }
    pred.push_back(c.predict(g));
  }
  return accuracy(pred, intended);
}

std::vector<std::vector<int>> confusion_matrix(const VoxelClassifier& c, const LabeledGrids& data) {
  const auto K = static_cast<std::size_t>(c.config().num_classes);
  std::vector<std::vector<int>> m(K, std::vector<int>(K, 0));
  for (std::size_t i = 0; i < data.grids.size(); ++i) ++m.at(static_cast<std::size_t>(data.labels[i]))[static_cast<std::size_t>(c.predict(data.grids[i]))];
  return m;
}

void save_classifier(const VoxelClassifier& c, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  nlohmann::json j;
  j["kind"] = "classifier";
  j["format_version"] = 1;
  j["R"] = c.config().R;
  j["num_classes"] = c.config().num_classes;
  j["width"] = c.config().width;
  j["class_names"] = c.class_names();
  std::ofstream os(dir / "manifest.json");
  if (!os) throw std::runtime_error("cannot write " + (dir / "manifest.json").string());
  os << j.dump(2) << '\n';
  nn::save_weights(c.params(), dir / "weights.bin");
}

VoxelClassifier load_classifier(const std::filesystem::path& dir) {
  std::ifstream is(dir / "manifest.json");
  if (!is) throw std::runtime_error("cannot open " + (dir / "manifest.json").string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error((dir / "manifest.json").string() + ": " + e.what());
  }
  if (j.value("kind", "") != "classifier") throw std::runtime_error(dir.string() + " is not a classifier checkpoint");
  ClassifierConfig cfg{j.at("R"), j.at("num_classes"), j.at("width")};
  VoxelClassifier c(cfg, j.at("class_names").get<std::vector<std::string>>(), std::uint64_t{0});
  nn::load_weights(c.params(), dir / "weights.bin");
  return c;
}

void ScorerRegistry::add(const std::string& name, Scorer s) {
  if (!s) throw std::invalid_argument("scorer '" + name + "' is empty");
  scorers_[name] = std::move(s);
}

std::vector<std::string> ScorerRegistry::names() const {
  std::vector<std::string> out;
  for (const auto& [k, v] : scorers_) out.push_back(k);
  return out;
}

double ScorerRegistry::score(const std::string& name, const geometry::TsdfGrid& shape, const std::string& caption) const {
  auto it = scorers_.find(name);
  if (it == scorers_.end()) throw std::invalid_argument("no scorer registered under '" + name + "'");
  return it->second(shape, caption);
}

Scorer classifier_scorer(const VoxelClassifier& c) {
  return [&c](const geometry::TsdfGrid& shape, const std::string& caption) {
    int label = -1;
    for (const auto& w : cond::tokenize(caption)) {
      label = c.class_index(w);
      if (label >= 0) break;
    }
    if (label < 0) throw std::invalid_argument("caption '" + caption + "' names no known category");
    return c.probabilities(geometry::to_occupancy(shape, c.config().R))[static_cast<std::size_t>(label)];
  };
}

nlohmann::json MetricsReport::to_json() const {
  nlohmann::json j;
  j["format_version"] = 1;
  j["iou_mean"] = iou_mean ? nlohmann::json(*iou_mean) : nlohmann::json(nullptr);
  j["acc"] = acc;
  j["tmd"] = tmd ? nlohmann::json(*tmd) : nlohmann::json(nullptr);
  j["scorer"] = scorer;
  j["scorer_value"] = scorer_value ? nlohmann::json(*scorer_value) : nlohmann::json(nullptr);
  j["config_digest"] = config_digest;
  auto rows = nlohmann::json::array();
  for (const auto& s : samples) {
    rows.push_back({{"file", s.file},
                    {"caption", s.caption},
                    {"intended", s.intended},
                    {"predicted", s.predicted},
                    {"iou", s.iou ? nlohmann::json(*s.iou) : nlohmann::json(nullptr)},
                    {"score", s.score ? nlohmann::json(*s.score) : nlohmann::json(nullptr)}});
  }
  j["samples"] = rows;
  return j;
}

}  // namespace vsdf::eval
