// vsdf: command-line front end for the whole pipeline. Every command reads a
// run config (file + --set overrides) and writes a run record next to its
// outputs. Convenience flags such as --k or --seed are turned into config
// overrides, so the recorded config alone is enough to replay a run.

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

#include "CLI11.hpp"
#include "json.hpp"
#include "vsdf/common/log.hpp"
#include "vsdf/data/dataset.hpp"
#include "vsdf/data/run_config.hpp"
#include "vsdf/geometry/mesh.hpp"
#include "vsdf/tasks/tasks.hpp"

namespace fs = std::filesystem;
using namespace vsdf;
using data::ConfigError;
using data::RunConfig;

namespace {

// Raised for bad flag combinations found after parsing; exit code 2.
struct UsageError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct Common {
  std::string config;
  std::vector<std::string> sets;
  std::string record;
  bool quiet = false;
};

// Set by `replay`: the recorded config replaces --config/--set.
std::optional<RunConfig> g_forced;

void add_common(CLI::App* sc, Common& c) {
  sc->add_option("--config", c.config, "run config file (INI)");
  sc->add_option("--set", c.sets, "override, section.key=value (repeatable)");
  sc->add_option("--record", c.record, "run record path");
  sc->add_flag("--quiet", c.quiet, "only errors on stderr");
}

RunConfig resolve_config(const Common& c, const std::vector<std::string>& extra) {
  if (g_forced) return *g_forced;
  std::vector<std::string> all = c.sets;
  all.insert(all.end(), extra.begin(), extra.end());
  return c.config.empty() ? data::parse_run_config("", all) : data::load_run_config(c.config, all);
}

fs::path manifest_path(const std::string& p) {
  fs::path path(p);
  return fs::is_directory(path) ? path / "manifest.jsonl" : path;
}

class Run {
 public:
  Run(std::string command, std::vector<std::string> argv, const RunConfig& cfg)
      : start_(std::chrono::steady_clock::now()) {
    rec_.command = std::move(command);
    rec_.argv = std::move(argv);
    rec_.config_ini = cfg.to_ini();
    rec_.config_digest = cfg.digest();
    rec_.version = data::version_string();
  }
  void seed(const std::string& name, std::uint64_t s) { rec_.seeds[name] = s; }
  void output(const fs::path& p) {
    if (fs::is_directory(p)) {
      std::vector<fs::path> files;
      for (const auto& e : fs::recursive_directory_iterator(p))
        if (e.is_regular_file() && !e.path().filename().string().ends_with(".run.json")) files.push_back(e.path());
      std::sort(files.begin(), files.end());
      for (const auto& f : files) output(f);
      return;
    }
    rec_.outputs[p.lexically_normal().generic_string()] = data::file_digest(p);
  }
  void finish(const fs::path& path) {
    rec_.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    data::write_run_record(rec_, path);
    log::info("run record: " + path.string());
  }

 private:
  data::RunRecord rec_;
  std::chrono::steady_clock::time_point start_;
};

// Directory outputs get <dir>/<command>.run.json, since several commands may
// share a directory; file outputs get <file>.run.json.
fs::path record_path(const Common& c, const fs::path& primary, std::string command) {
  if (!c.record.empty()) return c.record;
  std::replace(command.begin(), command.end(), ' ', '-');
  if (fs::is_directory(primary)) return primary / (command + ".run.json");
  return fs::path(primary.string() + ".run.json");
}

std::vector<geometry::TsdfGrid> grids_of(const std::vector<data::LoadedShape>& shapes) {
  std::vector<geometry::TsdfGrid> out;
  for (const auto& s : shapes) out.push_back(s.grid);
  return out;
}

std::vector<data::LoadedShape> heldout_shapes(const data::DatasetManifest& m) {
  auto out = data::load_shapes(m, "val");
  for (auto& s : data::load_shapes(m, "test")) out.push_back(std::move(s));
  return out;
}

void check_dataset_D(const data::DatasetManifest& m, const RunConfig& cfg) {
  if (m.D != cfg.ae.D) {
    throw std::runtime_error("dataset was built at D=" + std::to_string(m.D) + " but geometry.D is " +
                             std::to_string(cfg.ae.D));
  }
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

// Label of the first category word in the caption, -1 if none.
int caption_label(const std::string& caption, const std::vector<std::string>& names) {
  for (const auto& w : cond::tokenize(caption)) {
    auto it = std::find(names.begin(), names.end(), w);
    if (it != names.end()) return static_cast<int>(it - names.begin());
  }
  return -1;
}

eval::LabeledGrids labeled(const std::vector<data::LoadedShape>& shapes, const std::vector<std::string>& names, int R) {
  eval::LabeledGrids out;
  for (const auto& s : shapes) {
    const auto& cat = data::all_categories().at(static_cast<std::size_t>(s.label));
    auto it = std::find(names.begin(), names.end(), cat);
    if (it == names.end()) continue;
    out.grids.push_back(geometry::to_occupancy(s.grid, R));
    out.labels.push_back(static_cast<int>(it - names.begin()));
  }
  return out;
}

// --------------------------------------------------------------- commands

struct DatasetOpts {
  Common c;
  std::string out;
  std::optional<int> n;
  std::optional<std::uint64_t> seed;
};

void cmd_dataset(const DatasetOpts& o, const std::vector<std::string>& argv) {
  std::vector<std::string> extra;
  if (o.n) extra.push_back("data.n_shapes=" + std::to_string(*o.n));
  if (o.seed) extra.push_back("data.seed=" + std::to_string(*o.seed));
  const auto cfg = resolve_config(o.c, extra);
  Run run("dataset build", argv, cfg);
  auto m = data::build_procedural_dataset(cfg.data.n_shapes, cfg.data.categories, cfg.ae.D, cfg.data.seed, o.out);
  run.seed("data", cfg.data.seed);
  run.output(o.out);
  std::cout << "dataset: " << m.entries.size() << " shapes at D=" << cfg.ae.D << " in " << o.out << '\n';
  run.finish(record_path(o.c, o.out, "dataset build"));
}

struct VoxelizeOpts {
  Common c;
  std::string mesh, out;
  bool open = false, keep_frame = false;
};

void cmd_voxelize(const VoxelizeOpts& o, const std::vector<std::string>& argv) {
  const auto cfg = resolve_config(o.c, {});
  Run run("voxelize", argv, cfg);
  auto mesh = geometry::read_obj(o.mesh);
  auto g = geometry::voxelize_mesh(mesh, cfg.ae.D, cfg.ae.truncation(),
                                   {.normalize = !o.keep_frame, .allow_open_mesh_sign = o.open});
  geometry::save_tsdf(g, o.out);
  run.output(o.out);
  std::cout << "voxelized " << mesh.faces.size() << " faces into " << o.out << '\n';
  run.finish(record_path(o.c, o.out, "voxelize"));
}

struct TrainAeOpts {
  Common c;
  std::string data, out;
};

void cmd_train_ae(const TrainAeOpts& o, const std::vector<std::string>& argv) {
  const auto cfg = resolve_config(o.c, {});
  Run run("train-ae", argv, cfg);
  auto m = data::load_manifest(manifest_path(o.data));
  check_dataset_D(m, cfg);
  auto train = grids_of(data::load_shapes(m, "train"));
  if (train.empty()) throw std::runtime_error("dataset has no training shapes");
  ae::AeTrainLog tl;
  auto model = ae::train_autoencoder(train, cfg.ae, cfg.ae_train, &tl, [](int e, double total, double recon) {
    log::info("epoch " + std::to_string(e) + " loss " + fmt("%.5f", total) + " recon " + fmt("%.5f", recon));
  });
  ae::save_autoencoder(model, {cfg.ae_train.seed, cfg.ae_train.epochs, tl}, o.out);
  run.seed("autoencoder", cfg.ae_train.seed);
  run.output(o.out);

  const auto held = heldout_shapes(m);
  if (!held.empty()) {
    double total = 0;
    for (const auto& s : held)
      total += eval::iou(geometry::to_occupancy(s.grid, cfg.ae.D), geometry::to_occupancy(model.reconstruct(s.grid), cfg.ae.D));
    std::cout << "held-out reconstruction IoU " << fmt("%.4f", total / static_cast<double>(held.size())) << '\n';
  }
  run.finish(record_path(o.c, o.out, "train-ae"));
}

struct CalibrateOpts {
  Common c;
  std::string ae, data, out;
};

void cmd_calibrate(const CalibrateOpts& o, const std::vector<std::string>& argv) {
  const auto cfg = resolve_config(o.c, {});
  Run run("calibrate-scale", argv, cfg);
  ae::AeCheckpointInfo info;
  auto model = ae::load_autoencoder(o.ae, &info);
  auto m = data::load_manifest(manifest_path(o.data));
  check_dataset_D(m, cfg);
  model.scale_factor = ae::compute_scale_factor(grids_of(data::load_shapes(m, "train")), model, cfg.scale_seed);
  const std::string out = o.out.empty() ? o.ae : o.out;
  ae::save_autoencoder(model, info, out);
  run.seed("scale", cfg.scale_seed);
  run.output(out);
  std::cout << "scale factor " << model.scale_factor << '\n';
  run.finish(record_path(o.c, out, "calibrate-scale"));
}

struct TrainDiffOpts {
  Common c;
  std::string ae, data, out;
  bool plain_unet = false;
};

void cmd_train_diffusion(const TrainDiffOpts& o, const std::vector<std::string>& argv) {
  std::vector<std::string> extra;
  if (o.plain_unet && !g_forced) {
    // same parameter budget without the inner network
    const auto base = resolve_config(o.c, {});
    extra = {"denoiser.inner=false",
             "denoiser.base_width=" + std::to_string(denoiser::matched_unet_width(base.model.denoiser))};
  }
  const auto cfg = resolve_config(o.c, extra);
  Run run("train-diffusion", argv, cfg);
  auto a = ae::load_autoencoder(o.ae);
  if (a.scale_factor == 1.0f) log::warn("autoencoder scale factor is 1; was calibrate-scale run?");
  auto m = data::load_manifest(manifest_path(o.data));
  auto shapes = data::load_shapes(m, "train");
  if (shapes.empty()) throw std::runtime_error("dataset has no training shapes");
  std::vector<std::string> all_captions;
  std::vector<std::vector<std::string>> captions;
  for (const auto& s : shapes) {
    captions.push_back(s.captions);
    all_captions.insert(all_captions.end(), s.captions.begin(), s.captions.end());
  }
  tasks::DiffusionModel model(cfg.model, cond::Vocabulary::build(all_captions), tasks::latent_spec_of(a),
                              cfg.diffusion_train.seed);
  log::info("denoiser parameters: " + std::to_string(denoiser::count_params(cfg.model.denoiser)));
  auto examples = tasks::encode_examples(a, grids_of(shapes), captions);
  auto losses = tasks::train_diffusion(model, examples, cfg.diffusion_train, [](int e, double loss) {
    log::info("epoch " + std::to_string(e) + " loss " + fmt("%.5f", loss));
  });
  tasks::save_diffusion(model, {cfg.diffusion_train.seed, cfg.diffusion_train.epochs, losses}, o.out);
  run.seed("diffusion", cfg.diffusion_train.seed);
  run.output(o.out);
  std::cout << "diffusion loss " << fmt("%.5f", losses.front()) << " -> " << fmt("%.5f", losses.back()) << '\n';
  run.finish(record_path(o.c, o.out, "train-diffusion"));
}

struct ModelOpts {
  std::string ae, model, caption;
  std::optional<std::uint64_t> seed;
};

void add_model_opts(CLI::App* sc, ModelOpts& m) {
  sc->add_option("--ae", m.ae, "autoencoder checkpoint directory")->required();
  sc->add_option("--model", m.model, "diffusion checkpoint directory")->required();
  sc->add_option("--caption", m.caption, "text prompt (empty: unconditional)");
  sc->add_option("--seed", m.seed, "sampler seed (sampler.seed)");
}

std::vector<std::string> seed_override(const ModelOpts& m) {
  if (!m.seed) return {};
  return {"sampler.seed=" + std::to_string(*m.seed)};
}

struct GenerateOpts {
  Common c;
  ModelOpts m;
  std::optional<int> k;
  std::string out;
};

void cmd_generate(const GenerateOpts& o, const std::vector<std::string>& argv) {
  auto extra = seed_override(o.m);
  if (o.k) extra.push_back("tasks.k=" + std::to_string(*o.k));
  const auto cfg = resolve_config(o.c, extra);
  Run run("generate", argv, cfg);
  auto a = ae::load_autoencoder(o.m.ae);
  auto model = tasks::load_diffusion(o.m.model);
  tasks::GenerationRequest req{o.m.caption, cfg.task.k, {cfg.sampler}, cfg.sampler.seed};
  auto samples = tasks::generate(req, *model, a);
  fs::create_directories(o.out);
  nlohmann::json index;
  index["format_version"] = 1;
  index["caption"] = o.m.caption;
  index["seed"] = cfg.sampler.seed;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "sample_%03zu.tsdf", i);
    geometry::save_tsdf(samples[i].grid, fs::path(o.out) / name);
    index["files"].push_back(name);
  }
  std::ofstream(fs::path(o.out) / "samples.json") << index.dump(2) << '\n';
  run.seed("sampler", cfg.sampler.seed);
  run.output(o.out);
  std::cout << "generated " << samples.size() << " shapes for '" << o.m.caption << "' in " << o.out << '\n';
  run.finish(record_path(o.c, o.out, "generate"));
}

struct CompleteOpts {
  Common c;
  ModelOpts m;
  std::string partial, mask, out;
};

void cmd_complete(const CompleteOpts& o, const std::vector<std::string>& argv) {
  auto extra = seed_override(o.m);
  const bool preset = o.mask == "top-half" || o.mask == "bottom-half" || o.mask == "left-half";
  if (preset) extra.push_back("tasks.mask=" + o.mask);
  const auto cfg = resolve_config(o.c, extra);
  Run run("complete", argv, cfg);
  auto a = ae::load_autoencoder(o.m.ae);
  auto model = tasks::load_diffusion(o.m.model);
  const auto& ac = a.config();
  auto mask = (o.mask.empty() || preset) ? tasks::mask_preset(cfg.task.mask, ac.latent_side())
                                          : tasks::load_mask(o.mask, ac.D, ac.P);
  auto partial = geometry::load_tsdf(o.partial);
  auto r = tasks::complete_shape(partial, mask, o.m.caption, {cfg.sampler}, *model, a);
  geometry::save_tsdf(r.grid, o.out);
  run.seed("sampler", cfg.sampler.seed);
  run.output(o.out);
  std::cout << "completed " << mask.known() << " known of " << mask.bits.size() << " patches into " << o.out << '\n';
  run.finish(record_path(o.c, o.out, "complete"));
}

struct ManipulateOpts {
  Common c;
  ModelOpts m;
  std::string input, out;
  std::optional<int> t_mid;
};

void cmd_manipulate(const ManipulateOpts& o, const std::vector<std::string>& argv) {
  auto extra = seed_override(o.m);
  if (o.t_mid) extra.push_back("tasks.t_mid=" + std::to_string(*o.t_mid));
  const auto cfg = resolve_config(o.c, extra);
  Run run("manipulate", argv, cfg);
  auto a = ae::load_autoencoder(o.m.ae);
  auto model = tasks::load_diffusion(o.m.model);
  auto r = tasks::manipulate_shape(geometry::load_tsdf(o.input), o.m.caption, cfg.task.t_mid, {cfg.sampler}, *model, a);
  geometry::save_tsdf(r.grid, o.out);
  run.seed("sampler", cfg.sampler.seed);
  run.output(o.out);
  std::cout << "manipulated from t=" << r.t_start << " into " << o.out << '\n';
  run.finish(record_path(o.c, o.out, "manipulate"));
}

struct ExportOpts {
  Common c;
  std::string in, out;
  float iso = 0.0f;
};

void cmd_export(const ExportOpts& o, const std::vector<std::string>& argv) {
  const auto cfg = resolve_config(o.c, {});
  Run run("export-mesh", argv, cfg);
  auto mesh = geometry::extract_isosurface(geometry::load_tsdf(o.in), o.iso);
  if (mesh.faces.empty()) log::warn("isosurface is empty");
  geometry::write_obj(mesh, o.out);
  run.output(o.out);
  std::cout << mesh.vertices.size() << " vertices, " << mesh.faces.size() << " faces -> " << o.out << '\n';
  run.finish(record_path(o.c, o.out, "export-mesh"));
}

struct TrainClsOpts {
  Common c;
  std::string data, out;
};

void cmd_train_classifier(const TrainClsOpts& o, const std::vector<std::string>& argv) {
  const auto cfg = resolve_config(o.c, {});
  Run run("train-classifier", argv, cfg);
  auto m = data::load_manifest(manifest_path(o.data));
  check_dataset_D(m, cfg);
  const auto& names = cfg.data.categories;
  auto train = labeled(data::load_shapes(m, "train"), names, cfg.classifier.R);
  auto held = labeled(heldout_shapes(m), names, cfg.classifier.R);
  eval::ClassifierTrainResult res;
  auto c = eval::train_toy_classifier(train, names, cfg.classifier, cfg.classifier_train,
                                      held.grids.empty() ? nullptr : &held, &res);
  eval::save_classifier(c, o.out);
  run.seed("classifier", cfg.classifier_train.seed);
  run.output(o.out);
  if (res.heldout_accuracy >= 0) std::cout << "held-out accuracy " << fmt("%.2f", res.heldout_accuracy) << "%\n";
  run.finish(record_path(o.c, o.out, "train-classifier"));
}

struct EvalOpts {
  Common c;
  std::vector<std::string> samples;
  std::string classifier, ae, data, out;
};

void cmd_eval(const EvalOpts& o, const std::vector<std::string>& argv) {
  if (o.ae.empty() != o.data.empty()) throw UsageError("--ae and --data go together");
  const auto cfg = resolve_config(o.c, {});
  Run run("eval", argv, cfg);
  auto c = eval::load_classifier(o.classifier);
  eval::ScorerRegistry scorers;
  scorers.add(eval::kDefaultScorer, eval::classifier_scorer(c));
  eval::MetricsReport report;
  report.scorer = eval::kDefaultScorer;
  report.config_digest = cfg.digest();
  std::vector<int> predicted, intended;
  double tmd_sum = 0, score_sum = 0;
  int tmd_sets = 0, scored = 0;
  for (const auto& dir : o.samples) {
    std::ifstream is(fs::path(dir) / "samples.json");
    if (!is) throw std::runtime_error("cannot open " + (fs::path(dir) / "samples.json").string());
    const auto index = nlohmann::json::parse(is);
    const std::string caption = index.at("caption");
    const int label = caption_label(caption, c.class_names());
    std::vector<geometry::OccupancyGrid> set;
    for (const auto& f : index.at("files")) {
      const auto path = fs::path(dir) / f.get<std::string>();
      auto g = geometry::load_tsdf(path);
      auto occ = geometry::to_occupancy(g, c.config().R);
      eval::SampleRecord rec{path.generic_string(), caption, label, c.predict(occ), std::nullopt, std::nullopt};
      if (label >= 0) {
        rec.score = scorers.score(eval::kDefaultScorer, g, caption);
        score_sum += *rec.score;
        ++scored;
        predicted.push_back(rec.predicted);
        intended.push_back(label);
      }
      set.push_back(std::move(occ));
      report.samples.push_back(std::move(rec));
    }
    if (set.size() >= 2) {
      tmd_sum += eval::tmd(set);
      ++tmd_sets;
    }
  }
  if (intended.empty()) throw std::runtime_error("no sample caption names a category the classifier knows");
  report.acc = eval::accuracy(predicted, intended);
  if (tmd_sets) report.tmd = tmd_sum / tmd_sets;
  if (scored) report.scorer_value = score_sum / scored;
  if (!o.ae.empty()) {
    auto a = ae::load_autoencoder(o.ae);
    auto held = heldout_shapes(data::load_manifest(manifest_path(o.data)));
    if (held.empty()) throw std::runtime_error("dataset has no held-out shapes");
    double total = 0;
    const int D = a.config().D;
    for (const auto& s : held) total += eval::iou(geometry::to_occupancy(s.grid, D), geometry::to_occupancy(a.reconstruct(s.grid), D));
    report.iou_mean = total / static_cast<double>(held.size());
  }
  const std::string out = o.out.empty() ? "metrics.json" : o.out;
  if (fs::path(out).has_parent_path()) fs::create_directories(fs::path(out).parent_path());
  std::ofstream(out) << report.to_json().dump(2) << '\n';
  run.output(out);
  std::cout << "Acc " << fmt("%.2f", report.acc) << "%";
  if (report.tmd) std::cout << "  TMD " << fmt("%.4f", *report.tmd);
  if (report.iou_mean) std::cout << "  IoU " << fmt("%.4f", *report.iou_mean);
  std::cout << "  -> " << out << '\n';
  run.finish(record_path(o.c, out, "eval"));
}

struct InspectOpts {
  Common c;
  std::string dir;
};

void cmd_inspect(const InspectOpts& o, const std::vector<std::string>& argv) {
  std::ifstream is(fs::path(o.dir) / "manifest.json");
  if (!is) throw std::runtime_error("cannot open " + (fs::path(o.dir) / "manifest.json").string());
  auto j = nlohmann::json::parse(is);
  // curves are long; show their ends
  for (auto& [key, v] : j.items()) {
    if (v.is_array() && v.size() > 4 && v.front().is_number()) v = nlohmann::json{v.front(), "...", v.back()};
  }
  std::cout << j.dump(2) << '\n';
  const auto weights = fs::path(o.dir) / "weights.bin";
  if (fs::exists(weights))
    std::cout << "weights.bin " << fs::file_size(weights) << " bytes, fnv1a64 " << data::file_digest(weights) << '\n';
  if (!o.c.record.empty()) {
    Run run("inspect-checkpoint", argv, resolve_config(o.c, {}));
    run.finish(o.c.record);
  }
}

int dispatch(const std::vector<std::string>& args, bool replaying);

struct ReplayOpts {
  std::string record;
  bool no_check = false;
  bool quiet = false;
};

int cmd_replay(const ReplayOpts& o) {
  auto rec = data::read_run_record(o.record);
  if (rec.command == "replay") throw UsageError("cannot replay a replay");
  g_forced = data::parse_run_config(rec.config_ini);
  if (g_forced->digest() != rec.config_digest) log::warn("recorded config digest does not match its text");
  // the recorded run writes a fresh record; keep the original safe
  std::vector<std::string> args = rec.argv;
  args.push_back("--record");
  args.push_back(fs::path(o.record).string() + ".replay.json");
  const int code = dispatch(args, true);
  if (code != 0 || o.no_check) return code;
  int mismatches = 0;
  for (const auto& [path, digest] : rec.outputs) {
    const bool ok = fs::exists(path) && data::file_digest(path) == digest;
    if (!ok) {
      std::cerr << "replay: " << path << " differs from the recorded run\n";
      ++mismatches;
    }
  }
  std::cout << "replay: " << rec.outputs.size() - mismatches << " of " << rec.outputs.size() << " outputs identical\n";
  return mismatches ? 1 : 0;
}

int dispatch(const std::vector<std::string>& args, bool replaying) {
  CLI::App app{"vsdf: text-to-shape diffusion over patch-wise TSDF latents"};
  app.set_version_flag("--version", data::version_string());
  app.require_subcommand(1);

  DatasetOpts dso;
  auto* dataset = app.add_subcommand("dataset", "procedural dataset tools");
  dataset->require_subcommand(1);
  auto* dsb = dataset->add_subcommand("build", "write procedural TSDF shapes and a manifest");
  add_common(dsb, dso.c);
  dsb->add_option("--out", dso.out, "output directory")->required();
  dsb->add_option("--n", dso.n, "number of shapes (data.n_shapes)");
  dsb->add_option("--seed", dso.seed, "dataset seed (data.seed)");

  VoxelizeOpts vxo;
  auto* vx = app.add_subcommand("voxelize", "OBJ mesh to TSDF grid at geometry.D");
  add_common(vx, vxo.c);
  vx->add_option("--mesh", vxo.mesh, "input .obj")->required()->check(CLI::ExistingFile);
  vx->add_option("--out", vxo.out, "output .tsdf")->required();
  vx->add_flag("--open", vxo.open, "sign an open mesh by winding number anyway");
  vx->add_flag("--keep-frame", vxo.keep_frame, "do not recenter or rescale the mesh");

  TrainAeOpts tao;
  auto* tae = app.add_subcommand("train-ae", "train the patch autoencoder");
  add_common(tae, tao.c);
  tae->add_option("--data", tao.data, "dataset directory or manifest")->required();
  tae->add_option("--out", tao.out, "checkpoint directory")->required();

  CalibrateOpts cso;
  auto* cs = app.add_subcommand("calibrate-scale", "set the latent scale factor from the training set");
  add_common(cs, cso.c);
  cs->add_option("--ae", cso.ae, "autoencoder checkpoint")->required();
  cs->add_option("--data", cso.data, "dataset directory or manifest")->required();
  cs->add_option("--out", cso.out, "write here instead of updating --ae");

  TrainDiffOpts tdo;
  auto* td = app.add_subcommand("train-diffusion", "train the text-conditioned latent denoiser");
  add_common(td, tdo.c);
  td->add_option("--ae", tdo.ae, "calibrated autoencoder checkpoint")->required();
  td->add_option("--data", tdo.data, "dataset directory or manifest")->required();
  td->add_option("--out", tdo.out, "checkpoint directory")->required();
  td->add_flag("--plain-unet", tdo.plain_unet, "no inner network, width matched to the same parameter budget");

  GenerateOpts go;
  auto* gen = app.add_subcommand("generate", "text-to-shape sampling");
  add_common(gen, go.c);
  add_model_opts(gen, go.m);
  gen->add_option("--k", go.k, "samples (tasks.k)");
  gen->add_option("--out", go.out, "output directory")->required();

  CompleteOpts co;
  auto* comp = app.add_subcommand("complete", "text-guided completion of a partial shape");
  add_common(comp, co.c);
  add_model_opts(comp, co.m);
  comp->add_option("--partial", co.partial, "partial shape .tsdf")->required()->check(CLI::ExistingFile);
  comp->add_option("--mask", co.mask, "top-half, bottom-half, left-half or a mask file (default tasks.mask)");
  comp->add_option("--out", co.out, "output .tsdf")->required();

  ManipulateOpts mo;
  auto* man = app.add_subcommand("manipulate", "text-guided editing by partial noising");
  add_common(man, mo.c);
  add_model_opts(man, mo.m);
  man->add_option("--input", mo.input, "initial shape .tsdf")->required()->check(CLI::ExistingFile);
  man->add_option("--t-mid", mo.t_mid, "noising depth in schedule steps (tasks.t_mid)");
  man->add_option("--out", mo.out, "output .tsdf")->required();

  ExportOpts eo;
  auto* ex = app.add_subcommand("export-mesh", "marching cubes to OBJ");
  add_common(ex, eo.c);
  ex->add_option("--in", eo.in, "input .tsdf")->required()->check(CLI::ExistingFile);
  ex->add_option("--out", eo.out, "output .obj")->required();
  ex->add_option("--iso", eo.iso, "iso level");

  TrainClsOpts tco;
  auto* tc = app.add_subcommand("train-classifier", "train the voxel classifier used by eval");
  add_common(tc, tco.c);
  tc->add_option("--data", tco.data, "dataset directory or manifest")->required();
  tc->add_option("--out", tco.out, "checkpoint directory")->required();

  EvalOpts evo;
  auto* ev = app.add_subcommand("eval", "Acc, TMD, scorer and optional reconstruction IoU");
  add_common(ev, evo.c);
  ev->add_option("--samples", evo.samples, "generate output directories")->required();
  ev->add_option("--classifier", evo.classifier, "classifier checkpoint")->required();
  ev->add_option("--ae", evo.ae, "autoencoder for held-out reconstruction IoU");
  ev->add_option("--data", evo.data, "dataset for held-out reconstruction IoU");
  ev->add_option("--out", evo.out, "metrics JSON (default metrics.json)");

  InspectOpts io;
  auto* ins = app.add_subcommand("inspect-checkpoint", "print a checkpoint manifest");
  add_common(ins, io.c);
  ins->add_option("dir", io.dir, "checkpoint directory")->required()->check(CLI::ExistingDirectory);

  ReplayOpts ro;
  auto* rp = app.add_subcommand("replay", "re-run a recorded command with its recorded config");
  rp->add_option("record", ro.record, "run record JSON")->required()->check(CLI::ExistingFile);
  rp->add_flag("--no-check", ro.no_check, "skip the output digest comparison");
  rp->add_flag("--quiet", ro.quiet, "only errors on stderr");

  std::vector<std::string> rev(args.rbegin(), args.rend());
  try {
    app.parse(rev);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }
  if (rp->parsed() && replaying) throw UsageError("cannot replay a replay");

  std::vector<Common*> commons{&dso.c, &vxo.c, &tao.c, &cso.c, &tdo.c, &go.c, &co.c, &mo.c, &eo.c, &tco.c, &evo.c, &io.c};
  for (auto* c : commons)
    if (c->quiet) log::set_level(log::Level::quiet);
  if (ro.quiet) log::set_level(log::Level::quiet);

  if (dsb->parsed()) cmd_dataset(dso, args);
  else if (vx->parsed()) cmd_voxelize(vxo, args);
  else if (tae->parsed()) cmd_train_ae(tao, args);
  else if (cs->parsed()) cmd_calibrate(cso, args);
  else if (td->parsed()) cmd_train_diffusion(tdo, args);
  else if (gen->parsed()) cmd_generate(go, args);
  else if (comp->parsed()) cmd_complete(co, args);
  else if (man->parsed()) cmd_manipulate(mo, args);
  else if (ex->parsed()) cmd_export(eo, args);
  else if (tc->parsed()) cmd_train_classifier(tco, args);
  else if (ev->parsed()) cmd_eval(evo, args);
  else if (ins->parsed()) cmd_inspect(io, args);
  else if (rp->parsed()) return cmd_replay(ro);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  log::set_level(log::Level::info);
  const std::vector<std::string> args(argv + 1, argv + argc);
  try {
    return dispatch(args, false);
  } catch (const ConfigError& e) {
    std::cerr << "vsdf: " << e.what() << '\n';
    return 2;
  } catch (const UsageError& e) {
    std::cerr << "vsdf: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "vsdf: " << e.what() << '\n';
    return 1;
  }
}
