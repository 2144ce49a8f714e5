#include "vsdf/data/run_config.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <algorithm>
#include <charconv>
#include <cstdio>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>

#include "vsdf/data/dataset.hpp"

#ifndef VSDF_VERSION
#define VSDF_VERSION "0.1.0-unknown"
#endif

namespace vsdf::data {

namespace {

std::string fmt_double(double v) {
  char buf[64];
  auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

[[noreturn]] void bad_value(const std::string& key, const std::string& v, const std::string& what) {
  throw ConfigError(key + ": cannot parse '" + v + "' as " + what);
}

long long parse_int(const std::string& key, const std::string& v) {
  long long out = 0;
  auto r = std::from_chars(v.data(), v.data() + v.size(), out);
  if (r.ec != std::errc() || r.ptr != v.data() + v.size()) bad_value(key, v, "an integer");
  return out;
}

double parse_double(const std::string& key, const std::string& v) {
  double out = 0;
  auto r = std::from_chars(v.data(), v.data() + v.size(), out);
  if (r.ec != std::errc() || r.ptr != v.data() + v.size()) bad_value(key, v, "a number");
  return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  bad_value(key, v, "a boolean");
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n"), e = s.find_last_not_of(" \t\r\n");
  return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
}

struct Binding {
  std::string key;
  std::function<std::string()> get;
  std::function<void(const std::string&)> set;
};

Binding int_key(std::string key, int& ref) {
  return {key, [&ref] { return std::to_string(ref); },
          [key, &ref](const std::string& v) {
            const long long x = parse_int(key, v);
            if (x < INT32_MIN || x > INT32_MAX) bad_value(key, v, "a 32-bit integer");
            ref = static_cast<int>(x);
          }};
}

Binding u64_key(std::string key, std::uint64_t& ref) {
  return {key, [&ref] { return std::to_string(ref); },
          [key, &ref](const std::string& v) {
            std::uint64_t out = 0;
            auto r = std::from_chars(v.data(), v.data() + v.size(), out);
            if (r.ec != std::errc() || r.ptr != v.data() + v.size()) bad_value(key, v, "an unsigned integer");
            ref = out;
          }};
}

Binding double_key(std::string key, double& ref) {
  return {key, [&ref] { return fmt_double(ref); }, [key, &ref](const std::string& v) { ref = parse_double(key, v); }};
}

Binding float_key(std::string key, float& ref) {
  return {key, [&ref] { return fmt_double(ref); },
          [key, &ref](const std::string& v) { ref = static_cast<float>(parse_double(key, v)); }};
}

Binding bool_key(std::string key, bool& ref) {
  return {key, [&ref] { return ref ? std::string("true") : std::string("false"); },
          [key, &ref](const std::string& v) { ref = parse_bool(key, v); }};
}

Binding string_key(std::string key, std::string& ref) {
  return {key, [&ref] { return ref; }, [&ref](const std::string& v) { ref = v; }};
}

std::vector<Binding> bindings(RunConfig& c) {
  std::vector<Binding> b;
  b.push_back({"data.categories",
               [&c] {
                 std::string s;
                 for (std::size_t i = 0; i < c.data.categories.size(); ++i) s += (i ? "," : "") + c.data.categories[i];
                 return s;
               },
               [&c](const std::string& v) {
                 c.data.categories.clear();
                 std::stringstream ss(v);
                 std::string item;
                 while (std::getline(ss, item, ',')) {
                   item = trim(item);
                   if (!item.empty()) c.data.categories.push_back(item);
                 }
               }});
  b.push_back(int_key("data.n_shapes", c.data.n_shapes));
  b.push_back(u64_key("data.seed", c.data.seed));

  b.push_back(int_key("geometry.D", c.ae.D));
  b.push_back(int_key("geometry.P", c.ae.P));
  b.push_back(float_key("geometry.tau", c.ae.tau));

  b.push_back(int_key("autoencoder.c", c.ae.c));
  b.push_back(double_key("autoencoder.kl_weight", c.ae.kl_weight));
  b.push_back(int_key("autoencoder.enc_width", c.ae.enc_width));
  b.push_back(int_key("autoencoder.dec_width", c.ae.dec_width));
  b.push_back(int_key("autoencoder.dec_blocks", c.ae.dec_blocks));
  b.push_back(int_key("autoencoder.dec_channels", c.ae.dec_channels));
  b.push_back(int_key("autoencoder.epochs", c.ae_train.epochs));
  b.push_back(int_key("autoencoder.batch_size", c.ae_train.batch_size));
  b.push_back(double_key("autoencoder.lr", c.ae_train.lr));
  b.push_back(u64_key("autoencoder.seed", c.ae_train.seed));
  b.push_back(u64_key("autoencoder.scale_seed", c.scale_seed));

  b.push_back(int_key("schedule.T", c.model.schedule.T));
  b.push_back(double_key("schedule.beta_start", c.model.schedule.beta_start));
  b.push_back(double_key("schedule.beta_end", c.model.schedule.beta_end));

  auto& d = c.model.denoiser;
  b.push_back(int_key("denoiser.latent_side", d.latent_side));
  b.push_back(int_key("denoiser.in_channels", d.in_channels));
  b.push_back(int_key("denoiser.base_width", d.base_width));
  b.push_back(int_key("denoiser.depth", d.depth));
  b.push_back(bool_key("denoiser.inner", d.inner));
  b.push_back(int_key("denoiser.inner_blocks", d.inner_blocks));
  b.push_back(bool_key("denoiser.inner_attention", d.inner_attention));
  b.push_back(bool_key("denoiser.inout_concat", d.inout_concat));
  b.push_back(int_key("denoiser.time_embed_dim", d.time_embed_dim));
  b.push_back(int_key("denoiser.cond_embed_dim", d.cond_embed_dim));
  b.push_back(int_key("denoiser.num_heads", d.num_heads));

  b.push_back(string_key("conditioning.embedding_file", c.model.embedding_file));
  b.push_back(int_key("conditioning.length", c.model.text.length));
  b.push_back(int_key("conditioning.width", c.model.text.width));
  b.push_back(int_key("conditioning.blocks", c.model.text.blocks));
  b.push_back(int_key("conditioning.heads", c.model.text.heads));
  b.push_back(double_key("conditioning.p_uncond", c.diffusion_train.p_uncond));

  b.push_back(int_key("diffusion.epochs", c.diffusion_train.epochs));
  b.push_back(int_key("diffusion.batch_size", c.diffusion_train.batch_size));
  b.push_back(double_key("diffusion.lr", c.diffusion_train.lr));
  b.push_back(u64_key("diffusion.seed", c.diffusion_train.seed));

  b.push_back({"sampler.sampler", [&c] { return diffusion::sampler_name(c.sampler.sampler); },
               [&c](const std::string& v) {
                 try {
                   c.sampler.sampler = diffusion::parse_sampler(v);
                 } catch (const std::invalid_argument& e) {
                   throw ConfigError(std::string("sampler.sampler: ") + e.what());
                 }
               }});
  b.push_back(int_key("sampler.num_steps", c.sampler.num_steps));
  b.push_back(double_key("sampler.eta", c.sampler.eta));
  b.push_back(double_key("sampler.guidance_scale", c.sampler.guidance_scale));
  b.push_back(u64_key("sampler.seed", c.sampler.seed));

  b.push_back(int_key("classifier.R", c.classifier.R));
  b.push_back(int_key("classifier.width", c.classifier.width));
  b.push_back(int_key("classifier.epochs", c.classifier_train.epochs));
  b.push_back(int_key("classifier.batch_size", c.classifier_train.batch_size));
  b.push_back(double_key("classifier.lr", c.classifier_train.lr));
  b.push_back(u64_key("classifier.seed", c.classifier_train.seed));

  b.push_back(int_key("tasks.k", c.task.k));
  b.push_back(int_key("tasks.t_mid", c.task.t_mid));
  b.push_back(string_key("tasks.mask", c.task.mask));
  return b;
}

void apply(RunConfig& c, const std::string& key, const std::string& value, std::set<std::string>* seen) {
  for (auto& b : bindings(c)) {
    if (b.key == key) {
      b.set(trim(value));
      if (seen) seen->insert(key);
      return;
    }
  }
  throw ConfigError("unknown config key '" + key + "'");
}

std::pair<std::string, std::string> split_override(const std::string& o) {
  const auto eq = o.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + o + "' is not of the form section.key=value");
  return {trim(o.substr(0, eq)), o.substr(eq + 1)};
}

}  // namespace

RunConfig preset(const std::string& name) {
  RunConfig c;
  if (name == "desk") {
    c.ae.D = 32;
    c.ae.P = 4;
    c.ae_train.epochs = 40;
    c.ae_train.batch_size = 4;
    c.diffusion_train.epochs = 80;
  } else if (name == "full") {
    c.ae.D = 64;
    c.ae.P = 8;
    c.model.denoiser.base_width = 64;
    c.classifier.R = 32;
  } else {
    throw ConfigError("unknown preset '" + name + "' (desk, full)");
  }
  c.model.denoiser.latent_side = c.ae.D / c.ae.P;
  c.model.denoiser.in_channels = c.ae.c;
  c.classifier.num_classes = static_cast<int>(c.data.categories.size());
  return c;
}

void RunConfig::validate() const {
  std::vector<std::string> errs;
  auto need = [&errs](bool ok, const std::string& m) {
    if (!ok) errs.push_back(m);
  };
  const auto& d = model.denoiser;
  need(data.n_shapes >= 1, "data.n_shapes must be at least 1");
  need(!data.categories.empty(), "data.categories must not be empty");
  for (const auto& cat : data.categories) need(category_index(cat) >= 0, "data.categories: unknown category '" + cat + "'");
  need(std::set<std::string>(data.categories.begin(), data.categories.end()).size() == data.categories.size(),
       "data.categories: duplicate category");

  need(ae.D >= 8, "geometry.D must be at least 8");
  const bool p_divides = ae.P >= 1 && ae.D % ae.P == 0;
  need(p_divides, "geometry.P=" + std::to_string(ae.P) + " must divide geometry.D=" + std::to_string(ae.D));
  need(ae.tau >= 0.0f, "geometry.tau must be non-negative (0 selects 3 voxels)");
  need(ae.c >= 1, "autoencoder.c must be positive");
  need(ae.kl_weight >= 0.0, "autoencoder.kl_weight must be non-negative");
  need(ae.enc_width >= 1 && ae.dec_width >= 1 && ae.dec_channels >= 1 && ae.dec_blocks >= 0,
       "autoencoder widths must be positive");
  need(ae_train.epochs >= 1 && ae_train.batch_size >= 1, "autoencoder.epochs and batch_size must be positive");
  need(ae_train.lr > 0.0, "autoencoder.lr must be positive");

  if (p_divides) {
    need(d.latent_side == ae.D / ae.P, "denoiser.latent_side=" + std::to_string(d.latent_side) +
                                           " does not match geometry.D/geometry.P=" + std::to_string(ae.D / ae.P));
  }
  need(d.in_channels == ae.c, "denoiser.in_channels=" + std::to_string(d.in_channels) +
                                  " does not match autoencoder.c=" + std::to_string(ae.c));
  try {
    d.validate();
  } catch (const std::invalid_argument& e) {
    errs.push_back(std::string("denoiser: ") + e.what());
  }
  try {
    model.text.validate();
  } catch (const std::invalid_argument& e) {
    errs.push_back(std::string("conditioning: ") + e.what());
  }
  if (model.embedding_file.empty()) {
    need(model.text.width == d.cond_embed_dim, "conditioning.width=" + std::to_string(model.text.width) +
                                                   " does not match denoiser.cond_embed_dim=" +
                                                   std::to_string(d.cond_embed_dim));
  }

  const auto& s = model.schedule;
  need(s.T >= 1, "schedule.T must be positive");
  need(s.beta_start > 0.0 && s.beta_start <= s.beta_end && s.beta_end < 1.0,
       "schedule requires 0 < beta_start <= beta_end < 1");
  need(diffusion_train.epochs >= 1 && diffusion_train.batch_size >= 1, "diffusion.epochs and batch_size must be positive");
  need(diffusion_train.lr > 0.0, "diffusion.lr must be positive");
  need(diffusion_train.p_uncond >= 0.0 && diffusion_train.p_uncond <= 1.0, "conditioning.p_uncond must lie in [0, 1]");

  need(sampler.num_steps >= 1 && sampler.num_steps <= s.T,
       "sampler.num_steps=" + std::to_string(sampler.num_steps) + " must lie in [1, schedule.T=" + std::to_string(s.T) + "]");
  need(sampler.sampler != diffusion::Sampler::ddpm || sampler.num_steps == s.T,
       "sampler.sampler=ddpm needs sampler.num_steps == schedule.T");
  need(sampler.eta >= 0.0, "sampler.eta must be non-negative");
  need(sampler.guidance_scale >= 0.0, "sampler.guidance_scale must be non-negative");

  need(classifier.R >= 8 && classifier.R % 8 == 0, "classifier.R must be a positive multiple of 8");
  need(classifier.R >= 1 && ae.D % std::max(classifier.R, 1) == 0,
       "classifier.R=" + std::to_string(classifier.R) + " must divide geometry.D=" + std::to_string(ae.D));
  need(classifier.width >= 1, "classifier.width must be positive");
  need(classifier.num_classes == static_cast<int>(data.categories.size()),
       "classifier class count does not match data.categories");
  need(classifier_train.epochs >= 1 && classifier_train.batch_size >= 1, "classifier.epochs and batch_size must be positive");

  need(task.k >= 1, "tasks.k must be at least 1");
  need(task.t_mid >= 0 && task.t_mid <= s.T, "tasks.t_mid must lie in [0, schedule.T]");
  need(task.mask == "top-half" || task.mask == "bottom-half" || task.mask == "left-half",
       "tasks.mask must be top-half, bottom-half or left-half");

  if (!errs.empty()) {
    std::string m = "invalid configuration:";
    for (const auto& e : errs) m += "\n  " + e;
    throw ConfigError(m);
  }
}

std::vector<std::pair<std::string, std::string>> config_keys(const RunConfig& c) {
  auto& mc = const_cast<RunConfig&>(c);
  std::vector<std::pair<std::string, std::string>> out;
  for (auto& b : bindings(mc)) out.emplace_back(b.key, b.get());
  return out;
}

std::string RunConfig::to_ini() const {
  std::string out, section;
  for (const auto& [key, value] : config_keys(*this)) {
    const auto dot = key.find('.');
    const std::string sec = key.substr(0, dot);
    if (sec != section) {
      out += (section.empty() ? "" : "\n") + std::string("[") + sec + "]\n";
      section = sec;
    }
    out += key.substr(dot + 1) + " = " + value + "\n";
  }
  return out;
}

std::string fnv1a64_hex(const std::string& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : bytes) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::string RunConfig::digest() const { return fnv1a64_hex(to_ini()); }

std::string file_digest(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return fnv1a64_hex(ss.str());
}

RunConfig parse_run_config(const std::string& ini_text, const std::vector<std::string>& overrides) {
  namespace pt = boost::property_tree;
  pt::ptree tree;
  std::istringstream is(ini_text);
  try {
    pt::ini_parser::read_ini(is, tree);
  } catch (const pt::ini_parser_error& e) {
    throw ConfigError("config: " + std::string(e.what()));
  }
  std::string preset_name = "desk";
  for (const auto& o : overrides) {
    auto [k, v] = split_override(o);
    if (k == "run.preset") preset_name = trim(v);
  }
  if (auto p = tree.get_optional<std::string>("run.preset")) {
    bool overridden = false;
    for (const auto& o : overrides) overridden |= split_override(o).first == "run.preset";
    if (!overridden) preset_name = trim(*p);
  }
  RunConfig c = preset(preset_name);
  std::set<std::string> seen;
  for (const auto& [sec, body] : tree) {
    if (body.empty() && !body.data().empty()) throw ConfigError("config: key '" + sec + "' is outside any section");
    for (const auto& [key, val] : body) {
      const std::string full = sec + "." + key;
      if (full == "run.preset") continue;
      apply(c, full, val.data(), &seen);
    }
  }
  for (const auto& o : overrides) {
    auto [k, v] = split_override(o);
    if (k == "run.preset") continue;
    apply(c, k, v, &seen);
  }
  // derived unless given explicitly
  if (!seen.count("denoiser.latent_side") && c.ae.P >= 1 && c.ae.D % c.ae.P == 0)
    c.model.denoiser.latent_side = c.ae.D / c.ae.P;
  if (!seen.count("denoiser.in_channels")) c.model.denoiser.in_channels = c.ae.c;
  if (!seen.count("classifier.R")) c.classifier.R = std::min(32, c.ae.D);
  c.classifier.num_classes = static_cast<int>(c.data.categories.size());
  c.validate();
  return c;
}

RunConfig load_run_config(const std::filesystem::path& path, const std::vector<std::string>& overrides) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config file " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  try {
    return parse_run_config(ss.str(), overrides);
  } catch (const ConfigError& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

std::string version_string() { return VSDF_VERSION; }

nlohmann::json RunRecord::to_json() const {
  nlohmann::json j;
  j["format_version"] = 1;
  j["command"] = command;
  j["argv"] = argv;
  j["config"] = config_ini;
  j["config_digest"] = config_digest;
  j["seeds"] = seeds;
  j["wall_seconds"] = wall_seconds;
  j["version"] = version;
  j["outputs"] = outputs;
  return j;
}

RunRecord RunRecord::from_json(const nlohmann::json& j) {
  RunRecord r;
  r.command = j.at("command");
  r.argv = j.at("argv").get<std::vector<std::string>>();
  r.config_ini = j.at("config");
  r.config_digest = j.at("config_digest");
  r.seeds = j.value("seeds", std::map<std::string, std::uint64_t>{});
  r.wall_seconds = j.value("wall_seconds", 0.0);
  r.version = j.value("version", "");
  r.outputs = j.value("outputs", std::map<std::string, std::string>{});
  return r;
}

void write_run_record(const RunRecord& r, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << r.to_json().dump(2) << '\n';
}

RunRecord read_run_record(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open run record " + path.string());
  try {
    return RunRecord::from_json(nlohmann::json::parse(is));
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error(path.string() + ": " + e.what());
  }
}

}  // namespace vsdf::data
