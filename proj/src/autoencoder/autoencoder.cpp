#include "vsdf/autoencoder/autoencoder.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <stdexcept>

#include "json.hpp"
#include "vsdf/nn/layers.hpp"

namespace vsdf::ae {

using namespace vsdf::nn;

void AutoencoderConfig::validate() const {
  auto fail = [](const std::string& m) { throw std::invalid_argument("autoencoder config: " + m); };
  if (D < 8) fail("D must be >= 8");
  if (P < 1 || D % P != 0) fail("P=" + std::to_string(P) + " must divide D=" + std::to_string(D));
  if (c < 1) fail("c must be positive");
  if (tau < 0.0f) fail("tau must be non-negative");
  if (kl_weight < 0.0) fail("kl_weight must be non-negative");
  if (enc_width < 1 || dec_width < 1 || dec_channels < 1 || dec_blocks < 0) fail("widths must be positive");
}

template <typename T>
ParamStore<T> init_autoencoder_params(const AutoencoderConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  std::mt19937_64 rng(derive_seed(seed, 0xAE));
  ParamStore<T> ps;
  const int p3 = cfg.P * cfg.P * cfg.P;
  add_conv(ps, "enc.in", cfg.enc_width, p3, 1, rng);
  add_conv(ps, "enc.hidden", cfg.enc_width, cfg.enc_width, 1, rng);
  add_conv(ps, "enc.out", 2 * cfg.c, cfg.enc_width, 1, rng);
  add_conv(ps, "dec.in", cfg.dec_width, cfg.c, 3, rng);
  for (int b = 0; b < cfg.dec_blocks; ++b) {
    const std::string n = "dec.block" + std::to_string(b);
    add_norm(ps, n + ".norm1", cfg.dec_width);
    add_conv(ps, n + ".conv1", cfg.dec_width, cfg.dec_width, 3, rng);
    add_norm(ps, n + ".norm2", cfg.dec_width);
    add_conv(ps, n + ".conv2", cfg.dec_width, cfg.dec_width, 3, rng, 0.5);
  }
  add_norm(ps, "dec.norm_out", cfg.dec_width);
  add_conv(ps, "dec.expand", p3 * cfg.dec_channels, cfg.dec_width, 1, rng);
  add_conv(ps, "dec.out", 1, cfg.dec_channels, 3, rng, 0.5);
  return ps;
}

template <typename T>
std::pair<Var<T>, Var<T>> encoder_forward(const AutoencoderConfig& cfg, const ParamStore<T>& ps, const Var<T>& x) {
  if (x.value().rank() != 5 || x.dim(1) != 1 || x.dim(2) != cfg.D || x.dim(3) != cfg.D || x.dim(4) != cfg.D) {
    throw std::invalid_argument("encode: expected (B, 1, " + std::to_string(cfg.D) + ", " + std::to_string(cfg.D) +
                                ", " + std::to_string(cfg.D) + ") input, got " + shape_to_string(x.shape()));
  }
  const T inv_tau = T{1} / static_cast<T>(cfg.truncation());
  auto h = space_to_depth(scale(x, inv_tau), cfg.P);
  h = silu(apply_conv(ps, "enc.in", h));
  h = silu(apply_conv(ps, "enc.hidden", h));
  h = apply_conv(ps, "enc.out", h);
  auto mean = slice_channels(h, 0, cfg.c);
  auto logvar = clamp(slice_channels(h, cfg.c, 2 * cfg.c), static_cast<T>(kLogvarMin), static_cast<T>(kLogvarMax));
  return {mean, logvar};
}

template <typename T>
Var<T> decoder_forward(const AutoencoderConfig& cfg, const ParamStore<T>& ps, const Var<T>& z) {
  const int n = cfg.latent_side();
  if (z.value().rank() != 5 || z.dim(1) != cfg.c || z.dim(2) != n || z.dim(3) != n || z.dim(4) != n) {
    throw std::invalid_argument("decode: expected (B, " + std::to_string(cfg.c) + ", " + std::to_string(n) + ", " +
                                std::to_string(n) + ", " + std::to_string(n) + ") latent, got " +
                                shape_to_string(z.shape()));
  }
  const int groups = norm_groups(cfg.dec_width);
  auto h = apply_conv(ps, "dec.in", z);
  for (int b = 0; b < cfg.dec_blocks; ++b) {
    const std::string name = "dec.block" + std::to_string(b);
    auto r = apply_conv(ps, name + ".conv1", silu(apply_group_norm(ps, name + ".norm1", h, groups)));
    r = apply_conv(ps, name + ".conv2", silu(apply_group_norm(ps, name + ".norm2", r, groups)));
    h = add(h, r);
  }
  h = silu(apply_group_norm(ps, "dec.norm_out", h, groups));
  h = depth_to_space(apply_conv(ps, "dec.expand", h), cfg.P);
  h = apply_conv(ps, "dec.out", silu(h));
  return scaled_tanh(h, static_cast<T>(cfg.truncation()));
}

template <typename T>
AeLossGraph<T> ae_loss_graph(const AutoencoderConfig& cfg, const ParamStore<T>& ps, const Tensor<T>& x,
                             const Tensor<T>& noise) {
  auto [mean, logvar] = encoder_forward(cfg, ps, constant(x));
  auto z = add(mean, mul(exp(scale(logvar, T{0.5})), constant(noise)));
  auto recon = l1_loss(decoder_forward(cfg, ps, z), x);
  auto kl = kl_standard_normal(mean, logvar);
  auto total = add(recon, scale(kl, static_cast<T>(cfg.kl_weight)));
  return {total, recon, kl};
}

#define VSDF_AE_INSTANTIATE(T)                                                                                  \
  template ParamStore<T> init_autoencoder_params<T>(const AutoencoderConfig&, std::uint64_t);                 \
  template std::pair<Var<T>, Var<T>> encoder_forward<T>(const AutoencoderConfig&, const ParamStore<T>&,       \
                                                          const Var<T>&);                                     \
  template Var<T> decoder_forward<T>(const AutoencoderConfig&, const ParamStore<T>&, const Var<T>&);          \
  template AeLossGraph<T> ae_loss_graph<T>(const AutoencoderConfig&, const ParamStore<T>&, const Tensor<T>&,  \
                                           const Tensor<T>&);
VSDF_AE_INSTANTIATE(float)
VSDF_AE_INSTANTIATE(double)

namespace {

Tensor<float> stack_grids(const std::vector<const geometry::TsdfGrid*>& grids, int D) {
  Tensor<float> x({static_cast<int>(grids.size()), 1, D, D, D});
  const std::size_t vol = static_cast<std::size_t>(D) * D * D;
  for (std::size_t b = 0; b < grids.size(); ++b) {
    if (grids[b]->D != D) {
      throw std::invalid_argument("grid resolution " + std::to_string(grids[b]->D) + " does not match config D=" +
                                  std::to_string(D));
    }
    std::copy(grids[b]->values.begin(), grids[b]->values.end(), x.ptr() + b * vol);
  }
  return x;
}

Tensor<float> slice_batch(const Tensor<float>& t, int b) {
  Shape s(t.shape.begin() + 1, t.shape.end());
  const std::size_t n = t.inner(1);
  return Tensor<float>(s, std::vector<float>(t.data.begin() + b * n, t.data.begin() + (b + 1) * n));
}

}  // namespace

Autoencoder::Autoencoder(AutoencoderConfig cfg, std::uint64_t seed)
    : cfg_(cfg), params_(init_autoencoder_params<float>(cfg, seed)) {}

Autoencoder::Autoencoder(AutoencoderConfig cfg, ParamStore<float> params) : cfg_(cfg), params_(std::move(params)) {
  cfg_.validate();
}

std::vector<GaussianLatentField> Autoencoder::encode_batch(const std::vector<const geometry::TsdfGrid*>& grids) const {
  NoGradGuard ng;
  auto [mean, logvar] = encoder_forward(cfg_, params_, constant(stack_grids(grids, cfg_.D)));
  std::vector<GaussianLatentField> out;
  for (int b = 0; b < static_cast<int>(grids.size()); ++b) {
    out.push_back({slice_batch(mean.value(), b), slice_batch(logvar.value(), b)});
  }
  return out;
}

GaussianLatentField Autoencoder::encode(const geometry::TsdfGrid& g) const { return encode_batch({&g}).front(); }

geometry::TsdfGrid Autoencoder::decode(const LatentGrid& z) const {
  const int n = cfg_.latent_side();
  if (z.values.shape != Shape{cfg_.c, n, n, n}) {
    throw std::invalid_argument("decode: latent shape " + shape_to_string(z.values.shape) + " does not match config");
  }
  if (!(z.scale_factor > 0.0f)) throw std::invalid_argument("decode: scale factor must be positive");
  NoGradGuard ng;
  Tensor<float> zin({1, cfg_.c, n, n, n});
  for (std::size_t i = 0; i < zin.numel(); ++i) zin[i] = z.values[i] / z.scale_factor;
  auto y = decoder_forward(cfg_, params_, constant(std::move(zin)));
  geometry::TsdfGrid g = geometry::make_grid(cfg_.D, cfg_.truncation());
  g.values = y.value().data;
  for (auto& v : g.values) v = std::clamp(v, -g.tau, g.tau);
  return g;
}

geometry::TsdfGrid Autoencoder::reconstruct(const geometry::TsdfGrid& g) const {
  auto f = encode(g);
  return decode(reparameterize(f, Tensor<float>(f.mean.shape), 1.0f));
}

LatentGrid reparameterize(const GaussianLatentField& f, const Tensor<float>& noise, float scale_factor) {
  if (noise.shape != f.mean.shape || f.logvar.shape != f.mean.shape) {
    throw std::invalid_argument("reparameterize: noise shape " + shape_to_string(noise.shape) +
                                " does not match latent " + shape_to_string(f.mean.shape));
  }
  LatentGrid z{Tensor<float>(f.mean.shape), scale_factor};
  for (std::size_t i = 0; i < noise.numel(); ++i) {
    const float lv = std::clamp(f.logvar[i], kLogvarMin, kLogvarMax);
    z.values[i] = (f.mean[i] + std::exp(0.5f * lv) * noise[i]) * scale_factor;
  }
  return z;
}

Tensor<float> latent_noise(const GaussianLatentField& f, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> nd(0.0f, 1.0f);
  Tensor<float> t(f.mean.shape);
  for (auto& v : t.data) v = nd(rng);
  return t;
}

AeLossTerms ae_loss(const geometry::TsdfGrid& g, const geometry::TsdfGrid& reconstruction, const GaussianLatentField& f,
                    double kl_weight) {
  if (g.values.size() != reconstruction.values.size()) throw std::invalid_argument("ae_loss: grid size mismatch");
  if (f.mean.shape != f.logvar.shape) throw std::invalid_argument("ae_loss: latent shape mismatch");
  AeLossTerms t;
  for (std::size_t i = 0; i < g.values.size(); ++i) t.recon += std::abs(double(g.values[i]) - reconstruction.values[i]);
  t.recon /= static_cast<double>(g.values.size());
  for (std::size_t i = 0; i < f.mean.numel(); ++i) {
    const double m = f.mean[i], lv = f.logvar[i];
    t.kl += 0.5 * (m * m + std::exp(lv) - 1.0 - lv);
  }
  t.kl /= static_cast<double>(std::max<std::size_t>(f.mean.numel(), 1));
  t.total = t.recon + kl_weight * t.kl;
  return t;
}

Autoencoder train_autoencoder(const std::vector<geometry::TsdfGrid>& data, const AutoencoderConfig& cfg,
                              const AeTrainConfig& tc, AeTrainLog* log, const EpochCallback& cb) {
  cfg.validate();
  if (data.empty()) throw std::invalid_argument("train_autoencoder: empty dataset");
  if (tc.epochs < 1 || tc.batch_size < 1) throw std::invalid_argument("train_autoencoder: epochs and batch size must be positive");
  Autoencoder ae(cfg, tc.seed);
  const int n = static_cast<int>(data.size());
  const int steps_per_epoch = (n + tc.batch_size - 1) / tc.batch_size;
  Adam opt(ae.params(), AdamConfig{.lr = tc.lr, .total_steps = static_cast<std::int64_t>(steps_per_epoch) * tc.epochs});
  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(derive_seed(tc.seed, 0x7A11));
  std::normal_distribution<float> nd(0.0f, 1.0f);
  const int ls = cfg.latent_side();
  AeTrainLog local;
  for (int epoch = 0; epoch < tc.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double sum_total = 0, sum_recon = 0, sum_kl = 0;
    for (int s = 0; s < steps_per_epoch; ++s) {
      const int lo = s * tc.batch_size, hi = std::min(n, lo + tc.batch_size);
      std::vector<const geometry::TsdfGrid*> batch;
      for (int i = lo; i < hi; ++i) batch.push_back(&data[order[i]]);
      Tensor<float> x = stack_grids(batch, cfg.D);
      Tensor<float> noise({hi - lo, cfg.c, ls, ls, ls});
      for (auto& v : noise.data) v = nd(rng);
      auto loss = ae_loss_graph(cfg, ae.params(), x, noise);
      const double total = loss.total.value()[0];
      if (!std::isfinite(total)) {
        throw std::runtime_error("train_autoencoder: non-finite loss at epoch " + std::to_string(epoch + 1) +
                                 ", step " + std::to_string(s + 1));
      }
      backward(loss.total);
      opt.step();
      const double w = static_cast<double>(hi - lo);
      sum_total += total * w;
      sum_recon += loss.recon.value()[0] * w;
      sum_kl += loss.kl.value()[0] * w;
    }
    local.total.push_back(sum_total / n);
    local.recon.push_back(sum_recon / n);
    local.kl.push_back(sum_kl / n);
    if (cb) cb(epoch + 1, local.total.back(), local.recon.back());
  }
  if (log) *log = std::move(local);
  return ae;
}

float scale_factor_from_latents(const std::vector<float>& values) {
  if (values.size() < 2) throw std::invalid_argument("compute_scale_factor: need at least two latent values");
  double mean = 0;
  for (float v : values) mean += v;
  mean /= static_cast<double>(values.size());
  double var = 0;
  for (float v : values) var += (v - mean) * (v - mean);
  var /= static_cast<double>(values.size() - 1);
  const double sd = std::sqrt(var);
  if (!(sd > 1e-12) || !std::isfinite(sd)) throw std::runtime_error("compute_scale_factor: latent std is zero");
  return static_cast<float>(1.0 / sd);
}

float compute_scale_factor(const std::vector<geometry::TsdfGrid>& data, const Autoencoder& ae, std::uint64_t seed) {
  if (data.empty()) throw std::invalid_argument("compute_scale_factor: empty calibration set");
  std::vector<float> pooled;
  for (std::size_t i = 0; i < data.size(); ++i) {
    auto f = ae.encode(data[i]);
    auto z = reparameterize(f, latent_noise(f, derive_seed(seed, i)), 1.0f);
    pooled.insert(pooled.end(), z.values.data.begin(), z.values.data.end());
  }
  return scale_factor_from_latents(pooled);
}

namespace {
constexpr int kManifestVersion = 1;
}

void save_autoencoder(const Autoencoder& ae, const AeCheckpointInfo& info, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  const auto& c = ae.config();
  nlohmann::json j;
  j["kind"] = "autoencoder";
  j["format_version"] = kManifestVersion;
  j["D"] = c.D;
  j["P"] = c.P;
  j["c"] = c.c;
  j["tau"] = c.truncation();
  j["kl_weight"] = c.kl_weight;
  j["enc_width"] = c.enc_width;
  j["dec_width"] = c.dec_width;
  j["dec_blocks"] = c.dec_blocks;
  j["dec_channels"] = c.dec_channels;
  j["scale_factor"] = ae.scale_factor;
  j["seed"] = info.seed;
  j["epoch"] = info.epoch;
  j["loss_curve"] = info.log.total;
  j["recon_curve"] = info.log.recon;
  j["kl_curve"] = info.log.kl;
  j["num_params"] = ae.params().count();
  std::ofstream os(dir / "manifest.json");
  if (!os) throw std::runtime_error("cannot write " + (dir / "manifest.json").string());
  os << j.dump(2) << '\n';
  save_weights(ae.params(), dir / "weights.bin");
}

Autoencoder load_autoencoder(const std::filesystem::path& dir, AeCheckpointInfo* info) {
  std::ifstream is(dir / "manifest.json");
  if (!is) throw std::runtime_error("cannot open " + (dir / "manifest.json").string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error((dir / "manifest.json").string() + ": " + e.what());
  }
  if (j.value("kind", "") != "autoencoder") throw std::runtime_error(dir.string() + " is not an autoencoder checkpoint");
  AutoencoderConfig c;
  c.D = j.at("D");
  c.P = j.at("P");
  c.c = j.at("c");
  c.tau = j.at("tau");
  c.kl_weight = j.at("kl_weight");
  c.enc_width = j.at("enc_width");
  c.dec_width = j.at("dec_width");
  c.dec_blocks = j.at("dec_blocks");
  c.dec_channels = j.at("dec_channels");
  Autoencoder ae(c, init_autoencoder_params<float>(c, 0));
  load_weights(ae.params(), dir / "weights.bin");
  ae.scale_factor = j.at("scale_factor");
  if (info) {
    info->seed = j.value("seed", std::uint64_t{0});
    info->epoch = j.value("epoch", 0);
    info->log.total = j.value("loss_curve", std::vector<double>{});
    info->log.recon = j.value("recon_curve", std::vector<double>{});
    info->log.kl = j.value("kl_curve", std::vector<double>{});
  }
  return ae;
}

}  // namespace vsdf::ae
