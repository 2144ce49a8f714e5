#include "vsdf/tasks/model.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include "json.hpp"
#include "vsdf/nn/ops.hpp"

namespace vsdf::tasks {

using nn::Var;

void DiffusionModelConfig::validate() const {
  denoiser.validate();
  text.validate();
  if (schedule.T < 1) throw std::invalid_argument("schedule: T must be positive");
  if (embedding_file.empty() && text.width != denoiser.cond_embed_dim) {
    throw std::invalid_argument("text width " + std::to_string(text.width) + " does not match denoiser cond_embed_dim " +
                                std::to_string(denoiser.cond_embed_dim));
  }
}

LatentSpec latent_spec_of(const ae::Autoencoder& a) {
  const auto& c = a.config();
  return LatentSpec{c.D, c.P, c.c, a.scale_factor};
}

void check_compatible(const LatentSpec& m, const ae::Autoencoder& a) {
  const LatentSpec e = latent_spec_of(a);
  auto fail = [](const std::string& field, const std::string& want, const std::string& got) {
    throw std::runtime_error("checkpoint mismatch: " + field + " is " + want + " in the diffusion model but " + got +
                             " in the autoencoder");
  };
  if (m.D != e.D) fail("D", std::to_string(m.D), std::to_string(e.D));
  if (m.P != e.P) fail("P", std::to_string(m.P), std::to_string(e.P));
  if (m.c != e.c) fail("c", std::to_string(m.c), std::to_string(e.c));
  if (m.scale_factor != e.scale_factor) fail("scale_factor", std::to_string(m.scale_factor), std::to_string(e.scale_factor));
}

namespace {

void check_latent_against_denoiser(const DiffusionModelConfig& cfg, const LatentSpec& l) {
  if (l.P < 1 || l.D % l.P != 0) throw std::invalid_argument("latent spec: P must divide D");
  if (cfg.denoiser.latent_side != l.D / l.P) {
    throw std::invalid_argument("denoiser latent_side " + std::to_string(cfg.denoiser.latent_side) +
                                " does not match D/P = " + std::to_string(l.D / l.P));
  }
  if (cfg.denoiser.in_channels != l.c) {
    throw std::invalid_argument("denoiser in_channels " + std::to_string(cfg.denoiser.in_channels) +
                                " does not match latent channels c = " + std::to_string(l.c));
  }
}

nn::ParamStore<float> fresh_params(const DiffusionModelConfig& cfg, const cond::Vocabulary& vocab, std::uint64_t seed) {
  cfg.validate();
  auto ps = denoiser::init_denoiser_params<float>(cfg.denoiser, nn::derive_seed(seed, 1));
  if (cfg.embedding_file.empty()) cond::add_text_encoder_params(ps, cfg.text, vocab.size(), nn::derive_seed(seed, 2));
  return ps;
}

}  // namespace

DiffusionModel::DiffusionModel(DiffusionModelConfig cfg, cond::Vocabulary vocab, LatentSpec latent, std::uint64_t seed)
    : DiffusionModel(cfg, vocab, latent, fresh_params(cfg, vocab, seed)) {}

DiffusionModel::DiffusionModel(DiffusionModelConfig cfg, cond::Vocabulary vocab, LatentSpec latent,
                               nn::ParamStore<float> params)
    : cfg_(std::move(cfg)), vocab_(std::move(vocab)), latent_(latent), params_(std::move(params)) {
  cfg_.validate();
  check_latent_against_denoiser(cfg_, latent_);
  schedule_ = diffusion::build_schedule(cfg_.schedule.T, cfg_.schedule.beta_start, cfg_.schedule.beta_end);
  if (builtin_text()) {
    encoder_ = std::make_unique<cond::BuiltinTextEncoder>(cfg_.text, vocab_, &params_);
  } else {
    auto f = std::make_unique<cond::FileTextEncoder>(cfg_.embedding_file);
    if (f->width() != cfg_.denoiser.cond_embed_dim) {
      throw std::invalid_argument("embedding file width " + std::to_string(f->width()) +
                                  " does not match denoiser cond_embed_dim " + std::to_string(cfg_.denoiser.cond_embed_dim));
    }
    encoder_ = std::move(f);
  }
}

nn::Shape DiffusionModel::latent_shape(int batch) const {
  const int n = cfg_.denoiser.latent_side;
  return {batch, cfg_.denoiser.in_channels, n, n, n};
}

Tensor<float> DiffusionModel::predict_eps(const Tensor<float>& z, int t, const Tensor<float>& tokens) const {
  nn::NoGradGuard guard;
  std::vector<int> ts(static_cast<std::size_t>(z.dim(0)), t);
  return denoiser::denoise(cfg_.denoiser, params_, nn::constant(z), ts, nn::constant(tokens)).value();
}

cond::CondDenoiser DiffusionModel::eps_fn() const {
  return [this](const Tensor<float>& z, int t, const Tensor<float>& tokens) { return predict_eps(z, t, tokens); };
}

std::vector<LatentExample> encode_examples(const ae::Autoencoder& a, const std::vector<geometry::TsdfGrid>& grids,
                                           const std::vector<std::vector<std::string>>& captions) {
  if (grids.size() != captions.size()) throw std::invalid_argument("encode_examples: grids and captions differ in count");
  std::vector<LatentExample> out;
  out.reserve(grids.size());
  for (std::size_t i = 0; i < grids.size(); ++i) {
    if (captions[i].empty()) throw std::invalid_argument("encode_examples: shape " + std::to_string(i) + " has no caption");
    out.push_back({a.encode(grids[i]), captions[i]});
  }
  return out;
}

std::vector<double> train_diffusion(DiffusionModel& m, const std::vector<LatentExample>& data,
                                    const DiffusionTrainConfig& tc, const DiffusionEpochCallback& cb) {
  if (data.empty()) throw std::invalid_argument("train_diffusion: empty dataset");
  if (tc.epochs < 1 || tc.batch_size < 1) throw std::invalid_argument("train_diffusion: epochs and batch size must be positive");
  if (!(tc.p_uncond >= 0.0 && tc.p_uncond <= 1.0)) throw std::invalid_argument("train_diffusion: p_uncond must lie in [0, 1]");
  const auto& cfg = m.config();
  const nn::Shape one = m.latent_shape(1);
  for (const auto& ex : data) {
    if (ex.field.mean.shape != nn::Shape(one.begin() + 1, one.end())) {
      throw std::invalid_argument("train_diffusion: latent shape " + nn::shape_to_string(ex.field.mean.shape) +
                                  " does not match the denoiser");
    }
  }
  const int n = static_cast<int>(data.size());
  const int steps = (n + tc.batch_size - 1) / tc.batch_size;
  nn::Adam opt(m.params(), nn::AdamConfig{.lr = tc.lr, .total_steps = static_cast<std::int64_t>(steps) * tc.epochs});
  std::mt19937_64 rng(nn::derive_seed(tc.seed, 0xD1FF));
  std::normal_distribution<float> nd(0.0f, 1.0f);
  std::bernoulli_distribution drop(tc.p_uncond);
  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  const int L = m.text_encoder().length();
  const float scale = m.latent().scale_factor;
  const std::size_t per = data[0].field.mean.numel();
  const auto null_tokens = m.text_encoder().null_tokens().tokens;

  std::vector<double> curve;
  for (int epoch = 0; epoch < tc.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double sum = 0;
    for (int s = 0; s < steps; ++s) {
      const int lo = s * tc.batch_size, hi = std::min(n, lo + tc.batch_size), B = hi - lo;
      Tensor<float> z0(m.latent_shape(B));
      std::vector<int> ids;
      Tensor<float> file_tokens;
      if (!m.builtin_text()) file_tokens = Tensor<float>({B, L, m.text_encoder().width()});
      for (int b = 0; b < B; ++b) {
        const auto& ex = data[order[lo + b]];
        for (std::size_t i = 0; i < per; ++i) {
          const float sigma = std::exp(0.5f * ex.field.logvar[i]);
          z0[b * per + i] = (ex.field.mean[i] + sigma * nd(rng)) * scale;
        }
        const auto& caption = ex.captions[std::uniform_int_distribution<std::size_t>(0, ex.captions.size() - 1)(rng)];
        const bool null = drop(rng);
        if (m.builtin_text()) {
          auto enc = null ? cond::null_ids(L) : m.vocabulary().encode(caption, L);
          ids.insert(ids.end(), enc.begin(), enc.end());
        } else {
          const auto& tok = null ? null_tokens : m.text_encoder().encode_caption(caption).tokens;
          std::copy(tok.data.begin(), tok.data.end(), file_tokens.data.begin() + static_cast<std::ptrdiff_t>(b * tok.numel()));
        }
      }
      Var<float> tokens = m.builtin_text() ? cond::text_encoder_forward(cfg.text, m.params(), ids, B)
                                           : nn::constant(std::move(file_tokens));
      auto model = [&](const Var<float>& z_t, const std::vector<int>& t) {
        return denoiser::denoise(cfg.denoiser, m.params(), z_t, t, tokens);
      };
      auto loss = diffusion::training_loss(model, z0, m.schedule(), rng);
      const double v = loss.value()[0];
      if (!std::isfinite(v)) {
        throw std::runtime_error("train_diffusion: non-finite loss at epoch " + std::to_string(epoch + 1));
      }
      nn::backward(loss);
      opt.step();
      sum += v * B;
    }
    curve.push_back(sum / n);
    if (cb) cb(epoch + 1, curve.back());
  }
  return curve;
}

namespace {
constexpr int kManifestVersion = 1;
}

void save_diffusion(const DiffusionModel& m, const DiffusionCheckpointInfo& info, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  const auto& c = m.config();
  const auto& d = c.denoiser;
  nlohmann::json j;
  j["kind"] = "diffusion";
  j["format_version"] = kManifestVersion;
  j["denoiser"] = {{"latent_side", d.latent_side},     {"in_channels", d.in_channels},
                   {"base_width", d.base_width},       {"depth", d.depth},
                   {"inner", d.inner},                 {"inner_blocks", d.inner_blocks},
                   {"inner_attention", d.inner_attention}, {"inout_concat", d.inout_concat},
                   {"time_embed_dim", d.time_embed_dim}, {"cond_embed_dim", d.cond_embed_dim},
                   {"num_heads", d.num_heads}};
  j["text"] = {{"length", c.text.length}, {"width", c.text.width}, {"blocks", c.text.blocks}, {"heads", c.text.heads}};
  j["embedding_file"] = c.embedding_file;
  j["schedule"] = {{"T", c.schedule.T}, {"beta_start", c.schedule.beta_start}, {"beta_end", c.schedule.beta_end}};
  j["latent"] = {{"D", m.latent().D}, {"P", m.latent().P}, {"c", m.latent().c}, {"scale_factor", m.latent().scale_factor}};
  j["vocabulary"] = m.vocabulary().words();
  j["seed"] = info.seed;
  j["epoch"] = info.epoch;
  j["loss_curve"] = info.loss_curve;
  j["num_params"] = m.params().count();
  std::ofstream os(dir / "manifest.json");
  if (!os) throw std::runtime_error("cannot write " + (dir / "manifest.json").string());
  os << j.dump(2) << '\n';
  nn::save_weights(m.params(), dir / "weights.bin");
}

std::unique_ptr<DiffusionModel> load_diffusion(const std::filesystem::path& dir, DiffusionCheckpointInfo* info) {
  std::ifstream is(dir / "manifest.json");
  if (!is) throw std::runtime_error("cannot open " + (dir / "manifest.json").string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error((dir / "manifest.json").string() + ": " + e.what());
  }
  if (j.value("kind", "") != "diffusion") throw std::runtime_error(dir.string() + " is not a diffusion checkpoint");
  DiffusionModelConfig c;
  try {
    const auto& d = j.at("denoiser");
    c.denoiser.latent_side = d.at("latent_side");
    c.denoiser.in_channels = d.at("in_channels");
    c.denoiser.base_width = d.at("base_width");
    c.denoiser.depth = d.at("depth");
    c.denoiser.inner = d.at("inner");
    c.denoiser.inner_blocks = d.at("inner_blocks");
    c.denoiser.inner_attention = d.at("inner_attention");
    c.denoiser.inout_concat = d.at("inout_concat");
    c.denoiser.time_embed_dim = d.at("time_embed_dim");
    c.denoiser.cond_embed_dim = d.at("cond_embed_dim");
    c.denoiser.num_heads = d.at("num_heads");
    const auto& t = j.at("text");
    c.text.length = t.at("length");
    c.text.width = t.at("width");
    c.text.blocks = t.at("blocks");
    c.text.heads = t.at("heads");
    c.embedding_file = j.at("embedding_file");
    const auto& s = j.at("schedule");
    c.schedule.T = s.at("T");
    c.schedule.beta_start = s.at("beta_start");
    c.schedule.beta_end = s.at("beta_end");
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error((dir / "manifest.json").string() + ": " + e.what());
  }
  const auto& l = j.at("latent");
  LatentSpec spec{l.at("D"), l.at("P"), l.at("c"), l.at("scale_factor")};
  auto words = j.at("vocabulary").get<std::vector<std::string>>();
  const cond::Vocabulary reserved;
  if (words.size() < 3 || !std::equal(reserved.words().begin(), reserved.words().end(), words.begin())) {
    throw std::runtime_error((dir / "manifest.json").string() + ": vocabulary does not start with the reserved tokens");
  }
  auto vocab = cond::Vocabulary::from_words(std::vector<std::string>(words.begin() + 3, words.end()));
  auto m = std::make_unique<DiffusionModel>(c, vocab, spec, std::uint64_t{0});
  nn::load_weights(m->params(), dir / "weights.bin");
  if (info) {
    info->seed = j.value("seed", std::uint64_t{0});
    info->epoch = j.value("epoch", 0);
    info->loss_curve = j.value("loss_curve", std::vector<double>{});
  }
  return m;
}

}  // namespace vsdf::tasks
