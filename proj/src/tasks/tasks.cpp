#include "vsdf/tasks/tasks.hpp"

#include <cmath>
#include <fstream>
#include <stdexcept>

namespace vsdf::tasks {

namespace {

Tensor<float> drop_batch(const Tensor<float>& z) {
  nn::Shape s(z.shape.begin() + 1, z.shape.end());
  return Tensor<float>(s, z.data);
}

geometry::TsdfGrid decode_latent(const ae::Autoencoder& a, const Tensor<float>& z) {
  return a.decode(ae::LatentGrid{drop_batch(z), a.scale_factor});
}

}  // namespace

Tensor<float> encode_mean_scaled(const ae::Autoencoder& a, const geometry::TsdfGrid& g) {
  geometry::check_grid(g);
  auto f = a.encode(g);
  nn::Shape s{1};
  s.insert(s.end(), f.mean.shape.begin(), f.mean.shape.end());
  Tensor<float> z(s, f.mean.data);
  for (auto& v : z.data) v *= a.scale_factor;
  return z;
}

diffusion::EpsFn guided_eps(const DiffusionModel& m, const std::string& caption, double guidance_scale) {
  auto cond = m.text_encoder().encode_caption(caption);
  auto null = m.text_encoder().null_tokens();
  auto fn = m.eps_fn();
  return [=](const Tensor<float>& z, int t) { return cond::guided_score(fn, z, t, cond, null, guidance_scale); };
}

std::vector<GeneratedSample> generate(const GenerationRequest& req, const DiffusionModel& m, const ae::Autoencoder& a) {
  if (req.k < 1) throw std::invalid_argument("generate: k must be at least 1");
  check_compatible(m.latent(), a);
  const auto eps = guided_eps(m, req.caption, req.settings.sampler.guidance_scale);
  std::vector<GeneratedSample> out;
  for (int i = 0; i < req.k; ++i) {
    auto sc = req.settings.sampler;
    sc.seed = nn::derive_seed(req.seed, static_cast<std::uint64_t>(i));
    auto z = diffusion::sample_loop(eps, m.schedule(), sc, diffusion::SampleRequest{m.latent_shape(1)});
    out.push_back({decode_latent(a, z), drop_batch(z)});
  }
  return out;
}

std::size_t PatchMask::known() const {
  std::size_t n = 0;
  for (auto b : bits) n += b != 0;
  return n;
}

void check_mask(const PatchMask& m, int side) {
  if (m.side != side || m.bits.size() != static_cast<std::size_t>(side) * side * side) {
    throw std::invalid_argument("mask side " + std::to_string(m.side) + " does not match the latent grid side " +
                                std::to_string(side));
  }
  const auto k = m.known();
  if (k == 0 || k == m.bits.size()) throw std::invalid_argument("degenerate mask: it must keep some patches and free others");
}

PatchMask mask_preset(const std::string& name, int side) {
  PatchMask m{side, std::vector<std::uint8_t>(static_cast<std::size_t>(side) * side * side, 0)};
  for (int z = 0; z < side; ++z)
    for (int y = 0; y < side; ++y)
      for (int x = 0; x < side; ++x) {
        bool keep;
        if (name == "top-half") keep = 2 * y >= side;
        else if (name == "bottom-half") keep = 2 * y < side;
        else if (name == "left-half") keep = 2 * x < side;
        else throw std::invalid_argument("unknown mask preset '" + name + "' (top-half, bottom-half, left-half)");
        m.bits[(static_cast<std::size_t>(z) * side + y) * side + x] = keep;
      }
  return m;
}

PatchMask load_mask(const std::filesystem::path& path, int expected_D, int expected_P) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open mask file " + path.string());
  int D = 0, P = 0;
  if (!(is >> D >> P)) throw std::runtime_error(path.string() + ": expected 'D P' on the first line");
  if (D != expected_D || P != expected_P) {
    throw std::runtime_error(path.string() + ": mask is for D=" + std::to_string(D) + " P=" + std::to_string(P) +
                             ", model uses D=" + std::to_string(expected_D) + " P=" + std::to_string(expected_P));
  }
  const int side = D / P;
  PatchMask m{side, {}};
  char ch;
  while (is >> ch) {
    if (ch != '0' && ch != '1') throw std::runtime_error(path.string() + ": unexpected character '" + std::string(1, ch) + "'");
    m.bits.push_back(ch == '1');
  }
  if (m.bits.size() != static_cast<std::size_t>(side) * side * side) {
    throw std::runtime_error(path.string() + ": expected " + std::to_string(side * side * side) + " mask bits, found " +
                             std::to_string(m.bits.size()));
  }
  return m;
}

void save_mask(const PatchMask& m, int D, int P, const std::filesystem::path& path) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << D << ' ' << P << '\n';
  for (std::size_t i = 0; i < m.bits.size(); ++i) {
    os << (m.bits[i] ? '1' : '0');
    if ((i + 1) % static_cast<std::size_t>(m.side) == 0) os << '\n';
  }
}

Tensor<float> merge_masked(const Tensor<float>& z_tilde, const Tensor<float>& z_hat, const PatchMask& m) {
  if (z_tilde.shape != z_hat.shape) throw std::invalid_argument("merge_masked: shape mismatch");
  const std::size_t cells = m.bits.size();
  if (cells == 0 || z_tilde.numel() % cells != 0) throw std::invalid_argument("merge_masked: mask does not tile the latent");
  Tensor<float> out = z_tilde;
  for (std::size_t i = 0; i < out.numel(); ++i)
    if (m.bits[i % cells]) out[i] = z_hat[i];
  return out;
}

CompletionResult complete_shape(const geometry::TsdfGrid& partial, const PatchMask& mask, const std::string& caption,
                                const TaskSettings& settings, const DiffusionModel& m, const ae::Autoencoder& a,
                                const CompletionTrace& trace) {
  check_compatible(m.latent(), a);
  check_mask(mask, m.config().denoiser.latent_side);
  const Tensor<float> known = encode_mean_scaled(a, partial);
  const auto& sched = m.schedule();
  std::mt19937_64 rng(nn::derive_seed(settings.sampler.seed, 0xC0));
  diffusion::SampleRequest req{m.latent_shape(1)};
  req.hook = [&](int t, int t_prev, Tensor<float>& z) {
    const Tensor<float> eps = diffusion::gaussian_like(z.shape, rng);
    const double ca = std::sqrt(sched.alpha_bar_at(t_prev)), cn = std::sqrt(1.0 - sched.alpha_bar_at(t_prev));
    Tensor<float> z_hat(z.shape);
    for (std::size_t i = 0; i < z.numel(); ++i) z_hat[i] = static_cast<float>(ca * known[i] + cn * eps[i]);
    Tensor<float> merged = merge_masked(z, z_hat, mask);
    if (trace) trace(t, t_prev, z, z_hat, merged);
    z = std::move(merged);
  };
  auto z = diffusion::sample_loop(guided_eps(m, caption, settings.sampler.guidance_scale), sched, settings.sampler, req);
  return {decode_latent(a, z), drop_batch(z), drop_batch(known)};
}

ManipulationResult manipulate_shape(const geometry::TsdfGrid& init, const std::string& caption, int t_mid,
                                    const TaskSettings& settings, const DiffusionModel& m, const ae::Autoencoder& a) {
  check_compatible(m.latent(), a);
  const auto& sched = m.schedule();
  if (t_mid < 0 || t_mid > sched.T) {
    throw std::invalid_argument("t_mid must lie in [0, " + std::to_string(sched.T) + "], got " + std::to_string(t_mid));
  }
  const Tensor<float> z_init = encode_mean_scaled(a, init);
  const auto grid = diffusion::timestep_grid(sched.T, settings.sampler.num_steps);
  ManipulationResult r;
  r.init_latent = drop_batch(z_init);
  r.t_start = diffusion::snap_to_grid(grid, t_mid);
  if (r.t_start == 0) {
    r.latent = r.init_latent;
    r.grid = decode_latent(a, z_init);
    return r;
  }
  std::mt19937_64 rng(nn::derive_seed(settings.sampler.seed, 0xA1));
  const Tensor<float> z_mid = diffusion::q_sample(z_init, r.t_start, diffusion::gaussian_like(z_init.shape, rng), sched);
  diffusion::SampleRequest req{m.latent_shape(1), &z_mid, r.t_start};
  auto z = diffusion::sample_loop(guided_eps(m, caption, settings.sampler.guidance_scale), sched, settings.sampler, req);
  r.latent = drop_batch(z);
  r.grid = decode_latent(a, z);
  return r;
}

}  // namespace vsdf::tasks
