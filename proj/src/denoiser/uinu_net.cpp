#include "vsdf/denoiser/uinu_net.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>

#include "vsdf/nn/layers.hpp"

namespace vsdf::denoiser {

using namespace nn;

void UinUNetConfig::validate() const {
  auto fail = [](const std::string& m) { throw std::invalid_argument("denoiser config: " + m); };
  if (latent_side < 1) fail("latent_side must be positive");
  if (in_channels < 1) fail("in_channels must be positive");
  if (depth < 1) fail("depth must be >= 1");
  if (latent_side % (1 << (depth - 1)) != 0) {
    fail("latent_side " + std::to_string(latent_side) + " is not divisible by 2^(depth-1)=" +
         std::to_string(1 << (depth - 1)));
  }
  if (base_width < 1 || time_embed_dim < 2 || cond_embed_dim < 1) fail("widths must be positive");
  if (time_embed_dim % 2 != 0) fail("time_embed_dim must be even");
  if (num_heads < 1) fail("num_heads must be positive");
  if (inner_blocks < 0) fail("inner_blocks must be non-negative");
  for (int i = 0; i < depth; ++i) {
    if (i >= depth - 2 && level_width(i) % num_heads != 0) {
      fail("width " + std::to_string(level_width(i)) + " at level " + std::to_string(i) +
           " is not divisible by num_heads=" + std::to_string(num_heads));
    }
  }
  if (inner && inner_attention && base_width % num_heads != 0) {
    fail("base_width must be divisible by num_heads for the inner transformer");
  }
}

Tensor<double> timestep_embedding(const std::vector<int>& t, int dim) {
  if (dim < 2 || dim % 2 != 0) throw std::invalid_argument("timestep_embedding: dim must be even, got " + std::to_string(dim));
  const int half = dim / 2;
  Tensor<double> e({static_cast<int>(t.size()), dim});
  for (std::size_t b = 0; b < t.size(); ++b) {
    if (t[b] < 0) throw std::invalid_argument("timestep_embedding: negative timestep");
    for (int k = 0; k < half; ++k) {
      const double w = half == 1 ? 1.0 : std::exp(-std::log(10000.0) * k / (half - 1));
      e[b * dim + k] = std::sin(t[b] * w);
      e[b * dim + half + k] = std::cos(t[b] * w);
    }
  }
  return e;
}

namespace {

bool has_xattn(const UinUNetConfig& cfg, int level) { return level >= cfg.depth - 2; }

template <typename T>
void add_resblock(ParamStore<T>& ps, const std::string& n, int cin, int cout, int temb, std::mt19937_64& rng) {
  add_norm(ps, n + ".norm1", cin);
  add_conv(ps, n + ".conv1", cout, cin, 3, rng);
  add_linear(ps, n + ".film", 2 * cout, temb, rng, 0.5);
  add_norm(ps, n + ".norm2", cout);
  add_conv(ps, n + ".conv2", cout, cout, 3, rng, 0.5);
  if (cin != cout) add_conv(ps, n + ".skip", cout, cin, 1, rng);
}

template <typename T>
void add_xattn(ParamStore<T>& ps, const std::string& n, int c, int dc, std::mt19937_64& rng) {
  add_norm(ps, n + ".norm", c);
  add_linear(ps, n + ".q", c, c, rng, 1.0, false);
  add_linear(ps, n + ".k", c, dc, rng, 1.0, false);
  add_linear(ps, n + ".v", c, dc, rng, 1.0, false);
  add_linear(ps, n + ".o", c, c, rng, 0.5);
}

template <typename T>
Var<T> resblock(const ParamStore<T>& ps, const std::string& n, const Var<T>& x, const Var<T>& temb_act) {
  const int cin = x.dim(1);
  const int cout = ps.get(n + ".conv1.weight").dim(0);
  auto h = apply_conv(ps, n + ".conv1", silu(apply_group_norm(ps, n + ".norm1", x, norm_groups(cin))));
  h = apply_group_norm(ps, n + ".norm2", h, norm_groups(cout));
  h = film_channels(h, apply_linear(ps, n + ".film", temb_act));
  h = apply_conv(ps, n + ".conv2", silu(h));
  auto skip = ps.contains(n + ".skip.weight") ? apply_conv(ps, n + ".skip", x) : x;
  return add(skip, h);
}

template <typename T>
Var<T> xattn(const UinUNetConfig& cfg, const ParamStore<T>& ps, const std::string& n, const Var<T>& x,
             const Var<T>& cond) {
  const int c = x.dim(1);
  const Shape spatial{x.dim(2), x.dim(3), x.dim(4)};
  auto tok = to_tokens(apply_group_norm(ps, n + ".norm", x, norm_groups(c)));
  auto a = attention(apply_linear(ps, n + ".q", tok), apply_linear(ps, n + ".k", cond), apply_linear(ps, n + ".v", cond),
                     cfg.num_heads);
  return add(x, from_tokens(apply_linear(ps, n + ".o", a), spatial));
}

}  // namespace

template <typename T>
ParamStore<T> init_denoiser_params(const UinUNetConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  std::mt19937_64 rng(derive_seed(seed, 0xD1));
  ParamStore<T> ps;
  const int te = cfg.time_embed_dim;
  add_linear(ps, "time.fc1", te, te, rng);
  add_linear(ps, "time.fc2", te, te, rng);
  const int w0 = cfg.level_width(0);
  add_conv(ps, "stem", w0, cfg.in_channels, 3, rng);

  int width = w0;
  for (int i = 0; i < cfg.depth; ++i) {
    const std::string n = "down" + std::to_string(i);
    add_resblock(ps, n + ".res", width, cfg.level_width(i), te, rng);
    width = cfg.level_width(i);
    if (has_xattn(cfg, i)) add_xattn(ps, n + ".xattn", width, cfg.cond_embed_dim, rng);
    if (i + 1 < cfg.depth) add_conv(ps, n + ".downsample", width, width, 3, rng);
  }
  add_resblock(ps, "mid.res0", width, width, te, rng);
  add_xattn(ps, "mid.xattn", width, cfg.cond_embed_dim, rng);
  add_resblock(ps, "mid.res1", width, width, te, rng);
  for (int i = cfg.depth - 1; i >= 0; --i) {
    const std::string n = "up" + std::to_string(i);
    add_resblock(ps, n + ".res", width + cfg.level_width(i), cfg.level_width(i), te, rng);
    width = cfg.level_width(i);
    if (has_xattn(cfg, i)) add_xattn(ps, n + ".xattn", width, cfg.cond_embed_dim, rng);
    if (i > 0) {
      add_conv(ps, n + ".upsample", cfg.level_width(i - 1), width, 3, rng);
      width = cfg.level_width(i - 1);
    }
  }

  if (cfg.inner) {
    for (int b = 0; b < cfg.inner_blocks; ++b) {
      const std::string n = "inner.block" + std::to_string(b);
      add_norm(ps, n + ".norm1", w0);
      add_conv(ps, n + ".conv1", w0, w0, 1, rng);
      add_linear(ps, n + ".film", 2 * w0, te, rng, 0.5);
      add_norm(ps, n + ".norm2", w0);
      add_conv(ps, n + ".conv2", w0, w0, 1, rng, 0.5);
    }
    if (cfg.inner_attention) {
      const int cells = cfg.latent_side * cfg.latent_side * cfg.latent_side;
      std::normal_distribution<double> nd(0.0, 0.02);
      Tensor<T> pos({cells, w0});
      for (auto& v : pos.data) v = static_cast<T>(nd(rng));
      ps.add("inner.attn.pos", std::move(pos));
      add_norm(ps, "inner.attn.norm1", w0);
      add_linear(ps, "inner.attn.q", w0, w0, rng, 1.0, false);
      add_linear(ps, "inner.attn.k", w0, w0, rng, 1.0, false);
      add_linear(ps, "inner.attn.v", w0, w0, rng, 1.0, false);
      add_linear(ps, "inner.attn.o", w0, w0, rng, 0.5);
      add_norm(ps, "inner.attn.norm2", w0);
      add_linear(ps, "inner.attn.ff1", 2 * w0, w0, rng);
      add_linear(ps, "inner.attn.ff2", w0, 2 * w0, rng, 0.5);
    }
  }
  const int out_in = cfg.inner && cfg.inout_concat ? 2 * w0 : w0;
  add_norm(ps, "out.norm", out_in);
  add_conv(ps, "out.conv", cfg.in_channels, out_in, 3, rng, 0.5);
  return ps;
}

template <typename T>
Var<T> time_features(const UinUNetConfig& cfg, const ParamStore<T>& ps, const std::vector<int>& t) {
  auto e = constant(timestep_embedding(t, cfg.time_embed_dim).template cast<T>());
  auto h = apply_linear(ps, "time.fc2", silu(apply_linear(ps, "time.fc1", e)));
  return silu(h);
}

template <typename T>
Var<T> inner_resnet(const UinUNetConfig& cfg, const ParamStore<T>& ps, const Var<T>& stem, const Var<T>& temb) {
  Var<T> h = stem;
  for (int b = 0; b < cfg.inner_blocks; ++b) {
    const std::string n = "inner.block" + std::to_string(b);
    auto r = apply_conv(ps, n + ".conv1", silu(apply_cell_norm(ps, n + ".norm1", h)));
    r = film_channels(apply_cell_norm(ps, n + ".norm2", r), apply_linear(ps, n + ".film", temb));
    r = apply_conv(ps, n + ".conv2", silu(r));
    h = add(h, r);
  }
  return h;
}

template <typename T>
Var<T> inner_path(const UinUNetConfig& cfg, const ParamStore<T>& ps, const Var<T>& stem, const Var<T>& temb) {
  auto h = inner_resnet(cfg, ps, stem, temb);
  if (!cfg.inner_attention) return h;
  const Shape spatial{h.dim(2), h.dim(3), h.dim(4)};
  auto x = add_positional(to_tokens(h), ps.get("inner.attn.pos"));
  auto a = apply_layer_norm(ps, "inner.attn.norm1", x);
  a = attention(apply_linear(ps, "inner.attn.q", a), apply_linear(ps, "inner.attn.k", a),
                apply_linear(ps, "inner.attn.v", a), cfg.num_heads);
  x = add(x, apply_linear(ps, "inner.attn.o", a));
  auto f = apply_linear(ps, "inner.attn.ff1", apply_layer_norm(ps, "inner.attn.norm2", x));
  x = add(x, apply_linear(ps, "inner.attn.ff2", silu(f)));
  return from_tokens(x, spatial);
}

template <typename T>
Var<T> denoise(const UinUNetConfig& cfg, const ParamStore<T>& ps, const Var<T>& z_t, const std::vector<int>& t,
               const Var<T>& cond) {
  const int n = cfg.latent_side;
  if (z_t.value().rank() != 5 || z_t.dim(1) != cfg.in_channels || z_t.dim(2) != n || z_t.dim(3) != n ||
      z_t.dim(4) != n) {
    throw std::invalid_argument("denoise: expected (B, " + std::to_string(cfg.in_channels) + ", " + std::to_string(n) +
                                ", " + std::to_string(n) + ", " + std::to_string(n) + ") input, got " +
                                shape_to_string(z_t.shape()));
  }
  const int batch = z_t.dim(0);
  if (static_cast<int>(t.size()) != batch) throw std::invalid_argument("denoise: one timestep per batch item required");
  if (cond.value().rank() != 3 || cond.dim(0) != batch || cond.dim(2) != cfg.cond_embed_dim) {
    throw std::invalid_argument("denoise: condition tokens must be (B, L, " + std::to_string(cfg.cond_embed_dim) +
                                "), got " + shape_to_string(cond.shape()));
  }
  auto temb = time_features(cfg, ps, t);
  auto stem = apply_conv(ps, "stem", z_t);

  Var<T> h = stem;
  std::vector<Var<T>> skips;
  for (int i = 0; i < cfg.depth; ++i) {
    const std::string name = "down" + std::to_string(i);
    h = resblock(ps, name + ".res", h, temb);
    if (has_xattn(cfg, i)) h = xattn(cfg, ps, name + ".xattn", h, cond);
    skips.push_back(h);
    if (i + 1 < cfg.depth) h = apply_conv(ps, name + ".downsample", h, 2, 1);
  }
  h = resblock(ps, "mid.res0", h, temb);
  h = xattn(cfg, ps, "mid.xattn", h, cond);
  h = resblock(ps, "mid.res1", h, temb);
  for (int i = cfg.depth - 1; i >= 0; --i) {
    const std::string name = "up" + std::to_string(i);
    h = resblock(ps, name + ".res", concat_channels(h, skips[i]), temb);
    if (has_xattn(cfg, i)) h = xattn(cfg, ps, name + ".xattn", h, cond);
    if (i > 0) h = apply_conv(ps, name + ".upsample", upsample_nearest2(h));
  }
  // With in-out concat off the inner output is dropped, so skip computing it.
  if (cfg.inner && cfg.inout_concat) h = concat_channels(h, inner_path(cfg, ps, stem, temb));
  const int groups = norm_groups(h.dim(1));
  return apply_conv(ps, "out.conv", silu(apply_group_norm(ps, "out.norm", h, groups)));
}

std::size_t count_params(const UinUNetConfig& cfg) { return init_denoiser_params<float>(cfg, 0).count(); }

int matched_unet_width(const UinUNetConfig& cfg) {
  const std::size_t target = count_params(cfg);
  UinUNetConfig plain = cfg;
  plain.inner = false;
  int best = cfg.base_width;
  std::size_t best_gap = std::numeric_limits<std::size_t>::max();
  for (int w = 1; w <= 4 * cfg.base_width; ++w) {
    plain.base_width = w;
    try {
      plain.validate();
    } catch (const std::invalid_argument&) {
      continue;
    }
    const std::size_t c = count_params(plain);
    const std::size_t gap = c > target ? c - target : target - c;
    if (gap < best_gap) {
      best_gap = gap;
      best = w;
    }
  }
  return best;
}

#define VSDF_INSTANTIATE_DENOISER(T)                                                                                 \
  template ParamStore<T> init_denoiser_params<T>(const UinUNetConfig&, std::uint64_t);                               \
  template Var<T> denoise<T>(const UinUNetConfig&, const ParamStore<T>&, const Var<T>&, const std::vector<int>&,     \
                             const Var<T>&);                                                                         \
  template Var<T> time_features<T>(const UinUNetConfig&, const ParamStore<T>&, const std::vector<int>&);             \
  template Var<T> inner_resnet<T>(const UinUNetConfig&, const ParamStore<T>&, const Var<T>&, const Var<T>&);         \
  template Var<T> inner_path<T>(const UinUNetConfig&, const ParamStore<T>&, const Var<T>&, const Var<T>&);
VSDF_INSTANTIATE_DENOISER(float)
VSDF_INSTANTIATE_DENOISER(double)

}  // namespace vsdf::denoiser
