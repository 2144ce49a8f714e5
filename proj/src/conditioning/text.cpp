#include "vsdf/conditioning/text.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <set>
#include <stdexcept>

#include "../common/binio.hpp"
#include "vsdf/common/log.hpp"
#include "vsdf/nn/layers.hpp"

namespace vsdf::cond {

using namespace nn;

std::vector<std::string> tokenize(const std::string& caption) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : caption) {
    const auto c = static_cast<unsigned char>(ch);
    if (std::isalnum(c) || ch == '\'') {
      cur.push_back(static_cast<char>(std::tolower(c)));
    } else if (!cur.empty()) {
      out.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

Vocabulary::Vocabulary() : words_{"<pad>", "<null>", "<unk>"} {
  for (int i = 0; i < 3; ++i) index_[words_[i]] = i;
}

Vocabulary Vocabulary::from_words(const std::vector<std::string>& words) {
  Vocabulary v;
  for (const auto& w : words) {
    if (v.index_.count(w)) continue;
    v.index_[w] = static_cast<int>(v.words_.size());
    v.words_.push_back(w);
  }
  return v;
}

Vocabulary Vocabulary::build(const std::vector<std::string>& captions) {
  std::set<std::string> all;
  for (const auto& c : captions)
    for (auto& w : tokenize(c)) all.insert(w);
  return from_words(std::vector<std::string>(all.begin(), all.end()));
}

int Vocabulary::id(const std::string& word) const {
  auto it = index_.find(word);
  return it == index_.end() ? kUnkId : it->second;
}

std::vector<int> Vocabulary::encode(const std::string& caption, int length, bool* truncated) const {
  const auto words = tokenize(caption);
  std::vector<int> ids(static_cast<std::size_t>(length), kPadId);
  for (std::size_t i = 0; i < words.size() && i < ids.size(); ++i) ids[i] = id(words[i]);
  if (truncated) *truncated = words.size() > ids.size();
  return ids;
}

std::vector<int> null_ids(int length) {
  std::vector<int> ids(static_cast<std::size_t>(length), kPadId);
  ids[0] = kNullId;
  return ids;
}

void TextEncoderConfig::validate() const {
  auto fail = [](const std::string& m) { throw std::invalid_argument("text encoder config: " + m); };
  if (length < 1) fail("length must be positive");
  if (width < 1 || blocks < 0 || heads < 1) fail("width, blocks and heads must be positive");
  if (width % heads != 0) fail("width " + std::to_string(width) + " is not divisible by heads=" + std::to_string(heads));
}

template <typename T>
void add_text_encoder_params(ParamStore<T>& ps, const TextEncoderConfig& cfg, int vocab_size, std::uint64_t seed) {
  cfg.validate();
  std::mt19937_64 rng(derive_seed(seed, 0x7E));
  std::normal_distribution<double> nd(0.0, 1.0);
  Tensor<T> table({vocab_size, cfg.width});
  for (auto& v : table.data) v = static_cast<T>(nd(rng));
  ps.add("text.embed", std::move(table));
  Tensor<T> pos({cfg.length, cfg.width});
  for (auto& v : pos.data) v = static_cast<T>(0.1 * nd(rng));
  ps.add("text.pos", std::move(pos));
  for (int b = 0; b < cfg.blocks; ++b) {
    const std::string n = "text.block" + std::to_string(b);
    add_norm(ps, n + ".norm1", cfg.width);
    add_linear(ps, n + ".q", cfg.width, cfg.width, rng, 1.0, false);
    add_linear(ps, n + ".k", cfg.width, cfg.width, rng, 1.0, false);
    add_linear(ps, n + ".v", cfg.width, cfg.width, rng, 1.0, false);
    add_linear(ps, n + ".o", cfg.width, cfg.width, rng, 0.5);
    add_norm(ps, n + ".norm2", cfg.width);
    add_linear(ps, n + ".ff1", 2 * cfg.width, cfg.width, rng);
    add_linear(ps, n + ".ff2", cfg.width, 2 * cfg.width, rng, 0.5);
  }
  add_norm(ps, "text.norm_out", cfg.width);
}

template <typename T>
Var<T> text_encoder_forward(const TextEncoderConfig& cfg, const ParamStore<T>& ps, const std::vector<int>& ids,
                            int batch) {
  if (ids.size() != static_cast<std::size_t>(batch) * cfg.length) {
    throw std::invalid_argument("text encoder: expected " + std::to_string(batch * cfg.length) + " ids, got " +
                                std::to_string(ids.size()));
  }
  const int vocab = ps.get("text.embed").dim(0);
  for (int id : ids) {
    if (id < 0 || id >= vocab) throw std::invalid_argument("text encoder: token id " + std::to_string(id) + " out of range");
  }
  auto x = add_positional(embedding(ps.get("text.embed"), ids, batch, cfg.length), ps.get("text.pos"));
  for (int b = 0; b < cfg.blocks; ++b) {
    const std::string n = "text.block" + std::to_string(b);
    auto a = apply_layer_norm(ps, n + ".norm1", x);
    a = attention(apply_linear(ps, n + ".q", a), apply_linear(ps, n + ".k", a), apply_linear(ps, n + ".v", a), cfg.heads);
    x = add(x, apply_linear(ps, n + ".o", a));
    auto f = apply_linear(ps, n + ".ff1", apply_layer_norm(ps, n + ".norm2", x));
    x = add(x, apply_linear(ps, n + ".ff2", silu(f)));
  }
  return apply_layer_norm(ps, "text.norm_out", x);
}

template void add_text_encoder_params<float>(ParamStore<float>&, const TextEncoderConfig&, int, std::uint64_t);
template void add_text_encoder_params<double>(ParamStore<double>&, const TextEncoderConfig&, int, std::uint64_t);
template Var<float> text_encoder_forward<float>(const TextEncoderConfig&, const ParamStore<float>&,
                                                const std::vector<int>&, int);
template Var<double> text_encoder_forward<double>(const TextEncoderConfig&, const ParamStore<double>&,
                                                  const std::vector<int>&, int);

BuiltinTextEncoder::BuiltinTextEncoder(TextEncoderConfig cfg, Vocabulary vocab, const ParamStore<float>* params)
    : cfg_(cfg), vocab_(std::move(vocab)), params_(params) {
  cfg_.validate();
  if (!params_ || !params_->contains("text.embed")) throw std::invalid_argument("text encoder: missing parameters");
  if (params_->get("text.embed").dim(0) != vocab_.size()) {
    throw std::invalid_argument("text encoder: vocabulary size " + std::to_string(vocab_.size()) +
                                " does not match embedding table " +
                                std::to_string(params_->get("text.embed").dim(0)));
  }
}

ConditionTokens BuiltinTextEncoder::run(const std::vector<int>& ids, bool is_null) const {
  NoGradGuard ng;
  auto y = text_encoder_forward(cfg_, *params_, ids, 1);
  ConditionTokens c;
  c.tokens = Tensor<float>({cfg_.length, cfg_.width}, y.value().data);
  c.is_null = is_null;
  return c;
}

ConditionTokens BuiltinTextEncoder::encode_caption(const std::string& caption) const {
  if (tokenize(caption).empty()) return null_tokens();
  bool truncated = false;
  auto ids = vocab_.encode(caption, cfg_.length, &truncated);
  if (truncated) log::warn("caption longer than " + std::to_string(cfg_.length) + " words was truncated: \"" + caption + "\"");
  auto c = run(ids, false);
  c.truncated = truncated;
  return c;
}

ConditionTokens BuiltinTextEncoder::null_tokens() const { return run(null_ids(cfg_.length), true); }

std::uint64_t caption_key(const std::string& caption) {
  std::string joined;
  for (const auto& w : tokenize(caption)) {
    if (!joined.empty()) joined += ' ';
    joined += w;
  }
  return fnv1a64(joined);
}

void write_embedding_file(const std::filesystem::path& path, int length, int width,
                          const std::vector<std::pair<std::string, Tensor<float>>>& entries) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os.write("VEMB", 4);
  binio::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(entries.size()));
  binio::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(length));
  binio::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(width));
  for (const auto& [caption, t] : entries) {
    if (t.numel() != static_cast<std::size_t>(length) * width) {
      throw std::invalid_argument("embedding for \"" + caption + "\" has " + std::to_string(t.numel()) +
                                  " values, expected " + std::to_string(length * width));
    }
    binio::put_le<std::uint64_t>(os, caption_key(caption));
    for (float v : t.data) binio::put_f32(os, v);
  }
  if (!os) throw std::runtime_error("write failed: " + path.string());
}

FileTextEncoder::FileTextEncoder(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open embedding file " + path.string());
  const std::string what = path.string();
  char magic[4];
  if (!is.read(magic, 4) || std::string(magic, 4) != "VEMB") throw std::runtime_error(what + ": not a VEMB file");
  const auto count = binio::get_le<std::uint32_t>(is, what);
  length_ = static_cast<int>(binio::get_le<std::uint32_t>(is, what));
  width_ = static_cast<int>(binio::get_le<std::uint32_t>(is, what));
  if (length_ < 1 || width_ < 1 || length_ > 4096 || width_ > 65536) {
    throw std::runtime_error(what + ": implausible token shape " + std::to_string(length_) + "x" + std::to_string(width_));
  }
  for (std::uint32_t e = 0; e < count; ++e) {
    const auto key = binio::get_le<std::uint64_t>(is, what);
    std::vector<float> rows(static_cast<std::size_t>(length_) * width_);
    for (auto& v : rows) v = binio::get_f32(is, what);
    table_[key] = std::move(rows);
  }
}

ConditionTokens FileTextEncoder::encode_caption(const std::string& caption) const {
  if (tokenize(caption).empty()) return null_tokens();
  auto it = table_.find(caption_key(caption));
  if (it == table_.end()) throw std::runtime_error("no precomputed embedding for caption \"" + caption + "\"");
  ConditionTokens c;
  c.tokens = Tensor<float>({length_, width_}, it->second);
  return c;
}

ConditionTokens FileTextEncoder::null_tokens() const {
  ConditionTokens c;
  auto it = table_.find(caption_key(""));
  c.tokens = it == table_.end() ? Tensor<float>({length_, width_}) : Tensor<float>({length_, width_}, it->second);
  c.is_null = true;
  return c;
}

ConditionTokens dropout_condition(const ConditionTokens& cond, const ConditionTokens& null, double p_uncond,
                                  std::mt19937_64& rng) {
  if (p_uncond < 0.0 || p_uncond > 1.0) throw std::invalid_argument("p_uncond must be in [0, 1]");
  return std::bernoulli_distribution(p_uncond)(rng) ? null : cond;
}

std::vector<int> dropout_ids(const std::vector<int>& ids, int length, double p_uncond, std::mt19937_64& rng) {
  if (p_uncond < 0.0 || p_uncond > 1.0) throw std::invalid_argument("p_uncond must be in [0, 1]");
  std::vector<int> out = ids;
  const auto nil = null_ids(length);
  for (std::size_t b = 0; b * length < ids.size(); ++b) {
    if (std::bernoulli_distribution(p_uncond)(rng)) std::copy(nil.begin(), nil.end(), out.begin() + b * length);
  }
  return out;
}

Tensor<float> guided_combine(const Tensor<float>& eps_uncond, const Tensor<float>& eps_cond, double s) {
  if (eps_uncond.shape != eps_cond.shape) throw std::invalid_argument("guided_combine: shape mismatch");
  if (s == 1.0) return eps_cond;
  Tensor<float> out(eps_cond.shape);
  for (std::size_t i = 0; i < out.numel(); ++i) {
    const double u = eps_uncond[i];
    out[i] = static_cast<float>(u + s * (double(eps_cond[i]) - u));
  }
  return out;
}

Tensor<float> batch_tokens(const Tensor<float>& tokens, int batch) {
  Shape shape{batch};
  shape.insert(shape.end(), tokens.shape.begin(), tokens.shape.end());
  Tensor<float> out(shape);
  for (int b = 0; b < batch; ++b) std::copy(tokens.data.begin(), tokens.data.end(), out.data.begin() + b * tokens.numel());
  return out;
}

Tensor<float> guided_score(const CondDenoiser& model, const Tensor<float>& z, int t, const ConditionTokens& cond,
                           const ConditionTokens& null, double s) {
  if (s < 0.0) throw std::invalid_argument("guidance scale must be non-negative");
  const int batch = z.dim(0);
  if (cond.is_null || s == 1.0) return model(z, t, batch_tokens(cond.tokens, batch));
  // both branches in one batch
  Shape shape = z.shape;
  shape[0] = 2 * batch;
  Tensor<float> zz(shape);
  std::copy(z.data.begin(), z.data.end(), zz.data.begin());
  std::copy(z.data.begin(), z.data.end(), zz.data.begin() + z.numel());
  auto tu = batch_tokens(null.tokens, batch), tc = batch_tokens(cond.tokens, batch);
  Tensor<float> tokens({2 * batch, cond.tokens.dim(0), cond.tokens.dim(1)});
  std::copy(tu.data.begin(), tu.data.end(), tokens.data.begin());
  std::copy(tc.data.begin(), tc.data.end(), tokens.data.begin() + tu.numel());
  auto both = model(zz, t, tokens);
  if (both.shape != shape) throw std::runtime_error("guided_score: denoiser returned " + shape_to_string(both.shape));
  Tensor<float> eu(z.shape, std::vector<float>(both.data.begin(), both.data.begin() + z.numel()));
  Tensor<float> ec(z.shape, std::vector<float>(both.data.begin() + z.numel(), both.data.end()));
  return guided_combine(eu, ec, s);
}

}  // namespace vsdf::cond
