#pragma once
// Caption conditioning: tokenizer, the built-in trainable text encoder, a
// file-backed encoder for precomputed embeddings, condition dropout and the
// classifier-free guided combination.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "vsdf/nn/params.hpp"

namespace vsdf::cond {

using nn::Tensor;
using nn::Var;

inline constexpr int kPadId = 0;
inline constexpr int kNullId = 1;
inline constexpr int kUnkId = 2;

// Lowercased words; anything that is not a letter, digit or apostrophe separates words.
std::vector<std::string> tokenize(const std::string& caption);

class Vocabulary {
 public:
  Vocabulary();
  // Sorted unique words of all captions after the three reserved tokens.
  static Vocabulary build(const std::vector<std::string>& captions);
  static Vocabulary from_words(const std::vector<std::string>& words);

  int size() const { return static_cast<int>(words_.size()); }
  const std::vector<std::string>& words() const { return words_; }
  int id(const std::string& word) const;
  // Exactly `length` ids, padded; words beyond `length` are dropped and
  // *truncated is set.
  std::vector<int> encode(const std::string& caption, int length, bool* truncated = nullptr) const;

 private:
  std::vector<std::string> words_;
  std::map<std::string, int> index_;
};

// Sequence of `length` ids that stands for the empty caption.
std::vector<int> null_ids(int length);

struct TextEncoderConfig {
  int length = 16;
  int width = 32;
  int blocks = 2;
  int heads = 4;
  void validate() const;
};

template <typename T>
void add_text_encoder_params(nn::ParamStore<T>& ps, const TextEncoderConfig& cfg, int vocab_size, std::uint64_t seed);

// ids holds batch * length entries; returns (batch, length, width).
template <typename T>
Var<T> text_encoder_forward(const TextEncoderConfig& cfg, const nn::ParamStore<T>& ps, const std::vector<int>& ids,
                            int batch);

struct ConditionTokens {
  Tensor<float> tokens;  // (length, width)
  bool is_null = false;
  bool truncated = false;
};

class TextEncoder {
 public:
  virtual ~TextEncoder() = default;
  // "" (or a caption with no words) gives the null condition.
  virtual ConditionTokens encode_caption(const std::string& caption) const = 0;
  virtual ConditionTokens null_tokens() const = 0;
  virtual int length() const = 0;
  virtual int width() const = 0;
};

// Embedding table + positions + self-attention blocks. Reads parameters from
// a store owned elsewhere (typically the diffusion model's).
class BuiltinTextEncoder : public TextEncoder {
 public:
  BuiltinTextEncoder(TextEncoderConfig cfg, Vocabulary vocab, const nn::ParamStore<float>* params);
  ConditionTokens encode_caption(const std::string& caption) const override;
  ConditionTokens null_tokens() const override;
  int length() const override { return cfg_.length; }
  int width() const override { return cfg_.width; }
  const Vocabulary& vocabulary() const { return vocab_; }

 private:
  ConditionTokens run(const std::vector<int>& ids, bool is_null) const;
  TextEncoderConfig cfg_;
  Vocabulary vocab_;
  const nn::ParamStore<float>* params_;
};

// "VEMB" | u32 count | u32 L | u32 width | count x (u64 caption hash, L*width f32).
// Captions are keyed by fnv1a64 of their space-joined tokens; the empty
// caption's entry, if present, is the null condition (zeros otherwise).
class FileTextEncoder : public TextEncoder {
 public:
  explicit FileTextEncoder(const std::filesystem::path& path);
  ConditionTokens encode_caption(const std::string& caption) const override;
  ConditionTokens null_tokens() const override;
  int length() const override { return length_; }
  int width() const override { return width_; }
  std::size_t size() const { return table_.size(); }

 private:
  int length_ = 0, width_ = 0;
  std::map<std::uint64_t, std::vector<float>> table_;
};

std::uint64_t caption_key(const std::string& caption);
void write_embedding_file(const std::filesystem::path& path, int length, int width,
                          const std::vector<std::pair<std::string, Tensor<float>>>& entries);

// null with probability p_uncond, otherwise cond.
ConditionTokens dropout_condition(const ConditionTokens& cond, const ConditionTokens& null, double p_uncond,
                                  std::mt19937_64& rng);
// Id-level variant used when the encoder trains jointly.
std::vector<int> dropout_ids(const std::vector<int>& ids, int length, double p_uncond, std::mt19937_64& rng);

// eps_u + s (eps_c - eps_u), evaluated in double. s = 1 returns eps_c as is.
Tensor<float> guided_combine(const Tensor<float>& eps_uncond, const Tensor<float>& eps_cond, double s);

// Noise prediction for latents z (B, ...) under per-batch condition tokens (B, L, width).
using CondDenoiser = std::function<Tensor<float>(const Tensor<float>& z, int t, const Tensor<float>& tokens)>;

// Classifier-free guidance with one conditional and one unconditional
// evaluation (a single one when cond is null or s = 1).
Tensor<float> guided_score(const CondDenoiser& model, const Tensor<float>& z, int t, const ConditionTokens& cond,
                           const ConditionTokens& null, double s);

// Repeats (L, width) tokens into (B, L, width).
Tensor<float> batch_tokens(const Tensor<float>& tokens, int batch);

}  // namespace vsdf::cond
