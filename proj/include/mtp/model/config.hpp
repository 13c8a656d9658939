#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

namespace mtp {

using TokenId = std::int32_t;

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

using KeyValues = std::map<std::string, std::string>;

struct ModelConfig {
  std::size_t vocab_size = 0;  // includes the k mask ids at the top
  std::size_t d_model = 64;
  std::size_t n_layers = 2;
  std::size_t n_heads = 4;
  std::size_t d_ff = 256;
  std::size_t k_masks = 4;
  std::size_t lora_rank = 8;
  std::size_t max_position = 512;
  // false reproduces plain LoRA: the adapter path is open on every row.
  bool gated_lora = true;
  bool train_mask_embeddings = true;

  std::size_t base_vocab() const { return vocab_size - k_masks; }
  std::size_t head_dim() const { return d_model / n_heads; }

  // j is 1-based: m_1 .. m_k.
  TokenId mask_id(std::size_t j) const {
    return static_cast<TokenId>(base_vocab() + j - 1);
  }
  bool is_mask(TokenId id) const {
    return id >= static_cast<TokenId>(base_vocab()) &&
           id < static_cast<TokenId>(vocab_size);
  }

  void validate() const {
    if (k_masks < 1) throw ConfigError("k_masks must be at least 1");
    if (vocab_size <= k_masks) {
      throw ConfigError("vocab_size must exceed k_masks");
    }
    if (d_model == 0 || n_heads == 0 || d_model % n_heads != 0) {
      throw ConfigError("d_model must be a positive multiple of n_heads");
    }
    if (n_layers == 0 || d_ff == 0) throw ConfigError("empty transformer");
    if (max_position == 0) throw ConfigError("max_position must be positive");
  }

  KeyValues to_key_values() const {
    return {{"model.vocab_size", std::to_string(vocab_size)},
            {"model.d_model", std::to_string(d_model)},
            {"model.n_layers", std::to_string(n_layers)},
            {"model.n_heads", std::to_string(n_heads)},
            {"model.d_ff", std::to_string(d_ff)},
            {"model.k_masks", std::to_string(k_masks)},
            {"model.lora_rank", std::to_string(lora_rank)},
            {"model.max_position", std::to_string(max_position)},
            {"model.gated_lora", gated_lora ? "1" : "0"},
            {"model.train_mask_embeddings", train_mask_embeddings ? "1" : "0"}};
  }

  static ModelConfig from_key_values(const KeyValues& kv) {
    auto get = [&kv](const std::string& key) -> const std::string& {
      auto it = kv.find(key);
      if (it == kv.end()) throw ConfigError("missing model key " + key);
      return it->second;
    };
    auto num = [&get](const std::string& key) {
      return static_cast<std::size_t>(std::stoull(get(key)));
    };
    ModelConfig c;
    c.vocab_size = num("model.vocab_size");
    c.d_model = num("model.d_model");
    c.n_layers = num("model.n_layers");
    c.n_heads = num("model.n_heads");
    c.d_ff = num("model.d_ff");
    c.k_masks = num("model.k_masks");
    c.lora_rank = num("model.lora_rank");
    c.max_position = num("model.max_position");
    c.gated_lora = get("model.gated_lora") == "1";
    c.train_mask_embeddings = get("model.train_mask_embeddings") == "1";
    c.validate();
    return c;
  }

  bool operator==(const ModelConfig&) const = default;
};

// Human-readable list of keys whose values differ.
inline std::vector<std::string> diff_key_values(const KeyValues& expected,
                                                const KeyValues& actual) {
  std::vector<std::string> out;
  for (const auto& [k, v] : expected) {
    auto it = actual.find(k);
    if (it == actual.end()) {
      out.push_back(k + ": expected " + v + ", missing");
    } else if (it->second != v) {
      out.push_back(k + ": expected " + v + ", found " + it->second);
    }
  }
  for (const auto& [k, v] : actual) {
    if (!expected.count(k)) out.push_back(k + ": unexpected value " + v);
  }
  return out;
}

}  // namespace mtp
