#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <iterator>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "mtp/model/config.hpp"
#include "mtp/numerics/rng.hpp"

namespace mtp {

// Character vocabulary. Ids 0..2 are PAD/BOS/EOS, then one id per character.
// Mask ids are appended above this by the model config.
class Vocabulary {
 public:
  static constexpr TokenId kPad = 0;
  static constexpr TokenId kBos = 1;
  static constexpr TokenId kEos = 2;
  static constexpr std::size_t kSpecials = 3;

  Vocabulary() = default;
  explicit Vocabulary(std::string chars) : chars_(std::move(chars)) {
    std::set<char> seen(chars_.begin(), chars_.end());
    if (seen.size() != chars_.size()) {
      throw std::invalid_argument("vocabulary characters must be unique");
    }
  }

  const std::string& chars() const { return chars_; }
  std::size_t size() const { return kSpecials + chars_.size(); }

  TokenId id(char c) const {
    auto pos = chars_.find(c);
    if (pos == std::string::npos) {
      throw std::invalid_argument(std::string("character '") + c + "' not in vocabulary");
    }
    return static_cast<TokenId>(kSpecials + pos);
  }

  std::vector<TokenId> encode(const std::string& text, bool with_bos = true) const {
    std::vector<TokenId> out;
    if (with_bos) out.push_back(kBos);
    for (char c : text) out.push_back(id(c));
    return out;
  }

  std::string token_text(TokenId id) const {
    if (id == kPad) return "<pad>";
    if (id == kBos) return "<bos>";
    if (id == kEos) return "<eos>";
    const auto u = static_cast<std::size_t>(id);
    if (id >= 0 && u - kSpecials < chars_.size()) return std::string(1, chars_[u - kSpecials]);
    return "<m" + std::to_string(u - size() + 1) + ">";
  }

  std::string decode(const std::vector<TokenId>& ids) const {
    std::string out;
    for (TokenId id : ids) {
      if (id == kBos) continue;
      out += token_text(id);
    }
    return out;
  }

 private:
  std::string chars_;
};

struct CorpusSpec {
  std::string task = "pattern";  // pattern | arithmetic | file
  std::size_t size = 512;        // number of sequences
  std::uint64_t seed = 1;
  std::size_t seq_len = 24;      // tokens per sequence, BOS included
  // pattern
  std::size_t alphabet = 8;
  std::size_t min_period = 3;
  std::size_t max_period = 5;
  std::size_t motif_bank = 0;  // 0: a fresh motif per sequence
  // arithmetic
  std::size_t digits = 2;
  // file
  std::string path;

  KeyValues to_key_values() const {
    return {{"corpus.task", task},
            {"corpus.size", std::to_string(size)},
            {"corpus.seed", std::to_string(seed)},
            {"corpus.seq_len", std::to_string(seq_len)},
            {"corpus.alphabet", std::to_string(alphabet)},
            {"corpus.min_period", std::to_string(min_period)},
            {"corpus.max_period", std::to_string(max_period)},
            {"corpus.motif_bank", std::to_string(motif_bank)},
            {"corpus.digits", std::to_string(digits)},
            {"corpus.path", path}};
  }

  static CorpusSpec from_key_values(const KeyValues& kv) {
    auto get = [&kv](const std::string& k) -> std::string {
      auto it = kv.find(k);
      if (it == kv.end()) throw ConfigError("missing corpus key " + k);
      return it->second;
    };
    CorpusSpec c;
    c.task = get("corpus.task");
    c.size = std::stoull(get("corpus.size"));
    c.seed = std::stoull(get("corpus.seed"));
    c.seq_len = std::stoull(get("corpus.seq_len"));
    c.alphabet = std::stoull(get("corpus.alphabet"));
    c.min_period = std::stoull(get("corpus.min_period"));
    c.max_period = std::stoull(get("corpus.max_period"));
    c.motif_bank = std::stoull(get("corpus.motif_bank"));
    c.digits = std::stoull(get("corpus.digits"));
    c.path = get("corpus.path");
    return c;
  }
};

struct Example {
  std::vector<TokenId> tokens;
  std::vector<std::uint8_t> loss_flags;
  std::size_t prompt_len = 0;  // tokens a decoding prompt should include
};

inline std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline Vocabulary derive_vocabulary(const CorpusSpec& spec) {
  if (spec.task == "pattern") {
    if (spec.alphabet < 2 || spec.alphabet > 26) {
      throw ConfigError("pattern alphabet must be in [2, 26]");
    }
    std::string chars;
    for (std::size_t i = 0; i < spec.alphabet; ++i) chars += static_cast<char>('a' + i);
    return Vocabulary(chars);
  }
  if (spec.task == "arithmetic") return Vocabulary("0123456789+=");
  if (spec.task == "file") {
    const std::string text = read_text_file(spec.path);
    std::set<char> uniq(text.begin(), text.end());
    return Vocabulary(std::string(uniq.begin(), uniq.end()));
  }
  throw ConfigError("unknown corpus task '" + spec.task + "'");
}

namespace detail {

inline std::vector<TokenId> random_motif(Rng& rng, std::size_t period, std::size_t alphabet) {
  // Distinct symbols within a motif so every period is unambiguous.
  std::vector<TokenId> symbols(alphabet);
  for (std::size_t i = 0; i < alphabet; ++i) {
    symbols[i] = static_cast<TokenId>(Vocabulary::kSpecials + i);
  }
  std::shuffle(symbols.begin(), symbols.end(), rng.engine());
  symbols.resize(std::min(period, alphabet));
  return symbols;
}

inline std::string zero_pad(std::uint64_t v, std::size_t width) {
  std::string s = std::to_string(v);
  return std::string(width > s.size() ? width - s.size() : 0, '0') + s;
}

}  // namespace detail

// Deterministic under spec.seed. Pattern sequences are BOS followed by an
// exactly periodic repetition; arithmetic sequences are "<bos>aa+bb=ccc<eos>"
// with loss only on the answer; file sequences are random windows of the text.
inline std::vector<Example> generate_corpus(const CorpusSpec& spec) {
  const Vocabulary vocab = derive_vocabulary(spec);
  Rng rng(spec.seed, "corpus." + spec.task);
  std::vector<Example> out;
  out.reserve(spec.size);
  if (spec.task == "pattern") {
    if (spec.min_period < 1 || spec.max_period < spec.min_period ||
        spec.max_period > spec.alphabet) {
      throw ConfigError("pattern periods must satisfy 1 <= min <= max <= alphabet");
    }
    if (spec.seq_len < spec.max_period + 2) throw ConfigError("seq_len too short for the period");
    std::vector<std::vector<TokenId>> bank;
    Rng bank_rng(spec.seed, "corpus.pattern.bank");
    for (std::size_t b = 0; b < spec.motif_bank; ++b) {
      const auto period = static_cast<std::size_t>(bank_rng.integer(
          static_cast<std::int64_t>(spec.min_period), static_cast<std::int64_t>(spec.max_period)));
      bank.push_back(detail::random_motif(bank_rng, period, spec.alphabet));
    }
    for (std::size_t s = 0; s < spec.size; ++s) {
      std::vector<TokenId> motif;
      if (bank.empty()) {
        const auto period = static_cast<std::size_t>(rng.integer(
            static_cast<std::int64_t>(spec.min_period), static_cast<std::int64_t>(spec.max_period)));
        motif = detail::random_motif(rng, period, spec.alphabet);
      } else {
        motif = bank[static_cast<std::size_t>(rng.integer(0, static_cast<std::int64_t>(bank.size()) - 1))];
      }
      Example ex;
      ex.tokens.push_back(Vocabulary::kBos);
      for (std::size_t i = 0; ex.tokens.size() < spec.seq_len; ++i) {
        ex.tokens.push_back(motif[i % motif.size()]);
      }
      ex.loss_flags.assign(ex.tokens.size(), 1);
      ex.prompt_len = 1 + motif.size() + 1;
      out.push_back(std::move(ex));
    }
  } else if (spec.task == "arithmetic") {
    if (spec.digits < 1 || spec.digits > 9) throw ConfigError("arithmetic digits must be in [1, 9]");
    std::uint64_t limit = 1;
    for (std::size_t i = 0; i < spec.digits; ++i) limit *= 10;
    for (std::size_t s = 0; s < spec.size; ++s) {
      const auto a = static_cast<std::uint64_t>(rng.integer(0, static_cast<std::int64_t>(limit) - 1));
      const auto b = static_cast<std::uint64_t>(rng.integer(0, static_cast<std::int64_t>(limit) - 1));
      const std::string prompt = detail::zero_pad(a, spec.digits) + "+" + detail::zero_pad(b, spec.digits) + "=";
      const std::string answer = detail::zero_pad(a + b, spec.digits + 1);
      Example ex;
      ex.tokens = vocab.encode(prompt + answer);
      ex.tokens.push_back(Vocabulary::kEos);
      ex.prompt_len = 1 + prompt.size();
      ex.loss_flags.assign(ex.tokens.size(), 0);
      // Rows from '=' onward predict answer digits and the closing EOS.
      for (std::size_t i = ex.prompt_len - 1; i + 1 < ex.tokens.size(); ++i) ex.loss_flags[i] = 1;
      out.push_back(std::move(ex));
    }
  } else if (spec.task == "file") {
    const std::string text = read_text_file(spec.path);
    if (text.size() < spec.seq_len) throw ConfigError("file shorter than seq_len");
    for (std::size_t s = 0; s < spec.size; ++s) {
      const auto start = static_cast<std::size_t>(
          rng.integer(0, static_cast<std::int64_t>(text.size() - (spec.seq_len - 1))));
      Example ex;
      ex.tokens = vocab.encode(text.substr(start, spec.seq_len - 1));
      ex.loss_flags.assign(ex.tokens.size(), 1);
      ex.prompt_len = std::max<std::size_t>(2, spec.seq_len / 2);
      out.push_back(std::move(ex));
    }
  } else {
    throw ConfigError("unknown corpus task '" + spec.task + "'");
  }
  return out;
}

// Held-out prompts drawn from the same generator under a different seed.
inline std::vector<std::vector<TokenId>> heldout_prompts(const CorpusSpec& spec,
                                                         std::size_t count,
                                                         std::uint64_t seed) {
  CorpusSpec held = spec;
  held.size = count;
  held.seed = derive_seed(seed, "heldout");
  std::vector<std::vector<TokenId>> out;
  for (auto& ex : generate_corpus(held)) {
    out.emplace_back(ex.tokens.begin(), ex.tokens.begin() + static_cast<std::ptrdiff_t>(ex.prompt_len));
  }
  return out;
}

}  // namespace mtp
