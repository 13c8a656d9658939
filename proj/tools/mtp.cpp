// mtp: data generation, training, decoding, benchmarking, probing and
// exactness verification for gated-LoRA multi-token prediction.

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>
#include <yaml-cpp/yaml.h>

#include "mtp/mtp.hpp"

namespace fs = std::filesystem;
using namespace mtp;

namespace {

enum Exit : int { kOk = 0, kUsage = 1, kIo = 2, kVerifyFailed = 3, kDiverged = 4, kCorrupt = 5 };

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Config file: YAML with one level of sections. Every key has a default and
// unknown keys are rejected.

class ConfigSchema {
 public:
  explicit ConfigSchema(TrainConfig& c) {
    bind("run", "seed", c.seed);
    bind("corpus", "task", c.corpus.task);
    bind("corpus", "size", c.corpus.size);
    bind("corpus", "seed", c.corpus.seed);
    bind("corpus", "seq_len", c.corpus.seq_len);
    bind("corpus", "alphabet", c.corpus.alphabet);
    bind("corpus", "min_period", c.corpus.min_period);
    bind("corpus", "max_period", c.corpus.max_period);
    bind("corpus", "motif_bank", c.corpus.motif_bank);
    bind("corpus", "digits", c.corpus.digits);
    bind("corpus", "path", c.corpus.path);
    bind("model", "d_model", c.model.d_model);
    bind("model", "n_layers", c.model.n_layers);
    bind("model", "n_heads", c.model.n_heads);
    bind("model", "d_ff", c.model.d_ff);
    bind("model", "k_masks", c.model.k_masks);
    bind("model", "lora_rank", c.model.lora_rank);
    bind("model", "max_position", c.model.max_position);
    bind("model", "gated_lora", c.model.gated_lora);
    bind("model", "train_mask_embeddings", c.model.train_mask_embeddings);
    bind("pretrain", "steps", c.base_steps);
    bind("pretrain", "warmup", c.base_warmup);
    bind("pretrain", "lr", c.base_lr);
    bind("pretrain", "batch_size", c.base_batch);
    bind("finetune", "steps", c.steps);
    bind("finetune", "warmup", c.warmup);
    bind("finetune", "lr", c.lr);
    bind("finetune", "batch_size", c.batch_size);
    bind("finetune", "use_sampler", c.use_sampler);
    bind("finetune", "sampler_teacher_forcing", c.sampler_teacher_forcing);
    bind("loss", "base", c.weights.base);
    bind("loss", "sampler", c.weights.sampler);
    bind("loss", "lcm", c.weights.lcm);
    bind("loss", "lcm_mean_over_dims", c.weights.lcm_mean_over_dims);
    bind("adamw", "beta1", c.adamw.beta1);
    bind("adamw", "beta2", c.adamw.beta2);
    bind("adamw", "eps", c.adamw.eps);
    bind("adamw", "weight_decay", c.adamw.weight_decay);
    bind("eval", "every", c.eval_every);
    bind("eval", "prompts", c.eval_prompts);
    bind("eval", "max_new", c.eval_max_new);
    bind("eval", "probe_sequences", c.probe_sequences);
    bind("divergence", "factor", c.divergence_factor);
    bind("divergence", "patience", c.divergence_patience);
  }

  void load(const YAML::Node& root) {
    if (!root || root.IsNull()) return;
    if (!root.IsMap()) throw ConfigError("config root must be a mapping of sections");
    for (const auto& sec : root) {
      const auto section = sec.first.as<std::string>();
      if (!sec.second.IsMap()) throw ConfigError("section '" + section + "' must be a mapping");
      for (const auto& kv : sec.second) {
        const auto key = section + "." + kv.first.as<std::string>();
        auto it = std::find_if(fields_.begin(), fields_.end(), [&](const Field& f) { return f.name == key; });
        if (it == fields_.end()) throw ConfigError("unknown config key '" + key + "'");
        try {
          it->set(kv.second);
        } catch (const YAML::Exception&) {
          throw ConfigError("bad value for '" + key + "'");
        }
      }
    }
  }

  std::string dump() const {
    YAML::Emitter out;
    out.SetDoublePrecision(17);
    out << YAML::BeginMap;
    std::string open;
    for (const auto& f : fields_) {
      const auto section = f.name.substr(0, f.name.find('.'));
      if (section != open) {
        if (!open.empty()) out << YAML::EndMap;
        out << YAML::Key << section << YAML::Value << YAML::BeginMap;
        open = section;
      }
      out << YAML::Key << f.name.substr(section.size() + 1) << YAML::Value;
      f.emit(out);
    }
    out << YAML::EndMap << YAML::EndMap;
    return std::string(out.c_str()) + "\n";
  }

 private:
  struct Field {
    std::string name;
    std::function<void(const YAML::Node&)> set;
    std::function<void(YAML::Emitter&)> emit;
  };

  template <class T>
  void bind(const std::string& section, const std::string& key, T& ref) {
    fields_.push_back({section + "." + key, [&ref](const YAML::Node& n) { ref = n.as<T>(); },
                       [&ref](YAML::Emitter& e) {
                         if constexpr (std::is_same_v<T, std::string>) {
                           e << YAML::DoubleQuoted << ref;
                         } else {
                           e << ref;
                         }
                       }});
  }

  std::vector<Field> fields_;
};

TrainConfig load_train_config(const std::string& path) {
  if (!fs::exists(path)) throw IoError("config file not found: " + path);
  TrainConfig cfg;
  ConfigSchema schema(cfg);
  try {
    schema.load(YAML::LoadFile(path));
  } catch (const YAML::ParserException& e) {
    throw ConfigError(std::string("config parse error: ") + e.what());
  }
  cfg.validate();
  return cfg;
}

std::string dump_train_config(TrainConfig cfg) { return ConfigSchema(cfg).dump(); }

// ---------------------------------------------------------------------------

void write_file(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("write failed: " + path.string());
}

struct LoadedCheckpoint {
  Checkpoint ck;
  Vocabulary vocab;
  CorpusSpec corpus;
  std::string path;
  bool lcm_trained() const {
    auto it = ck.meta.find("train.lcm_weight");
    return it != ck.meta.end() && std::stod(it->second) > 0;
  }
};

LoadedCheckpoint open_checkpoint(const std::string& path) {
  LoadedCheckpoint l{load_checkpoint(path), {}, {}, path};
  auto chars = l.ck.meta.find("vocab.chars");
  if (chars == l.ck.meta.end()) throw IoError(path + ": checkpoint has no vocabulary");
  l.vocab = Vocabulary(chars->second);
  l.corpus = CorpusSpec::from_key_values(l.ck.meta);
  return l;
}

std::vector<TokenId> encode_prompt(const LoadedCheckpoint& l, const std::string& text) {
  try {
    return l.vocab.encode(text);
  } catch (const std::invalid_argument& e) {
    throw UsageError(std::string("--prompt: ") + e.what());
  }
}

// "heldout:N" draws from the checkpoint's corpus generator; "random:N" draws
// uniform token prompts of length 1..8.
std::vector<std::vector<TokenId>> build_suite(const LoadedCheckpoint& l, const std::string& suite,
                                              std::uint64_t seed) {
  const auto colon = suite.find(':');
  if (colon == std::string::npos) throw UsageError("--suite must look like heldout:N or random:N");
  const std::string kind = suite.substr(0, colon);
  std::size_t n = 0;
  try {
    n = std::stoull(suite.substr(colon + 1));
  } catch (const std::exception&) {
    throw UsageError("--suite count is not a number: " + suite);
  }
  if (n == 0) throw UsageError("--suite needs at least one prompt");
  if (kind == "heldout") return heldout_prompts(l.corpus, n, seed);
  if (kind == "random") {
    Rng rng(seed, "cli.random-suite");
    const auto vocab = std::int64_t(l.ck.model.config.base_vocab());
    std::vector<std::vector<TokenId>> out(n);
    for (auto& p : out) {
      p.resize(std::size_t(rng.integer(1, 8)));
      for (auto& t : p) t = TokenId(rng.integer(0, vocab - 1));
    }
    return out;
  }
  throw UsageError("unknown suite kind '" + kind + "' (heldout or random)");
}

std::pair<std::size_t, std::size_t> parse_k_range(const std::string& s, std::size_t k_train) {
  if (s.empty()) return {1, k_train};
  std::size_t lo = 0, hi = 0;
  try {
    const auto dash = s.find('-');
    lo = std::stoull(s.substr(0, dash));
    hi = dash == std::string::npos ? lo : std::stoull(s.substr(dash + 1));
  } catch (const std::exception&) {
    throw UsageError("--k-range must look like 1-4 or 3");
  }
  if (lo < 1 || hi < lo || hi > k_train) {
    throw UsageError("--k-range must lie within 1-" + std::to_string(k_train));
  }
  return {lo, hi};
}

std::vector<Strategy> parse_strategies(const std::string& s) {
  std::vector<Strategy> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      out.push_back(parse_strategy(item));
    } catch (const std::exception& e) {
      throw UsageError(std::string("--strategies: ") + e.what());
    }
  }
  if (out.empty()) throw UsageError("--strategies is empty");
  return out;
}

Strategy strategy_flag(const std::string& s) {
  try {
    return parse_strategy(s);
  } catch (const std::exception& e) {
    throw UsageError(std::string("--strategy: ") + e.what());
  }
}

// ---------------------------------------------------------------------------

struct GenDataArgs {
  std::string task = "pattern";
  std::size_t size = 512;
  std::uint64_t seed = 1;
  std::string out;
  std::size_t seq_len = 24;
  std::size_t alphabet = 8;
  std::size_t motif_bank = 0;
  std::size_t digits = 2;
  std::string path;
};

int cmd_gen_data(const GenDataArgs& a) {
  CorpusSpec spec;
  spec.task = a.task;
  spec.size = a.size;
  spec.seed = a.seed;
  spec.seq_len = a.seq_len;
  spec.alphabet = a.alphabet;
  spec.motif_bank = a.motif_bank;
  spec.digits = a.digits;
  spec.path = a.path;
  const auto vocab = derive_vocabulary(spec);
  std::ostringstream os;
  for (const auto& ex : generate_corpus(spec)) {
    nlohmann::json j;
    j["text"] = vocab.decode(ex.tokens);
    j["tokens"] = ex.tokens;
    j["loss_flags"] = ex.loss_flags;
    j["prompt_len"] = ex.prompt_len;
    os << j.dump() << '\n';
  }
  if (a.out.empty() || a.out == "-") {
    std::cout << os.str();
  } else {
    write_file(a.out, os.str());
  }
  return kOk;
}

struct TrainArgs {
  std::string config;
  std::string out;
  std::string base;
};

int cmd_train(const TrainArgs& a) {
  TrainConfig cfg = a.config.empty() ? TrainConfig{} : load_train_config(a.config);
  cfg.validate();
  fs::create_directories(a.out);
  const fs::path dir(a.out);
  write_file(dir / "config.yaml", dump_train_config(cfg));

  std::optional<ModelBundle<float>> base;
  if (!a.base.empty()) {
    auto ck = load_checkpoint(a.base);
    base = std::move(ck.model);
  } else {
    std::ofstream log(dir / "pretrain_metrics.csv");
    if (!log) throw IoError("cannot write pretrain metrics");
    log << metrics_header() << '\n';
    base = pretrain_base(cfg, [&log](const MetricsRow& r) { log << to_csv(r) << '\n'; });
    save_checkpoint((dir / "base.ckpt").string(), *base, nullptr, training_metadata(cfg));
  }

  std::ofstream metrics(dir / "metrics.csv");
  if (!metrics) throw IoError("cannot write metrics.csv");
  metrics << metrics_header() << '\n';
  auto res = finetune(cfg, *base, [&metrics](const MetricsRow& r) { metrics << to_csv(r) << '\n'; });
  metrics.flush();
  save_checkpoint((dir / "model.ckpt").string(), res.model, res.sampler ? &*res.sampler : nullptr,
                  training_metadata(cfg));
  if (!res.evals.empty()) {
    std::ostringstream ev;
    ev << "step,rate\n";
    for (const auto& e : res.evals) ev << e.step << ',' << std::setprecision(9) << e.rate << '\n';
    write_file(dir / "evals.csv", ev.str());
  }
  const auto& last = res.metrics.back().loss;
  std::cout << "trained " << cfg.steps << " steps: base_ce " << last.base_ce << ", sampler_ce "
            << last.sampler_ce << ", lcm " << last.lcm << "\n"
            << "probe NTP-only CE " << std::setprecision(12) << res.probe_ntp_ce_start << " -> "
            << res.probe_ntp_ce_end << "\n"
            << "wrote " << (dir / "model.ckpt").string() << '\n';
  return kOk;
}

struct DecodeArgs {
  std::string ckpt;
  std::string prompt;
  std::string strategy = "quadratic";
  std::size_t k = 0;
  std::size_t max_new = 64;
  bool no_sampler = false;
};

int cmd_decode(const DecodeArgs& a) {
  const auto l = open_checkpoint(a.ckpt);
  const auto& cfg = l.ck.model.config;
  DecodeOptions o;
  o.strategy = strategy_flag(a.strategy);
  o.k_eval = a.k == 0 ? cfg.k_masks : a.k;
  if (o.k_eval > cfg.k_masks) throw UsageError("--k exceeds the trained k of " + std::to_string(cfg.k_masks));
  o.max_new = a.max_new;
  o.eos = Vocabulary::kEos;
  o.use_sampler = !a.no_sampler;
  const auto prompt = encode_prompt(l, a.prompt);
  const auto head = l.ck.sampler && o.use_sampler ? &*l.ck.sampler : nullptr;
  const auto r = speculative_decode(l.ck.model, head, prompt, o);
  std::cout << a.prompt << l.vocab.decode(r.tokens) << '\n'
            << "tokens " << r.stats.generated << ", forward passes " << r.stats.steps << ", rate "
            << std::setprecision(6) << acceptance_rate(r.stats) << '\n';
  return kOk;
}

struct BenchArgs {
  std::vector<std::string> ckpts;
  std::string suite = "heldout:50";
  std::string strategies = "linear,quadratic";
  std::string k_range;
  bool ablate = false;
  std::size_t max_new = 48;
  std::uint64_t seed = 2024;
  std::string out;
};

struct BenchRow {
  std::string task;
  Strategy strategy;
  std::size_t k_eval;
  bool sampler;
  bool lcm;
  std::size_t rank;
  RateSummary rate;
  double ms_per_token;
};

int cmd_bench(const BenchArgs& a) {
  std::vector<BenchRow> rows;
  for (const auto& path : a.ckpts) {
    const auto l = open_checkpoint(path);
    const auto& cfg = l.ck.model.config;
    const auto prompts = build_suite(l, a.suite, a.seed);
    const auto [lo, hi] = parse_k_range(a.k_range, cfg.k_masks);
    std::vector<bool> sampler_modes = {l.ck.sampler.has_value()};
    if (a.ablate && l.ck.sampler) sampler_modes.push_back(false);
    for (Strategy s : parse_strategies(a.strategies)) {
      for (std::size_t k = lo; k <= hi; ++k) {
        for (bool sampler : sampler_modes) {
          DecodeOptions o;
          o.strategy = s;
          o.k_eval = k;
          o.max_new = a.max_new;
          o.eos = Vocabulary::kEos;
          o.use_sampler = sampler;
          const auto t0 = std::chrono::steady_clock::now();
          auto r = measure_acceptance(l.ck.model, sampler ? &*l.ck.sampler : nullptr, prompts, o);
          const double ms =
              std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
          for (double v : r.rates) {
            if (v < 1.0 || v > double(k + 1)) throw std::logic_error("acceptance rate out of range");
          }
          rows.push_back({l.corpus.task, s, k, sampler, l.lcm_trained(), cfg.lora_rank, r,
                          r.tokens ? ms / double(r.tokens) : 0.0});
        }
      }
    }
  }
  std::stable_sort(rows.begin(), rows.end(), [](const BenchRow& x, const BenchRow& y) {
    return std::tie(x.task, x.k_eval) < std::tie(y.task, y.k_eval);
  });

  std::ostringstream csv;
  csv << "task,strategy,k_eval,sampler,lcm,lora_rank,mean,stdev,prompts,wall_ms_per_token\n";
  for (const auto& r : rows) {
    csv << r.task << ',' << to_string(r.strategy) << ',' << r.k_eval << ',' << (r.sampler ? "on" : "off") << ','
        << (r.lcm ? "on" : "off") << ',' << r.rank << ',' << std::setprecision(6) << r.rate.mean << ','
        << r.rate.stdev << ',' << r.rate.rates.size() << ',' << r.ms_per_token << '\n';
  }
  if (!a.out.empty()) write_file(a.out, csv.str());

  std::printf("%-10s %-10s %6s %8s %5s %5s %16s %8s %12s\n", "task", "strategy", "k_eval", "sampler", "lcm",
              "rank", "rate", "prompts", "ms/token");
  for (const auto& r : rows) {
    std::printf("%-10s %-10s %6zu %8s %5s %5zu %8.3f +- %5.3f %8zu %12.4f\n", r.task.c_str(),
                to_string(r.strategy), r.k_eval, r.sampler ? "on" : "off", r.lcm ? "on" : "off", r.rank,
                r.rate.mean, r.rate.stdev, r.rate.rates.size(), r.ms_per_token);
  }
  return kOk;
}

struct ProbeArgs {
  std::string ckpt;
  std::string prompt;
  std::string future;
};

int cmd_probe(const ProbeArgs& a) {
  const auto l = open_checkpoint(a.ckpt);
  const auto prompt = encode_prompt(l, a.prompt);
  std::vector<TokenId> future;
  try {
    future = l.vocab.encode(a.future, false);
  } catch (const std::invalid_argument& e) {
    throw UsageError(std::string("--future: ") + e.what());
  }
  const std::size_t k = l.ck.model.config.k_masks;
  if (future.empty() || future.size() > k) {
    throw UsageError("--future must hold 1.." + std::to_string(k) + " characters");
  }
  const auto ranks = future_rank_probe(l.ck.model, prompt, future, k);
  std::cout << "position,token,rank\n";
  for (std::size_t j = 0; j < ranks.size(); ++j) {
    std::cout << "m" << j + 1 << ',' << l.vocab.token_text(future[j]) << ',' << ranks[j] << '\n';
  }
  return kOk;
}

struct VerifyArgs {
  std::string ckpt;
  std::string suite = "random:100";
  std::size_t max_new = 32;
  std::uint64_t seed = 7;
};

int cmd_verify(const VerifyArgs& a) {
  const auto l = open_checkpoint(a.ckpt);
  const auto& model = l.ck.model;
  const auto prompts = build_suite(l, a.suite, a.seed);
  const auto head = l.ck.sampler ? &*l.ck.sampler : nullptr;
  std::size_t runs = 0;
  for (std::size_t pi = 0; pi < prompts.size(); ++pi) {
    const auto ref = greedy_autoregressive(model, prompts[pi], a.max_new);
    for (Strategy s : {Strategy::kLinear, Strategy::kQuadratic}) {
      for (std::size_t k = 1; k <= model.config.k_masks; ++k) {
        DecodeOptions o;
        o.strategy = s;
        o.k_eval = k;
        o.max_new = a.max_new;
        const auto got = speculative_decode(model, head, prompts[pi], o).tokens;
        ++runs;
        if (got != ref) {
          std::size_t i = 0;
          while (i < got.size() && i < ref.size() && got[i] == ref[i]) ++i;
          std::cout << "MISMATCH prompt " << pi << " strategy " << to_string(s) << " k_eval " << k
                    << ": first divergent index " << i << '\n';
          return kVerifyFailed;
        }
      }
    }
  }
  std::cout << "verified " << prompts.size() << " prompts, " << runs << " decodes match greedy output\n";
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Gated-LoRA multi-token prediction toolkit"};
  app.require_subcommand(1);

  GenDataArgs gen;
  auto* g = app.add_subcommand("gen-data", "write a synthetic corpus as JSON lines");
  g->add_option("--task", gen.task, "pattern | arithmetic | file")->check(CLI::IsMember({"pattern", "arithmetic", "file"}));
  g->add_option("--size", gen.size, "number of sequences");
  g->add_option("--seed", gen.seed, "corpus seed");
  g->add_option("--out", gen.out, "output path (stdout when omitted)");
  g->add_option("--seq-len", gen.seq_len, "tokens per sequence");
  g->add_option("--alphabet", gen.alphabet, "pattern alphabet size");
  g->add_option("--motif-bank", gen.motif_bank, "shared motifs (0: fresh per sequence)");
  g->add_option("--digits", gen.digits, "arithmetic operand digits");
  g->add_option("--path", gen.path, "text file for the file task");

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "pretrain a base model and fine-tune for multi-token prediction");
  t->add_option("--config", tr.config, "YAML config (defaults when omitted)");
  t->add_option("--out", tr.out, "run directory")->required();
  t->add_option("--base", tr.base, "reuse a pretrained base checkpoint instead of pretraining");

  DecodeArgs de;
  auto* d = app.add_subcommand("decode", "speculative greedy decoding of one prompt");
  d->add_option("--ckpt", de.ckpt, "checkpoint")->required();
  d->add_option("--prompt", de.prompt, "prompt text")->required();
  d->add_option("--strategy", de.strategy, "linear | quadratic");
  d->add_option("--k", de.k, "masks per step (default: trained k)");
  d->add_option("--max-new", de.max_new, "token budget");
  d->add_flag("--no-sampler", de.no_sampler, "speculate with the mask argmax");

  BenchArgs be;
  auto* b = app.add_subcommand("bench", "acceptance-rate sweep over k_eval");
  b->add_option("--ckpt", be.ckpts, "checkpoint(s)")->required();
  b->add_option("--suite", be.suite, "heldout:N | random:N");
  b->add_option("--strategies", be.strategies, "comma-separated strategies");
  b->add_option("--k-range", be.k_range, "k_eval range such as 1-4");
  b->add_flag("--ablate", be.ablate, "also measure without the sampler head");
  b->add_option("--max-new", be.max_new, "token budget per prompt");
  b->add_option("--seed", be.seed, "suite seed");
  b->add_option("--out", be.out, "CSV report path");

  ProbeArgs pr;
  auto* p = app.add_subcommand("probe", "rank of the true future tokens at each mask position");
  p->add_option("--ckpt", pr.ckpt, "checkpoint")->required();
  p->add_option("--prompt", pr.prompt, "prompt text")->required();
  p->add_option("--future", pr.future, "true continuation after the next token, one character per mask")->required();

  VerifyArgs ve;
  auto* v = app.add_subcommand("verify", "check speculative output against greedy decoding");
  v->add_option("--ckpt", ve.ckpt, "checkpoint")->required();
  v->add_option("--suite", ve.suite, "heldout:N | random:N");
  v->add_option("--max-new", ve.max_new, "token budget per prompt");
  v->add_option("--seed", ve.seed, "suite seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kUsage;
  }

  try {
    if (*g) return cmd_gen_data(gen);
    if (*t) return cmd_train(tr);
    if (*d) return cmd_decode(de);
    if (*b) return cmd_bench(be);
    if (*p) return cmd_probe(pr);
    if (*v) return cmd_verify(ve);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kUsage;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kUsage;
  } catch (const ChecksumError& e) {
    std::cerr << "corrupt checkpoint: " << e.what() << '\n';
    return kCorrupt;
  } catch (const VersionError& e) {
    std::cerr << "corrupt checkpoint: " << e.what() << '\n';
    return kCorrupt;
  } catch (const IoError& e) {
    std::cerr << "i/o error: " << e.what() << '\n';
    return kIo;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "i/o error: " << e.what() << '\n';
    return kIo;
  } catch (const DivergenceError& e) {
    std::cerr << "training diverged: " << e.what() << '\n';
    return kDiverged;
  }
  return kUsage;
}
