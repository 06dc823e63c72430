// SPDX-License-Identifier: Apache-2.0
//
// Command-line front end. Exit codes: 0 success, 2 configuration error,
// 3 numeric failure, 1 anything else.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "deskpt/data/corpus.hpp"
#include "deskpt/data/shard.hpp"
#include "deskpt/data/tokenizer.hpp"
#include "deskpt/diagnostics/diagnostics.hpp"
#include "deskpt/error.hpp"
#include "deskpt/optim/mup.hpp"
#include "deskpt/trainer/ablate.hpp"
#include "deskpt/trainer/ema.hpp"
#include "deskpt/trainer/trainer.hpp"

namespace fs = std::filesystem;
using namespace deskpt;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitNumeric = 3;

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw ConfigError("cannot read " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Files named directly, plus regular files found under named directories.
std::vector<fs::path> expand_inputs(const std::vector<std::string>& inputs) {
  std::vector<fs::path> out;
  for (const auto& in : inputs) {
    if (fs::is_directory(in)) {
      std::vector<fs::path> found;
      for (const auto& e : fs::recursive_directory_iterator(in)) {
        if (e.is_regular_file()) found.push_back(e.path());
      }
      std::sort(found.begin(), found.end());
      out.insert(out.end(), found.begin(), found.end());
    } else if (fs::is_regular_file(in)) {
      out.emplace_back(in);
    } else {
      throw ConfigError("no such input: " + in);
    }
  }
  if (out.empty()) throw ConfigError("no input files");
  return out;
}

// Plain files become one document each; .jsonl files hold one
// {"text": ..., "quality": ...} document per line.
void collect_documents(const std::vector<fs::path>& files, std::vector<std::string>& texts,
                       std::vector<float>& quality) {
  for (const auto& f : files) {
    if (f.extension() == ".jsonl") {
      std::ifstream in(f);
      std::string line;
      while (std::getline(in, line)) {
        if (line.empty()) continue;
        const auto j = nlohmann::json::parse(line);
        texts.push_back(j.at("text").get<std::string>());
        quality.push_back(j.contains("quality") && !j["quality"].is_null() ? j["quality"].get<float>()
                                                                            : std::numeric_limits<float>::quiet_NaN());
      }
    } else {
      texts.push_back(read_file(f));
      quality.push_back(std::numeric_limits<float>::quiet_NaN());
    }
  }
}

ShardSet load_data(const fs::path& dir, std::int64_t vocab) {
  auto shards = std::make_shared<const std::vector<TokenShard>>(read_shard_dir(dir));
  if (shards->empty()) throw ConfigError("no .shard files in " + dir.string());
  for (const auto& s : *shards) {
    if (static_cast<std::int64_t>(s.vocab_size) > vocab) {
      throw ConfigError("shard " + s.source_name + " vocabulary exceeds the model's");
    }
  }
  return shards;
}

std::vector<PackedBatch> eval_batches(ShardSet shards, std::int64_t batch, std::int64_t seq, std::int64_t n,
                                      std::uint64_t seed) {
  MixtureSpec spec;
  spec.seed = seed;
  for (const auto& s : *shards) {
    if (s.doc_count() > 0) spec.weights[s.source_name] = 1.0;
  }
  if (spec.weights.empty()) throw ConfigError("empty held-out set");
  BatchStream stream(std::move(shards), spec, batch, seq);
  std::vector<PackedBatch> out;
  for (std::int64_t i = 0; i < n; ++i) out.push_back(stream.next());
  return out;
}

struct EvalArgs {
  std::string ckpt, data;
  std::int64_t batch = 8, seq = 128, batches = 20;
  std::uint64_t seed = 0;
};

template <Real T>
int do_eval(const Checkpoint& ck, const EvalArgs& a) {
  auto model = model_from_checkpoint<T>(ck);
  const auto seq = std::min(a.seq, ck.meta.model.max_context);
  auto r = eval_loss(model, load_data(a.data, ck.meta.model.vocab_size), a.batch, seq, a.batches, a.seed);
  std::cout << nlohmann::json{{"loss", r.loss}, {"perplexity", r.perplexity}, {"tokens", r.tokens},
                              {"iteration", ck.meta.iteration}}
                   .dump()
            << '\n';
  return 0;
}

template <Real T>
int do_diag(const Checkpoint& ck, const EvalArgs& a, const std::string& report) {
  auto model = model_from_checkpoint<T>(ck);
  const auto seq = std::min(a.seq, ck.meta.model.max_context);
  const auto batches = eval_batches(load_data(a.data, ck.meta.model.vocab_size), a.batch, seq, a.batches, a.seed);
  auto records = diagnostics_report<T>(model, batches);
  records[0]["checkpoint"] = a.ckpt;
  records[0]["iteration"] = ck.meta.iteration;
  write_jsonl(report, records);
  std::printf("%-6s %-14s %-14s %-12s\n", "layer", "kurt(logits)", "kurt(resid)", "max|logit|");
  const auto layers = ck.meta.model.n_layers;
  for (std::int64_t l = 1; l <= layers; ++l) {
    double kl = NAN, kr = NAN, mx = NAN;
    for (const auto& r : records) {
      if (!r.contains("layer") || r["layer"] != l || r["value"].is_null()) continue;
      if (r["statistic"] == "kurtosis_attention_logits") kl = r["value"].template get<double>();
      if (r["statistic"] == "kurtosis_residual_stream") kr = r["value"].template get<double>();
      if (r["statistic"] == "max_abs_attention_logit") mx = r["value"].template get<double>();
    }
    std::printf("%-6lld %-14.4f %-14.4f %-12.4f\n", static_cast<long long>(l), kl, kr, mx);
  }
  std::printf("wrote %zu records to %s\n", records.size(), report.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"deskpt: desk-scale transformer pretraining lab"};
  app.require_subcommand(1);

  std::string config_path, resume_path;
  auto* train = app.add_subcommand("train", "Train from a run config");
  train->add_option("--config", config_path, "Run config (JSON)")->required();
  train->add_option("--resume", resume_path, "Checkpoint to resume from");

  std::string grid_path;
  auto* ablate = app.add_subcommand("ablate", "Run an ablation grid and print its table");
  ablate->add_option("--grid", grid_path, "Grid spec (JSON)")->required();

  double beta = 0.8;
  std::size_t last_n = 10;
  std::string ckpt_dir, ema_out, ema_mode = "recurrence";
  auto* ema = app.add_subcommand("ema", "Average the last checkpoints of a run");
  ema->add_option("--beta", beta, "Decay factor")->capture_default_str();
  ema->add_option("--last", last_n, "Number of newest checkpoints (0 = all)")->capture_default_str();
  ema->add_option("--mode", ema_mode, "recurrence or uniform")->capture_default_str();
  ema->add_option("ckpt_dir", ckpt_dir, "Directory of .dpck files")->required();
  ema->add_option("--out", ema_out, "Output checkpoint")->required();

  EvalArgs ev;
  auto* eval = app.add_subcommand("eval", "Held-out loss of a checkpoint");
  std::string diag_report;
  auto* diag = app.add_subcommand("diag", "Kurtosis, sink-mass and logit statistics of a checkpoint");
  for (auto* sub : {eval, diag}) {
    sub->add_option("--ckpt", ev.ckpt, "Checkpoint")->required();
    sub->add_option("--data", ev.data, "Directory of .shard files")->required();
    sub->add_option("--batch", ev.batch, "Rows per batch")->capture_default_str();
    sub->add_option("--seq", ev.seq, "Sequence length (capped at max_context)")->capture_default_str();
    sub->add_option("--batches", ev.batches, "Number of batches")->capture_default_str();
    sub->add_option("--seed", ev.seed, "Sampling seed")->capture_default_str();
  }
  diag->add_option("--report", diag_report, "JSON-lines output")->required();

  std::vector<std::string> tok_inputs;
  std::string tok_out, tok_bpe, tok_name;
  auto* tokenize = app.add_subcommand("tokenize", "Convert text files into a token shard");
  tokenize->add_option("--input", tok_inputs, "Text files, .jsonl files or directories")->required();
  tokenize->add_option("--out", tok_out, "Output .shard file (stem is the source name)")->required();
  tokenize->add_option("--bpe", tok_bpe, "BPE model (JSON); byte-level when omitted");

  std::vector<std::string> bpe_inputs;
  std::string bpe_out;
  std::int32_t bpe_vocab = 1024;
  auto* bpe = app.add_subcommand("bpe-train", "Train a BPE merge table");
  bpe->add_option("--input", bpe_inputs, "Text files, .jsonl files or directories")->required();
  bpe->add_option("--vocab", bpe_vocab, "Target vocabulary size (> 258)")->capture_default_str();
  bpe->add_option("--out", bpe_out, "Output model (JSON)")->required();

  SynthCorpusOptions synth_opts;
  std::string synth_out;
  auto* synth = app.add_subcommand("synth", "Write a synthetic prose/code/math corpus (train and heldout)");
  synth->add_option("--out", synth_out, "Output directory")->required();
  synth->add_option("--docs", synth_opts.docs_per_source, "Documents per source")->capture_default_str();
  synth->add_option("--mean-chars", synth_opts.mean_chars, "Mean document length")->capture_default_str();
  synth->add_option("--seed", synth_opts.seed, "Seed")->capture_default_str();

  CoordinateCheckOptions cc;
  auto* coord = app.add_subcommand("coord-check", "Residual-stream RMS across widths after a few steps");
  coord->add_option("--widths", cc.widths, "Model widths")->capture_default_str();
  coord->add_option("--steps", cc.steps, "Training steps")->capture_default_str();
  bool no_mup = false;
  coord->add_flag("--no-mup", no_mup, "Standard parametrization");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : kExitConfig;
  }

  try {
    if (*train) {
      const auto cfg = load_run_config(config_path);
      std::optional<fs::path> resume;
      if (!resume_path.empty()) resume = resume_path;
      const auto r = train_from_config(cfg, resume);
      std::cout << nlohmann::json{{"iterations", r.iterations},
                                  {"tokens", r.tokens},
                                  {"final_loss", r.final_loss},
                                  {"manifest", r.manifest}}
                       .dump(2)
                << '\n';
    } else if (*ablate) {
      const auto grid = load_ablation_grid(grid_path);
      const auto report = run_ablation(grid, [](const AblationRow& row, std::uint64_t seed, const RunConfig&,
                                                const TrainResult& r) {
        std::fprintf(stderr, "%s seed %llu: final loss %.4f\n", row.name.c_str(),
                     static_cast<unsigned long long>(seed), r.final_loss);
      });
      std::cout << report.markdown();
    } else if (*ema) {
      auto avg = posthoc_ema_dir(ckpt_dir, beta, last_n, parse_ema_mode(ema_mode));
      save_checkpoint(ema_out, avg);
      std::cout << "wrote " << ema_out << " (iteration " << avg.meta.iteration << ")\n";
    } else if (*eval || *diag) {
      const auto ck = load_checkpoint(ev.ckpt);
      const bool dbl = ck.meta.precision == "double";
      if (*eval) return dbl ? do_eval<double>(ck, ev) : do_eval<float>(ck, ev);
      return dbl ? do_diag<double>(ck, ev, diag_report) : do_diag<float>(ck, ev, diag_report);
    } else if (*tokenize) {
      std::vector<std::string> texts;
      std::vector<float> quality;
      collect_documents(expand_inputs(tok_inputs), texts, quality);
      const std::string name = fs::path(tok_out).stem().string();
      TokenShard shard;
      if (tok_bpe.empty()) {
        shard = shard_from_texts(name, texts, quality);
      } else {
        const auto model = nlohmann::json::parse(read_file(tok_bpe)).get<BpeModel>();
        shard = shard_from_texts(name, texts, model, quality);
      }
      write_shard(tok_out, shard);
      std::cout << "wrote " << shard.doc_count() << " documents, " << shard.token_ids.size() << " tokens to "
                << tok_out << '\n';
    } else if (*bpe) {
      std::vector<std::string> texts;
      std::vector<float> quality;
      collect_documents(expand_inputs(bpe_inputs), texts, quality);
      const auto r = bpe_train(texts, bpe_vocab);
      std::ofstream(bpe_out) << nlohmann::json(r.model).dump() << '\n';
      std::cout << "learned " << r.model.merges.size() << " merges (vocab " << r.model.vocab_size() << ")\n";
      if (!r.reached_vocab) {
        std::cerr << "warning: corpus too small, stopped before vocab " << bpe_vocab << '\n';
      }
    } else if (*synth) {
      write_synth_corpus(synth_out, synth_opts);
      std::cout << "wrote " << synth_out << "/train and " << synth_out << "/heldout\n";
    } else if (*coord) {
      cc.mup = !no_mup;
      const auto r = coordinate_check(cc);
      std::cout << nlohmann::json{{"widths", r.widths},
                                  {"rms_init", r.rms_init},
                                  {"rms_trained", r.rms_trained},
                                  {"max_ratio", r.max_ratio}}
                       .dump(2)
                << '\n';
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << '\n';
    return kExitNumeric;
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
