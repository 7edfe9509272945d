#pragma once

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "mesa/verify.hpp"

namespace mesa {

// Subcommand bodies behind tools/mesa. Each returns a process exit code.

enum ExitCode : int { kExitOk = 0, kExitVerifyFailed = 1, kExitUsage = 2, kExitDiverged = 3 };

namespace fs = std::filesystem;

// --out wins, then MESA_OUTPUT_DIR, then the config's output_dir.
inline fs::path resolve_output_dir(const ExperimentConfig& cfg, const std::string& out_flag) {
  if (!out_flag.empty()) return out_flag;
  if (const char* env = std::getenv("MESA_OUTPUT_DIR"); env && *env) return env;
  return cfg.output_dir;
}

inline fs::path seed_dir(const fs::path& out, std::uint64_t seed) {
  return out / ("seed_" + std::to_string(seed));
}

inline std::vector<std::uint64_t> selected_seeds(const ExperimentConfig& cfg,
                                                 std::optional<std::uint64_t> seed) {
  return seed ? std::vector<std::uint64_t>{*seed} : cfg.seeds;
}

inline TrainConfig seeded_train(const ExperimentConfig& cfg, std::uint64_t seed) {
  TrainConfig tc = cfg.train;
  tc.seed = seed;
  return tc;
}

// ---------------------------------------------------------------------------
// gen

inline TensorList gen_tensors(const ExperimentConfig& cfg, std::uint64_t seed) {
  cfg.train.task.validate();
  Rng rng(seed, stream_id(StreamPurpose::kGeneric, 0));
  const auto b = gen_sequences(cfg.train.task, cfg.gen_batch, rng);
  TensorList t = {tensor_from_batch("observations", b.observations),
                  tensor_from_batch("states", b.states)};
  std::vector<Matrix> w, c;
  for (const auto& teacher : b.teachers) {
    w.push_back(teacher.w);
    c.push_back(teacher.c);
  }
  t.push_back(tensor_from_batch("teacher.w", w));
  t.push_back(tensor_from_batch("teacher.c", c));
  return t;
}

inline int cmd_gen(const ExperimentConfig& cfg, const fs::path& out, std::optional<std::uint64_t> seed) {
  const std::uint64_t s = seed.value_or(cfg.seeds.front());
  const fs::path file = out / ("sequences_seed_" + std::to_string(s) + ".mesa");
  save_container(file, gen_tensors(cfg, s));
  std::cout << "wrote " << file.string() << "\n";
  return kExitOk;
}

// ---------------------------------------------------------------------------
// train

struct TrainOptions {
  std::optional<std::uint64_t> seed;
  bool resume = false;
  std::string checkpoint;  // resume source; defaults to the seed's checkpoint
};

inline int cmd_train(const ExperimentConfig& cfg, const fs::path& out, const TrainOptions& opt = {}) {
  int code = kExitOk;
  std::vector<std::vector<MetricsRow>> logs;
  for (std::uint64_t seed : selected_seeds(cfg, opt.seed)) {
    const TrainConfig tc = seeded_train(cfg, seed);
    tc.validate();
    const fs::path dir = seed_dir(out, seed);
    const fs::path ckpt = dir / "checkpoint.mesa";
    std::optional<TrainState> start;
    std::vector<MetricsRow> earlier;
    if (opt.resume) {
      const fs::path src = opt.checkpoint.empty() ? ckpt : fs::path(opt.checkpoint);
      start = load_checkpoint(src, tc.arch);
      if (fs::exists(dir / "metrics.csv")) {
        for (const auto& r : parse_metrics(parse_csv(read_file(dir / "metrics.csv")))) {
          if (r.step <= start->opt.step) earlier.push_back(r);
        }
      }
    }
    write_file_atomic(dir / "config.json", serialize_experiment(cfg));
    try {
      auto res = train_loop(tc, std::move(start), [&](std::size_t, const TrainState& st) {
        save_checkpoint(ckpt, st);
      });
      earlier.insert(earlier.end(), res.log.begin(), res.log.end());
      save_checkpoint(ckpt, res.state);
      metrics_table(earlier).save(dir / "metrics.csv");
      logs.push_back(earlier);
      std::cout << "seed " << seed << ": final eval loss " << format_double(earlier.back().eval_loss)
                << "\n";
    } catch (const TrainingDiverged& e) {
      std::cerr << "seed " << seed << " diverged: " << e.what() << "\n";
      save_checkpoint(dir / "last_good.mesa", e.last_good());
      code = kExitDiverged;
    }
  }
  if (!logs.empty() && !opt.seed) aggregate_metrics(logs).save(out / "aggregate.csv");
  return code;
}

// ---------------------------------------------------------------------------
// verify

inline int cmd_verify(const std::string& suite, const fs::path& out, const VerifyOptions& vo) {
  const VerifyReport rep = run_suite(suite, vo);
  const std::string text = to_json(rep).dump(2) + "\n";
  write_file_atomic(out / ("verify_" + suite + ".json"), text);
  for (const auto& c : rep.checks) {
    std::cout << (c.passed ? "PASS " : "FAIL ") << c.name << " error=" << c.error << " tol=" << c.tolerance;
    if (!c.message.empty()) std::cout << " (" << c.message << ")";
    std::cout << "\n";
  }
  return rep.passed() ? kExitOk : kExitVerifyFailed;
}

// ---------------------------------------------------------------------------
// analyses on a trained checkpoint

struct AnalysisOptions {
  std::optional<std::uint64_t> seed;
  std::string checkpoint;   // defaults to <out>/seed_N/checkpoint.mesa
  std::string tokens_file;  // overrides the request's prompt-token file
};

inline std::vector<AnalysisRequest> requests_of(const ExperimentConfig& cfg, const std::string& kind) {
  std::vector<AnalysisRequest> r;
  for (const auto& a : cfg.analyses) {
    if (a.kind == kind) r.push_back(a);
  }
  if (r.empty()) {
    AnalysisRequest a;
    a.kind = kind;
    r.push_back(a);
  }
  return r;
}

inline std::vector<Matrix> analysis_sequences(const TrainConfig& tc, std::size_t batch, std::uint64_t index) {
  Rng rng(tc.seed, stream_id(StreamPurpose::kEvalData, 1 + index));
  return gen_sequences(tc.task, batch, rng).observations;
}

inline void save_prompt(const fs::path& path, const PromptTokens& p) {
  TensorList t = {tensor_from_matrix("eos", p.eos)};
  if (!p.prefix.empty()) t.push_back(tensor_from_matrix("prefix", p.prefix));
  save_container(path, t);
}

inline PromptTokens load_prompt(const fs::path& path) {
  if (!fs::exists(path)) throw MissingPromptTokens("prompt token file " + path.string() + " not found");
  const TensorList t = load_container(path);
  PromptTokens p;
  for (const auto& x : t) {
    if (x.name == "eos") p.eos = tensor_to_matrix(x);
    if (x.name == "prefix") p.prefix = tensor_to_matrix(x);
  }
  return p;
}

inline std::string probe_file_name(const AnalysisRequest& a, std::size_t i) {
  return std::string("probe_") + probe_kind_name(a.probe) + "_" + std::to_string(i) + ".csv";
}

inline CsvTable probe_table(const ProbeReport& r, const char* index_name) {
  CsvTable t({"layer", index_name, "mse", "alt_mse", "target_gap"});
  for (std::size_t l = 0; l < r.layers.size(); ++l) {
    for (std::size_t i = 0; i < r.index.size(); ++i) {
      auto at = [&](const std::vector<std::vector<double>>& m) {
        return m.empty() ? std::string() : format_double(m[l][i]);
      };
      t.add_row(std::vector<std::string>{std::to_string(r.layers[l]), std::to_string(r.index[i]),
                                         format_double(r.mse[l][i]), at(r.alt_mse), at(r.target_gap)});
    }
  }
  return t;
}

inline void run_analysis(const std::string& kind, const ExperimentConfig& cfg, const TrainConfig& tc,
                         const ParamMap& params, const fs::path& dir, const AnalysisOptions& opt) {
  const auto& arch = tc.arch;
  const auto reqs = requests_of(cfg, kind);
  for (std::size_t i = 0; i < reqs.size(); ++i) {
    const AnalysisRequest& a = reqs[i];
    const std::string tag = std::to_string(i);
    if (kind == "probe") {
      const auto seqs = analysis_sequences(tc, a.batch, 0);
      ProbeReport r;
      if (a.probe == ProbeKind::kToken) {
        r.kind = ProbeKind::kToken;
        for (std::size_t layer : a.layers) {
          const auto one = token_probe(params, arch, tc.encoding, seqs, layer, a.t, a.lags, a.reg, tc.seed);
          r.layers.push_back(layer);
          r.index = one.index;
          r.mse.push_back(one.mse[0]);
        }
        probe_table(r, "lag").save(dir / probe_file_name(a, i));
      } else if (a.probe == ProbeKind::kTarget) {
        r = target_probe(params, arch, tc.encoding, seqs, a.layers, a.t_grid, a.reg, tc.seed);
        probe_table(r, "t").save(dir / probe_file_name(a, i));
      } else {
        r = precond_probe(params, arch, tc.encoding, seqs, a.layers, a.t_grid, a.lambda, a.reg, tc.seed);
        probe_table(r, "t").save(dir / probe_file_name(a, i));
      }
    } else if (kind == "icl") {
      const std::string tokens = !opt.tokens_file.empty() ? opt.tokens_file : a.tokens_file;
      PromptTokens prompt;
      if (a.variant != IclVariant::kPlain) {
        if (tokens.empty()) throw MissingPromptTokens("icl variant " + std::string(icl_variant_name(a.variant)) +
                                                      " needs a tuned-token file");
        prompt = load_prompt(tokens);
      }
      Rng rng(tc.seed, stream_id(StreamPurpose::kIcl, 1));
      const auto tasks = gen_icl_tasks(tc.task.n_s, a.n_pairs, a.tasks, rng);
      const auto model = icl_eval(params, arch, tasks, a.variant, prompt);
      const auto lsq = lsq_icl_curve(tasks, a.lambda, false);
      const auto lsq_spur = lsq_icl_curve(tasks, a.lambda, true);
      CsvTable t({"i", "model_loss", "lsq_loss", "lsq_spurious_loss"});
      for (std::size_t k = 0; k < model.size(); ++k) {
        t.add_row(std::vector<double>{static_cast<double>(k + 1), model[k], lsq[k], lsq_spur[k]});
      }
      t.save(dir / ("icl_" + std::string(icl_variant_name(a.variant)) + "_" + tag + ".csv"));
    } else if (kind == "prompt") {
      PromptTuneConfig pc;
      pc.mode = a.variant;
      pc.steps = a.steps;
      pc.batch_size = a.batch;
      pc.lr = a.lr;
      pc.n_pairs = a.n_pairs;
      pc.eval_tasks = a.tasks;
      pc.seed = tc.seed;
      const auto res = tune_prompt_tokens(params, arch, pc);
      save_prompt(dir / ("prompt_" + std::string(icl_variant_name(a.variant)) + ".mesa"), res.tokens);
      CsvTable t({"i", "pre_loss", "post_loss"});
      for (std::size_t k = 0; k < res.pre_curve.size(); ++k) {
        t.add_row(std::vector<double>{static_cast<double>(k + 1), res.pre_curve[k], res.post_curve[k]});
      }
      t.save(dir / ("prompt_" + std::string(icl_variant_name(a.variant)) + "_" + tag + ".csv"));
    } else if (kind == "distill") {
      DistillConfig dc;
      dc.steps = a.steps;
      dc.batch_size = a.batch_size;
      dc.lr = a.lr;
      dc.seed = tc.seed;
      const auto res = distill_linear_layer(params, arch, tc.encoding, a.layer,
                                            analysis_sequences(tc, a.train_sequences, 1),
                                            analysis_sequences(tc, a.eval_sequences, 2), dc);
      CsvTable t({"layer", "distill_mse", "reference_loss", "swapped_loss", "loss_ratio"});
      t.add_row(std::vector<double>{static_cast<double>(a.layer), res.distill_mse, res.reference_loss,
                                    res.swapped_loss, res.loss_ratio});
      t.save(dir / ("distill_layer" + std::to_string(a.layer) + ".csv"));
      save_checkpoint(dir / ("distill_layer" + std::to_string(a.layer) + ".mesa"),
                      {res.swapped_params, init_optimizer(res.swapped_params)});
    } else if (kind == "maps") {
      const auto maps = export_attention_maps(params, arch, tc.encoding, analysis_sequences(tc, a.batch, 3), a.layer);
      for (std::size_t h = 0; h < maps.size(); ++h) {
        CsvTable t([&] {
          std::vector<std::string> hdr{"t"};
          for (std::size_t c = 0; c < maps[h].cols(); ++c) hdr.push_back("s" + std::to_string(c));
          return hdr;
        }());
        for (std::size_t r = 0; r < maps[h].rows(); ++r) {
          std::vector<double> row{static_cast<double>(r)};
          for (double v : maps[h].row(r)) row.push_back(v);
          t.add_row(row);
        }
        t.save(dir / ("maps_layer" + std::to_string(a.layer) + "_head" + std::to_string(h) + ".csv"));
      }
    } else if (kind == "sensitivity") {
      const auto seqs = analysis_sequences(tc, a.batch, 4);
      std::vector<double> mean(a.t + 1, 0.0);
      for (const auto& s : seqs) {
        const auto n = sensitivity_norms(params, arch, encode_tokens(s, tc.encoding), a.t);
        for (std::size_t k = 0; k < mean.size(); ++k) mean[k] += n[k] / static_cast<double>(seqs.size());
      }
      CsvTable t({"t_prime", "norm"});
      for (std::size_t k = 0; k < mean.size(); ++k) t.add_row(std::vector<double>{static_cast<double>(k), mean[k]});
      t.save(dir / ("sensitivity_t" + std::to_string(a.t) + ".csv"));
    } else {
      throw ConfigError("unknown analysis kind '" + kind + "'");
    }
  }
}

inline int cmd_analyze(const std::string& kind, const ExperimentConfig& cfg, const fs::path& out,
                       const AnalysisOptions& opt = {}) {
  analysis_keys(kind);  // rejects unknown kinds
  for (std::uint64_t seed : selected_seeds(cfg, opt.seed)) {
    const TrainConfig tc = seeded_train(cfg, seed);
    tc.validate();
    const fs::path dir = seed_dir(out, seed);
    const fs::path ckpt = opt.checkpoint.empty() ? dir / "checkpoint.mesa" : fs::path(opt.checkpoint);
    const TrainState st = load_checkpoint(ckpt, tc.arch);
    run_analysis(kind, cfg, tc, st.params, dir / "analysis", opt);
    std::cout << "seed " << seed << ": " << kind << " written to " << (dir / "analysis").string() << "\n";
  }
  return kExitOk;
}

}  // namespace mesa
