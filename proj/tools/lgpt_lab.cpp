// lgpt_lab: data generation, LM pretraining, training, evaluation, gradient
// checks, ablations and report rendering.
//
// Exit codes: 0 success, 1 invalid input or usage, 2 runtime failure.

#include <cstdio>
#include <cstdlib>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "lgpt/report.hpp"

namespace {

using namespace lgpt;
using nlohmann::json;

json read_json(const std::string& path) {
  try {
    return json::parse(read_file(path));
  } catch (const json::exception& e) {
    throw ValidationError(path + ": invalid JSON: " + e.what());
  }
}

RunConfig load_config(const std::string& path) {
  if (path.empty()) return RunConfig{}.normalized();
  try {
    return run_config_from_json(read_json(path));
  } catch (const ConfigError& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

std::vector<std::uint64_t> parse_seeds(const std::string& s) {
  std::vector<std::uint64_t> out;
  std::stringstream in(s);
  std::string tok;
  while (std::getline(in, tok, ',')) {
    if (tok.empty() || tok.find_first_not_of("0123456789") != std::string::npos) {
      throw ConfigError("--seeds: expected comma-separated non-negative integers, got '" + s + "'");
    }
    out.push_back(std::stoull(tok));
  }
  if (out.empty()) throw ConfigError("--seeds: empty list");
  return out;
}

std::size_t default_jobs() {
  if (const char* env = std::getenv("LGPT_LAB_JOBS")) {
    const std::string v = env;
    if (v.empty() || v.find_first_not_of("0123456789") != std::string::npos || std::stoull(v) == 0) {
      throw ConfigError("LGPT_LAB_JOBS must be a positive integer, got '" + v + "'");
    }
    return std::stoull(v);
  }
  return 1;
}

void write_json(const std::string& path, const json& j) { write_file_atomic(path, j.dump(2) + "\n"); }

json encoder_file(const RunConfig& cfg, const PromptEncoder& enc) {
  json j = parameters_to_json(enc.params);
  j["config"] = to_json(cfg);
  return j;
}

std::string pct(double x) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4f", x);
  return buf;
}

// --- commands ---------------------------------------------------------------

struct GenDataArgs {
  std::string task, out;
  std::size_t n = 0, k = 4, entities = 3, attributes = 2;
  std::uint64_t seed = 1;
};

int cmd_gen_data(const GenDataArgs& a) {
  const TaskKind task = task_from_string(a.task);
  DatasetSplit split;
  switch (task) {
    case TaskKind::attribute_lookup: split = gen_attribute_lookup_task(a.n, a.entities, a.attributes, a.seed); break;
    case TaskKind::multifact: split = gen_multifact_task(a.n, a.k, a.seed); break;
    case TaskKind::stance: split = gen_stance_task(a.n, a.seed); break;
  }
  save_dataset(a.out, split);
  std::cout << "wrote " << split.size() << " examples (" << split.train.size() << " train, "
            << split.validation.size() << " validation, " << split.test.size() << " test) to " << a.out << "\n";
  return 0;
}

struct PretrainArgs {
  std::string out;
  std::uint64_t seed = 1;
  std::size_t sequences = 4000;
  PretrainConfig pre;
  LmConfig lm;
};

int cmd_pretrain(PretrainArgs a) {
  const Vocab vocab(task_vocabulary());
  a.lm.vocab_size = vocab.size();
  a.lm.validate();
  if (a.pre.max_steps == 0 || a.pre.eval_every == 0) throw ConfigError("--steps and --eval-every must be positive");
  if (!(a.pre.lr > 0.0)) throw ConfigError("--lr must be positive");
  if (a.sequences == 0) throw ConfigError("--sequences must be positive");
  a.pre.seed = a.seed;
  TinyDecoderLM lm = TinyDecoderLM::create(a.lm, a.seed);
  const auto rep = pretrain_lm(lm, vocab, pretrain_corpus(a.sequences, a.seed), a.pre);
  save_lm(a.out, lm, vocab);
  std::cout << json{{"initial_perplexity", rep.initial_perplexity},
                    {"final_perplexity", rep.final_perplexity},
                    {"steps", rep.steps},
                    {"digest", digest_hex(rep.digest)},
                    {"checkpoint", a.out},
                    {"vocab", vocab_path_for(a.out).string()}}
                   .dump(2)
            << "\n";
  return 0;
}

struct TrainArgs {
  std::string config, data, lm, out, params_out;
  std::optional<std::uint64_t> seed;
  bool quiet = false;
};

int cmd_train(const TrainArgs& a) {
  RunConfig cfg = load_config(a.config);
  if (a.seed) cfg.seed = *a.seed;
  cfg.validate();
  const DatasetSplit data = load_dataset(a.data);
  const LoadedLm loaded = load_lm(a.lm);
  const LogFn log = a.quiet ? LogFn([](const std::string&) {}) : LogFn(log_to_stderr);
  const TrainResult res = train(cfg, data, loaded.lm, loaded.vocab, log);
  write_json(a.out, to_json(res.report));
  if (!a.params_out.empty()) write_json(a.params_out, encoder_file(res.report.config, res.encoder));
  std::cout << res.report.config.arm_label() << " seed " << cfg.seed << ": test accuracy "
            << (res.report.test_accuracy ? pct(*res.report.test_accuracy) : std::string("n/a"))
            << ", best validation " << pct(res.report.best_validation_accuracy) << " at step "
            << res.report.best_step << ", lm digest unchanged\n";
  return 0;
}

struct EvalArgs {
  std::string params, data, lm, split = "test", out;
};

int cmd_eval(const EvalArgs& a) {
  const json pj = read_json(a.params);
  if (!pj.contains("config")) throw ValidationError(a.params + ": missing 'config'");
  const RunConfig cfg = run_config_from_json(pj["config"]);
  PromptEncoder enc = PromptEncoder::create(cfg.encoder(), cfg.seed);
  parameters_from_json(enc.params, pj);
  const DatasetSplit data = load_dataset(a.data);
  const std::vector<QAExample>* part = nullptr;
  if (a.split == "train") part = &data.train;
  else if (a.split == "validation") part = &data.validation;
  else if (a.split == "test") part = &data.test;
  else throw ConfigError("--split must be train, validation or test");
  const LoadedLm loaded = load_lm(a.lm);
  if (loaded.lm.width() != cfg.d_llm) throw ConfigError("encoder d_llm does not match the LM width");
  const EvalResult r = evaluate(enc, *part, loaded.lm, loaded.vocab, cfg.max_answer_tokens);
  const json out{{"config", to_json(cfg)}, {"split", a.split},   {"accuracy", r.accuracy},
                 {"correct", r.correct},   {"total", r.total},   {"overflow", r.overflow}};
  if (!a.out.empty()) write_json(a.out, out);
  std::cout << out.dump(2) << "\n";
  return 0;
}

struct GradcheckArgs {
  std::string config, out;
  GradCheckOptions opt;
};

int cmd_gradcheck(const GradcheckArgs& a) {
  const RunConfig cfg = load_config(a.config);
  if (a.opt.coords_per_group == 0) throw ConfigError("--coords must be positive");
  const auto checks = gradient_check_suite(cfg, a.opt);
  bool ok = true;
  json arr = json::array();
  for (const auto& c : checks) {
    char line[256];
    std::snprintf(line, sizeof line, "%-12s coords=%zu max_rel_err=%.3e %s", c.group.c_str(), c.coordinates,
                  c.max_rel_error, c.passed ? "PASS" : "FAIL");
    std::cout << line << (c.passed ? "" : "  " + c.failure) << "\n";
    ok = ok && c.passed;
    arr.push_back({{"group", c.group},
                   {"coordinates", c.coordinates},
                   {"max_rel_error", c.max_rel_error},
                   {"passed", c.passed},
                   {"failure", c.failure}});
  }
  if (!a.out.empty()) write_json(a.out, {{"config", to_json(cfg)}, {"groups", arr}, {"passed", ok}});
  return ok ? 0 : 2;
}

struct AblateArgs {
  std::string preset, config, data, lm, seeds = "1,2,3", out, runs_out;
  std::size_t jobs = 1;
  bool quiet = false;
};

ReportFormat format_for_path(const std::string& path) {
  const auto ext = std::filesystem::path(path).extension().string();
  return ext == ".md" ? ReportFormat::md : ReportFormat::csv;
}

int cmd_ablate(const AblateArgs& a) {
  const RunConfig base = load_config(a.config);
  const auto matrix = preset_matrix(a.preset, base);
  const auto seeds = parse_seeds(a.seeds);
  if (a.jobs == 0) throw ConfigError("--jobs must be positive");
  const DatasetSplit data = load_dataset(a.data);
  const LoadedLm loaded = load_lm(a.lm);
  if (loaded.lm.width() != base.d_llm) throw ConfigError("config d_llm does not match the LM width");
  const LogFn log = a.quiet ? LogFn([](const std::string&) {}) : LogFn(log_to_stderr);
  const auto results = ablate(matrix, data, loaded.lm, loaded.vocab, seeds, a.jobs, log);
  const ReportTable table = summarize(results);
  const std::string runs_out = a.runs_out.empty() ? a.out + ".runs.json" : a.runs_out;
  write_json(runs_out, ablation_to_json(results));
  write_file_atomic(a.out, render(table, format_for_path(a.out)));
  std::cout << render_markdown(table);
  const bool any_ok = std::any_of(results.begin(), results.end(), [](const ArmResult& r) { return r.report.has_value(); });
  return any_ok ? 0 : 2;
}

struct ReportArgs {
  std::vector<std::string> inputs;
  std::string format = "md", out;
};

int cmd_report(const ReportArgs& a) {
  const ReportFormat fmt = report_format_from_string(a.format);
  std::vector<ArmResult> all;
  for (const auto& path : a.inputs) {
    auto rs = results_from_json(read_json(path));
    all.insert(all.end(), std::make_move_iterator(rs.begin()), std::make_move_iterator(rs.end()));
  }
  const std::string text = render(summarize(all), fmt);
  if (a.out.empty()) std::cout << text;
  else write_file_atomic(a.out, text);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Graph soft prompting lab: LGPT pooling and early query fusion over a frozen tiny LM"};
  app.require_subcommand(1);

  GenDataArgs gen;
  auto* c_gen = app.add_subcommand("gen-data", "generate a synthetic QA dataset as JSONL");
  c_gen->add_option("--task", gen.task, "attribute_lookup | multifact | stance")->required();
  c_gen->add_option("--n", gen.n, "number of examples")->required();
  c_gen->add_option("--seed", gen.seed, "generator seed");
  c_gen->add_option("--out", gen.out, "output JSONL path")->required();
  c_gen->add_option("--k", gen.k, "multifact: facts per answer");
  c_gen->add_option("--entities", gen.entities, "attribute_lookup: entities per graph");
  c_gen->add_option("--attributes", gen.attributes, "attribute_lookup: attributes per entity");

  PretrainArgs pre;
  auto* c_pre = app.add_subcommand("pretrain-lm", "pretrain and freeze the tiny decoder LM");
  c_pre->add_option("--out", pre.out, "checkpoint path (vocabulary written next to it)")->required();
  c_pre->add_option("--seed", pre.seed, "init, corpus and sampling seed");
  c_pre->add_option("--sequences", pre.sequences, "corpus size");
  c_pre->add_option("--steps", pre.pre.max_steps, "maximum optimizer steps");
  c_pre->add_option("--eval-every", pre.pre.eval_every, "held-out perplexity interval");
  c_pre->add_option("--patience", pre.pre.patience, "evaluations without improvement before stopping");
  c_pre->add_option("--lr", pre.pre.lr, "learning rate");
  c_pre->add_option("--d", pre.lm.d_model, "model width");
  c_pre->add_option("--layers", pre.lm.layers, "decoder blocks");
  c_pre->add_option("--heads", pre.lm.heads, "attention heads");
  c_pre->add_option("--d-ff", pre.lm.d_ff, "feed-forward width");
  c_pre->add_option("--max-len", pre.lm.max_len, "context length");

  TrainArgs tr;
  auto* c_train = app.add_subcommand("train", "train the prompt encoder against the frozen LM");
  c_train->add_option("--config", tr.config, "run config JSON (defaults when omitted)");
  c_train->add_option("--data", tr.data, "dataset JSONL")->required();
  c_train->add_option("--lm", tr.lm, "LM checkpoint")->required();
  c_train->add_option("--out", tr.out, "run report JSON")->required();
  c_train->add_option("--params-out", tr.params_out, "trained encoder parameters JSON");
  c_train->add_option("--seed", tr.seed, "overrides the config seed");
  c_train->add_flag("--quiet", tr.quiet, "no progress log");

  EvalArgs ev;
  auto* c_eval = app.add_subcommand("eval", "evaluate trained encoder parameters");
  c_eval->add_option("--params", ev.params, "encoder parameters JSON from train --params-out")->required();
  c_eval->add_option("--data", ev.data, "dataset JSONL")->required();
  c_eval->add_option("--lm", ev.lm, "LM checkpoint")->required();
  c_eval->add_option("--split", ev.split, "train | validation | test");
  c_eval->add_option("--out", ev.out, "result JSON");

  GradcheckArgs gc;
  auto* c_gc = app.add_subcommand("gradcheck", "finite-difference check of every trainable group");
  c_gc->add_option("--config", gc.config, "run config JSON (readout and fusion are used)");
  c_gc->add_option("--coords", gc.opt.coords_per_group, "coordinates per group");
  c_gc->add_option("--seed", gc.opt.seed, "coordinate sampling seed");
  c_gc->add_option("--out", gc.out, "result JSON");

  AblateArgs ab;
  ab.jobs = 0;  // resolved after parsing
  auto* c_ab = app.add_subcommand("ablate", "run a preset ablation matrix over several seeds");
  c_ab->add_option("--preset", ab.preset, "table3 | table4 | fig4")->required();
  c_ab->add_option("--config", ab.config, "base run config JSON");
  c_ab->add_option("--data", ab.data, "dataset JSONL")->required();
  c_ab->add_option("--lm", ab.lm, "LM checkpoint")->required();
  c_ab->add_option("--seeds", ab.seeds, "comma-separated seeds");
  auto* jobs_opt = c_ab->add_option("--jobs", ab.jobs, "parallel arms (default LGPT_LAB_JOBS or 1)");
  c_ab->add_option("--out", ab.out, "table path (.md renders markdown, otherwise CSV)")->required();
  c_ab->add_option("--runs-out", ab.runs_out, "per-run JSON (default <out>.runs.json)");
  c_ab->add_flag("--quiet", ab.quiet, "no progress log");

  ReportArgs rp;
  auto* c_rep = app.add_subcommand("report", "render run reports or ablation files as a table");
  c_rep->add_option("inputs", rp.inputs, "report or ablation JSON files")->required();
  c_rep->add_option("--format", rp.format, "md | csv");
  c_rep->add_option("--out", rp.out, "output path (stdout when omitted)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    std::cerr << app.help();
    return 1;
  }

  try {
    if (*c_gen) return cmd_gen_data(gen);
    if (*c_pre) return cmd_pretrain(pre);
    if (*c_train) return cmd_train(tr);
    if (*c_eval) return cmd_eval(ev);
    if (*c_gc) return cmd_gradcheck(gc);
    if (*c_ab) {
      if (jobs_opt->count() == 0) ab.jobs = default_jobs();
      return cmd_ablate(ab);
    }
    if (*c_rep) return cmd_report(rp);
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "failure: " << e.what() << "\n";
    return 2;
  }
  return 1;
}
