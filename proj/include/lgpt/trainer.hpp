#pragma once

// Training the prompt encoder against the frozen LM, evaluation, the
// finite-difference gradient check and the ablation runner.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <functional>
#include <iostream>
#include <mutex>
#include <numeric>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "lgpt/lm.hpp"
#include "lgpt/model.hpp"
#include "lgpt/tasks.hpp"

namespace lgpt {

struct RunConfig {
  TaskKind task = TaskKind::attribute_lookup;
  Readout readout = Readout::lgpt;
  Fusion fusion = Fusion::early;
  std::size_t n_tokens = 8;
  double lr = 1e-4;
  double weight_decay = 0.0;
  std::size_t max_steps = 5000;
  std::size_t eval_every = 500;
  std::uint64_t seed = 1;
  std::size_t d = 64;
  std::size_t d_llm = 64;
  std::size_t heads = 4;
  std::size_t query_layers = 1;
  std::size_t graph_layers = 4;
  std::size_t pool_layers = 1;
  bool pool_includes_query = true;
  std::size_t max_answer_tokens = 8;
  bool eval_train = false;

  /// Applies implied settings (mean pooling uses one prompt token).
  RunConfig normalized() const {
    RunConfig c = *this;
    if (c.readout == Readout::mean) c.n_tokens = 1;
    return c;
  }

  void validate() const {
    if (!(lr > 0.0) || !std::isfinite(lr)) throw ConfigError("lr must be positive");
    if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay must be non-negative");
    if (max_steps == 0) throw ConfigError("max_steps must be positive");
    if (eval_every == 0) throw ConfigError("eval_every must be positive");
    if (max_answer_tokens == 0) throw ConfigError("max_answer_tokens must be positive");
    encoder().validate();
  }

  EncoderConfig encoder() const {
    EncoderConfig e;
    e.readout = readout;
    e.fusion = fusion;
    e.n_tokens = readout == Readout::mean ? 1 : n_tokens;
    e.d = d;
    e.d_llm = d_llm;
    e.heads = heads;
    e.query_layers = query_layers;
    e.graph_layers = graph_layers;
    e.pool_layers = pool_layers;
    e.pool_includes_query = pool_includes_query;
    return e;
  }

  std::string arm_label() const {
    return std::string(to_string(readout)) + "/" + to_string(fusion) + "/n=" +
           std::to_string(readout == Readout::mean ? 1 : n_tokens);
  }

  bool operator==(const RunConfig&) const = default;
};

inline nlohmann::json to_json(const RunConfig& c) {
  return {{"task", to_string(c.task)},
          {"readout", to_string(c.readout)},
          {"fusion", to_string(c.fusion)},
          {"n_tokens", c.n_tokens},
          {"lr", c.lr},
          {"weight_decay", c.weight_decay},
          {"max_steps", c.max_steps},
          {"eval_every", c.eval_every},
          {"seed", c.seed},
          {"d", c.d},
          {"d_llm", c.d_llm},
          {"heads", c.heads},
          {"query_layers", c.query_layers},
          {"graph_layers", c.graph_layers},
          {"pool_layers", c.pool_layers},
          {"pool_includes_query", c.pool_includes_query},
          {"max_answer_tokens", c.max_answer_tokens},
          {"eval_train", c.eval_train}};
}

/// Reads keys present in `j` over the defaults; unknown keys are rejected.
/// The result is normalized and validated.
inline RunConfig run_config_from_json(const nlohmann::json& j, RunConfig c = {}) {
  if (!j.is_object()) throw ConfigError("run config must be a JSON object");
  try {
    for (auto it = j.begin(); it != j.end(); ++it) {
      const auto& k = it.key();
      const auto& v = it.value();
      // get<size_t>() silently wraps negatives
      if (v.is_number_integer() && !v.is_number_unsigned() && v.get<std::int64_t>() < 0)
        throw ConfigError("run config key '" + k + "' must be non-negative");
      if (k == "task") c.task = task_from_string(v.get<std::string>());
      else if (k == "readout") c.readout = readout_from_string(v.get<std::string>());
      else if (k == "fusion") c.fusion = fusion_from_string(v.get<std::string>());
      else if (k == "n_tokens") c.n_tokens = v.get<std::size_t>();
      else if (k == "lr") c.lr = v.get<double>();
      else if (k == "weight_decay") c.weight_decay = v.get<double>();
      else if (k == "max_steps") c.max_steps = v.get<std::size_t>();
      else if (k == "eval_every") c.eval_every = v.get<std::size_t>();
      else if (k == "seed") c.seed = v.get<std::uint64_t>();
      else if (k == "d") c.d = v.get<std::size_t>();
      else if (k == "d_llm") c.d_llm = v.get<std::size_t>();
      else if (k == "heads") c.heads = v.get<std::size_t>();
      else if (k == "query_layers") c.query_layers = v.get<std::size_t>();
      else if (k == "graph_layers") c.graph_layers = v.get<std::size_t>();
      else if (k == "pool_layers") c.pool_layers = v.get<std::size_t>();
      else if (k == "pool_includes_query") c.pool_includes_query = v.get<bool>();
      else if (k == "max_answer_tokens") c.max_answer_tokens = v.get<std::size_t>();
      else if (k == "eval_train") c.eval_train = v.get<bool>();
      else throw ConfigError("unknown run config key '" + k + "'");
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("run config: ") + e.what());
  }
  c = c.normalized();
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// Evaluation

/// Whitespace- and case-normalized answer text under the LM tokenizer.
inline std::string normalize_answer(const std::string& s, const Vocab& vocab) {
  return detokenize(tokenize(s, vocab), vocab);
}

struct EvalResult {
  double accuracy = 0.0;
  std::size_t correct = 0;
  std::size_t total = 0;
  std::size_t overflow = 0;  // counted as wrong
};

/// Exact-match accuracy of an arbitrary answering function.
inline EvalResult score_answers(const std::vector<QAExample>& examples, const Vocab& vocab,
                                const std::function<std::string(const QAExample&)>& answer) {
  EvalResult r;
  for (const auto& ex : examples) {
    ++r.total;
    if (normalize_answer(answer(ex), vocab) == normalize_answer(ex.answer, vocab)) ++r.correct;
  }
  r.accuracy = r.total ? static_cast<double>(r.correct) / static_cast<double>(r.total) : 0.0;
  return r;
}

inline std::optional<std::string> predict(const PromptEncoder& enc, const QAExample& ex, const TinyDecoderLM& lm,
                                          const Vocab& vocab, std::size_t max_answer_tokens) {
  NoGradScope no_grad;
  const PromptVectors pv = encode(enc, ex.graph, ex.query);
  try {
    const SoftPrompt sp = assemble_prompt(pv, textualize(ex.graph), ex.query, std::nullopt, lm, vocab);
    return greedy_decode(lm, sp, max_answer_tokens, vocab);
  } catch (const PromptOverflowError&) {
    return std::nullopt;
  }
}

inline EvalResult evaluate(const PromptEncoder& enc, const std::vector<QAExample>& examples,
                           const TinyDecoderLM& lm, const Vocab& vocab, std::size_t max_answer_tokens) {
  EvalResult r;
  for (const auto& ex : examples) {
    ++r.total;
    const auto pred = predict(enc, ex, lm, vocab, max_answer_tokens);
    if (!pred) {
      ++r.overflow;
      continue;
    }
    if (*pred == normalize_answer(ex.answer, vocab)) ++r.correct;
  }
  r.accuracy = r.total ? static_cast<double>(r.correct) / static_cast<double>(r.total) : 0.0;
  return r;
}

// ---------------------------------------------------------------------------
// Training

struct EvalPoint {
  std::size_t step = 0;
  double train_loss = 0.0;  // mean over steps since the previous point
  double validation_accuracy = 0.0;
};

struct RunReport {
  RunConfig config;
  std::vector<EvalPoint> trajectory;
  std::vector<double> losses;  // one per optimizer step
  std::optional<double> test_accuracy;
  std::optional<double> train_accuracy;
  double best_validation_accuracy = 0.0;
  std::size_t best_step = 0;
  std::size_t steps = 0;
  std::size_t skipped = 0;
  double wall_seconds = 0.0;
  std::uint64_t lm_digest_before = 0;
  std::uint64_t lm_digest_after = 0;
  std::uint64_t encoder_digest = 0;
  std::size_t train_examples = 0, validation_examples = 0, test_examples = 0;

  bool digests_equal() const { return lm_digest_before == lm_digest_after; }
};

inline nlohmann::json to_json(const RunReport& r) {
  nlohmann::json traj = nlohmann::json::array();
  for (const auto& p : r.trajectory) {
    traj.push_back({{"step", p.step}, {"train_loss", p.train_loss}, {"validation_accuracy", p.validation_accuracy}});
  }
  auto opt = [](const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
  return {{"config", to_json(r.config)},
          {"trajectory", traj},
          {"losses", r.losses},
          {"test_accuracy", opt(r.test_accuracy)},
          {"train_accuracy", opt(r.train_accuracy)},
          {"best_validation_accuracy", r.best_validation_accuracy},
          {"best_step", r.best_step},
          {"steps", r.steps},
          {"skipped", r.skipped},
          {"wall_seconds", r.wall_seconds},
          {"lm_digest_before", digest_hex(r.lm_digest_before)},
          {"lm_digest_after", digest_hex(r.lm_digest_after)},
          {"lm_digest_equal", r.digests_equal()},
          {"encoder_digest", digest_hex(r.encoder_digest)},
          {"examples", {{"train", r.train_examples}, {"validation", r.validation_examples}, {"test", r.test_examples}}}};
}

inline std::uint64_t parse_digest_hex(const std::string& s) {
  try {
    std::size_t used = 0;
    const auto v = std::stoull(s, &used, 16);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw ValidationError("bad digest '" + s + "'");
  }
}

inline RunReport run_report_from_json(const nlohmann::json& j) {
  RunReport r;
  try {
    r.config = run_config_from_json(j.at("config"));
    for (const auto& p : j.at("trajectory")) {
      r.trajectory.push_back({p.at("step").get<std::size_t>(), p.at("train_loss").get<double>(),
                              p.at("validation_accuracy").get<double>()});
    }
    r.losses = j.at("losses").get<std::vector<double>>();
    if (!j.at("test_accuracy").is_null()) r.test_accuracy = j.at("test_accuracy").get<double>();
    if (j.contains("train_accuracy") && !j.at("train_accuracy").is_null()) {
      r.train_accuracy = j.at("train_accuracy").get<double>();
    }
    r.best_validation_accuracy = j.at("best_validation_accuracy").get<double>();
    r.best_step = j.at("best_step").get<std::size_t>();
    r.steps = j.at("steps").get<std::size_t>();
    r.skipped = j.at("skipped").get<std::size_t>();
    r.wall_seconds = j.at("wall_seconds").get<double>();
    r.lm_digest_before = parse_digest_hex(j.at("lm_digest_before").get<std::string>());
    r.lm_digest_after = parse_digest_hex(j.at("lm_digest_after").get<std::string>());
    r.encoder_digest = parse_digest_hex(j.at("encoder_digest").get<std::string>());
    const auto& ex = j.at("examples");
    r.train_examples = ex.at("train").get<std::size_t>();
    r.validation_examples = ex.at("validation").get<std::size_t>();
    r.test_examples = ex.at("test").get<std::size_t>();
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("run report: ") + e.what());
  } catch (const ConfigError& e) {
    throw ValidationError(std::string("run report: ") + e.what());
  }
  return r;
}

struct TrainResult {
  RunReport report;
  PromptEncoder encoder;  // best-validation parameters
};

using LogFn = std::function<void(const std::string&)>;

inline void log_to_stderr(const std::string& msg) {
  static std::mutex mu;
  std::lock_guard<std::mutex> lock(mu);
  std::cerr << msg << '\n';
}

/// Trains the encoder on `data.train` with batch size 1, evaluating on the
/// validation split every eval_every steps and keeping the best parameters.
inline TrainResult train(const RunConfig& config_in, const DatasetSplit& data, const TinyDecoderLM& lm,
                         const Vocab& vocab, const LogFn& log = log_to_stderr) {
  const RunConfig cfg = config_in.normalized();
  cfg.validate();
  if (!lm.frozen()) throw ContractError("train: the LM must be frozen");
  if (data.train.empty()) throw ConfigError("train: no training examples");
  if (cfg.d_llm != lm.width()) {
    throw ConfigError("train: d_llm " + std::to_string(cfg.d_llm) + " does not match LM width " +
                      std::to_string(lm.width()));
  }
  const auto t0 = std::chrono::steady_clock::now();

  TrainResult res{RunReport{}, PromptEncoder::create(cfg.encoder(), cfg.seed)};
  RunReport& rep = res.report;
  PromptEncoder& enc = res.encoder;
  rep.config = cfg;
  rep.train_examples = data.train.size();
  rep.validation_examples = data.validation.size();
  rep.test_examples = data.test.size();
  rep.lm_digest_before = lm.digest();

  AdamWConfig ocfg;
  ocfg.lr = cfg.lr;
  ocfg.weight_decay = cfg.weight_decay;
  AdamW opt(ocfg);
  Rng rng(cfg.seed ^ 0x5eed5eed5eedULL);
  std::vector<std::size_t> order(data.train.size());
  std::iota(order.begin(), order.end(), 0);
  std::size_t cursor = order.size();

  std::optional<std::vector<std::vector<double>>> best;
  double best_val = -1.0;
  double window_loss = 0.0;
  std::size_t window_count = 0;

  for (std::size_t step = 1; step <= cfg.max_steps; ++step) {
    if (cursor == order.size()) {
      std::shuffle(order.begin(), order.end(), rng);
      cursor = 0;
    }
    const QAExample& ex = data.train[order[cursor++]];
    enc.params.zero_grad();
    {
      Tape tape;
      TapeScope scope(tape);
      const PromptVectors pv = encode(enc, ex.graph, ex.query);
      std::optional<SoftPrompt> sp;
      try {
        sp = assemble_prompt(pv, textualize(ex.graph), ex.query, ex.answer, lm, vocab);
      } catch (const PromptOverflowError& e) {
        ++rep.skipped;
        log("warning: step " + std::to_string(step) + ": skipping example '" + ex.id + "': " + e.what());
      }
      if (sp) {
        const auto fail = [&](const std::string& what) {
          return NumericError(what + " at step " + std::to_string(step) + " (example '" + ex.id + "', config " +
                              to_json(cfg).dump() + ")");
        };
        Tensor loss;
        double value = 0.0;
        try {
          loss = answer_loss(lm, *sp);
          value = loss.item();
        } catch (const NumericError& e) {
          throw fail(e.what());
        }
        if (!std::isfinite(value)) throw fail("non-finite loss");
        try {
          tape.backward(loss);
        } catch (const NumericError& e) {
          throw fail(e.what());
        }
        opt.step(enc.params);
        rep.losses.push_back(value);
        window_loss += value;
        ++window_count;
      }
    }
    rep.steps = step;

    if (step % cfg.eval_every == 0 || step == cfg.max_steps) {
      EvalPoint p;
      p.step = step;
      p.train_loss = window_count ? window_loss / static_cast<double>(window_count) : 0.0;
      window_loss = 0.0;
      window_count = 0;
      p.validation_accuracy = data.validation.empty()
                                  ? 0.0
                                  : evaluate(enc, data.validation, lm, vocab, cfg.max_answer_tokens).accuracy;
      rep.trajectory.push_back(p);
      if (data.validation.empty() || p.validation_accuracy > best_val) {
        best_val = p.validation_accuracy;
        best = enc.params.snapshot();
        rep.best_step = step;
      }
    }
  }

  if (best) enc.params.restore(*best);
  enc.params.zero_grad();
  rep.best_validation_accuracy = std::max(0.0, best_val);
  if (!data.test.empty()) rep.test_accuracy = evaluate(enc, data.test, lm, vocab, cfg.max_answer_tokens).accuracy;
  if (cfg.eval_train) rep.train_accuracy = evaluate(enc, data.train, lm, vocab, cfg.max_answer_tokens).accuracy;
  rep.encoder_digest = parameter_digest(enc.params);
  rep.lm_digest_after = lm.digest();
  rep.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (!rep.digests_equal()) throw ContractError("train: frozen LM digest changed during training");
  return res;
}

// ---------------------------------------------------------------------------
// Gradient check

struct GroupCheck {
  std::string group;
  std::size_t coordinates = 0;
  double max_rel_error = 0.0;
  bool passed = true;
  std::string failure;  // first failing coordinate, if any
};

struct GradCheckOptions {
  std::size_t coords_per_group = 6;
  double step = 1e-5;
  double tolerance = 1e-5;
  /// Denominator floor: with both gradients tiny, the absolute error is
  /// judged against this scale instead.
  double floor = 1e-4;
  std::uint64_t seed = 11;
};

struct GradCheckFixture {
  Vocab vocab;
  TinyDecoderLM lm;
  QAExample example;
};

/// Tiny frozen LM (V = 16, d = 8) and a 3-node graph for finite differences.
inline GradCheckFixture gradcheck_fixture() {
  Vocab vocab({"ball", "red", "cube", "has_color", "next_to", "what", "color", "of", "0", "1", "2"});
  LmConfig lc;
  lc.vocab_size = vocab.size();
  lc.d_model = 8;
  lc.layers = 1;
  lc.heads = 2;
  lc.d_ff = 16;
  lc.max_len = 64;
  TinyDecoderLM lm = TinyDecoderLM::create(lc, 5);
  lm.freeze();
  QAExample ex;
  ex.id = "gradcheck";
  ex.query = "what color of ball";
  ex.answer = "red";
  ex.graph.nodes = {{0, "ball"}, {1, "red"}, {2, "cube"}};
  ex.graph.edges = {{0, 1, "has_color"}, {2, 0, "next_to"}};
  return {vocab, lm, ex};
}

/// Central differences against analytic gradients on >= coords_per_group
/// coordinates of every trainable group active under `cfg` (dimensions are
/// shrunk to d = 8, two heads, at most two pooling tokens).
inline std::vector<GroupCheck> gradient_check_suite(const RunConfig& cfg, const GradCheckOptions& opt = {}) {
  const auto fx = gradcheck_fixture();
  EncoderConfig ec = cfg.normalized().encoder();
  ec.d = 8;
  ec.d_llm = fx.lm.width();
  ec.heads = 2;
  ec.n_tokens = std::min<std::size_t>(ec.n_tokens, 2);
  PromptEncoder enc = PromptEncoder::create(ec, opt.seed);
  const std::string text = textualize(fx.example.graph);

  auto loss_value = [&]() {
    NoGradScope ng;
    const auto pv = encode(enc, fx.example.graph, fx.example.query);
    return answer_loss(fx.lm, assemble_prompt(pv, text, fx.example.query, fx.example.answer, fx.lm, fx.vocab)).item();
  };
  enc.params.zero_grad();
  {
    Tape tape;
    TapeScope scope(tape);
    const auto pv = encode(enc, fx.example.graph, fx.example.query);
    tape.backward(answer_loss(fx.lm, assemble_prompt(pv, text, fx.example.query, fx.example.answer, fx.lm, fx.vocab)));
  }

  Rng rng(opt.seed);
  std::vector<GroupCheck> out;
  for (const auto& group : enc.groups()) {
    std::vector<std::pair<std::size_t, std::size_t>> coords;  // (entry, flat index)
    for (std::size_t e = 0; e < enc.params.size(); ++e) {
      if (group_of(enc.params.entries()[e].first) != group) continue;
      for (std::size_t i = 0; i < enc.params.entries()[e].second.numel(); ++i) coords.emplace_back(e, i);
    }
    std::shuffle(coords.begin(), coords.end(), rng);
    coords.resize(std::min(coords.size(), opt.coords_per_group));
    GroupCheck gc;
    gc.group = group;
    for (const auto& [e, i] : coords) {
      auto& [name, t] = enc.params.entries()[e];
      const double analytic = t.grad()[i];
      const double orig = t.data()[i];
      t.mutable_data()[i] = orig + opt.step;
      const double up = loss_value();
      t.mutable_data()[i] = orig - opt.step;
      const double down = loss_value();
      t.mutable_data()[i] = orig;
      const double numeric = (up - down) / (2.0 * opt.step);
      const double rel = std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), opt.floor});
      ++gc.coordinates;
      gc.max_rel_error = std::max(gc.max_rel_error, rel);
      if (!(rel < opt.tolerance) && gc.passed) {
        gc.passed = false;
        char buf[256];
        std::snprintf(buf, sizeof buf, "%s[%zu]: analytic %.10e numeric %.10e rel %.3e", name.c_str(), i, analytic,
                      numeric, rel);
        gc.failure = buf;
      }
    }
    out.push_back(gc);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Ablations

struct ArmResult {
  RunConfig config;  // seed filled in
  std::optional<RunReport> report;
  std::string error;
};

/// Runs every (config, seed) pair on up to `jobs` threads. A failing arm
/// records its error and the rest continue. Results keep matrix order.
inline std::vector<ArmResult> ablate(const std::vector<RunConfig>& matrix, const DatasetSplit& data,
                                     const TinyDecoderLM& lm, const Vocab& vocab,
                                     const std::vector<std::uint64_t>& seeds, std::size_t jobs = 1,
                                     const LogFn& log = log_to_stderr) {
  if (matrix.empty()) throw ConfigError("ablate: empty matrix");
  if (seeds.empty()) throw ConfigError("ablate: no seeds");
  for (const auto& c : matrix) {
    if (c.task != matrix.front().task) throw ConfigError("ablate: all arms must share one task");
  }
  std::vector<ArmResult> results;
  for (const auto& c : matrix) {
    for (auto s : seeds) {
      ArmResult r;
      r.config = c.normalized();
      r.config.seed = s;
      results.push_back(std::move(r));
    }
  }
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < results.size(); i = next++) {
      auto& r = results[i];
      try {
        r.report = train(r.config, data, lm, vocab, log).report;
        log("arm " + r.config.arm_label() + " seed " + std::to_string(r.config.seed) + ": test accuracy " +
            std::to_string(r.report->test_accuracy.value_or(0.0)));
      } catch (const std::exception& e) {
        r.error = e.what();
        log("arm " + r.config.arm_label() + " seed " + std::to_string(r.config.seed) + " failed: " + e.what());
      }
    }
  };
  jobs = std::max<std::size_t>(1, std::min(jobs, results.size()));
  if (jobs == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t j = 0; j < jobs; ++j) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  return results;
}

/// Named arm sets over `base`: table3 (readout x early fusion), table4
/// (both readouts x four fusion settings), fig4 (lgpt/early, n = 1, 8, 32).
inline std::vector<RunConfig> preset_matrix(const std::string& name, const RunConfig& base) {
  std::vector<RunConfig> out;
  auto arm = [&](Readout r, Fusion f, std::size_t n) {
    RunConfig c = base;
    c.readout = r;
    c.fusion = f;
    c.n_tokens = n;
    out.push_back(c.normalized());
  };
  if (name == "table3") {
    arm(Readout::mean, Fusion::none, 1);
    arm(Readout::mean, Fusion::early, 1);
    arm(Readout::lgpt, Fusion::none, base.n_tokens);
    arm(Readout::lgpt, Fusion::early, base.n_tokens);
  } else if (name == "table4") {
    for (auto r : {Readout::mean, Readout::lgpt}) {
      for (auto f : {Fusion::none, Fusion::late, Fusion::early, Fusion::early_late}) arm(r, f, base.n_tokens);
    }
  } else if (name == "fig4") {
    for (std::size_t n : {1, 8, 32}) arm(Readout::lgpt, Fusion::early, n);
  } else {
    throw ConfigError("unknown preset '" + name + "' (expected table3|table4|fig4)");
  }
  return out;
}

}  // namespace lgpt
