#pragma once

// Tokenizer, the tiny frozen decoder-only LM, soft-prompt assembly, the
// masked answer loss and greedy decoding.

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "lgpt/io.hpp"
#include "lgpt/ops.hpp"
#include "lgpt/optim.hpp"
#include "lgpt/pooling.hpp"

namespace lgpt {

// ---------------------------------------------------------------------------
// Vocabulary

inline constexpr std::size_t kPad = 0, kBos = 1, kEos = 2, kUnk = 3, kSep = 4;
inline constexpr std::size_t kReservedCount = 5;

class Vocab {
 public:
  static const std::vector<std::string>& reserved() {
    static const std::vector<std::string> r{"<pad>", "<bos>", "<eos>", "<unk>", "<sep>"};
    return r;
  }

  Vocab() {
    for (const auto& r : reserved()) append(r);
  }

  /// Reserved ids first, then `words` in order (duplicates ignored).
  explicit Vocab(const std::vector<std::string>& words) : Vocab() {
    for (const auto& w : words) {
      if (!index_.count(w)) append(w);
    }
  }

  std::size_t size() const { return tokens_.size(); }
  const std::string& token(std::size_t id) const {
    if (id >= tokens_.size()) throw DimensionError("vocab: id " + std::to_string(id) + " out of range");
    return tokens_[id];
  }
  std::optional<std::size_t> find(std::string_view word) const {
    auto it = index_.find(std::string(word));
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }
  std::size_t id(std::string_view word) const { return find(word).value_or(kUnk); }
  const std::vector<std::string>& tokens() const { return tokens_; }

  nlohmann::json to_json() const {
    nlohmann::json j = nlohmann::json::object();
    for (std::size_t i = 0; i < tokens_.size(); ++i) j[tokens_[i]] = i;
    return j;
  }

  static Vocab from_json(const nlohmann::json& j) {
    if (!j.is_object()) throw ValidationError("vocab: expected a token->id object");
    std::vector<std::string> by_id(j.size());
    std::vector<bool> seen(j.size(), false);
    for (auto it = j.begin(); it != j.end(); ++it) {
      if (!it.value().is_number_unsigned()) throw ValidationError("vocab: id for '" + it.key() + "' is not an integer");
      const auto id = it.value().get<std::size_t>();
      if (id >= by_id.size() || seen[id]) throw ValidationError("vocab: ids must be a permutation of 0..V-1");
      seen[id] = true;
      by_id[id] = it.key();
    }
    for (std::size_t i = 0; i < kReservedCount; ++i) {
      if (i >= by_id.size() || by_id[i] != reserved()[i]) {
        throw ValidationError("vocab: reserved token " + reserved()[i] + " must have id " + std::to_string(i));
      }
    }
    Vocab v;
    for (std::size_t i = kReservedCount; i < by_id.size(); ++i) v.append(by_id[i]);
    return v;
  }

  bool operator==(const Vocab& o) const { return tokens_ == o.tokens_; }

 private:
  void append(const std::string& w) {
    index_[w] = tokens_.size();
    tokens_.push_back(w);
  }
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// Lowercased words; letters, digits and '_' form words, whitespace and
/// other punctuation separate them and are dropped. A literal reserved
/// marker such as "<sep>" maps to its reserved id.
inline std::vector<std::size_t> tokenize(std::string_view text, const Vocab& vocab) {
  std::vector<std::size_t> ids;
  std::string word;
  auto flush = [&] {
    if (!word.empty()) ids.push_back(vocab.id(word));
    word.clear();
  };
  for (std::size_t i = 0; i < text.size(); ++i) {
    const auto c = static_cast<unsigned char>(text[i]);
    if (c == '<') {
      bool matched = false;
      for (std::size_t r = 0; r < kReservedCount && !matched; ++r) {
        const auto& m = Vocab::reserved()[r];
        if (text.substr(i, m.size()) == m) {
          flush();
          ids.push_back(r);
          i += m.size() - 1;
          matched = true;
        }
      }
      if (matched) continue;
    }
    if (std::isalnum(c) || c == '_' || c >= 0x80) {
      word += static_cast<char>(std::tolower(c));
    } else {
      flush();
    }
  }
  flush();
  return ids;
}

inline std::string detokenize(std::span<const std::size_t> ids, const Vocab& vocab) {
  std::string out;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (i) out += ' ';
    out += vocab.token(ids[i]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Model

struct LmConfig {
  std::size_t vocab_size = 0;
  std::size_t d_model = 64;
  std::size_t layers = 2;
  std::size_t heads = 4;
  std::size_t d_ff = 256;
  std::size_t max_len = 256;

  void validate() const {
    if (vocab_size <= kReservedCount) throw ConfigError("lm: vocabulary must contain non-reserved tokens");
    if (d_model == 0 || heads == 0 || d_model % heads != 0) throw ConfigError("lm: d_model must be divisible by heads");
    if (d_ff == 0 || max_len == 0) throw ConfigError("lm: d_ff and max_len must be positive");
  }
  bool operator==(const LmConfig&) const = default;
};

struct DecoderBlock {
  Tensor ln1_gain, ln1_bias, w_query, w_key, w_value, w_out;
  Tensor ln2_gain, ln2_bias, w_ff1, b_ff1, w_ff2, b_ff2;
};

/// Pre-norm decoder with learned positions and an output head tied to the
/// word embedding table.
struct TinyDecoderLM {
  LmConfig config;
  ParameterStore params;
  Tensor word_embedding;  // [V×d]
  Tensor positions;       // [T_max×d]
  std::vector<DecoderBlock> blocks;
  Tensor lnf_gain, lnf_bias;

  static TinyDecoderLM create(const LmConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    TinyDecoderLM lm;
    lm.config = cfg;
    Rng rng(seed);
    const std::size_t d = cfg.d_model;
    auto normal = [&](const std::string& name, std::size_t r, std::size_t c, double std) {
      Tensor t = Tensor::zeros(r, c);
      fill_normal(t, std, rng);
      return lm.params.add(name, t);
    };
    auto constant = [&](const std::string& name, std::size_t n, double v) {
      return lm.params.add(name, Tensor(Shape{n}, v));
    };
    lm.word_embedding = normal("lm.word_embedding", cfg.vocab_size, d, 0.1);
    lm.positions = normal("lm.positions", cfg.max_len, d, 0.02);
    const double proj_std = 1.0 / std::sqrt(static_cast<double>(d));
    for (std::size_t l = 0; l < cfg.layers; ++l) {
      const std::string p = "lm.block" + std::to_string(l) + ".";
      DecoderBlock b;
      b.ln1_gain = constant(p + "ln1_gain", d, 1.0);
      b.ln1_bias = constant(p + "ln1_bias", d, 0.0);
      b.w_query = normal(p + "w_query", d, d, proj_std);
      b.w_key = normal(p + "w_key", d, d, proj_std);
      b.w_value = normal(p + "w_value", d, d, proj_std);
      b.w_out = normal(p + "w_out", d, d, proj_std / std::sqrt(2.0 * static_cast<double>(cfg.layers)));
      b.ln2_gain = constant(p + "ln2_gain", d, 1.0);
      b.ln2_bias = constant(p + "ln2_bias", d, 0.0);
      b.w_ff1 = normal(p + "w_ff1", d, cfg.d_ff, proj_std);
      b.b_ff1 = constant(p + "b_ff1", cfg.d_ff, 0.0);
      b.w_ff2 = normal(p + "w_ff2", cfg.d_ff, d,
                       1.0 / std::sqrt(static_cast<double>(cfg.d_ff) * 2.0 * static_cast<double>(cfg.layers)));
      b.b_ff2 = constant(p + "b_ff2", d, 0.0);
      lm.blocks.push_back(b);
    }
    lm.lnf_gain = constant("lm.lnf_gain", d, 1.0);
    lm.lnf_bias = constant("lm.lnf_bias", d, 0.0);
    return lm;
  }

  std::size_t width() const { return config.d_model; }
  std::size_t vocab_size() const { return config.vocab_size; }
  bool frozen() const { return params.frozen(); }
  void freeze() { params.freeze(); }
  std::uint64_t digest() const { return parameter_digest(params); }

  Tensor embed(std::span<const std::size_t> ids) const {
    for (auto id : ids) {
      if (id >= vocab_size()) throw DimensionError("lm: token id " + std::to_string(id) + " out of range");
    }
    return gather_rows(word_embedding, ids);
  }
};

/// Final-norm hidden states for an embedding sequence whose first row sits
/// at absolute position `position_offset`.
inline Tensor lm_hidden(const TinyDecoderLM& lm, const Tensor& embeddings, std::size_t position_offset = 0) {
  const std::size_t T = embeddings.rows();
  if (embeddings.cols() != lm.width()) {
    throw DimensionError("lm: embedding width " + std::to_string(embeddings.cols()) + " != " +
                         std::to_string(lm.width()));
  }
  if (T == 0) throw DimensionError("lm: empty sequence");
  if (T + position_offset > lm.config.max_len) {
    throw PromptOverflowError("lm: sequence of " + std::to_string(T) + " at offset " +
                              std::to_string(position_offset) + " exceeds max length " +
                              std::to_string(lm.config.max_len));
  }
  Tensor h = add(embeddings, slice_rows(lm.positions, position_offset, T));
  for (const auto& b : lm.blocks) {
    const Tensor x = layer_norm(h, b.ln1_gain, b.ln1_bias);
    const Tensor att = causal_attention(matmul(x, b.w_query), matmul(x, b.w_key), matmul(x, b.w_value),
                                        lm.config.heads);
    h = add(h, matmul(att, b.w_out));
    const Tensor y = layer_norm(h, b.ln2_gain, b.ln2_bias);
    const Tensor ff = add_row(matmul(gelu(add_row(matmul(y, b.w_ff1), b.b_ff1)), b.w_ff2), b.b_ff2);
    h = add(h, ff);
  }
  return layer_norm(h, lm.lnf_gain, lm.lnf_bias);
}

/// Tied output head: logits = hidden · WEᵀ.
inline Tensor lm_head(const TinyDecoderLM& lm, const Tensor& hidden) { return matmul_nt(hidden, lm.word_embedding); }

// ---------------------------------------------------------------------------
// Soft prompts

struct Span {
  std::size_t begin = 0;
  std::size_t length = 0;
  std::size_t end() const { return begin + length; }
  bool operator==(const Span&) const = default;
};

/// [E_S; WE(text); WE(q)] optionally followed by [SEP; WE(a); EOS]. The
/// answer span covers the answer tokens and the closing EOS.
struct SoftPrompt {
  Tensor embeddings;                    // [T×d_llm]
  std::vector<std::size_t> tokens;      // token id per row, kPad on graph rows
  std::vector<std::uint8_t> answer_mask;
  Span graph, text, query, separator, answer;
  bool has_answer = false;

  std::size_t length() const { return embeddings.rows(); }
  std::size_t context_length() const { return graph.length + text.length + query.length; }
};

inline std::string overflow_message(std::size_t n, std::size_t t, std::size_t q, std::size_t a,
                                    std::size_t max_len) {
  return "prompt overflow: graph=" + std::to_string(n) + " text=" + std::to_string(t) +
         " query=" + std::to_string(q) + " answer=" + std::to_string(a) + " total=" +
         std::to_string(n + t + q + a) + " > max " + std::to_string(max_len);
}

inline SoftPrompt assemble_prompt(const PromptVectors& pv, const std::string& graph_text,
                                  const std::string& query, const std::optional<std::string>& answer,
                                  const TinyDecoderLM& lm, const Vocab& vocab) {
  if (pv.width() != lm.width()) {
    throw DimensionError("assemble_prompt: prompt width " + std::to_string(pv.width()) +
                         " != LM width " + std::to_string(lm.width()));
  }
  const auto text_ids = tokenize(graph_text, vocab);
  const auto query_ids = tokenize(query, vocab);
  std::vector<std::size_t> answer_ids;
  if (answer) {
    answer_ids = tokenize(*answer, vocab);
    answer_ids.push_back(kEos);
  }
  const std::size_t n = pv.count();
  const std::size_t tail = answer ? 1 + answer_ids.size() : 0;
  const std::size_t total = n + text_ids.size() + query_ids.size() + tail;
  if (total > lm.config.max_len) {
    throw PromptOverflowError(
        overflow_message(n, text_ids.size(), query_ids.size(), tail, lm.config.max_len));
  }

  SoftPrompt sp;
  sp.graph = {0, n};
  sp.text = {n, text_ids.size()};
  sp.query = {sp.text.end(), query_ids.size()};
  sp.separator = {sp.query.end(), answer ? 1u : 0u};
  sp.answer = {sp.separator.end(), answer_ids.size()};
  sp.has_answer = answer.has_value();

  sp.tokens.assign(n, kPad);
  sp.tokens.insert(sp.tokens.end(), text_ids.begin(), text_ids.end());
  sp.tokens.insert(sp.tokens.end(), query_ids.begin(), query_ids.end());
  if (answer) {
    sp.tokens.push_back(kSep);
    sp.tokens.insert(sp.tokens.end(), answer_ids.begin(), answer_ids.end());
  }
  sp.answer_mask.assign(total, 0);
  for (std::size_t i = sp.answer.begin; i < sp.answer.end(); ++i) sp.answer_mask[i] = 1;

  const std::vector<std::size_t> discrete(sp.tokens.begin() + static_cast<std::ptrdiff_t>(n), sp.tokens.end());
  sp.embeddings = discrete.empty() ? pv.matrix : concat_rows({pv.matrix, lm.embed(discrete)});
  return sp;
}

/// Next-token logits at every position.
inline Tensor lm_forward(const TinyDecoderLM& lm, const SoftPrompt& sp) {
  return lm_head(lm, lm_hidden(lm, sp.embeddings));
}

/// Masked cross-entropy on full logits: row t predicts token t+1 and counts
/// when t+1 lies in the answer span.
inline Tensor answer_loss(const Tensor& logits, const SoftPrompt& sp) {
  if (!sp.has_answer || sp.answer.length == 0) throw ContractError("answer_loss: prompt has no answer span");
  const std::size_t T = sp.length();
  if (logits.rows() != T) throw DimensionError("answer_loss: logits rows != prompt length");
  std::vector<std::size_t> targets(T, kPad);
  std::vector<std::uint8_t> mask(T, 0);
  for (std::size_t t = 0; t + 1 < T; ++t) {
    targets[t] = sp.tokens[t + 1];
    mask[t] = sp.answer_mask[t + 1];
  }
  return cross_entropy_masked(logits, targets, mask);
}

/// Same value as answer_loss(lm_forward(lm, sp), sp), computing the output
/// head only on rows that predict answer tokens.
inline Tensor answer_loss(const TinyDecoderLM& lm, const SoftPrompt& sp) {
  if (!sp.has_answer || sp.answer.length == 0) throw ContractError("answer_loss: prompt has no answer span");
  const Tensor hidden = lm_hidden(lm, sp.embeddings);
  const Tensor rows = slice_rows(hidden, sp.answer.begin - 1, sp.answer.length);
  const std::vector<std::size_t> targets(sp.tokens.begin() + static_cast<std::ptrdiff_t>(sp.answer.begin),
                                         sp.tokens.end());
  const std::vector<std::uint8_t> mask(targets.size(), 1);
  return cross_entropy_masked(lm_head(lm, rows), targets, mask);
}

inline std::size_t argmax_row(const Tensor& logits, std::size_t row) {
  const auto d = logits.data();
  const std::size_t V = logits.cols();
  std::size_t best = 0;
  for (std::size_t j = 1; j < V; ++j) {
    if (d[row * V + j] > d[row * V + best]) best = j;
  }
  return best;
}

/// Appends SEP, then argmax tokens until EOS, `max_len` tokens, or the LM
/// context is full. Returns the generated words without EOS.
inline std::vector<std::size_t> greedy_decode_ids(const TinyDecoderLM& lm, const SoftPrompt& sp,
                                                  std::size_t max_len) {
  if (sp.has_answer) throw ContractError("greedy_decode: prompt already contains an answer");
  std::vector<std::size_t> out;
  if (max_len == 0) return out;
  NoGradScope no_grad;
  const std::size_t sep = kSep;
  Tensor seq = concat_rows({sp.embeddings, lm.embed(std::span<const std::size_t>(&sep, 1))});
  while (out.size() < max_len && seq.rows() <= lm.config.max_len) {
    const Tensor h = lm_hidden(lm, seq);
    const Tensor last = lm_head(lm, slice_rows(h, seq.rows() - 1, 1));
    const std::size_t next = argmax_row(last, 0);
    if (next == kEos) break;
    out.push_back(next);
    if (seq.rows() == lm.config.max_len) break;
    seq = concat_rows({seq, lm.embed(std::span<const std::size_t>(&next, 1))});
  }
  return out;
}

inline std::string greedy_decode(const TinyDecoderLM& lm, const SoftPrompt& sp, std::size_t max_len,
                                 const Vocab& vocab) {
  const auto ids = greedy_decode_ids(lm, sp, max_len);
  return detokenize(ids, vocab);
}

// ---------------------------------------------------------------------------
// Pretraining

struct PretrainConfig {
  std::size_t max_steps = 10000;
  std::size_t eval_every = 250;
  std::size_t patience = 8;          // evaluations without held-out improvement
  std::size_t max_position_offset = 32;
  double lr = 1e-3;
  std::uint64_t seed = 1;
};

struct PretrainReport {
  double initial_perplexity = 0.0;
  double final_perplexity = 0.0;
  std::size_t steps = 0;
  std::uint64_t digest = 0;
};

/// Mean next-token perplexity over sequences, all positions at offset 0.
inline double perplexity(const TinyDecoderLM& lm, const std::vector<std::vector<std::size_t>>& seqs) {
  NoGradScope no_grad;
  double nll = 0.0;
  std::size_t count = 0;
  for (const auto& s : seqs) {
    if (s.size() < 2) continue;
    const std::vector<std::size_t> in(s.begin(), s.end() - 1);
    const std::vector<std::size_t> targets(s.begin() + 1, s.end());
    const std::vector<std::uint8_t> mask(targets.size(), 1);
    const double loss = cross_entropy_masked(lm_head(lm, lm_hidden(lm, lm.embed(in))), targets, mask).item();
    nll += loss * static_cast<double>(targets.size());
    count += targets.size();
  }
  if (count == 0) throw ContractError("perplexity: no scorable sequences");
  return std::exp(nll / static_cast<double>(count));
}

/// Next-token training on `corpus` (90% train / 10% held out) until held-out
/// perplexity stops improving or the step budget runs out, keeping the best
/// held-out weights. The LM is frozen on return.
inline PretrainReport pretrain_lm(TinyDecoderLM& lm, const Vocab& vocab, const std::vector<std::string>& corpus,
                                  const PretrainConfig& cfg) {
  if (corpus.empty()) throw ConfigError("pretrain_lm: corpus is empty");
  if (lm.frozen()) throw ContractError("pretrain_lm: model is already frozen");
  std::vector<std::vector<std::size_t>> seqs;
  for (const auto& s : corpus) {
    auto ids = tokenize(s, vocab);
    if (ids.size() > lm.config.max_len) ids.resize(lm.config.max_len);
    if (ids.size() >= 2) seqs.push_back(std::move(ids));
  }
  if (seqs.empty()) throw ConfigError("pretrain_lm: corpus has no sequence of two or more tokens");
  std::size_t held = std::max<std::size_t>(1, seqs.size() / 10);
  if (held >= seqs.size()) held = 0;
  const std::vector<std::vector<std::size_t>> heldout(seqs.end() - static_cast<std::ptrdiff_t>(held), seqs.end());
  seqs.resize(seqs.size() - held);
  const auto& eval_set = heldout.empty() ? seqs : heldout;

  PretrainReport rep;
  rep.initial_perplexity = perplexity(lm, eval_set);
  double best = rep.initial_perplexity;
  auto best_snap = lm.params.snapshot();
  std::size_t stale = 0;

  AdamWConfig opt_cfg;
  opt_cfg.lr = cfg.lr;
  AdamW opt(opt_cfg);
  Rng rng(cfg.seed);
  for (std::size_t step = 1; step <= cfg.max_steps; ++step) {
    const auto& s = seqs[std::uniform_int_distribution<std::size_t>(0, seqs.size() - 1)(rng)];
    const std::size_t room = lm.config.max_len - (s.size() - 1);
    const std::size_t offset =
        std::uniform_int_distribution<std::size_t>(0, std::min(cfg.max_position_offset, room))(rng);
    const std::vector<std::size_t> in(s.begin(), s.end() - 1);
    const std::vector<std::size_t> targets(s.begin() + 1, s.end());
    const std::vector<std::uint8_t> mask(targets.size(), 1);
    lm.params.zero_grad();
    {
      Tape tape;
      TapeScope scope(tape);
      const Tensor loss = cross_entropy_masked(lm_head(lm, lm_hidden(lm, lm.embed(in), offset)), targets, mask);
      if (!std::isfinite(loss.item())) throw NumericError("pretrain_lm: non-finite loss at step " + std::to_string(step));
      tape.backward(loss);
    }
    opt.step(lm.params);
    rep.steps = step;
    if (step % cfg.eval_every == 0 || step == cfg.max_steps) {
      const double ppl = perplexity(lm, eval_set);
      if (ppl < best) {
        best = ppl;
        best_snap = lm.params.snapshot();
        stale = 0;
      } else if (++stale >= cfg.patience) {
        break;
      }
    }
  }
  lm.params.restore(best_snap);
  lm.params.zero_grad();
  lm.freeze();
  rep.final_perplexity = best;
  rep.digest = lm.digest();
  return rep;
}

// ---------------------------------------------------------------------------
// Checkpoints: "LGPTLM01", then u64 vocab, d, layers, heads, d_ff, max_len,
// digest, then every parameter as little-endian f64 in declaration order.

namespace detail {
inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFFU));
}
inline std::uint64_t get_u64(std::string_view in, std::size_t& pos) {
  if (pos + 8 > in.size()) throw ValidationError("lm checkpoint: truncated file");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[pos + i])) << (8 * i);
  pos += 8;
  return v;
}
inline constexpr std::string_view kLmMagic = "LGPTLM01";
}  // namespace detail

inline std::string serialize_lm(const TinyDecoderLM& lm) {
  std::string out(detail::kLmMagic);
  const auto& c = lm.config;
  for (std::uint64_t v : {c.vocab_size, c.d_model, c.layers, c.heads, c.d_ff, c.max_len}) detail::put_u64(out, v);
  detail::put_u64(out, lm.digest());
  for (const auto& [name, t] : lm.params.entries()) {
    for (double x : t.data()) {
      std::uint64_t bits;
      std::memcpy(&bits, &x, sizeof bits);
      detail::put_u64(out, bits);
    }
  }
  return out;
}

/// Loads a checkpoint; the result is frozen and its digest verified.
inline TinyDecoderLM deserialize_lm(std::string_view bytes) {
  if (bytes.substr(0, detail::kLmMagic.size()) != detail::kLmMagic) {
    throw ValidationError("lm checkpoint: bad magic");
  }
  std::size_t pos = detail::kLmMagic.size();
  LmConfig c;
  c.vocab_size = detail::get_u64(bytes, pos);
  c.d_model = detail::get_u64(bytes, pos);
  c.layers = detail::get_u64(bytes, pos);
  c.heads = detail::get_u64(bytes, pos);
  c.d_ff = detail::get_u64(bytes, pos);
  c.max_len = detail::get_u64(bytes, pos);
  const std::uint64_t digest = detail::get_u64(bytes, pos);
  try {
    c.validate();
  } catch (const ConfigError& e) {
    throw ValidationError(std::string("lm checkpoint: ") + e.what());
  }
  TinyDecoderLM lm = TinyDecoderLM::create(c, 0);
  for (auto& [name, t] : lm.params.entries()) {
    for (double& x : t.mutable_data()) {
      const std::uint64_t bits = detail::get_u64(bytes, pos);
      std::memcpy(&x, &bits, sizeof x);
    }
  }
  if (pos != bytes.size()) throw ValidationError("lm checkpoint: trailing bytes");
  lm.freeze();
  if (lm.digest() != digest) throw ValidationError("lm checkpoint: digest mismatch");
  return lm;
}

inline std::filesystem::path vocab_path_for(const std::filesystem::path& lm_path) {
  auto p = lm_path;
  p += ".vocab.json";
  return p;
}

inline void save_lm(const std::filesystem::path& path, const TinyDecoderLM& lm, const Vocab& vocab) {
  if (vocab.size() != lm.vocab_size()) throw ContractError("save_lm: vocab size does not match the model");
  write_file_atomic(path, serialize_lm(lm));
  write_file_atomic(vocab_path_for(path), vocab.to_json().dump(1) + "\n");
}

struct LoadedLm {
  TinyDecoderLM lm;
  Vocab vocab;
};

inline LoadedLm load_lm(const std::filesystem::path& path) {
  LoadedLm out{deserialize_lm(read_file(path)), Vocab{}};
  try {
    out.vocab = Vocab::from_json(nlohmann::json::parse(read_file(vocab_path_for(path))));
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("lm vocab: ") + e.what());
  }
  if (out.vocab.size() != out.lm.vocab_size()) throw ValidationError("lm vocab size does not match checkpoint");
  return out;
}

}  // namespace lgpt
