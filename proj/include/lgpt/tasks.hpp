#pragma once

// Synthetic text-attributed-graph QA tasks and the pretraining corpus for
// the stand-in language model.

#include <algorithm>
#include <array>
#include <cstdio>
#include <numeric>
#include <random>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "lgpt/graph_data.hpp"
#include "lgpt/tensor.hpp"

namespace lgpt {

enum class TaskKind { attribute_lookup, multifact, stance };

inline std::string to_string(TaskKind t) {
  switch (t) {
    case TaskKind::attribute_lookup: return "attribute_lookup";
    case TaskKind::multifact: return "multifact";
    case TaskKind::stance: return "stance";
  }
  return "?";
}

inline TaskKind task_from_string(std::string_view s) {
  if (s == "attribute_lookup") return TaskKind::attribute_lookup;
  if (s == "multifact") return TaskKind::multifact;
  if (s == "stance") return TaskKind::stance;
  throw ConfigError("unknown task '" + std::string(s) + "'");
}

namespace words {

inline const std::vector<std::string>& entities() {
  static const std::vector<std::string> v{
      "ball", "box",   "car",   "cup",    "lamp",  "book", "chair", "table",
      "bag",  "hat",   "shoe",  "phone",  "clock", "vase", "bottle", "plate",
      "key",  "pen",   "bowl",  "desk",   "door",  "kite", "drum",  "coin"};
  return v;
}

struct AttributeKind {
  std::string name;
  std::vector<std::string> values;
};

inline const std::vector<AttributeKind>& attribute_kinds() {
  static const std::vector<AttributeKind> v{
      {"color", {"red", "blue", "green", "yellow", "purple", "orange", "white", "black"}},
      {"shape", {"cube", "sphere", "cone", "cylinder", "pyramid", "ring", "disk", "star"}},
      {"size", {"tiny", "small", "medium", "large", "huge", "giant", "little", "big"}},
      {"material", {"wood", "metal", "glass", "plastic", "stone", "paper", "cloth", "rubber"}},
  };
  return v;
}

inline const std::vector<std::string>& code_words() {
  static const std::vector<std::string> v{"alpha", "bravo", "charlie", "delta", "echo", "foxtrot",
                                          "golf",  "hotel", "india",   "juliet", "kilo", "lima"};
  return v;
}

inline const std::vector<std::string>& concepts() {
  static const std::vector<std::string> v{
      "rain",   "sun",    "fire",    "water",  "exercise", "health", "smoking", "cancer",
      "school", "learning", "war",   "peace",  "money",    "power",  "music",   "joy",
      "pollution", "disease", "sleep", "energy", "food",   "growth", "law",     "order"};
  return v;
}

inline const std::vector<std::string>& supporting_relations() {
  static const std::vector<std::string> v{"causes", "capable_of", "desires", "part_of", "used_for"};
  return v;
}

inline const std::vector<std::string>& countering_relations() {
  static const std::vector<std::string> v{"not_capable_of", "not_desires", "antonym_of", "prevents",
                                          "not_causes"};
  return v;
}

inline const std::vector<std::string>& template_words() {
  static const std::vector<std::string> v{"what", "is", "the", "of", "code", "argument", "one", "two",
                                          "do", "they", "support", "or", "counter"};
  return v;
}

inline constexpr std::size_t kMaxMultifactK = 8;
inline constexpr std::size_t kMaxNodeId = 63;

}  // namespace words

/// Every word the generators can emit (including node-id digits), sorted.
inline std::vector<std::string> task_vocabulary() {
  std::set<std::string> all;
  for (const auto& w : words::entities()) all.insert(w);
  for (const auto& k : words::attribute_kinds()) {
    all.insert(k.name);
    all.insert("has_" + k.name);
    for (const auto& v : k.values) all.insert(v);
  }
  for (const auto& w : words::code_words()) all.insert(w);
  for (std::size_t i = 1; i <= words::kMaxMultifactK; ++i) all.insert("part_" + std::to_string(i));
  for (const auto& w : words::concepts()) all.insert(w);
  for (const auto& w : words::supporting_relations()) all.insert(w);
  for (const auto& w : words::countering_relations()) all.insert(w);
  for (const auto& w : words::template_words()) all.insert(w);
  for (std::size_t i = 0; i <= words::kMaxNodeId; ++i) all.insert(std::to_string(i));
  return {all.begin(), all.end()};
}

namespace detail {

template <class T>
std::vector<T> sample_without_replacement(const std::vector<T>& pool, std::size_t n, Rng& rng) {
  std::vector<T> copy = pool;
  std::shuffle(copy.begin(), copy.end(), rng);
  copy.resize(n);
  return copy;
}

inline std::size_t uniform_index(std::size_t n, Rng& rng) {
  return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
}

/// Builds a graph from node texts and (src, text, dst) triples, then
/// relabels node ids with a random permutation and shuffles edge order.
struct GraphBuilder {
  std::vector<std::string> node_texts;
  std::vector<GraphEdge> edges;

  std::size_t node(std::string text) {
    node_texts.push_back(std::move(text));
    return node_texts.size() - 1;
  }
  void edge(std::size_t s, std::string text, std::size_t d) { edges.push_back({s, d, std::move(text)}); }

  TextAttributedGraph build(Rng& rng) const {
    std::vector<std::size_t> perm(node_texts.size());
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    TextAttributedGraph g;
    g.nodes.resize(node_texts.size());
    for (std::size_t i = 0; i < node_texts.size(); ++i) g.nodes[perm[i]] = {perm[i], node_texts[i]};
    g.edges = edges;
    for (auto& e : g.edges) {
      e.src = perm[e.src];
      e.dst = perm[e.dst];
    }
    std::shuffle(g.edges.begin(), g.edges.end(), rng);
    return g;
  }
};

inline std::string example_id(const char* prefix, std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%s-%06zu", prefix, i);
  return buf;
}

}  // namespace detail

/// Scene-graph style lookup. Each graph holds `nodes_per_graph` distinct
/// entity nodes; every entity links to `num_attributes` attribute-value nodes
/// through has_<kind> edges. The query asks for one attribute of one entity.
inline DatasetSplit gen_attribute_lookup_task(std::size_t num_examples, std::size_t nodes_per_graph,
                                              std::size_t num_attributes, std::uint64_t seed) {
  const auto& kinds = words::attribute_kinds();
  if (num_examples == 0) throw ConfigError("attribute_lookup: num_examples must be positive");
  if (num_attributes < 2 || num_attributes > kinds.size()) {
    throw ConfigError("attribute_lookup: num_attributes must be in [2, " + std::to_string(kinds.size()) + "]");
  }
  if (nodes_per_graph < 2 || nodes_per_graph > words::entities().size() ||
      nodes_per_graph * (1 + num_attributes) > words::kMaxNodeId + 1) {
    throw ConfigError("attribute_lookup: nodes_per_graph out of range");
  }
  Rng rng(seed);
  std::vector<QAExample> out;
  out.reserve(num_examples);
  for (std::size_t i = 0; i < num_examples; ++i) {
    detail::GraphBuilder b;
    const auto names = detail::sample_without_replacement(words::entities(), nodes_per_graph, rng);
    std::vector<std::size_t> kind_ids(kinds.size());
    std::iota(kind_ids.begin(), kind_ids.end(), 0);
    std::shuffle(kind_ids.begin(), kind_ids.end(), rng);
    kind_ids.resize(num_attributes);
    std::vector<std::vector<std::string>> values(nodes_per_graph);
    for (std::size_t e = 0; e < nodes_per_graph; ++e) {
      const auto ent = b.node(names[e]);
      for (auto k : kind_ids) {
        const auto& kind = kinds[k];
        values[e].push_back(kind.values[detail::uniform_index(kind.values.size(), rng)]);
        b.edge(ent, "has_" + kind.name, b.node(values[e].back()));
      }
    }
    const auto qe = detail::uniform_index(nodes_per_graph, rng);
    const auto qk = detail::uniform_index(num_attributes, rng);
    QAExample ex;
    ex.id = detail::example_id("attr", i);
    ex.query = "what is the " + kinds[kind_ids[qk]].name + " of " + names[qe];
    ex.answer = values[qe][qk];
    ex.graph = b.build(rng);
    out.push_back(std::move(ex));
  }
  return make_split(std::move(out));
}

/// Information-bottleneck probe. Each graph holds two entities; each entity
/// stores a k-word code, one word per fact node linked by part_<i> edges.
/// The answer is the queried entity's code words in part order.
inline DatasetSplit gen_multifact_task(std::size_t num_examples, std::size_t facts_per_answer,
                                       std::uint64_t seed) {
  if (num_examples == 0) throw ConfigError("multifact: num_examples must be positive");
  if (facts_per_answer < 2 || facts_per_answer > words::kMaxMultifactK) {
    throw ConfigError("multifact: k must be in [2, " + std::to_string(words::kMaxMultifactK) + "]");
  }
  constexpr std::size_t kEntities = 2;
  Rng rng(seed);
  const auto& pool = words::code_words();
  std::vector<QAExample> out;
  out.reserve(num_examples);
  for (std::size_t i = 0; i < num_examples; ++i) {
    detail::GraphBuilder b;
    const auto names = detail::sample_without_replacement(words::entities(), kEntities, rng);
    std::vector<std::string> codes(kEntities);
    for (std::size_t e = 0; e < kEntities; ++e) {
      const auto ent = b.node(names[e]);
      for (std::size_t f = 0; f < facts_per_answer; ++f) {
        const auto& w = pool[detail::uniform_index(pool.size(), rng)];
        codes[e] += (f ? " " : "") + w;
        b.edge(ent, "part_" + std::to_string(f + 1), b.node(w));
      }
    }
    const auto qe = detail::uniform_index(kEntities, rng);
    QAExample ex;
    ex.id = detail::example_id("multi", i);
    ex.query = "what is the code of " + names[qe];
    ex.answer = codes[qe];
    ex.graph = b.build(rng);
    out.push_back(std::move(ex));
  }
  return make_split(std::move(out));
}

/// Commonsense-stance analog. Two argument concepts are joined by one
/// relation edge whose polarity decides "support" or "counter"; the rest of
/// the graph is distractor concepts and edges. Labels alternate, so the set
/// is balanced to within one example.
inline DatasetSplit gen_stance_task(std::size_t num_examples, std::uint64_t seed) {
  if (num_examples == 0) throw ConfigError("stance: num_examples must be positive");
  constexpr std::size_t kConcepts = 5;
  constexpr std::size_t kDistractorEdges = 3;
  Rng rng(seed);
  const auto& pos = words::supporting_relations();
  const auto& neg = words::countering_relations();
  std::vector<QAExample> out;
  out.reserve(num_examples);
  for (std::size_t i = 0; i < num_examples; ++i) {
    const bool support = (i % 2) == 0;
    detail::GraphBuilder b;
    const auto names = detail::sample_without_replacement(words::concepts(), kConcepts, rng);
    for (const auto& n : names) b.node(n);
    const auto& rels = support ? pos : neg;
    b.edge(0, rels[detail::uniform_index(rels.size(), rng)], 1);
    std::set<std::pair<std::size_t, std::size_t>> used{{0, 1}, {1, 0}};
    while (b.edges.size() < 1 + kDistractorEdges) {
      const auto s = detail::uniform_index(kConcepts, rng);
      const auto d = detail::uniform_index(kConcepts, rng);
      if (s == d || used.count({s, d})) continue;
      used.insert({s, d});
      used.insert({d, s});
      const auto& r = (rng() & 1U) ? pos : neg;
      b.edge(s, r[detail::uniform_index(r.size(), rng)], d);
    }
    QAExample ex;
    ex.id = detail::example_id("stance", i);
    ex.query = "argument one " + names[0] + " argument two " + names[1] + " do they support or counter";
    ex.answer = support ? "support" : "counter";
    ex.graph = b.build(rng);
    out.push_back(std::move(ex));
  }
  // interleave labels randomly while keeping the count balanced
  std::shuffle(out.begin(), out.end(), rng);
  for (std::size_t i = 0; i < out.size(); ++i) out[i].id = detail::example_id("stance", i);
  return make_split(std::move(out));
}

/// "src relation dst ." sentences for every edge of the graph, in edge order.
inline std::string fact_sentences(const TextAttributedGraph& g) {
  std::string out;
  for (const auto& e : g.edges) {
    out += g.nodes[e.src].text + " " + e.text + " " + g.nodes[e.dst].text + " . ";
  }
  return out;
}

/// Next-token corpus for the stand-in LM, cycling through three formats
/// drawn from all task families:
///   facts as plain sentences then the question ("ball has_color red . ...
///   what is the color of ball <sep> red <eos>"),
///   a bare textualized graph,
///   a leading cue span (the answer words cycled to 1..8 slots) followed by
///   the textualized graph, the question, <sep>, answer and <eos>.
/// The last format is the prompt layout with discrete words standing where
/// the graph prompt rows go, so the frozen model learns to read that span.
inline std::vector<std::string> pretrain_corpus(std::size_t num_sequences, std::uint64_t seed) {
  std::vector<std::string> out;
  out.reserve(num_sequences);
  Rng rng(seed);
  std::size_t i = 0;
  while (out.size() < num_sequences) {
    const std::uint64_t s = rng();
    DatasetSplit d;
    switch (i % 3) {
      case 0: d = gen_attribute_lookup_task(1, 2 + (s % 3), 2 + ((s >> 8) % 3), s); break;
      case 1: d = gen_multifact_task(1, 2 + ((s >> 8) % 7), s); break;
      default: d = gen_stance_task(2, s); break;
    }
    const auto ex = d.all()[(s >> 16) % d.size()];
    const std::string qa = ex.query + " <sep> " + ex.answer + " <eos>";
    switch ((i / 3) % 3) {
      case 0: out.push_back(fact_sentences(ex.graph) + qa); break;
      case 1: out.push_back(textualize(ex.graph) + " <eos>"); break;
      default: {
        std::vector<std::string> answer_words;
        std::istringstream in(ex.answer);
        for (std::string w; in >> w;) answer_words.push_back(w);
        const std::size_t slots = std::max<std::size_t>(answer_words.size(), 1 + ((s >> 24) % 8));
        std::string cue;
        for (std::size_t k = 0; k < slots; ++k) cue += answer_words[k % answer_words.size()] + " ";
        out.push_back(cue + textualize(ex.graph) + "\n" + qa);
      }
    }
    ++i;
  }
  return out;
}

}  // namespace lgpt
