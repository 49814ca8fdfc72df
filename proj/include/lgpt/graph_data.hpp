#pragma once

// Text-attributed graphs, QA examples, the JSONL dataset format, the graph
// textualization template and the hashed text encoder.

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "lgpt/errors.hpp"
#include "lgpt/io.hpp"

namespace lgpt {

struct GraphNode {
  std::size_t id = 0;
  std::string text;
  bool operator==(const GraphNode&) const = default;
};

struct GraphEdge {
  std::size_t src = 0;
  std::size_t dst = 0;
  std::string text;
  bool operator==(const GraphEdge&) const = default;
};

/// Graph whose nodes and edges carry free-text attributes. After validation
/// node ids are exactly 0..N-1 in vector order.
struct TextAttributedGraph {
  std::vector<GraphNode> nodes;
  std::vector<GraphEdge> edges;

  std::size_t node_count() const { return nodes.size(); }
  std::size_t edge_count() const { return edges.size(); }
  bool operator==(const TextAttributedGraph&) const = default;

  /// Throws ValidationError naming `owner` on duplicate or non-contiguous
  /// ids, dangling edge endpoints or empty text.
  void validate(const std::string& owner = "graph") const {
    if (nodes.empty()) throw ValidationError(owner + ": graph has no nodes");
    for (std::size_t i = 0; i < nodes.size(); ++i) {
      if (nodes[i].id != i) {
        throw ValidationError(owner + ": node ids must be contiguous from 0 (position " +
                              std::to_string(i) + " has id " + std::to_string(nodes[i].id) + ")");
      }
      if (nodes[i].text.empty()) {
        throw ValidationError(owner + ": node " + std::to_string(i) + " has empty text");
      }
    }
    for (const auto& e : edges) {
      if (e.src >= nodes.size() || e.dst >= nodes.size()) {
        throw ValidationError(owner + ": edge (" + std::to_string(e.src) + "->" +
                              std::to_string(e.dst) + ") references a missing node");
      }
      if (e.text.empty()) {
        throw ValidationError(owner + ": edge (" + std::to_string(e.src) + "->" +
                              std::to_string(e.dst) + ") has empty text");
      }
    }
  }
};

struct QAExample {
  std::string id;
  std::string query;
  std::string answer;
  TextAttributedGraph graph;
  bool operator==(const QAExample&) const = default;
};

struct DatasetSplit {
  std::vector<QAExample> train;
  std::vector<QAExample> validation;
  std::vector<QAExample> test;
  std::array<double, 3> ratio{6.0, 2.0, 2.0};

  std::size_t size() const { return train.size() + validation.size() + test.size(); }
  std::vector<QAExample> all() const {
    std::vector<QAExample> out = train;
    out.insert(out.end(), validation.begin(), validation.end());
    out.insert(out.end(), test.begin(), test.end());
    return out;
  }
  bool operator==(const DatasetSplit&) const = default;
};

/// Partitions `examples` in order: the first share goes to train, then
/// validation, the remainder to test. Example ids must be unique.
inline DatasetSplit make_split(std::vector<QAExample> examples,
                               std::array<double, 3> ratio = {6.0, 2.0, 2.0}) {
  const double total = ratio[0] + ratio[1] + ratio[2];
  if (!(ratio[0] >= 0 && ratio[1] >= 0 && ratio[2] >= 0 && total > 0)) {
    throw ConfigError("split ratio must be non-negative with a positive sum");
  }
  std::set<std::string> seen;
  for (const auto& ex : examples) {
    if (!seen.insert(ex.id).second) throw ValidationError("duplicate example id '" + ex.id + "'");
  }
  const auto n = static_cast<double>(examples.size());
  const auto n_train = static_cast<std::size_t>(std::llround(n * ratio[0] / total));
  const auto n_val = std::min(examples.size() - n_train,
                              static_cast<std::size_t>(std::llround(n * ratio[1] / total)));
  DatasetSplit split;
  split.ratio = ratio;
  auto it = examples.begin();
  split.train.assign(std::make_move_iterator(it), std::make_move_iterator(it + static_cast<std::ptrdiff_t>(n_train)));
  it += static_cast<std::ptrdiff_t>(n_train);
  split.validation.assign(std::make_move_iterator(it), std::make_move_iterator(it + static_cast<std::ptrdiff_t>(n_val)));
  it += static_cast<std::ptrdiff_t>(n_val);
  split.test.assign(std::make_move_iterator(it), std::make_move_iterator(examples.end()));
  return split;
}

inline nlohmann::json example_to_json(const QAExample& ex) {
  nlohmann::json nodes = nlohmann::json::array();
  for (const auto& n : ex.graph.nodes) nodes.push_back({{"id", n.id}, {"text", n.text}});
  nlohmann::json edges = nlohmann::json::array();
  for (const auto& e : ex.graph.edges) edges.push_back({{"src", e.src}, {"dst", e.dst}, {"text", e.text}});
  nlohmann::json j;
  j["id"] = ex.id;
  j["query"] = ex.query;
  j["answer"] = ex.answer;
  j["nodes"] = std::move(nodes);
  j["edges"] = std::move(edges);
  return j;
}

/// Parses one dataset object, remapping node ids to 0..N-1 by ascending
/// original id. Throws ValidationError naming the example.
inline QAExample example_from_json(const nlohmann::json& j) {
  QAExample ex;
  if (!j.is_object()) throw ValidationError("expected a JSON object");
  for (const char* key : {"id", "query", "answer", "nodes", "edges"}) {
    if (!j.contains(key)) throw ValidationError(std::string("missing field '") + key + "'");
  }
  if (!j["id"].is_string() || !j["query"].is_string() || !j["answer"].is_string() ||
      !j["nodes"].is_array() || !j["edges"].is_array()) {
    throw ValidationError("field with wrong type");
  }
  ex.id = j["id"].get<std::string>();
  const std::string owner = "example '" + ex.id + "'";
  ex.query = j["query"].get<std::string>();
  ex.answer = j["answer"].get<std::string>();

  std::map<long long, std::string> raw_nodes;
  for (const auto& n : j["nodes"]) {
    if (!n.is_object() || !n.contains("id") || !n.contains("text") ||
        !n["id"].is_number_integer() || !n["text"].is_string()) {
      throw ValidationError(owner + ": malformed node entry");
    }
    const auto id = n["id"].get<long long>();
    if (!raw_nodes.emplace(id, n["text"].get<std::string>()).second) {
      throw ValidationError(owner + ": duplicate node_id " + std::to_string(id));
    }
  }
  std::map<long long, std::size_t> remap;
  for (const auto& [id, text] : raw_nodes) {
    if (text.empty()) throw ValidationError(owner + ": node " + std::to_string(id) + " has empty text");
    remap[id] = ex.graph.nodes.size();
    ex.graph.nodes.push_back({ex.graph.nodes.size(), text});
  }
  for (const auto& e : j["edges"]) {
    if (!e.is_object() || !e.contains("src") || !e.contains("dst") || !e.contains("text") ||
        !e["src"].is_number_integer() || !e["dst"].is_number_integer() || !e["text"].is_string()) {
      throw ValidationError(owner + ": malformed edge entry");
    }
    const auto s = e["src"].get<long long>(), d = e["dst"].get<long long>();
    if (!remap.count(s) || !remap.count(d)) {
      throw ValidationError(owner + ": dangling edge (" + std::to_string(s) + "->" +
                            std::to_string(d) + ")");
    }
    ex.graph.edges.push_back({remap[s], remap[d], e["text"].get<std::string>()});
  }
  ex.graph.validate(owner);
  return ex;
}

inline std::vector<QAExample> parse_jsonl(const std::string& contents) {
  std::vector<QAExample> out;
  std::istringstream in(contents);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (std::all_of(line.begin(), line.end(), [](unsigned char c) { return std::isspace(c); })) continue;
    try {
      out.push_back(example_from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::exception& e) {
      throw ValidationError("line " + std::to_string(line_no) + ": invalid JSON: " + e.what());
    } catch (const ValidationError& e) {
      throw ValidationError("line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

inline DatasetSplit load_dataset(const std::filesystem::path& path,
                                 std::array<double, 3> ratio = {6.0, 2.0, 2.0}) {
  auto examples = parse_jsonl(read_file(path));
  if (examples.empty()) throw ValidationError(path.string() + ": empty dataset");
  return make_split(std::move(examples), ratio);
}

inline std::string to_jsonl(const std::vector<QAExample>& examples) {
  std::string out;
  for (const auto& ex : examples) {
    out += example_to_json(ex).dump();
    out += '\n';
  }
  return out;
}

/// Writes train, validation and test in that order.
inline void save_dataset(const std::filesystem::path& path, const DatasetSplit& split) {
  write_file_atomic(path, to_jsonl(split.all()));
}

/// Flat graph template: "id,text" per node in id order, a blank line, then
/// "src,text,dst" per edge in input order.
inline std::string textualize(const TextAttributedGraph& g) {
  std::string out;
  for (const auto& n : g.nodes) {
    out += std::to_string(n.id);
    out += ',';
    out += n.text;
    out += '\n';
  }
  out += '\n';
  for (std::size_t i = 0; i < g.edges.size(); ++i) {
    const auto& e = g.edges[i];
    if (i) out += '\n';
    out += std::to_string(e.src) + ',' + e.text + ',' + std::to_string(e.dst);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Hashed text encoder

namespace detail {
inline std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}
inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}
}  // namespace detail

/// Buckets each token is hashed into at dimension d.
inline std::size_t text_hash_probes(std::size_t d) { return std::max<std::size_t>(1, d / 2); }

/// Deterministic bag-of-tokens feature hashing: lowercase whitespace tokens,
/// each added with a ±1 sign to text_hash_probes(d) distinct buckets, then
/// L2-normalized. Empty text (no tokens) encodes to the zero vector.
inline std::vector<double> text_encode(std::string_view text, std::size_t d) {
  if (d < 8) throw ConfigError("text_encode: dimension must be at least 8");
  std::vector<double> v(d, 0.0);
  const std::size_t probes = text_hash_probes(d);
  std::string token;
  auto flush = [&] {
    if (token.empty()) return;
    const std::uint64_t base = detail::fnv1a(token);
    // distinct buckets per token, so every token contributes norm sqrt(probes)
    std::vector<std::size_t> used;
    for (std::uint64_t p = 1; used.size() < probes; ++p) {
      const std::uint64_t x = detail::splitmix64(base + 0x632be59bd9b4e019ULL * p);
      const std::size_t b = x % d;
      if (std::find(used.begin(), used.end(), b) != used.end()) continue;
      used.push_back(b);
      v[b] += ((x >> 40) & 1U) ? 1.0 : -1.0;
    }
    token.clear();
  };
  for (char c : text) {
    if (std::isspace(static_cast<unsigned char>(c))) {
      flush();
    } else {
      token += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    }
  }
  flush();
  double norm = 0.0;
  for (double x : v) norm += x * x;
  if (norm > 0.0) {
    norm = std::sqrt(norm);
    for (double& x : v) x /= norm;
  }
  return v;
}

}  // namespace lgpt
