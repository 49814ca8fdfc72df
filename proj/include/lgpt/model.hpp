#pragma once

// The trainable graph prompt encoder: query fusion stage, structural stage,
// readout, optional late fusion and projection into LM embedding space.

#include <filesystem>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "lgpt/encoder.hpp"
#include "lgpt/io.hpp"
#include "lgpt/pooling.hpp"

namespace lgpt {

enum class Readout { mean, lgpt };
enum class Fusion { none, late, early, early_late };

inline const char* to_string(Readout r) { return r == Readout::mean ? "mean" : "lgpt"; }
inline const char* to_string(Fusion f) {
  switch (f) {
    case Fusion::none: return "none";
    case Fusion::late: return "late";
    case Fusion::early: return "early";
    case Fusion::early_late: return "early_late";
  }
  return "?";
}
inline Readout readout_from_string(std::string_view s) {
  if (s == "mean") return Readout::mean;
  if (s == "lgpt") return Readout::lgpt;
  throw ConfigError("unknown readout '" + std::string(s) + "' (expected mean|lgpt)");
}
inline Fusion fusion_from_string(std::string_view s) {
  if (s == "none") return Fusion::none;
  if (s == "late") return Fusion::late;
  if (s == "early") return Fusion::early;
  if (s == "early_late" || s == "early+late") return Fusion::early_late;
  throw ConfigError("unknown fusion '" + std::string(s) + "' (expected none|early|late|early_late)");
}
inline bool uses_early(Fusion f) { return f == Fusion::early || f == Fusion::early_late; }
inline bool uses_late(Fusion f) { return f == Fusion::late || f == Fusion::early_late; }

/// Shape of the encoder. `d_llm` must equal the LM width.
struct EncoderConfig {
  Readout readout = Readout::lgpt;
  Fusion fusion = Fusion::early;
  std::size_t n_tokens = 8;
  std::size_t d = 64;
  std::size_t d_llm = 64;
  std::size_t heads = 4;
  std::size_t query_layers = 1;
  std::size_t graph_layers = 4;
  std::size_t pool_layers = 1;
  bool pool_includes_query = true;

  /// Prompt rows produced: n for lgpt, 1 for mean pooling.
  std::size_t prompt_tokens() const { return readout == Readout::mean ? 1 : n_tokens; }

  void validate() const {
    if (d < 8) throw ConfigError("encoder: d must be at least 8");
    if (heads == 0 || d % heads != 0) throw ConfigError("encoder: d must be divisible by heads");
    if (d_llm == 0) throw ConfigError("encoder: d_llm must be positive");
    if (readout == Readout::lgpt && n_tokens == 0) throw ConfigError("encoder: n_tokens must be at least 1");
  }
  bool operator==(const EncoderConfig&) const = default;
};

/// All trainable parameters of the prompt encoder. Only the groups active
/// under the config are created.
struct PromptEncoder {
  EncoderConfig config;
  ParameterStore params;
  std::vector<GraphTransformerLayer> query_layers;
  Tensor query_link;
  std::vector<GraphTransformerLayer> graph_layers;
  LgptParams lgpt;
  LateFusionParams late;
  ProjectionMlp proj;

  static PromptEncoder create(const EncoderConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    PromptEncoder m;
    m.config = cfg;
    Rng rng(seed);
    if (uses_early(cfg.fusion)) {
      m.query_layers = create_layer_stack(m.params, "gnn_query", cfg.query_layers, cfg.d, cfg.heads, rng);
      Tensor link = Tensor::zeros(1, cfg.d);
      fill_normal(link, 0.02, rng);
      m.query_link = m.params.add("gnn_query.query_link", link);
    }
    m.graph_layers = create_layer_stack(m.params, "gnn_graph", cfg.graph_layers, cfg.d, cfg.heads, rng);
    if (cfg.readout == Readout::lgpt) {
      m.lgpt = LgptParams::create(m.params, cfg.n_tokens, cfg.d, cfg.pool_layers, cfg.heads, rng);
    }
    if (uses_late(cfg.fusion)) m.late = LateFusionParams::create(m.params, cfg.d, rng);
    m.proj = ProjectionMlp::create(m.params, cfg.d, 2 * cfg.d_llm, cfg.d_llm, rng);
    return m;
  }

  /// Parameter groups present: subset of gnn_query, gnn_graph, gnn_pool,
  /// lgpt, late_fusion, proj.
  std::vector<std::string> groups() const {
    std::vector<std::string> out;
    for (const auto& [name, t] : params.entries()) {
      const auto g = group_of(name);
      if (std::find(out.begin(), out.end(), g) == out.end()) out.push_back(g);
    }
    return out;
  }
};

/// Intermediate states of one encoder pass, for inspection in tests.
struct EncoderTrace {
  EncodedGraph initial, fused, structural;
  Tensor pooled, fused_pool;
};

inline PromptVectors encode(const PromptEncoder& m, const TextAttributedGraph& graph, const std::string& query,
                            EncoderCounters* counters = nullptr, EncoderTrace* trace = nullptr) {
  const auto& cfg = m.config;
  EncodedGraph eg = init_node_edge_states(graph, cfg.d);
  if (trace) trace->initial = eg;
  Tensor qvec;
  if (cfg.fusion != Fusion::none) qvec = Tensor::row(text_encode(query, cfg.d));
  if (uses_early(cfg.fusion)) {
    eg = run_gnn_query(attach_query_node(eg, qvec, m.query_link), m.query_layers, counters);
  }
  if (trace) trace->fused = eg;
  eg = run_gnn_graph(eg, m.graph_layers, counters);
  if (trace) trace->structural = eg;

  Tensor pooled = cfg.readout == Readout::lgpt ? lgpt_pool(eg, m.lgpt, cfg.pool_includes_query, counters)
                                               : mean_pool(eg);
  if (trace) trace->pooled = pooled;
  PromptSource source = cfg.readout == Readout::lgpt ? PromptSource::lgpt : PromptSource::mean;
  if (uses_late(cfg.fusion)) {
    pooled = late_fusion_cross_attention(pooled, qvec, m.late);
    source = PromptSource::late_fused;
  }
  if (trace) trace->fused_pool = pooled;
  return project(pooled, m.proj, source);
}

/// Node updates executed by the three GNN stages (query fusion, structure,
/// pooling) with g layers each, on a k-node path graph with n pooling tokens.
inline std::size_t count_encoder_ops(std::size_t k, std::size_t n, std::size_t g) {
  if (k == 0 || n == 0) throw ConfigError("count_encoder_ops: k and n must be at least 1");
  EncoderConfig cfg;
  cfg.d = 8;
  cfg.d_llm = 8;
  cfg.heads = 1;
  cfg.n_tokens = n;
  cfg.query_layers = cfg.graph_layers = cfg.pool_layers = g;
  const PromptEncoder m = PromptEncoder::create(cfg, 0);
  TextAttributedGraph graph;
  for (std::size_t i = 0; i < k; ++i) graph.nodes.push_back({i, "node" + std::to_string(i)});
  for (std::size_t i = 0; i + 1 < k; ++i) graph.edges.push_back({i, i + 1, "next"});
  EncoderCounters counters;
  NoGradScope no_grad;
  encode(m, graph, "query", &counters);
  return counters.node_updates;
}

// ---------------------------------------------------------------------------
// Parameter files: JSON {"parameters": [{"name", "shape", "values"}]}.

inline nlohmann::json parameters_to_json(const ParameterStore& store) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& [name, t] : store.entries()) {
    arr.push_back({{"name", name}, {"shape", t.shape()}, {"values", std::vector<double>(t.data().begin(), t.data().end())}});
  }
  return {{"parameters", arr}};
}

/// Copies values into an existing store; names and shapes must match.
inline void parameters_from_json(ParameterStore& store, const nlohmann::json& j) {
  if (!j.contains("parameters") || !j["parameters"].is_array()) {
    throw ValidationError("parameter file: missing 'parameters' array");
  }
  const auto& arr = j["parameters"];
  if (arr.size() != store.size()) {
    throw ValidationError("parameter file: " + std::to_string(arr.size()) + " tensors, model expects " +
                          std::to_string(store.size()));
  }
  for (std::size_t i = 0; i < arr.size(); ++i) {
    auto& [name, t] = store.entries()[i];
    const auto& e = arr[i];
    if (e.value("name", std::string()) != name) throw ValidationError("parameter file: expected '" + name + "'");
    const auto shape = e.at("shape").get<Shape>();
    const auto values = e.at("values").get<std::vector<double>>();
    if (shape != t.shape() || values.size() != t.numel()) {
      throw ValidationError("parameter file: shape mismatch for '" + name + "'");
    }
    std::copy(values.begin(), values.end(), t.mutable_data().begin());
  }
}

}  // namespace lgpt
