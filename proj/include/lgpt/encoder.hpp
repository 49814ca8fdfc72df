#pragma once

// Graph Transformer message passing over text-attributed graphs, including
// the virtual query node used for early query fusion.

#include <cmath>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "lgpt/graph_data.hpp"
#include "lgpt/ops.hpp"
#include "lgpt/optim.hpp"

namespace lgpt {

/// Counts destination-node updates executed by Graph Transformer layers.
struct EncoderCounters {
  std::size_t node_updates = 0;
};

/// Parameter handles for one Graph Transformer layer. Heads are column
/// blocks of the d×d projections, so H·d_h == d always holds.
struct GraphTransformerLayer {
  Tensor w_query, w_key, w_value, w_edge, w_out;
  Tensor ln_gain, ln_bias;
  std::size_t heads = 1;

  std::size_t width() const { return w_query.rows(); }
  std::size_t head_dim() const { return width() / heads; }

  /// Registers the layer's tensors under `prefix` with uniform(±1/sqrt(d))
  /// projections and an identity layer norm.
  static GraphTransformerLayer create(ParameterStore& store, const std::string& prefix,
                                      std::size_t d, std::size_t heads, Rng& rng) {
    if (heads == 0 || d % heads != 0) {
      throw ConfigError("graph transformer: width " + std::to_string(d) +
                        " not divisible by head count " + std::to_string(heads));
    }
    const double bound = 1.0 / std::sqrt(static_cast<double>(d));
    auto proj = [&](const char* name) {
      Tensor t = Tensor::zeros(d, d);
      fill_uniform(t, bound, rng);
      return store.add(prefix + "." + name, t);
    };
    GraphTransformerLayer layer;
    layer.heads = heads;
    layer.w_query = proj("w_query");
    layer.w_key = proj("w_key");
    layer.w_value = proj("w_value");
    layer.w_edge = proj("w_edge");
    layer.w_out = proj("w_out");
    layer.ln_gain = store.add(prefix + ".ln_gain", Tensor(Shape{d}, 1.0));
    layer.ln_bias = store.add(prefix + ".ln_bias", Tensor(Shape{d}, 0.0));
    return layer;
  }
};

inline std::vector<GraphTransformerLayer> create_layer_stack(ParameterStore& store,
                                                             const std::string& prefix,
                                                             std::size_t count, std::size_t d,
                                                             std::size_t heads, Rng& rng) {
  std::vector<GraphTransformerLayer> out;
  for (std::size_t i = 0; i < count; ++i) {
    out.push_back(GraphTransformerLayer::create(store, prefix + ".layer" + std::to_string(i), d, heads, rng));
  }
  return out;
}

/// Node and edge states of a (possibly query-augmented) graph.
struct EncodedGraph {
  Tensor node_states;                                     // [(k or k+1)×d]
  std::vector<std::pair<std::size_t, std::size_t>> edge_index;  // (src, dst)
  Tensor edge_states;                                     // [E×d]
  std::optional<std::size_t> query_node_index;
  std::size_t graph_node_count = 0;                       // k, excluding the query node

  std::size_t width() const { return node_states.cols(); }
  std::size_t node_count() const { return node_states.rows(); }
  std::size_t edge_count() const { return edge_index.size(); }
};

inline Tensor encode_rows(const std::vector<std::string>& texts, std::size_t d) {
  Tensor t = Tensor::zeros(texts.size(), d);
  auto out = t.mutable_data();
  for (std::size_t i = 0; i < texts.size(); ++i) {
    const auto v = text_encode(texts[i], d);
    std::copy(v.begin(), v.end(), out.begin() + static_cast<std::ptrdiff_t>(i * d));
  }
  return t;
}

/// Node row i = text_encode(node text), edge row e = text_encode(edge text).
inline EncodedGraph init_node_edge_states(const TextAttributedGraph& graph, std::size_t d) {
  EncodedGraph eg;
  std::vector<std::string> node_texts, edge_texts;
  for (const auto& n : graph.nodes) node_texts.push_back(n.text);
  for (const auto& e : graph.edges) {
    edge_texts.push_back(e.text);
    eg.edge_index.emplace_back(e.src, e.dst);
  }
  eg.node_states = encode_rows(node_texts, d);
  eg.edge_states = encode_rows(edge_texts, d);
  eg.graph_node_count = graph.node_count();
  return eg;
}

/// Appends the query node (row k) wired both ways to every original node.
/// All 2k new edges carry the shared learned `query_link` vector [1×d].
inline EncodedGraph attach_query_node(const EncodedGraph& eg, const Tensor& query_vec,
                                      const Tensor& query_link) {
  if (eg.query_node_index) throw ContractError("attach_query_node: query node already attached");
  const std::size_t d = eg.width();
  if (query_vec.numel() != d || query_link.numel() != d) {
    throw DimensionError("attach_query_node: query vector / link must have width " + std::to_string(d));
  }
  const std::size_t k = eg.node_count();
  EncodedGraph out;
  out.graph_node_count = eg.graph_node_count;
  out.node_states = concat_rows({eg.node_states, query_vec});
  out.edge_index = eg.edge_index;
  for (std::size_t i = 0; i < k; ++i) {
    out.edge_index.emplace_back(k, i);
    out.edge_index.emplace_back(i, k);
  }
  const std::vector<std::size_t> zeros(2 * k, 0);
  out.edge_states = concat_rows({eg.edge_states, gather_rows(query_link, zeros)});
  out.query_node_index = k;
  return out;
}

/// Incoming attention slots per node: self-loop first, then in-edges in
/// edge order.
inline std::vector<std::vector<Neighbor>> incoming_slots(const EncodedGraph& eg) {
  std::vector<std::vector<Neighbor>> in(eg.node_count());
  for (std::size_t i = 0; i < in.size(); ++i) in[i].push_back({i, -1});
  for (std::size_t e = 0; e < eg.edge_index.size(); ++e) {
    const auto [s, d] = eg.edge_index[e];
    in[d].push_back({s, static_cast<std::ptrdiff_t>(e)});
  }
  return in;
}

/// Shared layer body: destinations `dst_states` attend over `src_states`
/// through `incoming`, then residual + layer norm.
inline Tensor gt_layer_apply(const GraphTransformerLayer& layer, const Tensor& dst_states,
                             const Tensor& src_states, const Tensor& edge_states,
                             const std::vector<std::vector<Neighbor>>& incoming,
                             EncoderCounters* counters = nullptr,
                             AttentionWeights* weights = nullptr) {
  const std::size_t d = layer.width();
  if (dst_states.cols() != d || src_states.cols() != d) {
    throw DimensionError("graph transformer: state width " + std::to_string(dst_states.cols()) +
                         " vs layer width " + std::to_string(d));
  }
  const Tensor q = matmul(dst_states, layer.w_query);
  const Tensor k = matmul(src_states, layer.w_key);
  const Tensor v = matmul(src_states, layer.w_value);
  const Tensor ep = edge_states.numel() > 0 ? matmul(edge_states, layer.w_edge) : Tensor::zeros(0, d);
  const Tensor msg = graph_attention(q, k, v, ep, incoming, layer.heads, weights);
  if (counters) counters->node_updates += dst_states.rows();
  return layer_norm(add(dst_states, matmul(msg, layer.w_out)), layer.ln_gain, layer.ln_bias);
}

/// One Graph Transformer layer over all nodes; edge states pass through.
inline EncodedGraph gt_layer_forward(const GraphTransformerLayer& layer, const EncodedGraph& eg,
                                     EncoderCounters* counters = nullptr,
                                     AttentionWeights* weights = nullptr) {
  EncodedGraph out = eg;
  out.node_states = gt_layer_apply(layer, eg.node_states, eg.node_states, eg.edge_states,
                                   incoming_slots(eg), counters, weights);
  return out;
}

inline EncodedGraph run_layers(const std::vector<GraphTransformerLayer>& layers, EncodedGraph eg,
                               EncoderCounters* counters) {
  if (layers.empty()) return eg;
  const auto in = incoming_slots(eg);
  for (const auto& layer : layers) {
    eg.node_states = gt_layer_apply(layer, eg.node_states, eg.node_states, eg.edge_states, in, counters);
  }
  return eg;
}

/// Query-fusion stage: message passing over the query-augmented graph.
inline EncodedGraph run_gnn_query(const EncodedGraph& eg_with_query,
                                  const std::vector<GraphTransformerLayer>& layers,
                                  EncoderCounters* counters = nullptr) {
  if (!eg_with_query.query_node_index) {
    throw ContractError("run_gnn_query: graph has no query node attached");
  }
  return run_layers(layers, eg_with_query, counters);
}

/// Structural stage over every present node (query node included when attached).
inline EncodedGraph run_gnn_graph(const EncodedGraph& eg,
                                  const std::vector<GraphTransformerLayer>& layers,
                                  EncoderCounters* counters = nullptr) {
  return run_layers(layers, eg, counters);
}

}  // namespace lgpt
