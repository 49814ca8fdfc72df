#pragma once

// Readouts from node states to LM prompt vectors: learnable graph pooling
// tokens, mean pooling, late-fusion cross-attention and the projection MLP.

#include <cmath>
#include <string>
#include <vector>

#include "lgpt/encoder.hpp"

namespace lgpt {

/// n learnable pooling tokens, the shared node->token edge vector, and the
/// pooling GNN layers.
struct LgptParams {
  Tensor tokens;     // [n×d]
  Tensor pool_link;  // [1×d]
  std::vector<GraphTransformerLayer> layers;

  std::size_t count() const { return tokens.defined() ? tokens.rows() : 0; }

  static LgptParams create(ParameterStore& store, std::size_t n, std::size_t d,
                           std::size_t pool_layers, std::size_t heads, Rng& rng) {
    if (n == 0) throw ConfigError("lgpt: token count must be at least 1");
    LgptParams p;
    Tensor tokens = Tensor::zeros(n, d);
    fill_normal(tokens, 0.02, rng);
    p.tokens = store.add("lgpt.tokens", tokens);
    Tensor link = Tensor::zeros(1, d);
    fill_normal(link, 0.02, rng);
    p.pool_link = store.add("lgpt.pool_link", link);
    p.layers = create_layer_stack(store, "gnn_pool", pool_layers, d, heads, rng);
    return p;
  }
};

/// Pools node states into the n token states. Tokens receive directed
/// edges from every graph node (and the query node when
/// `include_query_node`), all carrying pool_link; graph node states are read
/// but never rewritten.
inline Tensor lgpt_pool(const EncodedGraph& sg, const LgptParams& lgpt, bool include_query_node = true,
                        EncoderCounters* counters = nullptr) {
  if (!lgpt.tokens.defined() || lgpt.count() == 0) throw ConfigError("lgpt_pool: no pooling tokens");
  const std::size_t n = lgpt.count();
  const std::size_t sources =
      (include_query_node || !sg.query_node_index) ? sg.node_count() : sg.graph_node_count;
  const Tensor nodes = sources == sg.node_count() ? sg.node_states : slice_rows(sg.node_states, 0, sources);

  std::vector<std::vector<Neighbor>> incoming(n);
  for (std::size_t t = 0; t < n; ++t) {
    incoming[t].reserve(sources + 1);
    incoming[t].push_back({sources + t, -1});
    for (std::size_t j = 0; j < sources; ++j) incoming[t].push_back({j, 0});
  }
  Tensor g = lgpt.tokens;
  for (const auto& layer : lgpt.layers) {
    g = gt_layer_apply(layer, g, concat_rows({nodes, g}), lgpt.pool_link, incoming, counters);
  }
  return g;
}

/// Arithmetic mean of graph node rows in ascending id order; the query node
/// is excluded unless `include_query_node`.
inline Tensor mean_pool(const EncodedGraph& eg, bool include_query_node = false) {
  const std::size_t rows =
      (include_query_node || !eg.query_node_index) ? eg.node_count() : eg.graph_node_count;
  if (rows == 0) throw DimensionError("mean_pool: graph has no nodes");
  if (rows == eg.node_count()) return mean_rows(eg.node_states);
  return mean_rows(slice_rows(eg.node_states, 0, rows));
}

/// Single-head cross-attention used for late query fusion.
struct LateFusionParams {
  Tensor w_query, w_key, w_value;  // [d×d]
  Tensor ln_gain, ln_bias;         // [d]

  static LateFusionParams create(ParameterStore& store, std::size_t d, Rng& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(d));
    auto proj = [&](const char* name) {
      Tensor t = Tensor::zeros(d, d);
      fill_uniform(t, bound, rng);
      return store.add(std::string("late_fusion.") + name, t);
    };
    LateFusionParams p;
    p.w_query = proj("w_query");
    p.w_key = proj("w_key");
    p.w_value = proj("w_value");
    p.ln_gain = store.add("late_fusion.ln_gain", Tensor(Shape{d}, 1.0));
    p.ln_bias = store.add("late_fusion.ln_bias", Tensor(Shape{d}, 0.0));
    return p;
  }
};

/// row_i <- layer_norm(row_i + alpha_i * (query W_v)), with alpha the softmax
/// across rows of <row_i W_q, query W_k> / sqrt(d).
inline Tensor late_fusion_cross_attention(const Tensor& prompt_in, const Tensor& query_vec,
                                          const LateFusionParams& p) {
  const std::size_t m = prompt_in.rows(), d = prompt_in.cols();
  if (m == 0) throw DimensionError("late_fusion: no prompt rows");
  if (query_vec.numel() != d) throw DimensionError("late_fusion: query width mismatch");
  const Tensor scores = scale(matmul_nt(matmul(prompt_in, p.w_query), matmul(query_vec, p.w_key)),
                              1.0 / std::sqrt(static_cast<double>(d)));  // [m×1]
  const Tensor alpha = transpose(softmax_rows(transpose(scores)));      // [m×1]
  const Tensor update = matmul(alpha, matmul(query_vec, p.w_value));    // [m×d]
  return layer_norm(add(prompt_in, update), p.ln_gain, p.ln_bias);
}

enum class PromptSource { lgpt, mean, late_fused };

inline const char* to_string(PromptSource s) {
  switch (s) {
    case PromptSource::lgpt: return "lgpt";
    case PromptSource::mean: return "mean";
    case PromptSource::late_fused: return "late_fused";
  }
  return "?";
}

/// Continuous prompt rows in LM embedding space.
struct PromptVectors {
  Tensor matrix;  // [n_out×d_llm]
  PromptSource source = PromptSource::lgpt;

  std::size_t count() const { return matrix.rows(); }
  std::size_t width() const { return matrix.cols(); }
};

/// Two affine layers d -> hidden -> d_llm with GELU in between.
struct ProjectionMlp {
  Tensor w1, b1, w2, b2;

  std::size_t input_width() const { return w1.rows(); }
  std::size_t output_width() const { return w2.cols(); }

  static ProjectionMlp create(ParameterStore& store, std::size_t d, std::size_t hidden,
                              std::size_t d_llm, Rng& rng) {
    ProjectionMlp m;
    Tensor w1 = Tensor::zeros(d, hidden);
    fill_uniform(w1, 1.0 / std::sqrt(static_cast<double>(d)), rng);
    Tensor w2 = Tensor::zeros(hidden, d_llm);
    fill_uniform(w2, 1.0 / std::sqrt(static_cast<double>(hidden)), rng);
    m.w1 = store.add("proj.w1", w1);
    m.b1 = store.add("proj.b1", Tensor(Shape{hidden}, 0.0));
    m.w2 = store.add("proj.w2", w2);
    m.b2 = store.add("proj.b2", Tensor(Shape{d_llm}, 0.0));
    return m;
  }
};

inline PromptVectors project(const Tensor& tokens, const ProjectionMlp& mlp,
                             PromptSource source = PromptSource::lgpt) {
  if (tokens.cols() != mlp.input_width()) {
    throw ConfigError("project: token width " + std::to_string(tokens.cols()) +
                      " does not match projection input " + std::to_string(mlp.input_width()));
  }
  const Tensor hidden = gelu(add_row(matmul(tokens, mlp.w1), mlp.b1));
  return {add_row(matmul(hidden, mlp.w2), mlp.b2), source};
}

}  // namespace lgpt
