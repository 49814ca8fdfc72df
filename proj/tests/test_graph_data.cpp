#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <set>

#include "lgpt/tasks.hpp"
#include "oracles.hpp"

using namespace lgpt;
namespace fs = std::filesystem;

namespace {

fs::path tmp_path(const std::string& name) {
  fs::path dir = fs::path(LGPT_TEST_TMP) / "graph_data";
  fs::create_directories(dir);
  return dir / name;
}

void write_text(const fs::path& p, const std::string& s) {
  std::ofstream(p, std::ios::binary) << s;
}

std::string valid_line(const std::string& id) {
  return R"({"id":")" + id +
         R"(","query":"what is the color of ball","answer":"red","nodes":[{"id":0,"text":"ball"},{"id":1,"text":"red"}],"edges":[{"src":0,"dst":1,"text":"has_color"}]})";
}

TextAttributedGraph two_nodes() {
  TextAttributedGraph g;
  g.nodes = {{0, "dog"}, {1, "cat"}};
  g.edges = {{0, 1, "chases"}};
  return g;
}

double cosine(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;  // both unit norm
}

}  // namespace

// --- graph validation -------------------------------------------------------

TEST(GraphValidation, AcceptsWellFormedGraph) { EXPECT_NO_THROW(two_nodes().validate()); }

TEST(GraphValidation, RejectsEachDocumentedMalformation) {
  auto expect_reject = [](TextAttributedGraph g, const char* what) {
    EXPECT_THROW(g.validate("ex"), ValidationError) << what;
  };
  {
    auto g = two_nodes();
    g.nodes[1].id = 0;
    expect_reject(g, "duplicate id");
  }
  {
    auto g = two_nodes();
    g.nodes[1].id = 5;
    expect_reject(g, "non-contiguous id");
  }
  {
    auto g = two_nodes();
    g.edges[0].dst = 2;
    expect_reject(g, "dangling edge");
  }
  {
    auto g = two_nodes();
    g.nodes[0].text.clear();
    expect_reject(g, "empty node text");
  }
  {
    auto g = two_nodes();
    g.edges[0].text.clear();
    expect_reject(g, "empty edge text");
  }
}

TEST(GraphValidation, RandomValidGraphsPassAndInjectedFaultsFail) {
  Rng rng(3);
  for (int trial = 0; trial < 200; ++trial) {
    const auto n = 1 + rng() % 6;
    TextAttributedGraph g;
    for (std::size_t i = 0; i < n; ++i) g.nodes.push_back({i, "n" + std::to_string(rng() % 50)});
    for (std::size_t e = 0; e < rng() % 8; ++e) g.edges.push_back({rng() % n, rng() % n, "r"});
    ASSERT_NO_THROW(g.validate());
    auto bad = g;
    switch (trial % 3) {
      case 0: bad.nodes[rng() % n].text.clear(); break;
      case 1: bad.edges.push_back({0, n + rng() % 3, "r"}); break;
      default: bad.nodes.back().id = n + 1; break;
    }
    EXPECT_THROW(bad.validate(), ValidationError);
  }
}

// --- load_dataset -------------------------------------------------------------

TEST(LoadDataset, TenLinesSplitSixTwoTwo) {
  std::string s;
  for (int i = 0; i < 10; ++i) s += valid_line("ex" + std::to_string(i)) + "\n";
  const auto p = tmp_path("ten.jsonl");
  write_text(p, s);
  const DatasetSplit d = load_dataset(p);
  EXPECT_EQ(d.train.size(), 6u);
  EXPECT_EQ(d.validation.size(), 2u);
  EXPECT_EQ(d.test.size(), 2u);
}

TEST(LoadDataset, DanglingEdgeNamesExample) {
  const std::string line =
      R"({"id":"bad-7","query":"q","answer":"a","nodes":[{"id":0,"text":"x"},{"id":1,"text":"y"},{"id":2,"text":"z"}],"edges":[{"src":0,"dst":7,"text":"r"}]})";
  const auto p = tmp_path("dangling.jsonl");
  write_text(p, valid_line("ok") + "\n" + line + "\n");
  try {
    load_dataset(p);
    FAIL() << "expected ValidationError";
  } catch (const ValidationError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("bad-7"), std::string::npos) << msg;
    EXPECT_NE(msg.find("line 2"), std::string::npos) << msg;
  }
}

TEST(LoadDataset, EmptyFileIsError) {
  const auto p = tmp_path("empty.jsonl");
  write_text(p, "");
  EXPECT_THROW(load_dataset(p), ValidationError);
}

TEST(LoadDataset, RejectsDuplicateNodeIdAndEmptyText) {
  const std::string dup =
      R"({"id":"dup","query":"q","answer":"a","nodes":[{"id":0,"text":"x"},{"id":0,"text":"y"}],"edges":[]})";
  const std::string empty =
      R"({"id":"emp","query":"q","answer":"a","nodes":[{"id":0,"text":""}],"edges":[]})";
  EXPECT_THROW(parse_jsonl(dup), ValidationError);
  EXPECT_THROW(parse_jsonl(empty), ValidationError);
  try {
    parse_jsonl(dup);
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("dup"), std::string::npos);
  }
}

TEST(LoadDataset, MalformedJsonReportsLine) {
  try {
    parse_jsonl(valid_line("a") + "\n{not json\n");
    FAIL();
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("line 2"), std::string::npos);
  }
}

TEST(LoadDataset, RemapsSparseIdsByAscendingOrder) {
  const std::string line =
      R"({"id":"s","query":"q","answer":"a","nodes":[{"id":9,"text":"c"},{"id":2,"text":"a"},{"id":5,"text":"b"}],"edges":[{"src":9,"dst":2,"text":"r"}]})";
  const auto xs = parse_jsonl(line);
  ASSERT_EQ(xs.size(), 1u);
  const auto& g = xs[0].graph;
  EXPECT_EQ(g.nodes[0].text, "a");
  EXPECT_EQ(g.nodes[1].text, "b");
  EXPECT_EQ(g.nodes[2].text, "c");
  EXPECT_EQ(g.edges[0].src, 2u);
  EXPECT_EQ(g.edges[0].dst, 0u);
}

TEST(LoadDataset, DuplicateExampleIdsRejected) {
  EXPECT_THROW(make_split(parse_jsonl(valid_line("x") + "\n" + valid_line("x") + "\n")), ValidationError);
}

TEST(LoadDataset, RoundTripIsStructurallyIdentical) {
  for (const auto& d : {gen_attribute_lookup_task(40, 3, 2, 5), gen_multifact_task(40, 4, 5), gen_stance_task(40, 5)}) {
    const auto p = tmp_path("roundtrip.jsonl");
    save_dataset(p, d);
    EXPECT_EQ(load_dataset(p), d);
  }
}

TEST(DatasetSplit, SplitsAreDisjointById) {
  const auto d = gen_attribute_lookup_task(100, 3, 2, 1);
  std::set<std::string> ids;
  for (const auto& ex : d.all()) EXPECT_TRUE(ids.insert(ex.id).second);
  EXPECT_EQ(d.train.size(), 60u);
  EXPECT_EQ(d.validation.size(), 20u);
  EXPECT_EQ(d.test.size(), 20u);
}

// --- textualize -------------------------------------------------------------

TEST(Textualize, SingleNode) {
  TextAttributedGraph g;
  g.nodes = {{0, "dog"}};
  EXPECT_EQ(textualize(g), "0,dog\n\n");
}

TEST(Textualize, NodesThenEdges) { EXPECT_EQ(textualize(two_nodes()), "0,dog\n1,cat\n\n0,chases,1"); }

TEST(Textualize, InjectiveOverGeneratedBatch) {
  std::map<std::string, TextAttributedGraph> seen;
  for (const auto& d : {gen_attribute_lookup_task(300, 3, 2, 8), gen_multifact_task(300, 3, 8), gen_stance_task(300, 8)}) {
    for (const auto& ex : d.all()) {
      const auto t = textualize(ex.graph);
      auto [it, fresh] = seen.emplace(t, ex.graph);
      if (!fresh) EXPECT_EQ(it->second, ex.graph) << "distinct graphs share text:\n" << t;
    }
  }
}

// --- text_encode ------------------------------------------------------------

TEST(TextEncode, Deterministic) {
  for (const char* s : {"dog chases cat", "", "a", "what is the color of ball"}) {
    EXPECT_EQ(text_encode(s, 64), text_encode(s, 64));
  }
}

TEST(TextEncode, UnitNorm) {
  const auto v = text_encode("dog chases cat", 64);
  double n = 0;
  for (double x : v) n += x * x;
  EXPECT_NEAR(std::sqrt(n), 1.0, 1e-12);
}

TEST(TextEncode, EmptyIsZeroVector) {
  for (double x : text_encode("", 16)) EXPECT_EQ(x, 0.0);
  for (double x : text_encode("   \t ", 16)) EXPECT_EQ(x, 0.0);
}

TEST(TextEncode, CaseInsensitiveAndWhitespaceTokenized) {
  EXPECT_EQ(text_encode("Dog  CHASES\tcat", 32), text_encode("dog chases cat", 32));
}

TEST(TextEncode, DimensionBelowEightRejected) { EXPECT_THROW(text_encode("x", 7), ConfigError); }

TEST(TextEncode, DisjointVocabulariesAreNearOrthogonal) {
  // every pair of generator words, and pairs of disjoint multi-word strings
  const auto vocab = task_vocabulary();
  double worst = 0;
  for (std::size_t i = 0; i < vocab.size(); ++i) {
    const auto a = text_encode(vocab[i], 64);
    for (std::size_t j = i + 1; j < vocab.size(); ++j) worst = std::max(worst, std::abs(cosine(a, text_encode(vocab[j], 64))));
  }
  Rng rng(4);
  for (int t = 0; t < 2000; ++t) {
    std::vector<std::string> pool = vocab;
    std::shuffle(pool.begin(), pool.end(), rng);
    const std::string a = pool[0] + " " + pool[1] + " " + pool[2];
    const std::string b = pool[3] + " " + pool[4] + " " + pool[5];
    worst = std::max(worst, std::abs(cosine(text_encode(a, 64), text_encode(b, 64))));
  }
  EXPECT_LT(worst, 0.5);
}

// --- generators ---------------------------------------------------------------

TEST(AttributeLookup, DeterministicInSeed) {
  EXPECT_EQ(gen_attribute_lookup_task(50, 3, 2, 17), gen_attribute_lookup_task(50, 3, 2, 17));
  EXPECT_NE(gen_attribute_lookup_task(50, 3, 2, 17), gen_attribute_lookup_task(50, 3, 2, 18));
}

TEST(AttributeLookup, AnswerIsAlwaysANodeText) {
  for (const auto& ex : gen_attribute_lookup_task(500, 4, 3, 2).all()) {
    EXPECT_TRUE(oracle::node_named(ex.graph, ex.answer).has_value()) << ex.id;
  }
}

TEST(AttributeLookup, TraversalOracleScoresPerfectly) {
  const auto d = gen_attribute_lookup_task(1000, 3, 2, 7);
  EXPECT_EQ(oracle::oracle_accuracy(d.all(), oracle::read_attribute), 1.0);
}

TEST(AttributeLookup, StructureMatchesRequest) {
  for (const auto& ex : gen_attribute_lookup_task(50, 3, 2, 9).all()) {
    EXPECT_EQ(ex.graph.node_count(), 3u * (1 + 2));
    EXPECT_EQ(ex.graph.edge_count(), 6u);
    for (const auto& e : ex.graph.edges) EXPECT_EQ(e.text.rfind("has_", 0), 0u);
    EXPECT_EQ(ex.query.rfind("what is the ", 0), 0u);
    ASSERT_NO_THROW(ex.graph.validate());
  }
}

TEST(AttributeLookup, ParameterRangeErrors) {
  EXPECT_THROW(gen_attribute_lookup_task(10, 1, 2, 1), ConfigError);
  EXPECT_THROW(gen_attribute_lookup_task(10, 3, 1, 1), ConfigError);
  EXPECT_THROW(gen_attribute_lookup_task(10, 3, 99, 1), ConfigError);
  EXPECT_THROW(gen_attribute_lookup_task(0, 3, 2, 1), ConfigError);
}

TEST(Multifact, OracleScoresPerfectlyForTwoFacts) {
  EXPECT_EQ(oracle::oracle_accuracy(gen_multifact_task(500, 2, 3).all(), oracle::read_code), 1.0);
}

TEST(Multifact, AnswerHasKTokens) {
  for (std::size_t k : {2, 4, 8}) {
    for (const auto& ex : gen_multifact_task(100, k, 4).all()) EXPECT_EQ(oracle::words(ex.answer).size(), k);
  }
}

TEST(Multifact, ShufflingFactNodesAcrossExamplesDropsOracleToChance) {
  auto xs = gen_multifact_task(600, 4, 5).all();
  EXPECT_EQ(oracle::oracle_accuracy(xs, oracle::read_code), 1.0);
  // collect fact node texts (targets of part_* edges) and deal them back out permuted
  std::vector<std::pair<std::size_t, std::size_t>> slots;  // (example, node)
  std::vector<std::string> texts;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    for (const auto& e : xs[i].graph.edges) {
      slots.emplace_back(i, e.dst);
      texts.push_back(xs[i].graph.nodes[e.dst].text);
    }
  }
  Rng rng(6);
  std::shuffle(texts.begin(), texts.end(), rng);
  for (std::size_t s = 0; s < slots.size(); ++s) xs[slots[s].first].graph.nodes[slots[s].second].text = texts[s];
  // chance for a 4-word code over 12 words is 12^-4
  EXPECT_LT(oracle::oracle_accuracy(xs, oracle::read_code), 0.01);
}

TEST(Multifact, RangeErrors) {
  EXPECT_THROW(gen_multifact_task(10, 1, 1), ConfigError);
  EXPECT_THROW(gen_multifact_task(10, 9, 1), ConfigError);
}

TEST(Stance, LabelsBalancedWithinOnePercent) {
  const auto xs = gen_stance_task(1000, 3).all();
  std::size_t support = 0;
  for (const auto& ex : xs) support += ex.answer == "support";
  EXPECT_NEAR(static_cast<double>(support) / xs.size(), 0.5, 0.01);
}

TEST(Stance, EdgePolarityOracleScoresPerfectly) {
  EXPECT_EQ(oracle::oracle_accuracy(gen_stance_task(600, 4).all(), oracle::read_stance), 1.0);
}

TEST(Stance, MajorityClassBaselineIsNearHalf) {
  const auto d = gen_stance_task(1000, 5);
  std::size_t train_support = 0;
  for (const auto& ex : d.train) train_support += ex.answer == "support";
  const std::string majority = 2 * train_support >= d.train.size() ? "support" : "counter";
  std::size_t hit = 0;
  for (const auto& ex : d.test) hit += ex.answer == majority;
  EXPECT_NEAR(static_cast<double>(hit) / d.test.size(), 0.5, 0.1);
}

TEST(Generators, AllWordsInTaskVocabulary) {
  const auto v = task_vocabulary();
  const std::set<std::string> vocab(v.begin(), v.end());
  for (const auto& d : {gen_attribute_lookup_task(200, 4, 4, 1), gen_multifact_task(200, 8, 1), gen_stance_task(200, 1)}) {
    for (const auto& ex : d.all()) {
      for (const auto& w : oracle::words(ex.query + " " + ex.answer)) EXPECT_TRUE(vocab.count(w)) << w;
      for (const auto& n : ex.graph.nodes) EXPECT_TRUE(vocab.count(n.text)) << n.text;
      for (const auto& e : ex.graph.edges) EXPECT_TRUE(vocab.count(e.text)) << e.text;
    }
  }
}

TEST(PretrainCorpus, DeterministicAndNonEmpty) {
  const auto a = pretrain_corpus(60, 2), b = pretrain_corpus(60, 2);
  EXPECT_EQ(a, b);
  ASSERT_EQ(a.size(), 60u);
  for (const auto& s : a) EXPECT_FALSE(s.empty());
}
