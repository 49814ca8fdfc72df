#include <gtest/gtest.h>

#include "lgpt/report.hpp"
#include "oracles.hpp"

using namespace lgpt;

namespace {

ArmResult run(Readout r, Fusion f, std::size_t n, std::uint64_t seed, std::optional<double> acc,
              TaskKind task = TaskKind::multifact) {
  RunConfig c;
  c.task = task;
  c.readout = r;
  c.fusion = f;
  c.n_tokens = n;
  c.seed = seed;
  c = c.normalized();
  ArmResult a;
  a.config = c;
  if (acc) {
    RunReport rep;
    rep.config = c;
    rep.test_accuracy = acc;
    a.report = rep;
  } else {
    a.error = "boom";
  }
  return a;
}

std::vector<std::string> lines(const std::string& s) {
  std::vector<std::string> out;
  std::size_t pos = 0;
  while (pos < s.size()) {
    const auto nl = s.find('\n', pos);
    out.push_back(s.substr(pos, nl - pos));
    pos = nl == std::string::npos ? s.size() : nl + 1;
  }
  return out;
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out(1);
  for (char c : s) {
    if (c == sep) out.emplace_back();
    else out.back() += c;
  }
  return out;
}

}  // namespace

TEST(Report, SingleReportGivesOneRow) {
  RunReport rep;
  rep.config.task = TaskKind::attribute_lookup;
  rep.test_accuracy = 0.9;
  const auto t = summarize(std::vector<RunReport>{rep});
  ASSERT_EQ(t.arms.size(), 1u);
  const auto csv = lines(render_csv(t));
  EXPECT_EQ(csv.size(), 2u);
  const auto md = lines(render_markdown(t));
  EXPECT_EQ(std::count_if(md.begin(), md.end(), [](const std::string& l) { return l.rfind("| lgpt", 0) == 0; }), 1);
}

TEST(Report, BaselineDeltaIsZero) {
  const auto t = summarize({run(Readout::mean, Fusion::none, 1, 1, 0.4), run(Readout::mean, Fusion::none, 1, 2, 0.6)});
  ASSERT_EQ(t.arms.size(), 1u);
  EXPECT_TRUE(t.arms[0].is_baseline());
  EXPECT_EQ(split(lines(render_csv(t))[1], ',').back(), "+0.00%");
}

TEST(Report, DeltaIsRelativeToMeanNoneArm) {
  const auto t = summarize({
      run(Readout::mean, Fusion::none, 1, 1, 0.50),
      run(Readout::lgpt, Fusion::early, 8, 1, 0.55),
      run(Readout::lgpt, Fusion::late, 8, 1, 0.40),
  });
  ASSERT_EQ(t.arms.size(), 3u);
  for (const auto& a : t.arms) {
    ASSERT_TRUE(a.delta_pct.has_value());
    EXPECT_NEAR(*a.delta_pct, (a.mean / 0.50 - 1.0) * 100.0, 1e-12);
  }
  const auto csv = render_csv(t);
  EXPECT_NE(csv.find("+10.00%"), std::string::npos) << csv;
  EXPECT_NE(csv.find("-20.00%"), std::string::npos) << csv;
}

TEST(Report, MissingBaselineLeavesDeltaUnavailable) {
  const auto t = summarize({run(Readout::lgpt, Fusion::early, 8, 1, 0.5)});
  EXPECT_FALSE(t.arms[0].delta_pct.has_value());
  EXPECT_EQ(split(lines(render_csv(t))[1], ',').back(), "n/a");
}

TEST(Report, MeanAndSampleStdPerArm) {
  const std::vector<double> accs{0.25, 0.5, 0.9};
  std::vector<ArmResult> rs;
  for (std::size_t i = 0; i < accs.size(); ++i) rs.push_back(run(Readout::lgpt, Fusion::early, 8, i + 1, accs[i]));
  const auto t = summarize(rs);
  ASSERT_EQ(t.arms.size(), 1u);
  EXPECT_NEAR(t.arms[0].mean, oracle::mean(accs), 1e-15);
  EXPECT_NEAR(t.arms[0].stddev, oracle::sample_std(accs), 1e-15);
  EXPECT_EQ(t.arms[0].seeds, (std::vector<std::uint64_t>{1, 2, 3}));
  // 100 * mean and std, two decimals
  const auto row = split(lines(render_csv(t))[1], ',');
  char m[32], s[32];
  std::snprintf(m, sizeof m, "%.2f", 100 * oracle::mean(accs));
  std::snprintf(s, sizeof s, "%.2f", 100 * oracle::sample_std(accs));
  EXPECT_EQ(row[8], m);
  EXPECT_EQ(row[9], s);
}

TEST(Report, SingleRunHasZeroStd) {
  const auto t = summarize({run(Readout::lgpt, Fusion::early, 8, 1, 0.7)});
  EXPECT_EQ(t.arms[0].stddev, 0.0);
}

TEST(Report, FailedRunsAreCountedNotAveraged) {
  const auto t = summarize({run(Readout::lgpt, Fusion::early, 8, 1, 0.6), run(Readout::lgpt, Fusion::early, 8, 2, std::nullopt)});
  ASSERT_EQ(t.arms.size(), 1u);
  EXPECT_EQ(t.arms[0].runs(), 1u);
  EXPECT_EQ(t.arms[0].errors, (std::vector<std::string>{"boom"}));
  EXPECT_DOUBLE_EQ(t.arms[0].mean, 0.6);
  EXPECT_NE(render_markdown(t).find("1 failed"), std::string::npos);
}

TEST(Report, MixedTasksRejected) {
  EXPECT_THROW(summarize({run(Readout::lgpt, Fusion::early, 8, 1, 0.5, TaskKind::multifact),
                          run(Readout::lgpt, Fusion::early, 8, 1, 0.5, TaskKind::stance)}),
               ValidationError);
  EXPECT_THROW(summarize(std::vector<ArmResult>{}), ValidationError);
}

TEST(Report, FigureFourSweepOrderedByTokenCount) {
  // input deliberately out of order
  const auto t = summarize({run(Readout::lgpt, Fusion::early, 32, 1, 0.3), run(Readout::lgpt, Fusion::early, 1, 1, 0.1),
                            run(Readout::lgpt, Fusion::early, 8, 1, 0.2)});
  ASSERT_EQ(t.arms.size(), 3u);
  EXPECT_EQ(t.arms[0].config.n_tokens, 1u);
  EXPECT_EQ(t.arms[1].config.n_tokens, 8u);
  EXPECT_EQ(t.arms[2].config.n_tokens, 32u);
  const auto md = lines(render_markdown(t));
  std::vector<std::string> rows;
  for (const auto& l : md)
    if (l.rfind("| lgpt", 0) == 0) rows.push_back(l);
  ASSERT_EQ(rows.size(), 3u);
  EXPECT_NE(rows[0].find("| 1 |"), std::string::npos);
  EXPECT_NE(rows[1].find("| 8 |"), std::string::npos);
  EXPECT_NE(rows[2].find("| 32 |"), std::string::npos);
}

TEST(Report, TableFourArmsAllRendered) {
  std::vector<ArmResult> rs;
  for (const auto& c : preset_matrix("table4", RunConfig{}))
    for (std::uint64_t s : {1, 2, 3}) {
      auto r = run(c.readout, c.fusion, c.n_tokens, s, 0.1 * static_cast<double>(s));
      r.config.task = r.report->config.task = TaskKind::attribute_lookup;
      rs.push_back(r);
    }
  const auto t = summarize(rs);
  ASSERT_EQ(t.arms.size(), 8u);
  EXPECT_TRUE(t.arms[0].is_baseline());
  const auto csv = lines(render_csv(t));
  ASSERT_EQ(csv.size(), 9u);
  EXPECT_EQ(csv[0],
            "task,arm,readout,fusion,n_tokens,seeds,runs,failed,mean_test_acc,std_test_acc,delta_vs_mean_none");
  for (std::size_t i = 1; i < csv.size(); ++i) {
    const auto row = split(csv[i], ',');
    EXPECT_EQ(row.size(), 11u) << csv[i];
    EXPECT_EQ(row[5], "1;2;3");
    EXPECT_EQ(row[6], "3");
  }
}

TEST(Report, RenderIsByteIdenticalAndOrderIndependent) {
  std::vector<ArmResult> rs{run(Readout::mean, Fusion::none, 1, 1, 0.3), run(Readout::lgpt, Fusion::early, 8, 1, 0.5),
                            run(Readout::mean, Fusion::late, 1, 1, 0.35), run(Readout::lgpt, Fusion::early, 8, 2, 0.45)};
  const auto a = render_csv(summarize(rs));
  EXPECT_EQ(a, render_csv(summarize(rs)));
  EXPECT_EQ(render_markdown(summarize(rs)), render_markdown(summarize(rs)));
  std::vector<ArmResult> shuffled{rs[2], rs[1], rs[0], rs[3]};
  EXPECT_EQ(a, render_csv(summarize(shuffled)));
}

TEST(Report, AblationJsonRoundTrip) {
  std::vector<ArmResult> rs{run(Readout::mean, Fusion::none, 1, 1, 0.3), run(Readout::lgpt, Fusion::early, 8, 1, std::nullopt)};
  const auto back = results_from_json(nlohmann::json::parse(ablation_to_json(rs).dump()));
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[0].config, rs[0].config);
  EXPECT_EQ(back[0].report->test_accuracy, 0.3);
  EXPECT_FALSE(back[1].report.has_value());
  EXPECT_EQ(back[1].error, "boom");
  EXPECT_EQ(render_csv(summarize(back)), render_csv(summarize(rs)));
  EXPECT_THROW(results_from_json(nlohmann::json{{"arms", {{{"config", {{"bogus", 1}}}}}}}), ValidationError);
}

TEST(Report, FormatNames) {
  EXPECT_EQ(report_format_from_string("md"), ReportFormat::md);
  EXPECT_EQ(report_format_from_string("csv"), ReportFormat::csv);
  EXPECT_THROW(report_format_from_string("pdf"), ConfigError);
}
