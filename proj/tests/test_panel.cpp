#include <gtest/gtest.h>

#include <algorithm>
#include <random>
#include <sstream>

#include "support.hpp"

using namespace snmm;
using testing_support::kHeader;
using testing_support::parse;
using testing_support::patient_rows;

TEST(Panel, NeverTreatedPatientHasInfiniteStart) {
  const auto d = parse(std::string(kHeader) + patient_rows("1", 24, -1));
  ASSERT_EQ(d.size(), 1u);
  EXPECT_EQ(d.records[0].start, kNever);
  EXPECT_FALSE(d.records[0].censored_from.has_value());
  EXPECT_DOUBLE_EQ(d.records[0].outcome[24], 124.0);
}

TEST(Panel, StartIsFirstTreatedMonth) {
  const auto d = parse(std::string(kHeader) + patient_rows("1", 24, 5));
  EXPECT_EQ(d.records[0].start, 5);
}

TEST(Panel, NonMonotoneTreatmentRejected) {
  std::string csv = kHeader;
  for (int m = 0; m <= 24; ++m) csv += "1," + std::to_string(m) + ",1," + (m == 1 ? "1" : "0") + ",100,0\n";
  try {
    parse(csv);
    FAIL() << "expected a data error";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("non-monotone treatment"), std::string::npos) << e.what();
  }
}

TEST(Panel, MalformedRowReportsLine) {
  std::string csv = std::string(kHeader) + patient_rows("1", 24, -1);
  csv += "2,0,1,0\n";
  try {
    parse(csv);
    FAIL();
  } catch (const DataError& e) {
    EXPECT_EQ(e.line(), 27);
  }
}

TEST(Panel, DuplicateMonthRejected) {
  std::string csv = std::string(kHeader) + patient_rows("1", 24, -1) + "1,3,1,0,100,0\n";
  EXPECT_THROW(parse(csv), DataError);
}

TEST(Panel, MissingOutcomeWhileUncensoredRejected) {
  std::string csv = kHeader;
  for (int m = 0; m <= 24; ++m) csv += "1," + std::to_string(m) + ",1,0," + (m == 7 ? "" : "100") + ",0\n";
  EXPECT_THROW(parse(csv), DataError);
}

TEST(Panel, RowsAfterCensoringRejected) {
  std::string csv = kHeader;
  for (int m = 0; m < 5; ++m) csv += "1," + std::to_string(m) + ",1,0,100,0\n";
  csv += "1,5,,,,1\n1,6,1,0,100,0\n";
  EXPECT_THROW(parse(csv), DataError);
}

TEST(Panel, CensoredPatientKeepsDataBeforeCensoring) {
  std::string csv = kHeader;
  for (int m = 0; m < 5; ++m) csv += "1," + std::to_string(m) + ",1,0,100,0\n";
  csv += "1,5,,,,1\n";
  const auto d = parse(csv);
  ASSERT_TRUE(d.records[0].censored_from.has_value());
  EXPECT_EQ(*d.records[0].censored_from, 5);
  EXPECT_TRUE(d.records[0].observed_through(4));
  EXPECT_FALSE(d.records[0].observed_through(5));
}

TEST(Panel, TreatmentWithoutVisitRejected) {
  std::string csv = kHeader;
  for (int m = 0; m <= 24; ++m)
    csv += "1," + std::to_string(m) + "," + (m == 3 ? "0" : "1") + "," + (m >= 3 ? "1" : "0") + ",100,0\n";
  EXPECT_THROW(parse(csv), DataError);
}

TEST(Panel, RiskSetAtZeroIsEveryoneUncensored) {
  std::string csv = std::string(kHeader) + patient_rows("1", 24, 0) + patient_rows("2", 24, -1) + "3,0,,,,1\n";
  const auto d = parse(csv);
  EXPECT_EQ(risk_set(d, 0), (std::vector<std::size_t>{0, 1}));
}

TEST(Panel, RiskSetMembershipEndsAtInitiation) {
  const auto d = parse(std::string(kHeader) + patient_rows("1", 24, 3));
  EXPECT_EQ(risk_set(d, 3).size(), 1u);
  EXPECT_TRUE(risk_set(d, 4).empty());
}

TEST(Panel, AllTreatedAtZeroEmptiesLaterRiskSets) {
  const auto d = parse(std::string(kHeader) + patient_rows("1", 24, 0) + patient_rows("2", 24, 0));
  EXPECT_TRUE(risk_set(d, 1).empty());
  EXPECT_THROW(risk_set(d, 24), DataError);
}

TEST(Panel, IndexPairsOnDefaultGrid) {
  const auto pairs = index_pairs(Grid{24, 12, 0});
  std::set<int> ks;
  for (auto p : pairs) ks.insert(p.k);
  EXPECT_EQ(ks.size(), 13u);
  std::vector<int> at12, at24;
  for (auto p : pairs) {
    if (p.k == 12) at12.push_back(p.m);
    if (p.k == 24) at24.push_back(p.m);
  }
  std::vector<int> want12(12), want24(12);
  std::iota(want12.begin(), want12.end(), 0);
  std::iota(want24.begin(), want24.end(), 12);
  EXPECT_EQ(at12, want12);
  EXPECT_EQ(at24, want24);
}

TEST(Panel, IndexPairsSmallestGrid) {
  EXPECT_EQ(index_pairs(Grid{2, 1, 0}), (std::vector<IndexPair>{{1, 0}, {2, 1}}));
}

TEST(Panel, IndexPairsCountAndRange) {
  for (Grid g : {Grid{24, 12, 0}, Grid{10, 3, 0}, Grid{6, 5, 0}, Grid{30, 1, 0}}) {
    const auto pairs = index_pairs(g);
    std::size_t expect = 0;
    for (int k = g.lag; k <= g.horizon; ++k) expect += static_cast<std::size_t>(std::min(k - 1, g.horizon - 1) - (k - g.lag) + 1);
    EXPECT_EQ(pairs.size(), expect);
    std::set<std::pair<int, int>> unique;
    for (auto p : pairs) {
      EXPECT_GE(p.k, p.m + 1);
      EXPECT_LE(p.k, p.m + g.lag);
      unique.insert({p.k, p.m});
    }
    EXPECT_EQ(unique.size(), pairs.size());
  }
}

TEST(Panel, GridValidation) {
  EXPECT_THROW((Grid{12, 12, 0}.validate()), ConfigError);
  EXPECT_THROW((Grid{12, 0, 0}.validate()), ConfigError);
}

TEST(Panel, RiskSetsShrinkOnlyByInitiationOrCensoring) {
  const auto sim = generate(builtin_scenario("a-censored"), 400, 3);
  const auto& d = *sim.data;
  for (int m = 0; m + 1 <= d.grid.last_start(); ++m) {
    const auto now = risk_set(d, m), next = risk_set(d, m + 1);
    EXPECT_TRUE(std::includes(now.begin(), now.end(), next.begin(), next.end()));
    for (auto i : now)
      if (!std::binary_search(next.begin(), next.end(), i)) {
        const auto& r = d.records[i];
        EXPECT_TRUE(r.start == m || !r.observed_through(m + 1)) << r.id;
      }
  }
}

TEST(Panel, CsvRoundTrip) {
  const auto sim = generate(builtin_scenario("a-censored"), 200, 5);
  std::ostringstream first;
  write_csv(first, *sim.data);
  CsvSchema schema;
  schema.grid = sim.data->grid;
  schema.covariates = {{"injdrug", CovariateKind::numeric}};
  std::istringstream in(first.str());
  const auto back = load_csv(in, schema);
  ASSERT_EQ(back.size(), sim.data->size());
  for (std::size_t i = 0; i < back.size(); ++i) EXPECT_EQ(back.records[i], sim.data->records[i]) << i;
  std::ostringstream second;
  write_csv(second, back);
  EXPECT_EQ(first.str(), second.str());
}

TEST(Panel, CategoricalMissingBecomesLevel) {
  std::string csv = "id,month,visit,A,Y,C,sex\n";
  for (int m = 0; m <= 24; ++m) csv += "1," + std::to_string(m) + ",1,0,100,0,f\n";
  for (int m = 0; m <= 24; ++m) csv += "2," + std::to_string(m) + ",1,0,100,0," + (m == 2 ? "" : "m") + "\n";
  const auto d = parse(csv, Grid{}, {{"sex", CovariateKind::categorical}});
  EXPECT_EQ(d.covariate_names, (std::vector<std::string>{"sex:m", "sex:missing"}));
  EXPECT_EQ(d.records[1].covariates_at(2, 2)[1], 1.0);
  EXPECT_EQ(d.records[1].covariates_at(3, 2)[0], 1.0);
}

TEST(Panel, NumericMissingCarriedForwardWithIndicator) {
  std::string csv = "id,month,visit,A,Y,C,cd4\n";
  for (int m = 0; m <= 24; ++m) csv += "1," + std::to_string(m) + ",1,0,100,0," + (m == 4 ? "NA" : std::to_string(m)) + "\n";
  const auto d = parse(csv, Grid{}, {{"cd4", CovariateKind::numeric}});
  ASSERT_EQ(d.covariate_names.size(), 2u);
  EXPECT_EQ(d.records[0].covariates_at(4, 2)[0], 3.0);
  EXPECT_EQ(d.records[0].covariates_at(4, 2)[1], 1.0);
  EXPECT_EQ(d.records[0].covariates_at(5, 2)[1], 0.0);
}

TEST(Panel, EmptyInputIsDataError) {
  EXPECT_THROW(parse(""), DataError);
  EXPECT_THROW(parse(kHeader), DataError);
}
