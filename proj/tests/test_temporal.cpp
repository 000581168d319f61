#include <catch2/catch_amalgamated.hpp>

#include <set>

#include "mvdet/gradcheck.hpp"
#include "mvdet/temporal.hpp"

using namespace mvdet;

namespace {

FrameRecord rec(double t) {
  FrameRecord r;
  r.timestamp = t;
  return r;
}

}  // namespace

TEST_CASE("memory bank evicts by capacity") {
  MemoryBank bank(3, 100.0);
  for (int i = 0; i < 5; ++i) bank.push(rec(i));
  REQUIRE(bank.size() == 3);
  REQUIRE(bank.records().front().timestamp == 2.0);
  REQUIRE(bank.records().back().timestamp == 4.0);
}

TEST_CASE("memory bank evicts by horizon") {
  MemoryBank bank(8, 2.5);
  bank.push(rec(0.0));
  bank.push(rec(1.0));
  bank.push(rec(2.0));
  bank.push(rec(3.0));  // 3.0 - 0.0 > 2.5 drops the first record
  REQUIRE(bank.size() == 3);
  REQUIRE(bank.records().front().timestamp == 1.0);
}

TEST_CASE("memory bank rejects out-of-order pushes") {
  MemoryBank bank;
  bank.push(rec(1.0));
  REQUIRE_THROWS_AS(bank.push(rec(1.0)), std::invalid_argument);
  REQUIRE_THROWS_AS(bank.push(rec(0.5)), std::invalid_argument);
}

TEST_CASE("fetch returns the record closest to the desired interval") {
  MemoryBank bank(8, 10.0);
  for (double t : {0.0, 0.5, 1.0, 1.5, 2.0}) bank.push(rec(t));
  // now = 2.5, desired age 1.5 -> timestamp 1.0 exactly.
  const FrameRecord* r = bank.fetch(2.5, 1.5);
  REQUIRE(r != nullptr);
  REQUIRE(r->timestamp == 1.0);
}

TEST_CASE("fetch ties prefer the older record and never go newer than now") {
  MemoryBank bank(8, 10.0);
  bank.push(rec(0.0));
  bank.push(rec(2.0));
  bank.push(rec(5.0));
  // now = 1.0, desired 1.0: ages are 1.0 (t=0) and -(newer, skipped).
  const FrameRecord* r = bank.fetch(1.0, 1.0);
  REQUIRE(r != nullptr);
  REQUIRE(r->timestamp == 0.0);
  // now = 3.0, desired 2.0: ages 3.0 (err 1) and 1.0 (err 1); tie -> older.
  r = bank.fetch(3.0, 2.0);
  REQUIRE(r->timestamp == 0.0);
  // nothing at or before now = -1.
  REQUIRE(bank.fetch(-1.0, 1.0) == nullptr);
}

TEST_CASE("fetch on an empty bank returns null") {
  MemoryBank bank;
  REQUIRE(bank.fetch(10.0) == nullptr);
  REQUIRE(bank.empty());
}

TEST_CASE("training pair sampling stays inside the window and in the past") {
  std::vector<double> ts = {0.0, 0.5, 1.0, 1.5, 4.0, 4.5};
  Rng rng(71);
  // Index 3 (t=1.5): eligible are 0, 1, 2 (all within 2 s, strictly older).
  for (int trial = 0; trial < 50; ++trial) {
    const int p = sample_training_pair(ts, 3, rng, 2.0);
    REQUIRE(p >= 0);
    REQUIRE(p < 3);
    REQUIRE(ts[static_cast<std::size_t>(3)] - ts[static_cast<std::size_t>(p)] <= 2.0);
  }
  // Index 4 (t=4.0): nothing within 2 s.
  REQUIRE(sample_training_pair(ts, 4, rng, 2.0) == -1);
  // Index 0 has no past at all.
  REQUIRE(sample_training_pair(ts, 0, rng, 2.0) == -1);
}

TEST_CASE("training pair sampling covers all eligible frames") {
  std::vector<double> ts = {0.0, 0.5, 1.0, 1.5};
  Rng rng(72);
  std::set<int> seen;
  for (int trial = 0; trial < 200; ++trial)
    seen.insert(sample_training_pair(ts, 3, rng, 2.0));
  REQUIRE(seen == std::set<int>{0, 1, 2});
}
