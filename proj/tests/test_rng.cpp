#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <set>

#include "stg/rng.hpp"

using namespace stg;

TEST_CASE("same seed produces the same stream") {
  Rng a(42), b(42);
  for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());
}

TEST_CASE("splitmix64 reference values") {
  // First outputs for seed 0 of the standard splitmix64 sequence.
  Rng r(0);
  CHECK(r.next_u64() == 0xe220a8397b1dcdafULL);
  CHECK(r.next_u64() == 0x6e789e6aa1b965f4ULL);
  CHECK(r.next_u64() == 0x06c45d188009454fULL);
}

TEST_CASE("next_double lies in [0, 1)") {
  Rng r(7);
  for (int i = 0; i < 10000; ++i) {
    double x = r.next_double();
    CHECK(x >= 0.0);
    CHECK(x < 1.0);
  }
}

TEST_CASE("uniform respects bounds and hits both halves") {
  Rng r(3);
  int low = 0;
  for (int i = 0; i < 1000; ++i) {
    double x = r.uniform(-2.0, 6.0);
    CHECK(x >= -2.0);
    CHECK(x < 6.0);
    if (x < 2.0) ++low;
  }
  CHECK(low > 400);
  CHECK(low < 600);
}

TEST_CASE("next_below is unbiased enough and in range") {
  Rng r(11);
  int counts[5] = {0, 0, 0, 0, 0};
  for (int i = 0; i < 50000; ++i) {
    auto v = r.next_below(5);
    REQUIRE(v < 5);
    ++counts[v];
  }
  for (int c : counts) {
    CHECK(c > 9500);
    CHECK(c < 10500);
  }
}

TEST_CASE("derived streams differ by name and index") {
  Rng a = derive_stream(9, "alpha", 0);
  Rng b = derive_stream(9, "alpha", 1);
  Rng c = derive_stream(9, "beta", 0);
  Rng a2 = derive_stream(9, "alpha", 0);
  CHECK(a.next_u64() != b.next_u64());
  CHECK(a2.next_u64() != c.next_u64());
  Rng a3 = derive_stream(9, "alpha", 0);
  Rng a4 = derive_stream(9, "alpha", 0);
  for (int i = 0; i < 10; ++i) CHECK(a3.next_u64() == a4.next_u64());
}

TEST_CASE("different seeds decorrelate") {
  std::set<std::uint64_t> firsts;
  for (std::uint64_t s = 0; s < 100; ++s) firsts.insert(Rng(s).next_u64());
  CHECK(firsts.size() == 100);
}
