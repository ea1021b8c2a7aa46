#include <doctest.h>

#include "gradient_suite.hpp"

TEST_CASE("every op and the reconstruction loss match finite differences") {
  const auto suite = melt::testing::gradient_suite();
  CHECK(suite.size() > 22);
  for (const auto& entry : suite) {
    INFO(entry.check);
    CHECK(entry.relative_error < 1e-4);
  }
}
