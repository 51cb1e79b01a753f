// Prices an American put on a two-period binomial tree and prints the
// value process with its exercise region.

#include "rbsde.hpp"

#include <cstdio>

int main() {
  using namespace rbsde;
  const ScenarioTree tree = build_kernel_tree(2, {0.5, 0.5});
  Mat sigma(1, 2);
  sigma << 0.2, -0.2;
  Vec b(1), s0(1);
  b << 0.05;
  s0 << 100.0;
  const Market mkt = build_market(tree, MarketSpec::constant(tree, 0.0, b, sigma, s0));
  const AdaptedProcess put = vanilla_payoff(mkt, PayoffKind::Put, 100.0);
  const AmericanBounds am = price_american_bounds(mkt, put);
  for (NodeId n = 0; n < tree.size(); ++n)
    std::printf("%-6s t=%d S=%8.3f payoff=%8.4f Y=%8.4f exercise=%s\n", tree.node(n).id.c_str(), tree.time(n),
                mkt.prices[n](0), put[n], am.super.y[n], am.super_exercise.stops_at(n) ? "yes" : "no");
  return 0;
}
