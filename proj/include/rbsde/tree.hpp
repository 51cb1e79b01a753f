#pragma once

// Discrete-time, finite-state filtered probability space as an explicit
// scenario tree. Each node carries the one-step conditional law of the next
// state; the tree is immutable after construction.

#include "rbsde/error.hpp"
#include "rbsde/linalg.hpp"

#include <cmath>
#include <cstddef>
#include <cstdio>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <variant>
#include <vector>

namespace rbsde {

using NodeId = std::size_t;
inline constexpr NodeId kNoNode = std::numeric_limits<NodeId>::max();

/// Tolerance used when validating user-supplied conditional laws.
inline constexpr double kLawTolerance = 1e-9;

struct Child {
  int state = 0;
  double prob = 0.0;
  NodeId node = kNoNode;
};

struct Node {
  std::string id;
  int time = 0;
  NodeId parent = kNoNode;
  int state = -1;  // label of the edge from the parent; root: initial state or -1
  std::vector<Child> children;
};

/// One-step statistics of X_{t+1} at a non-terminal node.
struct NodeStats {
  Vec p;                     // conditional law, zero off the children
  std::vector<int> support;  // {i : p_i > 0}
  Mat psi;                   // diag(p) - p p^T
  Mat psi_pinv;
};

/// Scalar adapted process: one value per node.
class AdaptedProcess {
 public:
  AdaptedProcess() = default;
  explicit AdaptedProcess(std::size_t node_count, double value = 0.0) : values_(node_count, value) {}
  explicit AdaptedProcess(std::vector<double> values) : values_(std::move(values)) {}

  double& operator[](NodeId n) { return values_[n]; }
  double operator[](NodeId n) const { return values_[n]; }
  std::size_t size() const noexcept { return values_.size(); }
  std::span<const double> values() const noexcept { return values_; }
  std::vector<double>& raw() noexcept { return values_; }

  friend bool operator==(const AdaptedProcess&, const AdaptedProcess&) = default;

 private:
  std::vector<double> values_;
};

/// Vector-valued adapted process (Z, theta, asset prices ...).
using VectorProcess = std::vector<Vec>;

// ---------------------------------------------------------------------------
// Tree descriptions

struct KernelSpec {
  int horizon = 1;
  int state_count = 2;
  /// One row: i.i.d. steps. `state_count` rows: Markov transition matrix
  /// indexed by the current state.
  std::vector<std::vector<double>> rows;
  int initial_state = 0;
};

struct ExplicitChildSpec {
  int state = 0;
  double prob = 0.0;
  std::string id;
};

struct ExplicitNodeSpec {
  std::string id;
  int time = 0;
  std::vector<ExplicitChildSpec> children;
};

struct ExplicitTreeSpec {
  std::optional<int> horizon;
  std::optional<int> state_count;
  std::vector<ExplicitNodeSpec> nodes;
};

using TreeSpec = std::variant<KernelSpec, ExplicitTreeSpec>;

struct TreeIssue {
  Errc code;
  std::string message;
};

class ScenarioTree;
ScenarioTree build_tree(const TreeSpec& spec);

class ScenarioTree {
 public:
  int horizon() const noexcept { return horizon_; }
  int state_count() const noexcept { return state_count_; }
  std::size_t size() const noexcept { return nodes_.size(); }
  NodeId root() const noexcept { return 0; }

  const Node& node(NodeId n) const { return nodes_.at(n); }
  bool is_terminal(NodeId n) const { return nodes_.at(n).children.empty(); }
  int time(NodeId n) const { return nodes_.at(n).time; }

  /// Nodes at time t, in construction (breadth-first) order.
  std::span<const NodeId> layer(int t) const { return layers_.at(static_cast<std::size_t>(t)); }
  std::span<const NodeId> leaves() const { return layers_.back(); }

  const NodeStats& stats(NodeId n) const {
    if (is_terminal(n)) throw Error(Errc::TerminalNode, "node '" + nodes_[n].id + "' has no successors");
    return stats_[n];
  }

  std::optional<NodeId> find(const std::string& id) const {
    auto it = index_.find(id);
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }

  /// Child of `n` labelled by `state`, or kNoNode.
  NodeId child(NodeId n, int state) const {
    for (const auto& c : nodes_.at(n).children)
      if (c.state == state) return c.node;
    return kNoNode;
  }

  /// Ancestor of `n` living at time `t` (t <= time(n)).
  NodeId ancestor_at(NodeId n, int t) const {
    while (nodes_.at(n).time > t) n = nodes_[n].parent;
    return n;
  }

  /// Nodes from `from` down to `to` inclusive (`from` must be an ancestor).
  std::vector<NodeId> path(NodeId from, NodeId to) const {
    std::vector<NodeId> out;
    for (NodeId n = to;; n = nodes_[n].parent) {
      out.push_back(n);
      if (n == from) break;
      if (nodes_[n].parent == kNoNode) throw Error(Errc::InvalidTree, "path: not an ancestor");
    }
    return {out.rbegin(), out.rend()};
  }

  /// Conditional probability of reaching `to` from its ancestor `from`.
  double path_probability(NodeId from, NodeId to) const {
    double prob = 1.0;
    for (NodeId n = to; n != from; n = nodes_[n].parent) {
      const NodeId parent = nodes_[n].parent;
      for (const auto& c : nodes_[parent].children)
        if (c.node == n) prob *= c.prob;
    }
    return prob;
  }

  /// Leaves in the subtree of `n`, left to right.
  std::vector<NodeId> leaves_below(NodeId n) const {
    std::vector<NodeId> out;
    std::vector<NodeId> stack{n};
    while (!stack.empty()) {
      const NodeId cur = stack.back();
      stack.pop_back();
      const auto& kids = nodes_[cur].children;
      if (kids.empty()) {
        out.push_back(cur);
        continue;
      }
      for (auto it = kids.rbegin(); it != kids.rend(); ++it) stack.push_back(it->node);
    }
    return out;
  }

  bool is_ancestor(NodeId a, NodeId n) const {
    for (; n != kNoNode; n = nodes_[n].parent)
      if (n == a) return true;
    return false;
  }

  /// All nodes of the subtree rooted at `n` (pre-order).
  std::vector<NodeId> subtree(NodeId n) const {
    std::vector<NodeId> out;
    std::vector<NodeId> stack{n};
    while (!stack.empty()) {
      const NodeId cur = stack.back();
      stack.pop_back();
      out.push_back(cur);
      const auto& kids = nodes_[cur].children;
      for (auto it = kids.rbegin(); it != kids.rend(); ++it) stack.push_back(it->node);
    }
    return out;
  }

  /// Process with value fn(node) on every node.
  AdaptedProcess make_process(const std::function<double(NodeId)>& fn) const {
    AdaptedProcess out(size());
    for (NodeId n = 0; n < size(); ++n) out[n] = fn(n);
    return out;
  }

  friend ScenarioTree build_tree(const TreeSpec& spec);

 private:
  void finalize();

  int horizon_ = 0;
  int state_count_ = 0;
  std::vector<Node> nodes_;
  std::vector<std::vector<NodeId>> layers_;
  std::vector<NodeStats> stats_;
  std::unordered_map<std::string, NodeId> index_;
};

inline NodeStats compute_node_stats(const Node& node, int m) {
  NodeStats s;
  s.p = Vec::Zero(m);
  for (const auto& c : node.children) s.p(c.state) = c.prob;
  for (int i = 0; i < m; ++i)
    if (s.p(i) > 0.0) s.support.push_back(i);
  s.psi = Mat(s.p.asDiagonal()) - s.p * s.p.transpose();
  s.psi_pinv = symmetric_pinv(s.psi);
  return s;
}

inline void ScenarioTree::finalize() {
  layers_.assign(static_cast<std::size_t>(horizon_) + 1, {});
  stats_.assign(nodes_.size(), NodeStats{});
  index_.clear();
  for (NodeId n = 0; n < nodes_.size(); ++n) {
    layers_[static_cast<std::size_t>(nodes_[n].time)].push_back(n);
    index_.emplace(nodes_[n].id, n);
    if (!nodes_[n].children.empty()) stats_[n] = compute_node_stats(nodes_[n], state_count_);
  }
}

namespace detail {

inline std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.12g", v);
  return buf;
}

inline void check_law(const std::vector<std::pair<int, double>>& law, int m, const std::string& where,
                      std::vector<TreeIssue>& issues) {
  double sum = 0.0;
  bool positive = false;
  std::vector<int> seen;
  for (const auto& [state, prob] : law) {
    if (state < 0 || state >= m)
      issues.push_back({Errc::InvalidTree, where + ": state label " + std::to_string(state) + " outside 0.." +
                                               std::to_string(m - 1)});
    for (int s : seen)
      if (s == state) issues.push_back({Errc::InvalidTree, where + ": duplicate state label " + std::to_string(state)});
    seen.push_back(state);
    if (!(prob >= 0.0) || !std::isfinite(prob))
      issues.push_back({Errc::NonStochasticLaw, where + ": negative or non-finite probability " + fmt_double(prob)});
    sum += prob;
    positive = positive || prob > 0.0;
  }
  if (std::abs(sum - 1.0) > kLawTolerance)
    issues.push_back({Errc::NonStochasticLaw, where + ": probabilities sum to " + fmt_double(sum)});
  else if (!positive)
    issues.push_back({Errc::EmptySupport, where + ": no positive-probability successor"});
}

}  // namespace detail

/// Collects every problem with a tree description without building it.
inline std::vector<TreeIssue> validate_tree_spec(const TreeSpec& spec) {
  std::vector<TreeIssue> issues;
  if (const auto* k = std::get_if<KernelSpec>(&spec)) {
    if (k->horizon < 1) issues.push_back({Errc::DepthMismatch, "horizon must be >= 1"});
    if (k->state_count < 2) issues.push_back({Errc::InvalidTree, "state_count must be >= 2"});
    const auto m = static_cast<std::size_t>(std::max(k->state_count, 0));
    if (k->rows.size() != 1 && k->rows.size() != m)
      issues.push_back({Errc::InvalidTree, "kernel must have 1 or state_count rows, got " + std::to_string(k->rows.size())});
    if (k->initial_state < 0 || k->initial_state >= k->state_count)
      issues.push_back({Errc::InvalidTree, "initial_state out of range"});
    for (std::size_t r = 0; r < k->rows.size(); ++r) {
      const auto& row = k->rows[r];
      std::string where = "kernel row " + std::to_string(r);
      if (k->rows.size() == 1)
        where += " (node 'r' and every descendant)";
      else
        where += " (nodes in state " + std::to_string(r) + ")";
      if (row.size() != m) {
        issues.push_back({Errc::InvalidTree, where + ": expected " + std::to_string(m) + " entries"});
        continue;
      }
      std::vector<std::pair<int, double>> law;
      for (std::size_t i = 0; i < row.size(); ++i) law.emplace_back(static_cast<int>(i), row[i]);
      detail::check_law(law, k->state_count, where, issues);
    }
    return issues;
  }

  const auto& e = std::get<ExplicitTreeSpec>(spec);
  int m = e.state_count.value_or(0);
  if (!e.state_count) {
    for (const auto& n : e.nodes)
      for (const auto& c : n.children) m = std::max(m, c.state + 1);
    m = std::max(m, 2);
  }
  if (m < 2) issues.push_back({Errc::InvalidTree, "state_count must be >= 2"});
  std::unordered_map<std::string, std::size_t> idx;
  for (std::size_t i = 0; i < e.nodes.size(); ++i) {
    if (!idx.emplace(e.nodes[i].id, i).second)
      issues.push_back({Errc::InvalidTree, "duplicate node id '" + e.nodes[i].id + "'"});
  }
  int roots = 0;
  int depth = 0;
  std::unordered_map<std::string, int> parent_count;
  for (const auto& n : e.nodes) {
    if (n.time == 0) ++roots;
    if (n.time < 0) issues.push_back({Errc::DepthMismatch, "node '" + n.id + "': negative time"});
    depth = std::max(depth, n.time);
    std::vector<std::pair<int, double>> law;
    for (const auto& c : n.children) {
      law.emplace_back(c.state, c.prob);
      ++parent_count[c.id];
      auto it = idx.find(c.id);
      if (it == idx.end()) {
        issues.push_back({Errc::InvalidTree, "node '" + n.id + "': unknown child '" + c.id + "'"});
      } else if (e.nodes[it->second].time != n.time + 1) {
        issues.push_back({Errc::DepthMismatch, "node '" + c.id + "': time must be parent time + 1"});
      }
    }
    if (!n.children.empty()) detail::check_law(law, m, "node '" + n.id + "'", issues);
  }
  if (roots != 1) issues.push_back({Errc::InvalidTree, "expected exactly one node at time 0, got " + std::to_string(roots)});
  const int horizon = e.horizon.value_or(depth);
  if (e.horizon && *e.horizon != depth)
    issues.push_back({Errc::DepthMismatch, "declared horizon " + std::to_string(*e.horizon) +
                                               " but deepest node is at time " + std::to_string(depth)});
  if (horizon < 1) issues.push_back({Errc::DepthMismatch, "horizon must be >= 1"});
  for (const auto& n : e.nodes) {
    if (n.time > 0 && parent_count[n.id] != 1)
      issues.push_back({Errc::InvalidTree, "node '" + n.id + "' must have exactly one parent"});
    if (n.children.empty() && n.time != horizon)
      issues.push_back({Errc::DepthMismatch, "leaf '" + n.id + "' at time " + std::to_string(n.time) +
                                                 " but horizon is " + std::to_string(horizon)});
  }
  return issues;
}

inline ScenarioTree build_tree(const TreeSpec& spec) {
  if (auto issues = validate_tree_spec(spec); !issues.empty()) {
    std::vector<std::string> details;
    for (const auto& i : issues) details.push_back(i.message);
    throw Error(issues.front().code, std::move(details));
  }

  ScenarioTree tree;
  if (const auto* k = std::get_if<KernelSpec>(&spec)) {
    tree.horizon_ = k->horizon;
    tree.state_count_ = k->state_count;
    tree.nodes_.push_back(Node{"r", 0, kNoNode, k->initial_state, {}});
    for (NodeId n = 0; n < tree.nodes_.size(); ++n) {
      if (tree.nodes_[n].time == k->horizon) continue;
      const auto& row = k->rows.size() == 1 ? k->rows[0] : k->rows[static_cast<std::size_t>(tree.nodes_[n].state)];
      double sum = 0.0;
      for (double p : row) sum += p;
      for (int i = 0; i < k->state_count; ++i) {
        const double p = row[static_cast<std::size_t>(i)] / sum;
        if (p <= 0.0) continue;
        const NodeId id = tree.nodes_.size();
        tree.nodes_[n].children.push_back(Child{i, p, id});
        tree.nodes_.push_back(Node{tree.nodes_[n].id + "." + std::to_string(i), tree.nodes_[n].time + 1, n, i, {}});
      }
    }
    tree.finalize();
    return tree;
  }

  const auto& e = std::get<ExplicitTreeSpec>(spec);
  int m = e.state_count.value_or(0);
  int depth = 0;
  std::unordered_map<std::string, std::size_t> idx;
  for (std::size_t i = 0; i < e.nodes.size(); ++i) {
    idx.emplace(e.nodes[i].id, i);
    depth = std::max(depth, e.nodes[i].time);
    if (!e.state_count)
      for (const auto& c : e.nodes[i].children) m = std::max(m, c.state + 1);
  }
  tree.state_count_ = std::max(m, 2);
  tree.horizon_ = e.horizon.value_or(depth);
  std::size_t root_spec = 0;
  for (std::size_t i = 0; i < e.nodes.size(); ++i)
    if (e.nodes[i].time == 0) root_spec = i;

  // Breadth-first re-indexing keeps every time layer contiguous.
  std::vector<std::size_t> spec_of;
  tree.nodes_.push_back(Node{e.nodes[root_spec].id, 0, kNoNode, -1, {}});
  spec_of.push_back(root_spec);
  for (NodeId n = 0; n < tree.nodes_.size(); ++n) {
    const auto& ns = e.nodes[spec_of[n]];
    double sum = 0.0;
    for (const auto& c : ns.children) sum += c.prob;
    for (const auto& c : ns.children) {
      const NodeId id = tree.nodes_.size();
      tree.nodes_[n].children.push_back(Child{c.state, c.prob / sum, id});
      tree.nodes_.push_back(Node{c.id, tree.nodes_[n].time + 1, n, c.state, {}});
      spec_of.push_back(idx.at(c.id));
    }
  }
  if (tree.nodes_.size() != e.nodes.size())
    throw Error(Errc::InvalidTree, "nodes unreachable from the root: " +
                                       std::to_string(e.nodes.size() - tree.nodes_.size()));
  tree.finalize();
  return tree;
}

/// Homogeneous kernel shortcut.
inline ScenarioTree build_kernel_tree(int horizon, std::vector<double> probs) {
  const int m = static_cast<int>(probs.size());
  return build_tree(KernelSpec{horizon, m, {std::move(probs)}, 0});
}

// ---------------------------------------------------------------------------
// One-step primitives

inline const NodeStats& node_stats(const ScenarioTree& tree, NodeId node) { return tree.stats(node); }

/// Child values of `process` at `node` as an m-vector (zero for absent states).
inline Vec child_values(const ScenarioTree& tree, const AdaptedProcess& process, NodeId node) {
  Vec out = Vec::Zero(tree.state_count());
  for (const auto& c : tree.node(node).children) out(c.state) = process[c.node];
  return out;
}

inline double conditional_expectation(const ScenarioTree& tree, const AdaptedProcess& process, NodeId node) {
  if (tree.is_terminal(node)) throw Error(Errc::TerminalNode, "conditional expectation at a leaf");
  double e = 0.0;
  for (const auto& c : tree.node(node).children) e += c.prob * process[c.node];
  return e;
}

inline Vec conditional_expectation(const ScenarioTree& tree, const VectorProcess& process, NodeId node) {
  if (tree.is_terminal(node)) throw Error(Errc::TerminalNode, "conditional expectation at a leaf");
  const auto& kids = tree.node(node).children;
  Vec e = Vec::Zero(process[kids.front().node].size());
  for (const auto& c : kids) e += c.prob * process[c.node];
  return e;
}

/// Canonical Q-vector Z with Z^T (e_i - p) = h_i on the support. `h` is indexed
/// by state; entries off the support are ignored.
inline Vec represent_martingale(const NodeStats& stats, const Vec& h, double tol = 1e-10) {
  double mean = 0.0;
  double scale = 1.0;
  for (int i : stats.support) {
    mean += stats.p(i) * h(i);
    scale = std::max(scale, std::abs(h(i)));
  }
  if (std::abs(mean) > tol * scale)
    throw Error(Errc::NotCentered, "martingale increment has conditional mean " + detail::fmt_double(mean));
  Vec weighted = Vec::Zero(stats.p.size());
  for (int i : stats.support) weighted(i) = stats.p(i) * h(i);
  return project_q(stats.psi_pinv * weighted, stats.support);
}

inline Vec represent_martingale(const ScenarioTree& tree, NodeId node, const Vec& h, double tol = 1e-10) {
  return represent_martingale(tree.stats(node), h, tol);
}

struct MNorms {
  double norm_m = 0.0;
  double norm_mplus = 0.0;
};

/// sqrt(z^T psi z) and sqrt(z^T psi^+ z).
inline MNorms m_norms(const NodeStats& stats, const Vec& z) {
  const double a = z.dot(stats.psi * z);
  const double b = z.dot(stats.psi_pinv * z);
  return {std::sqrt(std::max(a, 0.0)), std::sqrt(std::max(b, 0.0))};
}

// ---------------------------------------------------------------------------
// Stopping times

/// Stop/continue flag per node; the stopping node of a path is its first
/// flagged node. Leaves must be flagged.
class StoppingTime {
 public:
  StoppingTime() = default;
  explicit StoppingTime(std::vector<char> flags) : flags_(std::move(flags)) {}

  static StoppingTime at_time(const ScenarioTree& tree, int t) {
    std::vector<char> f(tree.size(), 0);
    for (NodeId n = 0; n < tree.size(); ++n) f[n] = (tree.time(n) >= t || tree.is_terminal(n)) ? 1 : 0;
    return StoppingTime(std::move(f));
  }

  bool stops_at(NodeId n) const { return flags_.at(n) != 0; }
  void set(NodeId n, bool stop) { flags_.at(n) = stop ? 1 : 0; }
  std::span<const char> flags() const { return flags_; }

  void validate(const ScenarioTree& tree) const {
    if (flags_.size() != tree.size())
      throw Error(Errc::InvalidStoppingTime, "flag count " + std::to_string(flags_.size()) + " != node count " +
                                                 std::to_string(tree.size()));
    for (NodeId leaf : tree.leaves())
      if (!flags_[leaf]) throw Error(Errc::InvalidStoppingTime, "leaf '" + tree.node(leaf).id + "' not flagged");
  }

  /// First flagged node on the path from `from` to `leaf`.
  NodeId stop_node(const ScenarioTree& tree, NodeId from, NodeId leaf) const {
    for (NodeId n : tree.path(from, leaf))
      if (flags_[n]) return n;
    return leaf;
  }

 private:
  std::vector<char> flags_;
};

struct PathStop {
  NodeId leaf = kNoNode;
  NodeId stop = kNoNode;
  double probability = 0.0;  // conditional on the start node
  double value = 0.0;
};

struct StopEvaluation {
  std::vector<PathStop> paths;
  double expectation = 0.0;
};

/// Value of `process` at the stopping node of every path below `from`, and
/// its conditional expectation given `from`.
inline StopEvaluation stop_time_eval(const ScenarioTree& tree, const AdaptedProcess& process, const StoppingTime& tau,
                                     NodeId from = 0) {
  tau.validate(tree);
  StopEvaluation out;
  for (NodeId leaf : tree.leaves_below(from)) {
    PathStop ps;
    ps.leaf = leaf;
    ps.stop = tau.stop_node(tree, from, leaf);
    ps.probability = tree.path_probability(from, leaf);
    ps.value = process[ps.stop];
    out.expectation += ps.probability * ps.value;
    out.paths.push_back(ps);
  }
  return out;
}

/// Number of non-terminal nodes in the subtree of `n`.
inline std::size_t decision_node_count(const ScenarioTree& tree, NodeId n) {
  std::size_t count = 0;
  for (NodeId k : tree.subtree(n))
    if (!tree.is_terminal(k)) ++count;
  return count;
}

/// Calls `visit` with every distinct stopping time of the subtree rooted at
/// `from` (flags outside the subtree are left set). Returns the number visited.
inline std::size_t for_each_stopping_time(const ScenarioTree& tree, NodeId from,
                                          const std::function<void(const StoppingTime&)>& visit) {
  std::vector<char> flags(tree.size(), 1);
  std::size_t count = 0;
  // Frontier of reached-but-undecided nodes; each is either stopped or expanded.
  std::function<void(std::vector<NodeId>)> rec = [&](std::vector<NodeId> frontier) {
    if (frontier.empty()) {
      ++count;
      visit(StoppingTime(flags));
      return;
    }
    const NodeId n = frontier.back();
    frontier.pop_back();
    flags[n] = 1;
    rec(frontier);
    if (!tree.is_terminal(n)) {
      flags[n] = 0;
      auto next = frontier;
      for (const auto& c : tree.node(n).children) next.push_back(c.node);
      rec(std::move(next));
      flags[n] = 1;
    }
  };
  rec({from});
  return count;
}

}  // namespace rbsde
