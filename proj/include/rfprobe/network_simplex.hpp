#ifndef RFPROBE_NETWORK_SIMPLEX_HPP
#define RFPROBE_NETWORK_SIMPLEX_HPP

// Primal network simplex for the dense transportation problem
//   min sum C_ij x_ij  s.t.  sum_j x_ij = a_i,  sum_i x_ij = b_j,  x >= 0.
// The basis is a spanning tree on sources [0, n1) and sinks [n1, n1 + n2), rooted at node 0.
// Duals satisfy u_i + v_j = C_ij on tree arcs and u_i + v_j <= C_ij + tol at optimality.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <tuple>
#include <vector>

#include "rfprobe/error.hpp"

namespace rfprobe::detail {

struct SimplexResult {
  std::vector<std::tuple<int, int, double>> flows;  // (source, sink, amount), amount > 0
  Eigen::VectorXd u;
  Eigen::VectorXd v;
  double cost = 0.0;
  std::size_t pivots = 0;
};

class TransportSimplex {
 public:
  TransportSimplex(const Eigen::VectorXd& a, const Eigen::VectorXd& b, const Eigen::MatrixXd& C)
      : a_(a), b_(b), C_(C), n1_(static_cast<int>(a.size())), n2_(static_cast<int>(b.size())) {
    if (C.rows() != a.size() || C.cols() != b.size())
      throw Error(ErrorKind::invalid_input, "cost matrix does not match marginals");
    if (n1_ == 0 || n2_ == 0) throw Error(ErrorKind::invalid_input, "empty marginal");
    const double scale = std::max(1.0, C.cwiseAbs().maxCoeff());
    tol_ = 1e-13 * scale;
  }

  SimplexResult solve(std::size_t max_pivots = 50'000'000) {
    init_northwest();
    const std::size_t arcs = static_cast<std::size_t>(n1_) * static_cast<std::size_t>(n2_);
    const std::size_t block = std::max<std::size_t>(
        std::min<std::size_t>(arcs, 16), static_cast<std::size_t>(std::sqrt(double(arcs))));
    std::size_t next = 0, pivots = 0;
    for (;;) {
      // block search pricing
      int in_i = -1, in_j = -1;
      double best = -tol_;
      std::size_t scanned = 0, in_block = 0;
      std::size_t e = next;
      while (scanned < arcs) {
        const int i = static_cast<int>(e / n2_), j = static_cast<int>(e % n2_);
        const double r = C_(i, j) - pot_[i] - pot_[n1_ + j];
        if (r < best) {
          best = r;
          in_i = i;
          in_j = j;
        }
        ++scanned;
        ++in_block;
        if (++e == arcs) e = 0;
        if (in_block == block) {
          if (in_i >= 0) break;
          in_block = 0;
        }
      }
      next = e;
      if (in_i < 0) break;
      if (++pivots > max_pivots)
        throw Error(ErrorKind::convergence_failure, "network simplex pivot cap reached");
      pivot(in_i, n1_ + in_j);
    }

    SimplexResult res;
    res.pivots = pivots;
    res.u = Eigen::Map<const Eigen::VectorXd>(pot_.data(), n1_);
    res.v = Eigen::Map<const Eigen::VectorXd>(pot_.data() + n1_, n2_);
    for (int k = 1; k < n1_ + n2_; ++k) {
      const double x = flow_[k];
      if (x <= 0.0) continue;
      const int p = parent_[k];
      const int i = k < n1_ ? k : p, j = (k < n1_ ? p : k) - n1_;
      res.flows.emplace_back(i, j, x);
      res.cost += x * C_(i, j);
    }
    std::sort(res.flows.begin(), res.flows.end());
    return res;
  }

 private:
  double cost(int p, int q) const {
    return p < n1_ ? C_(p, q - n1_) : C_(q, p - n1_);
  }

  void init_northwest() {
    const int n = n1_ + n2_;
    parent_.assign(n, -1);
    flow_.assign(n, 0.0);
    depth_.assign(n, 0);
    pot_.assign(n, 0.0);
    kids_.assign(n, {});
    std::vector<std::vector<std::pair<int, double>>> adj(n);
    int i = 0, j = 0;
    double ra = a_(0), rb = b_(0);
    for (;;) {
      const double x = std::max(0.0, std::min(ra, rb));
      adj[i].push_back({n1_ + j, x});
      adj[n1_ + j].push_back({i, x});
      ra -= x;
      rb -= x;
      if (i == n1_ - 1 && j == n2_ - 1) break;
      if (j == n2_ - 1 || (ra <= rb && i < n1_ - 1)) {
        ++i;
        ra = a_(i);
      } else {
        ++j;
        rb = b_(j);
      }
    }
    // orient the staircase tree from the root
    std::vector<int> stack{0};
    std::vector<char> seen(n, 0);
    seen[0] = 1;
    while (!stack.empty()) {
      const int p = stack.back();
      stack.pop_back();
      for (auto [q, x] : adj[p]) {
        if (seen[q]) continue;
        seen[q] = 1;
        parent_[q] = p;
        flow_[q] = x;
        depth_[q] = depth_[p] + 1;
        pot_[q] = cost(p, q) - pot_[p];
        kids_[p].push_back(q);
        stack.push_back(q);
      }
    }
  }

  static void erase_kid(std::vector<int>& v, int k) {
    auto it = std::find(v.begin(), v.end(), k);
    *it = v.back();
    v.pop_back();
  }

  void pivot(int src, int snk) {
    // collect cycle edges (identified by their child node) with signs
    path_s_.clear();
    path_t_.clear();
    int p = src, q = snk;
    while (depth_[p] > depth_[q]) { path_s_.push_back(p); p = parent_[p]; }
    while (depth_[q] > depth_[p]) { path_t_.push_back(q); q = parent_[q]; }
    while (p != q) {
      path_s_.push_back(p);
      p = parent_[p];
      path_t_.push_back(q);
      q = parent_[q];
    }
    // sink side: edge of child k loses flow iff k is a sink; source side iff k is a source
    double theta = std::numeric_limits<double>::infinity();
    int leave = -1;
    bool leave_on_sink_side = false;
    for (int k : path_t_)
      if (k >= n1_ && flow_[k] < theta) {
        theta = flow_[k];
        leave = k;
        leave_on_sink_side = true;
      }
    for (int k : path_s_)
      if (k < n1_ && flow_[k] < theta) {
        theta = flow_[k];
        leave = k;
        leave_on_sink_side = false;
      }
    theta = std::max(0.0, theta);
    for (int k : path_t_) flow_[k] += (k >= n1_) ? -theta : theta;
    for (int k : path_s_) flow_[k] += (k < n1_) ? -theta : theta;
    flow_[leave] = 0.0;

    // detach the subtree under `leave` and re-hang it from the entering arc
    const int inside = leave_on_sink_side ? snk : src;
    const int outside = leave_on_sink_side ? src : snk;
    erase_kid(kids_[parent_[leave]], leave);
    int prev = outside, cur = inside;
    double carried = theta;
    while (true) {
      const int up = parent_[cur];
      const double up_flow = flow_[cur];
      if (cur != inside) erase_kid(kids_[cur], prev);
      parent_[cur] = prev;
      flow_[cur] = carried;
      kids_[prev].push_back(cur);
      if (cur == leave) break;
      carried = up_flow;
      prev = cur;
      cur = up;
    }
    // refresh depth and potentials on the moved subtree
    stack_.clear();
    stack_.push_back(inside);
    while (!stack_.empty()) {
      const int k = stack_.back();
      stack_.pop_back();
      const int par = parent_[k];
      depth_[k] = depth_[par] + 1;
      pot_[k] = cost(par, k) - pot_[par];
      for (int c : kids_[k]) stack_.push_back(c);
    }
  }

  Eigen::VectorXd a_, b_;
  const Eigen::MatrixXd& C_;
  int n1_, n2_;
  double tol_ = 0.0;
  std::vector<int> parent_, depth_;
  std::vector<double> flow_, pot_;
  std::vector<std::vector<int>> kids_;
  std::vector<int> path_s_, path_t_, stack_;
};

}  // namespace rfprobe::detail

#endif  // RFPROBE_NETWORK_SIMPLEX_HPP
