#include "mvflow/transport.hpp"

#include <cmath>
#include <limits>
#include <numeric>

#include "mvflow/error.hpp"

namespace mvflow {

double solve_assignment(const Eigen::MatrixXd& cost, std::vector<int>* assignment) {
  // Jonker-Volgenant: column reduction, augmenting row reduction, then
  // shortest augmenting paths for the rows still free.
  const int n = static_cast<int>(cost.rows());
  if (cost.cols() != n) throw Error(ErrorKind::InvalidArgument, "assignment needs a square cost");
  if (n == 0) {
    if (assignment) assignment->clear();
    return 0.0;
  }
  constexpr double inf = std::numeric_limits<double>::infinity();
  std::vector<double> c(static_cast<std::size_t>(n) * n);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) c[static_cast<std::size_t>(i) * n + j] = cost(i, j);
  }
  auto C = [&](int i, int j) { return c[static_cast<std::size_t>(i) * n + j]; };
  std::vector<int> x(n, -1), y(n, -1), matches(n, 0), free_rows(n), collist(n), pred(n);
  std::vector<double> v(n), d(n);

  for (int j = n - 1; j >= 0; --j) {
    double best = C(0, j);
    int imin = 0;
    for (int i = 1; i < n; ++i) {
      if (C(i, j) < best) {
        best = C(i, j);
        imin = i;
      }
    }
    v[j] = best;
    if (++matches[imin] == 1) {
      x[imin] = j;
      y[j] = imin;
    } else if (x[imin] >= 0 && v[j] < v[x[imin]]) {
      // Keep the assignment deterministic: the row holds its cheapest column.
      const int j1 = x[imin];
      y[j1] = -1;
      x[imin] = j;
      y[j] = imin;
    }
  }
  int numfree = 0;
  for (int i = 0; i < n; ++i) {
    if (matches[i] == 0) {
      free_rows[numfree++] = i;
    } else if (matches[i] == 1) {
      const int j1 = x[i];
      double best = inf;
      for (int j = 0; j < n; ++j) {
        if (j != j1) best = std::min(best, C(i, j) - v[j]);
      }
      if (best < inf) v[j1] -= best;
    }
  }
  long long budget = 16LL * n * n + 1024;
  for (int pass = 0; pass < 2 && numfree > 0; ++pass) {
    int k = 0;
    const int previous = numfree;
    numfree = 0;
    bool aborted = false;
    while (k < previous) {
      if (--budget < 0) {
        aborted = true;
        break;
      }
      const int i = free_rows[k++];
      double umin = C(i, 0) - v[0], usubmin = inf;
      int j1 = 0, j2 = -1;
      for (int j = 1; j < n; ++j) {
        const double h = C(i, j) - v[j];
        if (h < usubmin) {
          if (h >= umin) {
            usubmin = h;
            j2 = j;
          } else {
            usubmin = umin;
            umin = h;
            j2 = j1;
            j1 = j;
          }
        }
      }
      int i0 = y[j1];
      if (umin < usubmin) {
        v[j1] -= usubmin - umin;
      } else if (i0 >= 0 && j2 >= 0) {
        j1 = j2;
        i0 = y[j2];
      }
      x[i] = j1;
      y[j1] = i;
      if (i0 >= 0) {
        x[i0] = -1;
        if (umin < usubmin) {
          free_rows[--k] = i0;
        } else {
          free_rows[numfree++] = i0;
        }
      }
    }
    if (aborted) {
      numfree = 0;
      for (int i = 0; i < n; ++i) {
        if (x[i] < 0) free_rows[numfree++] = i;
      }
      break;
    }
  }

  for (int f = 0; f < numfree; ++f) {
    const int freerow = free_rows[f];
    for (int j = 0; j < n; ++j) {
      d[j] = C(freerow, j) - v[j];
      pred[j] = freerow;
      collist[j] = j;
    }
    int low = 0, up = 0, last = 0, endofpath = -1;
    double min = 0.0;
    bool found = false;
    do {
      if (up == low) {
        last = low - 1;
        min = d[collist[up++]];
        for (int k = up; k < n; ++k) {
          const int j = collist[k];
          const double h = d[j];
          if (h <= min) {
            if (h < min) {
              up = low;
              min = h;
            }
            collist[k] = collist[up];
            collist[up++] = j;
          }
        }
        for (int k = low; k < up; ++k) {
          if (y[collist[k]] < 0) {
            endofpath = collist[k];
            found = true;
            break;
          }
        }
      }
      if (!found) {
        const int j1 = collist[low++];
        const int i = y[j1];
        const double h = C(i, j1) - v[j1] - min;
        for (int k = up; k < n; ++k) {
          const int j = collist[k];
          const double v2 = C(i, j) - v[j] - h;
          if (v2 < d[j]) {
            pred[j] = i;
            if (v2 == min) {
              if (y[j] < 0) {
                endofpath = j;
                found = true;
                break;
              }
              collist[k] = collist[up];
              collist[up++] = j;
            }
            d[j] = v2;
          }
        }
      }
    } while (!found);
    for (int k = 0; k <= last; ++k) {
      const int j1 = collist[k];
      v[j1] += d[j1] - min;
    }
    int i = -1;
    do {
      i = pred[endofpath];
      y[endofpath] = i;
      const int j1 = endofpath;
      endofpath = x[i];
      x[i] = j1;
    } while (i != freerow);
  }

  double total = 0.0;
  for (int i = 0; i < n; ++i) total += C(i, x[i]);
  if (assignment) *assignment = std::move(x);
  return total;
}

double solve_transport(const Eigen::MatrixXd& cost, std::span<const double> supply,
                       std::span<const double> demand, Eigen::MatrixXd* plan) {
  const int n = static_cast<int>(cost.rows());
  const int m = static_cast<int>(cost.cols());
  if (static_cast<int>(supply.size()) != n || static_cast<int>(demand.size()) != m) {
    throw Error(ErrorKind::InvalidArgument, "marginal sizes do not match the cost matrix");
  }
  const double total_a = std::accumulate(supply.begin(), supply.end(), 0.0);
  const double total_b = std::accumulate(demand.begin(), demand.end(), 0.0);
  if (std::abs(total_a - total_b) > 1e-12 * std::max(1.0, total_a)) {
    throw Error(ErrorKind::InvalidArgument, "marginals carry different mass");
  }
  constexpr double inf = std::numeric_limits<double>::infinity();
  const double eps = 1e-15 * std::max(1.0, total_a);

  std::vector<double> a(supply.begin(), supply.end()), b(demand.begin(), demand.end());
  Eigen::MatrixXd flow = Eigen::MatrixXd::Zero(n, m);
  // Node ids: sources 0..n-1, sinks n..n+m-1. Reduced costs stay nonnegative.
  std::vector<double> pot(n + m, 0.0), dist(n + m);
  std::vector<int> prev(n + m);
  std::vector<char> done(n + m);
  {
    // Sinks start at their cheapest incoming edge so that reduced costs of
    // forward edges are nonnegative.
    for (int j = 0; j < m; ++j) pot[n + j] = n > 0 ? cost.col(j).minCoeff() : 0.0;
  }
  const int max_rounds = 16 * (n + m) * (n + m) + 64;
  for (int round = 0;; ++round) {
    double remaining = 0.0;
    for (double x : a) remaining += x;
    if (remaining <= eps * (n + m)) break;
    if (round > max_rounds) throw Error(ErrorKind::InvalidArgument, "transport did not converge");

    std::fill(dist.begin(), dist.end(), inf);
    std::fill(prev.begin(), prev.end(), -1);
    std::fill(done.begin(), done.end(), 0);
    for (int i = 0; i < n; ++i) {
      if (a[i] > eps) dist[i] = 0.0;
    }
    int target = -1;
    for (;;) {
      int best = -1;
      for (int v = 0; v < n + m; ++v) {
        if (!done[v] && dist[v] < inf && (best < 0 || dist[v] < dist[best])) best = v;
      }
      if (best < 0) break;
      done[best] = 1;
      if (best >= n && b[best - n] > eps) {
        target = best;
        break;
      }
      if (best < n) {
        const int i = best;
        for (int j = 0; j < m; ++j) {
          const int v = n + j;
          if (done[v]) continue;
          const double nd = dist[i] + cost(i, j) + pot[i] - pot[v];
          if (nd < dist[v]) {
            dist[v] = nd;
            prev[v] = i;
          }
        }
      } else {
        const int j = best - n;
        for (int i = 0; i < n; ++i) {
          if (done[i] || flow(i, j) <= eps) continue;
          const double nd = dist[best] - cost(i, j) + pot[best] - pot[i];
          if (nd < dist[i]) {
            dist[i] = nd;
            prev[i] = best;
          }
        }
      }
    }
    if (target < 0) break;
    const double dt = dist[target];
    for (int v = 0; v < n + m; ++v) {
      pot[v] += std::min(dist[v], dt);
    }
    // Bottleneck along the path.
    double delta = b[target - n];
    int v = target;
    while (prev[v] >= 0) {
      const int p = prev[v];
      if (p >= n) delta = std::min(delta, flow(v, p - n));  // reverse edge sink p -> source v
      v = p;
    }
    delta = std::min(delta, a[v]);
    a[v] -= delta;
    b[target - n] -= delta;
    v = target;
    while (prev[v] >= 0) {
      const int p = prev[v];
      if (p < n) {
        flow(p, v - n) += delta;
      } else {
        flow(v, p - n) -= delta;
      }
      v = p;
    }
  }
  const double total = (flow.array() * cost.array()).sum();
  if (plan) *plan = std::move(flow);
  return total;
}

}  // namespace mvflow
