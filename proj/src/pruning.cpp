#include "cemb/pruning.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <exception>
#include <limits>
#include <numeric>
#include <random>

#include "cemb/error.hpp"

namespace cemb {

const char* to_string(PruneMethod m) {
  switch (m) {
    case PruneMethod::random: return "random";
    case PruneMethod::kmeans: return "kmeans";
    case PruneMethod::hierarchical: return "hierarchical";
    case PruneMethod::pool1d: return "pool1d";
  }
  return "?";
}

PruneMethod parse_prune_method(const std::string& s) {
  if (s == "random") return PruneMethod::random;
  if (s == "kmeans") return PruneMethod::kmeans;
  if (s == "hierarchical") return PruneMethod::hierarchical;
  if (s == "pool1d") return PruneMethod::pool1d;
  throw SpecError("unknown pruning method '" + s + "'");
}

std::uint64_t derive_seed(std::uint64_t global_seed, std::uint64_t id) {
  std::uint64_t z = global_seed + 0x9e3779b97f4a7c15ULL * (id + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

namespace {

double sqdist(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return s;
}

// Unit-normalized mean of the listed rows; a (near) zero mean falls back to
// the first member.
void write_representative(const Tensor& pts, std::span<const std::size_t> members, std::span<double> out) {
  std::fill(out.begin(), out.end(), 0.0);
  for (std::size_t m : members) {
    const auto r = pts.row(m);
    for (std::size_t c = 0; c < out.size(); ++c) out[c] += r[c];
  }
  double norm = 0.0;
  for (double v : out) norm += v * v;
  norm = std::sqrt(norm);
  if (norm <= 1e-12) {
    const auto r = pts.row(members.front());
    std::copy(r.begin(), r.end(), out.begin());
    return;
  }
  for (double& v : out) v /= norm;
}

MultiVec from_groups(const Tensor& pts, const std::vector<std::vector<std::size_t>>& groups) {
  Tensor out = Tensor::matrix(groups.size(), pts.cols());
  for (std::size_t g = 0; g < groups.size(); ++g) write_representative(pts, groups[g], out.row(g));
  return MultiVec(std::move(out), 1e-9);
}

std::vector<std::vector<std::size_t>> groups_from_labels(std::span<const std::size_t> labels, std::size_t k) {
  std::vector<std::vector<std::size_t>> groups(k);
  for (std::size_t i = 0; i < labels.size(); ++i) groups[labels[i]].push_back(i);
  return groups;
}

MultiVec prune_random(const MultiVec& mv, std::size_t budget, std::uint64_t seed) {
  std::vector<std::size_t> idx(mv.length());
  std::iota(idx.begin(), idx.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(idx.begin(), idx.end(), rng);
  idx.resize(budget);
  std::sort(idx.begin(), idx.end());
  Tensor out = Tensor::matrix(budget, mv.dim());
  for (std::size_t i = 0; i < budget; ++i) {
    const auto r = mv.row(idx[i]);
    std::copy(r.begin(), r.end(), out.row(i).begin());
  }
  return MultiVec(std::move(out), 1e-9);
}

MultiVec prune_pool1d(const MultiVec& mv, std::size_t budget) {
  const std::size_t L = mv.length();
  const std::size_t base = L / budget, extra = L % budget;
  std::vector<std::vector<std::size_t>> groups(budget);
  std::size_t pos = 0;
  for (std::size_t w = 0; w < budget; ++w) {
    const std::size_t len = base + (w < extra ? 1 : 0);
    for (std::size_t i = 0; i < len; ++i) groups[w].push_back(pos++);
  }
  return from_groups(mv.tensor(), groups);
}

MultiVec prune_kmeans(const MultiVec& mv, const PruneSpec& spec) {
  const auto km = kmeans(mv.tensor(), spec.budget, spec.seed, spec.kmeans_max_iter, spec.kmeans_tol);
  Tensor out = Tensor::matrix(spec.budget, mv.dim());
  for (std::size_t c = 0; c < spec.budget; ++c) {
    std::vector<std::size_t> members;
    for (std::size_t i = 0; i < km.assignment.size(); ++i)
      if (km.assignment[i] == c) members.push_back(i);
    if (!members.empty()) {
      write_representative(mv.tensor(), members, out.row(c));
      continue;
    }
    // Empty cluster: its centroid is still a seeded data point.
    const auto r = km.centroids.row(c);
    double norm = 0.0;
    for (double v : r) norm += v * v;
    norm = std::sqrt(norm);
    for (std::size_t j = 0; j < mv.dim(); ++j) out(c, j) = r[j] / norm;
  }
  return MultiVec(std::move(out), 1e-9);
}

struct UnionFind {
  std::vector<std::size_t> parent;
  explicit UnionFind(std::size_t n) : parent(n) { std::iota(parent.begin(), parent.end(), 0); }
  std::size_t find(std::size_t x) {
    while (parent[x] != x) x = parent[x] = parent[parent[x]];
    return x;
  }
  void unite(std::size_t a, std::size_t b) {
    a = find(a);
    b = find(b);
    if (a != b) parent[std::max(a, b)] = std::min(a, b);
  }
};

// Dense labels numbered by smallest member.
std::vector<std::size_t> canonical_labels(std::span<const std::size_t> raw) {
  std::vector<std::size_t> map(raw.size(), std::numeric_limits<std::size_t>::max());
  std::vector<std::size_t> out(raw.size());
  std::size_t next = 0;
  for (std::size_t i = 0; i < raw.size(); ++i) {
    if (map[raw[i]] == std::numeric_limits<std::size_t>::max()) map[raw[i]] = next++;
    out[i] = map[raw[i]];
  }
  return out;
}

}  // namespace

KMeansResult kmeans(const Tensor& pts, std::size_t k, std::uint64_t seed, std::size_t max_iter, double tol) {
  const std::size_t n = pts.rows(), d = pts.cols();
  if (k == 0 || k > n) throw SpecError("kmeans needs 1 <= k <= n points, got k=" + std::to_string(k));
  std::mt19937_64 rng(seed);
  KMeansResult res;
  res.centroids = Tensor::matrix(k, d);

  // k-means++ seeding.
  std::vector<double> d2(n, std::numeric_limits<double>::infinity());
  std::size_t pick = std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
  for (std::size_t c = 0; c < k; ++c) {
    if (c > 0) {
      const double total = std::accumulate(d2.begin(), d2.end(), 0.0);
      if (total <= 0.0) {
        pick = c % n;
      } else {
        const double u = std::uniform_real_distribution<double>(0.0, total)(rng);
        double acc = 0.0;
        pick = n - 1;
        for (std::size_t i = 0; i < n; ++i) {
          acc += d2[i];
          if (u < acc && d2[i] > 0.0) {
            pick = i;
            break;
          }
        }
      }
    }
    const auto r = pts.row(pick);
    std::copy(r.begin(), r.end(), res.centroids.row(c).begin());
    for (std::size_t i = 0; i < n; ++i) d2[i] = std::min(d2[i], sqdist(pts.row(i), r));
  }

  res.assignment.assign(n, 0);
  Tensor next = Tensor::matrix(k, d);
  std::vector<std::size_t> counts(k);
  for (std::size_t it = 0; it < max_iter; ++it) {
    double sse = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      double best = std::numeric_limits<double>::infinity();
      for (std::size_t c = 0; c < k; ++c) {
        const double dist = sqdist(pts.row(i), res.centroids.row(c));
        if (dist < best) {
          best = dist;
          res.assignment[i] = c;
        }
      }
      sse += best;
    }
    res.objective.push_back(sse);

    std::fill(next.values().begin(), next.values().end(), 0.0);
    std::fill(counts.begin(), counts.end(), 0);
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t c = res.assignment[i];
      ++counts[c];
      const auto r = pts.row(i);
      for (std::size_t j = 0; j < d; ++j) next(c, j) += r[j];
    }
    double shift = 0.0;
    for (std::size_t c = 0; c < k; ++c) {
      if (counts[c] == 0) {
        const auto old = res.centroids.row(c);
        std::copy(old.begin(), old.end(), next.row(c).begin());
        continue;
      }
      for (std::size_t j = 0; j < d; ++j) next(c, j) /= static_cast<double>(counts[c]);
      shift = std::max(shift, std::sqrt(sqdist(next.row(c), res.centroids.row(c))));
    }
    std::swap(res.centroids, next);
    res.iterations = it + 1;
    if (shift < tol) break;
  }
  return res;
}

std::vector<std::size_t> ward_labels(const Tensor& pts, std::size_t k) {
  const std::size_t n = pts.rows();
  if (k == 0 || k > n) throw SpecError("ward clustering needs 1 <= k <= n points");
  // Lance-Williams on squared Euclidean distances; merge heights are twice
  // the Ward increase in within-cluster sum of squares.
  std::vector<double> dist(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) dist[i * n + j] = dist[j * n + i] = sqdist(pts.row(i), pts.row(j));
  std::vector<double> size(n, 1.0);
  std::vector<char> active(n, 1);

  struct Merge {
    std::size_t a, b;
    double height;
  };
  std::vector<Merge> merges;
  merges.reserve(n);
  std::vector<std::size_t> chain;
  std::size_t remaining = n;
  while (remaining > 1) {
    if (chain.empty()) {
      for (std::size_t i = 0; i < n; ++i)
        if (active[i]) {
          chain.push_back(i);
          break;
        }
    }
    const std::size_t a = chain.back();
    const std::size_t prev = chain.size() >= 2 ? chain[chain.size() - 2] : n;
    std::size_t b = n;
    double best = std::numeric_limits<double>::infinity();
    if (prev != n) {
      b = prev;
      best = dist[a * n + prev];
    }
    for (std::size_t j = 0; j < n; ++j) {
      if (!active[j] || j == a) continue;
      if (dist[a * n + j] < best) {
        best = dist[a * n + j];
        b = j;
      }
    }
    if (b != prev) {
      chain.push_back(b);
      continue;
    }
    chain.pop_back();
    chain.pop_back();
    const std::size_t keep = std::min(a, b), drop = std::max(a, b);
    merges.push_back({a, b, best});
    const double ni = size[keep], nj = size[drop];
    for (std::size_t m = 0; m < n; ++m) {
      if (!active[m] || m == keep || m == drop) continue;
      const double nm = size[m];
      const double v = ((ni + nm) * dist[keep * n + m] + (nj + nm) * dist[drop * n + m] - nm * best) / (ni + nj + nm);
      dist[keep * n + m] = dist[m * n + keep] = v;
    }
    size[keep] = ni + nj;
    active[drop] = 0;
    --remaining;
  }

  std::stable_sort(merges.begin(), merges.end(), [](const Merge& x, const Merge& y) { return x.height < y.height; });
  UnionFind uf(n);
  for (std::size_t m = 0; m < n - k; ++m) uf.unite(merges[m].a, merges[m].b);
  std::vector<std::size_t> roots(n);
  for (std::size_t i = 0; i < n; ++i) roots[i] = uf.find(i);
  return canonical_labels(roots);
}

namespace reference {

std::vector<std::size_t> ward_labels_naive(const Tensor& pts, std::size_t k) {
  const std::size_t n = pts.rows(), d = pts.cols();
  if (k == 0 || k > n) throw SpecError("ward clustering needs 1 <= k <= n points");
  std::vector<std::vector<std::size_t>> clusters(n);
  for (std::size_t i = 0; i < n; ++i) clusters[i] = {i};
  auto centroid = [&](const std::vector<std::size_t>& c) {
    std::vector<double> m(d, 0.0);
    for (std::size_t i : c)
      for (std::size_t j = 0; j < d; ++j) m[j] += pts(i, j);
    for (double& v : m) v /= static_cast<double>(c.size());
    return m;
  };
  while (clusters.size() > k) {
    double best = std::numeric_limits<double>::infinity();
    std::size_t bi = 0, bj = 1;
    for (std::size_t i = 0; i < clusters.size(); ++i) {
      const auto ci = centroid(clusters[i]);
      for (std::size_t j = i + 1; j < clusters.size(); ++j) {
        const auto cj = centroid(clusters[j]);
        const double ni = static_cast<double>(clusters[i].size()), nj = static_cast<double>(clusters[j].size());
        const double cost = ni * nj / (ni + nj) * sqdist(ci, cj);
        if (cost < best) {
          best = cost;
          bi = i;
          bj = j;
        }
      }
    }
    clusters[bi].insert(clusters[bi].end(), clusters[bj].begin(), clusters[bj].end());
    clusters.erase(clusters.begin() + static_cast<std::ptrdiff_t>(bj));
  }
  std::vector<std::size_t> raw(n);
  for (std::size_t c = 0; c < clusters.size(); ++c)
    for (std::size_t i : clusters[c]) raw[i] = *std::min_element(clusters[c].begin(), clusters[c].end());
  return canonical_labels(raw);
}

}  // namespace reference

bool is_identity_prune(const MultiVec& mv, const PruneSpec& spec) { return spec.budget >= mv.length(); }

MultiVec prune(const MultiVec& mv, const PruneSpec& spec) {
  if (spec.budget == 0) throw SpecError("pruning budget must be >= 1");
  if (mv.empty()) throw SpecError("cannot prune an empty multi-vector");
  if (is_identity_prune(mv, spec)) return mv;
  switch (spec.method) {
    case PruneMethod::random: return prune_random(mv, spec.budget, spec.seed);
    case PruneMethod::kmeans: return prune_kmeans(mv, spec);
    case PruneMethod::hierarchical: {
      const auto labels = ward_labels(mv.tensor(), spec.budget);
      return from_groups(mv.tensor(), groups_from_labels(labels, spec.budget));
    }
    case PruneMethod::pool1d: return prune_pool1d(mv, spec.budget);
  }
  throw SpecError("unknown pruning method");
}

TimedPrune prune_timed(const MultiVec& mv, const PruneSpec& spec) {
  const auto t0 = std::chrono::steady_clock::now();
  MultiVec out = prune(mv, spec);
  const auto t1 = std::chrono::steady_clock::now();
  return {std::move(out), std::chrono::duration<double, std::milli>(t1 - t0).count()};
}

std::vector<MultiVec> prune_all(std::span<const MultiVec> docs, const PruneSpec& spec) {
  std::vector<MultiVec> out(docs.size());
  std::exception_ptr failure;
  const auto n = static_cast<std::int64_t>(docs.size());
#pragma omp parallel for schedule(dynamic)
  for (std::int64_t i = 0; i < n; ++i) {
    try {
      PruneSpec s = spec;
      s.seed = derive_seed(spec.seed, static_cast<std::uint64_t>(i));
      out[i] = prune(docs[i], s);
    } catch (...) {
#pragma omp critical
      if (!failure) failure = std::current_exception();
    }
  }
  if (failure) std::rethrow_exception(failure);
  return out;
}

}  // namespace cemb
