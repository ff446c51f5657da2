#pragma once

// Direct memory (ranked answer candidates), indirect memory (k-means centroids
// of graph states) and cross-attention retrieval over both.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <regex>
#include <string>
#include <vector>

#include "mgavqa/errors.hpp"
#include "mgavqa/ingest.hpp"
#include "mgavqa/numerics.hpp"
#include "mgavqa/rng.hpp"

namespace mgavqa::memory {

struct MemoryParams {
  std::size_t K_d = 256;
  std::size_t K_i = 512;
  double lambda = 0.6;  // OCR-confidence weight in the candidate score
  std::size_t hops = 2;  // retrieval hops used for multi-hop questions
  std::size_t kmeans_iters = 25;
  std::uint64_t seed = 7;

  void validate() const {
    if (K_d < 1 || K_i < 1) throw InvalidArgument("MemoryParams: K_d and K_i must be >= 1");
    if (lambda < 0.0 || lambda > 1.0) throw InvalidArgument("MemoryParams: lambda must lie in [0, 1]");
    if (hops < 1) throw InvalidArgument("MemoryParams: hops must be >= 1");
  }
};

struct DirectEntry {
  long long span_id = 0;
  double score = 0;
  Vector embedding;
};

struct MemoryState {
  std::vector<DirectEntry> direct;
  Matrix indirect;  // centroids, one per row

  std::size_t size() const noexcept { return direct.size() + indirect.rows(); }
};

/// Rule-table named-entity likelihood: dates and currency amounts 1.0, bare
/// numbers 0.8, capitalized word sequences 0.6, anything else 0.1.
inline double entity_score(const std::string& text) {
  static const std::regex kIsoDate(R"(\b\d{4}-\d{1,2}-\d{1,2}\b)");
  static const std::regex kDmyDate(R"(\b\d{1,2}[/.\-]\d{1,2}[/.\-]\d{2,4}\b)");
  static const std::regex kCurrency(
      R"(((\$|€|£|¥)\s?[+\-]?\d[\d,]*(\.\d+)?)|(\b(USD|EUR|GBP|JPY|CAD|AUD|CHF|INR)\s?[+\-]?\d[\d,]*(\.\d+)?)|(\d[\d,]*(\.\d+)?\s?(USD|EUR|GBP|JPY|CAD|AUD|CHF|INR)\b))");
  static const std::regex kNumber(R"(\s*[+\-]?\d[\d,]*(\.\d+)?%?\s*)");
  static const std::regex kCapitalized(R"(\s*[A-Z][^\s]*(\s+[A-Z][^\s]*)*\s*)");

  double best = 0.1;
  if (std::regex_search(text, kIsoDate) || std::regex_search(text, kDmyDate)) best = std::max(best, 1.0);
  if (std::regex_search(text, kCurrency)) best = std::max(best, 1.0);
  if (std::regex_match(text, kNumber)) best = std::max(best, 0.8);
  if (std::regex_match(text, kCapitalized)) best = std::max(best, 0.6);
  return best;
}

/// λ·conf + (1 − λ)·entity_score.
inline double candidate_score(const TextSpan& span, const MemoryParams& p) {
  return p.lambda * span.ocr_conf + (1.0 - p.lambda) * entity_score(span.text);
}

/// Top min(K_d, N) spans by candidate score (ties → lower span id), in score
/// order. `embeddings` rows align with `spans`.
inline std::vector<DirectEntry> populate_direct(const std::vector<TextSpan>& spans, const Matrix& embeddings,
                                                const MemoryParams& p) {
  if (embeddings.rows() != spans.size()) throw InvalidArgument("populate_direct: one embedding per span required");
  std::vector<DirectEntry> all;
  all.reserve(spans.size());
  for (std::size_t i = 0; i < spans.size(); ++i) {
    all.push_back({spans[i].id, candidate_score(spans[i], p), embeddings.row_vector(i)});
  }
  std::stable_sort(all.begin(), all.end(), [](const DirectEntry& a, const DirectEntry& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.span_id < b.span_id;
  });
  if (all.size() > p.K_d) all.resize(p.K_d);
  return all;
}

inline std::vector<DirectEntry> populate_direct(const std::vector<TextSpan>& spans, const ingest::EmbeddingTable& emb,
                                                const MemoryParams& p) {
  Matrix m(spans.size(), emb.dim());
  for (std::size_t i = 0; i < spans.size(); ++i) {
    const auto& v = emb.at(ingest::span_key(spans[i].id));
    std::copy(v.begin(), v.end(), m.row(i).begin());
  }
  return populate_direct(spans, m, p);
}

struct KMeansResult {
  Matrix centroids;
  std::vector<std::size_t> assignment;
  std::vector<double> sse_history;  // SSE after each assignment step
  std::size_t iterations = 0;
};

namespace detail {

inline double squared_distance(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double diff = a[i] - b[i];
    s += diff * diff;
  }
  return s;
}

/// k-means++ seeding. When every remaining point coincides with a chosen
/// center, the lowest-index unused point is taken.
inline Matrix kmeanspp_init(const Matrix& pts, std::size_t k, Rng& rng) {
  const std::size_t n = pts.rows();
  Matrix centers(k, pts.cols());
  std::vector<bool> used(n, false);
  std::size_t first = static_cast<std::size_t>(rng.uniform_int(0, static_cast<long long>(n) - 1));
  used[first] = true;
  std::copy(pts.row(first).begin(), pts.row(first).end(), centers.row(0).begin());
  std::vector<double> d2(n);
  for (std::size_t i = 0; i < n; ++i) d2[i] = squared_distance(pts.row(i), centers.row(0));
  for (std::size_t c = 1; c < k; ++c) {
    const double total = std::accumulate(d2.begin(), d2.end(), 0.0);
    std::size_t pick = n;
    if (total > 0.0) {
      const double r = rng.uniform() * total;
      double acc = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        if (d2[i] <= 0.0) continue;
        acc += d2[i];
        pick = i;
        if (acc > r) break;
      }
    } else {
      for (std::size_t i = 0; i < n; ++i) {
        if (!used[i]) {
          pick = i;
          break;
        }
      }
    }
    used[pick] = true;
    std::copy(pts.row(pick).begin(), pts.row(pick).end(), centers.row(c).begin());
    for (std::size_t i = 0; i < n; ++i) d2[i] = std::min(d2[i], squared_distance(pts.row(i), centers.row(c)));
  }
  return centers;
}

}  // namespace detail

/// Seeded k-means++ followed by Lloyd iterations until the largest centroid
/// shift drops below 1e-6 or `max_iters` is reached. Empty clusters keep their
/// previous centroid.
inline KMeansResult kmeans(const Matrix& pts, std::size_t k, std::size_t max_iters, std::uint64_t seed) {
  const std::size_t n = pts.rows();
  if (n == 0) throw InvalidArgument("kmeans: no points");
  if (k == 0 || k > n) throw InvalidArgument("kmeans: k must lie in [1, n]");
  Rng rng(derive_seed(seed, "kmeans"));
  KMeansResult res;
  res.centroids = detail::kmeanspp_init(pts, k, rng);
  res.assignment.assign(n, 0);
  const std::size_t d = pts.cols();
  for (std::size_t it = 0; it < std::max<std::size_t>(max_iters, 1); ++it) {
    double sse = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      double best = std::numeric_limits<double>::infinity();
      std::size_t arg = 0;
      for (std::size_t c = 0; c < k; ++c) {
        const double dist = detail::squared_distance(pts.row(i), res.centroids.row(c));
        if (dist < best) {
          best = dist;
          arg = c;
        }
      }
      res.assignment[i] = arg;
      sse += best;
    }
    res.sse_history.push_back(sse);
    res.iterations = it + 1;
    if (max_iters == 0) break;

    Matrix sums(k, d);
    std::vector<std::size_t> counts(k, 0);
    for (std::size_t i = 0; i < n; ++i) {
      axpy(1.0, pts.row(i), sums.row(res.assignment[i]));
      ++counts[res.assignment[i]];
    }
    double shift = 0.0;
    for (std::size_t c = 0; c < k; ++c) {
      if (counts[c] == 0) continue;
      auto row = sums.row(c);
      for (double& x : row) x /= static_cast<double>(counts[c]);
      shift = std::max(shift, std::sqrt(detail::squared_distance(row, res.centroids.row(c))));
      std::copy(row.begin(), row.end(), res.centroids.row(c).begin());
    }
    if (shift < 1e-6) break;
  }
  return res;
}

/// K = min(K_i, N) centroids of the graph node states.
inline Matrix populate_indirect(const Matrix& node_embeddings, const MemoryParams& p) {
  const std::size_t k = std::min(p.K_i, node_embeddings.rows());
  return kmeans(node_embeddings, k, p.kmeans_iters, p.seed).centroids;
}

inline MemoryState populate(const std::vector<TextSpan>& spans, const Matrix& span_embeddings,
                            const Matrix& node_embeddings, const MemoryParams& p) {
  p.validate();
  MemoryState s;
  s.direct = populate_direct(spans, span_embeddings, p);
  if (node_embeddings.rows() > 0) s.indirect = populate_indirect(node_embeddings, p);
  return s;
}

/// [M_DM; M_IM] stacked as rows.
inline Matrix memory_matrix(const MemoryState& s) {
  const std::size_t d = !s.direct.empty() ? s.direct.front().embedding.size() : s.indirect.cols();
  Matrix m(s.size(), d);
  std::size_t r = 0;
  for (const auto& e : s.direct) {
    if (e.embedding.size() != d) throw InvalidArgument("memory_matrix: direct entry dim mismatch");
    std::copy(e.embedding.begin(), e.embedding.end(), m.row(r++).begin());
  }
  if (s.indirect.rows() > 0 && s.indirect.cols() != d) throw InvalidArgument("memory_matrix: indirect dim mismatch");
  for (std::size_t i = 0; i < s.indirect.rows(); ++i) {
    std::copy(s.indirect.row(i).begin(), s.indirect.row(i).end(), m.row(r++).begin());
  }
  return m;
}

/// Labels matching the rows of memory_matrix: "dm:<span id>" then "im:<k>".
inline std::vector<std::string> memory_keys(const MemoryState& s) {
  std::vector<std::string> keys;
  for (const auto& e : s.direct) keys.push_back("dm:" + std::to_string(e.span_id));
  for (std::size_t i = 0; i < s.indirect.rows(); ++i) keys.push_back("im:" + std::to_string(i));
  return keys;
}

struct Readout {
  Vector output;
  std::vector<double> weights;
};

/// softmax(q·Kᵀ/√d)·K for a single query, keys doubling as values.
inline Readout attend(std::span<const double> q, const Matrix& keys) {
  if (keys.rows() == 0) throw EmptyMemoryError("attend: no keys");
  if (keys.cols() != q.size()) throw InvalidArgument("attend: query/key dimension mismatch");
  const double scale = 1.0 / std::sqrt(static_cast<double>(q.size()));
  Vector logits = matvec(keys, q);
  for (double& x : logits) x *= scale;
  Readout r;
  r.weights = softmax(logits);
  r.output = matvec_transposed(keys, r.weights);
  return r;
}

/// Joint softmax over both banks, no per-bank renormalization.
inline Readout retrieve_memory(std::span<const double> q, const MemoryState& s) {
  if (s.size() == 0) throw EmptyMemoryError("retrieve_memory: both memory banks are empty");
  return attend(q, memory_matrix(s));
}

struct ChainReadout {
  Vector output;
  std::vector<std::vector<double>> hop_weights;  // hop 1 over memory, later hops over graph nodes
};

/// Hop 1 reads memory with q; every later hop re-queries the graph node states
/// with the previous hop's output.
inline ChainReadout iterative_retrieve(std::span<const double> q, const MemoryState& s, const Matrix& node_embeddings,
                                       std::size_t hops) {
  if (hops < 1) throw InvalidArgument("iterative_retrieve: hops must be >= 1");
  ChainReadout out;
  Readout r = retrieve_memory(q, s);
  out.hop_weights.push_back(std::move(r.weights));
  out.output = std::move(r.output);
  for (std::size_t h = 1; h < hops; ++h) {
    Readout next = attend(out.output, node_embeddings);
    out.hop_weights.push_back(std::move(next.weights));
    out.output = std::move(next.output);
  }
  return out;
}

}  // namespace mgavqa::memory
