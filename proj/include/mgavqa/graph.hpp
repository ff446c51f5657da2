#pragma once

// Weighted spatial graph over OCR spans and the 3-layer residual GCN.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mgavqa/errors.hpp"
#include "mgavqa/ingest.hpp"
#include "mgavqa/numerics.hpp"
#include "mgavqa/rng.hpp"

namespace mgavqa::graph {

struct GraphParams {
  double tau = 100.0;     // px, max rectangle gap for a spatial edge
  double delta = 0.6;     // cosine threshold for a semantic edge
  double alpha = 0.4;     // spatial weight
  double beta = 0.3;      // alignment weight
  double gamma = 0.3;     // semantic weight
  double sigma_h = 20.0;  // px, same-row tolerance
  double sigma_v = 30.0;  // px, same-column tolerance
  /// Norm of the positional encoding added to each node, relative to a unit
  /// text embedding.
  double positional_norm = 0.5;

  void validate() const {
    if (std::abs(alpha + beta + gamma - 1.0) > 1e-9) throw InvalidArgument("GraphParams: alpha + beta + gamma must be 1");
    if (!(tau > 0)) throw InvalidArgument("GraphParams: tau must be positive");
    if (!(sigma_h > 0) || !(sigma_v > 0)) throw InvalidArgument("GraphParams: sigma_h and sigma_v must be positive");
    if (delta < -1.0 || delta > 1.0) throw InvalidArgument("GraphParams: delta must lie in [-1, 1]");
    if (positional_norm < 0) throw InvalidArgument("GraphParams: positional_norm must be >= 0");
  }
};

struct Edge {
  std::size_t i = 0;
  std::size_t j = 0;
  double weight = 0;
  double spatial = 0;
  double alignment = 0;
  double semantic = 0;  // raw cosine, before clamping at 0
};

struct SpatialGraph {
  Matrix node_embeddings;  // N × d
  std::vector<Edge> edges;  // i < j, sorted by (i, j)
  double image_diag = 0;

  std::size_t num_nodes() const noexcept { return node_embeddings.rows(); }
};

/// 1 − ‖c_i − c_j‖ / diag, clamped to [0, 1].
inline double spatial_distance(const BBox& a, const BBox& b, double diag) {
  if (!(diag > 0)) throw InvalidArgument("spatial_distance: diag must be positive");
  const double dist = std::hypot(a.cx() - b.cx(), a.cy() - b.cy());
  return std::clamp(1.0 - dist / diag, 0.0, 1.0);
}

/// max(exp(−Δy²/2σ_h²), exp(−Δx²/2σ_v²)) on box centers.
inline double alignment_score(const BBox& a, const BBox& b, const GraphParams& p) {
  const double dx = a.cx() - b.cx();
  const double dy = a.cy() - b.cy();
  const double row = std::exp(-(dy * dy) / (2.0 * p.sigma_h * p.sigma_h));
  const double col = std::exp(-(dx * dx) / (2.0 * p.sigma_v * p.sigma_v));
  return std::max(row, col);
}

inline double combine_edge_terms(double spatial, double alignment, double cosine, const GraphParams& p) {
  const double w = p.alpha * spatial + p.beta * alignment + p.gamma * std::max(0.0, cosine);
  return std::clamp(w, 0.0, 1.0);  // rounding can land one ulp above 1
}

inline double edge_weight(const BBox& a, const BBox& b, std::span<const double> fa, std::span<const double> fb,
                          double diag, const GraphParams& p) {
  return combine_edge_terms(spatial_distance(a, b, diag), alignment_score(a, b, p), cosine_similarity(fa, fb), p);
}

/// Smallest Euclidean gap between two rectangles; 0 when they touch or overlap.
inline double rect_gap(const BBox& a, const BBox& b) {
  const double dx = std::max(0.0, std::max(a.x, b.x) - std::min(a.right(), b.right()));
  const double dy = std::max(0.0, std::max(a.y, b.y) - std::min(a.bottom(), b.bottom()));
  return std::hypot(dx, dy);
}

/// Fixed sinusoidal encoding of a normalized box center. The first half of the
/// dimensions encodes x, the second half y; the result has norm `scale`.
inline Vector positional_encoding(double nx, double ny, std::size_t d, double scale) {
  Vector out(d, 0.0);
  if (scale == 0.0 || d == 0) return out;
  const std::size_t half_x = d / 2;
  auto fill = [&](std::size_t offset, std::size_t count, double pos) {
    for (std::size_t j = 0; j < count; ++j) {
      const double k = static_cast<double>(j / 2);
      const double freq = std::pow(10000.0, -2.0 * k / static_cast<double>(std::max<std::size_t>(count, 1)));
      const double angle = 100.0 * pos * freq;
      out[offset + j] = (j % 2 == 0) ? std::sin(angle) : std::cos(angle);
    }
  };
  fill(0, half_x, nx);
  fill(half_x, d - half_x, ny);
  const double n = norm(out);
  if (n > 0) {
    for (double& x : out) x *= scale / n;
  }
  return out;
}

/// Build the graph from per-span text embeddings (rows aligned with
/// `doc.spans`). Nodes carry text embedding + positional encoding; edges join
/// spans whose rectangles are within `tau` px or whose cosine exceeds `delta`.
inline SpatialGraph build_graph(const Document& doc, const Matrix& text_embeddings, const GraphParams& p) {
  p.validate();
  const std::size_t n = doc.spans.size();
  if (text_embeddings.rows() != n) throw InvalidArgument("build_graph: one embedding row per span required");
  SpatialGraph g;
  g.image_diag = doc.diagonal();
  const std::size_t d = text_embeddings.cols();
  g.node_embeddings = Matrix(n, d);
  for (std::size_t i = 0; i < n; ++i) {
    const auto& b = doc.spans[i].bbox;
    const Vector pe = positional_encoding(b.cx() / doc.width, b.cy() / doc.height, d, p.positional_norm);
    auto row = g.node_embeddings.row(i);
    auto src = text_embeddings.row(i);
    for (std::size_t k = 0; k < d; ++k) row[k] = src[k] + pe[k];
  }
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      const auto& bi = doc.spans[i].bbox;
      const auto& bj = doc.spans[j].bbox;
      const double cosine = cosine_similarity(text_embeddings.row(i), text_embeddings.row(j));
      if (rect_gap(bi, bj) <= p.tau || cosine > p.delta) {
        Edge e;
        e.i = i;
        e.j = j;
        e.spatial = spatial_distance(bi, bj, g.image_diag);
        e.alignment = alignment_score(bi, bj, p);
        e.semantic = cosine;
        e.weight = combine_edge_terms(e.spatial, e.alignment, cosine, p);
        g.edges.push_back(e);
      }
    }
  }
  return g;
}

/// Table-keyed variant: looks up each span's embedding under its id.
inline SpatialGraph build_graph(const Document& doc, const ingest::EmbeddingTable& emb, const GraphParams& p) {
  Matrix text(doc.spans.size(), emb.dim());
  for (std::size_t i = 0; i < doc.spans.size(); ++i) {
    const auto key = ingest::span_key(doc.spans[i].id);
    const Vector* v = emb.find(key);
    if (!v) throw KeyedError(key, "build_graph: span has no embedding");
    std::copy(v->begin(), v->end(), text.row(i).begin());
  }
  return build_graph(doc, text, p);
}

inline constexpr std::size_t kGcnLayers = 3;
inline constexpr double kDegreeFloor = 1e-6;

/// Frozen GCN transforms: 0.9·I plus seeded uniform noise in ±0.01.
inline std::vector<Matrix> init_gcn_layers(std::size_t d, std::uint64_t seed) {
  Rng rng(derive_seed(seed, "gcn"));
  std::vector<Matrix> layers;
  for (std::size_t l = 0; l < kGcnLayers; ++l) {
    Matrix w(d, d);
    for (std::size_t r = 0; r < d; ++r)
      for (std::size_t c = 0; c < d; ++c) w(r, c) = (r == c ? 0.9 : 0.0) + rng.uniform(-0.01, 0.01);
    layers.push_back(std::move(w));
  }
  return layers;
}

/// H_i ← GELU(W_g · Σ_j w_ij/√(d_i·d_j) · H_j + H_i) per layer, with d_i the
/// weighted degree floored at 1e-6.
inline Matrix gcn_forward(const SpatialGraph& g, const std::vector<Matrix>& layers) {
  if (layers.size() != kGcnLayers) throw InvalidArgument("gcn_forward: expected 3 layer matrices");
  const std::size_t n = g.num_nodes();
  const std::size_t d = g.node_embeddings.cols();
  for (const auto& w : layers) {
    if (w.rows() != d || w.cols() != d) throw InvalidArgument("gcn_forward: layer must be d x d");
  }
  std::vector<double> degree(n, 0.0);
  for (const auto& e : g.edges) {
    if (e.i >= n || e.j >= n) throw InvalidArgument("gcn_forward: edge references a missing node");
    degree[e.i] += e.weight;
    degree[e.j] += e.weight;
  }
  for (double& x : degree) x = std::max(x, kDegreeFloor);

  Matrix h = g.node_embeddings;
  for (const auto& w : layers) {
    Matrix agg(n, d);
    for (const auto& e : g.edges) {
      const double coef = e.weight / std::sqrt(degree[e.i] * degree[e.j]);
      axpy(coef, h.row(e.j), agg.row(e.i));
      axpy(coef, h.row(e.i), agg.row(e.j));
    }
    Matrix next(n, d);
    for (std::size_t i = 0; i < n; ++i) {
      const Vector msg = matvec(w, agg.row(i));
      auto out = next.row(i);
      auto self = h.row(i);
      for (std::size_t k = 0; k < d; ++k) out[k] = gelu(msg[k] + self[k]);
    }
    h = std::move(next);
  }
  return h;
}

inline nlohmann::json edges_to_json(const SpatialGraph& g) {
  auto out = nlohmann::json::array();
  for (const auto& e : g.edges) {
    out.push_back({{"i", e.i}, {"j", e.j}, {"w", e.weight}, {"d_spatial", e.spatial},
                   {"alignment", e.alignment}, {"semantic", e.semantic}});
  }
  return out;
}

}  // namespace mgavqa::graph
