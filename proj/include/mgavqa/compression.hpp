#pragma once

// Question-guided visual token pruning.

#include <algorithm>
#include <cctype>
#include <cmath>
#include <numeric>
#include <string>
#include <string_view>
#include <vector>

#include "mgavqa/errors.hpp"
#include "mgavqa/numerics.hpp"

namespace mgavqa::compression {

struct CompressionParams {
  double omega = 0.7;  // question-similarity weight
  double rho_min = 0.3;
  double rho_max = 0.8;
  std::size_t k_max = 1024;
  std::vector<std::string> indicators = {"and", "also", "besides"};

  void validate() const {
    if (omega < 0.0 || omega > 1.0) throw InvalidArgument("CompressionParams: omega must lie in [0, 1]");
    if (!(rho_min > 0.0) || rho_min > rho_max || rho_max > 1.0) {
      throw InvalidArgument("CompressionParams: need 0 < rho_min <= rho_max <= 1");
    }
    if (k_max < 1) throw InvalidArgument("CompressionParams: k_max must be >= 1");
  }
};

struct CompressionResult {
  std::vector<std::size_t> kept_indices;  // ascending original indices
  std::vector<double> scores;
  double rho_used = 0;
  std::size_t k = 0;
};

inline std::size_t whitespace_token_count(std::string_view text) {
  std::size_t count = 0;
  bool in_token = false;
  for (unsigned char c : text) {
    const bool space = std::isspace(c) != 0;
    if (!space && !in_token) ++count;
    in_token = !space;
  }
  return count;
}

/// Case-insensitive whole-word occurrences of any indicator.
inline std::size_t count_indicators(std::string_view text, const std::vector<std::string>& indicators) {
  std::size_t count = 0;
  std::string word;
  auto flush = [&] {
    if (word.empty()) return;
    for (const auto& ind : indicators) {
      if (word.size() != ind.size()) continue;
      bool eq = true;
      for (std::size_t i = 0; i < word.size() && eq; ++i) {
        eq = word[i] == static_cast<char>(std::tolower(static_cast<unsigned char>(ind[i])));
      }
      if (eq) {
        ++count;
        break;
      }
    }
    word.clear();
  };
  for (unsigned char c : text) {
    if (std::isalnum(c) || c == '\'') {
      word.push_back(static_cast<char>(std::tolower(c)));
    } else {
      flush();
    }
  }
  flush();
  return count;
}

/// ρ = clamp(0.3 + 0.02·max(0, W − 5) + 0.15·I, ρ_min, ρ_max) with W the
/// whitespace token count and I the number of multi-hop indicator words.
inline double question_complexity_rho(std::string_view question, const CompressionParams& p) {
  const double words = static_cast<double>(whitespace_token_count(question));
  const double ind = static_cast<double>(count_indicators(question, p.indicators));
  const double rho = 0.3 + 0.02 * std::max(0.0, words - 5.0) + 0.15 * ind;
  return std::clamp(rho, p.rho_min, p.rho_max);
}

/// Attention mass each token receives under softmax(T·Tᵀ/√d), divided by N so
/// the importances sum to 1.
inline Vector token_importance(const Matrix& tokens) {
  const std::size_t n = tokens.rows();
  if (n == 0) throw InvalidArgument("token_importance: no tokens");
  Matrix logits = matmul_transposed(tokens, tokens);
  const double scale = 1.0 / std::sqrt(static_cast<double>(tokens.cols()));
  for (double& x : logits.values()) x *= scale;
  const Matrix attn = softmax_rows(logits);
  Vector imp(n, 0.0);
  for (std::size_t j = 0; j < n; ++j)
    for (std::size_t i = 0; i < n; ++i) imp[i] += attn(j, i);
  for (double& x : imp) x /= static_cast<double>(n);
  return imp;
}

/// ω·cos(q, t_i) + (1 − ω)·importance_i.
inline Vector token_score(std::span<const double> q, const Matrix& tokens, std::span<const double> importance,
                          const CompressionParams& p) {
  if (tokens.cols() != q.size()) throw InvalidArgument("token_score: query/token dimension mismatch");
  if (importance.size() != tokens.rows()) throw InvalidArgument("token_score: importance size mismatch");
  Vector out(tokens.rows());
  for (std::size_t i = 0; i < tokens.rows(); ++i) {
    out[i] = p.omega * cosine_similarity(q, tokens.row(i)) + (1.0 - p.omega) * importance[i];
  }
  return out;
}

inline Vector token_score(std::span<const double> q, const Matrix& tokens, const CompressionParams& p) {
  const Vector imp = token_importance(tokens);
  return token_score(q, tokens, imp, p);
}

inline std::size_t adaptive_k(double rho, std::size_t n, std::size_t k_max) {
  // ρ·N is computed in double; ceil of e.g. 0.3·10 must give 3, not 4.
  const double raw = rho * static_cast<double>(n);
  auto k = static_cast<std::size_t>(std::ceil(raw - 1e-9 * std::max(1.0, raw)));
  k = std::clamp<std::size_t>(k, n == 0 ? 0 : 1, n);
  return std::min(k, k_max);
}

/// Keep the k highest-scoring indices (ties → lower index), returned ascending.
inline std::vector<std::size_t> select_top_k(std::span<const double> scores, std::size_t k) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  order.resize(std::min(k, order.size()));
  std::sort(order.begin(), order.end());
  return order;
}

inline CompressionResult compress_with_rho(std::span<const double> q, const Matrix& tokens, double rho,
                                           const CompressionParams& p) {
  if (tokens.rows() == 0) throw InvalidArgument("compress_tokens: no tokens");
  CompressionResult r;
  r.scores = token_score(q, tokens, p);
  r.rho_used = rho;
  r.k = adaptive_k(rho, tokens.rows(), p.k_max);
  r.kept_indices = select_top_k(r.scores, r.k);
  return r;
}

/// k = min(⌈ρ·N⌉, k_max) with ρ from the question text.
inline CompressionResult compress_tokens(std::span<const double> q, const Matrix& tokens, std::string_view question,
                                         const CompressionParams& p) {
  p.validate();
  return compress_with_rho(q, tokens, question_complexity_rho(question, p), p);
}

inline Matrix gather_rows(const Matrix& m, const std::vector<std::size_t>& idx) {
  Matrix out(idx.size(), m.cols());
  for (std::size_t r = 0; r < idx.size(); ++r) std::copy(m.row(idx[r]).begin(), m.row(idx[r]).end(), out.row(r).begin());
  return out;
}

}  // namespace mgavqa::compression
