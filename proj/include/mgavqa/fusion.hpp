#pragma once

// Disentangled attention streams, fusion projection, answer/bbox heads and
// head-only training with analytic gradients.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mgavqa/errors.hpp"
#include "mgavqa/ingest.hpp"
#include "mgavqa/numerics.hpp"
#include "mgavqa/rng.hpp"

namespace mgavqa::fusion {

inline constexpr std::size_t kNumStreams = 6;  // TT, TS, ST, SS, memory, compressed tokens
inline constexpr std::array<const char*, kNumStreams> kStreamNames = {"tt", "ts", "st", "ss", "memory", "compressed"};

struct FusionWeights {
  Matrix W_proj;  // d × 6d
  Matrix W_a;     // d × d
  double b_a = 0;
  Matrix W_b;     // 4 × d
  Vector b_b;     // 4

  std::size_t dim() const noexcept { return W_a.rows(); }

  static FusionWeights zeros(std::size_t d) {
    return {Matrix(d, kNumStreams * d), Matrix(d, d), 0.0, Matrix(4, d), Vector(4, 0.0)};
  }

  void validate() const {
    const std::size_t d = dim();
    if (d == 0 || W_proj.rows() != d || W_proj.cols() != kNumStreams * d || W_a.cols() != d || W_b.rows() != 4 ||
        W_b.cols() != d || b_b.size() != 4) {
      throw InvalidArgument("FusionWeights: inconsistent block shapes");
    }
    if (!all_finite(W_proj.values()) || !all_finite(W_a.values()) || !std::isfinite(b_a) ||
        !all_finite(W_b.values()) || !all_finite(b_b)) {
      throw InvalidArgument("FusionWeights: non-finite parameter");
    }
  }

  /// Visit every scalar parameter in a fixed order (W_proj, W_a, b_a, W_b, b_b).
  template <class F>
  void for_each_parameter(F&& f) {
    for (double& x : W_proj.values()) f(x);
    for (double& x : W_a.values()) f(x);
    f(b_a);
    for (double& x : W_b.values()) f(x);
    for (double& x : b_b) f(x);
  }

  std::vector<double> flatten() const {
    std::vector<double> out;
    const_cast<FusionWeights*>(this)->for_each_parameter([&](double& x) { out.push_back(x); });
    return out;
  }

  void assign(std::span<const double> flat) {
    std::size_t i = 0;
    for_each_parameter([&](double& x) { x = flat[i++]; });
  }

  friend bool operator==(const FusionWeights&, const FusionWeights&) = default;
};

enum class InitScheme { kMemoryIdentity, kRandom };

/// kMemoryIdentity routes the two question-conditioned blocks, integrated
/// memory and compressed tokens, straight through the projection
/// (W_proj ≈ [0 0 0 0 I I], W_a ≈ 0.1·I); kRandom draws every block from small
/// Gaussians. Both add seeded noise.
inline FusionWeights init_fusion_weights(std::size_t d, std::uint64_t seed,
                                         InitScheme scheme = InitScheme::kMemoryIdentity) {
  if (d < 1) throw InvalidArgument("init_fusion_weights: d must be positive");
  Rng rng(derive_seed(seed, "fusion-init"));
  FusionWeights w = FusionWeights::zeros(d);
  const bool structured = scheme == InitScheme::kMemoryIdentity;
  const double proj_std = structured ? 0.01 : 0.02;
  for (std::size_t r = 0; r < d; ++r)
    for (std::size_t c = 0; c < kNumStreams * d; ++c) w.W_proj(r, c) = proj_std * rng.normal();
  for (std::size_t r = 0; r < d; ++r)
    for (std::size_t c = 0; c < d; ++c) w.W_a(r, c) = 0.02 * rng.normal();
  for (std::size_t r = 0; r < 4; ++r)
    for (std::size_t c = 0; c < d; ++c) w.W_b(r, c) = 0.01 * rng.normal();
  if (structured) {
    for (std::size_t i = 0; i < d; ++i) {
      w.W_proj(i, 4 * d + i) += 1.0;
      w.W_proj(i, 5 * d + i) += 1.0;
      w.W_a(i, i) += 0.1;
    }
  }
  return w;
}

// ---------------------------------------------------------------------------
// Forward pass

/// softmax(Q·Kᵀ/√d), each row a distribution over the rows of K.
inline Matrix attention_weights(const Matrix& Q, const Matrix& K) {
  if (Q.cols() != K.cols()) throw InvalidArgument("cross_attention_stream: Q and K must share dimension d");
  Matrix logits = matmul_transposed(Q, K);
  const double scale = 1.0 / std::sqrt(static_cast<double>(Q.cols()));
  for (double& x : logits.values()) x *= scale;
  return softmax_rows(logits);
}

/// softmax(Q·Kᵀ/√d)·K; the keys double as values.
inline Matrix cross_attention_stream(const Matrix& Q, const Matrix& K) {
  if (Q.rows() == 0 || K.rows() == 0) return Matrix(Q.rows(), K.cols());
  return matmul(attention_weights(Q, K), K);
}

struct PooledStreams {
  Vector concat;  // 6d, stream order TT, TS, ST, SS, memory, compressed
  std::array<double, kNumStreams> norms{};
  std::vector<std::string> empty_streams;
};

/// Mean-pool each matrix stream over its rows and concatenate with the memory
/// vector. Empty streams contribute zeros and are reported by name.
inline PooledStreams pool_streams(const Matrix& a_tt, const Matrix& a_ts, const Matrix& a_st, const Matrix& a_ss,
                                  std::span<const double> m_integrated, const Matrix& t_compressed, std::size_t d) {
  PooledStreams out;
  out.concat.assign(kNumStreams * d, 0.0);
  auto place = [&](std::size_t slot, const Vector& v) {
    if (v.size() != d) throw InvalidArgument(std::string("fuse_streams: stream ") + kStreamNames[slot] + " has wrong dimension");
    std::copy(v.begin(), v.end(), out.concat.begin() + static_cast<std::ptrdiff_t>(slot * d));
    out.norms[slot] = norm(v);
  };
  const std::array<const Matrix*, 4> mats = {&a_tt, &a_ts, &a_st, &a_ss};
  for (std::size_t s = 0; s < 4; ++s) {
    if (mats[s]->rows() == 0) {
      out.empty_streams.emplace_back(kStreamNames[s]);
      continue;
    }
    place(s, mean_rows(*mats[s]));
  }
  if (m_integrated.empty()) {
    out.empty_streams.emplace_back(kStreamNames[4]);
  } else {
    place(4, Vector(m_integrated.begin(), m_integrated.end()));
  }
  if (t_compressed.rows() == 0) {
    out.empty_streams.emplace_back(kStreamNames[5]);
  } else {
    place(5, mean_rows(t_compressed));
  }
  return out;
}

inline Vector project(const FusionWeights& w, std::span<const double> concat) { return matvec(w.W_proj, concat); }

/// F_fused = W_proj · [pool(A_TT); pool(A_TS); pool(A_ST); pool(A_SS); M; pool(T)].
inline Vector fuse_streams(const Matrix& a_tt, const Matrix& a_ts, const Matrix& a_st, const Matrix& a_ss,
                           std::span<const double> m_integrated, const Matrix& t_compressed, const FusionWeights& w) {
  return project(w, pool_streams(a_tt, a_ts, a_st, a_ss, m_integrated, t_compressed, w.dim()).concat);
}

/// logit_i = s_iᵀ·W_a·F + b_a.
inline Vector answer_logits(std::span<const double> fused, const Matrix& span_states, const FusionWeights& w) {
  const Vector u = matvec(w.W_a, fused);
  Vector z = matvec(span_states, u);
  for (double& x : z) x += w.b_a;
  return z;
}

inline Vector predict_answer(std::span<const double> fused, const Matrix& span_states, const FusionWeights& w) {
  if (span_states.rows() == 0) throw InvalidArgument("predict_answer: no spans");
  return softmax(answer_logits(fused, span_states, w));
}

/// First index of the maximum (ties resolve to the lower index).
inline std::size_t argmax(std::span<const double> v) {
  return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

inline std::array<double, 4> predict_bbox(std::span<const double> fused, const FusionWeights& w) {
  const Vector o = matvec(w.W_b, fused);
  std::array<double, 4> out{};
  for (std::size_t k = 0; k < 4; ++k) out[k] = sigmoid(o[k] + w.b_b[k]);
  return out;
}

// ---------------------------------------------------------------------------
// Training

/// Frozen-pipeline features for one question.
struct TrainingExample {
  Vector pooled;             // 6d concatenation fed to W_proj
  Matrix span_states;        // N × d
  std::size_t gold_index = 0;
  std::array<double, 4> gold_bbox{};  // normalized [x, y, w, h]
};

struct LossAndGradient {
  double loss = 0;
  double answer_loss = 0;
  double bbox_loss = 0;
  FusionWeights grad;
};

/// Mean over examples of cross-entropy(answer) + MSE(bbox), with analytic
/// gradients. b_a shifts every logit equally, so the cross-entropy is evaluated
/// on bias-free logits and its gradient is exactly zero.
inline LossAndGradient loss_and_gradient(const FusionWeights& w, std::span<const TrainingExample> batch) {
  const std::size_t d = w.dim();
  LossAndGradient out;
  out.grad = FusionWeights::zeros(d);
  if (batch.empty()) return out;
  const double inv_m = 1.0 / static_cast<double>(batch.size());
  for (const auto& ex : batch) {
    const Vector f = matvec(w.W_proj, ex.pooled);
    const Vector u = matvec(w.W_a, f);
    const Vector z = matvec(ex.span_states, u);
    const double zmax = *std::max_element(z.begin(), z.end());
    double sum = 0.0;
    for (double v : z) sum += std::exp(v - zmax);
    const double lse = zmax + std::log(sum);
    const double ce = lse - z[ex.gold_index];

    Vector dz(z.size());
    for (std::size_t i = 0; i < z.size(); ++i) dz[i] = std::exp(z[i] - lse) * inv_m;
    dz[ex.gold_index] -= inv_m;
    const Vector du = matvec_transposed(ex.span_states, dz);
    Vector df = matvec_transposed(w.W_a, du);
    for (std::size_t r = 0; r < d; ++r) axpy(du[r], f, out.grad.W_a.row(r));

    const Vector o = matvec(w.W_b, f);
    double mse = 0.0;
    Vector dout(4);
    for (std::size_t k = 0; k < 4; ++k) {
      const double pb = sigmoid(o[k] + w.b_b[k]);
      const double diff = pb - ex.gold_bbox[k];
      mse += diff * diff / 4.0;
      dout[k] = (diff / 2.0) * pb * (1.0 - pb) * inv_m;
      out.grad.b_b[k] += dout[k];
      axpy(dout[k], f, out.grad.W_b.row(k));
    }
    const Vector df_box = matvec_transposed(w.W_b, dout);
    for (std::size_t r = 0; r < d; ++r) df[r] += df_box[r];
    for (std::size_t r = 0; r < d; ++r) axpy(df[r], ex.pooled, out.grad.W_proj.row(r));

    out.answer_loss += ce * inv_m;
    out.bbox_loss += mse * inv_m;
  }
  out.loss = out.answer_loss + out.bbox_loss;
  return out;
}

inline double loss_only(const FusionWeights& w, std::span<const TrainingExample> batch) {
  return loss_and_gradient(w, batch).loss;
}

enum class Optimizer { kAdamW, kSgd };

struct TrainOptions {
  double lr = 1e-3;
  std::size_t steps = 300;
  std::uint64_t seed = 7;
  Optimizer optimizer = Optimizer::kAdamW;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;  // decoupled, matrices only
  std::size_t batch_size = 0;  // 0 = full batch
};

struct TrainResult {
  FusionWeights weights;
  std::vector<double> loss_history;  // loss before each step, then the final loss
};

/// Gradient descent on the head parameters (AdamW by default, plain SGD on
/// request). Deterministic for a fixed seed; the seed only matters for
/// mini-batch shuffling.
inline TrainResult train_heads(std::span<const TrainingExample> corpus, const FusionWeights& init,
                               const TrainOptions& opt) {
  if (corpus.empty()) throw InvalidArgument("train_heads: empty corpus");
  if (opt.steps > 0 && !(opt.lr > 0)) throw InvalidArgument("train_heads: lr must be positive");
  init.validate();
  TrainResult res;
  res.weights = init;
  FusionWeights& w = res.weights;
  const std::size_t n_params = w.flatten().size();
  std::vector<double> m1(n_params, 0.0), m2(n_params, 0.0);
  std::vector<bool> decays(n_params, true);
  {
    // biases are not decayed
    const std::size_t d = w.dim();
    const std::size_t ba = w.W_proj.values().size() + w.W_a.values().size();
    decays[ba] = false;
    for (std::size_t k = 0; k < 4; ++k) decays[ba + 1 + 4 * d + k] = false;
  }

  std::vector<std::size_t> order(corpus.size());
  std::iota(order.begin(), order.end(), 0);
  Rng rng(derive_seed(opt.seed, "train-shuffle"));
  std::size_t cursor = corpus.size();
  std::vector<TrainingExample> minibatch;

  for (std::size_t step = 0; step < opt.steps; ++step) {
    std::span<const TrainingExample> batch = corpus;
    if (opt.batch_size > 0 && opt.batch_size < corpus.size()) {
      minibatch.clear();
      for (std::size_t b = 0; b < opt.batch_size; ++b) {
        if (cursor >= order.size()) {
          for (std::size_t i = order.size(); i > 1; --i) {
            std::swap(order[i - 1], order[static_cast<std::size_t>(rng.uniform_int(0, static_cast<long long>(i) - 1))]);
          }
          cursor = 0;
        }
        minibatch.push_back(corpus[order[cursor++]]);
      }
      batch = minibatch;
    }
    const auto lg = loss_and_gradient(w, batch);
    res.loss_history.push_back(lg.loss);
    const std::vector<double> g = lg.grad.flatten();
    std::vector<double> p = w.flatten();
    const double t = static_cast<double>(step + 1);
    for (std::size_t i = 0; i < n_params; ++i) {
      if (opt.optimizer == Optimizer::kSgd) {
        p[i] -= opt.lr * g[i];
        continue;
      }
      m1[i] = opt.beta1 * m1[i] + (1.0 - opt.beta1) * g[i];
      m2[i] = opt.beta2 * m2[i] + (1.0 - opt.beta2) * g[i] * g[i];
      const double mhat = m1[i] / (1.0 - std::pow(opt.beta1, t));
      const double vhat = m2[i] / (1.0 - std::pow(opt.beta2, t));
      if (decays[i]) p[i] -= opt.lr * opt.weight_decay * p[i];
      p[i] -= opt.lr * mhat / (std::sqrt(vhat) + opt.eps);
    }
    w.assign(p);
  }
  res.loss_history.push_back(loss_only(w, corpus));
  return res;
}

// ---------------------------------------------------------------------------
// Finite-difference verification

struct GradientCheckResult {
  double max_relative_error = 0;
  std::size_t worst_index = 0;
  std::size_t checked = 0;
};

/// |a − n| / max(|a|, |n|, 1e-8), with n the central difference
/// (L(θ + h·e_i) − L(θ − h·e_i)) / 2h. `coords` selects parameters; empty
/// means all of them. `params` is restored before returning.
inline GradientCheckResult numeric_gradient_check(const std::function<double(std::span<const double>)>& loss,
                                                  std::span<double> params, std::span<const double> analytic,
                                                  double h, std::span<const std::size_t> coords = {}) {
  if (!(h > 0)) throw InvalidArgument("numeric_gradient_check: h must be positive");
  if (analytic.size() != params.size()) throw InvalidArgument("numeric_gradient_check: gradient size mismatch");
  GradientCheckResult res;
  auto check = [&](std::size_t i) {
    const double saved = params[i];
    params[i] = saved + h;
    const double up = loss(params);
    params[i] = saved - h;
    const double down = loss(params);
    params[i] = saved;
    const double numeric = (up - down) / (2.0 * h);
    const double a = analytic[i];
    const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-8});
    if (res.checked == 0 || rel > res.max_relative_error) {
      res.max_relative_error = rel;
      res.worst_index = i;
    }
    ++res.checked;
  };
  if (coords.empty()) {
    for (std::size_t i = 0; i < params.size(); ++i) check(i);
  } else {
    for (std::size_t i : coords) check(i);
  }
  return res;
}

// ---------------------------------------------------------------------------
// Checkpoints

inline constexpr int kCheckpointVersion = 1;

namespace detail {

inline nlohmann::json matrix_json(const Matrix& m) {
  return {{"rows", m.rows()}, {"cols", m.cols()}, {"data", m.values()}};
}

inline Matrix matrix_from_json(const nlohmann::json& j, const char* name, std::size_t rows, std::size_t cols) {
  if (!j.contains(name)) throw SchemaError(name, "missing weight block");
  const auto& b = j.at(name);
  const auto r = b.at("rows").get<std::size_t>();
  const auto c = b.at("cols").get<std::size_t>();
  if (r != rows || c != cols) {
    throw SchemaError(name, "expected " + std::to_string(rows) + "x" + std::to_string(cols) + ", got " +
                                std::to_string(r) + "x" + std::to_string(c));
  }
  auto data = b.at("data").get<std::vector<double>>();
  if (data.size() != r * c) throw SchemaError(std::string(name) + ".data", "wrong number of values");
  return Matrix(r, c, std::move(data));
}

}  // namespace detail

/// JSON checkpoint: version, dims, and the five row-major parameter blocks.
/// `extra` is merged at the top level (used for the pipeline seed).
inline nlohmann::json weights_to_json(const FusionWeights& w, const nlohmann::json& extra = nlohmann::json::object()) {
  nlohmann::json j = {{"format", "mgavqa-heads"},
                      {"version", kCheckpointVersion},
                      {"d", w.dim()},
                      {"W_proj", detail::matrix_json(w.W_proj)},
                      {"W_a", detail::matrix_json(w.W_a)},
                      {"b_a", w.b_a},
                      {"W_b", detail::matrix_json(w.W_b)},
                      {"b_b", w.b_b}};
  for (auto it = extra.begin(); it != extra.end(); ++it) j[it.key()] = it.value();
  return j;
}

inline FusionWeights weights_from_json(const nlohmann::json& j) {
  try {
    if (j.value("version", -1) != kCheckpointVersion) throw SchemaError("version", "unsupported checkpoint version");
    const auto d = j.at("d").get<std::size_t>();
    FusionWeights w;
    w.W_proj = detail::matrix_from_json(j, "W_proj", d, kNumStreams * d);
    w.W_a = detail::matrix_from_json(j, "W_a", d, d);
    w.b_a = j.at("b_a").get<double>();
    w.W_b = detail::matrix_from_json(j, "W_b", 4, d);
    w.b_b = j.at("b_b").get<std::vector<double>>();
    w.validate();
    return w;
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError("checkpoint", e.what());
  } catch (const InvalidArgument& e) {
    throw SchemaError("checkpoint", e.what());
  }
}

inline void save_weights(const std::filesystem::path& path, const FusionWeights& w,
                         const nlohmann::json& extra = nlohmann::json::object()) {
  ingest::write_file(path, weights_to_json(w, extra).dump());
}

inline FusionWeights load_weights(const std::filesystem::path& path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(ingest::read_file(path));
  } catch (const nlohmann::json::parse_error& e) {
    throw SchemaError(path.string(), e.what());
  }
  return weights_from_json(j);
}

}  // namespace mgavqa::fusion
