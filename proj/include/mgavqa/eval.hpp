#pragma once

// ANLS and box-localization scoring, run reports.

#include <algorithm>
#include <array>
#include <cctype>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "mgavqa/errors.hpp"
#include "mgavqa/ingest.hpp"

namespace mgavqa::eval {

/// Decode UTF-8 into code points. Invalid bytes decode to themselves so every
/// input has a well-defined length.
inline std::u32string decode_utf8(std::string_view s) {
  std::u32string out;
  std::size_t i = 0;
  while (i < s.size()) {
    const auto c = static_cast<unsigned char>(s[i]);
    std::size_t len = c < 0x80 ? 1 : (c >> 5) == 0x6 ? 2 : (c >> 4) == 0xE ? 3 : (c >> 3) == 0x1E ? 4 : 0;
    bool ok = len > 0 && i + len <= s.size();
    char32_t cp = len == 1 ? c : len == 2 ? (c & 0x1F) : len == 3 ? (c & 0x0F) : (c & 0x07);
    for (std::size_t k = 1; ok && k < len; ++k) {
      const auto cc = static_cast<unsigned char>(s[i + k]);
      ok = (cc >> 6) == 0x2;
      cp = (cp << 6) | (cc & 0x3F);
    }
    if (!ok) {
      out.push_back(c);
      ++i;
      continue;
    }
    out.push_back(cp);
    i += len;
  }
  return out;
}

/// Unit-cost edit distance over code points, two-row DP.
inline std::size_t levenshtein_distance(std::u32string_view a, std::u32string_view b) {
  if (a.size() < b.size()) std::swap(a, b);
  std::vector<std::size_t> prev(b.size() + 1), cur(b.size() + 1);
  for (std::size_t j = 0; j <= b.size(); ++j) prev[j] = j;
  for (std::size_t i = 1; i <= a.size(); ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j) {
      const std::size_t sub = prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1);
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, sub});
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

inline std::size_t levenshtein_distance(std::string_view a, std::string_view b) {
  return levenshtein_distance(std::u32string_view(decode_utf8(a)), std::u32string_view(decode_utf8(b)));
}

/// ASCII lower-case, trim, collapse whitespace runs to one space.
inline std::string normalize_answer(std::string_view s) {
  std::string out;
  bool pending_space = false;
  for (unsigned char c : s) {
    if (std::isspace(c)) {
      pending_space = !out.empty();
      continue;
    }
    if (pending_space) out.push_back(' ');
    pending_space = false;
    out.push_back(static_cast<char>(c < 0x80 ? std::tolower(c) : c));
  }
  return out;
}

inline constexpr double kAnlsThreshold = 0.5;

inline double anls_score(std::string_view pred, std::string_view gold) {
  const auto p = decode_utf8(normalize_answer(pred));
  const auto g = decode_utf8(normalize_answer(gold));
  const double denom = static_cast<double>(std::max<std::size_t>({p.size(), g.size(), 1}));
  const double nls = 1.0 - static_cast<double>(levenshtein_distance(p, g)) / denom;
  return nls >= kAnlsThreshold ? nls : 0.0;
}

inline double iou(const BBox& a, const BBox& b) {
  if (a.w < 0 || a.h < 0 || b.w < 0 || b.h < 0) throw InvalidArgument("iou: negative box extent");
  const double iw = std::max(0.0, std::min(a.right(), b.right()) - std::max(a.x, b.x));
  const double ih = std::max(0.0, std::min(a.bottom(), b.bottom()) - std::max(a.y, b.y));
  const double inter = iw * ih;
  // Areas from the same corner differences as the intersection, so iou(a, a) is exactly 1.
  const double area_a = (a.right() - a.x) * (a.bottom() - a.y);
  const double area_b = (b.right() - b.x) * (b.bottom() - b.y);
  const double uni = area_a + area_b - inter;
  return uni > 0 ? inter / uni : 0.0;
}

inline constexpr std::size_t kNumThresholds = 10;

/// 0.50, 0.55, ..., 0.95, each computed from an integer numerator.
inline double iou_threshold(std::size_t k) { return static_cast<double>(50 + 5 * k) / 100.0; }

/// Mean over thresholds of the fraction of IoUs at or above the threshold.
inline double map_from_ious(const std::vector<double>& ious) {
  if (ious.empty()) throw InvalidArgument("map_at_iou: no pairs");
  double total = 0.0;
  for (std::size_t k = 0; k < kNumThresholds; ++k) {
    const double t = iou_threshold(k);
    const auto hits = std::count_if(ious.begin(), ious.end(), [t](double v) { return v >= t; });
    total += static_cast<double>(hits) / static_cast<double>(ious.size());
  }
  return total / static_cast<double>(kNumThresholds);
}

inline double map_at_iou(const std::vector<std::pair<BBox, BBox>>& pairs) {
  std::vector<double> ious;
  ious.reserve(pairs.size());
  for (const auto& [p, g] : pairs) ious.push_back(iou(p, g));
  return map_from_ious(ious);
}

// ---------------------------------------------------------------------------
// Run evaluation

struct PredictionRecord {
  std::string doc_id;
  long long question_id = 0;
  long long span_id = -1;
  std::string answer_text;
  BBox span_bbox;
  double prob = 0;
  std::optional<std::array<double, 4>> bbox_pred;  // normalized [x, y, w, h] from the regression head
};

struct QuestionScore {
  std::string doc_id;
  long long question_id = 0;
  std::string prediction;
  std::string gold;
  double anls = 0;
  std::optional<double> iou;
  std::size_t hits = 0;  // thresholds met
  std::optional<double> head_iou;  // regression head box vs gold
};

struct EvalReport {
  double anls = 0;
  double map_iou = 0;
  std::optional<double> head_iou_mean;
  std::vector<QuestionScore> per_question;
  std::size_t count = 0;
};

/// Scores every gold question that carries an answer. Predictions must match
/// such a question exactly once and every such question needs a prediction.
inline EvalReport evaluate_run(const std::vector<PredictionRecord>& predictions, const std::vector<Document>& gold) {
  using Key = std::pair<std::string, long long>;
  std::map<Key, const PredictionRecord*> by_key;
  for (const auto& p : predictions) {
    const Key k{p.doc_id, p.question_id};
    if (!by_key.emplace(k, &p).second) {
      throw KeyedError(p.doc_id + "/" + std::to_string(p.question_id), "evaluate_run: duplicate prediction");
    }
  }
  EvalReport r;
  std::vector<double> ious;
  double head_sum = 0;
  std::size_t head_n = 0;
  std::size_t matched = 0;
  for (const auto& doc : gold) {
    for (const auto& q : doc.questions) {
      if (!q.answer) continue;
      const Key k{doc.id, q.id};
      auto it = by_key.find(k);
      if (it == by_key.end()) throw KeyedError(doc.id + "/" + std::to_string(q.id), "evaluate_run: no prediction");
      ++matched;
      const auto& p = *it->second;
      QuestionScore s;
      s.doc_id = doc.id;
      s.question_id = q.id;
      s.prediction = p.answer_text;
      s.gold = *q.answer;
      s.anls = anls_score(p.answer_text, *q.answer);
      if (q.answer_bbox) {
        const double v = iou(p.span_bbox, *q.answer_bbox);
        s.iou = v;
        for (std::size_t t = 0; t < kNumThresholds; ++t) s.hits += v >= iou_threshold(t) ? 1 : 0;
        ious.push_back(v);
        if (p.bbox_pred) {
          const auto& b = *p.bbox_pred;
          const BBox px{b[0] * doc.width, b[1] * doc.height, b[2] * doc.width, b[3] * doc.height};
          s.head_iou = iou(px, *q.answer_bbox);
          head_sum += *s.head_iou;
          ++head_n;
        }
      }
      r.anls += s.anls;
      r.per_question.push_back(std::move(s));
    }
  }
  if (matched != by_key.size()) {
    for (const auto& [k, p] : by_key) {
      bool found = false;
      for (const auto& doc : gold) {
        if (doc.id != k.first) continue;
        const Question* q = doc.find_question(k.second);
        found = q && q->answer;
      }
      if (!found) throw KeyedError(k.first + "/" + std::to_string(k.second), "evaluate_run: prediction has no gold question");
    }
  }
  r.count = r.per_question.size();
  if (r.count > 0) r.anls /= static_cast<double>(r.count);
  if (!ious.empty()) r.map_iou = map_from_ious(ious);
  if (head_n > 0) r.head_iou_mean = head_sum / static_cast<double>(head_n);
  return r;
}

inline nlohmann::json report_to_json(const EvalReport& r) {
  auto per = nlohmann::json::array();
  for (const auto& s : r.per_question) {
    nlohmann::json j = {{"doc_id", s.doc_id}, {"question_id", s.question_id}, {"prediction", s.prediction},
                        {"gold", s.gold},     {"anls", s.anls},               {"hits", s.hits}};
    j["iou"] = s.iou ? nlohmann::json(*s.iou) : nlohmann::json(nullptr);
    if (s.head_iou) j["head_iou"] = *s.head_iou;
    per.push_back(std::move(j));
  }
  nlohmann::json out = {{"anls", r.anls}, {"map_iou_50_95", r.map_iou}, {"count", r.count}, {"per_question", per}};
  if (r.head_iou_mean) out["head_iou_mean"] = *r.head_iou_mean;
  return out;
}

}  // namespace mgavqa::eval
