#pragma once

// Seeded synthetic key-value forms with gold answers and answer boxes.

#include <algorithm>
#include <array>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "mgavqa/errors.hpp"
#include "mgavqa/ingest.hpp"
#include "mgavqa/rng.hpp"

namespace mgavqa::synthgen {

enum class ValueKind { kDate, kAmount, kName, kId };

struct FieldKey {
  const char* label;
  ValueKind kind;
};

inline constexpr std::array<FieldKey, 16> kFieldKeys = {{
    {"Invoice Date", ValueKind::kDate},   {"Due Date", ValueKind::kDate},
    {"Order Date", ValueKind::kDate},     {"Total Amount", ValueKind::kAmount},
    {"Subtotal", ValueKind::kAmount},     {"Tax", ValueKind::kAmount},
    {"Balance Due", ValueKind::kAmount},  {"Customer Name", ValueKind::kName},
    {"Vendor", ValueKind::kName},         {"Contact Person", ValueKind::kName},
    {"Invoice Number", ValueKind::kId},   {"Account Id", ValueKind::kId},
    {"Order Number", ValueKind::kId},     {"Phone", ValueKind::kId},
    {"Ship To", ValueKind::kName},        {"Payment Terms", ValueKind::kId},
}};

inline constexpr std::array<const char*, 10> kFirstNames = {"John", "Maria", "Chen",  "Aisha", "Peter",
                                                            "Lena", "Omar",  "Grace", "Ivan",  "Sofia"};
inline constexpr std::array<const char*, 10> kLastNames = {"Smith", "Garcia", "Wang", "Khan",  "Novak",
                                                           "Berg",  "Haddad", "Lee",  "Petrov", "Rossi"};
inline constexpr std::array<const char*, 4> kTitles = {"INVOICE", "RECEIPT", "STATEMENT", "PURCHASE ORDER"};

struct SynthConfig {
  std::size_t n_docs = 250;
  std::size_t keys_min = 4;
  std::size_t keys_max = 7;
  double width = 1000;
  double height = 1400;
  double jitter = 5;  // px, vertical offset of a value relative to its key
  std::uint64_t seed = 7;
  double train_fraction = 0.8;
  // Vertical distance between consecutive rows. The minimum keeps rows more
  // than tau = 100 px apart, so each key-value pair forms its own component.
  double row_pitch_min = 140;
  double row_pitch_max = 165;

  void validate() const {
    if (n_docs < 1) throw ConfigError("synth: n_docs must be >= 1");
    if (!(width > 0) || !(height > 0)) throw ConfigError("synth: page dimensions must be positive");
    if (keys_min < 1 || keys_min > keys_max) throw ConfigError("synth: need 1 <= keys_min <= keys_max");
    if (keys_max > kFieldKeys.size()) throw ConfigError("synth: keys_max exceeds the number of field labels");
    if (jitter < 0) throw ConfigError("synth: jitter must be >= 0");
    if (train_fraction < 0 || train_fraction > 1) throw ConfigError("synth: train_fraction must lie in [0, 1]");
    if (!(row_pitch_min > 0) || row_pitch_min > row_pitch_max) throw ConfigError("synth: bad row pitch range");
  }
};

namespace detail {

inline constexpr double kCharWidth = 14;
inline constexpr double kRowHeight = 28;
inline constexpr double kTitleTop = 60;
inline constexpr double kTitleHeight = 40;
inline constexpr double kFirstRowMin = 100;
inline constexpr double kFirstRowMax = 130;
inline constexpr double kKeyX = 60;
inline constexpr double kValueGapMin = 20;
inline constexpr double kValueGapMax = 60;
inline constexpr std::size_t kLongestValue = 10;  // "2024-01-15", "$9999.99" etc.

inline double text_width(const std::string& s, double pad) { return kCharWidth * static_cast<double>(s.size()) + pad; }

inline std::string two_digits(long long v) {
  char buf[8];
  std::snprintf(buf, sizeof buf, "%02lld", v);
  return buf;
}

inline std::string make_value(ValueKind kind, Rng& rng) {
  switch (kind) {
    case ValueKind::kDate: {
      const auto y = rng.uniform_int(2015, 2025);
      const auto m = rng.uniform_int(1, 12);
      const auto d = rng.uniform_int(1, 28);
      if (rng.uniform() < 0.5) return std::to_string(y) + "-" + two_digits(m) + "-" + two_digits(d);
      return two_digits(d) + "/" + two_digits(m) + "/" + std::to_string(y);
    }
    case ValueKind::kAmount:
      return "$" + std::to_string(rng.uniform_int(1, 9999)) + "." + two_digits(rng.uniform_int(0, 99));
    case ValueKind::kName:
      return std::string(kFirstNames[static_cast<std::size_t>(rng.uniform_int(0, 9))]) + " " +
             kLastNames[static_cast<std::size_t>(rng.uniform_int(0, 9))];
    case ValueKind::kId:
      return "INV-" + std::to_string(rng.uniform_int(10000, 99999));
  }
  return {};
}

/// Worst-case layout extents, checked before generating anything.
inline void check_fits(const SynthConfig& cfg) {
  const double last_row_top =
      kTitleTop + kTitleHeight + kFirstRowMax + static_cast<double>(cfg.keys_max - 1) * cfg.row_pitch_max;
  if (last_row_top + cfg.jitter + kRowHeight > cfg.height) {
    throw ConfigError("synth: " + std::to_string(cfg.keys_max) + " rows do not fit on a page of height " +
                      std::to_string(cfg.height));
  }
  std::size_t longest_label = 0;
  for (const auto& k : kFieldKeys) longest_label = std::max(longest_label, std::string(k.label).size() + 1);
  const double right = kKeyX + kCharWidth * static_cast<double>(longest_label) + 20 + kValueGapMax +
                       kCharWidth * static_cast<double>(kLongestValue) + 10;
  double title = 0;
  for (const char* t : kTitles) title = std::max(title, text_width(t, 20));
  if (right > cfg.width || title > cfg.width) throw ConfigError("synth: page width too small for the layout");
}

}  // namespace detail

/// One document: centered title, then one row per key with the label in the
/// left column and its value to the right on the same row (± jitter). Each key
/// gets the question "What is the <key>?" answered by the value span.
inline Document generate_document(const SynthConfig& cfg, std::size_t index) {
  using namespace detail;
  Rng rng(derive_seed(cfg.seed, "synth-doc:" + std::to_string(index)));
  char id[32];
  std::snprintf(id, sizeof id, "doc_%04zu", index);
  Document doc;
  doc.id = id;
  doc.width = cfg.width;
  doc.height = cfg.height;

  const auto n_keys = static_cast<std::size_t>(
      rng.uniform_int(static_cast<long long>(cfg.keys_min), static_cast<long long>(cfg.keys_max)));
  std::vector<std::size_t> pool(kFieldKeys.size());
  for (std::size_t i = 0; i < pool.size(); ++i) pool[i] = i;
  for (std::size_t i = 0; i < n_keys; ++i) {
    const auto j = static_cast<std::size_t>(rng.uniform_int(static_cast<long long>(i), static_cast<long long>(pool.size()) - 1));
    std::swap(pool[i], pool[j]);
  }

  long long next_id = 0;
  auto conf = [&] { return rng.uniform(0.85, 1.0); };
  const std::string title = kTitles[static_cast<std::size_t>(rng.uniform_int(0, kTitles.size() - 1))];
  const double title_w = text_width(title, 20);
  doc.spans.push_back({next_id++, title, BBox{(cfg.width - title_w) / 2.0, kTitleTop, title_w, kTitleHeight}, conf()});

  double y = kTitleTop + kTitleHeight + rng.uniform(kFirstRowMin, kFirstRowMax);
  for (std::size_t k = 0; k < n_keys; ++k) {
    const FieldKey& field = kFieldKeys[pool[k]];
    const std::string label = std::string(field.label) + ":";
    const double key_w = text_width(label, 20);
    doc.spans.push_back({next_id++, label, BBox{kKeyX, y, key_w, kRowHeight}, conf()});

    const std::string value = make_value(field.kind, rng);
    const double vx = kKeyX + key_w + rng.uniform(kValueGapMin, kValueGapMax);
    const double vy = std::max(0.0, y + rng.uniform(-cfg.jitter, cfg.jitter));
    const BBox vbox{vx, vy, text_width(value, 10), kRowHeight};
    const long long value_id = next_id++;
    doc.spans.push_back({value_id, value, vbox, conf()});

    doc.questions.push_back({static_cast<long long>(k), std::string("What is the ") + field.label + "?", value, vbox});
    y += rng.uniform(cfg.row_pitch_min, cfg.row_pitch_max);
  }
  return doc;
}

inline std::vector<Document> generate_corpus(const SynthConfig& cfg) {
  cfg.validate();
  detail::check_fits(cfg);
  std::vector<Document> docs;
  docs.reserve(cfg.n_docs);
  for (std::size_t i = 0; i < cfg.n_docs; ++i) docs.push_back(generate_document(cfg, i));
  return docs;
}

inline std::size_t train_count(const SynthConfig& cfg) {
  return static_cast<std::size_t>(std::llround(cfg.train_fraction * static_cast<double>(cfg.n_docs)));
}

struct Split {
  std::vector<Document> train;
  std::vector<Document> eval;
};

/// First round(train_fraction · n) documents train, the rest evaluate.
inline Split split_corpus(std::vector<Document> docs, std::size_t n_train) {
  n_train = std::min(n_train, docs.size());
  Split s;
  s.train.assign(std::make_move_iterator(docs.begin()), std::make_move_iterator(docs.begin() + static_cast<std::ptrdiff_t>(n_train)));
  s.eval.assign(std::make_move_iterator(docs.begin() + static_cast<std::ptrdiff_t>(n_train)), std::make_move_iterator(docs.end()));
  return s;
}

// ---------------------------------------------------------------------------
// Corpus on disk: one document JSON per file plus manifest.json

inline constexpr const char* kManifestName = "manifest.json";

inline nlohmann::json write_corpus(const std::filesystem::path& dir, const std::vector<Document>& docs,
                                   const SynthConfig& cfg) {
  std::filesystem::create_directories(dir);
  const std::size_t n_train = std::min(train_count(cfg), docs.size());
  nlohmann::json manifest = {{"seed", cfg.seed}, {"n_docs", docs.size()}, {"train", nlohmann::json::array()},
                             {"eval", nlohmann::json::array()}};
  for (std::size_t i = 0; i < docs.size(); ++i) {
    const std::string file = docs[i].id + ".json";
    ingest::write_file(dir / file, ingest::serialize_document(docs[i]));
    manifest[i < n_train ? "train" : "eval"].push_back(file);
  }
  ingest::write_file(dir / kManifestName, manifest.dump(2));
  return manifest;
}

/// Reads a manifest written by write_corpus. `path` may name the manifest or
/// its directory.
inline Split load_corpus(const std::filesystem::path& path) {
  const auto manifest_path = std::filesystem::is_directory(path) ? path / kManifestName : path;
  const auto dir = manifest_path.parent_path();
  nlohmann::json m;
  try {
    m = nlohmann::json::parse(ingest::read_file(manifest_path));
  } catch (const nlohmann::json::parse_error& e) {
    throw SchemaError(manifest_path.string(), e.what());
  }
  Split s;
  for (const char* part : {"train", "eval"}) {
    if (!m.contains(part) || !m[part].is_array()) throw SchemaError(std::string("manifest.") + part, "expected array");
    for (const auto& f : m[part]) {
      if (!f.is_string()) throw SchemaError(std::string("manifest.") + part, "expected file names");
      (std::string(part) == "train" ? s.train : s.eval).push_back(ingest::load_document(dir / f.get<std::string>()));
    }
  }
  return s;
}

// ---------------------------------------------------------------------------
// Mixed-phrasing question suite for exercising adaptive compression

struct SuiteQuestion {
  std::size_t doc_index = 0;
  std::string text;
};

/// One question per key, cycling through five phrasings of increasing length,
/// some naming a second key through an indicator word.
inline std::vector<SuiteQuestion> question_suite(const std::vector<Document>& docs) {
  std::vector<SuiteQuestion> out;
  for (std::size_t di = 0; di < docs.size(); ++di) {
    const auto& qs = docs[di].questions;
    for (std::size_t k = 0; k < qs.size(); ++k) {
      // recover the label from "What is the <label>?"
      auto label = [&](std::size_t i) {
        const std::string& t = qs[i].text;
        const std::string prefix = "What is the ";
        if (t.rfind(prefix, 0) == 0 && t.size() > prefix.size() + 1) return t.substr(prefix.size(), t.size() - prefix.size() - 1);
        return t;
      };
      const std::string key = label(k);
      const std::string other = label((k + 1) % qs.size());
      std::string text;
      switch ((di + k) % 5) {
        case 0: text = "What is the " + key + "?"; break;
        case 1: text = "Please tell me the " + key + " shown on this document?"; break;
        case 2: text = "What is the " + key + " and also the " + other + "?"; break;
        case 3: text = "Besides the " + other + ", what is the " + key + " listed here?"; break;
        default:
          text = "Reading the whole form from top to bottom, find the row labeled " + key +
                 " and report the value written next to it?";
      }
      out.push_back({di, std::move(text)});
    }
  }
  return out;
}

}  // namespace mgavqa::synthgen
