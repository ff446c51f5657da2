#pragma once

// Document/question ingestion, embedding providers and the multi-scale patch grid.

#include <algorithm>
#include <array>
#include <bit>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "mgavqa/errors.hpp"
#include "mgavqa/numerics.hpp"
#include "mgavqa/rng.hpp"

namespace mgavqa {

/// Pixel box [x, y, w, h] with the origin at the top-left of the page.
struct BBox {
  double x = 0, y = 0, w = 0, h = 0;

  double cx() const noexcept { return x + w / 2.0; }
  double cy() const noexcept { return y + h / 2.0; }
  double right() const noexcept { return x + w; }
  double bottom() const noexcept { return y + h; }

  friend bool operator==(const BBox&, const BBox&) = default;
};

struct TextSpan {
  long long id = 0;
  std::string text;
  BBox bbox;
  double ocr_conf = 1.0;

  friend bool operator==(const TextSpan&, const TextSpan&) = default;
};

struct Question {
  long long id = 0;
  std::string text;
  std::optional<std::string> answer;
  std::optional<BBox> answer_bbox;

  friend bool operator==(const Question&, const Question&) = default;
};

struct Document {
  std::string id;  // optional in JSON; used to key predictions across a corpus
  double width = 0;
  double height = 0;
  std::vector<TextSpan> spans;
  std::vector<Question> questions;
  std::vector<std::string> warnings;

  double diagonal() const { return std::hypot(width, height); }

  const TextSpan* find_span(long long span_id) const {
    for (const auto& s : spans)
      if (s.id == span_id) return &s;
    return nullptr;
  }
  const Question* find_question(long long question_id) const {
    for (const auto& q : questions)
      if (q.id == question_id) return &q;
    return nullptr;
  }
};

namespace ingest {

namespace detail {

using nlohmann::json;

inline const json& require(const json& obj, const char* key, const std::string& path) {
  if (!obj.is_object()) throw SchemaError(path, "expected object");
  auto it = obj.find(key);
  if (it == obj.end()) throw SchemaError(path + "." + key, "missing field");
  return *it;
}

inline long long require_int(const json& v, const std::string& path) {
  if (!v.is_number_integer()) throw SchemaError(path, "expected integer");
  return v.get<long long>();
}

inline double require_number(const json& v, const std::string& path) {
  if (!v.is_number()) throw SchemaError(path, "expected number");
  const double x = v.get<double>();
  if (!std::isfinite(x)) throw SchemaError(path, "non-finite number");
  return x;
}

inline std::string require_string(const json& v, const std::string& path) {
  if (!v.is_string()) throw SchemaError(path, "expected string");
  return v.get<std::string>();
}

inline BBox parse_bbox(const json& v, const std::string& path) {
  if (!v.is_array() || v.size() != 4) throw SchemaError(path, "expected [x, y, w, h]");
  BBox b{require_number(v[0], path + "[0]"), require_number(v[1], path + "[1]"),
         require_number(v[2], path + "[2]"), require_number(v[3], path + "[3]")};
  return b;
}

/// Clamp a box to [0, width] × [0, height]; returns nullopt when nothing is left.
inline std::optional<BBox> clamp_bbox(const BBox& b, double width, double height) {
  if (b.x >= 0 && b.y >= 0 && b.right() <= width && b.bottom() <= height && b.w > 0 && b.h > 0) return b;
  const double x1 = std::clamp(b.x, 0.0, width);
  const double y1 = std::clamp(b.y, 0.0, height);
  const double x2 = std::clamp(b.right(), 0.0, width);
  const double y2 = std::clamp(b.bottom(), 0.0, height);
  if (x2 - x1 <= 0.0 || y2 - y1 <= 0.0) return std::nullopt;
  return BBox{x1, y1, x2 - x1, y2 - y1};
}

inline std::string format_bbox(const BBox& b) {
  std::ostringstream os;
  os << "[" << b.x << ", " << b.y << ", " << b.w << ", " << b.h << "]";
  return os.str();
}

}  // namespace detail

/// Parse and validate a document. Boxes are clamped to the page, with a warning
/// for every adjustment; zero-size boxes, duplicate span ids and out-of-range
/// confidences are rejected.
inline Document parse_document(const nlohmann::json& j) {
  using detail::require;
  Document doc;
  if (!j.is_object()) throw SchemaError("$", "expected object");
  if (auto it = j.find("id"); it != j.end()) doc.id = detail::require_string(*it, "id");

  const auto& image = require(j, "image", "$");
  const long long width = detail::require_int(require(image, "width", "image"), "image.width");
  const long long height = detail::require_int(require(image, "height", "image"), "image.height");
  if (width <= 0) throw SchemaError("image.width", "must be positive");
  if (height <= 0) throw SchemaError("image.height", "must be positive");
  doc.width = static_cast<double>(width);
  doc.height = static_cast<double>(height);

  const auto& spans = require(j, "spans", "$");
  if (!spans.is_array()) throw SchemaError("spans", "expected array");
  std::set<long long> seen;
  for (std::size_t i = 0; i < spans.size(); ++i) {
    const std::string path = "spans[" + std::to_string(i) + "]";
    const auto& s = spans[i];
    TextSpan span;
    span.id = detail::require_int(require(s, "id", path), path + ".id");
    if (!seen.insert(span.id).second) throw SchemaError(path + ".id", "duplicate span id " + std::to_string(span.id));
    span.text = detail::require_string(require(s, "text", path), path + ".text");
    BBox raw = detail::parse_bbox(require(s, "bbox", path), path + ".bbox");
    if (raw.w <= 0) throw SchemaError(path + ".bbox", "width must be positive");
    if (raw.h <= 0) throw SchemaError(path + ".bbox", "height must be positive");
    auto clamped = detail::clamp_bbox(raw, doc.width, doc.height);
    if (!clamped) throw SchemaError(path + ".bbox", "box lies outside the image");
    if (!(*clamped == raw)) {
      doc.warnings.push_back(path + ".bbox clamped from " + detail::format_bbox(raw) + " to " +
                             detail::format_bbox(*clamped));
    }
    span.bbox = *clamped;
    span.ocr_conf = detail::require_number(require(s, "conf", path), path + ".conf");
    if (span.ocr_conf < 0.0 || span.ocr_conf > 1.0) throw SchemaError(path + ".conf", "must lie in [0, 1]");
    doc.spans.push_back(std::move(span));
  }

  const auto& questions = require(j, "questions", "$");
  if (!questions.is_array()) throw SchemaError("questions", "expected array");
  std::set<long long> seen_q;
  for (std::size_t i = 0; i < questions.size(); ++i) {
    const std::string path = "questions[" + std::to_string(i) + "]";
    const auto& q = questions[i];
    Question question;
    question.id = detail::require_int(require(q, "id", path), path + ".id");
    if (!seen_q.insert(question.id).second) throw SchemaError(path + ".id", "duplicate question id");
    question.text = detail::require_string(require(q, "text", path), path + ".text");
    if (auto it = q.find("answer"); it != q.end() && !it->is_null()) {
      question.answer = detail::require_string(*it, path + ".answer");
    }
    if (auto it = q.find("answer_bbox"); it != q.end() && !it->is_null()) {
      BBox raw = detail::parse_bbox(*it, path + ".answer_bbox");
      if (raw.w < 0 || raw.h < 0) throw SchemaError(path + ".answer_bbox", "negative size");
      auto clamped = detail::clamp_bbox(raw, doc.width, doc.height);
      question.answer_bbox = clamped.value_or(BBox{});
      if (!clamped || !(*clamped == raw)) {
        doc.warnings.push_back(path + ".answer_bbox clamped from " + detail::format_bbox(raw));
      }
    }
    doc.questions.push_back(std::move(question));
  }
  return doc;
}

inline Document parse_document(std::string_view text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw SchemaError("$", std::string("malformed JSON: ") + e.what());
  }
  return parse_document(j);
}

inline Document parse_document(const std::string& text) { return parse_document(std::string_view(text)); }
inline Document parse_document(const char* text) { return parse_document(std::string_view(text)); }

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw KeyedError(path.string(), "cannot open file");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::filesystem::path& path, std::string_view content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw KeyedError(path.string(), "cannot write file");
  out.write(content.data(), static_cast<std::streamsize>(content.size()));
}

inline Document load_document(const std::filesystem::path& path) {
  Document doc = parse_document(read_file(path));
  if (doc.id.empty()) doc.id = path.stem().string();
  return doc;
}

inline nlohmann::json bbox_to_json(const BBox& b) { return nlohmann::json::array({b.x, b.y, b.w, b.h}); }

inline nlohmann::json to_json(const Document& doc) {
  nlohmann::json j;
  if (!doc.id.empty()) j["id"] = doc.id;
  j["image"] = {{"width", static_cast<long long>(doc.width)}, {"height", static_cast<long long>(doc.height)}};
  j["spans"] = nlohmann::json::array();
  for (const auto& s : doc.spans) {
    j["spans"].push_back({{"id", s.id}, {"text", s.text}, {"bbox", bbox_to_json(s.bbox)}, {"conf", s.ocr_conf}});
  }
  j["questions"] = nlohmann::json::array();
  for (const auto& q : doc.questions) {
    nlohmann::json jq{{"id", q.id}, {"text", q.text}};
    if (q.answer) jq["answer"] = *q.answer;
    if (q.answer_bbox) jq["answer_bbox"] = bbox_to_json(*q.answer_bbox);
    j["questions"].push_back(std::move(jq));
  }
  return j;
}

inline std::string serialize_document(const Document& doc) { return to_json(doc).dump(2); }

// ---------------------------------------------------------------------------
// Synthetic embeddings

/// Function words dropped before hashing, so templated question phrasing does
/// not dominate the bag-of-words vector.
inline bool is_stopword(std::string_view w) {
  static const std::set<std::string, std::less<>> kStop = {
      "a", "an", "the", "what", "is", "are", "of", "on", "in", "this", "that", "for",
      "to", "which", "value", "written", "shown", "field", "please", "tell", "me", "here",
      "listed", "at", "from", "next", "page", "document", "form"};
  return kStop.contains(w);
}

/// Lower-cased ASCII alphanumeric runs, minus stopwords. Non-ASCII bytes are kept
/// inside tokens so non-Latin text still hashes by word.
inline std::vector<std::string> embedding_tokens(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  auto flush = [&] {
    if (!cur.empty() && !is_stopword(cur)) out.push_back(cur);
    cur.clear();
  };
  for (unsigned char c : text) {
    if (std::isalnum(c) || c >= 0x80) {
      cur.push_back(static_cast<char>(std::tolower(c)));
    } else {
      flush();
    }
  }
  flush();
  return out;
}

/// Deterministic unit-norm bag-of-words vector: each token maps to a seeded
/// Gaussian vector, the vectors are summed and normalized. Text with no tokens
/// hashes as a whole string.
inline Vector synthetic_embed(std::string_view text, std::size_t d, std::uint64_t seed) {
  if (d < 2) throw InvalidArgument("synthetic_embed: d must be >= 2");
  auto tokens = embedding_tokens(text);
  if (tokens.empty()) tokens.emplace_back("\x01raw:" + std::string(text));
  Vector v(d, 0.0);
  for (const auto& t : tokens) {
    Rng rng(splitmix64(fnv1a64(t) ^ splitmix64(seed)));
    for (double& x : v) x += rng.normal();
  }
  const double n = norm(v);
  for (double& x : v) x /= n;
  return v;
}

// ---------------------------------------------------------------------------
// Embedding tables and the MGAV binary format

class EmbeddingTable {
 public:
  EmbeddingTable() = default;
  explicit EmbeddingTable(std::size_t dim) : dim_(dim) {}

  std::size_t dim() const noexcept { return dim_; }
  std::size_t size() const noexcept { return entries_.size(); }
  bool contains(const std::string& key) const { return entries_.contains(key); }

  void insert(std::string key, Vector v) {
    if (v.size() != dim_) throw InvalidArgument("EmbeddingTable: vector dim " + std::to_string(v.size()) + " != " + std::to_string(dim_));
    if (!all_finite(v)) throw InvalidArgument("EmbeddingTable: non-finite value for key " + key);
    entries_.insert_or_assign(std::move(key), std::move(v));
  }

  const Vector& at(const std::string& key) const {
    auto it = entries_.find(key);
    if (it == entries_.end()) throw KeyedError(key, "missing embedding");
    return it->second;
  }
  const Vector* find(const std::string& key) const {
    auto it = entries_.find(key);
    return it == entries_.end() ? nullptr : &it->second;
  }

  const std::map<std::string, Vector>& entries() const noexcept { return entries_; }

  friend bool operator==(const EmbeddingTable&, const EmbeddingTable&) = default;

 private:
  std::size_t dim_ = 0;
  std::map<std::string, Vector> entries_;
};

inline std::string span_key(long long span_id) { return std::to_string(span_id); }
inline std::string question_key(long long question_id) { return "question:" + std::to_string(question_id); }
inline std::string visual_key(std::size_t patch_index) { return "vis:" + std::to_string(patch_index); }

inline constexpr std::array<unsigned char, 4> kEmbeddingMagic = {0x4D, 0x47, 0x41, 0x56};  // "MGAV"
inline constexpr std::uint32_t kEmbeddingVersion = 1;

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}
inline void put_u16(std::string& out, std::uint16_t v) {
  out.push_back(static_cast<char>(v & 0xFF));
  out.push_back(static_cast<char>((v >> 8) & 0xFF));
}

class ByteReader {
 public:
  explicit ByteReader(std::span<const unsigned char> bytes) : bytes_(bytes) {}

  std::size_t offset() const noexcept { return pos_; }
  std::size_t remaining() const noexcept { return bytes_.size() - pos_; }

  void need(std::size_t n, const char* what) const {
    if (remaining() < n) {
      throw FormatError(pos_, std::string("truncated ") + what + ": need " + std::to_string(n) +
                                  " bytes, have " + std::to_string(remaining()));
    }
  }
  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }
  std::uint16_t u16(const char* what) {
    need(2, what);
    const auto v = static_cast<std::uint16_t>(bytes_[pos_] | (bytes_[pos_ + 1] << 8));
    pos_ += 2;
    return v;
  }
  float f32(const char* what) { return std::bit_cast<float>(u32(what)); }
  std::string str(std::size_t n, const char* what) {
    need(n, what);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }

 private:
  std::span<const unsigned char> bytes_;
  std::size_t pos_ = 0;
};

}  // namespace detail

/// Parse the MGAV format: magic "MGAV", u32 version, u32 dim, u32 count, then
/// `count` records of {u16 key length, key bytes, dim × f32}. Little-endian.
/// When `expected_dim` is given a header dim mismatch is a format error.
inline EmbeddingTable load_embedding_file(std::span<const unsigned char> bytes,
                                          std::optional<std::size_t> expected_dim = std::nullopt) {
  detail::ByteReader r(bytes);
  r.need(4, "magic");
  if (!std::equal(kEmbeddingMagic.begin(), kEmbeddingMagic.end(), bytes.begin())) {
    throw FormatError(0, "bad magic (expected MGAV)");
  }
  r.str(4, "magic");
  const std::size_t version_at = r.offset();
  const auto version = r.u32("version");
  if (version != kEmbeddingVersion) throw FormatError(version_at, "unsupported version " + std::to_string(version));
  const std::size_t dim_at = r.offset();
  const auto dim = r.u32("dim");
  if (dim == 0) throw FormatError(dim_at, "dim must be positive");
  if (expected_dim && *expected_dim != dim) {
    throw FormatError(dim_at, "dim mismatch: file has " + std::to_string(dim) + ", expected " +
                                  std::to_string(*expected_dim));
  }
  const auto count = r.u32("count");
  EmbeddingTable table(dim);
  for (std::uint32_t rec = 0; rec < count; ++rec) {
    const std::size_t rec_at = r.offset();
    const auto key_len = r.u16("key length");
    std::string key = r.str(key_len, "key");
    r.need(static_cast<std::size_t>(dim) * 4, "vector payload");
    Vector v(dim);
    for (auto& x : v) {
      const std::size_t at = r.offset();
      const float f = r.f32("vector payload");
      if (!std::isfinite(f)) throw FormatError(at, "non-finite value for key " + key);
      x = static_cast<double>(f);
    }
    if (table.contains(key)) throw FormatError(rec_at, "duplicate key " + key);
    table.insert(std::move(key), std::move(v));
  }
  if (r.remaining() != 0) throw FormatError(r.offset(), "trailing bytes after last record");
  return table;
}

inline EmbeddingTable load_embedding_file(std::string_view bytes, std::optional<std::size_t> expected_dim = std::nullopt) {
  return load_embedding_file(
      std::span<const unsigned char>(reinterpret_cast<const unsigned char*>(bytes.data()), bytes.size()),
      expected_dim);
}

inline EmbeddingTable read_embedding_file(const std::filesystem::path& path,
                                          std::optional<std::size_t> expected_dim = std::nullopt) {
  return load_embedding_file(read_file(path), expected_dim);
}

/// Serialize to the MGAV format. Values are narrowed to float32; keys are
/// written in sorted order.
inline std::string write_embedding_file(const EmbeddingTable& table) {
  std::string out;
  out.append(reinterpret_cast<const char*>(kEmbeddingMagic.data()), kEmbeddingMagic.size());
  detail::put_u32(out, kEmbeddingVersion);
  detail::put_u32(out, static_cast<std::uint32_t>(table.dim()));
  detail::put_u32(out, static_cast<std::uint32_t>(table.size()));
  for (const auto& [key, v] : table.entries()) {
    if (key.size() > 0xFFFF) throw InvalidArgument("embedding key longer than 65535 bytes");
    detail::put_u16(out, static_cast<std::uint16_t>(key.size()));
    out += key;
    for (double x : v) detail::put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(x)));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Multi-scale patches

struct PatchRect {
  double x = 0, y = 0, w = 0, h = 0;
  int scale = 0;

  friend bool operator==(const PatchRect&, const PatchRect&) = default;
};

inline constexpr std::array<int, 3> kPatchScales = {224, 448, 896};

namespace detail {

/// Top-left offsets for windows of `size` over `extent` with stride size/2,
/// the trailing window snapped to the far edge.
inline std::vector<double> window_offsets(double extent, int size) {
  std::vector<double> out;
  const double stride = size / 2.0;
  double pos = 0.0;
  for (; pos + size <= extent; pos += stride) out.push_back(pos);
  if (out.empty() || out.back() + size < extent) out.push_back(extent - size);
  return out;
}

}  // namespace detail

/// Overlapping patch grid at 224/448/896 px with 50% overlap, scale-major then
/// row-major. A scale larger than the shorter image side contributes a single
/// full-image patch.
inline std::vector<PatchRect> multiscale_patches(double width, double height) {
  if (!(width > 0) || !(height > 0)) throw InvalidArgument("multiscale_patches: non-positive image size");
  std::vector<PatchRect> out;
  for (int s : kPatchScales) {
    if (s > std::min(width, height)) {
      out.push_back({0, 0, width, height, s});
      continue;
    }
    const auto ys = detail::window_offsets(height, s);
    const auto xs = detail::window_offsets(width, s);
    for (double y : ys)
      for (double x : xs) out.push_back({x, y, static_cast<double>(s), static_cast<double>(s), s});
  }
  return out;
}

}  // namespace ingest
}  // namespace mgavqa
