// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "grainrec/error.hpp"

namespace grainrec {

using RawItemId = std::int64_t;
using ItemIndex = std::uint32_t;

/// Longest cleaned sequence kept for training.
inline constexpr std::size_t kMaxSequenceLength = 20;
inline constexpr std::size_t kDefaultMinFrequency = 10;
/// The malformed-line rate is only judged once a file has this many lines.
inline constexpr std::size_t kMalformedRateMinLines = 20;

/// One guest session as read from the log.
struct SessionRecord {
  std::string session_id;
  std::vector<RawItemId> items;
  std::vector<std::string> categories;   // empty or parallel to items
  std::vector<std::int64_t> timestamps;  // empty or parallel to items
};

/// (prefix, next item) training pair over dense indices.
struct TrainingSequence {
  std::vector<ItemIndex> inputs;
  ItemIndex target = 0;

  bool operator==(const TrainingSequence&) const = default;
};

struct ParseReport {
  std::size_t parsed = 0;
  std::size_t malformed = 0;
  std::size_t blank = 0;
};

namespace detail {

inline std::optional<SessionRecord> parse_session_line(const std::string& line) {
  nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
  if (j.is_discarded() || !j.is_object()) return std::nullopt;
  if (!j.contains("items") || !j["items"].is_array() || j["items"].empty()) return std::nullopt;
  SessionRecord rec;
  if (j.contains("sid")) {
    if (j["sid"].is_string()) {
      rec.session_id = j["sid"].get<std::string>();
    } else if (j["sid"].is_number_integer()) {
      rec.session_id = std::to_string(j["sid"].get<std::int64_t>());
    } else {
      return std::nullopt;
    }
  }
  for (const auto& it : j["items"]) {
    if (!it.is_number_integer()) return std::nullopt;
    rec.items.push_back(it.get<RawItemId>());
  }
  if (j.contains("cats") && !j["cats"].is_null()) {
    if (!j["cats"].is_array() || j["cats"].size() != rec.items.size()) return std::nullopt;
    for (const auto& c : j["cats"]) {
      if (c.is_string()) {
        rec.categories.push_back(c.get<std::string>());
      } else if (c.is_number_integer()) {
        rec.categories.push_back(std::to_string(c.get<std::int64_t>()));
      } else {
        return std::nullopt;
      }
    }
  }
  if (j.contains("ts") && !j["ts"].is_null()) {
    if (!j["ts"].is_array() || j["ts"].size() != rec.items.size()) return std::nullopt;
    for (const auto& ts : j["ts"]) {
      if (!ts.is_number_integer()) return std::nullopt;
      rec.timestamps.push_back(ts.get<std::int64_t>());
    }
    // Stable sort by timestamp keeps the logged order for equal times.
    std::vector<std::size_t> order(rec.items.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return rec.timestamps[a] < rec.timestamps[b]; });
    SessionRecord sorted;
    sorted.session_id = rec.session_id;
    for (std::size_t i : order) {
      sorted.items.push_back(rec.items[i]);
      sorted.timestamps.push_back(rec.timestamps[i]);
      if (!rec.categories.empty()) sorted.categories.push_back(rec.categories[i]);
    }
    rec = std::move(sorted);
  }
  return rec;
}

}  // namespace detail

/// Streams JSON-lines session records to `sink` in file order. Malformed lines
/// are skipped and counted; more than 10% malformed is a corpus error once the
/// file has at least kMalformedRateMinLines non-blank lines.
inline ParseReport for_each_session(std::istream& in,
                                    const std::function<void(SessionRecord&&)>& sink) {
  ParseReport report;
  std::string line;
  while (std::getline(in, line)) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) {
      ++report.blank;
      continue;
    }
    auto rec = detail::parse_session_line(line);
    if (!rec) {
      ++report.malformed;
      continue;
    }
    ++report.parsed;
    sink(std::move(*rec));
  }
  const std::size_t total = report.parsed + report.malformed;
  if (total >= kMalformedRateMinLines && report.malformed * 10 > total) {
    throw CorpusError("corpus has " + std::to_string(report.malformed) + " malformed lines out of " +
                      std::to_string(total) + " (more than 10%)");
  }
  return report;
}

struct ParsedCorpus {
  std::vector<SessionRecord> sessions;
  ParseReport report;
};

inline ParsedCorpus parse_sessions(std::istream& in) {
  ParsedCorpus corpus;
  corpus.report = for_each_session(in, [&](SessionRecord&& r) { corpus.sessions.push_back(std::move(r)); });
  return corpus;
}

inline ParsedCorpus parse_sessions(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read session file " + path.string());
  return parse_sessions(in);
}

/// Dense item catalog: raw id <-> index, per-index category and count.
/// Indices follow descending count, ties by ascending raw id.
class Vocabulary {
 public:
  Vocabulary() = default;

  /// Builds from raw entries already in index order.
  Vocabulary(std::vector<RawItemId> raw_ids, std::vector<std::string> categories,
             std::vector<std::uint64_t> counts)
      : raw_(std::move(raw_ids)), category_(std::move(categories)), count_(std::move(counts)) {
    if (category_.size() != raw_.size() || count_.size() != raw_.size()) {
      throw CorpusError("vocabulary columns have different lengths");
    }
    for (std::size_t i = 0; i < raw_.size(); ++i) {
      if (!index_.emplace(raw_[i], static_cast<ItemIndex>(i)).second) {
        throw CorpusError("duplicate raw item id " + std::to_string(raw_[i]) + " in vocabulary");
      }
    }
  }

  std::size_t size() const noexcept { return raw_.size(); }
  bool empty() const noexcept { return raw_.empty(); }

  std::optional<ItemIndex> find(RawItemId raw) const {
    auto it = index_.find(raw);
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }
  bool contains(RawItemId raw) const { return index_.count(raw) != 0; }

  RawItemId raw_id(ItemIndex idx) const { return raw_.at(idx); }
  const std::string& category(ItemIndex idx) const { return category_.at(idx); }
  std::uint64_t count(ItemIndex idx) const { return count_.at(idx); }

  const std::vector<RawItemId>& raw_ids() const noexcept { return raw_; }
  const std::vector<std::string>& categories() const noexcept { return category_; }
  const std::vector<std::uint64_t>& counts() const noexcept { return count_; }

  /// FNV-1a over (raw id, category, count) in index order; identifies the
  /// catalog a model and neighbor matrix were built against.
  std::uint64_t hash() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    auto mix = [&h](const void* p, std::size_t n) {
      const auto* b = static_cast<const unsigned char*>(p);
      for (std::size_t i = 0; i < n; ++i) {
        h ^= b[i];
        h *= 0x100000001b3ULL;
      }
    };
    for (std::size_t i = 0; i < raw_.size(); ++i) {
      const std::int64_t r = raw_[i];
      const std::uint64_t c = count_[i];
      unsigned char buf[16];
      for (int k = 0; k < 8; ++k) {
        buf[k] = static_cast<unsigned char>((static_cast<std::uint64_t>(r) >> (8 * k)) & 0xff);
        buf[8 + k] = static_cast<unsigned char>((c >> (8 * k)) & 0xff);
      }
      mix(buf, sizeof buf);
      const std::uint64_t len = category_[i].size();
      unsigned char lb[8];
      for (int k = 0; k < 8; ++k) lb[k] = static_cast<unsigned char>((len >> (8 * k)) & 0xff);
      mix(lb, sizeof lb);
      mix(category_[i].data(), category_[i].size());
    }
    return h;
  }

  /// Tab-separated: raw_id, count, category; one line per index.
  void write_tsv(std::ostream& out) const {
    for (std::size_t i = 0; i < raw_.size(); ++i) {
      out << raw_[i] << '\t' << count_[i] << '\t' << category_[i] << '\n';
    }
  }

  static Vocabulary read_tsv(std::istream& in) {
    std::vector<RawItemId> raw;
    std::vector<std::string> cat;
    std::vector<std::uint64_t> cnt;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (line.empty()) continue;
      const auto t1 = line.find('\t');
      const auto t2 = t1 == std::string::npos ? std::string::npos : line.find('\t', t1 + 1);
      if (t2 == std::string::npos) {
        throw CorpusError("vocabulary line " + std::to_string(lineno) + " is not raw_id<TAB>count<TAB>category");
      }
      try {
        std::size_t used = 0;
        raw.push_back(std::stoll(line.substr(0, t1), &used));
        if (used != t1) throw std::invalid_argument("raw id");
        const std::string cs = line.substr(t1 + 1, t2 - t1 - 1);
        cnt.push_back(std::stoull(cs, &used));
        if (used != cs.size()) throw std::invalid_argument("count");
      } catch (const std::exception&) {
        throw CorpusError("vocabulary line " + std::to_string(lineno) + " has a non-numeric field");
      }
      std::string c = line.substr(t2 + 1);
      if (!c.empty() && c.back() == '\r') c.pop_back();
      cat.push_back(std::move(c));
    }
    return Vocabulary(std::move(raw), std::move(cat), std::move(cnt));
  }

 private:
  std::vector<RawItemId> raw_;
  std::vector<std::string> category_;
  std::vector<std::uint64_t> count_;
  std::unordered_map<RawItemId, ItemIndex> index_;
};

/// Counts raw occurrences (before any cleaning) and keeps items seen at least
/// `min_frequency` times. An item's category is its most frequent label,
/// ties to the lexicographically smallest.
inline Vocabulary build_vocabulary(const std::vector<SessionRecord>& sessions,
                                   std::size_t min_frequency = kDefaultMinFrequency) {
  if (sessions.empty()) throw CorpusError("cannot build a vocabulary from zero sessions");
  std::unordered_map<RawItemId, std::uint64_t> counts;
  std::unordered_map<RawItemId, std::map<std::string, std::uint64_t>> cats;
  for (const auto& s : sessions) {
    for (std::size_t i = 0; i < s.items.size(); ++i) {
      ++counts[s.items[i]];
      if (!s.categories.empty()) ++cats[s.items[i]][s.categories[i]];
    }
  }
  std::vector<std::pair<RawItemId, std::uint64_t>> kept;
  for (const auto& [id, c] : counts)
    if (c >= min_frequency) kept.emplace_back(id, c);
  if (kept.empty()) {
    throw CorpusError("no item reaches min_frequency " + std::to_string(min_frequency));
  }
  std::sort(kept.begin(), kept.end(), [](const auto& a, const auto& b) {
    return a.second != b.second ? a.second > b.second : a.first < b.first;
  });
  std::vector<RawItemId> raw;
  std::vector<std::string> category;
  std::vector<std::uint64_t> cnt;
  for (const auto& [id, c] : kept) {
    raw.push_back(id);
    cnt.push_back(c);
    std::string best;
    std::uint64_t best_n = 0;
    if (auto it = cats.find(id); it != cats.end()) {
      for (const auto& [label, n] : it->second)
        if (n > best_n) {
          best = label;
          best_n = n;
        }
    }
    category.push_back(best);
  }
  return Vocabulary(std::move(raw), std::move(category), std::move(cnt));
}

/// Collapses runs of equal adjacent indices to one occurrence.
inline std::vector<ItemIndex> collapse_consecutive(const std::vector<ItemIndex>& seq) {
  std::vector<ItemIndex> out;
  out.reserve(seq.size());
  for (ItemIndex v : seq)
    if (out.empty() || out.back() != v) out.push_back(v);
  return out;
}

/// Maps a record to dense indices for training: drops out-of-vocabulary items,
/// drops items whose category differs from the last surviving item's category
/// (only when the record carries categories), collapses consecutive
/// duplicates and keeps the most recent kMaxSequenceLength items.
inline std::vector<ItemIndex> clean_sequence(const SessionRecord& record, const Vocabulary& vocab,
                                             std::size_t max_length = kMaxSequenceLength) {
  std::vector<ItemIndex> idx;
  std::vector<const std::string*> cat;
  const bool has_cats = !record.categories.empty();
  for (std::size_t i = 0; i < record.items.size(); ++i) {
    if (auto d = vocab.find(record.items[i])) {
      idx.push_back(*d);
      if (has_cats) cat.push_back(&record.categories[i]);
    }
  }
  if (has_cats && !idx.empty()) {
    const std::string last = *cat.back();
    std::vector<ItemIndex> same;
    for (std::size_t i = 0; i < idx.size(); ++i)
      if (*cat[i] == last) same.push_back(idx[i]);
    idx = std::move(same);
  }
  auto out = collapse_consecutive(idx);
  if (out.size() > max_length) out.erase(out.begin(), out.end() - static_cast<std::ptrdiff_t>(max_length));
  return out;
}

/// Length L >= 2 yields L-1 pairs (seq[0..k), seq[k]) for k = 1..L-1; shorter
/// sequences yield nothing.
inline std::vector<TrainingSequence> augment_prefixes(const std::vector<ItemIndex>& seq) {
  std::vector<TrainingSequence> out;
  if (seq.size() < 2) return out;
  out.reserve(seq.size() - 1);
  for (std::size_t k = 1; k < seq.size(); ++k) {
    TrainingSequence ts;
    ts.inputs.assign(seq.begin(), seq.begin() + static_cast<std::ptrdiff_t>(k));
    ts.target = seq[k];
    out.push_back(std::move(ts));
  }
  return out;
}

/// Train/validation pairs plus bookkeeping from preparing one corpus.
struct PreparedData {
  Vocabulary vocab;
  std::vector<TrainingSequence> train;
  std::vector<TrainingSequence> valid;
  std::size_t short_sequences = 0;  // cleaned length < 2, skipped
  std::size_t cleaned_sequences = 0;
};

/// Cleans every session, holds out the last `valid_fraction` of cleaned
/// sequences (by corpus position) and augments both parts with prefixes.
inline PreparedData prepare_corpus(const std::vector<SessionRecord>& sessions,
                                   std::size_t min_frequency = kDefaultMinFrequency,
                                   double valid_fraction = 0.1) {
  PreparedData data;
  data.vocab = build_vocabulary(sessions, min_frequency);
  std::vector<std::vector<ItemIndex>> cleaned;
  for (const auto& s : sessions) {
    auto seq = clean_sequence(s, data.vocab);
    if (seq.size() < 2) {
      ++data.short_sequences;
      continue;
    }
    cleaned.push_back(std::move(seq));
  }
  data.cleaned_sequences = cleaned.size();
  const auto n_valid = static_cast<std::size_t>(static_cast<double>(cleaned.size()) * valid_fraction);
  const std::size_t split = cleaned.size() - n_valid;
  for (std::size_t i = 0; i < cleaned.size(); ++i) {
    auto pairs = augment_prefixes(cleaned[i]);
    auto& dst = i < split ? data.train : data.valid;
    dst.insert(dst.end(), std::make_move_iterator(pairs.begin()), std::make_move_iterator(pairs.end()));
  }
  return data;
}

// ---------------------------------------------------------------------------
// Binary training-set format: per record a little-endian u32 length, that many
// u32 input indices, then a u32 target.

namespace detail {

inline void put_u32(std::ostream& out, std::uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v & 0xff), static_cast<unsigned char>((v >> 8) & 0xff),
                              static_cast<unsigned char>((v >> 16) & 0xff),
                              static_cast<unsigned char>((v >> 24) & 0xff)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

inline bool get_u32(std::istream& in, std::uint32_t& v) {
  unsigned char b[4];
  if (!in.read(reinterpret_cast<char*>(b), 4)) return false;
  v = static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
      (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
  return true;
}

}  // namespace detail

inline void write_training_set(std::ostream& out, const std::vector<TrainingSequence>& data) {
  for (const auto& ts : data) {
    detail::put_u32(out, static_cast<std::uint32_t>(ts.inputs.size()));
    for (ItemIndex i : ts.inputs) detail::put_u32(out, i);
    detail::put_u32(out, ts.target);
  }
}

inline std::vector<TrainingSequence> read_training_set(std::istream& in) {
  std::vector<TrainingSequence> out;
  std::uint32_t len = 0;
  while (in.peek() != std::char_traits<char>::eof()) {
    if (!detail::get_u32(in, len)) throw CorpusError("truncated training record " + std::to_string(out.size()));
    if (len == 0 || len >= kMaxSequenceLength + 1) {
      throw CorpusError("training record " + std::to_string(out.size()) + " has invalid length " +
                        std::to_string(len));
    }
    TrainingSequence ts;
    ts.inputs.resize(len);
    for (auto& v : ts.inputs)
      if (!detail::get_u32(in, v)) throw CorpusError("truncated training record " + std::to_string(out.size()));
    if (!detail::get_u32(in, ts.target)) throw CorpusError("truncated training record " + std::to_string(out.size()));
    out.push_back(std::move(ts));
  }
  if (in.bad()) throw IoError("error reading training set");
  return out;
}

inline void write_training_set(const std::filesystem::path& path, const std::vector<TrainingSequence>& data) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  write_training_set(out, data);
}

inline std::vector<TrainingSequence> read_training_set(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  return read_training_set(in);
}

inline void write_vocabulary(const std::filesystem::path& path, const Vocabulary& vocab) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  vocab.write_tsv(out);
}

/// Writes train.bin, valid.bin, vocab.tsv and manifest.txt into `dir`.
inline void write_prepared(const std::filesystem::path& dir, const PreparedData& data) {
  std::filesystem::create_directories(dir);
  write_training_set(dir / "train.bin", data.train);
  write_training_set(dir / "valid.bin", data.valid);
  write_vocabulary(dir / "vocab.tsv", data.vocab);
  std::ofstream m(dir / "manifest.txt");
  if (!m) throw IoError("cannot write " + (dir / "manifest.txt").string());
  m << "format=grainrec-dataset\n"
    << "version=1\n"
    << "items=" << data.vocab.size() << '\n'
    << "vocab_hash=" << data.vocab.hash() << '\n'
    << "train_pairs=" << data.train.size() << '\n'
    << "valid_pairs=" << data.valid.size() << '\n'
    << "cleaned_sequences=" << data.cleaned_sequences << '\n'
    << "short_sequences=" << data.short_sequences << '\n';
}

inline Vocabulary read_vocabulary(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read " + path.string());
  return Vocabulary::read_tsv(in);
}

}  // namespace grainrec
