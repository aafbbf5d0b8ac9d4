#pragma once

#include <array>
#include <cstdint>
#include <fstream>
#include <iostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "dbean/rng.hpp"

namespace dbean {

inline constexpr std::size_t kNumClasses = 4;
inline constexpr std::array<const char*, kNumClasses> kClassNames = {
    "World", "Sports", "Business", "Sci/Tech"};

struct AgNewsRecord {
  std::int32_t label = 0;  // 0 World, 1 Sports, 2 Business, 3 Sci/Tech
  std::string title;
  std::string description;

  std::string text() const { return title + " " + description; }
};

namespace detail {

// One CSV record of the form "label","title","description" with doubled-quote
// escaping. Returns false on blank lines.
inline bool parse_csv_row(const std::string& line, std::size_t row_no,
                          std::vector<std::string>& fields) {
  fields.clear();
  if (line.empty()) return false;
  std::string cur;
  bool in_quotes = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (in_quotes) {
      if (c == '"') {
        if (i + 1 < line.size() && line[i + 1] == '"') {
          cur.push_back('"');
          ++i;
        } else {
          in_quotes = false;
        }
      } else {
        cur.push_back(c);
      }
    } else {
      if (c == '"') {
        in_quotes = true;
      } else if (c == ',') {
        fields.push_back(cur);
        cur.clear();
      } else if (c == '\r') {
        // tolerate CRLF
      } else {
        cur.push_back(c);
      }
    }
  }
  if (in_quotes) {
    throw std::runtime_error("malformed quoting at row " +
                             std::to_string(row_no));
  }
  fields.push_back(cur);
  return true;
}

}  // namespace detail

// `strict` validates the official split sizes: 120,000 train / 7,600 test,
// balanced per class.
inline std::vector<AgNewsRecord> load_agnews_csv(const std::string& path,
                                                 bool strict = false) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open AG News csv: " + path);
  std::vector<AgNewsRecord> records;
  std::string line;
  std::size_t row_no = 0;
  std::vector<std::string> fields;
  std::array<std::size_t, kNumClasses> per_class{};
  while (std::getline(in, line)) {
    ++row_no;
    if (!detail::parse_csv_row(line, row_no, fields)) continue;
    if (fields.size() != 3) {
      throw std::runtime_error("expected 3 fields at row " +
                               std::to_string(row_no) + ", found " +
                               std::to_string(fields.size()));
    }
    int raw_label;
    try {
      raw_label = std::stoi(fields[0]);
    } catch (const std::exception&) {
      throw std::runtime_error("non-numeric label at row " +
                               std::to_string(row_no) + ": " + fields[0]);
    }
    if (raw_label < 1 || raw_label > 4) {
      throw std::runtime_error("label out of range 1..4 at row " +
                               std::to_string(row_no) + ": " + fields[0]);
    }
    AgNewsRecord rec;
    rec.label = raw_label - 1;
    rec.title = fields[1];
    rec.description = fields[2];
    ++per_class[static_cast<std::size_t>(rec.label)];
    records.push_back(std::move(rec));
  }
  if (strict) {
    const std::size_t n = records.size();
    const bool train_like = n == 120000, test_like = n == 7600;
    if (!train_like && !test_like) {
      throw std::runtime_error("strict: expected 120000 or 7600 records, found " +
                               std::to_string(n));
    }
    const std::size_t expect = train_like ? 30000 : 1900;
    for (std::size_t c = 0; c < kNumClasses; ++c) {
      if (per_class[c] != expect) {
        throw std::runtime_error("strict: class " + std::string(kClassNames[c]) +
                                 " has " + std::to_string(per_class[c]) +
                                 " records, expected " + std::to_string(expect));
      }
    }
  }
  return records;
}

// Seeded class-balanced subset, deterministic given (records, per_class, seed).
inline std::vector<AgNewsRecord> subsample(const std::vector<AgNewsRecord>& records,
                                           std::size_t per_class,
                                           std::uint64_t seed) {
  std::array<std::vector<std::size_t>, kNumClasses> by_class;
  for (std::size_t i = 0; i < records.size(); ++i) {
    by_class[static_cast<std::size_t>(records[i].label)].push_back(i);
  }
  Rng rng(seed);
  std::vector<AgNewsRecord> out;
  out.reserve(per_class * kNumClasses);
  for (std::size_t c = 0; c < kNumClasses; ++c) {
    if (by_class[c].size() < per_class) {
      throw std::runtime_error("subsample: class " + std::string(kClassNames[c]) +
                               " has only " + std::to_string(by_class[c].size()) +
                               " records, need " + std::to_string(per_class));
    }
    auto ids = by_class[c];
    rng.shuffle(ids);
    ids.resize(per_class);
    for (auto i : ids) out.push_back(records[i]);
  }
  return out;
}

struct ClassificationReport {
  double accuracy = 0.0;
  std::array<double, kNumClasses> per_class_accuracy{};
  std::array<std::array<std::size_t, kNumClasses>, kNumClasses> confusion{};
  std::size_t n_examples = 0;
  double wall_clock_seconds = 0.0;
  std::string config_fingerprint;

  void record(std::int32_t truth, std::int32_t predicted) {
    ++confusion[static_cast<std::size_t>(truth)][static_cast<std::size_t>(predicted)];
    ++n_examples;
  }

  void finalize() {
    std::size_t correct = 0;
    for (std::size_t c = 0; c < kNumClasses; ++c) {
      std::size_t row = 0;
      for (std::size_t j = 0; j < kNumClasses; ++j) row += confusion[c][j];
      per_class_accuracy[c] =
          row == 0 ? 0.0 : static_cast<double>(confusion[c][c]) / row;
      correct += confusion[c][c];
    }
    accuracy = n_examples == 0 ? 0.0
                               : static_cast<double>(correct) / n_examples;
  }
};

// FNV-1a 64; stable across platforms, unlike std::hash.
inline std::uint64_t fnv1a64(const std::string& s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

inline std::string config_fingerprint(const nlohmann::ordered_json& config) {
  std::ostringstream os;
  os << std::hex << fnv1a64(config.dump());
  return os.str();
}

inline nlohmann::ordered_json report_to_json(const ClassificationReport& r) {
  nlohmann::ordered_json j;
  j["accuracy"] = r.accuracy;
  j["per_class_accuracy"] = r.per_class_accuracy;
  j["confusion"] = r.confusion;
  j["n_examples"] = r.n_examples;
  j["wall_clock_seconds"] = r.wall_clock_seconds;
  j["config_fingerprint"] = r.config_fingerprint;
  return j;
}

inline void emit_report(const nlohmann::ordered_json& j, const std::string& path) {
  if (!path.empty()) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write report: " + path);
    out << j.dump(2) << "\n";
    if (!out) throw std::runtime_error("failed writing report: " + path);
  }
  if (j.contains("accuracy")) {
    std::cout << "accuracy " << j["accuracy"].get<double>();
    if (j.contains("n_examples"))
      std::cout << " over " << j["n_examples"].get<std::size_t>() << " examples";
    if (j.contains("config_fingerprint"))
      std::cout << " fingerprint " << j["config_fingerprint"].get<std::string>();
    std::cout << "\n";
  }
}

}  // namespace dbean
