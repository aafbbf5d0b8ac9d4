#pragma once

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "dbean/tensor.hpp"

namespace dbean {

inline constexpr const char* kPadToken = "<pad>";
inline constexpr const char* kUnkToken = "<unk>";
inline constexpr const char* kVocabMagic = "DBEAN-VOCAB-1";

// Strips <...> spans, lowercases, collapses whitespace. An unclosed '<' eats
// the rest of the string (documented, deterministic).
inline std::string clean_text(const std::string& raw) {
  std::string stripped;
  stripped.reserve(raw.size());
  bool in_tag = false;
  for (char c : raw) {
    if (in_tag) {
      if (c == '>') in_tag = false;
    } else if (c == '<') {
      in_tag = true;
      stripped.push_back(' ');  // tags separate words
    } else {
      stripped.push_back(c);
    }
  }
  std::string out;
  out.reserve(stripped.size());
  bool pending_space = false;
  for (char c : stripped) {
    unsigned char u = static_cast<unsigned char>(c);
    if (std::isspace(u)) {
      pending_space = !out.empty();
      continue;
    }
    if (pending_space) {
      out.push_back(' ');
      pending_space = false;
    }
    out.push_back(static_cast<char>(std::tolower(u)));
  }
  return out;
}

inline std::vector<std::string> split_whitespace(const std::string& s) {
  std::vector<std::string> words;
  std::istringstream is(s);
  std::string w;
  while (is >> w) words.push_back(w);
  return words;
}

// Splits a UTF-8 string into code-point substrings.
inline std::vector<std::string> utf8_chars(const std::string& s) {
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < s.size()) {
    unsigned char c = static_cast<unsigned char>(s[i]);
    std::size_t len = 1;
    if ((c & 0x80) == 0x00) len = 1;
    else if ((c & 0xE0) == 0xC0) len = 2;
    else if ((c & 0xF0) == 0xE0) len = 3;
    else if ((c & 0xF8) == 0xF0) len = 4;
    len = std::min(len, s.size() - i);
    out.push_back(s.substr(i, len));
    i += len;
  }
  return out;
}

struct Vocabulary {
  std::unordered_map<std::string, std::int32_t> token_to_id;
  std::vector<std::string> id_to_token;
  std::vector<std::pair<std::string, std::string>> merges;  // training order
  std::int32_t pad_id = 0;
  std::int32_t unk_id = 1;

  std::int32_t size() const { return static_cast<std::int32_t>(id_to_token.size()); }

  std::int32_t lookup(const std::string& tok) const {
    auto it = token_to_id.find(tok);
    return it == token_to_id.end() ? unk_id : it->second;
  }

  std::int32_t add(const std::string& tok) {
    auto it = token_to_id.find(tok);
    if (it != token_to_id.end()) return it->second;
    std::int32_t id = size();
    token_to_id.emplace(tok, id);
    id_to_token.push_back(tok);
    return id;
  }
};

namespace detail {

struct PairHash {
  std::size_t operator()(const std::pair<std::string, std::string>& p) const {
    std::hash<std::string> h;
    return h(p.first) * 1000003u ^ h(p.second);
  }
};

}  // namespace detail

// Standard BPE over whitespace words: repeatedly merge the most frequent
// adjacent symbol pair, ties broken lexicographically on the pair.
inline Vocabulary bpe_train(const std::vector<std::string>& corpus,
                            std::size_t num_merges) {
  using SymPair = std::pair<std::string, std::string>;

  std::unordered_map<std::string, std::int64_t> word_freq;
  for (const auto& doc : corpus) {
    for (auto& w : split_whitespace(doc)) ++word_freq[w];
  }

  // Unique words in first-occurrence-independent (sorted) order so the merge
  // bookkeeping below is deterministic.
  std::vector<std::string> words;
  words.reserve(word_freq.size());
  for (const auto& [w, _] : word_freq) words.push_back(w);
  std::sort(words.begin(), words.end());

  std::vector<std::vector<std::string>> syms(words.size());
  std::vector<std::int64_t> freqs(words.size());
  for (std::size_t i = 0; i < words.size(); ++i) {
    syms[i] = utf8_chars(words[i]);
    freqs[i] = word_freq[words[i]];
  }

  std::unordered_map<SymPair, std::int64_t, detail::PairHash> pair_count;
  std::unordered_map<SymPair, std::unordered_set<std::size_t>, detail::PairHash> pair_words;
  auto count_word = [&](std::size_t wi, std::int64_t sign) {
    const auto& s = syms[wi];
    for (std::size_t j = 0; j + 1 < s.size(); ++j) {
      SymPair p{s[j], s[j + 1]};
      pair_count[p] += sign * freqs[wi];
      if (sign > 0) pair_words[p].insert(wi);
    }
  };
  for (std::size_t i = 0; i < syms.size(); ++i) count_word(i, +1);

  Vocabulary vocab;
  vocab.pad_id = vocab.add(kPadToken);
  vocab.unk_id = vocab.add(kUnkToken);

  std::vector<std::string> base_chars;
  {
    std::unordered_set<std::string> seen;
    for (const auto& s : syms)
      for (const auto& c : s) seen.insert(c);
    base_chars.assign(seen.begin(), seen.end());
    std::sort(base_chars.begin(), base_chars.end());
  }
  for (const auto& c : base_chars) vocab.add(c);

  for (std::size_t m = 0; m < num_merges; ++m) {
    SymPair best;
    std::int64_t best_count = 0;
    for (const auto& [p, c] : pair_count) {
      if (c > best_count || (c == best_count && c > 0 && p < best)) {
        best = p;
        best_count = c;
      }
    }
    if (best_count <= 0) break;

    const std::string merged = best.first + best.second;
    auto affected = pair_words[best];  // copy; mutated below
    for (std::size_t wi : affected) {
      count_word(wi, -1);
      auto& s = syms[wi];
      std::vector<std::string> ns;
      ns.reserve(s.size());
      for (std::size_t j = 0; j < s.size(); ++j) {
        if (j + 1 < s.size() && s[j] == best.first && s[j + 1] == best.second) {
          ns.push_back(merged);
          ++j;
        } else {
          ns.push_back(s[j]);
        }
      }
      s = std::move(ns);
      count_word(wi, +1);
    }
    // drop exhausted pairs so the argmax scan stays tight
    for (auto it = pair_count.begin(); it != pair_count.end();) {
      it = it->second <= 0 ? pair_count.erase(it) : std::next(it);
    }
    vocab.merges.push_back(best);
    vocab.add(merged);
  }
  return vocab;
}

// Rank-based merge application: repeatedly merge the pair with the earliest
// training rank. Equivalent to replaying merges in training order.
class BpeEncoder {
 public:
  explicit BpeEncoder(const Vocabulary& vocab) : vocab_(vocab) {
    for (std::size_t i = 0; i < vocab.merges.size(); ++i)
      rank_[vocab.merges[i]] = i;
  }

  std::vector<std::int32_t> encode_word(const std::string& word) const {
    auto it = cache_.find(word);
    if (it != cache_.end()) return it->second;
    std::vector<std::string> s = utf8_chars(word);
    while (s.size() > 1) {
      std::size_t best_rank = SIZE_MAX, best_pos = 0;
      for (std::size_t j = 0; j + 1 < s.size(); ++j) {
        auto r = rank_.find({s[j], s[j + 1]});
        if (r != rank_.end() && r->second < best_rank) {
          best_rank = r->second;
          best_pos = j;
        }
      }
      if (best_rank == SIZE_MAX) break;
      s[best_pos] += s[best_pos + 1];
      s.erase(s.begin() + best_pos + 1);
    }
    std::vector<std::int32_t> ids;
    ids.reserve(s.size());
    for (const auto& sym : s) ids.push_back(vocab_.lookup(sym));
    cache_.emplace(word, ids);
    return ids;
  }

  std::vector<std::int32_t> encode(const std::string& cleaned_text) const {
    std::vector<std::int32_t> ids;
    for (const auto& w : split_whitespace(cleaned_text)) {
      auto wi = encode_word(w);
      ids.insert(ids.end(), wi.begin(), wi.end());
    }
    return ids;
  }

 private:
  const Vocabulary& vocab_;
  std::unordered_map<std::pair<std::string, std::string>, std::size_t, detail::PairHash> rank_;
  mutable std::unordered_map<std::string, std::vector<std::int32_t>> cache_;
};

inline std::vector<std::int32_t> bpe_encode(const std::string& text,
                                            const Vocabulary& vocab) {
  return BpeEncoder(vocab).encode(text);
}

inline std::string bpe_decode(const std::vector<std::int32_t>& ids,
                              const Vocabulary& vocab) {
  std::string out;
  for (auto id : ids) out += vocab.id_to_token.at(static_cast<std::size_t>(id));
  return out;
}

struct TokenizedExample {
  std::vector<std::int32_t> ids;   // length max_len, padded
  std::vector<std::uint8_t> mask;  // 1 iff position < true_len
  std::size_t true_len = 0;
  std::int32_t label = 0;
};

inline TokenizedExample pad_truncate(std::vector<std::int32_t> ids,
                                     std::int32_t label, std::int32_t pad_id,
                                     std::size_t max_len = 512) {
  TokenizedExample ex;
  ex.label = label;
  ex.true_len = std::min(ids.size(), max_len);
  ex.ids.assign(max_len, pad_id);
  ex.mask.assign(max_len, 0);
  for (std::size_t i = 0; i < ex.true_len; ++i) {
    ex.ids[i] = ids[i];
    ex.mask[i] = 1;
  }
  return ex;
}

inline void save_vocabulary(const Vocabulary& vocab, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write vocabulary: " + path);
  out << kVocabMagic << "\n";
  out << "tokens " << vocab.size() << "\n";
  for (std::int32_t i = 0; i < vocab.size(); ++i) {
    out << vocab.id_to_token[static_cast<std::size_t>(i)] << "\t" << i << "\n";
  }
  out << "merges " << vocab.merges.size() << "\n";
  for (const auto& [a, b] : vocab.merges) out << a << "\t" << b << "\n";
}

inline Vocabulary load_vocabulary(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read vocabulary: " + path);
  std::string line;
  std::getline(in, line);
  if (line != kVocabMagic) {
    throw std::runtime_error("bad vocabulary magic in " + path + ": " + line);
  }
  Vocabulary vocab;
  std::string word;
  std::size_t n = 0;
  in >> word >> n;
  std::getline(in, line);
  for (std::size_t i = 0; i < n; ++i) {
    std::getline(in, line);
    auto tab = line.find('\t');
    if (tab == std::string::npos) {
      throw std::runtime_error("malformed vocabulary line: " + line);
    }
    vocab.add(line.substr(0, tab));
  }
  in >> word >> n;
  std::getline(in, line);
  for (std::size_t i = 0; i < n; ++i) {
    std::getline(in, line);
    auto tab = line.find('\t');
    if (tab == std::string::npos) {
      throw std::runtime_error("malformed merges line: " + line);
    }
    vocab.merges.emplace_back(line.substr(0, tab), line.substr(tab + 1));
  }
  vocab.pad_id = vocab.lookup(kPadToken);
  vocab.unk_id = vocab.lookup(kUnkToken);
  return vocab;
}

// Word2vec text format: optional "count dim" header, then "token v1 .. v_dim"
// lines. Vocab tokens matched by surface string; misses get seeded uniform
// init in (-oov_scale, oov_scale).
template <typename S = float>
Tensor2D<S> load_word2vec_text(const std::string& path, const Vocabulary& vocab,
                               std::size_t embed_dim, std::uint64_t seed,
                               double oov_scale = 0.05) {
  Rng rng(seed);
  Tensor2D<S> emb(static_cast<std::size_t>(vocab.size()), embed_dim);
  for (auto& v : emb.data)
    v = static_cast<S>(rng.uniform(-oov_scale, oov_scale));

  if (path.empty()) return emb;
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read word2vec file: " + path);

  std::string line;
  std::size_t line_no = 0;
  bool first = true;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::istringstream is(line);
    if (first) {
      first = false;
      // header is "count dim" (two integers, no token)
      std::size_t cnt, dim;
      std::istringstream probe(line);
      std::string a, b, c;
      probe >> a >> b >> c;
      if (c.empty()) {
        std::istringstream hdr(line);
        if (hdr >> cnt >> dim) {
          if (dim != embed_dim) {
            throw std::runtime_error(
                "word2vec dimension mismatch: expected " +
                std::to_string(embed_dim) + ", found " + std::to_string(dim));
          }
          continue;
        }
      }
    }
    std::string token;
    if (!(is >> token)) continue;
    std::vector<double> vals;
    double v;
    while (is >> v) vals.push_back(v);
    if (vals.size() != embed_dim) {
      throw std::runtime_error("word2vec dimension mismatch at line " +
                               std::to_string(line_no) + ": expected " +
                               std::to_string(embed_dim) + ", found " +
                               std::to_string(vals.size()));
    }
    auto it = vocab.token_to_id.find(token);
    if (it == vocab.token_to_id.end()) continue;
    for (std::size_t j = 0; j < embed_dim; ++j) {
      emb.at(static_cast<std::size_t>(it->second), j) = static_cast<S>(vals[j]);
    }
  }
  return emb;
}

}  // namespace dbean
