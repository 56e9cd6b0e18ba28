#pragma once

// SPDX-License-Identifier: Apache-2.0

// Corpus ingestion: JSON Lines sequences and a TSV vocabulary.
//
//   vocab.tsv    id<TAB>token, one entry per line, ids 0..C-1
//   corpus.jsonl {"source": [ids or strings] | null, "target": [ids or strings]}

#include <fstream>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "necs/models.hpp"

namespace necs {

/// Malformed input data (corpus or vocabulary contents).
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class Vocabulary {
 public:
  Vocabulary() = default;
  explicit Vocabulary(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
    for (std::size_t i = 0; i < tokens_.size(); ++i) {
      if (!ids_.emplace(tokens_[i], static_cast<TokenId>(i)).second) {
        throw DataError("duplicate vocabulary token '" + tokens_[i] + "'");
      }
    }
  }

  std::size_t size() const noexcept { return tokens_.size(); }
  const std::string& token(TokenId id) const { return tokens_.at(id); }
  std::optional<TokenId> find(const std::string& tok) const {
    auto it = ids_.find(tok);
    if (it == ids_.end()) return std::nullopt;
    return it->second;
  }
  const std::vector<std::string>& tokens() const noexcept { return tokens_; }

  static Vocabulary load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open vocabulary '" + path + "'");
    std::vector<std::pair<long long, std::string>> rows;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (line.empty()) continue;
      const auto tab = line.find('\t');
      if (tab == std::string::npos) throw DataError(path + ":" + std::to_string(lineno) + ": expected id<TAB>token");
      long long id = -1;
      try {
        std::size_t used = 0;
        id = std::stoll(line.substr(0, tab), &used);
        if (used != tab) throw std::invalid_argument("trailing characters");
      } catch (const std::exception&) {
        throw DataError(path + ":" + std::to_string(lineno) + ": bad token id");
      }
      rows.emplace_back(id, line.substr(tab + 1));
    }
    std::vector<std::string> tokens(rows.size());
    std::vector<bool> seen(rows.size(), false);
    for (auto& [id, tok] : rows) {
      if (id < 0 || static_cast<std::size_t>(id) >= rows.size() || seen[static_cast<std::size_t>(id)]) {
        throw DataError(path + ": ids must be a permutation of 0.." + std::to_string(rows.size() - 1));
      }
      seen[static_cast<std::size_t>(id)] = true;
      tokens[static_cast<std::size_t>(id)] = std::move(tok);
    }
    if (tokens.empty()) throw DataError(path + ": empty vocabulary");
    return Vocabulary(std::move(tokens));
  }

  void save(const std::string& path) const {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open '" + path + "' for writing");
    for (std::size_t i = 0; i < tokens_.size(); ++i) out << i << '\t' << tokens_[i] << '\n';
  }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> ids_;
};

namespace detail {

inline std::vector<TokenId> parse_tokens(const nlohmann::json& arr, const Vocabulary& vocab, const std::string& where) {
  if (!arr.is_array()) throw DataError(where + ": expected an array of tokens");
  std::vector<TokenId> out;
  out.reserve(arr.size());
  for (const auto& v : arr) {
    if (v.is_number_unsigned() || (v.is_number_integer() && v.get<long long>() >= 0)) {
      const auto id = v.get<unsigned long long>();
      if (id >= vocab.size()) throw DataError(where + ": token id " + std::to_string(id) + " outside vocabulary");
      out.push_back(static_cast<TokenId>(id));
    } else if (v.is_string()) {
      auto id = vocab.find(v.get<std::string>());
      if (!id) throw DataError(where + ": unknown token '" + v.get<std::string>() + "'");
      out.push_back(*id);
    } else {
      throw DataError(where + ": tokens must be non-negative ids or strings");
    }
  }
  return out;
}

}  // namespace detail

inline std::vector<Sequence> parse_corpus(std::istream& in, const Vocabulary& vocab, const std::string& name) {
  std::vector<Sequence> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = name + ":" + std::to_string(lineno);
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw DataError(where + ": invalid JSON (" + e.what() + ")");
    }
    if (!j.is_object() || !j.contains("target")) throw DataError(where + ": expected an object with a \"target\" field");
    Sequence s;
    s.target = detail::parse_tokens(j.at("target"), vocab, where);
    if (j.contains("source") && !j.at("source").is_null()) s.source = detail::parse_tokens(j.at("source"), vocab, where);
    out.push_back(std::move(s));
  }
  return out;
}

inline std::vector<Sequence> load_corpus(const std::string& path, const Vocabulary& vocab) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open corpus '" + path + "'");
  return parse_corpus(in, vocab, path);
}

inline void save_corpus(const std::string& path, const std::vector<Sequence>& corpus) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open '" + path + "' for writing");
  for (const auto& s : corpus) {
    nlohmann::json j;
    j["source"] = s.source ? nlohmann::json(*s.source) : nlohmann::json(nullptr);
    j["target"] = s.target;
    out << j.dump() << '\n';
  }
}

}  // namespace necs
