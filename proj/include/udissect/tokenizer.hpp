#pragma once

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "udissect/error.hpp"
#include "udissect/model.hpp"

namespace udissect {

/// Closed word-level vocabulary. Ids 0..3 are the special tokens.
class Tokenizer {
 public:
  static constexpr TokenId kPad = 0;
  static constexpr TokenId kBos = 1;
  static constexpr TokenId kEos = 2;
  static constexpr TokenId kUnk = 3;

  Tokenizer() : Tokenizer(std::vector<std::string>{}) {}

  /// `words` are appended after the special tokens; duplicates are ignored.
  explicit Tokenizer(const std::vector<std::string>& words) {
    for (const char* special : {"<pad>", "<bos>", "<eos>", "<unk>"}) add(special);
    for (const auto& w : words) add(w);
  }

  static Tokenizer from_vocabulary(const std::vector<std::string>& vocabulary) {
    require(vocabulary.size() >= 4 && vocabulary[0] == "<pad>" && vocabulary[1] == "<bos>" &&
                vocabulary[2] == "<eos>" && vocabulary[3] == "<unk>",
            ErrorKind::ConfigParse, "vocabulary must start with <pad> <bos> <eos> <unk>");
    Tokenizer t;
    for (std::size_t i = 4; i < vocabulary.size(); ++i) {
      require(!t.index_.contains(vocabulary[i]), ErrorKind::ConfigParse, "duplicate vocabulary entry " + vocabulary[i]);
      t.add(vocabulary[i]);
    }
    return t;
  }

  std::size_t size() const { return words_.size(); }
  const std::vector<std::string>& vocabulary() const { return words_; }
  bool contains(const std::string& word) const { return index_.contains(word); }

  TokenId id(const std::string& word) const {
    auto it = index_.find(word);
    return it == index_.end() ? kUnk : it->second;
  }

  const std::string& word(TokenId id) const {
    require(id < words_.size(), ErrorKind::TokenOutOfRange, "token id " + std::to_string(id));
    return words_[id];
  }

  /// Splits on whitespace; out-of-vocabulary words become <unk>.
  TokenSeq encode(const std::string& text) const {
    TokenSeq out;
    std::istringstream in(text);
    std::string w;
    while (in >> w) out.push_back(id(w));
    return out;
  }

  std::string decode(const TokenSeq& tokens) const {
    std::string out;
    for (std::size_t i = 0; i < tokens.size(); ++i) {
      if (i) out.push_back(' ');
      out += word(tokens[i]);
    }
    return out;
  }

  void save(const std::filesystem::path& path) const {
    std::ofstream f(path, std::ios::trunc);
    require(bool(f), ErrorKind::IoFailure, "cannot write " + path.string());
    for (const auto& w : words_) f << w << '\n';
  }

  static Tokenizer load(const std::filesystem::path& path) {
    std::ifstream f(path);
    require(bool(f), ErrorKind::MissingArtifact, "cannot read vocabulary " + path.string());
    std::vector<std::string> words;
    std::string line;
    while (std::getline(f, line)) {
      if (!line.empty()) words.push_back(line);
    }
    return from_vocabulary(words);
  }

  friend bool operator==(const Tokenizer& a, const Tokenizer& b) { return a.words_ == b.words_; }

 private:
  void add(const std::string& w) {
    if (index_.contains(w)) return;
    index_.emplace(w, static_cast<TokenId>(words_.size()));
    words_.push_back(w);
  }

  std::vector<std::string> words_;
  std::unordered_map<std::string, TokenId> index_;
};

}  // namespace udissect
