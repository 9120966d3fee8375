#pragma once

#include <map>
#include <string>
#include <vector>

#include "slotgen/util.hpp"

namespace slotgen {

// Word-level vocabulary with PAD/BOS/EOS/UNK specials. "none" and "," are
// ordinary words and always present (they are answer surface forms).
class Vocab {
 public:
  static constexpr int kPad = 0;
  static constexpr int kBos = 1;
  static constexpr int kEos = 2;
  static constexpr int kUnk = 3;

  Vocab() : Vocab(std::vector<std::string>{}) {}

  // Ordinary words, specials prepended. Order defines ids.
  explicit Vocab(std::vector<std::string> words) {
    tokens_ = {"<pad>", "<bos>", "<eos>", "<unk>"};
    tokens_.insert(tokens_.end(), words.begin(), words.end());
    for (std::size_t i = 0; i < tokens_.size(); ++i) {
      if (!ids_.emplace(tokens_[i], int(i)).second)
        throw ValidationError("duplicate vocabulary token: " + tokens_[i]);
    }
  }

  // Unique tokens of all streams, sorted, plus forced "none" and ",".
  static Vocab build(const std::vector<std::vector<std::string>>& token_streams);

  int id_of(const std::string& token) const {
    auto it = ids_.find(token);
    return it == ids_.end() ? kUnk : it->second;
  }

  bool contains(const std::string& token) const { return ids_.count(token) > 0; }

  const std::string& token(int id) const {
    if (id < 0 || std::size_t(id) >= tokens_.size())
      throw ValidationError("token id out of range: " + std::to_string(id));
    return tokens_[std::size_t(id)];
  }

  std::vector<int> encode(const std::vector<std::string>& tokens) const {
    std::vector<int> ids;
    ids.reserve(tokens.size());
    for (const auto& t : tokens) ids.push_back(id_of(t));
    return ids;
  }

  std::vector<std::string> decode(const std::vector<int>& ids) const {
    std::vector<std::string> out;
    out.reserve(ids.size());
    for (int id : ids) out.push_back(token(id));
    return out;
  }

  std::size_t size() const { return tokens_.size(); }
  const std::vector<std::string>& tokens() const { return tokens_; }

  // Ordinary words in id order (for serialization round trips).
  std::vector<std::string> words() const {
    return std::vector<std::string>(tokens_.begin() + 4, tokens_.end());
  }

 private:
  std::vector<std::string> tokens_;
  std::map<std::string, int> ids_;
};

}  // namespace slotgen
