#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "slotgen/util.hpp"

namespace slotgen {

// One labeled entity occurrence: token range [start, end) of a slot type.
struct SlotSpan {
  std::size_t start = 0;
  std::size_t end = 0;
  std::string slot_type;

  friend bool operator==(const SlotSpan&, const SlotSpan&) = default;
};

struct Utterance {
  std::string id;
  std::vector<std::string> tokens;
  std::string domain;
  std::vector<SlotSpan> spans;  // sorted by start, pairwise non-overlapping

  // Surface text of a span, tokens joined by single spaces.
  std::string span_text(const SlotSpan& s) const {
    std::vector<std::string> slice(tokens.begin() + s.start, tokens.begin() + s.end);
    return join(slice, " ");
  }
};

// The universe of slot types with per-domain membership, lexicographically
// ordered by type name so prompts are byte-reproducible across runs.
class SlotTypeRegistry {
 public:
  SlotTypeRegistry() = default;

  void add(const std::string& slot_type, const std::string& domain) {
    if (slot_type.empty()) throw ValidationError("slot type name must be non-empty");
    members_[slot_type].insert(domain);
  }

  bool contains(const std::string& slot_type) const { return members_.count(slot_type) > 0; }

  const std::set<std::string>& domains_of(const std::string& slot_type) const {
    auto it = members_.find(slot_type);
    if (it == members_.end()) throw ValidationError("unknown slot type: " + slot_type);
    return it->second;
  }

  bool in_domain(const std::string& slot_type, const std::string& domain) const {
    auto it = members_.find(slot_type);
    return it != members_.end() && it->second.count(domain) > 0;
  }

  // Lexicographic by construction (std::map).
  std::vector<std::string> type_names() const {
    std::vector<std::string> out;
    out.reserve(members_.size());
    for (auto& [name, _] : members_) out.push_back(name);
    return out;
  }

  std::size_t size() const { return members_.size(); }

  const std::map<std::string, std::set<std::string>>& entries() const { return members_; }

 private:
  std::map<std::string, std::set<std::string>> members_;
};

struct DomainSplit {
  std::set<std::string> source_domains;
  std::string target_domain;
  std::vector<Utterance> train;
  std::vector<Utterance> dev;
  std::vector<Utterance> test;
};

struct SlotCategorization {
  std::set<std::string> seen;
  std::set<std::string> unseen;
};

struct Corpus {
  std::vector<Utterance> utterances;
  SlotTypeRegistry registry;
};

// --- BIO conversion -------------------------------------------------------

std::vector<std::string> spans_to_bio(const Utterance& u);

// Throws ValidationError with the offending position on ill-formed sequences
// (I- without a matching B-, unknown prefix).
std::vector<SlotSpan> bio_to_spans(const std::vector<std::string>& tags);

// --- Corpus I/O -----------------------------------------------------------

// Line-delimited JSON, one object per utterance:
//   {"id": str, "tokens": [str], "bio": [str], "domain": str}
// Malformed records are rejected with their (0-based) record index.
Corpus load_corpus(const std::string& path);

void save_corpus(const Corpus& corpus, const std::string& path);

// Validates Utterance invariants against a registry; used by loaders and the
// synthesizer. Throws ValidationError.
void validate_utterance(const Utterance& u, const SlotTypeRegistry& registry);

// --- Splits ---------------------------------------------------------------

DomainSplit make_leave_one_out_split(const std::vector<Utterance>& corpus,
                                     const SlotTypeRegistry& registry,
                                     const std::string& target_domain, double dev_fraction,
                                     std::uint64_t seed);

// Keeps min(k, available) train utterances per source domain; dev/test pass
// through untouched.
DomainSplit subsample_few_shot(const DomainSplit& split, std::size_t k, std::uint64_t seed);

SlotCategorization categorize_slots(const DomainSplit& split, const SlotTypeRegistry& registry);

}  // namespace slotgen
