#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "slotgen/corpus.hpp"

namespace slotgen {

// Declarative recipe for a synthetic slot-filling corpus. Templates are
// space-tokenized carrier sentences with {slot} placeholders, each standing
// for one sampled lexicon entry (possibly multi-word).
struct SynthDomainSpec {
  std::vector<std::string> slots;            // types shared with other domains
  std::vector<std::string> exclusive_slots;  // types occurring only here (>= 1 required)
  std::vector<std::string> templates;
  std::size_t count = 0;
};

struct SynthSpec {
  std::map<std::string, SynthDomainSpec> domains;
  std::map<std::string, std::vector<std::string>> lexicons;

  static SynthSpec from_json_file(const std::string& path);
  static SynthSpec from_json_text(const std::string& text);
};

// Deterministic per seed; templates are cycled in seeded-shuffled blocks so
// every template (and thus every exclusive slot) occurs whenever
// count >= #templates.
Corpus generate_synthetic_corpus(const SynthSpec& spec, std::uint64_t seed);

}  // namespace slotgen
