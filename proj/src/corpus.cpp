#include "slotgen/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include <nlohmann/json.hpp>

namespace slotgen {

using nlohmann::json;

std::vector<std::string> spans_to_bio(const Utterance& u) {
  std::vector<std::string> tags(u.tokens.size(), "O");
  for (const auto& s : u.spans) {
    tags[s.start] = "B-" + s.slot_type;
    for (std::size_t i = s.start + 1; i < s.end; ++i) tags[i] = "I-" + s.slot_type;
  }
  return tags;
}

namespace {

struct ParsedTag {
  char prefix;  // 'B', 'I', 'O'
  std::string type;
};

ParsedTag parse_tag(const std::string& tag, std::size_t pos) {
  if (tag == "O") return {'O', ""};
  if (tag.size() >= 3 && (tag[0] == 'B' || tag[0] == 'I') && tag[1] == '-')
    return {tag[0], tag.substr(2)};
  throw ValidationError("ill-formed BIO tag \"" + tag + "\" at position " + std::to_string(pos));
}

}  // namespace

std::vector<SlotSpan> bio_to_spans(const std::vector<std::string>& tags) {
  std::vector<SlotSpan> spans;
  std::optional<SlotSpan> open;
  for (std::size_t i = 0; i < tags.size(); ++i) {
    ParsedTag t = parse_tag(tags[i], i);
    if (t.prefix == 'B') {
      if (open) spans.push_back(*open);
      open = SlotSpan{i, i + 1, t.type};
    } else if (t.prefix == 'I') {
      if (!open || open->slot_type != t.type)
        throw ValidationError("I-" + t.type + " without matching B- at position " +
                              std::to_string(i));
      open->end = i + 1;
    } else {
      if (open) spans.push_back(*open);
      open.reset();
    }
  }
  if (open) spans.push_back(*open);
  return spans;
}

void validate_utterance(const Utterance& u, const SlotTypeRegistry& registry) {
  const std::size_t n = u.tokens.size();
  if (n == 0) throw ValidationError("utterance " + u.id + " has no tokens");
  if (u.domain.empty()) throw ValidationError("utterance " + u.id + " has no domain");
  std::vector<bool> covered(n, false);
  for (const auto& s : u.spans) {
    if (s.slot_type.empty()) throw ValidationError("utterance " + u.id + ": empty slot type");
    if (s.start >= s.end || s.end > n)
      throw ValidationError("utterance " + u.id + ": span out of range");
    for (std::size_t i = s.start; i < s.end; ++i) {
      if (covered[i]) throw ValidationError("utterance " + u.id + ": overlapping spans");
      covered[i] = true;
    }
    if (!registry.in_domain(s.slot_type, u.domain))
      throw ValidationError("utterance " + u.id + ": slot type \"" + s.slot_type +
                            "\" not registered for domain " + u.domain);
  }
}

Corpus load_corpus(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open corpus file: " + path);

  Corpus corpus;
  std::string line;
  std::size_t index = 0;
  std::vector<std::vector<std::string>> all_bio;
  for (; std::getline(in, line); ++index) {
    if (trim(line).empty()) continue;
    json rec;
    try {
      rec = json::parse(line);
    } catch (const json::exception& e) {
      throw ValidationError("record " + std::to_string(index) + ": invalid JSON: " + e.what());
    }
    Utterance u;
    try {
      u.id = rec.at("id").get<std::string>();
      u.tokens = rec.at("tokens").get<std::vector<std::string>>();
      u.domain = rec.at("domain").get<std::string>();
      auto bio = rec.at("bio").get<std::vector<std::string>>();
      if (bio.size() != u.tokens.size())
        throw ValidationError("tag/token length mismatch (" + std::to_string(bio.size()) + " vs " +
                              std::to_string(u.tokens.size()) + ")");
      u.spans = bio_to_spans(bio);
    } catch (const json::exception& e) {
      throw ValidationError("record " + std::to_string(index) + ": " + e.what());
    } catch (const ValidationError& e) {
      throw ValidationError("record " + std::to_string(index) + ": " + e.what());
    }
    for (const auto& s : u.spans) corpus.registry.add(s.slot_type, u.domain);
    corpus.utterances.push_back(std::move(u));
  }
  for (std::size_t i = 0; i < corpus.utterances.size(); ++i) {
    try {
      validate_utterance(corpus.utterances[i], corpus.registry);
    } catch (const ValidationError& e) {
      throw ValidationError("record " + std::to_string(i) + ": " + e.what());
    }
  }
  return corpus;
}

void save_corpus(const Corpus& corpus, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw ValidationError("cannot write corpus file: " + path);
  for (const auto& u : corpus.utterances) {
    json rec{{"id", u.id}, {"tokens", u.tokens}, {"bio", spans_to_bio(u)}, {"domain", u.domain}};
    out << rec.dump() << '\n';
  }
}

DomainSplit make_leave_one_out_split(const std::vector<Utterance>& corpus,
                                     const SlotTypeRegistry& registry,
                                     const std::string& target_domain, double dev_fraction,
                                     std::uint64_t seed) {
  (void)registry;
  if (!(dev_fraction > 0.0 && dev_fraction < 1.0))
    throw ValidationError("dev_fraction must be in (0,1)");

  DomainSplit split;
  split.target_domain = target_domain;
  std::vector<Utterance> source;
  bool target_present = false;
  for (const auto& u : corpus) {
    if (u.domain == target_domain) {
      split.test.push_back(u);
      target_present = true;
    } else {
      split.source_domains.insert(u.domain);
      source.push_back(u);
    }
  }
  if (!target_present) throw ValidationError("unknown target domain: " + target_domain);

  std::vector<std::size_t> order(source.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(derive_seed(seed, "dev-split"));
  std::shuffle(order.begin(), order.end(), rng);

  std::size_t dev_count = 0;
  if (source.size() >= 2) {
    dev_count = static_cast<std::size_t>(std::llround(dev_fraction * double(source.size())));
    dev_count = std::clamp<std::size_t>(dev_count, 1, source.size() - 1);
  }
  std::vector<bool> is_dev(source.size(), false);
  for (std::size_t i = 0; i < dev_count; ++i) is_dev[order[i]] = true;
  for (std::size_t i = 0; i < source.size(); ++i)
    (is_dev[i] ? split.dev : split.train).push_back(source[i]);
  return split;
}

DomainSplit subsample_few_shot(const DomainSplit& split, std::size_t k, std::uint64_t seed) {
  if (k < 1) throw ValidationError("few-shot budget k must be >= 1");
  DomainSplit out = split;
  out.train.clear();

  std::map<std::string, std::vector<std::size_t>> by_domain;
  for (std::size_t i = 0; i < split.train.size(); ++i)
    by_domain[split.train[i].domain].push_back(i);

  std::set<std::size_t> keep;
  for (auto& [domain, idxs] : by_domain) {
    Rng rng(derive_seed(seed, "few-shot:" + domain));
    std::shuffle(idxs.begin(), idxs.end(), rng);
    for (std::size_t i = 0; i < std::min(k, idxs.size()); ++i) keep.insert(idxs[i]);
  }
  for (std::size_t i = 0; i < split.train.size(); ++i)
    if (keep.count(i)) out.train.push_back(split.train[i]);
  return out;
}

SlotCategorization categorize_slots(const DomainSplit& split, const SlotTypeRegistry& registry) {
  SlotCategorization cat;
  std::set<std::string> in_test_gold;
  for (const auto& u : split.test)
    for (const auto& s : u.spans) in_test_gold.insert(s.slot_type);

  for (const auto& type : in_test_gold) {
    bool in_source = false;
    for (const auto& d : registry.domains_of(type))
      if (split.source_domains.count(d)) in_source = true;
    (in_source ? cat.seen : cat.unseen).insert(type);
  }
  return cat;
}

}  // namespace slotgen
