#include "slotgen/synth.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

namespace slotgen {

using nlohmann::json;

SynthSpec SynthSpec::from_json_text(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ValidationError(std::string("invalid synth spec JSON: ") + e.what());
  }
  SynthSpec spec;
  try {
    for (auto& [name, d] : j.at("domains").items()) {
      SynthDomainSpec ds;
      ds.slots = d.value("slots", std::vector<std::string>{});
      ds.exclusive_slots = d.value("exclusive_slots", std::vector<std::string>{});
      ds.templates = d.at("templates").get<std::vector<std::string>>();
      ds.count = d.at("count").get<std::size_t>();
      spec.domains[name] = std::move(ds);
    }
    for (auto& [slot, words] : j.at("lexicons").items())
      spec.lexicons[slot] = words.get<std::vector<std::string>>();
  } catch (const json::exception& e) {
    throw ValidationError(std::string("invalid synth spec: ") + e.what());
  }
  return spec;
}

SynthSpec SynthSpec::from_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open synth spec: " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return from_json_text(ss.str());
}

namespace {

struct TemplatePiece {
  bool is_slot = false;
  std::string text;  // literal token or slot name
};

std::vector<TemplatePiece> parse_template(const std::string& tmpl) {
  std::vector<TemplatePiece> pieces;
  for (const auto& tok : split_ws(tmpl)) {
    if (tok.size() >= 3 && tok.front() == '{' && tok.back() == '}')
      pieces.push_back({true, tok.substr(1, tok.size() - 2)});
    else
      pieces.push_back({false, tok});
  }
  return pieces;
}

void validate_spec(const SynthSpec& spec) {
  if (spec.domains.empty()) throw ValidationError("synth spec declares no domains");
  std::map<std::string, std::set<std::string>> slot_domains;
  for (const auto& [name, d] : spec.domains) {
    if (d.templates.empty()) throw ValidationError("domain " + name + " has no templates");
    if (d.count == 0) throw ValidationError("domain " + name + " has count 0");
    if (d.exclusive_slots.empty())
      throw ValidationError("domain " + name + " declares no exclusive slot type");
    std::set<std::string> declared(d.slots.begin(), d.slots.end());
    declared.insert(d.exclusive_slots.begin(), d.exclusive_slots.end());
    for (const auto& s : declared) {
      slot_domains[s].insert(name);
      auto it = spec.lexicons.find(s);
      if (it == spec.lexicons.end() || it->second.empty())
        throw ValidationError("declared slot type \"" + s + "\" has an empty lexicon");
    }
    for (const auto& tmpl : d.templates)
      for (const auto& p : parse_template(tmpl))
        if (p.is_slot && !declared.count(p.text))
          throw ValidationError("template in domain " + name + " references undeclared slot {" +
                                p.text + "}");
  }
  for (const auto& [name, d] : spec.domains)
    for (const auto& s : d.exclusive_slots)
      if (slot_domains[s].size() != 1)
        throw ValidationError("slot type \"" + s + "\" declared exclusive to " + name +
                              " but appears in " + std::to_string(slot_domains[s].size()) +
                              " domains");
}

}  // namespace

Corpus generate_synthetic_corpus(const SynthSpec& spec, std::uint64_t seed) {
  validate_spec(spec);

  Corpus corpus;
  for (const auto& [name, d] : spec.domains) {
    for (const auto& s : d.slots) corpus.registry.add(s, name);
    for (const auto& s : d.exclusive_slots) corpus.registry.add(s, name);
  }

  for (const auto& [domain, d] : spec.domains) {
    Rng rng(derive_seed(seed, "synth:" + domain));
    std::vector<std::vector<TemplatePiece>> templates;
    templates.reserve(d.templates.size());
    for (const auto& t : d.templates) templates.push_back(parse_template(t));

    // Seeded-shuffled round robin over templates: coverage plus variety.
    std::vector<std::size_t> cycle(templates.size());
    for (std::size_t i = 0; i < cycle.size(); ++i) cycle[i] = i;

    for (std::size_t i = 0; i < d.count; ++i) {
      if (i % templates.size() == 0) std::shuffle(cycle.begin(), cycle.end(), rng);
      const auto& pieces = templates[cycle[i % templates.size()]];

      Utterance u;
      u.id = domain + "-" + std::to_string(i);
      u.domain = domain;
      for (const auto& p : pieces) {
        if (!p.is_slot) {
          u.tokens.push_back(p.text);
          continue;
        }
        const auto& lex = spec.lexicons.at(p.text);
        std::uniform_int_distribution<std::size_t> pick(0, lex.size() - 1);
        auto value_tokens = split_ws(lex[pick(rng)]);
        SlotSpan span{u.tokens.size(), u.tokens.size() + value_tokens.size(), p.text};
        for (auto& vt : value_tokens) u.tokens.push_back(std::move(vt));
        u.spans.push_back(span);
      }
      validate_utterance(u, corpus.registry);
      corpus.utterances.push_back(std::move(u));
    }
  }
  return corpus;
}

}  // namespace slotgen
