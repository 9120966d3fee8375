#include "slotgen/prompting.hpp"

#include <algorithm>
#include <fstream>
#include <set>

#include <nlohmann/json.hpp>

namespace slotgen {

using nlohmann::json;

namespace {

// Shared frame for main and inverse inputs: the queried key (slot type or
// entity text) sits between the question words and the question mark.
std::vector<std::string> build_input_frame(const Utterance& u, const std::string& queried_key,
                                           const SlotTypeRegistry& registry,
                                           const PromptTemplate& tmpl) {
  std::vector<std::string> out = tmpl.question_words;
  for (auto& t : split_ws(queried_key)) out.push_back(std::move(t));
  out.push_back("?");
  if (tmpl.include_label_prompt) {
    bool first = true;
    for (const auto& name : registry.type_names()) {
      if (!first) out.push_back(",");
      for (auto& t : split_ws(name)) out.push_back(std::move(t));
      first = false;
    }
  }
  out.insert(out.end(), u.tokens.begin(), u.tokens.end());
  return out;
}

}  // namespace

std::vector<std::string> build_main_input(const Utterance& u, const std::string& slot_type,
                                          const SlotTypeRegistry& registry,
                                          const PromptTemplate& tmpl) {
  if (!registry.contains(slot_type)) throw ValidationError("unknown slot type: " + slot_type);
  return build_input_frame(u, slot_type, registry, tmpl);
}

std::vector<std::string> build_main_target(const Utterance& u, const std::string& slot_type) {
  std::vector<SlotSpan> matches;
  for (const auto& s : u.spans)
    if (s.slot_type == slot_type) matches.push_back(s);
  if (matches.empty()) return {"none"};
  std::sort(matches.begin(), matches.end(),
            [](const SlotSpan& a, const SlotSpan& b) { return a.start < b.start; });

  std::vector<std::string> out;
  for (std::size_t i = 0; i < matches.size(); ++i) {
    if (i) out.push_back(",");
    for (std::size_t t = matches[i].start; t < matches[i].end; ++t) out.push_back(u.tokens[t]);
  }
  return out;
}

std::vector<TaskExample> build_main_examples(const Utterance& u, const SlotTypeRegistry& registry,
                                             const PromptTemplate& tmpl) {
  std::vector<TaskExample> out;
  out.reserve(registry.size());
  for (const auto& type : registry.type_names()) {
    TaskExample ex;
    ex.kind = TaskKind::Main;
    ex.input_tokens = build_main_input(u, type, registry, tmpl);
    ex.target_tokens = build_main_target(u, type);
    ex.queried_key = type;
    ex.utterance_id = u.id;
    out.push_back(std::move(ex));
  }
  return out;
}

std::vector<TaskExample> build_inverse_examples(const Utterance& u,
                                                const SlotTypeRegistry& registry,
                                                const PromptTemplate& tmpl, double neg_ratio,
                                                std::uint64_t seed) {
  if (neg_ratio < 0) throw ValidationError("neg_ratio must be >= 0");

  std::vector<TaskExample> out;
  std::set<std::string> gold_texts;
  for (const auto& s : u.spans) {
    const std::string text = u.span_text(s);
    gold_texts.insert(text);
    TaskExample ex;
    ex.kind = TaskKind::Inverse;
    ex.input_tokens = build_input_frame(u, text, registry, tmpl);
    ex.target_tokens = split_ws(s.slot_type);
    ex.queried_key = text;
    ex.utterance_id = u.id;
    out.push_back(std::move(ex));
  }

  const std::size_t want = static_cast<std::size_t>(neg_ratio * double(out.size()));
  Rng rng(derive_seed(seed, "inverse-neg:" + u.id));
  const std::size_t n = u.tokens.size();
  std::size_t produced = 0;
  // Random 1-3 token windows; exact gold surface strings are excluded, partial
  // overlap is allowed. Short utterances may yield fewer than `want`.
  for (std::size_t attempt = 0; produced < want && attempt < 20 * want + 40; ++attempt) {
    std::uniform_int_distribution<std::size_t> len_dist(1, std::min<std::size_t>(3, n));
    const std::size_t len = len_dist(rng);
    std::uniform_int_distribution<std::size_t> start_dist(0, n - len);
    const std::size_t start = start_dist(rng);
    SlotSpan window{start, start + len, ""};
    const std::string text = u.span_text(window);
    if (gold_texts.count(text)) continue;
    TaskExample ex;
    ex.kind = TaskKind::Inverse;
    ex.input_tokens = build_input_frame(u, text, registry, tmpl);
    ex.target_tokens = {"none"};
    ex.queried_key = text;
    ex.utterance_id = u.id;
    out.push_back(std::move(ex));
    ++produced;
  }
  return out;
}

PromptTemplate perturb_template(const PromptTemplate& tmpl, TemplateDeletion deletion) {
  PromptTemplate out = tmpl;
  std::size_t drop = 0;
  switch (deletion) {
    case TemplateDeletion::None: drop = 0; break;
    case TemplateDeletion::DelWhat: drop = 1; break;
    case TemplateDeletion::DelWhatIs: drop = 2; break;
    case TemplateDeletion::DelWhatIsThe: drop = 3; break;
  }
  drop = std::min(drop, out.question_words.size());
  out.question_words.erase(out.question_words.begin(), out.question_words.begin() + drop);
  return out;
}

std::vector<std::string> parse_answer(const std::string& generated) {
  const std::string text = trim(generated);
  if (text.empty() || text == "none") return {};
  std::vector<std::string> values;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    std::size_t sep = text.find(", ", pos);
    std::string piece =
        sep == std::string::npos ? text.substr(pos) : text.substr(pos, sep - pos);
    piece = trim(piece);
    if (!piece.empty()) values.push_back(std::move(piece));
    if (sep == std::string::npos) break;
    pos = sep + 2;
  }
  return values;
}

const char* to_string(TemplateDeletion d) {
  switch (d) {
    case TemplateDeletion::None: return "none";
    case TemplateDeletion::DelWhat: return "del_what";
    case TemplateDeletion::DelWhatIs: return "del_what_is";
    case TemplateDeletion::DelWhatIsThe: return "del_what_is_the";
  }
  return "none";
}

TemplateDeletion deletion_from_string(const std::string& name) {
  if (name == "none") return TemplateDeletion::None;
  if (name == "del_what") return TemplateDeletion::DelWhat;
  if (name == "del_what_is") return TemplateDeletion::DelWhatIs;
  if (name == "del_what_is_the") return TemplateDeletion::DelWhatIsThe;
  throw ValidationError("unknown template deletion: " + name);
}

void save_examples(const std::vector<TaskExample>& examples, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw ValidationError("cannot write examples file: " + path);
  for (const auto& ex : examples) {
    json rec{{"kind", ex.kind == TaskKind::Main ? "main" : "inverse"},
             {"input", ex.input_tokens},
             {"target", ex.target_tokens},
             {"queried_key", ex.queried_key},
             {"utterance_id", ex.utterance_id}};
    out << rec.dump() << '\n';
  }
}

std::vector<TaskExample> load_examples(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open examples file: " + path);
  std::vector<TaskExample> out;
  std::string line;
  std::size_t index = 0;
  for (; std::getline(in, line); ++index) {
    if (trim(line).empty()) continue;
    try {
      json rec = json::parse(line);
      TaskExample ex;
      const std::string kind = rec.at("kind").get<std::string>();
      if (kind != "main" && kind != "inverse")
        throw ValidationError("unknown example kind: " + kind);
      ex.kind = kind == "main" ? TaskKind::Main : TaskKind::Inverse;
      ex.input_tokens = rec.at("input").get<std::vector<std::string>>();
      ex.target_tokens = rec.at("target").get<std::vector<std::string>>();
      ex.queried_key = rec.at("queried_key").get<std::string>();
      ex.utterance_id = rec.at("utterance_id").get<std::string>();
      out.push_back(std::move(ex));
    } catch (const json::exception& e) {
      throw ValidationError("examples record " + std::to_string(index) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace slotgen
