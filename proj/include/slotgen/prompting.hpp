#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "slotgen/corpus.hpp"

namespace slotgen {

// The QA-style input template. question_words may be emptied by test-time
// perturbations; the question mark and the ", " slot-list separator are fixed.
struct PromptTemplate {
  std::vector<std::string> question_words{"what", "is", "the"};
  bool include_label_prompt = true;
};

enum class TaskKind { Main, Inverse };

struct TaskExample {
  TaskKind kind = TaskKind::Main;
  std::vector<std::string> input_tokens;
  std::vector<std::string> target_tokens;
  std::string queried_key;  // slot type (main) or span text (inverse)
  std::string utterance_id;
};

enum class TemplateDeletion { None, DelWhat, DelWhatIs, DelWhatIsThe };

// "what is the <slot_type> ? <all slot types> <x1 .. xn>"; the slot list is
// comma-joined and present only when the template includes the label prompt.
std::vector<std::string> build_main_input(const Utterance& u, const std::string& slot_type,
                                          const SlotTypeRegistry& registry,
                                          const PromptTemplate& tmpl);

// "none" when the utterance holds no span of the type; otherwise the span
// surface strings in left-to-right order, comma-joined.
std::vector<std::string> build_main_target(const Utterance& u, const std::string& slot_type);

// One example per registry slot type.
std::vector<TaskExample> build_main_examples(const Utterance& u, const SlotTypeRegistry& registry,
                                             const PromptTemplate& tmpl);

// Inverse task: question = entity text, answer = slot type. Positives come
// from gold spans; floor(neg_ratio * positives) negatives query random 1-3
// token windows whose surface text matches no gold span, answering "none".
std::vector<TaskExample> build_inverse_examples(const Utterance& u,
                                                const SlotTypeRegistry& registry,
                                                const PromptTemplate& tmpl, double neg_ratio,
                                                std::uint64_t seed);

PromptTemplate perturb_template(const PromptTemplate& tmpl, TemplateDeletion deletion);

// "none" -> {}; otherwise split on ", ", trim, drop empties.
std::vector<std::string> parse_answer(const std::string& generated);

// TaskExample cache files: line-delimited JSON
//   {kind, input, target, queried_key, utterance_id}
void save_examples(const std::vector<TaskExample>& examples, const std::string& path);
std::vector<TaskExample> load_examples(const std::string& path);

const char* to_string(TemplateDeletion d);
TemplateDeletion deletion_from_string(const std::string& name);

}  // namespace slotgen
