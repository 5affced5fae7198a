#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

namespace dept {

// Token id layout shared by every synthetic task:
//
//   0                 pad
//   1                 SEP (end of text; the label is predicted here)
//   2 .. 2+C-1        one instruction token per category
//   then C blocks of `category_size` content tokens
//   then `kFillerTokens` filler tokens used in instruction prefixes
//
// C = kCategories. Ids past the filler block are unused.
struct VocabLayout {
  static constexpr std::int32_t kPad = 0;
  static constexpr std::int32_t kSep = 1;
  static constexpr std::size_t kCategories = 16;
  static constexpr std::size_t kFillerTokens = 8;

  std::size_t vocab_size = 0;
  std::size_t category_size = 0;

  static VocabLayout for_vocab(std::size_t vocab_size);

  std::int32_t instruction(std::size_t category) const;
  std::int32_t content(std::size_t category, std::size_t index) const;
  std::int32_t filler(std::size_t index) const;
  // Category of a content token, or -1.
  int category_of(std::int32_t token) const;
};

struct Example {
  std::vector<std::int32_t> tokens;  // text, ends with SEP
  std::int32_t label = 0;
  // Hard-prompt tokens placed before the text (copy-recall only).
  std::vector<std::int32_t> prefix;

  bool operator==(const Example&) const = default;
};

enum class Generator { kKeyedClassification, kCopyRecall };

std::string to_string(Generator g);
Generator parse_generator(const std::string& s);

// keyed-classification: the text holds one token from a hidden key category
// (restricted to `num_classes` tokens starting at `class_offset`) among
// distractors from other categories; the label is that token.
//
// copy-recall: the prefix carries an instruction token naming a category
// amid filler; the label is the text token from that category. Used as the
// backbone's source mixture.
struct TaskSpec {
  Generator generator = Generator::kKeyedClassification;
  std::size_t vocab_size = 512;
  std::size_t min_slots = 4;  // text length is slots + 1 (SEP)
  std::size_t max_slots = 8;
  std::size_t num_classes = 4;
  std::size_t key_category = 5;
  std::size_t class_offset = 0;
  std::size_t max_prefix = 24;
  std::uint64_t seed = 1;

  void validate() const;
  std::size_t max_text_len() const { return max_slots + 1; }
};

struct Dataset {
  std::vector<Example> train;
  std::vector<Example> eval;
};

// Deterministic in spec.seed; train and eval never share a token sequence.
Dataset gen_task(const TaskSpec& spec, std::size_t n_train, std::size_t n_eval);

// Uniform sample of k examples without replacement.
std::vector<Example> few_shot_sample(const std::vector<Example>& train, std::size_t k,
                                     std::uint64_t seed);

// One JSON object per line: {"tokens": [...], "label": n} with an optional
// "prefix" array.
void save_dataset(const std::filesystem::path& path, const std::vector<Example>& examples);
std::vector<Example> load_dataset(const std::filesystem::path& path, std::size_t vocab_size);

}  // namespace dept
