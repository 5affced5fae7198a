#include "dept/tasks.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <random>
#include <set>

#include "dept/error.hpp"
#include "json.hpp"

namespace dept {
namespace {

constexpr std::size_t kFirstInstruction = 2;

std::size_t uniform(std::mt19937_64& rng, std::size_t lo, std::size_t hi) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

// k distinct categories drawn from all but `exclude` (pass kCategories for none).
std::vector<std::size_t> pick_categories(std::mt19937_64& rng, std::size_t k, std::size_t exclude) {
  std::vector<std::size_t> pool;
  for (std::size_t c = 0; c < VocabLayout::kCategories; ++c) {
    if (c != exclude) pool.push_back(c);
  }
  for (std::size_t i = 0; i < k; ++i) std::swap(pool[i], pool[uniform(rng, i, pool.size() - 1)]);
  pool.resize(k);
  return pool;
}

Example keyed_example(const TaskSpec& spec, const VocabLayout& vocab, std::mt19937_64& rng) {
  const std::size_t slots = uniform(rng, spec.min_slots, spec.max_slots);
  const std::size_t key_slot = uniform(rng, 0, slots - 1);
  const auto others = pick_categories(rng, slots - 1, spec.key_category);
  const std::size_t cls = uniform(rng, 0, spec.num_classes - 1);
  Example ex;
  std::size_t next = 0;
  for (std::size_t i = 0; i < slots; ++i) {
    if (i == key_slot) {
      ex.label = vocab.content(spec.key_category, spec.class_offset + cls);
      ex.tokens.push_back(ex.label);
    } else {
      ex.tokens.push_back(vocab.content(others[next++], uniform(rng, 0, vocab.category_size - 1)));
    }
  }
  ex.tokens.push_back(VocabLayout::kSep);
  return ex;
}

Example recall_example(const TaskSpec& spec, const VocabLayout& vocab, std::mt19937_64& rng) {
  const std::size_t slots = uniform(rng, spec.min_slots, spec.max_slots);
  const auto cats = pick_categories(rng, slots, VocabLayout::kCategories);
  const std::size_t target = uniform(rng, 0, slots - 1);
  Example ex;
  for (std::size_t i = 0; i < slots; ++i) {
    const auto tok = vocab.content(cats[i], uniform(rng, 0, vocab.category_size - 1));
    ex.tokens.push_back(tok);
    if (i == target) ex.label = tok;
  }
  ex.tokens.push_back(VocabLayout::kSep);

  const std::size_t prefix_len = uniform(rng, 1, spec.max_prefix);
  const std::size_t at = uniform(rng, 0, prefix_len - 1);
  for (std::size_t i = 0; i < prefix_len; ++i) {
    ex.prefix.push_back(i == at ? vocab.instruction(cats[target])
                                : vocab.filler(uniform(rng, 0, VocabLayout::kFillerTokens - 1)));
  }
  return ex;
}

}  // namespace

VocabLayout VocabLayout::for_vocab(std::size_t vocab_size) {
  const std::size_t reserved = kFirstInstruction + kCategories + kFillerTokens;
  if (vocab_size < reserved + 2 * kCategories) {
    throw ConfigError("vocab_size " + std::to_string(vocab_size) +
                      " is too small for the synthetic task layout (need >= " +
                      std::to_string(reserved + 2 * kCategories) + ")");
  }
  VocabLayout v;
  v.vocab_size = vocab_size;
  v.category_size = (vocab_size - reserved) / kCategories;
  return v;
}

std::int32_t VocabLayout::instruction(std::size_t category) const {
  return static_cast<std::int32_t>(kFirstInstruction + category);
}

std::int32_t VocabLayout::content(std::size_t category, std::size_t index) const {
  return static_cast<std::int32_t>(kFirstInstruction + kCategories + category * category_size +
                                   index);
}

std::int32_t VocabLayout::filler(std::size_t index) const {
  return static_cast<std::int32_t>(kFirstInstruction + kCategories + kCategories * category_size +
                                   index);
}

int VocabLayout::category_of(std::int32_t token) const {
  const auto first = static_cast<std::int32_t>(kFirstInstruction + kCategories);
  const auto end = first + static_cast<std::int32_t>(kCategories * category_size);
  if (token < first || token >= end) return -1;
  return static_cast<int>((token - first) / static_cast<std::int32_t>(category_size));
}

std::string to_string(Generator g) {
  return g == Generator::kCopyRecall ? "copy-recall" : "keyed-classification";
}

Generator parse_generator(const std::string& s) {
  if (s == "keyed-classification") return Generator::kKeyedClassification;
  if (s == "copy-recall") return Generator::kCopyRecall;
  throw ConfigError("unknown task generator '" + s + "'");
}

void TaskSpec::validate() const {
  const auto vocab = VocabLayout::for_vocab(vocab_size);
  if (min_slots < 1 || min_slots > max_slots) throw ConfigError("task: need 1 <= min_slots <= max_slots");
  if (max_slots > VocabLayout::kCategories - 1) {
    throw ConfigError("task: max_slots must be below the category count " +
                      std::to_string(VocabLayout::kCategories));
  }
  if (generator == Generator::kKeyedClassification) {
    if (num_classes < 2) throw ConfigError("task: num_classes must be >= 2");
    if (key_category >= VocabLayout::kCategories) throw ConfigError("task: key_category out of range");
    if (class_offset + num_classes > vocab.category_size) {
      throw ConfigError("task: vocab_size " + std::to_string(vocab_size) + " leaves " +
                        std::to_string(vocab.category_size) + " tokens per category, too few for " +
                        std::to_string(num_classes) + " classes at offset " +
                        std::to_string(class_offset));
    }
  } else if (max_prefix < 1) {
    throw ConfigError("task: copy-recall needs max_prefix >= 1");
  }
}

Dataset gen_task(const TaskSpec& spec, std::size_t n_train, std::size_t n_eval) {
  spec.validate();
  const auto vocab = VocabLayout::for_vocab(spec.vocab_size);
  std::mt19937_64 rng(spec.seed);
  const std::size_t want = n_train + n_eval;
  std::set<std::pair<std::vector<std::int32_t>, std::vector<std::int32_t>>> seen;
  std::vector<Example> all;
  all.reserve(want);
  const std::size_t max_attempts = 100 * want + 1000;
  for (std::size_t attempt = 0; all.size() < want; ++attempt) {
    if (attempt >= max_attempts) {
      throw ConfigError("task: could not generate " + std::to_string(want) +
                        " distinct examples");
    }
    Example ex = spec.generator == Generator::kKeyedClassification
                     ? keyed_example(spec, vocab, rng)
                     : recall_example(spec, vocab, rng);
    if (seen.emplace(ex.prefix, ex.tokens).second) all.push_back(std::move(ex));
  }
  Dataset ds;
  ds.train.assign(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(n_train));
  ds.eval.assign(all.begin() + static_cast<std::ptrdiff_t>(n_train), all.end());
  return ds;
}

std::vector<Example> few_shot_sample(const std::vector<Example>& train, std::size_t k,
                                     std::uint64_t seed) {
  if (k > train.size()) {
    throw SampleError("few_shot_sample: k=" + std::to_string(k) + " exceeds the " +
                      std::to_string(train.size()) + " training examples");
  }
  std::mt19937_64 rng(seed);
  std::vector<std::size_t> idx(train.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::vector<Example> out;
  out.reserve(k);
  for (std::size_t i = 0; i < k; ++i) {
    std::swap(idx[i], idx[uniform(rng, i, idx.size() - 1)]);
    out.push_back(train[idx[i]]);
  }
  return out;
}

void save_dataset(const std::filesystem::path& path, const std::vector<Example>& examples) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write dataset '" + path.string() + "'");
  for (const auto& ex : examples) {
    nlohmann::json j{{"tokens", ex.tokens}, {"label", ex.label}};
    if (!ex.prefix.empty()) j["prefix"] = ex.prefix;
    out << j.dump() << '\n';
  }
}

std::vector<Example> load_dataset(const std::filesystem::path& path, std::size_t vocab_size) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read dataset '" + path.string() + "'");
  std::vector<Example> out;
  std::string line;
  std::size_t lineno = 0;
  auto check = [&](std::int32_t id) {
    if (id < 0 || static_cast<std::size_t>(id) >= vocab_size) {
      throw ConfigError(path.string() + ":" + std::to_string(lineno) + ": token " +
                        std::to_string(id) + " outside vocabulary of " + std::to_string(vocab_size));
    }
  };
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    Example ex;
    try {
      auto j = nlohmann::json::parse(line);
      ex.tokens = j.at("tokens").get<std::vector<std::int32_t>>();
      ex.label = j.at("label").get<std::int32_t>();
      if (j.contains("prefix")) ex.prefix = j["prefix"].get<std::vector<std::int32_t>>();
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
    if (ex.tokens.empty()) throw ConfigError(path.string() + ":" + std::to_string(lineno) + ": empty tokens");
    for (auto id : ex.tokens) check(id);
    for (auto id : ex.prefix) check(id);
    check(ex.label);
    if (ex.label == VocabLayout::kPad) {
      throw ConfigError(path.string() + ":" + std::to_string(lineno) + ": label is the pad id");
    }
    if (std::find(ex.tokens.begin(), ex.tokens.end(), VocabLayout::kPad) != ex.tokens.end()) {
      throw ConfigError(path.string() + ":" + std::to_string(lineno) + ": pad id inside tokens");
    }
    out.push_back(std::move(ex));
  }
  return out;
}

}  // namespace dept
