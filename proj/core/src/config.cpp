#include "dept/config.hpp"

#include <cstdlib>

#include "json.hpp"

namespace dept {
namespace {

using nlohmann::json;

json backbone_json(const BackboneConfig& b) {
  return {{"vocab_size", b.vocab_size}, {"d_model", b.d_model},
          {"n_layers", b.n_layers},     {"n_heads", b.n_heads},
          {"d_ff", b.d_ff},             {"max_seq_len", b.max_seq_len},
          {"max_prompt_len", b.max_prompt_len}};
}

json to_document(const RunConfig& c) {
  json doc;
  doc["backbone"] = backbone_json(c.backbone);
  doc["backbone"]["checkpoint"] = c.backbone_checkpoint;
  doc["backbone"]["seed"] = c.backbone_seed;
  doc["pretrain"] = {{"steps", c.pretrain.steps},       {"batch_size", c.pretrain.batch_size},
                     {"lr", c.pretrain.lr},             {"max_prefix", c.pretrain.max_prefix},
                     {"n_train", c.pretrain.n_train},   {"n_eval", c.pretrain.n_eval},
                     {"seed", c.pretrain.seed}};
  doc["task"] = {{"generator", to_string(c.task.generator)},
                 {"vocab_size", c.task.vocab_size},
                 {"min_slots", c.task.min_slots},
                 {"max_slots", c.task.max_slots},
                 {"num_classes", c.task.num_classes},
                 {"key_category", c.task.key_category},
                 {"class_offset", c.task.class_offset},
                 {"seed", c.task.seed},
                 {"n_train", c.n_train},
                 {"n_eval", c.n_eval},
                 {"train_path", c.train_path},
                 {"eval_path", c.eval_path}};
  doc["peft"] = {{"variant", to_string(c.peft.variant)},
                 {"l", c.peft.l},
                 {"m", c.peft.m},
                 {"r", c.peft.r ? json(*c.peft.r) : json(-1)},
                 {"init", to_string(c.peft.init)},
                 {"sigma", c.peft.sigma}};
  doc["optim"] = {{"alpha1", c.peft.alpha1},
                  {"alpha2", c.peft.alpha2},
                  {"beta1", c.optim.beta1},
                  {"beta2", c.optim.beta2},
                  {"eps", c.optim.eps},
                  {"weight_decay", c.optim.weight_decay},
                  {"warmup_proportion", c.optim.warmup_proportion},
                  {"schedule", c.optim.schedule == Schedule::kConstant ? "constant" : "warmup-linear"}};
  doc["train"] = {{"batch_size", c.train.batch_size}, {"steps", c.train.steps},
                  {"eval_every", c.train.eval_every}, {"eval_batch", c.train.eval_batch},
                  {"seed", c.train.seed}};
  doc["bench"] = {{"l", c.bench.l},
                  {"m_values", c.bench.m_values},
                  {"repeats", c.bench.repeats},
                  {"batch", c.bench.batch},
                  {"eval_examples", c.bench.eval_examples},
                  {"measure", c.bench.measure},
                  {"pad_to_max_len", c.bench.pad_to_max_len}};
  doc["fewshot"] = {{"k_values", c.fewshot.k_values},
                    {"seeds", c.fewshot.seeds},
                    {"steps", c.fewshot.steps},
                    {"target_class_offset", c.fewshot.target_class_offset}};
  doc["ablation"] = {{"seeds", c.ablation.seeds}};
  doc["out_dir"] = c.out_dir;
  return doc;
}

// Reads `key` from `obj` into `out` if present.
template <typename V>
void read(const json& obj, const char* key, V& out) {
  if (obj.contains(key)) out = obj.at(key).get<V>();
}

// Rejects keys that the schema (the default document) does not declare.
void check_keys(const json& doc, const json& schema, const std::string& prefix) {
  if (!doc.is_object()) {
    throw ConfigError("config: '" + (prefix.empty() ? std::string("<root>") : prefix) +
                      "' must be an object");
  }
  for (const auto& [key, value] : doc.items()) {
    const std::string path = prefix.empty() ? key : prefix + "." + key;
    if (!schema.contains(key)) throw ConfigError("config: unknown field '" + path + "'");
    if (schema.at(key).is_object()) check_keys(value, schema.at(key), path);
  }
}

RunConfig from_document(const json& doc) {
  check_keys(doc, to_document(RunConfig{}), "");
  RunConfig c;
  if (doc.contains("backbone")) {
    const auto& b = doc["backbone"];
    read(b, "vocab_size", c.backbone.vocab_size);
    read(b, "d_model", c.backbone.d_model);
    read(b, "n_layers", c.backbone.n_layers);
    read(b, "n_heads", c.backbone.n_heads);
    read(b, "d_ff", c.backbone.d_ff);
    read(b, "max_seq_len", c.backbone.max_seq_len);
    read(b, "max_prompt_len", c.backbone.max_prompt_len);
    read(b, "checkpoint", c.backbone_checkpoint);
    read(b, "seed", c.backbone_seed);
  }
  if (doc.contains("pretrain")) {
    const auto& p = doc["pretrain"];
    read(p, "steps", c.pretrain.steps);
    read(p, "batch_size", c.pretrain.batch_size);
    read(p, "lr", c.pretrain.lr);
    read(p, "max_prefix", c.pretrain.max_prefix);
    read(p, "n_train", c.pretrain.n_train);
    read(p, "n_eval", c.pretrain.n_eval);
    read(p, "seed", c.pretrain.seed);
  }
  if (doc.contains("task")) {
    const auto& t = doc["task"];
    if (t.contains("generator")) c.task.generator = parse_generator(t["generator"].get<std::string>());
    read(t, "vocab_size", c.task.vocab_size);
    read(t, "min_slots", c.task.min_slots);
    read(t, "max_slots", c.task.max_slots);
    read(t, "num_classes", c.task.num_classes);
    read(t, "key_category", c.task.key_category);
    read(t, "class_offset", c.task.class_offset);
    read(t, "seed", c.task.seed);
    read(t, "n_train", c.n_train);
    read(t, "n_eval", c.n_eval);
    read(t, "train_path", c.train_path);
    read(t, "eval_path", c.eval_path);
  }
  if (doc.contains("peft")) {
    const auto& p = doc["peft"];
    if (p.contains("variant")) c.peft.variant = parse_variant_tag(p["variant"].get<std::string>());
    read(p, "l", c.peft.l);
    read(p, "m", c.peft.m);
    if (p.contains("r")) {
      const auto r = p["r"].get<long long>();
      if (r >= 0) c.peft.r = static_cast<std::size_t>(r);
    }
    if (p.contains("init")) c.peft.init = parse_prompt_init(p["init"].get<std::string>());
    read(p, "sigma", c.peft.sigma);
  }
  if (doc.contains("optim")) {
    const auto& o = doc["optim"];
    read(o, "alpha1", c.peft.alpha1);
    read(o, "alpha2", c.peft.alpha2);
    read(o, "beta1", c.optim.beta1);
    read(o, "beta2", c.optim.beta2);
    read(o, "eps", c.optim.eps);
    read(o, "weight_decay", c.optim.weight_decay);
    read(o, "warmup_proportion", c.optim.warmup_proportion);
    if (o.contains("schedule")) {
      const auto s = o["schedule"].get<std::string>();
      if (s == "constant") {
        c.optim.schedule = Schedule::kConstant;
      } else if (s == "warmup-linear") {
        c.optim.schedule = Schedule::kWarmupLinear;
      } else {
        throw ConfigError("config: unknown schedule '" + s + "'");
      }
    }
  }
  if (doc.contains("train")) {
    const auto& t = doc["train"];
    read(t, "batch_size", c.train.batch_size);
    read(t, "steps", c.train.steps);
    read(t, "eval_every", c.train.eval_every);
    read(t, "eval_batch", c.train.eval_batch);
    read(t, "seed", c.train.seed);
  }
  if (doc.contains("bench")) {
    const auto& b = doc["bench"];
    read(b, "l", c.bench.l);
    read(b, "m_values", c.bench.m_values);
    read(b, "repeats", c.bench.repeats);
    read(b, "batch", c.bench.batch);
    read(b, "eval_examples", c.bench.eval_examples);
    read(b, "measure", c.bench.measure);
    read(b, "pad_to_max_len", c.bench.pad_to_max_len);
  }
  if (doc.contains("fewshot")) {
    const auto& f = doc["fewshot"];
    read(f, "k_values", c.fewshot.k_values);
    read(f, "seeds", c.fewshot.seeds);
    read(f, "steps", c.fewshot.steps);
    read(f, "target_class_offset", c.fewshot.target_class_offset);
  }
  if (doc.contains("ablation")) read(doc["ablation"], "seeds", c.ablation.seeds);
  read(doc, "out_dir", c.out_dir);
  c.optim.total_steps = c.train.steps;
  c.validate();
  return c;
}

void collect_paths(const json& node, const std::string& prefix, std::vector<std::string>& out) {
  for (const auto& [key, value] : node.items()) {
    const std::string path = prefix.empty() ? key : prefix + "." + key;
    if (value.is_object()) {
      collect_paths(value, path, out);
    } else {
      out.push_back(path);
    }
  }
}

// Parses an override value according to the type of the field it replaces.
json coerce(const std::string& path, const json& current, const std::string& text) {
  auto fail = [&] {
    return ConfigError("config: value '" + text + "' is not valid for '" + path + "'");
  };
  if (current.is_string()) return text;
  json parsed;
  try {
    parsed = json::parse(text);
  } catch (const json::exception&) {
    // Bare comma lists ("1,2,3") for array fields.
    if (!current.is_array()) throw fail();
    try {
      parsed = json::parse("[" + text + "]");
    } catch (const json::exception&) {
      throw fail();
    }
  }
  if (current.is_array() && parsed.is_number()) parsed = json::array({parsed});
  const bool ok = (current.is_boolean() && parsed.is_boolean()) ||
                  (current.is_number_integer() && parsed.is_number_integer()) ||
                  (current.is_number_float() && parsed.is_number()) ||
                  (current.is_array() && parsed.is_array());
  if (!ok) throw fail();
  if (current.is_number_unsigned() && parsed.get<long long>() < 0 && path != "peft.r") throw fail();
  return parsed;
}

}  // namespace

void RunConfig::validate() const {
  backbone.validate();
  task.validate();
  optim.validate();
  if (task.vocab_size != backbone.vocab_size) {
    throw ConfigError("config: task.vocab_size " + std::to_string(task.vocab_size) +
                      " differs from backbone.vocab_size " + std::to_string(backbone.vocab_size));
  }
  if (task.max_text_len() > backbone.max_seq_len) {
    throw ConfigError("config: task texts of up to " + std::to_string(task.max_text_len()) +
                      " tokens exceed max_seq_len " + std::to_string(backbone.max_seq_len));
  }
  if (peft.l == 0) throw ConfigError("config: peft.l must be >= 1");
  if (peft.l > backbone.max_prompt_len) {
    throw ConfigError("config: peft.l exceeds backbone.max_prompt_len");
  }
  if (peft.variant == VariantTag::kDePT && peft.m > peft.l) {
    throw ConfigError("config: peft.m must not exceed peft.l");
  }
  if (!(peft.alpha1 > 0) || !(peft.alpha2 > 0)) throw ConfigError("config: learning rates must be positive");
  if (train.batch_size == 0 || train.steps == 0 || train.eval_every == 0 || train.eval_batch == 0) {
    throw ConfigError("config: train.batch_size, steps, eval_every and eval_batch must be positive");
  }
  if (pretrain.steps == 0 || pretrain.batch_size == 0) {
    throw ConfigError("config: pretrain.steps and batch_size must be positive");
  }
  if (pretrain.max_prefix + 0 > backbone.max_prompt_len) {
    throw ConfigError("config: pretrain.max_prefix exceeds backbone.max_prompt_len");
  }
  if (bench.repeats < 3) throw ConfigError("config: bench.repeats must be >= 3");
  if (bench.l > backbone.max_prompt_len) throw ConfigError("config: bench.l exceeds max_prompt_len");
  for (auto m : bench.m_values) {
    if (m > bench.l) throw ConfigError("config: bench.m_values entries must be <= bench.l");
  }
}

std::string to_json(const RunConfig& cfg, int indent) { return to_document(cfg).dump(indent); }

RunConfig run_config_from_json(const std::string& text) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: invalid JSON: ") + e.what());
  }
  try {
    return from_document(doc);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
}

std::string apply_overrides(const std::string& json_text,
                            const std::vector<std::pair<std::string, std::string>>& overrides) {
  json doc;
  try {
    doc = json::parse(json_text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: invalid JSON: ") + e.what());
  }
  const json schema = to_document(RunConfig{});
  for (const auto& [path, value] : overrides) {
    const json::json_pointer ptr("/" + [&] {
      std::string p = path;
      for (auto& ch : p) {
        if (ch == '.') ch = '/';
      }
      return p;
    }());
    if (!schema.contains(ptr) || schema.at(ptr).is_object()) {
      throw ConfigError("config: unknown override '" + path + "'");
    }
    doc[ptr] = coerce(path, schema.at(ptr), value);
  }
  return doc.dump(2);
}

std::vector<std::string> config_paths() {
  std::vector<std::string> out;
  collect_paths(to_document(RunConfig{}), "", out);
  return out;
}

}  // namespace dept
