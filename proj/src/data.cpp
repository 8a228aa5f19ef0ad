#include "dki/data.hpp"

#include <algorithm>
#include <fstream>
#include <random>
#include <set>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

namespace dki {

namespace {

struct Marker {
  const char* text;
  int32_t id;
};
constexpr Marker kMarkers[] = {
    {"[BOS]", TokenizerSpec::kBos}, {"[PAD]", TokenizerSpec::kPad},
    {"[USR]", TokenizerSpec::kUsr}, {"[SYS]", TokenizerSpec::kSys},
    {"[SEP]", TokenizerSpec::kSep},
};

}  // namespace

TokenIds tokenize_bytes(const std::string& text) {
  TokenIds out;
  out.reserve(text.size());
  for (unsigned char c : text) out.push_back(static_cast<int32_t>(c));
  return out;
}

TokenIds tokenize(const std::string& text) {
  TokenIds out;
  out.reserve(text.size());
  size_t i = 0;
  while (i < text.size()) {
    bool matched = false;
    if (text[i] == '[') {
      for (const Marker& m : kMarkers) {
        size_t len = std::strlen(m.text);
        if (text.compare(i, len, m.text) == 0) {
          out.push_back(m.id);
          i += len;
          matched = true;
          break;
        }
      }
    }
    if (!matched) out.push_back(static_cast<unsigned char>(text[i++]));
  }
  return out;
}

std::string detokenize(const TokenIds& ids) {
  std::string out;
  for (int32_t id : ids) {
    if (id < 0 || id >= TokenizerSpec::kVocabSize)
      throw std::invalid_argument("detokenize: token id " + std::to_string(id) +
                                  " outside vocab");
    if (id < TokenizerSpec::kByteCount) {
      out.push_back(static_cast<char>(id));
    } else {
      for (const Marker& m : kMarkers)
        if (m.id == id) {
          out += m.text;
          break;
        }
    }
  }
  return out;
}

TokenIds Rendered::knowledge_segment() const {
  TokenIds out;
  for (size_t i = 0; i < ids.size(); ++i)
    if (roles[i] == Role::Know) out.push_back(ids[i]);
  return out;
}

TokenIds Rendered::plain_sequence() const {
  TokenIds out;
  for (size_t i = 0; i < ids.size(); ++i)
    if (roles[i] != Role::Know) out.push_back(ids[i]);
  return out;
}

Mask Rendered::target_token_mask() const {
  Mask m(ids.size(), 0);
  bool after_sys = false;
  for (size_t i = 0; i < ids.size(); ++i) {
    if (after_sys) m[i] = 1;
    if (ids[i] == TokenizerSpec::kSys && roles[i] == Role::Sys) after_sys = true;
  }
  return m;
}

Mask Rendered::ce_row_mask() const {
  Mask tok = target_token_mask();
  Mask m(ids.size(), 0);
  for (size_t i = 0; i + 1 < ids.size(); ++i) m[i] = tok[i + 1];
  return m;
}

Mask Rendered::lm_row_mask() const {
  Mask m(ids.size(), 0);
  for (size_t i = 0; i + 1 < ids.size(); ++i) m[i] = 1;
  return m;
}

Rendered render(const KnowledgeSample& sample, int max_context) {
  if (sample.source.empty())
    throw std::invalid_argument("render: empty source");
  if (sample.target.empty())
    throw std::invalid_argument("render: empty target");
  for (const auto& k : sample.knowledge)
    if (k.empty()) throw std::invalid_argument("render: empty knowledge string");

  Rendered r;
  auto push = [&r](int32_t id, Role role) {
    r.ids.push_back(id);
    r.roles.push_back(role);
  };
  auto push_bytes = [&push](const std::string& s, Role role) {
    for (unsigned char c : s) push(static_cast<int32_t>(c), role);
  };

  push(TokenizerSpec::kBos, Role::Bos);
  if (!sample.knowledge.empty()) {
    push_bytes("Imagine that { ", Role::Know);
    for (size_t i = 0; i < sample.knowledge.size(); ++i) {
      if (i) {
        push_bytes(" ", Role::Know);
        push(TokenizerSpec::kSep, Role::Know);
        push_bytes(" ", Role::Know);
      }
      push_bytes(sample.knowledge[i], Role::Know);
    }
    push_bytes(" }", Role::Know);
  }
  push(TokenizerSpec::kUsr, Role::Usr);
  push_bytes(sample.source, Role::Usr);
  push(TokenizerSpec::kSys, Role::Sys);
  push_bytes(sample.target, Role::Sys);

  for (size_t i = 0; i < r.roles.size(); ++i)
    if (r.roles[i] == Role::Know) r.k_len += 1;

  if (max_context > 0 && r.size() > max_context)
    throw std::length_error("render: sequence of " + std::to_string(r.size()) +
                            " tokens exceeds max_context " +
                            std::to_string(max_context));
  return r;
}

// ---- JSONL ----

using nlohmann::json;

std::vector<KnowledgeSample> load_jsonl(const std::string& path,
                                        JsonlReport* report) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("load_jsonl: cannot open " + path);
  std::vector<KnowledgeSample> out;
  std::string line;
  int lineno = 0;
  auto fail = [&](const std::string& msg) {
    if (report) report->errors.push_back({lineno, msg});
  };
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    json j = json::parse(line, nullptr, false);
    if (j.is_discarded()) {
      fail("invalid JSON");
      continue;
    }
    if (!j.contains("knowledge") || !j["knowledge"].is_array()) {
      fail("missing or non-array 'knowledge'");
      continue;
    }
    if (!j.contains("source") || !j["source"].is_string()) {
      fail("missing 'source'");
      continue;
    }
    if (!j.contains("target") || !j["target"].is_string()) {
      fail("missing 'target'");
      continue;
    }
    KnowledgeSample s;
    bool ok = true;
    for (const auto& k : j["knowledge"]) {
      if (!k.is_string()) {
        fail("non-string knowledge entry");
        ok = false;
        break;
      }
      s.knowledge.push_back(k.get<std::string>());
    }
    if (!ok) continue;
    s.source = j["source"].get<std::string>();
    s.target = j["target"].get<std::string>();
    if (s.target.empty()) {
      fail("empty target (sample would have no scored tokens)");
      continue;
    }
    if (s.source.empty()) {
      fail("empty source");
      continue;
    }
    out.push_back(std::move(s));
  }
  return out;
}

void write_jsonl(const std::string& path,
                 const std::vector<KnowledgeSample>& samples) {
  std::ofstream outf(path);
  if (!outf) throw std::runtime_error("write_jsonl: cannot open " + path);
  for (const auto& s : samples) {
    json j;
    j["knowledge"] = s.knowledge;
    j["source"] = s.source;
    j["target"] = s.target;
    outf << j.dump() << "\n";
  }
}

std::vector<EditSample> load_edits_jsonl(const std::string& path,
                                         JsonlReport* report) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("load_edits_jsonl: cannot open " + path);
  std::vector<EditSample> out;
  std::string line;
  int lineno = 0;
  auto fail = [&](const std::string& msg) {
    if (report) report->errors.push_back({lineno, msg});
  };
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    json j = json::parse(line, nullptr, false);
    if (j.is_discarded()) {
      fail("invalid JSON");
      continue;
    }
    const char* keys[] = {"subject", "relation", "true_object", "counter_object"};
    bool ok = true;
    for (const char* k : keys)
      if (!j.contains(k) || !j[k].is_string()) {
        fail(std::string("missing '") + k + "'");
        ok = false;
        break;
      }
    if (!ok) continue;
    EditSample e;
    e.subject = j["subject"].get<std::string>();
    e.relation = j["relation"].get<std::string>();
    e.true_object = j["true_object"].get<std::string>();
    e.counter_object = j["counter_object"].get<std::string>();
    if (j.contains("paraphrases"))
      for (const auto& p : j["paraphrases"]) e.paraphrases.push_back(p.get<std::string>());
    if (j.contains("neighborhood"))
      for (const auto& p : j["neighborhood"]) e.neighborhood.push_back(p.get<std::string>());
    if (e.counter_object == e.true_object) {
      fail("counter_object equals true_object");
      continue;
    }
    out.push_back(std::move(e));
  }
  return out;
}

void write_edits_jsonl(const std::string& path,
                       const std::vector<EditSample>& samples) {
  std::ofstream outf(path);
  if (!outf) throw std::runtime_error("write_edits_jsonl: cannot open " + path);
  for (const auto& e : samples) {
    json j;
    j["subject"] = e.subject;
    j["relation"] = e.relation;
    j["true_object"] = e.true_object;
    j["counter_object"] = e.counter_object;
    j["paraphrases"] = e.paraphrases;
    j["neighborhood"] = e.neighborhood;
    outf << j.dump() << "\n";
  }
}

// ---- generators ----

namespace {

// Value alphabet is small so per-character chance level is well defined;
// keys use the full lowercase range.
constexpr char kValueAlphabet[] = "bcdfghjkmnpqrstv";
constexpr int kValueLen = 4;
constexpr int kKeyLen = 4;

std::string random_word(std::mt19937_64& rng, const char* alphabet,
                        size_t alphabet_size, int len) {
  std::uniform_int_distribution<size_t> pick(0, alphabet_size - 1);
  std::string s;
  for (int i = 0; i < len; ++i) s.push_back(alphabet[pick(rng)]);
  return s;
}

}  // namespace

KvDataset gen_kv_dataset(int n_entities, int n_distractors, uint64_t seed) {
  if (n_entities < 3)
    throw std::invalid_argument("gen_kv_dataset: need at least 3 entities");
  if (n_distractors < 0)
    throw std::invalid_argument("gen_kv_dataset: negative distractor count");
  std::mt19937_64 rng(seed);
  constexpr char kKeyAlphabet[] = "abcdefghijklmnopqrstuvwxyz";

  std::vector<std::pair<std::string, std::string>> entities;
  std::set<std::string> used;
  while (static_cast<int>(entities.size()) < n_entities) {
    std::string key = random_word(rng, kKeyAlphabet, 26, kKeyLen);
    if (!used.insert(key).second) continue;
    entities.emplace_back(key, random_word(rng, kValueAlphabet,
                                           sizeof(kValueAlphabet) - 1,
                                           kValueLen));
  }

  // Split by entity: 80/10/10.
  int n_val = std::max(1, n_entities / 10);
  int n_test = std::max(1, n_entities / 10);
  int n_train = n_entities - n_val - n_test;

  auto build_split = [&](int begin, int count) {
    std::vector<KnowledgeSample> out;
    for (int i = begin; i < begin + count; ++i) {
      const auto& [key, value] = entities[i];
      KnowledgeSample s;
      s.knowledge.push_back(key + " is " + value);
      std::uniform_int_distribution<int> pick(begin, begin + count - 1);
      std::set<int> chosen{i};
      while (static_cast<int>(s.knowledge.size()) <
                 1 + std::min(n_distractors, count - 1)) {
        int j = pick(rng);
        if (!chosen.insert(j).second) continue;
        s.knowledge.push_back(entities[j].first + " is " + entities[j].second);
      }
      std::shuffle(s.knowledge.begin(), s.knowledge.end(), rng);
      s.source = "what is " + key + "?";
      s.target = value;
      out.push_back(std::move(s));
    }
    return out;
  };

  KvDataset ds;
  ds.train = build_split(0, n_train);
  ds.val = build_split(n_train, n_val);
  ds.test = build_split(n_train + n_val, n_test);
  return ds;
}

namespace {

const std::vector<std::string> kFirstNames = {
    "Tavin",  "Mira",   "Orel",  "Sana",  "Brisk", "Yori",
    "Clema",  "Doran",  "Elvi",  "Fenn",  "Galia", "Harn",
    "Ilka",   "Joss",   "Kovan", "Lumi",  "Marek", "Nola",
    "Osric",  "Petra",  "Quill", "Rasa",  "Stellan", "Tova"};
const std::vector<std::string> kLastNames = {
    "Morr",  "Velt",  "Ashby", "Krane", "Solen", "Thorp",
    "Ulmer", "Vance", "Weiss", "Yarrow", "Zeller", "Brant",
    "Corvi", "Dray",  "Ebner", "Falk",  "Grove", "Holt",
    "Inber", "Jarv",  "Kessl", "Lorn",  "Maren", "Nix"};

struct RelationSpec {
  std::string relation;                    // used in the base prompt
  std::vector<std::string> paraphrase_templates;  // "%s" is the subject
  std::vector<std::string> objects;
};

const std::vector<RelationSpec> kRelations = {
    {"was born in",
     {"The birthplace of %s is", "%s comes from"},
     {"Valtria", "Norpool", "Essgard", "Quillon", "Marvale", "Tarnwick",
      "Ostenn", "Drelby"}},
    {"works as a",
     {"The profession of %s is a", "%s earns a living as a"},
     {"baker", "surveyor", "falconer", "glazier", "cooper", "chandler",
      "farrier", "scrivener"}},
    {"speaks",
     {"The native language of %s is", "%s talks to friends in"},
     {"Velsic", "Ormian", "Trado", "Quenti", "Maresh", "Yolen", "Sorbic",
      "Ferran"}},
};

std::string expand_template(const std::string& tmpl, const std::string& subject) {
  std::string out = tmpl;
  size_t pos = out.find("%s");
  if (pos != std::string::npos) out.replace(pos, 2, subject);
  return out;
}

}  // namespace

std::vector<EditSample> gen_counterfact_dataset(int n_edits, uint64_t seed) {
  if (n_edits < 1) throw std::invalid_argument("gen_counterfact_dataset: n_edits < 1");
  std::mt19937_64 rng(seed);

  // Unique subjects: edits plus two neighborhood subjects per edit.
  std::vector<std::string> subjects;
  std::set<std::string> used;
  while (static_cast<int>(subjects.size()) < 3 * n_edits) {
    std::uniform_int_distribution<size_t> pf(0, kFirstNames.size() - 1);
    std::uniform_int_distribution<size_t> pl(0, kLastNames.size() - 1);
    std::string name = kFirstNames[pf(rng)] + " " + kLastNames[pl(rng)];
    if (used.insert(name).second) subjects.push_back(name);
  }

  std::vector<EditSample> out;
  for (int i = 0; i < n_edits; ++i) {
    const RelationSpec& rel = kRelations[i % kRelations.size()];
    EditSample e;
    e.subject = subjects[3 * i];
    e.relation = rel.relation;
    std::uniform_int_distribution<size_t> po(0, rel.objects.size() - 1);
    size_t true_idx = po(rng);
    size_t counter_idx = po(rng);
    while (counter_idx == true_idx) counter_idx = po(rng);
    e.true_object = rel.objects[true_idx];
    e.counter_object = rel.objects[counter_idx];
    for (const auto& tmpl : rel.paraphrase_templates)
      e.paraphrases.push_back(expand_template(tmpl, e.subject));
    // Neighborhood subjects share the relation and the true object.
    e.neighborhood.push_back(subjects[3 * i + 1] + " " + rel.relation);
    e.neighborhood.push_back(subjects[3 * i + 2] + " " + rel.relation);
    out.push_back(std::move(e));
  }
  return out;
}

std::vector<KnowledgeSample> counterfact_fact_samples(
    const std::vector<EditSample>& edits) {
  std::vector<KnowledgeSample> out;
  for (const auto& e : edits) {
    auto add = [&](const std::string& prompt) {
      KnowledgeSample s;
      s.source = prompt;
      s.target = " " + e.true_object;
      out.push_back(std::move(s));
    };
    add(e.prompt());
    for (const auto& p : e.paraphrases) add(p);
    for (const auto& p : e.neighborhood) add(p);
  }
  return out;
}

namespace {

const std::vector<std::string> kRuleEntities = {
    "the bear", "the dog",  "the fox",   "the owl",   "the crab", "the mole",
    "the lynx", "the hare", "the stork", "the otter", "the wasp", "the toad"};
const std::vector<std::string> kRuleAttrs = {
    "green", "kind",  "swift", "heavy", "bright", "quiet",
    "round", "rough", "young", "bold",  "pale",   "warm"};

}  // namespace

std::vector<KnowledgeSample> gen_rules_dataset(int n_samples, uint64_t seed) {
  if (n_samples < 3) throw std::invalid_argument("gen_rules_dataset: n_samples < 3");
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<size_t> pe(0, kRuleEntities.size() - 1);
  std::uniform_int_distribution<size_t> pa(0, kRuleAttrs.size() - 1);
  std::bernoulli_distribution coin(0.5);

  std::vector<KnowledgeSample> out;
  for (int i = 0; i < n_samples; ++i) {
    int label = i % 3;  // 0 True, 1 False, 2 Unknown — balanced by cycling
    std::string subj = kRuleEntities[pe(rng)];
    size_t attr_idx = pa(rng);
    std::string attr = kRuleAttrs[attr_idx];

    KnowledgeSample s;
    std::set<std::pair<std::string, std::string>> mentioned;
    auto add_fact = [&](const std::string& ent, const std::string& at,
                        bool negated) {
      s.knowledge.push_back(ent + " is " + (negated ? "not " : "") + at);
      mentioned.insert({ent, at});
    };
    auto add_rule = [&](const std::string& ent, const std::string& pre,
                        const std::string& post, bool neg_post) {
      s.knowledge.push_back("if " + ent + " is " + pre + " then " + ent +
                            " is " + (neg_post ? "not " : "") + post);
      mentioned.insert({ent, post});
    };

    if (label == 0) {
      if (coin(rng)) {
        add_fact(subj, attr, false);  // stated fact
      } else {
        std::string pre = kRuleAttrs[(attr_idx + 1) % kRuleAttrs.size()];
        add_fact(subj, pre, false);
        add_rule(subj, pre, attr, false);  // one-hop derivation
      }
    } else if (label == 1) {
      if (coin(rng)) {
        add_fact(subj, attr, true);
      } else {
        std::string pre = kRuleAttrs[(attr_idx + 1) % kRuleAttrs.size()];
        add_fact(subj, pre, false);
        add_rule(subj, pre, attr, true);
      }
    } else {
      // Unknown: the (subj, attr) pair must stay unmentioned. Half the time
      // the subject is entirely absent from the knowledge.
      if (coin(rng)) mentioned.insert({subj, ""});  // forbid all facts on subj
    }

    // Filler facts and rules about other entity/attribute pairs.
    int fillers = 2 + static_cast<int>(rng() % 3);
    int guard = 0;
    while (fillers > 0 && guard++ < 100) {
      std::string ent = kRuleEntities[pe(rng)];
      std::string at = kRuleAttrs[pa(rng)];
      if (mentioned.count({ent, at}) || mentioned.count({ent, ""})) continue;
      if (ent == subj && at == attr) continue;
      if (label == 2 && ent == subj && mentioned.count({subj, ""})) continue;
      add_fact(ent, at, coin(rng));
      --fillers;
    }
    if (s.knowledge.empty()) add_fact(kRuleEntities[(pe(rng) + 1) % 12],
                                      kRuleAttrs[pa(rng)], false);
    std::shuffle(s.knowledge.begin(), s.knowledge.end(), rng);

    s.source = subj + " is " + attr + ".";
    s.target = label == 0 ? "True" : label == 1 ? "False" : "Unknown";
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace dki
