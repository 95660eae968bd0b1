#include "bindlab/tasks.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include "bindlab/error.hpp"

namespace bindlab {

// ---------------------------------------------------------------- vocabulary

namespace {

// Order matters: token ids are positions in this list.
const char* const kTemplateWords[] = {
    "<nl>", ".", ",", "?", ":", "and", "the", "a", "of", "in", "is",
    "lives", "live", "likes", "eating", "respectively", "question", "answer",
    "which", "city", "does", "shape", "colored", "food", "like", "classify",
    "review", "options", "about", "occupation", "has",
};

const char* const kNames[] = {
    "Alice", "Bob", "Carol", "David", "Emma", "Frank", "Grace", "Henry", "Irene", "Jack",
    "Karen", "Leo", "Maria", "Nathan", "Olivia", "Peter", "Quinn", "Rachel", "Sam", "Tina",
    "Umar", "Vera", "Walter", "Xena", "Yara", "Zack", "Aaron", "Bella", "Caleb", "Diana",
    "Ethan", "Fiona", "Gavin", "Hannah", "Isaac", "Julia", "Kevin", "Laura", "Mason", "Nora",
    "Oscar", "Paula", "Ryan", "Sarah", "Tyler", "Ursula", "Victor", "Wendy", "Adam", "Beth",
    "Chris", "Dana", "Eric", "Faith", "Greg", "Holly", "Ivan", "Jane", "Kyle", "Lily",
    "Mark", "Nina", "Owen", "Penny", "Ralph", "Sophie", "Tom", "Uma", "Vince", "Will",
    "Amy", "Brian", "Cora", "Dylan", "Elena", "Felix", "Gina", "Hugo", "Iris", "Joel",
};

const char* const kCountryCapital[][2] = {
    {"France", "Paris"},       {"Germany", "Berlin"},      {"Italy", "Rome"},
    {"Spain", "Madrid"},       {"Japan", "Tokyo"},         {"China", "Beijing"},
    {"Russia", "Moscow"},      {"Egypt", "Cairo"},         {"Kenya", "Nairobi"},
    {"Peru", "Lima"},          {"Chile", "Santiago"},      {"Greece", "Athens"},
    {"Turkey", "Ankara"},      {"Iran", "Tehran"},         {"Iraq", "Baghdad"},
    {"Thailand", "Bangkok"},   {"Vietnam", "Hanoi"},       {"Austria", "Vienna"},
    {"Hungary", "Budapest"},   {"Poland", "Warsaw"},       {"Norway", "Oslo"},
    {"Sweden", "Stockholm"},   {"Finland", "Helsinki"},    {"Denmark", "Copenhagen"},
    {"Ireland", "Dublin"},     {"Portugal", "Lisbon"},     {"Belgium", "Brussels"},
    {"Netherlands", "Amsterdam"}, {"Cuba", "Havana"},      {"Canada", "Ottawa"},
    {"Australia", "Canberra"}, {"India", "Delhi"},         {"Pakistan", "Islamabad"},
    {"Nepal", "Kathmandu"},    {"Ghana", "Accra"},         {"Nigeria", "Abuja"},
    {"Morocco", "Rabat"},      {"Colombia", "Bogota"},     {"Venezuela", "Caracas"},
    {"Uganda", "Kampala"},
};

const char* const kFruits[] = {
    "apple", "banana", "cherry", "grape", "mango", "peach", "pear", "plum", "lemon", "lime",
    "kiwi", "melon", "papaya", "apricot", "fig", "guava", "lychee", "coconut", "pineapple",
    "raspberry", "blueberry", "strawberry", "blackberry", "cranberry", "nectarine",
    "tangerine", "pomegranate", "watermelon", "avocado", "persimmon",
};

const char* const kColors[] = {
    "red", "blue", "green", "yellow", "purple", "orange", "pink", "brown",
    "black", "white", "gray", "violet", "cyan", "magenta", "teal", "maroon",
};

const char* const kShapes[] = {
    "square", "circle", "triangle", "rectangle", "pentagon", "hexagon", "octagon", "oval",
    "star", "diamond", "heart", "cross", "crescent", "cube", "sphere", "cone",
};

const char* const kLabels[] = {"A", "B", "C", "D", "E"};
const char* const kSentiments[][2] = {{"Positive", "great"}, {"Negative", "awful"}};

// Multi-token surrogate attributes: three-word descriptions and the
// occupation each implies.
const char* const kOccupations[][4] = {
    {"treats", "sick", "patients", "doctor"},  {"grades", "student", "essays", "teacher"},
    {"flies", "passenger", "jets", "pilot"},   {"cooks", "restaurant", "meals", "chef"},
    {"grows", "wheat", "crops", "farmer"},     {"argues", "court", "cases", "lawyer"},
    {"paints", "canvas", "portraits", "painter"}, {"bakes", "fresh", "bread", "baker"},
    {"dresses", "wound", "bandages", "nurse"}, {"fixes", "leaking", "pipes", "plumber"},
    {"writes", "mystery", "novels", "writer"}, {"sings", "opera", "arias", "singer"},
};

}  // namespace

Vocabulary::Vocabulary(const std::vector<std::string>& words) {
  for (const auto& w : words) {
    if (find(w)) throw ConfigError("Vocabulary: duplicate word '" + w + "'");
    add(w);
  }
}

Vocabulary Vocabulary::builtin() {
  Vocabulary v;
  for (const char* w : kTemplateWords) v.add(w);
  for (const char* w : kLabels) v.add(w);
  for (const auto& s : kSentiments) {
    v.add(s[0]);
    v.add(s[1]);
  }
  for (const char* w : kNames) v.add(w);
  for (const auto& cc : kCountryCapital) v.add(cc[0]);
  for (const auto& cc : kCountryCapital) v.add(cc[1]);
  for (const char* w : kFruits) v.add(w);
  for (const char* w : kColors) v.add(w);
  for (const char* w : kShapes) v.add(w);
  for (const auto& o : kOccupations) {
    for (const char* w : o) v.add(w);
  }
  return v;
}

Token Vocabulary::add(std::string_view word) {
  if (word.empty() || word.find_first_of(" \t\r\n") != std::string_view::npos) {
    throw ConfigError("Vocabulary: words must be non-empty and whitespace-free");
  }
  if (auto t = find(word)) return *t;
  const auto t = static_cast<Token>(words_.size());
  words_.emplace_back(word);
  index_.emplace(words_.back(), t);
  return t;
}

std::optional<Token> Vocabulary::find(std::string_view word) const {
  auto it = index_.find(std::string(word));
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

Token Vocabulary::id(std::string_view word) const {
  if (auto t = find(word)) return *t;
  throw InputError("unknown word '" + std::string(word) + "'");
}

const std::string& Vocabulary::word(Token t) const {
  if (!contains(t)) throw InputError("token id " + std::to_string(t) + " out of vocabulary");
  return words_[static_cast<std::size_t>(t)];
}

std::vector<Token> Vocabulary::tokenize(std::string_view text) const {
  std::vector<Token> out;
  std::istringstream in{std::string(text)};
  std::string w;
  while (in >> w) out.push_back(id(w));
  return out;
}

std::string Vocabulary::detokenize(std::span<const Token> tokens) const {
  std::string out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i) out += ' ';
    out += word(tokens[i]);
  }
  return out;
}

// ---------------------------------------------------------------- TaskSpec

bool TaskSpec::has_entity(Token t) const {
  return std::find(entities.begin(), entities.end(), t) != entities.end();
}

bool TaskSpec::has_attribute(const Phrase& a) const {
  return std::find(attributes.begin(), attributes.end(), a) != attributes.end();
}

void TaskSpec::validate() const {
  const auto fail = [this](const std::string& msg) {
    throw ConfigError("task '" + name + "': " + msg);
  };
  if (entities.empty() || attributes.empty()) fail("entity and attribute pools must be non-empty");
  if (std::set<Token>(entities.begin(), entities.end()).size() != entities.size()) {
    fail("duplicate entity");
  }
  if (std::set<Phrase>(attributes.begin(), attributes.end()).size() != attributes.size()) {
    fail("duplicate attribute");
  }
  const std::size_t len = attributes.front().size();
  if (len == 0) fail("attributes must have at least one token");
  std::set<Token> entity_set(entities.begin(), entities.end());
  for (const auto& a : attributes) {
    if (a.size() != len) fail("attributes must all have the same token length");
    for (Token t : a) {
      if (entity_set.count(t)) fail("entity and attribute pools must be disjoint");
    }
  }
  int entity_slots = 0;
  int attribute_slots = 0;
  for (const auto& item : context_template) {
    if (item.kind == TemplateItem::Kind::Repeat) {
      for (const auto& b : item.body) {
        if (b.kind == TemplateItem::Kind::Entity) ++entity_slots;
        else if (b.kind == TemplateItem::Kind::Attribute) ++attribute_slots;
        else if (b.kind != TemplateItem::Kind::Literal) fail("repeat bodies may hold only literals and {E}/{A}");
      }
    } else if (item.kind != TemplateItem::Kind::Literal) {
      fail("context slots must appear inside a repeat block");
    }
  }
  if (entity_slots != 1 || attribute_slots != 1) {
    fail("context template must reference {E} and {A} exactly once");
  }
  bool has_query = false;
  bool uses_alias = false;
  for (const auto& item : query_template) {
    switch (item.kind) {
      case TemplateItem::Kind::Query: has_query = true; break;
      case TemplateItem::Kind::QueryAlias: has_query = uses_alias = true; break;
      case TemplateItem::Kind::Literal: break;
      default: fail("query template may hold only literals and {Q}/{R}");
    }
  }
  if (!has_query) fail("query template must reference the queried entity");
  if (query_template.empty()) fail("empty query template");
  if (uses_alias) {
    for (Token e : entities) {
      if (!query_alias.count(e)) fail("query alias missing for an entity");
    }
  }
  if (answer_mode == AnswerMode::Lookup) {
    std::set<Token> answers;
    for (const auto& a : attributes) {
      auto it = lookup.find(a);
      if (it == lookup.end()) fail("lookup table is not total over the attribute pool");
      answers.insert(it->second);
    }
    if (answers.size() != attributes.size()) fail("lookup table is not injective");
  } else if (len != 1) {
    fail("multi-token attributes require lookup answers");
  }
}

// ---------------------------------------------------------------- rendering

namespace {

void append(std::vector<Token>& out, std::span<const Token> xs) {
  out.insert(out.end(), xs.begin(), xs.end());
}

}  // namespace

ContextInstance make_context(const TaskSpec& task, std::span<const Token> entities,
                             std::span<const Phrase> attributes) {
  if (entities.size() != attributes.size()) {
    throw InputError("make_context: entity/attribute count mismatch");
  }
  const std::size_t n = entities.size();
  if (n == 0) throw InputError("make_context: empty context");
  for (Token e : entities) {
    if (!task.has_entity(e)) throw InputError("make_context: entity not in pool of " + task.name);
  }
  for (const auto& a : attributes) {
    if (!task.has_attribute(a)) throw InputError("make_context: attribute not in pool of " + task.name);
  }
  ContextInstance ctx;
  ctx.task = task.name;
  ctx.n = n;
  ctx.entities.assign(entities.begin(), entities.end());
  ctx.attributes.assign(attributes.begin(), attributes.end());
  ctx.layout.entity.resize(n);
  ctx.layout.attribute.resize(n);

  for (const auto& item : task.context_template) {
    if (item.kind == TemplateItem::Kind::Literal) {
      ctx.tokens.push_back(item.literal);
      continue;
    }
    for (std::size_t k = 0; k < n; ++k) {
      if (k > 0) {
        const auto& s = (k + 1 == n && !item.last_sep.empty()) ? item.last_sep : item.sep;
        append(ctx.tokens, s);
      }
      const std::size_t line_begin = ctx.tokens.size();
      for (const auto& b : item.body) {
        switch (b.kind) {
          case TemplateItem::Kind::Entity:
            ctx.layout.entity[k] = {ctx.tokens.size(), 2};
            ctx.tokens.push_back(entities[k]);
            break;
          case TemplateItem::Kind::Attribute:
            ctx.layout.attribute[k] = {ctx.tokens.size(), attributes[k].size()};
            append(ctx.tokens, attributes[k]);
            break;
          default:
            ctx.tokens.push_back(b.literal);
        }
      }
      if (item.line) ctx.layout.line.push_back({line_begin, ctx.tokens.size() - line_begin});
    }
  }
  for (const auto& s : ctx.layout.entity) {
    if (s.end() > ctx.tokens.size()) {
      throw ConfigError("task '" + task.name + "': entity must be followed by another context token");
    }
  }
  return ctx;
}

ContextInstance generate_context(const TaskSpec& task, std::size_t n, SeededRng& rng) {
  if (n < 2 || n > task.max_pairs()) {
    throw SamplingError("generate_context: n=" + std::to_string(n) + " outside [2, " +
                        std::to_string(task.max_pairs()) + "] for task " + task.name);
  }
  // Partial Fisher-Yates over pool indices.
  auto sample = [&rng, n](std::size_t pool) {
    std::vector<std::size_t> idx(pool);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    for (std::size_t i = 0; i < n; ++i) {
      const auto j = i + static_cast<std::size_t>(rng.uniform_index(pool - i));
      std::swap(idx[i], idx[j]);
    }
    idx.resize(n);
    return idx;
  };
  const auto ei = sample(task.entities.size());
  const auto ai = sample(task.attributes.size());
  std::vector<Token> entities;
  std::vector<Phrase> attributes;
  for (auto i : ei) entities.push_back(task.entities[i]);
  for (auto i : ai) attributes.push_back(task.attributes[i]);
  return make_context(task, entities, attributes);
}

QueryRendering render_query(const TaskSpec& task, const ContextInstance& /*ctx*/, Token entity) {
  if (!task.has_entity(entity)) {
    throw InputError("render_query: entity " + std::to_string(entity) + " not in pool of " + task.name);
  }
  QueryRendering q;
  q.entity = entity;
  for (const auto& item : task.query_template) {
    switch (item.kind) {
      case TemplateItem::Kind::Query: q.tokens.push_back(entity); break;
      case TemplateItem::Kind::QueryAlias: q.tokens.push_back(task.query_alias.at(entity)); break;
      default: q.tokens.push_back(item.literal);
    }
  }
  q.answer_slot = q.tokens.size() - 1;
  return q;
}

Token answer_token(const TaskSpec& task, const Phrase& attribute) {
  if (!task.has_attribute(attribute)) throw InputError("answer_token: attribute not in pool of " + task.name);
  if (task.answer_mode == AnswerMode::Direct) return attribute.front();
  auto it = task.lookup.find(attribute);
  if (it == task.lookup.end()) throw ConfigError("answer_token: missing lookup entry in " + task.name);
  return it->second;
}

std::vector<Token> answer_pool(const TaskSpec& task) {
  std::vector<Token> out;
  out.reserve(task.attributes.size());
  for (const auto& a : task.attributes) out.push_back(answer_token(task, a));
  return out;
}

// ---------------------------------------------------------------- parsing

namespace {

bool match_literals(std::span<const Token> tokens, std::size_t& pos, std::span<const Token> lits) {
  if (pos + lits.size() > tokens.size()) return false;
  for (Token t : lits) {
    if (tokens[pos++] != t) return false;
  }
  return true;
}

std::optional<ParsedContext> parse_with_n(const TaskSpec& task, std::span<const Token> tokens,
                                          std::size_t n) {
  ParsedContext out;
  out.entities.resize(n);
  out.attributes.resize(n);
  const std::size_t alen = task.attribute_length();
  std::size_t pos = 0;
  for (const auto& item : task.context_template) {
    if (item.kind == TemplateItem::Kind::Literal) {
      if (pos >= tokens.size() || tokens[pos++] != item.literal) return std::nullopt;
      continue;
    }
    for (std::size_t k = 0; k < n; ++k) {
      if (k > 0) {
        const auto& s = (k + 1 == n && !item.last_sep.empty()) ? item.last_sep : item.sep;
        if (!match_literals(tokens, pos, s)) return std::nullopt;
      }
      for (const auto& b : item.body) {
        if (b.kind == TemplateItem::Kind::Entity) {
          if (pos >= tokens.size() || !task.has_entity(tokens[pos])) return std::nullopt;
          out.entities[k] = tokens[pos++];
        } else if (b.kind == TemplateItem::Kind::Attribute) {
          if (pos + alen > tokens.size()) return std::nullopt;
          Phrase a(tokens.begin() + static_cast<std::ptrdiff_t>(pos),
                   tokens.begin() + static_cast<std::ptrdiff_t>(pos + alen));
          if (!task.has_attribute(a)) return std::nullopt;
          out.attributes[k] = std::move(a);
          pos += alen;
        } else {
          if (pos >= tokens.size() || tokens[pos++] != b.literal) return std::nullopt;
        }
      }
    }
  }
  if (pos != tokens.size()) return std::nullopt;
  return out;
}

}  // namespace

std::optional<ParsedContext> parse_context(const TaskSpec& task, std::span<const Token> tokens) {
  for (std::size_t n = 1; n <= task.max_pairs(); ++n) {
    if (auto p = parse_with_n(task, tokens, n)) return p;
  }
  return std::nullopt;
}

// ---------------------------------------------------------------- JSON

namespace {

TemplateItem item_from_json(const nlohmann::json& j, Vocabulary& vocab, bool allow_repeat) {
  TemplateItem item;
  if (j.is_string()) {
    const auto s = j.get<std::string>();
    if (s == "{E}") item.kind = TemplateItem::Kind::Entity;
    else if (s == "{A}") item.kind = TemplateItem::Kind::Attribute;
    else if (s == "{Q}") item.kind = TemplateItem::Kind::Query;
    else if (s == "{R}") item.kind = TemplateItem::Kind::QueryAlias;
    else item.literal = vocab.add(s);
    return item;
  }
  if (!allow_repeat || !j.is_object() || !j.contains("repeat")) {
    throw ConfigError("template item must be a word, a slot, or a top-level {\"repeat\": [...]} block");
  }
  item.kind = TemplateItem::Kind::Repeat;
  for (const auto& b : j.at("repeat")) item.body.push_back(item_from_json(b, vocab, false));
  for (const auto& w : j.value("sep", nlohmann::json::array())) item.sep.push_back(vocab.add(w.get<std::string>()));
  for (const auto& w : j.value("last_sep", nlohmann::json::array())) {
    item.last_sep.push_back(vocab.add(w.get<std::string>()));
  }
  item.line = j.value("line", false);
  return item;
}

nlohmann::json item_to_json(const TemplateItem& item, const Vocabulary& vocab) {
  switch (item.kind) {
    case TemplateItem::Kind::Entity: return "{E}";
    case TemplateItem::Kind::Attribute: return "{A}";
    case TemplateItem::Kind::Query: return "{Q}";
    case TemplateItem::Kind::QueryAlias: return "{R}";
    case TemplateItem::Kind::Literal: return vocab.word(item.literal);
    case TemplateItem::Kind::Repeat: break;
  }
  nlohmann::json j;
  j["repeat"] = nlohmann::json::array();
  for (const auto& b : item.body) j["repeat"].push_back(item_to_json(b, vocab));
  auto words = [&vocab](const std::vector<Token>& ts) {
    nlohmann::json a = nlohmann::json::array();
    for (Token t : ts) a.push_back(vocab.word(t));
    return a;
  };
  j["sep"] = words(item.sep);
  j["last_sep"] = words(item.last_sep);
  j["line"] = item.line;
  return j;
}

Phrase phrase_from_json(const nlohmann::json& j, Vocabulary& vocab) {
  Phrase p;
  if (j.is_string()) {
    std::istringstream in(j.get<std::string>());
    std::string w;
    while (in >> w) p.push_back(vocab.add(w));
  } else {
    for (const auto& w : j) p.push_back(vocab.add(w.get<std::string>()));
  }
  return p;
}

}  // namespace

TaskSpec task_from_json(const nlohmann::json& j, Vocabulary& vocab) {
  TaskSpec t;
  try {
    t.name = j.at("name").get<std::string>();
    for (const auto& e : j.at("entities")) t.entities.push_back(vocab.add(e.get<std::string>()));
    for (const auto& a : j.at("attributes")) t.attributes.push_back(phrase_from_json(a, vocab));
    for (const auto& item : j.at("context")) t.context_template.push_back(item_from_json(item, vocab, true));
    for (const auto& item : j.at("query")) t.query_template.push_back(item_from_json(item, vocab, false));
    const auto mode = j.value("answer_mode", std::string("direct"));
    if (mode == "direct") t.answer_mode = AnswerMode::Direct;
    else if (mode == "lookup") t.answer_mode = AnswerMode::Lookup;
    else throw ConfigError("answer_mode must be 'direct' or 'lookup'");
    const nlohmann::json lookup = j.value("lookup", nlohmann::json::object());
    for (const auto& [k, v] : lookup.items()) {
      t.lookup[phrase_from_json(k, vocab)] = vocab.add(v.get<std::string>());
    }
    const nlohmann::json alias = j.value("query_alias", nlohmann::json::object());
    for (const auto& [k, v] : alias.items()) {
      t.query_alias[vocab.add(k)] = vocab.add(v.get<std::string>());
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("task JSON: ") + e.what());
  }
  t.validate();
  return t;
}

nlohmann::json task_to_json(const TaskSpec& task, const Vocabulary& vocab) {
  nlohmann::json j;
  j["name"] = task.name;
  j["entities"] = nlohmann::json::array();
  for (Token e : task.entities) j["entities"].push_back(vocab.word(e));
  j["attributes"] = nlohmann::json::array();
  for (const auto& a : task.attributes) j["attributes"].push_back(vocab.detokenize(a));
  j["context"] = nlohmann::json::array();
  for (const auto& item : task.context_template) j["context"].push_back(item_to_json(item, vocab));
  j["query"] = nlohmann::json::array();
  for (const auto& item : task.query_template) j["query"].push_back(item_to_json(item, vocab));
  j["answer_mode"] = task.answer_mode == AnswerMode::Direct ? "direct" : "lookup";
  if (!task.lookup.empty()) {
    j["lookup"] = nlohmann::json::object();
    for (const auto& [a, ans] : task.lookup) j["lookup"][vocab.detokenize(a)] = vocab.word(ans);
  }
  if (!task.query_alias.empty()) {
    j["query_alias"] = nlohmann::json::object();
    for (const auto& [e, w] : task.query_alias) j["query_alias"][vocab.word(e)] = vocab.word(w);
  }
  return j;
}

// ---------------------------------------------------------------- suite

namespace {

nlohmann::json words_json(std::span<const char* const> ws) {
  nlohmann::json a = nlohmann::json::array();
  for (const char* w : ws) a.push_back(w);
  return a;
}

std::vector<nlohmann::json> builtin_task_json() {
  using nlohmann::json;
  const json names = words_json(kNames);
  json countries = json::array();
  json capitals_lookup = json::object();
  for (const auto& cc : kCountryCapital) {
    countries.push_back(cc[0]);
    capitals_lookup[cc[0]] = cc[1];
  }
  json occupations = json::array();
  json occupation_lookup = json::object();
  for (const auto& o : kOccupations) {
    const std::string phrase = std::string(o[0]) + " " + o[1] + " " + o[2];
    occupations.push_back(phrase);
    occupation_lookup[phrase] = o[3];
  }
  json sentiments = json::array();
  json aliases = json::object();
  for (const auto& s : kSentiments) {
    sentiments.push_back(s[0]);
    aliases[s[0]] = s[1];
  }
  const json capitals_query = json::parse(R"(["question", "{Q}", "?", "answer", "{Q}", "lives", "in"])");
  std::vector<json> tasks;
  tasks.push_back({{"name", "capitals"},
                   {"entities", names},
                   {"attributes", countries},
                   {"context", json::parse(R"([{"repeat": ["{E}", "lives", "in", "{A}", "."], "line": true}])")},
                   {"query", capitals_query},
                   {"answer_mode", "direct"}});
  tasks.push_back({{"name", "capitals_lookup"},
                   {"entities", names},
                   {"attributes", countries},
                   {"context", json::parse(R"([{"repeat": ["{E}", "lives", "in", "{A}", "."], "line": true}])")},
                   {"query", json::parse(R"(["question", "{Q}", "?", "answer", "{Q}", "lives", "in", "the", "city", "of"])")},
                   {"answer_mode", "lookup"},
                   {"lookup", capitals_lookup}});
  tasks.push_back({{"name", "parallel"},
                   {"entities", names},
                   {"attributes", countries},
                   {"context", json::parse(R"([{"repeat": ["{E}"], "sep": [","], "last_sep": ["and"]},
                                               "live", "in",
                                               {"repeat": ["{A}"], "sep": [","], "last_sep": ["and"]},
                                               "respectively", "."])")},
                   {"query", capitals_query},
                   {"answer_mode", "direct"}});
  tasks.push_back({{"name", "fruits"},
                   {"entities", names},
                   {"attributes", words_json(kFruits)},
                   {"context", json::parse(R"([{"repeat": ["{E}", "likes", "eating", "the", "{A}", "."], "line": true}])")},
                   {"query", json::parse(R"(["question", "{Q}", "?", "answer", "{Q}", "likes", "the"])")},
                   {"answer_mode", "direct"}});
  tasks.push_back({{"name", "shapes"},
                   {"entities", words_json(kColors)},
                   {"attributes", words_json(kShapes)},
                   {"context", json::parse(R"([{"repeat": ["the", "{A}", "is", "{E}", "."], "line": true}])")},
                   {"query", json::parse(R"(["question", "{Q}", "?", "answer", "the", "{Q}", "shape", "is"])")},
                   {"answer_mode", "direct"}});
  tasks.push_back({{"name", "mcq"},
                   {"entities", sentiments},
                   {"attributes", words_json(kLabels)},
                   {"context", json::parse(R"(["classify", "options", "<nl>",
                                               {"repeat": ["{A}", ":", "{E}", "<nl>"], "line": true}])")},
                   {"query", json::parse(R"(["review", "{R}", "answer", ":"])")},
                   {"answer_mode", "direct"},
                   {"query_alias", aliases}});
  tasks.push_back({{"name", "multitoken"},
                   {"entities", names},
                   {"attributes", occupations},
                   {"context", json::parse(R"([{"repeat": ["about", "{E}", ":", "{A}", "."], "line": true}])")},
                   {"query", json::parse(R"(["question", "{Q}", "occupation", "?", "answer", "{Q}", "has", "the", "occupation", "of"])")},
                   {"answer_mode", "lookup"},
                   {"lookup", occupation_lookup}});
  return tasks;
}

}  // namespace

TaskSuite TaskSuite::builtin() {
  TaskSuite suite;
  suite.vocab_ = Vocabulary::builtin();
  const std::size_t base_size = suite.vocab_.size();
  for (const auto& j : builtin_task_json()) suite.add_task(j);
  if (suite.vocab_.size() != base_size) {
    throw ConfigError("built-in tasks reference words missing from the built-in vocabulary");
  }
  return suite;
}

const TaskSpec& TaskSuite::task(const std::string& name) const {
  auto it = tasks_.find(name);
  if (it == tasks_.end()) throw ConfigError("unknown task '" + name + "'");
  return it->second;
}

std::vector<std::string> TaskSuite::task_names() const {
  std::vector<std::string> out;
  for (const auto& [name, _] : tasks_) out.push_back(name);
  return out;
}

void TaskSuite::add_task(const nlohmann::json& j) {
  TaskSpec t = task_from_json(j, vocab_);
  const std::string name = t.name;
  tasks_.insert_or_assign(name, std::move(t));
}

void TaskSuite::load_task_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open task file " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  if (j.is_array()) {
    for (const auto& t : j) add_task(t);
  } else {
    add_task(j);
  }
}

}  // namespace bindlab
