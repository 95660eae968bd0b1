#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "bindlab/numerics.hpp"

namespace bindlab {

using Token = std::int32_t;
/// An attribute is a fixed-length token phrase (length 1 for every task but
/// the multi-token surrogate).
using Phrase = std::vector<Token>;

/// Closed whitespace-delimited word vocabulary. Every entity and attribute
/// word is a single token by construction.
class Vocabulary {
 public:
  Vocabulary() = default;
  explicit Vocabulary(const std::vector<std::string>& words);

  /// Built-in word list (names, countries, capitals, fruits, colors, shapes,
  /// labels, template words). Ids are stable across builds.
  static Vocabulary builtin();

  Token add(std::string_view word);
  std::optional<Token> find(std::string_view word) const;
  /// Throws InputError for unknown words.
  Token id(std::string_view word) const;
  const std::string& word(Token t) const;
  bool contains(Token t) const { return t >= 0 && static_cast<std::size_t>(t) < words_.size(); }
  std::size_t size() const { return words_.size(); }
  const std::vector<std::string>& words() const { return words_; }

  std::vector<Token> tokenize(std::string_view text) const;
  std::string detokenize(std::span<const Token> tokens) const;

 private:
  std::vector<std::string> words_;
  std::unordered_map<std::string, Token> index_;
};

enum class AnswerMode { Direct, Lookup };

/// One element of a context or query template.
struct TemplateItem {
  enum class Kind { Literal, Entity, Attribute, Query, QueryAlias, Repeat };
  Kind kind = Kind::Literal;
  Token literal = -1;
  // Repeat only: body rendered once per pair k, with separators between
  // iterations (`last_sep` before the final one when non-empty).
  std::vector<TemplateItem> body;
  std::vector<Token> sep;
  std::vector<Token> last_sep;
  bool line = false;  // each iteration is one "line" block (MCQ suffix spans)
};

struct TaskSpec {
  std::string name;
  std::vector<Token> entities;
  std::vector<Phrase> attributes;
  std::vector<TemplateItem> context_template;
  std::vector<TemplateItem> query_template;
  AnswerMode answer_mode = AnswerMode::Direct;
  std::map<Phrase, Token> lookup;
  std::map<Token, Token> query_alias;

  std::size_t attribute_length() const { return attributes.front().size(); }
  std::size_t max_pairs() const { return std::min(entities.size(), attributes.size()); }
  bool has_entity(Token t) const;
  bool has_attribute(const Phrase& a) const;
  /// Throws ConfigError when an invariant is violated.
  void validate() const;
};

struct Span {
  std::size_t begin = 0;
  std::size_t length = 0;
  std::size_t end() const { return begin + length; }
  friend bool operator==(const Span&, const Span&) = default;
};

/// Token layout of a rendered context. Entity spans cover the entity token
/// and the token right after it; attribute spans cover the attribute phrase.
/// For MCQ, attribute spans are the labels L_k and entity spans the options O_k.
struct ContextLayout {
  std::vector<Span> entity;
  std::vector<Span> attribute;
  std::vector<Span> line;  // empty unless the template marks line blocks
  friend bool operator==(const ContextLayout&, const ContextLayout&) = default;
};

struct ContextInstance {
  std::string task;
  std::size_t n = 0;
  std::vector<Token> entities;
  std::vector<Phrase> attributes;
  std::vector<Token> tokens;
  ContextLayout layout;
  friend bool operator==(const ContextInstance&, const ContextInstance&) = default;
};

struct QueryRendering {
  std::vector<Token> tokens;
  std::size_t answer_slot = 0;  // always tokens.size() - 1
  Token entity = -1;
};

/// Renders a context from explicit entity/attribute lists.
ContextInstance make_context(const TaskSpec& task, std::span<const Token> entities,
                             std::span<const Phrase> attributes);
/// Samples n distinct entities and n distinct attributes uniformly without
/// replacement. Throws SamplingError when n is out of range.
ContextInstance generate_context(const TaskSpec& task, std::size_t n, SeededRng& rng);
/// Throws InputError when the entity is not in the task's entity pool.
QueryRendering render_query(const TaskSpec& task, const ContextInstance& ctx, Token entity);
/// Direct: the attribute's first token; lookup: the table entry.
Token answer_token(const TaskSpec& task, const Phrase& attribute);
/// Answer tokens for every attribute in the pool, in pool order.
std::vector<Token> answer_pool(const TaskSpec& task);

/// Recovers (entities, attributes) from a rendered token sequence.
/// Returns nullopt when the tokens do not match the template for any n.
struct ParsedContext {
  std::vector<Token> entities;
  std::vector<Phrase> attributes;
};
std::optional<ParsedContext> parse_context(const TaskSpec& task, std::span<const Token> tokens);

/// Task description as JSON (see tasks/*.json and schema/task.schema.json).
/// New words are appended to `vocab`.
TaskSpec task_from_json(const nlohmann::json& j, Vocabulary& vocab);
nlohmann::json task_to_json(const TaskSpec& task, const Vocabulary& vocab);

/// Vocabulary plus named tasks.
class TaskSuite {
 public:
  /// Built-in tasks: capitals (direct answers), capitals_lookup, parallel,
  /// fruits, shapes, mcq, multitoken.
  static TaskSuite builtin();

  const Vocabulary& vocab() const { return vocab_; }
  const TaskSpec& task(const std::string& name) const;
  bool has_task(const std::string& name) const { return tasks_.count(name) != 0; }
  std::vector<std::string> task_names() const;
  void add_task(const nlohmann::json& j);
  void load_task_file(const std::filesystem::path& path);

 private:
  Vocabulary vocab_;
  std::map<std::string, TaskSpec> tasks_;
};

}  // namespace bindlab
