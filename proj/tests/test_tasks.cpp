#include <doctest.h>

#include <cmath>
#include <fstream>
#include <set>

#include "bindlab/error.hpp"
#include "bindlab/harness.hpp"
#include "bindlab/tasks.hpp"

using namespace bindlab;

namespace {

const TaskSuite& suite() {
  static const TaskSuite s = TaskSuite::builtin();
  return s;
}

std::size_t count(const std::vector<Token>& v, Token t) { return static_cast<std::size_t>(std::count(v.begin(), v.end(), t)); }

}  // namespace

TEST_CASE("built-in suite") {
  const auto names = suite().task_names();
  for (const char* t : {"capitals", "capitals_lookup", "parallel", "fruits", "shapes", "mcq", "multitoken"}) {
    CHECK(std::find(names.begin(), names.end(), t) != names.end());
  }
  CHECK_THROWS_AS(suite().task("nope"), ConfigError);
  // Entity and attribute pools are disjoint.
  for (const auto& name : names) {
    const TaskSpec& t = suite().task(name);
    for (Token e : t.entities) {
      for (const auto& a : t.attributes) CHECK(std::find(a.begin(), a.end(), e) == a.end());
    }
  }
}

TEST_CASE("vocabulary is whitespace word level") {
  const Vocabulary& v = suite().vocab();
  const auto toks = v.tokenize("Alice lives in France .");
  CHECK(toks.size() == 5);
  CHECK(v.detokenize(toks) == "Alice lives in France .");
  CHECK_THROWS_AS(v.id("Zzyzx-unknown"), InputError);
}

TEST_CASE("generate_context is deterministic") {
  const TaskSpec& t = suite().task("capitals");
  SeededRng a(7), b(7);
  CHECK(generate_context(t, 2, a) == generate_context(t, 2, b));
}

TEST_CASE("generate_context rejects out of range n") {
  const TaskSpec& t = suite().task("shapes");
  SeededRng rng(1);
  CHECK_THROWS_AS(generate_context(t, t.max_pairs() + 1, rng), SamplingError);
  CHECK_THROWS_AS(generate_context(t, 1, rng), SamplingError);
}

TEST_CASE("property: layouts point at the sampled tokens") {
  SeededRng rng(21);
  for (const auto& name : suite().task_names()) {
    const TaskSpec& t = suite().task(name);
    for (int trial = 0; trial < 1000 / 7 + 1; ++trial) {
      const std::size_t n = 2 + rng.uniform_index(std::min<std::size_t>(4, t.max_pairs() - 1));
      const ContextInstance c = generate_context(t, n, rng);
      REQUIRE(c.layout.entity.size() == n);
      REQUIRE(c.layout.attribute.size() == n);
      std::set<Token> es(c.entities.begin(), c.entities.end());
      std::set<Phrase> as(c.attributes.begin(), c.attributes.end());
      CHECK(es.size() == n);
      CHECK(as.size() == n);
      std::vector<bool> used(c.tokens.size(), false);
      for (std::size_t k = 0; k < n; ++k) {
        const Span e = c.layout.entity[k];
        const Span a = c.layout.attribute[k];
        CHECK(e.length == 2);
        REQUIRE(e.end() <= c.tokens.size());
        REQUIRE(a.end() <= c.tokens.size());
        CHECK(c.tokens[e.begin] == c.entities[k]);
        CHECK(a.length == c.attributes[k].size());
        for (std::size_t j = 0; j < a.length; ++j) CHECK(c.tokens[a.begin + j] == c.attributes[k][j]);
        for (const Span s : {e, a}) {
          for (std::size_t p = s.begin; p < s.end(); ++p) {
            CHECK_FALSE(used[p]);
            used[p] = true;
          }
        }
      }
    }
  }
}

TEST_CASE("property: render then parse round-trips") {
  SeededRng rng(33);
  for (const auto& name : suite().task_names()) {
    const TaskSpec& t = suite().task(name);
    for (std::size_t n = 2; n <= std::min<std::size_t>(3, t.max_pairs()); ++n) {
      for (int trial = 0; trial < 50; ++trial) {
        const ContextInstance c = generate_context(t, n, rng);
        const auto text = suite().vocab().detokenize(c.tokens);
        const auto parsed = parse_context(t, suite().vocab().tokenize(text));
        REQUIRE(parsed.has_value());
        CHECK(parsed->entities == c.entities);
        CHECK(parsed->attributes == c.attributes);
      }
    }
  }
}

TEST_CASE("slot-0 entity frequency is uniform") {
  const TaskSpec& t = suite().task("capitals");
  std::map<Token, int> hits;
  SeededRng rng(4);
  const int draws = 10000;
  for (int i = 0; i < draws; ++i) ++hits[generate_context(t, 2, rng).entities[0]];
  const double p = 1.0 / static_cast<double>(t.entities.size());
  const double se = std::sqrt(p * (1.0 - p) / draws);
  // Three standard errors per entity; a handful of excursions is expected
  // across the pool, so allow 1% of entities outside.
  std::size_t outside = 0;
  for (Token e : t.entities) {
    const double f = static_cast<double>(hits[e]) / draws;
    if (std::abs(f - p) > 3.0 * se) ++outside;
  }
  CHECK(outside <= std::max<std::size_t>(1, t.entities.size() / 100));
  CHECK(hits.size() == t.entities.size());
}

TEST_CASE("layout structure per task") {
  SeededRng rng(2);
  const ContextInstance cap = generate_context(suite().task("capitals"), 3, rng);
  // Interleaved: E0 < A0 < E1 < A1 ...
  for (std::size_t k = 0; k + 1 < 3; ++k) {
    CHECK(cap.layout.entity[k].begin < cap.layout.attribute[k].begin);
    CHECK(cap.layout.attribute[k].begin < cap.layout.entity[k + 1].begin);
  }
  const ContextInstance par = generate_context(suite().task("parallel"), 3, rng);
  for (const Span e : par.layout.entity) {
    for (const Span a : par.layout.attribute) CHECK(e.end() <= a.begin);
  }
  const ContextInstance mcq = generate_context(suite().task("mcq"), 2, rng);
  REQUIRE(mcq.layout.line.size() == 2);
  for (std::size_t k = 0; k < 2; ++k) {
    const Span line = mcq.layout.line[k];
    const Span label = mcq.layout.attribute[k];
    const Span option = mcq.layout.entity[k];
    CHECK(line.begin == label.begin);
    CHECK(label.end() <= option.begin);
    CHECK(option.end() == line.end());
  }
}

TEST_CASE("render_query") {
  const TaskSpec& t = suite().task("capitals");
  SeededRng rng(9);
  const ContextInstance c = generate_context(t, 2, rng);
  const QueryRendering q = render_query(t, c, c.entities[0]);
  const QueryRendering q2 = render_query(t, c, c.entities[0]);
  CHECK(q.tokens == q2.tokens);
  CHECK(count(q.tokens, c.entities[0]) == 2);
  CHECK(q.answer_slot == q.tokens.size() - 1);
  // Entities outside the context are allowed.
  Token other = t.entities[0] == c.entities[0] || t.entities[0] == c.entities[1] ? t.entities[2] : t.entities[0];
  CHECK_NOTHROW(render_query(t, c, other));
  CHECK_THROWS_AS(render_query(t, c, suite().vocab().id("lives")), InputError);

  const TaskSpec& mcq = suite().task("mcq");
  const ContextInstance m = generate_context(mcq, 2, rng);
  const QueryRendering mq = render_query(mcq, m, m.entities[1]);
  // The review follows the options: the query continuation names the alias,
  // never the option word itself.
  CHECK(count(mq.tokens, m.entities[1]) == 0);
  CHECK(mq.tokens.front() == suite().vocab().id("review"));
}

TEST_CASE("answer_token") {
  const Vocabulary& v = suite().vocab();
  const TaskSpec& direct = suite().task("capitals");
  for (const auto& a : direct.attributes) CHECK(answer_token(direct, a) == a.front());
  const TaskSpec& lookup = suite().task("capitals_lookup");
  CHECK(answer_token(lookup, {v.id("France")}) == v.id("Paris"));
  for (const auto& name : suite().task_names()) {
    const auto pool = answer_pool(suite().task(name));
    CHECK(std::set<Token>(pool.begin(), pool.end()).size() == pool.size());
  }
}

TEST_CASE("task JSON round-trip and schema") {
  const auto schema = nlohmann::json::parse(read_text_file(std::filesystem::path(BINDLAB_SOURCE_DIR) / "schema/task.schema.json"));
  for (const auto& name : suite().task_names()) {
    const auto j = task_to_json(suite().task(name), suite().vocab());
    CHECK(validate_schema(j, schema).empty());
    Vocabulary v = suite().vocab();
    const TaskSpec back = task_from_json(j, v);
    CHECK(v.size() == suite().vocab().size());
    CHECK(back.entities == suite().task(name).entities);
    CHECK(back.attributes == suite().task(name).attributes);
    CHECK(task_to_json(back, v) == j);
  }
  const auto pets = nlohmann::json::parse(read_text_file(std::filesystem::path(BINDLAB_SOURCE_DIR) / "tasks/pets.json"));
  CHECK(validate_schema(pets, schema).empty());
}

TEST_CASE("user task files extend the suite") {
  TaskSuite s = TaskSuite::builtin();
  const std::size_t before = s.vocab().size();
  s.load_task_file(std::filesystem::path(BINDLAB_SOURCE_DIR) / "tasks/pets.json");
  CHECK(s.has_task("pets"));
  CHECK(s.vocab().size() > before);
  SeededRng rng(1);
  const auto c = generate_context(s.task("pets"), 3, rng);
  CHECK(s.vocab().detokenize(c.tokens).find("owns a") != std::string::npos);
}

TEST_CASE("invalid tasks are rejected") {
  Vocabulary v = Vocabulary::builtin();
  nlohmann::json bad = {{"name", "bad"},
                        {"entities", {"Alice", "Bob"}},
                        {"attributes", {"Alice", "France"}},
                        {"context", {{{"repeat", {"{E}", "is", "{A}"}}}}},
                        {"query", {"{Q}", "is"}}};
  CHECK_THROWS_AS(task_from_json(bad, v), ConfigError);
  bad["attributes"] = {"France", "Spain"};
  bad["answer_mode"] = "lookup";
  CHECK_THROWS_AS(task_from_json(bad, v), ConfigError);
  bad["answer_mode"] = "sideways";
  CHECK_THROWS_AS(task_from_json(bad, v), ConfigError);
}
