#include "bindlab/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>

#include "bindlab/tensor_archive.hpp"

#ifndef BINDLAB_VERSION
#define BINDLAB_VERSION "0.0.0"
#endif

namespace bindlab {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------- files

std::string read_text_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open " + path.string());
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

void write_text_file(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw InputError("cannot write " + path.string());
  out << text;
  if (!out) throw InputError("write failed for " + path.string());
}

// ---------------------------------------------------------------- line map

namespace {

class LineScanner {
 public:
  explicit LineScanner(std::string_view text) : s_(text) {}

  std::map<std::string, std::size_t> run() {
    value("");
    return std::move(lines_);
  }

 private:
  std::string_view s_;
  std::size_t i_ = 0;
  std::size_t line_ = 1;
  std::map<std::string, std::size_t> lines_;

  void ws() {
    while (i_ < s_.size() && (s_[i_] == ' ' || s_[i_] == '\t' || s_[i_] == '\n' || s_[i_] == '\r')) {
      if (s_[i_] == '\n') ++line_;
      ++i_;
    }
  }

  std::string string() {
    std::string out;
    ++i_;  // opening quote
    while (i_ < s_.size() && s_[i_] != '"') {
      if (s_[i_] == '\\' && i_ + 1 < s_.size()) {
        ++i_;
        switch (s_[i_]) {
          case 'n': out.push_back('\n'); break;
          case 't': out.push_back('\t'); break;
          case 'u': out += "\\u" + std::string(s_.substr(i_ + 1, 4)); i_ += 4; break;
          default: out.push_back(s_[i_]);
        }
      } else {
        out.push_back(s_[i_]);
      }
      ++i_;
    }
    ++i_;  // closing quote
    return out;
  }

  static std::string escape(const std::string& key) {
    std::string out;
    for (char c : key) {
      if (c == '~') out += "~0";
      else if (c == '/') out += "~1";
      else out.push_back(c);
    }
    return out;
  }

  void value(const std::string& ptr) {
    ws();
    lines_[ptr] = line_;
    if (i_ >= s_.size()) return;
    const char c = s_[i_];
    if (c == '{') {
      ++i_;
      for (;;) {
        ws();
        if (i_ >= s_.size() || s_[i_] == '}') break;
        if (s_[i_] == ',') {
          ++i_;
          continue;
        }
        const std::string key = string();
        ws();
        ++i_;  // colon
        value(ptr + "/" + escape(key));
      }
      ++i_;
    } else if (c == '[') {
      ++i_;
      std::size_t index = 0;
      for (;;) {
        ws();
        if (i_ >= s_.size() || s_[i_] == ']') break;
        if (s_[i_] == ',') {
          ++i_;
          continue;
        }
        value(ptr + "/" + std::to_string(index++));
      }
      ++i_;
    } else if (c == '"') {
      string();
    } else {
      while (i_ < s_.size() && std::string_view(",]} \t\r\n").find(s_[i_]) == std::string_view::npos) ++i_;
    }
  }
};

}  // namespace

std::map<std::string, std::size_t> json_value_lines(std::string_view text) { return LineScanner(text).run(); }

// ---------------------------------------------------------------- schema subset

namespace {

const std::set<std::string> kSchemaKeywords = {
    "$schema", "$id", "title", "description", "default", "type", "enum", "const", "minimum", "maximum",
    "exclusiveMinimum", "minLength", "minItems", "maxItems", "uniqueItems", "items", "properties", "required",
    "additionalProperties"};

bool type_matches(const json& v, const std::string& type) {
  if (type == "object") return v.is_object();
  if (type == "array") return v.is_array();
  if (type == "string") return v.is_string();
  if (type == "boolean") return v.is_boolean();
  if (type == "null") return v.is_null();
  if (type == "number") return v.is_number();
  if (type == "integer") {
    if (v.is_number_integer()) return true;
    return v.is_number_float() && std::floor(v.get<double>()) == v.get<double>();
  }
  throw ConfigError("schema: unknown type '" + type + "'");
}

std::string pointer_child(const std::string& ptr, const std::string& key) {
  std::string e;
  for (char c : key) {
    if (c == '~') e += "~0";
    else if (c == '/') e += "~1";
    else e.push_back(c);
  }
  return ptr + "/" + e;
}

void check(const json& v, const json& schema, const std::string& ptr, std::vector<SchemaViolation>& out) {
  for (const auto& [key, _] : schema.items()) {
    if (!kSchemaKeywords.count(key)) throw ConfigError("schema: unsupported keyword '" + key + "'");
  }
  if (schema.contains("type")) {
    const json& t = schema["type"];
    bool ok = false;
    std::string names;
    if (t.is_array()) {
      for (const auto& x : t) {
        ok = ok || type_matches(v, x.get<std::string>());
        names += (names.empty() ? "" : " or ") + x.get<std::string>();
      }
    } else {
      ok = type_matches(v, t.get<std::string>());
      names = t.get<std::string>();
    }
    if (!ok) {
      out.push_back({ptr, "expected " + names + ", got " + std::string(v.type_name())});
      return;
    }
  }
  if (schema.contains("enum")) {
    const auto& e = schema["enum"];
    if (std::find(e.begin(), e.end(), v) == e.end()) {
      std::string allowed;
      for (const auto& x : e) allowed += (allowed.empty() ? "" : ", ") + x.dump();
      out.push_back({ptr, "value " + v.dump() + " is not one of " + allowed});
    }
  }
  if (schema.contains("const") && v != schema["const"]) out.push_back({ptr, "must equal " + schema["const"].dump()});
  if (v.is_number()) {
    const double x = v.get<double>();
    if (schema.contains("minimum") && x < schema["minimum"].get<double>()) {
      out.push_back({ptr, "must be >= " + schema["minimum"].dump()});
    }
    if (schema.contains("maximum") && x > schema["maximum"].get<double>()) {
      out.push_back({ptr, "must be <= " + schema["maximum"].dump()});
    }
    if (schema.contains("exclusiveMinimum") && x <= schema["exclusiveMinimum"].get<double>()) {
      out.push_back({ptr, "must be > " + schema["exclusiveMinimum"].dump()});
    }
  }
  if (v.is_string() && schema.contains("minLength") &&
      v.get<std::string>().size() < schema["minLength"].get<std::size_t>()) {
    out.push_back({ptr, "string shorter than " + schema["minLength"].dump()});
  }
  if (v.is_array()) {
    if (schema.contains("minItems") && v.size() < schema["minItems"].get<std::size_t>()) {
      out.push_back({ptr, "needs at least " + schema["minItems"].dump() + " items"});
    }
    if (schema.contains("maxItems") && v.size() > schema["maxItems"].get<std::size_t>()) {
      out.push_back({ptr, "allows at most " + schema["maxItems"].dump() + " items"});
    }
    if (schema.value("uniqueItems", false)) {
      for (std::size_t a = 0; a < v.size(); ++a) {
        for (std::size_t b = a + 1; b < v.size(); ++b) {
          if (v[a] == v[b]) out.push_back({pointer_child(ptr, std::to_string(b)), "duplicate item " + v[b].dump()});
        }
      }
    }
    if (schema.contains("items")) {
      for (std::size_t k = 0; k < v.size(); ++k) check(v[k], schema["items"], pointer_child(ptr, std::to_string(k)), out);
    }
  }
  if (v.is_object()) {
    const json props = schema.value("properties", json::object());
    for (const auto& r : schema.value("required", json::array())) {
      if (!v.contains(r.get<std::string>())) out.push_back({ptr, "missing required property \"" + r.get<std::string>() + "\""});
    }
    for (const auto& [key, child] : v.items()) {
      const std::string cp = pointer_child(ptr, key);
      if (props.contains(key)) {
        check(child, props[key], cp, out);
      } else if (schema.contains("additionalProperties")) {
        const json& ap = schema["additionalProperties"];
        if (ap.is_boolean()) {
          if (!ap.get<bool>()) out.push_back({cp, "unknown property \"" + key + "\""});
        } else {
          check(child, ap, cp, out);
        }
      }
    }
  }
}

}  // namespace

std::vector<SchemaViolation> validate_schema(const json& doc, const json& schema) {
  std::vector<SchemaViolation> out;
  check(doc, schema, "", out);
  return out;
}

const json& manifest_schema() {
  static const json schema = json::parse(
#include "bindlab/manifest_schema.inc"
  );
  return schema;
}

// ---------------------------------------------------------------- manifests

const std::vector<std::string>& supported_experiments() {
  static const std::vector<std::string> names = {"factorizability", "position_sweep", "mean_intervention",
                                                 "geometry_grid",   "cyclic_shift",   "transfer",
                                                 "mcq_suffix_copy"};
  return names;
}

namespace {

// Parameters each experiment accepts, with their defaults.
json experiment_defaults(const std::string& experiment) {
  const json deltas = {{"delta_samples", 500}, {"pairing", "independent"}};
  json d;
  if (experiment == "factorizability") {
    d = {{"n", 2}, {"N", 100}};
  } else if (experiment == "position_sweep") {
    d = {{"n", 2}, {"N", 100}, {"target", "entities"}};
  } else if (experiment == "mean_intervention") {
    d = {{"n", 2}, {"N", 100}, {"conditions", {"Control", "Attribute", "Entity", "Both"}}, {"random_baseline", true}};
    d.update(deltas);
  } else if (experiment == "geometry_grid") {
    d = {{"n", 2}, {"N", 20}, {"eta0", 0.5}, {"nu0", 0.5}, {"grid", {{"min", -1.0}, {"max", 2.0}, {"steps", 9}}}};
    d.update(deltas);
  } else if (experiment == "cyclic_shift") {
    d = {{"n", 3}, {"N", 100}, {"shift", 1}};
    d.update(deltas);
  } else if (experiment == "transfer") {
    d = {{"n", 3}, {"N", 100}};
    d.update(deltas);
  } else if (experiment == "mcq_suffix_copy") {
    d = {{"n", 2}, {"N", 100}};
  }
  d["align_attribute_positions"] = false;
  return d;
}

// Parameters that have no default but are accepted.
const std::map<std::string, std::set<std::string>> kOptionalParams = {
    {"mean_intervention", {"deltas"}}, {"geometry_grid", {"deltas"}}, {"cyclic_shift", {"deltas"}},
    {"transfer", {"deltas", "source_tasks"}}, {"mcq_suffix_copy", {"suffix_lengths"}}};

const std::set<std::string> kFixedPairCount = {"factorizability", "position_sweep", "geometry_grid",
                                               "mcq_suffix_copy"};

class Problems {
 public:
  Problems(std::string source, std::map<std::string, std::size_t> lines)
      : source_(std::move(source)), lines_(std::move(lines)) {}

  void add(const std::string& ptr, const std::string& message) {
    std::string p = ptr;
    while (!lines_.count(p) && !p.empty()) p = p.substr(0, p.rfind('/'));
    const std::size_t line = lines_.count(p) ? lines_.at(p) : 1;
    entries_.emplace_back(line, source_ + ":" + std::to_string(line) + ": " + (ptr.empty() ? "/" : ptr) + ": " + message);
  }
  void raise_if_any() const {
    if (entries_.empty()) return;
    auto sorted = entries_;
    std::stable_sort(sorted.begin(), sorted.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
    std::string all;
    for (const auto& [_, m] : sorted) all += (all.empty() ? "" : "\n") + m;
    throw ManifestError(all);
  }

 private:
  std::string source_;
  std::map<std::string, std::size_t> lines_;
  std::vector<std::pair<std::size_t, std::string>> entries_;
};

bool is_oracle_name(const std::string& model) { return model == "oracle:reference" || model == "oracle:direct"; }

fs::path resolve_input(const fs::path& base, const std::string& p) {
  const fs::path path(p);
  return path.is_absolute() ? path : base / path;
}

}  // namespace

Manifest parse_manifest(const std::string& text, const std::string& source_name, const fs::path& base_dir,
                        const RunOptions& options) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error& e) {
    const std::size_t upto = std::min<std::size_t>(e.byte, text.size());
    const std::size_t line = 1 + static_cast<std::size_t>(std::count(text.begin(), text.begin() + static_cast<std::ptrdiff_t>(upto), '\n'));
    throw ManifestError(source_name + ":" + std::to_string(line) + ": invalid JSON: " + e.what());
  }
  Problems problems(source_name, json_value_lines(text));
  for (const auto& v : validate_schema(doc, manifest_schema())) problems.add(v.pointer, v.message);
  problems.raise_if_any();

  Manifest m;
  m.model = doc["model"];
  m.task = doc["task"];
  m.experiment = doc["experiment"];
  m.seed = options.seed ? *options.seed : doc.value("seed", std::uint64_t{0});
  m.oracle = doc.value("oracle", json::object());

  // Task files and task names.
  std::vector<fs::path> task_files;
  if (doc.contains("task_files")) {
    for (std::size_t i = 0; i < doc["task_files"].size(); ++i) {
      const fs::path p = resolve_input(base_dir, doc["task_files"][i]);
      if (!fs::exists(p)) problems.add("/task_files/" + std::to_string(i), "file not found: " + p.string());
      task_files.push_back(p);
    }
  }
  problems.raise_if_any();
  std::optional<TaskSuite> suite;
  try {
    suite = load_suite(task_files);
  } catch (const Error& e) {
    problems.add("/task_files", e.what());
    problems.raise_if_any();
  }
  m.task_files = task_files;
  if (!suite->has_task(m.task)) problems.add("/task", "unknown task \"" + m.task + "\"");

  if (!is_oracle_name(m.model)) {
    const fs::path p = resolve_input(base_dir, m.model);
    if (!fs::exists(p)) {
      problems.add("/model", "model must be oracle:reference, oracle:direct or an existing archive; not found: " + p.string());
    } else {
      m.model = fs::absolute(p).lexically_normal().string();
    }
  }

  // Parameters: reject ones the experiment does not use, fill defaults.
  json params = doc.value("params", json::object());
  const json defaults = experiment_defaults(m.experiment);
  const auto optional_it = kOptionalParams.find(m.experiment);
  for (const auto& [key, _] : params.items()) {
    const bool optional = optional_it != kOptionalParams.end() && optional_it->second.count(key);
    if (!defaults.contains(key) && !optional) problems.add("/params/" + key, "not used by experiment " + m.experiment);
  }
  for (const auto& [key, value] : defaults.items()) {
    if (!params.contains(key)) {
      params[key] = value;
    } else if (key == "grid") {
      for (const auto& [gk, gv] : value.items()) {
        if (!params["grid"].contains(gk)) params["grid"][gk] = gv;
      }
    }
  }
  problems.raise_if_any();

  const std::size_t n = params["n"];
  if (kFixedPairCount.count(m.experiment) && n != 2) problems.add("/params/n", m.experiment + " uses n = 2");
  if (m.experiment == "geometry_grid") {
    if (!(params["grid"]["max"].get<double>() > params["grid"]["min"].get<double>())) {
      problems.add("/params/grid", "grid max must exceed grid min");
    }
  }
  const auto check_task_size = [&](const std::string& name, const std::string& ptr, std::size_t needed) {
    if (!suite->has_task(name)) return;
    const auto& t = suite->task(name);
    if (t.max_pairs() < needed) {
      problems.add(ptr, "task " + name + " supports at most " + std::to_string(t.max_pairs()) + " pairs, needs " +
                            std::to_string(needed));
    }
  };
  std::size_t needed = n;
  if (m.experiment == "factorizability") needed = 4;
  if (m.experiment == "geometry_grid") needed = 3;
  check_task_size(m.task, "/params/n", needed);
  if (m.experiment == "transfer") {
    if (!params.contains("source_tasks")) params["source_tasks"] = json::array({m.task});
    for (std::size_t i = 0; i < params["source_tasks"].size(); ++i) {
      const std::string name = params["source_tasks"][i];
      const std::string ptr = "/params/source_tasks/" + std::to_string(i);
      if (!suite->has_task(name)) problems.add(ptr, "unknown task \"" + name + "\"");
      check_task_size(name, ptr, n);
    }
  }
  if (m.experiment == "mcq_suffix_copy" && suite->has_task(m.task)) {
    SeededRng rng(0);
    const ContextInstance probe = generate_context(suite->task(m.task), 2, rng);
    if (probe.layout.line.size() != 2) {
      problems.add("/task", "task " + m.task + " has no line layout for suffix copies");
    } else {
      const std::size_t len = probe.layout.line[0].length;
      if (!params.contains("suffix_lengths")) {
        params["suffix_lengths"] = json::array();
        for (std::size_t s = 0; s <= len; ++s) params["suffix_lengths"].push_back(s);
      }
      for (std::size_t i = 0; i < params["suffix_lengths"].size(); ++i) {
        if (params["suffix_lengths"][i].get<std::size_t>() > len) {
          problems.add("/params/suffix_lengths/" + std::to_string(i), "exceeds the line length " + std::to_string(len));
        }
      }
    }
  }
  if (params.contains("deltas")) {
    const fs::path p = resolve_input(base_dir, params["deltas"]);
    if (!fs::exists(p)) problems.add("/params/deltas", "file not found: " + p.string());
    else params["deltas"] = fs::absolute(p).lexically_normal().string();
  }
  if (m.model == "oracle:direct" && m.experiment == "transfer") {
    problems.add("/model", "oracle:direct has no binding vectors to transfer");
  }
  problems.raise_if_any();
  m.params = params;

  // Output directory.
  std::string out = options.out ? options.out->string() : doc.value("output_dir", std::string("runs/out"));
  fs::path out_path(out);
  if (out_path.is_relative()) {
    if (const char* root = std::getenv("BINDLAB_OUTPUT_ROOT"); root && *root) out_path = fs::path(root) / out_path;
  }
  m.output_dir = out_path;

  m.resolved = doc;
  m.resolved["seed"] = m.seed;
  m.resolved["output_dir"] = out;
  m.resolved["params"] = params;
  if (!is_oracle_name(doc["model"])) m.resolved["model"] = doc["model"];
  return m;
}

Manifest load_manifest(const fs::path& path, const RunOptions& options) {
  std::string text;
  try {
    text = read_text_file(path);
  } catch (const InputError& e) {
    throw ManifestError(path.string() + ":1: " + e.what());
  }
  return parse_manifest(text, path.string(), path.parent_path(), options);
}

// ---------------------------------------------------------------- subjects

TaskSuite load_suite(const std::vector<fs::path>& task_files) {
  TaskSuite suite = TaskSuite::builtin();
  for (const auto& f : task_files) suite.load_task_file(f);
  return suite;
}

namespace {

ReferenceConfig reference_config(const json& o) {
  ReferenceConfig c;
  c.separation = o.value("separation", c.separation);
  c.beta = o.value("beta", c.beta);
  c.feature_scale = o.value("feature_scale", c.feature_scale);
  c.max_ids = o.value("max_ids", c.max_ids);
  c.seed = o.value("seed", c.seed);
  return c;
}

void check_vocabulary(const std::vector<std::string>& words, const TaskSuite& suite,
                      const std::vector<const TaskSpec*>& tasks, const std::string& source) {
  const auto& mine = suite.vocab().words();
  for (std::size_t i = 0; i < std::min(words.size(), mine.size()); ++i) {
    if (words[i] != mine[i]) {
      throw InputError(source + ": vocabulary differs from the task suite at token " + std::to_string(i) + " ('" +
                       words[i] + "' vs '" + mine[i] + "')");
    }
  }
  for (const TaskSpec* t : tasks) {
    const auto too_big = [&words](Token tok) { return static_cast<std::size_t>(tok) >= words.size(); };
    bool bad = std::any_of(t->entities.begin(), t->entities.end(), too_big);
    for (const auto& a : t->attributes) bad = bad || std::any_of(a.begin(), a.end(), too_big);
    if (bad) throw InputError(source + ": task " + t->name + " uses words outside the archive's vocabulary");
  }
}

}  // namespace

std::unique_ptr<BindingSubject> load_subject(const std::string& source, const TaskSuite& suite,
                                             const std::vector<const TaskSpec*>& tasks, const json& oracle) {
  if (tasks.empty()) throw ConfigError("load_subject: no tasks");
  if (source == "oracle:reference") {
    return std::make_unique<ReferenceSubject>(ReferenceSemantics::build(reference_config(oracle), tasks));
  }
  if (source == "oracle:direct") {
    DirectConfig c;
    c.seed = oracle.value("seed", c.seed);
    return std::make_unique<DirectSubject>(DirectBindingSemantics::build(c, *tasks.front()));
  }
  const json header = read_archive_header(source);
  const std::string kind = header.value("meta", json::object()).value("kind", "");
  if (kind == "transformer") {
    LoadedModel loaded = load_checkpoint(source);
    check_vocabulary(loaded.vocab_words, suite, tasks, source);
    return std::make_unique<TransformerSubject>(std::move(loaded.params), fs::path(source).filename().string());
  }
  if (kind == "oracle:reference") {
    return std::make_unique<ReferenceSubject>(ReferenceSemantics::from_archive(read_archive(source), suite.vocab()),
                                              fs::path(source).filename().string());
  }
  if (kind == "oracle:direct") {
    return std::make_unique<DirectSubject>(DirectBindingSemantics::from_archive(read_archive(source), suite.vocab()),
                                           fs::path(source).filename().string());
  }
  throw FormatError(source + ": unknown archive kind '" + kind + "'");
}

// ---------------------------------------------------------------- run

namespace {

std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

std::string csv_number(double x) {
  std::ostringstream o;
  o << std::setprecision(17) << x;
  return o.str();
}

struct DeltaSource {
  const Manifest& m;
  const BindingSubject& subject;
  unsigned jobs;
  std::map<std::string, DifferenceVectors> saved;

  DifferenceVectors get(const TaskSpec& task, std::size_t n, std::size_t k_max) {
    const json& p = m.params;
    if (p.contains("deltas") && task.name == m.task) {
      DifferenceVectors d = DifferenceVectors::from_archive(read_archive(p["deltas"].get<std::string>()));
      if (d.task != task.name) throw ConfigError("deltas file holds vectors for task " + d.task + ", not " + task.name);
      if (d.k_max() < k_max) throw ConfigError("deltas file has k_max " + std::to_string(d.k_max()) + " < " + std::to_string(k_max));
      return d;
    }
    const auto key = task.name + ":" + std::to_string(k_max);
    if (auto it = saved.find(key); it != saved.end()) return it->second;
    const Pairing pairing = p["pairing"] == "matched" ? Pairing::MatchedAttribute : Pairing::Independent;
    const std::uint64_t seed = derive_seed(derive_seed(m.seed, 0xde17a5ULL), fnv1a(task.name));
    DifferenceVectors d = estimate_difference_vectors(subject, task, std::max(n, k_max + 1), k_max,
                                                      p["delta_samples"].get<std::size_t>(), seed, pairing, jobs);
    saved.emplace(key, d);
    return d;
  }
};

struct PlotFile {
  std::string name;
  std::string text;
};

std::vector<PlotFile> plot_data(const Manifest& m, const ResultTable& t, const GeometryResult* geometry) {
  std::vector<PlotFile> out;
  std::ostringstream o;
  if (m.experiment == "position_sweep") {
    o << "shift,query_slot,candidate,mean_log_prob\n";
    for (const auto& r : t.rows) {
      if (r.metric.rfind("mean_log_prob[", 0) != 0) continue;
      const std::string cand = r.metric.substr(14, r.metric.size() - 15);
      o << r.condition.substr(6) << ',' << r.query_slot << ',' << cand << ',' << csv_number(r.value) << '\n';
    }
    out.push_back({"plot_fig3.csv", o.str()});
  } else if (m.experiment == "geometry_grid") {
    o << "eta,nu,accuracy\n";
    for (const auto& p : geometry->points) o << csv_number(p.eta) << ',' << csv_number(p.nu) << ',' << csv_number(p.accuracy) << '\n';
    out.push_back({"plot_fig4.csv", o.str()});
  } else if (m.experiment == "factorizability") {
    o << "condition,query_slot,candidate,mean_log_prob\n";
    for (const auto& r : t.rows) {
      if (r.metric.rfind("mean_log_prob[", 0) != 0) continue;
      o << r.condition << ',' << r.query_slot << ',' << r.metric.substr(14, r.metric.size() - 15) << ','
        << csv_number(r.value) << '\n';
    }
    out.push_back({"plot_factorizability.csv", o.str()});
  } else {
    o << "condition,query_slot,median_calibrated_accuracy\n";
    for (const auto& r : t.rows) {
      if (r.metric != "median_calibrated_accuracy") continue;
      o << r.condition << ',' << r.query_slot << ',' << csv_number(r.value) << '\n';
    }
    out.push_back({"plot_" + m.experiment + ".csv", o.str()});
  }
  return out;
}

std::string utc_now() {
  const std::time_t t = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

}  // namespace

RunArtifact run_manifest(const Manifest& m, unsigned jobs) {
  const auto started = std::chrono::steady_clock::now();
  const std::string started_utc = utc_now();
  const TaskSuite suite = load_suite(m.task_files);
  const TaskSpec& task = suite.task(m.task);
  std::vector<const TaskSpec*> tasks = {&task};
  if (m.params.contains("source_tasks")) {
    for (const auto& s : m.params["source_tasks"]) {
      const TaskSpec* t = &suite.task(s.get<std::string>());
      if (std::find(tasks.begin(), tasks.end(), t) == tasks.end()) tasks.push_back(t);
    }
  }
  const auto subject = load_subject(m.model, suite, tasks, m.oracle);
  const json& p = m.params;
  ExperimentContext ctx{*subject, task, m.seed, std::max(1u, jobs), p["align_attribute_positions"].get<bool>()};
  DeltaSource deltas{m, *subject, ctx.jobs, {}};
  const std::size_t n = p["n"];
  const std::size_t N = p["N"];

  ResultTable table;
  std::optional<GeometryResult> geometry;
  if (m.experiment == "factorizability") {
    table = run_factorizability(ctx, N);
  } else if (m.experiment == "position_sweep") {
    table = run_position_sweep(ctx, p["target"] == "attributes" ? SweepTarget::Attributes : SweepTarget::Entities, N);
  } else if (m.experiment == "mean_intervention") {
    std::vector<MeanCondition> conds;
    for (const auto& c : p["conditions"]) {
      const std::string s = c;
      conds.push_back(s == "Control" ? MeanCondition::Control
                      : s == "Attribute" ? MeanCondition::Attribute
                      : s == "Entity"    ? MeanCondition::Entity
                                         : MeanCondition::Both);
    }
    const DifferenceVectors d = deltas.get(task, n, 1);
    std::optional<DifferenceVectors> random;
    if (p["random_baseline"].get<bool>()) random = random_direction_baseline(d, derive_seed(m.seed, 0x7a4d0ULL));
    table = run_mean_intervention(ctx, n, conds, d, N, random ? &*random : nullptr);
  } else if (m.experiment == "geometry_grid") {
    const DifferenceVectors d = deltas.get(task, 3, 2);
    GridSpec grid{p["grid"]["min"], p["grid"]["max"], p["grid"]["steps"]};
    geometry = run_geometry_grid(ctx, p["eta0"], p["nu0"], grid, d, N);
    table = geometry->table;
  } else if (m.experiment == "cyclic_shift") {
    const DifferenceVectors d = deltas.get(task, n, n - 1);
    table = run_cyclic_shift(ctx, n, p["shift"], d, N);
  } else if (m.experiment == "transfer") {
    const DifferenceVectors target = deltas.get(task, n, n - 1);
    std::vector<DifferenceVectors> src_store;
    src_store.reserve(p["source_tasks"].size());
    for (const auto& s : p["source_tasks"]) {
      const std::string name = s;
      src_store.push_back(name == task.name ? target : deltas.get(suite.task(name), n, n - 1));
    }
    std::vector<TransferSource> sources;
    for (std::size_t i = 0; i < src_store.size(); ++i) sources.push_back({p["source_tasks"][i], &src_store[i]});
    table = run_transfer(ctx, n, target, sources, N);
  } else if (m.experiment == "mcq_suffix_copy") {
    std::vector<std::size_t> lengths;
    for (const auto& s : p["suffix_lengths"]) lengths.push_back(s);
    table = run_mcq_suffix_copy(ctx, lengths, N);
  } else {
    throw ConfigError("unsupported experiment " + m.experiment);
  }

  // Everything computed; only now touch the file system.
  RunArtifact a;
  a.output_dir = m.output_dir;
  a.table = table;
  fs::create_directories(m.output_dir);
  a.results_csv = m.output_dir / "results.csv";
  a.results_json = m.output_dir / "results.json";
  a.manifest_echo = m.output_dir / "manifest.json";
  a.run_meta = m.output_dir / "run_meta.json";
  write_text_file(a.results_csv, table.to_csv());
  write_text_file(a.results_json, table.to_json(m.resolved).dump(2) + "\n");
  write_text_file(a.manifest_echo, m.resolved.dump(2) + "\n");
  for (const auto& plot : plot_data(m, table, geometry ? &*geometry : nullptr)) {
    a.plots.push_back(m.output_dir / plot.name);
    write_text_file(a.plots.back(), plot.text);
  }
  json delta_files = json::array();
  for (const auto& [key, d] : deltas.saved) {
    std::string file = "deltas_" + key + ".bin";
    std::replace(file.begin(), file.end(), ':', '_');
    write_archive(m.output_dir / file, d.to_archive());
    delta_files.push_back(file);
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  const json meta = {{"version", BINDLAB_VERSION}, {"started_utc", started_utc},   {"wall_clock_seconds", secs},
                     {"jobs", ctx.jobs},           {"subject", subject->id()},      {"rows", table.rows.size()},
                     {"delta_files", delta_files}};
  write_text_file(a.run_meta, meta.dump(2) + "\n");
  return a;
}

// ---------------------------------------------------------------- gen-tasks

std::vector<fs::path> generate_task_files(const TaskSuite& suite, const fs::path& out_dir, std::size_t n,
                                          std::size_t count, std::uint64_t seed) {
  fs::create_directories(out_dir);
  std::vector<fs::path> written;
  for (const auto& name : suite.task_names()) {
    const TaskSpec& task = suite.task(name);
    const fs::path spec_path = out_dir / (name + ".json");
    write_text_file(spec_path, task_to_json(task, suite.vocab()).dump(2) + "\n");
    written.push_back(spec_path);
    if (count == 0) continue;
    if (n > task.max_pairs()) throw ConfigError("gen-tasks: n exceeds the pools of task " + name);
    std::ostringstream o;
    for (std::size_t i = 0; i < count; ++i) {
      SeededRng rng(derive_seed(seed, i));
      const ContextInstance c = generate_context(task, n, rng);
      const std::size_t slot = rng.uniform_index(n);
      const QueryRendering q = render_query(task, c, c.entities[slot]);
      o << suite.vocab().detokenize(c.tokens) << " | " << suite.vocab().detokenize(q.tokens) << " => "
        << suite.vocab().word(answer_token(task, c.attributes[slot])) << '\n';
    }
    const fs::path ctx_path = out_dir / (name + ".contexts.txt");
    write_text_file(ctx_path, o.str());
    written.push_back(ctx_path);
  }
  return written;
}

// ---------------------------------------------------------------- train

TrainResult train_from_config(const json& config, const fs::path& base_dir, const fs::path& out_dir,
                              std::optional<std::uint64_t> seed, unsigned jobs, bool verbose) {
  std::vector<fs::path> task_files;
  for (const auto& f : config.value("task_files", json::array())) task_files.push_back(resolve_input(base_dir, f));
  const TaskSuite suite = load_suite(task_files);
  json mc = config.value("model", json::object());
  mc["vocab_size"] = suite.vocab().size();
  const ModelConfig model_config = ModelConfig::from_json(mc);
  json tc = config.value("train", json::object());
  if (seed) tc["seed"] = *seed;
  TrainConfig train_config = TrainConfig::from_json(tc);
  train_config.jobs = std::max(1u, jobs);
  SeededRng init_rng(derive_seed(train_config.seed, 0x1417ULL));
  ModelParams init = ModelParams::init(model_config, init_rng);

  fs::create_directories(out_dir);
  const json resolved = {{"model", model_config.to_json()},
                         {"train", train_config.to_json()},
                         {"task_files", config.value("task_files", json::array())}};
  write_text_file(out_dir / "train_config.json", resolved.dump(2) + "\n");
  TrainOptions options;
  options.output_dir = out_dir;
  options.vocab = &suite.vocab();
  options.verbose = verbose;
  TrainResult result = train(train_config, suite, std::move(init), options);
  save_checkpoint(out_dir / "final.ckpt", result.params, suite.vocab(),
                  {{"train_config", train_config.to_json()}, {"steps_run", result.steps_run}});
  return result;
}

// ---------------------------------------------------------------- report

namespace {

struct RunSummary {
  fs::path dir;
  json manifest;
  ResultTable table;
};

std::string cell(const ResultTable& t, const std::string& condition) {
  if (!t.contains(condition, "mean", "median_calibrated_accuracy")) return "";
  std::ostringstream o;
  o << std::fixed << std::setprecision(2) << t.value(condition, "mean", "median_calibrated_accuracy");
  return o.str();
}

std::string row(const std::vector<std::string>& cells) {
  std::string s = "|";
  for (const auto& c : cells) s += " " + c + " |";
  return s + "\n";
}

std::string rule(std::size_t n) {
  std::string s = "|";
  for (std::size_t i = 0; i < n; ++i) s += " --- |";
  return s + "\n";
}

}  // namespace

std::string build_report(const std::vector<fs::path>& run_dirs) {
  std::vector<RunSummary> runs;
  for (const auto& d : run_dirs) {
    RunSummary r;
    r.dir = d;
    try {
      r.manifest = json::parse(read_text_file(d / "manifest.json"));
    } catch (const json::exception& e) {
      throw FormatError((d / "manifest.json").string() + ": " + e.what());
    }
    r.table = ResultTable::from_csv(read_text_file(d / "results.csv"));
    runs.push_back(std::move(r));
  }
  std::ostringstream o;
  o << "# bindlab report\n\n";
  o << "Values are mean median-calibrated accuracies over query slots. Rows marked *reference* are\n"
       "published numbers for a large pretrained language model, listed only to compare patterns.\n\n";

  // Mean interventions.
  const std::vector<std::string> mean_conds = {"Control",          "Attribute",     "Entity",     "Both",
                                               "Random-Attribute", "Random-Entity", "Random-Both"};
  std::vector<const RunSummary*> mean_runs, transfer_runs, other_runs;
  for (const auto& r : runs) {
    const std::string e = r.manifest.value("experiment", "");
    if (e == "mean_intervention") mean_runs.push_back(&r);
    else if (e == "transfer") transfer_runs.push_back(&r);
    else other_runs.push_back(&r);
  }
  if (!mean_runs.empty()) {
    o << "## Mean interventions\n\n";
    std::vector<std::string> header = {"model", "task", "N"};
    header.insert(header.end(), mean_conds.begin(), mean_conds.end());
    o << row(header) << rule(header.size());
    for (const auto* r : mean_runs) {
      std::vector<std::string> cells = {r->manifest.value("model", ""), r->manifest.value("task", ""),
                                        std::to_string(r->table.rows.empty() ? 0 : r->table.rows.front().n)};
      for (const auto& c : mean_conds) cells.push_back(cell(r->table, c));
      o << row(cells);
    }
    o << row({"*reference*", "capitals", "", "0.99", "0.00", "0.00", "0.97", "", "", ""}) << "\n";
  }

  if (!transfer_runs.empty()) {
    o << "## Cross-task transfer\n\n";
    std::vector<std::string> conds;
    for (const auto* r : transfer_runs) {
      for (const auto& row_ : r->table.rows) {
        if (row_.query_slot == "mean" && row_.metric == "median_calibrated_accuracy" &&
            std::find(conds.begin(), conds.end(), row_.condition) == conds.end()) {
          conds.push_back(row_.condition);
        }
      }
    }
    std::vector<std::string> header = {"model", "target task", "N"};
    header.insert(header.end(), conds.begin(), conds.end());
    o << row(header) << rule(header.size());
    for (const auto* r : transfer_runs) {
      std::vector<std::string> cells = {r->manifest.value("model", ""), r->manifest.value("task", ""),
                                        std::to_string(r->table.rows.empty() ? 0 : r->table.rows.front().n)};
      for (const auto& c : conds) cells.push_back(cell(r->table, c));
      o << row(cells);
    }
    o << "\n*reference* (target capitals, source task columns): capitals 0.88, parallel 0.87, shapes 0.71,\n"
         "fruits 0.80, Zeros 0.30, Random 0.31. The reference Random column replaces the source vectors after\n"
         "erasing, which corresponds to RandomErased here.\n\n";
  }

  if (!other_runs.empty()) {
    o << "## Other experiments\n\n";
    o << row({"experiment", "model", "task", "condition", "metric", "value"}) << rule(6);
    for (const auto* r : other_runs) {
      for (const auto& rr : r->table.rows) {
        if (rr.query_slot != "mean" && rr.query_slot != "all") continue;
        if (rr.metric != "median_calibrated_accuracy" && rr.metric != "agreement") continue;
        std::ostringstream v;
        v << std::fixed << std::setprecision(3) << rr.value;
        o << row({rr.experiment, r->manifest.value("model", ""), r->manifest.value("task", ""), rr.condition,
                  rr.metric, v.str()});
      }
    }
    o << "\n";
  }
  return o.str();
}

}  // namespace bindlab
