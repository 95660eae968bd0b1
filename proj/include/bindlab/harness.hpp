#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "bindlab/error.hpp"
#include "bindlab/interventions.hpp"
#include "bindlab/subjects.hpp"
#include "bindlab/tasks.hpp"
#include "bindlab/trainer.hpp"

namespace bindlab {

// ---------------------------------------------------------------- JSON checking

/// Line (1-based) at which every value of a JSON document starts, keyed by
/// JSON pointer ("" for the root). `text` must already parse.
std::map<std::string, std::size_t> json_value_lines(std::string_view text);

struct SchemaViolation {
  std::string pointer;
  std::string message;
};

/// Validates against the JSON-schema subset used by the shipped schemas:
/// type, enum, const, minimum, maximum, exclusiveMinimum, minLength,
/// minItems, maxItems, uniqueItems, items, properties, required,
/// additionalProperties. Throws ConfigError on other keywords.
std::vector<SchemaViolation> validate_schema(const nlohmann::json& doc, const nlohmann::json& schema);

/// The manifest schema compiled into the library (schema/manifest.schema.json).
const nlohmann::json& manifest_schema();

/// Schema or semantic manifest problems; the CLI maps these to exit code 2.
/// what() is "<source>:<line>: <pointer>: <message>" for each problem, one
/// per line.
class ManifestError : public Error {
 public:
  using Error::Error;
};

// ---------------------------------------------------------------- manifests

const std::vector<std::string>& supported_experiments();

/// A manifest with every default resolved. File references are absolute.
struct Manifest {
  std::string model;
  std::string task;
  std::vector<std::filesystem::path> task_files;
  std::string experiment;
  std::uint64_t seed = 0;
  std::filesystem::path output_dir;
  nlohmann::json oracle = nlohmann::json::object();
  nlohmann::json params = nlohmann::json::object();
  /// Input document plus resolved defaults (echoed as manifest.json).
  nlohmann::json resolved;
};

struct RunOptions {
  std::optional<std::uint64_t> seed;
  std::optional<unsigned> jobs;
  std::optional<std::filesystem::path> out;
};

/// Parses, schema-validates and resolves a manifest; relative paths are
/// taken from `base_dir`. CLI overrides are applied and recorded in the
/// echo. The output directory honours BINDLAB_OUTPUT_ROOT for relative
/// paths. Throws ManifestError for syntax, schema, unknown-task, parameter
/// and missing-file problems.
Manifest parse_manifest(const std::string& text, const std::string& source_name,
                        const std::filesystem::path& base_dir, const RunOptions& options = {});
Manifest load_manifest(const std::filesystem::path& path, const RunOptions& options = {});

struct RunArtifact {
  std::filesystem::path output_dir;
  std::filesystem::path results_csv;
  std::filesystem::path results_json;
  std::filesystem::path manifest_echo;
  std::filesystem::path run_meta;
  std::vector<std::filesystem::path> plots;
  ResultTable table;
};

/// Runs the experiment and writes results.csv, results.json, manifest.json,
/// plot_*.csv and run_meta.json under the output directory (created only
/// after all computation succeeds).
RunArtifact run_manifest(const Manifest& manifest, unsigned jobs = 1);

// ---------------------------------------------------------------- subjects

/// Built-in tasks plus the given task files.
TaskSuite load_suite(const std::vector<std::filesystem::path>& task_files);

/// "oracle:reference" (built over `tasks`), "oracle:direct" (first task), a
/// transformer checkpoint, or a saved oracle archive.
std::unique_ptr<BindingSubject> load_subject(const std::string& source, const TaskSuite& suite,
                                             const std::vector<const TaskSpec*>& tasks,
                                             const nlohmann::json& oracle = nlohmann::json::object());

// ---------------------------------------------------------------- other commands

/// Writes <task>.json for every task in the suite and, when count > 0,
/// <task>.contexts.txt with `count` rendered contexts and queries.
std::vector<std::filesystem::path> generate_task_files(const TaskSuite& suite, const std::filesystem::path& out_dir,
                                                       std::size_t n, std::size_t count, std::uint64_t seed);

/// Config JSON: {"model": ModelConfig fields (vocab_size is filled in),
/// "train": TrainConfig fields, "task_files": [...]}. Writes checkpoints,
/// loss_report.csv, final.ckpt and train_config.json under out_dir.
TrainResult train_from_config(const nlohmann::json& config, const std::filesystem::path& base_dir,
                              const std::filesystem::path& out_dir, std::optional<std::uint64_t> seed,
                              unsigned jobs, bool verbose);

/// Markdown report over run directories holding results.csv and manifest.json.
std::string build_report(const std::vector<std::filesystem::path>& run_dirs);

std::string read_text_file(const std::filesystem::path& path);
void write_text_file(const std::filesystem::path& path, const std::string& text);

}  // namespace bindlab
