// bindlab command-line front end.
//
// Exit codes: 0 success, 1 runtime failure, 2 invalid manifest or arguments.

#include <CLI11.hpp>

#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "bindlab/harness.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::vector<fs::path> to_paths(const std::vector<std::string>& v) { return {v.begin(), v.end()}; }

unsigned clamp_jobs(unsigned jobs) { return jobs == 0 ? 1 : jobs; }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"bindlab: binding-ID interventions on toy transformers and reference oracles"};
  app.require_subcommand(1);

  // gen-tasks
  auto* gen = app.add_subcommand("gen-tasks", "Write task definitions and sample contexts");
  std::string gen_out = "tasks_out";
  std::vector<std::string> gen_files;
  std::size_t gen_n = 2, gen_count = 10;
  std::uint64_t gen_seed = 0;
  gen->add_option("--out", gen_out, "Output directory")->capture_default_str();
  gen->add_option("--task-file", gen_files, "Extra task definition files");
  gen->add_option("--n", gen_n, "Pairs per sample context")->capture_default_str();
  gen->add_option("--count", gen_count, "Sample contexts per task (0 for none)")->capture_default_str();
  gen->add_option("--seed", gen_seed, "Seed")->capture_default_str();

  // train
  auto* tr = app.add_subcommand("train", "Train a toy transformer");
  std::string tr_config, tr_out = "runs/train";
  std::optional<std::uint64_t> tr_seed;
  unsigned tr_jobs = 1;
  bool tr_quiet = false;
  tr->add_option("--config", tr_config, "Training config JSON ({model, train, task_files})");
  tr->add_option("--out", tr_out, "Output directory")->capture_default_str();
  tr->add_option("--seed", tr_seed, "Override train.seed");
  tr->add_option("--jobs", tr_jobs, "Worker threads")->capture_default_str();
  tr->add_flag("--quiet", tr_quiet, "No progress lines");

  // estimate-deltas
  auto* est = app.add_subcommand("estimate-deltas", "Estimate difference vectors and save them as an archive");
  std::string est_model = "oracle:reference", est_task = "capitals", est_out = "deltas.bin", est_pairing = "independent";
  std::vector<std::string> est_files;
  std::size_t est_n = 2, est_kmax = 1, est_samples = 200;
  std::uint64_t est_seed = 0;
  unsigned est_jobs = 1;
  est->add_option("--model", est_model, "Checkpoint, oracle archive, oracle:reference or oracle:direct")
      ->capture_default_str();
  est->add_option("--task", est_task, "Task name")->capture_default_str();
  est->add_option("--task-file", est_files, "Extra task definition files");
  est->add_option("--n", est_n, "Pairs per context")->capture_default_str();
  est->add_option("--k-max", est_kmax, "Largest binding index")->capture_default_str();
  est->add_option("--samples", est_samples, "Context pairs averaged")->capture_default_str();
  est->add_option("--pairing", est_pairing, "independent or matched")
      ->check(CLI::IsMember({"independent", "matched"}))
      ->capture_default_str();
  est->add_option("--seed", est_seed, "Seed")->capture_default_str();
  est->add_option("--jobs", est_jobs, "Worker threads")->capture_default_str();
  est->add_option("--out", est_out, "Output archive")->capture_default_str();

  // run
  auto* run = app.add_subcommand("run", "Run an experiment manifest");
  std::string run_manifest_path;
  std::optional<std::uint64_t> run_seed;
  std::optional<std::string> run_out;
  unsigned run_jobs = 1;
  run->add_option("--manifest", run_manifest_path, "Manifest JSON (schema/manifest.schema.json)")->required();
  run->add_option("--seed", run_seed, "Override the manifest seed");
  run->add_option("--jobs", run_jobs, "Worker threads")->capture_default_str();
  run->add_option("--out", run_out, "Override the output directory");

  // report
  auto* rep = app.add_subcommand("report", "Aggregate run directories into Markdown tables");
  std::vector<std::string> rep_dirs;
  std::string rep_out;
  rep->add_option("runs", rep_dirs, "Run directories")->required();
  rep->add_option("--out", rep_out, "Write the report here instead of stdout");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*gen) {
      const auto suite = bindlab::load_suite(to_paths(gen_files));
      for (const auto& p : bindlab::generate_task_files(suite, gen_out, gen_n, gen_count, gen_seed)) {
        std::cout << p.string() << '\n';
      }
    } else if (*tr) {
      json config = json::object();
      fs::path base = fs::current_path();
      if (!tr_config.empty()) {
        try {
          config = json::parse(bindlab::read_text_file(tr_config));
        } catch (const json::parse_error& e) {
          std::cerr << tr_config << ": " << e.what() << '\n';
          return 2;
        }
        base = fs::path(tr_config).parent_path();
      }
      const auto result = bindlab::train_from_config(config, base, tr_out, tr_seed, clamp_jobs(tr_jobs), !tr_quiet);
      std::cout << "steps " << result.steps_run << (result.early_stopped ? " (early stop)" : "") << '\n';
      if (!result.reports.empty()) {
        for (const auto& [task, acc] : result.reports.back().accuracy) {
          std::cout << task << " held-out top-1 " << acc << '\n';
        }
      }
      std::cout << (fs::path(tr_out) / "final.ckpt").string() << '\n';
    } else if (*est) {
      const auto suite = bindlab::load_suite(to_paths(est_files));
      const auto& task = suite.task(est_task);
      const std::vector<const bindlab::TaskSpec*> tasks = {&task};
      const auto subject = bindlab::load_subject(est_model, suite, tasks);
      const auto d = bindlab::estimate_difference_vectors(
          *subject, task, est_n, est_kmax, est_samples, est_seed,
          est_pairing == "matched" ? bindlab::Pairing::MatchedAttribute : bindlab::Pairing::Independent,
          clamp_jobs(est_jobs));
      bindlab::write_archive(est_out, d.to_archive());
      std::cout << est_out << '\n';
    } else if (*run) {
      bindlab::RunOptions options;
      options.seed = run_seed;
      if (run_out) options.out = fs::path(*run_out);
      const auto manifest = bindlab::load_manifest(run_manifest_path, options);
      const auto artifact = bindlab::run_manifest(manifest, clamp_jobs(run_jobs));
      std::cout << artifact.results_csv.string() << '\n';
    } else if (*rep) {
      const std::string report = bindlab::build_report(to_paths(rep_dirs));
      if (rep_out.empty()) std::cout << report;
      else bindlab::write_text_file(rep_out, report);
    }
  } catch (const bindlab::ManifestError& e) {
    std::cerr << e.what() << '\n';
    return 2;
  } catch (const bindlab::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
