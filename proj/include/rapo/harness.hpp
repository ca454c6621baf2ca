#pragma once

// Continual-learning orchestration: the task loop with anchor management and
// checkpoints, evaluation, forgetting metrics, and the multi-seed runner.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "rapo/env.hpp"
#include "rapo/optimizer.hpp"
#include "rapo/policy.hpp"
#include "rapo/retention.hpp"

namespace rapo {

/// Every tunable of a run. Loaded from an INI file with sections
/// [policy], [stream], [retention], [optim]; unknown keys are rejected.
struct ExperimentConfig {
  // [policy]
  std::size_t feature_dim = 32;
  double format_logit = 9.0;
  double class_prior = 0.3;
  double init_noise = 0.01;
  double think_shift = 0.5;

  // [stream]; content_dim is derived from feature_dim.
  StreamConfig stream;

  // [retention]
  RetentionConfig retention;
  double ctan_beta = 0.999;
  double adv_eps = kDefaultAdvantageEps;
  /// First task on which grpo_v1 / grpo_v2 gate all-correct groups.
  int gating_from_task = 2;

  // [optim]
  OptimConfig optim = tuned_optim();
  std::size_t batch_prompts = 25;
  /// auto | ctan | group | batch. "auto" picks ctan for rapo and group for
  /// everything else.
  std::string normalization = "auto";

  void validate() const;
  AdvantageMode advantage_mode(Algorithm algo) const;

 private:
  static OptimConfig tuned_optim() {
    OptimConfig o;
    o.learning_rate = 2.5;
    o.epochs_per_task = 100;
    return o;
  }
};

ExperimentConfig parse_config_text(const std::string& text);
ExperimentConfig load_config(const std::filesystem::path& path);
/// Canonical INI rendering; parse_config_text(render_config(c)) == c.
std::string render_config(const ExperimentConfig& config);

/// acc[i][j]: accuracy on eval task j+1 after training task i+1 (j <= i).
struct EvalMatrix {
  std::vector<std::vector<double>> acc;

  std::size_t num_tasks() const { return acc.size(); }
  void validate(std::size_t expected_tasks) const;
};

struct Metrics {
  double last_accuracy = 0.0;  // A
  double forgetting = 0.0;     // F
};

/// A = mean_j acc[N][j];  F = mean_{j<N} (max_{i>=j} acc[i][j] - acc[N][j]).
/// Throws InputError on an empty or ragged matrix.
Metrics compute_metrics(const EvalMatrix& m);

/// Greedy closed-set decoding over the candidate vocabulary of `upto_task`;
/// returns accuracy per eval task 1..upto_task.
std::vector<double> evaluate(const PolicyParams& actor, const GrammarFeatureMap& fmap,
                             const TaskStream& stream, int upto_task);

struct BoundarySigma {
  int task = 0;               // task that starts at this boundary
  double end_of_previous = 0.0;
  double start_of_task = 0.0;
};

struct RunRecord {
  std::string config_text;
  Algorithm algorithm = Algorithm::kRapo;
  std::uint64_t seed = 0;
  EvalMatrix eval;
  Metrics metrics;
  std::vector<StepLog> steps;
  std::vector<std::filesystem::path> checkpoints;
  std::vector<BoundarySigma> boundaries;
  /// Steps at which each task ended (exclusive), for boundary analysis.
  std::vector<std::size_t> task_end_step;
};

/// Checkpoint file: policy weights (see write_params) followed by the CTAN state.
void save_checkpoint(const std::filesystem::path& path, const PolicyParams& params,
                     const CtanState& ctan);
std::pair<PolicyParams, CtanState> load_checkpoint(const std::filesystem::path& path);

/// One algorithm on one seed. Construction builds the stream and the base
/// policy; train_task advances one task at a time.
class ContinualRun {
 public:
  ContinualRun(ExperimentConfig config, Algorithm algo, std::uint64_t seed,
               std::optional<std::filesystem::path> run_dir = std::nullopt);

  /// Trains task t (1-based). Requires tasks 1..t-1 to be complete; with a
  /// run directory the actor and CTAN state are reloaded from the task t-1
  /// checkpoint (StateError when it is missing).
  void train_task(int t);

  /// Restores state from the newest checkpoint in the run directory.
  /// Returns the number of completed tasks found (0 if none).
  int resume();

  /// Trains the remaining tasks, stopping after `stop_after_task` if given.
  void run(std::optional<int> stop_after_task = std::nullopt);

  int completed_tasks() const { return completed_; }
  const PolicyParams& actor() const { return actor_; }
  const CtanState& ctan() const { return ctan_; }
  const TaskStream& stream() const { return stream_; }
  const GrammarFeatureMap& feature_map() const { return fmap_; }
  const ExperimentConfig& config() const { return config_; }
  std::size_t steps_per_task() const;

  /// Snapshot of everything recorded so far; metrics are filled once every
  /// task is complete.
  RunRecord record() const;

 private:
  std::filesystem::path checkpoint_path(int t) const;
  void write_outputs() const;
  std::vector<GoldSequence> gold_sequences(const std::vector<LabeledPrompt>& prompts) const;
  void rl_step(int t, std::size_t epoch, std::span<const LabeledPrompt> batch,
               const PolicyParams& anchor, const DecodeOptions& opts,
               const std::set<std::string>& vocab);

  ExperimentConfig config_;
  Algorithm algo_;
  std::uint64_t seed_;
  std::optional<std::filesystem::path> run_dir_;
  TaskStream stream_;
  GrammarFeatureMap fmap_;
  PolicyParams actor_;
  CtanState ctan_;
  int completed_ = 0;
  std::size_t step_ = 0;
  EvalMatrix eval_;
  std::vector<StepLog> steps_;
  std::vector<std::filesystem::path> checkpoints_;
  std::vector<BoundarySigma> boundaries_;
  std::vector<std::size_t> task_end_step_;
};

struct SummaryRow {
  Algorithm algorithm = Algorithm::kRapo;
  double a_mean = 0.0, a_std = 0.0, f_mean = 0.0, f_std = 0.0;
};

struct ExperimentOptions {
  std::optional<std::filesystem::path> out_dir;
  std::optional<int> stop_after_task;
  bool resume = false;
  unsigned jobs = 1;
};

struct ExperimentResult {
  std::vector<RunRecord> runs;  // algorithm-major, seeds in given order
  std::vector<SummaryRow> summary;
};

/// Every (algorithm, seed) pair. Throws ConfigError on an empty seed or
/// algorithm list. Streams depend only on the seed, so arms share them.
ExperimentResult run_experiment(const ExperimentConfig& config,
                                const std::vector<std::uint64_t>& seeds,
                                const std::vector<Algorithm>& algorithms,
                                const ExperimentOptions& options = {});

/// Mean and sample standard deviation of A and F per algorithm, in
/// canonical algorithm order.
std::vector<SummaryRow> summarize(const std::vector<RunRecord>& runs);

// CSV outputs. Floats use %.17g in steps/evalmatrix (exact round trip) and
// %.6f in summary.csv.
void write_steps_csv(std::ostream& os, const std::vector<StepLog>& steps);
std::vector<StepLog> read_steps_csv(std::istream& is);
void write_eval_csv(std::ostream& os, const EvalMatrix& m);
EvalMatrix read_eval_csv(std::istream& is);
void write_summary_csv(std::ostream& os, const std::vector<SummaryRow>& rows);

/// Rebuilds per-algorithm summaries from <dir>/<algo>/seed_*/evalmatrix.csv.
std::vector<SummaryRow> report_directory(const std::filesystem::path& dir);

/// Table-style line: "rapo  A 85.92 ± 1.82  F 4.69 ± 1.71" (percent).
std::string format_table_row(const SummaryRow& row);

}  // namespace rapo
