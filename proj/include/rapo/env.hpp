#pragma once

// Synthetic rehearsal-free class-incremental task stream.
//
// Each class owns a random prototype in a content space; prompts are noisy
// copies of their class prototype whose gold label is the prototype with the
// largest inner product (a planted linear rule). Classes are dealt into
// disjoint tasks in a seeded random order. Prompts are answered with the
// token grammar
//
//   THINK_OPEN filler* THINK_CLOSE ANS_OPEN <class> ANS_CLOSE EOS
//
// and rendered to "<think>...</think> <answer>CLASS_k</answer>".

#include <atomic>
#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <memory>
#include <string>
#include <vector>

#include "rapo/policy.hpp"

namespace rapo {

class OutputGrammar {
 public:
  static constexpr Token kThinkOpen = 0;
  static constexpr Token kThinkClose = 1;
  static constexpr Token kAnswerOpen = 2;
  static constexpr Token kAnswerClose = 3;
  static constexpr Token kEos = 4;
  static constexpr Token kFirstFiller = 5;

  OutputGrammar(std::size_t num_classes, std::size_t num_fillers, std::size_t max_filler);

  std::size_t num_classes() const { return num_classes_; }
  std::size_t num_fillers() const { return num_fillers_; }
  std::size_t max_filler() const { return max_filler_; }
  std::size_t vocab_size() const { return kFirstFiller + num_fillers_ + num_classes_; }
  /// Longest format-valid sequence: 5 structural tokens, the filler run and EOS.
  std::size_t max_len() const { return max_filler_ + 6; }

  Token filler_token(std::size_t k) const { return kFirstFiller + static_cast<Token>(k); }
  Token class_token(int class_id) const {
    return kFirstFiller + static_cast<Token>(num_fillers_) + class_id;
  }
  bool is_filler(Token t) const {
    return t >= kFirstFiller && t < kFirstFiller + static_cast<Token>(num_fillers_);
  }
  bool is_class(Token t) const {
    return t >= kFirstFiller + static_cast<Token>(num_fillers_) &&
           t < static_cast<Token>(vocab_size());
  }
  int class_of(Token t) const {
    return t - kFirstFiller - static_cast<int>(num_fillers_);
  }

  static std::string class_name(int class_id);

  /// Token-level grammar check, including the filler-run cap.
  bool is_format_valid(std::span<const Token> tokens) const;

  /// Decode options for rollouts: EOS terminates; only classes in
  /// `candidates` may be emitted.
  DecodeOptions decode_options(const std::vector<int>& candidates) const;

  /// Gold answer sequence with a filler run of the given length.
  std::vector<Token> gold_sequence(int class_id, std::span<const Token> fillers) const;

 private:
  std::size_t num_classes_;
  std::size_t num_fillers_;
  std::size_t max_filler_;
};

/// Renders tokens as text. Structural tokens render as their tags, fillers as
/// single lowercase letters, classes as CLASS_k, EOS as nothing. Malformed
/// sequences come out token by token in the same way.
std::string detokenize(std::span<const Token> tokens, const OutputGrammar& grammar);

struct StreamConfig {
  std::size_t num_tasks = 10;
  std::size_t classes_per_task = 5;
  std::size_t shots_per_class = 5;
  std::size_t eval_per_class = 10;
  std::size_t content_dim = 24;
  double prompt_noise = 0.35;
  std::size_t num_fillers = 4;
  std::size_t max_filler = 4;
  /// Probability that a filler of an SFT gold annotation is the task's house
  /// filler ((task - 1) mod num_fillers) instead of a uniform draw.
  double annotation_style = 0.8;
  /// Answer-token capacity of the grammar (number of class tokens).
  std::size_t class_capacity = 64;
};

enum class Split { kTrain, kEval };

struct PromptInfo {
  PromptId id = 0;
  int task = 0;  // 1-based
  int gold_class = 0;
  Split split = Split::kTrain;
  std::vector<double> content;
};

struct LabeledPrompt {
  PromptId id = 0;
  int gold_class = 0;
};

class TaskStream {
 public:
  TaskStream(StreamConfig config, std::uint64_t seed);

  const StreamConfig& config() const { return config_; }
  std::uint64_t seed() const { return seed_; }
  const OutputGrammar& grammar() const { return grammar_; }
  std::size_t num_tasks() const { return config_.num_tasks; }
  std::size_t num_classes() const { return config_.num_tasks * config_.classes_per_task; }

  /// Task (1-based) owning the class.
  int task_of_class(int class_id) const { return class_to_task_.at(class_id); }
  const std::vector<int>& class_to_task() const { return class_to_task_; }
  /// Classes introduced by task t (1-based), in dealing order.
  const std::vector<int>& task_classes(int t) const;

  /// Labeled training prompts of task t. Every call is recorded in the access
  /// audit so callers can prove they never touched another task's data.
  const std::vector<LabeledPrompt>& training_prompts(int t) const;
  const std::vector<LabeledPrompt>& eval_prompts(int t) const;

  std::size_t training_access_count(int t) const;

  const std::vector<PromptInfo>& prompts() const { return prompts_; }
  const std::vector<std::vector<double>>& prototypes() const { return prototypes_; }

 private:
  void check_task(int t) const;

  StreamConfig config_;
  std::uint64_t seed_;
  OutputGrammar grammar_;
  std::vector<int> class_to_task_;
  std::vector<std::vector<int>> task_classes_;
  std::vector<std::vector<LabeledPrompt>> train_;
  std::vector<std::vector<LabeledPrompt>> eval_;
  std::vector<PromptInfo> prompts_;
  std::vector<std::vector<double>> prototypes_;
  std::unique_ptr<std::atomic<std::size_t>[]> train_access_;
};

/// Validates the configuration and deals classes into tasks.
/// Throws ConfigError when the grammar cannot hold every class.
TaskStream build_stream(const StreamConfig& config, std::uint64_t seed);

/// Union of the classes of tasks 1..t, ascending.
std::vector<int> candidate_vocabulary(const TaskStream& stream, int t);

/// Writes "# key=value" header lines followed by task,class,prompt_id,split rows.
void write_stream_dump(std::ostream& os, const TaskStream& stream);

/// Feature map for the grammar policy.
///
/// Layout: one indicator per grammar state (start, inside think, after
/// </think>, answer slot, after class, after </answer>, other), the fraction
/// of the filler budget already spent (inside think only), and in the answer
/// slot the prompt content shifted by the filler tokens of the think span,
/// squashed with tanh.
class GrammarFeatureMap final : public FeatureMap {
 public:
  static constexpr std::size_t kNumStates = 7;
  static constexpr std::size_t kThinkLengthIndex = kNumStates;
  static constexpr std::size_t kContentOffset = kNumStates + 1;

  enum State : std::size_t {
    kStart = 0,
    kInThink = 1,
    kAfterThink = 2,
    kAnswerSlot = 3,
    kAfterClass = 4,
    kAfterAnswer = 5,
    kOther = 6,
  };

  GrammarFeatureMap(const TaskStream& stream, double think_shift, std::uint64_t seed);

  std::size_t dim() const override { return kContentOffset + content_dim_; }
  void embed(PromptId prompt, std::span<const Token> prefix,
             std::span<double> out) const override;
  using FeatureMap::embed;

  /// Grammar state reached after `prefix`, plus the filler count of the
  /// think span.
  State state_of(std::span<const Token> prefix, std::size_t* fillers = nullptr) const;

 private:
  const OutputGrammar* grammar_;
  std::size_t content_dim_;
  double think_shift_;
  std::vector<std::vector<double>> content_;        // by prompt id
  std::vector<std::vector<double>> filler_shift_;   // by filler index
};

/// Slope of the base policy's think-length gate (logit units per unit of
/// spent filler budget).
inline constexpr double kThinkLengthGate = 60.0;

/// Weights of a base policy that already follows the output grammar:
/// grammatical tokens get `format_logit` and a steep length gate makes every
/// think span use exactly max_filler fillers, drawn uniformly. Each class
/// column holds `class_prior` times its prototype, a weak zero-shot prior
/// (0 leaves the answer slot near uniform). Gaussian noise of scale `noise`
/// is added to every weight.
PolicyParams base_policy(const GrammarFeatureMap& fmap, const TaskStream& stream,
                         double format_logit, double class_prior, double noise,
                         std::uint64_t seed);

}  // namespace rapo
