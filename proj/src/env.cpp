#include "rapo/env.hpp"

#include <algorithm>
#include <cmath>
#include <ostream>
#include <sstream>

#include "rapo/errors.hpp"

namespace rapo {

// ---------------------------------------------------------------------------
// Grammar

OutputGrammar::OutputGrammar(std::size_t num_classes, std::size_t num_fillers,
                             std::size_t max_filler)
    : num_classes_(num_classes), num_fillers_(num_fillers), max_filler_(max_filler) {
  if (num_fillers_ == 0 || num_fillers_ > 26)
    throw ConfigError("num_fillers must be in [1, 26]");
  if (num_classes_ == 0) throw ConfigError("grammar needs at least one class token");
}

std::string OutputGrammar::class_name(int class_id) {
  return "CLASS_" + std::to_string(class_id);
}

bool OutputGrammar::is_format_valid(std::span<const Token> tokens) const {
  std::size_t i = 0;
  const auto at = [&](std::size_t k) { return k < tokens.size() ? tokens[k] : Token{-1}; };
  if (at(i++) != kThinkOpen) return false;
  std::size_t run = 0;
  while (is_filler(at(i))) {
    ++run;
    ++i;
  }
  if (run > max_filler_) return false;
  if (at(i++) != kThinkClose) return false;
  if (at(i++) != kAnswerOpen) return false;
  if (!is_class(at(i++))) return false;
  if (at(i++) != kAnswerClose) return false;
  if (at(i++) != kEos) return false;
  return i == tokens.size();
}

DecodeOptions OutputGrammar::decode_options(const std::vector<int>& candidates) const {
  DecodeOptions opts;
  opts.eos = kEos;
  opts.max_len = max_len();
  opts.allowed.assign(vocab_size(), 1);
  for (std::size_t c = 0; c < num_classes_; ++c) opts.allowed[class_token(static_cast<int>(c))] = 0;
  for (int c : candidates) {
    if (c < 0 || static_cast<std::size_t>(c) >= num_classes_)
      throw InputError("candidate class out of range");
    opts.allowed[class_token(c)] = 1;
  }
  return opts;
}

std::vector<Token> OutputGrammar::gold_sequence(int class_id,
                                                std::span<const Token> fillers) const {
  if (class_id < 0 || static_cast<std::size_t>(class_id) >= num_classes_)
    throw InputError("gold class out of range");
  if (fillers.size() > max_filler_) throw InputError("filler run exceeds grammar cap");
  std::vector<Token> seq{kThinkOpen};
  for (Token f : fillers) {
    if (!is_filler(f)) throw InputError("gold think span contains a non-filler token");
    seq.push_back(f);
  }
  seq.insert(seq.end(), {kThinkClose, kAnswerOpen, class_token(class_id), kAnswerClose, kEos});
  return seq;
}

std::string detokenize(std::span<const Token> tokens, const OutputGrammar& grammar) {
  std::string out;
  for (Token t : tokens) {
    switch (t) {
      case OutputGrammar::kThinkOpen: out += "<think>"; break;
      case OutputGrammar::kThinkClose: out += "</think>"; break;
      case OutputGrammar::kAnswerOpen: out += " <answer>"; break;
      case OutputGrammar::kAnswerClose: out += "</answer>"; break;
      case OutputGrammar::kEos: break;
      default:
        if (grammar.is_filler(t)) {
          out += static_cast<char>('a' + (t - OutputGrammar::kFirstFiller));
        } else if (grammar.is_class(t)) {
          out += OutputGrammar::class_name(grammar.class_of(t));
        } else {
          out += "<unk:" + std::to_string(t) + ">";
        }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Stream

namespace {

double dot(std::span<const double> a, std::span<const double> b) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

int planted_label(const std::vector<std::vector<double>>& prototypes,
                  std::span<const double> x) {
  int best = 0;
  double best_score = dot(prototypes[0], x);
  for (std::size_t c = 1; c < prototypes.size(); ++c) {
    const double s = dot(prototypes[c], x);
    if (s > best_score) {
      best_score = s;
      best = static_cast<int>(c);
    }
  }
  return best;
}

}  // namespace

TaskStream::TaskStream(StreamConfig config, std::uint64_t seed)
    : config_(config),
      seed_(seed),
      grammar_(config.class_capacity, config.num_fillers, config.max_filler) {
  if (config_.num_tasks == 0 || config_.classes_per_task == 0 || config_.shots_per_class == 0)
    throw ConfigError("num_tasks, classes_per_task and shots_per_class must be positive");
  if (num_classes() > config_.class_capacity) {
    std::ostringstream msg;
    msg << "stream needs " << num_classes() << " classes but the grammar holds "
        << config_.class_capacity;
    throw ConfigError(msg.str());
  }
  if (config_.eval_per_class < config_.shots_per_class)
    throw ConfigError("eval_per_class must be >= shots_per_class");
  if (config_.content_dim == 0) throw ConfigError("content_dim must be positive");

  const std::size_t n_classes = num_classes();
  Rng rng(derive_seed({seed, 0x57ea4}));

  prototypes_.assign(n_classes, std::vector<double>(config_.content_dim));
  for (auto& p : prototypes_)
    for (double& v : p) v = rng.uniform(-1.0, 1.0);

  // Random class order dealt into consecutive tasks.
  std::vector<int> order(n_classes);
  for (std::size_t c = 0; c < n_classes; ++c) order[c] = static_cast<int>(c);
  rng.shuffle(order.begin(), order.end());
  class_to_task_.assign(n_classes, 0);
  task_classes_.assign(config_.num_tasks, {});
  for (std::size_t i = 0; i < n_classes; ++i) {
    const int t = static_cast<int>(i / config_.classes_per_task) + 1;
    class_to_task_[order[i]] = t;
    task_classes_[t - 1].push_back(order[i]);
  }

  train_.assign(config_.num_tasks, {});
  eval_.assign(config_.num_tasks, {});
  auto make_prompt = [&](int task, int cls, Split split) {
    PromptInfo info;
    info.id = static_cast<PromptId>(prompts_.size());
    info.task = task;
    info.gold_class = cls;
    info.split = split;
    info.content.resize(config_.content_dim);
    // Rejection keeps the planted rule noise-free: the generating class is
    // always the argmax label.
    for (int attempt = 0;; ++attempt) {
      for (std::size_t k = 0; k < config_.content_dim; ++k)
        info.content[k] = prototypes_[cls][k] + config_.prompt_noise * rng.normal();
      if (planted_label(prototypes_, info.content) == cls) break;
      if (attempt > 10000) throw ConfigError("prompt_noise too large for the planted rule");
    }
    LabeledPrompt lp{info.id, cls};
    (split == Split::kTrain ? train_ : eval_)[task - 1].push_back(lp);
    prompts_.push_back(std::move(info));
  };
  for (std::size_t t = 1; t <= config_.num_tasks; ++t) {
    for (int cls : task_classes_[t - 1]) {
      for (std::size_t s = 0; s < config_.shots_per_class; ++s)
        make_prompt(static_cast<int>(t), cls, Split::kTrain);
      for (std::size_t s = 0; s < config_.eval_per_class; ++s)
        make_prompt(static_cast<int>(t), cls, Split::kEval);
    }
  }

  train_access_ = std::make_unique<std::atomic<std::size_t>[]>(config_.num_tasks);
  for (std::size_t t = 0; t < config_.num_tasks; ++t) train_access_[t] = 0;
}

void TaskStream::check_task(int t) const {
  if (t < 1 || static_cast<std::size_t>(t) > config_.num_tasks)
    throw InputError("task index " + std::to_string(t) + " out of range");
}

const std::vector<int>& TaskStream::task_classes(int t) const {
  check_task(t);
  return task_classes_[t - 1];
}

const std::vector<LabeledPrompt>& TaskStream::training_prompts(int t) const {
  check_task(t);
  train_access_[t - 1].fetch_add(1, std::memory_order_relaxed);
  return train_[t - 1];
}

const std::vector<LabeledPrompt>& TaskStream::eval_prompts(int t) const {
  check_task(t);
  return eval_[t - 1];
}

std::size_t TaskStream::training_access_count(int t) const {
  check_task(t);
  return train_access_[t - 1].load(std::memory_order_relaxed);
}

TaskStream build_stream(const StreamConfig& config, std::uint64_t seed) {
  return TaskStream(config, seed);
}

std::vector<int> candidate_vocabulary(const TaskStream& stream, int t) {
  if (t < 1 || static_cast<std::size_t>(t) > stream.num_tasks())
    throw InputError("task index " + std::to_string(t) + " out of range");
  std::vector<int> vocab;
  for (int k = 1; k <= t; ++k) {
    const auto& cls = stream.task_classes(k);
    vocab.insert(vocab.end(), cls.begin(), cls.end());
  }
  std::sort(vocab.begin(), vocab.end());
  return vocab;
}

void write_stream_dump(std::ostream& os, const TaskStream& stream) {
  const auto& cfg = stream.config();
  os << "# rapo task stream\n"
     << "# seed=" << stream.seed() << "\n"
     << "# num_tasks=" << cfg.num_tasks << "\n"
     << "# classes_per_task=" << cfg.classes_per_task << "\n"
     << "# shots_per_class=" << cfg.shots_per_class << "\n"
     << "# eval_per_class=" << cfg.eval_per_class << "\n"
     << "task,class,prompt_id,split\n";
  for (const auto& p : stream.prompts()) {
    os << p.task << ',' << p.gold_class << ',' << p.id << ','
       << (p.split == Split::kTrain ? "train" : "eval") << '\n';
  }
}

// ---------------------------------------------------------------------------
// Features

GrammarFeatureMap::GrammarFeatureMap(const TaskStream& stream, double think_shift,
                                     std::uint64_t seed)
    : grammar_(&stream.grammar()),
      content_dim_(stream.config().content_dim),
      think_shift_(think_shift) {
  content_.reserve(stream.prompts().size());
  for (const auto& p : stream.prompts()) content_.push_back(p.content);
  Rng rng(derive_seed({seed, 0xf111e7}));
  filler_shift_.assign(grammar_->num_fillers(), std::vector<double>(content_dim_));
  for (auto& u : filler_shift_) {
    double norm = 0.0;
    for (double& v : u) {
      v = rng.normal();
      norm += v * v;
    }
    norm = std::sqrt(norm / static_cast<double>(content_dim_));
    for (double& v : u) v /= norm;
  }
}

GrammarFeatureMap::State GrammarFeatureMap::state_of(std::span<const Token> prefix,
                                                     std::size_t* fillers) const {
  using G = OutputGrammar;
  std::size_t run = 0;
  State state = kStart;
  for (Token t : prefix) {
    switch (state) {
      case kStart: state = t == G::kThinkOpen ? kInThink : kOther; break;
      case kInThink:
        if (grammar_->is_filler(t)) {
          ++run;
        } else {
          state = t == G::kThinkClose ? kAfterThink : kOther;
        }
        break;
      case kAfterThink: state = t == G::kAnswerOpen ? kAnswerSlot : kOther; break;
      case kAnswerSlot: state = grammar_->is_class(t) ? kAfterClass : kOther; break;
      case kAfterClass: state = t == G::kAnswerClose ? kAfterAnswer : kOther; break;
      case kAfterAnswer:
      case kOther: state = kOther; break;
    }
  }
  if (fillers) *fillers = run;
  return state;
}

void GrammarFeatureMap::embed(PromptId prompt, std::span<const Token> prefix,
                              std::span<double> out) const {
  if (prompt < 0 || static_cast<std::size_t>(prompt) >= content_.size())
    throw InputError("unknown prompt id " + std::to_string(prompt));
  std::fill(out.begin(), out.end(), 0.0);
  std::size_t run = 0;
  const State state = state_of(prefix, &run);
  out[state] = 1.0;
  if (state == kInThink) {
    const double budget = static_cast<double>(std::max<std::size_t>(grammar_->max_filler(), 1));
    out[kThinkLengthIndex] = std::min(1.0, static_cast<double>(run) / budget);
  } else if (state == kAnswerSlot) {
    const auto& x = content_[static_cast<std::size_t>(prompt)];
    auto dst = out.subspan(kContentOffset, content_dim_);
    for (std::size_t k = 0; k < content_dim_; ++k) dst[k] = x[k];
    // The think span moves the content by the mean shift of its fillers, so
    // its composition matters and its length does not.
    if (run > 0) {
      const double w = think_shift_ / static_cast<double>(run);
      for (Token t : prefix) {
        if (!grammar_->is_filler(t)) continue;
        const auto& u = filler_shift_[static_cast<std::size_t>(t - OutputGrammar::kFirstFiller)];
        for (std::size_t k = 0; k < content_dim_; ++k) dst[k] += w * u[k];
      }
    }
    for (double& v : dst) v = std::tanh(v);
  }
}

PolicyParams base_policy(const GrammarFeatureMap& fmap, const TaskStream& stream,
                         double format_logit, double class_prior, double noise,
                         std::uint64_t seed) {
  using G = OutputGrammar;
  using F = GrammarFeatureMap;
  const OutputGrammar& grammar = stream.grammar();
  PolicyParams params(fmap.dim(), grammar.vocab_size(), grammar.max_len());
  Rng rng(derive_seed({seed, 0xba5e}));
  for (double& w : params.weights.data()) w = noise * rng.normal();

  auto& W = params.weights;
  W(F::kStart, G::kThinkOpen) += format_logit;
  // Length gate: fillers win until the budget is spent, then </think> does.
  // The crossover sits half a filler before the budget.
  const double cross = 1.0 - 0.5 / static_cast<double>(std::max<std::size_t>(grammar.max_filler(), 1));
  W(F::kInThink, G::kThinkClose) += format_logit - kThinkLengthGate * cross;
  W(F::kThinkLengthIndex, G::kThinkClose) += kThinkLengthGate;
  for (std::size_t k = 0; k < grammar.num_fillers(); ++k) {
    W(F::kInThink, grammar.filler_token(k)) += format_logit + kThinkLengthGate * cross;
    W(F::kThinkLengthIndex, grammar.filler_token(k)) -= kThinkLengthGate;
  }
  W(F::kAfterThink, G::kAnswerOpen) += format_logit;
  for (std::size_t v = 0; v < grammar.vocab_size(); ++v)
    if (!grammar.is_class(static_cast<Token>(v))) W(F::kAnswerSlot, v) -= format_logit;
  W(F::kAfterClass, G::kAnswerClose) += format_logit;
  W(F::kAfterAnswer, G::kEos) += format_logit;
  W(F::kOther, G::kEos) += format_logit;
  const auto& protos = stream.prototypes();
  for (std::size_t c = 0; c < protos.size(); ++c)
    for (std::size_t k = 0; k < protos[c].size() && F::kContentOffset + k < fmap.dim(); ++k)
      W(F::kContentOffset + k, grammar.class_token(static_cast<int>(c))) += class_prior * protos[c][k];
  params.validate();
  return params;
}

}  // namespace rapo
