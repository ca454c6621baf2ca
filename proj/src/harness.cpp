#include "rapo/harness.hpp"

#include <algorithm>
#include <cinttypes>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <future>
#include <map>
#include <numeric>
#include <sstream>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "rapo/errors.hpp"
#include "rapo/verifiers.hpp"

namespace rapo {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Config

namespace {

std::string fmt_g17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string fmt_f6(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

double parse_double(const std::string& key, const std::string& text) {
  try {
    std::size_t used = 0;
    const double v = std::stod(text, &used);
    if (used != text.size() || !std::isfinite(v)) throw std::invalid_argument(text);
    return v;
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "': expected a number, got '" + text + "'");
  }
}

std::size_t parse_count(const std::string& key, const std::string& text) {
  try {
    if (text.empty() || text[0] == '-') throw std::invalid_argument(text);
    std::size_t used = 0;
    const unsigned long long v = std::stoull(text, &used);
    if (used != text.size()) throw std::invalid_argument(text);
    return static_cast<std::size_t>(v);
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "': expected a non-negative integer, got '" +
                      text + "'");
  }
}

int parse_int(const std::string& key, const std::string& text) {
  try {
    std::size_t used = 0;
    const int v = std::stoi(text, &used);
    if (used != text.size()) throw std::invalid_argument(text);
    return v;
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "': expected an integer, got '" + text + "'");
  }
}

// Binds "section.key" names to config fields, for parsing and rendering.
struct Field {
  std::string name;
  std::function<void(ExperimentConfig&, const std::string&)> set;
  std::function<std::string(const ExperimentConfig&)> get;
};

std::vector<Field> config_fields() {
  std::vector<Field> f;
  auto real = [&](std::string name, auto accessor) {
    f.push_back({name,
                 [name, accessor](ExperimentConfig& c, const std::string& v) {
                   accessor(c) = parse_double(name, v);
                 },
                 [accessor](const ExperimentConfig& c) {
                   ExperimentConfig copy = c;
                   return fmt_g17(accessor(copy));
                 }});
  };
  auto count = [&](std::string name, auto accessor) {
    f.push_back({name,
                 [name, accessor](ExperimentConfig& c, const std::string& v) {
                   accessor(c) = parse_count(name, v);
                 },
                 [accessor](const ExperimentConfig& c) {
                   ExperimentConfig copy = c;
                   return std::to_string(accessor(copy));
                 }});
  };
  auto integer = [&](std::string name, auto accessor) {
    f.push_back({name,
                 [name, accessor](ExperimentConfig& c, const std::string& v) {
                   accessor(c) = parse_int(name, v);
                 },
                 [accessor](const ExperimentConfig& c) {
                   ExperimentConfig copy = c;
                   return std::to_string(accessor(copy));
                 }});
  };
  using C = ExperimentConfig;
  count("policy.feature_dim", [](C& c) -> auto& { return c.feature_dim; });
  real("policy.format_logit", [](C& c) -> auto& { return c.format_logit; });
  real("policy.class_prior", [](C& c) -> auto& { return c.class_prior; });
  real("policy.init_noise", [](C& c) -> auto& { return c.init_noise; });
  real("policy.think_shift", [](C& c) -> auto& { return c.think_shift; });

  count("stream.num_tasks", [](C& c) -> auto& { return c.stream.num_tasks; });
  count("stream.classes_per_task", [](C& c) -> auto& { return c.stream.classes_per_task; });
  count("stream.shots_per_class", [](C& c) -> auto& { return c.stream.shots_per_class; });
  count("stream.eval_per_class", [](C& c) -> auto& { return c.stream.eval_per_class; });
  real("stream.prompt_noise", [](C& c) -> auto& { return c.stream.prompt_noise; });
  count("stream.num_fillers", [](C& c) -> auto& { return c.stream.num_fillers; });
  count("stream.max_filler", [](C& c) -> auto& { return c.stream.max_filler; });
  real("stream.annotation_style", [](C& c) -> auto& { return c.stream.annotation_style; });
  count("stream.class_capacity", [](C& c) -> auto& { return c.stream.class_capacity; });

  real("retention.alpha", [](C& c) -> auto& { return c.retention.alpha; });
  real("retention.lambda", [](C& c) -> auto& { return c.retention.lambda; });
  integer("retention.active_from_task", [](C& c) -> auto& { return c.retention.active_from_task; });
  real("retention.beta", [](C& c) -> auto& { return c.ctan_beta; });
  real("retention.eps", [](C& c) -> auto& { return c.adv_eps; });
  integer("retention.gating_from_task", [](C& c) -> auto& { return c.gating_from_task; });

  real("optim.learning_rate", [](C& c) -> auto& { return c.optim.learning_rate; });
  real("optim.clip_range", [](C& c) -> auto& { return c.optim.clip_range; });
  real("optim.kl_coeff", [](C& c) -> auto& { return c.optim.kl_coeff; });
  count("optim.group_size", [](C& c) -> auto& { return c.optim.group_size; });
  count("optim.epochs_per_task", [](C& c) -> auto& { return c.optim.epochs_per_task; });
  count("optim.inner_epochs", [](C& c) -> auto& { return c.optim.inner_epochs; });
  count("optim.batch_prompts", [](C& c) -> auto& { return c.batch_prompts; });
  f.push_back({"optim.normalization",
               [](C& c, const std::string& v) { c.normalization = v; },
               [](const C& c) { return c.normalization; }});
  return f;
}

}  // namespace

void ExperimentConfig::validate() const {
  if (feature_dim <= GrammarFeatureMap::kContentOffset)
    throw ConfigError("policy.feature_dim must exceed " +
                      std::to_string(GrammarFeatureMap::kContentOffset));
  if (!(format_logit > 0.0)) throw ConfigError("policy.format_logit must be > 0");
  if (!(class_prior >= 0.0)) throw ConfigError("policy.class_prior must be >= 0");
  if (!(init_noise >= 0.0)) throw ConfigError("policy.init_noise must be >= 0");
  if (!(think_shift >= 0.0)) throw ConfigError("policy.think_shift must be >= 0");
  retention.validate();
  if (!(ctan_beta > 0.0 && ctan_beta < 1.0)) throw ConfigError("retention.beta must be in (0, 1)");
  if (!(adv_eps > 0.0)) throw ConfigError("retention.eps must be > 0");
  optim.validate();
  if (batch_prompts == 0) throw ConfigError("optim.batch_prompts must be >= 1");
  if (!(stream.annotation_style >= 0.0 && stream.annotation_style <= 1.0))
    throw ConfigError("stream.annotation_style must be in [0, 1]");
  if (normalization != "auto" && normalization != "ctan" && normalization != "group" &&
      normalization != "batch")
    throw ConfigError("optim.normalization must be auto, ctan, group or batch");
}

AdvantageMode ExperimentConfig::advantage_mode(Algorithm algo) const {
  if (normalization == "ctan") return AdvantageMode::kCtan;
  if (normalization == "group") return AdvantageMode::kGroupSigma;
  if (normalization == "batch") return AdvantageMode::kBatchSigma;
  return algo == Algorithm::kRapo ? AdvantageMode::kCtan : AdvantageMode::kGroupSigma;
}

ExperimentConfig parse_config_text(const std::string& text) {
  namespace pt = boost::property_tree;
  pt::ptree tree;
  std::istringstream is(text);
  try {
    pt::ini_parser::read_ini(is, tree);
  } catch (const pt::ini_parser_error& e) {
    throw ConfigError(std::string("config parse error: ") + e.what());
  }
  const auto fields = config_fields();
  ExperimentConfig cfg;
  for (const auto& [section, body] : tree) {
    if (body.empty())
      throw ConfigError("config key '" + section + "' must live inside a [section]");
    for (const auto& [key, value] : body) {
      const std::string name = section + "." + key;
      const auto it = std::find_if(fields.begin(), fields.end(),
                                   [&](const Field& f) { return f.name == name; });
      if (it == fields.end()) throw ConfigError("unknown config key '" + name + "'");
      it->set(cfg, value.get_value<std::string>());
    }
  }
  cfg.validate();
  return cfg;
}

ExperimentConfig load_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_config_text(buf.str());
}

std::string render_config(const ExperimentConfig& config) {
  std::ostringstream os;
  std::string current;
  for (const auto& f : config_fields()) {
    const auto dot = f.name.find('.');
    const std::string section = f.name.substr(0, dot);
    if (section != current) {
      if (!current.empty()) os << '\n';
      os << '[' << section << "]\n";
      current = section;
    }
    os << f.name.substr(dot + 1) << " = " << f.get(config) << '\n';
  }
  return os.str();
}

// ---------------------------------------------------------------------------
// Metrics

void EvalMatrix::validate(std::size_t expected_tasks) const {
  if (acc.size() != expected_tasks) throw InputError("evaluation matrix is incomplete");
  for (std::size_t i = 0; i < acc.size(); ++i) {
    if (acc[i].size() != i + 1) throw InputError("evaluation matrix row has the wrong length");
    for (double v : acc[i])
      if (!(v >= 0.0 && v <= 1.0)) throw InputError("accuracy outside [0, 1]");
  }
}

Metrics compute_metrics(const EvalMatrix& m) {
  if (m.acc.empty()) throw InputError("evaluation matrix is empty");
  m.validate(m.acc.size());
  const std::size_t n = m.acc.size();
  const auto& last = m.acc[n - 1];
  Metrics out;
  out.last_accuracy = std::accumulate(last.begin(), last.end(), 0.0) / static_cast<double>(n);
  if (n == 1) return out;
  double drop = 0.0;
  for (std::size_t j = 0; j + 1 < n; ++j) {
    double best = 0.0;
    for (std::size_t i = j; i < n; ++i) best = std::max(best, m.acc[i][j]);
    drop += best - last[j];
  }
  out.forgetting = drop / static_cast<double>(n - 1);
  return out;
}

std::vector<double> evaluate(const PolicyParams& actor, const GrammarFeatureMap& fmap,
                             const TaskStream& stream, int upto_task) {
  const auto candidates = candidate_vocabulary(stream, upto_task);
  const auto& grammar = stream.grammar();
  const DecodeOptions opts = grammar.decode_options(candidates);
  std::set<std::string> vocab;
  for (int c : candidates) vocab.insert(OutputGrammar::class_name(c));
  std::vector<double> acc;
  for (int j = 1; j <= upto_task; ++j) {
    const auto& prompts = stream.eval_prompts(j);
    std::size_t correct = 0;
    for (const auto& p : prompts) {
      const auto tokens = greedy_decode(actor, fmap, p.id, opts);
      const auto reward = classification_reward(detokenize(tokens, grammar),
                                                OutputGrammar::class_name(p.gold_class), vocab);
      if (*reward.r_acc == 1.0) ++correct;
    }
    acc.push_back(prompts.empty() ? 0.0
                                  : static_cast<double>(correct) /
                                        static_cast<double>(prompts.size()));
  }
  return acc;
}

// ---------------------------------------------------------------------------
// Checkpoints

void save_checkpoint(const fs::path& path, const PolicyParams& params, const CtanState& ctan) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw ConfigError("cannot write checkpoint " + tmp.string());
    write_params(out, params);
    write_ctan(out, ctan);
    if (!out) throw ConfigError("failed writing checkpoint " + tmp.string());
  }
  fs::rename(tmp, path);
}

std::pair<PolicyParams, CtanState> load_checkpoint(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw StateError("missing checkpoint " + path.string());
  PolicyParams params = read_params(in);
  CtanState ctan = read_ctan(in);
  return {std::move(params), ctan};
}

// ---------------------------------------------------------------------------
// ContinualRun

namespace {

StreamConfig stream_config_for(const ExperimentConfig& config) {
  config.validate();
  StreamConfig s = config.stream;
  s.content_dim = config.feature_dim - GrammarFeatureMap::kContentOffset;
  return s;
}

std::set<std::string> class_names(const std::vector<int>& classes) {
  std::set<std::string> names;
  for (int c : classes) names.insert(OutputGrammar::class_name(c));
  return names;
}

double mean_of(std::span<const double> v) {
  return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

}  // namespace

ContinualRun::ContinualRun(ExperimentConfig config, Algorithm algo, std::uint64_t seed,
                           std::optional<fs::path> run_dir)
    : config_(std::move(config)),
      algo_(algo),
      seed_(seed),
      run_dir_(std::move(run_dir)),
      stream_(build_stream(stream_config_for(config_), seed)),
      fmap_(stream_, config_.think_shift, seed),
      actor_(base_policy(fmap_, stream_, config_.format_logit, config_.class_prior,
                         config_.init_noise, seed)) {
  ctan_.beta = config_.ctan_beta;
}

std::size_t ContinualRun::steps_per_task() const {
  const std::size_t prompts = config_.stream.classes_per_task * config_.stream.shots_per_class;
  const std::size_t batches = (prompts + config_.batch_prompts - 1) / config_.batch_prompts;
  return config_.optim.epochs_per_task * batches;
}

fs::path ContinualRun::checkpoint_path(int t) const {
  return *run_dir_ / "checkpoints" / ("task_" + std::to_string(t) + ".ckpt");
}

std::vector<GoldSequence> ContinualRun::gold_sequences(
    const std::vector<LabeledPrompt>& prompts) const {
  const auto& grammar = stream_.grammar();
  std::vector<GoldSequence> gold;
  gold.reserve(prompts.size());
  for (const auto& p : prompts) {
    // One fixed annotated response per training prompt, written mostly in
    // the house style of its task.
    Rng rng(derive_seed({seed_, 0x5f7, static_cast<std::uint64_t>(p.id)}));
    const std::size_t house =
        static_cast<std::size_t>(stream_.prompts()[p.id].task - 1) % grammar.num_fillers();
    std::vector<Token> fillers(grammar.max_filler());
    for (Token& f : fillers) {
      const bool styled = rng.uniform() < config_.stream.annotation_style;
      f = grammar.filler_token(styled ? house : rng.below(grammar.num_fillers()));
    }
    gold.push_back({p.id, grammar.gold_sequence(p.gold_class, fillers)});
  }
  return gold;
}

void ContinualRun::rl_step(int t, std::size_t epoch, std::span<const LabeledPrompt> batch,
                           const PolicyParams& anchor, const DecodeOptions& opts,
                           const std::set<std::string>& vocab) {
  const auto& grammar = stream_.grammar();
  const std::size_t n = config_.optim.group_size;
  std::vector<RolloutGroup> groups(batch.size());
  std::vector<std::vector<double>> rewards(batch.size());
  std::vector<double> all_rewards, all_ret;

  for (std::size_t b = 0; b < batch.size(); ++b) {
    const LabeledPrompt& p = batch[b];
    const std::string gold = OutputGrammar::class_name(p.gold_class);
    auto& group = groups[b];
    group.prompt_id = p.id;
    std::vector<double> task_rewards, drifts;
    for (std::size_t i = 0; i < n; ++i) {
      Rng rng(derive_seed({seed_, static_cast<std::uint64_t>(t), epoch,
                           static_cast<std::uint64_t>(p.id), i}));
      Rollout r = sample_rollout(actor_, fmap_, p.id, rng, opts);
      r = annotate_anchor(std::move(r), anchor, fmap_, opts);
      r.text = detokenize(r.tokens, grammar);
      r.reward = classification_reward(r.text, gold, vocab);
      const double d = drift(r);
      r.reward.r_ret = retention_reward(d, config_.retention);
      r.reward.r_total = algo_ == Algorithm::kRapo
                             ? total_reward(r.reward.r_task, *r.reward.r_ret, config_.retention, t)
                             : r.reward.r_task;
      task_rewards.push_back(r.reward.r_task);
      drifts.push_back(d);
      rewards[b].push_back(r.reward.r_total);
      all_ret.push_back(*r.reward.r_ret);
      group.rollouts.push_back(std::move(r));
    }
    const bool gated = (algo_ == Algorithm::kGrpoV1 || algo_ == Algorithm::kGrpoV2) &&
                       t >= config_.gating_from_task;
    if (gated) {
      rewards[b] = apply_gating_variant(
          task_rewards, drifts,
          algo_ == Algorithm::kGrpoV1 ? GatingVariant::kV1 : GatingVariant::kV2,
          kMaxClassificationReward);
      for (std::size_t i = 0; i < n; ++i) group.rollouts[i].reward.r_total = rewards[b][i];
    }
    all_rewards.insert(all_rewards.end(), rewards[b].begin(), rewards[b].end());
  }

  const double sigma_batch = population_std(all_rewards);
  ctan_ = ctan_update(ctan_, sigma_batch);
  const AdvantageMode mode = config_.advantage_mode(algo_);
  std::vector<std::vector<double>> advantages;
  advantages.reserve(groups.size());
  for (const auto& r : rewards)
    advantages.push_back(group_advantages(r, mode, ctan_, sigma_batch, config_.adv_eps));

  double kl = 0.0;
  for (const auto& g : groups) kl += kl_to_anchor(g, actor_, anchor, fmap_, opts);
  kl /= static_cast<double>(groups.size());

  const PolicyBatch pb{groups, advantages};
  StepResult result{actor_, {}};
  for (std::size_t k = 0; k < config_.optim.inner_epochs; ++k) {
    result = policy_gradient_step(actor_, &anchor, fmap_, pb, config_.optim, opts);
    actor_ = std::move(result.params);
  }

  StepLog log = result.log;
  log.step = step_++;
  log.reward_mean = mean_of(all_rewards);
  log.sigma_batch = sigma_batch;
  log.sigma_hat = ctan_.sigma_hat;
  log.ret_reward_mean = mean_of(all_ret);
  log.kl_anchor = kl;
  steps_.push_back(log);
}

void ContinualRun::train_task(int t) {
  if (t < 1 || static_cast<std::size_t>(t) > stream_.num_tasks())
    throw InputError("task index " + std::to_string(t) + " out of range");
  if (t != completed_ + 1)
    throw StateError("task " + std::to_string(t) + " requires tasks 1.." +
                     std::to_string(t - 1) + " to be complete");
  if (t > 1) {
    const double sigma_end = ctan_.sigma_hat;
    if (run_dir_) {
      auto [params, ctan] = load_checkpoint(checkpoint_path(t - 1));
      actor_ = std::move(params);
      ctan_ = ctan;
    }
    boundaries_.push_back({t, sigma_end, ctan_.sigma_hat});
  }

  const PolicyParams anchor = snapshot(actor_);
  const auto candidates = candidate_vocabulary(stream_, t);
  const DecodeOptions opts = stream_.grammar().decode_options(candidates);
  const auto vocab = class_names(candidates);
  const std::vector<LabeledPrompt> prompts = stream_.training_prompts(t);
  const std::vector<GoldSequence> gold =
      algo_ == Algorithm::kSft ? gold_sequences(prompts) : std::vector<GoldSequence>{};

  for (std::size_t epoch = 0; epoch < config_.optim.epochs_per_task; ++epoch) {
    std::vector<std::size_t> order(prompts.size());
    std::iota(order.begin(), order.end(), 0);
    Rng shuffle_rng(derive_seed({seed_, static_cast<std::uint64_t>(t), epoch, 0x5b0ff1e}));
    shuffle_rng.shuffle(order.begin(), order.end());
    for (std::size_t start = 0; start < order.size(); start += config_.batch_prompts) {
      const std::size_t end = std::min(order.size(), start + config_.batch_prompts);
      if (algo_ == Algorithm::kSft) {
        std::vector<GoldSequence> batch;
        for (std::size_t k = start; k < end; ++k) batch.push_back(gold[order[k]]);
        actor_ = sft_step(actor_, fmap_, batch, config_.optim.learning_rate, opts);
        StepLog log;
        log.step = step_++;
        log.sigma_hat = ctan_.sigma_hat;
        steps_.push_back(log);
      } else {
        std::vector<LabeledPrompt> batch;
        for (std::size_t k = start; k < end; ++k) batch.push_back(prompts[order[k]]);
        rl_step(t, epoch, batch, anchor, opts, vocab);
      }
    }
  }

  eval_.acc.push_back(evaluate(actor_, fmap_, stream_, t));
  completed_ = t;
  task_end_step_.push_back(step_);
  if (run_dir_) {
    // CSVs first: a checkpoint must never be ahead of the logs it resumes from.
    write_outputs();
    save_checkpoint(checkpoint_path(t), actor_, ctan_);
    checkpoints_.push_back(checkpoint_path(t));
  }
}

int ContinualRun::resume() {
  if (!run_dir_) throw StateError("resume needs a run directory");
  int found = 0;
  for (int t = 1; static_cast<std::size_t>(t) <= stream_.num_tasks(); ++t) {
    if (!fs::exists(checkpoint_path(t))) break;
    found = t;
  }
  if (found == 0) return 0;
  auto [params, ctan] = load_checkpoint(checkpoint_path(found));
  actor_ = std::move(params);
  ctan_ = ctan;

  std::ifstream eval_in(*run_dir_ / "evalmatrix.csv");
  std::ifstream steps_in(*run_dir_ / "steps.csv");
  if (!eval_in || !steps_in) throw StateError("run directory lacks evalmatrix.csv or steps.csv");
  eval_ = read_eval_csv(eval_in);
  if (eval_.acc.size() < static_cast<std::size_t>(found))
    throw StateError("evalmatrix.csv is behind the newest checkpoint");
  eval_.acc.resize(static_cast<std::size_t>(found));
  steps_ = read_steps_csv(steps_in);
  const std::size_t expected = steps_per_task() * static_cast<std::size_t>(found);
  if (steps_.size() < expected) throw StateError("steps.csv is behind the newest checkpoint");
  steps_.resize(expected);
  step_ = expected;
  completed_ = found;
  checkpoints_.clear();
  task_end_step_.clear();
  for (int t = 1; t <= found; ++t) {
    checkpoints_.push_back(checkpoint_path(t));
    task_end_step_.push_back(steps_per_task() * static_cast<std::size_t>(t));
  }
  return found;
}

void ContinualRun::run(std::optional<int> stop_after_task) {
  for (int t = completed_ + 1; static_cast<std::size_t>(t) <= stream_.num_tasks(); ++t) {
    train_task(t);
    if (stop_after_task && t >= *stop_after_task) break;
  }
}

void ContinualRun::write_outputs() const {
  fs::create_directories(*run_dir_);
  auto replace = [&](const char* name, auto&& write) {
    const fs::path path = *run_dir_ / name;
    const fs::path tmp = path.string() + ".tmp";
    {
      std::ofstream out(tmp, std::ios::trunc);
      write(out);
      if (!out) throw ConfigError("cannot write " + tmp.string());
    }
    fs::rename(tmp, path);
  };
  replace("steps.csv", [&](std::ostream& os) { write_steps_csv(os, steps_); });
  replace("evalmatrix.csv", [&](std::ostream& os) { write_eval_csv(os, eval_); });
  replace("config.ini", [&](std::ostream& os) { os << render_config(config_); });
  if (!fs::exists(*run_dir_ / "stream.txt"))
    replace("stream.txt", [&](std::ostream& os) { write_stream_dump(os, stream_); });
}

RunRecord ContinualRun::record() const {
  RunRecord r;
  r.config_text = render_config(config_);
  r.algorithm = algo_;
  r.seed = seed_;
  r.eval = eval_;
  if (static_cast<std::size_t>(completed_) == stream_.num_tasks()) r.metrics = compute_metrics(eval_);
  r.steps = steps_;
  r.checkpoints = checkpoints_;
  r.boundaries = boundaries_;
  r.task_end_step = task_end_step_;
  return r;
}

// ---------------------------------------------------------------------------
// Experiments

std::vector<SummaryRow> summarize(const std::vector<RunRecord>& runs) {
  std::map<Algorithm, std::vector<Metrics>> by_algo;
  for (const auto& r : runs) by_algo[r.algorithm].push_back(r.metrics);
  std::vector<SummaryRow> rows;
  for (const auto& [algo, ms] : by_algo) {
    auto stats = [&](auto get) {
      std::vector<double> v;
      for (const auto& m : ms) v.push_back(get(m));
      const double mean = mean_of(v);
      double ss = 0.0;
      for (double x : v) ss += (x - mean) * (x - mean);
      const double sd = v.size() > 1 ? std::sqrt(ss / static_cast<double>(v.size() - 1)) : 0.0;
      return std::pair{mean, sd};
    };
    const auto [am, as] = stats([](const Metrics& m) { return m.last_accuracy; });
    const auto [fm, fsd] = stats([](const Metrics& m) { return m.forgetting; });
    rows.push_back({algo, am, as, fm, fsd});
  }
  return rows;
}

ExperimentResult run_experiment(const ExperimentConfig& config,
                                const std::vector<std::uint64_t>& seeds,
                                const std::vector<Algorithm>& algorithms,
                                const ExperimentOptions& options) {
  if (seeds.empty()) throw ConfigError("seed list is empty");
  if (algorithms.empty()) throw ConfigError("algorithm list is empty");
  config.validate();

  struct Job {
    Algorithm algo;
    std::uint64_t seed;
  };
  std::vector<Job> jobs;
  for (Algorithm a : algorithms)
    for (std::uint64_t s : seeds) jobs.push_back({a, s});

  auto run_one = [&](const Job& job) {
    std::optional<fs::path> dir;
    if (options.out_dir)
      dir = *options.out_dir / to_string(job.algo) / ("seed_" + std::to_string(job.seed));
    ContinualRun run(config, job.algo, job.seed, dir);
    if (options.resume && dir) run.resume();
    run.run(options.stop_after_task);
    return run.record();
  };

  ExperimentResult result;
  result.runs.resize(jobs.size());
  const std::size_t width = std::max(1u, options.jobs);
  for (std::size_t start = 0; start < jobs.size(); start += width) {
    const std::size_t end = std::min(jobs.size(), start + width);
    if (width == 1) {
      result.runs[start] = run_one(jobs[start]);
      continue;
    }
    std::vector<std::future<RunRecord>> pending;
    for (std::size_t k = start; k < end; ++k)
      pending.push_back(std::async(std::launch::async, run_one, jobs[k]));
    for (std::size_t k = start; k < end; ++k) result.runs[k] = pending[k - start].get();
  }

  const bool complete = std::all_of(result.runs.begin(), result.runs.end(), [&](const RunRecord& r) {
    return r.eval.num_tasks() == config.stream.num_tasks;
  });
  if (complete) {
    result.summary = summarize(result.runs);
    if (options.out_dir) {
      fs::create_directories(*options.out_dir);
      std::ofstream out(*options.out_dir / "summary.csv", std::ios::trunc);
      write_summary_csv(out, result.summary);
    }
  }
  return result;
}

// ---------------------------------------------------------------------------
// CSV

void write_steps_csv(std::ostream& os, const std::vector<StepLog>& steps) {
  os << "step,reward_mean,sigma_batch,sigma_hat,adv_magnitude,ret_reward_mean,kl_anchor\n";
  for (const auto& s : steps) {
    os << s.step << ',' << fmt_g17(s.reward_mean) << ',' << fmt_g17(s.sigma_batch) << ','
       << fmt_g17(s.sigma_hat) << ',' << fmt_g17(s.adv_magnitude) << ','
       << fmt_g17(s.ret_reward_mean) << ',' << fmt_g17(s.kl_anchor) << '\n';
  }
}

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> cells;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) cells.push_back(cell);
  return cells;
}

}  // namespace

std::vector<StepLog> read_steps_csv(std::istream& is) {
  std::string line;
  if (!std::getline(is, line)) return {};
  std::vector<StepLog> steps;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto c = split_csv_line(line);
    if (c.size() != 7) throw ConfigError("malformed steps.csv row: " + line);
    StepLog s;
    s.step = parse_count("step", c[0]);
    s.reward_mean = parse_double("reward_mean", c[1]);
    s.sigma_batch = parse_double("sigma_batch", c[2]);
    s.sigma_hat = parse_double("sigma_hat", c[3]);
    s.adv_magnitude = parse_double("adv_magnitude", c[4]);
    s.ret_reward_mean = parse_double("ret_reward_mean", c[5]);
    s.kl_anchor = parse_double("kl_anchor", c[6]);
    steps.push_back(s);
  }
  return steps;
}

void write_eval_csv(std::ostream& os, const EvalMatrix& m) {
  os << "after_task,eval_task,accuracy\n";
  for (std::size_t i = 0; i < m.acc.size(); ++i)
    for (std::size_t j = 0; j < m.acc[i].size(); ++j)
      os << i + 1 << ',' << j + 1 << ',' << fmt_g17(m.acc[i][j]) << '\n';
}

EvalMatrix read_eval_csv(std::istream& is) {
  std::string line;
  EvalMatrix m;
  if (!std::getline(is, line)) return m;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto c = split_csv_line(line);
    if (c.size() != 3) throw ConfigError("malformed evalmatrix.csv row: " + line);
    const std::size_t i = parse_count("after_task", c[0]);
    const std::size_t j = parse_count("eval_task", c[1]);
    if (i == 0 || j == 0 || j > i) throw ConfigError("evalmatrix.csv index out of range: " + line);
    if (m.acc.size() < i) m.acc.resize(i);
    if (m.acc[i - 1].size() != j - 1)
      throw ConfigError("evalmatrix.csv rows out of order: " + line);
    m.acc[i - 1].push_back(parse_double("accuracy", c[2]));
  }
  return m;
}

void write_summary_csv(std::ostream& os, const std::vector<SummaryRow>& rows) {
  os << "algo,A_mean,A_std,F_mean,F_std\n";
  for (const auto& r : rows)
    os << to_string(r.algorithm) << ',' << fmt_f6(r.a_mean) << ',' << fmt_f6(r.a_std) << ','
       << fmt_f6(r.f_mean) << ',' << fmt_f6(r.f_std) << '\n';
}

std::vector<SummaryRow> report_directory(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw ConfigError("not a directory: " + dir.string());
  std::vector<RunRecord> runs;
  for (const auto& algo_dir : fs::directory_iterator(dir)) {
    if (!algo_dir.is_directory()) continue;
    const Algorithm algo = parse_algorithm(algo_dir.path().filename().string());
    std::vector<fs::path> seed_dirs;
    for (const auto& s : fs::directory_iterator(algo_dir.path()))
      if (s.is_directory() && s.path().filename().string().starts_with("seed_"))
        seed_dirs.push_back(s.path());
    std::sort(seed_dirs.begin(), seed_dirs.end());
    for (const auto& s : seed_dirs) {
      std::ifstream in(s / "evalmatrix.csv");
      if (!in) throw ConfigError("missing " + (s / "evalmatrix.csv").string());
      RunRecord r;
      r.algorithm = algo;
      r.eval = read_eval_csv(in);
      r.metrics = compute_metrics(r.eval);
      runs.push_back(std::move(r));
    }
  }
  if (runs.empty()) throw ConfigError("no runs found under " + dir.string());
  return summarize(runs);
}

std::string format_table_row(const SummaryRow& row) {
  char buf[128];
  std::snprintf(buf, sizeof buf, "%-8s  A %6.2f ± %5.2f   F %6.2f ± %5.2f",
                to_string(row.algorithm).c_str(), 100.0 * row.a_mean, 100.0 * row.a_std,
                100.0 * row.f_mean, 100.0 * row.f_std);
  return buf;
}

}  // namespace rapo
