#pragma once

// Training and evaluation harness: synthetic task generation, the SGD loop
// (batch 16, decay 0.9 on every non-improving validation epoch, patience-5
// early stopping), posterior diagnostics, temperature selection, and the
// finite-difference gradient checker. All file I/O lives here: JSONL
// datasets, CSV metrics, JSON checkpoints.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "sparsetree/backward.hpp"
#include "sparsetree/errors.hpp"
#include "sparsetree/inference.hpp"
#include "sparsetree/latent_model.hpp"
#include "sparsetree/rng.hpp"

namespace sparsetree::harness {

using json = nlohmann::json;

// ---------------------------------------------------------------------------
// Task names and config plumbing

inline std::string to_string(Task task) {
  switch (task) {
    case Task::classify: return "classify";
    case Task::pair: return "pair";
    case Task::revdict: return "revdict";
  }
  return "classify";
}

inline Task task_from_string(const std::string& s) {
  if (s == "classify") return Task::classify;
  if (s == "pair") return Task::pair;
  if (s == "revdict") return Task::revdict;
  throw InputError("unknown task: " + s);
}

inline std::string to_string(TreeSource src) {
  switch (src) {
    case TreeSource::latent: return "latent";
    case TreeSource::flat: return "flat";
    case TreeSource::left_to_right: return "left_to_right";
    case TreeSource::fixed: return "gold";
  }
  return "latent";
}

inline TreeSource tree_source_from_string(const std::string& s) {
  if (s == "latent") return TreeSource::latent;
  if (s == "flat") return TreeSource::flat;
  if (s == "left_to_right" || s == "l2r") return TreeSource::left_to_right;
  if (s == "gold" || s == "fixed") return TreeSource::fixed;
  throw InputError("unknown tree source: " + s);
}

// ---------------------------------------------------------------------------
// Synthetic data
//
// The "governor" task: every sentence opens with a key token, carries one
// governor token somewhere later, and is padded with fillers plus distractor
// keys. The generating tree attaches the key under the governor, and the
// label depends on the (governor type, governed key type) pair, so a model
// that recovers the pairing has an edge over order-free composition.

struct GenSpec {
  Task task = Task::classify;
  int count = 1000;
  int n_min = 5, n_max = 6;
  int governor_types = 4;
  int key_types = 4;
  int filler_types = 8;
  int n_classes = 4;
  int distractors = 1;
  int d_out = 16;  // revdict target width

  int vocab_size() const { return governor_types + key_types + filler_types; }

  void validate() const {
    if (count < 1) throw InputError("gen: count must be positive");
    if (n_min < 3 || n_max < n_min) throw InputError("gen: need 3 <= n_min <= n_max");
    if (governor_types < 1 || key_types < 1 || filler_types < 1 || n_classes < 1)
      throw InputError("gen: type counts must be positive");
    if ((governor_types * key_types) % n_classes != 0)
      throw InputError("gen: governor_types*key_types must be a multiple of n_classes");
    if (distractors > 0 && key_types < 2)
      throw InputError("gen: distractors need at least two key types");
    if (distractors > n_min - 2)
      throw InputError("gen: not enough positions for the requested distractors");
    if (task == Task::revdict && d_out < 2) throw InputError("gen: d_out too small");
  }
};

struct DataRecord {
  std::vector<int> tokens;
  std::vector<int> tokens_b;     // pair task second sentence
  int label = 0;
  Vec target;                    // revdict target vector
  std::vector<int> gold_heads;   // generator ground truth, diagnostics only
};

using Dataset = std::vector<DataRecord>;

namespace detail {

// Balanced random pairing table: label = table[governor][key]. Every class
// covers exactly (G*K)/C cells and the assignment carries no additive
// structure, so the label is only readable by models that actually bind the
// two token identities. The table is fixed (constant seed): it is part of
// the task, shared by train and validation splits.
inline std::vector<std::vector<int>> pairing_table(const GenSpec& spec) {
  std::vector<int> cells(spec.governor_types * spec.key_types);
  for (size_t i = 0; i < cells.size(); ++i)
    cells[i] = static_cast<int>(i % spec.n_classes);
  Rng shuffle_rng(0x5eedab1eULL);
  for (size_t i = cells.size(); i > 1; --i)
    std::swap(cells[i - 1], cells[shuffle_rng.uniform_int(0, static_cast<int>(i) - 1)]);
  std::vector<std::vector<int>> table(spec.governor_types,
                                      std::vector<int>(spec.key_types));
  for (int a = 0; a < spec.governor_types; ++a)
    for (int b = 0; b < spec.key_types; ++b) table[a][b] = cells[a * spec.key_types + b];
  return table;
}

inline std::vector<int> governor_sentence(const GenSpec& spec,
                                          const std::vector<std::vector<int>>& table,
                                          Rng& rng, int& label,
                                          std::vector<int>& gold_heads) {
  const int n = rng.uniform_int(spec.n_min, spec.n_max);
  const int gov_type = rng.uniform_int(0, spec.governor_types - 1);
  const int key_type = rng.uniform_int(0, spec.key_types - 1);
  const int pos_gov = rng.uniform_int(3, n);

  std::vector<int> tokens(n, -1);
  tokens[0] = spec.governor_types + key_type;  // the governed key opens the sentence
  tokens[pos_gov - 1] = gov_type;

  std::vector<int> free_slots;
  for (int pos = 2; pos <= n; ++pos)
    if (pos != pos_gov) free_slots.push_back(pos);
  for (int d = 0; d < spec.distractors; ++d) {
    int other = rng.uniform_int(0, spec.key_types - 2);
    if (other >= key_type) ++other;
    const int pick = rng.uniform_int(0, static_cast<int>(free_slots.size()) - 1);
    tokens[free_slots[pick] - 1] = spec.governor_types + other;
    free_slots.erase(free_slots.begin() + pick);
  }
  for (int pos : free_slots)
    tokens[pos - 1] =
        spec.governor_types + spec.key_types + rng.uniform_int(0, spec.filler_types - 1);

  gold_heads.assign(n, 0);
  gold_heads[0] = pos_gov;  // key under governor; everything else under root
  label = table[gov_type][key_type];
  return tokens;
}

inline std::vector<Vec> revdict_targets(const GenSpec& spec) {
  Rng rng(0x7a11c0deULL);  // fixed: the target table is part of the task
  std::vector<Vec> table(spec.n_classes, Vec(spec.d_out, 0.0));
  for (Vec& row : table) {
    for (double& v : row) v = rng.normal();
    const double norm = l2_norm(row);
    for (double& v : row) v /= norm;
  }
  return table;
}

}  // namespace detail

inline Dataset gen_synthetic(const GenSpec& spec, std::uint64_t seed) {
  spec.validate();
  Rng rng(seed);
  const auto table = detail::pairing_table(spec);
  const std::vector<Vec> targets =
      spec.task == Task::revdict ? detail::revdict_targets(spec) : std::vector<Vec>{};
  Dataset data;
  data.reserve(spec.count);
  for (int i = 0; i < spec.count; ++i) {
    DataRecord rec;
    rec.tokens = detail::governor_sentence(spec, table, rng, rec.label, rec.gold_heads);
    if (spec.task == Task::pair) {
      int label_b = 0;
      std::vector<int> gold_b;
      rec.tokens_b = detail::governor_sentence(spec, table, rng, label_b, gold_b);
      rec.label = (rec.label + label_b) % spec.n_classes;
    } else if (spec.task == Task::revdict) {
      rec.target = targets[rec.label];
    }
    data.push_back(std::move(rec));
  }
  return data;
}

// ---------------------------------------------------------------------------
// JSONL dataset files

inline void write_jsonl(const Dataset& data, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw InputError("cannot open for writing: " + path);
  for (const DataRecord& rec : data) {
    json row;
    row["tokens"] = rec.tokens;
    row["label"] = rec.label;
    if (!rec.gold_heads.empty()) row["gold_heads"] = rec.gold_heads;
    if (!rec.tokens_b.empty()) row["tokens_b"] = rec.tokens_b;
    if (!rec.target.empty()) row["target"] = rec.target;
    out << row.dump() << "\n";
  }
}

inline Dataset read_jsonl(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open dataset: " + path);
  Dataset data;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const json row = json::parse(line);
    DataRecord rec;
    rec.tokens = row.at("tokens").get<std::vector<int>>();
    rec.label = row.at("label").get<int>();
    if (row.contains("gold_heads")) rec.gold_heads = row["gold_heads"].get<std::vector<int>>();
    if (row.contains("tokens_b")) rec.tokens_b = row["tokens_b"].get<std::vector<int>>();
    if (row.contains("target")) rec.target = row["target"].get<Vec>();
    data.push_back(std::move(rec));
  }
  return data;
}

// ---------------------------------------------------------------------------
// Checkpoints: named tensors with dimensions and a format version; the
// round trip is bit-exact (doubles survive JSON serialization unchanged).

inline json dims_to_json(const ModelDims& d) {
  return json{{"vocab", d.vocab},       {"d_emb", d.d_emb},
              {"use_encoder", d.use_encoder}, {"d_rnn", d.d_rnn},
              {"d_hidden", d.d_hidden}, {"d_lstm", d.d_lstm},
              {"d_pair", d.d_pair},     {"n_classes", d.n_classes},
              {"d_out", d.d_out}};
}

inline ModelDims dims_from_json(const json& j) {
  ModelDims d;
  d.vocab = j.at("vocab");
  d.d_emb = j.at("d_emb");
  d.use_encoder = j.at("use_encoder");
  d.d_rnn = j.at("d_rnn");
  d.d_hidden = j.at("d_hidden");
  d.d_lstm = j.at("d_lstm");
  d.d_pair = j.at("d_pair");
  d.n_classes = j.at("n_classes");
  d.d_out = j.at("d_out");
  return d;
}

inline void save_checkpoint(ModelParams& params, const std::string& path) {
  json file;
  file["format_version"] = 1;
  file["task"] = to_string(params.task);
  file["dims"] = dims_to_json(params.dims);
  json tensors;
  for (const TensorRef& ref : collect_tensors(params)) {
    tensors[ref.name] = {{"rows", ref.rows}, {"cols", ref.cols}, {"data", *ref.data}};
  }
  file["tensors"] = std::move(tensors);
  std::ofstream out(path);
  if (!out) throw InputError("cannot open for writing: " + path);
  out << file.dump(2) << "\n";
}

inline ModelParams load_checkpoint(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open checkpoint: " + path);
  json file;
  in >> file;
  if (file.at("format_version").get<int>() != 1)
    throw InputError("unsupported checkpoint format version");
  ModelParams params =
      make_params(dims_from_json(file.at("dims")), task_from_string(file.at("task")));
  const json& tensors = file.at("tensors");
  for (TensorRef& ref : collect_tensors(params)) {
    const json& t = tensors.at(ref.name);
    if (t.at("rows").get<int>() != ref.rows || t.at("cols").get<int>() != ref.cols)
      throw InputError("checkpoint tensor shape mismatch for " + ref.name);
    *ref.data = t.at("data").get<Vec>();
  }
  return params;
}

// ---------------------------------------------------------------------------
// Training

struct TrainConfig {
  Task task = Task::classify;
  TreeSource tree_source = TreeSource::latent;
  ModelDims dims;
  SolverConfig solver;
  int batch_size = 16;
  double lr = 0.1;
  double lr_decay = 0.9;
  int patience_epochs = 5;
  int max_epochs = 50;
  std::uint64_t seed = 1;
  std::vector<double> temperature_grid = {0.5, 1.0, 2.0};

  void validate() const {
    // lr = 0 is allowed (a frozen run is well defined); negatives are not.
    if (batch_size < 1 || lr < 0 || lr_decay <= 0 || patience_epochs < 1 || max_epochs < 1)
      throw InputError("train config: numeric fields must be positive");
    if (temperature_grid.empty()) throw InputError("train config: empty temperature grid");
    for (double t : temperature_grid)
      if (t <= 0) throw InputError("train config: temperatures must be positive");
    solver.validate();
  }
};

inline TrainConfig train_config_from_json(const json& j) {
  TrainConfig cfg;
  if (j.contains("task")) cfg.task = task_from_string(j["task"]);
  if (j.contains("tree_source")) cfg.tree_source = tree_source_from_string(j["tree_source"]);
  if (j.contains("dims")) cfg.dims = dims_from_json(j["dims"]);
  if (j.contains("batch_size")) cfg.batch_size = j["batch_size"];
  if (j.contains("lr")) cfg.lr = j["lr"];
  if (j.contains("lr_decay")) cfg.lr_decay = j["lr_decay"];
  if (j.contains("patience_epochs")) cfg.patience_epochs = j["patience_epochs"];
  if (j.contains("max_epochs")) cfg.max_epochs = j["max_epochs"];
  if (j.contains("seed")) cfg.seed = j["seed"];
  if (j.contains("temperature_grid"))
    cfg.temperature_grid = j["temperature_grid"].get<std::vector<double>>();
  if (j.contains("solver")) {
    const json& s = j["solver"];
    if (s.contains("max_iterations")) cfg.solver.max_iterations = s["max_iterations"];
    if (s.contains("kkt_tol")) cfg.solver.kkt_tol = s["kkt_tol"];
    if (s.contains("ridge")) cfg.solver.ridge = s["ridge"];
    if (s.contains("drop_tol")) cfg.solver.drop_tol = s["drop_tol"];
  }
  return cfg;
}

// Exact multiplicative schedule; tests reproduce lr values with this helper.
inline double decay_pow(double base, int k) {
  double x = 1.0;
  for (int i = 0; i < k; ++i) x *= base;
  return x;
}

inline std::string format_g17(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

// One record's forward pass: loss, prediction, posterior stats, optional
// gradient accumulation. Returns false when the solver failed to converge
// (the record is skipped by the caller).
struct RecordResult {
  double loss = 0.0;
  int prediction = -1;
  double mean_support = 1.0;
  double valid_metric = 0.0;  // accuracy contribution or cosine similarity
};

inline bool run_record(const ModelParams& params, const DataRecord& rec,
                       const ForwardConfig& fcfg, GradientTape* tape, RecordResult& out) {
  if (params.task == Task::classify) {
    ForwardConfig cfg = fcfg;
    if (cfg.tree_source == TreeSource::fixed) cfg.fixed_tree = DepTree{rec.gold_heads};
    const LatentForward fwd = forward_latent(Sentence{rec.tokens}, params, cfg);
    if (!fwd.post.converged) return false;
    out.loss = nll_loss(fwd.probs, rec.label).value;
    out.prediction = static_cast<int>(
        std::max_element(fwd.probs.begin(), fwd.probs.end()) - fwd.probs.begin());
    out.mean_support = fwd.post.support_size();
    out.valid_metric = out.prediction == rec.label ? 1.0 : 0.0;
    if (tape)
      backward_latent(fwd, Sentence{rec.tokens}, params, nll_backward(fwd.probs, rec.label),
                      *tape);
    return true;
  }
  if (params.task == Task::pair) {
    const PairForward fwd = pair_forward(Sentence{rec.tokens}, Sentence{rec.tokens_b},
                                         params, fcfg);
    if (!fwd.post_p.converged || !fwd.post_h.converged) return false;
    out.loss = nll_loss(fwd.probs, rec.label).value;
    out.prediction = static_cast<int>(
        std::max_element(fwd.probs.begin(), fwd.probs.end()) - fwd.probs.begin());
    out.mean_support = 0.5 * (fwd.post_p.support_size() + fwd.post_h.support_size());
    out.valid_metric = out.prediction == rec.label ? 1.0 : 0.0;
    if (tape)
      pair_backward(fwd, Sentence{rec.tokens}, Sentence{rec.tokens_b}, params,
                    nll_backward(fwd.probs, rec.label), *tape);
    return true;
  }
  const RevdictForward fwd = expected_representation(Sentence{rec.tokens}, params, fcfg);
  if (!fwd.post.converged) return false;
  out.loss = cosine_loss(fwd.rbar, rec.target);
  out.mean_support = fwd.post.support_size();
  out.valid_metric = 1.0 - out.loss;  // cosine similarity
  if (tape)
    revdict_backward(fwd, Sentence{rec.tokens}, params,
                     cosine_loss_backward(fwd.rbar, rec.target), *tape);
  return true;
}

struct TrainResult {
  int epochs = 0;
  double best_valid = -1e300;
  std::string metrics_csv;       // also written to <out_dir>/metrics.csv
  std::string checkpoint_path;   // best-validation parameters
  int skipped_records = 0;
};

inline TrainResult train(const TrainConfig& config, const Dataset& train_data,
                         const Dataset& valid_data, const std::string& out_dir) {
  config.validate();
  if (train_data.empty() || valid_data.empty())
    throw InputError("train: empty dataset split");
  std::filesystem::create_directories(out_dir);

  Rng rng(config.seed);
  ModelParams params = init_params(config.dims, config.task, rng);
  GradientTape tape = make_tape(params);

  ForwardConfig fcfg;
  fcfg.solver = config.solver;
  fcfg.tree_source = config.tree_source;

  std::ofstream log(out_dir + "/train.log");
  TrainResult result;
  result.checkpoint_path = out_dir + "/checkpoint.json";
  std::ostringstream csv;
  csv << "epoch,lr,train_loss,valid_score,mean_support_size\n";

  std::vector<size_t> order(train_data.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;

  double best = -1e300;
  int nonimproving_total = 0, consecutive_bad = 0;

  for (int epoch = 1; epoch <= config.max_epochs; ++epoch) {
    const double lr = config.lr * decay_pow(config.lr_decay, nonimproving_total);

    // Deterministic Fisher-Yates reshuffle per epoch.
    for (size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[rng.uniform_int(0, static_cast<int>(i) - 1)]);

    double loss_sum = 0.0, support_sum = 0.0;
    int contributed = 0;
    for (size_t start = 0; start < order.size(); start += config.batch_size) {
      tape.zero();
      int batch_count = 0;
      const size_t stop = std::min(order.size(), start + config.batch_size);
      for (size_t k = start; k < stop; ++k) {
        const DataRecord& rec = train_data[order[k]];
        RecordResult rr;
        if (!run_record(params, rec, fcfg, &tape, rr)) {
          log << "epoch " << epoch << ": solver did not converge, skipping record "
              << order[k] << "\n";
          ++result.skipped_records;
          continue;
        }
        if (!std::isfinite(rr.loss)) {
          Dataset batch;
          for (size_t b = start; b < stop; ++b) batch.push_back(train_data[order[b]]);
          write_jsonl(batch, out_dir + "/nan_batch.jsonl");
          throw NumericalError("train: non-finite loss; offending batch dumped to " +
                               out_dir + "/nan_batch.jsonl");
        }
        loss_sum += rr.loss;
        support_sum += rr.mean_support;
        ++batch_count;
        ++contributed;
      }
      if (batch_count > 0) apply_gradient(params, tape, lr / batch_count);
    }

    double valid_sum = 0.0;
    for (const DataRecord& rec : valid_data) {
      RecordResult rr;
      if (run_record(params, rec, fcfg, nullptr, rr)) valid_sum += rr.valid_metric;
    }
    const double valid_score = valid_sum / valid_data.size();
    const double train_loss = contributed ? loss_sum / contributed : 0.0;
    const double mean_support = contributed ? support_sum / contributed : 1.0;

    csv << epoch << "," << format_g17(lr) << "," << format_g17(train_loss) << ","
        << format_g17(valid_score) << "," << format_g17(mean_support) << "\n";

    if (valid_score > best) {
      best = valid_score;
      consecutive_bad = 0;
      save_checkpoint(params, result.checkpoint_path);
    } else {  // ties count as non-improving
      ++nonimproving_total;
      ++consecutive_bad;
    }
    result.epochs = epoch;
    if (consecutive_bad >= config.patience_epochs) break;
  }

  result.best_valid = best;
  result.metrics_csv = csv.str();
  std::ofstream metrics(out_dir + "/metrics.csv");
  metrics << result.metrics_csv;
  return result;
}

// ---------------------------------------------------------------------------
// Evaluation and temperature selection

struct EvalReport {
  double accuracy = 0.0;
  double mean_support_size = 0.0;
  double flat_tree_probability = 0.0;
  double reference_arc_probability = 0.0;
  double temperature = 1.0;

  json to_json() const {
    return json{{"accuracy", accuracy},
                {"mean_support_size", mean_support_size},
                {"flat_tree_probability", flat_tree_probability},
                {"reference_arc_probability", reference_arc_probability},
                {"temperature", temperature}};
  }
};

namespace detail {

struct PosteriorStats {
  double support = 1.0;
  double flat_prob = 0.0;
  double gold_arc_prob = -1.0;  // negative when no gold heads are available
};

inline PosteriorStats posterior_stats(const SparsePosterior& post,
                                      const std::vector<int>& gold_heads) {
  PosteriorStats stats;
  stats.support = post.support_size();
  const DepTree flat = flat_tree(post.n);
  for (int i = 0; i < post.support_size(); ++i)
    if (post.support[i] == flat) stats.flat_prob = post.q[i];
  if (static_cast<int>(gold_heads.size()) == post.n && is_valid_tree(gold_heads)) {
    double mass = 0.0;
    for (int t = 1; t <= post.n; ++t)
      mass += post.u[arc_slot(gold_heads[t - 1], t, post.n)];
    stats.gold_arc_prob = mass / post.n;
  }
  return stats;
}

}  // namespace detail

inline EvalReport evaluate(const ModelParams& params, const Dataset& data,
                           double temperature, const SolverConfig& solver = {},
                           TreeSource tree_source = TreeSource::latent) {
  if (data.empty()) throw InputError("evaluate: empty dataset");
  ForwardConfig fcfg;
  fcfg.solver = solver;
  fcfg.temperature = temperature;
  fcfg.tree_source = tree_source;

  // Retrieval candidates for the representation task: the distinct targets.
  std::vector<std::pair<int, Vec>> candidates;
  if (params.task == Task::revdict) {
    std::set<int> seen;
    for (const DataRecord& rec : data)
      if (seen.insert(rec.label).second) candidates.emplace_back(rec.label, rec.target);
  }

  EvalReport report;
  report.temperature = temperature;
  double correct = 0.0, support = 0.0, flat = 0.0, gold = 0.0;
  int counted = 0, gold_counted = 0;
  for (const DataRecord& rec : data) {
    ForwardConfig cfg = fcfg;
    if (cfg.tree_source == TreeSource::fixed) cfg.fixed_tree = DepTree{rec.gold_heads};
    if (params.task == Task::classify) {
      const LatentForward fwd = forward_latent(Sentence{rec.tokens}, params, cfg);
      if (!fwd.post.converged) continue;
      const int pred = static_cast<int>(
          std::max_element(fwd.probs.begin(), fwd.probs.end()) - fwd.probs.begin());
      correct += pred == rec.label ? 1.0 : 0.0;
      const auto stats = detail::posterior_stats(fwd.post, rec.gold_heads);
      support += stats.support;
      flat += stats.flat_prob;
      if (stats.gold_arc_prob >= 0) {
        gold += stats.gold_arc_prob;
        ++gold_counted;
      }
    } else if (params.task == Task::pair) {
      const PairForward fwd =
          pair_forward(Sentence{rec.tokens}, Sentence{rec.tokens_b}, params, cfg);
      if (!fwd.post_p.converged || !fwd.post_h.converged) continue;
      const int pred = static_cast<int>(
          std::max_element(fwd.probs.begin(), fwd.probs.end()) - fwd.probs.begin());
      correct += pred == rec.label ? 1.0 : 0.0;
      const auto stats = detail::posterior_stats(fwd.post_p, rec.gold_heads);
      support += 0.5 * (fwd.post_p.support_size() + fwd.post_h.support_size());
      flat += stats.flat_prob;
      if (stats.gold_arc_prob >= 0) {
        gold += stats.gold_arc_prob;
        ++gold_counted;
      }
    } else {
      const RevdictForward fwd = expected_representation(Sentence{rec.tokens}, params, cfg);
      if (!fwd.post.converged) continue;
      int best_label = -1;
      double best_cos = -2.0;
      for (const auto& [label, target] : candidates) {
        const double cs = 1.0 - cosine_loss(fwd.rbar, target);
        if (cs > best_cos) {
          best_cos = cs;
          best_label = label;
        }
      }
      correct += best_label == rec.label ? 1.0 : 0.0;
      const auto stats = detail::posterior_stats(fwd.post, rec.gold_heads);
      support += stats.support;
      flat += stats.flat_prob;
      if (stats.gold_arc_prob >= 0) {
        gold += stats.gold_arc_prob;
        ++gold_counted;
      }
    }
    ++counted;
  }
  if (counted == 0) throw NumericalError("evaluate: no record converged");
  report.accuracy = correct / counted;
  report.mean_support_size = support / counted;
  report.flat_tree_probability = flat / counted;
  report.reference_arc_probability = gold_counted ? gold / gold_counted : 0.0;
  return report;
}

// Grid search for the evaluation temperature: highest accuracy wins, ties go
// to the smallest temperature.
inline std::pair<double, EvalReport> select_temperature(const ModelParams& params,
                                                        const Dataset& data,
                                                        std::vector<double> grid,
                                                        const SolverConfig& solver = {},
                                                        TreeSource source = TreeSource::latent) {
  if (grid.empty()) throw InputError("select_temperature: empty grid");
  std::sort(grid.begin(), grid.end());
  double best_t = grid.front();
  EvalReport best_report;
  bool first = true;
  for (double t : grid) {
    const EvalReport report = evaluate(params, data, t, solver, source);
    if (first || report.accuracy > best_report.accuracy) {
      best_report = report;
      best_t = t;
      first = false;
    }
  }
  return {best_t, best_report};
}

// ---------------------------------------------------------------------------
// Gradient checking

struct GradcheckConfig {
  std::uint64_t seed = 7;
  int jacobian_instances = 50;
  int model_seeds = 20;        // per sentence length in {2,3,4}
  int side_task_seeds = 3;     // pair / revdict coverage
  std::string corrupt_block;   // test hook: damage one analytic block by name
};

struct BlockReport {
  std::string name;
  double max_rel_err = 0.0;
  int checked = 0;
  bool pass = true;
};

struct GradcheckReport {
  std::vector<BlockReport> blocks;
  int boundary_resamples = 0;
  bool pass = true;

  std::string to_string() const {
    std::ostringstream out;
    for (const BlockReport& b : blocks) {
      out << (b.pass ? "ok   " : "FAIL ") << b.name << "  max_rel_err=" << b.max_rel_err
          << "  coords=" << b.checked << "\n";
    }
    out << "boundary resamples: " << boundary_resamples << "\n";
    out << (pass ? "gradcheck: PASS" : "gradcheck: FAIL") << "\n";
    return out.str();
  }
};

namespace detail {

inline double rel_err(double a, double b) {
  const double diff = std::abs(a - b);
  if (diff <= 1e-6) return 0.0;  // absolute floor
  return diff / std::max(std::abs(a), std::abs(b));
}

inline BlockReport& block(GradcheckReport& report, const std::string& name) {
  for (BlockReport& b : report.blocks)
    if (b.name == name) return b;
  report.blocks.push_back(BlockReport{name});
  return report.blocks.back();
}

inline std::set<std::vector<int>> support_keys(const SparsePosterior& post) {
  std::set<std::vector<int>> keys;
  for (const auto& t : post.support) keys.insert(t.heads);
  return keys;
}

// Loss and support for one record under the current parameters.
inline bool loss_and_support(const ModelParams& params, const DataRecord& rec,
                             const ForwardConfig& fcfg, double& loss,
                             std::set<std::vector<int>>& support) {
  if (params.task == Task::classify) {
    const LatentForward fwd = forward_latent(Sentence{rec.tokens}, params, fcfg);
    if (!fwd.post.converged) return false;
    loss = nll_loss(fwd.probs, rec.label).value;
    support = support_keys(fwd.post);
    return true;
  }
  if (params.task == Task::pair) {
    const PairForward fwd =
        pair_forward(Sentence{rec.tokens}, Sentence{rec.tokens_b}, params, fcfg);
    if (!fwd.post_p.converged || !fwd.post_h.converged) return false;
    loss = nll_loss(fwd.probs, rec.label).value;
    support = support_keys(fwd.post_p);
    for (const auto& k : support_keys(fwd.post_h)) {
      auto shifted = k;
      shifted.push_back(-1);  // keep premise/hypothesis keys distinct
      support.insert(shifted);
    }
    return true;
  }
  const RevdictForward fwd = expected_representation(Sentence{rec.tokens}, params, fcfg);
  if (!fwd.post.converged) return false;
  loss = cosine_loss(fwd.rbar, rec.target);
  support = support_keys(fwd.post);
  return true;
}

// Full-model finite differences over every tensor block for one task.
inline void check_model_task(Task task, const GradcheckConfig& cfg, int seeds,
                             GradcheckReport& report) {
  ModelDims dims;
  dims.vocab = 12;
  dims.d_emb = 6;
  dims.use_encoder = true;
  dims.d_rnn = 3;
  dims.d_hidden = 6;
  dims.d_lstm = 6;
  dims.d_pair = 6;
  dims.n_classes = 3;
  dims.d_out = 6;

  GenSpec spec;
  spec.task = task;
  spec.count = 1;
  spec.governor_types = 3;
  spec.key_types = 3;
  spec.filler_types = 6;
  spec.n_classes = 3;
  spec.d_out = dims.d_out;
  const std::string prefix = to_string(task) + "/";
  const double eps = 1e-4;

  int done = 0;
  std::uint64_t attempt = 0;
  const std::vector<int> lengths = {2, 3, 4};
  while (done < seeds * static_cast<int>(lengths.size()) && attempt < 20000) {
    const int n = lengths[done % lengths.size()];
    Rng rng(Rng(cfg.seed).substream(1000 * static_cast<std::uint64_t>(task) + attempt));
    ++attempt;
    spec.n_min = std::max(3, n);
    spec.n_max = std::max(3, n);
    spec.distractors = n >= 4 ? 1 : 0;

    ModelParams params = init_params(dims, task, rng);
    DataRecord rec;
    if (n >= 3) {
      Dataset one = gen_synthetic(spec, rng.next());
      rec = one[0];
    } else {  // too short for the governor pattern: random tokens
      rec.tokens = {rng.uniform_int(0, dims.vocab - 1), rng.uniform_int(0, dims.vocab - 1)};
      rec.label = rng.uniform_int(0, dims.n_classes - 1);
      if (task == Task::pair)
        rec.tokens_b = {rng.uniform_int(0, dims.vocab - 1),
                        rng.uniform_int(0, dims.vocab - 1)};
      if (task == Task::revdict) {
        rec.target.assign(dims.d_out, 0.0);
        for (double& v : rec.target) v = rng.normal();
        const double norm = l2_norm(rec.target);
        for (double& v : rec.target) v /= norm;
      }
    }

    ForwardConfig fcfg;
    double base_loss = 0.0;
    std::set<std::vector<int>> base_support;
    if (!loss_and_support(params, rec, fcfg, base_loss, base_support)) continue;

    // Analytic gradients.
    GradientTape tape = make_tape(params);
    RecordResult rr;
    if (!run_record(params, rec, fcfg, &tape, rr)) continue;
    if (!cfg.corrupt_block.empty()) {
      for (TensorRef& ref : collect_tensors(tape.grad))
        if (ref.name == cfg.corrupt_block)
          for (double& v : *ref.data) v = v * 1.02 + 1e-3;
    }

    bool instance_ok = true;
    auto prefs = collect_tensors(params);
    auto grefs = collect_tensors(tape.grad);
    for (size_t b = 0; b < prefs.size() && instance_ok; ++b) {
      BlockReport& blk = block(report, prefix + prefs[b].name);
      for (size_t c = 0; c < prefs[b].data->size(); ++c) {
        const double saved = (*prefs[b].data)[c];
        double lp = 0.0, lm = 0.0;
        std::set<std::vector<int>> sp, sm;
        (*prefs[b].data)[c] = saved + eps;
        const bool okp = loss_and_support(params, rec, fcfg, lp, sp);
        (*prefs[b].data)[c] = saved - eps;
        const bool okm = loss_and_support(params, rec, fcfg, lm, sm);
        (*prefs[b].data)[c] = saved;
        if (!okp || !okm || sp != base_support || sm != base_support) {
          ++report.boundary_resamples;  // crossed a support boundary: resample
          instance_ok = false;
          break;
        }
        const double fd = (lp - lm) / (2.0 * eps);
        blk.max_rel_err = std::max(blk.max_rel_err, rel_err((*grefs[b].data)[c], fd));
        ++blk.checked;
      }
    }
    if (instance_ok) ++done;
  }
}

}  // namespace detail

// Finite-difference verification of the posterior Jacobian, the arc-score
// chain rule, and the full model (all tasks, every parameter block).
inline GradcheckReport gradcheck(const GradcheckConfig& cfg = {}) {
  GradcheckReport report;
  Rng rng(cfg.seed);
  const int n = 3;
  const auto trees = enumerate_trees(n);
  const double eps = 1e-5;

  // Posterior Jacobian vs finite differences of the QP over tree scores.
  BlockReport& jac_block = detail::block(report, "posterior_jacobian");
  int done = 0;
  for (int attempt = 0; attempt < 4000 && done < cfg.jacobian_instances; ++attempt) {
    ArcScores s = ArcScores::zeros(n);
    for (int mod = 1; mod <= n; ++mod)
      for (int head = 0; head <= n; ++head)
        if (head != mod) s.at(head, mod) = rng.uniform(-2.0, 2.0);
    const SparsePosterior post = sparsemap(s);
    if (!post.converged || post.support_size() < 2) continue;

    Vec f(trees.size());
    std::vector<int> dense_idx(post.support_size(), -1);
    for (size_t i = 0; i < trees.size(); ++i) {
      f[i] = tree_score(trees[i], s);
      for (int j = 0; j < post.support_size(); ++j)
        if (trees[i] == post.support[j]) dense_idx[j] = static_cast<int>(i);
    }
    std::set<std::vector<int>> base;
    for (const auto& t : post.support) base.insert(t.heads);

    const PosteriorJacobian jac = posterior_jacobian(post);
    bool boundary = false;
    for (int j = 0; j < post.support_size() && !boundary; ++j) {
      Vec fp = f, fm = f;
      fp[dense_idx[j]] += eps;
      fm[dense_idx[j]] -= eps;
      const DensePosterior plus = qp_posterior_over_trees(trees, fp, n, 1e-12, 400000);
      const DensePosterior minus = qp_posterior_over_trees(trees, fm, n, 1e-12, 400000);
      std::set<std::vector<int>> sup_p, sup_m;
      for (size_t i = 0; i < trees.size(); ++i) {
        if (plus.p[i] > 1e-9) sup_p.insert(trees[i].heads);
        if (minus.p[i] > 1e-9) sup_m.insert(trees[i].heads);
      }
      if (sup_p != base || sup_m != base) {
        boundary = true;
        ++report.boundary_resamples;
        break;
      }
      for (int i = 0; i < post.support_size(); ++i) {
        const double fd = (plus.p[dense_idx[i]] - minus.p[dense_idx[i]]) / (2.0 * eps);
        jac_block.max_rel_err = std::max(jac_block.max_rel_err,
                                         std::abs(jac.D(i, j) - fd) /
                                             std::max({std::abs(jac.D(i, j)), std::abs(fd), 1.0}));
        ++jac_block.checked;
      }
    }
    if (!boundary) ++done;
  }
  jac_block.pass = jac_block.max_rel_err <= 1e-4 && jac_block.checked > 0;

  // Arc-score gradient vs finite differences through the full solve.
  BlockReport& gs_block = detail::block(report, "grad_scores");
  done = 0;
  for (int attempt = 0; attempt < 2000 && done < 8; ++attempt) {
    ArcScores s = ArcScores::zeros(n);
    for (int mod = 1; mod <= n; ++mod)
      for (int head = 0; head <= n; ++head)
        if (head != mod) s.at(head, mod) = rng.uniform(-2.0, 2.0);
    const SparsePosterior post = sparsemap(s);
    if (!post.converged || post.support_size() < 2) continue;
    Vec gbar(post.support_size());
    for (double& v : gbar) v = rng.uniform(-1.0, 1.0);
    const Vec g = grad_scores(post, gbar);
    std::set<std::vector<int>> base;
    for (const auto& t : post.support) base.insert(t.heads);

    auto weighted = [&](const SparsePosterior& p) {
      double total = 0.0;
      for (int i = 0; i < p.support_size(); ++i)
        for (int j = 0; j < post.support_size(); ++j)
          if (p.support[i] == post.support[j]) total += gbar[j] * p.q[i];
      return total;
    };

    bool boundary = false;
    for (int mod = 1; mod <= n && !boundary; ++mod) {
      for (int head = 0; head <= n && !boundary; ++head) {
        if (head == mod) continue;
        ArcScores plus = s, minus = s;
        plus.at(head, mod) += eps;
        minus.at(head, mod) -= eps;
        const SparsePosterior pp = sparsemap(plus);
        const SparsePosterior pm = sparsemap(minus);
        std::set<std::vector<int>> sup_p, sup_m;
        for (const auto& t : pp.support) sup_p.insert(t.heads);
        for (const auto& t : pm.support) sup_m.insert(t.heads);
        if (sup_p != base || sup_m != base) {
          boundary = true;
          ++report.boundary_resamples;
          break;
        }
        const double fd = (weighted(pp) - weighted(pm)) / (2.0 * eps);
        const double a = g[arc_slot(head, mod, n)];
        gs_block.max_rel_err = std::max(
            gs_block.max_rel_err, std::abs(a - fd) / std::max({std::abs(a), std::abs(fd), 1e-2}));
        ++gs_block.checked;
      }
    }
    if (!boundary) ++done;
  }
  gs_block.pass = gs_block.max_rel_err <= 1e-4 && gs_block.checked > 0;

  // Full model, every parameter block, all three heads.
  detail::check_model_task(Task::classify, cfg, cfg.model_seeds, report);
  detail::check_model_task(Task::pair, cfg, cfg.side_task_seeds, report);
  detail::check_model_task(Task::revdict, cfg, cfg.side_task_seeds, report);

  for (BlockReport& b : report.blocks) {
    if (b.name != "posterior_jacobian" && b.name != "grad_scores")
      b.pass = b.max_rel_err <= 1e-3 && b.checked > 0;
    report.pass = report.pass && b.pass;
  }
  return report;
}

}  // namespace sparsetree::harness
