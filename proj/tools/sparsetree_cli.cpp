// Command-line front end: synthetic data generation, training, evaluation
// with posterior diagnostics, gradient checking, and one-off SparseMAP
// inference on a scores file.
//
// Exit codes: 0 success, 1 usage/input error, 2 numerical failure,
// 3 gradcheck failure.

#include <algorithm>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "sparsetree/harness.hpp"

using namespace sparsetree;
namespace hn = sparsetree::harness;
using json = nlohmann::json;

namespace {

std::vector<double> parse_grid(const std::string& csv) {
  std::vector<double> grid;
  std::stringstream ss(csv);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) grid.push_back(std::stod(item));
  }
  if (grid.empty()) throw InputError("empty temperature grid: " + csv);
  return grid;
}

json load_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open file: " + path);
  json j;
  in >> j;
  return j;
}

int run(int argc, char** argv) {
  CLI::App app{"Sparse latent dependency-tree models"};
  app.require_subcommand(1);

  // --- gen ---------------------------------------------------------------
  auto* gen = app.add_subcommand("gen", "generate a synthetic JSONL dataset");
  hn::GenSpec spec;
  std::string gen_out;
  std::uint64_t gen_seed = 1;
  std::string gen_task = "classify";
  gen->add_option("--out", gen_out, "output JSONL path")->required();
  gen->add_option("--task", gen_task, "classify | pair | revdict");
  gen->add_option("--count", spec.count, "number of records");
  gen->add_option("--seed", gen_seed, "generator seed");
  gen->add_option("--n-min", spec.n_min, "shortest sentence");
  gen->add_option("--n-max", spec.n_max, "longest sentence");
  gen->add_option("--governor-types", spec.governor_types, "governor token types");
  gen->add_option("--key-types", spec.key_types, "key token types");
  gen->add_option("--filler-types", spec.filler_types, "filler token types");
  gen->add_option("--classes", spec.n_classes, "label classes");
  gen->add_option("--distractors", spec.distractors, "distractor keys per sentence");
  gen->add_option("--d-out", spec.d_out, "target vector width (revdict)");

  // --- train ---------------------------------------------------------------
  auto* train = app.add_subcommand("train", "train a model with the SGD schedule");
  std::string train_path, valid_path, out_dir = "out", config_path;
  std::string train_task = "classify", train_source = "latent", train_grid;
  hn::TrainConfig tcfg;
  bool flag_encoder = false;
  train->add_option("--train", train_path, "training JSONL")->required();
  train->add_option("--valid", valid_path, "validation JSONL")->required();
  train->add_option("--out-dir", out_dir, "output directory");
  train->add_option("--config", config_path, "JSON config (flags override it)");
  train->add_option("--task", train_task, "classify | pair | revdict");
  train->add_option("--tree-source", train_source, "latent | flat | left_to_right | gold");
  train->add_option("--lr", tcfg.lr, "initial learning rate");
  train->add_option("--lr-decay", tcfg.lr_decay, "decay on non-improving epochs");
  train->add_option("--batch-size", tcfg.batch_size, "records per batch");
  train->add_option("--patience", tcfg.patience_epochs, "early-stop patience");
  train->add_option("--max-epochs", tcfg.max_epochs, "epoch cap");
  train->add_option("--seed", tcfg.seed, "run seed");
  train->add_option("--grid", train_grid, "temperature grid, comma separated");
  train->add_option("--vocab", tcfg.dims.vocab, "vocabulary size");
  train->add_option("--d-emb", tcfg.dims.d_emb, "embedding width");
  train->add_flag("--encoder", flag_encoder, "enable the recurrent encoder");
  train->add_option("--d-rnn", tcfg.dims.d_rnn, "encoder state width");
  train->add_option("--d-hidden", tcfg.dims.d_hidden, "scorer hidden width");
  train->add_option("--d-lstm", tcfg.dims.d_lstm, "TreeLSTM width");
  train->add_option("--d-pair", tcfg.dims.d_pair, "pair combiner width");
  train->add_option("--classes", tcfg.dims.n_classes, "label classes");
  train->add_option("--d-out-dim", tcfg.dims.d_out, "representation width");

  // --- eval ----------------------------------------------------------------
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint with diagnostics");
  std::string eval_ckpt, eval_data, eval_grid, eval_source = "latent";
  double eval_temp = 1.0;
  eval->add_option("--checkpoint", eval_ckpt, "checkpoint JSON")->required();
  eval->add_option("--data", eval_data, "dataset JSONL")->required();
  eval->add_option("--temperature", eval_temp, "score temperature");
  eval->add_option("--grid", eval_grid, "select temperature from this grid");
  eval->add_option("--tree-source", eval_source, "latent | flat | left_to_right | gold");

  // --- gradcheck -------------------------------------------------------------
  auto* gc = app.add_subcommand("gradcheck", "finite-difference gradient verification");
  hn::GradcheckConfig gcfg;
  gc->add_option("--seed", gcfg.seed, "suite seed");
  gc->add_option("--jacobian-instances", gcfg.jacobian_instances, "posterior Jacobian draws");
  gc->add_option("--model-seeds", gcfg.model_seeds, "full-model seeds per length");
  gc->add_option("--corrupt", gcfg.corrupt_block,
                 "damage one analytic block (negative control)");

  // --- infer -----------------------------------------------------------------
  auto* infer = app.add_subcommand("infer", "SparseMAP over a JSON scores matrix");
  std::string infer_path;
  double infer_temp = 1.0;
  infer->add_option("--scores", infer_path, "JSON file {\"n\": int, \"scores\": [[...]]}")
      ->required();
  infer->add_option("--temperature", infer_temp, "score temperature");

  app.parse(argc, argv);

  if (*gen) {
    spec.task = hn::task_from_string(gen_task);
    hn::write_jsonl(hn::gen_synthetic(spec, gen_seed), gen_out);
    std::cout << json{{"written", gen_out}, {"count", spec.count}}.dump() << "\n";
    return 0;
  }

  if (*train) {
    if (!config_path.empty()) {
      hn::TrainConfig file_cfg = hn::train_config_from_json(load_json_file(config_path));
      // Command-line flags override config-file values.
      auto keep = [&](const std::string& flag) { return train->count(flag) > 0; };
      if (!keep("--task")) train_task = hn::to_string(file_cfg.task);
      if (!keep("--tree-source")) train_source = hn::to_string(file_cfg.tree_source);
      if (!keep("--lr")) tcfg.lr = file_cfg.lr;
      if (!keep("--lr-decay")) tcfg.lr_decay = file_cfg.lr_decay;
      if (!keep("--batch-size")) tcfg.batch_size = file_cfg.batch_size;
      if (!keep("--patience")) tcfg.patience_epochs = file_cfg.patience_epochs;
      if (!keep("--max-epochs")) tcfg.max_epochs = file_cfg.max_epochs;
      if (!keep("--seed")) tcfg.seed = file_cfg.seed;
      if (!keep("--grid")) tcfg.temperature_grid = file_cfg.temperature_grid;
      if (!keep("--vocab")) tcfg.dims = file_cfg.dims;  // dims come as a block
      tcfg.solver = file_cfg.solver;
    }
    tcfg.task = hn::task_from_string(train_task);
    tcfg.tree_source = hn::tree_source_from_string(train_source);
    if (train->count("--encoder")) tcfg.dims.use_encoder = flag_encoder;
    if (!train_grid.empty()) tcfg.temperature_grid = parse_grid(train_grid);

    const hn::Dataset train_data = hn::read_jsonl(train_path);
    const hn::Dataset valid_data = hn::read_jsonl(valid_path);
    const hn::TrainResult result = hn::train(tcfg, train_data, valid_data, out_dir);
    std::cout << json{{"epochs", result.epochs},
                      {"best_valid", result.best_valid},
                      {"checkpoint", result.checkpoint_path},
                      {"metrics", out_dir + "/metrics.csv"},
                      {"skipped_records", result.skipped_records}}
                     .dump()
              << "\n";
    return 0;
  }

  if (*eval) {
    ModelParams params = hn::load_checkpoint(eval_ckpt);
    const hn::Dataset data = hn::read_jsonl(eval_data);
    const TreeSource source = hn::tree_source_from_string(eval_source);
    hn::EvalReport report;
    if (!eval_grid.empty()) {
      auto [t, rep] = hn::select_temperature(params, data, parse_grid(eval_grid), {}, source);
      (void)t;
      report = rep;
    } else {
      report = hn::evaluate(params, data, eval_temp, {}, source);
    }
    std::cout << report.to_json().dump() << "\n";
    return 0;
  }

  if (*gc) {
    const hn::GradcheckReport report = hn::gradcheck(gcfg);
    std::cout << report.to_string();
    return report.pass ? 0 : 3;
  }

  if (*infer) {
    const json in = load_json_file(infer_path);
    const int n = in.at("n").get<int>();
    if (n < 1) throw InputError("infer: need n >= 1");
    const auto rows = in.at("scores").get<std::vector<std::vector<double>>>();
    if (static_cast<int>(rows.size()) != n + 1)
      throw InputError("infer: scores must have n+1 rows (head 0 is the root)");
    ArcScores scores = ArcScores::zeros(n);
    for (int head = 0; head <= n; ++head) {
      if (static_cast<int>(rows[head].size()) != n)
        throw InputError("infer: each scores row must have n entries");
      for (int mod = 1; mod <= n; ++mod)
        if (head != mod) scores.at(head, mod) = rows[head][mod - 1];
    }
    const SparsePosterior post =
        sparsemap(infer_temp == 1.0 ? scores : scale_temperature(scores, infer_temp));
    std::vector<int> idx(post.support_size());
    for (int i = 0; i < post.support_size(); ++i) idx[i] = i;
    std::sort(idx.begin(), idx.end(), [&](int a, int b) {
      if (post.q[a] != post.q[b]) return post.q[a] > post.q[b];
      return post.support[a].heads < post.support[b].heads;
    });
    json out = json::array();
    for (int i : idx)
      out.push_back({{"heads", post.support[i].heads}, {"prob", post.q[i]}});
    std::cout << out.dump() << "\n";
    return 0;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const CLI::CallForHelp&) {
    std::cout << "run with --help on a subcommand for details\n";
    return 0;
  } catch (const CLI::ParseError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 1;
  } catch (const NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
