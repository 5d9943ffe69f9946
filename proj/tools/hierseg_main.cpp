#include <cstdint>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "hierseg/error.hpp"
#include "hierseg/hierarchy.hpp"
#include "hierseg/losses.hpp"
#include "hierseg/net.hpp"
#include "hierseg/pipeline.hpp"
#include "hierseg/rng.hpp"
#include "hierseg/synthdata.hpp"

namespace {

using namespace hierseg;

struct GenFlags {
  std::string tree_path;
  std::vector<std::string> cut;
  std::uint64_t seed = 1;
  int images = 20;
  int size = 64;
  std::string out;
  std::string name;
  std::uint64_t appearance_seed = 1;
  std::uint64_t shift_seed = 0;
  double shift_magnitude = 0.0;
};

int do_gen_data(const GenFlags& f) {
  const ClassTree tree =
      f.tree_path.empty() ? parse_hierarchy(builtin_nucleus_tree()) : load_hierarchy(f.tree_path);
  const LabelSet cut = validate_cut(tree, f.cut);
  AppearanceSpec appearance = default_appearance(tree, f.appearance_seed);
  if (f.shift_magnitude > 0.0) {
    appearance = shift_appearance(appearance, f.shift_seed, f.shift_magnitude);
  }
  const std::string name =
      f.name.empty() ? std::filesystem::path(f.out).filename().string() : f.name;
  generate_dataset(tree, cut, appearance, f.seed, f.images, f.size, f.out, name);
  std::cout << "wrote " << f.images << " images (" << f.size << "x" << f.size << ", cut of "
            << cut.size() << " members) to " << f.out << "\n";
  return 0;
}

struct TrainFlags {
  std::string schedule;
  std::string resume;
  std::string out;
};

int do_train(const TrainFlags& f) {
  const Schedule schedule = read_schedule(f.schedule);
  if (schedule.episodes.empty()) throw ValidationError("schedule has no episodes");

  MicroUNet net;
  std::optional<std::uint64_t> required;
  if (!f.resume.empty()) {
    LoadedCheckpoint ck = load_checkpoint(f.resume);
    net = std::move(ck.net);
    required = ck.tree_fingerprint;
  } else {
    const DatasetManifest first = read_manifest(schedule.episodes.front().manifest);
    const ClassTree tree = parse_hierarchy(first.tree_document);
    net = MicroUNet(UNetConfig{3, tree.leaf_count() + 1, {8, 16, 32}},
                    mix64(schedule.master_seed, seed_ns::kInit));
  }

  RunResult run = run_schedule(schedule, std::move(net), required);

  std::filesystem::create_directories(f.out);
  save_checkpoint(f.out + "/checkpoint.bin", run.net, run.leaf_count, run.tree_fingerprint,
                  run.steps);
  run.log.write_csv(f.out + "/metrics.csv");
  std::cout << "trained " << schedule.episodes.size() << " episode(s), " << run.steps
            << " optimizer steps; wrote " << f.out << "/checkpoint.bin and " << f.out
            << "/metrics.csv\n";
  return 0;
}

struct EvalFlags {
  std::string checkpoint;
  std::string data;
  std::string split = "test";
  std::string report;
};

int do_eval(const EvalFlags& f) {
  const LoadedCheckpoint ck = load_checkpoint(f.checkpoint);
  const LoadedDataset ds = load_dataset(f.data);
  if (ck.tree_fingerprint != ds.tree.fingerprint) {
    throw ValidationError("checkpoint tree fingerprint does not match dataset " + f.data);
  }
  const EvalResult result = evaluate(ck.net, ds, parse_split(f.split));
  if (!f.report.empty()) write_eval_report(f.report, result, ds.cut);
  std::cout << "mean PQ over " << result.per_image.size() << " image(s), split " << f.split
            << ": " << result.aggregate.mean_pq << "\n";
  return 0;
}

struct GradcheckFlags {
  double h = 1e-5;
  std::string loss = "all";
  int batches = 100;
  double tol_loss = 1e-4;
  double tol_net = 1e-3;
  std::uint64_t seed = 1;
};

// Random labels over the cut members plus background, with an occasional
// ignored pixel; at least one pixel always counts.
Eigen::VectorXi random_labels(Rng& rng, int n, int members) {
  Eigen::VectorXi labels(n);
  for (int i = 0; i < n; ++i) {
    const int r = rng.next_int(members + 2);
    labels[i] = r - 2;  // kIgnoreLabel, kBackgroundLabel, or a member
  }
  if ((labels.array() != kIgnoreLabel).count() == 0) labels[0] = kBackgroundLabel;
  return labels;
}

LabelSet random_leaf_subset(const ClassTree& tree, Rng& rng) {
  std::vector<std::string> names;
  for (int leaf : tree.leaf_order) {
    if (rng.bernoulli(0.8)) names.push_back(tree.nodes[leaf].name);
  }
  if (names.empty()) names.push_back(tree.nodes[tree.leaf_order[0]].name);
  return validate_cut(tree, names);
}

double check_one_loss(LossKind kind, const ClassTree& tree, const GradcheckFlags& f,
                      std::uint64_t kind_tag) {
  double worst = 0.0;
  for (int trial = 0; trial < f.batches; ++trial) {
    Rng rng(mix64(f.seed, seed_ns::kGradcheck, kind_tag, trial));
    const bool leaf_only = kind == LossKind::CrossEntropy || kind == LossKind::FocalTversky;
    const LabelSet cut = leaf_only ? random_leaf_subset(tree, rng) : random_cut(tree, rng);

    const int n = 1 + rng.next_int(50);
    Eigen::MatrixXd scores(n, tree.leaf_count() + 1);
    for (Eigen::Index i = 0; i < scores.rows(); ++i) {
      for (Eigen::Index j = 0; j < scores.cols(); ++j) scores(i, j) = rng.uniform(-3.0, 3.0);
    }
    TargetField targets;
    targets.cut = cut;
    targets.labels = random_labels(rng, n, cut.size());

    CombinedLossParams params;
    // finite_diff_check caps the step at 1e-3; a coarser --h still reaches the
    // end-to-end network check unclamped.
    const double h = std::min(f.h, 1e-3);
    worst = std::max(worst, finite_diff_check(kind, scores, targets, tree, params, h));
  }
  return worst;
}

// Central differences on sampled network parameters against the tape
// gradient of the combined loss.
double check_net(const ClassTree& tree, const GradcheckFlags& f) {
  Rng rng(mix64(f.seed, seed_ns::kGradcheck, 0x6e6574u));
  const UNetConfig cfg{3, tree.leaf_count() + 1, {8, 16, 32}};
  MicroUNet net(cfg, rng.next_u64());

  Tensor input(8, 8, 3);
  for (Eigen::Index p = 0; p < input.rows(); ++p) {
    for (int ch = 0; ch < 3; ++ch) input.m(p, ch) = rng.uniform(0.0, 1.0);
  }
  const LabelSet cut = random_cut(tree, rng);
  TargetField targets;
  targets.cut = cut;
  targets.labels = random_labels(rng, 64, cut.size());
  const CombinedLossParams params;

  const auto loss_value = [&](const MicroUNet& m) {
    const Tensor scores = m.forward(input);
    return combined_loss(ProbField::from_scores(scores.m), targets, tree, params).value;
  };

  Tape tape;
  const MicroUNet::Pass pass = net.build(tape, input);
  const ProbField probs = ProbField::from_scores(tape.value(pass.output).m);
  const LossGrad lg = combined_loss(probs, targets, tree, params);
  tape.backward(pass.output, Tensor::from_matrix(8, 8, lg.d_scores));

  const double h = std::max(f.h, 1e-5);
  double worst = 0.0;
  for (int sample = 0; sample < 50; ++sample) {
    const int block = rng.next_int(static_cast<int>(net.parameters().size()));
    Eigen::MatrixXd& theta = net.parameters()[block].m;
    const int i = rng.next_int(static_cast<int>(theta.rows()));
    const int j = rng.next_int(static_cast<int>(theta.cols()));

    const double saved = theta(i, j);
    theta(i, j) = saved + h;
    const double up = loss_value(net);
    theta(i, j) = saved - h;
    const double down = loss_value(net);
    theta(i, j) = saved;

    const double numeric = (up - down) / (2.0 * h);
    const double analytic = tape.grad(pass.params[block]).m(i, j);
    worst = std::max(worst, std::fabs(analytic - numeric) / std::max(1.0, std::fabs(numeric)));
  }
  return worst;
}

int do_gradcheck(const GradcheckFlags& f) {
  if (f.h < 1e-7 || f.h > 1e-1) throw ValidationError("step size --h must be in [1e-7, 1e-1]");
  const ClassTree tree = parse_hierarchy(builtin_nucleus_tree());

  struct Item {
    const char* name;
    LossKind kind;
  };
  const Item items[] = {{"ce", LossKind::CrossEntropy},
                        {"mce", LossKind::ModifiedCrossEntropy},
                        {"ft", LossKind::FocalTversky},
                        {"mft", LossKind::ModifiedFocalTversky}};

  bool ok = true;
  for (std::uint64_t k = 0; k < 4; ++k) {
    const Item& it = items[k];
    if (f.loss != "all" && f.loss != it.name) continue;
    const double worst = check_one_loss(it.kind, tree, f, k);
    const bool pass = worst <= f.tol_loss;
    ok = ok && pass;
    std::cout << it.name << ": max relative error " << worst << " over " << f.batches
              << " batches (tolerance " << f.tol_loss << ") " << (pass ? "ok" : "EXCEEDED")
              << "\n";
  }
  if (f.loss == "all" || f.loss == "net") {
    const double worst = check_net(tree, f);
    const bool pass = worst <= f.tol_net;
    ok = ok && pass;
    std::cout << "net: max relative error " << worst << " over 50 sampled parameters (tolerance "
              << f.tol_net << ") " << (pass ? "ok" : "EXCEEDED") << "\n";
  }
  if (!ok) throw NumericError("gradient check tolerance exceeded");
  return 0;
}

struct ExperimentFlags {
  std::string kind;
  std::string config;
  int seeds = 0;  // 0 keeps the config value
  std::string out;
};

int do_experiment(const ExperimentFlags& f) {
  ExperimentConfig cfg = read_experiment_config(f.config);
  if (f.seeds > 0) cfg.seeds = f.seeds;

  ExperimentResult result;
  if (f.kind == "finetune") {
    result = experiment_pretrain_finetune(cfg);
  } else if (f.kind == "generalize") {
    result = experiment_generalization(cfg);
  } else {
    throw ValidationError("unknown experiment kind '" + f.kind + "' (want finetune or generalize)");
  }

  std::filesystem::create_directories(f.out);
  result.write_table(f.out + "/comparison.csv");
  for (const auto& [key, log] : result.logs) {
    std::string fname = key;
    for (char& ch : fname) {
      if (ch == '#') ch = '_';
    }
    log.write_csv(f.out + "/log_" + fname + ".csv");
  }
  std::cout << result.table_csv();
  for (const auto& [arm, mean] : result.arm_means) {
    std::cout << "mean " << arm << ": " << mean << "\n";
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"hierarchy-aware segmentation losses: data, training, evaluation"};
  app.require_subcommand(1);

  GenFlags gen;
  CLI::App* cmd_gen = app.add_subcommand("gen-data", "generate a synthetic dataset");
  cmd_gen->add_option("--tree", gen.tree_path, "hierarchy file (default: bundled nucleus tree)");
  cmd_gen->add_option("--cut", gen.cut, "cut member names")->required()->delimiter(',');
  cmd_gen->add_option("--seed", gen.seed, "master seed");
  cmd_gen->add_option("--images", gen.images, "image count");
  cmd_gen->add_option("--size", gen.size, "patch size (multiple of 4)");
  cmd_gen->add_option("--out", gen.out, "output directory")->required();
  cmd_gen->add_option("--name", gen.name, "dataset name (default: output directory name)");
  cmd_gen->add_option("--appearance-seed", gen.appearance_seed, "appearance distribution seed");
  cmd_gen->add_option("--shift-seed", gen.shift_seed, "appearance shift seed");
  cmd_gen->add_option("--shift-magnitude", gen.shift_magnitude,
                      "appearance shift strength in [0,1)");

  TrainFlags train;
  CLI::App* cmd_train = app.add_subcommand("train", "run a training schedule");
  cmd_train->add_option("--schedule", train.schedule, "schedule file")->required();
  cmd_train->add_option("--resume", train.resume, "checkpoint to continue from");
  cmd_train->add_option("--out", train.out, "output directory")->required();

  EvalFlags eval;
  CLI::App* cmd_eval = app.add_subcommand("eval", "evaluate a checkpoint with panoptic quality");
  cmd_eval->add_option("--checkpoint", eval.checkpoint, "checkpoint file")->required();
  cmd_eval->add_option("--data", eval.data, "dataset manifest")->required();
  cmd_eval->add_option("--split", eval.split, "train, val, test, or all");
  cmd_eval->add_option("--report", eval.report, "per-class report file");

  GradcheckFlags grad;
  CLI::App* cmd_grad = app.add_subcommand("gradcheck", "finite-difference gradient check");
  cmd_grad->set_help_flag("--help", "print help");  // frees -h for the step size below
  cmd_grad->add_option("--h", grad.h, "finite-difference step");
  cmd_grad->add_option("--loss", grad.loss, "all, ce, mce, ft, mft, or net");
  cmd_grad->add_option("--batches", grad.batches, "randomized batches per loss");
  cmd_grad->add_option("--tol-loss", grad.tol_loss, "loss gradient tolerance");
  cmd_grad->add_option("--tol-net", grad.tol_net, "end-to-end tolerance");
  cmd_grad->add_option("--seed", grad.seed, "randomization seed");

  ExperimentFlags exp;
  CLI::App* cmd_exp = app.add_subcommand("experiment", "run a two-arm comparison");
  cmd_exp->add_option("--kind", exp.kind, "finetune or generalize")->required();
  cmd_exp->add_option("--config", exp.config, "experiment config file")->required();
  cmd_exp->add_option("--seeds", exp.seeds, "seed count (overrides the config)");
  cmd_exp->add_option("--out", exp.out, "output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (cmd_gen->parsed()) return do_gen_data(gen);
    if (cmd_train->parsed()) return do_train(train);
    if (cmd_eval->parsed()) return do_eval(eval);
    if (cmd_grad->parsed()) return do_gradcheck(grad);
    if (cmd_exp->parsed()) return do_experiment(exp);
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const NumericError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
  return 0;
}
