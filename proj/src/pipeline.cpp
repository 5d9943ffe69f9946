#include "hierseg/pipeline.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <sstream>

#include <json.hpp>

#include "hierseg/error.hpp"

namespace hierseg {
namespace {

using nlohmann::json;

std::string g17(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return std::string(buf);
}

Episode episode_from_json(const json& e, bool need_manifest) {
  Episode ep;
  if (need_manifest) ep.manifest = e.at("manifest").get<std::string>();
  ep.max_epochs = e.at("max_epochs").get<int>();
  ep.learning_rate = e.at("learning_rate").get<double>();
  ep.batch_size = e.at("batch_size").get<int>();
  ep.augment = e.at("augment").get<bool>();
  return ep;
}

json episode_to_json(const Episode& ep, bool with_manifest) {
  json e;
  if (with_manifest) e["manifest"] = ep.manifest;
  e["max_epochs"] = ep.max_epochs;
  e["learning_rate"] = ep.learning_rate;
  e["batch_size"] = ep.batch_size;
  e["augment"] = ep.augment;
  return e;
}

CombinedLossParams loss_from_json(const json& l) {
  CombinedLossParams p;
  p.lambda_ce = l.at("lambda_ce").get<double>();
  p.lambda_ft = l.at("lambda_ft").get<double>();
  p.tversky.alpha = l.at("alpha").get<double>();
  p.tversky.gamma = l.at("gamma").get<double>();
  p.tversky.epsilon = l.at("epsilon").get<double>();
  return p;
}

json loss_to_json(const CombinedLossParams& p) {
  return {{"lambda_ce", p.lambda_ce}, {"lambda_ft", p.lambda_ft},     {"alpha", p.tversky.alpha},
          {"gamma", p.tversky.gamma}, {"epsilon", p.tversky.epsilon}};
}

void check_episode(const Episode& ep) {
  if (ep.max_epochs < 1) throw ValidationError("episode needs max_epochs >= 1");
  if (ep.batch_size < 1) throw ValidationError("episode needs batch_size >= 1");
  if (ep.learning_rate < 0) throw ValidationError("negative learning rate");
}

}  // namespace

Schedule read_schedule(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot read schedule: " + path);
  std::stringstream buf;
  buf << in.rdbuf();
  Schedule s;
  try {
    const json doc = json::parse(buf.str());
    s.master_seed = doc.at("master_seed").get<std::uint64_t>();
    s.patience = doc.at("patience").get<int>();
    s.loss = loss_from_json(doc.at("loss"));
    for (const json& e : doc.at("episodes")) s.episodes.push_back(episode_from_json(e, true));
    if (doc.contains("eval")) s.eval_datasets = doc.at("eval").get<std::vector<std::string>>();
  } catch (const std::exception& e) {
    throw ValidationError("malformed schedule " + path + ": " + e.what());
  }
  return s;
}

void write_schedule(const std::string& path, const Schedule& schedule) {
  json doc;
  doc["master_seed"] = schedule.master_seed;
  doc["patience"] = schedule.patience;
  doc["loss"] = loss_to_json(schedule.loss);
  json eps = json::array();
  for (const Episode& e : schedule.episodes) eps.push_back(episode_to_json(e, true));
  doc["episodes"] = eps;
  if (!schedule.eval_datasets.empty()) doc["eval"] = schedule.eval_datasets;
  std::ofstream out(path);
  if (!out) throw ValidationError("cannot write schedule: " + path);
  out << doc.dump(2) << "\n";
}

std::string MetricsLog::to_csv() const {
  std::string out = "episode,epoch,step,dataset,train_loss,val_loss,event\n";
  for (const LogRow& r : rows) {
    out += std::to_string(r.episode) + "," + std::to_string(r.epoch) + "," +
           std::to_string(r.step) + "," + r.dataset + ",";
    if (r.train_loss) out += g17(*r.train_loss);
    out += ",";
    if (r.val_loss) out += g17(*r.val_loss);
    out += "," + r.event + "\n";
  }
  return out;
}

void MetricsLog::write_csv(const std::string& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ValidationError("cannot write metrics log: " + path);
  out << to_csv();
}

double MetricsLog::val_at(int episode, int epoch) const {
  for (const LogRow& r : rows) {
    if (r.episode == episode && r.epoch == epoch && r.event == "epoch" && r.val_loss) {
      return *r.val_loss;
    }
  }
  throw ValidationError("no logged epoch " + std::to_string(epoch) + " in episode " +
                        std::to_string(episode));
}

TargetField targets_from_masks(const MaskPair& masks, const LabelSet& cut) {
  TargetField tf;
  tf.cut = cut;
  const Eigen::Index h = masks.classes.rows(), w = masks.classes.cols();
  tf.labels.resize(h * w);
  for (Eigen::Index r = 0; r < h; ++r) {
    for (Eigen::Index c = 0; c < w; ++c) {
      const int v = masks.classes(r, c);
      tf.labels[r * w + c] = v == 0 ? kBackgroundLabel : v - 1;
    }
  }
  return tf;
}

namespace {

double validation_loss(const MicroUNet& net, const LoadedDataset& ds,
                       const CombinedLossParams& loss) {
  double sum = 0.0;
  for (int idx : ds.val_idx) {
    const Tensor scores = net.forward(ds.images[idx]);
    const ProbField probs = ProbField::from_scores(scores.m);
    const TargetField tf = targets_from_masks(ds.masks[idx], ds.cut);
    sum += combined_loss(probs, tf, ds.tree, loss).value;
  }
  return sum / static_cast<double>(ds.val_idx.size());
}

}  // namespace

RunResult run_schedule(const Schedule& schedule, MicroUNet net,
                       std::optional<std::uint64_t> required_fingerprint) {
  if (schedule.episodes.empty()) throw ValidationError("schedule has no episodes");
  if (schedule.patience < 1) throw ValidationError("patience must be at least 1");
  schedule.loss.validate();
  for (const Episode& ep : schedule.episodes) check_episode(ep);

  std::vector<LoadedDataset> datasets;
  for (const Episode& ep : schedule.episodes) datasets.push_back(load_dataset(ep.manifest));
  const std::uint64_t fp = datasets.front().tree.fingerprint;
  for (const LoadedDataset& ds : datasets) {
    if (ds.tree.fingerprint != fp) {
      throw ValidationError("episode datasets disagree on the hierarchy tree");
    }
    if (ds.val_idx.empty()) {
      throw ValidationError("dataset " + ds.manifest.name + " has an empty validation split");
    }
    if (ds.train_idx.empty()) {
      throw ValidationError("dataset " + ds.manifest.name + " has an empty training split");
    }
  }
  if (required_fingerprint && *required_fingerprint != fp) {
    throw ValidationError("checkpoint tree fingerprint does not match the schedule datasets");
  }
  const int leaves = datasets.front().tree.leaf_count();
  if (net.config().out_channels != leaves + 1) {
    throw ValidationError("network outputs " + std::to_string(net.config().out_channels) +
                          " channels, datasets need " + std::to_string(leaves + 1));
  }

  RunResult result;
  result.leaf_count = leaves;
  result.tree_fingerprint = fp;
  long step = 0;

  for (std::size_t e = 0; e < schedule.episodes.size(); ++e) {
    const Episode& ep = schedule.episodes[e];
    const LoadedDataset& ds = datasets[e];
    const int episode_no = static_cast<int>(e) + 1;
    std::uint64_t cut_fp = ds.cut.tree_fingerprint;
    for (int member : ds.cut.members) cut_fp = mix64(cut_fp, static_cast<std::uint64_t>(member));
    result.log.rows.push_back(
        {episode_no, 0, step, ds.manifest.name, {}, {}, "episode_start", cut_fp});

    AdamState adam(net.parameters(), AdamParams{ep.learning_rate, 0.9, 0.999, 1e-8});
    double best_val = std::numeric_limits<double>::infinity();
    std::vector<Tensor> best_params = net.parameters();
    int bad_epochs = 0;

    for (int epoch = 1; epoch <= ep.max_epochs; ++epoch) {
      std::vector<int> order = ds.train_idx;
      Rng shuffle_rng(mix64(schedule.master_seed, seed_ns::kShuffle, e, epoch));
      shuffle_rng.shuffle(order);
      Rng aug_rng(mix64(schedule.master_seed, seed_ns::kAugment, e, epoch));

      double train_sum = 0.0;
      int batches = 0;
      for (std::size_t at = 0; at < order.size(); at += ep.batch_size) {
        const std::size_t take = std::min<std::size_t>(ep.batch_size, order.size() - at);
        std::vector<Tensor> grads;
        for (const Tensor& p : net.parameters()) grads.push_back(Tensor(p.h, p.w, p.c));
        double batch_loss = 0.0;
        for (std::size_t k = 0; k < take; ++k) {
          Tensor image = ds.images[order[at + k]];
          MaskPair masks = ds.masks[order[at + k]];
          if (ep.augment) augment_with(draw_augment(aug_rng), image, masks);
          const TargetField tf = targets_from_masks(masks, ds.cut);

          Tape tape;
          const MicroUNet::Pass pass = net.build(tape, image);
          const ProbField probs = ProbField::from_scores(tape.value(pass.output).m);
          const LossGrad lg = combined_loss(probs, tf, ds.tree, schedule.loss);
          if (!std::isfinite(lg.value)) throw NumericError("non-finite training loss");
          batch_loss += lg.value;

          tape.backward(pass.output, Tensor::from_matrix(image.h, image.w,
                                                         lg.d_scores / static_cast<double>(take)));
          for (std::size_t pi = 0; pi < grads.size(); ++pi) {
            grads[pi].m += tape.grad(pass.params[pi]).m;
          }
        }
        adam.step(net.parameters(), grads);
        ++step;
        train_sum += batch_loss / static_cast<double>(take);
        ++batches;
      }

      const double val = validation_loss(net, ds, schedule.loss);
      if (!std::isfinite(val)) throw NumericError("non-finite validation loss");
      result.log.rows.push_back({episode_no, epoch, step, ds.manifest.name,
                                 train_sum / batches, val, "epoch", cut_fp});

      if (val < best_val) {
        best_val = val;
        best_params = net.parameters();
        bad_epochs = 0;
      } else if (++bad_epochs >= schedule.patience) {
        result.log.rows.push_back(
            {episode_no, epoch, step, ds.manifest.name, {}, {}, "early_stop", cut_fp});
        break;
      }
    }

    net = MicroUNet(net.config(), std::move(best_params));
    result.log.rows.push_back(
        {episode_no, 0, step, ds.manifest.name, {}, best_val, "restore_best", cut_fp});
    result.log.rows.push_back(
        {episode_no, 0, step, ds.manifest.name, {}, {}, "episode_end", cut_fp});
  }

  result.net = std::move(net);
  result.steps = step;
  return result;
}

Split parse_split(const std::string& name) {
  if (name == "train") return Split::Train;
  if (name == "val") return Split::Val;
  if (name == "test") return Split::Test;
  if (name == "all") return Split::All;
  throw ValidationError("unknown split '" + name + "' (want train, val, test, or all)");
}

EvalResult evaluate(const MicroUNet& net, const LoadedDataset& dataset, Split split) {
  const std::vector<int>* picked = nullptr;
  std::vector<int> all;
  switch (split) {
    case Split::Train: picked = &dataset.train_idx; break;
    case Split::Val: picked = &dataset.val_idx; break;
    case Split::Test: picked = &dataset.test_idx; break;
    case Split::All:
      all.resize(dataset.images.size());
      for (std::size_t i = 0; i < all.size(); ++i) all[i] = static_cast<int>(i);
      picked = &all;
      break;
  }
  if (picked->empty()) throw ValidationError("requested split is empty");
  if (net.config().out_channels != dataset.tree.leaf_count() + 1) {
    throw ValidationError("network output channels do not match the dataset tree");
  }

  const int m = dataset.cut.size();
  EvalResult result;
  std::vector<ClassPQ> totals(m);
  for (int idx : *picked) {
    const Tensor scores = net.forward(dataset.images[idx]);
    const Eigen::MatrixXd probs = softmax_rows(scores.m);
    const int bg = static_cast<int>(probs.cols()) - 1;

    Eigen::MatrixXi foreground(scores.h, scores.w);
    for (int r = 0; r < scores.h; ++r) {
      for (int c = 0; c < scores.w; ++c) {
        Eigen::Index best = 0;
        probs.row(static_cast<Eigen::Index>(r) * scores.w + c).maxCoeff(&best);
        foreground(r, c) = best == bg ? 0 : 1;
      }
    }
    MaskPair pred;
    pred.instances = connected_components(foreground);
    pred.classes = classify_instances(pred.instances, probs, dataset.tree, dataset.cut);

    PQReport rep = panoptic_quality(pred, dataset.masks[idx], m);
    for (int k = 0; k < m; ++k) {
      totals[k].tp += rep.per_class[k].tp;
      totals[k].fp += rep.per_class[k].fp;
      totals[k].fn += rep.per_class[k].fn;
      totals[k].sum_iou += rep.per_class[k].sum_iou;
    }
    result.per_image.push_back({dataset.manifest.entries[idx].image, std::move(rep)});
  }
  result.aggregate = finalize_pq(std::move(totals));
  return result;
}

void write_eval_report(const std::string& path, const EvalResult& result, const LabelSet& cut) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ValidationError("cannot write report: " + path);
  out << "image,class_name,tp,fp,fn,sum_iou,pq\n";
  const auto row = [&out, &cut](const std::string& image, const PQReport& rep) {
    for (int k = 0; k < cut.size(); ++k) {
      const ClassPQ& c = rep.per_class[k];
      out << image << "," << cut.member_names[k] << "," << c.tp << "," << c.fp << "," << c.fn
          << "," << g17(c.sum_iou) << "," << (c.pq ? g17(*c.pq) : "n/a") << "\n";
    }
  };
  for (const EvalRow& r : result.per_image) row(r.image, r.report);
  row("ALL", result.aggregate);
  out << "ALL,MEAN,,,,," << g17(result.aggregate.mean_pq) << "\n";
}

ExperimentConfig read_experiment_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot read experiment config: " + path);
  std::stringstream buf;
  buf << in.rdbuf();
  ExperimentConfig cfg;
  try {
    const json doc = json::parse(buf.str());
    cfg.dataset_a = doc.at("dataset_a").get<std::string>();
    cfg.dataset_b = doc.at("dataset_b").get<std::string>();
    if (doc.contains("dataset_c")) cfg.dataset_c = doc.at("dataset_c").get<std::string>();
    if (doc.contains("seeds")) cfg.seeds = doc.at("seeds").get<int>();
    cfg.base_seed = doc.at("base_seed").get<std::uint64_t>();
    cfg.patience = doc.at("patience").get<int>();
    cfg.loss = loss_from_json(doc.at("loss"));
    cfg.episode_a = episode_from_json(doc.at("episode_a"), false);
    cfg.episode_b = episode_from_json(doc.at("episode_b"), false);
  } catch (const std::exception& e) {
    throw ValidationError("malformed experiment config " + path + ": " + e.what());
  }
  cfg.episode_a.manifest = cfg.dataset_a;
  cfg.episode_b.manifest = cfg.dataset_b;
  return cfg;
}

std::string ExperimentResult::table_csv() const {
  std::string out = "arm,seed,test_dataset,mean_pq\n";
  for (const ArmRow& r : rows) {
    out += r.arm + "," + std::to_string(r.seed_index) + "," + r.test_dataset + "," +
           g17(r.mean_pq) + "\n";
  }
  return out;
}

void ExperimentResult::write_table(const std::string& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ValidationError("cannot write comparison table: " + path);
  out << table_csv();
}

namespace {

ExperimentResult run_two_arms(const ExperimentConfig& cfg, const std::string& arm1,
                              const std::vector<Episode>& arm1_eps, const std::string& arm2,
                              const std::vector<Episode>& arm2_eps,
                              const std::string& test_manifest, Split test_split) {
  if (cfg.seeds < 1) throw ValidationError("experiment needs at least one seed");
  const LoadedDataset test_ds = load_dataset(test_manifest);
  const int out_channels = test_ds.tree.leaf_count() + 1;

  ExperimentResult result;
  std::map<std::string, std::vector<double>> means;
  for (int si = 0; si < cfg.seeds; ++si) {
    const std::uint64_t run_seed = mix64(cfg.base_seed, static_cast<std::uint64_t>(si));
    const MicroUNet init(UNetConfig{3, out_channels, {8, 16, 32}},
                         mix64(run_seed, seed_ns::kInit));

    for (const auto& [arm, eps] : {std::pair(arm1, arm1_eps), std::pair(arm2, arm2_eps)}) {
      Schedule s;
      s.episodes = eps;
      s.patience = cfg.patience;
      s.master_seed = run_seed;
      s.loss = cfg.loss;
      RunResult run = run_schedule(s, init);  // both arms share the init
      const EvalResult ev = evaluate(run.net, test_ds, test_split);
      result.rows.push_back({arm, si, test_ds.manifest.name, ev.aggregate.mean_pq});
      means[arm].push_back(ev.aggregate.mean_pq);
      result.logs[arm + "#" + std::to_string(si)] = std::move(run.log);
    }
  }
  for (const auto& [arm, vals] : means) {
    double sum = 0;
    for (double v : vals) sum += v;
    result.arm_means[arm] = sum / vals.size();
  }
  return result;
}

}  // namespace

ExperimentResult experiment_pretrain_finetune(const ExperimentConfig& config) {
  return run_two_arms(config, "B_only", {config.episode_b}, "A_then_B",
                      {config.episode_a, config.episode_b}, config.dataset_b, Split::Test);
}

ExperimentResult experiment_generalization(const ExperimentConfig& config) {
  if (config.dataset_c.empty()) {
    throw ValidationError("generalization experiment needs dataset_c");
  }
  return run_two_arms(config, "A_only", {config.episode_a}, "A_then_B",
                      {config.episode_a, config.episode_b}, config.dataset_c, Split::All);
}

}  // namespace hierseg
