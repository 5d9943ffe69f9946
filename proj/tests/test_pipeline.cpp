#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <unistd.h>

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "hierseg/error.hpp"
#include "hierseg/pipeline.hpp"
#include "hierseg/rng.hpp"

using namespace hierseg;

namespace {

struct TempDir {
  std::filesystem::path path;
  explicit TempDir(const char* tag) {
    path = std::filesystem::temp_directory_path() /
           (std::string("hierseg_pipe_") + tag + "_" + std::to_string(::getpid()));
    std::filesystem::remove_all(path);
    std::filesystem::create_directories(path);
  }
  ~TempDir() { std::filesystem::remove_all(path); }
};

const std::vector<std::string> kSupers = {"epithelial", "inflammatory", "connective", "other"};

// Small dataset shared by the training tests. Patch 32 keeps epochs cheap;
// the shrunken radii let several blobs pack into it reliably.
std::string make_dataset(const std::filesystem::path& dir, const std::string& name,
                         std::uint64_t seed, int n, const std::vector<std::string>& cut_names) {
  const ClassTree tree = parse_hierarchy(builtin_nucleus_tree());
  const LabelSet cut = validate_cut(tree, cut_names);
  AppearanceSpec app = default_appearance(tree, 1);
  for (LeafAppearance& a : app.leaves) {
    a.radius_lo = 3.0;
    a.radius_hi = 5.0;
  }
  const DatasetManifest m =
      generate_dataset(tree, cut, app, seed, n, 32, (dir / name).string(), name);
  (void)m;
  return (dir / name / "manifest.json").string();
}

MicroUNet fresh_net(std::uint64_t seed) {
  const ClassTree tree = parse_hierarchy(builtin_nucleus_tree());
  return MicroUNet(UNetConfig{3, tree.leaf_count() + 1, {8, 16, 32}}, seed);
}

int count_event(const MetricsLog& log, int episode, const std::string& event) {
  int n = 0;
  for (const LogRow& row : log.rows) {
    if (row.episode == episode && row.event == event) ++n;
  }
  return n;
}

}  // namespace

TEST_CASE("schedules round-trip through json") {
  TempDir tmp("sched");
  Schedule s;
  s.patience = 7;
  s.master_seed = 0xfeedface12345678ULL;
  s.loss.lambda_ce = 0.5;
  s.loss.lambda_ft = 2.0;
  s.loss.tversky.alpha = 0.6;
  s.episodes.push_back({"a/manifest.json", 12, 3e-3, 2, true});
  s.episodes.push_back({"b/manifest.json", 30, 1e-3, 4, false});
  s.eval_datasets = {"b/manifest.json"};

  const std::string path = (tmp.path / "schedule.json").string();
  write_schedule(path, s);
  const Schedule back = read_schedule(path);
  CHECK(back.patience == 7);
  CHECK(back.master_seed == 0xfeedface12345678ULL);
  CHECK(back.loss.lambda_ce == 0.5);
  CHECK(back.loss.tversky.alpha == 0.6);
  REQUIRE(back.episodes.size() == 2);
  CHECK(back.episodes[0].manifest == "a/manifest.json");
  CHECK(back.episodes[0].max_epochs == 12);
  CHECK(back.episodes[0].learning_rate == 3e-3);
  CHECK(back.episodes[1].augment == false);
  CHECK(back.eval_datasets == s.eval_datasets);

  CHECK_THROWS_AS(read_schedule((tmp.path / "absent.json").string()), ValidationError);
}

TEST_CASE("mask labels become loss targets with background preserved") {
  const ClassTree tree = parse_hierarchy(builtin_nucleus_tree());
  const LabelSet cut = validate_cut(tree, kSupers);

  MaskPair masks;
  masks.instances = Eigen::MatrixXi::Zero(2, 2);
  masks.classes = Eigen::MatrixXi::Zero(2, 2);
  masks.instances(0, 0) = 3;
  masks.classes(0, 0) = 2;
  masks.instances(1, 1) = 4;
  masks.classes(1, 1) = 4;

  const TargetField t = targets_from_masks(masks, cut);
  REQUIRE(t.labels.size() == 4);
  CHECK(t.labels[0] == 1);                 // member index 2 - 1, row-major pixel 0
  CHECK(t.labels[1] == kBackgroundLabel);  // pixel (0,1)
  CHECK(t.labels[2] == kBackgroundLabel);  // pixel (1,0)
  CHECK(t.labels[3] == 3);
  CHECK(t.cut.size() == 4);
}

TEST_CASE("training runs are deterministic byte for byte") {
  TempDir tmp("det");
  const std::string manifest = make_dataset(tmp.path, "ds", 21, 8, kSupers);

  Schedule s;
  s.master_seed = 99;
  s.patience = 3;
  s.episodes.push_back({manifest, 2, 1e-3, 4, true});

  const RunResult r1 = run_schedule(s, fresh_net(7));
  const RunResult r2 = run_schedule(s, fresh_net(7));
  CHECK(r1.log.to_csv() == r2.log.to_csv());
  CHECK(r1.steps == r2.steps);
  for (std::size_t i = 0; i < 12; ++i) {
    CHECK(r1.net.parameters()[i].m == r2.net.parameters()[i].m);
  }

  const RunResult r3 = run_schedule(s, fresh_net(8));
  CHECK(r3.log.to_csv() != r1.log.to_csv());
}

TEST_CASE("a zero learning rate stops after exactly patience epochs") {
  TempDir tmp("pat");
  const std::string manifest = make_dataset(tmp.path, "ds", 22, 8, kSupers);

  Schedule s;
  s.master_seed = 5;
  s.patience = 5;
  s.episodes.push_back({manifest, 50, 0.0, 4, false});

  const RunResult r = run_schedule(s, fresh_net(3));
  // epoch 1 sets the best; epochs 2..6 tie, which is not an improvement
  CHECK(count_event(r.log, 1, "epoch") == 6);
  CHECK(count_event(r.log, 1, "early_stop") == 1);
  CHECK(count_event(r.log, 1, "restore_best") == 1);
  CHECK(count_event(r.log, 1, "episode_end") == 1);

  // constant loss: every epoch logs the same validation value
  const double v1 = r.log.val_at(1, 1);
  const double v6 = r.log.val_at(1, 6);
  CHECK(v1 == v6);
  CHECK_THROWS_AS(r.log.val_at(1, 7), ValidationError);
  CHECK_THROWS_AS(r.log.val_at(2, 1), ValidationError);
}

TEST_CASE("the network is not reinitialized between episodes") {
  TempDir tmp("carry");
  const std::string first = make_dataset(tmp.path, "first", 23, 8, kSupers);
  const std::string second = make_dataset(tmp.path, "second", 24, 8, kSupers);

  Schedule trained;
  trained.master_seed = 11;
  trained.patience = 2;
  trained.episodes.push_back({first, 2, 1e-3, 4, false});

  Schedule frozen = trained;
  frozen.episodes.push_back({second, 2, 0.0, 4, false});

  const RunResult a = run_schedule(trained, fresh_net(77));
  const RunResult b = run_schedule(frozen, fresh_net(77));

  // episode 2 has learning rate zero, so its parameters stay exactly what
  // episode 1 produced; a fresh start would have wiped them
  for (std::size_t i = 0; i < 12; ++i) {
    CHECK(b.net.parameters()[i].m == a.net.parameters()[i].m);
  }
  CHECK(count_event(b.log, 2, "episode_start") == 1);
}

TEST_CASE("the restored best is never worse than any logged epoch") {
  TempDir tmp("best");
  const std::string manifest = make_dataset(tmp.path, "ds", 25, 10, kSupers);

  Schedule s;
  s.master_seed = 31;
  s.patience = 3;
  s.episodes.push_back({manifest, 6, 3e-3, 4, true});

  const RunResult r = run_schedule(s, fresh_net(13));
  double best = std::numeric_limits<double>::infinity();
  double restored = std::numeric_limits<double>::quiet_NaN();
  for (const LogRow& row : r.log.rows) {
    if (row.event == "epoch" && row.val_loss) best = std::min(best, *row.val_loss);
    if (row.event == "restore_best" && row.val_loss) restored = *row.val_loss;
  }
  CHECK(restored == best);
}

TEST_CASE("log rows carry the cut fingerprint of the active episode") {
  TempDir tmp("cutfp");
  const std::string supers = make_dataset(tmp.path, "supers", 26, 8, kSupers);
  const std::string leaves = make_dataset(
      tmp.path, "leaves", 26, 8,
      {"healthy_epithelial", "malignant_epithelial", "non_neoplastic_epithelial", "lymphocyte",
       "macrophage", "neutrophil", "fibroblast", "muscle", "endothelial", "dead",
       "miscellaneous"});

  Schedule s;
  s.master_seed = 41;
  s.patience = 2;
  s.episodes.push_back({supers, 1, 1e-3, 4, false});
  s.episodes.push_back({leaves, 1, 1e-3, 4, false});

  const RunResult r = run_schedule(s, fresh_net(15));
  std::uint64_t fp1 = 0, fp2 = 0;
  for (const LogRow& row : r.log.rows) {
    if (row.episode == 1) fp1 = row.cut_fingerprint;
    if (row.episode == 2) fp2 = row.cut_fingerprint;
  }
  CHECK(fp1 != 0);
  CHECK(fp2 != 0);
  CHECK(fp1 != fp2);  // different cuts of the same tree
}

TEST_CASE("mismatched trees and bad schedules are rejected") {
  TempDir tmp("bad");
  const std::string manifest = make_dataset(tmp.path, "ds", 27, 8, kSupers);

  Schedule s;
  s.master_seed = 1;
  s.episodes.push_back({manifest, 1, 1e-3, 4, false});

  // a checkpoint from some other tree must not silently train on
  CHECK_THROWS_AS(run_schedule(s, fresh_net(5), std::uint64_t{0xbad0bad0bad0bad0ULL}),
                  ValidationError);

  Schedule empty;
  empty.master_seed = 1;
  CHECK_THROWS_AS(run_schedule(empty, fresh_net(5)), ValidationError);

  Schedule wrong_width = s;
  const ClassTree tree = parse_hierarchy(builtin_nucleus_tree());
  CHECK_THROWS_AS(
      run_schedule(wrong_width, MicroUNet(UNetConfig{3, tree.leaf_count(), {8, 16, 32}}, 5)),
      ValidationError);

  Schedule bad_epochs = s;
  bad_epochs.episodes[0].max_epochs = 0;
  CHECK_THROWS_AS(run_schedule(bad_epochs, fresh_net(5)), ValidationError);

  Schedule missing = s;
  missing.episodes[0].manifest = (tmp.path / "nothing.json").string();
  CHECK_THROWS_AS(run_schedule(missing, fresh_net(5)), ValidationError);
}

TEST_CASE("training memorizes the train split better than the test split") {
  TempDir tmp("overfit");
  const std::string manifest = make_dataset(tmp.path, "ds", 29, 10, kSupers);

  Schedule s;
  s.master_seed = 71;
  s.patience = 40;  // effectively disabled; this test wants raw memorization
  s.episodes.push_back({manifest, 40, 3e-3, 4, false});

  const RunResult r = run_schedule(s, fresh_net(19));
  const LoadedDataset ds = load_dataset(manifest);
  const EvalResult on_train = evaluate(r.net, ds, Split::Train);
  const EvalResult on_test = evaluate(r.net, ds, Split::Test);
  CHECK(on_train.aggregate.mean_pq > 0.2);
  CHECK(on_train.aggregate.mean_pq >= on_test.aggregate.mean_pq);

  CHECK(on_train.per_image.size() == ds.train_idx.size());
  CHECK(on_test.per_image.size() == ds.test_idx.size());
}

TEST_CASE("evaluation requires a nonempty split and matching channels") {
  TempDir tmp("eval");
  const std::string manifest = make_dataset(tmp.path, "tiny", 30, 2, kSupers);
  const LoadedDataset ds = load_dataset(manifest);
  CHECK(ds.val_idx.empty());  // floor(0.15 * 2) = 0
  CHECK_THROWS_AS(evaluate(fresh_net(1), ds, Split::Val), ValidationError);

  const EvalResult all = evaluate(fresh_net(1), ds, Split::All);
  CHECK(all.per_image.size() == 2);

  CHECK_THROWS_AS(evaluate(MicroUNet(UNetConfig{3, 4, {8, 16, 32}}, 1), ds, Split::All),
                  ValidationError);

  CHECK(parse_split("train") == Split::Train);
  CHECK(parse_split("val") == Split::Val);
  CHECK(parse_split("test") == Split::Test);
  CHECK(parse_split("all") == Split::All);
  CHECK_THROWS_AS(parse_split("validation"), ValidationError);
}

TEST_CASE("eval reports are written with per-image and summary rows") {
  TempDir tmp("report");
  const std::string manifest = make_dataset(tmp.path, "ds", 33, 4, kSupers);
  const LoadedDataset ds = load_dataset(manifest);
  const EvalResult res = evaluate(fresh_net(2), ds, Split::All);

  const std::string path = (tmp.path / "report.csv").string();
  write_eval_report(path, res, ds.cut);
  std::ifstream f(path);
  REQUIRE(f.good());
  std::string line;
  std::getline(f, line);
  CHECK(line == "image,class_name,tp,fp,fn,sum_iou,pq");
  int lines = 0;
  bool mean_row = false;
  while (std::getline(f, line)) {
    ++lines;
    if (line.rfind("ALL,MEAN", 0) == 0) mean_row = true;
  }
  CHECK(mean_row);
  // 4 images x 4 classes, plus 4 aggregate class rows and the mean row
  CHECK(lines == 4 * 4 + 4 + 1);
}

TEST_CASE("a degenerate experiment with A = B keeps both arms comparable") {
  TempDir tmp("degen");
  const std::string manifest = make_dataset(tmp.path, "same", 55, 12, kSupers);

  ExperimentConfig cfg;
  cfg.dataset_a = manifest;
  cfg.dataset_b = manifest;
  cfg.seeds = 2;
  cfg.base_seed = 9;
  cfg.patience = 4;
  // budgets long enough that the single-episode arm plateaus before its cap
  cfg.episode_a = {manifest, 80, 3e-3, 4, false};
  cfg.episode_b = {manifest, 80, 3e-3, 4, false};

  const ExperimentResult res = experiment_pretrain_finetune(cfg);
  REQUIRE(res.rows.size() == 4);  // 2 arms x 2 seeds
  CHECK(res.arm_means.count("B_only") == 1);
  CHECK(res.arm_means.count("A_then_B") == 1);
  for (const ArmRow& row : res.rows) {
    CHECK(row.mean_pq >= 0.0);
    CHECK(row.mean_pq <= 1.0);
    CHECK(row.test_dataset == "same");
  }
  CHECK(res.logs.count("B_only#0") == 1);
  CHECK(res.logs.count("A_then_B#1") == 1);

  // same data in both arms: with budgets past early stopping the second
  // episode cannot open a large gap
  const double gap = std::abs(res.arm_means.at("A_then_B") - res.arm_means.at("B_only"));
  CHECK(gap <= 0.35);

  const std::string table = res.table_csv();
  CHECK(table.rfind("arm,seed,test_dataset,mean_pq", 0) == 0);
  CHECK(table.find("B_only,0,same,") != std::string::npos);
  CHECK(table.find("A_then_B,1,same,") != std::string::npos);
}

TEST_CASE("fine-tuning does not wreck performance on the source distribution") {
  TempDir tmp("ctrl");
  const std::string a = make_dataset(tmp.path, "a", 61, 24, kSupers);
  const std::string b = make_dataset(
      tmp.path, "b", 62, 16,
      {"healthy_epithelial", "malignant_epithelial", "non_neoplastic_epithelial", "lymphocyte",
       "macrophage", "neutrophil", "fibroblast", "muscle", "endothelial", "dead",
       "miscellaneous"});
  // c draws from the same appearance distribution as a, at a's cut
  const std::string c = make_dataset(tmp.path, "c", 63, 16, kSupers);

  ExperimentConfig cfg;
  cfg.dataset_a = a;
  cfg.dataset_b = b;
  cfg.dataset_c = c;
  cfg.seeds = 1;
  cfg.base_seed = 17;
  cfg.patience = 6;
  cfg.episode_a = {a, 20, 3e-3, 4, false};
  cfg.episode_b = {b, 20, 3e-3, 4, false};

  const ExperimentResult res = experiment_generalization(cfg);
  REQUIRE(res.rows.size() == 2);
  const double a_only = res.arm_means.at("A_only");
  const double a_then_b = res.arm_means.at("A_then_B");
  CHECK(a_only > 0.0);  // the source model transfers to its own distribution
  CHECK(a_then_b >= a_only - 0.1);

  ExperimentConfig no_c = cfg;
  no_c.dataset_c.clear();
  CHECK_THROWS_AS(experiment_generalization(no_c), ValidationError);
}

TEST_CASE("csv output pins value formatting") {
  MetricsLog log;
  LogRow row;
  row.episode = 1;
  row.epoch = 2;
  row.step = 34;
  row.dataset = "ds";
  row.train_loss = 0.1;  // not exactly representable: 17 significant digits
  row.val_loss = 0.5;    // exactly representable: short form
  row.event = "epoch";
  log.rows.push_back(row);

  const std::string csv = log.to_csv();
  CHECK(csv.find("0.10000000000000001") != std::string::npos);
  CHECK(csv.find(",0.5,") != std::string::npos);
  CHECK(csv.rfind("episode,epoch,step,dataset,train_loss,val_loss,event", 0) == 0);
}
