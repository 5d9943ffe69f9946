#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "hierseg/losses.hpp"
#include "hierseg/metrics.hpp"
#include "hierseg/net.hpp"
#include "hierseg/synthdata.hpp"

namespace hierseg {

struct Episode {
  std::string manifest;
  int max_epochs = 1;
  double learning_rate = 1e-3;
  int batch_size = 4;
  bool augment = true;
};

struct Schedule {
  std::vector<Episode> episodes;
  int patience = 5;
  std::uint64_t master_seed = 0;
  CombinedLossParams loss;
  std::vector<std::string> eval_datasets;
};

Schedule read_schedule(const std::string& path);
void write_schedule(const std::string& path, const Schedule& schedule);

struct LogRow {
  int episode = 0;
  int epoch = 0;
  long step = 0;
  std::string dataset;
  std::optional<double> train_loss;
  std::optional<double> val_loss;
  std::string event;
  std::uint64_t cut_fingerprint = 0;  // in memory only, not a CSV column
};

struct MetricsLog {
  std::vector<LogRow> rows;

  std::string to_csv() const;  // %.17g floats, so equal runs give equal bytes
  void write_csv(const std::string& path) const;
  // Validation loss of the row (episode, epoch, event "epoch"); throws when
  // the run never logged that epoch.
  double val_at(int episode, int epoch) const;
};

// Pixel labels for the loss: background stays background, class v becomes
// member v - 1.
TargetField targets_from_masks(const MaskPair& masks, const LabelSet& cut);

struct RunResult {
  MicroUNet net;
  MetricsLog log;
  long steps = 0;
  int leaf_count = 0;
  std::uint64_t tree_fingerprint = 0;
};

// Sequential episode training: one dataset per episode, Adam on the combined
// loss, per-epoch validation, early stopping with best-checkpoint restore at
// each episode end. The same network, head included, carries across episodes.
RunResult run_schedule(const Schedule& schedule, MicroUNet net,
                       std::optional<std::uint64_t> required_fingerprint = std::nullopt);

enum class Split { Train, Val, Test, All };
Split parse_split(const std::string& name);

struct EvalRow {
  std::string image;
  PQReport report;
};

struct EvalResult {
  std::vector<EvalRow> per_image;
  // Counts summed over the split before the PQ ratio, once per class.
  PQReport aggregate;
};

// Argmax pixels -> 4-connected instances -> mass-vote classes at the
// dataset's cut -> panoptic quality against ground truth.
EvalResult evaluate(const MicroUNet& net, const LoadedDataset& dataset, Split split);

void write_eval_report(const std::string& path, const EvalResult& result, const LabelSet& cut);

struct ExperimentConfig {
  std::string dataset_a;
  std::string dataset_b;
  std::string dataset_c;  // generalization target; unused by the finetune kind
  int seeds = 3;
  std::uint64_t base_seed = 1;
  int patience = 3;
  CombinedLossParams loss;
  Episode episode_a;  // manifest field is overwritten with dataset_a
  Episode episode_b;
};

ExperimentConfig read_experiment_config(const std::string& path);

struct ArmRow {
  std::string arm;
  int seed_index = 0;
  std::string test_dataset;
  double mean_pq = 0.0;
};

struct ExperimentResult {
  std::vector<ArmRow> rows;
  std::map<std::string, double> arm_means;
  // Training logs keyed "<arm>#<seed index>", kept for boundary diagnostics.
  std::map<std::string, MetricsLog> logs;

  std::string table_csv() const;  // arm,seed,test_dataset,mean_pq
  void write_table(const std::string& path) const;
};

// Both arms of a seed start from identical parameters, so the comparison
// isolates the effect of the extra episode.
// {B-only} vs {A then B}, tested on B's test split.
ExperimentResult experiment_pretrain_finetune(const ExperimentConfig& config);
// {A-only} vs {A then B}, tested on all of the never-trained C.
ExperimentResult experiment_generalization(const ExperimentConfig& config);

}  // namespace hierseg
