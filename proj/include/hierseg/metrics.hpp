#pragma once

#include <optional>
#include <vector>

#include <Eigen/Core>

#include "hierseg/hierarchy.hpp"

namespace hierseg {

// Two-channel ground-truth or prediction encoding. instances(r, c) = 0 means
// no instance; classes(r, c) = 0 means background, v >= 1 means cut member
// v - 1. Instance ids need not be contiguous.
struct MaskPair {
  Eigen::MatrixXi instances;
  Eigen::MatrixXi classes;

  // Checks: equal shapes, values in range, instance pixels carry a class,
  // and all pixels of one instance agree on that class.
  void validate(int member_count) const;
};

// |a n b| / |a u b| over linear pixel indices; either side empty is an error
// because instances are non-empty by construction.
double iou(const std::vector<int>& a, const std::vector<int>& b);

struct MatchedPair {
  int pred_id = 0;
  int truth_id = 0;
  double iou = 0.0;
};

// Class-wise instance matching. A pred/truth pair is a true positive iff both
// carry the same cut member and IoU > threshold; threshold >= 0.5 makes the
// match unique without an assignment solver.
struct MatchResult {
  std::vector<std::vector<MatchedPair>> tp;  // per member
  std::vector<std::vector<int>> fp;          // unmatched pred ids per member
  std::vector<std::vector<int>> fn;          // unmatched truth ids per member
};

MatchResult match_instances(const MaskPair& pred, const MaskPair& truth, double threshold,
                            int member_count);

struct ClassPQ {
  int tp = 0;
  int fp = 0;
  int fn = 0;
  double sum_iou = 0.0;
  bool in_ground_truth = false;
  // sum_iou / (tp + 0.5 fp + 0.5 fn); absent when that denominator is zero.
  std::optional<double> pq;
};

struct PQReport {
  std::vector<ClassPQ> per_class;
  // Mean over members with at least one ground-truth instance; 0 when none.
  double mean_pq = 0.0;
  int present_classes = 0;
};

// Recomputes per-class PQ and the ground-truth-present mean from raw counts;
// used both per image and on counts summed over a whole split.
PQReport finalize_pq(std::vector<ClassPQ> per_class);

PQReport panoptic_quality(const MaskPair& pred, const MaskPair& truth, int member_count,
                          double threshold = 0.5);

// 4-connected components of the nonzero pixels, labeled 1..k in row-major
// first-encounter order; zero pixels stay zero.
Eigen::MatrixXi connected_components(const Eigen::Ref<const Eigen::MatrixXi>& mask);

// Per instance, sums the cut projection of the leaf channels of leaf_probs
// (one row per pixel, background channel last) over the instance's pixels and
// assigns the arg-max member; ties break toward the lowest member index.
// Pixels outside instances become background.
Eigen::MatrixXi classify_instances(const Eigen::Ref<const Eigen::MatrixXi>& instance_map,
                                   const Eigen::Ref<const Eigen::MatrixXd>& leaf_probs,
                                   const ClassTree& tree, const LabelSet& cut);

}  // namespace hierseg
