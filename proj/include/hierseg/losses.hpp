#pragma once

#include <Eigen/Core>

#include "hierseg/hierarchy.hpp"

namespace hierseg {

// Rowwise softmax with max subtraction.
Eigen::MatrixXd softmax_rows(const Eigen::Ref<const Eigen::MatrixXd>& scores);

// Per-pixel class probabilities: one row per pixel, c leaf channels followed
// by one background channel. Rows are nonnegative and sum to 1.
struct ProbField {
  Eigen::MatrixXd probs;

  static ProbField from_scores(const Eigen::Ref<const Eigen::MatrixXd>& scores);

  int pixels() const { return static_cast<int>(probs.rows()); }
  int channels() const { return static_cast<int>(probs.cols()); }
  int background_channel() const { return channels() - 1; }
  void validate() const;
};

// Label of a pixel within a TargetField: a cut member index, the background
// channel, or an ignore marker that removes the pixel from every loss term.
constexpr int kBackgroundLabel = -1;
constexpr int kIgnoreLabel = -2;

struct TargetField {
  Eigen::VectorXi labels;
  LabelSet cut;

  void validate() const;
};

struct TverskyParams {
  double alpha = 0.7;
  double gamma = 4.0 / 3.0;
  double epsilon = 1e-6;

  void validate() const;  // alpha in (0,1), gamma > 0, epsilon >= 0
};

struct CombinedLossParams {
  double lambda_ce = 1.0;
  double lambda_ft = 1.0;
  TverskyParams tversky;

  void validate() const;
};

// Scalar loss (mean over non-ignored pixels) together with its gradient with
// respect to pre-softmax scores; the softmax Jacobian is fused.
struct LossGrad {
  double value = 0.0;
  Eigen::MatrixXd d_scores;
};

// Same loss but differentiated with respect to the probabilities themselves,
// before the softmax Jacobian. Exposes the sum-node structure: gradient
// entries within one S_k are identical.
struct LossProbGrad {
  double value = 0.0;
  Eigen::MatrixXd d_probs;
};

// Plain cross entropy; requires a pure leaf cut.
LossGrad ce_loss(const ProbField& probs, const TargetField& targets);
// Cross entropy on cut-level masses: the probability of a super-class is the
// sum of its leaf probabilities, and the gradient distributes equally over
// the summed leaves.
LossGrad mce_loss(const ProbField& probs, const TargetField& targets, const ClassTree& tree);
// Focal Tversky loss per pixel; requires a pure leaf cut.
LossGrad ft_loss(const ProbField& probs, const TargetField& targets, const TverskyParams& params);
// Focal Tversky loss on cut-level masses.
LossGrad mft_loss(const ProbField& probs, const TargetField& targets, const ClassTree& tree,
                  const TverskyParams& params);
// lambda_ce * mce + lambda_ft * mft.
LossGrad combined_loss(const ProbField& probs, const TargetField& targets, const ClassTree& tree,
                       const CombinedLossParams& params);

LossProbGrad ce_loss_wrt_probs(const ProbField& probs, const TargetField& targets);
LossProbGrad mce_loss_wrt_probs(const ProbField& probs, const TargetField& targets,
                                const ClassTree& tree);
LossProbGrad ft_loss_wrt_probs(const ProbField& probs, const TargetField& targets,
                               const TverskyParams& params);
LossProbGrad mft_loss_wrt_probs(const ProbField& probs, const TargetField& targets,
                                const ClassTree& tree, const TverskyParams& params);

enum class LossKind { CrossEntropy, ModifiedCrossEntropy, FocalTversky, ModifiedFocalTversky, Combined };

LossGrad evaluate_loss(LossKind kind, const ProbField& probs, const TargetField& targets,
                       const ClassTree& tree, const CombinedLossParams& params);

// Central differences on every score entry against the analytic gradient.
// Returns max over entries of |analytic - numeric| / max(1, |numeric|).
double finite_diff_check(LossKind kind, const Eigen::Ref<const Eigen::MatrixXd>& scores,
                         const TargetField& targets, const ClassTree& tree,
                         const CombinedLossParams& params, double h);

}  // namespace hierseg
