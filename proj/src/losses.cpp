#include "hierseg/losses.hpp"

#include <cmath>

#include "hierseg/error.hpp"

namespace hierseg {

namespace {

constexpr double kLogGuard = 1e-12;

// dL/dz from dL/dy for y = softmax(z), rowwise:
// dz = y .* (dy - <dy, y>)
Eigen::MatrixXd fuse_softmax_jacobian(const Eigen::MatrixXd& probs, const Eigen::MatrixXd& d_probs) {
  Eigen::VectorXd dot = (d_probs.array() * probs.array()).rowwise().sum().matrix();
  return (probs.array() * (d_probs.array().colwise() - dot.array())).matrix();
}

void check_pair(const ProbField& probs, const TargetField& targets) {
  probs.validate();
  targets.validate();
  if (targets.labels.size() != probs.pixels()) {
    throw ValidationError("targets and probabilities disagree on pixel count");
  }
  for (const auto& leaves : targets.cut.leaves_per_member) {
    for (int leaf : leaves) {
      if (leaf >= probs.channels() - 1) {
        throw ValidationError("label set references leaves beyond the probability channels");
      }
    }
  }
}

void check_tree(const TargetField& targets, const ProbField& probs, const ClassTree& tree) {
  if (targets.cut.tree_fingerprint != tree.fingerprint) {
    throw ValidationError("label set does not match tree (fingerprint mismatch)");
  }
  if (probs.channels() != tree.leaf_count() + 1) {
    throw ValidationError("probability field must have one channel per leaf plus background");
  }
}

void require_leaf_cut(const TargetField& targets, const char* what) {
  if (!targets.cut.is_leaf_cut()) {
    throw ValidationError(std::string(what) + " requires a pure leaf cut");
  }
}

// Cross entropy over one column set per pixel. For the plain loss every
// selected set is a single column; for the modified loss it is S_k.
template <typename ColsOf>
LossProbGrad ce_core(const ProbField& probs, const TargetField& targets, ColsOf cols_of) {
  const int n = probs.pixels();
  const int ch = probs.channels();
  LossProbGrad out;
  out.d_probs = Eigen::MatrixXd::Zero(n, ch);
  double sum = 0.0;
  int counted = 0;
  for (int i = 0; i < n; ++i) {
    const int label = targets.labels[i];
    if (label == kIgnoreLabel) continue;
    ++counted;
    double mass = 0.0;
    const auto& cols = cols_of(label);
    for (int col : cols) mass += probs.probs(i, col);
    const double guarded = std::max(mass, kLogGuard);
    sum += -std::log(guarded);
    const double g = -1.0 / guarded;
    for (int col : cols) out.d_probs(i, col) = g;
  }
  if (counted > 0) {
    out.value = sum / counted;
    out.d_probs /= static_cast<double>(counted);
  }
  return out;
}

// Focal Tversky over cut-level masses. numerator_cols selects the target
// member's leaves (or the background channel); denominator_cols is the union
// of the cut's leaves, which excludes background and uncovered-leaf mass.
template <typename ColsOf, typename DenColsOf>
LossProbGrad ft_core(const ProbField& probs, const TargetField& targets,
                     const TverskyParams& p, ColsOf cols_of, DenColsOf den_cols_of) {
  const int n = probs.pixels();
  const int ch = probs.channels();
  LossProbGrad out;
  out.d_probs = Eigen::MatrixXd::Zero(n, ch);
  double sum = 0.0;
  int counted = 0;
  for (int i = 0; i < n; ++i) {
    const int label = targets.labels[i];
    if (label == kIgnoreLabel) continue;
    ++counted;
    const auto& num_cols = cols_of(label);
    const auto& den_cols = den_cols_of(label);
    double target_mass = 0.0;
    for (int col : num_cols) target_mass += probs.probs(i, col);
    double cut_mass = 0.0;
    for (int col : den_cols) cut_mass += probs.probs(i, col);
    const double num = target_mass + p.epsilon;
    const double den = p.alpha + (1.0 - p.alpha) * cut_mass + p.epsilon;
    const double ratio = num / den;
    const double base = std::max(1.0 - ratio, 0.0);
    sum += std::pow(base, p.gamma);

    // d term / d ratio = -gamma * base^(gamma-1); flat at the exact optimum.
    double d_term;
    if (base > 0.0) {
      d_term = -p.gamma * std::pow(base, p.gamma - 1.0);
    } else {
      d_term = (p.gamma > 1.0) ? 0.0 : ((p.gamma == 1.0) ? -p.gamma : 0.0);
    }
    const double d_num = 1.0 / den;                              // d ratio / d target_mass
    const double d_den = -num * (1.0 - p.alpha) / (den * den);   // d ratio / d cut_mass
    for (int col : den_cols) out.d_probs(i, col) += d_term * d_den;
    for (int col : num_cols) out.d_probs(i, col) += d_term * d_num;
  }
  if (counted > 0) {
    out.value = sum / counted;
    out.d_probs /= static_cast<double>(counted);
  }
  return out;
}

LossGrad to_score_grad(const ProbField& probs, const LossProbGrad& pg) {
  return {pg.value, fuse_softmax_jacobian(probs.probs, pg.d_probs)};
}

}  // namespace

Eigen::MatrixXd softmax_rows(const Eigen::Ref<const Eigen::MatrixXd>& scores) {
  Eigen::MatrixXd out(scores.rows(), scores.cols());
  for (Eigen::Index i = 0; i < scores.rows(); ++i) {
    const double mx = scores.row(i).maxCoeff();
    Eigen::RowVectorXd e = (scores.row(i).array() - mx).exp().matrix();
    out.row(i) = e / e.sum();
  }
  return out;
}

ProbField ProbField::from_scores(const Eigen::Ref<const Eigen::MatrixXd>& scores) {
  return ProbField{softmax_rows(scores)};
}

void ProbField::validate() const {
  if (probs.cols() < 2) {
    throw ValidationError("probability field needs at least one class channel plus background");
  }
  if ((probs.array() < 0.0).any()) {
    throw ValidationError("probability field has negative entries");
  }
  for (Eigen::Index i = 0; i < probs.rows(); ++i) {
    if (std::abs(probs.row(i).sum() - 1.0) > 1e-9) {
      throw ValidationError("probability row does not sum to 1");
    }
  }
}

void TargetField::validate() const {
  for (Eigen::Index i = 0; i < labels.size(); ++i) {
    const int l = labels[i];
    if (l != kBackgroundLabel && l != kIgnoreLabel && (l < 0 || l >= cut.size())) {
      throw ValidationError("target label out of range for the label set");
    }
  }
}

void TverskyParams::validate() const {
  if (!(alpha > 0.0 && alpha < 1.0)) throw ValidationError("tversky alpha must lie in (0,1)");
  if (!(gamma > 0.0)) throw ValidationError("tversky gamma must be positive");
  if (!(epsilon >= 0.0)) throw ValidationError("tversky epsilon must be nonnegative");
}

void CombinedLossParams::validate() const {
  if (!(lambda_ce >= 0.0) || !(lambda_ft >= 0.0) || lambda_ce + lambda_ft <= 0.0) {
    throw ValidationError("combined loss weights must be nonnegative with a positive sum");
  }
  tversky.validate();
}

LossProbGrad ce_loss_wrt_probs(const ProbField& probs, const TargetField& targets) {
  check_pair(probs, targets);
  require_leaf_cut(targets, "cross entropy");
  const int bg = probs.background_channel();
  std::vector<int> single(1);
  return ce_core(probs, targets, [&](int label) -> const std::vector<int>& {
    single[0] = (label == kBackgroundLabel) ? bg : targets.cut.leaves_per_member[label][0];
    return single;
  });
}

LossProbGrad mce_loss_wrt_probs(const ProbField& probs, const TargetField& targets,
                                const ClassTree& tree) {
  check_pair(probs, targets);
  check_tree(targets, probs, tree);
  const int bg = probs.background_channel();
  const std::vector<int> bg_cols{bg};
  return ce_core(probs, targets, [&](int label) -> const std::vector<int>& {
    return (label == kBackgroundLabel) ? bg_cols : targets.cut.leaves_per_member[label];
  });
}

LossProbGrad ft_loss_wrt_probs(const ProbField& probs, const TargetField& targets,
                               const TverskyParams& params) {
  check_pair(probs, targets);
  params.validate();
  require_leaf_cut(targets, "focal Tversky loss");
  const int bg = probs.background_channel();
  const std::vector<int> bg_cols{bg};
  std::vector<int> cut_cols;
  for (const auto& leaves : targets.cut.leaves_per_member) cut_cols.push_back(leaves[0]);
  std::vector<int> single(1);
  return ft_core(
      probs, targets, params,
      [&](int label) -> const std::vector<int>& {
        if (label == kBackgroundLabel) return bg_cols;
        single[0] = targets.cut.leaves_per_member[label][0];
        return single;
      },
      [&](int label) -> const std::vector<int>& {
        return (label == kBackgroundLabel) ? bg_cols : cut_cols;
      });
}

LossProbGrad mft_loss_wrt_probs(const ProbField& probs, const TargetField& targets,
                                const ClassTree& tree, const TverskyParams& params) {
  check_pair(probs, targets);
  check_tree(targets, probs, tree);
  params.validate();
  const int bg = probs.background_channel();
  const std::vector<int> bg_cols{bg};
  // Union of the cut's leaves in member-then-leaf order, matching the
  // summation order of the plain loss on leaf cuts bit for bit.
  std::vector<int> cut_cols;
  for (const auto& leaves : targets.cut.leaves_per_member) {
    cut_cols.insert(cut_cols.end(), leaves.begin(), leaves.end());
  }
  return ft_core(
      probs, targets, params,
      [&](int label) -> const std::vector<int>& {
        return (label == kBackgroundLabel) ? bg_cols : targets.cut.leaves_per_member[label];
      },
      [&](int label) -> const std::vector<int>& {
        return (label == kBackgroundLabel) ? bg_cols : cut_cols;
      });
}

LossGrad ce_loss(const ProbField& probs, const TargetField& targets) {
  return to_score_grad(probs, ce_loss_wrt_probs(probs, targets));
}

LossGrad mce_loss(const ProbField& probs, const TargetField& targets, const ClassTree& tree) {
  return to_score_grad(probs, mce_loss_wrt_probs(probs, targets, tree));
}

LossGrad ft_loss(const ProbField& probs, const TargetField& targets, const TverskyParams& params) {
  return to_score_grad(probs, ft_loss_wrt_probs(probs, targets, params));
}

LossGrad mft_loss(const ProbField& probs, const TargetField& targets, const ClassTree& tree,
                  const TverskyParams& params) {
  return to_score_grad(probs, mft_loss_wrt_probs(probs, targets, tree, params));
}

LossGrad combined_loss(const ProbField& probs, const TargetField& targets, const ClassTree& tree,
                       const CombinedLossParams& params) {
  params.validate();
  LossGrad ce = mce_loss(probs, targets, tree);
  LossGrad ft = mft_loss(probs, targets, tree, params.tversky);
  return {params.lambda_ce * ce.value + params.lambda_ft * ft.value,
          params.lambda_ce * ce.d_scores + params.lambda_ft * ft.d_scores};
}

LossGrad evaluate_loss(LossKind kind, const ProbField& probs, const TargetField& targets,
                       const ClassTree& tree, const CombinedLossParams& params) {
  switch (kind) {
    case LossKind::CrossEntropy:
      return ce_loss(probs, targets);
    case LossKind::ModifiedCrossEntropy:
      return mce_loss(probs, targets, tree);
    case LossKind::FocalTversky:
      return ft_loss(probs, targets, params.tversky);
    case LossKind::ModifiedFocalTversky:
      return mft_loss(probs, targets, tree, params.tversky);
    case LossKind::Combined:
      return combined_loss(probs, targets, tree, params);
  }
  throw ValidationError("unknown loss kind");
}

double finite_diff_check(LossKind kind, const Eigen::Ref<const Eigen::MatrixXd>& scores,
                         const TargetField& targets, const ClassTree& tree,
                         const CombinedLossParams& params, double h) {
  if (!(h >= 1e-7 && h <= 1e-3)) {
    throw ValidationError("finite difference step must lie in [1e-7, 1e-3]");
  }
  const LossGrad analytic = evaluate_loss(kind, ProbField::from_scores(scores), targets, tree, params);
  Eigen::MatrixXd probe = scores;
  double max_err = 0.0;
  for (Eigen::Index i = 0; i < scores.rows(); ++i) {
    for (Eigen::Index j = 0; j < scores.cols(); ++j) {
      const double saved = probe(i, j);
      probe(i, j) = saved + h;
      const double up = evaluate_loss(kind, ProbField::from_scores(probe), targets, tree, params).value;
      probe(i, j) = saved - h;
      const double down = evaluate_loss(kind, ProbField::from_scores(probe), targets, tree, params).value;
      probe(i, j) = saved;
      const double numeric = (up - down) / (2.0 * h);
      const double err = std::abs(analytic.d_scores(i, j) - numeric) / std::max(1.0, std::abs(numeric));
      max_err = std::max(max_err, err);
    }
  }
  return max_err;
}

}  // namespace hierseg
