#include "hierseg/metrics.hpp"

#include <algorithm>
#include <map>
#include <string>

#include "hierseg/error.hpp"

namespace hierseg {
namespace {

// instance id -> (member index 0-based, linear pixel indices ascending)
struct Instances {
  std::map<int, int> member;
  std::map<int, std::vector<int>> pixels;
};

Instances collect(const MaskPair& mp) {
  Instances out;
  const Eigen::Index h = mp.instances.rows(), w = mp.instances.cols();
  for (Eigen::Index r = 0; r < h; ++r) {
    for (Eigen::Index c = 0; c < w; ++c) {
      const int id = mp.instances(r, c);
      if (id == 0) continue;
      out.member.emplace(id, mp.classes(r, c) - 1);
      out.pixels[id].push_back(static_cast<int>(r * w + c));
    }
  }
  return out;
}

}  // namespace

void MaskPair::validate(int member_count) const {
  if (instances.rows() != classes.rows() || instances.cols() != classes.cols()) {
    throw ValidationError("mask pair shapes differ");
  }
  std::map<int, int> seen;  // instance id -> class value
  for (Eigen::Index r = 0; r < instances.rows(); ++r) {
    for (Eigen::Index c = 0; c < instances.cols(); ++c) {
      const int id = instances(r, c);
      const int cls = classes(r, c);
      if (id < 0) throw ValidationError("negative instance id");
      if (cls < 0 || cls > member_count) {
        throw ValidationError("class value " + std::to_string(cls) + " outside [0, " +
                              std::to_string(member_count) + "]");
      }
      if (id > 0) {
        if (cls == 0) throw ValidationError("instance pixel with background class");
        const auto [it, fresh] = seen.emplace(id, cls);
        if (!fresh && it->second != cls) {
          throw ValidationError("instance " + std::to_string(id) + " spans two classes");
        }
      }
    }
  }
}

double iou(const std::vector<int>& a, const std::vector<int>& b) {
  if (a.empty() || b.empty()) throw ValidationError("iou of an empty instance");
  std::size_t i = 0, j = 0, inter = 0;
  while (i < a.size() && j < b.size()) {
    if (a[i] == b[j]) {
      ++inter;
      ++i;
      ++j;
    } else if (a[i] < b[j]) {
      ++i;
    } else {
      ++j;
    }
  }
  const std::size_t uni = a.size() + b.size() - inter;
  return static_cast<double>(inter) / static_cast<double>(uni);
}

MatchResult match_instances(const MaskPair& pred, const MaskPair& truth, double threshold,
                            int member_count) {
  if (threshold < 0.5) throw ValidationError("matching threshold must be at least 0.5");
  pred.validate(member_count);
  truth.validate(member_count);
  if (pred.instances.rows() != truth.instances.rows() ||
      pred.instances.cols() != truth.instances.cols()) {
    throw ValidationError("prediction and ground truth shapes differ");
  }

  const Instances p = collect(pred);
  const Instances g = collect(truth);

  MatchResult out;
  out.tp.resize(member_count);
  out.fp.resize(member_count);
  out.fn.resize(member_count);

  std::map<int, bool> truth_matched;
  for (const auto& [gid, _] : g.pixels) truth_matched[gid] = false;

  // threshold >= 0.5 means each pred overlaps at most one truth above it,
  // so a plain scan needs no assignment solver.
  for (const auto& [pid, ppix] : p.pixels) {
    const int pm = p.member.at(pid);
    bool matched = false;
    for (const auto& [gid, gpix] : g.pixels) {
      if (g.member.at(gid) != pm || truth_matched[gid]) continue;
      const double v = iou(ppix, gpix);
      if (v > threshold) {
        out.tp[pm].push_back({pid, gid, v});
        truth_matched[gid] = true;
        matched = true;
        break;
      }
    }
    if (!matched) out.fp[pm].push_back(pid);
  }
  for (const auto& [gid, was] : truth_matched) {
    if (!was) out.fn[g.member.at(gid)].push_back(gid);
  }
  return out;
}

PQReport finalize_pq(std::vector<ClassPQ> per_class) {
  PQReport rep;
  rep.per_class = std::move(per_class);
  double total = 0.0;
  for (ClassPQ& c : rep.per_class) {
    c.in_ground_truth = c.tp + c.fn > 0;
    const double denom = c.tp + 0.5 * (c.fp + c.fn);
    c.pq = denom > 0 ? std::optional<double>(c.sum_iou / denom) : std::nullopt;
    if (c.in_ground_truth) {
      ++rep.present_classes;
      total += *c.pq;
    }
  }
  rep.mean_pq = rep.present_classes > 0 ? total / rep.present_classes : 0.0;
  return rep;
}

PQReport panoptic_quality(const MaskPair& pred, const MaskPair& truth, int member_count,
                          double threshold) {
  const MatchResult m = match_instances(pred, truth, threshold, member_count);
  std::vector<ClassPQ> per_class(member_count);
  for (int k = 0; k < member_count; ++k) {
    per_class[k].tp = static_cast<int>(m.tp[k].size());
    per_class[k].fp = static_cast<int>(m.fp[k].size());
    per_class[k].fn = static_cast<int>(m.fn[k].size());
    for (const MatchedPair& t : m.tp[k]) per_class[k].sum_iou += t.iou;
  }
  return finalize_pq(std::move(per_class));
}

Eigen::MatrixXi connected_components(const Eigen::Ref<const Eigen::MatrixXi>& mask) {
  const Eigen::Index h = mask.rows(), w = mask.cols();
  Eigen::MatrixXi labels = Eigen::MatrixXi::Zero(h, w);
  int next = 0;
  std::vector<std::pair<Eigen::Index, Eigen::Index>> stack;
  for (Eigen::Index r = 0; r < h; ++r) {
    for (Eigen::Index c = 0; c < w; ++c) {
      if (mask(r, c) == 0 || labels(r, c) != 0) continue;
      ++next;
      stack.push_back({r, c});
      labels(r, c) = next;
      while (!stack.empty()) {
        const auto [y, x] = stack.back();
        stack.pop_back();
        const Eigen::Index ny[4] = {y - 1, y + 1, y, y};
        const Eigen::Index nx[4] = {x, x, x - 1, x + 1};
        for (int k = 0; k < 4; ++k) {
          if (ny[k] < 0 || ny[k] >= h || nx[k] < 0 || nx[k] >= w) continue;
          if (mask(ny[k], nx[k]) == 0 || labels(ny[k], nx[k]) != 0) continue;
          labels(ny[k], nx[k]) = next;
          stack.push_back({ny[k], nx[k]});
        }
      }
    }
  }
  return labels;
}

Eigen::MatrixXi classify_instances(const Eigen::Ref<const Eigen::MatrixXi>& instance_map,
                                   const Eigen::Ref<const Eigen::MatrixXd>& leaf_probs,
                                   const ClassTree& tree, const LabelSet& cut) {
  const Eigen::Index h = instance_map.rows(), w = instance_map.cols();
  if (leaf_probs.rows() != h * w) {
    throw ValidationError("probability rows do not match the instance map");
  }
  if (leaf_probs.cols() != tree.leaf_count() + 1) {
    throw ValidationError("probability columns must be leaf count + background");
  }

  // Sum leaf mass per instance first; the projection is linear, so projecting
  // the per-instance sum equals summing per-pixel projections.
  std::map<int, Eigen::VectorXd> mass;
  for (Eigen::Index r = 0; r < h; ++r) {
    for (Eigen::Index c = 0; c < w; ++c) {
      const int id = instance_map(r, c);
      if (id == 0) continue;
      auto [it, fresh] = mass.emplace(id, Eigen::VectorXd::Zero(tree.leaf_count()));
      it->second += leaf_probs.row(r * w + c).head(tree.leaf_count()).transpose();
    }
  }

  std::map<int, int> vote;  // instance id -> class value (member + 1)
  for (const auto& [id, leaf_mass] : mass) {
    const Eigen::VectorXd projected = project_distribution(tree, cut, leaf_mass);
    int best = 0;
    for (int k = 1; k < cut.size(); ++k) {
      if (projected[k] > projected[best]) best = k;
    }
    vote[id] = best + 1;
  }

  Eigen::MatrixXi classes = Eigen::MatrixXi::Zero(h, w);
  for (Eigen::Index r = 0; r < h; ++r) {
    for (Eigen::Index c = 0; c < w; ++c) {
      const int id = instance_map(r, c);
      if (id != 0) classes(r, c) = vote.at(id);
    }
  }
  return classes;
}

}  // namespace hierseg
