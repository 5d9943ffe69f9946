#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "hierseg/rng.hpp"

namespace hierseg {

// Coarse-to-fine class hierarchy. Internal nodes are super-classes, childless
// nodes are the leaf classes a network predicts. Node 0 is the root; nodes are
// stored in document order and leaves are indexed depth-first in document
// order, so the leaf indexing is deterministic across runs and platforms.
struct ClassTree {
  struct Node {
    std::string name;
    int parent = -1;
    std::vector<int> children;
  };

  std::vector<Node> nodes;
  std::vector<int> leaf_order;  // node ids of leaves, depth-first document order
  std::vector<int> leaf_index;  // node id -> dense leaf index, -1 for internal nodes
  std::uint64_t fingerprint = 0;

  int leaf_count() const { return static_cast<int>(leaf_order.size()); }
  int find(const std::string& name) const;  // -1 when absent
  bool is_leaf(int node) const;
  bool is_ancestor(int node, int descendant) const;  // strict
  // Dense leaf indices of the subtree rooted at node, ascending.
  std::vector<int> subtree_leaves(int node) const;
};

// Parses the hierarchy document format: a single JSON object per node with
// "name" and an optional "children" array; the top-level object is the root.
ClassTree parse_hierarchy(const std::string& document);
ClassTree load_hierarchy(const std::string& path);

// Canonical serialization; parse(serialize(t)) has the fingerprint of t.
std::string serialize_hierarchy(const ClassTree& tree);

// Bundled example: 4 super-classes over 11 sub-classes of cell nuclei.
const char* builtin_nucleus_tree();

// A dataset's label vocabulary: an antichain of tree nodes, kept in caller
// order. leaves_per_member holds dense leaf indices. Carries the fingerprint
// of the tree it was validated against so stale sets fail loudly.
struct LabelSet {
  std::uint64_t tree_fingerprint = 0;
  std::vector<int> members;  // node ids
  std::vector<std::string> member_names;
  std::vector<std::vector<int>> leaves_per_member;  // dense leaf indices
  std::vector<int> member_of_leaf;  // dense leaf index -> member, -1 uncovered

  int size() const { return static_cast<int>(members.size()); }
  bool is_leaf_cut() const;
};

LabelSet validate_cut(const ClassTree& tree, const std::vector<std::string>& names);

// out[k] = sum over S_k of leaf_probs; mass outside the cut is dropped.
Eigen::VectorXd project_distribution(const ClassTree& tree, const LabelSet& cut,
                                     const Eigen::Ref<const Eigen::VectorXd>& leaf_probs);

// Member covering the given leaf node, or nullopt when the cut does not
// cover it.
std::optional<int> project_label(const ClassTree& tree, const LabelSet& cut, int leaf_node);

// Seeded antichain sampler; may leave leaves uncovered.
LabelSet random_cut(const ClassTree& tree, Rng& rng);

}  // namespace hierseg
