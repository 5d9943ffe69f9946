#include "hierseg/hierarchy.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>
#include <unordered_set>

#include <json.hpp>

#include "hierseg/error.hpp"

namespace hierseg {

namespace {

using nlohmann::json;

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

void build_node(const json& obj, int parent, ClassTree& tree,
                std::unordered_set<std::string>& seen) {
  if (!obj.is_object()) {
    throw ValidationError("hierarchy node is not an object: " + obj.dump());
  }
  if (!obj.contains("name") || !obj.at("name").is_string()) {
    throw ValidationError("hierarchy node without a \"name\" string: " + obj.dump());
  }
  const std::string name = obj.at("name").get<std::string>();
  if (!seen.insert(name).second) {
    throw ValidationError("duplicate class name '" + name + "' in hierarchy document");
  }
  const int id = static_cast<int>(tree.nodes.size());
  tree.nodes.push_back({name, parent, {}});
  if (parent >= 0) {
    tree.nodes[parent].children.push_back(id);
  }
  if (obj.contains("children")) {
    const json& kids = obj.at("children");
    if (!kids.is_array()) {
      throw ValidationError("\"children\" of '" + name + "' must be an array");
    }
    for (const json& kid : kids) {
      build_node(kid, id, tree, seen);
    }
  }
}

void collect_leaves(const ClassTree& tree, int node, std::vector<int>& out) {
  if (tree.nodes[node].children.empty()) {
    out.push_back(node);
    return;
  }
  for (int child : tree.nodes[node].children) {
    collect_leaves(tree, child, out);
  }
}

json node_to_json(const ClassTree& tree, int node) {
  json obj;
  obj["name"] = tree.nodes[node].name;
  if (!tree.nodes[node].children.empty()) {
    json kids = json::array();
    for (int child : tree.nodes[node].children) {
      kids.push_back(node_to_json(tree, child));
    }
    obj["children"] = std::move(kids);
  }
  return obj;
}

}  // namespace

int ClassTree::find(const std::string& name) const {
  for (int i = 0; i < static_cast<int>(nodes.size()); ++i) {
    if (nodes[i].name == name) return i;
  }
  return -1;
}

bool ClassTree::is_leaf(int node) const {
  return nodes[node].children.empty();
}

bool ClassTree::is_ancestor(int node, int descendant) const {
  int cur = nodes[descendant].parent;
  while (cur >= 0) {
    if (cur == node) return true;
    cur = nodes[cur].parent;
  }
  return false;
}

std::vector<int> ClassTree::subtree_leaves(int node) const {
  std::vector<int> leaf_nodes;
  collect_leaves(*this, node, leaf_nodes);
  std::vector<int> out;
  out.reserve(leaf_nodes.size());
  for (int n : leaf_nodes) out.push_back(leaf_index[n]);
  std::sort(out.begin(), out.end());
  return out;
}

ClassTree parse_hierarchy(const std::string& document) {
  json doc;
  try {
    doc = json::parse(document);
  } catch (const json::parse_error& e) {
    throw ValidationError(std::string("malformed hierarchy document: ") + e.what());
  }
  if (doc.is_array()) {
    throw ValidationError("hierarchy document has multiple roots; expected a single root object");
  }
  ClassTree tree;
  std::unordered_set<std::string> seen;
  build_node(doc, -1, tree, seen);

  collect_leaves(tree, 0, tree.leaf_order);
  tree.leaf_index.assign(tree.nodes.size(), -1);
  for (int i = 0; i < static_cast<int>(tree.leaf_order.size()); ++i) {
    tree.leaf_index[tree.leaf_order[i]] = i;
  }
  tree.fingerprint = fnv1a(node_to_json(tree, 0).dump());
  return tree;
}

ClassTree load_hierarchy(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw ValidationError("cannot open hierarchy file '" + path + "'");
  }
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_hierarchy(buf.str());
}

std::string serialize_hierarchy(const ClassTree& tree) {
  return node_to_json(tree, 0).dump(2) + "\n";
}

const char* builtin_nucleus_tree() {
  return R"({
  "name": "nucleus",
  "children": [
    {"name": "epithelial", "children": [
      {"name": "healthy_epithelial"},
      {"name": "malignant_epithelial"},
      {"name": "non_neoplastic_epithelial"}
    ]},
    {"name": "inflammatory", "children": [
      {"name": "lymphocyte"},
      {"name": "macrophage"},
      {"name": "neutrophil"}
    ]},
    {"name": "connective", "children": [
      {"name": "fibroblast"},
      {"name": "muscle"},
      {"name": "endothelial"}
    ]},
    {"name": "other", "children": [
      {"name": "dead"},
      {"name": "miscellaneous"}
    ]}
  ]
}
)";
}

bool LabelSet::is_leaf_cut() const {
  for (const auto& leaves : leaves_per_member) {
    if (leaves.size() != 1) return false;
  }
  return true;
}

LabelSet validate_cut(const ClassTree& tree, const std::vector<std::string>& names) {
  if (names.empty()) {
    throw ValidationError("label set is empty");
  }
  LabelSet cut;
  cut.tree_fingerprint = tree.fingerprint;
  for (const std::string& name : names) {
    int node = tree.find(name);
    if (node < 0) {
      throw ValidationError("unknown class name '" + name + "'");
    }
    for (int other : cut.members) {
      if (other == node) {
        throw ValidationError("duplicate label '" + name + "' in cut");
      }
      if (tree.is_ancestor(other, node)) {
        throw ValidationError("'" + name + "' is a descendant of '" +
                              tree.nodes[other].name + "'; cut members must be mutually exclusive");
      }
      if (tree.is_ancestor(node, other)) {
        throw ValidationError("'" + tree.nodes[other].name + "' is a descendant of '" +
                              name + "'; cut members must be mutually exclusive");
      }
    }
    cut.members.push_back(node);
    cut.member_names.push_back(name);
    cut.leaves_per_member.push_back(tree.subtree_leaves(node));
  }
  cut.member_of_leaf.assign(tree.leaf_count(), -1);
  for (int k = 0; k < cut.size(); ++k) {
    for (int leaf : cut.leaves_per_member[k]) {
      cut.member_of_leaf[leaf] = k;
    }
  }
  return cut;
}

Eigen::VectorXd project_distribution(const ClassTree& tree, const LabelSet& cut,
                                     const Eigen::Ref<const Eigen::VectorXd>& leaf_probs) {
  if (cut.tree_fingerprint != tree.fingerprint) {
    throw ValidationError("label set does not match tree (fingerprint mismatch)");
  }
  if (leaf_probs.size() != tree.leaf_count()) {
    throw ValidationError("leaf probability vector has wrong length");
  }
  if ((leaf_probs.array() < 0.0).any()) {
    throw ValidationError("leaf probabilities must be nonnegative");
  }
  Eigen::VectorXd out = Eigen::VectorXd::Zero(cut.size());
  for (int k = 0; k < cut.size(); ++k) {
    for (int leaf : cut.leaves_per_member[k]) {
      out[k] += leaf_probs[leaf];
    }
  }
  return out;
}

std::optional<int> project_label(const ClassTree& tree, const LabelSet& cut, int leaf_node) {
  if (cut.tree_fingerprint != tree.fingerprint) {
    throw ValidationError("label set does not match tree (fingerprint mismatch)");
  }
  if (leaf_node < 0 || leaf_node >= static_cast<int>(tree.nodes.size()) || !tree.is_leaf(leaf_node)) {
    throw ValidationError("project_label expects a leaf node");
  }
  int member = cut.member_of_leaf[tree.leaf_index[leaf_node]];
  if (member < 0) return std::nullopt;
  return member;
}

LabelSet random_cut(const ClassTree& tree, Rng& rng) {
  for (int attempt = 0; attempt < 100; ++attempt) {
    std::vector<std::string> names;
    // Root always descends; internal nodes are taken, descended into, or
    // skipped; leaves are mostly taken.
    auto visit = [&](auto&& self, int node) -> void {
      if (tree.is_leaf(node)) {
        if (rng.next_double() < 0.85) names.push_back(tree.nodes[node].name);
        return;
      }
      double r = (node == 0) ? 0.5 : rng.next_double();
      if (r < 0.45) {
        names.push_back(tree.nodes[node].name);
      } else if (r < 0.92) {
        for (int child : tree.nodes[node].children) self(self, child);
      }
    };
    visit(visit, 0);
    if (!names.empty()) return validate_cut(tree, names);
  }
  // All leaves as the fallback; unreachable in practice.
  std::vector<std::string> names;
  for (int leaf : tree.leaf_order) names.push_back(tree.nodes[leaf].name);
  return validate_cut(tree, names);
}

}  // namespace hierseg
