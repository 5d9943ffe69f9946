#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <set>

#include "hierseg/error.hpp"
#include "hierseg/hierarchy.hpp"
#include "hierseg/rng.hpp"

using namespace hierseg;

namespace {

const char* kSmallTree = R"({
  "name": "root",
  "children": [
    {"name": "K", "children": [{"name": "a"}, {"name": "b"}]},
    {"name": "c"}
  ]
})";

std::vector<std::string> leaf_names(const ClassTree& t) {
  std::vector<std::string> out;
  for (int id : t.leaf_order) out.push_back(t.nodes[id].name);
  return out;
}

}  // namespace

TEST_CASE("parsing builds leaves depth-first in document order") {
  const ClassTree t = parse_hierarchy(R"({
    "name": "root",
    "children": [
      {"name": "A", "children": [{"name": "a1"}, {"name": "a2"}]},
      {"name": "B"}
    ]
  })");
  CHECK(t.leaf_count() == 3);
  CHECK(leaf_names(t) == std::vector<std::string>{"a1", "a2", "B"});
  CHECK(t.nodes[0].name == "root");
  CHECK(t.is_ancestor(t.find("A"), t.find("a2")));
  CHECK_FALSE(t.is_ancestor(t.find("a2"), t.find("A")));
}

TEST_CASE("duplicate names are rejected with the offending name") {
  const char* doc = R"({"name": "r", "children": [{"name": "A"}, {"name": "A"}]})";
  CHECK_THROWS_WITH_AS(parse_hierarchy(doc), doctest::Contains("A"), ValidationError);
}

TEST_CASE("multiple roots and malformed documents are rejected") {
  CHECK_THROWS_AS(parse_hierarchy(R"([{"name": "a"}, {"name": "b"}])"), ValidationError);
  CHECK_THROWS_AS(parse_hierarchy("not json at all {"), ValidationError);
}

TEST_CASE("bundled tree has 4 super-classes over 11 leaves") {
  const ClassTree t = parse_hierarchy(builtin_nucleus_tree());
  CHECK(t.leaf_count() == 11);
  CHECK(t.nodes[0].children.size() == 4);
  const ClassTree from_file = load_hierarchy(std::string(DATA_DIR) + "/nucleus_tree.json");
  CHECK(from_file.fingerprint == t.fingerprint);
}

TEST_CASE("serialize then parse preserves the fingerprint") {
  const ClassTree t = parse_hierarchy(kSmallTree);
  CHECK(parse_hierarchy(serialize_hierarchy(t)).fingerprint == t.fingerprint);
  const ClassTree big = parse_hierarchy(builtin_nucleus_tree());
  CHECK(parse_hierarchy(serialize_hierarchy(big)).fingerprint == big.fingerprint);
}

TEST_CASE("validate_cut materializes S_k in member order") {
  const ClassTree t = parse_hierarchy(kSmallTree);

  const LabelSet mixed = validate_cut(t, {"K", "c"});
  CHECK(mixed.size() == 2);
  CHECK(mixed.leaves_per_member[0] == std::vector<int>{0, 1});  // {a, b}
  CHECK(mixed.leaves_per_member[1] == std::vector<int>{2});     // {c}
  CHECK_FALSE(mixed.is_leaf_cut());
  CHECK(mixed.member_of_leaf == std::vector<int>{0, 0, 1});

  const LabelSet leaves = validate_cut(t, {"a", "c"});
  CHECK(leaves.is_leaf_cut());
  CHECK(leaves.leaves_per_member[0] == std::vector<int>{0});
  CHECK(leaves.leaves_per_member[1] == std::vector<int>{2});
  CHECK(leaves.member_of_leaf == std::vector<int>{0, -1, 1});  // b uncovered
}

TEST_CASE("cut validation errors name the problem") {
  const ClassTree t = parse_hierarchy(kSmallTree);
  CHECK_THROWS_WITH_AS(validate_cut(t, {"K", "a"}), doctest::Contains("descendant"),
                       ValidationError);
  CHECK_THROWS_AS(validate_cut(t, {"nope"}), ValidationError);
  CHECK_THROWS_AS(validate_cut(t, {}), ValidationError);
  CHECK_THROWS_AS(validate_cut(t, {"a", "a"}), ValidationError);
}

TEST_CASE("project_distribution sums leaf mass per member") {
  const ClassTree t = parse_hierarchy(kSmallTree);
  const LabelSet cut = validate_cut(t, {"K", "c"});

  Eigen::VectorXd probs(3);
  probs << 0.3, 0.2, 0.4;
  const Eigen::VectorXd out = project_distribution(t, cut, probs);
  CHECK(out.size() == 2);
  CHECK(out[0] == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(out[1] == 0.4);

  const LabelSet leaves = validate_cut(t, {"a", "b", "c"});
  CHECK(project_distribution(t, leaves, probs) == probs);

  CHECK(project_distribution(t, cut, Eigen::VectorXd::Zero(3)).isZero());
}

TEST_CASE("project_distribution rejects stale cuts and bad vectors") {
  const ClassTree t = parse_hierarchy(kSmallTree);
  const ClassTree other = parse_hierarchy(builtin_nucleus_tree());
  const LabelSet cut = validate_cut(other, {"epithelial"});
  CHECK_THROWS_AS(project_distribution(t, cut, Eigen::VectorXd::Zero(3)), ValidationError);

  const LabelSet ok = validate_cut(t, {"K"});
  CHECK_THROWS_AS(project_distribution(t, ok, Eigen::VectorXd::Zero(2)), ValidationError);
  Eigen::VectorXd neg(3);
  neg << -0.1, 0.2, 0.3;
  CHECK_THROWS_AS(project_distribution(t, ok, neg), ValidationError);
}

TEST_CASE("projection is linear") {
  const ClassTree t = parse_hierarchy(builtin_nucleus_tree());
  Rng rng(42);
  for (int trial = 0; trial < 50; ++trial) {
    const LabelSet cut = random_cut(t, rng);
    Eigen::VectorXd p(t.leaf_count()), q(t.leaf_count());
    for (int i = 0; i < t.leaf_count(); ++i) {
      p[i] = rng.next_double();
      q[i] = rng.next_double();
    }
    const Eigen::VectorXd lhs = project_distribution(t, cut, p + q);
    const Eigen::VectorXd rhs =
        project_distribution(t, cut, p) + project_distribution(t, cut, q);
    CHECK((lhs - rhs).cwiseAbs().maxCoeff() < 1e-12);
    CHECK(lhs.sum() <= p.sum() + q.sum() + 1e-12);
  }
}

TEST_CASE("project_label finds the covering member or none") {
  const ClassTree t = parse_hierarchy(kSmallTree);
  const LabelSet cut = validate_cut(t, {"K", "c"});
  CHECK(project_label(t, cut, t.find("a")) == 0);
  CHECK(project_label(t, cut, t.find("b")) == 0);
  CHECK(project_label(t, cut, t.find("c")) == 1);

  const LabelSet partial = validate_cut(t, {"K"});
  CHECK_FALSE(project_label(t, partial, t.find("c")).has_value());

  const LabelSet leaves = validate_cut(t, {"a", "c"});
  CHECK(project_label(t, leaves, t.find("a")) == 0);

  CHECK_THROWS_AS(project_label(t, cut, t.find("K")), ValidationError);
}

TEST_CASE("random cuts are antichains with disjoint leaf sets") {
  const ClassTree t = parse_hierarchy(builtin_nucleus_tree());
  Rng rng(7);
  for (int trial = 0; trial < 200; ++trial) {
    const LabelSet cut = random_cut(t, rng);
    REQUIRE(cut.size() >= 1);
    std::set<int> seen;
    for (const auto& leaves : cut.leaves_per_member) {
      for (int leaf : leaves) {
        CHECK(seen.insert(leaf).second);  // disjoint S_k
      }
    }
    for (int i = 0; i < cut.size(); ++i) {
      for (int j = 0; j < cut.size(); ++j) {
        if (i == j) continue;
        CHECK_FALSE(t.is_ancestor(cut.members[i], cut.members[j]));
      }
    }
  }
}
