#pragma once

// Typed directed object graphs and the block-type map that ties relations to
// shared dynamics blocks.
//
// sigma(i, j) is the type of the relation j -> i (receiver i, sender j). Type 0
// means "no relation" and always maps to a zero block; types 1..h index the
// catalogue. Every object carries a self relation, so sigma(i, i) > 0.

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "ckpm/envs.hpp"
#include "ckpm/lattice.hpp"
#include "ckpm/matrix.hpp"

namespace ckpm {

struct Relation {
  std::size_t sender = 0;
  std::size_t receiver = 0;
  int type = 0;  // catalogue index in [1, h]

  friend bool operator==(const Relation&, const Relation&) = default;
};

struct RelationCatalog {
  std::string family;
  int h = 0;
  std::vector<std::string> names;  // names[c - 1] labels type c
  int num_object_types = 0;
};

RelationCatalog rope_catalog();
RelationCatalog lattice_catalog();
RelationCatalog complete_catalog();

class SceneGraph {
 public:
  SceneGraph() = default;
  // Checks every structural invariant; throws ConfigError on violation.
  SceneGraph(int h, int num_object_types, std::vector<int> object_types,
             std::vector<Relation> relations);

  std::size_t num_objects() const noexcept { return object_types_.size(); }
  int h() const noexcept { return h_; }
  int num_object_types() const noexcept { return num_object_types_; }
  const std::vector<int>& object_types() const noexcept { return object_types_; }
  const std::vector<Relation>& relations() const noexcept { return relations_; }
  std::size_t pairwise_relation_count() const;

  int sigma(std::size_t receiver, std::size_t sender) const {
    return sigma_[receiver * num_objects() + sender];
  }
  const std::vector<int>& sigma_flat() const noexcept { return sigma_; }

  // N x num_object_types one-hot attributes.
  DenseMatrix object_attributes() const;
  // |R| x h one-hot relation attributes (column c-1 for type c).
  DenseMatrix relation_attributes() const;

  friend bool operator==(const SceneGraph&, const SceneGraph&) = default;

 private:
  int h_ = 0;
  int num_object_types_ = 0;
  std::vector<int> object_types_;
  std::vector<Relation> relations_;
  std::vector<int> sigma_;
};

// Chain of N >= 3 masses, mass 0 is the pinned top. One- and two-hop
// neighbours are related in both directions.
SceneGraph build_rope_graph(int num_masses);
// Quads are related when they share an edge or a corner; the relation type
// encodes the sender's direction and the receiver's kind.
SceneGraph build_lattice_graph(const LatticeLayout& layout);
// Every pair related by a single shared type (spring-ball systems).
SceneGraph build_complete_graph(int num_objects);
// Graph matching the objects of an environment instance.
SceneGraph build_graph(const Environment& env);

// perm[i] is the new index of object i.
SceneGraph permute(const SceneGraph& graph, std::span<const std::size_t> perm);
std::vector<std::size_t> inverse_permutation(std::span<const std::size_t> perm);

void to_json(nlohmann::json& j, const SceneGraph& g);
void from_json(const nlohmann::json& j, SceneGraph& g);

}  // namespace ckpm
