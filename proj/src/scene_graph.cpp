#include "ckpm/scene_graph.hpp"

#include <algorithm>
#include <map>
#include <queue>
#include <set>

#include "ckpm/errors.hpp"

namespace ckpm {

namespace {

constexpr const char* kDirectionNames[8] = {"up",      "down",      "left",     "right",
                                            "up-left", "down-left", "up-right", "down-right"};

// Index into kDirectionNames of the sender's offset relative to the receiver,
// or -1 when the cells are not neighbours.
int direction_index(int dc, int dr) {
  if (dc == 0 && dr == 1) return 0;
  if (dc == 0 && dr == -1) return 1;
  if (dc == -1 && dr == 0) return 2;
  if (dc == 1 && dr == 0) return 3;
  if (dc == -1 && dr == 1) return 4;
  if (dc == -1 && dr == -1) return 5;
  if (dc == 1 && dr == 1) return 6;
  if (dc == 1 && dr == -1) return 7;
  return -1;
}

int rope_pair_type(bool sender_top, bool receiver_top, int hop) {
  return 3 + ((sender_top ? 0 : 1) * 2 + (receiver_top ? 0 : 1)) * 2 + (hop - 1);
}

}  // namespace

RelationCatalog rope_catalog() {
  RelationCatalog c{"rope", 10, {"self:top", "self:non-top"}, 2};
  for (const char* s : {"top", "non-top"}) {
    for (const char* r : {"top", "non-top"}) {
      for (int hop = 1; hop <= 2; ++hop) {
        c.names.push_back(std::string(s) + "->" + r + "/" + std::to_string(hop) + "-hop");
      }
    }
  }
  return c;
}

RelationCatalog lattice_catalog() {
  RelationCatalog c{"lattice", kQuadKindCount + 8 * kQuadKindCount, {}, kQuadKindCount};
  for (int k = 0; k < kQuadKindCount; ++k) {
    c.names.push_back("self:" + std::string(to_string(static_cast<QuadKind>(k))));
  }
  for (const char* d : kDirectionNames) {
    for (int k = 0; k < kQuadKindCount; ++k) {
      c.names.push_back(std::string(d) + "->" + std::string(to_string(static_cast<QuadKind>(k))));
    }
  }
  return c;
}

RelationCatalog complete_catalog() { return {"complete", 2, {"self", "pair"}, 1}; }

SceneGraph::SceneGraph(int h, int num_object_types, std::vector<int> object_types,
                       std::vector<Relation> relations)
    : h_(h),
      num_object_types_(num_object_types),
      object_types_(std::move(object_types)),
      relations_(std::move(relations)) {
  const std::size_t n = object_types_.size();
  if (h_ < 1) throw ConfigError("scene graph needs at least one relation type");
  for (int t : object_types_) {
    if (t < 0 || t >= num_object_types_) throw ConfigError("object type out of range");
  }
  sigma_.assign(n * n, 0);
  for (const Relation& r : relations_) {
    if (r.sender >= n || r.receiver >= n) throw ConfigError("relation endpoint out of range");
    if (r.type < 1 || r.type > h_) {
      throw ConfigError("relation type " + std::to_string(r.type) + " outside [1, " +
                        std::to_string(h_) + "]");
    }
    int& slot = sigma_[r.receiver * n + r.sender];
    if (slot != 0) throw ConfigError("duplicate relation between the same ordered pair");
    slot = r.type;
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (sigma_[i * n + i] == 0) {
      throw ConfigError("object " + std::to_string(i) + " has no self relation");
    }
  }
}

std::size_t SceneGraph::pairwise_relation_count() const {
  return static_cast<std::size_t>(std::count_if(relations_.begin(), relations_.end(),
                                                [](const Relation& r) {
                                                  return r.sender != r.receiver;
                                                }));
}

DenseMatrix SceneGraph::object_attributes() const {
  DenseMatrix a(num_objects(), static_cast<std::size_t>(num_object_types_));
  for (std::size_t i = 0; i < num_objects(); ++i) {
    a(i, static_cast<std::size_t>(object_types_[i])) = 1.0;
  }
  return a;
}

DenseMatrix SceneGraph::relation_attributes() const {
  DenseMatrix a(relations_.size(), static_cast<std::size_t>(h_));
  for (std::size_t k = 0; k < relations_.size(); ++k) {
    a(k, static_cast<std::size_t>(relations_[k].type - 1)) = 1.0;
  }
  return a;
}

SceneGraph build_rope_graph(int num_masses) {
  if (num_masses < 3) {
    throw ConfigError("rope graph needs at least 3 masses, got " + std::to_string(num_masses));
  }
  const auto n = static_cast<std::size_t>(num_masses);
  std::vector<int> types(n, 1);
  types[0] = 0;
  std::vector<Relation> rel;
  for (std::size_t i = 0; i < n; ++i) rel.push_back({i, i, i == 0 ? 1 : 2});
  for (std::size_t v = 0; v < n; ++v) {
    for (std::size_t u = 0; u < n; ++u) {
      const std::size_t hop = u > v ? u - v : v - u;
      if (hop == 1 || hop == 2) {
        rel.push_back({u, v, rope_pair_type(u == 0, v == 0, static_cast<int>(hop))});
      }
    }
  }
  const RelationCatalog cat = rope_catalog();
  return SceneGraph(cat.h, cat.num_object_types, std::move(types), std::move(rel));
}

SceneGraph build_lattice_graph(const LatticeLayout& layout) {
  const std::size_t n = layout.size();
  if (n == 0) throw ConfigError("lattice layout is empty");
  std::map<std::pair<int, int>, std::size_t> cell_index;
  for (std::size_t q = 0; q < n; ++q) {
    if (!cell_index.emplace(std::pair{layout[q].col, layout[q].row}, q).second) {
      throw ConfigError("lattice layout has duplicate cells");
    }
  }
  // Breadth-first search over point/edge adjacency.
  std::vector<bool> seen(n, false);
  std::queue<std::size_t> frontier;
  frontier.push(0);
  seen[0] = true;
  std::size_t reached = 1;
  while (!frontier.empty()) {
    const std::size_t q = frontier.front();
    frontier.pop();
    for (int dc = -1; dc <= 1; ++dc) {
      for (int dr = -1; dr <= 1; ++dr) {
        auto it = cell_index.find({layout[q].col + dc, layout[q].row + dr});
        if (it != cell_index.end() && !seen[it->second]) {
          seen[it->second] = true;
          ++reached;
          frontier.push(it->second);
        }
      }
    }
  }
  if (reached != n) throw ConfigError("lattice layout is not connected");

  std::vector<int> types(n);
  std::vector<Relation> rel;
  for (std::size_t q = 0; q < n; ++q) {
    types[q] = static_cast<int>(layout[q].kind);
    rel.push_back({q, q, 1 + types[q]});
  }
  for (std::size_t v = 0; v < n; ++v) {
    for (std::size_t u = 0; u < n; ++u) {
      if (u == v) continue;
      const int d = direction_index(layout[u].col - layout[v].col, layout[u].row - layout[v].row);
      if (d < 0) continue;
      rel.push_back({u, v, 1 + kQuadKindCount + d * kQuadKindCount + types[v]});
    }
  }
  const RelationCatalog cat = lattice_catalog();
  return SceneGraph(cat.h, cat.num_object_types, std::move(types), std::move(rel));
}

SceneGraph build_complete_graph(int num_objects) {
  if (num_objects < 1) throw ConfigError("complete graph needs at least one object");
  const auto n = static_cast<std::size_t>(num_objects);
  std::vector<Relation> rel;
  for (std::size_t i = 0; i < n; ++i) rel.push_back({i, i, 1});
  for (std::size_t v = 0; v < n; ++v) {
    for (std::size_t u = 0; u < n; ++u) {
      if (u != v) rel.push_back({u, v, 2});
    }
  }
  return SceneGraph(2, 1, std::vector<int>(n, 0), std::move(rel));
}

SceneGraph build_graph(const Environment& env) {
  switch (env.config().env_kind) {
    case EnvKind::SpringBalls: return build_complete_graph(env.config().num_objects);
    case EnvKind::Rope2D: return build_rope_graph(env.config().num_objects);
    case EnvKind::SoftLattice2D: return build_lattice_graph(env.layout());
  }
  throw ConfigError("unsupported environment");
}

std::vector<std::size_t> inverse_permutation(std::span<const std::size_t> perm) {
  std::vector<std::size_t> inv(perm.size(), perm.size());
  for (std::size_t i = 0; i < perm.size(); ++i) {
    if (perm[i] >= perm.size() || inv[perm[i]] != perm.size()) {
      throw ArgumentError("permutation is not a bijection");
    }
    inv[perm[i]] = i;
  }
  return inv;
}

SceneGraph permute(const SceneGraph& graph, std::span<const std::size_t> perm) {
  const std::size_t n = graph.num_objects();
  if (perm.size() != n) {
    throw ArgumentError("permutation has " + std::to_string(perm.size()) + " entries for " +
                        std::to_string(n) + " objects");
  }
  inverse_permutation(perm);
  std::vector<int> types(n);
  for (std::size_t i = 0; i < n; ++i) types[perm[i]] = graph.object_types()[i];
  std::vector<Relation> rel;
  rel.reserve(graph.relations().size());
  for (const Relation& r : graph.relations()) rel.push_back({perm[r.sender], perm[r.receiver], r.type});
  return SceneGraph(graph.h(), graph.num_object_types(), std::move(types), std::move(rel));
}

void to_json(nlohmann::json& j, const SceneGraph& g) {
  const std::size_t n = g.num_objects();
  nlohmann::json types = nlohmann::json::array();
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<int> onehot(static_cast<std::size_t>(g.num_object_types()), 0);
    onehot[static_cast<std::size_t>(g.object_types()[i])] = 1;
    types.push_back(onehot);
  }
  nlohmann::json rel = nlohmann::json::array();
  for (const Relation& r : g.relations()) rel.push_back({r.sender, r.receiver, r.type});
  nlohmann::json sigma = nlohmann::json::array();
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<int> row(n);
    for (std::size_t k = 0; k < n; ++k) row[k] = g.sigma(i, k);
    sigma.push_back(row);
  }
  j = nlohmann::json{{"h", g.h()}, {"object_types", types}, {"relations", rel}, {"sigma", sigma}};
}

void from_json(const nlohmann::json& j, SceneGraph& g) {
  try {
    std::vector<int> types;
    int num_types = 0;
    for (const auto& onehot : j.at("object_types")) {
      const auto v = onehot.get<std::vector<int>>();
      num_types = static_cast<int>(v.size());
      const auto it = std::find(v.begin(), v.end(), 1);
      if (it == v.end()) throw ConfigError("object type vector is not one-hot");
      types.push_back(static_cast<int>(it - v.begin()));
    }
    std::vector<Relation> rel;
    for (const auto& r : j.at("relations")) {
      rel.push_back({r.at(0).get<std::size_t>(), r.at(1).get<std::size_t>(), r.at(2).get<int>()});
    }
    int h = j.value("h", 0);
    for (const Relation& r : rel) h = std::max(h, r.type);
    g = SceneGraph(h, num_types, std::move(types), std::move(rel));
    if (j.contains("sigma")) {
      const auto sigma = j.at("sigma").get<std::vector<std::vector<int>>>();
      for (std::size_t i = 0; i < sigma.size(); ++i) {
        for (std::size_t k = 0; k < sigma[i].size(); ++k) {
          if (sigma[i][k] != g.sigma(i, k)) throw ConfigError("sigma disagrees with relations");
        }
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("invalid SceneGraph JSON: ") + e.what());
  }
}

}  // namespace ckpm
