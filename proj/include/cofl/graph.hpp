#pragma once

#include <optional>

#include "cofl/pretty.hpp"

namespace cofl {

// Labelled graph of a cyclic term: vertices are the structurally distinct
// subterms of body and theta range with frozen variables resolved away; edge
// i leads to the i-th child, following theta when the child is frozen.
struct TermGraph {
  std::vector<Term> verts;
  std::map<Term, int, TermLess> index;
  std::vector<std::vector<int>> kids;
  std::vector<std::set<std::string>> labels;
  int root = -1;
};

inline TermGraph build_graph(const CyclicTerm& t0) {
  CyclicTerm t = gc(t0);
  TermGraph g;
  auto resolve = [&](const Term& u) { return unfold(u, t.theta); };
  std::function<int(const Term&)> add = [&](const Term& u0) -> int {
    Term u = resolve(u0);
    auto it = g.index.find(u);
    if (it != g.index.end()) return it->second;
    int id = (int)g.verts.size();
    g.verts.push_back(u);
    g.index.emplace(u, id);
    g.kids.emplace_back();
    g.labels.emplace_back();
    g.kids[id].resize(u->args.size(), -1);
    for (size_t i = 0; i < u->args.size(); ++i) {
      int k = add(u->args[i]);
      g.kids[id][i] = k;
    }
    return id;
  };
  g.root = add(t.body);
  for (auto& [y, v] : t.theta) {
    auto it = g.index.find(v);
    if (it != g.index.end()) g.labels[it->second].insert(y);
  }
  return g;
}

struct TermPairLess {
  bool operator()(const std::pair<Term, Term>& a,
                  const std::pair<Term, Term>& b) const {
    int c = term_cmp(a.first, b.first);
    if (c != 0) return c < 0;
    return term_cmp(a.second, b.second) < 0;
  }
};

using Bisimulation = std::set<std::pair<Term, Term>, TermPairLess>;

// Greatest bisimulation between two graphs, as a fixpoint over the
// symbol-compatible pairs. Labels are ignored; edge conditions in both
// directions reduce to childwise relatedness because children are total and
// edge labels are child indices. Quadratic, fine at term-graph sizes.
inline std::optional<Bisimulation> bisimilar(const TermGraph& g1, int n1,
                                             const TermGraph& g2, int n2) {
  size_t v1 = g1.verts.size(), v2 = g2.verts.size();
  std::vector<char> rel(v1 * v2, 0);
  auto at = [&](size_t i, size_t j) -> char& { return rel[i * v2 + j]; };
  for (size_t i = 0; i < v1; ++i)
    for (size_t j = 0; j < v2; ++j)
      at(i, j) = same_root(g1.verts[i], g2.verts[j]) ? 1 : 0;
  for (bool changed = true; changed;) {
    changed = false;
    for (size_t i = 0; i < v1; ++i)
      for (size_t j = 0; j < v2; ++j) {
        if (!at(i, j)) continue;
        for (size_t k = 0; k < g1.kids[i].size(); ++k)
          if (!at(g1.kids[i][k], g2.kids[j][k])) {
            at(i, j) = 0;
            changed = true;
            break;
          }
      }
  }
  if (!at(n1, n2)) return std::nullopt;
  Bisimulation z;
  for (size_t i = 0; i < v1; ++i)
    for (size_t j = 0; j < v2; ++j)
      if (at(i, j)) z.emplace(g1.verts[i], g2.verts[j]);
  return z;
}

inline bool equivalent(const CyclicTerm& a, const CyclicTerm& b) {
  TermGraph ga = build_graph(a);
  TermGraph gb = build_graph(b);
  return bisimilar(ga, ga.root, gb, gb.root).has_value();
}

// Debug rendering in DOT.
inline std::string graph_dot(const TermGraph& g, const std::string& name = "term") {
  std::ostringstream os;
  os << "digraph \"" << name << "\" {\n";
  for (size_t i = 0; i < g.verts.size(); ++i) {
    os << "  n" << i << " [label=\"" << to_string(g.verts[i]);
    if (!g.labels[i].empty()) {
      os << "\\n{";
      bool first = true;
      for (auto& y : g.labels[i]) {
        if (!first) os << ",";
        first = false;
        os << y;
      }
      os << "}";
    }
    os << "\"";
    if ((int)i == g.root) os << " penwidth=2";
    os << "];\n";
    for (size_t k = 0; k < g.kids[i].size(); ++k)
      os << "  n" << i << " -> n" << g.kids[i][k] << " [label=\"" << k + 1
         << "\"];\n";
  }
  os << "}\n";
  return os.str();
}

}  // namespace cofl
