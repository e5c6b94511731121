#pragma once

#include <algorithm>

#include "cofl/unify.hpp"

namespace cofl {

// A rewrite rule f(p1,...,pn) = rhs. Patterns are linear constructor terms;
// index preserves source order so nondeterministic leaves fire in file order.
struct RewriteRule {
  Term lhs;
  Term rhs;
  int index = 0;
};

// head ~> {t1, ..., tk}: admissible values assumed for a circularly recurring
// call. Anonymous variables were given unique underscore names at parse time.
struct GuessRule {
  Term head;
  std::vector<Term> results;
};

struct DefTree;
using DefTreePtr = std::shared_ptr<const DefTree>;

// Branch nodes refine `pattern` at `occurrence` with the children's distinct
// constructors; leaves hold the rule multiset matching their pattern. A node
// is a leaf iff leaf_rules is nonempty.
struct DefTree {
  Term pattern;
  Pos occurrence;
  std::vector<DefTreePtr> children;
  std::vector<RewriteRule> leaf_rules;

  bool is_leaf() const { return !leaf_rules.empty(); }
};

struct Program {
  std::shared_ptr<Signature> sig;
  std::vector<RewriteRule> rules;
  std::vector<GuessRule> guesses;
  std::map<const Symbol*, DefTreePtr> trees;
  std::set<const Symbol*> guess_heads;
  // Lifted right sections: symbol -> (operator name, right operand). Used to
  // render and to canonicalize terms like (==final).
  std::map<const Symbol*, std::pair<std::string, Term>> sections;
  // Dedup for lambda lifting so the same source lambda reuses one symbol.
  std::map<std::string, const Symbol*> lift_memo;
};

// Plain syntactic matching; patterns are finite so no unfolding is needed.
inline bool match_pattern(const Term& pat, const Term& t,
                          std::map<std::string, Term>& out) {
  if (is_var(pat)) {
    auto [it, inserted] = out.emplace(pat->name, t);
    return inserted || term_eq(it->second, t);
  }
  if (!same_root(pat, t)) return false;
  for (size_t i = 0; i < pat->args.size(); ++i)
    if (!match_pattern(pat->args[i], t->args[i], out)) return false;
  return true;
}

// lhs is a variant of pattern: an instance whose image is a variable renaming.
inline bool is_variant(const Term& pattern, const Term& lhs) {
  std::map<std::string, Term> m;
  if (!match_pattern(pattern, lhs, m)) return false;
  std::set<std::string> used;
  for (auto& [x, v] : m) {
    (void)x;
    if (!is_var(v)) return false;
    if (!used.insert(v->name).second) return false;
  }
  return true;
}

namespace detail {

inline void var_positions(const Term& t, Pos& cur, std::vector<Pos>& out) {
  if (is_var(t)) {
    out.push_back(cur);
    return;
  }
  for (size_t i = 0; i < t->args.size(); ++i) {
    cur.push_back((int)i + 1);
    var_positions(t->args[i], cur, out);
    cur.pop_back();
  }
}

inline DefTreePtr build_tree_at(const Term& pattern,
                                std::vector<RewriteRule> rules,
                                NameSupply& names, const std::string& fname) {
  auto node = std::make_shared<DefTree>();
  node->pattern = pattern;

  bool all_variant = true;
  for (auto& r : rules)
    if (!is_variant(pattern, r.lhs)) {
      all_variant = false;
      break;
    }
  if (all_variant) {
    std::sort(rules.begin(), rules.end(),
              [](const RewriteRule& a, const RewriteRule& b) {
                return a.index < b.index;
              });
    node->leaf_rules = std::move(rules);
    return node;
  }

  std::vector<Pos> vps;
  Pos cur;
  var_positions(pattern, cur, vps);
  for (auto& p : vps) {
    bool demanded = true;
    for (auto& r : rules) {
      Term s = subterm_at(r.lhs, p);
      if (!s || is_var(s)) {
        demanded = false;
        break;
      }
    }
    if (!demanded) continue;

    // Group rules by the root at p, first appearance order.
    std::vector<std::pair<Term, std::vector<RewriteRule>>> groups;
    for (auto& r : rules) {
      Term s = subterm_at(r.lhs, p);
      bool found = false;
      for (auto& g : groups)
        if (same_root(g.first, s)) {
          g.second.push_back(r);
          found = true;
          break;
        }
      if (!found) groups.push_back({s, {r}});
    }
    node->occurrence = p;
    for (auto& g : groups) {
      Term rep = g.first;
      Term refined;
      if (rep->kind == Kind::Int) {
        refined = rep;
      } else {
        std::vector<Term> zs;
        for (size_t i = 0; i < rep->args.size(); ++i)
          zs.push_back(mk_var(names.fresh("z")));
        refined = mk_app(rep->sym, zs);
      }
      Term child_pat = replace_at(pattern, p, refined);
      node->children.push_back(
          build_tree_at(child_pat, std::move(g.second), names, fname));
    }
    return node;
  }

  // No demanded position: report a conflicting pair.
  for (auto& p : vps) {
    const RewriteRule* with_ctor = nullptr;
    const RewriteRule* with_var = nullptr;
    for (auto& r : rules) {
      Term s = subterm_at(r.lhs, p);
      if (s && is_var(s))
        with_var = &r;
      else if (s)
        with_ctor = &r;
    }
    if (with_ctor && with_var)
      throw std::runtime_error(
          "rules for " + fname + " are not inductively sequential: `" +
          to_string(with_ctor->lhs) + "` overlaps `" + to_string(with_var->lhs) +
          "` at position " + pos_to_string(p));
  }
  throw std::runtime_error("rules for " + fname +
                           " are not inductively sequential");
}

}  // namespace detail

inline DefTreePtr build_definitional_tree(const Symbol* f,
                                          std::vector<RewriteRule> rules,
                                          NameSupply& names) {
  if (rules.empty())
    throw std::runtime_error("no rules for function " + f->name);
  std::vector<Term> xs;
  for (int i = 0; i < f->arity; ++i) xs.push_back(mk_var(names.fresh("z")));
  Term pattern = mk_app(f, xs);
  for (auto& r : rules) {
    if (r.lhs->sym != f || (int)r.lhs->args.size() != f->arity)
      throw std::runtime_error("rule head arity mismatch for " + f->name);
  }
  return detail::build_tree_at(pattern, std::move(rules), names, f->name);
}

// Guesses for a function-rooted cyclic term: for each guess rule whose
// (freshly renamed) head unifies with t, the instantiated result templates.
// Anonymous template variables become distinct fresh variables per guess.
inline std::vector<CyclicTerm> match_guess(const Program& p, const CyclicTerm& t,
                                           NameSupply& names) {
  std::vector<CyclicTerm> out;
  if (t.body->kind != Kind::App || !t.body->sym->is_function) return out;
  for (auto& g : p.guesses) {
    if (g.head->sym != t.body->sym ||
        g.head->args.size() != t.body->args.size())
      continue;
    std::map<std::string, Term> ren;
    for (auto& v : vars_of(g.head)) ren[v] = mk_var(names.fresh(v));
    Term head = subst_vars(g.head, ren);
    auto u = unify(CyclicTerm{head, {}}, t, names);
    if (!u) continue;
    for (auto& tmpl : g.results) {
      Term body = subst_vars(subst_vars(tmpl, ren), u->sigma);
      std::map<std::string, Term> fresh;
      for (auto& v : vars_of(subst_vars(tmpl, ren)))
        if (!u->sigma.count(v)) fresh[v] = mk_var(names.fresh("x"));
      body = subst_vars(body, fresh);
      CyclicTerm res{body, {}};
      for (auto& y : fvar_closure(u->omega, fvars_of(body))) {
        auto it = u->omega.find(y);
        if (it != u->omega.end()) res.theta.emplace(*it);
      }
      out.push_back(gc(res));
    }
  }
  return out;
}

}  // namespace cofl
