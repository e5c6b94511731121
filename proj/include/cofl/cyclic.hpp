#pragma once

#include <optional>

#include "cofl/core.hpp"

namespace cofl {

// A cyclic term is a finite body plus a mapping for its frozen variables.
// Invariants (checked by `validate`): theta is total on the frozen variables
// of the body and of its own range, and no range value is a bare frozen
// variable. Unreachable bindings are permitted and removed by `gc`.
struct CyclicTerm {
  Term body;
  std::map<std::string, Term> theta;
};

inline CyclicTerm mk_cyclic(Term body, std::map<std::string, Term> theta = {}) {
  return CyclicTerm{std::move(body), std::move(theta)};
}

inline void validate(const CyclicTerm& t) {
  auto need = fvars_of(t.body);
  for (auto& [y, v] : t.theta) {
    (void)y;
    if (!v) throw std::logic_error("cyclic term: null binding");
    if (v->kind == Kind::FVar)
      throw std::logic_error("cyclic term: binding is a bare frozen variable");
    collect_fvars(v, need);
  }
  for (auto& y : need)
    if (!t.theta.count(y))
      throw std::logic_error("cyclic term: unbound frozen variable " + y);
}

// Frozen variables reachable from `start` through theta.
inline std::set<std::string> fvar_closure(const std::map<std::string, Term>& theta,
                                          std::set<std::string> start) {
  std::vector<std::string> work(start.begin(), start.end());
  while (!work.empty()) {
    std::string y = work.back();
    work.pop_back();
    auto it = theta.find(y);
    if (it == theta.end()) continue;
    for (auto& z : fvars_of(it->second))
      if (start.insert(z).second) work.push_back(z);
  }
  return start;
}

// Drops bindings not reachable from the body.
inline CyclicTerm gc(const CyclicTerm& t) {
  auto keep = fvar_closure(t.theta, fvars_of(t.body));
  if (keep.size() == t.theta.size()) return t;
  CyclicTerm r{t.body, {}};
  for (auto& y : keep) {
    auto it = t.theta.find(y);
    if (it != t.theta.end()) r.theta.emplace(*it);
  }
  return r;
}

inline std::set<std::string> free_vars(const CyclicTerm& t) { return vars_of(t.body); }
inline std::set<std::string> frozen_vars(const CyclicTerm& t) { return fvars_of(t.body); }

// All variables of body and reachable bindings; used for freshness decisions.
inline std::set<std::string> deep_vars(const CyclicTerm& t) {
  auto s = vars_of(t.body);
  for (auto& [y, v] : t.theta) {
    (void)y;
    collect_vars(v, s);
  }
  return s;
}

inline std::set<std::string> deep_fvars(const CyclicTerm& t) {
  auto s = fvars_of(t.body);
  for (auto& [y, v] : t.theta) {
    s.insert(y);
    collect_fvars(v, s);
  }
  return s;
}

inline bool is_base_form(const CyclicTerm& t) {
  auto body_vars = vars_of(t.body);
  for (auto& [y, v] : t.theta) {
    (void)y;
    for (auto& x : vars_of(v))
      if (!body_vars.count(x)) return false;
  }
  return t.body->kind != Kind::FVar;
}

// Applies theta to the body until the range introduces no variable absent
// from the body and the body is not a bare frozen variable. Each pass is the
// construction (theta(t), theta | FVar(theta(t))); at most |theta|+1 passes.
inline CyclicTerm normalize_base_form(const CyclicTerm& t0) {
  CyclicTerm t = gc(t0);
  size_t guard = t.theta.size() + 2;
  while (!is_base_form(t)) {
    if (guard-- == 0) throw std::logic_error("normalize_base_form: no fixpoint");
    t.body = subst_fvars(t.body, t.theta);
    t = gc(t);
  }
  return t;
}

// Decomposable form: body is not a frozen variable, and every direct child's
// theta slice is closed (the bindings of the child's frozen variables mention
// only frozen variables of that child).
inline bool is_decomposable(const CyclicTerm& t) {
  if (t.body->kind == Kind::FVar) return false;
  for (auto& c : t.body->args) {
    auto s = fvars_of(c);
    for (auto& y : s) {
      auto it = t.theta.find(y);
      if (it == t.theta.end()) continue;
      for (auto& z : fvars_of(it->second))
        if (!s.count(z)) return false;
    }
  }
  return true;
}

inline CyclicTerm normalize_decomposable(const CyclicTerm& t0) {
  CyclicTerm t = gc(t0);
  while (t.body->kind == Kind::FVar) {
    auto it = t.theta.find(t.body->name);
    if (it == t.theta.end()) throw std::logic_error("unbound frozen variable");
    t.body = it->second;
  }
  // Unfold, in the leftmost violating child, a frozen variable whose binding
  // mentions a frozen variable outside the child; each unfolding grows the
  // child's frozen set, so the per-child closure deficit strictly shrinks.
  for (;;) {
    bool changed = false;
    for (size_t i = 0; i < t.body->args.size() && !changed; ++i) {
      auto child = t.body->args[i];
      auto s = fvars_of(child);
      for (auto& y : s) {
        auto it = t.theta.find(y);
        if (it == t.theta.end()) continue;
        bool closed = true;
        for (auto& z : fvars_of(it->second))
          if (!s.count(z)) { closed = false; break; }
        if (!closed) {
          std::map<std::string, Term> one{{y, it->second}};
          auto n = std::make_shared<TermNode>(*t.body);
          n->args[i] = subst_fvars(child, one);
          t.body = n;
          changed = true;
          break;
        }
      }
    }
    if (!changed) break;
  }
  return gc(t);
}

// Root symbol plus child cyclic terms, each with its own theta slice.
// Errors on a lone (regular or frozen-after-normalization) variable body.
inline std::pair<Term, std::vector<CyclicTerm>> decompose(const CyclicTerm& t0) {
  CyclicTerm t = normalize_decomposable(t0);
  if (t.body->kind == Kind::Var)
    throw std::runtime_error("decompose: variable has no root symbol");
  std::vector<CyclicTerm> kids;
  for (auto& c : t.body->args) {
    CyclicTerm k{c, {}};
    for (auto& y : fvar_closure(t.theta, fvars_of(c))) {
      auto it = t.theta.find(y);
      if (it != t.theta.end()) k.theta.emplace(*it);
    }
    kids.push_back(std::move(k));
  }
  return {t.body, std::move(kids)};
}

// Resolves a term to its non-frozen form by unfolding theta bindings.
inline Term unfold(const Term& t, const std::map<std::string, Term>& theta) {
  Term c = t;
  size_t guard = theta.size() + 2;
  while (c->kind == Kind::FVar) {
    if (guard-- == 0) throw std::logic_error("frozen variable chain");
    auto it = theta.find(c->name);
    if (it == theta.end()) throw std::logic_error("unbound frozen variable " + c->name);
    c = it->second;
  }
  return c;
}

// Positions of length <= max_depth; frozen-variable unfolding consumes no
// depth, per pos(d(t1..tn), theta) with implicit unfolding.
inline std::set<Pos> positions(const CyclicTerm& t, int max_depth) {
  std::set<Pos> out;
  std::vector<std::pair<Term, Pos>> work{{t.body, {}}};
  while (!work.empty()) {
    auto [cur, p] = work.back();
    work.pop_back();
    cur = unfold(cur, t.theta);
    out.insert(p);
    if ((int)p.size() >= max_depth) continue;
    for (size_t i = 0; i < cur->args.size(); ++i) {
      Pos q = p;
      q.push_back((int)i + 1);
      work.emplace_back(cur->args[i], std::move(q));
    }
  }
  return out;
}

// Subterm at p with implicit unfolding; returns the slice with its reachable
// theta bindings, or nullopt when p is not a position of t.
inline std::optional<CyclicTerm> subterm(const CyclicTerm& t, const Pos& p) {
  Term cur = t.body;
  for (int step : p) {
    cur = unfold(cur, t.theta);
    if (step < 1 || (size_t)step > cur->args.size()) return std::nullopt;
    cur = cur->args[step - 1];
  }
  cur = unfold(cur, t.theta);
  CyclicTerm r{cur, {}};
  for (auto& y : fvar_closure(t.theta, fvars_of(cur))) {
    auto it = t.theta.find(y);
    if (it != t.theta.end()) r.theta.emplace(*it);
  }
  return r;
}

inline CyclicTerm rename_frozen(const CyclicTerm& t,
                                const std::map<std::string, std::string>& f) {
  auto all = deep_fvars(t);
  std::set<std::string> targets;
  for (auto& [from, to] : f) {
    if (!targets.insert(to).second)
      throw std::runtime_error("frozen renaming: duplicate target " + to);
    if (all.count(to) && !f.count(to))
      throw std::runtime_error("frozen renaming: target collides: " + to);
    (void)from;
  }
  std::map<std::string, Term> m;
  for (auto& [from, to] : f) m.emplace(from, mk_fvar(to));
  CyclicTerm r{subst_fvars(t.body, m), {}};
  for (auto& [y, v] : t.theta) {
    auto it = f.find(y);
    r.theta.emplace(it == f.end() ? y : it->second, subst_fvars(v, m));
  }
  return r;
}

// Renames b's frozen variables away from a's; returns the renamed b.
inline CyclicTerm standardize_apart(const CyclicTerm& a, CyclicTerm b,
                                    NameSupply& names) {
  auto fa = deep_fvars(a);
  std::map<std::string, std::string> ren;
  for (auto& y : deep_fvars(b))
    if (fa.count(y)) ren[y] = names.fresh(y);
  if (ren.empty()) return b;
  return rename_frozen(b, ren);
}

// Replaces all frozen variables of t with fresh names.
inline CyclicTerm refresh_frozen(const CyclicTerm& t, NameSupply& names) {
  std::map<std::string, std::string> ren;
  for (auto& y : deep_fvars(t)) ren[y] = names.fresh("y");
  if (ren.empty()) return t;
  return rename_frozen(t, ren);
}

// Fixed-position substitution: (t,theta)[(u,theta_u)]_p with the path
// materialized through frozen variables; thetas are unioned and restricted.
inline CyclicTerm subst_at(const CyclicTerm& t, const CyclicTerm& u0, const Pos& p,
                           NameSupply& names) {
  CyclicTerm u = standardize_apart(t, u0, names);
  std::function<Term(Term, size_t)> go = [&](Term cur, size_t i) -> Term {
    if (i == p.size()) return u.body;
    cur = unfold(cur, t.theta);
    int step = p[i];
    if (step < 1 || (size_t)step > cur->args.size())
      throw std::runtime_error("subst_at: invalid position");
    auto n = std::make_shared<TermNode>(*cur);
    n->args[step - 1] = go(n->args[step - 1], i + 1);
    return n;
  };
  CyclicTerm r{go(t.body, 0), t.theta};
  for (auto& [y, v] : u.theta) r.theta[y] = v;
  return gc(r);
}

// Equation-system view: bound variables are regular, cycles go through them.
struct EquationSystem {
  std::string root;
  std::map<std::string, Term> eqs;
};

// Frozen variables become fresh regular variables; a root variable is added
// unless the body already is a single frozen variable.
inline EquationSystem to_equations(const CyclicTerm& t0, NameSupply& names) {
  CyclicTerm t = gc(t0);
  std::map<std::string, Term> f2v;
  std::map<std::string, std::string> f2n;
  for (auto& [y, v] : t.theta) {
    (void)v;
    std::string n = names.fresh("x");
    f2n[y] = n;
    f2v[y] = mk_var(n);
  }
  EquationSystem es;
  if (t.body->kind == Kind::FVar) {
    es.root = f2n.at(t.body->name);
  } else {
    es.root = names.fresh("x");
    es.eqs[es.root] = subst_fvars(t.body, f2v);
  }
  for (auto& [y, v] : t.theta) es.eqs[f2n.at(y)] = subst_fvars(v, f2v);
  return es;
}

// Bound variables become frozen; rejects non-contractive systems (a bound
// variable equal to a bare bound-variable chain denotes no regular term).
inline CyclicTerm from_equations(const EquationSystem& es) {
  for (auto& [x, rhs] : es.eqs) {
    Term r = rhs;
    std::set<std::string> seen{x};
    while (r->kind == Kind::Var && es.eqs.count(r->name)) {
      if (!seen.insert(r->name).second)
        throw std::runtime_error("from_equations: non-contractive equation for " + x);
      r = es.eqs.at(r->name);
    }
    if (r->kind == Kind::Var && r->name == x)
      throw std::runtime_error("from_equations: non-contractive equation for " + x);
  }
  std::map<std::string, Term> b2f;
  for (auto& [x, rhs] : es.eqs) {
    (void)rhs;
    b2f[x] = mk_fvar(x);
  }
  CyclicTerm t;
  std::map<std::string, Term> theta;
  for (auto& [x, rhs] : es.eqs) {
    Term v = subst_vars(rhs, b2f);
    // Collapse chains so no binding is a bare frozen variable.
    while (v->kind == Kind::FVar) v = subst_vars(es.eqs.at(v->name), b2f);
    theta[x] = v;
  }
  t.theta = std::move(theta);
  if (es.eqs.count(es.root)) {
    t.body = t.theta.at(es.root);
  } else {
    t.body = mk_var(es.root);
  }
  return gc(t);
}

}  // namespace cofl
