#pragma once

#include "cofl/pretty.hpp"

namespace cofl {

// A substitution is a pair (sigma, omega): sigma maps regular variables to
// terms over X and Y, omega supplies bindings for the frozen variables that
// sigma introduces. Identity outside the stored points.
struct Subst {
  std::map<std::string, Term> sigma;
  std::map<std::string, Term> omega;

  bool empty() const { return sigma.empty() && omega.empty(); }
};

// Frozen variables a substitution must not touch: the term's own occurrences
// plus everything its theta already defines.
inline std::set<std::string> occupied_fvars(const CyclicTerm& t) {
  auto s = fvars_of(t.body);
  for (auto& [y, v] : t.theta) {
    s.insert(y);
    collect_fvars(v, s);
  }
  return s;
}

inline bool is_safe(const Subst& s, const CyclicTerm& t) {
  auto occ = occupied_fvars(t);
  for (auto& [y, v] : s.omega) {
    (void)v;
    if (occ.count(y)) return false;
  }
  return true;
}

// Proper: every frozen variable reachable from sigma(body) through
// sigma(theta) and omega has a binding there.
inline bool is_proper(const Subst& s, const CyclicTerm& t) {
  std::map<std::string, Term> combined;
  for (auto& [y, v] : t.theta) combined[y] = subst_vars(v, s.sigma);
  for (auto& [y, v] : s.omega) combined[y] = v;
  Term body = subst_vars(t.body, s.sigma);
  auto reach = fvar_closure(combined, fvars_of(body));
  for (auto& y : reach)
    if (!combined.count(y)) return false;
  return true;
}

// (sigma(t), (sigma(theta) ∪ omega) | reachable). Bindings that become bare
// frozen variables are chain-collapsed to keep the codomain invariant.
inline CyclicTerm apply(const Subst& s, const CyclicTerm& t) {
  if (!is_safe(s, t))
    throw std::runtime_error("substitution not safe for term " + to_string(t));
  if (!is_proper(s, t))
    throw std::runtime_error("substitution not proper for term " + to_string(t));
  if (s.empty()) return t;
  CyclicTerm r;
  r.body = subst_vars(t.body, s.sigma);
  for (auto& [y, v] : t.theta) r.theta[y] = subst_vars(v, s.sigma);
  for (auto& [y, v] : s.omega) r.theta[y] = v;
  for (auto& [y, v] : r.theta) {
    if (v->kind != Kind::FVar) continue;
    Term c = v;
    std::set<std::string> seen{y};
    while (c->kind == Kind::FVar) {
      if (!seen.insert(c->name).second)
        throw std::runtime_error("substitution creates a frozen cycle at " + y);
      auto it = r.theta.find(c->name);
      if (it == r.theta.end())
        throw std::runtime_error("substitution leaves " + c->name + " unbound");
      c = it->second;
    }
    r.theta[y] = c;
  }
  return gc(r);
}

// Renames the substitution's frozen variables freshly when they would clash
// with t, then applies; the engine's standardize-then-apply convenience.
inline CyclicTerm apply_renamed(const Subst& s, const CyclicTerm& t,
                                NameSupply& names);

inline Subst compose(const Subst& outer, const Subst& inner) {
  for (auto& [y, v] : inner.omega) {
    (void)v;
    if (outer.omega.count(y))
      throw std::runtime_error("compose: overlapping frozen domain at " + y);
  }
  Subst r;
  for (auto& [x, v] : inner.sigma) r.sigma[x] = subst_vars(v, outer.sigma);
  for (auto& [x, v] : outer.sigma)
    if (!r.sigma.count(x)) r.sigma[x] = v;
  r.omega = inner.omega;
  for (auto& [y, v] : outer.omega) r.omega[y] = v;
  return r;
}

inline Subst rename_frozen_subst(const Subst& s,
                                 const std::map<std::string, std::string>& f) {
  std::set<std::string> targets;
  for (auto& [from, to] : f) {
    (void)from;
    if (!targets.insert(to).second)
      throw std::runtime_error("frozen renaming: duplicate target " + to);
    if (s.omega.count(to) && !f.count(to))
      throw std::runtime_error("frozen renaming: target in omega domain: " + to);
  }
  std::map<std::string, Term> m;
  for (auto& [from, to] : f) m.emplace(from, mk_fvar(to));
  Subst r;
  for (auto& [x, v] : s.sigma) r.sigma[x] = subst_fvars(v, m);
  for (auto& [y, v] : s.omega) {
    auto it = f.find(y);
    r.omega.emplace(it == f.end() ? y : it->second, subst_fvars(v, m));
  }
  return r;
}

inline CyclicTerm apply_renamed(const Subst& s, const CyclicTerm& t,
                                NameSupply& names) {
  auto occ = occupied_fvars(t);
  std::map<std::string, std::string> ren;
  std::set<std::string> sf;
  for (auto& [y, v] : s.omega) {
    sf.insert(y);
    collect_fvars(v, sf);
  }
  for (auto& [x, v] : s.sigma) {
    (void)x;
    collect_fvars(v, sf);
  }
  for (auto& y : sf)
    if (occ.count(y)) ren[y] = names.fresh(y);
  if (ren.empty()) return apply(s, t);
  return apply(rename_frozen_subst(s, ren), t);
}

// The binding of x as a standalone cyclic term (omega restricted to reach).
inline CyclicTerm image_of(const Subst& s, const std::string& x) {
  auto it = s.sigma.find(x);
  Term body = it == s.sigma.end() ? mk_var(x) : it->second;
  if (body->kind == Kind::FVar) {
    // Present as base form so a bare frozen root still prints with content.
    CyclicTerm c{body, {}};
    for (auto& y : fvar_closure(s.omega, {body->name})) {
      auto f = s.omega.find(y);
      if (f != s.omega.end()) c.theta.emplace(*f);
    }
    return c;
  }
  CyclicTerm c{body, {}};
  for (auto& y : fvar_closure(s.omega, fvars_of(body))) {
    auto f = s.omega.find(y);
    if (f != s.omega.end()) c.theta.emplace(*f);
  }
  return c;
}

inline std::string subst_to_string(const Subst& s,
                                   const std::set<std::string>& only) {
  std::ostringstream os;
  os << "{";
  bool first = true;
  for (auto& [x, v] : s.sigma) {
    (void)v;
    if (!only.empty() && !only.count(x)) continue;
    if (!first) os << ", ";
    first = false;
    os << x << " -> " << to_string(image_of(s, x));
  }
  os << "}";
  return os.str();
}

inline Subst restrict_vars(const Subst& s, const std::set<std::string>& keep) {
  Subst r;
  std::set<std::string> fv;
  for (auto& [x, v] : s.sigma)
    if (keep.count(x)) {
      r.sigma[x] = v;
      collect_fvars(v, fv);
    }
  for (auto& y : fvar_closure(s.omega, fv)) {
    auto it = s.omega.find(y);
    if (it != s.omega.end()) r.omega.emplace(*it);
  }
  return r;
}

}  // namespace cofl
