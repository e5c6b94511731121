#pragma once

#include <optional>
#include <ostream>
#include <tuple>

#include "cofl/graph.hpp"
#include "cofl/pretty.hpp"
#include "cofl/subst.hpp"

namespace cofl {

// Rule-based unification of cyclic terms. The state carries the equation
// store E, the coinductive history H, the bindings F created for detected
// cycles, and the fixed theta-union of both inputs. Frozen variables of both
// inputs are refreshed on entry, so a returned unifier is safe for the
// originals and its omega domain is entirely fresh.

struct UnifyEq {
  Term l;
  Term r;
  unsigned long seq = 0;
};

struct UnifyState {
  std::vector<UnifyEq> E;  // kept in age order; appends get the next seq
  std::set<std::pair<Term, Term>, TermPairLess> H;
  std::map<std::string, Term> F;
  std::map<std::string, Term> theta_union;
  unsigned long next_seq = 0;
  unsigned long assumptions = 0;  // rule (9) firings; monotone
};

struct RuleChoice {
  int rule = 0;
  size_t idx = 0;
};

struct UnifyOptions {
  bool trace = false;
  std::ostream* out = nullptr;
  bool check_measure = false;
};

namespace detail {

inline bool constructed(const Term& t) {
  return t->kind == Kind::Int || t->kind == Kind::App || t->kind == Kind::Eq;
}

// Occurrences of x in E apart from equation `skip`, or in an F range.
// theta_union is fixed and not consulted; bindings it mentions are resolved
// when the result is packaged.
inline bool occurs_elsewhere(const UnifyState& st, size_t skip,
                             const std::string& x) {
  for (size_t j = 0; j < st.E.size(); ++j) {
    if (j == skip) continue;
    if (occurs_var(st.E[j].l, x) || occurs_var(st.E[j].r, x)) return true;
  }
  for (auto& [y, t] : st.F) {
    (void)y;
    if (occurs_var(t, x)) return true;
  }
  return false;
}

inline long term_size(const Term& t) {
  long n = 1;
  for (auto& a : t->args) n += term_size(a);
  return n;
}

inline void count_vars(const Term& t, std::map<std::string, long>& c) {
  if (t->kind == Kind::Var) {
    ++c[t->name];
    return;
  }
  for (auto& a : t->args) count_vars(a, c);
}

// Well-founded measure: assumptions made (negated), unsolved regular
// variables, total size of E, then flippable equations. Every rule strictly
// decreases it lexicographically.
using Measure = std::tuple<long, long, long, long>;

inline Measure measure(const UnifyState& st) {
  std::map<std::string, long> occ;
  std::set<std::string> bare_lhs;
  long esize = 0;
  long flips = 0;
  for (auto& e : st.E) {
    count_vars(e.l, occ);
    count_vars(e.r, occ);
    esize += term_size(e.l) + term_size(e.r);
    if (is_var(e.l)) bare_lhs.insert(e.l->name);
    if ((!is_var(e.l) && is_var(e.r)) || (constructed(e.l) && is_fvar(e.r)))
      ++flips;
  }
  for (auto& [y, t] : st.F) {
    (void)y;
    count_vars(t, occ);
  }
  long unsolved = 0;
  for (auto& [x, n] : occ)
    if (n > 1 || !bare_lhs.count(x)) ++unsolved;
  return {-(long)st.assumptions, unsolved, esize, flips};
}

}  // namespace detail

inline bool rule_applicable(const UnifyState& st, int rule, size_t i) {
  const Term& l = st.E[i].l;
  const Term& r = st.E[i].r;
  switch (rule) {
    case 1:
      return detail::constructed(l) && detail::constructed(r) && same_root(l, r);
    case 2:
      return detail::constructed(l) && detail::constructed(r) && !same_root(l, r);
    case 3:
      return is_var(l) && is_var(r) && l->name == r->name;
    case 4:
      return !is_var(l) && is_var(r);
    case 5:
      return detail::constructed(l) && is_fvar(r);
    case 6:
      return is_var(l) && !occurs_var(r, l->name) &&
             detail::occurs_elsewhere(st, i, l->name);
    case 7:
      return is_var(l) && !(is_var(r) && r->name == l->name) &&
             occurs_var(r, l->name);
    case 8:
      return is_fvar(l) && st.H.count({l, r}) > 0;
    case 9:
      return is_fvar(l) && st.H.count({l, r}) == 0;
  }
  return false;
}

// Deterministic strategy: failures and discharges first, then structural
// work, flips, variable elimination, cycle freezing, and lastly coinductive
// unfolding; within a rule the oldest equation wins.
inline std::optional<RuleChoice> select_rule(const UnifyState& st) {
  static constexpr int kPriority[9] = {2, 8, 3, 1, 4, 5, 6, 7, 9};
  for (int rule : kPriority)
    for (size_t i = 0; i < st.E.size(); ++i)
      if (rule_applicable(st, rule, i)) return RuleChoice{rule, i};
  return std::nullopt;
}

namespace detail {

// The substitution actions of rules (6) and (7) rewrite the whole store:
// other E equations, H entries, and F ranges. Leaving F or H behind would
// let an eliminated variable survive in a returned binding.
inline void subst_store(UnifyState& st, size_t skip, const std::string& x,
                        const Term& to) {
  std::map<std::string, Term> m{{x, to}};
  for (size_t j = 0; j < st.E.size(); ++j) {
    if (j == skip) continue;
    st.E[j].l = subst_vars(st.E[j].l, m);
    st.E[j].r = subst_vars(st.E[j].r, m);
  }
  for (auto& [y, t] : st.F) {
    (void)y;
    t = subst_vars(t, m);
  }
  if (!st.H.empty()) {
    std::set<std::pair<Term, Term>, TermPairLess> h;
    for (auto& [hl, hr] : st.H) h.insert({subst_vars(hl, m), subst_vars(hr, m)});
    st.H = std::move(h);
  }
}

}  // namespace detail

// Applies one selected rule. Returns false iff rule (2) halted with failure.
inline bool apply_rule(UnifyState& st, RuleChoice c, NameSupply& names) {
  UnifyEq e = st.E[c.idx];
  auto drop = [&] { st.E.erase(st.E.begin() + (long)c.idx); };
  auto push = [&](Term l, Term r) {
    st.E.push_back({std::move(l), std::move(r), st.next_seq++});
  };
  switch (c.rule) {
    case 1: {
      drop();
      for (size_t k = 0; k < e.l->args.size(); ++k)
        push(e.l->args[k], e.r->args[k]);
      return true;
    }
    case 2:
      return false;
    case 3:
      drop();
      return true;
    case 4:
    case 5:
      drop();
      push(e.r, e.l);
      return true;
    case 6:
      detail::subst_store(st, c.idx, e.l->name, e.r);
      return true;
    case 7: {
      std::string yn = names.fresh("y");
      Term y = mk_fvar(yn);
      std::map<std::string, Term> m{{e.l->name, y}};
      if (st.F.count(yn) || st.theta_union.count(yn))
        throw std::logic_error("unify: fresh frozen name collides: " + yn);
      st.F[yn] = subst_vars(e.r, m);
      detail::subst_store(st, c.idx, e.l->name, y);
      drop();
      push(e.l, y);
      return true;
    }
    case 8:
      drop();
      return true;
    case 9: {
      st.H.insert({e.l, e.r});
      ++st.assumptions;
      auto t = st.theta_union.find(e.l->name);
      auto f = st.F.find(e.l->name);
      if ((t != st.theta_union.end()) == (f != st.F.end()))
        throw std::runtime_error("unify: frozen variable " + e.l->name +
                                 " lacks a unique binding");
      const Term& def = t != st.theta_union.end() ? t->second : f->second;
      std::map<std::string, Term> m{{e.l->name, def}};
      drop();
      push(def, subst_fvars(e.r, m));
      return true;
    }
  }
  throw std::logic_error("unify: unknown rule");
}

// True iff s is safe and proper for both terms and application makes them
// equivalent; the independent check used on every unifier the tests produce.
inline bool verify_unifier(const CyclicTerm& a, const CyclicTerm& b,
                           const Subst& s) {
  if (!is_safe(s, a) || !is_safe(s, b)) return false;
  if (!is_proper(s, a) || !is_proper(s, b)) return false;
  try {
    return equivalent(apply(s, a), apply(s, b));
  } catch (const std::exception&) {
    return false;
  }
}

inline std::optional<Subst> unify(const CyclicTerm& a0, const CyclicTerm& b0,
                                  NameSupply& names,
                                  const UnifyOptions& opts = {}) {
  CyclicTerm a = gc(a0);
  CyclicTerm b = gc(b0);
  validate(a);
  validate(b);
  for (auto& n : deep_vars(a)) names.reserve(n);
  for (auto& n : deep_vars(b)) names.reserve(n);
  for (auto& n : deep_fvars(a)) names.reserve(n);
  for (auto& n : deep_fvars(b)) names.reserve(n);
  a = refresh_frozen(a, names);
  b = refresh_frozen(b, names);

  UnifyState st;
  st.theta_union = a.theta;
  for (auto& [y, t] : b.theta) st.theta_union.emplace(y, t);
  st.E.push_back({a.body, b.body, st.next_seq++});

  const unsigned long cap =
      1000000 + 100 * (unsigned long)(detail::term_size(a.body) +
                                      detail::term_size(b.body));
  unsigned long steps = 0;
  while (auto c = select_rule(st)) {
    if (++steps > cap)
      throw std::runtime_error("unify: step cap exceeded; measure broken");
    detail::Measure before;
    if (opts.check_measure) before = detail::measure(st);
    UnifyEq chosen = st.E[c->idx];
    bool ok = apply_rule(st, *c, names);
    if (opts.trace && opts.out)
      *opts.out << "(" << c->rule << ") " << to_string(chosen.l) << " =? "
                << to_string(chosen.r) << " | E=" << st.E.size()
                << " H=" << st.H.size() << " F=" << st.F.size() << "\n";
    if (!ok) return std::nullopt;
    if (opts.check_measure) {
      detail::Measure after = detail::measure(st);
      if (!(after < before))
        throw std::logic_error("unify: measure failed to decrease at rule " +
                               std::to_string(c->rule));
    }
  }

  // E is now an idempotent solved form: distinct variable left-hand sides,
  // none occurring in another E equation or in an F range.
  std::map<std::string, Term> smap;
  for (auto& e : st.E) {
    if (!is_var(e.l))
      throw std::logic_error("unify: unresolved equation " + to_string(e.l) +
                             " =? " + to_string(e.r));
    smap.emplace(e.l->name, e.r);
  }

  auto keep = deep_vars(a0);
  for (auto& n : deep_vars(b0)) keep.insert(n);
  Subst s;
  for (auto& [x, t] : smap)
    if (keep.count(x)) s.sigma[x] = t;

  // theta ranges may still mention solved variables; resolve them now so the
  // returned omega is closed under sigma.
  std::map<std::string, Term> om;
  for (auto& [y, t] : st.theta_union) om[y] = subst_vars(t, smap);
  for (auto& [y, t] : st.F) om[y] = subst_vars(t, smap);
  std::set<std::string> seed;
  for (auto& [x, t] : s.sigma) {
    (void)x;
    collect_fvars(t, seed);
  }
  for (auto& y : fvar_closure(om, seed)) {
    auto it = om.find(y);
    if (it != om.end()) s.omega.emplace(*it);
  }
  return s;
}

}  // namespace cofl
