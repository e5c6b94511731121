#pragma once

#include <algorithm>
#include <cstdint>
#include <deque>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

namespace cofl {

// Var: logic variable (narrowable). FVar: frozen back-reference bound by a
// theta mapping. Eq: an equality constraint node with two children.
enum class Kind : uint8_t { Var, FVar, Int, App, Eq };

enum class Builtin : uint8_t {
  None,
  And,      // &&
  Or,       // ||
  Cmp,      // == (rigid equality test)
  Guard,    // =>
  Plus,     // +
  Mod,      // mod
  Apply,    // application of a non-symbol head
  Findall,  // findall collection
};

struct Symbol {
  std::string name;
  int arity = 0;
  bool is_function = false;
  Builtin builtin = Builtin::None;
  // Printing name; used by lifted lambdas and sections. Empty means `name`.
  std::string display;
  // Lifted right section: unary, display is "(<op><operand>)" and a saturated
  // application renders with the argument inside the parentheses.
  bool section = false;

  const std::string& shown() const { return display.empty() ? name : display; }
};

struct TermNode;
using Term = std::shared_ptr<const TermNode>;

// Applications with args.size() < sym->arity are partial-application values;
// they behave as opaque constructor-like values.
struct TermNode {
  Kind kind;
  std::string name;           // Var, FVar
  const Symbol* sym = nullptr;  // App
  long long ival = 0;         // Int
  std::vector<Term> args;     // App children; Eq has exactly {lhs, rhs}
};

inline Term mk_var(std::string n) {
  auto t = std::make_shared<TermNode>();
  t->kind = Kind::Var;
  t->name = std::move(n);
  return t;
}

inline Term mk_fvar(std::string n) {
  auto t = std::make_shared<TermNode>();
  t->kind = Kind::FVar;
  t->name = std::move(n);
  return t;
}

inline Term mk_int(long long v) {
  auto t = std::make_shared<TermNode>();
  t->kind = Kind::Int;
  t->ival = v;
  return t;
}

inline Term mk_app(const Symbol* s, std::vector<Term> args) {
  if ((int)args.size() > s->arity)
    throw std::logic_error("application exceeds arity of " + s->name);
  auto t = std::make_shared<TermNode>();
  t->kind = Kind::App;
  t->sym = s;
  t->args = std::move(args);
  return t;
}

inline Term mk_eq(Term l, Term r) {
  auto t = std::make_shared<TermNode>();
  t->kind = Kind::Eq;
  t->args = {std::move(l), std::move(r)};
  return t;
}

inline bool is_var(const Term& t) { return t->kind == Kind::Var; }
inline bool is_fvar(const Term& t) { return t->kind == Kind::FVar; }

// Saturated application of a function symbol: the only evaluable App form.
inline bool is_function_call(const Term& t) {
  return t->kind == Kind::App && t->sym->is_function &&
         (int)t->args.size() == t->sym->arity;
}

inline bool is_partial_value(const Term& t) {
  return t->kind == Kind::App && (int)t->args.size() < t->sym->arity;
}

// Root "symbol" identity used by decomposition and unification: two App nodes
// agree iff they share the symbol and the argument count (partial values of
// different saturation never match).
inline bool same_root(const Term& a, const Term& b) {
  if (a->kind != b->kind) return false;
  switch (a->kind) {
    case Kind::Var:
    case Kind::FVar: return a->name == b->name;
    case Kind::Int: return a->ival == b->ival;
    case Kind::App: return a->sym == b->sym && a->args.size() == b->args.size();
    case Kind::Eq: return true;
  }
  return false;
}

inline bool term_eq(const Term& a, const Term& b) {
  if (a.get() == b.get()) return true;
  if (!same_root(a, b)) return false;
  for (size_t i = 0; i < a->args.size(); ++i)
    if (!term_eq(a->args[i], b->args[i])) return false;
  return true;
}

inline int term_cmp(const Term& a, const Term& b) {
  if (a.get() == b.get()) return 0;
  if (a->kind != b->kind) return (int)a->kind < (int)b->kind ? -1 : 1;
  switch (a->kind) {
    case Kind::Var:
    case Kind::FVar:
      return a->name.compare(b->name) < 0 ? -1 : (a->name == b->name ? 0 : 1);
    case Kind::Int:
      return a->ival < b->ival ? -1 : (a->ival == b->ival ? 0 : 1);
    default: break;
  }
  if (a->kind == Kind::App) {
    if (a->sym != b->sym) {
      int c = a->sym->name.compare(b->sym->name);
      if (c != 0) return c < 0 ? -1 : 1;
      return a->sym < b->sym ? -1 : 1;
    }
  }
  if (a->args.size() != b->args.size())
    return a->args.size() < b->args.size() ? -1 : 1;
  for (size_t i = 0; i < a->args.size(); ++i) {
    int c = term_cmp(a->args[i], b->args[i]);
    if (c != 0) return c;
  }
  return 0;
}

struct TermLess {
  bool operator()(const Term& a, const Term& b) const { return term_cmp(a, b) < 0; }
};

inline size_t term_hash(const Term& t) {
  size_t h = (size_t)t->kind * 1099511628211ull;
  auto mix = [&h](size_t v) { h ^= v + 0x9e3779b97f4a7c15ull + (h << 6) + (h >> 2); };
  switch (t->kind) {
    case Kind::Var:
    case Kind::FVar: mix(std::hash<std::string>{}(t->name)); break;
    case Kind::Int: mix(std::hash<long long>{}(t->ival)); break;
    case Kind::App: mix(std::hash<const void*>{}(t->sym)); break;
    case Kind::Eq: break;
  }
  for (auto& a : t->args) mix(term_hash(a));
  return h;
}

inline void collect_vars(const Term& t, std::set<std::string>& out) {
  if (t->kind == Kind::Var) out.insert(t->name);
  for (auto& a : t->args) collect_vars(a, out);
}

inline void collect_fvars(const Term& t, std::set<std::string>& out) {
  if (t->kind == Kind::FVar) out.insert(t->name);
  for (auto& a : t->args) collect_fvars(a, out);
}

inline std::set<std::string> vars_of(const Term& t) {
  std::set<std::string> s;
  collect_vars(t, s);
  return s;
}

inline std::set<std::string> fvars_of(const Term& t) {
  std::set<std::string> s;
  collect_fvars(t, s);
  return s;
}

inline bool occurs_var(const Term& t, const std::string& x) {
  if (t->kind == Kind::Var) return t->name == x;
  for (auto& a : t->args)
    if (occurs_var(a, x)) return true;
  return false;
}

template <typename Map>
inline bool mentions_var(const Term& t, const Map& m) {
  if (t->kind == Kind::Var) return m.find(t->name) != m.end();
  for (auto& a : t->args)
    if (mentions_var(a, m)) return true;
  return false;
}

template <typename Map>
inline Term subst_vars(const Term& t, const Map& m) {
  if (m.empty()) return t;
  if (t->kind == Kind::Var) {
    auto it = m.find(t->name);
    return it == m.end() ? t : it->second;
  }
  if (t->args.empty()) return t;
  if (!mentions_var(t, m)) return t;
  bool changed = false;
  std::vector<Term> args;
  args.reserve(t->args.size());
  for (auto& a : t->args) {
    args.push_back(subst_vars(a, m));
    changed = changed || args.back().get() != a.get();
  }
  if (!changed) return t;
  auto n = std::make_shared<TermNode>(*t);
  n->args = std::move(args);
  return n;
}

template <typename Map>
inline bool mentions_fvar(const Term& t, const Map& m) {
  if (t->kind == Kind::FVar) return m.find(t->name) != m.end();
  for (auto& a : t->args)
    if (mentions_fvar(a, m)) return true;
  return false;
}

template <typename Map>
inline Term subst_fvars(const Term& t, const Map& m) {
  if (m.empty()) return t;
  if (t->kind == Kind::FVar) {
    auto it = m.find(t->name);
    return it == m.end() ? t : it->second;
  }
  if (t->args.empty()) return t;
  if (!mentions_fvar(t, m)) return t;
  bool changed = false;
  std::vector<Term> args;
  args.reserve(t->args.size());
  for (auto& a : t->args) {
    args.push_back(subst_fvars(a, m));
    changed = changed || args.back().get() != a.get();
  }
  if (!changed) return t;
  auto n = std::make_shared<TermNode>(*t);
  n->args = std::move(args);
  return n;
}

// Positions are 1-based child index paths; the empty path is the root.
using Pos = std::vector<int>;

inline std::string pos_to_string(const Pos& p) {
  if (p.empty()) return "eps";
  std::string s;
  for (size_t i = 0; i < p.size(); ++i) {
    if (i) s += ".";
    s += std::to_string(p[i]);
  }
  return s;
}

// Plain term-level navigation; does not unfold frozen variables.
inline Term subterm_at(const Term& t, const Pos& p, size_t from = 0) {
  if (from == p.size()) return t;
  int i = p[from];
  if (i < 1 || (size_t)i > t->args.size()) return nullptr;
  return subterm_at(t->args[i - 1], p, from + 1);
}

inline Term replace_at(const Term& t, const Pos& p, const Term& u, size_t from = 0) {
  if (from == p.size()) return u;
  int i = p[from];
  if (i < 1 || (size_t)i > t->args.size())
    throw std::logic_error("replace_at: invalid position");
  auto n = std::make_shared<TermNode>(*t);
  n->args[i - 1] = replace_at(t->args[i - 1], p, u, from + 1);
  return n;
}

// Owns symbols; addresses are stable for the signature's lifetime.
class Signature {
 public:
  const Symbol* intern(const std::string& name, int arity, bool is_function,
                       Builtin b = Builtin::None, const std::string& display = "",
                       bool section = false) {
    std::lock_guard<std::mutex> lock(mu_);
    auto it = by_name_.find(name);
    if (it != by_name_.end()) {
      const Symbol* s = it->second;
      if (s->arity != arity || s->is_function != is_function)
        throw std::runtime_error("symbol redeclared inconsistently: " + name);
      return s;
    }
    store_.push_back(Symbol{name, arity, is_function, b, display, section});
    const Symbol* s = &store_.back();
    by_name_[name] = s;
    return s;
  }

  const Symbol* lookup(const std::string& name) const {
    std::lock_guard<std::mutex> lock(mu_);
    auto it = by_name_.find(name);
    return it == by_name_.end() ? nullptr : it->second;
  }

  // Char and string literals are nullary constructors of an open sort; the
  // symbol name carries the quotes.
  const Symbol* literal(const std::string& quoted) {
    return intern(quoted, 0, false);
  }

  std::vector<const Symbol*> all() const {
    std::lock_guard<std::mutex> lock(mu_);
    std::vector<const Symbol*> v;
    for (auto& s : store_) v.push_back(&s);
    return v;
  }

 private:
  mutable std::mutex mu_;
  std::deque<Symbol> store_;
  std::map<std::string, const Symbol*> by_name_;
};

// Deterministic fresh-name source shared by parser, unifier and engine.
// Regular and frozen names draw from one used-set so display never collides.
class NameSupply {
 public:
  void reserve(const std::string& n) {
    std::lock_guard<std::mutex> lock(mu_);
    used_.insert(n);
  }

  std::string fresh(const std::string& base_in) {
    std::lock_guard<std::mutex> lock(mu_);
    std::string base = strip_digits(base_in);
    if (base.empty()) base = "x";
    uint64_t& c = counters_[base];
    for (;;) {
      ++c;
      std::string cand = base + std::to_string(c);
      if (used_.insert(cand).second) return cand;
    }
  }

 private:
  static std::string strip_digits(const std::string& s) {
    size_t e = s.size();
    while (e > 0 && s[e - 1] >= '0' && s[e - 1] <= '9') --e;
    return s.substr(0, e);
  }
  std::mutex mu_;
  std::map<std::string, uint64_t> counters_;
  std::set<std::string> used_;
};

}  // namespace cofl
