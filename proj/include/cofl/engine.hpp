#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <memory>
#include <mutex>
#include <thread>

#include "cofl/syntax.hpp"

namespace cofl {

// A circular call noticed earlier on this derivation path: the focused call,
// the whole expression it sat in, and its position there. Snapshots are
// self-contained slices, current as of recording time; the accumulated
// substitution is re-applied when the entry is consulted.
struct MemoryEntry {
  CyclicTerm focused;
  CyclicTerm total;
  Pos position;
  std::pair<std::uint64_t, std::uint64_t> fp;  // set when recorded
};

using Memory = std::vector<MemoryEntry>;

struct EngineConfig {
  unsigned long step_budget = 100000;
  std::size_t max_answers = 10;
  bool full_memory = false;   // record every call, not just guess heads
  int workers = 1;
  // Internal knobs; sub-derivations (value adoption, findall) run with
  // adoption off so nesting stays flat.
  bool allow_adoption = true;
  bool allow_guesses = true;
  bool record_memory = true;
  unsigned long adoption_budget = 400;
  unsigned long findall_budget = 20000;
};

struct Answer {
  Subst s;           // restricted to the query's variables
  CyclicTerm value;  // gc'd
  int node = -1;     // graph node it was read off; labels live on the path
};

enum class Outcome { Running, AnswersDone, Exhausted, Suspended, BudgetOut };

inline const char* outcome_text(Outcome o) {
  switch (o) {
    case Outcome::AnswersDone: return "answer limit reached";
    case Outcome::Exhausted: return "no (more) answers";
    case Outcome::Suspended: return "suspended";
    case Outcome::BudgetOut: return "budget exhausted";
    default: return "running";
  }
}

namespace detail {

inline Term subst_rename(const Term& t,
                         const std::map<std::string, std::string>& ren) {
  std::map<std::string, Term> m;
  for (auto& [a, b] : ren) m.emplace(a, mk_var(b));
  return subst_vars(t, m);
}

inline std::map<std::string, Term> rename_theta(
    const std::map<std::string, Term>& th,
    const std::map<std::string, std::string>& ren) {
  std::map<std::string, Term> out;
  std::map<std::string, Term> m;
  for (auto& [a, b] : ren) m.emplace(a, mk_var(b));
  for (auto& [y, v] : th) out.emplace(y, subst_vars(v, m));
  return out;
}

}  // namespace detail

// Textual key that collapses alpha-variants of an answer: variables and frozen
// variables are renamed in order of first appearance across the value and the
// images of the query variables.
inline std::string answer_key(const Answer& a,
                              const std::set<std::string>& qvars) {
  std::map<std::string, std::string> vren, fren;
  std::function<void(const Term&, const std::map<std::string, Term>&,
                     std::set<std::string>&)>
      walk = [&](const Term& t, const std::map<std::string, Term>& th,
                 std::set<std::string>& seen) {
        if (t->kind == Kind::Var) {
          vren.emplace(t->name, "$v" + std::to_string(vren.size()));
        } else if (t->kind == Kind::FVar) {
          fren.emplace(t->name, "$f" + std::to_string(fren.size()));
          if (seen.insert(t->name).second) {
            auto it = th.find(t->name);
            if (it != th.end()) walk(it->second, th, seen);
          }
        } else {
          for (auto& c : t->args) walk(c, th, seen);
        }
      };
  std::set<std::string> seen;
  walk(a.value.body, a.value.theta, seen);
  std::string k;
  {
    std::map<std::string, std::string> fr = fren;
    CyclicTerm v = a.value;
    for (auto& y : deep_fvars(v))
      if (!fr.count(y)) fr.emplace(y, "$f" + std::to_string(fr.size()));
    k = to_string(rename_frozen(CyclicTerm{detail::subst_rename(v.body, vren),
                                           detail::rename_theta(v.theta, vren)},
                                fr));
  }
  k += "|";
  for (auto& x : qvars) {
    CyclicTerm im = image_of(a.s, x);
    std::set<std::string> s2;
    walk(im.body, im.theta, s2);
    std::map<std::string, std::string> fr;
    for (auto& y : deep_fvars(im)) {
      auto it = fren.find(y);
      fr.emplace(y, it != fren.end() ? it->second
                                     : "$g" + std::to_string(fr.size()));
    }
    k += x + "=" +
         to_string(rename_frozen(
             CyclicTerm{detail::subst_rename(im.body, vren),
                        detail::rename_theta(im.theta, vren)},
             fr)) +
         ",";
  }
  return k;
}

// Structural-up-to-bisimilarity comparison of two answers: the values and the
// images of every query variable must denote the same (possibly infinite)
// trees. Free variables are compared by position via a shared renaming.
inline bool answers_equivalent(const Answer& a, const Answer& b,
                               const std::set<std::string>& qvars) {
  auto aligned = [&](CyclicTerm x, CyclicTerm y) {
    std::map<std::string, std::string> rx, ry;
    auto canon = [](CyclicTerm t, std::map<std::string, std::string>& r) {
      std::function<void(const Term&)> walk = [&](const Term& u) {
        if (u->kind == Kind::Var)
          r.emplace(u->name, "$v" + std::to_string(r.size()));
        for (auto& c : u->args) walk(c);
      };
      walk(t.body);
      for (auto& [y2, v] : t.theta) walk(v);
      std::map<std::string, Term> m;
      for (auto& [o, n] : r) m.emplace(o, mk_var(n));
      CyclicTerm out;
      out.body = subst_vars(t.body, m);
      for (auto& [y2, v] : t.theta) out.theta.emplace(y2, subst_vars(v, m));
      return out;
    };
    return equivalent(canon(x, rx), canon(y, ry));
  };
  if (!aligned(a.value, b.value)) return false;
  for (auto& x : qvars)
    if (!aligned(image_of(a.s, x), image_of(b.s, x))) return false;
  return true;
}

// One state of the derivation graph. `body`/`theta` form the expression;
// `acc` is the answer substitution so far; `M` the memory on this path.
// The maps are shared with the parent whenever a step leaves them unchanged,
// so a long derivation does not retain one copy per node. A shared theta may
// carry entries unreachable from this node's body; every consumer walks
// reachability (or gc's first), so the extra entries are inert.
struct Node {
  std::shared_ptr<const Subst> acc;
  Term body;
  std::shared_ptr<const std::map<std::string, Term>> theta;
  std::shared_ptr<const Memory> M;
  int parent = -1;
  std::vector<std::string> labels;  // edge labels from parent
  std::vector<int> children;
};

namespace detail {

inline bool reachable_function_free(const Term& body,
                                    const std::map<std::string, Term>& theta,
                                    bool allow_vars) {
  std::set<std::string> seen;
  std::vector<Term> work{body};
  while (!work.empty()) {
    Term t = work.back();
    work.pop_back();
    switch (t->kind) {
      case Kind::Var:
        if (!allow_vars) return false;
        break;
      case Kind::FVar: {
        if (!seen.insert(t->name).second) break;
        auto it = theta.find(t->name);
        if (it == theta.end()) return false;
        work.push_back(it->second);
        break;
      }
      case Kind::Int:
        break;
      case Kind::Eq:
        return false;
      case Kind::App:
        if (is_function_call(t)) return false;
        for (auto& a : t->args) work.push_back(a);
        break;
    }
  }
  return true;
}

// Collapses apply nodes whose first argument has become a partial
// application; runs bottom-up so chains saturate in one pass.
inline Term saturate(const Term& t) {
  if (t->kind != Kind::App && t->kind != Kind::Eq) return t;
  std::vector<Term> args;
  args.reserve(t->args.size());
  bool changed = false;
  for (auto& a : t->args) {
    Term s = saturate(a);
    changed |= (s != a);
    args.push_back(s);
  }
  if (t->kind == Kind::App && t->sym->builtin == Builtin::Apply &&
      args.size() == 2) {
    Term f = args[0];
    if (f->kind == Kind::App && f->args.size() < (size_t)f->sym->arity) {
      std::vector<Term> fa = f->args;
      fa.push_back(args[1]);
      return saturate(mk_app(f->sym, fa));
    }
  }
  if (!changed) return t;
  if (t->kind == Kind::Eq) return mk_eq(args[0], args[1]);
  return mk_app(t->sym, args);
}

// 128-bit structural fingerprint used for state deduplication. Variable and
// frozen names enter verbatim; frozen bindings are folded in on first
// encounter, so two states collide only when they agree syntactically up to
// unreachable theta entries.
struct Fp {
  std::uint64_t a = 1469598103934665603ull;
  std::uint64_t b = 0x9e3779b97f4a7c15ull;
  void mix(std::uint64_t x) {
    a = (a ^ x) * 1099511628211ull;
    b += x + 0x9e3779b97f4a7c15ull + (b << 6) + (b >> 2);
  }
  void mix(const std::string& s) {
    for (unsigned char c : s) mix(c);
    mix(0x1f1f1f1full);
  }
  std::pair<std::uint64_t, std::uint64_t> get() const { return {a, b}; }
};

inline void fp_term(const Term& t, const std::map<std::string, Term>& theta,
                    std::set<std::string>& seen, Fp& h) {
  switch (t->kind) {
    case Kind::Var:
      h.mix(1);
      h.mix(t->name);
      return;
    case Kind::FVar: {
      h.mix(2);
      h.mix(t->name);
      if (seen.insert(t->name).second) {
        auto it = theta.find(t->name);
        if (it != theta.end()) {
          h.mix(3);
          fp_term(it->second, theta, seen, h);
        }
      }
      return;
    }
    case Kind::Int:
      h.mix(4);
      h.mix(static_cast<std::uint64_t>(t->ival));
      return;
    case Kind::Eq:
      h.mix(5);
      fp_term(t->args[0], theta, seen, h);
      fp_term(t->args[1], theta, seen, h);
      return;
    case Kind::App:
      h.mix(6);
      h.mix(t->sym->name);
      h.mix(t->args.size());
      for (auto& c : t->args) fp_term(c, theta, seen, h);
      return;
  }
}

inline std::pair<std::uint64_t, std::uint64_t> fp_cyclic(const CyclicTerm& t) {
  Fp h;
  std::set<std::string> seen;
  fp_term(t.body, t.theta, seen, h);
  return h.get();
}

// Conservative unifiability screen: variables (plain or frozen) match
// anything; rigid roots must agree. False means unification cannot succeed,
// so the expensive attempt is skipped.
inline bool may_unify(const Term& a, const Term& b) {
  if (a->kind == Kind::Var || b->kind == Kind::Var) return true;
  if (a->kind == Kind::FVar || b->kind == Kind::FVar) return true;
  if (a->kind == Kind::Eq || b->kind == Kind::Eq) return true;
  if (a->kind == Kind::Int || b->kind == Kind::Int)
    return a->kind == b->kind && a->ival == b->ival;
  if (a->sym != b->sym || a->args.size() != b->args.size()) return false;
  for (size_t i = 0; i < a->args.size(); ++i)
    if (!may_unify(a->args[i], b->args[i])) return false;
  return true;
}

inline std::pair<std::uint64_t, std::uint64_t> fp_entry(const MemoryEntry& e) {
  Fp h;
  {
    std::set<std::string> seen;
    fp_term(e.focused.body, e.focused.theta, seen, h);
  }
  h.mix(7);
  for (int i : e.position) h.mix(static_cast<std::uint64_t>(i));
  h.mix(8);
  {
    std::set<std::string> seen;
    fp_term(e.total.body, e.total.theta, seen, h);
  }
  return h.get();
}

}  // namespace detail

class Derivation {
 public:
  Derivation(Program& p, const CyclicTerm& query, const EngineConfig& cfg,
             NameSupply& names)
      : p_(p), cfg_(cfg), names_(names) {
    true_ = mk_app(p_.sig->intern("True", 0, false), {});
    false_ = mk_app(p_.sig->intern("False", 0, false), {});
    nil_ = mk_app(p_.sig->intern("[]", 0, false), {});
    cons_ = p_.sig->intern(":", 2, false);
    guard_ = p_.sig->intern("=>", 2, true, Builtin::Guard);
    CyclicTerm q = gc(query);
    validate(q);
    qvars_ = vars_of(q.body);
    for (auto& [y, v] : q.theta) {
      (void)y;
      collect_vars(v, qvars_);
    }
    for (auto& x : qvars_) names_.reserve(x);
    Node root;
    root.acc = std::make_shared<const Subst>();
    root.body = q.body;
    root.theta =
        std::make_shared<const std::map<std::string, Term>>(std::move(q.theta));
    root.M = std::make_shared<const Memory>();
    nodes_.push_back(std::move(root));
    seen_.insert(node_key(nodes_[0]));
    primary_.push_back(0);
    budget_ = cfg_.step_budget;
  }

  // One frontier expansion. False once the graph is finished, the budget is
  // spent, or enough answers are buffered.
  bool step_one() {
    if (outcome_ != Outcome::Running) return false;
    if (answers_.size() >= cfg_.max_answers) {
      outcome_ = Outcome::AnswersDone;
      return false;
    }
    if (budget_ == 0) {
      outcome_ = Outcome::BudgetOut;
      return false;
    }
    int id = pop_lane();
    if (id < 0) {
      outcome_ = (flounder_ && answers_.empty()) ? Outcome::Suspended
                                                 : Outcome::Exhausted;
      return false;
    }
    --budget_;
    expand(id);
    return true;
  }

  // Pumps the derivation until the next answer, the budget, or exhaustion.
  std::optional<Answer> next() {
    while (true) {
      if (emitted_ < answers_.size()) return answers_[emitted_++];
      if (!step_one()) return std::nullopt;
    }
  }

  // Expands until finished. Workers take turns under one lock; answers land
  // in arrival order, which is deterministic only with a single worker.
  void drain(int workers = 1) {
    if (workers <= 1) {
      while (step_one()) {
      }
      return;
    }
    std::mutex mu;
    std::vector<std::thread> pool;
    pool.reserve(workers);
    for (int i = 0; i < workers; ++i)
      pool.emplace_back([&] {
        for (bool more = true; more;) {
          std::lock_guard<std::mutex> lk(mu);
          more = step_one();
        }
      });
    for (auto& t : pool) t.join();
  }

  Outcome outcome() const { return outcome_; }
  const std::vector<Node>& nodes() const { return nodes_; }
  const std::vector<Answer>& answers() const { return answers_; }
  const std::set<std::string>& query_vars() const { return qvars_; }
  unsigned long steps_used() const { return cfg_.step_budget - budget_; }

  CyclicTerm state_term(int id) const {
    return gc(CyclicTerm{nodes_[id].body, *nodes_[id].theta});
  }

  std::vector<std::string> path_labels(int id) const {
    std::vector<std::string> out;
    for (int c = id; c > 0; c = nodes_[c].parent)
      out.insert(out.begin(), nodes_[c].labels.begin(),
                 nodes_[c].labels.end());
    return out;
  }

 private:
  struct Alt {
    Subst s;
    Term e;
    Memory M;
    std::vector<std::string> labels;
    bool total = false;    // e replaces the whole expression
    bool has_eq = false;   // wrap as (eq_l == eq_r) => e
    bool demote = false;   // slow lane: zero-progress circularity
    Term eq_l, eq_r;
  };

  struct CsRes {
    std::vector<Alt> alts;
    bool suspended = false;
  };

  Program& p_;
  EngineConfig cfg_;
  NameSupply& names_;
  Term true_, false_, nil_;
  const Symbol* cons_;
  const Symbol* guard_;
  std::set<std::string> qvars_;
  std::vector<Node> nodes_;
  std::set<std::pair<std::uint64_t, std::uint64_t>> seen_;
  std::vector<Answer> answers_;
  std::size_t emitted_ = 0;
  std::deque<int> primary_, secondary_;
  int pops_ = 0;
  unsigned long budget_ = 0;
  bool flounder_ = false;
  Outcome outcome_ = Outcome::Running;
  struct SubAnswer {
    Subst s;
    CyclicTerm value;
    std::vector<std::string> labels;
  };
  std::map<std::string, std::optional<std::vector<SubAnswer>>> adoption_cache_;

  // ----- plumbing -------------------------------------------------------

  CyclicTerm slice(const Node& n, const Term& t) const {
    CyclicTerm c{t, {}};
    for (auto& y : fvar_closure(*n.theta, fvars_of(t))) {
      auto it = n.theta->find(y);
      if (it != n.theta->end()) c.theta.emplace(*it);
    }
    return c;
  }

  // Applies an accumulated substitution to a stored snapshot. Frozen names
  // the snapshot already carries keep their own (more instantiated) bindings,
  // so the overlapping part of omega is dropped before the strict apply.
  CyclicTerm apply_now(const Subst& s, const CyclicTerm& t) const {
    if (s.empty()) return gc(t);
    Subst s2;
    s2.sigma = s.sigma;
    auto occ = occupied_fvars(t);
    for (auto& [y, v] : s.omega)
      if (!occ.count(y)) s2.omega.emplace(y, v);
    return apply(s2, t);
  }

  // step after acc, kept idempotent; omega images are refreshed so stored
  // bindings stay current under the grown sigma.
  Subst accumulate(const Subst& step, const Subst& acc) const {
    Subst st = step;
    for (auto it = st.omega.begin(); it != st.omega.end();)
      it = acc.omega.count(it->first) ? st.omega.erase(it) : std::next(it);
    Subst r = compose(st, acc);
    for (auto& kv : r.omega) kv.second = subst_vars(kv.second, r.sigma);
    return r;
  }

  std::pair<std::uint64_t, std::uint64_t> node_key(const Node& n) const {
    detail::Fp h;
    {
      std::set<std::string> seen;
      detail::fp_term(n.body, *n.theta, seen, h);
    }
    h.mix(0xa5a5a5a5ull);
    for (auto& x : qvars_) {
      auto it = n.acc->sigma.find(x);
      if (it == n.acc->sigma.end()) continue;
      h.mix(x);
      std::set<std::string> seen;
      detail::fp_term(it->second, n.acc->omega, seen, h);
    }
    h.mix(0x5a5a5a5aull);
    for (auto& e : *n.M) {
      h.mix(e.fp.first);
      h.mix(e.fp.second);
    }
    return h.get();
  }

  // ----- graph growth ---------------------------------------------------

  int pop_lane() {
    ++pops_;
    bool take_secondary = (pops_ % 5 == 0);
    if (take_secondary && !secondary_.empty()) {
      int id = secondary_.front();
      secondary_.pop_front();
      return id;
    }
    if (!primary_.empty()) {
      int id = primary_.front();
      primary_.pop_front();
      return id;
    }
    if (!secondary_.empty()) {
      int id = secondary_.front();
      secondary_.pop_front();
      return id;
    }
    return -1;
  }

  bool solved(const Node& n) const {
    return detail::reachable_function_free(n.body, *n.theta, true);
  }

  bool answer_clean(const Node& n) const {
    for (auto& x : qvars_) {
      CyclicTerm im = image_of(*n.acc, x);
      if (!detail::reachable_function_free(im.body, im.theta, true))
        return false;
    }
    return true;
  }

  void emit(int id) {
    const Node& n = nodes_[id];
    Answer a;
    a.s = restrict_vars(*n.acc, qvars_);
    a.value = gc(CyclicTerm{n.body, *n.theta});
    a.node = id;
    answers_.push_back(std::move(a));
  }

  void expand(int id) {
    {
      const Node& n = nodes_[id];
      if (solved(n)) {
        if (answer_clean(n)) emit(id);
        return;
      }
    }
    int ad = cfg_.allow_adoption ? try_adoption(id) : 0;
    if (ad == 2) return;  // complete, binding-free enumeration: commit
    if (ad == 1) {
      // Needed-descent successors still get explored, on the slow lane.
      grow(id, root_cs(id), /*to_primary=*/false);
      return;
    }
    grow(id, root_cs(id), /*to_primary=*/true);
  }

  CsRes root_cs(int id) {
    Node n = nodes_[id];  // shared-handle copy: nodes_ may grow while live
    return cs(n, n.body, {}, *n.M);
  }

  void grow(int id, CsRes r, bool to_primary) {
    if (r.alts.empty()) {
      if (r.suspended) flounder_ = true;
      return;
    }
    for (auto& a : r.alts) make_child(id, a, to_primary && !a.demote);
  }

  void make_child(int id, Alt& alt, bool to_primary) {
    Node parent = nodes_[id];
    Node child;
    Term body = alt.e;
    if (alt.has_eq)
      body = mk_app(guard_, {mk_eq(alt.eq_l, alt.eq_r), body});
    if (alt.s.sigma.empty() && alt.s.omega.empty()) {
      // Binding-free step: the answer and the frozen bindings are untouched,
      // so the parent's maps are shared as-is (theta keeps entries the new
      // body may no longer reach).
      child.acc = parent.acc;
      child.body = body;
      child.theta = parent.theta;
    } else {
      child.acc =
          std::make_shared<const Subst>(accumulate(alt.s, *parent.acc));
      std::map<std::string, Term> th;
      for (auto& [y, v] : *parent.theta) th[y] = subst_vars(v, alt.s.sigma);
      for (auto& [y, v] : alt.s.omega) th[y] = v;
      // Keep the codomain invariant: no binding may be a bare frozen variable.
      for (auto& [y, v] : th) {
        if (v->kind != Kind::FVar) continue;
        Term c = v;
        std::set<std::string> seen{y};
        while (c->kind == Kind::FVar) {
          if (!seen.insert(c->name).second)
            throw std::runtime_error("step creates a frozen cycle at " + y);
          auto it = th.find(c->name);
          if (it == th.end())
            throw std::runtime_error("step leaves " + c->name + " unbound");
          c = it->second;
        }
        th[y] = c;
      }
      CyclicTerm ct = gc(CyclicTerm{body, th});
      child.body = ct.body;
      child.theta = std::make_shared<const std::map<std::string, Term>>(
          std::move(ct.theta));
    }
    // Memory only ever grows along a step, so equal size means unchanged.
    child.M = alt.M.size() == parent.M->size()
                  ? parent.M
                  : std::make_shared<const Memory>(std::move(alt.M));
    child.parent = id;
    child.labels = alt.labels;
    if (!seen_.insert(node_key(child)).second) return;
    int cid = (int)nodes_.size();
    nodes_.push_back(std::move(child));
    nodes_[id].children.push_back(cid);
    (to_primary ? primary_ : secondary_).push_back(cid);
  }

  // ----- value adoption -------------------------------------------------
  // Deterministic-looking innermost work (arithmetic, finite matching) is run
  // to completion as its own small derivation and its results spliced in.
  // Only complete, guess-free sub-derivations are adopted; anything that
  // suspends, fails, or outgrows the slice falls back to needed descent.

  bool find_adoptable(const Term& t, Pos& at) const {
    for (size_t i = 0; i < t->args.size(); ++i) {
      at.push_back((int)i + 1);
      if (find_adoptable(t->args[i], at)) return true;
      at.pop_back();
    }
    if (is_function_call(t) && t->sym->builtin != Builtin::Findall &&
        t->kind == Kind::App)
      return true;
    return false;
  }

  // Returns 0 if nothing was adopted, 1 if adopted alternatives were spliced
  // in but narrow slice variables (needed descent stays as a fallback), and 2
  // if the adopted answers are binding-free, in which case they are the
  // slice's complete value set and replace descent outright.
  int try_adoption(int id) {
    Pos at;
    Term sub;
    {
      const Node& n = nodes_[id];
      if (!find_adoptable(n.body, at)) return 0;
      if (at.empty()) return 0;  // root work belongs to needed descent
      sub = subterm_at(n.body, at);
      if (!sub) return 0;
    }
    CyclicTerm q = slice(nodes_[id], sub);

    // The cache is keyed on the slice with its variables renamed in order of
    // first appearance, so hits do not depend on which fresh names this
    // particular derivation happened to produce.  Cached answers are phrased
    // in the canonical names and mapped back per use.
    std::map<std::string, std::string> vmap, fmap;  // actual -> canonical
    {
      std::set<std::string> seen;
      std::function<void(const Term&)> walk = [&](const Term& t) {
        if (t->kind == Kind::Var) {
          vmap.emplace(t->name, "$c" + std::to_string(vmap.size()));
          return;
        }
        if (t->kind == Kind::FVar) {
          fmap.emplace(t->name, "$f" + std::to_string(fmap.size()));
          if (seen.insert(t->name).second) {
            auto b = q.theta.find(t->name);
            if (b != q.theta.end()) walk(b->second);
          }
          return;
        }
        for (auto& c : t->args) walk(c);
      };
      walk(q.body);
    }
    std::map<std::string, Term> vren;
    for (auto& [a, c] : vmap) vren.emplace(a, mk_var(c));
    CyclicTerm qc{subst_vars(q.body, vren), {}};
    for (auto& [y, v] : q.theta) qc.theta.emplace(y, subst_vars(v, vren));
    qc = rename_frozen(qc, fmap);

    std::string key = to_string(qc);
    auto it = adoption_cache_.find(key);
    if (it == adoption_cache_.end()) {
      EngineConfig sc = cfg_;
      sc.step_budget = cfg_.adoption_budget;
      sc.max_answers = 64;
      sc.allow_adoption = false;
      sc.allow_guesses = false;
      sc.record_memory = false;
      sc.workers = 1;
      Derivation d(p_, qc, sc, names_);
      d.drain();
      std::optional<std::vector<SubAnswer>> res;
      if (d.outcome() == Outcome::Exhausted && !d.answers().empty()) {
        std::vector<SubAnswer> xs;
        for (auto& a : d.answers())
          xs.push_back({a.s, a.value, d.path_labels(a.node)});
        res = std::move(xs);
      }
      it = adoption_cache_.emplace(key, std::move(res)).first;
    }
    if (!it->second) return 0;
    bool det = true;
    for (auto& sa : *it->second)
      det = det && sa.s.sigma.empty() && sa.s.omega.empty();

    std::map<std::string, Term> vback;
    std::map<std::string, std::string> fback;
    std::set<std::string> qv;
    for (auto& [a, c] : vmap) {
      vback.emplace(c, mk_var(a));
      qv.insert(a);
    }
    for (auto& [a, c] : fmap) fback.emplace(c, a);
    for (auto& sa0 : *it->second) {
      SubAnswer sa1;
      {
        Subst s;
        for (auto& [x, v] : sa0.s.sigma) {
          auto vb = vback.find(x);
          s.sigma[vb != vback.end() ? vb->second->name : x] =
              subst_vars(v, vback);
        }
        for (auto& [y, v] : sa0.s.omega) s.omega[y] = subst_vars(v, vback);
        sa1.s = rename_frozen_subst(s, fback);
        CyclicTerm val{subst_vars(sa0.value.body, vback), {}};
        for (auto& [y, v] : sa0.value.theta)
          val.theta[y] = subst_vars(v, vback);
        sa1.value = rename_frozen(val, fback);
        sa1.labels = sa0.labels;
      }
      SubAnswer sa = freshen_sub(sa1, qv);
      Alt a;
      a.s = sa.s;
      for (auto& [y, v] : sa.value.theta) a.s.omega[y] = v;
      a.e = replace_at(subst_vars(nodes_[id].body, sa.s.sigma), at,
                       sa.value.body);
      a.M = *nodes_[id].M;
      a.labels = sa.labels;
      make_child(id, a, /*to_primary=*/true);
    }
    return det ? 2 : 1;
  }

  // Cached sub-answers are templates; per use their new names (anything not
  // from the adopted slice itself) are refreshed to avoid capture.
  SubAnswer freshen_sub(const SubAnswer& sa,
                        const std::set<std::string>& qv) const {
    std::set<std::string> nv;
    collect_vars(sa.value.body, nv);
    for (auto& [x, v] : sa.s.sigma) {
      (void)x;
      collect_vars(v, nv);
    }
    for (auto& [y, v] : sa.value.theta) {
      (void)y;
      collect_vars(v, nv);
    }
    std::map<std::string, Term> vren;
    for (auto& x : nv)
      if (!qv.count(x)) vren.emplace(x, mk_var(names_.fresh("x")));
    std::map<std::string, std::string> fren;
    for (auto& y : deep_fvars(sa.value)) fren[y] = names_.fresh("y");
    for (auto& [y, v] : sa.s.omega) {
      (void)v;
      if (!fren.count(y)) fren[y] = names_.fresh("y");
    }
    SubAnswer out;
    Subst s;
    for (auto& [x, v] : sa.s.sigma) s.sigma[x] = subst_vars(v, vren);
    for (auto& [y, v] : sa.s.omega) s.omega[y] = subst_vars(v, vren);
    out.s = rename_frozen_subst(s, fren);
    CyclicTerm val{subst_vars(sa.value.body, vren), {}};
    for (auto& [y, v] : sa.value.theta) val.theta[y] = subst_vars(v, vren);
    out.value = rename_frozen(val, fren);
    out.labels = sa.labels;
    return out;
  }

  // ----- the step function ---------------------------------------------

  static void wrap_context(std::vector<Alt>& as, const Term& ctx,
                           const Pos& at) {
    for (auto& a : as) {
      if (a.total) continue;
      a.e = replace_at(subst_vars(ctx, a.s.sigma), at, a.e);
    }
  }

  CsRes cs(const Node& n, const Term& t, const Pos& o, const Memory& M) {
    switch (t->kind) {
      case Kind::Var:
        return {{}, true};
      case Kind::Int:
        return {{}, true};
      case Kind::FVar: {
        auto it = n.theta->find(t->name);
        if (it == n.theta->end())
          throw std::logic_error("unbound frozen variable " + t->name);
        Alt a;
        a.e = it->second;
        a.M = M;
        a.labels = {"(1)"};
        return {{a}, false};
      }
      case Kind::Eq:
        return cs_eq(n, t, o, M);
      case Kind::App:
        if (!is_function_call(t)) return cs_args(n, t, o, M);
        if (t->sym->builtin != Builtin::None) return cs_builtin(n, t, o, M);
        return cs_fun(n, t, o, M);
    }
    return {{}, true};
  }

  // Constructor-rooted: first child that makes progress; a failing child
  // kills the whole term, all-suspended suspends.
  CsRes cs_args(const Node& n, const Term& t, const Pos& o, const Memory& M) {
    for (size_t i = 0; i < t->args.size(); ++i) {
      Pos o2 = o;
      o2.push_back((int)i + 1);
      CsRes r = cs(n, t->args[i], o2, M);
      if (r.alts.empty() && r.suspended) continue;
      wrap_context(r.alts, t, {(int)i + 1});
      return r;
    }
    return {{}, true};
  }

  CsRes cs_eq(const Node& n, const Term& t, const Pos& o, const Memory& M) {
    CyclicTerm l = slice(n, t->args[0]);
    CyclicTerm r = slice(n, t->args[1]);
    if (auto su = unify(l, r, names_)) {
      Alt a;
      a.s = *su;
      a.e = true_;
      a.M = M;
      a.labels = {"(2)"};
      return {{a}, false};
    }
    // Not unifiable as it stands; let an active side evolve first. With no
    // active position the equation is refuted and the alternative dies.
    for (int i = 0; i < 2; ++i) {
      Pos o2 = o;
      o2.push_back(i + 1);
      CsRes ri = cs(n, t->args[i], o2, M);
      if (ri.alts.empty() && ri.suspended) continue;
      if (ri.alts.empty()) return ri;
      for (auto& a : ri.alts) {
        if (a.total) continue;
        Term ctx = subst_vars(t->args[1 - i], a.s.sigma);
        a.e = (i == 0) ? mk_eq(a.e, ctx) : mk_eq(ctx, a.e);
      }
      return ri;
    }
    return {{}, false};
  }

  CsRes cs_fun(const Node& n, const Term& t, const Pos& o, const Memory& M) {
    const Symbol* f = t->sym;
    Memory m2 = M;
    if (cfg_.record_memory && (cfg_.full_memory || p_.guess_heads.count(f))) {
      MemoryEntry e{slice(n, t), gc(CyclicTerm{n.body, *n.theta}), o, {}};
      e.fp = detail::fp_entry(e);
      bool dup = false;
      for (auto& old : m2)
        if (old.fp == e.fp) {
          dup = true;
          break;
        }
      if (!dup) m2.push_back(std::move(e));
    }
    auto tree = p_.trees.find(f);
    if (tree == p_.trees.end())
      throw std::logic_error("no rules for " + f->name);
    CsRes r = cst(n, t, tree->second.get(), o, m2);
    if (cfg_.allow_guesses) {
      for (auto& entry : M) {
        if (entry.focused.body->kind != Kind::App ||
            entry.focused.body->sym != f)
          continue;
        if (!detail::may_unify(t, entry.focused.body)) continue;
        CyclicTerm me = apply_now(*n.acc, entry.focused);
        auto su = unify(slice(n, t), me, names_);
        if (!su) continue;
        CyclicTerm fired = apply_now(*su, me);
        auto guesses = match_guess(p_, fired, names_);
        if (guesses.empty()) continue;
        // A unifier that neither binds nor freezes anything marks a
        // zero-progress recurrence; its resolutions stay reachable but are
        // explored on the slow lane.
        bool trivial = su->sigma.empty() && su->omega.empty();
        CyclicTerm mt = apply_now(*su, apply_now(*n.acc, entry.total));
        CyclicTerm cur = apply_now(*su, CyclicTerm{n.body, *n.theta});
        for (auto& g : guesses) {
          CyclicTerm cont = subst_at(mt, g, entry.position, names_);
          CyclicTerm curg = subst_at(cur, g, o, names_);
          Alt a;
          a.s = *su;
          for (auto& [y, v] : cont.theta) a.s.omega[y] = v;
          for (auto& [y, v] : curg.theta) a.s.omega[y] = v;
          a.e = cont.body;
          a.total = true;
          a.has_eq = true;
          a.demote = trivial;
          a.eq_l = cont.body;
          a.eq_r = curg.body;
          a.M = m2;
          a.labels = {"(3.2)"};
          r.alts.push_back(std::move(a));
        }
      }
    }
    if (!r.alts.empty()) r.suspended = false;
    return r;
  }

  CsRes cst(const Node& n, const Term& t, const DefTree* node, const Pos& o,
            const Memory& M) {
    if (node->is_leaf()) {
      CsRes r;
      for (auto& rule : node->leaf_rules) {
        std::map<std::string, Term> b;
        if (!match_pattern(rule.lhs, t, b)) continue;
        Alt a;
        a.e = detail::saturate(subst_vars(rule.rhs, b));
        a.M = M;
        a.labels = {"(3.1)"};
        r.alts.push_back(std::move(a));
      }
      return r;
    }
    // Walk to the demanded position; a frozen variable blocking the path is
    // unfolded in place first.
    Term cur = t;
    Pos pref;
    for (int step : node->occurrence) {
      if (cur->kind == Kind::FVar) break;
      if (step < 1 || (size_t)step > cur->args.size()) return {{}, false};
      cur = cur->args[step - 1];
      pref.push_back(step);
    }
    if (cur->kind == Kind::FVar) {
      auto it = n.theta->find(cur->name);
      if (it == n.theta->end())
        throw std::logic_error("unbound frozen variable " + cur->name);
      Alt a;
      a.e = replace_at(t, pref, it->second);
      a.M = M;
      a.labels = {"(1)"};
      return {{a}, false};
    }
    if (cur->kind == Kind::Var) {
      // Narrow: one alternative per sibling constructor.
      CsRes r;
      for (auto& child : node->children) {
        Term pat = subterm_at(child->pattern, node->occurrence);
        std::map<std::string, Term> fr;
        for (auto& z : vars_of(pat)) fr.emplace(z, mk_var(names_.fresh("x")));
        Alt a;
        a.s.sigma.emplace(cur->name, subst_vars(pat, fr));
        a.e = subst_vars(t, a.s.sigma);
        a.M = M;
        a.labels = {"(3.1)"};
        r.alts.push_back(std::move(a));
      }
      return r;
    }
    if (is_function_call(cur) || cur->kind == Kind::Eq) {
      Pos o2 = o;
      for (int s : node->occurrence) o2.push_back(s);
      CsRes r = cs(n, cur, o2, M);
      wrap_context(r.alts, t, node->occurrence);
      return r;
    }
    // Constructor or literal: pick the matching branch, if any.
    for (auto& child : node->children) {
      Term pat = subterm_at(child->pattern, node->occurrence);
      if (same_root(pat, cur)) return cst(n, t, child.get(), o, M);
    }
    return {{}, false};
  }

  // ----- builtins -------------------------------------------------------

  CsRes descend(const Node& n, const Term& t, const Pos& o, const Memory& M,
                int i) {
    Pos o2 = o;
    o2.push_back(i + 1);
    CsRes r = cs(n, t->args[i], o2, M);
    wrap_context(r.alts, t, {i + 1});
    return r;
  }

  static bool progressed(const CsRes& r) {
    return !r.alts.empty() || !r.suspended;
  }

  CsRes unfold_arg(const Node& n, const Term& t, const Memory& M, int i) {
    Alt a;
    a.e = replace_at(t, {i + 1}, n.theta->at(t->args[i]->name));
    a.M = M;
    a.labels = {"(1)"};
    return {{a}, false};
  }

  bool ground_value(const Node& n, const Term& t) const {
    return detail::reachable_function_free(t, *n.theta, false);
  }

  CsRes fire(const Term& e, const Memory& M, const char* label = "(3.1)") {
    Alt a;
    a.e = e;
    a.M = M;
    a.labels = {label};
    return {{a}, false};
  }

  CsRes cs_builtin(const Node& n, const Term& t, const Pos& o,
                   const Memory& M) {
    auto& as = t->args;
    switch (t->sym->builtin) {
      case Builtin::And: {
        if (term_eq(as[0], true_)) return fire(as[1], M);
        if (term_eq(as[0], false_)) return fire(false_, M);
        if (term_eq(as[1], true_)) return fire(as[0], M);
        if (as[0]->kind == Kind::FVar) return unfold_arg(n, t, M, 0);
        CsRes r = descend(n, t, o, M, 0);
        if (!r.alts.empty()) return r;
        if (!r.suspended) return r;  // left side dead: no rule can apply
        if (as[1]->kind == Kind::FVar) return unfold_arg(n, t, M, 1);
        CsRes r2 = descend(n, t, o, M, 1);
        if (progressed(r2)) return r2;
        return {{}, true};
      }
      case Builtin::Or: {
        if (term_eq(as[0], true_)) return fire(true_, M);
        if (term_eq(as[0], false_)) return fire(as[1], M);
        if (term_eq(as[1], true_)) return fire(true_, M);
        if (as[0]->kind == Kind::FVar) return unfold_arg(n, t, M, 0);
        CsRes r = descend(n, t, o, M, 0);
        if (!r.alts.empty()) return r;
        bool left_dead = !r.suspended;
        if (as[1]->kind == Kind::FVar) return unfold_arg(n, t, M, 1);
        CsRes r2 = descend(n, t, o, M, 1);
        if (!r2.alts.empty()) return r2;
        if (left_dead && !r2.suspended) return {{}, false};
        return {{}, true};
      }
      case Builtin::Cmp: {
        if (ground_value(n, as[0]) && ground_value(n, as[1]))
          return fire(equivalent(slice(n, as[0]), slice(n, as[1])) ? true_
                                                                   : false_,
                      M);
        for (int i = 0; i < 2; ++i) {
          CsRes r = descend(n, t, o, M, i);
          if (progressed(r)) return r;
        }
        return {{}, true};
      }
      case Builtin::Plus:
      case Builtin::Mod: {
        if (as[0]->kind == Kind::Int && as[1]->kind == Kind::Int) {
          long long x = as[0]->ival, y = as[1]->ival;
          if (t->sym->builtin == Builtin::Plus) return fire(mk_int(x + y), M);
          if (y == 0) return {{}, false};
          long long m = x % y;
          if (m != 0 && ((m < 0) != (y < 0))) m += y;
          return fire(mk_int(m), M);
        }
        for (int i = 0; i < 2; ++i) {
          CsRes r = descend(n, t, o, M, i);
          if (progressed(r)) return r;
        }
        return {{}, true};
      }
      case Builtin::Guard: {
        Term c = as[0];
        if (term_eq(c, true_)) return fire(as[1], M);
        if (term_eq(c, false_)) return {{}, false};
        if (c->kind == Kind::FVar) return unfold_arg(n, t, M, 0);
        if (c->kind == Kind::Eq || is_function_call(c))
          return descend(n, t, o, M, 0);
        if (c->kind == Kind::Var) return {{}, true};
        return {{}, false};
      }
      case Builtin::Apply: {
        Term f = as[0];
        if (f->kind == Kind::App && f->args.size() < (size_t)f->sym->arity) {
          std::vector<Term> fa = f->args;
          fa.push_back(as[1]);
          return fire(detail::saturate(mk_app(f->sym, fa)), M);
        }
        if (f->kind == Kind::FVar) return unfold_arg(n, t, M, 0);
        if (is_function_call(f) || f->kind == Kind::Eq)
          return descend(n, t, o, M, 0);
        if (f->kind == Kind::Var) return {{}, true};
        return {{}, false};
      }
      case Builtin::Findall:
        return cs_findall(n, t, M);
      case Builtin::None:
        break;
    }
    throw std::logic_error("unhandled builtin " + t->sym->name);
  }

  // findall g: runs g as its own bounded derivation and returns one list per
  // answer substitution (restricted to g's variables), in arrival order.
  CsRes cs_findall(const Node& n, const Term& t, const Memory& M) {
    CyclicTerm q = slice(n, t->args[0]);
    EngineConfig sc = cfg_;
    sc.step_budget = cfg_.findall_budget;
    sc.max_answers = 256;
    sc.allow_adoption = false;
    sc.workers = 1;
    Derivation d(p_, q, sc, names_);
    d.drain();
    // The collected list must be complete; anything short of full
    // exhaustion leaves the call suspended.
    if (d.outcome() != Outcome::Exhausted) return {{}, true};
    std::set<std::string> qv = vars_of(q.body);
    std::vector<std::string> order;
    std::map<std::string, std::pair<Subst, std::vector<CyclicTerm>>> groups;
    for (auto& a : d.answers()) {
      std::string key = subst_to_string(a.s, qv);
      auto it = groups.find(key);
      if (it == groups.end()) {
        order.push_back(key);
        it = groups.emplace(key, std::make_pair(a.s, std::vector<CyclicTerm>{}))
                 .first;
      }
      it->second.second.push_back(a.value);
    }
    CsRes r;
    if (groups.empty()) {
      Alt a;
      a.e = nil_;
      a.M = M;
      a.labels = {"(3.1)"};
      r.alts.push_back(std::move(a));
      return r;
    }
    for (auto& key : order) {
      auto& [s, vals] = groups[key];
      Alt a;
      a.s = s;
      Term list = nil_;
      for (auto it = vals.rbegin(); it != vals.rend(); ++it) {
        list = mk_app(cons_, {it->body, list});
        for (auto& [y, v] : it->theta) a.s.omega[y] = v;
      }
      a.e = list;
      a.M = M;
      a.labels = {"(3.1)"};
      r.alts.push_back(std::move(a));
    }
    return r;
  }
};

}  // namespace cofl
