#pragma once

#include "cofl/session.hpp"

namespace cofl {
namespace corpus {

// Golden derivations are line files: `term ;; labels`, labels comma-joined
// and possibly empty. The first row is the query itself. A recorded
// derivation matches when every golden row appears along one answer's path,
// in order, with the row's labels embedded in the steps taken since the
// previous row and the last label landing on the edge into the matched
// state. Extra intermediate states are allowed; printed rows often compress
// several atomic steps.
struct GoldenRow {
  std::string term;
  std::vector<std::string> labels;
};

inline std::vector<std::string> split_on(const std::string& s,
                                         const std::string& sep) {
  std::vector<std::string> out;
  size_t b = 0;
  for (;;) {
    size_t e = s.find(sep, b);
    if (e == std::string::npos) {
      out.push_back(s.substr(b));
      return out;
    }
    out.push_back(s.substr(b, e - b));
    b = e + sep.size();
  }
}

inline std::vector<GoldenRow> load_golden(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open golden file: " + path);
  std::vector<GoldenRow> rows;
  std::string line;
  while (std::getline(in, line)) {
    std::string s = Session::trim_copy(line);
    if (s.empty() || s[0] == '#') continue;
    std::vector<std::string> fields = split_on(s, ";;");
    GoldenRow r;
    r.term = Session::trim_copy(fields[0]);
    if (fields.size() > 1)
      for (auto& l : split_on(fields[1], ","))
        if (!Session::trim_copy(l).empty())
          r.labels.push_back(Session::trim_copy(l));
    rows.push_back(std::move(r));
  }
  if (rows.empty()) throw std::runtime_error("empty golden file: " + path);
  return rows;
}

// Equations produced by circularity resolution and the comparison builtin
// both print as `l == r`; fold the former into the latter so parsed golden
// rows align with engine states.
inline Term fold_equations(const Term& t, Signature& sig) {
  const Symbol* cmp = sig.intern("==", 2, true, Builtin::Cmp);
  std::function<Term(const Term&)> go = [&](const Term& u) -> Term {
    switch (u->kind) {
      case Kind::Eq:
        return mk_app(cmp, {go(u->args[0]), go(u->args[1])});
      case Kind::App: {
        std::vector<Term> as;
        as.reserve(u->args.size());
        bool changed = false;
        for (auto& c : u->args) {
          Term c2 = go(c);
          changed |= (c2 != c);
          as.push_back(std::move(c2));
        }
        return changed ? mk_app(u->sym, as) : u;
      }
      default:
        return u;
    }
  };
  return go(t);
}

// Ground data: constructor and literal structure only, nothing that could
// still step and nothing variable.
inline bool pure_data(const Term& t, const Program& p) {
  switch (t->kind) {
    case Kind::Var:
    case Kind::FVar:
    case Kind::Eq:
      return false;
    case Kind::App:
      if (p.trees.count(t->sym)) return false;
      if (t->sym->builtin != Builtin::None) return false;
      for (auto& a : t->args)
        if (!pure_data(a, p)) return false;
      return true;
    default:
      return true;
  }
}

// A nullary function with one rule and a ground data body denotes that value
// everywhere; whether a derivation has stepped through it yet is a matter of
// timing, not meaning, so comparison inlines it.
inline Term inline_constants(const Term& t, Program& p) {
  if (t->kind == Kind::App && t->args.size() == 1) {
    // A lifted section applied to its argument is the underlying
    // comparison; unapplied sections stay as they are.
    auto ss = p.sections.find(t->sym);
    if (ss != p.sections.end()) {
      const Symbol* op = p.sig->lookup(ss->second.first);
      if (op)
        return inline_constants(mk_app(op, {t->args[0], ss->second.second}),
                                p);
    }
  }
  if (t->kind == Kind::App && t->args.empty() && p.trees.count(t->sym)) {
    const RewriteRule* only = nullptr;
    for (auto& r : p.rules) {
      if (r.lhs->kind != Kind::App || r.lhs->sym != t->sym) continue;
      if (only) return t;  // nondeterministic constant: keep
      only = &r;
    }
    if (only && only->lhs->args.empty() && pure_data(only->rhs, p))
      return only->rhs;
    return t;
  }
  if (t->args.empty()) return t;
  std::vector<Term> as;
  as.reserve(t->args.size());
  bool changed = false;
  for (auto& a : t->args) {
    Term a2 = inline_constants(a, p);
    changed |= (a2 != a);
    as.push_back(std::move(a2));
  }
  if (!changed) return t;
  auto n = std::make_shared<TermNode>(*t);
  n->args = std::move(as);
  return n;
}

// Canonical form for comparing states modulo variable renaming: variables
// are renumbered in first-visit order of a traversal that follows frozen
// bindings, after which structural equivalence decides.
inline CyclicTerm norm_state(const CyclicTerm& t0, Program& p) {
  Signature& sig = *p.sig;
  CyclicTerm t = gc(t0);
  t.body = inline_constants(fold_equations(t.body, sig), p);
  for (auto& [y, v] : t.theta)
    v = inline_constants(fold_equations(v, sig), p);
  std::map<std::string, std::string> ren;
  std::set<std::string> seenf;
  std::function<void(const Term&)> walk = [&](const Term& u) {
    if (u->kind == Kind::Var) {
      ren.emplace(u->name, "$s" + std::to_string(ren.size()));
      return;
    }
    if (u->kind == Kind::FVar) {
      if (seenf.insert(u->name).second) {
        auto it = t.theta.find(u->name);
        if (it != t.theta.end()) walk(it->second);
      }
      return;
    }
    for (auto& c : u->args) walk(c);
  };
  walk(t.body);
  std::map<std::string, Term> m;
  for (auto& [a, b] : ren) m.emplace(a, mk_var(b));
  CyclicTerm out;
  out.body = subst_vars(t.body, m);
  for (auto& [y, v] : t.theta) out.theta.emplace(y, subst_vars(v, m));
  return out;
}

inline bool states_match(const CyclicTerm& a, const CyclicTerm& b,
                         Program& p) {
  return equivalent(norm_state(a, p), norm_state(b, p));
}

inline bool labels_embed(const std::vector<std::string>& got,
                         const std::vector<std::string>& want) {
  if (want.empty()) return true;
  if (got.empty() || got.back() != want.back()) return false;
  size_t i = 0;
  for (size_t j = 0; j + 1 < got.size() && i + 1 < want.size(); ++j)
    if (got[j] == want[i]) ++i;
  return i + 1 >= want.size();
}

inline bool path_matches(const std::vector<TraceRow>& path,
                         const std::vector<GoldenRow>& rows, Program& p,
                         NameSupply& names) {
  if (path.empty()) return false;
  std::vector<CyclicTerm> want;
  want.reserve(rows.size());
  for (auto& r : rows)
    want.push_back(norm_state(parse_query(p, r.term, names), p));
  std::vector<CyclicTerm> got;
  got.reserve(path.size());
  for (auto& s : path) got.push_back(norm_state(s.state, p));
  if (!equivalent(got[0], want[0])) return false;
  std::set<std::pair<size_t, size_t>> dead;
  std::function<bool(size_t, size_t)> go = [&](size_t k, size_t j) -> bool {
    if (k == rows.size()) return true;
    if (dead.count({k, j})) return false;
    std::vector<std::string> acc;
    for (size_t j2 = j + 1; j2 < path.size(); ++j2) {
      acc.insert(acc.end(), path[j2].labels.begin(), path[j2].labels.end());
      if (equivalent(got[j2], want[k]) && labels_embed(acc, rows[k].labels))
        if (go(k + 1, j2)) return true;
    }
    dead.insert({k, j});
    return false;
  };
  return go(1, 0);
}

// Answer-level checks used by manifest `query` lines.
inline bool value_matches(const CyclicTerm& got, const CyclicTerm& want,
                          Program& p) {
  return states_match(got, want, p);
}

inline bool image_cyclic(const CyclicTerm& im) {
  TermGraph g = build_graph(im);
  std::vector<int> color(g.verts.size(), 0);
  std::function<bool(int)> dfs = [&](int v) -> bool {
    color[v] = 1;
    for (int k : g.kids[v]) {
      if (color[k] == 1) return true;
      if (color[k] == 0 && dfs(k)) return true;
    }
    color[v] = 2;
    return false;
  };
  return g.root >= 0 && dfs(g.root);
}

struct CheckOutcome {
  bool ok = true;
  std::string why;
};

inline CheckOutcome run_checks(Session& ses, Evaluation& ev,
                               const std::vector<std::string>& checks) {
  Program& p = ses.program();
  auto starts = [](const std::string& s, const char* pre) {
    return s.rfind(pre, 0) == 0;
  };
  for (auto& raw : checks) {
    std::string c = Session::trim_copy(raw);
    if (c == "none") {
      if (!ev.shown.empty())
        return {false, "expected no answers, got " +
                           std::to_string(ev.shown.size())};
    } else if (starts(c, "value ")) {
      CyclicTerm want =
          parse_query(p, Session::trim_copy(c.substr(6)), ses.names());
      bool hit = false;
      for (auto& a : ev.shown)
        if (value_matches(a.value, want, p)) {
          hit = true;
          break;
        }
      if (!hit) return {false, "no answer with value: " + c.substr(6)};
    } else if (starts(c, "binds ")) {
      std::istringstream is(c.substr(6));
      std::string var;
      is >> var;
      std::string rest;
      std::getline(is, rest);
      CyclicTerm want =
          parse_query(p, Session::trim_copy(rest), ses.names());
      bool hit = false;
      for (auto& a : ev.shown)
        if (value_matches(image_of(a.s, var), want, p)) {
          hit = true;
          break;
        }
      if (!hit) return {false, "no answer binding " + var + " to " + rest};
    } else if (starts(c, "cyclic ")) {
      std::string var = Session::trim_copy(c.substr(7));
      bool hit = false;
      for (auto& a : ev.shown)
        if (image_cyclic(image_of(a.s, var))) {
          hit = true;
          break;
        }
      if (!hit) return {false, "no answer binding " + var + " cyclically"};
    } else if (starts(c, "count ")) {
      size_t n = std::stoul(Session::trim_copy(c.substr(6)));
      if (ev.shown.size() != n)
        return {false, "expected " + std::to_string(n) + " answers, got " +
                           std::to_string(ev.shown.size())};
    } else if (starts(c, "outcome ")) {
      std::string want = Session::trim_copy(c.substr(8));
      if (want != outcome_text(ev.outcome()))
        return {false, std::string("outcome was ") +
                           outcome_text(ev.outcome()) + ", expected " + want};
    } else {
      return {false, "unknown check: " + c};
    }
  }
  return {};
}

// Runs a manifest: line-oriented, `#` comments. Directives:
//   program <path> [<path>...]   load these files as the current program
//   budget N | answers N | workers N | full-memory on|off
//   query <text> ;; <check> [;; <check>...]
//   trace <golden-file>
// Checks: value <term>, binds <var> <term>, cyclic <var>, count N, none,
// outcome <text>. Paths resolve relative to the manifest.
inline int run_manifest(const std::string& path, std::ostream& os) {
  namespace fs = std::filesystem;
  std::ifstream in(path);
  if (!in) {
    os << "cannot open manifest: " << path << "\n";
    return 2;
  }
  fs::path dir = fs::path(path).parent_path();
  auto resolve = [&](const std::string& rel) {
    fs::path q(rel);
    return q.is_absolute() ? q.string() : (dir / q).string();
  };
  SessionConfig cfg;
  std::unique_ptr<Session> ses;
  int checked = 0, failed = 0, lineno = 0;
  std::string line;
  while (std::getline(in, line)) {
    ++lineno;
    std::string s = Session::trim_copy(line);
    if (s.empty() || s[0] == '#') continue;
    std::istringstream is(s);
    std::string word;
    is >> word;
    std::string rest = Session::trim_copy(s.substr(word.size()));
    try {
      if (word == "program") {
        cfg.program_paths.clear();
        std::istringstream ps(rest);
        std::string p;
        while (ps >> p) cfg.program_paths.push_back(resolve(p));
        ses = std::make_unique<Session>(cfg);
      } else if (word == "budget") {
        cfg.step_budget = std::stoul(rest);
        if (ses) ses->config().step_budget = cfg.step_budget;
      } else if (word == "answers") {
        cfg.max_answers = std::stoul(rest);
        if (ses) ses->config().max_answers = cfg.max_answers;
      } else if (word == "workers") {
        cfg.workers = std::stoi(rest);
        if (ses) ses->config().workers = cfg.workers;
      } else if (word == "full-memory") {
        cfg.full_memory = (rest == "on");
        if (ses) ses->config().full_memory = cfg.full_memory;
      } else if (word == "query") {
        if (!ses) throw std::runtime_error("query before any program line");
        std::vector<std::string> fields = split_on(rest, ";;");
        std::string qtext = Session::trim_copy(fields[0]);
        std::vector<std::string> checks(fields.begin() + 1, fields.end());
        ++checked;
        Evaluation ev = ses->eval(qtext);
        CheckOutcome co = run_checks(*ses, ev, checks);
        if (co.ok) {
          os << "ok: " << qtext << "\n";
        } else {
          ++failed;
          os << "FAIL (line " << lineno << "): " << qtext << ": " << co.why
             << "\n";
        }
      } else if (word == "trace") {
        if (!ses) throw std::runtime_error("trace before any program line");
        std::vector<GoldenRow> rows = load_golden(resolve(rest));
        ++checked;
        int saved = ses->config().workers;
        ses->config().workers = 1;
        Evaluation ev = ses->eval(rows[0].term);
        ses->config().workers = saved;
        const Derivation& d = ev.stream->derivation();
        bool hit = false;
        for (auto& a : d.answers()) {
          if (path_matches(answer_path(d, a.node), rows, ses->program(),
                           ses->names())) {
            hit = true;
            break;
          }
        }
        if (hit) {
          os << "ok: trace " << rest << "\n";
        } else {
          ++failed;
          os << "FAIL (line " << lineno << "): trace " << rest
             << ": no emitted derivation follows the recorded rows\n";
        }
      } else {
        throw std::runtime_error("unknown directive: " + word);
      }
    } catch (const std::exception& e) {
      ++failed;
      ++checked;
      os << "FAIL (line " << lineno << "): " << e.what() << "\n";
    }
  }
  os << (checked - failed) << "/" << checked << " checks passed\n";
  return failed == 0 ? 0 : 2;
}

}  // namespace corpus
}  // namespace cofl
