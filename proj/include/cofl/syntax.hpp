#pragma once

#include <cctype>
#include <sstream>

#include "cofl/program.hpp"

namespace cofl {

enum class Tok {
  Ident,
  UIdent,
  IntLit,
  StrLit,
  ChrLit,
  LParen,
  RParen,
  LBracket,
  RBracket,
  LBrace,
  RBrace,
  Comma,
  Semi,
  Backslash,
  Arrow,
  Equals,
  GuessArrow,
  GuardArrow,
  OpEq,
  OpAnd,
  OpOr,
  Colon,
  Plus,
  Underscore,
  End,
};

struct Token {
  Tok k = Tok::End;
  std::string text;
  long long ival = 0;
  int line = 1, col = 1;
};

struct ParseError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

namespace detail {

inline bool ident_char(char c) {
  return std::isalnum((unsigned char)c) || c == '_' || c == '\'';
}

inline std::vector<Token> lex(const std::string& src) {
  std::vector<Token> out;
  int line = 1, col = 1;
  size_t i = 0;
  auto err = [&](const std::string& m) {
    throw ParseError(m + " at " + std::to_string(line) + ":" +
                     std::to_string(col));
  };
  auto push = [&](Tok k, std::string t = "", long long v = 0) {
    out.push_back({k, std::move(t), v, line, col});
  };
  while (i < src.size()) {
    char c = src[i];
    if (c == '\n') {
      ++line;
      col = 1;
      ++i;
      continue;
    }
    if (c == ' ' || c == '\t' || c == '\r') {
      ++col;
      ++i;
      continue;
    }
    if (c == '-' && i + 1 < src.size() && src[i + 1] == '-') {
      while (i < src.size() && src[i] != '\n') ++i;
      continue;
    }
    int c0 = col;
    if (std::isdigit((unsigned char)c)) {
      size_t j = i;
      while (j < src.size() && std::isdigit((unsigned char)src[j])) ++j;
      out.push_back({Tok::IntLit, src.substr(i, j - i),
                     std::stoll(src.substr(i, j - i)), line, c0});
      col += (int)(j - i);
      i = j;
      continue;
    }
    if (std::isalpha((unsigned char)c) ||
        (c == '_' && i + 1 < src.size() && ident_char(src[i + 1]))) {
      size_t j = i + 1;
      while (j < src.size() && ident_char(src[j])) ++j;
      std::string t = src.substr(i, j - i);
      out.push_back({std::isupper((unsigned char)c) ? Tok::UIdent : Tok::Ident,
                     t, 0, line, c0});
      col += (int)(j - i);
      i = j;
      continue;
    }
    auto two = [&](char a, char b) {
      return c == a && i + 1 < src.size() && src[i + 1] == b;
    };
    if (two('-', '>')) { push(Tok::Arrow); i += 2; col += 2; continue; }
    if (two('~', '>')) { push(Tok::GuessArrow); i += 2; col += 2; continue; }
    if (two('=', '=')) { push(Tok::OpEq); i += 2; col += 2; continue; }
    if (two('=', '>')) { push(Tok::GuardArrow); i += 2; col += 2; continue; }
    if (two('&', '&')) { push(Tok::OpAnd); i += 2; col += 2; continue; }
    if (two('|', '|')) { push(Tok::OpOr); i += 2; col += 2; continue; }
    switch (c) {
      case '=': push(Tok::Equals); break;
      case ':': push(Tok::Colon); break;
      case '+': push(Tok::Plus); break;
      case '(': push(Tok::LParen); break;
      case ')': push(Tok::RParen); break;
      case '[': push(Tok::LBracket); break;
      case ']': push(Tok::RBracket); break;
      case '{': push(Tok::LBrace); break;
      case '}': push(Tok::RBrace); break;
      case ',': push(Tok::Comma); break;
      case ';': push(Tok::Semi); break;
      case '\\': push(Tok::Backslash); break;
      case '_': push(Tok::Underscore); break;
      case '"': {
        size_t j = i + 1;
        while (j < src.size() && src[j] != '"' && src[j] != '\n') ++j;
        if (j >= src.size() || src[j] != '"') err("unterminated string");
        push(Tok::StrLit, src.substr(i + 1, j - i - 1));
        col += (int)(j - i + 1);
        i = j + 1;
        continue;
      }
      case '\'': {
        if (i + 2 >= src.size() || src[i + 2] != '\'')
          err("bad character literal");
        push(Tok::ChrLit, std::string(1, src[i + 1]));
        col += 3;
        i += 3;
        continue;
      }
      default: err(std::string("unexpected character `") + c + "`");
    }
    ++i;
    ++col;
  }
  out.push_back({Tok::End, "", 0, line, col});
  return out;
}

// Head shape of a definition: name plus top-level argument count.
inline std::pair<std::string, int> scan_head(const std::vector<Token>& ts) {
  if (ts.empty() || ts[0].k != Tok::Ident)
    throw ParseError("definition must start with a function name");
  int depth = 0, n = 0;
  for (size_t i = 1; i < ts.size(); ++i) {
    Tok k = ts[i].k;
    if (depth == 0 && (k == Tok::Equals || k == Tok::GuessArrow))
      return {ts[0].text, n};
    switch (k) {
      case Tok::LParen:
      case Tok::LBracket:
      case Tok::LBrace:
        if (depth == 0) ++n;
        ++depth;
        break;
      case Tok::RParen:
      case Tok::RBracket:
      case Tok::RBrace: --depth; break;
      case Tok::Ident:
      case Tok::UIdent:
      case Tok::IntLit:
      case Tok::StrLit:
      case Tok::ChrLit:
      case Tok::Underscore:
        if (depth == 0) ++n;
        break;
      default:
        if (depth == 0)
          throw ParseError("unexpected token in the head of `" + ts[0].text +
                           "`");
    }
  }
  throw ParseError("definition of `" + ts[0].text + "` has no = or ~>");
}

}  // namespace detail

// A definition starts on a line with no leading whitespace; indented lines
// continue it.
inline std::vector<std::string> split_definitions(const std::string& text) {
  std::vector<std::string> defs;
  std::string cur;
  auto flush = [&] {
    if (cur.find_first_not_of(" \t\r\n") != std::string::npos)
      defs.push_back(cur);
    cur.clear();
  };
  std::istringstream in(text);
  std::string ln;
  while (std::getline(in, ln)) {
    bool blank = ln.find_first_not_of(" \t\r") == std::string::npos;
    if (blank) {
      if (!cur.empty()) cur += "\n";
      continue;
    }
    if (!std::isspace((unsigned char)ln[0])) flush();
    cur += ln + "\n";
  }
  flush();
  return defs;
}

inline void init_signature(Signature& sig) {
  sig.intern("True", 0, false);
  sig.intern("False", 0, false);
  sig.intern("[]", 0, false);
  sig.intern(":", 2, false);
  sig.intern("&&", 2, true, Builtin::And);
  sig.intern("||", 2, true, Builtin::Or);
  sig.intern("==", 2, true, Builtin::Cmp);
  sig.intern("=>", 2, true, Builtin::Guard);
  sig.intern("+", 2, true, Builtin::Plus);
  sig.intern("mod", 2, true, Builtin::Mod);
  sig.intern("apply", 2, true, Builtin::Apply);
  sig.intern("findall", 1, true, Builtin::Findall);
}

class Parser {
 public:
  Parser(Program& p, NameSupply& names, std::vector<Token> toks)
      : p_(p), names_(names), ts_(std::move(toks)) {
    and_sym_ = p.sig->lookup("&&");
    or_sym_ = p.sig->lookup("||");
    cmp_sym_ = p.sig->lookup("==");
    guard_sym_ = p.sig->lookup("=>");
    plus_sym_ = p.sig->lookup("+");
    cons_sym_ = p.sig->lookup(":");
    nil_sym_ = p.sig->lookup("[]");
    apply_sym_ = p.sig->lookup("apply");
  }

  void parse_rule() {
    Token h = eat(Tok::Ident, "rule head");
    std::vector<Term> args;
    while (!at(Tok::Equals)) args.push_back(atom());
    eat(Tok::Equals, "=");
    Term rhs = expr();
    expect_end();
    const Symbol* f = p_.sig->lookup(h.text);
    if (!f || !f->is_function) fail("`" + h.text + "` is not a function");
    std::set<std::string> seen;
    for (auto& a : args) validate_pattern(a, seen);
    for (auto& v : vars_of(rhs))
      if (!seen.count(v))
        fail("variable `" + v + "` of the right-hand side is not bound in `" +
             h.text + "`'s patterns");
    if (!fvars_of(rhs).empty() || !has_no_fvar(args))
      fail("rules must not mention frozen variables");
    p_.rules.push_back({mk_app(f, args), rhs, (int)p_.rules.size()});
  }

  void parse_guess() {
    Token h = eat(Tok::Ident, "guess head");
    std::vector<Term> args;
    while (!at(Tok::GuessArrow)) args.push_back(atom());
    eat(Tok::GuessArrow, "~>");
    eat(Tok::LBrace, "{");
    std::vector<Term> results;
    for (;;) {
      results.push_back(expr());
      if (at(Tok::Comma)) {
        ++i_;
        continue;
      }
      break;
    }
    eat(Tok::RBrace, "}");
    expect_end();
    const Symbol* f = p_.sig->lookup(h.text);
    if (!f || !f->is_function) fail("`" + h.text + "` is not a function");
    std::set<std::string> seen;
    for (auto& a : args) validate_pattern(a, seen);
    for (auto& r : results)
      for (auto& v : vars_of(r))
        if (!seen.count(v) && v[0] != '_')
          fail("guess result mentions unknown variable `" + v + "`");
    p_.guesses.push_back({mk_app(f, args), results});
  }

  // expr [ { y -> t, ... } ]
  CyclicTerm parse_cyclic() {
    Term body = expr();
    std::vector<std::pair<std::string, Term>> binds;
    if (at(Tok::LBrace)) {
      ++i_;
      for (;;) {
        Token y = eat(Tok::Ident, "frozen variable");
        eat(Tok::Arrow, "->");
        binds.push_back({y.text, expr()});
        if (at(Tok::Comma)) {
          ++i_;
          continue;
        }
        break;
      }
      eat(Tok::RBrace, "}");
    }
    expect_end();
    std::map<std::string, Term> fm;
    for (auto& [y, v] : binds) {
      (void)v;
      if (fm.count(y)) fail("frozen variable `" + y + "` bound twice");
      fm[y] = mk_fvar(y);
      names_.reserve(y);
    }
    CyclicTerm ct{subst_vars(body, fm), {}};
    for (auto& [y, v] : binds) ct.theta[y] = subst_vars(v, fm);
    validate(ct);
    return ct;
  }

  Term expr() { return p_guard(); }

 private:
  Program& p_;
  NameSupply& names_;
  std::vector<Token> ts_;
  size_t i_ = 0;
  int let_depth_ = 0;
  std::vector<std::string> bound_;
  const Symbol *and_sym_, *or_sym_, *cmp_sym_, *guard_sym_, *plus_sym_,
      *cons_sym_, *nil_sym_, *apply_sym_;

  const Token& cur() const { return ts_[i_]; }
  const Token& peek(size_t n) const {
    return ts_[std::min(i_ + n, ts_.size() - 1)];
  }
  bool at(Tok k) const { return cur().k == k; }

  [[noreturn]] void fail(const std::string& msg) const {
    throw ParseError(msg + " (at " + std::to_string(cur().line) + ":" +
                     std::to_string(cur().col) + ")");
  }

  Token eat(Tok k, const char* what) {
    if (!at(k)) fail(std::string("expected ") + what);
    return ts_[i_++];
  }

  void expect_end() {
    if (!at(Tok::End)) fail("unexpected trailing input");
  }

  static bool has_no_fvar(const std::vector<Term>& ts) {
    for (auto& t : ts)
      if (!fvars_of(t).empty()) return false;
    return true;
  }

  void validate_pattern(const Term& t, std::set<std::string>& seen) {
    switch (t->kind) {
      case Kind::Var:
        if (!seen.insert(t->name).second)
          fail("pattern variable `" + t->name + "` occurs twice");
        return;
      case Kind::Int: return;
      case Kind::FVar: fail("frozen variable in pattern");
      case Kind::Eq: fail("equation in pattern");
      case Kind::App:
        if (t->sym->is_function)
          fail("function `" + t->sym->name + "` in pattern");
        if ((int)t->args.size() < t->sym->arity)
          fail("partially applied constructor in pattern");
        for (auto& a : t->args) validate_pattern(a, seen);
        return;
    }
  }

  bool starts_atom() const {
    switch (cur().k) {
      case Tok::Ident:
        if (let_depth_ > 0) {
          if (cur().text == "in") return false;
          if (cur().text == "and" && peek(1).k == Tok::Ident &&
              peek(2).k == Tok::Equals)
            return false;
        }
        return true;
      case Tok::UIdent:
      case Tok::IntLit:
      case Tok::StrLit:
      case Tok::ChrLit:
      case Tok::Underscore:
      case Tok::LBracket:
      case Tok::LParen:
      case Tok::Backslash: return true;
      default: return false;
    }
  }

  Term p_guard() {
    Term l = p_or();
    if (at(Tok::GuardArrow)) {
      ++i_;
      return mk_app(guard_sym_, {l, p_guard()});
    }
    return l;
  }
  Term p_or() {
    Term l = p_and();
    if (at(Tok::OpOr)) {
      ++i_;
      return mk_app(or_sym_, {l, p_or()});
    }
    return l;
  }
  Term p_and() {
    Term l = p_cmp();
    if (at(Tok::OpAnd)) {
      ++i_;
      return mk_app(and_sym_, {l, p_and()});
    }
    return l;
  }
  Term p_cmp() {
    Term l = p_cons();
    if (at(Tok::OpEq)) {
      ++i_;
      return mk_app(cmp_sym_, {l, p_cons()});
    }
    return l;
  }
  Term p_cons() {
    Term l = p_add();
    if (at(Tok::Colon)) {
      ++i_;
      return mk_app(cons_sym_, {l, p_cons()});
    }
    return l;
  }
  Term p_add() {
    Term l = p_app();
    while (at(Tok::Plus)) {
      ++i_;
      l = mk_app(plus_sym_, {l, p_app()});
    }
    return l;
  }
  Term p_app() {
    Term h = atom();
    while (starts_atom()) h = apply1(h, atom());
    return h;
  }

  Term apply1(const Term& h, const Term& a) {
    if (h->kind == Kind::App && (int)h->args.size() < h->sym->arity) {
      std::vector<Term> args = h->args;
      args.push_back(a);
      return mk_app(h->sym, args);
    }
    return mk_app(apply_sym_, {h, a});
  }

  Term resolve(const std::string& name) {
    for (auto& b : bound_)
      if (b == name) return mk_var(name);
    if (const Symbol* s = p_.sig->lookup(name)) return mk_app(s, {});
    names_.reserve(name);
    return mk_var(name);
  }

  Term atom() {
    Token t = cur();
    switch (t.k) {
      case Tok::Ident:
        if (t.text == "let") return p_let();
        ++i_;
        return resolve(t.text);
      case Tok::UIdent: ++i_; return mk_app(p_.sig->intern(t.text, 0, false), {});
      case Tok::IntLit: ++i_; return mk_int(t.ival);
      case Tok::StrLit:
        ++i_;
        return mk_app(p_.sig->literal("\"" + t.text + "\""), {});
      case Tok::ChrLit:
        ++i_;
        return mk_app(p_.sig->literal("'" + t.text + "'"), {});
      case Tok::Underscore: ++i_; return mk_var(names_.fresh("_"));
      case Tok::LBracket: {
        ++i_;
        std::vector<Term> elems;
        if (!at(Tok::RBracket)) {
          for (;;) {
            elems.push_back(expr());
            if (at(Tok::Comma)) {
              ++i_;
              continue;
            }
            break;
          }
        }
        eat(Tok::RBracket, "]");
        Term l = mk_app(nil_sym_, {});
        for (auto it = elems.rbegin(); it != elems.rend(); ++it)
          l = mk_app(cons_sym_, {*it, l});
        return l;
      }
      case Tok::LParen: {
        ++i_;
        if (at(Tok::OpEq)) {
          ++i_;
          Term r = p_cons();
          eat(Tok::RParen, ")");
          if (!vars_of(r).empty() || !fvars_of(r).empty())
            fail("section operand must be closed");
          return section_ref(r);
        }
        Term e = expr();
        eat(Tok::RParen, ")");
        return e;
      }
      case Tok::Backslash: return p_lambda();
      default: fail("expected an expression");
    }
  }

  Term p_let() {
    ++i_;  // let
    std::vector<std::pair<std::string, Term>> binds;
    for (;;) {
      Token x = eat(Tok::Ident, "let binding name");
      eat(Tok::Equals, "=");
      ++let_depth_;
      Term rhs = expr();
      --let_depth_;
      binds.push_back({x.text, rhs});
      if (at(Tok::Ident) && cur().text == "and" && peek(1).k == Tok::Ident &&
          peek(2).k == Tok::Equals) {
        ++i_;
        continue;
      }
      break;
    }
    if (!(at(Tok::Ident) && cur().text == "in"))
      fail("expected `in` after let bindings");
    ++i_;
    Term body = expr();
    std::map<std::string, Term> m(binds.begin(), binds.end());
    if (m.size() != binds.size()) fail("duplicate let binding");
    return subst_vars(body, m);
  }

  Term p_lambda() {
    ++i_;  // backslash
    std::vector<std::string> params;
    while (at(Tok::Ident)) {
      params.push_back(cur().text);
      names_.reserve(cur().text);
      ++i_;
    }
    if (params.empty()) fail("lambda needs a parameter");
    eat(Tok::Arrow, "->");
    for (auto& v : params) bound_.push_back(v);
    Term body = expr();
    bound_.resize(bound_.size() - params.size());
    return lift_lambda(params, body);
  }

  static void free_in_order(const Term& t, const std::set<std::string>& skip,
                            std::set<std::string>& seen,
                            std::vector<std::string>& out) {
    if (t->kind == Kind::Var) {
      if (!skip.count(t->name) && seen.insert(t->name).second)
        out.push_back(t->name);
      return;
    }
    for (auto& a : t->args) free_in_order(a, skip, seen, out);
  }

  Term section_ref(const Term& r) {
    std::string key = "sec|==|" + to_string(r);
    auto it = p_.lift_memo.find(key);
    const Symbol* f;
    if (it != p_.lift_memo.end()) {
      f = it->second;
    } else {
      std::string disp = "(==" + to_string(r, 5) + ")";
      f = p_.sig->intern(names_.fresh("sec"), 1, true, Builtin::None, disp,
                         true);
      std::string v = names_.fresh("x");
      p_.rules.push_back({mk_app(f, {mk_var(v)}),
                          mk_app(cmp_sym_, {mk_var(v), r}),
                          (int)p_.rules.size()});
      p_.sections[f] = {"==", r};
      p_.lift_memo.emplace(key, f);
    }
    return mk_app(f, {});
  }

  // A one-parameter comparison against a closed operand becomes a canonical
  // section; anything else becomes a fresh top-level function over its free
  // variables.
  Term lift_lambda(const std::vector<std::string>& params, const Term& body) {
    if (params.size() == 1 && body->kind == Kind::App &&
        body->sym == cmp_sym_ && body->args.size() == 2 &&
        is_var(body->args[0]) && body->args[0]->name == params[0] &&
        vars_of(body->args[1]).empty() && fvars_of(body->args[1]).empty())
      return section_ref(body->args[1]);
    std::set<std::string> ps(params.begin(), params.end());
    std::set<std::string> seen;
    std::vector<std::string> fvs;
    free_in_order(body, ps, seen, fvs);
    std::string key = "lam|";
    for (auto& v : params) key += v + ",";
    key += "|" + to_string(body);
    auto it = p_.lift_memo.find(key);
    const Symbol* f;
    if (it != p_.lift_memo.end()) {
      f = it->second;
    } else {
      f = p_.sig->intern(names_.fresh("lam"),
                         (int)(fvs.size() + params.size()), true);
      std::vector<Term> largs;
      for (auto& v : fvs) largs.push_back(mk_var(v));
      for (auto& v : params) largs.push_back(mk_var(v));
      p_.rules.push_back({mk_app(f, largs), body, (int)p_.rules.size()});
      p_.lift_memo.emplace(key, f);
    }
    std::vector<Term> occ;
    for (auto& v : fvs) occ.push_back(mk_var(v));
    return mk_app(f, occ);
  }
};

inline const char* prelude_source() {
  return "not True = False\n"
         "not False = True\n"
         "\n"
         "elem x [] = False\n"
         "elem x (y:ys) = (x == y) || (elem x ys)\n";
}

// Builds a program from named sources (the prelude is always included).
inline Program make_program(
    const std::vector<std::pair<std::string, std::string>>& files,
    NameSupply& names) {
  Program p;
  p.sig = std::make_shared<Signature>();
  init_signature(*p.sig);

  enum class DefKind { Data, Rule, Guess };
  struct Chunk {
    DefKind kind;
    std::vector<Token> toks;
    std::string where;
  };
  std::vector<Chunk> chunks;

  auto add_source = [&](const std::string& where, const std::string& text) {
    for (auto& def : split_definitions(text)) {
      std::vector<Token> toks;
      try {
        toks = detail::lex(def);
      } catch (ParseError& e) {
        throw ParseError(std::string(e.what()) + " in " + where);
      }
      // ; separates definitions on one line
      std::vector<std::vector<Token>> pieces(1);
      int depth = 0;
      for (auto& t : toks) {
        if (t.k == Tok::LParen || t.k == Tok::LBracket || t.k == Tok::LBrace)
          ++depth;
        else if (t.k == Tok::RParen || t.k == Tok::RBracket ||
                 t.k == Tok::RBrace)
          --depth;
        if (t.k == Tok::Semi && depth == 0) {
          pieces.emplace_back();
          continue;
        }
        if (t.k == Tok::End) continue;
        pieces.back().push_back(t);
      }
      for (auto& piece : pieces) {
        if (piece.empty()) continue;
        piece.push_back({Tok::End, "", 0, 0, 0});
        DefKind kind;
        if (piece[0].k == Tok::Ident && piece[0].text == "data") {
          kind = DefKind::Data;
        } else {
          kind = DefKind::Rule;
          int d = 0;
          for (auto& t : piece) {
            if (t.k == Tok::LParen || t.k == Tok::LBracket ||
                t.k == Tok::LBrace)
              ++d;
            else if (t.k == Tok::RParen || t.k == Tok::RBracket ||
                     t.k == Tok::RBrace)
              --d;
            else if (d == 0 && t.k == Tok::GuessArrow) {
              kind = DefKind::Guess;
              break;
            } else if (d == 0 && t.k == Tok::Equals) {
              break;
            }
          }
        }
        chunks.push_back({kind, std::move(piece), where});
      }
    }
  };

  add_source("prelude", prelude_source());
  for (auto& [where, text] : files) add_source(where, text);

  auto rethrow = [](ParseError& e, const Chunk& c) {
    throw ParseError(std::string(e.what()) + " in " + c.where);
  };

  // Pass 1: declared constructors, then function arities.
  for (auto& c : chunks) {
    if (c.kind != DefKind::Data) continue;
    for (size_t j = 1; c.toks[j].k != Tok::End; ++j) {
      if (c.toks[j].k != Tok::Ident)
        throw ParseError("data declares lowercase constructor names in " +
                         c.where);
      p.sig->intern(c.toks[j].text, 0, false);
    }
  }
  for (auto& c : chunks) {
    if (c.kind == DefKind::Data) continue;
    try {
      auto [name, arity] = detail::scan_head(c.toks);
      p.sig->intern(name, arity, true);
    } catch (ParseError& e) {
      rethrow(e, c);
    }
  }

  // Pass 2: full parse.
  for (auto& c : chunks) {
    try {
      Parser ps(p, names, c.toks);
      if (c.kind == DefKind::Rule)
        ps.parse_rule();
      else if (c.kind == DefKind::Guess)
        ps.parse_guess();
    } catch (ParseError& e) {
      rethrow(e, c);
    }
  }

  std::map<const Symbol*, std::vector<RewriteRule>> by_sym;
  for (auto& r : p.rules) by_sym[r.lhs->sym].push_back(r);
  for (auto& [f, rs] : by_sym) p.trees[f] = build_definitional_tree(f, rs, names);
  for (auto& g : p.guesses) {
    if (!p.trees.count(g.head->sym))
      throw ParseError("guess declared for `" + g.head->sym->name +
                       "` which has no rules");
    p.guess_heads.insert(g.head->sym);
  }
  return p;
}

// Parses `t` or `t {y1 -> t1, ...}` against an existing program's symbols.
inline CyclicTerm parse_query(Program& p, const std::string& text,
                              NameSupply& names) {
  Parser ps(p, names, detail::lex(text));
  return ps.parse_cyclic();
}

}  // namespace cofl
