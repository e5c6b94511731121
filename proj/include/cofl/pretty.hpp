#pragma once

#include <sstream>

#include "cofl/cyclic.hpp"

namespace cofl {

namespace detail {

struct OpInfo {
  int prec;
  bool right;
};

// Precedences follow the parser: application binds tightest, then the infix
// operators, then the guard arrow.
inline const OpInfo* infix_info(const std::string& name) {
  static const std::map<std::string, OpInfo> ops = {
      {"+", {6, false}}, {":", {5, true}},  {"==", {4, false}},
      {"&&", {3, true}}, {"||", {2, true}}, {"=>", {1, true}},
  };
  auto it = ops.find(name);
  return it == ops.end() ? nullptr : &it->second;
}

inline bool closed_list(const Term& t, std::vector<Term>& elems) {
  Term c = t;
  while (c->kind == Kind::App && c->sym->name == ":" && c->args.size() == 2) {
    elems.push_back(c->args[0]);
    c = c->args[1];
  }
  return c->kind == Kind::App && c->sym->name == "[]";
}

inline void print_term(std::ostream& os, const Term& t, int min_prec) {
  auto paren = [&](int prec, auto&& body) {
    bool p = prec < min_prec;
    if (p) os << "(";
    body();
    if (p) os << ")";
  };
  switch (t->kind) {
    case Kind::Var:
    case Kind::FVar: os << t->name; return;
    case Kind::Int:
      if (t->ival < 0)
        paren(0, [&] { os << t->ival; });
      else
        os << t->ival;
      return;
    case Kind::Eq:
      paren(4, [&] {
        print_term(os, t->args[0], 5);
        os << " == ";
        print_term(os, t->args[1], 5);
      });
      return;
    case Kind::App: break;
  }
  const std::string& shown = t->sym->shown();
  if (t->args.empty()) {
    os << shown;
    return;
  }
  if (t->sym->section && t->args.size() == 1 && shown.size() > 1 &&
      shown.front() == '(') {
    // "(==final)" applied to 2 renders as "(2==final)".
    os << "(";
    print_term(os, t->args[0], 5);
    os << shown.substr(1);
    return;
  }
  std::vector<Term> elems;
  if (closed_list(t, elems)) {
    os << "[";
    for (size_t i = 0; i < elems.size(); ++i) {
      if (i) os << ",";
      print_term(os, elems[i], 0);
    }
    os << "]";
    return;
  }
  if (const OpInfo* op = infix_info(t->sym->name); op && t->args.size() == 2) {
    paren(op->prec, [&] {
      print_term(os, t->args[0], op->right ? op->prec + 1 : op->prec);
      os << (t->sym->name == ":" ? ":" : " " + t->sym->name + " ");
      print_term(os, t->args[1], op->right ? op->prec : op->prec + 1);
    });
    return;
  }
  paren(10, [&] {
    os << shown;
    for (auto& a : t->args) {
      os << " ";
      print_term(os, a, 11);
    }
  });
}

}  // namespace detail

inline std::string to_string(const Term& t, int min_prec = 0) {
  std::ostringstream os;
  detail::print_term(os, t, min_prec);
  return os.str();
}

inline std::string theta_to_string(const std::map<std::string, Term>& theta) {
  std::ostringstream os;
  os << "{";
  bool first = true;
  for (auto& [y, v] : theta) {
    if (!first) os << ", ";
    first = false;
    os << y << " -> " << to_string(v);
  }
  os << "}";
  return os.str();
}

inline std::string to_string(const CyclicTerm& t) {
  CyclicTerm g = gc(t);
  if (g.theta.empty()) return to_string(g.body);
  return to_string(g.body) + " " + theta_to_string(g.theta);
}

}  // namespace cofl
