#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <limits>
#include <memory>
#include <sstream>

#include "cofl/engine.hpp"

namespace cofl {

struct SessionConfig {
  std::vector<std::string> program_paths;
  unsigned long step_budget = 100000;
  std::size_t max_answers = 10;
  bool full_memory = false;
  bool trace = false;
  bool dedupe_answers = true;
  int workers = 1;
};

inline void validate(const SessionConfig& c) {
  if (c.step_budget == 0)
    throw std::invalid_argument("step budget must be positive");
  if (c.max_answers == 0)
    throw std::invalid_argument("answer limit must be positive");
  if (c.workers <= 0)
    throw std::invalid_argument("worker count must be positive");
}

// Streams a derivation's answers. Deduplication happens here, at the
// presentation layer: alpha-variants are dropped by textual key, bisimilar
// repeats by equivalence against everything already shown.
class AnswerStream {
 public:
  AnswerStream(Program& p, const CyclicTerm& q, const EngineConfig& ec,
               NameSupply& names, bool dedupe)
      : d_(p, q, ec, names), dedupe_(dedupe) {}

  std::optional<Answer> next() {
    for (;;) {
      std::optional<Answer> a = d_.next();
      if (!a) return std::nullopt;
      if (dedupe_) {
        if (!keys_.insert(answer_key(*a, d_.query_vars())).second) continue;
        bool dup = false;
        for (auto& b : shown_)
          if (answers_equivalent(*a, b, d_.query_vars())) {
            dup = true;
            break;
          }
        if (dup) continue;
        shown_.push_back(*a);
      }
      return a;
    }
  }

  Derivation& derivation() { return d_; }
  const Derivation& derivation() const { return d_; }

 private:
  Derivation d_;
  bool dedupe_;
  std::set<std::string> keys_;
  std::vector<Answer> shown_;
};

// One trace row: a state, the case labels on the edge into it, and the
// bindings that edge added.
struct TraceRow {
  int node = -1;
  CyclicTerm state;
  std::vector<std::string> labels;
  std::string sigma_delta;
};

inline std::vector<TraceRow> answer_path(const Derivation& d, int node) {
  std::vector<int> ids;
  for (int c = node; c >= 0; c = d.nodes()[c].parent) ids.push_back(c);
  std::reverse(ids.begin(), ids.end());
  std::vector<TraceRow> rows;
  rows.reserve(ids.size());
  for (int id : ids) {
    const Node& n = d.nodes()[id];
    TraceRow r;
    r.node = id;
    r.state = d.state_term(id);
    r.labels = n.labels;
    if (n.parent >= 0) {
      const Node& par = d.nodes()[n.parent];
      std::set<std::string> fresh;
      for (auto& [x, v] : n.acc->sigma) {
        (void)v;
        if (!par.acc->sigma.count(x)) fresh.insert(x);
      }
      r.sigma_delta = fresh.empty() ? "{}" : subst_to_string(*n.acc, fresh);
    } else {
      r.sigma_delta = "{}";
    }
    rows.push_back(std::move(r));
  }
  return rows;
}

inline void print_trace(std::ostream& os, const Derivation& d, int node) {
  std::vector<TraceRow> rows = answer_path(d, node);
  os << "-- derivation --\n";
  for (size_t i = 0; i < rows.size(); ++i) {
    if (i > 0) {
      os << "  =[";
      for (size_t k = 0; k < rows[i].labels.size(); ++k) {
        if (k) os << ",";
        os << rows[i].labels[k];
      }
      os << "]=>";
      if (rows[i].sigma_delta != "{}") os << "  " << rows[i].sigma_delta;
      os << "\n";
    }
    os << to_string(rows[i].state) << "\n";
  }
}

// A query pumped to the session's answer limit. The stream stays alive so
// callers can keep pulling or inspect the graph behind each answer.
struct Evaluation {
  std::unique_ptr<AnswerStream> stream;
  std::vector<Answer> shown;
  bool hit_limit = false;
  Outcome outcome() const { return stream->derivation().outcome(); }
  unsigned long steps() const { return stream->derivation().steps_used(); }
};

class Session {
 public:
  explicit Session(SessionConfig cfg) : cfg_(std::move(cfg)) {
    validate(cfg_);
    reload();
  }

  SessionConfig& config() { return cfg_; }
  Program& program() { return *prog_; }
  NameSupply& names() { return names_; }

  void add_program(const std::string& path) {
    cfg_.program_paths.push_back(path);
    reload();
  }

  void reload() {
    std::vector<std::pair<std::string, std::string>> files;
    for (auto& p : cfg_.program_paths) {
      std::ifstream in(p);
      if (!in) throw std::runtime_error("cannot open program file: " + p);
      std::ostringstream ss;
      ss << in.rdbuf();
      files.emplace_back(p, ss.str());
    }
    prog_ = std::make_unique<Program>(make_program(files, names_));
  }

  EngineConfig engine_config() const {
    EngineConfig ec;
    ec.step_budget = cfg_.step_budget;
    // With deduplication on, the engine streams raw answers without a cap;
    // the session stops once enough distinct ones surfaced.
    ec.max_answers = cfg_.dedupe_answers
                         ? std::numeric_limits<std::size_t>::max()
                         : cfg_.max_answers;
    ec.full_memory = cfg_.full_memory;
    ec.workers = cfg_.workers;
    return ec;
  }

  Evaluation eval(const std::string& query_text) {
    CyclicTerm q = parse_query(*prog_, query_text, names_);
    Evaluation ev;
    ev.stream = std::make_unique<AnswerStream>(*prog_, q, engine_config(),
                                               names_, cfg_.dedupe_answers);
    if (cfg_.workers > 1) ev.stream->derivation().drain(cfg_.workers);
    while (ev.shown.size() < cfg_.max_answers) {
      std::optional<Answer> a = ev.stream->next();
      if (!a) break;
      ev.shown.push_back(std::move(*a));
    }
    ev.hit_limit = ev.shown.size() >= cfg_.max_answers;
    return ev;
  }

  // Prints answers and the terminal status; returns the process exit code.
  int run_query(std::ostream& os, const std::string& query_text) {
    Evaluation ev = eval(query_text);
    const auto& qv = ev.stream->derivation().query_vars();
    for (auto& a : ev.shown) {
      if (cfg_.trace) print_trace(os, ev.stream->derivation(), a.node);
      os << to_string(a.value) << "  |  " << subst_to_string(a.s, qv) << "\n";
    }
    if (!ev.hit_limit) os << outcome_text(ev.outcome()) << "\n";
    if (ev.outcome() == Outcome::BudgetOut && ev.shown.empty()) return 3;
    return 0;
  }

  int repl(std::istream& in, std::ostream& os) {
    os << "coflc interactive session. :quit leaves, ; asks for more.\n";
    std::unique_ptr<AnswerStream> live;
    auto pull = [&] {
      std::optional<Answer> a = live->next();
      if (a) {
        if (cfg_.trace) print_trace(os, live->derivation(), a->node);
        os << to_string(a->value) << "  |  "
           << subst_to_string(a->s, live->derivation().query_vars()) << "\n";
      } else {
        os << outcome_text(live->derivation().outcome()) << "\n";
        live.reset();
      }
    };
    std::string line;
    for (;;) {
      os << "coflc> " << std::flush;
      if (!std::getline(in, line)) break;
      std::string s = trim_copy(line);
      if (s.empty()) continue;
      if (s == ":quit" || s == ":q") break;
      if (s == ";") {
        if (live)
          pull();
        else
          os << "no active query\n";
        continue;
      }
      if (s.rfind(":load ", 0) == 0) {
        try {
          add_program(trim_copy(s.substr(6)));
          os << "loaded\n";
        } catch (const std::exception& e) {
          os << "error: " << e.what() << "\n";
        }
        continue;
      }
      if (s.rfind(":set budget ", 0) == 0) {
        try {
          cfg_.step_budget = std::stoul(trim_copy(s.substr(12)));
          validate(cfg_);
        } catch (const std::exception&) {
          os << "error: expected :set budget N\n";
        }
        continue;
      }
      if (s == ":trace on" || s == ":trace off") {
        cfg_.trace = (s == ":trace on");
        continue;
      }
      if (!s.empty() && s[0] == ':') {
        os << "unknown command; :load <path>, :set budget N, :trace on|off, "
              ":quit\n";
        continue;
      }
      try {
        CyclicTerm q = parse_query(*prog_, s, names_);
        live = std::make_unique<AnswerStream>(*prog_, q, engine_config(),
                                              names_, cfg_.dedupe_answers);
        pull();
      } catch (const std::exception& e) {
        os << "error: " << e.what() << "\n";
        live.reset();
      }
    }
    return 0;
  }

  static std::string trim_copy(const std::string& s) {
    size_t b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    size_t e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
  }

 private:
  SessionConfig cfg_;
  NameSupply names_;
  std::unique_ptr<Program> prog_;
};

}  // namespace cofl
