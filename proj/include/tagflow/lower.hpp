#pragma once

#include <map>
#include <set>
#include <string>
#include <vector>

#include "tagflow/ast.hpp"
#include "tagflow/graph.hpp"

namespace tagflow {

namespace detail {

// Fold arithmetic on literal operands so constant subexpressions lower to a
// single Const node. Comparisons, `not` and `if` are left intact.
inline ExprPtr fold_constants(const ExprPtr& e) {
  std::vector<ExprPtr> kids;
  kids.reserve(e->kids.size());
  for (const auto& k : e->kids) kids.push_back(fold_constants(k));

  auto num = [](const ExprPtr& x) { return x->kind == Expr::Kind::Number; };
  if (e->kind == Expr::Kind::Bin && num(kids[0]) && num(kids[1])) {
    double a = kids[0]->number, b = kids[1]->number;
    switch (e->bin) {
      case BinOp::Add: return Expr::make_number(a + b, e->line, e->col);
      case BinOp::Sub: return Expr::make_number(a - b, e->line, e->col);
      case BinOp::Mul: return Expr::make_number(a * b, e->line, e->col);
      case BinOp::Div:
        if (b != 0.0) return Expr::make_number(a / b, e->line, e->col);
        break;  // division by a literal zero is a runtime diagnostic
      default:
        break;
    }
  }
  if (e->kind == Expr::Kind::Neg && num(kids[0]))
    return Expr::make_number(-kids[0]->number, e->line, e->col);

  auto out = std::make_shared<Expr>(*e);
  out->kids = std::move(kids);
  return out;
}

class Lowerer {
 public:
  explicit Lowerer(const Ast& ast) : ast_(ast) {}

  Program run() {
    Program p;
    for (const auto& def : ast_.definitions) {
      if (p.entry.empty() && def.params.empty()) p.entry = def.name;
      p.graphs.emplace(def.name, lower_definition(def));
    }
    return p;
  }

 private:
  using Source = std::pair<NodeId, int>;  // node + output port
  using Env = std::map<std::string, Source>;

  Graph lower_definition(const Definition& def) {
    g_ = Graph{};
    g_->name = def.name;
    g_->arity = (int)def.params.size();
    next_ = 0;

    Env env;
    for (size_t i = 0; i < def.params.size(); ++i) {
      NodeId id = "p" + std::to_string(i);
      g_->add_node(id, OpKind::param((int)i));
      env[def.params[i]] = {id, 0};
    }
    Source result = lower_expr(fold_constants(def.body), env);
    NodeId out = g_->add_node("out", OpKind::output());
    g_->add_edge(result.first, result.second, out, 0);
    Graph done = std::move(*g_);
    g_.reset();
    return done;
  }

  NodeId fresh(const std::string& hint) {
    return hint + std::to_string(next_++);
  }

  Source lower_expr(const ExprPtr& e, const Env& env) {
    switch (e->kind) {
      case Expr::Kind::Number: {
        NodeId id = fresh("const");
        g_->add_node(id, OpKind::constant(e->number));
        return {id, 0};
      }
      case Expr::Kind::Var:
        return env.at(e->name);
      case Expr::Kind::Bin: {
        static const Op ops[] = {Op::Add, Op::Sub, Op::Mul,
                                 Op::Div, Op::Eq,  Op::Lt};
        Source l = lower_expr(e->kids[0], env);
        Source r = lower_expr(e->kids[1], env);
        NodeId id = fresh(op_name(ops[(int)e->bin]));
        g_->add_node(id, OpKind::simple(ops[(int)e->bin]));
        g_->add_edge(l.first, l.second, id, 0);
        g_->add_edge(r.first, r.second, id, 1);
        return {id, 0};
      }
      case Expr::Kind::Neg:
      case Expr::Kind::Not: {
        Op op = e->kind == Expr::Kind::Neg ? Op::Neg : Op::Not;
        Source x = lower_expr(e->kids[0], env);
        NodeId id = fresh(op_name(op));
        g_->add_node(id, OpKind::simple(op));
        g_->add_edge(x.first, x.second, id, 0);
        return {id, 0};
      }
      case Expr::Kind::Apply:
        return lower_apply(*e, env);
      case Expr::Kind::If:
        return lower_if(*e, env);
    }
    return {"", 0};
  }

  Source lower_apply(const Expr& e, const Env& env) {
    int site = site_counter_[e.name]++;
    NodeId id = fresh("fncall_" + e.name + "_");
    g_->add_node(id, OpKind::fncall(e.name, site));
    if (e.kids.empty()) {
      // A zero-argument call still needs a token to fire under the caller's
      // tag; the first in-scope value (or a unit constant at the entry)
      // serves as the trigger.
      Source trig;
      if (!env.empty()) {
        trig = env.begin()->second;
      } else {
        NodeId c = fresh("const");
        g_->add_node(c, OpKind::constant(0.0));
        trig = {c, 0};
      }
      g_->add_edge(trig.first, trig.second, id, 0);
    } else {
      for (size_t i = 0; i < e.kids.size(); ++i) {
        Source a = lower_expr(e.kids[i], env);
        g_->add_edge(a.first, a.second, id, (int)i);
      }
    }
    return {id, 0};
  }

  Source lower_if(const Expr& e, const Env& env) {
    Source cond = lower_expr(e.kids[0], env);

    // One Switch per variable the branches use; the condition fans out to
    // all of them. True port 0 feeds the then-branch, false port 1 the else.
    std::set<std::string> used;
    collect_vars(*e.kids[1], used);
    collect_vars(*e.kids[2], used);
    Env then_env = env, else_env = env;
    for (const auto& v : used) {
      auto it = env.find(v);
      if (it == env.end()) continue;
      NodeId sw = fresh("switch");
      g_->add_node(sw, OpKind::simple(Op::Switch));
      g_->add_edge(cond.first, cond.second, sw, 0);
      g_->add_edge(it->second.first, it->second.second, sw, 1);
      then_env[v] = {sw, 0};
      else_env[v] = {sw, 1};
    }

    // A branch that uses no variables would otherwise stay live when the
    // other branch is taken; gate its value through a Switch of its own so
    // deadness reaches the Merge.
    auto gate = [&](Source v, int port) -> Source {
      NodeId sw = fresh("switch");
      g_->add_node(sw, OpKind::simple(Op::Switch));
      g_->add_edge(cond.first, cond.second, sw, 0);
      g_->add_edge(v.first, v.second, sw, 1);
      return {sw, port};
    };
    std::set<std::string> tv, ev;
    collect_vars(*e.kids[1], tv);
    collect_vars(*e.kids[2], ev);

    Source t = lower_expr(e.kids[1], then_env);
    if (tv.empty()) t = gate(t, 0);
    Source f = lower_expr(e.kids[2], else_env);
    if (ev.empty()) f = gate(f, 1);

    NodeId m = fresh("merge");
    g_->add_node(m, OpKind::simple(Op::Merge));
    g_->add_edge(t.first, t.second, m, 0);
    g_->add_edge(f.first, f.second, m, 1);
    return {m, 0};
  }

  const Ast& ast_;
  std::optional<Graph> g_;
  int next_ = 0;
  std::map<std::string, int> site_counter_;  // call-site ids per callee
};

}  // namespace detail

// Lowers a diagnostic-free Ast to one dataflow graph per definition. The
// entry is the first zero-parameter definition.
inline Program lower(const Ast& ast) { return detail::Lowerer(ast).run(); }

}  // namespace tagflow
