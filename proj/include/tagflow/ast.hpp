#pragma once

#include <memory>
#include <set>
#include <string>
#include <vector>

#include "tagflow/serialize.hpp"

namespace tagflow {

enum class BinOp { Add, Sub, Mul, Div, Eq, Lt };

struct Expr;
using ExprPtr = std::shared_ptr<const Expr>;

// Surface-language expression. `kids` holds lhs/rhs for Bin, the operand for
// Neg/Not, cond/then/else for If, and the arguments for Apply.
struct Expr {
  enum class Kind { Number, Var, Bin, Neg, Not, If, Apply };
  Kind kind;
  double number = 0.0;
  std::string name;  // Var reference or Apply callee
  BinOp bin = BinOp::Add;
  std::vector<ExprPtr> kids;
  int line = 0, col = 0;

  static ExprPtr make_number(double v, int line = 0, int col = 0) {
    auto e = std::make_shared<Expr>();
    e->kind = Kind::Number;
    e->number = v;
    e->line = line;
    e->col = col;
    return e;
  }
  static ExprPtr make_var(std::string name, int line = 0, int col = 0) {
    auto e = std::make_shared<Expr>();
    e->kind = Kind::Var;
    e->name = std::move(name);
    e->line = line;
    e->col = col;
    return e;
  }
  static ExprPtr make_bin(BinOp op, ExprPtr l, ExprPtr r) {
    auto e = std::make_shared<Expr>();
    e->kind = Kind::Bin;
    e->bin = op;
    e->line = l->line;
    e->col = l->col;
    e->kids = {std::move(l), std::move(r)};
    return e;
  }
  static ExprPtr make_unary(Kind k, ExprPtr x, int line = 0, int col = 0) {
    auto e = std::make_shared<Expr>();
    e->kind = k;
    e->line = line;
    e->col = col;
    e->kids = {std::move(x)};
    return e;
  }
  static ExprPtr make_if(ExprPtr c, ExprPtr t, ExprPtr f, int line = 0,
                         int col = 0) {
    auto e = std::make_shared<Expr>();
    e->kind = Kind::If;
    e->line = line;
    e->col = col;
    e->kids = {std::move(c), std::move(t), std::move(f)};
    return e;
  }
  static ExprPtr make_apply(std::string name, std::vector<ExprPtr> args,
                            int line = 0, int col = 0) {
    auto e = std::make_shared<Expr>();
    e->kind = Kind::Apply;
    e->name = std::move(name);
    e->kids = std::move(args);
    e->line = line;
    e->col = col;
    return e;
  }
};

struct Definition {
  std::string name;
  std::vector<std::string> params;
  ExprPtr body;
  int line = 0, col = 0;
};

struct Ast {
  std::vector<Definition> definitions;

  const Definition* find(const std::string& name) const {
    for (const auto& d : definitions)
      if (d.name == name) return &d;
    return nullptr;
  }
};

// Structural equality, positions ignored.
inline bool expr_equal(const Expr& a, const Expr& b) {
  if (a.kind != b.kind) return false;
  switch (a.kind) {
    case Expr::Kind::Number:
      if (a.number != b.number) return false;
      break;
    case Expr::Kind::Var:
    case Expr::Kind::Apply:
      if (a.name != b.name) return false;
      break;
    case Expr::Kind::Bin:
      if (a.bin != b.bin) return false;
      break;
    default:
      break;
  }
  if (a.kids.size() != b.kids.size()) return false;
  for (size_t i = 0; i < a.kids.size(); ++i)
    if (!expr_equal(*a.kids[i], *b.kids[i])) return false;
  return true;
}

inline bool ast_equal(const Ast& a, const Ast& b) {
  if (a.definitions.size() != b.definitions.size()) return false;
  for (size_t i = 0; i < a.definitions.size(); ++i) {
    const auto& da = a.definitions[i];
    const auto& db = b.definitions[i];
    if (da.name != db.name || da.params != db.params) return false;
    if (!expr_equal(*da.body, *db.body)) return false;
  }
  return true;
}

inline void collect_vars(const Expr& e, std::set<std::string>& out) {
  if (e.kind == Expr::Kind::Var) out.insert(e.name);
  for (const auto& k : e.kids) collect_vars(*k, out);
}

// ---------------------------------------------------------------------------
// Pretty printer. Output reparses to an identical Ast.
// ---------------------------------------------------------------------------

namespace detail {

// Precedence levels, lowest first: if < comparison < additive <
// multiplicative < unary < atom.
inline int precedence(const Expr& e) {
  switch (e.kind) {
    case Expr::Kind::If: return 0;
    case Expr::Kind::Bin:
      switch (e.bin) {
        case BinOp::Eq:
        case BinOp::Lt: return 1;
        case BinOp::Add:
        case BinOp::Sub: return 2;
        default: return 3;
      }
    case Expr::Kind::Neg:
    case Expr::Kind::Not: return 4;
    default: return 5;
  }
}

inline void pretty_expr(const Expr& e, int parent_prec, bool rhs,
                        std::string& out) {
  int prec = precedence(e);
  // Left-associative operators need parens around a right child of the same
  // level; `if` and unary chains bind their own tails.
  bool parens = prec < parent_prec || (rhs && prec == parent_prec &&
                                       e.kind == Expr::Kind::Bin);
  if (parens) out += "(";
  switch (e.kind) {
    case Expr::Kind::Number:
      out += format_double(e.number);
      break;
    case Expr::Kind::Var:
      out += e.name;
      break;
    case Expr::Kind::Bin: {
      const char* ops[] = {"+", "-", "*", "/", "==", "<"};
      pretty_expr(*e.kids[0], prec, false, out);
      out += std::string(" ") + ops[(int)e.bin] + " ";
      pretty_expr(*e.kids[1], prec, true, out);
      break;
    }
    case Expr::Kind::Neg:
      out += "-";
      pretty_expr(*e.kids[0], prec, false, out);
      break;
    case Expr::Kind::Not:
      out += "!";
      pretty_expr(*e.kids[0], prec, false, out);
      break;
    case Expr::Kind::If:
      out += "if ";
      pretty_expr(*e.kids[0], 1, false, out);
      out += " then ";
      pretty_expr(*e.kids[1], 1, false, out);
      out += " else ";
      pretty_expr(*e.kids[2], 0, false, out);
      break;
    case Expr::Kind::Apply:
      out += e.name + "(";
      for (size_t i = 0; i < e.kids.size(); ++i) {
        if (i) out += ", ";
        pretty_expr(*e.kids[i], 0, false, out);
      }
      out += ")";
      break;
  }
  if (parens) out += ")";
}

}  // namespace detail

inline std::string pretty(const Ast& ast) {
  std::string out;
  for (const auto& d : ast.definitions) {
    out += d.name;
    if (!d.params.empty()) {
      out += "(";
      for (size_t i = 0; i < d.params.size(); ++i) {
        if (i) out += ", ";
        out += d.params[i];
      }
      out += ")";
    }
    out += " = ";
    detail::pretty_expr(*d.body, 0, false, out);
    out += "\n";
  }
  return out;
}

}  // namespace tagflow
