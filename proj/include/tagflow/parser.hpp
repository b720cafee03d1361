#pragma once

#include <cctype>
#include <cstdlib>
#include <map>
#include <string>
#include <vector>

#include "tagflow/ast.hpp"

namespace tagflow {

struct Diagnostic {
  std::string kind;  // "syntax", "unbound-variable", "unbound-function", ...
  int line = 0;
  int col = 0;
  std::string message;

  std::string format() const {
    return std::to_string(line) + ":" + std::to_string(col) + ": " + kind +
           ": " + message;
  }
};

struct ParseResult {
  Ast ast;
  std::vector<Diagnostic> diagnostics;

  bool ok() const { return diagnostics.empty(); }
};

namespace detail {

struct LexToken {
  enum class Kind {
    Ident,
    Number,
    Sym,  // one of ( ) , = == < + - * / !
    KwIf,
    KwThen,
    KwElse,
    End
  };
  Kind kind = Kind::End;
  std::string text;
  double number = 0.0;
  int col = 0;
};

inline std::vector<LexToken> lex_line(const std::string& line, int lineno,
                                   std::vector<Diagnostic>& diags) {
  std::vector<LexToken> out;
  size_t i = 0;
  while (i < line.size()) {
    char c = line[i];
    if (c == '#') break;  // comment to end of line
    if (std::isspace((unsigned char)c)) {
      ++i;
      continue;
    }
    int col = (int)i + 1;
    if (std::isalpha((unsigned char)c) || c == '_') {
      size_t j = i;
      while (j < line.size() &&
             (std::isalnum((unsigned char)line[j]) || line[j] == '_'))
        ++j;
      std::string word = line.substr(i, j - i);
      LexToken t;
      t.col = col;
      t.text = word;
      if (word == "if")
        t.kind = LexToken::Kind::KwIf;
      else if (word == "then")
        t.kind = LexToken::Kind::KwThen;
      else if (word == "else")
        t.kind = LexToken::Kind::KwElse;
      else
        t.kind = LexToken::Kind::Ident;
      out.push_back(t);
      i = j;
    } else if (std::isdigit((unsigned char)c) ||
               (c == '.' && i + 1 < line.size() &&
                std::isdigit((unsigned char)line[i + 1]))) {
      char* end = nullptr;
      double v = std::strtod(line.c_str() + i, &end);
      LexToken t;
      t.kind = LexToken::Kind::Number;
      t.number = v;
      t.col = col;
      t.text = line.substr(i, end - (line.c_str() + i));
      out.push_back(t);
      i = end - line.c_str();
    } else if (c == '=' && i + 1 < line.size() && line[i + 1] == '=') {
      out.push_back({LexToken::Kind::Sym, "==", 0, col});
      i += 2;
    } else if (std::string("()=,<+-*/!").find(c) != std::string::npos) {
      out.push_back({LexToken::Kind::Sym, std::string(1, c), 0, col});
      ++i;
    } else {
      diags.push_back({"syntax", lineno, col,
                       std::string("unexpected character '") + c + "'"});
      ++i;
    }
  }
  out.push_back({LexToken::Kind::End, "", 0, (int)line.size() + 1});
  return out;
}

// Recursive-descent parser over one logical line (one definition).
class LineParser {
 public:
  LineParser(const std::vector<LexToken>& toks, int lineno,
             std::vector<Diagnostic>& diags)
      : toks_(toks), lineno_(lineno), diags_(diags) {}

  bool parse_definition(Definition& def) {
    def.line = lineno_;
    if (!expect_ident(def.name, "definition name")) return false;
    def.col = prev_col_;
    if (is_sym("(")) {
      advance();
      if (!is_sym(")")) {
        for (;;) {
          std::string p;
          if (!expect_ident(p, "parameter name")) return false;
          def.params.push_back(p);
          if (is_sym(",")) {
            advance();
            continue;
          }
          break;
        }
      }
      if (!expect_sym(")")) return false;
    }
    if (!expect_sym("=")) return false;
    def.body = parse_expr();
    if (!def.body) return false;
    if (cur().kind != LexToken::Kind::End) {
      error("trailing input after definition body");
      return false;
    }
    return true;
  }

 private:
  ExprPtr parse_expr() {
    if (cur().kind == LexToken::Kind::KwIf) {
      int line = lineno_, col = cur().col;
      advance();
      ExprPtr c = parse_expr();
      if (!c) return nullptr;
      if (!expect_kw(LexToken::Kind::KwThen, "then")) return nullptr;
      ExprPtr t = parse_expr();
      if (!t) return nullptr;
      if (!expect_kw(LexToken::Kind::KwElse, "else")) return nullptr;
      ExprPtr f = parse_expr();
      if (!f) return nullptr;
      return Expr::make_if(std::move(c), std::move(t), std::move(f), line, col);
    }
    return parse_cmp();
  }

  ExprPtr parse_cmp() {
    ExprPtr lhs = parse_additive();
    if (!lhs) return nullptr;
    while (is_sym("==") || is_sym("<")) {
      BinOp op = is_sym("==") ? BinOp::Eq : BinOp::Lt;
      advance();
      ExprPtr rhs = parse_additive();
      if (!rhs) return nullptr;
      lhs = Expr::make_bin(op, std::move(lhs), std::move(rhs));
    }
    return lhs;
  }

  ExprPtr parse_additive() {
    ExprPtr lhs = parse_multiplicative();
    if (!lhs) return nullptr;
    while (is_sym("+") || is_sym("-")) {
      BinOp op = is_sym("+") ? BinOp::Add : BinOp::Sub;
      advance();
      ExprPtr rhs = parse_multiplicative();
      if (!rhs) return nullptr;
      lhs = Expr::make_bin(op, std::move(lhs), std::move(rhs));
    }
    return lhs;
  }

  ExprPtr parse_multiplicative() {
    ExprPtr lhs = parse_unary();
    if (!lhs) return nullptr;
    while (is_sym("*") || is_sym("/")) {
      BinOp op = is_sym("*") ? BinOp::Mul : BinOp::Div;
      advance();
      ExprPtr rhs = parse_unary();
      if (!rhs) return nullptr;
      lhs = Expr::make_bin(op, std::move(lhs), std::move(rhs));
    }
    return lhs;
  }

  ExprPtr parse_unary() {
    if (is_sym("-") || is_sym("!")) {
      auto kind = is_sym("-") ? Expr::Kind::Neg : Expr::Kind::Not;
      int col = cur().col;
      advance();
      ExprPtr x = parse_unary();
      if (!x) return nullptr;
      return Expr::make_unary(kind, std::move(x), lineno_, col);
    }
    return parse_atom();
  }

  ExprPtr parse_atom() {
    const LexToken& t = cur();
    if (t.kind == LexToken::Kind::Number) {
      advance();
      return Expr::make_number(t.number, lineno_, t.col);
    }
    if (t.kind == LexToken::Kind::Ident) {
      std::string name = t.text;
      int col = t.col;
      advance();
      if (is_sym("(")) {
        advance();
        std::vector<ExprPtr> args;
        if (!is_sym(")")) {
          for (;;) {
            ExprPtr a = parse_expr();
            if (!a) return nullptr;
            args.push_back(std::move(a));
            if (is_sym(",")) {
              advance();
              continue;
            }
            break;
          }
        }
        if (!expect_sym(")")) return nullptr;
        return Expr::make_apply(name, std::move(args), lineno_, col);
      }
      return Expr::make_var(name, lineno_, col);
    }
    if (is_sym("(")) {
      advance();
      ExprPtr e = parse_expr();
      if (!e) return nullptr;
      if (!expect_sym(")")) return nullptr;
      return e;
    }
    error("expected an expression");
    return nullptr;
  }

  const LexToken& cur() const { return toks_[pos_]; }
  void advance() {
    prev_col_ = cur().col;
    if (cur().kind != LexToken::Kind::End) ++pos_;
  }
  bool is_sym(const std::string& s) const {
    return cur().kind == LexToken::Kind::Sym && cur().text == s;
  }
  bool expect_sym(const std::string& s) {
    if (!is_sym(s)) {
      error("expected '" + s + "'");
      return false;
    }
    advance();
    return true;
  }
  bool expect_kw(LexToken::Kind k, const std::string& what) {
    if (cur().kind != k) {
      error("expected '" + what + "'");
      return false;
    }
    advance();
    return true;
  }
  bool expect_ident(std::string& out, const std::string& what) {
    if (cur().kind != LexToken::Kind::Ident) {
      error("expected " + what);
      return false;
    }
    out = cur().text;
    advance();
    return true;
  }
  void error(const std::string& msg) {
    diags_.push_back({"syntax", lineno_, cur().col, msg});
  }

  const std::vector<LexToken>& toks_;
  int lineno_;
  int pos_ = 0;
  int prev_col_ = 1;
  std::vector<Diagnostic>& diags_;
};

inline void analyze(const Ast& ast, std::vector<Diagnostic>& diags) {
  std::map<std::string, const Definition*> defs;
  for (const auto& d : ast.definitions) {
    if (defs.count(d.name))
      diags.push_back({"duplicate-definition", d.line, d.col,
                       "'" + d.name + "' is defined more than once"});
    else
      defs[d.name] = &d;
    std::set<std::string> seen;
    for (const auto& p : d.params)
      if (!seen.insert(p).second)
        diags.push_back({"duplicate-parameter", d.line, d.col,
                         "parameter '" + p + "' repeats in '" + d.name + "'"});
  }

  // Bound variables and applications are resolved against the whole program,
  // so definitions may reference functions defined later.
  std::function<void(const Expr&, const Definition&)> walk =
      [&](const Expr& e, const Definition& scope) {
        if (e.kind == Expr::Kind::Var) {
          bool bound = false;
          for (const auto& p : scope.params) bound |= (p == e.name);
          if (!bound)
            diags.push_back({"unbound-variable", e.line, e.col,
                             "variable '" + e.name + "' is not a parameter of '" +
                                 scope.name + "'"});
        } else if (e.kind == Expr::Kind::Apply) {
          auto it = defs.find(e.name);
          if (it == defs.end()) {
            diags.push_back({"unbound-function", e.line, e.col,
                             "function '" + e.name + "' is not defined"});
          } else if (it->second->params.size() != e.kids.size()) {
            diags.push_back(
                {"arity-mismatch", e.line, e.col,
                 "'" + e.name + "' expects " +
                     std::to_string(it->second->params.size()) +
                     " arguments, got " + std::to_string(e.kids.size())});
          }
        }
        for (const auto& k : e.kids) walk(*k, scope);
      };
  for (const auto& d : ast.definitions) walk(*d.body, d);

  bool has_entry = false;
  for (const auto& d : ast.definitions) has_entry |= d.params.empty();
  if (!ast.definitions.empty() && !has_entry)
    diags.push_back({"no-entry", 1, 1,
                     "program has no zero-parameter result definition"});
}

}  // namespace detail

// Parses the whole source: one definition per non-empty line, `#` comments.
// Syntax and semantic problems are reported as diagnostics; the Ast covers
// the definitions that parsed.
inline ParseResult parse_source(const std::string& source) {
  ParseResult result;
  std::istringstream in(source);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    auto toks = detail::lex_line(line, lineno, result.diagnostics);
    if (toks.size() == 1) continue;  // blank or comment-only
    detail::LineParser parser(toks, lineno, result.diagnostics);
    Definition def;
    if (parser.parse_definition(def))
      result.ast.definitions.push_back(std::move(def));
  }
  detail::analyze(result.ast, result.diagnostics);
  return result;
}

}  // namespace tagflow
