#pragma once

#include <cstdio>
#include <cstdlib>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "tagflow/graph.hpp"

namespace tagflow {

struct ParseError : std::runtime_error {
  int line;
  int column;
  ParseError(int line, int column, const std::string& what)
      : std::runtime_error("line " + std::to_string(line) + ":" +
                           std::to_string(column) + ": " + what),
        line(line),
        column(column) {}
};

namespace detail {

// Shortest representation that round-trips a double exactly.
inline std::string format_double(double v) {
  char buf[64];
  for (int prec = 1; prec <= 17; ++prec) {
    std::snprintf(buf, sizeof(buf), "%.*g", prec, v);
    if (std::strtod(buf, nullptr) == v) return buf;
  }
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Text graph format
//
//   graph <name> arity <m>
//   node <id> <opkind> [args]
//   edge <src>:<port> -> <dst>:<port>
//   cedge <src> -> <dst>
//   ...
//   entry <name>
//
// Node lines are sorted by id and edges lexicographically, so serialization
// is deterministic and diff-friendly.
// ---------------------------------------------------------------------------

inline void serialize(const Graph& g, std::string& out) {
  out += "graph " + g.name + " arity " + std::to_string(g.arity) + "\n";
  for (const auto& [id, kind] : g.nodes) {
    out += "node " + id + " " + op_name(kind.op);
    switch (kind.op) {
      case Op::Const: out += " " + detail::format_double(kind.value); break;
      case Op::Param: out += " " + std::to_string(kind.index); break;
      case Op::Output:
        if (kind.index != 0) out += " " + std::to_string(kind.index);
        break;
      case Op::Call:
      case Op::Return: out += " " + std::to_string(kind.label); break;
      case Op::FnCall:
        out += " " + kind.fn + " " + std::to_string(kind.site);
        break;
      case Op::Send:
      case Op::Recv: out += " " + std::to_string(kind.channel); break;
      default: break;
    }
    out += "\n";
  }
  auto de = g.data_edges;
  std::sort(de.begin(), de.end());
  for (const auto& e : de)
    out += "edge " + e.src + ":" + std::to_string(e.src_port) + " -> " +
           e.dst + ":" + std::to_string(e.dst_port) + "\n";
  auto ce = g.control_edges;
  std::sort(ce.begin(), ce.end());
  for (const auto& e : ce) {
    out += "cedge " + e.src;
    if (e.src_port >= 0) out += ":" + std::to_string(e.src_port);
    out += " -> " + e.dst + "\n";
  }
}

inline std::string serialize(const Program& p) {
  std::string out;
  for (const auto& [name, g] : p.graphs) serialize(g, out);
  out += "entry " + p.entry + "\n";
  return out;
}

inline std::string serialize(const Graph& g) {
  std::string out;
  serialize(g, out);
  out += "entry " + g.name + "\n";
  return out;
}

inline Program deserialize(const std::string& text) {
  Program p;
  Graph* cur = nullptr;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;

  auto fail = [&](int col, const std::string& msg) -> void {
    throw ParseError(lineno, col, msg);
  };

  while (std::getline(in, line)) {
    ++lineno;
    std::istringstream ls(line);
    std::string word;
    if (!(ls >> word) || word[0] == '#') continue;

    if (word == "graph") {
      std::string name, kw;
      int arity;
      if (!(ls >> name >> kw >> arity) || kw != "arity")
        fail(1, "expected 'graph <name> arity <m>'");
      cur = &p.graphs[name];
      cur->name = name;
      cur->arity = arity;
    } else if (word == "entry") {
      std::string name;
      if (!(ls >> name)) fail(1, "expected 'entry <name>'");
      p.entry = name;
    } else if (word == "node") {
      if (!cur) fail(1, "node line before any graph header");
      std::string id, opname;
      if (!(ls >> id >> opname)) fail(1, "expected 'node <id> <op> [args]'");
      auto op = op_from_name(opname);
      if (!op) fail(1, "unknown operator '" + opname + "'");
      OpKind kind{*op};
      switch (*op) {
        case Op::Const:
          if (!(ls >> kind.value)) fail(1, "const requires a value");
          break;
        case Op::Param:
          if (!(ls >> kind.index)) fail(1, "param requires an index");
          break;
        case Op::Output:
          if (!(ls >> kind.index)) kind.index = 0;
          break;
        case Op::Call:
        case Op::Return:
          if (!(ls >> kind.label)) fail(1, "call/return requires a label");
          break;
        case Op::FnCall:
          if (!(ls >> kind.fn >> kind.site))
            fail(1, "fncall requires a function name and site id");
          break;
        case Op::Send:
        case Op::Recv:
          if (!(ls >> kind.channel)) fail(1, "send/recv requires a channel");
          break;
        default:
          break;
      }
      if (cur->nodes.count(id)) fail(1, "duplicate node id '" + id + "'");
      cur->nodes.emplace(id, std::move(kind));
    } else if (word == "edge") {
      if (!cur) fail(1, "edge line before any graph header");
      std::string a, arrow, b;
      if (!(ls >> a >> arrow >> b) || arrow != "->")
        fail(1, "expected 'edge <src>:<port> -> <dst>:<port>'");
      auto split = [&](const std::string& s) -> std::pair<std::string, int> {
        auto pos = s.rfind(':');
        if (pos == std::string::npos) fail(1, "missing ':<port>' in '" + s + "'");
        return {s.substr(0, pos), std::atoi(s.c_str() + pos + 1)};
      };
      auto [src, sp] = split(a);
      auto [dst, dp] = split(b);
      cur->add_edge(src, sp, dst, dp);
    } else if (word == "cedge") {
      if (!cur) fail(1, "cedge line before any graph header");
      std::string a, arrow, b;
      if (!(ls >> a >> arrow >> b) || arrow != "->")
        fail(1, "expected 'cedge <src>[:<port>] -> <dst>'");
      int port = -1;
      auto pos = a.rfind(':');
      if (pos != std::string::npos) {
        port = std::atoi(a.c_str() + pos + 1);
        a = a.substr(0, pos);
      }
      cur->add_control_edge(a, b, port);
    } else {
      fail(1, "unknown directive '" + word + "'");
    }
  }
  if (p.entry.empty()) fail(1, "missing 'entry <name>' footer");
  return p;
}

// Convenience for single-graph files.
inline Graph deserialize_graph(const std::string& text) {
  Program p = deserialize(text);
  auto it = p.graphs.find(p.entry);
  if (it == p.graphs.end())
    throw ParseError(0, 0, "entry graph '" + p.entry + "' not present");
  return it->second;
}

}  // namespace tagflow
