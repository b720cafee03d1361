#pragma once

#include <string>

#include "tagflow/graph.hpp"
#include "tagflow/serialize.hpp"

namespace tagflow {

namespace detail {

inline std::string dot_label(const OpKind& kind) {
  switch (kind.op) {
    case Op::Const: return "Const " + format_double(kind.value);
    case Op::Param: return "Param " + std::to_string(kind.index);
    case Op::Output:
      return kind.index == 0 ? "Output" : "Output " + std::to_string(kind.index);
    case Op::Call: return "Call_" + std::to_string(kind.label);
    case Op::Return: return "Return_" + std::to_string(kind.label);
    case Op::FnCall: return kind.fn + "#" + std::to_string(kind.site);
    case Op::Send: return "Send ch" + std::to_string(kind.channel);
    case Op::Recv: return "Recv ch" + std::to_string(kind.channel);
    default: {
      std::string s = op_name(kind.op);
      s[0] = (char)std::toupper((unsigned char)s[0]);
      return s;
    }
  }
}

inline void dot_body(const Graph& g, const std::string& prefix,
                     std::string& out) {
  for (const auto& [id, kind] : g.nodes)
    out += "  \"" + prefix + id + "\" [label=\"" + id + "\\n" +
           dot_label(kind) + "\"];\n";
  auto de = g.data_edges;
  std::sort(de.begin(), de.end());
  for (const auto& e : de) {
    out += "  \"" + prefix + e.src + "\" -> \"" + prefix + e.dst + "\"";
    if (e.src_port != 0 || e.dst_port != 0)
      out += " [label=\"" + std::to_string(e.src_port) + ":" +
             std::to_string(e.dst_port) + "\"]";
    out += ";\n";
  }
  auto ce = g.control_edges;
  std::sort(ce.begin(), ce.end());
  for (const auto& e : ce)
    out += "  \"" + prefix + e.src + "\" -> \"" + prefix + e.dst +
           "\" [style=dashed];\n";
}

}  // namespace detail

// Deterministic DOT rendering; control edges are dashed.
inline std::string to_dot(const Graph& g) {
  std::string out = "digraph \"" + g.name + "\" {\n";
  detail::dot_body(g, "", out);
  out += "}\n";
  return out;
}

// Program rendering: one cluster per function graph.
inline std::string to_dot(const Program& p) {
  std::string out = "digraph program {\n";
  for (const auto& [name, g] : p.graphs) {
    out += "subgraph \"cluster_" + name + "\" {\n  label=\"" + name + "\";\n";
    detail::dot_body(g, name + ".", out);
    out += "}\n";
  }
  out += "}\n";
  return out;
}

}  // namespace tagflow
