#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

namespace tagflow {

// Identifies a node within one graph. Ids are plain strings so that lowering
// and transformation passes can emit readable names ("fact.mul0"); nothing in
// the runtime depends on their content.
using NodeId = std::string;

enum class Op {
  Const,
  Param,
  Output,
  Add,
  Sub,
  Mul,
  Div,
  Neg,
  Eq,
  Lt,
  Not,
  Switch,
  Merge,
  Enter,
  Exit,
  Next,
  Call,
  Return,
  FnCall,
  Send,
  Recv,
};

// Operator kind plus its immediate arguments. Which fields are meaningful
// depends on `op`: Const carries `value`, Param/Output carry `index`,
// Call/Return carry `label`, Send/Recv carry `channel`, FnCall carries
// `fn` + `site`.
struct OpKind {
  Op op = Op::Const;
  double value = 0.0;
  int index = 0;
  int label = -1;
  int channel = -1;
  int site = -1;
  std::string fn;

  static OpKind constant(double v) { return {Op::Const, v}; }
  static OpKind param(int i) {
    OpKind k{Op::Param};
    k.index = i;
    return k;
  }
  static OpKind output(int i = 0) {
    OpKind k{Op::Output};
    k.index = i;
    return k;
  }
  static OpKind simple(Op o) { return {o}; }
  static OpKind call(int label) {
    OpKind k{Op::Call};
    k.label = label;
    return k;
  }
  static OpKind ret(int label) {
    OpKind k{Op::Return};
    k.label = label;
    return k;
  }
  static OpKind fncall(std::string fn, int site) {
    OpKind k{Op::FnCall};
    k.fn = std::move(fn);
    k.site = site;
    return k;
  }
  static OpKind send(int ch) {
    OpKind k{Op::Send};
    k.channel = ch;
    return k;
  }
  static OpKind recv(int ch) {
    OpKind k{Op::Recv};
    k.channel = ch;
    return k;
  }

  friend bool operator==(const OpKind& a, const OpKind& b) {
    return a.op == b.op && a.value == b.value && a.index == b.index &&
           a.label == b.label && a.channel == b.channel && a.site == b.site &&
           a.fn == b.fn;
  }
};

const char* op_name(Op op);
std::optional<Op> op_from_name(const std::string& name);

// True for operators that never receive data edges (they originate tokens).
inline bool is_source_op(Op op) {
  return op == Op::Const || op == Op::Param || op == Op::Recv;
}

// Number of data input ports, or -1 when the count is edge-determined
// (Merge is n-ary, FnCall arity depends on the callee).
inline int fixed_input_ports(Op op) {
  switch (op) {
    case Op::Const:
    case Op::Param:
    case Op::Recv:
      return 0;
    case Op::Output:
    case Op::Neg:
    case Op::Not:
    case Op::Enter:
    case Op::Exit:
    case Op::Next:
    case Op::Call:
    case Op::Return:
    case Op::Send:
      return 1;
    case Op::Add:
    case Op::Sub:
    case Op::Mul:
    case Op::Div:
    case Op::Eq:
    case Op::Lt:
    case Op::Switch:
      return 2;
    case Op::Merge:
    case Op::FnCall:
      return -1;
  }
  return -1;
}

// Number of data output ports, or -1 when callee-determined (FnCall).
inline int fixed_output_ports(Op op) {
  switch (op) {
    case Op::Output:
      return 0;
    case Op::Switch:
      return 2;
    case Op::FnCall:
      return -1;
    default:
      return 1;
  }
}

struct DataEdge {
  NodeId src;
  int src_port = 0;
  NodeId dst;
  int dst_port = 0;

  friend bool operator==(const DataEdge& a, const DataEdge& b) {
    return a.src == b.src && a.src_port == b.src_port && a.dst == b.dst &&
           a.dst_port == b.dst_port;
  }
  friend bool operator<(const DataEdge& a, const DataEdge& b) {
    return std::tie(a.src, a.src_port, a.dst, a.dst_port) <
           std::tie(b.src, b.src_port, b.dst, b.dst_port);
  }
};

// Control edges synchronize without carrying data. With src_port = -1 the
// token follows the node's principal output (a Call's pushed tag, a Return's
// popped tag); with a concrete port it mirrors that data port's tag and
// liveness, which matters for Switch sources.
struct ControlEdge {
  NodeId src;
  NodeId dst;
  int src_port = -1;

  friend bool operator==(const ControlEdge& a, const ControlEdge& b) {
    return a.src == b.src && a.dst == b.dst && a.src_port == b.src_port;
  }
  friend bool operator<(const ControlEdge& a, const ControlEdge& b) {
    return std::tie(a.src, a.dst, a.src_port) <
           std::tie(b.src, b.dst, b.src_port);
  }
};

// A dataflow graph: named, with an explicit formal-parameter count and
// port-addressed edges. Immutable once built (builders mutate, executors
// only read).
struct Graph {
  std::string name;
  int arity = 0;
  std::map<NodeId, OpKind> nodes;
  std::vector<DataEdge> data_edges;
  std::vector<ControlEdge> control_edges;

  NodeId add_node(NodeId id, OpKind kind) {
    nodes.emplace(id, std::move(kind));
    return id;
  }
  void add_edge(NodeId src, int src_port, NodeId dst, int dst_port) {
    data_edges.push_back({std::move(src), src_port, std::move(dst), dst_port});
  }
  void add_control_edge(NodeId src, NodeId dst, int src_port = -1) {
    control_edges.push_back({std::move(src), std::move(dst), src_port});
  }

  const OpKind* find(const NodeId& id) const {
    auto it = nodes.find(id);
    return it == nodes.end() ? nullptr : &it->second;
  }

  // The Output node with the given index, if present.
  std::optional<NodeId> output_node(int index = 0) const {
    for (const auto& [id, kind] : nodes)
      if (kind.op == Op::Output && kind.index == index) return id;
    return std::nullopt;
  }

  int output_count() const {
    int n = 0;
    for (const auto& [id, kind] : nodes)
      if (kind.op == Op::Output) ++n;
    return n;
  }

  // Highest dst port used on `id` plus one; input arity for n-ary nodes.
  int in_degree(const NodeId& id) const {
    int ports = 0;
    for (const auto& e : data_edges)
      if (e.dst == id) ports = std::max(ports, e.dst_port + 1);
    return ports;
  }

  friend bool operator==(const Graph& a, const Graph& b) {
    if (a.name != b.name || a.arity != b.arity || a.nodes != b.nodes)
      return false;
    auto de_a = a.data_edges, de_b = b.data_edges;
    std::sort(de_a.begin(), de_a.end());
    std::sort(de_b.begin(), de_b.end());
    auto ce_a = a.control_edges, ce_b = b.control_edges;
    std::sort(ce_a.begin(), ce_a.end());
    std::sort(ce_b.begin(), ce_b.end());
    return de_a == de_b && ce_a == ce_b;
  }
};

// A program is a set of named graphs plus the designated entry ("result")
// graph. Pre-transform programs reference functions through FnCall nodes.
struct Program {
  std::map<std::string, Graph> graphs;
  std::string entry;

  const Graph* find(const std::string& name) const {
    auto it = graphs.find(name);
    return it == graphs.end() ? nullptr : &it->second;
  }

  friend bool operator==(const Program& a, const Program& b) {
    return a.entry == b.entry && a.graphs == b.graphs;
  }
};

struct Violation {
  std::string where;    // node id or edge rendering
  std::string message;

  friend bool operator==(const Violation& a, const Violation& b) {
    return a.where == b.where && a.message == b.message;
  }
};

// ---------------------------------------------------------------------------
// Structural validation
// ---------------------------------------------------------------------------

inline const char* op_name(Op op) {
  switch (op) {
    case Op::Const: return "const";
    case Op::Param: return "param";
    case Op::Output: return "output";
    case Op::Add: return "add";
    case Op::Sub: return "sub";
    case Op::Mul: return "mul";
    case Op::Div: return "div";
    case Op::Neg: return "neg";
    case Op::Eq: return "eq";
    case Op::Lt: return "lt";
    case Op::Not: return "not";
    case Op::Switch: return "switch";
    case Op::Merge: return "merge";
    case Op::Enter: return "enter";
    case Op::Exit: return "exit";
    case Op::Next: return "next";
    case Op::Call: return "call";
    case Op::Return: return "return";
    case Op::FnCall: return "fncall";
    case Op::Send: return "send";
    case Op::Recv: return "recv";
  }
  return "?";
}

inline std::optional<Op> op_from_name(const std::string& name) {
  static const std::map<std::string, Op> table = {
      {"const", Op::Const},   {"param", Op::Param},  {"output", Op::Output},
      {"add", Op::Add},       {"sub", Op::Sub},      {"mul", Op::Mul},
      {"div", Op::Div},       {"neg", Op::Neg},      {"eq", Op::Eq},
      {"lt", Op::Lt},         {"not", Op::Not},      {"switch", Op::Switch},
      {"merge", Op::Merge},   {"enter", Op::Enter},  {"exit", Op::Exit},
      {"next", Op::Next},     {"call", Op::Call},    {"return", Op::Return},
      {"fncall", Op::FnCall}, {"send", Op::Send},    {"recv", Op::Recv}};
  auto it = table.find(name);
  if (it == table.end()) return std::nullopt;
  return it->second;
}

// Checks the structural invariants of a single graph. Violations are data,
// not failures: the function is total and never mutates its input.
inline std::vector<Violation> validate(const Graph& g) {
  std::vector<Violation> out;
  auto flag = [&](std::string where, std::string message) {
    out.push_back({std::move(where), std::move(message)});
  };

  // Edge endpoints must exist and respect port ranges.
  for (const auto& e : g.data_edges) {
    const OpKind* src = g.find(e.src);
    const OpKind* dst = g.find(e.dst);
    std::string where = e.src + ":" + std::to_string(e.src_port) + " -> " +
                        e.dst + ":" + std::to_string(e.dst_port);
    if (!src) {
      flag(where, "edge source is not a node");
      continue;
    }
    if (!dst) {
      flag(where, "edge destination is not a node");
      continue;
    }
    int out_ports = fixed_output_ports(src->op);
    if (out_ports >= 0 && e.src_port >= out_ports)
      flag(where, "source port out of range");
    int in_ports = fixed_input_ports(dst->op);
    if (in_ports >= 0 && e.dst_port >= in_ports)
      flag(where, "destination port out of range");
    if (e.src_port < 0 || e.dst_port < 0) flag(where, "negative port");
  }
  for (const auto& e : g.control_edges) {
    const OpKind* src = g.find(e.src);
    if (!src)
      flag(e.src + " -> " + e.dst, "control edge source is not a node");
    if (!g.find(e.dst))
      flag(e.src + " -> " + e.dst, "control edge destination is not a node");
    if (src && e.src_port >= 0) {
      int out_ports = fixed_output_ports(src->op);
      if (out_ports >= 0 && e.src_port >= out_ports)
        flag(e.src + " -> " + e.dst, "control edge source port out of range");
    }
  }

  // Input nodes take no incoming data edges; Output takes exactly one and
  // emits nothing.
  std::map<NodeId, std::map<int, int>> in_cover;
  std::map<NodeId, int> out_count;
  for (const auto& e : g.data_edges) {
    in_cover[e.dst][e.dst_port]++;
    out_count[e.src]++;
  }
  std::vector<int> param_indices;
  std::vector<int> output_indices;
  for (const auto& [id, kind] : g.nodes) {
    if (is_source_op(kind.op) && in_cover.count(id))
      flag(id, std::string(op_name(kind.op)) + " node has incoming data edges");
    if (kind.op == Op::Param) param_indices.push_back(kind.index);
    if (kind.op == Op::Output) {
      output_indices.push_back(kind.index);
      if (out_count.count(id)) flag(id, "output node has outgoing edges");
      int in = in_cover.count(id) ? (int)in_cover[id].size() : 0;
      if (in != 1) flag(id, "output node must have exactly one incoming edge");
    }
    if ((kind.op == Op::Call || kind.op == Op::Return) && kind.label < 0)
      flag(id, "call/return label must be non-negative");

    // Every required input port must be covered by exactly one edge.
    if (!is_source_op(kind.op) && kind.op != Op::Output) {
      int required = fixed_input_ports(kind.op);
      if (required < 0) required = g.in_degree(id);  // n-ary: Merge, FnCall
      auto& cover = in_cover[id];
      for (int p = 0; p < required; ++p) {
        auto it = cover.find(p);
        if (it == cover.end())
          flag(id, "input port " + std::to_string(p) + " is not fed");
        else if (it->second > 1)
          flag(id, "input port " + std::to_string(p) + " is fed twice");
      }
      if (kind.op == Op::Merge && required == 0)
        flag(id, "merge node has no inputs");
    }
  }

  // Output indices must be unique and contiguous from 0 (a plain graph has
  // the single Output 0; multi-output graphs mark extra outputs by index).
  std::sort(output_indices.begin(), output_indices.end());
  if (output_indices.empty()) flag(g.name, "graph has no output node");
  for (size_t i = 0; i < output_indices.size(); ++i) {
    if (output_indices[i] != (int)i) {
      flag(g.name, "output indices are not unique and contiguous");
      break;
    }
  }

  // Param indices form the contiguous set 0..arity-1.
  std::sort(param_indices.begin(), param_indices.end());
  if ((int)param_indices.size() != g.arity) {
    flag(g.name, "param count " + std::to_string(param_indices.size()) +
                     " does not match arity " + std::to_string(g.arity));
  } else {
    for (int i = 0; i < g.arity; ++i)
      if (param_indices[i] != i) {
        flag(g.name, "param indices are not contiguous");
        break;
      }
  }
  return out;
}

// Program-level validation: each graph validates, FnCall references resolve
// with matching arity, and the entry graph exists with arity 0.
inline std::vector<Violation> validate(const Program& p) {
  std::vector<Violation> out;
  for (const auto& [name, g] : p.graphs) {
    auto vs = validate(g);
    for (auto& v : vs) {
      v.where = name + "/" + v.where;
      out.push_back(std::move(v));
    }
    for (const auto& [id, kind] : g.nodes) {
      if (kind.op != Op::FnCall) continue;
      const Graph* callee = p.find(kind.fn);
      if (!callee) {
        out.push_back({name + "/" + id,
                       "fncall references undefined function '" + kind.fn + "'"});
        continue;
      }
      int args = g.in_degree(id);
      if (args != callee->arity)
        out.push_back({name + "/" + id,
                       "fncall passes " + std::to_string(args) +
                           " arguments to '" + kind.fn + "' of arity " +
                           std::to_string(callee->arity)});
    }
  }
  const Graph* entry = p.find(p.entry);
  if (!entry)
    out.push_back({p.entry, "entry graph is not defined"});
  else if (entry->arity != 0)
    out.push_back({p.entry, "entry graph must have arity 0"});
  return out;
}

}  // namespace tagflow
