#pragma once

#include <map>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "tagflow/graph.hpp"

namespace tagflow {

struct TransformError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// One call site of a function: the FnCall node, where its arguments come
// from, and where its outputs go.
struct CallSiteRecord {
  std::string callee;
  int site_id = 0;       // the Call/Return label i
  std::string caller;    // graph the FnCall appears in
  NodeId fncall;
  std::vector<DataEdge> arg_edges;  // incoming, indexed by dst_port
  std::vector<DataEdge> out_edges;  // outgoing (src_port = callee output)
};

struct CallSiteTable {
  std::map<std::string, std::vector<CallSiteRecord>> sites;

  int count(const std::string& fn) const {
    auto it = sites.find(fn);
    return it == sites.end() ? 0 : (int)it->second.size();
  }
};

// Collects every FnCall node, grouped per callee and ordered by the site ids
// the frontend assigned (definition order, then occurrence order). Ids are
// re-normalized to 0..n-1 when a hand-built program left gaps.
inline CallSiteTable collect_call_sites(const Program& p) {
  CallSiteTable table;
  for (const auto& [gname, g] : p.graphs) {
    for (const auto& [id, kind] : g.nodes) {
      if (kind.op != Op::FnCall) continue;
      CallSiteRecord rec;
      rec.callee = kind.fn;
      rec.site_id = kind.site;
      rec.caller = gname;
      rec.fncall = id;
      rec.arg_edges.resize(g.in_degree(id));
      for (const auto& e : g.data_edges) {
        if (e.dst == id) rec.arg_edges[e.dst_port] = e;
        if (e.src == id) rec.out_edges.push_back(e);
      }
      table.sites[kind.fn].push_back(std::move(rec));
    }
  }
  for (auto& [fn, recs] : table.sites) {
    std::sort(recs.begin(), recs.end(),
              [](const CallSiteRecord& a, const CallSiteRecord& b) {
                return std::tie(a.site_id, a.caller, a.fncall) <
                       std::tie(b.site_id, b.caller, b.fncall);
              });
    for (size_t i = 0; i < recs.size(); ++i) recs[i].site_id = (int)i;
  }
  return table;
}

namespace detail {

// Functions reachable from the entry through FnCall references. Anything
// else would contribute unfed Merge entry points, so it is dropped.
inline std::set<std::string> reachable_functions(const Program& p) {
  std::set<std::string> seen{p.entry};
  std::vector<std::string> work{p.entry};
  while (!work.empty()) {
    const Graph* g = p.find(work.back());
    work.pop_back();
    if (!g) continue;
    for (const auto& [id, kind] : g->nodes)
      if (kind.op == Op::FnCall && seen.insert(kind.fn).second)
        work.push_back(kind.fn);
  }
  return seen;
}

// True when `id` computes from constants alone within its graph (pure
// arithmetic over Const leaves). Such call arguments need a control-edge
// trigger after the split into single-input Call nodes.
inline bool is_const_pure(const Graph& g, const NodeId& id) {
  const OpKind* k = g.find(id);
  if (!k) return false;
  switch (k->op) {
    case Op::Const:
      return true;
    case Op::Add:
    case Op::Sub:
    case Op::Mul:
    case Op::Div:
    case Op::Neg:
    case Op::Eq:
    case Op::Lt:
    case Op::Not:
      break;
    default:
      return false;
  }
  for (const auto& e : g.control_edges)
    if (e.dst == id) return false;
  bool pure = true;
  for (const auto& e : g.data_edges)
    if (e.dst == id) pure = pure && is_const_pure(g, e.src);
  return pure;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Recursion elimination: one static graph from a set of function graphs.
//
// For each function f with n call sites and m parameters:
//   - every FnCall_i becomes m Call(i) nodes, one per argument edge;
//   - each parameter k's input node becomes an n-input Merge gathering the
//     Call(i) outputs for that parameter;
//   - f's output fans out to n Return(i) nodes (one per output for the rare
//     multi-output function), each wired to the original destinations;
//   - one control edge connects the argument-0 Call(i) to each Return(i),
//     carrying the tag creation signal and deadness.
//
// Call arguments that are constant expressions additionally receive a
// control edge from the site's first non-constant argument source, so their
// single-input Call nodes fire (or die) under the caller's tag.
// ---------------------------------------------------------------------------

inline Graph eliminate_recursion(const Program& p) {
  const Graph* entry = p.find(p.entry);
  if (!entry) throw TransformError("entry graph '" + p.entry + "' not found");
  if (entry->arity != 0)
    throw TransformError("entry graph must have arity 0, got " +
                         std::to_string(entry->arity));

  std::set<std::string> keep = detail::reachable_functions(p);
  Program pruned;
  pruned.entry = p.entry;
  for (const auto& name : keep)
    if (const Graph* g = p.find(name)) pruned.graphs.emplace(name, *g);
  CallSiteTable table = collect_call_sites(pruned);

  Graph out;
  out.name = p.entry;
  out.arity = 0;

  auto prefixed = [](const std::string& gname, const NodeId& id) {
    return gname + "." + id;
  };

  // Replacement wiring for skipped nodes: FnCall outputs become Return
  // outputs, non-entry Outputs disappear in favour of direct edges.
  std::map<std::string, std::map<int, std::pair<NodeId, int>>> fncall_out;
  // (graph, output index) -> source feeding that Output, pre-remap
  std::map<std::string, std::map<int, std::pair<NodeId, int>>> body_out;

  for (const auto& [fn, recs] : table.sites)
    for (const auto& rec : recs) {
      const Graph* callee = pruned.find(fn);
      if (!callee)
        throw TransformError("call to undefined function '" + fn + "'");
      int outputs = callee->output_count();
      for (int j = 0; j < outputs; ++j)
        fncall_out[rec.caller + "/" + rec.fncall][j] = {
            prefixed(rec.caller, rec.fncall) + ".r" + std::to_string(j), 0};
    }

  for (const auto& [gname, g] : pruned.graphs) {
    bool is_entry = gname == p.entry;
    for (const auto& e : g.data_edges) {
      const OpKind& dst = g.nodes.at(e.dst);
      if (dst.op == Op::Output && !is_entry)
        body_out[gname][dst.index] = {e.src, e.src_port};
    }
  }

  // Resolves a pre-transform source to its post-transform equivalent.
  auto resolve_src = [&](const std::string& gname, const NodeId& src,
                         int port) -> std::pair<NodeId, int> {
    const OpKind& k = pruned.find(gname)->nodes.at(src);
    if (k.op == Op::FnCall) return fncall_out.at(gname + "/" + src).at(port);
    return {prefixed(gname, src), port};
  };

  // Copy surviving nodes and plain edges.
  for (const auto& [gname, g] : pruned.graphs) {
    bool is_entry = gname == p.entry;
    for (const auto& [id, kind] : g.nodes) {
      if (kind.op == Op::FnCall) continue;
      if (kind.op == Op::Param) continue;  // becomes the entry Merge
      if (kind.op == Op::Output && !is_entry) continue;
      out.add_node(prefixed(gname, id), kind);
    }
    for (const auto& e : g.data_edges) {
      const OpKind& dst = g.nodes.at(e.dst);
      if (dst.op == Op::FnCall) continue;                   // argument edge
      if (dst.op == Op::Output && !is_entry) continue;      // body output
      if (dst.op == Op::Param)
        throw TransformError("param node with incoming edge");
      auto [s, sp] = resolve_src(gname, e.src, e.src_port);
      out.add_edge(s, sp, prefixed(gname, e.dst), e.dst_port);
    }
    for (const auto& e : g.control_edges) {
      const OpKind& src = g.nodes.at(e.src);
      const OpKind& dst = g.nodes.at(e.dst);
      if (src.op == Op::FnCall || dst.op == Op::FnCall) continue;
      if ((src.op == Op::Output || dst.op == Op::Output) && !is_entry) continue;
      out.add_control_edge(prefixed(gname, e.src), prefixed(gname, e.dst));
    }
  }

  // Entry Merges replacing the parameters of every called function.
  for (const auto& [fn, recs] : table.sites) {
    const Graph& callee = *pruned.find(fn);
    for (const auto& [id, kind] : callee.nodes)
      if (kind.op == Op::Param)
        out.add_node(prefixed(fn, id), OpKind::simple(Op::Merge));
  }

  // Call/Return fabric per site.
  for (const auto& [fn, recs] : table.sites) {
    const Graph& callee = *pruned.find(fn);
    int outputs = callee.output_count();

    // Parameter index -> Merge node id.
    std::map<int, NodeId> param_merge;
    for (const auto& [id, kind] : callee.nodes)
      if (kind.op == Op::Param) param_merge[kind.index] = prefixed(fn, id);

    for (const auto& rec : recs) {
      const Graph& caller = *pruned.find(rec.caller);
      NodeId base = prefixed(rec.caller, rec.fncall);
      int m = (int)rec.arg_edges.size();

      // Constant-fed argument Calls are single-input nodes with no tag
      // carrier of their own; a control edge from the first non-constant
      // argument's source (or from argument 0 when every argument is
      // constant) fires them under the caller's tag.
      std::optional<std::pair<NodeId, int>> trigger;
      int trigger_arg = -1;
      for (int k = 0; k < m; ++k)
        if (!detail::is_const_pure(caller, rec.arg_edges[k].src)) {
          trigger = resolve_src(rec.caller, rec.arg_edges[k].src,
                                rec.arg_edges[k].src_port);
          trigger_arg = k;
          break;
        }
      if (!trigger && m > 1) {
        trigger = resolve_src(rec.caller, rec.arg_edges[0].src,
                              rec.arg_edges[0].src_port);
        trigger_arg = 0;
      }

      std::vector<NodeId> call_nodes;
      for (int k = 0; k < m; ++k) {
        NodeId cn = base + ".c" + std::to_string(k);
        out.add_node(cn, OpKind::call(rec.site_id));
        const DataEdge& ae = rec.arg_edges[k];
        auto [s, sp] = resolve_src(rec.caller, ae.src, ae.src_port);
        out.add_edge(s, sp, cn, 0);
        if (m > 0 && k < (int)param_merge.size())
          out.add_edge(cn, 0, param_merge.at(k), rec.site_id);
        if (trigger && k != trigger_arg &&
            detail::is_const_pure(caller, ae.src))
          out.add_control_edge(trigger->first, cn, trigger->second);
        call_nodes.push_back(cn);
      }

      // Returns: fed by the callee's body output, delivering to wherever the
      // FnCall's outputs went (the node-copy pass resolved those edges).
      for (int j = 0; j < outputs; ++j) {
        NodeId rn = base + ".r" + std::to_string(j);
        out.add_node(rn, OpKind::ret(rec.site_id));
        auto [bs, bp] = body_out.at(fn).at(j);
        auto [s, sp] = resolve_src(fn, bs, bp);
        out.add_edge(s, sp, rn, 0);
        if (!call_nodes.empty()) out.add_control_edge(call_nodes[0], rn);
      }
    }
  }

  return out;
}

}  // namespace tagflow
