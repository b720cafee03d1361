#pragma once

#include <map>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "tagflow/graph.hpp"
#include "tagflow/transform.hpp"

namespace tagflow {

struct AutodiffError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

namespace ad {

using Source = std::pair<NodeId, int>;  // node + output port

struct IdGen {
  Graph* g;
  int next = 0;
  NodeId fresh(const std::string& hint) {
    NodeId id;
    do {
      id = "d" + std::to_string(next++) + "_" + hint;
    } while (g->nodes.count(id));
    return id;
  }
};

}  // namespace ad

// ---------------------------------------------------------------------------
// Gradient catalogue: per-operator templates mapping n forward inputs and m
// output gradients to n input gradients. Eq/Lt/Not and switch predicates are
// non-differentiable; their gradient is zero by convention.
// ---------------------------------------------------------------------------

class GradientCatalogue {
 public:
  bool differentiable(Op op) const {
    switch (op) {
      case Op::Add:
      case Op::Sub:
      case Op::Mul:
      case Op::Div:
      case Op::Neg:
      case Op::Switch:
      case Op::Merge:
        return true;
      default:
        return false;
    }
  }

  bool zero_gradient(Op op) const {
    return op == Op::Eq || op == Op::Lt || op == Op::Not;
  }

  // Appends the gradient subgraph of one operator to `g`. `inputs` are the
  // operator's forward input sources; `out_grads` the gradient source per
  // output port (absent when no gradient reaches that port); `pred` the
  // governing predicate, required for Switch and Merge. Returns a gradient
  // source per input port (absent = no contribution).
  std::vector<std::optional<ad::Source>> expand(
      Graph& g, ad::IdGen& ids, Op op, const std::vector<ad::Source>& inputs,
      const std::vector<std::optional<ad::Source>>& out_grads,
      std::optional<ad::Source> pred) const {
    using ad::Source;
    auto node = [&](const std::string& hint, Op o,
                    std::initializer_list<Source> ins) -> Source {
      NodeId id = ids.fresh(hint);
      g.add_node(id, OpKind::simple(o));
      int port = 0;
      for (const Source& s : ins) g.add_edge(s.first, s.second, id, port++);
      return {id, 0};
    };
    auto zero = [&]() -> Source {
      NodeId id = ids.fresh("zero");
      g.add_node(id, OpKind::constant(0.0));
      return {id, 0};
    };
    // A zero that is live exactly when the chosen switch side is: feeds the
    // Merge on branches the variable does not appear in.
    auto gated_zero = [&](bool true_side) -> Source {
      NodeId id = ids.fresh("gate0");
      g.add_node(id, OpKind::simple(Op::Switch));
      g.add_edge(pred->first, pred->second, id, 0);
      Source z = zero();
      g.add_edge(z.first, z.second, id, 1);
      return {id, true_side ? 0 : 1};
    };

    std::vector<std::optional<Source>> dx(inputs.size());
    const std::optional<Source>& dy =
        out_grads.empty() ? std::optional<Source>{} : out_grads[0];

    switch (op) {
      case Op::Add:
        if (dy) dx[0] = dx[1] = *dy;
        break;
      case Op::Sub:
        if (dy) {
          dx[0] = *dy;
          dx[1] = node("neg", Op::Neg, {*dy});
        }
        break;
      case Op::Mul:
        if (dy) {
          dx[0] = node("mul", Op::Mul, {*dy, inputs[1]});
          dx[1] = node("mul", Op::Mul, {inputs[0], *dy});
        }
        break;
      case Op::Div:
        if (dy) {
          dx[0] = node("div", Op::Div, {*dy, inputs[1]});
          Source bb = node("sq", Op::Mul, {inputs[1], inputs[1]});
          Source num = node("mul", Op::Mul, {*dy, inputs[0]});
          dx[1] = node("neg", Op::Neg, {node("div", Op::Div, {num, bb})});
        }
        break;
      case Op::Neg:
        if (dy) dx[0] = node("neg", Op::Neg, {*dy});
        break;
      case Op::Switch: {
        // Gradient of Switch is a Merge on the same predicate; sides the
        // data never reached contribute a branch-gated zero.
        if (!pred) throw AutodiffError("switch gradient needs its predicate");
        std::optional<Source> gt = out_grads.size() > 0 ? out_grads[0]
                                                        : std::optional<Source>{};
        std::optional<Source> gf = out_grads.size() > 1 ? out_grads[1]
                                                        : std::optional<Source>{};
        if (!gt && !gf) break;
        Source t = gt ? *gt : gated_zero(true);
        Source f = gf ? *gf : gated_zero(false);
        dx[1] = node("merge", Op::Merge, {t, f});
        break;
      }
      case Op::Merge: {
        // Gradient of Merge is a Switch on the same predicate: the gradient
        // flows back into whichever branch produced the value.
        if (!pred) throw AutodiffError("merge gradient needs its predicate");
        if (dy) {
          NodeId id = ids.fresh("switch");
          g.add_node(id, OpKind::simple(Op::Switch));
          g.add_edge(pred->first, pred->second, id, 0);
          g.add_edge(dy->first, dy->second, id, 1);
          dx[0] = Source{id, 0};
          dx[1] = Source{id, 1};
        }
        break;
      }
      default:
        throw AutodiffError(std::string("operator ") + op_name(op) +
                            " is not differentiable");
    }
    return dx;
  }
};

// ---------------------------------------------------------------------------
// Reverse-mode differentiation of one function graph.
//
// The result graph takes the original n parameters plus dy (parameter n) and
// produces (y, dx_i for i in wrt): output 0 is the forward value, output
// 1+k the gradient of parameter wrt[k]. Function calls are differentiated by
// pairing: the forward copy keeps FnCall(f); the reverse pass adds
// FnCall(<grad_prefix>f) consuming the same arguments plus the output
// gradient. Site ids are provisional; renumber_call_sites fixes them up.
// ---------------------------------------------------------------------------

namespace ad {

// The predicate governing an if-join Merge, recovered structurally: walk each
// input's ancestry to the switches it first crosses; the predicate feeding
// port 0 crossings on the then input and port 1 crossings on the else input
// is the junction's condition.
inline Source merge_predicate(const Graph& g, const NodeId& merge) {
  std::vector<DataEdge> ins(2);
  for (const auto& e : g.data_edges)
    if (e.dst == merge && e.dst_port < 2) ins[e.dst_port] = e;

  // Ancestry walk from one merge input, stopping at the first Switch crossed
  // on each path; record its predicate when the crossing used `want_port`.
  auto first_switches = [&](const Source& start,
                            int want_port) -> std::set<Source> {
    std::set<Source> preds;
    std::set<NodeId> seen;
    std::vector<Source> frontier{start};
    while (!frontier.empty()) {
      auto [id, via] = frontier.back();
      frontier.pop_back();
      if (!seen.insert(id).second) continue;
      const OpKind& k = g.nodes.at(id);
      if (k.op == Op::Switch) {
        if (via == want_port)
          for (const auto& e : g.data_edges)
            if (e.dst == id && e.dst_port == 0)
              preds.insert({e.src, e.src_port});
        continue;  // stop at the first switch on the path
      }
      if (k.op == Op::Const || k.op == Op::Param) continue;
      for (const auto& e : g.data_edges)
        if (e.dst == id) frontier.push_back({e.src, e.src_port});
    }
    return preds;
  };

  std::set<Source> then_preds = first_switches({ins[0].src, ins[0].src_port}, 0);
  std::set<Source> else_preds = first_switches({ins[1].src, ins[1].src_port}, 1);
  for (const auto& p : then_preds)
    if (else_preds.count(p)) return p;
  throw AutodiffError("cannot recover the predicate of merge node '" + merge +
                      "'");
}

}  // namespace ad

inline Graph differentiate_graph(const Graph& g, const std::vector<int>& wrt,
                                 const std::string& name,
                                 const std::string& grad_prefix = "grad$") {
  GradientCatalogue catalogue;
  auto out_id = g.output_node(0);
  if (!out_id) throw AutodiffError("graph has no output");
  if (g.output_count() != 1)
    throw AutodiffError("can only differentiate single-output graphs");

  Graph out;
  out.name = name;
  out.arity = g.arity + 1;

  // Forward copy: parameters keep their ids, interior nodes are copied, the
  // Output is dropped (its source becomes y).
  for (const auto& [id, kind] : g.nodes)
    if (kind.op != Op::Output) out.add_node(id, kind);
  NodeId dy_param = "dy";
  while (out.nodes.count(dy_param)) dy_param += "_";
  out.add_node(dy_param, OpKind::param(g.arity));

  ad::Source y_src{"", 0};
  for (const auto& e : g.data_edges) {
    if (e.dst == *out_id) {
      y_src = {e.src, e.src_port};
      continue;
    }
    out.add_edge(e.src, e.src_port, e.dst, e.dst_port);
  }
  for (const auto& e : g.control_edges) out.add_control_edge(e.src, e.dst);

  // Reverse-topological order over the forward DAG.
  std::map<NodeId, int> indeg;  // reversed: a source waits for its consumers
  for (const auto& [id, kind] : g.nodes) indeg[id];
  for (const auto& e : g.data_edges) {
    if (e.dst == *out_id) continue;
    indeg[e.src]++;
  }
  std::vector<NodeId> order;  // consumers first
  std::vector<NodeId> work;
  for (const auto& [id, deg] : indeg)
    if (deg == 0) work.push_back(id);
  std::map<NodeId, std::vector<NodeId>> producers_of;
  for (const auto& e : g.data_edges) {
    if (e.dst == *out_id) continue;
    producers_of[e.dst].push_back(e.src);
  }
  while (!work.empty()) {
    NodeId id = work.back();
    work.pop_back();
    order.push_back(id);
    for (const auto& p : producers_of[id])
      if (--indeg[p] == 0) work.push_back(p);
  }
  if (order.size() != g.nodes.size())
    throw AutodiffError("graph has cycles; cannot differentiate");

  // Gradient contributions per (node, output port).
  std::map<ad::Source, std::vector<ad::Source>> contrib;
  contrib[y_src].push_back({dy_param, 0});

  ad::IdGen ids{&out};
  auto sum = [&](const ad::Source& s) -> std::optional<ad::Source> {
    auto it = contrib.find(s);
    if (it == contrib.end() || it->second.empty()) return std::nullopt;
    ad::Source acc = it->second[0];
    for (size_t i = 1; i < it->second.size(); ++i) {
      NodeId id = ids.fresh("sum");
      out.add_node(id, OpKind::simple(Op::Add));
      out.add_edge(acc.first, acc.second, id, 0);
      out.add_edge(it->second[i].first, it->second[i].second, id, 1);
      acc = {id, 0};
    }
    return acc;
  };

  for (const NodeId& uid : order) {
    const OpKind& kind = g.nodes.at(uid);
    if (kind.op == Op::Output || kind.op == Op::Param || kind.op == Op::Const)
      continue;

    int out_ports = fixed_output_ports(kind.op);
    if (kind.op == Op::FnCall) {
      const int m = g.in_degree(uid);
      std::optional<ad::Source> gy = sum({uid, 0});
      if (!gy) continue;  // call feeds only non-differentiable positions
      // Reverse of a call: grad-callee consumes the same arguments plus the
      // output gradient and yields one gradient per argument.
      std::vector<ad::Source> args(m, {"", 0});
      for (const auto& e : g.data_edges)
        if (e.dst == uid) args[e.dst_port] = {e.src, e.src_port};
      NodeId gid = ids.fresh("grad_" + kind.fn);
      out.add_node(gid, OpKind::fncall(grad_prefix + kind.fn, 0));
      for (int k = 0; k < m; ++k)
        out.add_edge(args[k].first, args[k].second, gid, k);
      out.add_edge(gy->first, gy->second, gid, m);
      for (int k = 0; k < m; ++k)
        contrib[args[k]].push_back({gid, 1 + k});
      continue;
    }

    std::vector<std::optional<ad::Source>> gout(out_ports);
    bool any = false;
    for (int p = 0; p < out_ports; ++p) {
      gout[p] = sum({uid, p});
      any = any || gout[p].has_value();
    }
    if (!any) continue;
    if (catalogue.zero_gradient(kind.op))
      throw AutodiffError("gradient requested through non-differentiable " +
                          std::string(op_name(kind.op)) + " node '" + uid + "'");

    std::vector<ad::Source> inputs(fixed_input_ports(kind.op) >= 0
                                       ? fixed_input_ports(kind.op)
                                       : g.in_degree(uid),
                                   {"", 0});
    for (const auto& e : g.data_edges)
      if (e.dst == uid && e.dst_port < (int)inputs.size())
        inputs[e.dst_port] = {e.src, e.src_port};

    std::optional<ad::Source> pred;
    if (kind.op == Op::Switch) pred = inputs[0];
    if (kind.op == Op::Merge) pred = ad::merge_predicate(g, uid);

    auto dx = catalogue.expand(out, ids, kind.op, inputs, gout, pred);
    for (size_t k = 0; k < dx.size(); ++k) {
      if (!dx[k]) continue;
      if (kind.op == Op::Switch && k == 0) continue;  // predicate: zero
      contrib[inputs[k]].push_back(*dx[k]);
    }
  }

  // Outputs: y first, then the requested parameter gradients.
  NodeId yo = ids.fresh("y_out");
  out.add_node(yo, OpKind::output(0));
  out.add_edge(y_src.first, y_src.second, yo, 0);
  std::map<int, NodeId> params;
  for (const auto& [id, kind] : g.nodes)
    if (kind.op == Op::Param) params[kind.index] = id;
  for (size_t k = 0; k < wrt.size(); ++k) {
    std::optional<ad::Source> dx = sum({params.at(wrt[k]), 0});
    if (!dx) {
      NodeId z = ids.fresh("zero");
      out.add_node(z, OpKind::constant(0.0));
      dx = ad::Source{z, 0};
    }
    NodeId o = ids.fresh("dx_out");
    out.add_node(o, OpKind::output(1 + (int)k));
    out.add_edge(dx->first, dx->second, o, 0);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Program-level derivation and fusion
// ---------------------------------------------------------------------------

// Re-assigns call-site ids per callee, deterministically. Needed after graph
// surgery introduces FnCall nodes with provisional ids.
inline void renumber_call_sites(Program& p) {
  std::map<std::string, int> counter;
  for (auto& [gname, g] : p.graphs)
    for (auto& [id, kind] : g.nodes)
      if (kind.op == Op::FnCall) kind.site = counter[kind.fn]++;
}

// Adds grad$h definitions for `fn` and every function it transitively calls.
// grad$h(x_0..x_{n-1}, dy) computes (h(x..), dh/dx_0 .. dh/dx_{n-1}).
inline Program derive_function_gradient(const Program& p,
                                        const std::string& fn,
                                        const std::string& grad_prefix = "grad$") {
  const Graph* f = p.find(fn);
  if (!f) throw AutodiffError("function '" + fn + "' is not defined");

  std::set<std::string> closure;
  std::vector<std::string> work{fn};
  while (!work.empty()) {
    std::string cur = work.back();
    work.pop_back();
    if (!closure.insert(cur).second) continue;
    const Graph* g = p.find(cur);
    if (!g) throw AutodiffError("function '" + cur + "' is not defined");
    for (const auto& [id, kind] : g->nodes)
      if (kind.op == Op::FnCall) work.push_back(kind.fn);
  }

  Program out = p;
  for (const auto& name : closure) {
    const Graph& g = *p.find(name);
    std::vector<int> all(g.arity);
    for (int i = 0; i < g.arity; ++i) all[i] = i;
    out.graphs.emplace(grad_prefix + name,
                       differentiate_graph(g, all, grad_prefix + name,
                                           grad_prefix));
  }
  renumber_call_sites(out);
  return out;
}

// Replaces every paired (FnCall(h), FnCall(grad$h)) invocation — same
// argument sources, gradient call taking the extra dy — by a single call to
// fused$h, whose body computes forward values and gradients together so
// forward tokens reach their gradient consumers through the shared tag.
inline Program fuse_forward_backward(const Program& p, const std::string& fn,
                                     const std::string& grad_prefix = "grad$",
                                     const std::string& fused_prefix = "fused$") {
  Program with_grads = derive_function_gradient(p, fn, grad_prefix);

  // fused$h bodies start as copies of grad$h bodies; pairing below rewrites
  // their internal calls (including self-recursion).
  std::set<std::string> closure;
  std::vector<std::string> work{fn};
  while (!work.empty()) {
    std::string cur = work.back();
    work.pop_back();
    if (!closure.insert(cur).second) continue;
    for (const auto& [id, kind] : with_grads.find(cur)->nodes)
      if (kind.op == Op::FnCall) work.push_back(kind.fn);
  }

  Program out = with_grads;
  for (const auto& name : closure) {
    Graph fused = with_grads.graphs.at(grad_prefix + name);
    fused.name = fused_prefix + name;
    out.graphs.emplace(fused.name, std::move(fused));
  }

  // Pair and replace in every graph except the naive grad$ bodies (they stay
  // as the unfused reference scheme). Argument sources are re-read per pair:
  // an earlier replacement may have rewired them.
  for (auto& [gname, g] : out.graphs) {
    if (gname.rfind(grad_prefix, 0) == 0) continue;
    std::vector<NodeId> grad_calls;
    for (const auto& [id, kind] : g.nodes)
      if (kind.op == Op::FnCall && kind.fn.rfind(grad_prefix, 0) == 0 &&
          closure.count(kind.fn.substr(grad_prefix.size())))
        grad_calls.push_back(id);

    for (const NodeId& gid : grad_calls) {
      const OpKind gkind = g.nodes.at(gid);
      std::string base = gkind.fn.substr(grad_prefix.size());
      int m = g.in_degree(gid) - 1;
      std::vector<ad::Source> gargs(m + 1, {"", 0});
      for (const auto& e : g.data_edges)
        if (e.dst == gid) gargs[e.dst_port] = {e.src, e.src_port};

      std::optional<NodeId> match;
      for (const auto& [id, kind] : g.nodes) {
        if (kind.op != Op::FnCall || kind.fn != base) continue;
        if (g.in_degree(id) != m) continue;
        std::vector<ad::Source> fargs(m, {"", 0});
        for (const auto& e : g.data_edges)
          if (e.dst == id) fargs[e.dst_port] = {e.src, e.src_port};
        bool same = true;
        for (int k = 0; k < m; ++k) same = same && fargs[k] == gargs[k];
        if (same) {
          match = id;
          break;
        }
      }
      if (!match)
        throw AutodiffError("unpaired gradient invocation '" + gid + "' of " +
                            gkind.fn + " in graph '" + gname + "'");

      // One fused call: forward consumers move to port 0, gradient
      // consumers stay on ports 1..m.
      NodeId fused = gid + "$fused";
      g.add_node(fused, OpKind::fncall(fused_prefix + base, 0));
      for (int k = 0; k <= m; ++k)
        g.add_edge(gargs[k].first, gargs[k].second, fused, k);
      for (auto& e : g.data_edges) {
        if (e.src == *match || e.src == gid) e.src = fused;
      }
      // Drop the pair's own argument edges and nodes.
      auto is_pair_arg = [&](const DataEdge& e) {
        return e.dst == *match || e.dst == gid;
      };
      g.data_edges.erase(
          std::remove_if(g.data_edges.begin(), g.data_edges.end(), is_pair_arg),
          g.data_edges.end());
      g.nodes.erase(*match);
      g.nodes.erase(gid);
    }
  }
  renumber_call_sites(out);
  return out;
}

}  // namespace tagflow
