#pragma once

#include <deque>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "tagflow/engine.hpp"
#include "tagflow/partition.hpp"

namespace tagflow {

// ---------------------------------------------------------------------------
// Tag-scope analysis over a transformed graph.
//
// Every node fires under tags of one static scope: the root (entry region),
// the body of some function (whose tags are created by that function's
// anchor Call nodes), or a loop (tags created by its Enter/Next nodes).
// Scopes tell a Recv which tag producers justify the tags of its records.
// ---------------------------------------------------------------------------

struct ScopeAnalysis {
  static constexpr int kRoot = 0;
  static constexpr int kUnknown = -1;
  std::map<NodeId, int> firing_scope;            // S: tag scope of the inputs
  std::map<NodeId, int> out_scope;               // O: tag scope of the outputs
  std::vector<std::vector<NodeId>> producers;    // per scope: generator nodes
  int scopes = 1;

  int edge_scope(const Graph& g, const NodeId& src) const {
    auto it = out_scope.find(src);
    return it == out_scope.end() ? kUnknown : it->second;
  }
};

namespace detail {

struct UnionFind {
  std::map<NodeId, NodeId> parent;
  const NodeId& find(const NodeId& x) {
    auto it = parent.find(x);
    if (it == parent.end()) {
      parent[x] = x;
      return parent.find(x)->first;
    }
    if (it->second == x) return it->first;
    NodeId root = find(it->second);
    parent[x] = root;
    return parent.find(x)->second;
  }
  void join(const NodeId& a, const NodeId& b) {
    NodeId ra = find(a), rb = find(b);
    if (ra != rb) parent[ra] = rb;
  }
};

// Anchor Calls: the per-site tag producers, identified by their control edge
// to a Return of the same label.
inline std::vector<NodeId> anchor_calls(const Graph& g) {
  std::vector<NodeId> out;
  for (const auto& e : g.control_edges) {
    const OpKind* s = g.find(e.src);
    const OpKind* d = g.find(e.dst);
    if (s && d && s->op == Op::Call && d->op == Op::Return &&
        s->label == d->label)
      out.push_back(e.src);
  }
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

// The Merge nodes standing for a function's parameters, found backward from
// a Return's data input without descending through Call or Return nodes.
inline std::set<NodeId> body_merges(const Graph& g, const NodeId& ret) {
  std::set<NodeId> merges, seen;
  std::vector<NodeId> work;
  for (const auto& e : g.data_edges)
    if (e.dst == ret && seen.insert(e.src).second) work.push_back(e.src);
  while (!work.empty()) {
    NodeId u = work.back();
    work.pop_back();
    const OpKind& k = g.nodes.at(u);
    if (k.op == Op::Merge) merges.insert(u);
    if (k.op == Op::Call || k.op == Op::Return) continue;
    for (const auto& e : g.data_edges)
      if (e.dst == u && seen.insert(e.src).second) work.push_back(e.src);
  }
  return merges;
}

}  // namespace detail

inline ScopeAnalysis analyze_scopes(const Graph& g) {
  ScopeAnalysis sa;
  detail::UnionFind uf;

  // Cluster functions by anchors and their body merges; loops by Enter/Next
  // and their loop-head merges.
  std::vector<NodeId> anchors = detail::anchor_calls(g);
  std::map<NodeId, std::vector<NodeId>> anchor_returns;
  for (const auto& e : g.control_edges) {
    const OpKind* s = g.find(e.src);
    const OpKind* d = g.find(e.dst);
    if (s && d && s->op == Op::Call && d->op == Op::Return &&
        s->label == d->label)
      anchor_returns[e.src].push_back(e.dst);
  }
  for (const auto& a : anchors)
    for (const auto& r : anchor_returns[a])
      for (const auto& m : detail::body_merges(g, r)) uf.join(a, m);

  std::vector<NodeId> loop_gens;
  for (const auto& [id, kind] : g.nodes) {
    if (kind.op != Op::Enter && kind.op != Op::Next) continue;
    loop_gens.push_back(id);
    for (const auto& e : g.data_edges)
      if (e.src == id && g.nodes.at(e.dst).op == Op::Merge)
        uf.join(id, e.dst);
  }

  // Scope ids per cluster root.
  std::map<NodeId, int> scope_of_cluster;
  auto scope_id = [&](const NodeId& gen) {
    NodeId root = uf.find(gen);
    auto it = scope_of_cluster.find(root);
    if (it != scope_of_cluster.end()) return it->second;
    int id = sa.scopes++;
    scope_of_cluster[root] = id;
    return id;
  };
  sa.producers.resize(1);
  for (const auto& a : anchors) {
    int s = scope_id(a);
    sa.producers.resize(sa.scopes);
    sa.producers[s].push_back(a);
  }
  for (const auto& x : loop_gens) {
    int s = scope_id(x);
    sa.producers.resize(sa.scopes);
    sa.producers[s].push_back(x);
  }

  // Member Calls adopt their target merge's cluster for their output scope.
  std::map<NodeId, int> call_out_scope;
  for (const auto& [id, kind] : g.nodes) {
    if (kind.op == Op::Call) {
      std::optional<int> s;
      for (const auto& e : g.data_edges)
        if (e.src == id && g.nodes.at(e.dst).op == Op::Merge)
          s = scope_id(e.dst);
      if (!s && anchor_returns.count(id)) s = scope_id(id);
      if (s) call_out_scope[id] = *s;
    }
    if (kind.op == Op::Enter || kind.op == Op::Next)
      call_out_scope[id] = scope_id(id);
  }

  // Seed the root region (crossing Returns only via their control edge),
  // then propagate scopes forward to a fixpoint.
  auto pure = const_pure_map(g);
  {
    auto out_id = g.output_node(0);
    std::map<NodeId, std::vector<NodeId>> ctrl_src, data_src;
    for (const auto& e : g.control_edges) ctrl_src[e.dst].push_back(e.src);
    for (const auto& e : g.data_edges) data_src[e.dst].push_back(e.src);
    if (out_id) {
      std::set<NodeId> seen{*out_id};
      std::vector<NodeId> work{*out_id};
      while (!work.empty()) {
        NodeId u = work.back();
        work.pop_back();
        if (!pure.at(u)) sa.firing_scope[u] = ScopeAnalysis::kRoot;
        auto visit = [&](const NodeId& v) {
          if (seen.insert(v).second) work.push_back(v);
        };
        if (g.nodes.at(u).op != Op::Return)
          for (const auto& v : data_src[u]) visit(v);
        for (const auto& v : ctrl_src[u]) visit(v);
      }
    }
  }

  // O(node) given S(node); generators use their cluster, Return/Exit pop to
  // the scope of their anchor / Enter.
  std::map<NodeId, NodeId> return_anchor;
  for (const auto& [a, rets] : anchor_returns)
    for (const auto& r : rets) return_anchor[r] = a;

  auto out_scope_of = [&](const NodeId& id) -> std::optional<int> {
    const OpKind& k = g.nodes.at(id);
    if (k.op == Op::Call || k.op == Op::Enter || k.op == Op::Next) {
      auto it = call_out_scope.find(id);
      return it == call_out_scope.end() ? std::optional<int>{} : it->second;
    }
    if (k.op == Op::Return) {
      auto a = return_anchor.find(id);
      if (a == return_anchor.end()) return {};
      auto s = sa.firing_scope.find(a->second);
      return s == sa.firing_scope.end() ? std::optional<int>{} : s->second;
    }
    if (k.op == Op::Exit) {
      // the loop's Enter fires in the surrounding scope
      auto s = sa.firing_scope.find(id);
      if (s == sa.firing_scope.end()) return {};
      for (const auto& p : sa.producers[s->second])
        if (g.nodes.at(p).op == Op::Enter) {
          auto es = sa.firing_scope.find(p);
          if (es != sa.firing_scope.end()) return es->second;
        }
      return {};
    }
    auto s = sa.firing_scope.find(id);
    return s == sa.firing_scope.end() ? std::optional<int>{} : s->second;
  };

  bool changed = true;
  int guard = 0;
  while (changed && guard++ < (int)g.nodes.size() + 8) {
    changed = false;
    auto step = [&](const NodeId& src, const NodeId& dst) {
      if (pure.at(dst)) return;
      auto o = out_scope_of(src);
      if (!o) return;
      auto it = sa.firing_scope.find(dst);
      if (it == sa.firing_scope.end()) {
        sa.firing_scope[dst] = *o;
        changed = true;
      }
    };
    for (const auto& e : g.data_edges) {
      if (pure.at(e.src)) continue;
      step(e.src, e.dst);
    }
    for (const auto& e : g.control_edges) step(e.src, e.dst);
  }

  for (const auto& [id, kind] : g.nodes) {
    auto o = out_scope_of(id);
    if (o) sa.out_scope[id] = *o;
  }
  return sa;
}

// ---------------------------------------------------------------------------
// build_tag_tracker: replicate the reduced tag-creating state machine.
//
// Captured nodes are the per-site anchor Calls, Enter, Next, and the
// decision Switch/Merge nodes. Tracker edges come from the original graph
// with the remaining nodes suppressed; inputs with no captured ancestor are
// driven by pulse channels that forward the real node's firings (predicates
// travel this way, everything else is a dummy).  Each partition owning a
// Recv whose records carry remotely-created tags receives a copy of the
// machine plus a control edge from the producer copy to that Recv.
// ---------------------------------------------------------------------------

inline PartitionedProgram build_tag_tracker(const Graph& g,
                                            PartitionedProgram pp,
                                            bool enable_pulses = true) {
  pp.tracker_enabled = enable_pulses;
  ScopeAnalysis sa = analyze_scopes(g);
  auto pure = const_pure_map(g);
  const std::map<NodeId, int>& w_of = pp.assignment.worker_of;

  // Captured set.
  std::set<NodeId> captured;
  for (const auto& a : detail::anchor_calls(g)) captured.insert(a);
  for (const auto& [id, kind] : g.nodes)
    if (kind.op == Op::Enter || kind.op == Op::Next ||
        kind.op == Op::Switch || kind.op == Op::Merge)
      captured.insert(id);

  // Tracker edges: per captured node and input port, the nearest captured
  // ancestor reached through plain arithmetic, else an external tap on the
  // direct source. Switch predicates always use the tap (real values).
  struct TrackerEdge {
    NodeId src;
    int src_port;
    NodeId dst;
    int dst_port;
  };
  struct TrackerTap {
    NodeId tap;  // original node whose firings drive the port
    NodeId dst;
    int dst_port;
  };
  std::vector<TrackerEdge> internal;
  std::vector<TrackerTap> taps;

  auto nearest_captured = [&](NodeId src, int src_port)
      -> std::optional<std::pair<NodeId, int>> {
    std::vector<std::pair<NodeId, int>> frontier{{src, src_port}};
    std::set<NodeId> seen;
    std::vector<std::pair<NodeId, int>> found;
    while (!frontier.empty()) {
      auto [id, port] = frontier.back();
      frontier.pop_back();
      if (!seen.insert(id).second) continue;
      if (captured.count(id)) {
        found.push_back({id, port});
        continue;
      }
      const OpKind& k = g.nodes.at(id);
      switch (k.op) {
        case Op::Add:
        case Op::Sub:
        case Op::Mul:
        case Op::Div:
        case Op::Neg:
        case Op::Eq:
        case Op::Lt:
        case Op::Not:
          for (const auto& e : g.data_edges)
            if (e.dst == id) frontier.push_back({e.src, e.src_port});
          break;
        default:
          break;  // scope changers and sources stop the walk
      }
    }
    if (found.empty()) return std::nullopt;
    std::sort(found.begin(), found.end());
    return found[0];
  };

  for (const auto& v : captured) {
    const OpKind& vk = g.nodes.at(v);
    int ports = fixed_input_ports(vk.op);
    if (ports < 0) ports = g.in_degree(v);
    std::vector<DataEdge> ins(ports);
    for (const auto& e : g.data_edges)
      if (e.dst == v && e.dst_port < ports) ins[e.dst_port] = e;
    for (int p = 0; p < ports; ++p) {
      if (ins[p].src.empty()) continue;
      bool is_pred = vk.op == Op::Switch && p == 0;
      if (!is_pred) {
        auto anc = nearest_captured(ins[p].src, ins[p].src_port);
        if (anc) {
          internal.push_back({anc->first, anc->second, v, p});
          continue;
        }
      }
      taps.push_back({ins[p].src, v, p});
    }
  }

  // Gates: cross-worker Recv (and constant-fed Send) nodes whose records
  // carry scoped tags wait on that scope's producers.
  struct Gate {
    int worker;
    NodeId node;   // the Send/Recv node in that worker's graph
    int scope;
  };
  std::vector<Gate> gates;
  for (const auto& c : pp.channels) {
    if (c.kind == ChannelInfo::Kind::TrackerPulse) continue;
    int sigma = pure.at(c.src)
                    ? (sa.firing_scope.count(c.dst) ? sa.firing_scope.at(c.dst)
                                                    : ScopeAnalysis::kUnknown)
                    : sa.edge_scope(g, c.src);
    if (sigma <= ScopeAnalysis::kRoot) continue;  // root or unknown: ungated
    gates.push_back({c.dst_worker, pp.recv_node(c.id), sigma});
    if (pure.at(c.src))
      gates.push_back({c.src_worker, pp.send_node(c.id), sigma});
  }

  // Workers needing a tracker copy: they hold a gate on a scope with at
  // least one remote producer.
  std::set<int> holders;
  for (const auto& gt : gates)
    for (const auto& prod : sa.producers[gt.scope])
      if (w_of.at(prod) != gt.worker) holders.insert(gt.worker);

  auto tk = [](const NodeId& id) { return "tk$" + id; };

  for (int w : holders) {
    Graph& part = pp.parts[w];
    for (const auto& id : captured) {
      OpKind kind = g.nodes.at(id);
      part.add_node(tk(id), kind);
    }
    for (const auto& e : internal)
      part.add_edge(tk(e.src), e.src_port, tk(e.dst), e.dst_port);
    pp.tracker_holders.push_back(w);
  }

  // Pulse channels drive tracker inputs that have no captured ancestor.
  if (enable_pulses) {
    int next_ch = 0;
    for (const auto& c : pp.channels) next_ch = std::max(next_ch, c.id + 1);
    for (int w : holders)
      for (const auto& t : taps) {
        ChannelInfo ci{next_ch++, w_of.at(t.tap), w,
                       ChannelInfo::Kind::TrackerPulse,
                       t.tap, 0, tk(t.dst), t.dst_port};
        pp.channels.push_back(ci);
      }
  }

  // Gate control edges: local producers gate directly, remote ones through
  // the local tracker copy.
  for (const auto& gt : gates) {
    Graph& part = pp.parts[gt.worker];
    for (const auto& prod : sa.producers[gt.scope]) {
      NodeId src = w_of.at(prod) == gt.worker ? prod : tk(prod);
      if (!part.find(src)) continue;  // tracker disabled or absent
      part.add_control_edge(src, gt.node);
      pp.recv_gates[prod].push_back(gt.node);
    }
  }
  return pp;
}

// ---------------------------------------------------------------------------
// run_distributed: one executor per worker, exchanging tokens over channels.
// Workers are interleaved by a seeded scheduler; channels deliver
// immediately into the destination engine, where gated Recvs hold records
// until their tag is justified.
// ---------------------------------------------------------------------------

struct DistributedResult {
  RunStatus status = RunStatus::Error;
  Payload result;
  std::string error;
  std::vector<RunStats> worker_stats;
  std::vector<std::string> stuck;  // "(w<k>, node, tag)"
  std::map<int, std::pair<uint64_t, uint64_t>> channel_counts;  // sent, recv
  uint64_t total_steps = 0;

  double value() const {
    if (status != RunStatus::Ok || !result.is_scalar())
      throw std::runtime_error("distributed run did not produce a scalar: " +
                               error);
    return result.num;
  }

  bool conserved() const {
    for (const auto& [ch, sr] : channel_counts)
      if (sr.first != sr.second) return false;
    return true;
  }
};

inline DistributedResult run_distributed(const PartitionedProgram& pp,
                                         const RunOptions& opts = {}) {
  DistributedResult out;

  std::vector<std::unique_ptr<Executor>> workers;
  std::map<int, const ChannelInfo*> chan;
  for (const auto& c : pp.channels) chan[c.id] = &c;

  // Per-worker bootstrap: seed nodes assigned to it.
  std::vector<std::vector<NodeId>> boots(pp.workers);
  for (const auto& [node, w] : pp.bootstrap) boots[w].push_back(node);
  // Root-scope Sends fed by constant chains also self-start.
  {
    auto pure = const_pure_map(pp.original);
    ScopeAnalysis sa = analyze_scopes(pp.original);
    for (const auto& c : pp.channels) {
      if (c.kind != ChannelInfo::Kind::Data || !pure.count(c.src) ||
          !pure.at(c.src))
        continue;
      int sigma = sa.firing_scope.count(c.dst) ? sa.firing_scope.at(c.dst)
                                               : ScopeAnalysis::kUnknown;
      if (sigma == ScopeAnalysis::kRoot)
        boots[c.src_worker].push_back(pp.send_node(c.id));
    }
  }

  struct Mail {
    int channel;
    Tag tag;
    Payload payload;
  };
  std::deque<Mail> mailbox;

  for (int w = 0; w < pp.workers; ++w) {
    RunOptions o = opts;
    o.scheduler_seed = opts.scheduler_seed == 0 ? 0 : opts.scheduler_seed + w;
    workers.push_back(
        std::make_unique<Executor>(pp.parts[w], o, boots[w]));
    workers[w]->set_send_hook([&, w](int ch, const Tag& tag, const Payload& p) {
      mailbox.push_back({ch, tag, p});
      out.channel_counts[ch].first++;
    });
  }

  // Receive accounting through Recv taps.
  for (const auto& c : pp.channels) {
    if (c.kind == ChannelInfo::Kind::TrackerPulse) continue;
    int id = c.id;
    workers[c.dst_worker]->add_tap(
        pp.recv_node(c.id),
        [&out, id](const NodeId&, const Tag&, const Payload&) {
          out.channel_counts[id].second++;
        });
  }
  for (const auto& c : pp.channels)
    out.channel_counts[c.id];  // ensure presence even if unused

  // Tracker pulses: tap the original node on its worker and inject into the
  // holder's tracker copy.
  if (pp.tracker_enabled) {
    for (const auto& c : pp.channels) {
      if (c.kind != ChannelInfo::Kind::TrackerPulse) continue;
      int ch = c.id;
      workers[c.src_worker]->add_tap(
          c.src, [&mailbox, &out, ch](const NodeId&, const Tag& tag,
                                      const Payload& p) {
            mailbox.push_back({ch, tag, p});
            out.channel_counts[ch].first++;
          });
    }
  }

  std::mt19937_64 rng(opts.scheduler_seed);
  for (auto& w : workers) w->start();

  uint64_t steps = 0;
  auto flush = [&]() {
    while (!mailbox.empty()) {
      Mail m = std::move(mailbox.front());
      mailbox.pop_front();
      const ChannelInfo* c = chan.at(m.channel);
      if (c->kind == ChannelInfo::Kind::TrackerPulse) {
        workers[c->dst_worker]->inject_data(c->dst, c->dst_port, m.tag,
                                            m.payload);
        out.channel_counts[m.channel].second++;
      } else {
        workers[c->dst_worker]->inject_data(pp.recv_node(m.channel), 0, m.tag,
                                            m.payload);
      }
    }
  };

  flush();
  for (;;) {
    std::vector<int> runnable;
    for (int w = 0; w < pp.workers; ++w)
      if (workers[w]->has_ready()) runnable.push_back(w);
    bool halted = false;
    for (auto& w : workers) halted = halted || w->halted();
    if (runnable.empty() || halted || steps > opts.max_steps) break;
    int pick = runnable[opts.scheduler_seed == 0
                            ? 0
                            : (size_t)(rng() % runnable.size())];
    workers[pick]->step();
    ++steps;
    flush();
  }

  out.total_steps = steps;
  int owner = -1;
  for (int w = 0; w < pp.workers; ++w) {
    RunResult r = workers[w]->finish();
    out.worker_stats.push_back(r.stats);
    for (const auto& s : r.stuck)
      out.stuck.push_back("w" + std::to_string(w) + ":" + s);
    if (workers[w]->has_result()) owner = w;
    if (r.status == RunStatus::Fault) {
      out.status = RunStatus::Fault;
      out.error = "w" + std::to_string(w) + ": " + r.error;
      return out;
    }
    if (workers[w]->halted() && out.error.empty())
      out.error = "w" + std::to_string(w) + ": " + r.error;
  }
  if (steps > opts.max_steps) {
    out.status = RunStatus::Error;
    out.error = "distributed step limit exceeded";
    return out;
  }
  if (owner < 0) {
    out.status = RunStatus::Error;
    if (out.error.empty()) {
      out.error = "distributed deadlock";
      for (size_t i = 0; i < out.stuck.size() && i < 8; ++i)
        out.error += " " + out.stuck[i];
    }
    return out;
  }
  const Payload& res = workers[owner]->result();
  if (res.is_dead()) {
    out.status = RunStatus::Error;
    out.error = "program produced a dead result";
    return out;
  }
  if (!out.error.empty()) {
    out.status = RunStatus::Error;
    return out;
  }
  out.status = RunStatus::Ok;
  out.result = res;
  return out;
}

}  // namespace tagflow
