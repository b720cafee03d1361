#pragma once

#include <cmath>
#include <cstdint>
#include <deque>
#include <functional>
#include <map>
#include <optional>
#include <ostream>
#include <random>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "tagflow/graph.hpp"
#include "tagflow/tag.hpp"

namespace tagflow {

// Engine misuse: malformed tags at frame operators, type errors, double
// delivery. Distinct from user-level runtime errors (division by zero,
// limits), which surface as a failed RunResult.
struct EngineFault : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// User-level runtime problem: poisoned arithmetic, exceeded limits.
struct RuntimeProblem : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Fired {
  int port = 0;
  Token token;
  bool control = false;
};

// ---------------------------------------------------------------------------
// The firing rule as a pure function from operator + input tokens to output
// tokens. All inputs must carry the same tag (the scheduler guarantees this;
// Merge fires on single arrivals and is special-cased by the scheduler).
// Strict operators propagate deadness; Call/Return/Enter/Exit/Next perform
// the tag arithmetic.
// ---------------------------------------------------------------------------

namespace detail {

inline double want_scalar(const OpKind& kind, const Payload& p) {
  if (!p.is_scalar())
    throw EngineFault(std::string(op_name(kind.op)) +
                      " expects a scalar operand, got " + p.str());
  return p.num;
}

inline Payload eval_strict(const OpKind& kind, const std::vector<Token>& in) {
  for (const auto& t : in)
    if (t.payload.is_dead()) return Payload::dead();
  switch (kind.op) {
    case Op::Add:
      return Payload::scalar(want_scalar(kind, in[0].payload) +
                             want_scalar(kind, in[1].payload));
    case Op::Sub:
      return Payload::scalar(want_scalar(kind, in[0].payload) -
                             want_scalar(kind, in[1].payload));
    case Op::Mul:
      return Payload::scalar(want_scalar(kind, in[0].payload) *
                             want_scalar(kind, in[1].payload));
    case Op::Div: {
      double d = want_scalar(kind, in[1].payload);
      if (d == 0.0) throw RuntimeProblem("division by zero");
      return Payload::scalar(want_scalar(kind, in[0].payload) / d);
    }
    case Op::Neg:
      return Payload::scalar(-want_scalar(kind, in[0].payload));
    case Op::Eq:
      return Payload::boolean(want_scalar(kind, in[0].payload) ==
                              want_scalar(kind, in[1].payload));
    case Op::Lt:
      return Payload::boolean(want_scalar(kind, in[0].payload) <
                              want_scalar(kind, in[1].payload));
    case Op::Not:
      if (!in[0].payload.is_bool())
        throw EngineFault("not expects a boolean operand");
      return Payload::boolean(!in[0].payload.truth);
    default:
      throw EngineFault("eval_strict on non-strict operator");
  }
}

}  // namespace detail

inline std::vector<Fired> fire(const OpKind& kind,
                               const std::vector<Token>& in) {
  for (size_t i = 1; i < in.size(); ++i)
    if (kind.op != Op::Merge && in[i].tag != in[0].tag)
      throw EngineFault("firing rule violated: input tags differ");
  const Tag tag = in.empty() ? Tag() : in[0].tag;

  switch (kind.op) {
    case Op::Add:
    case Op::Sub:
    case Op::Mul:
    case Op::Div:
    case Op::Neg:
    case Op::Eq:
    case Op::Lt:
    case Op::Not: {
      Payload out = detail::eval_strict(kind, in);
      if (out.is_scalar() && !std::isfinite(out.num))
        throw RuntimeProblem("arithmetic produced a non-finite value");
      return {{0, {tag, out}}};
    }

    case Op::Switch: {
      const Payload& pred = in[0].payload;
      const Payload& data = in[1].payload;
      if (pred.is_dead() || data.is_dead())
        return {{0, {tag, Payload::dead()}}, {1, {tag, Payload::dead()}}};
      if (!pred.is_bool())
        throw EngineFault("switch predicate must be boolean");
      if (pred.truth)
        return {{0, {tag, data}}, {1, {tag, Payload::dead()}}};
      return {{0, {tag, Payload::dead()}}, {1, {tag, data}}};
    }

    case Op::Merge: {
      for (const auto& t : in)
        if (!t.payload.is_dead()) return {{0, t}};
      return {{0, {tag, Payload::dead()}}};
    }

    case Op::Enter:
      return {{0, {tag.push(Frame::loop(0)), in[0].payload}}};

    case Op::Exit: {
      if (tag.empty()) throw EngineFault("exit on an empty tag");
      if (tag.head().kind != Frame::Kind::Loop)
        throw EngineFault("exit on a call frame");
      if (in[0].payload.is_dead()) return {};  // dead iterations do not exit
      return {{0, {tag.pop(), in[0].payload}}};
    }

    case Op::Next: {
      if (tag.empty()) throw EngineFault("next on an empty tag");
      if (tag.head().kind != Frame::Kind::Loop)
        throw EngineFault("next on a call frame");
      if (in[0].payload.is_dead()) return {};  // stop deadness at iteration end
      Tag t = tag.pop().push(Frame::loop(tag.head().value + 1));
      return {{0, {t, in[0].payload}}};
    }

    case Op::Call: {
      Tag pushed = tag.push(Frame::call((uint64_t)kind.label));
      if (in[0].payload.is_dead()) {
        // The body is not entered; deadness travels over the control edge
        // to the matching Return.
        return {{0, {pushed, Payload::dead()}, true}};
      }
      return {{0, {pushed, in[0].payload}},
              {0, {pushed, Payload::unit()}, true}};
    }

    case Op::Return: {
      if (tag.empty()) throw EngineFault("return on an empty tag");
      if (tag.head().kind != Frame::Kind::Call)
        throw EngineFault("return on a loop frame");
      if (tag.head().value != (uint64_t)kind.label) return {};  // no output
      return {{0, {tag.pop(), in[0].payload}}};
    }

    default:
      throw EngineFault(std::string("fire on scheduler-level operator ") +
                        op_name(kind.op));
  }
}

// ---------------------------------------------------------------------------
// Run options, statistics, results
// ---------------------------------------------------------------------------

struct RunOptions {
  uint32_t max_tag_depth = 100000;
  uint64_t max_steps = 1000000000ull;
  uint64_t scheduler_seed = 0;  // 0: deterministic LIFO; else seeded shuffle
  bool batch_mode = false;      // fire whole ready waves ("concurrent" mode)
  bool collect_tag_stats = false;
  bool trace = false;
  std::ostream* trace_out = nullptr;
};

struct RunStats {
  std::map<NodeId, uint64_t> firings;       // every firing event, drops included
  std::map<NodeId, uint64_t> live_firings;  // firings with a live data output
  std::map<NodeId, std::map<std::string, uint64_t>> firings_by_tag;
  uint64_t steps = 0;
  uint64_t nodes_materialized = 0;  // dynamic executor only
  size_t max_live_tags = 0;

  uint64_t firings_of(const NodeId& id) const {
    auto it = firings.find(id);
    return it == firings.end() ? 0 : it->second;
  }
  uint64_t live_firings_of(const NodeId& id) const {
    auto it = live_firings.find(id);
    return it == live_firings.end() ? 0 : it->second;
  }
};

enum class RunStatus { Ok, Error, Fault };

struct RunResult {
  RunStatus status = RunStatus::Error;
  Payload result;
  RunStats stats;
  std::string error;
  std::vector<std::string> stuck;  // "(node, tag)" left-overs at quiescence

  double value() const {
    if (status != RunStatus::Ok || !result.is_scalar())
      throw std::runtime_error("run did not produce a scalar: " + error);
    return result.num;
  }
};

// ---------------------------------------------------------------------------
// Static-graph executor
// ---------------------------------------------------------------------------

class Executor {
 public:
  // Called when a Send node fires: (channel, tag, payload).
  using SendHook = std::function<void(int, const Tag&, const Payload&)>;
  // Called after a tapped node fires: (node, tag, first data output).
  using TapHook =
      std::function<void(const NodeId&, const Tag&, const Payload&)>;

  Executor(const Graph& g, RunOptions opts = {},
           std::optional<std::vector<NodeId>> bootstrap_override = std::nullopt)
      : graph_(g), opts_(opts), rng_(opts.scheduler_seed) {
    compile(bootstrap_override);
  }

  // Full local run: bootstrap, drain, report.
  RunResult run() {
    start();
    while (!halted_ && has_ready()) step();
    return finish();
  }

  // --- incremental interface (used by the distributed simulator) ----------

  void start() {
    try {
      for (int src : bootstrap_demands_) demand(src, Tag());
    } catch (const RuntimeProblem& e) {
      fail(e.what(), false);
    } catch (const EngineFault& e) {
      fail(e.what(), true);
    }
    drain_deliveries();
  }

  bool has_ready() const { return !ready_.empty() && !halted_; }
  bool halted() const { return halted_; }

  // Fires one ready instance (one full wave in batch mode). Returns false
  // when nothing was ready.
  bool step() {
    if (halted_ || ready_.empty()) return false;
    if (opts_.batch_mode) {
      std::vector<ReadyEntry> wave;
      wave.swap(ready_);
      for (auto& e : wave) {
        if (halted_) break;
        fire_instance(e.node, e.tag);
      }
      drain_deliveries();
      return true;
    }
    ReadyEntry e = pop_ready();
    fire_instance(e.node, e.tag);
    drain_deliveries();
    return true;
  }

  void inject_data(const NodeId& node, int port, const Tag& tag,
                   const Payload& p) {
    deliveries_.push_back({index_of(node), port, tag, p, false});
    drain_deliveries();
  }
  void inject_control(const NodeId& node, const Tag& tag, const Payload& p) {
    deliveries_.push_back({index_of(node), 0, tag, p, true});
    drain_deliveries();
  }

  void set_send_hook(SendHook h) { on_send_ = std::move(h); }
  void add_tap(const NodeId& node, TapHook h) {
    taps_[index_of(node)].push_back(std::move(h));
  }

  bool has_result() const { return result_.has_value(); }
  const Payload& result() const { return *result_; }

  // Assembles status, stats and left-over report. Meaningful once quiescent.
  RunResult finish() {
    RunResult r;
    r.stats = make_stats();
    r.stuck = stuck_report();
    if (halted_) {
      r.status = fault_internal_ ? RunStatus::Fault : RunStatus::Error;
      r.error = error_;
    } else if (!result_) {
      r.status = RunStatus::Error;
      r.error = "deadlock: the output never received a token";
      if (!r.stuck.empty()) {
        r.error += "; stuck:";
        for (size_t i = 0; i < r.stuck.size() && i < 8; ++i)
          r.error += " " + r.stuck[i];
      }
    } else if (result_->is_dead()) {
      r.status = RunStatus::Error;
      r.error = "program produced a dead result";
      r.result = *result_;
    } else {
      r.status = RunStatus::Ok;
      r.result = *result_;
    }
    return r;
  }

  // (node, tag) instances still holding undelivered state, sorted.
  std::vector<std::string> stuck_report() const {
    std::vector<std::string> out;
    for (const auto& [key, act] : acts_) {
      if (act.fired) continue;
      if (act.arrived == 0 && act.ctrl_arrived == 0 && act.merge_dead == 0)
        continue;
      out.push_back("(" + nodes_[key.node].id + ", " + key.tag.str() + ")");
    }
    std::sort(out.begin(), out.end());
    return out;
  }

  RunStats make_stats() const {
    RunStats s;
    for (size_t i = 0; i < nodes_.size(); ++i) {
      if (firings_[i]) s.firings[nodes_[i].id] = firings_[i];
      if (live_firings_[i]) s.live_firings[nodes_[i].id] = live_firings_[i];
    }
    if (opts_.collect_tag_stats)
      for (const auto& [key, count] : tag_firings_)
        s.firings_by_tag[nodes_[key.node].id][key.tag.str()] = count;
    s.steps = steps_;
    s.max_live_tags = max_live_tags_;
    return s;
  }

  const Graph& graph() const { return graph_; }

 private:
  // --- compiled representation --------------------------------------------

  struct CNode {
    NodeId id;
    OpKind kind;
    int ports = 0;    // data input ports
    int ctrl_in = 0;  // incoming control edges
    std::vector<std::pair<int, int>> in_src;            // per port (node, port)
    std::vector<std::vector<std::pair<int, int>>> out;  // per out port
    std::vector<std::pair<int, int>> ctrl_out;  // (dst, src port or -1)
    bool const_pure = false;
    std::vector<int> const_pure_src;  // per port: source node when const-pure
    int merge_expected = 0;  // deliveries after which a merge can be retired
    bool memo_demand = false;  // const feeding Merge/Return: dedupe via memo
  };

  struct ActKey {
    int node;
    Tag tag;
    bool operator==(const ActKey& o) const {
      return node == o.node && tag == o.tag;
    }
  };
  struct ActKeyHash {
    size_t operator()(const ActKey& k) const {
      return k.tag.hash() * 1000003u + (size_t)k.node;
    }
  };

  // present[] per port: 0 absent, 1 delivered, 2 reserved by a pending
  // demanded-constant delivery (so repeated demands stay idempotent).
  struct Act {
    std::vector<Payload> inputs;
    std::vector<uint8_t> present;
    int arrived = 0;
    int ctrl_arrived = 0;
    bool ctrl_dead = false;
    Payload ctrl_payload;
    bool queued = false;
    bool fired = false;  // for Merge: forwarded (or went dead)
    int merge_dead = 0;
  };

  struct ReadyEntry {
    int node;
    Tag tag;
  };

  struct Delivery {
    int node;
    int port;
    Tag tag;
    Payload payload;
    bool control;
  };

  void compile(const std::optional<std::vector<NodeId>>& bootstrap_override) {
    int idx = 0;
    for (const auto& [id, kind] : graph_.nodes) {
      index_[id] = idx++;
      CNode n;
      n.id = id;
      n.kind = kind;
      nodes_.push_back(std::move(n));
    }
    for (auto& n : nodes_) {
      int fixed = fixed_input_ports(n.kind.op);
      n.ports = fixed >= 0 ? fixed : graph_.in_degree(n.id);
      if (n.kind.op == Op::Recv) n.ports = 1;  // the injected record
      n.in_src.assign(n.ports, {-1, -1});
      n.const_pure_src.assign(n.ports, -1);
      int outs = fixed_output_ports(n.kind.op);
      n.out.resize(outs < 0 ? 0 : outs);
      if (n.kind.op == Op::Output && n.kind.index == 0)
        output_node_ = index_[n.id];
    }
    for (const auto& e : graph_.data_edges) {
      int s = index_.at(e.src), d = index_.at(e.dst);
      if ((int)nodes_[s].out.size() <= e.src_port)
        nodes_[s].out.resize(e.src_port + 1);
      nodes_[s].out[e.src_port].push_back({d, e.dst_port});
      if (e.dst_port < nodes_[d].ports)
        nodes_[d].in_src[e.dst_port] = {s, e.src_port};
    }
    for (const auto& e : graph_.control_edges) {
      int s = index_.at(e.src), d = index_.at(e.dst);
      nodes_[s].ctrl_out.push_back({d, e.src_port});
      nodes_[d].ctrl_in++;
    }

    compute_const_purity();

    // A merge fed by tag-creating nodes (function entry, loop head) sees
    // exactly one delivery per tag; a branch-join merge hears from every
    // input. The count bounds how long the activation must be retained.
    for (auto& n : nodes_) {
      if (n.kind.op != Op::Merge) continue;
      n.merge_expected = n.ports;
      for (auto [s, sp] : n.in_src) {
        if (s < 0) continue;
        Op op = nodes_[s].kind.op;
        if (op == Op::Call || op == Op::Enter || op == Op::Next)
          n.merge_expected = 1;
      }
    }

    // Constants delivering into Merge or Return ports, or carrying control
    // edges, cannot be deduplicated by consumer port state; those few use a
    // per-tag memo instead.
    for (auto& n : nodes_) {
      if (n.kind.op != Op::Const || n.out.empty()) continue;
      n.memo_demand = !n.ctrl_out.empty();
      for (auto [dst, dport] : n.out[0]) {
        Op op = nodes_[dst].kind.op;
        if (op == Op::Merge || op == Op::Return) n.memo_demand = true;
      }
    }

    firings_.assign(nodes_.size(), 0);
    live_firings_.assign(nodes_.size(), 0);

    if (bootstrap_override) {
      for (const auto& id : *bootstrap_override)
        add_bootstrap(index_of(id));
    } else {
      for (int n : entry_region()) add_bootstrap(n);
    }
  }

  void compute_const_purity() {
    // Const-pure: a Const, or a pure arithmetic/comparison operator whose
    // whole ancestry is const-pure. Such subgraphs materialize on demand at
    // whatever tag a consumer requires.
    bool changed = true;
    while (changed) {
      changed = false;
      for (auto& n : nodes_) {
        if (n.const_pure) continue;
        bool pure = false;
        switch (n.kind.op) {
          case Op::Const:
            pure = true;
            break;
          case Op::Add:
          case Op::Sub:
          case Op::Mul:
          case Op::Div:
          case Op::Neg:
          case Op::Eq:
          case Op::Lt:
          case Op::Not:
            pure = n.ctrl_in == 0;
            for (auto [s, sp] : n.in_src)
              pure = pure && s >= 0 && nodes_[s].const_pure;
            break;
          default:
            break;
        }
        if (pure) {
          n.const_pure = true;
          changed = true;
        }
      }
    }
    for (auto& n : nodes_)
      for (int p = 0; p < n.ports; ++p) {
        int s = n.in_src[p].first;
        if (s >= 0 && nodes_[s].const_pure) n.const_pure_src[p] = s;
      }
  }

  // Nodes executing at the root tag: backward from the Output, crossing a
  // Return only via its control edge (the function body behind its data
  // input runs under deeper tags).
  std::vector<int> entry_region() const {
    std::vector<int> region;
    if (output_node_ < 0) return region;
    std::vector<char> seen(nodes_.size(), 0);
    std::vector<std::vector<int>> ctrl_src(nodes_.size());
    for (size_t i = 0; i < nodes_.size(); ++i)
      for (auto [d, sp] : nodes_[i].ctrl_out) ctrl_src[d].push_back((int)i);
    std::vector<int> work{output_node_};
    seen[output_node_] = 1;
    while (!work.empty()) {
      int u = work.back();
      work.pop_back();
      region.push_back(u);
      auto visit = [&](int v) {
        if (v >= 0 && !seen[v]) {
          seen[v] = 1;
          work.push_back(v);
        }
      };
      if (nodes_[u].kind.op != Op::Return)
        for (auto [s, sp] : nodes_[u].in_src) visit(s);
      for (int s : ctrl_src[u]) visit(s);
    }
    std::sort(region.begin(), region.end());
    return region;
  }

  // Root-region nodes whose every input is const-pure fire at the empty tag
  // without any arrival to trigger them; seed their sources at startup.
  void add_bootstrap(int idx) {
    const CNode& node = nodes_[idx];
    if (node.const_pure || node.ports == 0 || node.ctrl_in > 0) return;
    for (int p = 0; p < node.ports; ++p)
      if (node.const_pure_src[p] < 0) return;
    for (int p = 0; p < node.ports; ++p)
      bootstrap_demands_.push_back(node.const_pure_src[p]);
  }

  int index_of(const NodeId& id) const {
    auto it = index_.find(id);
    if (it == index_.end()) throw EngineFault("unknown node '" + id + "'");
    return it->second;
  }

  // --- runtime -------------------------------------------------------------

  Act& act_at(int node, const Tag& tag) {
    auto [it, inserted] = acts_.try_emplace({node, tag});
    if (inserted) {
      it->second.inputs.resize(nodes_[node].ports);
      it->second.present.assign(nodes_[node].ports, 0);
      if (++live_per_tag_[tag.hash()] == 1)
        max_live_tags_ = std::max(max_live_tags_, live_per_tag_.size());
    }
    return it->second;
  }

  void retire(int node, const Tag& tag) {
    auto it = acts_.find({node, tag});
    if (it == acts_.end()) return;
    acts_.erase(it);
    auto lit = live_per_tag_.find(tag.hash());
    if (lit != live_per_tag_.end() && --lit->second == 0)
      live_per_tag_.erase(lit);
  }

  void fail(const std::string& msg, bool internal) {
    if (halted_) return;
    halted_ = true;
    fault_internal_ = internal;
    error_ = msg;
  }

  ReadyEntry pop_ready() {
    if (opts_.scheduler_seed != 0 && ready_.size() > 1) {
      size_t i = rng_() % ready_.size();
      std::swap(ready_[i], ready_.back());
    }
    ReadyEntry e = ready_.back();
    ready_.pop_back();
    return e;
  }

  // Materializes a const-pure subgraph at the given tag. Idempotent: a Const
  // reserves its consumers' ports when it enqueues a delivery, so repeated
  // demands for the same tag are no-ops. Interior pure operators then fire
  // through the ordinary delivery path.
  void demand(int node, const Tag& tag) {
    const CNode& n = nodes_[node];
    if (n.kind.op == Op::Const) {
      if (n.memo_demand && !demanded_.insert({node, tag}).second) return;
      bool delivered = false;
      for (auto [dst, dport] : n.out[0]) {
        const CNode& d = nodes_[dst];
        if (d.kind.op != Op::Merge && d.kind.op != Op::Return &&
            dport < d.ports) {
          Act& act = act_at(dst, tag);
          if (act.present[dport] || act.fired) continue;
          act.present[dport] = 2;  // reserved
        }
        delivered = true;
        deliveries_.push_back(
            {dst, dport, tag, Payload::scalar(n.kind.value), false});
      }
      if (!n.ctrl_out.empty()) {
        emit_control(node, tag, Payload::unit());
        delivered = true;
      }
      if (delivered) {
        count_firing(node, tag, true);
        trace(node, tag, Payload::scalar(n.kind.value));
        run_taps(node, tag, Payload::scalar(n.kind.value));
      }
      return;
    }
    for (int p = 0; p < n.ports; ++p)
      if (n.in_src[p].first >= 0) demand(n.in_src[p].first, tag);
  }

  void demand_const_ports(int node, const Tag& tag) {
    const CNode& n = nodes_[node];
    for (int p = 0; p < n.ports; ++p)
      if (n.const_pure_src[p] >= 0) demand(n.const_pure_src[p], tag);
  }

  void emit_data(int node, int port, const Tag& tag, const Payload& p) {
    const CNode& n = nodes_[node];
    if (port >= (int)n.out.size()) return;
    for (auto [dst, dport] : n.out[port])
      deliveries_.push_back({dst, dport, tag, p, false});
  }

  void emit_control(int node, const Tag& tag, const Payload& p) {
    for (auto [dst, sp] : nodes_[node].ctrl_out)
      deliveries_.push_back({dst, 0, tag, p, true});
  }

  // Control tokens from value operators mirror a data output: its tag and
  // its liveness (per-port for Switch). Edges with src_port -1 follow the
  // first output.
  void emit_port_controls(int node, const std::vector<Fired>& outs) {
    for (auto [dst, sp] : nodes_[node].ctrl_out) {
      int want = sp < 0 ? (outs.empty() ? -1 : outs[0].port) : sp;
      for (const auto& f : outs) {
        if (f.control || f.port != want) continue;
        deliveries_.push_back({dst, 0, f.token.tag,
                               f.token.payload.is_dead() ? Payload::dead()
                                                         : Payload::unit(),
                               true});
        break;
      }
    }
  }

  void drain_deliveries() {
    while (!deliveries_.empty() && !halted_) {
      Delivery d = std::move(deliveries_.front());
      deliveries_.pop_front();
      try {
        if (d.control)
          deliver_control(d);
        else
          deliver_data(d);
      } catch (const RuntimeProblem& e) {
        fail(std::string(e.what()) + " at node " + nodes_[d.node].id +
                 " tag " + d.tag.str(),
             false);
      } catch (const EngineFault& e) {
        fail(std::string(e.what()) + " at node " + nodes_[d.node].id +
                 " tag " + d.tag.str(),
             true);
      }
    }
  }

  void deliver_data(const Delivery& d) {
    const CNode& n = nodes_[d.node];
    if (n.kind.op == Op::Merge) {
      deliver_merge(d);
      return;
    }
    if (n.kind.op == Op::Return) {
      deliver_return_data(d);
      return;
    }
    if (d.port >= n.ports) throw EngineFault("delivery to out-of-range port");

    // Demand before touching the activation: demand() may create other
    // activations and rehash the map.
    demand_const_ports(d.node, d.tag);
    Act& act = act_at(d.node, d.tag);
    if (act.fired) return;
    if (act.present[d.port] == 1)
      throw EngineFault("double delivery to port " + std::to_string(d.port));
    act.present[d.port] = 1;
    act.inputs[d.port] = d.payload;
    act.arrived++;
    maybe_queue(d.node, d.tag, act);
  }

  void deliver_control(const Delivery& d) {
    const CNode& n = nodes_[d.node];
    if (n.kind.op == Op::Return) {
      deliver_return_control(d);
      return;
    }
    if (n.kind.op != Op::Merge) demand_const_ports(d.node, d.tag);
    Act& act = act_at(d.node, d.tag);
    act.ctrl_arrived++;
    if (d.payload.is_dead()) act.ctrl_dead = true;
    if (act.ctrl_arrived == 1) act.ctrl_payload = d.payload;
    if (n.kind.op == Op::Merge) {
      try_fire_merge(d.node, d.tag, act);
      return;
    }
    maybe_queue(d.node, d.tag, act);
  }

  bool ctrl_satisfied(const CNode& n, const Act& act) const {
    if (n.ctrl_in == 0) return true;
    // Send/Recv control edges name the possible tag producers; any single
    // one justifies the tag. Everything else waits for all control inputs.
    if (n.kind.op == Op::Recv || n.kind.op == Op::Send)
      return act.ctrl_arrived >= 1;
    return act.ctrl_arrived >= n.ctrl_in;
  }

  void maybe_queue(int node, const Tag& tag, Act& act) {
    const CNode& n = nodes_[node];
    if (act.queued || act.fired) return;
    if (act.arrived < n.ports || !ctrl_satisfied(n, act)) return;
    act.queued = true;
    ready_.push_back({node, tag});
  }

  // Merge: forwards the first live arrival; goes dead only when every input
  // is dead. Dead arrivals are counted, not stored.
  void deliver_merge(const Delivery& d) {
    Act& act = act_at(d.node, d.tag);
    if (d.payload.is_dead()) {
      act.merge_dead++;
    } else if (!act.fired) {
      if (act.arrived == 0) act.inputs[0] = d.payload;
      act.arrived++;
    } else {
      act.arrived++;  // late live arrival, already forwarded
    }
    try_fire_merge(d.node, d.tag, act);
  }

  void try_fire_merge(int node, const Tag& tag, Act& act) {
    const CNode& n = nodes_[node];
    if (!act.fired && act.ctrl_arrived >= n.ctrl_in) {
      if (act.arrived > 0) {
        act.fired = true;
        Payload out = act.inputs[0];
        count_firing(node, tag, true);
        trace(node, tag, out);
        run_taps(node, tag, out);
        emit_data(node, 0, tag, out);
        emit_control(node, tag, Payload::unit());
      } else if (n.ports > 0 && act.merge_dead >= n.ports) {
        act.fired = true;
        count_firing(node, tag, false);
        trace(node, tag, Payload::dead());
        run_taps(node, tag, Payload::dead());
        emit_data(node, 0, tag, Payload::dead());
        emit_control(node, tag, Payload::dead());
      }
    }
    if (act.fired && act.arrived + act.merge_dead >= n.merge_expected)
      retire(node, tag);
  }

  // Return consumes the function-body output plus the control token from its
  // Call. A mismatched label drops the token silently: every Return of a
  // function sees the fan-out of the body output and exactly one matches. A
  // dead control token fires the Return alone; the body was never entered.
  void deliver_return_data(const Delivery& d) {
    const CNode& n = nodes_[d.node];
    if (d.tag.empty()) throw EngineFault("return on an empty tag");
    if (d.tag.head().kind != Frame::Kind::Call)
      throw EngineFault("return on a loop frame");
    if (d.tag.head().value != (uint64_t)n.kind.label) {
      count_firing(d.node, d.tag, false);  // drop, no output
      return;
    }
    Act& act = act_at(d.node, d.tag);
    if (act.fired) return;
    act.present[0] = 1;
    act.inputs[0] = d.payload;
    act.arrived = 1;
    if (n.ctrl_in == 0 || act.ctrl_arrived >= n.ctrl_in)
      fire_return(d.node, d.tag, act);
  }

  void deliver_return_control(const Delivery& d) {
    const CNode& n = nodes_[d.node];
    if (!d.payload.is_dead())
      demand_const_ports(d.node, d.tag);  // constant-bodied functions
    Act& act = act_at(d.node, d.tag);
    if (act.fired) return;
    act.ctrl_arrived++;
    if (d.payload.is_dead()) {
      act.fired = true;
      count_firing(d.node, d.tag, false);
      trace(d.node, d.tag, Payload::dead());
      run_taps(d.node, d.tag.pop(), Payload::dead());
      emit_data(d.node, 0, d.tag.pop(), Payload::dead());
      emit_control(d.node, d.tag.pop(), Payload::dead());
      retire(d.node, d.tag);
      return;
    }
    if (act.arrived == 1 && act.ctrl_arrived >= n.ctrl_in)
      fire_return(d.node, d.tag, act);
  }

  void fire_return(int node, const Tag& tag, Act& act) {
    act.fired = true;
    Payload out = act.inputs[0];
    count_firing(node, tag, !out.is_dead());
    trace(node, tag, out);
    run_taps(node, tag.pop(), out);
    emit_data(node, 0, tag.pop(), out);
    emit_control(node, tag.pop(),
                 out.is_dead() ? Payload::dead() : Payload::unit());
    retire(node, tag);
  }

  void count_firing(int node, const Tag& tag, bool live) {
    steps_++;
    firings_[node]++;
    if (live) live_firings_[node]++;
    if (opts_.collect_tag_stats) tag_firings_[{node, tag}]++;
    if (steps_ > opts_.max_steps)
      throw RuntimeProblem("step limit exceeded (" +
                           std::to_string(opts_.max_steps) + ")");
  }

  void trace(int node, const Tag& tag, const Payload& out) {
    if (!opts_.trace || !opts_.trace_out) return;
    (*opts_.trace_out) << "node=" << nodes_[node].id << " tag=" << tag.str()
                       << " op=" << op_name(nodes_[node].kind.op)
                       << " out=" << out.str() << "\n";
  }

  void run_taps(int node, const Tag& tag, const Payload& p) {
    auto it = taps_.find(node);
    if (it == taps_.end()) return;
    for (auto& t : it->second) t(nodes_[node].id, tag, p);
  }

  void fire_instance(int node, const Tag& tag) {
    auto it = acts_.find({node, tag});
    if (it == acts_.end()) return;
    Act& act = it->second;
    if (act.fired) return;
    const CNode& n = nodes_[node];

    try {
      switch (n.kind.op) {
        case Op::Output: {
          if (!tag.empty())
            throw EngineFault("output node received a non-root tag");
          count_firing(node, tag, !act.inputs[0].is_dead());
          trace(node, tag, act.inputs[0]);
          result_ = act.inputs[0];
          break;
        }
        case Op::Send: {
          Payload p = n.ports > 0 ? act.inputs[0] : act.ctrl_payload;
          if (act.ctrl_dead) p = Payload::dead();
          count_firing(node, tag, !p.is_dead());
          trace(node, tag, p);
          if (on_send_) on_send_(n.kind.channel, tag, p);
          break;
        }
        case Op::Recv: {
          Payload p = act.inputs[0];
          count_firing(node, tag, !p.is_dead());
          trace(node, tag, p);
          run_taps(node, tag, p);
          emit_data(node, 0, tag, p);
          emit_control(node, tag,
                       p.is_dead() ? Payload::dead() : Payload::unit());
          break;
        }
        case Op::Call: {
          if (tag.depth() + 1 > opts_.max_tag_depth)
            throw RuntimeProblem("tag depth limit exceeded (recursion guard)");
          Payload in = act.ctrl_dead ? Payload::dead() : act.inputs[0];
          std::vector<Fired> outs = fire(n.kind, {{tag, in}});
          count_firing(node, tag, !in.is_dead());
          trace(node, tag, in);
          run_taps(node, tag.push(Frame::call((uint64_t)n.kind.label)), in);
          for (const auto& f : outs) {
            if (f.control)
              emit_control(node, f.token.tag, f.token.payload);
            else
              emit_data(node, f.port, f.token.tag, f.token.payload);
          }
          break;
        }
        case Op::Enter:
          if (tag.depth() + 1 > opts_.max_tag_depth)
            throw RuntimeProblem("tag depth limit exceeded");
          [[fallthrough]];
        case Op::Exit:
        case Op::Next:
        case Op::Switch:
        case Op::Add:
        case Op::Sub:
        case Op::Mul:
        case Op::Div:
        case Op::Neg:
        case Op::Eq:
        case Op::Lt:
        case Op::Not: {
          std::vector<Token> in;
          in.reserve(n.ports);
          for (int p = 0; p < n.ports; ++p)
            in.push_back({tag, act.ctrl_dead ? Payload::dead() : act.inputs[p]});
          std::vector<Fired> outs = fire(n.kind, in);
          bool live = false;
          for (const auto& f : outs) live |= !f.token.payload.is_dead();
          count_firing(node, tag, live);
          trace(node, tag,
                outs.empty() ? Payload::dead() : outs[0].token.payload);
          if (!outs.empty()) run_taps(node, tag, outs[0].token.payload);
          for (const auto& f : outs) {
            if (f.control)
              emit_control(node, f.token.tag, f.token.payload);
            else
              emit_data(node, f.port, f.token.tag, f.token.payload);
          }
          emit_port_controls(node, outs);
          break;
        }
        case Op::FnCall:
          throw EngineFault("fncall node in a static graph");
        case Op::Param:
          throw EngineFault("param node cannot fire");
        default:
          throw EngineFault("unexpected operator in scheduler");
      }
    } catch (const RuntimeProblem& e) {
      fail(std::string(e.what()) + " at node " + n.id + " tag " + tag.str(),
           false);
      return;
    } catch (const EngineFault& e) {
      fail(std::string(e.what()) + " at node " + n.id + " tag " + tag.str(),
           true);
      return;
    }
    act.fired = true;
    retire(node, tag);
  }

  // --- members -------------------------------------------------------------

  const Graph& graph_;
  RunOptions opts_;
  std::mt19937_64 rng_;

  std::map<NodeId, int> index_;
  std::vector<CNode> nodes_;
  int output_node_ = -1;
  std::vector<int> bootstrap_demands_;  // const-pure sources to seed at []

  std::unordered_map<ActKey, Act, ActKeyHash> acts_;
  std::unordered_set<ActKey, ActKeyHash> demanded_;  // memo-demand consts only
  std::unordered_map<size_t, int> live_per_tag_;
  std::vector<ReadyEntry> ready_;
  std::deque<Delivery> deliveries_;

  std::vector<uint64_t> firings_;
  std::vector<uint64_t> live_firings_;
  std::unordered_map<ActKey, uint64_t, ActKeyHash> tag_firings_;
  uint64_t steps_ = 0;
  size_t max_live_tags_ = 0;

  std::optional<Payload> result_;
  bool halted_ = false;
  bool fault_internal_ = false;
  std::string error_;

  SendHook on_send_;
  std::map<int, std::vector<TapHook>> taps_;
};

// Validates and runs a transformed (FnCall-free) graph locally.
inline RunResult run(const Graph& g, const RunOptions& opts = {}) {
  for (const auto& [id, kind] : g.nodes)
    if (kind.op == Op::FnCall) {
      RunResult r;
      r.status = RunStatus::Fault;
      r.error = "graph still contains fncall nodes; transform it first";
      return r;
    }
  Executor ex(g, opts);
  return ex.run();
}

}  // namespace tagflow
