#pragma once

#include <deque>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "tagflow/engine.hpp"
#include "tagflow/graph.hpp"

namespace tagflow {

// ---------------------------------------------------------------------------
// Dynamic-expansion baseline: executes an untransformed Program by splicing a
// fresh copy of the callee body into the live graph whenever an FnCall fires
// with live arguments. No tags are needed; every materialized node fires at
// most once. Retired expansions are recycled through a free list, so memory
// tracks the live recursion front, while `nodes_materialized` counts the total.
// ---------------------------------------------------------------------------

struct DynamicOptions {
  uint32_t max_depth = 100000;  // expansion depth guard
  uint64_t max_steps = 1000000000ull;
  uint64_t scheduler_seed = 0;
  bool collect_stats = true;
};

struct DynamicResult {
  RunStatus status = RunStatus::Error;
  Payload result;
  std::string error;
  uint64_t steps = 0;
  uint64_t expansions = 0;          // live FnCall activations
  uint64_t nodes_materialized = 0;  // template nodes instantiated in total
  uint64_t peak_nodes = 0;
  std::map<NodeId, uint64_t> firings;  // keyed "<graph>.<template node>"

  double value() const {
    if (status != RunStatus::Ok || !result.is_scalar())
      throw std::runtime_error("dynamic run did not produce a scalar: " + error);
    return result.num;
  }
};

class DynamicExecutor {
 public:
  DynamicExecutor(const Program& p, DynamicOptions opts = {})
      : prog_(p), opts_(opts), rng_(opts.scheduler_seed) {}

  DynamicResult run() {
    const Graph* entry = prog_.find(prog_.entry);
    if (!entry) {
      fail("entry graph '" + prog_.entry + "' not found", true);
      return finish();
    }
    instantiate(*entry, /*depth=*/0, /*args=*/{}, /*outs=*/{}, true);
    while (!halted_ && !ready_.empty()) {
      size_t pick = ready_.size() - 1;
      if (opts_.scheduler_seed != 0 && ready_.size() > 1) {
        pick = rng_() % ready_.size();
        std::swap(ready_[pick], ready_.back());
      }
      int n = ready_.back();
      ready_.pop_back();
      fire_node(n);
    }
    return finish();
  }

 private:
  struct DNode {
    const OpKind* kind = nullptr;
    std::string key;  // "<graph>.<template id>" for stats
    int ports = 0;
    int clone = -1;
    std::vector<Payload> inputs;
    std::vector<uint8_t> present;
    int arrived = 0;
    bool fired = false;
    bool queued = false;
    bool is_result = false;
    std::vector<std::vector<std::pair<int, int>>> out;  // per port: consumers
  };

  struct Clone {
    int depth = 0;
    int remaining = 0;  // unfired nodes; zero lets the slots be recycled
    std::vector<int> members;
  };

  int alloc_node() {
    if (!free_.empty()) {
      int n = free_.back();
      free_.pop_back();
      nodes_[n] = DNode{};
      return n;
    }
    nodes_.push_back(DNode{});
    return (int)nodes_.size() - 1;
  }

  // Splices one copy of `g` into the running graph. `args` feed the Param
  // consumers; `outs[j]` lists the consumers of output j. The entry graph
  // keeps its Output node and is never fed arguments.
  void instantiate(const Graph& g, int depth,
                   const std::vector<Payload>& args,
                   const std::vector<std::vector<std::pair<int, int>>>& outs,
                   bool is_entry) {
    if (depth > (int)opts_.max_depth) {
      fail("expansion depth limit exceeded", false);
      return;
    }
    int clone_id = (int)clones_.size();
    clones_.push_back({depth, 0, {}});
    Clone& clone = clones_.back();

    std::map<NodeId, int> local;
    for (const auto& [id, kind] : g.nodes) {
      if (kind.op == Op::Param) continue;
      if (kind.op == Op::Output && !is_entry) continue;
      int n = alloc_node();
      DNode& dn = nodes_[n];
      dn.kind = &kind;
      dn.key = g.name + "." + id;
      dn.clone = clone_id;
      int fixed = fixed_input_ports(kind.op);
      dn.ports = fixed >= 0 ? fixed : g.in_degree(id);
      dn.inputs.resize(dn.ports);
      dn.present.assign(dn.ports, 0);
      int op = fixed_output_ports(kind.op);
      if (op < 0) {
        const Graph* callee = prog_.find(kind.fn);
        op = callee ? callee->output_count() : 1;
      }
      dn.out.resize(op);
      dn.is_result = is_entry && kind.op == Op::Output && kind.index == 0;
      local[id] = n;
      clone.members.push_back(n);
      clone.remaining++;
      nodes_materialized_++;
    }
    peak_nodes_ = std::max(peak_nodes_, nodes_.size() - free_.size());

    // Wire edges. Param sources become argument deliveries; edges into the
    // skipped Output become deliveries to the call-site consumers.
    std::deque<std::pair<std::pair<int, int>, Payload>> arg_feed;
    for (const auto& e : g.data_edges) {
      const OpKind& src = g.nodes.at(e.src);
      const OpKind& dst = g.nodes.at(e.dst);
      std::vector<std::pair<int, int>> targets;
      if (dst.op == Op::Output && !is_entry) {
        if (dst.index < (int)outs.size()) targets = outs[dst.index];
      } else {
        targets = {{local.at(e.dst), e.dst_port}};
      }
      if (src.op == Op::Param) {
        for (auto [tn, tp] : targets)
          arg_feed.push_back({{tn, tp}, args[src.index]});
      } else {
        int sn = local.at(e.src);
        for (auto [tn, tp] : targets) nodes_[sn].out[e.src_port].push_back({tn, tp});
      }
    }

    // Constants materialize when the clone is spliced.
    for (const auto& [id, n] : local)
      if (nodes_[n].kind->op == Op::Const) queue(n);
    for (auto& [target, payload] : arg_feed)
      deliver(target.first, target.second, payload);
  }

  void queue(int n) {
    if (!nodes_[n].queued && !nodes_[n].fired) {
      nodes_[n].queued = true;
      ready_.push_back(n);
    }
  }

  void deliver(int n, int port, const Payload& p) {
    DNode& dn = nodes_[n];
    if (dn.kind->op == Op::Merge) {
      if (p.is_dead()) {
        dn.arrived++;  // merges count dead arrivals, forward the first live
      } else if (!dn.fired && !dn.present[0]) {
        dn.present[0] = 1;
        dn.inputs[0] = p;
        dn.arrived++;
      } else {
        dn.arrived++;
      }
      if (!dn.fired && (dn.present[0] || dn.arrived >= dn.ports)) queue(n);
      return;
    }
    if (port >= dn.ports || dn.present[port]) {
      fail("double or out-of-range delivery at " + dn.key, true);
      return;
    }
    dn.present[port] = 1;
    dn.inputs[port] = p;
    dn.arrived++;
    if (dn.arrived == dn.ports) queue(n);
  }

  void fire_node(int n) {
    DNode& dn = nodes_[n];
    if (dn.fired) return;
    dn.fired = true;
    steps_++;
    if (opts_.collect_stats) firings_[dn.key]++;
    if (steps_ > opts_.max_steps) {
      fail("step limit exceeded", false);
      return;
    }

    try {
      switch (dn.kind->op) {
        case Op::Const:
          emit(n, 0, Payload::scalar(dn.kind->value));
          break;
        case Op::Output:
          if (dn.is_result) result_ = dn.inputs[0];
          break;
        case Op::Merge: {
          Payload out = dn.present[0] ? dn.inputs[0] : Payload::dead();
          emit(n, 0, out);
          break;
        }
        case Op::FnCall:
          expand_call(n);
          break;
        case Op::Add:
        case Op::Sub:
        case Op::Mul:
        case Op::Div:
        case Op::Neg:
        case Op::Eq:
        case Op::Lt:
        case Op::Not:
        case Op::Switch: {
          std::vector<Token> in;
          for (int p = 0; p < dn.ports; ++p) in.push_back({Tag(), dn.inputs[p]});
          for (const auto& f : fire(*dn.kind, in))
            emit(n, f.port, f.token.payload);
          break;
        }
        default:
          throw EngineFault(std::string("operator ") + op_name(dn.kind->op) +
                            " is not supported by the dynamic executor");
      }
    } catch (const RuntimeProblem& e) {
      fail(std::string(e.what()) + " at " + dn.key, false);
      return;
    } catch (const EngineFault& e) {
      fail(std::string(e.what()) + " at " + dn.key, true);
      return;
    }
    finish_node(n);
  }

  void expand_call(int n) {
    DNode& dn = nodes_[n];
    const Graph* callee = prog_.find(dn.kind->fn);
    if (!callee) throw EngineFault("undefined function '" + dn.kind->fn + "'");

    bool dead = false;
    for (const auto& p : dn.inputs) dead |= p.is_dead();
    if (dead) {
      for (size_t port = 0; port < dn.out.size(); ++port)
        emit(n, (int)port, Payload::dead());
      return;
    }
    expansions_++;
    instantiate(*callee, clones_[dn.clone].depth + 1, dn.inputs, dn.out, false);
  }

  void emit(int n, int port, const Payload& p) {
    DNode& dn = nodes_[n];
    if (port >= (int)dn.out.size()) return;
    // Copy: deliveries may allocate nodes and invalidate dn.
    std::vector<std::pair<int, int>> targets = dn.out[port];
    for (auto [tn, tp] : targets) deliver(tn, tp, p);
  }

  void finish_node(int n) {
    int c = nodes_[n].clone;
    if (c < 0) return;
    if (--clones_[c].remaining == 0) {
      for (int m : clones_[c].members) {
        nodes_[m] = DNode{};
        free_.push_back(m);
      }
      clones_[c].members.clear();
      clones_[c].members.shrink_to_fit();
    }
  }

  void fail(const std::string& msg, bool internal) {
    if (halted_) return;
    halted_ = true;
    internal_ = internal;
    error_ = msg;
  }

  DynamicResult finish() {
    DynamicResult r;
    r.steps = steps_;
    r.expansions = expansions_;
    r.nodes_materialized = nodes_materialized_;
    r.peak_nodes = peak_nodes_;
    r.firings = std::move(firings_);
    if (halted_) {
      r.status = internal_ ? RunStatus::Fault : RunStatus::Error;
      r.error = error_;
    } else if (!result_) {
      r.status = RunStatus::Error;
      r.error = "deadlock: the output never received a token";
    } else if (result_->is_dead()) {
      r.status = RunStatus::Error;
      r.error = "program produced a dead result";
    } else {
      r.status = RunStatus::Ok;
      r.result = *result_;
    }
    return r;
  }

  const Program& prog_;
  DynamicOptions opts_;
  std::mt19937_64 rng_;

  std::deque<DNode> nodes_;
  std::vector<int> free_;
  std::vector<Clone> clones_;
  std::vector<int> ready_;

  uint64_t steps_ = 0;
  uint64_t expansions_ = 0;
  uint64_t nodes_materialized_ = 0;
  size_t peak_nodes_ = 0;
  std::map<NodeId, uint64_t> firings_;

  std::optional<Payload> result_;
  bool halted_ = false;
  bool internal_ = false;
  std::string error_;
};

inline DynamicResult run_dynamic(const Program& p, DynamicOptions opts = {}) {
  return DynamicExecutor(p, opts).run();
}

}  // namespace tagflow
