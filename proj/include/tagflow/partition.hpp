#pragma once

#include <cstdint>
#include <cstring>
#include <map>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "tagflow/graph.hpp"
#include "tagflow/tag.hpp"

namespace tagflow {

struct PartitionError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Worker assignment. Any total node -> worker map is legal; constant-pure
// nodes are silently co-located with their first consumer so demand-driven
// constants stay next to the node that pulls them.
// ---------------------------------------------------------------------------

struct Assignment {
  std::map<NodeId, int> worker_of;
  int workers = 1;
};

inline Assignment random_assignment(const Graph& g, int workers,
                                    uint64_t seed) {
  Assignment a;
  a.workers = workers;
  std::mt19937_64 rng(seed);
  for (const auto& [id, kind] : g.nodes)
    a.worker_of[id] = (int)(rng() % (uint64_t)workers);
  return a;
}

inline Assignment single_worker_assignment(const Graph& g) {
  Assignment a;
  a.workers = 1;
  for (const auto& [id, kind] : g.nodes) a.worker_of[id] = 0;
  return a;
}

// Plan file: one `node <id> -> worker <w>` line per node.
inline Assignment parse_plan(const std::string& text, const Graph& g) {
  Assignment a;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::istringstream ls(line);
    std::string kw, id, arrow, wkw;
    int w;
    if (!(ls >> kw)) continue;
    if (kw[0] == '#') continue;
    if (kw != "node" || !(ls >> id >> arrow >> wkw >> w) || arrow != "->" ||
        wkw != "worker")
      throw PartitionError("plan line " + std::to_string(lineno) +
                           ": expected 'node <id> -> worker <w>'");
    a.worker_of[id] = w;
    a.workers = std::max(a.workers, w + 1);
  }
  for (const auto& [id, kind] : g.nodes)
    if (!a.worker_of.count(id))
      throw PartitionError("plan does not assign node '" + id + "'");
  return a;
}

inline std::string format_plan(const Assignment& a) {
  std::string out;
  for (const auto& [id, w] : a.worker_of)
    out += "node " + id + " -> worker " + std::to_string(w) + "\n";
  return out;
}

// ---------------------------------------------------------------------------
// Partitioned program
// ---------------------------------------------------------------------------

struct ChannelInfo {
  enum class Kind { Data, Control, TrackerPulse };
  int id = 0;
  int src_worker = 0;
  int dst_worker = 0;
  Kind kind = Kind::Data;
  NodeId src;  // original source node (tap node for pulses)
  int src_port = 0;
  NodeId dst;  // original destination (tracker node for pulses)
  int dst_port = 0;
};

struct PartitionedProgram {
  int workers = 1;
  std::vector<Graph> parts;
  std::vector<ChannelInfo> channels;
  Assignment assignment;  // effective (constants co-located)
  Graph original;

  // Tag tracking (populated by build_tag_tracker).
  std::vector<int> tracker_holders;
  std::map<NodeId, std::vector<NodeId>> recv_gates;  // generator -> gated nodes
  std::vector<std::pair<NodeId, int>> bootstrap;     // (node, worker)
  bool tracker_enabled = true;

  NodeId send_node(int channel) const {
    return "ch" + std::to_string(channel) + ".s";
  }
  NodeId recv_node(int channel) const {
    return "ch" + std::to_string(channel) + ".r";
  }
};

namespace detail {

inline bool engine_const_pure(const Graph& g,
                              std::map<NodeId, bool>& memo,
                              const NodeId& id) {
  auto it = memo.find(id);
  if (it != memo.end()) return it->second;
  memo[id] = false;  // cycle guard
  const OpKind& k = g.nodes.at(id);
  bool pure = false;
  switch (k.op) {
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
    case Op::Not: {
      pure = true;
      for (const auto& e : g.control_edges)
        if (e.dst == id) pure = false;
      for (const auto& e : g.data_edges)
        if (e.dst == id) pure = pure && engine_const_pure(g, memo, e.src);
      break;
    }
    default:
      break;
  }
  memo[id] = pure;
  return pure;
}

}  // namespace detail

inline std::map<NodeId, bool> const_pure_map(const Graph& g) {
  std::map<NodeId, bool> memo;
  for (const auto& [id, kind] : g.nodes)
    detail::engine_const_pure(g, memo, id);
  return memo;
}

// Nodes of the root region whose inputs are all constant chains; their
// sources must be demand-seeded at the empty tag. Mirrors the executor's
// bootstrap so the partitioner can seed each worker.
inline std::vector<NodeId> entry_bootstrap_nodes(const Graph& g) {
  std::vector<NodeId> out;
  auto out_id = g.output_node(0);
  if (!out_id) return out;
  auto pure = const_pure_map(g);

  std::map<NodeId, std::vector<NodeId>> ctrl_src, data_src;
  for (const auto& e : g.control_edges) ctrl_src[e.dst].push_back(e.src);
  for (const auto& e : g.data_edges) data_src[e.dst].push_back(e.src);

  std::set<NodeId> seen{*out_id};
  std::vector<NodeId> work{*out_id};
  while (!work.empty()) {
    NodeId u = work.back();
    work.pop_back();
    auto visit = [&](const NodeId& v) {
      if (seen.insert(v).second) work.push_back(v);
    };
    if (g.nodes.at(u).op != Op::Return)
      for (const auto& v : data_src[u]) visit(v);
    for (const auto& v : ctrl_src[u]) visit(v);
  }

  for (const auto& u : seen) {
    const OpKind& k = g.nodes.at(u);
    if (pure.at(u) || ctrl_src.count(u)) continue;
    int ports = fixed_input_ports(k.op);
    if (ports < 0) ports = g.in_degree(u);
    if (ports == 0) continue;
    std::vector<NodeId> srcs(ports);
    bool all = true;
    for (const auto& e : g.data_edges)
      if (e.dst == u && e.dst_port < ports) srcs[e.dst_port] = e.src;
    for (int p = 0; p < ports; ++p)
      all = all && !srcs[p].empty() && pure.at(srcs[p]);
    if (all) out.push_back(u);
  }
  std::sort(out.begin(), out.end());
  return out;
}

// Splits a transformed graph across workers: each cross-worker edge becomes
// exactly one Send/Recv pair over a fresh channel. Control-edge crossings
// carry their unit/dead tokens over channels of kind Control.
inline PartitionedProgram partition(const Graph& g, const Assignment& user) {
  PartitionedProgram pp;
  pp.workers = user.workers;
  pp.original = g;
  pp.assignment = user;
  pp.parts.resize(user.workers);
  for (int w = 0; w < user.workers; ++w) {
    pp.parts[w].name = "w" + std::to_string(w);
    pp.parts[w].arity = 0;
  }

  // Co-locate constant-pure chains with their first consumer.
  auto pure = const_pure_map(g);
  std::map<NodeId, std::vector<std::pair<NodeId, int>>> consumers;
  {
    auto sorted = g.data_edges;
    std::sort(sorted.begin(), sorted.end());
    for (const auto& e : sorted) consumers[e.src].push_back({e.dst, 0});
  }
  std::map<NodeId, int>& w_of = pp.assignment.worker_of;
  std::function<int(const NodeId&)> resolve = [&](const NodeId& id) -> int {
    auto it = w_of.find(id);
    if (it == w_of.end())
      throw PartitionError("assignment misses node '" + id + "'");
    if (!pure.at(id) || consumers[id].empty()) return it->second;
    int w = resolve(consumers[id][0].first);
    it->second = w;
    return w;
  };
  for (const auto& [id, kind] : g.nodes) resolve(id);

  for (const auto& [id, kind] : g.nodes)
    pp.parts[w_of.at(id)].add_node(id, kind);

  int next_ch = 0;
  for (const auto& e : g.data_edges) {
    int ws = w_of.at(e.src), wd = w_of.at(e.dst);
    if (ws == wd) {
      pp.parts[ws].add_edge(e.src, e.src_port, e.dst, e.dst_port);
      continue;
    }
    int ch = next_ch++;
    ChannelInfo ci{ch, ws, wd, ChannelInfo::Kind::Data,
                   e.src, e.src_port, e.dst, e.dst_port};
    pp.channels.push_back(ci);
    pp.parts[ws].add_node(pp.send_node(ch), OpKind::send(ch));
    pp.parts[ws].add_edge(e.src, e.src_port, pp.send_node(ch), 0);
    pp.parts[wd].add_node(pp.recv_node(ch), OpKind::recv(ch));
    pp.parts[wd].add_edge(pp.recv_node(ch), 0, e.dst, e.dst_port);
  }
  for (const auto& e : g.control_edges) {
    int ws = w_of.at(e.src), wd = w_of.at(e.dst);
    if (ws == wd) {
      pp.parts[ws].add_control_edge(e.src, e.dst, e.src_port);
      continue;
    }
    int ch = next_ch++;
    ChannelInfo ci{ch, ws, wd, ChannelInfo::Kind::Control,
                   e.src, e.src_port, e.dst, 0};
    pp.channels.push_back(ci);
    pp.parts[ws].add_node(pp.send_node(ch), OpKind::send(ch));
    pp.parts[ws].add_control_edge(e.src, pp.send_node(ch), e.src_port);
    pp.parts[wd].add_node(pp.recv_node(ch), OpKind::recv(ch));
    pp.parts[wd].add_control_edge(pp.recv_node(ch), e.dst);
  }

  // Seed demands: root-region constant consumers, plus root-feeding Sends
  // whose data source is a constant chain (their consumer lives remotely).
  for (const auto& id : entry_bootstrap_nodes(g))
    pp.bootstrap.push_back({id, w_of.at(id)});
  return pp;
}

// Erases the partitioning apparatus: the union of all parts minus Send/Recv
// and tracker nodes, with channel edges restored, must equal the original.
inline Graph departition(const PartitionedProgram& pp) {
  Graph g;
  g.name = pp.original.name;
  g.arity = pp.original.arity;
  for (const auto& part : pp.parts) {
    for (const auto& [id, kind] : part.nodes) {
      if (kind.op == Op::Send || kind.op == Op::Recv) continue;
      if (id.rfind("tk$", 0) == 0) continue;
      g.add_node(id, kind);
    }
    for (const auto& e : part.data_edges) {
      if (part.nodes.at(e.src).op == Op::Recv) continue;
      if (part.nodes.at(e.dst).op == Op::Send) continue;
      if (e.src.rfind("tk$", 0) == 0 || e.dst.rfind("tk$", 0) == 0) continue;
      g.add_edge(e.src, e.src_port, e.dst, e.dst_port);
    }
    for (const auto& e : part.control_edges) {
      if (part.nodes.at(e.src).op == Op::Recv ||
          part.nodes.at(e.dst).op == Op::Send)
        continue;
      if (e.src.rfind("tk$", 0) == 0 || e.dst.rfind("tk$", 0) == 0) continue;
      // gate edges from real generators to Send/Recv nodes are tracker
      // apparatus as well
      if (part.nodes.at(e.dst).op == Op::Recv) continue;
      g.add_control_edge(e.src, e.dst, e.src_port);
    }
  }
  for (const auto& c : pp.channels) {
    if (c.kind == ChannelInfo::Kind::Data)
      g.add_edge(c.src, c.src_port, c.dst, c.dst_port);
    else if (c.kind == ChannelInfo::Kind::Control)
      g.add_control_edge(c.src, c.dst, c.src_port);
  }
  return g;
}

// ---------------------------------------------------------------------------
// Message wire format: length-prefixed little-endian records.
//   u32 channel id, u32 frame count, frames as (u8 kind, u64 value) from the
//   tag head outward, u8 payload kind (0 scalar, 1 bool, 2 dead), f64 value.
// ---------------------------------------------------------------------------

namespace wire {

inline void put_u32(std::string& out, uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(char((v >> (8 * i)) & 0xff));
}
inline void put_u64(std::string& out, uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(char((v >> (8 * i)) & 0xff));
}

inline std::string encode(uint32_t channel, const Tag& tag,
                          const Payload& payload) {
  std::string body;
  put_u32(body, channel);
  put_u32(body, tag.depth());
  tag.each_frame([&](const Frame& f) {
    body.push_back(f.kind == Frame::Kind::Loop ? 0 : 1);
    put_u64(body, f.value);
  });
  body.push_back((char)payload.kind);
  double num = payload.is_scalar() ? payload.num
               : payload.is_bool() ? (payload.truth ? 1.0 : 0.0)
                                   : 0.0;
  uint64_t bits;
  std::memcpy(&bits, &num, 8);
  put_u64(body, bits);
  std::string out;
  put_u32(out, (uint32_t)body.size());
  return out + body;
}

struct Decoded {
  uint32_t channel = 0;
  Tag tag;
  Payload payload;
  size_t consumed = 0;
};

inline Decoded decode(const std::string& buf, size_t at = 0) {
  auto need = [&](size_t n) {
    if (at + n > buf.size()) throw PartitionError("truncated wire record");
  };
  auto get_u32 = [&]() {
    need(4);
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= uint32_t((unsigned char)buf[at++]) << (8 * i);
    return v;
  };
  auto get_u64 = [&]() {
    need(8);
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= uint64_t((unsigned char)buf[at++]) << (8 * i);
    return v;
  };
  Decoded d;
  size_t start = at;
  uint32_t len = get_u32();
  need(len);
  d.channel = get_u32();
  uint32_t frames = get_u32();
  std::vector<Frame> fs(frames);
  for (uint32_t i = 0; i < frames; ++i) {
    need(1);
    uint8_t kind = (uint8_t)buf[at++];
    if (kind > 1) throw PartitionError("bad frame kind in wire record");
    fs[i] = {kind == 0 ? Frame::Kind::Loop : Frame::Kind::Call, get_u64()};
  }
  for (auto it = fs.rbegin(); it != fs.rend(); ++it) d.tag = d.tag.push(*it);
  need(1);
  uint8_t pk = (uint8_t)buf[at++];
  uint64_t bits = get_u64();
  double num;
  std::memcpy(&num, &bits, 8);
  switch (pk) {
    case 0: d.payload = Payload::scalar(num); break;
    case 1: d.payload = Payload::boolean(num != 0.0); break;
    case 2: d.payload = Payload::dead(); break;
    default: throw PartitionError("bad payload kind in wire record");
  }
  d.consumed = at - start;
  if (d.consumed != len + 4) throw PartitionError("wire record length mismatch");
  return d;
}

}  // namespace wire

}  // namespace tagflow
