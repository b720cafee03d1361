#pragma once

#include <cstdint>
#include <memory>
#include <string>

namespace tagflow {

// One element of a tag: a loop frame carries an iteration counter, a call
// frame carries the label of the Call_i that created it.
struct Frame {
  enum class Kind : uint8_t { Loop = 0, Call = 1 };
  Kind kind = Kind::Loop;
  uint64_t value = 0;

  static Frame loop(uint64_t n) { return {Kind::Loop, n}; }
  static Frame call(uint64_t label) { return {Kind::Call, label}; }

  friend bool operator==(const Frame& a, const Frame& b) {
    return a.kind == b.kind && a.value == b.value;
  }
};

// A tag is an immutable stack of frames, head = innermost scope. Push and
// pop are O(1) and share the suffix; equality short-circuits on depth and a
// precomputed hash, since tag comparisons dominate token matching.
class Tag {
  struct Node {
    Frame frame;
    std::shared_ptr<const Node> parent;
    uint32_t depth;
    size_t hash;
  };

 public:
  Tag() = default;

  bool empty() const { return head_ == nullptr; }
  uint32_t depth() const { return head_ ? head_->depth : 0; }
  const Frame& head() const { return head_->frame; }

  Tag push(Frame f) const {
    auto n = std::make_shared<Node>();
    n->frame = f;
    n->parent = head_;
    n->depth = depth() + 1;
    size_t h = head_ ? head_->hash : 0x9e3779b97f4a7c15ull;
    h ^= (uint64_t(f.kind) << 62) ^ (f.value + 0x9e3779b9);
    h *= 0xff51afd7ed558ccdull;
    h ^= h >> 33;
    n->hash = h;
    return Tag(std::move(n));
  }

  Tag pop() const { return Tag(head_->parent); }

  size_t hash() const { return head_ ? head_->hash : 0; }

  friend bool operator==(const Tag& a, const Tag& b) {
    const Node* x = a.head_.get();
    const Node* y = b.head_.get();
    if (x == y) return true;
    if (!x || !y || x->depth != y->depth || x->hash != y->hash) return false;
    while (x != y) {
      if (!x || !y || !(x->frame == y->frame)) return false;
      x = x->parent.get();
      y = y->parent.get();
    }
    return true;
  }
  friend bool operator!=(const Tag& a, const Tag& b) { return !(a == b); }

  // Head-first rendering: a call frame 1 inside call frame 0 is "[c1,c0]".
  std::string str() const {
    std::string s = "[";
    for (const Node* n = head_.get(); n; n = n->parent.get()) {
      if (s.size() > 1) s += ",";
      s += n->frame.kind == Frame::Kind::Call ? "c" : "l";
      s += std::to_string(n->frame.value);
    }
    return s + "]";
  }

  // Frames from head to root, for serialization.
  template <typename Fn>
  void each_frame(Fn&& fn) const {
    for (const Node* n = head_.get(); n; n = n->parent.get()) fn(n->frame);
  }

 private:
  explicit Tag(std::shared_ptr<const Node> head) : head_(std::move(head)) {}
  std::shared_ptr<const Node> head_;
};

// Token payloads: a scalar, a boolean (comparison results, switch
// predicates), or the hiaton marking absent data. Control tokens use
// unit(), a live boolean.
struct Payload {
  enum class Kind : uint8_t { Scalar = 0, Bool = 1, Dead = 2 };
  Kind kind = Kind::Dead;
  double num = 0.0;
  bool truth = false;

  static Payload scalar(double v) { return {Kind::Scalar, v, false}; }
  static Payload boolean(bool b) { return {Kind::Bool, 0.0, b}; }
  static Payload dead() { return {Kind::Dead, 0.0, false}; }
  static Payload unit() { return boolean(true); }

  bool is_dead() const { return kind == Kind::Dead; }
  bool is_scalar() const { return kind == Kind::Scalar; }
  bool is_bool() const { return kind == Kind::Bool; }

  std::string str() const {
    switch (kind) {
      case Kind::Scalar: {
        char buf[32];
        std::snprintf(buf, sizeof(buf), "%g", num);
        return buf;
      }
      case Kind::Bool: return truth ? "true" : "false";
      default: return "dead";
    }
  }

  friend bool operator==(const Payload& a, const Payload& b) {
    if (a.kind != b.kind) return false;
    switch (a.kind) {
      case Kind::Scalar: return a.num == b.num;
      case Kind::Bool: return a.truth == b.truth;
      default: return true;
    }
  }
};

struct Token {
  Tag tag;
  Payload payload;
};

}  // namespace tagflow
