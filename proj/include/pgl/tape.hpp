#pragma once

#include <atomic>
#include <bit>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "pgl/tensor.hpp"

namespace pgl {

/// Computes input gradients from the output gradient. `needs[i]` is false for
/// inputs whose gradient is not wanted; the rule may return an undefined
/// tensor for those.
using BackwardFn = std::function<std::vector<Tensor>(const std::vector<Tensor>& inputs, const Tensor& output,
                                                     const Tensor& grad_output, const std::vector<bool>& needs)>;
using ForwardFn = std::function<Tensor(const std::vector<Tensor>& inputs)>;

struct TapeEntry {
  std::string op;
  std::vector<Tensor> inputs;
  Tensor output;
  BackwardFn backward;  // empty for leaves
  ForwardFn forward;    // empty for leaves
  // True when `backward` is built from recorded ops, so that its result can
  // itself be differentiated.
  bool backward_recordable = true;

  bool is_leaf() const { return !backward; }
};

/// Ordered record of the primitive operations of one computation. Entries are
/// appended in execution order, so every entry's inputs precede it.
class Tape {
 public:
  Tape() : id_(next_id()) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  std::uint64_t id() const { return id_; }
  std::size_t size() const { return entries_.size(); }
  const TapeEntry& entry(std::size_t i) const { return entries_.at(i); }

  /// Drops every entry. Tensors recorded earlier stop being "on" this tape.
  void clear() {
    entries_.clear();
    id_ = next_id();
  }

  /// Registers `t` as a leaf when it requires grad and is not yet on the tape.
  void ensure_node(const Tensor& t) {
    if (!t.requires_grad() || t.node_on(id_)) return;
    TapeEntry e;
    e.op = "leaf";
    e.output = t;
    attach(t, entries_.size());
    entries_.push_back(std::move(e));
  }

  void record(std::string op, std::vector<Tensor> inputs, const Tensor& output, BackwardFn backward, ForwardFn forward,
              bool backward_recordable) {
    for (const auto& in : inputs) ensure_node(in);
    TapeEntry e;
    e.op = std::move(op);
    e.inputs = std::move(inputs);
    e.output = output;
    e.backward = std::move(backward);
    e.forward = std::move(forward);
    e.backward_recordable = backward_recordable;
    output.impl()->requires_grad = true;
    attach(output, entries_.size());
    entries_.push_back(std::move(e));
  }

  /// Re-runs every recorded forward rule on its recorded inputs and checks the
  /// result matches the stored output bit for bit. Returns the index of the
  /// first mismatching entry, or size() when all match.
  std::size_t first_replay_mismatch() const {
    for (std::size_t i = 0; i < entries_.size(); ++i) {
      const auto& e = entries_[i];
      if (e.is_leaf()) continue;
      Tensor again = e.forward(e.inputs);
      if (again.shape() != e.output.shape()) return i;
      auto a = again.data();
      auto b = e.output.data();
      for (std::size_t k = 0; k < a.size(); ++k) {
        if (std::bit_cast<std::uint64_t>(a[k]) != std::bit_cast<std::uint64_t>(b[k])) return i;
      }
    }
    return entries_.size();
  }

  /// The innermost tape of the calling thread (a per-thread default tape when
  /// no TapeScope is open).
  static Tape& active() {
    auto* t = current();
    if (t) return *t;
    thread_local Tape fallback;
    return fallback;
  }

  static bool recording() { return grad_enabled(); }

 private:
  friend class TapeScope;
  friend class NoGradGuard;
  friend class EnableGradGuard;

  void attach(const Tensor& t, std::size_t node) {
    t.impl()->tape_id = id_;
    t.impl()->node = node;
  }

  static std::uint64_t next_id() {
    static std::atomic<std::uint64_t> counter{1};
    return counter.fetch_add(1, std::memory_order_relaxed);
  }
  static Tape*& current() {
    thread_local Tape* t = nullptr;
    return t;
  }
  static bool& grad_enabled() {
    thread_local bool enabled = true;
    return enabled;
  }

  std::uint64_t id_;
  std::vector<TapeEntry> entries_;
};

/// Opens a fresh tape for the enclosing block; it is discarded on exit.
class TapeScope {
 public:
  TapeScope() : prev_(Tape::current()) { Tape::current() = &tape_; }
  ~TapeScope() { Tape::current() = prev_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;
  Tape& tape() { return tape_; }

 private:
  Tape tape_;
  Tape* prev_;
};

class NoGradGuard {
 public:
  NoGradGuard() : prev_(Tape::grad_enabled()) { Tape::grad_enabled() = false; }
  ~NoGradGuard() { Tape::grad_enabled() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

class EnableGradGuard {
 public:
  explicit EnableGradGuard(bool enabled) : prev_(Tape::grad_enabled()) { Tape::grad_enabled() = enabled; }
  ~EnableGradGuard() { Tape::grad_enabled() = prev_; }
  EnableGradGuard(const EnableGradGuard&) = delete;
  EnableGradGuard& operator=(const EnableGradGuard&) = delete;

 private:
  bool prev_;
};

}  // namespace pgl
