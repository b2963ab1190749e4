#pragma once

#include <functional>
#include <string>
#include <vector>

#include "crossing/tensor.hpp"

namespace crossing {

/// Ordered record of executed primitives.
///
/// Primitives record themselves on the thread's active tape (see TapeScope)
/// whenever at least one input requires a gradient. A tape can be replayed
/// by backward() exactly once.
class Tape {
 public:
  struct Entry {
    std::string kind;
    std::vector<Tensor> inputs;
    Tensor output;
    std::function<void()> backward;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  void record(Entry entry);
  std::size_t size() const { return entries_.size(); }
  bool consumed() const { return consumed_; }
  const std::vector<Entry>& entries() const { return entries_; }

  // Replay hook for backward(); marks the tape consumed and drops closures.
  // The visitor receives entries in reverse execution order.
  void replay(const std::function<void(const Entry&)>& visit);

 private:
  std::vector<Entry> entries_;
  bool consumed_ = false;
};

/// Installs a tape as the calling thread's recording target for its lifetime.
class TapeScope {
 public:
  explicit TapeScope(Tape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* previous_;
};

Tape* active_tape();

/// Reverse-mode pass: seeds dLoss/dLoss = 1 and replays the tape backwards.
/// Gradients accumulate into every requires_grad tensor reached. Returns the
/// leaves (requires_grad inputs never produced by a recorded primitive).
std::vector<Tensor> backward(Tape& tape, const Tensor& loss);

}  // namespace crossing
