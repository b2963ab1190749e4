#include "crossing/tape.hpp"

#include <stdexcept>
#include <unordered_set>

namespace crossing {

namespace {
thread_local Tape* g_active_tape = nullptr;
}

void Tape::record(Entry entry) {
  if (consumed_) throw std::logic_error("tape: recording on a consumed tape");
  entries_.push_back(std::move(entry));
}

void Tape::replay(const std::function<void(const Entry&)>& visit) {
  if (consumed_) throw std::logic_error("tape: already consumed by a previous backward pass");
  consumed_ = true;
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
    visit(*it);
    it->backward = nullptr;
  }
  entries_.clear();
}

TapeScope::TapeScope(Tape& tape) : previous_(g_active_tape) { g_active_tape = &tape; }
TapeScope::~TapeScope() { g_active_tape = previous_; }

Tape* active_tape() { return g_active_tape; }

std::vector<Tensor> backward(Tape& tape, const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ShapeError("backward: loss must be a scalar, got shape " +
                     (loss.defined() ? shape_string(loss.shape()) : std::string("<undefined>")));
  }
  if (tape.consumed()) throw std::logic_error("backward: tape already consumed");
  if (!loss.requires_grad()) {
    throw std::logic_error("backward: loss does not depend on any requires_grad tensor");
  }

  std::unordered_set<const detail::TensorImpl*> produced;
  for (const auto& e : tape.entries()) produced.insert(e.output.impl().get());

  std::vector<Tensor> leaves;
  std::unordered_set<const detail::TensorImpl*> seen;
  for (const auto& e : tape.entries()) {
    for (const auto& in : e.inputs) {
      const auto* p = in.impl().get();
      if (in.requires_grad() && !produced.count(p) && seen.insert(p).second) {
        leaves.push_back(in);
      }
    }
  }

  const double one = 1.0;
  loss.impl()->accumulate_grad(std::span<const double>(&one, 1));
  tape.replay([](const Tape::Entry& e) {
    if (e.output.has_grad() && e.backward) e.backward();
  });
  return leaves;
}

}  // namespace crossing
