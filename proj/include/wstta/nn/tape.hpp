#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "wstta/nn/tensor.hpp"

namespace wstta::nn {

/// Handle to a value recorded on a Tape. Handles remember which tape
/// produced them so a foreign handle is rejected instead of aliasing.
struct Var {
  std::uint64_t tape_id = 0;
  std::size_t index = 0;
};

using Gradients = std::map<std::string, Tensor>;

/// Linear trace of executed primitives for reverse-mode differentiation.
///
/// Leaves are constants or named parameter slots; a slot flagged trainable
/// receives a gradient from backward(). Every recorded op keeps the closure
/// that produced its output so the trace can be replayed and checked.
class Tape {
 public:
  using ForwardFn = std::function<Tensor(std::span<const Tensor* const> inputs)>;
  /// grad_in[i] is null when input i does not need a gradient; otherwise it
  /// is a zero-initialised (or partially accumulated) buffer to add into.
  using BackwardFn = std::function<void(std::span<const Tensor* const> inputs, const Tensor& output,
                                        const Tensor& grad_out, std::span<Tensor* const> grad_in)>;

  Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  Tape(Tape&&) noexcept = default;
  Tape& operator=(Tape&&) noexcept = default;

  Var constant(Tensor value);
  Var parameter(std::string name, Tensor value, bool trainable);

  Var record(std::string op, std::vector<Var> inputs, ForwardFn forward, BackwardFn backward);

  const Tensor& value(Var v) const;
  bool requires_grad(Var v) const;
  const std::string& op_name(Var v) const;
  std::size_t size() const noexcept { return nodes_.size(); }
  std::uint64_t id() const noexcept { return id_; }

  std::vector<std::string> trainable_names() const;

  /// Reverse sweep from a scalar. Returns one gradient per trainable slot.
  Gradients backward(Var loss) const;

  /// Order in which the last backward() visited op nodes.
  const std::vector<std::size_t>& last_backward_order() const noexcept { return last_order_; }

  /// Recomputes every op from its recorded inputs and reports whether all
  /// outputs are bitwise identical to the stored ones.
  bool replay_matches() const;

 private:
  struct Node {
    std::string op;
    std::vector<std::size_t> inputs;
    Tensor value;
    ForwardFn forward;
    BackwardFn backward;
    std::string name;
    bool trainable = false;
    bool needs_grad = false;
  };

  std::size_t checked(Var v) const;

  std::uint64_t id_;
  std::vector<Node> nodes_;
  mutable std::vector<std::size_t> last_order_;
};

}  // namespace wstta::nn
