#include "wstta/nn/tape.hpp"

#include <atomic>
#include <cstring>
#include <optional>

namespace wstta::nn {

namespace {
std::atomic<std::uint64_t> next_tape_id{1};
}

Tape::Tape() : id_(next_tape_id.fetch_add(1)) {}

Var Tape::constant(Tensor value) {
  Node n;
  n.op = "constant";
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return Var{id_, nodes_.size() - 1};
}

Var Tape::parameter(std::string name, Tensor value, bool trainable) {
  for (const Node& other : nodes_) {
    if (other.op == "parameter" && other.name == name) throw UsageError("duplicate parameter name '" + name + "'");
  }
  Node n;
  n.op = "parameter";
  n.name = std::move(name);
  n.value = std::move(value);
  n.trainable = trainable;
  n.needs_grad = trainable;
  nodes_.push_back(std::move(n));
  return Var{id_, nodes_.size() - 1};
}

std::size_t Tape::checked(Var v) const {
  if (v.tape_id != id_ || v.index >= nodes_.size()) {
    throw UsageError("variable does not belong to this tape");
  }
  return v.index;
}

Var Tape::record(std::string op, std::vector<Var> inputs, ForwardFn forward, BackwardFn backward) {
  Node n;
  n.op = std::move(op);
  std::vector<const Tensor*> in;
  in.reserve(inputs.size());
  for (const Var& v : inputs) {
    const std::size_t i = checked(v);
    n.inputs.push_back(i);
    in.push_back(&nodes_[i].value);
    n.needs_grad = n.needs_grad || nodes_[i].needs_grad;
  }
  n.value = forward(in);
  n.forward = std::move(forward);
  n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return Var{id_, nodes_.size() - 1};
}

const Tensor& Tape::value(Var v) const { return nodes_[checked(v)].value; }
bool Tape::requires_grad(Var v) const { return nodes_[checked(v)].needs_grad; }
const std::string& Tape::op_name(Var v) const { return nodes_[checked(v)].op; }

std::vector<std::string> Tape::trainable_names() const {
  std::vector<std::string> names;
  for (const Node& n : nodes_) {
    if (n.trainable) names.push_back(n.name);
  }
  return names;
}

Gradients Tape::backward(Var loss) const {
  const std::size_t root = checked(loss);
  if (nodes_[root].value.size() != 1) {
    throw UsageError("backward() needs a scalar loss, got shape " + shape_to_string(nodes_[root].value.shape()));
  }
  last_order_.clear();
  std::vector<std::optional<Tensor>> grads(nodes_.size());
  grads[root] = Tensor(nodes_[root].value.shape(), 1.0);

  std::vector<const Tensor*> in;
  std::vector<Tensor*> gin;
  for (std::size_t i = root + 1; i-- > 0;) {
    const Node& n = nodes_[i];
    if (!grads[i] || !n.needs_grad || !n.backward) continue;
    last_order_.push_back(i);
    in.clear();
    gin.clear();
    for (std::size_t j : n.inputs) {
      in.push_back(&nodes_[j].value);
      if (nodes_[j].needs_grad) {
        if (!grads[j]) grads[j] = Tensor(nodes_[j].value.shape(), 0.0);
        gin.push_back(&*grads[j]);
      } else {
        gin.push_back(nullptr);
      }
    }
    n.backward(in, n.value, *grads[i], gin);
  }

  Gradients out;
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    const Node& n = nodes_[i];
    if (!n.trainable) continue;
    Tensor g = grads[i] ? std::move(*grads[i]) : Tensor(n.value.shape(), 0.0);
    auto [it, inserted] = out.emplace(n.name, std::move(g));
    if (!inserted) throw UsageError("duplicate trainable slot '" + n.name + "'");
  }
  return out;
}

bool Tape::replay_matches() const {
  std::vector<const Tensor*> in;
  for (const Node& n : nodes_) {
    if (!n.forward) continue;
    in.clear();
    for (std::size_t j : n.inputs) in.push_back(&nodes_[j].value);
    const Tensor again = n.forward(in);
    if (again.shape() != n.value.shape()) return false;
    if (again.size() != 0 &&
        std::memcmp(again.data(), n.value.data(), again.size() * sizeof(double)) != 0) {
      return false;
    }
  }
  return true;
}

}  // namespace wstta::nn
