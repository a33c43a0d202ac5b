#include "xsf/tensor.hpp"

#include <algorithm>
#include <sstream>
#include <unordered_set>

#include "xsf/error.hpp"

namespace xsf {

namespace {
thread_local bool g_grad_enabled = true;
}

std::size_t shape_numel(const Shape& dims) {
  std::size_t n = 1;
  for (auto d : dims) n *= d;
  return n;
}

std::string shape_str(const Shape& dims) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < dims.size(); ++i) {
    if (i) os << ',';
    os << dims[i];
  }
  os << ']';
  return os.str();
}

std::vector<float>& Node::grad_buffer() {
  if (grad.empty()) grad.assign(data.size(), 0.0f);
  return grad;
}

Tensor::Tensor(Shape dims, std::vector<float> data, bool requires_grad) {
  for (auto d : dims) {
    if (d == 0) throw Error(ErrorKind::InvalidShape, "zero-sized dim in " + shape_str(dims));
  }
  if (data.size() != shape_numel(dims)) {
    throw Error(ErrorKind::InvalidShape, "data length " + std::to_string(data.size()) +
                                             " does not match dims " + shape_str(dims));
  }
  node_ = std::make_shared<Node>();
  node_->dims = std::move(dims);
  node_->data = std::move(data);
  node_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Shape dims, bool requires_grad) { return full(std::move(dims), 0.0f, requires_grad); }

Tensor Tensor::full(Shape dims, float value, bool requires_grad) {
  const auto n = shape_numel(dims);
  return Tensor(std::move(dims), std::vector<float>(n, value), requires_grad);
}

Tensor Tensor::scalar(float value, bool requires_grad) { return Tensor({}, {value}, requires_grad); }

Tensor Tensor::from_node(std::shared_ptr<Node> node) {
  Tensor t;
  t.node_ = std::move(node);
  return t;
}

const Shape& Tensor::dims() const { return node_->dims; }

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= node_->dims.size()) {
    throw Error(ErrorKind::InvalidShape, "axis " + std::to_string(axis) + " out of range for " +
                                             shape_str(node_->dims));
  }
  return node_->dims[axis];
}

std::size_t Tensor::numel() const { return node_->data.size(); }

std::span<const float> Tensor::data() const { return node_->data; }
std::span<float> Tensor::mutable_data() { return node_->data; }

float Tensor::item() const {
  if (numel() != 1) throw Error(ErrorKind::InvalidCall, "item() on tensor of dims " + shape_str(dims()));
  return node_->data[0];
}

bool Tensor::requires_grad() const { return node_->requires_grad; }

void Tensor::set_requires_grad(bool value) {
  node_->requires_grad = value;
  if (!value) node_->grad.clear();
}

bool Tensor::has_grad() const { return node_->has_grad(); }
std::span<const float> Tensor::grad() const { return node_->grad; }

void Tensor::zero_grad() {
  if (node_->has_grad()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0f);
}

void Tensor::clear_grad() { node_->grad.clear(); }

Tensor Tensor::clone() const { return Tensor(node_->dims, node_->data, node_->requires_grad); }

ComputeGraph record_graph(const Tensor& root) {
  ComputeGraph graph;
  if (!root.defined() || !root.requires_grad()) return graph;
  // Iterative post-order DFS; post-order of a DAG is a valid topological order.
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(root.node(), 0);
  visited.insert(root.node());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node* child = node->inputs[next++].get();
      if (child->requires_grad && visited.insert(child).second) stack.emplace_back(child, 0);
    } else {
      graph.order.push_back(node);
      stack.pop_back();
    }
  }
  return graph;
}

void backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw Error(ErrorKind::InvalidCall,
                "backward() requires a scalar loss, got dims " + (loss.defined() ? shape_str(loss.dims()) : "<undefined>"));
  }
  if (!loss.requires_grad()) return;
  const auto graph = record_graph(loss);
  loss.node()->grad_buffer()[0] += 1.0f;
  for (auto it = graph.order.rbegin(); it != graph.order.rend(); ++it) {
    Node* node = *it;
    if (node->backward && node->has_grad()) node->backward(*node);
  }
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

namespace detail {

Tensor make_result(Shape dims, std::vector<float> data, std::vector<Tensor> inputs,
                   std::function<void(Node&)> backward, const char* op) {
  auto node = std::make_shared<Node>();
  node->dims = std::move(dims);
  node->data = std::move(data);
  node->op = op;
  bool needs = false;
  if (g_grad_enabled) {
    for (const auto& in : inputs) needs = needs || (in.defined() && in.requires_grad());
  }
  if (needs) {
    node->requires_grad = true;
    for (auto& in : inputs) {
      if (in.defined()) node->inputs.push_back(in.shared_node());
    }
    node->backward = std::move(backward);
  }
  return Tensor::from_node(std::move(node));
}

}  // namespace detail

}  // namespace xsf
