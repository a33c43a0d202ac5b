#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace xsf {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& dims);
std::string shape_str(const Shape& dims);

// One vertex of the recorded graph. Leaves have no inputs and no backward rule.
struct Node {
  Shape dims;
  std::vector<float> data;
  std::vector<float> grad;  // empty means "absent"
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node& self)> backward;
  const char* op = "leaf";

  bool has_grad() const { return !grad.empty(); }
  // Allocates a zeroed gradient buffer on first use.
  std::vector<float>& grad_buffer();
};

// Reference-semantics handle onto a Node. Copying a Tensor aliases the same
// storage; use clone() for an independent copy.
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape dims, std::vector<float> data, bool requires_grad = false);

  static Tensor zeros(Shape dims, bool requires_grad = false);
  static Tensor full(Shape dims, float value, bool requires_grad = false);
  static Tensor scalar(float value, bool requires_grad = false);
  static Tensor from_node(std::shared_ptr<Node> node);

  bool defined() const { return node_ != nullptr; }
  const Shape& dims() const;
  std::size_t dim(std::size_t axis) const;
  std::size_t rank() const { return dims().size(); }
  std::size_t numel() const;

  std::span<const float> data() const;
  std::span<float> mutable_data();
  float item() const;

  bool requires_grad() const;
  void set_requires_grad(bool value);
  bool has_grad() const;
  std::span<const float> grad() const;
  void zero_grad();
  void clear_grad();

  // Leaf copy of the values, outside any graph.
  Tensor clone() const;
  Tensor detach() const { return clone(); }

  Node* node() const { return node_.get(); }
  const std::shared_ptr<Node>& shared_node() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

// Operations recorded for one reverse pass, inputs before outputs.
struct ComputeGraph {
  std::vector<Node*> order;
};

ComputeGraph record_graph(const Tensor& root);

// Accumulates d(loss)/d(t) into every reachable tensor with requires_grad.
void backward(const Tensor& loss);

bool grad_enabled();

// Disables graph recording on this thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

namespace detail {

// Builds an op result. Graph edges are only kept when recording is enabled and
// some input requires a gradient.
Tensor make_result(Shape dims, std::vector<float> data, std::vector<Tensor> inputs,
                   std::function<void(Node&)> backward, const char* op);

}  // namespace detail

}  // namespace xsf
