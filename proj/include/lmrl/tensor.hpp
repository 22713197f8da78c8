#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace lmrl {

using Shape = std::vector<int>;

std::size_t shape_size(const Shape& shape);
std::string shape_string(const Shape& shape);

struct Node;
using NodePtr = std::shared_ptr<Node>;

// One vertex of the recorded compute graph. `backward` reads `grad` and
// accumulates into the parents' grads.
struct Node {
  Shape shape;
  std::vector<float> data;
  std::vector<float> grad;  // empty until something flows into it
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<NodePtr> parents;
  std::function<void(Node&)> backward;

  float* grad_buffer();  // allocates zeros on first use
};

/// Dense row-major float tensor with an optional gradient slot.
///
/// Copies share storage (handle semantics, as in the usual autograd
/// libraries); use `clone()` for an independent value.
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<float> data, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, float value, bool requires_grad = false);
  static Tensor scalar(float value, bool requires_grad = false);
  static Tensor normal(Shape shape, float stddev, std::mt19937_64& rng,
                       bool requires_grad = false);
  static Tensor uniform(Shape shape, float low, float high, std::mt19937_64& rng,
                        bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  int dim(int axis) const;
  int rank() const { return static_cast<int>(shape().size()); }
  std::size_t size() const;

  std::span<float> data();
  std::span<const float> data() const;
  float item() const;
  float at(std::size_t flat_index) const { return data()[flat_index]; }

  bool requires_grad() const;
  void set_requires_grad(bool value);
  bool has_grad() const;
  std::span<float> grad();
  std::span<const float> grad() const;
  void zero_grad();

  Tensor clone() const;  // detached deep copy
  Tensor detach() const;  // shares nothing, no graph
  const char* op_name() const;

  /// Reverse-mode sweep from this scalar. Leaf grads accumulate (+=).
  void backward() const;

  const NodePtr& node() const { return node_; }
  static Tensor from_node(NodePtr node);

 private:
  NodePtr node_;
};

/// Graph recording is on by default; this guard disables it for the scope
/// (evaluation rollouts, finite-difference probes).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_mode_enabled();

// Builds the output node of an op. Parents are attached only when graph
// recording is on and at least one input needs a gradient.
Tensor make_result(Shape shape, std::vector<float> data, const char* op,
                   std::vector<Tensor> inputs, std::function<void(Node&)> backward);

}  // namespace lmrl
